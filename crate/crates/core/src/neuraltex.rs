//! Padded coarse/latent body textures, the pose-conditioned warp field and
//! the fine colour network.
//!
//! Texture coordinates are pixel coordinates in the padded texture: with a
//! zero warp, image pixel `x` maps to texel `x + (P, P)`.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::coremath::{BilinearTaps, Grid, PosEnc, Vec2, Vec3};
use crate::mlp::{Activation, Mlp, MlpCache, MlpGrads};
use crate::rig::{FrameParams, Rig};

pub const PIXEL_FREQUENCIES: usize = 10;
pub const POSE_FREQUENCIES: usize = 2;
pub const CAMERA_FREQUENCIES: usize = 2;
pub const LANDMARK_FREQUENCIES: usize = 10;
/// Fine colour is `FINE_SCALE * tanh(.)`.
pub const FINE_SCALE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralTexture {
    pub coarse: Grid,
    pub latent: Grid,
    pub padding: usize,
}

impl NeuralTexture {
    /// White coarse texture and uniform random latent texture for an
    /// `image_width x image_height` image.
    pub fn new(image_width: usize, image_height: usize, padding: usize, latent_dim: usize, rng: &mut impl Rng) -> Self {
        let w = image_width + 2 * padding;
        let h = image_height + 2 * padding;
        Self {
            coarse: Grid::filled(w, h, 3, 1.0),
            latent: Grid::from_fn(w, h, latent_dim, |_, _, _| rng.random::<f64>()),
            padding,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent.channels
    }

    pub fn to_texture_frame(&self, p: Vec2) -> Vec2 {
        p + Vec2::repeat(self.padding as f64)
    }
}

/// Conditioning shared by every pixel of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conditioning {
    pub include_nose: bool,
}

impl Conditioning {
    pub fn n_landmarks(&self) -> usize {
        if self.include_nose {
            4
        } else {
            3
        }
    }

    pub fn raw_dim(&self, rig: &Rig) -> usize {
        3 * rig.conditioning_joints.len() + 3 + 2 * self.n_landmarks()
    }

    pub fn encoded_dim(&self, rig: &Rig) -> usize {
        PosEnc::new(POSE_FREQUENCIES).output_dim(3 * rig.conditioning_joints.len())
            + PosEnc::new(CAMERA_FREQUENCIES).output_dim(3)
            + PosEnc::new(LANDMARK_FREQUENCIES).output_dim(2 * self.n_landmarks())
    }

    /// Raw conditioning values: joint rotations, camera position and
    /// normalized landmarks.
    pub fn raw(&self, rig: &Rig, frame: &FrameParams) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.raw_dim(rig));
        for &j in &rig.conditioning_joints {
            v.extend_from_slice(&frame.theta[3 * j..3 * j + 3]);
        }
        v.extend_from_slice(frame.cam.position.as_slice());
        let (w, h) = (frame.cam.width, frame.cam.height);
        for l in frame.ldmk.iter().take(self.n_landmarks()) {
            let n = normalize_pixel(*l, w, h);
            v.push(n.x);
            v.push(n.y);
        }
        v
    }

    pub fn encode_raw(&self, rig: &Rig, raw: &[f64]) -> Vec<f64> {
        let nj = 3 * rig.conditioning_joints.len();
        let mut out = PosEnc::new(POSE_FREQUENCIES).encode(&raw[..nj]);
        out.extend(PosEnc::new(CAMERA_FREQUENCIES).encode(&raw[nj..nj + 3]));
        out.extend(PosEnc::new(LANDMARK_FREQUENCIES).encode(&raw[nj + 3..]));
        out
    }

    pub fn encode(&self, rig: &Rig, frame: &FrameParams) -> Vec<f64> {
        self.encode_raw(rig, &self.raw(rig, frame))
    }

    /// Gradient with respect to the raw conditioning values.
    pub fn encode_backward(&self, rig: &Rig, raw: &[f64], d_enc: &[f64]) -> Vec<f64> {
        let nj = 3 * rig.conditioning_joints.len();
        let mut d_raw = vec![0.0; raw.len()];
        let pe = PosEnc::new(POSE_FREQUENCIES);
        let ce = PosEnc::new(CAMERA_FREQUENCIES);
        let le = PosEnc::new(LANDMARK_FREQUENCIES);
        let a = pe.output_dim(nj);
        let b = a + ce.output_dim(3);
        pe.backward(&raw[..nj], &d_enc[..a], &mut d_raw[..nj]);
        ce.backward(&raw[nj..nj + 3], &d_enc[a..b], &mut d_raw[nj..nj + 3]);
        le.backward(&raw[nj + 3..], &d_enc[b..], &mut d_raw[nj + 3..]);
        d_raw
    }
}

/// Maps a pixel coordinate to `[-1, 1]` over the image extent.
pub fn normalize_pixel(p: Vec2, width: usize, height: usize) -> Vec2 {
    Vec2::new(
        2.0 * p.x / (width as f64 - 1.0) - 1.0,
        2.0 * p.y / (height as f64 - 1.0) - 1.0,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarpNet {
    pub mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineNet {
    pub mlp: Mlp,
}

impl WarpNet {
    pub fn new(cond_dim: usize, width: usize, hidden_layers: usize, rng: &mut impl Rng) -> Self {
        let input = PosEnc::new(PIXEL_FREQUENCIES).output_dim(2) + cond_dim;
        Self {
            mlp: Mlp::new(input, width, hidden_layers, 2, Activation::Identity, rng),
        }
    }
}

impl FineNet {
    pub fn new(latent_dim: usize, cond_dim: usize, width: usize, hidden_layers: usize, rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp::new(latent_dim + cond_dim, width, hidden_layers, 3, Activation::Tanh, rng),
        }
    }
}

/// Result of warping a batch of image-plane points.
#[derive(Debug, Clone)]
pub struct WarpEval {
    pub points: Vec<Vec2>,
    pub delta: Vec<Vec2>,
    pub texture_xy: Vec<Vec2>,
    cache: MlpCache,
    width: usize,
    height: usize,
}

impl WarpNet {
    pub fn warp_batch(&self, points: &[Vec2], cond: &[f64], padding: usize, width: usize, height: usize) -> WarpEval {
        let pe = PosEnc::new(PIXEL_FREQUENCIES);
        let dim = pe.output_dim(2);
        let mut x = Array2::<f64>::zeros((points.len(), dim));
        for (mut row, p) in x.outer_iter_mut().zip(points) {
            let n = normalize_pixel(*p, width, height);
            pe.encode_into(&[n.x, n.y], row.as_slice_mut().expect("contiguous"));
        }
        let cache = self.mlp.forward(x.view(), cond);
        let delta: Vec<Vec2> = cache.output.outer_iter().map(|r| Vec2::new(r[0], r[1])).collect();
        let pad = Vec2::repeat(padding as f64);
        let texture_xy = points.iter().zip(&delta).map(|(p, d)| p + pad + d).collect();
        WarpEval {
            points: points.to_vec(),
            delta,
            texture_xy,
            cache,
            width,
            height,
        }
    }

    /// Single-point warp.
    pub fn warp(&self, view_xy: Vec2, cond: &[f64], padding: usize, width: usize, height: usize) -> Vec2 {
        self.warp_batch(&[view_xy], cond, padding, width, height).texture_xy[0]
    }

    /// Backward for gradients on the warp offsets. Returns the gradient on
    /// each input point when `want_points` is set (offset path only; the
    /// identity term is added by the caller) and on the shared conditioning.
    pub fn backward(
        &self,
        eval: &WarpEval,
        d_delta: &[Vec2],
        grads: &mut MlpGrads,
        want_points: bool,
    ) -> (Option<Vec<Vec2>>, Vec<f64>) {
        let d = Array2::from_shape_fn((d_delta.len(), 2), |(i, c)| d_delta[i][c]);
        let (dx, d_shared) = self.mlp.backward(&eval.cache, d.view(), grads, want_points);
        let d_points = dx.map(|dx| {
            let pe = PosEnc::new(PIXEL_FREQUENCIES);
            let sx = 2.0 / (eval.width as f64 - 1.0);
            let sy = 2.0 / (eval.height as f64 - 1.0);
            eval.points
                .iter()
                .zip(dx.outer_iter())
                .map(|(p, row)| {
                    let n = normalize_pixel(*p, eval.width, eval.height);
                    let mut dn = [0.0; 2];
                    pe.backward(&[n.x, n.y], row.as_slice().expect("contiguous"), &mut dn);
                    Vec2::new(dn[0] * sx, dn[1] * sy)
                })
                .collect()
        });
        (d_points, d_shared)
    }
}

/// Per-pixel body colour evaluation retained for the backward pass.
#[derive(Debug, Clone)]
pub struct BodyEval {
    pub warp: WarpEval,
    pub color: Vec<Vec3>,
    fine_cache: MlpCache,
    coarse_taps: Vec<BilinearTaps>,
    latent_taps: Vec<BilinearTaps>,
}

/// Gradients of every body parameter.
#[derive(Debug, Clone)]
pub struct BodyGrads {
    pub coarse: Grid,
    pub latent: Grid,
    pub warp: MlpGrads,
    pub fine: MlpGrads,
}

impl BodyGrads {
    pub fn zeros(tex: &NeuralTexture, warp: &WarpNet, fine: &FineNet) -> Self {
        Self {
            coarse: Grid::new(tex.coarse.width, tex.coarse.height, 3),
            latent: Grid::new(tex.latent.width, tex.latent.height, tex.latent.channels),
            warp: MlpGrads::zeros_like(&warp.mlp),
            fine: MlpGrads::zeros_like(&fine.mlp),
        }
    }
}

/// Warp, sample both textures and decode the fine colour for a batch of
/// image-plane pixels.
pub fn body_forward(
    tex: &NeuralTexture,
    warp: &WarpNet,
    fine: &FineNet,
    pixels: &[Vec2],
    cond: &[f64],
    width: usize,
    height: usize,
) -> BodyEval {
    let w = warp.warp_batch(pixels, cond, tex.padding, width, height);
    let dt = tex.latent_dim();
    let coarse_taps: Vec<BilinearTaps> = w.texture_xy.iter().map(|p| tex.coarse.taps(*p)).collect();
    let latent_taps: Vec<BilinearTaps> = w.texture_xy.iter().map(|p| tex.latent.taps(*p)).collect();
    let mut feats = Array2::<f64>::zeros((pixels.len(), dt));
    for (mut row, taps) in feats.outer_iter_mut().zip(&latent_taps) {
        tex.latent.sample_taps(taps, row.as_slice_mut().expect("contiguous"));
    }
    let fine_cache = fine.mlp.forward(feats.view(), cond);
    let mut c = [0.0; 3];
    let color = coarse_taps
        .iter()
        .zip(fine_cache.output.outer_iter())
        .map(|(taps, f)| {
            tex.coarse.sample_taps(taps, &mut c);
            Vec3::new(c[0], c[1], c[2]) + Vec3::new(f[0], f[1], f[2]) * FINE_SCALE
        })
        .collect();
    BodyEval {
        warp: w,
        color,
        fine_cache,
        coarse_taps,
        latent_taps,
    }
}

/// Backward of [`body_forward`]. `d_delta_extra` carries any loss applied
/// directly to the warp offsets. Returns the gradient on the shared
/// conditioning vector.
pub fn body_backward(
    tex: &NeuralTexture,
    warp: &WarpNet,
    fine: &FineNet,
    eval: &BodyEval,
    d_color: &[Vec3],
    d_delta_extra: Option<&[Vec2]>,
    grads: &mut BodyGrads,
) -> Vec<f64> {
    let n = d_color.len();
    let dt = tex.latent_dim();
    let d_fine = Array2::from_shape_fn((n, 3), |(i, c)| d_color[i][c] * FINE_SCALE);
    let (d_feat, d_cond_f) = fine.mlp.backward(&eval.fine_cache, ArrayView2::from(&d_fine), &mut grads.fine, true);
    let d_feat = d_feat.expect("input gradient requested");
    let mut d_delta = vec![Vec2::zeros(); n];
    for i in 0..n {
        let dc = d_color[i];
        let ct = &eval.coarse_taps[i];
        grads.coarse.scatter(ct, dc.as_slice());
        let mut g = tex.coarse.coord_grad(ct, dc.as_slice());
        let df = d_feat.row(i);
        let df = df.as_slice().expect("contiguous");
        debug_assert_eq!(df.len(), dt);
        let lt = &eval.latent_taps[i];
        grads.latent.scatter(lt, df);
        g += tex.latent.coord_grad(lt, df);
        if let Some(extra) = d_delta_extra {
            g += extra[i];
        }
        d_delta[i] = g;
    }
    let (_, d_cond_w) = warp.backward(&eval.warp, &d_delta, &mut grads.warp, false);
    d_cond_f.iter().zip(&d_cond_w).map(|(a, b)| a + b).collect()
}

/// Body colour at texture-frame coordinates, without any warp.
pub fn decode_texture(tex: &NeuralTexture, fine: &FineNet, texture_xy: &[Vec2], cond: &[f64]) -> Vec<Vec3> {
    let mut feats = Array2::<f64>::zeros((texture_xy.len(), tex.latent_dim()));
    for (mut row, p) in feats.outer_iter_mut().zip(texture_xy) {
        tex.latent.sample_taps(&tex.latent.taps(*p), row.as_slice_mut().expect("contiguous"));
    }
    let out = fine.mlp.forward(feats.view(), cond).output;
    let mut c = [0.0; 3];
    texture_xy
        .iter()
        .zip(out.outer_iter())
        .map(|(p, f)| {
            tex.coarse.sample_taps(&tex.coarse.taps(*p), &mut c);
            Vec3::new(c[0], c[1], c[2]) + Vec3::new(f[0], f[1], f[2]) * FINE_SCALE
        })
        .collect()
}

/// Body colour at a single image-plane pixel.
pub fn textured_color(
    view_xy: Vec2,
    cond: &[f64],
    tex: &NeuralTexture,
    warp: &WarpNet,
    fine: &FineNet,
    width: usize,
    height: usize,
) -> Vec3 {
    body_forward(tex, warp, fine, &[view_xy], cond, width, height).color[0]
}
