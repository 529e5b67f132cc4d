//! Network-free inference: cached deformation outputs, a baked flat texture
//! and one homography per frame fitted to the anchors.

use log::warn;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::anchors::AnchorSet;
use crate::coremath::{
    apply_homography, homography_anisotropy, normalize_homography, sh_to_rgb, svd_least_squares_homography, Grid,
    Mat2, Mat3, Vec2, Vec3,
};
use crate::error::{Error, Result};
use crate::gaussmodel::{build_covariance, project_mean_cov, GaussianSet, Splat2D};
use crate::model::Avatar;
use crate::neuraltex::{decode_texture, FineNet, NeuralTexture, FINE_SCALE};
use crate::renderer::{composite, splat_layer, Framebuffer, RenderLayer};
use crate::rig::{skin, DeformNet, DeformOutput, FrameParams, FramePose, Rig};
use crate::neuraltex::WarpNet;

/// Anisotropy above which a fitted homography is reported as a pose the
/// planar model cannot represent well.
pub const ANISOTROPY_WARNING: f64 = 5.0;
/// Fewest anchors a homography can be fitted to.
pub const MIN_ANCHORS: usize = 4;
const VISIBILITY_CUTOFF: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    /// Inlier reprojection threshold in pixels.
    pub threshold: f64,
    pub iterations: usize,
    /// Anchors that are outliers in more than this fraction of the
    /// evaluated frames are removed.
    pub outlier_fraction: f64,
    pub max_frames: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            threshold: 3.0,
            iterations: 500,
            outlier_fraction: 0.5,
            max_frames: 100,
        }
    }
}

/// Everything the fast renderer needs; holds no network weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BakedAvatar {
    pub rig: Rig,
    pub head: GaussianSet,
    pub head_deform: Vec<DeformOutput>,
    pub anchors: AnchorSet,
    pub anchor_deform: Vec<DeformOutput>,
    /// Flat RGB texture in the padded texture frame.
    pub texture: Grid,
    pub padding: usize,
    pub canonical_index: usize,
    pub background: Vec3,
}

/// Flat texture `coarse + fine(latent, cond)` per texel, clamped to [0, 1],
/// with texels outside `bg_mask` (value < 0.5) set to white.
pub fn bake_texture(tex: &NeuralTexture, fine: &FineNet, cond: &[f64], bg_mask: Option<&Grid>) -> Result<Grid> {
    let (w, h) = (tex.coarse.width, tex.coarse.height);
    if let Some(m) = bg_mask {
        if m.width != w || m.height != h || m.channels != 1 {
            return Err(Error::Shape(format!(
                "mask is {}x{}x{}, texture is {w}x{h}",
                m.width, m.height, m.channels
            )));
        }
    } else {
        warn!("no background mask given, texture left uncleaned");
    }
    let lat = ndarray::Array2::from_shape_vec((w * h, tex.latent_dim()), tex.latent.data.clone())
        .map_err(|e| Error::Shape(e.to_string()))?;
    let out = fine.mlp.forward(lat.view(), cond).output;
    let mut flat = Grid::new(w, h, 3);
    for (p, f) in out.outer_iter().enumerate() {
        let outside = bg_mask.is_some_and(|m| m.data[p] < 0.5);
        for c in 0..3 {
            let v = (tex.coarse.data[3 * p + c] + FINE_SCALE * f[c]).clamp(0.0, 1.0);
            flat.data[3 * p + c] = if outside { 1.0 } else { v };
        }
    }
    Ok(flat)
}

/// Drops anchors leaving the canonical view and sets each remaining
/// target to its warped canonical projection.
pub fn refresh_correspondences(
    anchors: &AnchorSet,
    canonical: &FrameParams,
    rig: &Rig,
    deform: &DeformNet,
    warp: &WarpNet,
    padding: usize,
    cond: &[f64],
) -> Result<AnchorSet> {
    let means = anchors.means();
    let projected = crate::anchors::project_points(&means, canonical, rig, deform);
    let mut kept = Vec::new();
    let mut pixels = Vec::new();
    for (a, p) in anchors.anchors.iter().zip(&projected) {
        if let Some(p) = p.filter(|p| canonical.cam.contains_pixel(p)) {
            kept.push(*a);
            pixels.push(p);
        }
    }
    if kept.len() < MIN_ANCHORS {
        return Err(Error::InsufficientAnchors {
            needed: MIN_ANCHORS,
            found: kept.len(),
        });
    }
    let (w, h) = (canonical.cam.width, canonical.cam.height);
    let ev = warp.warp_batch(&pixels, cond, padding, w, h);
    for (a, t) in kept.iter_mut().zip(&ev.texture_xy) {
        a.target_uv = *t;
    }
    Ok(AnchorSet { anchors: kept })
}

fn inliers(h: &Mat3, src: &[Vec2], dst: &[Vec2], threshold: f64) -> Vec<bool> {
    src.iter()
        .zip(dst)
        .map(|(s, d)| apply_homography(h, *s).is_some_and(|p| (p - d).norm() <= threshold))
        .collect()
}

/// Robust homography from four-point hypotheses; the winner is refitted on
/// its inliers. `None` when no hypothesis could be fitted.
pub fn ransac_homography(
    src: &[Vec2],
    dst: &[Vec2],
    cfg: &RansacConfig,
    rng: &mut impl Rng,
) -> Option<(Mat3, Vec<bool>)> {
    let n = src.len();
    if n < MIN_ANCHORS || dst.len() != n {
        return None;
    }
    let mut best: Option<(usize, Mat3, Vec<bool>)> = None;
    for _ in 0..cfg.iterations {
        let idx = sample(rng, n, 4);
        let s: Vec<Vec2> = idx.iter().map(|i| src[i]).collect();
        let d: Vec<Vec2> = idx.iter().map(|i| dst[i]).collect();
        let Ok(h) = svd_least_squares_homography(&s, &d) else {
            continue;
        };
        let inl = inliers(&h, src, dst, cfg.threshold);
        let count = inl.iter().filter(|b| **b).count();
        if best.as_ref().is_none_or(|b| count > b.0) {
            best = Some((count, h, inl));
            if count == n {
                break;
            }
        }
    }
    let (_, h, inl) = best?;
    let s: Vec<Vec2> = src.iter().zip(&inl).filter(|(_, b)| **b).map(|(p, _)| *p).collect();
    let d: Vec<Vec2> = dst.iter().zip(&inl).filter(|(_, b)| **b).map(|(p, _)| *p).collect();
    match svd_least_squares_homography(&s, &d) {
        Ok(refit) => {
            let inl2 = inliers(&refit, src, dst, cfg.threshold);
            if inl2.iter().filter(|b| **b).count() >= s.len() {
                return Some((refit, inl2));
            }
            Some((h, inl))
        }
        Err(_) => Some((h, inl)),
    }
}

fn skinned_pixels(means: &[crate::coremath::Vec3], deform: &[DeformOutput], pose: &FramePose, frame: &FrameParams) -> Vec<Option<Vec2>> {
    means
        .iter()
        .zip(deform)
        .map(|(m, d)| {
            let s = skin(pose, d);
            frame.cam.project_world(&(s.rot * m + s.trans))
        })
        .collect()
}

/// Removes anchors that disagree with the per-frame robust homography in
/// too many frames. Uses all frames when there are at most
/// `cfg.max_frames`, otherwise a sample without replacement. Returns the
/// filtered set and the indices kept.
pub fn ransac_filter(
    anchors: &AnchorSet,
    anchor_deform: &[DeformOutput],
    frames: &[FrameParams],
    rig: &Rig,
    cfg: &RansacConfig,
    rng: &mut impl Rng,
) -> Result<(AnchorSet, Vec<usize>)> {
    let na = anchors.len();
    let chosen: Vec<usize> = if frames.len() <= cfg.max_frames {
        (0..frames.len()).collect()
    } else {
        let mut v = sample(rng, frames.len(), cfg.max_frames).into_vec();
        v.sort_unstable();
        v
    };
    let means = anchors.means();
    let targets: Vec<Vec2> = anchors.anchors.iter().map(|a| a.target_uv).collect();
    let mut outlier = vec![0usize; na];
    let mut seen = vec![0usize; na];
    for &f in &chosen {
        let frame = &frames[f];
        let pose = rig.frame_pose(frame);
        let px = skinned_pixels(&means, anchor_deform, &pose, frame);
        let idx: Vec<usize> = (0..na).filter(|&i| px[i].is_some()).collect();
        let src: Vec<Vec2> = idx.iter().map(|&i| px[i].expect("filtered")).collect();
        let dst: Vec<Vec2> = idx.iter().map(|&i| targets[i]).collect();
        let Some((_, inl)) = ransac_homography(&src, &dst, cfg, rng) else {
            warn!("frame {}: no homography could be fitted, skipped", frame.index);
            continue;
        };
        for (j, &i) in idx.iter().enumerate() {
            seen[i] += 1;
            if !inl[j] {
                outlier[i] += 1;
            }
        }
    }
    let keep: Vec<usize> = (0..na)
        .filter(|&i| seen[i] == 0 || (outlier[i] as f64) <= cfg.outlier_fraction * seen[i] as f64)
        .collect();
    let set = AnchorSet {
        anchors: keep.iter().map(|&i| anchors.anchors[i]).collect(),
    };
    Ok((set, keep))
}

/// Bakes a trained avatar. `frames` are the training frames used for the
/// outlier filter.
pub fn bake(
    av: &Avatar,
    frames: &[FrameParams],
    bg_mask: Option<&Grid>,
    cfg: &RansacConfig,
    seed: u64,
) -> Result<BakedAvatar> {
    let canon = &av.canonical;
    let cond = av.cond.encode(&av.rig, canon);
    let refreshed = refresh_correspondences(
        &av.anchors,
        canon,
        &av.rig,
        &av.deform,
        &av.warp,
        av.texture.padding,
        &cond,
    )?;
    let (anchor_deform, _) = av.deform.eval_batch(&refreshed.means());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (anchors, keep) = ransac_filter(&refreshed, &anchor_deform, frames, &av.rig, cfg, &mut rng)?;
    if anchors.len() < MIN_ANCHORS {
        return Err(Error::InsufficientAnchors {
            needed: MIN_ANCHORS,
            found: anchors.len(),
        });
    }
    let anchor_deform = keep.iter().map(|&i| anchor_deform[i].clone()).collect();
    let means: Vec<_> = av.head.gaussians.iter().map(|g| g.mu).collect();
    let (head_deform, _) = av.deform.eval_batch(&means);
    Ok(BakedAvatar {
        rig: av.rig.clone(),
        head: av.head.clone(),
        head_deform,
        anchors,
        anchor_deform,
        texture: bake_texture(&av.texture, &av.fine, &cond, bg_mask)?,
        padding: av.texture.padding,
        canonical_index: canon.index,
        background: av.background,
    })
}

pub(crate) fn head_layer(head: &GaussianSet, deform: &[DeformOutput], pose: &FramePose, frame: &FrameParams) -> Result<RenderLayer> {
    let cam = &frame.cam;
    let mut splats = Vec::with_capacity(head.len());
    for (g, d) in head.gaussians.iter().zip(deform) {
        let s = skin(pose, d);
        let cov = build_covariance(g.scale, g.quat)?;
        let mu_d = s.rot * g.mu + s.trans;
        let cov_cam = cam.rot * (s.rot * cov * s.rot.transpose()) * cam.rot.transpose();
        let Ok(p) = project_mean_cov(&cam.world_to_cam(&mu_d), &cov_cam, cam) else {
            continue;
        };
        let v = mu_d - cam.position;
        let dir = if v.norm() > 0.0 { v.normalize() } else { Vec3::z() };
        splats.push(Splat2D {
            mu2d: p.mu2d,
            cov2d: p.cov2d,
            depth: p.depth,
            rgb: sh_to_rgb(&g.sh, &dir)?,
            opacity: g.opacity,
        });
    }
    Ok(splat_layer(&splats, cam.width, cam.height))
}

/// Outcome of one fast render.
#[derive(Debug, Clone)]
pub struct FastFrame {
    pub image: Framebuffer,
    /// Image plane to texture frame.
    pub homography: Mat3,
    /// The fit failed and a previous homography was reused.
    pub fallback: bool,
}

/// Renders a frame sequence, carrying the last good homography forward.
pub struct FastRenderer<'a> {
    baked: &'a BakedAvatar,
    previous: Option<Mat3>,
}

impl<'a> FastRenderer<'a> {
    pub fn new(baked: &'a BakedAvatar) -> Self {
        Self { baked, previous: None }
    }

    pub fn render(&mut self, frame: &FrameParams) -> Result<FastFrame> {
        let b = self.baked;
        let pose = b.rig.frame_pose(frame);
        let px = skinned_pixels(&b.anchors.means(), &b.anchor_deform, &pose, frame);
        let (src, dst): (Vec<Vec2>, Vec<Vec2>) = px
            .iter()
            .zip(&b.anchors.anchors)
            .filter_map(|(p, a)| p.map(|p| (p, a.target_uv)))
            .unzip();
        let fit = svd_least_squares_homography(&src, &dst)
            .ok()
            .map(|h| normalize_homography(&h))
            .filter(|h| h.iter().all(|v| v.is_finite()) && h.determinant().abs() > 1e-10);
        let (h, fallback) = match fit {
            Some(h) => (h, false),
            None => {
                let h = self.previous.unwrap_or_else(|| {
                    let pad = b.padding as f64;
                    Mat3::new(1.0, 0.0, pad, 0.0, 1.0, pad, 0.0, 0.0, 1.0)
                });
                warn!("frame {}: degenerate anchor homography, reusing previous", frame.index);
                (h, true)
            }
        };
        if !fallback {
            let an = homography_anisotropy(&h);
            if an > ANISOTROPY_WARNING {
                warn!("frame {}: homography anisotropy {an:.1}, pose may be out of range", frame.index);
            }
            self.previous = Some(h);
        }

        let head = head_layer(&b.head, &b.head_deform, &pose, frame)?;
        let (w, hgt) = (frame.cam.width, frame.cam.height);
        let mut body = Grid::new(w, hgt, 3);
        body.data.par_chunks_mut(3 * w).enumerate().for_each(|(y, row)| {
            let mut c = [0.0; 3];
            for x in 0..w {
                if 1.0 - head.alpha.data[y * w + x] < VISIBILITY_CUTOFF {
                    continue;
                }
                if let Some(t) = apply_homography(&h, Vec2::new(x as f64, y as f64)) {
                    b.texture.sample_taps(&b.texture.taps(t), &mut c);
                    row[3 * x..3 * x + 3].copy_from_slice(&c);
                }
            }
        });
        let image = composite(&RenderLayer::empty(w, hgt), &head, Some(&body), b.background)?;
        Ok(FastFrame {
            image,
            homography: h,
            fallback,
        })
    }
}

pub fn render_fast(baked: &BakedAvatar, frame: &FrameParams) -> Result<Framebuffer> {
    Ok(FastRenderer::new(baked).render(frame)?.image)
}

/// Proper rigid motion of the plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rigid2 {
    pub rot: Mat2,
    pub trans: Vec2,
}

impl Rigid2 {
    pub fn identity() -> Self {
        Self {
            rot: Mat2::identity(),
            trans: Vec2::zeros(),
        }
    }

    pub fn apply(&self, p: Vec2) -> Vec2 {
        self.rot * p + self.trans
    }
}

/// Least-squares rotation and translation taking `src` onto `dst`.
pub fn euclidean_align(src: &[Vec2], dst: &[Vec2]) -> Result<Rigid2> {
    let n = src.len().min(dst.len());
    if n < 2 {
        return Err(Error::InsufficientAnchors { needed: 2, found: n });
    }
    let cs = src[..n].iter().sum::<Vec2>() / n as f64;
    let cd = dst[..n].iter().sum::<Vec2>() / n as f64;
    let mut cov = Mat2::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (s - cs) * (d - cd).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let v = vt.transpose();
    let sign = (v * u.transpose()).determinant().signum();
    let rot = v * Mat2::new(1.0, 0.0, 0.0, if sign == 0.0 { 1.0 } else { sign }) * u.transpose();
    Ok(Rigid2 {
        rot,
        trans: cd - rot * cs,
    })
}

/// Full-network render for a foreign driving sequence: the warped texture
/// coordinates get an extra rigid correction fitted to the anchors.
pub fn render_aligned(av: &Avatar, frame: &FrameParams) -> Result<(Framebuffer, Rigid2)> {
    use crate::renderer::Window;
    use crate::trainer::{forward, RenderOptions};
    let (w, h) = (frame.cam.width, frame.cam.height);
    let opts = RenderOptions {
        anchors: false,
        body: false,
        anchor_warp: true,
        body_visibility_cutoff: VISIBILITY_CUTOFF,
    };
    let fwd = forward(av, frame, Window::full(w, h), opts)?;
    let warped = fwd.anchor_texture_xy(av.anchors.len());
    let (src, dst): (Vec<Vec2>, Vec<Vec2>) = warped
        .iter()
        .zip(&av.anchors.anchors)
        .filter_map(|(p, a)| p.map(|p| (p, a.target_uv)))
        .unzip();
    let align = euclidean_align(&src, &dst)?;

    let mut pixels = Vec::new();
    let mut slots = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if 1.0 - fwd.head_layer.alpha.data[y * w + x] >= VISIBILITY_CUTOFF {
                pixels.push(Vec2::new(x as f64, y as f64));
                slots.push(y * w + x);
            }
        }
    }
    let ev = av.warp.warp_batch(&pixels, &fwd.cond, av.texture.padding, w, h);
    let coords: Vec<Vec2> = ev.texture_xy.iter().map(|p| align.apply(*p)).collect();
    let colors = decode_texture(&av.texture, &av.fine, &coords, &fwd.cond);
    let mut body = Grid::new(w, h, 3);
    for (&p, c) in slots.iter().zip(&colors) {
        body.data[3 * p..3 * p + 3].copy_from_slice(c.as_slice());
    }
    let img = composite(&RenderLayer::empty(w, h), &fwd.head_layer, Some(&body), av.background)?;
    Ok((img, align))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::Anchor;
    use crate::gaussmodel::Camera;
    use crate::model::ModelConfig;
    use rand::Rng;

    fn homography(rng: &mut ChaCha8Rng) -> Mat3 {
        Mat3::new(
            1.0 + rng.random_range(-0.1..0.1),
            rng.random_range(-0.1..0.1),
            rng.random_range(-5.0..5.0),
            rng.random_range(-0.1..0.1),
            1.0 + rng.random_range(-0.1..0.1),
            rng.random_range(-5.0..5.0),
            rng.random_range(-1e-3..1e-3),
            rng.random_range(-1e-3..1e-3),
            1.0,
        )
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec2> {
        (0..n)
            .map(|_| Vec2::new(rng.random_range(0.0..128.0), rng.random_range(0.0..128.0)))
            .collect()
    }

    #[test]
    fn ransac_keeps_consistent_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = homography(&mut rng);
        let src = cloud(&mut rng, 40);
        let dst: Vec<Vec2> = src.iter().map(|p| apply_homography(&h, *p).unwrap()).collect();
        let (fit, inl) = ransac_homography(&src, &dst, &RansacConfig::default(), &mut rng).unwrap();
        assert!(inl.iter().all(|b| *b));
        let diff = normalize_homography(&fit) - normalize_homography(&h);
        assert!(diff.norm() < 1e-6);
    }

    #[test]
    fn ransac_flags_perturbed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = homography(&mut rng);
        let src = cloud(&mut rng, 50);
        let mut dst: Vec<Vec2> = src.iter().map(|p| apply_homography(&h, *p).unwrap()).collect();
        for d in dst.iter_mut().take(5) {
            *d += Vec2::new(50.0, 0.0);
        }
        let (_, inl) = ransac_homography(&src, &dst, &RansacConfig::default(), &mut rng).unwrap();
        for (i, b) in inl.iter().enumerate() {
            assert_eq!(*b, i >= 5);
        }
    }

    #[test]
    fn ransac_needs_four_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = cloud(&mut rng, 3);
        assert!(ransac_homography(&p, &p, &RansacConfig::default(), &mut rng).is_none());
    }

    #[test]
    fn procrustes_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src = cloud(&mut rng, 20);
        let r = euclidean_align(&src, &src).unwrap();
        assert!((r.rot - Mat2::identity()).norm() < 1e-12 && r.trans.norm() < 1e-9);

        let t = Vec2::new(3.0, -7.5);
        let dst: Vec<Vec2> = src.iter().map(|p| p + t).collect();
        let r = euclidean_align(&src, &dst).unwrap();
        assert!((r.trans - t).norm() < 1e-9);

        for _ in 0..20 {
            let a: f64 = rng.random_range(-3.0..3.0);
            let rot = Mat2::new(a.cos(), -a.sin(), a.sin(), a.cos());
            let t = Vec2::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0));
            let dst: Vec<Vec2> = src.iter().map(|p| rot * p + t).collect();
            let r = euclidean_align(&src, &dst).unwrap();
            assert!((r.rot - rot).norm() < 1e-9);
            assert!((r.trans - t).norm() < 1e-9);
            assert!((r.rot.determinant() - 1.0).abs() < 1e-12);
            assert!((r.rot * r.rot.transpose() - Mat2::identity()).norm() < 1e-12);
        }
        assert!(matches!(
            euclidean_align(&src[..1], &src[..1]),
            Err(Error::InsufficientAnchors { needed: 2, found: 1 })
        ));
    }

    #[test]
    fn procrustes_rejects_reflection() {
        let src = vec![Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0), Vec2::new(0.0, 2.0)];
        let dst: Vec<Vec2> = src.iter().map(|p| Vec2::new(-p.x, p.y)).collect();
        let r = euclidean_align(&src, &dst).unwrap();
        assert!((r.rot.determinant() - 1.0).abs() < 1e-12);
    }

    fn avatar(seed: u64) -> Avatar {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rig = Rig::toy();
        let head = crate::model::init_head_gaussians(&rig, 0, 0.5);
        let canon = FrameParams {
            index: 0,
            timestamp: 0.0,
            theta: vec![0.0; 12],
            psi: vec![0.0; 8],
            cam: Camera::looking_forward(Vec3::new(0.0, 0.0, -2.5), 24.0, 16, 16),
            ldmk: [Vec2::zeros(); 4],
            has_nose: false,
        };
        let cfg = ModelConfig {
            mlp_width: 8,
            mlp_hidden_layers: 2,
            padding: 3,
            latent_dim: 4,
            sh_degree: 0,
            include_nose: false,
        };
        Avatar::new(rig, head, canon, &cfg, &mut rng)
    }

    #[test]
    fn zero_fine_net_bakes_coarse_texture() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut av = avatar(5);
        av.texture.coarse.data.iter_mut().for_each(|v| *v = rng.random());
        let cond = av.cond.encode(&av.rig, &av.canonical);
        let flat = bake_texture(&av.texture, &av.fine, &cond, None).unwrap();
        assert_eq!(flat, av.texture.coarse);
        let (w, h) = (flat.width, flat.height);
        let all = Grid::filled(w, h, 1, 1.0);
        assert_eq!(bake_texture(&av.texture, &av.fine, &cond, Some(&all)).unwrap(), av.texture.coarse);
        let mask = Grid::from_fn(w, h, 1, |x, _, _| if x < 4 { 0.0 } else { 1.0 });
        let flat = bake_texture(&av.texture, &av.fine, &cond, Some(&mask)).unwrap();
        for y in 0..h {
            for x in 0..w {
                let expect = if x < 4 { vec![1.0; 3] } else { av.texture.coarse.at(x, y).to_vec() };
                assert_eq!(flat.at(x, y), &expect[..]);
            }
        }
        assert!(matches!(
            bake_texture(&av.texture, &av.fine, &cond, Some(&Grid::new(2, 2, 1))),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn random_fine_net_bake_matches_texel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut av = avatar(6);
        for t in av.fine.mlp.tensors_mut() {
            t.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
        let cond = av.cond.encode(&av.rig, &av.canonical);
        let flat = bake_texture(&av.texture, &av.fine, &cond, None).unwrap();
        for (x, y) in [(0, 0), (5, 7), (21, 21), (10, 3)] {
            let mut input = av.texture.latent.at(x, y).to_vec();
            input.extend(&cond);
            let f = av.fine.mlp.forward_one(&input);
            for c in 0..3 {
                let expect = (av.texture.coarse.at(x, y)[c] + FINE_SCALE * f[c]).clamp(0.0, 1.0);
                assert!((flat.at(x, y)[c] - expect).abs() < 1e-12);
            }
        }
    }

    fn anchors_for(av: &Avatar) -> AnchorSet {
        AnchorSet {
            anchors: av.rig.mesh.vertices[720..]
                .iter()
                .step_by(7)
                .map(|&mu| Anchor {
                    mu,
                    scale: 0.01,
                    rgb: Vec3::zeros(),
                    opacity: 0.5,
                    target_uv: Vec2::zeros(),
                })
                .collect(),
        }
    }

    #[test]
    fn refresh_with_zero_warp_uses_padded_projection() {
        let av = avatar(7);
        let mut set = anchors_for(&av);
        let mut behind = set.anchors[0];
        behind.mu = Vec3::new(0.0, 0.0, -3.0);
        set.anchors.push(behind);
        let cond = av.cond.encode(&av.rig, &av.canonical);
        let out = refresh_correspondences(&set, &av.canonical, &av.rig, &av.deform, &av.warp, 3, &cond).unwrap();
        assert!(out.len() < set.len());
        assert!(out.anchors.iter().all(|a| a.mu != behind.mu));
        let proj = crate::anchors::project_points(&out.means(), &av.canonical, &av.rig, &av.deform);
        for (a, p) in out.anchors.iter().zip(proj) {
            assert!((a.target_uv - (p.unwrap() + Vec2::repeat(3.0))).norm() < 1e-12);
        }
        let few = AnchorSet {
            anchors: set.anchors[..3].to_vec(),
        };
        assert!(matches!(
            refresh_correspondences(&few, &av.canonical, &av.rig, &av.deform, &av.warp, 3, &cond),
            Err(Error::InsufficientAnchors { .. })
        ));
    }

    #[test]
    fn canonical_fast_render_uses_padding_translation() {
        let av = {
            let mut a = avatar(8);
            a.anchors = anchors_for(&a);
            a
        };
        let baked = bake(&av, std::slice::from_ref(&av.canonical), None, &RansacConfig::default(), 0).unwrap();
        let mut r = FastRenderer::new(&baked);
        let f = r.render(&av.canonical).unwrap();
        assert!(!f.fallback);
        let expect = Mat3::new(1.0, 0.0, 3.0, 0.0, 1.0, 3.0, 0.0, 0.0, 1.0);
        assert!((f.homography - expect).norm() < 1e-6, "{}", f.homography);
    }

    #[test]
    fn empty_head_renders_pure_texture() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut av = avatar(9);
        av.anchors = anchors_for(&av);
        av.texture.coarse.data.iter_mut().for_each(|v| *v = rng.random());
        let mut baked = bake(&av, std::slice::from_ref(&av.canonical), None, &RansacConfig::default(), 0).unwrap();
        baked.head = GaussianSet::new(0);
        baked.head_deform.clear();
        let img = render_fast(&baked, &av.canonical).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let t = baked.texture.at(x + 3, y + 3);
                for c in 0..3 {
                    assert!((img.rgb.at(x, y)[c] - t[c]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn degenerate_fit_falls_back() {
        let mut av = avatar(10);
        av.anchors = anchors_for(&av);
        let mut baked = bake(&av, std::slice::from_ref(&av.canonical), None, &RansacConfig::default(), 0).unwrap();
        let mut r = FastRenderer::new(&baked);
        let first = r.render(&av.canonical).unwrap();
        baked.anchors.anchors.truncate(3);
        baked.anchor_deform.truncate(3);
        let mut r2 = FastRenderer::new(&baked);
        let f = r2.render(&av.canonical).unwrap();
        assert!(f.fallback);
        assert!((f.homography - first.homography).norm() < 1e-6);
    }
}
