//! Training losses. Each returns its value together with the gradient of
//! that value with respect to its inputs.

use crate::coremath::{Grid, Vec2};
use crate::error::{Error, Result};
use crate::rig::{DeformGrad, DeformOutput, PseudoGt};

fn same_shape(a: &Grid, b: &Grid) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

/// Mean squared error over pixels and channels.
pub fn rgb_loss_grad(render: &Grid, gt: &Grid) -> Result<(f64, Grid)> {
    same_shape(render, gt)?;
    let n = render.data.len().max(1) as f64;
    let mut g = Grid::new(render.width, render.height, render.channels);
    let mut l = 0.0;
    for ((d, a), b) in g.data.iter_mut().zip(&render.data).zip(&gt.data) {
        let e = a - b;
        l += e * e;
        *d = 2.0 * e / n;
    }
    Ok((l / n, g))
}

pub fn loss_rgb(render: &Grid, gt: &Grid) -> Result<f64> {
    Ok(rgb_loss_grad(render, gt)?.0)
}

/// Weights of the blendshape/skinning regularizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlameWeights {
    pub expr: f64,
    pub pose: f64,
    pub weights: f64,
}

fn norm_term(pred: &[f64], gt: &[f64], lambda: f64, scale: f64, grad: &mut [f64]) -> f64 {
    let n2: f64 = pred.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum();
    let n = n2.sqrt();
    if n > 0.0 && lambda != 0.0 {
        for ((g, a), b) in grad.iter_mut().zip(pred).zip(gt) {
            *g += lambda * scale * (a - b) / n;
        }
    }
    lambda * n
}

/// Sum over all given points of weighted L2 distances to the pseudo ground
/// truth, divided by `normalizer` (the number of head Gaussians).
pub fn flame_loss_grad(
    pred: &[DeformOutput],
    gt: &[PseudoGt],
    w: &FlameWeights,
    normalizer: usize,
) -> (f64, Vec<DeformGrad>) {
    let scale = 1.0 / normalizer.max(1) as f64;
    let mut total = 0.0;
    let grads = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let mut d = DeformGrad {
                expr: vec![0.0; p.expr.len()],
                pose: vec![0.0; p.pose.len()],
                weights: vec![0.0; p.weights.len()],
            };
            total += norm_term(&p.expr, &g.expr, w.expr, scale, &mut d.expr);
            total += norm_term(&p.pose, &g.pose, w.pose, scale, &mut d.pose);
            total += norm_term(&p.weights, &g.weights, w.weights, scale, &mut d.weights);
            d
        })
        .collect();
    (total * scale, grads)
}

pub fn loss_flame(pred: &[DeformOutput], gt: &[PseudoGt], w: &FlameWeights, normalizer: usize) -> f64 {
    flame_loss_grad(pred, gt, w, normalizer).0
}

/// Mean of `max(alpha - head_alpha, 0)^2`.
pub fn head_loss_grad(alpha: &Grid, head_alpha: &Grid) -> Result<(f64, Grid)> {
    same_shape(alpha, head_alpha)?;
    let n = alpha.data.len().max(1) as f64;
    let mut g = Grid::new(alpha.width, alpha.height, alpha.channels);
    let mut l = 0.0;
    for ((d, a), b) in g.data.iter_mut().zip(&alpha.data).zip(&head_alpha.data) {
        let e = (a - b).max(0.0);
        l += e * e;
        *d = 2.0 * e / n;
    }
    Ok((l / n, g))
}

pub fn loss_head(alpha: &Grid, head_alpha: &Grid) -> Result<f64> {
    Ok(head_loss_grad(alpha, head_alpha)?.0)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean L1 norm of warp offsets.
pub fn warp_loss_grad(deltas: &[Vec2]) -> (f64, Vec<Vec2>) {
    let n = deltas.len().max(1) as f64;
    let l = deltas.iter().map(|d| d.x.abs() + d.y.abs()).sum::<f64>() / n;
    let g = deltas.iter().map(|d| Vec2::new(sign(d.x), sign(d.y)) / n).collect();
    (l, g)
}

pub fn loss_warp(deltas: &[Vec2]) -> f64 {
    warp_loss_grad(deltas).0
}

/// Mean absolute anchor opacity.
pub fn anchor_alpha_loss_grad(opacities: &[f64]) -> (f64, Vec<f64>) {
    let n = opacities.len().max(1) as f64;
    let l = opacities.iter().map(|o| o.abs()).sum::<f64>() / n;
    (l, opacities.iter().map(|o| sign(*o) / n).collect())
}

pub fn loss_anchor_alpha(opacities: &[f64]) -> f64 {
    anchor_alpha_loss_grad(opacities).0
}

/// Squared distance between each anchor's fixed texture target and its
/// warped projection, averaged over anchors and coordinates. Anchors with no
/// projection contribute nothing but still count in the mean.
pub fn anchor_loss_grad(targets: &[Vec2], warped: &[Option<Vec2>]) -> (f64, Vec<Vec2>) {
    let n = (2 * targets.len()).max(1) as f64;
    let mut l = 0.0;
    let g = targets
        .iter()
        .zip(warped)
        .map(|(t, w)| match w {
            Some(w) => {
                let r = t - w;
                l += r.norm_squared();
                -2.0 * r / n
            }
            None => Vec2::zeros(),
        })
        .collect();
    (l / n, g)
}

pub fn loss_anchor(targets: &[Vec2], warped: &[Option<Vec2>]) -> f64 {
    anchor_loss_grad(targets, warped).0
}

/// Image feature extractor used by the perceptual loss. Implementations
/// must be linear in the image so the backward pass is a transpose.
pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> &str;
    fn features(&self, img: &Grid) -> Vec<f64>;
    /// Transpose of [`FeatureExtractor::features`] applied to `d_feat`.
    fn features_transpose(&self, width: usize, height: usize, d_feat: &[f64]) -> Grid;
}

/// Luminance gradients over a small image pyramid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PyramidGradients {
    pub levels: usize,
}

impl Default for PyramidGradients {
    fn default() -> Self {
        Self { levels: 3 }
    }
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn downsample(src: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let (nw, nh) = (w / 2, h / 2);
    let mut out = vec![0.0; nw * nh];
    for y in 0..nh {
        for x in 0..nw {
            let s = src[2 * y * w + 2 * x] + src[2 * y * w + 2 * x + 1] + src[(2 * y + 1) * w + 2 * x]
                + src[(2 * y + 1) * w + 2 * x + 1];
            out[y * nw + x] = 0.25 * s;
        }
    }
    (out, nw, nh)
}

fn downsample_transpose(d: &[f64], w: usize, h: usize) -> Vec<f64> {
    let (nw, nh) = (w / 2, h / 2);
    let mut out = vec![0.0; w * h];
    for y in 0..nh {
        for x in 0..nw {
            let v = 0.25 * d[y * nw + x];
            out[2 * y * w + 2 * x] += v;
            out[2 * y * w + 2 * x + 1] += v;
            out[(2 * y + 1) * w + 2 * x] += v;
            out[(2 * y + 1) * w + 2 * x + 1] += v;
        }
    }
    out
}

fn grad_len(w: usize, h: usize) -> usize {
    w.saturating_sub(1) * h + w * h.saturating_sub(1)
}

impl FeatureExtractor for PyramidGradients {
    fn id(&self) -> &str {
        "pyramid-gradients"
    }

    fn features(&self, img: &Grid) -> Vec<f64> {
        let (mut w, mut h) = (img.width, img.height);
        let mut lum: Vec<f64> = img
            .data
            .chunks(img.channels)
            .map(|p| p.iter().zip(LUMA).map(|(a, b)| a * b).sum())
            .collect();
        let mut out = Vec::new();
        for level in 0..self.levels {
            if level > 0 {
                let (l, nw, nh) = downsample(&lum, w, h);
                lum = l;
                w = nw;
                h = nh;
            }
            for y in 0..h {
                for x in 0..w.saturating_sub(1) {
                    out.push(lum[y * w + x + 1] - lum[y * w + x]);
                }
            }
            for y in 0..h.saturating_sub(1) {
                for x in 0..w {
                    out.push(lum[(y + 1) * w + x] - lum[y * w + x]);
                }
            }
        }
        out
    }

    fn features_transpose(&self, width: usize, height: usize, d_feat: &[f64]) -> Grid {
        let mut dims = vec![(width, height)];
        for _ in 1..self.levels {
            let (w, h) = *dims.last().expect("level");
            dims.push((w / 2, h / 2));
        }
        let mut offsets = Vec::with_capacity(self.levels);
        let mut o = 0;
        for &(w, h) in &dims {
            offsets.push(o);
            o += grad_len(w, h);
        }
        let mut d_lum: Vec<f64> = Vec::new();
        for level in (0..self.levels).rev() {
            let (w, h) = dims[level];
            let mut d = if level + 1 < self.levels {
                downsample_transpose(&d_lum, w, h)
            } else {
                vec![0.0; w * h]
            };
            let mut k = offsets[level];
            for y in 0..h {
                for x in 0..w.saturating_sub(1) {
                    d[y * w + x + 1] += d_feat[k];
                    d[y * w + x] -= d_feat[k];
                    k += 1;
                }
            }
            for y in 0..h.saturating_sub(1) {
                for x in 0..w {
                    d[(y + 1) * w + x] += d_feat[k];
                    d[y * w + x] -= d_feat[k];
                    k += 1;
                }
            }
            d_lum = d;
        }
        let mut g = Grid::new(width, height, 3);
        for (p, v) in d_lum.iter().enumerate() {
            for c in 0..3 {
                g.data[3 * p + c] = LUMA[c] * v;
            }
        }
        g
    }
}

/// Mean absolute feature difference.
pub fn feature_loss_grad(ext: &dyn FeatureExtractor, render: &Grid, gt: &Grid) -> Result<(f64, Grid)> {
    same_shape(render, gt)?;
    let fr = ext.features(render);
    let fg = ext.features(gt);
    let n = fr.len().max(1) as f64;
    let mut l = 0.0;
    let d: Vec<f64> = fr
        .iter()
        .zip(&fg)
        .map(|(a, b)| {
            l += (a - b).abs();
            sign(a - b) / n
        })
        .collect();
    Ok((l / n, ext.features_transpose(render.width, render.height, &d)))
}

pub fn loss_vgg(ext: &dyn FeatureExtractor, render: &Grid, gt: &Grid) -> Result<f64> {
    Ok(feature_loss_grad(ext, render, gt)?.0)
}
