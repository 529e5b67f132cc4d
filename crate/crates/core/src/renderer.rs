//! Depth-sorted alpha-compositing rasterizer and the three-layer compositor.
//!
//! Pixel `(x, y)` is sampled at its integer coordinate. The image is split
//! into 16x16 tiles rasterized in parallel; every tile writes a disjoint
//! block and gradients are reduced in tile order, so results do not depend
//! on the thread count.

use rayon::prelude::*;

use crate::coremath::{Grid, Mat2, Vec2, Vec3};
use crate::error::{Error, Result};
use crate::gaussmodel::Splat2D;

pub const TILE: usize = 16;
pub const MAX_ALPHA: f64 = 0.99;
pub const MIN_ALPHA: f64 = 1.0 / 255.0;

/// Rectangle of pixels to rasterize, in full-image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl Window {
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            x0: 0,
            y0: 0,
            width,
            height,
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Premultiplied colour and coverage of one group of splats.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderLayer {
    pub color: Grid,
    pub alpha: Grid,
}

impl RenderLayer {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            color: Grid::new(width, height, 3),
            alpha: Grid::new(width, height, 1),
        }
    }

    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Framebuffer {
    pub rgb: Grid,
    pub background: Vec3,
}

/// Gradient of a loss with respect to one splat.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SplatGrad {
    pub mu2d: Vec2,
    /// Full-matrix gradient with respect to the 2D covariance.
    pub cov2d: Mat2,
    pub rgb: Vec3,
    pub opacity: f64,
}

#[derive(Debug, Clone, Copy)]
struct Prepared {
    mu: Vec2,
    conic: Mat2,
    rgb: Vec3,
    opacity: f64,
}

/// Depth-sorted splats binned to tiles; reusable for the backward pass.
#[derive(Debug, Clone)]
pub struct Binning {
    window: Window,
    tiles_x: usize,
    tiles_y: usize,
    prepared: Vec<Option<Prepared>>,
    /// Per tile, splat indices front to back.
    lists: Vec<Vec<u32>>,
}

/// Half extents of the region where a splat can reach the skip threshold.
fn extent(cov: &Mat2, opacity: f64) -> Option<(f64, f64)> {
    if !(opacity >= MIN_ALPHA) {
        return None;
    }
    let r2 = 2.0 * (255.0 * opacity).ln();
    let r = r2.max(0.0).sqrt();
    Some((r * cov[(0, 0)].sqrt(), r * cov[(1, 1)].sqrt()))
}

pub fn bin_splats(splats: &[Splat2D], window: Window) -> Binning {
    let mut order: Vec<u32> = (0..splats.len() as u32).collect();
    order.sort_by(|&a, &b| splats[a as usize].depth.total_cmp(&splats[b as usize].depth));
    let tiles_x = window.width.div_ceil(TILE);
    let tiles_y = window.height.div_ceil(TILE);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    let mut prepared = vec![None; splats.len()];
    for &i in &order {
        let s = &splats[i as usize];
        let det = s.cov2d.determinant();
        if !(det > 0.0) || !s.mu2d.iter().all(|v| v.is_finite()) {
            continue;
        }
        let Some((ex, ey)) = extent(&s.cov2d, s.opacity) else {
            continue;
        };
        let lx = s.mu2d.x - ex - window.x0 as f64;
        let hx = s.mu2d.x + ex - window.x0 as f64;
        let ly = s.mu2d.y - ey - window.y0 as f64;
        let hy = s.mu2d.y + ey - window.y0 as f64;
        if hx < 0.0 || hy < 0.0 || lx > window.width as f64 - 1.0 || ly > window.height as f64 - 1.0 {
            continue;
        }
        let tx0 = (lx.max(0.0).ceil() as usize) / TILE;
        let ty0 = (ly.max(0.0).ceil() as usize) / TILE;
        let tx1 = ((hx.floor() as usize).min(window.width - 1)) / TILE;
        let ty1 = ((hy.floor() as usize).min(window.height - 1)) / TILE;
        let conic = Mat2::new(s.cov2d[(1, 1)], -s.cov2d[(0, 1)], -s.cov2d[(1, 0)], s.cov2d[(0, 0)]) / det;
        prepared[i as usize] = Some(Prepared {
            mu: s.mu2d,
            conic,
            rgb: s.rgb,
            opacity: s.opacity,
        });
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                lists[ty * tiles_x + tx].push(i);
            }
        }
    }
    Binning {
        window,
        tiles_x,
        tiles_y,
        prepared,
        lists,
    }
}

#[inline]
fn splat_alpha(p: &Prepared, px: f64, py: f64) -> Option<(f64, f64, Vec2)> {
    let d = Vec2::new(px - p.mu.x, py - p.mu.y);
    let power = -0.5 * (d.x * d.x * p.conic[(0, 0)] + d.y * d.y * p.conic[(1, 1)])
        - d.x * d.y * 0.5 * (p.conic[(0, 1)] + p.conic[(1, 0)]);
    if power > 0.0 {
        return None;
    }
    let g = power.exp();
    let a = (p.opacity * g).min(MAX_ALPHA);
    (a >= MIN_ALPHA).then_some((a, g, d))
}

struct TileOut {
    color: Vec<[f64; 3]>,
    alpha: Vec<f64>,
}

impl Binning {
    fn tile_rect(&self, t: usize) -> (usize, usize, usize, usize) {
        let tx = t % self.tiles_x;
        let ty = t / self.tiles_x;
        let x0 = tx * TILE;
        let y0 = ty * TILE;
        (x0, y0, (x0 + TILE).min(self.window.width), (y0 + TILE).min(self.window.height))
    }

    fn render_tile(&self, t: usize) -> TileOut {
        let (x0, y0, x1, y1) = self.tile_rect(t);
        let n = (x1 - x0) * (y1 - y0);
        let mut out = TileOut {
            color: Vec::with_capacity(n),
            alpha: Vec::with_capacity(n),
        };
        let list = &self.lists[t];
        for y in y0..y1 {
            let py = (y + self.window.y0) as f64;
            for x in x0..x1 {
                let px = (x + self.window.x0) as f64;
                let mut trans = 1.0;
                let mut c = [0.0; 3];
                for &i in list {
                    let p = self.prepared[i as usize].as_ref().expect("binned splat");
                    if let Some((a, _, _)) = splat_alpha(p, px, py) {
                        let w = a * trans;
                        c[0] += w * p.rgb.x;
                        c[1] += w * p.rgb.y;
                        c[2] += w * p.rgb.z;
                        trans *= 1.0 - a;
                    }
                }
                out.color.push(c);
                out.alpha.push(1.0 - trans);
            }
        }
        out
    }

    pub fn render(&self) -> RenderLayer {
        let n_tiles = self.tiles_x * self.tiles_y;
        let tiles: Vec<TileOut> = (0..n_tiles).into_par_iter().map(|t| self.render_tile(t)).collect();
        let mut layer = RenderLayer::empty(self.window.width, self.window.height);
        for (t, out) in tiles.iter().enumerate() {
            let (x0, y0, x1, _) = self.tile_rect(t);
            let tw = x1 - x0;
            for (k, (c, a)) in out.color.iter().zip(&out.alpha).enumerate() {
                let (x, y) = (x0 + k % tw, y0 + k / tw);
                layer.color.at_mut(x, y).copy_from_slice(c);
                layer.alpha.at_mut(x, y)[0] = *a;
            }
        }
        layer
    }

    fn backward_tile(&self, t: usize, d_color: &Grid, d_alpha: &Grid) -> Vec<(u32, SplatGrad)> {
        let (x0, y0, x1, y1) = self.tile_rect(t);
        let list = &self.lists[t];
        let mut local = vec![SplatGrad::default(); list.len()];
        let mut hits: Vec<(usize, f64, f64, Vec2, f64)> = Vec::with_capacity(list.len());
        for y in y0..y1 {
            let py = (y + self.window.y0) as f64;
            for x in x0..x1 {
                let px = (x + self.window.x0) as f64;
                let dc = d_color.at(x, y);
                let dc = Vec3::new(dc[0], dc[1], dc[2]);
                let da_total = d_alpha.at(x, y)[0];
                if dc == Vec3::zeros() && da_total == 0.0 {
                    continue;
                }
                hits.clear();
                let mut trans = 1.0;
                for (k, &i) in list.iter().enumerate() {
                    let p = self.prepared[i as usize].as_ref().expect("binned splat");
                    if let Some((a, g, d)) = splat_alpha(p, px, py) {
                        hits.push((k, a, g, d, trans));
                        trans *= 1.0 - a;
                    }
                }
                let final_t = trans;
                let mut behind = Vec3::zeros();
                for &(k, a, g, d, t_i) in hits.iter().rev() {
                    let p = self.prepared[list[k] as usize].as_ref().expect("binned splat");
                    let gr = &mut local[k];
                    gr.rgb += dc * (a * t_i);
                    let d_a = t_i * dc.dot(&(p.rgb - behind)) + da_total * final_t / (1.0 - a);
                    behind = p.rgb * a + behind * (1.0 - a);
                    if p.opacity * g > MAX_ALPHA {
                        continue;
                    }
                    gr.opacity += d_a * g;
                    let d_power = d_a * a;
                    let qd = p.conic * d;
                    gr.mu2d += qd * d_power;
                    // d power / d conic = -1/2 d d^T, then through the inverse
                    let d_conic = d * d.transpose() * (-0.5 * d_power);
                    gr.cov2d -= p.conic.transpose() * d_conic * p.conic.transpose();
                }
            }
        }
        list.iter().copied().zip(local).collect()
    }

    /// Gradients for every input splat given image-space gradients on the
    /// layer colour and alpha.
    pub fn backward(&self, d_color: &Grid, d_alpha: &Grid) -> Vec<SplatGrad> {
        let n_tiles = self.tiles_x * self.tiles_y;
        let parts: Vec<Vec<(u32, SplatGrad)>> = (0..n_tiles)
            .into_par_iter()
            .map(|t| self.backward_tile(t, d_color, d_alpha))
            .collect();
        let mut grads = vec![SplatGrad::default(); self.prepared.len()];
        for part in parts {
            for (i, g) in part {
                let acc = &mut grads[i as usize];
                acc.mu2d += g.mu2d;
                acc.cov2d += g.cov2d;
                acc.rgb += g.rgb;
                acc.opacity += g.opacity;
            }
        }
        grads
    }
}

/// Rasterizes splats over the whole image.
pub fn splat_layer(splats: &[Splat2D], width: usize, height: usize) -> RenderLayer {
    bin_splats(splats, Window::full(width, height)).render()
}

fn check_layer(name: &str, g: &Grid, w: usize, h: usize, c: usize) -> Result<()> {
    if g.width != w || g.height != h || g.channels != c {
        return Err(Error::Shape(format!(
            "{name} is {}x{}x{}, expected {w}x{h}x{c}",
            g.width, g.height, g.channels
        )));
    }
    Ok(())
}

/// Unclamped `anchor + (1 - a_anchor) head + (1 - a_anchor)(1 - a_head) body`.
/// A missing body layer is replaced by the constant background.
pub fn composite_unclamped(
    anchor: &RenderLayer,
    head: &RenderLayer,
    body: Option<&Grid>,
    bg: Vec3,
) -> Result<Grid> {
    let (w, h) = (head.width(), head.height());
    check_layer("anchor colour", &anchor.color, w, h, 3)?;
    check_layer("anchor alpha", &anchor.alpha, w, h, 1)?;
    check_layer("head alpha", &head.alpha, w, h, 1)?;
    if let Some(b) = body {
        check_layer("body", b, w, h, 3)?;
    }
    let mut out = Grid::new(w, h, 3);
    for p in 0..w * h {
        let aa = anchor.alpha.data[p];
        let ah = head.alpha.data[p];
        for c in 0..3 {
            let t = body.map_or(bg[c], |b| b.data[3 * p + c]);
            out.data[3 * p + c] =
                anchor.color.data[3 * p + c] + (1.0 - aa) * head.color.data[3 * p + c] + (1.0 - aa) * (1.0 - ah) * t;
        }
    }
    Ok(out)
}

pub fn composite(anchor: &RenderLayer, head: &RenderLayer, body: Option<&Grid>, bg: Vec3) -> Result<Framebuffer> {
    let mut rgb = composite_unclamped(anchor, head, body, bg)?;
    rgb.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(Framebuffer { rgb, background: bg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_splat(rng: &mut ChaCha8Rng, w: f64) -> Splat2D {
        let a = rng.random_range(0.5..3.0);
        let b = rng.random_range(0.5..3.0);
        let c = rng.random_range(-0.8..0.8) * (a * b);
        Splat2D {
            mu2d: Vec2::new(rng.random_range(-1.0..w), rng.random_range(-1.0..w)),
            cov2d: Mat2::new(a * a, c, c, b * b),
            depth: rng.random_range(1.0..5.0),
            rgb: Vec3::new(rng.random(), rng.random(), rng.random()),
            opacity: rng.random_range(0.05..1.0),
        }
    }

    /// Direct per-pixel evaluation of the blending formula.
    fn brute(splats: &[Splat2D], w: usize, h: usize) -> RenderLayer {
        let mut idx: Vec<usize> = (0..splats.len()).collect();
        idx.sort_by(|&a, &b| splats[a].depth.total_cmp(&splats[b].depth).then(a.cmp(&b)));
        let mut out = RenderLayer::empty(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut t = 1.0;
                let mut c = Vec3::zeros();
                for &i in &idx {
                    let s = &splats[i];
                    let d = Vec2::new(x as f64, y as f64) - s.mu2d;
                    let q = s.cov2d.try_inverse().unwrap();
                    let a = (s.opacity * (-0.5 * (d.transpose() * q * d)[0]).exp()).min(0.99);
                    if a < 1.0 / 255.0 {
                        continue;
                    }
                    c += s.rgb * a * t;
                    t *= 1.0 - a;
                }
                out.color.at_mut(x, y).copy_from_slice(c.as_slice());
                out.alpha.at_mut(x, y)[0] = 1.0 - t;
            }
        }
        out
    }

    #[test]
    fn empty_list_renders_nothing() {
        let l = splat_layer(&[], 5, 4);
        assert!(l.color.data.iter().all(|v| *v == 0.0));
        assert!(l.alpha.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn centred_splat() {
        let s = Splat2D {
            mu2d: Vec2::new(2.0, 1.0),
            cov2d: Mat2::identity(),
            depth: 1.0,
            rgb: Vec3::new(1.0, 0.0, 0.0),
            opacity: 0.5,
        };
        let l = splat_layer(&[s], 4, 3);
        assert_eq!(l.color.at(2, 1), &[0.5, 0.0, 0.0]);
        assert_eq!(l.alpha.at(2, 1)[0], 0.5);
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let splats: Vec<_> = (0..3).map(|_| random_splat(&mut rng, 8.0)).collect();
            let a = splat_layer(&splats, 8, 8);
            let b = brute(&splats, 8, 8);
            for (x, y) in a.color.data.iter().zip(&b.color.data) {
                assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in a.alpha.data.iter().zip(&b.alpha.data) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        // larger scene spanning several tiles
        let splats: Vec<_> = (0..60).map(|_| random_splat(&mut rng, 40.0)).collect();
        let a = splat_layer(&splats, 40, 37);
        let b = brute(&splats, 40, 37);
        for (x, y) in a.color.data.iter().zip(&b.color.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn window_matches_full_render() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let splats: Vec<_> = (0..40).map(|_| random_splat(&mut rng, 40.0)).collect();
        let full = splat_layer(&splats, 40, 40);
        let win = Window {
            x0: 7,
            y0: 11,
            width: 20,
            height: 19,
        };
        let part = bin_splats(&splats, win).render();
        for y in 0..19 {
            for x in 0..20 {
                assert_eq!(part.color.at(x, y), full.color.at(x + 7, y + 11));
            }
        }
    }

    #[test]
    fn order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let splats: Vec<_> = (0..10).map(|_| random_splat(&mut rng, 8.0)).collect();
        let mut rev = splats.clone();
        rev.reverse();
        assert_eq!(splat_layer(&splats, 8, 8), splat_layer(&rev, 8, 8));
    }

    #[test]
    fn thread_count_does_not_change_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let splats: Vec<_> = (0..200).map(|_| random_splat(&mut rng, 64.0)).collect();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| splat_layer(&splats, 64, 64));
        let b = four.install(|| splat_layer(&splats, 64, 64));
        assert_eq!(a, b);
        let bin = bin_splats(&splats, Window::full(64, 64));
        let dc = Grid::from_fn(64, 64, 3, |x, y, c| ((x * 3 + y * 7 + c) % 5) as f64 - 2.0);
        let da = Grid::from_fn(64, 64, 1, |x, y, _| ((x + y) % 3) as f64 - 1.0);
        let ga = one.install(|| bin.backward(&dc, &da));
        let gb = four.install(|| bin.backward(&dc, &da));
        assert_eq!(ga, gb);
    }

    #[test]
    fn alpha_monotone_in_opacity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut splats: Vec<_> = (0..5).map(|_| random_splat(&mut rng, 8.0)).collect();
        let before = splat_layer(&splats, 8, 8);
        splats[2].opacity = (splats[2].opacity + 0.3).min(1.0);
        let after = splat_layer(&splats, 8, 8);
        for (a, b) in before.alpha.data.iter().zip(&after.alpha.data) {
            assert!(b >= a);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let splats: Vec<_> = (0..3).map(|_| random_splat(&mut rng, 8.0)).collect();
            let wc = Grid::from_fn(8, 8, 3, |_, _, _| rng.random_range(-1.0..1.0));
            let wa = Grid::from_fn(8, 8, 1, |_, _, _| rng.random_range(-1.0..1.0));
            let loss = |s: &[Splat2D]| {
                let l = splat_layer(s, 8, 8);
                l.color.data.iter().zip(&wc.data).map(|(a, b)| a * b).sum::<f64>()
                    + l.alpha.data.iter().zip(&wa.data).map(|(a, b)| a * b).sum::<f64>()
            };
            let g = bin_splats(&splats, Window::full(8, 8)).backward(&wc, &wa);
            let h = 1e-6;
            let check = |an: f64, f: &dyn Fn(&mut Splat2D, f64)| {
                let mut a = splats.clone();
                let mut b = splats.clone();
                f(&mut a[0], h);
                f(&mut b[0], -h);
                let fd = (loss(&a) - loss(&b)) / (2.0 * h);
                assert!((fd - an).abs() < 1e-5 * (1.0 + fd.abs()), "{fd} vs {an}");
            };
            check(g[0].opacity, &|s, e| s.opacity += e);
            check(g[0].mu2d.x, &|s, e| s.mu2d.x += e);
            check(g[0].mu2d.y, &|s, e| s.mu2d.y += e);
            check(g[0].rgb.y, &|s, e| s.rgb.y += e);
            check(g[0].cov2d[(0, 0)], &|s, e| s.cov2d[(0, 0)] += e);
            check(g[0].cov2d[(1, 1)], &|s, e| s.cov2d[(1, 1)] += e);
            check(g[0].cov2d[(0, 1)], &|s, e| s.cov2d[(0, 1)] += e);
        }
    }

    #[test]
    fn composite_hand_example() {
        let mut anchor = RenderLayer::empty(1, 1);
        anchor.color.data.copy_from_slice(&[0.25, 0.0, 0.0]);
        anchor.alpha.data[0] = 0.25;
        let mut head = RenderLayer::empty(1, 1);
        head.color.data.copy_from_slice(&[0.2, 0.2, 0.0]);
        head.alpha.data[0] = 0.5;
        let body = Grid::filled(1, 1, 3, 1.0);
        let fb = composite(&anchor, &head, Some(&body), Vec3::repeat(1.0)).unwrap();
        let expect = [0.775, 0.525, 0.375];
        for (a, b) in fb.rgb.data.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn composite_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let body = Grid::from_fn(3, 2, 3, |_, _, _| rng.random());
        let mut head = RenderLayer::empty(3, 2);
        head.color = Grid::from_fn(3, 2, 3, |_, _, _| rng.random_range(0.0..0.3));
        head.alpha = Grid::from_fn(3, 2, 1, |_, _, _| rng.random_range(0.3..0.7));
        let none = RenderLayer::empty(3, 2);
        let fb = composite(&none, &head, Some(&body), Vec3::zeros()).unwrap();
        for p in 0..6 {
            for c in 0..3 {
                let e = head.color.data[3 * p + c] + (1.0 - head.alpha.data[p]) * body.data[3 * p + c];
                assert!((fb.rgb.data[3 * p + c] - e.clamp(0.0, 1.0)).abs() < 1e-15);
            }
        }
        let mut full = RenderLayer::empty(3, 2);
        full.alpha.data.fill(1.0);
        full.color.data.fill(0.3);
        let fb = composite(&full, &head, Some(&body), Vec3::zeros()).unwrap();
        assert!(fb.rgb.data.iter().all(|v| (*v - 0.3).abs() < 1e-15));
        let fb = composite(&none, &none, Some(&body), Vec3::zeros()).unwrap();
        assert_eq!(fb.rgb, body);
        let small = RenderLayer::empty(2, 2);
        assert!(matches!(composite(&small, &head, Some(&body), Vec3::zeros()), Err(Error::Shape(_))));
    }
}
