//! Anchor Gaussians: isotropic, view-independent splats that pin a body
//! point to a fixed texture coordinate.

use log::warn;

use crate::coremath::{farthest_point_sample, sh_to_rgb, Grid, Mat3, Vec2, Vec3};
use crate::error::{Error, Result};
use crate::gaussmodel::{project_mean_cov, GaussianSet, Splat2D};
use crate::rig::{skin, DeformNet, FrameParams, Rig};

pub const MIN_OPACITY: f64 = 0.05;
pub const MIN_SCALE: f64 = 1e-4;
pub const DEFAULT_COUNT: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub mu: Vec3,
    pub scale: f64,
    pub rgb: Vec3,
    pub opacity: f64,
    pub target_uv: Vec2,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnchorSet {
    pub anchors: Vec<Anchor>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn means(&self) -> Vec<Vec3> {
        self.anchors.iter().map(|a| a.mu).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorInitConfig {
    pub count: usize,
    /// Head-mask alpha at or above which a pixel counts as head.
    pub mask_threshold: f64,
    /// Reduce the count with a warning instead of failing.
    pub allow_fewer: bool,
}

impl Default for AnchorInitConfig {
    fn default() -> Self {
        Self {
            count: DEFAULT_COUNT,
            mask_threshold: 0.5,
            allow_fewer: false,
        }
    }
}

/// Deformed world positions of points for a frame.
pub fn deformed_positions(points: &[Vec3], frame: &FrameParams, rig: &Rig, net: &DeformNet) -> Vec<Vec3> {
    let pose = rig.frame_pose(frame);
    let (outs, _) = net.eval_batch(points);
    points
        .iter()
        .zip(&outs)
        .map(|(p, d)| {
            let s = skin(&pose, d);
            s.rot * p + s.trans
        })
        .collect()
}

/// Image-plane positions of points after skinning; `None` behind the camera.
pub fn project_points(points: &[Vec3], frame: &FrameParams, rig: &Rig, net: &DeformNet) -> Vec<Option<Vec2>> {
    deformed_positions(points, frame, rig, net)
        .iter()
        .map(|p| frame.cam.project_world(p))
        .collect()
}

fn mask_at(mask: &Grid, p: Vec2) -> f64 {
    let x = p.x.round();
    let y = p.y.round();
    if x < 0.0 || y < 0.0 || x >= mask.width as f64 || y >= mask.height as f64 {
        return 0.0;
    }
    mask.at(x as usize, y as usize)[0]
}

/// Selects anchors among Gaussians that project inside the canonical image
/// but outside the head mask.
pub fn init_anchors(
    gaussians: &GaussianSet,
    canonical: &FrameParams,
    head_mask: &Grid,
    rig: &Rig,
    net: &DeformNet,
    padding: usize,
    cfg: &AnchorInitConfig,
) -> Result<AnchorSet> {
    let means: Vec<Vec3> = gaussians.gaussians.iter().map(|g| g.mu).collect();
    let projected = project_points(&means, canonical, rig, net);
    let mut body = Vec::new();
    for (i, p) in projected.iter().enumerate() {
        if let Some(p) = p {
            if canonical.cam.contains_pixel(p) && mask_at(head_mask, *p) < cfg.mask_threshold {
                body.push(i);
            }
        }
    }
    let mut count = cfg.count;
    if body.len() < count {
        if cfg.allow_fewer && !body.is_empty() {
            warn!("only {} body gaussians available, using that many anchors", body.len());
            count = body.len();
        } else {
            return Err(Error::InsufficientAnchors {
                needed: count,
                found: body.len(),
            });
        }
    }
    // seed at the body point lowest in the image
    let seed = (0..body.len())
        .max_by(|&a, &b| {
            let ya = projected[body[a]].expect("projected").y;
            let yb = projected[body[b]].expect("projected").y;
            ya.total_cmp(&yb).then(b.cmp(&a))
        })
        .expect("non-empty body set");
    let pts: Vec<Vec3> = body.iter().map(|&i| means[i]).collect();
    let picked = farthest_point_sample(&pts, count, seed)?;
    let pad = Vec2::repeat(padding as f64);
    let anchors = picked
        .iter()
        .map(|&k| {
            let i = body[k];
            let g = &gaussians.gaussians[i];
            let dc = &g.sh[..3];
            let rgb = sh_to_rgb(dc, &Vec3::z()).expect("three DC values");
            Anchor {
                mu: g.mu,
                scale: g.scale.mean().max(MIN_SCALE),
                rgb,
                opacity: g.opacity.max(MIN_OPACITY),
                target_uv: projected[i].expect("projected") + pad,
            }
        })
        .collect();
    Ok(AnchorSet { anchors })
}

pub fn clamp_anchor_params(set: &mut AnchorSet) {
    for a in &mut set.anchors {
        a.opacity = a.opacity.max(MIN_OPACITY);
        a.scale = a.scale.max(MIN_SCALE);
    }
}

/// Removes anchors whose canonical-frame projection leaves the image.
/// Returns the indices that were kept.
pub fn frustum_cleanup(set: &mut AnchorSet, canonical: &FrameParams, rig: &Rig, net: &DeformNet) -> Vec<usize> {
    let projected = project_points(&set.means(), canonical, rig, net);
    let keep: Vec<usize> = projected
        .iter()
        .enumerate()
        .filter(|(_, p)| p.is_some_and(|p| canonical.cam.contains_pixel(&p)))
        .map(|(i, _)| i)
        .collect();
    set.anchors = keep.iter().map(|&i| set.anchors[i]).collect();
    keep
}

/// Splats for anchors already moved into world space. Anchors behind the
/// camera are left out; the returned indices map splats to anchors.
pub fn anchor_splats(
    set: &AnchorSet,
    deformed: &[Vec3],
    rots: &[Mat3],
    frame: &FrameParams,
) -> (Vec<Splat2D>, Vec<usize>) {
    let cam = &frame.cam;
    let mut splats = Vec::with_capacity(set.len());
    let mut index = Vec::with_capacity(set.len());
    for (i, a) in set.anchors.iter().enumerate() {
        let r = cam.rot * rots[i];
        let cov = r * r.transpose() * (a.scale * a.scale);
        let mu_cam = cam.world_to_cam(&deformed[i]);
        if let Ok(p) = project_mean_cov(&mu_cam, &cov, cam) {
            splats.push(Splat2D {
                mu2d: p.mu2d,
                cov2d: p.cov2d,
                depth: p.depth,
                rgb: a.rgb,
                opacity: a.opacity,
            });
            index.push(i);
        }
    }
    (splats, index)
}

/// Covariance of an isotropic anchor.
pub fn anchor_covariance(scale: f64) -> Mat3 {
    Mat3::identity() * (scale * scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coremath::Quat;
    use crate::gaussmodel::{Camera, Gaussian3D};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn canonical() -> FrameParams {
        FrameParams {
            index: 0,
            timestamp: 0.0,
            theta: vec![0.0; 12],
            psi: vec![0.0; 8],
            cam: Camera::looking_forward(Vec3::new(0.0, 0.0, -2.5), 160.0, 128, 128),
            ldmk: [Vec2::zeros(); 4],
            has_nose: false,
        }
    }

    fn gaussian(mu: Vec3) -> Gaussian3D {
        Gaussian3D {
            mu,
            scale: Vec3::new(0.01, 0.02, 0.03),
            quat: Quat::IDENTITY,
            opacity: 0.8,
            sh: vec![0.5, -0.2, 1.0],
        }
    }

    fn setup() -> (Rig, DeformNet) {
        let rig = Rig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = DeformNet::new(&rig, 16, 2, &mut rng);
        (rig, net)
    }

    #[test]
    fn all_in_head_mask_fails() {
        let (rig, net) = setup();
        let set = GaussianSet {
            sh_degree: 0,
            gaussians: (0..10).map(|i| gaussian(Vec3::new(0.01 * i as f64, 0.0, 0.0))).collect(),
        };
        let mask = Grid::filled(128, 128, 1, 1.0);
        let cfg = AnchorInitConfig { count: 4, ..Default::default() };
        let r = init_anchors(&set, &canonical(), &mask, &rig, &net, 50, &cfg);
        assert!(matches!(r, Err(Error::InsufficientAnchors { needed: 4, found: 0 })));
    }

    #[test]
    fn single_anchor_target_is_padded_projection() {
        let (rig, net) = setup();
        let p = Vec3::new(0.4, 0.5, 0.3);
        let set = GaussianSet {
            sh_degree: 0,
            gaussians: vec![gaussian(p)],
        };
        let mask = Grid::new(128, 128, 1);
        let cfg = AnchorInitConfig { count: 1, ..Default::default() };
        let a = init_anchors(&set, &canonical(), &mask, &rig, &net, 50, &cfg).unwrap();
        // projected by hand: f * x / z + c
        let z = 0.3 + 2.5;
        let expect = Vec2::new(160.0 * 0.4 / z + 63.5 + 50.0, 160.0 * 0.5 / z + 63.5 + 50.0);
        assert!((a.anchors[0].target_uv - expect).norm() < 1e-12);
        assert!((a.anchors[0].scale - 0.02).abs() < 1e-15);
        let rgb = 0.5 + 0.282_094_791_773_878_14 * 0.5;
        assert!((a.anchors[0].rgb.x - rgb).abs() < 1e-12);
    }

    #[test]
    fn fps_spread_beats_random_subsets() {
        let (rig, net) = setup();
        let mut gs = Vec::new();
        for i in 0..64 {
            for j in 0..64 {
                gs.push(gaussian(Vec3::new(-0.6 + 1.2 * i as f64 / 63.0, 0.1 + 0.6 * j as f64 / 63.0, 0.2)));
            }
        }
        let set = GaussianSet { sh_degree: 0, gaussians: gs };
        let mask = Grid::new(128, 128, 1);
        let cfg = AnchorInitConfig { count: 1024, ..Default::default() };
        let a = init_anchors(&set, &canonical(), &mask, &rig, &net, 50, &cfg).unwrap();
        let min_dist = |pts: &[Vec3]| {
            let mut m = f64::INFINITY;
            for i in 0..pts.len() {
                for j in i + 1..pts.len() {
                    m = m.min((pts[i] - pts[j]).norm());
                }
            }
            m
        };
        let picked = min_dist(&a.means());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let idx = rand::seq::index::sample(&mut rng, set.len(), 1024);
            let pts: Vec<Vec3> = idx.iter().map(|i| set.gaussians[i].mu).collect();
            assert!(picked >= min_dist(&pts));
        }
    }

    #[test]
    fn clamps() {
        let mut s = AnchorSet {
            anchors: vec![
                Anchor {
                    mu: Vec3::zeros(),
                    scale: 1e-6,
                    rgb: Vec3::zeros(),
                    opacity: 0.01,
                    target_uv: Vec2::zeros(),
                },
                Anchor {
                    mu: Vec3::zeros(),
                    scale: 0.2,
                    rgb: Vec3::zeros(),
                    opacity: 0.7,
                    target_uv: Vec2::zeros(),
                },
            ],
        };
        clamp_anchor_params(&mut s);
        assert_eq!(s.anchors[0].opacity, 0.05);
        assert_eq!(s.anchors[0].scale, 1e-4);
        assert_eq!(s.anchors[1].opacity, 0.7);
        assert_eq!(s.anchors[1].scale, 0.2);
        let once = s.clone();
        clamp_anchor_params(&mut s);
        assert_eq!(once, s);
    }

    #[test]
    fn cleanup_matches_rect_test() {
        let (rig, net) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let anchors: Vec<Anchor> = (0..200)
            .map(|_| Anchor {
                mu: Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-3.0..1.0)),
                scale: 0.01,
                rgb: Vec3::zeros(),
                opacity: 0.5,
                target_uv: Vec2::zeros(),
            })
            .collect();
        let mut set = AnchorSet { anchors: anchors.clone() };
        let f = canonical();
        let kept = frustum_cleanup(&mut set, &f, &rig, &net);
        let expect: Vec<usize> = anchors
            .iter()
            .enumerate()
            .filter(|(_, a)| {
                let c = a.mu - f.cam.position;
                if c.z <= 0.01 {
                    return false;
                }
                let u = 160.0 * c.x / c.z + 63.5;
                let v = 160.0 * c.y / c.z + 63.5;
                (-0.5..127.5).contains(&u) && (-0.5..127.5).contains(&v)
            })
            .map(|(i, _)| i)
            .collect();
        assert_eq!(kept, expect);
        assert!(kept.len() > 10 && kept.len() < 200);

        // behind the camera is removed, inside is unchanged
        let mut s = AnchorSet {
            anchors: vec![anchors[kept[0]], Anchor { mu: Vec3::new(0.0, 0.0, -3.0), ..anchors[0] }],
        };
        frustum_cleanup(&mut s, &f, &rig, &net);
        assert_eq!(s.anchors, vec![anchors[kept[0]]]);
    }
}
