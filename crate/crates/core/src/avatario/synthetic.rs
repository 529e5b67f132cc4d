//! Procedural capture for end-to-end tests.
//!
//! The scene is the toy rig's head, drawn as opaque Gaussians on the head
//! and neck vertices, in front of a textured plane `z - 0.1 y = 0.35` that
//! carries the shoulders and backdrop. The camera translates slightly
//! every frame, so the plane moves by an exact homography. Head and jaw
//! rotate and the expression changes smoothly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coremath::{normalize_homography, svd_least_squares_homography, Grid, Mat3, Vec2, Vec3, SH_C0};
use crate::error::Result;
use crate::fastpath::head_layer;
use crate::gaussmodel::{Camera, GaussianSet};
use crate::model::init_head_gaussians;
use crate::renderer::{composite, RenderLayer};
use crate::rig::{deform_vertex, vertex_attributes, DeformOutput, FrameParams, Rig};
use crate::trainer::{Dataset, TrainFrame};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub frames: usize,
    /// Every `holdout_every`-th frame (offset 3) is held out; 0 disables.
    pub holdout_every: usize,
    /// Scales every motion amplitude; 0 gives a static scene.
    pub motion: f64,
    pub camera_shift: Vec2,
    pub joint_amplitude: f64,
    pub expression_amplitude: f64,
    pub fps: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            focal: 160.0,
            frames: 120,
            holdout_every: 6,
            motion: 1.0,
            camera_shift: Vec2::new(0.04, 0.03),
            joint_amplitude: 0.1,
            expression_amplitude: 0.5,
            fps: 30.0,
        }
    }
}

/// Plane carrying the body: `normal . x = offset` in world space.
pub const PLANE_NORMAL: Vec3 = Vec3::new(0.0, -0.1, 1.0);
pub const PLANE_OFFSET: f64 = 0.35;
const CAMERA_DISTANCE: f64 = 2.5;
const HEAD_OPACITY: f64 = 0.95;

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub config: SyntheticConfig,
    pub rig: Rig,
    pub frames: Vec<TrainFrame>,
    /// Indices into `frames` that are withheld from training.
    pub holdout: Vec<usize>,
    /// Per frame, the pixel homography mapping body pixels of that frame to
    /// the same surface point in frame 0.
    pub homographies: Vec<Mat3>,
    pub head: GaussianSet,
    pub head_deform: Vec<DeformOutput>,
}

impl SyntheticScene {
    fn split(&self, held: bool) -> Dataset {
        Dataset {
            frames: self
                .frames
                .iter()
                .enumerate()
                .filter(|(i, _)| self.holdout.contains(i) == held)
                .map(|(_, f)| f.clone())
                .collect(),
        }
    }

    pub fn train(&self) -> Dataset {
        self.split(false)
    }

    pub fn test(&self) -> Dataset {
        self.split(true)
    }

    /// Largest disagreement, in pixels over the collar vertices, between the
    /// stored homography and one re-estimated from projected rig vertices.
    pub fn homography_self_check(&self) -> Result<f64> {
        let collar: Vec<usize> = (0..self.rig.mesh.vertices.len())
            .filter(|&i| self.rig.mesh.weights[i * self.rig.n_joints()] >= 1.0 - 1e-9)
            .collect();
        let project = |f: &FrameParams| -> Vec<Vec2> {
            collar
                .iter()
                .map(|&i| f.cam.project_world(&self.rig.mesh.vertices[i]).expect("plane in front"))
                .collect()
        };
        let dst = project(&self.frames[0].params);
        let mut worst: f64 = 0.0;
        for (f, h) in self.frames.iter().zip(&self.homographies) {
            let src = project(&f.params);
            let est = normalize_homography(&svd_least_squares_homography(&src, &dst)?);
            worst = worst.max((est - normalize_homography(h)).abs().max());
        }
        Ok(worst)
    }
}

fn intrinsics(cam: &Camera) -> Mat3 {
    Mat3::new(cam.fx, 0.0, cam.cx, 0.0, cam.fy, cam.cy, 0.0, 0.0, 1.0)
}

/// Pixel homography from frame `cam` to frame `reference` for points on the
/// body plane. Both cameras share rotation and intrinsics.
pub fn plane_homography(cam: &Camera, reference: &Camera) -> Mat3 {
    let k = intrinsics(cam);
    let k_inv = k.try_inverse().expect("intrinsics are invertible");
    let dc = cam.position - reference.position;
    let denom = PLANE_OFFSET - PLANE_NORMAL.dot(&cam.position);
    let m = Mat3::identity() + dc * PLANE_NORMAL.transpose() / denom;
    // Rotation is shared, so it cancels in camera coordinates.
    normalize_homography(&(k * cam.rot.transpose() * m * cam.rot * k_inv))
}

/// Smooth shirt and backdrop colour at a point of the body plane.
fn plane_color(p: &Vec3) -> Vec3 {
    let (x, y) = (p.x, p.y);
    // Shoulder outline: a soft parabola below the neck.
    let shoulder_line = 0.22 + 0.35 * x * x;
    let shirt = 0.5 * (1.0 + ((y - shoulder_line) / 0.04).tanh());
    let backdrop = Vec3::new(0.55 + 0.15 * x, 0.62 - 0.08 * y, 0.72 + 0.05 * (2.0 * x).sin());
    let stripe = (std::f64::consts::TAU * x / 0.32).sin();
    let band = (std::f64::consts::TAU * y / 0.45 + 0.7).sin();
    let cloth = Vec3::new(
        0.30 + 0.10 * stripe + 0.05 * band,
        0.35 + 0.08 * stripe,
        0.55 + 0.12 * stripe - 0.04 * band,
    );
    backdrop * (1.0 - shirt) + cloth * shirt
}

/// Colour of the head surface at a canonical position: skin with darker
/// hair on top and at the back.
fn head_color(p: &Vec3) -> Vec3 {
    let skin = Vec3::new(0.86, 0.66, 0.55) + 0.06 * Vec3::repeat((6.0 * p.x).cos());
    let hair = Vec3::new(0.26, 0.18, 0.13);
    let top = 0.5 * (1.0 + ((-0.46 - p.y) / 0.05).tanh());
    let back = 0.5 * (1.0 + ((p.z - 0.12) / 0.05).tanh()) * (p.y < -0.1) as u8 as f64;
    let h = top.max(back);
    skin * (1.0 - h) + hair * h
}

/// Ground-truth head Gaussians (DC colour only) and their exact skinning
/// attributes.
fn ground_truth_head(rig: &Rig) -> (GaussianSet, Vec<DeformOutput>) {
    let mut set = init_head_gaussians(rig, 0, HEAD_OPACITY);
    let verts = crate::model::head_vertices(rig);
    for g in &mut set.gaussians {
        let c = head_color(&g.mu);
        g.sh = vec![(c.x - 0.5) / SH_C0, (c.y - 0.5) / SH_C0, (c.z - 0.5) / SH_C0];
    }
    let attrs = verts.iter().map(|&v| vertex_attributes(rig, v)).collect();
    (set, attrs)
}

fn body_image(cam: &Camera) -> Grid {
    let k_inv = intrinsics(cam).try_inverse().expect("intrinsics are invertible");
    let rt = cam.rot.transpose();
    Grid::from_fn(cam.width, cam.height, 3, |x, y, c| {
        let ray = rt * (k_inv * Vec3::new(x as f64, y as f64, 1.0));
        let t = (PLANE_OFFSET - PLANE_NORMAL.dot(&cam.position)) / PLANE_NORMAL.dot(&ray);
        plane_color(&(cam.position + t * ray))[c]
    })
}

fn motion(cfg: &SyntheticConfig, rig: &Rig, phases: &[f64], t: f64) -> (Vec<f64>, Vec<f64>, Vec3) {
    let m = cfg.motion;
    let mut theta = vec![0.0; 3 * rig.n_joints()];
    // neck and head about all axes, jaw about x only
    let freqs = [0.7, 1.1, 0.9, 1.3, 0.5, 1.7, 2.1];
    for (k, slot) in [3, 4, 5, 6, 7, 8, 9].into_iter().enumerate() {
        let amp = if slot == 9 { 1.2 } else { 1.0 } * cfg.joint_amplitude;
        theta[slot] = m * amp * (freqs[k] * t + phases[k]).sin();
    }
    // a jaw never opens backwards
    theta[9] = theta[9].abs();
    let psi = (0..rig.n_expr)
        .map(|k| m * cfg.expression_amplitude * ((0.6 + 0.23 * k as f64) * t + phases[7 + k]).sin())
        .collect();
    let cam = Vec3::new(
        m * cfg.camera_shift.x * (0.8 * t + phases[15]).sin(),
        m * cfg.camera_shift.y * (0.55 * t + phases[16]).sin(),
        0.0,
    );
    (theta, psi, cam)
}

/// Front-most head vertex, used as the nose landmark.
fn nose_vertex(rig: &Rig) -> usize {
    crate::model::head_vertices(rig)
        .into_iter()
        .min_by(|&a, &b| rig.mesh.vertices[a].z.total_cmp(&rig.mesh.vertices[b].z))
        .expect("rig has head vertices")
}

fn plane_point(x: f64, y: f64) -> Vec3 {
    // z from n . p = d with n = (0, -0.1, 1)
    Vec3::new(x, y, PLANE_OFFSET + 0.1 * y)
}

/// Generates the scene. Equal seeds give identical output.
pub fn make_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phases: Vec<f64> = (0..17).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let rig = Rig::toy();
    let (head, head_deform) = ground_truth_head(&rig);
    let nose = nose_vertex(&rig);
    let shoulders = [plane_point(-0.6, 0.6), plane_point(0.6, 0.6)];

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut homographies = Vec::with_capacity(cfg.frames);
    let mut reference: Option<Camera> = None;
    for i in 0..cfg.frames {
        let t = i as f64 / cfg.fps;
        let (theta, psi, shift) = motion(cfg, &rig, &phases, t);
        let cam = Camera::looking_forward(
            Vec3::new(shift.x, shift.y, -CAMERA_DISTANCE),
            cfg.focal,
            cfg.width,
            cfg.height,
        );
        let mut params = FrameParams {
            index: i,
            timestamp: t,
            theta,
            psi,
            cam,
            ldmk: [Vec2::zeros(); 4],
            has_nose: true,
        };
        let pose = rig.frame_pose(&params);
        let neck = rig.joints(&params.psi)[1];
        let proj = |p: &Vec3| params.cam.project_world(p).expect("scene is in front of the camera");
        params.ldmk = [
            proj(&neck),
            proj(&shoulders[0]),
            proj(&shoulders[1]),
            proj(&deform_vertex(&rig, &pose, nose)),
        ];

        let head_rgba = head_layer(&head, &head_deform, &pose, &params)?;
        let body = body_image(&params.cam);
        let empty = RenderLayer::empty(cfg.width, cfg.height);
        let image = composite(&empty, &head_rgba, Some(&body), Vec3::repeat(1.0))?.rgb;
        let reference_cam = reference.get_or_insert_with(|| params.cam.clone());
        homographies.push(plane_homography(&params.cam, reference_cam));
        frames.push(TrainFrame {
            params,
            image,
            head_mask: head_rgba.alpha,
        });
    }
    let holdout = if cfg.holdout_every == 0 {
        Vec::new()
    } else {
        (0..cfg.frames).filter(|i| i % cfg.holdout_every == 3 % cfg.holdout_every).collect()
    };
    Ok(SyntheticScene {
        config: *cfg,
        rig,
        frames,
        holdout,
        homographies,
        head,
        head_deform,
    })
}
