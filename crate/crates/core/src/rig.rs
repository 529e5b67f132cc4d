//! Skeletal rig, per-Gaussian blendshape/skinning network and linear blend
//! skinning.
//!
//! Bones follow the usual convention: bone `j` rotates its subtree about its
//! joint location, composed with its parent. Bone 0 is a static root whose
//! transform is always the identity.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coremath::{frob, Mat3, Vec2, Vec3};
use crate::error::{Error, Result};
use crate::gaussmodel::{Camera, Gaussian3D, GaussianSet};
use crate::mlp::{Activation, Mlp, MlpCache, MlpGrads};

/// Vertices of the reference mesh with their blendshapes and skinning
/// weights, used as pseudo ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceMesh {
    pub vertices: Vec<Vec3>,
    /// `n_v x (n_expr * 3)`
    pub expr_basis: Vec<f64>,
    /// `n_v x (n_pose_features * 3)`
    pub pose_basis: Vec<f64>,
    /// `n_v x n_joints`
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rig {
    /// Parent of each joint; the root (index 0) has none.
    pub parents: Vec<Option<usize>>,
    pub rest_joints: Vec<Vec3>,
    pub n_expr: usize,
    /// `n_joints x n_expr x 3`: joint displacement per expression coefficient.
    pub joint_regressor: Vec<f64>,
    /// Joints whose rotations condition the texture networks.
    pub conditioning_joints: Vec<usize>,
    pub mesh: ReferenceMesh,
}

/// Per-frame driving parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameParams {
    pub index: usize,
    pub timestamp: f64,
    /// Axis-angle per joint, `n_joints x 3`. The root entry is ignored.
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
    pub cam: Camera,
    /// Neck, left shoulder, right shoulder, nose (pixels).
    pub ldmk: [Vec2; 4],
    pub has_nose: bool,
}

impl FrameParams {
    /// Rest pose with zero expression and landmarks at the origin.
    pub fn neutral(rig: &Rig, cam: Camera) -> Self {
        Self {
            index: 0,
            timestamp: 0.0,
            theta: vec![0.0; 3 * rig.n_joints()],
            psi: vec![0.0; rig.n_expr],
            cam,
            ldmk: [Vec2::zeros(); 4],
            has_nose: false,
        }
    }
}

/// Global bone transforms and blendshape drivers for one frame.
#[derive(Debug, Clone)]
pub struct FramePose {
    pub rot: Vec<Mat3>,
    pub trans: Vec<Vec3>,
    pub pose_features: Vec<f64>,
    pub psi: Vec<f64>,
}

/// Per-Gaussian network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformOutput {
    /// `n_expr x 3`
    pub expr: Vec<f64>,
    /// `n_pose_features x 3`
    pub pose: Vec<f64>,
    /// Skinning weights on the simplex.
    pub weights: Vec<f64>,
}

/// Gradient with respect to [`DeformOutput`] (weights are post-softmax).
#[derive(Debug, Clone, PartialEq)]
pub struct DeformGrad {
    pub expr: Vec<f64>,
    pub pose: Vec<f64>,
    pub weights: Vec<f64>,
}

impl DeformGrad {
    pub fn zeros(n_expr: usize, n_pose_features: usize, n_joints: usize) -> Self {
        Self {
            expr: vec![0.0; n_expr * 3],
            pose: vec![0.0; n_pose_features * 3],
            weights: vec![0.0; n_joints],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Skin {
    pub rot: Mat3,
    pub trans: Vec3,
    /// Blendshape offset added to the canonical point before skinning.
    pub offset: Vec3,
}

fn axis_angle(v: Vec3) -> Mat3 {
    nalgebra::Rotation3::from_scaled_axis(v).into_inner()
}

impl Rig {
    pub fn n_joints(&self) -> usize {
        self.parents.len()
    }

    /// Number of non-root joints driving pose blendshapes.
    pub fn n_pose_joints(&self) -> usize {
        self.n_joints() - 1
    }

    pub fn n_pose_features(&self) -> usize {
        9 * self.n_pose_joints()
    }

    pub fn validate(&self) -> Result<()> {
        let nj = self.n_joints();
        if nj == 0 || self.parents[0].is_some() {
            return Err(Error::InvalidAsset("joint 0 must be the root".into()));
        }
        for (j, p) in self.parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                _ => return Err(Error::InvalidAsset(format!("joint {j} parent must precede it"))),
            }
        }
        if self.rest_joints.len() != nj || self.joint_regressor.len() != nj * self.n_expr * 3 {
            return Err(Error::InvalidAsset("joint arrays do not match joint count".into()));
        }
        let nv = self.mesh.vertices.len();
        if self.mesh.expr_basis.len() != nv * self.n_expr * 3
            || self.mesh.pose_basis.len() != nv * self.n_pose_features() * 3
            || self.mesh.weights.len() != nv * nj
        {
            return Err(Error::InvalidAsset("mesh attribute sizes do not match".into()));
        }
        if self.conditioning_joints.iter().any(|&j| j >= nj) {
            return Err(Error::InvalidAsset("conditioning joint out of range".into()));
        }
        Ok(())
    }

    /// Joint locations for an expression.
    pub fn joints(&self, psi: &[f64]) -> Vec<Vec3> {
        let ne = self.n_expr;
        self.rest_joints
            .iter()
            .enumerate()
            .map(|(j, rest)| {
                let mut p = *rest;
                for (k, &c) in psi.iter().enumerate().take(ne) {
                    let o = (j * ne + k) * 3;
                    p += c * Vec3::new(
                        self.joint_regressor[o],
                        self.joint_regressor[o + 1],
                        self.joint_regressor[o + 2],
                    );
                }
                p
            })
            .collect()
    }

    pub fn pose(&self, theta: &[f64], psi: &[f64]) -> FramePose {
        let nj = self.n_joints();
        let joints = self.joints(psi);
        let mut rot = vec![Mat3::identity(); nj];
        let mut trans = vec![Vec3::zeros(); nj];
        let mut pose_features = Vec::with_capacity(self.n_pose_features());
        for j in 1..nj {
            let local = axis_angle(Vec3::new(theta[3 * j], theta[3 * j + 1], theta[3 * j + 2]));
            let local_t = joints[j] - local * joints[j];
            let p = self.parents[j].expect("non-root joint has a parent");
            rot[j] = rot[p] * local;
            trans[j] = rot[p] * local_t + trans[p];
            let d = local - Mat3::identity();
            for r in 0..3 {
                for c in 0..3 {
                    pose_features.push(d[(r, c)]);
                }
            }
        }
        FramePose {
            rot,
            trans,
            pose_features,
            psi: psi.to_vec(),
        }
    }

    pub fn frame_pose(&self, frame: &FrameParams) -> FramePose {
        self.pose(&frame.theta, &frame.psi)
    }

    /// Procedural four-bone rig (static root, neck, head, jaw) with eight
    /// expression blendshapes. The reference mesh is a head ellipsoid over a
    /// neck and a collar plane.
    pub fn toy() -> Rig {
        const N_EXPR: usize = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(0x7019);
        let head_c = Vec3::new(0.0, -0.32, 0.0);
        let head_r = Vec3::new(0.26, 0.33, 0.27);
        let rest_joints = vec![
            Vec3::zeros(),
            Vec3::new(0.0, 0.12, 0.02),
            Vec3::new(0.0, -0.05, 0.0),
            Vec3::new(0.0, -0.22, -0.02),
        ];
        let mut joint_regressor = vec![0.0; 4 * N_EXPR * 3];
        for k in 0..N_EXPR {
            // expressions nudge the jaw joint only
            let o = (3 * N_EXPR + k) * 3;
            joint_regressor[o + 1] = 0.004 * (k as f64 * 0.9).cos();
            joint_regressor[o + 2] = -0.003 * (k as f64 * 1.3).sin();
        }

        let mut vertices = Vec::new();
        let mut weights = Vec::new();
        let mut face = Vec::new();
        let n_head = 600;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        for i in 0..n_head {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n_head as f64;
            let r = (1.0 - y * y).sqrt();
            let a = golden * i as f64;
            let unit = Vec3::new(r * a.cos(), y, r * a.sin());
            let v = head_c + unit.component_mul(&head_r);
            vertices.push(v);
            // lower front of the head follows the jaw
            let jaw = smooth_step(-0.28, -0.12, v.y) * smooth_step(0.05, -0.15, v.z);
            let neck = smooth_step(-0.1, 0.02, v.y) * (1.0 - jaw);
            weights.extend_from_slice(&[0.0, neck, 1.0 - jaw - neck, jaw]);
            face.push(smooth_step(0.1, -0.2, v.z));
        }
        let n_neck = 120;
        for i in 0..n_neck {
            let a = golden * i as f64;
            let y = -0.06 + 0.2 * (i as f64 + 0.5) / n_neck as f64;
            vertices.push(Vec3::new(0.12 * a.cos(), y, 0.12 * a.sin()));
            let down = smooth_step(0.06, 0.14, y);
            weights.extend_from_slice(&[down, 1.0 - down, 0.0, 0.0]);
            face.push(0.0);
        }
        // collar and shoulders: a coarse grid on a plane behind the head
        for iy in 0..14 {
            for ix in 0..24 {
                let x = -1.15 + 2.3 * ix as f64 / 23.0;
                let y = 0.02 + 1.2 * iy as f64 / 13.0;
                if x.abs() < 0.16 && y < 0.16 {
                    continue;
                }
                vertices.push(Vec3::new(x, y, 0.35 + 0.1 * y));
                weights.extend_from_slice(&[1.0, 0.0, 0.0, 0.0]);
                face.push(0.0);
            }
        }

        let nv = vertices.len();
        let mut expr_basis = vec![0.0; nv * N_EXPR * 3];
        let freqs: Vec<Vec3> = (0..N_EXPR)
            .map(|_| Vec3::new(rng.random_range(2.0..8.0), rng.random_range(2.0..8.0), rng.random_range(2.0..8.0)))
            .collect();
        for (vi, v) in vertices.iter().enumerate() {
            for (k, f) in freqs.iter().enumerate() {
                for c in 0..3 {
                    let phase = f[c] * v[(c + 1) % 3] + k as f64;
                    expr_basis[(vi * N_EXPR + k) * 3 + c] = 0.012 * face[vi] * phase.sin();
                }
            }
        }
        let npf = 27;
        let mut pose_basis = vec![0.0; nv * npf * 3];
        let pose_dirs: Vec<f64> = (0..npf * 3).map(|_| rng.random_range(-0.02..0.02)).collect();
        for vi in 0..nv {
            let w = &weights[vi * 4..vi * 4 + 4];
            let soft = w[1] * (1.0 - w[1]) * 4.0 + face[vi] * 0.5;
            for j in 0..npf * 3 {
                pose_basis[vi * npf * 3 + j] = soft * pose_dirs[j];
            }
        }
        Rig {
            parents: vec![None, Some(0), Some(1), Some(2)],
            rest_joints,
            n_expr: N_EXPR,
            joint_regressor,
            conditioning_joints: vec![1, 2],
            mesh: ReferenceMesh {
                vertices,
                expr_basis,
                pose_basis,
                weights,
            },
        }
    }
}

fn smooth_step(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Skinning transform for one point: blended bone rotation `R` and
/// translation `T` such that the deformed point is `R * mu + T`.
pub fn skin(pose: &FramePose, d: &DeformOutput) -> Skin {
    let mut offset = Vec3::zeros();
    for (k, &c) in pose.psi.iter().enumerate() {
        offset += c * Vec3::new(d.expr[3 * k], d.expr[3 * k + 1], d.expr[3 * k + 2]);
    }
    for (f, &c) in pose.pose_features.iter().enumerate() {
        offset += c * Vec3::new(d.pose[3 * f], d.pose[3 * f + 1], d.pose[3 * f + 2]);
    }
    let mut rot = Mat3::zeros();
    let mut t = Vec3::zeros();
    for (j, &w) in d.weights.iter().enumerate() {
        rot += w * pose.rot[j];
        t += w * pose.trans[j];
    }
    Skin {
        rot,
        trans: rot * offset + t,
        offset,
    }
}

pub fn lbs_transform(rig: &Rig, frame: &FrameParams, d: &DeformOutput) -> (Mat3, Vec3) {
    let s = skin(&rig.frame_pose(frame), d);
    (s.rot, s.trans)
}

/// Backward of [`skin`]; accumulates into `grad`.
pub fn skin_vjp(pose: &FramePose, s: &Skin, d_rot: &Mat3, d_trans: &Vec3, grad: &mut DeformGrad) {
    let d_blend_rot = d_rot + d_trans * s.offset.transpose();
    let d_offset = s.rot.transpose() * d_trans;
    for (j, g) in grad.weights.iter_mut().enumerate() {
        *g += frob(&d_blend_rot, &pose.rot[j]) + d_trans.dot(&pose.trans[j]);
    }
    for (k, &c) in pose.psi.iter().enumerate() {
        for a in 0..3 {
            grad.expr[3 * k + a] += c * d_offset[a];
        }
    }
    for (f, &c) in pose.pose_features.iter().enumerate() {
        for a in 0..3 {
            grad.pose[3 * f + a] += c * d_offset[a];
        }
    }
}

/// Backward of `mu' = R mu + T`, `cov' = R cov R^T`. Returns gradients for
/// `(R, T, mu, cov)`.
pub fn deform_point_vjp(
    rot: &Mat3,
    mu: &Vec3,
    cov: &Mat3,
    d_mu_d: &Vec3,
    d_cov_d: &Mat3,
) -> (Mat3, Vec3, Vec3, Mat3) {
    let d_rot = d_mu_d * mu.transpose() + (d_cov_d + d_cov_d.transpose()) * rot * cov;
    let d_mu = rot.transpose() * d_mu_d;
    let d_cov = rot.transpose() * d_cov_d * rot;
    (d_rot, *d_mu_d, d_mu, d_cov)
}

/// Network predicting expression/pose blendshapes and skinning weights from
/// a canonical position.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformNet {
    pub mlp: Mlp,
    pub n_expr: usize,
    pub n_pose_features: usize,
    pub n_joints: usize,
}

impl DeformNet {
    pub fn new(rig: &Rig, width: usize, hidden_layers: usize, rng: &mut impl Rng) -> Self {
        let n_expr = rig.n_expr;
        let npf = rig.n_pose_features();
        let nj = rig.n_joints();
        Self {
            mlp: Mlp::new(3, width, hidden_layers, 3 * n_expr + 3 * npf + nj, Activation::Identity, rng),
            n_expr,
            n_pose_features: npf,
            n_joints: nj,
        }
    }

    pub fn output_dim(&self) -> usize {
        3 * self.n_expr + 3 * self.n_pose_features + self.n_joints
    }

    fn split(&self, row: &[f64]) -> DeformOutput {
        let ne = 3 * self.n_expr;
        let np = 3 * self.n_pose_features;
        let logits = &row[ne + np..];
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = ex.iter().sum();
        DeformOutput {
            expr: row[..ne].to_vec(),
            pose: row[ne..ne + np].to_vec(),
            weights: ex.iter().map(|e| e / s).collect(),
        }
    }

    pub fn eval(&self, mu: &Vec3) -> DeformOutput {
        self.split(&self.mlp.forward_one(mu.as_slice()))
    }

    /// Batched evaluation; the cache feeds [`DeformNet::backward`].
    pub fn eval_batch(&self, mus: &[Vec3]) -> (Vec<DeformOutput>, MlpCache) {
        let x = Array2::from_shape_fn((mus.len(), 3), |(i, c)| mus[i][c]);
        let cache = self.mlp.forward(x.view(), &[]);
        let outs = cache
            .output
            .outer_iter()
            .map(|r| self.split(r.as_slice().expect("contiguous row")))
            .collect();
        (outs, cache)
    }

    /// Backpropagates output gradients (post-softmax weights) through the
    /// network. Returns the gradient with respect to each input position.
    pub fn backward(
        &self,
        cache: &MlpCache,
        outs: &[DeformOutput],
        grads: &[DeformGrad],
        param_grads: &mut MlpGrads,
    ) -> Vec<Vec3> {
        let ne = 3 * self.n_expr;
        let np = 3 * self.n_pose_features;
        let mut d_out = Array2::<f64>::zeros((outs.len(), self.output_dim()));
        for (i, (o, g)) in outs.iter().zip(grads).enumerate() {
            let mut row = d_out.row_mut(i);
            for (a, v) in g.expr.iter().enumerate() {
                row[a] = *v;
            }
            for (a, v) in g.pose.iter().enumerate() {
                row[ne + a] = *v;
            }
            let dot: f64 = o.weights.iter().zip(&g.weights).map(|(w, d)| w * d).sum();
            for (j, (w, d)) in o.weights.iter().zip(&g.weights).enumerate() {
                row[ne + np + j] = w * (d - dot);
            }
        }
        let (dx, _) = self.mlp.backward(cache, ArrayView2::from(&d_out), param_grads, true);
        let dx = dx.expect("input gradient requested");
        dx.outer_iter().map(|r| Vec3::new(r[0], r[1], r[2])).collect()
    }
}

/// Applies network blendshapes and skinning to every Gaussian. The result is
/// in world space with opacity and colour untouched.
pub fn deform_gaussians(set: &GaussianSet, rig: &Rig, frame: &FrameParams, net: &DeformNet) -> Result<GaussianSet> {
    let pose = rig.frame_pose(frame);
    let mus: Vec<Vec3> = set.gaussians.iter().map(|g| g.mu).collect();
    let (outs, _) = net.eval_batch(&mus);
    let gaussians = set
        .gaussians
        .iter()
        .zip(&outs)
        .map(|(g, d)| {
            let s = skin(&pose, d);
            deform_one(g, &s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GaussianSet {
        sh_degree: set.sh_degree,
        gaussians,
    })
}

fn deform_one(g: &Gaussian3D, s: &Skin) -> Result<Gaussian3D> {
    // The blended rotation need not be orthonormal, so the covariance is
    // re-expressed through its eigen decomposition.
    let cov = s.rot * g.covariance()? * s.rot.transpose();
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut q = eig.eigenvectors;
    if q.determinant() < 0.0 {
        q.column_mut(2).neg_mut();
    }
    let uq = nalgebra::UnitQuaternion::from_matrix(&q);
    Ok(Gaussian3D {
        mu: s.rot * g.mu + s.trans,
        scale: eig.eigenvalues.map(|e| e.max(1e-20).sqrt()),
        quat: crate::coremath::Quat::new(uq.w, uq.i, uq.j, uq.k),
        opacity: g.opacity,
        sh: g.sh.clone(),
    })
}

/// Attributes copied from the nearest reference vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoGt {
    pub vertex: usize,
    pub expr: Vec<f64>,
    pub pose: Vec<f64>,
    pub weights: Vec<f64>,
}

pub fn pseudo_gt_lookup(rig: &Rig, mu: &Vec3) -> Result<PseudoGt> {
    let mesh = &rig.mesh;
    let mut best = None;
    let mut best_d = f64::INFINITY;
    for (i, v) in mesh.vertices.iter().enumerate() {
        let d = (v - mu).norm_squared();
        if d < best_d {
            best_d = d;
            best = Some(i);
        }
    }
    let i = best.ok_or_else(|| Error::InvalidAsset("reference mesh has no vertices".into()))?;
    let ne = rig.n_expr * 3;
    let np = rig.n_pose_features() * 3;
    let nj = rig.n_joints();
    Ok(PseudoGt {
        vertex: i,
        expr: mesh.expr_basis[i * ne..(i + 1) * ne].to_vec(),
        pose: mesh.pose_basis[i * np..(i + 1) * np].to_vec(),
        weights: mesh.weights[i * nj..(i + 1) * nj].to_vec(),
    })
}

/// Deforms a reference vertex with its own attributes.
pub fn deform_vertex(rig: &Rig, pose: &FramePose, vertex: usize) -> Vec3 {
    let gt = vertex_attributes(rig, vertex);
    let s = skin(pose, &gt);
    s.rot * rig.mesh.vertices[vertex] + s.trans
}

pub fn vertex_attributes(rig: &Rig, vertex: usize) -> DeformOutput {
    let ne = rig.n_expr * 3;
    let np = rig.n_pose_features() * 3;
    let nj = rig.n_joints();
    let m = &rig.mesh;
    DeformOutput {
        expr: m.expr_basis[vertex * ne..(vertex + 1) * ne].to_vec(),
        pose: m.pose_basis[vertex * np..(vertex + 1) * np].to_vec(),
        weights: m.weights[vertex * nj..(vertex + 1) * nj].to_vec(),
    }
}
