//! Gaussian parameterization, covariance construction and EWA projection.

use serde::{Deserialize, Serialize};

use crate::coremath::{
    num_sh_coeffs, quat_to_rot, quat_to_rot_vjp, sh_to_rgb, Mat2, Mat2x3, Mat3, Quat, Vec2, Vec3,
};
use crate::error::{Error, Result};

/// Camera-space depth below which a Gaussian is culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Isotropic dilation added to every projected covariance (px^2).
pub const LOW_PASS: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian3D {
    pub mu: Vec3,
    pub scale: Vec3,
    pub quat: Quat,
    pub opacity: f64,
    pub sh: Vec<f64>,
}

impl Gaussian3D {
    pub fn covariance(&self) -> Result<Mat3> {
        build_covariance(self.scale, self.quat)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianSet {
    pub sh_degree: usize,
    pub gaussians: Vec<Gaussian3D>,
}

impl GaussianSet {
    pub fn new(sh_degree: usize) -> Self {
        Self {
            sh_degree,
            gaussians: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn sh_len(&self) -> usize {
        3 * num_sh_coeffs(self.sh_degree)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, g) in self.gaussians.iter().enumerate() {
            if g.sh.len() != self.sh_len() {
                return Err(Error::Shape(format!("gaussian {i} has {} SH values", g.sh.len())));
            }
            if !(g.scale.min() > 0.0) {
                return Err(Error::InvalidArgument(format!("gaussian {i} has non-positive scale")));
            }
            if !(0.0..=1.0).contains(&g.opacity) {
                return Err(Error::InvalidArgument(format!("gaussian {i} opacity outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// Pinhole camera. `rot` maps world axes to camera axes and `position` is the
/// camera centre in world coordinates, so `p_cam = rot * (p - position)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub rot: Mat3,
    pub position: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Axis-aligned camera looking down +z with the principal point centred.
    pub fn looking_forward(position: Vec3, focal: f64, width: usize, height: usize) -> Self {
        Self {
            rot: Mat3::identity(),
            position,
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) * 0.5,
            cy: (height as f64 - 1.0) * 0.5,
            width,
            height,
        }
    }

    /// Translation part of the world-to-camera transform.
    pub fn translation(&self) -> Vec3 {
        -(self.rot * self.position)
    }

    pub fn world_to_cam(&self, p: &Vec3) -> Vec3 {
        self.rot * (p - self.position)
    }

    pub fn project(&self, p_cam: &Vec3) -> Vec2 {
        Vec2::new(
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        )
    }

    /// Projects a world point, `None` if it lies in front of the near plane.
    pub fn project_world(&self, p: &Vec3) -> Option<Vec2> {
        let c = self.world_to_cam(p);
        (c.z > NEAR_PLANE).then(|| self.project(&c))
    }

    /// Jacobian of [`Camera::project`] at `p_cam`.
    pub fn jacobian(&self, p_cam: &Vec3) -> Mat2x3 {
        let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);
        let iz = 1.0 / z;
        Mat2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * x * iz * iz,
            0.0,
            self.fy * iz,
            -self.fy * y * iz * iz,
        )
    }

    pub fn contains_pixel(&self, p: &Vec2) -> bool {
        p.x >= -0.5
            && p.y >= -0.5
            && p.x < self.width as f64 - 0.5
            && p.y < self.height as f64 - 0.5
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("empty image".into()));
        }
        Ok(())
    }
}

/// A projected Gaussian ready for rasterization.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    pub mu2d: Vec2,
    pub cov2d: Mat2,
    pub depth: f64,
    pub rgb: Vec3,
    pub opacity: f64,
}

/// `R S S^T R^T` for per-axis standard deviations `scale`.
pub fn build_covariance(scale: Vec3, quat: Quat) -> Result<Mat3> {
    if !(scale.min() > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "scale must be positive, got {scale:?}"
        )));
    }
    let r = quat_to_rot(quat)?;
    let m = r * Mat3::from_diagonal(&scale);
    Ok(m * m.transpose())
}

/// Pulls a (full-matrix) covariance gradient back to scale and quaternion.
pub fn build_covariance_vjp(scale: Vec3, quat: Quat, d_cov: &Mat3) -> (Vec3, Quat) {
    let r = match quat_to_rot(quat) {
        Ok(r) => r,
        Err(_) => return (Vec3::zeros(), Quat::new(0.0, 0.0, 0.0, 0.0)),
    };
    let m = r * Mat3::from_diagonal(&scale);
    let d_m = (d_cov + d_cov.transpose()) * m;
    let mut d_r = d_m;
    let mut d_s = Vec3::zeros();
    for j in 0..3 {
        for i in 0..3 {
            d_r[(i, j)] = d_m[(i, j)] * scale[j];
            d_s[j] += d_m[(i, j)] * r[(i, j)];
        }
    }
    (d_s, quat_to_rot_vjp(quat, &d_r))
}

/// Mean and covariance of a camera-space Gaussian on the image plane.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    pub mu2d: Vec2,
    pub cov2d: Mat2,
    pub depth: f64,
}

/// EWA projection of a camera-space mean/covariance, including the low-pass
/// dilation.
pub fn project_mean_cov(mu_cam: &Vec3, cov_cam: &Mat3, cam: &Camera) -> Result<Projection> {
    if !(mu_cam.z > NEAR_PLANE) {
        return Err(Error::CulledBehindCamera { z: mu_cam.z });
    }
    let j = cam.jacobian(mu_cam);
    let cov2d = j * cov_cam * j.transpose() + Mat2::identity() * LOW_PASS;
    Ok(Projection {
        mu2d: cam.project(mu_cam),
        cov2d,
        depth: mu_cam.z,
    })
}

/// Backward of [`project_mean_cov`]; gradients are full-matrix.
pub fn project_mean_cov_vjp(
    mu_cam: &Vec3,
    cov_cam: &Mat3,
    cam: &Camera,
    d_mu2d: &Vec2,
    d_cov2d: &Mat2,
) -> (Vec3, Mat3) {
    let (x, y, z) = (mu_cam.x, mu_cam.y, mu_cam.z);
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    let j = cam.jacobian(mu_cam);
    let d_cov_cam = j.transpose() * d_cov2d * j;
    let d_j = (d_cov2d + d_cov2d.transpose()) * j * cov_cam;
    let mut d_mu = Vec3::new(
        d_mu2d.x * cam.fx * iz,
        d_mu2d.y * cam.fy * iz,
        -(d_mu2d.x * cam.fx * x + d_mu2d.y * cam.fy * y) * iz2,
    );
    // J depends on the mean through x/z^2, y/z^2 and 1/z.
    d_mu.x += d_j[(0, 2)] * (-cam.fx * iz2);
    d_mu.y += d_j[(1, 2)] * (-cam.fy * iz2);
    d_mu.z += d_j[(0, 0)] * (-cam.fx * iz2)
        + d_j[(0, 2)] * (2.0 * cam.fx * x * iz2 * iz)
        + d_j[(1, 1)] * (-cam.fy * iz2)
        + d_j[(1, 2)] * (2.0 * cam.fy * y * iz2 * iz);
    (d_mu, d_cov_cam)
}

/// Projects a Gaussian whose parameters are already expressed in camera
/// space. Colour is evaluated for the ray from the camera origin.
pub fn project_gaussian(g: &Gaussian3D, cam: &Camera) -> Result<Splat2D> {
    let cov = g.covariance()?;
    let p = project_mean_cov(&g.mu, &cov, cam)?;
    let dir = g.mu.normalize();
    Ok(Splat2D {
        mu2d: p.mu2d,
        cov2d: p.cov2d,
        depth: p.depth,
        rgb: sh_to_rgb(&g.sh, &dir)?,
        opacity: g.opacity,
    })
}
