use serde::{Deserialize, Serialize};

use super::Mat3;
use crate::error::{Error, Result};

/// Rotation quaternion, scalar first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quat {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Result<Quat> {
        let n = self.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::InvalidQuaternion);
        }
        Ok(Quat::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    /// Quaternion for a rotation given as axis * angle.
    pub fn from_scaled_axis(v: super::Vec3) -> Quat {
        let angle = v.norm();
        if angle < 1e-300 {
            return Quat::IDENTITY;
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let a = v / angle;
        Quat::new(c, a.x * s, a.y * s, a.z * s)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Quat::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_rotation(&self) -> Result<Mat3> {
        quat_to_rot(*self)
    }
}

fn unit_to_rot(q: &Quat) -> Mat3 {
    let Quat { w, x, y, z } = *q;
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Rotation matrix of `q`; the quaternion is normalized first.
pub fn quat_to_rot(q: Quat) -> Result<Mat3> {
    Ok(unit_to_rot(&q.normalized()?))
}

/// Pulls a gradient on the rotation matrix back to the raw (unnormalized)
/// quaternion components.
pub fn quat_to_rot_vjp(q: Quat, d_rot: &Mat3) -> Quat {
    let n = q.norm();
    if !(n > 0.0) {
        return Quat::new(0.0, 0.0, 0.0, 0.0);
    }
    let Quat { w, x, y, z } = Quat::new(q.w / n, q.x / n, q.y / n, q.z / n);
    let g = d_rot;
    let gw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let dot = w * gw + x * gx + y * gy + z * gz;
    Quat::new(
        (gw - w * dot) / n,
        (gx - x * dot) / n,
        (gy - y * dot) / n,
        (gz - z * dot) / n,
    )
}
