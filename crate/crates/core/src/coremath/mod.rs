//! Small deterministic numeric kernels shared by the rest of the crate.
//!
//! Fixed-size vectors and matrices are `nalgebra` aliases; everything here is
//! pure and safe to call concurrently on shared inputs.

mod fps;
mod grid;
mod homography;
mod posenc;
mod quat;
mod sh;

pub use fps::farthest_point_sample;
pub use grid::{bilinear_sample, BilinearTaps, Grid};
pub use homography::{
    apply_homography, homography_anisotropy, normalize_homography, svd_least_squares_homography,
};
pub use posenc::{positional_encode, PosEnc};
pub use quat::{quat_to_rot, quat_to_rot_vjp, Quat};
pub use sh::{num_sh_coeffs, sh_basis, sh_eval, sh_to_rgb, sh_to_rgb_vjp, ShEval, SH_C0};

pub type Vec2 = nalgebra::Vector2<f64>;
pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat2 = nalgebra::Matrix2<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
pub type Mat2x3 = nalgebra::Matrix2x3<f64>;

/// Frobenius inner product of two equally sized matrices.
#[inline]
pub fn frob<const R: usize, const C: usize>(
    a: &nalgebra::SMatrix<f64, R, C>,
    b: &nalgebra::SMatrix<f64, R, C>,
) -> f64 {
    a.component_mul(b).sum()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}
