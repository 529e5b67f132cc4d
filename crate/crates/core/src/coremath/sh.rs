//! Real spherical harmonics up to degree 3 in the layout used by Gaussian
//! splatting: coefficient `k` of channel `c` lives at `sh[3 * k + c]`.

use super::Vec3;
use crate::error::{Error, Result};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Number of coefficients per channel for a given degree.
pub const fn num_sh_coeffs(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

fn degree_of_len(len: usize) -> Result<usize> {
    (0..=3)
        .find(|&d| 3 * num_sh_coeffs(d) == len)
        .ok_or_else(|| Error::Shape(format!("{len} SH values is not 3*(d+1)^2 for d <= 3")))
}

/// Basis values `Y_k(dir)` for `k < (degree+1)^2`, plus their partial
/// derivatives with respect to the (x, y, z) components of `dir`.
pub fn sh_basis(degree: usize, dir: &Vec3, values: &mut [f64], grads: Option<&mut [Vec3]>) {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let n = num_sh_coeffs(degree);
    let mut v = [0.0; 16];
    let mut g = [Vec3::zeros(); 16];
    v[0] = SH_C0;
    if degree >= 1 {
        v[1] = -SH_C1 * y;
        v[2] = SH_C1 * z;
        v[3] = -SH_C1 * x;
        g[1] = Vec3::new(0.0, -SH_C1, 0.0);
        g[2] = Vec3::new(0.0, 0.0, SH_C1);
        g[3] = Vec3::new(-SH_C1, 0.0, 0.0);
    }
    if degree >= 2 {
        let c = SH_C2;
        v[4] = c[0] * x * y;
        v[5] = c[1] * y * z;
        v[6] = c[2] * (2.0 * zz - xx - yy);
        v[7] = c[3] * x * z;
        v[8] = c[4] * (xx - yy);
        g[4] = Vec3::new(c[0] * y, c[0] * x, 0.0);
        g[5] = Vec3::new(0.0, c[1] * z, c[1] * y);
        g[6] = Vec3::new(-2.0 * c[2] * x, -2.0 * c[2] * y, 4.0 * c[2] * z);
        g[7] = Vec3::new(c[3] * z, 0.0, c[3] * x);
        g[8] = Vec3::new(2.0 * c[4] * x, -2.0 * c[4] * y, 0.0);
    }
    if degree >= 3 {
        let c = SH_C3;
        v[9] = c[0] * y * (3.0 * xx - yy);
        v[10] = c[1] * x * y * z;
        v[11] = c[2] * y * (4.0 * zz - xx - yy);
        v[12] = c[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
        v[13] = c[4] * x * (4.0 * zz - xx - yy);
        v[14] = c[5] * z * (xx - yy);
        v[15] = c[6] * x * (xx - 3.0 * yy);
        g[9] = Vec3::new(6.0 * c[0] * x * y, c[0] * (3.0 * xx - 3.0 * yy), 0.0);
        g[10] = Vec3::new(c[1] * y * z, c[1] * x * z, c[1] * x * y);
        g[11] = Vec3::new(
            -2.0 * c[2] * x * y,
            c[2] * (4.0 * zz - xx - 3.0 * yy),
            8.0 * c[2] * y * z,
        );
        g[12] = Vec3::new(
            -6.0 * c[3] * x * z,
            -6.0 * c[3] * y * z,
            c[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
        );
        g[13] = Vec3::new(
            c[4] * (4.0 * zz - 3.0 * xx - yy),
            -2.0 * c[4] * x * y,
            8.0 * c[4] * x * z,
        );
        g[14] = Vec3::new(2.0 * c[5] * x * z, -2.0 * c[5] * y * z, c[5] * (xx - yy));
        g[15] = Vec3::new(c[6] * (3.0 * xx - 3.0 * yy), -6.0 * c[6] * x * y, 0.0);
    }
    values[..n].copy_from_slice(&v[..n]);
    if let Some(out) = grads {
        out[..n].copy_from_slice(&g[..n]);
    }
}

/// Result of an SH colour evaluation, kept for the backward pass.
#[derive(Debug, Clone, Copy)]
pub struct ShEval {
    pub rgb: Vec3,
    /// Channel was clamped at zero (no gradient flows through it).
    pub clamped: [bool; 3],
}

fn eval(sh: &[f64], degree: usize, dir: &Vec3) -> ShEval {
    let n = num_sh_coeffs(degree);
    let mut basis = [0.0; 16];
    sh_basis(degree, dir, &mut basis, None);
    let mut raw = [0.5; 3];
    for k in 0..n {
        for (c, r) in raw.iter_mut().enumerate() {
            *r += basis[k] * sh[3 * k + c];
        }
    }
    ShEval {
        rgb: Vec3::new(raw[0].max(0.0), raw[1].max(0.0), raw[2].max(0.0)),
        clamped: [raw[0] < 0.0, raw[1] < 0.0, raw[2] < 0.0],
    }
}

/// RGB colour `0.5 + sum_k sh_k Y_k(dir)`, clamped to be non-negative.
pub fn sh_to_rgb(sh: &[f64], dir: &Vec3) -> Result<Vec3> {
    Ok(sh_eval(sh, dir)?.rgb)
}

pub fn sh_eval(sh: &[f64], dir: &Vec3) -> Result<ShEval> {
    let degree = degree_of_len(sh.len())?;
    Ok(eval(sh, degree, dir))
}

/// Backward of [`sh_to_rgb`]: accumulates into `d_sh` and returns the gradient
/// with respect to `dir` as passed (no normalization is differentiated).
pub fn sh_to_rgb_vjp(sh: &[f64], dir: &Vec3, eval: &ShEval, d_rgb: &Vec3, d_sh: &mut [f64]) -> Vec3 {
    let degree = match degree_of_len(sh.len()) {
        Ok(d) => d,
        Err(_) => return Vec3::zeros(),
    };
    let n = num_sh_coeffs(degree);
    let mut basis = [0.0; 16];
    let mut grads = [Vec3::zeros(); 16];
    sh_basis(degree, dir, &mut basis, Some(&mut grads));
    let g = [
        if eval.clamped[0] { 0.0 } else { d_rgb.x },
        if eval.clamped[1] { 0.0 } else { d_rgb.y },
        if eval.clamped[2] { 0.0 } else { d_rgb.z },
    ];
    let mut d_dir = Vec3::zeros();
    for k in 0..n {
        let mut s = 0.0;
        for c in 0..3 {
            d_sh[3 * k + c] += basis[k] * g[c];
            s += sh[3 * k + c] * g[c];
        }
        d_dir += grads[k] * s;
    }
    d_dir
}
