//! Planar homography fitting by the normalized direct linear transform.

use nalgebra::DMatrix;

use super::{Mat3, Vec2};
use crate::error::{Error, Result};

/// Similarity that moves the centroid to the origin and scales the mean
/// distance to sqrt(2).
fn hartley(points: &[Vec2]) -> Result<(Vec<Vec2>, Mat3)> {
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vec2::zeros(), |a, p| a + p) / n;
    let mean_dist = points.iter().map(|p| (p - centroid).norm()).sum::<f64>() / n;
    if !(mean_dist > 1e-12) || !mean_dist.is_finite() {
        return Err(Error::DegenerateConfiguration(
            "points are coincident".into(),
        ));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    let t = Mat3::new(s, 0.0, -s * centroid.x, 0.0, s, -s * centroid.y, 0.0, 0.0, 1.0);
    let out = points.iter().map(|p| (p - centroid) * s).collect();
    Ok((out, t))
}

/// Scales `h` so that `h[(2,2)] == 1`, or to unit Frobenius norm when that
/// entry vanishes.
pub fn normalize_homography(h: &Mat3) -> Mat3 {
    let f = h.norm();
    if f == 0.0 {
        return *h;
    }
    let h33 = h[(2, 2)];
    if h33.abs() > 1e-12 * f {
        h / h33
    } else {
        h / f
    }
}

/// Least-squares homography `dst ~ H src` from at least four correspondences.
pub fn svd_least_squares_homography(src: &[Vec2], dst: &[Vec2]) -> Result<Mat3> {
    let n = src.len();
    if n != dst.len() {
        return Err(Error::Shape(format!(
            "{} source points but {} destination points",
            n,
            dst.len()
        )));
    }
    if n < 4 {
        return Err(Error::DegenerateConfiguration(format!(
            "need at least 4 correspondences, got {n}"
        )));
    }
    let (sn, ts) = hartley(src)?;
    let (dn, td) = hartley(dst)?;

    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (p, q)) in sn.iter().zip(&dn).enumerate() {
        let (x, y, u, v) = (p.x, p.y, q.x, q.y);
        let r = 2 * i;
        a[(r, 0)] = -x;
        a[(r, 1)] = -y;
        a[(r, 2)] = -1.0;
        a[(r, 6)] = u * x;
        a[(r, 7)] = u * y;
        a[(r, 8)] = u;
        a[(r + 1, 3)] = -x;
        a[(r + 1, 4)] = -y;
        a[(r + 1, 5)] = -1.0;
        a[(r + 1, 6)] = v * x;
        a[(r + 1, 7)] = v * y;
        a[(r + 1, 8)] = v;
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::DegenerateConfiguration("SVD did not converge".into()))?;
    // nalgebra does not sort singular values; pick the smallest explicitly.
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[i].total_cmp(&sv[j]));
    let smallest = order[0];
    let second = order[1];
    let largest = order[sv.len() - 1];
    if sv[second] <= 1e-10 * sv[largest] {
        return Err(Error::DegenerateConfiguration(
            "design matrix is rank deficient".into(),
        ));
    }
    let h = v_t.row(smallest);
    let hn = Mat3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| Error::DegenerateConfiguration("normalization not invertible".into()))?;
    let out = normalize_homography(&(td_inv * hn * ts));
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::DegenerateConfiguration("non-finite homography".into()));
    }
    Ok(out)
}

/// Maps `p` through `h`; `None` when the point lands at infinity.
pub fn apply_homography(h: &Mat3, p: Vec2) -> Option<Vec2> {
    let w = h[(2, 0)] * p.x + h[(2, 1)] * p.y + h[(2, 2)];
    if w.abs() < 1e-12 {
        return None;
    }
    Some(Vec2::new(
        (h[(0, 0)] * p.x + h[(0, 1)] * p.y + h[(0, 2)]) / w,
        (h[(1, 0)] * p.x + h[(1, 1)] * p.y + h[(1, 2)]) / w,
    ))
}

/// Ratio of the singular values of the upper-left 2x2 block of `h`.
pub fn homography_anisotropy(h: &Mat3) -> f64 {
    let h = normalize_homography(h);
    let m = nalgebra::Matrix2::new(h[(0, 0)], h[(0, 1)], h[(1, 0)], h[(1, 1)]);
    let s = m.singular_values();
    let (hi, lo) = (s[0].max(s[1]), s[0].min(s[1]));
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}
