use super::Vec3;
use crate::error::{Error, Result};

/// Greedy farthest point sampling starting at `seed_index`.
///
/// Each subsequent pick maximizes the distance to the closest point already
/// selected; ties go to the lowest index.
pub fn farthest_point_sample(points: &[Vec3], k: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if k > n {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {k} points from {n}"
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    if seed_index >= n {
        return Err(Error::InvalidArgument(format!(
            "seed index {seed_index} out of range for {n} points"
        )));
    }
    let mut selected = Vec::with_capacity(k);
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut current = seed_index;
    for _ in 0..k {
        selected.push(current);
        taken[current] = true;
        let p = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, q) in points.iter().enumerate() {
            let d = (q - p).norm_squared();
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            if !taken[i] && min_d2[i] > best_d {
                best_d = min_d2[i];
                best = i;
            }
        }
        if best == usize::MAX {
            break;
        }
        current = best;
    }
    Ok(selected)
}
