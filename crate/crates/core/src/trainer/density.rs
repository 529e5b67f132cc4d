//! Clone/split/prune control of the head Gaussian count.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::coremath::{quat_to_rot, Vec2, Vec3};
use crate::gaussmodel::{Gaussian3D, GaussianSet};

pub const PRUNE_OPACITY: f64 = 0.005;
pub const SPLIT_COUNT: usize = 2;
pub const SPLIT_SHRINK: f64 = 1.6;
/// Fraction of the scene extent separating "small" from "large".
pub const PERCENT_DENSE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityConfig {
    pub grad_threshold: f64,
    pub scene_extent: f64,
    pub max_gaussians: usize,
}

/// Running mean of image-plane gradient norms per Gaussian.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradStats {
    pub sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl GradStats {
    pub fn new(n: usize) -> Self {
        Self {
            sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    /// Adds one step's gradients, already expressed in the unit used by the
    /// threshold.
    pub fn add(&mut self, grad2d: &[Vec2], visible: &[bool]) {
        for i in 0..self.sum.len() {
            if visible[i] {
                self.sum[i] += grad2d[i].norm();
                self.count[i] += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.sum[i] / self.count[i] as f64
        }
    }
}

/// Result of a density pass: the new set and, for each new Gaussian, the
/// old index whose optimizer state it keeps.
#[derive(Debug, Clone)]
pub struct Densified {
    pub set: GaussianSet,
    pub source: Vec<Option<usize>>,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

pub fn densify_and_prune(set: &GaussianSet, stats: &GradStats, cfg: &DensityConfig, rng: &mut impl Rng) -> Densified {
    let n = set.len();
    let mut candidates: Vec<usize> = (0..n).filter(|&i| stats.mean(i) >= cfg.grad_threshold).collect();
    // highest gradients first when the cap binds
    candidates.sort_by(|&a, &b| stats.mean(b).total_cmp(&stats.mean(a)).then(a.cmp(&b)));
    let large = cfg.scene_extent * PERCENT_DENSE;
    let mut budget = cfg.max_gaussians.saturating_sub(n);
    let mut clone = vec![false; n];
    let mut split = vec![false; n];
    for &i in &candidates {
        let big = set.gaussians[i].scale.max() > large;
        let extra = if big { SPLIT_COUNT - 1 } else { 1 };
        if extra > budget {
            continue;
        }
        budget -= extra;
        if big {
            split[i] = true;
        } else {
            clone[i] = true;
        }
    }

    let mut out = Vec::with_capacity(n + candidates.len());
    let mut source = Vec::with_capacity(n + candidates.len());
    let mut new_rows = Vec::new();
    for (i, g) in set.gaussians.iter().enumerate() {
        if split[i] {
            let rot = quat_to_rot(g.quat).unwrap_or_else(|_| crate::coremath::Mat3::identity());
            for _ in 0..SPLIT_COUNT {
                let z = Vec3::new(
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                );
                let offset = rot * g.scale.component_mul(&z);
                new_rows.push(Gaussian3D {
                    mu: g.mu + offset,
                    scale: g.scale / SPLIT_SHRINK,
                    ..g.clone()
                });
            }
            continue;
        }
        out.push(g.clone());
        source.push(Some(i));
        if clone[i] {
            new_rows.push(g.clone());
        }
    }
    source.extend(std::iter::repeat_n(None, new_rows.len()));
    out.extend(new_rows);

    let before = out.len();
    let mut kept = Vec::with_capacity(before);
    let mut kept_source = Vec::with_capacity(before);
    for (g, s) in out.into_iter().zip(source) {
        if g.opacity >= PRUNE_OPACITY {
            kept.push(g);
            kept_source.push(s);
        }
    }
    Densified {
        pruned: before - kept.len(),
        set: GaussianSet {
            sh_degree: set.sh_degree,
            gaussians: kept,
        },
        source: kept_source,
        cloned: clone.iter().filter(|c| **c).count(),
        split: split.iter().filter(|c| **c).count(),
    }
}
