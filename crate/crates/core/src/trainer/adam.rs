use serde::{Deserialize, Serialize};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Adam moments for one flat parameter tensor.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step_with(params, grad, |_| lr);
    }

    /// Like [`AdamState::step`] with a per-element learning rate.
    pub fn step_with(&mut self, params: &mut [f64], grad: &[f64], lr: impl Fn(usize) -> f64) {
        assert_eq!(params.len(), grad.len(), "parameter/gradient length");
        if self.m.len() != params.len() {
            self.m.resize(params.len(), 0.0);
            self.v.resize(params.len(), 0.0);
        }
        self.t += 1;
        let b1 = 1.0 - BETA1.powi(self.t as i32);
        let b2 = 1.0 - BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let mh = self.m[i] / b1;
            let vh = self.v[i] / b2;
            params[i] -= lr(i) * mh / (vh.sqrt() + EPS);
        }
    }

    /// Rebuilds row-structured state after rows were added or removed.
    /// `source[i]` names the old row that new row `i` inherits, or `None`
    /// for fresh zero moments.
    pub fn remap_rows(&mut self, source: &[Option<usize>], row_len: usize) {
        let mut m = vec![0.0; source.len() * row_len];
        let mut v = vec![0.0; source.len() * row_len];
        for (i, s) in source.iter().enumerate() {
            if let Some(j) = s {
                if (j + 1) * row_len <= self.m.len() {
                    m[i * row_len..(i + 1) * row_len].copy_from_slice(&self.m[j * row_len..(j + 1) * row_len]);
                    v[i * row_len..(i + 1) * row_len].copy_from_slice(&self.v[j * row_len..(j + 1) * row_len]);
                }
            }
        }
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = AdamState::new(3);
        let mut p = vec![1.0, 2.0, 3.0];
        s.step(&mut p, &[0.5, -2.0, 0.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((p[1] - 2.1).abs() < 1e-7);
        assert_eq!(p[2], 3.0);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut s = AdamState::new(2);
        let mut p = vec![3.0, -4.0];
        for _ in 0..3000 {
            let g = [2.0 * (p[0] - 1.0), 2.0 * (p[1] + 0.5)];
            s.step(&mut p, &g, 0.01);
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3, "{p:?}");
    }

    #[test]
    fn remap_keeps_and_zeroes() {
        let mut s = AdamState {
            m: vec![1.0, 2.0, 3.0, 4.0],
            v: vec![5.0, 6.0, 7.0, 8.0],
            t: 4,
        };
        s.remap_rows(&[Some(1), None, Some(0)], 2);
        assert_eq!(s.m, vec![3.0, 4.0, 0.0, 0.0, 1.0, 2.0]);
        assert_eq!(s.v, vec![7.0, 8.0, 0.0, 0.0, 5.0, 6.0]);
        assert_eq!(s.t, 4);
    }
}
