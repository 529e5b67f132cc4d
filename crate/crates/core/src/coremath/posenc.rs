use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Fourier-feature encoding `[sin(2^k pi x), cos(2^k pi x)]_{k < L}` applied
/// to every input element, optionally preceded by the raw value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PosEnc {
    pub num_frequencies: usize,
    pub include_input: bool,
}

impl PosEnc {
    pub const fn new(num_frequencies: usize) -> Self {
        Self {
            num_frequencies,
            include_input: false,
        }
    }

    pub const fn per_element(&self) -> usize {
        2 * self.num_frequencies + if self.include_input { 1 } else { 0 }
    }

    pub const fn output_dim(&self, input_dim: usize) -> usize {
        input_dim * self.per_element()
    }

    pub fn encode_into(&self, x: &[f64], out: &mut [f64]) {
        let per = self.per_element();
        debug_assert_eq!(out.len(), x.len() * per);
        if per == 0 {
            return;
        }
        for (xi, chunk) in x.iter().zip(out.chunks_exact_mut(per)) {
            let mut o = 0;
            if self.include_input {
                chunk[0] = *xi;
                o = 1;
            }
            let mut freq = PI;
            for k in 0..self.num_frequencies {
                let (s, c) = (freq * xi).sin_cos();
                chunk[o + 2 * k] = s;
                chunk[o + 2 * k + 1] = c;
                freq *= 2.0;
            }
        }
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim(x.len())];
        self.encode_into(x, &mut out);
        out
    }

    /// Accumulates `d_out^T d(encode)/dx` into `d_x`.
    pub fn backward(&self, x: &[f64], d_out: &[f64], d_x: &mut [f64]) {
        let per = self.per_element();
        if per == 0 {
            return;
        }
        for ((xi, chunk), dxi) in x.iter().zip(d_out.chunks_exact(per)).zip(d_x.iter_mut()) {
            let mut o = 0;
            if self.include_input {
                *dxi += chunk[0];
                o = 1;
            }
            let mut freq = PI;
            for k in 0..self.num_frequencies {
                let (s, c) = (freq * xi).sin_cos();
                *dxi += freq * (c * chunk[o + 2 * k] - s * chunk[o + 2 * k + 1]);
                freq *= 2.0;
            }
        }
    }
}

/// Encodes `x` with `l` frequencies and no raw passthrough.
pub fn positional_encode(x: &[f64], l: usize) -> Vec<f64> {
    PosEnc::new(l).encode(x)
}
