//! Fully connected ReLU networks with a hand-written backward pass.
//!
//! Inputs are processed in batches (one row per query). The first layer
//! may split its input into a per-row block followed by a block shared by
//! every row of the batch, so per-frame conditioning is multiplied once.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `in x out`, so a batch is transformed as `x . weight + bias`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub output_activation: Activation,
    queries: AtomicU64,
}

impl Clone for Mlp {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            output_activation: self.output_activation,
            queries: AtomicU64::new(0),
        }
    }
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.output_activation == other.output_activation
    }
}

/// Activations retained by a forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input of each dense layer; entry 0 is the per-row input block.
    inputs: Vec<Array2<f64>>,
    shared: Vec<f64>,
    pub output: Array2<f64>,
}

/// Gradient buffers shaped like the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Dense>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Dense {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        tensors(&self.layers)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        tensors_mut(&mut self.layers)
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn add(&mut self, other: &MlpGrads) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

fn tensors(layers: &[Dense]) -> Vec<&[f64]> {
    let mut out = Vec::with_capacity(layers.len() * 2);
    for l in layers {
        out.push(l.weight.as_slice().expect("standard layout"));
        out.push(l.bias.as_slice().expect("standard layout"));
    }
    out
}

fn tensors_mut(layers: &mut [Dense]) -> Vec<&mut [f64]> {
    let mut out = Vec::with_capacity(layers.len() * 2);
    for l in layers {
        out.push(l.weight.as_slice_mut().expect("standard layout"));
        out.push(l.bias.as_slice_mut().expect("standard layout"));
    }
    out
}

impl Mlp {
    /// `hidden_layers` ReLU layers of `width` units. Hidden layers use a
    /// uniform `+-1/sqrt(fan_in)` initialization; the output layer starts at
    /// zero so a fresh network predicts zeros.
    pub fn new(
        input_dim: usize,
        width: usize,
        hidden_layers: usize,
        output_dim: usize,
        output_activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let mut dims = vec![input_dim];
        dims.extend(std::iter::repeat_n(width, hidden_layers));
        dims.push(output_dim);
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fi, fo) = (dims[i], dims[i + 1]);
                if i + 1 == n {
                    Dense {
                        weight: Array2::zeros((fi, fo)),
                        bias: Array1::zeros(fo),
                    }
                } else {
                    let bound = 1.0 / (fi.max(1) as f64).sqrt();
                    Dense {
                        weight: Array2::from_shape_fn((fi, fo), |_| rng.random_range(-bound..bound)),
                        bias: Array1::from_shape_fn(fo, |_| rng.random_range(-bound..bound)),
                    }
                }
            })
            .collect();
        Self {
            layers,
            output_activation,
            queries: AtomicU64::new(0),
        }
    }

    pub fn from_layers(layers: Vec<Dense>, output_activation: Activation) -> Self {
        Self {
            layers,
            output_activation,
            queries: AtomicU64::new(0),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.weight.ncols()).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Total number of rows evaluated by this network so far.
    pub fn query_count(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        tensors(&self.layers)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        tensors_mut(&mut self.layers)
    }

    pub fn forward_one(&self, x: &[f64]) -> Vec<f64> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        self.forward(view, &[]).output.row(0).to_vec()
    }

    /// Evaluates a batch. `x` holds the per-row leading input columns and
    /// `shared` the trailing columns common to every row.
    pub fn forward(&self, x: ArrayView2<f64>, shared: &[f64]) -> MlpCache {
        let rows = x.nrows();
        let k = x.ncols();
        assert_eq!(
            k + shared.len(),
            self.input_dim(),
            "input width does not match the network"
        );
        self.queries.fetch_add(rows as u64, Ordering::Relaxed);
        let mut inputs = Vec::with_capacity(self.layers.len());
        inputs.push(x.to_owned());
        let last = self.layers.len() - 1;
        let mut out = Array2::<f64>::zeros((0, 0));
        for (li, layer) in self.layers.iter().enumerate() {
            let input = inputs.last().expect("layer input");
            let mut z = Array2::<f64>::zeros((rows, layer.weight.ncols()));
            let mut bias = layer.bias.clone();
            if li == 0 {
                if !shared.is_empty() {
                    let ws = layer.weight.slice(s![k.., ..]);
                    for (srow, sv) in ws.outer_iter().zip(shared) {
                        bias.scaled_add(*sv, &srow);
                    }
                }
                general_mat_mul(1.0, input, &layer.weight.slice(s![..k, ..]), 0.0, &mut z);
            } else {
                general_mat_mul(1.0, input, &layer.weight, 0.0, &mut z);
            }
            z += &bias;
            if li == last {
                if self.output_activation == Activation::Tanh {
                    z.mapv_inplace(f64::tanh);
                }
                out = z;
            } else {
                z.mapv_inplace(|v| v.max(0.0));
                inputs.push(z);
            }
        }
        MlpCache {
            inputs,
            shared: shared.to_vec(),
            output: out,
        }
    }

    /// Backward pass for `d_out` (same shape as the cached output).
    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the per-row input block (if requested) and the shared
    /// block.
    pub fn backward(
        &self,
        cache: &MlpCache,
        d_out: ArrayView2<f64>,
        grads: &mut MlpGrads,
        want_input_grad: bool,
    ) -> (Option<Array2<f64>>, Vec<f64>) {
        let mut dz = d_out.to_owned();
        if self.output_activation == Activation::Tanh {
            dz.zip_mut_with(&cache.output, |d, y| *d *= 1.0 - y * y);
        }
        let k = cache.inputs[0].ncols();
        let mut d_input = None;
        let mut d_shared = vec![0.0; cache.shared.len()];
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let g = &mut grads.layers[li];
            let input = &cache.inputs[li];
            let col_sum = dz.sum_axis(Axis(0));
            g.bias += &col_sum;
            if li == 0 {
                let mut gw = g.weight.slice_mut(s![..k, ..]);
                general_mat_mul(1.0, &input.t(), &dz, 1.0, &mut gw);
                if !cache.shared.is_empty() {
                    let ws = layer.weight.slice(s![k.., ..]);
                    let mut gws = g.weight.slice_mut(s![k.., ..]);
                    for ((mut grow, wrow), (sv, ds)) in gws
                        .outer_iter_mut()
                        .zip(ws.outer_iter())
                        .zip(cache.shared.iter().zip(d_shared.iter_mut()))
                    {
                        grow.scaled_add(*sv, &col_sum);
                        *ds = wrow.dot(&col_sum);
                    }
                }
                if want_input_grad {
                    let mut dx = Array2::<f64>::zeros((dz.nrows(), k));
                    general_mat_mul(1.0, &dz, &layer.weight.slice(s![..k, ..]).t(), 0.0, &mut dx);
                    d_input = Some(dx);
                }
            } else {
                general_mat_mul(1.0, &input.t(), &dz, 1.0, &mut g.weight);
                let mut da = Array2::<f64>::zeros((dz.nrows(), layer.weight.nrows()));
                general_mat_mul(1.0, &dz, &layer.weight.t(), 0.0, &mut da);
                da.zip_mut_with(input, |d, a| {
                    if *a <= 0.0 {
                        *d = 0.0
                    }
                });
                dz = da;
            }
        }
        (d_input, d_shared)
    }
}
