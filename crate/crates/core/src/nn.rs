//! Affine layers, ReLU MLPs and softmax with hand-derived backward passes.
//!
//! Parameters are exposed as an ordered list of flat slices. Gradients come
//! back in the same order, so an optimizer can pair them positionally.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Matrix;

/// Gradients in the order of [`Parameterized::params`].
pub type Gradients = Vec<Vec<f64>>;

pub trait Parameterized {
    fn params(&self) -> Vec<&[f64]>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// `y = x·Wᵀ + b` with `W` stored as `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Option<Vec<f64>>,
}

impl Linear {
    /// Uniform fan-in initialisation, `U(-1/√in, 1/√in)` for weights and bias.
    pub fn init(in_dim: usize, out_dim: usize, bias: bool, rng: &mut Rng) -> Linear {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut weight = Matrix::zeros(out_dim, in_dim);
        for w in weight.as_mut_slice() {
            *w = rng.gen_range(-bound..bound);
        }
        let bias = bias.then(|| (0..out_dim).map(|_| rng.gen_range(-bound..bound)).collect());
        Linear { weight, bias }
    }

    pub fn identity(dim: usize, bias: bool) -> Linear {
        Linear {
            weight: Matrix::identity(dim),
            bias: bias.then(|| vec![0.0; dim]),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize, bias: bool) -> Linear {
        Linear {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: bias.then(|| vec![0.0; out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::dim(format!(
                "linear layer expects {} inputs, got {}",
                self.in_dim(),
                x.cols()
            )));
        }
        let mut y = x.matmul_t(&self.weight)?;
        if let Some(b) = &self.bias {
            y.add_row_broadcast(b)?;
        }
        Ok(y)
    }

    /// Returns `(parameter gradients, gradient w.r.t. the input)`.
    pub fn backward(&self, x: &Matrix, grad_out: &Matrix) -> Result<(Gradients, Matrix)> {
        let gw = grad_out.t_matmul(x)?;
        let gx = grad_out.matmul(&self.weight)?;
        let mut grads = vec![gw.into_vec()];
        if self.bias.is_some() {
            grads.push(grad_out.column_sums());
        }
        Ok((grads, gx))
    }

    /// Append freshly initialised output units, keeping existing rows untouched.
    pub fn grow_outputs(&mut self, extra: usize, rng: &mut Rng) {
        if extra == 0 {
            return;
        }
        let fresh = Linear::init(self.in_dim(), extra, self.bias.is_some(), rng);
        let old_rows = self.out_dim();
        let mut data = std::mem::replace(&mut self.weight, Matrix::zeros(1, 1)).into_vec();
        data.extend_from_slice(fresh.weight.as_slice());
        self.weight = Matrix::from_vec(old_rows + extra, fresh.in_dim(), data)
            .expect("grown weight shape is consistent");
        if let (Some(b), Some(fb)) = (&mut self.bias, fresh.bias) {
            b.extend(fb);
        }
    }
}

impl Parameterized for Linear {
    fn params(&self) -> Vec<&[f64]> {
        let mut p = vec![self.weight.as_slice()];
        if let Some(b) = &self.bias {
            p.push(b.as_slice());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = vec![self.weight.as_mut_slice()];
        if let Some(b) = &mut self.bias {
            p.push(b.as_mut_slice());
        }
        p
    }
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

/// Zero the gradient wherever the pre-activation was not positive.
pub fn relu_backward(pre: &Matrix, grad_out: &Matrix) -> Matrix {
    let mut g = grad_out.clone();
    for (gv, &p) in g.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        if p <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

/// Row-wise softmax of `logits / temperature`, computed stably.
pub fn softmax_rows(logits: &Matrix, temperature: f64) -> Matrix {
    let mut out = logits.clone();
    for row in out.as_mut_slice().chunks_exact_mut(logits.cols()) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / temperature).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Row-wise `log softmax(logits / temperature)`.
pub fn log_softmax_rows(logits: &Matrix, temperature: f64) -> Matrix {
    let mut out = logits.clone();
    for row in out.as_mut_slice().chunks_exact_mut(logits.cols()) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = row.iter().map(|v| ((v - max) / temperature).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v = (*v - max) / temperature - lse);
    }
    out
}

/// Topology of a fully connected ReLU network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    /// Apply ReLU after the last layer as well.
    pub final_relu: bool,
}

impl MlpSpec {
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.output_dim);
        w
    }
}

/// Dense ReLU network. Every layer carries a bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Linear>,
}

/// Activations recorded by [`Mlp::forward_trace`] for the backward pass.
pub struct MlpTrace {
    /// Input to each layer.
    inputs: Vec<Matrix>,
    /// Pre-activation output of each layer.
    pre: Vec<Matrix>,
    output: Matrix,
}

impl MlpTrace {
    pub fn output(&self) -> &Matrix {
        &self.output
    }
}

impl Mlp {
    pub fn new(spec: MlpSpec, rng: &mut Rng) -> Result<Mlp> {
        let widths = spec.widths();
        if widths.contains(&0) {
            return Err(Error::param(format!("layer widths must be positive: {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], true, rng))
            .collect();
        Ok(Mlp { spec, layers })
    }

    /// Build from explicit layers; widths must chain.
    pub fn from_layers(spec: MlpSpec, layers: Vec<Linear>) -> Result<Mlp> {
        let widths = spec.widths();
        if layers.len() + 1 != widths.len() {
            return Err(Error::dim(format!(
                "{} layers for topology {widths:?}",
                layers.len()
            )));
        }
        for (i, (l, w)) in layers.iter().zip(widths.windows(2)).enumerate() {
            if l.in_dim() != w[0] || l.out_dim() != w[1] || l.bias.as_ref().is_none_or(|b| b.len() != w[1]) {
                return Err(Error::dim(format!("layer {i} does not match topology {widths:?}")));
            }
        }
        Ok(Mlp { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    fn activates(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.spec.final_relu
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if self.activates(i) {
                h = relu(&h);
            }
        }
        Ok(h)
    }

    pub fn forward_trace(&self, x: &Matrix) -> Result<MlpTrace> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let z = l.forward(&h)?;
            inputs.push(h);
            h = if self.activates(i) { relu(&z) } else { z.clone() };
            pre.push(z);
        }
        Ok(MlpTrace {
            inputs,
            pre,
            output: h,
        })
    }

    /// Backpropagate `grad_out` (w.r.t. the network output) through a trace.
    /// Returns parameter gradients and the gradient w.r.t. the network input.
    pub fn backward(&self, trace: &MlpTrace, grad_out: &Matrix) -> Result<(Gradients, Matrix)> {
        trace.output.check_same_shape(grad_out, "mlp backward")?;
        let mut per_layer: Vec<Gradients> = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            if self.activates(i) {
                g = relu_backward(&trace.pre[i], &g);
            }
            let (pg, gx) = self.layers[i].backward(&trace.inputs[i], &g)?;
            per_layer.push(pg);
            g = gx;
        }
        per_layer.reverse();
        Ok((per_layer.into_iter().flatten().collect(), g))
    }
}

impl Parameterized for Mlp {
    fn params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}
