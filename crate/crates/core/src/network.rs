//! The raw denoiser network: an MLP over flattened spectrogram patches with a
//! fixed Fourier embedding of the noise level concatenated to its input.
//!
//! Hidden layers use SiLU; the output layer is affine. Reverse mode is written
//! out by hand: [`DenoiserParams::vjp_input`] gives `vᵀ ∂F/∂x` and
//! [`DenoiserParams::grad_params`] the gradient of `upstreamᵀ F` with respect to
//! every weight and bias. The batched variants share one cached forward pass
//! between the output and its derivative.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SeededRng;

const EMBED_MIN_FREQ: f64 = 1.0;
const EMBED_MAX_FREQ: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkArch {
    pub in_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
}

impl NetworkArch {
    pub fn new(in_dim: usize, hidden_dims: Vec<usize>, embed_dim: usize) -> Result<Self> {
        let arch = Self { in_dim, hidden_dims, embed_dim };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 {
            return Err(Error::invalid("in_dim must be at least 1"));
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::invalid("hidden widths must be at least 1"));
        }
        if self.embed_dim % 2 != 0 {
            return Err(Error::invalid(format!("embed_dim must be even, got {}", self.embed_dim)));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for every affine layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden_dims.len() + 2);
        widths.push(self.in_dim + self.embed_dim);
        widths.extend_from_slice(&self.hidden_dims);
        widths.push(self.in_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| (i + 1) * o).sum()
    }
}

/// One affine map; `weight` is `(fan_out, fan_in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Array2::zeros((fan_out, fan_in)), bias: Array1::zeros(fan_out) }
    }
}

/// Gradient of a scalar with respect to every layer, laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<Layer>,
}

impl ParamGrads {
    pub fn zeros_like(arch: &NetworkArch) -> Self {
        Self { layers: arch.layer_dims().into_iter().map(|(i, o)| Layer::zeros(i, o)).collect() }
    }

    pub fn scale(&mut self, factor: f64) {
        for layer in &mut self.layers {
            layer.weight *= factor;
            layer.bias *= factor;
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|l| l.weight.iter().all(|&v| v == 0.0) && l.bias.iter().all(|&v| v == 0.0))
    }
}

/// Network weights plus the constants the preconditioned denoiser and the
/// feature pipeline need alongside them.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub arch: NetworkArch,
    pub layers: Vec<Layer>,
    pub sigma_data: f64,
    pub feature_mean: f64,
    pub feature_std: f64,
}

/// Fourier features `[sin(2π f_k u)…, cos(2π f_k u)…]` with `f_k` log-spaced on `[1, 1000]`.
pub fn embed_noise(c_noise: f64, embed_dim: usize) -> Result<Vec<f64>> {
    if embed_dim % 2 != 0 {
        return Err(Error::invalid(format!("embed_dim must be even, got {embed_dim}")));
    }
    let half = embed_dim / 2;
    let mut out = vec![0.0; embed_dim];
    for k in 0..half {
        let freq = if half == 1 {
            EMBED_MIN_FREQ
        } else {
            let frac = k as f64 / (half - 1) as f64;
            EMBED_MIN_FREQ * (EMBED_MAX_FREQ / EMBED_MIN_FREQ).powf(frac)
        };
        let phase = 2.0 * std::f64::consts::PI * freq * c_noise;
        out[k] = phase.sin();
        out[half + k] = phase.cos();
    }
    Ok(out)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Activations kept from a batched forward pass for the backward sweep.
#[derive(Debug)]
pub struct ForwardTrace {
    /// Network input `[x, embedding]` per row.
    input: Array2<f64>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Array2<f64>>,
    /// SiLU outputs of each hidden layer.
    post: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn into_output(self) -> Array2<f64> {
        self.output
    }
}

impl DenoiserParams {
    /// He-uniform weights (`U(±√(6/fan_in))`) and zero biases.
    pub fn init(arch: NetworkArch, sigma_data: f64, rng: &mut SeededRng) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = (6.0 / fan_in as f64).sqrt();
                let weight = Array2::from_shape_fn((fan_out, fan_in), |_| rng.uniform_range(-bound, bound));
                Layer { weight, bias: Array1::zeros(fan_out) }
            })
            .collect();
        Self::from_layers(arch, layers, sigma_data, 0.0, 1.0)
    }

    pub fn zeros(arch: NetworkArch, sigma_data: f64) -> Result<Self> {
        arch.validate()?;
        let layers = arch.layer_dims().into_iter().map(|(i, o)| Layer::zeros(i, o)).collect();
        Self::from_layers(arch, layers, sigma_data, 0.0, 1.0)
    }

    pub fn from_layers(
        arch: NetworkArch,
        layers: Vec<Layer>,
        sigma_data: f64,
        feature_mean: f64,
        feature_std: f64,
    ) -> Result<Self> {
        arch.validate()?;
        let dims = arch.layer_dims();
        if dims.len() != layers.len() {
            return Err(Error::invalid(format!("expected {} layers, got {}", dims.len(), layers.len())));
        }
        for (idx, ((fan_in, fan_out), layer)) in dims.iter().zip(&layers).enumerate() {
            if layer.weight.dim() != (*fan_out, *fan_in) || layer.bias.len() != *fan_out {
                return Err(Error::invalid(format!(
                    "layer {idx}: expected weight {fan_out}x{fan_in} and bias {fan_out}, got {:?} and {}",
                    layer.weight.dim(),
                    layer.bias.len()
                )));
            }
        }
        if !(sigma_data > 0.0) {
            return Err(Error::invalid("sigma_data must be positive"));
        }
        if !(feature_std > 0.0) {
            return Err(Error::invalid("feature_std must be positive"));
        }
        Ok(Self { arch, layers, sigma_data, feature_mean, feature_std })
    }

    pub fn in_dim(&self) -> usize {
        self.arch.in_dim
    }

    fn check_rows(&self, what: &str, rows: &ArrayView2<'_, f64>) -> Result<()> {
        if rows.ncols() != self.arch.in_dim {
            return Err(Error::invalid(format!(
                "{what} has {} columns, network expects {}",
                rows.ncols(),
                self.arch.in_dim
            )));
        }
        Ok(())
    }

    /// Forward pass over a batch of rows, keeping what the backward pass needs.
    pub fn forward_trace(&self, xs: ArrayView2<'_, f64>, c_noise: f64) -> Result<ForwardTrace> {
        self.forward_trace_rows(xs, &vec![c_noise; xs.nrows()])
    }

    /// Like [`forward_trace`](Self::forward_trace) with a separate noise level per row.
    pub fn forward_trace_rows(&self, xs: ArrayView2<'_, f64>, c_noise: &[f64]) -> Result<ForwardTrace> {
        self.check_rows("input", &xs)?;
        let batch = xs.nrows();
        if c_noise.len() != batch {
            return Err(Error::invalid(format!("{} noise levels for {batch} rows", c_noise.len())));
        }
        let in_dim = self.arch.in_dim;
        let embed_dim = self.arch.embed_dim;
        let mut input = Array2::zeros((batch, in_dim + embed_dim));
        input.slice_mut(s![.., ..in_dim]).assign(&xs);
        if embed_dim > 0 {
            let mut cached: Option<(f64, Array1<f64>)> = None;
            for (r, &c) in c_noise.iter().enumerate() {
                if cached.as_ref().map_or(true, |(prev, _)| *prev != c) {
                    cached = Some((c, Array1::from(embed_noise(c, embed_dim)?)));
                }
                input.slice_mut(s![r, in_dim..]).assign(&cached.as_ref().unwrap().1);
            }
        }

        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(last);
        let mut post: Vec<Array2<f64>> = Vec::with_capacity(last);
        for (l, layer) in self.layers.iter().enumerate() {
            let a = if l == 0 { &input } else { &post[l - 1] };
            let z = a.dot(&layer.weight.t()) + &layer.bias;
            if l == last {
                return Ok(ForwardTrace { input, pre, post, output: z });
            }
            post.push(z.mapv(silu));
            pre.push(z);
        }
        unreachable!("network has at least one layer")
    }

    /// Backpropagates `upstream` (rows of `∂L/∂F`). Returns input gradients and,
    /// when requested, parameter gradients summed over the batch.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        upstream: ArrayView2<'_, f64>,
        want_params: bool,
    ) -> Result<(Array2<f64>, Option<ParamGrads>)> {
        if upstream.dim() != trace.output.dim() {
            return Err(Error::invalid(format!(
                "upstream shape {:?} does not match output {:?}",
                upstream.dim(),
                trace.output.dim()
            )));
        }
        let mut grads = want_params.then(|| ParamGrads::zeros_like(&self.arch));
        let mut g = upstream.to_owned();
        for l in (0..self.layers.len()).rev() {
            let a = if l == 0 { &trace.input } else { &trace.post[l - 1] };
            if let Some(grads) = grads.as_mut() {
                grads.layers[l].weight = g.t().dot(a);
                grads.layers[l].bias = g.sum_axis(Axis(0));
            }
            let mut prev = g.dot(&self.layers[l].weight);
            if l > 0 {
                prev.zip_mut_with(&trace.pre[l - 1], |gv, &z| *gv *= silu_grad(z));
            }
            g = prev;
        }
        let input_grad = g.slice(s![.., ..self.arch.in_dim]).to_owned();
        Ok((input_grad, grads))
    }

    pub fn forward_batch(&self, xs: ArrayView2<'_, f64>, c_noise: f64) -> Result<Array2<f64>> {
        Ok(self.forward_trace(xs, c_noise)?.into_output())
    }

    pub fn forward(&self, x: &[f64], c_noise: f64) -> Result<Vec<f64>> {
        let xs = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::invalid(e.to_string()))?;
        Ok(self.forward_batch(xs, c_noise)?.into_raw_vec_and_offset().0)
    }

    /// `vᵀ ∂F/∂x`, evaluated by reverse mode.
    pub fn vjp_input(&self, x: &[f64], c_noise: f64, v: &[f64]) -> Result<Vec<f64>> {
        let (xs, vs) = row_pair(x, v)?;
        let trace = self.forward_trace(xs, c_noise)?;
        let (g, _) = self.backward(&trace, vs, false)?;
        Ok(g.into_raw_vec_and_offset().0)
    }

    /// Gradient of `upstreamᵀ F(x)` with respect to every weight and bias.
    pub fn grad_params(&self, x: &[f64], c_noise: f64, upstream: &[f64]) -> Result<ParamGrads> {
        let (xs, us) = row_pair(x, upstream)?;
        let trace = self.forward_trace(xs, c_noise)?;
        let (_, grads) = self.backward(&trace, us, true)?;
        Ok(grads.expect("requested parameter gradients"))
    }

    /// Flat view of all parameters in layer order (weight then bias).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.arch.num_params());
        for layer in &self.layers {
            out.extend(layer.weight.iter());
            out.extend(layer.bias.iter());
        }
        out
    }
}

fn row_pair<'a>(x: &'a [f64], v: &'a [f64]) -> Result<(ArrayView2<'a, f64>, ArrayView2<'a, f64>)> {
    if x.len() != v.len() {
        return Err(Error::invalid(format!("vector lengths differ: {} vs {}", x.len(), v.len())));
    }
    let xs = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::invalid(e.to_string()))?;
    let vs = ArrayView2::from_shape((1, v.len()), v).map_err(|e| Error::invalid(e.to_string()))?;
    Ok((xs, vs))
}
