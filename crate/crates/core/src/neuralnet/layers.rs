//! Hand-wired layers. Every layer consumes and produces batch tensors whose
//! leading axis is the minibatch; convolutional tensors are `[B, C, T]`,
//! dense tensors `[B, D]`.
//!
//! Per-sample work inside a layer may run on the rayon pool. Gradients are
//! reduced over the batch in index order so results do not depend on the
//! number of threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::kernels::{correlate, correlate_grad_input, correlate_grad_weights, dot};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::filterbank::{
    filter_gradients, reparametrize_jacobian, CutoffParams, SincFilterBank, WindowVector,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    SincConv,
    Conv1d,
    Dense,
    LayerNorm,
    BatchNorm,
    LeakyRelu,
    MaxPool,
    Softmax,
    Dropout,
}

/// A learnable tensor and the gradient from the most recent backward pass.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: &'static str,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(name: &'static str, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { name, value, grad }
    }
}

pub trait Layer: Send + Sync {
    fn kind(&self) -> LayerKind;

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor>;

    /// Writes parameter gradients into `params()[..].grad` and returns the
    /// gradient with respect to the forward input.
    fn backward(&mut self, grad: &Tensor) -> Result<Tensor>;

    fn params(&self) -> &[Param] {
        &[]
    }

    fn params_mut(&mut self) -> &mut [Param] {
        &mut []
    }

    /// Non-learnable state persisted in checkpoints (batch-norm statistics).
    fn buffers(&self) -> Vec<(&'static str, &Tensor)> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        Vec::new()
    }

    /// Lets a layer skip the input-gradient computation when nothing upstream
    /// needs it.
    fn set_input_grad(&mut self, _needed: bool) {}

    /// Cutoff parameters, for sinc layers only.
    fn cutoffs(&self) -> Option<CutoffParams> {
        None
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

fn cached<'a>(cache: &'a Option<Tensor>, layer: &str) -> Result<&'a Tensor> {
    cache
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("{layer}: backward called before forward")))
}

fn expect_rank3(x: &Tensor, layer: &str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [b, c, t] => Ok((b, c, t)),
        _ => Err(Error::Shape(format!(
            "{layer} expects [batch, channels, time], got {:?}",
            x.shape()
        ))),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, layer: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!(
            "{layer}: upstream gradient shape {:?} does not match cached {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Glorot/Xavier uniform initialization on `±sqrt(6 / (fan_in + fan_out))`.
///
/// Fans are read from the shape: `[out, in]` for dense weights and
/// `[out, in, k]` for convolution kernels.
pub fn glorot_init(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let (fan_in, fan_out) = match *shape {
        [] => (1, 1),
        [n] => (n, n),
        [o, i] => (i, o),
        [o, i, ref rest @ ..] => {
            let k: usize = rest.iter().product();
            (i * k, o * k)
        }
    };
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data length")
}

// ---------------------------------------------------------------------------
// sinc convolution

/// Correlates a single-channel signal `[1, T]` with every filter of the bank
/// built from `params`. Output is `[F, T - L + 1]`.
pub fn sinc_conv_forward(x: &Tensor, params: &CutoffParams, window: &WindowVector) -> Result<Tensor> {
    let t = match *x.shape() {
        [1, t] => t,
        _ => {
            return Err(Error::Shape(format!(
                "sinc convolution expects [1, time], got {:?}",
                x.shape()
            )))
        }
    };
    let len = window.len();
    if t < len {
        return Err(Error::Shape(format!("signal of {t} samples is shorter than filter length {len}")));
    }
    let bank = SincFilterBank::from_params(params, window, 1.0)?;
    let f = bank.n_filters();
    let mut out = vec![0.0; f * (t - len + 1)];
    correlate(x.data(), 1, t, &bank.taps, f, len, &mut out);
    Tensor::new(vec![f, t - len + 1], out)
}

/// Gradients of a scalar loss with respect to raw cutoffs and to the input,
/// given the upstream gradient of [`sinc_conv_forward`].
pub fn sinc_conv_backward(
    upstream: &Tensor,
    x: &Tensor,
    params: &CutoffParams,
    window: &WindowVector,
) -> Result<(Vec<f64>, Vec<f64>, Tensor)> {
    let len = window.len();
    let t = match *x.shape() {
        [1, t] if t >= len => t,
        _ => return Err(Error::Contract(format!("cached input has unusable shape {:?}", x.shape()))),
    };
    if upstream.shape() != [params.len(), t - len + 1] {
        return Err(Error::Contract(format!(
            "upstream gradient {:?} does not match a forward pass over {:?} with {} filters",
            upstream.shape(),
            x.shape(),
            params.len()
        )));
    }
    let f = params.len();
    let mut dtaps = vec![0.0; f * len];
    correlate_grad_weights(x.data(), 1, t, upstream.data(), f, len, &mut dtaps);
    let (g1, g2) = cutoff_grads(&dtaps, params, window)?;
    let bank = SincFilterBank::from_params(params, window, 1.0)?;
    let mut gx = vec![0.0; t];
    correlate_grad_input(&bank.taps, 1, t, upstream.data(), f, len, &mut gx);
    Ok((g1, g2, Tensor::new(vec![1, t], gx)?))
}

/// Chains tap gradients through the filter construction and the
/// reparametrization down to the raw cutoffs.
fn cutoff_grads(dtaps: &[f64], params: &CutoffParams, window: &WindowVector) -> Result<(Vec<f64>, Vec<f64>)> {
    let len = window.len();
    let mut g1 = Vec::with_capacity(params.len());
    let mut g2 = Vec::with_capacity(params.len());
    for (k, (&r1, &r2)) in params.f1_raw.iter().zip(&params.f2_raw).enumerate() {
        let (a1, a2) = crate::filterbank::reparametrize(r1, r2)?;
        let (d1, d2) = filter_gradients(a1, a2, window)?;
        let dt = &dtaps[k * len..(k + 1) * len];
        let ga1 = dot(dt, &d1);
        let ga2 = dot(dt, &d2);
        let j = reparametrize_jacobian(r1, r2);
        g1.push(ga1 * j[0][0] + ga2 * j[1][0]);
        g2.push(ga1 * j[0][1] + ga2 * j[1][1]);
    }
    Ok((g1, g2))
}

/// First-layer band-pass filterbank with two learnable cutoffs per filter.
pub struct SincConv {
    params: Vec<Param>,
    window: WindowVector,
    input_grad: bool,
    cache_x: Option<Tensor>,
    cache_taps: Option<Vec<f64>>,
}

impl SincConv {
    pub fn new(cutoffs: CutoffParams, window: WindowVector) -> Self {
        let f = cutoffs.len();
        Self {
            params: vec![
                Param::new("f1_raw", Tensor::new(vec![f], cutoffs.f1_raw).expect("1-d")),
                Param::new("f2_raw", Tensor::new(vec![f], cutoffs.f2_raw).expect("1-d")),
            ],
            window,
            input_grad: true,
            cache_x: None,
            cache_taps: None,
        }
    }

    pub fn n_filters(&self) -> usize {
        self.params[0].value.len()
    }

    pub fn filter_len(&self) -> usize {
        self.window.len()
    }

    pub fn window(&self) -> &WindowVector {
        &self.window
    }

    fn current_cutoffs(&self) -> Result<CutoffParams> {
        CutoffParams::new(
            self.params[0].value.data().to_vec(),
            self.params[1].value.data().to_vec(),
        )
    }
}

impl Layer for SincConv {
    fn kind(&self) -> LayerKind {
        LayerKind::SincConv
    }

    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let (b, c, t) = expect_rank3(x, "sinc_conv")?;
        let len = self.filter_len();
        if c != 1 {
            return Err(Error::Shape(format!("sinc_conv expects one input channel, got {c}")));
        }
        if t < len {
            return Err(Error::Shape(format!("chunk of {t} samples is shorter than filter length {len}")));
        }
        let bank = SincFilterBank::from_params(&self.current_cutoffs()?, &self.window, 1.0)?;
        let f = bank.n_filters();
        let t_out = t - len + 1;
        let mut out = vec![0.0; b * f * t_out];
        out.par_chunks_mut(f * t_out)
            .zip(x.data().par_chunks(t))
            .for_each(|(y, xb)| correlate(xb, 1, t, &bank.taps, f, len, y));
        self.cache_x = Some(x.clone());
        self.cache_taps = Some(bank.taps);
        Tensor::new(vec![b, f, t_out], out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = cached(&self.cache_x, "sinc_conv")?;
        let (b, _, t) = expect_rank3(x, "sinc_conv")?;
        let f = self.n_filters();
        let len = self.filter_len();
        let t_out = t - len + 1;
        if grad.shape() != [b, f, t_out] {
            return Err(Error::Contract(format!(
                "sinc_conv: upstream gradient {:?} does not match forward output [{b}, {f}, {t_out}]",
                grad.shape()
            )));
        }
        let per_sample: Vec<Vec<f64>> = (0..b)
            .into_par_iter()
            .map(|i| {
                let mut g = vec![0.0; f * len];
                correlate_grad_weights(x.item(i), 1, t, grad.item(i), f, len, &mut g);
                g
            })
            .collect();
        let mut dtaps = vec![0.0; f * len];
        for g in &per_sample {
            dtaps.iter_mut().zip(g).for_each(|(a, v)| *a += v);
        }
        let (g1, g2) = cutoff_grads(&dtaps, &self.current_cutoffs()?, &self.window)?;
        self.params[0].grad = Tensor::new(vec![f], g1)?;
        self.params[1].grad = Tensor::new(vec![f], g2)?;

        let mut gx = vec![0.0; b * t];
        if self.input_grad {
            let taps = self.cache_taps.as_ref().expect("cached with input");
            gx.par_chunks_mut(t).enumerate().for_each(|(i, g)| {
                correlate_grad_input(taps, 1, t, grad.item(i), f, len, g)
            });
        }
        Tensor::new(vec![b, 1, t], gx)
    }

    fn params(&self) -> &[Param] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    fn set_input_grad(&mut self, needed: bool) {
        self.input_grad = needed;
    }

    fn cutoffs(&self) -> Option<CutoffParams> {
        self.current_cutoffs().ok()
    }
}

// ---------------------------------------------------------------------------
// standard convolution

/// Valid-mode correlation of `[C_in, T]` with `[C_out, C_in, L]` filters.
pub fn conv1d_forward(x: &Tensor, filters: &Tensor) -> Result<Tensor> {
    let (c_in, t) = match *x.shape() {
        [c, t] => (c, t),
        _ => return Err(Error::Shape(format!("conv1d expects [channels, time], got {:?}", x.shape()))),
    };
    let (c_out, k) = match *filters.shape() {
        [o, i, k] if i == c_in && k > 0 => (o, k),
        _ => {
            return Err(Error::Shape(format!(
                "filters {:?} do not match {c_in} input channels",
                filters.shape()
            )))
        }
    };
    if t < k {
        return Err(Error::Shape(format!("signal of {t} samples is shorter than filter length {k}")));
    }
    let mut out = vec![0.0; c_out * (t - k + 1)];
    correlate(x.data(), c_in, t, filters.data(), c_out, k, &mut out);
    Tensor::new(vec![c_out, t - k + 1], out)
}

/// Convolution with every filter tap learned directly. No bias: every
/// convolution is followed by a normalization with its own shift.
pub struct Conv1d {
    params: Vec<Param>,
    input_grad: bool,
    cache_x: Option<Tensor>,
}

impl Conv1d {
    pub fn new(c_out: usize, c_in: usize, k: usize, rng: &mut impl Rng) -> Self {
        Self {
            params: vec![Param::new("weight", glorot_init(&[c_out, c_in, k], rng))],
            input_grad: true,
            cache_x: None,
        }
    }

    fn dims(&self) -> (usize, usize, usize) {
        let s = self.params[0].value.shape();
        (s[0], s[1], s[2])
    }
}

impl Layer for Conv1d {
    fn kind(&self) -> LayerKind {
        LayerKind::Conv1d
    }

    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let (b, c, t) = expect_rank3(x, "conv1d")?;
        let (c_out, c_in, k) = self.dims();
        if c != c_in {
            return Err(Error::Shape(format!("conv1d expects {c_in} channels, got {c}")));
        }
        if t < k {
            return Err(Error::Shape(format!("conv1d input of length {t} is shorter than kernel {k}")));
        }
        let t_out = t - k + 1;
        let w = self.params[0].value.data();
        let mut out = vec![0.0; b * c_out * t_out];
        out.par_chunks_mut(c_out * t_out)
            .zip(x.data().par_chunks(c * t))
            .for_each(|(y, xb)| correlate(xb, c_in, t, w, c_out, k, y));
        self.cache_x = Some(x.clone());
        Tensor::new(vec![b, c_out, t_out], out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = cached(&self.cache_x, "conv1d")?;
        let (b, _, t) = expect_rank3(x, "conv1d")?;
        let (c_out, c_in, k) = self.dims();
        let t_out = t - k + 1;
        if grad.shape() != [b, c_out, t_out] {
            return Err(Error::Contract(format!(
                "conv1d: upstream gradient {:?} does not match forward output [{b}, {c_out}, {t_out}]",
                grad.shape()
            )));
        }
        let per_sample: Vec<Vec<f64>> = (0..b)
            .into_par_iter()
            .map(|i| {
                let mut g = vec![0.0; c_out * c_in * k];
                correlate_grad_weights(x.item(i), c_in, t, grad.item(i), c_out, k, &mut g);
                g
            })
            .collect();
        let gw = self.params[0].grad.data_mut();
        gw.iter_mut().for_each(|v| *v = 0.0);
        for g in &per_sample {
            gw.iter_mut().zip(g).for_each(|(a, v)| *a += v);
        }
        let mut gx = vec![0.0; b * c_in * t];
        if self.input_grad {
            let w = self.params[0].value.data();
            gx.par_chunks_mut(c_in * t).enumerate().for_each(|(i, g)| {
                correlate_grad_input(w, c_in, t, grad.item(i), c_out, k, g)
            });
        }
        Tensor::new(vec![b, c_in, t], gx)
    }

    fn params(&self) -> &[Param] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    fn set_input_grad(&mut self, needed: bool) {
        self.input_grad = needed;
    }
}

// ---------------------------------------------------------------------------
// dense

/// Fully connected layer. Inputs of any rank are flattened per batch item.
pub struct Dense {
    params: Vec<Param>,
    cache_x: Option<Tensor>,
}

impl Dense {
    pub fn new(n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            params: vec![
                Param::new("weight", glorot_init(&[n_out, n_in], rng)),
                Param::new("bias", Tensor::zeros(&[n_out])),
            ],
            cache_x: None,
        }
    }

    pub fn n_in(&self) -> usize {
        self.params[0].value.shape()[1]
    }

    pub fn n_out(&self) -> usize {
        self.params[0].value.shape()[0]
    }
}

impl Layer for Dense {
    fn kind(&self) -> LayerKind {
        LayerKind::Dense
    }

    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let b = x.batch();
        let (n_in, n_out) = (self.n_in(), self.n_out());
        if x.shape().len() < 2 || x.item_len() != n_in {
            return Err(Error::Shape(format!(
                "dense expects {n_in} features per item, got shape {:?}",
                x.shape()
            )));
        }
        let w = self.params[0].value.data();
        let bias = self.params[1].value.data();
        let mut out = vec![0.0; b * n_out];
        out.par_chunks_mut(n_out).enumerate().for_each(|(i, y)| {
            let xi = x.item(i);
            for (o, yo) in y.iter_mut().enumerate() {
                *yo = dot(&w[o * n_in..(o + 1) * n_in], xi) + bias[o];
            }
        });
        self.cache_x = Some(x.clone());
        Tensor::new(vec![b, n_out], out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = cached(&self.cache_x, "dense")?;
        let b = x.batch();
        let (n_in, n_out) = (self.n_in(), self.n_out());
        if grad.shape() != [b, n_out] {
            return Err(Error::Contract(format!(
                "dense: upstream gradient {:?} does not match forward output [{b}, {n_out}]",
                grad.shape()
            )));
        }
        let mut gw = vec![0.0; n_out * n_in];
        let mut gb = vec![0.0; n_out];
        for i in 0..b {
            let xi = x.item(i);
            for (o, &u) in grad.item(i).iter().enumerate() {
                gb[o] += u;
                super::kernels::axpy(u, xi, &mut gw[o * n_in..(o + 1) * n_in]);
            }
        }
        self.params[0].grad = Tensor::new(vec![n_out, n_in], gw)?;
        self.params[1].grad = Tensor::new(vec![n_out], gb)?;

        let w = self.params[0].value.data();
        let mut gx = vec![0.0; b * n_in];
        gx.par_chunks_mut(n_in).enumerate().for_each(|(i, g)| {
            for (o, &u) in grad.item(i).iter().enumerate() {
                super::kernels::axpy(u, &w[o * n_in..(o + 1) * n_in], g);
            }
        });
        Tensor::new(x.shape().to_vec(), gx)
    }

    fn params(&self) -> &[Param] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }
}

// ---------------------------------------------------------------------------
// normalization

const NORM_EPS: f64 = 1e-5;

/// Normalizes each batch item over all of its elements, then applies an
/// optional per-channel gain and shift. Accepts `[B, C, T]` or `[B, D]`
/// (treated as `D` channels of length one).
pub struct LayerNorm {
    params: Vec<Param>,
    channels: usize,
    cache: Option<(Tensor, Vec<f64>)>,
}

impl LayerNorm {
    pub fn new(channels: usize, affine: bool) -> Self {
        let params = if affine {
            vec![
                Param::new("gamma", Tensor::new(vec![channels], vec![1.0; channels]).expect("1-d")),
                Param::new("beta", Tensor::zeros(&[channels])),
            ]
        } else {
            Vec::new()
        };
        Self {
            params,
            channels,
            cache: None,
        }
    }

    fn split(&self, x: &Tensor) -> Result<(usize, usize)> {
        let c = match x.shape() {
            [_, c, _] | [_, c] => *c,
            s => return Err(Error::Shape(format!("layer_norm expects rank 2 or 3, got {s:?}"))),
        };
        if c != self.channels {
            return Err(Error::Shape(format!("layer_norm expects {} channels, got {c}", self.channels)));
        }
        Ok((c, x.item_len() / c))
    }
}

/// Mean and variance-normalized copy of `v`, plus `1 / sqrt(var + eps)`.
pub fn layer_norm(v: &[f64]) -> (Vec<f64>, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + NORM_EPS).sqrt();
    (v.iter().map(|x| (x - mean) * inv).collect(), inv)
}

impl Layer for LayerNorm {
    fn kind(&self) -> LayerKind {
        LayerKind::LayerNorm
    }

    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let (_, t) = self.split(x)?;
        let b = x.batch();
        let n = x.item_len();
        let mut xhat = vec![0.0; b * n];
        let mut inv = vec![0.0; b];
        xhat.par_chunks_mut(n)
            .zip(inv.par_iter_mut())
            .enumerate()
            .for_each(|(i, (h, s))| {
                let (normed, inv_std) = layer_norm(x.item(i));
                h.copy_from_slice(&normed);
                *s = inv_std;
            });
        let xhat = Tensor::new(x.shape().to_vec(), xhat)?;
        let mut y = xhat.clone();
        if !self.params.is_empty() {
            let gamma = self.params[0].value.data();
            let beta = self.params[1].value.data();
            for item in y.data_mut().chunks_mut(n) {
                for (ch, seg) in item.chunks_mut(t).enumerate() {
                    seg.iter_mut().for_each(|v| *v = *v * gamma[ch] + beta[ch]);
                }
            }
        }
        self.cache = Some((xhat, inv));
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let (xhat, inv) = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Contract("layer_norm: backward called before forward".into()))?;
        same_shape(grad, xhat, "layer_norm")?;
        let n = xhat.item_len();
        let t = n / self.channels;
        let b = xhat.batch();

        let mut dxhat = grad.clone();
        if !self.params.is_empty() {
            let mut dgamma = vec![0.0; self.channels];
            let mut dbeta = vec![0.0; self.channels];
            for i in 0..b {
                for ch in 0..self.channels {
                    let g = &grad.item(i)[ch * t..(ch + 1) * t];
                    let h = &xhat.item(i)[ch * t..(ch + 1) * t];
                    dgamma[ch] += dot(g, h);
                    dbeta[ch] += g.iter().sum::<f64>();
                }
            }
            let gamma = self.params[0].value.data().to_vec();
            for item in dxhat.data_mut().chunks_mut(n) {
                for (ch, seg) in item.chunks_mut(t).enumerate() {
                    seg.iter_mut().for_each(|v| *v *= gamma[ch]);
                }
            }
            self.params[0].grad = Tensor::new(vec![self.channels], dgamma)?;
            self.params[1].grad = Tensor::new(vec![self.channels], dbeta)?;
        }

        let mut dx = vec![0.0; b * n];
        dx.par_chunks_mut(n).enumerate().for_each(|(i, out)| {
            let dh = dxhat.item(i);
            let h = xhat.item(i);
            let mean_dh = dh.iter().sum::<f64>() / n as f64;
            let mean_dhh = dot(dh, h) / n as f64;
            for ((o, &d), &hv) in out.iter_mut().zip(dh).zip(h) {
                *o = inv[i] * (d - mean_dh - hv * mean_dhh);
            }
        });
        Tensor::new(xhat.shape().to_vec(), dx)
    }

    fn params(&self) -> &[Param] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }
}

/// Batch normalization over `[B, D]` with running statistics for inference.
pub struct BatchNorm {
    params: Vec<Param>,
    running_mean: Tensor,
    running_var: Tensor,
    momentum: f64,
    cache: Option<(Tensor, Vec<f64>)>,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        Self {
            params: vec![
                Param::new("gamma", Tensor::new(vec![features], vec![1.0; features]).expect("1-d")),
                Param::new("beta", Tensor::zeros(&[features])),
            ],
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::new(vec![features], vec![1.0; features]).expect("1-d"),
            momentum: 0.1,
            cache: None,
        }
    }

    fn features(&self) -> usize {
        self.running_mean.len()
    }
}

impl Layer for BatchNorm {
    fn kind(&self) -> LayerKind {
        LayerKind::BatchNorm
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let d = self.features();
        let b = match *x.shape() {
            [b, n] if n == d && b > 0 => b,
            _ => return Err(Error::Shape(format!("batch_norm expects [batch, {d}], got {:?}", x.shape()))),
        };
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; d];
                for i in 0..b {
                    mean.iter_mut().zip(x.item(i)).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= b as f64);
                let mut var = vec![0.0; d];
                for i in 0..b {
                    for ((s, v), m) in var.iter_mut().zip(x.item(i)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= b as f64);
                let mo = self.momentum;
                for (r, m) in self.running_mean.data_mut().iter_mut().zip(&mean) {
                    *r = (1.0 - mo) * *r + mo * m;
                }
                for (r, v) in self.running_var.data_mut().iter_mut().zip(&var) {
                    *r = (1.0 - mo) * *r + mo * v;
                }
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.data().to_vec(),
                self.running_var.data().to_vec(),
            ),
        };
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut xhat = x.clone();
        for item in xhat.data_mut().chunks_mut(d) {
            for ((v, m), s) in item.iter_mut().zip(&mean).zip(&inv) {
                *v = (*v - m) * s;
            }
        }
        let gamma = self.params[0].value.data();
        let beta = self.params[1].value.data();
        let mut y = xhat.clone();
        for item in y.data_mut().chunks_mut(d) {
            for ((v, g), be) in item.iter_mut().zip(gamma).zip(beta) {
                *v = *v * g + be;
            }
        }
        self.cache = Some((xhat, inv));
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let (xhat, inv) = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Contract("batch_norm: backward called before forward".into()))?;
        same_shape(grad, xhat, "batch_norm")?;
        let d = self.features();
        let b = xhat.batch();
        let gamma = self.params[0].value.data().to_vec();
        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        for i in 0..b {
            for j in 0..d {
                dgamma[j] += grad.item(i)[j] * xhat.item(i)[j];
                dbeta[j] += grad.item(i)[j];
            }
        }
        // dx = γ/(Bσ) (B dy - Σdy - x̂ Σ(dy x̂))
        let bf = b as f64;
        let mut dx = vec![0.0; b * d];
        for i in 0..b {
            for j in 0..d {
                let dy = grad.item(i)[j];
                dx[i * d + j] =
                    gamma[j] * inv[j] / bf * (bf * dy - dbeta[j] - xhat.item(i)[j] * dgamma[j]);
            }
        }
        self.params[0].grad = Tensor::new(vec![d], dgamma)?;
        self.params[1].grad = Tensor::new(vec![d], dbeta)?;
        Tensor::new(vec![b, d], dx)
    }

    fn params(&self) -> &[Param] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    fn buffers(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("running_mean", &self.running_mean), ("running_var", &self.running_var)]
    }

    fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("running_mean", &mut self.running_mean),
            ("running_var", &mut self.running_var),
        ]
    }
}

// ---------------------------------------------------------------------------
// parameter-free layers

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

pub struct LeakyRelu {
    slope: f64,
    cache_x: Option<Tensor>,
}

impl LeakyRelu {
    pub fn new(slope: f64) -> Self {
        Self { slope, cache_x: None }
    }
}

impl Layer for LeakyRelu {
    fn kind(&self) -> LayerKind {
        LayerKind::LeakyRelu
    }

    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let mut y = x.clone();
        y.data_mut().iter_mut().for_each(|v| *v = leaky_relu(*v, self.slope));
        self.cache_x = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = cached(&self.cache_x, "leaky_relu")?;
        same_shape(grad, x, "leaky_relu")?;
        let mut g = grad.clone();
        for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
            if xv < 0.0 {
                *gv *= self.slope;
            }
        }
        Ok(g)
    }
}

/// Non-overlapping max pooling along time; a trailing partial window is dropped.
pub struct MaxPool {
    width: usize,
    magnitude: bool,
    /// Input shape, argmax positions and the sign applied at each.
    cache: Option<(Vec<usize>, Vec<usize>, Vec<f64>)>,
}

impl MaxPool {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            magnitude: false,
            cache: None,
        }
    }

    /// Pools `|x|` instead of `x`, a full-wave rectifier followed by a
    /// max-pool.
    pub fn magnitude(width: usize) -> Self {
        Self {
            width,
            magnitude: true,
            cache: None,
        }
    }
}

impl Layer for MaxPool {
    fn kind(&self) -> LayerKind {
        LayerKind::MaxPool
    }

    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let (b, c, t) = expect_rank3(x, "max_pool")?;
        let w = self.width;
        if w == 0 || t < w {
            return Err(Error::Shape(format!("max_pool width {w} does not fit length {t}")));
        }
        let t_out = t / w;
        let mut out = Vec::with_capacity(b * c * t_out);
        let mut arg = Vec::with_capacity(b * c * t_out);
        let mut sign = Vec::with_capacity(b * c * t_out);
        let f = |v: f64| if self.magnitude { v.abs() } else { v };
        for (row_idx, row) in x.data().chunks(t).enumerate() {
            for j in 0..t_out {
                let seg = &row[j * w..(j + 1) * w];
                let mut best = 0;
                for (q, v) in seg.iter().enumerate() {
                    if f(*v) > f(seg[best]) {
                        best = q;
                    }
                }
                let s = if self.magnitude && seg[best] < 0.0 { -1.0 } else { 1.0 };
                out.push(s * seg[best]);
                arg.push(row_idx * t + j * w + best);
                sign.push(s);
            }
        }
        self.cache = Some((x.shape().to_vec(), arg, sign));
        Tensor::new(vec![b, c, t_out], out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let (shape, arg, sign) = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Contract("max_pool: backward called before forward".into()))?;
        if grad.len() != arg.len() {
            return Err(Error::Contract(format!(
                "max_pool: upstream gradient {:?} does not match the cached forward",
                grad.shape()
            )));
        }
        let mut gx = Tensor::zeros(shape);
        let d = gx.data_mut();
        for ((&idx, &g), &s) in arg.iter().zip(grad.data()).zip(sign) {
            d[idx] += s * g;
        }
        Ok(gx)
    }
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Row-wise softmax over `[B, K]`.
#[derive(Default)]
pub struct Softmax {
    cache_y: Option<Tensor>,
}

impl Softmax {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for Softmax {
    fn kind(&self) -> LayerKind {
        LayerKind::Softmax
    }

    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let k = match *x.shape() {
            [_, k] if k > 0 => k,
            _ => return Err(Error::Shape(format!("softmax expects [batch, classes], got {:?}", x.shape()))),
        };
        let data: Vec<f64> = x.data().chunks(k).flat_map(softmax).collect();
        let y = Tensor::new(x.shape().to_vec(), data)?;
        self.cache_y = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let y = cached(&self.cache_y, "softmax")?;
        same_shape(grad, y, "softmax")?;
        let k = y.shape()[1];
        let mut dx = Vec::with_capacity(y.len());
        for (p, g) in y.data().chunks(k).zip(grad.data().chunks(k)) {
            let s = dot(p, g);
            dx.extend(p.iter().zip(g).map(|(pi, gi)| pi * (gi - s)));
        }
        Tensor::new(y.shape().to_vec(), dx)
    }
}

/// Inverted dropout. Masks are drawn from a counter-seeded stream so a run
/// is reproducible from its seed.
pub struct Dropout {
    rate: f64,
    seed: u64,
    calls: u64,
    mask: Option<Vec<f64>>,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            seed,
            calls: 0,
            mask: None,
        }
    }
}

impl Layer for Dropout {
    fn kind(&self) -> LayerKind {
        LayerKind::Dropout
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::Eval || self.rate <= 0.0 {
            self.mask = None;
            return Ok(x.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(self.calls.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        self.calls += 1;
        let keep = 1.0 - self.rate;
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mut y = x.clone();
        y.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
        self.mask = Some(mask);
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let mut g = grad.clone();
        if let Some(mask) = &self.mask {
            if mask.len() != g.len() {
                return Err(Error::Contract("dropout: mask does not match upstream gradient".into()));
            }
            g.data_mut().iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filterbank::{build_filter, hamming_window};
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv1d_examples() {
        let x = t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(conv1d_forward(&x, &t(&[1, 1, 1], &[1.0])).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(conv1d_forward(&x, &t(&[1, 1, 2], &[0.0, 1.0])).unwrap().data(), &[2.0, 3.0, 4.0]);
        assert!(conv1d_forward(&x, &t(&[1, 1, 3], &[0.0; 3])).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(matches!(conv1d_forward(&x, &t(&[1, 1, 5], &[0.0; 5])), Err(Error::Shape(_))));
    }

    #[test]
    fn sinc_conv_impulse_and_zero_band() {
        let w = hamming_window(9).unwrap();
        let mut x = vec![0.0; 17];
        x[8] = 1.0;
        let x = t(&[1, 17], &x);
        let p = CutoffParams::new(vec![0.0], vec![0.25]).unwrap();
        let y = sinc_conv_forward(&x, &p, &w).unwrap();
        let mut taps = build_filter(0.0, 0.25, &w).unwrap();
        taps.reverse();
        assert_eq!(y.data(), &taps[..]);

        let zero = CutoffParams::new(vec![0.1, 0.3], vec![0.1, 0.3]).unwrap();
        assert!(sinc_conv_forward(&x, &zero, &w).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sinc_conv_backward_zero_upstream_and_contract() {
        let w = hamming_window(9).unwrap();
        let x = t(&[1, 16], &(0..16).map(|i| (i as f64).sin()).collect::<Vec<_>>());
        let p = CutoffParams::new(vec![0.05, 0.1], vec![0.2, 0.3]).unwrap();
        let up = Tensor::zeros(&[2, 8]);
        let (g1, g2, gx) = sinc_conv_backward(&up, &x, &p, &w).unwrap();
        assert!(g1.iter().chain(&g2).chain(gx.data()).all(|&v| v == 0.0));
        assert!(matches!(
            sinc_conv_backward(&Tensor::zeros(&[2, 7]), &x, &p, &w),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn activation_examples() {
        assert_eq!(leaky_relu(2.0, 0.2), 2.0);
        assert_eq!(leaky_relu(-2.0, 0.2), -2.0 * 0.2);
        let (normed, _) = layer_norm(&[3.0; 6]);
        assert!(normed.iter().all(|&v| v == 0.0));
        for p in softmax(&[0.0; 7]) {
            assert_abs_diff_eq!(p, 1.0 / 7.0, epsilon = 1e-15);
        }
        let s: f64 = softmax(&[1000.0, -3.0, 2.5, 0.1]).iter().sum();
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn glorot_bounds_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = glorot_init(&[1, 1], &mut rng);
        assert!(v.data()[0].abs() <= 3f64.sqrt());
        let a = glorot_init(&[5, 3, 4], &mut ChaCha8Rng::seed_from_u64(9));
        let b = glorot_init(&[5, 3, 4], &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn glorot_mean_is_zero() {
        // uniform on ±a has standard deviation a/√3
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = glorot_init(&[100_000, 1], &mut rng);
        let bound = (6.0f64 / 100_001.0).sqrt();
        let mean = v.data().iter().sum::<f64>() / v.len() as f64;
        let se = bound / 3f64.sqrt() / (v.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} vs 3se {}", 3.0 * se);
    }

    #[test]
    fn batch_norm_uses_running_stats_in_eval() {
        let mut bn = BatchNorm::new(2);
        let x = t(&[3, 2], &[1.0, 10.0, 2.0, 20.0, 3.0, 30.0]);
        let y = bn.forward(&x, Mode::Train).unwrap();
        let col0: f64 = y.data().iter().step_by(2).sum();
        assert_abs_diff_eq!(col0, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(bn.running_mean.data()[1], 2.0, epsilon = 1e-12);
        let e = bn.forward(&t(&[1, 2], &[2.0, 20.0]), Mode::Eval).unwrap();
        assert!(e.data()[1] > 0.0);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let mut mp = MaxPool::new(2);
        let y = mp.forward(&t(&[1, 1, 5], &[1.0, 3.0, 2.0, 0.0, 9.0]), Mode::Train).unwrap();
        assert_eq!(y.data(), &[3.0, 2.0]);
        let g = mp.backward(&t(&[1, 1, 2], &[1.0, 5.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn dropout_is_identity_in_eval_and_reproducible() {
        let x = t(&[1, 8], &[1.0; 8]);
        let mut d = Dropout::new(0.5, 4);
        assert_eq!(d.forward(&x, Mode::Eval).unwrap(), x);
        let a = d.forward(&x, Mode::Train).unwrap();
        let mut d2 = Dropout::new(0.5, 4);
        assert_eq!(d2.forward(&x, Mode::Train).unwrap(), a);
        assert!(a.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn backward_before_forward_is_a_contract_error() {
        let mut l = LeakyRelu::new(0.2);
        assert!(matches!(l.backward(&Tensor::zeros(&[1, 1])), Err(Error::Contract(_))));
    }
}
