use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::spectral::SpectralState;
use crate::tensor::{gemm, Tensor};
use crate::NnError;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Standard deviation of the normal weight initializer.
pub const INIT_STD: f64 = 0.02;
/// Power iterations run once when a spectrally normalized layer is built.
pub const SPECTRAL_WARMUP: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightNorm {
    None,
    Spectral,
}

/// Declarative description of one layer.
///
/// Weight normalization can only be attached to the weight-bearing kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        norm: WeightNorm,
    },
    TransposedConv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        norm: WeightNorm,
    },
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
        norm: WeightNorm,
    },
    BatchNorm {
        channels: usize,
    },
    LeakyRelu {
        slope: f64,
    },
    Relu,
    Sigmoid,
    Tanh,
    /// Per-sample reshape; the batch axis is kept.
    Reshape {
        shape: Vec<usize>,
    },
    /// Mean over the length axis: `[C, L] -> [C]`.
    GlobalAvgPool,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv1d { in_channels, out_channels, kernel, stride, padding, bias: true, norm: WeightNorm::None }
    }

    pub fn transposed(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::TransposedConv1d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            bias: true,
            norm: WeightNorm::None,
        }
    }

    pub fn linear(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Linear { in_features, out_features, bias: true, norm: WeightNorm::None }
    }

    pub fn without_bias(mut self) -> Self {
        match &mut self {
            LayerSpec::Conv1d { bias, .. }
            | LayerSpec::TransposedConv1d { bias, .. }
            | LayerSpec::Linear { bias, .. } => *bias = false,
            _ => {}
        }
        self
    }

    /// Switches on spectral normalization; errors on layers without weights.
    pub fn spectral(mut self) -> Result<Self, NnError> {
        match &mut self {
            LayerSpec::Conv1d { norm, .. }
            | LayerSpec::TransposedConv1d { norm, .. }
            | LayerSpec::Linear { norm, .. } => {
                *norm = WeightNorm::Spectral;
                Ok(self)
            }
            other => Err(NnError::Spec(format!("spectral normalization needs a weight-bearing layer, got {other:?}"))),
        }
    }

    pub fn weight_norm(&self) -> WeightNorm {
        match self {
            LayerSpec::Conv1d { norm, .. }
            | LayerSpec::TransposedConv1d { norm, .. }
            | LayerSpec::Linear { norm, .. } => *norm,
            _ => WeightNorm::None,
        }
    }

    /// Row/column view of the weight used for spectral normalization.
    pub fn weight_matrix_dims(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Conv1d { in_channels, out_channels, kernel, .. } => Some((out_channels, in_channels * kernel)),
            LayerSpec::TransposedConv1d { in_channels, out_channels, kernel, .. } => {
                Some((in_channels, out_channels * kernel))
            }
            LayerSpec::Linear { in_features, out_features, .. } => Some((out_features, in_features)),
            _ => None,
        }
    }

    /// Output per-sample shape for a given input per-sample shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        let bad = || NnError::Shape(format!("{self:?} cannot take per-sample input {input:?}"));
        match *self {
            LayerSpec::Conv1d { in_channels, out_channels, kernel, stride, padding, .. } => {
                let [c, l] = input else { return Err(bad()) };
                if *c != in_channels || l + 2 * padding < kernel || stride == 0 {
                    return Err(bad());
                }
                Ok(vec![out_channels, (l + 2 * padding - kernel) / stride + 1])
            }
            LayerSpec::TransposedConv1d { in_channels, out_channels, kernel, stride, padding, .. } => {
                let [c, l] = input else { return Err(bad()) };
                if *c != in_channels || *l == 0 || (l - 1) * stride + kernel < 2 * padding + 1 {
                    return Err(bad());
                }
                Ok(vec![out_channels, (l - 1) * stride + kernel - 2 * padding])
            }
            LayerSpec::Linear { in_features, out_features, .. } => match input {
                [f] if *f == in_features => Ok(vec![out_features]),
                _ => Err(bad()),
            },
            LayerSpec::BatchNorm { channels } => {
                if input.first() == Some(&channels) && input.len() <= 2 {
                    Ok(input.to_vec())
                } else {
                    Err(bad())
                }
            }
            LayerSpec::Reshape { ref shape } => {
                if shape.iter().product::<usize>() == input.iter().product::<usize>() {
                    Ok(shape.clone())
                } else {
                    Err(bad())
                }
            }
            LayerSpec::GlobalAvgPool => match input {
                [c, l] if *l > 0 => Ok(vec![*c]),
                _ => Err(bad()),
            },
            _ => Ok(input.to_vec()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// A layer with its parameters. `params` holds `[weight, bias]` for
/// weight-bearing layers (bias only when enabled) and `[gamma, beta]` for
/// batch norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    spec: LayerSpec,
    params: Vec<Vec<f64>>,
    spectral: Option<SpectralState>,
    running: Option<RunningStats>,
}

/// Everything about a layer except its spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerState {
    pub params: Vec<Vec<f64>>,
    pub spectral: Option<SpectralState>,
    pub running: Option<RunningStats>,
}

/// Values a layer keeps from its forward pass for the backward pass.
#[derive(Debug, Clone)]
pub enum Cache {
    Conv { cols: Vec<f64>, batch: usize, len_in: usize, len_out: usize, weight: Vec<f64> },
    Transposed { x_mat: Vec<f64>, batch: usize, len_in: usize, len_out: usize, weight: Vec<f64> },
    Linear { input: Vec<f64>, batch: usize, weight: Vec<f64> },
    BatchNorm { normalized: Vec<f64>, inv_std: Vec<f64>, batch_mean: Vec<f64>, batch_var: Vec<f64>, train: bool },
    Input(Tensor),
    Output(Tensor),
    Reshape(Vec<usize>),
}

impl Layer {
    pub fn new<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(rng)).collect() };
        let (params, running) = match spec {
            LayerSpec::Conv1d { in_channels, out_channels, kernel, bias, .. } => {
                let mut p = vec![draw(out_channels * in_channels * kernel)];
                if bias {
                    p.push(vec![0.0; out_channels]);
                }
                (p, None)
            }
            LayerSpec::TransposedConv1d { in_channels, out_channels, kernel, bias, .. } => {
                let mut p = vec![draw(in_channels * out_channels * kernel)];
                if bias {
                    p.push(vec![0.0; out_channels]);
                }
                (p, None)
            }
            LayerSpec::Linear { in_features, out_features, bias, .. } => {
                let mut p = vec![draw(out_features * in_features)];
                if bias {
                    p.push(vec![0.0; out_features]);
                }
                (p, None)
            }
            LayerSpec::BatchNorm { channels } => {
                let gamma = draw(channels).into_iter().map(|v| 1.0 + v).collect();
                (
                    vec![gamma, vec![0.0; channels]],
                    Some(RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels] }),
                )
            }
            _ => (Vec::new(), None),
        };
        let spectral = match (spec.weight_norm(), spec.weight_matrix_dims()) {
            (WeightNorm::Spectral, Some((rows, cols))) => {
                Some(SpectralState::init(&params[0], rows, cols, 1, SPECTRAL_WARMUP, rng))
            }
            _ => None,
        };
        Self { spec, params, spectral, running }
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.params
    }

    pub fn state(&self) -> LayerState {
        LayerState { params: self.params.clone(), spectral: self.spectral.clone(), running: self.running.clone() }
    }

    pub fn load_state(&mut self, state: LayerState) -> Result<(), NnError> {
        let lens = |p: &[Vec<f64>]| p.iter().map(Vec::len).collect::<Vec<_>>();
        if lens(&state.params) != lens(&self.params) {
            return Err(NnError::Shape(format!("parameter sizes {:?}, expected {:?}", lens(&state.params), lens(&self.params))));
        }
        if state.spectral.is_some() != self.spectral.is_some() || state.running.is_some() != self.running.is_some() {
            return Err(NnError::Shape("normalization state does not match the layer kind".into()));
        }
        self.params = state.params;
        self.spectral = state.spectral;
        self.running = state.running;
        Ok(())
    }

    pub fn spectral_state(&self) -> Option<&SpectralState> {
        self.spectral.as_ref()
    }

    pub fn running_stats(&self) -> Option<&RunningStats> {
        self.running.as_ref()
    }

    /// The weight the forward pass actually uses (normalized when spectral).
    pub fn effective_weight(&self) -> Option<Vec<f64>> {
        let w = self.params.first()?;
        match (&self.spectral, self.spec.weight_matrix_dims()) {
            (Some(sn), Some((rows, cols))) => {
                let sigma = sn.sigma(w, rows, cols);
                Some(w.iter().map(|v| v / sigma).collect())
            }
            (None, Some(_)) => Some(w.clone()),
            _ => None,
        }
    }

    /// One round of power iteration for spectrally normalized layers.
    pub fn refresh_spectral(&mut self) {
        if let (Some(sn), Some((rows, cols))) = (&mut self.spectral, self.spec.weight_matrix_dims()) {
            sn.refresh(&self.params[0], rows, cols);
        }
    }

    /// Power-iterates to tolerance; see [`SpectralState::converge`].
    pub fn converge_spectral(&mut self, tol: f64, max_iter: usize) -> usize {
        match (&mut self.spectral, self.spec.weight_matrix_dims()) {
            (Some(sn), Some((rows, cols))) => sn.converge(&self.params[0], rows, cols, tol, max_iter),
            _ => 0,
        }
    }

    pub fn set_spectral_iterations(&mut self, n_iter: usize) {
        if let Some(sn) = &mut self.spectral {
            sn.n_iter = n_iter;
        }
    }

    /// Folds the batch statistics of a training forward pass into the
    /// running estimates.
    pub fn commit_batch_stats(&mut self, cache: &Cache, count: usize) {
        if let (Some(running), Cache::BatchNorm { batch_mean, batch_var, train: true, .. }) = (&mut self.running, cache) {
            let unbias = if count > 1 { count as f64 / (count as f64 - 1.0) } else { 1.0 };
            for c in 0..running.mean.len() {
                running.mean[c] = (1.0 - BN_MOMENTUM) * running.mean[c] + BN_MOMENTUM * batch_mean[c];
                running.var[c] = (1.0 - BN_MOMENTUM) * running.var[c] + BN_MOMENTUM * batch_var[c] * unbias;
            }
        }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Cache), NnError> {
        let n = x.batch();
        let out_shape = self.spec.output_shape(&x.shape()[1..])?;
        match self.spec {
            LayerSpec::Conv1d { in_channels, out_channels, kernel, stride, padding, .. } => {
                let len_in = x.shape()[2];
                let len_out = out_shape[1];
                let weight = self.effective_weight().expect("conv has weight");
                let nl = n * len_out;
                let ck = in_channels * kernel;
                let mut cols = vec![0.0; ck * nl];
                let xd = x.data();
                for ci in 0..in_channels {
                    for ki in 0..kernel {
                        let row = &mut cols[(ci * kernel + ki) * nl..(ci * kernel + ki + 1) * nl];
                        for ni in 0..n {
                            let src = &xd[(ni * in_channels + ci) * len_in..(ni * in_channels + ci + 1) * len_in];
                            for t in 0..len_out {
                                let pos = (t * stride + ki) as isize - padding as isize;
                                if pos >= 0 && (pos as usize) < len_in {
                                    row[ni * len_out + t] = src[pos as usize];
                                }
                            }
                        }
                    }
                }
                let mut out_mat = vec![0.0; out_channels * nl];
                gemm(out_channels, ck, nl, 1.0, &weight, false, &cols, false, 0.0, &mut out_mat);
                let mut out = vec![0.0; n * out_channels * len_out];
                let bias = self.params.get(1);
                for oi in 0..out_channels {
                    let b = bias.map(|b| b[oi]).unwrap_or(0.0);
                    for ni in 0..n {
                        let dst = &mut out[(ni * out_channels + oi) * len_out..(ni * out_channels + oi + 1) * len_out];
                        let src = &out_mat[oi * nl + ni * len_out..oi * nl + (ni + 1) * len_out];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = s + b;
                        }
                    }
                }
                let y = Tensor::new(vec![n, out_channels, len_out], out)?;
                Ok((y, Cache::Conv { cols, batch: n, len_in, len_out, weight }))
            }
            LayerSpec::TransposedConv1d { in_channels, out_channels, kernel, stride, padding, .. } => {
                let len_in = x.shape()[2];
                let len_out = out_shape[1];
                let weight = self.effective_weight().expect("transposed conv has weight");
                let nl = n * len_in;
                let mut x_mat = vec![0.0; in_channels * nl];
                for ni in 0..n {
                    for ci in 0..in_channels {
                        let src = &x.data()[(ni * in_channels + ci) * len_in..(ni * in_channels + ci + 1) * len_in];
                        x_mat[ci * nl + ni * len_in..ci * nl + (ni + 1) * len_in].copy_from_slice(src);
                    }
                }
                let ok = out_channels * kernel;
                let mut cols = vec![0.0; ok * nl];
                gemm(ok, in_channels, nl, 1.0, &weight, true, &x_mat, false, 0.0, &mut cols);
                let mut out = vec![0.0; n * out_channels * len_out];
                for oi in 0..out_channels {
                    for ki in 0..kernel {
                        let row = &cols[(oi * kernel + ki) * nl..(oi * kernel + ki + 1) * nl];
                        for ni in 0..n {
                            let dst = &mut out[(ni * out_channels + oi) * len_out..(ni * out_channels + oi + 1) * len_out];
                            for i in 0..len_in {
                                let pos = (i * stride + ki) as isize - padding as isize;
                                if pos >= 0 && (pos as usize) < len_out {
                                    dst[pos as usize] += row[ni * len_in + i];
                                }
                            }
                        }
                    }
                }
                if let Some(bias) = self.params.get(1) {
                    for ni in 0..n {
                        for oi in 0..out_channels {
                            for v in &mut out[(ni * out_channels + oi) * len_out..(ni * out_channels + oi + 1) * len_out] {
                                *v += bias[oi];
                            }
                        }
                    }
                }
                let y = Tensor::new(vec![n, out_channels, len_out], out)?;
                Ok((y, Cache::Transposed { x_mat, batch: n, len_in, len_out, weight }))
            }
            LayerSpec::Linear { in_features, out_features, .. } => {
                let weight = self.effective_weight().expect("linear has weight");
                let mut out = vec![0.0; n * out_features];
                if let Some(bias) = self.params.get(1) {
                    for row in out.chunks_mut(out_features) {
                        row.copy_from_slice(bias);
                    }
                }
                gemm(n, in_features, out_features, 1.0, x.data(), false, &weight, true, 1.0, &mut out);
                let y = Tensor::new(vec![n, out_features], out)?;
                Ok((y, Cache::Linear { input: x.data().to_vec(), batch: n, weight }))
            }
            LayerSpec::BatchNorm { channels } => {
                let len = if x.shape().len() == 3 { x.shape()[2] } else { 1 };
                let count = (n * len) as f64;
                let xd = x.data();
                let (gamma, beta) = (&self.params[0], &self.params[1]);
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                if mode == Mode::Train {
                    if n * len < 2 {
                        return Err(NnError::Shape("batch norm needs at least two values per channel in training".into()));
                    }
                    for c in 0..channels {
                        let mut s = 0.0;
                        for ni in 0..n {
                            s += xd[(ni * channels + c) * len..(ni * channels + c + 1) * len].iter().sum::<f64>();
                        }
                        mean[c] = s / count;
                        let mut ss = 0.0;
                        for ni in 0..n {
                            for v in &xd[(ni * channels + c) * len..(ni * channels + c + 1) * len] {
                                ss += (v - mean[c]) * (v - mean[c]);
                            }
                        }
                        var[c] = ss / count;
                    }
                } else {
                    let running = self.running.as_ref().expect("batch norm keeps running stats");
                    mean.clone_from(&running.mean);
                    var.clone_from(&running.var);
                }
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let mut normalized = vec![0.0; xd.len()];
                let mut out = vec![0.0; xd.len()];
                for ni in 0..n {
                    for c in 0..channels {
                        let base = (ni * channels + c) * len;
                        for t in 0..len {
                            let h = (xd[base + t] - mean[c]) * inv_std[c];
                            normalized[base + t] = h;
                            out[base + t] = gamma[c] * h + beta[c];
                        }
                    }
                }
                let y = Tensor::new(x.shape().to_vec(), out)?;
                Ok((
                    y,
                    Cache::BatchNorm {
                        normalized,
                        inv_std,
                        batch_mean: mean,
                        batch_var: var,
                        train: mode == Mode::Train,
                    },
                ))
            }
            LayerSpec::LeakyRelu { slope } => {
                Ok((x.map(|v| if v > 0.0 { v } else { slope * v }), Cache::Input(x.clone())))
            }
            LayerSpec::Relu => Ok((x.map(|v| v.max(0.0)), Cache::Input(x.clone()))),
            LayerSpec::Sigmoid => {
                let y = x.map(sigmoid);
                Ok((y.clone(), Cache::Output(y)))
            }
            LayerSpec::Tanh => {
                let y = x.map(f64::tanh);
                Ok((y.clone(), Cache::Output(y)))
            }
            LayerSpec::Reshape { ref shape } => {
                let mut full = vec![n];
                full.extend_from_slice(shape);
                Ok((x.clone().reshape(full)?, Cache::Reshape(x.shape().to_vec())))
            }
            LayerSpec::GlobalAvgPool => {
                let &[_, c, l] = x.shape() else {
                    return Err(NnError::Shape(format!("global pooling needs [N, C, L], got {:?}", x.shape())));
                };
                let pooled = x.data().chunks(l).map(|row| row.iter().sum::<f64>() / l as f64).collect();
                Ok((Tensor::new(vec![n, c], pooled)?, Cache::Reshape(x.shape().to_vec())))
            }
        }
    }

    /// Propagates `grad` (w.r.t. this layer's output) to the input.
    /// Parameter gradients are accumulated into `grads` when given.
    pub fn backward(&self, cache: &Cache, grad: &Tensor, grads: Option<&mut [Vec<f64>]>) -> Result<Tensor, NnError> {
        let gd = grad.data();
        match (&self.spec, cache) {
            (
                &LayerSpec::Conv1d { in_channels, out_channels, kernel, stride, padding, .. },
                Cache::Conv { cols, batch, len_in, len_out, weight },
            ) => {
                let (n, len_in, len_out) = (*batch, *len_in, *len_out);
                let nl = n * len_out;
                let ck = in_channels * kernel;
                let mut g_mat = vec![0.0; out_channels * nl];
                for ni in 0..n {
                    for oi in 0..out_channels {
                        g_mat[oi * nl + ni * len_out..oi * nl + (ni + 1) * len_out]
                            .copy_from_slice(&gd[(ni * out_channels + oi) * len_out..(ni * out_channels + oi + 1) * len_out]);
                    }
                }
                if let Some(grads) = grads {
                    let mut dw = vec![0.0; out_channels * ck];
                    gemm(out_channels, nl, ck, 1.0, &g_mat, false, cols, true, 0.0, &mut dw);
                    self.accumulate_weight_grad(&mut grads[0], dw);
                    if grads.len() > 1 {
                        for oi in 0..out_channels {
                            grads[1][oi] += g_mat[oi * nl..(oi + 1) * nl].iter().sum::<f64>();
                        }
                    }
                }
                let mut dcols = vec![0.0; ck * nl];
                gemm(ck, out_channels, nl, 1.0, weight, true, &g_mat, false, 0.0, &mut dcols);
                let mut dx = vec![0.0; n * in_channels * len_in];
                for ci in 0..in_channels {
                    for ki in 0..kernel {
                        let row = &dcols[(ci * kernel + ki) * nl..(ci * kernel + ki + 1) * nl];
                        for ni in 0..n {
                            let dst = &mut dx[(ni * in_channels + ci) * len_in..(ni * in_channels + ci + 1) * len_in];
                            for t in 0..len_out {
                                let pos = (t * stride + ki) as isize - padding as isize;
                                if pos >= 0 && (pos as usize) < len_in {
                                    dst[pos as usize] += row[ni * len_out + t];
                                }
                            }
                        }
                    }
                }
                Tensor::new(vec![n, in_channels, len_in], dx)
            }
            (
                &LayerSpec::TransposedConv1d { in_channels, out_channels, kernel, stride, padding, .. },
                Cache::Transposed { x_mat, batch, len_in, len_out, weight },
            ) => {
                let (n, len_in, len_out) = (*batch, *len_in, *len_out);
                let nl = n * len_in;
                let ok = out_channels * kernel;
                let mut dcols = vec![0.0; ok * nl];
                for oi in 0..out_channels {
                    for ki in 0..kernel {
                        let row = &mut dcols[(oi * kernel + ki) * nl..(oi * kernel + ki + 1) * nl];
                        for ni in 0..n {
                            let src = &gd[(ni * out_channels + oi) * len_out..(ni * out_channels + oi + 1) * len_out];
                            for i in 0..len_in {
                                let pos = (i * stride + ki) as isize - padding as isize;
                                if pos >= 0 && (pos as usize) < len_out {
                                    row[ni * len_in + i] = src[pos as usize];
                                }
                            }
                        }
                    }
                }
                if let Some(grads) = grads {
                    let mut dw = vec![0.0; in_channels * ok];
                    gemm(in_channels, nl, ok, 1.0, x_mat, false, &dcols, true, 0.0, &mut dw);
                    self.accumulate_weight_grad(&mut grads[0], dw);
                    if grads.len() > 1 {
                        for ni in 0..n {
                            for oi in 0..out_channels {
                                grads[1][oi] +=
                                    gd[(ni * out_channels + oi) * len_out..(ni * out_channels + oi + 1) * len_out].iter().sum::<f64>();
                            }
                        }
                    }
                }
                let mut dx_mat = vec![0.0; in_channels * nl];
                gemm(in_channels, ok, nl, 1.0, weight, false, &dcols, false, 0.0, &mut dx_mat);
                let mut dx = vec![0.0; n * in_channels * len_in];
                for ni in 0..n {
                    for ci in 0..in_channels {
                        dx[(ni * in_channels + ci) * len_in..(ni * in_channels + ci + 1) * len_in]
                            .copy_from_slice(&dx_mat[ci * nl + ni * len_in..ci * nl + (ni + 1) * len_in]);
                    }
                }
                Tensor::new(vec![n, in_channels, len_in], dx)
            }
            (&LayerSpec::Linear { in_features, out_features, .. }, Cache::Linear { input, batch, weight }) => {
                let n = *batch;
                if let Some(grads) = grads {
                    let mut dw = vec![0.0; out_features * in_features];
                    gemm(out_features, n, in_features, 1.0, gd, true, input, false, 0.0, &mut dw);
                    self.accumulate_weight_grad(&mut grads[0], dw);
                    if grads.len() > 1 {
                        for row in gd.chunks(out_features) {
                            for (b, g) in grads[1].iter_mut().zip(row) {
                                *b += g;
                            }
                        }
                    }
                }
                let mut dx = vec![0.0; n * in_features];
                gemm(n, out_features, in_features, 1.0, gd, false, weight, false, 0.0, &mut dx);
                Tensor::new(vec![n, in_features], dx)
            }
            (&LayerSpec::BatchNorm { channels }, Cache::BatchNorm { normalized, inv_std, train, .. }) => {
                let n = grad.batch();
                let len = if grad.shape().len() == 3 { grad.shape()[2] } else { 1 };
                let count = (n * len) as f64;
                let gamma = &self.params[0];
                let mut sum_g = vec![0.0; channels];
                let mut sum_gh = vec![0.0; channels];
                for ni in 0..n {
                    for c in 0..channels {
                        let base = (ni * channels + c) * len;
                        for t in 0..len {
                            sum_g[c] += gd[base + t];
                            sum_gh[c] += gd[base + t] * normalized[base + t];
                        }
                    }
                }
                if let Some(grads) = grads {
                    for c in 0..channels {
                        grads[0][c] += sum_gh[c];
                        grads[1][c] += sum_g[c];
                    }
                }
                let mut dx = vec![0.0; gd.len()];
                for ni in 0..n {
                    for c in 0..channels {
                        let base = (ni * channels + c) * len;
                        let scale = gamma[c] * inv_std[c];
                        for t in 0..len {
                            dx[base + t] = if *train {
                                scale * (gd[base + t] - sum_g[c] / count - normalized[base + t] * sum_gh[c] / count)
                            } else {
                                scale * gd[base + t]
                            };
                        }
                    }
                }
                Tensor::new(grad.shape().to_vec(), dx)
            }
            (&LayerSpec::LeakyRelu { slope }, Cache::Input(x)) => {
                let dx = x.data().iter().zip(gd).map(|(&v, &g)| if v > 0.0 { g } else { slope * g }).collect();
                Tensor::new(x.shape().to_vec(), dx)
            }
            (LayerSpec::Relu, Cache::Input(x)) => {
                let dx = x.data().iter().zip(gd).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
                Tensor::new(x.shape().to_vec(), dx)
            }
            (LayerSpec::Sigmoid, Cache::Output(y)) => {
                let dx = y.data().iter().zip(gd).map(|(&s, &g)| g * s * (1.0 - s)).collect();
                Tensor::new(y.shape().to_vec(), dx)
            }
            (LayerSpec::Tanh, Cache::Output(y)) => {
                let dx = y.data().iter().zip(gd).map(|(&t, &g)| g * (1.0 - t * t)).collect();
                Tensor::new(y.shape().to_vec(), dx)
            }
            (LayerSpec::Reshape { .. }, Cache::Reshape(shape)) => grad.clone().reshape(shape.clone()),
            (LayerSpec::GlobalAvgPool, Cache::Reshape(shape)) => {
                let l = shape[2];
                let dx = gd.iter().flat_map(|&g| std::iter::repeat_n(g / l as f64, l)).collect();
                Tensor::new(shape.clone(), dx)
            }
            (spec, _) => Err(NnError::Shape(format!("cache does not belong to {spec:?}"))),
        }
    }

    fn accumulate_weight_grad(&self, acc: &mut [f64], dw_effective: Vec<f64>) {
        let dw = match (&self.spectral, self.spec.weight_matrix_dims()) {
            (Some(sn), Some((rows, cols))) => sn.backward(&self.params[0], &dw_effective, rows, cols),
            _ => dw_effective,
        };
        for (a, d) in acc.iter_mut().zip(dw) {
            *a += d;
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spectral_flag_rejected_on_activation() {
        assert!(LayerSpec::Relu.spectral().is_err());
        assert!(LayerSpec::BatchNorm { channels: 3 }.spectral().is_err());
        assert!(LayerSpec::conv(1, 2, 3, 1, 0).spectral().is_ok());
    }

    #[test]
    fn conv_output_lengths() {
        let spec = LayerSpec::conv(1, 16, 4, 2, 1);
        assert_eq!(spec.output_shape(&[1, 160]).unwrap(), vec![16, 80]);
        let up = LayerSpec::transposed(16, 1, 4, 2, 1);
        assert_eq!(up.output_shape(&[16, 80]).unwrap(), vec![1, 160]);
        assert!(spec.output_shape(&[2, 160]).is_err());
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = Layer::new(LayerSpec::conv(2, 3, 3, 2, 1), &mut rng);
        let x: Vec<f64> = (0..2 * 2 * 7).map(|i| (i as f64 * 0.3).sin()).collect();
        let x = Tensor::new(vec![2, 2, 7], x).unwrap();
        let (y, _) = layer.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[2, 3, 4]);
        let w = &layer.params()[0];
        for n in 0..2 {
            for o in 0..3 {
                for t in 0..4 {
                    let mut s = 0.0;
                    for c in 0..2 {
                        for k in 0..3 {
                            let pos = (t * 2 + k) as isize - 1;
                            if (0..7).contains(&pos) {
                                s += w[(o * 2 + c) * 3 + k] * x.data()[(n * 2 + c) * 7 + pos as usize];
                            }
                        }
                    }
                    assert!((y.data()[(n * 3 + o) * 4 + t] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv^T(y)> when both share the same weights
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let conv = Layer::new(LayerSpec::conv(2, 3, 4, 2, 1).without_bias(), &mut rng);
        let mut up = Layer::new(LayerSpec::transposed(3, 2, 4, 2, 1).without_bias(), &mut rng);
        up.params_mut()[0].clone_from(&conv.params()[0]);
        let x = Tensor::new(vec![1, 2, 8], (0..16).map(|i| (i as f64).cos()).collect()).unwrap();
        let y = Tensor::new(vec![1, 3, 4], (0..12).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        let (cx, _) = conv.forward(&x, Mode::Eval).unwrap();
        let (ty, _) = up.forward(&y, Mode::Eval).unwrap();
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_train_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut layer = Layer::new(LayerSpec::BatchNorm { channels: 2 }, &mut rng);
        layer.params_mut()[0] = vec![1.0, 1.0];
        let x = Tensor::new(vec![3, 2, 2], vec![1.0, 2.0, 5.0, 5.0, 3.0, 4.0, 6.0, 8.0, 5.0, 6.0, 1.0, 0.0]).unwrap();
        let (y, cache) = layer.forward(&x, Mode::Train).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|n| y.data()[(n * 2 + c) * 2..(n * 2 + c) * 2 + 2].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-12);
        }
        layer.commit_batch_stats(&cache, 6);
        let running = layer.running_stats().unwrap();
        assert!((running.mean[0] - 0.1 * 3.5).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
