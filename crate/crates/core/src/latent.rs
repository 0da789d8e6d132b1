//! Latent refinement, interpolation grids and latent statistics over training.

use std::path::Path;

use anodae_nn::{Mode, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{CoreError, Result};
use crate::model::{ModelState, OutputActivation};
use crate::scoring::{l2_norm, latent_means};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub max_steps: usize,
    /// Stop once the reconstruction loss falls below this.
    pub eps: f64,
    pub lr: f64,
    pub backtracking: bool,
    pub max_halvings: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { max_steps: 500, eps: 1e-4, lr: 0.1, backtracking: true, max_halvings: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    /// `z` after each accepted step, starting with the encoder mean.
    pub z_history: Vec<Vec<f64>>,
    pub losses: Vec<f64>,
    pub path_length: f64,
    pub converged: bool,
    /// No step size within the halving budget reduced the loss.
    pub stalled: bool,
    pub steps: usize,
}

impl RefinementTrace {
    pub fn z0(&self) -> &[f64] {
        &self.z_history[0]
    }

    pub fn z_final(&self) -> &[f64] {
        self.z_history.last().expect("trace holds z0")
    }
}

/// Scale from model-space to unit-range squared error.
fn unit_scale(model: &ModelState) -> f64 {
    match model.variant.output() {
        OutputActivation::Sigmoid => 1.0,
        OutputActivation::Tanh => 0.25,
    }
}

fn latent_tensor(z: &[f64]) -> Result<Tensor> {
    Ok(Tensor::new(vec![1, z.len()], z.to_vec())?)
}

/// Unit-range reconstruction MSE of `x` at `z`, with its gradient in `z`.
fn loss_and_grad(model: &ModelState, x_model: &Tensor, z: &[f64], with_grad: bool) -> Result<(f64, Vec<f64>)> {
    let (x_hat, tape) = model.decoder.forward(&latent_tensor(z)?, Mode::Eval)?;
    let n = x_hat.data().len() as f64;
    let scale = unit_scale(model);
    let diff: Vec<f64> = x_hat.data().iter().zip(x_model.data()).map(|(a, b)| a - b).collect();
    let loss = scale * diff.iter().map(|d| d * d).sum::<f64>() / n;
    if !with_grad {
        return Ok((loss, Vec::new()));
    }
    let g_out = Tensor::new(x_hat.shape().to_vec(), diff.iter().map(|d| 2.0 * scale * d / n).collect())?;
    let g_in = model.decoder.backward(&tape, Some(&g_out), &[], None)?;
    Ok((loss, g_in.into_data()))
}

/// Gradient descent on the reconstruction loss in latent space, starting
/// from the posterior mean.
pub fn refine_latent(model: &ModelState, x: &[f64], config: &RefineConfig) -> Result<RefinementTrace> {
    if !(config.lr >= 0.0 && config.eps > 0.0) {
        return Err(CoreError::contract("refinement needs lr >= 0 and eps > 0"));
    }
    let x_model = model.batch_tensor(&[x])?;
    let z0 = model.encode(&x_model, Mode::Eval)?.mu.into_data();
    let (mut loss, _) = loss_and_grad(model, &x_model, &z0, false)?;
    let mut trace = RefinementTrace {
        z_history: vec![z0],
        losses: vec![loss],
        path_length: 0.0,
        converged: loss < config.eps,
        stalled: false,
        steps: 0,
    };
    while !trace.converged && trace.steps < config.max_steps {
        let z = trace.z_final().to_vec();
        let (_, g) = loss_and_grad(model, &x_model, &z, true)?;
        let mut step = config.lr;
        let mut accepted = None;
        for _ in 0..=config.max_halvings {
            let cand: Vec<f64> = z.iter().zip(&g).map(|(a, b)| a - step * b).collect();
            let (l, _) = loss_and_grad(model, &x_model, &cand, false)?;
            if !config.backtracking || l <= loss {
                accepted = Some((cand, l));
                break;
            }
            step /= 2.0;
        }
        let Some((next, l)) = accepted else {
            trace.stalled = true;
            break;
        };
        if !l.is_finite() {
            trace.stalled = true;
            break;
        }
        trace.path_length += z.iter().zip(&next).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        trace.z_history.push(next);
        trace.losses.push(l);
        trace.steps += 1;
        loss = l;
        trace.converged = loss < config.eps;
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub dim: usize,
    /// Offsets `-radius..=radius`, the middle one 0.
    pub ts: Vec<f64>,
    pub sequences: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationGrid {
    pub z0: Vec<f64>,
    pub radius: f64,
    pub steps_per_side: usize,
    pub rows: Vec<GridRow>,
}

/// Decodes `z0 + t e_dim` for `t = radius * j / steps_per_side`,
/// `j = -steps_per_side..=steps_per_side`, for each requested dimension.
pub fn interpolation_grid(model: &ModelState, x: &[f64], dims: &[usize], radius: f64, steps_per_side: usize) -> Result<InterpolationGrid> {
    let latent = model.latent_dim();
    if let Some(&d) = dims.iter().find(|&&d| d >= latent) {
        return Err(CoreError::contract(format!("latent dimension {d} out of range 0..{latent}")));
    }
    if !(radius >= 0.0 && radius.is_finite()) || steps_per_side == 0 {
        return Err(CoreError::contract("interpolation needs radius >= 0 and steps_per_side >= 1"));
    }
    let z0 = model.encode(&model.batch_tensor(&[x])?, Mode::Eval)?.mu.into_data();
    let s = steps_per_side as isize;
    let ts: Vec<f64> = (-s..=s).map(|j| radius * j as f64 / s as f64).collect();
    let mut rows = Vec::with_capacity(dims.len());
    for &dim in dims {
        let mut zs = Vec::with_capacity(ts.len() * latent);
        for &t in &ts {
            let mut z = z0.clone();
            z[dim] += t;
            zs.extend(z);
        }
        let out = model.decode(&Tensor::new(vec![ts.len(), latent], zs)?, Mode::Eval)?;
        let sequences = out
            .rows()
            .map(|r| match model.variant.output() {
                OutputActivation::Sigmoid => r.to_vec(),
                OutputActivation::Tanh => r.iter().map(|v| (v + 1.0) / 2.0).collect(),
            })
            .collect();
        rows.push(GridRow { dim, ts: ts.clone(), sequences });
    }
    Ok(InterpolationGrid { z0, radius, steps_per_side, rows })
}

impl InterpolationGrid {
    /// Rows of `dim, t, v_0, ..., v_{L-1}`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        let seq_len = self.rows.first().and_then(|r| r.sequences.first()).map_or(0, Vec::len);
        let mut header = vec!["dim".to_string(), "t".to_string()];
        header.extend((0..seq_len).map(|i| format!("v{i}")));
        w.write_record(&header)?;
        for row in &self.rows {
            for (t, seq) in row.ts.iter().zip(&row.sequences) {
                let mut rec = vec![row.dim.to_string(), t.to_string()];
                rec.extend(seq.iter().map(f64::to_string));
                w.write_record(&rec)?;
            }
        }
        w.flush().map_err(|e| CoreError::io(path.as_ref(), e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentExtrema {
    pub epoch: usize,
    pub max_abs: f64,
    pub mean_norm: f64,
    pub std_norm: f64,
}

pub fn latent_extrema(epoch: usize, latents: &[Vec<f64>]) -> LatentExtrema {
    let max_abs = latents.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let norms: Vec<f64> = latents.iter().map(|z| l2_norm(z)).collect();
    let n = norms.len().max(1) as f64;
    let mean = norms.iter().sum::<f64>() / n;
    let var = norms.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    LatentExtrema { epoch, max_abs, mean_norm: mean, std_norm: var.sqrt() }
}

/// Latent statistics of `dataset` under each `(epoch, model)` snapshot.
pub fn latent_extrema_trace(checkpoints: &[(usize, ModelState)], dataset: &Dataset) -> Result<Vec<LatentExtrema>> {
    if checkpoints.is_empty() {
        return Err(CoreError::contract("latent trace needs at least one checkpoint"));
    }
    checkpoints.iter().map(|(epoch, m)| Ok(latent_extrema(*epoch, &latent_means(m, dataset)?))).collect()
}

pub fn write_extrema_csv(path: impl AsRef<Path>, rows: &[LatentExtrema]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CoreError::io(path.as_ref(), e))
}
