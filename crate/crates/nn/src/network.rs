use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::layers::{Cache, Layer, LayerSpec, LayerState, Mode};
use crate::tensor::Tensor;
use crate::NnError;

/// A feed-forward stack of layers.
///
/// `taps` lists layer indices whose outputs are exposed as intermediate
/// features (for feature matching); gradients w.r.t. those outputs can be
/// injected in [`Network::backward`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    taps: Vec<usize>,
}

/// Per-forward record needed for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    caches: Vec<Cache>,
    taps: Vec<Tensor>,
    output_shape: Vec<usize>,
}

impl Tape {
    /// Outputs of the tapped layers, in tap order.
    pub fn taps(&self) -> &[Tensor] {
        &self.taps
    }

    /// Tapped outputs flattened and concatenated per sample.
    pub fn features(&self) -> Vec<Vec<f64>> {
        let batch = self.taps.first().map(|t| t.batch()).unwrap_or(0);
        (0..batch)
            .map(|i| self.taps.iter().flat_map(|t| t.row(i).iter().copied()).collect())
            .collect()
    }
}

/// Parameter gradients laid out like [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<Vec<f64>>>);

impl Grads {
    pub fn flat(&self) -> Vec<&[f64]> {
        self.0.iter().flatten().map(|g| g.as_slice()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().flatten().flatten().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.0.iter_mut().flatten().flatten() {
            *v *= factor;
        }
    }
}

impl Network {
    pub fn new<R: Rng + ?Sized>(specs: Vec<LayerSpec>, input_shape: Vec<usize>, taps: Vec<usize>, rng: &mut R) -> Result<Self, NnError> {
        let mut shape = input_shape.clone();
        for spec in &specs {
            shape = spec.output_shape(&shape)?;
        }
        if let Some(&bad) = taps.iter().find(|&&t| t >= specs.len()) {
            return Err(NnError::Spec(format!("tap index {bad} beyond {} layers", specs.len())));
        }
        let layers = specs.into_iter().map(|s| Layer::new(s, rng)).collect();
        Ok(Self { layers, input_shape, taps })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let mut shape = self.input_shape.clone();
        for layer in &self.layers {
            shape = layer.spec().output_shape(&shape).expect("validated at construction");
        }
        shape
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    /// Total flattened size of the tapped outputs per sample.
    pub fn feature_len(&self) -> usize {
        let mut shape = self.input_shape.clone();
        let mut total = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer.spec().output_shape(&shape).expect("validated at construction");
            if self.taps.contains(&i) {
                total += shape.iter().product::<usize>();
            }
        }
        total
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().flat_map(|l| l.params()).map(|p| p.len()).sum()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.params()).map(|p| p.as_slice()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut().iter_mut()).collect()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(self.layers.iter().map(|l| l.params().iter().map(|p| vec![0.0; p.len()]).collect()).collect())
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tape), NnError> {
        if x.shape()[1..] != self.input_shape[..] {
            return Err(NnError::Shape(format!(
                "network expects per-sample shape {:?}, got {:?}",
                self.input_shape,
                &x.shape()[1..]
            )));
        }
        if x.batch() == 0 {
            return Err(NnError::Shape("empty batch".into()));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut taps = Vec::with_capacity(self.taps.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, cache) = layer.forward(&h, mode)?;
            caches.push(cache);
            if self.taps.contains(&i) {
                taps.push(y.clone());
            }
            h = y;
        }
        let output_shape = h.shape().to_vec();
        Ok((h, Tape { caches, taps, output_shape }))
    }

    /// Backward pass. `grad_out` is the gradient w.r.t. the network output
    /// (absent = zero); `tap_grads` are gradients w.r.t. the tapped outputs in
    /// tap order (empty = none). Returns the gradient w.r.t. the input.
    pub fn backward(
        &self,
        tape: &Tape,
        grad_out: Option<&Tensor>,
        tap_grads: &[Tensor],
        mut grads: Option<&mut Grads>,
    ) -> Result<Tensor, NnError> {
        if !tap_grads.is_empty() && tap_grads.len() != self.taps.len() {
            return Err(NnError::Shape(format!("{} tap gradients for {} taps", tap_grads.len(), self.taps.len())));
        }
        let start = match grad_out {
            Some(_) => self.layers.len(),
            None => self.taps.iter().max().map(|t| t + 1).unwrap_or(0),
        };
        let mut g = match grad_out {
            Some(g) => {
                if g.shape() != tape.output_shape.as_slice() {
                    return Err(NnError::Shape("output gradient shape mismatch".into()));
                }
                g.clone()
            }
            None if start > 0 => {
                let mut shape = vec![tape.output_shape[0]];
                let mut s = self.input_shape.clone();
                for layer in &self.layers[..start] {
                    s = layer.spec().output_shape(&s)?;
                }
                shape.extend(s);
                Tensor::zeros(shape)
            }
            None => {
                let mut shape = vec![tape.output_shape[0]];
                shape.extend(self.input_shape.iter().copied());
                return Ok(Tensor::zeros(shape));
            }
        };
        for i in (0..start).rev() {
            if let Some(pos) = self.taps.iter().position(|&t| t == i) {
                if let Some(tg) = tap_grads.get(pos) {
                    g.add_assign(tg);
                }
            }
            let layer_grads = grads.as_deref_mut().map(|gr| gr.0[i].as_mut_slice());
            g = self.layers[i].backward(&tape.caches[i], &g, layer_grads)?;
        }
        Ok(g)
    }

    pub fn refresh_spectral(&mut self) {
        for layer in &mut self.layers {
            layer.refresh_spectral();
        }
    }

    pub fn converge_spectral(&mut self, tol: f64, max_iter: usize) {
        for layer in &mut self.layers {
            layer.converge_spectral(tol, max_iter);
        }
    }

    pub fn set_spectral_iterations(&mut self, n_iter: usize) {
        for layer in &mut self.layers {
            layer.set_spectral_iterations(n_iter);
        }
    }

    /// Updates batch-norm running statistics from a training-mode tape.
    pub fn commit_batch_stats(&mut self, tape: &Tape) {
        let batch = tape.output_shape[0];
        let mut shape = self.input_shape.clone();
        for (layer, cache) in self.layers.iter_mut().zip(&tape.caches) {
            let count = batch * shape.get(1).copied().unwrap_or(1);
            layer.commit_batch_stats(cache, count);
            shape = layer.spec().output_shape(&shape).expect("validated at construction");
        }
    }

    /// `(rows, cols, effective weight)` of every spectrally normalized layer.
    pub fn spectral_weights(&self) -> Vec<(usize, usize, Vec<f64>)> {
        self.layers
            .iter()
            .filter(|l| l.spectral_state().is_some())
            .filter_map(|l| {
                let (rows, cols) = l.spec().weight_matrix_dims()?;
                Some((rows, cols, l.effective_weight()?))
            })
            .collect()
    }

    /// Trainable and running state of every layer, without the specs.
    pub fn state(&self) -> Vec<LayerState> {
        self.layers.iter().map(Layer::state).collect()
    }

    /// Restores state captured by [`Network::state`] from an identically
    /// shaped network.
    pub fn load_state(&mut self, state: Vec<LayerState>) -> Result<(), NnError> {
        if state.len() != self.layers.len() {
            return Err(NnError::Shape(format!("{} layer states for {} layers", state.len(), self.layers.len())));
        }
        for (i, (layer, st)) in self.layers.iter_mut().zip(state).enumerate() {
            layer.load_state(st).map_err(|e| NnError::Shape(format!("layer {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l.spec(), LayerSpec::BatchNorm { .. }))
    }
}
