//! Hard-concrete stochastic gates over weight matrices.
//!
//! Each gated weight carries a location parameter `α` (log-odds scale).
//! A gate sample is
//!
//! ```text
//! u ~ U(0, 1)
//! s = sigmoid((ln(u / (1 - u)) + α) / β)
//! m = clamp(s · (hi - lo) + lo, 0, 1)
//! ```
//!
//! with `lo < 0 < 1 < hi`, so `m` hits exactly 0 and exactly 1 with
//! positive probability while staying differentiable in `α` in between.
//! The probability that a gate is non-zero has the closed form
//! `sigmoid(α - β·ln(-lo / hi))`; summed over gates it is the expected L0
//! penalty.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::classifier::ModelState;
use crate::error::{OltError, Result};
use crate::tensor::{sigmoid, Tensor};

/// Hyper-parameters of the gate distribution and the sparsity penalty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateParams {
    /// Temperature of the binary concrete distribution, in (0, 1].
    pub beta: f64,
    pub stretch_lo: f64,
    pub stretch_hi: f64,
    /// Weight of the expected-L0 term.
    pub lambda: f64,
    /// Initial `α` for every gate.
    pub alpha_init: f64,
    /// Layers whose weights are gated; `None` gates every layer.
    pub layer_filter: Option<Vec<String>>,
}

impl Default for GateParams {
    fn default() -> Self {
        GateParams {
            beta: 2.0 / 3.0,
            stretch_lo: -0.1,
            stretch_hi: 1.1,
            lambda: 1e-4,
            alpha_init: 3.0,
            layer_filter: None,
        }
    }
}

impl GateParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.stretch_lo < 0.0 && self.stretch_hi > 1.0) {
            return Err(OltError::InvalidArgument(format!(
                "stretch interval must satisfy lo < 0 < 1 < hi, got ({}, {})",
                self.stretch_lo, self.stretch_hi
            )));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(OltError::InvalidArgument(format!("beta must lie in (0, 1], got {}", self.beta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(OltError::InvalidArgument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !self.alpha_init.is_finite() {
            return Err(OltError::InvalidArgument("alpha_init must be finite".into()));
        }
        Ok(())
    }

    /// `β · ln(-lo / hi)`, the offset inside the open-probability sigmoid.
    pub fn log_ratio_offset(&self) -> f64 {
        self.beta * (-self.stretch_lo / self.stretch_hi).ln()
    }

    /// Gate value for location `alpha` and noise logit `ln(u / (1 - u))`.
    pub fn sample_with_noise(&self, alpha: f64, noise_logit: f64) -> f64 {
        let s = sigmoid((noise_logit + alpha) / self.beta);
        (s * (self.stretch_hi - self.stretch_lo) + self.stretch_lo).clamp(0.0, 1.0)
    }

    /// `P(m ≠ 0)`.
    pub fn open_probability(&self, alpha: f64) -> f64 {
        sigmoid(alpha - self.log_ratio_offset())
    }

    /// Noise-free test-time gate `clamp(sigmoid(α)·(hi - lo) + lo, 0, 1)`.
    pub fn deterministic(&self, alpha: f64) -> f64 {
        (sigmoid(alpha) * (self.stretch_hi - self.stretch_lo) + self.stretch_lo).clamp(0.0, 1.0)
    }

    fn gates_layer(&self, name: &str) -> bool {
        match &self.layer_filter {
            None => true,
            Some(names) => names.iter().any(|n| n == name),
        }
    }
}

/// Draws a noise logit `ln(u / (1 - u))` with `u` kept inside
/// `[ε, 1 - ε]`.
pub fn noise_logit(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.random::<f64>().clamp(f64::EPSILON, 1.0 - f64::EPSILON);
    (u / (1.0 - u)).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatedLayer {
    /// Index into the model's layer list.
    pub index: usize,
    pub name: String,
    pub alpha: Tensor,
}

/// Gate location parameters for the gated layers of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateSet {
    pub params: GateParams,
    pub layers: Vec<GatedLayer>,
}

impl GateSet {
    /// One gate per weight of every layer selected by the filter, all at
    /// `params.alpha_init`.
    pub fn for_model(model: &ModelState, params: GateParams) -> Result<Self> {
        params.validate()?;
        if let Some(filter) = &params.layer_filter {
            let names = model.config.layer_names();
            if let Some(bad) = filter.iter().find(|f| !names.contains(f)) {
                return Err(OltError::InvalidArgument(format!(
                    "layer filter names unknown layer `{bad}` (layers: {names:?})"
                )));
            }
        }
        let layers: Vec<GatedLayer> = model
            .layers()
            .iter()
            .enumerate()
            .filter(|(_, l)| params.gates_layer(&l.name))
            .map(|(index, l)| GatedLayer {
                index,
                name: l.name.clone(),
                alpha: Tensor::full(l.weight.shape(), params.alpha_init),
            })
            .collect();
        if layers.is_empty() {
            return Err(OltError::InvalidArgument("layer filter selects no layers".into()));
        }
        Ok(GateSet { params, layers })
    }

    pub fn num_gates(&self) -> usize {
        self.layers.iter().map(|l| l.alpha.len()).sum()
    }

    /// One reparameterized sample per gate.
    pub fn sample_gates(&self, rng: &mut impl Rng) -> Vec<Tensor> {
        self.layers
            .iter()
            .map(|l| {
                let data = l
                    .alpha
                    .data()
                    .iter()
                    .map(|&a| self.params.sample_with_noise(a, noise_logit(rng)))
                    .collect();
                Tensor::new(l.alpha.shape().to_vec(), data).unwrap()
            })
            .collect()
    }

    /// `Σ P(mᵢ ≠ 0)` over all gates.
    pub fn expected_l0(&self) -> f64 {
        self.gate_open_probability().iter().map(Tensor::sum).sum()
    }

    pub fn gate_open_probability(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .map(|l| l.alpha.map(|a| self.params.open_probability(a)))
            .collect()
    }

    pub fn deterministic_mask(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .map(|l| l.alpha.map(|a| self.params.deterministic(a)))
            .collect()
    }

    /// Per-model-layer multiplicative factors: the deterministic gate for
    /// gated layers, 1 elsewhere.
    pub fn deterministic_factors(&self, model: &ModelState) -> Vec<Tensor> {
        let det = self.deterministic_mask();
        self.expand(model, det)
    }

    /// Binary mask `1[π ≥ μ]` over gated layers, all ones elsewhere.
    pub fn threshold(&self, model: &ModelState, mu: f64) -> Mask {
        let per_gate: Vec<Tensor> = self
            .gate_open_probability()
            .iter()
            .map(|pi| threshold_mask(pi, mu))
            .collect();
        Mask {
            layers: self.expand(model, per_gate),
        }
    }

    fn expand(&self, model: &ModelState, per_gate: Vec<Tensor>) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = model.layers().iter().map(|l| Tensor::ones(l.weight.shape())).collect();
        for (gl, t) in self.layers.iter().zip(per_gate) {
            out[gl.index] = t;
        }
        out
    }

    /// Fraction of gated weights the mask sets to zero.
    pub fn sparsity(&self, mask: &Mask) -> f64 {
        let (zeros, total) = self.layers.iter().fold((0usize, 0usize), |(z, t), gl| {
            let m = &mask.layers()[gl.index];
            (z + m.data().iter().filter(|&&v| v == 0.0).count(), t + m.len())
        });
        zeros as f64 / total as f64
    }

    /// Records one gate sample for a gated layer: `alpha` is the layer's
    /// `α` handle and `noise` holds one noise logit per gate.
    pub fn record_sample(&self, tape: &mut Tape, alpha: Var, noise: &Tensor) -> Result<Var> {
        let p = &self.params;
        let noise = tape.leaf(noise.clone());
        let shifted = tape.add(alpha, noise)?;
        let scaled = tape.affine(shifted, 1.0 / p.beta, 0.0)?;
        let s = tape.sigmoid(scaled)?;
        let stretched = tape.affine(s, p.stretch_hi - p.stretch_lo, p.stretch_lo)?;
        tape.clamp01(stretched)
    }

    /// Records `Σ sigmoid(α - β·ln(-lo/hi))` for one layer's `α` handle.
    pub fn record_expected_l0(&self, tape: &mut Tape, alpha: Var) -> Result<Var> {
        let shifted = tape.affine(alpha, 1.0, -self.params.log_ratio_offset())?;
        let pi = tape.sigmoid(shifted)?;
        tape.sum(pi)
    }
}

/// `Mᵢ = 1 iff πᵢ ≥ μ`.
pub fn threshold_mask(pi: &Tensor, mu: f64) -> Tensor {
    pi.map(|p| if p >= mu { 1.0 } else { 0.0 })
}

/// Binary mask aligned with a model's weight matrices (one tensor per
/// layer). Biases are never masked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    layers: Vec<Tensor>,
}

impl Mask {
    pub fn new(layers: Vec<Tensor>) -> Result<Self> {
        if layers.iter().any(|t| t.data().iter().any(|&v| v != 0.0 && v != 1.0)) {
            return Err(OltError::InvalidArgument("mask entries must be 0 or 1".into()));
        }
        Ok(Mask { layers })
    }

    pub fn ones_like(model: &ModelState) -> Self {
        Mask::from_fn(model, |_, _| 1.0)
    }

    /// Builds a mask from `f(layer_index, flat_weight_index)`.
    pub fn from_fn(model: &ModelState, f: impl Fn(usize, usize) -> f64) -> Self {
        let layers = model
            .layers()
            .iter()
            .enumerate()
            .map(|(li, l)| {
                let data = (0..l.weight.len()).map(|i| f(li, i)).collect();
                Tensor::new(l.weight.shape().to_vec(), data).unwrap()
            })
            .collect();
        Mask { layers }
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn check_aligned(&self, model: &ModelState) -> Result<()> {
        if self.layers.len() != model.layers().len() {
            return Err(OltError::InvalidArgument(format!(
                "mask has {} layers, model has {}",
                self.layers.len(),
                model.layers().len()
            )));
        }
        for (m, l) in self.layers.iter().zip(model.layers()) {
            m.expect_same_shape(&l.weight, "mask")?;
        }
        Ok(())
    }

    /// Name of the first layer whose mask is entirely zero.
    pub fn fully_pruned_layer<'a>(&self, model: &'a ModelState) -> Option<&'a str> {
        self.layers
            .iter()
            .zip(model.layers())
            .find(|(m, _)| m.data().iter().all(|&v| v == 0.0))
            .map(|(_, l)| l.name.as_str())
    }

    pub fn mean(&self) -> f64 {
        let total: usize = self.layers.iter().map(Tensor::len).sum();
        self.layers.iter().map(Tensor::sum).sum::<f64>() / total as f64
    }
}
