//! Post-hoc OOD scoring functions and the accept/reject rule.
//!
//! All scores are oriented so that larger means more in-domain: entropy
//! and energy are negated relative to their textbook definitions.

mod mahalanobis;
pub mod theorem;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::classifier::{LabeledData, ModelState};
use crate::error::{OltError, Result};
use crate::tensor::{argmax, log_sum_exp, softmax, Tensor};

pub use mahalanobis::{MahalanobisModel, DEFAULT_COV_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    Msp,
    Maxlogit,
    Energy,
    Entropy,
    TempMsp,
    Odin,
    Mahalanobis,
    React,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 8] = [
        ScoreKind::Msp,
        ScoreKind::Maxlogit,
        ScoreKind::Energy,
        ScoreKind::Entropy,
        ScoreKind::TempMsp,
        ScoreKind::Odin,
        ScoreKind::Mahalanobis,
        ScoreKind::React,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Msp => "msp",
            ScoreKind::Maxlogit => "maxlogit",
            ScoreKind::Energy => "energy",
            ScoreKind::Entropy => "entropy",
            ScoreKind::TempMsp => "temp-msp",
            ScoreKind::Odin => "odin",
            ScoreKind::Mahalanobis => "mahalanobis",
            ScoreKind::React => "react",
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreKind {
    type Err = OltError;

    fn from_str(s: &str) -> Result<Self> {
        ScoreKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| OltError::UnknownScorer(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoringSpec {
    pub kind: ScoreKind,
    /// Softmax temperature for temp-msp and odin, energy temperature for
    /// energy and react.
    pub temperature: f64,
    /// ODIN input perturbation magnitude.
    pub epsilon: f64,
    /// ReAct clipping percentile of training activations.
    pub clip_percentile: f64,
}

impl ScoringSpec {
    pub fn new(kind: ScoreKind) -> Self {
        ScoringSpec {
            kind,
            temperature: 1.0,
            epsilon: 1e-3,
            clip_percentile: 90.0,
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(OltError::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(OltError::InvalidArgument(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.clip_percentile > 0.0 && self.clip_percentile <= 100.0) {
            return Err(OltError::InvalidArgument(format!(
                "clip percentile must lie in (0, 100], got {}",
                self.clip_percentile
            )));
        }
        Ok(())
    }

    /// Temperature at which this scorer's softmax confidence is read.
    pub fn confidence_temperature(&self) -> f64 {
        match self.kind {
            ScoreKind::TempMsp => self.temperature,
            _ => 1.0,
        }
    }
}

/// `exp(φᵢ/T) / Σⱼ exp(φⱼ/T)`, max-subtracted.
pub fn temp_scaled_softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(OltError::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    Ok(softmax(&scaled))
}

pub fn msp(logits: &[f64]) -> f64 {
    softmax(logits).into_iter().fold(0.0, f64::max)
}

pub fn temp_msp(logits: &[f64], temperature: f64) -> f64 {
    let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    softmax(&scaled).into_iter().fold(0.0, f64::max)
}

pub fn max_logit(logits: &[f64]) -> f64 {
    logits.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Negative free energy `T · logsumexp(φ / T)`.
pub fn energy_score(logits: &[f64], temperature: f64) -> f64 {
    let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    temperature * log_sum_exp(&scaled)
}

/// `Σ pᵢ ln pᵢ`, the negated softmax entropy.
pub fn neg_entropy(logits: &[f64]) -> f64 {
    softmax(logits)
        .into_iter()
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Ood,
    Class(usize),
}

/// OOD when `score < threshold`, otherwise the arg-max class.
pub fn decide(score: f64, threshold: f64, logits: &[f64]) -> Decision {
    if score < threshold {
        Decision::Ood
    } else {
        Decision::Class(argmax(logits))
    }
}

/// `p`-th percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Artifacts fitted on IND training data for feature-space scorers.
#[derive(Clone, Debug, Default)]
pub struct Auxiliary {
    pub mahalanobis: Option<MahalanobisModel>,
    pub react_clip: Option<f64>,
}

impl Auxiliary {
    pub fn fit(model: &ModelState, train: &LabeledData, clip_percentile: f64) -> Result<Self> {
        Ok(Auxiliary {
            mahalanobis: Some(fit_mahalanobis(model, train, DEFAULT_COV_EPS)?),
            react_clip: Some(react_clip_threshold(model, train, clip_percentile)?),
        })
    }
}

pub fn fit_mahalanobis(model: &ModelState, train: &LabeledData, cov_eps: f64) -> Result<MahalanobisModel> {
    let out = model.forward_batch(&train.features, None)?;
    MahalanobisModel::fit(&out.penultimate, &train.labels, model.num_classes(), cov_eps)
}

/// The `p`-th percentile of all penultimate activations on `train`.
pub fn react_clip_threshold(model: &ModelState, train: &LabeledData, p: f64) -> Result<f64> {
    let out = model.forward_batch(&train.features, None)?;
    Ok(percentile(out.penultimate.data(), p))
}

/// Scores for every row of `features`.
pub fn score_batch(spec: &ScoringSpec, model: &ModelState, aux: &Auxiliary, features: &Tensor) -> Result<Vec<f64>> {
    spec.validate()?;
    let (n, _) = features.dims2("score")?;
    let t = spec.temperature;
    let rows = |logits: &Tensor, f: &dyn Fn(&[f64]) -> f64| (0..n).map(|i| f(logits.row(i))).collect::<Vec<_>>();
    match spec.kind {
        ScoreKind::Msp => Ok(rows(&model.forward_batch(features, None)?.logits, &msp)),
        ScoreKind::Maxlogit => Ok(rows(&model.forward_batch(features, None)?.logits, &max_logit)),
        ScoreKind::Energy => Ok(rows(&model.forward_batch(features, None)?.logits, &|z| energy_score(z, t))),
        ScoreKind::Entropy => Ok(rows(&model.forward_batch(features, None)?.logits, &neg_entropy)),
        ScoreKind::TempMsp => Ok(rows(&model.forward_batch(features, None)?.logits, &|z| temp_msp(z, t))),
        ScoreKind::Odin => {
            let perturbed = odin_perturb(model, features, t, spec.epsilon)?;
            Ok(rows(&model.forward_batch(&perturbed, None)?.logits, &|z| temp_msp(z, t)))
        }
        ScoreKind::Mahalanobis => {
            let maha = aux.mahalanobis.as_ref().ok_or(OltError::NotFitted("mahalanobis"))?;
            let out = model.forward_batch(features, None)?;
            Ok((0..n).map(|i| maha.score(out.penultimate.row(i))).collect())
        }
        ScoreKind::React => {
            let clip = aux.react_clip.ok_or(OltError::NotFitted("react"))?;
            let out = model.forward_batch(features, Some(clip))?;
            Ok(rows(&out.logits, &|z| energy_score(z, t)))
        }
    }
}

pub fn score(spec: &ScoringSpec, model: &ModelState, aux: &Auxiliary, x: &[f64]) -> Result<f64> {
    let batch = Tensor::new(vec![1, x.len()], x.to_vec())?;
    Ok(score_batch(spec, model, aux, &batch)?[0])
}

/// `x + ε · sign(∇ₓ log S_ŷ(x; T))` where `ŷ` is the predicted class.
pub fn odin_perturb(model: &ModelState, features: &Tensor, temperature: f64, epsilon: f64) -> Result<Tensor> {
    if epsilon == 0.0 {
        return Ok(features.clone());
    }
    let (n, _) = features.dims2("odin")?;
    let predicted: Vec<usize> = {
        let out = model.forward_batch(features, None)?;
        (0..n).map(|i| argmax(out.logits.row(i))).collect()
    };
    let mut tape = Tape::new();
    let params = model.record_params(&mut tape);
    let x = tape.leaf(features.clone());
    let (logits, _) = model.record_forward(&mut tape, &params, x)?;
    let scaled = tape.affine(logits, 1.0 / temperature, 0.0)?;
    // summed (not mean) cross-entropy; its negation is Σ log S_ŷ
    let mean_ce = tape.softmax_cross_entropy(scaled, &predicted)?;
    let total_ce = tape.affine(mean_ce, n as f64, 0.0)?;
    tape.backward(total_ce)?;
    let grad = tape.grad(x);
    features.zip_map(&grad, "odin", |v, g| {
        // ascend log-softmax = descend cross-entropy
        let s = if g > 0.0 {
            -1.0
        } else if g < 0.0 {
            1.0
        } else {
            0.0
        };
        v + epsilon * s
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ModelConfig;

    #[test]
    fn scorer_examples() {
        assert_eq!(msp(&[0.0, 0.0]), 0.5);
        assert!((neg_entropy(&[1.0; 4]) + 4f64.ln()).abs() < 1e-12);
        assert!((energy_score(&[0.0, 0.0], 1.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(max_logit(&[3.2, -1.0, 0.5]), 3.2);
    }

    #[test]
    fn temperature_limits() {
        let z = [2.0, 0.0, 0.0];
        assert_eq!(temp_scaled_softmax(&z, 1.0).unwrap(), softmax(&z));
        for p in temp_scaled_softmax(&z, 1e6).unwrap() {
            assert!((p - 1.0 / 3.0).abs() < 1e-5);
        }
        assert!(temp_scaled_softmax(&z, 0.0).is_err());
        assert!(temp_scaled_softmax(&z, -1.0).is_err());
    }

    #[test]
    fn decision_rule() {
        assert_eq!(decide(0.1, 0.5, &[9.0, 0.0]), Decision::Ood);
        assert_eq!(decide(0.5, 0.5, &[0.0, 9.0]), Decision::Class(1));
        assert_eq!(decide(0.9, 0.5, &[0.0, 1.0, 3.0]), Decision::Class(2));
    }

    #[test]
    fn unknown_kind() {
        assert!(matches!("softmax".parse::<ScoreKind>(), Err(OltError::UnknownScorer(_))));
        for k in ScoreKind::ALL {
            assert_eq!(k.name().parse::<ScoreKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
    }

    #[test]
    fn percentile_interpolates() {
        let v: Vec<f64> = (0..=10).map(f64::from).collect();
        assert_eq!(percentile(&v, 90.0), 9.0);
        assert_eq!(percentile(&v, 100.0), 10.0);
        assert!((percentile(&[0.0, 1.0], 25.0) - 0.25).abs() < 1e-15);
    }

    fn tiny_model() -> ModelState {
        ModelState::init(ModelConfig {
            input_dim: 3,
            hidden_dims: vec![5, 4],
            num_classes: 3,
            seed: 4,
        })
        .unwrap()
    }

    #[test]
    fn unfitted_auxiliary_is_an_error() {
        let m = tiny_model();
        let x = [0.1, 0.2, 0.3];
        let aux = Auxiliary::default();
        assert!(matches!(
            score(&ScoringSpec::new(ScoreKind::Mahalanobis), &m, &aux, &x),
            Err(OltError::NotFitted("mahalanobis"))
        ));
        assert!(matches!(
            score(&ScoringSpec::new(ScoreKind::React), &m, &aux, &x),
            Err(OltError::NotFitted("react"))
        ));
    }

    #[test]
    fn odin_perturbation_raises_confidence_at_small_epsilon() {
        let m = tiny_model();
        let x = Tensor::from_rows(&[vec![0.3, -0.2, 0.8], vec![1.0, 0.5, -0.4]]).unwrap();
        let aux = Auxiliary::default();
        let mut spec = ScoringSpec::new(ScoreKind::Odin);
        spec.epsilon = 0.0;
        let base = score_batch(&spec, &m, &aux, &x).unwrap();
        spec.epsilon = 1e-4;
        let moved = score_batch(&spec, &m, &aux, &x).unwrap();
        for (b, p) in base.iter().zip(&moved) {
            assert!(p >= b, "{p} < {b}");
        }
        assert_eq!(base, score_batch(&ScoringSpec::new(ScoreKind::Msp), &m, &aux, &x).unwrap());
    }
}
