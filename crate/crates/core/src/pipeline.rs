//! The four pruning phases: finetune the dense model, learn gate
//! parameters with the weights frozen, threshold them into a mask once,
//! then retrain the masked network from its original initialization.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{fnv1a, Checkpoint, Manifest, PhaseDir, FORMAT_VERSION};
use crate::classifier::{train, AdamW, LabeledData, LossCurve, ModelConfig, ModelState, TrainConfig};
use crate::error::{OltError, Result};
use crate::gates::{noise_logit, GateParams, GateSet, Mask};
use crate::tensor::Tensor;

/// Salt mixed into the seed of the mask phase so its noise stream differs
/// from the shuffling stream of the training phases.
const MASK_SEED_SALT: u64 = 0x6d61_736b_5f72_6e67;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub hidden_dims: Vec<usize>,
    pub seed: u64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub mask_epochs: usize,
    pub mask_lr: f64,
    pub retrain_epochs: usize,
    pub retrain_lr: f64,
    pub gates: GateParams,
    /// Threshold on gate-open probability.
    pub mu: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            hidden_dims: vec![128, 64],
            seed: 0,
            batch_size: 32,
            weight_decay: 0.01,
            finetune_epochs: 30,
            finetune_lr: 1e-3,
            mask_epochs: 10,
            mask_lr: 0.05,
            retrain_epochs: 20,
            retrain_lr: 1e-3,
            gates: GateParams::default(),
            mu: 0.5,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.retrain_epochs > self.finetune_epochs {
            return Err(OltError::Config(format!(
                "retrain_epochs ({}) must not exceed finetune_epochs ({})",
                self.retrain_epochs, self.finetune_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(OltError::Config("batch_size must be positive".into()));
        }
        for (name, lr) in [
            ("finetune_lr", self.finetune_lr),
            ("mask_lr", self.mask_lr),
            ("retrain_lr", self.retrain_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(OltError::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(OltError::Config(format!("mu must lie in [0, 1], got {}", self.mu)));
        }
        if self.hidden_dims.contains(&0) {
            return Err(OltError::Config("hidden layer widths must be positive".into()));
        }
        self.gates.validate().map_err(|e| OltError::Config(e.to_string()))
    }

    pub fn model_config(&self, input_dim: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            num_classes,
            seed: self.seed,
        }
    }

    fn finetune_schedule(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.finetune_epochs,
            batch_size: self.batch_size,
            learning_rate: self.finetune_lr,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }

    /// Same shuffling seed as finetuning.
    fn retrain_schedule(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.retrain_epochs,
            learning_rate: self.retrain_lr,
            ..self.finetune_schedule()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseCurves {
    pub finetune: LossCurve,
    pub mask: LossCurve,
    pub retrain: LossCurve,
}

#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub dense: ModelState,
    pub gates: GateSet,
    pub mask: Mask,
    /// The masked network at `θ₀ ⊙ M`, before retraining.
    pub subnetwork: ModelState,
    pub olt: ModelState,
    /// Fraction of gated weights masked to zero.
    pub sparsity: f64,
    pub curves: PhaseCurves,
    /// Phases restored from checkpoints instead of recomputed.
    pub resumed: Vec<Phase>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Dense,
    Gates,
    Subnetwork,
    Olt,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Dense, Phase::Gates, Phase::Subnetwork, Phase::Olt];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Dense => "dense",
            Phase::Gates => "gates",
            Phase::Subnetwork => "subnetwork",
            Phase::Olt => "olt",
        }
    }
}

/// Trains a freshly initialized dense model on IND data.
pub fn finetune_dense(config: &PipelineConfig, data: &LabeledData, num_classes: usize) -> Result<(ModelState, LossCurve)> {
    config.validate()?;
    let mut model = ModelState::init(config.model_config(data.dim(), num_classes))?;
    let curve = train(&mut model, data, &config.finetune_schedule())?;
    Ok((model, curve))
}

/// Optimizes gate locations `α` against mean cross-entropy of the gated
/// network plus `λ` times the expected number of open gates. Weights and
/// biases stay frozen; each step draws one gate sample per weight.
pub fn learn_masks(dense: &ModelState, config: &PipelineConfig, data: &LabeledData) -> Result<(GateSet, LossCurve)> {
    config.validate()?;
    data.check_labels(dense.num_classes())?;
    let mut gates = GateSet::for_model(dense, config.gates.clone())?;
    let sizes: Vec<usize> = gates.layers.iter().map(|l| l.alpha.len()).collect();
    let mut opt = AdamW::new(config.mask_lr, 0.0, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ MASK_SEED_SALT);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(config.mask_epochs);

    for epoch in 0..config.mask_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let (xb, yb) = data.batch(chunk);
            let mut tape = Tape::new();
            let alphas: Vec<Var> = gates.layers.iter().map(|gl| tape.leaf(gl.alpha.clone())).collect();
            let noise = gates
                .layers
                .iter()
                .map(|gl| {
                    let data = (0..gl.alpha.len()).map(|_| noise_logit(&mut rng)).collect();
                    Tensor::new(gl.alpha.shape().to_vec(), data)
                })
                .collect::<Result<Vec<_>>>()?;
            let x = tape.leaf(xb);
            let objective = record_mask_objective(&mut tape, dense, &gates, &alphas, &noise, x, &yb)?;
            let value = tape.value(objective).item();
            if !value.is_finite() {
                return Err(OltError::Divergence {
                    phase: "learn_masks",
                    epoch,
                    loss: value,
                });
            }
            tape.backward(objective)?;
            total += value;
            batches += 1;

            opt.begin_step();
            for (slot, a) in alphas.iter().enumerate() {
                let g = tape.grad(*a).into_data();
                opt.update(slot, gates.layers[slot].alpha.data_mut(), &g);
            }
        }
        let mean = total / batches.max(1) as f64;
        if !mean.is_finite() || gates.layers.iter().any(|l| !l.alpha.is_finite()) {
            return Err(OltError::Divergence {
                phase: "learn_masks",
                epoch,
                loss: mean,
            });
        }
        curve.push(mean);
    }
    Ok((gates, curve))
}

/// Records the mask objective for one batch: mean cross-entropy of the
/// network whose gated weights are multiplied by one gate sample, plus
/// `λ` times the expected number of open gates. `alphas[j]` and `noise[j]`
/// belong to `gates.layers[j]`; weights and biases enter as constants.
pub fn record_mask_objective(
    tape: &mut Tape,
    dense: &ModelState,
    gates: &GateSet,
    alphas: &[Var],
    noise: &[Tensor],
    x: Var,
    labels: &[usize],
) -> Result<Var> {
    if alphas.len() != gates.layers.len() || noise.len() != gates.layers.len() {
        return Err(OltError::InvalidArgument("one alpha handle and noise tensor per gated layer".into()));
    }
    let mut params: Vec<(Var, Var)> = dense
        .layers()
        .iter()
        .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
        .collect();
    let mut penalty = None;
    for ((gl, &a), eps) in gates.layers.iter().zip(alphas).zip(noise) {
        let m = gates.record_sample(tape, a, eps)?;
        let w = &mut params[gl.index].0;
        *w = tape.mul(*w, m)?;
        let l0 = gates.record_expected_l0(tape, a)?;
        penalty = Some(match penalty {
            None => l0,
            Some(p) => tape.add(p, l0)?,
        });
    }
    let (logits, _) = dense.record_forward(tape, &params, x)?;
    let ce = tape.softmax_cross_entropy(logits, labels)?;
    let penalty = penalty.ok_or_else(|| OltError::InvalidArgument("no gated layers".into()))?;
    let scaled = tape.affine(penalty, gates.params.lambda, 0.0)?;
    tape.add(ce, scaled)
}

/// Thresholds the gate-open probabilities once and returns the masked
/// network at `θ₀ ⊙ M` with the mask installed, plus the mask itself.
pub fn build_subnetwork(dense: &ModelState, gates: &GateSet, mu: f64) -> Result<(ModelState, Mask)> {
    let mask = gates.threshold(dense, mu);
    if let Some(layer) = mask.fully_pruned_layer(dense) {
        return Err(OltError::DegenerateMask(layer.to_string()));
    }
    let sub = dense.reset_to_init(Some(mask.clone()))?;
    Ok((sub, mask))
}

/// Trains the masked network with the finetuning schedule's seed and the
/// retrain epoch budget.
pub fn retrain(subnetwork: &ModelState, config: &PipelineConfig, data: &LabeledData) -> Result<(ModelState, LossCurve)> {
    config.validate()?;
    if subnetwork.mask().is_none() {
        return Err(OltError::InvalidArgument("retrain requires an installed mask".into()));
    }
    let mut model = subnetwork.clone();
    let curve = train(&mut model, data, &config.retrain_schedule())?;
    Ok((model, curve))
}

/// Hash identifying a pipeline configuration together with its training
/// data, so stale checkpoints are never reused.
pub fn config_hash(config: &PipelineConfig, data: &LabeledData, num_classes: usize) -> String {
    let mut bytes = serde_json::to_vec(config).expect("config serializes");
    bytes.extend_from_slice(&(num_classes as u64).to_le_bytes());
    bytes.extend_from_slice(&(data.dim() as u64).to_le_bytes());
    for v in data.features.data() {
        bytes.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    for &y in &data.labels {
        bytes.extend_from_slice(&(y as u64).to_le_bytes());
    }
    format!("{:016x}", fnv1a(&bytes))
}

/// Runs every phase. With a checkpoint directory, phases whose manifest
/// matches the configuration hash are restored instead of recomputed and
/// every freshly computed phase is persisted.
pub fn run_olt(
    config: &PipelineConfig,
    data: &LabeledData,
    num_classes: usize,
    checkpoints: Option<&Path>,
) -> Result<PipelineResult> {
    let progress = run_olt_until(config, data, num_classes, checkpoints, Phase::Olt)?;
    Ok(progress.result.expect("the final phase yields a result"))
}

/// How far [`run_olt_until`] got.
#[derive(Clone, Debug)]
pub struct Progress {
    pub completed: Phase,
    /// Phases restored from checkpoints instead of recomputed.
    pub resumed: Vec<Phase>,
    /// Known once the mask exists.
    pub sparsity: Option<f64>,
    /// Present only when the final phase completed.
    pub result: Option<PipelineResult>,
}

/// Like [`run_olt`] but stops after `last`.
pub fn run_olt_until(
    config: &PipelineConfig,
    data: &LabeledData,
    num_classes: usize,
    checkpoints: Option<&Path>,
    last: Phase,
) -> Result<Progress> {
    config.validate()?;
    let hash = config_hash(config, data, num_classes);
    let store = checkpoints.map(|root| Store {
        root,
        hash: &hash,
        seed: config.seed,
    });
    let mut resumed = Vec::new();
    let mut curves = PhaseCurves::default();

    let dense = match store.as_ref().map(|s| s.load(Phase::Dense)).transpose()?.flatten() {
        Some(ck) => {
            resumed.push(Phase::Dense);
            curves.finetune = ck.loss_curve;
            ck.model
        }
        None => {
            let (model, curve) = finetune_dense(config, data, num_classes).map_err(|e| e.in_phase("dense"))?;
            if let Some(s) = &store {
                s.save(Phase::Dense, &Checkpoint::new("dense", model.clone(), None, curve.clone()), None)?;
            }
            curves.finetune = curve;
            model
        }
    };
    if last == Phase::Dense {
        return Ok(Progress {
            completed: last,
            resumed,
            sparsity: None,
            result: None,
        });
    }

    let gates = match store.as_ref().map(|s| s.load(Phase::Gates)).transpose()?.flatten() {
        Some(ck) => {
            resumed.push(Phase::Gates);
            curves.mask = ck.loss_curve;
            ck.gates
                .ok_or_else(|| OltError::Config("gates checkpoint holds no gate set".into()).in_phase("gates"))?
        }
        None => {
            let (gates, curve) = learn_masks(&dense, config, data).map_err(|e| e.in_phase("gates"))?;
            if let Some(s) = &store {
                let ck = Checkpoint::new("gates", dense.clone(), Some(gates.clone()), curve.clone());
                s.save(Phase::Gates, &ck, None)?;
            }
            curves.mask = curve;
            gates
        }
    };
    if last == Phase::Gates {
        return Ok(Progress {
            completed: last,
            resumed,
            sparsity: None,
            result: None,
        });
    }

    let (subnetwork, mask) = match store.as_ref().map(|s| s.load(Phase::Subnetwork)).transpose()?.flatten() {
        Some(ck) => {
            resumed.push(Phase::Subnetwork);
            let mask = ck
                .model
                .mask()
                .cloned()
                .ok_or_else(|| OltError::Config("subnetwork checkpoint holds no mask".into()).in_phase("subnetwork"))?;
            (ck.model, mask)
        }
        None => {
            let (sub, mask) = build_subnetwork(&dense, &gates, config.mu).map_err(|e| e.in_phase("subnetwork"))?;
            if let Some(s) = &store {
                let ck = Checkpoint::new("subnetwork", sub.clone(), None, Vec::new());
                s.save(Phase::Subnetwork, &ck, Some(gates.sparsity(&mask)))?;
            }
            (sub, mask)
        }
    };
    let sparsity = gates.sparsity(&mask);
    if last == Phase::Subnetwork {
        return Ok(Progress {
            completed: last,
            resumed,
            sparsity: Some(sparsity),
            result: None,
        });
    }

    let olt = match store.as_ref().map(|s| s.load(Phase::Olt)).transpose()?.flatten() {
        Some(ck) => {
            resumed.push(Phase::Olt);
            curves.retrain = ck.loss_curve;
            ck.model
        }
        None => {
            let (model, curve) = retrain(&subnetwork, config, data).map_err(|e| e.in_phase("olt"))?;
            if let Some(s) = &store {
                s.save(Phase::Olt, &Checkpoint::new("olt", model.clone(), None, curve.clone()), Some(sparsity))?;
            }
            curves.retrain = curve;
            model
        }
    };

    Ok(Progress {
        completed: Phase::Olt,
        resumed: resumed.clone(),
        sparsity: Some(sparsity),
        result: Some(PipelineResult {
            dense,
            gates,
            mask,
            subnetwork,
            olt,
            sparsity,
            curves,
            resumed,
        }),
    })
}

struct Store<'a> {
    root: &'a Path,
    hash: &'a str,
    seed: u64,
}

impl Store<'_> {
    fn load(&self, phase: Phase) -> Result<Option<Checkpoint>> {
        PhaseDir::new(self.root, phase.name()).load_if_current(self.hash)
    }

    fn save(&self, phase: Phase, ck: &Checkpoint, sparsity: Option<f64>) -> Result<()> {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            phase: phase.name().to_string(),
            config_hash: self.hash.to_string(),
            seed: self.seed,
            sparsity,
        };
        PhaseDir::new(self.root, phase.name()).store(ck, &manifest)
    }
}
