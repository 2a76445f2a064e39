//! Experiment orchestration: config file, data preparation, evaluation of
//! the dense and pruned models under every scorer, temperature sweeps,
//! masked-only evaluation, calibration, and report emission.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_file;
use crate::classifier::{LabeledData, ModelState};
use crate::data::{load_dataset, split_ind_ood, Dataset, Split, SplitFractions, SYNTH_OOD_LABEL};
use crate::error::{OltError, Result};
use crate::eval::{confidence_pairs, fit_temperature, reliability, EvalReport, ReliabilityBins, ScoreRecord, NUM_BINS};
use crate::gates::GateParams;
use crate::pipeline::{config_hash, run_olt, PipelineConfig, PipelineResult};
use crate::scoring::{msp, score_batch, Auxiliary, ScoreKind, ScoringSpec};
use crate::tensor::{argmax, Tensor};

/// Flat experiment definition. Every key is optional; unknown keys are
/// rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub split_seed: u64,
    pub ind_fraction: f64,
    /// Label treated as the OOD class when present in the file; the random
    /// class split is used otherwise.
    pub ood_label: Option<String>,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    /// Hashed bag-of-words width for text datasets.
    pub hash_dim: usize,

    pub seed: u64,
    pub hidden_dims: Vec<usize>,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub mask_epochs: usize,
    pub mask_lr: f64,
    pub retrain_epochs: usize,
    pub retrain_lr: f64,
    pub lambda: f64,
    pub mu: f64,
    pub beta: f64,
    pub stretch_lo: f64,
    pub stretch_hi: f64,
    pub alpha_init: f64,
    pub layer_filter: Option<Vec<String>>,

    pub scorers: Vec<ScoreKind>,
    /// Softmax temperature of the temp-msp scorer.
    pub temperature: f64,
    pub odin_temperature: f64,
    pub odin_epsilon: f64,
    pub energy_temperature: f64,
    pub react_percentile: f64,
    pub sweep_temperatures: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        let g = GateParams::default();
        ExperimentConfig {
            dataset: PathBuf::from("dataset.jsonl"),
            out: PathBuf::from("out"),
            split_seed: 0,
            ind_fraction: 0.75,
            ood_label: Some(SYNTH_OOD_LABEL.to_string()),
            train_fraction: SplitFractions::default().train,
            validation_fraction: SplitFractions::default().validation,
            hash_dim: 512,
            seed: p.seed,
            hidden_dims: p.hidden_dims,
            batch_size: p.batch_size,
            weight_decay: p.weight_decay,
            finetune_epochs: p.finetune_epochs,
            finetune_lr: p.finetune_lr,
            mask_epochs: p.mask_epochs,
            mask_lr: p.mask_lr,
            retrain_epochs: p.retrain_epochs,
            retrain_lr: p.retrain_lr,
            lambda: g.lambda,
            mu: p.mu,
            beta: g.beta,
            stretch_lo: g.stretch_lo,
            stretch_hi: g.stretch_hi,
            alpha_init: g.alpha_init,
            layer_filter: g.layer_filter,
            scorers: ScoreKind::ALL.to_vec(),
            temperature: 10.0,
            odin_temperature: 1000.0,
            odin_epsilon: 1e-3,
            energy_temperature: 1.0,
            react_percentile: 90.0,
            sweep_temperatures: vec![1.0, 10.0, 100.0, 1000.0, 10000.0],
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(raw: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(raw).map_err(|e| OltError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| OltError::io(path, e))?;
        ExperimentConfig::from_json(&raw)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ind_fraction > 0.0 && self.ind_fraction < 1.0) {
            return Err(OltError::Config(format!(
                "ind_fraction must lie in (0, 1), got {}",
                self.ind_fraction
            )));
        }
        if self.hash_dim == 0 {
            return Err(OltError::Config("hash_dim must be positive".into()));
        }
        if self.scorers.is_empty() {
            return Err(OltError::Config("at least one scorer is required".into()));
        }
        let mut seen = self.scorers.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.scorers.len() {
            return Err(OltError::Config("scorers must not repeat".into()));
        }
        if self.sweep_temperatures.iter().any(|&t| !(t > 0.0 && t.is_finite()))
            || self.sweep_temperatures.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(OltError::Config(
                "sweep_temperatures must be positive and strictly ascending".into(),
            ));
        }
        for spec in self.scoring_specs() {
            spec.validate().map_err(|e| OltError::Config(e.to_string()))?;
        }
        self.pipeline().validate()
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            hidden_dims: self.hidden_dims.clone(),
            seed: self.seed,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            finetune_epochs: self.finetune_epochs,
            finetune_lr: self.finetune_lr,
            mask_epochs: self.mask_epochs,
            mask_lr: self.mask_lr,
            retrain_epochs: self.retrain_epochs,
            retrain_lr: self.retrain_lr,
            gates: GateParams {
                beta: self.beta,
                stretch_lo: self.stretch_lo,
                stretch_hi: self.stretch_hi,
                lambda: self.lambda,
                alpha_init: self.alpha_init,
                layer_filter: self.layer_filter.clone(),
            },
            mu: self.mu,
        }
    }

    pub fn split_fractions(&self) -> SplitFractions {
        SplitFractions {
            train: self.train_fraction,
            validation: self.validation_fraction,
        }
    }

    /// The configured scorer with its temperature and auxiliary knobs.
    pub fn scoring_spec(&self, kind: ScoreKind) -> ScoringSpec {
        let mut spec = ScoringSpec::new(kind);
        spec.clip_percentile = self.react_percentile;
        spec.epsilon = self.odin_epsilon;
        spec.temperature = match kind {
            ScoreKind::TempMsp => self.temperature,
            ScoreKind::Odin => self.odin_temperature,
            ScoreKind::Energy | ScoreKind::React => self.energy_temperature,
            _ => 1.0,
        };
        spec
    }

    pub fn scoring_specs(&self) -> Vec<ScoringSpec> {
        self.scorers.iter().map(|&k| self.scoring_spec(k)).collect()
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out.join("checkpoints")
    }
}

/// Test examples with their ids and IND class (`None` for OOD).
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub ids: Vec<String>,
    pub features: Tensor,
    pub classes: Vec<Option<usize>>,
}

impl EvalSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Encoded splits of one dataset.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub split: Split,
    pub train: LabeledData,
    pub validation: LabeledData,
    pub test: EvalSet,
}

impl PreparedData {
    pub fn new(config: &ExperimentConfig, dataset: &Dataset) -> Result<Self> {
        let split = split_ind_ood(
            dataset,
            config.ind_fraction,
            config.split_seed,
            config.ood_label.as_deref(),
            config.split_fractions(),
        )?;
        let labeled = |indices: &[usize]| -> Result<LabeledData> {
            if indices.is_empty() {
                return Err(OltError::Dataset("a split came out empty".into()));
            }
            let labels = indices.iter().map(|&i| split.class_of(i).expect("IND example")).collect();
            LabeledData::new(dataset.encode(indices, config.hash_dim)?, labels)
        };
        let train = labeled(&split.train)?;
        let validation = labeled(&split.validation)?;
        if split.test.is_empty() {
            return Err(OltError::Dataset("the test split came out empty".into()));
        }
        let test = EvalSet {
            ids: split.test.iter().map(|&i| dataset.examples[i].id.clone()).collect(),
            features: dataset.encode(&split.test, config.hash_dim)?,
            classes: split.test.iter().map(|&i| split.class_of(i)).collect(),
        };
        Ok(PreparedData {
            split,
            train,
            validation,
            test,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.split.num_classes()
    }
}

/// One report plus the per-sample scores it was computed from.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub scores: Vec<f64>,
    pub spec: ScoringSpec,
}

/// Scores `test` with `spec` and builds the report. Calibration uses the
/// IND test samples at the scorer's softmax temperature.
pub fn evaluate(
    model_name: &str,
    model: &ModelState,
    aux: &Auxiliary,
    spec: &ScoringSpec,
    test: &EvalSet,
) -> Result<Evaluation> {
    let scores = score_batch(spec, model, aux, &test.features)?;
    let logits = model.forward_batch(&test.features, None)?.logits;
    let mut records = Vec::with_capacity(test.len());
    let mut ind_logits = Vec::new();
    let mut ind_labels = Vec::new();
    for (i, (&s, class)) in scores.iter().zip(&test.classes).enumerate() {
        let row = logits.row(i);
        let predicted = argmax(row);
        match *class {
            Some(c) => {
                records.push(ScoreRecord::ind(s, predicted, c));
                ind_logits.push(row.to_vec());
                ind_labels.push(c);
            }
            None => records.push(ScoreRecord::ood(s, predicted)),
        }
    }
    let ind_confidence = confidence_pairs(&ind_logits, &ind_labels, spec.confidence_temperature());
    let report = EvalReport::build(model_name, spec.kind.name(), spec.temperature, &records, &ind_confidence)?;
    Ok(Evaluation {
        report,
        scores,
        spec: *spec,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub temperature: f64,
    pub tnr95: f64,
    pub acc: f64,
    pub auroc: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("temperature,tnr95,acc,auroc\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.temperature, r.tnr95, r.acc, r.auroc);
    }
    out
}

/// Calibration of a model on IND test samples before and after
/// temperature scaling, with the temperature fitted on validation data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub model: String,
    pub fitted_temperature: f64,
    pub ece: f64,
    pub mce: f64,
    pub scaled_ece: f64,
    pub scaled_mce: f64,
    pub bins: ReliabilityBins,
    pub scaled_bins: ReliabilityBins,
    /// Mean max-softmax confidence (T = 1) over OOD test samples.
    pub ood_mean_confidence: f64,
}

pub fn calibration_report(
    model_name: &str,
    model: &ModelState,
    validation: &LabeledData,
    test: &EvalSet,
) -> Result<CalibrationReport> {
    let val_logits = model.forward_batch(&validation.features, None)?.logits;
    let val_rows: Vec<Vec<f64>> = (0..validation.len()).map(|i| val_logits.row(i).to_vec()).collect();
    let t = fit_temperature(&val_rows, &validation.labels)?;

    let logits = model.forward_batch(&test.features, None)?.logits;
    let (mut ind_rows, mut ind_labels, mut ood_conf) = (Vec::new(), Vec::new(), Vec::new());
    for (i, class) in test.classes.iter().enumerate() {
        match *class {
            Some(c) => {
                ind_rows.push(logits.row(i).to_vec());
                ind_labels.push(c);
            }
            None => ood_conf.push(msp(logits.row(i))),
        }
    }
    let raw = reliability(&confidence_pairs(&ind_rows, &ind_labels, 1.0), NUM_BINS)?;
    let scaled = reliability(&confidence_pairs(&ind_rows, &ind_labels, t), NUM_BINS)?;
    let ood_mean_confidence = if ood_conf.is_empty() {
        0.0
    } else {
        ood_conf.iter().sum::<f64>() / ood_conf.len() as f64
    };
    Ok(CalibrationReport {
        model: model_name.to_string(),
        fitted_temperature: t,
        ece: raw.ece,
        mce: raw.mce,
        scaled_ece: scaled.ece,
        scaled_mce: scaled.mce,
        bins: raw.bins,
        scaled_bins: scaled.bins,
        ood_mean_confidence,
    })
}

/// A trained pipeline together with the data it was trained on.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub data: PreparedData,
    pub pipeline: PipelineResult,
}

impl Experiment {
    /// Loads the configured dataset and runs (or resumes) the pipeline with
    /// checkpoints under the output directory.
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let dataset = load_dataset(&config.dataset)?;
        Experiment::from_dataset(config, &dataset, Some(&config.checkpoint_dir()))
    }

    pub fn from_dataset(config: &ExperimentConfig, dataset: &Dataset, checkpoints: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let data = PreparedData::new(config, dataset)?;
        let pipeline = run_olt(&config.pipeline(), &data.train, data.num_classes(), checkpoints)?;
        Ok(Experiment {
            config: config.clone(),
            data,
            pipeline,
        })
    }

    fn aux(&self, model: &ModelState) -> Result<Auxiliary> {
        let needs = self
            .config
            .scorers
            .iter()
            .any(|k| matches!(k, ScoreKind::Mahalanobis | ScoreKind::React));
        if needs {
            Auxiliary::fit(model, &self.data.train, self.config.react_percentile)
        } else {
            Ok(Auxiliary::default())
        }
    }

    /// Dense baseline and pruned model under every configured scorer, dense
    /// first.
    pub fn evaluations(&self) -> Result<Vec<Evaluation>> {
        let mut out = Vec::new();
        for (name, model) in [("dense", &self.pipeline.dense), ("olt", &self.pipeline.olt)] {
            let aux = self.aux(model)?;
            for spec in self.config.scoring_specs() {
                out.push(evaluate(name, model, &aux, &spec, &self.data.test)?);
            }
        }
        Ok(out)
    }

    /// temp-msp on the pruned model at every temperature of `grid`.
    pub fn temperature_sweep(&self, grid: &[f64]) -> Result<Vec<SweepRow>> {
        if grid.iter().any(|&t| !(t > 0.0 && t.is_finite())) || grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(OltError::InvalidArgument(
                "sweep grid must be positive and strictly ascending".into(),
            ));
        }
        let aux = Auxiliary::default();
        grid.iter()
            .map(|&t| {
                let spec = self.config.scoring_spec(ScoreKind::TempMsp).with_temperature(t);
                let e = evaluate("olt", &self.pipeline.olt, &aux, &spec, &self.data.test)?;
                Ok(SweepRow {
                    temperature: t,
                    tnr95: e.report.tnr95,
                    acc: e.report.acc,
                    auroc: e.report.auroc,
                })
            })
            .collect()
    }

    /// The finetuned weights scaled by the deterministic gates, without any
    /// retraining, under the temp-msp scorer.
    pub fn masked_only_eval(&self) -> Result<Evaluation> {
        let dense = &self.pipeline.dense;
        let masked = dense.scale_weights(&self.pipeline.gates.deterministic_factors(dense))?;
        let spec = self.config.scoring_spec(ScoreKind::TempMsp);
        evaluate("masked", &masked, &Auxiliary::default(), &spec, &self.data.test)
    }

    pub fn calibration(&self) -> Result<Vec<CalibrationReport>> {
        [("dense", &self.pipeline.dense), ("olt", &self.pipeline.olt)]
            .into_iter()
            .map(|(name, model)| calibration_report(name, model, &self.data.validation, &self.data.test))
            .collect()
    }

    /// Writes reports, per-sample scores, reliability bins, the
    /// temperature sweep, the masked-only report, calibration reports and
    /// a manifest under `out`. Returns the dense and pruned reports.
    pub fn write_all(&self, out: &Path) -> Result<Vec<EvalReport>> {
        let mut files = Vec::new();
        let mut put = |rel: String, contents: String| -> Result<()> {
            write_file(&out.join(&rel), &contents)?;
            files.push(rel);
            Ok(())
        };

        let evaluations = self.evaluations()?;
        for e in &evaluations {
            write_evaluation(&mut put, e, &self.data.test)?;
        }
        let masked = self.masked_only_eval()?;
        write_evaluation(&mut put, &masked, &self.data.test)?;

        let sweep = self.temperature_sweep(&self.config.sweep_temperatures)?;
        put("sweep/olt-temp-msp.csv".into(), sweep_csv(&sweep))?;

        for c in self.calibration()? {
            put(format!("reports/calibration-{}.json", c.model), pretty(&c)?)?;
        }

        let manifest = ExperimentManifest {
            config_hash: config_hash(
                &self.config.pipeline(),
                &self.data.train,
                self.data.num_classes(),
            ),
            seed: self.config.seed,
            split_seed: self.config.split_seed,
            ind_classes: self.data.split.ind_classes.clone(),
            ood_classes: self.data.split.ood_classes.clone(),
            sparsity: self.pipeline.sparsity,
            reports: evaluations.len(),
            files,
        };
        write_file(&out.join("manifest.json"), &pretty(&manifest)?)?;
        Ok(evaluations.into_iter().map(|e| e.report).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub config_hash: String,
    pub seed: u64,
    pub split_seed: u64,
    pub ind_classes: Vec<String>,
    pub ood_classes: Vec<String>,
    pub sparsity: f64,
    pub reports: usize,
    pub files: Vec<String>,
}

#[derive(Serialize)]
struct ScoreLine<'a> {
    id: &'a str,
    score: f64,
    kind: &'a str,
    temperature: f64,
    ood: bool,
}

fn write_evaluation(
    put: &mut impl FnMut(String, String) -> Result<()>,
    e: &Evaluation,
    test: &EvalSet,
) -> Result<()> {
    let stem = format!("{}-{}", e.report.model, e.report.scorer);
    put(format!("reports/{stem}.json"), pretty(&e.report)?)?;
    let mut lines = String::new();
    for ((id, &score), class) in test.ids.iter().zip(&e.scores).zip(&test.classes) {
        let line = ScoreLine {
            id,
            score,
            kind: e.spec.kind.name(),
            temperature: e.spec.temperature,
            ood: class.is_none(),
        };
        lines.push_str(&serde_json::to_string(&line)?);
        lines.push('\n');
    }
    put(format!("scores/{stem}.jsonl"), lines)?;
    put(format!("bins/{stem}.csv"), e.report.bins.to_csv())
}

fn pretty<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

/// Runs the pipeline for `config`, evaluates both models under every
/// scorer and writes all artifacts under `config.out`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<EvalReport>> {
    Experiment::prepare(config)?.write_all(&config.out)
}
