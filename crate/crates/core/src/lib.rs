//! Sparse-subnetwork pruning with hard-concrete gates for open-world
//! intent classification, plus the OOD scoring and evaluation stack used
//! to compare the pruned model against its dense parent.
//!
//! The pipeline finetunes a dense classifier, learns gate parameters with
//! the weights frozen, thresholds them into a binary mask once, and
//! retrains the masked network from the original initialization.

pub mod autodiff;
pub mod checkpoint;
pub mod classifier;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gates;
pub mod pipeline;
pub mod scoring;
pub mod tensor;

pub use autodiff::{finite_diff_check, value_and_grad, FiniteDiffReport, Tape, Var};
pub use checkpoint::{Checkpoint, Manifest};
pub use classifier::{train, LabeledData, ModelConfig, ModelState, TrainConfig};
pub use data::{load_dataset, split_ind_ood, synth_gaussian_dataset, Dataset, Split, SynthSpec};
pub use error::{OltError, Result};
pub use eval::{auroc, reliability, tnr_at_tpr, EvalReport, ScoreRecord};
pub use experiment::{run_experiment, Experiment, ExperimentConfig};
pub use gates::{GateParams, GateSet, Mask};
pub use pipeline::{run_olt, PipelineConfig, PipelineResult};
pub use scoring::{ScoreKind, ScoringSpec};
pub use tensor::Tensor;
