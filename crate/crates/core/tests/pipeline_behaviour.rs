//! End-to-end behaviour of the pruning phases on a small synthetic task.

use olt_core::classifier::{accuracy, LabeledData};
use olt_core::data::{synth_gaussian_dataset, SynthSpec};
use olt_core::gates::GateParams;
use olt_core::pipeline::{finetune_dense, learn_masks, PipelineConfig};

fn task() -> (LabeledData, usize) {
    let ds = synth_gaussian_dataset(&SynthSpec {
        k_ind: 6,
        k_ood: 0,
        dim: 10,
        n_per_class: 60,
        spread: 0.2,
        seed: 21,
    })
    .unwrap();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let labels = ds.examples.iter().map(|e| ds.label_map[&e.label]).collect();
    (LabeledData::new(ds.encode(&idx, 0).unwrap(), labels).unwrap(), ds.label_map.len())
}

fn config(lambda: f64) -> PipelineConfig {
    PipelineConfig {
        hidden_dims: vec![32, 16],
        seed: 2,
        finetune_epochs: 20,
        finetune_lr: 5e-3,
        mask_epochs: 8,
        retrain_epochs: 15,
        gates: GateParams {
            lambda,
            ..GateParams::default()
        },
        ..PipelineConfig::default()
    }
}

#[test]
fn sparsity_tracks_lambda() {
    let (data, k) = task();
    let (dense, _) = finetune_dense(&config(0.0), &data, k).unwrap();
    assert!(accuracy(&dense, &data).unwrap() >= 0.95);

    let mut sparsities = Vec::new();
    for lambda in [0.0, 1e-4, 1e-3, 1e-2, 1e3] {
        let (gates, _) = learn_masks(&dense, &config(lambda), &data).unwrap();
        let mask = gates.threshold(&dense, 0.5);
        let masked = dense.scale_weights(&gates.deterministic_factors(&dense)).unwrap();
        let acc = accuracy(&masked, &data).unwrap();
        sparsities.push((lambda, gates.sparsity(&mask), acc));
    }

    let (_, s0, _) = sparsities[0];
    assert!(s0 < 0.02, "lambda 0 should keep gates open, sparsity {s0}");
    for w in sparsities[1..4].windows(2) {
        assert!(w[1].1 >= w[0].1, "sparsity not monotone in lambda: {sparsities:?}");
    }
    let (_, s_mid, _) = sparsities[2];
    assert!(s_mid > 0.0 && s_mid < 1.0);
    let (_, s_huge, acc_huge) = sparsities[4];
    assert!(s_huge > 0.99, "huge lambda sparsity {s_huge}");
    assert!(acc_huge <= 2.0 / k as f64, "huge lambda accuracy {acc_huge}");
}
