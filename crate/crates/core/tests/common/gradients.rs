//! Finite-difference checks of every tape primitive and of the full mask
//! objective at many random smooth points.

use olt_core::autodiff::{finite_diff_check, Tape, Var};
use olt_core::classifier::{ModelConfig, ModelState};
use olt_core::error::Result;
use olt_core::gates::{noise_logit, GateParams, GateSet};
use olt_core::pipeline::record_mask_objective;
use olt_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const POINTS: usize = 100;
pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Entries with magnitude in [0.05, 2), away from the kink at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..2.0);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Entries in [-0.5, 1.5) at least 0.05 away from both kinks of clamp01.
fn away_from_clamp_kinks(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    random_tensor(rng, shape, -0.5, 1.5).map(|v| {
        if v.abs() < 0.05 || (v - 1.0).abs() < 0.05 {
            v + 0.1
        } else {
            v
        }
    })
}

/// Reduces `y` to a scalar through a fixed random weighting so every
/// output entry contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape, y: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.leaf(weights.clone());
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

type Unary = fn(&mut Tape, Var) -> Result<Var>;

/// `Σ w ⊙ op(x)` at `POINTS` points drawn by `point`.
fn check_unary(seed: u64, op: Unary, point: fn(&mut ChaCha8Rng) -> Tensor) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..POINTS {
        let x0 = point(&mut rng);
        let w = random_tensor(&mut rng, x0.shape(), -1.0, 1.0);
        let graph = |t: &mut Tape, x: Var| {
            let y = op(t, x)?;
            weighted_sum(t, y, &w)
        };
        worst = worst.max(finite_diff_check(&graph, &x0, STEP, TOLERANCE).unwrap().max_rel_error);
    }
    worst
}

type Binary = fn(&mut Tape, Var, Var) -> Result<Var>;

/// `Σ w ⊙ op(x, c)` (or `op(c, x)` when `x_first` is false) with a random
/// constant operand `c`.
fn check_binary(seed: u64, op: Binary, x_shape: &[usize], c_shape: &[usize], out_shape: &[usize], x_first: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..POINTS {
        let x0 = random_tensor(&mut rng, x_shape, -1.0, 1.0);
        let c = random_tensor(&mut rng, c_shape, -2.0, 2.0);
        let w = random_tensor(&mut rng, out_shape, -1.0, 1.0);
        let graph = |t: &mut Tape, x: Var| {
            let cv = t.leaf(c.clone());
            let y = if x_first { op(t, x, cv)? } else { op(t, cv, x)? };
            weighted_sum(t, y, &w)
        };
        worst = worst.max(finite_diff_check(&graph, &x0, STEP, TOLERANCE).unwrap().max_rel_error);
    }
    worst
}

fn check_affine(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..POINTS {
        let x0 = random_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let w = random_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let (scale, shift) = (rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0));
        let graph = |t: &mut Tape, x: Var| {
            let y = t.affine(x, scale, shift)?;
            weighted_sum(t, y, &w)
        };
        worst = worst.max(finite_diff_check(&graph, &x0, STEP, TOLERANCE).unwrap().max_rel_error);
    }
    worst
}

fn check_sum(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..POINTS {
        let x0 = random_tensor(&mut rng, &[5, 2], -2.0, 2.0);
        let graph = |t: &mut Tape, x: Var| {
            let sq = t.mul(x, x)?;
            t.sum(sq)
        };
        worst = worst.max(finite_diff_check(&graph, &x0, STEP, TOLERANCE).unwrap().max_rel_error);
    }
    worst
}

fn check_cross_entropy(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..POINTS {
        let x0 = random_tensor(&mut rng, &[4, 5], -3.0, 3.0);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
        let graph = |t: &mut Tape, x: Var| t.softmax_cross_entropy(x, &labels);
        worst = worst.max(finite_diff_check(&graph, &x0, STEP, TOLERANCE).unwrap().max_rel_error);
    }
    worst
}

/// Gradient of the mask objective with respect to each gated layer's
/// gate locations, skipping points where a gate sample sits within 1e-3
/// of a clamp kink.
pub fn check_mask_objective(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = ModelState::init(ModelConfig {
        input_dim: 3,
        hidden_dims: vec![4],
        num_classes: 3,
        seed: 5,
    })
    .unwrap();
    let params = GateParams {
        lambda: 0.05,
        ..GateParams::default()
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < POINTS {
        let mut gates = GateSet::for_model(&model, params.clone()).unwrap();
        for gl in &mut gates.layers {
            gl.alpha = random_tensor(&mut rng, gl.alpha.shape(), -2.0, 3.0);
        }
        let noise: Vec<Tensor> = gates
            .layers
            .iter()
            .map(|gl| {
                let data = (0..gl.alpha.len()).map(|_| noise_logit(&mut rng)).collect();
                Tensor::new(gl.alpha.shape().to_vec(), data).unwrap()
            })
            .collect();
        let near_kink = gates.layers.iter().zip(&noise).any(|(gl, eps)| {
            gl.alpha.data().iter().zip(eps.data()).any(|(&a, &e)| {
                let s = 1.0 / (1.0 + (-(a + e) / params.beta).exp());
                let stretched = s * (params.stretch_hi - params.stretch_lo) + params.stretch_lo;
                stretched.abs() < 1e-3 || (stretched - 1.0).abs() < 1e-3
            })
        });
        if near_kink {
            continue;
        }
        let xb = random_tensor(&mut rng, &[4, 3], -1.0, 1.0);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        for target in 0..gates.layers.len() {
            let graph = |t: &mut Tape, a: Var| {
                let alphas: Vec<Var> = (0..gates.layers.len())
                    .map(|j| if j == target { a } else { t.leaf(gates.layers[j].alpha.clone()) })
                    .collect();
                let x = t.leaf(xb.clone());
                record_mask_objective(t, &model, &gates, &alphas, &noise, x, &labels)
            };
            let report = finite_diff_check(&graph, &gates.layers[target].alpha, STEP, TOLERANCE).unwrap();
            worst = worst.max(report.max_rel_error);
        }
        checked += 1;
    }
    worst
}

/// Worst relative error per primitive, then for the mask objective.
pub fn suite() -> Vec<(&'static str, f64)> {
    vec![
        ("matmul lhs", check_binary(1, |t, a, b| t.matmul(a, b), &[2, 4], &[4, 3], &[2, 3], true)),
        ("matmul rhs", check_binary(2, |t, a, b| t.matmul(a, b), &[4, 3], &[2, 4], &[2, 3], false)),
        ("add", check_binary(3, |t, a, b| t.add(a, b), &[3, 4], &[3, 4], &[3, 4], true)),
        ("add bias row", check_binary(4, |t, a, b| t.add(a, b), &[4], &[3, 4], &[3, 4], false)),
        ("mul", check_binary(5, |t, a, b| t.mul(a, b), &[3, 4], &[3, 4], &[3, 4], true)),
        ("relu", check_unary(6, |t, x| t.relu(x), |r| away_from_zero(r, &[3, 4]))),
        ("sigmoid", check_unary(7, |t, x| t.sigmoid(x), |r| random_tensor(r, &[3, 4], -3.0, 3.0))),
        ("log", check_unary(8, |t, x| t.log(x), |r| random_tensor(r, &[3, 4], 0.2, 3.0))),
        ("exp", check_unary(9, |t, x| t.exp(x), |r| random_tensor(r, &[3, 4], -2.0, 2.0))),
        ("affine", check_affine(10)),
        ("sum", check_sum(11)),
        ("clamp01", check_unary(12, |t, x| t.clamp01(x), |r| away_from_clamp_kinks(r, &[3, 4]))),
        ("softmax cross-entropy", check_cross_entropy(13)),
        ("mask objective", check_mask_objective(14)),
    ]
}
