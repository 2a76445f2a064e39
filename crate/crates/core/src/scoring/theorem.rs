//! Empirical check that temperature scaling with `T > 1` ranks a logit
//! vector with uneven non-max entries above one with even non-max
//! entries when both share the same max-softmax probability at `T = 1`.
//!
//! For a draw `φ_A` with unique max `a₁`, let `A = Σ_{j≥2} exp(a_j - a₁)`.
//! The partner `φ_B` keeps `b₁ = a₁` and sets every other entry to
//! `a₁ + ln(A / (k - 1))`, so both have the same `A` and hence the same
//! MSP at `T = 1`. Since `t ↦ t^{1/T}` is concave for `T > 1`, the sum
//! `Σ exp(x_j - x₁)^{1/T}` at fixed `A` is largest when the terms are
//! equal, which makes `MSP(φ_A; T) ≥ MSP(φ_B; T)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{OltError, Result};
use crate::scoring::temp_scaled_softmax;

/// Absolute slack allowed in `MSP(φ_A; T) ≥ MSP(φ_B; T)`.
pub const THEOREM_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct TheoremPair {
    pub uneven: Vec<f64>,
    pub even: Vec<f64>,
}

/// Builds the even partner of `uneven`, whose first entry must be its
/// strict unique maximum.
pub fn even_partner(uneven: &[f64]) -> Result<Vec<f64>> {
    let k = uneven.len();
    if k < 3 {
        return Err(OltError::InvalidArgument(format!("theorem pairs need k >= 3, got {k}")));
    }
    let top = uneven[0];
    if uneven[1..].iter().any(|&v| v >= top) {
        return Err(OltError::InvalidArgument("first logit must be the strict maximum".into()));
    }
    let mass: f64 = uneven[1..].iter().map(|&v| (v - top).exp()).sum();
    let gap = (mass / (k - 1) as f64).ln();
    let mut even = vec![top + gap; k];
    even[0] = top;
    Ok(even)
}

/// Draws `φ_A` with standard-normal entries scaled by `scale`, moves its
/// max to position 0 (redrawing on ties), and pairs it with its even
/// partner.
pub fn construct_theorem_pair(k: usize, scale: f64, rng: &mut impl Rng) -> Result<TheoremPair> {
    if k < 3 {
        return Err(OltError::InvalidArgument(format!("theorem pairs need k >= 3, got {k}")));
    }
    let normal = Normal::new(0.0, scale).map_err(|e| OltError::InvalidArgument(e.to_string()))?;
    loop {
        let mut uneven: Vec<f64> = (0..k).map(|_| normal.sample(rng)).collect();
        let top = crate::tensor::argmax(&uneven);
        uneven.swap(0, top);
        if uneven[1..].iter().all(|&v| v < uneven[0]) {
            let even = even_partner(&uneven)?;
            return Ok(TheoremPair { uneven, even });
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremCell {
    pub k: usize,
    pub temperature: f64,
    pub pairs: usize,
    pub violations: usize,
    /// Largest `MSP(φ_B; T) - MSP(φ_A; T)` seen (negative when every pair
    /// satisfies the inequality strictly).
    pub worst_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub cells: Vec<TheoremCell>,
    /// Largest `|MSP(φ_A; 1) - MSP(φ_B; 1)|` over all pairs.
    pub max_equality_error: f64,
}

impl TheoremReport {
    pub fn violations(&self) -> usize {
        self.cells.iter().map(|c| c.violations).sum()
    }
}

fn msp(logits: &[f64], t: f64) -> f64 {
    temp_scaled_softmax(logits, t)
        .expect("positive temperature")
        .into_iter()
        .fold(0.0, f64::max)
}

/// For every `k` and `T`, draws `pairs` constructions and counts pairs
/// with `MSP(φ_A; T) < MSP(φ_B; T) - tolerance`. With `swap_roles` the
/// even vector plays `φ_A`, which should produce violations.
pub fn verify_temperature_separation(
    pairs: usize,
    ks: &[usize],
    temperatures: &[f64],
    swap_roles: bool,
    rng: &mut impl Rng,
) -> Result<TheoremReport> {
    if let Some(&t) = temperatures.iter().find(|&&t| t.is_nan() || t <= 1.0) {
        return Err(OltError::InvalidArgument(format!("temperatures must exceed 1, got {t}")));
    }
    let mut cells: Vec<TheoremCell> = Vec::new();
    let mut max_equality_error: f64 = 0.0;
    for &k in ks {
        let mut row: Vec<TheoremCell> = temperatures
            .iter()
            .map(|&t| TheoremCell {
                k,
                temperature: t,
                pairs,
                violations: 0,
                worst_gap: f64::NEG_INFINITY,
            })
            .collect();
        for _ in 0..pairs {
            let pair = construct_theorem_pair(k, 2.0, rng)?;
            let (a, b) = if swap_roles {
                (&pair.even, &pair.uneven)
            } else {
                (&pair.uneven, &pair.even)
            };
            max_equality_error = max_equality_error.max((msp(a, 1.0) - msp(b, 1.0)).abs());
            for cell in &mut row {
                let gap = msp(b, cell.temperature) - msp(a, cell.temperature);
                cell.worst_gap = cell.worst_gap.max(gap);
                if gap > THEOREM_TOLERANCE {
                    cell.violations += 1;
                }
            }
        }
        cells.extend(row);
    }
    Ok(TheoremReport {
        cells,
        max_equality_error,
    })
}
