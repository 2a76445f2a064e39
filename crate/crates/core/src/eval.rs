//! Detection metrics, threshold selection and calibration diagnostics.
//!
//! Every score is oriented so that higher means more in-domain; a sample
//! is accepted as IND when `score >= threshold`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{OltError, Result};
use crate::tensor::{argmax, softmax};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub score: f64,
    pub is_ood: bool,
    pub predicted: usize,
    /// IND class index; `None` for OOD samples.
    pub true_class: Option<usize>,
}

impl ScoreRecord {
    pub fn ind(score: f64, predicted: usize, true_class: usize) -> Self {
        ScoreRecord {
            score,
            is_ood: false,
            predicted,
            true_class: Some(true_class),
        }
    }

    pub fn ood(score: f64, predicted: usize) -> Self {
        ScoreRecord {
            score,
            is_ood: true,
            predicted,
            true_class: None,
        }
    }
}

fn split_scores(records: &[ScoreRecord]) -> (Vec<f64>, Vec<f64>) {
    let mut ind = Vec::new();
    let mut ood = Vec::new();
    for r in records {
        if r.is_ood {
            ood.push(r.score);
        } else {
            ind.push(r.score);
        }
    }
    (ind, ood)
}

/// Probability that a random IND sample outscores a random OOD sample,
/// ties counting one half. Computed from mid-ranks (Mann-Whitney U).
pub fn auroc(records: &[ScoreRecord]) -> Result<f64> {
    let n_ind = records.iter().filter(|r| !r.is_ood).count();
    let n_ood = records.len() - n_ind;
    if n_ind == 0 || n_ood == 0 {
        return Err(OltError::InvalidArgument(
            "auroc needs at least one IND and one OOD record".into(),
        ));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].score.total_cmp(&records[b].score));

    // Twice the rank sum keeps mid-ranks integral.
    let mut twice_rank_sum_ind: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && records[order[j + 1]].score == records[order[i]].score {
            j += 1;
        }
        // ranks i+1 ..= j+1, mid-rank (i + j + 2) / 2
        let twice_mid = (i + j + 2) as u128;
        let ind_in_group = order[i..=j].iter().filter(|&&k| !records[k].is_ood).count() as u128;
        twice_rank_sum_ind += twice_mid * ind_in_group;
        i = j + 1;
    }
    // U = R - n(n+1)/2 ; in doubled units 2U = 2R - n(n+1)
    let n = n_ind as u128;
    let twice_u = twice_rank_sum_ind - n * (n + 1);
    Ok(twice_u as f64 / (2.0 * n_ind as f64 * n_ood as f64))
}

/// TNR at a TPR level, with the threshold that achieves it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TprOperatingPoint {
    pub tnr: f64,
    pub threshold: f64,
}

/// Minimum IND count for a TPR-level threshold.
pub const MIN_IND_FOR_TPR: usize = 20;

/// Largest threshold keeping at least `tpr_level` of IND scores at or
/// above it (empirical quantile, no interpolation), and the fraction of
/// OOD scores strictly below it.
pub fn tnr_at_tpr(records: &[ScoreRecord], tpr_level: f64) -> Result<TprOperatingPoint> {
    let (mut ind, ood) = split_scores(records);
    if ind.len() < MIN_IND_FOR_TPR {
        return Err(OltError::InvalidArgument(format!(
            "tnr_at_tpr needs at least {MIN_IND_FOR_TPR} IND records, got {}",
            ind.len()
        )));
    }
    if ood.is_empty() {
        return Err(OltError::InvalidArgument("tnr_at_tpr needs OOD records".into()));
    }
    if !(tpr_level > 0.0 && tpr_level <= 1.0) {
        return Err(OltError::InvalidArgument(format!("tpr level must lie in (0, 1], got {tpr_level}")));
    }
    ind.sort_by(|a, b| b.total_cmp(a));
    let keep = ((tpr_level * ind.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let threshold = ind[keep - 1];
    let rejected = ood.iter().filter(|&&s| s < threshold).count();
    Ok(TprOperatingPoint {
        tnr: rejected as f64 / ood.len() as f64,
        threshold,
    })
}

/// A record is correct when it is OOD and rejected, or IND, accepted and
/// assigned its true class.
pub fn accuracy_with_rejection(records: &[ScoreRecord], threshold: f64) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let correct = records
        .iter()
        .filter(|r| {
            if r.is_ood {
                r.score < threshold
            } else {
                r.score >= threshold && Some(r.predicted) == r.true_class
            }
        })
        .count();
    correct as f64 / records.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
    /// Mean confidence in the bin, 0 when empty.
    pub confidence: f64,
    /// Fraction correct in the bin, 0 when empty.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub bins: Vec<Bin>,
}

impl ReliabilityBins {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// `bin_low,bin_high,count,confidence,accuracy` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,count,confidence,accuracy\n");
        for b in &self.bins {
            let _ = writeln!(out, "{},{},{},{},{}", b.low, b.high, b.count, b.confidence, b.accuracy);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub bins: ReliabilityBins,
    pub ece: f64,
    pub mce: f64,
}

/// Equal-width reliability bins over `(confidence, correct)` pairs.
/// Bin `b` covers `(b/n, (b+1)/n]`; confidence 0 falls in the first bin.
pub fn reliability(samples: &[(f64, bool)], num_bins: usize) -> Result<Calibration> {
    if num_bins == 0 {
        return Err(OltError::InvalidArgument("need at least one bin".into()));
    }
    if let Some((c, _)) = samples.iter().find(|(c, _)| !(0.0..=1.0).contains(c)) {
        return Err(OltError::InvalidArgument(format!("confidence {c} outside [0, 1]")));
    }
    let mut count = vec![0usize; num_bins];
    let mut conf_sum = vec![0.0; num_bins];
    let mut correct = vec![0usize; num_bins];
    for &(c, ok) in samples {
        let b = ((c * num_bins as f64).ceil() as usize).clamp(1, num_bins) - 1;
        count[b] += 1;
        conf_sum[b] += c;
        correct[b] += usize::from(ok);
    }
    let n = samples.len().max(1) as f64;
    let mut ece = 0.0;
    let mut mce: f64 = 0.0;
    let bins = (0..num_bins)
        .map(|b| {
            let (confidence, accuracy) = if count[b] > 0 {
                let cnt = count[b] as f64;
                (conf_sum[b] / cnt, correct[b] as f64 / cnt)
            } else {
                (0.0, 0.0)
            };
            if count[b] > 0 {
                let gap = (accuracy - confidence).abs();
                ece += count[b] as f64 / n * gap;
                mce = mce.max(gap);
            }
            Bin {
                low: b as f64 / num_bins as f64,
                high: (b + 1) as f64 / num_bins as f64,
                count: count[b],
                confidence,
                accuracy,
            }
        })
        .collect();
    Ok(Calibration {
        bins: ReliabilityBins { bins },
        ece,
        mce,
    })
}

/// Temperature minimizing mean negative log-likelihood of `labels` under
/// `softmax(logits / T)`, by golden-section search on `ln T`.
pub fn fit_temperature(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(OltError::InvalidArgument("fit_temperature needs matching, non-empty inputs".into()));
    }
    let nll = |log_t: f64| -> f64 {
        let t = log_t.exp();
        logits
            .iter()
            .zip(labels)
            .map(|(z, &y)| {
                let scaled: Vec<f64> = z.iter().map(|v| v / t).collect();
                crate::tensor::log_sum_exp(&scaled) - scaled[y]
            })
            .sum::<f64>()
            / logits.len() as f64
    };
    let (mut lo, mut hi) = (0.01f64.ln(), 100f64.ln());
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let (mut f1, mut f2) = (nll(x1), nll(x2));
    for _ in 0..100 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = nll(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = nll(x2);
        }
    }
    Ok(((lo + hi) / 2.0).exp())
}

/// `(max softmax(z / T), argmax z == label)` for each sample.
pub fn confidence_pairs(logits: &[Vec<f64>], labels: &[usize], temperature: f64) -> Vec<(f64, bool)> {
    logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            let scaled: Vec<f64> = z.iter().map(|v| v / temperature).collect();
            let p = softmax(&scaled);
            let conf = p.iter().copied().fold(0.0, f64::max);
            (conf, argmax(z) == y)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub scorer: String,
    pub temperature: f64,
    pub acc: f64,
    pub auroc: f64,
    pub tnr95: f64,
    pub fnr95: f64,
    pub ece: f64,
    pub mce: f64,
    pub threshold: f64,
    pub bins: ReliabilityBins,
    /// IND-only closed-set accuracy (argmax vs label), no rejection.
    pub ind_accuracy: f64,
}

/// TPR level used by every report.
pub const TPR_LEVEL: f64 = 0.95;
pub const NUM_BINS: usize = 10;

impl EvalReport {
    /// Builds a report from scored records and per-IND-sample
    /// `(confidence, correct)` pairs for calibration.
    pub fn build(
        model: &str,
        scorer: &str,
        temperature: f64,
        records: &[ScoreRecord],
        ind_confidence: &[(f64, bool)],
    ) -> Result<Self> {
        let op = tnr_at_tpr(records, TPR_LEVEL)?;
        let cal = reliability(ind_confidence, NUM_BINS)?;
        let ind: Vec<&ScoreRecord> = records.iter().filter(|r| !r.is_ood).collect();
        let ind_accuracy =
            ind.iter().filter(|r| Some(r.predicted) == r.true_class).count() as f64 / ind.len() as f64;
        Ok(EvalReport {
            model: model.to_string(),
            scorer: scorer.to_string(),
            temperature,
            acc: accuracy_with_rejection(records, op.threshold),
            auroc: auroc(records)?,
            tnr95: op.tnr,
            fnr95: 1.0 - op.tnr,
            ece: cal.ece,
            mce: cal.mce,
            threshold: op.threshold,
            bins: cal.bins,
            ind_accuracy,
        })
    }

    /// Checks rate ranges and the `fnr95 = 1 - tnr95` identity.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("acc", self.acc),
            ("auroc", self.auroc),
            ("tnr95", self.tnr95),
            ("fnr95", self.fnr95),
            ("ece", self.ece),
            ("mce", self.mce),
            ("ind_accuracy", self.ind_accuracy),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(OltError::InvalidArgument(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if (self.fnr95 - (1.0 - self.tnr95)).abs() > 1e-12 {
            return Err(OltError::InvalidArgument("fnr95 != 1 - tnr95".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(ind: &[f64], ood: &[f64]) -> Vec<ScoreRecord> {
        ind.iter()
            .map(|&s| ScoreRecord::ind(s, 0, 0))
            .chain(ood.iter().map(|&s| ScoreRecord::ood(s, 0)))
            .collect()
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&recs(&[0.9, 0.8], &[0.1, 0.2])).unwrap(), 1.0);
        assert_eq!(auroc(&recs(&[0.5, 0.5], &[0.5, 0.5, 0.5])).unwrap(), 0.5);
        assert_eq!(auroc(&recs(&[0.9, 0.3], &[0.5, 0.1])).unwrap(), 0.75);
        assert!(auroc(&recs(&[0.9], &[])).is_err());
    }

    #[test]
    fn tnr_threshold_on_hundredths() {
        let ind: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
        let ood = [0.01, 0.05, 0.059, 0.06, 0.5];
        let op = tnr_at_tpr(&recs(&ind, &ood), 0.95).unwrap();
        assert_eq!(op.threshold, 0.06);
        assert_eq!(op.tnr, 3.0 / 5.0);
    }

    #[test]
    fn tnr_on_identical_multisets_is_one_minus_level() {
        let s: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let op = tnr_at_tpr(&recs(&s, &s), 0.95).unwrap();
        assert!((op.tnr - 0.05).abs() < 1e-12);
    }

    #[test]
    fn tnr_perfect_separation_and_errors() {
        let ind: Vec<f64> = (0..20).map(|i| 10.0 + i as f64).collect();
        assert_eq!(tnr_at_tpr(&recs(&ind, &[0.0, 1.0]), 0.95).unwrap().tnr, 1.0);
        assert!(tnr_at_tpr(&recs(&ind[..19], &[0.0]), 0.95).is_err());
    }

    #[test]
    fn accuracy_with_rejection_cases() {
        let all_ood = recs(&[], &[0.1, 0.9]);
        assert_eq!(accuracy_with_rejection(&all_ood, f64::INFINITY), 1.0);
        let all_ind = vec![ScoreRecord::ind(0.3, 1, 1), ScoreRecord::ind(0.9, 2, 2)];
        assert_eq!(accuracy_with_rejection(&all_ind, f64::NEG_INFINITY), 1.0);
        let mixed = vec![
            ScoreRecord::ind(0.9, 1, 1),
            ScoreRecord::ind(0.8, 0, 1), // accepted but misclassified
            ScoreRecord::ood(0.2, 0),
            ScoreRecord::ood(0.5, 0),
        ];
        // at 0.5 the last record ties the threshold and is accepted as IND
        assert_eq!(accuracy_with_rejection(&mixed, 0.5), 0.5);
        assert_eq!(accuracy_with_rejection(&mixed, 0.6), 0.75);
    }

    #[test]
    fn reliability_cases() {
        let oracle = vec![(1.0, true); 50];
        let c = reliability(&oracle, 10).unwrap();
        assert_eq!((c.ece, c.mce), (0.0, 0.0));
        assert_eq!(c.bins.total(), 50);

        let half: Vec<(f64, bool)> = (0..100).map(|i| (0.9, i % 2 == 0)).collect();
        let c = reliability(&half, 10).unwrap();
        assert!((c.ece - 0.4).abs() < 1e-12);
        assert!((c.mce - 0.4).abs() < 1e-12);
        assert_eq!(c.bins.bins.iter().filter(|b| b.count > 0).count(), 1);
        assert_eq!(c.bins.bins[8].count, 100);
        assert!(reliability(&[(1.5, true)], 10).is_err());
    }

    #[test]
    fn csv_has_header_and_one_row_per_bin() {
        let c = reliability(&[(0.05, true), (0.95, false)], 10).unwrap();
        let csv = c.bins.to_csv();
        assert_eq!(csv.lines().count(), 11);
        assert!(csv.starts_with("bin_low,bin_high,count,confidence,accuracy"));
    }

    #[test]
    fn fitted_temperature_recovers_scale() {
        // Labels drawn so that softmax(z / 2) is calibrated: with two
        // classes and logit gap g, P(class 0) = sigmoid(g / 2).
        let mut logits = Vec::new();
        let mut labels = Vec::new();
        for i in 0..2000 {
            let g = 4.0 * ((i % 100) as f64 / 100.0 - 0.5);
            let p0 = crate::tensor::sigmoid(g / 2.0);
            let frac = ((i / 100) as f64 + 0.5) / 20.0;
            logits.push(vec![g, 0.0]);
            labels.push(if frac < p0 { 0 } else { 1 });
        }
        let t = fit_temperature(&logits, &labels).unwrap();
        assert!((t - 2.0).abs() < 0.15, "{t}");
    }
}
