//! JSON-lines datasets, the IND/OOD class split, and the synthetic
//! Gaussian generator.
//!
//! One record per line:
//!
//! ```text
//! {"id": "ex-1", "text": "book a flight", "label": "travel"}
//! {"id": "ex-2", "features": [0.1, -0.4], "label": "oos"}
//! ```
//!
//! A file uses either `text` or `features`, never both.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::classifier::featurize;
use crate::error::{OltError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Input {
    Text(String),
    Features(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub input: Input,
    pub label: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    features: Option<Vec<f64>>,
    label: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    /// Every label name in the file, sorted, mapped to its position.
    pub label_map: BTreeMap<String, usize>,
}

impl Dataset {
    pub fn from_examples(examples: Vec<Example>) -> Result<Self> {
        let mut seen = HashSet::new();
        for ex in &examples {
            if !seen.insert(ex.id.as_str()) {
                return Err(OltError::Dataset(format!("duplicate id `{}`", ex.id)));
            }
        }
        let labels: BTreeSet<&str> = examples.iter().map(|e| e.label.as_str()).collect();
        let label_map = labels
            .into_iter()
            .enumerate()
            .map(|(i, l)| (l.to_string(), i))
            .collect();
        Ok(Dataset { examples, label_map })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn uses_features(&self) -> bool {
        matches!(self.examples.first().map(|e| &e.input), Some(Input::Features(_)))
    }

    /// Width of the encoded inputs: the feature length for feature files,
    /// `hash_dim` for text.
    pub fn input_dim(&self, hash_dim: usize) -> usize {
        match self.examples.first().map(|e| &e.input) {
            Some(Input::Features(f)) => f.len(),
            _ => hash_dim,
        }
    }

    /// Encodes the given examples as a `[n, d]` matrix.
    pub fn encode(&self, indices: &[usize], hash_dim: usize) -> Result<Tensor> {
        let d = self.input_dim(hash_dim);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            match &self.examples[i].input {
                Input::Text(t) => data.extend(featurize(t, d)),
                Input::Features(f) => data.extend_from_slice(f),
            }
        }
        Tensor::new(vec![indices.len().max(1), d], data)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ex in &self.examples {
            let (text, features) = match &ex.input {
                Input::Text(t) => (Some(t.clone()), None),
                Input::Features(f) => (None, Some(f.clone())),
            };
            let rec = Record {
                id: ex.id.clone(),
                text,
                features,
                label: ex.label.clone(),
            };
            let _ = writeln!(out, "{}", serde_json::to_string(&rec).expect("record serializes"));
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| OltError::io(path, e))
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let raw = std::fs::read_to_string(path).map_err(|e| OltError::io(path, e))?;
    parse_jsonl(&raw)
}

pub fn parse_jsonl(raw: &str) -> Result<Dataset> {
    let mut examples = Vec::new();
    let mut seen = HashSet::new();
    let mut uses_features: Option<bool> = None;
    let mut width: Option<usize> = None;
    for (n, line) in raw.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| OltError::DatasetLine {
            line: line_no,
            message,
        };
        let rec: Record = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let input = match (rec.text, rec.features) {
            (Some(t), None) => Input::Text(t),
            (None, Some(f)) => {
                if f.is_empty() || f.iter().any(|v| !v.is_finite()) {
                    return Err(bad("features must be non-empty and finite".into()));
                }
                if *width.get_or_insert(f.len()) != f.len() {
                    return Err(bad(format!("expected {} features, got {}", width.unwrap(), f.len())));
                }
                Input::Features(f)
            }
            (Some(_), Some(_)) => return Err(bad("record has both `text` and `features`".into())),
            (None, None) => return Err(bad("record needs `text` or `features`".into())),
        };
        let is_features = matches!(input, Input::Features(_));
        if *uses_features.get_or_insert(is_features) != is_features {
            return Err(bad("file mixes `text` and `features` records".into()));
        }
        if !seen.insert(rec.id.clone()) {
            return Err(bad(format!("duplicate id `{}`", rec.id)));
        }
        examples.push(Example {
            id: rec.id,
            input,
            label: rec.label,
        });
    }
    Dataset::from_examples(examples)
}

/// Per-class fractions routed to train and validation; the rest is test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.6,
            validation: 0.2,
        }
    }
}

/// Example indices per split, plus the class assignment.
///
/// `ind_classes[i]` is the name of IND class `i`. OOD examples carry no
/// class index and appear only in `test`.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub ind_classes: Vec<String>,
    pub ood_classes: Vec<String>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    class_of: Vec<Option<usize>>,
}

impl Split {
    /// IND class index of an example, `None` for OOD.
    pub fn class_of(&self, example: usize) -> Option<usize> {
        self.class_of[example]
    }

    pub fn num_classes(&self) -> usize {
        self.ind_classes.len()
    }
}

/// Chooses IND classes and routes examples to train/validation/test.
///
/// If `designated_ood` names a label present in the file, every other
/// label is IND and the designated label is OOD. Otherwise
/// `⌈ind_fraction · classes⌉` classes are drawn as IND with `seed`. Every
/// OOD example goes to the test split.
pub fn split_ind_ood(
    dataset: &Dataset,
    ind_fraction: f64,
    seed: u64,
    designated_ood: Option<&str>,
    fractions: SplitFractions,
) -> Result<Split> {
    if !(ind_fraction > 0.0 && ind_fraction < 1.0) {
        return Err(OltError::InvalidArgument(format!(
            "ind fraction must lie in (0, 1), got {ind_fraction}"
        )));
    }
    if !(fractions.train > 0.0 && fractions.validation >= 0.0 && fractions.train + fractions.validation < 1.0) {
        return Err(OltError::InvalidArgument("split fractions must leave a test share".into()));
    }
    let classes: Vec<&str> = dataset.label_map.keys().map(String::as_str).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let (ind, ood): (Vec<String>, Vec<String>) = match designated_ood {
        Some(label) if dataset.label_map.contains_key(label) => (
            classes.iter().filter(|&&c| c != label).map(|c| c.to_string()).collect(),
            vec![label.to_string()],
        ),
        _ => {
            if classes.len() < 4 {
                return Err(OltError::Dataset(format!(
                    "an IND/OOD class split needs at least 4 classes, found {}",
                    classes.len()
                )));
            }
            let n_ind = ((ind_fraction * classes.len() as f64) - 1e-9).ceil() as usize;
            let mut shuffled = classes.clone();
            shuffled.shuffle(&mut rng);
            let mut ind: Vec<String> = shuffled[..n_ind].iter().map(|c| c.to_string()).collect();
            let mut ood: Vec<String> = shuffled[n_ind..].iter().map(|c| c.to_string()).collect();
            ind.sort();
            ood.sort();
            (ind, ood)
        }
    };
    if ind.len() < 2 {
        return Err(OltError::Dataset(format!(
            "split leaves {} IND classes; at least 2 are required",
            ind.len()
        )));
    }
    if ood.is_empty() {
        return Err(OltError::Dataset("split leaves no OOD classes".into()));
    }

    let ind_index: BTreeMap<&str, usize> = ind.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let class_of: Vec<Option<usize>> = dataset
        .examples
        .iter()
        .map(|e| ind_index.get(e.label.as_str()).copied())
        .collect();

    let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in dataset.examples.iter().enumerate() {
        by_label.entry(e.label.as_str()).or_default().push(i);
    }
    let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (label, mut members) in by_label {
        members.shuffle(&mut rng);
        let n = members.len();
        let n_train = (fractions.train * n as f64).round() as usize;
        let n_val = (fractions.validation * n as f64).round() as usize;
        let n_val = n_val.min(n - n_train.min(n));
        let n_train = n_train.min(n);
        if ind_index.contains_key(label) {
            train.extend_from_slice(&members[..n_train]);
            validation.extend_from_slice(&members[n_train..n_train + n_val]);
            test.extend_from_slice(&members[n_train + n_val..]);
        } else {
            test.extend_from_slice(&members);
        }
    }
    train.sort_unstable();
    validation.sort_unstable();
    test.sort_unstable();
    Ok(Split {
        ind_classes: ind,
        ood_classes: ood,
        train,
        validation,
        test,
        class_of,
    })
}

/// Parameters of the synthetic Gaussian task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub k_ind: usize,
    pub k_ood: usize,
    pub dim: usize,
    pub n_per_class: usize,
    /// Per-coordinate standard deviation around each class mean.
    pub spread: f64,
    pub seed: u64,
}

/// Label carried by every held-out (OOD) example of a synthetic dataset.
pub const SYNTH_OOD_LABEL: &str = "oos";

/// Class means on the unit sphere with isotropic Gaussian examples around
/// them. The `k_ood` held-out clusters share the label [`SYNTH_OOD_LABEL`].
pub fn synth_gaussian_dataset(spec: &SynthSpec) -> Result<Dataset> {
    if spec.k_ind < 2 || spec.dim == 0 || spec.n_per_class == 0 {
        return Err(OltError::InvalidArgument(
            "synthetic task needs k_ind >= 2, dim >= 1, n_per_class >= 1".into(),
        ));
    }
    if !(spec.spread >= 0.0 && spec.spread.is_finite()) {
        return Err(OltError::InvalidArgument("spread must be finite and >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let means: Vec<Vec<f64>> = (0..spec.k_ind + spec.k_ood)
        .map(|_| {
            let v: Vec<f64> = (0..spec.dim).map(|_| unit.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();

    let mut examples = Vec::with_capacity(means.len() * spec.n_per_class);
    for (c, mean) in means.iter().enumerate() {
        let label = if c < spec.k_ind {
            format!("class_{c:02}")
        } else {
            SYNTH_OOD_LABEL.to_string()
        };
        for _ in 0..spec.n_per_class {
            let features = mean
                .iter()
                .map(|&m| m + spec.spread * unit.sample(&mut rng))
                .collect();
            examples.push(Example {
                id: format!("ex-{:06}", examples.len()),
                input: Input::Features(features),
                label: label.clone(),
            });
        }
    }
    Dataset::from_examples(examples)
}

#[cfg(test)]
mod tests {
    use super::*;

    const THREE: &str = r#"{"id": "a", "text": "book a flight", "label": "travel"}
{"id": "b", "text": "play some jazz", "label": "music"}
{"id": "c", "text": "what's my balance", "label": "bank"}
"#;

    #[test]
    fn loads_well_formed_file() {
        let d = parse_jsonl(THREE).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.label_map.len(), 3);
        assert_eq!(d, parse_jsonl(THREE).unwrap());
        assert!(!d.uses_features());
    }

    #[test]
    fn missing_label_names_the_line() {
        let raw = "{\"id\": \"a\", \"text\": \"x\", \"label\": \"l\"}\n{\"id\": \"b\", \"text\": \"y\"}\n";
        match parse_jsonl(raw) {
            Err(OltError::DatasetLine { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("label"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_mixed_inputs_duplicates_and_both_fields() {
        let mixed = "{\"id\": \"a\", \"text\": \"x\", \"label\": \"l\"}\n{\"id\": \"b\", \"features\": [1.0], \"label\": \"l\"}\n";
        assert!(matches!(parse_jsonl(mixed), Err(OltError::DatasetLine { line: 2, .. })));
        let dup = "{\"id\": \"a\", \"text\": \"x\", \"label\": \"l\"}\n{\"id\": \"a\", \"text\": \"y\", \"label\": \"l\"}\n";
        assert!(parse_jsonl(dup).unwrap_err().to_string().contains("duplicate"));
        let both = "{\"id\": \"a\", \"text\": \"x\", \"features\": [1.0], \"label\": \"l\"}\n";
        assert!(parse_jsonl(both).is_err());
        let ragged = "{\"id\": \"a\", \"features\": [1.0], \"label\": \"l\"}\n{\"id\": \"b\", \"features\": [1.0, 2.0], \"label\": \"l\"}\n";
        assert!(matches!(parse_jsonl(ragged), Err(OltError::DatasetLine { line: 2, .. })));
    }

    fn twenty_classes() -> Dataset {
        synth_gaussian_dataset(&SynthSpec {
            k_ind: 20,
            k_ood: 0,
            dim: 4,
            n_per_class: 10,
            spread: 0.1,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn random_split_takes_three_quarters_of_classes() {
        let d = twenty_classes();
        let s = split_ind_ood(&d, 0.75, 1, Some(SYNTH_OOD_LABEL), SplitFractions::default()).unwrap();
        assert_eq!(s.ind_classes.len(), 15);
        assert_eq!(s.ood_classes.len(), 5);
        assert!(s.train.iter().chain(&s.validation).all(|&i| s.class_of(i).is_some()));
        assert!(s.test.iter().any(|&i| s.class_of(i).is_none()));
    }

    #[test]
    fn split_is_seeded() {
        let d = twenty_classes();
        let f = SplitFractions::default();
        let a = split_ind_ood(&d, 0.75, 5, None, f).unwrap();
        assert_eq!(a, split_ind_ood(&d, 0.75, 5, None, f).unwrap());
        let distinct: BTreeSet<Vec<String>> = (0..10)
            .map(|seed| split_ind_ood(&d, 0.75, seed, None, f).unwrap().ind_classes)
            .collect();
        assert!(distinct.len() >= 2);
    }

    #[test]
    fn split_errors() {
        let d = parse_jsonl(THREE).unwrap();
        assert!(split_ind_ood(&d, 0.75, 0, None, SplitFractions::default()).is_err());
        let d = twenty_classes();
        assert!(split_ind_ood(&d, 0.05, 0, None, SplitFractions::default()).is_err());
        assert!(split_ind_ood(&d, 1.0, 0, None, SplitFractions::default()).is_err());
    }

    #[test]
    fn designated_label_bypasses_random_choice() {
        let d = synth_gaussian_dataset(&SynthSpec {
            k_ind: 3,
            k_ood: 2,
            dim: 4,
            n_per_class: 10,
            spread: 0.1,
            seed: 0,
        })
        .unwrap();
        let s = split_ind_ood(&d, 0.75, 9, Some(SYNTH_OOD_LABEL), SplitFractions::default()).unwrap();
        assert_eq!(s.ind_classes, vec!["class_00", "class_01", "class_02"]);
        assert_eq!(s.ood_classes, vec![SYNTH_OOD_LABEL]);
        let ood_in_test = s.test.iter().filter(|&&i| s.class_of(i).is_none()).count();
        // both held-out clusters share one label and all 20 land in test
        assert_eq!(ood_in_test, 20);
    }

    #[test]
    fn synthetic_file_round_trips_and_is_deterministic() {
        let spec = SynthSpec {
            k_ind: 3,
            k_ood: 1,
            dim: 5,
            n_per_class: 4,
            spread: 0.2,
            seed: 42,
        };
        let a = synth_gaussian_dataset(&spec).unwrap();
        let text = a.to_jsonl();
        assert_eq!(text, synth_gaussian_dataset(&spec).unwrap().to_jsonl());
        let back = parse_jsonl(&text).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.input_dim(99), 5);
    }

    #[test]
    fn text_examples_are_hashed() {
        let d = parse_jsonl(THREE).unwrap();
        let x = d.encode(&[0, 1], 32).unwrap();
        assert_eq!(x.shape(), &[2, 32]);
        assert_eq!(x.row(0), featurize("book a flight", 32).as_slice());
    }
}
