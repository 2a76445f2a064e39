//! Feed-forward relu classifier: hashed text features, forward passes,
//! and AdamW training with optional gradient masking.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::fnv1a;
use crate::error::{OltError, Result};
use crate::gates::Mask;
use crate::tensor::{matmul_into, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(input_dim: usize, num_classes: usize, seed: u64) -> Self {
        ModelConfig {
            input_dim,
            hidden_dims: vec![128, 64],
            num_classes,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(OltError::InvalidArgument("num_classes must be at least 2".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) || self.input_dim == 0 {
            return Err(OltError::InvalidArgument(
                "input_dim and hidden_dims must be positive and hidden_dims non-empty".into(),
            ));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every linear layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.num_classes));
        dims
    }

    pub fn layer_names(&self) -> Vec<String> {
        (0..=self.hidden_dims.len()).map(|i| format!("fc{i}")).collect()
    }
}

/// One affine map `x·W + b` with `W: [fan_in, fan_out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Trainable weights `θ`, the frozen construction-time snapshot `θ₀`, and
/// an optional binary mask over the weight matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: ModelConfig,
    layers: Vec<Layer>,
    init: Vec<Layer>,
    mask: Option<Mask>,
}

/// Logits and the last hidden activation for a batch.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub penultimate: Tensor,
}

impl ModelState {
    /// Uniform `±1/√fan_in` initialization for weights and biases, seeded
    /// by `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layers: Vec<Layer> = config
            .layer_dims()
            .into_iter()
            .zip(config.layer_names())
            .map(|((fan_in, fan_out), name)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut draw = |n: usize| -> Vec<f64> {
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                };
                let weight = Tensor::new(vec![fan_in, fan_out], draw(fan_in * fan_out)).unwrap();
                let bias = Tensor::new(vec![fan_out], draw(fan_out)).unwrap();
                Layer { name, weight, bias }
            })
            .collect();
        Ok(ModelState {
            config,
            init: layers.clone(),
            layers,
            mask: None,
        })
    }

    /// Assembles a state from explicit parts, checking shapes and the mask
    /// invariant.
    pub fn from_parts(config: ModelConfig, layers: Vec<Layer>, init: Vec<Layer>, mask: Option<Mask>) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        if layers.len() != dims.len() || init.len() != dims.len() {
            return Err(OltError::InvalidArgument(format!(
                "expected {} layers, got {} (init {})",
                dims.len(),
                layers.len(),
                init.len()
            )));
        }
        for ((layer, snap), (fan_in, fan_out)) in layers.iter().zip(&init).zip(dims) {
            for l in [layer, snap] {
                if l.weight.shape() != [fan_in, fan_out] || l.bias.shape() != [fan_out] {
                    return Err(OltError::Shape {
                        op: "model layer",
                        lhs: l.weight.shape().to_vec(),
                        rhs: vec![fan_in, fan_out],
                    });
                }
            }
        }
        let state = ModelState {
            config,
            layers,
            init,
            mask,
        };
        if let Some(mask) = &state.mask {
            mask.check_aligned(&state)?;
            if !state.mask_respected() {
                return Err(OltError::InvalidArgument("masked weights must be exactly zero".into()));
            }
        }
        Ok(state)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn init_snapshot(&self) -> &[Layer] {
        &self.init
    }

    pub fn mask(&self) -> Option<&Mask> {
        self.mask.as_ref()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// A fresh copy whose weights and biases are reset to `θ₀`, with the
    /// mask applied to the weights and installed for gradient masking.
    pub fn reset_to_init(&self, mask: Option<Mask>) -> Result<ModelState> {
        let mut state = ModelState {
            config: self.config.clone(),
            layers: self.init.clone(),
            init: self.init.clone(),
            mask: None,
        };
        if let Some(mask) = mask {
            state.install_mask(mask)?;
        }
        Ok(state)
    }

    /// Zeroes masked weights and keeps the mask for subsequent training.
    pub fn install_mask(&mut self, mask: Mask) -> Result<()> {
        mask.check_aligned(self)?;
        for (layer, m) in self.layers.iter_mut().zip(mask.layers()) {
            for (w, &keep) in layer.weight.data_mut().iter_mut().zip(m.data()) {
                if keep == 0.0 {
                    *w = 0.0;
                }
            }
        }
        self.mask = Some(mask);
        Ok(())
    }

    /// Multiplies every weight by a real-valued factor of the same layout.
    /// The init snapshot and any installed mask are untouched.
    pub fn scale_weights(&self, factors: &[Tensor]) -> Result<ModelState> {
        let mut state = self.clone();
        if factors.len() != state.layers.len() {
            return Err(OltError::InvalidArgument("one factor tensor per layer required".into()));
        }
        for (layer, f) in state.layers.iter_mut().zip(factors) {
            layer.weight = layer.weight.zip_map(f, "scale_weights", |w, m| w * m)?;
        }
        Ok(state)
    }

    /// True when every masked weight is exactly zero.
    pub fn mask_respected(&self) -> bool {
        match &self.mask {
            None => true,
            Some(mask) => self.layers.iter().zip(mask.layers()).all(|(l, m)| {
                l.weight
                    .data()
                    .iter()
                    .zip(m.data())
                    .all(|(&w, &keep)| keep != 0.0 || w == 0.0)
            }),
        }
    }

    /// Tape-free batched forward pass over `[n, input_dim]` features.
    /// `activation_clip` caps the penultimate activation before the output
    /// layer.
    pub fn forward_batch(&self, x: &Tensor, activation_clip: Option<f64>) -> Result<ForwardOutput> {
        let (n, d) = x.dims2("forward")?;
        if d != self.config.input_dim {
            return Err(OltError::Shape {
                op: "forward",
                lhs: x.shape().to_vec(),
                rhs: vec![n, self.config.input_dim],
            });
        }
        if !x.is_finite() {
            return Err(OltError::NonFinite { op: "forward" });
        }
        let last = self.layers.len() - 1;
        let mut h = x.data().to_vec();
        let mut width = d;
        let mut penultimate = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let out_w = layer.bias.len();
            let mut out = vec![0.0; n * out_w];
            matmul_into(&h, layer.weight.data(), &mut out, n, width, out_w);
            for row in out.chunks_mut(out_w) {
                for (o, &b) in row.iter_mut().zip(layer.bias.data()) {
                    *o += b;
                }
            }
            if i < last {
                for v in &mut out {
                    *v = v.max(0.0);
                }
                if i == last - 1 {
                    if let Some(c) = activation_clip {
                        out.iter_mut().for_each(|v| *v = v.min(c));
                    }
                    penultimate = out.clone();
                }
            }
            h = out;
            width = out_w;
        }
        let pen_w = self.layers[last].weight.shape()[0];
        Ok(ForwardOutput {
            logits: Tensor::new(vec![n, width], h)?,
            penultimate: Tensor::new(vec![n, pen_w], penultimate)?,
        })
    }

    /// Logits for a single feature vector.
    pub fn forward_logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let batch = Tensor::new(vec![1, x.len()], x.to_vec())?;
        Ok(self.forward_batch(&batch, None)?.logits.into_data())
    }

    /// Records the parameters as tape leaves, returning `(weight, bias)`
    /// handles per layer.
    pub fn record_params(&self, tape: &mut Tape) -> Vec<(Var, Var)> {
        self.layers
            .iter()
            .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
            .collect()
    }

    /// Records the forward graph for `x` using the given per-layer weight
    /// and bias handles. Returns `(logits, penultimate)`.
    pub fn record_forward(&self, tape: &mut Tape, params: &[(Var, Var)], x: Var) -> Result<(Var, Var)> {
        let last = params.len() - 1;
        let mut h = x;
        let mut penultimate = x;
        for (i, &(w, b)) in params.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            h = tape.add(z, b)?;
            if i < last {
                h = tape.relu(h)?;
                penultimate = h;
            }
        }
        Ok((h, penultimate))
    }
}

/// Features as a `[n, d]` matrix with integer labels in `0..k`.
#[derive(Clone, Debug)]
pub struct LabeledData {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledData {
    pub fn new(features: Tensor, labels: Vec<usize>) -> Result<Self> {
        let (n, _) = features.dims2("labeled data")?;
        if n != labels.len() {
            return Err(OltError::Shape {
                op: "labeled data",
                lhs: features.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        Ok(LabeledData { features, labels })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>) -> Result<Self> {
        LabeledData::new(Tensor::from_rows(rows)?, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Gathers the given rows into a contiguous batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(vec![indices.len(), d], data).unwrap(), labels)
    }

    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().position(|&y| y >= num_classes) {
            Some(i) => Err(OltError::InvalidArgument(format!(
                "label {} at row {i} out of range for {num_classes} classes",
                self.labels[i]
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64, sizes: &[usize]) -> Self {
        AdamW {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Advances the step counter; call once before the per-slot updates of
    /// one iteration.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, slot: usize, params: &mut [f64], grads: &[f64]) {
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let decay = self.learning_rate * self.weight_decay;
        let (m, v) = (&mut self.first[slot], &mut self.second[slot]);
        for i in 0..params.len() {
            let g = grads[i];
            params[i] -= decay * params[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Mean training loss per epoch.
pub type LossCurve = Vec<f64>;

/// Minimizes mean softmax cross-entropy with AdamW. When a mask is
/// installed, gradients are multiplied by it before every update.
pub fn train(model: &mut ModelState, data: &LabeledData, config: &TrainConfig) -> Result<LossCurve> {
    train_with_hook(model, data, config, |_, _| Ok(()))
}

/// [`train`] with a callback run at every epoch boundary.
pub fn train_with_hook(
    model: &mut ModelState,
    data: &LabeledData,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &ModelState) -> Result<()>,
) -> Result<LossCurve> {
    data.check_labels(model.num_classes())?;
    if data.dim() != model.config.input_dim {
        return Err(OltError::Shape {
            op: "train",
            lhs: data.features.shape().to_vec(),
            rhs: vec![data.len(), model.config.input_dim],
        });
    }
    if config.batch_size == 0 {
        return Err(OltError::InvalidArgument("batch_size must be positive".into()));
    }
    let sizes: Vec<usize> = model
        .layers
        .iter()
        .flat_map(|l| [l.weight.len(), l.bias.len()])
        .collect();
    let mut opt = AdamW::new(config.learning_rate, config.weight_decay, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let (xb, yb) = data.batch(chunk);
            let mut tape = Tape::new();
            let params = model.record_params(&mut tape);
            let x = tape.leaf(xb);
            let (logits, _) = model.record_forward(&mut tape, &params, x)?;
            let loss = tape.softmax_cross_entropy(logits, &yb)?;
            let loss_value = tape.value(loss).item();
            if !loss_value.is_finite() {
                return Err(OltError::Divergence {
                    phase: "train",
                    epoch,
                    loss: loss_value,
                });
            }
            tape.backward(loss)?;
            total += loss_value;
            batches += 1;

            opt.begin_step();
            for (li, (w, b)) in params.iter().enumerate() {
                let mut gw = tape.grad(*w).into_data();
                if let Some(mask) = &model.mask {
                    for (g, &keep) in gw.iter_mut().zip(mask.layers()[li].data()) {
                        *g *= keep;
                    }
                }
                let gb = tape.grad(*b).into_data();
                let layer = &mut model.layers[li];
                opt.update(2 * li, layer.weight.data_mut(), &gw);
                opt.update(2 * li + 1, layer.bias.data_mut(), &gb);
            }
        }
        curve.push(total / batches.max(1) as f64);
        on_epoch(epoch, model)?;
    }
    Ok(curve)
}

/// Mean cross-entropy of `model` on `data` without recording gradients.
pub fn mean_loss(model: &ModelState, data: &LabeledData) -> Result<f64> {
    let out = model.forward_batch(&data.features, None)?;
    let mut total = 0.0;
    for (i, &y) in data.labels.iter().enumerate() {
        let row = out.logits.row(i);
        total += crate::tensor::log_sum_exp(row) - row[y];
    }
    Ok(total / data.len() as f64)
}

pub fn accuracy(model: &ModelState, data: &LabeledData) -> Result<f64> {
    let out = model.forward_batch(&data.features, None)?;
    let correct = data
        .labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| crate::tensor::argmax(out.logits.row(*i)) == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Hashed bag-of-words: lowercase, split on non-alphanumerics, FNV-1a
/// each token into `dim` buckets, count, then L2-normalize.
pub fn featurize(text: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim.max(1)];
    let lower = text.to_lowercase();
    for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        v[(fnv1a(token.as_bytes()) % dim.max(1) as u64) as usize] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}
