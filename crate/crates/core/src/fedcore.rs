//! Federated learning core: datasets, non-IID partitioning, local training, FedAvg.
//!
//! The model is a one-hidden-layer MLP (ReLU, softmax cross-entropy) stored as a flat
//! [`ModelParams`] vector in a fixed layer order. That flat vector is what gets hashed,
//! signed and aggregated.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_HIDDEN: usize = 32;

const ADAM_BETA1: f32 = 0.9;
const ADAM_BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),
    #[error("cannot split {samples} samples across {clients} clients")]
    TooManyClients { clients: usize, samples: usize },
    #[error("invalid partition parameters: {0}")]
    InvalidPartition(String),
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("no client updates to aggregate")]
    EmptyUpdateSet,
    #[error("csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f32>,
    labels: Vec<u32>,
    n_features: usize,
    n_classes: usize,
}

impl Dataset {
    /// `features` is row-major, `labels.len()` rows of `n_features` values.
    pub fn new(features: Vec<f32>, n_features: usize, labels: Vec<u32>, n_classes: usize) -> Result<Self, FedError> {
        if labels.is_empty() {
            return Err(FedError::InvalidDimensions("dataset has no samples".into()));
        }
        if n_features == 0 || n_classes == 0 {
            return Err(FedError::InvalidDimensions("n_features and n_classes must be positive".into()));
        }
        if features.len() != labels.len() * n_features {
            return Err(FedError::InvalidDimensions(format!(
                "{} feature values for {} samples of width {n_features}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= n_classes) {
            return Err(FedError::InvalidDimensions(format!("label {bad} >= n_classes {n_classes}")));
        }
        Ok(Self { features, labels, n_features, n_classes })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset { features, labels, n_features: self.n_features, n_classes: self.n_classes }
    }

    /// Per-class sample counts over `indices`.
    pub fn class_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut hist = vec![0; self.n_classes];
        for &i in indices {
            hist[self.labels[i] as usize] += 1;
        }
        hist
    }

    /// Shuffled deterministic train/test split; both sides keep at least one sample.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<TrainTestSplit, FedError> {
        let n = self.n_samples();
        if n < 2 {
            return Err(FedError::InvalidDimensions("need at least 2 samples to split".into()));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
        Ok(TrainTestSplit { train: self.subset(&order[..n_train]), test: self.subset(&order[n_train..]) })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTestSplit {
    pub train: Dataset,
    pub test: Dataset,
}

/// Gaussian-blob classification task standing in for image/sensor datasets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub n_features: usize,
    pub n_classes: usize,
    /// Standard deviation of the class means; samples have unit noise around them.
    pub separation: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { n_samples: 2500, n_features: 16, n_classes: 10, separation: 1.5 }
    }
}

impl SyntheticSpec {
    pub fn generate(&self, seed: u64) -> Result<TrainTestSplit, FedError> {
        let SyntheticSpec { n_samples, n_features, n_classes, separation } = *self;
        if n_classes < 2 || n_samples < n_classes || n_features == 0 {
            return Err(FedError::InvalidDimensions(format!(
                "need n_samples >= n_classes >= 2 and n_features >= 1 (got {n_samples}, {n_classes}, {n_features})"
            )));
        }
        if !(separation.is_finite() && separation > 0.0) {
            return Err(FedError::InvalidDimensions(format!("separation must be positive, got {separation}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let means_dist = Normal::new(0.0, separation).expect("positive std");
        let noise = Normal::new(0.0f64, 1.0).expect("unit std");
        let means: Vec<f64> = (0..n_classes * n_features).map(|_| means_dist.sample(&mut rng)).collect();

        let mut labels: Vec<u32> = (0..n_samples).map(|i| (i % n_classes) as u32).collect();
        labels.shuffle(&mut rng);
        let mut features = Vec::with_capacity(n_samples * n_features);
        for &label in &labels {
            let mean = &means[label as usize * n_features..(label as usize + 1) * n_features];
            features.extend(mean.iter().map(|m| (m + noise.sample(&mut rng)) as f32));
        }
        let all = Dataset::new(features, n_features, labels, n_classes)?;
        // Labels are already shuffled, so a prefix split is a random 80/20 split.
        let n_test = ((n_samples as f64 * 0.2).round() as usize).clamp(1, n_samples - 1);
        let n_train = n_samples - n_test;
        let train_idx: Vec<usize> = (0..n_train).collect();
        let test_idx: Vec<usize> = (n_train..n_samples).collect();
        Ok(TrainTestSplit { train: all.subset(&train_idx), test: all.subset(&test_idx) })
    }
}

pub fn generate_synthetic(
    seed: u64,
    n_samples: usize,
    n_features: usize,
    n_classes: usize,
) -> Result<TrainTestSplit, FedError> {
    SyntheticSpec { n_samples, n_features, n_classes, ..SyntheticSpec::default() }.generate(seed)
}

/// Reads a feature table: a header row, then one sample per row with an integer label last.
pub fn load_csv(path: &Path) -> Result<Dataset, FedError> {
    let file = std::fs::File::open(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    parse_csv(file)
}

pub fn parse_csv<R: Read>(reader: R) -> Result<Dataset, FedError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).trim(csv::Trim::All).from_reader(reader);
    let header_len = rdr
        .headers()
        .map_err(|e| FedError::Csv { line: 1, msg: e.to_string() })?
        .len();
    if header_len < 2 {
        return Err(FedError::Csv { line: 1, msg: "need at least one feature column and a label column".into() });
    }
    let n_features = header_len - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| FedError::Csv { line, msg: e.to_string() })?;
        if record.len() != header_len {
            return Err(FedError::Csv { line, msg: format!("expected {header_len} fields, found {}", record.len()) });
        }
        for field in record.iter().take(n_features) {
            let v: f32 = field.parse().map_err(|_| FedError::Csv { line, msg: format!("bad feature `{field}`") })?;
            features.push(v);
        }
        let label = &record[n_features];
        labels.push(label.parse::<u32>().map_err(|_| FedError::Csv { line, msg: format!("bad label `{label}`") })?);
    }
    if labels.is_empty() {
        return Err(FedError::Csv { line: 2, msg: "no samples".into() });
    }
    let n_classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    Dataset::new(features, n_features, labels, n_classes.max(2))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub client_id: u64,
    /// Sorted, unique indices into the training set.
    pub sample_indices: Vec<usize>,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.sample_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_indices.is_empty()
    }
}

fn sample_dirichlet(rng: &mut ChaCha8Rng, alpha: f64, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        // Every gamma draw underflowed (tiny alpha): the limit is a one-hot vertex.
        draws.iter_mut().for_each(|d| *d = 0.0);
        draws[rng.gen_range(0..k)] = 1.0;
        return draws;
    }
    draws.iter_mut().for_each(|d| *d /= total);
    draws
}

/// Splits `dataset` across `n_clients` with per-class client shares drawn from Dirichlet(alpha).
///
/// Empty clients are repaired by moving one sample at a time from the largest partition.
pub fn partition_dirichlet(dataset: &Dataset, n_clients: usize, alpha: f64, seed: u64) -> Result<Vec<Partition>, FedError> {
    let n = dataset.n_samples();
    if n_clients == 0 {
        return Err(FedError::InvalidPartition("n_clients must be at least 1".into()));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(FedError::InvalidPartition(format!("alpha must be positive, got {alpha}")));
    }
    if n_clients > n {
        return Err(FedError::TooManyClients { clients: n_clients, samples: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); n_clients];

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.n_classes()];
    for (i, &label) in dataset.labels().iter().enumerate() {
        by_class[label as usize].push(i);
    }
    for mut members in by_class {
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let shares = if n_clients == 1 { vec![1.0] } else { sample_dirichlet(&mut rng, alpha, n_clients) };
        let len = members.len();
        let mut start = 0usize;
        let mut cumulative = 0.0;
        for (client, share) in shares.iter().enumerate() {
            cumulative += share;
            let end = if client + 1 == n_clients { len } else { ((cumulative * len as f64).round() as usize).min(len) };
            let end = end.max(start);
            buckets[client].extend_from_slice(&members[start..end]);
            start = end;
        }
    }
    for bucket in &mut buckets {
        bucket.sort_unstable();
    }
    while let Some(empty) = buckets.iter().position(Vec::is_empty) {
        let donor = (0..n_clients).max_by_key(|&c| (buckets[c].len(), std::cmp::Reverse(c))).expect("n_clients >= 1");
        let moved = buckets[donor].pop().expect("donor holds >= 2 samples");
        buckets[empty].push(moved);
    }
    Ok(buckets
        .into_iter()
        .enumerate()
        .map(|(client, sample_indices)| Partition { client_id: client as u64, sample_indices })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub shape: Vec<usize>,
}

impl LayerShape {
    pub fn new(name: &str, shape: &[usize]) -> Self {
        Self { name: name.to_string(), shape: shape.to_vec() }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Flat parameter vector in canonical layer order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    values: Vec<f32>,
    layout: Vec<LayerShape>,
}

impl ModelParams {
    pub fn new(layout: Vec<LayerShape>, values: Vec<f32>) -> Result<Self, FedError> {
        let expected: usize = layout.iter().map(LayerShape::numel).sum();
        if expected != values.len() {
            return Err(FedError::LayoutMismatch(format!("layout holds {expected} elements, got {}", values.len())));
        }
        Ok(Self { values, layout })
    }

    pub fn empty() -> Self {
        Self { values: Vec::new(), layout: Vec::new() }
    }

    /// Assembles parameters from layers given in any order, placing them in `layout` order.
    pub fn from_layers(layout: Vec<LayerShape>, layers: impl IntoIterator<Item = (String, Vec<f32>)>) -> Result<Self, FedError> {
        let mut by_name: HashMap<String, Vec<f32>> = layers.into_iter().collect();
        let mut values = Vec::with_capacity(layout.iter().map(LayerShape::numel).sum());
        for layer in &layout {
            let data = by_name
                .remove(&layer.name)
                .ok_or_else(|| FedError::LayoutMismatch(format!("missing layer `{}`", layer.name)))?;
            if data.len() != layer.numel() {
                return Err(FedError::LayoutMismatch(format!(
                    "layer `{}` expects {} elements, got {}",
                    layer.name,
                    layer.numel(),
                    data.len()
                )));
            }
            values.extend(data);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(FedError::LayoutMismatch(format!("unknown layer `{extra}`")));
        }
        Self::new(layout, values)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn layout(&self) -> &[LayerShape] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layers(&self) -> impl Iterator<Item = (&LayerShape, &[f32])> {
        let mut offset = 0;
        self.layout.iter().map(move |layer| {
            let slice = &self.values[offset..offset + layer.numel()];
            offset += layer.numel();
            (layer, slice)
        })
    }

    /// Canonical encoding hashed by clients before signing.
    ///
    /// Layout: `u32` layer count, then per layer a `u32`-length-prefixed UTF-8 name, a `u32`
    /// dimension count and `u32` dimensions, followed by every value as little-endian `f32`.
    /// All integers are little-endian. A model with no layers encodes to zero bytes.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        if self.layout.is_empty() {
            return Vec::new();
        }
        let header: usize = self.layout.iter().map(|l| 8 + l.name.len() + 4 * l.shape.len()).sum();
        let mut out = Vec::with_capacity(4 + header + 4 * self.values.len());
        out.extend_from_slice(&(self.layout.len() as u32).to_le_bytes());
        for layer in &self.layout {
            out.extend_from_slice(&(layer.name.len() as u32).to_le_bytes());
            out.extend_from_slice(layer.name.as_bytes());
            out.extend_from_slice(&(layer.shape.len() as u32).to_le_bytes());
            for &dim in &layer.shape {
                out.extend_from_slice(&(dim as u32).to_le_bytes());
            }
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// One-hidden-layer perceptron: `features -> hidden (ReLU) -> classes`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub n_features: usize,
    pub hidden: usize,
    pub n_classes: usize,
}

impl Mlp {
    pub fn new(n_features: usize, n_classes: usize) -> Self {
        Self { n_features, hidden: DEFAULT_HIDDEN, n_classes }
    }

    pub fn layout(&self) -> Vec<LayerShape> {
        vec![
            LayerShape::new("fc1.weight", &[self.hidden, self.n_features]),
            LayerShape::new("fc1.bias", &[self.hidden]),
            LayerShape::new("fc2.weight", &[self.n_classes, self.hidden]),
            LayerShape::new("fc2.bias", &[self.n_classes]),
        ]
    }

    pub fn n_params(&self) -> usize {
        self.hidden * self.n_features + self.hidden + self.n_classes * self.hidden + self.n_classes
    }

    /// Recovers the architecture from a parameter layout.
    pub fn from_layout(layout: &[LayerShape]) -> Result<Self, FedError> {
        let shapes: Vec<(&str, &[usize])> = layout.iter().map(|l| (l.name.as_str(), l.shape.as_slice())).collect();
        match shapes.as_slice() {
            [("fc1.weight", &[h, f]), ("fc1.bias", &[h1]), ("fc2.weight", &[c, h2]), ("fc2.bias", &[c1])]
                if h == h1 && h == h2 && c == c1 =>
            {
                Ok(Self { n_features: f, hidden: h, n_classes: c })
            }
            _ => Err(FedError::LayoutMismatch("layout is not a one-hidden-layer MLP".into())),
        }
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization for every layer.
    pub fn init(&self, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(self.n_params());
        let b1 = 1.0 / (self.n_features as f32).sqrt();
        let b2 = 1.0 / (self.hidden as f32).sqrt();
        values.extend((0..self.hidden * (self.n_features + 1)).map(|_| rng.gen_range(-b1..b1)));
        values.extend((0..self.n_classes * (self.hidden + 1)).map(|_| rng.gen_range(-b2..b2)));
        ModelParams::new(self.layout(), values).expect("layout matches init")
    }

    fn check(&self, params: &ModelParams, data: &Dataset) -> Result<(), FedError> {
        if params.layout() != self.layout().as_slice() {
            return Err(FedError::LayoutMismatch("parameters do not match the model layout".into()));
        }
        if data.n_features() != self.n_features || data.n_classes() != self.n_classes {
            return Err(FedError::LayoutMismatch(format!(
                "model expects {} features / {} classes, dataset has {} / {}",
                self.n_features,
                self.n_classes,
                data.n_features(),
                data.n_classes()
            )));
        }
        Ok(())
    }

    fn offsets(&self) -> [usize; 4] {
        let w1 = 0;
        let b1 = w1 + self.hidden * self.n_features;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.n_classes * self.hidden;
        [w1, b1, w2, b2]
    }

    /// Writes hidden activations into `hidden` and class logits into `logits`.
    fn forward(&self, w: &[f32], x: &[f32], hidden: &mut [f32], logits: &mut [f32]) {
        let [w1, b1, w2, b2] = self.offsets();
        for (j, h) in hidden.iter_mut().enumerate() {
            let row = &w[w1 + j * self.n_features..w1 + (j + 1) * self.n_features];
            let z: f32 = row.iter().zip(x).map(|(a, b)| a * b).sum::<f32>() + w[b1 + j];
            *h = z.max(0.0);
        }
        for (k, out) in logits.iter_mut().enumerate() {
            let row = &w[w2 + k * self.hidden..w2 + (k + 1) * self.hidden];
            *out = row.iter().zip(hidden.iter()).map(|(a, b)| a * b).sum::<f32>() + w[b2 + k];
        }
    }
}

/// In-place softmax; returns log-sum-exp of the input.
fn softmax(logits: &mut [f32]) -> f32 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Optimizer {
    #[serde(rename = "ADAM")]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { local_epochs: 5, batch_size: 64, learning_rate: 0.001, optimizer: Optimizer::Adam, rng_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: u64,
    pub params: ModelParams,
    pub n_samples: usize,
    pub round: u64,
}

/// Runs `cfg.local_epochs` epochs of mini-batch Adam on the client's partition.
///
/// Optimizer state starts fresh on every call; batch order is drawn from `cfg.rng_seed`.
pub fn local_train(global: &ModelParams, data: &Dataset, part: &Partition, cfg: &TrainConfig) -> Result<ModelParams, FedError> {
    let model = Mlp::from_layout(global.layout())?;
    model.check(global, data)?;
    if cfg.batch_size == 0 {
        return Err(FedError::InvalidDimensions("batch_size must be positive".into()));
    }
    if let Some(&bad) = part.sample_indices.iter().find(|&&i| i >= data.n_samples()) {
        return Err(FedError::InvalidDimensions(format!("partition index {bad} out of range")));
    }
    let mut params = global.clone();
    if cfg.local_epochs == 0 || part.is_empty() {
        return Ok(params);
    }

    let n = params.len();
    let lr = cfg.learning_rate as f32;
    let (mut m, mut v, mut grad) = (vec![0.0f32; n], vec![0.0f32; n], vec![0.0f32; n]);
    let mut hidden = vec![0.0f32; model.hidden];
    let mut probs = vec![0.0f32; model.n_classes];
    let mut d_hidden = vec![0.0f32; model.hidden];
    let [o_w1, o_b1, o_w2, o_b2] = model.offsets();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut order = part.sample_indices.clone();
    let mut step = 0i32;
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let w = params.values();
            for &i in batch {
                let x = data.row(i);
                let y = data.labels()[i] as usize;
                model.forward(w, x, &mut hidden, &mut probs);
                softmax(&mut probs);
                probs[y] -= 1.0;
                d_hidden.iter_mut().for_each(|d| *d = 0.0);
                for (k, &dz) in probs.iter().enumerate() {
                    grad[o_b2 + k] += dz;
                    let row = o_w2 + k * model.hidden;
                    for j in 0..model.hidden {
                        grad[row + j] += dz * hidden[j];
                        d_hidden[j] += dz * w[row + j];
                    }
                }
                for j in 0..model.hidden {
                    if hidden[j] <= 0.0 {
                        continue;
                    }
                    let dh = d_hidden[j];
                    grad[o_b1 + j] += dh;
                    let row = o_w1 + j * model.n_features;
                    for (g, &xv) in grad[row..row + model.n_features].iter_mut().zip(x) {
                        *g += dh * xv;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f32;
            step += 1;
            let bias1 = 1.0 - ADAM_BETA1.powi(step);
            let bias2 = 1.0 - ADAM_BETA2.powi(step);
            for (((p, g), m), v) in params.values_mut().iter_mut().zip(&grad).zip(&mut m).zip(&mut v) {
                let g = g * scale;
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
    Ok(params)
}

/// Mean cross-entropy of `params` over the given samples of `data`.
pub fn mean_loss(params: &ModelParams, data: &Dataset, indices: &[usize]) -> Result<f64, FedError> {
    let model = Mlp::from_layout(params.layout())?;
    model.check(params, data)?;
    if indices.is_empty() {
        return Ok(0.0);
    }
    let mut hidden = vec![0.0f32; model.hidden];
    let mut logits = vec![0.0f32; model.n_classes];
    let mut total = 0.0f64;
    for &i in indices {
        model.forward(params.values(), data.row(i), &mut hidden, &mut logits);
        let y = data.labels()[i] as usize;
        let target = logits[y];
        let lse = softmax(&mut logits);
        total += f64::from(lse - target);
    }
    Ok(total / indices.len() as f64)
}

/// Fraction of samples whose argmax prediction (lowest index on ties) matches the label.
pub fn evaluate(params: &ModelParams, test: &Dataset) -> Result<f64, FedError> {
    let model = Mlp::from_layout(params.layout())?;
    model.check(params, test)?;
    let mut hidden = vec![0.0f32; model.hidden];
    let mut logits = vec![0.0f32; model.n_classes];
    let mut correct = 0usize;
    for i in 0..test.n_samples() {
        model.forward(params.values(), test.row(i), &mut hidden, &mut logits);
        let mut best = 0;
        for k in 1..logits.len() {
            if logits[k] > logits[best] {
                best = k;
            }
        }
        if best == test.labels()[i] as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.n_samples() as f64)
}

/// FedAvg: elementwise `sum_i n_i * w_i / sum_i n_i`, accumulated in f64.
pub fn aggregate(updates: &[ClientUpdate]) -> Result<ModelParams, FedError> {
    let first = updates.first().ok_or(FedError::EmptyUpdateSet)?;
    let layout = first.params.layout();
    for u in updates {
        if u.params.layout() != layout {
            return Err(FedError::LayoutMismatch(format!("client {} has a different layout", u.client_id)));
        }
        if u.n_samples == 0 {
            return Err(FedError::InvalidDimensions(format!("client {} reports zero samples", u.client_id)));
        }
    }
    let total: f64 = updates.iter().map(|u| u.n_samples as f64).sum();
    let mut acc = vec![0.0f64; first.params.len()];
    for u in updates {
        let weight = u.n_samples as f64;
        for (a, &w) in acc.iter_mut().zip(u.params.values()) {
            *a += weight * f64::from(w);
        }
    }
    let values = acc.into_iter().map(|a| (a / total) as f32).collect();
    ModelParams::new(layout.to_vec(), values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_update(id: u64, value: f32, n: usize) -> ClientUpdate {
        ClientUpdate {
            client_id: id,
            params: ModelParams::new(vec![LayerShape::new("w", &[1])], vec![value]).unwrap(),
            n_samples: n,
            round: 1,
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(3, 200, 4, 3).unwrap();
        let b = generate_synthetic(3, 200, 4, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.n_samples(), 160);
        assert_eq!(a.test.n_samples(), 40);
        assert_ne!(a, generate_synthetic(4, 200, 4, 3).unwrap());
    }

    #[test]
    fn synthetic_rejects_bad_dimensions() {
        assert!(matches!(generate_synthetic(0, 3, 4, 5), Err(FedError::InvalidDimensions(_))));
        assert!(matches!(generate_synthetic(0, 10, 0, 2), Err(FedError::InvalidDimensions(_))));
        assert!(matches!(generate_synthetic(0, 10, 3, 1), Err(FedError::InvalidDimensions(_))));
    }

    #[test]
    fn two_class_task_is_learnable() {
        let split = SyntheticSpec { n_samples: 600, n_features: 8, n_classes: 2, separation: 1.5 }.generate(5).unwrap();
        let model = Mlp::new(8, 2);
        let all = Partition { client_id: 0, sample_indices: (0..split.train.n_samples()).collect() };
        let cfg = TrainConfig { local_epochs: 20, ..TrainConfig::default() };
        let trained = local_train(&model.init(1), &split.train, &all, &cfg).unwrap();
        let acc = evaluate(&trained, &split.test).unwrap();
        assert!(acc > 0.95, "accuracy {acc}");
    }

    #[test]
    fn aggregate_examples() {
        let avg = aggregate(&[scalar_update(0, 0.0, 1), scalar_update(1, 2.0, 1)]).unwrap();
        assert_eq!(avg.values(), &[1.0]);

        let weighted = aggregate(&[scalar_update(0, 6.0, 1), scalar_update(1, 3.0, 2), scalar_update(2, 1.0, 3)]).unwrap();
        // (1*6 + 2*3 + 3*1) / 6
        assert_eq!(weighted.values(), &[2.5]);

        let same = aggregate(&[scalar_update(0, 0.1, 7), scalar_update(1, 0.1, 3), scalar_update(2, 0.1, 1)]).unwrap();
        assert_eq!(same.values(), &[0.1]);
    }

    #[test]
    fn aggregate_errors() {
        assert!(matches!(aggregate(&[]), Err(FedError::EmptyUpdateSet)));
        let mut other = scalar_update(1, 1.0, 1);
        other.params = ModelParams::new(vec![LayerShape::new("v", &[1])], vec![1.0]).unwrap();
        assert!(matches!(aggregate(&[scalar_update(0, 1.0, 1), other]), Err(FedError::LayoutMismatch(_))));
    }

    #[test]
    fn zero_epochs_is_identity() {
        let split = generate_synthetic(1, 100, 4, 2).unwrap();
        let global = Mlp::new(4, 2).init(9);
        let part = Partition { client_id: 0, sample_indices: vec![0, 1, 2, 3] };
        let cfg = TrainConfig { local_epochs: 0, ..TrainConfig::default() };
        assert_eq!(local_train(&global, &split.train, &part, &cfg).unwrap(), global);
    }

    #[test]
    fn local_train_is_bitwise_deterministic_and_reduces_loss() {
        let split = generate_synthetic(2, 500, 16, 10).unwrap();
        let parts = partition_dirichlet(&split.train, 3, 0.5, 2).unwrap();
        let global = Mlp::new(16, 10).init(4);
        let cfg = TrainConfig { rng_seed: 77, ..TrainConfig::default() };
        let a = local_train(&global, &split.train, &parts[0], &cfg).unwrap();
        let b = local_train(&global, &split.train, &parts[0], &cfg).unwrap();
        assert_eq!(a.canonical_bytes(), b.canonical_bytes());
        let before = mean_loss(&global, &split.train, &parts[0].sample_indices).unwrap();
        let after = mean_loss(&a, &split.train, &parts[0].sample_indices).unwrap();
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn local_train_layout_mismatch() {
        let split = generate_synthetic(1, 100, 4, 2).unwrap();
        let wrong = Mlp::new(5, 2).init(0);
        let part = Partition { client_id: 0, sample_indices: vec![0] };
        assert!(matches!(
            local_train(&wrong, &split.train, &part, &TrainConfig::default()),
            Err(FedError::LayoutMismatch(_))
        ));
        assert!(matches!(evaluate(&wrong, &split.test), Err(FedError::LayoutMismatch(_))));
    }

    #[test]
    fn constant_class_zero_model_scores_half_on_balanced_set() {
        let features = vec![0.0f32; 8];
        let data = Dataset::new(features, 2, vec![0, 1, 0, 1], 2).unwrap();
        let model = Mlp { n_features: 2, hidden: 2, n_classes: 2 };
        let mut params = ModelParams::new(model.layout(), vec![0.0; model.n_params()]).unwrap();
        // fc2.bias for class 0
        let n = params.len();
        params.values_mut()[n - 2] = 1.0;
        assert_eq!(evaluate(&params, &data).unwrap(), 0.5);
        assert_eq!(evaluate(&params, &data).unwrap(), evaluate(&params, &data).unwrap());
    }

    #[test]
    fn random_init_accuracy_band() {
        for seed in 0..20 {
            let split = generate_synthetic(seed, 1000, 16, 10).unwrap();
            let acc = evaluate(&Mlp::new(16, 10).init(seed + 100), &split.test).unwrap();
            assert!((0.02..=0.25).contains(&acc), "seed {seed}: {acc}");
        }
    }

    #[test]
    fn single_client_gets_everything() {
        let split = generate_synthetic(1, 50, 2, 2).unwrap();
        let parts = partition_dirichlet(&split.train, 1, 0.5, 0).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].sample_indices, (0..split.train.n_samples()).collect::<Vec<_>>());
    }

    #[test]
    fn partition_errors() {
        let split = generate_synthetic(1, 10, 2, 2).unwrap();
        assert!(matches!(partition_dirichlet(&split.train, 9, 0.5, 0), Err(FedError::TooManyClients { .. })));
        assert!(matches!(partition_dirichlet(&split.train, 2, 0.0, 0), Err(FedError::InvalidPartition(_))));
        assert!(matches!(partition_dirichlet(&split.train, 0, 0.5, 0), Err(FedError::InvalidPartition(_))));
    }

    fn max_dominant_share(data: &Dataset, parts: &[Partition]) -> f64 {
        parts
            .iter()
            .map(|p| *data.class_histogram(&p.sample_indices).iter().max().unwrap() as f64 / p.len() as f64)
            .fold(0.0, f64::max)
    }

    // Observed over seeds 0..20 (10 clients, 10 classes): alpha=0.5 gives a max dominant-class
    // share between 0.36 and 0.72 per seed, near-IID alpha=1000 stays at ~0.11.
    #[test]
    fn dirichlet_half_is_visibly_skewed() {
        let mut shares = Vec::new();
        for seed in 0..20 {
            let split = generate_synthetic(seed, 2500, 4, 10).unwrap();
            let skewed = max_dominant_share(&split.train, &partition_dirichlet(&split.train, 10, 0.5, seed).unwrap());
            let iid = max_dominant_share(&split.train, &partition_dirichlet(&split.train, 10, 1000.0, seed).unwrap());
            assert!(skewed > 2.5 * iid, "seed {seed}: {skewed} vs iid {iid}");
            shares.push(skewed);
        }
        let majority = shares.iter().filter(|&&s| s > 0.5).count();
        let mean = shares.iter().sum::<f64>() / shares.len() as f64;
        assert!(majority >= 8, "only {majority} seeds have a client with a >50% class");
        assert!(mean > 0.45, "mean max share {mean}");
    }

    #[test]
    fn tiny_alpha_still_yields_nonempty_partitions() {
        let split = generate_synthetic(8, 100, 2, 4).unwrap();
        let parts = partition_dirichlet(&split.train, 20, 1e-4, 3).unwrap();
        assert!(parts.iter().all(|p| !p.is_empty()));
        assert_eq!(parts.iter().map(Partition::len).sum::<usize>(), split.train.n_samples());
    }

    #[test]
    fn canonical_bytes_layout() {
        assert!(ModelParams::empty().canonical_bytes().is_empty());
        let p = ModelParams::new(vec![LayerShape::new("ab", &[2])], vec![1.0, -2.0]).unwrap();
        let expected: Vec<u8> = [
            &1u32.to_le_bytes()[..],
            &2u32.to_le_bytes(),
            b"ab",
            &1u32.to_le_bytes(),
            &2u32.to_le_bytes(),
            &1.0f32.to_le_bytes(),
            &(-2.0f32).to_le_bytes(),
        ]
        .concat();
        assert_eq!(p.canonical_bytes(), expected);
        assert_eq!(hex::encode(p.canonical_bytes()), "0100000002000000616201000000020000000000803f000000c0");
    }

    #[test]
    fn from_layers_orders_canonically() {
        let layout = vec![LayerShape::new("a", &[1]), LayerShape::new("b", &[2])];
        let p = ModelParams::from_layers(layout.clone(), [("b".to_string(), vec![2.0, 3.0]), ("a".to_string(), vec![1.0])]).unwrap();
        assert_eq!(p.values(), &[1.0, 2.0, 3.0]);
        assert!(ModelParams::from_layers(layout.clone(), [("a".to_string(), vec![1.0])]).is_err());
        assert!(ModelParams::from_layers(layout, [("a".to_string(), vec![1.0, 2.0]), ("b".to_string(), vec![2.0, 3.0])]).is_err());
    }

    #[test]
    fn csv_ingestion() {
        let good = "f1,f2,label\n0.5,1.0,0\n-1,2,2\n";
        let ds = parse_csv(good.as_bytes()).unwrap();
        assert_eq!(ds.n_samples(), 2);
        assert_eq!(ds.n_features(), 2);
        assert_eq!(ds.n_classes(), 3);
        assert_eq!(ds.row(1), &[-1.0, 2.0]);

        let ragged = "f1,f2,label\n0.5,1.0,0\n1,1\n";
        assert!(matches!(parse_csv(ragged.as_bytes()), Err(FedError::Csv { line: 3, .. })));
        let bad_label = "f1,label\n0.5,x\n";
        assert!(matches!(parse_csv(bad_label.as_bytes()), Err(FedError::Csv { line: 2, .. })));
        assert!(parse_csv("f1,label\n".as_bytes()).is_err());
    }
}
