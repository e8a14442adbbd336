//! Linear ranker over hashed token n-grams, trained with a pairwise hinge
//! loss.

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_FEATURE_DIM: usize = 1 << 18;
pub const DEFAULT_NGRAM_ORDERS: [usize; 2] = [1, 2];
pub const MODEL_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"ONXR";

/// Splits an encoding into maximal alphanumeric runs plus the punctuation
/// tokens `-->`, `(` and `)`. Everything else separates tokens.
pub fn tokenize(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_alphanumeric() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_alphanumeric() {
                i += 1;
            }
            tokens.push(&text[start..i]);
        } else if bytes[i..].starts_with(b"-->") {
            tokens.push("-->");
            i += 3;
        } else {
            if c == b'(' || c == b')' {
                tokens.push(&text[i..i + 1]);
            }
            i += 1;
        }
    }
    tokens
}

/// Sparse feature vector, sorted by index with no duplicates.
pub type SparseVec = Vec<(u32, f64)>;

fn bucket(gram: &[&str], seed: u64, dim: usize) -> u32 {
    let mut h = FnvHasher::with_key(seed);
    h.write_usize(gram.len());
    for tok in gram {
        h.write(tok.as_bytes());
        h.write_u8(0x1f);
    }
    (h.finish() % dim as u64) as u32
}

/// Counts of hashed n-grams of `text`.
pub fn featurize(text: &str, dim: usize, orders: &[usize], seed: u64) -> SparseVec {
    let tokens = tokenize(text);
    let mut idx: Vec<u32> = Vec::new();
    for &k in orders {
        if k == 0 || k > tokens.len() {
            continue;
        }
        idx.extend(tokens.windows(k).map(|g| bucket(g, seed, dim)));
    }
    idx.sort_unstable();
    let mut out: SparseVec = Vec::new();
    for i in idx {
        match out.last_mut() {
            Some((j, c)) if *j == i => *c += 1.0,
            _ => out.push((i, 1.0)),
        }
    }
    out
}

fn dot(w: &[f64], x: &SparseVec) -> f64 {
    x.iter().map(|&(i, v)| w[i as usize] * v).sum()
}

/// `max(0, margin - d)` with `d` the score gap in favour of the better item.
pub fn hinge_loss(s_i: f64, s_j: f64, better_is_i: bool, margin: f64) -> f64 {
    let d = if better_is_i { s_i - s_j } else { s_j - s_i };
    (margin - d).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankerModel {
    pub version: u32,
    pub feature_dim: usize,
    pub ngram_orders: Vec<usize>,
    pub hash_seed: u64,
    pub weights: Vec<f64>,
}

impl RankerModel {
    pub fn zeros(feature_dim: usize, ngram_orders: Vec<usize>, hash_seed: u64) -> Self {
        Self {
            version: MODEL_FORMAT_VERSION,
            feature_dim,
            ngram_orders,
            hash_seed,
            weights: vec![0.0; feature_dim],
        }
    }

    pub fn featurize(&self, text: &str) -> SparseVec {
        featurize(text, self.feature_dim, &self.ngram_orders, self.hash_seed)
    }

    pub fn score(&self, text: &str) -> f64 {
        dot(&self.weights, &self.featurize(text))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * self.weights.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.feature_dim as u64).to_le_bytes());
        out.extend_from_slice(&self.hash_seed.to_le_bytes());
        out.extend_from_slice(&(self.ngram_orders.len() as u32).to_le_bytes());
        for &k in &self.ngram_orders {
            out.extend_from_slice(&(k as u32).to_le_bytes());
        }
        for w in &self.weights {
            out.extend_from_slice(&w.to_bits().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |why: &str| Error::InvalidModel(why.to_string());
        let mut rest = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if rest.len() < n {
                return Err(bad("truncated model file"));
            }
            let (head, tail) = rest.split_at(n);
            rest = tail;
            Ok(head)
        };
        if take(4)? != MAGIC {
            return Err(bad("not a ranker model (bad magic)"));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));
        let version = u32_at(take(4)?);
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::InvalidModel(format!(
                "unsupported model version {version}"
            )));
        }
        let feature_dim = u64_at(take(8)?) as usize;
        let hash_seed = u64_at(take(8)?);
        let n_orders = u32_at(take(4)?) as usize;
        let ngram_orders = (0..n_orders)
            .map(|_| take(4).map(|b| u32_at(b) as usize))
            .collect::<Result<Vec<_>>>()?;
        let payload = take(
            feature_dim
                .checked_mul(8)
                .ok_or_else(|| bad("feature dimension overflows"))?,
        )?;
        let weights = payload
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64_at(c)))
            .collect();
        if !rest.is_empty() {
            return Err(bad("trailing bytes after weights"));
        }
        if feature_dim == 0 {
            return Err(bad("feature dimension is zero"));
        }
        Ok(Self {
            version,
            feature_dim,
            ngram_orders,
            hash_seed,
            weights,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Learning-rate schedule after warmup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum LrSchedule {
    Constant,
    /// Decays to `end_lr` over the remaining steps.
    Polynomial {
        end_lr: f64,
        power: f64,
    },
}

/// Update rule applied to the mean-hinge gradient of each batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Optimizer {
    Sgd,
    /// Adam with decoupled weight decay.
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub margin: f64,
    pub seed: u64,
    pub feature_dim: usize,
    pub ngram_orders: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::default(),
            learning_rate: 5e-5,
            epochs: 5,
            batch_size: 16,
            schedule: LrSchedule::Polynomial {
                end_lr: 5e-6,
                power: 1.0,
            },
            weight_decay: 0.1,
            warmup_ratio: 0.06,
            margin: 1.0,
            seed: 42,
            feature_dim: DEFAULT_FEATURE_DIM,
            ngram_orders: DEFAULT_NGRAM_ORDERS.to_vec(),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!(
                "learning rate {} must be positive",
                self.learning_rate
            ));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return bad(format!("margin {} must be non-negative", self.margin));
        }
        if self.batch_size < 2 {
            return bad(format!("batch size {} must be at least 2", self.batch_size));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad(format!(
                "warmup ratio {} must lie in [0, 1]",
                self.warmup_ratio
            ));
        }
        if self.feature_dim == 0 || self.feature_dim > u32::MAX as usize {
            return bad(format!(
                "feature dimension {} out of range",
                self.feature_dim
            ));
        }
        if self.ngram_orders.is_empty() || self.ngram_orders.contains(&0) {
            return bad("n-gram orders must be non-empty and positive".into());
        }
        Ok(())
    }

    /// Learning rate at 0-based optimizer step `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warmup = (self.warmup_ratio * total as f64).ceil() as usize;
        if step < warmup {
            return self.learning_rate * step as f64 / warmup as f64;
        }
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Polynomial { end_lr, power } => {
                let decay_steps = total.saturating_sub(warmup).max(1) as f64;
                let remaining = (1.0 - (step - warmup) as f64 / decay_steps).max(0.0);
                (self.learning_rate - end_lr) * remaining.powf(power) + end_lr
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    /// Mean hinge loss over the comparable pairs seen in each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub pairs_seen: u64,
}

/// Fits a ranker to `(encoding, accuracy)` examples. Within each mini-batch
/// every pair with distinct accuracies contributes a hinge term and the
/// batch loss is their mean; weight decay is decoupled from the gradient
/// step.
pub fn train_ranker(
    examples: &[(String, f64)],
    cfg: &TrainConfig,
) -> Result<(RankerModel, TrainLog)> {
    cfg.validate()?;
    if examples.len() < 2 {
        return Err(Error::InsufficientSamples(format!(
            "training needs at least 2 examples, got {}",
            examples.len()
        )));
    }
    if examples.iter().all(|(_, a)| *a == examples[0].1) {
        return Err(Error::NoComparablePairs);
    }
    let mut model = RankerModel::zeros(cfg.feature_dim, cfg.ngram_orders.clone(), cfg.seed);
    let features: Vec<SparseVec> = examples.iter().map(|(t, _)| model.featurize(t)).collect();

    let batches_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = TrainLog::default();
    let mut grad = vec![0.0f64; cfg.feature_dim];
    let mut touched: Vec<u32> = Vec::new();
    let (mut m1, mut m2) = match cfg.optimizer {
        Optimizer::AdamW { .. } => (vec![0.0f64; cfg.feature_dim], vec![0.0f64; cfg.feature_dim]),
        Optimizer::Sgd => (Vec::new(), Vec::new()),
    };
    let mut adam_steps = 0i32;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut loss_pairs) = (0.0, 0u64);
        for batch in order.chunks(cfg.batch_size) {
            let lr = cfg.lr_at(log.steps, total_steps);
            log.steps += 1;
            let scores: Vec<f64> = batch
                .iter()
                .map(|&i| dot(&model.weights, &features[i]))
                .collect();
            let mut n_pairs = 0u64;
            for a in 0..batch.len() {
                for b in a + 1..batch.len() {
                    let (acc_a, acc_b) = (examples[batch[a]].1, examples[batch[b]].1);
                    if acc_a == acc_b {
                        continue;
                    }
                    n_pairs += 1;
                    let loss = hinge_loss(scores[a], scores[b], acc_a > acc_b, cfg.margin);
                    loss_sum += loss;
                    if loss > 0.0 {
                        let (hi, lo) = if acc_a > acc_b { (a, b) } else { (b, a) };
                        for &(i, v) in &features[batch[hi]] {
                            grad[i as usize] -= v;
                            touched.push(i);
                        }
                        for &(i, v) in &features[batch[lo]] {
                            grad[i as usize] += v;
                            touched.push(i);
                        }
                    }
                }
            }
            if n_pairs == 0 {
                continue;
            }
            loss_pairs += n_pairs;
            let inv = 1.0 / n_pairs as f64;
            touched.sort_unstable();
            touched.dedup();
            if cfg.weight_decay != 0.0 {
                let keep = 1.0 - lr * cfg.weight_decay;
                model.weights.iter_mut().for_each(|w| *w *= keep);
            }
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for &i in &touched {
                        model.weights[i as usize] -= lr * grad[i as usize] * inv;
                    }
                }
                Optimizer::AdamW { beta1, beta2, eps } => {
                    adam_steps += 1;
                    let c1 = 1.0 - beta1.powi(adam_steps);
                    let c2 = 1.0 - beta2.powi(adam_steps);
                    // moments decay everywhere; only coordinates with a
                    // non-zero moment can move
                    for i in 0..cfg.feature_dim {
                        let g = grad[i] * inv;
                        if g == 0.0 && m1[i] == 0.0 && m2[i] == 0.0 {
                            continue;
                        }
                        m1[i] = beta1 * m1[i] + (1.0 - beta1) * g;
                        m2[i] = beta2 * m2[i] + (1.0 - beta2) * g * g;
                        model.weights[i] -= lr * (m1[i] / c1) / ((m2[i] / c2).sqrt() + eps);
                    }
                }
            }
            for &i in &touched {
                grad[i as usize] = 0.0;
            }
            touched.clear();
        }
        log.pairs_seen += loss_pairs;
        log.epoch_losses.push(if loss_pairs == 0 {
            0.0
        } else {
            loss_sum / loss_pairs as f64
        });
    }
    Ok((model, log))
}

pub fn predict(model: &RankerModel, text: &str) -> f64 {
    model.score(text)
}
