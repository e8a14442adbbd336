//! Operator-type histograms and Jensen–Shannon diversity (base 2, in bits)
//! within and between collections of networks.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph_ir::GraphIR;

/// Op types left out of every histogram.
pub const EXCLUDED_OPS: [&str; 1] = ["Constant"];

/// Default number of networks sampled per search space.
pub const DEFAULT_SAMPLES: usize = 5000;

/// Compensated (Neumaier) running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    compensation: f64,
}

impl NeumaierSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl FromIterator<f64> for NeumaierSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = Self::default();
        for x in iter {
            s.add(x);
        }
        s
    }
}

/// Normalized distribution over op types, keeping the raw mass it was
/// built from so that several histograms can be count-pooled.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpHistogram {
    probs: BTreeMap<String, f64>,
    #[serde(skip)]
    mass: BTreeMap<String, f64>,
}

impl OpHistogram {
    /// From raw occurrence counts; excluded ops and zero entries are dropped.
    pub fn from_counts<K: AsRef<str>>(counts: impl IntoIterator<Item = (K, f64)>) -> Result<Self> {
        let mut mass: BTreeMap<String, f64> = BTreeMap::new();
        for (op, c) in counts {
            let op = op.as_ref();
            if !c.is_finite() || c < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "count {c} for {op} is not a non-negative number"
                )));
            }
            if c > 0.0 && !EXCLUDED_OPS.contains(&op) {
                *mass.entry(op.to_string()).or_default() += c;
            }
        }
        let total: f64 = mass.values().copied().collect::<NeumaierSum>().value();
        if mass.is_empty() || total <= 0.0 {
            return Err(Error::EmptyHistogram);
        }
        let probs = mass.iter().map(|(k, v)| (k.clone(), v / total)).collect();
        Ok(Self { probs, mass })
    }

    /// Counts every op occurrence in `ops`.
    pub fn from_ops<'a>(ops: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut counts: BTreeMap<&str, f64> = BTreeMap::new();
        for op in ops {
            *counts.entry(op).or_default() += 1.0;
        }
        Self::from_counts(counts)
    }

    pub fn probs(&self) -> &BTreeMap<String, f64> {
        &self.probs
    }

    pub fn prob(&self, op: &str) -> f64 {
        self.probs.get(op).copied().unwrap_or(0.0)
    }

    pub fn vocab(&self) -> impl Iterator<Item = &str> {
        self.probs.keys().map(String::as_str)
    }

    /// Raw mass (occurrence counts for histograms built from graphs).
    pub fn mass(&self) -> &BTreeMap<String, f64> {
        &self.mass
    }
}

/// Histogram of the (unsimplified) graph's op types, Constant excluded.
pub fn op_histogram(g: &GraphIR) -> Result<OpHistogram> {
    OpHistogram::from_ops(g.nodes().map(|n| n.op_type.as_str()))
}

/// Histogram of the operator names in an encoding's clauses.
pub fn op_histogram_from_encoding(text: &str) -> Result<OpHistogram> {
    let ops = text.lines().flat_map(|line| {
        let clauses: Vec<&str> = line.split(" --> ").collect();
        let n = clauses.len().saturating_sub(1);
        clauses
            .into_iter()
            .take(n)
            .map(|c| c.split('(').next().unwrap_or(c))
            .collect::<Vec<_>>()
    });
    OpHistogram::from_ops(ops)
}

fn plogp_over_m(p: f64, m: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (p / m).log2()
    }
}

/// Jensen–Shannon divergence in bits. Keys missing from one side count as 0.
/// Symmetric bit-for-bit.
pub fn jsd(p: &OpHistogram, q: &OpHistogram) -> f64 {
    jsd_maps(&p.probs, &q.probs)
}

fn jsd_maps(p: &BTreeMap<String, f64>, q: &BTreeMap<String, f64>) -> f64 {
    let mut keys: Vec<&String> = p.keys().chain(q.keys()).collect();
    keys.sort_unstable();
    keys.dedup();
    let total: NeumaierSum = keys
        .into_iter()
        .map(|k| {
            let a = p.get(k).copied().unwrap_or(0.0);
            let b = q.get(k).copied().unwrap_or(0.0);
            let m = 0.5 * (a + b);
            // summing the two halves in a fixed order keeps jsd(p,q) == jsd(q,p)
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            0.5 * (plogp_over_m(lo, m) + plogp_over_m(hi, m))
        })
        .collect();
    total.value().clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DiversityMode {
    Within,
    Between,
}

/// How a collection of histograms is pooled into one distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    /// Sum raw counts, then normalize.
    #[default]
    Count,
    /// Average the per-network distributions.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiversityReport {
    pub space_a: String,
    pub space_b: Option<String>,
    pub mode: DiversityMode,
    pub value_bits: f64,
    #[serde(rename = "n")]
    pub sample_count: usize,
    /// Pairs averaged over (within-space only).
    #[serde(rename = "pairs")]
    pub pair_count: Option<u64>,
    pub seed: Option<u64>,
}

/// Options for [`within_space_diversity_with`].
#[derive(Debug, Clone, Copy)]
pub struct WithinConfig {
    /// Up to this many histograms every pair is used; beyond it, this many
    /// choose two pairs are sampled.
    pub max_exhaustive: usize,
    pub seed: u64,
}

impl Default for WithinConfig {
    fn default() -> Self {
        Self {
            max_exhaustive: DEFAULT_SAMPLES,
            seed: 0,
        }
    }
}

/// Mean JSD over all unordered pairs.
pub fn within_space_diversity(histograms: &[OpHistogram]) -> Result<DiversityReport> {
    within_space_diversity_with(histograms, &WithinConfig::default())
}

pub fn within_space_diversity_with(
    histograms: &[OpHistogram],
    cfg: &WithinConfig,
) -> Result<DiversityReport> {
    let n = histograms.len();
    if n < 2 {
        return Err(Error::InsufficientSamples(format!(
            "within-space diversity needs at least 2 histograms, got {n}"
        )));
    }
    let (mean, pairs, seed) = if n <= cfg.max_exhaustive.max(2) {
        // one compensated partial sum per row, then a compensated sum of rows
        let rows: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                (i + 1..n)
                    .map(|j| jsd(&histograms[i], &histograms[j]))
                    .collect::<NeumaierSum>()
                    .value()
            })
            .collect();
        let pairs = (n * (n - 1) / 2) as u64;
        let total = rows.into_iter().collect::<NeumaierSum>().value();
        (total / pairs as f64, pairs, None)
    } else {
        let m = cfg.max_exhaustive.max(2);
        let pairs = (m * (m - 1) / 2) as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let picks: Vec<(usize, usize)> = (0..pairs)
            .map(|_| {
                let i = rng.random_range(0..n);
                let j = (i + rng.random_range(1..n)) % n;
                (i, j)
            })
            .collect();
        let total = picks
            .par_chunks(4096)
            .map(|chunk| {
                chunk
                    .iter()
                    .map(|&(i, j)| jsd(&histograms[i], &histograms[j]))
                    .collect::<NeumaierSum>()
                    .value()
            })
            .collect::<Vec<f64>>()
            .into_iter()
            .collect::<NeumaierSum>()
            .value();
        (total / pairs as f64, pairs, Some(cfg.seed))
    };
    Ok(DiversityReport {
        space_a: String::new(),
        space_b: None,
        mode: DiversityMode::Within,
        value_bits: mean.clamp(0.0, 1.0),
        sample_count: n,
        pair_count: Some(pairs),
        seed,
    })
}

/// Pools each side into one distribution and reports their JSD.
pub fn between_space_diversity(a: &[OpHistogram], b: &[OpHistogram]) -> Result<DiversityReport> {
    between_space_diversity_with(a, b, Pooling::Count)
}

pub fn between_space_diversity_with(
    a: &[OpHistogram],
    b: &[OpHistogram],
    pooling: Pooling,
) -> Result<DiversityReport> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientSamples(
            "between-space diversity needs at least one histogram per space".into(),
        ));
    }
    let pa = pool(a, pooling)?;
    let pb = pool(b, pooling)?;
    Ok(DiversityReport {
        space_a: String::new(),
        space_b: Some(String::new()),
        mode: DiversityMode::Between,
        value_bits: jsd(&pa, &pb),
        sample_count: a.len() + b.len(),
        pair_count: None,
        seed: None,
    })
}

/// Pools histograms into one distribution.
pub fn pool(histograms: &[OpHistogram], pooling: Pooling) -> Result<OpHistogram> {
    let mut acc: BTreeMap<String, NeumaierSum> = BTreeMap::new();
    for h in histograms {
        let source = match pooling {
            Pooling::Count => &h.mass,
            Pooling::Mean => &h.probs,
        };
        for (k, v) in source {
            acc.entry(k.clone()).or_default().add(*v);
        }
    }
    OpHistogram::from_counts(acc.into_iter().map(|(k, s)| (k, s.value())))
}

/// Indices of up to `n` items drawn uniformly without replacement from
/// `0..len`, returned ascending.
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    if n >= len {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, len, n).into_vec();
    picked.sort_unstable();
    picked
}
