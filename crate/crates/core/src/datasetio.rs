//! JSONL manifests of architectures, train/val splits and parallel batch
//! encoding.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::textenc::{encode_file, EncodingConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    Path(PathBuf),
    Text(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    #[default]
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Unassigned => "unassigned",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "unassigned" => Some(Split::Unassigned),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One manifest line. Fields this crate does not know about are kept in
/// `extra` and written back unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchRecord {
    pub id: String,
    pub source: Source,
    /// Top-1 accuracy in percent.
    pub accuracy: Option<f64>,
    pub space: String,
    pub split: Split,
    pub extra: Map<String, Value>,
}

impl ArchRecord {
    pub fn with_text(
        id: impl Into<String>,
        text: impl Into<String>,
        accuracy: Option<f64>,
    ) -> Self {
        Self {
            id: id.into(),
            source: Source::Text(text.into()),
            accuracy,
            space: String::new(),
            split: Split::Unassigned,
            extra: Map::new(),
        }
    }

    pub fn with_path(
        id: impl Into<String>,
        path: impl Into<PathBuf>,
        accuracy: Option<f64>,
    ) -> Self {
        Self {
            source: Source::Path(path.into()),
            ..Self::with_text(id, "", accuracy)
        }
    }

    pub fn text(&self) -> Option<&str> {
        match &self.source {
            Source::Text(t) => Some(t),
            Source::Path(_) => None,
        }
    }

    /// Parses one JSON object; exactly one of `path` and `text` must be set.
    pub fn from_json(value: Value) -> std::result::Result<Self, String> {
        let Value::Object(mut map) = value else {
            return Err("record is not a JSON object".into());
        };
        let id = match map.remove("id") {
            Some(Value::String(s)) if !s.is_empty() => s,
            Some(Value::Number(n)) => n.to_string(),
            Some(_) => return Err("\"id\" must be a non-empty string".into()),
            None => return Err("missing \"id\"".into()),
        };
        let source = match (map.remove("path"), map.remove("text")) {
            (Some(_), Some(_)) => return Err("record has both \"path\" and \"text\"".into()),
            (Some(Value::String(p)), None) => Source::Path(PathBuf::from(p)),
            (None, Some(Value::String(t))) => Source::Text(t),
            (Some(_), None) => return Err("\"path\" must be a string".into()),
            (None, Some(_)) => return Err("\"text\" must be a string".into()),
            (None, None) => return Err("record needs \"path\" or \"text\"".into()),
        };
        let accuracy = match map.remove("accuracy") {
            None | Some(Value::Null) => None,
            Some(Value::Number(n)) => {
                let a = n.as_f64().ok_or("accuracy is not representable")?;
                if !(0.0..=100.0).contains(&a) {
                    return Err(format!("accuracy {a} outside [0, 100]"));
                }
                Some(a)
            }
            Some(_) => return Err("\"accuracy\" must be a number".into()),
        };
        let space = match map.remove("space") {
            None | Some(Value::Null) => String::new(),
            Some(Value::String(s)) => s,
            Some(_) => return Err("\"space\" must be a string".into()),
        };
        let split = match map.remove("split") {
            None | Some(Value::Null) => Split::Unassigned,
            Some(Value::String(s)) => {
                Split::parse(&s).ok_or_else(|| format!("unknown split {s:?}"))?
            }
            Some(_) => return Err("\"split\" must be a string".into()),
        };
        Ok(Self {
            id,
            source,
            accuracy,
            space,
            split,
            extra: map,
        })
    }

    pub fn to_json(&self) -> Value {
        let mut map = self.extra.clone();
        map.insert("id".into(), Value::String(self.id.clone()));
        match &self.source {
            Source::Text(t) => map.insert("text".into(), Value::String(t.clone())),
            Source::Path(p) => map.insert(
                "path".into(),
                Value::String(p.to_string_lossy().into_owned()),
            ),
        };
        if let Some(a) = self.accuracy {
            map.insert("accuracy".into(), a.into());
        }
        if !self.space.is_empty() {
            map.insert("space".into(), Value::String(self.space.clone()));
        }
        if self.split != Split::Unassigned {
            map.insert("split".into(), Value::String(self.split.as_str().into()));
        }
        Value::Object(map)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReadOptions {
    /// Accept accuracies given as fractions in [0, 1] and scale them to percent.
    pub rescale_fractions: bool,
}

pub fn read_manifest(path: &Path, opts: &ReadOptions) -> Result<Vec<ArchRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(BufReader::new(file), opts).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Parses JSONL; blank lines are skipped, line numbers are 1-based.
pub fn parse_manifest(reader: impl BufRead, opts: &ReadOptions) -> Result<Vec<ArchRecord>> {
    let mut records = Vec::new();
    let mut lines = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<manifest>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::MalformedRecord {
            line: i + 1,
            reason,
        };
        let value: Value = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let record = ArchRecord::from_json(value).map_err(malformed)?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::DuplicateId(record.id));
        }
        records.push(record);
        lines.push(i + 1);
    }
    let with_acc: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].accuracy.is_some())
        .collect();
    let fractional =
        !with_acc.is_empty() && with_acc.iter().all(|&i| records[i].accuracy <= Some(1.0));
    if fractional {
        if !opts.rescale_fractions {
            return Err(Error::MalformedRecord {
                line: lines[with_acc[0]],
                reason:
                    "accuracies look like fractions in [0, 1]; expected percent (enable rescaling)"
                        .into(),
            });
        }
        for &i in &with_acc {
            records[i].accuracy = records[i].accuracy.map(|a| a * 100.0);
        }
    } else if opts.rescale_fractions && !with_acc.is_empty() {
        let i = *with_acc
            .iter()
            .find(|&&i| records[i].accuracy > Some(1.0))
            .expect("not fractional");
        return Err(Error::MalformedRecord {
            line: lines[i],
            reason: "rescaling requested but accuracy exceeds 1".into(),
        });
    }
    Ok(records)
}

/// Writes one JSON object per line (keys sorted), in the given order.
pub fn write_jsonl<'a>(path: &Path, values: impl IntoIterator<Item = &'a Value>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for v in values {
        serde_json::to_writer(&mut w, v).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_manifest(path: &Path, records: &[ArchRecord]) -> Result<()> {
    let values: Vec<Value> = records.iter().map(ArchRecord::to_json).collect();
    write_jsonl(path, &values)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitSpec {
    /// Shuffle (ids sorted first, so input order does not matter) and hold
    /// out `round(fraction * n)` records.
    RandomFraction { fraction: f64, seed: u64 },
    /// Hold out every record whose `field` takes one of `held_out`.
    ByKey {
        field: String,
        held_out: BTreeSet<String>,
    },
}

fn field_value(record: &ArchRecord, field: &str) -> Option<String> {
    match field {
        "id" => Some(record.id.clone()),
        "space" => Some(record.space.clone()),
        _ => match record.extra.get(field)? {
            Value::String(s) => Some(s.clone()),
            Value::Null => None,
            other => Some(other.to_string()),
        },
    }
}

/// Returns the records with `split` set to train or val.
pub fn assign_splits(records: &[ArchRecord], spec: &SplitSpec) -> Result<Vec<ArchRecord>> {
    let mut out = records.to_vec();
    match spec {
        SplitSpec::RandomFraction { fraction, seed } => {
            if !(*fraction > 0.0 && *fraction < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "validation fraction {fraction} must lie in (0, 1)"
                )));
            }
            let mut idx: Vec<usize> = (0..out.len()).collect();
            idx.sort_by(|&a, &b| out[a].id.cmp(&out[b].id));
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
            let n_val = (fraction * out.len() as f64).round() as usize;
            for (k, &i) in idx.iter().enumerate() {
                out[i].split = if k < n_val { Split::Val } else { Split::Train };
            }
        }
        SplitSpec::ByKey { field, held_out } => {
            for r in &mut out {
                let held = field_value(r, field).is_some_and(|v| held_out.contains(&v));
                r.split = if held { Split::Val } else { Split::Train };
            }
        }
    }
    if !out.iter().any(|r| r.split == Split::Val) {
        return Err(Error::EmptyVal);
    }
    Ok(out)
}

/// Failure to encode one record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorRecord {
    pub id: String,
    /// `Kind: message` on a single line.
    pub error: String,
}

impl ErrorRecord {
    pub fn to_json(&self) -> Value {
        serde_json::json!({ "id": self.id, "error": self.error })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchOutput {
    /// Successfully encoded records, in input order, with `text` set.
    pub encoded: Vec<ArchRecord>,
    pub errors: Vec<ErrorRecord>,
}

/// Error rendered as `Kind: message` on one line.
pub fn error_line(e: &Error) -> String {
    format!("{}: {}", e.kind(), e).replace(['\n', '\r'], " ")
}

fn encode_record(
    record: &ArchRecord,
    cfg: &EncodingConfig,
    base: Option<&Path>,
) -> Result<ArchRecord> {
    let path = match &record.source {
        Source::Text(_) => return Ok(record.clone()),
        Source::Path(p) => match base {
            Some(b) if p.is_relative() => b.join(p),
            _ => p.clone(),
        },
    };
    let enc = encode_file(&path, cfg)?;
    Ok(ArchRecord {
        source: Source::Text(enc.text),
        ..record.clone()
    })
}

/// Encodes every record on a pool of `workers` threads. Output order follows
/// input order regardless of the worker count; relative paths resolve
/// against `base`.
pub fn batch_encode(
    records: &[ArchRecord],
    cfg: &EncodingConfig,
    workers: usize,
    base: Option<&Path>,
) -> Result<BatchOutput> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<ArchRecord>> = pool.install(|| {
        records
            .par_iter()
            .map(|r| encode_record(r, cfg, base))
            .collect()
    });
    let mut out = BatchOutput::default();
    for (record, result) in records.iter().zip(results) {
        match result {
            Ok(r) => out.encoded.push(r),
            Err(e) => {
                log::warn!("failed to encode {}: {e}", record.id);
                out.errors.push(ErrorRecord {
                    id: record.id.clone(),
                    error: error_line(&e),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub score: f64,
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let values: Vec<Value> = preds
        .iter()
        .map(|p| serde_json::json!({ "id": p.id, "score": p.score }))
        .collect();
    write_jsonl(path, &values)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: &str| Error::MalformedRecord {
            line: i + 1,
            reason: reason.to_string(),
        };
        let v: Value = serde_json::from_str(&line).map_err(|e| malformed(&e.to_string()))?;
        let id = match v.get("id") {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => return Err(malformed("missing string \"id\"")),
        };
        let score = v
            .get("score")
            .and_then(Value::as_f64)
            .ok_or_else(|| malformed("missing numeric \"score\""))?;
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
        out.push(Prediction { id, score });
    }
    Ok(out)
}
