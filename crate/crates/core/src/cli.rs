//! Command-line front end. [`run`] is the whole program minus process setup,
//! so it can be driven from tests.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::datasetio::{
    assign_splits, batch_encode, read_manifest, read_predictions, write_jsonl, write_manifest,
    write_predictions, ArchRecord, Prediction, ReadOptions, Source, Split, SplitSpec,
};
use crate::diversity::{
    between_space_diversity_with, op_histogram, op_histogram_from_encoding, sample_indices,
    within_space_diversity_with, OpHistogram, Pooling, WithinConfig, DEFAULT_SAMPLES,
};
use crate::graph_ir::read_onnx;
use crate::passes::{serialize, simplify};
use crate::ranking::{
    kendall_tau, spearman_rho, train_ranker, LrSchedule, RankerModel, ScoredEntry, ScoredSet,
    TrainConfig,
};
use crate::textenc::{encode, prepare, EncodingConfig};
use crate::Error;

/// Environment variable holding the log filter (e.g. `info`, `onnxnet=debug`).
pub const LOG_ENV: &str = "ONNXNET_LOG";

#[derive(Debug, Parser)]
#[command(
    name = "onnxnet",
    version,
    about = "Condensed text encodings of ONNX networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the text encoding of a model.
    Encode {
        model: PathBuf,
        #[arg(long, default_value = "full", value_parser = clap::builder::PossibleValuesParser::new(EncodingConfig::VARIANTS))]
        variant: String,
        /// Write the encoding here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simplify a model and write it back as ONNX.
    Simplify {
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Print per-pass statistics.
        #[arg(long)]
        report: bool,
    },
    /// Node counts, op histogram and encoding sizes.
    Stats { model: PathBuf },
    /// Jensen–Shannon diversity of op-type histograms.
    Diversity {
        #[arg(long = "manifest-a")]
        manifest_a: PathBuf,
        #[arg(long = "manifest-b")]
        manifest_b: Option<PathBuf>,
        /// Diversity within the first manifest even when a second is given.
        #[arg(long)]
        within: bool,
        /// Networks sampled per manifest.
        #[arg(short = 'n', long = "samples", default_value_t = DEFAULT_SAMPLES)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "count", value_parser = ["count", "mean"])]
        pooling: String,
    },
    /// Rank correlation of predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Train a pairwise ranker on encoded architectures.
    TrainRanker(TrainArgs),
    /// Score every record of a manifest.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        encoding: EncodingArgs,
    },
    /// Encode every model listed in a manifest.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sidecar for records that failed (default: `<out>.errors.jsonl`).
        #[arg(long)]
        errors: Option<PathBuf>,
        /// Hold out this fraction of records as the validation split.
        #[arg(long = "val-fraction")]
        val_fraction: Option<f64>,
        /// Hold out records whose FIELD equals one of the given values (FIELD=V1,V2).
        #[arg(long = "hold-out", conflicts_with = "val_fraction")]
        hold_out: Option<String>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[command(flatten)]
        encoding: EncodingArgs,
    },
}

#[derive(Debug, Args)]
struct EncodingArgs {
    #[arg(long, default_value = "full", value_parser = clap::builder::PossibleValuesParser::new(EncodingConfig::VARIANTS))]
    variant: String,
    /// Worker threads (0: one per core).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Accept accuracies in [0, 1] and scale them to percent.
    #[arg(long = "rescale-accuracy")]
    rescale_accuracy: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    /// Validation manifest; without it, records of the training manifest
    /// marked `"split": "val"` are held out.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long = "model-out")]
    model_out: PathBuf,
    #[arg(long, default_value_t = 5e-5)]
    lr: f64,
    #[arg(long = "end-lr", default_value_t = 5e-6)]
    end_lr: f64,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long = "batch", default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value = "polynomial", value_parser = ["polynomial", "constant"])]
    schedule: String,
    #[arg(long = "weight-decay", default_value_t = 0.1)]
    weight_decay: f64,
    #[arg(long = "warmup", default_value_t = 0.06)]
    warmup_ratio: f64,
    #[arg(long, default_value_t = 1.0)]
    margin: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// log2 of the hashed feature dimension.
    #[arg(long = "feature-bits", default_value_t = 18, value_parser = clap::value_parser!(u32).range(1..=31))]
    feature_bits: u32,
    #[command(flatten)]
    encoding: EncodingArgs,
}

/// Runs the program; returns the process exit code (0 success, 1 failure,
/// 2 usage error). Errors are reported on `err` as one JSON line.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let sink: &mut dyn Write = if code == 0 { out } else { err };
            let _ = sink.write_all(text.as_bytes());
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| c.downcast_ref::<Error>())
                .map_or("Error", Error::kind);
            let message = format!("{e:#}").replace('\n', " ");
            let _ = writeln!(err, "{}", json!({ "error": kind, "message": message }));
            1
        }
    }
}

fn emit(out: &mut dyn Write, value: &impl Serialize) -> anyhow::Result<()> {
    // round-trip through Value so object keys come out sorted
    let v = serde_json::to_value(value)?;
    writeln!(out, "{}", serde_json::to_string(&v)?)?;
    Ok(())
}

fn variant(name: &str) -> anyhow::Result<EncodingConfig> {
    EncodingConfig::variant(name).ok_or_else(|| anyhow!("unknown variant {name:?}"))
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn read_records(path: &Path, rescale: bool) -> anyhow::Result<Vec<ArchRecord>> {
    read_manifest(
        path,
        &ReadOptions {
            rescale_fractions: rescale,
        },
    )
    .with_context(|| format!("reading manifest {}", path.display()))
}

/// Records of a manifest with every `path` replaced by its encoding; any
/// failure aborts.
fn encoded_records(path: &Path, enc: &EncodingArgs) -> anyhow::Result<Vec<ArchRecord>> {
    let records = read_records(path, enc.rescale_accuracy)?;
    let cfg = variant(&enc.variant)?;
    let batch = batch_encode(
        &records,
        &cfg,
        workers(enc.workers),
        Some(&manifest_dir(path)),
    )?;
    if let Some(first) = batch.errors.first() {
        bail!(
            "{} record(s) failed to encode; first: {}: {}",
            batch.errors.len(),
            first.id,
            first.error
        );
    }
    Ok(batch.encoded)
}

fn workers(n: usize) -> usize {
    if n > 0 {
        n
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    }
}

fn labelled(records: &[ArchRecord], what: &str) -> anyhow::Result<Vec<(String, f64)>> {
    records
        .iter()
        .map(|r| {
            let acc = r
                .accuracy
                .ok_or_else(|| anyhow!("{what} record {} has no accuracy", r.id))?;
            Ok((r.text().unwrap_or_default().to_string(), acc))
        })
        .collect()
}

fn dispatch(command: Command, out: &mut dyn Write) -> anyhow::Result<()> {
    match command {
        Command::Encode {
            model,
            variant: v,
            out: dest,
        } => {
            let cfg = variant(&v)?;
            let g = read_onnx(&model)?;
            let enc = encode(&prepare(&g)?, &cfg);
            match dest {
                Some(p) => std::fs::write(&p, &enc.text).map_err(|e| Error::io(&p, e))?,
                None => out.write_all(enc.text.as_bytes())?,
            }
        }
        Command::Simplify {
            model,
            out: dest,
            report,
        } => {
            let g = read_onnx(&model)?;
            let (s, reports) = simplify(&g)?;
            std::fs::write(&dest, serialize(&s)).map_err(|e| Error::io(&dest, e))?;
            if report {
                emit(
                    out,
                    &json!({
                        "nodes_before": g.node_count(),
                        "nodes_after": s.node_count(),
                        "passes": reports,
                    }),
                )?;
            }
        }
        Command::Stats { model } => {
            let g = read_onnx(&model)?;
            let prepared = prepare(&g)?;
            let mut ops: BTreeMap<&str, usize> = BTreeMap::new();
            for n in g.nodes() {
                *ops.entry(n.op_type.as_str()).or_default() += 1;
            }
            let variants: BTreeMap<&str, Value> = EncodingConfig::VARIANTS
                .iter()
                .map(|&name| {
                    let e = encode(
                        &prepared,
                        &EncodingConfig::variant(name).expect("known variant"),
                    );
                    (
                        name,
                        json!({ "lines": e.line_count, "tokens": e.token_estimate }),
                    )
                })
                .collect();
            emit(
                out,
                &json!({
                    "nodes": g.node_count(),
                    "simplified_nodes": prepared.node_count(),
                    "opset": g.opset(),
                    "op_histogram": ops,
                    "variants": variants,
                }),
            )?;
        }
        Command::Diversity {
            manifest_a,
            manifest_b,
            within,
            samples,
            seed,
            pooling,
        } => {
            let pooling = if pooling == "mean" {
                Pooling::Mean
            } else {
                Pooling::Count
            };
            let a = sampled_histograms(&manifest_a, samples, seed)?;
            let name = |p: &Path| {
                p.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            };
            let mut report = match manifest_b.as_deref() {
                Some(b_path) if !within => {
                    let b = sampled_histograms(b_path, samples, seed)?;
                    let mut r = between_space_diversity_with(&a, &b, pooling)?;
                    r.space_b = Some(name(b_path));
                    r.seed = Some(seed);
                    r
                }
                _ => {
                    let mut r = within_space_diversity_with(
                        &a,
                        &WithinConfig {
                            max_exhaustive: samples.max(2),
                            seed,
                        },
                    )?;
                    r.seed = Some(seed);
                    r
                }
            };
            report.space_a = name(&manifest_a);
            emit(out, &report)?;
        }
        Command::Eval { pred, truth } => {
            let preds = read_predictions(&pred)?;
            let truth_records = read_records(&truth, false)?;
            let acc: HashMap<&str, Option<f64>> = truth_records
                .iter()
                .map(|r| (r.id.as_str(), r.accuracy))
                .collect();
            let set: ScoredSet = preds
                .iter()
                .map(|p| {
                    let accuracy = acc.get(p.id.as_str()).copied().flatten().ok_or_else(|| {
                        anyhow!("prediction {} has no ground-truth accuracy", p.id)
                    })?;
                    Ok(ScoredEntry {
                        id: p.id.clone(),
                        score: p.score,
                        accuracy,
                    })
                })
                .collect::<anyhow::Result<_>>()?;
            emit(
                out,
                &json!({
                    "n": set.len(),
                    "kendall_tau": kendall_tau(&set)?,
                    "spearman_rho": spearman_rho(&set)?,
                }),
            )?;
        }
        Command::TrainRanker(args) => train(args, out)?,
        Command::Predict {
            model,
            manifest,
            out: dest,
            encoding,
        } => {
            let model = RankerModel::load(&model)?;
            let records = encoded_records(&manifest, &encoding)?;
            let preds: Vec<Prediction> = records
                .iter()
                .map(|r| Prediction {
                    id: r.id.clone(),
                    score: model.score(r.text().unwrap_or_default()),
                })
                .collect();
            write_predictions(&dest, &preds)?;
            emit(out, &json!({ "predictions": preds.len() }))?;
        }
        Command::Ingest {
            manifest,
            out: dest,
            errors,
            val_fraction,
            hold_out,
            seed,
            encoding,
        } => {
            let mut records = read_records(&manifest, encoding.rescale_accuracy)?;
            let split = match (val_fraction, hold_out) {
                (Some(fraction), _) => Some(SplitSpec::RandomFraction { fraction, seed }),
                (None, Some(spec)) => {
                    let (field, values) = spec.split_once('=').ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "--hold-out expects FIELD=V1,V2, got {spec:?}"
                        ))
                    })?;
                    Some(SplitSpec::ByKey {
                        field: field.to_string(),
                        held_out: values
                            .split(',')
                            .map(str::to_string)
                            .collect::<BTreeSet<_>>(),
                    })
                }
                (None, None) => None,
            };
            if let Some(spec) = split {
                records = assign_splits(&records, &spec)?;
            }
            let cfg = variant(&encoding.variant)?;
            let batch = batch_encode(
                &records,
                &cfg,
                workers(encoding.workers),
                Some(&manifest_dir(&manifest)),
            )?;
            write_manifest(&dest, &batch.encoded)?;
            let errors_path = errors.unwrap_or_else(|| {
                let mut s = dest.clone().into_os_string();
                s.push(".errors.jsonl");
                PathBuf::from(s)
            });
            let values: Vec<Value> = batch.errors.iter().map(|e| e.to_json()).collect();
            write_jsonl(&errors_path, &values)?;
            emit(
                out,
                &json!({
                    "encoded": batch.encoded.len(),
                    "failed": batch.errors.len(),
                    "errors": errors_path.to_string_lossy(),
                }),
            )?;
        }
    }
    Ok(())
}

fn sampled_histograms(manifest: &Path, n: usize, seed: u64) -> anyhow::Result<Vec<OpHistogram>> {
    let mut records = read_records(manifest, false).or_else(|_| read_records(manifest, true))?;
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let base = manifest_dir(manifest);
    sample_indices(records.len(), n, seed)
        .into_iter()
        .map(|i| {
            let r = &records[i];
            let h = match &r.source {
                Source::Text(t) => op_histogram_from_encoding(t),
                Source::Path(p) => op_histogram(&read_onnx(&base.join(p))?),
            };
            h.with_context(|| format!("histogram of record {}", r.id))
        })
        .collect()
}

fn train(args: TrainArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let train_records = encoded_records(&args.train, &args.encoding)?;
    let (train_set, val_set): (Vec<ArchRecord>, Vec<ArchRecord>) = match &args.val {
        Some(v) => (train_records, encoded_records(v, &args.encoding)?),
        None => train_records
            .into_iter()
            .partition(|r| r.split != Split::Val),
    };
    let cfg = TrainConfig {
        learning_rate: args.lr,
        epochs: args.epochs,
        batch_size: args.batch_size,
        schedule: if args.schedule == "constant" {
            LrSchedule::Constant
        } else {
            LrSchedule::Polynomial {
                end_lr: args.end_lr,
                power: 1.0,
            }
        },
        weight_decay: args.weight_decay,
        warmup_ratio: args.warmup_ratio,
        margin: args.margin,
        seed: args.seed,
        feature_dim: 1 << args.feature_bits,
        ..TrainConfig::default()
    };
    let examples = labelled(&train_set, "training")?;
    log::info!("training on {} examples", examples.len());
    let (model, log) = train_ranker(&examples, &cfg)?;
    model.save(&args.model_out)?;

    let mut summary = json!({
        "n_train": train_set.len(),
        "n_val": val_set.len(),
        "steps": log.steps,
        "epoch_losses": log.epoch_losses,
    });
    if !val_set.is_empty() {
        let val = labelled(&val_set, "validation")?;
        let set: ScoredSet = val_set
            .iter()
            .zip(&val)
            .map(|(r, (text, accuracy))| ScoredEntry {
                id: r.id.clone(),
                score: model.score(text),
                accuracy: *accuracy,
            })
            .collect();
        summary["val_kendall_tau"] = json!(kendall_tau(&set)?);
        summary["val_spearman_rho"] = json!(spearman_rho(&set)?);
    }
    emit(out, &summary)
}
