//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use onnxnet::graph_ir::{AttributeValue, GraphBuilder, GraphIR};
use onnxnet::passes::serialize;
use onnxnet::textenc::{encode, prepare, EncodingConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Conv/Relu stack with "same" padding, global pooling and a linear head.
pub fn conv_net(kernels: &[i64], width: u64, classes: u64) -> GraphIR {
    let mut b = GraphBuilder::new(13);
    let mut x = b.input("image", &[1, 3, 16, 16]);
    let mut channels = 3;
    for (i, &k) in kernels.iter().enumerate() {
        let w = b.param(
            &format!("conv{i}.w"),
            &[width, channels, k as u64, k as u64],
        );
        let bias = b.param(&format!("conv{i}.b"), &[width]);
        let p = (k - 1) / 2;
        let c = b.op_with(
            "Conv",
            &[&x, &w, &bias],
            [
                ("kernel_shape", AttributeValue::Ints(vec![k, k])),
                ("pads", AttributeValue::Ints(vec![p; 4])),
                ("strides", AttributeValue::Ints(vec![1, 1])),
                ("dilations", AttributeValue::Ints(vec![1, 1])),
            ],
        );
        x = b.op("Relu", &[&c]);
        channels = width;
    }
    let pooled = b.op("GlobalAveragePool", &[&x]);
    let flat = b.op("Flatten", &[&pooled]);
    let fw = b.param("fc.w", &[width, classes]);
    let fb = b.param("fc.b", &[classes]);
    let mm = b.op("MatMul", &[&flat, &fw]);
    let y = b.op("Add", &[&mm, &fb]);
    b.output(&y);
    b.build().expect("valid conv net")
}

/// Conv 3→128, k=3, p=1, s=1 on a 1x3x32x32 input.
pub fn golden_conv() -> GraphIR {
    let mut b = GraphBuilder::new(13);
    let x = b.input("x", &[1, 3, 32, 32]);
    let w = b.param("w", &[128, 3, 3, 3]);
    let bias = b.param("b", &[128]);
    let y = b.op_with(
        "Conv",
        &[&x, &w, &bias],
        [
            ("dilations", AttributeValue::Ints(vec![1, 1])),
            ("group", AttributeValue::Int(1)),
            ("kernel_shape", AttributeValue::Ints(vec![3, 3])),
            ("pads", AttributeValue::Ints(vec![1, 1, 1, 1])),
            ("strides", AttributeValue::Ints(vec![1, 1])),
        ],
    );
    b.output(&y);
    b.build().expect("valid conv")
}

pub const GOLDEN_LINE: &str =
    "Conv(1x3x32x32, 128x3x3x3, 128)(dilations=1,kernel_shape=3,pads=1,strides=1) --> Out:1x128x32x32\n";

/// Runs the CLI in-process: (exit code, stdout, stderr).
pub fn cli(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("onnxnet").chain(args.iter().copied());
    let code = onnxnet::cli::run(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

/// One synthetic architecture with its (made-up) accuracy.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub id: String,
    pub graph: GraphIR,
    pub text: String,
    pub accuracy: f64,
}

/// `n` conv stacks whose accuracy is a strictly increasing function of
/// depth and of the mean kernel size; width is an unrelated nuisance.
pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<Synthetic> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let depth = rng.random_range(1..=10usize);
            let kernels: Vec<i64> = (0..depth)
                .map(|_| [1, 3, 5, 7][rng.random_range(0..4)])
                .collect();
            let width = [8, 16, 32][rng.random_range(0..3)];
            let graph = conv_net(&kernels, width, 10);
            let text = encode(&prepare(&graph).unwrap(), &EncodingConfig::full()).text;
            let mean_kernel = kernels.iter().sum::<i64>() as f64 / depth as f64;
            let accuracy = 40.0 + 5.0 * depth as f64 + 0.5 * mean_kernel;
            Synthetic {
                id: format!("net{i:04}"),
                graph,
                text,
                accuracy,
            }
        })
        .collect()
}

/// Serializes `g` to `dir/name.onnx`.
pub fn write_model(dir: &Path, name: &str, g: &GraphIR) -> PathBuf {
    let path = dir.join(format!("{name}.onnx"));
    std::fs::write(&path, serialize(g)).unwrap();
    path
}

/// Text-level reconstruction of a reduced variant from the full encoding:
/// argument groups hold no `=`, parameter groups always do.
pub fn strip_full(full: &str, cfg: &EncodingConfig) -> String {
    let mut out = String::new();
    for line in full.lines() {
        let mut clauses: Vec<String> = line.split(" --> ").map(str::to_string).collect();
        let outs = clauses.pop().unwrap();
        for clause in &mut clauses {
            let (op, mut rest) = clause.split_at(clause.find('(').unwrap_or(clause.len()));
            let mut kept = op.to_string();
            while !rest.is_empty() {
                let end = rest.find(')').unwrap() + 1;
                let group = &rest[..end];
                let is_params = group.contains('=');
                if (is_params && cfg.include_parameters) || (!is_params && cfg.include_inputs) {
                    kept.push_str(group);
                }
                rest = &rest[end..];
            }
            *clause = kept;
        }
        let outs: Vec<&str> = outs
            .split(", ")
            .map(|o| {
                if cfg.include_out_shape {
                    o
                } else {
                    o.split(':').next().unwrap()
                }
            })
            .collect();
        clauses.push(outs.join(", "));
        out.push_str(&clauses.join(" --> "));
        out.push('\n');
    }
    out
}

/// Stem conv, parallel Conv/Relu branches (one kernel list each) joined by
/// Concat, then a pooled linear head. Encodes to `branches + 2` lines when
/// there are at least two branches.
pub fn branchy_net(branches: &[Vec<i64>], width: u64) -> GraphIR {
    let mut b = GraphBuilder::new(13);
    let x = b.input("image", &[1, 3, 16, 16]);
    let conv = |b: &mut GraphBuilder, x: &str, cin: u64, k: i64, tag: &str| {
        let w = b.param(&format!("{tag}.w"), &[width, cin, k as u64, k as u64]);
        let p = (k - 1) / 2;
        let c = b.op_with(
            "Conv",
            &[x, &w],
            [
                ("kernel_shape", AttributeValue::Ints(vec![k, k])),
                ("pads", AttributeValue::Ints(vec![p; 4])),
            ],
        );
        b.op("Relu", &[&c])
    };
    let stem = conv(&mut b, &x, 3, 3, "stem");
    let mut outs = Vec::new();
    for (i, kernels) in branches.iter().enumerate() {
        let mut h = stem.clone();
        for (j, &k) in kernels.iter().enumerate() {
            h = conv(&mut b, &h, width, k, &format!("b{i}.{j}"));
        }
        outs.push(h);
    }
    let refs: Vec<&str> = outs.iter().map(String::as_str).collect();
    let joined = if refs.len() > 1 {
        b.op_with("Concat", &refs, [("axis", AttributeValue::Int(1))])
    } else {
        outs[0].clone()
    };
    let pooled = b.op("GlobalAveragePool", &[&joined]);
    let flat = b.op("Flatten", &[&pooled]);
    let fw = b.param("fc.w", &[width * branches.len() as u64, 10]);
    let fb = b.param("fc.b", &[10]);
    let mm = b.op("MatMul", &[&flat, &fw]);
    let y = b.op("Add", &[&mm, &fb]);
    b.output(&y);
    b.build().expect("valid branchy net")
}

/// `n` branchy nets (1 to 8 single-conv branches) labelled with the number
/// of lines in their full encoding.
pub fn lines_corpus(n: usize, seed: u64) -> Vec<Synthetic> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let branches: Vec<Vec<i64>> = (0..rng.random_range(1..=8usize))
                .map(|_| vec![[1, 3, 5][rng.random_range(0..3)]])
                .collect();
            let graph = branchy_net(&branches, [8, 16][rng.random_range(0..2)]);
            let enc = encode(&prepare(&graph).unwrap(), &EncodingConfig::full());
            Synthetic {
                id: format!("branchy{i:04}"),
                graph,
                accuracy: enc.line_count as f64,
                text: enc.text,
            }
        })
        .collect()
}
