mod common;

use std::path::Path;

use common::cli;
use onnxnet::datasetio::{assign_splits, write_manifest, ArchRecord, SplitSpec};
use serde_json::{json, Value};

fn json_line(s: &str) -> Value {
    assert_eq!(s.lines().count(), 1, "{s:?}");
    serde_json::from_str(s).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn encode_golden_conv() {
    let dir = tempfile::tempdir().unwrap();
    let model = common::write_model(dir.path(), "conv", &common::golden_conv());
    let (code, out, err) = cli(&["encode", p(&model)]);
    assert_eq!((code, err.as_str()), (0, ""));
    assert_eq!(out, common::GOLDEN_LINE);
    assert_eq!(cli(&["encode", p(&model)]).1, out);

    let (code, base, _) = cli(&["encode", p(&model), "--variant", "base"]);
    assert_eq!(code, 0);
    assert_eq!(base, "Conv --> Out\n");

    let dest = dir.path().join("conv.txt");
    assert_eq!(cli(&["encode", p(&model), "--out", p(&dest)]).0, 0);
    assert_eq!(std::fs::read_to_string(dest).unwrap(), common::GOLDEN_LINE);
}

#[test]
fn stats_and_simplify_report() {
    let dir = tempfile::tempdir().unwrap();
    let model = common::write_model(dir.path(), "net", &common::conv_net(&[3, 5], 8, 10));
    let (code, out, _) = cli(&["stats", p(&model)]);
    assert_eq!(code, 0);
    let v = json_line(&out);
    assert_eq!(v["nodes"], 8);
    assert_eq!(v["simplified_nodes"], 7, "MatMul + Add fuse to Gemm");
    assert_eq!(v["opset"], 13);
    assert_eq!(
        v["op_histogram"],
        json!({"Add": 1, "Conv": 2, "Flatten": 1, "GlobalAveragePool": 1, "MatMul": 1, "Relu": 2})
    );
    let variants = v["variants"].as_object().unwrap();
    assert_eq!(variants.len(), 5);
    assert!(variants["base"]["tokens"].as_u64() <= variants["full"]["tokens"].as_u64());
    assert_eq!(variants["full"]["lines"], 1);

    let simplified = dir.path().join("s.onnx");
    let (code, out, _) = cli(&["simplify", p(&model), "--out", p(&simplified), "--report"]);
    assert_eq!(code, 0);
    let v = json_line(&out);
    assert_eq!(
        (v["nodes_before"].as_u64(), v["nodes_after"].as_u64()),
        (Some(8), Some(7))
    );
    assert!(!v["passes"].as_array().unwrap().is_empty());
    // the simplified file is itself a readable model
    let (code, out, _) = cli(&["stats", p(&simplified)]);
    assert_eq!(code, 0);
    assert_eq!(json_line(&out)["nodes"], 7);
}

#[test]
fn ingest_writes_encodings_and_error_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let mut records = Vec::new();
    for i in 0..6 {
        common::write_model(
            dir.path(),
            &format!("m{i}"),
            &common::conv_net(&vec![3; i + 1], 8, 10),
        );
        records.push(ArchRecord::with_path(
            format!("m{i}"),
            format!("m{i}.onnx"),
            Some(50.0 + i as f64),
        ));
    }
    std::fs::write(dir.path().join("bad.onnx"), b"garbage").unwrap();
    records.push(ArchRecord::with_path("bad", "bad.onnx", Some(1.0)));
    let manifest = dir.path().join("in.jsonl");
    write_manifest(&manifest, &records).unwrap();

    let out_path = dir.path().join("enc.jsonl");
    let (code, out, _) = cli(&[
        "ingest",
        "--manifest",
        p(&manifest),
        "--out",
        p(&out_path),
        "--val-fraction",
        "0.5",
    ]);
    assert_eq!(code, 0);
    let v = json_line(&out);
    assert_eq!(
        (v["encoded"].as_u64(), v["failed"].as_u64()),
        (Some(6), Some(1))
    );
    let sidecar = std::fs::read_to_string(format!("{}.errors.jsonl", p(&out_path))).unwrap();
    let err = json_line(&sidecar);
    assert_eq!(err["id"], "bad");
    assert!(err["error"]
        .as_str()
        .unwrap()
        .starts_with("MalformedFile: "));

    let lines: Vec<Value> = std::fs::read_to_string(&out_path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 6);
    assert!(lines
        .iter()
        .all(|l| l.get("path").is_none() && l["text"].as_str().unwrap().ends_with('\n')));
    let val = lines.iter().filter(|l| l["split"] == "val").count();
    assert!(val == 3 || val == 4, "{val}");
}

#[test]
fn train_predict_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = common::synthetic_corpus(150, 5);
    let records: Vec<ArchRecord> = corpus
        .iter()
        .map(|s| ArchRecord::with_text(&s.id, &s.text, Some(s.accuracy)))
        .collect();
    let records = assign_splits(
        &records,
        &SplitSpec::RandomFraction {
            fraction: 0.2,
            seed: 42,
        },
    )
    .unwrap();
    let train = dir.path().join("train.jsonl");
    write_manifest(&train, &records).unwrap();

    let model = dir.path().join("ranker.bin");
    let (code, out, err) = cli(&[
        "train-ranker",
        "--train",
        p(&train),
        "--model-out",
        p(&model),
        "--epochs",
        "3",
    ]);
    assert_eq!(code, 0, "{err}");
    let v = json_line(&out);
    assert_eq!(
        (v["n_train"].as_u64(), v["n_val"].as_u64()),
        (Some(120), Some(30))
    );
    assert_eq!(v["epoch_losses"].as_array().unwrap().len(), 3);
    assert!(v["val_kendall_tau"].as_f64().unwrap() > 0.5, "{v}");

    // predict from .onnx paths: encodes on the fly
    let mut held = Vec::new();
    for s in corpus.iter().take(12) {
        common::write_model(dir.path(), &s.id, &s.graph);
        held.push(ArchRecord::with_path(
            &s.id,
            format!("{}.onnx", s.id),
            Some(s.accuracy),
        ));
    }
    let manifest = dir.path().join("held.jsonl");
    write_manifest(&manifest, &held).unwrap();
    let preds = dir.path().join("preds.jsonl");
    let (code, out, err) = cli(&[
        "predict",
        "--model",
        p(&model),
        "--manifest",
        p(&manifest),
        "--out",
        p(&preds),
    ]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(json_line(&out), json!({"predictions": 12}));

    let (code, out, err) = cli(&["eval", "--pred", p(&preds), "--truth", p(&manifest)]);
    assert_eq!(code, 0, "{err}");
    let v = json_line(&out);
    assert_eq!(v["n"], 12);
    let tau = v["kendall_tau"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&tau) && tau > 0.0, "{v}");
    assert!(v["spearman_rho"].as_f64().is_some());
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let truth = dir.path().join("truth.jsonl");
    let preds = dir.path().join("preds.jsonl");
    let mut t = String::new();
    let mut q = String::new();
    for (i, acc) in [71.5, 60.0, 88.25, 60.0, 93.0].iter().enumerate() {
        t += &format!(
            "{}\n",
            json!({"id": format!("a{i}"), "text": "Relu --> Out\n", "accuracy": acc})
        );
        q += &format!("{}\n", json!({"id": format!("a{i}"), "score": acc}));
    }
    std::fs::write(&truth, t).unwrap();
    std::fs::write(&preds, q).unwrap();
    let (code, out, _) = cli(&["eval", "--pred", p(&preds), "--truth", p(&truth)]);
    assert_eq!(code, 0);
    assert_eq!(out, "{\"kendall_tau\":1.0,\"n\":5,\"spearman_rho\":1.0}\n");
}

#[test]
fn diversity_within_and_between() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, texts: &[&str]| {
        let path = dir.path().join(name);
        let body: String = texts
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{}\n", json!({"id": format!("{name}{i}"), "text": t})))
            .collect();
        std::fs::write(&path, body).unwrap();
        path
    };
    let a = write("a.jsonl", &["Conv --> Out\n", "Conv --> Relu --> Out\n"]);
    let b = write("b.jsonl", &["Gemm --> Out\n", "Gemm --> Sigmoid --> Out\n"]);

    let (code, out, _) = cli(&["diversity", "--manifest-a", p(&a)]);
    assert_eq!(code, 0);
    let v = json_line(&out);
    assert_eq!(v["mode"], "Within");
    assert_eq!(v["pairs"], 1);
    assert!((v["value_bits"].as_f64().unwrap() - 0.311278).abs() < 1e-6);

    let (code, out, _) = cli(&["diversity", "--manifest-a", p(&a), "--manifest-b", p(&b)]);
    assert_eq!(code, 0);
    let v = json_line(&out);
    assert_eq!(v["mode"], "Between");
    assert_eq!(v["value_bits"], 1.0);
    assert_eq!(
        (v["space_a"].as_str(), v["space_b"].as_str()),
        (Some("a"), Some("b"))
    );

    let (code, out, _) = cli(&["diversity", "--manifest-a", p(&a), "--manifest-b", p(&a)]);
    assert_eq!(code, 0);
    assert_eq!(json_line(&out)["value_bits"], 0.0);
}

#[test]
fn usage_and_operational_errors() {
    let (code, out, err) = cli(&["encode", "--bogus"]);
    assert_eq!(code, 2);
    assert!(out.is_empty() && !err.is_empty());
    assert_eq!(cli(&["frobnicate"]).0, 2);
    assert_eq!(cli(&["encode", "x.onnx", "--variant", "huge"]).0, 2);
    assert_eq!(cli(&["--help"]).0, 0);

    let (code, out, err) = cli(&["encode", "/nonexistent/model.onnx"]);
    assert_eq!(code, 1);
    assert!(out.is_empty());
    let v = json_line(&err);
    assert_eq!(v["error"], "Io");
    assert!(v["message"]
        .as_str()
        .unwrap()
        .contains("/nonexistent/model.onnx"));

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.onnx");
    std::fs::write(&junk, b"\xff\xff\xff").unwrap();
    let (code, _, err) = cli(&["stats", p(&junk)]);
    assert_eq!(code, 1);
    assert_eq!(json_line(&err)["error"], "MalformedFile");

    let manifest = dir.path().join("m.jsonl");
    std::fs::write(
        &manifest,
        "{\"id\":\"a\",\"text\":\"x\",\"accuracy\":150}\n",
    )
    .unwrap();
    let (code, _, err) = cli(&["eval", "--pred", p(&manifest), "--truth", p(&manifest)]);
    assert_eq!(code, 1);
    assert_eq!(json_line(&err)["error"], "MalformedRecord");
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_onnxnet");
    let dir = tempfile::tempdir().unwrap();
    let model = common::write_model(dir.path(), "conv", &common::golden_conv());
    let ok = std::process::Command::new(bin)
        .args(["encode", p(&model)])
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert_eq!(String::from_utf8(ok.stdout).unwrap(), common::GOLDEN_LINE);
    let usage = std::process::Command::new(bin)
        .arg("--nope")
        .output()
        .unwrap();
    assert_eq!(usage.status.code(), Some(2));
    let missing = std::process::Command::new(bin)
        .args(["stats", "missing.onnx"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(1));
    assert_eq!(
        json_line(&String::from_utf8(missing.stderr).unwrap())["error"],
        "Io"
    );
}
