mod common;

use std::collections::BTreeSet;
use std::io::Cursor;

use onnxnet::datasetio::{
    assign_splits, batch_encode, parse_manifest, read_manifest, read_predictions, write_manifest,
    write_predictions, ArchRecord, Prediction, ReadOptions, Split, SplitSpec,
};
use onnxnet::textenc::{encode, prepare, EncodingConfig};
use onnxnet::Error;
use serde_json::{json, Value};

fn records(n: usize) -> Vec<ArchRecord> {
    (0..n)
        .map(|i| {
            let mut r = ArchRecord::with_text(
                format!("a{i:03}"),
                format!("Relu --> Out:1x{i}\n"),
                Some(50.0 + i as f64 / 4.0),
            );
            r.space = ["nb101", "nb201"][i % 2].into();
            r.extra
                .insert("seed".into(), json!(format!("s{}", i % 3 + 1)));
            r.extra
                .insert("nested".into(), json!({"k": [i, null, "x"]}));
            r
        })
        .collect()
}

#[test]
fn manifest_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    let mut rs = records(100);
    rs[7].accuracy = None;
    rs[8].split = Split::Val;
    write_manifest(&path, &rs).unwrap();
    let back = read_manifest(&path, &ReadOptions::default()).unwrap();
    assert_eq!(back, rs);
    // writing again is byte-identical
    let again = dir.path().join("m2.jsonl");
    write_manifest(&again, &back).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(&again).unwrap()
    );
}

fn parse(s: &str) -> onnxnet::Result<Vec<ArchRecord>> {
    parse_manifest(Cursor::new(s), &ReadOptions::default())
}

#[test]
fn invalid_records_are_rejected() {
    let bad = [
        r#"{"id":"a","text":"x","accuracy":101}"#,
        r#"{"id":"a","text":"x","accuracy":-1}"#,
        r#"{"id":"a","text":"x","path":"a.onnx"}"#,
        r#"{"id":"a"}"#,
        r#"{"text":"x"}"#,
        r#"not json"#,
    ];
    for line in bad {
        let doc = format!("{{\"id\":\"ok\",\"text\":\"x\",\"accuracy\":50}}\n{line}\n");
        match parse(&doc) {
            Err(Error::MalformedRecord { line: 2, .. }) => {}
            other => panic!("{line}: {other:?}"),
        }
    }
    let dup = "{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"a\",\"text\":\"y\"}\n";
    assert!(matches!(parse(dup), Err(Error::DuplicateId(id)) if id == "a"));
}

#[test]
fn fractional_accuracies_need_opt_in() {
    let doc = "{\"id\":\"a\",\"text\":\"x\",\"accuracy\":0.5}\n{\"id\":\"b\",\"text\":\"x\",\"accuracy\":0.9}\n";
    assert!(matches!(parse(doc), Err(Error::MalformedRecord { .. })));
    let rs = parse_manifest(
        Cursor::new(doc),
        &ReadOptions {
            rescale_fractions: true,
        },
    )
    .unwrap();
    assert_eq!(rs[1].accuracy, Some(90.0));
}

#[test]
fn random_split_is_a_deterministic_partition() {
    let rs = records(100);
    let spec = SplitSpec::RandomFraction {
        fraction: 0.2,
        seed: 42,
    };
    let a = assign_splits(&rs, &spec).unwrap();
    assert_eq!(a.iter().filter(|r| r.split == Split::Val).count(), 20);
    assert!(a
        .iter()
        .all(|r| matches!(r.split, Split::Train | Split::Val)));
    let ids: Vec<_> = a.iter().map(|r| &r.id).collect();
    assert_eq!(ids, rs.iter().map(|r| &r.id).collect::<Vec<_>>());
    // independent of input order
    let mut reversed = rs.clone();
    reversed.reverse();
    let b = assign_splits(&reversed, &spec).unwrap();
    let val = |v: &[ArchRecord]| {
        v.iter()
            .filter(|r| r.split == Split::Val)
            .map(|r| r.id.clone())
            .collect::<BTreeSet<_>>()
    };
    assert_eq!(val(&a), val(&b));
    assert!(matches!(
        assign_splits(
            &rs,
            &SplitSpec::RandomFraction {
                fraction: 1.0,
                seed: 1
            }
        ),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn split_by_key_holds_out_named_values() {
    let rs = records(30);
    let spec = SplitSpec::ByKey {
        field: "seed".into(),
        held_out: ["s3".to_string()].into(),
    };
    let out = assign_splits(&rs, &spec).unwrap();
    for r in &out {
        let expect = if r.extra["seed"] == "s3" {
            Split::Val
        } else {
            Split::Train
        };
        assert_eq!(r.split, expect, "{}", r.id);
    }
    let none = SplitSpec::ByKey {
        field: "seed".into(),
        held_out: ["s9".to_string()].into(),
    };
    assert!(matches!(assign_splits(&rs, &none), Err(Error::EmptyVal)));
}

fn model_dir(n: usize) -> (tempfile::TempDir, Vec<ArchRecord>) {
    let dir = tempfile::tempdir().unwrap();
    let mut rs = Vec::new();
    for i in 0..n {
        let g = common::conv_net(&vec![3; 1 + i % 4], 8, 10);
        common::write_model(dir.path(), &format!("m{i}"), &g);
        rs.push(ArchRecord::with_path(
            format!("m{i}"),
            format!("m{i}.onnx"),
            Some(60.0 + i as f64),
        ));
    }
    std::fs::write(dir.path().join("broken.onnx"), b"\x08\x07\x3a\xff\xff").unwrap();
    rs.insert(
        n / 2,
        ArchRecord::with_path("broken", "broken.onnx", Some(10.0)),
    );
    (dir, rs)
}

#[test]
fn batch_encode_keeps_order_and_reports_failures() {
    let (dir, rs) = model_dir(9);
    let out = batch_encode(&rs, &EncodingConfig::full(), 4, Some(dir.path())).unwrap();
    assert_eq!(out.encoded.len(), 9, "{:?}", out.errors);
    assert_eq!(out.errors.len(), 1);
    assert_eq!(out.errors[0].id, "broken");
    assert!(!out.errors[0].error.contains('\n'));
    let ids: Vec<&str> = out.encoded.iter().map(|r| r.id.as_str()).collect();
    let expected: Vec<&str> = rs
        .iter()
        .map(|r| r.id.as_str())
        .filter(|id| *id != "broken")
        .collect();
    assert_eq!(ids, expected);
    let direct = encode(
        &prepare(&common::conv_net(&[3], 8, 10)).unwrap(),
        &EncodingConfig::full(),
    )
    .text;
    assert_eq!(out.encoded[0].text(), Some(direct.as_str()));
    let json = out.encoded[0].to_json();
    assert!(json.get("path").is_none());
    assert_eq!(json["accuracy"], json!(60.0));
}

#[test]
fn worker_count_does_not_change_output() {
    let (dir, rs) = model_dir(20);
    let render = |workers| {
        let out = batch_encode(&rs, &EncodingConfig::full(), workers, Some(dir.path())).unwrap();
        let path = dir.path().join(format!("out{workers}.jsonl"));
        write_manifest(&path, &out.encoded).unwrap();
        (std::fs::read(path).unwrap(), out.errors)
    };
    assert_eq!(render(1), render(8));
}

#[test]
fn predictions_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.jsonl");
    let preds: Vec<Prediction> = (0..50)
        .map(|i| Prediction {
            id: format!("n{i}"),
            score: (i as f64 * 0.37).sin() * 1e3,
        })
        .collect();
    write_predictions(&path, &preds).unwrap();
    assert_eq!(read_predictions(&path).unwrap(), preds);
    let first: Value = serde_json::from_str(
        std::fs::read_to_string(&path)
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    assert_eq!(first, json!({"id": "n0", "score": 0.0}));
}
