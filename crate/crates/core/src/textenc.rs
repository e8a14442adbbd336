//! The condensed text encoding: one line per chain, nodes joined by `-->`.
//!
//! ```text
//! Conv(1x3x32x32, 128x3x3x3, 128)(dilations=1,kernel_shape=3,pads=1,strides=1) --> Value1:1x128x32x32
//! ```

use std::path::Path;

use serde::Serialize;

use crate::condense::{build_chains, Chain, NamingTable};
use crate::error::Result;
use crate::graph_ir::{infer_shapes, read_onnx, render_shape, AttributeValue, GraphIR, NodeSpec};
use crate::passes::simplify;

/// Which optional components are printed next to the operator names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct EncodingConfig {
    pub include_inputs: bool,
    pub include_parameters: bool,
    pub include_out_shape: bool,
}

impl EncodingConfig {
    pub const VARIANTS: [&'static str; 5] = ["base", "inputs", "parameters", "outshape", "full"];

    /// Operator names and output labels only.
    pub fn base() -> Self {
        Self {
            include_inputs: false,
            include_parameters: false,
            include_out_shape: false,
        }
    }

    pub fn inputs() -> Self {
        Self {
            include_inputs: true,
            ..Self::base()
        }
    }

    pub fn parameters() -> Self {
        Self {
            include_parameters: true,
            ..Self::base()
        }
    }

    pub fn outshape() -> Self {
        Self {
            include_out_shape: true,
            ..Self::base()
        }
    }

    pub fn full() -> Self {
        Self {
            include_inputs: true,
            include_parameters: true,
            include_out_shape: true,
        }
    }

    /// Looks up one of [`Self::VARIANTS`].
    pub fn variant(name: &str) -> Option<Self> {
        Some(match name {
            "base" => Self::base(),
            "inputs" => Self::inputs(),
            "parameters" => Self::parameters(),
            "outshape" => Self::outshape(),
            "full" => Self::full(),
            _ => return None,
        })
    }
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self::full()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EncodedArch {
    /// Every line ends with `\n`.
    pub text: String,
    pub line_count: usize,
    /// Whitespace-delimited token count.
    pub token_estimate: usize,
}

impl EncodedArch {
    fn from_lines(lines: Vec<String>) -> Self {
        let mut text = String::new();
        for line in &lines {
            text.push_str(line);
            text.push('\n');
        }
        Self {
            token_estimate: text.split_whitespace().count(),
            line_count: lines.len(),
            text,
        }
    }
}

/// Encodes a simplified graph with inferred shapes.
pub fn encode(g: &GraphIR, cfg: &EncodingConfig) -> EncodedArch {
    let (chains, table) = build_chains(g);
    let lines = chains
        .iter()
        .map(|chain| encode_chain(g, chain, &table, cfg))
        .collect();
    EncodedArch::from_lines(lines)
}

fn encode_chain(g: &GraphIR, chain: &Chain, table: &NamingTable, cfg: &EncodingConfig) -> String {
    let mut clauses = Vec::with_capacity(chain.nodes.len() + 1);
    let mut prev: Option<&NodeSpec> = None;
    for &id in &chain.nodes {
        let node = g.node(id).expect("chain node exists");
        let mut clause = node.op_type.clone();
        if cfg.include_inputs {
            let args: Vec<String> = node
                .present_inputs()
                .map(|input| {
                    if prev.is_some_and(|p| p.outputs.iter().any(|o| o == input)) {
                        "prev".to_string()
                    } else {
                        table
                            .label(input)
                            .map(str::to_string)
                            .unwrap_or_else(|| render_shape(g.shape_of(input)))
                    }
                })
                .collect();
            if !args.is_empty() {
                clause.push('(');
                clause.push_str(&args.join(", "));
                clause.push(')');
            }
        }
        if cfg.include_parameters {
            if let Some(params) = render_params(node) {
                clause.push_str(&params);
            }
        }
        clauses.push(clause);
        prev = Some(node);
    }

    let mut outs = Vec::new();
    for name in &chain.tail_outputs {
        let mut labels: Vec<&str> = table.label(name).into_iter().collect();
        if let Some(out) = table.out_label(name) {
            if !labels.contains(&out) {
                labels.push(out);
            }
        }
        for label in labels {
            if cfg.include_out_shape {
                outs.push(format!("{label}:{}", render_shape(g.shape_of(name))));
            } else {
                outs.push(label.to_string());
            }
        }
    }
    clauses.push(outs.join(", "));
    clauses.join(" --> ")
}

/// `(k1=v1,k2=v2)` over the integer-list attributes, keys in lexicographic
/// order. A list whose entries are all equal prints as that entry.
fn render_params(node: &NodeSpec) -> Option<String> {
    let kvs: Vec<String> = node
        .attributes
        .iter()
        .filter_map(|(k, v)| match v {
            AttributeValue::Ints(list) if !list.is_empty() => {
                let value = if list.iter().all(|x| *x == list[0]) {
                    list[0].to_string()
                } else {
                    let items: Vec<String> = list.iter().map(i64::to_string).collect();
                    format!("[{}]", items.join(","))
                };
                Some(format!("{k}={value}"))
            }
            _ => None,
        })
        .collect();
    (!kvs.is_empty()).then(|| format!("({})", kvs.join(",")))
}

/// Simplifies and re-infers a parsed graph so it is ready for [`encode`].
pub fn prepare(g: &GraphIR) -> Result<GraphIR> {
    let (simplified, _) = simplify(g)?;
    infer_shapes(&simplified)
}

/// parse → simplify → infer shapes → condense → encode.
pub fn encode_file(path: &Path, cfg: &EncodingConfig) -> Result<EncodedArch> {
    let g = read_onnx(path)?;
    Ok(encode(&prepare(&g)?, cfg))
}

/// Encodes from raw ONNX bytes.
pub fn encode_bytes(bytes: &[u8], cfg: &EncodingConfig) -> Result<EncodedArch> {
    let g = crate::graph_ir::parse_onnx(bytes)?;
    Ok(encode(&prepare(&g)?, cfg))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// 1-based.
    pub line: usize,
    pub reason: String,
}

/// Checks `text` line by line against the encoding grammar. An empty result
/// means the text conforms.
pub fn validate_encoding(text: &str) -> Vec<Violation> {
    let mut violations = Vec::new();
    if !text.is_empty() && !text.ends_with('\n') {
        violations.push(Violation {
            line: text.split_terminator('\n').count(),
            reason: "missing final newline".into(),
        });
    }
    for (i, line) in text.split_terminator('\n').enumerate() {
        let report = |reason: String| Violation {
            line: i + 1,
            reason,
        };
        if line.ends_with('\r') {
            violations.push(report("CRLF line ending".into()));
            continue;
        }
        if line.ends_with(char::is_whitespace) {
            violations.push(report("trailing whitespace".into()));
            continue;
        }
        if let Err(reason) = check_line(line) {
            violations.push(report(reason));
        }
    }
    violations
}

fn check_line(line: &str) -> Result<(), String> {
    let segments: Vec<&str> = line.split(" --> ").collect();
    let Some((outputs, clauses)) = segments.split_last().filter(|(_, c)| !c.is_empty()) else {
        return Err(
            "expected at least one clause and an output list separated by \" --> \"".into(),
        );
    };
    for clause in clauses {
        check_clause(clause)?;
    }
    check_outputs(outputs)
}

fn check_clause(clause: &str) -> Result<(), String> {
    let name_len = clause
        .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '.'))
        .unwrap_or(clause.len());
    let (name, mut rest) = clause.split_at(name_len);
    if !name.starts_with(|c: char| c.is_ascii_alphabetic()) {
        return Err(format!("bad operator name in {clause:?}"));
    }
    let mut seen_params = false;
    let mut seen_inputs = false;
    while !rest.is_empty() {
        let Some(body) = rest.strip_prefix('(') else {
            return Err(format!("unexpected {rest:?} after operator {name}"));
        };
        let Some(close) = body.find(')') else {
            return Err(format!("unclosed parenthesis in {clause:?}"));
        };
        let group = &body[..close];
        rest = &body[close + 1..];
        if group.contains('=') {
            if seen_params {
                return Err(format!("{name}: more than one parameter group"));
            }
            seen_params = true;
            check_params(group).map_err(|e| format!("{name}: {e}"))?;
        } else {
            if seen_inputs || seen_params {
                return Err(format!("{name}: input group out of place"));
            }
            seen_inputs = true;
            for arg in group.split(", ") {
                if !(arg == "prev" || is_valref(arg) || is_shape(arg)) {
                    return Err(format!("{name}: bad argument {arg:?}"));
                }
            }
        }
    }
    Ok(())
}

fn check_params(group: &str) -> Result<(), String> {
    for kv in split_top_level(group) {
        let Some((key, value)) = kv.split_once('=') else {
            return Err(format!("parameter {kv:?} has no value"));
        };
        let key_ok = key.starts_with(|c: char| c.is_ascii_alphabetic())
            && key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
        if !key_ok {
            return Err(format!("bad parameter key {key:?}"));
        }
        let value_ok = match value.strip_prefix('[').and_then(|v| v.strip_suffix(']')) {
            Some(list) => list.split(',').all(is_int),
            None => is_int(value),
        };
        if !value_ok {
            return Err(format!("bad value {value:?} for {key}"));
        }
    }
    Ok(())
}

/// Splits on commas outside brackets.
fn split_top_level(s: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let (mut depth, mut start) = (0usize, 0);
    for (i, c) in s.char_indices() {
        match c {
            '[' => depth += 1,
            ']' => depth = depth.saturating_sub(1),
            ',' if depth == 0 => {
                parts.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(&s[start..]);
    parts
}

fn check_outputs(outputs: &str) -> Result<(), String> {
    for out in outputs.split(", ") {
        let (label, shape) = match out.split_once(':') {
            Some((l, s)) => (l, Some(s)),
            None => (out, None),
        };
        let label_ok = is_valref(label)
            || label
                .strip_prefix("Out")
                .is_some_and(|n| n.is_empty() || is_uint(n));
        if !label_ok {
            return Err(format!("bad output label {label:?}"));
        }
        if let Some(s) = shape.filter(|s| !is_shape(s)) {
            return Err(format!("bad output shape {s:?}"));
        }
    }
    Ok(())
}

fn is_uint(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit())
}

fn is_int(s: &str) -> bool {
    is_uint(s.strip_prefix('-').unwrap_or(s))
}

fn is_valref(s: &str) -> bool {
    s.strip_prefix("Value").is_some_and(is_uint)
}

fn is_shape(s: &str) -> bool {
    s == "scalar" || s.split('x').all(|d| d == "?" || is_uint(d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_ir::GraphBuilder;

    fn single_conv() -> GraphIR {
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
        prepare(&b.build().unwrap()).unwrap()
    }

    #[test]
    fn single_conv_full_and_base() {
        let g = single_conv();
        let full = encode(&g, &EncodingConfig::full());
        assert_eq!(
            full.text,
            "Conv(1x3x32x32, 128x3x3x3, 128)(dilations=1,kernel_shape=3,pads=1,strides=1) --> Out:1x128x32x32\n"
        );
        assert_eq!(full.line_count, 1);
        assert_eq!(encode(&g, &EncodingConfig::base()).text, "Conv --> Out\n");
        assert_eq!(encode(&g, &EncodingConfig::base()).token_estimate, 3);
    }

    #[test]
    fn reduce_mean_then_gemm() {
        let mut b = GraphBuilder::new(13);
        let x = b.input("x", &[1, 512, 8, 8]);
        let r = b.op("Relu", &[&x]);
        let c = b.op_with("Concat", &[&r, &r], [("axis", AttributeValue::Int(0))]);
        let m = b.op_with(
            "ReduceMean",
            &[&c],
            [
                ("axes", AttributeValue::Ints(vec![2, 3])),
                ("keepdims", AttributeValue::Int(0)),
            ],
        );
        let w = b.param("w", &[10, 512]);
        let bias = b.param("b", &[10]);
        let y = b.op_with(
            "Gemm",
            &[&m, &w, &bias],
            [("transB", AttributeValue::Int(1))],
        );
        let side = b.op("Relu", &[&c]);
        b.output(&y);
        b.output(&side);
        let g = prepare(&b.build().unwrap()).unwrap();
        let cfg = EncodingConfig {
            include_out_shape: false,
            ..EncodingConfig::full()
        };
        let text = encode(&g, &cfg).text;
        assert_eq!(
            text.lines().nth(2).unwrap(),
            "ReduceMean(Value2)(axes=[2,3]) --> Gemm(prev, 10x512, 10) --> Out"
        );
        assert_eq!(
            text.lines().nth(1).unwrap(),
            "Concat(Value1, Value1) --> Value2"
        );
        assert_eq!(text.lines().nth(3).unwrap(), "Relu(Value2) --> Out2");
    }

    #[test]
    fn empty_graph_encodes_to_nothing() {
        let mut b = GraphBuilder::new(13);
        let x = b.input("x", &[2]);
        b.output(&x);
        let enc = encode(&b.build().unwrap(), &EncodingConfig::full());
        assert_eq!(enc.text, "");
        assert_eq!(enc.line_count, 0);
    }

    #[test]
    fn validator_accepts_typical_lines() {
        let text = "Conv(1x3x32x32, 128x3x3x3, 128)(dilations=1,kernel_shape=3,pads=1,strides=1) --> Value1:1x128x32x32\n\
                    Concat(Value2, Value2, Value2, Value2) --> Value3:1x128x32x32\n\
                    ReduceMean(Value19)(axes=[2,3]) --> Gemm(prev, 10x512, 10) --> Out\n\
                    Conv --> Out\n\
                    Relu(?x4) --> Value1:?x4, Out2:scalar\n";
        assert_eq!(validate_encoding(text), vec![]);
    }

    #[test]
    fn validator_rejects() {
        let cases = [
            "Conv Relu --> Out\n",
            "Conv(1x3) Relu --> Out\n",
            "Conv --> Out \n",
            "Conv(prev)(k=a) --> Out\n",
            "Conv(foo) --> Out\n",
            "Conv --> Val1\n",
            "Conv --> Out:3y4\n",
            "--> Out\n",
            "Out\n",
            "Conv(k=1)(x) --> Out\n",
        ];
        for case in cases {
            let v = validate_encoding(case);
            assert_eq!(v.len(), 1, "{case:?} -> {v:?}");
            assert_eq!(v[0].line, 1);
        }
        assert_eq!(validate_encoding("Conv --> Out\r\n").len(), 1);
        assert_eq!(validate_encoding("Conv --> Out").len(), 1);
    }

    #[test]
    fn uneven_lists_keep_brackets() {
        let mut node = NodeSpec::new(0, "MaxPool", vec![], vec![]);
        node.attributes
            .insert("pads".into(), AttributeValue::Ints(vec![0, 1, 0, 1]));
        node.attributes
            .insert("kernel_shape".into(), AttributeValue::Ints(vec![2, 2]));
        node.attributes
            .insert("ceil_mode".into(), AttributeValue::Int(0));
        assert_eq!(
            render_params(&node).unwrap(),
            "(kernel_shape=2,pads=[0,1,0,1])"
        );
    }
}
