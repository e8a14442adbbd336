use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use super::{PassReport, Work};
use crate::error::Result;
use crate::graph_ir::{
    Attributes, Dim, GraphIR, NodeId, NodeSpec, TensorData, TensorShape, ValueDecl, ValueRole,
};
use crate::onnx_proto::data_type;

/// A successful match, anchored at its first node in topological order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternMatch {
    /// Matched nodes, anchor first.
    pub nodes: Vec<NodeId>,
    /// Inputs of the replacement node.
    pub inputs: Vec<String>,
    /// The single value the replacement produces (the last matched output).
    pub output: String,
    /// Parameters the replacement introduces.
    pub new_params: Vec<ValueDecl>,
}

pub type Matcher = fn(&GraphIR, &NodeSpec) -> Option<PatternMatch>;
pub type AttributeBuilder = fn(&GraphIR, &PatternMatch) -> Attributes;

/// A fusion rule: `matcher` is tried at every node, a hit is replaced by one
/// `replacement_op` node whose attributes come from `attribute_builder`.
#[derive(Clone)]
pub struct PatternRule {
    pub name: String,
    pub replacement_op: String,
    pub matcher: Matcher,
    pub attribute_builder: AttributeBuilder,
}

impl fmt::Debug for PatternRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PatternRule")
            .field("name", &self.name)
            .field("replacement_op", &self.replacement_op)
            .finish_non_exhaustive()
    }
}

pub fn builtin_rules() -> Vec<PatternRule> {
    vec![matmul_add_gemm_rule(), conv_add_bias_rule()]
}

/// Scans in topological order; the earliest match wins and matched nodes are
/// not considered again within this call.
pub fn merge_patterns(g: &GraphIR, rules: &[PatternRule]) -> Result<(GraphIR, PassReport)> {
    let mut report = PassReport::new("merge_patterns");
    if rules.is_empty() {
        return Ok((g.clone(), report));
    }
    let mut work = Work::new(g);
    let mut taken: BTreeSet<NodeId> = BTreeSet::new();
    for &id in g.order() {
        if taken.contains(&id) {
            continue;
        }
        let node = g.node(id).expect("ordered node exists");
        let hit = rules.iter().find_map(|rule| {
            let m = (rule.matcher)(g, node)?;
            if m.nodes.iter().any(|n| taken.contains(n)) {
                return None;
            }
            Some((rule, m))
        });
        let Some((rule, m)) = hit else {
            continue;
        };
        let attributes = (rule.attribute_builder)(g, &m);
        let new_id = *m.nodes.iter().min().expect("non-empty match");
        let mut provenance = BTreeSet::new();
        for &n in &m.nodes {
            provenance.extend(work.take_provenance(n));
            let removed = work.nodes.remove(&n).expect("matched node exists");
            for out in removed.present_outputs() {
                if out != m.output {
                    work.remove_annotation(out);
                }
            }
        }
        for p in &m.new_params {
            work.params.insert(p.name.clone(), p.clone());
        }
        let mut fused = NodeSpec::new(
            new_id,
            &rule.replacement_op,
            m.inputs.clone(),
            vec![m.output.clone()],
        );
        fused.attributes = attributes;
        work.insert_node(fused, provenance);
        report.nodes_merged += m.nodes.len() - 1;
        taken.extend(m.nodes.iter().copied());
    }
    if report.nodes_merged == 0 {
        return Ok((g.clone(), report));
    }
    Ok((work.finish()?, report))
}

/// The only consumer of `node`'s single output, if it has exactly one use
/// and is not a graph output.
fn sole_consumer<'g>(g: &'g GraphIR, node: &NodeSpec) -> Option<&'g NodeSpec> {
    let mut outs = node.present_outputs();
    let out = outs.next()?;
    if outs.next().is_some() || g.use_count(out) != 1 {
        return None;
    }
    let v = g.value(out)?;
    g.node(*v.consumers.iter().next()?)
}

fn other_operand<'a>(add: &'a NodeSpec, used: &str) -> Option<&'a str> {
    match add.inputs.as_slice() {
        [a, b] if a == used => Some(b),
        [a, b] if b == used => Some(a),
        _ => None,
    }
}

fn parameter_shape<'g>(g: &'g GraphIR, name: &str) -> Option<&'g TensorShape> {
    let v = g.value(name)?;
    (v.role == ValueRole::Parameter).then_some(v.shape.as_ref()?)
}

fn same_known_shape(g: &GraphIR, a: &str, b: &str) -> bool {
    match (g.shape_of(a), g.shape_of(b)) {
        (Some(x), Some(y)) => x.known_dims().is_some() && x == y,
        _ => false,
    }
}

fn fresh_param_name(g: &GraphIR, base: &str) -> String {
    (0..)
        .map(|i| {
            if i == 0 {
                base.to_string()
            } else {
                format!("{base}_{i}")
            }
        })
        .find(|n| g.value(n).is_none())
        .expect("unbounded search")
}

pub fn matmul_add_gemm_rule() -> PatternRule {
    PatternRule {
        name: "matmul_add_gemm".into(),
        replacement_op: "Gemm".into(),
        matcher: match_matmul_add,
        attribute_builder: |_, _| Attributes::new(),
    }
}

/// MatMul(x, W) + b with 2-D x, parameter W of shape KxN and a parameter
/// bias that broadcasts to the product without enlarging it.
fn match_matmul_add(g: &GraphIR, node: &NodeSpec) -> Option<PatternMatch> {
    if node.op_type != "MatMul" || node.inputs.len() != 2 {
        return None;
    }
    let (x, w) = (&node.inputs[0], &node.inputs[1]);
    if parameter_shape(g, w)?.rank() != 2 || g.shape_of(x)?.rank() != 2 {
        return None;
    }
    let add = sole_consumer(g, node)?;
    if add.op_type != "Add" {
        return None;
    }
    let product = &node.outputs[0];
    let bias = other_operand(add, product)?;
    if bias == product || parameter_shape(g, bias)?.rank() > 2 {
        return None;
    }
    let sum = add.outputs.first()?;
    if !same_known_shape(g, product, sum) {
        return None;
    }
    Some(PatternMatch {
        nodes: vec![node.id, add.id],
        inputs: vec![x.clone(), w.clone(), bias.to_string()],
        output: sum.clone(),
        new_params: vec![],
    })
}

pub fn conv_add_bias_rule() -> PatternRule {
    PatternRule {
        name: "conv_add_bias".into(),
        replacement_op: "Conv".into(),
        matcher: match_conv_add,
        attribute_builder: |g, m| {
            g.node(m.nodes[0])
                .map(|n| n.attributes.clone())
                .unwrap_or_default()
        },
    }
}

/// Bias-free Conv followed by Add of a per-channel parameter shaped Cx1x..x1
/// or 1xCx1x..x1.
fn match_conv_add(g: &GraphIR, node: &NodeSpec) -> Option<PatternMatch> {
    if node.op_type != "Conv" || node.present_inputs().count() != 2 {
        return None;
    }
    let (x, w) = (&node.inputs[0], &node.inputs[1]);
    let channels = parameter_shape(g, w)?.dims.first()?.known()?;
    let add = sole_consumer(g, node)?;
    if add.op_type != "Add" {
        return None;
    }
    let out = &node.outputs[0];
    let bias = other_operand(add, out)?;
    let bias_decl = g.value(bias)?;
    let bias_dims = parameter_shape(g, bias)?.known_dims()?;
    let out_rank = g.shape_of(out)?.rank();
    let leading_one = bias_dims.len() == out_rank && bias_dims.first() == Some(&1);
    let per_channel = &bias_dims[usize::from(leading_one)..];
    if per_channel.first() != Some(&channels)
        || per_channel[1..].iter().any(|&d| d != 1)
        || per_channel.len() + 1 != out_rank
    {
        return None;
    }
    let sum = add.outputs.first()?;
    if !same_known_shape(g, out, sum) {
        return None;
    }
    let new_bias = ValueDecl {
        name: fresh_param_name(g, &format!("{bias}_flat")),
        shape: Some(TensorShape::from_known(&[channels])),
        elem_type: bias_decl.elem_type,
        data: bias_decl.data.clone(),
    };
    Some(PatternMatch {
        nodes: vec![node.id, add.id],
        inputs: vec![x.clone(), w.clone(), new_bias.name.clone()],
        output: sum.clone(),
        new_params: vec![new_bias],
    })
}

/// Folds inference BatchNormalization into the preceding Conv. Needs the
/// weight and all statistics as float payloads. Not in [`builtin_rules`].
pub fn conv_batchnorm_rule() -> PatternRule {
    PatternRule {
        name: "conv_batchnorm".into(),
        replacement_op: "Conv".into(),
        matcher: match_conv_bn,
        attribute_builder: |g, m| {
            g.node(m.nodes[0])
                .map(|n| n.attributes.clone())
                .unwrap_or_default()
        },
    }
}

fn f32_param<'g>(g: &'g GraphIR, name: &str) -> Option<&'g [f32]> {
    let v = g.value(name)?;
    if v.role != ValueRole::Parameter {
        return None;
    }
    v.data.as_ref()?.as_f32()
}

fn match_conv_bn(g: &GraphIR, node: &NodeSpec) -> Option<PatternMatch> {
    if node.op_type != "Conv" {
        return None;
    }
    let bn = sole_consumer(g, node)?;
    if bn.op_type != "BatchNormalization"
        || bn.inputs.len() != 5
        || bn.inputs[0] != node.outputs[0]
        || bn.present_outputs().skip(1).any(|o| g.use_count(o) > 0)
    {
        return None;
    }
    let w_shape = parameter_shape(g, &node.inputs[1])?.known_dims()?;
    let w = f32_param(g, &node.inputs[1])?;
    let stats: Vec<&[f32]> = bn.inputs[1..]
        .iter()
        .map(|n| f32_param(g, n))
        .collect::<Option<_>>()?;
    let channels = *w_shape.first()? as usize;
    if stats.iter().any(|s| s.len() != channels) || channels == 0 {
        return None;
    }
    let bias = match node.inputs.get(2).filter(|b| !b.is_empty()) {
        Some(b) => f32_param(g, b)?.to_vec(),
        None => vec![0.0; channels],
    };
    let eps = bn
        .attr("epsilon")
        .and_then(|a| a.as_float())
        .unwrap_or(1e-5) as f64;
    let (scale, shift, mean, var) = (stats[0], stats[1], stats[2], stats[3]);
    let per_out = w.len() / channels;
    let mut new_w = Vec::with_capacity(w.len());
    let mut new_b = Vec::with_capacity(channels);
    for c in 0..channels {
        let k = scale[c] as f64 / (var[c] as f64 + eps).sqrt();
        new_w.extend(
            w[c * per_out..(c + 1) * per_out]
                .iter()
                .map(|&v| (v as f64 * k) as f32),
        );
        new_b.push(((bias[c] as f64 - mean[c] as f64) * k + shift[c] as f64) as f32);
    }
    let w_decl = ValueDecl {
        name: fresh_param_name(g, &format!("{}_bn", node.inputs[1])),
        shape: Some(TensorShape::new(
            w_shape.iter().map(|&d| Dim::Known(d)).collect(),
        )),
        elem_type: data_type::FLOAT,
        data: Some(TensorData::F32(Arc::from(new_w))),
    };
    let b_decl = ValueDecl {
        name: fresh_param_name(g, &format!("{}_bn_bias", node.inputs[1])),
        shape: Some(TensorShape::from_known(&[channels as u64])),
        elem_type: data_type::FLOAT,
        data: Some(TensorData::F32(Arc::from(new_b))),
    };
    Some(PatternMatch {
        nodes: vec![node.id, bn.id],
        inputs: vec![
            node.inputs[0].clone(),
            w_decl.name.clone(),
            b_decl.name.clone(),
        ],
        output: bn.outputs[0].clone(),
        new_params: vec![w_decl, b_decl],
    })
}
