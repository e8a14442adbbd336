use std::sync::Arc;

use super::{PassReport, Work};
use crate::error::{Error, Result};
use crate::graph_ir::{AttributeValue, GraphIR, NodeSpec, TensorData, TensorShape, ValueDecl};
use crate::onnx_proto::data_type;

pub const DEFAULT_FOLD_BUDGET: usize = 1_000_000;

#[derive(Debug, Clone)]
pub struct FoldConfig {
    /// Largest tensor (in elements) a folded node may produce.
    pub max_elements: usize,
}

impl Default for FoldConfig {
    fn default() -> Self {
        Self {
            max_elements: DEFAULT_FOLD_BUDGET,
        }
    }
}

pub fn fold_constants(g: &GraphIR) -> Result<(GraphIR, PassReport)> {
    fold_constants_with(g, &FoldConfig::default())
}

/// Replaces shape-level computations over constants by parameters, repeating
/// until nothing else folds.
pub fn fold_constants_with(g: &GraphIR, cfg: &FoldConfig) -> Result<(GraphIR, PassReport)> {
    let mut report = PassReport::new("fold_constants");
    let mut work = Work::new(g);
    loop {
        let mut folded_any = false;
        for &id in g.order() {
            let Some(node) = work.nodes.get(&id) else {
                continue;
            };
            if node.outputs.len() != 1 || work.is_graph_output(&node.outputs[0]) {
                continue;
            }
            if isolates_graph_input(&work, node) {
                continue;
            }
            let Some((shape, data)) = evaluate(&work, node)? else {
                continue;
            };
            let elements = data.len();
            if elements > cfg.max_elements {
                return Err(Error::FoldOverflow {
                    node: id,
                    elements,
                    budget: cfg.max_elements,
                });
            }
            let output = node.outputs[0].clone();
            let elem_type = match &data {
                TensorData::F32(_) => data_type::FLOAT,
                _ => data_type::INT64,
            };
            let consumers = work.consumers(&output);
            work.remove_node(id, &consumers);
            work.remove_annotation(&output);
            work.params.insert(
                output.clone(),
                ValueDecl {
                    name: output,
                    shape: Some(shape),
                    elem_type,
                    data: Some(data),
                },
            );
            report.nodes_removed += 1;
            folded_any = true;
        }
        if !folded_any {
            break;
        }
    }
    Ok((work.finish()?, report))
}

/// Folding `Shape(x)` when `x` is a graph input read by nothing else would
/// disconnect that input from the graph.
fn isolates_graph_input(work: &Work, node: &NodeSpec) -> bool {
    node.op_type == "Shape"
        && node.inputs.first().is_some_and(|x| {
            work.is_graph_input(x) && work.consumers(x).len() == 1 && !work.is_graph_output(x)
        })
}

fn const_input<'a>(work: &'a Work, name: &str) -> Option<(&'a TensorShape, &'a TensorData)> {
    let p = work.params.get(name)?;
    Some((p.shape.as_ref()?, p.data.as_ref()?))
}

fn int_input<'a>(work: &'a Work, name: &str) -> Option<(Vec<u64>, &'a [i64])> {
    let (shape, data) = const_input(work, name)?;
    Some((shape.known_dims()?, data.as_i64()?))
}

type Folded = Option<(TensorShape, TensorData)>;

fn ints(dims: &[u64], data: Vec<i64>) -> Folded {
    Some((
        TensorShape::from_known(dims),
        TensorData::I64(Arc::from(data)),
    ))
}

fn evaluate(work: &Work, node: &NodeSpec) -> Result<Folded> {
    let input = |slot: usize| node.inputs.get(slot).filter(|n| !n.is_empty());
    Ok(match node.op_type.as_str() {
        "Constant" => constant(node),
        "Shape" => {
            let Some(dims) = input(0)
                .and_then(|x| work.shape(x))
                .and_then(|s| s.known_dims())
            else {
                return Ok(None);
            };
            let rank = dims.len() as i64;
            let norm = |v: i64| (if v < 0 { v + rank } else { v }).clamp(0, rank) as usize;
            let start = norm(node.attr_int("start", 0));
            let end = norm(node.attr_int("end", rank)).max(start);
            let values: Vec<i64> = dims[start..end].iter().map(|&d| d as i64).collect();
            ints(&[values.len() as u64], values)
        }
        "Gather" => {
            let (Some((ddims, data)), Some((idims, idx))) = (
                input(0).and_then(|n| int_input(work, n)),
                input(1).and_then(|n| int_input(work, n)),
            ) else {
                return Ok(None);
            };
            if ddims.len() != 1 || node.attr_int("axis", 0) != 0 {
                return Ok(None);
            }
            let len = ddims[0] as i64;
            let mut out = Vec::with_capacity(idx.len());
            for &i in idx {
                let i = if i < 0 { i + len } else { i };
                if !(0..len).contains(&i) {
                    return Ok(None);
                }
                out.push(data[i as usize]);
            }
            ints(&idims, out)
        }
        "Unsqueeze" | "Squeeze" => {
            let Some((dims, data)) = input(0).and_then(|n| int_input(work, n)) else {
                return Ok(None);
            };
            let axes: Option<Vec<i64>> = match node.attr_ints("axes") {
                Some(a) => Some(a.to_vec()),
                None => match input(1) {
                    Some(n) => match int_input(work, n) {
                        Some((_, a)) => Some(a.to_vec()),
                        None => return Ok(None),
                    },
                    None => None,
                },
            };
            let new_dims = if node.op_type == "Unsqueeze" {
                let Some(axes) = axes else {
                    return Ok(None);
                };
                unsqueeze_dims(&dims, &axes)
            } else {
                squeeze_dims(&dims, axes.as_deref())
            };
            match new_dims {
                Some(d) => ints(&d, data.to_vec()),
                None => None,
            }
        }
        "Concat" => {
            let mut pieces = Vec::new();
            for name in node.present_inputs() {
                match int_input(work, name) {
                    Some(p) => pieces.push(p),
                    None => return Ok(None),
                }
            }
            concat(&pieces, node.attr_int("axis", 0))
        }
        _ => None,
    })
}

fn constant(node: &NodeSpec) -> Folded {
    let (name, value) = node.attributes.iter().next()?;
    match (name.as_str(), value) {
        (_, AttributeValue::Tensor(t)) => {
            let data = t.data.clone()?;
            match data {
                TensorData::F32(_) | TensorData::I64(_) => Some((t.shape.clone(), data)),
                TensorData::Raw(_) => None,
            }
        }
        ("value_int", AttributeValue::Int(v)) => {
            Some((TensorShape::scalar(), TensorData::I64(Arc::from(vec![*v]))))
        }
        ("value_ints", AttributeValue::Ints(v)) => ints(&[v.len() as u64], v.clone()),
        ("value_float", AttributeValue::Float(v)) => {
            Some((TensorShape::scalar(), TensorData::F32(Arc::from(vec![*v]))))
        }
        ("value_floats", AttributeValue::Floats(v)) => Some((
            TensorShape::from_known(&[v.len() as u64]),
            TensorData::F32(Arc::from(v.clone())),
        )),
        _ => None,
    }
}

fn unsqueeze_dims(dims: &[u64], axes: &[i64]) -> Option<Vec<u64>> {
    let out_rank = (dims.len() + axes.len()) as i64;
    let mut positions: Vec<usize> = axes
        .iter()
        .map(|&a| if a < 0 { a + out_rank } else { a })
        .filter(|a| (0..out_rank).contains(a))
        .map(|a| a as usize)
        .collect();
    positions.sort_unstable();
    positions.dedup();
    if positions.len() != axes.len() {
        return None;
    }
    let mut rest = dims.iter();
    Some(
        (0..out_rank as usize)
            .map(|i| {
                if positions.contains(&i) {
                    1
                } else {
                    *rest.next().expect("rank accounted for")
                }
            })
            .collect(),
    )
}

fn squeeze_dims(dims: &[u64], axes: Option<&[i64]>) -> Option<Vec<u64>> {
    let rank = dims.len() as i64;
    match axes {
        None => Some(dims.iter().copied().filter(|&d| d != 1).collect()),
        Some(axes) => {
            let mut drop = Vec::new();
            for &a in axes {
                let a = if a < 0 { a + rank } else { a };
                if !(0..rank).contains(&a) || dims[a as usize] != 1 {
                    return None;
                }
                drop.push(a as usize);
            }
            Some(
                dims.iter()
                    .enumerate()
                    .filter(|(i, _)| !drop.contains(i))
                    .map(|(_, &d)| d)
                    .collect(),
            )
        }
    }
}

fn concat(pieces: &[(Vec<u64>, &[i64])], axis: i64) -> Folded {
    let (first, _) = pieces.first()?;
    let rank = first.len() as i64;
    let axis = if axis < 0 { axis + rank } else { axis };
    if !(0..rank).contains(&axis) {
        return None;
    }
    let axis = axis as usize;
    for (dims, _) in pieces {
        if dims.len() != first.len()
            || dims
                .iter()
                .enumerate()
                .any(|(i, &d)| i != axis && d != first[i])
        {
            return None;
        }
    }
    let outer: u64 = first[..axis].iter().product();
    let inner: u64 = first[axis + 1..].iter().product();
    let mut out = Vec::new();
    for o in 0..outer as usize {
        for (dims, data) in pieces {
            let chunk = (dims[axis] * inner) as usize;
            out.extend_from_slice(&data[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut dims = first.clone();
    dims[axis] = pieces.iter().map(|(d, _)| d[axis]).sum();
    ints(&dims, out)
}
