use std::collections::BTreeSet;

use super::{PassReport, Work};
use crate::error::Result;
use crate::graph_ir::{GraphIR, NodeSpec, TensorData};

/// Operators elided by [`remove_low_importance`]. Identity, inference-mode
/// Dropout and same-type Cast are always handled; `extra_passthrough` adds
/// single-input operators that should be treated like Identity.
#[derive(Debug, Clone, Default)]
pub struct RemovalConfig {
    pub extra_passthrough: BTreeSet<String>,
}

pub fn remove_low_importance(g: &GraphIR) -> Result<(GraphIR, PassReport)> {
    remove_low_importance_with(g, &RemovalConfig::default())
}

pub fn remove_low_importance_with(
    g: &GraphIR,
    cfg: &RemovalConfig,
) -> Result<(GraphIR, PassReport)> {
    let mut report = PassReport::new("remove_low_importance");
    let mut work = Work::new(g);
    for &id in g.order() {
        let node = &work.nodes[&id];
        if !is_removable(g, node, cfg) {
            continue;
        }
        let input = node.inputs[0].clone();
        let output = node.outputs[0].clone();
        if rewire(&mut work, id, &input, &output) {
            report.nodes_removed += 1;
        }
    }
    Ok((work.finish()?, report))
}

fn is_removable(g: &GraphIR, node: &NodeSpec, cfg: &RemovalConfig) -> bool {
    if node.inputs.first().is_none_or(|i| i.is_empty())
        || node.outputs.first().is_none_or(|o| o.is_empty())
    {
        return false;
    }
    // every output other than the data output must be dead
    let extra_outputs_dead = node.outputs[1..]
        .iter()
        .all(|o| o.is_empty() || g.use_count(o) == 0);
    if !extra_outputs_dead {
        return false;
    }
    match node.op_type.as_str() {
        "Identity" => true,
        "Dropout" => is_inference_dropout(g, node),
        "Cast" => {
            let to = node.attr_int("to", -1) as i32;
            g.value(&node.inputs[0])
                .is_some_and(|v| v.elem_type != 0 && v.elem_type == to)
        }
        op => cfg.extra_passthrough.contains(op),
    }
}

fn is_inference_dropout(g: &GraphIR, node: &NodeSpec) -> bool {
    // before opset 12 Dropout has no training-mode input
    if g.opset() < 12 {
        return true;
    }
    let Some(mode) = node.inputs.get(2).filter(|m| !m.is_empty()) else {
        return true;
    };
    match g
        .value(mode)
        .filter(|v| v.producer.is_none())
        .and_then(|v| v.data.as_ref())
    {
        Some(TensorData::I64(v)) => v.iter().all(|&x| x == 0),
        Some(TensorData::Raw(v)) => v.iter().all(|&x| x == 0),
        Some(TensorData::F32(v)) => v.iter().all(|&x| x == 0.0),
        None => false,
    }
}

/// Elides node `id`, which forwards `input` to `output`. Returns false when
/// the node has to stay to keep the graph interface intact.
fn rewire(work: &mut Work, id: usize, input: &str, output: &str) -> bool {
    if !work.is_graph_output(output) {
        work.rename_uses(output, input);
        let absorbers = work.consumers(input);
        let absorbers: Vec<_> = absorbers.into_iter().filter(|&c| c != id).collect();
        let absorbers = if absorbers.is_empty() {
            work.producer(input).into_iter().collect()
        } else {
            absorbers
        };
        work.remove_node(id, &absorbers);
        work.remove_annotation(output);
        return true;
    }

    let producer = work.producer(input).filter(|&p| p != id);
    match producer {
        Some(p) if !work.is_graph_output(input) => {
            // keep the graph output name by renaming the producer's output
            work.remove_node(id, &[p]);
            for out in work.nodes.get_mut(&p).unwrap().outputs.iter_mut() {
                if out == input {
                    *out = output.to_string();
                }
            }
            work.rename_uses(input, output);
            work.remove_annotation(input);
            true
        }
        None if work.is_graph_input(input) && !work.is_graph_output(input) => {
            for o in work.outputs.iter_mut() {
                if o == output {
                    *o = input.to_string();
                }
            }
            work.rename_uses(output, input);
            let absorbers: Vec<_> = work
                .consumers(input)
                .into_iter()
                .filter(|&c| c != id)
                .collect();
            work.remove_node(id, &absorbers);
            work.remove_annotation(output);
            true
        }
        _ => false,
    }
}
