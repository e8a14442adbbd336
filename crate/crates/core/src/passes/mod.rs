//! Lossless graph simplification: node removal, shape-level constant folding
//! and pattern fusion, iterated to a fixpoint.

mod fold;
mod patterns;
mod removal;
mod serialize;

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

pub use fold::{fold_constants, fold_constants_with, FoldConfig, DEFAULT_FOLD_BUDGET};
pub use patterns::{
    builtin_rules, conv_add_bias_rule, conv_batchnorm_rule, matmul_add_gemm_rule, merge_patterns,
    PatternMatch, PatternRule,
};
pub use removal::{remove_low_importance, remove_low_importance_with, RemovalConfig};
pub use serialize::serialize;

use crate::error::{Error, Result};
use crate::graph_ir::{
    infer_shapes, GraphIR, GraphParts, NodeId, NodeSpec, TensorShape, ValueDecl,
};

pub const MAX_FIXPOINT_ITERATIONS: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PassReport {
    pub pass_name: String,
    pub nodes_removed: usize,
    /// Nodes eliminated by fusing them into another node.
    pub nodes_merged: usize,
    pub iterations: usize,
}

impl PassReport {
    fn new(name: &str) -> Self {
        Self {
            pass_name: name.to_string(),
            nodes_removed: 0,
            nodes_merged: 0,
            iterations: 1,
        }
    }

    fn changed(&self) -> bool {
        self.nodes_removed + self.nodes_merged > 0
    }
}

#[derive(Debug, Clone)]
pub struct SimplifyConfig {
    pub removal: RemovalConfig,
    pub fold: FoldConfig,
    pub rules: Vec<PatternRule>,
    pub max_iterations: usize,
}

impl Default for SimplifyConfig {
    fn default() -> Self {
        Self {
            removal: RemovalConfig::default(),
            fold: FoldConfig::default(),
            rules: builtin_rules(),
            max_iterations: MAX_FIXPOINT_ITERATIONS,
        }
    }
}

impl SimplifyConfig {
    /// Also folds BatchNormalization into a preceding Conv when all
    /// statistics are stored parameters.
    pub fn with_batchnorm_folding(mut self) -> Self {
        self.rules.push(conv_batchnorm_rule());
        self
    }
}

pub fn simplify(g: &GraphIR) -> Result<(GraphIR, Vec<PassReport>)> {
    simplify_with(g, &SimplifyConfig::default())
}

pub fn simplify_with(g: &GraphIR, cfg: &SimplifyConfig) -> Result<(GraphIR, Vec<PassReport>)> {
    let mut graph = infer_shapes(g)?;
    let mut totals = [
        PassReport::new("remove_low_importance"),
        PassReport::new("fold_constants"),
        PassReport::new("merge_patterns"),
    ];
    for iteration in 1..=cfg.max_iterations {
        let (next, removed) = remove_low_importance_with(&graph, &cfg.removal)?;
        let (next, folded) = fold_constants_with(&next, &cfg.fold)?;
        let next = if folded.changed() {
            infer_shapes(&next)?
        } else {
            next
        };
        let (next, merged) = merge_patterns(&next, &cfg.rules)?;
        graph = next;

        let changed = removed.changed() || folded.changed() || merged.changed();
        for (total, step) in totals.iter_mut().zip([removed, folded, merged]) {
            total.nodes_removed += step.nodes_removed;
            total.nodes_merged += step.nodes_merged;
            total.iterations = iteration;
        }
        if !changed {
            return Ok((graph, totals.into()));
        }
    }
    Err(Error::FixpointNotReached(cfg.max_iterations))
}

/// Mutable working copy of a graph used by the passes.
#[derive(Debug, Clone)]
pub(crate) struct Work {
    opset: i64,
    pub nodes: BTreeMap<NodeId, NodeSpec>,
    inputs: Vec<ValueDecl>,
    pub params: BTreeMap<String, ValueDecl>,
    pub outputs: Vec<String>,
    annotations: BTreeMap<String, (Option<TensorShape>, i32)>,
    provenance: BTreeMap<NodeId, BTreeSet<NodeId>>,
    elided: BTreeSet<NodeId>,
}

impl Work {
    pub fn new(g: &GraphIR) -> Self {
        let parts = g.to_parts();
        Self {
            opset: parts.opset,
            nodes: parts.nodes.into_iter().map(|n| (n.id, n)).collect(),
            inputs: parts.inputs,
            params: parts
                .parameters
                .into_iter()
                .map(|p| (p.name.clone(), p))
                .collect(),
            outputs: parts.outputs,
            annotations: parts.annotations,
            provenance: parts.provenance.unwrap_or_default(),
            elided: parts.elided,
        }
    }

    /// Rebuilds a validated graph, dropping parameters nothing reads.
    pub fn finish(self) -> Result<GraphIR> {
        let used: BTreeSet<&str> = self
            .nodes
            .values()
            .flat_map(|n| n.present_inputs())
            .collect();
        let parameters = self
            .params
            .values()
            .filter(|p| used.contains(p.name.as_str()))
            .cloned()
            .collect();
        GraphIR::from_parts(GraphParts {
            opset: self.opset,
            nodes: self.nodes.into_values().collect(),
            inputs: self.inputs,
            parameters,
            outputs: self.outputs,
            annotations: self.annotations,
            provenance: Some(self.provenance),
            elided: self.elided,
        })
    }

    pub fn is_graph_input(&self, name: &str) -> bool {
        self.inputs.iter().any(|i| i.name == name)
    }

    pub fn is_graph_output(&self, name: &str) -> bool {
        self.outputs.iter().any(|o| o == name)
    }

    pub fn producer(&self, name: &str) -> Option<NodeId> {
        self.nodes
            .values()
            .find(|n| n.outputs.iter().any(|o| o == name))
            .map(|n| n.id)
    }

    pub fn consumers(&self, name: &str) -> Vec<NodeId> {
        self.nodes
            .values()
            .filter(|n| n.inputs.iter().any(|i| i == name))
            .map(|n| n.id)
            .collect()
    }

    pub fn rename_uses(&mut self, from: &str, to: &str) {
        for node in self.nodes.values_mut() {
            for input in node.inputs.iter_mut() {
                if input == from {
                    *input = to.to_string();
                }
            }
        }
    }

    pub fn shape(&self, name: &str) -> Option<&TensorShape> {
        if let Some(p) = self.params.get(name) {
            return p.shape.as_ref();
        }
        if let Some(i) = self.inputs.iter().find(|i| i.name == name) {
            return i.shape.as_ref();
        }
        self.annotations.get(name).and_then(|(s, _)| s.as_ref())
    }

    pub fn remove_annotation(&mut self, name: &str) {
        self.annotations.remove(name);
    }

    /// Removes a node, handing its provenance to `absorbers` (or to the
    /// elided set when there are none).
    pub fn remove_node(&mut self, id: NodeId, absorbers: &[NodeId]) -> NodeSpec {
        let node = self.nodes.remove(&id).expect("node exists");
        let prov = self
            .provenance
            .remove(&id)
            .unwrap_or_else(|| BTreeSet::from([id]));
        let targets: Vec<NodeId> = absorbers
            .iter()
            .copied()
            .filter(|a| self.nodes.contains_key(a))
            .collect();
        if targets.is_empty() {
            self.elided.extend(prov);
        } else {
            for t in targets {
                self.provenance
                    .entry(t)
                    .or_insert_with(|| BTreeSet::from([t]))
                    .extend(prov.iter().copied());
            }
        }
        node
    }

    pub fn insert_node(&mut self, node: NodeSpec, provenance: BTreeSet<NodeId>) {
        self.provenance.insert(node.id, provenance);
        self.nodes.insert(node.id, node);
    }

    pub fn take_provenance(&mut self, id: NodeId) -> BTreeSet<NodeId> {
        self.provenance
            .remove(&id)
            .unwrap_or_else(|| BTreeSet::from([id]))
    }
}
