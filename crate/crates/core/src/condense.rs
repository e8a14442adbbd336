//! Partitioning of a graph into maximal branch-free chains and the labels
//! used when printing them.

use std::collections::{BTreeMap, BTreeSet};

use crate::graph_ir::{render_shape, GraphIR, NodeId, NodeSpec, ValueRole};

/// A maximal branch-free run of nodes; printed as one line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chain {
    pub nodes: Vec<NodeId>,
    /// Values read from outside the chain, in first-use order.
    pub head_inputs: Vec<String>,
    /// Values of the last node visible to other chains or as graph outputs.
    pub tail_outputs: Vec<String>,
}

/// Printable labels for values that cross chain boundaries.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NamingTable {
    labels: BTreeMap<String, String>,
    out_labels: BTreeMap<String, String>,
}

impl NamingTable {
    /// Label used when the value is read: `ValueN`, `Out`/`OutK` or a shape
    /// literal for graph inputs and parameters.
    pub fn label(&self, name: &str) -> Option<&str> {
        self.labels.get(name).map(String::as_str)
    }

    /// `Out`/`OutK` label of a graph output. Graph outputs that are also read
    /// inside the graph carry a `ValueN` label as well.
    pub fn out_label(&self, name: &str) -> Option<&str> {
        self.out_labels.get(name).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.labels.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

/// Outputs that are read by a node or exported by the graph.
fn live_outputs<'a>(g: &GraphIR, node: &'a NodeSpec) -> Vec<&'a str> {
    node.present_outputs()
        .filter(|o| g.use_count(o) > 0)
        .collect()
}

/// Nodes producing the activations `node` reads.
fn producers(g: &GraphIR, node: &NodeSpec) -> BTreeSet<NodeId> {
    node.present_inputs()
        .filter_map(|i| g.value(i).and_then(|v| v.producer))
        .collect()
}

/// The node `id` links to, if the edge between them is branch-free: `id`
/// has a single live output, read exactly once by a node whose only
/// producer is `id`.
pub fn chain_successor(g: &GraphIR, id: NodeId) -> Option<NodeId> {
    let node = g.node(id)?;
    let [out] = live_outputs(g, node)[..] else {
        return None;
    };
    if g.is_graph_output(out) || g.use_count(out) != 1 {
        return None;
    }
    let next = *g.value(out)?.consumers.iter().next()?;
    let succ = g.node(next)?;
    (producers(g, succ) == BTreeSet::from([id])).then_some(next)
}

pub fn build_chains(g: &GraphIR) -> (Vec<Chain>, NamingTable) {
    let successor: BTreeMap<NodeId, NodeId> = g
        .order()
        .iter()
        .filter_map(|&id| chain_successor(g, id).map(|s| (id, s)))
        .collect();
    let has_predecessor: BTreeSet<NodeId> = successor.values().copied().collect();

    let mut chains = Vec::new();
    for &head in g.order() {
        if has_predecessor.contains(&head) {
            continue;
        }
        let mut nodes = vec![head];
        while let Some(&next) = successor.get(nodes.last().expect("non-empty")) {
            nodes.push(next);
        }
        chains.push(make_chain(g, nodes));
    }

    let mut table = NamingTable::default();
    for name in g.graph_inputs() {
        table
            .labels
            .insert(name.clone(), render_shape(g.shape_of(name)));
    }
    for v in g.values().filter(|v| v.role == ValueRole::Parameter) {
        table
            .labels
            .insert(v.name.clone(), render_shape(v.shape.as_ref()));
    }
    for (i, name) in g.graph_outputs().iter().enumerate() {
        let label = if i == 0 {
            "Out".to_string()
        } else {
            format!("Out{}", i + 1)
        };
        table.out_labels.entry(name.clone()).or_insert(label);
    }
    let mut counter = 0;
    for chain in &chains {
        for out in &chain.tail_outputs {
            if table.labels.contains_key(out) {
                continue;
            }
            let read_internally = g.value(out).is_some_and(|v| !v.consumers.is_empty());
            let label = match table.out_labels.get(out) {
                Some(o) if !read_internally => o.clone(),
                _ => {
                    counter += 1;
                    format!("Value{counter}")
                }
            };
            table.labels.insert(out.clone(), label);
        }
    }
    (chains, table)
}

fn make_chain(g: &GraphIR, nodes: Vec<NodeId>) -> Chain {
    let internal: BTreeSet<&str> = nodes[..nodes.len() - 1]
        .iter()
        .flat_map(|&id| g.node(id).expect("chain node").present_outputs())
        .collect();
    let mut head_inputs: Vec<String> = Vec::new();
    for &id in &nodes {
        for input in g.node(id).expect("chain node").present_inputs() {
            if !internal.contains(input) && !head_inputs.iter().any(|h| h == input) {
                head_inputs.push(input.to_string());
            }
        }
    }
    let tail = g
        .node(*nodes.last().expect("non-empty"))
        .expect("chain node");
    let live = live_outputs(g, tail);
    let tail_outputs = if live.is_empty() {
        tail.present_outputs().map(str::to_string).collect()
    } else {
        live.into_iter().map(str::to_string).collect()
    };
    Chain {
        nodes,
        head_inputs,
        tail_outputs,
    }
}

/// Checks that `chains` partition the nodes of `g` into branch-free runs
/// none of which can be extended at either end.
pub fn chain_cover_check(g: &GraphIR, chains: &[Chain]) -> bool {
    let mut seen = BTreeSet::new();
    for chain in chains {
        let (Some(&first), Some(&last)) = (chain.nodes.first(), chain.nodes.last()) else {
            return false;
        };
        if !chain
            .nodes
            .iter()
            .all(|id| g.node(*id).is_some() && seen.insert(*id))
        {
            return false;
        }
        if chain
            .nodes
            .windows(2)
            .any(|w| chain_successor(g, w[0]) != Some(w[1]))
        {
            return false;
        }
        let extendable_tail = chain_successor(g, last).is_some();
        let extendable_head = g
            .order()
            .iter()
            .any(|&p| chain_successor(g, p) == Some(first));
        if extendable_head || extendable_tail {
            return false;
        }
    }
    seen.len() == g.node_count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_ir::{infer_shapes, GraphBuilder};

    #[test]
    fn linear_graph_is_one_chain() {
        let mut b = GraphBuilder::new(13);
        let x = b.input("x", &[1, 3, 8, 8]);
        let w = b.param("w", &[4, 3, 1, 1]);
        let c = b.op("Conv", &[&x, &w]);
        let r = b.op("Relu", &[&c]);
        let f = b.op("Flatten", &[&r]);
        let gw = b.param("gw", &[256, 10]);
        let y = b.op("MatMul", &[&f, &gw]);
        b.output(&y);
        let g = infer_shapes(&b.build().unwrap()).unwrap();
        let (chains, table) = build_chains(&g);
        assert_eq!(chains.len(), 1);
        assert_eq!(chains[0].nodes, vec![0, 1, 2, 3]);
        assert_eq!(chains[0].head_inputs, vec![x.clone(), w, gw]);
        assert_eq!(table.label(&y), Some("Out"));
        assert_eq!(table.label(&x), Some("1x3x8x8"));
        assert!(chain_cover_check(&g, &chains));
    }

    #[test]
    fn diamond_has_four_chains() {
        let mut b = GraphBuilder::new(13);
        let x = b.input("x", &[4]);
        let a = b.op("Relu", &[&x]);
        let l = b.op("Relu", &[&a]);
        let r = b.op("Softmax", &[&a]);
        let d = b.op("Add", &[&l, &r]);
        b.output(&d);
        let g = b.build().unwrap();
        let (chains, table) = build_chains(&g);
        let nodes: Vec<_> = chains.iter().map(|c| c.nodes.clone()).collect();
        assert_eq!(nodes, vec![vec![0], vec![1], vec![2], vec![3]]);
        assert_eq!(table.label(&a), Some("Value1"));
        assert_eq!(table.label(&l), Some("Value2"));
        assert_eq!(table.label(&r), Some("Value3"));
        assert_eq!(table.label(&d), Some("Out"));
    }

    #[test]
    fn repeated_use_breaks_chain() {
        let mut b = GraphBuilder::new(13);
        let x = b.input("x", &[1, 2]);
        let r = b.op("Relu", &[&x]);
        let c = b.op_with(
            "Concat",
            &[&r, &r],
            [("axis", crate::graph_ir::AttributeValue::Int(1))],
        );
        b.output(&c);
        let g = b.build().unwrap();
        let (chains, _) = build_chains(&g);
        assert_eq!(chains.len(), 2);
    }

    #[test]
    fn cover_check_rejects_bad_partitions() {
        let mut b = GraphBuilder::new(13);
        let x = b.input("x", &[4]);
        let a = b.op("Relu", &[&x]);
        let c = b.op("Relu", &[&a]);
        let d = b.op("Relu", &[&c]);
        b.output(&d);
        let g = b.build().unwrap();
        let (chains, _) = build_chains(&g);
        assert!(chain_cover_check(&g, &chains));
        let split = vec![make_chain(&g, vec![0]), make_chain(&g, vec![1, 2])];
        assert!(!chain_cover_check(&g, &split));
        let dup = vec![make_chain(&g, vec![0, 1, 2]), make_chain(&g, vec![1])];
        assert!(!chain_cover_check(&g, &dup));
    }

    #[test]
    fn output_read_internally_keeps_value_label() {
        let mut b = GraphBuilder::new(13);
        let x = b.input("x", &[4]);
        let a = b.op("Relu", &[&x]);
        let c = b.op("Softmax", &[&a]);
        b.output(&a);
        b.output(&c);
        let g = b.build().unwrap();
        let (chains, table) = build_chains(&g);
        assert_eq!(chains.len(), 2);
        assert_eq!(table.label(&a), Some("Value1"));
        assert_eq!(table.out_label(&a), Some("Out"));
        assert_eq!(table.label(&c), Some("Out2"));
    }
}
