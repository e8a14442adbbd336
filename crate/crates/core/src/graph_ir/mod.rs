//! In-memory graph IR for ONNX models.
//!
//! A [`GraphIR`] is immutable once built. Passes take it apart with
//! [`GraphIR::to_parts`], edit the pieces and rebuild it through
//! [`GraphIR::from_parts`], which re-derives producer/consumer links and
//! re-checks every structural invariant.

mod builder;
mod parse;
mod shape;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;
use std::sync::Arc;

pub use builder::GraphBuilder;
pub(crate) use parse::encode_tensor;
pub use parse::{parse_onnx, read_onnx, MAX_OPSET, MIN_OPSET};
pub use shape::{conv_output_dim, infer_shapes};
pub(crate) use shape::{reduce_axes, WindowAttrs};

use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dim {
    Known(u64),
    Unknown,
}

impl Dim {
    pub fn known(self) -> Option<u64> {
        match self {
            Dim::Known(v) => Some(v),
            Dim::Unknown => None,
        }
    }
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dim::Known(v) => write!(f, "{v}"),
            Dim::Unknown => f.write_str("?"),
        }
    }
}

/// Ordered list of dimensions. The empty list is a scalar.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TensorShape {
    pub dims: Vec<Dim>,
}

impl TensorShape {
    pub fn new(dims: Vec<Dim>) -> Self {
        Self { dims }
    }

    pub fn from_known(dims: &[u64]) -> Self {
        Self {
            dims: dims.iter().map(|&d| Dim::Known(d)).collect(),
        }
    }

    pub fn scalar() -> Self {
        Self { dims: Vec::new() }
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// All dims as integers, or `None` when any is unknown.
    pub fn known_dims(&self) -> Option<Vec<u64>> {
        self.dims.iter().map(|d| d.known()).collect()
    }

    pub fn numel(&self) -> Option<u64> {
        self.known_dims().map(|d| d.iter().product())
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.dims.is_empty() {
            return f.write_str("scalar");
        }
        for (i, d) in self.dims.iter().enumerate() {
            if i > 0 {
                f.write_str("x")?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

/// Renders an optional shape; a shape that is not known at all prints as `?`.
pub fn render_shape(shape: Option<&TensorShape>) -> String {
    match shape {
        Some(s) => s.to_string(),
        None => "?".to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ValueRole {
    GraphInput,
    GraphOutput,
    Parameter,
    Activation,
}

/// Constant tensor payload. Only float32 and integer tensors are decoded;
/// everything else is kept as the little-endian byte image.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Arc<[f32]>),
    I64(Arc<[i64]>),
    Raw(Arc<[u8]>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I64(v) => v.len(),
            TensorData::Raw(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_i64(&self) -> Option<&[i64]> {
        match self {
            TensorData::I64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match self {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueInfo {
    pub name: String,
    pub shape: Option<TensorShape>,
    /// ONNX element type code, 0 when unknown.
    pub elem_type: i32,
    pub role: ValueRole,
    pub producer: Option<NodeId>,
    pub consumers: BTreeSet<NodeId>,
    pub data: Option<TensorData>,
}

/// A constant tensor carried inside an attribute (e.g. `Constant.value`).
#[derive(Debug, Clone, PartialEq)]
pub struct ConstTensor {
    pub shape: TensorShape,
    pub elem_type: i32,
    pub data: Option<TensorData>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttributeValue {
    Int(i64),
    Float(f32),
    String(String),
    Ints(Vec<i64>),
    Floats(Vec<f32>),
    Strings(Vec<String>),
    Tensor(ConstTensor),
}

impl AttributeValue {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            AttributeValue::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_ints(&self) -> Option<&[i64]> {
        match self {
            AttributeValue::Ints(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_float(&self) -> Option<f32> {
        match self {
            AttributeValue::Float(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            AttributeValue::String(v) => Some(v),
            _ => None,
        }
    }
}

pub type Attributes = BTreeMap<String, AttributeValue>;

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub id: NodeId,
    pub op_type: String,
    pub domain: String,
    /// Input value names. An empty string marks an omitted optional input.
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub attributes: Attributes,
}

impl NodeSpec {
    pub fn new(id: NodeId, op_type: &str, inputs: Vec<String>, outputs: Vec<String>) -> Self {
        Self {
            id,
            op_type: op_type.to_string(),
            domain: String::new(),
            inputs,
            outputs,
            attributes: Attributes::new(),
        }
    }

    pub fn attr(&self, name: &str) -> Option<&AttributeValue> {
        self.attributes.get(name)
    }

    pub fn attr_int(&self, name: &str, default: i64) -> i64 {
        self.attr(name).and_then(|a| a.as_int()).unwrap_or(default)
    }

    pub fn attr_ints(&self, name: &str) -> Option<&[i64]> {
        self.attr(name).and_then(|a| a.as_ints())
    }

    /// Non-empty input names, in slot order.
    pub fn present_inputs(&self) -> impl Iterator<Item = &str> {
        self.inputs
            .iter()
            .map(String::as_str)
            .filter(|s| !s.is_empty())
    }

    pub fn present_outputs(&self) -> impl Iterator<Item = &str> {
        self.outputs
            .iter()
            .map(String::as_str)
            .filter(|s| !s.is_empty())
    }
}

/// A non-activation value declared up front: a graph input or a parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueDecl {
    pub name: String,
    pub shape: Option<TensorShape>,
    pub elem_type: i32,
    pub data: Option<TensorData>,
}

impl ValueDecl {
    pub fn new(name: &str, shape: Option<TensorShape>, elem_type: i32) -> Self {
        Self {
            name: name.to_string(),
            shape,
            elem_type,
            data: None,
        }
    }
}

/// Editable, unvalidated form of a graph.
#[derive(Debug, Clone, Default)]
pub struct GraphParts {
    pub opset: i64,
    pub nodes: Vec<NodeSpec>,
    pub inputs: Vec<ValueDecl>,
    pub parameters: Vec<ValueDecl>,
    pub outputs: Vec<String>,
    /// Shape and element type known for node-produced values.
    pub annotations: BTreeMap<String, (Option<TensorShape>, i32)>,
    /// `None` means identity provenance.
    pub provenance: Option<BTreeMap<NodeId, BTreeSet<NodeId>>>,
    pub elided: BTreeSet<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphIR {
    opset: i64,
    nodes: BTreeMap<NodeId, NodeSpec>,
    values: BTreeMap<String, ValueInfo>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    provenance: BTreeMap<NodeId, BTreeSet<NodeId>>,
    elided: BTreeSet<NodeId>,
    order: Vec<NodeId>,
}

impl GraphIR {
    /// Validates the parts and builds the graph.
    pub fn from_parts(parts: GraphParts) -> Result<Self> {
        let GraphParts {
            opset,
            nodes: node_list,
            inputs,
            parameters,
            outputs,
            annotations,
            provenance,
            elided,
        } = parts;

        let mut values: BTreeMap<String, ValueInfo> = BTreeMap::new();
        let define = |values: &mut BTreeMap<String, ValueInfo>, info: ValueInfo| {
            if values.contains_key(&info.name) {
                return Err(Error::MalformedFile(format!(
                    "value {:?} is defined more than once",
                    info.name
                )));
            }
            values.insert(info.name.clone(), info);
            Ok(())
        };

        for decl in &inputs {
            define(&mut values, decl_to_info(decl, ValueRole::GraphInput))?;
        }
        for decl in &parameters {
            define(&mut values, decl_to_info(decl, ValueRole::Parameter))?;
        }

        let output_set: BTreeSet<&str> = outputs.iter().map(String::as_str).collect();
        let mut nodes = BTreeMap::new();
        for node in node_list {
            if node.op_type.is_empty() {
                return Err(Error::MalformedFile(format!(
                    "node {} has an empty op_type",
                    node.id
                )));
            }
            for out in node.present_outputs() {
                let (shape, elem_type) = annotations.get(out).cloned().unwrap_or((None, 0));
                let role = if output_set.contains(out) {
                    ValueRole::GraphOutput
                } else {
                    ValueRole::Activation
                };
                define(
                    &mut values,
                    ValueInfo {
                        name: out.to_string(),
                        shape,
                        elem_type,
                        role,
                        producer: Some(node.id),
                        consumers: BTreeSet::new(),
                        data: None,
                    },
                )?;
            }
            let id = node.id;
            if nodes.insert(id, node).is_some() {
                return Err(Error::MalformedFile(format!("duplicate node id {id}")));
            }
        }

        for node in nodes.values() {
            for name in node.present_inputs() {
                match values.get_mut(name) {
                    Some(v) => {
                        v.consumers.insert(node.id);
                    }
                    None => {
                        return Err(Error::DanglingReference {
                            node: node.id,
                            name: name.to_string(),
                        })
                    }
                }
            }
        }
        for out in &outputs {
            match values.get(out) {
                Some(v) if v.producer.is_some() || v.role == ValueRole::GraphInput => {}
                _ => {
                    return Err(Error::MalformedFile(format!(
                        "graph output {out:?} is neither produced by a node nor a graph input"
                    )))
                }
            }
        }

        let order = compute_topo_order(&nodes, &values)?;

        let provenance = match provenance {
            Some(mut p) => {
                p.retain(|id, _| nodes.contains_key(id));
                for id in nodes.keys() {
                    p.entry(*id).or_insert_with(|| BTreeSet::from([*id]));
                }
                p
            }
            None => nodes.keys().map(|&id| (id, BTreeSet::from([id]))).collect(),
        };

        let graph = GraphIR {
            opset,
            nodes,
            values,
            inputs: inputs.into_iter().map(|d| d.name).collect(),
            outputs,
            provenance,
            elided,
            order,
        };
        let components = graph.component_count();
        if components > 1 {
            return Err(Error::MultipleComponents(components));
        }
        Ok(graph)
    }

    /// Decomposes the graph into editable parts that rebuild an equal graph.
    pub fn to_parts(&self) -> GraphParts {
        let decl = |name: &String| {
            let v = &self.values[name];
            ValueDecl {
                name: v.name.clone(),
                shape: v.shape.clone(),
                elem_type: v.elem_type,
                data: v.data.clone(),
            }
        };
        let parameters = self
            .values
            .values()
            .filter(|v| v.role == ValueRole::Parameter)
            .map(|v| decl(&v.name))
            .collect();
        let annotations = self
            .values
            .values()
            .filter(|v| v.producer.is_some())
            .map(|v| (v.name.clone(), (v.shape.clone(), v.elem_type)))
            .collect();
        GraphParts {
            opset: self.opset,
            nodes: self.nodes.values().cloned().collect(),
            inputs: self.inputs.iter().map(decl).collect(),
            parameters,
            outputs: self.outputs.clone(),
            annotations,
            provenance: Some(self.provenance.clone()),
            elided: self.elided.clone(),
        }
    }

    pub fn opset(&self) -> i64 {
        self.opset
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Nodes in ascending id order.
    pub fn nodes(&self) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.values()
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeSpec> {
        self.nodes.get(&id)
    }

    pub fn values(&self) -> impl Iterator<Item = &ValueInfo> {
        self.values.values()
    }

    pub fn value(&self, name: &str) -> Option<&ValueInfo> {
        self.values.get(name)
    }

    pub fn graph_inputs(&self) -> &[String] {
        &self.inputs
    }

    pub fn graph_outputs(&self) -> &[String] {
        &self.outputs
    }

    pub fn provenance(&self) -> &BTreeMap<NodeId, BTreeSet<NodeId>> {
        &self.provenance
    }

    /// Original node ids removed without a surviving node to absorb them.
    pub fn elided(&self) -> &BTreeSet<NodeId> {
        &self.elided
    }

    /// Deterministic topological order computed at construction.
    pub fn order(&self) -> &[NodeId] {
        &self.order
    }

    pub fn is_parameter(&self, name: &str) -> bool {
        self.values
            .get(name)
            .is_some_and(|v| v.role == ValueRole::Parameter)
    }

    pub fn shape_of(&self, name: &str) -> Option<&TensorShape> {
        self.values.get(name).and_then(|v| v.shape.as_ref())
    }

    /// Number of input slots reading `name`, plus one per graph-output entry.
    pub fn use_count(&self, name: &str) -> usize {
        let Some(v) = self.values.get(name) else {
            return 0;
        };
        let slots: usize = v
            .consumers
            .iter()
            .map(|id| self.nodes[id].inputs.iter().filter(|i| *i == name).count())
            .sum();
        slots + self.outputs.iter().filter(|o| *o == name).count()
    }

    pub fn is_graph_output(&self, name: &str) -> bool {
        self.outputs.iter().any(|o| o == name)
    }

    fn component_count(&self) -> usize {
        // union-find over node ids followed by graph inputs
        let node_index: BTreeMap<NodeId, usize> = self
            .nodes
            .keys()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect();
        let input_index: BTreeMap<&str, usize> = self
            .inputs
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), node_index.len() + i))
            .collect();
        let mut parent: Vec<usize> = (0..node_index.len() + input_index.len()).collect();

        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        fn union(parent: &mut [usize], a: usize, b: usize) {
            let (ra, rb) = (find(parent, a), find(parent, b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }

        let endpoint = |name: &str| -> Option<usize> {
            if let Some(&i) = input_index.get(name) {
                return Some(i);
            }
            self.values
                .get(name)
                .and_then(|v| v.producer)
                .map(|p| node_index[&p])
        };

        for node in self.nodes.values() {
            let me = node_index[&node.id];
            for name in node.present_inputs() {
                if let Some(other) = endpoint(name) {
                    union(&mut parent, me, other);
                }
            }
        }
        let roots: BTreeSet<usize> = (0..parent.len()).map(|i| find(&mut parent, i)).collect();
        roots.len()
    }
}

fn decl_to_info(decl: &ValueDecl, role: ValueRole) -> ValueInfo {
    ValueInfo {
        name: decl.name.clone(),
        shape: decl.shape.clone(),
        elem_type: decl.elem_type,
        role,
        producer: None,
        consumers: BTreeSet::new(),
        data: decl.data.clone(),
    }
}

fn compute_topo_order(
    nodes: &BTreeMap<NodeId, NodeSpec>,
    values: &BTreeMap<String, ValueInfo>,
) -> Result<Vec<NodeId>> {
    let mut indegree: BTreeMap<NodeId, usize> = nodes.keys().map(|&id| (id, 0)).collect();
    let mut successors: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for node in nodes.values() {
        for name in node.present_inputs() {
            if let Some(p) = values.get(name).and_then(|v| v.producer) {
                *indegree.get_mut(&node.id).unwrap() += 1;
                successors.entry(p).or_default().push(node.id);
            }
        }
    }
    let mut ready: BinaryHeap<Reverse<NodeId>> = indegree
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(&id, _)| Reverse(id))
        .collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(Reverse(id)) = ready.pop() {
        order.push(id);
        for succ in successors.get(&id).into_iter().flatten() {
            let d = indegree.get_mut(succ).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.push(Reverse(*succ));
            }
        }
    }
    if order.len() != nodes.len() {
        return Err(Error::CyclicGraph);
    }
    Ok(order)
}

/// Topological order of node ids; ties go to the smaller original index.
pub fn topo_order(g: &GraphIR) -> Result<Vec<NodeId>> {
    compute_topo_order(&g.nodes, &g.values)
}
