use std::sync::Arc;

use super::{AttributeValue, GraphIR, GraphParts, NodeSpec, TensorData, TensorShape, ValueDecl};
use crate::error::Result;
use crate::onnx_proto::data_type;

/// Programmatic graph construction. Node ids are assigned in insertion
/// order and generated value names are `v0`, `v1`, ...
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    parts: GraphParts,
    next_value: usize,
}

impl GraphBuilder {
    pub fn new(opset: i64) -> Self {
        Self {
            parts: GraphParts {
                opset,
                ..Default::default()
            },
            next_value: 0,
        }
    }

    pub fn input(&mut self, name: &str, dims: &[u64]) -> String {
        self.input_decl(ValueDecl::new(
            name,
            Some(TensorShape::from_known(dims)),
            data_type::FLOAT,
        ))
    }

    pub fn input_decl(&mut self, decl: ValueDecl) -> String {
        let name = decl.name.clone();
        self.parts.inputs.push(decl);
        name
    }

    /// Float parameter with a shape but no payload.
    pub fn param(&mut self, name: &str, dims: &[u64]) -> String {
        self.param_decl(ValueDecl::new(
            name,
            Some(TensorShape::from_known(dims)),
            data_type::FLOAT,
        ))
    }

    pub fn param_f32(&mut self, name: &str, dims: &[u64], data: Vec<f32>) -> String {
        let mut decl = ValueDecl::new(name, Some(TensorShape::from_known(dims)), data_type::FLOAT);
        decl.data = Some(TensorData::F32(Arc::from(data)));
        self.param_decl(decl)
    }

    pub fn param_i64(&mut self, name: &str, dims: &[u64], data: Vec<i64>) -> String {
        let mut decl = ValueDecl::new(name, Some(TensorShape::from_known(dims)), data_type::INT64);
        decl.data = Some(TensorData::I64(Arc::from(data)));
        self.param_decl(decl)
    }

    pub fn param_decl(&mut self, decl: ValueDecl) -> String {
        let name = decl.name.clone();
        self.parts.parameters.push(decl);
        name
    }

    pub fn fresh_name(&mut self) -> String {
        let name = format!("v{}", self.next_value);
        self.next_value += 1;
        name
    }

    pub fn op(&mut self, op_type: &str, inputs: &[&str]) -> String {
        self.op_with(op_type, inputs, [])
    }

    pub fn op_with<'a>(
        &mut self,
        op_type: &str,
        inputs: &[&str],
        attrs: impl IntoIterator<Item = (&'a str, AttributeValue)>,
    ) -> String {
        self.op_multi(op_type, inputs, 1, attrs).remove(0)
    }

    pub fn op_multi<'a>(
        &mut self,
        op_type: &str,
        inputs: &[&str],
        n_outputs: usize,
        attrs: impl IntoIterator<Item = (&'a str, AttributeValue)>,
    ) -> Vec<String> {
        let outputs: Vec<String> = (0..n_outputs).map(|_| self.fresh_name()).collect();
        let mut node = NodeSpec::new(
            self.parts.nodes.len(),
            op_type,
            inputs.iter().map(|s| s.to_string()).collect(),
            outputs.clone(),
        );
        node.attributes = attrs.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        self.parts.nodes.push(node);
        outputs
    }

    /// Appends a fully specified node; its id is replaced by the next free id.
    pub fn node(&mut self, mut node: NodeSpec) -> usize {
        node.id = self.parts.nodes.len();
        let id = node.id;
        self.parts.nodes.push(node);
        id
    }

    pub fn annotate(&mut self, name: &str, shape: TensorShape) {
        self.parts
            .annotations
            .insert(name.to_string(), (Some(shape), data_type::FLOAT));
    }

    pub fn output(&mut self, name: &str) {
        self.parts.outputs.push(name.to_string());
    }

    pub fn into_parts(self) -> GraphParts {
        self.parts
    }

    pub fn build(self) -> Result<GraphIR> {
        GraphIR::from_parts(self.parts)
    }
}
