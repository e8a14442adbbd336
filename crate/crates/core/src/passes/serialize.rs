use prost::Message;

use crate::graph_ir::{encode_tensor, AttributeValue, Dim, GraphIR, TensorShape};
use crate::onnx_proto::{
    attribute_type, data_type, AttributeProto, Dimension, DimensionValue, GraphProto, ModelProto,
    NodeProto, OperatorSetIdProto, TensorShapeProto, TypeProto, TypeProtoTensor, ValueInfoProto,
};

/// Writes `g` as an ONNX `ModelProto`. Nodes are emitted in topological order
/// and named `n<id>`; inferred shapes are kept as `value_info`.
pub fn serialize(g: &GraphIR) -> Vec<u8> {
    let mut graph = GraphProto {
        name: "onnxnet".into(),
        ..Default::default()
    };
    for &id in g.order() {
        let node = g.node(id).expect("ordered node exists");
        graph.node.push(NodeProto {
            input: node.inputs.clone(),
            output: node.outputs.clone(),
            name: format!("n{id}"),
            op_type: node.op_type.clone(),
            domain: node.domain.clone(),
            attribute: node
                .attributes
                .iter()
                .map(|(k, v)| encode_attribute(k, v))
                .collect(),
        });
    }
    for v in g.values() {
        match v.role {
            crate::graph_ir::ValueRole::Parameter => {
                let shape = v.shape.clone().unwrap_or_else(TensorShape::scalar);
                graph.initializer.push(encode_tensor(
                    &v.name,
                    &shape,
                    elem_or_float(v.elem_type),
                    v.data.as_ref(),
                ));
            }
            _ if v.producer.is_some() && !g.is_graph_output(&v.name) => {
                graph
                    .value_info
                    .push(value_info(&v.name, v.shape.as_ref(), v.elem_type));
            }
            _ => {}
        }
    }
    for name in g.graph_inputs() {
        let v = g.value(name).expect("graph input exists");
        graph
            .input
            .push(value_info(name, v.shape.as_ref(), v.elem_type));
    }
    for name in g.graph_outputs() {
        let v = g.value(name).expect("graph output exists");
        graph
            .output
            .push(value_info(name, v.shape.as_ref(), v.elem_type));
    }
    let model = ModelProto {
        ir_version: if g.opset() >= 19 { 9 } else { 8 },
        opset_import: vec![OperatorSetIdProto {
            domain: String::new(),
            version: g.opset(),
        }],
        producer_name: env!("CARGO_PKG_NAME").into(),
        producer_version: env!("CARGO_PKG_VERSION").into(),
        graph: Some(graph),
    };
    model.encode_to_vec()
}

fn elem_or_float(elem_type: i32) -> i32 {
    if elem_type == data_type::UNDEFINED {
        data_type::FLOAT
    } else {
        elem_type
    }
}

fn value_info(name: &str, shape: Option<&TensorShape>, elem_type: i32) -> ValueInfoProto {
    let shape = shape.map(|s| TensorShapeProto {
        dim: s
            .dims
            .iter()
            .map(|d| Dimension {
                value: match d {
                    Dim::Known(v) => Some(DimensionValue::DimValue(*v as i64)),
                    Dim::Unknown => None,
                },
            })
            .collect(),
    });
    ValueInfoProto {
        name: name.to_string(),
        r#type: Some(TypeProto {
            tensor_type: Some(TypeProtoTensor {
                elem_type: elem_or_float(elem_type),
                shape,
            }),
        }),
    }
}

fn encode_attribute(name: &str, value: &AttributeValue) -> AttributeProto {
    let mut a = AttributeProto {
        name: name.to_string(),
        ..Default::default()
    };
    match value {
        AttributeValue::Int(v) => {
            a.r#type = attribute_type::INT;
            a.i = *v;
        }
        AttributeValue::Float(v) => {
            a.r#type = attribute_type::FLOAT;
            a.f = *v;
        }
        AttributeValue::String(v) => {
            a.r#type = attribute_type::STRING;
            a.s = v.as_bytes().to_vec();
        }
        AttributeValue::Ints(v) => {
            a.r#type = attribute_type::INTS;
            a.ints = v.clone();
        }
        AttributeValue::Floats(v) => {
            a.r#type = attribute_type::FLOATS;
            a.floats = v.clone();
        }
        AttributeValue::Strings(v) => {
            a.r#type = attribute_type::STRINGS;
            a.strings = v.iter().map(|s| s.as_bytes().to_vec()).collect();
        }
        AttributeValue::Tensor(t) => {
            a.r#type = attribute_type::TENSOR;
            a.t = Some(encode_tensor(
                "",
                &t.shape,
                elem_or_float(t.elem_type),
                t.data.as_ref(),
            ));
        }
    }
    a
}
