use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use prost::Message;

use super::{
    AttributeValue, ConstTensor, Dim, GraphIR, GraphParts, NodeSpec, TensorData, TensorShape,
    ValueDecl,
};
use crate::error::{Error, Result};
use crate::onnx_proto::{
    attribute_type, data_type, AttributeProto, DimensionValue, ModelProto, TensorProto, TypeProto,
};

pub const MIN_OPSET: i64 = 9;
pub const MAX_OPSET: i64 = 20;

const SUBGRAPH_OPS: [&str; 3] = ["If", "Loop", "Scan"];

/// Decodes a serialized `ModelProto` into a validated graph.
pub fn parse_onnx(bytes: &[u8]) -> Result<GraphIR> {
    let model =
        ModelProto::decode(bytes).map_err(|e| Error::MalformedFile(format!("protobuf: {e}")))?;
    let opset = model
        .opset_import
        .iter()
        .find(|o| o.domain.is_empty() || o.domain == "ai.onnx")
        .map(|o| o.version)
        .ok_or(Error::UnsupportedOpset(0))?;
    if !(MIN_OPSET..=MAX_OPSET).contains(&opset) {
        return Err(Error::UnsupportedOpset(opset));
    }
    let graph = model
        .graph
        .ok_or_else(|| Error::MalformedFile("model has no graph".into()))?;

    let mut parameters = Vec::with_capacity(graph.initializer.len());
    let mut param_names = BTreeSet::new();
    for init in &graph.initializer {
        let (shape, data) = decode_tensor(init)?;
        param_names.insert(init.name.clone());
        parameters.push(ValueDecl {
            name: init.name.clone(),
            shape: Some(shape),
            elem_type: init.data_type,
            data,
        });
    }

    // Old exports list initializers among the graph inputs as well.
    let inputs = graph
        .input
        .iter()
        .filter(|vi| !param_names.contains(&vi.name))
        .map(|vi| {
            let (shape, elem_type) = decode_type(vi.r#type.as_ref());
            ValueDecl::new(&vi.name, shape, elem_type)
        })
        .collect();

    let mut annotations = BTreeMap::new();
    for vi in graph.value_info.iter().chain(&graph.output) {
        let (shape, elem_type) = decode_type(vi.r#type.as_ref());
        annotations.insert(vi.name.clone(), (shape, elem_type));
    }

    let param_shapes: BTreeMap<&str, &TensorShape> = parameters
        .iter()
        .filter_map(|p: &ValueDecl| p.shape.as_ref().map(|s| (p.name.as_str(), s)))
        .collect();

    let mut nodes = Vec::with_capacity(graph.node.len());
    for (id, proto) in graph.node.iter().enumerate() {
        if SUBGRAPH_OPS.contains(&proto.op_type.as_str()) {
            return Err(Error::UnsupportedConstruct(format!(
                "node {id} is a subgraph-bearing {} operator",
                proto.op_type
            )));
        }
        let mut attributes = BTreeMap::new();
        for attr in &proto.attribute {
            if let Some(value) = decode_attribute(id, attr)? {
                attributes.insert(attr.name.clone(), value);
            }
        }
        let mut node = NodeSpec {
            id,
            op_type: proto.op_type.clone(),
            domain: proto.domain.clone(),
            inputs: proto.input.clone(),
            outputs: proto.output.clone(),
            attributes,
        };
        if node.domain.is_empty() || node.domain == "ai.onnx" {
            let weight = node
                .inputs
                .get(1)
                .and_then(|w| param_shapes.get(w.as_str()).copied());
            fill_default_attributes(&mut node, weight);
        }
        nodes.push(node);
    }

    GraphIR::from_parts(GraphParts {
        opset,
        nodes,
        inputs,
        parameters,
        outputs: graph.output.iter().map(|o| o.name.clone()).collect(),
        annotations,
        provenance: None,
        elided: BTreeSet::new(),
    })
}

pub fn read_onnx(path: &Path) -> Result<GraphIR> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_onnx(&bytes)
}

/// Makes implicit ONNX defaults explicit so that equivalent exports encode
/// identically.
fn fill_default_attributes(node: &mut NodeSpec, weight: Option<&TensorShape>) {
    let explicit_pads = node
        .attr("auto_pad")
        .and_then(|a| a.as_str())
        .is_none_or(|p| p == "NOTSET");
    let rank = match node.op_type.as_str() {
        "Conv" => node
            .attr_ints("kernel_shape")
            .map(|k| k.len())
            .or_else(|| weight.map(|w| w.rank().saturating_sub(2))),
        "MaxPool" | "AveragePool" => node.attr_ints("kernel_shape").map(|k| k.len()),
        _ => return,
    };
    let Some(rank) = rank.filter(|&r| r > 0) else {
        return;
    };
    let attrs = &mut node.attributes;
    if node.op_type == "Conv" {
        if !attrs.contains_key("kernel_shape") {
            if let Some(k) = weight.and_then(|w| w.known_dims()) {
                let k = k[2..].iter().map(|&d| d as i64).collect();
                attrs.insert("kernel_shape".into(), AttributeValue::Ints(k));
            }
        }
        attrs
            .entry("dilations".into())
            .or_insert_with(|| AttributeValue::Ints(vec![1; rank]));
    }
    attrs
        .entry("strides".into())
        .or_insert_with(|| AttributeValue::Ints(vec![1; rank]));
    if explicit_pads {
        attrs
            .entry("pads".into())
            .or_insert_with(|| AttributeValue::Ints(vec![0; 2 * rank]));
    }
}

fn decode_type(ty: Option<&TypeProto>) -> (Option<TensorShape>, i32) {
    let Some(tensor) = ty.and_then(|t| t.tensor_type.as_ref()) else {
        return (None, 0);
    };
    let shape = tensor.shape.as_ref().map(|s| {
        TensorShape::new(
            s.dim
                .iter()
                .map(|d| match d.value {
                    Some(DimensionValue::DimValue(v)) if v >= 0 => Dim::Known(v as u64),
                    _ => Dim::Unknown,
                })
                .collect(),
        )
    });
    (shape, tensor.elem_type)
}

fn decode_attribute(node: usize, attr: &AttributeProto) -> Result<Option<AttributeValue>> {
    let ty = if attr.r#type == attribute_type::UNDEFINED {
        infer_attribute_type(attr)
    } else {
        attr.r#type
    };
    let value = match ty {
        attribute_type::INT => AttributeValue::Int(attr.i),
        attribute_type::FLOAT => AttributeValue::Float(attr.f),
        attribute_type::STRING => {
            AttributeValue::String(String::from_utf8_lossy(&attr.s).into_owned())
        }
        attribute_type::INTS => AttributeValue::Ints(attr.ints.clone()),
        attribute_type::FLOATS => AttributeValue::Floats(attr.floats.clone()),
        attribute_type::STRINGS => AttributeValue::Strings(
            attr.strings
                .iter()
                .map(|s| String::from_utf8_lossy(s).into_owned())
                .collect(),
        ),
        attribute_type::TENSOR => {
            let t = attr.t.as_ref().ok_or_else(|| {
                Error::MalformedFile(format!("tensor attribute {:?} has no tensor", attr.name))
            })?;
            let (shape, data) = decode_tensor(t)?;
            AttributeValue::Tensor(ConstTensor {
                shape,
                elem_type: t.data_type,
                data,
            })
        }
        attribute_type::GRAPH | attribute_type::GRAPHS => {
            return Err(Error::UnsupportedConstruct(format!(
                "node {node} carries subgraph attribute {:?}",
                attr.name
            )))
        }
        other => {
            log::warn!(
                "node {node}: dropping attribute {:?} of unsupported type {other}",
                attr.name
            );
            return Ok(None);
        }
    };
    Ok(Some(value))
}

fn infer_attribute_type(attr: &AttributeProto) -> i32 {
    if attr.g.is_some() || !attr.graphs.is_empty() {
        attribute_type::GRAPH
    } else if attr.t.is_some() {
        attribute_type::TENSOR
    } else if !attr.ints.is_empty() {
        attribute_type::INTS
    } else if !attr.floats.is_empty() {
        attribute_type::FLOATS
    } else if !attr.strings.is_empty() {
        attribute_type::STRINGS
    } else if !attr.s.is_empty() {
        attribute_type::STRING
    } else if attr.f != 0.0 {
        attribute_type::FLOAT
    } else {
        attribute_type::INT
    }
}

const EXTERNAL_DATA: i32 = 1;

fn element_width(dtype: i32) -> Option<usize> {
    Some(match dtype {
        data_type::FLOAT | data_type::INT32 | data_type::UINT32 => 4,
        data_type::INT64 | data_type::UINT64 | data_type::DOUBLE => 8,
        data_type::INT16 | data_type::UINT16 | data_type::FLOAT16 => 2,
        data_type::INT8 | data_type::UINT8 | data_type::BOOL => 1,
        _ => return None,
    })
}

/// Small integer types stored through `int32_data`.
fn is_int32_backed(dtype: i32) -> bool {
    matches!(
        dtype,
        data_type::INT32
            | data_type::INT16
            | data_type::INT8
            | data_type::UINT16
            | data_type::UINT8
            | data_type::BOOL
    )
}

pub(crate) fn decode_tensor(t: &TensorProto) -> Result<(TensorShape, Option<TensorData>)> {
    if t.dims.iter().any(|&d| d < 0) {
        return Err(Error::MalformedFile(format!(
            "tensor {:?} has a negative dimension",
            t.name
        )));
    }
    let dims: Vec<u64> = t.dims.iter().map(|&d| d as u64).collect();
    let shape = TensorShape::from_known(&dims);
    if t.data_location == EXTERNAL_DATA {
        return Ok((shape, None));
    }
    let numel: u64 = dims.iter().product();
    let numel = numel as usize;
    let check = |len: usize| -> Result<()> {
        if len != numel {
            return Err(Error::MalformedFile(format!(
                "tensor {:?} holds {len} elements, shape implies {numel}",
                t.name
            )));
        }
        Ok(())
    };

    let raw = !t.raw_data.is_empty();
    if raw {
        if let Some(width) = element_width(t.data_type) {
            if t.raw_data.len() != numel * width {
                return Err(Error::MalformedFile(format!(
                    "tensor {:?} raw payload is {} bytes, expected {}",
                    t.name,
                    t.raw_data.len(),
                    numel * width
                )));
            }
        }
    }

    let data = match t.data_type {
        data_type::FLOAT if raw => Some(TensorData::F32(
            t.raw_data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )),
        data_type::FLOAT => {
            check(t.float_data.len())?;
            Some(TensorData::F32(Arc::from(t.float_data.as_slice())))
        }
        data_type::INT64 if raw => Some(TensorData::I64(
            t.raw_data
                .chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )),
        data_type::INT64 => {
            check(t.int64_data.len())?;
            Some(TensorData::I64(Arc::from(t.int64_data.as_slice())))
        }
        data_type::INT32 if raw => Some(TensorData::I64(
            t.raw_data
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()) as i64)
                .collect(),
        )),
        dt if is_int32_backed(dt) && raw => Some(TensorData::Raw(Arc::from(t.raw_data.as_slice()))),
        dt if is_int32_backed(dt) => {
            check(t.int32_data.len())?;
            Some(TensorData::I64(
                t.int32_data.iter().map(|&v| v as i64).collect(),
            ))
        }
        data_type::DOUBLE if !raw => {
            check(t.double_data.len())?;
            Some(TensorData::Raw(
                t.double_data.iter().flat_map(|v| v.to_le_bytes()).collect(),
            ))
        }
        _ if raw => Some(TensorData::Raw(Arc::from(t.raw_data.as_slice()))),
        _ if numel == 0 => Some(TensorData::Raw(Arc::from(&[][..]))),
        _ => None,
    };
    Ok((shape, data))
}

/// Inverse of [`decode_tensor`].
pub(crate) fn encode_tensor(
    name: &str,
    shape: &TensorShape,
    elem_type: i32,
    data: Option<&TensorData>,
) -> TensorProto {
    let mut t = TensorProto {
        name: name.to_string(),
        dims: shape
            .dims
            .iter()
            .map(|d| d.known().map_or(-1, |v| v as i64))
            .collect(),
        data_type: elem_type,
        ..Default::default()
    };
    match data {
        Some(TensorData::F32(v)) => {
            t.raw_data = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        }
        Some(TensorData::I64(v)) if elem_type == data_type::INT64 => {
            t.raw_data = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        }
        Some(TensorData::I64(v)) if is_int32_backed(elem_type) => {
            t.int32_data = v.iter().map(|&x| x as i32).collect();
        }
        Some(TensorData::I64(v)) => {
            t.data_type = data_type::INT64;
            t.raw_data = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        }
        Some(TensorData::Raw(v)) => t.raw_data = v.to_vec(),
        // readers reject a tensor whose payload disagrees with its dims
        None => {
            if let (Some(dims), Some(width)) = (shape.known_dims(), element_width(elem_type)) {
                t.raw_data = vec![0; dims.iter().product::<u64>() as usize * width];
            }
        }
    }
    t
}
