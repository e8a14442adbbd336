//! Decodes serializer output with a hand-written protobuf wire walker, so the
//! field numbers are checked against the ONNX schema rather than against the
//! generated bindings.

use onnxnet::graph_ir::{AttributeValue, GraphBuilder};
use onnxnet::passes::serialize;

#[derive(Debug)]
enum Field<'a> {
    Varint(u64),
    Bytes(&'a [u8]),
    Fixed,
}

fn varint(buf: &[u8], pos: &mut usize) -> u64 {
    let mut v = 0u64;
    for shift in (0..64).step_by(7) {
        let b = buf[*pos];
        *pos += 1;
        v |= u64::from(b & 0x7f) << shift;
        if b & 0x80 == 0 {
            return v;
        }
    }
    panic!("varint too long");
}

fn fields(buf: &[u8]) -> Vec<(u64, Field<'_>)> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < buf.len() {
        let key = varint(buf, &mut pos);
        let value = match key & 7 {
            0 => Field::Varint(varint(buf, &mut pos)),
            1 => {
                pos += 8;
                Field::Fixed
            }
            2 => {
                let len = varint(buf, &mut pos) as usize;
                pos += len;
                Field::Bytes(&buf[pos - len..pos])
            }
            5 => {
                pos += 4;
                Field::Fixed
            }
            w => panic!("unexpected wire type {w}"),
        };
        out.push((key >> 3, value));
    }
    assert_eq!(pos, buf.len(), "message overran its buffer");
    out
}

fn bytes_of<'a>(fs: &[(u64, Field<'a>)], tag: u64) -> Vec<&'a [u8]> {
    fs.iter()
        .filter_map(|(t, f)| match f {
            Field::Bytes(b) if *t == tag => Some(*b),
            _ => None,
        })
        .collect()
}

fn strings(fs: &[(u64, Field<'_>)], tag: u64) -> Vec<String> {
    bytes_of(fs, tag)
        .into_iter()
        .map(|b| String::from_utf8(b.to_vec()).unwrap())
        .collect()
}

fn varint_of(fs: &[(u64, Field<'_>)], tag: u64) -> Option<u64> {
    fs.iter().find_map(|(t, f)| match f {
        Field::Varint(v) if *t == tag => Some(*v),
        _ => None,
    })
}

/// Dims of a ValueInfoProto: type (2) → tensor_type (1) → shape (2) → dim (1) → dim_value (1).
fn dims(value_info: &[u8]) -> Vec<u64> {
    let vi = fields(value_info);
    let ty = fields(bytes_of(&vi, 2)[0]);
    let tensor = fields(bytes_of(&ty, 1)[0]);
    assert_eq!(varint_of(&tensor, 1), Some(1), "elem_type FLOAT");
    let shape = fields(bytes_of(&tensor, 2)[0]);
    bytes_of(&shape, 1)
        .into_iter()
        .map(|d| varint_of(&fields(d), 1).unwrap())
        .collect()
}

#[test]
fn single_conv_has_onnx_field_layout() {
    let mut b = GraphBuilder::new(13);
    let x = b.input("x", &[1, 3, 8, 8]);
    let w = b.param("w", &[4, 3, 3, 3]);
    let y = b.op_with(
        "Conv",
        &[&x, &w],
        [("kernel_shape", AttributeValue::Ints(vec![3, 3]))],
    );
    b.output(&y);
    let bytes = serialize(&b.build().unwrap());

    let model = fields(&bytes);
    assert!(varint_of(&model, 1).unwrap() >= 7, "ir_version");
    let opsets = bytes_of(&model, 8);
    assert_eq!(opsets.len(), 1);
    let opset = fields(opsets[0]);
    assert_eq!(varint_of(&opset, 2), Some(13));
    assert!(strings(&opset, 1).iter().all(String::is_empty));

    let graphs = bytes_of(&model, 7);
    assert_eq!(graphs.len(), 1);
    let graph = fields(graphs[0]);

    let nodes = bytes_of(&graph, 1);
    assert_eq!(nodes.len(), 1);
    let node = fields(nodes[0]);
    assert_eq!(strings(&node, 4), vec!["Conv"]);
    assert_eq!(strings(&node, 1), vec![x.clone(), w.clone()]);
    assert_eq!(strings(&node, 2), vec![y.clone()]);

    let attrs = bytes_of(&node, 5);
    assert_eq!(attrs.len(), 1);
    let attr = fields(attrs[0]);
    assert_eq!(strings(&attr, 1), vec!["kernel_shape"]);
    assert_eq!(varint_of(&attr, 20), Some(7), "AttributeType INTS");
    let mut ints: Vec<u64> = attr
        .iter()
        .filter_map(|(t, f)| match f {
            Field::Varint(v) if *t == 8 => Some(*v),
            _ => None,
        })
        .collect();
    for packed in bytes_of(&attr, 8) {
        let mut pos = 0;
        while pos < packed.len() {
            ints.push(varint(packed, &mut pos));
        }
    }
    assert_eq!(ints, vec![3, 3]);

    // graph inputs (11) list the data input first; the weight is an initializer (5)
    let inputs = bytes_of(&graph, 11);
    assert_eq!(strings(&fields(inputs[0]), 1), vec![x.clone()]);
    assert_eq!(dims(inputs[0]), vec![1, 3, 8, 8]);
    let inits = bytes_of(&graph, 5);
    assert_eq!(inits.len(), 1);
    let init = fields(inits[0]);
    assert_eq!(strings(&init, 8), vec![w.clone()]);
    let init_dims: Vec<u64> = init
        .iter()
        .filter_map(|(t, f)| match f {
            Field::Varint(v) if *t == 1 => Some(*v),
            _ => None,
        })
        .chain(bytes_of(&init, 1).into_iter().flat_map(|p| {
            let mut pos = 0;
            let mut v = Vec::new();
            while pos < p.len() {
                v.push(varint(p, &mut pos));
            }
            v
        }))
        .collect();
    assert_eq!(init_dims, vec![4, 3, 3, 3]);

    let outputs = bytes_of(&graph, 12);
    assert_eq!(outputs.len(), 1);
    assert_eq!(strings(&fields(outputs[0]), 1), vec![y]);
}

#[test]
fn empty_graph_round_trips_through_the_walker() {
    let mut b = GraphBuilder::new(17);
    let x = b.input("x", &[2]);
    b.output(&x);
    let bytes = serialize(&b.build().unwrap());
    let model = fields(&bytes);
    let graph = fields(bytes_of(&model, 7)[0]);
    assert!(bytes_of(&graph, 1).is_empty());
    assert_eq!(
        strings(&fields(bytes_of(&graph, 11)[0]), 1),
        vec![x.clone()]
    );
    assert_eq!(strings(&fields(bytes_of(&graph, 12)[0]), 1), vec![x]);
    assert_eq!(varint_of(&fields(bytes_of(&model, 8)[0]), 2), Some(17));
}
