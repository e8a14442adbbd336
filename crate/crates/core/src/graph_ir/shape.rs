//! Static shape inference following ONNX operator semantics for the subset of
//! operators that appear in the benchmark spaces. Anything else yields an
//! unknown shape rather than an error.

use super::{AttributeValue, Dim, GraphIR, NodeSpec, TensorData, TensorShape};
use crate::error::{Error, Result};
use crate::onnx_proto::data_type;

type Dims = Vec<Dim>;

struct Ctx<'a> {
    g: &'a GraphIR,
    node: &'a NodeSpec,
    shapes: &'a std::collections::BTreeMap<String, (Option<TensorShape>, i32)>,
}

impl Ctx<'_> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::shape(self.node.id, &self.node.op_type, reason)
    }

    fn input(&self, slot: usize) -> Option<&TensorShape> {
        let name = self.node.inputs.get(slot).filter(|n| !n.is_empty())?;
        self.shapes.get(name).and_then(|(s, _)| s.as_ref())
    }

    fn input_elem(&self, slot: usize) -> i32 {
        self.node
            .inputs
            .get(slot)
            .and_then(|n| self.shapes.get(n))
            .map_or(0, |(_, e)| *e)
    }

    fn has_input(&self, slot: usize) -> bool {
        self.node.inputs.get(slot).is_some_and(|n| !n.is_empty())
    }

    fn const_i64(&self, slot: usize) -> Option<&[i64]> {
        let name = self.node.inputs.get(slot).filter(|n| !n.is_empty())?;
        self.g
            .value(name)
            .filter(|v| v.producer.is_none())
            .and_then(|v| v.data.as_ref())
            .and_then(TensorData::as_i64)
    }
}

/// Output extent of one spatial axis of a convolution or pooling window.
/// Returns `None` when the window does not fit.
pub fn conv_output_dim(
    input: u64,
    kernel: u64,
    stride: u64,
    pad_begin: u64,
    pad_end: u64,
    dilation: u64,
    ceil_mode: bool,
) -> Option<u64> {
    let effective = dilation * (kernel.max(1) - 1) + 1;
    let padded = input + pad_begin + pad_end;
    if padded < effective || stride == 0 {
        return None;
    }
    let span = padded - effective;
    let steps = if ceil_mode {
        span.div_ceil(stride)
    } else {
        span / stride
    };
    Some(steps + 1)
}

/// Fills in shapes for node-produced values, leaving values untouched when
/// the operator is outside the supported set.
pub fn infer_shapes(g: &GraphIR) -> Result<GraphIR> {
    let mut shapes: std::collections::BTreeMap<String, (Option<TensorShape>, i32)> = g
        .values()
        .map(|v| (v.name.clone(), (v.shape.clone(), v.elem_type)))
        .collect();

    for &id in g.order() {
        let node = g.node(id).expect("order lists existing nodes");
        let ctx = Ctx {
            g,
            node,
            shapes: &shapes,
        };
        let (outs, elem) = infer_node(&ctx)?;
        let elem = elem.unwrap_or_else(|| ctx.input_elem(0));
        for (slot, name) in node.outputs.iter().enumerate() {
            if name.is_empty() {
                continue;
            }
            let entry = shapes.get_mut(name).expect("outputs are defined values");
            if let Some(Some(shape)) = outs.get(slot) {
                entry.0 = Some(shape.clone());
            }
            if elem != 0 && (slot == 0 || entry.1 == 0) {
                entry.1 = elem;
            }
        }
    }

    let mut parts = g.to_parts();
    for (name, (shape, elem)) in parts.annotations.iter_mut() {
        if let Some((s, e)) = shapes.get(name) {
            *shape = s.clone();
            *elem = *e;
        }
    }
    GraphIR::from_parts(parts)
}

type NodeShapes = (Vec<Option<TensorShape>>, Option<i32>);

fn infer_node(ctx: &Ctx<'_>) -> Result<NodeShapes> {
    let node = ctx.node;
    let one = |s: Option<Dims>| vec![s.map(TensorShape::new)];
    let same = || ctx.input(0).cloned();
    let out = match node.op_type.as_str() {
        "Identity" | "Relu" | "Softmax" => (vec![same()], None),
        "Dropout" => (vec![same(), same()], None),
        "Cast" => {
            let to = node.attr_int("to", 0) as i32;
            (vec![same()], Some(to))
        }
        "BatchNormalization" => {
            let stat = ctx
                .input(0)
                .and_then(|s| s.dims.get(1).copied())
                .map(|c| TensorShape::new(vec![c]));
            (
                vec![same(), stat.clone(), stat.clone(), stat.clone(), stat],
                None,
            )
        }
        "Conv" => (one(conv(ctx)?), None),
        "MaxPool" | "AveragePool" => {
            let s = pool(ctx)?.map(TensorShape::new);
            (vec![s.clone(), s], None)
        }
        "GlobalAveragePool" | "GlobalMaxPool" => (
            one(ctx.input(0).map(|s| {
                s.dims
                    .iter()
                    .enumerate()
                    .map(|(i, d)| if i < 2 { *d } else { Dim::Known(1) })
                    .collect()
            })),
            None,
        ),
        "Gemm" => (one(gemm(ctx)?), None),
        "MatMul" => (one(matmul(ctx)?), None),
        "Add" | "Mul" | "Sub" | "Div" => {
            let s = match (ctx.input(0), ctx.input(1)) {
                (Some(a), Some(b)) => Some(
                    broadcast(&a.dims, &b.dims)
                        .ok_or_else(|| ctx.err(format!("cannot broadcast {a} with {b}")))?,
                ),
                _ => None,
            };
            (one(s), None)
        }
        "Concat" => (one(concat(ctx)?), None),
        "ReduceMean" => (one(reduce(ctx)?), None),
        "Flatten" => (one(flatten(ctx)?), None),
        "Reshape" => (one(reshape(ctx)?), None),
        "Shape" => {
            let s = ctx.input(0).map(|s| {
                let rank = s.rank() as i64;
                let norm = |v: i64| {
                    if v < 0 {
                        (v + rank).max(0)
                    } else {
                        v.min(rank)
                    }
                };
                let start = norm(node.attr_int("start", 0));
                let end = norm(node.attr_int("end", rank));
                vec![Dim::Known((end - start).max(0) as u64)]
            });
            (one(s), Some(data_type::INT64))
        }
        "Constant" => constant(node),
        _ => (vec![None; node.outputs.len()], None),
    };
    Ok(out)
}

fn constant(node: &NodeSpec) -> NodeShapes {
    let (shape, elem) = match node.attributes.iter().next() {
        Some((_, AttributeValue::Tensor(t))) => (Some(t.shape.clone()), t.elem_type),
        Some((k, AttributeValue::Int(_))) if k == "value_int" => {
            (Some(TensorShape::scalar()), data_type::INT64)
        }
        Some((k, AttributeValue::Ints(v))) if k == "value_ints" => (
            Some(TensorShape::from_known(&[v.len() as u64])),
            data_type::INT64,
        ),
        Some((k, AttributeValue::Float(_))) if k == "value_float" => {
            (Some(TensorShape::scalar()), data_type::FLOAT)
        }
        Some((k, AttributeValue::Floats(v))) if k == "value_floats" => (
            Some(TensorShape::from_known(&[v.len() as u64])),
            data_type::FLOAT,
        ),
        _ => (None, 0),
    };
    (vec![shape], Some(elem))
}

pub(crate) struct WindowAttrs {
    pub kernel: Vec<u64>,
    pub strides: Vec<u64>,
    pub pads: Vec<u64>,
    pub dilations: Vec<u64>,
    pub auto_pad: String,
    pub ceil_mode: bool,
}

impl WindowAttrs {
    pub(crate) fn read(node: &NodeSpec, spatial: usize, kernel: Option<Vec<u64>>) -> Option<Self> {
        let ints = |name: &str, default: u64, len: usize| -> Option<Vec<u64>> {
            match node.attr_ints(name) {
                Some(v) if v.len() == len && v.iter().all(|&x| x >= 0) => {
                    Some(v.iter().map(|&x| x as u64).collect())
                }
                Some(_) => None,
                None => Some(vec![default; len]),
            }
        };
        let kernel = match node.attr_ints("kernel_shape") {
            Some(k) if k.len() == spatial && k.iter().all(|&x| x > 0) => {
                k.iter().map(|&x| x as u64).collect()
            }
            Some(_) => return None,
            None => kernel?,
        };
        Some(Self {
            kernel,
            strides: ints("strides", 1, spatial)?,
            pads: ints("pads", 0, 2 * spatial)?,
            dilations: ints("dilations", 1, spatial)?,
            auto_pad: node
                .attr("auto_pad")
                .and_then(|a| a.as_str())
                .unwrap_or("NOTSET")
                .to_string(),
            ceil_mode: node.attr_int("ceil_mode", 0) != 0,
        })
    }

    /// Padding actually applied on axis `i` for an input extent `input`.
    pub(crate) fn pads_for(&self, i: usize, input: u64) -> (u64, u64) {
        match self.auto_pad.as_str() {
            "VALID" => (0, 0),
            "SAME_UPPER" | "SAME_LOWER" => {
                let out = input.div_ceil(self.strides[i]);
                let effective = self.dilations[i] * (self.kernel[i] - 1) + 1;
                let total = ((out - 1) * self.strides[i] + effective).saturating_sub(input);
                let small = total / 2;
                if self.auto_pad == "SAME_UPPER" {
                    (small, total - small)
                } else {
                    (total - small, small)
                }
            }
            _ => (self.pads[i], self.pads[i + self.kernel.len()]),
        }
    }

    pub(crate) fn output_extent(&self, i: usize, input: u64) -> Option<u64> {
        let (b, e) = self.pads_for(i, input);
        conv_output_dim(
            input,
            self.kernel[i],
            self.strides[i],
            b,
            e,
            self.dilations[i],
            self.ceil_mode,
        )
    }
}

fn spatial_out(ctx: &Ctx<'_>, x: &TensorShape, attrs: &WindowAttrs) -> Result<Dims> {
    let mut dims = Vec::with_capacity(x.rank());
    for (i, d) in x.dims[2..].iter().enumerate() {
        dims.push(match d {
            Dim::Known(v) => {
                Dim::Known(attrs.output_extent(i, *v).ok_or_else(|| {
                    ctx.err(format!("window does not fit spatial axis {i} of {x}"))
                })?)
            }
            Dim::Unknown => Dim::Unknown,
        });
    }
    Ok(dims)
}

fn conv(ctx: &Ctx<'_>) -> Result<Option<Dims>> {
    let (Some(x), Some(w)) = (ctx.input(0), ctx.input(1)) else {
        return Ok(None);
    };
    if x.rank() < 3 || w.rank() != x.rank() {
        return Err(ctx.err(format!("input {x} and weight {w} ranks are incompatible")));
    }
    let group = ctx.node.attr_int("group", 1).max(1) as u64;
    if let (Dim::Known(c), Dim::Known(wc)) = (x.dims[1], w.dims[1]) {
        if wc * group != c {
            return Err(ctx.err(format!(
                "weight expects {} input channels, input has {c}",
                wc * group
            )));
        }
    }
    let spatial = x.rank() - 2;
    let kernel = w.known_dims().map(|d| d[2..].to_vec());
    let attrs = WindowAttrs::read(ctx.node, spatial, kernel)
        .ok_or_else(|| ctx.err("invalid kernel/stride/pad attributes"))?;
    let mut dims = vec![x.dims[0], w.dims[0]];
    dims.extend(spatial_out(ctx, x, &attrs)?);
    Ok(Some(dims))
}

fn pool(ctx: &Ctx<'_>) -> Result<Option<Dims>> {
    let Some(x) = ctx.input(0) else {
        return Ok(None);
    };
    if x.rank() < 3 {
        return Err(ctx.err(format!("pooling needs a rank >= 3 input, got {x}")));
    }
    let attrs = WindowAttrs::read(ctx.node, x.rank() - 2, None)
        .ok_or_else(|| ctx.err("missing or invalid kernel_shape"))?;
    let mut dims = vec![x.dims[0], x.dims[1]];
    dims.extend(spatial_out(ctx, x, &attrs)?);
    Ok(Some(dims))
}

fn dims_equal(a: Dim, b: Dim) -> Option<Dim> {
    match (a, b) {
        (Dim::Known(x), Dim::Known(y)) if x != y => None,
        (Dim::Known(x), _) | (_, Dim::Known(x)) => Some(Dim::Known(x)),
        _ => Some(Dim::Unknown),
    }
}

/// Multidirectional (numpy) broadcasting of two dim lists.
pub(crate) fn broadcast(a: &[Dim], b: &[Dim]) -> Option<Dims> {
    let rank = a.len().max(b.len());
    let at = |d: &[Dim], i: usize| -> Dim {
        let offset = rank - d.len();
        if i < offset {
            Dim::Known(1)
        } else {
            d[i - offset]
        }
    };
    (0..rank)
        .map(|i| match (at(a, i), at(b, i)) {
            (Dim::Known(1), d) | (d, Dim::Known(1)) => Some(d),
            (x, y) => dims_equal(x, y),
        })
        .collect()
}

fn gemm(ctx: &Ctx<'_>) -> Result<Option<Dims>> {
    let (Some(a), Some(b)) = (ctx.input(0), ctx.input(1)) else {
        return Ok(None);
    };
    if a.rank() != 2 || b.rank() != 2 {
        return Err(ctx.err(format!("Gemm operands must be 2-D, got {a} and {b}")));
    }
    let trans_a = ctx.node.attr_int("transA", 0) != 0;
    let trans_b = ctx.node.attr_int("transB", 0) != 0;
    let (m, ka) = if trans_a {
        (a.dims[1], a.dims[0])
    } else {
        (a.dims[0], a.dims[1])
    };
    let (kb, n) = if trans_b {
        (b.dims[1], b.dims[0])
    } else {
        (b.dims[0], b.dims[1])
    };
    if dims_equal(ka, kb).is_none() {
        return Err(ctx.err(format!("inner dimensions differ: {ka} vs {kb}")));
    }
    if let Some(c) = ctx.input(2) {
        let target = [m, n];
        let ok = c.rank() <= 2
            && broadcast(&c.dims, &target).is_some_and(|r| r.len() == 2 && dims_match(&r, &target));
        if !ok {
            return Err(ctx.err(format!("bias {c} does not broadcast to {m}x{n}")));
        }
    }
    Ok(Some(vec![m, n]))
}

fn dims_match(a: &[Dim], b: &[Dim]) -> bool {
    a.iter().zip(b).all(|(x, y)| match (x, y) {
        (Dim::Known(x), Dim::Known(y)) => x == y,
        _ => true,
    })
}

fn matmul(ctx: &Ctx<'_>) -> Result<Option<Dims>> {
    let (Some(a), Some(b)) = (ctx.input(0), ctx.input(1)) else {
        return Ok(None);
    };
    if a.rank() == 0 || b.rank() == 0 {
        return Err(ctx.err("MatMul operands must have rank >= 1"));
    }
    let mut ad = a.dims.clone();
    let mut bd = b.dims.clone();
    let a_vec = ad.len() == 1;
    let b_vec = bd.len() == 1;
    if a_vec {
        ad.insert(0, Dim::Known(1));
    }
    if b_vec {
        bd.push(Dim::Known(1));
    }
    let (ka, kb) = (ad[ad.len() - 1], bd[bd.len() - 2]);
    if dims_equal(ka, kb).is_none() {
        return Err(ctx.err(format!("inner dimensions differ: {ka} vs {kb}")));
    }
    let batch = broadcast(&ad[..ad.len() - 2], &bd[..bd.len() - 2])
        .ok_or_else(|| ctx.err(format!("batch dimensions of {a} and {b} do not broadcast")))?;
    let mut out = batch;
    if !a_vec {
        out.push(ad[ad.len() - 2]);
    }
    if !b_vec {
        out.push(bd[bd.len() - 1]);
    }
    Ok(Some(out))
}

fn normalize_axis(ctx: &Ctx<'_>, axis: i64, rank: usize) -> Result<usize> {
    let r = rank as i64;
    let a = if axis < 0 { axis + r } else { axis };
    if a < 0 || a >= r.max(1) {
        return Err(ctx.err(format!("axis {axis} out of range for rank {rank}")));
    }
    Ok(a as usize)
}

fn concat(ctx: &Ctx<'_>) -> Result<Option<Dims>> {
    let names: Vec<usize> = (0..ctx.node.inputs.len())
        .filter(|&i| ctx.has_input(i))
        .collect();
    let mut shapes = Vec::new();
    for i in names {
        match ctx.input(i) {
            Some(s) => shapes.push(s),
            None => return Ok(None),
        }
    }
    let Some(first) = shapes.first() else {
        return Ok(None);
    };
    let axis = normalize_axis(ctx, ctx.node.attr_int("axis", 0), first.rank())?;
    let mut out = first.dims.clone();
    for s in &shapes[1..] {
        if s.rank() != first.rank() {
            return Err(ctx.err(format!("rank mismatch between {first} and {s}")));
        }
        for (i, d) in s.dims.iter().enumerate() {
            if i == axis {
                out[i] = match (out[i], *d) {
                    (Dim::Known(x), Dim::Known(y)) => Dim::Known(x + y),
                    _ => Dim::Unknown,
                };
            } else {
                out[i] = dims_equal(out[i], *d)
                    .ok_or_else(|| ctx.err(format!("dimension {i} differs: {first} vs {s}")))?;
            }
        }
    }
    Ok(Some(out))
}

pub(crate) fn reduce_axes(
    node: &NodeSpec,
    rank: usize,
    axes_input: Option<&[i64]>,
) -> Option<Vec<usize>> {
    let raw: Vec<i64> = match (node.attr_ints("axes"), axes_input) {
        (Some(a), _) => a.to_vec(),
        (None, Some(a)) => a.to_vec(),
        (None, None) if node.inputs.get(1).is_some_and(|n| !n.is_empty()) => return None,
        (None, None) => Vec::new(),
    };
    if raw.is_empty() {
        if node.attr_int("noop_with_empty_axes", 0) != 0 {
            return Some(Vec::new());
        }
        return Some((0..rank).collect());
    }
    let r = rank as i64;
    let mut axes: Vec<usize> = raw
        .iter()
        .map(|&a| if a < 0 { a + r } else { a })
        .filter(|&a| (0..r).contains(&a))
        .map(|a| a as usize)
        .collect();
    axes.sort_unstable();
    axes.dedup();
    (axes.len() == raw.len()).then_some(axes)
}

fn reduce(ctx: &Ctx<'_>) -> Result<Option<Dims>> {
    let Some(x) = ctx.input(0) else {
        return Ok(None);
    };
    let keep = ctx.node.attr_int("keepdims", 1) != 0;
    let Some(axes) = reduce_axes(ctx.node, x.rank(), ctx.const_i64(1)) else {
        if ctx.node.attr_ints("axes").is_some() {
            return Err(ctx.err(format!("axes out of range for {x}")));
        }
        return Ok(keep.then(|| vec![Dim::Unknown; x.rank()]));
    };
    let mut out = Vec::new();
    for (i, d) in x.dims.iter().enumerate() {
        if axes.contains(&i) {
            if keep {
                out.push(Dim::Known(1));
            }
        } else {
            out.push(*d);
        }
    }
    Ok(Some(out))
}

fn product(dims: &[Dim]) -> Dim {
    dims.iter()
        .try_fold(1u64, |acc, d| d.known().map(|v| acc * v))
        .map_or(Dim::Unknown, Dim::Known)
}

fn flatten(ctx: &Ctx<'_>) -> Result<Option<Dims>> {
    let Some(x) = ctx.input(0) else {
        return Ok(None);
    };
    let r = x.rank() as i64;
    let axis = ctx.node.attr_int("axis", 1);
    let axis = if axis < 0 { axis + r } else { axis };
    if !(0..=r).contains(&axis) {
        return Err(ctx.err(format!("axis {axis} out of range for {x}")));
    }
    let (head, tail) = x.dims.split_at(axis as usize);
    Ok(Some(vec![product(head), product(tail)]))
}

fn reshape(ctx: &Ctx<'_>) -> Result<Option<Dims>> {
    let Some(target) = ctx.const_i64(1) else {
        let rank = ctx
            .input(1)
            .and_then(|s| s.known_dims())
            .filter(|d| d.len() == 1);
        return Ok(rank.map(|d| vec![Dim::Unknown; d[0] as usize]));
    };
    let Some(x) = ctx.input(0) else {
        return Ok(Some(
            target
                .iter()
                .map(|&t| {
                    if t > 0 {
                        Dim::Known(t as u64)
                    } else {
                        Dim::Unknown
                    }
                })
                .collect(),
        ));
    };
    let allow_zero = ctx.node.attr_int("allowzero", 0) != 0;
    let mut out = Vec::with_capacity(target.len());
    let mut infer_at = None;
    for (i, &t) in target.iter().enumerate() {
        out.push(match t {
            -1 => {
                if infer_at.replace(i).is_some() {
                    return Err(ctx.err("more than one -1 in reshape target"));
                }
                Dim::Unknown
            }
            0 if !allow_zero => *x
                .dims
                .get(i)
                .ok_or_else(|| ctx.err(format!("target copies missing dimension {i} of {x}")))?,
            t if t < 0 => return Err(ctx.err(format!("invalid reshape target entry {t}"))),
            t => Dim::Known(t as u64),
        });
    }
    if let Some(pos) = infer_at {
        let total = x.numel();
        let rest: Option<u64> = out
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != pos)
            .try_fold(1u64, |acc, (_, d)| d.known().map(|v| acc * v));
        if let (Some(total), Some(rest)) = (total, rest) {
            if rest == 0 || total % rest != 0 {
                return Err(ctx.err(format!("cannot reshape {x} to {target:?}")));
            }
            out[pos] = Dim::Known(total / rest);
        }
    } else if let (Some(total), Some(new)) = (x.numel(), TensorShape::new(out.clone()).numel()) {
        if total != new {
            return Err(ctx.err(format!("cannot reshape {x} to {target:?}")));
        }
    }
    Ok(Some(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_ir::GraphBuilder;

    fn ints(v: &[i64]) -> AttributeValue {
        AttributeValue::Ints(v.to_vec())
    }

    #[test]
    fn conv_same_padding_keeps_extent() {
        let mut b = GraphBuilder::new(13);
        let x = b.input("x", &[1, 3, 32, 32]);
        let w = b.param("w", &[128, 3, 3, 3]);
        let bias = b.param("b", &[128]);
        let y = b.op_with(
            "Conv",
            &[&x, &w, &bias],
            [
                ("dilations", ints(&[1, 1])),
                ("kernel_shape", ints(&[3, 3])),
                ("pads", ints(&[1, 1, 1, 1])),
                ("strides", ints(&[1, 1])),
            ],
        );
        b.output(&y);
        let g = infer_shapes(&b.build().unwrap()).unwrap();
        assert_eq!(g.shape_of(&y).unwrap().to_string(), "1x128x32x32");
    }

    #[test]
    fn maxpool_halves() {
        let mut b = GraphBuilder::new(13);
        let x = b.input("x", &[1, 128, 32, 32]);
        let y = b.op_with(
            "MaxPool",
            &[&x],
            [
                ("kernel_shape", ints(&[2, 2])),
                ("pads", ints(&[0, 0, 0, 0])),
                ("strides", ints(&[2, 2])),
            ],
        );
        b.output(&y);
        let g = infer_shapes(&b.build().unwrap()).unwrap();
        assert_eq!(g.shape_of(&y).unwrap().to_string(), "1x128x16x16");
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut b = GraphBuilder::new(13);
        let x = b.input("x", &[1, 4, 8, 8]);
        let w = b.param("w", &[8, 3, 3, 3]);
        let y = b.op("Conv", &[&x, &w]);
        b.output(&y);
        let err = infer_shapes(&b.build().unwrap()).unwrap_err();
        assert!(
            matches!(err, Error::ShapeMismatch { node: 0, .. }),
            "{err:?}"
        );
    }

    #[test]
    fn unsupported_op_is_unknown() {
        let mut b = GraphBuilder::new(13);
        let x = b.input("x", &[1, 4]);
        let y = b.op("Sigmoid", &[&x]);
        let z = b.op("Relu", &[&y]);
        b.output(&z);
        let g = infer_shapes(&b.build().unwrap()).unwrap();
        assert!(g.shape_of(&y).is_none());
        assert!(g.shape_of(&z).is_none());
    }

    #[test]
    fn unknown_dims_propagate() {
        let mut b = GraphBuilder::new(13);
        let x = b.input_decl(crate::graph_ir::ValueDecl::new(
            "x",
            Some(TensorShape::new(vec![
                Dim::Unknown,
                Dim::Known(3),
                Dim::Known(8),
                Dim::Known(8),
            ])),
            1,
        ));
        let w = b.param("w", &[4, 3, 3, 3]);
        let y = b.op_with("Conv", &[&x, &w], [("pads", ints(&[1, 1, 1, 1]))]);
        let f = b.op("Flatten", &[&y]);
        b.output(&f);
        let g = infer_shapes(&b.build().unwrap()).unwrap();
        assert_eq!(g.shape_of(&y).unwrap().to_string(), "?x4x8x8");
        assert_eq!(g.shape_of(&f).unwrap().to_string(), "?x256");
    }

    #[test]
    fn gemm_reduce_reshape_concat() {
        let mut b = GraphBuilder::new(13);
        let x = b.input("x", &[1, 512, 8, 8]);
        let r = b.op_with(
            "ReduceMean",
            &[&x],
            [
                ("axes", ints(&[2, 3])),
                ("keepdims", AttributeValue::Int(0)),
            ],
        );
        let w = b.param("w", &[10, 512]);
        let bias = b.param("b", &[10]);
        let y = b.op_with(
            "Gemm",
            &[&r, &w, &bias],
            [("transB", AttributeValue::Int(1))],
        );
        let target = b.param_i64("t", &[2], vec![0, -1]);
        let c = b.op_with("Concat", &[&x, &x], [("axis", AttributeValue::Int(1))]);
        let rs = b.op("Reshape", &[&c, &target]);
        b.output(&y);
        b.output(&rs);
        let g = infer_shapes(&b.build().unwrap()).unwrap();
        assert_eq!(g.shape_of(&r).unwrap().to_string(), "1x512");
        assert_eq!(g.shape_of(&y).unwrap().to_string(), "1x10");
        assert_eq!(g.shape_of(&c).unwrap().to_string(), "1x1024x8x8");
        assert_eq!(g.shape_of(&rs).unwrap().to_string(), "1x65536");
    }

    #[test]
    fn matmul_broadcasting() {
        let mut b = GraphBuilder::new(13);
        let x = b.input("x", &[2, 1, 5, 7]);
        let w = b.param("w", &[3, 7, 4]);
        let y = b.op("MatMul", &[&x, &w]);
        let v = b.param("v", &[4]);
        let z = b.op("MatMul", &[&y, &v]);
        b.output(&z);
        let g = infer_shapes(&b.build().unwrap()).unwrap();
        assert_eq!(g.shape_of(&y).unwrap().to_string(), "2x3x5x4");
        assert_eq!(g.shape_of(&z).unwrap().to_string(), "2x3x5");
    }

    #[test]
    fn identity_passthrough() {
        let mut b = GraphBuilder::new(13);
        let x = b.input("x", &[2, 7, 3]);
        let y = b.op("Identity", &[&x]);
        b.output(&y);
        let g = infer_shapes(&b.build().unwrap()).unwrap();
        assert_eq!(g.shape_of(&y), g.shape_of(&x));
    }
}
