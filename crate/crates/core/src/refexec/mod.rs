//! A small, slow reference interpreter for a fixed operator subset. It exists
//! to check that graph rewrites do not change what a network computes.
//!
//! Arithmetic accumulates in `f64` and rounds to `f32` at operator
//! boundaries.

mod random;

use std::collections::BTreeMap;

pub use random::{inject_identities, random_inputs, random_instance, RandomInstance, RandomSpec};

use crate::error::{Error, Result};
use crate::graph_ir::{
    reduce_axes, GraphIR, NodeId, NodeSpec, TensorData, TensorShape, ValueRole, WindowAttrs,
};

/// Operators [`execute`] understands.
pub const SUPPORTED_OPS: [&str; 18] = [
    "Conv",
    "Relu",
    "MaxPool",
    "AveragePool",
    "GlobalAveragePool",
    "Gemm",
    "MatMul",
    "Add",
    "Mul",
    "Concat",
    "ReduceMean",
    "Identity",
    "Flatten",
    "Reshape",
    "Softmax",
    "BatchNormalization",
    "Dropout",
    "Cast",
];

/// Row-major float tensor with fully known dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl DenseTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor of shape {dims:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn scalar(v: f32) -> Self {
        Self {
            dims: vec![],
            data: vec![v],
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            dims: dims.to_vec(),
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn shape(&self) -> TensorShape {
        TensorShape::from_known(&self.dims.iter().map(|&d| d as u64).collect::<Vec<_>>())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }
}

/// Elementwise `|a - b| <= abs_tol + rel_tol * |b|`, with equal shapes.
pub fn all_close(a: &DenseTensor, b: &DenseTensor, rel_tol: f64, abs_tol: f64) -> bool {
    a.dims == b.dims
        && a.data.iter().zip(&b.data).all(|(&x, &y)| {
            let (x, y) = (x as f64, y as f64);
            (x - y).abs() <= abs_tol + rel_tol * y.abs() || (x.is_nan() && y.is_nan())
        })
}

type Env = BTreeMap<String, DenseTensor>;

/// Runs `g` and returns its graph outputs. Parameters missing from `params`
/// fall back to the payload stored in the graph.
pub fn execute(g: &GraphIR, inputs: &Env, params: &Env) -> Result<Env> {
    let mut env: Env = BTreeMap::new();
    for name in g.graph_inputs() {
        let t = inputs
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.clone()))?;
        env.insert(name.clone(), t.clone());
    }
    for v in g.values().filter(|v| v.role == ValueRole::Parameter) {
        if let Some(t) = params.get(&v.name) {
            env.insert(v.name.clone(), t.clone());
        } else if let Some(t) = stored_tensor(v.shape.as_ref(), v.data.as_ref()) {
            env.insert(v.name.clone(), t);
        }
    }
    for &id in g.order() {
        let node = g.node(id).expect("ordered node exists");
        let args = node
            .inputs
            .iter()
            .map(|name| {
                if name.is_empty() {
                    Ok(None)
                } else {
                    env.get(name)
                        .map(Some)
                        .ok_or_else(|| Error::MissingTensor(name.clone()))
                }
            })
            .collect::<Result<Vec<Option<&DenseTensor>>>>()?;
        let outputs = run_node(g, node, &args)?;
        for (name, t) in node.outputs.iter().zip(outputs) {
            if !name.is_empty() {
                env.insert(name.clone(), t);
            }
        }
    }
    g.graph_outputs()
        .iter()
        .map(|name| {
            env.get(name)
                .cloned()
                .map(|t| (name.clone(), t))
                .ok_or_else(|| Error::MissingTensor(name.clone()))
        })
        .collect()
}

fn stored_tensor(shape: Option<&TensorShape>, data: Option<&TensorData>) -> Option<DenseTensor> {
    let dims: Vec<usize> = shape?
        .known_dims()?
        .into_iter()
        .map(|d| d as usize)
        .collect();
    let values: Vec<f32> = match data? {
        TensorData::F32(v) => v.to_vec(),
        TensorData::I64(v) => v.iter().map(|&x| x as f32).collect(),
        TensorData::Raw(_) => return None,
    };
    DenseTensor::new(dims, values).ok()
}

struct Op<'a> {
    id: NodeId,
    node: &'a NodeSpec,
    opset: i64,
}

impl Op<'_> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::shape(self.id, &self.node.op_type, reason)
    }
}

fn run_node(
    g: &GraphIR,
    node: &NodeSpec,
    args: &[Option<&DenseTensor>],
) -> Result<Vec<DenseTensor>> {
    let op = Op {
        id: node.id,
        node,
        opset: g.opset(),
    };
    let arg = |i: usize| -> Result<&DenseTensor> {
        args.get(i)
            .copied()
            .flatten()
            .ok_or_else(|| op.err(format!("missing input {i}")))
    };
    let out = match node.op_type.as_str() {
        "Identity" => arg(0)?.clone(),
        "Dropout" => {
            let x = arg(0)?.clone();
            let mask = DenseTensor {
                dims: x.dims.clone(),
                data: vec![1.0; x.numel()],
            };
            return Ok(vec![x, mask]);
        }
        "Cast" => cast(&op, arg(0)?),
        "Relu" => map(arg(0)?, |v| v.max(0.0)),
        "Add" => binary(&op, arg(0)?, arg(1)?, |a, b| a + b)?,
        "Mul" => binary(&op, arg(0)?, arg(1)?, |a, b| a * b)?,
        "Conv" => conv(&op, arg(0)?, arg(1)?, args.get(2).copied().flatten())?,
        "MaxPool" => pool(&op, arg(0)?, true)?,
        "AveragePool" => pool(&op, arg(0)?, false)?,
        "GlobalAveragePool" => global_average(&op, arg(0)?)?,
        "Gemm" => gemm(&op, arg(0)?, arg(1)?, args.get(2).copied().flatten())?,
        "MatMul" => matmul(&op, arg(0)?, arg(1)?)?,
        "Concat" => {
            let parts: Vec<&DenseTensor> = args.iter().flatten().copied().collect();
            concat(&op, &parts)?
        }
        "ReduceMean" => reduce_mean(&op, arg(0)?, args.get(1).copied().flatten())?,
        "Flatten" => flatten(&op, arg(0)?)?,
        "Reshape" => reshape(&op, arg(0)?, arg(1)?)?,
        "Softmax" => softmax(&op, arg(0)?)?,
        "BatchNormalization" => batch_norm(&op, arg(0)?, &[arg(1)?, arg(2)?, arg(3)?, arg(4)?])?,
        other => return Err(Error::UnsupportedOp(other.to_string())),
    };
    Ok(vec![out])
}

fn map(x: &DenseTensor, f: impl Fn(f32) -> f32) -> DenseTensor {
    DenseTensor {
        dims: x.dims.clone(),
        data: x.data.iter().map(|&v| f(v)).collect(),
    }
}

fn cast(op: &Op<'_>, x: &DenseTensor) -> DenseTensor {
    use crate::onnx_proto::data_type::*;
    match op.node.attr_int("to", FLOAT as i64) as i32 {
        FLOAT | DOUBLE | FLOAT16 => x.clone(),
        BOOL => map(x, |v| if v != 0.0 { 1.0 } else { 0.0 }),
        _ => map(x, f32::trunc),
    }
}

fn row_major_strides(dims: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * dims[i + 1];
    }
    strides
}

fn broadcast_dims(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let at = |d: &[usize], i: usize| {
        if i < rank - d.len() {
            1
        } else {
            d[i - (rank - d.len())]
        }
    };
    (0..rank)
        .map(|i| match (at(a, i), at(b, i)) {
            (x, y) if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Strides that read `dims` as if broadcast to `out` (0 on broadcast axes).
fn broadcast_strides(dims: &[usize], out: &[usize]) -> Vec<usize> {
    let own = row_major_strides(dims);
    let offset = out.len() - dims.len();
    (0..out.len())
        .map(|i| {
            if i < offset || dims[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

fn binary(
    op: &Op<'_>,
    a: &DenseTensor,
    b: &DenseTensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<DenseTensor> {
    let dims = broadcast_dims(&a.dims, &b.dims)
        .ok_or_else(|| op.err(format!("cannot broadcast {:?} with {:?}", a.dims, b.dims)))?;
    let (sa, sb) = (
        broadcast_strides(&a.dims, &dims),
        broadcast_strides(&b.dims, &dims),
    );
    let numel: usize = dims.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut index = vec![0usize; dims.len()];
    for _ in 0..numel {
        let ia: usize = index.iter().zip(&sa).map(|(i, s)| i * s).sum();
        let ib: usize = index.iter().zip(&sb).map(|(i, s)| i * s).sum();
        data.push(f(a.data[ia] as f64, b.data[ib] as f64) as f32);
        for axis in (0..dims.len()).rev() {
            index[axis] += 1;
            if index[axis] < dims[axis] {
                break;
            }
            index[axis] = 0;
        }
    }
    Ok(DenseTensor { dims, data })
}

fn window(
    op: &Op<'_>,
    x: &DenseTensor,
    kernel: Option<Vec<u64>>,
) -> Result<(WindowAttrs, Vec<usize>)> {
    if x.rank() < 3 {
        return Err(op.err(format!(
            "expected a batched spatial input, got {:?}",
            x.dims
        )));
    }
    let spatial = x.rank() - 2;
    let attrs = WindowAttrs::read(op.node, spatial, kernel)
        .ok_or_else(|| op.err("invalid window attributes"))?;
    let out = (0..spatial)
        .map(|i| {
            attrs
                .output_extent(i, x.dims[i + 2] as u64)
                .map(|d| d as usize)
                .ok_or_else(|| op.err(format!("window does not fit axis {i}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((attrs, out))
}

/// Calls `f(input_offset_within_channel, in_bounds)` for each kernel tap of
/// output position `pos`.
fn for_each_tap(
    attrs: &WindowAttrs,
    in_spatial: &[usize],
    pos: &[usize],
    mut f: impl FnMut(Option<usize>),
) {
    let spatial = in_spatial.len();
    let pads: Vec<usize> = (0..spatial)
        .map(|i| attrs.pads_for(i, in_spatial[i] as u64).0 as usize)
        .collect();
    let strides = row_major_strides(in_spatial);
    let taps: usize = attrs.kernel.iter().map(|&k| k as usize).product();
    let mut k = vec![0usize; spatial];
    for _ in 0..taps {
        let mut offset = Some(0usize);
        for i in 0..spatial {
            let at = (pos[i] * attrs.strides[i] as usize + k[i] * attrs.dilations[i] as usize)
                .checked_sub(pads[i])
                .filter(|&p| p < in_spatial[i]);
            offset = match (offset, at) {
                (Some(o), Some(p)) => Some(o + p * strides[i]),
                _ => None,
            };
        }
        f(offset);
        for axis in (0..spatial).rev() {
            k[axis] += 1;
            if k[axis] < attrs.kernel[axis] as usize {
                break;
            }
            k[axis] = 0;
        }
    }
}

fn unravel(mut flat: usize, dims: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; dims.len()];
    for axis in (0..dims.len()).rev() {
        idx[axis] = flat % dims[axis];
        flat /= dims[axis];
    }
    idx
}

fn conv(
    op: &Op<'_>,
    x: &DenseTensor,
    w: &DenseTensor,
    b: Option<&DenseTensor>,
) -> Result<DenseTensor> {
    if w.rank() != x.rank() {
        return Err(op.err("weight rank differs from input rank"));
    }
    let kernel = w.dims[2..].iter().map(|&d| d as u64).collect();
    let (attrs, out_spatial) = window(op, x, Some(kernel))?;
    if attrs
        .kernel
        .iter()
        .zip(&w.dims[2..])
        .any(|(&k, &d)| k as usize != d)
    {
        return Err(op.err("kernel_shape disagrees with the weight"));
    }
    let group = op.node.attr_int("group", 1).max(1) as usize;
    let (n, c) = (x.dims[0], x.dims[1]);
    let m = w.dims[0];
    let c_per_group = w.dims[1];
    if c_per_group * group != c || !m.is_multiple_of(group) {
        return Err(op.err(format!(
            "{c} input channels do not match weight {:?} with group {group}",
            w.dims
        )));
    }
    if b.is_some_and(|b| b.numel() != m) {
        return Err(op.err("bias length differs from output channels"));
    }
    let in_spatial = &x.dims[2..];
    let in_plane: usize = in_spatial.iter().product();
    let out_plane: usize = out_spatial.iter().product();
    let taps: usize = attrs.kernel.iter().map(|&k| k as usize).product();
    let m_per_group = m / group;
    let mut data = vec![0f32; n * m * out_plane];
    for batch in 0..n {
        for oc in 0..m {
            let gi = oc / m_per_group;
            for p in 0..out_plane {
                let pos = unravel(p, &out_spatial);
                let mut acc = b.map_or(0.0, |b| b.data[oc] as f64);
                for icg in 0..c_per_group {
                    let ic = gi * c_per_group + icg;
                    let plane = &x.data[(batch * c + ic) * in_plane..][..in_plane];
                    let kern = &w.data[(oc * c_per_group + icg) * taps..][..taps];
                    let mut t = 0;
                    for_each_tap(&attrs, in_spatial, &pos, |at| {
                        if let Some(at) = at {
                            acc += plane[at] as f64 * kern[t] as f64;
                        }
                        t += 1;
                    });
                }
                data[(batch * m + oc) * out_plane + p] = acc as f32;
            }
        }
    }
    let mut dims = vec![n, m];
    dims.extend(out_spatial);
    Ok(DenseTensor { dims, data })
}

fn pool(op: &Op<'_>, x: &DenseTensor, max: bool) -> Result<DenseTensor> {
    let (attrs, out_spatial) = window(op, x, None)?;
    let include_pad = op.node.attr_int("count_include_pad", 0) != 0;
    let channels = x.dims[0] * x.dims[1];
    let in_spatial = &x.dims[2..];
    let in_plane: usize = in_spatial.iter().product();
    let out_plane: usize = out_spatial.iter().product();
    let taps = attrs.kernel.iter().product::<u64>() as f64;
    let mut data = Vec::with_capacity(channels * out_plane);
    for ch in 0..channels {
        let plane = &x.data[ch * in_plane..][..in_plane];
        for p in 0..out_plane {
            let pos = unravel(p, &out_spatial);
            let (mut best, mut sum, mut count) = (f64::NEG_INFINITY, 0.0, 0usize);
            for_each_tap(&attrs, in_spatial, &pos, |at| {
                if let Some(at) = at {
                    best = best.max(plane[at] as f64);
                    sum += plane[at] as f64;
                    count += 1;
                }
            });
            let v = if max {
                best
            } else if include_pad {
                sum / taps
            } else {
                sum / count.max(1) as f64
            };
            data.push(v as f32);
        }
    }
    let mut dims = x.dims[..2].to_vec();
    dims.extend(out_spatial);
    Ok(DenseTensor { dims, data })
}

fn global_average(op: &Op<'_>, x: &DenseTensor) -> Result<DenseTensor> {
    if x.rank() < 3 {
        return Err(op.err("expected a batched spatial input"));
    }
    let plane: usize = x.dims[2..].iter().product();
    let data = x
        .data
        .chunks(plane.max(1))
        .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
        .collect();
    let mut dims = x.dims[..2].to_vec();
    dims.extend(std::iter::repeat_n(1, x.rank() - 2));
    Ok(DenseTensor { dims, data })
}

fn gemm(
    op: &Op<'_>,
    a: &DenseTensor,
    b: &DenseTensor,
    c: Option<&DenseTensor>,
) -> Result<DenseTensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(op.err("Gemm needs 2-D operands"));
    }
    let trans_a = op.node.attr_int("transA", 0) != 0;
    let trans_b = op.node.attr_int("transB", 0) != 0;
    let alpha = op
        .node
        .attr("alpha")
        .and_then(|v| v.as_float())
        .unwrap_or(1.0) as f64;
    let beta = op
        .node
        .attr("beta")
        .and_then(|v| v.as_float())
        .unwrap_or(1.0) as f64;
    let (m, k) = if trans_a {
        (a.dims[1], a.dims[0])
    } else {
        (a.dims[0], a.dims[1])
    };
    let (kb, n) = if trans_b {
        (b.dims[1], b.dims[0])
    } else {
        (b.dims[0], b.dims[1])
    };
    if k != kb {
        return Err(op.err(format!("inner dimensions {k} and {kb} differ")));
    }
    let a_at = |i: usize, j: usize| {
        if trans_a {
            a.data[j * m + i]
        } else {
            a.data[i * k + j]
        }
    };
    let b_at = |i: usize, j: usize| {
        if trans_b {
            b.data[j * k + i]
        } else {
            b.data[i * n + j]
        }
    };
    let c_strides = match c {
        Some(c) => {
            if broadcast_dims(&c.dims, &[m, n]).as_deref() != Some(&[m, n][..]) {
                return Err(op.err(format!(
                    "bias {:?} does not broadcast to [{m}, {n}]",
                    c.dims
                )));
            }
            Some(broadcast_strides(&c.dims, &[m, n]))
        }
        None => None,
    };
    let mut data = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0f64;
            for t in 0..k {
                acc += a_at(i, t) as f64 * b_at(t, j) as f64;
            }
            let mut v = alpha * acc;
            if let (Some(c), Some(s)) = (c, &c_strides) {
                v += beta * c.data[i * s[0] + j * s[1]] as f64;
            }
            data.push(v as f32);
        }
    }
    Ok(DenseTensor {
        dims: vec![m, n],
        data,
    })
}

fn matmul(op: &Op<'_>, a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    if a.rank() == 0 || b.rank() == 0 {
        return Err(op.err("MatMul operands must have rank >= 1"));
    }
    let a_dims = if a.rank() == 1 {
        vec![1, a.dims[0]]
    } else {
        a.dims.clone()
    };
    let b_dims = if b.rank() == 1 {
        vec![b.dims[0], 1]
    } else {
        b.dims.clone()
    };
    let (m, k) = (a_dims[a_dims.len() - 2], a_dims[a_dims.len() - 1]);
    let (kb, n) = (b_dims[b_dims.len() - 2], b_dims[b_dims.len() - 1]);
    if k != kb {
        return Err(op.err(format!("inner dimensions {k} and {kb} differ")));
    }
    let batch_a = &a_dims[..a_dims.len() - 2];
    let batch_b = &b_dims[..b_dims.len() - 2];
    let batch = broadcast_dims(batch_a, batch_b)
        .ok_or_else(|| op.err("batch dimensions do not broadcast"))?;
    let (sa, sb) = (
        broadcast_strides(batch_a, &batch),
        broadcast_strides(batch_b, &batch),
    );
    let batches: usize = batch.iter().product();
    let mut data = Vec::with_capacity(batches * m * n);
    for bi in 0..batches {
        let idx = unravel(bi, &batch);
        let oa = idx.iter().zip(&sa).map(|(i, s)| i * s).sum::<usize>() * m * k;
        let ob = idx.iter().zip(&sb).map(|(i, s)| i * s).sum::<usize>() * k * n;
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0f64;
                for t in 0..k {
                    acc += a.data[oa + i * k + t] as f64 * b.data[ob + t * n + j] as f64;
                }
                data.push(acc as f32);
            }
        }
    }
    let mut dims = batch;
    if a.rank() > 1 {
        dims.push(m);
    }
    if b.rank() > 1 {
        dims.push(n);
    }
    Ok(DenseTensor { dims, data })
}

fn normalize_axis(op: &Op<'_>, axis: i64, rank: usize) -> Result<usize> {
    let r = rank as i64;
    let a = if axis < 0 { axis + r } else { axis };
    if (0..r).contains(&a) {
        Ok(a as usize)
    } else {
        Err(op.err(format!("axis {axis} out of range for rank {rank}")))
    }
}

fn concat(op: &Op<'_>, parts: &[&DenseTensor]) -> Result<DenseTensor> {
    let first = parts.first().ok_or_else(|| op.err("no inputs"))?;
    let axis = normalize_axis(op, op.node.attr_int("axis", 0), first.rank())?;
    for p in parts {
        let compatible = p.rank() == first.rank()
            && (0..first.rank()).all(|i| i == axis || p.dims[i] == first.dims[i]);
        if !compatible {
            return Err(op.err(format!(
                "cannot concatenate {:?} with {:?}",
                first.dims, p.dims
            )));
        }
    }
    let outer: usize = first.dims[..axis].iter().product();
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
    for o in 0..outer {
        for p in parts {
            let chunk: usize = p.dims[axis..].iter().product();
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut dims = first.dims.clone();
    dims[axis] = parts.iter().map(|p| p.dims[axis]).sum();
    Ok(DenseTensor { dims, data })
}

fn reduce_mean(op: &Op<'_>, x: &DenseTensor, axes: Option<&DenseTensor>) -> Result<DenseTensor> {
    let axes_input: Option<Vec<i64>> = axes.map(|t| t.data.iter().map(|&v| v as i64).collect());
    let axes = reduce_axes(op.node, x.rank(), axes_input.as_deref())
        .ok_or_else(|| op.err("invalid axes"))?;
    let keep = op.node.attr_int("keepdims", 1) != 0;
    let reduced: Vec<usize> = x
        .dims
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect();
    let numel: usize = reduced.iter().product();
    let mut sums = vec![0f64; numel];
    let out_strides = broadcast_strides(&reduced, &x.dims);
    for (flat, &v) in x.data.iter().enumerate() {
        let idx = unravel(flat, &x.dims);
        let o: usize = idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        sums[o] += v as f64;
    }
    let count: usize = axes.iter().map(|&a| x.dims[a]).product();
    let data = sums
        .iter()
        .map(|s| (s / count.max(1) as f64) as f32)
        .collect();
    let dims = if keep {
        reduced
    } else {
        x.dims
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect()
    };
    Ok(DenseTensor { dims, data })
}

fn flatten(op: &Op<'_>, x: &DenseTensor) -> Result<DenseTensor> {
    let r = x.rank() as i64;
    let axis = op.node.attr_int("axis", 1);
    let axis = if axis < 0 { axis + r } else { axis };
    if !(0..=r).contains(&axis) {
        return Err(op.err(format!("axis {axis} out of range")));
    }
    let head: usize = x.dims[..axis as usize].iter().product();
    Ok(DenseTensor {
        dims: vec![head, x.numel() / head.max(1)],
        data: x.data.clone(),
    })
}

fn reshape(op: &Op<'_>, x: &DenseTensor, target: &DenseTensor) -> Result<DenseTensor> {
    let allow_zero = op.node.attr_int("allowzero", 0) != 0;
    let mut dims = Vec::with_capacity(target.numel());
    let mut infer = None;
    for (i, &t) in target.data.iter().enumerate() {
        match t as i64 {
            -1 if infer.is_none() => {
                infer = Some(i);
                dims.push(1);
            }
            0 if !allow_zero => dims.push(
                *x.dims
                    .get(i)
                    .ok_or_else(|| op.err("0 refers past the input rank"))?,
            ),
            d if d >= 0 => dims.push(d as usize),
            d => return Err(op.err(format!("invalid target dimension {d}"))),
        }
    }
    let known: usize = dims.iter().product();
    if let Some(i) = infer {
        if known == 0 || !x.numel().is_multiple_of(known) {
            return Err(op.err("cannot infer the -1 dimension"));
        }
        dims[i] = x.numel() / known;
    }
    if dims.iter().product::<usize>() != x.numel() {
        return Err(op.err(format!("cannot reshape {:?} to {dims:?}", x.dims)));
    }
    Ok(DenseTensor {
        dims,
        data: x.data.clone(),
    })
}

fn softmax(op: &Op<'_>, x: &DenseTensor) -> Result<DenseTensor> {
    let rank = x.rank().max(1);
    // opset < 13 treats the input as 2-D [outer, rest] split at `axis`
    let legacy = op.opset < 13;
    let axis = normalize_axis(
        op,
        op.node.attr_int("axis", if legacy { 1 } else { -1 }),
        rank,
    )?;
    let (outer, len, inner) = if legacy {
        (
            x.dims[..axis].iter().product(),
            x.dims[axis..].iter().product(),
            1,
        )
    } else {
        (
            x.dims[..axis].iter().product::<usize>(),
            x.dims.get(axis).copied().unwrap_or(1),
            x.dims[axis + 1..].iter().product::<usize>(),
        )
    };
    let mut data = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len)
                .map(|j| x.data[at(j)] as f64)
                .fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = (0..len)
                .map(|j| (x.data[at(j)] as f64 - max).exp())
                .collect();
            let total: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                data[at(j)] = (e / total) as f32;
            }
        }
    }
    Ok(DenseTensor {
        dims: x.dims.clone(),
        data,
    })
}

fn batch_norm(op: &Op<'_>, x: &DenseTensor, stats: &[&DenseTensor; 4]) -> Result<DenseTensor> {
    if x.rank() < 2 {
        return Err(op.err("expected an input with a channel axis"));
    }
    let c = x.dims[1];
    if stats.iter().any(|s| s.numel() != c) {
        return Err(op.err("statistics length differs from the channel count"));
    }
    let eps = op
        .node
        .attr("epsilon")
        .and_then(|v| v.as_float())
        .unwrap_or(1e-5) as f64;
    let plane: usize = x.dims[2..].iter().product();
    let [scale, bias, mean, var] = stats;
    let data = x
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / plane) % c;
            let k = scale.data[ch] as f64 / (var.data[ch] as f64 + eps).sqrt();
            ((v as f64 - mean.data[ch] as f64) * k + bias.data[ch] as f64) as f32
        })
        .collect();
    Ok(DenseTensor {
        dims: x.dims.clone(),
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_ir::{infer_shapes, AttributeValue, GraphBuilder};

    fn t(dims: &[usize], data: Vec<f32>) -> DenseTensor {
        DenseTensor::new(dims.to_vec(), data).unwrap()
    }

    fn run(b: GraphBuilder, inputs: &[(&str, DenseTensor)]) -> DenseTensor {
        let g = b.build().unwrap();
        let inputs = inputs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect();
        let mut out = execute(&g, &inputs, &BTreeMap::new()).unwrap();
        out.pop_first().unwrap().1
    }

    #[test]
    fn relu() {
        let mut b = GraphBuilder::new(13);
        let x = b.input("x", &[2]);
        let y = b.op("Relu", &[&x]);
        b.output(&y);
        assert_eq!(
            run(b, &[("x", t(&[2], vec![-1.0, 2.0]))]).data,
            vec![0.0, 2.0]
        );
    }

    #[test]
    fn gemm_classifier_shape() {
        let mut b = GraphBuilder::new(13);
        let x = b.input("x", &[1, 512]);
        let w = b.param_f32("w", &[10, 512], vec![0.01; 5120]);
        let bias = b.param_f32("b", &[10], vec![1.0; 10]);
        let y = b.op_with(
            "Gemm",
            &[&x, &w, &bias],
            [("transB", AttributeValue::Int(1))],
        );
        b.output(&y);
        let out = run(b, &[("x", t(&[1, 512], vec![1.0; 512]))]);
        assert_eq!(out.dims, vec![1, 10]);
        assert!((out.data[0] - 6.12).abs() < 1e-5);
    }

    #[test]
    fn identity_pointwise_conv() {
        let mut b = GraphBuilder::new(13);
        let x = b.input("x", &[1, 3, 4, 4]);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = b.param_f32("w", &[3, 3, 1, 1], eye);
        let y = b.op("Conv", &[&x, &w]);
        b.output(&y);
        let input = t(
            &[1, 3, 4, 4],
            (0..48).map(|i| i as f32 * 0.5 - 3.0).collect(),
        );
        assert_eq!(run(b, &[("x", input.clone())]), input);
    }

    #[test]
    fn conv_and_pool_match_inferred_shapes() {
        let mut b = GraphBuilder::new(13);
        let x = b.input("x", &[1, 2, 7, 6]);
        let w = b.param_f32("w", &[4, 2, 3, 3], vec![0.1; 72]);
        let c = b.op_with(
            "Conv",
            &[&x, &w],
            [
                ("pads", AttributeValue::Ints(vec![1, 0, 1, 0])),
                ("strides", AttributeValue::Ints(vec![2, 1])),
            ],
        );
        let p = b.op_with(
            "MaxPool",
            &[&c],
            [
                ("kernel_shape", AttributeValue::Ints(vec![2, 2])),
                ("strides", AttributeValue::Ints(vec![2, 2])),
            ],
        );
        b.output(&p);
        let g = infer_shapes(&b.build().unwrap()).unwrap();
        let inputs = BTreeMap::from([("x".to_string(), DenseTensor::zeros(&[1, 2, 7, 6]))]);
        let out = execute(&g, &inputs, &BTreeMap::new()).unwrap();
        assert_eq!(out[&p].shape(), *g.shape_of(&p).unwrap());
        assert_eq!(g.shape_of(&c).unwrap().to_string(), "1x4x4x4");
    }

    #[test]
    fn average_pool_excludes_padding_by_default() {
        let mut b = GraphBuilder::new(13);
        let x = b.input("x", &[1, 1, 2, 2]);
        let y = b.op_with(
            "AveragePool",
            &[&x],
            [
                ("kernel_shape", AttributeValue::Ints(vec![3, 3])),
                ("pads", AttributeValue::Ints(vec![1; 4])),
            ],
        );
        b.output(&y);
        let out = run(b, &[("x", t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]))]);
        assert_eq!(out.data, vec![2.5; 4]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut b = GraphBuilder::new(13);
        let x = b.input("x", &[2, 3]);
        let y = b.op("Softmax", &[&x]);
        b.output(&y);
        let out = run(b, &[("x", t(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]))]);
        for row in out.data.chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        assert!((out.data[2] - 0.665_240_94).abs() < 1e-6);
    }

    #[test]
    fn matmul_batched_broadcast() {
        let mut b = GraphBuilder::new(13);
        let x = b.input("x", &[2, 1, 3]);
        let w = b.param_f32("w", &[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let y = b.op("MatMul", &[&x, &w]);
        b.output(&y);
        let out = run(
            b,
            &[("x", t(&[2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]))],
        );
        assert_eq!(out.dims, vec![2, 1, 2]);
        assert_eq!(out.data, vec![4.0, 5.0, 10.0, 11.0]);
    }

    #[test]
    fn reduce_concat_reshape() {
        let mut b = GraphBuilder::new(13);
        let x = b.input("x", &[1, 2, 2, 2]);
        let c = b.op_with("Concat", &[&x, &x], [("axis", AttributeValue::Int(1))]);
        let m = b.op_with(
            "ReduceMean",
            &[&c],
            [
                ("axes", AttributeValue::Ints(vec![2, 3])),
                ("keepdims", AttributeValue::Int(0)),
            ],
        );
        let target = b.param_i64("t", &[2], vec![2, -1]);
        let r = b.op("Reshape", &[&m, &target]);
        b.output(&r);
        let out = run(
            b,
            &[("x", t(&[1, 2, 2, 2], (0..8).map(|v| v as f32).collect()))],
        );
        assert_eq!(out.dims, vec![2, 2]);
        assert_eq!(out.data, vec![1.5, 5.5, 1.5, 5.5]);
    }

    #[test]
    fn unsupported_op() {
        let mut b = GraphBuilder::new(13);
        let x = b.input("x", &[2]);
        let y = b.op("Sigmoid", &[&x]);
        b.output(&y);
        let g = b.build().unwrap();
        let inputs = BTreeMap::from([("x".to_string(), DenseTensor::zeros(&[2]))]);
        let err = execute(&g, &inputs, &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, Error::UnsupportedOp(op) if op == "Sigmoid"));
    }
}
