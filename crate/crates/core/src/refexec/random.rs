use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DenseTensor;
use crate::error::Result;
use crate::graph_ir::{AttributeValue, GraphBuilder, GraphIR, NodeSpec, ValueRole};

/// Bounds for [`random_instance`].
#[derive(Debug, Clone)]
pub struct RandomSpec {
    /// Operator types the generator may use.
    pub ops: Vec<String>,
    /// Upper bound on the node count, the linear head included.
    pub max_nodes: usize,
    pub max_channels: usize,
    pub max_spatial: usize,
    /// MatMul + Add pairs (with parameter weight and bias) appended after a
    /// Flatten at the end of the graph.
    pub linear_pairs: usize,
}

impl Default for RandomSpec {
    fn default() -> Self {
        Self {
            ops: super::SUPPORTED_OPS
                .iter()
                .filter(|op| !matches!(**op, "Dropout" | "Cast"))
                .map(|s| s.to_string())
                .collect(),
            max_nodes: 20,
            max_channels: 4,
            max_spatial: 8,
            linear_pairs: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub graph: GraphIR,
    pub inputs: BTreeMap<String, DenseTensor>,
    pub params: BTreeMap<String, DenseTensor>,
}

struct Gen<'a> {
    spec: &'a RandomSpec,
    rng: ChaCha8Rng,
    b: GraphBuilder,
    /// Activations with their dims, in creation order.
    pool: Vec<(String, Vec<usize>)>,
    used: BTreeSet<String>,
    params: BTreeMap<String, DenseTensor>,
    nodes: usize,
}

fn ints(v: &[usize]) -> AttributeValue {
    AttributeValue::Ints(v.iter().map(|&x| x as i64).collect())
}

impl Gen<'_> {
    fn uniform(&mut self, n: usize, lo: f32, hi: f32) -> Vec<f32> {
        (0..n).map(|_| self.rng.random_range(lo..hi)).collect()
    }

    fn param(&mut self, dims: &[usize], lo: f32, hi: f32) -> String {
        let name = format!("p{}", self.params.len());
        let data = self.uniform(dims.iter().product(), lo, hi);
        let d64: Vec<u64> = dims.iter().map(|&d| d as u64).collect();
        self.b.param_f32(&name, &d64, data.clone());
        self.params.insert(
            name.clone(),
            DenseTensor::new(dims.to_vec(), data).expect("sized"),
        );
        name
    }

    fn int_param(&mut self, values: Vec<i64>) -> String {
        let name = format!("p{}", self.params.len());
        let data = values.iter().map(|&v| v as f32).collect();
        self.b
            .param_i64(&name, &[values.len() as u64], values.clone());
        self.params.insert(
            name.clone(),
            DenseTensor::new(vec![values.len()], data).expect("sized"),
        );
        name
    }

    fn emit<'a>(
        &mut self,
        op: &str,
        inputs: &[&str],
        attrs: impl IntoIterator<Item = (&'a str, AttributeValue)>,
        dims: Vec<usize>,
    ) -> String {
        let out = self.b.op_with(op, inputs, attrs);
        for i in inputs {
            self.used.insert(i.to_string());
        }
        self.pool.push((out.clone(), dims));
        self.nodes += 1;
        out
    }

    /// Picks the newest activation most of the time so graphs get deep.
    fn pick(&mut self) -> (String, Vec<usize>) {
        if self.rng.random_bool(0.6) {
            self.pool.last().expect("pool starts non-empty").clone()
        } else {
            self.pool.choose(&mut self.rng).expect("non-empty").clone()
        }
    }

    fn allowed(&self, op: &str) -> bool {
        self.spec.ops.iter().any(|o| o == op)
    }

    /// Tries one random operator; returns false when it does not apply.
    fn step(&mut self) -> bool {
        let Some(op) = self.spec.ops.choose(&mut self.rng).cloned() else {
            return false;
        };
        let (x, d) = self.pick();
        let spatial = d.len() == 4;
        match op.as_str() {
            "Relu" | "Identity" => {
                self.emit(&op, &[&x], [], d);
            }
            "Softmax" => {
                self.emit(&op, &[&x], [("axis", AttributeValue::Int(-1))], d);
            }
            "Conv" if spatial => {
                let k = if d[2] >= 3 && d[3] >= 3 && self.rng.random_bool(0.6) {
                    3
                } else {
                    1
                };
                let pad = if k == 3 && self.rng.random_bool(0.7) {
                    1
                } else {
                    0
                };
                let stride = if self.rng.random_bool(0.25) { 2 } else { 1 };
                let group = if d[1] % 2 == 0 && self.rng.random_bool(0.2) {
                    2
                } else {
                    1
                };
                let mut co = self.rng.random_range(1..=self.spec.max_channels);
                if co % group != 0 {
                    co *= group;
                }
                let fan_in = (d[1] / group * k * k) as f32;
                let bound = 1.0 / fan_in.sqrt();
                let w = self.param(&[co, d[1] / group, k, k], -bound, bound);
                let mut inputs = vec![x.as_str(), w.as_str()];
                let bias;
                if self.rng.random_bool(0.5) {
                    bias = self.param(&[co], -0.5, 0.5);
                    inputs.push(&bias);
                }
                let out = |i: usize| (d[i] + 2 * pad - k) / stride + 1;
                let dims = vec![d[0], co, out(2), out(3)];
                let inputs: Vec<String> = inputs.iter().map(|s| s.to_string()).collect();
                let refs: Vec<&str> = inputs.iter().map(String::as_str).collect();
                self.emit(
                    "Conv",
                    &refs,
                    [
                        ("dilations", ints(&[1, 1])),
                        ("group", AttributeValue::Int(group as i64)),
                        ("kernel_shape", ints(&[k, k])),
                        ("pads", ints(&[pad; 4])),
                        ("strides", ints(&[stride, stride])),
                    ],
                    dims,
                );
            }
            "MaxPool" | "AveragePool" if spatial => {
                let (k, stride, pad) = if d[2] >= 3 && d[3] >= 3 && self.rng.random_bool(0.5) {
                    (3, 1, 1)
                } else if d[2] >= 2 && d[3] >= 2 {
                    (2, 2, 0)
                } else {
                    return false;
                };
                let out = |i: usize| (d[i] + 2 * pad - k) / stride + 1;
                let dims = vec![d[0], d[1], out(2), out(3)];
                let mut attrs = vec![
                    ("kernel_shape", ints(&[k, k])),
                    ("pads", ints(&[pad; 4])),
                    ("strides", ints(&[stride, stride])),
                ];
                if op == "AveragePool" && self.rng.random_bool(0.3) {
                    attrs.push(("count_include_pad", AttributeValue::Int(1)));
                }
                self.emit(&op, &[&x], attrs, dims);
            }
            "GlobalAveragePool" if spatial => {
                self.emit(&op, &[&x], [], vec![d[0], d[1], 1, 1]);
            }
            "BatchNormalization" if spatial => {
                let c = d[1];
                let scale = self.param(&[c], 0.5, 1.5);
                let shift = self.param(&[c], -0.5, 0.5);
                let mean = self.param(&[c], -0.5, 0.5);
                let var = self.param(&[c], 0.5, 1.5);
                self.emit(&op, &[&x, &scale, &shift, &mean, &var], [], d);
            }
            "Add" | "Mul" => {
                let partner = self
                    .pool
                    .iter()
                    .filter(|(n, dd)| *dd == d && *n != x)
                    .map(|(n, _)| n.clone())
                    .collect::<Vec<_>>();
                let other = match partner.choose(&mut self.rng) {
                    Some(p) if self.rng.random_bool(0.5) => p.clone(),
                    _ => {
                        let shape = if spatial && self.rng.random_bool(0.5) {
                            vec![1, d[1], 1, 1]
                        } else {
                            d[1..].to_vec()
                        };
                        let (lo, hi) = if op == "Mul" { (0.5, 1.5) } else { (-1.0, 1.0) };
                        self.param(&shape, lo, hi)
                    }
                };
                if self.rng.random_bool(0.5) {
                    self.emit(&op, &[&other, &x], [], d);
                } else {
                    self.emit(&op, &[&x, &other], [], d);
                }
            }
            "Concat" => {
                if d[1] * 2 > 4 * self.spec.max_channels {
                    return false;
                }
                let partners: Vec<(String, Vec<usize>)> = self
                    .pool
                    .iter()
                    .filter(|(_, dd)| {
                        dd.len() == d.len() && (0..d.len()).all(|i| i == 1 || dd[i] == d[i])
                    })
                    .filter(|(_, dd)| d[1] + dd[1] <= 4 * self.spec.max_channels)
                    .cloned()
                    .collect();
                let (other, od) = partners
                    .choose(&mut self.rng)
                    .cloned()
                    .unwrap_or((x.clone(), d.clone()));
                let mut dims = d.clone();
                dims[1] += od[1];
                self.emit(&op, &[&x, &other], [("axis", AttributeValue::Int(1))], dims);
            }
            "ReduceMean" => {
                if spatial {
                    let keep = self.rng.random_bool(0.5);
                    let dims = if keep {
                        vec![d[0], d[1], 1, 1]
                    } else {
                        vec![d[0], d[1]]
                    };
                    self.emit(
                        &op,
                        &[&x],
                        [
                            ("axes", ints(&[2, 3])),
                            ("keepdims", AttributeValue::Int(keep as i64)),
                        ],
                        dims,
                    );
                } else {
                    self.emit(
                        &op,
                        &[&x],
                        [("axes", ints(&[1])), ("keepdims", AttributeValue::Int(1))],
                        vec![d[0], 1],
                    );
                }
            }
            "Flatten" => {
                let rest = d[1..].iter().product();
                self.emit(&op, &[&x], [], vec![d[0], rest]);
            }
            "Reshape" => {
                let rest: usize = d[1..].iter().product();
                let target = self.int_param(vec![0, -1]);
                self.emit(&op, &[&x, &target], [], vec![d[0], rest]);
            }
            "Gemm" if !spatial => {
                let n = self.rng.random_range(1..=2 * self.spec.max_channels);
                let trans_b = self.rng.random_bool(0.5);
                let bound = 1.0 / (d[1] as f32).sqrt();
                let w = if trans_b {
                    self.param(&[n, d[1]], -bound, bound)
                } else {
                    self.param(&[d[1], n], -bound, bound)
                };
                let bias = self.param(&[n], -0.5, 0.5);
                self.emit(
                    &op,
                    &[&x, &w, &bias],
                    [("transB", AttributeValue::Int(trans_b as i64))],
                    vec![d[0], n],
                );
            }
            "MatMul" if !spatial => {
                let n = self.rng.random_range(1..=2 * self.spec.max_channels);
                let bound = 1.0 / (d[1] as f32).sqrt();
                let w = self.param(&[d[1], n], -bound, bound);
                self.emit(&op, &[&x, &w], [], vec![d[0], n]);
            }
            _ => return false,
        }
        true
    }

    fn linear_pair(&mut self, x: &str, d: &[usize]) -> (String, Vec<usize>) {
        let n = self.rng.random_range(1..=2 * self.spec.max_channels);
        let bound = 1.0 / (d[1] as f32).sqrt();
        let w = self.param(&[d[1], n], -bound, bound);
        let m = self.emit("MatMul", &[x, &w], [], vec![d[0], n]);
        let bias = if self.rng.random_bool(0.5) {
            self.param(&[n], -0.5, 0.5)
        } else {
            self.param(&[1, n], -0.5, 0.5)
        };
        let out = if self.rng.random_bool(0.5) {
            self.emit("Add", &[&m, &bias], [], vec![d[0], n])
        } else {
            self.emit("Add", &[&bias, &m], [], vec![d[0], n])
        };
        (out, vec![d[0], n])
    }
}

/// A random connected DAG over `spec.ops` with float payloads for every
/// parameter, plus matching random inputs. Equal seeds give equal
/// instances.
pub fn random_instance(spec: &RandomSpec, seed: u64) -> Result<RandomInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_spatial = spec.max_spatial.max(2);
    let dims = vec![
        rng.random_range(1..=2),
        rng.random_range(1..=spec.max_channels.max(1)),
        rng.random_range(2..=max_spatial),
        rng.random_range(2..=max_spatial),
    ];
    let mut g = Gen {
        spec,
        rng,
        b: GraphBuilder::new(13),
        pool: vec![],
        used: BTreeSet::new(),
        params: BTreeMap::new(),
        nodes: 0,
    };
    let d64: Vec<u64> = dims.iter().map(|&d| d as u64).collect();
    let x = g.b.input("x", &d64);
    g.pool.push((x.clone(), dims.clone()));

    let max_nodes = spec.max_nodes.max(1);
    let mut pairs = spec.linear_pairs;
    while pairs > 0 && 1 + 2 * pairs > max_nodes {
        pairs -= 1;
    }
    let head_cost = if pairs > 0 { 1 + 2 * pairs } else { 0 };
    let trunk = if max_nodes > head_cost {
        let budget = max_nodes - head_cost;
        g.rng.random_range(budget.div_ceil(2)..=budget)
    } else {
        0
    };
    let mut attempts = 0;
    while g.nodes < trunk && attempts < 50 * max_nodes {
        attempts += 1;
        g.step();
    }
    if g.nodes == 0 && pairs == 0 {
        // every drawn operator failed to apply; fall back to a pointwise op
        let op = if g.allowed("Relu") {
            "Relu"
        } else {
            "Identity"
        };
        g.emit(op, &[&x], [], dims.clone());
    }
    if pairs > 0 {
        let (mut cur, mut d) = g.pool.last().expect("non-empty").clone();
        if d.len() != 2 {
            let rest = d[1..].iter().product();
            cur = g.emit("Flatten", &[&cur], [], vec![d[0], rest]);
            d = vec![d[0], rest];
        } else {
            // keep the head cost fixed so the node bound holds
            cur = g.emit("Flatten", &[&cur], [], d.clone());
        }
        for _ in 0..pairs {
            (cur, d) = g.linear_pair(&cur, &d);
        }
    }

    let outputs: Vec<String> = g
        .pool
        .iter()
        .skip(1)
        .filter(|(n, _)| !g.used.contains(n))
        .map(|(n, _)| n.clone())
        .collect();
    for o in &outputs {
        g.b.output(o);
    }
    let graph = g.b.build()?;
    let inputs = random_inputs(&graph, seed.wrapping_add(0x9E37_79B9))?;
    Ok(RandomInstance {
        graph,
        inputs,
        params: g.params,
    })
}

/// Uniform [-1, 1) tensors for every graph input of `g`.
pub fn random_inputs(g: &GraphIR, seed: u64) -> Result<BTreeMap<String, DenseTensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for name in g.graph_inputs() {
        let dims: Vec<usize> = g
            .shape_of(name)
            .and_then(|s| s.known_dims())
            .ok_or_else(|| {
                crate::Error::InvalidArgument(format!("input {name} has no concrete shape"))
            })?
            .into_iter()
            .map(|d| d as usize)
            .collect();
        let data = (0..dims.iter().product())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        out.insert(name.clone(), DenseTensor::new(dims, data)?);
    }
    Ok(out)
}

/// Inserts `count` Identity nodes on randomly chosen activation edges; all
/// readers of the chosen value are redirected through the new node.
pub fn inject_identities(g: &GraphIR, count: usize, seed: u64) -> Result<GraphIR> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts = g.to_parts();
    let first_id = parts.nodes.iter().map(|n| n.id + 1).max().unwrap_or(0);
    let mut taken: BTreeSet<String> = g.values().map(|v| v.name.clone()).collect();
    for next_id in (first_id..).take(count) {
        let candidates: Vec<String> = parts
            .nodes
            .iter()
            .flat_map(|n| n.inputs.iter())
            .filter(|i| !i.is_empty() && g.value(i).is_none_or(|v| v.role != ValueRole::Parameter))
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let Some(target) = candidates.choose(&mut rng).cloned() else {
            break;
        };
        let fresh = (0..)
            .map(|i| format!("{target}_id{i}"))
            .find(|n| !taken.contains(n))
            .expect("unbounded search");
        taken.insert(fresh.clone());
        for node in parts.nodes.iter_mut() {
            for input in node.inputs.iter_mut() {
                if *input == target {
                    *input = fresh.clone();
                }
            }
        }
        parts.nodes.push(NodeSpec::new(
            next_id,
            "Identity",
            vec![target],
            vec![fresh],
        ));
    }
    parts.provenance = None;
    GraphIR::from_parts(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_ir::infer_shapes;
    use crate::refexec::execute;

    #[test]
    fn deterministic_per_seed() {
        let spec = RandomSpec::default();
        let a = random_instance(&spec, 7).unwrap();
        let b = random_instance(&spec, 7).unwrap();
        assert_eq!(a.graph, b.graph);
        assert_eq!(a.inputs, b.inputs);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn single_node_bound() {
        let spec = RandomSpec {
            max_nodes: 1,
            ..Default::default()
        };
        let inst = random_instance(&spec, 0).unwrap();
        assert_eq!(inst.graph.node_count(), 1);
        execute(&inst.graph, &inst.inputs, &inst.params).unwrap();
    }

    #[test]
    fn instances_execute_and_respect_bounds() {
        let spec = RandomSpec {
            max_nodes: 12,
            linear_pairs: 2,
            ..Default::default()
        };
        for seed in 0..30 {
            let inst = random_instance(&spec, seed).unwrap();
            assert!(inst.graph.node_count() <= 12, "seed {seed}");
            let g = infer_shapes(&inst.graph).unwrap();
            let out = execute(&g, &inst.inputs, &inst.params).unwrap();
            for (name, t) in &out {
                assert_eq!(
                    Some(&t.shape()),
                    g.shape_of(name),
                    "seed {seed} value {name}"
                );
            }
        }
    }

    #[test]
    fn injected_identities_are_counted() {
        let inst = random_instance(&RandomSpec::default(), 3).unwrap();
        let g = inject_identities(&inst.graph, 4, 1).unwrap();
        assert_eq!(g.node_count(), inst.graph.node_count() + 4);
        let before = execute(&inst.graph, &inst.inputs, &inst.params).unwrap();
        let after = execute(&g, &inst.inputs, &inst.params).unwrap();
        assert_eq!(before, after);
    }
}
