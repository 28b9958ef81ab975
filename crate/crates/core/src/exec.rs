//! Graph interpreter with FLOPs accounting and an equivalence checker.
//!
//! Under [`Strategy::VanI`] every per-request (unbatched) input is tiled to
//! the batch size before evaluation starts, so user-side work is repeated
//! for every candidate. Under [`Strategy::Uoi`] unbatched tensors keep a
//! single row until a `Tile` node (or a broadcasting operand) widens them.
//! Both produce the same values.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, NodeKind};
use crate::tensor::{
    add_broadcast, block_matmul_acc, concat_cols, matmul, relu, slice_cols, softmax_rows,
    tile_rows, Element, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    VanI,
    Uoi,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::VanI => "vani",
            Strategy::Uoi => "uoi",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vani" => Some(Strategy::VanI),
            "uoi" => Some(Strategy::Uoi),
            _ => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Values for a graph's Input nodes. Unbatched inputs have one row (shape
/// `[1, D]` or `[1, L, D]`), batched ones `batch` rows.
#[derive(Debug, Clone)]
pub struct InputBundle<E: Element = f64> {
    batch: usize,
    tensors: HashMap<String, Tensor<E>>,
}

impl<E: Element> InputBundle<E> {
    pub fn new(batch: usize) -> Self {
        InputBundle {
            batch,
            tensors: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<E>) -> &mut Self {
        self.tensors.insert(name.into(), t);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.tensors.get(name)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Uniform `[-1, 1)` values for every Input of `g`, drawn in declaration
    /// order from a generator seeded with `seed`.
    pub fn random(g: &Graph, batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bundle = InputBundle::new(batch);
        for id in g.input_nodes() {
            let n = g.node(id);
            let NodeKind::Input { dims, batched, .. } = &n.kind else { unreachable!() };
            let rows = if *batched { batch } else { 1 };
            let mut shape = vec![rows];
            shape.extend(dims);
            let len: usize = shape.iter().product();
            let data = (0..len)
                .map(|_| E::from_f64(rng.gen_range(-1.0..1.0)))
                .collect();
            bundle.insert(n.id.clone(), Tensor::new(shape, data)?);
        }
        Ok(bundle)
    }
}

#[derive(Debug, Clone)]
pub struct ExecReport<E: Element = f64> {
    pub strategy: Strategy,
    pub batch: usize,
    /// Output tensors in the graph's output order.
    pub outputs: Vec<(String, Tensor<E>)>,
    /// FLOPs of every matmul-like node (matmuls and attention projections).
    pub node_flops: Vec<(String, u64)>,
    pub flops_total: u64,
    /// Attention score and weighting products, kept out of `flops_total`.
    pub attention_core_flops: u64,
    pub wall_time_ns: u128,
}

impl<E: Element> ExecReport<E> {
    pub fn output(&self, name: &str) -> Option<&Tensor<E>> {
        self.outputs.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn flops_of(&self, name: &str) -> Option<u64> {
        self.node_flops.iter().find(|(n, _)| n == name).map(|(_, f)| *f)
    }

    /// JSON text with a fixed key order. Output tensors are summarized by
    /// shape, sum, max magnitude and their first values.
    pub fn to_json(&self) -> String {
        let mut s = String::from("{\n");
        writeln!(s, "  \"strategy\": \"{}\",", self.strategy).unwrap();
        writeln!(s, "  \"dtype\": \"{}\",", E::NAME).unwrap();
        writeln!(s, "  \"batch\": {},", self.batch).unwrap();
        writeln!(s, "  \"flops_total\": {},", self.flops_total).unwrap();
        writeln!(s, "  \"attention_core_flops\": {},", self.attention_core_flops).unwrap();
        writeln!(s, "  \"wall_time_ns\": {},", self.wall_time_ns).unwrap();
        s.push_str("  \"node_flops\": {");
        for (i, (n, f)) in self.node_flops.iter().enumerate() {
            let sep = if i == 0 { "\n" } else { ",\n" };
            write!(s, "{sep}    \"{n}\": {f}").unwrap();
        }
        s.push_str(if self.node_flops.is_empty() { "},\n" } else { "\n  },\n" });
        s.push_str("  \"outputs\": {");
        for (i, (n, t)) in self.outputs.iter().enumerate() {
            let sep = if i == 0 { "\n" } else { ",\n" };
            let sum: f64 = t.data().iter().map(|x| x.as_f64()).sum();
            let head: Vec<String> = t
                .data()
                .iter()
                .take(8)
                .map(|x| format!("{:.6e}", x.as_f64()))
                .collect();
            write!(
                s,
                "{sep}    \"{n}\": {{\"shape\": {:?}, \"sum\": {:.12e}, \"max_abs\": {:.12e}, \"head\": [{}]}}",
                t.shape(),
                sum,
                t.max_abs(),
                head.join(", ")
            )
            .unwrap();
        }
        s.push_str(if self.outputs.is_empty() { "}\n" } else { "\n  }\n" });
        s.push('}');
        s
    }
}

/// A graph with its weights materialized, ready to run repeatedly.
pub struct Session<'g, E: Element = f64> {
    g: &'g Graph,
    weights: Vec<Option<Tensor<E>>>,
    /// Number of consumers of each node, for freeing intermediates early.
    fanout: Vec<usize>,
}

fn rows_of<E: Element>(t: &Tensor<E>) -> usize {
    t.rows()
}

impl<'g, E: Element> Session<'g, E> {
    pub fn new(g: &'g Graph) -> Self {
        let weights = g
            .nodes()
            .iter()
            .map(|n| match &n.kind {
                NodeKind::Weight { cols, init, .. } => Some(init.materialize::<E>(*cols)),
                _ => None,
            })
            .collect();
        let mut fanout = vec![0; g.len()];
        for n in g.nodes() {
            for i in &n.inputs {
                fanout[i.0] += 1;
            }
        }
        Session { g, weights, fanout }
    }

    pub fn graph(&self) -> &Graph {
        self.g
    }

    fn check_bundle(&self, bundle: &InputBundle<E>) -> Result<()> {
        let b = bundle.batch;
        if b == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        for id in self.g.input_nodes() {
            let n = self.g.node(id);
            let NodeKind::Input { dims, batched, .. } = &n.kind else { unreachable!() };
            let t = bundle
                .get(&n.id)
                .ok_or_else(|| Error::MissingInput(n.id.clone()))?;
            let rows = if *batched { b } else { 1 };
            if t.shape()[0] != rows || t.shape()[1..] != dims[..] {
                return Err(Error::dim(format!(
                    "input `{}` has shape {:?}, expected [{rows}, {}] for batch size {b}",
                    n.id,
                    t.shape(),
                    dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
                )));
            }
        }
        Ok(())
    }

    pub fn run(&self, bundle: &InputBundle<E>, strategy: Strategy) -> Result<ExecReport<E>> {
        self.check_bundle(bundle)?;
        let g = self.g;
        let batch = bundle.batch;
        let mut remaining = self.fanout.clone();
        let mut vals: Vec<Option<Tensor<E>>> = vec![None; g.len()];
        let mut node_flops = Vec::new();
        let mut core = 0u64;
        let start = Instant::now();
        for &id in g.topo_order() {
            let n = g.node(id);
            let arg = |i: usize| -> &Tensor<E> {
                let src = n.inputs[i];
                vals[src.0]
                    .as_ref()
                    .or(self.weights[src.0].as_ref())
                    .expect("inputs are evaluated before their consumers")
            };
            let out: Tensor<E> = match &n.kind {
                NodeKind::Input { batched, .. } => {
                    let t = bundle.get(&n.id).unwrap();
                    if !batched && strategy == Strategy::VanI {
                        tile_rows(t, batch)?
                    } else {
                        t.clone()
                    }
                }
                NodeKind::Weight { .. } => {
                    continue;
                }
                NodeKind::MatMul => {
                    let (a, w) = (arg(0), arg(1));
                    let r = matmul(a, w).map_err(|e| e.at_site(n.id.clone()))?;
                    node_flops.push((n.id.clone(), 2 * (a.rows() * a.cols() * w.cols()) as u64));
                    r
                }
                NodeKind::MatMulMaRI { split } => {
                    let mut slot = 0;
                    let mut seed = None;
                    let mut blocks = Vec::new();
                    let mut flops = 0u64;
                    let d = n.shape.width();
                    for (dom, &w) in split.iter().enumerate() {
                        if w == 0 {
                            continue;
                        }
                        let (x, wt) = (arg(slot), arg(slot + 1));
                        flops += 2 * (x.rows() * w * d) as u64;
                        if dom == 0 {
                            seed = Some(matmul(x, wt)?);
                        } else {
                            blocks.push((x, wt));
                        }
                        slot += 2;
                    }
                    let rows = blocks
                        .first()
                        .map(|(x, _)| rows_of(*x))
                        .unwrap_or(batch);
                    node_flops.push((n.id.clone(), flops));
                    block_matmul_acc(rows, d, seed.as_ref(), &blocks)
                        .map_err(|e| e.at_site(n.id.clone()))?
                }
                NodeKind::Concat { .. } => {
                    let parts: Vec<&Tensor<E>> = (0..n.inputs.len()).map(arg).collect();
                    concat_cols(&parts).map_err(|e| e.at_site(n.id.clone()))?
                }
                NodeKind::Tile => {
                    let x = arg(0);
                    if x.rows() == batch {
                        x.clone()
                    } else {
                        tile_rows(x, batch)?
                    }
                }
                NodeKind::Add => add_broadcast(arg(0), arg(1)).map_err(|e| e.at_site(n.id.clone()))?,
                NodeKind::Relu => relu(arg(0)),
                NodeKind::Softmax => softmax_rows(arg(0)),
                NodeKind::CrossAttention { .. } => {
                    let (q, seq) = (arg(0), arg(1));
                    let (wq, wk, wv) = if n.inputs.len() == 5 {
                        (Some(arg(2)), arg(3), arg(4))
                    } else {
                        (None, arg(2), arg(3))
                    };
                    let r = attend(q, seq, wq, wk, wv).map_err(|e| e.at_site(n.id.clone()))?;
                    node_flops.push((n.id.clone(), r.projection_flops));
                    core += r.core_flops;
                    r.out
                }
                NodeKind::Reshape { dims } => {
                    let x = arg(0);
                    let mut shape = vec![x.rows()];
                    shape.extend(dims);
                    x.reshape(shape)?
                }
                NodeKind::Identity | NodeKind::Output => arg(0).clone(),
                NodeKind::Slice { start, width } => {
                    slice_cols(arg(0), *start, *width).map_err(|e| e.at_site(n.id.clone()))?
                }
                NodeKind::GatedSum { experts } => {
                    let gates = arg(0);
                    let ex: Vec<&Tensor<E>> = (1..=*experts).map(arg).collect();
                    gated_sum(gates, &ex).map_err(|e| e.at_site(n.id.clone()))?
                }
            };
            vals[id.0] = Some(out);
            for &i in &n.inputs {
                remaining[i.0] -= 1;
                if remaining[i.0] == 0 && !matches!(g.node(i).kind, NodeKind::Output) {
                    vals[i.0] = None;
                }
            }
        }
        let wall_time_ns = start.elapsed().as_nanos();
        let outputs = g
            .outputs()
            .iter()
            .map(|&o| (g.name(o).to_string(), vals[o.0].take().unwrap()))
            .collect();
        let flops_total = node_flops.iter().map(|(_, f)| f).sum();
        Ok(ExecReport {
            strategy,
            batch,
            outputs,
            node_flops,
            flops_total,
            attention_core_flops: core,
            wall_time_ns,
        })
    }
}

/// One-off convenience: materialize weights and run once.
pub fn execute<E: Element>(
    g: &Graph,
    bundle: &InputBundle<E>,
    strategy: Strategy,
) -> Result<ExecReport<E>> {
    Session::new(g).run(bundle, strategy)
}

/// `Σ_e gates[:, e] · experts[e]`, broadcasting one-row operands.
fn gated_sum<E: Element>(gates: &Tensor<E>, experts: &[&Tensor<E>]) -> Result<Tensor<E>> {
    let rows = std::iter::once(gates.rows())
        .chain(experts.iter().map(|e| e.rows()))
        .max()
        .unwrap();
    let width = experts[0].cols();
    if gates.cols() != experts.len()
        || experts
            .iter()
            .chain(std::iter::once(&gates))
            .any(|t| t.rank() != 2 || (t.rows() != 1 && t.rows() != rows))
        || experts.iter().any(|e| e.cols() != width)
    {
        return Err(Error::dim("gated sum operands do not line up"));
    }
    let pick = |t: &Tensor<E>, r: usize| if t.rows() == 1 { 0 } else { r };
    let mut out = vec![E::zero(); rows * width];
    for r in 0..rows {
        let g = gates.row(pick(gates, r));
        let o = &mut out[r * width..(r + 1) * width];
        for (e, ex) in experts.iter().enumerate() {
            let x = ex.row(pick(ex, r));
            for (oj, &xj) in o.iter_mut().zip(x) {
                *oj = *oj + g[e] * xj;
            }
        }
    }
    Tensor::new(vec![rows, width], out)
}

struct Attended<E: Element> {
    out: Tensor<E>,
    projection_flops: u64,
    core_flops: u64,
}

/// Per query row: `softmax(q·Kᵀ/√h)·V` with `K = seq·W_k`, `V = seq·W_v`.
/// A one-row `seq` is projected once and shared by every query; a batched
/// `seq` is projected per row.
fn attend<E: Element>(
    q: &Tensor<E>,
    seq: &Tensor<E>,
    w_q: Option<&Tensor<E>>,
    w_k: &Tensor<E>,
    w_v: &Tensor<E>,
) -> Result<Attended<E>> {
    if q.rank() != 2 || seq.rank() != 3 {
        return Err(Error::dim(format!(
            "cross attention wants a [n, d] query and an [m, L, d] sequence, got {:?} and {:?}",
            q.shape(),
            seq.shape()
        )));
    }
    let (sr, l, dkv) = (seq.shape()[0], seq.shape()[1], seq.shape()[2]);
    let h = w_k.cols();
    if w_k.rows() != dkv || w_v.rows() != dkv || w_v.cols() != h {
        return Err(Error::dim(format!(
            "key/value projections {:?}, {:?} do not fit sequence width {dkv}",
            w_k.shape(),
            w_v.shape()
        )));
    }
    let mut proj = 0u64;
    let qp = match w_q {
        Some(w) => {
            proj += 2 * (q.rows() * q.cols() * w.cols()) as u64;
            matmul(q, w)?
        }
        None => q.clone(),
    };
    if qp.cols() != h {
        return Err(Error::dim(format!(
            "query width {} does not match attention width {h}",
            qp.cols()
        )));
    }
    let rows = qp.rows().max(sr);
    if (qp.rows() != 1 && qp.rows() != rows) || (sr != 1 && sr != rows) {
        return Err(Error::dim(format!(
            "query rows {} and sequence rows {sr} do not broadcast",
            qp.rows()
        )));
    }
    let scale = E::from_f64(1.0 / (h as f64).sqrt());
    let mut kv: Vec<(Tensor<E>, Tensor<E>)> = Vec::with_capacity(sr);
    for r in 0..sr {
        let s = Tensor::from_parts(vec![l, dkv], seq.data()[r * l * dkv..(r + 1) * l * dkv].to_vec());
        kv.push((matmul(&s, w_k)?, matmul(&s, w_v)?));
        proj += 2 * 2 * (l * dkv * h) as u64;
    }
    let mut out = vec![E::zero(); rows * h];
    let mut logits = vec![E::zero(); l];
    for r in 0..rows {
        let qrow = qp.row(if qp.rows() == 1 { 0 } else { r });
        let (k, v) = &kv[if sr == 1 { 0 } else { r }];
        for (j, lg) in logits.iter_mut().enumerate() {
            let mut dot = E::zero();
            for (a, b) in qrow.iter().zip(k.row(j)) {
                dot = dot + *a * *b;
            }
            *lg = dot * scale;
        }
        let m = logits.iter().copied().fold(E::neg_infinity(), E::max);
        let mut z = E::zero();
        for lg in logits.iter_mut() {
            *lg = (*lg - m).exp();
            z = z + *lg;
        }
        let o = &mut out[r * h..(r + 1) * h];
        for (j, lg) in logits.iter().enumerate() {
            let a = *lg / z;
            for (oj, &vj) in o.iter_mut().zip(v.row(j)) {
                *oj = *oj + a * vj;
            }
        }
    }
    Ok(Attended {
        out: Tensor::from_parts(vec![rows, h], out),
        projection_flops: proj,
        core_flops: 2 * 2 * (rows * l * h) as u64,
    })
}

/// Cross attention of query rows `x_q` over a user sequence (`[L, d]` or
/// `[m, L, d]`), with an optional query projection.
pub fn cross_attention<E: Element>(
    x_q: &Tensor<E>,
    seq: &Tensor<E>,
    w_q: Option<&Tensor<E>>,
    w_k: &Tensor<E>,
    w_v: &Tensor<E>,
) -> Result<Tensor<E>> {
    let seq3 = if seq.rank() == 2 {
        seq.reshape(vec![1, seq.shape()[0], seq.shape()[1]])?
    } else {
        seq.clone()
    };
    Ok(attend(x_q, &seq3, w_q, w_k, w_v)?.out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivConfig {
    pub trials: usize,
    pub tol: f64,
    pub batch: usize,
    pub seed: u64,
    pub strategy_a: Strategy,
    pub strategy_b: Strategy,
}

impl EquivConfig {
    /// UOI on both sides, tolerance `1e-12` for `f64` and `1e-5` for `f32`.
    pub fn for_element<E: Element>(trials: usize, batch: usize, seed: u64) -> Self {
        EquivConfig {
            trials,
            tol: if E::NAME == "f32" { 1e-5 } else { 1e-12 },
            batch,
            seed,
            strategy_a: Strategy::Uoi,
            strategy_b: Strategy::Uoi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivVerdict {
    pub pass: bool,
    /// Largest `max|a − b| / max|a|` over all outputs and trials.
    pub max_deviation: f64,
    pub trials: usize,
}

fn signature(g: &Graph) -> (Vec<(String, String)>, Vec<String>) {
    let mut ins: Vec<(String, String)> = g
        .input_nodes()
        .map(|i| (g.name(i).to_string(), format!("{:?}", g.node(i).kind)))
        .collect();
    ins.sort();
    let outs = g.outputs().iter().map(|&o| g.name(o).to_string()).collect();
    (ins, outs)
}

/// Runs both graphs on `cfg.trials` random bundles and compares outputs.
pub fn check_equivalence<E: Element>(a: &Graph, b: &Graph, cfg: &EquivConfig) -> Result<EquivVerdict> {
    if signature(a) != signature(b) {
        return Err(Error::Contract(
            "graphs differ in their inputs or outputs and cannot be compared".into(),
        ));
    }
    let (sa, sb) = (Session::<E>::new(a), Session::<E>::new(b));
    let mut worst = 0.0f64;
    for t in 0..cfg.trials {
        let bundle = InputBundle::<E>::random(a, cfg.batch, cfg.seed.wrapping_add(t as u64))?;
        let ra = sa.run(&bundle, cfg.strategy_a)?;
        let rb = sb.run(&bundle, cfg.strategy_b)?;
        for ((_, x), (_, y)) in ra.outputs.iter().zip(&rb.outputs) {
            let dev = y.relative_deviation(x)?;
            worst = if dev.is_nan() { f64::INFINITY } else { worst.max(dev) };
        }
    }
    Ok(EquivVerdict {
        pass: worst <= cfg.tol,
        max_deviation: worst,
        trials: cfg.trials,
    })
}

/// Node ids of every matmul-like node, for callers that want to look up
/// instrumented counts.
pub fn matmul_nodes(g: &Graph) -> Vec<NodeId> {
    g.ids()
        .filter(|&i| {
            matches!(
                g.node(i).kind,
                NodeKind::MatMul | NodeKind::MatMulMaRI { .. } | NodeKind::CrossAttention { .. }
            )
        })
        .collect()
}
