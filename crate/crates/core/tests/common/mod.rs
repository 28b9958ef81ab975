//! Random graph generation and brute-force oracles shared by the integration
//! tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use mari_core::exec::{InputBundle, Session, Strategy};
use mari_core::gca::Schedule;
use mari_core::graph::{FeatureDomain, FeatureLayout, Graph, GraphBuilder, NodeKind};
use mari_core::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Debug, Clone)]
struct Val {
    name: String,
    batched: bool,
    width: usize,
    /// Upstream feature domains.
    user: bool,
    other: bool,
    cross_only: bool,
    /// Output of a mixed concat, possibly through reshapes/identities.
    tainted: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct GenOpts {
    pub max_nodes: usize,
    pub max_width: usize,
    /// Chance that a batched concat is built to mix user-only and other
    /// values when both are available.
    pub mixed_bias: f64,
}

impl Default for GenOpts {
    fn default() -> Self {
        GenOpts {
            max_nodes: 30,
            max_width: 8,
            mixed_bias: 0.6,
        }
    }
}

/// A random valid DAG over Input, Weight, Tile, Concat, Reshape, Identity,
/// MatMul, Relu, Add, Softmax and Output nodes.
///
/// Outputs of mixed concats (user and item/cross inputs together) only flow
/// into reshapes, identities, matmul data operands, softmaxes and outputs, and
/// are never concatenated again. Under those rules a matmul input has a
/// batch-constant column block next to varying columns exactly when a mixed
/// concat reaches it through data-movement nodes.
pub fn random_graph<R: Rng>(rng: &mut R, opts: GenOpts) -> Graph {
    let mut b = GraphBuilder::new();
    let mut vals: Vec<Val> = Vec::new();
    let mut count = 0usize;
    let mut fresh = |p: &str| {
        count += 1;
        format!("{p}{count}")
    };
    let w = |rng: &mut R| rng.gen_range(1..=opts.max_width);

    let n_user = [0, 1, 1, 2, 2, 3][rng.gen_range(0..6)];
    let n_other = rng.gen_range(0..=3);
    for _ in 0..n_user {
        let name = fresh("u");
        let width = w(rng);
        b.input(&name, FeatureDomain::User, &[width], false);
        vals.push(Val { name, batched: false, width, user: true, other: false, cross_only: false, tainted: false });
    }
    for _ in 0..n_other {
        let cross = rng.gen_bool(0.4);
        let name = fresh(if cross { "c" } else { "i" });
        let width = w(rng);
        let dom = if cross { FeatureDomain::Cross } else { FeatureDomain::Item };
        b.input(&name, dom, &[width], true);
        vals.push(Val { name, batched: true, width, user: false, other: true, cross_only: cross, tainted: false });
    }
    if vals.is_empty() {
        let name = fresh("i");
        b.input(&name, FeatureDomain::Item, &[3], true);
        vals.push(Val { name, batched: true, width: 3, user: false, other: true, cross_only: false, tainted: false });
    }
    let n_inputs = vals.len();
    let mut nodes = vals.len();
    let budget = rng.gen_range(nodes + 1..=opts.max_nodes.max(nodes + 1));
    let mut consumed = vec![false; vals.len()];

    while nodes + 2 < budget {
        let op = rng.gen_range(0..13);
        // favour the newest value so chains grow deeper than one hop
        let pick = |rng: &mut R, vals: &[Val]| {
            if rng.gen_bool(0.35) {
                vals.len() - 1
            } else {
                rng.gen_range(0..vals.len())
            }
        };
        let i = pick(rng, &vals);
        let x = vals[i].clone();
        let (new, used): (Option<Val>, Vec<usize>) = match op {
            // Tile
            0 | 9 | 10 if !x.batched => {
                let name = fresh("t");
                b.node(&name, NodeKind::Tile, &[&x.name]);
                (Some(Val { name, batched: true, ..x.clone() }), vec![i])
            }
            // MatMul with a fresh weight
            1 | 2 => {
                let out = w(rng);
                let wn = fresh("w");
                b.weight(&wn, x.width, out, rng.gen());
                let name = fresh("m");
                b.node(&name, NodeKind::MatMul, &[&x.name, &wn]);
                nodes += 1;
                (Some(Val { name, width: out, tainted: false, ..x.clone() }), vec![i])
            }
            3 if !x.tainted => {
                let name = fresh("r");
                b.node(&name, NodeKind::Relu, &[&x.name]);
                (Some(Val { name, ..x.clone() }), vec![i])
            }
            4 if x.width > 1 => {
                let name = fresh("s");
                b.node(&name, NodeKind::Softmax, &[&x.name]);
                (Some(Val { name, tainted: false, ..x.clone() }), vec![i])
            }
            // Add: bias or another value of the same width
            5 if !x.tainted => {
                let partners: Vec<usize> = (0..vals.len())
                    .filter(|&j| j != i && vals[j].width == x.width && !vals[j].tainted)
                    .collect();
                let name = fresh("a");
                if let (Some(&j), true) = (partners.choose(rng), rng.gen_bool(0.6)) {
                    let y = vals[j].clone();
                    b.node(&name, NodeKind::Add, &[&x.name, &y.name]);
                    (
                        Some(Val {
                            name,
                            batched: x.batched || y.batched,
                            width: x.width,
                            user: x.user || y.user,
                            other: x.other || y.other,
                            cross_only: x.cross_only && y.cross_only,
                            tainted: false,
                        }),
                        vec![i, j],
                    )
                } else {
                    let bn = fresh("bias");
                    b.weight(&bn, 1, x.width, rng.gen());
                    b.node(&name, NodeKind::Add, &[&x.name, &bn]);
                    nodes += 1;
                    (Some(Val { name, ..x.clone() }), vec![i])
                }
            }
            6 => {
                let name = fresh("id");
                if rng.gen_bool(0.5) {
                    b.node(&name, NodeKind::Identity, &[&x.name]);
                } else {
                    b.node(&name, NodeKind::Reshape { dims: vec![x.width] }, &[&x.name]);
                }
                (Some(Val { name, ..x.clone() }), vec![i])
            }
            // Concat of 2..4 same-batching, untainted values
            7 | 8 | 11 | 12 if !x.tainted => {
                let mut pool: Vec<usize> = (0..vals.len())
                    .filter(|&j| vals[j].batched == x.batched && !vals[j].tainted)
                    .collect();
                pool.shuffle(rng);
                if x.batched && rng.gen_bool(opts.mixed_bias) {
                    let user = pool.iter().position(|&j| vals[j].user && !vals[j].other);
                    let other = pool.iter().position(|&j| vals[j].other);
                    if let (Some(a), Some(b)) = (user, other) {
                        pool.swap(0, a);
                        let b = if b == 0 { a } else { b };
                        pool.swap(1, b);
                    }
                }
                let k = rng.gen_range(2..=4).min(pool.len());
                if k < 2 {
                    (None, vec![])
                } else {
                    let parts: Vec<Val> = pool[..k].iter().map(|&j| vals[j].clone()).collect();
                    let segs: Vec<(FeatureDomain, usize)> = parts
                        .iter()
                        .map(|p| {
                            let d = if p.user && !p.other {
                                FeatureDomain::User
                            } else if p.cross_only {
                                FeatureDomain::Cross
                            } else {
                                FeatureDomain::Item
                            };
                            (d, p.width)
                        })
                        .collect();
                    let layout = FeatureLayout::from_pairs(&segs).unwrap();
                    let name = fresh("cat");
                    let names: Vec<&str> = parts.iter().map(|p| p.name.as_str()).collect();
                    b.concat(&name, &names, Some(layout));
                    let yellow = parts.iter().any(|p| p.user && !p.other);
                    let blue = parts.iter().any(|p| p.other);
                    let v = Val {
                        name,
                        batched: x.batched,
                        width: parts.iter().map(|p| p.width).sum(),
                        user: parts.iter().any(|p| p.user),
                        other: blue,
                        cross_only: parts.iter().all(|p| p.cross_only),
                        tainted: yellow && blue,
                    };
                    (Some(v), pool[..k].to_vec())
                }
            }
            _ => (None, vec![]),
        };
        if let Some(v) = new {
            for u in used {
                consumed[u] = true;
            }
            let mixed = v.tainted && v.name.starts_with("cat");
            vals.push(v);
            consumed.push(false);
            nodes += 1;
            // give fresh mixed concats a matmul reader now and then
            if mixed && rng.gen_bool(0.5) {
                let i = vals.len() - 1;
                let mut src = vals[i].name.clone();
                if rng.gen_bool(0.3) {
                    let r = fresh("id");
                    b.node(&r, NodeKind::Reshape { dims: vec![vals[i].width] }, &[&src]);
                    src = r;
                    nodes += 1;
                }
                let out = w(rng);
                let wn = fresh("w");
                b.weight(&wn, vals[i].width, out, rng.gen());
                let name = fresh("m");
                b.node(&name, NodeKind::MatMul, &[&src, &wn]);
                nodes += 2;
                consumed[i] = true;
                vals.push(Val { name, width: out, tainted: false, ..vals[i].clone() });
                consumed.push(false);
            }
        }
    }
    // every sink becomes an output
    let sinks: Vec<String> = vals
        .iter()
        .zip(&consumed)
        .skip(n_inputs)
        .filter(|(_, &c)| !c)
        .map(|(v, _)| v.name.clone())
        .collect();
    let mut any = false;
    for s in sinks {
        b.node(&fresh("out"), NodeKind::Output, &[&s]);
        any = true;
    }
    if !any {
        let last = vals.last().unwrap().name.clone();
        b.node(&fresh("out"), NodeKind::Output, &[&last]);
    }
    b.build().expect("generator produces valid graphs")
}

/// A random graph that has at least one optimizable matmul.
pub fn random_rewritable_graph<R: Rng>(rng: &mut R, opts: GenOpts) -> Graph {
    loop {
        let g = random_graph(rng, opts);
        if !mari_core::gca::run_gca(&g).is_empty() {
            return g;
        }
    }
}

/// Value of every node for one random bundle, keyed by node index.
fn all_values(g: &Graph, bundle: &InputBundle<f64>) -> Vec<Option<Tensor>> {
    // Expose every MatMul data operand as an extra output so the executor
    // hands its value back.
    let mut b = g.to_builder();
    let mut probes = Vec::new();
    for n in g.nodes() {
        if matches!(n.kind, NodeKind::MatMul) {
            let src = g.name(n.inputs[0]).to_string();
            let probe = format!("{}~probe", n.id);
            b.node(&probe, NodeKind::Output, &[&src]);
            probes.push((n.id.clone(), probe));
        }
    }
    let pg = b.build().unwrap();
    let r = Session::new(&pg).run(bundle, Strategy::Uoi).unwrap();
    let mut out = vec![None; g.len()];
    for (m, probe) in probes {
        out[g.id(&m).unwrap().0] = r.output(&probe).cloned();
    }
    out
}

fn constant_columns(t: &Tensor) -> Vec<bool> {
    let (rows, cols) = (t.rows(), t.cols());
    (0..cols)
        .map(|c| (1..rows).all(|r| t.get(&[r, c]) == t.get(&[0, c])))
        .collect()
}

/// MatMuls whose data operand, on random inputs, has some columns that are
/// identical across the batch and change with the user features, next to
/// columns that vary across the batch.
///
/// User dependence is judged against several redraws of the user features:
/// a user column stays batch-constant under every redraw and changes under
/// at least one, so a Relu clamping one draw to zero does not fool it.
pub fn brute_force_optimizable<R: Rng>(g: &Graph, rng: &mut R, batch: usize) -> BTreeSet<String> {
    const REDRAWS: usize = 16;
    let base = InputBundle::<f64>::random(g, batch, rng.gen()).unwrap();
    let va = all_values(g, &base);
    let alts: Vec<Vec<Option<Tensor>>> = (0..REDRAWS)
        .map(|_| {
            // same item/cross features, different user features
            let other_users = InputBundle::<f64>::random(g, batch, rng.gen()).unwrap();
            let mut alt = base.clone();
            for id in g.input_nodes() {
                let n = g.node(id);
                if let NodeKind::Input { domain: FeatureDomain::User, .. } = n.kind {
                    alt.insert(n.id.clone(), other_users.get(&n.id).unwrap().clone());
                }
            }
            all_values(g, &alt)
        })
        .collect();
    let mut found = BTreeSet::new();
    for n in g.nodes() {
        let i = g.id(&n.id).unwrap().0;
        let Some(a) = &va[i] else { continue };
        if a.rows() < 2 {
            continue;
        }
        let ca = constant_columns(a);
        let alt_vals: Vec<&Tensor> = alts.iter().map(|alt| alt[i].as_ref().unwrap()).collect();
        let alt_const: Vec<Vec<bool>> = alt_vals.iter().map(|t| constant_columns(t)).collect();
        let mut user_block = false;
        let mut varying = false;
        for c in 0..a.cols() {
            if !ca[c] {
                varying = true;
            } else if alt_const.iter().all(|k| k[c])
                && alt_vals.iter().any(|t| t.get(&[0, c]) != a.get(&[0, c]))
            {
                user_block = true;
            }
        }
        if user_block && varying {
            found.insert(n.id.clone());
        }
    }
    found
}

/// Replays a fixed sequence of choices, then always picks the first entry,
/// recording the worklist length at every step.
pub struct Scripted {
    pub script: Vec<usize>,
    pub taken: Vec<usize>,
    pub arity: Vec<usize>,
}

impl Scripted {
    pub fn new(script: Vec<usize>) -> Self {
        Scripted {
            script,
            taken: Vec::new(),
            arity: Vec::new(),
        }
    }

    /// The next script in depth-first order over the choice tree, if any.
    pub fn next_script(&self) -> Option<Vec<usize>> {
        let t = (0..self.taken.len())
            .rev()
            .find(|&t| self.taken[t] + 1 < self.arity[t])?;
        let mut s = self.taken[..t].to_vec();
        s.push(self.taken[t] + 1);
        Some(s)
    }
}

impl Schedule for Scripted {
    fn pick(&mut self, pending: usize) -> usize {
        let step = self.taken.len();
        let c = self.script.get(step).copied().unwrap_or(0).min(pending - 1);
        self.taken.push(c);
        self.arity.push(pending);
        c
    }
}

/// Picks uniformly at random.
pub struct RandomSchedule<R: Rng>(pub R);

impl<R: Rng> Schedule for RandomSchedule<R> {
    fn pick(&mut self, pending: usize) -> usize {
        self.0.gen_range(0..pending)
    }
}

/// Oldest entry first.
pub struct Fifo;

impl Schedule for Fifo {
    fn pick(&mut self, _pending: usize) -> usize {
        0
    }
}
