//! Computation-graph model for ranking-model inference.
//!
//! A [`Graph`] is an immutable DAG of typed nodes. Feature inputs carry a
//! [`FeatureDomain`]; concatenations carry a [`FeatureLayout`] that records
//! which columns belong to which domain. Activations are either *batched*
//! (one row per candidate item, `B` rows at run time) or *unbatched* (a single
//! row shared by the whole request, as user-side tensors are).

mod builder;
mod fixture;
mod text;

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub use builder::GraphBuilder;
pub use fixture::{attention_fixture, fixture_ranking_model, matmul_site, ModelDims, SiteDims};
pub use text::{parse, serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FeatureDomain {
    User,
    Item,
    Cross,
}

impl FeatureDomain {
    pub const ALL: [FeatureDomain; 3] = [FeatureDomain::User, FeatureDomain::Item, FeatureDomain::Cross];

    pub fn name(self) -> &'static str {
        match self {
            FeatureDomain::User => "User",
            FeatureDomain::Item => "Item",
            FeatureDomain::Cross => "Cross",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "User" | "U" => Some(FeatureDomain::User),
            "Item" | "I" => Some(FeatureDomain::Item),
            "Cross" | "C" => Some(FeatureDomain::Cross),
            _ => None,
        }
    }

    fn bit(self) -> u8 {
        match self {
            FeatureDomain::User => 1,
            FeatureDomain::Item => 2,
            FeatureDomain::Cross => 4,
        }
    }

    pub(crate) fn index(self) -> usize {
        match self {
            FeatureDomain::User => 0,
            FeatureDomain::Item => 1,
            FeatureDomain::Cross => 2,
        }
    }
}

impl fmt::Display for FeatureDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Segment {
    pub domain: FeatureDomain,
    pub width: usize,
}

/// Ordered `(domain, width)` segments describing the columns of a
/// concatenated feature tensor.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FeatureLayout {
    segments: Vec<Segment>,
}

impl FeatureLayout {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::invalid("a feature layout needs at least one segment"));
        }
        if let Some(s) = segments.iter().find(|s| s.width == 0) {
            return Err(Error::invalid(format!(
                "segment widths must be positive ({} has width 0)",
                s.domain
            )));
        }
        Ok(FeatureLayout { segments })
    }

    pub fn from_pairs(pairs: &[(FeatureDomain, usize)]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .map(|&(domain, width)| Segment { domain, width })
                .collect(),
        )
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_width(&self) -> usize {
        self.segments.iter().map(|s| s.width).sum()
    }

    /// Per-domain column totals `(D_user, D_item, D_cross)`.
    pub fn domain_widths(&self) -> [usize; 3] {
        let mut w = [0; 3];
        for s in &self.segments {
            w[s.domain.index()] += s.width;
        }
        w
    }

    /// Column offset at which each segment starts.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.segments
            .iter()
            .map(|s| {
                let o = off;
                off += s.width;
                o
            })
            .collect()
    }

    /// Merges adjacent segments of the same domain.
    pub fn coalesced(&self) -> FeatureLayout {
        let mut out: Vec<Segment> = Vec::with_capacity(self.segments.len());
        for s in &self.segments {
            match out.last_mut() {
                Some(last) if last.domain == s.domain => last.width += s.width,
                _ => out.push(*s),
            }
        }
        FeatureLayout { segments: out }
    }

    /// True when every domain occupies one contiguous block and the blocks
    /// appear in User, Item, Cross order.
    pub fn is_neat(&self) -> bool {
        let c = self.coalesced();
        c.segments
            .windows(2)
            .all(|w| w[0].domain < w[1].domain)
    }

    pub fn domain_of_column(&self, col: usize) -> Option<FeatureDomain> {
        let mut off = 0;
        for s in &self.segments {
            if col < off + s.width {
                return Some(s.domain);
            }
            off += s.width;
        }
        None
    }
}

impl fmt::Display for FeatureLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, s) in self.segments.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "({},{})", s.domain, s.width)?;
        }
        f.write_str("]")
    }
}

/// Deterministic weight source: a `base_rows × cols` matrix drawn from a
/// seeded generator, optionally restricted to a selection of its rows.
///
/// Row selections are how layout reorganization and block splitting derive
/// new parameters from existing ones without storing values in the graph.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WeightInit {
    pub seed: u64,
    pub base_rows: usize,
    pub rows: Option<Vec<usize>>,
}

impl WeightInit {
    pub fn seeded(seed: u64, rows: usize) -> Self {
        WeightInit {
            seed,
            base_rows: rows,
            rows: None,
        }
    }

    /// Base-matrix row index for each row of this weight.
    pub fn row_indices(&self) -> Vec<usize> {
        match &self.rows {
            Some(r) => r.clone(),
            None => (0..self.base_rows).collect(),
        }
    }

    /// A weight made of `self`'s rows picked by `select` (indices into this
    /// weight, not into the base matrix).
    pub fn select_rows(&self, select: &[usize]) -> WeightInit {
        let current = self.row_indices();
        let rows: Vec<usize> = select.iter().map(|&i| current[i]).collect();
        let identity = rows.len() == self.base_rows && rows.iter().enumerate().all(|(i, &r)| i == r);
        WeightInit {
            seed: self.seed,
            base_rows: self.base_rows,
            rows: if identity { None } else { Some(rows) },
        }
    }

    /// Values are uniform in `[-1, 1) / sqrt(base_rows)`.
    pub fn materialize<E: Element>(&self, cols: usize) -> Tensor<E> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let scale = 1.0 / (self.base_rows as f64).sqrt();
        let base: Vec<f64> = (0..self.base_rows * cols)
            .map(|_| rng.gen_range(-1.0..1.0) * scale)
            .collect();
        let idx = self.row_indices();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for r in idx {
            data.extend(base[r * cols..(r + 1) * cols].iter().map(|&x| E::from_f64(x)));
        }
        Tensor::from_parts(vec![data.len() / cols, cols], data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    /// Feature input. `dims` is the per-sample shape (`[D]` or `[L, D]`).
    Input {
        domain: FeatureDomain,
        dims: Vec<usize>,
        batched: bool,
    },
    Weight {
        rows: usize,
        cols: usize,
        init: WeightInit,
    },
    MatMul,
    /// Re-parameterized matmul over `[user | item | cross]` row blocks of the
    /// weight. Inputs are `(x, w)` pairs for each domain with nonzero width,
    /// in User, Item, Cross order.
    MatMulMaRI {
        split: [usize; 3],
    },
    Concat {
        layout: FeatureLayout,
    },
    Tile,
    Add,
    Relu,
    Softmax,
    /// Single-head cross attention of item queries over a user sequence.
    /// Inputs: `[q, seq, w_k, w_v]` (query already projected, `d_q == d_hidden`)
    /// or `[x_q, seq, w_q, w_k, w_v]`.
    CrossAttention {
        d_q: usize,
        d_kv: usize,
        d_hidden: usize,
    },
    /// Per-sample reshape; the row dimension is untouched.
    Reshape {
        dims: Vec<usize>,
    },
    Identity,
    Output,
    /// Column window of a rank-2 activation.
    Slice {
        start: usize,
        width: usize,
    },
    /// Mixture-of-experts combination: `Σ_e gates[:, e] · expert_e`.
    /// Inputs: `[gates, expert_0, .., expert_{n-1}]`.
    GatedSum {
        experts: usize,
    },
}

/// Data-free discriminant of [`NodeKind`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KindTag {
    Input,
    Weight,
    MatMul,
    MatMulMaRI,
    Concat,
    Tile,
    Add,
    Relu,
    Softmax,
    CrossAttention,
    Reshape,
    Identity,
    Output,
    Slice,
    GatedSum,
}

impl KindTag {
    pub const ALL: [KindTag; 15] = [
        KindTag::Input,
        KindTag::Weight,
        KindTag::MatMul,
        KindTag::MatMulMaRI,
        KindTag::Concat,
        KindTag::Tile,
        KindTag::Add,
        KindTag::Relu,
        KindTag::Softmax,
        KindTag::CrossAttention,
        KindTag::Reshape,
        KindTag::Identity,
        KindTag::Output,
        KindTag::Slice,
        KindTag::GatedSum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KindTag::Input => "Input",
            KindTag::Weight => "Weight",
            KindTag::MatMul => "MatMul",
            KindTag::MatMulMaRI => "MatMulMaRI",
            KindTag::Concat => "Concat",
            KindTag::Tile => "Tile",
            KindTag::Add => "Add",
            KindTag::Relu => "Relu",
            KindTag::Softmax => "Softmax",
            KindTag::CrossAttention => "CrossAttention",
            KindTag::Reshape => "Reshape",
            KindTag::Identity => "Identity",
            KindTag::Output => "Output",
            KindTag::Slice => "Slice",
            KindTag::GatedSum => "GatedSum",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        KindTag::ALL.iter().copied().find(|k| k.name() == s)
    }
}

impl NodeKind {
    pub fn tag(&self) -> KindTag {
        match self {
            NodeKind::Input { .. } => KindTag::Input,
            NodeKind::Weight { .. } => KindTag::Weight,
            NodeKind::MatMul => KindTag::MatMul,
            NodeKind::MatMulMaRI { .. } => KindTag::MatMulMaRI,
            NodeKind::Concat { .. } => KindTag::Concat,
            NodeKind::Tile => KindTag::Tile,
            NodeKind::Add => KindTag::Add,
            NodeKind::Relu => KindTag::Relu,
            NodeKind::Softmax => KindTag::Softmax,
            NodeKind::CrossAttention { .. } => KindTag::CrossAttention,
            NodeKind::Reshape { .. } => KindTag::Reshape,
            NodeKind::Identity => KindTag::Identity,
            NodeKind::Output => KindTag::Output,
            NodeKind::Slice { .. } => KindTag::Slice,
            NodeKind::GatedSum { .. } => KindTag::GatedSum,
        }
    }

    pub fn is_input(&self) -> bool {
        matches!(self, NodeKind::Input { .. })
    }
}

/// Static shape of a node's value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Shape {
    /// `batched` activations have `B` rows at run time, others one row.
    Act { batched: bool, dims: Vec<usize> },
    Param { rows: usize, cols: usize },
}

impl Shape {
    pub fn is_batched(&self) -> bool {
        matches!(self, Shape::Act { batched: true, .. })
    }

    /// Per-sample width for rank-1 activations, `cols` for parameters.
    pub fn width(&self) -> usize {
        match self {
            Shape::Act { dims, .. } => *dims.last().unwrap(),
            Shape::Param { cols, .. } => *cols,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Act { batched, dims } => {
                write!(f, "[{}", if *batched { "B" } else { "1" })?;
                for d in dims {
                    write!(f, "x{d}")?;
                }
                f.write_str("]")
            }
            Shape::Param { rows, cols } => write!(f, "param[{rows}x{cols}]"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub kind: NodeKind,
    pub inputs: Vec<NodeId>,
    pub shape: Shape,
}

const USER_ONLY: u8 = 1;

/// Validated, immutable computation graph.
///
/// Equality is structural: same node ids in the same declaration order, same
/// kinds, edges, layouts and shapes.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    index: HashMap<String, NodeId>,
    topo: Vec<NodeId>,
    consumers: Vec<Vec<NodeId>>,
    outputs: Vec<NodeId>,
    provenance: Vec<u8>,
}

impl PartialEq for Graph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes
    }
}

impl Graph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn id(&self, name: &str) -> Option<NodeId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Result<&Node> {
        self.id(name)
            .map(|i| self.node(i))
            .ok_or_else(|| Error::UnknownNode(name.to_string()))
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.nodes[id.0].id
    }

    /// Topological order; ties broken by declaration order.
    pub fn topo_order(&self) -> &[NodeId] {
        &self.topo
    }

    pub fn consumers(&self, id: NodeId) -> &[NodeId] {
        &self.consumers[id.0]
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn input_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.ids().filter(|&i| self.node(i).kind.is_input())
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn edge_count(&self) -> usize {
        self.nodes.iter().map(|n| n.inputs.len()).sum()
    }

    /// True when every feature input upstream of `id` is user-side (and there
    /// is at least one).
    pub fn is_user_only(&self, id: NodeId) -> bool {
        self.provenance[id.0] == USER_ONLY
    }

    /// Feature domains of the inputs upstream of `id`.
    pub fn upstream_domains(&self, id: NodeId) -> Vec<FeatureDomain> {
        FeatureDomain::ALL
            .into_iter()
            .filter(|d| self.provenance[id.0] & d.bit() != 0)
            .collect()
    }

    pub fn to_builder(&self) -> GraphBuilder {
        GraphBuilder::from_graph(self)
    }

    /// Drops nodes that no output depends on. Inputs are always kept so the
    /// graph's input signature is unchanged.
    pub fn prune(&self) -> Result<Graph> {
        let live = self.live_mask();
        if live.iter().all(|&l| l) {
            return Ok(self.clone());
        }
        let mut b = self.to_builder();
        for (i, l) in live.iter().enumerate() {
            if !l {
                b.remove(&self.nodes[i].id);
            }
        }
        b.build()
    }

    /// `true` for inputs, outputs and every node an output depends on.
    pub fn live_mask(&self) -> Vec<bool> {
        let mut live = vec![false; self.nodes.len()];
        let mut stack: Vec<NodeId> = self
            .ids()
            .filter(|&i| matches!(self.node(i).kind, NodeKind::Output | NodeKind::Input { .. }))
            .collect();
        while let Some(n) = stack.pop() {
            if std::mem::replace(&mut live[n.0], true) {
                continue;
            }
            stack.extend(self.node(n).inputs.iter().copied());
        }
        live
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use FeatureDomain::*;

    #[test]
    fn layout_widths_and_neatness() {
        let l = FeatureLayout::from_pairs(&[(User, 2), (Cross, 1), (Item, 3), (User, 2)]).unwrap();
        assert_eq!(l.total_width(), 8);
        assert_eq!(l.domain_widths(), [4, 3, 1]);
        assert!(!l.is_neat());
        assert!(FeatureLayout::from_pairs(&[(User, 4), (Item, 3), (Cross, 1)]).unwrap().is_neat());
        assert!(FeatureLayout::from_pairs(&[(Item, 5)]).unwrap().is_neat());
        assert!(FeatureLayout::from_pairs(&[(User, 1), (User, 2), (Cross, 1)]).unwrap().is_neat());
        assert!(!FeatureLayout::from_pairs(&[(Cross, 1), (Item, 1)]).unwrap().is_neat());
        assert!(FeatureLayout::new(vec![]).is_err());
        assert!(FeatureLayout::from_pairs(&[(User, 0)]).is_err());
        assert_eq!(l.domain_of_column(2), Some(Cross));
        assert_eq!(l.domain_of_column(8), None);
    }

    #[test]
    fn weight_row_selection_composes() {
        let w = WeightInit::seeded(3, 4);
        let full: Tensor = w.materialize(2);
        let swapped = w.select_rows(&[1, 0, 3, 2]);
        let t: Tensor = swapped.materialize(2);
        assert_eq!(t.row(0), full.row(1));
        let back = swapped.select_rows(&[1, 0, 3, 2]);
        assert_eq!(back, w);
        let sub = swapped.select_rows(&[2, 3]);
        let s: Tensor = sub.materialize(2);
        assert_eq!(s.row(0), full.row(3));
        assert_eq!(s.row(1), full.row(2));
    }
}
