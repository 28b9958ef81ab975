use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use super::{
    FeatureDomain, FeatureLayout, Graph, Node, NodeId, NodeKind, Segment, Shape, WeightInit,
    USER_ONLY,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct Decl {
    id: String,
    kind: NodeKind,
    inputs: Vec<String>,
    infer_layout: bool,
}

/// Collects node declarations (forward references allowed) and validates them
/// into a [`Graph`].
#[derive(Debug, Clone, Default)]
pub struct GraphBuilder {
    decls: Vec<Decl>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub(super) fn from_graph(g: &Graph) -> Self {
        GraphBuilder {
            decls: g
                .nodes
                .iter()
                .map(|n| Decl {
                    id: n.id.clone(),
                    kind: n.kind.clone(),
                    inputs: n.inputs.iter().map(|&i| g.name(i).to_string()).collect(),
                    infer_layout: false,
                })
                .collect(),
        }
    }

    pub fn input(
        &mut self,
        id: &str,
        domain: FeatureDomain,
        dims: &[usize],
        batched: bool,
    ) -> &mut Self {
        self.node(
            id,
            NodeKind::Input {
                domain,
                dims: dims.to_vec(),
                batched,
            },
            &[] as &[&str],
        )
    }

    pub fn weight(&mut self, id: &str, rows: usize, cols: usize, seed: u64) -> &mut Self {
        self.node(
            id,
            NodeKind::Weight {
                rows,
                cols,
                init: WeightInit::seeded(seed, rows),
            },
            &[] as &[&str],
        )
    }

    pub fn node<S: AsRef<str>>(&mut self, id: &str, kind: NodeKind, inputs: &[S]) -> &mut Self {
        self.decls.push(Decl {
            id: id.to_string(),
            kind,
            inputs: inputs.iter().map(|s| s.as_ref().to_string()).collect(),
            infer_layout: false,
        });
        self
    }

    /// A concatenation; with `layout == None` the layout is derived from the
    /// upstream feature domains of each input.
    pub fn concat<S: AsRef<str>>(
        &mut self,
        id: &str,
        inputs: &[S],
        layout: Option<FeatureLayout>,
    ) -> &mut Self {
        let infer = layout.is_none();
        let layout = layout.unwrap_or_else(|| {
            FeatureLayout::from_pairs(&[(FeatureDomain::Item, 1)]).unwrap()
        });
        self.node(id, NodeKind::Concat { layout }, inputs);
        self.decls.last_mut().unwrap().infer_layout = infer;
        self
    }

    pub fn contains(&self, id: &str) -> bool {
        self.decls.iter().any(|d| d.id == id)
    }

    pub fn kind(&self, id: &str) -> Option<&NodeKind> {
        self.decls.iter().find(|d| d.id == id).map(|d| &d.kind)
    }

    pub fn inputs_of(&self, id: &str) -> Option<&[String]> {
        self.decls.iter().find(|d| d.id == id).map(|d| d.inputs.as_slice())
    }

    fn decl_mut(&mut self, id: &str) -> Result<&mut Decl> {
        self.decls
            .iter_mut()
            .find(|d| d.id == id)
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn set_kind(&mut self, id: &str, kind: NodeKind) -> Result<&mut Self> {
        let d = self.decl_mut(id)?;
        d.kind = kind;
        d.infer_layout = false;
        Ok(self)
    }

    pub fn set_inputs<S: AsRef<str>>(&mut self, id: &str, inputs: &[S]) -> Result<&mut Self> {
        self.decl_mut(id)?.inputs = inputs.iter().map(|s| s.as_ref().to_string()).collect();
        Ok(self)
    }

    pub fn remove(&mut self, id: &str) -> &mut Self {
        self.decls.retain(|d| d.id != id);
        self
    }

    /// `base` if unused, else `base.1`, `base.2`, ...
    pub fn fresh_id(&self, base: &str) -> String {
        if !self.contains(base) {
            return base.to_string();
        }
        (1..)
            .map(|i| format!("{base}.{i}"))
            .find(|c| !self.contains(c))
            .unwrap()
    }

    pub fn build(&self) -> Result<Graph> {
        let mut index = HashMap::with_capacity(self.decls.len());
        for (i, d) in self.decls.iter().enumerate() {
            if d.id.is_empty() {
                return Err(Error::invalid("node ids must be non-empty"));
            }
            if index.insert(d.id.clone(), NodeId(i)).is_some() {
                return Err(Error::DuplicateNode(d.id.clone()));
            }
        }
        let mut inputs = Vec::with_capacity(self.decls.len());
        for d in &self.decls {
            let ids = d
                .inputs
                .iter()
                .map(|name| {
                    index
                        .get(name)
                        .copied()
                        .ok_or_else(|| Error::UnknownNode(name.clone()))
                })
                .collect::<Result<Vec<_>>>()?;
            inputs.push(ids);
        }
        find_cycle(&self.decls, &inputs)?;
        let topo = topo_sort(&inputs);

        let n = self.decls.len();
        let mut shapes: Vec<Option<Shape>> = vec![None; n];
        let mut provenance = vec![0u8; n];
        let mut kinds: Vec<NodeKind> = self.decls.iter().map(|d| d.kind.clone()).collect();
        for &id in &topo {
            let d = &self.decls[id.0];
            let ins = &inputs[id.0];
            provenance[id.0] = match &d.kind {
                NodeKind::Input { domain, .. } => domain.bit(),
                _ => ins.iter().fold(0, |acc, i| acc | provenance[i.0]),
            };
            let in_shapes: Vec<&Shape> = ins.iter().map(|i| shapes[i.0].as_ref().unwrap()).collect();
            if d.infer_layout {
                kinds[id.0] = NodeKind::Concat {
                    layout: infer_layout(ins, &in_shapes, &provenance, &d.id)?,
                };
            }
            let shape = infer_shape(&d.id, &kinds[id.0], ins, &in_shapes, &provenance, &self.decls)?;
            shapes[id.0] = Some(shape);
        }

        let mut consumers = vec![Vec::new(); n];
        for (i, ins) in inputs.iter().enumerate() {
            for &src in ins {
                if !consumers[src.0].contains(&NodeId(i)) {
                    consumers[src.0].push(NodeId(i));
                }
            }
        }
        let nodes: Vec<Node> = self
            .decls
            .iter()
            .zip(kinds)
            .zip(inputs)
            .zip(shapes)
            .map(|(((d, kind), inputs), shape)| Node {
                id: d.id.clone(),
                kind,
                inputs,
                shape: shape.unwrap(),
            })
            .collect();
        let outputs = nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.kind == NodeKind::Output)
            .map(|(i, _)| NodeId(i))
            .collect();
        Ok(Graph {
            nodes,
            index,
            topo,
            consumers,
            outputs,
            provenance,
        })
    }
}

fn find_cycle(decls: &[Decl], inputs: &[Vec<NodeId>]) -> Result<()> {
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state = vec![0u8; decls.len()];
    for root in 0..decls.len() {
        if state[root] != 0 {
            continue;
        }
        let mut stack = vec![(root, 0usize)];
        state[root] = 1;
        while let Some(&mut (v, ref mut next)) = stack.last_mut() {
            if let Some(&u) = inputs[v].get(*next) {
                *next += 1;
                match state[u.0] {
                    0 => {
                        state[u.0] = 1;
                        stack.push((u.0, 0));
                    }
                    1 => {
                        return Err(Error::Cycle {
                            from: decls[u.0].id.clone(),
                            to: decls[v].id.clone(),
                        })
                    }
                    _ => {}
                }
            } else {
                state[v] = 2;
                stack.pop();
            }
        }
    }
    Ok(())
}

fn topo_sort(inputs: &[Vec<NodeId>]) -> Vec<NodeId> {
    let n = inputs.len();
    let mut indeg: Vec<usize> = inputs.iter().map(|i| i.len()).collect();
    let mut out_edges = vec![Vec::new(); n];
    for (v, ins) in inputs.iter().enumerate() {
        for u in ins {
            out_edges[u.0].push(v);
        }
    }
    let mut ready: BinaryHeap<Reverse<usize>> =
        (0..n).filter(|&v| indeg[v] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(v)) = ready.pop() {
        order.push(NodeId(v));
        for &w in &out_edges[v] {
            indeg[w] -= 1;
            if indeg[w] == 0 {
                ready.push(Reverse(w));
            }
        }
    }
    order
}

fn infer_layout(
    ins: &[NodeId],
    in_shapes: &[&Shape],
    provenance: &[u8],
    id: &str,
) -> Result<FeatureLayout> {
    let mut segs = Vec::with_capacity(ins.len());
    for (i, s) in ins.iter().zip(in_shapes) {
        let p = provenance[i.0];
        let domain = if p == USER_ONLY {
            FeatureDomain::User
        } else if p & FeatureDomain::Item.bit() != 0 {
            FeatureDomain::Item
        } else {
            FeatureDomain::Cross
        };
        let width = match s {
            Shape::Act { dims, .. } if dims.len() == 1 => dims[0],
            other => {
                return Err(Error::dim(format!(
                    "Concat `{id}` input has shape {other}; only rank-1 features can be concatenated"
                )))
            }
        };
        segs.push(Segment { domain, width });
    }
    Ok(FeatureLayout::new(segs)?.coalesced())
}

fn arity(id: &str, kind: &str, ins: &[NodeId], want: usize) -> Result<()> {
    if ins.len() != want {
        return Err(Error::invalid(format!(
            "{kind} node `{id}` takes {want} input(s), got {}",
            ins.len()
        )));
    }
    Ok(())
}

fn act<'a>(id: &str, s: &'a Shape, edge_from: &str) -> Result<(bool, &'a [usize])> {
    match s {
        Shape::Act { batched, dims } => Ok((*batched, dims)),
        Shape::Param { .. } => Err(Error::dim(format!(
            "edge {edge_from} -> {id}: expected an activation, got parameter {s}"
        ))),
    }
}

fn vector(id: &str, s: &Shape, edge_from: &str) -> Result<(bool, usize)> {
    let (b, dims) = act(id, s, edge_from)?;
    if dims.len() != 1 {
        return Err(Error::dim(format!(
            "edge {edge_from} -> {id}: expected a rank-1 feature, got {s}"
        )));
    }
    Ok((b, dims[0]))
}

fn param(id: &str, s: &Shape, edge_from: &str) -> Result<(usize, usize)> {
    match s {
        Shape::Param { rows, cols } => Ok((*rows, *cols)),
        _ => Err(Error::dim(format!(
            "edge {edge_from} -> {id}: expected a Weight, got {s}"
        ))),
    }
}

fn infer_shape(
    id: &str,
    kind: &NodeKind,
    ins: &[NodeId],
    sh: &[&Shape],
    provenance: &[u8],
    decls: &[Decl],
) -> Result<Shape> {
    let name = |i: usize| decls[ins[i].0].id.as_str();
    let tag = kind.tag().name();
    match kind {
        NodeKind::Input {
            dims, batched, ..
        } => {
            arity(id, tag, ins, 0)?;
            if dims.is_empty() || dims.len() > 2 || dims.contains(&0) {
                return Err(Error::dim(format!(
                    "Input `{id}` needs one or two positive per-sample dims, got {dims:?}"
                )));
            }
            Ok(Shape::Act {
                batched: *batched,
                dims: dims.clone(),
            })
        }
        NodeKind::Weight { rows, cols, init } => {
            arity(id, tag, ins, 0)?;
            if *rows == 0 || *cols == 0 {
                return Err(Error::dim(format!("Weight `{id}` must be non-empty")));
            }
            let sel_ok = match &init.rows {
                None => init.base_rows == *rows,
                Some(r) => r.len() == *rows && r.iter().all(|&x| x < init.base_rows),
            };
            if !sel_ok {
                return Err(Error::dim(format!(
                    "Weight `{id}` row selection does not yield {rows} rows of a {}-row base",
                    init.base_rows
                )));
            }
            Ok(Shape::Param {
                rows: *rows,
                cols: *cols,
            })
        }
        NodeKind::MatMul => {
            arity(id, tag, ins, 2)?;
            let (b, k) = vector(id, sh[0], name(0))?;
            let (r, c) = param(id, sh[1], name(1))?;
            if k != r {
                return Err(Error::dim(format!(
                    "edge {} -> {id}: {} cannot multiply {}",
                    name(0),
                    sh[0],
                    sh[1]
                )));
            }
            Ok(Shape::Act {
                batched: b,
                dims: vec![c],
            })
        }
        NodeKind::MatMulMaRI { split } => {
            let parts = split.iter().filter(|&&w| w > 0).count();
            if parts == 0 {
                return Err(Error::invalid(format!("MatMulMaRI `{id}` has an empty split")));
            }
            arity(id, tag, ins, 2 * parts)?;
            let mut out_cols = None;
            let mut slot = 0;
            for (dom, &w) in split.iter().enumerate() {
                if w == 0 {
                    continue;
                }
                let (b, k) = vector(id, sh[slot], name(slot))?;
                let (r, c) = param(id, sh[slot + 1], name(slot + 1))?;
                if dom == 0 && b {
                    return Err(Error::dim(format!(
                        "MatMulMaRI `{id}`: user operand `{}` must be unbatched",
                        name(slot)
                    )));
                }
                if k != w || r != w || out_cols.is_some_and(|oc| oc != c) {
                    return Err(Error::dim(format!(
                        "MatMulMaRI `{id}`: block {slot} shapes {} x {} disagree with split {split:?}",
                        sh[slot],
                        sh[slot + 1]
                    )));
                }
                out_cols = Some(c);
                slot += 2;
            }
            Ok(Shape::Act {
                batched: true,
                dims: vec![out_cols.unwrap()],
            })
        }
        NodeKind::Concat { layout } => {
            if ins.is_empty() {
                return Err(Error::invalid(format!("Concat `{id}` has no inputs")));
            }
            let mut batched = None;
            let mut widths = Vec::with_capacity(ins.len());
            for i in 0..ins.len() {
                let (b, w) = vector(id, sh[i], name(i))?;
                if batched.is_some_and(|x| x != b) {
                    return Err(Error::dim(format!(
                        "Concat `{id}` mixes batched and unbatched inputs (edge {} -> {id}); tile the user branch first",
                        name(i)
                    )));
                }
                batched = Some(b);
                widths.push(w);
            }
            let total: usize = widths.iter().sum();
            if layout.total_width() != total {
                return Err(Error::dim(format!(
                    "Concat `{id}` layout {layout} covers {} columns but inputs provide {total}",
                    layout.total_width()
                )));
            }
            // Columns labelled User must come from purely user-derived inputs.
            let mut off = 0;
            for (i, &w) in widths.iter().enumerate() {
                let user_only = provenance[ins[i].0] == USER_ONLY;
                if !user_only
                    && (off..off + w).any(|c| layout.domain_of_column(c) == Some(FeatureDomain::User))
                {
                    return Err(Error::invalid(format!(
                        "Concat `{id}` labels columns of `{}` as User but that input is not purely user-derived",
                        name(i)
                    )));
                }
                off += w;
            }
            Ok(Shape::Act {
                batched: batched.unwrap(),
                dims: vec![total],
            })
        }
        NodeKind::Tile => {
            arity(id, tag, ins, 1)?;
            let (b, dims) = act(id, sh[0], name(0))?;
            if b {
                return Err(Error::dim(format!(
                    "edge {} -> {id}: Tile input is already batched",
                    name(0)
                )));
            }
            Ok(Shape::Act {
                batched: true,
                dims: dims.to_vec(),
            })
        }
        NodeKind::Add => {
            arity(id, tag, ins, 2)?;
            let as_act = |s: &Shape, from: &str| -> Result<(bool, Vec<usize>)> {
                match s {
                    Shape::Param { rows: 1, cols } => Ok((false, vec![*cols])),
                    _ => act(id, s, from).map(|(b, d)| (b, d.to_vec())),
                }
            };
            let (b0, d0) = as_act(sh[0], name(0))?;
            let (b1, d1) = as_act(sh[1], name(1))?;
            if d0 != d1 {
                return Err(Error::dim(format!(
                    "Add `{id}`: {} and {} differ",
                    sh[0], sh[1]
                )));
            }
            Ok(Shape::Act {
                batched: b0 || b1,
                dims: d0,
            })
        }
        NodeKind::Relu | NodeKind::Identity | NodeKind::Output => {
            arity(id, tag, ins, 1)?;
            act(id, sh[0], name(0))?;
            Ok(sh[0].clone())
        }
        NodeKind::Softmax => {
            arity(id, tag, ins, 1)?;
            act(id, sh[0], name(0))?;
            Ok(sh[0].clone())
        }
        NodeKind::CrossAttention {
            d_q,
            d_kv,
            d_hidden,
        } => {
            if ins.len() != 4 && ins.len() != 5 {
                return Err(Error::invalid(format!(
                    "CrossAttention `{id}` takes 4 or 5 inputs, got {}",
                    ins.len()
                )));
            }
            let (bq, q) = vector(id, sh[0], name(0))?;
            let (bs, seq) = act(id, sh[1], name(1))?;
            if q != *d_q || seq.len() != 2 || seq[1] != *d_kv {
                return Err(Error::dim(format!(
                    "CrossAttention `{id}`: query {} / sequence {} disagree with d_q={d_q}, d_kv={d_kv}",
                    sh[0], sh[1]
                )));
            }
            let mut want = vec![(*d_kv, *d_hidden), (*d_kv, *d_hidden)];
            if ins.len() == 5 {
                want.insert(0, (*d_q, *d_hidden));
            } else if d_q != d_hidden {
                return Err(Error::dim(format!(
                    "CrossAttention `{id}` without a query projection needs d_q == d_hidden"
                )));
            }
            for (slot, w) in (2..ins.len()).zip(want) {
                if param(id, sh[slot], name(slot))? != w {
                    return Err(Error::dim(format!(
                        "edge {} -> {id}: expected param[{}x{}], got {}",
                        name(slot),
                        w.0,
                        w.1,
                        sh[slot]
                    )));
                }
            }
            Ok(Shape::Act {
                batched: bq || bs,
                dims: vec![*d_hidden],
            })
        }
        NodeKind::Reshape { dims } => {
            arity(id, tag, ins, 1)?;
            let (b, from) = act(id, sh[0], name(0))?;
            if dims.is_empty()
                || dims.len() > 2
                || dims.iter().product::<usize>() != from.iter().product::<usize>()
            {
                return Err(Error::dim(format!(
                    "Reshape `{id}` cannot turn {} into per-sample {dims:?}",
                    sh[0]
                )));
            }
            Ok(Shape::Act {
                batched: b,
                dims: dims.clone(),
            })
        }
        NodeKind::Slice { start, width } => {
            arity(id, tag, ins, 1)?;
            let (b, w) = vector(id, sh[0], name(0))?;
            if *width == 0 || start + width > w {
                return Err(Error::Bounds(format!(
                    "Slice `{id}` window [{start}, {}) exceeds width {w}",
                    start + width
                )));
            }
            Ok(Shape::Act {
                batched: b,
                dims: vec![*width],
            })
        }
        NodeKind::GatedSum { experts } => {
            arity(id, tag, ins, experts + 1)?;
            let (mut batched, g) = vector(id, sh[0], name(0))?;
            if g != *experts || *experts == 0 {
                return Err(Error::dim(format!(
                    "GatedSum `{id}`: gate width {g} != expert count {experts}"
                )));
            }
            let mut width = None;
            for i in 1..ins.len() {
                let (b, w) = vector(id, sh[i], name(i))?;
                if width.is_some_and(|x| x != w) {
                    return Err(Error::dim(format!(
                        "GatedSum `{id}`: experts have different widths"
                    )));
                }
                width = Some(w);
                batched |= b;
            }
            Ok(Shape::Act {
                batched,
                dims: vec![width.unwrap()],
            })
        }
    }
}
