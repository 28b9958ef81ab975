//! Split matmuls over `[user | item | cross]` inputs so the user block is
//! multiplied once per request.
//!
//! `Tile(x_u)·W_u + x_i·W_i + x_c·W_c` has the same value as the original
//! `[Tile(x_u) | x_i | x_c]·W`, but the first term only needs the single user
//! row. The rewritten node ([`NodeKind::MatMulMaRI`]) takes the untiled user
//! operand and broadcasts its product over the batch.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::flops::{mari_flops, FlopsReport, MatmulDims};
use crate::gca::run_gca;
use crate::graph::{FeatureDomain, FeatureLayout, Graph, GraphBuilder, NodeId, NodeKind, Segment};
use crate::reorg::{apply_to_graph, plan_reorg};

/// Follows `m`'s data operand back through Reshape/Identity nodes to the
/// Concat it reads.
fn feeding_concat(g: &Graph, m: NodeId) -> Option<NodeId> {
    let mut cur = g.node(m).inputs[0];
    loop {
        match &g.node(cur).kind {
            NodeKind::Concat { .. } => return Some(cur),
            NodeKind::Reshape { .. } | NodeKind::Identity => cur = g.node(cur).inputs[0],
            _ => return None,
        }
    }
}

struct Rewriter<'g> {
    g: &'g Graph,
    b: GraphBuilder,
    /// Unbatched stand-in for a batched, user-only node.
    untiled: HashMap<NodeId, String>,
}

impl Rewriter<'_> {
    /// Name of a node computing `n`'s value for the single user row.
    fn untile(&mut self, n: NodeId) -> Result<String> {
        if let Some(s) = self.untiled.get(&n) {
            return Ok(s.clone());
        }
        let node = self.g.node(n);
        let name = if !node.shape.is_batched() {
            node.id.clone()
        } else {
            match &node.kind {
                NodeKind::Tile => self.g.name(node.inputs[0]).to_string(),
                NodeKind::Input { .. } => {
                    return Err(Error::Precondition(format!(
                        "user feature `{}` is batched at the source; it has no single-row form to compute once",
                        node.id
                    )))
                }
                kind => {
                    if !self.g.is_user_only(n) {
                        return Err(Error::Precondition(format!(
                            "`{}` is labelled user-side but depends on item or cross features",
                            node.id
                        )));
                    }
                    let ins = node
                        .inputs
                        .clone()
                        .into_iter()
                        .map(|i| self.untile(i))
                        .collect::<Result<Vec<_>>>()?;
                    let id = self.b.fresh_id(&format!("{}~user", node.id));
                    self.b.node(&id, kind.clone(), &ins);
                    id
                }
            }
        };
        self.untiled.insert(n, name.clone());
        Ok(name)
    }

    /// One operand per domain block: slices where a block starts or ends
    /// inside an input, a Concat when a block spans several inputs.
    fn block_operand(
        &mut self,
        m: &str,
        concat: NodeId,
        domain: FeatureDomain,
        start: usize,
        width: usize,
    ) -> Result<String> {
        let cnode = self.g.node(concat);
        let mut pieces = Vec::new();
        let mut off = 0;
        for &inp in &cnode.inputs {
            let w = self.g.node(inp).shape.width();
            let lo = start.max(off);
            let hi = (start + width).min(off + w);
            if lo < hi {
                let src = if domain == FeatureDomain::User {
                    self.untile(inp)?
                } else {
                    self.g.name(inp).to_string()
                };
                if lo == off && hi == off + w {
                    pieces.push(src);
                } else {
                    let id = self.b.fresh_id(&format!("{m}.x_{}.part", tag(domain)));
                    self.b.node(
                        &id,
                        NodeKind::Slice {
                            start: lo - off,
                            width: hi - lo,
                        },
                        &[src],
                    );
                    pieces.push(id);
                }
            }
            off += w;
        }
        if pieces.len() == 1 {
            return Ok(pieces.pop().unwrap());
        }
        let id = self.b.fresh_id(&format!("{m}.x_{}", tag(domain)));
        let layout = FeatureLayout::new(vec![Segment { domain, width }])?;
        self.b.concat(&id, &pieces, Some(layout));
        Ok(id)
    }
}

fn tag(d: FeatureDomain) -> &'static str {
    match d {
        FeatureDomain::User => "user",
        FeatureDomain::Item => "item",
        FeatureDomain::Cross => "cross",
    }
}

/// Removes nodes that this rewrite made dead, leaving any that were dead
/// beforehand.
fn drop_orphans(before: &Graph, after: Graph) -> Result<Graph> {
    let was_live: HashSet<&str> = before
        .live_mask()
        .iter()
        .enumerate()
        .filter(|(_, &l)| l)
        .map(|(i, _)| before.name(NodeId(i)))
        .collect();
    let live = after.live_mask();
    let mut dead = vec![false; after.len()];
    // dead nodes reading a removed node have to go as well
    for &i in after.topo_order() {
        dead[i.0] = !live[i.0]
            && (was_live.contains(after.name(i)) || after.node(i).inputs.iter().any(|p| dead[p.0]));
    }
    if !dead.contains(&true) {
        return Ok(after);
    }
    let mut b = after.to_builder();
    for i in after.ids().filter(|i| dead[i.0]) {
        b.remove(after.name(i));
    }
    b.build()
}

/// Replaces MatMul `m` by a [`NodeKind::MatMulMaRI`] over the user, item and
/// cross blocks of `layout`, which must be the (neat) layout of the Concat
/// feeding `m`. The weight is split into `{m}.w_user`, `{m}.w_item` and
/// `{m}.w_cross`; the node keeps the id `m`, so downstream bias adds and
/// consumers are untouched.
pub fn rewrite_site(g: &Graph, m: &str, layout: &FeatureLayout) -> Result<Graph> {
    let mid = g.id(m).ok_or_else(|| Error::UnknownNode(m.to_string()))?;
    let mnode = g.node(mid);
    if !matches!(mnode.kind, NodeKind::MatMul) {
        return Err(Error::invalid(format!(
            "`{m}` is a {}, not a MatMul",
            mnode.kind.tag().name()
        )));
    }
    let concat = feeding_concat(g, mid).ok_or_else(|| {
        Error::Precondition(format!("`{m}` does not read a Concat through data-movement nodes"))
    })?;
    let NodeKind::Concat { layout: actual } = &g.node(concat).kind else { unreachable!() };
    if actual.coalesced() != layout.coalesced() {
        return Err(Error::invalid(format!(
            "layout {layout} does not match {actual} on `{}`",
            g.name(concat)
        )));
    }
    if !layout.is_neat() {
        return Err(Error::Precondition(format!(
            "`{m}` reads the fragmented layout {layout}; reorganize the site first so user, item and cross columns are contiguous"
        )));
    }
    let wid = mnode.inputs[1];
    let NodeKind::Weight { cols, init, .. } = &g.node(wid).kind else {
        return Err(Error::invalid(format!("`{m}` must multiply by a Weight node")));
    };

    let split = layout.domain_widths();
    let mut rw = Rewriter {
        g,
        b: g.to_builder(),
        untiled: HashMap::new(),
    };
    let mut ins = Vec::new();
    let mut start = 0;
    for d in FeatureDomain::ALL {
        let w = split[d.index()];
        if w == 0 {
            continue;
        }
        let x = rw.block_operand(m, concat, d, start, w)?;
        let wname = rw.b.fresh_id(&format!("{m}.w_{}", tag(d)));
        let rows: Vec<usize> = (start..start + w).collect();
        rw.b.node(
            &wname,
            NodeKind::Weight {
                rows: w,
                cols: *cols,
                init: init.select_rows(&rows),
            },
            &[] as &[&str],
        );
        ins.push(x);
        ins.push(wname);
        start += w;
    }
    rw.b.set_kind(m, NodeKind::MatMulMaRI { split })?;
    rw.b.set_inputs(m, &ins)?;
    drop_orphans(g, rw.b.build()?)
}

/// One rewritten matmul.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteReport {
    pub matmul: String,
    pub concat: String,
    /// `(D_user, D_item, D_cross)`.
    pub split: [usize; 3],
    pub d: usize,
    /// The Concat's columns had to be regrouped first.
    pub reorganized: bool,
}

impl SiteReport {
    pub fn dims(&self, b: usize) -> MatmulDims {
        MatmulDims {
            b,
            du: self.split[0],
            di: self.split[1],
            dc: self.split[2],
            d: self.d,
        }
    }

    pub fn flops(&self, b: usize) -> Result<FlopsReport> {
        mari_flops(&self.dims(b))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RewriteReport {
    pub sites: Vec<SiteReport>,
}

impl RewriteReport {
    /// Number of distinct Concats whose matmuls were rewritten.
    pub fn site_groups(&self) -> usize {
        self.sites.iter().map(|s| s.concat.as_str()).collect::<HashSet<_>>().len()
    }
}

/// Colors the graph, regroups each mixed Concat's columns, and rewrites every
/// optimizable MatMul. Graphs without mixed Concats come back unchanged.
pub fn rewrite_all(g: &Graph) -> Result<(Graph, RewriteReport)> {
    let groups = run_gca(g).groups();
    let mut report = RewriteReport::default();
    let mut cur = g.clone();
    for (concat, matmuls) in groups {
        let site = g.name(concat).to_string();
        let NodeKind::Concat { layout } = &g.node(concat).kind else { unreachable!() };
        let p = plan_reorg(layout);
        let reorganized = !p.is_identity();
        if reorganized {
            cur = apply_to_graph(&cur, &site, &p).map_err(|e| e.at_site(site.clone()))?;
        }
        for m in matmuls {
            let name = g.name(m).to_string();
            let mid = cur.id(&name).expect("matmul ids survive reorganization");
            let c = feeding_concat(&cur, mid).expect("site still reads a Concat");
            let NodeKind::Concat { layout } = cur.node(c).kind.clone() else { unreachable!() };
            let d = cur.node(mid).shape.width();
            cur = rewrite_site(&cur, &name, &layout).map_err(|e| e.at_site(name.clone()))?;
            report.sites.push(SiteReport {
                matmul: name,
                concat: site.clone(),
                split: layout.domain_widths(),
                d,
                reorganized,
            });
        }
    }
    Ok((cur, report))
}

/// Pessimized copy of `m` for benchmarking: each operand is cut into
/// column chunks of at most `chunk`, multiplied separately and summed with a
/// chain of Adds whose last node takes the id `m`. Works on plain and split
/// matmuls; chunks never straddle a user/item/cross boundary.
pub fn fragment_site(g: &Graph, m: &str, chunk: usize) -> Result<Graph> {
    if chunk == 0 {
        return Err(Error::invalid("chunk size must be at least 1"));
    }
    let mid = g.id(m).ok_or_else(|| Error::UnknownNode(m.to_string()))?;
    let node = g.node(mid);
    let pairs: Vec<(NodeId, NodeId)> = match &node.kind {
        NodeKind::MatMul => vec![(node.inputs[0], node.inputs[1])],
        NodeKind::MatMulMaRI { .. } => node.inputs.chunks(2).map(|p| (p[0], p[1])).collect(),
        other => {
            return Err(Error::invalid(format!(
                "`{m}` is a {}, not a matmul",
                other.tag().name()
            )))
        }
    };
    if pairs.iter().all(|&(x, _)| g.node(x).shape.width() <= chunk) && pairs.len() == 1 {
        return Ok(g.clone());
    }

    let mut b = g.to_builder();
    let mut products: Vec<String> = Vec::new();
    for &(x, w) in &pairs {
        let NodeKind::Weight { cols, init, .. } = &g.node(w).kind else {
            return Err(Error::invalid(format!("`{m}` must multiply by Weight nodes")));
        };
        let width = g.node(x).shape.width();
        for s in (0..width).step_by(chunk) {
            let cw = chunk.min(width - s);
            let k = products.len();
            let xs = if cw == width {
                g.name(x).to_string()
            } else {
                let id = b.fresh_id(&format!("{m}.frag{k}.x"));
                b.node(&id, NodeKind::Slice { start: s, width: cw }, &[g.name(x)]);
                id
            };
            let ws = b.fresh_id(&format!("{m}.frag{k}.w"));
            let rows: Vec<usize> = (s..s + cw).collect();
            b.node(
                &ws,
                NodeKind::Weight {
                    rows: cw,
                    cols: *cols,
                    init: init.select_rows(&rows),
                },
                &[] as &[&str],
            );
            let p = b.fresh_id(&format!("{m}.frag{k}"));
            b.node(&p, NodeKind::MatMul, &[xs, ws]);
            products.push(p);
        }
    }
    // a sum of single-row products that must come out with B rows is tiled
    let tile = node.shape.is_batched() && !pairs.iter().any(|&(x, _)| g.node(x).shape.is_batched());
    let last = products.len() - 1;
    let mut acc = products[0].clone();
    for (k, p) in products.iter().enumerate().skip(1) {
        if k == last && !tile {
            b.set_kind(m, NodeKind::Add)?;
            b.set_inputs(m, &[&acc, p])?;
        } else {
            let id = b.fresh_id(&format!("{m}.frag_sum{k}"));
            b.node(&id, NodeKind::Add, &[&acc, p]);
            acc = id;
        }
    }
    if tile {
        b.set_kind(m, NodeKind::Tile)?;
        b.set_inputs(m, &[&acc])?;
    }
    drop_orphans(g, b.build()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{matmul_site, SiteDims};
    use FeatureDomain::*;

    #[test]
    fn rewrite_splits_weight_and_keeps_the_id() {
        let g = matmul_site(SiteDims { du: 4, di: 3, dc: 2, d: 5 }, 3).unwrap();
        let NodeKind::Concat { layout } = &g.by_name("x").unwrap().kind else { panic!() };
        let r = rewrite_site(&g, "mm", layout).unwrap();
        let mm = r.by_name("mm").unwrap();
        assert_eq!(mm.kind, NodeKind::MatMulMaRI { split: [4, 3, 2] });
        let ins: Vec<&str> = mm.inputs.iter().map(|&i| r.name(i)).collect();
        assert_eq!(ins, ["user", "mm.w_user", "item", "mm.w_item", "cross", "mm.w_cross"]);
        // the concat, its tile and the original weight are gone
        assert!(r.id("x").is_none() && r.id("user_tiled").is_none() && r.id("w").is_none());
    }

    #[test]
    fn fragmented_layout_needs_reorg_first() {
        let mut b = crate::graph::GraphBuilder::new();
        b.input("u", User, &[2], false)
            .input("i", Item, &[3], true)
            .node("t", NodeKind::Tile, &["u"]);
        b.concat(
            "c",
            &["i", "t"],
            Some(FeatureLayout::from_pairs(&[(Item, 3), (User, 2)]).unwrap()),
        );
        b.weight("w", 5, 2, 1)
            .node("m", NodeKind::MatMul, &["c", "w"])
            .node("o", NodeKind::Output, &["m"]);
        let g = b.build().unwrap();
        let NodeKind::Concat { layout } = &g.by_name("c").unwrap().kind else { panic!() };
        let err = rewrite_site(&g, "m", layout).unwrap_err();
        assert!(matches!(err, Error::Precondition(ref s) if s.contains("reorganize")), "{err}");

        let (r, rep) = rewrite_all(&g).unwrap();
        assert!(rep.sites[0].reorganized);
        assert!(matches!(r.by_name("m").unwrap().kind, NodeKind::MatMulMaRI { split: [2, 3, 0] }));
    }

    #[test]
    fn no_mixed_concat_means_no_change() {
        let g = matmul_site(SiteDims { du: 0, di: 3, dc: 2, d: 2 }, 1).unwrap();
        let (r, rep) = rewrite_all(&g).unwrap();
        assert_eq!(r, g);
        assert!(rep.sites.is_empty());
    }

    #[test]
    fn rewrite_all_is_idempotent() {
        let g = crate::graph::fixture_ranking_model(&Default::default()).unwrap();
        let (once, rep) = rewrite_all(&g).unwrap();
        assert_eq!(rep.site_groups(), 3);
        let (twice, rep2) = rewrite_all(&once).unwrap();
        assert_eq!(twice, once);
        assert!(rep2.sites.is_empty());
    }

    #[test]
    fn fragment_counts_chunks() {
        let g = matmul_site(SiteDims { du: 0, di: 3, dc: 0, d: 2 }, 1).unwrap();
        assert_eq!(fragment_site(&g, "mm", 3).unwrap(), g);
        let f = fragment_site(&g, "mm", 1).unwrap();
        let mms = f
            .nodes()
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::MatMul))
            .count();
        assert_eq!(mms, 3);
        assert!(matches!(f.by_name("mm").unwrap().kind, NodeKind::Add));
        assert!(fragment_site(&g, "mm", 0).is_err());
    }
}
