//! Layout reorganization: regroup a fragmented concatenation into
//! contiguous user, item and cross blocks and permute the rows of every
//! weight that reads it to match.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::gca::{run_gca, GcaConfig};
use crate::graph::{FeatureDomain, FeatureLayout, Graph, NodeId, NodeKind, Segment};
use crate::tensor::{Element, Tensor};

/// `perm[new] = old` column index, plus the widths of the user, item and
/// cross blocks after reordering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnPermutation {
    perm: Vec<usize>,
    boundaries: [usize; 3],
}

impl ColumnPermutation {
    pub fn identity(n: usize, boundaries: [usize; 3]) -> Self {
        ColumnPermutation {
            perm: (0..n).collect(),
            boundaries,
        }
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// `(D_user, D_item, D_cross)`.
    pub fn boundaries(&self) -> [usize; 3] {
        self.boundaries
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &p)| i == p)
    }

    pub fn inverse(&self) -> ColumnPermutation {
        let mut inv = vec![0; self.perm.len()];
        for (new, &old) in self.perm.iter().enumerate() {
            inv[old] = new;
        }
        ColumnPermutation {
            perm: inv,
            boundaries: self.boundaries,
        }
    }

    /// `self` after `first`: `(self ∘ first)[i] = first[self[i]]`.
    pub fn then(&self, first: &ColumnPermutation) -> ColumnPermutation {
        ColumnPermutation {
            perm: self.perm.iter().map(|&i| first.perm[i]).collect(),
            boundaries: self.boundaries,
        }
    }

    /// The neat layout this permutation produces (zero-width blocks omitted).
    pub fn target_layout(&self) -> FeatureLayout {
        let segs = FeatureDomain::ALL
            .into_iter()
            .zip(self.boundaries)
            .filter(|&(_, w)| w > 0)
            .map(|(domain, width)| Segment { domain, width })
            .collect();
        FeatureLayout::new(segs).expect("a permutation over a non-empty layout")
    }
}

/// Stable grouping of the layout's columns: user segments first, then item,
/// then cross, each in their original order.
pub fn plan_reorg(layout: &FeatureLayout) -> ColumnPermutation {
    let offsets = layout.offsets();
    let mut perm = Vec::with_capacity(layout.total_width());
    for d in FeatureDomain::ALL {
        for (s, &off) in layout.segments().iter().zip(&offsets) {
            if s.domain == d {
                perm.extend(off..off + s.width);
            }
        }
    }
    ColumnPermutation {
        perm,
        boundaries: layout.domain_widths(),
    }
}

/// Row `i` of the result is row `perm[i]` of `w`.
pub fn apply_to_weights<E: Element>(w: &Tensor<E>, p: &ColumnPermutation) -> Result<Tensor<E>> {
    if w.rank() != 2 || w.rows() != p.len() {
        return Err(Error::dim(format!(
            "cannot permute the rows of a {:?} weight with a {}-column permutation",
            w.shape(),
            p.len()
        )));
    }
    let cols = w.cols();
    let mut data = Vec::with_capacity(w.numel());
    for &r in &p.perm {
        data.extend_from_slice(w.row(r));
    }
    Ok(Tensor::from_parts(vec![p.len(), cols], data))
}

/// Column `i` of the result is column `perm[i]` of `x`.
pub fn apply_to_columns<E: Element>(x: &Tensor<E>, p: &ColumnPermutation) -> Result<Tensor<E>> {
    if x.rank() != 2 || x.cols() != p.len() {
        return Err(Error::dim(format!(
            "cannot permute the columns of a {:?} tensor with a {}-column permutation",
            x.shape(),
            p.len()
        )));
    }
    let mut data = Vec::with_capacity(x.numel());
    for r in 0..x.rows() {
        let row = x.row(r);
        data.extend(p.perm.iter().map(|&c| row[c]));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// A contiguous run of one concat input's columns that lands contiguously in
/// the reordered output.
#[derive(Debug, Clone, Copy)]
struct Piece {
    input: usize,
    start: usize,
    width: usize,
}

/// Nodes on data-movement paths from `concat` to a MatMul's data slot, and
/// those MatMuls.
fn site_closure(g: &Graph, concat: NodeId) -> (Vec<NodeId>, Vec<NodeId>) {
    let non_comp = GcaConfig::default().non_computational;
    let mut path = vec![concat];
    let mut matmuls = Vec::new();
    let mut seen = HashSet::from([concat]);
    let mut i = 0;
    while i < path.len() {
        let u = path[i];
        i += 1;
        for &v in g.consumers(u) {
            let n = g.node(v);
            if matches!(n.kind, NodeKind::MatMul) && n.inputs[0] == u {
                if seen.insert(v) {
                    matmuls.push(v);
                }
            } else if non_comp.contains(&n.kind.tag()) && seen.insert(v) {
                path.push(v);
            }
        }
    }
    // keep only the nodes some MatMul actually reads through
    let mut keep: HashSet<NodeId> = matmuls.iter().map(|&m| g.node(m).inputs[0]).collect();
    for &u in path.iter().rev() {
        if keep.contains(&u) {
            let mut cur = u;
            while cur != concat {
                cur = g.node(cur).inputs[0];
                keep.insert(cur);
            }
        }
    }
    path.retain(|u| keep.contains(u));
    matmuls.sort();
    (path, matmuls)
}

/// Rewrites the Concat `site` so its columns come out in `p`'s order, and
/// row-permutes the weight of every MatMul that reads it (directly or
/// through reshapes/identities).
///
/// When the Concat or an intermediate node also feeds something other than
/// those MatMuls, the reordered Concat is added alongside the original
/// instead of replacing it.
pub fn apply_to_graph(g: &Graph, site: &str, p: &ColumnPermutation) -> Result<Graph> {
    let cid = g
        .id(site)
        .ok_or_else(|| Error::UnknownNode(site.to_string()))?;
    let cnode = g.node(cid);
    let NodeKind::Concat { layout } = &cnode.kind else {
        return Err(Error::invalid(format!(
            "reorganization site `{site}` is a {}, not a Concat",
            cnode.kind.tag().name()
        )));
    };
    if layout.total_width() != p.len() {
        return Err(Error::dim(format!(
            "permutation covers {} columns but `{site}` has {}",
            p.len(),
            layout.total_width()
        )));
    }
    if p.is_identity() {
        return Ok(g.clone());
    }

    let widths: Vec<usize> = cnode.inputs.iter().map(|&i| g.node(i).shape.width()).collect();
    let mut owner = Vec::with_capacity(p.len());
    for (j, &w) in widths.iter().enumerate() {
        owner.extend((0..w).map(|c| (j, c)));
    }
    // cut pieces at input boundaries, at non-consecutive source columns and
    // at domain-block boundaries of the target
    let block_starts = [0, p.boundaries[0], p.boundaries[0] + p.boundaries[1]];
    let mut pieces: Vec<Piece> = Vec::new();
    for (new, &old) in p.perm.iter().enumerate() {
        let (j, c) = owner[old];
        match pieces.last_mut() {
            Some(last)
                if last.input == j
                    && last.start + last.width == c
                    && !block_starts.contains(&new) =>
            {
                last.width += 1
            }
            _ => pieces.push(Piece {
                input: j,
                start: c,
                width: 1,
            }),
        }
    }

    let (path, matmuls) = site_closure(g, cid);
    let path_set: HashSet<NodeId> = path.iter().copied().collect();
    let in_place = path.iter().all(|&u| {
        g.consumers(u).iter().all(|&v| {
            path_set.contains(&v)
                || (matches!(g.node(v).kind, NodeKind::MatMul) && g.node(v).inputs[0] == u && g.node(v).inputs[1] != u)
        })
    });

    let mut b = g.to_builder();
    let mut new_inputs = Vec::with_capacity(pieces.len());
    for pc in &pieces {
        let src = g.name(cnode.inputs[pc.input]);
        if pc.start == 0 && pc.width == widths[pc.input] {
            new_inputs.push(src.to_string());
        } else {
            let id = b.fresh_id(&format!("{site}.part"));
            b.node(
                &id,
                NodeKind::Slice {
                    start: pc.start,
                    width: pc.width,
                },
                &[src],
            );
            new_inputs.push(id);
        }
    }
    let new_kind = NodeKind::Concat {
        layout: p.target_layout(),
    };

    // name of the node each MatMul should read after the change
    let mut redirected: Vec<(NodeId, String)> = Vec::new();
    if in_place {
        b.set_kind(site, new_kind)?;
        b.set_inputs(site, &new_inputs)?;
    } else {
        let new_site = b.fresh_id(&format!("{site}~reorg"));
        b.node(&new_site, new_kind, &new_inputs);
        let mut renamed = std::collections::HashMap::from([(cid, new_site)]);
        for &u in path.iter().skip(1) {
            let n = g.node(u);
            let id = b.fresh_id(&format!("{}~reorg", n.id));
            let ins: Vec<String> = n.inputs.iter().map(|i| renamed[i].clone()).collect();
            b.node(&id, n.kind.clone(), &ins);
            renamed.insert(u, id);
        }
        for &m in &matmuls {
            redirected.push((m, renamed[&g.node(m).inputs[0]].clone()));
        }
    }

    // permute weights; a weight read only by this site's MatMuls is
    // permuted in place, a shared one is copied
    let site_mm: HashSet<NodeId> = matmuls.iter().copied().collect();
    let mut done: Vec<(NodeId, String)> = Vec::new();
    for &m in &matmuls {
        let wid = g.node(m).inputs[1];
        let NodeKind::Weight { rows, cols, init } = &g.node(wid).kind else {
            return Err(Error::invalid(format!(
                "MatMul `{}` reads a computed right operand; only Weight nodes can be remapped",
                g.name(m)
            )));
        };
        let wname = match done.iter().find(|(w, _)| *w == wid) {
            Some((_, name)) => name.clone(),
            None => {
                let kind = NodeKind::Weight {
                    rows: *rows,
                    cols: *cols,
                    init: init.select_rows(&p.perm),
                };
                let exclusive = g.consumers(wid).iter().all(|c| site_mm.contains(c));
                let name = if exclusive {
                    b.set_kind(g.name(wid), kind)?;
                    g.name(wid).to_string()
                } else {
                    let id = b.fresh_id(&format!("{}~reorg", g.name(wid)));
                    b.node(&id, kind, &[] as &[&str]);
                    id
                };
                done.push((wid, name.clone()));
                name
            }
        };
        let data = redirected
            .iter()
            .find(|(x, _)| *x == m)
            .map(|(_, s)| s.clone())
            .unwrap_or_else(|| g.name(g.node(m).inputs[0]).to_string());
        b.set_inputs(g.name(m), &[data, wname])?;
    }
    b.build()
}

/// Reorganizes every mixed Concat the coloring pass finds. Sites that are
/// already neat are left alone.
pub fn reorg_all(g: &Graph) -> Result<Graph> {
    let groups = run_gca(g).groups();
    let sites: Vec<String> = groups.iter().map(|(c, _)| g.name(*c).to_string()).collect();
    let mut cur = g.clone();
    for site in sites {
        let NodeKind::Concat { layout } = &cur.by_name(&site)?.kind else { unreachable!() };
        let p = plan_reorg(layout);
        cur = apply_to_graph(&cur, &site, &p).map_err(|e| e.at_site(site.clone()))?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use FeatureDomain::*;

    #[test]
    fn plan_groups_stably() {
        let l = FeatureLayout::from_pairs(&[(User, 2), (Cross, 1), (Item, 3), (User, 2)]).unwrap();
        let p = plan_reorg(&l);
        assert_eq!(p.perm(), &[0, 1, 6, 7, 3, 4, 5, 2]);
        assert_eq!(p.boundaries(), [4, 3, 1]);
        assert_eq!(p.target_layout().segments().len(), 3);

        let neat = FeatureLayout::from_pairs(&[(User, 4), (Item, 3), (Cross, 1)]).unwrap();
        assert!(plan_reorg(&neat).is_identity());
        let single = plan_reorg(&FeatureLayout::from_pairs(&[(Item, 5)]).unwrap());
        assert!(single.is_identity());
        assert_eq!(single.boundaries(), [0, 5, 0]);
    }

    #[test]
    fn inverse_round_trips() {
        let l = FeatureLayout::from_pairs(&[(Cross, 2), (User, 1), (Item, 2), (User, 3)]).unwrap();
        let p = plan_reorg(&l);
        assert!(p.then(&p.inverse()).is_identity());
        assert!(p.inverse().then(&p).is_identity());
    }

    #[test]
    fn weight_rows_follow_the_permutation() {
        let w: Tensor = Tensor::from_rows(&[[1.0], [2.0]]).unwrap();
        let swap = ColumnPermutation {
            perm: vec![1, 0],
            boundaries: [1, 1, 0],
        };
        assert_eq!(apply_to_weights(&w, &swap).unwrap().data(), &[2.0, 1.0]);
        assert_eq!(
            apply_to_weights(&w, &ColumnPermutation::identity(2, [2, 0, 0])).unwrap(),
            w
        );
        assert!(apply_to_weights(&w, &ColumnPermutation::identity(3, [3, 0, 0])).is_err());
    }

    #[test]
    fn non_concat_site_is_rejected() {
        let g = crate::graph::matmul_site(
            crate::graph::SiteDims {
                du: 2,
                di: 2,
                dc: 0,
                d: 2,
            },
            1,
        )
        .unwrap();
        let p = ColumnPermutation::identity(4, [2, 2, 0]);
        assert!(matches!(apply_to_graph(&g, "mm", &p), Err(Error::InvalidArgument(_))));
        assert_eq!(apply_to_graph(&g, "x", &p).unwrap(), g);
    }
}
