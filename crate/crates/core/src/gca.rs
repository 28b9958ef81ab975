//! Graph coloring: find matmuls whose input mixes user-side and item-side
//! features.
//!
//! User inputs start Yellow, item and cross inputs Blue. Colors flow along
//! edges to a fixed point (Blue wins over Yellow, Yellow only fills
//! Uncolored nodes). A Concat with both a Yellow and a Blue direct input is
//! *mixed*; every MatMul reachable from it through data-movement nodes only is
//! optimizable.

use std::fmt;

use crate::graph::{FeatureDomain, FeatureLayout, Graph, KindTag, NodeId, NodeKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Uncolored,
    Yellow,
    Blue,
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Color::Uncolored => "Uncolored",
            Color::Yellow => "Yellow",
            Color::Blue => "Blue",
        })
    }
}

/// Color of every node, indexed by [`NodeId`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coloring(Vec<Color>);

impl Coloring {
    pub fn get(&self, id: NodeId) -> Color {
        self.0[id.0]
    }

    pub fn as_slice(&self) -> &[Color] {
        &self.0
    }

    pub fn count(&self, c: Color) -> usize {
        self.0.iter().filter(|&&x| x == c).count()
    }
}

pub fn initialize_colors(g: &Graph) -> Coloring {
    Coloring(
        g.nodes()
            .iter()
            .map(|n| match &n.kind {
                NodeKind::Input {
                    domain: FeatureDomain::User,
                    ..
                } => Color::Yellow,
                NodeKind::Input { .. } => Color::Blue,
                _ => Color::Uncolored,
            })
            .collect(),
    )
}

/// Chooses which pending worklist entry to process next.
pub trait Schedule {
    /// Index in `0..pending` of the entry to pop. `pending` is never zero.
    fn pick(&mut self, pending: usize) -> usize;
}

/// Stack order: most recently pushed first.
#[derive(Debug, Default, Clone, Copy)]
pub struct Lifo;

impl Schedule for Lifo {
    fn pick(&mut self, pending: usize) -> usize {
        pending - 1
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct PropagationStats {
    pub pops: usize,
    /// Edges examined.
    pub relaxations: usize,
    /// Color updates applied.
    pub changes: usize,
}

pub fn propagate(g: &Graph, c: &Coloring) -> Coloring {
    propagate_with(g, c, &mut Lifo).0
}

/// Worklist propagation under an arbitrary pop order.
///
/// Each node changes color at most twice (Uncolored→Yellow→Blue), so the
/// number of pushes is bounded by the initial seeds plus `2·|V|`, and every
/// pop scans the node's out-edges once.
pub fn propagate_with(
    g: &Graph,
    c: &Coloring,
    sched: &mut dyn Schedule,
) -> (Coloring, PropagationStats) {
    let mut color = c.0.clone();
    let mut stats = PropagationStats::default();
    let mut work: Vec<NodeId> = g
        .ids()
        .filter(|&i| color[i.0] != Color::Uncolored)
        .collect();
    let budget = 2 * g.len() * g.edge_count();
    while !work.is_empty() {
        let at = sched.pick(work.len());
        assert!(at < work.len(), "schedule picked {at} of {}", work.len());
        let u = work.remove(at);
        stats.pops += 1;
        let cu = color[u.0];
        for &v in g.consumers(u) {
            stats.relaxations += 1;
            let cv = color[v.0];
            let next = match (cu, cv) {
                (Color::Blue, c) if c != Color::Blue => Color::Blue,
                (Color::Yellow, Color::Uncolored) => Color::Yellow,
                _ => continue,
            };
            color[v.0] = next;
            stats.changes += 1;
            work.push(v);
        }
        assert!(
            stats.relaxations <= budget,
            "color propagation exceeded its budget of {budget} edge visits"
        );
    }
    assert!(stats.changes <= 2 * g.len());
    (Coloring(color), stats)
}

/// Node kinds that only move data and may sit between a mixed Concat and the
/// MatMul it feeds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GcaConfig {
    pub non_computational: Vec<KindTag>,
}

impl Default for GcaConfig {
    fn default() -> Self {
        GcaConfig {
            non_computational: vec![KindTag::Reshape, KindTag::Identity, KindTag::Tile],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OptSite {
    pub matmul: NodeId,
    pub concat: NodeId,
    pub layout: FeatureLayout,
}

/// Optimizable MatMuls, each with the mixed Concat that feeds it.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OptSet {
    sites: Vec<OptSite>,
}

impl OptSet {
    pub fn sites(&self) -> &[OptSite] {
        &self.sites
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn matmuls(&self) -> Vec<NodeId> {
        self.sites.iter().map(|s| s.matmul).collect()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.sites.iter().any(|s| s.matmul == id)
    }

    /// MatMuls grouped by their provoking Concat, in Concat id order.
    pub fn groups(&self) -> Vec<(NodeId, Vec<NodeId>)> {
        let mut out: Vec<(NodeId, Vec<NodeId>)> = Vec::new();
        let mut sites = self.sites.clone();
        sites.sort_by_key(|s| (s.concat, s.matmul));
        for s in sites {
            match out.last_mut() {
                Some((c, ms)) if *c == s.concat => ms.push(s.matmul),
                _ => out.push((s.concat, vec![s.matmul])),
            }
        }
        out
    }
}

pub fn is_mixed_concat(g: &Graph, c: &Coloring, id: NodeId) -> bool {
    let n = g.node(id);
    matches!(n.kind, NodeKind::Concat { .. })
        && n.inputs.iter().any(|&i| c.get(i) == Color::Yellow)
        && n.inputs.iter().any(|&i| c.get(i) == Color::Blue)
}

pub fn detect_optimizable(g: &Graph, c: &Coloring, cfg: &GcaConfig) -> OptSet {
    let mut sites = Vec::new();
    for concat in g.ids() {
        if !is_mixed_concat(g, c, concat) {
            continue;
        }
        let NodeKind::Concat { layout } = &g.node(concat).kind else { unreachable!() };
        let mut seen = vec![false; g.len()];
        let mut stack = vec![concat];
        while let Some(u) = stack.pop() {
            for &v in g.consumers(u) {
                let node = g.node(v);
                if matches!(node.kind, NodeKind::MatMul) && node.inputs[0] == u {
                    if !seen[v.0] {
                        seen[v.0] = true;
                        sites.push(OptSite {
                            matmul: v,
                            concat,
                            layout: layout.clone(),
                        });
                    }
                } else if cfg.non_computational.contains(&node.kind.tag()) && !seen[v.0] {
                    seen[v.0] = true;
                    stack.push(v);
                }
            }
        }
    }
    sites.sort_by_key(|s| s.matmul);
    OptSet { sites }
}

pub fn run_gca(g: &Graph) -> OptSet {
    run_gca_with(g, &GcaConfig::default())
}

pub fn run_gca_with(g: &Graph, cfg: &GcaConfig) -> OptSet {
    let c = propagate(g, &initialize_colors(g));
    detect_optimizable(g, &c, cfg)
}
