//! Ready-made graphs: a small multi-task ranking model, a standalone
//! cross-attention block, and single concat→matmul sites for benchmarking.

use super::{FeatureDomain, FeatureLayout, Graph, GraphBuilder, NodeKind, Segment, WeightInit};
use crate::error::{Error, Result};

use FeatureDomain::{Cross, Item, User};

/// Dimensions of the ranking-model fixture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDims {
    /// User profile feature width.
    pub user_profile: usize,
    /// User behaviour sequence length and per-step width.
    pub seq_len: usize,
    pub seq_dim: usize,
    pub item: usize,
    pub cross: usize,
    /// Width of the user-only MLP output.
    pub user_hidden: usize,
    pub attn_hidden: usize,
    pub experts: usize,
    pub expert_hidden: usize,
    pub expert_out: usize,
    pub tasks: usize,
    pub tower_hidden: usize,
    /// Interleave user/item/cross columns in the concatenations instead of
    /// laying them out user-first.
    pub fragmented: bool,
    pub seed: u64,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            user_profile: 12,
            seq_len: 5,
            seq_dim: 8,
            item: 10,
            cross: 6,
            user_hidden: 16,
            attn_hidden: 8,
            experts: 3,
            expert_hidden: 12,
            expert_out: 8,
            tasks: 2,
            tower_hidden: 8,
            fragmented: false,
            seed: 7,
        }
    }
}

impl ModelDims {
    fn check(&self) -> Result<()> {
        let all = [
            self.user_profile,
            self.seq_len,
            self.seq_dim,
            self.item,
            self.cross,
            self.user_hidden,
            self.attn_hidden,
            self.experts,
            self.expert_hidden,
            self.expert_out,
            self.tasks,
            self.tower_hidden,
        ];
        if all.contains(&0) {
            return Err(Error::invalid(format!("all model dims must be positive: {self:?}")));
        }
        Ok(())
    }
}

struct Seeds(u64);

impl Seeds {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        self.0
    }
}

fn concat_with(b: &mut GraphBuilder, id: &str, parts: &[(&str, FeatureDomain, usize)]) -> Result<()> {
    let layout = FeatureLayout::new(
        parts
            .iter()
            .map(|&(_, domain, width)| Segment { domain, width })
            .collect(),
    )?;
    let ins: Vec<&str> = parts.iter().map(|p| p.0).collect();
    b.concat(id, &ins, Some(layout));
    Ok(())
}

fn dense(b: &mut GraphBuilder, s: &mut Seeds, id: &str, x: &str, rows: usize, cols: usize, bias: bool) {
    let w = format!("{id}.w");
    b.weight(&w, rows, cols, s.next());
    if bias {
        let mm = format!("{id}.mm");
        b.node(&mm, NodeKind::MatMul, &[x, &w]);
        let bw = format!("{id}.b");
        b.weight(&bw, 1, cols, s.next());
        b.node(id, NodeKind::Add, &[&mm, &bw]);
    } else {
        b.node(id, NodeKind::MatMul, &[x, &w]);
    }
}

/// Multi-task ranking model in UOI form.
///
/// A user-only MLP runs once per request; its output is tiled at three
/// concatenations that mix it with item-side features:
///
/// * `q_cat`: user + item, projected by `attn_q.mm` into the query of a cross
///   attention over the user behaviour sequence;
/// * `mmoe_cat`: user + item + attention output + cross, read (through a
///   reshape) by the first FC of every expert `expert{e}.fc1.mm`;
/// * `tower_cat`: user + the per-task expert mixtures, read by the first FC of
///   every task tower `tower{t}.fc1.mm`.
///
/// Expert gates depend on item features only. Each task ends in an `Output`.
pub fn fixture_ranking_model(d: &ModelDims) -> Result<Graph> {
    d.check()?;
    let mut s = Seeds(d.seed);
    let mut b = GraphBuilder::new();
    b.input("user_profile", User, &[d.user_profile], false)
        .input("user_seq", User, &[d.seq_len, d.seq_dim], false)
        .input("item", Item, &[d.item], true)
        .input("cross", Cross, &[d.cross], true);

    dense(&mut b, &mut s, "user_fc", "user_profile", d.user_profile, d.user_hidden, true);
    b.node("user_act", NodeKind::Relu, &["user_fc"]);

    let (hu, h) = (d.user_hidden, d.attn_hidden);

    // attention query
    b.node("q_user", NodeKind::Tile, &["user_act"]);
    if d.fragmented {
        concat_with(&mut b, "q_cat", &[("item", Item, d.item), ("q_user", User, hu)])?;
    } else {
        concat_with(&mut b, "q_cat", &[("q_user", User, hu), ("item", Item, d.item)])?;
    }
    dense(&mut b, &mut s, "attn_q", "q_cat", hu + d.item, h, false);
    b.weight("attn_k", d.seq_dim, h, s.next())
        .weight("attn_v", d.seq_dim, h, s.next());
    b.node(
        "attn",
        NodeKind::CrossAttention {
            d_q: h,
            d_kv: d.seq_dim,
            d_hidden: h,
        },
        &["attn_q", "user_seq", "attn_k", "attn_v"],
    );

    // MMoE
    b.node("mmoe_user", NodeKind::Tile, &["user_act"]);
    let mmoe_width = hu + d.item + h + d.cross;
    if d.fragmented {
        b.node("mmoe_profile", NodeKind::Tile, &["user_profile"]);
        concat_with(
            &mut b,
            "mmoe_cat",
            &[
                ("cross", Cross, d.cross),
                ("mmoe_profile", User, d.user_profile),
                ("item", Item, d.item),
                ("mmoe_user", User, hu),
                ("attn", Item, h),
            ],
        )?;
    } else {
        concat_with(
            &mut b,
            "mmoe_cat",
            &[
                ("mmoe_user", User, hu),
                ("item", Item, d.item),
                ("attn", Item, h),
                ("cross", Cross, d.cross),
            ],
        )?;
    }
    let mmoe_width = mmoe_width + if d.fragmented { d.user_profile } else { 0 };
    b.node("mmoe_in", NodeKind::Reshape { dims: vec![mmoe_width] }, &["mmoe_cat"]);
    let mut expert_outs = Vec::new();
    for e in 0..d.experts {
        let fc1 = format!("expert{e}.fc1");
        dense(&mut b, &mut s, &fc1, "mmoe_in", mmoe_width, d.expert_hidden, true);
        let act = format!("expert{e}.act");
        b.node(&act, NodeKind::Relu, &[&fc1]);
        let fc2 = format!("expert{e}.fc2");
        dense(&mut b, &mut s, &fc2, &act, d.expert_hidden, d.expert_out, false);
        expert_outs.push(fc2);
    }
    let mut mixes = Vec::new();
    for t in 0..d.tasks {
        let logits = format!("gate{t}.logits");
        dense(&mut b, &mut s, &logits, "item", d.item, d.experts, false);
        let gate = format!("gate{t}");
        b.node(&gate, NodeKind::Softmax, &[&logits]);
        let mix = format!("mix{t}");
        let mut ins = vec![gate];
        ins.extend(expert_outs.iter().cloned());
        b.node(&mix, NodeKind::GatedSum { experts: d.experts }, &ins);
        mixes.push(mix);
    }

    // task towers
    b.node("tower_user", NodeKind::Tile, &["user_act"]);
    let mut parts: Vec<(&str, FeatureDomain, usize)> =
        mixes.iter().map(|m| (m.as_str(), Item, d.expert_out)).collect();
    if d.fragmented {
        parts.insert(1, ("tower_user", User, hu));
    } else {
        parts.insert(0, ("tower_user", User, hu));
    }
    concat_with(&mut b, "tower_cat", &parts)?;
    let tower_width = hu + d.tasks * d.expert_out;
    for t in 0..d.tasks {
        let fc1 = format!("tower{t}.fc1");
        dense(&mut b, &mut s, &fc1, "tower_cat", tower_width, d.tower_hidden, true);
        let act = format!("tower{t}.act");
        b.node(&act, NodeKind::Relu, &[&fc1]);
        let logit = format!("tower{t}.logit");
        dense(&mut b, &mut s, &logit, &act, d.tower_hidden, 1, false);
        b.node(&format!("task{t}"), NodeKind::Output, &[&logit]);
    }
    b.build()
}

/// Item-query cross attention over a user sequence: `x_q` (batched, width
/// `d`) attends over `seq` (`L × d`, one per request) with `d × d`
/// projections.
pub fn attention_fixture(seq_len: usize, d: usize, seed: u64) -> Result<Graph> {
    if seq_len == 0 || d == 0 {
        return Err(Error::invalid("attention fixture needs L >= 1 and d >= 1"));
    }
    let mut s = Seeds(seed);
    let mut b = GraphBuilder::new();
    b.input("x_q", Item, &[d], true)
        .input("seq", User, &[seq_len, d], false)
        .weight("w_q", d, d, s.next())
        .weight("w_k", d, d, s.next())
        .weight("w_v", d, d, s.next());
    b.node(
        "attn",
        NodeKind::CrossAttention {
            d_q: d,
            d_kv: d,
            d_hidden: d,
        },
        &["x_q", "seq", "w_q", "w_k", "w_v"],
    );
    b.node("out", NodeKind::Output, &["attn"]);
    b.build()
}

/// Widths of a single concat→matmul site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SiteDims {
    pub du: usize,
    pub di: usize,
    pub dc: usize,
    pub d: usize,
}

/// `out = MatMul(Concat(Tile(user), item, cross), w)` with zero-width
/// domains left out. The matmul is named `mm`, its weight `w`.
pub fn matmul_site(dims: SiteDims, seed: u64) -> Result<Graph> {
    let SiteDims { du, di, dc, d } = dims;
    if du + di + dc == 0 || d == 0 {
        return Err(Error::invalid(format!("degenerate site dims {dims:?}")));
    }
    let mut b = GraphBuilder::new();
    let mut parts = Vec::new();
    if du > 0 {
        b.input("user", User, &[du], false);
        b.node("user_tiled", NodeKind::Tile, &["user"]);
        parts.push(("user_tiled", User, du));
    }
    if di > 0 {
        b.input("item", Item, &[di], true);
        parts.push(("item", Item, di));
    }
    if dc > 0 {
        b.input("cross", Cross, &[dc], true);
        parts.push(("cross", Cross, dc));
    }
    concat_with(&mut b, "x", &parts)?;
    b.node(
        "w",
        NodeKind::Weight {
            rows: du + di + dc,
            cols: d,
            init: WeightInit::seeded(seed, du + di + dc),
        },
        &[] as &[&str],
    );
    b.node("mm", NodeKind::MatMul, &["x", "w"]);
    b.node("out", NodeKind::Output, &["mm"]);
    b.build()
}
