//! Shared setup for the criterion benches.

use mari_core::exec::InputBundle;
use mari_core::graph::{matmul_site, NodeKind, SiteDims};
use mari_core::rewrite::rewrite_site;
use mari_core::{Graph, Result};

/// A concat→matmul site, its split form and one random input bundle.
pub struct SitePair {
    pub vanilla: Graph,
    pub split: Graph,
    pub bundle: InputBundle<f64>,
}

pub fn site_pair(dims: SiteDims, batch: usize, seed: u64) -> Result<SitePair> {
    let vanilla = matmul_site(dims, seed)?;
    let NodeKind::Concat { layout } = &vanilla.by_name("x")?.kind else {
        unreachable!("matmul_site always concatenates into `x`")
    };
    let split = rewrite_site(&vanilla, "mm", layout)?;
    let bundle = InputBundle::random(&vanilla, batch, seed)?;
    Ok(SitePair { vanilla, split, bundle })
}
