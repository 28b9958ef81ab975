//! Re-parameterized inference for feature-fusion matmuls in ranking models.
//!
//! The pipeline: tag graph inputs with a [`FeatureDomain`], find matmuls fed
//! by user/item concatenations ([`gca`]), make their column layouts
//! contiguous per domain ([`reorg`]), then split each such matmul so the user
//! block is multiplied once per request instead of once per candidate
//! ([`rewrite`]). [`exec`] runs graphs with FLOPs accounting and checks that
//! rewritten graphs compute the same thing; [`flops`] has the closed forms.

pub mod error;
pub mod exec;
pub mod flops;
pub mod gca;
pub mod graph;
pub mod harness;
pub mod reorg;
pub mod rewrite;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{
    FeatureDomain, FeatureLayout, Graph, GraphBuilder, KindTag, Node, NodeId, NodeKind, Segment,
    Shape, WeightInit,
};
pub use tensor::{Element, Tensor};
