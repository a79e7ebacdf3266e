//! Symbol block and position embedding into the shared d_e space.
//!
//! Blocks go through the six-layer CNN with a fully connected head;
//! position vectors through the three-layer network; the two embeddings
//! of each block are summed elementwise.

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{Array, Graph, NodeId, ParamStore, Scalar};
use crate::segmentation::{PositionVector, SymbolBlock, BLOCK_SIZE};

impl Model {
    /// Embeds n patches into an (n, d_e) matrix of block features.
    pub fn embed_blocks_graph(
        &self,
        g: &mut Graph,
        patches: &[&[Scalar]],
    ) -> Result<NodeId> {
        embed_blocks(g, &self.params, &self.config, patches)
    }

    /// Embeds n position vectors into an (n, d_e) matrix. With the
    /// zero-positions ablation this is a constant zero matrix.
    pub fn embed_positions_graph(
        &self,
        g: &mut Graph,
        vectors: &[PositionVector],
    ) -> Result<NodeId> {
        if self.config.zero_positions {
            return Ok(g.input(Array::zeros(&[vectors.len(), self.config.embed_dim])));
        }
        embed_positions(g, &self.params, vectors)
    }
}

pub(crate) fn embed_blocks(
    g: &mut Graph,
    store: &ParamStore,
    config: &ModelConfig,
    patches: &[&[Scalar]],
) -> Result<NodeId> {
    if patches.is_empty() {
        return Err(Error::InvalidInput("no blocks to embed".into()));
    }
    let n = patches.len();
    let mut stacked = Vec::with_capacity(n * BLOCK_SIZE * BLOCK_SIZE);
    for patch in patches {
        if patch.len() != BLOCK_SIZE * BLOCK_SIZE {
            return Err(Error::Shape {
                op: "embed_blocks",
                lhs: vec![patch.len()],
                rhs: vec![BLOCK_SIZE, BLOCK_SIZE],
            });
        }
        stacked.extend_from_slice(patch);
    }
    // All patches run as one batch: each conv is a single pass.
    let mut x = g.input(Array::from_vec(&[n, 1, BLOCK_SIZE, BLOCK_SIZE], stacked)?);
    for i in 0..6 {
        let w = g.param(store, &format!("cnn.c{}.w", i))?;
        let b = g.param(store, &format!("cnn.c{}.b", i))?;
        let conv = g.conv2d(x, w, b)?;
        x = g.relu(conv);
        if i % 2 == 1 {
            x = g.max_pool2d(x)?;
        }
    }
    let flat = g.reshape(x, &[n, config.cnn_flat_dim()])?;
    let fc_w = g.param(store, "cnn.fc.w")?;
    let fc_b = g.param(store, "cnn.fc.b")?;
    let proj = g.matmul(flat, fc_w)?;
    g.add_bias(proj, fc_b)
}

pub(crate) fn embed_positions(
    g: &mut Graph,
    store: &ParamStore,
    vectors: &[PositionVector],
) -> Result<NodeId> {
    if vectors.is_empty() {
        return Err(Error::InvalidInput("no position vectors to embed".into()));
    }
    let data: Vec<Scalar> = vectors.iter().flat_map(|v| v.as_slice()).collect();
    let mut x = g.input(Array::from_vec(&[vectors.len(), 5], data)?);
    for i in 0..3 {
        let w = g.param(store, &format!("pos.f{}.w", i))?;
        let b = g.param(store, &format!("pos.f{}.b", i))?;
        let lin = g.matmul(x, w)?;
        x = g.add_bias(lin, b)?;
        if i < 2 {
            x = g.tanh(x);
        }
    }
    Ok(x)
}

/// Elementwise sum of block and position embeddings.
pub fn combine(g: &mut Graph, block_embeddings: NodeId, position_embeddings: NodeId) -> Result<NodeId> {
    let (s, p) = (g.value(block_embeddings), g.value(position_embeddings));
    if s.shape() != p.shape() {
        return Err(Error::Pairing(format!(
            "block embeddings {:?} and position embeddings {:?} do not pair",
            s.shape(),
            p.shape()
        )));
    }
    g.add(block_embeddings, position_embeddings)
}

/// Convenience for callers that hold segmentation output.
pub fn patch_refs(blocks: &[SymbolBlock]) -> Vec<&[Scalar]> {
    blocks.iter().map(|b| b.patch.as_slice()).collect()
}
