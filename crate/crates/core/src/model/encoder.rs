//! Reconstruction encoder: recovers spatial dependencies among the
//! independent block embeddings with a transformer stack whose attention
//! logits optionally carry an additive pairwise position score.
//!
//! The position-score table depends only on the position embeddings, so a
//! forward pass computes it once and every layer and head reuses it.

use crate::error::{Error, Result};
use crate::model::{layer_norm, multi_head_attention, AttentionMode, Model};
use crate::nn::{softmax_rows_value, Array, Graph, NodeId, ParamStore, Scalar};
use crate::segmentation::BoundingBox;

/// Pairwise position scores for one image, n x n.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionScoreTable(pub Array);

/// Scaled dot-product attention over raw embeddings: row i is
/// softmax_j of (e_i . e_j) / sqrt(d_e).
pub fn self_attention_scores(embeddings: &Array) -> Result<Array> {
    if embeddings.ndim() != 2 || embeddings.rows() == 0 {
        return Err(Error::Shape {
            op: "self_attention_scores",
            lhs: embeddings.shape().to_vec(),
            rhs: vec![],
        });
    }
    let d = embeddings.cols() as Scalar;
    let mut logits = embeddings.matmul(&embeddings.transposed())?;
    logits.scale_assign(1.0 / d.sqrt());
    Ok(softmax_rows_value(&logits))
}

/// The additive position score: entry (i, j) is
/// v_a^T tanh(W_a [p'_i ; p'_j]).
pub fn position_scores_value(
    position_embeddings: &Array,
    w_a: &Array,
    v_a: &Array,
) -> Result<PositionScoreTable> {
    let n = position_embeddings.rows();
    let d = position_embeddings.cols();
    if w_a.shape() != [2 * d, d] || v_a.len() != d {
        return Err(Error::Shape {
            op: "position_scores",
            lhs: w_a.shape().to_vec(),
            rhs: vec![2 * d, d],
        });
    }
    let mut table = Array::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let mut score = 0.0;
            for c in 0..d {
                let mut pre = 0.0;
                for k in 0..d {
                    pre += position_embeddings.at(i, k) * w_a.at(k, c);
                    pre += position_embeddings.at(j, k) * w_a.at(d + k, c);
                }
                score += v_a.data()[c] * pre.tanh();
            }
            table.set(i, j, score);
        }
    }
    Ok(PositionScoreTable(table))
}

/// Row softmax of scaled dot-product logits plus the position scores.
pub fn pc_attention_scores(embeddings: &Array, table: &PositionScoreTable) -> Result<Array> {
    let n = embeddings.rows();
    if table.0.shape() != [n, n] {
        return Err(Error::Shape {
            op: "pc_attention_scores",
            lhs: table.0.shape().to_vec(),
            rhs: vec![n, n],
        });
    }
    let d = embeddings.cols() as Scalar;
    let mut logits = embeddings.matmul(&embeddings.transposed())?;
    logits.scale_assign(1.0 / d.sqrt());
    logits.add_assign(&table.0);
    Ok(softmax_rows_value(&logits))
}

/// Graph construction of the position-score table (n, n).
pub(crate) fn position_scores_graph(
    g: &mut Graph,
    store: &ParamStore,
    position_embeddings: NodeId,
) -> Result<NodeId> {
    let n = g.value(position_embeddings).rows();
    let pairs = g.pair_concat(position_embeddings)?;
    let w_a = g.param(store, "enc.pc.wa")?;
    let v_a = g.param(store, "enc.pc.va")?;
    let pre = g.matmul(pairs, w_a)?;
    let act = g.tanh(pre);
    let scores = g.matmul(act, v_a)?;
    g.reshape(scores, &[n, n])
}

/// Encoder forward result. `attention` holds one (n, n) matrix per layer
/// and head; `position_score_invocations` counts table computations.
#[derive(Debug)]
pub struct EncodeOutput {
    pub encoded: NodeId,
    pub attention: Vec<Vec<NodeId>>,
    pub position_score_invocations: usize,
}

impl Model {
    /// Runs the reconstruction stack over combined embeddings. In
    /// pc-attention mode the position-score table is computed once and
    /// added to every layer's and head's pre-softmax logits. No sequence
    /// position signal exists anywhere on this path: the input is a set.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        combined: NodeId,
        position_embeddings: NodeId,
    ) -> Result<EncodeOutput> {
        let n = g.value(combined).rows();
        if g.value(position_embeddings).rows() != n || n == 0 {
            return Err(Error::Pairing(format!(
                "{} embeddings vs {} position embeddings",
                n,
                g.value(position_embeddings).rows()
            )));
        }
        let mut invocations = 0;
        let bias = match self.config.attention {
            AttentionMode::SelfAttention => None,
            AttentionMode::PcAttention => {
                invocations += 1;
                Some(position_scores_graph(g, &self.params, position_embeddings)?)
            }
        };
        let mut x = combined;
        let mut attention = Vec::with_capacity(self.config.encoder_layers);
        for l in 0..self.config.encoder_layers {
            let prefix = format!("enc.l{}", l);
            let normed = layer_norm(g, &self.params, &format!("{}.ln1", prefix), x)?;
            let (attn_out, maps) = multi_head_attention(
                g,
                &self.params,
                &format!("{}.sa", prefix),
                self.config.encoder_heads,
                normed,
                normed,
                bias,
                None,
            )?;
            x = g.add(x, attn_out)?;
            let normed2 = layer_norm(g, &self.params, &format!("{}.ln2", prefix), x)?;
            let ff = super::feed_forward(g, &self.params, &prefix, normed2)?;
            x = g.add(x, ff)?;
            attention.push(maps);
        }
        let encoded = layer_norm(g, &self.params, "enc.ln", x)?;
        Ok(EncodeOutput {
            encoded,
            attention,
            position_score_invocations: invocations,
        })
    }
}

/// Average over symbols and heads of the attention mass each symbol puts
/// on its ceil(k% * n) geometrically nearest peers (self excluded).
/// `maps` holds the final-layer per-head attention matrices.
pub fn cumulative_nearest_attention(
    maps: &[Array],
    boxes: &[BoundingBox],
    k_percent: f64,
) -> Result<f64> {
    let n = boxes.len();
    if n < 2 {
        return Err(Error::UndefinedMetric(format!(
            "cumulative attention needs at least 2 symbols, got {}",
            n
        )));
    }
    if maps.is_empty() {
        return Err(Error::InvalidInput("no attention maps".into()));
    }
    if !(0.0 < k_percent && k_percent <= 100.0) {
        return Err(Error::InvalidInput(format!(
            "k_percent {} outside (0, 100]",
            k_percent
        )));
    }
    for m in maps {
        if m.shape() != [n, n] {
            return Err(Error::Shape {
                op: "cumulative_nearest_attention",
                lhs: m.shape().to_vec(),
                rhs: vec![n, n],
            });
        }
    }
    let take = ((k_percent / 100.0 * n as f64).ceil() as usize).clamp(1, n - 1);
    let centers: Vec<(f64, f64)> = boxes.iter().map(|b| b.center()).collect();
    let mut total = 0.0;
    for map in maps {
        for i in 0..n {
            let mut neighbors: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let dr = centers[i].0 - centers[j].0;
                    let dc = centers[i].1 - centers[j].1;
                    ((dr * dr + dc * dc).sqrt(), j)
                })
                .collect();
            neighbors.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            total += neighbors
                .iter()
                .take(take)
                .map(|&(_, j)| map.at(i, j) as f64)
                .sum::<f64>();
        }
    }
    Ok(total / (maps.len() * n) as f64)
}
