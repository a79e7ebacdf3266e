//! Autoregressive transcription of an encoded block set into LaTeX tokens.
//!
//! The decoder is a genuine sequence model, so token embeddings carry a
//! sinusoidal position signal; the encoder side stays order-free. Output
//! probabilities are softmax(W_out o_t) over the vocabulary.

use crate::error::{Error, Result};
use crate::model::{feed_forward, layer_norm, multi_head_attention, Model};
use crate::nn::{Array, Graph, NodeId, Scalar};
use crate::token::{TokenSequence, BOS_ID, EOS_ID, PAD_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeStrategy {
    Greedy,
    Beam { width: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct DecodeConfig {
    pub strategy: DecodeStrategy,
    pub max_len: usize,
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        DecodeConfig {
            strategy: DecodeStrategy::Greedy,
            max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 {
            return Err(Error::InvalidInput("max_len must be >= 1".into()));
        }
        if let DecodeStrategy::Beam { width } = self.strategy {
            if width == 0 {
                return Err(Error::InvalidInput("beam width must be >= 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    /// Emitted content ids, BOS/EOS excluded.
    pub content_ids: Vec<usize>,
    /// True when generation hit `max_len` before emitting EOS.
    pub truncated: bool,
}

pub(crate) struct DecoderStates {
    pub logits: NodeId,
    /// Last-layer cross-attention maps, one (t, n) matrix per head.
    pub cross_attention_last: Vec<NodeId>,
}

fn sinusoidal_encoding(steps: usize, d: usize) -> Array {
    let mut pe = Array::zeros(&[steps, d]);
    for pos in 0..steps {
        for i in 0..d / 2 {
            let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe.set(pos, 2 * i, rate.sin() as Scalar);
            pe.set(pos, 2 * i + 1, rate.cos() as Scalar);
        }
    }
    pe
}

impl Model {
    /// Teacher-forced decoder pass over `input_ids`, cross-attending to the
    /// encoded block set. Causal masking keeps step t blind to inputs > t.
    pub(crate) fn decoder_states_graph(
        &self,
        g: &mut Graph,
        input_ids: &[usize],
        encoded: NodeId,
    ) -> Result<DecoderStates> {
        if input_ids.is_empty() {
            return Err(Error::Contract("decoder input must be non-empty".into()));
        }
        let d = self.config.embed_dim;
        let t = input_ids.len();
        let table = g.param(&self.params, "dec.embed")?;
        let emb = g.embedding(table, input_ids)?;
        let scaled = g.scale(emb, (d as Scalar).sqrt());
        let pe = g.input(sinusoidal_encoding(t, d));
        let mut x = g.add(scaled, pe)?;

        let mut causal = vec![false; t * t];
        for i in 0..t {
            for j in 0..t {
                causal[i * t + j] = j > i;
            }
        }

        let mut cross_attention_last = Vec::new();
        for l in 0..self.config.decoder_layers {
            let prefix = format!("dec.l{}", l);
            let normed = layer_norm(g, &self.params, &format!("{}.ln1", prefix), x)?;
            let (self_out, _) = multi_head_attention(
                g,
                &self.params,
                &format!("{}.sa", prefix),
                self.config.decoder_heads,
                normed,
                normed,
                None,
                Some(&causal),
            )?;
            x = g.add(x, self_out)?;
            let normed2 = layer_norm(g, &self.params, &format!("{}.ln2", prefix), x)?;
            let (cross_out, cross_maps) = multi_head_attention(
                g,
                &self.params,
                &format!("{}.ca", prefix),
                self.config.decoder_heads,
                normed2,
                encoded,
                None,
                None,
            )?;
            x = g.add(x, cross_out)?;
            let normed3 = layer_norm(g, &self.params, &format!("{}.ln3", prefix), x)?;
            let ff = feed_forward(g, &self.params, &prefix, normed3)?;
            x = g.add(x, ff)?;
            if l == self.config.decoder_layers - 1 {
                cross_attention_last = cross_maps;
            }
        }
        let final_norm = layer_norm(g, &self.params, "dec.ln", x)?;
        let w_out = g.param(&self.params, "dec.wout")?;
        let logits = g.matmul(final_norm, w_out)?;
        Ok(DecoderStates {
            logits,
            cross_attention_last,
        })
    }

    /// Negative log-likelihood of a complete target sequence given an
    /// encoded block set, summed over non-PAD steps.
    pub fn sequence_nll_graph(
        &self,
        g: &mut Graph,
        target: &TokenSequence,
        encoded: NodeId,
    ) -> Result<NodeId> {
        let ids = &target.ids;
        if ids.first() != Some(&BOS_ID) {
            return Err(Error::Contract("target must begin with BOS".into()));
        }
        let end = ids.iter().position(|&id| id == PAD_ID).unwrap_or(ids.len());
        if end < 2 || ids[end - 1] != EOS_ID {
            return Err(Error::Contract("target must end with EOS".into()));
        }
        let input_ids = &ids[..end - 1];
        let target_ids = &ids[1..end];
        let states = self.decoder_states_graph(g, input_ids, encoded)?;
        let log_probs = g.log_softmax_rows(states.logits)?;
        let picked = g.row_gather(log_probs, target_ids)?;
        let total = g.sum_all(picked);
        Ok(g.scale(total, -1.0))
    }

    /// Probability vector over the vocabulary for the next token after
    /// `prefix_ids`, conditioned on the encoded block set.
    pub fn next_token_distribution(
        &self,
        prefix_ids: &[usize],
        encoded_value: &Array,
    ) -> Result<Vec<Scalar>> {
        if prefix_ids.is_empty() || prefix_ids[0] != BOS_ID {
            return Err(Error::Contract(
                "prefix must be non-empty and begin with BOS".into(),
            ));
        }
        if encoded_value.rows() == 0 {
            return Err(Error::Contract("encoded set must be non-empty".into()));
        }
        let mut g = Graph::new();
        let encoded = g.input(encoded_value.clone());
        let states = self.decoder_states_graph(&mut g, prefix_ids, encoded)?;
        let last = g.slice_rows(states.logits, prefix_ids.len() - 1, 1)?;
        let probs = g.softmax_rows(last)?;
        Ok(g.value(probs).data().to_vec())
    }

    fn next_log_probs(&self, prefix_ids: &[usize], encoded_value: &Array) -> Result<Vec<Scalar>> {
        let mut g = Graph::new();
        let encoded = g.input(encoded_value.clone());
        let states = self.decoder_states_graph(&mut g, prefix_ids, encoded)?;
        let last = g.slice_rows(states.logits, prefix_ids.len() - 1, 1)?;
        let log_probs = g.log_softmax_rows(last)?;
        Ok(g.value(log_probs).data().to_vec())
    }

    /// Emits a token sequence from an encoded block set. Greedy takes the
    /// argmax each step (ties to the smaller id); beam search keeps the
    /// `width` best candidates under length-normalized log-probability.
    pub fn decode(&self, encoded_value: &Array, cfg: &DecodeConfig) -> Result<DecodeOutput> {
        cfg.validate()?;
        match cfg.strategy {
            DecodeStrategy::Greedy => self.decode_greedy(encoded_value, cfg.max_len),
            DecodeStrategy::Beam { width } => self.decode_beam(encoded_value, width, cfg.max_len),
        }
    }

    fn decode_greedy(&self, encoded_value: &Array, max_len: usize) -> Result<DecodeOutput> {
        let mut ids = vec![BOS_ID];
        for _ in 0..max_len {
            let probs = self.next_token_distribution(&ids, encoded_value)?;
            let next = argmax_emittable(&probs);
            if next == EOS_ID {
                return Ok(DecodeOutput {
                    content_ids: ids[1..].to_vec(),
                    truncated: false,
                });
            }
            ids.push(next);
        }
        Ok(DecodeOutput {
            content_ids: ids[1..].to_vec(),
            truncated: true,
        })
    }

    fn decode_beam(
        &self,
        encoded_value: &Array,
        width: usize,
        max_len: usize,
    ) -> Result<DecodeOutput> {
        #[derive(Clone)]
        struct Beam {
            ids: Vec<usize>,
            log_prob: Scalar,
            finished: bool,
        }
        impl Beam {
            fn score(&self) -> Scalar {
                // Length-normalized log probability; the BOS prefix does
                // not count as generated.
                let len = (self.ids.len() - 1).max(1);
                self.log_prob / len as Scalar
            }
        }
        let mut beams = vec![Beam {
            ids: vec![BOS_ID],
            log_prob: 0.0,
            finished: false,
        }];
        for _ in 0..max_len {
            if beams.iter().all(|b| b.finished) {
                break;
            }
            let mut candidates = Vec::new();
            for beam in &beams {
                if beam.finished {
                    candidates.push(beam.clone());
                    continue;
                }
                let log_probs = self.next_log_probs(&beam.ids, encoded_value)?;
                for (id, &lp) in log_probs.iter().enumerate() {
                    if id == PAD_ID || id == BOS_ID {
                        continue;
                    }
                    let mut ids = beam.ids.clone();
                    let finished = id == EOS_ID;
                    if !finished {
                        ids.push(id);
                    }
                    candidates.push(Beam {
                        ids,
                        log_prob: beam.log_prob + lp,
                        finished,
                    });
                }
            }
            // Deterministic order: score descending, then ids ascending.
            candidates.sort_by(|a, b| {
                b.score()
                    .partial_cmp(&a.score())
                    .expect("finite scores")
                    .then_with(|| a.ids.cmp(&b.ids))
            });
            candidates.truncate(width);
            beams = candidates;
        }
        let best = beams
            .iter()
            .filter(|b| b.finished)
            .max_by(|a, b| a.score().partial_cmp(&b.score()).expect("finite"))
            .or_else(|| {
                beams
                    .iter()
                    .max_by(|a, b| a.score().partial_cmp(&b.score()).expect("finite"))
            })
            .expect("at least one beam");
        Ok(DecodeOutput {
            content_ids: best.ids[1..].to_vec(),
            truncated: !best.finished,
        })
    }

    /// Last-layer cross-attention rows for each emitted content token,
    /// averaged over heads. Row t describes the block attention while the
    /// decoder produced token t of `content_ids`.
    pub fn export_decoder_attention(
        &self,
        content_ids: &[usize],
        encoded_value: &Array,
    ) -> Result<Vec<Vec<Scalar>>> {
        let n = encoded_value.rows();
        let mut g = Graph::new();
        let encoded = g.input(encoded_value.clone());
        let mut input_ids = vec![BOS_ID];
        input_ids.extend_from_slice(content_ids);
        let states = self.decoder_states_graph(&mut g, &input_ids, encoded)?;
        let heads = states.cross_attention_last.len() as Scalar;
        let mut rows = Vec::with_capacity(content_ids.len());
        for t in 0..content_ids.len() {
            let mut row = vec![0.0; n];
            for &map in &states.cross_attention_last {
                for (j, slot) in row.iter_mut().enumerate() {
                    *slot += g.value(map).at(t, j) / heads;
                }
            }
            rows.push(row);
        }
        Ok(rows)
    }
}

/// Argmax over tokens the decoder may emit (PAD and BOS never are), with
/// ties broken toward the smaller id.
fn argmax_emittable(values: &[Scalar]) -> usize {
    let mut best = EOS_ID;
    for (i, &v) in values.iter().enumerate() {
        if i == PAD_ID || i == BOS_ID {
            continue;
        }
        if v > values[best] {
            best = i;
        }
    }
    best
}
