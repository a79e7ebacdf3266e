//! The recognition model: block/position embedders, the reconstruction
//! encoder with position-corrected attention, and the transcribing decoder.

pub mod decoder;
pub mod embedder;
pub mod encoder;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, NodeId, ParamStore, Scalar, MASK_FILL_VALUE};
use crate::segmentation::BLOCK_SIZE;

pub use decoder::{DecodeConfig, DecodeOutput, DecodeStrategy};
pub use encoder::{
    cumulative_nearest_attention, pc_attention_scores, position_scores_value,
    self_attention_scores, EncodeOutput, PositionScoreTable,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    SelfAttention,
    PcAttention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Shared embedding width d_e of block and position embeddings.
    pub embed_dim: usize,
    /// Output channels of the six convolution layers.
    pub cnn_channels: [usize; 6],
    /// Hidden widths of the three-layer position network (5 -> w0 -> w1 -> d_e).
    pub mlp_widths: [usize; 2],
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub attention: AttentionMode,
    /// Ablation switch: force every position embedding to zero.
    pub zero_positions: bool,
}

impl Default for ModelConfig {
    /// Desk-scale defaults; see [`ModelConfig::full_scale`] for the sizes
    /// used at full training scale.
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            cnn_channels: [4, 8, 8, 16, 16, 32],
            mlp_widths: [32, 64],
            encoder_layers: 2,
            encoder_heads: 4,
            decoder_layers: 2,
            decoder_heads: 4,
            attention: AttentionMode::PcAttention,
            zero_positions: false,
        }
    }
}

impl ModelConfig {
    /// The full-scale architecture: 256-wide embeddings, two 8-layer
    /// 8-head transformer stacks, channel plan 8-16-16-32-32-64.
    pub fn full_scale() -> Self {
        ModelConfig {
            embed_dim: 256,
            cnn_channels: [8, 16, 16, 32, 32, 64],
            mlp_widths: [64, 128],
            encoder_layers: 8,
            encoder_heads: 8,
            decoder_layers: 8,
            decoder_heads: 8,
            attention: AttentionMode::PcAttention,
            zero_positions: false,
        }
    }

    /// A minimal configuration for gradient checking and unit tests.
    pub fn tiny() -> Self {
        ModelConfig {
            embed_dim: 8,
            cnn_channels: [2, 2, 2, 2, 2, 2],
            mlp_widths: [4, 4],
            encoder_layers: 1,
            encoder_heads: 1,
            decoder_layers: 1,
            decoder_heads: 1,
            attention: AttentionMode::PcAttention,
            zero_positions: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 4 || self.embed_dim % 2 != 0 {
            return Err(Error::InvalidInput(format!(
                "embed_dim must be >= 4 and even, got {}",
                self.embed_dim
            )));
        }
        for (heads, label) in [
            (self.encoder_heads, "encoder"),
            (self.decoder_heads, "decoder"),
        ] {
            if heads == 0 || self.embed_dim % heads != 0 {
                return Err(Error::InvalidInput(format!(
                    "{} heads {} must divide embed_dim {}",
                    label, heads, self.embed_dim
                )));
            }
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::InvalidInput("layer counts must be positive".into()));
        }
        if self.cnn_channels.iter().any(|&c| c == 0) || self.mlp_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidInput("channel plan must be positive".into()));
        }
        Ok(())
    }

    /// Spatial side length after the three 2x pools applied to a 30x30 patch.
    pub(crate) fn pooled_side() -> usize {
        BLOCK_SIZE / 2 / 2 / 2
    }

    pub(crate) fn cnn_flat_dim(&self) -> usize {
        let side = Self::pooled_side();
        self.cnn_channels[5] * side * side
    }
}

/// All trainable state plus the structural configuration.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub params: ParamStore,
}

impl Model {
    /// Builds a model with seed-deterministic initialization. The shared
    /// (non-attention-specific) parameters of a self-attention and a
    /// pc-attention model built from the same seed are identical: the
    /// pairwise position-score parameters are drawn last.
    pub fn new(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Model> {
        config.validate()?;
        if vocab_size < 5 {
            return Err(Error::InvalidInput(format!(
                "vocabulary of {} tokens has no content entries",
                vocab_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.embed_dim;

        // Block CNN: six 3x3 convolutions, pools after layers 2/4/6, one
        // fully connected head into the embedding space.
        let mut c_in = 1;
        for (i, &c_out) in config.cnn_channels.iter().enumerate() {
            params.init_conv(&mut rng, &format!("cnn.c{}.w", i), c_out, c_in, 3, 3)?;
            params.init_zeros(&format!("cnn.c{}.b", i), &[c_out])?;
            c_in = c_out;
        }
        params.init_matrix(&mut rng, "cnn.fc.w", config.cnn_flat_dim(), d)?;
        params.init_zeros("cnn.fc.b", &[d])?;

        // Three-layer position network 5 -> w0 -> w1 -> d.
        let widths = [5, config.mlp_widths[0], config.mlp_widths[1], d];
        for i in 0..3 {
            params.init_matrix(&mut rng, &format!("pos.f{}.w", i), widths[i], widths[i + 1])?;
            params.init_zeros(&format!("pos.f{}.b", i), &[widths[i + 1]])?;
        }

        for l in 0..config.encoder_layers {
            register_attention_block(
                &mut params,
                &mut rng,
                &format!("enc.l{}", l),
                d,
                config.encoder_heads,
                false,
            )?;
        }
        params.init_ones("enc.ln.g", &[d])?;
        params.init_zeros("enc.ln.b", &[d])?;

        params.init_matrix(&mut rng, "dec.embed", vocab_size, d)?;
        for l in 0..config.decoder_layers {
            register_attention_block(
                &mut params,
                &mut rng,
                &format!("dec.l{}", l),
                d,
                config.decoder_heads,
                true,
            )?;
        }
        params.init_ones("dec.ln.g", &[d])?;
        params.init_zeros("dec.ln.b", &[d])?;
        params.init_matrix(&mut rng, "dec.wout", d, vocab_size)?;

        // Pairwise position-score parameters, drawn last so the preceding
        // stream is mode-independent.
        if config.attention == AttentionMode::PcAttention {
            params.init_matrix(&mut rng, "enc.pc.wa", 2 * d, d)?;
            params.init_matrix(&mut rng, "enc.pc.va", d, 1)?;
        }

        if config.zero_positions {
            for entry in params.entries_mut() {
                if entry.name.starts_with("pos.") {
                    entry.trainable = false;
                }
            }
        }

        Ok(Model {
            config,
            vocab_size,
            params,
        })
    }
}

fn register_attention_block(
    params: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
    heads: usize,
    with_cross: bool,
) -> Result<()> {
    let dh = d / heads;
    params.init_ones(&format!("{}.ln1.g", prefix), &[d])?;
    params.init_zeros(&format!("{}.ln1.b", prefix), &[d])?;
    let attn_names: &[&str] = if with_cross { &["sa", "ca"] } else { &["sa"] };
    for (i, attn) in attn_names.iter().enumerate() {
        for h in 0..heads {
            params.init_matrix(rng, &format!("{}.{}.h{}.wq", prefix, attn, h), d, dh)?;
            params.init_matrix(rng, &format!("{}.{}.h{}.wk", prefix, attn, h), d, dh)?;
            params.init_matrix(rng, &format!("{}.{}.h{}.wv", prefix, attn, h), d, dh)?;
        }
        params.init_matrix(rng, &format!("{}.{}.wo", prefix, attn), d, d)?;
        params.init_zeros(&format!("{}.{}.bo", prefix, attn), &[d])?;
        if with_cross && i == 0 {
            params.init_ones(&format!("{}.ln2.g", prefix), &[d])?;
            params.init_zeros(&format!("{}.ln2.b", prefix), &[d])?;
        }
    }
    let ff_ln = if with_cross { "ln3" } else { "ln2" };
    params.init_ones(&format!("{}.{}.g", prefix, ff_ln), &[d])?;
    params.init_zeros(&format!("{}.{}.b", prefix, ff_ln), &[d])?;
    params.init_matrix(rng, &format!("{}.ff1.w", prefix), d, 4 * d)?;
    params.init_zeros(&format!("{}.ff1.b", prefix), &[4 * d])?;
    params.init_matrix(rng, &format!("{}.ff2.w", prefix), 4 * d, d)?;
    params.init_zeros(&format!("{}.ff2.b", prefix), &[d])?;
    Ok(())
}

/// Pre-norm attention block built from named parameters: queries from
/// `query_input`, keys/values from `kv_input`, optional additive logit
/// bias shared by all heads, optional boolean mask (true = blocked).
/// Returns the projected output and the per-head attention matrices.
pub(crate) fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    heads: usize,
    query_input: NodeId,
    kv_input: NodeId,
    bias_table: Option<NodeId>,
    mask: Option<&[bool]>,
) -> Result<(NodeId, Vec<NodeId>)> {
    let d = g.value(query_input).cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as Scalar).sqrt();
    let mut head_outputs = Vec::with_capacity(heads);
    let mut attention_maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let wq = g.param(store, &format!("{}.h{}.wq", prefix, h))?;
        let wk = g.param(store, &format!("{}.h{}.wk", prefix, h))?;
        let wv = g.param(store, &format!("{}.h{}.wv", prefix, h))?;
        let q = g.matmul(query_input, wq)?;
        let k = g.matmul(kv_input, wk)?;
        let v = g.matmul(kv_input, wv)?;
        let kt = g.transpose(k)?;
        let raw = g.matmul(q, kt)?;
        let mut logits = g.scale(raw, scale);
        if let Some(table) = bias_table {
            logits = g.add(logits, table)?;
        }
        if let Some(m) = mask {
            logits = g.masked_fill(logits, m, MASK_FILL_VALUE)?;
        }
        let attn = g.softmax_rows(logits)?;
        let out = g.matmul(attn, v)?;
        attention_maps.push(attn);
        head_outputs.push(out);
    }
    let concat = if head_outputs.len() == 1 {
        head_outputs[0]
    } else {
        g.concat(&head_outputs, 1)?
    };
    let wo = g.param(store, &format!("{}.wo", prefix))?;
    let bo = g.param(store, &format!("{}.bo", prefix))?;
    let projected = g.matmul(concat, wo)?;
    let out = g.add_bias(projected, bo)?;
    Ok((out, attention_maps))
}

/// Position-wise feed-forward with a 4x hidden expansion.
pub(crate) fn feed_forward(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let w1 = g.param(store, &format!("{}.ff1.w", prefix))?;
    let b1 = g.param(store, &format!("{}.ff1.b", prefix))?;
    let w2 = g.param(store, &format!("{}.ff2.w", prefix))?;
    let b2 = g.param(store, &format!("{}.ff2.b", prefix))?;
    let h = g.matmul(x, w1)?;
    let h = g.add_bias(h, b1)?;
    let h = g.relu(h);
    let out = g.matmul(h, w2)?;
    g.add_bias(out, b2)
}

pub(crate) fn layer_norm(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: NodeId,
) -> Result<NodeId> {
    let gain = g.param(store, &format!("{}.g", name))?;
    let bias = g.param(store, &format!("{}.b", name))?;
    g.layer_norm_rows(x, gain, bias)
}
