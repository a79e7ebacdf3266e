//! Attention-map export: plain-text grids for every encoder layer and
//! head, plus heat-map overlays keyed by block bounding boxes, and the
//! decoder's per-token cross-attention rows.

use std::fmt::Write as _;
use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::error::Result;
use crate::model::embedder::combine;
use crate::model::DecodeConfig;
use crate::nn::{Graph, Scalar};
use crate::segmentation::{segment, BoundingBox, GrayImage};
use crate::token::detokenize;
use crate::train::RunConfig;

fn grid_text(rows: usize, cols: usize, at: impl Fn(usize, usize) -> Scalar) -> String {
    let mut out = String::new();
    for i in 0..rows {
        let line: Vec<String> = (0..cols).map(|j| format!("{:.6}", at(i, j))).collect();
        writeln!(out, "{}", line.join(" ")).expect("write to string");
    }
    out
}

/// Shades each box's background pixels by its weight: full attention is
/// dark, none leaves the paper untouched. Ink stays black.
fn overlay(base: &GrayImage, boxes: &[BoundingBox], weights: &[Scalar]) -> GrayImage {
    let mut img = base.clone();
    for (b, &w) in boxes.iter().zip(weights) {
        let shade = (255.0 - 220.0 * (w as f64).clamp(0.0, 1.0)) as u8;
        for r in b.top..=b.bottom {
            for c in b.left..=b.right {
                if img.get(r, c) > shade {
                    img.set(r, c, shade);
                }
            }
        }
    }
    img
}

/// Runs the encoder and a greedy decode over one image and writes every
/// attention artifact into `out_dir`.
pub fn export_attention(
    ckpt: &Checkpoint,
    image: &GrayImage,
    threshold: u8,
    run: &RunConfig,
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let seg_cfg = run.segmentation_config(threshold)?;
    let (blocks, vectors) = segment(image, &seg_cfg)?;
    let boxes: Vec<BoundingBox> = blocks.iter().map(|b| b.bbox).collect();
    let model = &ckpt.model;

    let mut g = Graph::new();
    let patches: Vec<&[Scalar]> = blocks.iter().map(|b| b.patch.as_slice()).collect();
    let s = model.embed_blocks_graph(&mut g, &patches)?;
    let p = model.embed_positions_graph(&mut g, &vectors)?;
    let e = combine(&mut g, s, p)?;
    let encoded = model.encode_graph(&mut g, e, p)?;
    let n = boxes.len();

    for (l, layer) in encoded.attention.iter().enumerate() {
        for (h, &map) in layer.iter().enumerate() {
            let v = g.value(map);
            std::fs::write(
                out_dir.join(format!("encoder_layer{}_head{}.txt", l, h)),
                grid_text(n, n, |i, j| v.at(i, j)),
            )?;
        }
    }

    // Final-layer head-mean overlays, one per target block.
    let last = encoded.attention.last().expect("at least one layer");
    let heads = last.len() as Scalar;
    for i in 0..n {
        let weights: Vec<Scalar> = (0..n)
            .map(|j| last.iter().map(|&m| g.value(m).at(i, j)).sum::<Scalar>() / heads)
            .collect();
        let mut img = overlay(image, &boxes, &weights);
        // Outline the target block.
        let b = boxes[i];
        for c in b.left..=b.right {
            img.set(b.top, c, 0);
            img.set(b.bottom, c, 0);
        }
        for r in b.top..=b.bottom {
            img.set(r, b.left, 0);
            img.set(r, b.right, 0);
        }
        img.save_png(&out_dir.join(format!("encoder_target{:03}.png", i)))?;
    }

    // Greedy decode, then per-token cross-attention rows.
    let r_value = g.value(encoded.encoded).clone();
    let decoded = model.decode(&r_value, &DecodeConfig::greedy(ckpt.max_decode_len))?;
    let rows = model.export_decoder_attention(&decoded.content_ids, &r_value)?;
    let tokens = ckpt.vocab.decode(&decoded.content_ids)?;
    let mut text = String::new();
    for (t, (token, row)) in tokens.iter().zip(&rows).enumerate() {
        let values: Vec<String> = row.iter().map(|v| format!("{:.6}", v)).collect();
        writeln!(text, "{}\t{}\t{}", t, token.text, values.join(" ")).expect("write to string");
        overlay(image, &boxes, row)
            .save_png(&out_dir.join(format!("decoder_step{:03}.png", t)))?;
    }
    std::fs::write(out_dir.join("decoder_rows.txt"), text)?;
    std::fs::write(
        out_dir.join("decoded.txt"),
        format!("{}\n", detokenize(&tokens)?),
    )?;
    Ok(())
}
