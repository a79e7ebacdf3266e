//! Seeded synthetic expression corpus generation.
//!
//! Expressions are drawn from a small recursive grammar over the glyph
//! atlas (atoms, + - =, superscripts, subscripts, fractions, parentheses),
//! rendered deterministically, and written out with their ground-truth
//! component boxes as segmentation oracles.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_manifest, ManifestRecord, Split};
use crate::error::{Error, Result};
use crate::render::{mask_to_gray, render_tokens, Rendered};
use crate::segmentation::BoundingBox;
use crate::token::tokenize;

const ATOMS: [&str; 16] = [
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "a", "b", "c", "x", "y", "z",
];
const OPERATORS: [&str; 3] = ["+", "-", "="];

#[derive(Debug, Clone)]
pub struct SynthesisConfig {
    pub count: usize,
    pub max_depth: usize,
    pub seed: u64,
    pub train_frac: f64,
    pub valid_frac: f64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            count: 100,
            max_depth: 2,
            seed: 0,
            train_frac: 0.8,
            valid_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthItem {
    pub id: String,
    pub latex: String,
    pub split: Split,
    pub rendered: Rendered,
}

fn gen_expr(rng: &mut ChaCha8Rng, depth: usize, out: &mut String) {
    if depth == 0 {
        out.push_str(ATOMS[rng.gen_range(0..ATOMS.len())]);
        return;
    }
    match rng.gen_range(0..10u32) {
        0..=1 => out.push_str(ATOMS[rng.gen_range(0..ATOMS.len())]),
        2..=4 => {
            gen_expr(rng, depth - 1, out);
            out.push_str(OPERATORS[rng.gen_range(0..OPERATORS.len())]);
            gen_expr(rng, depth - 1, out);
        }
        5..=6 => {
            out.push_str(ATOMS[rng.gen_range(0..ATOMS.len())]);
            out.push(if rng.gen_bool(0.5) { '^' } else { '_' });
            out.push('{');
            gen_expr(rng, depth - 1, out);
            out.push('}');
        }
        7..=8 => {
            out.push_str("\\frac{");
            gen_expr(rng, depth - 1, out);
            out.push_str("}{");
            gen_expr(rng, depth - 1, out);
            out.push('}');
        }
        _ => {
            out.push('(');
            gen_expr(rng, depth - 1, out);
            out.push(')');
        }
    }
}

/// Generates `count` distinct expressions, rendered, with deterministic
/// split assignment. The same config reproduces the same corpus.
pub fn generate(cfg: &SynthesisConfig) -> Result<Vec<SynthItem>> {
    if cfg.count == 0 {
        return Err(Error::InvalidInput("corpus count must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.train_frac)
        || !(0.0..=1.0).contains(&cfg.valid_frac)
        || cfg.train_frac + cfg.valid_frac > 1.0
    {
        return Err(Error::InvalidInput("split fractions out of range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seen = std::collections::HashSet::new();
    let mut latexes = Vec::with_capacity(cfg.count);
    let mut attempts = 0usize;
    while latexes.len() < cfg.count {
        attempts += 1;
        if attempts > cfg.count * 1000 {
            return Err(Error::InvalidInput(format!(
                "grammar space too small for {} distinct expressions at depth {}",
                cfg.count, cfg.max_depth
            )));
        }
        let mut s = String::new();
        gen_expr(&mut rng, cfg.max_depth, &mut s);
        if seen.insert(s.clone()) {
            latexes.push(s);
        }
    }

    let train_end = (cfg.count as f64 * cfg.train_frac).round() as usize;
    let valid_end = train_end + (cfg.count as f64 * cfg.valid_frac).round() as usize;
    let width = cfg.count.to_string().len().max(4);
    latexes
        .into_iter()
        .enumerate()
        .map(|(i, latex)| {
            let tokens = tokenize(&latex)?;
            let rendered = render_tokens(&tokens)?;
            let split = if i < train_end {
                Split::Train
            } else if i < valid_end.min(cfg.count) {
                Split::Valid
            } else {
                Split::Test
            };
            Ok(SynthItem {
                id: format!("expr{:0width$}", i, width = width),
                latex,
                split,
                rendered,
            })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GroundTruthBoxes {
    pub id: String,
    /// Component boxes as (top, bottom, left, right), recorded per placed
    /// glyph component.
    pub boxes: Vec<(usize, usize, usize, usize)>,
}

/// Writes PNGs, the manifest, and a JSON-lines ground-truth box file.
/// Returns the manifest path.
pub fn write_corpus(dir: &Path, items: &[SynthItem]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("images"))?;
    let mut records = Vec::with_capacity(items.len());
    let mut boxes_jsonl = String::new();
    for item in items {
        let rel = format!("images/{}.png", item.id);
        let gray = mask_to_gray(&item.rendered.image);
        gray.save_png(&dir.join(&rel))?;
        records.push(ManifestRecord {
            split: item.split,
            image_path: PathBuf::from(rel),
            latex: item.latex.clone(),
        });
        let gt = GroundTruthBoxes {
            id: item.id.clone(),
            boxes: ground_truth_boxes(&item.rendered)
                .iter()
                .map(|b| (b.top, b.bottom, b.left, b.right))
                .collect(),
        };
        writeln!(
            boxes_jsonl,
            "{}",
            serde_json::to_string(&gt).map_err(|e| Error::InvalidInput(e.to_string()))?
        )
        .expect("write to string");
    }
    std::fs::write(dir.join("boxes.jsonl"), boxes_jsonl)?;
    let manifest_path = dir.join("manifest.tsv");
    write_manifest(&manifest_path, &records)?;
    Ok(manifest_path)
}

/// All recorded component boxes of a rendered item, sorted the way
/// segmentation sorts its output: by (left, top).
pub fn ground_truth_boxes(rendered: &Rendered) -> Vec<BoundingBox> {
    let mut boxes: Vec<BoundingBox> = rendered
        .glyphs
        .iter()
        .flat_map(|g| g.component_boxes.iter().copied())
        .collect();
    boxes.sort_by_key(|b| (b.left, b.top));
    boxes
}
