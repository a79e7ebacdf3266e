//! Dataset preparation, the training loop, prediction, and evaluation glue.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::data::{augment, AugmentationPlan, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_corpus, EvalPair, MetricReport};
use crate::model::{DecodeConfig, DecodeStrategy, Model, ModelConfig};
use crate::nn::{adam_step, lr_schedule, Graph, OptimizerState, Scalar, ScheduleEvent};
use crate::render::Renderer;
use crate::segmentation::{
    segment, Connectivity, GrayImage, PositionVector, Resampling, SegmentationConfig, SymbolBlock,
};
use crate::token::{detokenize, tokenize, Token, TokenSequence, Vocabulary};

/// Everything a run needs beyond the dataset itself. All fields can come
/// from CLI flags or a TOML config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub augmentation: AugmentationPlan,
    pub connectivity: u8,
    pub min_component_area: usize,
    pub bilinear_resampling: bool,
    /// Hard cap on the decode length derived from the training set.
    pub max_decode_len_cap: usize,
    pub beam_width: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            seed: 0,
            learning_rate: 3e-4,
            batch_size: 8,
            max_epochs: 50,
            augmentation: AugmentationPlan::default(),
            connectivity: 8,
            min_component_area: 2,
            bilinear_resampling: false,
            max_decode_len_cap: 256,
            beam_width: 1,
        }
    }
}

impl RunConfig {
    pub fn segmentation_config(&self, threshold: u8) -> Result<SegmentationConfig> {
        let connectivity = match self.connectivity {
            4 => Connectivity::Four,
            8 => Connectivity::Eight,
            other => {
                return Err(Error::InvalidInput(format!(
                    "connectivity must be 4 or 8, got {}",
                    other
                )))
            }
        };
        Ok(SegmentationConfig {
            threshold,
            connectivity,
            min_component_area: self.min_component_area,
            resampling: if self.bilinear_resampling {
                Resampling::Bilinear
            } else {
                Resampling::NearestNeighbor
            },
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augmentation.validate()?;
        self.segmentation_config(self.augmentation.eval_threshold)?;
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidInput(
                "batch_size and max_epochs must be positive".into(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidInput("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// A segmented sample ready for the model.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub threshold: u8,
    pub blocks: Vec<SymbolBlock>,
    pub vectors: Vec<PositionVector>,
    pub target: TokenSequence,
    pub target_tokens: usize,
}

#[derive(Debug, Default)]
pub struct PreparationWarnings {
    pub dropped: Vec<String>,
}

fn prepare_record(
    manifest: &DatasetManifest,
    record_index: usize,
    threshold: u8,
    config: &RunConfig,
    vocab: &Vocabulary,
) -> Result<Option<PreparedSample>> {
    let record = &manifest.records[record_index];
    let img = GrayImage::load_png(&manifest.resolve(record))?;
    let seg_cfg = config.segmentation_config(threshold)?;
    let (blocks, vectors) = match segment(&img, &seg_cfg) {
        Ok(pair) => pair,
        Err(Error::EmptyExpression) => return Ok(None),
        Err(e) => return Err(e),
    };
    let tokens = tokenize(&record.latex)?;
    let content = vocab.encode(&tokens);
    let target = TokenSequence::complete(content);
    let target_tokens = target.ids.len() - 1; // scored steps: content + EOS
    Ok(Some(PreparedSample {
        id: record.id(),
        threshold,
        blocks,
        vectors,
        target,
        target_tokens,
    }))
}

/// Segments and encodes every sample of a split up front; segmentation is
/// deterministic, so this is done once rather than per epoch.
pub fn prepare_split(
    manifest: &DatasetManifest,
    split: Split,
    config: &RunConfig,
    vocab: &Vocabulary,
    warnings: &mut PreparationWarnings,
) -> Result<Vec<PreparedSample>> {
    let mut out = Vec::new();
    if split == Split::Train {
        for sample in augment(manifest, &config.augmentation)? {
            match prepare_record(manifest, sample.record_index, sample.threshold, config, vocab)? {
                Some(p) => out.push(p),
                None => warnings.dropped.push(format!(
                    "{} at threshold {}",
                    manifest.records[sample.record_index].id(),
                    sample.threshold
                )),
            }
        }
    } else {
        let threshold = config.augmentation.eval_threshold;
        for (i, r) in manifest.records.iter().enumerate() {
            if r.split != split {
                continue;
            }
            match prepare_record(manifest, i, threshold, config, vocab)? {
                Some(p) => out.push(p),
                None => warnings
                    .dropped
                    .push(format!("{} at threshold {}", r.id(), threshold)),
            }
        }
    }
    Ok(out)
}

/// Builds the vocabulary from the training split's LaTeX strings.
pub fn build_vocab(manifest: &DatasetManifest) -> Result<Vocabulary> {
    let corpus: Result<Vec<Vec<Token>>> = manifest
        .split(Split::Train)
        .map(|r| tokenize(&r.latex))
        .collect();
    Vocabulary::build(&corpus?)
}

#[derive(Debug, Serialize)]
struct EpochLog<'a> {
    epoch: usize,
    train_loss: f64,
    train_loss_per_token: f64,
    valid_loss: f64,
    learning_rate: f64,
    events: Vec<&'a str>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub best_valid_loss: f64,
    pub final_train_loss_per_token: f64,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub max_decode_len: usize,
    pub dropped_samples: usize,
}

pub fn sample_loss_graph(model: &Model, g: &mut Graph, sample: &PreparedSample) -> Result<crate::nn::NodeId> {
    let patches: Vec<&[Scalar]> = sample.blocks.iter().map(|b| b.patch.as_slice()).collect();
    let s = model.embed_blocks_graph(g, &patches)?;
    let p = model.embed_positions_graph(g, &sample.vectors)?;
    let e = crate::model::embedder::combine(g, s, p)?;
    let encoded = model.encode_graph(g, e, p)?;
    model.sequence_nll_graph(g, &sample.target, encoded.encoded)
}

fn mean_nll(model: &Model, samples: &[PreparedSample]) -> Result<f64> {
    let mut total = 0.0;
    for sample in samples {
        let mut g = Graph::new();
        let loss = sample_loss_graph(model, &mut g, sample)?;
        total += g.value(loss).item() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Trains on the prepared splits, writing the best-validation checkpoint
/// and a JSON-lines log under `out_dir`. Fixed seed and single-threaded
/// execution make the run bit-reproducible.
pub fn train(
    config: &RunConfig,
    manifest: &DatasetManifest,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let vocab = build_vocab(manifest)?;
    let mut warnings = PreparationWarnings::default();
    let train_samples = prepare_split(manifest, Split::Train, config, &vocab, &mut warnings)?;
    let valid_samples = prepare_split(manifest, Split::Valid, config, &vocab, &mut warnings)?;
    if train_samples.is_empty() || valid_samples.is_empty() {
        return Err(Error::InvalidInput(
            "train and valid splits must be non-empty after preparation".into(),
        ));
    }

    let longest_target = train_samples
        .iter()
        .map(|s| s.target.content().len())
        .max()
        .unwrap_or(0);
    let max_decode_len = ((longest_target * 3).div_ceil(2)).max(4).min(config.max_decode_len_cap);

    let mut model = Model::new(config.model.clone(), vocab.len(), config.seed)?;
    let mut optimizer = OptimizerState::new(&model.params, config.learning_rate as Scalar);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e3779b97f4a7c15));

    let checkpoint_path = out_dir.join("best.ckpt");
    let log_path = out_dir.join("train_log.jsonl");
    let mut log = String::new();
    let mut epochs_run = 0;
    let mut stopped_early = false;
    let mut final_per_token = f64::INFINITY;

    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    for epoch in 1..=config.max_epochs {
        epochs_run = epoch;
        order.shuffle(&mut shuffle_rng);
        let mut epoch_nll = 0.0f64;
        let mut epoch_tokens = 0usize;
        for (batch_index, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut g = Graph::new();
            let mut losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let loss = sample_loss_graph(&model, &mut g, &train_samples[i])?;
                epoch_nll += g.value(loss).item() as f64;
                epoch_tokens += train_samples[i].target_tokens;
                losses.push(loss);
            }
            let mut total = losses[0];
            for &l in &losses[1..] {
                total = g.add(total, l)?;
            }
            let batch_loss = g.scale(total, 1.0 / chunk.len() as Scalar);
            if !g.value(batch_loss).is_finite() {
                let dump = serde_json::json!({
                    "epoch": epoch,
                    "batch": batch_index,
                    "sample_ids": chunk.iter().map(|&i| train_samples[i].id.clone()).collect::<Vec<_>>(),
                });
                std::fs::write(out_dir.join("diagnostic_dump.json"), dump.to_string())?;
                return Err(Error::Numeric(format!(
                    "non-finite loss in epoch {} batch {}; diagnostic dump written",
                    epoch, batch_index
                )));
            }
            g.backward(batch_loss, &mut model.params)?;
            adam_step(&mut model.params, &mut optimizer)?;
            model.params.clear_grads();
        }
        let train_loss = epoch_nll / train_samples.len() as f64;
        final_per_token = epoch_nll / epoch_tokens as f64;
        let valid_loss = mean_nll(&model, &valid_samples)?;
        let events = lr_schedule(&mut optimizer, valid_loss as Scalar);
        let event_names: Vec<&str> = events
            .iter()
            .map(|e| match e {
                ScheduleEvent::Improved => "improved",
                ScheduleEvent::Halved => "halved",
                ScheduleEvent::Stopped => "stopped",
            })
            .collect();
        if events.contains(&ScheduleEvent::Improved) {
            save_checkpoint(
                &checkpoint_path,
                &model,
                &vocab,
                Some(&optimizer),
                max_decode_len,
            )?;
        }
        let line = EpochLog {
            epoch,
            train_loss,
            train_loss_per_token: final_per_token,
            valid_loss,
            learning_rate: optimizer.learning_rate as f64,
            events: event_names,
        };
        writeln!(
            log,
            "{}",
            serde_json::to_string(&line).map_err(|e| Error::InvalidInput(e.to_string()))?
        )
        .expect("write to string");
        if optimizer.stop {
            stopped_early = true;
            break;
        }
    }
    std::fs::write(&log_path, &log)?;
    if !checkpoint_path.is_file() {
        // Possible only if validation never improved on the first epoch,
        // which cannot happen (the first epoch always sets the best); keep
        // the guard for robustness.
        save_checkpoint(&checkpoint_path, &model, &vocab, Some(&optimizer), max_decode_len)?;
    }
    Ok(TrainOutcome {
        epochs_run,
        stopped_early,
        best_valid_loss: optimizer.best_valid_loss.unwrap_or(Scalar::INFINITY) as f64,
        final_train_loss_per_token: final_per_token,
        checkpoint_path,
        log_path,
        max_decode_len,
        dropped_samples: warnings.dropped.len(),
    })
}

#[derive(Debug, Clone)]
pub struct PredictionRecord {
    pub id: String,
    pub latex: String,
    /// Present when the image produced no usable prediction.
    pub flag: Option<String>,
}

/// Transcribes images with a trained checkpoint. Empty-expression images
/// are reported with empty output, not fatal.
pub fn predict_images(
    ckpt: &Checkpoint,
    images: &[(String, GrayImage)],
    threshold: u8,
    run: &RunConfig,
) -> Result<Vec<PredictionRecord>> {
    let seg_cfg = run.segmentation_config(threshold)?;
    let decode_cfg = DecodeConfig {
        strategy: if run.beam_width > 1 {
            DecodeStrategy::Beam {
                width: run.beam_width,
            }
        } else {
            DecodeStrategy::Greedy
        },
        max_len: ckpt.max_decode_len,
    };
    let model = &ckpt.model;
    let mut out = Vec::with_capacity(images.len());
    for (id, img) in images {
        let (blocks, vectors) = match segment(img, &seg_cfg) {
            Ok(pair) => pair,
            Err(Error::EmptyExpression) => {
                out.push(PredictionRecord {
                    id: id.clone(),
                    latex: String::new(),
                    flag: Some("empty expression".into()),
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut g = Graph::new();
        let patches: Vec<&[Scalar]> = blocks.iter().map(|b| b.patch.as_slice()).collect();
        let s = model.embed_blocks_graph(&mut g, &patches)?;
        let p = model.embed_positions_graph(&mut g, &vectors)?;
        let e = crate::model::embedder::combine(&mut g, s, p)?;
        let encoded = model.encode_graph(&mut g, e, p)?;
        let r_value = g.value(encoded.encoded).clone();
        let decoded = model.decode(&r_value, &decode_cfg)?;
        match ckpt.vocab.decode(&decoded.content_ids) {
            Ok(tokens) => out.push(PredictionRecord {
                id: id.clone(),
                latex: detokenize(&tokens)?,
                flag: decoded.truncated.then(|| "truncated at max length".into()),
            }),
            Err(_) => out.push(PredictionRecord {
                id: id.clone(),
                latex: String::new(),
                flag: Some("decode emitted UNK".into()),
            }),
        }
    }
    Ok(out)
}

/// Pairs prediction strings with manifest gold by image id and runs the
/// metric suite. Unparseable predictions count as render failures.
pub fn evaluate_predictions(
    predictions: &[(String, String)],
    manifest: &DatasetManifest,
    renderer: &dyn Renderer,
) -> Result<MetricReport> {
    let gold_by_id: std::collections::HashMap<String, &str> = manifest
        .records
        .iter()
        .map(|r| (r.id(), r.latex.as_str()))
        .collect();
    let mut pairs: Vec<EvalPair> = Vec::with_capacity(predictions.len());
    for (id, pred) in predictions {
        let gold = gold_by_id.get(id).ok_or_else(|| {
            Error::Manifest(format!("prediction id {:?} not in manifest", id))
        })?;
        let gold_tokens = tokenize(gold)?;
        let pred_tokens =
            tokenize(pred).unwrap_or_else(|_| vec![Token::command("\\unparseable")]);
        pairs.push((id.clone(), pred_tokens, gold_tokens));
    }
    evaluate_corpus(&pairs, renderer)
}
