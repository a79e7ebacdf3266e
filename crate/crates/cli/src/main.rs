//! Command-line pipeline: corpus generation, segmentation inspection,
//! training, prediction, evaluation, and attention export.
//!
//! Every flag of the training run can also come from a TOML config file
//! (`--config run.toml`); explicit flags override file values. The only
//! environment variable honored is `MATHREC_OUT_ROOT`, the root for
//! relative output paths.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mathrec::checkpoint::load_checkpoint;
use mathrec::data::{ingest, read_predictions, write_predictions, Split};
use mathrec::inspect::export_attention;
use mathrec::model::{AttentionMode, ModelConfig};
use mathrec::render::{ExternalCommandRenderer, GlyphRenderer, Renderer};
use mathrec::segmentation::{segment, write_debug_output, GrayImage};
use mathrec::synth::{generate, write_corpus, SynthesisConfig};
use mathrec::train::{evaluate_predictions, predict_images, train, RunConfig};

const OUT_ROOT_ENV: &str = "MATHREC_OUT_ROOT";

#[derive(Parser)]
#[command(
    name = "mathrec",
    about = "Symbol-level math expression recognition pipeline",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment an image into symbol blocks and write debug artifacts.
    Segment(SegmentArgs),
    /// Generate a synthetic expression corpus.
    Gen(GenArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Transcribe images with a trained checkpoint.
    Predict(PredictArgs),
    /// Score a predictions file against manifest ground truth.
    Evaluate(EvaluateArgs),
    /// Export encoder and decoder attention artifacts for one image.
    InspectAttention(InspectArgs),
}

#[derive(Args)]
struct SegmentArgs {
    /// Input grayscale PNG.
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 160)]
    threshold: u8,
    #[arg(long, default_value_t = 8)]
    connectivity: u8,
    #[arg(long, default_value_t = 2)]
    min_area: usize,
    /// Output directory for block images and the position sidecar.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 2)]
    max_depth: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    valid_frac: f64,
    /// Output corpus directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Default)]
struct RunOverrides {
    /// TOML file supplying any of the run fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    encoder_layers: Option<usize>,
    #[arg(long)]
    encoder_heads: Option<usize>,
    #[arg(long)]
    decoder_layers: Option<usize>,
    #[arg(long)]
    decoder_heads: Option<usize>,
    /// Attention mechanism: "pc" or "self".
    #[arg(long)]
    attention: Option<String>,
    /// Ablation: force all position embeddings to zero.
    #[arg(long)]
    zero_positions: bool,
    /// Use the full-scale architecture (256-d, 8 layers, 8 heads).
    #[arg(long)]
    full_scale: bool,
    /// Comma-separated training segmentation thresholds.
    #[arg(long)]
    thresholds: Option<String>,
    #[arg(long)]
    eval_threshold: Option<u8>,
    #[arg(long)]
    connectivity: Option<u8>,
    #[arg(long)]
    min_component_area: Option<usize>,
    #[arg(long)]
    bilinear: bool,
    #[arg(long)]
    max_decode_len_cap: Option<usize>,
    #[arg(long)]
    beam_width: Option<usize>,
}

impl RunOverrides {
    fn build(&self) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if self.full_scale {
            run.model = ModelConfig::full_scale();
        }
        if let Some(v) = self.seed {
            run.seed = v;
        }
        if let Some(v) = self.learning_rate {
            run.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            run.batch_size = v;
        }
        if let Some(v) = self.max_epochs {
            run.max_epochs = v;
        }
        if let Some(v) = self.embed_dim {
            run.model.embed_dim = v;
        }
        if let Some(v) = self.encoder_layers {
            run.model.encoder_layers = v;
        }
        if let Some(v) = self.encoder_heads {
            run.model.encoder_heads = v;
        }
        if let Some(v) = self.decoder_layers {
            run.model.decoder_layers = v;
        }
        if let Some(v) = self.decoder_heads {
            run.model.decoder_heads = v;
        }
        if let Some(v) = &self.attention {
            run.model.attention = match v.as_str() {
                "pc" => AttentionMode::PcAttention,
                "self" => AttentionMode::SelfAttention,
                other => bail!("unknown attention mode {:?}; use pc or self", other),
            };
        }
        if self.zero_positions {
            run.model.zero_positions = true;
        }
        if let Some(list) = &self.thresholds {
            let thresholds: std::result::Result<Vec<u8>, _> =
                list.split(',').map(|t| t.trim().parse::<u8>()).collect();
            run.augmentation.thresholds = thresholds.context("parsing --thresholds")?;
        }
        if let Some(v) = self.eval_threshold {
            run.augmentation.eval_threshold = v;
        }
        if let Some(v) = self.connectivity {
            run.connectivity = v;
        }
        if let Some(v) = self.min_component_area {
            run.min_component_area = v;
        }
        if self.bilinear {
            run.bilinear_resampling = true;
        }
        if let Some(v) = self.max_decode_len_cap {
            run.max_decode_len_cap = v;
        }
        if let Some(v) = self.beam_width {
            run.beam_width = v;
        }
        Ok(run)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest (split<TAB>image_path<TAB>latex).
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for the checkpoint and training log.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    run: RunOverrides,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest to draw images from.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Split to predict when --manifest is given.
    #[arg(long, default_value = "test")]
    split: String,
    /// Explicit image files (alternative to --manifest).
    #[arg(long, num_args = 1..)]
    images: Vec<PathBuf>,
    #[arg(long, default_value_t = 160)]
    threshold: u8,
    #[arg(long)]
    beam_width: Option<usize>,
    /// Output predictions file (image_id<TAB>latex).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for the summary TSV and per-item JSONL.
    #[arg(long)]
    out: PathBuf,
    /// External render command; the built-in glyph renderer when absent.
    #[arg(long)]
    render_command: Option<String>,
    #[arg(long, default_value_t = 160)]
    render_threshold: u8,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 160)]
    threshold: u8,
    #[arg(long)]
    out: PathBuf,
}

/// Relative output paths land under `MATHREC_OUT_ROOT` when it is set.
fn out_path(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {:#}", err);
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Segment(args) => cmd_segment(args),
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::InspectAttention(args) => cmd_inspect(args),
    }
}

fn cmd_segment(args: SegmentArgs) -> Result<()> {
    let img = GrayImage::load_png(&args.image)?;
    let mut run = RunConfig::default();
    run.connectivity = args.connectivity;
    run.min_component_area = args.min_area;
    let cfg = run.segmentation_config(args.threshold)?;
    let (blocks, vectors) = segment(&img, &cfg)?;
    let out = out_path(&args.out);
    let stem = args
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    write_debug_output(&out, &stem, &blocks, &vectors)?;
    println!(
        "segmented {} into {} blocks; artifacts in {}",
        args.image.display(),
        blocks.len(),
        out.display()
    );
    Ok(())
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let cfg = SynthesisConfig {
        count: args.count,
        max_depth: args.max_depth,
        seed: args.seed,
        train_frac: args.train_frac,
        valid_frac: args.valid_frac,
    };
    let items = generate(&cfg)?;
    let out = out_path(&args.out);
    let manifest = write_corpus(&out, &items)?;
    println!(
        "wrote {} expressions; manifest at {}",
        items.len(),
        manifest.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let run = args.run.build()?;
    let manifest = ingest(&args.manifest)?;
    let out = out_path(&args.out);
    let outcome = train(&run, &manifest, &out)?;
    if outcome.dropped_samples > 0 {
        eprintln!(
            "warning: {} training samples dropped (no foreground components)",
            outcome.dropped_samples
        );
    }
    println!(
        "trained {} epochs{}; best valid loss {:.6}; checkpoint at {}",
        outcome.epochs_run,
        if outcome.stopped_early {
            " (stopped early)"
        } else {
            ""
        },
        outcome.best_valid_loss,
        outcome.checkpoint_path.display()
    );
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let mut run = RunConfig::default();
    if let Some(w) = args.beam_width {
        run.beam_width = w;
    }
    let mut images: Vec<(String, GrayImage)> = Vec::new();
    if let Some(manifest_path) = &args.manifest {
        let manifest = ingest(manifest_path)?;
        let split = Split::parse(&args.split)
            .with_context(|| format!("unknown split {:?}", args.split))?;
        for record in manifest.split(split) {
            images.push((record.id(), GrayImage::load_png(&manifest.resolve(record))?));
        }
    }
    for path in &args.images {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        images.push((id, GrayImage::load_png(path)?));
    }
    if images.is_empty() {
        bail!("no images given; use --manifest or --images");
    }
    let records = predict_images(&ckpt, &images, args.threshold, &run)?;
    for r in &records {
        if let Some(flag) = &r.flag {
            eprintln!("warning: {}: {}", r.id, flag);
        }
    }
    let out = out_path(&args.out);
    let pairs: Vec<(String, String)> = records.into_iter().map(|r| (r.id, r.latex)).collect();
    write_predictions(&out, &pairs)?;
    println!("wrote {} predictions to {}", pairs.len(), out.display());
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let predictions = read_predictions(&args.predictions)?;
    let manifest = ingest(&args.manifest)?;
    let renderer: Box<dyn Renderer> = match &args.render_command {
        Some(command) => {
            let mut parts = command.split_whitespace().map(str::to_string);
            let program = parts.next().context("empty --render-command")?;
            Box::new(ExternalCommandRenderer {
                program,
                args: parts.collect(),
                threshold: args.render_threshold,
            })
        }
        None => Box::new(GlyphRenderer),
    };
    let report = evaluate_predictions(&predictions, &manifest, renderer.as_ref())?;
    let out = out_path(&args.out);
    std::fs::create_dir_all(&out)?;
    report.write_files(&out.join("summary.tsv"), &out.join("items.jsonl"))?;
    print!("{}", report.summary_tsv());
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let image = GrayImage::load_png(&args.image)?;
    let out = out_path(&args.out);
    export_attention(&ckpt, &image, args.threshold, &RunConfig::default(), &out)?;
    println!("attention artifacts in {}", out.display());
    Ok(())
}
