//! Command-line front end: dataset generation, training, evaluation,
//! inference, feature-map dumps and gradient checking.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 I/O or format error,
//! 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ptseformer::aggregation::{token_heatmap, write_pgm};
use ptseformer::config::RunConfig;
use ptseformer::error::Error;
use ptseformer::model::{detections_from, ContextFrame, PtseFormer};
use ptseformer::synthvid::{generate_dataset, nearest_context, Dataset};
use ptseformer::train::{
    evaluate_model, train_model, EvalOptions, EvalSplit, FrameCache, DEFAULT_SCORE_THRESHOLD,
};
use ptseformer::{gradcheck, Result};

#[derive(Parser)]
#[command(name = "ptse", about = "video object detector with temporal aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    All,
    Occluded,
    Clean,
}

impl SplitArg {
    fn to_split(self) -> EvalSplit {
        match self {
            SplitArg::All => EvalSplit::All,
            SplitArg::Occluded => EvalSplit::OccludedOnly,
            SplitArg::Clean => EvalSplit::CleanOnly,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic video dataset
    GenData {
        /// run config JSON (data section is used)
        #[arg(long)]
        config: Option<PathBuf>,
        /// output dataset directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a generated dataset
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// dataset directory (from gen-data)
        #[arg(long)]
        data: PathBuf,
        /// output directory for checkpoint, config and training log
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on a dataset (prints a JSON report)
    Eval {
        /// model checkpoint; a config.json is expected next to it
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        /// context frames per target (defaults to the trained setting)
        #[arg(long)]
        n_ctx: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_SCORE_THRESHOLD)]
        threshold: f64,
    },
    /// Run a checkpoint on one frame and print detections as JSON lines
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seq: usize,
        #[arg(long)]
        frame: usize,
        #[arg(long, default_value_t = 0.3)]
        threshold: f64,
    },
    /// Dump intermediate feature maps of one frame as PGM heatmaps
    Featmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seq: usize,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify every tensor op against finite differences
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => {
            let mut cfg = RunConfig::default();
            cfg.apply_env_overrides();
            Ok(cfg)
        }
    }
}

/// Rebuild the model from the config written next to the checkpoint, then
/// load the weights.
fn load_model(checkpoint: &Path) -> Result<(PtseFormer, RunConfig)> {
    let cfg_path = checkpoint
        .parent()
        .map(|d| d.join("config.json"))
        .unwrap_or_else(|| PathBuf::from("config.json"));
    let cfg = RunConfig::load(&cfg_path)?;
    let model = PtseFormer::new(&cfg.model, cfg.train.seed)?;
    model.load(checkpoint)?;
    Ok((model, cfg))
}

fn frame_with_context(
    cache: &FrameCache,
    cfg: &RunConfig,
    seq: usize,
    frame: usize,
) -> Result<(ptseformer::encoder::FrameImage, Vec<ContextFrame>)> {
    if seq >= cache.frames.len() || frame >= cache.frames[seq].len() {
        return Err(Error::Contract(format!(
            "sequence {seq} frame {frame} out of range"
        )));
    }
    let seq_len = cache.frames[seq].len();
    let ctx = nearest_context(seq_len, frame, cfg.model.window, cfg.model.num_context)?
        .into_iter()
        .map(|i| ContextFrame {
            image: cache.frames[seq][i].clone(),
            offset: i as i64 - frame as i64,
        })
        .collect();
    Ok((cache.frames[seq][frame].clone(), ctx))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = load_config(&config)?;
            let manifest = generate_dataset(&out, &cfg.data.scene, cfg.data.num_sequences)?;
            eprintln!(
                "wrote {} sequences x {} frames to {}",
                manifest.sequences.len(),
                cfg.data.scene.frames_per_sequence,
                out.display()
            );
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            quiet,
        } => {
            let cfg = load_config(&config)?;
            cfg.model.validate()?;
            let ds = Dataset::load(&data)?;
            let cache = FrameCache::load(&ds)?;
            let summary = train_model(&cfg, &ds, &cache, &out, !quiet)?;
            eprintln!(
                "done: final mAP {:.4}, checkpoint {}",
                summary.final_map,
                summary.checkpoint.display()
            );
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            n_ctx,
            threshold,
        } => {
            let (model, _cfg) = load_model(&checkpoint)?;
            let ds = Dataset::load(&data)?;
            let cache = FrameCache::load(&ds)?;
            let mut opts = EvalOptions::for_model(&model);
            opts.split = split.to_split();
            opts.score_threshold = threshold;
            if let Some(n) = n_ctx {
                opts.n_ctx = n;
            }
            let report = evaluate_model(&model, &ds, &cache, &opts)?;
            let body = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::Format(format!("report encode: {e}")))?;
            println!("{body}");
            Ok(())
        }
        Command::Infer {
            checkpoint,
            data,
            seq,
            frame,
            threshold,
        } => {
            let (model, cfg) = load_model(&checkpoint)?;
            let ds = Dataset::load(&data)?;
            let cache = FrameCache::load(&ds)?;
            let (target, ctx) = frame_with_context(&cache, &cfg, seq, frame)?;
            let tape = ptseformer::tensor::Tape::new();
            let out = model.forward(&tape, &target, &ctx)?;
            for d in detections_from(&out.detections, frame, threshold) {
                let line = serde_json::json!({
                    "frame_id": d.image_id,
                    "class_id": d.class,
                    "score": d.score,
                    "box": [d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h],
                });
                println!("{line}");
            }
            Ok(())
        }
        Command::Featmap {
            checkpoint,
            data,
            seq,
            frame,
            out,
        } => {
            let (model, cfg) = load_model(&checkpoint)?;
            let ds = Dataset::load(&data)?;
            let cache = FrameCache::load(&ds)?;
            let (target, ctx) = frame_with_context(&cache, &cfg, seq, frame)?;
            let tape = ptseformer::tensor::Tape::new();
            let result = model.forward(&tape, &target, &ctx)?;
            let st = &result.stages;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let mut maps: Vec<(String, &ptseformer::tensor::Tensor)> = vec![
                ("m_t".into(), &st.m_t),
                ("h_t".into(), &st.h_t),
                ("r_t".into(), &st.r_t),
            ];
            if let Some(e_t) = &st.e_t {
                maps.push(("e_t".into(), e_t));
            }
            for (i, f) in st.f.iter().enumerate() {
                maps.push((format!("f_{i}"), f));
            }
            for (name, tokens) in maps {
                let hm = token_heatmap(tokens, st.grid_h, st.grid_w)?;
                let path = out.join(format!("{name}.pgm"));
                write_pgm(&path, st.grid_w, st.grid_h, &hm)?;
                eprintln!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Gradcheck { seed } => {
            let report = gradcheck::run_all(seed)?;
            print!("{}", gradcheck::report_text(&report));
            let detected = gradcheck::self_test(seed)?;
            println!(
                "corrupted-backward self-test: {}",
                if detected { "detected" } else { "MISSED" }
            );
            if !report.all_passed || !detected {
                return Err(Error::Numeric("gradient check failed".into()));
            }
            Ok(())
        }
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Contract(_) | Error::Dim { .. } => 1,
        Error::Io { .. } | Error::Format(_) => 2,
        Error::Numeric(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
