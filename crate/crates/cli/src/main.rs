use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use slv_core::eval::ApMethod;
use slv_core::pipeline::dataset::{save_detections, FileHeader, DETECTION_FORMAT};
use slv_core::pipeline::{
    compare_schemes, detect_dataset, evaluate_file, format_scheme_report, format_trace, generate_synthetic,
    load_dataset, load_model, run_vote, save_dataset, save_model, train_toy, PipelineConfig, ScoreSource, ToyScorer,
};
use slv_core::{Error, Result};

#[derive(Parser)]
#[command(name = "slv", version, about = "Spatial likelihood voting for weakly supervised detection")]
struct Cli {
    /// Seed for the generator and weight initialization.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// TOML file with optional [synthetic], [train], [vote] and [eval] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with ground truth, features and scores.
    Generate,
    /// Train the toy scorer; writes the model, loss trace and detections.
    Train {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Vote pseudo ground truth for every image.
    Vote {
        #[arg(long)]
        dataset: PathBuf,
        /// Score with a trained model instead of the in-file scores.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        emit_heatmaps: bool,
    },
    /// Mean IoU of three labeling schemes against ground truth.
    CompareSchemes {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// AP and CorLoc of a detections file.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        /// Overrides the configured interpolation.
        #[arg(long, value_enum)]
        ap: Option<ApArg>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ApArg {
    AllPoints,
    ElevenPoint,
}

impl From<ApArg> for ApMethod {
    fn from(a: ApArg) -> Self {
        match a {
            ApArg::AllPoints => ApMethod::AllPoints,
            ApArg::ElevenPoint => ApMethod::ElevenPoint,
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    fs::create_dir_all(&cli.out).map_err(|e| Error::Io {
        path: cli.out.clone(),
        source: e,
    })?;
    let out = |name: &str| cli.out.join(name);

    match cli.command {
        Command::Generate => {
            let d = generate_synthetic(&config.synthetic, cli.seed)?;
            save_dataset(&out("dataset.jsonl"), &d)?;
            log::info!("wrote {} images", d.len());
        }
        Command::Train { dataset } => {
            let d = load_dataset(&dataset)?;
            let (model, trace) = train_toy(&d, &config.train, &config.vote, cli.seed)?;
            if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
                log::info!("total loss {:.6} -> {:.6}", first.total, last.total);
            }
            save_model(&out("model.json"), &model)?;
            write_text(&out("loss_trace.tsv"), &format_trace(&trace))?;
            let dets = detect_dataset(&model, &d, &config.train)?;
            let header = FileHeader::new(DETECTION_FORMAT, d.num_classes(), d.header.class_names.clone());
            save_detections(&out("detections.jsonl"), &header, &dets)?;
        }
        Command::Vote {
            dataset,
            model,
            emit_heatmaps,
        } => {
            let d = load_dataset(&dataset)?;
            let model = model.as_deref().map(load_model).transpose()?;
            let s = run_vote(&d, &source(model.as_ref()), &config.vote, &cli.out, emit_heatmaps)?;
            log::info!(
                "{} images, {} boxes, {} failed, {} heatmaps",
                s.images,
                s.boxes,
                s.failed,
                s.heatmaps
            );
        }
        Command::CompareSchemes { dataset, model } => {
            let d = load_dataset(&dataset)?;
            let model = model.as_deref().map(load_model).transpose()?;
            let report = compare_schemes(&d, &source(model.as_ref()), &config.vote, config.train.cluster_iou)?;
            let text = format_scheme_report(&report, |c| d.class_name(c));
            write_text(&out("schemes.tsv"), &text)?;
            print!("{text}");
        }
        Command::Evaluate { dataset, detections, ap } => {
            let d = load_dataset(&dataset)?;
            let method = ap.map_or(config.eval.ap_method, ApMethod::from);
            let (_, text) = evaluate_file(&detections, &d, method)?;
            write_text(&out("metrics.tsv"), &text)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn source(model: Option<&ToyScorer>) -> ScoreSource<'_> {
    model.map_or(ScoreSource::InFile, ScoreSource::Model)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
