mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use teds_core::data::{generate_dataset, load_annotations, load_dataset, load_features, save_dataset, FEATURES_DIR};
use teds_core::eval::{
    evaluate, render_ap_curve, render_confusion, render_report, truths_from_annotations, ReportFormat,
};
use teds_core::network::DetectionNetwork;
use teds_core::pipeline::{detect_all, load_predictions, save_predictions};
use teds_core::train::{ablate, eval_config, loso, train, AblationVariant, LossCurve, RunManifest, TrainConfig};

#[derive(Parser)]
#[command(
    name = "teds",
    version,
    about = "Temporal expression detection on long feature sequences"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration ([train], [network], [data], [detect], [eval]).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration field, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for data generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (annotations.tsv + features/).
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one network on a corpus.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Directory for checkpoint.json, manifest.json and losses.tsv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a checkpoint over feature files and write a prediction file.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A corpus directory or a directory of .feat files.
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a prediction file against annotations.
    Score {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Leave-one-subject-out training and pooled evaluation.
    Loso {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Leave-one-subject-out runs for a list of variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated variants (default: all nine).
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Draw loss curves and AP-vs-IoU curves as SVG.
    Plot {
        /// A manifest written by `train` or `loso`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, requires = "annotations")]
        predictions: Option<PathBuf>,
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Tsv,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Table => ReportFormat::Table,
            Format::Tsv => ReportFormat::Tsv,
        }
    }
}

fn load_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn losses_tsv(curve: &LossCurve) -> String {
    let mut out = String::from("step\tloss\n");
    for (i, l) in curve.step_losses.iter().enumerate() {
        out.push_str(&format!("{}\t{l}\n", i + 1));
    }
    out
}

fn feature_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let nested = dir.join(FEATURES_DIR);
    let dir = if nested.is_dir() { nested } else { dir.to_path_buf() };
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .with_context(|| format!("cannot read {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "feat"));
    files.sort();
    if files.is_empty() {
        bail!("no .feat files in {}", dir.display());
    }
    Ok(files)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::GenData { out } => {
            let ds = generate_dataset(&cfg.data)?;
            save_dataset(&out, &ds)?;
            let events: usize = ds.annotations.iter().map(|a| a.events.len()).sum();
            println!(
                "wrote {} videos with {events} events to {}",
                ds.annotations.len(),
                out.display()
            );
        }
        Command::Train { data, out } => {
            let ds = load_dataset(&data)?;
            let outcome = train(&ds, &cfg)?;
            fs::create_dir_all(&out)?;
            outcome.network.save(&out.join("checkpoint.json"))?;
            let curve = LossCurve::from(&outcome);
            write(&out.join("losses.tsv"), losses_tsv(&curve))?;
            let manifest = RunManifest {
                seed: cfg.train.seed,
                config: cfg,
                curve: Some(curve),
                folds: Vec::new(),
                aggregate: None,
                wall_clock_seconds: outcome.wall_clock_seconds,
            };
            write(&out.join("manifest.json"), manifest.to_json()?)?;
            eprintln!(
                "trained {} steps in {:.1}s, final epoch loss {:.4}",
                outcome.step_losses.len(),
                outcome.wall_clock_seconds,
                outcome.epoch_losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Detect {
            checkpoint,
            features,
            out,
        } => {
            let net = DetectionNetwork::load(&checkpoint)?;
            let videos = feature_files(&features)?
                .iter()
                .map(|p| load_features(p))
                .collect::<teds_core::Result<Vec<_>>>()?;
            let preds = detect_all(&videos, &net, &cfg.detect)?;
            save_predictions(&out, &preds)?;
            let n: usize = preds.values().map(Vec::len).sum();
            eprintln!("{n} detections in {} videos", videos.len());
        }
        Command::Score {
            predictions,
            annotations,
            format,
            out,
        } => {
            let preds = load_predictions(&predictions)?;
            let truths = truths_from_annotations(&load_annotations(&annotations)?);
            let report = evaluate(&preds, &truths, &eval_config(&cfg));
            let text = render_report(&[("score".into(), report.clone())], format.into());
            print!("{text}");
            if report.counts.vacuous {
                eprintln!("note: no predictions and no ground truth; F1 reported as 100");
            }
            if let Some(path) = out {
                write(&path, &text)?;
            }
        }
        Command::Loso { data, out } => {
            let ds = load_dataset(&data)?;
            let result = loso(&ds, &cfg)?;
            fs::create_dir_all(&out)?;
            save_predictions(&out.join("predictions.tsv"), &result.predictions)?;
            let mut rows: Vec<(String, _)> = result
                .folds
                .iter()
                .map(|f| (f.held_out_subject.clone(), f.report.clone()))
                .collect();
            rows.push(("pooled".into(), result.aggregate.clone()));
            let table = render_report(&rows, ReportFormat::Table);
            write(&out.join("report.txt"), &table)?;
            write(&out.join("ap_iou.tsv"), render_ap_curve(&result.aggregate))?;
            if !result.aggregate.confusion.is_empty() {
                write(
                    &out.join("confusion.tsv"),
                    render_confusion(&result.aggregate.confusion),
                )?;
            }
            let manifest = RunManifest {
                seed: cfg.train.seed,
                config: cfg,
                curve: None,
                folds: result.folds,
                aggregate: Some(result.aggregate),
                wall_clock_seconds: result.wall_clock_seconds,
            };
            write(&out.join("manifest.json"), manifest.to_json()?)?;
            print!("{table}");
            eprintln!("finished in {:.1}s", manifest.wall_clock_seconds);
        }
        Command::Ablate { data, out, variants } => {
            let variants: Vec<AblationVariant> = if variants.is_empty() {
                AblationVariant::ALL.to_vec()
            } else {
                variants.iter().map(|v| v.parse()).collect::<teds_core::Result<_>>()?
            };
            let ds = load_dataset(&data)?;
            let rows = ablate(&ds, &cfg, &variants)?;
            fs::create_dir_all(&out)?;
            let table_rows: Vec<(String, _)> = rows
                .iter()
                .map(|r| (r.variant.to_string(), r.result.aggregate.clone()))
                .collect();
            let table = render_report(&table_rows, ReportFormat::Table);
            write(&out.join("ablation.txt"), &table)?;
            write(&out.join("ablation.tsv"), render_report(&table_rows, ReportFormat::Tsv))?;
            print!("{table}");
        }
        Command::Plot {
            manifest,
            predictions,
            annotations,
            out,
        } => {
            if manifest.is_none() && predictions.is_none() {
                bail!("plot needs --manifest or --predictions with --annotations");
            }
            fs::create_dir_all(&out)?;
            let mut written = Vec::new();
            if let Some(path) = manifest {
                let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
                let m = RunManifest::from_json(&text)?;
                let mut curves: Vec<(String, Vec<f64>)> = Vec::new();
                if let Some(c) = &m.curve {
                    curves.push(("train".into(), c.epoch_losses.clone()));
                }
                for f in &m.folds {
                    curves.push((f.held_out_subject.clone(), f.curve.epoch_losses.clone()));
                }
                if !curves.is_empty() {
                    let p = out.join("loss.svg");
                    plot::loss_curves(&p, &curves)?;
                    written.push(p);
                }
                if let Some(r) = &m.aggregate {
                    let p = out.join("ap_iou.svg");
                    plot::ap_vs_iou(&p, r)?;
                    written.push(p);
                }
            }
            if let (Some(p), Some(a)) = (predictions, annotations) {
                let preds = load_predictions(&p)?;
                let truths = truths_from_annotations(&load_annotations(&a)?);
                let report = evaluate(&preds, &truths, &eval_config(&cfg));
                let path = out.join("ap_iou.svg");
                plot::ap_vs_iou(&path, &report)?;
                written.push(path);
            }
            for p in written {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.to_string();
            eprintln!("{}", rendered.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", msg.join(": "));
            ExitCode::FAILURE
        }
    }
}
