//! `trailerfuse` command-line front end.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde_json::json;

use trailerfuse::data::manifest::{Dataset, MANIFEST_FILE};
use trailerfuse::data::npy::import_npy;
use trailerfuse::data::split::{filter_and_split, DurationFilter, FilterOutcome, Split, SplitAssignment};
use trailerfuse::data::synth::{synth_mean_encoded_with, synth_order_encoded_with, MeanEncodedConfig, OrderEncodedConfig};
use trailerfuse::experiments::{
    ablation_csv, ablation_rows, run_ablation, run_frames_sweep, sweep_csv, Splits, SWEEP_FRAMES,
};
use trailerfuse::model::checkpoint::load_checkpoint;
use trailerfuse::train::config::TrainConfig;
use trailerfuse::train::eval::evaluate;
use trailerfuse::train::trainer::Trainer;
use trailerfuse::{Architecture, ErrorKind, GENRES};

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "trailerfuse", version, about = "Multimodal movie-trailer genre classification")]
struct Cli {
    /// Master seed; overrides the seed of any config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert per-modality NPY arrays into an MMF dataset.
    Import {
        /// Directory holding `<modality>/<id>.npy`.
        #[arg(long)]
        npy_dir: PathBuf,
        /// Manifest listing ids, durations and genres.
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Write a synthetic dataset with known structure.
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        #[arg(long, default_value_t = 1024)]
        n: usize,
        /// Frame noise of the mean-encoded set.
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        /// Longest sequence per modality of the mean-encoded set.
        #[arg(long, default_value_t = 16)]
        max_len: usize,
    },
    /// Train on the train split, validating on the val split.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        overrides: TrainOverrides,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Decision threshold; defaults to the checkpoint's.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Write per-video probabilities and predicted genres.
    Predict {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Train and test the seven feature-set configurations.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        overrides: TrainOverrides,
        /// Only these row indices (0-6).
        #[arg(long, value_delimiter = ',')]
        rows: Option<Vec<usize>>,
    },
    /// Train clip-only models on subsampled frames.
    FramesSweep {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        overrides: TrainOverrides,
        #[arg(long, value_delimiter = ',')]
        frames: Option<Vec<usize>>,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset manifest (or the directory containing it).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 19.6)]
    min_duration: f64,
    #[arg(long, default_value_t = 214.4)]
    max_duration: f64,
}

#[derive(Args, Debug)]
struct TrainOverrides {
    /// Preset used when no config file is given.
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SynthKind {
    Mean,
    Order,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Mlp,
    SingleTransformer,
    MultiTransformer,
}

impl From<PresetArg> for Architecture {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Mlp => Architecture::Mlp,
            PresetArg::SingleTransformer => Architecture::SingleTransformer,
            PresetArg::MultiTransformer => Architecture::MultiTransformer,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Val => Some(Split::Val),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // core errors already embed their source in the message
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.ends_with(&cause) {
                    msg = if msg.is_empty() { cause } else { format!("{msg}: {cause}") };
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let Some(core) = e.chain().find_map(|c| c.downcast_ref::<trailerfuse::Error>()) else {
        return EXIT_OTHER;
    };
    match core.kind() {
        ErrorKind::Config => EXIT_CONFIG,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Numeric => EXIT_NUMERIC,
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    match &cli.command {
        Command::Import { npy_dir, manifest } => cmd_import(cli, npy_dir, manifest),
        Command::Synth {
            kind,
            n,
            noise,
            max_len,
        } => cmd_synth(cli, *kind, *n, *noise, *max_len),
        Command::Train {
            data,
            overrides,
            resume,
        } => cmd_train(cli, data, overrides, resume.as_deref()),
        Command::Eval {
            data,
            checkpoint,
            split,
            threshold,
        } => cmd_eval(cli, data, checkpoint, *split, *threshold),
        Command::Predict {
            data,
            checkpoint,
            split,
            threshold,
        } => cmd_predict(cli, data, checkpoint, *split, *threshold),
        Command::Ablate { data, overrides, rows } => cmd_ablate(cli, data, overrides, rows.as_deref()),
        Command::FramesSweep {
            data,
            overrides,
            frames,
        } => cmd_frames_sweep(cli, data, overrides, frames.as_deref()),
    }
}

/// Records the command line, seed and resolved settings of a run.
fn write_run_manifest(cli: &Cli, seed: Option<u64>, details: serde_json::Value) -> Result<()> {
    let doc = json!({
        "tool": "trailerfuse",
        "version": env!("CARGO_PKG_VERSION"),
        "command": std::env::args().collect::<Vec<_>>(),
        "seed": seed,
        "threads": rayon::current_num_threads(),
        "details": details,
    });
    write_file(&cli.out.join("run_manifest.json"), &serde_json::to_string_pretty(&doc)?)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn resolve_config(cli: &Cli, o: &TrainOverrides, default: Architecture) -> Result<TrainConfig> {
    let mut cfg = match (&cli.config, o.preset) {
        (Some(path), _) => TrainConfig::load(path)?,
        (None, Some(p)) => TrainConfig::preset(p.into()),
        (None, None) => TrainConfig::preset(default),
    };
    if let Some(v) = o.epochs {
        cfg.epochs = v;
    }
    if o.max_steps.is_some() {
        cfg.max_steps = o.max_steps;
    }
    if let Some(v) = o.lr {
        cfg.optimizer.lr = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Loaded {
    dataset: Dataset,
    filter: FilterOutcome,
    split: SplitAssignment,
}

impl Loaded {
    fn part(&self, split: Option<Split>) -> Dataset {
        match split {
            Some(s) => self.dataset.subset_by_ids(self.split.ids(s).iter().map(String::as_str)),
            None => self.dataset.subset(&self.filter.kept),
        }
    }

    fn summary(&self) -> serde_json::Value {
        let (train, val, test) = self.split.sizes();
        json!({
            "samples": self.dataset.len(),
            "too_short": self.filter.too_short,
            "too_long": self.filter.too_long,
            "missing_duration": self.filter.missing_duration,
            "train": train,
            "val": val,
            "test": test,
        })
    }
}

fn load_data(args: &DataArgs) -> Result<Loaded> {
    let path = if args.data.is_dir() {
        args.data.join(MANIFEST_FILE)
    } else {
        args.data.clone()
    };
    let dataset = Dataset::open(&path)?;
    let filter = DurationFilter {
        min_s: args.min_duration,
        max_s: args.max_duration,
    };
    let (outcome, split) = filter_and_split(dataset.meta(), &filter)?;
    let (train, val, test) = split.sizes();
    info!(
        "{}: {} samples, dropped {} short / {} long / {} without duration; split {train}/{val}/{test}",
        path.display(),
        dataset.len(),
        outcome.too_short,
        outcome.too_long,
        outcome.missing_duration
    );
    Ok(Loaded {
        dataset,
        filter: outcome,
        split,
    })
}

fn cmd_import(cli: &Cli, npy_dir: &Path, manifest: &Path) -> Result<()> {
    let summary = import_npy(npy_dir, manifest, &cli.out)?;
    println!(
        "imported {} videos ({} failed) with modalities {}",
        summary.imported,
        summary.failures.len(),
        summary.modalities.iter().map(|m| m.name()).collect::<Vec<_>>().join(", ")
    );
    if !summary.failures.is_empty() {
        warn!("{} videos skipped; see run_manifest.json", summary.failures.len());
    }
    if summary.unknown_genre_labels > 0 {
        warn!("{} genre labels outside the vocabulary were ignored", summary.unknown_genre_labels);
    }
    let failures: Vec<_> = summary
        .failures
        .iter()
        .map(|(id, reason)| json!({"id": id, "reason": reason}))
        .collect();
    write_run_manifest(
        cli,
        None,
        json!({
            "npy_dir": npy_dir,
            "source_manifest": manifest,
            "imported": summary.imported,
            "failures": failures,
            "unknown_genre_labels": summary.unknown_genre_labels,
            "manifest": summary.manifest,
        }),
    )
}

fn cmd_synth(cli: &Cli, kind: SynthKind, n: usize, noise: f64, max_len: usize) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let (records, details) = match kind {
        SynthKind::Mean => {
            if max_len == 0 {
                bail!(trailerfuse::Error::Config("--max-len must be positive".into()));
            }
            let mut cfg = MeanEncodedConfig::new(n, seed, noise);
            for m in &mut cfg.modalities {
                m.train_max_len = m.train_max_len.min(max_len);
            }
            let details = json!({"kind": "mean", "n": n, "noise_std": noise, "max_len": max_len});
            (synth_mean_encoded_with(&cfg).records, details)
        }
        SynthKind::Order => {
            let cfg = OrderEncodedConfig::new(n, seed);
            let details = json!({
                "kind": "order",
                "n": n,
                "min_len": cfg.min_len,
                "max_len": cfg.max_len,
                "block_len": cfg.block_len,
            });
            (synth_order_encoded_with(&cfg).records, details)
        }
    };
    let path = Dataset::from_records(records).write(&cli.out)?;
    println!("wrote {n} synthetic videos to {}", path.display());
    write_run_manifest(cli, Some(seed), details)
}

fn cmd_train(cli: &Cli, args: &DataArgs, o: &TrainOverrides, resume: Option<&Path>) -> Result<()> {
    let mut cfg = resolve_config(cli, o, Architecture::MultiTransformer)?;
    if cfg.checkpoint_dir.is_none() {
        cfg.checkpoint_dir = Some(cli.out.join("checkpoints"));
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let data = load_data(args)?;
    write_run_manifest(
        cli,
        Some(cfg.seed),
        json!({"data": args.data, "split": data.summary(), "config": cfg, "resume": resume}),
    )?;
    let train = data.part(Some(Split::Train));
    let val = data.part(Some(Split::Val));
    let val = (!val.is_empty()).then_some(val);
    let mut trainer = match resume {
        Some(ck) => Trainer::resume(cfg.clone(), ck, &train, val.as_ref())?,
        None => Trainer::new(cfg.clone(), &train, val.as_ref())?,
    };
    info!(
        "training {} ({} parameters) for {} steps",
        cfg.model.architecture.name(),
        trainer.model().parameter_count(),
        trainer.step_budget()
    );
    let outcome = trainer.run()?;
    write_file(&cli.out.join("history.csv"), &outcome.history.to_csv())?;
    if let Some(report) = &outcome.final_val {
        write_file(&cli.out.join("val_metrics.csv"), &report.to_csv())?;
        println!("{}", report.to_text());
    }
    if let Some(best) = &outcome.history.best {
        println!("best validation mAP {:.4} at step {}", best.val_map, best.step);
    }
    Ok(())
}

fn cmd_eval(cli: &Cli, args: &DataArgs, checkpoint: &Path, split: SplitArg, threshold: Option<f64>) -> Result<()> {
    let model = load_checkpoint(checkpoint)?.model;
    let threshold = threshold.unwrap_or(model.config().threshold);
    let data = load_data(args)?;
    write_run_manifest(
        cli,
        None,
        json!({
            "data": args.data,
            "checkpoint": checkpoint,
            "split": format!("{split:?}").to_lowercase(),
            "threshold": threshold,
            "samples": data.summary(),
        }),
    )?;
    let part = data.part(split.split());
    let eval = evaluate(&model, &part, threshold)?;
    write_file(&cli.out.join("metrics.csv"), &eval.report.to_csv())?;
    let text = eval.report.to_text();
    write_file(&cli.out.join("metrics.txt"), &text)?;
    println!("{text}");
    Ok(())
}

fn cmd_predict(
    cli: &Cli,
    args: &DataArgs,
    checkpoint: &Path,
    split: SplitArg,
    threshold: Option<f64>,
) -> Result<()> {
    let model = load_checkpoint(checkpoint)?.model;
    let threshold = threshold.unwrap_or(model.config().threshold);
    let data = load_data(args)?;
    let part = data.part(split.split());
    let eval = evaluate(&model, &part, threshold)?;
    let mut out = String::from("id,");
    out.push_str(&GENRES.join(","));
    out.push_str(",predicted\n");
    for (id, scores) in eval.ids.iter().zip(&eval.scores) {
        let _ = write!(out, "{id}");
        for p in scores {
            let _ = write!(out, ",{p:.6}");
        }
        let called: Vec<&str> = GENRES
            .iter()
            .zip(scores)
            .filter(|(_, &p)| p >= threshold)
            .map(|(g, _)| *g)
            .collect();
        let _ = writeln!(out, ",{}", called.join(";"));
    }
    write_file(&cli.out.join("predictions.csv"), &out)?;
    println!("wrote {} predictions", eval.ids.len());
    write_run_manifest(
        cli,
        None,
        json!({
            "data": args.data,
            "checkpoint": checkpoint,
            "split": format!("{split:?}").to_lowercase(),
            "threshold": threshold,
        }),
    )
}

fn cmd_ablate(cli: &Cli, args: &DataArgs, o: &TrainOverrides, rows: Option<&[usize]>) -> Result<()> {
    let base = resolve_config(cli, o, Architecture::MultiTransformer)?;
    if let Some(bad) = rows.and_then(|r| r.iter().find(|&&i| i >= ablation_rows().len())) {
        bail!(trailerfuse::Error::Config(format!("ablation row {bad} does not exist (0-6)")));
    }
    let data = load_data(args)?;
    write_run_manifest(
        cli,
        Some(base.seed),
        json!({"data": args.data, "split": data.summary(), "base_config": base, "rows": rows}),
    )?;
    let (train, val, test) = (
        data.part(Some(Split::Train)),
        data.part(Some(Split::Val)),
        data.part(Some(Split::Test)),
    );
    let splits = Splits {
        train: &train,
        val: (!val.is_empty()).then_some(&val),
        test: &test,
    };
    let results = run_ablation(&base, splits, base.seed, rows)?;
    let csv = ablation_csv(&results);
    write_file(&cli.out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_frames_sweep(cli: &Cli, args: &DataArgs, o: &TrainOverrides, frames: Option<&[usize]>) -> Result<()> {
    let transformer = resolve_config(cli, o, Architecture::SingleTransformer)?;
    if !transformer.model.architecture.is_transformer() {
        bail!(trailerfuse::Error::Config("frames-sweep needs a transformer configuration".into()));
    }
    // the MLP shares every training setting of the transformer run
    let mut mlp = TrainConfig::preset(Architecture::Mlp);
    mlp.optimizer = transformer.optimizer;
    mlp.batch_size = transformer.batch_size;
    mlp.clip_norm = transformer.clip_norm;
    mlp.epochs = transformer.epochs;
    mlp.max_steps = transformer.max_steps;
    mlp.eval_interval = transformer.eval_interval;
    mlp.model.pos_weight = transformer.model.pos_weight;
    mlp.model.threshold = transformer.model.threshold;
    mlp.model.modalities = transformer.model.modalities.clone();
    let frames = frames.unwrap_or(&SWEEP_FRAMES);
    let data = load_data(args)?;
    write_run_manifest(
        cli,
        Some(transformer.seed),
        json!({
            "data": args.data,
            "split": data.summary(),
            "frames": frames,
            "transformer_config": transformer,
            "mlp_config": mlp,
        }),
    )?;
    let (train, val, test) = (
        data.part(Some(Split::Train)),
        data.part(Some(Split::Val)),
        data.part(Some(Split::Test)),
    );
    let splits = Splits {
        train: &train,
        val: (!val.is_empty()).then_some(&val),
        test: &test,
    };
    let results = run_frames_sweep(&mlp, &transformer, splits, frames, transformer.seed)?;
    let csv = sweep_csv(&results);
    write_file(&cli.out.join("frames_sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}
