mod commands;
mod config;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use chromoseg::losses::LossKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::commands::{EvaluateArgs, Subset};
use crate::config::{LayoutKind, RunConfig};

/// Segmentation of overlapping chromosome images.
#[derive(Parser)]
#[command(name = "chromoseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a dataset to the canonical container and write the split manifest.
    Prepare(DataArgs),
    /// Train a model; artifacts go to --out.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Segment grayscale PNG images into label maps and colour renderings.
    Segment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Score a checkpoint on a split subset.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Subset::Overlap)]
        subset: Subset,
        /// Row label in the CSV report (defaults to the checkpoint directory name).
        #[arg(long)]
        method: Option<String>,
    },
    /// Difference image between a predicted and a ground-truth label PNG.
    Diff {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Combine metrics.json files into one CSV table.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Run configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    layout: Option<LayoutKind>,
    /// Internal array path for the published layout.
    #[arg(long)]
    array: Option<String>,
    /// Split manifest from `prepare`.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long = "lambda")]
    lambda: Option<f64>,
    #[arg(long, value_enum)]
    gan: Option<Switch>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from the last checkpoint in --out.
    #[arg(long)]
    resume: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Lovasz,
    Ce,
    WeightedCe,
    Dice,
    WeightedDice,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Lovasz => LossKind::Lovasz,
            LossArg::Ce => LossKind::Ce,
            LossArg::WeightedCe => LossKind::WeightedCe,
            LossArg::Dice => LossKind::Dice,
            LossArg::WeightedDice => LossKind::WeightedDice,
        }
    }
}

impl DataArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.dataset {
            cfg.dataset = Some(d.clone());
        }
        if let Some(l) = self.layout {
            cfg.layout = l;
        }
        if let Some(a) = &self.array {
            cfg.array = Some(a.clone());
        }
        if let Some(s) = &self.split {
            cfg.split = Some(s.clone());
        }
        if let Some(s) = self.split_seed {
            cfg.split_seed = s;
        }
        if let Some(r) = self.ratio {
            cfg.split_ratio = r;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        Ok(cfg)
    }
}

impl TrainArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        if let Some(b) = self.batch {
            t.batch_size = b;
        }
        if let Some(l) = self.loss {
            t.loss.kind = l.into();
        }
        if let Some(l) = self.lambda {
            t.loss.lambda = l;
        }
        if let Some(g) = self.gan {
            t.gan_enabled = g == Switch::On;
        }
        if let Some(e) = self.max_epochs {
            t.max_epochs = e;
        }
        if let Some(p) = self.patience {
            t.patience = p;
        }
        if let Some(s) = self.seed {
            t.seed = s;
        }
        t.resume |= self.resume;
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(data) => {
            let m = commands::prepare(&data.resolve()?)?;
            println!(
                "samples {} train {} test {} overlap-test {}",
                m.counts.total, m.counts.train, m.counts.test, m.counts.overlap_test
            );
        }
        Command::Train { data, train } => {
            let mut cfg = data.resolve()?;
            train.apply(&mut cfg);
            commands::train(&cfg)?;
        }
        Command::Segment { checkpoint, out, images } => {
            for (labels, color) in commands::segment(&checkpoint, &images, &out)? {
                println!("{} {}", labels.display(), color.display());
            }
        }
        Command::Evaluate {
            data,
            checkpoint,
            subset,
            method,
        } => {
            let cfg = data.resolve()?;
            let args = EvaluateArgs {
                checkpoint: &checkpoint,
                subset,
                method,
            };
            let report = commands::evaluate_cmd(&cfg, &args)?;
            let header = chromoseg::metrics::Aggregate::HEADER;
            println!("{:<12}{}", "", header.map(|h| format!("{h:>10}")).concat());
            for (name, agg) in [("all", &report.all_classes), ("foreground", &report.foreground)] {
                let row = agg.table_row().map(|v| format!("{v:>10.2}")).concat();
                println!("{name:<12}{row}");
            }
        }
        Command::Diff { pred, gt, out } => {
            let meta = commands::diff(&pred, &gt, &out)?;
            println!("{} mismatching pixels", meta.mismatches);
        }
        Command::Report { out, inputs } => {
            let n = commands::report(&inputs, &out)?;
            println!("{n} reports written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
