use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use ovtal::evaluation::{evaluate, make_splits, EvalConfig, EvalReport, GridStyle, SplitSpec};
use ovtal::io::{read_annotations, read_json, write_json, PredictionFile};
use ovtal::model::Model;
use ovtal::pipeline::{infer_all, load_subset, train, ExperimentConfig, InferenceConfig};
use ovtal::synthdata::{generate_dataset, SynthConfig};
use ovtal::{Error, Result};

#[derive(Parser)]
#[command(name = "ovtal", version, about = "Open-vocabulary temporal action localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus directory.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write base/novel category splits.
    Splits {
        /// Any JSON file with a top-level "categories" array.
        #[arg(long)]
        categories: PathBuf,
        #[arg(long, default_value_t = 0.75)]
        fraction: f64,
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
        /// First split seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on the base-only videos of the training subset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        split: SplitArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run inference on one subset and write predictions.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        split: SplitArg,
        #[arg(long, default_value = "test")]
        subset: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        print_config: bool,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[command(flatten)]
        split: SplitArg,
        #[arg(long, default_value = "thumos")]
        style: GridStyle,
        #[arg(long)]
        out: PathBuf,
        /// Append a (split_seed, map_base, map_novel, map_all) row to this CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Echo the effective config to stdout.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct SplitArg {
    /// JSON array of splits as written by `splits`.
    #[arg(long = "split")]
    file: PathBuf,
    #[arg(long, default_value_t = 0)]
    split_index: usize,
}

impl SplitArg {
    fn load(&self) -> Result<SplitSpec> {
        let splits: Vec<SplitSpec> = read_json(&self.file)?;
        let n = splits.len();
        splits
            .into_iter()
            .nth(self.split_index)
            .ok_or_else(|| Error::Config(format!("split index {} of {n}", self.split_index)))
    }
}

fn config_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

fn echo<T: Serialize>(enabled: bool, value: &T) -> Result<()> {
    if enabled {
        println!("{}", serde_json::to_string_pretty(value).map_err(|e| Error::json("<config>", e))?);
    }
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen { config, out, common } => {
            let mut cfg: SynthConfig = config_or_default(config.as_deref())?;
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            echo(common.print_config, &cfg)?;
            generate_dataset(&cfg)?.write(&out)
        }
        Command::Splits { categories, fraction, seeds, out, seed } => {
            let doc: serde_json::Value = read_json(&categories)?;
            let n = doc
                .get("categories")
                .and_then(serde_json::Value::as_array)
                .map(Vec::len)
                .ok_or_else(|| Error::Format { path: categories.clone(), reason: "no \"categories\" array".into() })?;
            let splits: Vec<SplitSpec> =
                make_splits(n, fraction, seeds + seed as usize)?.into_iter().skip(seed as usize).collect();
            write_json(&out, &splits)
        }
        Command::Train { data, split, config, out, common } => {
            let mut exp: ExperimentConfig = config_or_default(config.as_deref())?;
            if let Some(seed) = common.seed {
                exp.train.seed = seed;
            }
            echo(common.print_config, &exp)?;
            let split = split.load()?;
            let (vocab, samples, bank) = load_subset(&data, "train")?;
            split.validate(vocab.len())?;
            let (model, history) = train(&exp, &samples, &bank, &split)?;
            for (epoch, b) in history.iter().enumerate() {
                eprintln!(
                    "epoch {:>3}  total {:.4}  loc {:.4}  cls {:.4}  aps {:.4}  contrast {:.4}",
                    epoch + 1,
                    b.total,
                    b.l_loc,
                    b.l_cc,
                    b.l_app,
                    b.l_contrast
                );
            }
            model.save(&out)
        }
        Command::Infer { data, ckpt, split, subset, config, out, print_config } => {
            let cfg: InferenceConfig = config_or_default(config.as_deref())?;
            echo(print_config, &cfg)?;
            let split = split.load()?;
            let model = Model::load(&ckpt)?;
            let (vocab, samples, bank) = load_subset(&data, &subset)?;
            split.validate(vocab.len())?;
            if model.config.n_base != split.base_ids.len() {
                return Err(Error::Config(format!(
                    "checkpoint has {} base classes, split has {}",
                    model.config.n_base,
                    split.base_ids.len()
                )));
            }
            let dets = infer_all(&model, &samples, &bank, &split, &cfg)?;
            write_json(&out, &PredictionFile::from_detections(&vocab, &dets))
        }
        Command::Eval { preds, gt, split, style, out, csv } => {
            let split = split.load()?;
            let (vocab, annotations) = read_annotations(&gt)?;
            let dets = read_json::<PredictionFile>(&preds)?.into_detections(&vocab)?;
            let report = evaluate(&dets, &annotations, &vocab, &split, &EvalConfig::style(style))?;
            write_json(&out, &report)?;
            if let Some(path) = csv {
                append_csv(&path, split.seed, &report)?;
            }
            println!("map_base {:.4}  map_novel {:.4}  map_all {:.4}", report.map_base, report.map_novel, report.map_all);
            Ok(())
        }
    }
}

fn append_csv(path: &Path, seed: u64, report: &EvalReport) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str("split_seed,map_base,map_novel,map_all\n");
    }
    text.push_str(&format!("{seed},{},{},{}\n", report.map_base, report.map_novel, report.map_all));
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
