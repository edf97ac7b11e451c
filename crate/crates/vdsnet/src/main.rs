use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use vdsnet::checkpoint::Checkpoint;
use vdsnet::config::TrainConfig;
use vdsnet::core::data::{class_stats, Gender, ViewPosition};
use vdsnet::metadata::{parse_metadata_csv, HeaderMap};
use vdsnet::predict::{format_confidence, predict_image};
use vdsnet::report::write_compare_csv;
use vdsnet::trainer::{compare, evaluate_checkpoint, run_training, single_threaded, SplitName};

#[derive(Parser)]
#[command(name = "vdsnet", version, about = "Chest X-ray disease screening models")]
struct Cli {
    /// Overrides the seed in every config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded reference path with bit-exact results.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Metrics of a checkpoint on its recorded split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        split: SplitArg,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Disease confidence for one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        age: f64,
        #[arg(long, value_enum)]
        gender: GenderArg,
        #[arg(long, value_enum)]
        view: ViewArg,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Label, gender and view counts of a metadata CSV.
    Stats {
        #[arg(long)]
        csv: PathBuf,
    },
    /// Train and evaluate several configs into one comparison table.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "UPPER")]
enum GenderArg {
    M,
    F,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "UPPER")]
enum ViewArg {
    Ap,
    Pa,
}

fn run(cli: Cli) -> Result<()> {
    let verbose = cli.verbose;
    match cli.command {
        Command::Train { config } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let out = run_training(&cfg, verbose)?;
            let r = &out.report;
            println!("model {} epochs {} best_epoch {}", r.model, r.epochs.len(), r.best_epoch.map_or("-".into(), |e| e.to_string()));
            if let Some(m) = &r.metrics {
                println!("recall {:.4} precision {:.4} f_beta {:.4} accuracy {:.4}", m.recall, m.precision, m.f_beta, m.accuracy);
            }
            println!("checkpoint {}", out.checkpoint.display());
        }
        Command::Evaluate { checkpoint, split, threshold, beta } => {
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let cfg = ck.meta.config.as_ref().context("checkpoint carries no training config")?;
            let which = match split {
                SplitArg::Train => SplitName::Train,
                SplitArg::Val => SplitName::Val,
            };
            let m = evaluate_checkpoint(&ck, which, threshold.unwrap_or(cfg.threshold), beta.unwrap_or(cfg.beta))?;
            println!("recall,precision,f_beta,accuracy,threshold,beta");
            println!("{},{},{},{},{},{}", m.recall, m.precision, m.f_beta, m.accuracy, m.threshold, m.beta);
        }
        Command::Predict { checkpoint, image, age, gender, view, threshold } => {
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let t = threshold.or(ck.meta.config.as_ref().map(|c| c.threshold)).unwrap_or(0.5);
            let gender = match gender {
                GenderArg::M => Gender::M,
                GenderArg::F => Gender::F,
            };
            let view = match view {
                ViewArg::Ap => ViewPosition::AP,
                ViewArg::Pa => ViewPosition::PA,
            };
            let p = predict_image(&ck.network()?, &image, age, gender, view, t)?;
            println!("{}", p.line());
            if verbose {
                eprintln!("threshold {}", format_confidence(t));
            }
        }
        Command::Stats { csv } => {
            let parsed = parse_metadata_csv(&csv, &HeaderMap::default())?;
            let stats = class_stats(&parsed.records);
            let mut w = csv::Writer::from_writer(std::io::stdout().lock());
            w.write_record(["category", "key", "count"])?;
            for (cat, key, n) in stats.rows() {
                w.write_record([cat, key.as_str(), &n.to_string()])?;
            }
            w.write_record(["dropped", "age_outlier", &parsed.age_outliers.to_string()])?;
            w.write_record(["dropped", "malformed", &parsed.skipped.len().to_string()])?;
            w.flush()?;
        }
        Command::Compare { configs, out } => {
            let rows = compare(&configs, cli.seed, verbose);
            for r in &rows {
                if let Err(e) = &r.result {
                    eprintln!("{}: {e}", r.model);
                }
            }
            match out {
                Some(path) => write_compare_csv(&rows, std::fs::File::create(&path)?)?,
                None => {
                    let mut stdout = std::io::stdout().lock();
                    write_compare_csv(&rows, &mut stdout)?;
                    stdout.flush()?;
                }
            }
            if rows.iter().all(|r| r.result.is_err()) {
                bail!("every configuration failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = if cli.deterministic {
        single_threaded(|| run(cli)).and_then(|r| r)
    } else {
        run(cli)
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
