use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cclsc::data::{gen_gaussian_mixture, nearest_mean, write_csv, DatasetSpec};
use cclsc::io::{self, load_checkpoint};
use cclsc::workbench::{self, RunConfig, CONFIG_FILE};
use cclsc::{Error, Result};

/// Selective classification with confidence-aware contrastive training.
#[derive(Debug, Parser)]
#[command(name = "cclsc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Materialize the configured dataset as train.csv and test.csv.
    GenData {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, evaluate and write a new run directory.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Re-evaluate a checkpoint on the test split at new coverages.
    Curve {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated target coverages; defaults to the config's grid.
        #[arg(long, value_delimiter = ',')]
        coverages: Option<Vec<f64>>,
        /// Write the curve CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Recompute the generalization bound of a checkpoint.
    Bound {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write the bound CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compare selective risk of two methods over seeds.
    Compare {
        /// Run directories (or curve CSVs) of method A.
        #[arg(long, num_args = 1.., required = true)]
        a: Vec<PathBuf>,
        /// Run directories (or curve CSVs) of method B.
        #[arg(long, num_args = 1.., required = true)]
        b: Vec<PathBuf>,
        /// Report a single coverage level.
        #[arg(long)]
        coverage: Option<f64>,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Config file (flat TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Any config key as `--key value`, e.g. `--epochs 10 --method ce`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn resolve(&self, fallback: Option<&Path>) -> Result<RunConfig> {
        let mut cfg = match (&self.config, fallback) {
            (Some(path), _) => RunConfig::from_file(path)?,
            (None, Some(path)) if path.is_file() => RunConfig::from_file(path)?,
            _ => RunConfig::default(),
        };
        let mut rest = self.overrides.iter();
        while let Some(key) = rest.next() {
            if !key.starts_with("--") {
                return Err(Error::Config(format!("expected `--key`, found {key:?}")));
            }
            let value = rest
                .next()
                .ok_or_else(|| Error::Config(format!("{key} needs a value")))?;
            cfg.set(key, value)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn sibling_config(checkpoint: &Path) -> Option<PathBuf> {
    checkpoint.parent().map(|d| d.join(CONFIG_FILE))
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn emit(out: Option<&Path>, to_file: impl Fn(&Path) -> Result<()>, to_stdout: impl Fn() -> Result<()>) -> Result<()> {
    match out {
        Some(path) => to_file(path),
        None => to_stdout(),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { run, out } => {
            let cfg = run.resolve(None)?;
            let split = cfg.load_split()?;
            fs::create_dir_all(&out).map_err(|source| Error::Io {
                path: out.clone(),
                source,
            })?;
            write_csv(&split.train, &out.join("train.csv"))?;
            write_csv(&split.test, &out.join("test.csv"))?;
            println!(
                "wrote {} train + {} test samples, {} features, {} classes",
                split.train.len(),
                split.test.len(),
                split.train.dim(),
                split.train.num_classes
            );
            println!("fingerprint {}", split.fingerprint());
            if let DatasetSpec::SyntheticGaussians(spec) = cfg.dataset_spec()? {
                let means = gen_gaussian_mixture(&spec)?.means;
                let hits = split
                    .test
                    .features
                    .iter_rows()
                    .zip(&split.test.labels)
                    .filter(|(x, y)| nearest_mean(x, &means) == **y)
                    .count();
                println!("nearest-mean test accuracy {}", pct(hits as f64 / split.test.len() as f64));
            }
        }
        Command::Train { run } => {
            let cfg = run.resolve(None)?;
            let record = workbench::run_experiment(&cfg)?;
            let history = io::read_history_csv(&record.history_csv)?;
            let curve = io::read_curve_csv(&record.curve_csv)?;
            let last = history.last().expect("at least one epoch");
            println!("run {}", record.run_dir.display());
            println!(
                "test accuracy {}  var_intra {:.4}  bound {:.4}  ({:.1}s)",
                pct(last.test_accuracy),
                last.var_intra,
                last.bound,
                record.duration_secs
            );
            for row in &curve {
                println!(
                    "coverage {:.2}  risk {:.2}%  realized {:.4}",
                    row.target_coverage, row.selective_risk_percent, row.realized_coverage
                );
            }
        }
        Command::Curve {
            checkpoint,
            coverages,
            out,
            run,
        } => {
            let cfg = run.resolve(sibling_config(&checkpoint).as_deref())?;
            let ck = load_checkpoint(&checkpoint)?;
            let grid = coverages.unwrap_or_else(|| cfg.coverages.clone());
            let curve = workbench::curve_from_checkpoint(&ck, &cfg, &grid)?;
            emit(
                out.as_deref(),
                |p| io::write_curve_csv(&curve, p),
                || io::write_curve(&curve, std::io::stdout().lock()),
            )?;
        }
        Command::Bound { checkpoint, out, run } => {
            let cfg = run.resolve(sibling_config(&checkpoint).as_deref())?;
            let ck = load_checkpoint(&checkpoint)?;
            let report = workbench::bound_from_checkpoint(&ck, &cfg)?;
            emit(
                out.as_deref(),
                |p| io::write_bound_csv(&[report], p),
                || io::write_bound(&[report], std::io::stdout().lock()),
            )?;
        }
        Command::Compare { a, b, coverage } => {
            print!("{}", workbench::compare_runs(&a, &b, coverage)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ").trim_end().to_string();
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::FAILURE
        }
    }
}
