//! Experiment configuration, run directories and multi-seed comparison.
//!
//! A run is configured by a flat TOML file, one key per line; every key is
//! optional and unknown keys are rejected. The defaults describe the
//! desk-scale Gaussian-mixture experiment, so an empty file is a valid
//! config:
//!
//! ```toml
//! method = "ccl-sc"            # or "ce"
//! source = "synthetic-gaussians"
//! classes = 8
//! dim = 32
//! per_class = 625
//! radius = 5.0
//! std = 1.5
//! hidden = [64]
//! embedding_dim = 32
//! epochs = 60
//! weight_decay = 0.005
//! seed = 0
//! ```
//!
//! See `configs/desk_scale.toml` for the full key list.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, DatasetSpec, GaussianSpec, Split};
use crate::error::{Error, Result};
use crate::io::{self, Checkpoint};
use crate::losses::MarginParams;
use crate::nn::Architecture;
use crate::seleval::{rank_sum_test, risk_coverage_curve, score_dataset, RiskCoveragePoint, DEFAULT_COVERAGES};
use crate::theory::{self, BoundReport, BoundSettings};
use crate::trainer::{architecture_for, train, Head, LrSchedule, TrainConfig};

pub const CONFIG_FILE: &str = "config.toml";
pub const HISTORY_FILE: &str = "history.csv";
pub const CURVE_FILE: &str = "curve.csv";
pub const BOUND_FILE: &str = "bound.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const RECORD_FILE: &str = "run.json";

/// Significance level of [`compare_runs`] verdicts.
pub const COMPARE_LEVEL: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Head loss only.
    Ce,
    /// Head loss plus the contrastive term from epoch `e_s` on.
    CclSc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    SyntheticGaussians,
    IdxFiles,
    CsvFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,

    pub source: Source,
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub radius: f64,
    pub std: f64,
    /// Seed for data generation and splitting; falls back to `seed`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv_test_path: Option<PathBuf>,
    pub label_column: String,

    pub hidden: Vec<usize>,
    pub embedding_dim: usize,

    pub epochs: usize,
    pub batch_size: usize,
    pub e_s: usize,
    pub w: f64,
    pub q: f64,
    pub s: usize,
    pub tau: f64,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_interval: usize,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub head: Head,
    pub m_sat: f64,
    pub beta_em: f64,
    pub e_s_sat: usize,

    pub rho: f64,
    pub rho_prime: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub delta: f64,
    pub h: f64,

    pub coverages: Vec<f64>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let b = t.bound;
        Self {
            method: Method::CclSc,
            source: Source::SyntheticGaussians,
            classes: 8,
            dim: 32,
            per_class: 625,
            radius: 5.0,
            std: 1.5,
            data_seed: None,
            images: None,
            labels: None,
            test_images: None,
            test_labels: None,
            csv_path: None,
            csv_test_path: None,
            label_column: "label".into(),
            hidden: vec![64],
            embedding_dim: 32,
            epochs: t.epochs,
            batch_size: t.batch_size,
            e_s: t.e_s,
            w: t.w,
            q: t.q,
            s: t.s,
            tau: t.tau,
            lr: t.lr.initial,
            lr_decay: t.lr.decay,
            lr_interval: t.lr.interval,
            sgd_momentum: t.sgd_momentum,
            weight_decay: 5e-3,
            seed: t.seed,
            head: t.head,
            m_sat: t.m_sat,
            beta_em: t.beta_em,
            e_s_sat: t.e_s_sat,
            rho: b.margin.rho,
            rho_prime: b.margin.rho_prime,
            alpha: b.margin.alpha,
            beta: b.margin.beta,
            lambda: b.margin.lambda,
            delta: b.delta,
            h: b.h,
            coverages: DEFAULT_COVERAGES.to_vec(),
            output_dir: "runs".into(),
        }
    }
}

fn config_error(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(config_error)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_error)
    }

    /// Reads a config file. Relative data paths inside it are taken relative
    /// to the file's directory; `output_dir` stays relative to the working
    /// directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.images,
            &mut self.labels,
            &mut self.test_images,
            &mut self.test_labels,
            &mut self.csv_path,
            &mut self.csv_test_path,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    /// Sets one key from its command-line spelling, e.g. `("batch-size", "32")`.
    /// Values are read as TOML literals, falling back to a bare string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim_start_matches("--").replace('-', "_");
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let mut table = match toml::Value::try_from(&*self).map_err(config_error)? {
            toml::Value::Table(t) => t,
            _ => unreachable!("config serializes to a table"),
        };
        table.insert(key.clone(), parsed);
        *self = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("--{}: {e}", key.replace('_', "-"))))?;
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            contrastive: self.method == Method::CclSc,
            e_s: self.e_s,
            w: self.w,
            q: self.q,
            s: self.s,
            tau: self.tau,
            lr: LrSchedule {
                initial: self.lr,
                decay: self.lr_decay,
                interval: self.lr_interval,
            },
            sgd_momentum: self.sgd_momentum,
            weight_decay: self.weight_decay,
            seed: self.seed,
            head: self.head,
            m_sat: self.m_sat,
            beta_em: self.beta_em,
            e_s_sat: self.e_s_sat,
            bound: self.bound_settings(),
        }
    }

    pub fn bound_settings(&self) -> BoundSettings {
        BoundSettings {
            margin: MarginParams {
                rho: self.rho,
                rho_prime: self.rho_prime,
                alpha: self.alpha,
                beta: self.beta,
                lambda: self.lambda,
            },
            delta: self.delta,
            h: self.h,
        }
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let need = |p: &Option<PathBuf>, key: &str| {
            p.clone()
                .ok_or_else(|| Error::Config(format!("source {:?} needs `{key}`", self.source)))
        };
        Ok(match self.source {
            Source::SyntheticGaussians => DatasetSpec::SyntheticGaussians(GaussianSpec {
                classes: self.classes,
                dim: self.dim,
                per_class: self.per_class,
                radius: self.radius,
                std: self.std,
                seed: self.data_seed(),
            }),
            Source::IdxFiles => DatasetSpec::IdxFiles {
                images: need(&self.images, "images")?,
                labels: need(&self.labels, "labels")?,
                test_images: self.test_images.clone(),
                test_labels: self.test_labels.clone(),
            },
            Source::CsvFile => DatasetSpec::CsvFile {
                path: need(&self.csv_path, "csv_path")?,
                label_column: self.label_column.clone(),
                test_path: self.csv_test_path.clone(),
            },
        })
    }

    pub fn architecture(&self, input_dim: usize, num_classes: usize) -> Architecture {
        architecture_for(&self.train_config(), input_dim, &self.hidden, self.embedding_dim, num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if let DatasetSpec::SyntheticGaussians(g) = self.dataset_spec()? {
            g.validate()?;
        }
        if self.embedding_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.coverages.is_empty() || self.coverages.iter().any(|c| !(*c > 0.0 && *c <= 1.0)) {
            return Err(Error::Config("coverages must be a non-empty list in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn load_split(&self) -> Result<Split> {
        load_dataset(&self.dataset_spec()?, self.data_seed())
    }

    fn run_label(&self) -> String {
        let method = match self.method {
            Method::Ce => "ce",
            Method::CclSc => "ccl-sc",
        };
        let head = match self.head {
            Head::CrossEntropy => "",
            Head::SatEm => "+sat-em",
        };
        format!("{method}{head}-seed{}", self.seed)
    }
}

/// Everything a finished run left on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_dir: PathBuf,
    pub config: RunConfig,
    pub dataset_fingerprint: String,
    pub history_csv: PathBuf,
    pub curve_csv: PathBuf,
    pub bound_csv: PathBuf,
    pub checkpoint: PathBuf,
    pub duration_secs: f64,
}

impl RunRecord {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(RECORD_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Creates a fresh directory under `root`; never reuses an existing one.
fn create_run_dir(root: &Path, label: &str) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    for attempt in 0.. {
        let name = match attempt {
            0 => format!("{stamp}-{label}"),
            n => format!("{stamp}-{label}-{n}"),
        };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!()
}

/// Builds the dataset, trains, evaluates the risk–coverage curve on the test
/// split and writes every artifact into a new run directory under
/// `cfg.output_dir`.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let split = cfg.load_split()?;
    let arch = cfg.architecture(split.train.dim(), split.train.num_classes);
    let train_cfg = cfg.train_config();
    let (params, history) = train(&split, &arch, &train_cfg)?;
    let scored = score_dataset(&params, &split.test)?;
    let curve = risk_coverage_curve(&scored, &cfg.coverages)?;

    let dir = create_run_dir(&cfg.output_dir, &cfg.run_label())?;
    let snapshot = dir.join(CONFIG_FILE);
    fs::write(&snapshot, cfg.to_toml()?).map_err(|e| Error::io(&snapshot, e))?;
    let record = RunRecord {
        config: cfg.clone(),
        dataset_fingerprint: split.fingerprint(),
        history_csv: dir.join(HISTORY_FILE),
        curve_csv: dir.join(CURVE_FILE),
        bound_csv: dir.join(BOUND_FILE),
        checkpoint: dir.join(CHECKPOINT_FILE),
        run_dir: dir.clone(),
        duration_secs: 0.0,
    };
    io::write_history_csv(&history, &record.history_csv)?;
    io::write_curve_csv(&curve, &record.curve_csv)?;
    io::write_bound_csv(&history.bound_trace(), &record.bound_csv)?;
    let last_epoch = history.last().map_or(0, |e| e.epoch);
    io::save_checkpoint(&Checkpoint::new(params, cfg.seed, last_epoch), &record.checkpoint)?;
    let record = RunRecord {
        duration_secs: start.elapsed().as_secs_f64(),
        ..record
    };
    let path = dir.join(RECORD_FILE);
    fs::write(&path, serde_json::to_string_pretty(&record)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(record)
}

pub fn run_experiment_file(config: &Path) -> Result<RunRecord> {
    run_experiment(&RunConfig::from_file(config)?)
}

fn checked_split(ck: &Checkpoint, cfg: &RunConfig) -> Result<Split> {
    let split = cfg.load_split()?;
    if split.train.dim() != ck.params.input_dim() || split.train.num_classes != ck.params.num_classes() {
        return Err(Error::Config(format!(
            "checkpoint expects {} features and {} classes, dataset has {} and {}",
            ck.params.input_dim(),
            ck.params.num_classes(),
            split.train.dim(),
            split.train.num_classes
        )));
    }
    Ok(split)
}

/// Re-evaluates a checkpoint on the configured dataset's test split.
pub fn curve_from_checkpoint(ck: &Checkpoint, cfg: &RunConfig, coverages: &[f64]) -> Result<Vec<RiskCoveragePoint>> {
    let split = checked_split(ck, cfg)?;
    risk_coverage_curve(&score_dataset(&ck.params, &split.test)?, coverages)
}

/// Bound report of a checkpoint on the configured dataset.
pub fn bound_from_checkpoint(ck: &Checkpoint, cfg: &RunConfig) -> Result<BoundReport> {
    let split = checked_split(ck, cfg)?;
    theory::bound_for_model(ck.epoch, &ck.params, &split.train, &split.test, &cfg.bound_settings())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    /// A has significantly lower selective risk.
    Better,
    Tie,
    Worse,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Better => "better",
            Verdict::Tie => "tie",
            Verdict::Worse => "worse",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub coverage: f64,
    pub mean_a: f64,
    pub std_a: f64,
    pub mean_b: f64,
    pub std_b: f64,
    pub u: f64,
    pub p: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub seeds_a: usize,
    pub seeds_b: usize,
    pub rows: Vec<ComparisonRow>,
}

impl std::fmt::Display for Comparison {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "coverage  risk A (n={}) %   risk B (n={}) %        U       p  verdict",
            self.seeds_a, self.seeds_b
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:>8.2}  {:>6.2} ± {:<6.2}  {:>6.2} ± {:<6.2}  {:>7.1}  {:>6.4}  {}",
                r.coverage,
                100.0 * r.mean_a,
                100.0 * r.std_a,
                100.0 * r.mean_b,
                100.0 * r.std_b,
                r.u,
                r.p,
                r.verdict
            )?;
        }
        Ok(())
    }
}

/// Mean and sample standard deviation.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn read_curve(path: &Path) -> Result<Vec<io::CurveRow>> {
    if path.is_dir() {
        io::read_curve_csv(&path.join(CURVE_FILE))
    } else {
        io::read_curve_csv(path)
    }
}

fn read_side(paths: &[PathBuf], side: &str) -> Result<Vec<Vec<io::CurveRow>>> {
    if paths.len() < 2 {
        return Err(Error::Config(format!(
            "side {side} has {} run(s); at least 2 seeds are needed",
            paths.len()
        )));
    }
    paths.iter().map(|p| read_curve(p)).collect()
}

/// Compares selective risk of two methods over seeds, per coverage level.
/// Each path is a run directory or a curve CSV. With `coverage` set, only that
/// grid point is reported.
pub fn compare_runs(a: &[PathBuf], b: &[PathBuf], coverage: Option<f64>) -> Result<Comparison> {
    let curves_a = read_side(a, "A")?;
    let curves_b = read_side(b, "B")?;
    let grid: Vec<f64> = curves_a[0].iter().map(|r| r.target_coverage).collect();
    for (curve, path) in curves_a.iter().chain(&curves_b).zip(a.iter().chain(b)) {
        if curve.iter().map(|r| r.target_coverage).ne(grid.iter().copied()) {
            return Err(Error::Config(format!(
                "coverage grid of {} differs from {}",
                path.display(),
                a[0].display()
            )));
        }
    }
    let selected: Vec<usize> = match coverage {
        None => (0..grid.len()).collect(),
        Some(c) => vec![grid
            .iter()
            .position(|g| *g == c)
            .ok_or_else(|| Error::Config(format!("coverage {c} is not on the runs' grid")))?],
    };
    let rows = selected
        .into_iter()
        .map(|i| {
            let ra: Vec<f64> = curves_a.iter().map(|c| c[i].selective_risk()).collect();
            let rb: Vec<f64> = curves_b.iter().map(|c| c[i].selective_risk()).collect();
            let (mean_a, std_a) = mean_std(&ra);
            let (mean_b, std_b) = mean_std(&rb);
            let test = rank_sum_test(&ra, &rb)?;
            let verdict = if test.p > COMPARE_LEVEL || mean_a == mean_b {
                Verdict::Tie
            } else if mean_a < mean_b {
                Verdict::Better
            } else {
                Verdict::Worse
            };
            Ok(ComparisonRow {
                coverage: grid[i],
                mean_a,
                std_a,
                mean_b,
                std_b,
                u: test.u,
                p: test.p,
                verdict,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Comparison {
        seeds_a: a.len(),
        seeds_b: b.len(),
        rows,
    })
}
