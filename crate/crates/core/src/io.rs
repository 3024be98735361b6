//! On-disk artifacts: checkpoints and the history, curve and bound CSVs.
//!
//! Checkpoints are JSON objects:
//!
//! ```text
//! { "format": "cclsc-checkpoint", "version": 1, "seed": <u64>, "epoch": <usize>,
//!   "params": { "arch": {...}, "embedding_layers": [...], "classifier": {...} } }
//! ```
//!
//! Every layer stores `in_dim`, `out_dim`, a row-major `out_dim × in_dim`
//! weight matrix and the bias. Floats are written in shortest round-trip form,
//! so a load reproduces every parameter bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ModelParams;
use crate::seleval::RiskCoveragePoint;
use crate::theory::BoundReport;
use crate::trainer::{EpochRecord, TrainHistory};

pub const CHECKPOINT_FORMAT: &str = "cclsc-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const CURVE_HEADER: &str = "target_coverage,threshold,realized_coverage,selective_risk_percent,selected,errors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub epoch: usize,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(params: ModelParams, seed: u64, epoch: usize) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            seed,
            epoch,
            params,
        }
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    if !ck.params.is_finite() {
        return Err(Error::NonFinite("parameter in checkpoint".into()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, ck)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
    if ck.format != CHECKPOINT_FORMAT {
        return Err(Error::Input(format!("{}: not a checkpoint (format {:?})", path.display(), ck.format)));
    }
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::Input(format!("{}: unsupported checkpoint version {}", path.display(), ck.version)));
    }
    ck.params.validate_shapes()?;
    Ok(ck)
}

/// One row of the history CSV, in column order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub lr: f64,
    pub head_loss: f64,
    pub csc_loss: f64,
    pub csc_steps: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub var_intra: f64,
    pub classifier_norm: f64,
    pub rho_tilde: f64,
    pub empirical_mh: f64,
    pub bound: f64,
}

impl From<&EpochRecord> for HistoryRow {
    fn from(e: &EpochRecord) -> Self {
        Self {
            epoch: e.epoch,
            lr: e.lr,
            head_loss: e.head_loss,
            csc_loss: e.csc_loss,
            csc_steps: e.csc_steps,
            train_accuracy: e.train_accuracy,
            test_accuracy: e.test_accuracy,
            var_intra: e.bound.inputs.var_intra,
            classifier_norm: e.bound.inputs.classifier_norm,
            rho_tilde: e.bound.inputs.rho_tilde,
            empirical_mh: e.bound.inputs.empirical_margin_loss,
            bound: e.bound.bound_value,
        }
    }
}

/// One row of the bound trace CSV, in column order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub epoch: usize,
    pub var_intra: f64,
    pub classifier_norm: f64,
    pub rho_tilde: f64,
    pub empirical_mh: f64,
    pub bound: f64,
    pub train_l0: f64,
    pub test_l0: f64,
    pub gap: f64,
}

impl From<&BoundReport> for BoundRow {
    fn from(r: &BoundReport) -> Self {
        Self {
            epoch: r.epoch,
            var_intra: r.inputs.var_intra,
            classifier_norm: r.inputs.classifier_norm,
            rho_tilde: r.inputs.rho_tilde,
            empirical_mh: r.inputs.empirical_margin_loss,
            bound: r.bound_value,
            train_l0: r.train_l0,
            test_l0: r.test_l0,
            gap: r.gap,
        }
    }
}

/// One row of the curve CSV. Risk is in percent, rounded to 4 decimals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub target_coverage: f64,
    pub threshold: f64,
    pub realized_coverage: f64,
    pub selective_risk_percent: f64,
    pub selected: usize,
    pub errors: usize,
}

impl CurveRow {
    pub fn selective_risk(&self) -> f64 {
        self.selective_risk_percent / 100.0
    }
}

fn write_rows<T: Serialize, W: Write>(rows: impl IntoIterator<Item = T>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path, header: &str) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let found = r.headers()?.iter().collect::<Vec<_>>().join(",");
    if found != header {
        return Err(Error::Input(format!("{}: expected header {header:?}, found {found:?}", path.display())));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub const HISTORY_HEADER: &str = "epoch,lr,head_loss,csc_loss,csc_steps,train_accuracy,test_accuracy,\
var_intra,classifier_norm,rho_tilde,empirical_mh,bound";

pub const BOUND_HEADER: &str = "epoch,var_intra,classifier_norm,rho_tilde,empirical_mh,bound,train_l0,test_l0,gap";

pub fn write_history_csv(history: &TrainHistory, path: &Path) -> Result<()> {
    write_rows(history.epochs.iter().map(HistoryRow::from), create(path)?)
}

pub fn read_history_csv(path: &Path) -> Result<Vec<HistoryRow>> {
    read_rows(path, HISTORY_HEADER)
}

pub fn write_bound_csv(trace: &[BoundReport], path: &Path) -> Result<()> {
    write_bound(trace, create(path)?)
}

pub fn write_bound<W: Write>(trace: &[BoundReport], out: W) -> Result<()> {
    write_rows(trace.iter().map(BoundRow::from), out)
}

pub fn read_bound_csv(path: &Path) -> Result<Vec<BoundRow>> {
    read_rows(path, BOUND_HEADER)
}

pub fn write_curve_csv(curve: &[RiskCoveragePoint], path: &Path) -> Result<()> {
    write_curve(curve, create(path)?)
}

pub fn write_curve<W: Write>(curve: &[RiskCoveragePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CURVE_HEADER.split(','))?;
    for p in curve {
        w.write_record([
            p.target_coverage.to_string(),
            p.threshold.to_string(),
            p.realized_coverage.to_string(),
            format!("{:.4}", 100.0 * p.selective_risk),
            p.selected.to_string(),
            p.errors.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<CurveRow>> {
    read_rows(path, CURVE_HEADER)
}
