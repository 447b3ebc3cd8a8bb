//! Curve export for external plotting.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use hardneg::metrics::{MetricsError, RunMetrics};
use hardneg::miner::LedgerRecord;
use serde::Serialize;

use crate::CliError;

pub const SCORES_FILE: &str = "fig2_scores.csv";
pub const LOSSES_FILE: &str = "fig5_losses.csv";

#[derive(Debug, Serialize)]
struct ScoreRow {
    step: u64,
    pos_score_mean: f64,
    neg_score_mean: f64,
    replacements: usize,
    replaced: u8,
}

/// Baseline columns are left empty when no baseline run is given or it has
/// no row for the step.
#[derive(Debug, Serialize)]
struct LossRow {
    step: u64,
    cbb_loss: f64,
    sequential_retri_loss: Option<f64>,
    sequential_sts_loss: Option<f64>,
}

fn read_metrics(path: &Path) -> Result<RunMetrics, CliError> {
    let file = File::open(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    RunMetrics::read_csv(file).map_err(|e| CliError::invalid(path.display(), e))
}

pub fn read_ledger(path: &Path) -> Result<Vec<LedgerRecord>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::invalid(path.display(), MetricsError::from(e)))?;
    r.deserialize()
        .collect::<Result<Vec<LedgerRecord>, _>>()
        .map_err(|e| CliError::invalid(path.display(), MetricsError::from(e)))
}

fn write_rows<R: Serialize>(path: &Path, header: &[&str], rows: &[R]) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::runtime(path.display(), MetricsError::from(e));
    let file = File::create(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    if rows.is_empty() {
        w.write_record(header).map_err(io)?;
    }
    for row in rows {
        w.serialize(row).map_err(io)?;
    }
    w.flush().map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the score curve and the loss curve into `out_dir`; returns the
/// paths written.
pub fn export_curves(
    metrics: &Path,
    ledger: Option<&Path>,
    baseline: Option<&Path>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, CliError> {
    let run = read_metrics(metrics)?;
    let replaced_at: BTreeMap<u64, usize> = match ledger {
        Some(p) => read_ledger(p)?.iter().filter(|r| r.replaced).fold(BTreeMap::new(), |mut m, r| {
            *m.entry(r.step).or_insert(0) += 1;
            m
        }),
        None => BTreeMap::new(),
    };
    let base: BTreeMap<u64, (f64, Option<f64>)> = match baseline {
        Some(p) => read_metrics(p)?
            .records
            .iter()
            .map(|r| (r.step, (r.loss_retri, r.loss_sts)))
            .collect(),
        None => BTreeMap::new(),
    };

    let scores: Vec<ScoreRow> = run
        .records
        .iter()
        .map(|r| {
            let replacements = if ledger.is_some() {
                replaced_at.get(&r.step).copied().unwrap_or(0)
            } else {
                r.replacements
            };
            ScoreRow {
                step: r.step,
                pos_score_mean: r.pos_score_mean,
                neg_score_mean: r.neg_score_mean,
                replacements,
                replaced: u8::from(replacements > 0),
            }
        })
        .collect();
    let losses: Vec<LossRow> = run
        .records
        .iter()
        .map(|r| {
            let b = base.get(&r.step);
            LossRow {
                step: r.step,
                cbb_loss: r.loss_total,
                sequential_retri_loss: b.map(|b| b.0),
                sequential_sts_loss: b.and_then(|b| b.1),
            }
        })
        .collect();

    let scores_path = out_dir.join(SCORES_FILE);
    let losses_path = out_dir.join(LOSSES_FILE);
    write_rows(
        &scores_path,
        &["step", "pos_score_mean", "neg_score_mean", "replacements", "replaced"],
        &scores,
    )?;
    write_rows(
        &losses_path,
        &["step", "cbb_loss", "sequential_retri_loss", "sequential_sts_loss"],
        &losses,
    )?;
    Ok(vec![scores_path, losses_path])
}
