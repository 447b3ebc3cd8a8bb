//! Per-step training metrics and their CSV form.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const METRICS_HEADER: [&str; 8] = [
    "step",
    "loss_total",
    "loss_retri",
    "loss_sts",
    "lr",
    "pos_score_mean",
    "neg_score_mean",
    "replacements",
];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: step {step} does not follow {previous}")]
    NonIncreasingStep { row: usize, step: u64, previous: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss_total: f64,
    pub loss_retri: f64,
    /// Empty when the stage has no STS term.
    pub loss_sts: Option<f64>,
    pub lr: f64,
    pub pos_score_mean: f64,
    pub neg_score_mean: f64,
    /// Negative sets replaced by a mining pass before this step's update.
    pub replacements: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub records: Vec<StepRecord>,
}

impl RunMetrics {
    pub fn push(&mut self, record: StepRecord) {
        debug_assert!(self.records.last().is_none_or(|r| r.step < record.step));
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn total_replacements(&self) -> usize {
        self.records.iter().map(|r| r.replacements).sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), MetricsError> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        if self.records.is_empty() {
            w.write_record(METRICS_HEADER)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, MetricsError> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        for col in METRICS_HEADER {
            if !headers.iter().any(|h| h == col) {
                return Err(MetricsError::MissingColumn(col.into()));
            }
        }
        let mut metrics = RunMetrics::default();
        for (row, rec) in r.deserialize::<StepRecord>().enumerate() {
            let rec = rec?;
            if let Some(prev) = metrics.records.last() {
                if rec.step <= prev.step {
                    return Err(MetricsError::NonIncreasingStep {
                        row: row + 1,
                        step: rec.step,
                        previous: prev.step,
                    });
                }
            }
            metrics.records.push(rec);
        }
        Ok(metrics)
    }
}

/// Mean of `loss_total` over the last `window` records.
pub fn trailing_mean(metrics: &RunMetrics, window: usize) -> f64 {
    let tail = &metrics.records[metrics.len().saturating_sub(window)..];
    tail.iter().map(|r| r.loss_total).sum::<f64>() / tail.len() as f64
}

/// Sample standard deviation of successive differences of `xs`.
pub fn successive_diff_std(xs: &[f64]) -> f64 {
    if xs.len() < 3 {
        return 0.0;
    }
    let d: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
    var.sqrt()
}

/// Least-squares slope of `ys` against their index.
pub fn slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        num += dx * (y - my);
        den += dx * dx;
    }
    num / den
}
