//! In-process simulation of N workers cooperating on the CBB retrieval term.
//!
//! Every worker sees the same queries and positives but its own slice of each
//! query's negatives. A worker reduces its slice to one log-sum-exp per query
//! (its partial denominator); the aggregation step merges the partials in
//! `worker_id` order together with the positive logits, which is where a real
//! deployment would run its cross-device reduction. Gradients flow back the
//! same way: each worker differentiates its own negatives given the merged
//! denominators, and the query gradients are summed across workers in fixed
//! order.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{cbb_divisor, check_tau, normed_all, wrap, CbbNormalizer, LossError, LossOutput, Normed, ShardedGrads, ShardedRetrievalBatch};
use crate::numeric::{logsumexp, DenseVector, NumericError};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShardError {
    #[error("{count} negatives per query cannot be split evenly across {workers} workers")]
    IndivisibleCount { count: usize, workers: usize },
    #[error("worker count must be positive")]
    NoWorkers,
    #[error("query {query} has {got} negatives, expected {expected}")]
    RaggedNegatives { query: usize, expected: usize, got: usize },
    #[error("worker {0} holds no negatives")]
    EmptyNegatives(usize),
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("no partial from worker {0}")]
    MissingWorker(usize),
    #[error("worker {0} reported more than once")]
    DuplicateWorker(usize),
    #[error("unexpected worker id {0}")]
    UnknownWorker(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("shard mismatch: {0}")]
    ShardMismatch(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

impl From<LossError> for ShardError {
    fn from(e: LossError) -> Self {
        match e {
            LossError::InvalidTemperature(t) => ShardError::InvalidTemperature(t),
            LossError::DimensionMismatch { expected, got } => ShardError::DimensionMismatch { expected, got },
            LossError::Numeric(n) => ShardError::Numeric(n),
            LossError::Shard(s) => s,
            other => ShardError::ShardMismatch(other.to_string()),
        }
    }
}

/// One worker's negatives: `negatives[i]` are this worker's negatives for query `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerShard<T> {
    pub worker_id: usize,
    pub negatives: Vec<Vec<DenseVector<T>>>,
}

impl<T> WorkerShard<T> {
    /// Negatives per query (0 when the shard covers no queries).
    pub fn n_neg(&self) -> usize {
        self.negatives.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartialDenominator<T> {
    pub worker_id: usize,
    pub per_query_logsumexp: Vec<T>,
}

/// Round-robin split of each row: item `j` goes to worker `j % n_workers`.
/// Works for any payload (vectors, corpus ids).
pub fn partition_round_robin<X: Clone>(rows: &[Vec<X>], n_workers: usize) -> Result<Vec<Vec<Vec<X>>>, ShardError> {
    if n_workers == 0 {
        return Err(ShardError::NoWorkers);
    }
    let count = rows.first().map_or(0, Vec::len);
    if count == 0 {
        return Err(ShardError::EmptyNegatives(0));
    }
    for (query, row) in rows.iter().enumerate() {
        if row.len() != count {
            return Err(ShardError::RaggedNegatives {
                query,
                expected: count,
                got: row.len(),
            });
        }
    }
    if !count.is_multiple_of(n_workers) {
        return Err(ShardError::IndivisibleCount {
            count,
            workers: n_workers,
        });
    }
    let mut out = vec![vec![Vec::with_capacity(count / n_workers); rows.len()]; n_workers];
    for (i, row) in rows.iter().enumerate() {
        for (j, item) in row.iter().enumerate() {
            out[j % n_workers][i].push(item.clone());
        }
    }
    Ok(out)
}

/// Splits per-query negatives into `n_workers` disjoint, exhaustive shards.
pub fn partition_negatives<T: Scalar>(
    negatives: &[Vec<DenseVector<T>>],
    n_workers: usize,
) -> Result<Vec<WorkerShard<T>>, ShardError> {
    Ok(partition_round_robin(negatives, n_workers)?
        .into_iter()
        .enumerate()
        .map(|(worker_id, negatives)| WorkerShard { worker_id, negatives })
        .collect())
}

fn worker_partial_normed<T: Scalar>(
    shard: &WorkerShard<T>,
    queries: &[Normed<T>],
    dim: usize,
    tau: T,
) -> Result<(PartialDenominator<T>, Vec<Vec<Normed<T>>>, Vec<Vec<T>>), ShardError> {
    if shard.negatives.len() != queries.len() {
        return Err(ShardError::ShardMismatch(format!(
            "worker {} covers {} queries, batch has {}",
            shard.worker_id,
            shard.negatives.len(),
            queries.len()
        )));
    }
    let mut lse = Vec::with_capacity(queries.len());
    let mut normed = Vec::with_capacity(queries.len());
    let mut cosines = Vec::with_capacity(queries.len());
    for (q, negs) in queries.iter().zip(&shard.negatives) {
        if negs.is_empty() {
            return Err(ShardError::EmptyNegatives(shard.worker_id));
        }
        let ns = normed_all(negs, dim)?;
        let cos: Vec<T> = ns.iter().map(|n| q.cos(n)).collect();
        let logits: Vec<T> = cos.iter().map(|&c| c / tau).collect();
        lse.push(logsumexp(&logits)?);
        normed.push(ns);
        cosines.push(cos);
    }
    Ok((
        PartialDenominator {
            worker_id: shard.worker_id,
            per_query_logsumexp: lse,
        },
        normed,
        cosines,
    ))
}

/// Per query `i`, `logsumexp_j s(x_i, y⁻_{i,j}) / τ` over this worker's negatives.
pub fn worker_partial<T: Scalar>(
    shard: &WorkerShard<T>,
    queries: &[DenseVector<T>],
    tau: T,
) -> Result<PartialDenominator<T>, ShardError> {
    check_tau(tau)?;
    let dim = queries.first().map_or(0, DenseVector::dim);
    let qs = normed_all(queries, dim)?;
    Ok(worker_partial_normed(shard, &qs, dim, tau)?.0)
}

/// Sorts partials by worker id and checks that ids are exactly `0..n_workers`.
fn ordered<T: Scalar>(partials: &[PartialDenominator<T>], n_workers: usize) -> Result<Vec<&PartialDenominator<T>>, ShardError> {
    let mut sorted: Vec<&PartialDenominator<T>> = partials.iter().collect();
    sorted.sort_by_key(|p| p.worker_id);
    for (expected, p) in sorted.iter().enumerate() {
        if p.worker_id >= n_workers {
            return Err(ShardError::UnknownWorker(p.worker_id));
        }
        if p.worker_id < expected {
            return Err(ShardError::DuplicateWorker(p.worker_id));
        }
        if p.worker_id > expected {
            return Err(ShardError::MissingWorker(expected));
        }
    }
    if sorted.len() < n_workers {
        return Err(ShardError::MissingWorker(sorted.len()));
    }
    Ok(sorted)
}

/// Full per-query log-denominators `log(exp(pos_i) + Σ_k exp(partial_{k,i}))`.
pub fn merged_denominators<T: Scalar>(
    partials: &[PartialDenominator<T>],
    pos_logits: &[T],
    n_workers: usize,
) -> Result<Vec<T>, ShardError> {
    let sorted = ordered(partials, n_workers)?;
    let n_q = pos_logits.len();
    for p in &sorted {
        if p.per_query_logsumexp.len() != n_q {
            return Err(ShardError::DimensionMismatch {
                expected: n_q,
                got: p.per_query_logsumexp.len(),
            });
        }
    }
    let mut out = Vec::with_capacity(n_q);
    let mut terms = Vec::with_capacity(n_workers + 1);
    for (i, &pos) in pos_logits.iter().enumerate() {
        terms.clear();
        terms.push(pos);
        terms.extend(sorted.iter().map(|p| p.per_query_logsumexp[i]));
        out.push(logsumexp(&terms)?);
    }
    Ok(out)
}

/// Retrieval loss from merged partials: `(1/n_q) Σ_i (denominator_i − pos_i)`.
pub fn aggregate<T: Scalar>(
    partials: &[PartialDenominator<T>],
    pos_logits: &[T],
    n_workers: usize,
) -> Result<T, ShardError> {
    aggregate_with(partials, pos_logits, n_workers, pos_logits.len())
}

pub fn aggregate_with<T: Scalar>(
    partials: &[PartialDenominator<T>],
    pos_logits: &[T],
    n_workers: usize,
    divisor: usize,
) -> Result<T, ShardError> {
    if divisor == 0 {
        return Err(ShardError::ShardMismatch("divisor must be positive".into()));
    }
    let denoms = merged_denominators(partials, pos_logits, n_workers)?;
    let mut total = T::zero();
    for (d, &p) in denoms.iter().zip(pos_logits) {
        total += *d - p;
    }
    Ok(total / T::from_usize_lossy(divisor))
}

/// Shard-level validation shared by the forward pass.
fn validate_batch<T: Scalar>(batch: &ShardedRetrievalBatch<T>) -> Result<usize, ShardError> {
    let n_q = batch.queries.len();
    if n_q == 0 {
        return Err(ShardError::ShardMismatch("batch has no queries".into()));
    }
    if batch.positives.len() != n_q {
        return Err(ShardError::DimensionMismatch {
            expected: n_q,
            got: batch.positives.len(),
        });
    }
    if batch.shards.is_empty() {
        return Err(ShardError::NoWorkers);
    }
    let n_neg = batch.shards[0].n_neg();
    for shard in &batch.shards {
        if shard.negatives.len() != n_q {
            return Err(ShardError::ShardMismatch(format!(
                "worker {} covers {} queries, batch has {n_q}",
                shard.worker_id,
                shard.negatives.len()
            )));
        }
        for (query, negs) in shard.negatives.iter().enumerate() {
            if negs.len() != n_neg {
                return Err(ShardError::RaggedNegatives {
                    query,
                    expected: n_neg,
                    got: negs.len(),
                });
            }
        }
    }
    if n_neg == 0 {
        return Err(ShardError::EmptyNegatives(batch.shards[0].worker_id));
    }
    Ok(n_neg)
}

/// Forward and backward of the CBB retrieval term through the worker
/// simulation. Returns the loss and the partials in worker-id order.
pub fn sharded_forward_backward<T: Scalar>(
    batch: &ShardedRetrievalBatch<T>,
    tau: T,
    normalizer: CbbNormalizer,
) -> Result<(LossOutput<T, ShardedGrads<T>>, Vec<PartialDenominator<T>>), ShardError> {
    check_tau(tau)?;
    let n_neg = validate_batch(batch)?;
    let n_q = batch.queries.len();
    let n_workers = batch.shards.len();
    let dim = batch.queries[0].dim();
    let qs = normed_all(&batch.queries, dim)?;
    let ps = normed_all(&batch.positives, dim)?;

    let pos_cos: Vec<T> = qs.iter().zip(&ps).map(|(q, p)| q.cos(p)).collect();
    let pos_logits: Vec<T> = pos_cos.iter().map(|&c| c / tau).collect();

    let mut worker_out = Vec::with_capacity(n_workers);
    for shard in &batch.shards {
        worker_out.push(worker_partial_normed(shard, &qs, dim, tau)?);
    }
    let partials: Vec<PartialDenominator<T>> = worker_out.iter().map(|w| w.0.clone()).collect();
    let denoms = merged_denominators(&partials, &pos_logits, n_workers)?;

    let divisor = cbb_divisor(normalizer, n_q, n_neg);
    if divisor == 0 {
        return Err(ShardError::ShardMismatch("normalizer is zero".into()));
    }
    let div = T::from_usize_lossy(divisor);
    let mut value = T::zero();
    for (d, p) in denoms.iter().zip(&pos_logits) {
        value += *d - *p;
    }
    value /= div;

    let scale = T::one() / (div * tau);
    let mut gq = vec![vec![T::zero(); dim]; n_q];
    let mut gp = vec![vec![T::zero(); dim]; n_q];
    for i in 0..n_q {
        let w = ((pos_logits[i] - denoms[i]).exp() - T::one()) * scale;
        qs[i].add_cos_grad(&ps[i], pos_cos[i], w, &mut gq[i]);
        ps[i].add_cos_grad(&qs[i], pos_cos[i], w, &mut gp[i]);
    }

    // Each worker differentiates its own negatives; query contributions are
    // reduced in worker-id order.
    let mut order: Vec<usize> = (0..n_workers).collect();
    order.sort_by_key(|&k| batch.shards[k].worker_id);
    let mut gn: Vec<Vec<Vec<DenseVector<T>>>> = vec![Vec::new(); n_workers];
    for &k in &order {
        let (_, normed, cosines) = &worker_out[k];
        let mut per_query = Vec::with_capacity(n_q);
        for i in 0..n_q {
            let mut gni = vec![vec![T::zero(); dim]; normed[i].len()];
            for (j, n) in normed[i].iter().enumerate() {
                let c = cosines[i][j];
                let w = (c / tau - denoms[i]).exp() * scale;
                qs[i].add_cos_grad(n, c, w, &mut gq[i]);
                n.add_cos_grad(&qs[i], c, w, &mut gni[j]);
            }
            per_query.push(wrap(gni));
        }
        gn[k] = per_query;
    }

    let mut sorted_partials = partials;
    sorted_partials.sort_by_key(|p| p.worker_id);
    Ok((
        LossOutput {
            value,
            grads: ShardedGrads {
                queries: wrap(gq),
                positives: wrap(gp),
                negatives: gn,
            },
        },
        sorted_partials,
    ))
}

/// One line of the optional aggregation trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub worker_id: usize,
    pub per_query_logsumexp: Vec<f64>,
    /// Set only on the STS logical worker, which reports its CoSENT loss.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sts_loss: Option<f64>,
}

pub fn trace_records<T: Scalar>(step: u64, partials: &[PartialDenominator<T>]) -> Vec<TraceRecord> {
    partials
        .iter()
        .map(|p| TraceRecord {
            step,
            worker_id: p.worker_id,
            per_query_logsumexp: p.per_query_logsumexp.iter().map(|v| v.as_f64()).collect(),
            sts_loss: None,
        })
        .collect()
}

pub fn write_trace<W: Write>(mut out: W, records: &[TraceRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}
