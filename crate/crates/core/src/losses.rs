//! Contrastive objectives over embedding inputs, each with an analytic
//! gradient for every input vector:
//!
//! * in-batch InfoNCE, where every other positive in the batch is a negative;
//! * CoSENT, a pairwise ranking loss over predicted cosines ordered by label;
//! * the cross-worker batch-balance (CBB) objective: a retrieval term whose
//!   softmax denominator spans the negatives of every worker shard, plus a
//!   weighted CoSENT term.
//!
//! Similarities are true cosines, so the losses (and their gradients) are
//! valid for inputs of any norm; on unit encoder outputs they reduce to dot
//! products.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{axpy, dot, logsumexp, norm, softmax_with, DenseVector, NumericError};
use crate::scalar::Scalar;
use crate::shard::{self, ShardError, WorkerShard};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("loss weight must be non-negative and finite, got {0}")]
    InvalidWeight(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("label at index {0} is not finite")]
    NonFiniteLabel(usize),
    #[error(transparent)]
    Shard(#[from] ShardError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

/// Loss value plus gradients with respect to each input embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T, G> {
    pub value: T,
    pub grads: G,
}

/// How per-query terms of in-batch InfoNCE are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Divisor applied to the outer sum of the CBB retrieval term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CbbNormalizer {
    /// Number of queries in the retrieval batch.
    #[default]
    Queries,
    /// Number of negatives each worker holds per query.
    NegativesPerWorker,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch<T> {
    pub queries: Vec<DenseVector<T>>,
    pub positives: Vec<DenseVector<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairGrads<T> {
    pub queries: Vec<DenseVector<T>>,
    pub positives: Vec<DenseVector<T>>,
}

/// STS pairs `(a_k, b_k)` with gold similarity `labels[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StsBatch<T> {
    pub a: Vec<DenseVector<T>>,
    pub b: Vec<DenseVector<T>>,
    pub labels: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StsGrads<T> {
    pub a: Vec<DenseVector<T>>,
    pub b: Vec<DenseVector<T>>,
}

/// Queries and positives shared by all workers; each shard holds its own
/// per-query negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardedRetrievalBatch<T> {
    pub queries: Vec<DenseVector<T>>,
    pub positives: Vec<DenseVector<T>>,
    pub shards: Vec<WorkerShard<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardedGrads<T> {
    pub queries: Vec<DenseVector<T>>,
    pub positives: Vec<DenseVector<T>>,
    /// Indexed `[shard][query][j]`, shards in the batch's order.
    pub negatives: Vec<Vec<Vec<DenseVector<T>>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CbbOutput<T> {
    pub value: T,
    pub retrieval_value: T,
    pub sts_value: T,
    pub retrieval: ShardedGrads<T>,
    pub sts: StsGrads<T>,
}

pub(crate) fn check_tau<T: Scalar>(tau: T) -> Result<(), LossError> {
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(LossError::InvalidTemperature(tau.as_f64()));
    }
    Ok(())
}

/// A vector split into direction and inverse length, the form every cosine
/// gradient needs.
pub(crate) struct Normed<T> {
    pub unit: Vec<T>,
    pub inv_norm: T,
}

impl<T: Scalar> Normed<T> {
    pub fn of(v: &DenseVector<T>) -> Result<Self, NumericError> {
        let n = norm(v.as_slice());
        if n == T::zero() {
            return Err(NumericError::ZeroVector);
        }
        let inv_norm = T::one() / n;
        Ok(Self {
            unit: v.as_slice().iter().map(|&x| x * inv_norm).collect(),
            inv_norm,
        })
    }

    #[inline]
    pub fn cos(&self, other: &Self) -> T {
        dot(&self.unit, &other.unit)
    }

    /// `grad += w · ∂cos(self, other)/∂self`, where `c = cos(self, other)`.
    #[inline]
    pub fn add_cos_grad(&self, other: &Self, c: T, w: T, grad: &mut [T]) {
        let s = w * self.inv_norm;
        axpy(s, &other.unit, grad);
        axpy(-s * c, &self.unit, grad);
    }
}

pub(crate) fn normed_all<T: Scalar>(vs: &[DenseVector<T>], dim: usize) -> Result<Vec<Normed<T>>, LossError> {
    vs.iter()
        .map(|v| {
            if v.dim() != dim {
                return Err(LossError::DimensionMismatch {
                    expected: dim,
                    got: v.dim(),
                });
            }
            Ok(Normed::of(v)?)
        })
        .collect()
}

fn zero_grads<T: Scalar>(n: usize, dim: usize) -> Vec<Vec<T>> {
    vec![vec![T::zero(); dim]; n]
}

pub(crate) fn wrap<T: Scalar>(gs: Vec<Vec<T>>) -> Vec<DenseVector<T>> {
    gs.into_iter().map(DenseVector::from_raw).collect()
}

/// In-batch InfoNCE, averaged over queries.
pub fn info_nce_in_batch<T: Scalar>(
    batch: &PairBatch<T>,
    tau: T,
) -> Result<LossOutput<T, PairGrads<T>>, LossError> {
    info_nce_in_batch_with(batch, tau, Reduction::Mean)
}

/// In-batch InfoNCE: query `i` is scored against every positive `j` in the
/// batch, with `j == i` the target.
pub fn info_nce_in_batch_with<T: Scalar>(
    batch: &PairBatch<T>,
    tau: T,
    reduction: Reduction,
) -> Result<LossOutput<T, PairGrads<T>>, LossError> {
    check_tau(tau)?;
    let m = batch.queries.len();
    if m == 0 {
        return Err(LossError::EmptyBatch);
    }
    if batch.positives.len() != m {
        return Err(LossError::DimensionMismatch {
            expected: m,
            got: batch.positives.len(),
        });
    }
    let dim = batch.queries[0].dim();
    let qs = normed_all(&batch.queries, dim)?;
    let ps = normed_all(&batch.positives, dim)?;
    let scale = match reduction {
        Reduction::Mean => T::one() / T::from_usize_lossy(m),
        Reduction::Sum => T::one(),
    };

    let mut gq = zero_grads::<T>(m, dim);
    let mut gp = zero_grads::<T>(m, dim);
    let mut total = T::zero();
    let mut cosines = vec![T::zero(); m];
    let mut logits = vec![T::zero(); m];
    for i in 0..m {
        for j in 0..m {
            cosines[j] = qs[i].cos(&ps[j]);
            logits[j] = cosines[j] / tau;
        }
        let lse = logsumexp(&logits)?;
        total += lse - logits[i];
        let probs = softmax_with(&logits, lse);
        for j in 0..m {
            let target = if i == j { T::one() } else { T::zero() };
            let w = (probs[j] - target) * scale / tau;
            qs[i].add_cos_grad(&ps[j], cosines[j], w, &mut gq[i]);
            ps[j].add_cos_grad(&qs[i], cosines[j], w, &mut gp[j]);
        }
    }
    Ok(LossOutput {
        value: total * scale,
        grads: PairGrads {
            queries: wrap(gq),
            positives: wrap(gp),
        },
    })
}

/// CoSENT: `log(1 + Σ_{label_p > label_q} exp((cos_q − cos_p)/τ))`.
pub fn cosent<T: Scalar>(batch: &StsBatch<T>, tau: T) -> Result<LossOutput<T, StsGrads<T>>, LossError> {
    check_tau(tau)?;
    let m = batch.a.len();
    if m == 0 {
        return Err(LossError::EmptyBatch);
    }
    for got in [batch.b.len(), batch.labels.len()] {
        if got != m {
            return Err(LossError::DimensionMismatch { expected: m, got });
        }
    }
    if let Some(i) = batch.labels.iter().position(|l| !l.is_finite()) {
        return Err(LossError::NonFiniteLabel(i));
    }
    let dim = batch.a[0].dim();
    let xa = normed_all(&batch.a, dim)?;
    let xb = normed_all(&batch.b, dim)?;
    let cos: Vec<T> = xa.iter().zip(&xb).map(|(a, b)| a.cos(b)).collect();

    // Term 0 is the implicit exp(0) = 1.
    let mut terms = vec![T::zero()];
    let mut index = Vec::new();
    for p in 0..m {
        for q in 0..m {
            if batch.labels[p] > batch.labels[q] {
                terms.push((cos[q] - cos[p]) / tau);
                index.push((p, q));
            }
        }
    }
    let mut ga = zero_grads::<T>(m, dim);
    let mut gb = zero_grads::<T>(m, dim);
    if index.is_empty() {
        return Ok(LossOutput {
            value: T::zero(),
            grads: StsGrads {
                a: wrap(ga),
                b: wrap(gb),
            },
        });
    }
    let value = logsumexp(&terms)?;
    let weights = softmax_with(&terms[1..], value);
    let mut dcos = vec![T::zero(); m];
    for (&(p, q), &w) in index.iter().zip(&weights) {
        dcos[q] += w / tau;
        dcos[p] -= w / tau;
    }
    for k in 0..m {
        if dcos[k] != T::zero() {
            xa[k].add_cos_grad(&xb[k], cos[k], dcos[k], &mut ga[k]);
            xb[k].add_cos_grad(&xa[k], cos[k], dcos[k], &mut gb[k]);
        }
    }
    Ok(LossOutput {
        value,
        grads: StsGrads {
            a: wrap(ga),
            b: wrap(gb),
        },
    })
}

/// Monolithic InfoNCE with explicit per-query negatives and no in-batch
/// negatives, divided by `divisor`. `negatives[i]` belongs to query `i`.
pub fn info_nce_explicit<T: Scalar>(
    queries: &[DenseVector<T>],
    positives: &[DenseVector<T>],
    negatives: &[Vec<DenseVector<T>>],
    tau: T,
    divisor: T,
) -> Result<LossOutput<T, ShardedGrads<T>>, LossError> {
    check_tau(tau)?;
    let n_q = queries.len();
    if n_q == 0 {
        return Err(LossError::EmptyBatch);
    }
    for got in [positives.len(), negatives.len()] {
        if got != n_q {
            return Err(LossError::DimensionMismatch { expected: n_q, got });
        }
    }
    let dim = queries[0].dim();
    let qs = normed_all(queries, dim)?;
    let ps = normed_all(positives, dim)?;
    let mut gq = zero_grads::<T>(n_q, dim);
    let mut gp = zero_grads::<T>(n_q, dim);
    let mut gn = Vec::with_capacity(n_q);
    let mut total = T::zero();
    for i in 0..n_q {
        let ns = normed_all(&negatives[i], dim)?;
        let pos_cos = qs[i].cos(&ps[i]);
        let neg_cos: Vec<T> = ns.iter().map(|n| qs[i].cos(n)).collect();
        let mut logits = vec![pos_cos / tau];
        logits.extend(neg_cos.iter().map(|&c| c / tau));
        let lse = logsumexp(&logits)?;
        total += lse - logits[0];
        let probs = softmax_with(&logits, lse);
        let scale = T::one() / (divisor * tau);

        let w = (probs[0] - T::one()) * scale;
        qs[i].add_cos_grad(&ps[i], pos_cos, w, &mut gq[i]);
        ps[i].add_cos_grad(&qs[i], pos_cos, w, &mut gp[i]);
        let mut gni = zero_grads::<T>(ns.len(), dim);
        for (j, n) in ns.iter().enumerate() {
            let w = probs[j + 1] * scale;
            qs[i].add_cos_grad(n, neg_cos[j], w, &mut gq[i]);
            n.add_cos_grad(&qs[i], neg_cos[j], w, &mut gni[j]);
        }
        gn.push(wrap(gni));
    }
    Ok(LossOutput {
        value: total / divisor,
        grads: ShardedGrads {
            queries: wrap(gq),
            positives: wrap(gp),
            negatives: vec![gn],
        },
    })
}

/// Divisor for the CBB outer sum under the chosen reading.
pub fn cbb_divisor(normalizer: CbbNormalizer, n_queries: usize, n_neg_per_worker: usize) -> usize {
    match normalizer {
        CbbNormalizer::Queries => n_queries,
        CbbNormalizer::NegativesPerWorker => n_neg_per_worker,
    }
}

/// Retrieval part of the CBB objective, computed by per-worker partial
/// denominators merged in worker order.
pub fn cbb_retrieval_term<T: Scalar>(
    batch: &ShardedRetrievalBatch<T>,
    tau: T,
) -> Result<LossOutput<T, ShardedGrads<T>>, LossError> {
    cbb_retrieval_term_with(batch, tau, CbbNormalizer::Queries)
}

pub fn cbb_retrieval_term_with<T: Scalar>(
    batch: &ShardedRetrievalBatch<T>,
    tau: T,
    normalizer: CbbNormalizer,
) -> Result<LossOutput<T, ShardedGrads<T>>, LossError> {
    Ok(shard::sharded_forward_backward(batch, tau, normalizer)?.0)
}

/// `cbb_retrieval_term + β · cosent`.
pub fn cbb_total<T: Scalar>(
    retri: &ShardedRetrievalBatch<T>,
    sts: &StsBatch<T>,
    tau: T,
    beta: T,
) -> Result<CbbOutput<T>, LossError> {
    cbb_total_with(retri, sts, tau, beta, CbbNormalizer::Queries)
}

pub fn cbb_total_with<T: Scalar>(
    retri: &ShardedRetrievalBatch<T>,
    sts: &StsBatch<T>,
    tau: T,
    beta: T,
    normalizer: CbbNormalizer,
) -> Result<CbbOutput<T>, LossError> {
    if !(beta >= T::zero()) || !beta.is_finite() {
        return Err(LossError::InvalidWeight(beta.as_f64()));
    }
    let r = cbb_retrieval_term_with(retri, tau, normalizer)?;
    let s = cosent(sts, tau)?;
    let scale = |gs: Vec<DenseVector<T>>| -> Vec<DenseVector<T>> { gs.iter().map(|g| g.scaled(beta)).collect() };
    Ok(CbbOutput {
        value: r.value + beta * s.value,
        retrieval_value: r.value,
        sts_value: s.value,
        retrieval: r.grads,
        sts: StsGrads {
            a: scale(s.grads.a),
            b: scale(s.grads.b),
        },
    })
}
