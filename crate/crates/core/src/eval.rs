//! Retrieval recall@k, STS Spearman correlation, and matryoshka sweeps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{encode, prefix_normalize, EncoderError, EncoderParams};
use crate::miner::Corpus;
use crate::numeric::{cosine_sim, DenseVector, NumericError};
use crate::trainer::StsExample;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("k must be at least 1")]
    InvalidK,
    #[error("query {query}: gold id {gold} is not in the corpus of {corpus}")]
    GoldMissing { query: usize, gold: usize, corpus: usize },
    #[error("{queries} queries but {gold} gold ids")]
    QueryCountMismatch { queries: usize, gold: usize },
    #[error("length mismatch: {0} predictions, {1} labels")]
    LengthMismatch(usize, usize),
    #[error("need at least two points, got {0}")]
    TooFewPoints(usize),
    #[error("one side has zero rank variance")]
    DegenerateVariance,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metric: String,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
}

/// Fraction of queries whose gold item ranks in the top `k` by cosine. Ties
/// rank the lower corpus id first.
pub fn recall_at_k_vectors(
    queries: &[DenseVector<f64>],
    gold: &[usize],
    corpus: &[DenseVector<f64>],
    k: usize,
) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    if queries.len() != gold.len() {
        return Err(EvalError::QueryCountMismatch {
            queries: queries.len(),
            gold: gold.len(),
        });
    }
    if queries.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (qi, (q, &g)) in queries.iter().zip(gold).enumerate() {
        if g >= corpus.len() {
            return Err(EvalError::GoldMissing {
                query: qi,
                gold: g,
                corpus: corpus.len(),
            });
        }
        let gold_score = cosine_sim(q, &corpus[g])?;
        let mut ahead = 0usize;
        for (id, v) in corpus.iter().enumerate() {
            if id == g {
                continue;
            }
            let s = cosine_sim(q, v)?;
            if s > gold_score || (s == gold_score && id < g) {
                ahead += 1;
                if ahead >= k {
                    break;
                }
            }
        }
        if ahead < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}

/// Queries with their gold corpus ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub query_tokens: Vec<Vec<usize>>,
    pub gold: Vec<usize>,
}

fn embed(params: &EncoderParams<f64>, tokens: &[Vec<usize>]) -> Result<Vec<DenseVector<f64>>, EvalError> {
    Ok(tokens
        .iter()
        .map(|t| encode(params, t).map(|e| e.vector))
        .collect::<Result<Vec<_>, _>>()?)
}

fn prefixes(vs: &[DenseVector<f64>], d: usize) -> Result<Vec<DenseVector<f64>>, EvalError> {
    Ok(vs.iter().map(|v| prefix_normalize(v, d)).collect::<Result<Vec<_>, _>>()?)
}

pub fn recall_at_k(set: &EvalSet, corpus: &Corpus, params: &EncoderParams<f64>, k: usize) -> Result<f64, EvalError> {
    let q = embed(params, &set.query_tokens)?;
    let c = embed(params, &corpus.tokens)?;
    recall_at_k_vectors(&q, &set.gold, &c, k)
}

/// recall@k at every prefix dim, one result per dim in the given order.
pub fn mrl_sweep(
    set: &EvalSet,
    corpus: &Corpus,
    params: &EncoderParams<f64>,
    mrl_dims: &[usize],
    k: usize,
) -> Result<Vec<EvalResult>, EvalError> {
    let q = embed(params, &set.query_tokens)?;
    let c = embed(params, &corpus.tokens)?;
    mrl_dims
        .iter()
        .map(|&d| {
            let value = recall_at_k_vectors(&prefixes(&q, d)?, &set.gold, &prefixes(&c, d)?, k)?;
            Ok(EvalResult {
                metric: format!("recall@{k}"),
                value,
                k: Some(k),
                dim: Some(d),
            })
        })
        .collect()
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(predicted: &[f64], labels: &[f64]) -> Result<f64, EvalError> {
    if predicted.len() != labels.len() {
        return Err(EvalError::LengthMismatch(predicted.len(), labels.len()));
    }
    if predicted.len() < 2 {
        return Err(EvalError::TooFewPoints(predicted.len()));
    }
    let a = average_ranks(predicted);
    let b = average_ranks(labels);
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(&b) {
        num += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(EvalError::DegenerateVariance);
    }
    Ok((num / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman correlation between predicted cosines and gold STS scores.
pub fn sts_spearman(params: &EncoderParams<f64>, sts: &[StsExample]) -> Result<f64, EvalError> {
    let mut predicted = Vec::with_capacity(sts.len());
    for ex in sts {
        let a = encode(params, &ex.a)?.vector;
        let b = encode(params, &ex.b)?.vector;
        predicted.push(cosine_sim(&a, &b)?);
    }
    let labels: Vec<f64> = sts.iter().map(|e| e.score).collect();
    spearman(&predicted, &labels)
}
