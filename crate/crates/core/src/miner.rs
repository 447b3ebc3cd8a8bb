//! Dynamic hard-negative mining.
//!
//! Each retrieval example carries the mean cosine of its installed negatives
//! at install time. At every check step the mean is recomputed under the
//! current weights; when it has fallen by more than the configured ratio and
//! is inside the absolute threshold, the negatives are no longer hard and the
//! next rank window of a fresh ranking is installed. The `i`-th install uses
//! ranks `[(i−1)·n + skip_top, i·n + skip_top)`; the initial install is `i = 1`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{encode, tokenize, EncoderError, EncoderParams, TokenizerConfig};
use crate::numeric::{cosine_sim, DenseVector, NumericError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MinerError {
    #[error("no negatives to score")]
    EmptyNegatives,
    #[error("ranking has {available} candidates but window needs {needed}")]
    CorpusTooSmall { needed: usize, available: usize },
    #[error("step {step} is not a multiple of the check interval {interval}")]
    NotCheckStep { step: u64, interval: u64 },
    #[error("corpus id {0} out of range")]
    UnknownId(usize),
    #[error("invalid miner config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinerConfig {
    pub check_interval: u64,
    pub ratio: f64,
    pub abs_threshold: f64,
    pub skip_top: usize,
}

impl Default for MinerConfig {
    fn default() -> Self {
        Self {
            check_interval: 100,
            ratio: 1.15,
            abs_threshold: 0.8,
            skip_top: 10,
        }
    }
}

impl MinerConfig {
    pub fn validate(&self) -> Result<(), MinerError> {
        if self.check_interval == 0 {
            return Err(MinerError::InvalidConfig("check_interval must be positive".into()));
        }
        if !(self.ratio > 1.0) || !self.ratio.is_finite() {
            return Err(MinerError::InvalidConfig(format!("ratio must exceed 1, got {}", self.ratio)));
        }
        if !(self.abs_threshold > 0.0 && self.abs_threshold < 1.0) {
            return Err(MinerError::InvalidConfig(format!(
                "abs_threshold must lie in (0, 1), got {}",
                self.abs_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningState {
    /// Mean negative cosine when the current set was installed.
    pub initial_score: f64,
    /// Mean negative cosine at the most recent check.
    pub last_avg_score: f64,
    /// Which install produced the current set; the initial install is 1.
    pub replacement_index: usize,
    /// Negatives per query across all workers (the window width).
    pub n_neg: usize,
    pub installed_negative_ids: Vec<usize>,
}

/// Corpus ids ordered by descending cosine to one query.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateRanking {
    pub ids: Vec<usize>,
    pub scores: Vec<f64>,
}

impl CandidateRanking {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Mean cosine between a query and its negatives.
pub fn score_negatives(query: &DenseVector<f64>, negatives: &[DenseVector<f64>]) -> Result<f64, MinerError> {
    if negatives.is_empty() {
        return Err(MinerError::EmptyNegatives);
    }
    let mut sum = 0.0;
    for n in negatives {
        sum += cosine_sim(query, n)?;
    }
    Ok(sum / negatives.len() as f64)
}

fn mean(xs: &[f64]) -> f64 {
    let mut sum = 0.0;
    for &x in xs {
        sum += x;
    }
    sum / xs.len() as f64
}

/// True when the installed negatives have become easy: the current mean
/// scaled by `ratio` is below the install-time mean and its magnitude is
/// below `abs_threshold`.
pub fn should_replace(state: &MiningState, current_avg: f64, cfg: &MinerConfig) -> bool {
    current_avg * cfg.ratio < state.initial_score && current_avg.abs() < cfg.abs_threshold
}

/// Half-open rank window `[(i−1)·n + skip_top, i·n + skip_top)` for the `i`-th install.
pub fn replacement_window(i: usize, n: usize, skip_top: usize) -> (usize, usize) {
    assert!(i >= 1 && n >= 1, "window needs i >= 1 and n >= 1");
    ((i - 1) * n + skip_top, i * n + skip_top)
}

/// Exact ranking of every corpus entry except `exclude`; ties go to the lower id.
pub fn rank_candidates(
    query: &DenseVector<f64>,
    corpus: &[DenseVector<f64>],
    exclude: &BTreeSet<usize>,
    min_len: usize,
) -> Result<CandidateRanking, MinerError> {
    let mut scored = Vec::with_capacity(corpus.len());
    for (id, v) in corpus.iter().enumerate() {
        if !exclude.contains(&id) {
            scored.push((id, cosine_sim(query, v)?));
        }
    }
    if scored.len() < min_len {
        return Err(MinerError::CorpusTooSmall {
            needed: min_len,
            available: scored.len(),
        });
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let (ids, scores) = scored.into_iter().unzip();
    Ok(CandidateRanking { ids, scores })
}

fn install(ranking: &CandidateRanking, i: usize, n: usize, skip_top: usize) -> Result<MiningState, MinerError> {
    let (lo, hi) = replacement_window(i, n, skip_top);
    if ranking.len() < hi {
        return Err(MinerError::CorpusTooSmall {
            needed: hi,
            available: ranking.len(),
        });
    }
    let score = mean(&ranking.scores[lo..hi]);
    Ok(MiningState {
        initial_score: score,
        last_avg_score: score,
        replacement_index: i,
        n_neg: n,
        installed_negative_ids: ranking.ids[lo..hi].to_vec(),
    })
}

/// First install (`i = 1`) of `n` negatives from a ranking.
pub fn initial_install(ranking: &CandidateRanking, n: usize, cfg: &MinerConfig) -> Result<MiningState, MinerError> {
    install(ranking, 1, n, cfg.skip_top)
}

/// Installs the next window of `ranking`. The new `initial_score` is the mean
/// ranking score over the installed ids, i.e. their mean cosine under the
/// weights that produced the ranking.
pub fn replace_negatives(state: &MiningState, ranking: &CandidateRanking, cfg: &MinerConfig) -> Result<MiningState, MinerError> {
    install(ranking, state.replacement_index + 1, state.n_neg, cfg.skip_top)
}

/// Pre-tokenized passages addressed by corpus id.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub texts: Vec<String>,
    pub tokens: Vec<Vec<usize>>,
}

impl Corpus {
    pub fn new(texts: Vec<String>, tokenizer: &TokenizerConfig) -> Result<Self, EncoderError> {
        let tokens = texts.iter().map(|t| tokenize(t, tokenizer)).collect::<Result<_, _>>()?;
        Ok(Self { texts, tokens })
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn embed(&self, params: &EncoderParams<f64>) -> Result<Vec<DenseVector<f64>>, EncoderError> {
        self.tokens.iter().map(|t| encode(params, t).map(|e| e.vector)).collect()
    }

    pub fn id_of(&self, text: &str) -> Option<usize> {
        self.texts.iter().position(|t| t == text)
    }
}

/// A query, its gold passage, and the negatives currently installed for it.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalExample {
    pub id: usize,
    pub query: String,
    pub query_tokens: Vec<usize>,
    pub positive_id: usize,
    pub state: MiningState,
}

impl RetrievalExample {
    pub fn exclude_set(&self) -> BTreeSet<usize> {
        BTreeSet::from([self.positive_id])
    }
}

/// Builds an example with its first negative set installed from a fresh
/// ranking under `params`.
pub fn mine_initial(
    id: usize,
    query: &str,
    positive_id: usize,
    corpus: &Corpus,
    corpus_vectors: &[DenseVector<f64>],
    params: &EncoderParams<f64>,
    tokenizer: &TokenizerConfig,
    n: usize,
    cfg: &MinerConfig,
) -> Result<RetrievalExample, MinerError> {
    if positive_id >= corpus.len() {
        return Err(MinerError::UnknownId(positive_id));
    }
    let query_tokens = tokenize(query, tokenizer)?;
    let q = encode(params, &query_tokens)?.vector;
    let exclude = BTreeSet::from([positive_id]);
    let (_, hi) = replacement_window(1, n, cfg.skip_top);
    let ranking = rank_candidates(&q, corpus_vectors, &exclude, hi)?;
    Ok(RetrievalExample {
        id,
        query: query.to_string(),
        query_tokens,
        positive_id,
        state: initial_install(&ranking, n, cfg)?,
    })
}

/// One line of the mining ledger: a check of one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub step: u64,
    pub example_id: usize,
    /// Install index in force when the check ran.
    pub i: usize,
    pub initial_score: f64,
    pub current_avg: f64,
    pub replaced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplacementRecord {
    pub example_id: usize,
    pub old_score: f64,
    pub new_score: f64,
    /// Install index after the replacement.
    pub i: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MiningPass {
    pub replacements: Vec<ReplacementRecord>,
    pub ledger: Vec<LedgerRecord>,
}

/// Checks every example under the current weights and replaces the negatives
/// of those whose set has become easy.
pub fn run_mining_pass(
    params: &EncoderParams<f64>,
    examples: &mut [RetrievalExample],
    corpus: &Corpus,
    step: u64,
    cfg: &MinerConfig,
) -> Result<MiningPass, MinerError> {
    cfg.validate()?;
    if !step.is_multiple_of(cfg.check_interval) {
        return Err(MinerError::NotCheckStep {
            step,
            interval: cfg.check_interval,
        });
    }
    let mut pass = MiningPass::default();
    let mut corpus_vectors: Option<Vec<DenseVector<f64>>> = None;
    for ex in examples.iter_mut() {
        let q = encode(params, &ex.query_tokens)?.vector;
        let mut negs = Vec::with_capacity(ex.state.n_neg);
        for &id in &ex.state.installed_negative_ids {
            let toks = corpus.tokens.get(id).ok_or(MinerError::UnknownId(id))?;
            negs.push(encode(params, toks)?.vector);
        }
        let current = score_negatives(&q, &negs)?;
        ex.state.last_avg_score = current;
        let replace = should_replace(&ex.state, current, cfg);
        pass.ledger.push(LedgerRecord {
            step,
            example_id: ex.id,
            i: ex.state.replacement_index,
            initial_score: ex.state.initial_score,
            current_avg: current,
            replaced: replace,
        });
        if !replace {
            continue;
        }
        if corpus_vectors.is_none() {
            corpus_vectors = Some(corpus.embed(params)?);
        }
        let vectors = corpus_vectors.as_deref().expect("embedded above");
        let (_, hi) = replacement_window(ex.state.replacement_index + 1, ex.state.n_neg, cfg.skip_top);
        let ranking = rank_candidates(&q, vectors, &ex.exclude_set(), hi)?;
        let mut next = replace_negatives(&ex.state, &ranking, cfg)?;
        next.last_avg_score = current;
        pass.replacements.push(ReplacementRecord {
            example_id: ex.id,
            old_score: current,
            new_score: next.initial_score,
            i: next.replacement_index,
        });
        ex.state = next;
    }
    Ok(pass)
}
