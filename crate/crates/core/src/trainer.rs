//! Pretraining, CBB fine-tuning with the mining hook, and the
//! sequential-random-task baseline.
//!
//! Every loss is computed on a flat list of embeddings, so the same
//! matryoshka wrapper serves all of them: each configured prefix dim is
//! renormalized, scored, and its gradient pulled back to the full vector.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, TrainConfig};
use crate::data::{PairRecord, RetrievalRecord, StsRecord};
use crate::encoder::{
    accumulate_backward, encode, prefix_backward, prefix_normalize, tokenize, EncoderError, EncoderGrads,
    EncoderParams, TokenizerConfig,
};
use crate::losses::{cosent, info_nce_explicit, info_nce_in_batch_with, LossError, PairBatch, ShardedRetrievalBatch, StsBatch};
use crate::metrics::{RunMetrics, StepRecord};
use crate::miner::{
    initial_install, rank_candidates, replacement_window, run_mining_pass, score_negatives, Corpus, LedgerRecord,
    MinerError, MiningState, RetrievalExample,
};
use crate::numeric::{axpy, cosine_sim, DenseVector};
use crate::optim::{optimizer_step, OptimError, OptimizerState};
use crate::shard::{partition_negatives, sharded_forward_backward, trace_records, ShardError, TraceRecord};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Shard(#[from] ShardError),
    #[error(transparent)]
    Miner(#[from] MinerError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("{0} data is empty")]
    EmptyData(&'static str),
    #[error("{what} batch of {batch} exceeds the {available} available examples")]
    BatchTooLarge {
        what: &'static str,
        batch: usize,
        available: usize,
    },
    #[error("parameters are {got:?} (vocab, d_model, dim) but the config says {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("example {example}: {have} installed negatives, expected {want}")]
    NegativeCount { example: usize, have: usize, want: usize },
    #[error("retrieval record {0}: {1} not found in the corpus")]
    NotInCorpus(usize, &'static str),
    #[error("mrl weights: {0}")]
    InvalidWeights(String),
}

/// Stable per-purpose seed derived from the run seed.
pub fn derive_seed(seed: u64, stream: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ h.rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Shuffled mini-batches; each epoch reshuffles with its own derived seed
/// and drops the ragged tail.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    n: usize,
    batch: usize,
    seed: u64,
    stream: &'static str,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    pub fn new(n: usize, batch: usize, seed: u64, stream: &'static str) -> Self {
        assert!(batch >= 1 && batch <= n, "batch must fit the dataset");
        let mut s = Self {
            n,
            batch,
            seed,
            stream,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        self.order = (0..self.n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, self.stream, self.epoch));
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.n {
            self.epoch += 1;
            self.shuffle();
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairExample {
    pub query: Vec<usize>,
    pub passage: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StsExample {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
    pub score: f64,
}

pub fn prepare_pairs(records: &[PairRecord], tokenizer: &TokenizerConfig) -> Result<Vec<PairExample>, EncoderError> {
    records
        .iter()
        .map(|r| {
            Ok(PairExample {
                query: tokenize(&r.query, tokenizer)?,
                passage: tokenize(&r.passage, tokenizer)?,
            })
        })
        .collect()
}

pub fn prepare_sts(records: &[StsRecord], tokenizer: &TokenizerConfig) -> Result<Vec<StsExample>, EncoderError> {
    records
        .iter()
        .map(|r| {
            Ok(StsExample {
                a: tokenize(&r.text_a, tokenizer)?,
                b: tokenize(&r.text_b, tokenizer)?,
                score: r.score,
            })
        })
        .collect()
}

/// A loss over a flat list of embeddings: total value, named components
/// (already weighted into `value` by the loss itself), and one gradient per
/// input embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatLoss {
    pub value: f64,
    pub parts: Vec<f64>,
    pub grads: Vec<DenseVector<f64>>,
}

/// `Σ_d w_d · loss_fn(prefix_d(vectors))`, with gradients pulled back through
/// each prefix renormalization. `loss_fn` receives the prefix dim and the
/// truncated, renormalized embeddings.
pub fn mrl_loss<F>(vectors: &[DenseVector<f64>], dims: &[usize], weights: &[f64], mut loss_fn: F) -> Result<FlatLoss, TrainError>
where
    F: FnMut(usize, &[DenseVector<f64>]) -> Result<FlatLoss, TrainError>,
{
    if dims.len() != weights.len() {
        return Err(TrainError::InvalidWeights(format!(
            "{} weights for {} dims",
            weights.len(),
            dims.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || !(weights.iter().sum::<f64>() > 0.0) {
        return Err(TrainError::InvalidWeights("must be non-negative with a positive sum".into()));
    }
    let full = vectors.first().map_or(0, DenseVector::dim);
    let mut value = 0.0;
    let mut parts: Vec<f64> = Vec::new();
    let mut grads: Vec<Vec<f64>> = vec![vec![0.0; full]; vectors.len()];
    for (&d, &w) in dims.iter().zip(weights) {
        if d == 0 || d > full {
            return Err(EncoderError::InvalidDim { dim: d, full }.into());
        }
        if w == 0.0 {
            continue;
        }
        let truncated = vectors.iter().map(|v| prefix_normalize(v, d)).collect::<Result<Vec<_>, _>>()?;
        let out = loss_fn(d, &truncated)?;
        value += w * out.value;
        if parts.len() < out.parts.len() {
            parts.resize(out.parts.len(), 0.0);
        }
        for (acc, p) in parts.iter_mut().zip(&out.parts) {
            *acc += w * p;
        }
        for (k, g) in out.grads.iter().enumerate() {
            let back = prefix_backward(vectors[k].as_slice(), d, g.as_slice());
            axpy(w, &back, &mut grads[k]);
        }
    }
    Ok(FlatLoss {
        value,
        parts,
        grads: grads.into_iter().map(|g| DenseVector::new(g).expect("non-empty")).collect(),
    })
}

fn encode_all(params: &EncoderParams<f64>, tokens: &[&[usize]]) -> Result<Vec<DenseVector<f64>>, EncoderError> {
    tokens.iter().map(|t| encode(params, t).map(|e| e.vector)).collect()
}

fn backprop(
    params: &EncoderParams<f64>,
    tokens: &[&[usize]],
    grads: &[DenseVector<f64>],
    out: &mut EncoderGrads<f64>,
) -> Result<(), EncoderError> {
    for (t, g) in tokens.iter().zip(grads) {
        accumulate_backward(params, t, g.as_slice(), out)?;
    }
    Ok(())
}

fn split_off(v: &[DenseVector<f64>], at: &mut usize, n: usize) -> Vec<DenseVector<f64>> {
    let out = v[*at..*at + n].to_vec();
    *at += n;
    out
}

/// Scores of the in-batch positives and off-diagonal pairs.
fn batch_scores(queries: &[DenseVector<f64>], positives: &[DenseVector<f64>]) -> Result<(f64, f64), TrainError> {
    let m = queries.len();
    let (mut pos, mut neg) = (0.0, 0.0);
    for (i, q) in queries.iter().enumerate() {
        for (j, p) in positives.iter().enumerate() {
            let c = cosine_sim(q, p).map_err(EncoderError::from)?;
            if i == j {
                pos += c;
            } else {
                neg += c;
            }
        }
    }
    let off = (m * m - m).max(1) as f64;
    Ok((pos / m as f64, neg / off))
}

/// In-batch InfoNCE with matryoshka weighting on one pretraining batch.
/// Returns the loss, parameter gradients, and the batch's mean positive and
/// off-diagonal cosines at full dim.
pub fn pretrain_objective(
    params: &EncoderParams<f64>,
    cfg: &TrainConfig,
    batch: &[&PairExample],
) -> Result<(FlatLoss, EncoderGrads<f64>, (f64, f64)), TrainError> {
    let m = batch.len();
    let mut tokens: Vec<&[usize]> = batch.iter().map(|e| e.query.as_slice()).collect();
    tokens.extend(batch.iter().map(|e| e.passage.as_slice()));
    let vectors = encode_all(params, &tokens)?;
    let scores = batch_scores(&vectors[..m], &vectors[m..])?;
    let loss = mrl_loss(&vectors, &cfg.mrl_dims, &cfg.resolved_mrl_weights(), |_, v| {
        let pb = PairBatch {
            queries: v[..m].to_vec(),
            positives: v[m..].to_vec(),
        };
        let out = info_nce_in_batch_with(&pb, cfg.tau, cfg.pretrain_reduction)?;
        let mut grads = out.grads.queries;
        grads.extend(out.grads.positives);
        Ok(FlatLoss {
            value: out.value,
            parts: vec![out.value],
            grads,
        })
    })?;
    let mut grads = EncoderGrads::zeros_like(params);
    backprop(params, &tokens, &loss.grads, &mut grads)?;
    Ok((loss, grads, scores))
}

/// Tokens for a CBB/sequential batch, laid out as
/// `[queries, positives, negatives (query-major), sts a, sts b]`.
fn finetune_tokens<'a>(
    examples: &'a [RetrievalExample],
    retri: &[usize],
    sts: &'a [StsExample],
    sts_idx: &[usize],
    corpus: &'a Corpus,
) -> Vec<&'a [usize]> {
    let mut tokens: Vec<&[usize]> = retri.iter().map(|&i| examples[i].query_tokens.as_slice()).collect();
    tokens.extend(retri.iter().map(|&i| corpus.tokens[examples[i].positive_id].as_slice()));
    for &i in retri {
        tokens.extend(examples[i].state.installed_negative_ids.iter().map(|&id| corpus.tokens[id].as_slice()));
    }
    tokens.extend(sts_idx.iter().map(|&k| sts[k].a.as_slice()));
    tokens.extend(sts_idx.iter().map(|&k| sts[k].b.as_slice()));
    tokens
}

/// Full-dim extras captured while computing the CBB objective.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CbbTrace {
    pub records: Vec<TraceRecord>,
}

/// CBB objective `retrieval + β·CoSENT` (each with matryoshka weighting) for
/// one retrieval batch spread over `n_workers` shards and one STS batch.
/// Parts are `[retrieval, sts]`; `value = retrieval + β·sts`.
pub fn cbb_objective(
    params: &EncoderParams<f64>,
    cfg: &TrainConfig,
    examples: &[RetrievalExample],
    retri: &[usize],
    sts: &[StsExample],
    sts_idx: &[usize],
    corpus: &Corpus,
    step: u64,
    trace: Option<&mut CbbTrace>,
) -> Result<(FlatLoss, EncoderGrads<f64>), TrainError> {
    let n_q = retri.len();
    let k = cfg.negatives_per_query();
    let n_s = sts_idx.len();
    let n_workers = cfg.n_workers;
    let full = cfg.model.dim;
    let labels: Vec<f64> = sts_idx.iter().map(|&i| sts[i].score).collect();
    let tokens = finetune_tokens(examples, retri, sts, sts_idx, corpus);
    let vectors = encode_all(params, &tokens)?;
    let mut captured: Option<Vec<TraceRecord>> = None;
    let loss = mrl_loss(&vectors, &cfg.mrl_dims, &cfg.resolved_mrl_weights(), |d, v| {
        let mut at = 0;
        let queries = split_off(v, &mut at, n_q);
        let positives = split_off(v, &mut at, n_q);
        let negatives: Vec<Vec<DenseVector<f64>>> = (0..n_q).map(|_| split_off(v, &mut at, k)).collect();
        let a = split_off(v, &mut at, n_s);
        let b = split_off(v, &mut at, n_s);
        let batch = ShardedRetrievalBatch {
            queries,
            positives,
            shards: partition_negatives(&negatives, n_workers)?,
        };
        let (r, partials) = sharded_forward_backward(&batch, cfg.tau, cfg.normalizer)?;
        let s = cosent(
            &StsBatch {
                a,
                b,
                labels: labels.clone(),
            },
            cfg.tau,
        )?;
        if d == full {
            let mut recs = trace_records(step, &partials);
            recs.push(TraceRecord {
                step,
                worker_id: n_workers,
                per_query_logsumexp: Vec::new(),
                sts_loss: Some(s.value),
            });
            captured = Some(recs);
        }
        let mut grads = r.grads.queries;
        grads.extend(r.grads.positives);
        // shard w holds negative j at position j / N when j % N == w
        for i in 0..n_q {
            for j in 0..k {
                grads.push(r.grads.negatives[j % n_workers][i][j / n_workers].clone());
            }
        }
        grads.extend(s.grads.a.iter().map(|g| g.scaled(cfg.beta)));
        grads.extend(s.grads.b.iter().map(|g| g.scaled(cfg.beta)));
        Ok(FlatLoss {
            value: r.value + cfg.beta * s.value,
            parts: vec![r.value, s.value],
            grads,
        })
    })?;
    if let (Some(t), Some(recs)) = (trace, captured) {
        t.records.extend(recs);
    }
    let mut grads = EncoderGrads::zeros_like(params);
    backprop(params, &tokens, &loss.grads, &mut grads)?;
    Ok((loss, grads))
}

/// InfoNCE over each query's explicit negatives (no sharding), matryoshka
/// weighted, averaged over the batch's queries.
pub fn retrieval_objective(
    params: &EncoderParams<f64>,
    cfg: &TrainConfig,
    examples: &[RetrievalExample],
    retri: &[usize],
    corpus: &Corpus,
) -> Result<(FlatLoss, EncoderGrads<f64>), TrainError> {
    let n_q = retri.len();
    let k = cfg.negatives_per_query();
    let tokens = finetune_tokens(examples, retri, &[], &[], corpus);
    let vectors = encode_all(params, &tokens)?;
    let loss = mrl_loss(&vectors, &cfg.mrl_dims, &cfg.resolved_mrl_weights(), |_, v| {
        let mut at = 0;
        let queries = split_off(v, &mut at, n_q);
        let positives = split_off(v, &mut at, n_q);
        let negatives: Vec<Vec<DenseVector<f64>>> = (0..n_q).map(|_| split_off(v, &mut at, k)).collect();
        let out = info_nce_explicit(&queries, &positives, &negatives, cfg.tau, n_q as f64)?;
        let mut grads = out.grads.queries;
        grads.extend(out.grads.positives);
        for row in out.grads.negatives.into_iter().flatten() {
            grads.extend(row);
        }
        Ok(FlatLoss {
            value: out.value,
            parts: vec![out.value],
            grads,
        })
    })?;
    let mut grads = EncoderGrads::zeros_like(params);
    backprop(params, &tokens, &loss.grads, &mut grads)?;
    Ok((loss, grads))
}

/// CoSENT on one STS batch, matryoshka weighted.
pub fn sts_objective(
    params: &EncoderParams<f64>,
    cfg: &TrainConfig,
    sts: &[StsExample],
    sts_idx: &[usize],
) -> Result<(FlatLoss, EncoderGrads<f64>), TrainError> {
    let n_s = sts_idx.len();
    let labels: Vec<f64> = sts_idx.iter().map(|&i| sts[i].score).collect();
    let mut tokens: Vec<&[usize]> = sts_idx.iter().map(|&k| sts[k].a.as_slice()).collect();
    tokens.extend(sts_idx.iter().map(|&k| sts[k].b.as_slice()));
    let vectors = encode_all(params, &tokens)?;
    let loss = mrl_loss(&vectors, &cfg.mrl_dims, &cfg.resolved_mrl_weights(), |_, v| {
        let out = cosent(
            &StsBatch {
                a: v[..n_s].to_vec(),
                b: v[n_s..].to_vec(),
                labels: labels.clone(),
            },
            cfg.tau,
        )?;
        let mut grads = out.grads.a;
        grads.extend(out.grads.b);
        Ok(FlatLoss {
            value: out.value,
            parts: vec![out.value],
            grads,
        })
    })?;
    let mut grads = EncoderGrads::zeros_like(params);
    backprop(params, &tokens, &loss.grads, &mut grads)?;
    Ok((loss, grads))
}

fn check_shape(params: &EncoderParams<f64>, cfg: &TrainConfig) -> Result<(), TrainError> {
    let got = (params.vocab_size(), params.d_model(), params.dim());
    let m = &cfg.model;
    let expected = (m.vocab_size, m.d_model, m.dim);
    if got != expected {
        return Err(TrainError::ShapeMismatch { expected, got });
    }
    Ok(())
}

fn check_batch(what: &'static str, batch: usize, available: usize) -> Result<(), TrainError> {
    if available == 0 {
        return Err(TrainError::EmptyData(what));
    }
    if batch > available {
        return Err(TrainError::BatchTooLarge { what, batch, available });
    }
    Ok(())
}

fn apply_update(
    params: &mut EncoderParams<f64>,
    grads: &EncoderGrads<f64>,
    state: &mut OptimizerState<f64>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    let g = grads.tensors();
    let mut p = params.tensors_mut();
    optimizer_step(&mut p[..], &g[..], state, lr, cfg.weight_decay, &cfg.adam)?;
    Ok(())
}

fn new_optimizer(params: &EncoderParams<f64>) -> OptimizerState<f64> {
    OptimizerState::new(&[
        params.vocab_size() * params.d_model(),
        params.d_model() * params.dim(),
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutput {
    pub params: EncoderParams<f64>,
    pub metrics: RunMetrics,
    pub optimizer_steps: u64,
}

/// In-batch InfoNCE pretraining over shuffled pair batches.
pub fn pretrain_loop(cfg: &TrainConfig, pairs: &[PairExample], params: EncoderParams<f64>) -> Result<PretrainOutput, TrainError> {
    cfg.validate()?;
    check_shape(&params, cfg)?;
    check_batch("pair", cfg.pretrain_batch, pairs.len())?;
    let mut params = params;
    let mut state = new_optimizer(&params);
    let mut sampler = EpochSampler::new(pairs.len(), cfg.pretrain_batch, cfg.seed, "pretrain");
    let mut metrics = RunMetrics::default();
    for step in 0..cfg.total_steps {
        let idx = sampler.next_batch();
        let batch: Vec<&PairExample> = idx.iter().map(|&i| &pairs[i]).collect();
        let (loss, grads, (pos, neg)) = pretrain_objective(&params, cfg, &batch)?;
        let lr = cfg.warmup_lr(step);
        apply_update(&mut params, &grads, &mut state, lr, cfg)?;
        metrics.push(StepRecord {
            step,
            loss_total: loss.value,
            loss_retri: loss.value,
            loss_sts: None,
            lr,
            pos_score_mean: pos,
            neg_score_mean: neg,
            replacements: 0,
        });
    }
    Ok(PretrainOutput {
        params,
        metrics,
        optimizer_steps: state.step,
    })
}

/// Resolves retrieval records against the corpus and installs the first
/// negative window (`i = 1`) from an exact ranking under `params`.
pub fn mine_initial_negatives(
    params: &EncoderParams<f64>,
    records: &[RetrievalRecord],
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<Vec<RetrievalExample>, TrainError> {
    let tokenizer = cfg.model.tokenizer();
    let vectors = corpus.embed(params)?;
    let n = cfg.negatives_per_query();
    let (_, needed) = replacement_window(1, n, cfg.miner.skip_top);
    records
        .iter()
        .enumerate()
        .map(|(id, r)| {
            let positive_id = corpus.id_of(&r.positive).ok_or(TrainError::NotInCorpus(id, "positive"))?;
            let query_tokens = tokenize(&r.query, &tokenizer)?;
            let q = encode(params, &query_tokens)?.vector;
            let exclude = std::collections::BTreeSet::from([positive_id]);
            let ranking = rank_candidates(&q, &vectors, &exclude, needed)?;
            Ok(RetrievalExample {
                id,
                query: r.query.clone(),
                query_tokens,
                positive_id,
                state: initial_install(&ranking, n, &cfg.miner)?,
            })
        })
        .collect()
}

/// Rebuilds examples from records that already carry mined negatives. The
/// install-time score is recomputed under `params`.
pub fn examples_from_records(
    params: &EncoderParams<f64>,
    records: &[RetrievalRecord],
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<Vec<RetrievalExample>, TrainError> {
    let tokenizer = cfg.model.tokenizer();
    let want = cfg.negatives_per_query();
    records
        .iter()
        .enumerate()
        .map(|(id, r)| {
            if r.negatives.len() != want {
                return Err(TrainError::NegativeCount {
                    example: id,
                    have: r.negatives.len(),
                    want,
                });
            }
            let positive_id = corpus.id_of(&r.positive).ok_or(TrainError::NotInCorpus(id, "positive"))?;
            let ids = r
                .negatives
                .iter()
                .map(|t| corpus.id_of(t).ok_or(TrainError::NotInCorpus(id, "negative")))
                .collect::<Result<Vec<_>, _>>()?;
            let query_tokens = tokenize(&r.query, &tokenizer)?;
            let q = encode(params, &query_tokens)?.vector;
            let negs = ids
                .iter()
                .map(|&i| encode(params, &corpus.tokens[i]).map(|e| e.vector))
                .collect::<Result<Vec<_>, _>>()?;
            let score = score_negatives(&q, &negs)?;
            Ok(RetrievalExample {
                id,
                query: r.query.clone(),
                query_tokens,
                positive_id,
                state: MiningState {
                    initial_score: score,
                    last_avg_score: score,
                    replacement_index: 1,
                    n_neg: want,
                    installed_negative_ids: ids,
                },
            })
        })
        .collect()
}

/// Writes the currently installed negatives back into record form.
pub fn examples_to_records(examples: &[RetrievalExample], corpus: &Corpus) -> Vec<RetrievalRecord> {
    examples
        .iter()
        .map(|e| RetrievalRecord {
            query: e.query.clone(),
            positive: corpus.texts[e.positive_id].clone(),
            negatives: e
                .state
                .installed_negative_ids
                .iter()
                .map(|&i| corpus.texts[i].clone())
                .collect(),
        })
        .collect()
}

/// Mean positive cosine and mean installed-negative cosine over the first
/// `cfg.monitor_examples` examples under the current weights.
pub fn monitor_scores(
    params: &EncoderParams<f64>,
    examples: &[RetrievalExample],
    corpus: &Corpus,
    count: usize,
) -> Result<(f64, f64), TrainError> {
    let set = &examples[..count.min(examples.len())];
    let (mut pos, mut neg) = (0.0, 0.0);
    for ex in set {
        let q = encode(params, &ex.query_tokens)?.vector;
        let p = encode(params, &corpus.tokens[ex.positive_id])?.vector;
        pos += cosine_sim(&q, &p).map_err(EncoderError::from)?;
        let negs = ex
            .state
            .installed_negative_ids
            .iter()
            .map(|&i| encode(params, &corpus.tokens[i]).map(|e| e.vector))
            .collect::<Result<Vec<_>, _>>()?;
        neg += score_negatives(&q, &negs)?;
    }
    let n = set.len() as f64;
    Ok((pos / n, neg / n))
}

fn check_finetune_inputs(
    cfg: &TrainConfig,
    params: &EncoderParams<f64>,
    examples: &[RetrievalExample],
    sts: &[StsExample],
    corpus: &Corpus,
) -> Result<(), TrainError> {
    cfg.validate()?;
    check_shape(params, cfg)?;
    check_batch("retrieval", cfg.retrieval_batch, examples.len())?;
    check_batch("sts", cfg.sts_batch, sts.len())?;
    let want = cfg.negatives_per_query();
    for ex in examples {
        let have = ex.state.installed_negative_ids.len();
        if have != want || ex.state.n_neg != want {
            return Err(TrainError::NegativeCount {
                example: ex.id,
                have,
                want,
            });
        }
        for &id in ex.state.installed_negative_ids.iter().chain([&ex.positive_id]) {
            if id >= corpus.len() {
                return Err(MinerError::UnknownId(id).into());
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutput {
    pub params: EncoderParams<f64>,
    pub examples: Vec<RetrievalExample>,
    pub metrics: RunMetrics,
    pub ledger: Vec<LedgerRecord>,
    pub trace: Vec<TraceRecord>,
    pub mining_passes: usize,
    pub optimizer_steps: u64,
}

/// CBB fine-tuning. Each step: optional mining pass (every `check_interval`
/// steps after the first), monitor scores, then one update on the CBB
/// objective over one retrieval batch and one STS batch.
pub fn finetune_loop(
    cfg: &TrainConfig,
    examples: Vec<RetrievalExample>,
    sts: &[StsExample],
    corpus: &Corpus,
    params: EncoderParams<f64>,
) -> Result<FinetuneOutput, TrainError> {
    check_finetune_inputs(cfg, &params, &examples, sts, corpus)?;
    let mut examples = examples;
    let mut params = params;
    let mut state = new_optimizer(&params);
    let mut retri_sampler = EpochSampler::new(examples.len(), cfg.retrieval_batch, cfg.seed, "retrieval");
    let mut sts_sampler = EpochSampler::new(sts.len(), cfg.sts_batch, cfg.seed, "sts");
    let mut metrics = RunMetrics::default();
    let mut ledger = Vec::new();
    let mut trace = CbbTrace::default();
    let mut mining_passes = 0;
    for step in 0..cfg.total_steps {
        let mut replacements = 0;
        if cfg.dynamic_mining && step > 0 && step % cfg.miner.check_interval == 0 {
            let pass = run_mining_pass(&params, &mut examples, corpus, step, &cfg.miner)?;
            replacements = pass.replacements.len();
            ledger.extend(pass.ledger);
            mining_passes += 1;
        }
        let (pos, neg) = monitor_scores(&params, &examples, corpus, cfg.monitor_examples)?;
        let retri = retri_sampler.next_batch();
        let sts_idx = sts_sampler.next_batch();
        let trace_slot = if cfg.trace_shards { Some(&mut trace) } else { None };
        let (loss, grads) = cbb_objective(&params, cfg, &examples, &retri, sts, &sts_idx, corpus, step, trace_slot)?;
        let lr = cfg.warmup_lr(step);
        apply_update(&mut params, &grads, &mut state, lr, cfg)?;
        metrics.push(StepRecord {
            step,
            loss_total: loss.value,
            loss_retri: loss.parts[0],
            loss_sts: Some(loss.parts[1]),
            lr,
            pos_score_mean: pos,
            neg_score_mean: neg,
            replacements,
        });
    }
    Ok(FinetuneOutput {
        params,
        examples,
        metrics,
        ledger,
        trace: trace.records,
        mining_passes,
        optimizer_steps: state.step,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Retrieval,
    Sts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequentialOutput {
    pub params: EncoderParams<f64>,
    pub metrics: RunMetrics,
    pub tasks: Vec<Task>,
    pub optimizer_steps: u64,
}

/// Baseline: every step evaluates both task losses on the same batches a
/// CBB run would see, then updates on one task drawn at random (STS with
/// probability `sts_task_prob`). Negatives stay as installed.
/// `loss_total` is the unweighted sum retrieval + STS.
pub fn sequential_baseline_loop(
    cfg: &TrainConfig,
    examples: &[RetrievalExample],
    sts: &[StsExample],
    corpus: &Corpus,
    params: EncoderParams<f64>,
) -> Result<SequentialOutput, TrainError> {
    check_finetune_inputs(cfg, &params, examples, sts, corpus)?;
    let mut params = params;
    let mut state = new_optimizer(&params);
    let mut retri_sampler = EpochSampler::new(examples.len(), cfg.retrieval_batch, cfg.seed, "retrieval");
    let mut sts_sampler = EpochSampler::new(sts.len(), cfg.sts_batch, cfg.seed, "sts");
    let mut task_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "task", 0));
    let mut metrics = RunMetrics::default();
    let mut tasks = Vec::with_capacity(cfg.total_steps as usize);
    for step in 0..cfg.total_steps {
        let (pos, neg) = monitor_scores(&params, examples, corpus, cfg.monitor_examples)?;
        let retri = retri_sampler.next_batch();
        let sts_idx = sts_sampler.next_batch();
        let task = if task_rng.random_bool(cfg.sts_task_prob) {
            Task::Sts
        } else {
            Task::Retrieval
        };
        let (retri_loss, g_retri) = retrieval_objective(&params, cfg, examples, &retri, corpus)?;
        let (sts_loss, g_sts) = sts_objective(&params, cfg, sts, &sts_idx)?;
        let lr = cfg.warmup_lr(step);
        let grads = match task {
            Task::Retrieval => &g_retri,
            Task::Sts => &g_sts,
        };
        apply_update(&mut params, grads, &mut state, lr, cfg)?;
        tasks.push(task);
        metrics.push(StepRecord {
            step,
            loss_total: retri_loss.value + sts_loss.value,
            loss_retri: retri_loss.value,
            loss_sts: Some(sts_loss.value),
            lr,
            pos_score_mean: pos,
            neg_score_mean: neg,
            replacements: 0,
        });
    }
    Ok(SequentialOutput {
        params,
        metrics,
        tasks,
        optimizer_steps: state.step,
    })
}
