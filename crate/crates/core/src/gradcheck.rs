//! End-to-end gradient checks: each training objective is differentiated
//! with respect to every encoder parameter and compared with central
//! differences, through tokens, pooling, projection and the matryoshka
//! prefixes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::TrainConfig;
use crate::encoder::EncoderParams;
use crate::miner::{Corpus, MiningState, RetrievalExample};
use crate::numeric::{check_gradient, finite_diff_grad_slice, GradCheckReport};
use crate::trainer::{cbb_objective, pretrain_objective, sts_objective, PairExample, StsExample, TrainError};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// In-batch InfoNCE used for pretraining.
    InBatchInfoNce,
    Cosent,
    /// Sharded retrieval term plus weighted CoSENT.
    Cbb,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Objective::InBatchInfoNce, Objective::Cosent, Objective::Cbb];

    pub fn name(self) -> &'static str {
        match self {
            Objective::InBatchInfoNce => "info_nce",
            Objective::Cosent => "cosent",
            Objective::Cbb => "cbb",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckCase {
    pub objective: Objective,
    pub seed: u64,
    pub n_workers: usize,
    pub max_relative_error: f64,
    pub worst_index: usize,
}

const VOCAB: usize = 12;
const D_MODEL: usize = 4;
const DIM: usize = 6;

fn tokens(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let len = rng.random_range(1..=4);
    (0..len).map(|_| rng.random_range(0..VOCAB)).collect()
}

fn small_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model.vocab_size = VOCAB;
    cfg.model.d_model = D_MODEL;
    cfg.model.dim = DIM;
    cfg.mrl_dims = vec![2, 4, DIM];
    cfg.mrl_weights = Some(vec![0.5, 0.3, 0.2]);
    cfg.n_workers = [1, 2, 4][seed as usize % 3];
    cfg.n_neg = 2;
    // keeps every term away from saturation so central differences stay above roundoff
    cfg.tau = 0.2;
    cfg.seed = seed;
    cfg
}

/// Runs one objective on a small random problem and compares its analytic
/// gradient with central differences of step `h`.
pub fn check_objective(objective: Objective, seed: u64, h: f64) -> Result<GradCheckCase, TrainError> {
    let cfg = small_config(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a09_e667_f3bc_c908);
    let params = EncoderParams::<f64>::init(VOCAB, D_MODEL, DIM, seed);

    let pairs: Vec<PairExample> = (0..3)
        .map(|_| PairExample {
            query: tokens(&mut rng),
            passage: tokens(&mut rng),
        })
        .collect();
    let sts: Vec<StsExample> = (0..4)
        .map(|_| StsExample {
            a: tokens(&mut rng),
            b: tokens(&mut rng),
            score: rng.random_range(0..4) as f64,
        })
        .collect();
    let k = cfg.negatives_per_query();
    let corpus_tokens: Vec<Vec<usize>> = (0..2 + 2 * k).map(|_| tokens(&mut rng)).collect();
    let corpus = Corpus {
        texts: (0..corpus_tokens.len()).map(|i| format!("c{i}")).collect(),
        tokens: corpus_tokens,
    };
    let examples: Vec<RetrievalExample> = (0..2)
        .map(|i| RetrievalExample {
            id: i,
            query: format!("q{i}"),
            query_tokens: tokens(&mut rng),
            positive_id: i,
            state: MiningState {
                initial_score: 0.0,
                last_avg_score: 0.0,
                replacement_index: 1,
                n_neg: k,
                installed_negative_ids: (0..k).map(|j| 2 + i * k + j).collect(),
            },
        })
        .collect();
    let sts_idx: Vec<usize> = (0..sts.len()).collect();
    let retri: Vec<usize> = vec![0, 1];

    let eval = |p: &EncoderParams<f64>| -> Result<(f64, Vec<f64>), TrainError> {
        match objective {
            Objective::InBatchInfoNce => {
                let batch: Vec<&PairExample> = pairs.iter().collect();
                let (loss, grads, _) = pretrain_objective(p, &cfg, &batch)?;
                Ok((loss.value, grads.to_flat()))
            }
            Objective::Cosent => {
                let (loss, grads) = sts_objective(p, &cfg, &sts, &sts_idx)?;
                Ok((loss.value, grads.to_flat()))
            }
            Objective::Cbb => {
                let (loss, grads) = cbb_objective(p, &cfg, &examples, &retri, &sts, &sts_idx, &corpus, 0, None)?;
                Ok((loss.value, grads.to_flat()))
            }
        }
    };

    let (_, analytic) = eval(&params)?;
    let mut probe = params.clone();
    let numeric = finite_diff_grad_slice(
        |x: &[f64]| {
            probe.set_flat(x);
            eval(&probe).map_or(f64::NAN, |(v, _)| v)
        },
        &params.to_flat(),
        h,
    )
    .map_err(crate::encoder::EncoderError::from)?;
    let GradCheckReport {
        max_relative_error,
        worst_index,
        ..
    } = check_gradient(&analytic, &numeric, DEFAULT_TOLERANCE).map_err(crate::encoder::EncoderError::from)?;
    Ok(GradCheckCase {
        objective,
        seed,
        n_workers: cfg.n_workers,
        max_relative_error,
        worst_index,
    })
}

/// Every objective over seeds `0..n_seeds`.
pub fn gradient_suite(n_seeds: u64, h: f64) -> Result<Vec<GradCheckCase>, TrainError> {
    let mut out = Vec::new();
    for objective in Objective::ALL {
        for seed in 0..n_seeds {
            out.push(check_objective(objective, seed, h)?);
        }
    }
    Ok(out)
}
