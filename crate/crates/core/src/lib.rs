//! Contrastive text-embedding training at desk scale.
//!
//! A hashed bag-of-tokens encoder is pretrained with in-batch InfoNCE, then
//! fine-tuned with a cross-worker batch-balance objective: a sharded
//! retrieval term over mined hard negatives plus a weighted CoSENT term, in
//! one update. Installed negatives are re-mined whenever the model stops
//! finding them hard. Matryoshka prefixes of the embedding are trained jointly.
//!
//! The numeric layers ([`numeric`], [`encoder`], [`losses`], [`shard`],
//! [`optim`]) are generic over [`Scalar`]; the training pipeline runs in f64
//! and the aliases below name the concrete types it uses.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod miner;
pub mod numeric;
pub mod optim;
pub mod scalar;
pub mod shard;
pub mod synth;
pub mod trainer;

use thiserror::Error;

pub use config::{ModelConfig, TrainConfig};
pub use scalar::Scalar;

pub type Vector = numeric::DenseVector<f64>;
pub type Matrix = numeric::DenseMatrix<f64>;
pub type Params = encoder::EncoderParams<f64>;
pub type Grads = encoder::EncoderGrads<f64>;
pub type Encoder = encoder::Encoder<f64>;
pub type OptimizerState = optim::OptimizerState<f64>;
pub type StsBatch = losses::StsBatch<f64>;
pub type PairBatch = losses::PairBatch<f64>;
pub type ShardedRetrievalBatch = losses::ShardedRetrievalBatch<f64>;
pub type WorkerShard = shard::WorkerShard<f64>;

/// Any error the library can return.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Numeric(#[from] numeric::NumericError),
    #[error(transparent)]
    Encoder(#[from] encoder::EncoderError),
    #[error(transparent)]
    Loss(#[from] losses::LossError),
    #[error(transparent)]
    Shard(#[from] shard::ShardError),
    #[error(transparent)]
    Miner(#[from] miner::MinerError),
    #[error(transparent)]
    Optim(#[from] optim::OptimError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
