//! Toy text encoder: hashing tokenizer, embedding table, mean pooling, linear
//! projection and L2 normalization, with an exact analytic backward pass and
//! matryoshka prefix heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{axpy, dot, norm, DenseMatrix, DenseVector, NumericError};
use crate::scalar::Scalar;

/// Pre-normalization norms below this are rejected.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("text is empty after trimming whitespace")]
    EmptyText,
    #[error("token sequence is empty")]
    NoTokens,
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenIdOutOfRange { id: usize, vocab_size: usize },
    #[error("vector norm {0:e} too small to normalize")]
    DegenerateNorm(f64),
    #[error("invalid prefix dimension {dim} (full dimension {full})")]
    InvalidDim { dim: usize, full: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid tokenizer config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub vocab_size: usize,
    pub lowercase: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32768,
            lowercase: true,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.vocab_size < 2 {
            return Err(EncoderError::InvalidConfig(format!(
                "vocab_size must be at least 2, got {}",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

// FNV-1a, 64 bit. Stable across platforms and toolchains.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Whitespace split followed by a stable hash of each token into `vocab_size` buckets.
pub fn tokenize(text: &str, cfg: &TokenizerConfig) -> Result<Vec<usize>, EncoderError> {
    cfg.validate()?;
    if text.trim().is_empty() {
        return Err(EncoderError::EmptyText);
    }
    let buckets = cfg.vocab_size as u64;
    Ok(text
        .split_whitespace()
        .map(|tok| {
            let h = if cfg.lowercase {
                fnv1a(tok.to_lowercase().as_bytes())
            } else {
                fnv1a(tok.as_bytes())
            };
            (h % buckets) as usize
        })
        .collect())
}

/// Embedding table (`vocab_size × d_model`) and projection (`d_model × dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub embedding: DenseMatrix<T>,
    pub projection: DenseMatrix<T>,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn new(embedding: DenseMatrix<T>, projection: DenseMatrix<T>) -> Result<Self, EncoderError> {
        if embedding.cols() != projection.rows() {
            return Err(EncoderError::DimensionMismatch {
                expected: embedding.cols(),
                got: projection.rows(),
            });
        }
        Ok(Self {
            embedding,
            projection,
        })
    }

    /// Gaussian init: unit-variance embeddings, projection scaled by `1/sqrt(d_model)`.
    pub fn init(vocab_size: usize, d_model: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).expect("valid normal");
        let embedding = DenseMatrix::from_fn(vocab_size, d_model, |_, _| T::lit(unit.sample(&mut rng)));
        let scale = 1.0 / (d_model as f64).sqrt();
        let projection =
            DenseMatrix::from_fn(d_model, dim, |_, _| T::lit(unit.sample(&mut rng) * scale));
        Self {
            embedding,
            projection,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn d_model(&self) -> usize {
        self.embedding.cols()
    }

    pub fn dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn num_params(&self) -> usize {
        self.embedding.as_slice().len() + self.projection.as_slice().len()
    }

    /// Flat copy of all parameters, embedding first.
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = self.embedding.as_slice().to_vec();
        out.extend_from_slice(self.projection.as_slice());
        out
    }

    pub fn set_flat(&mut self, flat: &[T]) {
        let n = self.embedding.as_slice().len();
        self.embedding.as_mut_slice().copy_from_slice(&flat[..n]);
        self.projection.as_mut_slice().copy_from_slice(&flat[n..]);
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut [T]; 2] {
        [self.embedding.as_mut_slice(), self.projection.as_mut_slice()]
    }
}

/// Dense gradient buffers with the same shapes as [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads<T> {
    pub embedding: DenseMatrix<T>,
    pub projection: DenseMatrix<T>,
}

impl<T: Scalar> EncoderGrads<T> {
    pub fn zeros_like(params: &EncoderParams<T>) -> Self {
        Self {
            embedding: DenseMatrix::zeros(params.vocab_size(), params.d_model()),
            projection: DenseMatrix::zeros(params.d_model(), params.dim()),
        }
    }

    pub fn clear(&mut self) {
        self.embedding.fill_zero();
        self.projection.fill_zero();
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut out = self.embedding.as_slice().to_vec();
        out.extend_from_slice(self.projection.as_slice());
        out
    }

    pub fn is_zero(&self) -> bool {
        self.embedding
            .as_slice()
            .iter()
            .chain(self.projection.as_slice())
            .all(|v| *v == T::zero())
    }

    pub(crate) fn tensors(&self) -> [&[T]; 2] {
        [self.embedding.as_slice(), self.projection.as_slice()]
    }
}

/// Unit-norm encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedText<T> {
    pub vector: DenseVector<T>,
    pub token_count: usize,
}

fn check_tokens<T: Scalar>(params: &EncoderParams<T>, tokens: &[usize]) -> Result<(), EncoderError> {
    if tokens.is_empty() {
        return Err(EncoderError::NoTokens);
    }
    let vocab_size = params.vocab_size();
    if let Some(&id) = tokens.iter().find(|&&t| t >= vocab_size) {
        return Err(EncoderError::TokenIdOutOfRange { id, vocab_size });
    }
    Ok(())
}

fn mean_pool<T: Scalar>(params: &EncoderParams<T>, tokens: &[usize]) -> Vec<T> {
    let mut pooled = vec![T::zero(); params.d_model()];
    for &t in tokens {
        for (p, &e) in pooled.iter_mut().zip(params.embedding.row(t)) {
            *p += e;
        }
    }
    let inv = T::one() / T::from_usize_lossy(tokens.len());
    pooled.iter_mut().for_each(|p| *p *= inv);
    pooled
}

struct Forward<T> {
    pooled: Vec<T>,
    projected_norm: T,
    unit: Vec<T>,
}

fn forward<T: Scalar>(params: &EncoderParams<T>, tokens: &[usize]) -> Result<Forward<T>, EncoderError> {
    check_tokens(params, tokens)?;
    let pooled = mean_pool(params, tokens);
    let mut z = params.projection.transpose_mul(&pooled);
    let n = norm(&z);
    if !(n.as_f64() >= DEGENERATE_NORM) {
        return Err(EncoderError::DegenerateNorm(n.as_f64()));
    }
    z.iter_mut().for_each(|v| *v /= n);
    Ok(Forward {
        pooled,
        projected_norm: n,
        unit: z,
    })
}

/// embed → mean-pool → project → L2-normalize.
pub fn encode<T: Scalar>(params: &EncoderParams<T>, tokens: &[usize]) -> Result<EncodedText<T>, EncoderError> {
    let fwd = forward(params, tokens)?;
    Ok(EncodedText {
        vector: DenseVector::new(fwd.unit)?,
        token_count: tokens.len(),
    })
}

/// Accumulates `∂(upstream · encode(tokens)) / ∂params` into `grads`.
pub fn accumulate_backward<T: Scalar>(
    params: &EncoderParams<T>,
    tokens: &[usize],
    upstream: &[T],
    grads: &mut EncoderGrads<T>,
) -> Result<(), EncoderError> {
    if upstream.len() != params.dim() {
        return Err(EncoderError::DimensionMismatch {
            expected: params.dim(),
            got: upstream.len(),
        });
    }
    if upstream.iter().all(|g| *g == T::zero()) {
        return check_tokens(params, tokens);
    }
    let fwd = forward(params, tokens)?;
    // Through the normalization: (I - e eᵀ) g / ‖z‖.
    let radial = dot(&fwd.unit, upstream);
    let inv_n = T::one() / fwd.projected_norm;
    let g_z: Vec<T> = upstream
        .iter()
        .zip(&fwd.unit)
        .map(|(&g, &e)| (g - e * radial) * inv_n)
        .collect();

    for (k, &hk) in fwd.pooled.iter().enumerate() {
        axpy(hk, &g_z, grads.projection.row_mut(k));
    }
    let g_h = params.projection.mul(&g_z);
    let share = T::one() / T::from_usize_lossy(tokens.len());
    for &t in tokens {
        axpy(share, &g_h, grads.embedding.row_mut(t));
    }
    Ok(())
}

/// Parameter gradients of `upstream · encode(tokens)`.
pub fn encode_backward<T: Scalar>(
    params: &EncoderParams<T>,
    tokens: &[usize],
    upstream: &DenseVector<T>,
) -> Result<EncoderGrads<T>, EncoderError> {
    let mut grads = EncoderGrads::zeros_like(params);
    accumulate_backward(params, tokens, upstream.as_slice(), &mut grads)?;
    Ok(grads)
}

/// First `d` coordinates renormalized to unit length. `d == dim` is the identity.
pub fn prefix_normalize<T: Scalar>(v: &DenseVector<T>, d: usize) -> Result<DenseVector<T>, EncoderError> {
    let full = v.dim();
    if d == 0 || d > full {
        return Err(EncoderError::InvalidDim { dim: d, full });
    }
    if d == full {
        return Ok(v.clone());
    }
    let head = &v.as_slice()[..d];
    let n = norm(head);
    if !(n.as_f64() >= DEGENERATE_NORM) {
        return Err(EncoderError::DegenerateNorm(n.as_f64()));
    }
    Ok(DenseVector::from_raw(head.iter().map(|&x| x / n).collect()))
}

/// Matryoshka prefix of an encoding; `d` must be one of the configured dims.
pub fn encode_prefix<T: Scalar>(
    e: &EncodedText<T>,
    d: usize,
    mrl_dims: &[usize],
) -> Result<DenseVector<T>, EncoderError> {
    if !mrl_dims.contains(&d) {
        return Err(EncoderError::InvalidDim {
            dim: d,
            full: e.vector.dim(),
        });
    }
    prefix_normalize(&e.vector, d)
}

/// Pulls a gradient on `prefix_normalize(v, d)` back to a gradient on `v`.
pub fn prefix_backward<T: Scalar>(v: &[T], d: usize, upstream: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); v.len()];
    if d == v.len() {
        out.copy_from_slice(upstream);
        return out;
    }
    let head = &v[..d];
    let n = norm(head);
    let inv = T::one() / n;
    let radial = head
        .iter()
        .zip(upstream)
        .fold(T::zero(), |acc, (&x, &g)| acc + x * inv * g);
    for k in 0..d {
        out[k] = (upstream[k] - head[k] * inv * radial) * inv;
    }
    out
}

/// Tokenizer, parameters and matryoshka dims bundled for text-level use.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub tokenizer: TokenizerConfig,
    pub params: EncoderParams<T>,
    pub mrl_dims: Vec<usize>,
}

impl<T: Scalar> Encoder<T> {
    pub fn embed(&self, text: &str) -> Result<EncodedText<T>, EncoderError> {
        let tokens = tokenize(text, &self.tokenizer)?;
        encode(&self.params, &tokens)
    }

    pub fn embed_all(&self, texts: &[String]) -> Result<Vec<DenseVector<T>>, EncoderError> {
        texts.iter().map(|t| self.embed(t).map(|e| e.vector)).collect()
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }
}
