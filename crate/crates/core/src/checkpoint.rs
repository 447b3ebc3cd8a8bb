//! Versioned binary checkpoints.
//!
//! Layout: `b"CEMB"`, format version (u32 LE), header length (u64 LE), a JSON
//! header, then the embedding table and the projection as row-major f64 LE.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::TrainConfig;
use crate::encoder::{EncoderParams, TokenizerConfig};
use crate::numeric::DenseMatrix;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CEMB";
const PREFIX_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("checkpoint format version {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad header: {0}")]
    Header(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub tokenizer: TokenizerConfig,
    pub d_model: usize,
    pub dim: usize,
    pub mrl_dims: Vec<usize>,
    pub config: TrainConfig,
}

pub fn encode_checkpoint(params: &EncoderParams<f64>, cfg: &TrainConfig) -> Vec<u8> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        tokenizer: TokenizerConfig {
            vocab_size: params.vocab_size(),
            lowercase: cfg.model.lowercase,
        },
        d_model: params.d_model(),
        dim: params.dim(),
        mrl_dims: cfg.mrl_dims.clone(),
        config: cfg.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let n = params.num_params();
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + 8 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in params.embedding.as_slice().iter().chain(params.projection.as_slice()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(EncoderParams<f64>, TrainConfig), CheckpointError> {
    if bytes.len() < PREFIX_LEN {
        return Err(CheckpointError::ShapeMismatch(format!("file is only {} bytes", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[PREFIX_LEN..];
    if header_len > body.len() {
        return Err(CheckpointError::ShapeMismatch(format!(
            "header length {header_len} exceeds remaining {} bytes",
            body.len()
        )));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..header_len]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.format_version != version {
        return Err(CheckpointError::VersionMismatch {
            found: header.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let vocab = header.tokenizer.vocab_size;
    let n_emb = vocab * header.d_model;
    let n_proj = header.d_model * header.dim;
    let data = &body[header_len..];
    if data.len() != 8 * (n_emb + n_proj) {
        return Err(CheckpointError::ShapeMismatch(format!(
            "expected {} parameter bytes for {vocab}x{} and {}x{}, found {}",
            8 * (n_emb + n_proj),
            header.d_model,
            header.d_model,
            header.dim,
            data.len()
        )));
    }
    let shape = |e: crate::numeric::NumericError| CheckpointError::ShapeMismatch(e.to_string());
    let embedding = DenseMatrix::new(vocab, header.d_model, read_f64s(&data[..8 * n_emb])).map_err(shape)?;
    let projection = DenseMatrix::new(header.d_model, header.dim, read_f64s(&data[8 * n_emb..])).map_err(shape)?;
    let params = EncoderParams::new(embedding, projection).map_err(|e| CheckpointError::ShapeMismatch(e.to_string()))?;
    Ok((params, header.config))
}

/// Writes to a temporary file in the same directory, then renames it over `path`.
pub fn save_checkpoint(params: &EncoderParams<f64>, cfg: &TrainConfig, path: &Path) -> Result<(), CheckpointError> {
    let bytes = encode_checkpoint(params, cfg);
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderParams<f64>, TrainConfig), CheckpointError> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (EncoderParams<f64>, TrainConfig) {
        let mut cfg = TrainConfig::default();
        cfg.model.vocab_size = 32;
        cfg.model.d_model = 4;
        cfg.model.dim = 8;
        cfg.mrl_dims = vec![4, 8];
        (EncoderParams::init(32, 4, 8, 7), cfg)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (params, cfg) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &cfg, &path).unwrap();
        let (p2, c2) = load_checkpoint(&path).unwrap();
        let bits = |p: &EncoderParams<f64>| p.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p2), bits(&params));
        assert_eq!(c2, cfg);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn truncation_is_detected() {
        let (params, cfg) = setup();
        let bytes = encode_checkpoint(&params, &cfg);
        for cut in [0, 3, 10, 20, bytes.len() - 1] {
            let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, CheckpointError::ShapeMismatch(_) | CheckpointError::Header(_) | CheckpointError::BadMagic),
                "cut {cut}: {err:?}"
            );
        }
    }

    #[test]
    fn version_bump_is_rejected() {
        let (params, cfg) = setup();
        let mut bytes = encode_checkpoint(&params, &cfg);
        bytes[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(CheckpointError::VersionMismatch { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn missing_file_is_io() {
        assert!(matches!(
            load_checkpoint(Path::new("/nonexistent/model.ckpt")),
            Err(CheckpointError::Io(_))
        ));
    }
}
