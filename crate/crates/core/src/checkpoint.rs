//! Self-describing binary checkpoint container.
//!
//! Layout: the 8-byte magic `DSRPGOCK`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then every
//! parameter group as consecutive little-endian `f64` values. The header
//! lists each group's name, shape and byte offset into the data section,
//! together with the config fingerprint and training state.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DSRPGOCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}: not a checkpoint file")]
    BadMagic(PathBuf),
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint data section is truncated")]
    Truncated,
    #[error("config fingerprint mismatch: checkpoint has {found}, run expects {expected}")]
    Fingerprint { expected: String, found: String },
    #[error("expected a {expected} checkpoint, found {found}")]
    Kind { expected: String, found: String },
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

/// SHA-256 of the canonical JSON serialization of a config.
pub fn fingerprint<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_string(config).expect("configs serialize");
    hex::encode(Sha256::digest(json.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

/// Generator state sufficient to continue a ChaCha8 stream exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &rand_chacha::ChaCha8Rng) -> Self {
        Self { seed: hex::encode(rng.get_seed()), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<rand_chacha::ChaCha8Rng> {
        use rand::SeedableRng;
        let bytes = hex::decode(&self.seed).map_err(|e| CheckpointError::Header(format!("rng seed: {e}")))?;
        let seed: [u8; 32] =
            bytes.try_into().map_err(|_| CheckpointError::Header("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self.word_pos.parse().map_err(|e| CheckpointError::Header(format!("rng position: {e}")))?;
        let mut rng = rand_chacha::ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    /// `pssi`, `psei` or `model`.
    pub kind: String,
    pub fingerprint: String,
    pub config: serde_json::Value,
    pub phase: String,
    pub epoch: usize,
    pub optimizer_step: u64,
    pub rng: Option<RngState>,
    /// Sequence-embedding normalization constants `(min, max)`.
    pub normalization: Option<(Vec<f64>, Vec<f64>)>,
    /// Free-form run state such as curves or the load manifest.
    pub meta: serde_json::Value,
    pub groups: Vec<GroupEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub groups: ParamStore,
}

impl Checkpoint {
    pub fn new<C: Serialize>(kind: &str, config: &C, phase: &str, groups: ParamStore) -> Self {
        let header = Header {
            kind: kind.to_string(),
            fingerprint: fingerprint(config),
            config: serde_json::to_value(config).expect("configs serialize"),
            phase: phase.to_string(),
            epoch: 0,
            optimizer_step: 0,
            rng: None,
            normalization: None,
            meta: serde_json::Value::Null,
            groups: Vec::new(),
        };
        Self { header, groups }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = self.header.clone();
        let mut offset = 0u64;
        header.groups = self
            .groups
            .iter()
            .map(|(name, t)| {
                let e = GroupEntry { name: name.to_string(), shape: t.shape().to_vec(), offset };
                offset += 8 * t.numel() as u64;
                e
            })
            .collect();
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.groups.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic(path.to_path_buf()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(20..20 + len).ok_or(CheckpointError::Truncated)?;
        let header: Header = serde_json::from_slice(json).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let data = &bytes[20 + len..];
        let mut groups = ParamStore::new();
        for g in &header.groups {
            let n: usize = g.shape.iter().product();
            let start = g.offset as usize;
            let raw = data.get(start..start + 8 * n).ok_or(CheckpointError::Truncated)?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(g.shape.clone(), values)
                .map_err(|e| CheckpointError::Header(format!("{}: {e}", g.name)))?;
            groups.add(g.name.clone(), t);
        }
        Ok(Self { header, groups })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes, path)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.header.kind == kind {
            Ok(())
        } else {
            Err(CheckpointError::Kind { expected: kind.to_string(), found: self.header.kind.clone() })
        }
    }

    pub fn expect_fingerprint(&self, expected: &str) -> Result<()> {
        if self.header.fingerprint == expected {
            Ok(())
        } else {
            Err(CheckpointError::Fingerprint { expected: expected.to_string(), found: self.header.fingerprint.clone() })
        }
    }

    /// Groups whose names start with `prefix.`, with the prefix removed.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let p = format!("{prefix}.");
        let mut out = ParamStore::new();
        for (name, t) in self.groups.iter() {
            if let Some(rest) = name.strip_prefix(&p) {
                out.add(rest.to_string(), t.clone());
            }
        }
        out
    }

    pub fn config<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_value(self.header.config.clone()).map_err(|e| CheckpointError::Header(format!("config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut groups = ParamStore::new();
        groups.add("a.weight", Tensor::randn(vec![3, 2], 1.0, &mut rng));
        groups.add("a.bias", Tensor::vector(vec![f64::MIN_POSITIVE, -0.0, 1e300]));
        groups.add("s", Tensor::scalar(std::f64::consts::PI));
        let mut c = Checkpoint::new("model", &serde_json::json!({"width": 3}), "finetune", groups);
        c.header.epoch = 7;
        c.header.normalization = Some((vec![0.1, -2.5], vec![0.3, 1.0 / 3.0]));
        c.header.rng = Some(RngState::capture(&rng));
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back.groups, c.groups);
        assert_eq!(back.header.normalization, c.header.normalization);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let _: Vec<u32> = (0..13).map(|_| rng.random()).collect();
        let mut resumed = RngState::capture(&rng).restore().unwrap();
        let a: Vec<u64> = (0..20).map(|_| rng.random()).collect();
        let b: Vec<u64> = (0..20).map(|_| resumed.random()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn detects_corruption_and_drift() {
        let c = sample();
        let mut bytes = c.to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 4], Path::new("x")),
            Err(CheckpointError::Truncated)
        ));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes, Path::new("x")), Err(CheckpointError::BadMagic(_))));
        let mut bytes = c.to_bytes();
        bytes[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes, Path::new("x")), Err(CheckpointError::Version(9))));
        assert!(c.expect_fingerprint(&fingerprint(&serde_json::json!({"width": 3}))).is_ok());
        assert!(matches!(
            c.expect_fingerprint(&fingerprint(&serde_json::json!({"width": 4}))),
            Err(CheckpointError::Fingerprint { .. })
        ));
        assert!(c.expect_kind("pssi").is_err());
    }

    #[test]
    fn subset_strips_prefix() {
        let c = sample();
        let s = c.subset("a");
        assert_eq!(s.len(), 2);
        assert!(s.by_name("weight").is_some());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let c = sample();
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap().to_bytes(), c.to_bytes());
    }
}
