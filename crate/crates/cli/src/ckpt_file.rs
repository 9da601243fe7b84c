//! Checkpoint archive: magic + version, a JSON header (state, fingerprint,
//! embedded config, tensor index, free-form metadata), raw little-endian
//! f64 payload, and a trailing SHA-256 over everything before it.
//! Save -> load -> save is byte-identical.

use a2v_core::checkpoint::{CheckpointData, CurriculumState, CHECKPOINT_VERSION};
use a2v_core::config::PipelineConfig;
use a2v_core::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"A2VCKPT\0";

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("unsupported checkpoint version {0}")]
    VersionUnsupported(u32),
    #[error("config fingerprint mismatch: checkpoint {found}, expected {expected}")]
    FingerprintMismatch { found: String, expected: String },
    #[error("corrupt archive: {0}")]
    CorruptArchive(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
struct TensorIndex {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config_fingerprint: String,
    config: PipelineConfig,
    state: CurriculumState,
    meta: BTreeMap<String, String>,
    tensors: Vec<TensorIndex>,
}

/// Atomic write: temp file in the same directory, then rename.
pub fn save_checkpoint(
    path: &Path,
    ckpt: &CheckpointData,
    config: &PipelineConfig,
    meta: &BTreeMap<String, String>,
) -> Result<(), CkptError> {
    let mut index = Vec::with_capacity(ckpt.tensors.len());
    let mut offset = 0u64;
    for (name, t) in &ckpt.tensors {
        let len = (t.numel() * 8) as u64;
        index.push(TensorIndex { name: name.clone(), shape: t.shape().to_vec(), offset, len });
        offset += len;
    }
    let header = Header {
        config_fingerprint: ckpt.config_fingerprint.clone(),
        config: config.clone(),
        state: ckpt.state.clone(),
        meta: meta.clone(),
        tensors: index,
    };
    let header_json = serde_json::to_vec(&header).expect("header serialises");

    let mut buf = Vec::with_capacity(header_json.len() + offset as usize + 64);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&ckpt.version.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for (_, t) in &ckpt.tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub data: CheckpointData,
    pub config: PipelineConfig,
    pub meta: BTreeMap<String, String>,
}

/// Verify structure + checksum and decode. `expected_fingerprint` enforces
/// config compatibility unless overridden by the caller.
pub fn load_checkpoint(
    path: &Path,
    expected_fingerprint: Option<&str>,
) -> Result<LoadedCheckpoint, CkptError> {
    let buf = fs::read(path)?;
    if buf.len() < MAGIC.len() + 4 + 8 + 32 {
        return Err(CkptError::CorruptArchive("file too short".into()));
    }
    let (body, stored_digest) = buf.split_at(buf.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_digest {
        return Err(CkptError::CorruptArchive("checksum mismatch".into()));
    }
    if &body[..8] != MAGIC {
        return Err(CkptError::CorruptArchive("bad magic".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CkptError::VersionUnsupported(version));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    if 20 + header_len > body.len() {
        return Err(CkptError::CorruptArchive("header length out of range".into()));
    }
    let header: Header = serde_json::from_slice(&body[20..20 + header_len])
        .map_err(|e| CkptError::CorruptArchive(format!("header: {}", e)))?;
    if let Some(expected) = expected_fingerprint {
        if header.config_fingerprint != expected {
            return Err(CkptError::FingerprintMismatch {
                found: header.config_fingerprint,
                expected: expected.to_string(),
            });
        }
    }
    let payload = &body[20 + header_len..];
    let mut tensors = BTreeMap::new();
    for ti in &header.tensors {
        let numel: usize = ti.shape.iter().product();
        if ti.len as usize != numel * 8 || (ti.offset + ti.len) as usize > payload.len() {
            return Err(CkptError::CorruptArchive(format!("tensor {} out of range", ti.name)));
        }
        let bytes = &payload[ti.offset as usize..(ti.offset + ti.len) as usize];
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(ti.name.clone(), Tensor::from_vec(&ti.shape, data));
    }
    Ok(LoadedCheckpoint {
        data: CheckpointData {
            version,
            config_fingerprint: header.config_fingerprint,
            state: header.state,
            tensors,
        },
        config: header.config,
        meta: header.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use a2v_core::checkpoint::config_fingerprint;

    fn sample_ckpt() -> (CheckpointData, PipelineConfig) {
        let cfg = PipelineConfig::default();
        let mut tensors = BTreeMap::new();
        tensors.insert("gen.a".to_string(), Tensor::from_vec(&[2, 2], vec![1.5, -2.25, 0.0, 7.0]));
        tensors.insert("opt.gen.t".to_string(), Tensor::scalar(3.0));
        let data = CheckpointData {
            version: CHECKPOINT_VERSION,
            config_fingerprint: config_fingerprint(&cfg),
            state: CurriculumState {
                phase: 2,
                epoch: 7,
                phase_start_epoch: 5,
                active_losses: vec!["gan_frame".into()],
                loss_history: [("pl".to_string(), vec![1.0, 0.5])].into_iter().collect(),
                rng_seed: 42,
                halted: false,
            },
            tensors,
        };
        (data, cfg)
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (data, cfg) = sample_ckpt();
        let p1 = dir.path().join("a.a2v");
        save_checkpoint(&p1, &data, &cfg, &BTreeMap::new()).unwrap();
        let loaded = load_checkpoint(&p1, Some(&data.config_fingerprint)).unwrap();
        assert_eq!(loaded.data.state, data.state);
        for (k, v) in &data.tensors {
            assert_eq!(v, &loaded.data.tensors[k]);
        }
        let p2 = dir.path().join("b.a2v");
        save_checkpoint(&p2, &loaded.data, &loaded.config, &loaded.meta).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn fingerprint_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let (data, cfg) = sample_ckpt();
        let p = dir.path().join("a.a2v");
        save_checkpoint(&p, &data, &cfg, &BTreeMap::new()).unwrap();
        let mut other = cfg.clone();
        other.train.lr = 0.123;
        let err = load_checkpoint(&p, Some(&config_fingerprint(&other))).unwrap_err();
        assert!(matches!(err, CkptError::FingerprintMismatch { .. }));
        // override: no expectation given
        assert!(load_checkpoint(&p, None).is_ok());
    }

    #[test]
    fn truncated_and_tampered_archives_fail() {
        let dir = tempfile::tempdir().unwrap();
        let (data, cfg) = sample_ckpt();
        let p = dir.path().join("a.a2v");
        save_checkpoint(&p, &data, &cfg, &BTreeMap::new()).unwrap();
        let bytes = fs::read(&p).unwrap();

        let t = dir.path().join("trunc.a2v");
        fs::write(&t, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load_checkpoint(&t, None), Err(CkptError::CorruptArchive(_))));

        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0xFF;
        let f = dir.path().join("flip.a2v");
        fs::write(&f, &flipped).unwrap();
        assert!(matches!(load_checkpoint(&f, None), Err(CkptError::CorruptArchive(_))));
    }

    #[test]
    fn future_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (data, cfg) = sample_ckpt();
        let p = dir.path().join("a.a2v");
        save_checkpoint(&p, &data, &cfg, &BTreeMap::new()).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[8] = 99; // bump version field
        let body_len = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&digest);
        let v = dir.path().join("v.a2v");
        fs::write(&v, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&v, None), Err(CkptError::VersionUnsupported(99))));
    }
}
