//! Checkpoint directory: `params.bin` (u32 count, then per parameter a u32
//! name length, the UTF-8 name, and one serialized tensor) and
//! `manifest.json` (config, its SHA-256, step, parameter digest).

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, ParamStore};

pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    /// SHA-256 of the config's JSON encoding.
    pub config_hash: String,
    pub step: usize,
    pub param_count: usize,
    /// SHA-256 of `params.bin`.
    pub params_hash: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub manifest: CheckpointManifest,
}

fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn config_hash(cfg: &ModelConfig) -> Result<String> {
    let json = serde_json::to_vec(cfg).map_err(|e| Error::Internal(format!("config encoding: {e}")))?;
    Ok(hex_sha256(&json))
}

fn encode_params(params: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        write_tensor(&mut buf, t).expect("writing to a Vec cannot fail");
    }
    buf
}

fn decode_params(bytes: &[u8], seed: u64) -> Result<ParamStore> {
    let mut r = Cursor::new(bytes);
    let mut word = [0u8; 4];
    let mut read_u32 = |r: &mut Cursor<&[u8]>| -> Result<usize> {
        r.read_exact(&mut word)
            .map_err(|e| Error::Format(format!("truncated parameter file: {e}")))?;
        Ok(u32::from_le_bytes(word) as usize)
    };
    let n = read_u32(&mut r)?;
    let mut store = ParamStore::new(seed);
    for _ in 0..n {
        let len = read_u32(&mut r)?;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated parameter name: {e}")))?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(format!("parameter name: {e}")))?;
        store.insert(&name, read_tensor(&mut r)?)?;
    }
    if r.position() as usize != bytes.len() {
        return Err(Error::Format("trailing bytes after parameters".into()));
    }
    Ok(store)
}

pub fn save_checkpoint(dir: &Path, params: &ParamStore, cfg: &ModelConfig, step: usize) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes = encode_params(params);
    let manifest = CheckpointManifest {
        config: cfg.clone(),
        config_hash: config_hash(cfg)?,
        step,
        param_count: params.num_scalars(),
        params_hash: hex_sha256(&bytes),
        seed: params.rng_seed(),
    };
    let path = dir.join(PARAMS_FILE);
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads and verifies both hashes and the parameter layout.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&text).map_err(|e| Error::json(&path, e))?;
    if config_hash(&manifest.config)? != manifest.config_hash {
        return Err(Error::Format(format!("{}: config hash mismatch", path.display())));
    }
    let path = dir.join(PARAMS_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if hex_sha256(&bytes) != manifest.params_hash {
        return Err(Error::Format(format!("{}: parameter hash mismatch", path.display())));
    }
    let params = decode_params(&bytes, manifest.seed)?;
    let expected = super::build_model(&manifest.config, manifest.seed)?;
    let names: Vec<&str> = params.names().collect();
    if names != expected.names().collect::<Vec<_>>()
        || params.iter().zip(expected.iter()).any(|((_, a), (_, b))| a.shape() != b.shape())
    {
        return Err(Error::Format(format!(
            "{}: parameters do not match the configured model",
            path.display()
        )));
    }
    Ok(Checkpoint { params, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    #[test]
    fn roundtrip_and_tamper_detection() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::smoke();
        let p = build_model(&cfg, 4).unwrap();
        save_checkpoint(tmp.path(), &p, &cfg, 17).unwrap();
        let ck = load_checkpoint(tmp.path()).unwrap();
        assert_eq!(ck.params.to_le_bytes(), p.to_le_bytes());
        assert_eq!(ck.manifest.step, 17);

        let path = tmp.path().join(PARAMS_FILE);
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(tmp.path()), Err(Error::Format(_))));
    }
}
