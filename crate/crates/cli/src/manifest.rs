use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mrmp_core::gcn::GcnConfig;
use mrmp_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::args::{Arch, Mode, Precision};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.mrmp";

/// Everything that determines a training run, with defaults materialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    /// `synth` or a JSONL path.
    pub data: String,
    pub data_seed: u64,
    pub arch: Arch,
    pub model: GcnConfig,
    pub train: TrainConfig,
    /// Weight of the ℓ1 penalty in `l1` mode.
    pub lambda1: f64,
    /// Masked fine-tuning epochs in `mp` mode.
    pub finetune_epochs: usize,
    pub precision: Precision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    /// SHA-256 of the config JSON, hashed as a git blob.
    pub config_hash: String,
    pub seed: u64,
    pub out: PathBuf,
}

/// `sha256("blob <len>\0" ++ bytes)`, hex encoded.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(bytes);
    format!("{:x}", h.finalize())
}

impl RunConfig {
    pub fn hash(&self) -> String {
        blob_hash(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Smallest and largest trained rate.
    pub fn trained_range(&self) -> (f64, f64) {
        let r = &self.train.rates;
        (r[0], r[r.len() - 1])
    }
}

impl RunManifest {
    pub fn new(config: RunConfig, out: PathBuf) -> Self {
        RunManifest {
            config_hash: config.hash(),
            seed: config.train.seed,
            config,
            out,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let m: RunManifest =
            serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
        if m.config_hash != m.config.hash() {
            bail!("manifest {} was edited: config hash does not match", path.display());
        }
        if m.config.train.rates.is_empty() {
            bail!("manifest {} lists no rates", path.display());
        }
        Ok(m)
    }

    /// The manifest stored next to a checkpoint.
    pub fn beside(checkpoint: &Path) -> PathBuf {
        checkpoint.parent().unwrap_or(Path::new(".")).join(MANIFEST_FILE)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git() {
        // `printf 'hello\n' | git hash-object --object-format=sha256 --stdin`
        assert_eq!(
            blob_hash(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
        // empty blob
        assert_eq!(
            blob_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }

    #[test]
    fn hash_tracks_config() {
        let cfg = RunConfig {
            mode: Mode::Mrmp,
            data: "synth".into(),
            data_seed: 1,
            arch: Arch::Compact,
            model: GcnConfig::compact(10, 12, 3),
            train: TrainConfig::default(),
            lambda1: 0.0,
            finetune_epochs: 0,
            precision: Precision::F64,
        };
        let mut other = cfg.clone();
        assert_eq!(cfg.hash(), other.hash());
        other.train.seed = 1;
        assert_ne!(cfg.hash(), other.hash());
        assert_eq!(cfg.hash().len(), 64);
    }
}
