//! On-disk training state. Parameter vectors are stored as base64 of their
//! little-endian bytes so a reload is bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::config::TrainConfig;
use super::trainer::CurveRow;
use crate::error::{Error, Result};
use crate::model::optim::Adam;
use crate::reward::KlController;

pub(crate) mod packed {
    use super::*;

    pub fn encode(v: &[f64]) -> String {
        let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        STANDARD.encode(bytes)
    }

    pub fn decode(s: &str) -> std::result::Result<Vec<f64>, String> {
        let bytes = STANDARD.decode(s).map_err(|e| e.to_string())?;
        if bytes.len() % 8 != 0 {
            return Err(format!("{} bytes is not a whole number of f64 values", bytes.len()));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
        let s = String::deserialize(d)?;
        decode(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    #[serde(with = "packed")]
    pub m: Vec<f64>,
    #[serde(with = "packed")]
    pub v: Vec<f64>,
}

impl From<&Adam> for AdamState {
    fn from(a: &Adam) -> Self {
        AdamState {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            step: a.step,
            m: a.m.clone(),
            v: a.v.clone(),
        }
    }
}

impl From<AdamState> for Adam {
    fn from(a: AdamState) -> Self {
        Adam {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            step: a.step,
            m: a.m,
            v: a.v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSnapshot {
    #[serde(with = "packed")]
    pub params: Vec<f64>,
    pub counter: usize,
}

/// Everything needed to continue a run. Random streams are derived from
/// `(seed, update)`, so no generator state is stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub seed: u64,
    /// RL updates completed.
    pub update: usize,
    #[serde(with = "packed")]
    pub policy: Vec<f64>,
    pub version: u64,
    #[serde(with = "packed")]
    pub reference: Vec<f64>,
    pub adam: AdamState,
    pub mask: Option<MaskSnapshot>,
    pub controller: KlController,
    pub rows: Vec<CurveRow>,
}

impl Checkpoint {
    pub fn file_name(update: usize) -> String {
        format!("step-{update}.ckpt")
    }

    /// Writes through a temporary file so an interrupted write never leaves
    /// a truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        let text = serde_json::to_string(self)?;
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

/// Checkpoints in `dir`, oldest first.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(Error::io(dir, e)),
    };
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step-"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(step) = step {
            out.push((step, path));
        }
    }
    out.sort();
    Ok(out)
}

/// Deletes all but the newest `keep` checkpoints.
pub fn prune_checkpoints(dir: &Path, keep: usize) -> Result<()> {
    let all = list_checkpoints(dir)?;
    let n = all.len().saturating_sub(keep);
    for (_, path) in &all[..n] {
        fs::remove_file(path).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packing_is_bit_exact() {
        let v = vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -3.5, f64::EPSILON];
        let back = packed::decode(&packed::encode(&v)).unwrap();
        assert_eq!(
            v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            back.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert!(packed::decode("AAA=").is_err());
    }

    #[test]
    fn pruning_keeps_newest() {
        let dir = tempfile::tempdir().unwrap();
        for s in [10, 2, 30, 20] {
            fs::write(dir.path().join(Checkpoint::file_name(s)), "x").unwrap();
        }
        fs::write(dir.path().join("curve.csv"), "x").unwrap();
        prune_checkpoints(dir.path(), 2).unwrap();
        let left: Vec<usize> = list_checkpoints(dir.path()).unwrap().into_iter().map(|(s, _)| s).collect();
        assert_eq!(left, vec![20, 30]);
        assert!(dir.path().join("curve.csv").exists());
    }
}
