//! Checkpoint container.
//!
//! Layout: the 8-byte magic `RCNDSCK1`, a little-endian u64 manifest length,
//! the JSON manifest, then the tensor blobs. Each blob is one tensor in the
//! binary tensor format; the manifest maps names to `(offset, len)` relative
//! to the start of the blob region.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BestEpoch, EpochLog};
use crate::error::{bail, Result};
use crate::graph::ParamMap;
use crate::layers::LayerParams;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RCNDSCK1";

/// Everything needed to continue a run exactly where it stopped. Random
/// streams are derived from `(seed, epoch)`, so the seed and the next epoch
/// index are the complete RNG state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Index of the next epoch to run.
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
    pub best: Option<BestEpoch>,
    pub log: Vec<EpochLog>,
    pub params: ParamMap,
    pub velocity: ParamMap,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    epoch: usize,
    seed: u64,
    config_hash: String,
    best: Option<BestEpoch>,
    log: Vec<EpochLog>,
    tensors: Vec<Entry>,
}

fn entries<'a>(prefix: &str, map: &'a ParamMap) -> impl Iterator<Item = (String, &'a Tensor)> + 'a {
    let prefix = prefix.to_owned();
    map.iter().flat_map(move |(id, p)| {
        [
            (format!("{prefix}/{id}/weights"), &p.weights),
            (format!("{prefix}/{id}/bias"), &p.bias),
        ]
    })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blobs = Vec::new();
        let mut tensors = Vec::new();
        for (name, t) in entries("params", &self.params).chain(entries("velocity", &self.velocity)) {
            let bytes = t.to_bytes();
            tensors.push(Entry {
                name,
                offset: blobs.len() as u64,
                len: bytes.len() as u64,
            });
            blobs.extend_from_slice(&bytes);
        }
        let manifest = Manifest {
            epoch: self.epoch,
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            best: self.best.clone(),
            log: self.log.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serialization cannot fail");
        let mut out = Vec::with_capacity(16 + json.len() + blobs.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blobs);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            bail!(Decode, "not a checkpoint (bad magic or truncated header)");
        }
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let rest = &bytes[16..];
        if json_len > rest.len() as u64 {
            bail!(Decode, "manifest length {json_len} exceeds file size");
        }
        let (json, blobs) = rest.split_at(json_len as usize);
        let manifest: Manifest = serde_json::from_slice(json).map_err(|e| crate::Error::Decode(format!("checkpoint manifest: {e}")))?;

        let mut params: ParamMap = ParamMap::new();
        let mut velocity: ParamMap = ParamMap::new();
        let mut pending: std::collections::BTreeMap<(String, String), (Option<Tensor>, Option<Tensor>)> = Default::default();
        for e in &manifest.tensors {
            let end = e.offset.checked_add(e.len).filter(|&end| end <= blobs.len() as u64);
            let Some(end) = end else {
                bail!(Decode, "tensor {} lies outside the blob region", e.name);
            };
            let t = Tensor::from_bytes(&blobs[e.offset as usize..end as usize])?;
            let parts: Vec<&str> = e.name.split('/').collect();
            let [group @ ("params" | "velocity"), id, field @ ("weights" | "bias")] = parts[..] else {
                bail!(Decode, "unrecognized tensor name {}", e.name);
            };
            let slot = pending.entry((group.to_owned(), id.to_owned())).or_default();
            let target = if field == "weights" { &mut slot.0 } else { &mut slot.1 };
            if target.replace(t).is_some() {
                bail!(Decode, "duplicate tensor {}", e.name);
            }
        }
        for ((group, id), (w, b)) in pending {
            let (Some(w), Some(b)) = (w, b) else {
                bail!(Decode, "{group}/{id} is missing its weights or bias");
            };
            let p = LayerParams::new(w, b).map_err(|e| crate::Error::Decode(format!("{group}/{id}: {e}")))?;
            if group == "params" {
                params.insert(id, p);
            } else {
                velocity.insert(id, p);
            }
        }
        Ok(Checkpoint {
            epoch: manifest.epoch,
            seed: manifest.seed,
            config_hash: manifest.config_hash,
            best: manifest.best,
            log: manifest.log,
            params,
            velocity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let p = |s: u64| LayerParams::new(Tensor::gaussian(&[2, 3], 1.0, s).unwrap(), Tensor::gaussian(&[2], 1.0, s + 1).unwrap()).unwrap();
        Checkpoint {
            epoch: 3,
            seed: 42,
            config_hash: "abc".into(),
            best: Some(BestEpoch { epoch: 1, top1: 0.5 }),
            log: vec![EpochLog {
                epoch: 0,
                lr: 0.01,
                alpha: 0.3,
                train_loss_main: 1.1,
                train_loss_aux: Some(1.2),
                val_top1: 0.4,
                val_top5: 1.0,
                seconds: 0.0,
            }],
            params: ParamMap::from([("fc".into(), p(1)), ("conv1".into(), p(3))]),
            velocity: ParamMap::from([("fc".into(), p(5)), ("conv1".into(), p(7))]),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn timings_are_not_stored() {
        let mut c = sample();
        c.log[0].seconds = 12.5;
        assert_eq!(c.to_bytes(), sample().to_bytes());
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap().log[0].seconds, 0.0);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("last.ckpt");
        sample().save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), sample());
    }

    #[test]
    fn corrupt_inputs_are_decode_errors() {
        let bytes = sample().to_bytes();
        for cut in [0, 7, 15, 40, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut huge = bytes.clone();
        huge[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(Checkpoint::from_bytes(&huge).is_err());
    }
}
