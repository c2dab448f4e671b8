//! Checkpoint directories: `manifest.json` describing every tensor plus a
//! flat `tensors.bin` of little-endian f32 values in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::Moments;
use super::trainer::{EpochRecord, TrainState};
use crate::autodiff::DiffArray;
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";
const FORMAT_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into `tensors.bin`.
    offset: usize,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: u64,
    epoch: usize,
    step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    config_digest: String,
    split_digest: String,
    epoch: usize,
    step_in_epoch: usize,
    rng: RngState,
    loss_sum: f64,
    loss_count: usize,
    best_val_auc: Option<f64>,
    best_epoch: Option<usize>,
    /// Per-parameter optimizer step counts, in parameter order.
    optimizer_steps: Vec<u64>,
    history: Vec<EpochRecord>,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    /// Resolved experiment configuration the state was trained under.
    pub config: serde_json::Value,
    pub config_digest: String,
    pub split_digest: String,
}

impl Checkpoint {
    /// Refuses a checkpoint produced under another configuration or split.
    pub fn verify_digests(&self, config_digest: &str, split_digest: &str) -> Result<()> {
        if self.config_digest != config_digest {
            return Err(Error::Digest(format!(
                "checkpoint was trained under config {} but the current config is {}",
                self.config_digest, config_digest
            )));
        }
        self.verify_split(split_digest)
    }

    pub fn verify_split(&self, split_digest: &str) -> Result<()> {
        if self.split_digest != split_digest {
            return Err(Error::Digest(format!(
                "checkpoint was trained on split {} but the supplied split file is {}",
                self.split_digest, split_digest
            )));
        }
        Ok(())
    }
}

fn f32_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let st = &ckpt.state;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: String, shape: &[usize], data: &[f32]| {
        let bytes = f32_bytes(data);
        tensors.push(TensorEntry { name, shape: shape.to_vec(), offset: blob.len(), sha256: sha256_hex(&bytes) });
        blob.extend_from_slice(&bytes);
    };
    for (name, arr) in st.params.iter() {
        push(format!("param/{name}"), arr.shape(), arr.data());
    }
    for ((name, arr), m) in st.params.iter().zip(&st.moments) {
        push(format!("adam_m/{name}"), arr.shape(), &m.m);
        push(format!("adam_v/{name}"), arr.shape(), &m.v);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config_digest: ckpt.config_digest.clone(),
        split_digest: ckpt.split_digest.clone(),
        epoch: st.epoch,
        step_in_epoch: st.step,
        rng: RngState { seed: st.seed, epoch: st.epoch, step: st.step },
        loss_sum: st.loss_sum,
        loss_count: st.loss_count,
        best_val_auc: st.best_val_auc,
        best_epoch: st.best_epoch,
        optimizer_steps: st.moments.iter().map(|m| m.t).collect(),
        history: st.history.clone(),
        config: ckpt.config.clone(),
        tensors,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises") + "\n";
    let bin = dir.join(TENSORS_FILE);
    std::fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
    let man = dir.join(MANIFEST_FILE);
    std::fs::write(&man, json).map_err(|e| Error::io(&man, e))
}

fn read_tensor(blob: &[u8], t: &TensorEntry) -> Result<Vec<f32>> {
    let len: usize = t.shape.iter().product::<usize>() * 4;
    let bytes = blob
        .get(t.offset..t.offset + len)
        .ok_or_else(|| Error::Checksum(format!("{} (truncated tensors.bin)", t.name)))?;
    if sha256_hex(bytes) != t.sha256 {
        return Err(Error::Checksum(t.name.clone()));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Loads and verifies every tensor checksum. Digest checks against the
/// current run are the caller's job ([`Checkpoint::verify_digests`]).
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let man_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
    let man: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Parse { line: e.line(), msg: format!("{}: {e}", man_path.display()) })?;
    if man.format_version != FORMAT_VERSION {
        return Err(Error::Config(format!("unsupported checkpoint format {}", man.format_version)));
    }
    let bin_path = dir.join(TENSORS_FILE);
    let blob = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;

    let mut params = ParamStore::new();
    let mut m_parts = Vec::new();
    let mut v_parts = Vec::new();
    for t in &man.tensors {
        let data = read_tensor(&blob, t)?;
        if let Some(name) = t.name.strip_prefix("param/") {
            params.insert(name, DiffArray::new(t.shape.clone(), data)?)?;
        } else if let Some(name) = t.name.strip_prefix("adam_m/") {
            m_parts.push((name.to_string(), data));
        } else if let Some(name) = t.name.strip_prefix("adam_v/") {
            v_parts.push((name.to_string(), data));
        } else {
            return Err(Error::Config(format!("unexpected tensor `{}` in checkpoint", t.name)));
        }
    }
    let n = params.len();
    if m_parts.len() != n || v_parts.len() != n || man.optimizer_steps.len() != n {
        return Err(Error::Config("optimizer state does not cover every parameter".into()));
    }
    let mut moments = Vec::with_capacity(n);
    for (i, name) in params.names().iter().enumerate() {
        let (mn, m) = std::mem::take(&mut m_parts[i]);
        let (vn, v) = std::mem::take(&mut v_parts[i]);
        if &mn != name || &vn != name {
            return Err(Error::Config(format!("optimizer state out of order at `{name}`")));
        }
        moments.push(Moments { m, v, t: man.optimizer_steps[i] });
    }
    Ok(Checkpoint {
        state: TrainState {
            seed: man.rng.seed,
            params,
            moments,
            epoch: man.epoch,
            step: man.step_in_epoch,
            loss_sum: man.loss_sum,
            loss_count: man.loss_count,
            best_val_auc: man.best_val_auc,
            best_epoch: man.best_epoch,
            history: man.history,
        },
        config: man.config,
        config_digest: man.config_digest,
        split_digest: man.split_digest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("a.w", DiffArray::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.25]).unwrap()).unwrap();
        params.insert("b", DiffArray::new(vec![3], vec![0.1, 0.2, f32::MIN_POSITIVE]).unwrap()).unwrap();
        let mut state = TrainState::fresh(params, 17);
        state.moments[0].m[1] = 0.25;
        state.moments[1].t = 4;
        state.epoch = 2;
        state.step = 1;
        state.best_val_auc = Some(0.8125);
        Checkpoint {
            state,
            config: serde_json::json!({"seed": 17, "model": {"preset": "tiny"}}),
            config_digest: "c0ffee".into(),
            split_digest: "5p1it".into(),
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let ck = sample();
        save_checkpoint(&a, &ck).unwrap();
        let back = load_checkpoint(&a).unwrap();
        assert_eq!(back, ck);
        save_checkpoint(&b, &back).unwrap();
        for f in [MANIFEST_FILE, TENSORS_FILE] {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        }
    }

    #[test]
    fn tensors_bin_is_little_endian_f32_in_manifest_order() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &sample()).unwrap();
        let blob = std::fs::read(dir.path().join(TENSORS_FILE)).unwrap();
        assert_eq!(&blob[..4], &1.0f32.to_le_bytes());
        assert_eq!(&blob[16..20], &0.1f32.to_le_bytes());
        // 7 params, then m and v for each.
        assert_eq!(blob.len(), 3 * 7 * 4);
    }

    #[test]
    fn flipped_byte_fails_the_checksum() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &sample()).unwrap();
        let path = dir.path().join(TENSORS_FILE);
        let mut blob = std::fs::read(&path).unwrap();
        blob[5] ^= 0x01;
        std::fs::write(&path, blob).unwrap();
        match load_checkpoint(dir.path()) {
            Err(Error::Checksum(name)) => assert_eq!(name, "param/a.w"),
            other => panic!("expected checksum failure, got {other:?}"),
        }
    }

    #[test]
    fn digest_mismatch_is_refused() {
        let ck = sample();
        assert!(ck.verify_digests("c0ffee", "5p1it").is_ok());
        assert!(matches!(ck.verify_digests("c0ffee", "other"), Err(Error::Digest(_))));
        assert!(matches!(ck.verify_digests("x", "5p1it"), Err(Error::Digest(_))));
        assert_eq!(Error::Digest(String::new()).exit_code(), 6);
    }
}
