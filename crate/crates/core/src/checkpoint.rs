//! Checkpoints: architecture, raw and averaged weights, the noise schedule
//! and normalization table, persisted as a JSON sidecar plus a binary weight
//! blob whose SHA-256 hash is verified on load.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cascade::{PhaseSpec, Variant};
use crate::data::NormalizationTable;
use crate::diffusion::NoiseSchedule;
use crate::error::{CoreError, Result};
use crate::network::nn::unet::{UNet, UNetConfig};
use crate::network::nn::ParamStore;

pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained phase model: everything needed to sample without the original
/// run configuration.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub unet: UNetConfig,
    pub phase: PhaseSpec,
    pub variant: Variant,
    pub schedule: NoiseSchedule,
    pub normalization: NormalizationTable,
    pub train_step: u64,
    pub params: ParamStore<f32>,
    pub ema_params: ParamStore<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the weight blob.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    unet: UNetConfig,
    phase: PhaseSpec,
    variant: Variant,
    schedule: NoiseSchedule,
    normalization: NormalizationTable,
    train_step: u64,
    tensors: Vec<TensorMeta>,
    /// SHA-256 of the `.bin` payload, hex.
    content_hash: String,
}

fn with_ext(path: &Path, ext: &str) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(ext);
    PathBuf::from(p)
}

fn store_tensors(ps: &ParamStore<f32>, prefix: &str, blob: &mut Vec<u8>, metas: &mut Vec<TensorMeta>) {
    for id in ps.ids() {
        let v = ps.value(id);
        metas.push(TensorMeta {
            name: format!("{prefix}/{}", ps.name(id)),
            shape: v.shape().to_vec(),
            offset: blob.len() / 4,
        });
        for &x in v.iter() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
}

impl Checkpoint {
    /// Instantiate the network with either the raw or averaged weights.
    pub fn instantiate(&self, use_ema: bool) -> Result<(UNet, ParamStore<f32>)> {
        let mut ps = ParamStore::new();
        let net = UNet::build(&self.unet, &mut ps, 0)?;
        let src = if use_ema { &self.ema_params } else { &self.params };
        if src.len() != ps.len() {
            return Err(CoreError::config(format!(
                "checkpoint has {} tensors, architecture expects {}",
                src.len(),
                ps.len()
            )));
        }
        for (dst_id, src_id) in ps.ids().zip(src.ids()).collect::<Vec<_>>() {
            if ps.name(dst_id) != src.name(src_id) {
                return Err(CoreError::config(format!(
                    "checkpoint tensor '{}' does not match architecture tensor '{}'",
                    src.name(src_id),
                    ps.name(dst_id)
                )));
            }
            ps.value_mut(dst_id).assign(src.value(src_id));
        }
        Ok((net, ps))
    }

    /// Hash of the serialized weight payload.
    pub fn content_hash(&self) -> String {
        let mut blob = Vec::new();
        let mut metas = Vec::new();
        store_tensors(&self.params, "raw", &mut blob, &mut metas);
        store_tensors(&self.ema_params, "ema", &mut blob, &mut metas);
        hex_digest(&blob)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        store_tensors(&self.params, "raw", &mut blob, &mut tensors);
        store_tensors(&self.ema_params, "ema", &mut blob, &mut tensors);
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_VERSION,
            unet: self.unet.clone(),
            phase: self.phase.clone(),
            variant: self.variant,
            schedule: self.schedule.clone(),
            normalization: self.normalization.clone(),
            train_step: self.train_step,
            tensors,
            content_hash: hex_digest(&blob),
        };
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
            }
        }
        let meta_path = with_ext(path, ".ckpt.meta");
        let json = serde_json::to_string_pretty(&meta)
            .map_err(|e| CoreError::format(&meta_path, e.to_string()))?;
        fs::write(&meta_path, json).map_err(|e| CoreError::io(&meta_path, e))?;
        let bin_path = with_ext(path, ".ckpt.bin");
        fs::write(&bin_path, &blob).map_err(|e| CoreError::io(&bin_path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta_path = with_ext(path, ".ckpt.meta");
        let text = fs::read_to_string(&meta_path).map_err(|e| CoreError::io(&meta_path, e))?;
        let meta: CheckpointMeta =
            serde_json::from_str(&text).map_err(|e| CoreError::format(&meta_path, e.to_string()))?;
        if meta.format_version != CHECKPOINT_VERSION {
            return Err(CoreError::format(
                &meta_path,
                format!("format version {}, expected {CHECKPOINT_VERSION}", meta.format_version),
            ));
        }
        let bin_path = with_ext(path, ".ckpt.bin");
        let mut blob = Vec::new();
        fs::File::open(&bin_path)
            .map_err(|e| CoreError::io(&bin_path, e))?
            .read_to_end(&mut blob)
            .map_err(|e| CoreError::io(&bin_path, e))?;
        if hex_digest(&blob) != meta.content_hash {
            return Err(CoreError::format(&bin_path, "content hash mismatch"));
        }

        let mut params = ParamStore::new();
        let mut ema_params = ParamStore::new();
        let n_total = blob.len() / 4;
        for tm in &meta.tensors {
            let len: usize = tm.shape.iter().product();
            if tm.offset + len > n_total {
                return Err(CoreError::format(&bin_path, format!("tensor '{}' out of range", tm.name)));
            }
            let mut vals = Vec::with_capacity(len);
            for k in 0..len {
                let byte = (tm.offset + k) * 4;
                vals.push(f32::from_le_bytes([
                    blob[byte],
                    blob[byte + 1],
                    blob[byte + 2],
                    blob[byte + 3],
                ]));
            }
            let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&tm.shape), vals)
                .map_err(|e| CoreError::format(&bin_path, e.to_string()))?;
            if let Some(name) = tm.name.strip_prefix("raw/") {
                params.register(name, arr);
            } else if let Some(name) = tm.name.strip_prefix("ema/") {
                ema_params.register(name, arr);
            } else {
                return Err(CoreError::format(&bin_path, format!("unknown tensor group in '{}'", tm.name)));
            }
        }
        Ok(Checkpoint {
            unet: meta.unet,
            phase: meta.phase,
            variant: meta.variant,
            schedule: meta.schedule,
            normalization: meta.normalization,
            train_step: meta.train_step,
            params,
            ema_params,
        })
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let d = h.finalize();
    let mut s = String::with_capacity(64);
    for b in d {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::phase1_spec;
    use crate::diffusion::{make_schedule, ScheduleKind};

    fn toy_checkpoint() -> Checkpoint {
        let unet = UNetConfig {
            in_channels: 7,
            out_channels: 2,
            base_channels: 8,
            n_resolutions: 2,
            blocks_per_level: 1,
            attention_levels: vec![1],
            time_embed_dim: 16,
            initial_kernel_size: 5,
        };
        let mut ps = ParamStore::<f32>::new();
        let _net = UNet::build(&unet, &mut ps, 3).unwrap();
        Checkpoint {
            unet,
            phase: phase1_spec(2, 1),
            variant: Variant::Full,
            schedule: make_schedule(ScheduleKind::Cosine, 10, 0.0, 0.0).unwrap(),
            normalization: NormalizationTable {
                channel_names: vec!["bt".into()],
                ranges: vec![(190.0, 300.0)],
            },
            train_step: 17,
            params: ps.clone(),
            ema_params: ps,
        }
    }

    #[test]
    fn save_load_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model");
        let ck = toy_checkpoint();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(ck.train_step, back.train_step);
        assert_eq!(ck.unet, back.unet);
        assert_eq!(ck.content_hash(), back.content_hash());
        for (a, b) in ck.params.ids().zip(back.params.ids()) {
            assert_eq!(ck.params.name(a), back.params.name(b));
            assert_eq!(ck.params.value(a), back.params.value(b));
        }
        // Instantiation restores the exact weights.
        let (_, ps) = back.instantiate(false).unwrap();
        for (a, b) in ck.params.ids().zip(ps.ids()) {
            assert_eq!(ck.params.value(a), ps.value(b));
        }
    }

    #[test]
    fn corrupted_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model");
        toy_checkpoint().save(&path).unwrap();
        let bin = dir.path().join("model.ckpt.bin");
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes[40] ^= 0xff;
        std::fs::write(&bin, bytes).unwrap();
        let err = Checkpoint::load(&path).unwrap_err().to_string();
        assert!(err.contains("hash mismatch"), "{err}");
    }
}
