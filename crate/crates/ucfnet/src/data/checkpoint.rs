//! Checkpoint persistence: a human-readable JSON manifest next to a raw
//! little-endian payload.
//!
//! `<base>.manifest.json` records the config snapshot, training step,
//! element width, and one entry (name, shape, offset, byte length) per
//! stored tensor; `<base>.bin` is the concatenation of every tensor's
//! raw bytes in manifest order: parameters, then buffers, then the
//! optimizer's first and second moments when present. The manifest
//! carries a SHA-256 of the payload, entries must tile the payload
//! exactly, and every entry is checked by name and shape against a model
//! freshly built from the config snapshot, so a corrupt or inconsistent
//! checkpoint fails loudly instead of misloading.

use crate::model::{build, UcfConfig, UcfModel};
use crate::nn::ModelState;
use crate::optim::AdamW;
use crate::tensor::{ElemWidth, Scalar, Tensor4};
use crate::{Error, Result};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Location and shape of one tensor inside the payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 4],
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub scalar_width: ElemWidth,
    /// Training step at save time.
    pub step: u64,
    pub config: UcfConfig,
    pub params: Vec<TensorEntry>,
    pub buffers: Vec<TensorEntry>,
    /// Optimizer step count; `None` when no optimizer state is stored.
    pub adam_step: Option<u64>,
    pub adam_m: Vec<TensorEntry>,
    pub adam_v: Vec<TensorEntry>,
    /// Hex SHA-256 of the payload file.
    pub payload_sha256: String,
}

/// Optimizer state recovered from a checkpoint, ready for
/// [`AdamW::restore`].
#[derive(Debug, Clone)]
pub struct AdamSnapshot<S> {
    pub m: Vec<Tensor4<S>>,
    pub v: Vec<Tensor4<S>>,
    pub t: u64,
}

#[derive(Debug)]
pub struct LoadedCheckpoint<S> {
    pub model: UcfModel,
    pub state: ModelState<S>,
    pub step: u64,
    pub adam: Option<AdamSnapshot<S>>,
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut name = base.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(suffix);
    base.with_file_name(name)
}

pub fn manifest_path(base: &Path) -> PathBuf {
    with_suffix(base, ".manifest.json")
}

pub fn payload_path(base: &Path) -> PathBuf {
    with_suffix(base, ".bin")
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn width_bytes(w: ElemWidth) -> usize {
    match w {
        ElemWidth::F32 => 4,
        ElemWidth::F64 => 8,
    }
}

fn append_tensor<S: Scalar>(payload: &mut Vec<u8>, name: &str, t: &Tensor4<S>) -> TensorEntry {
    let offset = payload.len() as u64;
    for v in t.iter() {
        v.write_le(payload);
    }
    TensorEntry {
        name: name.to_string(),
        shape: t.shape(),
        offset,
        byte_len: (t.numel() * S::BYTES) as u64,
    }
}

/// Writes `<base>.manifest.json` and `<base>.bin`. Pass the optimizer to
/// resume training later; omit it for inference-only snapshots.
pub fn save_checkpoint<S: Scalar>(
    base: &Path,
    config: &UcfConfig,
    state: &ModelState<S>,
    optim: Option<&AdamW<S>>,
    step: u64,
) -> Result<()> {
    let mut payload = Vec::new();
    let params: Vec<TensorEntry> = state
        .params
        .iter()
        .map(|p| append_tensor(&mut payload, &p.name, &p.value))
        .collect();
    let buffers: Vec<TensorEntry> = state
        .bufs
        .iter()
        .map(|(name, t)| append_tensor(&mut payload, name, t))
        .collect();
    let (mut adam_m, mut adam_v) = (Vec::new(), Vec::new());
    let mut adam_step = None;
    if let Some(opt) = optim {
        let (m, v) = opt.moments();
        adam_m = state
            .params
            .iter()
            .zip(m)
            .map(|(p, t)| append_tensor(&mut payload, &p.name, t))
            .collect();
        adam_v = state
            .params
            .iter()
            .zip(v)
            .map(|(p, t)| append_tensor(&mut payload, &p.name, t))
            .collect();
        adam_step = Some(opt.step_count());
    }

    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        scalar_width: S::WIDTH,
        step,
        config: config.clone(),
        params,
        buffers,
        adam_step,
        adam_m,
        adam_v,
        payload_sha256: hex_digest(&payload),
    };
    if let Some(parent) = base.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(manifest_path(base), serde_json::to_string_pretty(&manifest)?)?;
    std::fs::write(payload_path(base), payload)?;
    Ok(())
}

fn corrupt(msg: String) -> Error {
    Error::Checkpoint(msg)
}

fn decode_tensor<S: Scalar>(
    payload: &[u8],
    entry: &TensorEntry,
    width: ElemWidth,
) -> Result<Tensor4<S>> {
    let bytes = &payload[entry.offset as usize..(entry.offset + entry.byte_len) as usize];
    let vals: Vec<S> = match width {
        ElemWidth::F32 => bytes
            .chunks_exact(4)
            .map(|b| S::of_f64(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect(),
        ElemWidth::F64 => bytes
            .chunks_exact(8)
            .map(|b| S::of_f64(f64::from_le_bytes(b.try_into().unwrap())))
            .collect(),
    };
    Tensor4::from_vec(entry.shape, vals)
}

/// Loads a checkpoint saved by [`save_checkpoint`], rebuilding the model
/// from the manifest's config snapshot and verifying payload checksum,
/// entry tiling, and per-tensor name/shape agreement. A checkpoint of
/// the other element width loads with a warning, converting values.
pub fn load_checkpoint<S: Scalar>(base: &Path) -> Result<LoadedCheckpoint<S>> {
    let manifest_file = manifest_path(base);
    let text = std::fs::read_to_string(&manifest_file)
        .map_err(|e| corrupt(format!("cannot read {}: {e}", manifest_file.display())))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(corrupt(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    let payload = std::fs::read(payload_path(base))?;
    let digest = hex_digest(&payload);
    if digest != manifest.payload_sha256 {
        return Err(corrupt(format!(
            "payload checksum mismatch: manifest says {}, file hashes to {digest}",
            manifest.payload_sha256
        )));
    }

    // Entries must tile the payload exactly, in manifest order.
    let elem = width_bytes(manifest.scalar_width) as u64;
    let mut cursor = 0u64;
    for entry in manifest
        .params
        .iter()
        .chain(&manifest.buffers)
        .chain(&manifest.adam_m)
        .chain(&manifest.adam_v)
    {
        let expected = entry.shape.iter().product::<usize>() as u64 * elem;
        if entry.byte_len != expected {
            return Err(corrupt(format!(
                "entry {} declares {} bytes but shape {:?} needs {expected}",
                entry.name, entry.byte_len, entry.shape
            )));
        }
        if entry.offset != cursor {
            return Err(corrupt(format!(
                "entry {} at offset {} leaves a gap (expected {cursor})",
                entry.name, entry.offset
            )));
        }
        cursor += entry.byte_len;
    }
    if cursor != payload.len() as u64 {
        return Err(corrupt(format!(
            "manifest covers {cursor} bytes but payload holds {}",
            payload.len()
        )));
    }
    if manifest.scalar_width != S::WIDTH {
        log::warn!(
            "checkpoint stores {} values, converting to {} on load",
            manifest.scalar_width,
            S::WIDTH
        );
    }

    let (model, mut state) = build::<S>(&manifest.config, 0)?;
    if manifest.params.len() != state.params.len() {
        return Err(corrupt(format!(
            "manifest lists {} parameters, config snapshot builds {}",
            manifest.params.len(),
            state.params.len()
        )));
    }
    for (entry, p) in manifest.params.iter().zip(state.params.iter_mut()) {
        if entry.name != p.name || entry.shape != p.value.shape() {
            return Err(corrupt(format!(
                "parameter mismatch: manifest has {} {:?}, model expects {} {:?}",
                entry.name,
                entry.shape,
                p.name,
                p.value.shape()
            )));
        }
        p.value = decode_tensor(&payload, entry, manifest.scalar_width)?;
    }
    if manifest.buffers.len() != state.bufs.len() {
        return Err(corrupt(format!(
            "manifest lists {} buffers, config snapshot builds {}",
            manifest.buffers.len(),
            state.bufs.len()
        )));
    }
    for (entry, (name, value)) in manifest.buffers.iter().zip(state.bufs.iter_mut()) {
        if entry.name != name || entry.shape != value.shape() {
            return Err(corrupt(format!(
                "buffer mismatch: manifest has {} {:?}, model expects {name} {:?}",
                entry.name,
                entry.shape,
                value.shape()
            )));
        }
        *value = decode_tensor(&payload, entry, manifest.scalar_width)?;
    }

    let adam = match manifest.adam_step {
        None if manifest.adam_m.is_empty() && manifest.adam_v.is_empty() => None,
        None => {
            return Err(corrupt(
                "optimizer moments present without an optimizer step".into(),
            ))
        }
        Some(t) => {
            if manifest.adam_m.len() != state.params.len()
                || manifest.adam_v.len() != state.params.len()
            {
                return Err(corrupt(format!(
                    "optimizer state holds {}/{} tensors for {} parameters",
                    manifest.adam_m.len(),
                    manifest.adam_v.len(),
                    state.params.len()
                )));
            }
            let decode_all = |entries: &[TensorEntry]| -> Result<Vec<Tensor4<S>>> {
                entries
                    .iter()
                    .map(|e| decode_tensor(&payload, e, manifest.scalar_width))
                    .collect()
            };
            Some(AdamSnapshot {
                m: decode_all(&manifest.adam_m)?,
                v: decode_all(&manifest.adam_v)?,
                t,
            })
        }
    };

    Ok(LoadedCheckpoint {
        model,
        state,
        step: manifest.step,
        adam,
    })
}

/// SHA-256 of the payload file, recomputed from disk. Two runs that
/// trained identically produce checkpoints with equal checksums.
pub fn checkpoint_checksum(base: &Path) -> Result<String> {
    Ok(hex_digest(&std::fs::read(payload_path(base))?))
}
