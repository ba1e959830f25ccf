//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "MIVD" | format_version u32
//! config text: len u64 + UTF-8 bytes
//! step u64 | epoch u64
//! rng seed [32 bytes] | rng word position u128
//! loss history: count u64 + count * 5 * f32 (total, diff, pix, perc, lpips)
//! manifest: count u32, then per tensor:
//!     name len u32 + bytes | dtype tag u8 (0 = f32) | rank u32 | dims u32 each
//! payloads: f32 bits in manifest order
//! SHA-256 of everything above [32 bytes]
//! ```
//!
//! Tensors cover the model parameters (`param.<name>`) and the Adam moments
//! (`adam_m.<name>`, `adam_v.<name>`). Loading validates the magic, version,
//! checksum, and the manifest against the shape arithmetic of the embedded
//! config; save of a loaded checkpoint is byte-identical.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::TrainingConfig;
use crate::error::{Error, Result};
use crate::model::{init_params, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MIVD";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Complete training state: everything needed to resume a run exactly.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainingConfig,
    pub step: u64,
    pub epoch: u64,
    pub params: ModelParams<f32>,
    pub adam_m: ModelParams<f32>,
    pub adam_v: ModelParams<f32>,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    /// Per-step `[total, diff, pix, perc, lpips]`.
    pub loss_history: Vec<[f32; 5]>,
}

impl Checkpoint {
    /// Fresh state at step 0 for a configuration.
    pub fn fresh(config: &TrainingConfig) -> Result<Self> {
        let params = init_params::<f32>(&config.model_config(), config.seed)?;
        let adam_m = params.zeros_like();
        let adam_v = params.zeros_like();
        let mut rng_seed = [0u8; 32];
        rng_seed[..8].copy_from_slice(&config.seed.to_le_bytes());
        Ok(Self {
            format_version: CHECKPOINT_VERSION,
            config: config.clone(),
            step: 0,
            epoch: 0,
            params,
            adam_m,
            adam_v,
            rng_seed,
            rng_word_pos: 0,
            loss_history: Vec::new(),
        })
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        let cfg = self.config.to_text();
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.rng_seed);
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        out.extend_from_slice(&(self.loss_history.len() as u64).to_le_bytes());
        for row in &self.loss_history {
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }

        let groups = [
            ("param", &self.params),
            ("adam_m", &self.adam_m),
            ("adam_v", &self.adam_v),
        ];
        let total: usize = groups.iter().map(|(_, p)| p.named_views().len()).sum();
        out.extend_from_slice(&(total as u32).to_le_bytes());
        for (prefix, p) in &groups {
            for (name, view) in p.named_views() {
                let full = format!("{prefix}.{name}");
                out.extend_from_slice(&(full.len() as u32).to_le_bytes());
                out.extend_from_slice(full.as_bytes());
                out.push(DTYPE_F32);
                out.extend_from_slice(&(view.ndim() as u32).to_le_bytes());
                for d in view.shape() {
                    out.extend_from_slice(&(*d as u32).to_le_bytes());
                }
            }
        }
        for (_, p) in &groups {
            for (_, view) in p.named_views() {
                for v in view.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }

        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }
}

/// Write the checkpoint; the file is fully rewritten on each call.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, ck.encode()).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.data.len()
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Read and fully validate a checkpoint. Nothing is mutated on failure.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if data.len() < 4 + 4 + 32 {
        return Err(Error::Checkpoint(format!(
            "{}: file too small ({} bytes)",
            path.display(),
            data.len()
        )));
    }
    let (body, stored_digest) = data.split_at(data.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_digest {
        return Err(Error::Checkpoint(format!(
            "{}: checksum mismatch",
            path.display()
        )));
    }

    let mut c = Cursor { data: body, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format version {version}",
            path.display()
        )));
    }
    let cfg_len = c.u64()? as usize;
    let cfg_text = std::str::from_utf8(c.take(cfg_len)?)
        .map_err(|e| Error::Checkpoint(format!("config text not UTF-8: {e}")))?;
    let config = TrainingConfig::from_text(cfg_text)
        .map_err(|e| Error::Checkpoint(format!("embedded config invalid: {e}")))?;
    let step = c.u64()?;
    let epoch = c.u64()?;
    let rng_seed: [u8; 32] = c.take(32)?.try_into().unwrap();
    let rng_word_pos = c.u128()?;
    let n_hist = c.u64()? as usize;
    let mut loss_history = Vec::with_capacity(n_hist);
    for _ in 0..n_hist {
        let mut row = [0f32; 5];
        for v in &mut row {
            *v = c.f32()?;
        }
        loss_history.push(row);
    }

    // Manifest, validated against the shape arithmetic of the config.
    let params = init_params::<f32>(&config.model_config(), 0)
        .map_err(|e| Error::Checkpoint(format!("embedded config inconsistent: {e}")))?;
    let expected: Vec<(String, Vec<usize>)> = {
        let mut v = Vec::new();
        for prefix in ["param", "adam_m", "adam_v"] {
            for (name, view) in params.named_views() {
                v.push((format!("{prefix}.{name}"), view.shape().to_vec()));
            }
        }
        v
    };
    let n_tensors = c.u32()? as usize;
    if n_tensors != expected.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {n_tensors} tensors, config implies {}",
            expected.len()
        )));
    }
    let mut manifest = Vec::with_capacity(n_tensors);
    for (name, shape) in &expected {
        let len = c.u32()? as usize;
        let got_name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("tensor name not UTF-8: {e}")))?;
        if got_name != name {
            return Err(Error::Checkpoint(format!(
                "tensor {got_name}: expected {name} at this manifest position"
            )));
        }
        let dtype = c.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: unsupported dtype tag {dtype}"
            )));
        }
        let rank = c.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u32()? as usize);
        }
        if &dims != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: shape {dims:?} does not match config-implied {shape:?}"
            )));
        }
        manifest.push(dims.iter().product::<usize>());
    }

    let mut group_params = params;
    let mut group_m = group_params.zeros_like();
    let mut group_v = group_params.zeros_like();
    for (gi, group) in [&mut group_params, &mut group_m, &mut group_v].into_iter().enumerate() {
        for (ti, (_, mut view)) in group.named_views_mut().into_iter().enumerate() {
            let count = manifest[gi * (expected.len() / 3) + ti];
            debug_assert_eq!(count, view.len());
            for v in view.iter_mut() {
                *v = c.f32()?;
            }
        }
    }
    if c.pos != body.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after payloads",
            body.len() - c.pos
        )));
    }

    Ok(Checkpoint {
        format_version: version,
        config,
        step,
        epoch,
        params: group_params,
        adam_m: group_m,
        adam_v: group_v,
        rng_seed,
        rng_word_pos,
        loss_history,
    })
}
