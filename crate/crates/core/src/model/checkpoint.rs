//! Checkpoint container: model config + parameters, the target-intensity
//! normalization needed to map predictions back to HU, training metadata,
//! and (for the single-task route) an optional bone-mask template.
//!
//! Layout on disk: `manifest.txt` (text key/value), `params.bin` (tensor
//! blobs, little-endian f32), `history.txt`, optional `template.cvf`.
//! A sha256 digest of the canonical config string gates loading, so weights
//! are never silently applied to a mismatched architecture.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::backbone::{BackboneConfig, Bottleneck, Model, ModelError, TaskMode, TransformerCfg};
use crate::tape::Tensor;
use crate::volume::{
    load_mask, save_mask, BinaryMask3D, IntensityKind, NormalizationRecord, VolumeError,
};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("config digest mismatch: manifest {stored}, recomputed {computed}")]
    DigestMismatch { stored: String, computed: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    /// Best epoch the parameters came from (1-based; 0 = untrained).
    pub epoch: usize,
    pub root_seed: u64,
    /// Inverse mapping from normalized regression targets to HU.
    pub target_norm: NormalizationRecord,
    /// HU threshold used for bone-mask derivation on the single-task route.
    pub bone_threshold_hu: f32,
    /// Per-epoch history lines as logged during training.
    pub history: Vec<String>,
    /// Single-task group bone template (majority mask over training set).
    pub template: Option<BinaryMask3D>,
}

/// Canonical architecture fingerprint; checkpoints only load onto an exactly
/// matching config, mode, and patch geometry.
pub fn config_digest(config: &BackboneConfig, mode: TaskMode, patch: (usize, usize, usize)) -> String {
    let s = format!(
        "mode={}\nbottleneck={}\nin_channels={}\nlevels={}\nbase_width={}\nvss3d_blocks={}\n\
         scan_directions={}\nstate_dim={}\ndroppath_rate={}\ntf_layers={}\ntf_heads={}\n\
         patch={}x{}x{}\n",
        mode.as_str(),
        config.bottleneck.as_str(),
        config.in_channels,
        config.levels,
        config.base_width,
        config.vss3d_blocks,
        config.scan_directions,
        config.state_dim,
        config.droppath_rate,
        config.transformer.layers,
        config.transformer.heads,
        patch.0,
        patch.1,
        patch.2,
    );
    let mut h = Sha256::new();
    h.update(s.as_bytes());
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_params(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Format("params.bin truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn read_params(model: &mut Model, path: &Path) -> Result<(), CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let count = cur.u32()? as usize;
    if count != model.params.len() {
        return Err(CheckpointError::Format(format!(
            "expected {} tensors, file has {count}",
            model.params.len()
        )));
    }
    let expected: Vec<(String, Vec<usize>)> = model
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), t.shape.clone()))
        .collect();
    for (name, shape) in expected {
        let nlen = cur.u32()? as usize;
        let nbytes = cur.take(nlen)?;
        let fname = std::str::from_utf8(nbytes)
            .map_err(|_| CheckpointError::Format("non-utf8 tensor name".into()))?;
        if fname != name {
            return Err(CheckpointError::Format(format!(
                "tensor order mismatch: expected {name}, file has {fname}"
            )));
        }
        let ndim = cur.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u32()? as usize);
        }
        if dims != shape {
            return Err(CheckpointError::Format(format!(
                "tensor {name} shape mismatch: expected {shape:?}, file has {dims:?}"
            )));
        }
        let numel: usize = dims.iter().product();
        let raw = cur.take(numel * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        *model.params.get_mut(&name) = Tensor::new(shape, data);
    }
    if cur.pos != bytes.len() {
        return Err(CheckpointError::Format("trailing bytes in params.bin".into()));
    }
    Ok(())
}

pub fn save_checkpoint(ck: &Checkpoint, dir: &Path) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir)?;
    let cfg = &ck.model.config;
    let digest = config_digest(cfg, ck.model.mode, ck.model.patch);
    let mut m = String::new();
    m.push_str("sctforge_checkpoint v1\n");
    m.push_str(&format!("digest {digest}\n"));
    m.push_str(&format!("mode {}\n", ck.model.mode.as_str()));
    m.push_str(&format!("bottleneck {}\n", cfg.bottleneck.as_str()));
    m.push_str(&format!("in_channels {}\n", cfg.in_channels));
    m.push_str(&format!("levels {}\n", cfg.levels));
    m.push_str(&format!("base_width {}\n", cfg.base_width));
    m.push_str(&format!("vss3d_blocks {}\n", cfg.vss3d_blocks));
    m.push_str(&format!("scan_directions {}\n", cfg.scan_directions));
    m.push_str(&format!("state_dim {}\n", cfg.state_dim));
    m.push_str(&format!("droppath_rate {}\n", cfg.droppath_rate));
    m.push_str(&format!("tf_layers {}\n", cfg.transformer.layers));
    m.push_str(&format!("tf_heads {}\n", cfg.transformer.heads));
    m.push_str(&format!(
        "patch {} {} {}\n",
        ck.model.patch.0, ck.model.patch.1, ck.model.patch.2
    ));
    m.push_str(&format!("epoch {}\n", ck.epoch));
    m.push_str(&format!("root_seed {}\n", ck.root_seed));
    m.push_str(&format!("target_vmin {}\n", ck.target_norm.vmin));
    m.push_str(&format!("target_vmax {}\n", ck.target_norm.vmax));
    m.push_str(&format!("target_kind {}\n", ck.target_norm.source_kind));
    m.push_str(&format!("bone_threshold_hu {}\n", ck.bone_threshold_hu));
    m.push_str(&format!(
        "template {}\n",
        if ck.template.is_some() { 1 } else { 0 }
    ));
    m.push_str(&format!("params {}\n", ck.model.params.len()));
    fs::write(dir.join("manifest.txt"), m)?;
    write_params(&ck.model, &dir.join("params.bin"))?;
    fs::write(dir.join("history.txt"), ck.history.join("\n") + "\n")?;
    if let Some(t) = &ck.template {
        save_mask(t, &dir.join("template.cvf"))?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, CheckpointError> {
    let text = fs::read_to_string(dir.join("manifest.txt"))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CheckpointError::Format("empty manifest".into()))?;
    if header != "sctforge_checkpoint v1" {
        return Err(CheckpointError::Format(format!("bad header {header:?}")));
    }
    let mut kv = std::collections::HashMap::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(' ')
            .ok_or_else(|| CheckpointError::Format(format!("bad manifest line {line:?}")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<&String, CheckpointError> {
        kv.get(k)
            .ok_or_else(|| CheckpointError::Format(format!("missing manifest key {k}")))
    };
    let parse_usize = |k: &str| -> Result<usize, CheckpointError> {
        get(k)?
            .parse()
            .map_err(|_| CheckpointError::Format(format!("bad value for {k}")))
    };
    let parse_f64 = |k: &str| -> Result<f64, CheckpointError> {
        get(k)?
            .parse()
            .map_err(|_| CheckpointError::Format(format!("bad value for {k}")))
    };

    let mode = TaskMode::parse(get("mode")?)
        .ok_or_else(|| CheckpointError::Format("bad mode".into()))?;
    let bottleneck = Bottleneck::parse(get("bottleneck")?)
        .ok_or_else(|| CheckpointError::Format("bad bottleneck".into()))?;
    let config = BackboneConfig {
        in_channels: parse_usize("in_channels")?,
        levels: parse_usize("levels")?,
        base_width: parse_usize("base_width")?,
        bottleneck,
        vss3d_blocks: parse_usize("vss3d_blocks")?,
        scan_directions: parse_usize("scan_directions")?,
        state_dim: parse_usize("state_dim")?,
        droppath_rate: parse_f64("droppath_rate")?,
        transformer: TransformerCfg {
            layers: parse_usize("tf_layers")?,
            heads: parse_usize("tf_heads")?,
        },
    };
    let patch_parts: Vec<usize> = get("patch")?
        .split_whitespace()
        .map(|p| p.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| CheckpointError::Format("bad patch".into()))?;
    if patch_parts.len() != 3 {
        return Err(CheckpointError::Format("patch needs three extents".into()));
    }
    let patch = (patch_parts[0], patch_parts[1], patch_parts[2]);

    let stored = get("digest")?.clone();
    let computed = config_digest(&config, mode, patch);
    if stored != computed {
        return Err(CheckpointError::DigestMismatch { stored, computed });
    }

    let mut model = Model::init(config, mode, patch, 0)?;
    read_params(&mut model, &dir.join("params.bin"))?;

    let target_norm = NormalizationRecord {
        vmin: parse_f64("target_vmin")?,
        vmax: parse_f64("target_vmax")?,
        source_kind: match get("target_kind")?.as_str() {
            "HU" => IntensityKind::Hu,
            "normalized" => IntensityKind::Normalized,
            "arbitrary" => IntensityKind::Arbitrary,
            other => {
                return Err(CheckpointError::Format(format!("bad target_kind {other:?}")))
            }
        },
    };
    let history = match fs::read_to_string(dir.join("history.txt")) {
        Ok(s) => s.lines().map(|l| l.to_string()).collect(),
        Err(_) => Vec::new(),
    };
    let template = if get("template")? == "1" {
        Some(load_mask(&dir.join("template.cvf"))?)
    } else {
        None
    };
    Ok(Checkpoint {
        model,
        epoch: parse_usize("epoch")?,
        root_seed: get("root_seed")?
            .parse()
            .map_err(|_| CheckpointError::Format("bad root_seed".into()))?,
        target_norm,
        bone_threshold_hu: parse_f64("bone_threshold_hu")? as f32,
        history,
        template,
    })
}
