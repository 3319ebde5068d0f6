//! TOML run configuration. Every command reads the sections it needs,
//! applies flag overrides, and echoes the fully-resolved form into the
//! output directory for auditability.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use sctforge::losses::{EmptyRegionRule, LossConfig};
use sctforge::model::{BackboneConfig, Bottleneck, TaskMode, TransformerCfg};
use sctforge::phantom::PhantomSpec;
use sctforge::training::TrainConfig;

use crate::error::CliError;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    /// Root seed for all randomness in a command; `--seed` overrides it.
    pub seed: u64,
    pub phantom: PhantomSection,
    pub generate: GenerateSection,
    pub arch: ArchSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub finetune: FinetuneSection,
    pub synthesize: SynthesizeSection,
    pub evaluate: EvaluateSection,
    pub compare: CompareSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    pub dims: [usize; 3],
    pub outer_radius_frac: f64,
    pub shell_thickness_vox: usize,
    pub bone_hu: f32,
    pub tissue_hu: f32,
    pub air_hu: f32,
    pub noise_sigma: f64,
    pub bias_field_amp: f64,
    pub irregularity_amp: f64,
}

impl Default for PhantomSection {
    fn default() -> Self {
        let s = PhantomSpec::default();
        PhantomSection {
            dims: [s.dims.0, s.dims.1, s.dims.2],
            outer_radius_frac: s.outer_radius_frac,
            shell_thickness_vox: s.shell_thickness_vox,
            bone_hu: s.bone_hu,
            tissue_hu: s.tissue_hu,
            air_hu: s.air_hu,
            noise_sigma: s.noise_sigma,
            bias_field_amp: s.bias_field_amp,
            irregularity_amp: s.irregularity_amp,
        }
    }
}

impl PhantomSection {
    pub fn to_spec(&self) -> PhantomSpec {
        PhantomSpec {
            dims: (self.dims[0], self.dims[1], self.dims[2]),
            outer_radius_frac: self.outer_radius_frac,
            shell_thickness_vox: self.shell_thickness_vox,
            bone_hu: self.bone_hu,
            tissue_hu: self.tissue_hu,
            air_hu: self.air_hu,
            noise_sigma: self.noise_sigma,
            bias_field_amp: self.bias_field_amp,
            irregularity_amp: self.irregularity_amp,
            rotation: (0.0, 0.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub n: usize,
    /// "source" (1.5T-like) or "shifted" (7T-like contamination).
    pub domain: String,
}

impl Default for GenerateSection {
    fn default() -> Self {
        GenerateSection {
            n: 12,
            domain: "source".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSection {
    pub levels: usize,
    pub base_width: usize,
    /// "vss3d" or "transformer".
    pub bottleneck: String,
    pub vss3d_blocks: usize,
    pub scan_directions: usize,
    pub state_dim: usize,
    pub droppath_rate: f64,
    pub tf_layers: usize,
    pub tf_heads: usize,
}

impl Default for ArchSection {
    fn default() -> Self {
        let a = BackboneConfig::default();
        ArchSection {
            levels: a.levels,
            base_width: a.base_width,
            bottleneck: a.bottleneck.as_str().into(),
            vss3d_blocks: a.vss3d_blocks,
            scan_directions: a.scan_directions,
            state_dim: a.state_dim,
            droppath_rate: a.droppath_rate,
            tf_layers: a.transformer.layers,
            tf_heads: a.transformer.heads,
        }
    }
}

impl ArchSection {
    pub fn to_backbone(&self) -> Result<BackboneConfig, CliError> {
        let bottleneck = Bottleneck::parse(&self.bottleneck).ok_or_else(|| {
            CliError::Config(format!(
                "unknown bottleneck {:?} (expected \"vss3d\" or \"transformer\")",
                self.bottleneck
            ))
        })?;
        Ok(BackboneConfig {
            in_channels: 2,
            levels: self.levels,
            base_width: self.base_width,
            bottleneck,
            vss3d_blocks: self.vss3d_blocks,
            scan_directions: self.scan_directions,
            state_dim: self.state_dim,
            droppath_rate: self.droppath_rate,
            transformer: TransformerCfg {
                layers: self.tf_layers,
                heads: self.tf_heads,
            },
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub cohort: Option<PathBuf>,
    /// "multitask" or "single_task".
    pub mode: String,
    pub patch: [usize; 3],
    pub patches_per_subject: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub lr: f64,
    pub finetune_lr: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            cohort: None,
            mode: t.mode.as_str().into(),
            patch: [t.patch_size.0, t.patch_size.1, t.patch_size.2],
            patches_per_subject: t.patches_per_subject,
            max_epochs: t.max_epochs,
            early_stop_patience: t.early_stop_patience,
            lr: t.lr,
            finetune_lr: t.finetune_lr,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub lambda: f64,
    pub dice_smooth: f64,
    /// "skip" or "zero": how an empty restricted region contributes.
    pub empty_region_rule: String,
    pub soft_weight: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let l = LossConfig::default();
        LossSection {
            lambda: l.lambda,
            dice_smooth: l.dice_smooth,
            empty_region_rule: match l.empty_region_rule {
                EmptyRegionRule::SkipTerm => "skip".into(),
                EmptyRegionRule::ZeroTerm => "zero".into(),
            },
            soft_weight: l.soft_weight,
        }
    }
}

impl LossSection {
    pub fn to_loss_config(&self) -> Result<LossConfig, CliError> {
        let rule = match self.empty_region_rule.as_str() {
            "skip" => EmptyRegionRule::SkipTerm,
            "zero" => EmptyRegionRule::ZeroTerm,
            other => {
                return Err(CliError::Config(format!(
                    "unknown empty_region_rule {other:?} (expected \"skip\" or \"zero\")"
                )))
            }
        };
        Ok(LossConfig {
            lambda: self.lambda,
            dice_smooth: self.dice_smooth,
            empty_region_rule: rule,
            soft_weight: self.soft_weight,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub checkpoint: Option<PathBuf>,
    pub cohort: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesizeSection {
    pub checkpoint: Option<PathBuf>,
    pub cohort: Option<PathBuf>,
    /// "train", "val", "test" or "all".
    pub split: String,
    /// Tiling stride; defaults to half the checkpoint's patch size.
    pub stride: Option<[usize; 3]>,
}

impl Default for SynthesizeSection {
    fn default() -> Self {
        SynthesizeSection {
            checkpoint: None,
            cohort: None,
            split: "test".into(),
            stride: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub checkpoint: Option<PathBuf>,
    pub cohort: Option<PathBuf>,
    pub split: String,
    /// Swap the ground-truth mask in as the fusion selector / template.
    pub use_gt_mask_reference: bool,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            checkpoint: None,
            cohort: None,
            split: "test".into(),
            use_gt_mask_reference: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    /// metrics.tsv from evaluating the single-task baseline.
    pub single: Option<PathBuf>,
    /// metrics.tsv from evaluating the multitask model.
    pub multi: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: Option<&std::path::Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn to_train_config(&self) -> Result<TrainConfig, CliError> {
        let mode = TaskMode::parse(&self.train.mode).ok_or_else(|| {
            CliError::Config(format!(
                "unknown mode {:?} (expected \"multitask\" or \"single_task\")",
                self.train.mode
            ))
        })?;
        let cfg = TrainConfig {
            mode,
            arch: self.arch.to_backbone()?,
            patch_size: (self.train.patch[0], self.train.patch[1], self.train.patch[2]),
            patches_per_subject: self.train.patches_per_subject,
            max_epochs: self.train.max_epochs,
            early_stop_patience: self.train.early_stop_patience,
            lr: self.train.lr,
            finetune_lr: self.train.finetune_lr,
            seed: self.seed,
            loss: self.loss.to_loss_config()?,
        };
        cfg.validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Serialized resolved form, written next to every command's outputs.
    pub fn resolved_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
