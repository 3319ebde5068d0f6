//! Composite training objective: global Dice + BCE on the segmentation
//! branch plus region-restricted MSE on the HU branches. The bone region is
//! rebuilt from the current segmentation prediction each step (stop-gradient
//! mask selection); the soft-tissue branch trains on its complement.

use std::sync::Arc;

use thiserror::Error;

use crate::model::{ModelOutputs, TapeOutputs};
use crate::morphology::{
    attention_region, AttentionRegion, RegionSource, ATTENTION_DILATION_ITERS,
    BINARIZE_THRESHOLD,
};
use crate::tape::{Tape, TensorId};
use crate::volume::BinaryMask3D;

pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("bad loss config: {0}")]
    BadConfig(String),
    #[error("composite loss needs multitask outputs")]
    WrongMode,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmptyRegionRule {
    /// Omit the term from the total; reported as 0.
    SkipTerm,
    /// Define the term's value as 0 and keep it in the sum. Numerically
    /// identical to `SkipTerm`; the distinction only documents intent.
    ZeroTerm,
}

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// Weight of BCE within the segmentation pair; Dice gets 1 - lambda.
    pub lambda: f64,
    pub dice_smooth: f64,
    pub empty_region_rule: EmptyRegionRule,
    /// Weight of the complementary soft-tissue MSE term.
    pub soft_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.5,
            dice_smooth: 1e-5,
            empty_region_rule: EmptyRegionRule::SkipTerm,
            soft_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(LossError::BadConfig(format!(
                "lambda {} not in [0, 1]",
                self.lambda
            )));
        }
        if self.dice_smooth <= 0.0 || !self.dice_smooth.is_finite() {
            return Err(LossError::BadConfig(format!(
                "dice_smooth {} must be positive",
                self.dice_smooth
            )));
        }
        if self.soft_weight < 0.0 || !self.soft_weight.is_finite() {
            return Err(LossError::BadConfig(format!(
                "soft_weight {} must be non-negative",
                self.soft_weight
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub dice: f64,
    pub bce: f64,
    pub mse_bone: f64,
    pub mse_soft: f64,
    pub total: f64,
    pub region_size: usize,
}

/// One history-log line: epoch, step, then the breakdown in field order.
pub fn history_line(epoch: usize, step: usize, b: &LossBreakdown) -> String {
    format!(
        "{epoch} {step} {:.8} {:.8} {:.8} {:.8} {:.8} {}",
        b.dice, b.bce, b.mse_bone, b.mse_soft, b.total, b.region_size
    )
}

/// 1 - (2*sum(p*g) + s) / (sum(p) + sum(g) + s), over the whole patch.
pub fn soft_dice_loss(pred_prob: &[f64], gt_mask: &[f64], smooth: f64) -> f64 {
    assert_eq!(pred_prob.len(), gt_mask.len());
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut gsum = 0.0;
    for (&p, &g) in pred_prob.iter().zip(gt_mask) {
        inter += p * g;
        psum += p;
        gsum += g;
    }
    1.0 - (2.0 * inter + smooth) / (psum + gsum + smooth)
}

/// Mean binary cross-entropy with probabilities clamped to [eps, 1-eps].
pub fn bce_loss(pred_prob: &[f64], gt_mask: &[f64]) -> f64 {
    assert_eq!(pred_prob.len(), gt_mask.len());
    let mut acc = 0.0;
    for (&p, &g) in pred_prob.iter().zip(gt_mask) {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        acc -= g * p.ln() + (1.0 - g) * (1.0 - p).ln();
    }
    acc / pred_prob.len() as f64
}

/// Mean squared error restricted to the region; `None` when it is empty.
pub fn masked_mse_value(pred: &[f64], gt: &[f64], region: &BinaryMask3D) -> Option<f64> {
    assert_eq!(pred.len(), gt.len());
    assert_eq!(pred.len(), region.data.len());
    let mut acc = 0.0;
    let mut n = 0usize;
    for ((&p, &g), &m) in pred.iter().zip(gt).zip(&region.data) {
        if m == 1 {
            let d = p - g;
            acc += d * d;
            n += 1;
        }
    }
    if n == 0 {
        None
    } else {
        Some(acc / n as f64)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn term_or_empty(v: Option<f64>) -> f64 {
    // skip_term and zero_term coincide numerically: a missing term
    // contributes nothing either way.
    v.unwrap_or(0.0)
}

/// The composite objective on already-evaluated multitask outputs.
pub fn composite_loss(
    outputs: &ModelOutputs,
    gt_seg: &[f64],
    gt_ct_norm: &[f64],
    cfg: &LossConfig,
) -> Result<LossBreakdown, LossError> {
    cfg.validate()?;
    let ModelOutputs::Multitask {
        seg_logits,
        bone,
        soft,
    } = outputs
    else {
        return Err(LossError::WrongMode);
    };
    let shape = &seg_logits.shape;
    if shape.len() != 4 || shape[0] != 1 {
        return Err(LossError::ShapeMismatch(format!(
            "seg logits shape {shape:?}"
        )));
    }
    // Patch tensors are x-fastest, so the mask extents run (x, y, z).
    let dims = (shape[3], shape[2], shape[1]);
    let n = dims.0 * dims.1 * dims.2;
    if gt_seg.len() != n || gt_ct_norm.len() != n {
        return Err(LossError::ShapeMismatch(format!(
            "targets {} / {} vs patch {n}",
            gt_seg.len(),
            gt_ct_norm.len()
        )));
    }
    let probs: Vec<f64> = seg_logits.data.iter().map(|&l| sigmoid(l)).collect();
    let region = attention_region(
        &probs,
        dims,
        BINARIZE_THRESHOLD,
        ATTENTION_DILATION_ITERS,
        RegionSource::PredictedSeg,
    );
    let dice = soft_dice_loss(&probs, gt_seg, cfg.dice_smooth);
    let bce = bce_loss(&probs, gt_seg);
    let mse_bone = term_or_empty(masked_mse_value(&bone.data, gt_ct_norm, &region.voxels));
    let soft_region = region.complement();
    let mse_soft = term_or_empty(masked_mse_value(&soft.data, gt_ct_norm, &soft_region));
    let total = (1.0 - cfg.lambda) * dice + cfg.lambda * bce + mse_bone
        + cfg.soft_weight * mse_soft;
    Ok(LossBreakdown {
        dice,
        bce,
        mse_bone,
        mse_soft,
        total,
        region_size: region.size(),
    })
}

/// Tape-side composite loss: returns the differentiable total plus the same
/// breakdown the pure route reports.
pub struct TapeLoss {
    pub total: TensorId,
    pub breakdown: LossBreakdown,
    pub region: AttentionRegion,
}

pub fn composite_loss_on_tape(
    tape: &mut Tape,
    outputs: &TapeOutputs,
    gt_seg: TensorId,
    gt_ct: TensorId,
    cfg: &LossConfig,
) -> Result<TapeLoss, LossError> {
    cfg.validate()?;
    let TapeOutputs::Multitask {
        seg_logits,
        bone,
        soft,
    } = outputs
    else {
        return Err(LossError::WrongMode);
    };
    let shape = tape.value(*seg_logits).shape.clone();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(LossError::ShapeMismatch(format!(
            "seg logits shape {shape:?}"
        )));
    }
    let dims = (shape[3], shape[2], shape[1]);
    let probs = tape.sigmoid_op(*seg_logits);
    let region = attention_region(
        &tape.value(probs).data,
        dims,
        BINARIZE_THRESHOLD,
        ATTENTION_DILATION_ITERS,
        RegionSource::PredictedSeg,
    );
    let dice = tape.dice_loss(probs, gt_seg, cfg.dice_smooth);
    let bce = tape.bce_loss(probs, gt_seg);
    let d = tape.scale(dice, 1.0 - cfg.lambda);
    let b = tape.scale(bce, cfg.lambda);
    let mut total = tape.add(d, b);
    let mut mse_bone = 0.0;
    if region.size() > 0 {
        let mask = Arc::new(region.voxels.data.clone());
        let t = tape.masked_mse(*bone, gt_ct, mask);
        mse_bone = tape.value(t).data[0];
        total = tape.add(total, t);
    }
    let soft_region = region.complement();
    let mut mse_soft = 0.0;
    if soft_region.count() > 0 {
        let mask = Arc::new(soft_region.data.clone());
        let t = tape.masked_mse(*soft, gt_ct, mask);
        mse_soft = tape.value(t).data[0];
        let t = if cfg.soft_weight != 1.0 {
            tape.scale(t, cfg.soft_weight)
        } else {
            t
        };
        total = tape.add(total, t);
    }
    let breakdown = LossBreakdown {
        dice: tape.value(dice).data[0],
        bce: tape.value(bce).data[0],
        mse_bone,
        mse_soft,
        total: tape.value(total).data[0],
        region_size: region.size(),
    };
    Ok(TapeLoss {
        total,
        breakdown,
        region,
    })
}

/// Single-task objective: plain MSE of the HU map over the whole patch.
pub fn single_task_loss_on_tape(
    tape: &mut Tape,
    outputs: &TapeOutputs,
    gt_ct: TensorId,
) -> Result<(TensorId, f64), LossError> {
    let TapeOutputs::SingleTask { sct } = outputs else {
        return Err(LossError::WrongMode);
    };
    let n = tape.value(*sct).data.len();
    let mask = Arc::new(vec![1u8; n]);
    let t = tape.masked_mse(*sct, gt_ct, mask);
    Ok((t, tape.value(t).data[0]))
}
