//! Binary morphology: iterated dilation, attention-region construction from
//! predicted segmentations, and the single-task baseline's post-processing
//! (threshold plus group-mean bone template).

use thiserror::Error;

use crate::volume::{BinaryMask3D, Volume3D, VolumeError, HU_MIN};

#[derive(Debug, Error)]
pub enum MorphologyError {
    #[error("masks have mismatched dims: {a:?} vs {b:?}")]
    DimsMismatch {
        a: (usize, usize, usize),
        b: (usize, usize, usize),
    },
    #[error("group template needs at least one mask")]
    NoMasks,
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Structuring element connectivity. Face-6 is the default everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StructuringElement {
    #[default]
    Face6,
    Edge18,
    Vertex26,
}

impl StructuringElement {
    /// Neighbor offsets excluding the origin (the origin is always part of
    /// the element, making dilation extensive).
    pub fn offsets(self) -> Vec<(isize, isize, isize)> {
        let mut out = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        StructuringElement::Face6 => manhattan == 1,
                        StructuringElement::Edge18 => manhattan <= 2,
                        StructuringElement::Vertex26 => true,
                    };
                    if keep {
                        out.push((dx, dy, dz));
                    }
                }
            }
        }
        out
    }
}

/// Iterated Minkowski dilation. Structure voxels falling outside the grid
/// are discarded (no wraparound). Zero iterations returns the input.
pub fn binary_dilate(
    mask: &BinaryMask3D,
    element: StructuringElement,
    iterations: usize,
) -> BinaryMask3D {
    let offsets = element.offsets();
    let (h, w, d) = mask.dims;
    let mut current = mask.clone();
    for _ in 0..iterations {
        let mut next = current.clone();
        for z in 0..d {
            for y in 0..w {
                for x in 0..h {
                    if current.get(x, y, z) == 0 {
                        continue;
                    }
                    for &(dx, dy, dz) in &offsets {
                        let nx = x as isize + dx;
                        let ny = y as isize + dy;
                        let nz = z as isize + dz;
                        if nx < 0
                            || ny < 0
                            || nz < 0
                            || nx >= h as isize
                            || ny >= w as isize
                            || nz >= d as isize
                        {
                            continue;
                        }
                        next.set(nx as usize, ny as usize, nz as usize, 1);
                    }
                }
            }
        }
        current = next;
    }
    current
}

/// Where an attention region came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionSource {
    PredictedSeg,
    GroundTruthSeg,
}

/// The dilated voxel set R restricting the local regression loss. Always a
/// superset of the binarized source mask.
#[derive(Debug, Clone)]
pub struct AttentionRegion {
    pub voxels: BinaryMask3D,
    pub source: RegionSource,
    pub dilation_iters: usize,
}

impl AttentionRegion {
    pub fn size(&self) -> usize {
        self.voxels.count()
    }

    /// Complement region (used by the auxiliary soft-tissue branch).
    pub fn complement(&self) -> BinaryMask3D {
        let data = self.voxels.data.iter().map(|&v| 1 - v).collect();
        BinaryMask3D {
            dims: self.voxels.dims,
            data,
        }
    }
}

/// Default binarization threshold applied to probabilities (strict `>`).
pub const BINARIZE_THRESHOLD: f64 = 0.5;
/// Default dilation iteration count for attention regions.
pub const ATTENTION_DILATION_ITERS: usize = 2;

/// Binarize a probability patch at `threshold` (strict `>`), then dilate.
///
/// Probabilities are expected in [0, 1]; an empty region is legal and the
/// loss layer decides how to handle it.
pub fn attention_region(
    seg_prob: &[f64],
    dims: (usize, usize, usize),
    threshold: f64,
    iterations: usize,
    source: RegionSource,
) -> AttentionRegion {
    debug_assert_eq!(seg_prob.len(), dims.0 * dims.1 * dims.2);
    let data: Vec<u8> = seg_prob.iter().map(|&p| u8::from(p > threshold)).collect();
    let mask = BinaryMask3D { dims, data };
    let voxels = binary_dilate(&mask, StructuringElement::Face6, iterations);
    AttentionRegion {
        voxels,
        source,
        dilation_iters: iterations,
    }
}

/// Group-level mean bone template: voxel-wise mean over masks, binarized at
/// 0.5 (strict `>`), then dilated once with the face-6 element.
pub fn group_mean_template(masks: &[BinaryMask3D]) -> Result<BinaryMask3D, MorphologyError> {
    let first = masks.first().ok_or(MorphologyError::NoMasks)?;
    for m in masks {
        if m.dims != first.dims {
            return Err(MorphologyError::DimsMismatch {
                a: first.dims,
                b: m.dims,
            });
        }
    }
    let n = masks.len() as f64;
    let len = first.data.len();
    let mut mean = vec![0f64; len];
    for m in masks {
        for (acc, &v) in mean.iter_mut().zip(m.data.iter()) {
            *acc += v as f64;
        }
    }
    let data: Vec<u8> = mean.iter().map(|&s| u8::from(s / n > 0.5)).collect();
    let binarized = BinaryMask3D {
        dims: first.dims,
        data,
    };
    Ok(binary_dilate(&binarized, StructuringElement::Face6, 1))
}

/// Single-task post-processing: voxels outside the template are forced to
/// the air floor; voxels inside are left untouched.
pub fn postprocess_single_task(
    sct: &Volume3D,
    template: &BinaryMask3D,
) -> Result<Volume3D, MorphologyError> {
    if sct.dims != template.dims {
        return Err(MorphologyError::DimsMismatch {
            a: sct.dims,
            b: template.dims,
        });
    }
    let data: Vec<f32> = sct
        .data
        .iter()
        .zip(template.data.iter())
        .map(|(&v, &m)| if m == 1 { v } else { HU_MIN })
        .collect();
    Ok(Volume3D::new(sct.dims, sct.voxel_mm, data, sct.kind)?)
}

/// The skull mask a post-processed single-task map yields for bone metrics:
/// inside the template and strictly above the HU threshold.
pub fn single_task_skull_mask(
    sct: &Volume3D,
    template: &BinaryMask3D,
    hu_threshold: f32,
) -> Result<BinaryMask3D, MorphologyError> {
    if sct.dims != template.dims {
        return Err(MorphologyError::DimsMismatch {
            a: sct.dims,
            b: template.dims,
        });
    }
    let data: Vec<u8> = sct
        .data
        .iter()
        .zip(template.data.iter())
        .map(|(&v, &m)| u8::from(m == 1 && v > hu_threshold))
        .collect();
    Ok(BinaryMask3D {
        dims: sct.dims,
        data,
    })
}
