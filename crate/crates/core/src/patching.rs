//! Deterministic patch tiling, constrained random patch sampling, and
//! overlap-averaged volume reconstruction.
//!
//! The tiling rule per axis: regular origins 0, S, 2S, ... while they fit,
//! plus a boundary-snapped final origin `dim - P` whenever the last regular
//! step undershoots. The per-axis origin count is therefore
//! `ceil((dim - P)/S) + 1`, which for the paper-scale worked example
//! (207, 243, 226), patch 128, stride 6 gives 15 * 21 * 18 = 5670 patches;
//! the floor-only variant (no snap) gives 4760 and stays exposed for audit.

use rand::Rng;
use thiserror::Error;

use crate::volume::{BinaryMask3D, IntensityKind, Volume3D, VolumeError};

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("patch {patch:?} does not fit in dims {dims:?}")]
    PatchTooLarge {
        dims: (usize, usize, usize),
        patch: (usize, usize, usize),
    },
    #[error("stride must be at least 1, got {0:?}")]
    ZeroStride((usize, usize, usize)),
    #[error("patch at origin {origin:?} size {size:?} exceeds dims {dims:?}")]
    OutOfBounds {
        origin: (usize, usize, usize),
        size: (usize, usize, usize),
        dims: (usize, usize, usize),
    },
    #[error("sampling requires a nonempty skull label")]
    EmptySkullPool,
    #[error("sampling requires at least one background voxel in the valid-center region")]
    EmptyBackgroundPool,
    #[error("channel dims mismatch: {a:?} vs {b:?}")]
    ChannelDims {
        a: (usize, usize, usize),
        b: (usize, usize, usize),
    },
    #[error("voxel {coord:?} is covered by no patch")]
    Uncovered { coord: (usize, usize, usize) },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Why a patch was sampled; biases the sampling location only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchPurpose {
    Segmentation,
    Regression,
}

/// Deterministic tiling geometry over one volume.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub dims: (usize, usize, usize),
    pub patch: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    /// Patch-corner coordinates, unique, sorted lexicographically by (x, y, z).
    pub origins: Vec<(usize, usize, usize)>,
    pub n_patch: usize,
}

fn axis_origins(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let span = dim - patch;
    let k = span / stride;
    let mut out: Vec<usize> = (0..=k).map(|i| i * stride).collect();
    if span % stride != 0 {
        out.push(span);
    }
    out
}

/// Per-axis origin count with the boundary snap: `ceil((dim - P)/S) + 1`.
pub fn axis_count(dim: usize, patch: usize, stride: usize) -> usize {
    let span = dim - patch;
    span.div_ceil(stride) + 1
}

/// Per-axis origin count without the boundary snap: `floor((dim - P)/S) + 1`.
/// Exposed for audit; this variant under-covers whenever the stride does not
/// divide `dim - P`.
pub fn axis_count_floor_only(dim: usize, patch: usize, stride: usize) -> usize {
    (dim - patch) / stride + 1
}

/// Total patch count of the floor-only (no boundary snap) tiling.
pub fn floor_only_patch_count(
    dims: (usize, usize, usize),
    patch: (usize, usize, usize),
    stride: (usize, usize, usize),
) -> usize {
    axis_count_floor_only(dims.0, patch.0, stride.0)
        * axis_count_floor_only(dims.1, patch.1, stride.1)
        * axis_count_floor_only(dims.2, patch.2, stride.2)
}

/// Build the covering patch grid for `dims`.
pub fn build_patch_grid(
    dims: (usize, usize, usize),
    patch: (usize, usize, usize),
    stride: (usize, usize, usize),
) -> Result<PatchGrid, PatchError> {
    if patch.0 > dims.0 || patch.1 > dims.1 || patch.2 > dims.2 {
        return Err(PatchError::PatchTooLarge { dims, patch });
    }
    if stride.0 == 0 || stride.1 == 0 || stride.2 == 0 {
        return Err(PatchError::ZeroStride(stride));
    }
    let xs = axis_origins(dims.0, patch.0, stride.0);
    let ys = axis_origins(dims.1, patch.1, stride.1);
    let zs = axis_origins(dims.2, patch.2, stride.2);
    let mut origins = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &x in &xs {
        for &y in &ys {
            for &z in &zs {
                origins.push((x, y, z));
            }
        }
    }
    let n_patch = origins.len();
    Ok(PatchGrid {
        dims,
        patch,
        stride,
        origins,
        n_patch,
    })
}

/// Sampling policy: which fraction of patch centers is seeded on skull
/// voxels, and how many patches each subject contributes per epoch.
#[derive(Debug, Clone, Copy)]
pub struct SamplingPolicy {
    pub purpose: PatchPurpose,
    pub skull_center_fraction: f64,
    pub patches_per_subject: usize,
}

impl SamplingPolicy {
    pub fn regression() -> Self {
        SamplingPolicy {
            purpose: PatchPurpose::Regression,
            skull_center_fraction: 1.0,
            patches_per_subject: 100,
        }
    }

    pub fn segmentation() -> Self {
        SamplingPolicy {
            purpose: PatchPurpose::Segmentation,
            skull_center_fraction: 0.8,
            patches_per_subject: 100,
        }
    }
}

/// One sampled patch location: the raw drawn center and the patch-corner
/// origin after clamping the patch into the volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampledCenter {
    pub center: (usize, usize, usize),
    pub origin: (usize, usize, usize),
    pub skull_seeded: bool,
}

fn clamp_origin(center: usize, patch: usize, dim: usize) -> usize {
    let half = patch / 2;
    let lo = center.saturating_sub(half);
    lo.min(dim - patch)
}

/// Draw `n` patch centers: exactly `round(f * n)` from skull voxels (the
/// skull-seeded block comes first), the remainder uniformly from background
/// voxels whose centered patch already fits without clamping. Skull-seeded
/// centers are clamped so the patch fits; determinism follows from the seed.
pub fn sample_patch_centers(
    label: &BinaryMask3D,
    policy: &SamplingPolicy,
    n: usize,
    patch: (usize, usize, usize),
    seed: u64,
) -> Result<Vec<SampledCenter>, PatchError> {
    let dims = label.dims;
    if patch.0 > dims.0 || patch.1 > dims.1 || patch.2 > dims.2 {
        return Err(PatchError::PatchTooLarge { dims, patch });
    }
    let n_skull = (policy.skull_center_fraction * n as f64).round() as usize;
    let n_skull = n_skull.min(n);
    let n_background = n - n_skull;

    let skull_pool = label.set_indices();
    if n_skull > 0 && skull_pool.is_empty() {
        return Err(PatchError::EmptySkullPool);
    }
    let mut background_pool = Vec::new();
    if n_background > 0 {
        for (i, &v) in label.data.iter().enumerate() {
            if v == 1 {
                continue;
            }
            let (x, y, z) = coords(dims, i);
            if clamp_origin(x, patch.0, dims.0) == x.saturating_sub(patch.0 / 2)
                && x >= patch.0 / 2
                && clamp_origin(y, patch.1, dims.1) == y.saturating_sub(patch.1 / 2)
                && y >= patch.1 / 2
                && clamp_origin(z, patch.2, dims.2) == z.saturating_sub(patch.2 / 2)
                && z >= patch.2 / 2
            {
                background_pool.push(i);
            }
        }
        if background_pool.is_empty() {
            return Err(PatchError::EmptyBackgroundPool);
        }
    }

    let mut rng = crate::seed::stream(seed, 0x5A4D);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n_skull {
        let i = skull_pool[rng.gen_range(0..skull_pool.len())];
        let center = coords(dims, i);
        out.push(SampledCenter {
            center,
            origin: (
                clamp_origin(center.0, patch.0, dims.0),
                clamp_origin(center.1, patch.1, dims.1),
                clamp_origin(center.2, patch.2, dims.2),
            ),
            skull_seeded: true,
        });
    }
    for _ in 0..n_background {
        let i = background_pool[rng.gen_range(0..background_pool.len())];
        let center = coords(dims, i);
        out.push(SampledCenter {
            center,
            origin: (
                clamp_origin(center.0, patch.0, dims.0),
                clamp_origin(center.1, patch.1, dims.1),
                clamp_origin(center.2, patch.2, dims.2),
            ),
            skull_seeded: false,
        });
    }
    Ok(out)
}

fn coords(dims: (usize, usize, usize), i: usize) -> (usize, usize, usize) {
    (i % dims.0, (i / dims.0) % dims.1, i / (dims.0 * dims.1))
}

/// One extracted multichannel patch.
#[derive(Debug, Clone)]
pub struct PatchSample {
    pub origin: (usize, usize, usize),
    pub size: (usize, usize, usize),
    /// One x-fastest array per channel, each of length `size` product.
    pub channels: Vec<Vec<f32>>,
    pub purpose: PatchPurpose,
}

/// Copy a patch out of a multichannel stack. Never pads: out-of-bounds
/// requests are errors.
pub fn extract_patch(
    stack: &[&Volume3D],
    origin: (usize, usize, usize),
    size: (usize, usize, usize),
    purpose: PatchPurpose,
) -> Result<PatchSample, PatchError> {
    let first = stack.first().expect("extract_patch needs at least one channel");
    let dims = first.dims;
    for v in stack {
        if v.dims != dims {
            return Err(PatchError::ChannelDims {
                a: dims,
                b: v.dims,
            });
        }
    }
    if origin.0 + size.0 > dims.0 || origin.1 + size.1 > dims.1 || origin.2 + size.2 > dims.2 {
        return Err(PatchError::OutOfBounds { origin, size, dims });
    }
    let mut channels = Vec::with_capacity(stack.len());
    for v in stack {
        let mut data = Vec::with_capacity(size.0 * size.1 * size.2);
        for z in 0..size.2 {
            for y in 0..size.1 {
                let row = v.index(origin.0, origin.1 + y, origin.2 + z);
                data.extend_from_slice(&v.data[row..row + size.0]);
            }
        }
        channels.push(data);
    }
    Ok(PatchSample {
        origin,
        size,
        channels,
        purpose,
    })
}

/// Reassemble a volume from (origin, size, values) patches by voxel-wise
/// arithmetic mean over every patch covering each voxel. Sums accumulate in
/// f64, so identical overlapping values reconstruct exactly.
pub fn reconstruct(
    patches: &[((usize, usize, usize), (usize, usize, usize), &[f32])],
    dims: (usize, usize, usize),
    voxel_mm: (f32, f32, f32),
    kind: IntensityKind,
) -> Result<Volume3D, PatchError> {
    let len = dims.0 * dims.1 * dims.2;
    let mut sum = vec![0f64; len];
    let mut count = vec![0u32; len];
    for &(origin, size, values) in patches {
        if origin.0 + size.0 > dims.0 || origin.1 + size.1 > dims.1 || origin.2 + size.2 > dims.2 {
            return Err(PatchError::OutOfBounds { origin, size, dims });
        }
        debug_assert_eq!(values.len(), size.0 * size.1 * size.2);
        for z in 0..size.2 {
            for y in 0..size.1 {
                let src = (z * size.1 + y) * size.0;
                let dst = origin.0 + dims.0 * ((origin.1 + y) + dims.1 * (origin.2 + z));
                for x in 0..size.0 {
                    sum[dst + x] += values[src + x] as f64;
                    count[dst + x] += 1;
                }
            }
        }
    }
    if let Some(i) = count.iter().position(|&c| c == 0) {
        return Err(PatchError::Uncovered {
            coord: coords(dims, i),
        });
    }
    let data: Vec<f32> = sum
        .iter()
        .zip(count.iter())
        .map(|(&s, &c)| (s / c as f64) as f32)
        .collect();
    Ok(Volume3D::new(dims, voxel_mm, data, kind)?)
}

/// Convenience: reconstruct from owned patch buffers.
pub fn reconstruct_owned(
    patches: &[((usize, usize, usize), (usize, usize, usize), Vec<f32>)],
    dims: (usize, usize, usize),
    voxel_mm: (f32, f32, f32),
    kind: IntensityKind,
) -> Result<Volume3D, PatchError> {
    let borrowed: Vec<((usize, usize, usize), (usize, usize, usize), &[f32])> = patches
        .iter()
        .map(|(o, s, v)| (*o, *s, v.as_slice()))
        .collect();
    reconstruct(&borrowed, dims, voxel_mm, kind)
}
