//! 3D volumes, binary masks, intensity normalization, HU thresholding, and
//! the CVF v1 on-disk format.
//!
//! Axis convention, binding for the whole crate: dims are `(H, W, D)` where
//! `H` is the x-extent, `W` the y-extent and `D` the z-extent; memory is
//! x-fastest, so the linear index of voxel `(x, y, z)` is `x + H*(y + W*z)`.

use std::fmt;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("data length {got} does not match dims {dims:?} (expected {expected})")]
    DataLength {
        dims: (usize, usize, usize),
        expected: usize,
        got: usize,
    },
    #[error("voxel sizes must be strictly positive, got {0:?}")]
    VoxelSize((f32, f32, f32)),
    #[error("dims must be positive, got {0:?}")]
    ZeroDim((usize, usize, usize)),
    #[error("non-finite value at linear index {index}")]
    NonFinite { index: usize },
    #[error("normalized volume carries value {value} outside [0,1] at index {index}")]
    NotNormalized { index: usize, value: f32 },
    #[error("operation requires intensity kind {expected:?}, volume has {got:?}")]
    KindMismatch {
        expected: IntensityKind,
        got: IntensityKind,
    },
    #[error("mask value {value} at index {index} is not 0 or 1")]
    NotBinary { index: usize, value: f32 },
    #[error("dims mismatch: {a:?} vs {b:?}")]
    DimsMismatch {
        a: (usize, usize, usize),
        b: (usize, usize, usize),
    },
    #[error("volume file format error: {0}")]
    Format(String),
    #[error("payload size mismatch: expected {expected} bytes, found {got}")]
    PayloadSize { expected: usize, got: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// What the scalar values of a volume mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntensityKind {
    /// Hounsfield units (CT).
    Hu,
    /// Min-max normalized to [0, 1].
    Normalized,
    /// No fixed semantics (raw MRI contrasts, masks on disk).
    Arbitrary,
}

impl fmt::Display for IntensityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            IntensityKind::Hu => "HU",
            IntensityKind::Normalized => "normalized",
            IntensityKind::Arbitrary => "arbitrary",
        };
        f.write_str(s)
    }
}

impl IntensityKind {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "HU" => Some(IntensityKind::Hu),
            "normalized" => Some(IntensityKind::Normalized),
            "arbitrary" => Some(IntensityKind::Arbitrary),
            _ => None,
        }
    }
}

/// HU clamp bounds applied at phantom generation and at denormalization
/// output; they bound every metric's data range.
pub const HU_MIN: f32 = -1024.0;
pub const HU_MAX: f32 = 3000.0;

/// A 3D scalar grid with voxel spacing and intensity semantics. Immutable
/// after construction by convention: operations return new volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    pub dims: (usize, usize, usize),
    pub voxel_mm: (f32, f32, f32),
    pub data: Vec<f32>,
    pub kind: IntensityKind,
}

impl Volume3D {
    pub fn new(
        dims: (usize, usize, usize),
        voxel_mm: (f32, f32, f32),
        data: Vec<f32>,
        kind: IntensityKind,
    ) -> Result<Self, VolumeError> {
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(VolumeError::ZeroDim(dims));
        }
        let expected = dims.0 * dims.1 * dims.2;
        if data.len() != expected {
            return Err(VolumeError::DataLength {
                dims,
                expected,
                got: data.len(),
            });
        }
        if !(voxel_mm.0 > 0.0 && voxel_mm.1 > 0.0 && voxel_mm.2 > 0.0) {
            return Err(VolumeError::VoxelSize(voxel_mm));
        }
        if kind == IntensityKind::Normalized {
            for (index, &value) in data.iter().enumerate() {
                if !(0.0..=1.0).contains(&value) {
                    return Err(VolumeError::NotNormalized { index, value });
                }
            }
        }
        Ok(Volume3D {
            dims,
            voxel_mm,
            data,
            kind,
        })
    }

    pub fn zeros(dims: (usize, usize, usize), kind: IntensityKind) -> Self {
        Volume3D::new(dims, (1.0, 1.0, 1.0), vec![0.0; dims.0 * dims.1 * dims.2], kind)
            .expect("zero volume is always valid")
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Linear index of voxel `(x, y, z)`; x fastest.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims.0 && y < self.dims.1 && z < self.dims.2);
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    /// Coordinates `(x, y, z)` of a linear index.
    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        let (h, w, _) = self.dims;
        (i % h, (i / h) % w, i / (h * w))
    }
}

/// A {0,1}-valued grid sharing the volume axis convention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask3D {
    pub dims: (usize, usize, usize),
    pub data: Vec<u8>,
}

impl BinaryMask3D {
    pub fn new(dims: (usize, usize, usize), data: Vec<u8>) -> Result<Self, VolumeError> {
        let expected = dims.0 * dims.1 * dims.2;
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(VolumeError::ZeroDim(dims));
        }
        if data.len() != expected {
            return Err(VolumeError::DataLength {
                dims,
                expected,
                got: data.len(),
            });
        }
        for (index, &v) in data.iter().enumerate() {
            if v > 1 {
                return Err(VolumeError::NotBinary {
                    index,
                    value: v as f32,
                });
            }
        }
        Ok(BinaryMask3D { dims, data })
    }

    pub fn empty(dims: (usize, usize, usize)) -> Self {
        BinaryMask3D {
            dims,
            data: vec![0u8; dims.0 * dims.1 * dims.2],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims.0 && y < self.dims.1 && z < self.dims.2);
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: u8) {
        debug_assert!(v <= 1);
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    /// Number of set voxels.
    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Linear indices of set voxels, ascending.
    pub fn set_indices(&self) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| (v == 1).then_some(i))
            .collect()
    }
}

/// The inverse data for a min-max normalization; `vmax >= vmin` always, and
/// `source_kind` remembers what the values meant before normalization so the
/// inverse can restore it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationRecord {
    pub vmin: f64,
    pub vmax: f64,
    pub source_kind: IntensityKind,
}

/// Min-max normalize to [0, 1].
///
/// A constant volume maps to all zeros with the record set to
/// `(c, c + 1)` so degenerate background-only inputs never abort a pipeline.
/// Non-finite values are rejected.
pub fn minmax_normalize(v: &Volume3D) -> Result<(Volume3D, NormalizationRecord), VolumeError> {
    let mut vmin = f64::INFINITY;
    let mut vmax = f64::NEG_INFINITY;
    for (index, &x) in v.data.iter().enumerate() {
        if !x.is_finite() {
            return Err(VolumeError::NonFinite { index });
        }
        let x = x as f64;
        vmin = vmin.min(x);
        vmax = vmax.max(x);
    }
    if vmax == vmin {
        let record = NormalizationRecord {
            vmin,
            vmax: vmin + 1.0,
            source_kind: v.kind,
        };
        let out = Volume3D::new(
            v.dims,
            v.voxel_mm,
            vec![0.0; v.data.len()],
            IntensityKind::Normalized,
        )?;
        return Ok((out, record));
    }
    let scale = 1.0 / (vmax - vmin);
    let data: Vec<f32> = v
        .data
        .iter()
        .map(|&x| (((x as f64) - vmin) * scale).clamp(0.0, 1.0) as f32)
        .collect();
    let out = Volume3D::new(v.dims, v.voxel_mm, data, IntensityKind::Normalized)?;
    Ok((
        out,
        NormalizationRecord {
            vmin,
            vmax,
            source_kind: v.kind,
        },
    ))
}

/// Invert a min-max normalization: `x -> x*(vmax - vmin) + vmin`.
///
/// The output takes the record's source kind; HU outputs are clamped to
/// `[HU_MIN, HU_MAX]`.
pub fn denormalize(v: &Volume3D, rec: &NormalizationRecord) -> Result<Volume3D, VolumeError> {
    if v.kind != IntensityKind::Normalized {
        return Err(VolumeError::KindMismatch {
            expected: IntensityKind::Normalized,
            got: v.kind,
        });
    }
    let span = rec.vmax - rec.vmin;
    let hu = rec.source_kind == IntensityKind::Hu;
    let data: Vec<f32> = v
        .data
        .iter()
        .map(|&x| {
            let y = (x as f64) * span + rec.vmin;
            let y = if hu {
                y.clamp(HU_MIN as f64, HU_MAX as f64)
            } else {
                y
            };
            y as f32
        })
        .collect();
    Volume3D::new(v.dims, v.voxel_mm, data, rec.source_kind)
}

/// Binary mask of voxels with value strictly greater than `t` (HU).
pub fn threshold_mask(v: &Volume3D, t: f32) -> Result<BinaryMask3D, VolumeError> {
    if v.kind != IntensityKind::Hu {
        return Err(VolumeError::KindMismatch {
            expected: IntensityKind::Hu,
            got: v.kind,
        });
    }
    let data: Vec<u8> = v.data.iter().map(|&x| u8::from(x > t)).collect();
    BinaryMask3D::new(v.dims, data)
}

// ---------------------------------------------------------------------------
// CVF v1 file format: a UTF-8 text header plus a raw little-endian f32
// payload in x-fastest order. The header names the payload by relative path.
// ---------------------------------------------------------------------------

fn io_err(path: &Path, source: std::io::Error) -> VolumeError {
    VolumeError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write `v` to `path` (the text header); the payload goes next to it with
/// the same file stem and a `.raw` extension.
pub fn save_volume(v: &Volume3D, path: &Path) -> Result<(), VolumeError> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| VolumeError::Format(format!("path {} has no file stem", path.display())))?;
    let payload_name = format!("{stem}.raw");
    let header = format!(
        "cvf_version: 1\ndims: {} {} {}\nvoxel_mm: {} {} {}\nkind: {}\npayload: {}\n",
        v.dims.0, v.dims.1, v.dims.2, v.voxel_mm.0, v.voxel_mm.1, v.voxel_mm.2, v.kind, payload_name
    );
    let mut payload = Vec::with_capacity(v.data.len() * 4);
    for &x in &v.data {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    let payload_path = path.with_file_name(&payload_name);
    fs::write(path, header).map_err(|e| io_err(path, e))?;
    fs::write(&payload_path, payload).map_err(|e| io_err(&payload_path, e))?;
    Ok(())
}

/// Read a CVF v1 volume.
pub fn load_volume(path: &Path) -> Result<Volume3D, VolumeError> {
    let header = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut version = None;
    let mut dims = None;
    let mut voxel = None;
    let mut kind = None;
    let mut payload = None;
    for line in header.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| VolumeError::Format(format!("malformed header line {line:?}")))?;
        let value = value.trim();
        let slot: &mut Option<String> = match key.trim() {
            "cvf_version" => &mut version,
            "dims" => &mut dims,
            "voxel_mm" => &mut voxel,
            "kind" => &mut kind,
            "payload" => &mut payload,
            other => {
                return Err(VolumeError::Format(format!("unknown header key {other:?}")));
            }
        };
        if slot.is_some() {
            return Err(VolumeError::Format(format!("duplicate header key {:?}", key.trim())));
        }
        *slot = Some(value.to_string());
    }
    let version = version.ok_or_else(|| VolumeError::Format("missing cvf_version".into()))?;
    if version != "1" {
        return Err(VolumeError::Format(format!(
            "unknown cvf_version {version:?}"
        )));
    }
    let dims = dims.ok_or_else(|| VolumeError::Format("missing dims".into()))?;
    let dims = parse_triple::<usize>(&dims)
        .ok_or_else(|| VolumeError::Format(format!("bad dims line {dims:?}")))?;
    let voxel = voxel.ok_or_else(|| VolumeError::Format("missing voxel_mm".into()))?;
    let voxel = parse_triple::<f32>(&voxel)
        .ok_or_else(|| VolumeError::Format(format!("bad voxel_mm line {voxel:?}")))?;
    let kind = kind.ok_or_else(|| VolumeError::Format("missing kind".into()))?;
    let kind = IntensityKind::parse(&kind)
        .ok_or_else(|| VolumeError::Format(format!("unknown kind {kind:?}")))?;
    let payload = payload.ok_or_else(|| VolumeError::Format("missing payload".into()))?;

    let payload_path = path.with_file_name(&payload);
    let bytes = fs::read(&payload_path).map_err(|e| io_err(&payload_path, e))?;
    let expected = dims
        .0
        .checked_mul(dims.1)
        .and_then(|v| v.checked_mul(dims.2))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| VolumeError::Format(format!("dims overflow {dims:?}")))?;
    if bytes.len() != expected {
        return Err(VolumeError::PayloadSize {
            expected,
            got: bytes.len(),
        });
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    // Bit-preserving load: skip the normalized-range check here so that
    // save/load is exactly the identity; the check applies on construction
    // through the public API instead.
    let mut v = Volume3D::new(dims, voxel, data, IntensityKind::Arbitrary)?;
    v.kind = kind;
    Ok(v)
}

/// Write a mask as a CVF volume of kind `arbitrary` with {0,1} values.
pub fn save_mask(m: &BinaryMask3D, path: &Path) -> Result<(), VolumeError> {
    let data: Vec<f32> = m.data.iter().map(|&v| v as f32).collect();
    let v = Volume3D::new(m.dims, (1.0, 1.0, 1.0), data, IntensityKind::Arbitrary)?;
    save_volume(&v, path)
}

/// Read a mask written by [`save_mask`]; values must be exactly 0 or 1.
pub fn load_mask(path: &Path) -> Result<BinaryMask3D, VolumeError> {
    let v = load_volume(path)?;
    let mut data = Vec::with_capacity(v.data.len());
    for (index, &x) in v.data.iter().enumerate() {
        if x == 0.0 {
            data.push(0u8);
        } else if x == 1.0 {
            data.push(1u8);
        } else {
            return Err(VolumeError::NotBinary { index, value: x });
        }
    }
    BinaryMask3D::new(v.dims, data)
}

fn parse_triple<T: std::str::FromStr>(s: &str) -> Option<(T, T, T)> {
    let mut it = s.split_whitespace();
    let a = it.next()?.parse().ok()?;
    let b = it.next()?.parse().ok()?;
    let c = it.next()?.parse().ok()?;
    if it.next().is_some() {
        return None;
    }
    Some((a, b, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn vol(dims: (usize, usize, usize), data: Vec<f32>, kind: IntensityKind) -> Volume3D {
        Volume3D::new(dims, (1.0, 1.0, 1.0), data, kind).unwrap()
    }

    #[test]
    fn normalize_maps_endpoints_linearly() {
        let v = vol((3, 1, 1), vec![0.0, 250.0, 500.0], IntensityKind::Hu);
        let (n, rec) = minmax_normalize(&v).unwrap();
        assert_eq!(n.data, vec![0.0, 0.5, 1.0]);
        assert_eq!((rec.vmin, rec.vmax), (0.0, 500.0));
        assert_eq!(n.kind, IntensityKind::Normalized);
    }

    #[test]
    fn normalize_constant_volume_uses_degenerate_rule() {
        let v = vol((2, 2, 1), vec![7.5; 4], IntensityKind::Hu);
        let (n, rec) = minmax_normalize(&v).unwrap();
        assert!(n.data.iter().all(|&x| x == 0.0));
        assert_eq!((rec.vmin, rec.vmax), (7.5, 8.5));
    }

    #[test]
    fn normalize_rejects_non_finite() {
        let v = vol((2, 1, 1), vec![1.0, f32::NAN], IntensityKind::Arbitrary);
        match minmax_normalize(&v) {
            Err(VolumeError::NonFinite { index }) => assert_eq!(index, 1),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn denormalize_endpoints() {
        let rec = NormalizationRecord {
            vmin: -1000.0,
            vmax: 3000.0,
            source_kind: IntensityKind::Hu,
        };
        let zeros = vol((2, 2, 2), vec![0.0; 8], IntensityKind::Normalized);
        let ones = vol((2, 2, 2), vec![1.0; 8], IntensityKind::Normalized);
        let lo = denormalize(&zeros, &rec).unwrap();
        let hi = denormalize(&ones, &rec).unwrap();
        assert!(lo.data.iter().all(|&x| x == -1000.0));
        assert!(hi.data.iter().all(|&x| x == 3000.0));
        assert_eq!(lo.kind, IntensityKind::Hu);
    }

    #[test]
    fn denormalize_requires_normalized_kind() {
        let rec = NormalizationRecord {
            vmin: 0.0,
            vmax: 1.0,
            source_kind: IntensityKind::Hu,
        };
        let v = vol((1, 1, 1), vec![0.5], IntensityKind::Hu);
        assert!(matches!(
            denormalize(&v, &rec),
            Err(VolumeError::KindMismatch { .. })
        ));
    }

    #[test]
    fn normalize_roundtrip_on_random_volume() {
        let mut rng = crate::seed::stream(11, 0);
        let data: Vec<f32> = (0..512).map(|_| rng.gen_range(-80.0..80.0)).collect();
        let v = vol((8, 8, 8), data, IntensityKind::Hu);
        let (n, rec) = minmax_normalize(&v).unwrap();
        let back = denormalize(&n, &rec).unwrap();
        for (a, b) in v.data.iter().zip(back.data.iter()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn normalization_is_monotone() {
        let mut rng = crate::seed::stream(12, 0);
        let data: Vec<f32> = (0..256).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let v = vol((8, 8, 4), data, IntensityKind::Arbitrary);
        let (n, _) = minmax_normalize(&v).unwrap();
        let mut pairs: Vec<(f32, f32)> = v.data.iter().copied().zip(n.data.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in pairs.windows(2) {
            assert!(w[0].1 <= w[1].1);
        }
    }

    #[test]
    fn threshold_is_strict() {
        let v = vol((3, 1, 1), vec![249.0, 250.0, 251.0], IntensityKind::Hu);
        let m = threshold_mask(&v, 250.0).unwrap();
        assert_eq!(m.data, vec![0, 0, 1]);
    }

    #[test]
    fn threshold_count_non_increasing_in_t() {
        let mut rng = crate::seed::stream(13, 0);
        let data: Vec<f32> = (0..512).map(|_| rng.gen_range(-1100.0..2000.0)).collect();
        let v = vol((8, 8, 8), data, IntensityKind::Hu);
        let mut last = usize::MAX;
        for t in [-1200.0, -500.0, 0.0, 250.0, 1000.0, 2500.0] {
            let c = threshold_mask(&v, t).unwrap().count();
            assert!(c <= last);
            last = c;
        }
    }

    #[test]
    fn threshold_requires_hu() {
        let v = vol((1, 1, 1), vec![0.5], IntensityKind::Normalized);
        assert!(matches!(
            threshold_mask(&v, 0.2),
            Err(VolumeError::KindMismatch { .. })
        ));
    }

    #[test]
    fn empty_mask_when_all_below_threshold() {
        let v = vol((2, 2, 2), vec![10.0; 8], IntensityKind::Hu);
        assert_eq!(threshold_mask(&v, 250.0).unwrap().count(), 0);
    }

    #[test]
    fn file_roundtrip_is_bit_identical() {
        let dir = tempdir();
        let mut rng = crate::seed::stream(14, 0);
        let data: Vec<f32> = (0..4096).map(|_| rng.gen_range(-1000.0f32..3000.0)).collect();
        let v = Volume3D::new((16, 16, 16), (0.5, 0.7, 1.25), data, IntensityKind::Hu).unwrap();
        let path = dir.join("vol.cvf");
        save_volume(&v, &path).unwrap();
        let loaded = load_volume(&path).unwrap();
        assert_eq!(loaded.dims, v.dims);
        assert_eq!(loaded.voxel_mm, v.voxel_mm);
        assert_eq!(loaded.kind, v.kind);
        let a: Vec<u32> = v.data.iter().map(|x| x.to_bits()).collect();
        let b: Vec<u32> = loaded.data.iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let dir = tempdir();
        let v = Volume3D::zeros((4, 4, 4), IntensityKind::Arbitrary);
        let path = dir.join("t.cvf");
        save_volume(&v, &path).unwrap();
        let raw = dir.join("t.raw");
        let bytes = fs::read(&raw).unwrap();
        fs::write(&raw, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            load_volume(&path),
            Err(VolumeError::PayloadSize { .. })
        ));
    }

    #[test]
    fn dims_payload_mismatch_is_a_format_error() {
        let dir = tempdir();
        let path = dir.join("m.cvf");
        fs::write(
            &path,
            "cvf_version: 1\ndims: 2 2 2\nvoxel_mm: 1 1 1\nkind: arbitrary\npayload: m.raw\n",
        )
        .unwrap();
        fs::write(dir.join("m.raw"), vec![0u8; 7 * 4]).unwrap();
        assert!(matches!(
            load_volume(&path),
            Err(VolumeError::PayloadSize {
                expected: 32,
                got: 28
            })
        ));
    }

    #[test]
    fn unknown_version_rejected() {
        let dir = tempdir();
        let path = dir.join("v.cvf");
        fs::write(
            &path,
            "cvf_version: 2\ndims: 1 1 1\nvoxel_mm: 1 1 1\nkind: HU\npayload: v.raw\n",
        )
        .unwrap();
        fs::write(dir.join("v.raw"), vec![0u8; 4]).unwrap();
        assert!(matches!(load_volume(&path), Err(VolumeError::Format(_))));
    }

    #[test]
    fn mask_roundtrip() {
        let dir = tempdir();
        let m = BinaryMask3D::new((2, 2, 2), vec![1, 0, 0, 1, 1, 0, 1, 0]).unwrap();
        let path = dir.join("mask.cvf");
        save_mask(&m, &path).unwrap();
        assert_eq!(load_mask(&path).unwrap(), m);
    }

    #[test]
    fn mask_load_rejects_non_binary_values() {
        let dir = tempdir();
        let v = vol((1, 1, 1), vec![0.5], IntensityKind::Arbitrary);
        let path = dir.join("bad.cvf");
        save_volume(&v, &path).unwrap();
        assert!(matches!(
            load_mask(&path),
            Err(VolumeError::NotBinary { .. })
        ));
    }

    #[test]
    fn coords_inverts_index() {
        let v = Volume3D::zeros((3, 4, 5), IntensityKind::Arbitrary);
        for z in 0..5 {
            for y in 0..4 {
                for x in 0..3 {
                    assert_eq!(v.coords(v.index(x, y, z)), (x, y, z));
                }
            }
        }
    }

    fn tempdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "sctforge-vol-{}-{}",
            std::process::id(),
            rand::random::<u32>()
        ));
        fs::create_dir_all(&dir).unwrap();
        dir
    }
}
