//! Evaluation metrics: correlation, overlap, structural similarity, PSNR,
//! and region-restricted mean absolute error.
//!
//! All reductions run in f64 regardless of input precision. SSIM uses
//! summed-area tables so whole-volume evaluation stays cheap; tests pin it
//! against a direct per-window loop.

use thiserror::Error;

use crate::volume::{BinaryMask3D, Volume3D};

/// CT threshold separating head foreground from surrounding air.
pub const HEAD_FOREGROUND_HU: f32 = -500.0;

/// Default SSIM window edge length.
pub const SSIM_WINDOW: usize = 7;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("inputs have different sizes ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("volume dims differ: {0:?} vs {1:?}")]
    DimsMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("need at least 2 voxels, got {0}")]
    TooFewVoxels(usize),
    #[error("correlation undefined: zero variance input")]
    ZeroVariance,
    #[error("SSIM window {window} exceeds volume dims {dims:?}")]
    WindowTooLarge {
        window: usize,
        dims: (usize, usize, usize),
    },
    #[error("data range must be positive and finite, got {0}")]
    BadDataRange(f64),
    #[error("region restriction selects no voxels")]
    EmptyRegion,
}

/// Per-subject metric row; one per (model variant, subject).
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub subject_id: String,
    pub pearson: f64,
    pub spearman: f64,
    pub dice: f64,
    pub jaccard: f64,
    pub ssim: f64,
    pub psnr_db: f64,
    pub mae_bone_hu: f64,
    pub mae_brain_hu: f64,
}

/// Dice and Jaccard overlap of two masks; both empty is (1, 1) by convention.
pub fn dice_jaccard(a: &BinaryMask3D, b: &BinaryMask3D) -> Result<(f64, f64), MetricsError> {
    if a.dims != b.dims {
        return Err(MetricsError::DimsMismatch(a.dims, b.dims));
    }
    let mut inter = 0u64;
    let mut na = 0u64;
    let mut nb = 0u64;
    for (&x, &y) in a.data.iter().zip(b.data.iter()) {
        na += x as u64;
        nb += y as u64;
        inter += (x & y) as u64;
    }
    if na + nb == 0 {
        return Ok((1.0, 1.0));
    }
    let dice = 2.0 * inter as f64 / (na + nb) as f64;
    let union = na + nb - inter;
    let jaccard = inter as f64 / union as f64;
    Ok((dice, jaccard))
}

fn pearson_f64(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(MetricsError::TooFewVoxels(a.len()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let dx = x - ma;
        let dy = y - mb;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    // Round-off can push a perfect correlation an ulp past 1.
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Product-moment correlation over flattened voxels.
pub fn pearson(a: &[f32], b: &[f32]) -> Result<f64, MetricsError> {
    let af: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let bf: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    pearson_f64(&af, &bf)
}

fn midranks(v: &[f32]) -> Vec<f64> {
    let n = v.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).expect("finite values"));
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        // Ties share the average of the ranks they span (midranks).
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Rank correlation: Pearson of midranks, ties averaged.
pub fn spearman(a: &[f32], b: &[f32]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(MetricsError::TooFewVoxels(a.len()));
    }
    pearson_f64(&midranks(a), &midranks(b))
}

/// 3D summed-area table: `sat[x, y, z]` holds the sum over `[0,x) × [0,y) × [0,z)`.
struct Sat {
    data: Vec<f64>,
    hw: (usize, usize),
}

impl Sat {
    fn build<F: Fn(usize) -> f64>(dims: (usize, usize, usize), value: F) -> Self {
        let (h, w, d) = dims;
        let (sh, sw) = (h + 1, w + 1);
        let mut data = vec![0.0f64; sh * sw * (d + 1)];
        let at = |x: usize, y: usize, z: usize| x + sh * (y + sw * z);
        let mut i = 0;
        for z in 0..d {
            for y in 0..w {
                for x in 0..h {
                    data[at(x + 1, y + 1, z + 1)] = value(i)
                        + data[at(x, y + 1, z + 1)]
                        + data[at(x + 1, y, z + 1)]
                        + data[at(x + 1, y + 1, z)]
                        - data[at(x, y, z + 1)]
                        - data[at(x, y + 1, z)]
                        - data[at(x + 1, y, z)]
                        + data[at(x, y, z)];
                    i += 1;
                }
            }
        }
        Sat { data, hw: (sh, sw) }
    }

    /// Sum over `[x0,x1) × [y0,y1) × [z0,z1)`.
    fn window(&self, x0: usize, x1: usize, y0: usize, y1: usize, z0: usize, z1: usize) -> f64 {
        let at = |x: usize, y: usize, z: usize| self.data[x + self.hw.0 * (y + self.hw.1 * z)];
        at(x1, y1, z1) - at(x0, y1, z1) - at(x1, y0, z1) - at(x1, y1, z0)
            + at(x0, y0, z1)
            + at(x0, y1, z0)
            + at(x1, y0, z0)
            - at(x0, y0, z0)
    }
}

/// Mean SSIM over all valid cubic windows of edge `window`.
///
/// C1 = (0.01 L)^2, C2 = (0.03 L)^2 with L = `data_range`; window statistics
/// use the unbiased (n-1) normalization.
pub fn ssim3d_windowed(
    a: &Volume3D,
    b: &Volume3D,
    data_range: f64,
    window: usize,
) -> Result<f64, MetricsError> {
    if a.dims != b.dims {
        return Err(MetricsError::DimsMismatch(a.dims, b.dims));
    }
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(MetricsError::BadDataRange(data_range));
    }
    let (h, w, d) = a.dims;
    if window == 0 || window > h || window > w || window > d {
        return Err(MetricsError::WindowTooLarge { window, dims: a.dims });
    }
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let sa = Sat::build(a.dims, |i| a.data[i] as f64);
    let sb = Sat::build(a.dims, |i| b.data[i] as f64);
    let saa = Sat::build(a.dims, |i| (a.data[i] as f64) * (a.data[i] as f64));
    let sbb = Sat::build(a.dims, |i| (b.data[i] as f64) * (b.data[i] as f64));
    let sab = Sat::build(a.dims, |i| (a.data[i] as f64) * (b.data[i] as f64));

    let n = (window * window * window) as f64;
    let mut total = 0.0f64;
    let mut count = 0u64;
    for z0 in 0..=(d - window) {
        for y0 in 0..=(w - window) {
            for x0 in 0..=(h - window) {
                let (x1, y1, z1) = (x0 + window, y0 + window, z0 + window);
                let su = sa.window(x0, x1, y0, y1, z0, z1);
                let sv = sb.window(x0, x1, y0, y1, z0, z1);
                let mu = su / n;
                let mv = sv / n;
                let var_u = (saa.window(x0, x1, y0, y1, z0, z1) - su * su / n) / (n - 1.0);
                let var_v = (sbb.window(x0, x1, y0, y1, z0, z1) - sv * sv / n) / (n - 1.0);
                let cov = (sab.window(x0, x1, y0, y1, z0, z1) - su * sv / n) / (n - 1.0);
                let num = (2.0 * mu * mv + c1) * (2.0 * cov + c2);
                let den = (mu * mu + mv * mv + c1) * (var_u + var_v + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// [`ssim3d_windowed`] with the default 7-voxel window.
pub fn ssim3d(a: &Volume3D, b: &Volume3D, data_range: f64) -> Result<f64, MetricsError> {
    ssim3d_windowed(a, b, data_range, SSIM_WINDOW)
}

/// Peak signal-to-noise ratio in dB; identical inputs give +infinity.
pub fn psnr(a: &[f32], b: &[f32], data_range: f64) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(MetricsError::BadDataRange(data_range));
    }
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// Mean absolute error over the voxels selected by `region`.
pub fn mae_region(
    pred: &Volume3D,
    gt: &Volume3D,
    region: &BinaryMask3D,
) -> Result<f64, MetricsError> {
    if pred.dims != gt.dims {
        return Err(MetricsError::DimsMismatch(pred.dims, gt.dims));
    }
    if pred.dims != region.dims {
        return Err(MetricsError::DimsMismatch(pred.dims, region.dims));
    }
    let mut total = 0.0f64;
    let mut count = 0u64;
    for i in 0..region.data.len() {
        if region.data[i] == 1 {
            total += (pred.data[i] as f64 - gt.data[i] as f64).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricsError::EmptyRegion);
    }
    Ok(total / count as f64)
}

/// Whole-head foreground of a ground-truth CT: voxels above -500 HU.
pub fn head_foreground(ct: &Volume3D) -> BinaryMask3D {
    let data = ct
        .data
        .iter()
        .map(|&v| u8::from(v > HEAD_FOREGROUND_HU))
        .collect();
    BinaryMask3D {
        dims: ct.dims,
        data,
    }
}

/// Ground-truth intensity range used as PSNR/SSIM data range.
pub fn gt_data_range(gt: &Volume3D) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in &gt.data {
        lo = lo.min(v as f64);
        hi = hi.max(v as f64);
    }
    hi - lo
}

/// Assemble the full per-subject row: intensity metrics over the whole
/// volume, MAE restricted to the ground-truth skull and to the head
/// foreground, overlap metrics on the predicted vs. ground-truth skull.
pub fn compute_metrics_record(
    subject_id: &str,
    pred_sct: &Volume3D,
    gt_ct: &Volume3D,
    pred_skull: &BinaryMask3D,
    gt_skull: &BinaryMask3D,
) -> Result<MetricsRecord, MetricsError> {
    let range = gt_data_range(gt_ct);
    let (dice, jaccard) = dice_jaccard(pred_skull, gt_skull)?;
    Ok(MetricsRecord {
        subject_id: subject_id.to_string(),
        pearson: pearson(&pred_sct.data, &gt_ct.data)?,
        spearman: spearman(&pred_sct.data, &gt_ct.data)?,
        dice,
        jaccard,
        ssim: ssim3d(pred_sct, gt_ct, range)?,
        psnr_db: psnr(&pred_sct.data, &gt_ct.data, range)?,
        mae_bone_hu: mae_region(pred_sct, gt_ct, gt_skull)?,
        mae_brain_hu: mae_region(pred_sct, gt_ct, &head_foreground(gt_ct))?,
    })
}

/// Tab-separated table: one row per subject plus an average row.
pub fn metrics_table(records: &[MetricsRecord]) -> String {
    let mut out = String::from(
        "subject\tpearson\tspearman\tdice\tjaccard\tssim\tpsnr_db\tmae_bone_hu\tmae_brain_hu\n",
    );
    let mut sums = [0.0f64; 8];
    for r in records {
        let row = [
            r.pearson,
            r.spearman,
            r.dice,
            r.jaccard,
            r.ssim,
            r.psnr_db,
            r.mae_bone_hu,
            r.mae_brain_hu,
        ];
        out.push_str(&r.subject_id);
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
            out.push_str(&format!("\t{v:.4}"));
        }
        out.push('\n');
    }
    if !records.is_empty() {
        out.push_str("average");
        for s in sums {
            out.push_str(&format!("\t{:.4}", s / records.len() as f64));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use crate::volume::IntensityKind;
    use rand::Rng;

    fn mask(dims: (usize, usize, usize), ones: &[usize]) -> BinaryMask3D {
        let mut m = BinaryMask3D::empty(dims);
        for &i in ones {
            m.data[i] = 1;
        }
        m
    }

    fn random_volume(dims: (usize, usize, usize), seed: u64, lo: f32, hi: f32) -> Volume3D {
        let mut rng = seed::stream(seed, 0xE7);
        let n = dims.0 * dims.1 * dims.2;
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Volume3D::new(dims, (1.0, 1.0, 1.0), data, IntensityKind::Arbitrary).unwrap()
    }

    #[test]
    fn dice_jaccard_worked_examples() {
        let dims = (4, 4, 4);
        let a = mask(dims, &[0, 1, 2]);
        assert_eq!(dice_jaccard(&a, &a).unwrap(), (1.0, 1.0));
        let b = mask(dims, &[10, 11, 12]);
        assert_eq!(dice_jaccard(&a, &b).unwrap(), (0.0, 0.0));
        let a8 = mask(dims, &[0, 1, 2, 3, 4, 5, 6, 7]);
        let b8 = mask(dims, &[4, 5, 6, 7, 8, 9, 10, 11]);
        let (d, j) = dice_jaccard(&a8, &b8).unwrap();
        assert!((d - 0.5).abs() < 1e-15);
        assert!((j - 1.0 / 3.0).abs() < 1e-15);
        let empty = BinaryMask3D::empty(dims);
        assert_eq!(dice_jaccard(&empty, &empty).unwrap(), (1.0, 1.0));
        assert!(matches!(
            dice_jaccard(&a, &BinaryMask3D::empty((2, 2, 2))),
            Err(MetricsError::DimsMismatch(..))
        ));
    }

    #[test]
    fn jaccard_equals_dice_identity_on_random_masks() {
        let mut rng = seed::stream(31, 0);
        for _ in 0..50 {
            let dims = (5, 4, 3);
            let n = 60;
            let a = BinaryMask3D {
                dims,
                data: (0..n).map(|_| rng.gen_range(0..=1u8)).collect(),
            };
            let b = BinaryMask3D {
                dims,
                data: (0..n).map(|_| rng.gen_range(0..=1u8)).collect(),
            };
            let (d, j) = dice_jaccard(&a, &b).unwrap();
            assert!((j - d / (2.0 - d)).abs() < 1e-12, "d {d} j {j}");
        }
    }

    #[test]
    fn pearson_affine_and_sign() {
        let a: Vec<f32> = vec![0.5, 1.0, 2.0, 3.5, 7.0];
        let b: Vec<f32> = a.iter().map(|&v| 2.0 * v + 1.0).collect();
        assert!((pearson(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f32> = a.iter().map(|&v| -v).collect();
        assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!((spearman(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cubic_map_keeps_rank_but_not_linear_correlation() {
        let a: Vec<f32> = vec![-2.0, -1.0, 0.0, 1.0, 2.0];
        let b: Vec<f32> = a.iter().map(|&v| v * v * v).collect();
        let r = pearson(&a, &b).unwrap();
        let expect = 34.0 / (10.0f64 * 130.0).sqrt();
        assert!((r - expect).abs() < 1e-12, "pearson {r}");
        assert!((r - 0.9430).abs() < 1e-4);
        assert!(r < 1.0);
        assert!((spearman(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_is_an_error() {
        let a = vec![1.0f32; 5];
        let b = vec![0.0f32, 1.0, 2.0, 3.0, 4.0];
        assert!(matches!(pearson(&a, &b), Err(MetricsError::ZeroVariance)));
        assert!(matches!(spearman(&a, &b), Err(MetricsError::ZeroVariance)));
        assert!(matches!(pearson(&b, &a), Err(MetricsError::ZeroVariance)));
    }

    #[test]
    fn spearman_midranks_hand_example() {
        let a: Vec<f32> = vec![1.0, 2.0, 2.0, 3.0];
        let b: Vec<f32> = vec![1.0, 2.0, 3.0, 3.0];
        // ranks a = (1, 2.5, 2.5, 4); ranks b = (1, 2, 3.5, 3.5) -> r = 5/6.
        assert!((spearman(&a, &b).unwrap() - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_invariant_under_monotone_transform() {
        let a = random_volume((4, 4, 4), 8, -1.0, 1.0).data;
        let b = random_volume((4, 4, 4), 9, -1.0, 1.0).data;
        let base = spearman(&a, &b).unwrap();
        let warped: Vec<f32> = a.iter().map(|&v| v.exp()).collect();
        assert!((spearman(&warped, &b).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn ssim_identity_symmetry_and_errors() {
        let a = random_volume((9, 8, 10), 5, 0.0, 1.0);
        assert_eq!(ssim3d(&a, &a, 1.0).unwrap(), 1.0);
        let b = random_volume((9, 8, 10), 6, 0.0, 1.0);
        let ab = ssim3d(&a, &b, 1.0).unwrap();
        let ba = ssim3d(&b, &a, 1.0).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        let tiny = random_volume((4, 4, 4), 7, 0.0, 1.0);
        assert!(matches!(
            ssim3d(&tiny, &tiny, 1.0),
            Err(MetricsError::WindowTooLarge { .. })
        ));
        assert!(matches!(
            ssim3d(&a, &a, 0.0),
            Err(MetricsError::BadDataRange(_))
        ));
    }

    #[test]
    fn constant_offset_by_full_range_collapses_ssim() {
        // With b = a + L the structure/contrast factor is exactly 1, so the
        // mean SSIM reduces to the mean per-window luminance term.
        let a = random_volume((10, 10, 10), 11, 0.0, 1.0);
        let shifted = Volume3D::new(
            a.dims,
            a.voxel_mm,
            a.data.iter().map(|&v| v + 1.0).collect(),
            IntensityKind::Arbitrary,
        )
        .unwrap();
        let s = ssim3d(&a, &shifted, 1.0).unwrap();
        assert!(s < 0.8, "offset SSIM {s}");
        let c1 = 0.01f64 * 0.01;
        let win = SSIM_WINDOW;
        let n = (win * win * win) as f64;
        let (h, w, d) = a.dims;
        let mut lum_sum = 0.0;
        let mut count = 0.0;
        for z0 in 0..=(d - win) {
            for y0 in 0..=(w - win) {
                for x0 in 0..=(h - win) {
                    let mut mu = 0.0f64;
                    for z in z0..z0 + win {
                        for y in y0..y0 + win {
                            for x in x0..x0 + win {
                                mu += a.get(x, y, z) as f64;
                            }
                        }
                    }
                    mu /= n;
                    let mv = mu + 1.0;
                    lum_sum += (2.0 * mu * mv + c1) / (mu * mu + mv * mv + c1);
                    count += 1.0;
                }
            }
        }
        let oracle = lum_sum / count;
        assert!((s - oracle).abs() < 1e-6, "ssim {s} luminance oracle {oracle}");
    }

    fn ssim_brute(a: &Volume3D, b: &Volume3D, l: f64, win: usize) -> f64 {
        let (h, w, d) = a.dims;
        let c1 = (0.01 * l).powi(2);
        let c2 = (0.03 * l).powi(2);
        let n = (win * win * win) as f64;
        let mut total = 0.0;
        let mut count = 0.0;
        for z0 in 0..=(d - win) {
            for y0 in 0..=(w - win) {
                for x0 in 0..=(h - win) {
                    let mut u = Vec::new();
                    let mut v = Vec::new();
                    for z in z0..z0 + win {
                        for y in y0..y0 + win {
                            for x in x0..x0 + win {
                                u.push(a.get(x, y, z) as f64);
                                v.push(b.get(x, y, z) as f64);
                            }
                        }
                    }
                    let mu: f64 = u.iter().sum::<f64>() / n;
                    let mv: f64 = v.iter().sum::<f64>() / n;
                    let var_u: f64 =
                        u.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (n - 1.0);
                    let var_v: f64 =
                        v.iter().map(|x| (x - mv) * (x - mv)).sum::<f64>() / (n - 1.0);
                    let cov: f64 = u
                        .iter()
                        .zip(&v)
                        .map(|(x, y)| (x - mu) * (y - mv))
                        .sum::<f64>()
                        / (n - 1.0);
                    total += ((2.0 * mu * mv + c1) * (2.0 * cov + c2))
                        / ((mu * mu + mv * mv + c1) * (var_u + var_v + c2));
                    count += 1.0;
                }
            }
        }
        total / count
    }

    #[test]
    fn ssim_matches_direct_window_loop() {
        for seed in 0..3 {
            let a = random_volume((9, 8, 9), 100 + seed, -2.0, 5.0);
            let b = random_volume((9, 8, 9), 200 + seed, -2.0, 5.0);
            let fast = ssim3d(&a, &b, 7.0).unwrap();
            let slow = ssim_brute(&a, &b, 7.0, SSIM_WINDOW);
            assert!((fast - slow).abs() < 1e-9, "fast {fast} slow {slow}");
        }
    }

    #[test]
    fn psnr_examples_and_dual_route() {
        let a = vec![0.25f32; 64];
        assert_eq!(psnr(&a, &a, 4.0).unwrap(), f64::INFINITY);
        // MSE = L^2/100 must give exactly 20 dB (0.5 and 5 are exact floats).
        let zeros = vec![0.0f32; 64];
        let halves = vec![0.5f32; 64];
        assert!((psnr(&zeros, &halves, 5.0).unwrap() - 20.0).abs() < 1e-12);
        let x = random_volume((8, 8, 8), 21, -3.0, 3.0).data;
        let y = random_volume((8, 8, 8), 22, -3.0, 3.0).data;
        let mse = x
            .iter()
            .zip(&y)
            .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
            .sum::<f64>()
            / x.len() as f64;
        let expect = 10.0 * (6.0f64 * 6.0 / mse).log10();
        assert!((psnr(&x, &y, 6.0).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn mae_region_examples_and_errors() {
        let gt = random_volume((6, 6, 6), 30, -1000.0, 1000.0);
        let region = mask(gt.dims, &(0..108).collect::<Vec<_>>());
        assert_eq!(mae_region(&gt, &gt, &region).unwrap(), 0.0);
        let plus10 = Volume3D::new(
            gt.dims,
            gt.voxel_mm,
            gt.data.iter().map(|&v| v + 10.0).collect(),
            IntensityKind::Arbitrary,
        )
        .unwrap();
        assert!((mae_region(&plus10, &gt, &region).unwrap() - 10.0).abs() < 1e-4);
        assert!(matches!(
            mae_region(&gt, &gt, &BinaryMask3D::empty(gt.dims)),
            Err(MetricsError::EmptyRegion)
        ));
        // Dual route against a direct masked loop.
        let pred = random_volume((6, 6, 6), 31, -1000.0, 1000.0);
        let mut brute = 0.0f64;
        let mut cnt = 0.0;
        for i in 0..region.data.len() {
            if region.data[i] == 1 {
                brute += (pred.data[i] as f64 - gt.data[i] as f64).abs();
                cnt += 1.0;
            }
        }
        let got = mae_region(&pred, &gt, &region).unwrap();
        assert!((got - brute / cnt).abs() / got.abs().max(1.0) < 1e-12);
    }

    #[test]
    fn flat_metrics_are_permutation_invariant() {
        let a = random_volume((5, 5, 4), 40, -2.0, 2.0).data;
        let b = random_volume((5, 5, 4), 41, -2.0, 2.0).data;
        let mut perm: Vec<usize> = (0..a.len()).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut seed::stream(42, 0));
        let pa: Vec<f32> = perm.iter().map(|&i| a[i]).collect();
        let pb: Vec<f32> = perm.iter().map(|&i| b[i]).collect();
        assert!((pearson(&a, &b).unwrap() - pearson(&pa, &pb).unwrap()).abs() < 1e-12);
        assert!((spearman(&a, &b).unwrap() - spearman(&pa, &pb).unwrap()).abs() < 1e-12);
        assert!((psnr(&a, &b, 4.0).unwrap() - psnr(&pa, &pb, 4.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn pearson_matches_brute_force_textbook_form() {
        let a = random_volume((8, 8, 8), 51, -5.0, 5.0).data;
        let b = random_volume((8, 8, 8), 52, -5.0, 5.0).data;
        let n = a.len() as f64;
        let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
        for (&x, &y) in a.iter().zip(&b) {
            let (x, y) = (x as f64, y as f64);
            sa += x;
            sb += y;
            saa += x * x;
            sbb += y * y;
            sab += x * y;
        }
        let brute = (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt());
        let got = pearson(&a, &b).unwrap();
        assert!((got - brute).abs() < 1e-9, "got {got} brute {brute}");
    }

    #[test]
    fn record_assembly_and_table_shape() {
        let gt = {
            let mut v = random_volume((10, 10, 10), 60, -1000.0, -900.0);
            for i in 0..200 {
                v.data[i] = 800.0 + (i % 7) as f32;
            }
            for i in 200..500 {
                v.data[i] = (i % 40) as f32;
            }
            v
        };
        let pred = Volume3D::new(
            gt.dims,
            gt.voxel_mm,
            gt.data.iter().map(|&v| v * 0.95 + 5.0).collect(),
            IntensityKind::Arbitrary,
        )
        .unwrap();
        let gt_skull = mask(gt.dims, &(0..200).collect::<Vec<_>>());
        let pred_skull = mask(gt.dims, &(20..240).collect::<Vec<_>>());
        let r = compute_metrics_record("s01", &pred, &gt, &pred_skull, &gt_skull).unwrap();
        assert!(r.pearson > 0.9 && r.pearson <= 1.0);
        assert!((0.0..=1.0).contains(&r.dice));
        assert!((r.jaccard - r.dice / (2.0 - r.dice)).abs() < 1e-12);
        assert!(r.mae_bone_hu >= 0.0 && r.mae_brain_hu >= 0.0);
        let table = metrics_table(&[r.clone(), r]);
        assert_eq!(table.lines().count(), 4);
        assert!(table.starts_with("subject\tpearson"));
        assert!(table.lines().last().unwrap().starts_with("average\t"));
    }
}
