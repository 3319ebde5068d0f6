//! Synthetic paired pseudo-MRI/CT cohorts with skull-like geometry.
//!
//! Each case is an ellipsoidal bone shell (with a low-frequency boundary
//! perturbation) around soft tissue and a fluid-like core, in air. The CT is
//! a clean three-class HU map; the two MRI channels are nonlinear contrast
//! remaps of the tissue classes with a smooth multiplicative bias field and
//! additive Gaussian noise. A domain-shift operator emulates the move to a
//! higher field strength: stronger bias, ringing-like bands near the shell
//! interior, more noise, altered contrast curves; CT and label are invariant.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::morphology::{binary_dilate, StructuringElement};
use crate::seed;
use crate::volume::{
    load_mask, load_volume, save_mask, save_volume, threshold_mask, BinaryMask3D, IntensityKind,
    Volume3D, VolumeError, HU_MAX, HU_MIN,
};

/// HU threshold that recovers the bone shell from CT.
pub const SKULL_HU_THRESHOLD: f32 = 250.0;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("shell does not fit: {0}")]
    ShellDoesNotFit(String),
    #[error("bad phantom spec: {0}")]
    BadSpec(String),
    #[error("cohort needs at least 10 subjects, got {0}")]
    CohortTooSmall(usize),
    #[error("cohort manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Geometry and contamination parameters of one phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: (usize, usize, usize),
    /// Outer shell semi-axis as a fraction of each half-extent, in (0, 1).
    pub outer_radius_frac: f64,
    pub shell_thickness_vox: usize,
    pub bone_hu: f32,
    pub tissue_hu: f32,
    pub air_hu: f32,
    pub noise_sigma: f64,
    pub bias_field_amp: f64,
    /// Amplitude of the low-frequency boundary perturbation (relative).
    pub irregularity_amp: f64,
    /// Euler angles (radians) applied to the shell; zero by default so the
    /// analytic membership oracle stays axis-aligned.
    pub rotation: (f64, f64, f64),
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: (64, 64, 64),
            outer_radius_frac: 0.8,
            shell_thickness_vox: 2,
            bone_hu: 1000.0,
            tissue_hu: 40.0,
            air_hu: -1000.0,
            noise_sigma: 0.02,
            bias_field_amp: 0.10,
            irregularity_amp: 0.05,
            rotation: (0.0, 0.0, 0.0),
        }
    }
}

impl PhantomSpec {
    fn validate(&self) -> Result<(), PhantomError> {
        if !(self.outer_radius_frac > 0.0 && self.outer_radius_frac < 1.0) {
            return Err(PhantomError::BadSpec(format!(
                "outer_radius_frac {} not in (0,1)",
                self.outer_radius_frac
            )));
        }
        if self.shell_thickness_vox == 0 {
            return Err(PhantomError::BadSpec("shell_thickness_vox must be positive".into()));
        }
        if !(self.bone_hu > SKULL_HU_THRESHOLD && SKULL_HU_THRESHOLD > self.tissue_hu) {
            return Err(PhantomError::BadSpec(format!(
                "need bone_hu > {SKULL_HU_THRESHOLD} > tissue_hu, got {} and {}",
                self.bone_hu, self.tissue_hu
            )));
        }
        if self.noise_sigma < 0.0 || self.bias_field_amp < 0.0 || self.irregularity_amp < 0.0 {
            return Err(PhantomError::BadSpec("amplitudes must be nonnegative".into()));
        }
        if self.irregularity_amp >= 0.4 {
            return Err(PhantomError::BadSpec(
                "irregularity_amp must stay below 0.4 to keep the shell closed".into(),
            ));
        }
        let t = self.shell_thickness_vox as f64;
        for (i, &dim) in [self.dims.0, self.dims.1, self.dims.2].iter().enumerate() {
            let half = dim as f64 / 2.0;
            let r = self.outer_radius_frac * half;
            let r_max = r * (1.0 + self.irregularity_amp);
            if r_max + 2.0 > half {
                return Err(PhantomError::ShellDoesNotFit(format!(
                    "axis {i}: outer radius {r_max:.2} leaves less than a 2-voxel margin in extent {dim}"
                )));
            }
            if r - t < 1.0 {
                return Err(PhantomError::ShellDoesNotFit(format!(
                    "axis {i}: thickness {t} leaves no interior inside radius {r:.2}"
                )));
            }
        }
        Ok(())
    }
}

/// Which acquisition domain a case belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainTag {
    Source,
    Shifted,
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DomainTag::Source => "source",
            DomainTag::Shifted => "shifted",
        })
    }
}

impl DomainTag {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "source" => Some(DomainTag::Source),
            "shifted" => Some(DomainTag::Shifted),
            _ => None,
        }
    }
}

/// One subject: two MRI contrasts, ground-truth CT, derived skull label.
#[derive(Debug, Clone)]
pub struct PairedCase {
    pub mri_a: Volume3D,
    pub mri_b: Volume3D,
    pub ct: Volume3D,
    pub skull_label: BinaryMask3D,
    pub subject_id: String,
    pub domain_tag: DomainTag,
}

/// Disjoint train/val/test split of a cohort.
#[derive(Debug, Clone)]
pub struct CohortSplit {
    pub train: Vec<PairedCase>,
    pub val: Vec<PairedCase>,
    pub test: Vec<PairedCase>,
}

impl CohortSplit {
    pub fn all_cases(&self) -> impl Iterator<Item = &PairedCase> {
        self.train.iter().chain(self.val.iter()).chain(self.test.iter())
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// 8:1:1 split sizes as (train, val, test).
///
/// val = ceil(n/10), test = floor(n/10), train = the rest; this reproduces
/// 37 -> 30/4/3, 12 -> 9/2/1 and 10 -> 8/1/1.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let val = n.div_ceil(10);
    let test = n / 10;
    (n - val - test, val, test)
}

/// Human-readable statement of the split rule, printed by the CLI.
pub const SPLIT_RULE: &str = "val = ceil(n/10), test = floor(n/10), train = n - val - test";

#[derive(Clone, Copy)]
enum TissueClass {
    Air,
    Tissue,
    Fluid,
    Bone,
}

struct Geometry {
    center: (f64, f64, f64),
    radii: (f64, f64, f64),
    inner: (f64, f64, f64),
    rot: [[f64; 3]; 3],
    // Low-frequency boundary perturbation coefficients.
    delta: [f64; 6],
}

impl Geometry {
    fn classify(&self, x: usize, y: usize, z: usize) -> TissueClass {
        let p = (
            x as f64 - self.center.0,
            y as f64 - self.center.1,
            z as f64 - self.center.2,
        );
        let q = (
            self.rot[0][0] * p.0 + self.rot[0][1] * p.1 + self.rot[0][2] * p.2,
            self.rot[1][0] * p.0 + self.rot[1][1] * p.1 + self.rot[1][2] * p.2,
            self.rot[2][0] * p.0 + self.rot[2][1] * p.1 + self.rot[2][2] * p.2,
        );
        let rho_out = ((q.0 / self.radii.0).powi(2)
            + (q.1 / self.radii.1).powi(2)
            + (q.2 / self.radii.2).powi(2))
        .sqrt();
        let norm = (q.0 * q.0 + q.1 * q.1 + q.2 * q.2).sqrt();
        let n = if norm > 0.0 {
            (q.0 / norm, q.1 / norm, q.2 / norm)
        } else {
            (0.0, 0.0, 1.0)
        };
        let d = &self.delta;
        let delta = d[0] * n.0 * n.1
            + d[1] * n.1 * n.2
            + d[2] * n.2 * n.0
            + d[3] * (n.0 * n.0 - n.1 * n.1)
            + d[4] * (n.1 * n.1 - n.2 * n.2)
            + d[5] * n.0 * n.1 * n.2;
        let s = (1.0 + delta).max(0.5);
        if rho_out > s {
            return TissueClass::Air;
        }
        let rho_in = ((q.0 / self.inner.0).powi(2)
            + (q.1 / self.inner.1).powi(2)
            + (q.2 / self.inner.2).powi(2))
        .sqrt();
        if rho_in > s {
            return TissueClass::Bone;
        }
        let rho_core = ((q.0 / (0.35 * self.radii.0)).powi(2)
            + (q.1 / (0.35 * self.radii.1)).powi(2)
            + (q.2 / (0.35 * self.radii.2)).powi(2))
        .sqrt();
        if rho_core <= 1.0 {
            TissueClass::Fluid
        } else {
            TissueClass::Tissue
        }
    }
}

fn rotation_matrix(angles: (f64, f64, f64)) -> [[f64; 3]; 3] {
    let (cx, sx) = (angles.0.cos(), angles.0.sin());
    let (cy, sy) = (angles.1.cos(), angles.1.sin());
    let (cz, sz) = (angles.2.cos(), angles.2.sin());
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    mat_mul(&rz, &mat_mul(&ry, &rx))
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

struct BiasField {
    freq: (f64, f64, f64),
    phase: (f64, f64, f64),
    amp: f64,
    dims: (usize, usize, usize),
}

impl BiasField {
    fn draw<R: Rng>(rng: &mut R, amp: f64, dims: (usize, usize, usize)) -> Self {
        BiasField {
            freq: (
                rng.gen_range(0.8..1.6),
                rng.gen_range(0.8..1.6),
                rng.gen_range(0.8..1.6),
            ),
            phase: (
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
            ),
            amp,
            dims,
        }
    }

    fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        let gx = (std::f64::consts::PI * self.freq.0 * x as f64 / self.dims.0 as f64
            + self.phase.0)
            .sin();
        let gy = (std::f64::consts::PI * self.freq.1 * y as f64 / self.dims.1 as f64
            + self.phase.1)
            .sin();
        let gz = (std::f64::consts::PI * self.freq.2 * z as f64 / self.dims.2 as f64
            + self.phase.2)
            .sin();
        1.0 + self.amp * gx * gy * gz
    }
}

// MRI base intensities per tissue class: bone dark in both channels, tissue
// bright in channel A, the fluid-like core bright in channel B.
const MRI_A_BASE: [f64; 4] = [0.02, 0.80, 0.35, 0.05]; // air, tissue, fluid, bone
const MRI_B_BASE: [f64; 4] = [0.02, 0.45, 0.90, 0.08];

fn class_index(c: TissueClass) -> usize {
    match c {
        TissueClass::Air => 0,
        TissueClass::Tissue => 1,
        TissueClass::Fluid => 2,
        TissueClass::Bone => 3,
    }
}

/// Generate one phantom; geometry and contamination derive from `seed`.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<PairedCase, PhantomError> {
    generate_phantom_with_noise_seed(spec, seed, seed)
}

/// Like [`generate_phantom`] but with an independent noise seed, so tests can
/// re-draw the additive noise while keeping geometry and bias identical.
pub fn generate_phantom_with_noise_seed(
    spec: &PhantomSpec,
    seed: u64,
    noise_seed: u64,
) -> Result<PairedCase, PhantomError> {
    spec.validate()?;
    let dims = spec.dims;
    let (h, w, d) = dims;
    let n_vox = h * w * d;
    let t = spec.shell_thickness_vox as f64;
    let radii = (
        spec.outer_radius_frac * h as f64 / 2.0,
        spec.outer_radius_frac * w as f64 / 2.0,
        spec.outer_radius_frac * d as f64 / 2.0,
    );

    let mut geom_rng = seed::stream(seed, 0x0601);
    let mut delta = [0.0f64; 6];
    for c in delta.iter_mut() {
        *c = geom_rng.gen_range(-1.0..1.0) * spec.irregularity_amp;
    }
    let geometry = Geometry {
        center: (
            (h as f64 - 1.0) / 2.0,
            (w as f64 - 1.0) / 2.0,
            (d as f64 - 1.0) / 2.0,
        ),
        radii,
        inner: (radii.0 - t, radii.1 - t, radii.2 - t),
        rot: rotation_matrix(spec.rotation),
        delta,
    };
    let bias_a = BiasField::draw(&mut geom_rng, spec.bias_field_amp, dims);
    let bias_b = BiasField::draw(&mut geom_rng, spec.bias_field_amp, dims);

    let mut classes = Vec::with_capacity(n_vox);
    let mut ct = Vec::with_capacity(n_vox);
    for z in 0..d {
        for y in 0..w {
            for x in 0..h {
                let class = geometry.classify(x, y, z);
                let hu = match class {
                    TissueClass::Air => spec.air_hu,
                    TissueClass::Tissue | TissueClass::Fluid => spec.tissue_hu,
                    TissueClass::Bone => spec.bone_hu,
                };
                ct.push(hu.clamp(HU_MIN, HU_MAX));
                classes.push(class);
            }
        }
    }

    let mut noise_rng = seed::stream(noise_seed, 0x0602);
    let normal = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let mri = |base: &[f64; 4], bias: &BiasField, rng: &mut rand_chacha::ChaCha8Rng| {
        let mut data = Vec::with_capacity(n_vox);
        let mut i = 0;
        for z in 0..d {
            for y in 0..w {
                for x in 0..h {
                    let v = base[class_index(classes[i])] * bias.at(x, y, z);
                    let noise = if spec.noise_sigma > 0.0 {
                        normal.sample(rng)
                    } else {
                        0.0
                    };
                    data.push((v + noise) as f32);
                    i += 1;
                }
            }
        }
        data
    };
    let mri_a_data = mri(&MRI_A_BASE, &bias_a, &mut noise_rng);
    let mri_b_data = mri(&MRI_B_BASE, &bias_b, &mut noise_rng);

    let ct = Volume3D::new(dims, (1.0, 1.0, 1.0), ct, IntensityKind::Hu)?;
    let skull_label = threshold_mask(&ct, SKULL_HU_THRESHOLD)?;
    Ok(PairedCase {
        mri_a: Volume3D::new(dims, (1.0, 1.0, 1.0), mri_a_data, IntensityKind::Arbitrary)?,
        mri_b: Volume3D::new(dims, (1.0, 1.0, 1.0), mri_b_data, IntensityKind::Arbitrary)?,
        ct,
        skull_label,
        subject_id: format!("case-{seed}"),
        domain_tag: DomainTag::Source,
    })
}

/// Emulate the shift to a higher field strength: altered contrast curves,
/// a stronger bias field, ringing-like bands near the shell interior, and
/// more noise. CT and skull label are bit-exact copies of the source case.
pub fn domain_shift(case: &PairedCase, seed: u64) -> PairedCase {
    debug_assert_eq!(case.domain_tag, DomainTag::Source);
    let dims = case.ct.dims;
    let mut rng = seed::stream(seed, 0x0701);
    let bias_a = BiasField::draw(&mut rng, 0.25, dims);
    let bias_b = BiasField::draw(&mut rng, 0.25, dims);

    // Ringing bands: distance from the skull measured in dilation steps,
    // limited to non-bone, non-air voxels (the shell interior side).
    let mut ring = vec![0.0f64; case.ct.len()];
    let mut prev = case.skull_label.clone();
    let mut ring_sign = 1.0;
    for k in 0..5 {
        let next = binary_dilate(&prev, StructuringElement::Face6, 1);
        let amp = 0.15 * ring_sign * 0.75f64.powi(k);
        for i in 0..ring.len() {
            if next.data[i] == 1 && prev.data[i] == 0 {
                let hu = case.ct.data[i];
                if hu > -500.0 && hu <= SKULL_HU_THRESHOLD {
                    ring[i] = amp;
                }
            }
        }
        prev = next;
        ring_sign = -ring_sign;
    }

    let normal = Normal::new(0.0, 0.03).unwrap();
    let shift_channel = |v: &Volume3D, gamma: f64, bias: &BiasField, rng: &mut rand_chacha::ChaCha8Rng| {
        let mut data = Vec::with_capacity(v.len());
        let mut i = 0;
        for z in 0..dims.2 {
            for y in 0..dims.1 {
                for x in 0..dims.0 {
                    let raw = v.data[i] as f64;
                    let curved = raw.clamp(0.0, 1.5).powf(gamma);
                    let val = curved * bias.at(x, y, z) + ring[i] + normal.sample(rng);
                    data.push(val as f32);
                    i += 1;
                }
            }
        }
        Volume3D::new(dims, v.voxel_mm, data, IntensityKind::Arbitrary).expect("shape preserved")
    };
    let mri_a = shift_channel(&case.mri_a, 0.75, &bias_a, &mut rng);
    let mri_b = shift_channel(&case.mri_b, 1.30, &bias_b, &mut rng);

    PairedCase {
        mri_a,
        mri_b,
        ct: case.ct.clone(),
        skull_label: case.skull_label.clone(),
        subject_id: case.subject_id.clone(),
        domain_tag: DomainTag::Shifted,
    }
}

/// Generate `n >= 10` cases with per-case spec jitter and split them 8:1:1
/// by a seeded shuffle of subject order.
pub fn generate_cohort(
    spec: &PhantomSpec,
    n: usize,
    seed: u64,
) -> Result<CohortSplit, PhantomError> {
    if n < 10 {
        return Err(PhantomError::CohortTooSmall(n));
    }
    // Largest radius fraction that keeps the 2-voxel margin on every axis,
    // given the boundary perturbation headroom. Jittered specs clamp to it.
    let half_min = [spec.dims.0, spec.dims.1, spec.dims.2]
        .into_iter()
        .min()
        .unwrap() as f64
        / 2.0;
    let frac_max = (half_min - 2.0) / (half_min * (1.0 + spec.irregularity_amp));
    if frac_max <= 0.0 {
        return Err(PhantomError::ShellDoesNotFit(format!(
            "dims {:?} leave no room for a shell with a 2-voxel margin",
            spec.dims
        )));
    }

    let mut cases = Vec::with_capacity(n);
    for i in 0..n {
        let mut jitter_rng = seed::stream(seed, 0x1000 + i as u64);
        let mut s = spec.clone();
        s.outer_radius_frac =
            (spec.outer_radius_frac * (1.0 + jitter_rng.gen_range(-0.08..0.08))).min(frac_max);
        let dt: i64 = jitter_rng.gen_range(-1..=1);
        let t_max = (s.outer_radius_frac * half_min - 1.0).floor().max(1.0) as i64;
        s.shell_thickness_vox = (spec.shell_thickness_vox as i64 + dt).clamp(1, t_max) as usize;
        s.rotation = (
            jitter_rng.gen_range(-0.25..0.25),
            jitter_rng.gen_range(-0.25..0.25),
            jitter_rng.gen_range(-0.25..0.25),
        );
        let mut case = generate_phantom(&s, seed::derive(seed, 0x2000 + i as u64))?;
        case.subject_id = format!("subj{i:03}");
        cases.push(case);
    }

    let (n_train, n_val, n_test) = split_counts(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = seed::stream(seed, 0x3000);
    order.shuffle(&mut shuffle_rng);

    let mut split = CohortSplit {
        train: Vec::with_capacity(n_train),
        val: Vec::with_capacity(n_val),
        test: Vec::with_capacity(n_test),
    };
    for (rank, &idx) in order.iter().enumerate() {
        let case = cases[idx].clone();
        if rank < n_train {
            split.train.push(case);
        } else if rank < n_train + n_val {
            split.val.push(case);
        } else {
            split.test.push(case);
        }
    }
    Ok(split)
}

/// Apply [`domain_shift`] to every case of a split with per-subject seeds.
pub fn shift_split(split: &CohortSplit, seed: u64) -> CohortSplit {
    let shift_all = |cases: &[PairedCase], base: u64| {
        cases
            .iter()
            .enumerate()
            .map(|(i, c)| domain_shift(c, seed::derive(seed, base + i as u64)))
            .collect()
    };
    CohortSplit {
        train: shift_all(&split.train, 0x4000),
        val: shift_all(&split.val, 0x5000),
        test: shift_all(&split.test, 0x6000),
    }
}

// ---------------------------------------------------------------------------
// Cohort persistence: a directory of CVF files plus a text manifest with one
// line per case: subject_id, split, domain_tag, file paths.
// ---------------------------------------------------------------------------

fn io_err(path: &Path, source: std::io::Error) -> PhantomError {
    PhantomError::Volume(VolumeError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Persist a cohort under `dir` (created if needed).
pub fn save_cohort(split: &CohortSplit, dir: &Path) -> Result<(), PhantomError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut manifest = String::new();
    for (split_name, cases) in [
        ("train", &split.train),
        ("val", &split.val),
        ("test", &split.test),
    ] {
        for case in cases.iter() {
            let case_dir = dir.join("cases").join(&case.subject_id);
            fs::create_dir_all(&case_dir).map_err(|e| io_err(&case_dir, e))?;
            let rel = |name: &str| format!("cases/{}/{}.cvf", case.subject_id, name);
            save_volume(&case.mri_a, &dir.join(rel("mri_a")))?;
            save_volume(&case.mri_b, &dir.join(rel("mri_b")))?;
            save_volume(&case.ct, &dir.join(rel("ct")))?;
            save_mask(&case.skull_label, &dir.join(rel("skull")))?;
            manifest.push_str(&format!(
                "{} {} {} {} {} {} {}\n",
                case.subject_id,
                split_name,
                case.domain_tag,
                rel("mri_a"),
                rel("mri_b"),
                rel("ct"),
                rel("skull"),
            ));
        }
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| io_err(&path, e))?;
    Ok(())
}

/// Load a cohort saved by [`save_cohort`]; the skull-label invariant is
/// re-checked against the CT on load.
pub fn load_cohort(dir: &Path) -> Result<CohortSplit, PhantomError> {
    let path = dir.join("manifest.txt");
    let manifest = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let mut split = CohortSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for line in manifest.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(PhantomError::Manifest(format!(
                "expected 7 fields per line, got {}: {line:?}",
                fields.len()
            )));
        }
        let domain_tag = DomainTag::parse(fields[2])
            .ok_or_else(|| PhantomError::Manifest(format!("unknown domain tag {:?}", fields[2])))?;
        let case = PairedCase {
            mri_a: load_volume(&dir.join(fields[3]))?,
            mri_b: load_volume(&dir.join(fields[4]))?,
            ct: load_volume(&dir.join(fields[5]))?,
            skull_label: load_mask(&dir.join(fields[6]))?,
            subject_id: fields[0].to_string(),
            domain_tag,
        };
        if case.skull_label != threshold_mask(&case.ct, SKULL_HU_THRESHOLD)? {
            return Err(PhantomError::Manifest(format!(
                "case {}: stored skull label does not match thresholded CT",
                case.subject_id
            )));
        }
        match fields[1] {
            "train" => split.train.push(case),
            "val" => split.val.push(case),
            "test" => split.test.push(case),
            other => {
                return Err(PhantomError::Manifest(format!("unknown split {other:?}")));
            }
        }
    }
    if split.is_empty() {
        return Err(PhantomError::Manifest("manifest lists no cases".into()));
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn psnr_for_test(gt: &[f32], pred: &[f32]) -> f64 {
        let range = gt.iter().fold(f64::MIN, |m, &v| m.max(v as f64))
            - gt.iter().fold(f64::MAX, |m, &v| m.min(v as f64));
        let mse = gt
            .iter()
            .zip(pred)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>()
            / gt.len() as f64;
        10.0 * (range * range / mse).log10()
    }

    fn clean_spec() -> PhantomSpec {
        PhantomSpec {
            noise_sigma: 0.0,
            bias_field_amp: 0.0,
            irregularity_amp: 0.0,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn skull_label_matches_analytic_membership_without_contamination() {
        let spec = clean_spec();
        let case = generate_phantom(&spec, 3).unwrap();
        let (h, w, d) = spec.dims;
        let c = (
            (h as f64 - 1.0) / 2.0,
            (w as f64 - 1.0) / 2.0,
            (d as f64 - 1.0) / 2.0,
        );
        let r = 0.8 * h as f64 / 2.0;
        let t = 2.0;
        for z in 0..d {
            for y in 0..w {
                for x in 0..h {
                    let q = (x as f64 - c.0, y as f64 - c.1, z as f64 - c.2);
                    let rho_out =
                        ((q.0 / r).powi(2) + (q.1 / r).powi(2) + (q.2 / r).powi(2)).sqrt();
                    let ri = r - t;
                    let rho_in =
                        ((q.0 / ri).powi(2) + (q.1 / ri).powi(2) + (q.2 / ri).powi(2)).sqrt();
                    let in_shell = rho_out <= 1.0 && rho_in > 1.0;
                    assert_eq!(
                        case.skull_label.get(x, y, z) == 1,
                        in_shell,
                        "voxel ({x},{y},{z})"
                    );
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = PhantomSpec::default();
        let a = generate_phantom(&spec, 9).unwrap();
        let b = generate_phantom(&spec, 9).unwrap();
        assert_eq!(a.mri_a.data, b.mri_a.data);
        assert_eq!(a.mri_b.data, b.mri_b.data);
        assert_eq!(a.ct.data, b.ct.data);
        assert_eq!(a.skull_label, b.skull_label);
        let c = generate_phantom(&spec, 10).unwrap();
        assert_ne!(a.mri_a.data, c.mri_a.data);
    }

    #[test]
    fn bone_fraction_in_expected_band() {
        let case = generate_phantom(&PhantomSpec::default(), 4).unwrap();
        let frac = case.skull_label.count() as f64 / case.ct.len() as f64;
        assert!((0.02..0.20).contains(&frac), "bone fraction {frac}");
    }

    #[test]
    fn label_always_matches_thresholded_ct() {
        for seed in 0..5 {
            let case = generate_phantom(&PhantomSpec::default(), seed).unwrap();
            assert_eq!(
                case.skull_label,
                threshold_mask(&case.ct, SKULL_HU_THRESHOLD).unwrap()
            );
        }
    }

    #[test]
    fn shell_is_closed_against_outside_air() {
        // 6-connected flood fill from the corner must never reach tissue.
        let case = generate_phantom(&PhantomSpec::default(), 7).unwrap();
        let (h, w, d) = case.ct.dims;
        let idx = |x: usize, y: usize, z: usize| x + h * (y + w * z);
        let mut seen = vec![false; case.ct.len()];
        let mut queue = std::collections::VecDeque::new();
        assert!(case.ct.data[0] < 250.0, "corner must be air");
        seen[0] = true;
        queue.push_back((0usize, 0usize, 0usize));
        while let Some((x, y, z)) = queue.pop_front() {
            let neighbors = [
                (x.wrapping_sub(1), y, z),
                (x + 1, y, z),
                (x, y.wrapping_sub(1), z),
                (x, y + 1, z),
                (x, y, z.wrapping_sub(1)),
                (x, y, z + 1),
            ];
            for (nx, ny, nz) in neighbors {
                if nx >= h || ny >= w || nz >= d {
                    continue;
                }
                let i = idx(nx, ny, nz);
                if seen[i] || case.skull_label.data[i] == 1 {
                    continue;
                }
                seen[i] = true;
                queue.push_back((nx, ny, nz));
            }
        }
        let tissue_hu = PhantomSpec::default().tissue_hu;
        for i in 0..case.ct.len() {
            if seen[i] {
                assert_ne!(case.ct.data[i], tissue_hu, "flood fill reached tissue at {i}");
            }
        }
    }

    #[test]
    fn shell_that_does_not_fit_is_rejected() {
        let spec = PhantomSpec {
            dims: (16, 16, 16),
            outer_radius_frac: 0.95,
            ..PhantomSpec::default()
        };
        assert!(matches!(
            generate_phantom(&spec, 1),
            Err(PhantomError::ShellDoesNotFit(_))
        ));
    }

    #[test]
    fn split_counts_reproduce_worked_examples() {
        assert_eq!(split_counts(37), (30, 4, 3));
        assert_eq!(split_counts(12), (9, 2, 1));
        assert_eq!(split_counts(10), (8, 1, 1));
    }

    #[test]
    fn cohort_sizes_and_determinism() {
        let spec = PhantomSpec {
            dims: (24, 24, 24),
            ..PhantomSpec::default()
        };
        let a = generate_cohort(&spec, 12, 5).unwrap();
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (9, 2, 1));
        let b = generate_cohort(&spec, 12, 5).unwrap();
        let ids = |s: &CohortSplit| -> Vec<String> {
            s.all_cases().map(|c| c.subject_id.clone()).collect()
        };
        assert_eq!(ids(&a), ids(&b));
        assert_eq!(
            a.train[0].mri_a.data, b.train[0].mri_a.data,
            "same seed reproduces volumes"
        );
        // Disjoint subject ids across splits.
        let mut all = ids(&a);
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 12);
    }

    #[test]
    fn cohort_too_small_is_an_error() {
        let spec = PhantomSpec {
            dims: (24, 24, 24),
            ..PhantomSpec::default()
        };
        assert!(matches!(
            generate_cohort(&spec, 9, 1),
            Err(PhantomError::CohortTooSmall(9))
        ));
    }

    #[test]
    fn domain_shift_changes_mri_but_not_ct() {
        let case = generate_phantom(&PhantomSpec::default(), 11).unwrap();
        let shifted = domain_shift(&case, 99);
        assert_eq!(shifted.domain_tag, DomainTag::Shifted);
        let mad: f64 = case
            .mri_a
            .data
            .iter()
            .zip(shifted.mri_a.data.iter())
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum::<f64>()
            / case.mri_a.len() as f64;
        assert!(mad > 1e-3, "shift must move the MRI, mad {mad}");
        let ct_bits: Vec<u32> = case.ct.data.iter().map(|x| x.to_bits()).collect();
        let ct_bits_shifted: Vec<u32> = shifted.ct.data.iter().map(|x| x.to_bits()).collect();
        assert_eq!(ct_bits, ct_bits_shifted, "CT is bit-exact");
        assert_eq!(case.skull_label, shifted.skull_label);
    }

    #[test]
    fn shift_degrades_fidelity_more_than_a_noise_redraw() {
        let spec = PhantomSpec::default();
        let case = generate_phantom(&spec, 21).unwrap();
        let redraw = generate_phantom_with_noise_seed(&spec, 21, 22).unwrap();
        let shifted = domain_shift(&case, 23);
        let psnr_redraw = psnr_for_test(&case.mri_a.data, &redraw.mri_a.data);
        let psnr_shift = psnr_for_test(&case.mri_a.data, &shifted.mri_a.data);
        assert!(
            psnr_shift < psnr_redraw,
            "shift PSNR {psnr_shift} should be below redraw PSNR {psnr_redraw}"
        );
    }

    #[test]
    fn cohort_roundtrips_through_disk() {
        let spec = PhantomSpec {
            dims: (16, 16, 16),
            ..PhantomSpec::default()
        };
        let split = generate_cohort(&spec, 10, 77).unwrap();
        let dir = std::env::temp_dir().join(format!(
            "sctforge-cohort-{}-{}",
            std::process::id(),
            rand::random::<u32>()
        ));
        save_cohort(&split, &dir).unwrap();
        let loaded = load_cohort(&dir).unwrap();
        assert_eq!(loaded.train.len(), split.train.len());
        assert_eq!(loaded.val.len(), split.val.len());
        assert_eq!(loaded.test.len(), split.test.len());
        for (a, b) in split.all_cases().zip(loaded.all_cases()) {
            assert_eq!(a.subject_id, b.subject_id);
            assert_eq!(a.domain_tag, b.domain_tag);
            let bits = |v: &Volume3D| -> Vec<u32> { v.data.iter().map(|x| x.to_bits()).collect() };
            assert_eq!(bits(&a.mri_a), bits(&b.mri_a));
            assert_eq!(bits(&a.ct), bits(&b.ct));
            assert_eq!(a.skull_label, b.skull_label);
        }
    }
}
