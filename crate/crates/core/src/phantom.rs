//! Synthetic chest phantoms with lobe labels and infection blobs, plus the
//! on-disk dataset layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/cases/<id>.json   sidecar: extents, spacing, dtype
//! <root>/cases/<id>.vol    raw little-endian voxels
//! <root>/cases/<id>.mask   raw u8 lobe labels (optional)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const BACKGROUND_HU: f32 = -1200.0;
pub const BODY_HU: f32 = -20.0;
/// Mean intensity of lobes 1..=5.
pub const LOBE_HU: [f32; 5] = [-950.0, -875.0, -800.0, -725.0, -650.0];
/// Added to lung tissue inside a focal ground-glass nodule.
pub const NODULE_SHIFT_HU: f32 = 450.0;
/// Added to lung tissue inside a diffuse consolidation.
pub const CONSOLIDATION_SHIFT_HU: f32 = 650.0;
/// Lung voxels brighter than this are infected; lies between the brightest
/// healthy lobe and the darkest infected one, with noise margin.
pub const INFECTION_CUTOFF_HU: f32 = -550.0;
pub const LOBE_COUNT: u8 = 5;

/// Smallest distance from the cutoff to either healthy or infected lung.
fn cutoff_margin() -> f32 {
    let healthy = INFECTION_CUTOFF_HU - LOBE_HU[4];
    let infected = LOBE_HU[0] + NODULE_SHIFT_HU - INFECTION_CUTOFF_HU;
    healthy.min(infected)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Severity {
    NonSevere,
    Severe,
}

impl Severity {
    pub fn index(self) -> usize {
        match self {
            Severity::NonSevere => 0,
            Severity::Severe => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Severity::NonSevere),
            1 => Ok(Severity::Severe),
            _ => invalid(format!("severity index {i} out of range")),
        }
    }
}

/// 3-D scalar image, indexed `(z, y, x)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub extents: [usize; 3],
    pub spacing: [f64; 3],
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(extents: [usize; 3], spacing: [f64; 3], voxels: Vec<f32>) -> Result<Self> {
        if extents.iter().product::<usize>() != voxels.len() {
            return Err(Error::ShapeMismatch {
                op: "Volume::new",
                lhs: extents.to_vec(),
                rhs: vec![voxels.len()],
            });
        }
        Ok(Self {
            extents,
            spacing,
            voxels,
        })
    }

    pub fn filled(extents: [usize; 3], value: f32) -> Self {
        Self {
            extents,
            spacing: [1.0; 3],
            voxels: vec![value; extents.iter().product()],
        }
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.extents[1] + y) * self.extents[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[self.index(z, y, x)]
    }
}

/// Voxel labels: 0 background, 1..=5 lobes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LobeMask {
    pub extents: [usize; 3],
    pub labels: Vec<u8>,
}

impl LobeMask {
    pub fn new(extents: [usize; 3], labels: Vec<u8>) -> Result<Self> {
        if extents.iter().product::<usize>() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "LobeMask::new",
                lhs: extents.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        Ok(Self { extents, labels })
    }

    pub fn histogram(&self) -> [usize; 6] {
        let mut h = [0; 6];
        for &l in &self.labels {
            h[l.min(5) as usize] += 1;
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    /// Inclusive ranges of (depth, height, width) in voxels.
    pub depth: (usize, usize),
    pub height: (usize, usize),
    pub width: (usize, usize),
    /// Inclusive ranges of slice spacing and in-plane spacing, mm.
    pub slice_spacing: (f64, f64),
    pub pixel_spacing: (f64, f64),
    /// Infected lung fraction at or above which a case is severe.
    pub tau: f64,
    /// Probability that a case is drawn with diffuse (severe-range) infection.
    pub severe_prob: f64,
    /// Upper bound on infection blobs per case; 0 disables infection.
    pub max_blobs: usize,
    /// Standard deviation of voxel noise, truncated at three sigma.
    pub noise_hu: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            depth: (44, 52),
            height: (88, 104),
            width: (88, 104),
            slice_spacing: (1.0, 5.0),
            pixel_spacing: (0.6, 0.9),
            tau: 0.15,
            severe_prob: 0.2,
            max_blobs: 2000,
            noise_hu: 6.0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let degenerate = |m: String| Err(Error::DegenerateConfig(m));
        for (name, (lo, hi), min) in [
            ("depth", self.depth, 32),
            ("height", self.height, 64),
            ("width", self.width, 64),
        ] {
            if lo > hi {
                return degenerate(format!("{name} range {lo}..={hi} is empty"));
            }
            if lo < min {
                return degenerate(format!(
                    "{name} {lo} too small to hold the lungs (minimum {min})"
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.tau) || !(0.0..=1.0).contains(&self.severe_prob) {
            return invalid("tau and severe_prob must lie in [0, 1]");
        }
        if self.noise_hu < 0.0 || 3.0 * self.noise_hu >= f64::from(cutoff_margin()) {
            return invalid(format!(
                "noise {} HU would blur the infection cutoff",
                self.noise_hu
            ));
        }
        Ok(())
    }
}

/// One generated scan.
#[derive(Clone, Debug)]
pub struct Case {
    pub volume: Volume,
    pub mask: LobeMask,
    pub severity: Severity,
    pub infected_fraction: f64,
}

struct Lung {
    center: [f64; 3],
    semi: [f64; 3],
    right: bool,
}

impl Lung {
    /// Normalized coordinates; inside iff the squared norm is <= 1.
    fn normalized(&self, z: usize, y: usize, x: usize) -> [f64; 3] {
        [
            (z as f64 - self.center[0]) / self.semi[0],
            (y as f64 - self.center[1]) / self.semi[1],
            (x as f64 - self.center[2]) / self.semi[2],
        ]
    }

    fn lobe(&self, n: [f64; 3]) -> u8 {
        // oblique fissure planes through the ellipsoid
        let t = -n[0] + 0.5 * n[1];
        if self.right {
            if t > 0.25 {
                1
            } else if t > -0.35 {
                2
            } else {
                3
            }
        } else if t > 0.0 {
            4
        } else {
            5
        }
    }
}

fn range_usize(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    rng.gen_range(lo..=hi)
}

fn range_f64(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Generates one case; fully determined by `seed`.
pub fn generate_case(seed: u64, cfg: &PhantomConfig) -> Result<Case> {
    generate_scan(seed, seed, cfg)
}

/// Like [`generate_case`], but body and lung geometry come from
/// `anatomy_seed` so several scans of one patient share it.
pub fn generate_scan(anatomy_seed: u64, scan_seed: u64, cfg: &PhantomConfig) -> Result<Case> {
    cfg.validate()?;
    let mut anat = ChaCha8Rng::seed_from_u64(anatomy_seed);
    let extents = [
        range_usize(&mut anat, cfg.depth),
        range_usize(&mut anat, cfg.height),
        range_usize(&mut anat, cfg.width),
    ];
    let [d, h, w] = extents;
    let sp = range_f64(&mut anat, cfg.pixel_spacing);
    let spacing = [range_f64(&mut anat, cfg.slice_spacing), sp, sp];
    let body_semi = [0.40 * h as f64, 0.45 * w as f64];
    let body_center = [h as f64 / 2.0, w as f64 / 2.0];
    let scale = |rng: &mut ChaCha8Rng| rng.gen_range(0.92..1.08);
    let lungs: Vec<Lung> = [true, false]
        .into_iter()
        .map(|right| {
            let side = if right { -1.0 } else { 1.0 };
            Lung {
                center: [
                    d as f64 / 2.0,
                    0.48 * h as f64,
                    w as f64 / 2.0 + side * 0.2 * w as f64,
                ],
                semi: [
                    0.42 * d as f64 * scale(&mut anat),
                    0.27 * h as f64 * scale(&mut anat),
                    0.14 * w as f64 * scale(&mut anat),
                ],
                right,
            }
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(scan_seed ^ 0x9e37_79b9_7f4a_7c15);
    let noise = Normal::new(0.0, cfg.noise_hu.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let bound = 3.0 * cfg.noise_hu;
    let sample_noise = |rng: &mut ChaCha8Rng| -> f32 {
        if cfg.noise_hu == 0.0 {
            return 0.0;
        }
        let v: f64 = noise.sample(rng);
        v.clamp(-bound, bound).round() as f32
    };
    let n = d * h * w;
    let mut voxels = vec![BACKGROUND_HU; n];
    let mut labels = vec![0u8; n];
    let mut lung_voxels = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                let by = (y as f64 - body_center[0]) / body_semi[0];
                let bx = (x as f64 - body_center[1]) / body_semi[1];
                let in_body = by * by + bx * bx <= 1.0;
                let mut lobe = 0;
                for lung in &lungs {
                    let nrm = lung.normalized(z, y, x);
                    if nrm.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                        lobe = lung.lobe(nrm);
                    }
                }
                if lobe > 0 && !in_body {
                    return Err(Error::DegenerateConfig(
                        "lung extends outside the body".into(),
                    ));
                }
                if lobe > 0 {
                    voxels[i] = LOBE_HU[lobe as usize - 1] + sample_noise(&mut rng);
                    labels[i] = lobe;
                    lung_voxels.push(i);
                } else if in_body {
                    voxels[i] = BODY_HU + sample_noise(&mut rng);
                }
            }
        }
    }
    if lung_voxels.is_empty() {
        return Err(Error::DegenerateConfig(
            "no lung voxels fit in the extents".into(),
        ));
    }

    let mut infected = vec![false; n];
    let mut infected_count = 0usize;
    let total = lung_voxels.len() as f64;
    if cfg.max_blobs > 0 {
        let diffuse = rng.gen_bool(cfg.severe_prob);
        let (target, radius, shift) = if diffuse {
            let r = Normal::<f64>::new(9.0, 1.5).expect("valid");
            (rng.gen_range(0.22..0.40), r, CONSOLIDATION_SHIFT_HU)
        } else {
            let r = Normal::<f64>::new(1.5, 0.4).expect("valid");
            (rng.gen_range(0.0..0.06), r, NODULE_SHIFT_HU)
        };
        let mut blobs = 0;
        while (infected_count as f64) < target * total && blobs < cfg.max_blobs {
            blobs += 1;
            let c = lung_voxels[rng.gen_range(0..lung_voxels.len())];
            let (cz, cy, cx) = (c / (h * w), (c / w) % h, c % w);
            let r: f64 = radius.sample(&mut rng).clamp(1.0, 14.0);
            let ri = r.ceil() as isize;
            for dz in -ri..=ri {
                for dy in -ri..=ri {
                    for dx in -ri..=ri {
                        if ((dz * dz + dy * dy + dx * dx) as f64) > r * r {
                            continue;
                        }
                        let (z, y, x) = (cz as isize + dz, cy as isize + dy, cx as isize + dx);
                        if z < 0
                            || y < 0
                            || x < 0
                            || z >= d as isize
                            || y >= h as isize
                            || x >= w as isize
                        {
                            continue;
                        }
                        let i = (z as usize * h + y as usize) * w + x as usize;
                        if labels[i] > 0 && !infected[i] {
                            infected[i] = true;
                            infected_count += 1;
                            voxels[i] += shift;
                        }
                    }
                }
            }
        }
    }
    let infected_fraction = infected_count as f64 / total;
    let severity = if infected_fraction >= cfg.tau {
        Severity::Severe
    } else {
        Severity::NonSevere
    };
    Ok(Case {
        volume: Volume::new(extents, spacing, voxels)?,
        mask: LobeMask::new(extents, labels)?,
        severity,
        infected_fraction,
    })
}

/// One row of `manifest.json`. Paths are relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub id: String,
    pub patient_id: String,
    pub volume: String,
    pub mask: Option<String>,
    pub severity: Severity,
    pub infected_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub tau: f64,
    pub cases: Vec<CaseRecord>,
}

impl Manifest {
    pub fn patients(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.cases.iter().map(|c| c.patient_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn severe_fraction(&self) -> f64 {
        if self.cases.is_empty() {
            return 0.0;
        }
        let severe = self
            .cases
            .iter()
            .filter(|c| c.severity == Severity::Severe)
            .count();
        severe as f64 / self.cases.len() as f64
    }
}

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    extents: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
}

fn all_i16(voxels: &[f32]) -> bool {
    voxels
        .iter()
        .all(|&v| v.fract() == 0.0 && v >= i16::MIN as f32 && v <= i16::MAX as f32)
}

/// Writes the arrays of one case under `<root>/cases/` and returns its record.
pub fn write_case(
    root: &Path,
    id: &str,
    patient_id: &str,
    case: &Case,
    with_mask: bool,
) -> Result<CaseRecord> {
    let dir = root.join("cases");
    fs::create_dir_all(&dir)?;
    let vol = &case.volume;
    let dtype = if all_i16(&vol.voxels) { "i16" } else { "f32" };
    let sidecar = Sidecar {
        extents: vol.extents,
        spacing: vol.spacing,
        dtype: dtype.into(),
    };
    fs::write(
        dir.join(format!("{id}.json")),
        serde_json::to_vec_pretty(&sidecar)?,
    )?;
    let payload: Vec<u8> = if dtype == "i16" {
        vol.voxels
            .iter()
            .flat_map(|&v| (v as i16).to_le_bytes())
            .collect()
    } else {
        vol.voxels.iter().flat_map(|v| v.to_le_bytes()).collect()
    };
    fs::write(dir.join(format!("{id}.vol")), payload)?;
    let mask = if with_mask {
        fs::write(dir.join(format!("{id}.mask")), &case.mask.labels)?;
        Some(format!("cases/{id}.mask"))
    } else {
        None
    };
    Ok(CaseRecord {
        id: id.to_string(),
        patient_id: patient_id.to_string(),
        volume: format!("cases/{id}.vol"),
        mask,
        severity: case.severity,
        infected_fraction: case.infected_fraction,
    })
}

/// Arrays of one case as read back from disk.
#[derive(Clone, Debug)]
pub struct LoadedCase {
    pub record: CaseRecord,
    pub volume: Volume,
    pub mask: Option<LobeMask>,
}

fn sidecar_path(volume: &Path) -> PathBuf {
    volume.with_extension("json")
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let side_path = sidecar_path(path);
    let corrupt = |reason: String| Error::CorruptHeader {
        path: side_path.clone(),
        reason,
    };
    let side: Sidecar =
        serde_json::from_slice(&fs::read(&side_path)?).map_err(|e| corrupt(e.to_string()))?;
    let width = match side.dtype.as_str() {
        "i16" => 2,
        "f32" => 4,
        other => return Err(corrupt(format!("unsupported dtype `{other}`"))),
    };
    let declared: usize = side.extents.iter().product();
    let bytes = fs::read(path)?;
    if bytes.len() < declared * width {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: declared * width,
            found: bytes.len(),
        });
    }
    if bytes.len() != declared * width {
        return Err(Error::ExtentMismatch {
            path: path.to_path_buf(),
            declared,
            actual: bytes.len() / width,
        });
    }
    let voxels = if width == 2 {
        bytes
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
            .collect()
    } else {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    };
    Volume::new(side.extents, side.spacing, voxels)
}

pub fn read_mask(path: &Path, extents: [usize; 3]) -> Result<LobeMask> {
    let labels = fs::read(path)?;
    let declared: usize = extents.iter().product();
    if labels.len() < declared {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: declared,
            found: labels.len(),
        });
    }
    if labels.len() != declared {
        return Err(Error::ExtentMismatch {
            path: path.to_path_buf(),
            declared,
            actual: labels.len(),
        });
    }
    LobeMask::new(extents, labels)
}

pub fn read_case(root: &Path, record: &CaseRecord) -> Result<LoadedCase> {
    let volume = read_volume(&root.join(&record.volume))?;
    let mask = match &record.mask {
        Some(p) => Some(read_mask(&root.join(p), volume.extents)?),
        None => None,
    };
    Ok(LoadedCase {
        record: record.clone(),
        volume,
        mask,
    })
}

pub fn write_manifest(root: &Path, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(root)?;
    fs::write(root.join(MANIFEST), serde_json::to_vec_pretty(manifest)?)?;
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST);
    let bytes = fs::read(&path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::CorruptHeader {
        path,
        reason: e.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub cases: usize,
    pub scans_per_patient: usize,
    /// Fraction of cases that ship a lobe mask.
    pub mask_fraction: f64,
    pub seed: u64,
    pub phantom: PhantomConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            cases: 120,
            scans_per_patient: 3,
            mask_fraction: 0.25,
            seed: 7,
            phantom: PhantomConfig::default(),
        }
    }
}

/// Generates and writes a whole dataset, returning its manifest.
pub fn generate_dataset(root: &Path, cfg: &DatasetConfig) -> Result<Manifest> {
    if cfg.cases == 0 || cfg.scans_per_patient == 0 {
        return invalid("dataset needs at least one case and one scan per patient");
    }
    if !(0.0..=1.0).contains(&cfg.mask_fraction) {
        return invalid("mask_fraction must lie in [0, 1]");
    }
    cfg.phantom.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cases = Vec::with_capacity(cfg.cases);
    let mut anatomy_seed = 0;
    for i in 0..cfg.cases {
        let patient = i / cfg.scans_per_patient;
        if i % cfg.scans_per_patient == 0 {
            anatomy_seed = rng.gen();
        }
        let scan_seed: u64 = rng.gen();
        let with_mask = rng.gen_bool(cfg.mask_fraction);
        let case = generate_scan(anatomy_seed, scan_seed, &cfg.phantom)?;
        let id = format!("case-{i:04}");
        let pid = format!("patient-{patient:03}");
        cases.push(write_case(root, &id, &pid, &case, with_mask)?);
    }
    let manifest = Manifest {
        version: 1,
        tau: cfg.phantom.tau,
        cases,
    };
    write_manifest(root, &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomConfig {
        PhantomConfig {
            depth: (32, 32),
            height: (64, 64),
            width: (64, 64),
            ..Default::default()
        }
    }

    #[test]
    fn zero_blobs_is_non_severe() {
        let cfg = PhantomConfig {
            max_blobs: 0,
            ..small()
        };
        let c = generate_case(11, &cfg).unwrap();
        assert_eq!(c.severity, Severity::NonSevere);
        assert_eq!(c.infected_fraction, 0.0);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_case(5, &small()).unwrap();
        let b = generate_case(5, &small()).unwrap();
        assert_eq!(a.volume, b.volume);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.severity, b.severity);
    }

    #[test]
    fn all_labels_present_and_intensities_in_range() {
        let c = generate_case(2, &small()).unwrap();
        assert!(c.mask.histogram().iter().all(|&n| n > 0));
        for (v, l) in c.volume.voxels.iter().zip(&c.mask.labels) {
            assert!(v.is_finite() && *v >= BACKGROUND_HU);
            if *l > 0 {
                assert!(*v < 0.0);
            }
        }
    }

    #[test]
    fn rejects_degenerate_extents() {
        let cfg = PhantomConfig {
            height: (40, 40),
            ..small()
        };
        assert!(matches!(
            generate_case(1, &cfg),
            Err(Error::DegenerateConfig(_))
        ));
        let cfg = PhantomConfig {
            depth: (40, 35),
            ..small()
        };
        assert!(generate_case(1, &cfg).is_err());
    }
}
