//! From raw volumes to bags of 2-D patches: pulmonary windowing, body
//! cropping, random patch sampling and duplication balancing of severe cases.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::phantom::{LobeMask, Severity, Volume, BACKGROUND_HU};
use crate::tensorcore::Tensor;

pub const WINDOW_LOW: f32 = -1200.0;
pub const WINDOW_HIGH: f32 = 0.0;

/// Default minimum axial extent of a body crop.
pub const MIN_CROP_AXIAL: usize = 256;

/// Clamp to the pulmonary window and map it linearly onto `[0, 255]`.
#[inline]
pub fn window_value(hu: f32) -> f32 {
    let v = hu.clamp(WINDOW_LOW, WINDOW_HIGH);
    (v - WINDOW_LOW) * (255.0 / (WINDOW_HIGH - WINDOW_LOW))
}

pub fn window_and_normalize(volume: &Volume) -> Volume {
    Volume {
        extents: volume.extents,
        spacing: volume.spacing,
        voxels: volume.voxels.iter().map(|&v| window_value(v)).collect(),
    }
}

/// Half-open voxel box `[lo, hi)` per axis `(z, y, x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BoundingBox {
    pub fn extents(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.hi[a] - self.lo[a])
    }
}

/// Bounding box of the largest 6-connected component of voxels above the
/// background level.
pub fn body_bounding_box(volume: &Volume) -> Result<BoundingBox> {
    let [d, h, w] = volume.extents;
    let fg: Vec<bool> = volume.voxels.iter().map(|&v| v > BACKGROUND_HU).collect();
    let mut seen = vec![false; fg.len()];
    let mut best: Option<(usize, BoundingBox)> = None;
    let mut queue = VecDeque::new();
    for start in 0..fg.len() {
        if !fg[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut size = 0;
        let mut bb = BoundingBox {
            lo: [usize::MAX; 3],
            hi: [0; 3],
        };
        while let Some(i) = queue.pop_front() {
            size += 1;
            let p = [i / (h * w), (i / w) % h, i % w];
            for a in 0..3 {
                bb.lo[a] = bb.lo[a].min(p[a]);
                bb.hi[a] = bb.hi[a].max(p[a] + 1);
            }
            let mut visit = |j: usize| {
                if fg[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if p[0] > 0 {
                visit(i - h * w);
            }
            if p[0] + 1 < d {
                visit(i + h * w);
            }
            if p[1] > 0 {
                visit(i - w);
            }
            if p[1] + 1 < h {
                visit(i + w);
            }
            if p[2] > 0 {
                visit(i - 1);
            }
            if p[2] + 1 < w {
                visit(i + 1);
            }
        }
        if best.map_or(true, |(s, _)| size > s) {
            best = Some((size, bb));
        }
    }
    best.map(|(_, bb)| bb).ok_or(Error::EmptyForeground)
}

/// Grows `[lo, hi)` around its center to at least `min` voxels, clipped to
/// `[0, len)`; when `len < min` the whole axis is used.
fn expand_axis(lo: usize, hi: usize, min: usize, len: usize) -> (usize, usize) {
    if hi - lo >= min {
        return (lo, hi);
    }
    if len <= min {
        return (0, len);
    }
    let extra = min - (hi - lo);
    let mut new_lo = lo.saturating_sub(extra / 2);
    let mut new_hi = new_lo + min;
    if new_hi > len {
        new_hi = len;
        new_lo = len - min;
    }
    (new_lo, new_hi)
}

pub fn crop_volume(volume: &Volume, bb: &BoundingBox) -> Volume {
    let ext = bb.extents();
    let mut voxels = Vec::with_capacity(ext.iter().product());
    for z in bb.lo[0]..bb.hi[0] {
        for y in bb.lo[1]..bb.hi[1] {
            let start = volume.index(z, y, bb.lo[2]);
            voxels.extend_from_slice(&volume.voxels[start..start + ext[2]]);
        }
    }
    Volume {
        extents: ext,
        spacing: volume.spacing,
        voxels,
    }
}

pub fn crop_mask(mask: &LobeMask, bb: &BoundingBox) -> LobeMask {
    let ext = bb.extents();
    let [_, h, w] = mask.extents;
    let mut labels = Vec::with_capacity(ext.iter().product());
    for z in bb.lo[0]..bb.hi[0] {
        for y in bb.lo[1]..bb.hi[1] {
            let start = (z * h + y) * w + bb.lo[2];
            labels.extend_from_slice(&mask.labels[start..start + ext[2]]);
        }
    }
    LobeMask {
        extents: ext,
        labels,
    }
}

/// Crops a raw (un-windowed) volume to the body: tight box of the largest
/// foreground component, widened axially to `min_axial` where the volume
/// allows.
pub fn body_crop(volume: &Volume, min_axial: usize) -> Result<(Volume, BoundingBox)> {
    let mut bb = body_bounding_box(volume)?;
    for a in 1..3 {
        let (lo, hi) = expand_axis(bb.lo[a], bb.hi[a], min_axial, volume.extents[a]);
        bb.lo[a] = lo;
        bb.hi[a] = hi;
    }
    Ok((crop_volume(volume, &bb), bb))
}

/// A volume ready for sampling: body-cropped and windowed, with the mask
/// cropped alike.
#[derive(Clone, Debug)]
pub struct PreparedCase {
    pub id: String,
    pub volume: Volume,
    pub mask: Option<LobeMask>,
    pub severity: Severity,
}

pub fn prepare_case(
    id: &str,
    volume: &Volume,
    mask: Option<&LobeMask>,
    severity: Severity,
    min_axial: usize,
) -> Result<PreparedCase> {
    let (cropped, bb) = body_crop(volume, min_axial)?;
    Ok(PreparedCase {
        id: id.to_string(),
        volume: window_and_normalize(&cropped),
        mask: mask.map(|m| crop_mask(m, &bb)),
        severity,
    })
}

/// `n` patches of `S x S` from one volume. Only the image-level label is
/// known; patches carry no labels of their own.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub case_id: String,
    /// `[n, 1, S, S]`, values in `[0, 255]`.
    pub patches: Tensor,
    /// Per-patch lobe labels, `S * S` each, when the case has a mask.
    pub masks: Option<Vec<Vec<u8>>>,
    pub severity: Severity,
    /// `(slice, y, x)` of each patch's top-left corner.
    pub origins: Vec<[usize; 3]>,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.patches.shape()[2]
    }

    pub fn mask_refs(&self) -> Vec<Option<&[u8]>> {
        match &self.masks {
            Some(m) => m.iter().map(|p| Some(p.as_slice())).collect(),
            None => vec![None; self.len()],
        }
    }
}

/// Samples `n` axial patches at uniformly random positions fully inside
/// the volume.
pub fn build_bag<R: Rng + ?Sized>(
    case: &PreparedCase,
    n: usize,
    size: usize,
    rng: &mut R,
) -> Result<Bag> {
    let [d, h, w] = case.volume.extents;
    if n == 0 {
        return Err(Error::EmptyBag);
    }
    if size == 0 || size > h || size > w {
        return invalid(format!(
            "patch size {size} does not fit axial extents {h}x{w}"
        ));
    }
    let mut patches = Vec::with_capacity(n * size * size);
    let mut masks = case.mask.as_ref().map(|_| Vec::with_capacity(n));
    let mut origins = Vec::with_capacity(n);
    for _ in 0..n {
        let z = rng.gen_range(0..d);
        let y = rng.gen_range(0..=h - size);
        let x = rng.gen_range(0..=w - size);
        for row in y..y + size {
            let start = case.volume.index(z, row, x);
            patches.extend(
                case.volume.voxels[start..start + size]
                    .iter()
                    .map(|&v| v as f64),
            );
        }
        if let (Some(out), Some(mask)) = (masks.as_mut(), case.mask.as_ref()) {
            let mut m = Vec::with_capacity(size * size);
            for row in y..y + size {
                let start = (z * h + row) * w + x;
                m.extend_from_slice(&mask.labels[start..start + size]);
            }
            out.push(m);
        }
        origins.push([z, y, x]);
    }
    Ok(Bag {
        case_id: case.id.clone(),
        patches: Tensor::new(vec![n, 1, size, size], patches)?,
        masks,
        severity: case.severity,
        origins,
    })
}

/// One training draw: which case to sample and with which seed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub case_index: usize,
    pub case_id: String,
    pub severity: Severity,
    pub seed: u64,
}

/// Repeats every severe entry `ceil(non_severe / severe)` times so severe
/// entries are at least as many as non-severe ones. Copies get fresh seeds
/// so their bags differ.
pub fn balance_by_duplication(entries: Vec<SampleEntry>, seed: u64) -> Vec<SampleEntry> {
    let severe = entries
        .iter()
        .filter(|e| e.severity == Severity::Severe)
        .count();
    let non_severe = entries.len() - severe;
    if severe == 0 {
        if non_severe > 0 {
            log::warn!("training split has no severe cases; skipping duplication");
        }
        return entries;
    }
    if severe >= non_severe {
        return entries;
    }
    let copies = non_severe.div_ceil(severe);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(non_severe + severe * copies);
    for e in entries {
        if e.severity == Severity::Severe {
            for c in 0..copies {
                let mut dup = e.clone();
                if c > 0 {
                    dup.seed = rng.gen();
                }
                out.push(dup);
            }
        } else {
            out.push(e);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_examples() {
        assert_eq!(window_value(-1200.0), 0.0);
        assert_eq!(window_value(0.0), 255.0);
        assert_eq!(window_value(-600.0), 127.5);
        assert_eq!(window_value(500.0), 255.0);
        assert_eq!(window_value(-3000.0), 0.0);
    }

    #[test]
    fn empty_foreground_is_an_error() {
        let v = Volume::filled([4, 8, 8], BACKGROUND_HU);
        assert!(matches!(body_crop(&v, 0), Err(Error::EmptyForeground)));
    }

    #[test]
    fn full_body_crop_is_identity() {
        let v = Volume::filled([3, 6, 5], -10.0);
        let (c, bb) = body_crop(&v, MIN_CROP_AXIAL).unwrap();
        assert_eq!(
            bb,
            BoundingBox {
                lo: [0; 3],
                hi: [3, 6, 5]
            }
        );
        assert_eq!(c, v);
    }

    #[test]
    fn largest_component_wins() {
        let mut v = Volume::filled([1, 10, 10], BACKGROUND_HU);
        let small = v.index(0, 0, 0);
        v.voxels[small] = 0.0;
        for y in 4..8 {
            for x in 3..9 {
                let i = v.index(0, y, x);
                v.voxels[i] = -800.0;
            }
        }
        let bb = body_bounding_box(&v).unwrap();
        assert_eq!(
            bb,
            BoundingBox {
                lo: [0, 4, 3],
                hi: [1, 8, 9]
            }
        );
    }

    #[test]
    fn axis_expansion() {
        assert_eq!(expand_axis(4, 8, 6, 20), (3, 9));
        assert_eq!(expand_axis(0, 2, 6, 20), (0, 6));
        assert_eq!(expand_axis(17, 20, 6, 20), (14, 20));
        assert_eq!(expand_axis(2, 5, 30, 20), (0, 20));
        assert_eq!(expand_axis(2, 15, 6, 20), (2, 15));
    }

    fn entries(severe: usize, non_severe: usize) -> Vec<SampleEntry> {
        (0..severe + non_severe)
            .map(|i| SampleEntry {
                case_index: i,
                case_id: format!("c{i}"),
                severity: if i < severe {
                    Severity::Severe
                } else {
                    Severity::NonSevere
                },
                seed: i as u64,
            })
            .collect()
    }

    #[test]
    fn duplication_counts() {
        let out = balance_by_duplication(entries(4, 16), 1);
        let severe: Vec<_> = out
            .iter()
            .filter(|e| e.severity == Severity::Severe)
            .collect();
        assert_eq!(severe.len(), 16);
        for id in 0..4 {
            assert_eq!(severe.iter().filter(|e| e.case_index == id).count(), 4);
        }
        let mut seeds: Vec<u64> = severe.iter().map(|e| e.seed).collect();
        seeds.sort();
        seeds.dedup();
        assert_eq!(seeds.len(), 16);

        assert_eq!(balance_by_duplication(entries(5, 5), 1), entries(5, 5));
        assert_eq!(balance_by_duplication(entries(0, 5), 1), entries(0, 5));
    }

    #[test]
    fn bag_from_constant_volume() {
        let case = PreparedCase {
            id: "c".into(),
            volume: Volume::filled([2, 16, 16], 42.0),
            mask: None,
            severity: Severity::NonSevere,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bag = build_bag(&case, 1, 16, &mut rng).unwrap();
        assert_eq!(bag.patches.shape(), &[1, 1, 16, 16]);
        assert!(bag.patches.data().iter().all(|&v| v == 42.0));
        assert!(bag.masks.is_none());
        assert!(build_bag(&case, 1, 17, &mut rng).is_err());
        assert!(matches!(
            build_bag(&case, 0, 16, &mut rng),
            Err(Error::EmptyBag)
        ));
    }
}
