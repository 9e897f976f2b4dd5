use std::collections::VecDeque;
use std::fs;

use m2mil::phantom::{
    generate_case, generate_dataset, generate_scan, read_case, read_manifest, write_case, Case,
    DatasetConfig, PhantomConfig, Severity, BACKGROUND_HU, INFECTION_CUTOFF_HU, LOBE_COUNT,
};
use proptest::prelude::*;

fn small() -> PhantomConfig {
    PhantomConfig {
        depth: (32, 36),
        height: (64, 70),
        width: (64, 70),
        ..PhantomConfig::default()
    }
}

/// Infected fraction recomputed from intensities alone.
fn scanned_fraction(case: &Case) -> f64 {
    let (mut lung, mut hot) = (0usize, 0usize);
    for (v, &l) in case.volume.voxels.iter().zip(&case.mask.labels) {
        if l > 0 {
            lung += 1;
            if *v > INFECTION_CUTOFF_HU {
                hot += 1;
            }
        }
    }
    hot as f64 / lung as f64
}

/// Number of 6-connected components of voxels labelled `label`.
fn components(case: &Case, label: u8) -> usize {
    let [d, h, w] = case.mask.extents;
    let labels = &case.mask.labels;
    let mut seen = vec![false; labels.len()];
    let mut count = 0;
    for start in 0..labels.len() {
        if labels[start] != label || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
            let mut push = |j: usize| {
                if labels[j] == label && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if z > 0 {
                push(i - h * w);
            }
            if z + 1 < d {
                push(i + h * w);
            }
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
        }
    }
    count
}

#[test]
fn infected_fraction_matches_voxel_scan() {
    for (seed, severe_prob) in (0..12).map(|s| (s, if s % 2 == 0 { 1.0 } else { 0.0 })) {
        let cfg = PhantomConfig {
            severe_prob,
            ..small()
        };
        let case = generate_case(seed, &cfg).unwrap();
        assert_eq!(
            case.infected_fraction,
            scanned_fraction(&case),
            "seed {seed}"
        );
        assert_eq!(
            case.severity == Severity::Severe,
            case.infected_fraction >= cfg.tau
        );
    }
}

#[test]
fn each_lobe_is_one_connected_region() {
    for seed in 0..4 {
        let case = generate_case(seed, &small()).unwrap();
        for label in 1..=LOBE_COUNT {
            assert_eq!(components(&case, label), 1, "seed {seed} lobe {label}");
        }
    }
}

#[test]
fn scans_of_one_patient_share_anatomy() {
    let cfg = small();
    let a = generate_scan(5, 100, &cfg).unwrap();
    let b = generate_scan(5, 200, &cfg).unwrap();
    assert_eq!(a.mask, b.mask);
    assert_ne!(a.volume.voxels, b.volume.voxels);
}

#[test]
fn case_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let case = generate_case(3, &small()).unwrap();
    let rec = write_case(dir.path(), "case-0000", "patient-000", &case, true).unwrap();
    let back = read_case(dir.path(), &rec).unwrap();
    assert_eq!(back.volume, case.volume);
    assert_eq!(back.mask.as_ref(), Some(&case.mask));
    let rec = write_case(dir.path(), "case-0001", "patient-000", &case, false).unwrap();
    assert!(rec.mask.is_none());
    assert!(read_case(dir.path(), &rec).unwrap().mask.is_none());
}

#[test]
fn truncated_volume_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let case = generate_case(4, &small()).unwrap();
    let rec = write_case(dir.path(), "case-0000", "patient-000", &case, false).unwrap();
    let path = dir.path().join(&rec.volume);
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(read_case(dir.path(), &rec).is_err());
}

#[test]
fn dataset_manifest_is_ordered_and_reproducible() {
    let cfg = DatasetConfig {
        cases: 7,
        phantom: small(),
        ..DatasetConfig::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m = generate_dataset(a.path(), &cfg).unwrap();
    generate_dataset(b.path(), &cfg).unwrap();
    assert_eq!(read_manifest(a.path()).unwrap(), m);
    let ids: Vec<&str> = m.cases.iter().map(|c| c.id.as_str()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
    // three consecutive scans per patient
    let patients: Vec<&str> = m.cases.iter().map(|c| c.patient_id.as_str()).collect();
    assert_eq!(patients[0], patients[2]);
    assert_ne!(patients[2], patients[3]);
    assert_eq!(m.patients().len(), 3);
    for rec in &m.cases {
        let fa = fs::read(a.path().join(&rec.volume)).unwrap();
        let fb = fs::read(b.path().join(&rec.volume)).unwrap();
        assert_eq!(fa, fb);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn labels_and_intensities_are_consistent(seed in any::<u64>()) {
        let case = generate_case(seed, &small()).unwrap();
        for (v, &l) in case.volume.voxels.iter().zip(&case.mask.labels) {
            prop_assert!(l <= LOBE_COUNT);
            if l > 0 {
                // lung is far from both air and soft tissue
                prop_assert!(*v > BACKGROUND_HU && *v < 50.0);
            }
        }
        prop_assert!((0.0..=1.0).contains(&case.infected_fraction));
    }
}
