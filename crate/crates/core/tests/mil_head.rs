use m2mil::backbone::ArchConfig;
use m2mil::model::M2Unet;
use m2mil::tensorcore::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ArchConfig {
    ArchConfig {
        width: 3,
        deep_width: 6,
        embed_concepts: 5,
        image_concepts: 4,
        seg_classes: 6,
        severity_classes: 2,
    }
}

const S: usize = 16;

fn patches(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..S * S).map(|_| rng.gen_range(0.0..255.0)).collect())
        .collect()
}

fn bag(p: &[Vec<f64>]) -> Tensor {
    Tensor::new(vec![p.len(), 1, S, S], p.concat()).unwrap()
}

/// Evaluation-mode predictions do not depend on patch order or on repeats.
#[test]
fn predictions_ignore_order_and_duplicates() {
    let model = M2Unet::new(tiny(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let n = rng.gen_range(1..6);
        let p = patches(n, &mut rng);
        let base = model.predict(&bag(&p), false).unwrap().severity_prob;
        let mut shuffled = p.clone();
        shuffled.reverse();
        shuffled.rotate_left(rng.gen_range(0..n));
        let mut dup = p.clone();
        dup.push(p[rng.gen_range(0..n)].clone());
        dup.extend(p.iter().cloned());
        for other in [shuffled, dup] {
            let q = model.predict(&bag(&other), false).unwrap().severity_prob;
            assert!((q - base).abs() <= 1e-12, "{q} vs {base}");
        }
    }
}

#[test]
fn single_patch_bag_predicts_a_probability() {
    let model = M2Unet::new(tiny(), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let pred = model.predict(&bag(&patches(1, &mut rng)), true).unwrap();
    assert!((0.0..=1.0).contains(&pred.severity_prob));
    let labels = pred.seg_labels.unwrap();
    assert_eq!(labels.len(), 1);
    assert_eq!(labels[0].len(), S * S);
    assert!(labels[0].iter().all(|&l| l < 6));
}

#[test]
fn checkpoint_round_trip_reproduces_predictions() {
    let model = M2Unet::new(tiny(), 12).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model.save(&path).unwrap();
    let back = M2Unet::load(&path).unwrap();
    assert_eq!(back, model);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let b = bag(&patches(3, &mut rng));
    assert_eq!(
        model.predict(&b, true).unwrap(),
        back.predict(&b, true).unwrap()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn doubling_a_bag_is_a_fixed_point(seed in any::<u64>()) {
        let model = M2Unet::new(tiny(), seed % 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = patches(3, &mut rng);
        let mut twice = p.clone();
        twice.extend(p.iter().cloned());
        let a = model.predict(&bag(&p), false).unwrap().severity_prob;
        let b = model.predict(&bag(&twice), false).unwrap().severity_prob;
        prop_assert!((a - b).abs() <= 1e-12);
    }
}
