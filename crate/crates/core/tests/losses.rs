use m2mil::loss::{mil_loss, seg_loss, total_loss, LossConfig, DICE_EPS};
use m2mil::tensorcore::{Graph, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect(),
    )
    .unwrap()
}

fn masks(n: usize, plane: usize, classes: u8, rng: &mut ChaCha8Rng) -> Vec<Vec<u8>> {
    (0..n)
        .map(|_| (0..plane).map(|_| rng.gen_range(0..classes)).collect())
        .collect()
}

struct Objective {
    value: f64,
    cls_grad: Vec<f64>,
    seg_grad: Vec<f64>,
}

fn objective(cls: &Tensor, seg: &Tensor, label: usize, m: &[Vec<u8>], lambda: f64) -> Objective {
    let mut g = Graph::new();
    let z = g.input(cls.clone().requires_grad(true));
    let s = g.input(seg.clone().requires_grad(true));
    let mil = mil_loss(&mut g, z, &[label]).unwrap();
    let refs: Vec<Option<&[u8]>> = m.iter().map(|v| Some(v.as_slice())).collect();
    let sl = seg_loss(&mut g, s, &refs, DICE_EPS).unwrap();
    let cfg = LossConfig {
        lambda,
        ..LossConfig::default()
    };
    let t = total_loss(&mut g, mil, sl, &cfg).unwrap();
    g.backward(t).unwrap();
    let grad = |v: Var| g.grad(v).unwrap().to_vec();
    Objective {
        value: g.value(t).item(),
        cls_grad: grad(z),
        seg_grad: grad(s),
    }
}

#[test]
fn total_is_linear_in_lambda() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cls = random(&[1, 2], &mut rng);
    let seg = random(&[2, 3, 4, 4], &mut rng);
    let m = masks(2, 16, 3, &mut rng);
    let at0 = objective(&cls, &seg, 1, &m, 0.0);
    let at1 = objective(&cls, &seg, 1, &m, 1.0);
    for lambda in [0.01, 0.3, 2.5, 10.0] {
        let at = objective(&cls, &seg, 1, &m, lambda);
        let want = at0.value + lambda * (at1.value - at0.value);
        assert!((at.value - want).abs() < 1e-12);
        for (g, g1) in at.cls_grad.iter().zip(&at1.cls_grad) {
            assert!((g - lambda * g1).abs() < 1e-12);
        }
        assert_eq!(at.seg_grad, at0.seg_grad);
    }
}

#[test]
fn maskless_batches_give_zero_loss_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let seg = random(&[3, 4, 4, 4], &mut rng);
    let mut g = Graph::new();
    let s = g.input(seg.requires_grad(true));
    let l = seg_loss(&mut g, s, &[None, None, None], DICE_EPS).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    g.backward(l).unwrap();
    assert!(g.grad(s).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn unmasked_patches_get_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seg = random(&[3, 4, 3, 3], &mut rng);
    let m = masks(1, 9, 4, &mut rng);
    let mut g = Graph::new();
    let s = g.input(seg.requires_grad(true));
    let l = seg_loss(&mut g, s, &[None, Some(&m[0]), None], DICE_EPS).unwrap();
    g.backward(l).unwrap();
    let grad = g.grad(s).unwrap();
    let per = 4 * 9;
    assert!(grad[..per]
        .iter()
        .chain(&grad[2 * per..])
        .all(|&v| v == 0.0));
    assert!(grad[per..2 * per].iter().any(|&v| v != 0.0));
}

#[test]
fn perfect_prediction_has_zero_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, c, side) = (2, 5, 4);
    let m = masks(n, side * side, c as u8, &mut rng);
    // margins large enough that softmax is exactly one-hot
    let mut z = vec![-1000.0; n * c * side * side];
    for (s, mask) in m.iter().enumerate() {
        for (i, &l) in mask.iter().enumerate() {
            z[(s * c + l as usize) * side * side + i] = 1000.0;
        }
    }
    let mut g = Graph::new();
    let v = g.constant(Tensor::new(vec![n, c, side, side], z).unwrap());
    let refs: Vec<Option<&[u8]>> = m.iter().map(|v| Some(v.as_slice())).collect();
    let l = seg_loss(&mut g, v, &refs, DICE_EPS).unwrap();
    assert!(g.value(l).item().abs() < 1e-6, "{}", g.value(l).item());
    let cls = g.constant(Tensor::new(vec![1, 2], vec![-1000.0, 1000.0]).unwrap());
    let mil = mil_loss(&mut g, cls, &[1]).unwrap();
    assert!(g.value(mil).item().abs() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mil_loss_is_positive_cross_entropy(seed in any::<u64>(), label in 0usize..2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = random(&[1, 2], &mut rng);
        let mut g = Graph::new();
        let v = g.constant(z.clone());
        let out = mil_loss(&mut g, v, &[label]).unwrap();
        let l = g.value(out).item();
        let d = z.data();
        let lse = (d[0].exp() + d[1].exp()).ln();
        prop_assert!((l - (lse - d[label])).abs() < 1e-12);
        prop_assert!(l > 0.0);
    }

    #[test]
    fn seg_loss_is_bounded(seed in any::<u64>(), c in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seg = random(&[2, c, 3, 3], &mut rng);
        let m = masks(2, 9, c as u8, &mut rng);
        let refs: Vec<Option<&[u8]>> = m.iter().map(|v| Some(v.as_slice())).collect();
        let mut g = Graph::new();
        let v = g.constant(seg);
        let out = seg_loss(&mut g, v, &refs, DICE_EPS).unwrap();
        let l = g.value(out).item();
        // cross-entropy is non-negative, each Dice term lies in [0, 1]
        prop_assert!(l >= 0.0);
        let ce_bound = 12.0 + (c as f64).ln();
        prop_assert!(l <= ce_bound + c as f64);
    }
}
