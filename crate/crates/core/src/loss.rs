//! Training objectives: bag-level cross-entropy, segmentation cross-entropy
//! plus per-class Dice, and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensorcore::{Backward, Graph, Tensor, Var};

pub const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the bag-classification term.
    pub lambda: f64,
    pub seg_classes: usize,
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            seg_classes: 6,
            dice_eps: DICE_EPS,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return invalid(format!(
                "lambda must be a finite non-negative number, got {}",
                self.lambda
            ));
        }
        if self.seg_classes < 2 {
            return invalid("segmentation needs at least two classes");
        }
        Ok(())
    }
}

fn log_softmax_row(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    out.iter_mut().zip(z).for_each(|(o, v)| *o = v - lse);
}

/// `1 - 2 sum(p*l) / (sum p + sum l + eps)`, with an empty prediction on an
/// empty mask counted as perfect (0).
pub fn dice_term(probs: &[f64], target: &[f64], eps: f64) -> f64 {
    let (p, l): (f64, f64) = (probs.iter().sum(), target.iter().sum());
    if p == 0.0 && l == 0.0 {
        return 0.0;
    }
    let inter: f64 = probs.iter().zip(target).map(|(a, b)| a * b).sum();
    1.0 - 2.0 * inter / (p + l + eps)
}

struct ScaledGrad(Vec<f64>);

impl Backward for ScaledGrad {
    fn backward(&self, _: &[&Tensor], needs: &[bool], g: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![needs[0].then(|| self.0.iter().map(|v| v * g[0]).collect())]
    }
}

/// Mean negative log-softmax probability of the true class over a batch of
/// logits `[B, K]` (or a single `[K]` row).
pub fn mil_loss(graph: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = graph.shape(logits).to_vec();
    let (rows, k) = match shape.as_slice() {
        [k] => (1, *k),
        [b, k] => (*b, *k),
        _ => return invalid(format!("mil_loss expects [B, K] logits, got {shape:?}")),
    };
    if labels.len() != rows {
        return invalid(format!("{} labels for {rows} logit rows", labels.len()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return invalid(format!("label {bad} out of range for {k} classes"));
    }
    let z = graph.value(logits).data();
    if z.iter().any(|v| !v.is_finite()) {
        return invalid("mil_loss received non-finite logits");
    }
    let mut logp = vec![0.0; k];
    let mut total = 0.0;
    let mut grad = vec![0.0; z.len()];
    for (r, &y) in labels.iter().enumerate() {
        let row = &z[r * k..(r + 1) * k];
        log_softmax_row(row, &mut logp);
        total -= logp[y];
        for c in 0..k {
            let target = if c == y { 1.0 } else { 0.0 };
            grad[r * k + c] = (logp[c].exp() - target) / rows as f64;
        }
    }
    let value = Tensor::scalar(total / rows as f64);
    Ok(graph.custom(&[logits], value, Box::new(ScaledGrad(grad))))
}

/// Segmentation loss over logits `[N, C, H, W]`. Each patch contributes
/// pixel-mean cross-entropy plus the sum over classes of its Dice term; the
/// result is averaged over patches that carry a mask. Patches without a mask
/// contribute nothing, and with no masks at all the loss is exactly zero.
pub fn seg_loss(graph: &mut Graph, logits: Var, masks: &[Option<&[u8]>], eps: f64) -> Result<Var> {
    let shape = graph.shape(logits).to_vec();
    if shape.len() != 4 {
        return invalid(format!("seg_loss expects [N, C, H, W], got {shape:?}"));
    }
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    if masks.len() != n {
        return invalid(format!("{} masks for {n} patches", masks.len()));
    }
    for m in masks.iter().flatten() {
        if m.len() != plane {
            return Err(Error::ShapeMismatch {
                op: "seg_loss mask",
                lhs: shape.clone(),
                rhs: vec![m.len()],
            });
        }
        if let Some(bad) = m.iter().find(|&&l| l as usize >= c) {
            return invalid(format!("mask label {bad} out of range for {c} classes"));
        }
    }
    let with_mask = masks.iter().filter(|m| m.is_some()).count();
    let z = graph.value(logits).data();
    let mut grad = vec![0.0; z.len()];
    if with_mask == 0 {
        return Ok(graph.custom(&[logits], Tensor::scalar(0.0), Box::new(ScaledGrad(grad))));
    }
    let scale = 1.0 / with_mask as f64;
    let mut total = 0.0;
    let mut logp = vec![0.0; c];
    let mut probs = vec![0.0; c * plane];
    let mut onehot = vec![0.0; c * plane];
    let mut dp = vec![0.0; c * plane];
    let mut zpix = vec![0.0; c];
    for (s, mask) in masks.iter().enumerate() {
        let Some(mask) = mask else { continue };
        let base = s * c * plane;
        onehot.fill(0.0);
        let mut ce = 0.0;
        for i in 0..plane {
            for ch in 0..c {
                zpix[ch] = z[base + ch * plane + i];
            }
            log_softmax_row(&zpix, &mut logp);
            let y = mask[i] as usize;
            ce -= logp[y];
            onehot[y * plane + i] = 1.0;
            for ch in 0..c {
                probs[ch * plane + i] = logp[ch].exp();
            }
        }
        total += ce / plane as f64;
        // d(dice_c)/d(p_ci), then chain through the per-pixel softmax
        for ch in 0..c {
            let pc = &probs[ch * plane..(ch + 1) * plane];
            let lc = &onehot[ch * plane..(ch + 1) * plane];
            total += dice_term(pc, lc, eps);
            let (psum, lsum): (f64, f64) = (pc.iter().sum(), lc.iter().sum());
            let dst = &mut dp[ch * plane..(ch + 1) * plane];
            if psum == 0.0 && lsum == 0.0 {
                dst.fill(0.0);
                continue;
            }
            let inter: f64 = pc.iter().zip(lc).map(|(a, b)| a * b).sum();
            let den = psum + lsum + eps;
            for i in 0..plane {
                dst[i] = -2.0 * (lc[i] * den - inter) / (den * den);
            }
        }
        for i in 0..plane {
            let dot: f64 = (0..c)
                .map(|ch| probs[ch * plane + i] * dp[ch * plane + i])
                .sum();
            for ch in 0..c {
                let k = ch * plane + i;
                let dice = probs[k] * (dp[k] - dot);
                let ce = (probs[k] - onehot[k]) / plane as f64;
                grad[base + k] = scale * (dice + ce);
            }
        }
    }
    Ok(graph.custom(
        &[logits],
        Tensor::scalar(total * scale),
        Box::new(ScaledGrad(grad)),
    ))
}

/// `lambda * mil + seg`.
pub fn total_loss(graph: &mut Graph, mil: Var, seg: Var, cfg: &LossConfig) -> Result<Var> {
    graph.axpby(mil, cfg.lambda, seg, 1.0)
}

pub fn total_loss_value(mil: f64, seg: f64, lambda: f64) -> f64 {
    lambda * mil + seg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mil_value(logits: &[f64], y: usize) -> f64 {
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(vec![logits.len()], logits.to_vec()).unwrap());
        let l = mil_loss(&mut g, z, &[y]).unwrap();
        g.value(l).item()
    }

    #[test]
    fn mil_loss_examples() {
        assert!((mil_value(&[0.0, 0.0], 0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((mil_value(&[0.0, 0.0], 1) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(mil_value(&[40.0, -40.0], 0) < 1e-30);
        let e = 1f64.exp();
        let expect = -(e / (e + 1.0 / e)).ln();
        assert!((mil_value(&[1.0, -1.0], 0) - expect).abs() < 1e-12);
        assert!((expect - 0.1269).abs() < 1e-4);
    }

    #[test]
    fn mil_loss_rejects_bad_label() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2]));
        assert!(mil_loss(&mut g, z, &[2]).is_err());
    }

    #[test]
    fn dice_term_toy() {
        let d = dice_term(&[0.9, 0.9, 0.1, 0.1], &[1.0, 1.0, 0.0, 0.0], DICE_EPS);
        assert!((d - 0.1).abs() < 1e-6);
        assert_eq!(dice_term(&[0.0; 4], &[0.0; 4], DICE_EPS), 0.0);
        assert!(
            (dice_term(&[0.0, 0.0, 1.0, 1.0], &[1.0, 1.0, 0.0, 0.0], DICE_EPS) - 1.0).abs() < 1e-12
        );
    }

    #[test]
    fn two_class_toy_matches_hand_evaluation() {
        // probs for class 1: [.9,.9,.1,.1]; mask [1,1,0,0]
        let a = (0.9f64 / 0.1).ln();
        let logits = vec![0.0, 0.0, a, a, a, a, 0.0, 0.0];
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(vec![1, 2, 2, 2], logits).unwrap());
        let mask = [1u8, 1, 0, 0];
        let l = seg_loss(&mut g, z, &[Some(&mask)], DICE_EPS).unwrap();
        let ce = -(0.9f64).ln();
        let dice = 2.0 * (1.0 - 2.0 * 1.8 / (4.0 + DICE_EPS));
        assert!((g.value(l).item() - (ce + dice)).abs() < 1e-9);
    }

    #[test]
    fn no_masks_is_exact_zero() {
        let mut g = Graph::new();
        let z = g.input(Tensor::ones(&[2, 3, 2, 2]).requires_grad(true));
        let l = seg_loss(&mut g, z, &[None, None], DICE_EPS).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        g.backward(l).unwrap();
        assert!(g.grad(z).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn total_loss_arithmetic() {
        assert!((total_loss_value(0.5, 0.3, 0.01) - 0.305).abs() < 1e-15);
        assert_eq!(total_loss_value(0.5, 0.3, 0.0), 0.3);
    }
}
