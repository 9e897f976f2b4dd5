//! Finite-difference checks of every differentiable building block, each at
//! a number of random points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ArchConfig;
use crate::error::Result;
use crate::gcp::ConceptBank;
use crate::loss::{mil_loss, seg_loss, DICE_EPS};
use crate::milhead::{classify_bag, embed_patches, init_head};
use crate::tensorcore::{
    gradcheck, BnMode, GradcheckConfig, GradcheckReport, Graph, ParamStore, RunningStats, Tensor,
    Var,
};
use crate::trainer::mix_seed;

/// Outcome of one check over all its points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub name: String,
    pub points: usize,
    pub max_rel_error: f64,
    pub passed: bool,
    /// First probing failure, if any.
    pub failure: Option<String>,
}

type Check = fn(&mut ChaCha8Rng, GradcheckConfig) -> Result<GradcheckReport>;

const CHECKS: [(&str, Check); 12] = [
    ("conv2d/input", conv_input),
    ("conv2d/weight", conv_weight),
    ("conv2d/bias", conv_bias),
    ("batchnorm/input", bn_input_train),
    ("batchnorm/input-eval", bn_input_eval),
    ("batchnorm/gamma", bn_gamma),
    ("batchnorm/beta", bn_beta),
    ("gcp/instances", gcp_instances),
    ("gcp/concepts", gcp_concepts),
    ("mil_loss/logits", mil_logits),
    ("seg_loss/logits", seg_logits),
    ("head/features", head_features),
];

pub fn check_names() -> impl Iterator<Item = &'static str> {
    CHECKS.iter().map(|(n, _)| *n)
}

/// Runs every check at `points` random points drawn from `seed`.
pub fn gradient_suite(points: usize, seed: u64, cfg: GradcheckConfig) -> Result<Vec<SuiteEntry>> {
    CHECKS
        .iter()
        .enumerate()
        .map(|(i, (name, check))| {
            let mut entry = SuiteEntry {
                name: name.to_string(),
                points,
                max_rel_error: 0.0,
                passed: true,
                failure: None,
            };
            for p in 0..points {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, i as u64), p as u64));
                let r = check(&mut rng, cfg)?;
                entry.max_rel_error = entry.max_rel_error.max(r.max_rel_error);
                entry.passed &= r.passed();
                if entry.failure.is_none() {
                    entry.failure = r.failure;
                }
            }
            Ok(entry)
        })
        .collect()
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// `sum(y * r)` for a fixed random `r`, so every output coordinate matters.
fn project(g: &mut Graph, y: Var, r: &Tensor) -> Result<Var> {
    let r = g.constant(r.clone());
    let prod = g.mul(y, r)?;
    Ok(g.sum(prod))
}

fn conv_input(rng: &mut ChaCha8Rng, cfg: GradcheckConfig) -> Result<GradcheckReport> {
    let (x, w, b, r) = (
        uniform(&[2, 2, 5, 5], rng),
        uniform(&[3, 2, 3, 3], rng),
        uniform(&[3], rng),
        uniform(&[2, 3, 5, 5], rng),
    );
    gradcheck(
        |g, x| {
            let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
            let y = g.conv2d(x, w, b, 1)?;
            project(g, y, &r)
        },
        &x,
        cfg,
    )
}

fn conv_weight(rng: &mut ChaCha8Rng, cfg: GradcheckConfig) -> Result<GradcheckReport> {
    let (x, w, b, r) = (
        uniform(&[2, 2, 5, 5], rng),
        uniform(&[3, 2, 3, 3], rng),
        uniform(&[3], rng),
        uniform(&[2, 3, 5, 5], rng),
    );
    gradcheck(
        |g, w| {
            let (x, b) = (g.constant(x.clone()), g.constant(b.clone()));
            let y = g.conv2d(x, w, b, 1)?;
            project(g, y, &r)
        },
        &w,
        cfg,
    )
}

fn conv_bias(rng: &mut ChaCha8Rng, cfg: GradcheckConfig) -> Result<GradcheckReport> {
    let (x, w, b, r) = (
        uniform(&[2, 2, 4, 4], rng),
        uniform(&[3, 2, 1, 1], rng),
        uniform(&[3], rng),
        uniform(&[2, 3, 4, 4], rng),
    );
    gradcheck(
        |g, b| {
            let (x, w) = (g.constant(x.clone()), g.constant(w.clone()));
            let y = g.conv2d(x, w, b, 0)?;
            project(g, y, &r)
        },
        &b,
        cfg,
    )
}

struct BnPoint {
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    r: Tensor,
    stats: RunningStats,
}

fn bn_point(rng: &mut ChaCha8Rng) -> BnPoint {
    let mut stats = RunningStats::new(3);
    for c in 0..3 {
        stats.mean[c] = rng.gen_range(-0.5..0.5);
        stats.var[c] = rng.gen_range(0.5..2.0);
    }
    BnPoint {
        x: uniform(&[3, 3, 3, 3], rng),
        gamma: uniform(&[3], rng),
        beta: uniform(&[3], rng),
        r: uniform(&[3, 3, 3, 3], rng),
        stats,
    }
}

/// Projected BN output; argument `which` (0 = x, 1 = gamma, 2 = beta) is
/// the probe variable, the others are constants.
fn bn_eval(g: &mut Graph, v: Var, which: usize, p: &BnPoint, train: bool) -> Result<Var> {
    let mut pick = |i: usize, t: &Tensor| if i == which { v } else { g.constant(t.clone()) };
    let x = pick(0, &p.x);
    let gamma = pick(1, &p.gamma);
    let beta = pick(2, &p.beta);
    let mut stats = p.stats.clone();
    let mode = if train {
        BnMode::Train(&mut stats)
    } else {
        BnMode::Eval(&p.stats)
    };
    let y = g.batchnorm2d(x, gamma, beta, mode)?;
    project(g, y, &p.r)
}

fn bn_input_train(rng: &mut ChaCha8Rng, cfg: GradcheckConfig) -> Result<GradcheckReport> {
    let p = bn_point(rng);
    gradcheck(|g, v| bn_eval(g, v, 0, &p, true), &p.x, cfg)
}

fn bn_input_eval(rng: &mut ChaCha8Rng, cfg: GradcheckConfig) -> Result<GradcheckReport> {
    let p = bn_point(rng);
    gradcheck(|g, v| bn_eval(g, v, 0, &p, false), &p.x, cfg)
}

fn bn_gamma(rng: &mut ChaCha8Rng, cfg: GradcheckConfig) -> Result<GradcheckReport> {
    let p = bn_point(rng);
    gradcheck(|g, v| bn_eval(g, v, 1, &p, true), &p.gamma, cfg)
}

fn bn_beta(rng: &mut ChaCha8Rng, cfg: GradcheckConfig) -> Result<GradcheckReport> {
    let p = bn_point(rng);
    gradcheck(|g, v| bn_eval(g, v, 2, &p, true), &p.beta, cfg)
}

fn gcp_point(rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor, Tensor)> {
    let x = uniform(&[2, 5, 4], rng);
    let w = ConceptBank::random(3, 4, rng)?.into_tensor();
    Ok((x, w, uniform(&[2, 3], rng)))
}

fn gcp_instances(rng: &mut ChaCha8Rng, cfg: GradcheckConfig) -> Result<GradcheckReport> {
    let (x, w, r) = gcp_point(rng)?;
    gradcheck(
        |g, x| {
            let w = g.constant(w.clone());
            let y = g.gcp(x, w)?;
            project(g, y, &r)
        },
        &x,
        cfg,
    )
}

fn gcp_concepts(rng: &mut ChaCha8Rng, cfg: GradcheckConfig) -> Result<GradcheckReport> {
    let (x, w, r) = gcp_point(rng)?;
    gradcheck(
        |g, w| {
            let x = g.constant(x.clone());
            let y = g.gcp(x, w)?;
            project(g, y, &r)
        },
        &w,
        cfg,
    )
}

fn mil_logits(rng: &mut ChaCha8Rng, cfg: GradcheckConfig) -> Result<GradcheckReport> {
    let z = uniform(&[4, 2], rng);
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..2)).collect();
    gradcheck(|g, z| mil_loss(g, z, &labels), &z, cfg)
}

fn seg_logits(rng: &mut ChaCha8Rng, cfg: GradcheckConfig) -> Result<GradcheckReport> {
    let (classes, side) = (4, 3);
    let z = uniform(&[3, classes, side, side], rng);
    let masks: Vec<Vec<u8>> = (0..2)
        .map(|_| {
            (0..side * side)
                .map(|_| rng.gen_range(0..classes as u8))
                .collect()
        })
        .collect();
    // the middle sample carries no mask and must not contribute
    let refs = [Some(masks[0].as_slice()), None, Some(masks[1].as_slice())];
    gradcheck(|g, z| seg_loss(g, z, &refs, DICE_EPS), &z, cfg)
}

fn head_features(rng: &mut ChaCha8Rng, cfg: GradcheckConfig) -> Result<GradcheckReport> {
    let arch = ArchConfig {
        width: 2,
        deep_width: 4,
        embed_concepts: 3,
        image_concepts: 3,
        seg_classes: 6,
        severity_classes: 2,
    };
    let mut params = ParamStore::new();
    init_head(&arch, &mut params, rng)?;
    let feats = uniform(&[3, 4, 2, 2], rng);
    let label = rng.gen_range(0..2);
    gradcheck(
        |g, f| {
            let emb = embed_patches(g, &params, f)?;
            let z = classify_bag(g, &params, emb)?;
            mil_loss(g, z, &[label])
        },
        &feats,
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_a_few_points() {
        let rows = gradient_suite(3, 11, GradcheckConfig::default()).unwrap();
        assert_eq!(rows.len(), check_names().count());
        for r in &rows {
            assert!(
                r.passed,
                "{} failed: {:?} {:?}",
                r.name, r.max_rel_error, r.failure
            );
        }
    }
}
