//! Two-level multi-instance classification head.
//!
//! Embedding level: the spatial positions of one patch's encoder output are
//! the instances, pooled by GCP and passed through a linear map.
//! Image level: the patch embeddings of a bag are the instances, pooled by a
//! second GCP, a linear map, then the severity classifier. The maps carry
//! no nonlinearity: a ReLU there lets a large step silence every unit and
//! pin the logits to the classifier bias for good.

use rand::Rng;

use crate::backbone::ArchConfig;
use crate::error::{invalid, Error, Result};
use crate::gcp::ConceptBank;
use crate::tensorcore::{Graph, ParamStore, Tensor, Var};

pub const EMBED_CONCEPTS: &str = "emb.concepts";
pub const IMAGE_CONCEPTS: &str = "img.concepts";

/// Parameter-name prefixes of the head, as counted per block.
pub const HEAD_BLOCKS: [&str; 3] = ["emb", "img", "cls"];

pub fn init_head<R: Rng + ?Sized>(
    arch: &ArchConfig,
    store: &mut ParamStore,
    rng: &mut R,
) -> Result<()> {
    let (pe, pi) = (arch.embed_concepts, arch.image_concepts);
    store.insert(
        EMBED_CONCEPTS,
        ConceptBank::random(pe, arch.deep_width, rng)?.into_tensor(),
    )?;
    store.insert(
        "emb.proj.weight",
        Tensor::uniform(&[pe, pe], 1.0 / (pe as f64).sqrt(), rng),
    )?;
    store.insert("emb.proj.bias", Tensor::zeros(&[pe]))?;
    store.insert(
        IMAGE_CONCEPTS,
        ConceptBank::random(pi, pe, rng)?.into_tensor(),
    )?;
    store.insert(
        "img.proj.weight",
        Tensor::uniform(&[pi, pi], 1.0 / (pi as f64).sqrt(), rng),
    )?;
    store.insert("img.proj.bias", Tensor::zeros(&[pi]))?;
    let k = arch.severity_classes;
    store.insert(
        "cls.weight",
        Tensor::uniform(&[k, pi], 1.0 / (pi as f64).sqrt(), rng),
    )?;
    store.insert("cls.bias", Tensor::zeros(&[k]))
}

/// Row-renormalizes both concept banks.
pub fn regularize_concepts(store: &mut ParamStore) -> Result<()> {
    for name in [EMBED_CONCEPTS, IMAGE_CONCEPTS] {
        crate::gcp::renormalize_rows(store.get_mut(name)?);
    }
    Ok(())
}

fn linear(g: &mut Graph, params: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(
        &format!("{prefix}.weight"),
        params.get(&format!("{prefix}.weight"))?,
    );
    let b = g.param(
        &format!("{prefix}.bias"),
        params.get(&format!("{prefix}.bias"))?,
    );
    g.linear(x, w, b)
}

/// Patch embeddings `[n, P_e]` from encoder features `[n, D, h, w]`.
pub fn embed_patches(g: &mut Graph, params: &ParamStore, features: Var) -> Result<Var> {
    let s = g.shape(features).to_vec();
    let concepts = params.get(EMBED_CONCEPTS)?;
    if s.len() != 4 || s[1] != concepts.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "embed_patches",
            lhs: s,
            rhs: concepts.shape().to_vec(),
        });
    }
    let inst = g.to_instances(features)?;
    let w = g.param(EMBED_CONCEPTS, concepts);
    let pooled = g.gcp(inst, w)?;
    linear(g, params, "emb.proj", pooled)
}

/// Severity logits `[1, K]` for a bag of patch embeddings `[n, P_e]`.
pub fn classify_bag(g: &mut Graph, params: &ParamStore, embeddings: Var) -> Result<Var> {
    classify_bags(g, params, embeddings, 1)
}

/// Severity logits `[B, K]` for `bags` equal-sized bags stacked in
/// `[B * n, P_e]` embeddings.
pub fn classify_bags(
    g: &mut Graph,
    params: &ParamStore,
    embeddings: Var,
    bags: usize,
) -> Result<Var> {
    let s = g.shape(embeddings).to_vec();
    if s.len() != 2 {
        return invalid(format!(
            "classify_bag expects [n, P_e] embeddings, got {s:?}"
        ));
    }
    if s[0] == 0 || bags == 0 {
        return Err(Error::EmptyBag);
    }
    if s[0] % bags != 0 {
        return invalid(format!("{} embeddings do not split into {bags} bags", s[0]));
    }
    let stacked = g.reshape(embeddings, vec![bags, s[0] / bags, s[1]])?;
    let w = g.param(IMAGE_CONCEPTS, params.get(IMAGE_CONCEPTS)?);
    let pooled = g.gcp(stacked, w)?;
    let h = linear(g, params, "img.proj", pooled)?;
    let cw = g.param("cls.weight", params.get("cls.weight")?);
    let cb = g.param("cls.bias", params.get("cls.bias")?);
    g.linear(h, cw, cb)
}

/// Softmax probability of the last class (severe) for a `[1, K]` logit row.
pub fn severity_probability(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    (logits[logits.len() - 1] - max).exp() / z
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch() -> ArchConfig {
        ArchConfig {
            width: 2,
            deep_width: 6,
            embed_concepts: 5,
            image_concepts: 4,
            seg_classes: 6,
            severity_classes: 2,
        }
    }

    fn head() -> ParamStore {
        let mut store = ParamStore::new();
        init_head(&arch(), &mut store, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        store
    }

    fn embed(store: &ParamStore, feats: Tensor) -> Vec<f64> {
        let mut g = Graph::new();
        let f = g.constant(feats);
        let e = embed_patches(&mut g, store, f).unwrap();
        g.value(e).data().to_vec()
    }

    #[test]
    fn constant_map_equals_single_instance() {
        let store = head();
        let v = [0.4, -1.0, 2.0, 0.1, 0.0, 3.0];
        let grid: Vec<f64> = v.iter().flat_map(|&x| [x; 4]).collect();
        let a = embed(&store, Tensor::new(vec![1, 6, 2, 2], grid).unwrap());
        let b = embed(&store, Tensor::new(vec![1, 6, 1, 1], v.to_vec()).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn spatial_shuffle_leaves_embedding_unchanged() {
        let store = head();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let feats = Tensor::uniform(&[1, 6, 2, 2], 1.0, &mut rng);
        let mut shuffled = feats.clone();
        let perm = [3, 0, 2, 1];
        for c in 0..6 {
            for (dst, &src) in perm.iter().enumerate() {
                shuffled.data_mut()[c * 4 + dst] = feats.data()[c * 4 + src];
            }
        }
        assert_eq!(embed(&store, feats), embed(&store, shuffled));
    }

    #[test]
    fn classifier_has_two_logits_and_rejects_empty() {
        let store = head();
        let mut g = Graph::new();
        let e = g.constant(Tensor::ones(&[3, 5]));
        let l = classify_bag(&mut g, &store, e).unwrap();
        assert_eq!(g.shape(l), &[1, 2]);
        let p = severity_probability(g.value(l).data());
        assert!(p > 0.0 && p < 1.0);
        assert!(embed_patches(&mut g, &store, e).is_err());
    }

    #[test]
    fn probability_is_softmax() {
        assert_eq!(severity_probability(&[0.0, 0.0]), 0.5);
        let p = severity_probability(&[0.0, 2.0f64.ln()]);
        assert!((p - 2.0 / 3.0).abs() < 1e-15);
    }
}
