//! The multi-task network: shared encoder, lobe decoder and two-level MIL
//! severity head, with checkpoint I/O.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{
    decode, encode, init_backbone, ArchConfig, BnBuffers, BnState, DECODER_BLOCKS, ENCODER_BLOCKS,
};
use crate::error::{invalid, Error, Result};
use crate::milhead::{
    classify_bag, classify_bags, embed_patches, init_head, severity_probability, HEAD_BLOCKS,
};
use crate::tensorcore::{checkpoint, Graph, ParamStore, RunningStats, Tensor, Var};

const RUNNING_MEAN: &str = ".running_mean";
const RUNNING_VAR: &str = ".running_var";

/// Which branches a forward pass builds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Heads {
    pub classify: bool,
    pub segment: bool,
}

impl Heads {
    pub const BOTH: Heads = Heads {
        classify: true,
        segment: true,
    };
    pub const CLASSIFY: Heads = Heads {
        classify: true,
        segment: false,
    };
    pub const SEGMENT: Heads = Heads {
        classify: false,
        segment: true,
    };
}

#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    /// `[1, K]` severity logits.
    pub logits: Option<Var>,
    /// `[n, C, S, S]` lobe logits.
    pub seg_logits: Option<Var>,
}

/// Bag-level inference result.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub severity_prob: f64,
    /// Per-patch arg-max lobe labels, `S * S` each.
    pub seg_labels: Option<Vec<Vec<u8>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct M2Unet {
    pub arch: ArchConfig,
    pub params: ParamStore,
    pub bn: BnBuffers,
}

impl M2Unet {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut bn = BnBuffers::new();
        init_backbone(&arch, &mut params, &mut bn, &mut rng)?;
        init_head(&arch, &mut params, &mut rng)?;
        Ok(Self { arch, params, bn })
    }

    /// Trainable scalar count per block, in network order.
    pub fn block_param_counts(&self) -> Vec<(&'static str, usize)> {
        ENCODER_BLOCKS
            .iter()
            .chain(HEAD_BLOCKS.iter())
            .chain(DECODER_BLOCKS.iter())
            .map(|&b| (b, self.params.count_with_prefix(&format!("{b}."))))
            .collect()
    }

    /// Builds the requested branches on one bag `[n, 1, S, S]`. With `train`
    /// set, batch-norm uses batch statistics and updates the running ones.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        patches: Var,
        heads: Heads,
        train: bool,
    ) -> Result<Outputs> {
        self.forward_bags(g, patches, 1, heads, train)
    }

    /// As [`M2Unet::forward`] for `bags` equal-sized bags stacked along the
    /// first axis. Batch statistics span all of them; logits are `[bags, K]`.
    pub fn forward_bags(
        &mut self,
        g: &mut Graph,
        patches: Var,
        bags: usize,
        heads: Heads,
        train: bool,
    ) -> Result<Outputs> {
        let Self { params, bn, .. } = self;
        let mut state = if train {
            BnState::Train(bn)
        } else {
            BnState::Eval(bn)
        };
        let enc = encode(g, params, &mut state, patches)?;
        let logits = if heads.classify {
            let emb = embed_patches(g, params, enc.features)?;
            Some(classify_bags(g, params, emb, bags)?)
        } else {
            None
        };
        let seg_logits = if heads.segment {
            Some(decode(g, params, &mut state, &enc)?)
        } else {
            None
        };
        Ok(Outputs { logits, seg_logits })
    }

    /// Inference on one bag in eval mode.
    pub fn predict(&self, patches: &Tensor, segment: bool) -> Result<Prediction> {
        let mut g = Graph::new();
        let x = g.constant(patches.clone());
        let mut state = BnState::Eval(&self.bn);
        let enc = encode(&mut g, &self.params, &mut state, x)?;
        let emb = embed_patches(&mut g, &self.params, enc.features)?;
        let logits = classify_bag(&mut g, &self.params, emb)?;
        let severity_prob = severity_probability(g.value(logits).data());
        let seg_labels = if segment {
            let seg = decode(&mut g, &self.params, &mut state, &enc)?;
            Some(argmax_labels(g.value(seg)))
        } else {
            None
        };
        Ok(Prediction {
            severity_prob,
            seg_labels,
        })
    }

    /// Lobe labels for patches `[n, 1, S, S]`, decoder branch only.
    pub fn segment(&self, patches: &Tensor) -> Result<Vec<Vec<u8>>> {
        let mut g = Graph::new();
        let x = g.constant(patches.clone());
        let mut state = BnState::Eval(&self.bn);
        let enc = encode(&mut g, &self.params, &mut state, x)?;
        let seg = decode(&mut g, &self.params, &mut state, &enc)?;
        Ok(argmax_labels(g.value(seg)))
    }

    /// Parameters plus running statistics as one flat tensor map.
    pub fn to_tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out: BTreeMap<String, Tensor> = self
            .params
            .iter()
            .map(|(k, t)| (k.to_string(), t.clone().requires_grad(false)))
            .collect();
        for (name, stats) in &self.bn {
            let c = stats.channels();
            out.insert(
                format!("{name}{RUNNING_MEAN}"),
                Tensor::new(vec![c], stats.mean.clone())?,
            );
            out.insert(
                format!("{name}{RUNNING_VAR}"),
                Tensor::new(vec![c], stats.var.clone())?,
            );
        }
        Ok(out)
    }

    /// Rebuilds a model from a tensor map, inferring the architecture from
    /// the stored shapes.
    pub fn from_tensors(mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let dim = |name: &str, axis: usize| -> Result<usize> {
            tensors
                .get(name)
                .map(|t| t.shape()[axis])
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks `{name}`")))
        };
        let arch = ArchConfig {
            width: dim("enc1.conv1.weight", 0)?,
            deep_width: dim("enc5.conv2.weight", 0)?,
            embed_concepts: dim("emb.concepts", 0)?,
            image_concepts: dim("img.concepts", 0)?,
            seg_classes: dim("dec1.conv.weight", 0)?,
            severity_classes: dim("cls.weight", 0)?,
        };
        let mut model = Self::new(arch, 0)?;
        for (name, slot) in model.params.iter_mut() {
            let t = tensors
                .remove(name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint",
                    lhs: slot.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            *slot = t.requires_grad(true);
        }
        for (name, stats) in model.bn.iter_mut() {
            let mut take = |suffix: &str| -> Result<Vec<f64>> {
                let t = tensors
                    .remove(&format!("{name}{suffix}"))
                    .ok_or_else(|| Error::Invalid(format!("checkpoint lacks `{name}{suffix}`")))?;
                if t.numel() != stats.channels() {
                    return invalid(format!(
                        "running stats of `{name}` have {} channels",
                        t.numel()
                    ));
                }
                Ok(t.into_data())
            };
            *stats = RunningStats {
                mean: take(RUNNING_MEAN)?,
                var: take(RUNNING_VAR)?,
            };
        }
        if let Some(extra) = tensors.keys().next() {
            return invalid(format!("checkpoint has unexpected tensor `{extra}`"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_tensors()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(checkpoint::load(path)?)
    }
}

/// Per-sample arg-max over the channel axis of `[n, C, H, W]`; ties go to
/// the lower class.
pub fn argmax_labels(logits: &Tensor) -> Vec<Vec<u8>> {
    let s = logits.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let z = logits.data();
    (0..n)
        .map(|i| {
            (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for ch in 1..c {
                        if z[(i * c + ch) * plane + p] > z[(i * c + best) * plane + p] {
                            best = ch;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect()
}
