//! Shared patch encoder and lobe-segmentation decoder (U-Net style).
//!
//! Encoder: four blocks of two 3x3 conv+BN+ReLU layers at `width` channels,
//! each followed by 2x2 max pooling, then a fifth block lifting to
//! `deep_width` channels. Decoder: four up blocks (upsample, conv+BN+ReLU,
//! concat with the same-level encoder output, two conv+BN+ReLU), then a 1x1
//! conv to the segmentation classes.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensorcore::{BnMode, Graph, ParamStore, RunningStats, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Channels of encoding blocks 1-4 and of the decoder.
    pub width: usize,
    /// Channels of encoding block 5.
    pub deep_width: usize,
    pub embed_concepts: usize,
    pub image_concepts: usize,
    pub seg_classes: usize,
    pub severity_classes: usize,
}

impl ArchConfig {
    /// The full-size network (64/512 channels, 256/128 concepts). Its
    /// decoder emits 7 classes, which is what the published "0.5K" count of
    /// the final 1x1 conv corresponds to.
    pub fn full() -> Self {
        Self {
            width: 64,
            deep_width: 512,
            embed_concepts: 256,
            image_concepts: 128,
            seg_classes: 7,
            severity_classes: 2,
        }
    }

    /// Narrow network for single-core CPU experiments: background plus five
    /// lobes.
    pub fn desk() -> Self {
        Self {
            width: 8,
            deep_width: 32,
            embed_concepts: 32,
            image_concepts: 16,
            seg_classes: 6,
            severity_classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.width,
            self.deep_width,
            self.embed_concepts,
            self.image_concepts,
        ];
        if dims.contains(&0) {
            return invalid(format!("architecture extents must be positive: {self:?}"));
        }
        if self.seg_classes < 2 || self.severity_classes < 2 {
            return invalid("need at least two segmentation and severity classes");
        }
        Ok(())
    }
}

/// Batch-norm running statistics keyed by layer name.
pub type BnBuffers = BTreeMap<String, RunningStats>;

pub enum BnState<'a> {
    Train(&'a mut BnBuffers),
    Eval(&'a BnBuffers),
}

impl BnState<'_> {
    fn mode(&mut self, name: &str) -> Result<BnMode<'_>> {
        let missing = || Error::Invalid(format!("no running stats for `{name}`"));
        match self {
            BnState::Train(b) => Ok(BnMode::Train(b.get_mut(name).ok_or_else(missing)?)),
            BnState::Eval(b) => Ok(BnMode::Eval(b.get(name).ok_or_else(missing)?)),
        }
    }
}

/// Final encoder features `[n, deep, S/16, S/16]` and the four same-level
/// outputs captured before each pooling step, finest first.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub features: Var,
    pub skips: Vec<Var>,
}

pub const ENCODER_BLOCKS: [&str; 5] = ["enc1", "enc2", "enc3", "enc4", "enc5"];
pub const DECODER_BLOCKS: [&str; 5] = ["dec5", "dec4", "dec3", "dec2", "dec1"];

fn add_conv<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut R,
) -> Result<()> {
    let fan_in = (cin * k * k) as f64;
    let bound = 1.0 / fan_in.sqrt();
    store.insert(
        format!("{name}.weight"),
        Tensor::uniform(&[cout, cin, k, k], bound, rng),
    )?;
    store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]))
}

fn add_bn(store: &mut ParamStore, bufs: &mut BnBuffers, name: &str, c: usize) -> Result<()> {
    store.insert(format!("{name}.gamma"), Tensor::ones(&[c]))?;
    store.insert(format!("{name}.beta"), Tensor::zeros(&[c]))?;
    bufs.insert(name.to_string(), RunningStats::new(c));
    Ok(())
}

/// Conv weights start uniform in `±1/sqrt(fan_in)`; BN starts at gamma = 1,
/// beta = 0.
pub fn init_backbone<R: Rng + ?Sized>(
    arch: &ArchConfig,
    store: &mut ParamStore,
    bufs: &mut BnBuffers,
    rng: &mut R,
) -> Result<()> {
    let (w, deep) = (arch.width, arch.deep_width);
    for (i, block) in ENCODER_BLOCKS.iter().enumerate() {
        let (cin1, cout1, cout2) = match i {
            0 => (1, w, w),
            4 => (w, deep, deep),
            _ => (w, w, w),
        };
        add_conv(store, &format!("{block}.conv1"), cin1, cout1, 3, rng)?;
        add_bn(store, bufs, &format!("{block}.bn1"), cout1)?;
        add_conv(store, &format!("{block}.conv2"), cout1, cout2, 3, rng)?;
        add_bn(store, bufs, &format!("{block}.bn2"), cout2)?;
    }
    for (i, block) in DECODER_BLOCKS[..4].iter().enumerate() {
        let cin = if i == 0 { deep } else { w };
        add_conv(store, &format!("{block}.up"), cin, w, 3, rng)?;
        add_bn(store, bufs, &format!("{block}.up_bn"), w)?;
        add_conv(store, &format!("{block}.conv1"), 2 * w, w, 3, rng)?;
        add_bn(store, bufs, &format!("{block}.bn1"), w)?;
        add_conv(store, &format!("{block}.conv2"), w, w, 3, rng)?;
        add_bn(store, bufs, &format!("{block}.bn2"), w)?;
    }
    add_conv(store, "dec1.conv", w, arch.seg_classes, 1, rng)
}

fn conv_bn_relu(
    g: &mut Graph,
    params: &ParamStore,
    bn: &mut BnState<'_>,
    conv: &str,
    norm: &str,
    x: Var,
) -> Result<Var> {
    let w = g.param(
        &format!("{conv}.weight"),
        params.get(&format!("{conv}.weight"))?,
    );
    let b = g.param(
        &format!("{conv}.bias"),
        params.get(&format!("{conv}.bias"))?,
    );
    let y = g.conv2d(x, w, b, 1)?;
    let gamma = g.param(
        &format!("{norm}.gamma"),
        params.get(&format!("{norm}.gamma"))?,
    );
    let beta = g.param(
        &format!("{norm}.beta"),
        params.get(&format!("{norm}.beta"))?,
    );
    let y = g.batchnorm2d(y, gamma, beta, bn.mode(norm)?)?;
    Ok(g.relu(y))
}

/// Runs the encoder on patches `[n, 1, S, S]` with `S` divisible by 16.
pub fn encode(
    g: &mut Graph,
    params: &ParamStore,
    bn: &mut BnState<'_>,
    patches: Var,
) -> Result<EncoderOutput> {
    let s = g.shape(patches).to_vec();
    if s.len() != 4 || s[1] != 1 {
        return invalid(format!("encoder expects [n, 1, S, S] patches, got {s:?}"));
    }
    if s[2] % 16 != 0 || s[3] % 16 != 0 {
        return invalid(format!(
            "patch extents must be divisible by 16, got {}x{}",
            s[2], s[3]
        ));
    }
    let mut x = patches;
    let mut skips = Vec::with_capacity(4);
    for (i, block) in ENCODER_BLOCKS.iter().enumerate() {
        x = conv_bn_relu(
            g,
            params,
            bn,
            &format!("{block}.conv1"),
            &format!("{block}.bn1"),
            x,
        )?;
        x = conv_bn_relu(
            g,
            params,
            bn,
            &format!("{block}.conv2"),
            &format!("{block}.bn2"),
            x,
        )?;
        if i < 4 {
            skips.push(x);
            x = g.maxpool2(x)?;
        }
    }
    Ok(EncoderOutput { features: x, skips })
}

/// Decodes encoder output into per-pixel class logits `[n, C, S, S]`.
/// Reads only `dec*` parameters.
pub fn decode(
    g: &mut Graph,
    params: &ParamStore,
    bn: &mut BnState<'_>,
    enc: &EncoderOutput,
) -> Result<Var> {
    if enc.skips.len() != 4 {
        return invalid(format!(
            "decoder needs 4 skip tensors, got {}",
            enc.skips.len()
        ));
    }
    let mut x = enc.features;
    for (i, block) in DECODER_BLOCKS[..4].iter().enumerate() {
        let skip = enc.skips[3 - i];
        let up = g.upsample2(x)?;
        let up = conv_bn_relu(
            g,
            params,
            bn,
            &format!("{block}.up"),
            &format!("{block}.up_bn"),
            up,
        )?;
        let cat = g.concat_channels(up, skip)?;
        x = conv_bn_relu(
            g,
            params,
            bn,
            &format!("{block}.conv1"),
            &format!("{block}.bn1"),
            cat,
        )?;
        x = conv_bn_relu(
            g,
            params,
            bn,
            &format!("{block}.conv2"),
            &format!("{block}.bn2"),
            x,
        )?;
    }
    let w = g.param("dec1.conv.weight", params.get("dec1.conv.weight")?);
    let b = g.param("dec1.conv.bias", params.get("dec1.conv.bias")?);
    g.conv2d(x, w, b, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ArchConfig {
        ArchConfig {
            width: 3,
            deep_width: 5,
            embed_concepts: 4,
            image_concepts: 3,
            seg_classes: 6,
            severity_classes: 2,
        }
    }

    fn build(arch: &ArchConfig) -> (ParamStore, BnBuffers) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mut bufs = BnBuffers::new();
        init_backbone(arch, &mut store, &mut bufs, &mut rng).unwrap();
        (store, bufs)
    }

    #[test]
    fn shapes_follow_pooling_structure() {
        let arch = tiny();
        let (store, mut bufs) = build(&arch);
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[2, 1, 32, 32], 0.5));
        let mut bn = BnState::Train(&mut bufs);
        let enc = encode(&mut g, &store, &mut bn, x).unwrap();
        assert_eq!(g.shape(enc.features), &[2, 5, 2, 2]);
        let extents: Vec<_> = enc.skips.iter().map(|&s| g.shape(s).to_vec()).collect();
        assert_eq!(
            extents,
            vec![
                vec![2, 3, 32, 32],
                vec![2, 3, 16, 16],
                vec![2, 3, 8, 8],
                vec![2, 3, 4, 4]
            ]
        );
        let logits = decode(&mut g, &store, &mut bn, &enc).unwrap();
        assert_eq!(g.shape(logits), &[2, 6, 32, 32]);
    }

    #[test]
    fn minimal_patch_reaches_one_pixel() {
        let arch = tiny();
        let (store, mut bufs) = build(&arch);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 16, 16]));
        let enc = encode(&mut g, &store, &mut BnState::Train(&mut bufs), x).unwrap();
        assert_eq!(g.shape(enc.features), &[1, 5, 1, 1]);
    }

    #[test]
    fn rejects_bad_patches_and_missing_skips() {
        let arch = tiny();
        let (store, mut bufs) = build(&arch);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 24, 24]));
        assert!(encode(&mut g, &store, &mut BnState::Train(&mut bufs), x).is_err());
        let x = g.constant(Tensor::zeros(&[1, 2, 16, 16]));
        assert!(encode(&mut g, &store, &mut BnState::Train(&mut bufs), x).is_err());
        let x = g.constant(Tensor::zeros(&[1, 1, 16, 16]));
        let mut enc = encode(&mut g, &store, &mut BnState::Train(&mut bufs), x).unwrap();
        enc.skips.pop();
        assert!(decode(&mut g, &store, &mut BnState::Train(&mut bufs), &enc).is_err());
    }

    #[test]
    fn decode_reads_only_decoder_parameters() {
        let arch = tiny();
        let (store, mut bufs) = build(&arch);
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[1, 1, 16, 16], 1.0));
        let mut bn = BnState::Train(&mut bufs);
        let enc = encode(&mut g, &store, &mut bn, x).unwrap();
        let before: Vec<String> = store
            .names()
            .filter(|n| g.param_var(n).is_some())
            .map(String::from)
            .collect();
        decode(&mut g, &store, &mut bn, &enc).unwrap();
        let added: Vec<String> = store
            .names()
            .filter(|n| g.param_var(n).is_some() && !before.iter().any(|b| b == n))
            .map(String::from)
            .collect();
        assert!(!added.is_empty());
        assert!(added.iter().all(|n| n.starts_with("dec")));
    }
}
