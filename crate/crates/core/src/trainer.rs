//! SGD with momentum and poly decay, patient-level five-fold splitting, the
//! per-fold training loop and evaluation.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ArchConfig;
use crate::error::{invalid, Error, Result};
use crate::evalmetrics::{
    fold_report, metrics_from_counts, overlap_counts, FoldReport, Overlap, OverlapCounts,
};
use crate::loss::{mil_loss, seg_loss, total_loss, LossConfig};
use crate::milhead::{EMBED_CONCEPTS, IMAGE_CONCEPTS};
use crate::model::{Heads, M2Unet};
use crate::phantom::{read_case, read_manifest, Manifest, Severity};
use crate::preprocess::{
    balance_by_duplication, build_bag, prepare_case, PreparedCase, SampleEntry, MIN_CROP_AXIAL,
};
use crate::tensorcore::{Graph, ParamStore, Tensor};

pub const FOLDS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub power: f64,
    pub bags_per_step: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 100,
            power: 0.75,
            bags_per_step: 1,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return invalid(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return invalid("weight decay must be non-negative");
        }
        if self.epochs == 0 || self.bags_per_step == 0 {
            return invalid("epochs and bags per step must be at least 1");
        }
        Ok(())
    }
}

/// `lr0 * (1 - epoch / E)^power`, clamped to zero past the last epoch.
pub fn poly_lr(epoch: usize, cfg: &OptimConfig) -> f64 {
    let t = (epoch as f64 / cfg.epochs as f64).min(1.0);
    cfg.lr0 * (1.0 - t).powf(cfg.power)
}

/// Momentum buffers keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState {
    velocity: std::collections::BTreeMap<String, Vec<f64>>,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// `v = momentum * v + grad + wd * p; p -= lr * v`, then unit-normalizes the
/// concept banks if present.
pub fn sgd_step(
    params: &mut ParamStore,
    state: &mut SgdState,
    lr: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
        return Err(Error::MissingGrad(name.to_string()));
    }
    for (name, t) in params.iter_mut() {
        let grad = t.grad().expect("checked above").to_vec();
        let v = state
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        for ((p, vi), g) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(&grad) {
            *vi = cfg.momentum * *vi + g + cfg.weight_decay * *p;
            *p -= lr * *vi;
        }
    }
    for bank in [EMBED_CONCEPTS, IMAGE_CONCEPTS] {
        if params.contains(bank) {
            crate::gcp::renormalize_rows(params.get_mut(bank)?);
        }
    }
    Ok(())
}

/// splitmix64 finalizer over `a + golden * (b + 1)`; derives independent
/// stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(b.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Five disjoint patient subsets. Fold `i` tests on subset `i`, validates on
/// the first half of subset `i + 1` and trains on the rest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub subsets: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

pub fn make_folds(manifest: &Manifest, seed: u64) -> Result<FoldPlan> {
    let mut patients = manifest.patients();
    if patients.len() < FOLDS {
        return invalid(format!(
            "{} patients cannot fill {FOLDS} folds",
            patients.len()
        ));
    }
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut subsets = vec![Vec::new(); FOLDS];
    for (i, p) in patients.into_iter().enumerate() {
        subsets[i % FOLDS].push(p);
    }
    for s in &mut subsets {
        s.sort();
    }
    Ok(FoldPlan { subsets })
}

impl FoldPlan {
    pub fn split(&self, fold: usize) -> Result<Split> {
        let k = self.subsets.len();
        if fold >= k {
            return invalid(format!("fold {fold} out of range for {k} folds"));
        }
        let next = &self.subsets[(fold + 1) % k];
        let val = next[..next.len() / 2].to_vec();
        let mut train: Vec<String> = (0..k)
            .filter(|&i| i != fold && i != (fold + 1) % k)
            .flat_map(|i| self.subsets[i].iter().cloned())
            .collect();
        train.extend(next[next.len() / 2..].iter().cloned());
        train.sort();
        Ok(Split {
            train,
            val,
            test: self.subsets[fold].clone(),
        })
    }
}

/// Every case of a dataset, cropped and windowed, in manifest order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub cases: Vec<PreparedCase>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = read_manifest(root)?;
        let cases = manifest
            .cases
            .iter()
            .map(|rec| {
                let c = read_case(root, rec)?;
                prepare_case(
                    &rec.id,
                    &c.volume,
                    c.mask.as_ref(),
                    rec.severity,
                    MIN_CROP_AXIAL,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, cases })
    }

    /// Case indices whose patient is in `patients`.
    pub fn indices_of(&self, patients: &[String]) -> Vec<usize> {
        let set: BTreeSet<&str> = patients.iter().map(String::as_str).collect();
        self.manifest
            .cases
            .iter()
            .enumerate()
            .filter(|(_, c)| set.contains(c.patient_id.as_str()))
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskMode {
    /// Classification and segmentation jointly.
    MultiTask,
    /// Decoder only, trained on mask-bearing cases.
    SegOnly,
    /// Severity head only.
    ClsOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub bag_size: usize,
    pub patch_size: usize,
    pub eval_draws: usize,
    pub mode: TaskMode,
}

impl TrainConfig {
    /// Single-core scale: narrow network, 32-patch bags of 32 px, 20 epochs.
    pub fn desk() -> Self {
        let arch = ArchConfig::desk();
        Self {
            loss: LossConfig {
                seg_classes: arch.seg_classes,
                ..LossConfig::default()
            },
            arch,
            optim: OptimConfig {
                epochs: 20,
                ..OptimConfig::default()
            },
            bag_size: 32,
            patch_size: 32,
            eval_draws: 1,
            mode: TaskMode::MultiTask,
        }
    }

    /// Full-size network with 200-patch bags for 100 epochs.
    pub fn paper() -> Self {
        let arch = ArchConfig::full();
        Self {
            loss: LossConfig {
                seg_classes: arch.seg_classes,
                ..LossConfig::default()
            },
            arch,
            optim: OptimConfig::default(),
            bag_size: 200,
            patch_size: 128,
            eval_draws: 1,
            mode: TaskMode::MultiTask,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.optim.validate()?;
        self.loss.validate()?;
        if self.loss.seg_classes != self.arch.seg_classes {
            return invalid("loss and decoder disagree on the number of segmentation classes");
        }
        if self.bag_size == 0 || self.eval_draws == 0 {
            return invalid("bag size and eval draws must be at least 1");
        }
        if self.patch_size == 0 || self.patch_size % 16 != 0 {
            return invalid(format!(
                "patch size must be a positive multiple of 16, got {}",
                self.patch_size
            ));
        }
        Ok(())
    }

    fn heads(&self) -> Heads {
        match self.mode {
            TaskMode::MultiTask => Heads::BOTH,
            TaskMode::SegOnly => Heads::SEGMENT,
            TaskMode::ClsOnly => Heads::CLASSIFY,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub fold: usize,
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub mil_loss: Option<f64>,
    pub seg_loss: Option<f64>,
    pub total_loss: f64,
    pub val_accuracy: Option<f64>,
    pub val_dsc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: M2Unet,
    pub history: Vec<EpochLog>,
}

struct StepLosses {
    mil: Option<f64>,
    seg: Option<f64>,
    total: f64,
}

/// Forward and backward for one step's bags in a single batch; gradients
/// of the step-mean loss are added to the store.
fn step_gradients(
    model: &mut M2Unet,
    data: &Dataset,
    chunk: &[SampleEntry],
    cfg: &TrainConfig,
) -> Result<StepLosses> {
    let bags = chunk
        .iter()
        .map(|e| {
            let mut rng = ChaCha8Rng::seed_from_u64(e.seed);
            build_bag(
                &data.cases[e.case_index],
                cfg.bag_size,
                cfg.patch_size,
                &mut rng,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut heads = cfg.heads();
    heads.segment &= bags.iter().any(|b| b.masks.is_some());
    let mut shape = bags[0].patches.shape().to_vec();
    shape[0] *= bags.len();
    let stacked: Vec<f64> = bags
        .iter()
        .flat_map(|b| b.patches.data().iter().copied())
        .collect();
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(shape, stacked)?);
    let out = model.forward_bags(&mut g, x, bags.len(), heads, true)?;
    let mil = match out.logits {
        Some(z) => {
            let labels: Vec<usize> = bags.iter().map(|b| b.severity.index()).collect();
            Some(mil_loss(&mut g, z, &labels)?)
        }
        None => None,
    };
    let seg = match out.seg_logits {
        Some(z) => {
            let masks: Vec<Option<&[u8]>> = bags.iter().flat_map(|b| b.mask_refs()).collect();
            Some(seg_loss(&mut g, z, &masks, cfg.loss.dice_eps)?)
        }
        None => None,
    };
    let total = match (mil, seg) {
        (Some(m), Some(s)) => total_loss(&mut g, m, s, &cfg.loss)?,
        // lambda only balances the two tasks
        (Some(m), None) if cfg.mode == TaskMode::ClsOnly => m,
        (Some(m), None) => {
            let zero = g.constant(Tensor::scalar(0.0));
            total_loss(&mut g, m, zero, &cfg.loss)?
        }
        (None, Some(s)) => s,
        (None, None) => return invalid("step produced no loss"),
    };
    g.backward(total)?;
    g.accumulate_into(&mut model.params)?;
    Ok(StepLosses {
        mil: mil.map(|v| g.value(v).item()),
        seg: seg.map(|v| g.value(v).item()),
        total: g.value(total).item(),
    })
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Trains a fresh model on `train` case indices, validating on `val` after
/// every epoch. Each epoch log is written as one JSON line to `log`.
pub fn train(
    data: &Dataset,
    train: &[usize],
    val: &[usize],
    fold: usize,
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let seed = mix_seed(cfg.optim.seed, fold as u64);
    let mut model = M2Unet::new(cfg.arch.clone(), seed)?;
    let mut state = SgdState::new();
    let pool: Vec<usize> = match cfg.mode {
        TaskMode::MultiTask | TaskMode::ClsOnly => train.to_vec(),
        TaskMode::SegOnly => train
            .iter()
            .copied()
            .filter(|&i| data.cases[i].mask.is_some())
            .collect(),
    };
    if pool.is_empty() {
        return invalid("training split has no usable cases");
    }
    let mut history = Vec::with_capacity(cfg.optim.epochs);
    for epoch in 0..cfg.optim.epochs {
        let epoch_seed = mix_seed(seed, epoch as u64 + 1);
        let entries: Vec<SampleEntry> = pool
            .iter()
            .map(|&i| SampleEntry {
                case_index: i,
                case_id: data.cases[i].id.clone(),
                severity: data.cases[i].severity,
                seed: mix_seed(epoch_seed, i as u64),
            })
            .collect();
        let mut entries = balance_by_duplication(entries, epoch_seed);
        entries.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let lr = poly_lr(epoch, &cfg.optim);
        let (mut mils, mut segs, mut totals) = (Vec::new(), Vec::new(), Vec::new());
        let mut steps = 0;
        for chunk in entries.chunks(cfg.optim.bags_per_step) {
            model.params.zero_grad();
            let l = step_gradients(&mut model, data, chunk, cfg)?;
            if !l.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: steps,
                    value: l.total,
                });
            }
            mils.extend(l.mil);
            segs.extend(l.seg);
            totals.push(l.total);
            fill_missing_gradients(&mut model.params);
            sgd_step(&mut model.params, &mut state, lr, &cfg.optim)?;
            steps += 1;
        }
        let report = evaluate(&model, data, val, fold, cfg, false, epoch_seed)?;
        let entry = EpochLog {
            fold,
            epoch: epoch + 1,
            lr,
            steps,
            mil_loss: mean(&mils),
            seg_loss: mean(&segs),
            total_loss: mean(&totals).unwrap_or(0.0),
            val_accuracy: report.classification.accuracy,
            val_dsc: report.segmentation.map(|s| s.dsc),
        };
        serde_json::to_writer(&mut *log, &entry)?;
        writeln!(log)?;
        log::info!(
            "fold {fold} epoch {} lr {lr:.5} loss {:.4}",
            epoch + 1,
            entry.total_loss
        );
        history.push(entry);
    }
    Ok(TrainOutcome { model, history })
}

/// Averages accumulated gradients over the step's bags; parameters that no
/// bag touched get an explicit zero gradient.
/// Parameters the step did not reach get an explicit zero gradient.
fn fill_missing_gradients(params: &mut ParamStore) {
    for (_, t) in params.iter_mut() {
        if t.grad().is_none() {
            let zeros = vec![0.0; t.numel()];
            t.accumulate_grad(&zeros).expect("matching length");
        }
    }
}

/// Trains fold `fold` of `plan`.
pub fn train_fold(
    data: &Dataset,
    plan: &FoldPlan,
    fold: usize,
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    let split = plan.split(fold)?;
    let train_idx = data.indices_of(&split.train);
    let val_idx = data.indices_of(&split.val);
    train(data, &train_idx, &val_idx, fold, cfg, log)
}

/// Lobe labels for a whole prepared volume, tiling each axial slice with
/// `S x S` patches (the last row and column of tiles are flush with the
/// border).
pub fn segment_volume(model: &M2Unet, case: &PreparedCase, size: usize) -> Result<Vec<u8>> {
    let [d, h, w] = case.volume.extents;
    if size > h || size > w {
        return invalid(format!("patch size {size} exceeds axial extents {h}x{w}"));
    }
    let starts = |len: usize| -> Vec<usize> {
        let mut s: Vec<usize> = (0..len - size + 1).step_by(size).collect();
        if s.last() != Some(&(len - size)) {
            s.push(len - size);
        }
        s
    };
    let (ys, xs) = (starts(h), starts(w));
    let mut out = vec![0u8; d * h * w];
    for z in 0..d {
        let mut data = Vec::with_capacity(ys.len() * xs.len() * size * size);
        for &y in &ys {
            for &x in &xs {
                for row in y..y + size {
                    let i = case.volume.index(z, row, x);
                    data.extend(case.volume.voxels[i..i + size].iter().map(|&v| v as f64));
                }
            }
        }
        let tiles = Tensor::new(vec![ys.len() * xs.len(), 1, size, size], data)?;
        let labels = model.segment(&tiles)?;
        let mut t = 0;
        for &y in &ys {
            for &x in &xs {
                for row in 0..size {
                    let dst = (z * h + y + row) * w + x;
                    out[dst..dst + size].copy_from_slice(&labels[t][row * size..(row + 1) * size]);
                }
                t += 1;
            }
        }
    }
    Ok(out)
}

/// Per-case severity probabilities averaged over `eval_draws` random bags,
/// and lobe overlap of mask-bearing cases. With `full_volume` the overlap is
/// measured on whole tiled volumes, otherwise on the sampled patches.
pub fn evaluate(
    model: &M2Unet,
    data: &Dataset,
    cases: &[usize],
    fold: usize,
    cfg: &TrainConfig,
    full_volume: bool,
    seed: u64,
) -> Result<FoldReport> {
    let (mut ids, mut probs, mut labels, mut overlaps) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::<Overlap>::new());
    let classes = cfg.arch.seg_classes;
    for &i in cases {
        let case = &data.cases[i];
        let mut counts = vec![OverlapCounts::default(); classes];
        let mut p = 0.0;
        for draw in 0..cfg.eval_draws {
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, i as u64), draw as u64));
            let bag = build_bag(case, cfg.bag_size, cfg.patch_size, &mut rng)?;
            let pred = model.predict(&bag.patches, !full_volume && bag.masks.is_some())?;
            p += pred.severity_prob;
            if let (Some(pl), Some(gl)) = (&pred.seg_labels, &bag.masks) {
                for (a, b) in pl.iter().zip(gl) {
                    add_counts(&mut counts, &overlap_counts(a, b, classes)?);
                }
            }
        }
        if full_volume {
            if let Some(mask) = &case.mask {
                let pred = segment_volume(model, case, cfg.patch_size)?;
                counts = overlap_counts(&pred, &mask.labels, classes)?;
            }
        }
        if case.mask.is_some() {
            if let Some(o) = metrics_from_counts(&counts).macro_avg {
                overlaps.push(o);
            }
        }
        ids.push(case.id.clone());
        probs.push(p / cfg.eval_draws as f64);
        labels.push(case.severity == Severity::Severe);
    }
    Ok(fold_report(fold, ids, probs, labels, &overlaps))
}

fn add_counts(acc: &mut [OverlapCounts], add: &[OverlapCounts]) {
    for (a, b) in acc.iter_mut().zip(add) {
        a.gt += b.gt;
        a.pred += b.pred;
        a.both += b.both;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::CaseRecord;

    fn cfg(epochs: usize) -> OptimConfig {
        OptimConfig {
            epochs,
            ..Default::default()
        }
    }

    #[test]
    fn poly_schedule() {
        let c = cfg(20);
        assert_eq!(poly_lr(0, &c), 0.01);
        assert_eq!(poly_lr(20, &c), 0.0);
        assert!((poly_lr(10, &c) - 0.0059460).abs() < 1e-7);
        let lrs: Vec<f64> = (0..=20).map(|e| poly_lr(e, &c)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    fn scalar_store(value: f64, grad: Option<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(value)).unwrap();
        if let Some(g) = grad {
            s.get_mut("w").unwrap().accumulate_grad(&[g]).unwrap();
        }
        s
    }

    #[test]
    fn sgd_examples() {
        let plain = OptimConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..cfg(1)
        };
        let mut s = scalar_store(1.0, Some(0.0));
        sgd_step(&mut s, &mut SgdState::new(), 0.1, &plain).unwrap();
        assert_eq!(s.get("w").unwrap().item(), 1.0);

        let mut s = scalar_store(1.0, Some(1.0));
        sgd_step(&mut s, &mut SgdState::new(), 0.1, &plain).unwrap();
        assert!((s.get("w").unwrap().item() - 0.9).abs() < 1e-15);

        // v1 = 1, v2 = 0.9 + 1 = 1.9: second step moves by 0.19
        let heavy = OptimConfig {
            momentum: 0.9,
            weight_decay: 0.0,
            ..cfg(1)
        };
        let mut s = scalar_store(0.0, Some(1.0));
        let mut st = SgdState::new();
        sgd_step(&mut s, &mut st, 0.1, &heavy).unwrap();
        let after_one = s.get("w").unwrap().item();
        sgd_step(&mut s, &mut st, 0.1, &heavy).unwrap();
        assert!((after_one - s.get("w").unwrap().item() - 0.19).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_shrinks_and_missing_grad_fails() {
        let mut s = scalar_store(2.0, Some(0.0));
        sgd_step(&mut s, &mut SgdState::new(), 0.1, &cfg(1)).unwrap();
        assert!(s.get("w").unwrap().item() < 2.0);
        let mut s = scalar_store(2.0, None);
        assert!(matches!(
            sgd_step(&mut s, &mut SgdState::new(), 0.1, &cfg(1)),
            Err(Error::MissingGrad(_))
        ));
    }

    fn manifest(patients: usize, scans: usize) -> Manifest {
        let cases = (0..patients * scans)
            .map(|i| CaseRecord {
                id: format!("c{i}"),
                patient_id: format!("p{:02}", i / scans),
                volume: String::new(),
                mask: None,
                severity: Severity::NonSevere,
                infected_fraction: 0.0,
            })
            .collect();
        Manifest {
            version: 1,
            tau: 0.15,
            cases,
        }
    }

    #[test]
    fn folds_partition_patients() {
        let plan = make_folds(&manifest(40, 3), 1).unwrap();
        assert!(plan.subsets.iter().all(|s| s.len() == 8));
        let mut all: Vec<&String> = plan.subsets.iter().flatten().collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 40);
        let split = plan.split(2).unwrap();
        assert_eq!(
            (split.train.len(), split.val.len(), split.test.len()),
            (28, 4, 8)
        );
        assert!(make_folds(&manifest(4, 3), 1).is_err());
        let sizes: Vec<usize> = make_folds(&manifest(13, 1), 0)
            .unwrap()
            .subsets
            .iter()
            .map(Vec::len)
            .collect();
        assert_eq!(sizes, vec![3, 3, 3, 2, 2]);
    }

    #[test]
    fn seeds_are_mixed() {
        assert_ne!(mix_seed(0, 0), mix_seed(0, 1));
        assert_ne!(mix_seed(1, 0), mix_seed(0, 1));
        assert_eq!(mix_seed(5, 9), mix_seed(5, 9));
    }
}
