//! Classification, ROC/AUC, overlap and margin metrics, and cross-fold
//! aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Operating point on the severe-class probability.
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    /// Thresholds `probs` at [`THRESHOLD`]; a probability equal to it counts
    /// as negative.
    pub fn from_scores(probs: &[f64], labels: &[bool]) -> Self {
        let mut c = Self::default();
        for (&p, &l) in probs.iter().zip(labels) {
            match (p > THRESHOLD, l) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Rates with a zero denominator are `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn classification_metrics(c: &ConfusionCounts) -> ClassificationMetrics {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    ClassificationMetrics {
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision,
        recall,
        f1,
    }
}

/// Rank-based area under the ROC curve; tied scores earn half credit.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        ));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return invalid("AUC needs at least one positive and one negative");
    }
    if scores.iter().any(|s| s.is_nan()) {
        return invalid("AUC scores must not be NaN");
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // mid-ranks (1-based) of tied groups
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// ROC polyline `(fpr, tpr)` from (0,0) to (1,1), one vertex per distinct
/// score taken as a threshold in decreasing order.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if scores.len() != labels.len() || pos == 0 || neg == 0 {
        return invalid("ROC needs matched scores and both classes");
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(points)
}

pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Voxel counts of one class: ground truth, prediction, intersection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapCounts {
    pub gt: usize,
    pub pred: usize,
    pub both: usize,
}

impl OverlapCounts {
    pub fn dsc(&self) -> Option<f64> {
        ratio(2 * self.both, self.gt + self.pred)
    }

    pub fn sen(&self) -> Option<f64> {
        ratio(self.both, self.gt)
    }

    pub fn ppv(&self) -> Option<f64> {
        ratio(self.both, self.pred)
    }
}

pub fn overlap_counts(pred: &[u8], gt: &[u8], classes: usize) -> Result<Vec<OverlapCounts>> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            op: "overlap_counts",
            lhs: vec![pred.len()],
            rhs: vec![gt.len()],
        });
    }
    let mut out = vec![OverlapCounts::default(); classes];
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p as usize, g as usize);
        if p >= classes || g >= classes {
            return invalid(format!(
                "label {} out of range for {classes} classes",
                p.max(g)
            ));
        }
        out[p].pred += 1;
        out[g].gt += 1;
        if p == g {
            out[p].both += 1;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub dsc: f64,
    pub sen: f64,
    pub ppv: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    /// Per class, `None` when the class is absent from both maps.
    pub per_class: Vec<Option<Overlap>>,
    /// Mean over the lobe classes (1..) present in either map.
    pub macro_avg: Option<Overlap>,
}

/// Overlap metrics from per-class counts. A class present in only one map
/// scores 0 on the undefined side.
pub fn metrics_from_counts(counts: &[OverlapCounts]) -> SegmentationMetrics {
    let per_class: Vec<Option<Overlap>> = counts
        .iter()
        .map(|c| {
            c.dsc().map(|dsc| Overlap {
                dsc,
                sen: c.sen().unwrap_or(0.0),
                ppv: c.ppv().unwrap_or(0.0),
            })
        })
        .collect();
    let lobes: Vec<Overlap> = per_class.iter().skip(1).flatten().copied().collect();
    let macro_avg = (!lobes.is_empty()).then(|| {
        let n = lobes.len() as f64;
        Overlap {
            dsc: lobes.iter().map(|o| o.dsc).sum::<f64>() / n,
            sen: lobes.iter().map(|o| o.sen).sum::<f64>() / n,
            ppv: lobes.iter().map(|o| o.ppv).sum::<f64>() / n,
        }
    });
    SegmentationMetrics {
        per_class,
        macro_avg,
    }
}

pub fn segmentation_metrics(pred: &[u8], gt: &[u8], classes: usize) -> Result<SegmentationMetrics> {
    Ok(metrics_from_counts(&overlap_counts(pred, gt, classes)?))
}

/// Five-number summary of `|p - l|` with 1.5 IQR whiskers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginStats {
    pub margins: Vec<f64>,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
    /// Cases with margin below 0.5.
    pub correct: usize,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn margin_stats(probs: &[f64], labels: &[bool]) -> Result<MarginStats> {
    if probs.is_empty() || probs.len() != labels.len() {
        return invalid("margin statistics need matched, non-empty inputs");
    }
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return invalid("probabilities must lie in [0, 1]");
    }
    let margins: Vec<f64> = probs
        .iter()
        .zip(labels)
        .map(|(&p, &l)| (p - if l { 1.0 } else { 0.0 }).abs())
        .collect();
    let mut sorted = margins.clone();
    sorted.sort_by(f64::total_cmp);
    let (q1, median, q3) = (
        quantile(&sorted, 0.25),
        quantile(&sorted, 0.5),
        quantile(&sorted, 0.75),
    );
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = sorted
        .iter()
        .copied()
        .filter(|m| (lo_fence..=hi_fence).contains(m))
        .collect();
    Ok(MarginStats {
        correct: margins.iter().filter(|&&m| m < 0.5).count(),
        q1,
        median,
        q3,
        whisker_low: inside.first().copied().unwrap_or(q1),
        whisker_high: inside.last().copied().unwrap_or(q3),
        outliers: sorted
            .iter()
            .copied()
            .filter(|m| !(lo_fence..=hi_fence).contains(m))
            .collect(),
        margins,
    })
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some(MeanStd {
        mean,
        std: var.sqrt(),
    })
}

/// Evaluation of one fold (or one run).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub counts: ConfusionCounts,
    pub classification: ClassificationMetrics,
    pub auc: Option<f64>,
    /// Mean over mask-bearing cases of their macro lobe overlap.
    pub segmentation: Option<Overlap>,
    pub probabilities: Vec<f64>,
    pub labels: Vec<bool>,
    pub case_ids: Vec<String>,
}

impl FoldReport {
    /// Metric name to value, skipping undefined entries.
    pub fn scalars(&self) -> BTreeMap<&'static str, f64> {
        let c = &self.classification;
        let s = self.segmentation;
        [
            ("accuracy", c.accuracy),
            ("precision", c.precision),
            ("recall", c.recall),
            ("f1", c.f1),
            ("auc", self.auc),
            ("dsc", s.map(|o| o.dsc)),
            ("sen", s.map(|o| o.sen)),
            ("ppv", s.map(|o| o.ppv)),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }
}

/// Builds a fold report from per-case probabilities and per-case macro
/// overlaps of the mask-bearing cases.
pub fn fold_report(
    fold: usize,
    case_ids: Vec<String>,
    probabilities: Vec<f64>,
    labels: Vec<bool>,
    case_overlaps: &[Overlap],
) -> FoldReport {
    let counts = ConfusionCounts::from_scores(&probabilities, &labels);
    let segmentation = (!case_overlaps.is_empty()).then(|| {
        let n = case_overlaps.len() as f64;
        Overlap {
            dsc: case_overlaps.iter().map(|o| o.dsc).sum::<f64>() / n,
            sen: case_overlaps.iter().map(|o| o.sen).sum::<f64>() / n,
            ppv: case_overlaps.iter().map(|o| o.ppv).sum::<f64>() / n,
        }
    });
    FoldReport {
        fold,
        counts,
        classification: classification_metrics(&counts),
        auc: auc(&probabilities, &labels).ok(),
        segmentation,
        probabilities,
        labels,
        case_ids,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub folds: Vec<FoldReport>,
    /// Mean and std over the folds where the metric is defined.
    pub aggregate: BTreeMap<String, MeanStd>,
    pub margins: Option<MarginStats>,
}

pub fn aggregate_folds(folds: Vec<FoldReport>) -> Result<MetricsReport> {
    if folds.is_empty() {
        return invalid("aggregation needs at least one fold");
    }
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for f in &folds {
        for (k, v) in f.scalars() {
            columns.entry(k.to_string()).or_default().push(v);
        }
    }
    let aggregate = columns
        .into_iter()
        .filter_map(|(k, v)| mean_std(&v).map(|m| (k, m)))
        .collect();
    let probs: Vec<f64> = folds
        .iter()
        .flat_map(|f| f.probabilities.iter().copied())
        .collect();
    let labels: Vec<bool> = folds
        .iter()
        .flat_map(|f| f.labels.iter().copied())
        .collect();
    Ok(MetricsReport {
        margins: margin_stats(&probs, &labels).ok(),
        folds,
        aggregate,
    })
}

impl MetricsReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// One row per fold plus `mean` and `std` rows.
    pub fn summary_csv(&self) -> String {
        let cols: Vec<&String> = self.aggregate.keys().collect();
        let mut out = String::from("fold");
        for c in &cols {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
        for f in &self.folds {
            let s = f.scalars();
            let _ = write!(out, "{}", f.fold);
            for c in &cols {
                match s.get(c.as_str()) {
                    Some(v) => {
                        let _ = write!(out, ",{v}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        for (label, pick) in [("mean", 0), ("std", 1)] {
            out.push_str(label);
            for c in &cols {
                let m = self.aggregate[*c];
                let _ = write!(out, ",{}", if pick == 0 { m.mean } else { m.std });
            }
            out.push('\n');
        }
        out
    }

    /// Per-case rows: fold, case, label, probability, margin.
    pub fn cases_csv(&self) -> String {
        let mut out = String::from("fold,case,label,probability,margin\n");
        for f in &self.folds {
            for ((id, &p), &l) in f.case_ids.iter().zip(&f.probabilities).zip(&f.labels) {
                let margin = (p - if l { 1.0 } else { 0.0 }).abs();
                let _ = writeln!(out, "{},{id},{},{p},{margin}", f.fold, l as u8);
            }
        }
        out
    }

    /// ROC polyline over all folds' pooled cases.
    pub fn roc_csv(&self) -> Result<String> {
        let probs: Vec<f64> = self
            .folds
            .iter()
            .flat_map(|f| f.probabilities.iter().copied())
            .collect();
        let labels: Vec<bool> = self
            .folds
            .iter()
            .flat_map(|f| f.labels.iter().copied())
            .collect();
        let mut out = String::from("fpr,tpr\n");
        for (x, y) in roc_curve(&probs, &labels)? {
            let _ = writeln!(out, "{x},{y}");
        }
        Ok(out)
    }

    pub fn margin_csv(&self) -> Option<String> {
        let m = self.margins.as_ref()?;
        let mut out =
            String::from("q1,median,q3,whisker_low,whisker_high,outliers,correct,total\n");
        let outliers: Vec<String> = m.outliers.iter().map(f64::to_string).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            m.q1,
            m.median,
            m.q3,
            m.whisker_low,
            m.whisker_high,
            outliers.join(";"),
            m.correct,
            m.margins.len()
        );
        Some(out)
    }

    /// Writes `report.json`, `summary.csv`, `cases.csv` and, where defined,
    /// `roc.csv` and `margins.csv` into `dir`.
    pub fn write_all(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.write_json(&dir.join("report.json"))?;
        fs::write(dir.join("summary.csv"), self.summary_csv())?;
        fs::write(dir.join("cases.csv"), self.cases_csv())?;
        if let Ok(roc) = self.roc_csv() {
            fs::write(dir.join("roc.csv"), roc)?;
        }
        if let Some(m) = self.margin_csv() {
            fs::write(dir.join("margins.csv"), m)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_example() {
        let c = ConfusionCounts {
            tp: 3,
            tn: 5,
            fp: 1,
            fn_: 1,
        };
        let m = classification_metrics(&c);
        assert_eq!(m.accuracy, Some(0.8));
        assert_eq!(m.precision, Some(0.75));
        assert_eq!(m.recall, Some(0.75));
        assert_eq!(m.f1, Some(0.75));
    }

    #[test]
    fn undefined_precision_is_absent() {
        let c = ConfusionCounts {
            tp: 0,
            tn: 4,
            fp: 0,
            fn_: 2,
        };
        let m = classification_metrics(&c);
        assert_eq!(m.recall, Some(0.0));
        assert_eq!(m.precision, None);
        assert_eq!(m.f1, None);
    }

    #[test]
    fn auc_examples() {
        let labels = [true, true, false, false];
        assert_eq!(auc(&[0.9, 0.4, 0.6, 0.1], &labels).unwrap(), 0.75);
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &labels).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn roc_area_matches_rank_auc() {
        let scores = [0.9, 0.4, 0.6, 0.1, 0.4, 0.6];
        let labels = [true, true, false, false, false, true];
        let roc = roc_curve(&scores, &labels).unwrap();
        assert_eq!(roc.first(), Some(&(0.0, 0.0)));
        assert_eq!(roc.last(), Some(&(1.0, 1.0)));
        assert!((trapezoid_area(&roc) - auc(&scores, &labels).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn overlap_example() {
        // |G| = 4, |P| = 6, |G n P| = 3 for class 1
        let gt = [1, 1, 1, 1, 0, 0, 0, 0];
        let pred = [1, 1, 1, 0, 1, 1, 1, 0];
        let m = segmentation_metrics(&pred, &gt, 2).unwrap();
        let o = m.per_class[1].unwrap();
        assert_eq!((o.dsc, o.sen, o.ppv), (0.6, 0.75, 0.5));
        assert_eq!(m.macro_avg, Some(o));
    }

    #[test]
    fn absent_lobes_leave_the_macro_mean() {
        let m = segmentation_metrics(&[0, 2, 2], &[0, 2, 2], 6).unwrap();
        assert_eq!(m.per_class[1], None);
        assert_eq!(m.macro_avg.unwrap().dsc, 1.0);
        assert_eq!(
            segmentation_metrics(&[0, 0], &[0, 0], 6).unwrap().macro_avg,
            None
        );
    }

    #[test]
    fn margins() {
        let s = margin_stats(&[0.9, 0.6], &[true, false]).unwrap();
        assert!((s.margins[0] - 0.1).abs() < 1e-15);
        assert_eq!(s.margins[1], 0.6);
        assert_eq!(s.correct, 1);
    }

    #[test]
    fn aggregation() {
        let f = |fold, p: f64| {
            fold_report(
                fold,
                vec!["a".into(), "b".into()],
                vec![p, 0.1],
                vec![true, false],
                &[],
            )
        };
        let r = aggregate_folds(vec![f(0, 0.9), f(1, 0.2)]).unwrap();
        assert_eq!(
            r.aggregate["accuracy"],
            MeanStd {
                mean: 0.75,
                std: 0.25
            }
        );
        assert_eq!(mean_std(&[0.9, 1.0]).unwrap().mean, 0.95);
        assert_eq!(mean_std(&[0.7]).unwrap().std, 0.0);
        assert!(r.summary_csv().starts_with("fold,accuracy,auc,"));
        assert!(aggregate_folds(vec![]).is_err());
    }
}
