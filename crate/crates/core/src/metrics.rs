//! ROC analysis for three-class probabilistic classifiers.
//!
//! AUC is the Mann-Whitney statistic with the tie kernel ψ(x, x) = ½.
//! Per-class AUCs use one-vs-rest binarization and are combined into a
//! weighted AUC with weights equal to the class frequencies of the
//! evaluation set. Two correlated AUCs measured on the same cases are
//! compared with DeLong's structural-component variance estimate.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Label, Probs};

/// Below this, Var(AUCa − AUCb) is treated as zero and the test reports z = 0, p = 1.
pub const VARIANCE_FLOOR: f64 = 1e-15;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("need at least {needed} positive and {needed} negative cases, got {positives} positive and {negatives} negative")]
    InsufficientClasses { positives: usize, negatives: usize, needed: usize },
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
    #[error("class counts sum to zero")]
    ZeroTotal,
    #[error("empty input")]
    Empty,
    #[error("no class has both positive and negative cases")]
    NoDefinedClass,
}

/// Scores of one model for the positive class, with parallel ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self, MetricsError> {
        if scores.len() != labels.len() {
            return Err(MetricsError::LengthMismatch(format!(
                "{} scores vs {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(MetricsError::NonFinite(i));
        }
        Ok(Self { scores, labels })
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn negatives(&self) -> usize {
        self.labels.len() - self.positives()
    }

    fn require(&self, needed: usize) -> Result<(), MetricsError> {
        let (positives, negatives) = (self.positives(), self.negatives());
        if positives < needed || negatives < needed {
            return Err(MetricsError::InsufficientClasses { positives, negatives, needed });
        }
        Ok(())
    }
}

/// Mann-Whitney AUC via midranks: O(N log N).
pub fn auc(set: &ScoredSet) -> Result<f64, MetricsError> {
    set.require(1)?;
    let mut order: Vec<usize> = (0..set.scores.len()).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));

    // Sum of (doubled) midranks of the positives keeps everything integral.
    let mut doubled_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && set.scores[order[j]] == set.scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j share midrank (i+1+j)/2.
        let doubled_midrank = (i + 1 + j) as u64;
        let pos_in_group = order[i..j].iter().filter(|&&k| set.labels[k]).count() as u64;
        doubled_rank_sum += doubled_midrank * pos_in_group;
        i = j;
    }
    let m = set.positives() as u64;
    let n = set.negatives() as u64;
    // 2U = 2R − m(m+1)
    let doubled_u = doubled_rank_sum - m * (m + 1);
    Ok(doubled_u as f64 / (2.0 * m as f64 * n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores ≥ threshold are called positive; the first point uses +∞.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC points at every distinct score threshold, from (0, 0) to (1, 1).
pub fn roc_curve(set: &ScoredSet) -> Result<Vec<RocPoint>, MetricsError> {
    set.require(1)?;
    let p = set.positives() as f64;
    let n = set.negatives() as f64;
    let mut order: Vec<usize> = (0..set.scores.len()).collect();
    order.sort_by(|&a, &b| set.scores[b].total_cmp(&set.scores[a]));

    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = set.scores[order[i]];
        while i < order.len() && set.scores[order[i]] == threshold {
            if set.labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint { threshold, fpr: fp as f64 / n, tpr: tp as f64 / p });
    }
    Ok(points)
}

/// Trapezoidal area under a sequence of ROC points.
pub fn trapezoid_area(points: &[RocPoint]) -> f64 {
    points.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) * 0.5).sum()
}

/// CSV with header `threshold,fpr,tpr`; the leading point's threshold is `inf`.
pub fn write_roc_csv<W: Write>(points: &[RocPoint], mut out: W) -> std::io::Result<()> {
    writeln!(out, "threshold,fpr,tpr")?;
    for p in points {
        writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr)?;
    }
    out.flush()
}

/// Per-class AUCs combined by class frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    /// `None` where the class has no positive (or no negative) case.
    pub per_class_auc: [Option<f64>; 3],
    pub class_counts: [usize; 3],
    /// Weights used in `wauc`; zero for undefined classes, renormalized over the rest.
    pub frequencies: [f64; 3],
    pub wauc: f64,
}

impl AucReport {
    /// Frequency-weighted AUC over the classes whose AUC is defined.
    pub fn from_parts(per_class_auc: [Option<f64>; 3], class_counts: [usize; 3]) -> Result<Self, MetricsError> {
        let total: usize = (0..3).filter(|&i| per_class_auc[i].is_some()).map(|i| class_counts[i]).sum();
        if class_counts.iter().sum::<usize>() == 0 {
            return Err(MetricsError::ZeroTotal);
        }
        if total == 0 {
            return Err(MetricsError::NoDefinedClass);
        }
        let mut frequencies = [0.0; 3];
        let mut wauc = 0.0;
        for i in 0..3 {
            if let Some(a) = per_class_auc[i] {
                frequencies[i] = class_counts[i] as f64 / total as f64;
                wauc += frequencies[i] * a;
            }
        }
        Ok(Self { per_class_auc, class_counts, frequencies, wauc })
    }

    pub fn auc(&self, label: Label) -> Option<f64> {
        self.per_class_auc[label.index()]
    }
}

/// WAUC = Σ fᵢ·AUCᵢ with fᵢ = countᵢ / total.
pub fn wauc(per_class_auc: [f64; 3], class_counts: [usize; 3]) -> Result<AucReport, MetricsError> {
    AucReport::from_parts(per_class_auc.map(Some), class_counts)
}

/// One binary scored set per class: score = P(class), positive iff truth = class.
pub fn one_vs_rest(probabilities: &[Probs], true_labels: &[Label]) -> Result<[ScoredSet; 3], MetricsError> {
    if probabilities.len() != true_labels.len() {
        return Err(MetricsError::LengthMismatch(format!(
            "{} probability vectors vs {} labels",
            probabilities.len(),
            true_labels.len()
        )));
    }
    if probabilities.is_empty() {
        return Err(MetricsError::Empty);
    }
    let build = |c: Label| {
        ScoredSet::new(
            probabilities.iter().map(|p| p[c.index()]).collect(),
            true_labels.iter().map(|&t| t == c).collect(),
        )
    };
    Ok([build(Label::Normal)?, build(Label::Abnormal)?, build(Label::Arthroplasty)?])
}

/// One-vs-rest AUC per class and their frequency-weighted mean.
///
/// Classes absent from `true_labels` get no AUC and the weights are
/// renormalized over the classes that are present.
pub fn class_auc_report(probabilities: &[Probs], true_labels: &[Label]) -> Result<AucReport, MetricsError> {
    let sets = one_vs_rest(probabilities, true_labels)?;
    let mut counts = [0usize; 3];
    for t in true_labels {
        counts[t.index()] += 1;
    }
    let mut aucs = [None; 3];
    for (i, set) in sets.iter().enumerate() {
        if set.positives() > 0 && set.negatives() > 0 {
            aucs[i] = Some(auc(set)?);
        }
    }
    AucReport::from_parts(aucs, counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeLongResult {
    pub auc_a: f64,
    pub auc_b: f64,
    pub variance_of_difference: f64,
    pub z: f64,
    pub p_two_sided: f64,
}

/// Structural components of one model: (V10 over positives, V01 over negatives).
fn structural_components(scores: &[f64], labels: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    let psi = |x: f64, y: f64| {
        if x > y {
            1.0
        } else if x == y {
            0.5
        } else {
            0.0
        }
    };
    let v10 = pos.iter().map(|&x| neg.iter().map(|&y| psi(x, y)).sum::<f64>() / neg.len() as f64).collect();
    let v01 = neg.iter().map(|&y| pos.iter().map(|&x| psi(x, y)).sum::<f64>() / pos.len() as f64).collect();
    (v10, v01)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample (n − 1) covariance.
fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() - 1) as f64
}

/// DeLong test of H0: AUCa = AUCb for two models scored on the same cases.
pub fn delong_test(scores_a: &[f64], scores_b: &[f64], labels: &[bool]) -> Result<DeLongResult, MetricsError> {
    if scores_a.len() != labels.len() || scores_b.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(format!(
            "{} and {} scores vs {} labels",
            scores_a.len(),
            scores_b.len(),
            labels.len()
        )));
    }
    let set_a = ScoredSet::new(scores_a.to_vec(), labels.to_vec())?;
    ScoredSet::new(scores_b.to_vec(), labels.to_vec())?;
    set_a.require(2)?;
    let m = set_a.positives() as f64;
    let n = set_a.negatives() as f64;

    let (v10a, v01a) = structural_components(scores_a, labels);
    let (v10b, v01b) = structural_components(scores_b, labels);
    let auc_a = mean(&v10a);
    let auc_b = mean(&v10b);

    let s10 = [covariance(&v10a, &v10a), covariance(&v10b, &v10b), covariance(&v10a, &v10b)];
    let s01 = [covariance(&v01a, &v01a), covariance(&v01b, &v01b), covariance(&v01a, &v01b)];
    let variance = (s10[0] + s10[1] - 2.0 * s10[2]) / m + (s01[0] + s01[1] - 2.0 * s01[2]) / n;
    let variance_of_difference = variance.max(0.0);

    let (z, p_two_sided) = if variance_of_difference < VARIANCE_FLOOR {
        (0.0, 1.0)
    } else {
        let z = (auc_a - auc_b) / variance_of_difference.sqrt();
        (z, (2.0 * upper_tail(z.abs())).min(1.0))
    };
    Ok(DeLongResult { auc_a, auc_b, variance_of_difference, z, p_two_sided })
}

/// 1 − Φ(x).
fn upper_tail(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

/// Standard normal CDF with Φ(−x) = 1 − Φ(x) by construction.
pub fn normal_cdf(x: f64) -> f64 {
    let q = upper_tail(x.abs());
    if x >= 0.0 {
        1.0 - q
    } else {
        q
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub sd: f64,
    pub median: f64,
    pub n: usize,
}

pub fn aggregate_seeds(waucs: &[f64]) -> Result<SeedAggregate, MetricsError> {
    if waucs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = waucs.len();
    let m = mean(waucs);
    let sd = if n > 1 {
        (waucs.iter().map(|w| (w - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mut sorted = waucs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
    Ok(SeedAggregate { mean: m, sd, median, n })
}
