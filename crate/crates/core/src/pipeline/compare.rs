//! Baseline vs augmented comparison on a shared evaluation set.

use serde::{Deserialize, Serialize};

use crate::corpus::{Label, Probs};
use crate::metrics::{auc, delong_test, one_vs_rest, AucReport, DeLongResult, MetricsError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassComparison {
    pub label: Label,
    pub auc_baseline: Option<f64>,
    pub auc_augmented: Option<f64>,
    /// augmented − baseline
    pub delta: Option<f64>,
    /// Difference of the two AUCs after each is rounded to three decimals.
    pub reported_delta: Option<f64>,
    pub delong: Option<DeLongResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: AucReport,
    pub augmented: AucReport,
    pub per_class: Vec<ClassComparison>,
    pub wauc_delta: f64,
    pub reported_wauc_delta: f64,
    pub warnings: Vec<String>,
}

impl Comparison {
    /// Classes with a DeLong p-value below `alpha`.
    pub fn significant_classes(&self, alpha: f64) -> usize {
        self.per_class
            .iter()
            .filter(|c| c.delong.as_ref().is_some_and(|d| d.p_two_sided < alpha))
            .count()
    }
}

pub fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

fn reported(a: f64, b: f64) -> f64 {
    round3(round3(b) - round3(a))
}

fn assemble(
    baseline: AucReport,
    augmented: AucReport,
    delong: [Option<DeLongResult>; 3],
    mut warnings: Vec<String>,
) -> Comparison {
    let per_class = Label::ALL
        .iter()
        .zip(delong)
        .map(|(&label, d)| {
            let (a, b) = (baseline.auc(label), augmented.auc(label));
            let both = a.zip(b);
            ClassComparison {
                label,
                auc_baseline: a,
                auc_augmented: b,
                delta: both.map(|(a, b)| b - a),
                reported_delta: both.map(|(a, b)| reported(a, b)),
                delong: d,
            }
        })
        .collect();
    if baseline.per_class_auc.iter().any(Option::is_none) {
        warnings.push("WAUC computed over present classes with renormalized frequencies".into());
    }
    Comparison {
        wauc_delta: augmented.wauc - baseline.wauc,
        reported_wauc_delta: reported(baseline.wauc, augmented.wauc),
        baseline,
        augmented,
        per_class,
        warnings,
    }
}

/// Per-class AUCs, WAUCs and DeLong tests of two models scored on the same records.
pub fn compare_models(scores_a: &[Probs], scores_b: &[Probs], truth: &[Label]) -> Result<Comparison, MetricsError> {
    if scores_a.len() != scores_b.len() {
        return Err(MetricsError::LengthMismatch(format!(
            "{} baseline vs {} augmented score vectors",
            scores_a.len(),
            scores_b.len()
        )));
    }
    let sets_a = one_vs_rest(scores_a, truth)?;
    let sets_b = one_vs_rest(scores_b, truth)?;
    let mut counts = [0usize; 3];
    truth.iter().for_each(|l| counts[l.index()] += 1);

    let mut warnings = Vec::new();
    let mut aucs_a = [None; 3];
    let mut aucs_b = [None; 3];
    let mut delong = [None, None, None];
    for label in Label::ALL {
        let i = label.index();
        let (a, b) = (&sets_a[i], &sets_b[i]);
        if a.positives() == 0 || a.negatives() == 0 {
            warnings.push(format!("class {label} absent from the evaluation truth; AUC and p undefined"));
            continue;
        }
        aucs_a[i] = Some(auc(a)?);
        aucs_b[i] = Some(auc(b)?);
        match delong_test(&a.scores, &b.scores, &a.labels) {
            Ok(d) => delong[i] = Some(d),
            Err(MetricsError::InsufficientClasses { .. }) => {
                warnings.push(format!("class {label} has too few cases for a DeLong test; p undefined"))
            }
            Err(e) => return Err(e),
        }
    }
    Ok(assemble(
        AucReport::from_parts(aucs_a, counts)?,
        AucReport::from_parts(aucs_b, counts)?,
        delong,
        warnings,
    ))
}

/// Comparison from already-computed per-class AUCs (no scores, so no DeLong).
pub fn compare_from_aucs(
    aucs_baseline: [f64; 3],
    aucs_augmented: [f64; 3],
    class_counts: [usize; 3],
) -> Result<Comparison, MetricsError> {
    Ok(assemble(
        AucReport::from_parts(aucs_baseline.map(Some), class_counts)?,
        AucReport::from_parts(aucs_augmented.map(Some), class_counts)?,
        [None, None, None],
        Vec::new(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fixture(n: usize, seed: u64) -> (Vec<Probs>, Vec<Label>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<Label> = (0..n).map(|i| Label::ALL[i % 3]).collect();
        let probs = truth
            .iter()
            .map(|t| {
                let mut z = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
                z[t.index()] += 0.3;
                let s: f64 = z.iter().sum();
                z.map(|v| v / s)
            })
            .collect();
        (probs, truth)
    }

    #[test]
    fn self_comparison() {
        let (p, t) = fixture(90, 1);
        let c = compare_models(&p, &p, &t).unwrap();
        assert_eq!(c.wauc_delta, 0.0);
        for cc in &c.per_class {
            assert_eq!(cc.delta, Some(0.0));
            assert_eq!(cc.delong.as_ref().unwrap().p_two_sided, 1.0);
        }
    }

    #[test]
    fn published_values() {
        let c = compare_from_aucs([0.842, 0.848, 0.987], [0.894, 0.896, 0.990], [151, 457, 51]).unwrap();
        let d: Vec<f64> = c.per_class.iter().map(|x| x.reported_delta.unwrap()).collect();
        assert_eq!(d, vec![0.052, 0.048, 0.003]);
        assert_eq!(c.reported_wauc_delta, 0.046);
        // the unrounded difference is 0.0454..., which alone would round to 0.045
        assert!((c.wauc_delta - 0.04543).abs() < 1e-5);
    }

    #[test]
    fn boosted_classes_are_significant() {
        let (a, t) = fixture(600, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let boosted: Vec<Probs> = a
            .iter()
            .zip(&t)
            .map(|(p, l)| {
                let mut q = *p;
                if *l != Label::Arthroplasty {
                    q[l.index()] += 0.25 + 0.05 * rng.random::<f64>();
                }
                let s: f64 = q.iter().sum();
                q.map(|v| v / s)
            })
            .collect();
        let c = compare_models(&a, &boosted, &t).unwrap();
        for label in [Label::Normal, Label::Abnormal] {
            let cc = &c.per_class[label.index()];
            assert!(cc.delta.unwrap() > 0.0);
            assert!(cc.delong.as_ref().unwrap().p_two_sided < 0.05, "{label}");
        }
        assert!(c.wauc_delta > 0.0);
    }

    #[test]
    fn absent_class_is_undefined_with_warning() {
        let (p, mut t) = fixture(60, 4);
        t.iter_mut().for_each(|l| {
            if *l == Label::Arthroplasty {
                *l = Label::Normal
            }
        });
        let c = compare_models(&p, &p, &t).unwrap();
        let art = &c.per_class[Label::Arthroplasty.index()];
        assert!(art.auc_baseline.is_none() && art.delong.is_none() && art.delta.is_none());
        assert_eq!(c.baseline.frequencies[2], 0.0);
        assert!((c.baseline.frequencies[0] + c.baseline.frequencies[1] - 1.0).abs() < 1e-12);
        assert!(c.warnings.iter().any(|w| w.contains("absent")));
        assert!(c.warnings.iter().any(|w| w.contains("renormalized")));
    }

    #[test]
    fn length_mismatch() {
        let (p, t) = fixture(9, 5);
        assert!(compare_models(&p, &p[..8], &t).is_err());
    }
}
