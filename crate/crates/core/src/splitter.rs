//! Five-way dataset split by study date with patient-level leakage removal.
//!
//! Studies in the primary window are divided patient-wise into TRAIN_PRI,
//! VAL_EVAL and VAL_PTEST; the secondary window becomes TRAIN_SEC and the
//! test window TEST. Patients of TRAIN_SEC who also appear in a validation
//! set lose all their TRAIN_SEC studies, and patients of TEST who appear
//! anywhere in the development set lose all their TEST studies.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{apportion, StudyRecord, PROB_SUM_TOL};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SplitError {
    #[error("invalid split boundaries: {0}")]
    InvalidBoundaries(String),
    #[error("cannot split an empty corpus")]
    EmptyCorpus,
    #[error("duplicate accession_id `{0}` in corpus")]
    DuplicateAccession(String),
    #[error("plan references unknown accession_id `{0}`")]
    UnknownAccession(String),
}

/// Inclusive date range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateWindow {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateWindow {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        self.start <= date && date <= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitBoundaries {
    pub primary_window: DateWindow,
    pub secondary_window: DateWindow,
    pub test_window: DateWindow,
    /// TRAIN_PRI, VAL_EVAL, VAL_PTEST shares of the primary-window patients.
    pub primary_ratios: [f64; 3],
}

impl Default for SplitBoundaries {
    /// January–February, March–November and December of 2019.
    fn default() -> Self {
        let d = |m, day| NaiveDate::from_ymd_opt(2019, m, day).expect("valid date");
        Self {
            primary_window: DateWindow::new(d(1, 1), d(2, 28)),
            secondary_window: DateWindow::new(d(3, 1), d(11, 30)),
            test_window: DateWindow::new(d(12, 1), d(12, 31)),
            primary_ratios: [0.672, 0.164, 0.164],
        }
    }
}

impl SplitBoundaries {
    pub fn validate(&self) -> Result<(), SplitError> {
        let bad = |m: String| Err(SplitError::InvalidBoundaries(m));
        for (name, w) in [
            ("primary", &self.primary_window),
            ("secondary", &self.secondary_window),
            ("test", &self.test_window),
        ] {
            if w.start > w.end {
                return bad(format!("{name} window starts after it ends"));
            }
        }
        if self.primary_window.end >= self.secondary_window.start {
            return bad("primary window must end before the secondary window starts".into());
        }
        if self.secondary_window.end >= self.test_window.start {
            return bad("secondary window must end before the test window starts".into());
        }
        let r = &self.primary_ratios;
        if r.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return bad(format!("primary ratios {r:?} must be non-negative"));
        }
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return bad(format!("primary ratios sum to {sum}, expected 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    TrainPri,
    ValEval,
    ValPtest,
    TrainSec,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 5] =
        [Partition::TrainPri, Partition::ValEval, Partition::ValPtest, Partition::TrainSec, Partition::Test];

    pub fn name(self) -> &'static str {
        match self {
            Partition::TrainPri => "TRAIN_PRI",
            Partition::ValEval => "VAL_EVAL",
            Partition::ValPtest => "VAL_PTEST",
            Partition::TrainSec => "TRAIN_SEC",
            Partition::Test => "TEST",
        }
    }

    pub fn is_development(self) -> bool {
        self != Partition::Test
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Accession lists per partition plus the leakage-removal audit.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_pri: Vec<String>,
    pub val_eval: Vec<String>,
    pub val_ptest: Vec<String>,
    pub train_sec: Vec<String>,
    pub test: Vec<String>,
    /// Patients deleted from TRAIN_SEC because they also appear in a validation set.
    pub removed_from_train_sec: Vec<String>,
    /// Patients deleted from TEST because they also appear in the development set.
    pub removed_from_test: Vec<String>,
    /// Patients with studies in both TRAIN_PRI and TRAIN_SEC; kept, recorded only.
    #[serde(default)]
    pub spanning_primary_secondary: Vec<String>,
}

impl SplitPlan {
    pub fn partition(&self, p: Partition) -> &[String] {
        match p {
            Partition::TrainPri => &self.train_pri,
            Partition::ValEval => &self.val_eval,
            Partition::ValPtest => &self.val_ptest,
            Partition::TrainSec => &self.train_sec,
            Partition::Test => &self.test,
        }
    }

    fn partition_mut(&mut self, p: Partition) -> &mut Vec<String> {
        match p {
            Partition::TrainPri => &mut self.train_pri,
            Partition::ValEval => &mut self.val_eval,
            Partition::ValPtest => &mut self.val_ptest,
            Partition::TrainSec => &mut self.train_sec,
            Partition::Test => &mut self.test,
        }
    }

    /// Partition of every assigned accession (first one wins if the plan is inconsistent).
    pub fn assignment(&self) -> HashMap<&str, Partition> {
        let mut out = HashMap::new();
        for p in Partition::ALL {
            for id in self.partition(p) {
                out.entry(id.as_str()).or_insert(p);
            }
        }
        out
    }

    /// Records of one partition, in plan order.
    pub fn select<'a>(&self, corpus: &'a [StudyRecord], p: Partition) -> Vec<&'a StudyRecord> {
        let by_id: HashMap<&str, &StudyRecord> =
            corpus.iter().map(|r| (r.accession_id.as_str(), r)).collect();
        self.partition(p).iter().filter_map(|id| by_id.get(id.as_str()).copied()).collect()
    }
}

pub fn split_by_date(
    corpus: &[StudyRecord],
    boundaries: &SplitBoundaries,
    seed: u64,
) -> Result<SplitPlan, SplitError> {
    boundaries.validate()?;
    if corpus.is_empty() {
        return Err(SplitError::EmptyCorpus);
    }
    let mut seen = BTreeSet::new();
    for r in corpus {
        if !seen.insert(r.accession_id.as_str()) {
            return Err(SplitError::DuplicateAccession(r.accession_id.clone()));
        }
    }

    let primary_patients: BTreeSet<&str> = corpus
        .iter()
        .filter(|r| boundaries.primary_window.contains(r.study_date))
        .map(|r| r.patient_id.as_str())
        .collect();
    let mut shuffled: Vec<&str> = primary_patients.into_iter().collect();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let counts = apportion(&boundaries.primary_ratios, shuffled.len());
    let sub_partition: HashMap<&str, Partition> = shuffled
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let part = if i < counts[0] {
                Partition::TrainPri
            } else if i < counts[0] + counts[1] {
                Partition::ValEval
            } else {
                Partition::ValPtest
            };
            (p, part)
        })
        .collect();

    let mut plan = SplitPlan::default();
    let mut patients: BTreeMap<Partition, BTreeSet<&str>> = BTreeMap::new();
    for r in corpus {
        let part = if boundaries.primary_window.contains(r.study_date) {
            sub_partition[r.patient_id.as_str()]
        } else if boundaries.secondary_window.contains(r.study_date) {
            Partition::TrainSec
        } else if boundaries.test_window.contains(r.study_date) {
            Partition::Test
        } else {
            continue;
        };
        plan.partition_mut(part).push(r.accession_id.clone());
        patients.entry(part).or_default().insert(r.patient_id.as_str());
    }
    let of = |p| patients.get(&p).cloned().unwrap_or_default();

    let validation: BTreeSet<&str> = of(Partition::ValEval).union(&of(Partition::ValPtest)).copied().collect();
    let sec_leaks: BTreeSet<&str> = of(Partition::TrainSec).intersection(&validation).copied().collect();

    let mut development: BTreeSet<&str> = validation;
    development.extend(of(Partition::TrainPri));
    development.extend(of(Partition::TrainSec).difference(&sec_leaks));
    let test_leaks: BTreeSet<&str> = of(Partition::Test).intersection(&development).copied().collect();

    let patient_of: HashMap<&str, &str> =
        corpus.iter().map(|r| (r.accession_id.as_str(), r.patient_id.as_str())).collect();
    plan.train_sec.retain(|id| !sec_leaks.contains(patient_of[id.as_str()]));
    plan.test.retain(|id| !test_leaks.contains(patient_of[id.as_str()]));
    plan.removed_from_train_sec = sec_leaks.iter().map(|p| p.to_string()).collect();
    plan.removed_from_test = test_leaks.iter().map(|p| p.to_string()).collect();

    let remaining_sec: BTreeSet<&str> = plan.train_sec.iter().map(|id| patient_of[id.as_str()]).collect();
    plan.spanning_primary_secondary =
        of(Partition::TrainPri).intersection(&remaining_sec).map(|p| p.to_string()).collect();
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    /// An accession listed more than once across (or within) partitions.
    Disjointness { accession_id: String, partitions: Vec<Partition> },
    /// A TRAIN_SEC patient also present in VAL_EVAL or VAL_PTEST.
    ValidationLeakage { patient_id: String },
    /// A TEST patient also present in the development set.
    TestLeakage { patient_id: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Disjointness { accession_id, partitions } => {
                let names: Vec<_> = partitions.iter().map(|p| p.name()).collect();
                write!(f, "disjointness: {accession_id} listed in {}", names.join(", "))
            }
            Violation::ValidationLeakage { patient_id } => {
                write!(f, "validation leakage: patient {patient_id} in TRAIN_SEC and a validation set")
            }
            Violation::TestLeakage { patient_id } => {
                write!(f, "test leakage: patient {patient_id} in TEST and the development set")
            }
        }
    }
}

/// Check every plan invariant; an empty list means the plan is sound.
pub fn verify_plan(corpus: &[StudyRecord], plan: &SplitPlan) -> Result<Vec<Violation>, SplitError> {
    let patient_of: HashMap<&str, &str> =
        corpus.iter().map(|r| (r.accession_id.as_str(), r.patient_id.as_str())).collect();

    let mut listed: BTreeMap<&str, Vec<Partition>> = BTreeMap::new();
    let mut patients: BTreeMap<Partition, BTreeSet<&str>> = BTreeMap::new();
    for p in Partition::ALL {
        for id in plan.partition(p) {
            let patient = patient_of
                .get(id.as_str())
                .ok_or_else(|| SplitError::UnknownAccession(id.clone()))?;
            listed.entry(id.as_str()).or_default().push(p);
            patients.entry(p).or_default().insert(patient);
        }
    }

    let mut violations: Vec<Violation> = listed
        .into_iter()
        .filter(|(_, parts)| parts.len() > 1)
        .map(|(id, partitions)| Violation::Disjointness { accession_id: id.to_string(), partitions })
        .collect();

    let of = |p| patients.get(&p).cloned().unwrap_or_default();
    let validation: BTreeSet<&str> = of(Partition::ValEval).union(&of(Partition::ValPtest)).copied().collect();
    violations.extend(
        of(Partition::TrainSec)
            .intersection(&validation)
            .map(|p| Violation::ValidationLeakage { patient_id: p.to_string() }),
    );
    let development: BTreeSet<&str> = Partition::ALL
        .iter()
        .filter(|p| p.is_development())
        .flat_map(|&p| of(p))
        .collect();
    violations.extend(
        of(Partition::Test)
            .intersection(&development)
            .map(|p| Violation::TestLeakage { patient_id: p.to_string() }),
    );
    Ok(violations)
}
