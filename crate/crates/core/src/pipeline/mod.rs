//! End-to-end experiment: rule labels on the primary window, a text labeler,
//! pseudo labels for the secondary window, and baseline vs augmented image
//! models compared on TEST.

pub mod compare;
pub mod config;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    filter_studies, generate_corpus, load_corpus, AssignedLabel, Label, LabelProvenance, Probs, StudyRecord,
};
use crate::learncore::{
    build_vocab, featurize_text, predict_proba, pseudo_label, train, Dataset, FeatureSpace, FeatureVector,
    LearnError, LinearSoftmaxModel, TrainConfig, TrainLog,
};
use crate::metrics::{aggregate_seeds, class_auc_report, one_vs_rest, roc_curve, write_roc_csv, AucReport, SeedAggregate};
use crate::rulelab::{apply_rules, parse_ruleset, RuleSet};
use crate::splitter::{split_by_date, verify_plan, Partition, SplitPlan};
use crate::textprep::preprocess;

pub use compare::{compare_from_aucs, compare_models, round3, ClassComparison, Comparison};
pub use config::{ConfigError, CorpusSource, ExperimentConfig};

/// Name of the marker written into the output directory when a run aborts.
pub const FAILED_MARKER: &str = "FAILED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Corpus,
    Split,
    RuleLabel,
    Labeler,
    PseudoLabel,
    ImageTraining,
    Selection,
    Evaluation,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Corpus => "corpus",
            Stage::Split => "split",
            Stage::RuleLabel => "rule-label",
            Stage::Labeler => "labeler",
            Stage::PseudoLabel => "pseudo-label",
            Stage::ImageTraining => "image-training",
            Stage::Selection => "selection",
            Stage::Evaluation => "evaluation",
            Stage::Output => "output",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{stage} stage: {message}")]
    Stage { stage: Stage, message: String },
}

impl PipelineError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::Stage { stage, .. } => Some(*stage),
            PipelineError::Config(_) => None,
        }
    }
}

fn at<E: fmt::Display>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage { stage, message: e.to_string() }
}

// ---- stage helpers, shared with the CLI ----

pub fn load_rules(path: Option<&Path>) -> Result<RuleSet, String> {
    match path {
        None => Ok(RuleSet::bundled()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            parse_ruleset(&text).map_err(|e| format!("{}: {e}", p.display()))
        }
    }
}

pub fn load_source(source: &CorpusSource) -> Result<Vec<StudyRecord>, String> {
    match source {
        CorpusSource::Generate { spec, seed } => generate_corpus(spec, *seed).map_err(|e| e.to_string()),
        CorpusSource::File(p) => load_corpus(p).map_err(|e| e.to_string()),
    }
}

/// Copies of `records` carrying the rule engine's label (Rule provenance).
pub fn rule_label(records: &[StudyRecord], rules: &RuleSet) -> Vec<StudyRecord> {
    records
        .par_iter()
        .map(|r| {
            let decision = apply_rules(rules, &preprocess(&r.report_text));
            let mut out = r.clone();
            out.label = Some(AssignedLabel::rule(decision.label));
            out
        })
        .collect()
}

pub fn labels_of<'a, I>(records: I) -> Result<Vec<Label>, String>
where
    I: IntoIterator<Item = &'a StudyRecord>,
{
    records
        .into_iter()
        .map(|r| r.label.as_ref().map(|l| l.value).ok_or_else(|| format!("record {} is unlabeled", r.accession_id)))
        .collect()
}

pub fn featurize_all(space: &FeatureSpace, records: &[&StudyRecord]) -> Result<Vec<FeatureVector>, LearnError> {
    records.par_iter().map(|r| space.featurize(r)).collect()
}

/// Text labeler: vocabulary from `train` only, checkpointing on `val`.
pub fn train_labeler(
    train_set: &[&StudyRecord],
    val_set: &[&StudyRecord],
    config: &TrainConfig,
    min_df: usize,
) -> Result<(LinearSoftmaxModel, TrainLog), String> {
    let seqs: Vec<_> = train_set.par_iter().map(|r| preprocess(&r.report_text)).collect();
    let vocab = build_vocab(&seqs, min_df).map_err(|e| e.to_string())?;
    let train_x: Vec<FeatureVector> = seqs.iter().map(|s| featurize_text(s, &vocab)).collect();
    let space = FeatureSpace::Text { vocabulary: vocab };
    let val_x = featurize_all(&space, val_set).map_err(|e| e.to_string())?;
    let train_y = labels_of(train_set.iter().copied())?;
    let val_y = labels_of(val_set.iter().copied())?;
    train(space, Dataset::new(&train_x, &train_y), Dataset::new(&val_x, &val_y), config).map_err(|e| e.to_string())
}

pub fn predict_all(model: &LinearSoftmaxModel, features: &[FeatureVector]) -> Result<Vec<Probs>, LearnError> {
    features.iter().map(|x| predict_proba(model, x)).collect()
}

// ---- report ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub records: usize,
    pub accepted_by_filter: usize,
    pub rejected_by_filter: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub studies: BTreeMap<String, usize>,
    pub patients: BTreeMap<String, usize>,
    pub patients_removed_from_train_sec: usize,
    pub patients_removed_from_test: usize,
    pub patients_spanning_primary_secondary: usize,
    /// Rule-label counts (Normal, Abnormal, Arthroplasty) per labeled partition.
    pub rule_label_counts: BTreeMap<String, [usize; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelerSummary {
    pub val_eval: AucReport,
    pub learning_rate: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub vocabulary_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoSummary {
    pub distribution: [usize; 3],
    pub pseudo_count: usize,
    /// Rule-labeled primary-window studies (TRAIN_PRI + VAL_EVAL + VAL_PTEST).
    pub manual_count: usize,
    /// Rule-labeled studies the baseline image model trains on.
    pub train_pri_count: usize,
    /// pseudo_count / manual_count
    pub pseudo_per_manual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub learning_rate: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_eval_wauc: f64,
    pub val_ptest_wauc: f64,
    pub test: AucReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub baseline: ModelResult,
    pub augmented: ModelResult,
    /// Same-seed baseline vs augmented on TEST.
    pub test_comparison: Comparison,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAggregate {
    pub baseline: SeedAggregate,
    pub augmented: SeedAggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedSeeds {
    pub baseline: u64,
    pub augmented: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub version: String,
    pub corpus: CorpusSummary,
    pub split: SplitSummary,
    pub labeler: LabelerSummary,
    pub pseudo: PseudoSummary,
    pub seeds: Vec<SeedResult>,
    pub val_ptest_wauc: PairAggregate,
    pub test_wauc: PairAggregate,
    pub selected_seeds: SelectedSeeds,
    /// Selected baseline vs selected augmented model on TEST.
    pub comparison: Comparison,
    pub warnings: Vec<String>,
}

// ---- run ----

/// Runs every stage. With an output directory, artifacts are written as they
/// are produced; on failure they are kept and a `FAILED` marker names the stage.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, PipelineError> {
    config.validate()?;
    let out = config.out_dir.as_deref();
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(at(Stage::Output))?;
        let _ = fs::remove_file(dir.join(FAILED_MARKER));
    }
    let result = run_stages(config, out);
    if let (Err(e), Some(dir)) = (&result, out) {
        let _ = fs::write(dir.join(FAILED_MARKER), format!("{e}\n"));
    }
    result
}

struct Artifacts<'a> {
    dir: Option<&'a Path>,
}

impl Artifacts<'_> {
    fn path(&self, rel: &str) -> Option<PathBuf> {
        self.dir.map(|d| d.join(rel))
    }

    fn json<T: Serialize>(&self, rel: &str, value: &T) -> Result<(), PipelineError> {
        self.text(rel, &(serde_json::to_string_pretty(value).map_err(at(Stage::Output))? + "\n"))
    }

    fn text(&self, rel: &str, content: &str) -> Result<(), PipelineError> {
        if let Some(p) = self.path(rel) {
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent).map_err(at(Stage::Output))?;
            }
            fs::write(&p, content).map_err(|e| PipelineError::Stage {
                stage: Stage::Output,
                message: format!("{}: {e}", p.display()),
            })?;
        }
        Ok(())
    }
}

fn refs(rs: &[StudyRecord]) -> Vec<&StudyRecord> {
    rs.iter().collect()
}

fn count_labels(labels: &[Label]) -> [usize; 3] {
    let mut c = [0; 3];
    labels.iter().for_each(|l| c[l.index()] += 1);
    c
}

struct ImageRun {
    seed: u64,
    model: LinearSoftmaxModel,
    log: TrainLog,
}

fn run_stages(config: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentReport, PipelineError> {
    let art = Artifacts { dir: out };
    // the output directory is implied by where this file lives
    art.text("config.resolved", &ExperimentConfig { out_dir: None, ..config.clone() }.to_text())?;
    let mut warnings = Vec::new();

    // (1) corpus + series filter
    let raw = load_source(&config.source).map_err(at(Stage::Corpus))?;
    let corpus = filter_studies(&raw, &config.filter);
    let corpus_summary = CorpusSummary {
        records: raw.len(),
        accepted_by_filter: corpus.len(),
        rejected_by_filter: raw.len() - corpus.len(),
    };
    drop(raw);

    // (2) split
    let plan = split_by_date(&corpus, &config.boundaries, config.split_seed).map_err(at(Stage::Split))?;
    let violations = verify_plan(&corpus, &plan).map_err(at(Stage::Split))?;
    if let Some(v) = violations.first() {
        return Err(at(Stage::Split)(format!("plan failed verification: {v}")));
    }
    art.json("split_plan.json", &plan)?;
    for p in Partition::ALL {
        if plan.partition(p).is_empty() {
            return Err(at(Stage::Split)(format!("{p} is empty")));
        }
    }

    // (3) rule labels everywhere except TRAIN_SEC, which is stripped
    let rules = load_rules(config.rules_path.as_deref()).map_err(at(Stage::RuleLabel))?;
    let by_part = |p: Partition| -> Vec<StudyRecord> { plan.select(&corpus, p).into_iter().cloned().collect() };
    let train_pri = rule_label(&by_part(Partition::TrainPri), &rules);
    let val_eval = rule_label(&by_part(Partition::ValEval), &rules);
    let val_ptest = rule_label(&by_part(Partition::ValPtest), &rules);
    let test = rule_label(&by_part(Partition::Test), &rules);
    let mut train_sec = by_part(Partition::TrainSec);
    train_sec.iter_mut().for_each(|r| r.label = None);

    let labels = |rs: &[StudyRecord]| labels_of(rs).map_err(at(Stage::RuleLabel));
    let (y_pri, y_eval, y_ptest, y_test) = (labels(&train_pri)?, labels(&val_eval)?, labels(&val_ptest)?, labels(&test)?);
    let split_summary = summarize_split(&corpus, &plan, [&y_pri, &y_eval, &y_ptest, &y_test]);

    // (4) text labeler
    let (labeler, labeler_log) =
        train_labeler(&refs(&train_pri), &refs(&val_eval), &config.text, config.text_min_df).map_err(at(Stage::Labeler))?;
    art.json("labeler_model.json", &labeler)?;
    let eval_probs = featurize_all(&labeler.space, &refs(&val_eval))
        .and_then(|x| predict_all(&labeler, &x))
        .map_err(at(Stage::Labeler))?;
    let labeler_summary = LabelerSummary {
        val_eval: class_auc_report(&eval_probs, &y_eval).map_err(at(Stage::Labeler))?,
        learning_rate: labeler_log.best().learning_rate,
        best_epoch: labeler_log.best().best_epoch,
        epochs_run: labeler_log.best().epochs_run(),
        vocabulary_size: labeler.dim,
    };

    // (5) pseudo labels
    let train_sec = pseudo_label(&labeler, &train_sec).map_err(at(Stage::PseudoLabel))?;
    let y_sec = labels(&train_sec).map_err(|_| at(Stage::PseudoLabel)("unlabeled TRAIN_SEC record"))?;
    let mut pl = String::from("accession_id,label,p_normal,p_abnormal,p_arthroplasty\n");
    for r in &train_sec {
        let l = r.label.as_ref().expect("pseudo-labeled");
        let LabelProvenance::Pseudo { probs } = &l.provenance else {
            return Err(at(Stage::PseudoLabel)(format!("{} lacks pseudo provenance", r.accession_id)));
        };
        pl += &format!("{},{},{},{},{}\n", r.accession_id, l.value, probs[0], probs[1], probs[2]);
    }
    art.text("pseudo_labels.csv", &pl)?;
    let manual = train_pri.len() + val_eval.len() + val_ptest.len();
    let pseudo_summary = PseudoSummary {
        distribution: count_labels(&y_sec),
        pseudo_count: train_sec.len(),
        manual_count: manual,
        train_pri_count: train_pri.len(),
        pseudo_per_manual: train_sec.len() as f64 / manual as f64,
    };

    // (6) image models, baseline (TRAIN_PRI) and augmented (+ TRAIN_SEC), per seed
    let space = FeatureSpace::Image { grid: config.image_grid };
    let img = |rs: &[StudyRecord]| featurize_all(&space, &refs(rs)).map_err(at(Stage::ImageTraining));
    let (x_pri, x_sec, x_eval, x_ptest, x_test) =
        (img(&train_pri)?, img(&train_sec)?, img(&val_eval)?, img(&val_ptest)?, img(&test)?);
    let x_aug: Vec<FeatureVector> = x_pri.iter().chain(&x_sec).cloned().collect();
    let y_aug: Vec<Label> = y_pri.iter().chain(&y_sec).copied().collect();

    let runs: Vec<(ImageRun, ImageRun)> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let cfg = TrainConfig { seed, ..config.image.clone() };
            let fit = |x: &[FeatureVector], y: &[Label]| {
                train(space.clone(), Dataset::new(x, y), Dataset::new(&x_eval, &y_eval), &cfg)
                    .map(|(model, log)| ImageRun { seed, model, log })
            };
            Ok((fit(&x_pri, &y_pri)?, fit(&x_aug, &y_aug)?))
        })
        .collect::<Result<_, LearnError>>()
        .map_err(at(Stage::ImageTraining))?;
    let mut logs = BTreeMap::new();
    logs.insert("labeler".to_string(), labeler_log.clone());
    for (a, b) in &runs {
        art.json(&format!("models/baseline_seed{}.json", a.seed), &a.model)?;
        art.json(&format!("models/augmented_seed{}.json", b.seed), &b.model)?;
        logs.insert(format!("baseline_seed{}", a.seed), a.log.clone());
        logs.insert(format!("augmented_seed{}", b.seed), b.log.clone());
    }
    art.json("train_logs.json", &logs)?;

    // (7) per-seed evaluation and selection on VAL_PTEST
    let test_ids: Vec<&str> = test.iter().map(|r| r.accession_id.as_str()).collect();
    let evaluate_run = |run: &ImageRun| -> Result<(ModelResult, Vec<Probs>), PipelineError> {
        let stage = at(Stage::Selection);
        let report = |x: &[FeatureVector], y: &[Label]| -> Result<AucReport, String> {
            let p = predict_all(&run.model, x).map_err(|e| e.to_string())?;
            class_auc_report(&p, y).map_err(|e| e.to_string())
        };
        let val_eval_wauc = report(&x_eval, &y_eval).map_err(at(Stage::Selection))?.wauc;
        let val_ptest_wauc = report(&x_ptest, &y_ptest).map_err(stage)?.wauc;
        let test_probs = predict_all(&run.model, &x_test).map_err(at(Stage::Evaluation))?;
        let test_report = class_auc_report(&test_probs, &y_test).map_err(at(Stage::Evaluation))?;
        let best = run.log.best();
        Ok((
            ModelResult {
                learning_rate: best.learning_rate,
                best_epoch: best.best_epoch,
                epochs_run: best.epochs_run(),
                val_eval_wauc,
                val_ptest_wauc,
                test: test_report,
            },
            test_probs,
        ))
    };
    let mut seed_results = Vec::new();
    let mut test_scores = Vec::new();
    for (a, b) in &runs {
        let (ra, pa) = evaluate_run(a)?;
        let (rb, pb) = evaluate_run(b)?;
        let cmp = compare_models(&pa, &pb, &y_test).map_err(at(Stage::Evaluation))?;
        seed_results.push(SeedResult { seed: a.seed, baseline: ra, augmented: rb, test_comparison: cmp });
        test_scores.push((pa, pb));
    }
    let agg = |f: &dyn Fn(&SeedResult) -> f64| aggregate_seeds(&seed_results.iter().map(f).collect::<Vec<_>>());
    let val_ptest_wauc = PairAggregate {
        baseline: agg(&|s| s.baseline.val_ptest_wauc).map_err(at(Stage::Selection))?,
        augmented: agg(&|s| s.augmented.val_ptest_wauc).map_err(at(Stage::Selection))?,
    };
    let test_wauc = PairAggregate {
        baseline: agg(&|s| s.baseline.test.wauc).map_err(at(Stage::Selection))?,
        augmented: agg(&|s| s.augmented.test.wauc).map_err(at(Stage::Selection))?,
    };
    let pick = |f: &dyn Fn(&SeedResult) -> f64| {
        (0..seed_results.len()).fold(0, |best, i| if f(&seed_results[i]) > f(&seed_results[best]) { i } else { best })
    };
    let (ia, ib) = (pick(&|s| s.baseline.val_ptest_wauc), pick(&|s| s.augmented.val_ptest_wauc));
    let selected = SelectedSeeds { baseline: seed_results[ia].seed, augmented: seed_results[ib].seed };

    // (8) selected models on TEST; both score vectors come from the one TEST list
    let (pa, pb) = (&test_scores[ia].0, &test_scores[ib].1);
    if pa.len() != test_ids.len() || pb.len() != test_ids.len() {
        return Err(at(Stage::Evaluation)("baseline and augmented scores cover different TEST records"));
    }
    let comparison = compare_models(pa, pb, &y_test).map_err(at(Stage::Evaluation))?;
    warnings.extend(comparison.warnings.iter().cloned());
    write_test_outputs(&art, &test_ids, &y_test, pa, pb)?;

    // (9) report
    let report = ExperimentReport {
        config_hash: config.hash(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        corpus: corpus_summary,
        split: split_summary,
        labeler: labeler_summary,
        pseudo: pseudo_summary,
        seeds: seed_results,
        val_ptest_wauc,
        test_wauc,
        selected_seeds: selected,
        comparison,
        warnings,
    };
    art.json("report.json", &report)?;
    Ok(report)
}

fn summarize_split(corpus: &[StudyRecord], plan: &SplitPlan, labeled: [&[Label]; 4]) -> SplitSummary {
    let patient_of: HashMap<&str, &str> =
        corpus.iter().map(|r| (r.accession_id.as_str(), r.patient_id.as_str())).collect();
    let mut studies = BTreeMap::new();
    let mut patients = BTreeMap::new();
    for p in Partition::ALL {
        let ids = plan.partition(p);
        studies.insert(p.name().to_string(), ids.len());
        let distinct: BTreeSet<&str> = ids.iter().map(|id| patient_of[id.as_str()]).collect();
        patients.insert(p.name().to_string(), distinct.len());
    }
    let parts = [Partition::TrainPri, Partition::ValEval, Partition::ValPtest, Partition::Test];
    SplitSummary {
        studies,
        patients,
        patients_removed_from_train_sec: plan.removed_from_train_sec.len(),
        patients_removed_from_test: plan.removed_from_test.len(),
        patients_spanning_primary_secondary: plan.spanning_primary_secondary.len(),
        rule_label_counts: parts.iter().zip(labeled).map(|(p, y)| (p.name().to_string(), count_labels(y))).collect(),
    }
}

fn write_test_outputs(
    art: &Artifacts,
    ids: &[&str],
    truth: &[Label],
    baseline: &[Probs],
    augmented: &[Probs],
) -> Result<(), PipelineError> {
    if art.dir.is_none() {
        return Ok(());
    }
    let mut csv = String::from("accession_id,truth,baseline_normal,baseline_abnormal,baseline_arthroplasty,augmented_normal,augmented_abnormal,augmented_arthroplasty\n");
    for i in 0..ids.len() {
        let (a, b) = (baseline[i], augmented[i]);
        csv += &format!("{},{},{},{},{},{},{},{}\n", ids[i], truth[i], a[0], a[1], a[2], b[0], b[1], b[2]);
    }
    art.text("test_scores.csv", &csv)?;
    for (name, probs) in [("baseline", baseline), ("augmented", augmented)] {
        let sets = one_vs_rest(probs, truth).map_err(at(Stage::Evaluation))?;
        for label in Label::ALL {
            let Ok(points) = roc_curve(&sets[label.index()]) else { continue };
            let path = art.path(&format!("roc/{name}_{label}.csv")).expect("output dir set");
            fs::create_dir_all(path.parent().expect("has parent")).map_err(at(Stage::Output))?;
            let f = fs::File::create(&path).map_err(at(Stage::Output))?;
            let mut w = BufWriter::new(f);
            write_roc_csv(&points, &mut w).map_err(at(Stage::Output))?;
            w.flush().map_err(at(Stage::Output))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::GeneratorSpec;

    fn small(noise: f64, n: usize) -> ExperimentConfig {
        let spec = GeneratorSpec { n_records: n, noise_rate: noise, ..Default::default() };
        ExperimentConfig {
            source: CorpusSource::Generate { spec: Box::new(spec), seed: 3 },
            text: TrainConfig { max_epochs: 40, ..TrainConfig::text_default() },
            image: TrainConfig { max_epochs: 30, ..TrainConfig::image_default() },
            seeds: vec![0, 1],
            ..Default::default()
        }
    }

    #[test]
    fn small_run_writes_everything_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { out_dir: Some(dir.path().join("a")), ..small(0.05, 1500) };
        let r1 = run_experiment(&cfg).unwrap();
        let cfg2 = ExperimentConfig { out_dir: Some(dir.path().join("b")), ..cfg.clone() };
        let r2 = run_experiment(&cfg2).unwrap();
        assert_eq!(r1, r2);
        for f in ["report.json", "split_plan.json", "labeler_model.json", "pseudo_labels.csv", "test_scores.csv",
                  "train_logs.json", "config.resolved", "roc/baseline_normal.csv", "models/augmented_seed1.json"] {
            let a = fs::read(dir.path().join("a").join(f)).unwrap();
            let b = fs::read(dir.path().join("b").join(f)).unwrap();
            assert!(a == b, "{f} differs");
        }
        assert!(!dir.path().join("a").join(FAILED_MARKER).exists());
        assert_eq!(r1.seeds.len(), 2);
        assert_eq!(r1.pseudo.pseudo_count, r1.split.studies["TRAIN_SEC"]);
        assert_eq!(r1.pseudo.train_pri_count, r1.split.studies["TRAIN_PRI"]);
        assert_eq!(
            r1.pseudo.manual_count,
            r1.split.studies["TRAIN_PRI"] + r1.split.studies["VAL_EVAL"] + r1.split.studies["VAL_PTEST"]
        );
        assert!(r1.labeler.val_eval.wauc > 0.9);
    }

    #[test]
    fn failure_leaves_marker_with_stage() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            source: CorpusSource::File(dir.path().join("missing.jsonl")),
            out_dir: Some(dir.path().join("out")),
            ..Default::default()
        };
        let err = run_experiment(&cfg).unwrap_err();
        assert_eq!(err.stage(), Some(Stage::Corpus));
        let marker = fs::read_to_string(dir.path().join("out").join(FAILED_MARKER)).unwrap();
        assert!(marker.starts_with("corpus stage"));
        assert!(dir.path().join("out/config.resolved").exists());
    }

    #[test]
    fn empty_partition_is_split_error() {
        // every study falls in the primary window
        let mut cfg = small(0.05, 200);
        if let CorpusSource::Generate { spec, .. } = &mut cfg.source {
            spec.date_range.1 = chrono::NaiveDate::from_ymd_opt(2019, 2, 1).unwrap();
        }
        assert_eq!(run_experiment(&cfg).unwrap_err().stage(), Some(Stage::Split));
    }

    #[test]
    fn invalid_config_is_not_a_stage_error() {
        let cfg = ExperimentConfig { seeds: vec![], ..Default::default() };
        assert!(matches!(run_experiment(&cfg), Err(PipelineError::Config(_))));
    }
}
