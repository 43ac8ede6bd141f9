//! `weaklabel`: command-line access to each pipeline stage and the full experiment.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.

use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use weaklabel_core::corpus::{generate_corpus, load_corpus, save_corpus};
use weaklabel_core::learncore::{train, Dataset, FeatureSpace, LinearSoftmaxModel, TrainConfig};
use weaklabel_core::learncore::pseudo_label;
use weaklabel_core::metrics::{class_auc_report, delong_test, one_vs_rest, roc_curve, write_roc_csv, MetricsError};
use weaklabel_core::pipeline::{
    featurize_all, labels_of, load_rules, predict_all, rule_label, run_experiment, train_labeler, CorpusSource,
    ExperimentConfig, PipelineError,
};
use weaklabel_core::rulelab::apply_rules;
use weaklabel_core::splitter::{split_by_date, verify_plan, Partition, SplitPlan};
use weaklabel_core::textprep::{extract_sections, preprocess};
use weaklabel_core::StudyRecord;

#[derive(Parser, Debug)]
#[command(name = "weaklabel", version, about = "Weak-supervision pipeline for knee radiograph reports")]
struct Cli {
    /// Random seed for the stage (overrides the config's seed where one applies).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment config (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus to corpus.jsonl.
    Generate {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Split a corpus by study date; writes split_plan.json.
    Split {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Section extraction, cleaning and tokenization; writes tokens.jsonl.
    Preprocess {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Rule engine operations.
    Rules {
        #[command(subcommand)]
        action: RulesAction,
    },
    /// Train the report labeler on TRAIN_PRI, checkpointing on VAL_EVAL.
    TrainLabeler {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        plan: PathBuf,
    },
    /// Pseudo-label TRAIN_SEC with a trained labeler.
    PseudoLabel {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Train an image model on TRAIN_PRI (or TRAIN_PRI + TRAIN_SEC with --augmented).
    TrainImage {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        augmented: bool,
    },
    /// Score a partition with a model; writes per-class AUCs, scores and ROC curves.
    Evaluate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "test")]
        partition: String,
    },
    /// DeLong test on a CSV with header `label,score_a,score_b` (label 0/1).
    Delong {
        #[arg(long)]
        scores: PathBuf,
    },
    /// Full experiment.
    Run,
}

#[derive(Subcommand, Debug)]
enum RulesAction {
    /// Rule-label a corpus; with --plan, TRAIN_SEC is left unlabeled.
    Apply {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(long)]
        plan: Option<PathBuf>,
    },
}

enum Failure {
    Validation(String),
    Runtime(String),
}

fn invalid(e: impl Display) -> Failure {
    Failure::Validation(e.to_string())
}

fn runtime(e: impl Display) -> Failure {
    Failure::Runtime(e.to_string())
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: &Cli) -> Outcome {
    let config = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
            ExperimentConfig::parse(&text).map_err(|e| invalid(format!("{}: {e}", p.display())))?
        }
        None => ExperimentConfig::default(),
    };
    let out = cli.out.clone().or_else(|| config.out_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
    match &cli.command {
        Command::Run => run(cli, config, out),
        cmd => {
            fs::create_dir_all(&out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
            stage(cli, cmd, &config, &out)
        }
    }
}

fn stage(cli: &Cli, cmd: &Command, config: &ExperimentConfig, out: &Path) -> Outcome {
    match cmd {
        Command::Generate { n, noise } => {
            let (mut spec, seed) = match &config.source {
                CorpusSource::Generate { spec, seed } => ((**spec).clone(), *seed),
                CorpusSource::File(_) => return Err(invalid("config names a corpus file; nothing to generate")),
            };
            if let Some(n) = n {
                spec.n_records = *n;
            }
            if let Some(r) = noise {
                spec.noise_rate = *r;
            }
            let records = generate_corpus(&spec, cli.seed.unwrap_or(seed)).map_err(invalid)?;
            let path = out.join("corpus.jsonl");
            save_corpus(&records, &path).map_err(runtime)?;
            println!("wrote {} records to {}", records.len(), path.display());
            Ok(())
        }
        Command::Split { corpus } => {
            let records = read(corpus)?;
            let plan = split_by_date(&records, &config.boundaries, cli.seed.unwrap_or(config.split_seed)).map_err(invalid)?;
            let violations = verify_plan(&records, &plan).map_err(runtime)?;
            write_json(&out.join("split_plan.json"), &plan)?;
            for p in Partition::ALL {
                println!("{:<10} {:>6} studies", p.name(), plan.partition(p).len());
            }
            println!(
                "removed patients: {} from TRAIN_SEC, {} from TEST",
                plan.removed_from_train_sec.len(),
                plan.removed_from_test.len()
            );
            if let Some(v) = violations.first() {
                return Err(runtime(format!("plan failed verification: {v}")));
            }
            Ok(())
        }
        Command::Preprocess { corpus } => {
            let records = read(corpus)?;
            let mut lines = String::new();
            let mut truncated = 0;
            for r in &records {
                let t = preprocess(&r.report_text);
                truncated += usize::from(t.truncated);
                let v = json!({
                    "accession_id": r.accession_id,
                    "tokens": t.tokens,
                    "truncated": t.truncated,
                    "used_fallback": extract_sections(&r.report_text).used_fallback,
                });
                lines += &(v.to_string() + "\n");
            }
            write_text(&out.join("tokens.jsonl"), &lines)?;
            println!("preprocessed {} reports ({} truncated)", records.len(), truncated);
            Ok(())
        }
        Command::Rules { action: RulesAction::Apply { corpus, rules, plan } } => {
            let records = read(corpus)?;
            let rule_path = rules.clone().or_else(|| config.rules_path.clone());
            let rules = load_rules(rule_path.as_deref()).map_err(invalid)?;
            let secondary: std::collections::HashSet<String> = match plan {
                Some(p) => read_plan(p)?.train_sec.into_iter().collect(),
                None => Default::default(),
            };
            let (mut labeled, mut decisions) = (Vec::new(), String::new());
            let mut counts = [0usize; 3];
            for r in &records {
                if secondary.contains(&r.accession_id) {
                    let mut u = r.clone();
                    u.label = None;
                    labeled.push(u);
                    continue;
                }
                let d = apply_rules(&rules, &preprocess(&r.report_text));
                counts[d.label.index()] += 1;
                decisions += &(json!({
                    "accession_id": r.accession_id,
                    "label": d.label,
                    "matched_categories": d.matched_categories,
                })
                .to_string()
                    + "\n");
                labeled.extend(rule_label(std::slice::from_ref(r), &rules));
            }
            save_corpus(&labeled, &out.join("rule_labeled.jsonl")).map_err(runtime)?;
            write_text(&out.join("rule_decisions.jsonl"), &decisions)?;
            println!("rule labels: normal {} abnormal {} arthroplasty {}", counts[0], counts[1], counts[2]);
            Ok(())
        }
        Command::TrainLabeler { corpus, plan } => {
            let records = read(corpus)?;
            let plan = read_plan(plan)?;
            let cfg = TrainConfig { seed: cli.seed.unwrap_or(config.text.seed), ..config.text.clone() };
            let train_set = plan.select(&records, Partition::TrainPri);
            let val_set = plan.select(&records, Partition::ValEval);
            let (model, log) = train_labeler(&train_set, &val_set, &cfg, config.text_min_df).map_err(runtime)?;
            model.save(&out.join("labeler_model.json")).map_err(runtime)?;
            write_json(&out.join("labeler_log.json"), &log)?;
            let best = log.best();
            println!(
                "labeler: val WAUC {:.4} at epoch {} (lr {}, {} features)",
                best.best_value, best.best_epoch, best.learning_rate, model.dim
            );
            Ok(())
        }
        Command::PseudoLabel { corpus, plan, model } => {
            let records = read(corpus)?;
            let plan = read_plan(plan)?;
            let model = LinearSoftmaxModel::load(model).map_err(runtime)?;
            let secondary: Vec<StudyRecord> = plan.select(&records, Partition::TrainSec).into_iter().cloned().collect();
            let labeled = pseudo_label(&model, &secondary).map_err(invalid)?;
            let by_id: std::collections::HashMap<&str, &StudyRecord> =
                labeled.iter().map(|r| (r.accession_id.as_str(), r)).collect();
            let merged: Vec<StudyRecord> = records
                .iter()
                .map(|r| by_id.get(r.accession_id.as_str()).map_or_else(|| r.clone(), |&p| p.clone()))
                .collect();
            save_corpus(&merged, &out.join("pseudo_labeled.jsonl")).map_err(runtime)?;
            let y = labels_of(labeled.iter()).map_err(runtime)?;
            let mut counts = [0usize; 3];
            y.iter().for_each(|l| counts[l.index()] += 1);
            println!(
                "pseudo-labeled {} TRAIN_SEC studies: normal {} abnormal {} arthroplasty {}",
                labeled.len(),
                counts[0],
                counts[1],
                counts[2]
            );
            Ok(())
        }
        Command::TrainImage { corpus, plan, augmented } => {
            let records = read(corpus)?;
            let plan = read_plan(plan)?;
            let seed = cli.seed.unwrap_or(config.image.seed);
            let cfg = TrainConfig { seed, ..config.image.clone() };
            let mut train_set = plan.select(&records, Partition::TrainPri);
            if *augmented {
                train_set.extend(plan.select(&records, Partition::TrainSec));
            }
            let val_set = plan.select(&records, Partition::ValEval);
            let space = FeatureSpace::Image { grid: config.image_grid };
            let x = featurize_all(&space, &train_set).map_err(runtime)?;
            let vx = featurize_all(&space, &val_set).map_err(runtime)?;
            let y = labels_of(train_set.iter().copied()).map_err(invalid)?;
            let vy = labels_of(val_set.iter().copied()).map_err(invalid)?;
            let (model, log) = train(space, Dataset::new(&x, &y), Dataset::new(&vx, &vy), &cfg).map_err(runtime)?;
            let name = format!("image_{}_seed{seed}", if *augmented { "augmented" } else { "baseline" });
            model.save(&out.join(format!("{name}.json"))).map_err(runtime)?;
            write_json(&out.join(format!("{name}_log.json")), &log)?;
            println!("{name}: {} training studies, val WAUC {:.4}", x.len(), log.best().best_value);
            Ok(())
        }
        Command::Evaluate { corpus, plan, model, partition } => {
            let part = parse_partition(partition)?;
            let records = read(corpus)?;
            let plan = read_plan(plan)?;
            let model_file = model;
            let model = LinearSoftmaxModel::load(model_file).map_err(runtime)?;
            let set = plan.select(&records, part);
            let y = labels_of(set.iter().copied()).map_err(invalid)?;
            let x = featurize_all(&model.space, &set).map_err(runtime)?;
            let probs = predict_all(&model, &x).map_err(runtime)?;
            let report = class_auc_report(&probs, &y).map_err(invalid)?;
            let stem = model_file.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
            let prefix = format!("{stem}_{}", part.name().to_lowercase());
            write_json(&out.join(format!("{prefix}_auc.json")), &report)?;
            let mut csv = String::from("accession_id,truth,p_normal,p_abnormal,p_arthroplasty\n");
            for ((r, l), p) in set.iter().zip(&y).zip(&probs) {
                csv += &format!("{},{},{},{},{}\n", r.accession_id, l, p[0], p[1], p[2]);
            }
            write_text(&out.join(format!("{prefix}_scores.csv")), &csv)?;
            let sets = one_vs_rest(&probs, &y).map_err(invalid)?;
            for label in weaklabel_core::Label::ALL {
                if let Ok(points) = roc_curve(&sets[label.index()]) {
                    let mut buf = Vec::new();
                    write_roc_csv(&points, &mut buf).map_err(runtime)?;
                    write_bytes(&out.join(format!("{prefix}_roc_{label}.csv")), &buf)?;
                }
                match report.auc(label) {
                    Some(a) => println!("AUC {label:<13} {a:.4}"),
                    None => println!("AUC {label:<13} undefined (class absent)"),
                }
            }
            println!("WAUC {:.4}", report.wauc);
            Ok(())
        }
        Command::Delong { scores } => {
            let text = fs::read_to_string(scores).map_err(|e| runtime(format!("{}: {e}", scores.display())))?;
            let (labels, a, b) = parse_scores(&text).map_err(invalid)?;
            let res = delong_test(&a, &b, &labels).map_err(|e| match e {
                MetricsError::InsufficientClasses { .. } => invalid(format!("{e}; the DeLong test needs both classes present")),
                other => invalid(other),
            })?;
            write_json(&out.join("delong.json"), &res)?;
            println!(
                "AUC a {:.4}  AUC b {:.4}  z {:.4}  p {:.4}",
                res.auc_a, res.auc_b, res.z, res.p_two_sided
            );
            Ok(())
        }
        Command::Run => unreachable!("handled by dispatch"),
    }
}

fn run(cli: &Cli, mut config: ExperimentConfig, out: PathBuf) -> Outcome {
    config.out_dir = Some(out.clone());
    if let (Some(s), CorpusSource::Generate { seed, .. }) = (cli.seed, &mut config.source) {
        *seed = s;
    }
    let report = run_experiment(&config).map_err(|e| match e {
        PipelineError::Config(c) => invalid(c),
        other => runtime(other),
    })?;
    let c = &report.comparison;
    println!("labeler VAL_EVAL WAUC {:.4}", report.labeler.val_eval.wauc);
    println!(
        "pseudo:manual = {}:{} ({:.2} per manual study)",
        report.pseudo.pseudo_count, report.pseudo.manual_count, report.pseudo.pseudo_per_manual
    );
    println!(
        "selected seeds: baseline {}, augmented {}",
        report.selected_seeds.baseline, report.selected_seeds.augmented
    );
    println!("{:<13} {:>9} {:>9} {:>8} {:>8}", "TEST", "baseline", "augmented", "delta", "p");
    for cc in &c.per_class {
        let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.3}"));
        let p = cc.delong.as_ref().map(|d| d.p_two_sided);
        println!(
            "{:<13} {:>9} {:>9} {:>8} {:>8}",
            cc.label.to_string(),
            f(cc.auc_baseline),
            f(cc.auc_augmented),
            cc.reported_delta.map_or("-".into(), |d| format!("{d:+.3}")),
            p.map_or("-".into(), |v| format!("{v:.4}"))
        );
    }
    println!(
        "{:<13} {:>9.3} {:>9.3} {:>+8.3}",
        "WAUC",
        c.baseline.wauc,
        c.augmented.wauc,
        c.reported_wauc_delta
    );
    for w in &report.warnings {
        println!("warning: {w}");
    }
    println!("report written to {}", out.join("report.json").display());
    Ok(())
}

fn read(path: &Path) -> Result<Vec<StudyRecord>, Failure> {
    load_corpus(path).map_err(runtime)
}

fn read_plan(path: &Path) -> Result<SplitPlan, Failure> {
    let text = fs::read_to_string(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn parse_partition(s: &str) -> Result<Partition, Failure> {
    Partition::ALL
        .into_iter()
        .find(|p| p.name().eq_ignore_ascii_case(s))
        .ok_or_else(|| invalid(format!("unknown partition `{s}`")))
}

fn parse_scores(text: &str) -> Result<(Vec<bool>, Vec<f64>, Vec<f64>), String> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.replace(' ', "") == "label,score_a,score_b" => {}
        _ => return Err("scores file must start with the header `label,score_a,score_b`".into()),
    }
    let (mut labels, mut a, mut b) = (Vec::new(), Vec::new(), Vec::new());
    for (i, line) in lines {
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || format!("scores line {}: expected `0|1,score,score`", i + 1);
        if cols.len() != 3 {
            return Err(bad());
        }
        labels.push(match cols[0] {
            "1" | "true" => true,
            "0" | "false" => false,
            _ => return Err(bad()),
        });
        a.push(cols[1].parse().map_err(|_| bad())?);
        b.push(cols[2].parse().map_err(|_| bad())?);
    }
    Ok((labels, a, b))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Outcome {
    fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Outcome {
    write_bytes(path, text.as_bytes())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    write_text(path, &(text + "\n"))
}
