//! Weak-supervision toolkit for radiograph classification.
//!
//! A small manually labeled set of reports is labeled by a rule engine, a
//! text classifier trained on it pseudo-labels a much larger unlabeled set,
//! and image classifiers trained with and without the pseudo-labeled data
//! are compared with per-class AUC, weighted AUC and DeLong tests.
//!
//! Modules, bottom-up:
//!
//! * [`corpus`]: study records, label types, acquisition filtering, the
//!   deterministic synthetic generator and JSON Lines persistence.
//! * [`splitter`]: date-windowed five-way split with patient leakage removal.
//! * [`textprep`]: report section extraction, cleaning and tokenization.
//! * [`rulelab`]: the rule-config language and rule-based labeling.
//! * [`learncore`]: features, the linear-softmax model, ADAM, early-stopping
//!   training and pseudo-labeling.
//! * [`metrics`]: ROC/AUC, weighted AUC, seed aggregation and DeLong tests.
//! * [`pipeline`]: the end-to-end experiment and its configuration format.

pub mod corpus;
pub mod learncore;
pub mod metrics;
pub mod pipeline;
pub mod rulelab;
pub mod splitter;
pub mod textprep;

pub use corpus::{AssignedLabel, Label, LabelProvenance, Probs, StudyRecord};
