//! Rule-based report labeling.
//!
//! A [`RuleSet`] is parsed from a small line-oriented language:
//!
//! ```text
//! # comment
//! negation_cue denies
//! category arthroplasty
//! pattern total knee arthroplasty
//! category fractures
//! pattern neg fracture
//! ```
//!
//! `category <name>` opens a category (`arthroplasty` is reserved),
//! `pattern [neg] <tok>...` adds a 1-5 token phrase to the open category and
//! `negation_cue <tok>` extends the default cues. A negatable pattern is
//! suppressed when a cue occurs among the three tokens before it.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;
use crate::textprep::TokenSeq;

pub const ARTHROPLASTY: &str = "arthroplasty";
pub const NEGATION_WINDOW: usize = 3;
pub const MAX_PHRASE_TOKENS: usize = 5;
pub const DEFAULT_NEGATION_CUES: [&str; 4] = ["no", "without", "negative", "unremarkable"];

/// The bundled rule configuration.
pub const DEFAULT_RULES: &str = include_str!("../rules/default.rules");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RuleError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid rule set: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pattern {
    phrase: Vec<String>,
    negatable: bool,
}

fn is_rule_token(tok: &str) -> bool {
    !tok.is_empty() && tok.chars().all(|c| c.is_ascii_lowercase())
}

impl Pattern {
    pub fn new<I, S>(phrase: I, negatable: bool) -> Result<Self, RuleError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let phrase: Vec<String> = phrase.into_iter().map(Into::into).collect();
        if phrase.is_empty() {
            return Err(RuleError::Validation("empty phrase".into()));
        }
        if phrase.len() > MAX_PHRASE_TOKENS {
            return Err(RuleError::Validation(format!(
                "phrase `{}` has more than {MAX_PHRASE_TOKENS} tokens",
                phrase.join(" ")
            )));
        }
        if let Some(bad) = phrase.iter().find(|t| !is_rule_token(t)) {
            return Err(RuleError::Validation(format!("token `{bad}` is not lowercase alphabetic")));
        }
        Ok(Self { phrase, negatable })
    }

    pub fn phrase(&self) -> &[String] {
        &self.phrase
    }

    pub fn negatable(&self) -> bool {
        self.negatable
    }

    /// Offsets at which this pattern matches `tokens`.
    fn matches(&self, tokens: &[String], cues: &[String]) -> Vec<usize> {
        let n = self.phrase.len();
        if tokens.len() < n {
            return Vec::new();
        }
        (0..=tokens.len() - n)
            .filter(|&i| tokens[i..i + n] == self.phrase[..])
            .filter(|&i| {
                !self.negatable
                    || !tokens[i.saturating_sub(NEGATION_WINDOW)..i].iter().any(|t| cues.contains(t))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    arthroplasty_patterns: Vec<Pattern>,
    abnormal_categories: Vec<(String, Vec<Pattern>)>,
    negation_cues: Vec<String>,
}

impl RuleSet {
    /// Build and validate a rule set; the default negation cues are always included.
    pub fn new(
        arthroplasty_patterns: Vec<Pattern>,
        abnormal_categories: Vec<(String, Vec<Pattern>)>,
        extra_cues: impl IntoIterator<Item = String>,
    ) -> Result<Self, RuleError> {
        let mut negation_cues: Vec<String> =
            DEFAULT_NEGATION_CUES.iter().map(|c| c.to_string()).collect();
        for cue in extra_cues {
            if !is_rule_token(&cue) {
                return Err(RuleError::Validation(format!("negation cue `{cue}` is not a token")));
            }
            if !negation_cues.contains(&cue) {
                negation_cues.push(cue);
            }
        }
        let rules = Self { arthroplasty_patterns, abnormal_categories, negation_cues };
        rules.validate()?;
        Ok(rules)
    }

    fn validate(&self) -> Result<(), RuleError> {
        if self.arthroplasty_patterns.is_empty() {
            return Err(RuleError::Validation("no arthroplasty pattern".into()));
        }
        if self.abnormal_categories.is_empty() {
            return Err(RuleError::Validation("no abnormal category".into()));
        }
        let mut seen = BTreeSet::new();
        for (name, _) in &self.abnormal_categories {
            if name == ARTHROPLASTY {
                return Err(RuleError::Validation("`arthroplasty` is a reserved category".into()));
            }
            if !seen.insert(name) {
                return Err(RuleError::Validation(format!("duplicate category `{name}`")));
            }
        }
        Ok(())
    }

    pub fn arthroplasty_patterns(&self) -> &[Pattern] {
        &self.arthroplasty_patterns
    }

    pub fn abnormal_categories(&self) -> &[(String, Vec<Pattern>)] {
        &self.abnormal_categories
    }

    pub fn negation_cues(&self) -> &[String] {
        &self.negation_cues
    }

    /// Append a pattern to an existing abnormal category.
    pub fn add_abnormal_pattern(&mut self, category: &str, pattern: Pattern) -> Result<(), RuleError> {
        let (_, patterns) = self
            .abnormal_categories
            .iter_mut()
            .find(|(name, _)| name == category)
            .ok_or_else(|| RuleError::Validation(format!("unknown category `{category}`")))?;
        patterns.push(pattern);
        Ok(())
    }

    /// The bundled rule set.
    pub fn bundled() -> Self {
        parse_ruleset(DEFAULT_RULES).expect("bundled rules parse")
    }

    /// Canonical text form; `parse_ruleset(&r.serialize()) == r`.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for cue in &self.negation_cues {
            let _ = writeln!(out, "negation_cue {cue}");
        }
        let categories = std::iter::once((ARTHROPLASTY, &self.arthroplasty_patterns))
            .chain(self.abnormal_categories.iter().map(|(n, p)| (n.as_str(), p)));
        for (name, patterns) in categories {
            let _ = writeln!(out, "\ncategory {name}");
            for p in patterns {
                let neg = if p.negatable { "neg " } else { "" };
                let _ = writeln!(out, "pattern {neg}{}", p.phrase.join(" "));
            }
        }
        out
    }
}

pub fn parse_ruleset(config_text: &str) -> Result<RuleSet, RuleError> {
    enum Open {
        None,
        Arthroplasty,
        Abnormal(usize),
    }

    let mut arthroplasty: Option<Vec<Pattern>> = None;
    let mut categories: Vec<(String, Vec<Pattern>)> = Vec::new();
    let mut cues = Vec::new();
    let mut open = Open::None;

    for (idx, raw) in config_text.lines().enumerate() {
        let line = idx + 1;
        let err = |message: String| RuleError::Parse { line, message };
        let content = raw.split('#').next().unwrap_or("");
        let mut words = content.split_whitespace();
        let Some(directive) = words.next() else { continue };
        let args: Vec<&str> = words.collect();
        match directive {
            "category" => {
                let name = args.join(" ");
                if name.is_empty() {
                    return Err(err("category without a name".into()));
                }
                if name == ARTHROPLASTY {
                    if arthroplasty.is_some() {
                        return Err(err(format!("duplicate category `{name}`")));
                    }
                    arthroplasty = Some(Vec::new());
                    open = Open::Arthroplasty;
                } else {
                    if categories.iter().any(|(n, _)| *n == name) {
                        return Err(err(format!("duplicate category `{name}`")));
                    }
                    categories.push((name, Vec::new()));
                    open = Open::Abnormal(categories.len() - 1);
                }
            }
            "pattern" => {
                let (negatable, phrase) = match args.split_first() {
                    Some((&"neg", rest)) => (true, rest),
                    _ => (false, &args[..]),
                };
                if phrase.is_empty() {
                    return Err(err("empty phrase".into()));
                }
                let pattern = Pattern::new(phrase.iter().copied(), negatable).map_err(|e| match e {
                    RuleError::Validation(m) | RuleError::Parse { message: m, .. } => err(m),
                })?;
                match open {
                    Open::None => return Err(err("pattern before any category".into())),
                    Open::Arthroplasty => {
                        arthroplasty.as_mut().expect("open arthroplasty").push(pattern)
                    }
                    Open::Abnormal(i) => categories[i].1.push(pattern),
                }
            }
            "negation_cue" => match args.as_slice() {
                [cue] if is_rule_token(cue) => cues.push(cue.to_string()),
                _ => return Err(err("negation_cue takes one lowercase token".into())),
            },
            other => return Err(err(format!("unknown directive `{other}`"))),
        }
    }
    RuleSet::new(arthroplasty.unwrap_or_default(), categories, cues)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternMatch {
    pub category: String,
    pub phrase: String,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelDecision {
    pub label: Label,
    pub matched_categories: BTreeSet<String>,
    /// Every unsuppressed match, sorted by token offset.
    pub matched_patterns: Vec<PatternMatch>,
}

/// Label a tokenized report. Arthroplasty takes precedence over abnormal findings.
pub fn apply_rules(rules: &RuleSet, tokens: &TokenSeq) -> LabelDecision {
    let toks = &tokens.tokens;
    let cues = &rules.negation_cues;
    let mut matched_patterns = Vec::new();
    let mut matched_categories = BTreeSet::new();

    let categories = std::iter::once((ARTHROPLASTY, &rules.arthroplasty_patterns))
        .chain(rules.abnormal_categories.iter().map(|(n, p)| (n.as_str(), p)));
    for (name, patterns) in categories {
        for pattern in patterns {
            for offset in pattern.matches(toks, cues) {
                matched_categories.insert(name.to_string());
                matched_patterns.push(PatternMatch {
                    category: name.to_string(),
                    phrase: pattern.phrase.join(" "),
                    offset,
                });
            }
        }
    }
    matched_patterns.sort_by_key(|m| m.offset);

    let label = if matched_categories.contains(ARTHROPLASTY) {
        Label::Arthroplasty
    } else if matched_categories.is_empty() {
        Label::Normal
    } else {
        Label::Abnormal
    };
    LabelDecision { label, matched_categories, matched_patterns }
}
