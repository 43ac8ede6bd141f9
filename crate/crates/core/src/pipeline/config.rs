//! Line-oriented `key = value` experiment configuration.
//!
//! Every key is optional; absent keys take their defaults. `to_text` writes
//! the complete resolved configuration, which is also what gets hashed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use chrono::NaiveDate;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{GeneratorSpec, Label, SeriesFilter};
use crate::learncore::{SelectionMetric, TrainConfig};
use crate::splitter::{DateWindow, SplitBoundaries};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("config line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("config line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("config line {line}: key `{key}` given twice")]
    DuplicateKey { line: usize, key: String },
    #[error("config line {line}: bad value for `{key}`: {message}")]
    BadValue { line: usize, key: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum CorpusSource {
    Generate { spec: Box<GeneratorSpec>, seed: u64 },
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub source: CorpusSource,
    pub filter: SeriesFilter,
    pub boundaries: SplitBoundaries,
    pub split_seed: u64,
    /// `None` uses the bundled rules.
    pub rules_path: Option<PathBuf>,
    pub text: TrainConfig,
    pub text_min_df: usize,
    pub image: TrainConfig,
    pub image_grid: (usize, usize),
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: CorpusSource::Generate { spec: Box::default(), seed: 7 },
            filter: SeriesFilter::default(),
            boundaries: SplitBoundaries::default(),
            split_seed: 0,
            rules_path: None,
            text: TrainConfig::text_default(),
            text_min_df: 2,
            image: TrainConfig::image_default(),
            image_grid: (16, 16),
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.seeds.is_empty() {
            return invalid("seeds must not be empty".into());
        }
        let distinct: BTreeSet<_> = self.seeds.iter().collect();
        if distinct.len() != self.seeds.len() {
            return invalid(format!("seeds {:?} are not distinct", self.seeds));
        }
        if let CorpusSource::Generate { spec, .. } = &self.source {
            spec.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            let (r, c) = spec.image_size;
            if self.image_grid.0 > r || self.image_grid.1 > c {
                return invalid(format!("image grid {:?} exceeds image size {:?}", self.image_grid, spec.image_size));
            }
        }
        if self.image_grid.0 == 0 || self.image_grid.1 == 0 {
            return invalid("image grid has a zero dimension".into());
        }
        self.boundaries.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.text.validate().map_err(|e| ConfigError::Invalid(format!("text: {e}")))?;
        self.image.validate().map_err(|e| ConfigError::Invalid(format!("image: {e}")))?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = Entries::read(text)?;
        let mut cfg = Self::default();

        let corpus_path: Option<PathBuf> = entries.take("corpus.path")?;
        let mut spec = GeneratorSpec::default();
        let mut corpus_seed = 7;
        entries.set("corpus.seed", &mut corpus_seed)?;
        entries.set("generator.n_records", &mut spec.n_records)?;
        if let Some(v) = entries.take_with("generator.label_proportions", parse_triple)? {
            spec.label_proportions = v;
        }
        entries.set("generator.noise_rate", &mut spec.noise_rate)?;
        entries.set("generator.date_start", &mut spec.date_range.0)?;
        entries.set("generator.date_end", &mut spec.date_range.1)?;
        if let Some(v) = entries.take_with("generator.image_size", parse_size)? {
            spec.image_size = v;
        }
        entries.set("generator.repeat_study_rate", &mut spec.repeat_study_rate)?;
        entries.set("generator.repeat_gap_days", &mut spec.repeat_gap_days)?;
        entries.set("generator.off_protocol_rate", &mut spec.off_protocol_rate)?;
        entries.set("generator.pixel_noise_sd", &mut spec.background.noise_sd)?;
        for label in [Label::Abnormal, Label::Arthroplasty] {
            let key = format!("generator.{}_intensity", label.as_str());
            entries.set(&key, &mut spec.image_signals[label.index()].intensity)?;
        }
        cfg.source = match corpus_path {
            Some(p) => CorpusSource::File(p),
            None => CorpusSource::Generate { spec: Box::new(spec), seed: corpus_seed },
        };

        let modalities: Option<Vec<String>> = entries.take_with("filter.modalities", parse_list)?;
        let series: Option<Vec<String>> = entries.take_with("filter.series", parse_list)?;
        if modalities.is_some() || series.is_some() {
            let m = modalities.unwrap_or_else(|| cfg.filter.allowed_modalities().iter().cloned().collect());
            let s = series.unwrap_or_else(|| cfg.filter.allowed_series().iter().cloned().collect());
            cfg.filter = SeriesFilter::new(m, s).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }

        let b = &mut cfg.boundaries;
        for (key, w) in [
            ("split.primary", &mut b.primary_window),
            ("split.secondary", &mut b.secondary_window),
            ("split.test", &mut b.test_window),
        ] {
            if let Some(v) = entries.take_with(key, parse_window)? {
                *w = v;
            }
        }
        if let Some(v) = entries.take_with("split.ratios", parse_triple)? {
            b.primary_ratios = v;
        }
        entries.set("split.seed", &mut cfg.split_seed)?;
        cfg.rules_path = entries.take("rules.path")?;

        read_train("text", &mut entries, &mut cfg.text)?;
        entries.set("text.min_df", &mut cfg.text_min_df)?;
        read_train("image", &mut entries, &mut cfg.image)?;
        if let Some(v) = entries.take_with("image.grid", parse_size)? {
            cfg.image_grid = v;
        }
        if let Some(v) = entries.take_with("seeds", |s| parse_list(s)?.iter().map(|x| parse_num(x)).collect())? {
            cfg.seeds = v;
        }
        cfg.out_dir = entries.take("out")?;

        entries.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Full resolved configuration in the same format `parse` reads.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        match &self.source {
            CorpusSource::File(p) => kv("corpus.path", p.display().to_string()),
            CorpusSource::Generate { spec, seed } => {
                kv("corpus.seed", seed.to_string());
                kv("generator.n_records", spec.n_records.to_string());
                kv("generator.label_proportions", join(&spec.label_proportions));
                kv("generator.noise_rate", spec.noise_rate.to_string());
                kv("generator.date_start", spec.date_range.0.to_string());
                kv("generator.date_end", spec.date_range.1.to_string());
                kv("generator.image_size", format!("{}x{}", spec.image_size.0, spec.image_size.1));
                kv("generator.repeat_study_rate", spec.repeat_study_rate.to_string());
                kv("generator.repeat_gap_days", spec.repeat_gap_days.to_string());
                kv("generator.off_protocol_rate", spec.off_protocol_rate.to_string());
                kv("generator.pixel_noise_sd", spec.background.noise_sd.to_string());
                for label in [Label::Abnormal, Label::Arthroplasty] {
                    kv(
                        &format!("generator.{}_intensity", label.as_str()),
                        spec.image_signals[label.index()].intensity.to_string(),
                    );
                }
            }
        }
        kv("filter.modalities", join(self.filter.allowed_modalities()));
        kv("filter.series", join(self.filter.allowed_series()));
        let b = &self.boundaries;
        kv("split.primary", window_text(&b.primary_window));
        kv("split.secondary", window_text(&b.secondary_window));
        kv("split.test", window_text(&b.test_window));
        kv("split.ratios", join(&b.primary_ratios));
        kv("split.seed", self.split_seed.to_string());
        if let Some(p) = &self.rules_path {
            kv("rules.path", p.display().to_string());
        }
        for (name, t) in [("text", &self.text), ("image", &self.image)] {
            kv(&format!("{name}.learning_rates"), join(&t.learning_rate_grid));
            kv(&format!("{name}.batch_size"), t.batch_size.to_string());
            kv(&format!("{name}.patience"), t.patience.to_string());
            kv(&format!("{name}.max_epochs"), t.max_epochs.to_string());
            kv(&format!("{name}.seed"), t.seed.to_string());
            kv(&format!("{name}.beta1"), t.adam.beta1.to_string());
            kv(&format!("{name}.beta2"), t.adam.beta2.to_string());
            kv(&format!("{name}.epsilon"), t.adam.epsilon.to_string());
            kv(&format!("{name}.selection"), selection_text(t.selection).into());
            if name == "text" {
                kv("text.min_df", self.text_min_df.to_string());
            } else {
                kv("image.grid", format!("{}x{}", self.image_grid.0, self.image_grid.1));
            }
        }
        kv("seeds", join(&self.seeds));
        if let Some(p) = &self.out_dir {
            kv("out", p.display().to_string());
        }
        s
    }

    /// SHA-256 of the resolved text, minus the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        hex::encode(Sha256::digest(c.to_text().as_bytes()))
    }
}

fn read_train(prefix: &str, e: &mut Entries, t: &mut TrainConfig) -> Result<(), ConfigError> {
    let k = |s: &str| format!("{prefix}.{s}");
    if let Some(v) = e.take_with(&k("learning_rates"), |s| parse_list(s)?.iter().map(|x| parse_num(x)).collect())? {
        t.learning_rate_grid = v;
    }
    e.set(&k("batch_size"), &mut t.batch_size)?;
    e.set(&k("patience"), &mut t.patience)?;
    e.set(&k("max_epochs"), &mut t.max_epochs)?;
    e.set(&k("seed"), &mut t.seed)?;
    e.set(&k("beta1"), &mut t.adam.beta1)?;
    e.set(&k("beta2"), &mut t.adam.beta2)?;
    e.set(&k("epsilon"), &mut t.adam.epsilon)?;
    if let Some(v) = e.take_with(&k("selection"), parse_selection)? {
        t.selection = v;
    }
    Ok(())
}

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn read(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split_once('#').map_or(raw, |(a, _)| a).trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                message: format!("expected `key = value`, got `{content}`"),
            })?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(ConfigError::Syntax { line, message: "empty key".into() });
            }
            if map.insert(key.clone(), (line, v.trim().to_string())).is_some() {
                return Err(ConfigError::DuplicateKey { line, key });
            }
        }
        Ok(Self { map })
    }

    fn take_with<T>(&mut self, key: &str, f: impl Fn(&str) -> Result<T, String>) -> Result<Option<T>, ConfigError> {
        match self.map.remove(key) {
            None => Ok(None),
            Some((line, v)) => f(&v)
                .map(Some)
                .map_err(|message| ConfigError::BadValue { line, key: key.to_string(), message }),
        }
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.take_with(key, |s| s.parse::<T>().map_err(|e| e.to_string()))
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<(), ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn finish(self) -> Result<(), ConfigError> {
        match self.map.into_iter().min_by_key(|(_, (line, _))| *line) {
            Some((key, (line, _))) => Err(ConfigError::UnknownKey { line, key }),
            None => Ok(()),
        }
    }
}

fn parse_num<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.trim().parse().map_err(|e: T::Err| format!("`{s}`: {e}"))
}

fn parse_list(s: &str) -> Result<Vec<String>, String> {
    let items: Vec<String> = s.split(',').map(|x| x.trim().to_string()).collect();
    if items.iter().any(String::is_empty) {
        return Err("empty list item".into());
    }
    Ok(items)
}

fn parse_triple(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = parse_list(s)?.iter().map(|x| parse_num(x)).collect::<Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<f64>| format!("expected 3 numbers, got {}", v.len()))
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s.split_once('x').ok_or("expected ROWSxCOLS")?;
    Ok((parse_num(r)?, parse_num(c)?))
}

fn parse_window(s: &str) -> Result<DateWindow, String> {
    let (a, b) = s.split_once("..").ok_or("expected START..END")?;
    let d = |x: &str| NaiveDate::from_str(x.trim()).map_err(|e| format!("`{}`: {e}", x.trim()));
    Ok(DateWindow::new(d(a)?, d(b)?))
}

fn parse_selection(s: &str) -> Result<SelectionMetric, String> {
    match s {
        "val_wauc" => Ok(SelectionMetric::ValWauc),
        "val_loss" => Ok(SelectionMetric::ValLoss),
        _ => Err(format!("`{s}` is not val_wauc or val_loss")),
    }
}

fn selection_text(m: SelectionMetric) -> &'static str {
    match m {
        SelectionMetric::ValWauc => "val_wauc",
        SelectionMetric::ValLoss => "val_loss",
    }
}

fn window_text(w: &DateWindow) -> String {
    format!("{}..{}", w.start, w.end)
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}
