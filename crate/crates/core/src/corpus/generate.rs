//! Deterministic synthetic corpora: templated reports and small radiograph-like grids.
//!
//! Each record's planted label drives two independent channels. The report
//! channel embeds that label's signal phrases in a sectioned template; with
//! probability `noise_rate` the phrases come from a uniformly drawn label
//! instead. The image channel adds that label's intensity pattern to a
//! noisy knee-like background; with probability `noise_rate` no pattern is
//! added at all.

use chrono::{Days, NaiveDate};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{apportion, CorpusError, Label, PixelGrid, StudyRecord, PROB_SUM_TOL};

/// How an image signal is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalShape {
    /// Smooth bump with standard deviations given by the half extent.
    Gaussian,
    /// Solid block (hardware-like).
    Rectangle,
}

/// Per-label image signal. Positions and extents are fractions of the image size.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSignal {
    /// Raw intensity added at the peak; zero disables the signal.
    pub intensity: f64,
    pub center: (f64, f64),
    pub half_extent: (f64, f64),
    /// Maximum displacement of the centre in each axis.
    pub jitter: f64,
    pub shape: SignalShape,
}

impl ImageSignal {
    pub fn none() -> Self {
        Self {
            intensity: 0.0,
            center: (0.5, 0.5),
            half_extent: (0.1, 0.1),
            jitter: 0.0,
            shape: SignalShape::Gaussian,
        }
    }
}

/// Knee-like background shared by every image.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundParams {
    pub soft_tissue: f64,
    pub bone: f64,
    /// Bone column half width as a fraction of the columns.
    pub bone_half_width: f64,
    /// Joint space height as a fraction of the rows.
    pub joint_gap: f64,
    /// Per-image multiplicative gain drawn from `1 ± gain_jitter`.
    pub gain_jitter: f64,
    /// Per-image horizontal anatomy shift, fraction of the columns.
    pub shift_jitter: f64,
    pub noise_sd: f64,
    /// Detector ceiling; pixels are clamped to `[0, max_value]` and rounded.
    pub max_value: f64,
}

impl Default for BackgroundParams {
    fn default() -> Self {
        Self {
            soft_tissue: 900.0,
            bone: 900.0,
            bone_half_width: 0.22,
            joint_gap: 0.08,
            gain_jitter: 0.15,
            shift_jitter: 0.06,
            noise_sd: 420.0,
            max_value: 4095.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub n_records: usize,
    /// Shares of Normal, Abnormal, Arthroplasty.
    pub label_proportions: [f64; 3],
    /// Signal phrases per label, indexed by `Label::index`.
    pub report_phrases: [Vec<String>; 3],
    /// Label-neutral findings sentences.
    pub neutral_sentences: Vec<String>,
    pub technique_sentences: Vec<String>,
    /// Body of the distractor INDICATION section.
    pub indication_sentences: Vec<String>,
    pub findings_headers: Vec<String>,
    pub impression_headers: Vec<String>,
    pub image_signals: [ImageSignal; 3],
    pub background: BackgroundParams,
    pub noise_rate: f64,
    /// Inclusive range of study dates.
    pub date_range: (NaiveDate, NaiveDate),
    pub image_size: (usize, usize),
    /// Probability that a patient has a second study.
    pub repeat_study_rate: f64,
    pub repeat_gap_days: u64,
    /// Share of studies acquired with a modality or view the series filter rejects.
    pub off_protocol_rate: f64,
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        let normal = strings(&[
            "No acute fracture.",
            "No joint effusion.",
            "Joint spaces are preserved.",
            "No significant degenerative changes.",
            "Soft tissues are unremarkable.",
            "No suspicious osseous lesion.",
            "Alignment is anatomic.",
            "Normal knee radiographs.",
            "No acute osseous abnormality.",
            "Unremarkable knee.",
        ]);
        let abnormal = strings(&[
            "Mild medial compartment joint space narrowing.",
            "Tricompartmental osteophytes compatible with osteoarthritis.",
            "Moderate degenerative changes of the patellofemoral compartment.",
            "Findings compatible with degenerative joint disease.",
            "Postoperative changes with intact fixation hardware.",
            "Acute fracture of the patella.",
            "Nondisplaced fracture of the lateral tibial plateau.",
            "Lytic lesion in the distal femoral metaphysis.",
            "Fragmentation of the tibial tubercle.",
            "Small loose body in the suprapatellar recess.",
            "Ill defined lucency in the proximal tibia.",
            "Lateral patellar subluxation.",
            "Varus malalignment of the knee.",
            "Osseous abnormality of the fibular head.",
            "Large joint effusion.",
            "Prepatellar soft tissue swelling.",
            "Bipartite patella, a developmental variant.",
            "Avulsion injury at the fibular head from recent trauma.",
        ]);
        let arthroplasty = strings(&[
            "Status post total knee arthroplasty.",
            "Knee prosthesis in expected position.",
            "Unicompartmental arthroplasty components are intact.",
            "Total knee replacement without complication.",
            "Cemented arthroplasty with no periprosthetic lucency.",
        ]);
        Self {
            n_records: 8700,
            label_proportions: [0.23, 0.69, 0.08],
            report_phrases: [normal, abnormal, arthroplasty],
            neutral_sentences: strings(&[
                "Standing bilateral views were reviewed.",
                "The tibial tubercle measures 14 mm.",
                "Comparison with radiographs from 03/2018.",
                "Patellar height ratio is 1.1.",
                "Images obtained at 2 projections.",
            ]),
            technique_sentences: strings(&[
                "3 views of the right knee.",
                "Bilateral PA standing views, 2 images.",
                "PA weight-bearing view of both knees.",
            ]),
            indication_sentences: strings(&[
                "Knee pain for 6 months.",
                "Rule out fracture after fall.",
                "Evaluate for arthritis.",
                "Follow-up of prior arthroplasty consult.",
            ]),
            findings_headers: strings(&["FINDINGS", "Findings"]),
            impression_headers: strings(&["IMPRESSION", "IMPRESSIONS", "Impression"]),
            image_signals: [
                ImageSignal::none(),
                ImageSignal {
                    // weak on purpose: a linear model on ~850 images stays data-limited
                    intensity: 100.0,
                    center: (0.5, 0.5),
                    half_extent: (0.10, 0.16),
                    jitter: 0.12,
                    shape: SignalShape::Gaussian,
                },
                ImageSignal {
                    intensity: 1600.0,
                    center: (0.5, 0.5),
                    half_extent: (0.22, 0.2),
                    jitter: 0.05,
                    shape: SignalShape::Rectangle,
                },
            ],
            background: BackgroundParams::default(),
            noise_rate: 0.05,
            date_range: (
                NaiveDate::from_ymd_opt(2019, 1, 8).expect("valid date"),
                NaiveDate::from_ymd_opt(2019, 12, 31).expect("valid date"),
            ),
            image_size: (64, 64),
            repeat_study_rate: 0.07,
            repeat_gap_days: 120,
            off_protocol_rate: 0.01,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |field, reason: String| Err(CorpusError::InvalidSpec { field, reason });
        let p = &self.label_proportions;
        if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return bad("label_proportions", format!("{p:?} has a negative or non-finite entry"));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return bad("label_proportions", format!("sums to {sum}, expected 1"));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return bad("noise_rate", format!("{} not in [0, 1]", self.noise_rate));
        }
        if !(0.0..=1.0).contains(&self.repeat_study_rate) {
            return bad("repeat_study_rate", format!("{} not in [0, 1]", self.repeat_study_rate));
        }
        if !(0.0..=1.0).contains(&self.off_protocol_rate) {
            return bad("off_protocol_rate", format!("{} not in [0, 1]", self.off_protocol_rate));
        }
        for label in Label::ALL {
            if self.report_phrases[label.index()].is_empty() {
                return bad("report_phrases", format!("no phrases for {label}"));
            }
        }
        for (field, list) in [
            ("neutral_sentences", &self.neutral_sentences),
            ("technique_sentences", &self.technique_sentences),
            ("indication_sentences", &self.indication_sentences),
            ("findings_headers", &self.findings_headers),
            ("impression_headers", &self.impression_headers),
        ] {
            if list.is_empty() {
                return bad(field, "must not be empty".into());
            }
        }
        if self.date_range.0 > self.date_range.1 {
            return bad("date_range", "start is after end".into());
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return bad("image_size", format!("{:?} has a zero dimension", self.image_size));
        }
        if !(self.background.noise_sd >= 0.0) || !(self.background.max_value > 0.0) {
            return bad("background", "noise_sd must be >= 0 and max_value > 0".into());
        }
        Ok(())
    }
}

/// A generated corpus together with the ground truth withheld from the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedCorpus {
    pub records: Vec<StudyRecord>,
    /// Planted label of each record, parallel to `records`.
    pub truth: Vec<Label>,
    /// Label whose phrases the report actually carries (differs from truth under noise).
    pub report_label: Vec<Label>,
    /// Whether the image carries its planted label's signal.
    pub image_has_signal: Vec<bool>,
}

impl GeneratedCorpus {
    pub fn truth_of(&self, accession_id: &str) -> Option<Label> {
        self.records.iter().position(|r| r.accession_id == accession_id).map(|i| self.truth[i])
    }
}

pub fn generate_corpus(spec: &GeneratorSpec, seed: u64) -> Result<Vec<StudyRecord>, CorpusError> {
    generate(spec, seed).map(|g| g.records)
}

struct Skeleton {
    patient: usize,
    date: NaiveDate,
    label: Label,
}

pub fn generate(spec: &GeneratorSpec, seed: u64) -> Result<GeneratedCorpus, CorpusError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let counts = apportion(&spec.label_proportions, spec.n_records);
    let mut labels: Vec<Label> = Label::ALL
        .iter()
        .zip(&counts)
        .flat_map(|(l, &c)| std::iter::repeat_n(*l, c))
        .collect();
    labels.shuffle(&mut rng);

    let (start, end) = spec.date_range;
    let span = (end - start).num_days() as u64;
    let mut skeletons = Vec::with_capacity(spec.n_records);
    let mut patient = 0;
    while skeletons.len() < spec.n_records {
        let first = start + Days::new(rng.random_range(0..=span));
        skeletons.push(Skeleton { patient, date: first, label: labels[skeletons.len()] });
        if skeletons.len() < spec.n_records && rng.random::<f64>() < spec.repeat_study_rate {
            let gap = rng.random_range(1..=spec.repeat_gap_days.max(1));
            let mut second = first + Days::new(gap);
            if second > end {
                second = first.checked_sub_days(Days::new(gap)).unwrap_or(start).max(start);
            }
            skeletons.push(Skeleton { patient, date: second, label: labels[skeletons.len()] });
        }
        patient += 1;
    }
    // Stable sort keeps generation order within a day.
    skeletons.sort_by_key(|s| s.date);

    let built: Vec<(StudyRecord, Label, bool)> = skeletons
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            build_record(spec, s, i, &mut rng)
        })
        .collect();

    let mut out = GeneratedCorpus {
        records: Vec::with_capacity(built.len()),
        truth: Vec::with_capacity(built.len()),
        report_label: Vec::with_capacity(built.len()),
        image_has_signal: Vec::with_capacity(built.len()),
    };
    for ((record, report_label, has_signal), s) in built.into_iter().zip(&skeletons) {
        out.truth.push(s.label);
        out.report_label.push(report_label);
        out.image_has_signal.push(has_signal);
        out.records.push(record);
    }
    Ok(out)
}

fn pick<'a>(rng: &mut ChaCha8Rng, items: &'a [String]) -> &'a str {
    items.choose(rng).map(String::as_str).unwrap_or("")
}

fn build_record(
    spec: &GeneratorSpec,
    s: &Skeleton,
    index: usize,
    rng: &mut ChaCha8Rng,
) -> (StudyRecord, Label, bool) {
    let (modality, series) = if rng.random::<f64>() < spec.off_protocol_rate {
        *[("MR", "PA Axial"), ("CR", "Lateral"), ("CT", "Coronal Reformat"), ("DX", "Sunrise")]
            .choose(rng)
            .expect("non-empty")
    } else {
        (
            *["CR", "DX"].choose(rng).expect("non-empty"),
            *["PA Axial", "PA Weight Bearing", "PA Tunnel"].choose(rng).expect("non-empty"),
        )
    };

    let report_label = if rng.random::<f64>() < spec.noise_rate {
        Label::ALL[rng.random_range(0..3)]
    } else {
        s.label
    };
    let report_text = compose_report(spec, report_label, rng);

    let has_signal = rng.random::<f64>() >= spec.noise_rate;
    let signal = has_signal.then(|| &spec.image_signals[s.label.index()]);
    let pixels = render_image(spec, signal, rng);

    let record = StudyRecord {
        patient_id: format!("PAT{:06}", s.patient),
        accession_id: format!("ACC{:07}", index),
        study_date: s.date,
        modality: modality.to_string(),
        series_description: series.to_string(),
        report_text,
        pixels: Some(pixels),
        label: None,
    };
    (record, report_label, has_signal)
}

fn compose_report(spec: &GeneratorSpec, label: Label, rng: &mut ChaCha8Rng) -> String {
    let phrases = &spec.report_phrases[label.index()];
    let k = rng.random_range(1..=2).min(phrases.len());
    let mut findings: Vec<&str> = phrases.choose_multiple(rng, k).map(String::as_str).collect();
    let neutral = pick(rng, &spec.neutral_sentences);
    let at = rng.random_range(0..=findings.len());
    findings.insert(at, neutral);
    let impression = pick(rng, phrases);
    format!(
        "TECHNIQUE: {}\nINDICATION: {}\n{}: {}\n{}: {}",
        pick(rng, &spec.technique_sentences),
        pick(rng, &spec.indication_sentences),
        pick(rng, &spec.findings_headers),
        findings.join(" "),
        pick(rng, &spec.impression_headers),
        impression,
    )
}

fn render_image(spec: &GeneratorSpec, signal: Option<&ImageSignal>, rng: &mut ChaCha8Rng) -> PixelGrid {
    let (rows, cols) = spec.image_size;
    let bg = &spec.background;
    let gain = 1.0 + bg.gain_jitter * rng.random_range(-1.0..=1.0);
    let axis = cols as f64 * (0.5 + bg.shift_jitter * rng.random_range(-1.0..=1.0));
    let half_width = bg.bone_half_width * cols as f64;
    let half_gap = 0.5 * bg.joint_gap * rows as f64;
    let mid_row = 0.5 * rows as f64;

    let placed = signal.filter(|s| s.intensity != 0.0).map(|s| {
        let cr = (s.center.0 + s.jitter * rng.random_range(-1.0..=1.0)) * rows as f64;
        let cc = (s.center.1 + s.jitter * rng.random_range(-1.0..=1.0)) * cols as f64;
        (s, cr, cc, s.half_extent.0 * rows as f64, s.half_extent.1 * cols as f64)
    });

    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let y = r as f64 + 0.5;
        for c in 0..cols {
            let x = c as f64 + 0.5;
            let in_bone = (x - axis).abs() < half_width && (y - mid_row).abs() > half_gap;
            let mut v = gain * (bg.soft_tissue + if in_bone { bg.bone } else { 0.0 });
            if let Some((s, cr, cc, hr, hc)) = placed {
                let dr = (y - cr) / hr;
                let dc = (x - cc) / hc;
                v += match s.shape {
                    SignalShape::Gaussian => s.intensity * (-0.5 * (dr * dr + dc * dc)).exp(),
                    SignalShape::Rectangle if dr.abs() <= 1.0 && dc.abs() <= 1.0 => s.intensity,
                    SignalShape::Rectangle => 0.0,
                };
            }
            let noise: f64 = StandardNormal.sample(rng);
            v += bg.noise_sd * noise;
            data.push(v.clamp(0.0, bg.max_value).round() as f32);
        }
    }
    PixelGrid::new(rows, cols, data).expect("rendered grid is valid")
}
