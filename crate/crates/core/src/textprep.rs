//! Report preprocessing: section extraction, cleaning and tokenization.
//!
//! Sections are located on the raw text, before punctuation removal, since
//! header detection depends on the trailing colon.

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Token cap applied to every report.
pub const MAX_TOKENS: usize = 512;

pub const DEFAULT_HEADERS: [&str; 6] =
    ["TECHNIQUE", "COMPARISON", "FINDINGS", "IMPRESSION", "INDICATION", "HISTORY"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionedReport {
    pub findings: String,
    pub impression: String,
    /// Set when neither a findings nor an impression header was found; the
    /// whole raw text is then carried in `findings`.
    pub used_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<String>,
    pub truncated: bool,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(String::as_str)
    }
}

/// Finds recognized section headers (`NAME:` or `NAMES:`, any case).
#[derive(Debug, Clone)]
pub struct SectionExtractor {
    header: Regex,
}

impl SectionExtractor {
    /// Headers are matched case-insensitively; an optional plural `S` is accepted.
    pub fn new<I, S>(headers: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let alternatives: Vec<String> = headers
            .into_iter()
            .map(|h| regex::escape(h.as_ref().trim()))
            .filter(|h| !h.is_empty())
            .collect();
        let pattern = format!(r"(?i)\b({})S?[ \t]*:", alternatives.join("|"));
        Self { header: Regex::new(&pattern).expect("escaped header alternation is valid") }
    }

    pub fn extract(&self, raw: &str) -> SectionedReport {
        let marks: Vec<(usize, usize, String)> = self
            .header
            .captures_iter(raw)
            .map(|c| {
                let whole = c.get(0).expect("group 0");
                let name = c[1].to_ascii_uppercase();
                (whole.start(), whole.end(), name)
            })
            .collect();

        let mut findings = Vec::new();
        let mut impression = Vec::new();
        for (i, (_, body_start, name)) in marks.iter().enumerate() {
            let body_end = marks.get(i + 1).map_or(raw.len(), |m| m.0);
            let body = raw[*body_start..body_end].trim();
            match name.as_str() {
                "FINDINGS" => findings.push(body),
                "IMPRESSION" => impression.push(body),
                _ => {}
            }
        }
        if findings.is_empty() && impression.is_empty() {
            return SectionedReport {
                findings: raw.to_string(),
                impression: String::new(),
                used_fallback: true,
            };
        }
        SectionedReport {
            findings: findings.join(" "),
            impression: impression.join(" "),
            used_fallback: false,
        }
    }
}

impl Default for SectionExtractor {
    fn default() -> Self {
        Self::new(DEFAULT_HEADERS)
    }
}

/// Extract findings and impression with the default header list.
pub fn extract_sections(raw: &str) -> SectionedReport {
    SectionExtractor::default().extract(raw)
}

/// Drop every character that is not a letter or whitespace, collapse
/// whitespace runs to one space, trim and lowercase.
pub fn clean_text(text: &str) -> String {
    let kept: String = text
        .chars()
        .filter(|c| c.is_ascii_alphabetic() || c.is_whitespace())
        .map(|c| c.to_ascii_lowercase())
        .collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Whitespace tokenization keeping the first `max_len` tokens.
pub fn tokenize(text: &str, max_len: usize) -> TokenSeq {
    let mut words = text.split_whitespace();
    let tokens: Vec<String> = words.by_ref().take(max_len).map(str::to_string).collect();
    let truncated = words.next().is_some();
    TokenSeq { tokens, truncated }
}

/// Section extraction, cleaning of findings + impression, tokenization.
pub fn preprocess_with(extractor: &SectionExtractor, raw: &str, max_len: usize) -> TokenSeq {
    let sections = extractor.extract(raw);
    let joined = format!("{} {}", sections.findings, sections.impression);
    tokenize(&clean_text(&joined), max_len)
}

pub fn preprocess(raw: &str) -> TokenSeq {
    preprocess_with(&SectionExtractor::default(), raw, MAX_TOKENS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn extracts_findings_and_impression() {
        let s = extract_sections(
            "TECHNIQUE: 2 views. FINDINGS: Mild narrowing. IMPRESSION: Degenerative change.",
        );
        assert_eq!(s.findings, "Mild narrowing.");
        assert_eq!(s.impression, "Degenerative change.");
        assert!(!s.used_fallback);
    }

    #[test]
    fn fallback_without_headers() {
        let s = extract_sections("No headers here at all");
        assert_eq!(s.findings, "No headers here at all");
        assert_eq!(s.impression, "");
        assert!(s.used_fallback);
    }

    #[test]
    fn lowercase_impression_only() {
        let s = extract_sections("Impression: stable.");
        assert_eq!(s.findings, "");
        assert_eq!(s.impression, "stable.");
        assert!(!s.used_fallback);
    }

    #[test]
    fn plural_and_distractor_headers() {
        let s = extract_sections(
            "INDICATION: rule out fracture\nFindings: effusion\nIMPRESSIONS: OA\nHISTORY: fall",
        );
        assert_eq!(s.findings, "effusion");
        assert_eq!(s.impression, "OA");
    }

    #[test]
    fn unlisted_header_is_body_text() {
        let s = extract_sections("FINDINGS: narrowing NOTE: call me IMPRESSION: oa");
        assert_eq!(s.findings, "narrowing NOTE: call me");
        let custom = SectionExtractor::new(["FINDINGS", "IMPRESSION", "NOTE"]);
        assert_eq!(custom.extract("FINDINGS: narrowing NOTE: call me").findings, "narrowing");
    }

    #[test]
    fn header_needs_word_boundary() {
        // "REFINDINGS:" is not a findings header.
        let s = extract_sections("REFINDINGS: x");
        assert!(s.used_fallback);
    }

    #[test]
    fn clean_examples() {
        assert_eq!(clean_text("2 views, no acute fracture."), "views no acute fracture");
        assert_eq!(clean_text(""), "");
        assert_eq!(clean_text("3mm  Ill-defined\tlesion"), "mm illdefined lesion");
    }

    #[test]
    fn tokenize_examples() {
        let t = tokenize("total knee arthroplasty", 512);
        assert_eq!(t.tokens, ["total", "knee", "arthroplasty"]);
        assert!(!t.truncated);

        let long = vec!["a"; 600].join(" ");
        let t = tokenize(&long, MAX_TOKENS);
        assert_eq!(t.len(), 512);
        assert!(t.truncated);

        let t = tokenize("", 7);
        assert!(t.is_empty() && !t.truncated);

        let t = tokenize("a b", 2);
        assert!(!t.truncated);
    }

    proptest! {
        #[test]
        fn clean_is_idempotent_and_restricted(s in "\\PC{0,80}") {
            let once = clean_text(&s);
            prop_assert_eq!(clean_text(&once), once.clone());
            prop_assert!(once.chars().all(|c| c.is_ascii_lowercase() || c == ' '));
            prop_assert!(!once.contains("  "));
            prop_assert_eq!(once.trim(), once.as_str());
        }

        #[test]
        fn tokenize_respects_cap(s in "[a-z ]{0,200}", cap in 0usize..40) {
            let t = tokenize(&s, cap);
            prop_assert!(t.len() <= cap);
            prop_assert!(t.iter().all(|w| !w.is_empty() && w.chars().all(|c| c.is_ascii_lowercase())));
        }

        #[test]
        fn preprocess_never_yields_digits(s in "[A-Za-z0-9:., \\n]{0,120}") {
            let t = preprocess(&s);
            prop_assert!(t.iter().all(|w| w.chars().all(|c| c.is_ascii_lowercase())));
            prop_assert_eq!(preprocess(&s), t);
        }
    }
}
