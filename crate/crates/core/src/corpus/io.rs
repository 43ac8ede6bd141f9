//! JSON Lines persistence: one `StudyRecord` per line.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{CorpusError, StudyRecord};

pub fn write_corpus<W: Write>(records: &[StudyRecord], mut out: W) -> std::io::Result<()> {
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Parse a corpus stream. Blank lines are skipped; line numbers in errors are 1-based.
pub fn read_corpus<R: BufRead>(input: R) -> Result<Vec<StudyRecord>, CorpusError> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CorpusError::Malformed { line: line_no, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: StudyRecord = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Malformed { line: line_no, message: e.to_string() })?;
        if !seen.insert(record.accession_id.clone()) {
            return Err(CorpusError::DuplicateAccession {
                line: line_no,
                accession_id: record.accession_id,
            });
        }
        records.push(record);
    }
    Ok(records)
}

pub fn save_corpus(records: &[StudyRecord], path: &Path) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io { path: path.to_path_buf(), source };
    let file = File::create(path).map_err(io_err)?;
    write_corpus(records, BufWriter::new(file)).map_err(io_err)
}

pub fn load_corpus(path: &Path) -> Result<Vec<StudyRecord>, CorpusError> {
    let file = File::open(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            CorpusError::NotFound { path: path.to_path_buf() }
        } else {
            CorpusError::Io { path: path.to_path_buf(), source }
        }
    })?;
    read_corpus(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{AssignedLabel, Label, PixelGrid};
    use chrono::NaiveDate;

    fn fixture() -> Vec<StudyRecord> {
        let date = |d| NaiveDate::from_ymd_opt(2019, 3, d).unwrap();
        vec![
            StudyRecord {
                patient_id: "P1".into(),
                accession_id: "A1".into(),
                study_date: date(1),
                modality: "CR".into(),
                series_description: "PA Axial".into(),
                report_text: "FINDINGS: Mild narrowing.\nIMPRESSION: \"OA\".".into(),
                pixels: Some(PixelGrid::new(2, 2, vec![0.0, 1.5, 4095.0, 3.25]).unwrap()),
                label: Some(AssignedLabel::rule(Label::Abnormal)),
            },
            StudyRecord {
                patient_id: "P1".into(),
                accession_id: "A2".into(),
                study_date: date(2),
                modality: "DX".into(),
                series_description: "PA Tunnel".into(),
                report_text: "No headers".into(),
                pixels: None,
                label: Some(AssignedLabel::pseudo([0.1, 0.2, 0.7]).unwrap()),
            },
            StudyRecord {
                patient_id: "P2".into(),
                accession_id: "A3".into(),
                study_date: date(3),
                modality: "CR".into(),
                series_description: "PA Weight Bearing".into(),
                report_text: String::new(),
                pixels: None,
                label: None,
            },
        ]
    }

    #[test]
    fn round_trip_three_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let records = fixture();
        save_corpus(&records, &path).unwrap();
        let back = load_corpus(&path).unwrap();
        assert_eq!(back, records);
        assert!(back[1].pixels.is_none() && back[2].pixels.is_none());
    }

    #[test]
    fn truncated_line_two_is_reported() {
        let mut buf = Vec::new();
        write_corpus(&fixture(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let truncated = &lines[1][..lines[1].len() / 2];
        lines[1] = truncated;
        let err = read_corpus(lines.join("\n").as_bytes()).unwrap_err();
        match err {
            CorpusError::Malformed { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_not_found() {
        let err = load_corpus(Path::new("/nonexistent/corpus.jsonl")).unwrap_err();
        assert!(matches!(err, CorpusError::NotFound { .. }));
    }

    #[test]
    fn duplicate_accession_rejected() {
        let mut records = fixture();
        records[2].accession_id = "A1".into();
        let mut buf = Vec::new();
        write_corpus(&records, &mut buf).unwrap();
        let err = read_corpus(buf.as_slice()).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateAccession { line: 3, .. }));
    }

    #[test]
    fn field_names_are_exact() {
        let mut buf = Vec::new();
        write_corpus(&fixture()[2..], &mut buf).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        let mut expected = vec![
            "patient_id",
            "accession_id",
            "study_date",
            "modality",
            "series_description",
            "report_text",
            "pixels",
            "label",
        ];
        expected.sort();
        let mut keys = keys;
        keys.sort();
        assert_eq!(keys, expected);
        assert_eq!(v["study_date"], "2019-03-03");
        assert!(v["pixels"].is_null() && v["label"].is_null());
    }
}
