use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::check_readable;
use crate::error::{Error, Result};

/// One patient study: a report with its frontal and lateral images.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub study_id: String,
    pub patient_id: String,
    pub report_text: String,
    pub frontal_path: PathBuf,
    pub lateral_path: PathBuf,
}

/// On-disk line shape; every field optional so missing ones can be named.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    study_id: Option<String>,
    patient_id: Option<String>,
    report_text: Option<String>,
    frontal_path: Option<PathBuf>,
    lateral_path: Option<PathBuf>,
}

/// Reads a line-delimited JSON manifest. Relative image paths are resolved
/// against the manifest's directory.
pub fn parse_manifest(path: &Path) -> Result<Vec<StudyRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let err = |line: usize, message: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        if raw_line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(raw_line).map_err(|e| err(line, format!("malformed record: {e}")))?;
        let field = |v: Option<String>, name: &str| v.ok_or_else(|| err(line, format!("missing field `{name}`")));
        let path_field = |v: Option<PathBuf>, name: &str| v.ok_or_else(|| err(line, format!("missing field `{name}`")));
        let record = StudyRecord {
            study_id: field(raw.study_id, "study_id")?,
            patient_id: field(raw.patient_id, "patient_id")?,
            report_text: field(raw.report_text, "report_text")?,
            frontal_path: base.join(path_field(raw.frontal_path, "frontal_path")?),
            lateral_path: base.join(path_field(raw.lateral_path, "lateral_path")?),
        };
        if record.study_id.is_empty() {
            return Err(err(line, "empty `study_id`".into()));
        }
        if record.report_text.trim().is_empty() {
            return Err(err(line, "empty `report_text`".into()));
        }
        if !seen.insert(record.study_id.clone()) {
            return Err(err(line, format!("duplicate study_id `{}`", record.study_id)));
        }
        for (name, p) in [
            ("frontal_path", &record.frontal_path),
            ("lateral_path", &record.lateral_path),
        ] {
            check_readable(p).map_err(|e| err(line, format!("`{name}` unreadable: {e}")))?;
        }
        records.push(record);
    }
    Ok(records)
}

/// Writes records as one JSON object per line.
pub fn write_manifest(path: &Path, records: &[StudyRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Internal(e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;
    use crate::corpus::image::save_png;

    fn fixture() -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::zeros(&[4, 4]);
        for name in ["f1.png", "l1.png", "f2.png", "l2.png"] {
            save_png(&img, &dir.path().join(name)).unwrap();
        }
        let m = dir.path().join("manifest.jsonl");
        (dir, m)
    }

    fn line(id: &str, f: &str, l: &str) -> String {
        format!(
            r#"{{"study_id":"{id}","patient_id":"p-{id}","report_text":"Heart size normal.","frontal_path":"{f}","lateral_path":"{l}"}}"#
        )
    }

    #[test]
    fn two_valid_lines_in_order() {
        let (dir, m) = fixture();
        fs::write(
            &m,
            format!(
                "{}\n{}\n",
                line("s1", "f1.png", "l1.png"),
                line("s2", "f2.png", "l2.png")
            ),
        )
        .unwrap();
        let recs = parse_manifest(&m).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].study_id, "s1");
        assert_eq!(recs[1].study_id, "s2");
        assert_eq!(recs[1].frontal_path, dir.path().join("f2.png"));
    }

    #[test]
    fn missing_field_names_field_and_line() {
        let (_dir, m) = fixture();
        let bad = r#"{"study_id":"s2","patient_id":"p","report_text":"x.","frontal_path":"f2.png"}"#;
        fs::write(&m, format!("{}\n{bad}\n", line("s1", "f1.png", "l1.png"))).unwrap();
        let msg = parse_manifest(&m).unwrap_err().to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("lateral_path"), "{msg}");
    }

    #[test]
    fn duplicate_study_id_rejected() {
        let (_dir, m) = fixture();
        fs::write(
            &m,
            format!(
                "{}\n{}\n",
                line("s1", "f1.png", "l1.png"),
                line("s1", "f2.png", "l2.png")
            ),
        )
        .unwrap();
        let msg = parse_manifest(&m).unwrap_err().to_string();
        assert!(msg.contains("duplicate") && msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn unreadable_image_rejected() {
        let (_dir, m) = fixture();
        fs::write(&m, line("s1", "f1.png", "nope.png")).unwrap();
        let msg = parse_manifest(&m).unwrap_err().to_string();
        assert!(msg.contains("lateral_path") && msg.contains("line 1"), "{msg}");
    }
}
