//! Labeled streamlines as JSON lines.
//!
//! One object per line:
//! `{"points":[x0,y0,z0,...],"label":3,"cut_status":"cut","subject":"sub-000"}`.
//! `label` and `cut_status` may be `null`. Coordinates are millimeters in RAS
//! and are written with shortest round-trip formatting, so reading back is
//! lossless.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tract::{CutStatus, Point, Streamline, Tractogram};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledJsonlRecord {
    pub points: Vec<f64>,
    pub label: Option<usize>,
    pub cut_status: Option<String>,
    pub subject: String,
}

/// Reads one tractogram. When `class_names` is given, labels are checked
/// against it and it becomes the tractogram's class list.
pub fn read_jsonl(reader: impl BufRead, class_names: Option<&[String]>) -> Result<Tractogram> {
    let mut streamlines = Vec::new();
    let mut subject: Option<String> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::ParseError { line: line_no, message };
        let rec: LabeledJsonlRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if !rec.points.len().is_multiple_of(3) || rec.points.len() < 6 {
            return Err(parse_err(format!(
                "`points` holds {} values; need a multiple of 3 and at least 6",
                rec.points.len()
            )));
        }
        let status = match rec.cut_status.as_deref() {
            None => CutStatus::Unknown,
            Some(s) => CutStatus::parse(s).ok_or_else(|| parse_err(format!("unknown cut_status `{s}`")))?,
        };
        if let (Some(label), Some(names)) = (rec.label, class_names) {
            if label >= names.len() {
                return Err(Error::LabelOutOfRange { label, num_classes: names.len() });
            }
        }
        match &subject {
            None => subject = Some(rec.subject.clone()),
            Some(s) if *s != rec.subject => {
                return Err(parse_err(format!(
                    "subject `{}` differs from `{s}` earlier in the file",
                    rec.subject
                )))
            }
            _ => {}
        }
        let points = rec
            .points
            .chunks_exact(3)
            .map(|c| Point::new(c[0], c[1], c[2]))
            .collect();
        let index = streamlines.len();
        let s = Streamline::new(points)
            .map_err(|e| parse_err(e.to_string()))?
            .with_label(rec.label)
            .with_cut_status(status)
            .with_source_index(Some(index));
        streamlines.push(s);
    }
    Tractogram::new(
        streamlines,
        subject.unwrap_or_default(),
        "ras",
        class_names.map(<[String]>::to_vec).unwrap_or_default(),
    )
}

pub fn write_jsonl(t: &Tractogram, mut writer: impl Write) -> Result<()> {
    for s in t.streamlines() {
        let rec = LabeledJsonlRecord {
            points: s.flat_coords().collect(),
            label: s.label,
            cut_status: match s.cut_status {
                CutStatus::Unknown => None,
                other => Some(other.as_str().to_string()),
            },
            subject: t.subject_id().to_string(),
        };
        serde_json::to_writer(&mut writer, &rec)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl_path(path: &Path, class_names: Option<&[String]>) -> Result<Tractogram> {
    read_jsonl(BufReader::new(File::open(path)?), class_names)
}

pub fn write_jsonl_path(t: &Tractogram, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_jsonl(t, &mut w)?;
    w.flush()?;
    Ok(())
}
