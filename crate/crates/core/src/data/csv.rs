//! Headerless CSV datasets: `label,x0,x1,...` per line.

use std::fmt::Write as _;
use std::path::Path;

use super::{LabeledDataset, Shape};
use crate::error::{Error, Result};

pub fn parse_csv_dataset(text: &str, origin: &str) -> Result<LabeledDataset> {
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let at = (lineno + 1) as u64;
        let mut fields = line.split(',');
        let label_field = fields.next().unwrap_or_default().trim();
        let label = label_field
            .parse::<usize>()
            .map_err(|_| Error::format(origin, at, format!("bad label `{label_field}`")))?;
        let row = fields
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::format(origin, at, format!("bad value `{s}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::format(origin, at, format!("expected {w} values, found {}", row.len())))
            }
            _ => {}
        }
        samples.push(row);
        labels.push(label);
    }
    let num_classes = match labels.iter().max() {
        None => 0,
        Some(&m) => m.checked_add(1).ok_or_else(|| Error::format(origin, 0, "label out of range"))?,
    };
    LabeledDataset::new(samples, labels, num_classes, Shape::Flat { len: width.unwrap_or(0) })
}

pub fn to_csv_string(data: &LabeledDataset) -> String {
    let mut out = String::new();
    for (s, y) in data.samples.iter().zip(&data.labels) {
        write!(out, "{y}").unwrap();
        for v in s {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn load_csv(path: &Path) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv_dataset(&text, &path.display().to_string())
}

pub fn save_csv(data: &LabeledDataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_csv_string(data)).map_err(|e| Error::io(path, e))
}
