//! Feature tables: headerless CSV, one row per sample with `d * N` feature
//! columns followed by the label, plus a JSON sidecar.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::IntrospectiveFeature;
use crate::error::{Error, Result};

pub const SCALE_CONVENTION: &str = "max-abs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub penultimate_dim: usize,
    pub num_classes: usize,
    pub loss: String,
    pub m: Option<f64>,
    pub scale_convention: String,
    pub layout: String,
    pub rows: usize,
    pub source_checkpoint_sha256: String,
}

impl FeatureSidecar {
    pub fn width(&self) -> usize {
        self.penultimate_dim * self.num_classes
    }
}

pub fn write_feature_table(csv_path: &Path, sidecar_path: &Path, features: &[IntrospectiveFeature], labels: &[usize], sidecar: &FeatureSidecar) -> Result<()> {
    if features.len() != labels.len() {
        return Err(Error::Shape(format!("{} features but {} labels", features.len(), labels.len())));
    }
    let mut out = String::new();
    for (f, y) in features.iter().zip(labels) {
        for v in f.vectorized() {
            write!(out, "{v},").unwrap();
        }
        writeln!(out, "{y}").unwrap();
    }
    std::fs::write(csv_path, out).map_err(|e| Error::io(csv_path, e))?;
    let json = serde_json::to_string_pretty(sidecar).expect("sidecar serialises");
    std::fs::write(sidecar_path, json).map_err(|e| Error::io(sidecar_path, e))
}

/// Parses table text; every row must have exactly `width` features.
pub fn parse_feature_table(text: &str, width: usize, origin: &str) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let at = (lineno + 1) as u64;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width + 1 {
            return Err(Error::format(origin, at, format!("expected {} fields, found {}", width + 1, fields.len())));
        }
        let row = fields[..width]
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::format(origin, at, format!("bad feature value `{s}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let label = fields[width]
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::format(origin, at, format!("bad label `{}`", fields[width])))?;
        feats.push(row);
        labels.push(label);
    }
    Ok((feats, labels))
}

pub fn read_feature_table(csv_path: &Path, sidecar_path: &Path) -> Result<(FeatureSidecar, Vec<Vec<f64>>, Vec<usize>)> {
    let side = std::fs::read(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?;
    let sidecar: FeatureSidecar = serde_json::from_slice(&side)
        .map_err(|e| Error::format(sidecar_path.display(), e.line() as u64, e.to_string()))?;
    let text = std::fs::read_to_string(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let (feats, labels) = parse_feature_table(&text, sidecar.width(), &csv_path.display().to_string())?;
    if feats.len() != sidecar.rows {
        return Err(Error::format(
            csv_path.display(),
            0,
            format!("sidecar declares {} rows, table has {}", sidecar.rows, feats.len()),
        ));
    }
    Ok((sidecar, feats, labels))
}
