//! Layer × module sensitivity heatmaps as CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::sensitivity::SensitivityMap;
use crate::tinylm::{ParamName, Role};

/// Rescales to `[0, 1]`. A constant input maps to all zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.0; values.len()];
    }
    // Clamp: (v - lo) / range can round a hair above 1.
    values.iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// Column order.
    pub roles: Vec<Role>,
    /// `[layer][role]`: mean of the matrix's min-max normalized scores.
    pub mean_normalized: Vec<Vec<f64>>,
    /// `[layer][role]`: raw score total of the matrix.
    pub raw_sums: Vec<Vec<f64>>,
}

pub fn build_heatmap(map: &SensitivityMap) -> Result<Heatmap> {
    let layers = map.scores().config().num_layers;
    if layers == 0 {
        return Err(Error::InvalidInput("sensitivity map has no layers".into()));
    }
    let roles = Role::LAYER_MATRICES.to_vec();
    let mut mean_normalized = Vec::with_capacity(layers);
    let mut raw_sums = Vec::with_capacity(layers);
    for l in 0..layers {
        let (mut means, mut sums) = (Vec::new(), Vec::new());
        for &r in &roles {
            let m = map
                .matrix(&ParamName::layer(l, r))
                .ok_or_else(|| Error::Shape(format!("map lacks layer{l}.{r}")))?;
            let norm = min_max_normalize(m.as_slice());
            means.push(norm.iter().sum::<f64>() / norm.len() as f64);
            sums.push(m.sum());
        }
        mean_normalized.push(means);
        raw_sums.push(sums);
    }
    Ok(Heatmap {
        roles,
        mean_normalized,
        raw_sums,
    })
}

impl Heatmap {
    fn csv(&self, cells: &[Vec<f64>]) -> String {
        let mut out = String::from("layer");
        for r in &self.roles {
            write!(out, ",{r}").expect("string write");
        }
        out.push('\n');
        for (l, row) in cells.iter().enumerate() {
            write!(out, "{l}").expect("string write");
            for v in row {
                write!(out, ",{v}").expect("string write");
            }
            out.push('\n');
        }
        out
    }

    pub fn normalized_csv(&self) -> String {
        self.csv(&self.mean_normalized)
    }

    pub fn sums_csv(&self) -> String {
        self.csv(&self.raw_sums)
    }
}

/// Writes the normalized heatmap to `path` and the raw sums next to it as `<stem>.sums.csv`.
/// Returns both paths.
pub fn export_heatmap(map: &SensitivityMap, path: &Path) -> Result<(PathBuf, PathBuf)> {
    let h = build_heatmap(map)?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("heatmap");
    let sums = path.with_file_name(format!("{stem}.sums.csv"));
    fs::write(path, h.normalized_csv()).map_err(|e| Error::io(path, e))?;
    fs::write(&sums, h.sums_csv()).map_err(|e| Error::io(&sums, e))?;
    Ok((path.to_path_buf(), sums))
}
