//! Merges repeated runs (one directory per seed) into mean ± range summaries.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{sha256_hex, Manifest, Pipeline};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    fn of(values: &[f64]) -> Spread {
        Spread {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

impl fmt::Display for Spread {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4e} [{:.4e}, {:.4e}]", self.mean, self.min, self.max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WidthSummary {
    pub m: usize,
    pub final_risk: Spread,
    /// Coupling runs only.
    pub scaled_func_error: Option<Spread>,
    pub scaled_param_error: Option<Spread>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub name: String,
    pub pipeline: Pipeline,
    pub runs: Vec<PathBuf>,
    /// Zero step size, or coupling errors identically zero.
    pub trivial: bool,
    pub widths: Vec<WidthSummary>,
    /// Largest `max/min` across widths of the seed-averaged scaled errors over time.
    pub func_stability: Option<f64>,
    pub param_stability: Option<f64>,
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} ({:?}, {} runs)", self.name, self.pipeline, self.runs.len())?;
        if self.trivial {
            writeln!(f, "TRIVIAL: nothing moved in this run")?;
        }
        for w in &self.widths {
            write!(f, "m = {:>6}  risk {}", w.m, w.final_risk)?;
            if let (Some(a), Some(b)) = (w.scaled_func_error, w.scaled_param_error) {
                write!(f, "  m·FE {a}  m·(EΔ)² {b}")?;
            }
            writeln!(f)?;
        }
        if let (Some(a), Some(b)) = (self.func_stability, self.param_stability) {
            writeln!(f, "width stability: function {a:.3}, parameter {b:.3}")?;
        }
        Ok(())
    }
}

/// Loads a run and checks that every listed file is present and unchanged.
fn load_complete(dir: &Path) -> Result<Manifest> {
    let manifest = Manifest::load(dir)?;
    for entry in &manifest.files {
        let p = dir.join(&entry.path);
        let bytes = fs::read(&p).map_err(|_| Error::Format(format!("incomplete run: {} missing", p.display())))?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::Format(format!("{} does not match its manifest hash", p.display())));
        }
    }
    Ok(manifest)
}

/// Column `col` of a CSV written by the pipelines.
fn column(path: &Path, col: &str) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let k = r
        .headers()?
        .iter()
        .position(|h| h == col)
        .ok_or_else(|| Error::Format(format!("{}: no column {col}", path.display())))?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            rec[k]
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// Elementwise seed mean of equally long curves.
fn mean_curve(curves: &[Vec<f64>]) -> Vec<f64> {
    let n = curves.iter().map(Vec::len).min().unwrap_or(0);
    (0..n)
        .map(|t| curves.iter().map(|c| c[t]).sum::<f64>() / curves.len() as f64)
        .collect()
}

fn stability(curves: &[Vec<f64>]) -> Option<f64> {
    let n = curves.iter().map(Vec::len).min()?;
    (0..n)
        .filter_map(|t| {
            let max = curves.iter().map(|c| c[t]).fold(f64::NEG_INFINITY, f64::max);
            let min = curves.iter().map(|c| c[t]).fold(f64::INFINITY, f64::min);
            (max > 0.0).then_some(max / min)
        })
        .reduce(f64::max)
}

pub fn report(dirs: &[PathBuf]) -> Result<Report> {
    if dirs.is_empty() {
        return Err(Error::InvalidArgument("no run directories".into()));
    }
    let manifests = dirs.iter().map(|d| load_complete(d)).collect::<Result<Vec<_>>>()?;
    let first = &manifests[0];
    if let Some(other) = manifests.iter().find(|m| m.name != first.name || m.config.widths != first.config.widths) {
        return Err(Error::InvalidArgument(format!(
            "runs disagree: {} vs {}",
            first.name, other.name
        )));
    }
    let pipeline = first.pipeline;
    let coupling = matches!(pipeline, Pipeline::Couple | Pipeline::Potential);
    let trivial = manifests.iter().any(|m| {
        m.config.schedule.eta == 0.0 || m.summary.get("trivial").and_then(|v| v.as_bool()) == Some(true)
    });
    let mut widths = Vec::new();
    let (mut func_curves, mut param_curves) = (Vec::new(), Vec::new());
    for &m in &first.config.widths {
        let (file, risk_col) = if coupling {
            (format!("coupling_m{m}.csv"), "risk")
        } else if pipeline == Pipeline::Flow {
            (format!("flow_m{m}.csv"), "loss_pop")
        } else {
            continue;
        };
        let last = |dir: &PathBuf, col: &str| -> Result<f64> {
            column(&dir.join(&file), col)?
                .last()
                .copied()
                .ok_or_else(|| Error::Format(format!("{file} is empty")))
        };
        let risks = dirs.iter().map(|d| last(d, risk_col)).collect::<Result<Vec<_>>>()?;
        let mut summary = WidthSummary {
            m,
            final_risk: Spread::of(&risks),
            scaled_func_error: None,
            scaled_param_error: None,
        };
        if coupling {
            let fe = dirs.iter().map(|d| last(d, "scaled_func_error")).collect::<Result<Vec<_>>>()?;
            let pe = dirs.iter().map(|d| last(d, "scaled_param_error")).collect::<Result<Vec<_>>>()?;
            summary.scaled_func_error = Some(Spread::of(&fe));
            summary.scaled_param_error = Some(Spread::of(&pe));
            let curves = |col: &str| -> Result<Vec<f64>> {
                let all = dirs.iter().map(|d| column(&d.join(&file), col)).collect::<Result<Vec<_>>>()?;
                Ok(mean_curve(&all))
            };
            func_curves.push(curves("scaled_func_error")?);
            param_curves.push(curves("scaled_param_error")?);
        }
        widths.push(summary);
    }
    Ok(Report {
        name: first.name.clone(),
        pipeline,
        runs: dirs.to_vec(),
        trivial,
        widths,
        func_stability: stability(&func_curves),
        param_stability: stability(&param_curves),
    })
}
