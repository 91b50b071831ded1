//! Charts regenerated from run-directory CSVs alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};
use crate::output::{column, read_csv, text_column};
use crate::svg::{bar_chart, line_chart, Series};

type Inputs = [(String, PathBuf)];

fn label_of(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn series_name(label: &str, part: &str, many: bool) -> String {
    if many {
        format!("{label} {part}")
    } else {
        part.to_string()
    }
}

/// Mean weight per noise level at up to five checkpoints, evenly spaced
/// and always including the first and the last.
pub fn toy_weights_chart(files: &Inputs) -> CliResult<Option<String>> {
    let mut series = Vec::new();
    for (label, path) in files {
        let (h, rows) = read_csv(path)?;
        let (step, noise, weight) = (
            column(&h, &rows, "step")?,
            column(&h, &rows, "noise")?,
            column(&h, &rows, "weight")?,
        );
        let mut by_step: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
        for i in 0..rows.len() {
            by_step
                .entry(step[i] as u64)
                .or_default()
                .push((noise[i], weight[i]));
        }
        let steps: Vec<u64> = by_step.keys().copied().collect();
        let picks = 5.min(steps.len());
        let mut chosen: Vec<u64> = (0..picks)
            .map(|j| {
                steps[if picks == 1 {
                    0
                } else {
                    j * (steps.len() - 1) / (picks - 1)
                }]
            })
            .collect();
        chosen.dedup();
        for s in chosen {
            series.push(Series {
                name: series_name(label, &format!("step {s}"), files.len() > 1),
                points: by_step[&s].clone(),
            });
        }
    }
    Ok((!series.is_empty()).then(|| {
        line_chart(
            "Mean batch weight by noise level",
            "noise level",
            "mean softmax weight",
            &series,
        )
    }))
}

fn xy_chart(
    files: &Inputs,
    x: &str,
    y: &str,
    group: Option<&str>,
    title: &str,
) -> CliResult<Option<String>> {
    let mut series = Vec::new();
    for (label, path) in files {
        let (h, rows) = read_csv(path)?;
        let (xs, ys) = (column(&h, &rows, x)?, column(&h, &rows, y)?);
        match group {
            None => series.push(Series {
                name: label.clone(),
                points: xs.into_iter().zip(ys).collect(),
            }),
            Some(g) => {
                let keys = text_column(&h, &rows, g)?;
                let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
                for (k, p) in keys.into_iter().zip(xs.into_iter().zip(ys)) {
                    groups.entry(k).or_default().push(p);
                }
                for (k, points) in groups {
                    series.push(Series {
                        name: series_name(label, &format!("{g} {k}"), files.len() > 1),
                        points,
                    });
                }
            }
        }
    }
    Ok((!series.is_empty()).then(|| line_chart(title, x, y, &series)))
}

fn bars(files: &Inputs, key: &str, value: &str, title: &str) -> CliResult<Option<String>> {
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (label, path) in files {
        let (h, rows) = read_csv(path)?;
        let keys = text_column(&h, &rows, key)?;
        let vals = column(&h, &rows, value)?;
        for (k, v) in keys.into_iter().zip(vals) {
            labels.push(series_name(label, &k, files.len() > 1));
            values.push(v);
        }
    }
    Ok((!labels.is_empty()).then(|| bar_chart(title, value, &labels, &values)))
}

pub struct Charts {
    /// CSV files that fed at least one chart.
    pub read: Vec<PathBuf>,
    /// (file name, SVG) pairs.
    pub charts: Vec<(String, String)>,
}

fn csv_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let p = e.map_err(|e| CliError::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "csv") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Collects known CSVs across `dirs` and renders one chart per kind.
pub fn build(dirs: &[PathBuf]) -> CliResult<Charts> {
    let mut by_kind: BTreeMap<&'static str, Vec<(String, PathBuf)>> = BTreeMap::new();
    let mut read = Vec::new();
    for dir in dirs {
        let label = label_of(dir);
        for f in csv_files(dir)? {
            let stem = f
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let kind = match stem.as_str() {
                "toy_weights" => "toy_weights",
                "diagnostics" => "diagnostics",
                "autocorrelation" => "autocorrelation",
                "correlations" => "correlations",
                "regression" => "regression",
                "mixture" => "mixture",
                "sweep" => "sweep",
                "compute" => "compute",
                s if s.starts_with("curve") => "curves",
                _ => continue,
            };
            let name = if kind == "curves" {
                format!("{label}/{stem}")
            } else {
                label.clone()
            };
            by_kind.entry(kind).or_default().push((name, f.clone()));
            read.push(f);
        }
    }
    let mut charts = Vec::new();
    for (kind, files) in &by_kind {
        let svg = match *kind {
            "toy_weights" => toy_weights_chart(files)?,
            "diagnostics" => xy_chart(
                files,
                "outer_step",
                "meta_update_norm",
                Some("model_id"),
                "Meta-update norm per model",
            )?,
            "autocorrelation" => xy_chart(
                files,
                "step",
                "spearman_prev",
                None,
                "Rater score rank autocorrelation",
            )?,
            "correlations" => bars(
                files,
                "feature",
                "pearson_r",
                "Score correlation with heuristics",
            )?,
            "regression" => bars(
                files,
                "feature",
                "coef",
                "Lasso coefficients (standardized)",
            )?,
            "mixture" => xy_chart(
                files,
                "rho",
                "weight",
                Some("subset"),
                "Kept mixture by discard fraction",
            )?,
            "sweep" => xy_chart(
                files,
                "rho",
                "val_nll",
                None,
                "Final validation NLL by discard fraction",
            )?,
            "compute" => bars(
                files,
                "dataset",
                "step_fraction",
                "Steps to match the baseline (fraction)",
            )?,
            "curves" => {
                // The file label already names the series.
                let mut series = Vec::new();
                for (name, path) in files {
                    let (h, rows) = read_csv(path)?;
                    let pts = column(&h, &rows, "step")?
                        .into_iter()
                        .zip(column(&h, &rows, "val_nll")?)
                        .collect();
                    series.push(Series {
                        name: name.clone(),
                        points: pts,
                    });
                }
                Some(line_chart("Validation NLL", "step", "val_nll", &series))
            }
            _ => None,
        };
        if let Some(svg) = svg {
            charts.push((format!("{kind}.svg"), svg));
        }
    }
    Ok(Charts { read, charts })
}
