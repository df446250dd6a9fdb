//! Report bundle: correlation and MAPE tables (parameter x kind/method,
//! mean ± std over seeds) and grouped bar charts of the same numbers.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::config::Method;
use crate::error::{CliError, Result};
use crate::pipeline::{RunManifest, Stage};
use crate::store::Store;
use crate::tables::{read_eval_csv, ScoreRow};

/// One evaluated run: which kind, method and seed it scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub kind: String,
    pub method: String,
    pub seed: u64,
    pub rows: Vec<ScoreRow>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

/// Sample standard deviation; zero for a single seed.
pub fn summarize(values: &[f64]) -> Option<Cell> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std =
        if n > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
    Some(Cell { mean, std, n })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub metric: &'static str,
    /// `<kind>/<method>`
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<Cell>>)>,
}

impl Table {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(std::iter::once("parameter".to_string()).chain(self.columns.iter().cloned()))?;
        for (p, cells) in &self.rows {
            w.write_record(
                std::iter::once(p.clone()).chain(cells.iter().map(|c| c.map(|c| c.to_string()).unwrap_or_default())),
            )?;
        }
        w.into_inner().map_err(|e| CliError::Io(e.into_error()))
    }

    pub fn cell(&self, parameter: &str, column: &str) -> Option<Cell> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|(p, _)| p == parameter)?.1[c]
    }
}

fn method_rank(m: &str) -> usize {
    Method::ALL.iter().position(|x| x.as_str() == m).unwrap_or(usize::MAX)
}

/// Build one table from per-seed evaluations. Rows keep the parameter order
/// of the evaluation CSVs; rows with no defined value anywhere are dropped.
pub fn build_table(evals: &[Evaluation], metric: &'static str) -> Result<Table> {
    if evals.is_empty() {
        return Err(CliError::Usage("no evaluation results to report".into()));
    }
    let mut cols: Vec<(String, String)> = Vec::new();
    for e in evals {
        let c = (e.kind.clone(), e.method.clone());
        if !cols.contains(&c) {
            cols.push(c);
        }
    }
    cols.sort_by(|a, b| (&a.0, method_rank(&a.1)).cmp(&(&b.0, method_rank(&b.1))));
    let params: Vec<String> = evals[0].rows.iter().map(|r| r.parameter.clone()).collect();
    let pick = |r: &ScoreRow| if metric == "pearson" { r.pearson } else { r.mape };
    let mut rows = Vec::new();
    for p in &params {
        let cells: Vec<Option<Cell>> = cols
            .iter()
            .map(|(k, m)| {
                let vals: Vec<f64> = evals
                    .iter()
                    .filter(|e| &e.kind == k && &e.method == m)
                    .filter_map(|e| e.rows.iter().find(|r| &r.parameter == p).and_then(pick))
                    .collect();
                summarize(&vals)
            })
            .collect();
        if cells.iter().any(Option::is_some) {
            rows.push((p.clone(), cells));
        }
    }
    Ok(Table { metric, columns: cols.into_iter().map(|(k, m)| format!("{k}/{m}")).collect(), rows })
}

/// Evaluation results referenced by a manifest, each verified on load.
pub fn collect(store: &Store, manifest: &RunManifest) -> Result<Vec<Evaluation>> {
    let mut seen = BTreeMap::new();
    for rec in manifest.of_stage(Stage::Evaluate) {
        let get = |k: &str| {
            rec.tags.get(k).cloned().ok_or_else(|| CliError::Usage(format!("evaluation {} lacks tag `{k}`", rec.name)))
        };
        let seed: u64 =
            get("seed")?.parse().map_err(|_| CliError::Usage(format!("evaluation {} has a bad seed", rec.name)))?;
        let artifact =
            rec.artifacts.first().ok_or_else(|| CliError::Usage(format!("evaluation {} has no artifact", rec.name)))?;
        let rows = read_eval_csv(store.read(artifact)?.as_slice())?;
        seen.insert(rec.name.clone(), Evaluation { kind: get("kind")?, method: get("method")?, seed, rows });
    }
    Ok(seen.into_values().collect())
}

fn bar_chart(table: &Table, path: &Path) -> Result<()> {
    let plot = |e: &dyn std::fmt::Display| CliError::Plot(e.to_string());
    let values: Vec<f64> = table.rows.iter().flat_map(|(_, c)| c.iter().flatten().map(|c| c.mean)).collect();
    let lo = values.iter().copied().fold(0.0, f64::min);
    let hi = values.iter().copied().fold(0.0, f64::max);
    let pad = 0.05 * (hi - lo).max(1e-9);
    let (n_rows, n_cols) = (table.rows.len(), table.columns.len().max(1));

    let root = SVGBackend::new(path, (160 + 70 * n_rows as u32, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(table.metric, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..n_rows as f64, (lo - pad)..(hi + pad))
        .map_err(|e| plot(&e))?;
    let names: Vec<String> = table.rows.iter().map(|(p, _)| p.clone()).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n_rows)
        .x_label_formatter(&|x| names.get(x.floor() as usize).cloned().unwrap_or_default())
        .draw()
        .map_err(|e| plot(&e))?;

    let width = 0.8 / n_cols as f64;
    for (j, col) in table.columns.iter().enumerate() {
        let color = Palette99::pick(j).to_rgba();
        let bars = table.rows.iter().enumerate().filter_map(|(i, (_, cells))| {
            cells[j].map(|c| {
                let x0 = i as f64 + 0.1 + j as f64 * width;
                Rectangle::new([(x0, 0.0), (x0 + width, c.mean)], color.filled())
            })
        });
        chart
            .draw_series(bars)
            .map_err(|e| plot(&e))?
            .label(col.as_str())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot(&e))?;
    root.present().map_err(|e| plot(&e))?;
    Ok(())
}

/// Files written for one report.
#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub dir: PathBuf,
    pub correlation: Table,
    pub mape: Table,
}

pub fn write_report(evals: &[Evaluation], dir: &Path) -> Result<ReportBundle> {
    let correlation = build_table(evals, "pearson")?;
    let mape = build_table(evals, "mape")?;
    fs::create_dir_all(dir)?;
    crate::store::write_atomic(&dir.join("correlation.csv"), &correlation.to_csv()?)?;
    crate::store::write_atomic(&dir.join("mape.csv"), &mape.to_csv()?)?;
    bar_chart(&correlation, &dir.join("correlation.svg"))?;
    bar_chart(&mape, &dir.join("mape.svg"))?;
    Ok(ReportBundle { dir: dir.to_path_buf(), correlation, mape })
}

/// Report for a finished run, written under the store's report directory.
pub fn report(store: &Store, manifest: &RunManifest) -> Result<ReportBundle> {
    let evals = collect(store, manifest)?;
    write_report(&evals, &store.report_dir(&manifest.config_hash))
}
