//! CSV forms of estimates and evaluation reports.

use std::io::{Read, Write};

use ppgen::domain::{BioParams, Statics, DYNAMIC_NAMES, N_STATIC, STATIC_NAMES};
use ppgen::inference::EvalReport;

use crate::error::{CliError, Result};

/// One row per pulse: statics, then the `dBV2` and `dBV3` series.
pub fn write_estimates(w: impl Write, est: &[BioParams]) -> Result<()> {
    let t = est.first().map_or(0, BioParams::timesteps);
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = vec!["pulse".into()];
    header.extend(STATIC_NAMES.iter().map(|s| s.to_string()));
    for name in DYNAMIC_NAMES {
        header.extend((0..t).map(|k| format!("{name}_{k}")));
    }
    out.write_record(&header)?;
    for (i, b) in est.iter().enumerate() {
        if b.timesteps() != t {
            return Err(CliError::Usage("estimates must share one pulse length".into()));
        }
        let row =
            std::iter::once(i.to_string()).chain(b.statics.0.iter().chain(&b.dbv2).chain(&b.dbv3).map(f64::to_string));
        out.write_record(row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_estimates(r: impl Read) -> Result<Vec<BioParams>> {
    let mut rdr = csv::Reader::from_reader(r);
    let width = rdr.headers()?.len();
    if width < 1 + N_STATIC + 2 || !(width - 1 - N_STATIC).is_multiple_of(2) {
        return Err(CliError::Usage(format!("estimates CSV has {width} columns")));
    }
    let t = (width - 1 - N_STATIC) / 2;
    rdr.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec?;
            let v = rec
                .iter()
                .skip(1)
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| CliError::Usage(format!("estimates row {}: {e}", i + 2)))?;
            let statics = Statics(v[..N_STATIC].try_into().expect("static columns"));
            Ok(BioParams::new(statics, v[N_STATIC..N_STATIC + t].to_vec(), v[N_STATIC + t..].to_vec())?)
        })
        .collect()
}

/// Scores for one (kind, method, seed): a row per parameter plus `macro`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub parameter: String,
    pub pearson: Option<f64>,
    pub mape: Option<f64>,
}

pub fn score_rows(report: &EvalReport) -> Vec<ScoreRow> {
    let statics =
        report.statics.iter().map(|s| ScoreRow { parameter: s.name.clone(), pearson: s.pearson, mape: s.mape });
    let dynamics =
        report.dynamics.iter().map(|d| ScoreRow { parameter: d.name.clone(), pearson: d.mean_corr, mape: None });
    let total = ScoreRow { parameter: "macro".into(), pearson: report.macro_corr(), mape: report.macro_mape() };
    statics.chain(dynamics).chain(std::iter::once(total)).collect()
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_eval_csv(w: impl Write, report: &EvalReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["parameter", "pearson", "mape"])?;
    for r in score_rows(report) {
        out.write_record([r.parameter, cell(r.pearson), cell(r.mape)])?;
    }
    out.flush()?;
    Ok(())
}

pub fn eval_csv_bytes(report: &EvalReport) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_eval_csv(&mut buf, report)?;
    Ok(buf)
}

pub fn read_eval_csv(r: impl Read) -> Result<Vec<ScoreRow>> {
    let parse = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            return Ok(None);
        }
        s.parse().map(Some).map_err(|e| CliError::Usage(format!("evaluation CSV value `{s}`: {e}")))
    };
    let mut rdr = csv::Reader::from_reader(r);
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            if rec.len() != 3 {
                return Err(CliError::Usage("evaluation CSV rows need 3 fields".into()));
            }
            Ok(ScoreRow { parameter: rec[0].to_string(), pearson: parse(&rec[1])?, mape: parse(&rec[2])? })
        })
        .collect()
}
