//! Long-format CSV panels.
//!
//! Expected header: `timestamp,series_id,value[,<covariate columns>...]`
//! with ISO-8601 timestamps on an hourly grid. Gaps are forward-filled and
//! flagged through a dedicated covariate.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Datelike, NaiveDateTime, Timelike};

use super::SeriesBatch;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Which covariates to attach when loading a panel.
#[derive(Debug, Clone)]
pub struct CovariateSpec {
    /// 24-wide one-hot of the hour of day.
    pub hour_of_day: bool,
    /// 7-wide one-hot of the day of week (Monday = 0).
    pub day_of_week: bool,
    /// 1 on rows that were forward-filled over a gap.
    pub gap_flag: bool,
    /// Covariate columns read straight from the file.
    pub columns: Vec<String>,
}

impl Default for CovariateSpec {
    fn default() -> Self {
        CovariateSpec {
            hour_of_day: true,
            day_of_week: true,
            gap_flag: true,
            columns: Vec::new(),
        }
    }
}

impl CovariateSpec {
    /// Covariates from file columns only (no calendar features).
    pub fn columns_only(columns: &[&str]) -> Self {
        CovariateSpec {
            hour_of_day: false,
            day_of_week: false,
            gap_flag: false,
            columns: columns.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn width(&self) -> usize {
        let mut w = self.columns.len();
        if self.hour_of_day {
            w += 24;
        }
        if self.day_of_week {
            w += 7;
        }
        if self.gap_flag {
            w += 1;
        }
        w
    }

    fn fill_row(&self, out: &mut [f64], ts: NaiveDateTime, file_covs: &[f64], gap: bool) {
        let mut o = 0;
        for v in file_covs {
            out[o] = *v;
            o += 1;
        }
        if self.hour_of_day {
            out[o + ts.hour() as usize] = 1.0;
            o += 24;
        }
        if self.day_of_week {
            out[o + ts.weekday().num_days_from_monday() as usize] = 1.0;
            o += 7;
        }
        if self.gap_flag {
            out[o] = if gap { 1.0 } else { 0.0 };
        }
    }
}

fn parse_timestamp(s: &str, line: u64) -> Result<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .map_err(|_| Error::Data(format!("line {line}: unparseable timestamp '{s}'")))
}

struct RawRow {
    value: f64,
    covs: Vec<f64>,
}

/// Loads a long-format hourly panel, pivots it per series, forward-fills
/// gaps, and attaches the requested covariates. Series may differ in length;
/// the batch is padded to the longest.
pub fn load_csv_panel(path: &Path, spec: &CovariateSpec) -> Result<SeriesBatch> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|_| Error::MissingArtifact(format!("csv panel {}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .clone();
    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("{}: missing column '{name}'", path.display())))
    };
    let ts_col = col_index("timestamp")?;
    let id_col = col_index("series_id")?;
    let val_col = col_index("value")?;
    let file_cov_cols: Vec<usize> = spec
        .columns
        .iter()
        .map(|c| col_index(c))
        .collect::<Result<_>>()?;

    let mut series: BTreeMap<String, BTreeMap<NaiveDateTime, RawRow>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let line = record.position().map_or(0, |p| p.line());
        let ts = parse_timestamp(&record[ts_col], line)?;
        let id = record[id_col].to_string();
        let value: f64 = record[val_col]
            .parse()
            .map_err(|_| Error::Data(format!("line {line}: unparseable value '{}'", &record[val_col])))?;
        let covs: Vec<f64> = file_cov_cols
            .iter()
            .map(|&c| {
                record[c].parse().map_err(|_| {
                    Error::Data(format!("line {line}: unparseable covariate '{}'", &record[c]))
                })
            })
            .collect::<Result<_>>()?;
        let per_series = series.entry(id.clone()).or_default();
        if per_series.insert(ts, RawRow { value, covs }).is_some() {
            return Err(Error::Data(format!(
                "line {line}: duplicate (timestamp, series) pair ({ts}, {id})"
            )));
        }
    }
    if series.is_empty() {
        return Err(Error::Data(format!("{}: no rows", path.display())));
    }

    // Forward-fill each series onto its own hourly grid.
    let step = chrono::Duration::hours(1);
    let mut filled: Vec<(String, Vec<(NaiveDateTime, f64, Vec<f64>, bool)>)> = Vec::new();
    for (id, rows) in series {
        let mut grid = Vec::new();
        let mut prev: Option<&RawRow> = None;
        let mut cursor = *rows.keys().next().expect("nonempty");
        let last = *rows.keys().next_back().expect("nonempty");
        while cursor <= last {
            match rows.get(&cursor) {
                Some(row) => {
                    grid.push((cursor, row.value, row.covs.clone(), false));
                    prev = Some(row);
                }
                None => {
                    let p = prev.expect("first grid point always observed");
                    grid.push((cursor, p.value, p.covs.clone(), true));
                }
            }
            cursor += step;
        }
        filled.push((id, grid));
    }

    let t_max = filled.iter().map(|(_, g)| g.len()).max().unwrap_or(0);
    let b = filled.len();
    let n = spec.width();
    let mut y = vec![0.0; b * t_max];
    let mut u = vec![0.0; b * t_max * n];
    let mut lengths = Vec::with_capacity(b);
    let mut ids = Vec::with_capacity(b);
    for (i, (id, grid)) in filled.iter().enumerate() {
        lengths.push(grid.len());
        ids.push(id.clone());
        for (t, (ts, value, covs, gap)) in grid.iter().enumerate() {
            y[i * t_max + t] = *value;
            spec.fill_row(&mut u[(i * t_max + t) * n..(i * t_max + t + 1) * n], *ts, covs, *gap);
        }
    }
    SeriesBatch::new(
        Tensor::new(vec![b, t_max, 1], y)?,
        Tensor::new(vec![b, t_max, n], u)?,
        lengths,
        ids,
    )
}

/// Writes a batch in the long CSV format. Covariate columns named `u0..`
/// are emitted when `covariate_columns > 0` (values taken from the batch's
/// first `covariate_columns` covariates).
pub fn export_csv_panel(
    path: &Path,
    batch: &SeriesBatch,
    covariate_columns: usize,
    start: NaiveDateTime,
) -> Result<()> {
    if batch.obs_dim() != 1 {
        return Err(Error::Data("csv export supports scalar observations".into()));
    }
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::io(path.display().to_string(), e.into()))?;
    let mut header = vec!["timestamp".to_string(), "series_id".into(), "value".into()];
    for j in 0..covariate_columns {
        header.push(format!("u{j}"));
    }
    writer
        .write_record(&header)
        .map_err(|e| Error::Data(format!("csv write: {e}")))?;
    for i in 0..batch.n_series() {
        for t in 0..batch.lengths[i] {
            let ts = start + chrono::Duration::hours(t as i64);
            let mut row = vec![
                ts.format("%Y-%m-%dT%H:%M:%S").to_string(),
                batch.ids[i].clone(),
                format!("{:.17e}", batch.y_row(i, t)[0]),
            ];
            for j in 0..covariate_columns {
                row.push(format!("{:.17e}", batch.u_row(i, t)[j]));
            }
            writer
                .write_record(&row)
                .map_err(|e| Error::Data(format!("csv write: {e}")))?;
        }
    }
    writer
        .flush()
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Writes true latent paths as `t,series_id,beta1,...,betaD`.
pub fn export_latents_csv(path: &Path, batch: &SeriesBatch) -> Result<()> {
    let lat = batch
        .latents
        .as_ref()
        .ok_or_else(|| Error::Data("batch carries no latent paths".into()))?;
    let d = lat.shape()[2];
    let t_max = batch.max_len();
    let mut out = String::from("t,series_id");
    for j in 1..=d {
        out.push_str(&format!(",beta{j}"));
    }
    out.push('\n');
    for i in 0..batch.n_series() {
        for t in 0..batch.lengths[i] {
            out.push_str(&format!("{t},{}", batch.ids[i]));
            for j in 0..d {
                out.push_str(&format!(",{:.17e}", lat.data()[(i * t_max + t) * d + j]));
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Loads a latent sidecar written by [`export_latents_csv`] and attaches it
/// to a batch, matching series by id.
pub fn load_latents_csv(path: &Path, batch: &mut SeriesBatch) -> Result<()> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|_| Error::MissingArtifact(format!("latent sidecar {}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .clone();
    let d = headers.len().saturating_sub(2);
    if d == 0 {
        return Err(Error::Data(format!("{}: no latent columns", path.display())));
    }
    let t_max = batch.max_len();
    let mut data = vec![0.0; batch.n_series() * t_max * d];
    let index: std::collections::HashMap<&str, usize> = batch
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let line = record.position().map_or(0, |p| p.line());
        let t: usize = record[0]
            .parse()
            .map_err(|_| Error::Data(format!("line {line}: bad t '{}'", &record[0])))?;
        let Some(&i) = index.get(&record[1]) else {
            continue; // sidecar may cover more series than the batch
        };
        for j in 0..d {
            data[(i * t_max + t) * d + j] = record[2 + j]
                .parse()
                .map_err(|_| Error::Data(format!("line {line}: bad value '{}'", &record[2 + j])))?;
        }
    }
    batch.latents = Some(Tensor::new(vec![batch.n_series(), t_max, d], data)?);
    Ok(())
}

/// Default timestamp origin for simulated panels.
pub fn default_start() -> NaiveDateTime {
    chrono::NaiveDate::from_ymd_opt(2021, 1, 1)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap()
}
