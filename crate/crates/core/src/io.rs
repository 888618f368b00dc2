//! File formats: panel ingestion and export, fit documents and tidy curves.
//!
//! Series files are either wide (one replicate per row, `T >= 8` numeric
//! columns, no header; an optional header starting with `replicate_id` marks
//! a keyed first column) or long (`replicate_id,t,value`, optional header).
//! Covariate files have a header of names, optionally led by `replicate_id`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bootstrap::ConfidenceBands;
use crate::error::{Error, Result};
use crate::pipeline::TwoStageFit;
use crate::regression::{EffectFunctions, Estimator};
use crate::spectral::TimeSeriesPanel;

pub const KEY_COLUMN: &str = "replicate_id";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SeriesFormat {
    Wide,
    Long,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub n: usize,
    pub t: usize,
    pub p: usize,
    pub format: SeriesFormat,
    /// Whether replicates were aligned by `replicate_id`.
    pub keyed: bool,
    /// Covariate rows whose key matched no series.
    pub dropped_rows: usize,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read_records(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let line = rec.position().map_or(out.len() + 1, |p| p.line() as usize);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        out.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(out)
}

fn parse_cell(path: &Path, line: usize, col: usize, cell: &str) -> Result<f64> {
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::data(format!(
            "{}: row {line}, column {}: '{cell}' is not a finite number",
            path.display(),
            col + 1
        ))),
    }
}

struct SeriesTable {
    ids: Option<Vec<String>>,
    rows: Vec<Vec<f64>>,
    format: SeriesFormat,
}

fn read_series(path: &Path) -> Result<SeriesTable> {
    let mut records = read_records(path)?;
    if records.is_empty() {
        return Err(Error::data(format!("{}: no data", path.display())));
    }
    let first = &records[0].1;
    let width = first.len();
    if width == 3 {
        let header = first[2].parse::<f64>().is_err();
        if header && first[0] != KEY_COLUMN {
            return Err(Error::data(format!(
                "{}: long-format header must start with '{KEY_COLUMN}'",
                path.display()
            )));
        }
        if header {
            records.remove(0);
        }
        return read_long(path, &records);
    }
    let header = first[0].parse::<f64>().is_err();
    let keyed = header && first[0] == KEY_COLUMN;
    if header && !keyed {
        return Err(Error::data(format!(
            "{}: row {}, column 1: '{}' is not a finite number",
            path.display(),
            records[0].0,
            first[0]
        )));
    }
    if keyed {
        records.remove(0);
    }
    let skip = usize::from(keyed);
    let mut ids = keyed.then(Vec::new);
    let mut rows = Vec::with_capacity(records.len());
    let expected = records.first().map_or(0, |r| r.1.len());
    for (line, rec) in &records {
        if rec.len() != expected {
            return Err(Error::data(format!(
                "{}: row {line} has {} columns, expected {expected} (unequal series lengths)",
                path.display(),
                rec.len()
            )));
        }
        if let Some(ids) = ids.as_mut() {
            ids.push(rec[0].clone());
        }
        let row = rec[skip..]
            .iter()
            .enumerate()
            .map(|(c, cell)| parse_cell(path, *line, c + skip, cell))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if let Some(ids) = &ids {
        check_unique(path, ids)?;
    }
    let t = expected - skip;
    if t < 8 {
        return Err(Error::data(format!(
            "{}: wide format needs at least 8 value columns, found {t}",
            path.display()
        )));
    }
    Ok(SeriesTable {
        ids,
        rows,
        format: SeriesFormat::Wide,
    })
}

fn read_long(path: &Path, records: &[(usize, Vec<String>)]) -> Result<SeriesTable> {
    let mut order: Vec<String> = Vec::new();
    let mut cells: HashMap<String, BTreeMap<i64, f64>> = HashMap::new();
    for (line, rec) in records {
        if rec.len() != 3 {
            return Err(Error::data(format!(
                "{}: row {line} has {} columns, expected 3 (replicate_id,t,value)",
                path.display(),
                rec.len()
            )));
        }
        let t: i64 = rec[1].parse().map_err(|_| {
            Error::data(format!(
                "{}: row {line}, column 2: '{}' is not an integer time index",
                path.display(),
                rec[1]
            ))
        })?;
        let v = parse_cell(path, *line, 2, &rec[2])?;
        let entry = cells.entry(rec[0].clone()).or_insert_with(|| {
            order.push(rec[0].clone());
            BTreeMap::new()
        });
        if entry.insert(t, v).is_some() {
            return Err(Error::data(format!(
                "{}: row {line}: duplicate entry for replicate '{}' at t = {t}",
                path.display(),
                rec[0]
            )));
        }
    }
    let t_min = cells.values().filter_map(|m| m.keys().next().copied()).min().unwrap_or(0);
    let t_max = cells.values().filter_map(|m| m.keys().last().copied()).max().unwrap_or(-1);
    let mut rows = Vec::with_capacity(order.len());
    for id in &order {
        let m = &cells[id];
        let mut row = Vec::with_capacity((t_max - t_min + 1) as usize);
        for t in t_min..=t_max {
            match m.get(&t) {
                Some(v) => row.push(*v),
                None => {
                    return Err(Error::data(format!(
                        "{}: replicate '{id}' has no value at t = {t}",
                        path.display()
                    )))
                }
            }
        }
        rows.push(row);
    }
    Ok(SeriesTable {
        ids: Some(order),
        rows,
        format: SeriesFormat::Long,
    })
}

fn check_unique(path: &Path, ids: &[String]) -> Result<()> {
    let mut seen = HashMap::new();
    for (i, id) in ids.iter().enumerate() {
        if let Some(prev) = seen.insert(id.as_str(), i) {
            return Err(Error::data(format!(
                "{}: duplicate replicate_id '{id}' in data rows {} and {}",
                path.display(),
                prev + 1,
                i + 1
            )));
        }
    }
    Ok(())
}

struct CovariateTable {
    names: Vec<String>,
    ids: Option<Vec<String>>,
    rows: Vec<Vec<f64>>,
}

fn read_covariates(path: &Path) -> Result<CovariateTable> {
    let mut records = read_records(path)?;
    if records.is_empty() {
        return Err(Error::data(format!("{}: no header row", path.display())));
    }
    let (_, header) = records.remove(0);
    let keyed = header[0] == KEY_COLUMN;
    let skip = usize::from(keyed);
    let names: Vec<String> = header[skip..].to_vec();
    if names.is_empty() {
        return Err(Error::data(format!("{}: no covariate columns", path.display())));
    }
    if let Some(c) = names.iter().position(|n| n.parse::<f64>().is_ok()) {
        return Err(Error::data(format!(
            "{}: column {}: header '{}' looks numeric; a header row of names is required",
            path.display(),
            c + skip + 1,
            names[c]
        )));
    }
    let mut ids = keyed.then(Vec::new);
    let mut rows = Vec::with_capacity(records.len());
    for (line, rec) in &records {
        if rec.len() != header.len() {
            return Err(Error::data(format!(
                "{}: row {line} has {} columns, header has {}",
                path.display(),
                rec.len(),
                header.len()
            )));
        }
        if let Some(ids) = ids.as_mut() {
            ids.push(rec[0].clone());
        }
        rows.push(
            rec[skip..]
                .iter()
                .enumerate()
                .map(|(c, cell)| parse_cell(path, *line, c + skip, cell))
                .collect::<Result<Vec<f64>>>()?,
        );
    }
    if let Some(ids) = &ids {
        check_unique(path, ids)?;
    }
    Ok(CovariateTable { names, ids, rows })
}

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let cols = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j])
}

/// Reads and validates a panel. Replicates keep the order of the series file.
pub fn ingest(series_path: &Path, covariates_path: &Path) -> Result<(TimeSeriesPanel, IngestReport)> {
    let series = read_series(series_path)?;
    let cov = read_covariates(covariates_path)?;
    let n = series.rows.len();
    let mut dropped_rows = 0;
    let (covariate_rows, keyed) = match (&series.ids, &cov.ids) {
        (Some(sids), Some(cids)) => {
            let index: HashMap<&str, usize> = cids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
            let mut rows = Vec::with_capacity(n);
            for id in sids {
                match index.get(id.as_str()) {
                    Some(&i) => rows.push(cov.rows[i].clone()),
                    None => {
                        return Err(Error::data(format!(
                            "{}: no covariates for replicate_id '{id}'",
                            covariates_path.display()
                        )))
                    }
                }
            }
            dropped_rows = cids.len() - n;
            (rows, true)
        }
        (None, Some(_)) => {
            return Err(Error::data(format!(
                "{} is keyed by {KEY_COLUMN} but {} is not",
                covariates_path.display(),
                series_path.display()
            )))
        }
        _ => {
            if cov.rows.len() != n {
                return Err(Error::data(format!(
                    "{} has {} rows but {} has {n} replicates",
                    covariates_path.display(),
                    cov.rows.len(),
                    series_path.display()
                )));
            }
            (cov.rows.clone(), false)
        }
    };
    let panel = TimeSeriesPanel::new(to_matrix(&series.rows), to_matrix(&covariate_rows), cov.names.clone())?;
    let report = IngestReport {
        n,
        t: panel.series_len(),
        p: panel.n_covariates(),
        format: series.format,
        keyed,
        dropped_rows,
    };
    Ok((panel, report))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn join_row<'a>(values: impl Iterator<Item = &'a f64>) -> String {
    values.map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Writes a panel in wide format with shortest round-trip decimals.
pub fn export_panel(panel: &TimeSeriesPanel, series_path: &Path, covariates_path: &Path) -> Result<()> {
    let mut s = String::new();
    for row in panel.series().row_iter() {
        s.push_str(&join_row(row.iter()));
        s.push('\n');
    }
    write_file(series_path, &s)?;
    let mut c = panel.covariate_names().join(",");
    c.push('\n');
    for row in panel.covariates().row_iter() {
        c.push_str(&join_row(row.iter()));
        c.push('\n');
    }
    write_file(covariates_path, &c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandsDocument {
    pub alpha_level: f64,
    pub replicates: usize,
    pub failed_draws: usize,
    /// Rows `(alpha, beta_1, ..., beta_P)`.
    pub lower: Vec<Vec<f64>>,
    pub upper: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDocument {
    pub version: String,
    pub seed: Option<u64>,
    #[serde(rename = "K")]
    pub k: usize,
    pub estimator: Estimator,
    pub covariate_names: Vec<String>,
    pub covariate_scales: Option<Vec<f64>>,
    pub intercept: Vec<f64>,
    /// `P` rows of `K` cepstral coefficients.
    #[serde(rename = "B")]
    pub coefficients: Vec<Vec<f64>>,
    pub frequencies: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<Vec<f64>>,
    pub bands: Option<BandsDocument>,
    pub aic: Option<BTreeMap<usize, f64>>,
    pub dimension_trace: Option<Vec<(usize, Option<f64>)>>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl FitDocument {
    pub fn new(
        fit: &TwoStageFit,
        covariate_names: &[String],
        effects: &EffectFunctions,
        bands: Option<&ConfidenceBands>,
        seed: Option<u64>,
    ) -> Self {
        FitDocument {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            k: fit.k(),
            estimator: fit.model.estimator,
            covariate_names: covariate_names.to_vec(),
            covariate_scales: fit.covariate_scales.as_ref().map(|s| s.iter().copied().collect()),
            intercept: fit.model.intercept.iter().copied().collect(),
            coefficients: rows_of(&fit.model.coefficients),
            frequencies: effects.frequencies.clone(),
            alpha: effects.alpha.clone(),
            beta: rows_of(&effects.beta),
            bands: bands.map(|b| BandsDocument {
                alpha_level: b.alpha,
                replicates: b.replicates,
                failed_draws: b.failed_draws,
                lower: rows_of(&b.lower),
                upper: rows_of(&b.upper),
                bias: rows_of(&b.bias),
            }),
            aic: fit.whittle.aic_trace.clone(),
            dimension_trace: fit.dimension_trace.clone(),
        }
    }
}

/// Tidy rows `target,frequency,estimate,lower,upper`; `lower` and `upper`
/// are empty without bands.
pub fn tidy_csv(covariate_names: &[String], effects: &EffectFunctions, bands: Option<&ConfidenceBands>) -> String {
    let mut out = String::from("target,frequency,estimate,lower,upper\n");
    let targets: Vec<String> = std::iter::once("alpha".to_string())
        .chain(covariate_names.iter().map(|n| format!("beta:{n}")))
        .collect();
    for (r, target) in targets.iter().enumerate() {
        for (c, w) in effects.frequencies.iter().enumerate() {
            let est = if r == 0 { effects.alpha[c] } else { effects.beta[(r - 1, c)] };
            let (lo, hi) = match bands {
                Some(b) => (b.lower[(r, c)].to_string(), b.upper[(r, c)].to_string()),
                None => (String::new(), String::new()),
            };
            let target = if target.contains([',', '"']) {
                format!("\"{}\"", target.replace('"', "\"\""))
            } else {
                target.clone()
            };
            out.push_str(&format!("{target},{w},{est},{lo},{hi}\n"));
        }
    }
    out
}

/// Writes `fit.json` and `effects.csv` into `dir`; returns their paths.
pub fn emit_fit(
    fit: &TwoStageFit,
    covariate_names: &[String],
    effects: &EffectFunctions,
    bands: Option<&ConfidenceBands>,
    seed: Option<u64>,
    dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let doc = FitDocument::new(fit, covariate_names, effects, bands, seed);
    let json = serde_json::to_string_pretty(&doc).map_err(|e| Error::Numerical(format!("serializing fit: {e}")))?;
    let json_path = dir.join("fit.json");
    write_file(&json_path, &(json + "\n"))?;
    let csv_path = dir.join("effects.csv");
    write_file(&csv_path, &tidy_csv(covariate_names, effects, bands))?;
    Ok((json_path, csv_path))
}

/// Writes `contents` to `dir/name`.
pub fn write_text(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    write_file(&path, contents)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    fn wide(n: usize, t: usize) -> String {
        (0..n)
            .map(|j| (0..t).map(|i| ((i * 7 + j * 3) % 11).to_string()).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
            .join("\n")
    }

    #[test]
    fn wide_panel() {
        let d = tempfile::tempdir().unwrap();
        let s = file(d.path(), "s.csv", &wide(3, 8));
        let c = file(d.path(), "c.csv", "age,dose\n1,2\n3,4\n5,7\n");
        let (panel, report) = ingest(&s, &c).unwrap();
        assert_eq!((report.n, report.t, report.p), (3, 8, 2));
        assert_eq!(report.format, SeriesFormat::Wide);
        assert_eq!(panel.covariate_names(), ["age", "dose"]);
    }

    #[test]
    fn long_panel_with_gap() {
        let d = tempfile::tempdir().unwrap();
        let mut body = String::from("replicate_id,t,value\n");
        for id in ["a", "b"] {
            for t in 1..=8 {
                if !(id == "b" && t == 5) {
                    body.push_str(&format!("{id},{t},{}\n", t * 2));
                }
            }
        }
        let s = file(d.path(), "s.csv", &body);
        let c = file(d.path(), "c.csv", "x\n1\n2\n");
        let err = ingest(&s, &c).unwrap_err().to_string();
        assert!(err.contains("'b'") && err.contains("t = 5"), "{err}");
    }

    #[test]
    fn keyed_alignment_and_errors() {
        let d = tempfile::tempdir().unwrap();
        let mut body = String::new();
        for id in ["r2", "r1", "r3"] {
            for t in 0..8 {
                body.push_str(&format!("{id},{t},{}\n", (t * t) as f64 + id.len() as f64));
            }
        }
        let s = file(d.path(), "s.csv", &body);
        let c = file(d.path(), "c.csv", "replicate_id,x\nr1,10\nr2,20\nr3,30\nr9,90\n");
        let (panel, report) = ingest(&s, &c).unwrap();
        assert!(report.keyed);
        assert_eq!(report.dropped_rows, 1);
        assert_eq!(panel.covariates().column(0).as_slice(), &[20.0, 10.0, 30.0]);

        let dup = file(d.path(), "dup.csv", "replicate_id,x\nr1,1\nr1,2\nr2,3\nr3,4\n");
        assert!(ingest(&s, &dup).unwrap_err().to_string().contains("duplicate"));

        let bad = file(d.path(), "bad.csv", &format!("{}\n1,2,x,4,5,6,7,8", wide(1, 8)));
        let c2 = file(d.path(), "c2.csv", "x\n1\n2\n");
        let err = ingest(&bad, &c2).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("row 2, column 3"), "{err}");

        let ragged = file(d.path(), "r.csv", &format!("{}\n1,2,3,4,5,6,7,8,9", wide(1, 8)));
        assert!(ingest(&ragged, &c2).unwrap_err().to_string().contains("unequal"));

        let short = file(d.path(), "c3.csv", "x\n1\n");
        assert!(ingest(&file(d.path(), "w.csv", &wide(2, 8)), &short).is_err());
    }

    #[test]
    fn export_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let series = DMatrix::from_fn(4, 13, |i, j| ((i * 13 + j) as f64).sin() * 1.7 + 0.1);
        let cov = DMatrix::from_fn(4, 2, |i, j| (i as f64 + 0.3) / (j as f64 + 3.0));
        let panel = TimeSeriesPanel::new(series, cov, vec!["u".into(), "v".into()]).unwrap();
        let (s, c) = (d.path().join("s.csv"), d.path().join("c.csv"));
        export_panel(&panel, &s, &c).unwrap();
        let (back, _) = ingest(&s, &c).unwrap();
        assert_eq!(back, panel);
    }
}
