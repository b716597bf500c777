//! CSV matrices, the JSON fit document and trace output.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::em::{EmTrace, FitResult};
use crate::error::{Error, Result};
use crate::model::MixtureParams;

pub const FIT_DOCUMENT_VERSION: u32 = 1;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Parse a numeric CSV. A first row with any non-numeric cell is a header
/// and is skipped. Rows must all have the same length.
pub fn parse_matrix<R: Read>(reader: R, path: &Path) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let parse_err = |row: usize, message: String| Error::Parse {
        path: path.display().to_string(),
        row,
        message,
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (idx, record) in rdr.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| parse_err(row, e.to_string()))?;
        if record.iter().all(|c| c.is_empty()) {
            continue;
        }
        let cells: Vec<std::result::Result<f64, _>> = record.iter().map(str::parse::<f64>).collect();
        if idx == 0 && cells.iter().any(|c| c.is_err()) {
            continue;
        }
        let mut values = Vec::with_capacity(cells.len());
        for (col, cell) in cells.into_iter().enumerate() {
            match cell {
                Ok(v) if v.is_finite() => values.push(v),
                _ => {
                    return Err(parse_err(
                        row,
                        format!("column {}: {:?} is not a finite number", col + 1, &record[col]),
                    ))
                }
            }
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(parse_err(row, format!("expected {w} columns, found {}", values.len())))
            }
            _ => {}
        }
        rows.push(values);
    }
    let ncols = width.ok_or_else(|| parse_err(0, "no data rows".into()))?;
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let file = File::open(path).map_err(io_err(path))?;
    parse_matrix(file, path)
}

/// Write a matrix as CSV with an optional header row. Values use the
/// shortest representation that parses back to the same number.
pub fn write_matrix(path: &Path, m: &DMatrix<f64>, header: Option<&[String]>) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    let doc = |e: csv::Error| Error::Document(e.to_string());
    if let Some(h) = header {
        w.write_record(h).map_err(doc)?;
    }
    for row in m.row_iter() {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(doc)?;
    }
    w.flush().map_err(io_err(path))
}

/// Column means of `m` and the centered matrix.
pub fn center_columns(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let means = DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.mean()));
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    (means, out)
}

/// On-disk form of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDocument {
    pub version: u32,
    pub k: usize,
    pub p: usize,
    pub q: usize,
    pub omega: Vec<f64>,
    /// `beta[k][j]` is row `j` of mixture `k`'s p × q coefficient matrix.
    pub beta: Vec<Vec<Vec<f64>>>,
    pub sigma2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_y: Option<Vec<Vec<f64>>>,
    pub lambda: f64,
    pub bic: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub degenerate: bool,
    /// 1-based predictor indices with a nonzero coefficient.
    pub support: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_offsets: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_offsets: Option<Vec<f64>>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_of(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Document(format!("{what} must be {nrows} x {ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl FitDocument {
    pub fn from_fit(fit: &FitResult) -> Self {
        let params = &fit.params;
        Self {
            version: FIT_DOCUMENT_VERSION,
            k: params.k(),
            p: params.p(),
            q: params.q(),
            omega: params.omega.iter().copied().collect(),
            beta: params.beta.iter().map(rows_of).collect(),
            sigma2: params.sigma2,
            sigma_y: params.sigma_y.as_ref().map(rows_of),
            lambda: fit.lambda,
            bic: fit.bic,
            converged: fit.converged,
            iterations: fit.iterations(),
            degenerate: fit.degenerate(),
            support: fit.support.iter().map(|j| j + 1).collect(),
            x_offsets: None,
            y_offsets: None,
        }
    }

    pub fn params(&self) -> Result<MixtureParams> {
        if self.version != FIT_DOCUMENT_VERSION {
            return Err(Error::Document(format!(
                "unsupported document version {}",
                self.version
            )));
        }
        if self.omega.len() != self.k || self.beta.len() != self.k {
            return Err(Error::Document("omega and beta must have k entries".into()));
        }
        let beta = self
            .beta
            .iter()
            .map(|b| matrix_of(b, self.p, self.q, "beta"))
            .collect::<Result<Vec<_>>>()?;
        let mut params = MixtureParams::new(DVector::from_vec(self.omega.clone()), beta, self.sigma2)?;
        if let Some(s) = &self.sigma_y {
            params = params.with_sigma_y(matrix_of(s, self.q, self.q, "sigma_y")?)?;
        }
        Ok(params)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Document(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Document(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = File::create(path).map_err(io_err(path))?;
        file.write_all(self.to_json()?.as_bytes()).map_err(io_err(path))?;
        file.write_all(b"\n").map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }
}

/// Truth parameters in the fit document layout, for `evaluate`.
pub fn params_document(params: &MixtureParams) -> FitDocument {
    FitDocument {
        version: FIT_DOCUMENT_VERSION,
        k: params.k(),
        p: params.p(),
        q: params.q(),
        omega: params.omega.iter().copied().collect(),
        beta: params.beta.iter().map(rows_of).collect(),
        sigma2: params.sigma2,
        sigma_y: params.sigma_y.as_ref().map(rows_of),
        lambda: 0.0,
        bic: None,
        converged: true,
        iterations: 0,
        degenerate: false,
        support: params.support().iter().map(|j| j + 1).collect(),
        x_offsets: None,
        y_offsets: None,
    }
}

/// One row per EM iteration.
pub fn write_trace<W: Write>(trace: &EmTrace, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let doc = |e: csv::Error| Error::Document(e.to_string());
    w.write_record([
        "iteration",
        "lambda",
        "objective",
        "penalized_loglik",
        "loglik",
        "delta_beta",
        "sigma2",
        "solver_iterations",
        "solver_kkt_gap",
        "solver_converged",
        "omega",
    ])
    .map_err(doc)?;
    for r in &trace.records {
        let omega = r.omega.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";");
        w.write_record(&[
            r.iteration.to_string(),
            r.lambda.to_string(),
            r.objective.to_string(),
            r.penalized_loglik.to_string(),
            r.loglik.to_string(),
            r.delta_beta.to_string(),
            r.sigma2.to_string(),
            r.solver_iterations.to_string(),
            r.solver_kkt_gap.to_string(),
            r.solver_converged.to_string(),
            omega,
        ])
        .map_err(doc)?;
    }
    w.flush().map_err(|e| Error::Document(e.to_string()))
}
