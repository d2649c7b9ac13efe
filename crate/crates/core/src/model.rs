//! Dataset container, covariate standardization and CSV loading.

use std::io::Read;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ConquerError, Result};

/// Response vector plus a design matrix whose column 0 is the intercept.
///
/// Rows are stored contiguously (standard layout), which the solver relies on
/// for its per-observation loops.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Array1<f64>,
    x: Array2<f64>,
    names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset from a full design matrix. Column 0 must be all ones.
    pub fn new(y: Array1<f64>, x: Array2<f64>) -> Result<Self> {
        let names = default_names(x.ncols());
        Self::with_names(y, x, names)
    }

    pub fn with_names(y: Array1<f64>, x: Array2<f64>, names: Vec<String>) -> Result<Self> {
        let (n, p) = x.dim();
        if y.len() != n {
            return Err(ConquerError::DimensionMismatch {
                what: "response length vs design rows",
                expected: n,
                got: y.len(),
            });
        }
        if names.len() != p {
            return Err(ConquerError::DimensionMismatch {
                what: "coefficient names vs design columns",
                expected: p,
                got: names.len(),
            });
        }
        if p == 0 {
            return Err(ConquerError::InvalidData("design has no columns".into()));
        }
        if n < p {
            return Err(ConquerError::InvalidData(format!(
                "need at least as many observations as parameters (n = {n}, p = {p})"
            )));
        }
        if x.column(0).iter().any(|&v| v != 1.0) {
            return Err(ConquerError::InvalidData(
                "column 0 of the design must be the all-ones intercept".into(),
            ));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(ConquerError::InvalidData("non-finite entry in data".into()));
        }
        let x = if x.is_standard_layout() {
            x
        } else {
            x.as_standard_layout().into_owned()
        };
        Ok(Self { y, x, names })
    }

    /// Prepends the intercept column to raw covariates.
    pub fn from_covariates(y: Array1<f64>, covariates: Array2<f64>) -> Result<Self> {
        let names = default_names(covariates.ncols() + 1);
        Self::from_covariates_named(y, covariates, names)
    }

    pub fn from_covariates_named(
        y: Array1<f64>,
        covariates: Array2<f64>,
        names: Vec<String>,
    ) -> Result<Self> {
        let (n, k) = covariates.dim();
        let mut x = Array2::ones((n, k + 1));
        x.slice_mut(s![.., 1..]).assign(&covariates);
        Self::with_names(y, x, names)
    }

    pub fn y(&self) -> &Array1<f64> {
        &self.y
    }

    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Row-major view of the design.
    pub(crate) fn x_slice(&self) -> &[f64] {
        self.x.as_slice().expect("design kept in standard layout")
    }

    pub(crate) fn y_slice(&self) -> &[f64] {
        self.y.as_slice().expect("response is contiguous")
    }

    /// Same design, different response.
    pub fn with_response(&self, y: Array1<f64>) -> Result<Self> {
        Self::with_names(y, self.x.clone(), self.names.clone())
    }

    /// Rows reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.n() {
            return Err(ConquerError::DimensionMismatch {
                what: "permutation length",
                expected: self.n(),
                got: order.len(),
            });
        }
        let y = order.iter().map(|&i| self.y[i]).collect();
        let x = self.x.select(Axis(0), order);
        Self::with_names(y, x, self.names.clone())
    }
}

fn default_names(p: usize) -> Vec<String> {
    std::iter::once("(intercept)".to_string())
        .chain((1..p).map(|j| format!("x{j}")))
        .collect()
}

/// Per-column affine map applied by [`standardize`], intercept excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizeTransform {
    pub means: Array1<f64>,
    pub scales: Array1<f64>,
}

impl StandardizeTransform {
    pub fn identity(p: usize) -> Self {
        Self {
            means: Array1::zeros(p.saturating_sub(1)),
            scales: Array1::ones(p.saturating_sub(1)),
        }
    }

    fn check_dim(&self, p: usize) -> Result<()> {
        if self.means.len() + 1 != p || self.scales.len() + 1 != p {
            return Err(ConquerError::DimensionMismatch {
                what: "coefficient length vs transform",
                expected: self.means.len() + 1,
                got: p,
            });
        }
        Ok(())
    }

    /// Maps original-scale coefficients onto the standardized design.
    pub fn standardize_coefficients(&self, beta: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_dim(beta.len())?;
        let mut out = beta.to_owned();
        let mut shift = 0.0;
        for j in 1..beta.len() {
            shift += beta[j] * self.means[j - 1];
            out[j] = beta[j] * self.scales[j - 1];
        }
        out[0] = beta[0] + shift;
        Ok(out)
    }
}

/// Centers every non-intercept column and scales it to unit variance
/// (population denominator `n`).
pub fn standardize(data: &Dataset) -> Result<(Dataset, StandardizeTransform)> {
    let n = data.n() as f64;
    let p = data.p();
    let mut x = data.x.clone();
    let mut means = Array1::zeros(p - 1);
    let mut scales = Array1::zeros(p - 1);
    for j in 1..p {
        let mut col = x.column_mut(j);
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        if !(sd > f64::EPSILON * mean.abs().max(1.0)) {
            return Err(ConquerError::DegenerateDesign { column: j });
        }
        col.mapv_inplace(|v| (v - mean) / sd);
        means[j - 1] = mean;
        scales[j - 1] = sd;
    }
    let std = Dataset {
        y: data.y.clone(),
        x,
        names: data.names.clone(),
    };
    Ok((std, StandardizeTransform { means, scales }))
}

/// Inverse of [`StandardizeTransform::standardize_coefficients`]: fitted
/// values on the original design match those on the standardized one.
pub fn destandardize_coefficients(
    beta_std: ArrayView1<f64>,
    t: &StandardizeTransform,
) -> Result<Array1<f64>> {
    t.check_dim(beta_std.len())?;
    let mut out = beta_std.to_owned();
    let mut shift = 0.0;
    for j in 1..beta_std.len() {
        let slope = beta_std[j] / t.scales[j - 1];
        out[j] = slope;
        shift += slope * t.means[j - 1];
    }
    out[0] = beta_std[0] - shift;
    Ok(out)
}

/// `r_i = y_i - <x_i, β>`.
pub fn residuals(data: &Dataset, beta: ArrayView1<f64>) -> Result<Array1<f64>> {
    check_beta(data, beta.len())?;
    Ok(&data.y - &data.x.dot(&beta))
}

pub(crate) fn check_beta(data: &Dataset, len: usize) -> Result<()> {
    if len != data.p() {
        return Err(ConquerError::DimensionMismatch {
            what: "coefficient length vs design columns",
            expected: data.p(),
            got: len,
        });
    }
    Ok(())
}

/// Reads a headered CSV. Column `y_col` becomes the response; every other
/// column, in file order, becomes a covariate and an intercept is prepended.
///
/// Row numbers in parse errors are 1-based file lines (the header is line 1);
/// column numbers are 1-based.
pub fn load_csv<R: Read>(reader: R, y_col: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| csv_error(e, 1))?
        .iter()
        .map(str::to_string)
        .collect::<Vec<_>>();
    let y_idx = headers.iter().position(|h| h == y_col).ok_or_else(|| {
        ConquerError::InvalidData(format!("response column {y_col:?} not found in header"))
    })?;

    let k = headers.len() - 1;
    let mut y = Vec::new();
    let mut cov = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_error(e, line))?;
        if rec.len() != headers.len() {
            return Err(ConquerError::Parse {
                row: line,
                column: rec.len().min(headers.len()) + 1,
                message: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| ConquerError::Parse {
                row: line,
                column: j + 1,
                message: format!("non-numeric cell {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(ConquerError::Parse {
                    row: line,
                    column: j + 1,
                    message: format!("non-finite value {cell:?}"),
                });
            }
            if j == y_idx {
                y.push(v);
            } else {
                cov.push(v);
            }
        }
    }
    let n = y.len();
    if n == 0 {
        return Err(ConquerError::InvalidData("CSV has no data rows".into()));
    }
    let covariates = Array2::from_shape_vec((n, k), cov)
        .map_err(|e| ConquerError::InvalidData(e.to_string()))?;
    let names = std::iter::once("(intercept)".to_string())
        .chain(
            headers
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != y_idx)
                .map(|(_, h)| h.clone()),
        )
        .collect();
    Dataset::from_covariates_named(Array1::from(y), covariates, names)
}

pub fn load_csv_path(path: impl AsRef<Path>, y_col: &str) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    load_csv(std::io::BufReader::new(f), y_col)
}

fn csv_error(e: csv::Error, line: usize) -> ConquerError {
    let row = e
        .position()
        .map(|p| p.line() as usize)
        .unwrap_or(line);
    ConquerError::Parse {
        row,
        column: 0,
        message: e.to_string(),
    }
}
