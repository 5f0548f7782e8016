//! Training data: state-control inputs paired with state-difference targets.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::GpError;

/// D rows of (x_k, u_k) inputs and Δx_k = x_{k+1} - x_k targets.
#[derive(Debug, Clone, PartialEq)]
pub struct GpDataset {
    /// D×(n+m) inputs.
    pub inputs: DMatrix<f64>,
    /// D×n targets.
    pub targets: DMatrix<f64>,
}

impl GpDataset {
    pub fn new(inputs: DMatrix<f64>, targets: DMatrix<f64>) -> Result<Self, GpError> {
        if inputs.nrows() != targets.nrows() {
            return Err(GpError::RowMismatch { inputs: inputs.nrows(), targets: targets.nrows() });
        }
        if inputs.iter().any(|v| !v.is_finite()) || targets.iter().any(|v| !v.is_finite()) {
            return Err(GpError::NonFinite("dataset"));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.targets.ncols()
    }

    pub fn input_row(&self, i: usize) -> DVector<f64> {
        self.inputs.row(i).transpose()
    }

    /// Targets of one output dimension as a column vector.
    pub fn target_column(&self, dim: usize) -> DVector<f64> {
        self.targets.column(dim).into_owned()
    }

    /// First `count` rows (used by the data-fraction sweeps).
    pub fn head(&self, count: usize) -> Result<Self, GpError> {
        let count = count.min(self.len());
        Self::new(self.inputs.rows(0, count).into_owned(), self.targets.rows(0, count).into_owned())
    }

    /// Write as CSV with headers x1..xn, u1..um, dx1..dxn.
    ///
    /// `state_dim` splits the input columns into state and control parts.
    pub fn write_csv(&self, path: &Path, state_dim: usize) -> Result<(), GpError> {
        let n = self.output_dim();
        let m = self.input_dim() - state_dim;
        let mut w = csv::Writer::from_path(path).map_err(|e| GpError::Io(e.to_string()))?;
        let mut header = Vec::new();
        for i in 1..=state_dim {
            header.push(format!("x{i}"));
        }
        for j in 1..=m {
            header.push(format!("u{j}"));
        }
        for i in 1..=n {
            header.push(format!("dx{i}"));
        }
        w.write_record(&header).map_err(|e| GpError::Io(e.to_string()))?;
        for r in 0..self.len() {
            let mut rec = Vec::with_capacity(self.input_dim() + n);
            for c in 0..self.input_dim() {
                rec.push(format_float(self.inputs[(r, c)]));
            }
            for c in 0..n {
                rec.push(format_float(self.targets[(r, c)]));
            }
            w.write_record(&rec).map_err(|e| GpError::Io(e.to_string()))?;
        }
        w.flush().map_err(|e| GpError::Io(e.to_string()))
    }

    /// Read back a CSV produced by [`GpDataset::write_csv`].
    pub fn read_csv(path: &Path) -> Result<Self, GpError> {
        let mut r = csv::Reader::from_path(path).map_err(|e| GpError::Io(e.to_string()))?;
        let header = r.headers().map_err(|e| GpError::Io(e.to_string()))?.clone();
        let n_out = header.iter().filter(|h| h.starts_with("dx")).count();
        let n_in = header.len() - n_out;
        if n_out == 0 || n_in == 0 {
            return Err(GpError::Io("dataset CSV header must contain x/u and dx columns".into()));
        }
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let mut rows = 0usize;
        for rec in r.records() {
            let rec = rec.map_err(|e| GpError::Io(e.to_string()))?;
            if rec.len() != header.len() {
                return Err(GpError::Io(format!("row {rows} has {} fields, expected {}", rec.len(), header.len())));
            }
            for (i, field) in rec.iter().enumerate() {
                let v: f64 = field.parse().map_err(|_| GpError::Io(format!("bad float '{field}'")))?;
                if i < n_in {
                    inputs.push(v);
                } else {
                    targets.push(v);
                }
            }
            rows += 1;
        }
        Self::new(
            DMatrix::from_row_slice(rows, n_in, &inputs),
            DMatrix::from_row_slice(rows, n_out, &targets),
        )
    }
}

/// Shortest round-trippable decimal form.
pub(crate) fn format_float(v: f64) -> String {
    let mut s = format!("{v}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}
