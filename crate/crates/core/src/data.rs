use std::path::Path;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{LvrError, Result};

/// Ordered expert `(state, action)` pairs sampled at a fixed control rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    /// Seconds between consecutive samples.
    pub dt: f64,
    /// Free-form source tag, e.g. `"hopper/expert"`.
    pub meta: String,
}

impl Dataset {
    pub fn new(states: Array2<f64>, actions: Array2<f64>, dt: f64, meta: impl Into<String>) -> Result<Self> {
        let data = Self {
            states,
            actions,
            dt,
            meta: meta.into(),
        };
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<()> {
        if self.states.nrows() != self.actions.nrows() {
            return Err(LvrError::invalid_input(format!(
                "dataset has {} states but {} actions",
                self.states.nrows(),
                self.actions.nrows()
            )));
        }
        if !(self.dt > 0.0) {
            return Err(LvrError::invalid_input(format!("dataset dt must be positive, got {}", self.dt)));
        }
        if !self.states.iter().chain(self.actions.iter()).all(|v| v.is_finite()) {
            return Err(LvrError::invalid_input("dataset contains non-finite values"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state_dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn action_dim(&self) -> usize {
        self.actions.ncols()
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            states: self.states.slice(s![..n, ..]).to_owned(),
            actions: self.actions.slice(s![..n, ..]).to_owned(),
            dt: self.dt,
            meta: self.meta.clone(),
        }
    }

    /// Writes `t, x0.., u0..` rows. Floats use the shortest round-trip form,
    /// so identical datasets produce identical bytes.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        header.extend((0..self.state_dim()).map(|i| format!("x{i}")));
        header.extend((0..self.action_dim()).map(|i| format!("u{i}")));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut row = vec![format!("{}", i as f64 * self.dt)];
            row.extend(self.states.row(i).iter().map(|v| format!("{v}")));
            row.extend(self.actions.row(i).iter().map(|v| format!("{v}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a file produced by [`Self::write_csv`]; dimensions come from the
    /// `x*` / `u*` header columns.
    pub fn read_csv(path: &Path, meta: impl Into<String>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let nx = header.iter().filter(|h| h.starts_with('x')).count();
        let nu = header.iter().filter(|h| h.starts_with('u')).count();
        if header.get(0) != Some("t") || nx + nu + 1 != header.len() || nx == 0 || nu == 0 {
            return Err(LvrError::invalid_input(format!("unexpected dataset header in {}", path.display())));
        }
        let mut times = Vec::new();
        let mut xs = Vec::new();
        let mut us = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|f| f.parse::<f64>().map_err(|e| LvrError::invalid_input(format!("bad number {f:?}: {e}"))))
                .collect::<Result<_>>()?;
            times.push(vals[0]);
            xs.extend_from_slice(&vals[1..=nx]);
            us.extend_from_slice(&vals[1 + nx..]);
        }
        let n = times.len();
        let dt = if n >= 2 { times[1] - times[0] } else { 0.02 };
        Dataset::new(
            Array2::from_shape_vec((n, nx), xs).expect("row-major shape"),
            Array2::from_shape_vec((n, nu), us).expect("row-major shape"),
            dt,
            meta,
        )
    }
}
