//! Contribution values, the clamped-and-normalized contribution index, and ranks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `v_i = x_i * omega_i`
pub fn contribution_values(omega: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if omega.len() != x.len() {
        return Err(Error::Shape(format!(
            "{} quality weights but {} sizes",
            omega.len(),
            x.len()
        )));
    }
    Ok(omega.iter().zip(x).map(|(w, xi)| w * xi).collect())
}

/// Scaled full sizes `|D_i| / mean(|D|)`.
pub fn full_size_vector(sizes: &[usize]) -> Vec<f64> {
    let mean = crate::simulator::mean_size(sizes);
    sizes.iter().map(|&s| s as f64 / mean).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cci {
    pub values: Vec<f64>,
    /// Set when no value is positive; `values` is then all zero.
    pub degenerate: bool,
}

/// Clamps negatives to zero and normalizes to sum 1.
pub fn compute_cci(v: &[f64]) -> Result<Cci> {
    if v.is_empty() {
        return Err(Error::Precondition("contribution vector is empty".into()));
    }
    let clamped: Vec<f64> = v.iter().map(|&x| x.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    if total <= 0.0 {
        return Ok(Cci {
            values: vec![0.0; v.len()],
            degenerate: true,
        });
    }
    Ok(Cci {
        values: clamped.iter().map(|&x| x / total).collect(),
        degenerate: false,
    })
}

/// Client ids ordered by descending value; ties go to the lower id.
pub fn rank_descending(v: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..v.len()).collect();
    ids.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    ids
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContributionReport {
    pub v: Vec<f64>,
    pub v_clamped: Vec<f64>,
    pub cci: Vec<f64>,
    /// Client ids from highest to lowest raw value; negative values keep their order.
    pub rank: Vec<usize>,
    pub degenerate: bool,
}

#[derive(Serialize, Deserialize)]
struct ReportRow {
    client_id: usize,
    v: f64,
    v_clamped: f64,
    cci: f64,
    rank: usize,
}

impl ContributionReport {
    pub fn from_values(v: Vec<f64>) -> Result<Self> {
        let cci = compute_cci(&v)?;
        Ok(Self {
            v_clamped: v.iter().map(|&x| x.max(0.0)).collect(),
            rank: rank_descending(&v),
            cci: cci.values,
            degenerate: cci.degenerate,
            v,
        })
    }

    /// 1-based rank position of every client.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.v.len()];
        for (k, &id) in self.rank.iter().enumerate() {
            pos[id] = k + 1;
        }
        pos
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (i, rank) in self.positions().into_iter().enumerate() {
            w.serialize(ReportRow {
                client_id: i,
                v: self.v[i],
                v_clamped: self.v_clamped[i],
                cci: self.cci[i],
                rank,
            })
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8 csv")
    }

    /// Rebuilds a report from its CSV; only the raw values are read, the rest is recomputed.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bad = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
        let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => bad(format!("{other:?}")),
        })?;
        let mut v = Vec::new();
        for (i, row) in reader.deserialize::<ReportRow>().enumerate() {
            let row = row.map_err(|e| bad(e.to_string()))?;
            if row.client_id != i {
                return Err(bad(format!("row {i} holds client {}", row.client_id)));
            }
            v.push(row.v);
        }
        Self::from_values(v)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
