//! Client-level Leave-One-Out and Shapley valuation over a subset utility.
//!
//! The utility of a coalition is the final test accuracy of a federated run
//! that trains only the coalition's clients, always from the same seed. The
//! empty coalition scores the accuracy of the untrained initial model.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{ClientPartition, LabeledDataset};
use crate::error::{Error, Result};
use crate::fl::{train_federated, FlConfig, Schedule};
use crate::rng::RngStream;

type Evaluator<'a> = Box<dyn Fn(&[usize]) -> Result<f64> + Send + Sync + 'a>;

/// Memoized coalition utility. Keys are sorted client-id lists.
pub struct UtilityFn<'a> {
    n: usize,
    eval: Evaluator<'a>,
    cache: Mutex<HashMap<Vec<usize>, f64>>,
    evaluations: AtomicUsize,
    fl_runs: AtomicUsize,
}

impl<'a> UtilityFn<'a> {
    pub fn new(n: usize, eval: impl Fn(&[usize]) -> Result<f64> + Send + Sync + 'a) -> Self {
        Self {
            n,
            eval: Box::new(eval),
            cache: Mutex::new(HashMap::new()),
            evaluations: AtomicUsize::new(0),
            fl_runs: AtomicUsize::new(0),
        }
    }

    /// Utility backed by full federated training runs with `cfg.seed`.
    pub fn federated(
        partitions: &'a [ClientPartition],
        test: &'a LabeledDataset,
        cfg: &'a FlConfig,
    ) -> Self {
        let n = partitions.len();
        Self::new(n, move |members: &[usize]| {
            let trace = train_federated(partitions, &Schedule::from_members(n, members), test, cfg)?;
            Ok(trace.final_accuracy())
        })
    }

    pub fn n_clients(&self) -> usize {
        self.n
    }

    pub fn value(&self, members: &[usize]) -> Result<f64> {
        let mut key = members.to_vec();
        key.sort_unstable();
        key.dedup();
        if let Some(&bad) = key.iter().find(|&&i| i >= self.n) {
            return Err(Error::Precondition(format!("client {bad} outside [0, {})", self.n)));
        }
        if let Some(&v) = self.cache.lock().expect("utility cache poisoned").get(&key) {
            return Ok(v);
        }
        let v = (self.eval)(&key)?;
        let mut cache = self.cache.lock().expect("utility cache poisoned");
        let stored = *cache.entry(key.clone()).or_insert_with(|| {
            self.evaluations.fetch_add(1, Ordering::Relaxed);
            if !key.is_empty() {
                self.fl_runs.fetch_add(1, Ordering::Relaxed);
            }
            v
        });
        Ok(stored)
    }

    /// Distinct coalitions evaluated so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }

    /// Distinct non-empty coalitions evaluated so far; each one costs an FL training run.
    pub fn fl_runs(&self) -> usize {
        self.fl_runs.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValuationMethod {
    Loo,
    Tmc,
    Exact,
}

impl ValuationMethod {
    pub fn name(self) -> &'static str {
        match self {
            ValuationMethod::Loo => "loo",
            ValuationMethod::Tmc => "tmc",
            ValuationMethod::Exact => "exact",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub permutations: usize,
    /// Marginals skipped by truncation.
    pub truncations: usize,
    pub utility_evaluations: usize,
    pub fl_runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValuationResult {
    pub method: ValuationMethod,
    pub values: Vec<f64>,
    pub diagnostics: Diagnostics,
}

#[derive(Serialize)]
struct ValueRow {
    client_id: usize,
    value: f64,
    method: &'static str,
}

#[derive(Deserialize)]
struct ValueRecord {
    client_id: usize,
    value: f64,
    method: ValuationMethod,
}

/// Reads a `client_id,value,method` file back; rows must list clients `0..n` in order.
pub fn read_values(path: impl AsRef<Path>) -> Result<(ValuationMethod, Vec<f64>)> {
    let path = path.as_ref();
    let bad = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => bad(format!("{other:?}")),
    })?;
    let mut method = None;
    let mut values = Vec::new();
    for (i, row) in reader.deserialize::<ValueRecord>().enumerate() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        if row.client_id != i {
            return Err(bad(format!("row {i} holds client {}", row.client_id)));
        }
        if *method.get_or_insert(row.method) != row.method {
            return Err(bad("mixed methods".into()));
        }
        values.push(row.value);
    }
    let method = method.ok_or_else(|| bad("no rows".into()))?;
    Ok((method, values))
}

impl ValuationResult {
    fn new(method: ValuationMethod, values: Vec<f64>, mut diagnostics: Diagnostics, u: &UtilityFn<'_>) -> Self {
        diagnostics.utility_evaluations = u.evaluations();
        diagnostics.fl_runs = u.fl_runs();
        Self {
            method,
            values,
            diagnostics,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (client_id, &value) in self.values.iter().enumerate() {
            w.serialize(ValueRow {
                client_id,
                value,
                method: self.method.name(),
            })
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8 csv")
    }

    pub fn write(&self, csv_path: impl AsRef<Path>, diagnostics_path: impl AsRef<Path>) -> Result<()> {
        let (csv_path, diag_path) = (csv_path.as_ref(), diagnostics_path.as_ref());
        std::fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        let json = serde_json::to_string_pretty(&self.diagnostics).expect("diagnostics serialize");
        std::fs::write(diag_path, json + "\n").map_err(|e| Error::io(diag_path, e))
    }
}

/// `v_i = U(N) - U(N \ {i})`, using exactly `n + 1` coalitions.
pub fn loo_values(u: &UtilityFn<'_>) -> Result<ValuationResult> {
    let n = u.n_clients();
    if n < 2 {
        return Err(Error::Precondition("leave-one-out needs at least 2 clients".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let full = u.value(&all)?;
    let values = (0..n)
        .into_par_iter()
        .map(|i| {
            let rest: Vec<usize> = all.iter().copied().filter(|&j| j != i).collect();
            Ok(full - u.value(&rest)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ValuationResult::new(ValuationMethod::Loo, values, Diagnostics::default(), u))
}

pub const EXACT_SHAPLEY_MAX_CLIENTS: usize = 8;

fn members_of(mask: usize, n: usize) -> Vec<usize> {
    (0..n).filter(|&i| mask & (1 << i) != 0).collect()
}

/// Shapley values by enumerating all `2^n` coalitions.
pub fn exact_shapley(u: &UtilityFn<'_>) -> Result<ValuationResult> {
    let n = u.n_clients();
    if n > EXACT_SHAPLEY_MAX_CLIENTS {
        return Err(Error::Capacity(format!(
            "exact Shapley enumerates 2^n coalitions; n = {n} exceeds {EXACT_SHAPLEY_MAX_CLIENTS}"
        )));
    }
    let utilities = (0..1usize << n)
        .into_par_iter()
        .map(|mask| u.value(&members_of(mask, n)))
        .collect::<Result<Vec<_>>>()?;

    let fact: Vec<f64> = (0..=n).scan(1.0, |acc, k| {
        if k > 0 {
            *acc *= k as f64;
        }
        Some(*acc)
    })
    .collect();
    let weight = |size: usize| fact[size] * fact[n - size - 1] / fact[n];

    let values = (0..n)
        .map(|i| {
            (0..1usize << n)
                .filter(|mask| mask & (1 << i) == 0)
                .map(|mask| weight(mask.count_ones() as usize) * (utilities[mask | (1 << i)] - utilities[mask]))
                .sum()
        })
        .collect();
    Ok(ValuationResult::new(ValuationMethod::Exact, values, Diagnostics::default(), u))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TmcConfig {
    pub max_perms: usize,
    /// A permutation stops scanning once its prefix utility is within this
    /// distance of `U(N)`; 0 disables truncation.
    pub trunc_tol: f64,
    /// Stop when no estimate moved more than this over the last 10
    /// permutations; 0 disables early stopping.
    pub conv_tol: f64,
    pub seed: u64,
}

impl Default for TmcConfig {
    fn default() -> Self {
        Self {
            max_perms: 100,
            trunc_tol: 0.01,
            conv_tol: 0.001,
            seed: 0,
        }
    }
}

const CONVERGENCE_WINDOW: usize = 10;

/// Truncated Monte-Carlo Shapley estimates over random client permutations.
pub fn tmc_shapley(u: &UtilityFn<'_>, cfg: &TmcConfig) -> Result<ValuationResult> {
    let n = u.n_clients();
    if cfg.max_perms == 0 {
        return Err(Error::Precondition("TMC needs at least one permutation".into()));
    }
    if cfg.trunc_tol.is_nan() || cfg.conv_tol.is_nan() || cfg.trunc_tol < 0.0 || cfg.conv_tol < 0.0 {
        return Err(Error::Precondition("TMC tolerances must be >= 0".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let full = u.value(&all)?;
    let empty = u.value(&[])?;

    let mut rng = RngStream::new(cfg.seed);
    let mut estimates = vec![0.0; n];
    let mut history = vec![estimates.clone()];
    let mut diag = Diagnostics::default();
    let mut perm = all.clone();
    for t in 1..=cfg.max_perms {
        perm.shuffle(&mut rng);
        let mut prefix = Vec::with_capacity(n);
        let mut prev = empty;
        let mut truncated = false;
        for (k, &i) in perm.iter().enumerate() {
            if !truncated && k > 0 && (prev - full).abs() < cfg.trunc_tol {
                truncated = true;
            }
            let marginal = if truncated {
                diag.truncations += 1;
                0.0
            } else {
                prefix.push(i);
                let cur = u.value(&prefix)?;
                let m = cur - prev;
                prev = cur;
                m
            };
            estimates[i] += (marginal - estimates[i]) / t as f64;
        }
        diag.permutations = t;
        history.push(estimates.clone());
        if cfg.conv_tol > 0.0 && t > CONVERGENCE_WINDOW {
            let past = &history[t - CONVERGENCE_WINDOW];
            let moved = estimates
                .iter()
                .zip(past)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if moved < cfg.conv_tol {
                break;
            }
        }
    }
    Ok(ValuationResult::new(ValuationMethod::Tmc, estimates, diag, u))
}
