//! Data-size sampled FL simulations and the JSON-lines store that logs them.
//!
//! Each round of a simulation draws a proportion `p_i ~ U(0, 1)` per client,
//! trains on `d_i = floor(|D_i| * p_i)` samples and records the scaled sizes
//! `x_i = d_i / mean(|D|)` next to the round's test accuracy.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{partitions_hash, ClientPartition, LabeledDataset};
use crate::error::{Error, Result};
use crate::fl::{run_round, FlConfig};
use crate::rng::RngStream;

/// `n` draws from the open interval (0, 1).
pub fn sample_proportions(n: usize, rng: &mut RngStream) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let p: f64 = rng.random();
            if p > 0.0 {
                break p;
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SizeSample {
    pub p: Vec<f64>,
    pub d: Vec<usize>,
    pub x: Vec<f64>,
}

/// Mean client dataset size, the normalizer for scaled sizes.
pub fn mean_size(sizes: &[usize]) -> f64 {
    sizes.iter().sum::<usize>() as f64 / sizes.len() as f64
}

pub fn scale_sizes(sizes: &[usize], p: &[f64]) -> Result<SizeSample> {
    if sizes.len() != p.len() || sizes.is_empty() {
        return Err(Error::Shape(format!("{} sizes but {} proportions", sizes.len(), p.len())));
    }
    if sizes.contains(&0) {
        return Err(Error::Precondition("client sizes must be positive".into()));
    }
    if let Some(bad) = p.iter().find(|&&v| !(v > 0.0 && v <= 1.0)) {
        return Err(Error::Precondition(format!("proportion {bad} outside (0, 1]")));
    }
    let d: Vec<usize> = sizes
        .iter()
        .zip(p)
        .map(|(&s, &pi)| (s as f64 * pi).floor() as usize)
        .collect();
    let mean = mean_size(sizes);
    let x = d.iter().map(|&di| di as f64 / mean).collect();
    Ok(SizeSample { p: p.to_vec(), d, x })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimRecord {
    /// Simulation index, 1-based.
    pub s: usize,
    /// Round index, 1-based.
    pub r: usize,
    pub x: Vec<f64>,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fingerprint {
    pub n_clients: usize,
    pub rounds: usize,
    pub simulations: usize,
    pub master_seed: u64,
    pub dataset_hash: String,
}

impl Fingerprint {
    /// Names of the fields that differ from `other`.
    pub fn diff(&self, other: &Fingerprint) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.n_clients != other.n_clients {
            out.push("n_clients");
        }
        if self.rounds != other.rounds {
            out.push("rounds");
        }
        if self.simulations != other.simulations {
            out.push("simulations");
        }
        if self.master_seed != other.master_seed {
            out.push("master_seed");
        }
        if self.dataset_hash != other.dataset_hash {
            out.push("dataset_hash");
        }
        out
    }
}

/// The simulator's log: exactly `S * R` records in `(s, r)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct SimStore {
    pub fingerprint: Fingerprint,
    pub records: Vec<SimRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    fingerprint: Fingerprint,
}

/// Shortest-form-independent float encoding with 17 significant digits.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

impl SimStore {
    pub fn new(fingerprint: Fingerprint, records: Vec<SimRecord>) -> Result<Self> {
        let store = Self {
            fingerprint,
            records,
        };
        store.validate()?;
        Ok(store)
    }

    pub fn n_clients(&self) -> usize {
        self.fingerprint.n_clients
    }

    pub fn rounds(&self) -> usize {
        self.fingerprint.rounds
    }

    pub fn simulations(&self) -> usize {
        self.fingerprint.simulations
    }

    /// Number of full FL training runs spent producing this store.
    pub fn fl_runs(&self) -> usize {
        self.simulations()
    }

    pub fn validate(&self) -> Result<()> {
        let fp = &self.fingerprint;
        let expected = fp.simulations * fp.rounds;
        if self.records.len() != expected {
            return Err(Error::Consistency(format!(
                "store holds {} records, expected S*R = {expected}",
                self.records.len()
            )));
        }
        for (k, rec) in self.records.iter().enumerate() {
            let (s, r) = (k / fp.rounds + 1, k % fp.rounds + 1);
            if rec.s != s || rec.r != r {
                return Err(Error::Consistency(format!(
                    "record {k} is (s={}, r={}), expected (s={s}, r={r})",
                    rec.s, rec.r
                )));
            }
            if rec.x.len() != fp.n_clients {
                return Err(Error::Consistency(format!(
                    "record (s={s}, r={r}) has {} sizes for {} clients",
                    rec.x.len(),
                    fp.n_clients
                )));
            }
            if !(0.0..=1.0).contains(&rec.acc) || rec.x.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return Err(Error::Consistency(format!("record (s={s}, r={r}) out of range")));
            }
        }
        Ok(())
    }

    /// JSON-lines text: fingerprint header, then one record per line.
    pub fn to_jsonl(&self) -> String {
        let header = serde_json::to_string(&Header {
            fingerprint: self.fingerprint.clone(),
        })
        .expect("header serializes");
        let mut out = header;
        out.push('\n');
        for rec in &self.records {
            let xs: Vec<String> = rec.x.iter().map(|&v| fmt_real(v)).collect();
            let _ = writeln!(
                out,
                "{{\"s\":{},\"r\":{},\"x\":[{}],\"acc\":{}}}",
                rec.s,
                rec.r,
                xs.join(","),
                fmt_real(rec.acc)
            );
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Format("empty store file".into()))?;
        let header: Header = serde_json::from_str(header_line)
            .map_err(|e| Error::Format(format!("bad store header: {e}")))?;
        let records = lines
            .enumerate()
            .map(|(i, line)| {
                serde_json::from_str::<SimRecord>(line)
                    .map_err(|e| Error::Format(format!("store line {}: {e}", i + 2)))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(header.fingerprint, records).map_err(|e| match e {
            Error::Consistency(msg) => Error::Format(msg),
            other => other,
        })
    }
}

pub fn persist_store(store: &SimStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, store.to_jsonl()).map_err(|e| Error::io(path, e))
}

pub fn load_store(path: impl AsRef<Path>) -> Result<SimStore> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SimStore::from_jsonl(&text)
}

/// Loads a store and warns about every fingerprint field that differs from `expected`.
pub fn load_store_expecting(
    path: impl AsRef<Path>,
    expected: &Fingerprint,
) -> Result<(SimStore, Vec<&'static str>)> {
    let store = load_store(path.as_ref())?;
    let diff = store.fingerprint.diff(expected);
    if !diff.is_empty() {
        log::warn!(
            "store {} was produced by a different configuration (fields: {})",
            path.as_ref().display(),
            diff.join(", ")
        );
    }
    Ok((store, diff))
}

/// One simulation: the global model restarts from the configured initial
/// parameters, then `R` rounds run with freshly sampled sizes. Only the sizes
/// differ between simulations, so accuracy differences trace back to them.
pub fn run_simulation(
    partitions: &[ClientPartition],
    test: &LabeledDataset,
    cfg: &FlConfig,
    sim_id: usize,
    rng: &mut RngStream,
) -> Result<Vec<SimRecord>> {
    cfg.validate()?;
    let sizes: Vec<usize> = partitions.iter().map(ClientPartition::len).collect();
    let mut global = cfg.initial_params();
    let mut records = Vec::with_capacity(cfg.rounds);
    for r in 1..=cfg.rounds {
        let p = sample_proportions(sizes.len(), rng);
        let sample = scale_sizes(&sizes, &p)?;
        let outcome = run_round(&global, partitions, &sample.d, test, cfg)?;
        records.push(SimRecord {
            s: sim_id,
            r,
            x: sample.x,
            acc: outcome.accuracy,
        });
        global = outcome.global;
    }
    Ok(records)
}

pub fn fingerprint_for(
    partitions: &[ClientPartition],
    test: &LabeledDataset,
    cfg: &FlConfig,
    simulations: usize,
    master_seed: u64,
) -> Fingerprint {
    Fingerprint {
        n_clients: partitions.len(),
        rounds: cfg.rounds,
        simulations,
        master_seed,
        dataset_hash: partitions_hash(partitions, test),
    }
}

/// `S` independent simulations; simulation `s` draws from the child stream `(master_seed, s)`.
pub fn run_all(
    partitions: &[ClientPartition],
    test: &LabeledDataset,
    cfg: &FlConfig,
    simulations: usize,
    master_seed: u64,
) -> Result<SimStore> {
    if simulations == 0 {
        return Err(Error::Precondition("at least one simulation is required".into()));
    }
    let master = RngStream::new(master_seed);
    let per_sim = (1..=simulations)
        .into_par_iter()
        .map(|s| {
            let mut rng = master.child(s as u64);
            let recs = run_simulation(partitions, test, cfg, s, &mut rng);
            log::debug!("simulation {s}/{simulations} finished");
            recs
        })
        .collect::<Result<Vec<_>>>()?;
    SimStore::new(
        fingerprint_for(partitions, test, cfg, simulations, master_seed),
        per_sim.into_iter().flatten().collect(),
    )
}
