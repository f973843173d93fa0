//! Accuracy approximation model.
//!
//! Every simulated round becomes one regression sample: an `n x R` matrix whose
//! first `r` columns hold the scaled size vectors of rounds `1..=r` and whose
//! remaining columns are zero, paired with the round's test accuracy. The model
//! applies one weight vector `omega` (one entry per client) to every column,
//!
//! ```text
//! X_r = sum_i psi[i, r] * omega_i      (shared across rounds)
//! h   = sigmoid(X)
//! z   = W1 h + b1                        (10 linear units)
//! y   = w2 . z + b2
//! ```
//!
//! and keeps `omega >= 0` by projecting after every SGD step. After training,
//! `omega_i` reads as client `i`'s data quality.

mod contribution;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::simulator::{fmt_real, Fingerprint, SimStore};

pub use contribution::{
    compute_cci, contribution_values, full_size_vector, rank_descending, Cci, ContributionReport,
};

/// Width of the fully connected layer after the shared layer.
pub const FC_WIDTH: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct AamInput {
    /// n x R, columns after `round` are zero.
    pub psi: Array2<f64>,
    pub target: f64,
    pub sim: usize,
    pub round: usize,
}

/// One zero-padded input per store record.
pub fn build_inputs(store: &SimStore) -> Result<Vec<AamInput>> {
    store.validate()?;
    let (n, rounds) = (store.n_clients(), store.rounds());
    let mut inputs = Vec::with_capacity(store.records.len());
    for sim in store.records.chunks(rounds) {
        let mut psi = Array2::zeros((n, rounds));
        for rec in sim {
            for (i, &x) in rec.x.iter().enumerate() {
                psi[[i, rec.r - 1]] = x;
            }
            inputs.push(AamInput {
                psi: psi.clone(),
                target: rec.acc,
                sim: rec.s,
                round: rec.r,
            });
        }
    }
    Ok(inputs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AamParams {
    /// Shared first-layer weights, one per client, kept non-negative.
    pub omega: Array1<f64>,
    /// FC_WIDTH x R
    pub fc1_weights: Array2<f64>,
    pub fc1_bias: Array1<f64>,
    pub out_weights: Array1<f64>,
    pub out_bias: f64,
}

impl AamParams {
    /// `omega ~ U(0, 0.1)`, Glorot-uniform FC weights, zero biases.
    pub fn init(n_clients: usize, rounds: usize, rng: &mut RngStream) -> Self {
        let omega = Array1::from_shape_simple_fn(n_clients, || rng.random_range(0.0..0.1));
        let a1 = (6.0 / (rounds + FC_WIDTH) as f64).sqrt();
        let fc1_weights = Array2::from_shape_simple_fn((FC_WIDTH, rounds), || rng.random_range(-a1..a1));
        let a2 = (6.0 / (FC_WIDTH + 1) as f64).sqrt();
        let out_weights = Array1::from_shape_simple_fn(FC_WIDTH, || rng.random_range(-a2..a2));
        Self {
            omega,
            fc1_weights,
            fc1_bias: Array1::zeros(FC_WIDTH),
            out_weights,
            out_bias: 0.0,
        }
    }

    pub fn n_clients(&self) -> usize {
        self.omega.len()
    }

    pub fn rounds(&self) -> usize {
        self.fc1_weights.ncols()
    }

    fn zeros_like(&self) -> Self {
        Self {
            omega: Array1::zeros(self.omega.raw_dim()),
            fc1_weights: Array2::zeros(self.fc1_weights.raw_dim()),
            fc1_bias: Array1::zeros(self.fc1_bias.raw_dim()),
            out_weights: Array1::zeros(self.out_weights.raw_dim()),
            out_bias: 0.0,
        }
    }

    fn scaled_add(&mut self, alpha: f64, g: &AamParams) {
        self.omega.scaled_add(alpha, &g.omega);
        self.fc1_weights.scaled_add(alpha, &g.fc1_weights);
        self.fc1_bias.scaled_add(alpha, &g.fc1_bias);
        self.out_weights.scaled_add(alpha, &g.out_weights);
        self.out_bias += alpha * g.out_bias;
    }

    /// Clamps the shared weights at zero.
    pub fn project(&mut self) {
        self.omega.mapv_inplace(|w| w.max(0.0));
    }

    /// Every parameter, in a fixed order (omega, fc1 weights, fc1 bias, out weights, out bias).
    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.omega
            .iter_mut()
            .chain(self.fc1_weights.iter_mut())
            .chain(self.fc1_bias.iter_mut())
            .chain(self.out_weights.iter_mut())
            .chain(std::iter::once(&mut self.out_bias))
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.omega
            .iter()
            .chain(self.fc1_weights.iter())
            .chain(self.fc1_bias.iter())
            .chain(self.out_weights.iter())
            .chain(std::iter::once(&self.out_bias))
    }

    fn check(&self, psi: &ArrayView2<f64>) -> Result<()> {
        if psi.dim() != (self.n_clients(), self.rounds()) {
            return Err(Error::Shape(format!(
                "input is {:?}, model expects ({}, {})",
                psi.dim(),
                self.n_clients(),
                self.rounds()
            )));
        }
        Ok(())
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

struct Activations {
    h: Array1<f64>,
    z: Array1<f64>,
    y: f64,
}

fn forward_cached(params: &AamParams, psi: ArrayView2<f64>) -> Activations {
    let x = psi.t().dot(&params.omega);
    let h = x.mapv(sigmoid);
    let z = params.fc1_weights.dot(&h) + &params.fc1_bias;
    let y = params.out_weights.dot(&z) + params.out_bias;
    Activations { h, z, y }
}

/// Predicted accuracy for one input.
pub fn aam_forward(params: &AamParams, psi: ArrayView2<f64>) -> Result<f64> {
    params.check(&psi)?;
    Ok(forward_cached(params, psi).y)
}

/// Mean squared error over `inputs`.
pub fn aam_loss(params: &AamParams, inputs: &[AamInput]) -> Result<f64> {
    let mut total = 0.0;
    for inp in inputs {
        let e = aam_forward(params, inp.psi.view())? - inp.target;
        total += e * e;
    }
    Ok(total / inputs.len() as f64)
}

/// Mean absolute error over `inputs`.
pub fn aam_mae(params: &AamParams, inputs: &[AamInput]) -> Result<f64> {
    let mut total = 0.0;
    for inp in inputs {
        total += (aam_forward(params, inp.psi.view())? - inp.target).abs();
    }
    Ok(total / inputs.len() as f64)
}

/// Gradient of the mean squared error over `batch`.
pub fn aam_gradient(params: &AamParams, batch: &[&AamInput]) -> Result<AamParams> {
    if batch.is_empty() {
        return Err(Error::Precondition("gradient of an empty batch".into()));
    }
    let mut g = params.zeros_like();
    let m = batch.len() as f64;
    for inp in batch {
        params.check(&inp.psi.view())?;
        let act = forward_cached(params, inp.psi.view());
        let dy = 2.0 * (act.y - inp.target) / m;
        g.out_bias += dy;
        g.out_weights.scaled_add(dy, &act.z);
        let dz = &params.out_weights * dy;
        g.fc1_bias += &dz;
        for (j, &dzj) in dz.iter().enumerate() {
            g.fc1_weights.row_mut(j).scaled_add(dzj, &act.h);
        }
        let dh = params.fc1_weights.t().dot(&dz);
        let dx = &dh * &act.h.mapv(|v| v * (1.0 - v));
        g.omega += &inp.psi.dot(&dx);
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AamTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub val_fraction: f64,
    /// Epochs without a `min_delta` improvement in validation MAE before stopping.
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
}

impl Default for AamTrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            epochs: 500,
            batch_size: 32,
            val_fraction: 0.1,
            patience: 20,
            min_delta: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedAam {
    pub params: AamParams,
    /// Held-out MAE of the returned parameters.
    pub val_mae: f64,
    pub train_mae: f64,
    pub initial_val_mae: f64,
    pub epochs_run: usize,
}

/// Mini-batch SGD on the MSE with `omega` projected onto `>= 0` after every step.
///
/// A seeded `val_fraction` of the inputs is held out. Training stops at the
/// epoch budget or after `patience` epochs without the validation MAE
/// improving by `min_delta`; the best parameters seen are returned.
pub fn train_aam(inputs: &[AamInput], cfg: &AamTrainConfig) -> Result<TrainedAam> {
    if inputs.len() < 10 {
        return Err(Error::Precondition(format!(
            "AAM training needs at least 10 inputs, got {}",
            inputs.len()
        )));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) || cfg.batch_size == 0 {
        return Err(Error::Precondition("AAM lr must be >= 0 and batch_size >= 1".into()));
    }
    if !(cfg.val_fraction > 0.0 && cfg.val_fraction < 1.0) {
        return Err(Error::Precondition(format!(
            "val_fraction {} outside (0, 1)",
            cfg.val_fraction
        )));
    }
    let (n, rounds) = inputs[0].psi.dim();
    let mut rng = RngStream::new(cfg.seed);
    let mut params = AamParams::init(n, rounds, &mut rng);

    let mut order: Vec<usize> = (0..inputs.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((cfg.val_fraction * inputs.len() as f64).round() as usize).clamp(1, inputs.len() - 1);
    let val: Vec<AamInput> = order[..n_val].iter().map(|&i| inputs[i].clone()).collect();
    let train: Vec<&AamInput> = order[n_val..].iter().map(|&i| &inputs[i]).collect();

    let initial_val_mae = aam_mae(&params, &val)?;
    let mut best = (initial_val_mae, params.clone());
    let mut stall = 0;
    let mut epochs_run = 0;
    let mut idx: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        epochs_run += 1;
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(cfg.batch_size) {
            let batch: Vec<&AamInput> = chunk.iter().map(|&i| train[i]).collect();
            let g = aam_gradient(&params, &batch)?;
            params.scaled_add(-cfg.lr, &g);
            params.project();
        }
        let mae = aam_mae(&params, &val)?;
        if mae < best.0 - cfg.min_delta {
            best = (mae, params.clone());
            stall = 0;
        } else {
            stall += 1;
            if stall >= cfg.patience {
                break;
            }
        }
    }
    let (val_mae, params) = best;
    let train_owned: Vec<AamInput> = train.iter().map(|&i| i.clone()).collect();
    let train_mae = aam_mae(&params, &train_owned)?;
    log::info!("AAM trained for {epochs_run} epochs, held-out MAE {val_mae:.4}");
    Ok(TrainedAam {
        params,
        val_mae,
        train_mae,
        initial_val_mae,
        epochs_run,
    })
}

/// Copy of the shared weights, read as per-client data quality.
pub fn extract_quality(params: &AamParams) -> Vec<f64> {
    params.omega.to_vec()
}

/// Serialized AAM with the provenance of the store and training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AamExport {
    pub fingerprint: Fingerprint,
    pub train_config: AamTrainConfig,
    pub val_mae: f64,
    pub omega: Vec<f64>,
    pub fc1_weights: Vec<Vec<f64>>,
    pub fc1_bias: Vec<f64>,
    pub out_weights: Vec<f64>,
    pub out_bias: f64,
}

fn real_list(values: impl IntoIterator<Item = f64>) -> String {
    let parts: Vec<String> = values.into_iter().map(fmt_real).collect();
    format!("[{}]", parts.join(","))
}

impl AamExport {
    pub fn new(fingerprint: Fingerprint, train_config: AamTrainConfig, trained: &TrainedAam) -> Self {
        let p = &trained.params;
        Self {
            fingerprint,
            train_config,
            val_mae: trained.val_mae,
            omega: p.omega.to_vec(),
            fc1_weights: p.fc1_weights.rows().into_iter().map(|r| r.to_vec()).collect(),
            fc1_bias: p.fc1_bias.to_vec(),
            out_weights: p.out_weights.to_vec(),
            out_bias: p.out_bias,
        }
    }

    pub fn params(&self) -> Result<AamParams> {
        let rounds = self.fc1_weights.first().map_or(0, Vec::len);
        let flat: Vec<f64> = self.fc1_weights.iter().flatten().copied().collect();
        let fc1_weights = Array2::from_shape_vec((self.fc1_weights.len(), rounds), flat)
            .map_err(|e| Error::Format(format!("fc1 weights: {e}")))?;
        if fc1_weights.nrows() != FC_WIDTH || self.fc1_bias.len() != FC_WIDTH || self.out_weights.len() != FC_WIDTH {
            return Err(Error::Format(format!("AAM export must have {FC_WIDTH} FC units")));
        }
        if self.omega.iter().any(|&w| w < 0.0) {
            return Err(Error::Format("negative shared weight in AAM export".into()));
        }
        Ok(AamParams {
            omega: Array1::from(self.omega.clone()),
            fc1_weights,
            fc1_bias: Array1::from(self.fc1_bias.clone()),
            out_weights: Array1::from(self.out_weights.clone()),
            out_bias: self.out_bias,
        })
    }

    /// JSON with every real written to 17 significant digits.
    pub fn to_json(&self) -> String {
        let fp = serde_json::to_string(&self.fingerprint).expect("fingerprint serializes");
        let tc = &self.train_config;
        let mut out = String::from("{\n");
        let _ = writeln!(out, "  \"fingerprint\": {fp},");
        let _ = writeln!(
            out,
            "  \"train_config\": {{\"lr\":{},\"epochs\":{},\"batch_size\":{},\"val_fraction\":{},\"patience\":{},\"min_delta\":{},\"seed\":{}}},",
            fmt_real(tc.lr),
            tc.epochs,
            tc.batch_size,
            fmt_real(tc.val_fraction),
            tc.patience,
            fmt_real(tc.min_delta),
            tc.seed
        );
        let _ = writeln!(out, "  \"val_mae\": {},", fmt_real(self.val_mae));
        let _ = writeln!(out, "  \"omega\": {},", real_list(self.omega.iter().copied()));
        let rows: Vec<String> = self.fc1_weights.iter().map(|r| real_list(r.iter().copied())).collect();
        let _ = writeln!(out, "  \"fc1_weights\": [{}],", rows.join(","));
        let _ = writeln!(out, "  \"fc1_bias\": {},", real_list(self.fc1_bias.iter().copied()));
        let _ = writeln!(out, "  \"out_weights\": {},", real_list(self.out_weights.iter().copied()));
        let _ = writeln!(out, "  \"out_bias\": {}", fmt_real(self.out_bias));
        out.push_str("}\n");
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}
