//! Federated rounds: broadcast, prefix-sized local updates, size-weighted
//! FedAvg and evaluation on the shared test set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{ClientPartition, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{evaluate_accuracy, init_mlp, sgd_train, MlpParams, MlpSpec, SgdConfig};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlConfig {
    pub n_clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub model: MlpSpec,
    pub seed: u64,
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.n_clients >= 2, "n_clients must be >= 2"),
            (self.rounds >= 1, "rounds must be >= 1"),
            (self.local_epochs >= 1, "local_epochs must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.lr > 0.0 && self.lr.is_finite(), "lr must be positive"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Precondition(msg.into()));
            }
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            epochs: self.local_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
        }
    }

    /// Freshly initialized global model for this configuration's seed.
    pub fn initial_params(&self) -> MlpParams {
        init_mlp(&self.model, &mut RngStream::new(self.seed))
    }

    fn check_partitions(&self, partitions: &[ClientPartition]) -> Result<()> {
        if partitions.len() != self.n_clients {
            return Err(Error::Consistency(format!(
                "config expects {} clients, got {} partitions",
                self.n_clients,
                partitions.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub global: MlpParams,
    pub accuracy: f64,
}

/// Trains a copy of `global` on the first `d_i` samples of the client's data.
///
/// `d_i = 0` returns `global` untouched.
pub fn local_update(
    global: &MlpParams,
    client: &ClientPartition,
    d_i: usize,
    cfg: &FlConfig,
) -> Result<MlpParams> {
    if d_i > client.len() {
        return Err(Error::Size {
            client: client.client_id,
            requested: d_i,
            available: client.len(),
        });
    }
    if d_i == 0 {
        return Ok(global.clone());
    }
    sgd_train(global.clone(), client.dataset.prefix(d_i), &cfg.sgd())
}

/// Size-weighted mean of the local models: `sum_i (d_i / sum_j d_j) * theta_i`.
pub fn fed_avg(locals: &[MlpParams], d: &[usize]) -> Result<MlpParams> {
    if locals.len() != d.len() || locals.is_empty() {
        return Err(Error::Shape(format!(
            "{} local models but {} data sizes",
            locals.len(),
            d.len()
        )));
    }
    if let Some(bad) = locals.iter().position(|p| !p.same_shape(&locals[0])) {
        return Err(Error::Shape(format!("local model {bad} differs in shape from model 0")));
    }
    let total: usize = d.iter().sum();
    if total == 0 {
        return Err(Error::DegenerateRound);
    }
    let mut agg = locals[0].zeros_like();
    for (theta, &d_i) in locals.iter().zip(d) {
        if d_i > 0 {
            agg.scaled_add(d_i as f64 / total as f64, theta);
        }
    }
    Ok(agg)
}

/// One FL iteration. A round where every `d_i` is zero keeps the previous global.
pub fn run_round(
    global: &MlpParams,
    partitions: &[ClientPartition],
    d: &[usize],
    test: &LabeledDataset,
    cfg: &FlConfig,
) -> Result<RoundOutcome> {
    if d.len() != partitions.len() {
        return Err(Error::Shape(format!(
            "{} data sizes for {} clients",
            d.len(),
            partitions.len()
        )));
    }
    let locals = partitions
        .par_iter()
        .zip(d.par_iter())
        .map(|(client, &d_i)| local_update(global, client, d_i, cfg))
        .collect::<Result<Vec<_>>>()?;
    let global = match fed_avg(&locals, d) {
        Ok(g) => g,
        Err(Error::DegenerateRound) => global.clone(),
        Err(e) => return Err(e),
    };
    let accuracy = evaluate_accuracy(&global, test)?;
    Ok(RoundOutcome { global, accuracy })
}

/// Per-round data sizes for a full training run.
#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    /// Every client trains on its whole dataset every round.
    Full,
    /// Full data for included clients, nothing for the rest.
    Subset(Vec<bool>),
    /// Explicit sizes, one vector per round.
    PerRound(Vec<Vec<usize>>),
}

impl Schedule {
    pub fn from_members(n: usize, members: &[usize]) -> Self {
        let mut mask = vec![false; n];
        for &i in members {
            mask[i] = true;
        }
        Schedule::Subset(mask)
    }

    fn sizes(&self, round: usize, partitions: &[ClientPartition]) -> Result<Vec<usize>> {
        match self {
            Schedule::Full => Ok(partitions.iter().map(ClientPartition::len).collect()),
            Schedule::Subset(mask) => {
                if mask.len() != partitions.len() {
                    return Err(Error::Shape(format!(
                        "subset mask has {} entries for {} clients",
                        mask.len(),
                        partitions.len()
                    )));
                }
                Ok(partitions
                    .iter()
                    .zip(mask)
                    .map(|(p, &keep)| if keep { p.len() } else { 0 })
                    .collect())
            }
            Schedule::PerRound(rounds) => Ok(rounds[round].clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlTrace {
    pub initial_accuracy: f64,
    pub accuracies: Vec<f64>,
    pub final_params: MlpParams,
}

impl FlTrace {
    pub fn final_accuracy(&self) -> f64 {
        *self.accuracies.last().unwrap_or(&self.initial_accuracy)
    }
}

/// `cfg.rounds` rounds from the seeded initial model.
pub fn train_federated(
    partitions: &[ClientPartition],
    schedule: &Schedule,
    test: &LabeledDataset,
    cfg: &FlConfig,
) -> Result<FlTrace> {
    cfg.validate()?;
    cfg.check_partitions(partitions)?;
    if let Schedule::PerRound(rounds) = schedule {
        if rounds.len() != cfg.rounds {
            return Err(Error::Shape(format!(
                "schedule covers {} rounds, config has {}",
                rounds.len(),
                cfg.rounds
            )));
        }
    }
    let mut global = cfg.initial_params();
    let initial_accuracy = evaluate_accuracy(&global, test)?;
    let mut accuracies = Vec::with_capacity(cfg.rounds);
    for r in 0..cfg.rounds {
        let d = schedule.sizes(r, partitions)?;
        let outcome = run_round(&global, partitions, &d, test, cfg)?;
        accuracies.push(outcome.accuracy);
        global = outcome.global;
    }
    Ok(FlTrace {
        initial_accuracy,
        accuracies,
        final_params: global,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic, partition, ClassesPerClient, PartitionSpec};
    use crate::nn::Dense;
    use ndarray::{Array1, Array2};

    fn scalar(v: f64) -> MlpParams {
        MlpParams {
            layers: vec![Dense {
                weights: Array2::from_elem((1, 1), v),
                bias: Array1::from_elem(1, v),
            }],
        }
    }

    fn setup(n: usize) -> (Vec<ClientPartition>, LabeledDataset, FlConfig) {
        let data = generate_synthetic(3, 60, 4, 0.15, 1).unwrap();
        let test = generate_synthetic(3, 20, 4, 0.15, 1).unwrap();
        let spec = PartitionSpec {
            n_clients: n,
            classes_per_client: ClassesPerClient::All,
            samples_per_client: 30,
            seed: 2,
        };
        let cfg = FlConfig {
            n_clients: n,
            rounds: 3,
            local_epochs: 1,
            batch_size: 8,
            lr: 0.1,
            model: MlpSpec::new(vec![4, 6, 3]).unwrap(),
            seed: 5,
        };
        (partition(&data, &spec).unwrap(), test, cfg)
    }

    #[test]
    fn fed_avg_hand_values() {
        let two = |a, b, d: [usize; 2]| fed_avg(&[scalar(a), scalar(b)], &d).unwrap().layers[0].bias[0];
        assert_eq!(two(0.0, 2.0, [1, 1]), 1.0);
        assert_eq!(two(0.0, 4.0, [1, 3]), 3.0);
        assert_eq!(two(0.7, 4.0, [5, 0]), 0.7);
    }

    #[test]
    fn fed_avg_errors() {
        assert!(matches!(fed_avg(&[scalar(1.0)], &[0]), Err(Error::DegenerateRound)));
        assert!(matches!(fed_avg(&[scalar(1.0)], &[1, 2]), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_size_update_is_noop() {
        let (parts, _, cfg) = setup(2);
        let g = cfg.initial_params();
        assert_eq!(local_update(&g, &parts[0], 0, &cfg).unwrap(), g);
        assert!(matches!(
            local_update(&g, &parts[0], 31, &cfg),
            Err(Error::Size { requested: 31, available: 30, .. })
        ));
    }

    #[test]
    fn full_size_update_delegates_to_sgd() {
        let (parts, _, cfg) = setup(2);
        let g = cfg.initial_params();
        let a = local_update(&g, &parts[1], 30, &cfg).unwrap();
        let b = sgd_train(g.clone(), parts[1].dataset.view(), &cfg.sgd()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, local_update(&g, &parts[1], 30, &cfg).unwrap());
    }

    #[test]
    fn round_composes_the_three_steps() {
        let (parts, test, cfg) = setup(3);
        let g = cfg.initial_params();
        let d = [10, 0, 25];
        let out = run_round(&g, &parts, &d, &test, &cfg).unwrap();
        let locals: Vec<_> = parts
            .iter()
            .zip(d)
            .map(|(p, di)| local_update(&g, p, di, &cfg).unwrap())
            .collect();
        let manual = fed_avg(&locals, &d).unwrap();
        assert_eq!(out.global, manual);
        assert_eq!(out.accuracy, evaluate_accuracy(&manual, &test).unwrap());
    }

    #[test]
    fn degenerate_round_carries_global() {
        let (parts, test, cfg) = setup(2);
        let g = cfg.initial_params();
        let out = run_round(&g, &parts, &[0, 0], &test, &cfg).unwrap();
        assert_eq!(out.global, g);
        assert_eq!(out.accuracy, evaluate_accuracy(&g, &test).unwrap());
    }

    #[test]
    fn identical_clients_give_identical_global() {
        let (mut parts, test, cfg) = setup(2);
        parts[1].dataset = parts[0].dataset.clone();
        let g = cfg.initial_params();
        let out = run_round(&g, &parts, &[30, 30], &test, &cfg).unwrap();
        let local = local_update(&g, &parts[0], 30, &cfg).unwrap();
        for (a, b) in out.global.iter().zip(local.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn one_round_training_equals_run_round() {
        let (parts, test, mut cfg) = setup(3);
        cfg.rounds = 1;
        let trace = train_federated(&parts, &Schedule::Full, &test, &cfg).unwrap();
        let d: Vec<usize> = parts.iter().map(|p| p.len()).collect();
        let out = run_round(&cfg.initial_params(), &parts, &d, &test, &cfg).unwrap();
        assert_eq!(trace.accuracies, vec![out.accuracy]);
        assert_eq!(trace.final_params, out.global);
    }

    #[test]
    fn training_is_deterministic() {
        let (parts, test, cfg) = setup(3);
        let a = train_federated(&parts, &Schedule::Full, &test, &cfg).unwrap();
        let b = train_federated(&parts, &Schedule::Full, &test, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.accuracies.iter().all(|acc| (0.0..=1.0).contains(acc)));
    }

    #[test]
    fn empty_subset_keeps_initial_accuracy() {
        let (parts, test, cfg) = setup(3);
        let t = train_federated(&parts, &Schedule::from_members(3, &[]), &test, &cfg).unwrap();
        assert!(t.accuracies.iter().all(|&a| a == t.initial_accuracy));
    }
}
