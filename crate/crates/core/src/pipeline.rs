//! Stage orchestration: data preparation, simulation, AAM training,
//! valuation, baselines and experiments, communicating only through files in
//! the output directory.
//!
//! Every artifact name starts with the first 12 hex digits of the resolved
//! configuration's hash, so outputs of different configurations never mix.
//! All stage seeds derive from the master seed.

use std::fs;
use std::path::{Path, PathBuf};

use crate::aam::{
    build_inputs, compute_cci, contribution_values, full_size_vector, rank_descending, train_aam, AamExport,
    ContributionReport, TrainedAam,
};
use crate::baselines::{exact_shapley, loo_values, read_values, tmc_shapley, UtilityFn, ValuationMethod, ValuationResult};
use crate::config::{default_samples_per_client, DatasetSource, ExperimentKind, RunConfig};
use crate::datasets::{
    generate_synthetic, inject_noise, load_idx, partition, ClientPartition, LabeledDataset, NoiseKind, NoiseSpec,
    PartitionManifest, PartitionSpec,
};
use crate::error::{Error, Result};
use crate::experiments::{
    bar_chart, client_removal_curves, cost_csv, line_chart, partial_csv, partial_participation_curves, removal_csv,
    skewness_report, zero_exclusion_retrain, CostRow, MethodCci,
};
use crate::fl::FlConfig;
use crate::nn::MlpSpec;
use crate::rng::derive_seed;
use crate::simulator::{fingerprint_for, load_store_expecting, persist_store, run_all, Fingerprint, SimStore};

/// Tags mixed into the master seed for each stochastic stage.
pub mod seed_tag {
    pub const DATA: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const FL: u64 = 4;
    pub const SIMULATIONS: u64 = 5;
    pub const AAM: u64 = 6;
    pub const TMC: u64 = 7;
    pub const PARTIAL: u64 = 8;
}

/// Name under which the AAM-based valuation appears in experiment outputs.
pub const FEDCCEA: &str = "fedccea";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Simulate,
    TrainAam,
    Value,
    Baseline,
    Experiment,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Simulate,
        Stage::TrainAam,
        Stage::Value,
        Stage::Baseline,
        Stage::Experiment,
    ];
}

/// Resolved configuration plus the data every stage works on.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: RunConfig,
    pub partitions: Vec<ClientPartition>,
    pub test: LabeledDataset,
    pub fl: FlConfig,
    pub hash: String,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    match &cfg.dataset {
        DatasetSource::Synthetic(s) => {
            let seed = derive_seed(cfg.seed, seed_tag::DATA);
            let all = generate_synthetic(s.classes, s.train_per_class + s.test_per_class, s.dim, s.spread, seed)?;
            // interleaved labels keep both halves class-balanced
            Ok(all.split_at(s.classes * s.train_per_class))
        }
        DatasetSource::Idx(p) => Ok((
            load_idx(&p.train_images, &p.train_labels)?,
            load_idx(&p.test_images, &p.test_labels)?,
        )),
    }
}

/// Loads the data, fills data-dependent defaults, partitions and corrupts clients.
pub fn prepare(mut config: RunConfig) -> Result<Prepared> {
    config.validate()?;
    let (train, test) = load_dataset(&config)?;
    config.resolve(&train)?;
    let master = config.seed;
    let spec = PartitionSpec {
        n_clients: config.n_clients,
        classes_per_client: config.partition.classes(train.n_classes()),
        samples_per_client: config.partition.samples_per_client.expect("resolved"),
        seed: derive_seed(master, seed_tag::PARTITION),
    };
    let mut partitions = partition(&train, &spec)?;
    let noise = &config.noise;
    if noise.kind != NoiseKind::None && noise.client_fraction > 0.0 {
        partitions = inject_noise(
            partitions,
            &NoiseSpec {
                kind: noise.kind,
                client_fraction: noise.client_fraction,
                sample_fraction: noise.sample_fraction,
                seed: derive_seed(master, seed_tag::NOISE),
                pattern_size: noise.pattern_size,
            },
        )?;
    }
    let mut layers = vec![train.dim()];
    layers.extend(&config.fl.hidden);
    layers.push(train.n_classes());
    let fl = FlConfig {
        n_clients: config.n_clients,
        rounds: config.rounds,
        local_epochs: config.fl.local_epochs,
        batch_size: config.fl.batch_size,
        lr: config.fl.lr,
        model: MlpSpec::new(layers)?,
        seed: derive_seed(master, seed_tag::FL),
    };
    let hash = config.hash();
    Ok(Prepared {
        config,
        partitions,
        test,
        fl,
        hash,
    })
}

impl Prepared {
    pub fn artifacts(&self) -> Artifacts {
        Artifacts {
            dir: self.config.out_dir.clone(),
            hash: self.hash.clone(),
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.partitions.iter().map(ClientPartition::len).collect()
    }

    pub fn fingerprint(&self) -> Fingerprint {
        fingerprint_for(
            &self.partitions,
            &self.test,
            &self.fl,
            self.config.simulations,
            derive_seed(self.config.seed, seed_tag::SIMULATIONS),
        )
    }

    pub fn simulate(&self) -> Result<SimStore> {
        run_all(
            &self.partitions,
            &self.test,
            &self.fl,
            self.config.simulations,
            derive_seed(self.config.seed, seed_tag::SIMULATIONS),
        )
    }

    pub fn train_aam(&self, store: &SimStore) -> Result<(TrainedAam, AamExport)> {
        let inputs = build_inputs(store)?;
        let tc = self.config.aam.train_config(derive_seed(self.config.seed, seed_tag::AAM));
        let trained = train_aam(&inputs, &tc)?;
        let export = AamExport::new(store.fingerprint.clone(), tc, &trained);
        Ok((trained, export))
    }

    /// `v = x * omega` at full client sizes.
    pub fn contributions(&self, omega: &[f64]) -> Result<ContributionReport> {
        ContributionReport::from_values(contribution_values(omega, &full_size_vector(&self.sizes()))?)
    }

    pub fn valuation(&self, method: ValuationMethod) -> Result<ValuationResult> {
        let u = UtilityFn::federated(&self.partitions, &self.test, &self.fl);
        match method {
            ValuationMethod::Loo => loo_values(&u),
            ValuationMethod::Exact => exact_shapley(&u),
            ValuationMethod::Tmc => tmc_shapley(
                &u,
                &self.config.baselines.tmc.tmc_config(derive_seed(self.config.seed, seed_tag::TMC)),
            ),
        }
    }
}

/// Hash-prefixed artifact paths inside the output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifacts {
    pub dir: PathBuf,
    pub hash: String,
}

impl Artifacts {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{}-{name}", self.hash))
    }

    pub fn config(&self) -> PathBuf {
        self.path("config.json")
    }

    pub fn partitions(&self) -> PathBuf {
        self.path("partitions.json")
    }

    pub fn store(&self) -> PathBuf {
        self.path("store.jsonl")
    }

    pub fn aam(&self) -> PathBuf {
        self.path("aam.json")
    }

    pub fn contributions(&self) -> PathBuf {
        self.path("contributions.csv")
    }

    pub fn values(&self, method: ValuationMethod) -> PathBuf {
        self.path(&format!("{}.csv", method.name()))
    }

    pub fn diagnostics(&self, method: ValuationMethod) -> PathBuf {
        self.path(&format!("{}-diagnostics.json", method.name()))
    }

    /// Fails with a dependency error naming `path` when it does not exist.
    pub fn require(path: &Path) -> Result<()> {
        if path.is_file() {
            Ok(())
        } else {
            Err(Error::Dependency(path.to_path_buf()))
        }
    }
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>, written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Runs one stage and returns the files it wrote.
pub fn run_stage(prep: &Prepared, stage: Stage) -> Result<Vec<PathBuf>> {
    let art = prep.artifacts();
    fs::create_dir_all(&art.dir).map_err(|e| Error::io(&art.dir, e))?;
    let mut written = Vec::new();
    write(art.config(), prep.config.to_json(), &mut written)?;
    match stage {
        Stage::Simulate => {
            PartitionManifest::from_partitions(&prep.partitions).write(art.partitions())?;
            written.push(art.partitions());
            let store = prep.simulate()?;
            persist_store(&store, art.store())?;
            written.push(art.store());
        }
        Stage::TrainAam => {
            Artifacts::require(&art.store())?;
            let (store, _) = load_store_expecting(art.store(), &prep.fingerprint())?;
            let (_, export) = prep.train_aam(&store)?;
            export.write(art.aam())?;
            written.push(art.aam());
        }
        Stage::Value => {
            Artifacts::require(&art.aam())?;
            let export = AamExport::read(art.aam())?;
            prep.contributions(&export.omega)?.write_csv(art.contributions())?;
            written.push(art.contributions());
        }
        Stage::Baseline => {
            for &method in &prep.config.baselines.methods {
                let result = prep.valuation(method)?;
                log::info!(
                    "{} finished after {} training runs",
                    method.name(),
                    result.diagnostics.fl_runs
                );
                result.write(art.values(method), art.diagnostics(method))?;
                written.push(art.values(method));
                written.push(art.diagnostics(method));
            }
        }
        Stage::Experiment => written.extend(run_experiments(prep, &art)?),
    }
    Ok(written)
}

/// Every stage in order.
pub fn run_all_stages(prep: &Prepared) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for stage in Stage::ALL {
        for p in run_stage(prep, stage)? {
            if !written.contains(&p) {
                written.push(p);
            }
        }
    }
    Ok(written)
}

/// CCI vector and rank of one valuation method.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodValuation {
    pub method: String,
    pub cci: Vec<f64>,
    pub rank: Vec<usize>,
}

impl MethodValuation {
    pub fn from_values(method: &str, v: &[f64]) -> Result<Self> {
        Ok(Self {
            method: method.to_string(),
            cci: compute_cci(v)?.values,
            rank: rank_descending(v),
        })
    }
}

fn load_valuations(prep: &Prepared, art: &Artifacts) -> Result<Vec<MethodValuation>> {
    Artifacts::require(&art.contributions())?;
    let report = ContributionReport::read_csv(art.contributions())?;
    let mut out = vec![MethodValuation::from_values(FEDCCEA, &report.v)?];
    for &method in &prep.config.baselines.methods {
        let path = art.values(method);
        Artifacts::require(&path)?;
        let (found, values) = read_values(&path)?;
        if found != method || values.len() != prep.config.n_clients {
            return Err(Error::Consistency(format!(
                "{} does not hold {} values for {} clients",
                path.display(),
                method.name(),
                prep.config.n_clients
            )));
        }
        out.push(MethodValuation::from_values(method.name(), &values)?);
    }
    Ok(out)
}

fn run_experiments(prep: &Prepared, art: &Artifacts) -> Result<Vec<PathBuf>> {
    let valuations = load_valuations(prep, art)?;
    let settings = &prep.config.experiments;
    let n = prep.config.n_clients;
    let seed = prep.config.seed;
    let mut written = Vec::new();
    for &kind in &settings.run {
        log::info!("experiment {}", kind.name());
        let chart = art.path(&format!("{}.svg", kind.name()));
        match kind {
            ExperimentKind::Skewness => {
                let report = skewness_report(
                    valuations
                        .iter()
                        .map(|v| MethodCci {
                            method: v.method.clone(),
                            cci: v.cci.clone(),
                        })
                        .collect(),
                )?;
                write(art.path("skewness.csv"), report.to_csv(), &mut written)?;
                write(art.path("skewness-summary.csv"), report.summary_csv(), &mut written)?;
                let labels: Vec<String> = (0..n).map(|i| i.to_string()).collect();
                let series: Vec<(String, Vec<f64>)> =
                    report.entries.iter().map(|e| (e.method.clone(), e.cci.clone())).collect();
                bar_chart(&chart, "Client contribution index", "CCI", &labels, &series, Some(1.0 / n as f64))?;
            }
            ExperimentKind::Exclusion => {
                let entries: Vec<MethodCci> = valuations
                    .iter()
                    .map(|v| MethodCci {
                        method: v.method.clone(),
                        cci: v.cci.clone(),
                    })
                    .collect();
                let report = zero_exclusion_retrain(&entries, &prep.partitions, &prep.test, &prep.fl)?;
                write(art.path("exclusion.csv"), report.to_csv(), &mut written)?;
                let labels: Vec<String> = report.rows.iter().map(|r| r.method.clone()).collect();
                let values: Vec<f64> = report.rows.iter().map(|r| r.accuracy.unwrap_or(0.0)).collect();
                bar_chart(
                    &chart,
                    "Accuracy without zero contributors (dashed: all clients)",
                    "accuracy",
                    &labels,
                    &[("retrained".to_string(), values)],
                    Some(report.base),
                )?;
            }
            ExperimentKind::Removal => {
                let mut curves = Vec::new();
                for v in &valuations {
                    let pair = client_removal_curves(
                        &v.rank,
                        &prep.partitions,
                        &prep.test,
                        &prep.fl,
                        &settings.fractions,
                        settings.reuse_base_seed,
                    )?;
                    curves.extend(pair.map(|c| (v.method.clone(), c)));
                }
                write(art.path("removal.csv"), removal_csv(&curves, seed), &mut written)?;
                let series: Vec<(String, Vec<(f64, f64)>)> = curves
                    .iter()
                    .map(|(m, c)| (format!("{m} {}", c.direction.name()), c.points.clone()))
                    .collect();
                line_chart(&chart, "Client removal", "fraction removed", "accuracy", &series)?;
            }
            ExperimentKind::Partial => {
                Artifacts::require(&art.aam())?;
                let omega = AamExport::read(art.aam())?.omega;
                let curves = partial_participation_curves(
                    &omega,
                    &prep.partitions,
                    &prep.test,
                    &prep.fl,
                    &settings.fractions,
                    derive_seed(seed, seed_tag::PARTIAL),
                    settings.reuse_base_seed,
                )?;
                write(art.path("partial.csv"), partial_csv(&curves, seed), &mut written)?;
                let series: Vec<(String, Vec<(f64, f64)>)> = curves
                    .iter()
                    .map(|c| {
                        (
                            format!("{} {}", c.mode.name(), c.curve.direction.name()),
                            c.curve.points.clone(),
                        )
                    })
                    .collect();
                line_chart(&chart, "Removal under partial participation", "fraction removed", "accuracy", &series)?;
            }
            ExperimentKind::Cost => {
                let rows = cost_report(&prep.config)?;
                write(art.path("cost.csv"), cost_csv(&rows), &mut written)?;
                let mut methods: Vec<String> = Vec::new();
                for r in &rows {
                    if !methods.contains(&r.method) {
                        methods.push(r.method.clone());
                    }
                }
                let labels: Vec<String> = settings.cost_clients.iter().map(|n| format!("n={n}")).collect();
                let series: Vec<(String, Vec<f64>)> = methods
                    .iter()
                    .map(|m| {
                        let counts = settings
                            .cost_clients
                            .iter()
                            .map(|&n| rows.iter().find(|r| &r.method == m && r.n == n).map_or(0.0, |r| r.fl_runs as f64))
                            .collect();
                        (m.clone(), counts)
                    })
                    .collect();
                bar_chart(&chart, "Training runs per valuation", "FL runs", &labels, &series, None)?;
            }
        }
        written.push(chart);
    }
    Ok(written)
}

/// Counts training runs of every method at each client count of the cost grid.
///
/// An explicit `samples_per_client` is capped at what the training set can
/// give each of `n` clients.
pub fn cost_report(config: &RunConfig) -> Result<Vec<CostRow>> {
    let (train, _) = load_dataset(config)?;
    let mut rows = Vec::new();
    for &n in &config.experiments.cost_clients {
        let mut c = config.clone();
        c.n_clients = n;
        let fit = default_samples_per_client(&train.class_counts(), n, c.partition.classes(train.n_classes()));
        c.partition.samples_per_client = c.partition.samples_per_client.map(|s| s.min(fit));
        c.baselines.methods.retain(|&m| m != ValuationMethod::Exact || n <= crate::baselines::EXACT_SHAPLEY_MAX_CLIENTS);
        let prep = prepare(c)?;
        let store = prep.simulate()?;
        rows.push(CostRow {
            method: FEDCCEA.into(),
            n,
            fl_runs: store.fl_runs(),
        });
        for &method in &prep.config.baselines.methods {
            rows.push(CostRow {
                method: method.name().into(),
                n,
                fl_runs: prep.valuation(method)?.diagnostics.fl_runs,
            });
        }
    }
    Ok(rows)
}
