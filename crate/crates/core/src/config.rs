//! Run configuration: one strict JSON document describing data, partitioning,
//! noise, federated training, AAM fitting, baselines and experiments.
//!
//! Unknown keys are rejected. Everything except the dataset, the client count
//! and the round count has a default. Data-dependent defaults (samples per
//! client) are filled by [`RunConfig::resolve`] once the training set is known.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::aam::AamTrainConfig;
use crate::baselines::{TmcConfig, ValuationMethod, EXACT_SHAPLEY_MAX_CLIENTS};
use crate::datasets::{hex_digest, ClassesPerClient, LabeledDataset, NoiseKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub n_clients: usize,
    pub rounds: usize,
    #[serde(default)]
    pub partition: PartitionSettings,
    #[serde(default)]
    pub noise: NoiseSettings,
    #[serde(default)]
    pub fl: FlSettings,
    /// Number of simulations `S`.
    #[serde(default = "default_simulations")]
    pub simulations: usize,
    #[serde(default)]
    pub aam: AamSettings,
    #[serde(default)]
    pub baselines: BaselineSettings,
    #[serde(default)]
    pub experiments: ExperimentSettings,
    /// Master seed; every other seed is derived from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_simulations() -> usize {
    100
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SyntheticSource),
    Idx(IdxSource),
}

/// Gaussian blobs; the first `classes * train_per_class` samples train, the rest test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSource {
    pub classes: usize,
    pub dim: usize,
    pub spread: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        Self {
            classes: 6,
            dim: 16,
            spread: 0.35,
            train_per_class: 700,
            test_per_class: 1000,
        }
    }
}

/// IDX file paths; relative paths are taken relative to the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    #[default]
    Iid,
    /// Half of the classes per client.
    WeakNoniid,
    /// Two classes per client.
    StrongNoniid,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSettings {
    pub scenario: Scenario,
    /// Overrides the scenario's class count.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes_per_client: Option<ClassesPerClient>,
    /// Defaults to the largest count every client can receive.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples_per_client: Option<usize>,
}

impl PartitionSettings {
    pub fn classes(&self, n_classes: usize) -> ClassesPerClient {
        self.classes_per_client.unwrap_or(match self.scenario {
            Scenario::Iid => ClassesPerClient::All,
            Scenario::WeakNoniid => ClassesPerClient::Count(n_classes.div_ceil(2)),
            Scenario::StrongNoniid => ClassesPerClient::Count(2.min(n_classes)),
        })
    }
}

/// Noise injection. Accepts either an object or one of the preset names
/// `none`, `label40`, `label20`, `label10`, `sample20`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseSettings {
    pub kind: NoiseKind,
    pub client_fraction: f64,
    pub sample_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pattern_size: Option<usize>,
}

impl Default for NoiseSettings {
    fn default() -> Self {
        Self::preset("none").expect("known preset")
    }
}

impl NoiseSettings {
    pub fn preset(name: &str) -> Option<Self> {
        let (kind, sample_fraction) = match name {
            "none" => (NoiseKind::None, 0.0),
            "label40" => (NoiseKind::Label, 0.4),
            "label20" => (NoiseKind::Label, 0.2),
            "label10" => (NoiseKind::Label, 0.1),
            "sample20" => (NoiseKind::Pattern, 0.2),
            _ => return None,
        };
        let client_fraction = if kind == NoiseKind::None { 0.0 } else { 0.2 };
        Some(Self {
            kind,
            client_fraction,
            sample_fraction,
            pattern_size: None,
        })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseObject {
    kind: NoiseKind,
    #[serde(default = "default_noisy_clients")]
    client_fraction: f64,
    #[serde(default)]
    sample_fraction: f64,
    #[serde(default)]
    pattern_size: Option<usize>,
}

fn default_noisy_clients() -> f64 {
    0.2
}

impl<'de> Deserialize<'de> for NoiseSettings {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        struct NoiseVisitor;

        impl<'de> Visitor<'de> for NoiseVisitor {
            type Value = NoiseSettings;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a noise preset name or a noise object")
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Self::Value, E> {
                NoiseSettings::preset(v).ok_or_else(|| {
                    E::custom(format!(
                        "unknown noise preset \"{v}\" (expected none, label40, label20, label10 or sample20)"
                    ))
                })
            }

            fn visit_map<A: MapAccess<'de>>(self, map: A) -> std::result::Result<Self::Value, A::Error> {
                let o = NoiseObject::deserialize(de::value::MapAccessDeserializer::new(map))?;
                Ok(NoiseSettings {
                    kind: o.kind,
                    client_fraction: o.client_fraction,
                    sample_fraction: o.sample_fraction,
                    pattern_size: o.pattern_size,
                })
            }
        }

        de.deserialize_any(NoiseVisitor)
    }
}

/// Local training and model shape; input and output widths come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlSettings {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
}

impl Default for FlSettings {
    fn default() -> Self {
        Self {
            local_epochs: 3,
            batch_size: 32,
            lr: 0.001,
            hidden: vec![32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AamSettings {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for AamSettings {
    fn default() -> Self {
        let d = AamTrainConfig::default();
        Self {
            lr: d.lr,
            epochs: d.epochs,
            batch_size: d.batch_size,
            val_fraction: d.val_fraction,
            patience: d.patience,
            min_delta: d.min_delta,
        }
    }
}

impl AamSettings {
    pub fn train_config(&self, seed: u64) -> AamTrainConfig {
        AamTrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            val_fraction: self.val_fraction,
            patience: self.patience,
            min_delta: self.min_delta,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSettings {
    pub methods: Vec<ValuationMethod>,
    pub tmc: TmcSettings,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        Self {
            methods: vec![ValuationMethod::Loo, ValuationMethod::Tmc],
            tmc: TmcSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TmcSettings {
    pub max_perms: usize,
    pub trunc_tol: f64,
    pub conv_tol: f64,
}

impl Default for TmcSettings {
    fn default() -> Self {
        let d = TmcConfig::default();
        Self {
            max_perms: d.max_perms,
            trunc_tol: d.trunc_tol,
            conv_tol: d.conv_tol,
        }
    }
}

impl TmcSettings {
    pub fn tmc_config(&self, seed: u64) -> TmcConfig {
        TmcConfig {
            max_perms: self.max_perms,
            trunc_tol: self.trunc_tol,
            conv_tol: self.conv_tol,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Skewness,
    Exclusion,
    Removal,
    Partial,
    Cost,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::Skewness,
        ExperimentKind::Exclusion,
        ExperimentKind::Removal,
        ExperimentKind::Partial,
        ExperimentKind::Cost,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Skewness => "skewness",
            ExperimentKind::Exclusion => "exclusion",
            ExperimentKind::Removal => "removal",
            ExperimentKind::Partial => "partial",
            ExperimentKind::Cost => "cost",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSettings {
    pub run: Vec<ExperimentKind>,
    /// Removal fractions; sorted, in `[0, 1)`, starting at 0.
    pub fractions: Vec<f64>,
    /// Retrain with the Base seed (otherwise every retrain gets a fresh derived seed).
    pub reuse_base_seed: bool,
    /// Client counts for the cost table.
    pub cost_clients: Vec<usize>,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self {
            run: ExperimentKind::ALL.to_vec(),
            fractions: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            reuse_base_seed: true,
            cost_clients: vec![4, 8],
        }
    }
}

/// Reads and validates a config file.
pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = parse_config_str(&text)?;
    if let DatasetSource::Idx(idx) = &mut cfg.dataset {
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut idx.train_images,
            &mut idx.train_labels,
            &mut idx.test_images,
            &mut idx.test_labels,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
    Ok(cfg)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        let inner = e.into_inner();
        Error::config(key, inner.to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    /// Checks every invariant that does not need the data.
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: String| Err(Error::config(key, msg));
        if self.n_clients < 2 {
            return fail("n_clients", format!("must be >= 2, got {}", self.n_clients));
        }
        if self.rounds < 1 {
            return fail("rounds", "must be >= 1".into());
        }
        if self.simulations < 1 {
            return fail("simulations", "must be >= 1".into());
        }
        match &self.dataset {
            DatasetSource::Synthetic(s) => {
                if s.classes < 2 {
                    return fail("dataset.synthetic.classes", "must be >= 2".into());
                }
                if s.dim < 2 {
                    return fail("dataset.synthetic.dim", "must be >= 2".into());
                }
                if !(s.spread >= 0.0 && s.spread.is_finite()) {
                    return fail("dataset.synthetic.spread", "must be a finite value >= 0".into());
                }
                if s.train_per_class < 1 || s.test_per_class < 1 {
                    return fail("dataset.synthetic", "per-class counts must be >= 1".into());
                }
            }
            DatasetSource::Idx(_) => {}
        }
        if let Some(ClassesPerClient::Count(0)) = self.partition.classes_per_client {
            return fail("partition.classes_per_client", "must be >= 1".into());
        }
        if self.partition.samples_per_client == Some(0) {
            return fail("partition.samples_per_client", "must be >= 1".into());
        }
        let noise = &self.noise;
        for (key, f) in [
            ("noise.client_fraction", noise.client_fraction),
            ("noise.sample_fraction", noise.sample_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return fail(key, format!("must lie in [0, 1], got {f}"));
            }
        }
        if noise.pattern_size == Some(0) {
            return fail("noise.pattern_size", "must be >= 1".into());
        }
        let fl = &self.fl;
        if fl.local_epochs < 1 {
            return fail("fl.local_epochs", "must be >= 1".into());
        }
        if fl.batch_size < 1 {
            return fail("fl.batch_size", "must be >= 1".into());
        }
        if !(fl.lr > 0.0 && fl.lr.is_finite()) {
            return fail("fl.lr", format!("must be positive, got {}", fl.lr));
        }
        if fl.hidden.contains(&0) {
            return fail("fl.hidden", "layer widths must be >= 1".into());
        }
        let aam = &self.aam;
        if !(aam.lr > 0.0 && aam.lr.is_finite()) {
            return fail("aam.lr", format!("must be positive, got {}", aam.lr));
        }
        if aam.epochs < 1 {
            return fail("aam.epochs", "must be >= 1".into());
        }
        if aam.batch_size < 1 {
            return fail("aam.batch_size", "must be >= 1".into());
        }
        if !(aam.val_fraction > 0.0 && aam.val_fraction < 1.0) {
            return fail("aam.val_fraction", format!("must lie in (0, 1), got {}", aam.val_fraction));
        }
        if aam.min_delta.is_nan() || aam.min_delta < 0.0 {
            return fail("aam.min_delta", "must be >= 0".into());
        }
        if self.simulations * self.rounds < 10 {
            return fail("simulations", "the AAM needs at least 10 records (simulations * rounds)".into());
        }
        let tmc = &self.baselines.tmc;
        if tmc.max_perms < 1 {
            return fail("baselines.tmc.max_perms", "must be >= 1".into());
        }
        for (key, t) in [
            ("baselines.tmc.trunc_tol", tmc.trunc_tol),
            ("baselines.tmc.conv_tol", tmc.conv_tol),
        ] {
            if t.is_nan() || t < 0.0 {
                return fail(key, format!("must be >= 0, got {t}"));
            }
        }
        if self.baselines.methods.contains(&ValuationMethod::Exact) && self.n_clients > EXACT_SHAPLEY_MAX_CLIENTS {
            return fail(
                "baselines.methods",
                format!("exact Shapley supports at most {EXACT_SHAPLEY_MAX_CLIENTS} clients"),
            );
        }
        let fr = &self.experiments.fractions;
        if fr.first() != Some(&0.0) {
            return fail("experiments.fractions", "must start with 0".into());
        }
        if fr.iter().any(|f| !(0.0..1.0).contains(f)) {
            return fail("experiments.fractions", "every fraction must lie in [0, 1)".into());
        }
        if fr.windows(2).any(|w| w[0] >= w[1]) {
            return fail("experiments.fractions", "must be strictly ascending".into());
        }
        if self.experiments.cost_clients.iter().any(|&n| n < 2) {
            return fail("experiments.cost_clients", "client counts must be >= 2".into());
        }
        Ok(())
    }

    /// Fills data-dependent defaults and checks them against the training set.
    pub fn resolve(&mut self, train: &LabeledDataset) -> Result<()> {
        let c = train.n_classes();
        let classes = self.partition.classes(c);
        if let ClassesPerClient::Count(k) = classes {
            if k > c {
                return Err(Error::config(
                    "partition.classes_per_client",
                    format!("{k} classes per client but the data has {c}"),
                ));
            }
        }
        self.partition.classes_per_client = Some(classes);
        if self.partition.samples_per_client.is_none() {
            let spc = default_samples_per_client(&train.class_counts(), self.n_clients, classes);
            if spc == 0 {
                return Err(Error::config(
                    "partition.samples_per_client",
                    format!("training set too small for {} clients", self.n_clients),
                ));
            }
            self.partition.samples_per_client = Some(spc);
        }
        Ok(())
    }

    /// Canonical JSON of the config; this is what gets echoed next to the outputs.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Short digest of everything except the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&c).expect("config serializes"));
        hex_digest(hasher)[..12].to_string()
    }
}

/// Largest per-client sample count the partitioner can satisfy for every client.
pub fn default_samples_per_client(class_counts: &[usize], n_clients: usize, classes: ClassesPerClient) -> usize {
    let c = class_counts.len();
    let min_count = class_counts.iter().copied().min().unwrap_or(0);
    match classes {
        ClassesPerClient::All => min_count / n_clients * c,
        ClassesPerClient::Count(k) => {
            let k = k.min(c).max(1);
            // round-robin hands each class to at most ceil(n * k / C) clients
            let holders = (n_clients * k).div_ceil(c);
            min_count / holders * k
        }
    }
}
