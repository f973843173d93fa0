//! Labeled datasets, client partitioning and noise injection.
//!
//! Client datasets keep the sample order fixed at assignment time. Local
//! training always walks that stored order, so a client's batches are
//! identical in every simulation and every retraining run.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::RngStream;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Feature matrix (samples x dim, values in `[0, 1]`) with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    n_classes: usize,
}

/// Borrowed rows of a dataset, used for training on a prefix of a client's data.
#[derive(Debug, Clone, Copy)]
pub struct DataView<'a> {
    pub features: ArrayView2<'a, f64>,
    pub labels: &'a [usize],
}

impl DataView<'_> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl LabeledDataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::Precondition(format!(
                "label {bad} outside [0, {n_classes})"
            )));
        }
        Ok(Self {
            features,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn view(&self) -> DataView<'_> {
        self.prefix(self.len())
    }

    /// The first `len` samples in stored order.
    pub fn prefix(&self, len: usize) -> DataView<'_> {
        let len = len.min(self.len());
        DataView {
            features: self.features.slice(s![..len, ..]),
            labels: &self.labels[..len],
        }
    }

    /// New dataset made of the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let features = self.features.select(ndarray::Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self {
            features,
            labels,
            n_classes: self.n_classes,
        }
    }

    /// First `len` rows and the remainder, as two datasets.
    pub fn split_at(&self, len: usize) -> (Self, Self) {
        let len = len.min(self.len());
        let head: Vec<usize> = (0..len).collect();
        let tail: Vec<usize> = (len..self.len()).collect();
        (self.select(&head), self.select(&tail))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Sorted list of labels present in the dataset.
    pub fn label_support(&self) -> Vec<usize> {
        self.class_counts()
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(y, _)| y)
            .collect()
    }

    /// SHA-256 over shape, feature bits and labels.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        self.feed_hash(&mut hasher);
        hex_digest(hasher)
    }

    pub(crate) fn feed_hash(&self, hasher: &mut Sha256) {
        hasher.update((self.len() as u64).to_le_bytes());
        hasher.update((self.dim() as u64).to_le_bytes());
        hasher.update((self.n_classes as u64).to_le_bytes());
        for v in self.features.iter() {
            hasher.update(v.to_bits().to_le_bytes());
        }
        for &y in &self.labels {
            hasher.update((y as u64).to_le_bytes());
        }
    }
}

pub(crate) fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Gaussian class blobs in `[0, 1]^dim`.
///
/// Each class mean is drawn uniformly from `[0.15, 0.85]^dim`; samples add
/// isotropic noise with standard deviation `spread` and are clipped to the
/// unit cube. Samples are interleaved by class (`label = i mod classes`).
pub fn generate_synthetic(
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 || per_class < 1 || dim < 2 {
        return Err(Error::Precondition(format!(
            "synthetic data needs classes >= 2, per_class >= 1, dim >= 2 (got {classes}, {per_class}, {dim})"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Precondition(format!("spread must be finite and >= 0, got {spread}")));
    }
    let mut rng = RngStream::new(seed);
    let means = Array2::from_shape_simple_fn((classes, dim), || rng.random_range(0.15..0.85));
    let noise = Normal::new(0.0, spread).map_err(|e| Error::Precondition(e.to_string()))?;

    let n = classes * per_class;
    let mut features = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % classes;
        for j in 0..dim {
            let mut v = means[[y, j]];
            if spread > 0.0 {
                v += noise.sample(&mut rng);
            }
            features[[i, j]] = v.clamp(0.0, 1.0);
        }
        labels.push(y);
    }
    LabeledDataset::new(features, labels, classes)
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn read_idx<'a>(bytes: &'a [u8], magic: u32, what: &str) -> Result<(Vec<usize>, &'a [u8])> {
    let header = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
    };
    let found = header(0)?;
    if found != magic {
        return Err(Error::Format(format!(
            "{what}: bad magic 0x{found:08x}, expected 0x{magic:08x}"
        )));
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (1..=ndims)
        .map(|i| header(i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let body = &bytes[4 * (ndims + 1)..];
    let expected: usize = dims.iter().product();
    if body.len() != expected {
        return Err(Error::Format(format!(
            "{what}: header promises {expected} bytes of data, file holds {}",
            body.len()
        )));
    }
    Ok((dims, body))
}

/// Parses IDX image/label byte buffers (big-endian, ubyte payload).
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<LabeledDataset> {
    let (img_dims, pixels) = read_idx(images, IDX_IMAGES_MAGIC, "images")?;
    let (lbl_dims, raw_labels) = read_idx(labels, IDX_LABELS_MAGIC, "labels")?;
    let (n, rows, cols) = (img_dims[0], img_dims[1], img_dims[2]);
    if lbl_dims[0] != n {
        return Err(Error::Consistency(format!(
            "images file has {n} entries but labels file has {}",
            lbl_dims[0]
        )));
    }
    let dim = rows * cols;
    let features = Array2::from_shape_fn((n, dim), |(i, j)| f64::from(pixels[i * dim + j]) / 255.0);
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
    LabeledDataset::new(features, labels, n_classes)
}

/// Reads an IDX image/label file pair; gzip-compressed files are detected by magic.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let images = read_maybe_gzip(images_path.as_ref())?;
    let labels = read_maybe_gzip(labels_path.as_ref())?;
    parse_idx(&images, &labels)
}

/// Number of labels each client holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassesPerClient {
    All,
    Count(usize),
}

impl Serialize for ClassesPerClient {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ClassesPerClient::All => ser.serialize_str("all"),
            ClassesPerClient::Count(k) => ser.serialize_u64(*k as u64),
        }
    }
}

impl<'de> Deserialize<'de> for ClassesPerClient {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(usize),
            Name(String),
        }
        match Raw::deserialize(de)? {
            Raw::Count(k) => Ok(ClassesPerClient::Count(k)),
            Raw::Name(s) if s.eq_ignore_ascii_case("all") => Ok(ClassesPerClient::All),
            Raw::Name(s) => Err(serde::de::Error::custom(format!(
                "expected \"all\" or a positive integer, got \"{s}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub n_clients: usize,
    pub classes_per_client: ClassesPerClient,
    pub samples_per_client: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    None,
    Label,
    Pattern,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub client_fraction: f64,
    pub sample_fraction: f64,
    pub seed: u64,
    /// Side of the square pattern block; derived from the feature dimension when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern_size: Option<usize>,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("client_fraction", self.client_fraction),
            ("sample_fraction", self.sample_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Precondition(format!("{name} = {f} outside [0, 1]")));
            }
        }
        if self.kind == NoiseKind::None {
            return Err(Error::Precondition("noise kind must be label or pattern".into()));
        }
        Ok(())
    }
}

/// One client's local training set.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientPartition {
    pub client_id: usize,
    pub dataset: LabeledDataset,
    /// Row indices into the source dataset, in client order.
    pub source_indices: Vec<usize>,
    pub noise_kind: NoiseKind,
    /// Positions (within the client dataset) of modified samples.
    pub noisy_samples: Vec<usize>,
}

impl ClientPartition {
    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    pub fn noisy(&self) -> bool {
        self.noise_kind != NoiseKind::None
    }
}

/// Splits `data` into client datasets.
///
/// IID clients draw an equal number of samples from every class. Non-IID
/// clients receive `k` labels by round-robin over a seeded shuffle of the
/// class list, so every class is covered once `n * k >= C`. A client's samples
/// are interleaved across its labels, which makes every prefix close to
/// class-balanced.
pub fn partition(data: &LabeledDataset, spec: &PartitionSpec) -> Result<Vec<ClientPartition>> {
    let c = data.n_classes();
    if spec.n_clients < 2 {
        return Err(Error::Precondition(format!("n_clients must be >= 2, got {}", spec.n_clients)));
    }
    let k = match spec.classes_per_client {
        ClassesPerClient::All => c,
        ClassesPerClient::Count(k) if (1..=c).contains(&k) => k,
        ClassesPerClient::Count(k) => {
            return Err(Error::Precondition(format!("classes_per_client {k} outside [1, {c}]")))
        }
    };
    if spec.samples_per_client < k {
        return Err(Error::Precondition(format!(
            "samples_per_client {} cannot cover {k} classes",
            spec.samples_per_client
        )));
    }

    let mut rng = RngStream::new(spec.seed);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &y) in data.labels().iter().enumerate() {
        pools[y].push(i);
    }
    for pool in pools.iter_mut() {
        pool.shuffle(&mut rng);
    }

    let mut class_order: Vec<usize> = (0..c).collect();
    if spec.classes_per_client != ClassesPerClient::All {
        class_order.shuffle(&mut rng);
    }

    // (classes, per-class counts) for every client
    let plan: Vec<(Vec<usize>, Vec<usize>)> = (0..spec.n_clients)
        .map(|client| {
            let classes: Vec<usize> = (0..k).map(|j| class_order[(client * k + j) % c]).collect();
            let base = spec.samples_per_client / k;
            let rem = spec.samples_per_client % k;
            let counts = (0..k)
                .map(|j| base + usize::from((j + client) % k < rem))
                .collect();
            (classes, counts)
        })
        .collect();

    let mut demand = vec![0usize; c];
    for (classes, counts) in &plan {
        for (&y, &m) in classes.iter().zip(counts) {
            demand[y] += m;
        }
    }
    let deficits: Vec<String> = demand
        .iter()
        .zip(&pools)
        .enumerate()
        .filter(|(_, (&need, pool))| need > pool.len())
        .map(|(y, (&need, pool))| format!("class {y}: need {need}, have {}", pool.len()))
        .collect();
    if !deficits.is_empty() {
        return Err(Error::Capacity(format!(
            "not enough samples for partition ({})",
            deficits.join("; ")
        )));
    }

    let mut cursors = vec![0usize; c];
    let mut clients = Vec::with_capacity(spec.n_clients);
    for (client_id, (classes, counts)) in plan.into_iter().enumerate() {
        let mut taken: Vec<Vec<usize>> = classes
            .iter()
            .zip(&counts)
            .map(|(&y, &m)| {
                let start = cursors[y];
                cursors[y] += m;
                pools[y][start..start + m].to_vec()
            })
            .collect();
        let mut order = Vec::with_capacity(spec.samples_per_client);
        let longest = counts.iter().copied().max().unwrap_or(0);
        for step in 0..longest {
            for list in taken.iter_mut() {
                if let Some(&i) = list.get(step) {
                    order.push(i);
                }
            }
        }
        clients.push(ClientPartition {
            client_id,
            dataset: data.select(&order),
            source_indices: order,
            noise_kind: NoiseKind::None,
            noisy_samples: Vec::new(),
        });
    }
    Ok(clients)
}

/// Default side of the square trigger block for a `dim`-feature layout.
pub fn default_pattern_size(dim: usize) -> usize {
    let side = (dim as f64).sqrt().ceil() as usize;
    (side / 7).max(2)
}

/// Feature positions set to 1.0 by the pattern trigger.
///
/// For square image layouts this is the bottom-right `k x k` block; otherwise
/// the last `k * k` features.
pub fn pattern_positions(dim: usize, k: usize) -> Vec<usize> {
    let side = (dim as f64).sqrt().round() as usize;
    if side * side == dim && k <= side {
        (side - k..side)
            .flat_map(|row| (side - k..side).map(move |col| row * side + col))
            .collect()
    } else {
        let m = (k * k).min(dim);
        (dim - m..dim).collect()
    }
}

/// Corrupts a seeded selection of clients.
///
/// `round(client_fraction * n)` clients are picked; inside each,
/// `round(sample_fraction * len)` samples are modified. Label noise maps
/// `y -> (y + 1 + u) mod C` with a per-client offset `u` in `[0, C - 1)`, so a
/// flipped label never equals the original. Pattern noise whitens a fixed
/// feature block and keeps labels.
pub fn inject_noise(
    mut partitions: Vec<ClientPartition>,
    spec: &NoiseSpec,
) -> Result<Vec<ClientPartition>> {
    spec.validate()?;
    let n = partitions.len();
    let mut rng = RngStream::new(spec.seed);
    let n_noisy = (spec.client_fraction * n as f64).round() as usize;
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rng);
    let mut chosen: Vec<usize> = ids.into_iter().take(n_noisy).collect();
    chosen.sort_unstable();

    for idx in chosen {
        let client = &mut partitions[idx];
        let mut crng = rng.child(client.client_id as u64);
        let len = client.len();
        let m = (spec.sample_fraction * len as f64).round() as usize;
        if m == 0 {
            continue;
        }
        let mut picked = rand::seq::index::sample(&mut crng, len, m).into_vec();
        picked.sort_unstable();

        let mut features = client.dataset.features().clone();
        let mut labels = client.dataset.labels().to_vec();
        let n_classes = client.dataset.n_classes();
        match spec.kind {
            NoiseKind::Label => {
                if n_classes < 2 {
                    return Err(Error::Precondition("label noise needs at least 2 classes".into()));
                }
                let offset = crng.random_range(0..n_classes - 1);
                for &i in &picked {
                    labels[i] = (labels[i] + 1 + offset) % n_classes;
                }
            }
            NoiseKind::Pattern => {
                let dim = client.dataset.dim();
                let k = spec.pattern_size.unwrap_or_else(|| default_pattern_size(dim));
                let positions = pattern_positions(dim, k);
                for &i in &picked {
                    for &p in &positions {
                        features[[i, p]] = 1.0;
                    }
                }
            }
            NoiseKind::None => unreachable!("validated above"),
        }
        client.dataset = LabeledDataset::new(features, labels, n_classes)?;
        client.noise_kind = spec.kind;
        client.noisy_samples = picked;
    }
    Ok(partitions)
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub client_id: usize,
    pub sample_indices: Vec<usize>,
    pub noisy: bool,
    pub noise_kind: NoiseKind,
    pub noisy_samples: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct PartitionManifest {
    pub clients: Vec<ManifestEntry>,
}

impl PartitionManifest {
    pub fn from_partitions(partitions: &[ClientPartition]) -> Self {
        Self {
            clients: partitions
                .iter()
                .map(|p| ManifestEntry {
                    client_id: p.client_id,
                    sample_indices: p.source_indices.clone(),
                    noisy: p.noisy(),
                    noise_kind: p.noise_kind,
                    noisy_samples: p.noisy_samples.clone(),
                })
                .collect(),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&raw).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Hash over every client dataset and the test set.
pub fn partitions_hash(partitions: &[ClientPartition], test: &LabeledDataset) -> String {
    let mut hasher = Sha256::new();
    for p in partitions {
        hasher.update((p.client_id as u64).to_le_bytes());
        p.dataset.feed_hash(&mut hasher);
    }
    test.feed_hash(&mut hasher);
    hex_digest(hasher)
}
