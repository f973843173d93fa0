//! Dense MLP substrate: ReLU hidden layers, softmax output, cross-entropy SGD.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{DataView, LabeledDataset};
use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

/// Layer widths from input to output; the output layer is a softmax over classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct MlpSpec {
    layer_sizes: Vec<usize>,
    hidden_activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Precondition(format!(
                "an MLP needs at least input and output sizes, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::Precondition(format!("layer sizes must be >= 1, got {layer_sizes:?}")));
        }
        Ok(Self {
            layer_sizes,
            hidden_activation: Activation::Relu,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }
}

impl TryFrom<Vec<usize>> for MlpSpec {
    type Error = Error;

    fn try_from(sizes: Vec<usize>) -> Result<Self> {
        MlpSpec::new(sizes)
    }
}

impl From<MlpSpec> for Vec<usize> {
    fn from(spec: MlpSpec) -> Self {
        spec.layer_sizes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// out x in
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
}

impl MlpParams {
    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.layers.last().expect("at least one layer").weights.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// All parameters flattened layer by layer (weights row-major, then bias).
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    /// `self += alpha * other`
    pub fn scaled_add(&mut self, alpha: f64, other: &MlpParams) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.scaled_add(alpha, &b.weights);
            a.bias.scaled_add(alpha, &b.bias);
        }
    }

    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weights.dim() == b.weights.dim() && a.bias.dim() == b.bias.dim())
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_mlp(spec: &MlpSpec, rng: &mut RngStream) -> MlpParams {
    let layers = spec
        .layer_sizes
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Dense {
                weights: Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-a..a)),
                bias: Array1::zeros(fan_out),
            }
        })
        .collect();
    MlpParams { layers }
}

fn relu_inplace(z: &mut Array2<f64>) {
    z.mapv_inplace(|v| v.max(0.0));
}

fn softmax_rows_inplace(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn check_input(params: &MlpParams, batch: &ArrayView2<f64>) -> Result<()> {
    if batch.ncols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "batch has {} columns, network expects {}",
            batch.ncols(),
            params.input_dim()
        )));
    }
    Ok(())
}

/// Activations of every layer; the last entry holds class probabilities.
fn forward_all(params: &MlpParams, batch: ArrayView2<f64>) -> Vec<Array2<f64>> {
    let mut acts = Vec::with_capacity(params.layers.len() + 1);
    acts.push(batch.to_owned());
    let last = params.layers.len() - 1;
    for (l, layer) in params.layers.iter().enumerate() {
        let mut z = acts[l].dot(&layer.weights.t()) + &layer.bias;
        if l == last {
            softmax_rows_inplace(&mut z);
        } else {
            relu_inplace(&mut z);
        }
        acts.push(z);
    }
    acts
}

/// Class probabilities, one row per sample.
pub fn forward(params: &MlpParams, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_input(params, &batch)?;
    Ok(forward_all(params, batch).pop().expect("output layer"))
}

/// Mean cross-entropy of the batch.
pub fn cross_entropy(params: &MlpParams, data: DataView<'_>) -> Result<f64> {
    let probs = forward(params, data.features)?;
    let total: f64 = data
        .labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[[i, y]].max(f64::MIN_POSITIVE).ln())
        .sum();
    Ok(total / data.len() as f64)
}

/// Mean cross-entropy gradient with respect to every parameter.
pub fn gradient(params: &MlpParams, data: DataView<'_>) -> Result<MlpParams> {
    check_input(params, &data.features)?;
    if data.is_empty() {
        return Err(Error::Precondition("gradient of an empty batch".into()));
    }
    let acts = forward_all(params, data.features);
    let m = data.len() as f64;

    let mut delta = acts.last().expect("output").clone();
    for (i, &y) in data.labels.iter().enumerate() {
        delta[[i, y]] -= 1.0;
    }
    delta /= m;

    let mut grads = Vec::with_capacity(params.layers.len());
    for l in (0..params.layers.len()).rev() {
        let input = &acts[l];
        grads.push(Dense {
            weights: delta.t().dot(input),
            bias: delta.sum_axis(Axis(0)),
        });
        if l > 0 {
            let mut back = delta.dot(&params.layers[l].weights);
            Zip::from(&mut back).and(input).for_each(|d, &a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            });
            delta = back;
        }
    }
    grads.reverse();
    Ok(MlpParams { layers: grads })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

/// Mini-batch SGD over the stored sample order; the trailing short batch is kept.
pub fn sgd_train(mut params: MlpParams, data: DataView<'_>, cfg: &SgdConfig) -> Result<MlpParams> {
    if data.is_empty() {
        return Err(Error::Precondition("cannot train on an empty dataset".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Precondition(format!(
            "epochs and batch_size must be >= 1 (got {}, {})",
            cfg.epochs, cfg.batch_size
        )));
    }
    check_input(&params, &data.features)?;
    let n = data.len();
    for _ in 0..cfg.epochs {
        let mut start = 0;
        while start < n {
            let end = (start + cfg.batch_size).min(n);
            let batch = DataView {
                features: data.features.slice(ndarray::s![start..end, ..]),
                labels: &data.labels[start..end],
            };
            let g = gradient(&params, batch)?;
            params.scaled_add(-cfg.lr, &g);
            start = end;
        }
    }
    Ok(params)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in row.into_iter().enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

/// Fraction of samples whose most probable class equals the label.
pub fn evaluate_accuracy(params: &MlpParams, test: &LabeledDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Precondition("empty test set".into()));
    }
    let probs = forward(params, test.features().view())?;
    let correct = probs
        .rows()
        .into_iter()
        .zip(test.labels())
        .filter(|(row, &y)| argmax(row.iter().copied()) == y)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::generate_synthetic;
    use ndarray::array;

    fn spec(sizes: &[usize]) -> MlpSpec {
        MlpSpec::new(sizes.to_vec()).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![3]).is_err());
        assert!(MlpSpec::new(vec![3, 0, 2]).is_err());
        assert!(serde_json::from_str::<MlpSpec>("[4, 0]").is_err());
        let s: MlpSpec = serde_json::from_str("[4, 8, 3]").unwrap();
        assert_eq!(s.n_classes(), 3);
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a = init_mlp(&spec(&[2, 3, 2]), &mut RngStream::new(7));
        let b = init_mlp(&spec(&[2, 3, 2]), &mut RngStream::new(7));
        assert_eq!(a, b);
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&v| v == 0.0)));
        let limit = (6.0f64 / 5.0).sqrt();
        assert!(a.layers[0].weights.iter().all(|w| w.abs() < limit));
    }

    #[test]
    fn different_seeds_differ() {
        let a = init_mlp(&spec(&[4, 5]), &mut RngStream::new(1));
        let b = init_mlp(&spec(&[4, 5]), &mut RngStream::new(2));
        assert_ne!(a.layers[0].weights, b.layers[0].weights);
    }

    #[test]
    fn zero_network_is_uniform() {
        let p = init_mlp(&spec(&[3, 4, 5]), &mut RngStream::new(0)).zeros_like();
        let out = forward(&p, array![[0.3, 0.1, 0.9], [1.0, 0.0, 0.5]].view()).unwrap();
        for v in out.iter() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_net_follows_largest_feature() {
        let p = MlpParams {
            layers: vec![Dense {
                weights: Array2::eye(3),
                bias: Array1::zeros(3),
            }],
        };
        let out = forward(&p, array![[0.1, 0.7, 0.2]].view()).unwrap();
        assert_eq!(argmax(out.row(0).iter().copied()), 1);
        // softmax(0.1, 0.7, 0.2) by hand
        let e = [0.1f64.exp(), 0.7f64.exp(), 0.2f64.exp()];
        let s: f64 = e.iter().sum();
        assert!((out[[0, 1]] - e[1] / s).abs() < 1e-15);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = init_mlp(&spec(&[3, 2]), &mut RngStream::new(0));
        assert!(matches!(forward(&p, Array2::zeros((2, 4)).view()), Err(Error::Shape(_))));
    }

    #[test]
    fn rows_sum_to_one() {
        let p = init_mlp(&spec(&[6, 10, 4]), &mut RngStream::new(3));
        let mut rng = RngStream::new(4);
        let x = Array2::from_shape_simple_fn((20, 6), || rng.random_range(-3.0..3.0));
        let out = forward(&p, x.view()).unwrap();
        for row in out.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn zero_lr_is_identity() {
        let data = generate_synthetic(3, 10, 4, 0.1, 1).unwrap();
        let p = init_mlp(&spec(&[4, 5, 3]), &mut RngStream::new(2));
        let cfg = SgdConfig { epochs: 2, batch_size: 7, lr: 0.0 };
        assert_eq!(sgd_train(p.clone(), data.view(), &cfg).unwrap(), p);
    }

    #[test]
    fn sgd_rejects_empty_and_zero_epochs() {
        let data = generate_synthetic(3, 10, 4, 0.1, 1).unwrap();
        let p = init_mlp(&spec(&[4, 3]), &mut RngStream::new(2));
        let zero = SgdConfig { epochs: 0, batch_size: 4, lr: 0.1 };
        assert!(sgd_train(p.clone(), data.view(), &zero).is_err());
        let ok = SgdConfig { epochs: 1, batch_size: 4, lr: 0.1 };
        assert!(sgd_train(p, data.prefix(0), &ok).is_err());
    }

    #[test]
    fn separable_blobs_are_learned() {
        let data = generate_synthetic(2, 100, 2, 0.05, 8).unwrap();
        let mut p = init_mlp(&spec(&[2, 8, 2]), &mut RngStream::new(1));
        let cfg = SgdConfig { epochs: 1, batch_size: 16, lr: 0.1 };
        for _ in 0..50 {
            p = sgd_train(p, data.view(), &cfg).unwrap();
        }
        assert!(evaluate_accuracy(&p, &data).unwrap() >= 0.95);
    }

    #[test]
    fn accuracy_tie_rule_on_zero_network() {
        let data = generate_synthetic(4, 25, 3, 0.1, 1).unwrap();
        let p = init_mlp(&spec(&[3, 4]), &mut RngStream::new(0)).zeros_like();
        assert_eq!(evaluate_accuracy(&p, &data).unwrap(), 0.25);
    }

    #[test]
    fn accuracy_matches_recount() {
        let data = generate_synthetic(5, 20, 6, 0.3, 2).unwrap();
        let p = init_mlp(&spec(&[6, 7, 5]), &mut RngStream::new(5));
        let probs = forward(&p, data.features().view()).unwrap();
        let mut correct = 0;
        for i in 0..data.len() {
            let mut best = 0;
            for c in 1..5 {
                if probs[[i, c]] > probs[[i, best]] {
                    best = c;
                }
            }
            if best == data.labels()[i] {
                correct += 1;
            }
        }
        assert_eq!(evaluate_accuracy(&p, &data).unwrap(), correct as f64 / 100.0);
    }

    #[test]
    fn perfect_predictor_scores_one() {
        // one-hot features routed straight to the class logits
        let labels = vec![0, 1, 2, 1, 0];
        let mut x = Array2::zeros((5, 3));
        for (i, &y) in labels.iter().enumerate() {
            x[[i, y]] = 1.0;
        }
        let data = LabeledDataset::new(x, labels, 3).unwrap();
        let p = MlpParams {
            layers: vec![Dense {
                weights: Array2::eye(3) * 10.0,
                bias: Array1::zeros(3),
            }],
        };
        assert_eq!(evaluate_accuracy(&p, &data).unwrap(), 1.0);
        let empty = LabeledDataset::new(Array2::zeros((0, 3)), vec![], 3).unwrap();
        assert!(evaluate_accuracy(&p, &empty).is_err());
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        let scale = a.abs().max(b.abs());
        if scale < 1e-7 {
            0.0
        } else {
            (a - b).abs() / scale
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = RngStream::new(2024);
        for trial in 0..20u64 {
            let depth = rng.random_range(2..5);
            let sizes: Vec<usize> = (0..depth).map(|_| rng.random_range(2..7)).collect();
            let s = spec(&sizes);
            let mut p = init_mlp(&s, &mut RngStream::new(trial));
            for layer in p.layers.iter_mut() {
                layer.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            }
            let x = Array2::from_shape_simple_fn((10, sizes[0]), || rng.random_range(0.0..1.0));
            let labels: Vec<usize> = (0..10).map(|_| rng.random_range(0..s.n_classes())).collect();
            let view = DataView { features: x.view(), labels: &labels };
            let g = gradient(&p, view).unwrap();
            let eps = 1e-5;
            for (k, analytic) in g.iter().enumerate() {
                let mut plus = p.clone();
                *plus.iter_mut().nth(k).unwrap() += eps;
                let mut minus = p.clone();
                *minus.iter_mut().nth(k).unwrap() -= eps;
                let numeric =
                    (cross_entropy(&plus, view).unwrap() - cross_entropy(&minus, view).unwrap()) / (2.0 * eps);
                assert!(
                    rel_err(*analytic, numeric) < 1e-4,
                    "trial {trial} param {k}: {analytic} vs {numeric}"
                );
            }
        }
    }
}
