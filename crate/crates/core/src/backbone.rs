//! The fixed feedforward regression network that GAPA wraps, with a small
//! Adam trainer so the pipeline can produce one.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{shuffled_indices, Dataset, SplitSpec, Standardizer};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::persist;

pub const NETWORK_FILE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn eval(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative at `z`; relu uses 0 at exactly 0.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

/// Checks dims, chaining, and that the last layer is identity-activated.
pub fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Config("network needs at least one layer".into()));
    }
    for (l, s) in specs.iter().enumerate() {
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(Error::Config(format!("layer {l} has a zero dimension")));
        }
    }
    for (l, pair) in specs.windows(2).enumerate() {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(Error::Config(format!(
                "layer {l} outputs {} values but layer {} expects {}",
                pair[0].out_dim,
                l + 1,
                pair[1].in_dim
            )));
        }
    }
    if specs.last().unwrap().activation != Activation::Identity {
        return Err(Error::Config("final layer must use the identity activation".into()));
    }
    Ok(())
}

/// Parses `"1-32-32-1:tanh"`: layer widths, with the named activation on every
/// hidden layer and identity on the output.
pub fn parse_layer_specs(text: &str) -> Result<Vec<LayerSpec>> {
    let (dims, act) = match text.split_once(':') {
        Some((d, a)) => (d, Activation::parse(a)?),
        None => (text, Activation::Tanh),
    };
    let dims: Vec<usize> = dims
        .split('-')
        .map(|d| {
            d.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad layer width '{d}' in spec '{text}'")))
        })
        .collect::<Result<_>>()?;
    if dims.len() < 2 {
        return Err(Error::Config(format!(
            "spec '{text}' needs at least input and output widths"
        )));
    }
    let n = dims.len() - 1;
    let specs: Vec<LayerSpec> = (0..n)
        .map(|l| LayerSpec {
            in_dim: dims[l],
            out_dim: dims[l + 1],
            activation: if l + 1 == n { Activation::Identity } else { act },
        })
        .collect();
    validate_specs(&specs)?;
    Ok(specs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneNetwork {
    layers: Vec<LayerSpec>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
}

/// Every layer's pre- and post-activations for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub pre_activations: Vec<Vec<f64>>,
    pub post_activations: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

/// `W x + b`. The GAPA mean path goes through this same function, which is
/// what makes its mean bit-identical to [`BackboneNetwork::forward`].
#[inline]
pub fn affine(w: &Matrix, b: &[f64], x: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|i| dot(w.row(i), x) + b[i]).collect()
}

impl BackboneNetwork {
    pub fn new(layers: Vec<LayerSpec>, weights: Vec<Matrix>, biases: Vec<Vec<f64>>) -> Result<Self> {
        validate_specs(&layers)?;
        if weights.len() != layers.len() || biases.len() != layers.len() {
            return Err(Error::Shape(format!(
                "{} layers but {} weight matrices and {} bias vectors",
                layers.len(),
                weights.len(),
                biases.len()
            )));
        }
        for (l, ((s, w), b)) in layers.iter().zip(&weights).zip(&biases).enumerate() {
            if w.rows() != s.out_dim || w.cols() != s.in_dim || b.len() != s.out_dim {
                return Err(Error::Shape(format!(
                    "layer {l}: weights {}x{} and {} biases do not match {}->{}",
                    w.rows(),
                    w.cols(),
                    b.len(),
                    s.in_dim,
                    s.out_dim
                )));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("biases of layer {l}")));
            }
        }
        Ok(Self {
            layers,
            weights,
            biases,
        })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        validate_specs(&layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(layers.len());
        let mut biases = Vec::with_capacity(layers.len());
        for s in &layers {
            let limit = (6.0 / (s.in_dim + s.out_dim) as f64).sqrt();
            let values = (0..s.in_dim * s.out_dim)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            weights.push(Matrix::new(s.out_dim, s.in_dim, values)?);
            biases.push(vec![0.0; s.out_dim]);
        }
        Self::new(layers, weights, biases)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    /// Width of the first hidden layer, where the GPs live.
    pub fn first_width(&self) -> usize {
        self.layers[0].out_dim
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Ok(())
    }

    /// First-layer pre-activations `W⁰x + b⁰`.
    pub fn first_pre_activations(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(affine(&self.weights[0], &self.biases[0], x))
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let mut pre_activations = Vec::with_capacity(self.n_layers());
        let mut post_activations: Vec<Vec<f64>> = Vec::with_capacity(self.n_layers());
        for l in 0..self.n_layers() {
            let input = if l == 0 { x } else { &post_activations[l - 1] };
            let pre = affine(&self.weights[l], &self.biases[l], input);
            let act = self.layers[l].activation;
            let post: Vec<f64> = pre.iter().map(|&z| act.eval(z)).collect();
            pre_activations.push(pre);
            post_activations.push(post);
        }
        let output = post_activations.last().unwrap().clone();
        Ok(ForwardTrace {
            pre_activations,
            post_activations,
            output,
        })
    }

    /// Scalar prediction for single-output networks.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(self.forward(x)?.output[0])
    }

    pub fn n_params(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.rows() * w.cols() + b.len())
            .sum()
    }

    /// All parameters, layer by layer: weights row-major, then biases.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let nw = w.rows() * w.cols();
            w.as_mut_slice().copy_from_slice(&params[off..off + nw]);
            off += nw;
            let nb = b.len();
            b.copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Mean squared error over `rows` of `data` and its gradient with respect
    /// to [`flat_params`](Self::flat_params).
    pub fn mse_and_gradient(&self, data: &Dataset, rows: &[usize]) -> Result<(f64, Vec<f64>)> {
        if self.output_dim() != 1 {
            return Err(Error::Config("training needs a scalar-output network".into()));
        }
        let mut grad_w: Vec<Vec<f64>> = self.weights.iter().map(|w| vec![0.0; w.rows() * w.cols()]).collect();
        let mut grad_b: Vec<Vec<f64>> = self.biases.iter().map(|b| vec![0.0; b.len()]).collect();
        let scale = 1.0 / rows.len() as f64;
        let mut loss = 0.0;
        for &i in rows {
            let x = data.row(i);
            let trace = self.forward(x)?;
            let r = trace.output[0] - data.targets[i];
            loss += r * r * scale;
            let mut delta = vec![2.0 * r * scale];
            for l in (0..self.n_layers()).rev() {
                let input = if l == 0 { x } else { &trace.post_activations[l - 1] };
                let cols = input.len();
                for (o, &d) in delta.iter().enumerate() {
                    grad_b[l][o] += d;
                    for (g, &a) in grad_w[l][o * cols..(o + 1) * cols].iter_mut().zip(input) {
                        *g += d * a;
                    }
                }
                if l == 0 {
                    break;
                }
                let act = self.layers[l - 1].activation;
                let w = &self.weights[l];
                delta = (0..cols)
                    .map(|j| {
                        let back: f64 = delta.iter().enumerate().map(|(o, &d)| d * w.get(o, j)).sum();
                        back * act.derivative(trace.pre_activations[l - 1][j])
                    })
                    .collect();
            }
        }
        let mut grad = Vec::with_capacity(self.n_params());
        for (gw, gb) in grad_w.into_iter().zip(grad_b) {
            grad.extend(gw);
            grad.extend(gb);
        }
        Ok((loss, grad))
    }

    pub fn mse(&self, data: &Dataset) -> Result<f64> {
        let mut s = 0.0;
        for i in 0..data.len() {
            let r = self.predict(data.row(i))? - data.targets[i];
            s += r * r;
        }
        Ok(s / data.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            learning_rate: 3e-3,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneTrainLog {
    /// Full-training-set MSE after each epoch.
    pub epoch_mse: Vec<f64>,
}

impl BackboneTrainLog {
    pub fn final_mse(&self) -> Option<f64> {
        self.epoch_mse.last().copied()
    }
}

/// Adam moment estimates for a flat parameter vector.
#[derive(Clone, Debug)]
pub(crate) struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// Seed for the batch order of `epoch`, derived from the run seed.
pub(crate) fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(epoch as u64 + 1)
}

/// Mini-batch Adam on mean squared error. Deterministic given `config.seed`.
pub fn train_backbone(
    train: &Dataset,
    specs: &[LayerSpec],
    config: &TrainConfig,
) -> Result<(BackboneNetwork, BackboneTrainLog)> {
    validate_specs(specs)?;
    if specs[0].in_dim != train.n_features() {
        return Err(Error::Config(format!(
            "network input width {} does not match {} dataset features",
            specs[0].in_dim,
            train.n_features()
        )));
    }
    if specs.last().unwrap().out_dim != 1 {
        return Err(Error::Config("network output width must be 1".into()));
    }
    if train.is_empty() || config.batch_size == 0 {
        return Err(Error::Config("training needs data and a positive batch size".into()));
    }
    let mut net = BackboneNetwork::init(specs.to_vec(), config.seed)?;
    let mut params = net.flat_params();
    let mut adam = Adam::new(params.len(), config.learning_rate);
    let mut epoch_mse = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let order = shuffled_indices(train.len(), epoch_seed(config.seed, epoch));
        for batch in order.chunks(config.batch_size) {
            let (_, grad) = net.mse_and_gradient(train, batch)?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    message: "non-finite gradient".into(),
                });
            }
            adam.step(&mut params, &grad);
            net.set_flat_params(&params).map_err(|_| Error::Training {
                epoch,
                message: "parameters became non-finite".into(),
            })?;
        }
        let mse = net.mse(train)?;
        if !mse.is_finite() {
            return Err(Error::Training {
                epoch,
                message: "loss is not finite".into(),
            });
        }
        epoch_mse.push(mse);
    }
    Ok((net, BackboneTrainLog { epoch_mse }))
}

/// Optional context stored next to the parameters so the network can be
/// applied to raw data later.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NetworkMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardizer: Option<Standardizer>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub feature_columns: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    /// Split used when training, so later commands can recover the partitions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSpec>,
}

#[derive(Serialize, Deserialize)]
struct NetworkFile {
    version: u32,
    layer_specs: Vec<LayerSpec>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<NetworkMeta>,
}

pub fn network_to_string(net: &BackboneNetwork, meta: Option<&NetworkMeta>) -> Result<String> {
    persist::to_string(&NetworkFile {
        version: NETWORK_FILE_VERSION,
        layer_specs: net.layers.clone(),
        weights: net.weights.iter().map(|w| w.as_slice().to_vec()).collect(),
        biases: net.biases.clone(),
        meta: meta.cloned(),
    })
}

pub fn network_from_str(text: &str) -> Result<(BackboneNetwork, Option<NetworkMeta>)> {
    let file: NetworkFile = persist::from_str(text, "network", NETWORK_FILE_VERSION)?;
    if file.weights.len() != file.layer_specs.len() {
        return Err(Error::Persistence(
            "network file has mismatched layer and weight counts".into(),
        ));
    }
    let weights = file
        .layer_specs
        .iter()
        .zip(file.weights)
        .map(|(s, w)| Matrix::new(s.out_dim, s.in_dim, w))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Persistence(format!("bad weights in network file: {e}")))?;
    let net = BackboneNetwork::new(file.layer_specs, weights, file.biases)
        .map_err(|e| Error::Persistence(format!("inconsistent network file: {e}")))?;
    Ok((net, file.meta))
}

pub fn save_network(net: &BackboneNetwork, path: impl AsRef<Path>) -> Result<()> {
    save_network_with_meta(net, None, path)
}

pub fn save_network_with_meta(net: &BackboneNetwork, meta: Option<&NetworkMeta>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, network_to_string(net, meta)?)?;
    Ok(())
}

pub fn load_network(path: impl AsRef<Path>) -> Result<BackboneNetwork> {
    Ok(load_network_with_meta(path)?.0)
}

pub fn load_network_with_meta(path: impl AsRef<Path>) -> Result<(BackboneNetwork, Option<NetworkMeta>)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Persistence(format!("cannot read {}: {e}", path.display())))?;
    network_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::make_toy_gap;
    use proptest::prelude::*;

    fn spec(i: usize, o: usize, a: Activation) -> LayerSpec {
        LayerSpec {
            in_dim: i,
            out_dim: o,
            activation: a,
        }
    }

    fn tiny_tanh() -> BackboneNetwork {
        BackboneNetwork::new(
            vec![spec(1, 2, Activation::Tanh), spec(2, 1, Activation::Identity)],
            vec![
                Matrix::from_rows(&[vec![1.0], vec![-1.0]]).unwrap(),
                Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(),
            ],
            vec![vec![0.0, 0.0], vec![0.0]],
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_give_final_bias() {
        let net = BackboneNetwork::new(
            vec![spec(2, 3, Activation::Relu), spec(3, 1, Activation::Identity)],
            vec![Matrix::zeros(3, 2), Matrix::zeros(1, 3)],
            vec![vec![0.5, -1.0, 2.0], vec![1.25]],
        )
        .unwrap();
        assert_eq!(net.predict(&[3.0, -4.0]).unwrap(), 1.25);
    }

    #[test]
    fn identity_network() {
        let net = BackboneNetwork::new(
            vec![spec(3, 3, Activation::Identity)],
            vec![Matrix::identity(3)],
            vec![vec![0.0; 3]],
        )
        .unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.5]).unwrap().output, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn odd_tanh_network_cancels() {
        let t = tiny_tanh().forward(&[0.5]).unwrap();
        assert_eq!(t.output, vec![0.0]);
        assert_eq!(t.pre_activations[0], vec![0.5, -0.5]);
        assert_eq!(t.post_activations[0], vec![0.5f64.tanh(), (-0.5f64).tanh()]);
    }

    #[test]
    fn input_length_checked() {
        assert!(matches!(tiny_tanh().forward(&[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        assert_eq!(Activation::Relu.derivative(0.0), 0.0);
        assert_eq!(Activation::Relu.derivative(1e-300), 1.0);
    }

    #[test]
    fn spec_parsing() {
        let s = parse_layer_specs("1-32-32-1:tanh").unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s[1], spec(32, 32, Activation::Tanh));
        assert_eq!(s[2].activation, Activation::Identity);
        assert!(parse_layer_specs("1").is_err());
        assert!(parse_layer_specs("1-x-1").is_err());
        assert!(parse_layer_specs("1-4-1:sigmoid").is_err());
    }

    #[test]
    fn final_layer_must_be_identity() {
        assert!(validate_specs(&[spec(1, 1, Activation::Tanh)]).is_err());
        assert!(validate_specs(&[spec(1, 2, Activation::Tanh), spec(3, 1, Activation::Identity)]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = make_toy_gap(16, 5).unwrap();
        let mut net =
            BackboneNetwork::init(vec![spec(1, 2, Activation::Tanh), spec(2, 1, Activation::Identity)], 9).unwrap();
        let mut p = net.flat_params();
        p[4] = 0.3; // non-zero biases exercise every path
        p[5] = -0.2;
        net.set_flat_params(&p).unwrap();
        let rows: Vec<usize> = (0..data.len()).collect();
        let (_, grad) = net.mse_and_gradient(&data, &rows).unwrap();
        let h = 1e-6;
        for k in 0..p.len() {
            let mut up = p.clone();
            up[k] += h;
            let mut dn = p.clone();
            dn[k] -= h;
            let mut n1 = net.clone();
            n1.set_flat_params(&up).unwrap();
            let mut n2 = net.clone();
            n2.set_flat_params(&dn).unwrap();
            let fd = (n1.mse(&data).unwrap() - n2.mse(&data).unwrap()) / (2.0 * h);
            let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-8);
            assert!(rel <= 1e-4, "param {k}: analytic {} vs fd {fd}", grad[k]);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_initialization() {
        let data = make_toy_gap(32, 1).unwrap();
        let specs = parse_layer_specs("1-8-1:tanh").unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 0.0,
            batch_size: 8,
            seed: 4,
        };
        let (net, log) = train_backbone(&data, &specs, &cfg).unwrap();
        assert_eq!(net, BackboneNetwork::init(specs, 4).unwrap());
        assert_eq!(log.epoch_mse.len(), 3);
    }

    #[test]
    fn divergence_is_reported() {
        let data = make_toy_gap(32, 1).unwrap();
        let specs = parse_layer_specs("1-8-1:relu").unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            learning_rate: 1e300,
            batch_size: 8,
            seed: 4,
        };
        let err = train_backbone(&data, &specs, &cfg).unwrap_err();
        assert!(matches!(err, Error::Training { epoch: 0, .. }), "{err}");
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        let data = make_toy_gap(64, 2).unwrap();
        let specs = parse_layer_specs("1-8-8-1:tanh").unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            learning_rate: 1e-2,
            batch_size: 16,
            seed: 3,
        };
        let (a, la) = train_backbone(&data, &specs, &cfg).unwrap();
        let (b, lb) = train_backbone(&data, &specs, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert!(la.epoch_mse.iter().all(|v| v.is_finite()));
        assert!(la.final_mse().unwrap() < la.epoch_mse[0]);
    }

    #[test]
    fn save_load_round_trip_is_byte_exact() {
        let net = BackboneNetwork::init(parse_layer_specs("2-5-3-1:relu").unwrap(), 17).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.json");
        let p2 = dir.path().join("b.json");
        save_network(&net, &p1).unwrap();
        let back = load_network(&p1).unwrap();
        assert_eq!(back, net);
        save_network(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let net = BackboneNetwork::init(parse_layer_specs("1-4-1:tanh").unwrap(), 1).unwrap();
        let text = network_to_string(&net, None).unwrap();
        let cut = &text[..text.len() / 2];
        assert!(matches!(network_from_str(cut), Err(Error::Persistence(_))));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let net = BackboneNetwork::init(parse_layer_specs("1-4-1:tanh").unwrap(), 1).unwrap();
        let text = network_to_string(&net, None)
            .unwrap()
            .replacen("\"version\": 1", "\"version\": 99", 1);
        let err = network_from_str(&text).unwrap_err().to_string();
        assert!(err.contains("99") && err.contains("expected 1"), "{err}");
    }

    proptest! {
        #[test]
        fn relu_nets_without_bias_are_positively_homogeneous(
            seed in any::<u64>(), x in prop::collection::vec(-3.0f64..3.0, 2), alpha in 0.01f64..10.0
        ) {
            let net = BackboneNetwork::init(parse_layer_specs("2-6-4-1:relu").unwrap(), seed).unwrap();
            let y = net.predict(&x).unwrap();
            let xs: Vec<f64> = x.iter().map(|v| v * alpha).collect();
            let ys = net.predict(&xs).unwrap();
            prop_assert!((ys - alpha * y).abs() <= 1e-12 * (1.0 + (alpha * y).abs()));
        }
    }
}
