//! Deterministic variance propagation from the GP layer to the output.
//!
//! A Gaussian state (mean plus full or diagonal covariance) is pushed through
//! the remaining layers: linear layers map `Σ → W Σ Wᵀ`, activations use the
//! first-order (delta) rule `Σ → D Σ D` with `D = diag(g'(μ))`. Both rules
//! are linear in `Σ`, so the output variance is linear in the first-layer
//! variances; [`variance_sensitivities`] runs the adjoint of the pushes to get
//! that linear map directly.
//!
//! The mean path calls the same [`affine`] and activation functions as
//! [`BackboneNetwork::forward`], so GAPA means are bit-identical to the
//! backbone's predictions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{affine, Activation, BackboneNetwork};
use crate::calibrate::Calibration;
use crate::dataio::Standardizer;
use crate::error::{Error, Result};
use crate::gpact::{clamp_variance, GapaLayerState};
use crate::linalg::{dot, Matrix};
use crate::par::{self, pairwise_sum, Execution};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceMode {
    #[default]
    Full,
    Diag,
}

impl CovarianceMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" => Ok(CovarianceMode::Full),
            "diag" | "diagonal" => Ok(CovarianceMode::Diag),
            other => Err(Error::Config(format!("unknown covariance mode '{other}'"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CovarianceMode::Full => "full",
            CovarianceMode::Diag => "diag",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Covariance {
    Full(Matrix),
    Diag(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianState {
    pub mean: Vec<f64>,
    pub cov: Covariance,
}

impl GaussianState {
    /// Independent coordinates with the given variances.
    pub fn independent(mean: Vec<f64>, variances: Vec<f64>, mode: CovarianceMode) -> Result<Self> {
        if mean.len() != variances.len() {
            return Err(Error::Shape(format!(
                "{} means but {} variances",
                mean.len(),
                variances.len()
            )));
        }
        if variances.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Domain("initial variances must be non-negative".into()));
        }
        let cov = match mode {
            CovarianceMode::Full => Covariance::Full(Matrix::from_diag(&variances)?),
            CovarianceMode::Diag => Covariance::Diag(variances),
        };
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mode(&self) -> CovarianceMode {
        match self.cov {
            Covariance::Full(_) => CovarianceMode::Full,
            Covariance::Diag(_) => CovarianceMode::Diag,
        }
    }

    /// Marginal variances (the covariance diagonal).
    pub fn variances(&self) -> Vec<f64> {
        match &self.cov {
            Covariance::Full(m) => m.diag(),
            Covariance::Diag(v) => v.clone(),
        }
    }
}

/// `μ ← Wμ + b`; full mode `Σ ← WΣWᵀ`, diag mode `v_i ← Σ_j W_ij² v_j`.
pub fn linear_push(w: &Matrix, b: &[f64], s: &GaussianState) -> Result<GaussianState> {
    if w.cols() != s.dim() || b.len() != w.rows() {
        return Err(Error::Shape(format!(
            "{}x{} layer with {} biases applied to a state of dimension {}",
            w.rows(),
            w.cols(),
            b.len(),
            s.dim()
        )));
    }
    let mean = affine(w, b, &s.mean);
    let cov = match &s.cov {
        Covariance::Full(sigma) => {
            // Only the lower triangle is computed, so the result is exactly
            // symmetric.
            let t = crate::linalg::matmul(w, sigma)?;
            let n = w.rows();
            let mut out = Matrix::zeros(n, n);
            for i in 0..n {
                for j in 0..=i {
                    let v = dot(t.row(i), w.row(j));
                    out.set(i, j, v);
                    out.set(j, i, v);
                }
            }
            Covariance::Full(out)
        }
        Covariance::Diag(v) => Covariance::Diag(
            (0..w.rows())
                .map(|i| w.row(i).iter().zip(v).map(|(wij, vj)| wij * wij * vj).sum())
                .collect(),
        ),
    };
    Ok(GaussianState { mean, cov })
}

/// Delta rule: `μ ← g(μ)`, `Σ ← DΣD` with `D = diag(g'(μ))` evaluated at the
/// incoming mean.
pub fn delta_push(g: Activation, s: &GaussianState) -> GaussianState {
    let slopes: Vec<f64> = s.mean.iter().map(|&m| g.derivative(m)).collect();
    let mean = s.mean.iter().map(|&m| g.eval(m)).collect();
    let cov = match &s.cov {
        Covariance::Full(sigma) => {
            let n = sigma.rows();
            let mut out = sigma.clone();
            for i in 0..n {
                for j in 0..=i {
                    let v = slopes[i] * sigma.get(i, j) * slopes[j];
                    out.set(i, j, v);
                    out.set(j, i, v);
                }
            }
            Covariance::Full(out)
        }
        Covariance::Diag(v) => Covariance::Diag(v.iter().zip(&slopes).map(|(v, d)| d * d * v).collect()),
    };
    GaussianState { mean, cov }
}

/// Pushes a first-hidden-layer state through layers `1..L` of `net`.
pub fn propagate_tail(net: &BackboneNetwork, state: GaussianState) -> Result<GaussianState> {
    let mut s = state;
    for l in 1..net.n_layers() {
        s = linear_push(&net.weights()[l], &net.biases()[l], &s)?;
        s = delta_push(net.layers()[l].activation, &s);
    }
    Ok(s)
}

/// First-layer GP state at standardized input `x`: pre-activations, the
/// activation means, and the per-neuron variances (before any scaling).
#[derive(Clone, Debug, PartialEq)]
pub struct FirstLayerMoments {
    pub pre_activations: Vec<f64>,
    pub mean: Vec<f64>,
    pub variances: Vec<f64>,
}

pub fn first_layer_moments(
    net: &BackboneNetwork,
    layer: &GapaLayerState,
    calibration: &Calibration,
    x: &[f64],
) -> Result<FirstLayerMoments> {
    let pre = net.first_pre_activations(x)?;
    if layer.width() != pre.len() {
        return Err(Error::Shape(format!(
            "GAPA layer has {} GPs but the network's first layer has {} neurons",
            layer.width(),
            pre.len()
        )));
    }
    let variances = layer.variances(&pre, calibration.variance_source())?;
    let mean = layer
        .neurons
        .iter()
        .zip(&pre)
        .map(|(n, &z)| n.posterior_mean(z))
        .collect();
    Ok(FirstLayerMoments {
        pre_activations: pre,
        mean,
        variances,
    })
}

/// Output mean and (unclamped) variance for given first-layer moments.
pub fn propagate_first_layer(
    net: &BackboneNetwork,
    mean: &[f64],
    variances: &[f64],
    mode: CovarianceMode,
) -> Result<(f64, f64)> {
    let state = GaussianState::independent(mean.to_vec(), variances.to_vec(), mode)?;
    let out = propagate_tail(net, state)?;
    if out.dim() != 1 {
        return Err(Error::Shape("variance propagation needs a scalar output".into()));
    }
    Ok((out.mean[0], out.variances()[0]))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub mean: f64,
    pub variance: f64,
    pub standardized_mean: f64,
    pub standardized_variance: f64,
}

impl PredictiveDistribution {
    /// Fills the original-unit fields through `scaling` (identity if absent).
    pub fn from_standardized(mean: f64, variance: f64, scaling: Option<&Standardizer>) -> Self {
        let (m, v) = match scaling {
            Some(s) => s.invert_target(mean, variance),
            None => (mean, variance),
        };
        Self {
            mean: m,
            variance: v,
            standardized_mean: mean,
            standardized_variance: variance,
        }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Full GAPA prediction at standardized input `x`: GP variances on the first
/// layer, propagated to the output, then calibrated. Original-unit fields equal
/// the standardized ones; see [`PredictiveDistribution::from_standardized`].
pub fn gapa_forward(
    net: &BackboneNetwork,
    layer: &GapaLayerState,
    calibration: &Calibration,
    x: &[f64],
    mode: CovarianceMode,
) -> Result<PredictiveDistribution> {
    let m = first_layer_moments(net, layer, calibration, x)?;
    let (mean, var) = propagate_first_layer(net, &m.mean, &m.variances, mode)?;
    let var = calibration.apply(clamp_variance(var)?);
    Ok(PredictiveDistribution::from_standardized(mean, var, None))
}

/// `∂V_out/∂v_d`: sensitivity of the propagated output variance to each
/// first-layer variance at standardized input `x`, from the adjoint of the
/// push rules (run backwards from `V̄ = 1`).
pub fn variance_sensitivities(net: &BackboneNetwork, x: &[f64], mode: CovarianceMode) -> Result<Vec<f64>> {
    let trace = net.forward(x)?;
    if net.output_dim() != 1 {
        return Err(Error::Shape("variance propagation needs a scalar output".into()));
    }
    match mode {
        CovarianceMode::Full => {
            let mut adj = Matrix::identity(1);
            for l in (1..net.n_layers()).rev() {
                // delta_push adjoint: Σ̄ ← D Σ̄ D.
                let act = net.layers()[l].activation;
                let d: Vec<f64> = trace.pre_activations[l].iter().map(|&z| act.derivative(z)).collect();
                let n = adj.rows();
                for i in 0..n {
                    for j in 0..n {
                        let v = d[i] * adj.get(i, j) * d[j];
                        adj.set(i, j, v);
                    }
                }
                // linear_push adjoint: Σ̄ ← Wᵀ Σ̄ W.
                let w = &net.weights()[l];
                let t = crate::linalg::matmul(&adj, w)?;
                adj = crate::linalg::matmul(&w.transpose(), &t)?;
            }
            Ok(adj.diag())
        }
        CovarianceMode::Diag => {
            let mut adj = vec![1.0];
            for l in (1..net.n_layers()).rev() {
                let act = net.layers()[l].activation;
                for (a, &z) in adj.iter_mut().zip(&trace.pre_activations[l]) {
                    let d = act.derivative(z);
                    *a *= d * d;
                }
                let w = &net.weights()[l];
                adj = (0..w.cols())
                    .map(|j| (0..w.rows()).map(|i| w.get(i, j) * w.get(i, j) * adj[i]).sum())
                    .collect();
            }
            Ok(adj)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub variance_estimate: f64,
    pub standard_error: f64,
}

const MC_CHUNK: usize = 4096;

/// Monte-Carlo reference for the propagated variance: samples first-layer
/// activations from `N(mean, diag(variances))` and pushes each sample through
/// the remaining layers exactly. Samples are drawn in fixed chunks, chunk `c`
/// from ChaCha8 stream `c`, so the estimate does not depend on scheduling.
pub fn mc_first_layer(
    net: &BackboneNetwork,
    mean: &[f64],
    variances: &[f64],
    n_samples: usize,
    seed: u64,
    exec: Execution,
) -> Result<McEstimate> {
    if n_samples < 2 {
        return Err(Error::Config(format!(
            "Monte-Carlo oracle needs at least 2 samples, got {n_samples}"
        )));
    }
    if mean.len() != variances.len() || mean.len() != net.first_width() {
        return Err(Error::Shape("first-layer moments do not match the network".into()));
    }
    let sd: Vec<f64> = variances.iter().map(|v| v.max(0.0).sqrt()).collect();
    let n_chunks = n_samples.div_ceil(MC_CHUNK);
    let chunks: Vec<Vec<f64>> = par::map_range(exec, n_chunks, |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        let len = MC_CHUNK.min(n_samples - c * MC_CHUNK);
        let mut out = Vec::with_capacity(len);
        let mut h = vec![0.0; mean.len()];
        for _ in 0..len {
            for ((hv, m), s) in h.iter_mut().zip(mean).zip(&sd) {
                let e: f64 = StandardNormal.sample(&mut rng);
                *hv = m + s * e;
            }
            let mut cur = h.clone();
            for l in 1..net.n_layers() {
                let act = net.layers()[l].activation;
                cur = affine(&net.weights()[l], &net.biases()[l], &cur)
                    .into_iter()
                    .map(|z| act.eval(z))
                    .collect();
            }
            out.push(cur[0]);
        }
        out
    });
    let ys: Vec<f64> = chunks.concat();
    Ok(variance_with_jackknife(&ys))
}

/// Unbiased sample variance and its jackknife standard error.
pub fn variance_with_jackknife(ys: &[f64]) -> McEstimate {
    let n = ys.len() as f64;
    let mean = pairwise_sum(ys) / n;
    let sq: Vec<f64> = ys.iter().map(|y| (y - mean) * (y - mean)).collect();
    let s2 = pairwise_sum(&sq);
    let variance_estimate = s2 / (n - 1.0);
    if ys.len() < 3 {
        return McEstimate {
            variance_estimate,
            standard_error: f64::INFINITY,
        };
    }
    // Leave-one-out variance: (S2 - n/(n-1)·d_i²) / (n-2).
    let loo: Vec<f64> = sq.iter().map(|d2| (s2 - n / (n - 1.0) * d2) / (n - 2.0)).collect();
    let loo_mean = pairwise_sum(&loo) / n;
    let dev: Vec<f64> = loo.iter().map(|v| (v - loo_mean) * (v - loo_mean)).collect();
    let standard_error = ((n - 1.0) / n * pairwise_sum(&dev)).sqrt();
    McEstimate {
        variance_estimate,
        standard_error,
    }
}

/// [`mc_first_layer`] at standardized input `x`, with the first-layer
/// variances taken from the GAPA layer (no calibration scaling).
pub fn mc_oracle(
    net: &BackboneNetwork,
    layer: &GapaLayerState,
    calibration: &Calibration,
    x: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    let m = first_layer_moments(net, layer, calibration, x)?;
    mc_first_layer(net, &m.mean, &m.variances, n_samples, seed, Execution::default())
}
