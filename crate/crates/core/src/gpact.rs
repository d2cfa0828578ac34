//! Per-neuron one-dimensional GPs on first-layer pre-activations.
//!
//! Each neuron `d` of the first hidden layer gets a GP whose prior mean is the
//! neuron's own activation `a¹` and whose covariance is an RBF kernel. The GP
//! is conditioned on its own activations at a handful of inducing inputs, so
//! the residuals `Y_d - m_d(X_d)` are identically zero: the posterior mean is
//! the activation itself and only the covariance carries information.
//!
//! Inducing inputs and kernel hyperparameters come from the empirical
//! procedure: min/max plus empirical-CDF quantiles for the inducing set, the
//! 0.25-quantile of pairwise inducing distances for the lengthscale, and
//! `max(1, Var(activations))` for the output scale.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Activation, BackboneNetwork};
use crate::calibrate::Calibration;
use crate::dataio::{shuffled_indices, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, CholeskyFactor, Matrix};
use crate::par::{self, Execution};
use crate::persist;
use crate::propagate::CovarianceMode;

pub const DEFAULT_NOISE: f64 = 1e-6;
pub const DEFAULT_INDUCING: usize = 32;
pub const DEFAULT_SUBSAMPLE: usize = 2048;
pub const LENGTHSCALE_QUANTILE: f64 = 0.25;
/// Variances down to this value are rounding and get clamped to zero; anything
/// more negative is reported as an error.
pub const NEGATIVE_VARIANCE_TOLERANCE: f64 = 1e-10;
pub const GAPA_FILE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbfParams {
    pub lengthscale: f64,
    pub outputscale: f64,
    pub noise: f64,
}

impl RbfParams {
    pub fn new(lengthscale: f64, outputscale: f64, noise: f64) -> Result<Self> {
        let p = Self {
            lengthscale,
            outputscale,
            noise,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lengthscale > 0.0
            && self.lengthscale.is_finite()
            && self.outputscale > 0.0
            && self.outputscale.is_finite()
            && self.noise >= 0.0
            && self.noise.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid RBF parameters {self:?}")))
        }
    }

    #[inline]
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let r = (x - y) / self.lengthscale;
        self.outputscale * (-0.5 * r * r).exp()
    }
}

/// `σ_f² exp(-(x - x')² / (2ℓ²))`.
pub fn rbf_kernel(params: &RbfParams, x: f64, x_prime: f64) -> f64 {
    params.eval(x, x_prime)
}

/// Empirical-CDF inducing inputs: the sorted minimum and maximum plus, for
/// `m = 1..=M-2`, the order statistic whose CDF value `i/N` is nearest to
/// `(m+1)/(M-1)` (ties to the smaller index). Duplicates are dropped, so the
/// result can hold fewer than `M` points.
pub fn select_inducing(values: &[f64], m: usize) -> Result<Vec<f64>> {
    if m < 2 {
        return Err(Error::Config(format!("need at least 2 inducing points, got {m}")));
    }
    if values.is_empty() {
        return Err(Error::Config("cannot select inducing points from no values".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pre-activations".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();

    let mut picked = Vec::with_capacity(m);
    picked.push(sorted[0]);
    for k in 1..=m - 2 {
        let p = (k + 1) as f64 / (m - 1) as f64;
        // CDF of sorted[i] is (i+1)/N; first minimum wins ties.
        let mut best = 0;
        let mut best_gap = f64::INFINITY;
        for i in 0..n {
            let gap = ((i + 1) as f64 / n as f64 - p).abs();
            if gap < best_gap {
                best_gap = gap;
                best = i;
            }
        }
        picked.push(sorted[best]);
    }
    picked.push(sorted[n - 1]);
    picked.dedup();
    Ok(picked)
}

/// Quantile of a sorted slice with linear interpolation between order
/// statistics (position `q·(n-1)`).
pub fn quantile_linear(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn population_variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Lengthscale from the 0.25-quantile of distinct-pair distances among the
/// inducing inputs (1 when there are none or all are zero); output scale
/// `max(1, Var(train_activations))`.
pub fn fit_empirical_kernel(inducing: &[f64], train_activations: &[f64], noise: f64) -> Result<RbfParams> {
    let mut dists = Vec::with_capacity(inducing.len() * inducing.len().saturating_sub(1) / 2);
    for i in 0..inducing.len() {
        for j in i + 1..inducing.len() {
            dists.push((inducing[i] - inducing[j]).abs());
        }
    }
    dists.sort_by(f64::total_cmp);
    let lengthscale = if dists.is_empty() {
        1.0
    } else {
        let q = quantile_linear(&dists, LENGTHSCALE_QUANTILE);
        if q > 0.0 {
            q
        } else {
            1.0
        }
    };
    let outputscale = population_variance(train_activations).max(1.0);
    RbfParams::new(lengthscale, outputscale, noise)
}

/// Rejects variances below [`NEGATIVE_VARIANCE_TOLERANCE`], clamps the rest to
/// be non-negative.
pub fn clamp_variance(v: f64) -> Result<f64> {
    if v.is_nan() || v < -NEGATIVE_VARIANCE_TOLERANCE {
        return Err(Error::Numerical(format!(
            "GP variance {v:e} is below the tolerance -{NEGATIVE_VARIANCE_TOLERANCE:e}"
        )));
    }
    Ok(v.max(0.0))
}

/// Intermediate quantities of the variational predictive variance at one
/// input, kept for gradient computations.
#[derive(Clone, Debug)]
pub struct VarianceTerms {
    /// `k(Z, x)`.
    pub cross: Vec<f64>,
    /// `K⁻¹ k(Z, x)`.
    pub alpha: Vec<f64>,
    /// `S K⁻¹ k(Z, x)` (zeros without a variational factor).
    pub s_alpha: Vec<f64>,
    /// Unclamped variance.
    pub raw: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuronGP {
    inducing: Vec<f64>,
    kernel: RbfParams,
    gram_factor: CholeskyFactor,
    activation: Activation,
    variational_factor: Option<Matrix>,
}

impl NeuronGP {
    /// Conditions a GP on `inducing` (sorted, strictly increasing after
    /// deduplication) and factors `K(Z, Z) + σ_n² I`.
    pub fn new(inducing: Vec<f64>, kernel: RbfParams, activation: Activation) -> Result<Self> {
        kernel.validate()?;
        if inducing.is_empty() {
            return Err(Error::Config("a neuron GP needs at least one inducing input".into()));
        }
        if inducing.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("inducing inputs must be strictly increasing".into()));
        }
        let gram_factor = cholesky(&gram_matrix(&inducing, &kernel)?, &[])?;
        Ok(Self {
            inducing,
            kernel,
            gram_factor,
            activation,
            variational_factor: None,
        })
    }

    /// Same inducing inputs and variational factor, new hyperparameters.
    pub fn with_kernel(&self, kernel: RbfParams) -> Result<Self> {
        let mut next = Self::new(self.inducing.clone(), kernel, self.activation)?;
        next.variational_factor = self.variational_factor.clone();
        Ok(next)
    }

    pub fn inducing(&self) -> &[f64] {
        &self.inducing
    }

    pub fn kernel(&self) -> &RbfParams {
        &self.kernel
    }

    pub fn gram_factor(&self) -> &CholeskyFactor {
        &self.gram_factor
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn n_inducing(&self) -> usize {
        self.inducing.len()
    }

    pub fn variational_factor(&self) -> Option<&Matrix> {
        self.variational_factor.as_ref()
    }

    /// Installs (or removes) `L_S`, the lower-triangular factor of the
    /// variational covariance `S = L_S L_Sᵀ`.
    pub fn set_variational_factor(&mut self, factor: Option<Matrix>) -> Result<()> {
        if let Some(l) = &factor {
            let m = self.n_inducing();
            if l.rows() != m || l.cols() != m {
                return Err(Error::Shape(format!(
                    "variational factor is {}x{}, expected {m}x{m}",
                    l.rows(),
                    l.cols()
                )));
            }
            if (0..m).any(|i| (i + 1..m).any(|j| l.get(i, j) != 0.0)) {
                return Err(Error::Shape("variational factor must be lower-triangular".into()));
            }
        }
        self.variational_factor = factor;
        Ok(())
    }

    /// Sets `S` to the jittered Gram matrix, which makes the variational
    /// predictive variance equal the prior variance everywhere.
    pub fn init_variational_at_prior(&mut self) {
        self.variational_factor = Some(self.gram_factor.lower().clone());
    }

    pub fn cross_covariance(&self, x: f64) -> Vec<f64> {
        self.inducing.iter().map(|&z| self.kernel.eval(x, z)).collect()
    }

    /// The activation itself: the posterior correction vanishes because the
    /// GP targets equal its prior mean.
    #[inline]
    pub fn posterior_mean(&self, x: f64) -> f64 {
        self.activation.eval(x)
    }

    /// `k(x,x) - k(x,Z) [K + σ_n² I]⁻¹ k(Z,x)`.
    pub fn posterior_var(&self, x: f64) -> Result<f64> {
        let mut v = self.cross_covariance(x);
        self.gram_factor.forward_substitute(&mut v);
        let q: f64 = v.iter().map(|t| t * t).sum();
        clamp_variance(self.kernel.outputscale - q)
    }

    pub fn variance_terms(&self, x: f64) -> VarianceTerms {
        let cross = self.cross_covariance(x);
        let mut alpha = cross.clone();
        self.gram_factor.forward_substitute(&mut alpha);
        let q: f64 = alpha.iter().map(|t| t * t).sum();
        self.gram_factor.back_substitute(&mut alpha);
        let m = self.n_inducing();
        let mut s_alpha = vec![0.0; m];
        let mut extra = 0.0;
        if let Some(l) = &self.variational_factor {
            // u = L_Sᵀ α, S α = L_S u, αᵀ S α = |u|².
            let u: Vec<f64> = (0..m).map(|j| (j..m).map(|i| l.get(i, j) * alpha[i]).sum()).collect();
            extra = u.iter().map(|t| t * t).sum();
            for (i, s) in s_alpha.iter_mut().enumerate() {
                *s = (0..=i).map(|j| l.get(i, j) * u[j]).sum();
            }
        }
        VarianceTerms {
            cross,
            alpha,
            s_alpha,
            raw: self.kernel.outputscale - q + extra,
        }
    }

    /// `k(x,x) - kᵀK⁻¹k + kᵀK⁻¹ S K⁻¹k` with `S = L_S L_Sᵀ`.
    pub fn variational_var(&self, x: f64) -> Result<f64> {
        if self.variational_factor.is_none() {
            return Err(Error::Config("neuron has no variational factor".into()));
        }
        clamp_variance(self.variance_terms(x).raw)
    }
}

/// `K(Z, Z) + σ_n² I` (before any jitter).
pub fn gram_matrix(inducing: &[f64], kernel: &RbfParams) -> Result<Matrix> {
    let m = inducing.len();
    Matrix::from_fn(m, m, |i, j| {
        let k = kernel.eval(inducing[i], inducing[j]);
        if i == j {
            k + kernel.noise
        } else {
            k
        }
    })
}

/// Which per-neuron variance feeds the propagation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarianceSource {
    Posterior,
    Variational,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapaConfig {
    pub inducing: usize,
    pub subsample: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for GapaConfig {
    fn default() -> Self {
        Self {
            inducing: DEFAULT_INDUCING,
            subsample: DEFAULT_SUBSAMPLE,
            noise: DEFAULT_NOISE,
            seed: 0,
        }
    }
}

/// Independent GPs on every neuron of the first hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GapaLayerState {
    pub layer_index: usize,
    pub neurons: Vec<NeuronGP>,
}

impl GapaLayerState {
    pub fn new(neurons: Vec<NeuronGP>) -> Self {
        Self {
            layer_index: 1,
            neurons,
        }
    }

    pub fn width(&self) -> usize {
        self.neurons.len()
    }

    pub fn has_variational(&self) -> bool {
        !self.neurons.is_empty() && self.neurons.iter().all(|n| n.variational_factor.is_some())
    }

    /// Per-neuron variances at first-layer pre-activations `pre`.
    pub fn variances(&self, pre: &[f64], source: VarianceSource) -> Result<Vec<f64>> {
        if pre.len() != self.width() {
            return Err(Error::Shape(format!(
                "{} pre-activations for a layer of {} GPs",
                pre.len(),
                self.width()
            )));
        }
        self.neurons
            .iter()
            .zip(pre)
            .map(|(n, &x)| match source {
                VarianceSource::Posterior => n.posterior_var(x),
                VarianceSource::Variational => n.variational_var(x),
            })
            .collect()
    }
}

/// Rows used to fit the GPs: all of them, or a seeded subsample.
pub fn subsample_rows(n: usize, subsample: usize, seed: u64) -> Vec<usize> {
    if subsample >= n {
        (0..n).collect()
    } else {
        let mut idx = shuffled_indices(n, seed);
        idx.truncate(subsample);
        idx
    }
}

/// Fits one GP per first-layer neuron from the (standardized) training data.
pub fn fit_gapa_layer(
    net: &BackboneNetwork,
    train: &Dataset,
    config: &GapaConfig,
    exec: Execution,
) -> Result<GapaLayerState> {
    if config.inducing < 2 {
        return Err(Error::Config(format!(
            "need at least 2 inducing points, got {}",
            config.inducing
        )));
    }
    if train.is_empty() || config.subsample == 0 {
        return Err(Error::Config("GAPA fitting needs training rows".into()));
    }
    if config.subsample > train.len() {
        return Err(Error::Config(format!(
            "subsample of {} exceeds the {} training rows",
            config.subsample,
            train.len()
        )));
    }
    if !(config.noise >= 0.0 && config.noise.is_finite()) {
        return Err(Error::Config(format!("invalid noise variance {}", config.noise)));
    }
    let rows = subsample_rows(train.len(), config.subsample, config.seed);
    let pre: Vec<Vec<f64>> = rows
        .iter()
        .map(|&i| net.first_pre_activations(train.row(i)))
        .collect::<Result<_>>()?;
    let activation = net.layers()[0].activation;

    let neurons = par::try_map_range(exec, net.first_width(), |d| {
        let values: Vec<f64> = pre.iter().map(|p| p[d]).collect();
        let inducing = select_inducing(&values, config.inducing)?;
        let acts: Vec<f64> = values.iter().map(|&v| activation.eval(v)).collect();
        let kernel = fit_empirical_kernel(&inducing, &acts, config.noise)?;
        NeuronGP::new(inducing, kernel, activation)
    })?;
    Ok(GapaLayerState::new(neurons))
}

/// Everything stored in a GAPA state file.
#[derive(Clone, Debug, PartialEq)]
pub struct GapaDocument {
    pub layer: GapaLayerState,
    pub calibration: Calibration,
    pub mode: CovarianceMode,
    pub config_digest: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct NeuronRecord {
    activation: Activation,
    inducing: Vec<f64>,
    lengthscale: f64,
    outputscale: f64,
    noise: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    variational_factor: Option<Vec<Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct GapaFile {
    version: u32,
    layer_index: usize,
    mode: CovarianceMode,
    calibration: Calibration,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_digest: Option<String>,
    neurons: Vec<NeuronRecord>,
}

pub fn gapa_to_string(doc: &GapaDocument) -> Result<String> {
    let neurons = doc
        .layer
        .neurons
        .iter()
        .map(|n| NeuronRecord {
            activation: n.activation,
            inducing: n.inducing.clone(),
            lengthscale: n.kernel.lengthscale,
            outputscale: n.kernel.outputscale,
            noise: n.kernel.noise,
            variational_factor: n.variational_factor.as_ref().map(Matrix::to_rows),
        })
        .collect();
    persist::to_string(&GapaFile {
        version: GAPA_FILE_VERSION,
        layer_index: doc.layer.layer_index,
        mode: doc.mode,
        calibration: doc.calibration,
        config_digest: doc.config_digest.clone(),
        neurons,
    })
}

pub fn gapa_from_str(text: &str) -> Result<GapaDocument> {
    let file: GapaFile = persist::from_str(text, "GAPA state", GAPA_FILE_VERSION)?;
    if file.layer_index != 1 {
        return Err(Error::Persistence(format!(
            "GP layers are only supported on layer 1, file says {}",
            file.layer_index
        )));
    }
    let bad = |e: Error| Error::Persistence(format!("inconsistent GAPA state file: {e}"));
    let neurons = file
        .neurons
        .into_iter()
        .map(|r| {
            let kernel = RbfParams::new(r.lengthscale, r.outputscale, r.noise)?;
            let mut n = NeuronGP::new(r.inducing, kernel, r.activation)?;
            if let Some(rows) = r.variational_factor {
                n.set_variational_factor(Some(Matrix::from_rows(&rows)?))?;
            }
            Ok(n)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(bad)?;
    file.calibration.validate().map_err(bad)?;
    Ok(GapaDocument {
        layer: GapaLayerState::new(neurons),
        calibration: file.calibration,
        mode: file.mode,
        config_digest: file.config_digest,
    })
}

pub fn save_gapa(doc: &GapaDocument, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, gapa_to_string(doc)?)?;
    Ok(())
}

pub fn load_gapa(path: impl AsRef<Path>) -> Result<GapaDocument> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Persistence(format!("cannot read {}: {e}", path.display())))?;
    gapa_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::FreeCalibration;
    use proptest::prelude::*;

    fn one_point(noise: f64) -> NeuronGP {
        NeuronGP::new(vec![0.0], RbfParams::new(1.0, 1.0, noise).unwrap(), Activation::Tanh).unwrap()
    }

    #[test]
    fn inducing_min_max_only() {
        assert_eq!(select_inducing(&[3.0, 1.0, 5.0, 2.0, 4.0], 2).unwrap(), vec![1.0, 5.0]);
    }

    #[test]
    fn inducing_nearest_cdf() {
        let v: Vec<f64> = (0..=10).map(f64::from).collect();
        assert_eq!(select_inducing(&v, 4).unwrap(), vec![0.0, 6.0, 10.0]);
    }

    #[test]
    fn inducing_collapses_constant_values() {
        assert_eq!(select_inducing(&[2.5; 7], 5).unwrap(), vec![2.5]);
    }

    #[test]
    fn inducing_needs_two() {
        assert!(matches!(select_inducing(&[1.0], 1), Err(Error::Config(_))));
    }

    #[test]
    fn empirical_kernel_examples() {
        let p = fit_empirical_kernel(&[0.0, 2.0], &[0.3; 5], DEFAULT_NOISE).unwrap();
        assert_eq!(p.lengthscale, 2.0);
        assert_eq!(p.outputscale, 1.0);
        assert_eq!(p.noise, DEFAULT_NOISE);
        let p = fit_empirical_kernel(&[0.0, 1.0, 2.0], &[0.0], 0.0).unwrap();
        assert_eq!(p.lengthscale, 1.0);
        // {-2, 2} has population variance 4.
        let p = fit_empirical_kernel(&[0.0, 1.0], &[-2.0, 2.0, -2.0, 2.0], 0.0).unwrap();
        assert_eq!(p.outputscale, 4.0);
    }

    #[test]
    fn lengthscale_falls_back_to_one() {
        assert_eq!(fit_empirical_kernel(&[1.0], &[0.0], 0.0).unwrap().lengthscale, 1.0);
    }

    #[test]
    fn kernel_values() {
        let p = RbfParams::new(1.0, 2.0, 0.0).unwrap();
        assert_eq!(rbf_kernel(&p, 0.7, 0.7), 2.0);
        assert!((rbf_kernel(&p, 0.0, 1.0) - 2.0 * (-0.5f64).exp()).abs() < 1e-15);
        assert!((rbf_kernel(&p, 0.0, 1.0) - 1.21306).abs() < 1e-5);
        assert!(rbf_kernel(&p, 0.0, 100.0) < 1e-300);
    }

    #[test]
    fn posterior_mean_is_activation() {
        let relu = NeuronGP::new(vec![0.0, 1.0], RbfParams::new(1.0, 1.0, 0.0).unwrap(), Activation::Relu).unwrap();
        assert_eq!(relu.posterior_mean(-2.0), 0.0);
        assert_eq!(one_point(0.0).posterior_mean(0.0), 0.0);
    }

    #[test]
    fn posterior_var_one_point() {
        let v = one_point(0.0).posterior_var(1.0).unwrap();
        assert!((v - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        assert!((v - 0.63212).abs() < 1e-5);
    }

    #[test]
    fn posterior_var_interpolates_and_reverts() {
        let n = NeuronGP::new(
            vec![-1.0, 0.0, 2.0],
            RbfParams::new(0.8, 3.0, 0.0).unwrap(),
            Activation::Tanh,
        )
        .unwrap();
        for &z in n.inducing() {
            assert!(n.posterior_var(z).unwrap() <= 1e-9 * 3.0);
        }
        assert!((n.posterior_var(500.0).unwrap() - 3.0).abs() <= 1e-6);
    }

    #[test]
    fn variational_one_point() {
        let mut n = one_point(0.0);
        n.set_variational_factor(Some(Matrix::from_rows(&[vec![0.5]]).unwrap()))
            .unwrap();
        let e = (-1.0f64).exp();
        let v = n.variational_var(1.0).unwrap();
        assert!((v - (1.0 - e + 0.25 * e)).abs() < 1e-15);
        assert!((v - 0.72410).abs() < 1e-5);
    }

    #[test]
    fn variational_needs_factor() {
        assert!(one_point(0.0).variational_var(0.0).is_err());
    }

    #[test]
    fn variational_factor_shape_checked() {
        let mut n = one_point(0.0);
        assert!(n.set_variational_factor(Some(Matrix::identity(2))).is_err());
        let mut n2 = NeuronGP::new(vec![0.0, 1.0], RbfParams::new(1.0, 1.0, 0.0).unwrap(), Activation::Tanh).unwrap();
        assert!(n2
            .set_variational_factor(Some(Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap()))
            .is_err());
        n.set_variational_factor(None).unwrap();
    }

    #[test]
    fn large_negative_variance_is_an_error() {
        assert!(clamp_variance(-1e-11).unwrap() == 0.0);
        assert!(matches!(clamp_variance(-1e-6), Err(Error::Numerical(_))));
    }

    fn random_neuron(zs: &[f64], ls: f64, sf: f64, noise: f64) -> Option<NeuronGP> {
        let mut z = zs.to_vec();
        z.sort_by(f64::total_cmp);
        z.dedup();
        NeuronGP::new(z, RbfParams::new(ls, sf, noise).unwrap(), Activation::Tanh).ok()
    }

    /// Direct dense-inverse evaluation by Gauss–Jordan elimination.
    fn dense_posterior_var(n: &NeuronGP, x: f64) -> f64 {
        let m = n.n_inducing();
        let mut a = n.gram_factor().reconstruct().to_rows();
        let mut inv: Vec<Vec<f64>> = (0..m).map(|i| (0..m).map(|j| f64::from(i == j)).collect()).collect();
        for c in 0..m {
            let p = (c..m).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, p);
            inv.swap(c, p);
            let d = a[c][c];
            for j in 0..m {
                a[c][j] /= d;
                inv[c][j] /= d;
            }
            for r in 0..m {
                if r != c {
                    let f = a[r][c];
                    for j in 0..m {
                        a[r][j] -= f * a[c][j];
                        inv[r][j] -= f * inv[c][j];
                    }
                }
            }
        }
        let k = n.cross_covariance(x);
        let mut q = 0.0;
        for i in 0..m {
            for j in 0..m {
                q += k[i] * inv[i][j] * k[j];
            }
        }
        n.kernel().outputscale - q
    }

    proptest! {
        #[test]
        fn posterior_matches_dense_inverse(
            zs in prop::collection::vec(-3.0f64..3.0, 1..=5), ls in 0.5f64..3.0, sf in 1.0f64..4.0,
            noise in 1e-2f64..1.0, x in -5.0f64..5.0
        ) {
            if let Some(n) = random_neuron(&zs, ls, sf, noise) {
                let got = n.posterior_var(x).unwrap();
                let want = dense_posterior_var(&n, x);
                prop_assert!((got - want).abs() <= 1e-8 * want.abs().max(1e-8 * sf), "{got} vs {want}");
            }
        }

        #[test]
        fn posterior_var_is_bounded(
            zs in prop::collection::vec(-3.0f64..3.0, 1..12), ls in 0.1f64..3.0, sf in 1.0f64..4.0, x in -10.0f64..10.0
        ) {
            if let Some(n) = random_neuron(&zs, ls, sf, DEFAULT_NOISE) {
                let v = n.posterior_var(x).unwrap();
                prop_assert!((0.0..=sf * (1.0 + 1e-8)).contains(&v));
            }
        }

        #[test]
        fn selected_inducing_is_sorted_subset(
            vals in prop::collection::vec(-100.0f64..100.0, 1..200), m in 2usize..40
        ) {
            let z = select_inducing(&vals, m).unwrap();
            prop_assert!(z.len() <= m);
            prop_assert!(z.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(z.iter().all(|v| vals.contains(v)));
            let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(z[0], min);
            prop_assert_eq!(*z.last().unwrap(), max);
        }
    }

    #[test]
    fn gapa_file_round_trip() {
        let mut a = NeuronGP::new(
            vec![-1.0, 0.5, 2.0],
            RbfParams::new(0.7, 1.3, 1e-6).unwrap(),
            Activation::Tanh,
        )
        .unwrap();
        a.init_variational_at_prior();
        let b = one_point(1e-6);
        let doc = GapaDocument {
            layer: GapaLayerState::new(vec![a, b]),
            calibration: Calibration::Free(FreeCalibration {
                theta1: 0.3,
                theta2: 1.7e-3,
            }),
            mode: CovarianceMode::Full,
            config_digest: Some("abc".into()),
        };
        let s1 = gapa_to_string(&doc).unwrap();
        let back = gapa_from_str(&s1).unwrap();
        assert_eq!(back, doc);
        assert_eq!(gapa_to_string(&back).unwrap(), s1);
        assert!(matches!(
            gapa_from_str(&s1[..s1.len() - 20]),
            Err(Error::Persistence(_))
        ));
        let wrong = s1.replacen("\"version\": 1", "\"version\": 2", 1);
        let e = gapa_from_str(&wrong).unwrap_err().to_string();
        assert!(e.contains("version 2") && e.contains("expected 1"), "{e}");
    }
}
