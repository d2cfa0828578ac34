//! Output-variance calibration.
//!
//! Two routes on top of the propagated GP variances:
//!
//! * **Free**: `Var = θ1·v + θ2`, with the two positive parameters fitted by
//!   NLL minimization on a held-out split.
//! * **Variational**: each neuron's GP gets a free covariance `S = L_S L_Sᵀ`
//!   at its inducing inputs, and `L_S` plus the log kernel hyperparameters are
//!   trained by mini-batch Adam on the NLL of the propagated output.
//!
//! The propagated output variance is linear in the first-layer variances,
//! with coefficients that depend only on the (frozen) backbone means. Those
//! coefficients come from the adjoint pass in
//! [`variance_sensitivities`](crate::propagate::variance_sensitivities) and are
//! cached per training row; the remaining chain rule through the GP variance
//! is written out by hand.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{epoch_seed, Adam, BackboneNetwork};
use crate::dataio::{shuffled_indices, Dataset};
use crate::error::{Error, Result};
use crate::gpact::{clamp_variance, GapaLayerState, NeuronGP, RbfParams, VarianceSource};
use crate::linalg::Matrix;
use crate::model::GapaModel;
use crate::par::{self, pairwise_sum, Execution};
use crate::propagate::{gapa_forward, variance_sensitivities, CovarianceMode, PredictiveDistribution};

/// Smallest predictive variance (standardized units) used anywhere.
pub const VARIANCE_FLOOR: f64 = 1e-8;
pub const FREE_GRID_SIZE: usize = 20;
pub const FREE_GRID_MIN: f64 = 1e-4;
pub const FREE_GRID_MAX: f64 = 1e4;
pub const FREE_MAX_STEPS: usize = 5000;
pub const FREE_GRAD_TOL: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreeCalibration {
    pub theta1: f64,
    pub theta2: f64,
}

impl FreeCalibration {
    /// `max(θ1·v + θ2, floor)`.
    pub fn apply(&self, v: f64) -> f64 {
        (self.theta1 * v + self.theta2).max(VARIANCE_FLOOR)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Calibration {
    /// Raw propagated posterior variances.
    #[default]
    Uncalibrated,
    Free(FreeCalibration),
    /// Variational variances from trained `L_S` factors.
    Variational,
}

impl Calibration {
    pub fn variance_source(&self) -> VarianceSource {
        match self {
            Calibration::Variational => VarianceSource::Variational,
            _ => VarianceSource::Posterior,
        }
    }

    /// Final output variance from the propagated one.
    pub fn apply(&self, v: f64) -> f64 {
        match self {
            Calibration::Uncalibrated => v,
            Calibration::Free(f) => f.apply(v),
            Calibration::Variational => v.max(VARIANCE_FLOOR),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Calibration::Free(f) = self {
            let ok = |t: f64| t.is_finite() && t >= 0.0;
            if !ok(f.theta1) || !ok(f.theta2) {
                return Err(Error::Config(format!(
                    "calibration parameters must be finite and non-negative, got {f:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            Calibration::Uncalibrated => "uncalibrated",
            Calibration::Free(_) => "free",
            Calibration::Variational => "variational",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NllSummary {
    pub sum: f64,
    pub mean: f64,
    pub n_points: usize,
}

#[inline]
fn point_nll(mu: f64, var: f64, y: f64) -> f64 {
    let r = y - mu;
    0.5 * (LN_2PI + var.ln()) + r * r / (2.0 * var)
}

/// Gaussian NLL `Σ ½log(2πσ²) + (y-μ)²/(2σ²)` of `preds` in original units.
/// Predictions whose standardized variance is below [`VARIANCE_FLOOR`] are
/// rejected.
pub fn nll(preds: &[PredictiveDistribution], targets: &[f64]) -> Result<NllSummary> {
    if preds.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Config("NLL of an empty set".into()));
    }
    let terms: Vec<f64> = preds
        .iter()
        .zip(targets)
        .map(|(p, &y)| {
            if !(p.standardized_variance >= VARIANCE_FLOOR && p.variance > 0.0 && p.variance.is_finite()) {
                return Err(Error::Domain(format!(
                    "predictive variance {:e} is below the floor {VARIANCE_FLOOR:e}",
                    p.standardized_variance
                )));
            }
            Ok(point_nll(p.mean, p.variance, y))
        })
        .collect::<Result<_>>()?;
    let sum = pairwise_sum(&terms);
    Ok(NllSummary {
        sum,
        mean: sum / terms.len() as f64,
        n_points: terms.len(),
    })
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Mean NLL of residuals `r` under variances `max(θ1·v + θ2, floor)`.
pub fn free_objective(theta: FreeCalibration, v: &[f64], r: &[f64]) -> f64 {
    let terms: Vec<f64> = v
        .iter()
        .zip(r)
        .map(|(&v, &r)| point_nll(0.0, theta.apply(v), r))
        .collect();
    pairwise_sum(&terms) / v.len() as f64
}

/// Objective and gradient with respect to the softplus pre-images `φ`.
fn free_objective_phi(phi: [f64; 2], v: &[f64], r: &[f64]) -> (f64, [f64; 2]) {
    let theta = FreeCalibration {
        theta1: softplus(phi[0]),
        theta2: softplus(phi[1]),
    };
    let n = v.len() as f64;
    let mut g1 = Vec::with_capacity(v.len());
    let mut g2 = Vec::with_capacity(v.len());
    for (&vi, &ri) in v.iter().zip(r) {
        let s = theta.theta1 * vi + theta.theta2;
        let d = if s > VARIANCE_FLOOR {
            0.5 / s - ri * ri / (2.0 * s * s)
        } else {
            0.0
        };
        g1.push(d * vi);
        g2.push(d);
    }
    let grad = [
        pairwise_sum(&g1) / n * sigmoid(phi[0]),
        pairwise_sum(&g2) / n * sigmoid(phi[1]),
    ];
    (free_objective(theta, v, r), grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    /// Line search could not make progress before the gradient tolerance.
    Stalled,
    MaxSteps,
    /// All residuals are zero; the variance sits on the floor.
    Degenerate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FreeFit {
    pub calibration: FreeCalibration,
    /// Mean NLL at `calibration`.
    pub objective: f64,
    pub steps: usize,
    pub grad_norm: f64,
    pub status: FitStatus,
    pub warning: Option<String>,
}

/// Log-spaced grid values over `[FREE_GRID_MIN, FREE_GRID_MAX]`.
pub fn free_grid() -> Vec<f64> {
    let (lo, hi) = (FREE_GRID_MIN.log10(), FREE_GRID_MAX.log10());
    (0..FREE_GRID_SIZE)
        .map(|k| 10f64.powf(lo + (hi - lo) * k as f64 / (FREE_GRID_SIZE - 1) as f64))
        .collect()
}

/// Fits `(θ1, θ2)` to propagated variances `v` and residuals `r`: best point
/// of a 20×20 log grid, then gradient descent with backtracking on the
/// softplus pre-images. The result is never worse than `(1, 0)` or any grid
/// point.
pub fn fit_free_from_residuals(v: &[f64], r: &[f64]) -> Result<FreeFit> {
    if v.len() != r.len() {
        return Err(Error::Shape(format!("{} variances for {} residuals", v.len(), r.len())));
    }
    if v.is_empty() {
        return Err(Error::Config("free calibration needs a non-empty split".into()));
    }
    if v.iter().chain(r).any(|x| !x.is_finite()) || v.iter().any(|&x| x < 0.0) {
        return Err(Error::Domain(
            "variances must be finite and non-negative, residuals finite".into(),
        ));
    }
    if r.iter().all(|&x| x == 0.0) {
        let calibration = FreeCalibration {
            theta1: 0.0,
            theta2: VARIANCE_FLOOR,
        };
        return Ok(FreeFit {
            calibration,
            objective: free_objective(calibration, v, r),
            steps: 0,
            grad_norm: 0.0,
            status: FitStatus::Degenerate,
            warning: Some("all residuals are zero; calibrated variance set to the floor".into()),
        });
    }

    let grid = free_grid();
    let mut best = (
        f64::INFINITY,
        FreeCalibration {
            theta1: 1.0,
            theta2: 0.0,
        },
    );
    for &t1 in &grid {
        for &t2 in &grid {
            let c = FreeCalibration { theta1: t1, theta2: t2 };
            let f = free_objective(c, v, r);
            if f < best.0 {
                best = (f, c);
            }
        }
    }

    let mut phi = [inverse_softplus(best.1.theta1), inverse_softplus(best.1.theta2)];
    let (mut f, mut g) = free_objective_phi(phi, v, r);
    let mut step = 1.0;
    let mut steps = 0;
    let mut status = FitStatus::MaxSteps;
    while steps < FREE_MAX_STEPS {
        let gn2 = g[0] * g[0] + g[1] * g[1];
        if gn2.sqrt() <= FREE_GRAD_TOL {
            status = FitStatus::Converged;
            break;
        }
        let mut accepted = false;
        while step > 1e-30 {
            let trial = [phi[0] - step * g[0], phi[1] - step * g[1]];
            let (ft, gt) = free_objective_phi(trial, v, r);
            if ft <= f - 1e-4 * step * gn2 {
                phi = trial;
                f = ft;
                g = gt;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        steps += 1;
        if !accepted {
            status = FitStatus::Stalled;
            break;
        }
        step *= 2.0;
    }

    let descended = FreeCalibration {
        theta1: softplus(phi[0]),
        theta2: softplus(phi[1]),
    };
    let grad_norm = g[0].hypot(g[1]);
    let identity = FreeCalibration {
        theta1: 1.0,
        theta2: 0.0,
    };
    let mut out = (free_objective(descended, v, r), descended);
    for c in [best.1, identity] {
        let fc = free_objective(c, v, r);
        if fc < out.0 {
            out = (fc, c);
        }
    }
    Ok(FreeFit {
        calibration: out.1,
        objective: out.0,
        steps,
        grad_norm,
        status,
        warning: None,
    })
}

/// Fits GAPA-Free on a standardized calibration split using the model's
/// uncalibrated propagated variances.
pub fn fit_free(model: &GapaModel, calibration_split: &Dataset, exec: Execution) -> Result<FreeFit> {
    if calibration_split.is_empty() {
        return Err(Error::Config("free calibration needs a non-empty split".into()));
    }
    let base = model.with_calibration(Calibration::Uncalibrated)?;
    let out = par::try_map_range(exec, calibration_split.len(), |i| {
        let (mean, var) = base.propagate_standardized(calibration_split.row(i))?;
        Ok::<_, Error>((var, calibration_split.targets[i] - mean))
    })?;
    let (v, r): (Vec<f64>, Vec<f64>) = out.into_iter().unzip();
    fit_free_from_residuals(&v, &r)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for VariationalConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-2,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRecord {
    pub epoch: usize,
    /// Mean training NLL after the epoch (epoch 0: before training).
    pub nll: f64,
    /// Norm of the full-data gradient of the summed NLL.
    pub grad_norm: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn initial_nll(&self) -> Option<f64> {
        self.records.first().map(|r| r.nll)
    }

    pub fn final_nll(&self) -> Option<f64> {
        self.records.last().map(|r| r.nll)
    }

    /// One `key=value` record per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let _ = writeln!(
                s,
                "epoch={} nll={:.16e} grad_norm={:.16e} seconds={:.6}",
                r.epoch, r.nll, r.grad_norm, r.seconds
            );
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::Persistence(format!("train log line {}: {what}", lineno + 1));
            let mut fields = [None; 4];
            for tok in line.split_whitespace() {
                let (k, v) = tok.split_once('=').ok_or_else(|| bad("expected key=value"))?;
                let slot = match k {
                    "epoch" => 0,
                    "nll" => 1,
                    "grad_norm" => 2,
                    "seconds" => 3,
                    _ => return Err(bad(&format!("unknown key '{k}'"))),
                };
                fields[slot] = Some(v);
            }
            let get = |i: usize, name: &str| fields[i].ok_or_else(|| bad(&format!("missing {name}")));
            let real = |i: usize, name: &str| -> Result<f64> {
                let v: f64 = get(i, name)?.parse().map_err(|_| bad(&format!("bad {name}")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(bad(&format!("{name} is not finite")))
                }
            };
            records.push(TrainRecord {
                epoch: get(0, "epoch")?.parse().map_err(|_| bad("bad epoch"))?,
                nll: real(1, "nll")?,
                grad_norm: real(2, "grad_norm")?,
                seconds: real(3, "seconds")?,
            });
        }
        Ok(Self { records })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Number of unconstrained parameters of a neuron with `m` inducing inputs:
/// `log ℓ`, `log σ_f`, then the lower triangle of `L_S` row by row with the
/// diagonal stored as its logarithm.
pub fn neuron_param_len(m: usize) -> usize {
    2 + m * (m + 1) / 2
}

/// Unconstrained parameters of one neuron (which must carry `L_S`).
pub fn pack_neuron(n: &NeuronGP) -> Result<Vec<f64>> {
    let l = n
        .variational_factor()
        .ok_or_else(|| Error::Config("neuron has no variational factor".into()))?;
    let k = n.kernel();
    let mut p = Vec::with_capacity(neuron_param_len(n.n_inducing()));
    p.push(k.lengthscale.ln());
    p.push(0.5 * k.outputscale.ln());
    for i in 0..l.rows() {
        for j in 0..=i {
            let v = l.get(i, j);
            if i == j {
                if !(v > 0.0) {
                    return Err(Error::Domain(format!(
                        "variational factor diagonal {v:e} is not positive"
                    )));
                }
                p.push(v.ln());
            } else {
                p.push(v);
            }
        }
    }
    Ok(p)
}

/// Rebuilds a neuron from `template` (inducing inputs, noise, activation) and
/// unconstrained parameters.
pub fn unpack_neuron(template: &NeuronGP, p: &[f64]) -> Result<NeuronGP> {
    let m = template.n_inducing();
    if p.len() != neuron_param_len(m) {
        return Err(Error::Shape(format!(
            "{} parameters for a neuron with {m} inducing inputs",
            p.len()
        )));
    }
    let kernel = RbfParams::new(p[0].exp(), (2.0 * p[1]).exp(), template.kernel().noise)?;
    let mut l = Matrix::zeros(m, m);
    let mut idx = 2;
    for i in 0..m {
        for j in 0..=i {
            l.set(i, j, if i == j { p[idx].exp() } else { p[idx] });
            idx += 1;
        }
    }
    if l.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("variational factor".into()));
    }
    let mut n = template.with_kernel(kernel)?;
    n.set_variational_factor(Some(l))?;
    Ok(n)
}

/// The trainable parameters of a whole layer, neuron blocks concatenated.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalParams {
    pub flat: Vec<f64>,
    pub offsets: Vec<usize>,
}

impl VariationalParams {
    pub fn from_layer(layer: &GapaLayerState) -> Result<Self> {
        let mut flat = Vec::new();
        let mut offsets = Vec::with_capacity(layer.width() + 1);
        for n in &layer.neurons {
            offsets.push(flat.len());
            flat.extend(pack_neuron(n)?);
        }
        offsets.push(flat.len());
        Ok(Self { flat, offsets })
    }

    pub fn block(&self, d: usize) -> &[f64] {
        &self.flat[self.offsets[d]..self.offsets[d + 1]]
    }

    pub fn apply(&self, template: &GapaLayerState, flat: &[f64]) -> Result<GapaLayerState> {
        if flat.len() != self.flat.len() || template.width() + 1 != self.offsets.len() {
            return Err(Error::Shape("parameter vector does not match the layer".into()));
        }
        let neurons = template
            .neurons
            .iter()
            .enumerate()
            .map(|(d, n)| unpack_neuron(n, &flat[self.offsets[d]..self.offsets[d + 1]]))
            .collect::<Result<_>>()?;
        Ok(GapaLayerState {
            layer_index: template.layer_index,
            neurons,
        })
    }
}

/// Copy of `layer` where neurons without `L_S` start at the prior.
pub fn with_prior_factors(layer: &GapaLayerState) -> GapaLayerState {
    let mut out = layer.clone();
    for n in &mut out.neurons {
        if n.variational_factor().is_none() {
            n.init_variational_at_prior();
        }
    }
    out
}

struct PointCache {
    pre: Vec<f64>,
    sens: Vec<f64>,
    residual: f64,
}

/// Summed NLL of the variational GAPA predictions over a standardized
/// dataset, as a function of the flat [`VariationalParams`] vector.
pub struct VariationalObjective<'a> {
    net: &'a BackboneNetwork,
    template: GapaLayerState,
    layout: VariationalParams,
    data: &'a Dataset,
    mode: CovarianceMode,
    cache: Vec<PointCache>,
    exec: Execution,
}

impl<'a> VariationalObjective<'a> {
    pub fn new(
        net: &'a BackboneNetwork,
        layer: &GapaLayerState,
        data: &'a Dataset,
        mode: CovarianceMode,
        exec: Execution,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Config("variational training needs data".into()));
        }
        if layer.width() != net.first_width() {
            return Err(Error::Shape("GAPA layer does not match the network".into()));
        }
        let template = with_prior_factors(layer);
        let layout = VariationalParams::from_layer(&template)?;
        let cache = par::try_map_range(exec, data.len(), |i| {
            let x = data.row(i);
            Ok::<_, Error>(PointCache {
                pre: net.first_pre_activations(x)?,
                sens: variance_sensitivities(net, x, mode)?,
                residual: data.targets[i] - net.predict(x)?,
            })
        })?;
        Ok(Self {
            net,
            template,
            layout,
            data,
            mode,
            cache,
            exec,
        })
    }

    pub fn initial_params(&self) -> Vec<f64> {
        self.layout.flat.clone()
    }

    pub fn n_params(&self) -> usize {
        self.layout.flat.len()
    }

    pub fn n_points(&self) -> usize {
        self.cache.len()
    }

    pub fn layout(&self) -> &VariationalParams {
        &self.layout
    }

    pub fn layer_at(&self, params: &[f64]) -> Result<GapaLayerState> {
        self.layout.apply(&self.template, params)
    }

    /// Summed NLL through the full forward path ([`gapa_forward`]).
    pub fn value(&self, params: &[f64]) -> Result<f64> {
        let layer = self.layer_at(params)?;
        let terms = par::try_map_range(self.exec, self.data.len(), |i| {
            let p = gapa_forward(self.net, &layer, &Calibration::Variational, self.data.row(i), self.mode)?;
            Ok::<_, Error>(point_nll(
                p.standardized_mean,
                p.standardized_variance,
                self.data.targets[i],
            ))
        })?;
        Ok(pairwise_sum(&terms))
    }

    /// Summed NLL over `rows` and its gradient.
    pub fn value_and_gradient(&self, params: &[f64], rows: &[usize]) -> Result<(f64, Vec<f64>)> {
        let layer = self.layer_at(params)?;
        let width = layer.width();

        // Per-neuron variational variances at every row.
        let vars: Vec<Vec<f64>> = par::try_map_range(self.exec, width, |d| {
            let n = &layer.neurons[d];
            rows.iter()
                .map(|&i| clamp_variance(n.variance_terms(self.cache[i].pre[d]).raw))
                .collect::<Result<Vec<f64>>>()
        })?;

        let mut terms = Vec::with_capacity(rows.len());
        let mut dvar = Vec::with_capacity(rows.len());
        for (k, &i) in rows.iter().enumerate() {
            let c = &self.cache[i];
            let v: f64 = (0..width).map(|d| c.sens[d] * vars[d][k]).sum();
            let s = v.max(VARIANCE_FLOOR);
            let r2 = c.residual * c.residual;
            terms.push(0.5 * (LN_2PI + s.ln()) + r2 / (2.0 * s));
            dvar.push(if v > VARIANCE_FLOOR {
                0.5 / s - r2 / (2.0 * s * s)
            } else {
                0.0
            });
        }
        let value = pairwise_sum(&terms);

        let blocks = par::map_range(self.exec, width, |d| {
            let weights: Vec<f64> = rows
                .iter()
                .enumerate()
                .map(|(k, &i)| {
                    if vars[d][k] > 0.0 {
                        dvar[k] * self.cache[i].sens[d]
                    } else {
                        0.0
                    }
                })
                .collect();
            let xs: Vec<f64> = rows.iter().map(|&i| self.cache[i].pre[d]).collect();
            neuron_gradient(&layer.neurons[d], &xs, &weights)
        });

        let mut grad = Vec::with_capacity(self.n_params());
        for (d, b) in blocks.into_iter().enumerate() {
            if let Some(bad) = b.iter().position(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in neuron {d} block ({})",
                    if bad < 2 {
                        "kernel hyperparameters"
                    } else {
                        "variational factor"
                    }
                )));
            }
            grad.extend(b);
        }
        if !value.is_finite() {
            return Err(Error::Numerical("non-finite NLL".into()));
        }
        Ok((value, grad))
    }

    pub fn all_rows(&self) -> Vec<usize> {
        (0..self.cache.len()).collect()
    }
}

/// `Σ_k w_k ∂v(x_k)/∂p` for one neuron's unconstrained parameters `p`, with
/// `v = k(x,x) - kᵀa + aᵀSa`, `a = K⁻¹k`.
fn neuron_gradient(n: &NeuronGP, xs: &[f64], weights: &[f64]) -> Vec<f64> {
    let m = n.n_inducing();
    let z = n.inducing();
    let kern = *n.kernel();
    let ell2 = kern.lengthscale * kern.lengthscale;
    let l = n.variational_factor().expect("training layer carries factors");

    let mut g_log_ell = 0.0;
    let mut g_log_sf = 0.0;
    // dv/dK accumulated over points, and dv/dL_S.
    let mut gk = vec![0.0; m * m];
    let mut gl = vec![0.0; m * m];

    for (&x, &w) in xs.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let t = n.variance_terms(x);
        let a = &t.alpha;
        let mut b = t.s_alpha.clone();
        n.gram_factor().forward_substitute(&mut b);
        n.gram_factor().back_substitute(&mut b);
        let u: Vec<f64> = (0..m).map(|j| (j..m).map(|i| l.get(i, j) * a[i]).sum()).collect();

        g_log_sf += w * 2.0 * kern.outputscale;
        for i in 0..m {
            let dk = 2.0 * (b[i] - a[i]);
            let ki = t.cross[i];
            let dx = x - z[i];
            g_log_sf += w * dk * 2.0 * ki;
            g_log_ell += w * dk * ki * dx * dx / ell2;
        }
        for i in 0..m {
            for j in 0..m {
                gk[i * m + j] += w * (a[i] * a[j] - b[i] * a[j] - a[i] * b[j]);
            }
            for j in 0..=i {
                gl[i * m + j] += w * 2.0 * a[i] * u[j];
            }
        }
    }

    for i in 0..m {
        for j in 0..m {
            let dz = z[i] - z[j];
            let kk = kern.outputscale * (-0.5 * dz * dz / ell2).exp();
            g_log_sf += gk[i * m + j] * 2.0 * kk;
            g_log_ell += gk[i * m + j] * kk * dz * dz / ell2;
        }
    }

    let mut out = Vec::with_capacity(neuron_param_len(m));
    out.push(g_log_ell);
    out.push(g_log_sf);
    for i in 0..m {
        for j in 0..=i {
            let g = gl[i * m + j];
            out.push(if i == j { g * l.get(i, i) } else { g });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariationalFit {
    pub layer: GapaLayerState,
    pub params: VariationalParams,
    pub log: TrainLog,
}

/// Trains `L_S` and the log kernel hyperparameters of every neuron by
/// mini-batch Adam on the summed NLL over the standardized training split.
/// Backbone weights and inducing inputs are never touched.
pub fn fit_variational(
    net: &BackboneNetwork,
    layer: &GapaLayerState,
    train: &Dataset,
    mode: CovarianceMode,
    config: &VariationalConfig,
    exec: Execution,
) -> Result<VariationalFit> {
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if !(config.learning_rate >= 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::Config(format!("invalid learning rate {}", config.learning_rate)));
    }
    let obj = VariationalObjective::new(net, layer, train, mode, exec)?;
    let all = obj.all_rows();
    let n = all.len() as f64;
    let mut params = obj.initial_params();
    let mut adam = Adam::new(params.len(), config.learning_rate);
    let start = Instant::now();
    let training_err = |epoch: usize, e: Error| Error::Training {
        epoch,
        message: e.to_string(),
    };

    let record = |epoch: usize, params: &[f64]| -> Result<TrainRecord> {
        let (value, grad) = obj
            .value_and_gradient(params, &all)
            .map_err(|e| training_err(epoch, e))?;
        Ok(TrainRecord {
            epoch,
            nll: value / n,
            grad_norm: grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
            seconds: start.elapsed().as_secs_f64(),
        })
    };

    let mut records = vec![record(0, &params)?];
    for epoch in 1..=config.epochs {
        let order = shuffled_indices(all.len(), epoch_seed(config.seed, epoch));
        for batch in order.chunks(config.batch_size) {
            let (_, grad) = obj
                .value_and_gradient(&params, batch)
                .map_err(|e| training_err(epoch, e))?;
            adam.step(&mut params, &grad);
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    message: "parameters became non-finite".into(),
                });
            }
        }
        records.push(record(epoch, &params)?);
    }
    let layer = obj.layer_at(&params).map_err(|e| training_err(config.epochs, e))?;
    let mut layout = obj.layout().clone();
    layout.flat = params;
    Ok(VariationalFit {
        layer,
        params: layout,
        log: TrainLog { records },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the gradient returned by `loss` at `params` with central
/// differences of its value. Relative errors use the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(loss: F, params: &[f64], h: f64) -> Result<GradCheck>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let (_, analytic) = loss(params)?;
    if analytic.len() != params.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut p = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        p[i] = params[i] + h;
        let (fp, _) = loss(&p)?;
        p[i] = params[i] - h;
        let (fm, _) = loss(&p)?;
        p[i] = params[i];
        numeric.push((fp - fm) / (2.0 * h));
    }
    let mut worst = (0.0, 0);
    for (i, (a, nm)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (a - nm).abs() / a.abs().max(nm.abs()).max(1e-8);
        if err > worst.0 || err.is_nan() {
            worst = (err, i);
        }
    }
    Ok(GradCheck {
        max_relative_error: worst.0,
        worst_index: worst.1,
        analytic,
        numeric,
    })
}

/// [`grad_check`] on the variational objective over all rows of `data`,
/// with numeric derivatives taken through the full forward path.
pub fn grad_check_variational(
    net: &BackboneNetwork,
    layer: &GapaLayerState,
    data: &Dataset,
    mode: CovarianceMode,
    h: f64,
    exec: Execution,
) -> Result<GradCheck> {
    let obj = VariationalObjective::new(net, layer, data, mode, exec)?;
    let rows = obj.all_rows();
    let params = obj.initial_params();
    let (_, grad) = obj.value_and_gradient(&params, &rows)?;
    grad_check(
        |p| {
            if p == params.as_slice() {
                Ok((obj.value(p)?, grad.clone()))
            } else {
                Ok((obj.value(p)?, Vec::new()))
            }
        },
        &params,
        h,
    )
}
