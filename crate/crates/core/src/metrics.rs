//! Evaluation metrics: Gaussian NLL, CRPS and the centered quantile metric
//! (CQM), reported in original target units.

use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::calibrate::{nll, VARIANCE_FLOOR};
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::model::GapaModel;
use crate::par::{pairwise_sum, Execution};
use crate::persist;
use crate::propagate::PredictiveDistribution;

pub const DEFAULT_CQM_GRID: usize = 99;
pub const REPORT_FILE_VERSION: u32 = 1;

const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;

fn standard_normal() -> Normal {
    Normal::standard()
}

/// Closed-form CRPS of `N(μ, σ²)` at `y`:
/// `σ [z(2Φ(z) - 1) + 2φ(z) - 1/√π]`, `z = (y - μ)/σ`.
pub fn crps_gaussian(mu: f64, sigma: f64, y: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!(
            "CRPS needs a positive standard deviation, got {sigma}"
        )));
    }
    let n = standard_normal();
    let z = (y - mu) / sigma;
    let v = sigma * (z * (2.0 * n.cdf(z) - 1.0) + 2.0 * n.pdf(z) - FRAC_1_SQRT_PI);
    Ok(v.max(0.0))
}

/// Mean over `α_k = k/(grid+1)`, `k = 1..=grid`, of `|ĉ(α_k) - α_k|`, where
/// `ĉ(α)` is the fraction of targets inside the centered `α` interval
/// (endpoints included).
pub fn cqm(preds: &[PredictiveDistribution], targets: &[f64], grid: usize) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if preds.is_empty() || grid == 0 {
        return Err(Error::Config("CQM needs predictions and a non-empty grid".into()));
    }
    if let Some(p) = preds.iter().find(|p| !(p.variance > 0.0 && p.variance.is_finite())) {
        return Err(Error::Domain(format!(
            "CQM needs positive variances, got {:e}",
            p.variance
        )));
    }
    let n = standard_normal();
    let count = preds.len() as f64;
    let errs: Vec<f64> = (1..=grid)
        .map(|k| {
            let alpha = k as f64 / (grid + 1) as f64;
            let lo_q = n.inverse_cdf((1.0 - alpha) / 2.0);
            let hi_q = n.inverse_cdf((1.0 + alpha) / 2.0);
            let inside = preds
                .iter()
                .zip(targets)
                .filter(|(p, &y)| {
                    let s = p.variance.sqrt();
                    y >= p.mean + s * lo_q && y <= p.mean + s * hi_q
                })
                .count();
            (inside as f64 / count - alpha).abs()
        })
        .collect();
    Ok(pairwise_sum(&errs) / grid as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nll: f64,
    pub crps: f64,
    pub cqm: f64,
    pub n_points: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Metrics of predictions in original units against `targets`.
pub fn score(preds: &[PredictiveDistribution], targets: &[f64], grid: usize) -> Result<MetricsReport> {
    let nll = nll(preds, targets)?;
    let crps_terms: Vec<f64> = preds
        .iter()
        .zip(targets)
        .map(|(p, &y)| crps_gaussian(p.mean, p.std_dev(), y))
        .collect::<Result<_>>()?;
    let crps = pairwise_sum(&crps_terms) / preds.len() as f64;
    let cqm = cqm(preds, targets, grid)?;
    let mut warnings = Vec::new();
    let floored = preds
        .iter()
        .filter(|p| p.standardized_variance <= VARIANCE_FLOOR * (1.0 + 1e-12))
        .count();
    if floored > 0 {
        warnings.push(format!(
            "{floored} of {} predictive variances sit on the floor {VARIANCE_FLOOR:e}",
            preds.len()
        ));
    }
    let report = MetricsReport {
        nll: nll.mean,
        crps,
        cqm,
        n_points: preds.len(),
        warnings,
    };
    if !(report.nll.is_finite() && report.crps.is_finite() && report.cqm.is_finite()) {
        return Err(Error::Numerical("metrics are not finite".into()));
    }
    Ok(report)
}

/// Predicts every row of the raw `test` set and scores it in original units.
pub fn evaluate(model: &GapaModel, test: &Dataset, grid: usize, exec: Execution) -> Result<MetricsReport> {
    let preds = model.predict_rows(test, exec)?;
    score(&preds, &test.targets, grid)
}

#[derive(Serialize, Deserialize)]
struct ReportFile {
    version: u32,
    nll: f64,
    crps: f64,
    cqm: f64,
    n_points: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_digest: Option<String>,
    #[serde(default)]
    warnings: Vec<String>,
}

pub fn report_to_string(report: &MetricsReport, config_digest: Option<&str>) -> Result<String> {
    persist::to_string(&ReportFile {
        version: REPORT_FILE_VERSION,
        nll: report.nll,
        crps: report.crps,
        cqm: report.cqm,
        n_points: report.n_points,
        config_digest: config_digest.map(str::to_owned),
        warnings: report.warnings.clone(),
    })
}

pub fn report_from_str(text: &str) -> Result<(MetricsReport, Option<String>)> {
    let f: ReportFile = persist::from_str(text, "metrics report", REPORT_FILE_VERSION)?;
    Ok((
        MetricsReport {
            nll: f.nll,
            crps: f.crps,
            cqm: f.cqm,
            n_points: f.n_points,
            warnings: f.warnings,
        },
        f.config_digest,
    ))
}

pub fn write_report(report: &MetricsReport, config_digest: Option<&str>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, report_to_string(report, config_digest)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn pd(mean: f64, var: f64) -> PredictiveDistribution {
        PredictiveDistribution::from_standardized(mean, var, None)
    }

    /// `∫ (F(t) - 1{t ≥ y})² dt` by the trapezoid rule, split at `y` so both
    /// pieces are smooth, on ±(|z|+12)σ.
    fn crps_by_integration(mu: f64, sigma: f64, y: f64) -> f64 {
        let n = Normal::new(mu, sigma).unwrap();
        let half = (12.0 + ((y - mu) / sigma).abs()) * sigma;
        let trapezoid = |a: f64, b: f64, f: &dyn Fn(f64) -> f64| {
            let steps = 200_000;
            let h = (b - a) / steps as f64;
            let mut s = 0.5 * (f(a) + f(b));
            for i in 1..steps {
                s += f(a + i as f64 * h);
            }
            s * h
        };
        trapezoid(mu.min(y) - half, y, &|t| n.cdf(t).powi(2))
            + trapezoid(y, mu.max(y) + half, &|t| (1.0 - n.cdf(t)).powi(2))
    }

    #[test]
    fn crps_examples() {
        let c = crps_gaussian(0.0, 1.0, 0.0).unwrap();
        assert!((c - 0.23370).abs() < 1e-5);
        assert!(crps_gaussian(1.0, 1e-12, 1.0).unwrap() < 1e-11);
        // Far misses approach |y - μ| - σ/√π.
        let far = crps_gaussian(0.0, 1.0, 8.0).unwrap();
        assert!((far - (8.0 - FRAC_1_SQRT_PI)).abs() < 1e-3);
        assert!((crps_gaussian(0.0, 1e-3, 8.0).unwrap() - 8.0).abs() < 1e-3);
        assert!(matches!(crps_gaussian(0.0, 0.0, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn crps_matches_numerical_integration() {
        for sigma in [0.5, 1.0, 2.0] {
            for i in 0..=20 {
                let z = -5.0 + 0.5 * i as f64;
                let y = 0.3 + z * sigma;
                let want = crps_by_integration(0.3, sigma, y);
                let got = crps_gaussian(0.3, sigma, y).unwrap();
                assert!((got - want).abs() < 1e-6, "σ={sigma} z={z}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn cqm_degenerate_cases() {
        let preds: Vec<_> = (0..10).map(|i| pd(i as f64, 1.0 + i as f64)).collect();
        let at_mean: Vec<f64> = preds.iter().map(|p| p.mean).collect();
        let want = (1..=99).map(|k| 1.0 - k as f64 / 100.0).sum::<f64>() / 99.0;
        assert!((cqm(&preds, &at_mean, 99).unwrap() - want).abs() < 1e-12);
        let far: Vec<f64> = preds.iter().map(|p| p.mean + 10.0 * p.std_dev()).collect();
        assert!((cqm(&preds, &far, 99).unwrap() - 0.5).abs() < 1e-12);
        assert!(cqm(&[pd(0.0, 0.0)], &[0.0], 99).is_err());
    }

    #[test]
    fn cqm_of_consistent_targets_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let preds: Vec<_> = (0..n).map(|i| pd((i % 17) as f64, 0.5 + (i % 5) as f64)).collect();
        let ys: Vec<f64> = preds
            .iter()
            .map(|p| {
                let e: f64 = StandardNormal.sample(&mut rng);
                p.mean + p.std_dev() * e
            })
            .collect();
        assert!(cqm(&preds, &ys, 99).unwrap() <= 0.01);
    }

    #[test]
    fn report_round_trip_and_order_invariance() {
        let preds: Vec<_> = (0..30).map(|i| pd((i as f64).sin(), 0.2 + 0.01 * i as f64)).collect();
        let ys: Vec<f64> = (0..30).map(|i| (i as f64 * 0.7).cos()).collect();
        let r = score(&preds, &ys, 99).unwrap();
        let mut rp = preds.clone();
        let mut ry = ys.clone();
        rp.reverse();
        ry.reverse();
        let r2 = score(&rp, &ry, 99).unwrap();
        assert!((r.nll - r2.nll).abs() < 1e-14 && (r.crps - r2.crps).abs() < 1e-14);
        assert_eq!(r.cqm, r2.cqm);
        assert_eq!(r.nll, nll(&preds, &ys).unwrap().mean);
        let s = report_to_string(&r, Some("digest")).unwrap();
        let (back, d) = report_from_str(&s).unwrap();
        assert_eq!(back, r);
        assert_eq!(d.as_deref(), Some("digest"));
    }

    #[test]
    fn floor_predictions_are_flagged() {
        let preds = vec![pd(1.0, VARIANCE_FLOOR); 4];
        let r = score(&preds, &[1.0; 4], 99).unwrap();
        assert!(!r.warnings.is_empty());
        let want = 0.5 * (2.0 * std::f64::consts::PI * VARIANCE_FLOOR).ln();
        assert!((r.nll - want).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn crps_is_nonnegative_and_monotone(mu in -5.0f64..5.0, sigma in 0.01f64..10.0, d1 in 0.0f64..20.0, d2 in 0.0f64..20.0) {
            let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
            let a = crps_gaussian(mu, sigma, mu + lo).unwrap();
            let b = crps_gaussian(mu, sigma, mu - hi).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!(b >= a - 1e-12 * b.abs().max(1.0));
        }

        #[test]
        fn cqm_in_range(means in prop::collection::vec(-3.0f64..3.0, 1..40), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let preds: Vec<_> = means.iter().map(|&m| pd(m, 1.0)).collect();
            let ys: Vec<f64> = means.iter().map(|_| { let e: f64 = StandardNormal.sample(&mut rng); 3.0 * e }).collect();
            let c = cqm(&preds, &ys, 99).unwrap();
            prop_assert!((0.0..=0.5).contains(&c));
        }
    }
}
