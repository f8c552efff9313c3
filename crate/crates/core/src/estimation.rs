//! Sample-based overlap diagnostics: propensity fitting, plug-in overlap
//! bounds, mean imbalance against the closed-form bounds, and trimming.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{self, BoundsError, OverlapSpec};
use crate::dataset::{Dataset, DatasetError};
use crate::linalg::{self, CovarianceMatrix};

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("logistic fit did not converge after {iterations} iterations (gradient norm {gradient_norm:e}, coefficient norm {coefficient_norm:.3e}): {diagnostic}")]
    NonConvergence {
        iterations: usize,
        gradient_norm: f64,
        coefficient_norm: f64,
        diagnostic: String,
        coefficients: Vec<f64>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Bounds(#[from] BoundsError),
}

pub type Result<T> = std::result::Result<T, EstimationError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Ridge penalty on the slopes; `None` means `1e-6 * n`.
    pub l2_penalty: Option<f64>,
    /// Convergence threshold on the norm of the per-unit gradient.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            l2_penalty: None,
            tol: 1e-8,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityFit {
    /// Intercept followed by one slope per covariate. Empty when the fitted
    /// values were supplied directly.
    pub coefficients: Vec<f64>,
    pub fitted: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_gradient_norm: f64,
    pub l2_penalty: f64,
}

/// Smallest and largest representable fitted values.
const FITTED_FLOOR: f64 = f64::MIN_POSITIVE;
const FITTED_CEIL: f64 = 1.0 - f64::EPSILON / 2.0;

fn sigmoid(z: f64) -> f64 {
    let e = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let ez = z.exp();
        ez / (1.0 + ez)
    };
    e.clamp(FITTED_FLOOR, FITTED_CEIL)
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl PropensityFit {
    /// Wraps externally estimated propensities, clamped into `(0, 1)`.
    pub fn from_fitted(fitted: Vec<f64>) -> Self {
        Self {
            coefficients: Vec::new(),
            fitted: fitted.into_iter().map(|e| e.clamp(FITTED_FLOOR, FITTED_CEIL)).collect(),
            converged: true,
            iterations: 0,
            final_gradient_norm: 0.0,
            l2_penalty: 0.0,
        }
    }

    /// Plug-in accuracy of the Bayes classifier, `mean max(e, 1 - e)`.
    pub fn bayes_accuracy(&self) -> f64 {
        self.fitted.iter().map(|e| e.max(1.0 - e)).sum::<f64>() / self.fitted.len() as f64
    }

    pub fn predict(&self, x: &[f64]) -> Option<f64> {
        if self.coefficients.len() != x.len() + 1 {
            return None;
        }
        let z = self.coefficients[0] + self.coefficients[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>();
        Some(sigmoid(z))
    }
}

struct Objective {
    value: f64,
    linear: Vec<f64>,
}

fn evaluate(data: &Dataset, beta: &[f64], penalty: f64) -> Objective {
    let mut value = 0.0;
    let mut linear = Vec::with_capacity(data.n());
    for (row, t) in data.rows().zip(data.treatment()) {
        let z = beta[0] + beta[1..].iter().zip(row).map(|(b, v)| b * v).sum::<f64>();
        value += f64::from(*t) * z - softplus(z);
        linear.push(z);
    }
    value -= 0.5 * penalty * beta[1..].iter().map(|b| b * b).sum::<f64>();
    Objective { value, linear }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Penalized logistic regression of treatment on covariates by damped
/// Newton iterations from zero.
///
/// Convergence is declared when the norm of the gradient of the average
/// penalized log-likelihood drops to `tol`. The intercept is never
/// penalized. Without a penalty, a coefficient vector that strictly
/// separates the groups is reported as divergence.
pub fn fit_logistic_propensity(data: &Dataset, opts: FitOptions) -> Result<PropensityFit> {
    data.require_both_groups()?;
    let (n, p) = (data.n(), data.p());
    let penalty = opts.l2_penalty.unwrap_or(1e-6 * n as f64);
    if !(penalty >= 0.0) || !penalty.is_finite() {
        return Err(EstimationError::Config(format!("l2_penalty must be nonnegative, got {penalty}")));
    }
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        return Err(EstimationError::Config("tol must be positive and max_iter at least 1".into()));
    }
    let dim = p + 1;
    let mut beta = vec![0.0; dim];
    let mut current = evaluate(data, &beta, penalty);
    let mut grad_norm = f64::INFINITY;
    for iteration in 0..=opts.max_iter {
        let mut grad = vec![0.0; dim];
        let mut hess = vec![0.0; dim * dim];
        for ((row, t), z) in data.rows().zip(data.treatment()).zip(&current.linear) {
            let e = sigmoid(*z);
            let resid = f64::from(*t) - e;
            let w = e * (1.0 - e);
            grad[0] += resid;
            hess[0] += w;
            for j in 0..p {
                grad[j + 1] += resid * row[j];
                hess[j + 1] += w * row[j];
                for k in 0..=j {
                    hess[(j + 1) * dim + k + 1] += w * row[j] * row[k];
                }
            }
        }
        for j in 1..dim {
            grad[j] -= penalty * beta[j];
            hess[j * dim + j] += penalty;
            hess[j * dim] = hess[j];
            for k in 1..j {
                hess[k * dim + j] = hess[j * dim + k];
            }
        }
        grad_norm = norm(&grad) / n as f64;
        if grad_norm <= opts.tol {
            let fitted = current.linear.iter().map(|z| sigmoid(*z)).collect();
            return Ok(PropensityFit {
                coefficients: beta,
                fitted,
                converged: true,
                iterations: iteration,
                final_gradient_norm: grad_norm,
                l2_penalty: penalty,
            });
        }
        if iteration == opts.max_iter {
            break;
        }
        if penalty == 0.0 && iteration > 0 && separates(data, &current.linear) {
            return Err(EstimationError::NonConvergence {
                iterations: iteration,
                gradient_norm: grad_norm,
                coefficient_norm: norm(&beta),
                diagnostic: "coefficients diverging: the current fit separates treated from control units perfectly, so no finite maximum likelihood estimate exists; use a positive l2_penalty".into(),
                coefficients: beta,
            });
        }
        let step = match linalg::cholesky_solve(&hess, &grad) {
            Ok(step) => step,
            Err(_) => {
                // Singular information: fall back to a scaled gradient step.
                let scale = 1.0 / (hess.iter().step_by(dim + 1).cloned().fold(0.0, f64::max).max(1.0));
                grad.iter().map(|g| g * scale).collect()
            }
        };
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let candidate: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + t * s).collect();
            let next = evaluate(data, &candidate, penalty);
            if next.value >= current.value {
                accepted = Some((candidate, next));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((candidate, next)) => {
                beta = candidate;
                current = next;
            }
            None => {
                return Err(EstimationError::NonConvergence {
                    iterations: iteration,
                    gradient_norm: grad_norm,
                    coefficient_norm: norm(&beta),
                    diagnostic: "line search failed to improve the log-likelihood".into(),
                    coefficients: beta,
                })
            }
        }
    }
    Err(EstimationError::NonConvergence {
        iterations: opts.max_iter,
        gradient_norm: grad_norm,
        coefficient_norm: norm(&beta),
        diagnostic: if penalty == 0.0 {
            "iteration budget exhausted; coefficients may be diverging under quasi-separation".into()
        } else {
            "iteration budget exhausted".into()
        },
        coefficients: beta,
    })
}

fn separates(data: &Dataset, linear: &[f64]) -> bool {
    data.treatment()
        .iter()
        .zip(linear)
        .all(|(t, z)| if *t == 1 { *z > 0.0 } else { *z < 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PluginEta {
    /// `min(eta_att, eta_atc)`.
    pub eta_star: f64,
    /// `1 - max e`: how far the treated side stays from certainty.
    pub eta_att: f64,
    /// `min e`.
    pub eta_atc: f64,
}

pub fn eta_star_plugin(fit: &PropensityFit) -> PluginEta {
    let e_min = fit.fitted.iter().copied().fold(f64::INFINITY, f64::min);
    let e_max = fit.fitted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let eta_att = 1.0 - e_max;
    let eta_atc = e_min;
    PluginEta {
        eta_star: eta_att.min(eta_atc),
        eta_att,
        eta_atc,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Imbalance {
    pub mean_0: Vec<f64>,
    pub mean_1: Vec<f64>,
    /// `|mean_0[k] - mean_1[k]|`.
    pub gaps: Vec<f64>,
    /// Standard error of each gap (unequal-variance two-sample formula).
    pub gap_se: Vec<f64>,
    pub mad: f64,
    pub euclidean_gap: f64,
    pub opnorm_0: f64,
    pub opnorm_1: f64,
    /// False if power iteration hit its iteration cap on either group.
    pub opnorm_converged: bool,
}

impl Imbalance {
    pub fn max_se(&self) -> f64 {
        self.gap_se.iter().copied().fold(0.0, f64::max)
    }

    /// Root-sum-square of the per-coordinate standard errors.
    pub fn euclidean_se(&self) -> f64 {
        norm(&self.gap_se)
    }
}

fn group_moments(data: &Dataset, group: u8) -> (usize, Vec<f64>, Vec<f64>) {
    let p = data.p();
    let mut count = 0;
    let mut mean = vec![0.0; p];
    for (row, t) in data.rows().zip(data.treatment()) {
        if *t == group {
            count += 1;
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut cov = vec![0.0; p * p];
    for (row, t) in data.rows().zip(data.treatment()) {
        if *t == group {
            for i in 0..p {
                let di = row[i] - mean[i];
                for j in 0..=i {
                    cov[i * p + j] += di * (row[j] - mean[j]);
                }
            }
        }
    }
    let denom = if count > 1 { count - 1 } else { 1 } as f64;
    for i in 0..p {
        for j in 0..=i {
            cov[i * p + j] /= denom;
            cov[j * p + i] = cov[i * p + j];
        }
    }
    (count, mean, cov)
}

/// Group-wise sample means and covariances, with the imbalance summaries
/// that the mean-discrepancy bounds speak to.
pub fn mean_imbalance(data: &Dataset) -> Result<Imbalance> {
    data.require_both_groups()?;
    let p = data.p();
    let (n0, mean_0, cov_0) = group_moments(data, 0);
    let (n1, mean_1, cov_1) = group_moments(data, 1);
    let gaps: Vec<f64> = mean_0.iter().zip(&mean_1).map(|(a, b)| (a - b).abs()).collect();
    let gap_se: Vec<f64> = (0..p)
        .map(|k| (cov_0[k * p + k] / n0 as f64 + cov_1[k * p + k] / n1 as f64).sqrt())
        .collect();
    let mad = gaps.iter().sum::<f64>() / p as f64;
    let euclidean_gap = norm(&gaps);
    let opnorm = |cov: Vec<f64>| {
        let m = CovarianceMatrix::Dense { dim: p, data: cov };
        linalg::operator_norm_lenient(&m)
    };
    let (opnorm_0, ok0) = opnorm(cov_0);
    let (opnorm_1, ok1) = opnorm(cov_1);
    Ok(Imbalance {
        mean_0,
        mean_1,
        gaps,
        gap_se,
        mad,
        euclidean_gap,
        opnorm_0,
        opnorm_1,
        opnorm_converged: ok0 && ok1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrimmingPoint {
    pub eta_tilde: f64,
    /// Share of units with `eta_tilde <= e <= 1 - eta_tilde`.
    pub retained_fraction: f64,
    /// `(1 - bayes_accuracy) / eta_tilde`, unclamped.
    pub retention_bound: f64,
    pub holds: bool,
}

/// Retained fraction against the retention bound at each trimming threshold.
///
/// With plug-in quantities the bound is exact: every retained unit has
/// `min(e, 1 - e) >= eta_tilde`, and `1 - bayes_accuracy` is the average of
/// `min(e, 1 - e)` over all units.
pub fn trimming_analysis(fitted: &[f64], eta_grid: &[f64]) -> Result<Vec<TrimmingPoint>> {
    if fitted.is_empty() {
        return Err(EstimationError::Config("no fitted propensities".into()));
    }
    if let Some(bad) = eta_grid.iter().find(|e| !(**e > 0.0 && **e <= 0.5)) {
        return Err(EstimationError::Config(format!("trimming thresholds must lie in (0, 0.5], got {bad}")));
    }
    let n = fitted.len() as f64;
    let accuracy = fitted.iter().map(|e| e.max(1.0 - e)).sum::<f64>() / n;
    let mut sorted: Vec<f64> = eta_grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    Ok(sorted
        .into_iter()
        .map(|eta_tilde| {
            let kept = fitted.iter().filter(|e| **e >= eta_tilde && **e <= 1.0 - eta_tilde).count();
            let retained_fraction = kept as f64 / n;
            let retention_bound = (1.0 - accuracy) / eta_tilde;
            TrimmingPoint {
                eta_tilde,
                retained_fraction,
                retention_bound,
                holds: retained_fraction <= retention_bound + 1e-12,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    /// Candidate overlap bounds to test the data against.
    pub candidate_etas: Vec<f64>,
    /// Trimming thresholds.
    pub trimming_grid: Vec<f64>,
    pub fit: FitOptions,
    /// Width of the sampling allowance, in standard errors.
    pub slack_se: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            candidate_etas: vec![0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5],
            trimming_grid: vec![0.01, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5],
            fit: FitOptions::default(),
            slack_se: 4.0,
        }
    }
}

/// Whether the data can have come from a population with strict overlap at `eta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateVerdict {
    pub eta: f64,
    /// Treatment share used for the band: the sample share moved into
    /// `[eta, 1 - eta]` when it falls just outside.
    pub pi_used: f64,
    pub pi_ok: bool,
    pub accuracy_bound: f64,
    pub accuracy_ok: bool,
    pub mad_bound: f64,
    pub mad_ok: bool,
    pub mean_bound: f64,
    pub mean_ok: bool,
    pub consistent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub converged: bool,
    pub iterations: usize,
    pub final_gradient_norm: f64,
    pub l2_penalty: f64,
    pub coefficients: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapAudit {
    pub n: usize,
    pub p: usize,
    pub treated_fraction: f64,
    /// Fewer rows than covariates.
    pub wide: bool,
    pub eta_star_hat: f64,
    pub eta_att_hat: f64,
    pub eta_atc_hat: f64,
    pub bayes_accuracy_hat: f64,
    pub mad_observed: f64,
    pub euclidean_gap: f64,
    pub opnorm_0: f64,
    pub opnorm_1: f64,
    pub mad_bound_at: BTreeMap<String, f64>,
    pub verdicts: Vec<CandidateVerdict>,
    pub trimming_curve: Vec<TrimmingPoint>,
    pub fit: FitSummary,
}

impl OverlapAudit {
    /// Largest candidate `eta` the data are consistent with, if any.
    pub fn largest_consistent_eta(&self) -> Option<f64> {
        self.verdicts.iter().filter(|v| v.consistent).map(|v| v.eta).fold(None, |acc, e| {
            Some(acc.map_or(e, |a: f64| a.max(e)))
        })
    }
}

fn eta_key(eta: f64) -> String {
    format!("{eta}")
}

/// Fit, plug-in overlap, imbalance and trimming, then a consistency verdict
/// for every candidate `eta`. An inconsistent verdict at `eta` is evidence
/// that the population overlap bound is below `eta`.
pub fn audit(data: &Dataset, config: &AuditConfig) -> Result<OverlapAudit> {
    if let Some(bad) = config.candidate_etas.iter().find(|e| !(**e > 0.0 && **e <= 0.5)) {
        return Err(EstimationError::Config(format!("candidate eta must lie in (0, 0.5], got {bad}")));
    }
    if !(config.slack_se >= 0.0) {
        return Err(EstimationError::Config("slack_se must be nonnegative".into()));
    }
    let fit = fit_logistic_propensity(data, config.fit)?;
    let plug = eta_star_plugin(&fit);
    let imbalance = mean_imbalance(data)?;
    let trimming_curve = trimming_analysis(&fit.fitted, &config.trimming_grid)?;
    let accuracy = fit.bayes_accuracy();
    let (n, p) = (data.n() as f64, data.p());
    let pi_hat = data.treated_fraction();
    let pi_se = (pi_hat * (1.0 - pi_hat) / n).sqrt();
    // Plug-in accuracy carries sampling noise plus fitting noise that grows
    // with the number of fitted coefficients.
    let accuracy_se = 0.5 * ((p as f64 + 1.0) / n).sqrt();
    let slack = config.slack_se;

    let mut verdicts = Vec::with_capacity(config.candidate_etas.len());
    let mut mad_bound_at = BTreeMap::new();
    for &eta in &config.candidate_etas {
        let pi_used = pi_hat.clamp(eta, 1.0 - eta);
        let pi_ok = (pi_used - pi_hat).abs() <= slack * pi_se;
        let band = OverlapSpec::new(eta, pi_used)?.band();
        let accuracy_bound = bounds::classifier_accuracy_bound(eta)?;
        let mean_bound = bounds::mean_discrepancy_bound(imbalance.opnorm_0, imbalance.opnorm_1, band);
        let mad_bound = bounds::mad_bound(p, imbalance.opnorm_0, imbalance.opnorm_1, band)?;
        let accuracy_ok = accuracy <= accuracy_bound + slack * accuracy_se;
        let mad_ok = imbalance.mad <= mad_bound + slack * imbalance.max_se();
        let mean_ok = imbalance.euclidean_gap <= mean_bound + slack * imbalance.euclidean_se();
        mad_bound_at.insert(eta_key(eta), mad_bound);
        verdicts.push(CandidateVerdict {
            eta,
            pi_used,
            pi_ok,
            accuracy_bound,
            accuracy_ok,
            mad_bound,
            mad_ok,
            mean_bound,
            mean_ok,
            consistent: pi_ok && accuracy_ok && mad_ok && mean_ok,
        });
    }
    Ok(OverlapAudit {
        n: data.n(),
        p,
        treated_fraction: pi_hat,
        wide: data.is_wide(),
        eta_star_hat: plug.eta_star,
        eta_att_hat: plug.eta_att,
        eta_atc_hat: plug.eta_atc,
        bayes_accuracy_hat: accuracy,
        mad_observed: imbalance.mad,
        euclidean_gap: imbalance.euclidean_gap,
        opnorm_0: imbalance.opnorm_0,
        opnorm_1: imbalance.opnorm_1,
        mad_bound_at,
        verdicts,
        trimming_curve,
        fit: FitSummary {
            converged: fit.converged,
            iterations: fit.iterations,
            final_gradient_norm: fit.final_gradient_norm,
            l2_penalty: fit.l2_penalty,
            coefficients: fit.coefficients,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::lr_band;
    use crate::processes::{self, ProcessSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    fn null_data(n: usize, p: usize, pi: f64, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n * p).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let t: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<f64>() < pi)).collect();
        Dataset::new(n, p, x, t).unwrap()
    }

    #[test]
    fn null_model_recovery() {
        let data = null_data(100_000, 2, 0.3, 1);
        let fit = fit_logistic_propensity(&data, FitOptions::default()).unwrap();
        assert!(fit.converged);
        let pi_hat = data.treated_fraction();
        close(fit.coefficients[0], (pi_hat / (1.0 - pi_hat)).ln(), 0.02);
        close(fit.coefficients[0], (0.3f64 / 0.7).ln(), 0.05);
        assert!(fit.coefficients[1].abs() < 0.05 && fit.coefficients[2].abs() < 0.05);
        // Unpenalized intercept: fitted values average to the treated share.
        close(fit.fitted.iter().sum::<f64>() / data.n() as f64, pi_hat, 1e-8);
    }

    #[test]
    fn one_dimensional_truth_within_three_standard_errors() {
        let (a, b) = (-0.4, 1.3);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let t: Vec<u8> = x
            .iter()
            .map(|v| u8::from(rng.random::<f64>() < 1.0 / (1.0 + (-(a + b * v)).exp())))
            .collect();
        let data = Dataset::new(n, 1, x.clone(), t).unwrap();
        let fit = fit_logistic_propensity(&data, FitOptions::default()).unwrap();
        // Inverse Fisher information at the truth.
        let (mut i00, mut i01, mut i11) = (0.0, 0.0, 0.0);
        for v in &x {
            let e = 1.0 / (1.0 + (-(a + b * v)).exp());
            let w = e * (1.0 - e);
            i00 += w;
            i01 += w * v;
            i11 += w * v * v;
        }
        let det = i00 * i11 - i01 * i01;
        let se_a = (i11 / det).sqrt();
        let se_b = (i00 / det).sqrt();
        assert!((fit.coefficients[0] - a).abs() <= 3.0 * se_a, "{:?}", fit.coefficients);
        assert!((fit.coefficients[1] - b).abs() <= 3.0 * se_b, "{:?}", fit.coefficients);
    }

    #[test]
    fn separation_is_reported() {
        let x = vec![-2.0, -1.0, -0.5, 0.5, 1.0, 2.0];
        let t = vec![0, 0, 0, 1, 1, 1];
        let data = Dataset::new(6, 1, x, t).unwrap();
        let err = fit_logistic_propensity(
            &data,
            FitOptions {
                l2_penalty: Some(0.0),
                ..FitOptions::default()
            },
        )
        .unwrap_err();
        match err {
            EstimationError::NonConvergence { diagnostic, .. } => assert!(diagnostic.contains("diverging")),
            other => panic!("unexpected {other}"),
        }
        // A small penalty restores a finite fit.
        let fit = fit_logistic_propensity(
            &data,
            FitOptions {
                l2_penalty: Some(0.1),
                ..FitOptions::default()
            },
        )
        .unwrap();
        assert!(fit.fitted.iter().all(|e| *e > 0.0 && *e < 1.0));
    }

    #[test]
    fn fit_rejects_single_group() {
        let data = Dataset::new(3, 1, vec![0.0, 1.0, 2.0], vec![1, 1, 1]).unwrap();
        assert!(matches!(
            fit_logistic_propensity(&data, FitOptions::default()),
            Err(EstimationError::Dataset(DatasetError::EmptyGroup(0)))
        ));
    }

    #[test]
    fn plugin_examples() {
        let p = eta_star_plugin(&PropensityFit::from_fitted(vec![0.5; 4]));
        assert_eq!((p.eta_star, p.eta_att, p.eta_atc), (0.5, 0.5, 0.5));
        let p = eta_star_plugin(&PropensityFit::from_fitted(vec![0.1, 0.5, 0.9]));
        close(p.eta_star, 0.1, 1e-15);
        close(p.eta_att, 0.1, 1e-15);
        close(p.eta_atc, 0.1, 1e-15);
        let p = eta_star_plugin(&PropensityFit::from_fitted(vec![0.2, 0.6, 0.95]));
        close(p.eta_star, 0.05, 1e-15);
        close(p.eta_att, 0.05, 1e-15);
        close(p.eta_atc, 0.2, 1e-15);
    }

    #[test]
    fn imbalance_of_duplicated_rows_is_zero() {
        let x = vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0];
        let data = Dataset::new(4, 2, x, vec![0, 0, 1, 1]).unwrap();
        let m = mean_imbalance(&data).unwrap();
        assert!(m.gaps.iter().all(|g| *g == 0.0));
        assert_eq!(m.mad, 0.0);
        assert_eq!(m.euclidean_gap, 0.0);
    }

    #[test]
    fn budgeted_sample_imbalance_within_bound() {
        let spec = ProcessSpec::LrBudgetedBernoulli { eta: 0.1, pi: 0.5, p: 16 };
        let exact = processes::exact_product_moments(&spec).unwrap();
        let band = lr_band(OverlapSpec::new(0.1, 0.5).unwrap());
        let bound = bounds::mad_bound(16, exact.opnorm_0, exact.opnorm_1, band).unwrap();
        let data = processes::sample(&spec, 100_000, 8).unwrap();
        let m = mean_imbalance(&data).unwrap();
        assert!(m.mad <= bound + 4.0 * m.max_se());
        close(m.mad, exact.mad(), 4.0 * m.max_se());
    }

    #[test]
    fn gaussian_shift_gap_is_root_p() {
        let spec = ProcessSpec::GaussianShift {
            m0: vec![0.0; 8],
            m1: vec![1.0; 8],
            variances: vec![1.0; 8],
            pi: 0.5,
        };
        let data = processes::sample(&spec, 20_000, 2).unwrap();
        let m = mean_imbalance(&data).unwrap();
        close(m.euclidean_gap, 8f64.sqrt(), 0.1);
        let audit = audit(&data, &AuditConfig::default()).unwrap();
        // Unit gaps on 8 covariates are too large for overlap at 0.2 or above.
        for v in audit.verdicts.iter().filter(|v| v.eta >= 0.2) {
            assert!(!v.consistent, "eta {} should be rejected", v.eta);
        }
    }

    #[test]
    fn trimming_examples() {
        let curve = trimming_analysis(&[0.5; 10], &[0.1, 0.3, 0.5]).unwrap();
        for point in &curve {
            assert_eq!(point.retained_fraction, 1.0);
            close(point.retention_bound, 0.5 / point.eta_tilde, 1e-15);
            assert!(point.retention_bound >= 1.0);
        }
        let fitted: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 0.1 } else { 0.9 }).collect();
        let curve = trimming_analysis(&fitted, &[0.2]).unwrap();
        assert_eq!(curve[0].retained_fraction, 0.0);
        close(curve[0].retention_bound, 0.5, 1e-12);
        assert!(trimming_analysis(&fitted, &[0.0]).is_err());
        assert!(trimming_analysis(&[], &[0.1]).is_err());
    }

    #[test]
    fn trimming_on_uniform_propensities_matches_integrals() {
        // e uniform on (0, 1): retained = 1 - 2 eta, E[min(e, 1 - e)] = 1/4.
        let n = 100_000;
        let fitted: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let grid: Vec<f64> = (1..=10).map(|i| i as f64 * 0.05).collect();
        for point in trimming_analysis(&fitted, &grid).unwrap() {
            close(point.retained_fraction, 1.0 - 2.0 * point.eta_tilde, 2.0 / n as f64);
            close(point.retention_bound, 0.25 / point.eta_tilde, 1e-6);
            assert!(point.holds);
        }
    }

    #[test]
    fn trimming_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fitted: Vec<f64> = (0..500).map(|_| rng.random::<f64>()).collect();
        let curve = trimming_analysis(&fitted, &[0.4, 0.1, 0.2, 0.3, 0.05]).unwrap();
        for w in curve.windows(2) {
            assert!(w[0].eta_tilde < w[1].eta_tilde);
            assert!(w[1].retained_fraction <= w[0].retained_fraction);
        }
    }

    #[test]
    fn audit_of_randomized_data_is_consistent_everywhere() {
        let data = null_data(5_000, 3, 0.5, 4);
        let audit = audit(&data, &AuditConfig::default()).unwrap();
        assert!(audit.verdicts.iter().all(|v| v.consistent), "{:#?}", audit.verdicts);
        assert_eq!(audit.eta_star_hat, audit.eta_att_hat.min(audit.eta_atc_hat));
        let again = super::audit(&data, &AuditConfig::default()).unwrap();
        assert_eq!(audit, again);
        assert!(audit.bayes_accuracy_hat >= audit.treated_fraction.max(1.0 - audit.treated_fraction) - 1e-9);
    }

    #[test]
    fn audit_rejects_bad_config() {
        let data = null_data(100, 1, 0.5, 4);
        let config = AuditConfig {
            candidate_etas: vec![0.7],
            ..AuditConfig::default()
        };
        assert!(matches!(audit(&data, &config), Err(EstimationError::Config(_))));
    }
}
