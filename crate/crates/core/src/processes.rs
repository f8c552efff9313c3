//! Generative covariate processes and their exact covariance structure.
//!
//! Each [`ProcessSpec`] describes the covariate law in the control and
//! treated groups (or, for balancing scenarios, the joint law of covariates,
//! score and treatment). Samplers are seeded and deterministic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{self, BoundsError, MomentSummary, OverlapSpec};
use crate::dataset::{Dataset, DatasetError};
use crate::discrete::{DiscreteError, DiscretePair, ProductPair};
use crate::linalg::CovarianceMatrix;

#[derive(Debug, Error)]
pub enum ProcessError {
    #[error("invalid process parameter: {0}")]
    Invalid(String),
    #[error("{0} is not supported for this process")]
    Unsupported(String),
    #[error("sample size must be at least 1")]
    EmptySample,
    #[error(transparent)]
    Bounds(#[from] BoundsError),
    #[error(transparent)]
    Discrete(#[from] DiscreteError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

pub type Result<T> = std::result::Result<T, ProcessError>;

fn half() -> f64 {
    0.5
}

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(ProcessError::Invalid(msg.into()))
}

/// Treatment or control group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Control,
    Treated,
}

/// How a balancing score drives treatment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BalancingKind {
    /// Covariates are iid `Bernoulli(base_prob)`; the propensity depends only
    /// on the first `s` of them, through `propensity[code]` where `code` is
    /// the binary number `x_1 x_2 ... x_s`.
    Sparse {
        s: usize,
        #[serde(default = "half")]
        base_prob: f64,
        propensity: Vec<f64>,
    },
    /// A latent class `U` with probabilities `weights` sets the propensity
    /// `propensity[U]`; given `U`, covariates are iid
    /// `Bernoulli(class_means[U])`.
    LatentClass {
        weights: Vec<f64>,
        propensity: Vec<f64>,
        class_means: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProcessSpec {
    IndependentBernoulli {
        q0: Vec<f64>,
        q1: Vec<f64>,
        #[serde(default = "half")]
        pi: f64,
    },
    LrBudgetedBernoulli {
        eta: f64,
        pi: f64,
        p: usize,
    },
    /// Gaussian location shift; violates strict overlap whenever the means differ.
    GaussianShift {
        m0: Vec<f64>,
        m1: Vec<f64>,
        variances: Vec<f64>,
        #[serde(default = "half")]
        pi: f64,
    },
    /// `X_j = e_j + theta e_{j-1}`, `e_j ~ N(0, sigma2)`, same law in both groups.
    Ma1 {
        theta: f64,
        sigma2: f64,
        p: usize,
        #[serde(default = "half")]
        pi: f64,
    },
    /// `X = L z + sqrt(D) e` with `L` of size `p x rank`, same law in both groups.
    /// Missing loadings default to all ones; missing idiosyncratic variances to zero.
    Factor {
        p: usize,
        rank: usize,
        #[serde(default)]
        loadings: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        idiosyncratic: Option<Vec<f64>>,
        #[serde(default = "half")]
        pi: f64,
    },
    BalancingScenario {
        p: usize,
        scenario: BalancingKind,
    },
}

fn check_open_unit(name: &str, values: &[f64]) -> Result<()> {
    match values.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
        Some(bad) => invalid(format!("{name} entries must lie in (0, 1), got {bad}")),
        None => Ok(()),
    }
}

fn check_closed_unit(name: &str, values: &[f64]) -> Result<()> {
    match values.iter().find(|v| !(**v >= 0.0 && **v <= 1.0)) {
        Some(bad) => invalid(format!("{name} entries must lie in [0, 1], got {bad}")),
        None => Ok(()),
    }
}

fn broadcast(values: &[f64], p: usize, name: &str) -> Result<Vec<f64>> {
    match values.len() {
        1 => Ok(vec![values[0]; p]),
        len if len == p => Ok(values.to_vec()),
        len => invalid(format!("{name} has {len} entries; cannot resize to {p}")),
    }
}

impl ProcessSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ProcessSpec::IndependentBernoulli { .. } => "independent_bernoulli",
            ProcessSpec::LrBudgetedBernoulli { .. } => "lr_budgeted_bernoulli",
            ProcessSpec::GaussianShift { .. } => "gaussian_shift",
            ProcessSpec::Ma1 { .. } => "ma1",
            ProcessSpec::Factor { .. } => "factor",
            ProcessSpec::BalancingScenario { .. } => "balancing_scenario",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ProcessSpec::IndependentBernoulli { q0, .. } => q0.len(),
            ProcessSpec::GaussianShift { m0, .. } => m0.len(),
            ProcessSpec::LrBudgetedBernoulli { p, .. }
            | ProcessSpec::Ma1 { p, .. }
            | ProcessSpec::Factor { p, .. }
            | ProcessSpec::BalancingScenario { p, .. } => *p,
        }
    }

    /// Marginal treatment probability.
    pub fn pi(&self) -> f64 {
        match self {
            ProcessSpec::IndependentBernoulli { pi, .. }
            | ProcessSpec::LrBudgetedBernoulli { pi, .. }
            | ProcessSpec::GaussianShift { pi, .. }
            | ProcessSpec::Ma1 { pi, .. }
            | ProcessSpec::Factor { pi, .. } => *pi,
            ProcessSpec::BalancingScenario { scenario, .. } => match scenario {
                BalancingKind::Sparse {
                    s,
                    base_prob,
                    propensity,
                } => (0..propensity.len())
                    .map(|code| config_probability(code, *s, *base_prob) * propensity[code])
                    .sum(),
                BalancingKind::LatentClass {
                    weights, propensity, ..
                } => weights.iter().zip(propensity).map(|(w, e)| w * e).sum(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check_pi = |pi: f64| {
            if pi > 0.0 && pi < 1.0 {
                Ok(())
            } else {
                invalid(format!("pi must lie in (0, 1), got {pi}"))
            }
        };
        match self {
            ProcessSpec::IndependentBernoulli { q0, q1, pi } => {
                if q0.is_empty() || q0.len() != q1.len() {
                    return invalid("q0 and q1 must be nonempty and of equal length");
                }
                check_open_unit("q0", q0)?;
                check_open_unit("q1", q1)?;
                check_pi(*pi)
            }
            ProcessSpec::LrBudgetedBernoulli { eta, pi, p } => {
                OverlapSpec::new(*eta, *pi)?;
                if *p == 0 {
                    return invalid("p must be at least 1");
                }
                Ok(())
            }
            ProcessSpec::GaussianShift { m0, m1, variances, pi } => {
                if m0.is_empty() || m0.len() != m1.len() || m0.len() != variances.len() {
                    return invalid("m0, m1 and variances must be nonempty and of equal length");
                }
                if variances.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                    return invalid("variances must be positive and finite");
                }
                if m0.iter().chain(m1).any(|v| !v.is_finite()) {
                    return invalid("means must be finite");
                }
                check_pi(*pi)
            }
            ProcessSpec::Ma1 { theta, sigma2, p, pi } => {
                if !(*theta > -1.0 && *theta < 1.0) {
                    return invalid(format!("theta must lie in (-1, 1), got {theta}"));
                }
                if !(*sigma2 > 0.0) || !sigma2.is_finite() {
                    return invalid("sigma2 must be positive and finite");
                }
                if *p == 0 {
                    return invalid("p must be at least 1");
                }
                check_pi(*pi)
            }
            ProcessSpec::Factor {
                p,
                rank,
                loadings,
                idiosyncratic,
                pi,
            } => {
                if *p == 0 || *rank == 0 || rank > p {
                    return invalid(format!("factor model needs 1 <= rank <= p, got rank {rank}, p {p}"));
                }
                if let Some(l) = loadings {
                    if l.len() != *p || l.iter().any(|row| row.len() != *rank) {
                        return invalid(format!("loadings must be {p} rows of {rank} values"));
                    }
                }
                if let Some(d) = idiosyncratic {
                    if d.len() != *p || d.iter().any(|v| !(*v >= 0.0)) {
                        return invalid(format!("idiosyncratic must be {p} nonnegative values"));
                    }
                }
                check_pi(*pi)
            }
            ProcessSpec::BalancingScenario { p, scenario } => match scenario {
                BalancingKind::Sparse {
                    s,
                    base_prob,
                    propensity,
                } => {
                    if s > p {
                        return invalid(format!("sparse score uses s = {s} > p = {p} covariates"));
                    }
                    if *s > 16 {
                        return invalid("sparse score support must be enumerable (s <= 16)");
                    }
                    if propensity.len() != 1 << s {
                        return invalid(format!("sparse propensity needs 2^{s} entries, got {}", propensity.len()));
                    }
                    check_open_unit("base_prob", &[*base_prob])?;
                    check_closed_unit("propensity", propensity)?;
                    check_pi(self.pi())
                }
                BalancingKind::LatentClass {
                    weights,
                    propensity,
                    class_means,
                } => {
                    let k = weights.len();
                    if *p == 0 || k == 0 || propensity.len() != k || class_means.len() != k {
                        return invalid("latent classes need matching weights, propensity and class_means");
                    }
                    check_closed_unit("weights", weights)?;
                    if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                        return invalid("latent class weights must sum to 1");
                    }
                    check_closed_unit("propensity", propensity)?;
                    check_open_unit("class_means", class_means)?;
                    check_pi(self.pi())
                }
            },
        }
    }

    /// The same family at dimension `p`, used by dimension sweeps. Vectors of
    /// length one are broadcast.
    pub fn with_dim(&self, p: usize) -> Result<Self> {
        let mut next = self.clone();
        match &mut next {
            ProcessSpec::IndependentBernoulli { q0, q1, .. } => {
                *q0 = broadcast(q0, p, "q0")?;
                *q1 = broadcast(q1, p, "q1")?;
            }
            ProcessSpec::GaussianShift { m0, m1, variances, .. } => {
                *m0 = broadcast(m0, p, "m0")?;
                *m1 = broadcast(m1, p, "m1")?;
                *variances = broadcast(variances, p, "variances")?;
            }
            ProcessSpec::LrBudgetedBernoulli { p: dim, .. }
            | ProcessSpec::Ma1 { p: dim, .. }
            | ProcessSpec::BalancingScenario { p: dim, .. } => *dim = p,
            ProcessSpec::Factor {
                p: dim,
                loadings,
                idiosyncratic,
                ..
            } => {
                if loadings.is_some() {
                    return invalid("explicit factor loadings cannot be resized");
                }
                if let Some(d) = idiosyncratic {
                    *d = broadcast(d, p, "idiosyncratic")?;
                }
                *dim = p;
            }
        }
        next.validate()?;
        Ok(next)
    }

    /// Independent-Bernoulli form of the spec (allocating the budget for
    /// `lr_budgeted_bernoulli`), if it has one.
    pub fn as_independent(&self) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        match self {
            ProcessSpec::IndependentBernoulli { q0, q1, pi } => Ok((q0.clone(), q1.clone(), *pi)),
            ProcessSpec::LrBudgetedBernoulli { eta, pi, p } => match lr_budget_allocator(*eta, *pi, *p)? {
                ProcessSpec::IndependentBernoulli { q0, q1, pi } => Ok((q0, q1, pi)),
                _ => unreachable!("allocator returns an independent spec"),
            },
            other => Err(ProcessError::Unsupported(format!("independent form of {}", other.name()))),
        }
    }
}

/// Splits the log-likelihood-ratio budget of the overlap regime equally
/// across `p` Bernoulli coordinates.
///
/// Each coordinate has likelihood ratio `exp(+L)` on outcome 1 and
/// `exp(-L)` on outcome 0, with `L = min(log b_max, -log b_min) / p`, which
/// forces `q0 = 1 / (1 + e^L)` and `q1 = e^L / (1 + e^L)`. The joint log
/// ratio therefore stays within `[-pL, pL]`, inside the band.
pub fn lr_budget_allocator(eta: f64, pi: f64, p: usize) -> Result<ProcessSpec> {
    let spec = OverlapSpec::new(eta, pi)?;
    if p == 0 {
        return invalid("p must be at least 1");
    }
    let band = bounds::lr_band(spec);
    let budget = band.b_max().ln().min(-band.b_min().ln()) / p as f64;
    let q1 = 1.0 / (1.0 + (-budget).exp());
    let q0 = 1.0 / (1.0 + budget.exp());
    Ok(ProcessSpec::IndependentBernoulli {
        q0: vec![q0; p],
        q1: vec![q1; p],
        pi,
    })
}

/// Interval-arithmetic certificate for an independent Bernoulli family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrCertificate {
    /// Smallest joint log-likelihood ratio over all `2^p` outcomes.
    pub log_lr_min: f64,
    /// Largest joint log-likelihood ratio over all `2^p` outcomes.
    pub log_lr_max: f64,
    /// Sum over coordinates of the largest absolute per-coordinate log ratio.
    pub abs_budget: f64,
    /// Exact strict-overlap bound of the joint law.
    pub eta_star: f64,
}

pub fn lr_certificate(q0: &[f64], q1: &[f64], pi: f64) -> LrCertificate {
    let mut lo = 0.0;
    let mut hi = 0.0;
    let mut abs_budget = 0.0;
    for (a, b) in q0.iter().zip(q1) {
        let one = (b / a).ln();
        let zero = ((1.0 - b) / (1.0 - a)).ln();
        lo += one.min(zero);
        hi += one.max(zero);
        abs_budget += one.abs().max(zero.abs());
    }
    let prior = (pi / (1.0 - pi)).ln();
    let logistic = |z: f64| 1.0 / (1.0 + (-z).exp());
    let e_min = logistic(prior + lo);
    let e_max = logistic(prior + hi);
    LrCertificate {
        log_lr_min: lo,
        log_lr_max: hi,
        abs_budget,
        eta_star: e_min.min(1.0 - e_max),
    }
}

/// Analytic covariance of the group's covariate law.
pub fn covariance(spec: &ProcessSpec, group: Group) -> Result<CovarianceMatrix> {
    spec.validate()?;
    let out = match spec {
        ProcessSpec::IndependentBernoulli { .. } | ProcessSpec::LrBudgetedBernoulli { .. } => {
            let (q0, q1, _) = spec.as_independent()?;
            let q = if group == Group::Control { q0 } else { q1 };
            let variances: Vec<f64> = q.iter().map(|v| v * (1.0 - v)).collect();
            CovarianceMatrix::diagonal(&variances).map_err(|e| ProcessError::Invalid(e.to_string()))?
        }
        ProcessSpec::GaussianShift { variances, .. } => {
            CovarianceMatrix::diagonal(variances).map_err(|e| ProcessError::Invalid(e.to_string()))?
        }
        ProcessSpec::Ma1 { theta, sigma2, p, .. } => CovarianceMatrix::Toeplitz {
            dim: *p,
            band: if *p > 1 {
                vec![sigma2 * (1.0 + theta * theta), sigma2 * theta]
            } else {
                vec![sigma2 * (1.0 + theta * theta)]
            },
        },
        ProcessSpec::Factor {
            p,
            rank,
            loadings,
            idiosyncratic,
            ..
        } => CovarianceMatrix::LowRank {
            dim: *p,
            rank: *rank,
            loadings: match loadings {
                Some(rows) => rows.iter().flatten().copied().collect(),
                None => vec![1.0; p * rank],
            },
            diagonal: idiosyncratic.clone().unwrap_or_else(|| vec![0.0; *p]),
        },
        ProcessSpec::BalancingScenario { .. } => {
            return Err(ProcessError::Unsupported(
                "analytic group covariance of a balancing scenario".into(),
            ))
        }
    };
    Ok(out)
}

/// Exact means and covariance operator norms for independent Bernoulli families.
pub fn exact_product_moments(spec: &ProcessSpec) -> Result<MomentSummary> {
    spec.validate()?;
    let (q0, q1, _) = spec.as_independent()?;
    let max_var = |q: &[f64]| q.iter().map(|v| v * (1.0 - v)).fold(0.0f64, f64::max);
    let (o0, o1) = (max_var(&q0), max_var(&q1));
    Ok(MomentSummary::new(q0, q1, o0, o1)?)
}

/// The family as a product of per-coordinate discrete pairs.
pub fn product_pair(spec: &ProcessSpec) -> Result<ProductPair> {
    spec.validate()?;
    let (q0, q1, pi) = spec.as_independent()?;
    let coords = q0
        .iter()
        .zip(&q1)
        .map(|(a, b)| DiscretePair::from_masses(vec![1.0 - a, *a], vec![1.0 - b, *b], pi))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(ProductPair::new(coords)?)
}

fn config_probability(code: usize, s: usize, base: f64) -> f64 {
    let ones = (code as u64).count_ones() as i32;
    base.powi(ones) * (1.0 - base).powi(s as i32 - ones)
}

fn config_code(x: &[f64], s: usize) -> usize {
    x[..s].iter().fold(0, |acc, v| (acc << 1) | usize::from(*v > 0.5))
}

fn ln_binomial(n: usize, k: usize) -> f64 {
    let lgamma_int = |m: usize| (1..=m).map(|i| (i as f64).ln()).sum::<f64>();
    lgamma_int(n) - lgamma_int(k) - lgamma_int(n - k)
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn ln_or_neg_inf(v: f64) -> f64 {
    if v > 0.0 {
        v.ln()
    } else {
        f64::NEG_INFINITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalancingReport {
    /// Strict-overlap bound of the propensity as a function of the score.
    pub eta_star_score: f64,
    /// Strict-overlap bound of the propensity as a function of all covariates.
    pub eta_star_joint: f64,
    /// Largest gap between the covariate-level propensity computed by Bayes'
    /// rule on the group laws and by projecting the score propensity.
    pub projection_gap: f64,
    pub pi: f64,
    /// Number of enumerated covariate cells.
    pub cells: usize,
}

/// Exact overlap of a balancing scenario on the score and covariate scales.
///
/// The covariate-level propensity is computed twice: by Bayes' rule from the
/// group-conditional covariate laws, and as the conditional expectation of
/// the score-level propensity given the covariates.
pub fn balancing_overlap_check(spec: &ProcessSpec) -> Result<BalancingReport> {
    spec.validate()?;
    let ProcessSpec::BalancingScenario { p, scenario } = spec else {
        return Err(ProcessError::Unsupported(format!("balancing check of {}", spec.name())));
    };
    let p = *p;
    let pi = spec.pi();
    let prior = (pi / (1.0 - pi)).ln();
    let side = |e: f64| e.min(1.0 - e);
    let mut eta_star_score = f64::INFINITY;
    let mut eta_star_joint = f64::INFINITY;
    let mut gap = 0.0f64;
    let mut cells = 0;
    match scenario {
        BalancingKind::Sparse {
            s,
            base_prob,
            propensity,
        } => {
            let tail = p - s;
            for (code, &e_score) in propensity.iter().enumerate() {
                let mass = config_probability(code, *s, *base_prob);
                if mass == 0.0 {
                    continue;
                }
                eta_star_score = eta_star_score.min(side(e_score));
                for ones in 0..=tail {
                    let ln_tail = ln_binomial(tail, ones)
                        + ones as f64 * base_prob.ln()
                        + (tail - ones) as f64 * (1.0 - base_prob).ln();
                    let ln_cell = mass.ln() + ln_tail;
                    // Group-conditional cell masses.
                    let ln_p1 = ln_cell + ln_or_neg_inf(e_score) - pi.ln();
                    let ln_p0 = ln_cell + ln_or_neg_inf(1.0 - e_score) - (1.0 - pi).ln();
                    let e_bayes = bayes_propensity(prior, ln_p1, ln_p0);
                    gap = gap.max((e_bayes - e_score).abs());
                    eta_star_joint = eta_star_joint.min(side(e_bayes));
                    cells += 1;
                }
            }
        }
        BalancingKind::LatentClass {
            weights,
            propensity,
            class_means,
        } => {
            for (w, e) in weights.iter().zip(propensity) {
                if *w > 0.0 {
                    eta_star_score = eta_star_score.min(side(*e));
                }
            }
            // Given the class, the count of ones is sufficient for X.
            for ones in 0..=p {
                let ln_lik: Vec<f64> = class_means
                    .iter()
                    .map(|m| ones as f64 * m.ln() + (p - ones) as f64 * (1.0 - m).ln())
                    .collect();
                let ln_joint_treated: Vec<f64> = weights
                    .iter()
                    .zip(propensity)
                    .zip(&ln_lik)
                    .map(|((w, e), l)| ln_or_neg_inf(*w) + ln_or_neg_inf(*e) + l)
                    .collect();
                let ln_joint_control: Vec<f64> = weights
                    .iter()
                    .zip(propensity)
                    .zip(&ln_lik)
                    .map(|((w, e), l)| ln_or_neg_inf(*w) + ln_or_neg_inf(1.0 - *e) + l)
                    .collect();
                let ln_p1 = log_sum_exp(&ln_joint_treated) - pi.ln();
                let ln_p0 = log_sum_exp(&ln_joint_control) - (1.0 - pi).ln();
                let e_bayes = bayes_propensity(prior, ln_p1, ln_p0);

                // Projection: posterior class weights given X, then average e(U).
                let ln_post: Vec<f64> = weights.iter().zip(&ln_lik).map(|(w, l)| ln_or_neg_inf(*w) + l).collect();
                let norm = log_sum_exp(&ln_post);
                let e_proj: f64 = ln_post.iter().zip(propensity).map(|(l, e)| (l - norm).exp() * e).sum();

                gap = gap.max((e_bayes - e_proj).abs());
                eta_star_joint = eta_star_joint.min(side(e_bayes));
                cells += 1;
            }
        }
    }
    Ok(BalancingReport {
        eta_star_score,
        eta_star_joint,
        projection_gap: gap,
        pi,
        cells,
    })
}

fn bayes_propensity(prior: f64, ln_p1: f64, ln_p0: f64) -> f64 {
    if ln_p1 == f64::NEG_INFINITY {
        return 0.0;
    }
    if ln_p0 == f64::NEG_INFINITY {
        return 1.0;
    }
    1.0 / (1.0 + (-(prior + ln_p1 - ln_p0)).exp())
}

fn bernoulli<R: Rng + ?Sized>(rng: &mut R, q: f64) -> bool {
    rng.random::<f64>() < q
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Draws `n` units from the process with a seeded ChaCha stream.
pub fn sample(spec: &ProcessSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(ProcessError::EmptySample);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = spec.dim();
    let mut x = Vec::with_capacity(n * p);
    let mut t = Vec::with_capacity(n);
    match spec {
        ProcessSpec::IndependentBernoulli { .. } | ProcessSpec::LrBudgetedBernoulli { .. } => {
            let (q0, q1, pi) = spec.as_independent()?;
            for _ in 0..n {
                let treated = bernoulli(&mut rng, pi);
                let q = if treated { &q1 } else { &q0 };
                t.push(u8::from(treated));
                x.extend(q.iter().map(|qk| f64::from(u8::from(bernoulli(&mut rng, *qk)))));
            }
        }
        ProcessSpec::GaussianShift { m0, m1, variances, pi } => {
            for _ in 0..n {
                let treated = bernoulli(&mut rng, *pi);
                let m = if treated { m1 } else { m0 };
                t.push(u8::from(treated));
                for (mk, vk) in m.iter().zip(variances) {
                    x.push(mk + vk.sqrt() * normal(&mut rng));
                }
            }
        }
        ProcessSpec::Ma1 { theta, sigma2, pi, .. } => {
            let sd = sigma2.sqrt();
            for _ in 0..n {
                t.push(u8::from(bernoulli(&mut rng, *pi)));
                let mut previous = sd * normal(&mut rng);
                for _ in 0..p {
                    let current = sd * normal(&mut rng);
                    x.push(current + theta * previous);
                    previous = current;
                }
            }
        }
        ProcessSpec::Factor {
            rank,
            loadings,
            idiosyncratic,
            pi,
            ..
        } => {
            let mut z = vec![0.0; *rank];
            for _ in 0..n {
                t.push(u8::from(bernoulli(&mut rng, *pi)));
                z.iter_mut().for_each(|v| *v = normal(&mut rng));
                for j in 0..p {
                    let common: f64 = match loadings {
                        Some(rows) => rows[j].iter().zip(&z).map(|(a, b)| a * b).sum(),
                        None => z.iter().sum(),
                    };
                    let noise = idiosyncratic.as_ref().map_or(0.0, |d| d[j].sqrt() * normal(&mut rng));
                    x.push(common + noise);
                }
            }
        }
        ProcessSpec::BalancingScenario { scenario, .. } => match scenario {
            BalancingKind::Sparse {
                s,
                base_prob,
                propensity,
            } => {
                let mut row = vec![0.0; p];
                for _ in 0..n {
                    // Score first, then treatment from the score, then the rest.
                    for v in row.iter_mut().take(*s) {
                        *v = f64::from(u8::from(bernoulli(&mut rng, *base_prob)));
                    }
                    let e = propensity[config_code(&row, *s)];
                    t.push(u8::from(bernoulli(&mut rng, e)));
                    for v in row.iter_mut().skip(*s) {
                        *v = f64::from(u8::from(bernoulli(&mut rng, *base_prob)));
                    }
                    x.extend_from_slice(&row);
                }
            }
            BalancingKind::LatentClass {
                weights,
                propensity,
                class_means,
            } => {
                for _ in 0..n {
                    let u = rng.random::<f64>();
                    let mut class = weights.len() - 1;
                    let mut acc = 0.0;
                    for (k, w) in weights.iter().enumerate() {
                        acc += w;
                        if u < acc {
                            class = k;
                            break;
                        }
                    }
                    t.push(u8::from(bernoulli(&mut rng, propensity[class])));
                    for _ in 0..p {
                        x.push(f64::from(u8::from(bernoulli(&mut rng, class_means[class]))));
                    }
                }
            }
        },
    }
    Ok(Dataset::new(n, p, x, t)?)
}
