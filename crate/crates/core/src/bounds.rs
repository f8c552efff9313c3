//! Closed-form consequences of strict overlap.
//!
//! Strict overlap with bound `eta` (every propensity score lies in
//! `[eta, 1 - eta]`) is equivalent, through Bayes' theorem, to a two-sided
//! bound on the density ratio `dP1/dP0` between the treated and control
//! covariate laws. Every calculator here starts from that likelihood-ratio
//! band and evaluates the extremal value of some f-divergence or moment
//! discrepancy that the band allows. Nothing in this module samples or
//! touches data.
//!
//! Direction convention: `forward` always bounds `D(P1 || P0)`, i.e. an
//! expectation under `P0` of a function of `dP1/dP0`; `reverse` bounds
//! `D(P0 || P1)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundsError {
    #[error("eta must lie in (0, 0.5], got {0}")]
    Eta(f64),
    #[error("pi must lie in [eta, 1 - eta] = [{eta}, {upper}], got {pi}")]
    Pi { pi: f64, eta: f64, upper: f64 },
    #[error("likelihood-ratio band must satisfy 0 < b_min <= 1 <= b_max, got ({b_min}, {b_max})")]
    Band { b_min: f64, b_max: f64 },
    #[error("alpha must be {requirement}, got {alpha}")]
    Alpha { alpha: f64, requirement: &'static str },
    #[error("dimension must be at least 1")]
    Dimension,
    #[error("{name} must be a probability in {range}, got {value}")]
    Probability {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("{name} must be nonnegative, got {value}")]
    Negative { name: &'static str, value: f64 },
}

pub type Result<T> = std::result::Result<T, BoundsError>;

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta <= 0.5 {
        Ok(())
    } else {
        Err(BoundsError::Eta(eta))
    }
}

/// An overlap regime: propensity bound `eta` and marginal treatment
/// probability `pi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapSpec {
    eta: f64,
    pi: f64,
}

impl OverlapSpec {
    pub fn new(eta: f64, pi: f64) -> Result<Self> {
        check_eta(eta)?;
        // Strict overlap forces the marginal treatment rate into the same interval.
        if !(pi >= eta && pi <= 1.0 - eta) {
            return Err(BoundsError::Pi {
                pi,
                eta,
                upper: 1.0 - eta,
            });
        }
        Ok(Self { eta, pi })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn pi(&self) -> f64 {
        self.pi
    }

    pub fn band(&self) -> LikelihoodRatioBand {
        lr_band(*self)
    }
}

/// Bounds `b_min <= dP1/dP0 <= b_max` on the covariate likelihood ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodRatioBand {
    b_min: f64,
    b_max: f64,
}

impl LikelihoodRatioBand {
    pub fn new(b_min: f64, b_max: f64) -> Result<Self> {
        if b_min > 0.0 && b_min <= 1.0 && b_max >= 1.0 && b_max.is_finite() {
            Ok(Self { b_min, b_max })
        } else {
            Err(BoundsError::Band { b_min, b_max })
        }
    }

    /// The band of perfect overlap, `(1, 1)`.
    pub fn unit() -> Self {
        Self {
            b_min: 1.0,
            b_max: 1.0,
        }
    }

    pub fn b_min(&self) -> f64 {
        self.b_min
    }

    pub fn b_max(&self) -> f64 {
        self.b_max
    }

    /// True when the band pins the ratio to 1, so both laws coincide.
    pub fn is_degenerate(&self) -> bool {
        self.b_min == self.b_max
    }

    /// Band on the inverse ratio `dP0/dP1`.
    pub fn inverse(&self) -> Self {
        Self {
            b_min: 1.0 / self.b_max,
            b_max: 1.0 / self.b_min,
        }
    }

    pub fn contains(&self, ratio: f64) -> bool {
        ratio >= self.b_min && ratio <= self.b_max
    }
}

/// Which divergence a pair of bounds refers to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DivergenceKind {
    Chi2,
    Kl,
    ChiAlpha { alpha: f64 },
    Tv,
    Custom,
}

impl DivergenceKind {
    /// Short stable label used in reports.
    pub fn label(&self) -> String {
        match self {
            DivergenceKind::Chi2 => "chi2".to_string(),
            DivergenceKind::Kl => "kl".to_string(),
            DivergenceKind::ChiAlpha { alpha } => format!("chi_alpha_{alpha}"),
            DivergenceKind::Tv => "tv".to_string(),
            DivergenceKind::Custom => "custom_f".to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceBounds {
    /// Bound on `D(P1 || P0)`.
    pub forward: f64,
    /// Bound on `D(P0 || P1)`.
    pub reverse: f64,
    pub kind: DivergenceKind,
}

/// Direction of a divergence or of the base measure in a moment bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `D(P1 || P0)`: expectation under the control law `P0`.
    Forward,
    /// `D(P0 || P1)`: expectation under the treated law `P1`.
    Reverse,
}

impl Direction {
    pub fn label(&self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Reverse => "reverse",
        }
    }

    pub const BOTH: [Direction; 2] = [Direction::Forward, Direction::Reverse];
}

impl DivergenceBounds {
    pub fn get(&self, direction: Direction) -> f64 {
        match direction {
            Direction::Forward => self.forward,
            Direction::Reverse => self.reverse,
        }
    }
}

/// Mean vectors and covariance operator norms of the two covariate laws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSummary {
    pub mean_0: Vec<f64>,
    pub mean_1: Vec<f64>,
    pub opnorm_0: f64,
    pub opnorm_1: f64,
}

impl MomentSummary {
    pub fn new(mean_0: Vec<f64>, mean_1: Vec<f64>, opnorm_0: f64, opnorm_1: f64) -> Result<Self> {
        if mean_0.is_empty() || mean_0.len() != mean_1.len() {
            return Err(BoundsError::Dimension);
        }
        for (name, value) in [("opnorm_0", opnorm_0), ("opnorm_1", opnorm_1)] {
            if !(value >= 0.0) {
                return Err(BoundsError::Negative { name, value });
            }
        }
        Ok(Self {
            mean_0,
            mean_1,
            opnorm_0,
            opnorm_1,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean_0.len()
    }

    /// Euclidean norm of `mean_0 - mean_1`.
    pub fn mean_discrepancy(&self) -> f64 {
        self.mean_0
            .iter()
            .zip(&self.mean_1)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Average absolute per-coordinate mean gap.
    pub fn mad(&self) -> f64 {
        self.mean_0
            .iter()
            .zip(&self.mean_1)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.dim() as f64
    }
}

pub fn lr_band(spec: OverlapSpec) -> LikelihoodRatioBand {
    let odds = (1.0 - spec.pi) / spec.pi;
    let eta_odds = spec.eta / (1.0 - spec.eta);
    let b_min = odds * eta_odds;
    let b_max = odds / eta_odds;
    // Rounding can push a degenerate band a hair off 1.
    LikelihoodRatioBand {
        b_min: b_min.min(1.0),
        b_max: b_max.max(1.0),
    }
}

pub fn chi2_bounds(band: LikelihoodRatioBand) -> DivergenceBounds {
    let (lo, hi) = (band.b_min, band.b_max);
    DivergenceBounds {
        forward: (1.0 - lo) * (hi - 1.0),
        reverse: (1.0 - 1.0 / hi) * (1.0 / lo - 1.0),
        kind: DivergenceKind::Chi2,
    }
}

/// `(1 - 2 eta) |log(eta / (1 - eta))|`, the common value of both KL bounds
/// under balanced assignment.
pub fn kl_bound_balanced(eta: f64) -> Result<f64> {
    check_eta(eta)?;
    Ok((1.0 - 2.0 * eta) * (eta / (1.0 - eta)).ln().abs())
}

/// `1 / (eta (1 - eta)) - 4`, the common value of both chi-square bounds
/// under balanced assignment.
pub fn chi2_bound_balanced(eta: f64) -> Result<f64> {
    check_eta(eta)?;
    Ok(1.0 / (eta * (1.0 - eta)) - 4.0)
}

pub fn kl_bounds(band: LikelihoodRatioBand) -> DivergenceBounds {
    if band.is_degenerate() {
        return DivergenceBounds {
            forward: 0.0,
            reverse: 0.0,
            kind: DivergenceKind::Kl,
        };
    }
    let (lo, hi) = (band.b_min, band.b_max);
    let width = hi - lo;
    let forward = ((1.0 - lo) * hi * hi.ln() + (hi - 1.0) * lo * lo.ln()) / width;
    let reverse = -((1.0 - lo) * hi.ln() + (hi - 1.0) * lo.ln()) / width;
    DivergenceBounds {
        forward: forward.max(0.0),
        reverse: reverse.max(0.0),
        kind: DivergenceKind::Kl,
    }
}

fn chi_alpha_one_side(lo: f64, hi: f64, alpha: f64) -> f64 {
    if hi == lo {
        return 0.0;
    }
    let below = 1.0 - lo;
    let above = hi - 1.0;
    above * below * (below.powf(alpha - 1.0) + above.powf(alpha - 1.0)) / (hi - lo)
}

/// Bounds on `E_{P0} |dP1/dP0 - 1|^alpha` (forward) and the mirrored quantity.
pub fn chi_alpha_bounds(band: LikelihoodRatioBand, alpha: f64) -> Result<DivergenceBounds> {
    if !(alpha >= 1.0) || !alpha.is_finite() {
        return Err(BoundsError::Alpha {
            alpha,
            requirement: ">= 1",
        });
    }
    let inv = band.inverse();
    Ok(DivergenceBounds {
        forward: chi_alpha_one_side(band.b_min, band.b_max, alpha),
        reverse: chi_alpha_one_side(inv.b_min, inv.b_max, alpha),
        kind: DivergenceKind::ChiAlpha { alpha },
    })
}

/// Total-variation bound; identical in both directions.
pub fn tv_bounds(band: LikelihoodRatioBand) -> DivergenceBounds {
    let value = if band.is_degenerate() {
        0.0
    } else {
        (band.b_max - 1.0) * (1.0 - band.b_min) / (band.b_max - band.b_min)
    };
    DivergenceBounds {
        forward: value,
        reverse: value,
        kind: DivergenceKind::Tv,
    }
}

/// A convex generator `f` with its minimum at 1, evaluated pointwise.
pub trait ConvexGenerator {
    fn eval(&self, t: f64) -> f64;
}

impl<F: Fn(f64) -> f64> ConvexGenerator for F {
    fn eval(&self, t: f64) -> f64 {
        self(t)
    }
}

/// Mixes the generator's values at the band endpoints with the weights of the
/// two-point ratio law that has mean 1.
fn endpoint_mix<F: ConvexGenerator + ?Sized>(lo: f64, hi: f64, f: &F) -> f64 {
    if hi == lo {
        return f.eval(1.0);
    }
    ((hi - 1.0) * f.eval(lo) + (1.0 - lo) * f.eval(hi)) / (hi - lo)
}

/// Extremal bound on any f-divergence under a likelihood-ratio band.
///
/// The caller vouches that `f` is convex with minimum at 1. For the
/// degenerate band both sides reduce to `f(1)`.
pub fn rukhin_f_bound<F: ConvexGenerator + ?Sized>(
    band: LikelihoodRatioBand,
    f: &F,
) -> DivergenceBounds {
    let inv = band.inverse();
    DivergenceBounds {
        forward: endpoint_mix(band.b_min, band.b_max, f),
        reverse: endpoint_mix(inv.b_min, inv.b_max, f),
        kind: DivergenceKind::Custom,
    }
}

/// `sqrt(var) * sqrt(chi2)` with `0 * inf` read as 0: a zero chi-square
/// bound means the two laws coincide, so the discrepancy is 0 regardless of
/// the variance.
fn cauchy_schwarz_term(variance: f64, chi2: f64) -> f64 {
    if chi2 == 0.0 || variance == 0.0 {
        0.0
    } else {
        variance.sqrt() * chi2.sqrt()
    }
}

/// Upper bound on `|E_{P1} g - E_{P0} g|` from the variances of `g` under
/// the two laws. Infinite variances are allowed; if both are infinite the
/// bound is `+inf`.
pub fn functional_discrepancy_bound(var_0: f64, var_1: f64, band: LikelihoodRatioBand) -> Result<f64> {
    for (name, value) in [("var_0", var_0), ("var_1", var_1)] {
        if !(value >= 0.0) {
            return Err(BoundsError::Negative { name, value });
        }
    }
    let chi2 = chi2_bounds(band);
    Ok(cauchy_schwarz_term(var_0, chi2.forward).min(cauchy_schwarz_term(var_1, chi2.reverse)))
}

/// Bound on the Euclidean distance between the group mean vectors, given
/// the operator norms of the two covariance matrices. Free of dimension.
pub fn mean_discrepancy_bound(opnorm_0: f64, opnorm_1: f64, band: LikelihoodRatioBand) -> f64 {
    let chi2 = chi2_bounds(band);
    cauchy_schwarz_term(opnorm_0, chi2.forward).min(cauchy_schwarz_term(opnorm_1, chi2.reverse))
}

/// Bound on the average absolute per-covariate mean gap in dimension `p`.
pub fn mad_bound(p: usize, opnorm_0: f64, opnorm_1: f64, band: LikelihoodRatioBand) -> Result<f64> {
    if p == 0 {
        return Err(BoundsError::Dimension);
    }
    Ok(mean_discrepancy_bound(opnorm_0, opnorm_1, band) / (p as f64).sqrt())
}

/// Hölder-type discrepancy bound: `central_moment_q` is the `q`-norm of
/// `g - C` under the base measure selected by `direction`, with
/// `q = alpha / (alpha - 1)`.
pub fn holder_discrepancy_bound(
    central_moment_q: f64,
    alpha: f64,
    band: LikelihoodRatioBand,
    direction: Direction,
) -> Result<f64> {
    if !(alpha > 1.0) {
        return Err(BoundsError::Alpha {
            alpha,
            requirement: "> 1",
        });
    }
    if !(central_moment_q >= 0.0) {
        return Err(BoundsError::Negative {
            name: "central_moment_q",
            value: central_moment_q,
        });
    }
    let divergence = chi_alpha_bounds(band, alpha)?.get(direction);
    if central_moment_q == 0.0 || divergence == 0.0 {
        return Ok(0.0);
    }
    Ok(central_moment_q * divergence.powf(1.0 / alpha))
}

/// Highest accuracy any classifier of treatment from covariates can reach.
pub fn classifier_accuracy_bound(eta: f64) -> Result<f64> {
    check_eta(eta)?;
    Ok(1.0 - eta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetentionBound {
    /// `(1 - accuracy) / eta_tilde`; may exceed 1, in which case it is vacuous.
    pub raw: f64,
    /// `raw` clamped into `[0, 1]`.
    pub clamped: f64,
}

impl RetentionBound {
    pub fn is_vacuous(&self) -> bool {
        self.raw >= 1.0
    }
}

/// Largest fraction of units a trimming rule at `eta_tilde` can keep, given
/// the Bayes accuracy of classifying treatment from covariates.
pub fn trimming_retention_bound(bayes_accuracy: f64, eta_tilde: f64) -> Result<RetentionBound> {
    if !(0.5..=1.0).contains(&bayes_accuracy) {
        return Err(BoundsError::Probability {
            name: "bayes_accuracy",
            value: bayes_accuracy,
            range: "[0.5, 1]",
        });
    }
    if !(eta_tilde > 0.0 && eta_tilde <= 0.5) {
        return Err(BoundsError::Probability {
            name: "eta_tilde",
            value: eta_tilde,
            range: "(0, 0.5]",
        });
    }
    let raw = (1.0 - bayes_accuracy) / eta_tilde;
    Ok(RetentionBound {
        raw,
        clamped: raw.clamp(0.0, 1.0),
    })
}

fn inverse_weighted(variance: f64, weight: f64) -> f64 {
    if variance == 0.0 {
        0.0
    } else if weight == 0.0 {
        f64::INFINITY
    } else {
        variance / weight
    }
}

/// Pointwise integrand of the semiparametric efficiency bound for the ATE,
/// without the `1/sqrt(n)` sample-size prefactor.
pub fn efficiency_bound_term(e: f64, var1: f64, var0: f64, tau_x: f64, tau_ate: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&e) {
        return Err(BoundsError::Probability {
            name: "e",
            value: e,
            range: "[0, 1]",
        });
    }
    for (name, value) in [("var1", var1), ("var0", var0)] {
        if !(value >= 0.0) {
            return Err(BoundsError::Negative { name, value });
        }
    }
    let heterogeneity = (tau_x - tau_ate) * (tau_x - tau_ate);
    Ok(inverse_weighted(var1, e) + inverse_weighted(var0, 1.0 - e) + heterogeneity)
}
