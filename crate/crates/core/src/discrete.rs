//! Exact computations on finite-support covariate laws.
//!
//! A [`DiscretePair`] is the control law `P0`, the treated law `P1` and the
//! treatment fraction `pi` on a shared finite support. Everything the bounds
//! module asserts about populations can be evaluated here by direct
//! summation, which makes these routines the reference oracle for the rest
//! of the crate.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{self, BoundsError, Direction, LikelihoodRatioBand};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiscreteError {
    #[error("support must contain at least one point")]
    EmptySupport,
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("{law} is not a probability vector: {reason}")]
    NotProbability { law: &'static str, reason: String },
    #[error("support point {0} has zero mass under both laws")]
    NullPoint(usize),
    #[error("treatment fraction must lie in (0, 1), got {0}")]
    Pi(f64),
    #[error("support point ids must be unique, {0:?} repeats")]
    DuplicateId(String),
    #[error("coordinate pairs disagree on pi: {0} vs {1}")]
    MixedPi(f64, f64),
    #[error("joint support cannot be read as coordinate tuples: {0}")]
    NotFactored(String),
    #[error("joint support of {0} points exceeds the enumeration cap of {cap}", cap = MAX_JOINT_POINTS)]
    TooLarge(usize),
    #[error("band ({0}, {1}) is degenerate; an extremal pair needs b_min < 1 < b_max")]
    DegenerateBand(f64, f64),
    #[error(transparent)]
    Bounds(#[from] BoundsError),
}

pub type Result<T> = std::result::Result<T, DiscreteError>;

/// Largest joint support that will be enumerated.
pub const MAX_JOINT_POINTS: usize = 1 << 16;

const SUM_TOL: f64 = 1e-12;

/// Identifier of a support point; JSON strings and integers are both accepted.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "RawPointId", into = "String")]
pub struct PointId(pub String);

#[derive(Deserialize)]
#[serde(untagged)]
enum RawPointId {
    Text(String),
    Int(i64),
    Float(f64),
}

impl From<RawPointId> for PointId {
    fn from(raw: RawPointId) -> Self {
        match raw {
            RawPointId::Text(s) => PointId(s),
            RawPointId::Int(i) => PointId(i.to_string()),
            RawPointId::Float(f) => PointId(f.to_string()),
        }
    }
}

impl From<PointId> for String {
    fn from(id: PointId) -> String {
        id.0
    }
}

impl From<&str> for PointId {
    fn from(s: &str) -> Self {
        PointId(s.to_string())
    }
}

#[derive(Debug, Deserialize)]
struct RawPair {
    support: Vec<PointId>,
    p0: Vec<f64>,
    p1: Vec<f64>,
    pi: f64,
    #[serde(default)]
    coords: Option<Vec<Vec<f64>>>,
}

/// Control and treated laws on a shared finite support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPair")]
pub struct DiscretePair {
    support: Vec<PointId>,
    p0: Vec<f64>,
    p1: Vec<f64>,
    pi: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    coords: Option<Vec<Vec<f64>>>,
}

impl TryFrom<RawPair> for DiscretePair {
    type Error = DiscreteError;

    fn try_from(raw: RawPair) -> Result<Self> {
        let pair = DiscretePair::new(raw.support, raw.p0, raw.p1, raw.pi)?;
        match raw.coords {
            Some(coords) => pair.with_coords(coords),
            None => Ok(pair),
        }
    }
}

fn check_probability(law: &'static str, p: &[f64]) -> Result<()> {
    if let Some(bad) = p.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(DiscreteError::NotProbability {
            law,
            reason: format!("entry {bad} is not a finite nonnegative number"),
        });
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > SUM_TOL {
        return Err(DiscreteError::NotProbability {
            law,
            reason: format!("entries sum to {total}"),
        });
    }
    Ok(())
}

impl DiscretePair {
    pub fn new(support: Vec<PointId>, p0: Vec<f64>, p1: Vec<f64>, pi: f64) -> Result<Self> {
        let m = support.len();
        if m == 0 {
            return Err(DiscreteError::EmptySupport);
        }
        if p0.len() != m || p1.len() != m {
            return Err(DiscreteError::Length(format!(
                "support has {m} points, p0 has {}, p1 has {}",
                p0.len(),
                p1.len()
            )));
        }
        if !(pi > 0.0 && pi < 1.0) {
            return Err(DiscreteError::Pi(pi));
        }
        check_probability("p0", &p0)?;
        check_probability("p1", &p1)?;
        if let Some(i) = (0..m).find(|&i| p0[i] == 0.0 && p1[i] == 0.0) {
            return Err(DiscreteError::NullPoint(i));
        }
        let mut seen = HashMap::with_capacity(m);
        for id in &support {
            if seen.insert(id.0.as_str(), ()).is_some() {
                return Err(DiscreteError::DuplicateId(id.0.clone()));
            }
        }
        Ok(Self {
            support,
            p0,
            p1,
            pi,
            coords: None,
        })
    }

    /// Builds a pair on the support `0..m` with integer ids.
    pub fn from_masses(p0: Vec<f64>, p1: Vec<f64>, pi: f64) -> Result<Self> {
        let support = (0..p0.len()).map(|i| PointId(i.to_string())).collect();
        Self::new(support, p0, p1, pi)
    }

    /// Attaches a numeric covariate vector to every support point.
    pub fn with_coords(mut self, coords: Vec<Vec<f64>>) -> Result<Self> {
        if coords.len() != self.len() {
            return Err(DiscreteError::Length(format!(
                "{} coordinate rows for {} support points",
                coords.len(),
                self.len()
            )));
        }
        let dim = coords.first().map_or(0, Vec::len);
        if dim == 0 || coords.iter().any(|c| c.len() != dim) {
            return Err(DiscreteError::Length("coordinate rows must share a positive length".into()));
        }
        self.coords = Some(coords);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn support(&self) -> &[PointId] {
        &self.support
    }

    pub fn p0(&self) -> &[f64] {
        &self.p0
    }

    pub fn p1(&self) -> &[f64] {
        &self.p1
    }

    pub fn pi(&self) -> f64 {
        self.pi
    }

    pub fn coords(&self) -> Option<&[Vec<f64>]> {
        self.coords.as_deref()
    }

    /// Population (mixture) mass of each support point.
    pub fn mixture(&self) -> Vec<f64> {
        self.p0
            .iter()
            .zip(&self.p1)
            .map(|(a, b)| self.pi * b + (1.0 - self.pi) * a)
            .collect()
    }

    /// Likelihood ratio `p1 / p0` per point (`+inf` where `p0 = 0`).
    pub fn likelihood_ratios(&self) -> Vec<f64> {
        self.p0
            .iter()
            .zip(&self.p1)
            .map(|(a, b)| if *a == 0.0 { f64::INFINITY } else { b / a })
            .collect()
    }

    /// The pair with the roles of the two laws exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            support: self.support.clone(),
            p0: self.p1.clone(),
            p1: self.p0.clone(),
            pi: 1.0 - self.pi,
            coords: self.coords.clone(),
        }
    }
}

/// Propensity score at every support point.
pub fn propensity(pair: &DiscretePair) -> Vec<f64> {
    let pi = pair.pi;
    pair.p0
        .iter()
        .zip(&pair.p1)
        .map(|(a, b)| {
            let treated = pi * b;
            treated / (treated + (1.0 - pi) * a)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapExtremes {
    pub e_min: f64,
    pub e_max: f64,
    /// Largest `eta` for which strict overlap holds on the support.
    pub eta_star: f64,
}

pub fn overlap_extremes(pair: &DiscretePair) -> OverlapExtremes {
    let e = propensity(pair);
    let e_min = e.iter().copied().fold(f64::INFINITY, f64::min);
    let e_max = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    OverlapExtremes {
        e_min,
        e_max,
        eta_star: e_min.min(1.0 - e_max).max(0.0),
    }
}

/// Divergence families that can be evaluated exactly on a pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DivergenceSpec {
    Chi2,
    Kl,
    ChiAlpha { alpha: f64 },
    Tv,
}

impl DivergenceSpec {
    pub fn label(&self) -> String {
        match self {
            DivergenceSpec::Chi2 => "chi2".into(),
            DivergenceSpec::Kl => "kl".into(),
            DivergenceSpec::ChiAlpha { alpha } => format!("chi_alpha_{alpha}"),
            DivergenceSpec::Tv => "tv".into(),
        }
    }

    /// Matching closed-form bound for the band.
    pub fn bound(&self, band: LikelihoodRatioBand) -> bounds::Result<bounds::DivergenceBounds> {
        match *self {
            DivergenceSpec::Chi2 => Ok(bounds::chi2_bounds(band)),
            DivergenceSpec::Kl => Ok(bounds::kl_bounds(band)),
            DivergenceSpec::ChiAlpha { alpha } => bounds::chi_alpha_bounds(band, alpha),
            DivergenceSpec::Tv => Ok(bounds::tv_bounds(band)),
        }
    }

    /// Contribution `q f(p/q)` of one support point to `D(P || Q)`.
    fn term(&self, p: f64, q: f64) -> f64 {
        match *self {
            DivergenceSpec::Chi2 => {
                if q == 0.0 {
                    if p > 0.0 {
                        f64::INFINITY
                    } else {
                        0.0
                    }
                } else {
                    (p - q) * (p - q) / q
                }
            }
            DivergenceSpec::Kl => kl_term(p, q),
            DivergenceSpec::ChiAlpha { alpha } => {
                let gap = (p - q).abs();
                if q == 0.0 {
                    if gap == 0.0 {
                        0.0
                    } else if alpha == 1.0 {
                        gap
                    } else {
                        f64::INFINITY
                    }
                } else {
                    gap.powf(alpha) / q.powf(alpha - 1.0)
                }
            }
            DivergenceSpec::Tv => (p - q).abs() / 2.0,
        }
    }
}

/// `p log(p/q)` with `0 log 0 = 0` and `p > 0, q = 0` giving `+inf`.
pub(crate) fn kl_term(p: f64, q: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else if q == 0.0 {
        f64::INFINITY
    } else {
        p * (p / q).ln()
    }
}

/// Exact divergence between the two laws of the pair.
///
/// `Forward` is `D(P1 || P0)`, `Reverse` is `D(P0 || P1)`.
pub fn divergence(pair: &DiscretePair, kind: DivergenceSpec, direction: Direction) -> f64 {
    let (p, q) = match direction {
        Direction::Forward => (&pair.p1, &pair.p0),
        Direction::Reverse => (&pair.p0, &pair.p1),
    };
    p.iter().zip(q).map(|(a, b)| kind.term(*a, *b)).sum()
}

/// Accuracy of the Bayes-optimal classifier of treatment from covariates.
pub fn bayes_accuracy(pair: &DiscretePair) -> f64 {
    let pi = pair.pi;
    pair.p0
        .iter()
        .zip(&pair.p1)
        .map(|(a, b)| (pi * b).max((1.0 - pi) * a))
        .sum()
}

/// Population mass of the region where `eta <= e(x) <= 1 - eta`.
pub fn overlap_mass(pair: &DiscretePair, eta: f64) -> Result<f64> {
    if !(eta > 0.0 && eta <= 0.5) {
        return Err(BoundsError::Eta(eta).into());
    }
    Ok(propensity(pair)
        .iter()
        .zip(pair.mixture())
        .filter(|(e, _)| **e >= eta && **e <= 1.0 - eta)
        .map(|(_, w)| w)
        .sum())
}

/// Two-point pair whose likelihood ratio takes exactly the band endpoints.
pub fn extremal_pair(band: LikelihoodRatioBand, pi: f64) -> Result<DiscretePair> {
    let (lo, hi) = (band.b_min(), band.b_max());
    if !(lo < 1.0 && hi > 1.0) {
        return Err(DiscreteError::DegenerateBand(lo, hi));
    }
    let w_lo = (hi - 1.0) / (hi - lo);
    let w_hi = (1.0 - lo) / (hi - lo);
    let p0 = vec![w_lo, w_hi];
    let p1 = vec![lo * w_lo, hi * w_hi];
    let pair = DiscretePair {
        support: vec![PointId("low".into()), PointId("high".into())],
        p0,
        p1,
        pi,
        coords: None,
    };
    if !(pi > 0.0 && pi < 1.0) {
        return Err(DiscreteError::Pi(pi));
    }
    check_probability("p0", &pair.p0)?;
    check_probability("p1", &pair.p1)?;
    Ok(pair)
}

/// Mean vectors and covariance matrices of the attached coordinates under
/// both laws. Requires coordinates.
pub fn coordinate_moments(pair: &DiscretePair) -> Option<CoordinateMoments> {
    let coords = pair.coords.as_ref()?;
    let dim = coords[0].len();
    let moments = |w: &[f64]| {
        let mut mean = vec![0.0; dim];
        for (x, wi) in coords.iter().zip(w) {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += wi * v;
            }
        }
        let mut cov = vec![0.0; dim * dim];
        for (x, wi) in coords.iter().zip(w) {
            for i in 0..dim {
                for j in 0..dim {
                    cov[i * dim + j] += wi * (x[i] - mean[i]) * (x[j] - mean[j]);
                }
            }
        }
        (mean, cov)
    };
    let (mean_0, cov_0) = moments(&pair.p0);
    let (mean_1, cov_1) = moments(&pair.p1);
    Some(CoordinateMoments {
        dim,
        mean_0,
        mean_1,
        cov_0,
        cov_1,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateMoments {
    pub dim: usize,
    pub mean_0: Vec<f64>,
    pub mean_1: Vec<f64>,
    /// Row-major `dim x dim`.
    pub cov_0: Vec<f64>,
    pub cov_1: Vec<f64>,
}

/// Expectation and variance of `g` (one value per support point) under both laws.
pub fn function_moments(pair: &DiscretePair, g: &[f64]) -> Result<[(f64, f64); 2]> {
    if g.len() != pair.len() {
        return Err(DiscreteError::Length(format!("g has {} values for {} points", g.len(), pair.len())));
    }
    let stats = |w: &[f64]| {
        let mean: f64 = w.iter().zip(g).map(|(a, b)| a * b).sum();
        let var: f64 = w.iter().zip(g).map(|(a, b)| a * (b - mean) * (b - mean)).sum();
        (mean, var)
    };
    Ok([stats(&pair.p0), stats(&pair.p1)])
}

/// Conditional outcome moments per support point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeMoments {
    pub var1: Vec<f64>,
    pub var0: Vec<f64>,
    pub tau: Vec<f64>,
}

/// Semiparametric efficiency bound for the ATE (population scale, no
/// `1/sqrt(n)` factor): the mixture expectation of the pointwise term.
pub fn efficiency_bound(pair: &DiscretePair, moments: &OutcomeMoments) -> Result<f64> {
    let m = pair.len();
    if moments.var1.len() != m || moments.var0.len() != m || moments.tau.len() != m {
        return Err(DiscreteError::Length(format!(
            "outcome moments must have {m} entries each (var1 {}, var0 {}, tau {})",
            moments.var1.len(),
            moments.var0.len(),
            moments.tau.len()
        )));
    }
    let weights = pair.mixture();
    let tau_ate: f64 = weights.iter().zip(&moments.tau).map(|(w, t)| w * t).sum();
    let e = propensity(pair);
    let mut total = 0.0;
    for i in 0..m {
        if weights[i] == 0.0 {
            continue;
        }
        let term = bounds::efficiency_bound_term(e[i], moments.var1[i], moments.var0[i], moments.tau[i], tau_ate)?;
        total += weights[i] * term;
    }
    Ok(total)
}

/// Independent coordinates under both laws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductPair {
    coordinates: Vec<DiscretePair>,
}

impl ProductPair {
    pub fn new(coordinates: Vec<DiscretePair>) -> Result<Self> {
        let first = coordinates.first().ok_or(DiscreteError::EmptySupport)?;
        let pi = first.pi;
        if let Some(other) = coordinates.iter().find(|c| c.pi != pi) {
            return Err(DiscreteError::MixedPi(pi, other.pi));
        }
        Ok(Self { coordinates })
    }

    pub fn coordinates(&self) -> &[DiscretePair] {
        &self.coordinates
    }

    pub fn pi(&self) -> f64 {
        self.coordinates[0].pi
    }

    pub fn dim(&self) -> usize {
        self.coordinates.len()
    }

    /// Full joint table, when it fits under [`MAX_JOINT_POINTS`].
    pub fn to_joint(&self) -> Result<JointTable> {
        let arity: Vec<usize> = self.coordinates.iter().map(DiscretePair::len).collect();
        let size = joint_size(&arity)?;
        let mut p0 = vec![1.0; size];
        let mut p1 = vec![1.0; size];
        for (index, (a, b)) in p0.iter_mut().zip(p1.iter_mut()).enumerate() {
            let mut rest = index;
            for (k, coord) in self.coordinates.iter().enumerate().rev() {
                let value = rest % arity[k];
                rest /= arity[k];
                *a *= coord.p0[value];
                *b *= coord.p1[value];
            }
        }
        Ok(JointTable {
            arity,
            p0,
            p1,
            pi: self.pi(),
        })
    }
}

fn joint_size(arity: &[usize]) -> Result<usize> {
    let mut size: usize = 1;
    for &a in arity {
        if a == 0 {
            return Err(DiscreteError::EmptySupport);
        }
        size = size.checked_mul(a).ok_or(DiscreteError::TooLarge(usize::MAX))?;
        if size > MAX_JOINT_POINTS {
            return Err(DiscreteError::TooLarge(size));
        }
    }
    Ok(size)
}

/// Joint laws over a full grid of coordinate tuples, row-major with the last
/// coordinate varying fastest. Grid cells may carry zero mass.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointTable {
    arity: Vec<usize>,
    p0: Vec<f64>,
    p1: Vec<f64>,
    pi: f64,
}

impl JointTable {
    pub fn new(arity: Vec<usize>, p0: Vec<f64>, p1: Vec<f64>, pi: f64) -> Result<Self> {
        let size = joint_size(&arity)?;
        if p0.len() != size || p1.len() != size {
            return Err(DiscreteError::Length(format!(
                "grid of {size} cells, p0 has {}, p1 has {}",
                p0.len(),
                p1.len()
            )));
        }
        if !(pi > 0.0 && pi < 1.0) {
            return Err(DiscreteError::Pi(pi));
        }
        check_probability("p0", &p0)?;
        check_probability("p1", &p1)?;
        Ok(Self { arity, p0, p1, pi })
    }

    /// Reads support ids as comma-separated nonnegative integer tuples.
    pub fn from_pair(pair: &DiscretePair) -> Result<Self> {
        let mut tuples = Vec::with_capacity(pair.len());
        for id in &pair.support {
            let tuple: std::result::Result<Vec<usize>, _> =
                id.0.split(',').map(|part| part.trim().parse::<usize>()).collect();
            let tuple = tuple.map_err(|_| DiscreteError::NotFactored(format!("id {:?} is not an integer tuple", id.0)))?;
            tuples.push(tuple);
        }
        let width = tuples[0].len();
        if tuples.iter().any(|t| t.len() != width) {
            return Err(DiscreteError::NotFactored("tuples have different lengths".into()));
        }
        let arity: Vec<usize> = (0..width)
            .map(|k| tuples.iter().map(|t| t[k]).max().unwrap_or(0) + 1)
            .collect();
        let size = joint_size(&arity)?;
        let mut p0 = vec![0.0; size];
        let mut p1 = vec![0.0; size];
        for (i, tuple) in tuples.iter().enumerate() {
            let index = tuple.iter().zip(&arity).fold(0, |acc, (v, a)| acc * a + v);
            p0[index] = pair.p0[i];
            p1[index] = pair.p1[i];
        }
        Ok(Self {
            arity,
            p0,
            p1,
            pi: pair.pi,
        })
    }

    pub fn arity(&self) -> &[usize] {
        &self.arity
    }

    pub fn dim(&self) -> usize {
        self.arity.len()
    }

    pub fn p0(&self) -> &[f64] {
        &self.p0
    }

    pub fn p1(&self) -> &[f64] {
        &self.p1
    }

    pub fn pi(&self) -> f64 {
        self.pi
    }

    /// The table as a pair, dropping cells with zero mass under both laws.
    pub fn to_pair(&self) -> Result<DiscretePair> {
        let mut support = Vec::new();
        let mut p0 = Vec::new();
        let mut p1 = Vec::new();
        for index in 0..self.p0.len() {
            if self.p0[index] == 0.0 && self.p1[index] == 0.0 {
                continue;
            }
            let mut rest = index;
            let mut tuple = vec![0; self.dim()];
            for k in (0..self.dim()).rev() {
                tuple[k] = rest % self.arity[k];
                rest /= self.arity[k];
            }
            let id = tuple.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
            support.push(PointId(id));
            p0.push(self.p0[index]);
            p1.push(self.p1[index]);
        }
        DiscretePair::new(support, p0, p1, self.pi)
    }

    pub fn kl(&self, direction: Direction) -> f64 {
        let (p, q) = match direction {
            Direction::Forward => (&self.p1, &self.p0),
            Direction::Reverse => (&self.p0, &self.p1),
        };
        p.iter().zip(q).map(|(a, b)| kl_term(*a, *b)).sum()
    }

    /// Marginal law of the first `k` coordinates.
    fn prefix_marginal(&self, law: &[f64], k: usize) -> Vec<f64> {
        let tail: usize = self.arity[k..].iter().product();
        law.chunks(tail).map(|chunk| chunk.iter().sum()).collect()
    }

    /// Marginal pair of coordinate `k`.
    pub fn marginal(&self, k: usize) -> Result<DiscretePair> {
        let tail: usize = self.arity[k + 1..].iter().product();
        let a = self.arity[k];
        let mut p0 = vec![0.0; a];
        let mut p1 = vec![0.0; a];
        for index in 0..self.p0.len() {
            let value = (index / tail) % a;
            p0[value] += self.p0[index];
            p1[value] += self.p1[index];
        }
        // Renormalize away summation error.
        let (s0, s1): (f64, f64) = (p0.iter().sum(), p1.iter().sum());
        p0.iter_mut().for_each(|v| *v /= s0);
        p1.iter_mut().for_each(|v| *v /= s1);
        let keep: Vec<usize> = (0..a).filter(|&i| p0[i] > 0.0 || p1[i] > 0.0).collect();
        DiscretePair::new(
            keep.iter().map(|i| PointId(i.to_string())).collect(),
            keep.iter().map(|&i| p0[i]).collect(),
            keep.iter().map(|&i| p1[i]).collect(),
            self.pi,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRuleKl {
    /// `k`-th entry: expected KL between the conditional laws of coordinate
    /// `k` given the earlier coordinates, averaged under `P1`.
    pub terms: Vec<f64>,
    pub total: f64,
}

impl ChainRuleKl {
    /// Average per-coordinate discriminating information, `total / p`.
    pub fn average(&self) -> f64 {
        self.total / self.terms.len() as f64
    }
}

/// Chain-rule decomposition of `KL(P1 || P0)` over the coordinates of a joint table.
pub fn chain_rule_kl(table: &JointTable) -> ChainRuleKl {
    let p = table.dim();
    let mut terms = Vec::with_capacity(p);
    let mut prev1 = vec![1.0];
    let mut prev0 = vec![1.0];
    for k in 0..p {
        let cur1 = table.prefix_marginal(&table.p1, k + 1);
        let cur0 = table.prefix_marginal(&table.p0, k + 1);
        let a = table.arity[k];
        let mut term = 0.0;
        for (index, (&m1, &m0)) in cur1.iter().zip(&cur0).enumerate() {
            if m1 == 0.0 {
                continue;
            }
            let parent = index / a;
            let (c1, c0) = (prev1[parent], prev0[parent]);
            if m0 == 0.0 {
                term = f64::INFINITY;
                break;
            }
            // P1(x_k | x_<k) / P0(x_k | x_<k)
            term += m1 * ((m1 / c1) / (m0 / c0)).ln();
        }
        terms.push(term);
        prev1 = cur1;
        prev0 = cur0;
    }
    let total = terms.iter().sum();
    ChainRuleKl { terms, total }
}

/// Chain-rule terms for independent coordinates: each is a marginal KL.
pub fn chain_rule_kl_product(pair: &ProductPair) -> ChainRuleKl {
    let terms: Vec<f64> = pair
        .coordinates
        .iter()
        .map(|c| divergence(c, DivergenceSpec::Kl, Direction::Forward))
        .collect();
    let total = terms.iter().sum();
    ChainRuleKl { terms, total }
}

/// Uniform draw from the probability simplex with `m` vertices.
pub fn uniform_simplex<R: Rng + ?Sized>(rng: &mut R, m: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..m).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// A pair with both laws drawn uniformly from the simplex.
pub fn random_pair<R: Rng + ?Sized>(rng: &mut R, m: usize, pi: f64) -> Result<DiscretePair> {
    let p0 = uniform_simplex(rng, m);
    let p1 = uniform_simplex(rng, m);
    DiscretePair::from_masses(p0, p1, pi)
}

/// Rejection sampler: draws random pairs until one satisfies strict overlap
/// at `eta`. Returns the pair and the number of draws used, or `None` when
/// `max_attempts` is exhausted.
pub fn random_overlapping_pair<R: Rng + ?Sized>(
    rng: &mut R,
    m: usize,
    pi: f64,
    eta: f64,
    max_attempts: usize,
) -> Result<Option<(DiscretePair, usize)>> {
    for attempt in 1..=max_attempts {
        let pair = random_pair(rng, m, pi)?;
        if overlap_extremes(&pair).eta_star >= eta {
            return Ok(Some((pair, attempt)));
        }
    }
    Ok(None)
}

/// A random joint table on a grid with the given arities.
pub fn random_joint<R: Rng + ?Sized>(rng: &mut R, arity: Vec<usize>, pi: f64) -> Result<JointTable> {
    let size = joint_size(&arity)?;
    let p0 = uniform_simplex(rng, size);
    let p1 = uniform_simplex(rng, size);
    JointTable::new(arity, p0, p1, pi)
}
