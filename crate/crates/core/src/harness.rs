//! Verification suites, dimension sweeps and report plumbing behind the
//! command-line front end.
//!
//! Every task draws from its own ChaCha stream, seeded from the base seed
//! and the task index, and results are gathered in task order. Reports are
//! therefore identical for any worker count.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{self, BoundsError, Direction, LikelihoodRatioBand, OverlapSpec};
use crate::dataset::DatasetError;
use crate::discrete::{self, DiscreteError, DiscretePair, DivergenceSpec, JointTable};
use crate::estimation::{self, AuditConfig, EstimationError};
use crate::exec::{self, Execution};
use crate::linalg::{self, CovarianceMatrix};
use crate::processes::{self, Group, ProcessError, ProcessSpec};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error at {path}: {message}")]
    Config { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Bounds(#[from] BoundsError),
    #[error(transparent)]
    Discrete(#[from] DiscreteError),
    #[error(transparent)]
    Process(#[from] ProcessError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Tolerance for comparisons against exact oracles.
pub const EXACT_TOLERANCE: f64 = 1e-9;

/// Width of the sampling allowance, in standard errors.
pub const SAMPLING_SLACK_SE: f64 = 4.0;

/// Header of every CSV report.
pub const REPORT_COLUMNS: [&str; 10] = [
    "scenario",
    "p",
    "quantity",
    "observed",
    "bound",
    "margin",
    "tolerance",
    "pass",
    "seed",
    "replicate",
];

/// One comparison of an observed quantity against its bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario: String,
    pub p: usize,
    pub quantity: String,
    pub observed: f64,
    pub bound: f64,
    /// `bound - observed`.
    pub margin: f64,
    pub tolerance: f64,
    /// `margin >= -tolerance`.
    pub pass: bool,
    pub seed: u64,
    pub replicate: usize,
}

impl ReportRow {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        scenario: impl Into<String>,
        p: usize,
        quantity: impl Into<String>,
        observed: f64,
        bound: f64,
        tolerance: f64,
        seed: u64,
        replicate: usize,
    ) -> Self {
        let margin = if observed == bound { 0.0 } else { bound - observed };
        Self {
            scenario: scenario.into(),
            p,
            quantity: quantity.into(),
            observed,
            bound,
            margin,
            tolerance,
            pass: margin_passes(margin, tolerance),
            seed,
            replicate,
        }
    }

    /// Recomputes the pass flag from the recorded fields.
    pub fn recomputed_pass(&self) -> bool {
        margin_passes(self.margin, self.tolerance)
    }
}

fn margin_passes(margin: f64, tolerance: f64) -> bool {
    // NaN margins fail.
    margin >= -tolerance
}

/// Shortest-safe float text: 17 significant digits, `inf`, `-inf`, `NaN`.
pub fn format_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

pub fn write_report<W: Write>(rows: &[ReportRow], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(REPORT_COLUMNS)?;
    for row in rows {
        wtr.write_record([
            row.scenario.clone(),
            row.p.to_string(),
            row.quantity.clone(),
            format_float(row.observed),
            format_float(row.bound),
            format_float(row.margin),
            format_float(row.tolerance),
            row.pass.to_string(),
            row.seed.to_string(),
            row.replicate.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_report_path(rows: &[ReportRow], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let file = std::fs::File::create(path)?;
    write_report(rows, std::io::BufWriter::new(file))
}

pub fn read_report<R: std::io::Read>(reader: R) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != REPORT_COLUMNS {
        return Err(HarnessError::Invalid(format!("unexpected report header {header:?}")));
    }
    let mut rows = Vec::new();
    for record in rdr.deserialize() {
        rows.push(record?);
    }
    Ok(rows)
}

/// Mixes a base seed with a stream label and an index (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn band_for(eta: f64, pi: f64) -> Result<LikelihoodRatioBand> {
    Ok(OverlapSpec::new(eta, pi)?.band())
}

// ---------------------------------------------------------------------------
// Bound table

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectedBound {
    pub forward: f64,
    pub reverse: f64,
}

impl From<bounds::DivergenceBounds> for DirectedBound {
    fn from(b: bounds::DivergenceBounds) -> Self {
        Self {
            forward: b.forward,
            reverse: b.reverse,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaBound {
    pub alpha: f64,
    pub forward: f64,
    pub reverse: f64,
}

/// Every closed-form bound implied by one overlap regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundTable {
    pub eta: f64,
    pub pi: f64,
    pub b_min: f64,
    pub b_max: f64,
    pub chi2: DirectedBound,
    pub kl: DirectedBound,
    pub chi_alpha: Vec<AlphaBound>,
    pub tv: f64,
    pub accuracy_bound: f64,
}

pub fn bound_table(eta: f64, pi: f64, alphas: &[f64]) -> Result<BoundTable> {
    let spec = OverlapSpec::new(eta, pi)?;
    let band = spec.band();
    let chi_alpha = alphas
        .iter()
        .map(|&alpha| {
            let b = bounds::chi_alpha_bounds(band, alpha)?;
            Ok(AlphaBound {
                alpha,
                forward: b.forward,
                reverse: b.reverse,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BoundTable {
        eta,
        pi,
        b_min: band.b_min(),
        b_max: band.b_max(),
        chi2: bounds::chi2_bounds(band).into(),
        kl: bounds::kl_bounds(band).into(),
        chi_alpha,
        tv: bounds::tv_bounds(band).forward,
        accuracy_bound: bounds::classifier_accuracy_bound(eta)?,
    })
}

// ---------------------------------------------------------------------------
// Verification suites

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Rukhin,
    Chainrule,
    Theorem1,
    Trimming,
    All,
}

impl Suite {
    pub const SINGLE: [Suite; 4] = [Suite::Rukhin, Suite::Chainrule, Suite::Theorem1, Suite::Trimming];

    pub fn label(&self) -> &'static str {
        match self {
            Suite::Rukhin => "rukhin",
            Suite::Chainrule => "chainrule",
            Suite::Theorem1 => "theorem1",
            Suite::Trimming => "trimming",
            Suite::All => "all",
        }
    }

    fn stream(&self) -> u64 {
        match self {
            Suite::Rukhin => 1,
            Suite::Chainrule => 2,
            Suite::Theorem1 => 3,
            Suite::Trimming => 4,
            Suite::All => 0,
        }
    }

    fn members(&self) -> Vec<Suite> {
        match self {
            Suite::All => Suite::SINGLE.to_vec(),
            other => vec![*other],
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rukhin" => Ok(Suite::Rukhin),
            "chainrule" => Ok(Suite::Chainrule),
            "theorem1" => Ok(Suite::Theorem1),
            "trimming" => Ok(Suite::Trimming),
            "all" => Ok(Suite::All),
            other => Err(HarnessError::Invalid(format!(
                "unknown suite {other:?}; expected rukhin, chainrule, theorem1, trimming or all"
            ))),
        }
    }
}

/// Overlap levels cycled through by the rukhin and theorem1 suites.
pub const SUITE_ETAS: [f64; 3] = [0.05, 0.1, 0.25];

/// Divergences checked by the rukhin suite, in report order.
pub fn rukhin_kinds() -> [DivergenceSpec; 6] {
    [
        DivergenceSpec::Chi2,
        DivergenceSpec::Kl,
        DivergenceSpec::ChiAlpha { alpha: 1.5 },
        DivergenceSpec::ChiAlpha { alpha: 3.0 },
        DivergenceSpec::ChiAlpha { alpha: 4.0 },
        DivergenceSpec::Tv,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyConfig {
    pub suite: Suite,
    pub trials: usize,
    pub seed: u64,
    pub execution: Execution,
}

/// The random instance behind a trial, kept for replay when a row fails.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "instance", rename_all = "snake_case")]
pub enum Instance {
    Pair { eta: f64, pair: DiscretePair },
    Joint { table: JointTable, product: Option<ProcessSpec> },
    PairWithFunction { eta: f64, pair: DiscretePair, g: Vec<f64> },
    Propensities { fitted: Vec<f64>, grid: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub suite: Suite,
    pub trial: usize,
    pub trial_seed: u64,
    pub rows: Vec<ReportRow>,
    pub instance: Instance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOutcome {
    pub rows: Vec<ReportRow>,
    pub violations: Vec<Violation>,
}

impl VerifyOutcome {
    pub fn passed(&self) -> bool {
        self.violations.is_empty() && self.rows.iter().all(|r| r.pass)
    }
}

struct Trial {
    rows: Vec<ReportRow>,
    instance: Instance,
}

/// Runs the suite on `trials` seeded random instances (per member suite).
pub fn run_verify(config: &VerifyConfig) -> Result<VerifyOutcome> {
    if config.trials == 0 {
        return Err(HarnessError::Invalid("trials must be ≥ 1".into()));
    }
    let mut rows = Vec::new();
    let mut violations = Vec::new();
    for suite in config.suite.members() {
        let results = exec::map_indexed(config.trials, config.execution, |i| {
            let seed = derive_seed(config.seed, suite.stream(), i as u64);
            let trial = match suite {
                Suite::Rukhin => rukhin_trial(i, seed),
                Suite::Chainrule => chainrule_trial(i, seed),
                Suite::Theorem1 => theorem1_trial(i, seed),
                Suite::Trimming => trimming_trial(i, seed),
                Suite::All => unreachable!("expanded above"),
            };
            (seed, trial)
        });
        for (i, (seed, trial)) in results.into_iter().enumerate() {
            let trial = trial?;
            if trial.rows.iter().any(|r| !r.pass) {
                violations.push(Violation {
                    suite,
                    trial: i,
                    trial_seed: seed,
                    rows: trial.rows.iter().filter(|r| !r.pass).cloned().collect(),
                    instance: trial.instance,
                });
            }
            rows.extend(trial.rows);
        }
    }
    Ok(VerifyOutcome { rows, violations })
}

/// Random pair with strict overlap at `eta`, by rejection from uniform
/// simplex draws; the support shrinks if a size is too rarely accepted.
fn overlapping_pair(rng: &mut ChaCha8Rng, eta: f64, pi: f64, m_max: usize) -> Result<DiscretePair> {
    let mut m = rng.random_range(2..=m_max);
    loop {
        if let Some((pair, _)) = discrete::random_overlapping_pair(rng, m, pi, eta, 20_000)? {
            return Ok(pair);
        }
        if m == 2 {
            return Err(HarnessError::Invalid(format!("no overlapping pair found at eta {eta}")));
        }
        m -= 1;
    }
}

fn random_pi(rng: &mut ChaCha8Rng) -> f64 {
    // Any pi in [0.25, 0.75] is admissible for every suite eta.
    0.25 + 0.5 * rng.random::<f64>()
}

fn rukhin_trial(i: usize, seed: u64) -> Result<Trial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eta = SUITE_ETAS[i % SUITE_ETAS.len()];
    let pi = random_pi(&mut rng);
    let pair = overlapping_pair(&mut rng, eta, pi, 6)?;
    let band = band_for(eta, pi)?;
    let scenario = format!("rukhin_eta_{eta}");
    let mut rows = Vec::with_capacity(12);
    for kind in rukhin_kinds() {
        let bound = kind.bound(band)?;
        for direction in Direction::BOTH {
            rows.push(ReportRow::new(
                scenario.clone(),
                pair.len(),
                format!("{}_{}", kind.label(), direction.label()),
                discrete::divergence(&pair, kind, direction),
                bound.get(direction),
                EXACT_TOLERANCE,
                seed,
                i,
            ));
        }
    }
    Ok(Trial {
        rows,
        instance: Instance::Pair { eta, pair },
    })
}

fn chainrule_trial(i: usize, seed: u64) -> Result<Trial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if i % 2 == 0 {
        // Arbitrary joint on a small grid: the identity must hold exactly.
        let dim = rng.random_range(2..=4);
        let arity: Vec<usize> = (0..dim).map(|_| rng.random_range(2..=3)).collect();
        let pi = random_pi(&mut rng);
        let table = discrete::random_joint(&mut rng, arity, pi)?;
        let chain = discrete::chain_rule_kl(&table);
        let joint = table.kl(Direction::Forward);
        let rows = vec![ReportRow::new(
            "chainrule_joint",
            table.dim(),
            "chain_rule_gap",
            (chain.total - joint).abs(),
            0.0,
            EXACT_TOLERANCE,
            seed,
            i,
        )];
        Ok(Trial {
            rows,
            instance: Instance::Joint { table, product: None },
        })
    } else {
        // Budgeted product family: identity plus the per-coordinate cap.
        let eta = SUITE_ETAS[(i / 2) % SUITE_ETAS.len()];
        let pi = random_pi(&mut rng);
        let p = rng.random_range(1..=8);
        let spec = processes::lr_budget_allocator(eta, pi, p)?;
        let product = processes::product_pair(&spec)?;
        let table = product.to_joint()?;
        let chain = discrete::chain_rule_kl(&table);
        let joint = table.kl(Direction::Forward);
        let cap = bounds::kl_bounds(band_for(eta, pi)?).forward / p as f64;
        let scenario = format!("chainrule_budgeted_eta_{eta}");
        let rows = vec![
            ReportRow::new(scenario.clone(), p, "chain_rule_gap", (chain.total - joint).abs(), 0.0, EXACT_TOLERANCE, seed, i),
            ReportRow::new(scenario, p, "kl_average", chain.average(), cap, EXACT_TOLERANCE, seed, i),
        ];
        Ok(Trial {
            rows,
            instance: Instance::Joint {
                table,
                product: Some(spec),
            },
        })
    }
}

fn dense_opnorm(dim: usize, cov: Vec<f64>) -> Result<f64> {
    let m = CovarianceMatrix::Dense { dim, data: cov };
    linalg::operator_norm(&m, 1e-14, 1_000_000).map_err(|e| HarnessError::Invalid(e.to_string()))
}

fn theorem1_trial(i: usize, seed: u64) -> Result<Trial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eta = SUITE_ETAS[i % SUITE_ETAS.len()];
    let pi = random_pi(&mut rng);
    let pair = overlapping_pair(&mut rng, eta, pi, 6)?;
    let dim = rng.random_range(1..=4);
    let coords: Vec<Vec<f64>> = (0..pair.len())
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let pair = pair.with_coords(coords)?;
    let g: Vec<f64> = (0..pair.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
    let band = band_for(eta, pi)?;
    let moments = discrete::coordinate_moments(&pair).expect("coordinates attached");
    let o0 = dense_opnorm(dim, moments.cov_0.clone())?;
    let o1 = dense_opnorm(dim, moments.cov_1.clone())?;
    let gaps: Vec<f64> = moments.mean_0.iter().zip(&moments.mean_1).map(|(a, b)| a - b).collect();
    let euclid = gaps.iter().map(|d| d * d).sum::<f64>().sqrt();
    let mad = gaps.iter().map(|d| d.abs()).sum::<f64>() / dim as f64;
    let [(e0, v0), (e1, v1)] = discrete::function_moments(&pair, &g)?;
    let scenario = format!("theorem1_eta_{eta}");
    let row = |quantity: &str, observed: f64, bound: f64| {
        ReportRow::new(scenario.clone(), dim, quantity, observed, bound, EXACT_TOLERANCE, seed, i)
    };
    let rows = vec![
        row("mean_gap", euclid, bounds::mean_discrepancy_bound(o0, o1, band)),
        row("mad", mad, bounds::mad_bound(dim, o0, o1, band)?),
        row("functional_gap", (e1 - e0).abs(), bounds::functional_discrepancy_bound(v0, v1, band)?),
        row("bayes_accuracy", discrete::bayes_accuracy(&pair), bounds::classifier_accuracy_bound(eta)?),
    ];
    Ok(Trial {
        rows,
        instance: Instance::PairWithFunction { eta, pair, g },
    })
}

/// Trimming thresholds used by the trimming suite.
pub fn trimming_grid() -> Vec<f64> {
    (1..=10).map(|k| k as f64 * 0.05).collect()
}

/// A random propensity vector: logistic of a Gaussian index, sometimes
/// with a point mass at an extreme value mixed in.
pub fn random_propensities(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rng.random_range(10..=400);
    let center: f64 = rng.random_range(-2.0..2.0);
    let spread: f64 = rng.random_range(0.0..4.0);
    let extreme: f64 = rng.random_range(0.0..0.5);
    let share_extreme: f64 = if rng.random::<f64>() < 0.3 { rng.random_range(0.0..0.5) } else { 0.0 };
    (0..n)
        .map(|_| {
            if rng.random::<f64>() < share_extreme {
                if rng.random::<bool>() {
                    extreme
                } else {
                    1.0 - extreme
                }
            } else {
                let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
                1.0 / (1.0 + (-(center + spread * z)).exp())
            }
        })
        .map(|e: f64| e.clamp(1e-12, 1.0 - 1e-12))
        .collect()
}

fn trimming_trial(i: usize, seed: u64) -> Result<Trial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fitted = random_propensities(&mut rng);
    let grid = trimming_grid();
    let curve = estimation::trimming_analysis(&fitted, &grid)?;
    let rows = curve
        .iter()
        .map(|point| {
            ReportRow::new(
                format!("trimming_eta_tilde_{:.2}", point.eta_tilde),
                fitted.len(),
                "retained_fraction",
                point.retained_fraction,
                point.retention_bound,
                1e-12,
                seed,
                i,
            )
        })
        .collect();
    Ok(Trial {
        rows,
        instance: Instance::Propensities { fitted, grid },
    })
}

// ---------------------------------------------------------------------------
// Sweeps

pub const SWEEP_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepOutputs {
    /// CSV report path.
    #[serde(default)]
    pub rows: Option<PathBuf>,
    /// Summary JSON path.
    #[serde(default)]
    pub summary: Option<PathBuf>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub schema_version: u32,
    /// Process template, resized to every `p` in the grid.
    pub scenario: ProcessSpec,
    pub p_grid: Vec<usize>,
    /// Overlap regime whose bounds the sweep compares against.
    pub eta: f64,
    pub pi: f64,
    /// Samples per replicate; 0 selects exact moments.
    #[serde(default)]
    pub n: usize,
    #[serde(default = "one")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub outputs: SweepOutputs,
    /// 0 = default pool, 1 = sequential.
    #[serde(default)]
    pub workers: usize,
}

fn half() -> f64 {
    0.5
}

/// Externally tagged twin of [`ProcessSpec`]. Internally tagged enums are
/// buffered by serde, which hides the failing field from path tracking, so
/// the sweep config reads the scenario through this form instead.
#[derive(Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
enum TaggedSpec {
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
    GaussianShift {
        m0: Vec<f64>,
        m1: Vec<f64>,
        variances: Vec<f64>,
        #[serde(default = "half")]
        pi: f64,
    },
    Ma1 {
        theta: f64,
        sigma2: f64,
        p: usize,
        #[serde(default = "half")]
        pi: f64,
    },
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
        scenario: processes::BalancingKind,
    },
}

impl From<TaggedSpec> for ProcessSpec {
    fn from(spec: TaggedSpec) -> Self {
        match spec {
            TaggedSpec::IndependentBernoulli { q0, q1, pi } => ProcessSpec::IndependentBernoulli { q0, q1, pi },
            TaggedSpec::LrBudgetedBernoulli { eta, pi, p } => ProcessSpec::LrBudgetedBernoulli { eta, pi, p },
            TaggedSpec::GaussianShift { m0, m1, variances, pi } => ProcessSpec::GaussianShift { m0, m1, variances, pi },
            TaggedSpec::Ma1 { theta, sigma2, p, pi } => ProcessSpec::Ma1 { theta, sigma2, p, pi },
            TaggedSpec::Factor {
                p,
                rank,
                loadings,
                idiosyncratic,
                pi,
            } => ProcessSpec::Factor {
                p,
                rank,
                loadings,
                idiosyncratic,
                pi,
            },
            TaggedSpec::BalancingScenario { p, scenario } => ProcessSpec::BalancingScenario { p, scenario },
        }
    }
}

/// Reads `{"variant": name, ...fields}` as `{name: {...fields}}` so that
/// errors inside the fields keep their path.
fn scenario_from_value(value: &serde_json::Value) -> Result<ProcessSpec> {
    use serde_json::Value;
    let Value::Object(fields) = value else {
        return Err(config_error("/scenario", "expected a scenario object"));
    };
    let mut fields = fields.clone();
    let variant = match fields.remove("variant") {
        Some(Value::String(name)) => name,
        Some(_) => return Err(config_error("/scenario/variant", "must be a string")),
        None => return Err(config_error("/scenario", "missing field `variant`")),
    };
    let mut tagged = serde_json::Map::new();
    tagged.insert(variant, Value::Object(fields));
    let spec: TaggedSpec = serde_path_to_error::deserialize(Value::Object(tagged)).map_err(|e| {
        // The first segment is the variant name, standing in for `/variant`.
        let segments: Vec<String> = pointer(e.path()).split('/').skip(2).map(str::to_string).collect();
        let path = if segments.is_empty() {
            "/scenario/variant".to_string()
        } else {
            format!("/scenario/{}", segments.join("/"))
        };
        config_error(&path, e.into_inner().to_string())
    })?;
    Ok(spec.into())
}

fn config_error(path: &str, message: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

fn pointer(path: &serde_path_to_error::Path) -> String {
    let mut out = String::new();
    for segment in path.iter() {
        use serde_path_to_error::Segment;
        let part = match segment {
            Segment::Seq { index } => index.to_string(),
            Segment::Map { key } => key.replace('~', "~0").replace('/', "~1"),
            Segment::Enum { variant } => variant.clone(),
            Segment::Unknown => "?".to_string(),
        };
        out.push('/');
        out.push_str(&part);
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

impl SweepConfig {
    /// Parses and validates a config; errors name the offending JSON pointer.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut value: serde_json::Value =
            serde_path_to_error::deserialize(de).map_err(|e| config_error("/", e.into_inner().to_string()))?;
        // Check the scenario first, with full paths, then swap in its
        // canonical form.
        if let Some(raw) = value.get("scenario") {
            let scenario = scenario_from_value(raw)?;
            value["scenario"] = serde_json::to_value(scenario)?;
        }
        let config: SweepConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = pointer(e.path());
            config_error(&path, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SWEEP_SCHEMA_VERSION {
            return Err(config_error(
                "/schema_version",
                format!("unsupported schema version {}; expected {SWEEP_SCHEMA_VERSION}", self.schema_version),
            ));
        }
        if self.p_grid.is_empty() {
            return Err(config_error("/p_grid", "must be nonempty"));
        }
        if let Some(k) = self.p_grid.iter().position(|p| *p == 0) {
            return Err(config_error(&format!("/p_grid/{k}"), "dimensions must be at least 1"));
        }
        if let Some(k) = self.p_grid.windows(2).position(|w| w[0] >= w[1]) {
            return Err(config_error(&format!("/p_grid/{}", k + 1), "must be strictly ascending"));
        }
        if self.replicates == 0 {
            return Err(config_error("/replicates", "must be at least 1"));
        }
        if let Err(e) = OverlapSpec::new(self.eta, self.pi) {
            let path = if matches!(e, BoundsError::Eta(_)) { "/eta" } else { "/pi" };
            return Err(config_error(path, e.to_string()));
        }
        for (k, p) in self.p_grid.iter().enumerate() {
            self.scenario
                .with_dim(*p)
                .map_err(|e| config_error(&format!("/scenario (p_grid/{k} = {p})"), e.to_string()))?;
        }
        Ok(())
    }

    pub fn execution(&self) -> Execution {
        Execution::from_workers(self.workers)
    }

    pub fn is_exact(&self) -> bool {
        self.n == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantitySummary {
    pub quantity: String,
    /// Median across replicates at each grid point.
    pub observed: Vec<f64>,
    pub bound: Vec<f64>,
    /// Least-squares slope of log value against log p; absent when a value
    /// is not positive and finite or the grid has one point.
    pub observed_slope: Option<f64>,
    pub bound_slope: Option<f64>,
    pub all_pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub scenario: String,
    pub mode: String,
    pub eta: f64,
    pub pi: f64,
    pub p_grid: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
    pub rows: usize,
    pub failures: usize,
    pub quantities: Vec<QuantitySummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub rows: Vec<ReportRow>,
    pub summary: SweepSummary,
}

impl SweepOutcome {
    pub fn passed(&self) -> bool {
        self.summary.failures == 0
    }
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    if x.iter().chain(y).any(|v| !(v.is_finite() && *v > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(sxy / sxx)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Exact covariance operator norms of both groups, where the family has them.
fn exact_opnorms(spec: &ProcessSpec) -> Result<Option<(f64, f64)>> {
    match spec {
        ProcessSpec::BalancingScenario { .. } => Ok(None),
        _ => {
            let norm = |group| -> Result<f64> {
                let cov = processes::covariance(spec, group)?;
                linalg::operator_norm(&cov, 1e-13, 1_000_000).map_err(|e| HarnessError::Invalid(e.to_string()))
            };
            Ok(Some((norm(Group::Control)?, norm(Group::Treated)?)))
        }
    }
}

/// Analytic ceiling on the covariance operator norm of the family.
fn opnorm_ceiling(spec: &ProcessSpec) -> Option<f64> {
    match spec {
        ProcessSpec::IndependentBernoulli { .. } | ProcessSpec::LrBudgetedBernoulli { .. } => Some(0.25),
        ProcessSpec::GaussianShift { variances, .. } => Some(variances.iter().copied().fold(0.0, f64::max)),
        // Toeplitz symbol sup: gamma_0 + 2 |gamma_1|.
        ProcessSpec::Ma1 { theta, sigma2, .. } => Some(sigma2 * (1.0 + theta.abs()) * (1.0 + theta.abs())),
        ProcessSpec::Factor { .. } => processes::covariance(spec, Group::Control).ok().map(|c| c.trace()),
        ProcessSpec::BalancingScenario { .. } => None,
    }
}

fn exact_sweep_rows(spec: &ProcessSpec, config: &SweepConfig, band: LikelihoodRatioBand) -> Result<Vec<ReportRow>> {
    let p = spec.dim();
    let scenario = spec.name();
    let seed = config.seed;
    let row = |quantity: &str, observed: f64, bound: f64| {
        ReportRow::new(scenario, p, quantity, observed, bound, EXACT_TOLERANCE, seed, 0)
    };
    let mut rows = Vec::new();
    if let ProcessSpec::BalancingScenario { .. } = spec {
        let report = processes::balancing_overlap_check(spec)?;
        // Overlap on the score must carry over to the covariates.
        rows.push(row("eta_star_joint", report.eta_star_score, report.eta_star_joint));
        rows.push(row("projection_gap", report.projection_gap, 0.0));
        return Ok(rows);
    }
    let (o0, o1) = exact_opnorms(spec)?.expect("non-balancing families have covariances");
    let (mean_0, mean_1) = match spec {
        ProcessSpec::IndependentBernoulli { .. } | ProcessSpec::LrBudgetedBernoulli { .. } => {
            let (q0, q1, _) = spec.as_independent()?;
            (q0, q1)
        }
        ProcessSpec::GaussianShift { m0, m1, .. } => (m0.clone(), m1.clone()),
        _ => (vec![0.0; p], vec![0.0; p]),
    };
    let gaps: Vec<f64> = mean_0.iter().zip(&mean_1).map(|(a, b)| (a - b).abs()).collect();
    let euclid = gaps.iter().map(|d| d * d).sum::<f64>().sqrt();
    let mad = gaps.iter().sum::<f64>() / p as f64;
    rows.push(row("mean_gap", euclid, bounds::mean_discrepancy_bound(o0, o1, band)));
    rows.push(row("mad", mad, bounds::mad_bound(p, o0, o1, band)?));
    if let Some(ceiling) = opnorm_ceiling(spec) {
        rows.push(row("opnorm", o0.max(o1), ceiling));
    }
    if let Ok((q0, q1, pi)) = spec.as_independent() {
        let cert = processes::lr_certificate(&q0, &q1, pi);
        // Certified overlap of the family must reach the sweep's eta.
        rows.push(ReportRow::new(scenario, p, "eta", config.eta, cert.eta_star, EXACT_TOLERANCE, seed, 0));
        let product = processes::product_pair(spec)?;
        let chain = discrete::chain_rule_kl_product(&product);
        let kl = bounds::kl_bounds(band).forward;
        rows.push(row("kl_forward", chain.total, kl));
        rows.push(row("kl_average", chain.average(), kl / p as f64));
    }
    Ok(rows)
}

fn sampled_sweep_rows(
    spec: &ProcessSpec,
    config: &SweepConfig,
    band: LikelihoodRatioBand,
    replicate: usize,
) -> Result<Vec<ReportRow>> {
    let p = spec.dim();
    let scenario = spec.name();
    let seed = derive_seed(config.seed, p as u64, replicate as u64);
    let data = processes::sample(spec, config.n, seed)?;
    let imbalance = estimation::mean_imbalance(&data)?;
    let (o0, o1) = match exact_opnorms(spec)? {
        Some(norms) => norms,
        None => (imbalance.opnorm_0, imbalance.opnorm_1),
    };
    Ok(vec![
        ReportRow::new(
            scenario,
            p,
            "mean_gap",
            imbalance.euclidean_gap,
            bounds::mean_discrepancy_bound(o0, o1, band),
            SAMPLING_SLACK_SE * imbalance.euclidean_se(),
            seed,
            replicate,
        ),
        ReportRow::new(
            scenario,
            p,
            "mad",
            imbalance.mad,
            bounds::mad_bound(p, o0, o1, band)?,
            SAMPLING_SLACK_SE * imbalance.max_se(),
            seed,
            replicate,
        ),
    ])
}

/// Runs every (p, replicate) task and summarizes the curves.
pub fn run_sweep(config: &SweepConfig, execution: Execution) -> Result<SweepOutcome> {
    config.validate()?;
    let band = band_for(config.eta, config.pi)?;
    let replicates = if config.is_exact() { 1 } else { config.replicates };
    let tasks = config.p_grid.len() * replicates;
    let results = exec::map_indexed(tasks, execution, |task| {
        let p = config.p_grid[task / replicates];
        let replicate = task % replicates;
        let spec = config.scenario.with_dim(p)?;
        if config.is_exact() {
            exact_sweep_rows(&spec, config, band)
        } else {
            sampled_sweep_rows(&spec, config, band, replicate)
        }
    });
    let mut rows = Vec::new();
    for result in results {
        rows.extend(result?);
    }
    // Stable: quantity order within a task is preserved.
    rows.sort_by(|a, b| (&a.scenario, a.p, a.replicate).cmp(&(&b.scenario, b.p, b.replicate)));
    let summary = summarize(config, &rows);
    Ok(SweepOutcome { rows, summary })
}

fn summarize(config: &SweepConfig, rows: &[ReportRow]) -> SweepSummary {
    let mut order: Vec<String> = Vec::new();
    let mut by_quantity: BTreeMap<String, BTreeMap<usize, (Vec<f64>, Vec<f64>, bool)>> = BTreeMap::new();
    for row in rows {
        if !order.contains(&row.quantity) {
            order.push(row.quantity.clone());
        }
        let entry = by_quantity
            .entry(row.quantity.clone())
            .or_default()
            .entry(row.p)
            .or_insert_with(|| (Vec::new(), Vec::new(), true));
        entry.0.push(row.observed);
        entry.1.push(row.bound);
        entry.2 &= row.pass;
    }
    let quantities = order
        .into_iter()
        .map(|quantity| {
            let per_p = by_quantity.remove(&quantity).unwrap_or_default();
            let ps: Vec<f64> = per_p.keys().map(|p| *p as f64).collect();
            let mut observed = Vec::new();
            let mut bound = Vec::new();
            let mut all_pass = true;
            for (_, (mut obs, mut bnd, pass)) in per_p {
                observed.push(median(&mut obs));
                bound.push(median(&mut bnd));
                all_pass &= pass;
            }
            QuantitySummary {
                observed_slope: log_log_slope(&ps, &observed),
                bound_slope: log_log_slope(&ps, &bound),
                quantity,
                observed,
                bound,
                all_pass,
            }
        })
        .collect();
    SweepSummary {
        scenario: config.scenario.name().to_string(),
        mode: if config.is_exact() { "exact" } else { "sampled" }.to_string(),
        eta: config.eta,
        pi: config.pi,
        p_grid: config.p_grid.clone(),
        replicates: if config.is_exact() { 1 } else { config.replicates },
        seed: config.seed,
        rows: rows.len(),
        failures: rows.iter().filter(|r| !r.pass).count(),
        quantities,
    }
}

// ---------------------------------------------------------------------------
// Overlap-incompatibility demonstration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftCurve {
    pub n: usize,
    /// Plug-in overlap estimate per seed.
    pub eta_star_hat: Vec<f64>,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncompatibilityDemo {
    /// Gaussian location shift: plug-in overlap shrinks as `n` grows.
    pub shift: Vec<ShiftCurve>,
    pub shift_strictly_decreasing: bool,
    /// Budgeted Bernoulli family with true overlap `eta`.
    pub budgeted_eta: f64,
    pub budgeted_n: usize,
    pub budgeted_eta_star_hat: Vec<f64>,
    pub budgeted_within: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoConfig {
    pub seeds: usize,
    pub base_seed: u64,
    pub shift_p: usize,
    pub shift_ns: Vec<usize>,
    pub budgeted_eta: f64,
    pub budgeted_p: usize,
    pub budgeted_n: usize,
    /// Half-width of the acceptance window around `budgeted_eta`.
    pub window: f64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            seeds: 20,
            base_seed: 2024,
            shift_p: 2,
            shift_ns: vec![100, 1_000, 10_000],
            budgeted_eta: 0.1,
            budgeted_p: 8,
            budgeted_n: 100_000,
            window: 0.01,
        }
    }
}

/// Audits simulated data from a family without strict overlap and from one
/// with overlap exactly `eta`. Seeds are matched across sample sizes.
pub fn incompatibility_demo(config: &DemoConfig, execution: Execution) -> Result<IncompatibilityDemo> {
    let shift = ProcessSpec::GaussianShift {
        m0: vec![0.0; config.shift_p],
        m1: vec![1.0; config.shift_p],
        variances: vec![1.0; config.shift_p],
        pi: 0.5,
    };
    let audit_config = AuditConfig::default();
    let mut curves = Vec::new();
    for &n in &config.shift_ns {
        let estimates = exec::map_indexed(config.seeds, execution, |s| -> Result<f64> {
            let data = processes::sample(&shift, n, derive_seed(config.base_seed, 11, s as u64))?;
            Ok(estimation::audit(&data, &audit_config)?.eta_star_hat)
        })
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
        let mut sorted = estimates.clone();
        curves.push(ShiftCurve {
            n,
            median: median(&mut sorted),
            eta_star_hat: estimates,
        });
    }
    let shift_strictly_decreasing = curves.windows(2).all(|w| w[1].median < w[0].median);

    let budgeted = ProcessSpec::LrBudgetedBernoulli {
        eta: config.budgeted_eta,
        pi: 0.5,
        p: config.budgeted_p,
    };
    let fit_only = estimation::FitOptions::default();
    let budgeted_eta_star_hat = exec::map_indexed(config.seeds, execution, |s| -> Result<f64> {
        let data = processes::sample(&budgeted, config.budgeted_n, derive_seed(config.base_seed, 12, s as u64))?;
        let fit = estimation::fit_logistic_propensity(&data, fit_only)?;
        Ok(estimation::eta_star_plugin(&fit).eta_star)
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    let budgeted_within = budgeted_eta_star_hat
        .iter()
        .filter(|e| (**e - config.budgeted_eta).abs() <= config.window)
        .count();
    Ok(IncompatibilityDemo {
        shift: curves,
        shift_strictly_decreasing,
        budgeted_eta: config.budgeted_eta,
        budgeted_n: config.budgeted_n,
        budgeted_eta_star_hat,
        budgeted_within,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_pass_flag_follows_margin() {
        let row = ReportRow::new("s", 1, "q", 1.0, 1.0 - 1e-10, 1e-9, 0, 0);
        assert!(row.pass);
        let row = ReportRow::new("s", 1, "q", 1.0, 0.9, 1e-9, 0, 0);
        assert!(!row.pass && row.recomputed_pass() == row.pass);
        assert!(!ReportRow::new("s", 1, "q", f64::NAN, 1.0, 1e-9, 0, 0).pass);
        // Infinite bound against a finite observation passes.
        assert!(ReportRow::new("s", 1, "q", 3.0, f64::INFINITY, 0.0, 0, 0).pass);
        assert!(ReportRow::new("s", 1, "q", f64::INFINITY, f64::INFINITY, 0.0, 0, 0).pass);
    }

    #[test]
    fn report_round_trip_is_exact() {
        let rows = vec![
            ReportRow::new("a", 3, "mad", 0.1 + 0.2, 1.0 / 3.0, 1e-9, 7, 0),
            ReportRow::new("b", 4, "kl", 1e-300, f64::INFINITY, 0.0, u64::MAX, 2),
        ];
        let mut buf = Vec::new();
        write_report(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("scenario,p,quantity,observed,bound,margin,tolerance,pass,seed,replicate\n"));
        assert!(text.contains("3.0000000000000004e-1"));
        let back = read_report(buf.as_slice()).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(7, 1, 0);
        assert_ne!(a, derive_seed(7, 1, 1));
        assert_ne!(a, derive_seed(7, 2, 0));
        assert_ne!(a, derive_seed(8, 1, 0));
        assert_eq!(a, derive_seed(7, 1, 0));
    }

    #[test]
    fn bound_table_values() {
        let t = bound_table(0.1, 0.5, &[2.0, 3.0]).unwrap();
        assert!((t.b_max - 9.0).abs() < 1e-12);
        assert!((t.chi2.forward - 64.0 / 9.0).abs() < 1e-12);
        assert!((t.kl.forward - 0.8 * 9f64.ln()).abs() < 1e-12);
        assert!((t.chi_alpha[0].forward - t.chi2.forward).abs() < 1e-12);
        assert!((t.accuracy_bound - 0.9).abs() < 1e-15);
        assert!((t.tv - 0.8).abs() < 1e-12);
        let t = bound_table(0.5, 0.5, &[3.0]).unwrap();
        assert_eq!((t.chi2.forward, t.kl.forward, t.chi_alpha[0].forward, t.tv), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(bound_table(0.6, 0.5, &[]).unwrap_err().to_string(), "eta must lie in (0, 0.5], got 0.6");
    }

    #[test]
    fn verify_rejects_zero_trials() {
        let config = VerifyConfig {
            suite: Suite::Theorem1,
            trials: 0,
            seed: 1,
            execution: Execution::Sequential,
        };
        assert_eq!(run_verify(&config).unwrap_err().to_string(), "trials must be ≥ 1");
    }

    #[test]
    fn small_suites_pass() {
        for suite in Suite::SINGLE {
            let outcome = run_verify(&VerifyConfig {
                suite,
                trials: 30,
                seed: 3,
                execution: Execution::Sequential,
            })
            .unwrap();
            assert!(outcome.passed(), "{suite:?}: {:?}", outcome.violations.first());
        }
    }

    #[test]
    fn slope_of_power_law() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-0.5)).collect();
        assert!((log_log_slope(&x, &y).unwrap() + 0.5).abs() < 1e-12);
        assert!(log_log_slope(&x, &[1.0, 0.0, 1.0, 1.0]).is_none());
        assert!(log_log_slope(&[1.0], &[1.0]).is_none());
    }

    #[test]
    fn config_errors_carry_pointers() {
        let err = SweepConfig::from_json_str(
            r#"{"schema_version": 1, "scenario": {"variant": "ma1", "theta": "x", "sigma2": 1, "p": 4},
                "p_grid": [4], "eta": 0.1, "pi": 0.5}"#,
        )
        .unwrap_err();
        assert!(err.to_string().starts_with("config error at /scenario/theta"), "{err}");
        let err = SweepConfig::from_json_str(
            r#"{"schema_version": 1, "scenario": {"variant": "ma1", "theta": 0.5, "sigma2": 1, "p": 4},
                "p_grid": [8, 4], "eta": 0.1, "pi": 0.5}"#,
        )
        .unwrap_err();
        assert!(err.to_string().starts_with("config error at /p_grid/1"), "{err}");
        let err = SweepConfig::from_json_str(
            r#"{"schema_version": 1, "scenario": {"variant": "ma1", "theta": 0.5, "sigma2": 1, "p": 4},
                "p_grid": [4], "eta": 0.1, "pi": 0.5, "extra": 1}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("unknown field `extra`"), "{err}");
        let err = SweepConfig::from_json_str(
            r#"{"schema_version": 2, "scenario": {"variant": "ma1", "theta": 0.5, "sigma2": 1, "p": 4},
                "p_grid": [4], "eta": 0.1, "pi": 0.5}"#,
        )
        .unwrap_err();
        assert!(err.to_string().starts_with("config error at /schema_version"), "{err}");
    }
}
