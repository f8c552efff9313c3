use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use overlap_core::dataset::Dataset;
use overlap_core::estimation::{self, AuditConfig, OverlapAudit};
use overlap_core::exec::Execution;
use overlap_core::harness::{self, BoundTable, Suite, SweepConfig, SweepOutcome, VerifyConfig};

const REPORT_HELP: &str = "\
CSV reports have a header row and the columns
  scenario,p,quantity,observed,bound,margin,tolerance,pass,seed,replicate
where margin = bound - observed and pass = (margin >= -tolerance).
Floats carry 17 significant digits.

Exit status: 0 when every row passes, 1 on any violation, 2 on usage,
config or input errors.";

#[derive(Parser)]
#[command(name = "overlap-lab", version, about = "Strict-overlap bounds, verification suites, sweeps and dataset audits", after_help = REPORT_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print every closed-form bound implied by an overlap regime.
    Bounds {
        /// Propensity bound, in (0, 0.5].
        #[arg(long, allow_negative_numbers = true)]
        eta: f64,
        /// Marginal treatment probability, in [eta, 1 - eta].
        #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
        pi: f64,
        /// Orders of the chi^alpha bounds (repeatable or comma-separated).
        #[arg(long = "alpha", value_delimiter = ',', default_values_t = [1.5, 3.0, 4.0])]
        alphas: Vec<f64>,
        #[arg(long)]
        json: bool,
    },
    /// Check bounds against exact oracles on seeded random instances.
    #[command(after_help = REPORT_HELP)]
    Verify {
        #[arg(long, value_enum, default_value_t = SuiteArg::All)]
        suite: SuiteArg,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, env = "OVERLAP_LAB_SEED", default_value_t = 0)]
        seed: u64,
        /// CSV report path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// 0 = all cores, 1 = sequential.
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Run a dimension sweep described by a JSON config.
    #[command(after_help = REPORT_HELP)]
    Sweep {
        config: PathBuf,
        /// CSV report path; overrides `outputs.rows`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Summary JSON path; overrides `outputs.summary`.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Overrides `workers` from the config.
        #[arg(long)]
        workers: Option<usize>,
        /// Overrides `seed` from the config.
        #[arg(long, env = "OVERLAP_LAB_SEED")]
        seed: Option<u64>,
    },
    /// Fit propensities and test a dataset against candidate overlap levels.
    Audit {
        /// CSV with a header row; every column but the treatment is a covariate.
        data: PathBuf,
        #[arg(long, default_value = "treatment")]
        treatment: String,
        /// Candidate overlap levels (comma-separated).
        #[arg(long, value_delimiter = ',')]
        eta_grid: Option<Vec<f64>>,
        /// Trimming thresholds (comma-separated).
        #[arg(long, value_delimiter = ',')]
        trim_grid: Option<Vec<f64>>,
        /// Ridge penalty; defaults to 1e-6 n.
        #[arg(long)]
        l2_penalty: Option<f64>,
        /// Audit JSON path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the audit JSON instead of the summary.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Rukhin,
    Chainrule,
    Theorem1,
    Trimming,
    All,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Rukhin => Suite::Rukhin,
            SuiteArg::Chainrule => Suite::Chainrule,
            SuiteArg::Theorem1 => Suite::Theorem1,
            SuiteArg::Trimming => Suite::Trimming,
            SuiteArg::All => Suite::All,
        }
    }
}

enum Status {
    Pass,
    Violation,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Status::Pass) => ExitCode::SUCCESS,
        Ok(Status::Violation) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> anyhow::Result<Status> {
    match command {
        Command::Bounds { eta, pi, alphas, json } => {
            let table = harness::bound_table(eta, pi, &alphas)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&table)?);
            } else {
                print!("{}", render_bounds(&table));
            }
            Ok(Status::Pass)
        }
        Command::Verify {
            suite,
            trials,
            seed,
            out,
            workers,
        } => verify(suite.into(), trials, seed, out, workers),
        Command::Sweep {
            config,
            out,
            summary,
            workers,
            seed,
        } => sweep(config, out, summary, workers, seed),
        Command::Audit {
            data,
            treatment,
            eta_grid,
            trim_grid,
            l2_penalty,
            out,
            json,
        } => audit(data, &treatment, eta_grid, trim_grid, l2_penalty, out, json),
    }
}

/// Six significant decimals with trailing zeros dropped.
fn short(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    let text = format!("{v:.6}");
    let text = text.trim_end_matches('0').trim_end_matches('.');
    if text == "-0" {
        "0".to_string()
    } else {
        text.to_string()
    }
}

fn render_bounds(t: &BoundTable) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "eta = {}, pi = {}", short(t.eta), short(t.pi));
    let _ = writeln!(s, "b_min = {}", short(t.b_min));
    let _ = writeln!(s, "b_max = {}", short(t.b_max));
    let _ = writeln!(s, "{:<16} {:>14} {:>14}", "divergence", "forward", "reverse");
    let mut line = |name: String, f: f64, r: f64| {
        let _ = writeln!(s, "{:<16} {:>14} {:>14}", name, short(f), short(r));
    };
    line("chi2".into(), t.chi2.forward, t.chi2.reverse);
    line("kl".into(), t.kl.forward, t.kl.reverse);
    for a in &t.chi_alpha {
        line(format!("chi_alpha({})", short(a.alpha)), a.forward, a.reverse);
    }
    line("tv".into(), t.tv, t.tv);
    let _ = writeln!(s, "classifier accuracy <= {}", short(t.accuracy_bound));
    s
}

fn verify(suite: Suite, trials: usize, seed: u64, out: Option<PathBuf>, workers: usize) -> anyhow::Result<Status> {
    if trials == 0 {
        bail!("trials must be ≥ 1");
    }
    let config = VerifyConfig {
        suite,
        trials,
        seed,
        execution: Execution::from_workers(workers),
    };
    let outcome = harness::run_verify(&config)?;
    if let Some(path) = &out {
        harness::write_report_path(&outcome.rows, path).with_context(|| format!("writing {}", path.display()))?;
    }
    let failed = outcome.rows.iter().filter(|r| !r.pass).count();
    println!(
        "suite {} seed {seed}: {} rows, {} passed, {failed} failed",
        suite.label(),
        outcome.rows.len(),
        outcome.rows.len() - failed
    );
    for violation in &outcome.violations {
        eprintln!("{}", serde_json::to_string(violation)?);
    }
    Ok(if outcome.passed() { Status::Pass } else { Status::Violation })
}

fn sweep(
    path: PathBuf,
    out: Option<PathBuf>,
    summary_path: Option<PathBuf>,
    workers: Option<usize>,
    seed: Option<u64>,
) -> anyhow::Result<Status> {
    let mut config = SweepConfig::from_path(&path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let execution = Execution::from_workers(workers.unwrap_or(config.workers));
    let outcome = harness::run_sweep(&config, execution)?;
    let rows_path = out.or_else(|| config.outputs.rows.clone());
    let summary_path = summary_path.or_else(|| config.outputs.summary.clone());
    if let Some(p) = &rows_path {
        harness::write_report_path(&outcome.rows, p).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &summary_path {
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let mut text = serde_json::to_string_pretty(&outcome.summary)?;
        text.push('\n');
        std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    print!("{}", render_sweep(&outcome));
    for row in outcome.rows.iter().filter(|r| !r.pass) {
        eprintln!("{}", serde_json::to_string(row)?);
    }
    Ok(if outcome.passed() { Status::Pass } else { Status::Violation })
}

fn slope_text(slope: Option<f64>) -> String {
    slope.map_or_else(|| "-".to_string(), |s| format!("{s:.4}"))
}

fn render_sweep(outcome: &SweepOutcome) -> String {
    let s = &outcome.summary;
    let mut text = String::new();
    let _ = writeln!(
        text,
        "sweep {} ({} mode), eta {}, pi {}, p in {:?}: {} rows, {} failed",
        s.scenario,
        s.mode,
        short(s.eta),
        short(s.pi),
        s.p_grid,
        s.rows,
        s.failures
    );
    let _ = writeln!(text, "{:<16} {:>14} {:>14} {:>6}", "quantity", "observed slope", "bound slope", "pass");
    for q in &s.quantities {
        let _ = writeln!(
            text,
            "{:<16} {:>14} {:>14} {:>6}",
            q.quantity,
            slope_text(q.observed_slope),
            slope_text(q.bound_slope),
            q.all_pass
        );
    }
    text
}

fn audit(
    data: PathBuf,
    treatment: &str,
    eta_grid: Option<Vec<f64>>,
    trim_grid: Option<Vec<f64>>,
    l2_penalty: Option<f64>,
    out: Option<PathBuf>,
    json: bool,
) -> anyhow::Result<Status> {
    let dataset = Dataset::from_csv_path(&data, treatment).with_context(|| format!("reading {}", data.display()))?;
    let mut config = AuditConfig::default();
    if let Some(grid) = eta_grid {
        config.candidate_etas = grid;
    }
    if let Some(grid) = trim_grid {
        config.trimming_grid = grid;
    }
    config.fit.l2_penalty = l2_penalty;
    let report = estimation::audit(&dataset, &config)?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    if let Some(p) = &out {
        std::fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
    }
    if json {
        print!("{text}");
    } else {
        print!("{}", render_audit(&report));
    }
    Ok(Status::Pass)
}

fn render_audit(a: &OverlapAudit) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "n = {}, p = {}, treated fraction {}", a.n, a.p, short(a.treated_fraction));
    if a.wide {
        let _ = writeln!(s, "warning: fewer rows than covariates");
    }
    let _ = writeln!(
        s,
        "eta_star_hat = {} (att {}, atc {})",
        short(a.eta_star_hat),
        short(a.eta_att_hat),
        short(a.eta_atc_hat)
    );
    let _ = writeln!(s, "bayes_accuracy_hat = {}", short(a.bayes_accuracy_hat));
    let _ = writeln!(s, "mad = {}, euclidean gap = {}", short(a.mad_observed), short(a.euclidean_gap));
    let _ = writeln!(s, "\n{:>8} {:>12} {:>12} {:>6}", "eta", "retained", "bound", "holds");
    for t in &a.trimming_curve {
        let _ = writeln!(
            s,
            "{:>8} {:>12} {:>12} {:>6}",
            short(t.eta_tilde),
            short(t.retained_fraction),
            short(t.retention_bound),
            t.holds
        );
    }
    let _ = writeln!(s, "\n{:>8} {:>10} {:>10} {:>10} {:>10}  verdict", "eta", "pi", "accuracy", "mad", "mean gap");
    let mark = |ok: bool| if ok { "ok" } else { "exceeds" };
    for v in &a.verdicts {
        let _ = writeln!(
            s,
            "{:>8} {:>10} {:>10} {:>10} {:>10}  {}",
            short(v.eta),
            mark(v.pi_ok),
            mark(v.accuracy_ok),
            mark(v.mad_ok),
            mark(v.mean_ok),
            if v.consistent { "consistent" } else { "inconsistent" }
        );
    }
    match a.largest_consistent_eta() {
        Some(eta) => {
            let _ = writeln!(s, "largest consistent candidate: {}", short(eta));
        }
        None => {
            let _ = writeln!(s, "no candidate is consistent with the data: overlap-incompatible");
        }
    }
    s
}
