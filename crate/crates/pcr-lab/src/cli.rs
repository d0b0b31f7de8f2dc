//! Command-line entry points.
//!
//! Five subcommands share one configuration schema ([`StudyConfig`] in
//! TOML):
//! - `identities`: run the grid with only the exact-identity suite,
//! - `inequalities`: run it with the inequality and alignment suites,
//! - `mc`: run it with whatever suites the config enables,
//! - `rates`: a rate study (slope fit, bootstrap interval, oracle
//!   comparison, pilot ceiling),
//! - `grouping`: spectral gap diagnostics and a normalized gap-sum sweep.
//!
//! Every run writes its replicate table (`replicates.csv`), an aggregate
//! summary (`summary.json`), and a manifest (`manifest.json`) into `--out`,
//! which must already exist. Exit code 0 means every enabled check passed;
//! 1 means the run completed but some check failed; 2 means the invocation
//! or configuration was unusable. Reruns with the same configuration and
//! seed produce byte-identical files.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::harness::{
    mc_study, oracle_pilot_ceiling, rate_study, StudyConfig, StudyOutput, SuiteToggles,
};
use crate::report::{write_csv, write_json, RunManifest};
use crate::risk::{CsvCell, RiskReport};
use crate::spectrum::{log_er, GapReport, GapSearch, Grouping};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "pcr-lab",
    version,
    about = "Exact risk accounting for principal component regression"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the exact risk identities on every replicate.
    Identities(RunArgs),
    /// Check the deterministic risk inequalities on every replicate.
    Inequalities(RunArgs),
    /// Full Monte Carlo study with the suites enabled by the config.
    Mc(RunArgs),
    /// Convergence-rate study: slope fit, bootstrap interval, oracle ratio.
    Rates(RunArgs),
    /// Spectral gap diagnostics and the normalized gap-sum sweep.
    Grouping(GroupingArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Study configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; must already exist.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the master seed from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct GroupingArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Largest index swept; defaults to min(p - 1, 10000).
    #[arg(long)]
    pub r_max: Option<usize>,
    /// Fail (exit 1) if the running max of the normalized gap sum grows by
    /// 20% or more across the top decade of the sweep.
    #[arg(long, default_value_t = false)]
    pub assert_stable_decade: bool,
}

/// Parse `args` and run. Returns the process exit code (0 pass, 1 checks
/// failed, 2 unusable invocation or configuration).
pub fn run_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests print to stdout and succeed; real
            // parse errors are usage errors.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Identities(args) => cmd_identities(&args),
        Command::Inequalities(args) => cmd_inequalities(&args),
        Command::Mc(args) => cmd_mc(&args),
        Command::Rates(args) => cmd_rates(&args),
        Command::Grouping(args) => cmd_grouping(&args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Identity suite only: every other evaluation is switched off.
pub fn cmd_identities(args: &RunArgs) -> Result<i32> {
    run_study("identities", args, |suites| {
        *suites = SuiteToggles {
            identities: true,
            inequalities: false,
            alignment: false,
            oracle: false,
        };
    })
}

/// Inequality and alignment suites only.
pub fn cmd_inequalities(args: &RunArgs) -> Result<i32> {
    run_study("inequalities", args, |suites| {
        *suites = SuiteToggles {
            identities: false,
            inequalities: true,
            alignment: true,
            oracle: false,
        };
    })
}

/// Full study with the configured suites.
pub fn cmd_mc(args: &RunArgs) -> Result<i32> {
    run_study("mc", args, |_| {})
}

/// Rate study; also computes the oracle pilot ceiling when the oracle suite
/// is enabled, and asserts the configured slope window if one is set.
pub fn cmd_rates(args: &RunArgs) -> Result<i32> {
    run_study("rates", args, |_| {})
}

/// Aggregate summary written next to the replicate table.
#[derive(Debug, Serialize)]
struct RunSummary<'a> {
    command: &'a str,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pilot_ceiling: Option<f64>,
    /// Human-readable reasons for a nonzero exit; empty means pass.
    failures: &'a [String],
    report: &'a crate::harness::StudyReport,
}

fn run_study(
    command: &'static str,
    args: &RunArgs,
    adjust_suites: impl FnOnce(&mut SuiteToggles),
) -> Result<i32> {
    require_dir(&args.out)?;
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    adjust_suites(&mut cfg.suites);
    if cfg.slope_target.is_some() != cfg.slope_tolerance.is_some() {
        return Err(Error::config(
            "slope_target and slope_tolerance must be set together",
        ));
    }
    init_threads(args.threads);

    let (output, pilot_ceiling): (StudyOutput, Option<f64>) = if command == "rates" {
        let output = rate_study(&cfg)?;
        let ceiling = if cfg.suites.oracle {
            Some(oracle_pilot_ceiling(&cfg)?)
        } else {
            None
        };
        (output, ceiling)
    } else {
        (mc_study(&cfg)?, None)
    };

    let mut failures = Vec::new();
    if output.report.total_violation_count > 0 {
        failures.push(format!(
            "{} check violations ({})",
            output.report.total_violation_count,
            output
                .report
                .violations_total
                .keys()
                .cloned()
                .collect::<Vec<_>>()
                .join(", ")
        ));
    }
    if let (Some(target), Some(tolerance)) = (cfg.slope_target, cfg.slope_tolerance) {
        match &output.report.slope {
            Some(s) if (s.slope - target).abs() <= tolerance => {}
            Some(s) => failures.push(format!(
                "slope {:.4} outside {target} +/- {tolerance}",
                s.slope
            )),
            None => failures.push("a slope window is set but no slope was fitted".into()),
        }
    }
    if let Some(ceiling) = pilot_ceiling {
        let ratio_at_n_max = output
            .report
            .oracle
            .as_ref()
            .and_then(|cmp| cmp.points.last())
            .and_then(|pt| pt.ratio);
        // An undefined ratio stays a flag in the report, not a failure.
        if let Some(ratio) = ratio_at_n_max {
            if ratio > ceiling {
                failures.push(format!(
                    "risk ratio {ratio:.4} at the largest n exceeds the pilot ceiling {ceiling:.4}"
                ));
            }
        }
    }

    write_csv(
        &args.out.join("replicates.csv"),
        RiskReport::csv_header(),
        output.replicates.iter().map(|r| r.csv_row()),
    )?;
    write_json(
        &args.out.join("summary.json"),
        &RunSummary {
            command,
            seed: cfg.seed,
            pilot_ceiling,
            failures: &failures,
            report: &output.report,
        },
    )?;
    write_manifest(
        command,
        args,
        &cfg,
        vec!["replicates.csv".into(), "summary.json".into()],
        pilot_ceiling,
    )?;

    for row in &output.report.per_n {
        let risk = row.stats.get("pcr_risk").and_then(|s| s.mean);
        println!(
            "[{command}] n = {}  d = {}  r = {}  mean risk = {}  violations = {}",
            row.n,
            row.d,
            row.r,
            risk.map_or("n/a".into(), |v| format!("{v:.6e}")),
            row.violations.values().sum::<u64>(),
        );
        if let Some(res) = row.max_identity_residual {
            println!("[{command}]   max identity residual = {res:.3e}");
        }
    }
    if let Some(slope) = &output.report.slope {
        let ci = slope
            .bootstrap_ci
            .map_or("n/a".into(), |(lo, hi)| format!("[{lo:.4}, {hi:.4}]"));
        println!(
            "[{command}] {} slope = {:.4}  r2 = {:.4}  bootstrap 95% {ci}",
            slope.statistic, slope.slope, slope.r2
        );
    }
    if let Some(reason) = &output.report.slope_skipped {
        println!("[{command}] slope fit skipped: {reason}");
    }
    if let Some(ceiling) = pilot_ceiling {
        println!("[{command}] oracle pilot ceiling = {ceiling:.4}");
    }
    finish(command, &failures)
}

/// Gap diagnostics at one grid point.
#[derive(Debug, Serialize)]
struct GapDiagnostics {
    n: usize,
    d: usize,
    /// Gap sums at the cut itself; `None` when d = p.
    gap: Option<GapReport>,
    /// Best windowed cut at or below d; needs d >= 2.
    below: Option<GapSearch>,
    /// Best windowed cut at or above d.
    above: Option<GapSearch>,
    grouping: Grouping,
}

#[derive(Debug, Serialize)]
struct SweepSummary {
    r_max: usize,
    defined_rows: usize,
    zero_gap_rows: usize,
    /// Running max of the normalized gap sum at r_max / 10 and at r_max.
    cummax_at_decade_start: Option<f64>,
    cummax_at_r_max: Option<f64>,
    /// Their ratio; stable spectra stay below 1.2.
    top_decade_ratio: Option<f64>,
}

#[derive(Debug, Serialize)]
struct GroupingSummary<'a> {
    command: &'a str,
    per_n: Vec<GapDiagnostics>,
    sweep: SweepSummary,
    failures: &'a [String],
}

/// Gap diagnostics per grid point plus a sweep of the normalized gap sum
/// `(sum_below + sum_above) / (r log(er))` over `r`, with its running max.
/// With `--assert-stable-decade`, exits 1 if that running max grows by 20%
/// or more across the top decade; spectra where the ratio is undefined
/// (zero gaps everywhere) are flagged but pass.
pub fn cmd_grouping(args: &GroupingArgs) -> Result<i32> {
    let command = "grouping";
    require_dir(&args.run.out)?;
    let mut cfg = load_config(&args.run.config)?;
    if let Some(seed) = args.run.seed {
        cfg.seed = seed;
    }
    init_threads(args.run.threads);
    let study = cfg.resolve()?;
    let spectrum = &study.spectrum;
    let p = spectrum.p();

    let mut per_n = Vec::with_capacity(study.plans.len());
    for plan in &study.plans {
        let d = plan.d;
        let gap = (d < p).then(|| spectrum.gap_report(d)).transpose()?;
        let below = if d >= 2 {
            spectrum.find_gap_index_below(d, 0.5)?
        } else {
            None
        };
        let above = spectrum.find_gap_index_above(d, 2.0)?;
        per_n.push(GapDiagnostics {
            n: plan.n,
            d,
            gap,
            below,
            above,
            grouping: plan.grouping.clone(),
        });
    }

    let r_max = args.r_max.unwrap_or(10_000).min(p.saturating_sub(1)).max(2);
    let decade_start = r_max / 10;
    let mut rows = Vec::with_capacity(r_max.saturating_sub(1));
    let mut cummax: Option<f64> = None;
    let mut cummax_at_decade_start = None;
    let mut defined_rows = 0usize;
    let mut zero_gap_rows = 0usize;
    for r in 2..=r_max {
        let report = spectrum.gap_report(r)?;
        let row = match report.sums {
            Some(sums) => {
                let normalized = (sums.sum_below + sums.sum_above) / (r as f64 * log_er(r));
                cummax = Some(cummax.map_or(normalized, |m: f64| m.max(normalized)));
                defined_rows += 1;
                vec![
                    CsvCell::UInt(r as u64),
                    CsvCell::Float(sums.sum_below),
                    CsvCell::Float(sums.sum_above),
                    CsvCell::Float(sums.rel_gap),
                    CsvCell::Float(normalized),
                    cummax.map_or(CsvCell::Missing, CsvCell::Float),
                ]
            }
            None => {
                zero_gap_rows += 1;
                vec![
                    CsvCell::UInt(r as u64),
                    CsvCell::Missing,
                    CsvCell::Missing,
                    CsvCell::Missing,
                    CsvCell::Missing,
                    cummax.map_or(CsvCell::Missing, CsvCell::Float),
                ]
            }
        };
        rows.push(row);
        if r == decade_start {
            cummax_at_decade_start = cummax;
        }
    }
    let top_decade_ratio = match (cummax_at_decade_start, cummax) {
        (Some(start), Some(end)) if start > 0.0 => Some(end / start),
        _ => None,
    };

    let mut failures = Vec::new();
    if args.assert_stable_decade {
        match top_decade_ratio {
            Some(ratio) if ratio >= 1.2 => failures.push(format!(
                "normalized gap-sum running max grew by {:.1}% over the top decade",
                (ratio - 1.0) * 100.0
            )),
            Some(_) => {}
            // Flat spectra have no defined ratio; flagged above, not failed.
            None => println!("[{command}] top-decade ratio undefined (zero gaps)"),
        }
    }

    write_csv(
        &args.run.out.join("gaps.csv"),
        &["r", "sum_below", "sum_above", "rel_gap", "normalized", "cummax"],
        rows,
    )?;
    let sweep = SweepSummary {
        r_max,
        defined_rows,
        zero_gap_rows,
        cummax_at_decade_start,
        cummax_at_r_max: cummax,
        top_decade_ratio,
    };
    write_json(
        &args.run.out.join("summary.json"),
        &GroupingSummary {
            command,
            per_n,
            sweep,
            failures: &failures,
        },
    )?;
    write_manifest(
        command,
        &args.run,
        &cfg,
        vec!["gaps.csv".into(), "summary.json".into()],
        None,
    )?;

    if let Some(ratio) = top_decade_ratio {
        println!("[{command}] normalized gap-sum cummax ratio over top decade = {ratio:.4}");
    }
    finish(command, &failures)
}

fn write_manifest(
    command: &str,
    args: &RunArgs,
    cfg: &StudyConfig,
    outputs: Vec<String>,
    pilot_ceiling: Option<f64>,
) -> Result<()> {
    write_json(
        &args.out.join("manifest.json"),
        &RunManifest {
            command: command.to_string(),
            config_path: args.config.display().to_string(),
            config: cfg.clone(),
            seed: cfg.seed,
            code_version: RunManifest::code_version(),
            outputs,
            pilot_ceiling,
        },
    )
}

fn finish(command: &str, failures: &[String]) -> Result<i32> {
    if failures.is_empty() {
        println!("[{command}] PASS");
        Ok(0)
    } else {
        for failure in failures {
            println!("[{command}] FAIL: {failure}");
        }
        Ok(1)
    }
}

fn require_dir(path: &Path) -> Result<()> {
    if !path.is_dir() {
        return Err(Error::config(format!(
            "output directory {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

fn load_config(path: &Path) -> Result<StudyConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(format!("reading {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::config(format!("parsing {}: {e}", path.display())))
}

/// Install a fixed-size global worker pool. A second call in the same
/// process keeps the first pool; results do not depend on the pool size.
fn init_threads(threads: usize) {
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}
