use std::path::{Path, PathBuf};

use serde::Serialize;

use tieq_core::oracle::{dense_oracle, OracleOptions};
use tieq_core::preferences::PreferenceFamily;
use tieq_core::solver::{assess_path, cross_check_uniqueness, solve_global, IntervalRecord, UniquenessReport};
use tieq_core::verify::{verify_solution, VerificationReport};

use crate::config::{Format, Problem, ProblemConfig};
use crate::error::{CliError, EXIT_OK, EXIT_VERIFICATION};
use crate::output::{read_strategy_csv, write_json, write_plot_csv, write_strategy_csv, StrategyTable};

/// Flags shared by every subcommand; they override the config's output section.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub format: Option<Format>,
}

#[derive(Debug, Serialize)]
pub struct SolveSummary {
    pub residual_sup: f64,
    pub residual_l2: f64,
    pub clamp_active: bool,
    pub clamp_bound: Option<f64>,
    pub total_iterations: usize,
    pub intervals: Vec<IntervalRecord>,
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub command: &'static str,
    pub schema_version: u32,
    pub family: &'static str,
    pub dim: usize,
    pub cells: usize,
    pub horizon: f64,
    pub solve: Option<SolveSummary>,
    pub uniqueness: Option<UniquenessReport>,
    pub verification: Option<VerificationReport>,
    /// Whether the tails stored in a re-read solution equal the recomputed ones bit for bit.
    pub stored_tails_match: Option<bool>,
    pub warnings: Vec<String>,
    pub pass: bool,
}

struct Session {
    cfg: ProblemConfig,
    problem: Problem,
    out_dir: PathBuf,
    format: Format,
}

impl Session {
    fn open(config: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let cfg = ProblemConfig::from_path(config)?;
        let mut problem = cfg.build()?;
        if let Some(seed) = overrides.seed {
            problem.verify.seed = seed;
            problem.verify.sim.seed = seed;
        }
        let out_dir = overrides
            .out_dir
            .clone()
            .or_else(|| cfg.output.dir.clone())
            .unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&out_dir).map_err(CliError::io(&out_dir))?;
        let format = overrides.format.or(cfg.output.format).unwrap_or(Format::Csv);
        Ok(Self {
            cfg,
            problem,
            out_dir,
            format,
        })
    }

    fn report(&self, command: &'static str) -> RunReport {
        let m = &self.problem.market;
        RunReport {
            command,
            schema_version: self.cfg.schema_version,
            family: self.problem.preference.name(),
            dim: m.dim(),
            cells: m.n_cells(),
            horizon: m.horizon(),
            solve: None,
            uniqueness: None,
            verification: None,
            stored_tails_match: None,
            warnings: Vec::new(),
            pass: false,
        }
    }

    fn write_table(&self, stem: &str, table: &StrategyTable) -> Result<PathBuf, CliError> {
        let path = match self.format {
            Format::Csv => self.out_dir.join(format!("{stem}.csv")),
            Format::Json => self.out_dir.join(format!("{stem}.json")),
        };
        match self.format {
            Format::Csv => write_strategy_csv(&path, table)?,
            Format::Json => write_json(&path, table)?,
        }
        Ok(path)
    }

    fn unclamped(&self) -> PreferenceFamily {
        self.problem.preference.clone().with_clamp(None)
    }
}

/// `solve`: solve, verify, write the strategy, plot data and report.
pub fn solve(config: &Path, overrides: &Overrides) -> Result<i32, CliError> {
    let s = Session::open(config, overrides)?;
    let p = &s.problem;
    let sol = solve_global(&p.market, &p.constraints, &p.preference, &p.solve)?;
    let mut report = s.report("solve");
    report.warnings.extend(sol.warnings.iter().cloned());
    if p.uniqueness_starts >= 2 {
        report.uniqueness = Some(cross_check_uniqueness(
            &p.market,
            &p.constraints,
            &p.preference,
            &p.solve,
            p.uniqueness_starts,
            p.verify.seed,
        )?);
    }
    let verification = verify_solution(&p.market, &p.constraints, &s.unclamped(), &sol, p.solve.fp_tol, &p.verify)?;
    let table = StrategyTable::new(&p.market, &sol.a, &sol.v_tail, &sol.y_tail, &sol.h_values, &mut report.warnings);
    s.write_table("strategy", &table)?;
    if s.cfg.output.plot {
        write_plot_csv(&s.out_dir.join("plot.csv"), &p.market, &p.spec, &table)?;
    }
    let uniqueness_ok = report
        .uniqueness
        .as_ref()
        .is_none_or(|u| u.max_distance <= 10.0 * p.solve.fp_tol.max(1e-9));
    report.pass = verification.pass && uniqueness_ok;
    report.solve = Some(SolveSummary {
        residual_sup: sol.residual_sup,
        residual_l2: sol.residual_l2,
        clamp_active: sol.clamp_active,
        clamp_bound: sol.clamp_bound,
        total_iterations: sol.total_iterations(),
        intervals: sol.intervals,
    });
    report.verification = Some(verification);
    finish(&s, report)
}

/// `verify`: certify a strategy CSV produced earlier for the same config.
pub fn verify(config: &Path, solution: &Path, overrides: &Overrides) -> Result<i32, CliError> {
    let s = Session::open(config, overrides)?;
    let p = &s.problem;
    let table = read_strategy_csv(solution)?;
    let m = &p.market;
    let bad = |message: String| CliError::Solution {
        path: solution.to_path_buf(),
        message,
    };
    if table.t.len() != m.n_cells() || table.dim() != m.dim() {
        return Err(bad(format!(
            "expected {} rows of dimension {}, found {} of dimension {}",
            m.n_cells(),
            m.dim(),
            table.t.len(),
            table.dim()
        )));
    }
    if let Some(i) = (0..m.n_cells()).find(|&i| (table.t[i] - m.grid().node(i)).abs() > 1e-12 * m.horizon().max(1.0)) {
        return Err(bad(format!("row {} has t = {} but the grid node is {}", i + 1, table.t[i], m.grid().node(i))));
    }
    let a = table.path().map_err(|e| bad(e.to_string()))?;
    let unclamped = s.unclamped();
    let sol = assess_path(m, &p.constraints, &unclamped, &a)?;
    let mut report = s.report("verify");
    let n = m.n_cells();
    report.stored_tails_match = Some(table.v_a == sol.v_tail[..n] && table.y_a == sol.y_tail[..n]);
    let verification = verify_solution(m, &p.constraints, &unclamped, &sol, p.solve.fp_tol, &p.verify)?;
    report.pass = verification.pass;
    report.verification = Some(verification);
    finish(&s, report)
}

/// `oracle`: brute-force reference path, sampled at the config's grid nodes.
pub fn oracle(config: &Path, overrides: &Overrides) -> Result<i32, CliError> {
    let s = Session::open(config, overrides)?;
    let p = &s.problem;
    let sol = dense_oracle(&p.market, &p.spec, &p.preference, &OracleOptions::default())?;
    let coarse = sol.coarse_values();
    let (v_fine, y_fine) = sol.tails();
    let factor = sol.refine_factor;
    let n = p.market.n_cells();
    let v: Vec<f64> = (0..=n).map(|i| v_fine[i * factor]).collect();
    let y: Vec<f64> = (0..=n).map(|i| y_fine[i * factor]).collect();
    let unclamped = s.unclamped();
    let h = (0..n)
        .map(|i| unclamped.h_raw(p.market.grid().node(i), v[i].sqrt(), y[i]))
        .collect::<Result<Vec<_>, _>>()?;
    let mut report = s.report("oracle");
    report.warnings.push(format!(
        "oracle converged in {} sweeps on a {factor}x refined grid (last update {:.3e})",
        sol.sweeps, sol.last_update
    ));
    let table = StrategyTable::new(&p.market, &coarse, &v, &y, &h, &mut report.warnings);
    s.write_table("oracle", &table)?;
    report.pass = true;
    finish(&s, report)
}

fn finish(s: &Session, report: RunReport) -> Result<i32, CliError> {
    let name = format!("{}_report.json", report.command);
    write_json(&s.out_dir.join(name), &report)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    Ok(if report.pass { EXIT_OK } else { EXIT_VERIFICATION })
}
