//! JSON problem configuration.
//!
//! Times are in years and coefficients are annualized. `sigma` matrices are
//! given row by row, row `i` being the loadings of asset `i` on the Brownian
//! components.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Deserialize;

use tieq_core::constraints::{ConstraintFamily, ConvexSetSpec};
use tieq_core::market::{build_market, MarketModel, TimeGrid};
use tieq_core::preferences::{HabitLevels, PreferenceFamily, RiskAversionDist};
use tieq_core::solver::{ClampMode, SolveOptions};
use tieq_core::verify::{SimSpec, VerifyOptions};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub schema_version: u32,
    pub market: MarketSection,
    #[serde(default = "whole_space")]
    pub constraint: ConvexSetSpec,
    pub preference: PreferenceSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub output: OutputSection,
}

fn whole_space() -> ConvexSetSpec {
    ConvexSetSpec::WholeSpace
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// `T = 1`, 2000 cells, `mu = 0.06`, `sigma = 0.2`.
    MvBaseline,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    pub preset: Option<Preset>,
    pub horizon: Option<f64>,
    pub cells: Option<usize>,
    /// Explicit grid nodes `0 = t_0 < ... < t_N = T`; overrides `horizon`/`cells`.
    pub nodes: Option<Vec<f64>>,
    pub coefficients: Option<Coefficients>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Coefficients {
    Constant {
        mu: Vec<f64>,
        sigma: Vec<Vec<f64>>,
    },
    /// Each piece applies from `start` until the next piece's start.
    Piecewise {
        pieces: Vec<Piece>,
    },
    PerCell {
        mu: Vec<Vec<f64>>,
        sigma: Vec<Vec<Vec<f64>>>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Piece {
    pub start: f64,
    pub mu: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum PreferenceSection {
    MeanVariance {
        gamma: f64,
    },
    HabitMv {
        gamma: f64,
        habit: HabitSpec,
    },
    RandomRiskAversion {
        /// `(gamma, weight)` pairs.
        atoms: Option<Vec<(f64, f64)>>,
        /// Uniform density on `[lower, upper]`.
        uniform: Option<(f64, f64)>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum HabitSpec {
    Constant(f64),
    PerCell(Vec<f64>),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub fp_tol: Option<f64>,
    pub max_iters_per_interval: Option<usize>,
    pub interval_safety: Option<f64>,
    pub min_interval_cells: Option<usize>,
    /// Defaults to `mv_auto` for mean-variance families and `off` otherwise.
    pub clamp_mode: Option<ClampMode>,
    /// Extra solves from different starting paths; 0 disables the check.
    #[serde(default)]
    pub uniqueness_starts: usize,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    pub perturbation_fractions: Option<Vec<f64>>,
    pub epsilons: Option<Vec<f64>>,
    pub n_k: Option<usize>,
    pub quadratic_samples: Option<usize>,
    pub seed: Option<u64>,
    pub monte_carlo: Option<bool>,
    pub n_paths: Option<usize>,
    pub steps_per_cell: Option<usize>,
    /// Absolute evaluation times; defaults to the grid nodes nearest `0, T/4, T/2, 3T/4`.
    pub t_eval: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    pub format: Option<Format>,
    #[serde(default = "yes")]
    pub plot: bool,
}

fn yes() -> bool {
    true
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: None,
            format: None,
            plot: true,
        }
    }
}

/// A fully built problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub market: MarketModel,
    pub spec: ConvexSetSpec,
    pub constraints: ConstraintFamily,
    pub preference: PreferenceFamily,
    pub solve: SolveOptions,
    pub uniqueness_starts: usize,
    pub verify: VerifyOptions,
}

impl ProblemConfig {
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ProblemConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn build(&self) -> Result<Problem, CliError> {
        let market = self.market.build()?;
        let constraints = ConstraintFamily::new(self.constraint.clone(), &market)
            .map_err(|e| CliError::Config(format!("constraint: {e}")))?;
        let preference = self.preference.build(&market)?;
        let defaults = SolveOptions::default();
        let default_clamp = match self.preference {
            PreferenceSection::MeanVariance { .. } | PreferenceSection::HabitMv { .. } => ClampMode::MvAuto,
            PreferenceSection::RandomRiskAversion { .. } => ClampMode::Off,
        };
        let s = &self.solver;
        let solve = SolveOptions {
            fp_tol: s.fp_tol.unwrap_or(defaults.fp_tol),
            max_iters_per_interval: s.max_iters_per_interval.unwrap_or(defaults.max_iters_per_interval),
            interval_safety: s.interval_safety.unwrap_or(defaults.interval_safety),
            min_interval_cells: s.min_interval_cells.unwrap_or(defaults.min_interval_cells),
            clamp_mode: s.clamp_mode.unwrap_or(default_clamp),
        };
        solve
            .validate()
            .map_err(|e| CliError::Config(format!("solver: {e}")))?;
        let verify = self.verify.build(&market)?;
        Ok(Problem {
            market,
            spec: self.constraint.clone(),
            constraints,
            preference,
            solve,
            uniqueness_starts: s.uniqueness_starts,
            verify,
        })
    }
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, CliError> {
    let d = rows.len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(CliError::Config(format!("{what}: sigma must be a non-empty square matrix")));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

impl MarketSection {
    pub fn build(&self) -> Result<MarketModel, CliError> {
        let baseline = self.preset == Some(Preset::MvBaseline);
        let grid = match (&self.nodes, self.horizon, self.cells) {
            (Some(nodes), _, _) => TimeGrid::from_nodes(nodes.clone()),
            (None, h, c) => {
                let (h, c) = if baseline {
                    (h.unwrap_or(1.0), c.unwrap_or(2000))
                } else {
                    (
                        h.ok_or_else(|| CliError::Config("market: missing field `horizon`".into()))?,
                        c.ok_or_else(|| CliError::Config("market: missing field `cells` (or `nodes`)".into()))?,
                    )
                };
                TimeGrid::uniform(h, c)
            }
        }
        .map_err(|e| CliError::Config(format!("market: {e}")))?;
        let n = grid.n_cells();
        let coefficients = match (&self.coefficients, baseline) {
            (Some(c), _) => c.clone(),
            (None, true) => Coefficients::Constant {
                mu: vec![0.06],
                sigma: vec![vec![0.2]],
            },
            (None, false) => return Err(CliError::Config("market: missing field `coefficients`".into())),
        };
        let (mu, sigma): (Vec<Vec<f64>>, Vec<DMatrix<f64>>) = match &coefficients {
            Coefficients::Constant { mu, sigma } => {
                let s = matrix(sigma, "market")?;
                (vec![mu.clone(); n], vec![s; n])
            }
            Coefficients::Piecewise { pieces } => {
                if pieces.is_empty() || pieces[0].start != 0.0 || pieces.windows(2).any(|w| w[1].start <= w[0].start) {
                    return Err(CliError::Config(
                        "market: pieces must start at 0 with strictly increasing starts".into(),
                    ));
                }
                let mats = pieces
                    .iter()
                    .map(|p| matrix(&p.sigma, "market piece"))
                    .collect::<Result<Vec<_>, _>>()?;
                let mut mu = Vec::with_capacity(n);
                let mut sigma = Vec::with_capacity(n);
                for i in 0..n {
                    let t = grid.node(i);
                    let k = pieces.iter().rposition(|p| p.start <= t).unwrap_or(0);
                    mu.push(pieces[k].mu.clone());
                    sigma.push(mats[k].clone());
                }
                (mu, sigma)
            }
            Coefficients::PerCell { mu, sigma } => {
                if mu.len() != n || sigma.len() != n {
                    return Err(CliError::Config(format!(
                        "market: per_cell coefficients need {n} entries, got {} mu and {} sigma",
                        mu.len(),
                        sigma.len()
                    )));
                }
                let mats = sigma
                    .iter()
                    .map(|s| matrix(s, "market"))
                    .collect::<Result<Vec<_>, _>>()?;
                (mu.clone(), mats)
            }
        };
        build_market(grid, &mu, sigma).map_err(|e| CliError::Config(format!("market: {e}")))
    }
}

impl PreferenceSection {
    pub fn build(&self, market: &MarketModel) -> Result<PreferenceFamily, CliError> {
        let wrap = |e: tieq_core::Error| CliError::Config(format!("preference: {e}"));
        match self {
            PreferenceSection::MeanVariance { gamma } => PreferenceFamily::mean_variance(*gamma).map_err(wrap),
            PreferenceSection::HabitMv { gamma, habit } => {
                let levels = match habit {
                    HabitSpec::Constant(k) => HabitLevels::constant(*k),
                    HabitSpec::PerCell(values) => HabitLevels::new(market.grid(), values.clone()),
                }
                .map_err(wrap)?;
                PreferenceFamily::habit_mv(*gamma, levels).map_err(wrap)
            }
            PreferenceSection::RandomRiskAversion { atoms, uniform } => {
                let dist = match (atoms, uniform) {
                    (Some(a), None) => RiskAversionDist::from_atoms(a.clone()),
                    (None, Some((lo, hi))) => RiskAversionDist::uniform(*lo, *hi),
                    _ => {
                        return Err(CliError::Config(
                            "preference: random_risk_aversion needs exactly one of `atoms` or `uniform`".into(),
                        ))
                    }
                }
                .map_err(wrap)?;
                Ok(PreferenceFamily::random_risk_aversion(dist))
            }
        }
    }
}

impl VerifySection {
    pub fn build(&self, market: &MarketModel) -> Result<VerifyOptions, CliError> {
        let defaults = VerifyOptions::default();
        let grid = market.grid();
        let horizon = market.horizon();
        let t_eval = match &self.t_eval {
            Some(t) => t.clone(),
            None => [0.0, 0.25, 0.5, 0.75]
                .iter()
                .map(|f| {
                    let target = f * horizon;
                    let i = grid.nodes()[..grid.n_cells()]
                        .iter()
                        .enumerate()
                        .min_by(|a, b| (a.1 - target).abs().total_cmp(&(b.1 - target).abs()))
                        .map(|(i, _)| i)
                        .unwrap_or(0);
                    grid.node(i)
                })
                .collect(),
        };
        let seed = self.seed.unwrap_or(defaults.seed);
        let sim = SimSpec {
            n_paths: self.n_paths.unwrap_or(defaults.sim.n_paths),
            steps_per_cell: self.steps_per_cell.unwrap_or(defaults.sim.steps_per_cell),
            seed,
            t_eval,
        };
        if sim.n_paths == 0 || sim.steps_per_cell == 0 {
            return Err(CliError::Config("verify: n_paths and steps_per_cell must be positive".into()));
        }
        let fractions = self
            .perturbation_fractions
            .clone()
            .unwrap_or(defaults.perturbation_fractions);
        if fractions.iter().any(|f| !(0.0..1.0).contains(f)) {
            return Err(CliError::Config("verify: perturbation_fractions must lie in [0, 1)".into()));
        }
        Ok(VerifyOptions {
            perturbation_fractions: fractions,
            epsilons: self.epsilons.clone().unwrap_or(defaults.epsilons),
            n_k: self.n_k.unwrap_or(defaults.n_k),
            quadratic_samples: self.quadratic_samples.unwrap_or(defaults.quadratic_samples),
            seed,
            run_monte_carlo: self.monte_carlo.unwrap_or(defaults.run_monte_carlo),
            sim,
        })
    }
}
