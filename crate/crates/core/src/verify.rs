//! Certification of a computed path: spike-perturbation quotients of the
//! objective, the quadratic first-order structure, Monte Carlo checks of the
//! log-normal law of `W_T / W_t`, and a-priori bound checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintFamily;
use crate::error::{Error, Result};
use crate::market::{dot, norm_sq, GridPath, MarketModel};
use crate::preferences::{Family, PreferenceFamily};
use crate::solver::SolutionPath;

pub const DEFAULT_EPSILONS: [f64; 3] = [1e-2, 1e-3, 1e-4];
pub const PERTURBATION_TOL: f64 = 1e-4;
pub const NEGATIVE_CONTROL_THRESHOLD: f64 = 1e-2;
pub const QUADRATIC_TOL: f64 = 1e-8;
pub const Z_LIMIT: f64 = 4.0;
pub const NORMALITY_P_MIN: f64 = 1e-3;
pub const MIN_MC_SAMPLES: usize = 1000;

/// Spike perturbations at time `t`: strategy `k` on `[t, t + eps)`.
///
/// `k_samples` live in the strategy coordinates of the constraint family:
/// portfolio weights for a transformed box, exposures otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub t: f64,
    pub epsilons: Vec<f64>,
    pub k_samples: Vec<Vec<f64>>,
}

impl PerturbationSpec {
    /// The candidate's own action at `t`, the origin, and `n_k - 2` random points of `U`.
    pub fn sampled(
        m: &MarketModel,
        f: &ConstraintFamily,
        a: &GridPath,
        t: f64,
        epsilons: Vec<f64>,
        n_k: usize,
        seed: u64,
    ) -> Self {
        let cell = m.grid().cell_of(t);
        let d = m.dim();
        let mut k_samples = Vec::with_capacity(n_k);
        let own = if f.is_weight_space() {
            m.exposure_to_weights(cell, a.cell(cell))
        } else {
            Some(a.cell(cell).to_vec())
        };
        k_samples.extend(own);
        k_samples.push(vec![0.0; d]);
        let a_max = (0..a.n_cells())
            .map(|i| norm_sq(a.cell(i)).sqrt())
            .fold(0.0, f64::max);
        let radius = 2.0 * (a_max + m.max_abs_lambda()).max(0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(cell as u64);
        while k_samples.len() < n_k {
            k_samples.push(f.sample_strategy(&mut rng, radius));
        }
        k_samples.truncate(n_k.max(1));
        Self { t, epsilons, k_samples }
    }

    pub fn validate(&self, m: &MarketModel, f: &ConstraintFamily) -> Result<()> {
        let horizon = m.horizon();
        if !(self.t >= 0.0 && self.t < horizon) {
            return Err(Error::OutOfRange {
                t1: self.t,
                t2: self.t,
                horizon,
            });
        }
        if self.epsilons.is_empty()
            || self.epsilons.windows(2).any(|w| w[1] >= w[0])
            || self.epsilons.iter().any(|&e| !(e > 0.0 && e < horizon - self.t))
        {
            return Err(Error::InvalidParameter(format!(
                "epsilons must be positive, strictly decreasing and below T - t = {}",
                horizon - self.t
            )));
        }
        let cell = m.grid().cell_of(self.t);
        for k in &self.k_samples {
            if k.len() != m.dim() {
                return Err(Error::DimensionMismatch(format!(
                    "perturbation k has length {}, market dimension is {}",
                    k.len(),
                    m.dim()
                )));
            }
            let exposure = f.strategy_exposure(m, cell, k);
            if !f.contains(cell, &exposure, 1e-9) {
                return Err(Error::InvalidParameter(format!("perturbation {k:?} is not in U")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuotientRow {
    pub k: Vec<f64>,
    /// Quotient per epsilon, aligned with the spec's ladder.
    pub quotients: Vec<f64>,
    /// Richardson extrapolation of the last two quotients to `eps -> 0`.
    pub extrapolated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationTable {
    pub t: f64,
    pub epsilons: Vec<f64>,
    pub rows: Vec<QuotientRow>,
    pub max_extrapolated: f64,
}

/// `(J(t, spike) - J(t, candidate)) / eps` with `J = g(t, v, y)` and the
/// perturbed tails integrated exactly over the piecewise-constant grid.
pub fn perturbation_quotient(
    m: &MarketModel,
    f: &ConstraintFamily,
    p: &PreferenceFamily,
    a: &GridPath,
    spec: &PerturbationSpec,
) -> Result<PerturbationTable> {
    spec.validate(m, f)?;
    let t = spec.t;
    let horizon = m.horizon();
    let v = m.v_norm(a, t, horizon)?;
    let y = m.y_pair(a, t, horizon)?;
    let base = p.g(t, v, y)?.g;
    let grid = m.grid();
    let first = grid.cell_of(t);
    let mut rows = Vec::with_capacity(spec.k_samples.len());
    for k in &spec.k_samples {
        let last = grid.cell_of(t + spec.epsilons[0]);
        let exposures: Vec<Vec<f64>> = (first..=last).map(|c| f.strategy_exposure(m, c, k)).collect();
        let mut quotients = Vec::with_capacity(spec.epsilons.len());
        for &eps in &spec.epsilons {
            let dv = m.integrate_cells(t, t + eps, |c| {
                norm_sq(&exposures[c - first]) - norm_sq(a.cell(c))
            });
            let dy = m.integrate_cells(t, t + eps, |c| {
                let lam = m.lambda_at(c);
                dot(&exposures[c - first], lam) - dot(a.cell(c), lam)
            });
            let perturbed = p.g(t, v + dv, y + dy)?.g;
            quotients.push((perturbed - base) / eps);
        }
        let extrapolated = richardson(&spec.epsilons, &quotients);
        rows.push(QuotientRow {
            k: k.clone(),
            quotients,
            extrapolated,
        });
    }
    let max_extrapolated = rows.iter().map(|r| r.extrapolated).fold(f64::NEG_INFINITY, f64::max);
    Ok(PerturbationTable {
        t,
        epsilons: spec.epsilons.clone(),
        rows,
        max_extrapolated,
    })
}

/// Linear extrapolation to zero through the two smallest steps.
fn richardson(eps: &[f64], q: &[f64]) -> f64 {
    let n = q.len();
    if n < 2 {
        return q[0];
    }
    let (e1, e2) = (eps[n - 2], eps[n - 1]);
    let (q1, q2) = (q[n - 2], q[n - 1]);
    (e1 * q2 - e2 * q1) / (e1 - e2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticCheck {
    pub t: f64,
    pub samples: usize,
    /// Largest sampled value of `g_v (|k|^2 - |a|^2) + g_y lambda·(k - a)`; zero at `k = a`.
    pub max_value: f64,
    pub pass: bool,
}

/// Checks that the candidate's exposure maximizes the first-order objective over sampled points of `U_t`.
pub fn quadratic_structure(
    m: &MarketModel,
    f: &ConstraintFamily,
    p: &PreferenceFamily,
    sol: &SolutionPath,
    cell: usize,
    samples: usize,
    seed: u64,
) -> Result<QuadraticCheck> {
    let g = p.g(m.grid().node(cell), sol.v_tail[cell], sol.y_tail[cell])?;
    let a = sol.a.cell(cell);
    let lam = m.lambda_at(cell);
    let value = |k: &[f64]| g.g_v * (norm_sq(k) - norm_sq(a)) + g.g_y * (dot(k, lam) - dot(a, lam));
    let a_max = norm_sq(a).sqrt();
    let radius = 2.0 * (a_max + norm_sq(lam).sqrt()).max(0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(cell as u64);
    let mut max_value = f64::NEG_INFINITY;
    for _ in 0..samples {
        let k = f.sample_strategy(&mut rng, radius);
        let exposure = f.strategy_exposure(m, cell, &k);
        max_value = max_value.max(value(&exposure));
    }
    let scale = g.g_v.abs() * (1.0 + a_max * a_max) + g.g_y.abs() * (1.0 + a_max);
    Ok(QuadraticCheck {
        t: m.grid().node(cell),
        samples,
        max_value,
        pass: max_value <= QUADRATIC_TOL * scale,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimSpec {
    pub n_paths: usize,
    pub steps_per_cell: usize,
    pub seed: u64,
    /// Evaluation times; each must be a grid node.
    pub t_eval: Vec<f64>,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            n_paths: 100_000,
            steps_per_cell: 1,
            seed: 0,
            t_eval: vec![0.0, 0.25, 0.5, 0.75],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogReturnSamples {
    pub t_eval: Vec<f64>,
    pub nodes: Vec<usize>,
    /// `log(W_T / W_t)` per evaluation time, per path.
    pub samples: Vec<Vec<f64>>,
}

/// Exact log-wealth simulation for piecewise-constant exposures.
///
/// Path `j` draws its per-cell Brownian increments from ChaCha stream `2j` and
/// its bridge refinements from stream `2j + 1`, so results depend only on
/// `(seed, path, cell)` and the cell increments are the same for every
/// `steps_per_cell`.
pub fn simulate_wealth(m: &MarketModel, a: &GridPath, spec: &SimSpec) -> Result<LogReturnSamples> {
    if a.n_cells() != m.n_cells() || a.dim() != m.dim() {
        return Err(Error::DimensionMismatch("path does not match the market grid".into()));
    }
    if spec.n_paths == 0 || spec.steps_per_cell == 0 {
        return Err(Error::InvalidParameter("n_paths and steps_per_cell must be positive".into()));
    }
    let grid = m.grid();
    let nodes: Vec<usize> = spec
        .t_eval
        .iter()
        .map(|&t| {
            grid.node_index(t).filter(|&i| i < m.n_cells()).ok_or_else(|| {
                Error::InvalidParameter(format!("t_eval {t} is not a grid node before T"))
            })
        })
        .collect::<Result<_>>()?;
    let n = m.n_cells();
    let d = m.dim();
    let drift: Vec<f64> = (0..n)
        .map(|c| (dot(a.cell(c), m.lambda_at(c)) - 0.5 * norm_sq(a.cell(c))) * grid.dt(c))
        .collect();
    let steps = spec.steps_per_cell;

    let per_path: Vec<Vec<f64>> = (0..spec.n_paths)
        .into_par_iter()
        .map(|j| {
            let mut cell_rng = ChaCha8Rng::seed_from_u64(spec.seed);
            cell_rng.set_stream(2 * j as u64);
            let mut bridge_rng = ChaCha8Rng::seed_from_u64(spec.seed);
            bridge_rng.set_stream(2 * j as u64 + 1);
            let mut log_w = vec![0.0; n + 1];
            let mut total = vec![0.0; d];
            for c in 0..n {
                let dt = grid.dt(c);
                let sd = dt.sqrt();
                for x in total.iter_mut() {
                    *x = sd * cell_rng.sample::<f64, _>(StandardNormal);
                }
                let ac = a.cell(c);
                let mut inc = 0.0;
                if steps == 1 {
                    inc = drift[c] + dot(ac, &total);
                } else {
                    let delta = dt / steps as f64;
                    let mut remaining = total.clone();
                    for s in 0..steps {
                        let left = dt - s as f64 * delta;
                        let mut db = vec![0.0; d];
                        if s + 1 == steps {
                            db.copy_from_slice(&remaining);
                        } else {
                            let w = delta / left;
                            let sd_b = (delta * (left - delta) / left).sqrt();
                            for k in 0..d {
                                db[k] = remaining[k] * w + sd_b * bridge_rng.sample::<f64, _>(StandardNormal);
                                remaining[k] -= db[k];
                            }
                        }
                        inc += drift[c] / steps as f64 + dot(ac, &db);
                    }
                }
                log_w[c + 1] = log_w[c] + inc;
            }
            nodes.iter().map(|&i| log_w[n] - log_w[i]).collect()
        })
        .collect();

    let samples = (0..nodes.len())
        .map(|e| per_path.iter().map(|row| row[e]).collect())
        .collect();
    Ok(LogReturnSamples {
        t_eval: spec.t_eval.clone(),
        nodes,
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LognormalTest {
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    pub expected_mean: f64,
    pub expected_variance: f64,
    pub z_mean: f64,
    pub z_variance: f64,
    pub jarque_bera: f64,
    pub normality_p: f64,
    /// Zero variance: only exact agreement of the samples is checked.
    pub degenerate: bool,
    pub pass: bool,
}

/// Compares log-return samples against `N(y - v/2, v)`.
pub fn lognormal_test(samples: &[f64], v: f64, y: f64) -> LognormalTest {
    let n = samples.len();
    let expected_mean = y - 0.5 * v;
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in samples {
        let c = x - mean;
        let c2 = c * c;
        m2 += c2;
        m3 += c2 * c;
        m4 += c2 * c2;
    }
    let variance = if n > 1 { m2 / (nf - 1.0) } else { 0.0 };
    let mut out = LognormalTest {
        n,
        mean,
        variance,
        expected_mean,
        expected_variance: v,
        z_mean: 0.0,
        z_variance: 0.0,
        jarque_bera: 0.0,
        normality_p: 1.0,
        degenerate: false,
        pass: false,
    };
    if v <= 0.0 {
        out.degenerate = true;
        out.pass = samples.iter().all(|x| (x - expected_mean).abs() <= 1e-12);
        return out;
    }
    if n < MIN_MC_SAMPLES {
        return out;
    }
    out.z_mean = (mean - expected_mean) / (v / nf).sqrt();
    out.z_variance = (variance - v) / (v * (2.0 / (nf - 1.0)).sqrt());
    let (c2, c3, c4) = (m2 / nf, m3 / nf, m4 / nf);
    let skew = c3 / c2.powf(1.5);
    let kurt = c4 / (c2 * c2);
    out.jarque_bera = nf / 6.0 * (skew * skew + 0.25 * (kurt - 3.0).powi(2));
    // chi-square with two degrees of freedom
    out.normality_p = (-0.5 * out.jarque_bera).exp();
    out.pass = out.z_mean.abs() < Z_LIMIT && out.z_variance.abs() < Z_LIMIT && out.normality_p > NORMALITY_P_MIN;
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    /// A prior bound exists for the family (mean-variance and habit).
    pub applicable: bool,
    pub c1: Option<f64>,
    pub y_bound: Option<f64>,
    pub clamp_bound: Option<f64>,
    pub max_abs_y: f64,
    pub y_ok: bool,
    /// `|a·lambda| <= c1 |lambda|^2` on every cell.
    pub slope_ok: bool,
    pub clamp_inactive: bool,
    /// `|y_a(t)| <= sqrt(v_a(t)) sqrt(v_lambda(t))` at every node.
    pub cauchy_schwarz_ok: bool,
    pub h_min: f64,
    pub h_max: f64,
    pub pass: bool,
}

pub fn bounds_check(sol: &SolutionPath, p: &PreferenceFamily, m: &MarketModel) -> BoundsReport {
    let n = m.n_cells();
    let v0 = m.v_lambda_total();
    let cum = m.cum_lambda_sq();
    let rel = 1e-12;
    let max_abs_y = sol.y_tail.iter().fold(0.0f64, |s, y| s.max(y.abs()));
    let cauchy_schwarz_ok = (0..=n).all(|i| {
        let v_lambda = (v0 - cum[i]).max(0.0);
        sol.y_tail[i].abs() <= (sol.v_tail[i] * v_lambda).sqrt() * (1.0 + rel) + 1e-15
    });
    let h_min = sol.h_values.iter().copied().fold(f64::INFINITY, f64::min);
    let h_max = sol.h_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let prior = match p.family() {
        Family::MeanVariance { .. } | Family::HabitMv { .. } => p.prior_bound(v0),
        _ => None,
    };
    let mut report = BoundsReport {
        applicable: prior.is_some(),
        c1: prior.map(|b| b.c1),
        y_bound: prior.map(|b| b.y_bound),
        clamp_bound: prior.map(|b| b.m),
        max_abs_y,
        y_ok: true,
        slope_ok: true,
        clamp_inactive: true,
        cauchy_schwarz_ok,
        h_min,
        h_max,
        pass: cauchy_schwarz_ok,
    };
    if let Some(b) = prior {
        report.y_ok = max_abs_y <= b.y_bound * (1.0 + rel);
        report.slope_ok = (0..n).all(|c| {
            let lam = m.lambda_at(c);
            dot(sol.a.cell(c), lam).abs() <= b.c1 * norm_sq(lam) * (1.0 + rel)
        });
        report.clamp_inactive = h_min.abs().max(h_max.abs()) < b.m && !sol.clamp_active;
        report.pass = report.pass && report.y_ok && report.slope_ok && report.clamp_inactive;
    }
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyOptions {
    /// Perturbation times as fractions of the horizon.
    pub perturbation_fractions: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub n_k: usize,
    pub quadratic_samples: usize,
    pub seed: u64,
    pub run_monte_carlo: bool,
    pub sim: SimSpec,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            perturbation_fractions: vec![0.0, 0.25, 0.5, 0.75],
            epsilons: DEFAULT_EPSILONS.to_vec(),
            n_k: 16,
            quadratic_samples: 256,
            seed: 0,
            run_monte_carlo: true,
            sim: SimSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEntry {
    pub t: f64,
    pub v_a: f64,
    pub y_a: f64,
    pub test: LognormalTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub residual_sup: f64,
    pub residual_l2: f64,
    pub residual_limit: f64,
    pub residual_pass: bool,
    pub perturbation: Vec<PerturbationTable>,
    pub perturbation_max: f64,
    pub perturbation_pass: bool,
    /// False when the doubled path leaves the constraint set, so the control says nothing.
    pub negative_control_applicable: bool,
    pub negative_control_max: f64,
    pub negative_control_pass: bool,
    pub quadratic: Vec<QuadraticCheck>,
    pub quadratic_pass: bool,
    pub monte_carlo: Vec<MonteCarloEntry>,
    pub monte_carlo_pass: bool,
    pub bounds: BoundsReport,
    pub pass: bool,
}

/// Runs every check on an accepted solution. `fp_tol` sets the residual limit
/// `10 fp_tol (1 + max |lambda|)`.
pub fn verify_solution(
    m: &MarketModel,
    f: &ConstraintFamily,
    p: &PreferenceFamily,
    sol: &SolutionPath,
    fp_tol: f64,
    opts: &VerifyOptions,
) -> Result<VerificationReport> {
    let horizon = m.horizon();
    let residual_limit = 10.0 * fp_tol * (1.0 + m.max_abs_lambda());
    let wrong = sol.a.scaled(2.0);
    // a zero path has no wrong scaling to detect
    let trivial = sol.a.values().iter().all(|&x| x == 0.0);
    let negative_control_applicable =
        !trivial && (0..wrong.n_cells()).all(|i| f.contains(i, wrong.cell(i), 1e-12));
    let mut perturbation = Vec::new();
    let mut negative_control_max = f64::NEG_INFINITY;
    let mut quadratic = Vec::new();
    for &frac in &opts.perturbation_fractions {
        let t = frac * horizon;
        let spec = PerturbationSpec::sampled(m, f, &sol.a, t, opts.epsilons.clone(), opts.n_k, opts.seed);
        perturbation.push(perturbation_quotient(m, f, p, &sol.a, &spec)?);
        if negative_control_applicable {
            let control = perturbation_quotient(m, f, p, &wrong, &spec)?;
            negative_control_max = negative_control_max.max(control.max_extrapolated);
        }
        let cell = m.grid().cell_of(t);
        quadratic.push(quadratic_structure(m, f, p, sol, cell, opts.quadratic_samples, opts.seed)?);
    }
    let perturbation_max = perturbation
        .iter()
        .map(|t| t.max_extrapolated)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut monte_carlo = Vec::new();
    if opts.run_monte_carlo {
        let sims = simulate_wealth(m, &sol.a, &opts.sim)?;
        for (e, &node) in sims.nodes.iter().enumerate() {
            let (v, y) = (sol.v_tail[node], sol.y_tail[node]);
            monte_carlo.push(MonteCarloEntry {
                t: sims.t_eval[e],
                v_a: v,
                y_a: y,
                test: lognormal_test(&sims.samples[e], v, y),
            });
        }
    }
    let bounds = bounds_check(sol, p, m);
    let residual_pass = sol.residual_sup <= residual_limit;
    let perturbation_pass = perturbation_max <= PERTURBATION_TOL;
    let negative_control_pass = !negative_control_applicable || negative_control_max >= NEGATIVE_CONTROL_THRESHOLD;
    let quadratic_pass = quadratic.iter().all(|q| q.pass);
    let monte_carlo_pass = monte_carlo.iter().all(|e| e.test.pass);
    let pass = residual_pass
        && perturbation_pass
        && negative_control_pass
        && quadratic_pass
        && monte_carlo_pass
        && bounds.pass;
    Ok(VerificationReport {
        residual_sup: sol.residual_sup,
        residual_l2: sol.residual_l2,
        residual_limit,
        residual_pass,
        perturbation,
        perturbation_max,
        perturbation_pass,
        negative_control_applicable,
        negative_control_max,
        negative_control_pass,
        quadratic,
        quadratic_pass,
        monte_carlo,
        monte_carlo_pass,
        bounds,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::ConvexSetSpec;
    use crate::market::TimeGrid;
    use crate::preferences::RiskAversionDist;
    use crate::solver::{solve_global, ClampMode, SolveOptions};

    fn baseline(cells: usize) -> (MarketModel, ConstraintFamily, PreferenceFamily, SolutionPath) {
        let m = MarketModel::scalar(
            TimeGrid::uniform(1.0, cells).unwrap(),
            &vec![0.06; cells],
            &vec![0.2; cells],
        )
        .unwrap();
        let f = ConstraintFamily::unconstrained(&m);
        let p = PreferenceFamily::mean_variance(1.0).unwrap();
        let opts = SolveOptions {
            clamp_mode: ClampMode::MvAuto,
            ..Default::default()
        };
        let sol = solve_global(&m, &f, &p, &opts).unwrap();
        (m, f, p, sol)
    }

    #[test]
    fn richardson_removes_linear_term() {
        let eps = [1e-2, 1e-3, 1e-4];
        let q: Vec<f64> = eps.iter().map(|e| -0.3 + 7.0 * e).collect();
        assert!((richardson(&eps, &q) + 0.3).abs() < 1e-14);
    }

    #[test]
    fn own_action_quotient_vanishes() {
        let (m, f, p, sol) = baseline(400);
        for t in [0.0, 0.5] {
            let spec = PerturbationSpec::sampled(&m, &f, &sol.a, t, DEFAULT_EPSILONS.to_vec(), 16, 3);
            let table = perturbation_quotient(&m, &f, &p, &sol.a, &spec).unwrap();
            assert_eq!(table.rows.len(), 16);
            assert!(table.rows[0].extrapolated.abs() < 1e-8, "{:?}", table.rows[0]);
            assert!(table.max_extrapolated <= PERTURBATION_TOL);
            let wrong = perturbation_quotient(&m, &f, &p, &sol.a.scaled(2.0), &spec).unwrap();
            assert!(wrong.max_extrapolated >= NEGATIVE_CONTROL_THRESHOLD);
        }
    }

    #[test]
    fn single_atom_quotient_matches_closed_form() {
        // g = exp(y - gamma v / 2); a = lambda / gamma is constant
        let gamma = 2.0;
        let n = 100;
        let m = MarketModel::scalar(TimeGrid::uniform(1.0, n).unwrap(), &vec![0.06; n], &vec![0.2; n]).unwrap();
        let f = ConstraintFamily::unconstrained(&m);
        let p = PreferenceFamily::random_risk_aversion(RiskAversionDist::from_atoms(vec![(gamma, 1.0)]).unwrap());
        let a = GridPath::constant(n, &[0.15]);
        let k = 0.3 / 0.2 * 2.0;
        let t = 0.25;
        let spec = PerturbationSpec {
            t,
            epsilons: DEFAULT_EPSILONS.to_vec(),
            k_samples: vec![vec![k]],
        };
        let table = perturbation_quotient(&m, &f, &p, &a, &spec).unwrap();
        let (v, y) = (0.15f64.powi(2) * (1.0 - t), 0.045 * (1.0 - t));
        for (e, q) in spec.epsilons.iter().zip(&table.rows[0].quotients) {
            let dv = (k * k - 0.0225) * e;
            let dy = (k - 0.15) * 0.3 * e;
            let exact = ((y + dy - gamma * (v + dv) / 2.0).exp() - (y - gamma * v / 2.0).exp()) / e;
            assert!((q - exact).abs() < 1e-10 * exact.abs().max(1.0));
            assert!(*q < 0.0);
        }
        let limit = -(y - gamma * v / 2.0).exp() * (k - 0.15).powi(2);
        assert!((table.rows[0].extrapolated - limit).abs() < 1e-5 * limit.abs());
    }

    #[test]
    fn perturbation_spec_validation() {
        let (m, f, p, sol) = baseline(50);
        let bad = PerturbationSpec {
            t: 0.995,
            epsilons: vec![1e-2],
            k_samples: vec![vec![0.1]],
        };
        assert!(perturbation_quotient(&m, &f, &p, &sol.a, &bad).is_err());
        let bad = PerturbationSpec {
            t: 0.5,
            epsilons: vec![1e-3, 1e-2],
            k_samples: vec![vec![0.1]],
        };
        assert!(perturbation_quotient(&m, &f, &p, &sol.a, &bad).is_err());
        let boxed = ConstraintFamily::new(
            ConvexSetSpec::TransformedBox {
                lower: vec![0.0],
                upper: vec![0.5],
            },
            &m,
        )
        .unwrap();
        let outside = PerturbationSpec {
            t: 0.5,
            epsilons: vec![1e-2],
            k_samples: vec![vec![0.8]],
        };
        assert!(perturbation_quotient(&m, &boxed, &p, &sol.a, &outside).is_err());
    }

    #[test]
    fn generic_without_g_is_rejected() {
        let (m, f, _, sol) = baseline(50);
        let p = crate::preferences::h_from_g(
            None,
            std::sync::Arc::new(|_, v, y| -0.5 * (v + 2.0 * y).exp()),
            std::sync::Arc::new(|_, v, y| y.exp() - ((v + 2.0 * y).exp() - (2.0 * y).exp())),
        );
        let spec = PerturbationSpec {
            t: 0.0,
            epsilons: vec![1e-3],
            k_samples: vec![vec![0.1]],
        };
        assert_eq!(
            perturbation_quotient(&m, &f, &p, &sol.a, &spec).unwrap_err(),
            Error::GExposureMissing
        );
    }

    #[test]
    fn quadratic_structure_holds_at_solution() {
        let (m, f, p, sol) = baseline(200);
        for cell in [0, 100, 199] {
            let q = quadratic_structure(&m, &f, &p, &sol, cell, 500, 9).unwrap();
            assert!(q.pass, "{q:?}");
        }
    }

    #[test]
    fn zero_path_simulates_zero() {
        let m = MarketModel::scalar(TimeGrid::uniform(1.0, 8).unwrap(), &[0.06; 8], &[0.2; 8]).unwrap();
        let spec = SimSpec {
            n_paths: 50,
            steps_per_cell: 3,
            seed: 1,
            t_eval: vec![0.0, 0.5],
        };
        let s = simulate_wealth(&m, &GridPath::zeros(8, 1), &spec).unwrap();
        assert!(s.samples.iter().flatten().all(|&x| x == 0.0));
        let t = lognormal_test(&s.samples[0], 0.0, 0.0);
        assert!(t.degenerate && t.pass);
    }

    #[test]
    fn substeps_aggregate_to_cell_increments() {
        let (m, _, _, sol) = baseline(40);
        let base = SimSpec {
            n_paths: 200,
            steps_per_cell: 1,
            seed: 11,
            t_eval: vec![0.0, 0.5],
        };
        let one = simulate_wealth(&m, &sol.a, &base).unwrap();
        for steps in [2, 4] {
            let more = simulate_wealth(
                &m,
                &sol.a,
                &SimSpec {
                    steps_per_cell: steps,
                    ..base.clone()
                },
            )
            .unwrap();
            for (x, y) in one.samples.iter().flatten().zip(more.samples.iter().flatten()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        // identical seed, identical samples; different seed, different samples
        assert_eq!(one, simulate_wealth(&m, &sol.a, &base).unwrap());
        let other = simulate_wealth(&m, &sol.a, &SimSpec { seed: 12, ..base }).unwrap();
        assert_ne!(one.samples, other.samples);
    }

    #[test]
    fn simulation_rejects_off_grid_times() {
        let m = MarketModel::scalar(TimeGrid::uniform(1.0, 4).unwrap(), &[0.06; 4], &[0.2; 4]).unwrap();
        let spec = SimSpec {
            n_paths: 10,
            t_eval: vec![0.3],
            ..Default::default()
        };
        assert!(simulate_wealth(&m, &GridPath::zeros(4, 1), &spec).is_err());
    }

    #[test]
    fn lognormal_test_detects_wrong_variance() {
        let (m, _, _, sol) = baseline(100);
        let spec = SimSpec {
            n_paths: 20_000,
            steps_per_cell: 1,
            seed: 5,
            t_eval: vec![0.0],
        };
        let s = simulate_wealth(&m, &sol.a, &spec).unwrap();
        let (v, y) = (sol.v_tail[0], sol.y_tail[0]);
        assert!(lognormal_test(&s.samples[0], v, y).pass);
        assert!(!lognormal_test(&s.samples[0], 2.0 * v, y).pass);
        assert!(!lognormal_test(&s.samples[0][..500], v, y).pass);
    }

    #[test]
    fn bounds_hold_on_baseline() {
        let (m, _, p, sol) = baseline(400);
        let b = bounds_check(&sol, &p, &m);
        assert!(b.applicable && b.pass, "{b:?}");
        assert!(b.h_min > 0.0 && b.h_max <= 1.0 + 1e-12);
        let zero = MarketModel::scalar(TimeGrid::uniform(1.0, 4).unwrap(), &[0.0; 4], &[0.2; 4]).unwrap();
        let f = ConstraintFamily::unconstrained(&zero);
        let sol = solve_global(&zero, &f, &p, &SolveOptions::default()).unwrap();
        assert!(bounds_check(&sol, &p, &zero).pass);
    }

    #[test]
    fn full_report_is_reproducible() {
        let (m, f, p, sol) = baseline(200);
        let opts = VerifyOptions {
            sim: SimSpec {
                n_paths: 5_000,
                ..Default::default()
            },
            ..Default::default()
        };
        let r1 = verify_solution(&m, &f, &p, &sol, 1e-10, &opts).unwrap();
        let r2 = verify_solution(&m, &f, &p, &sol, 1e-10, &opts).unwrap();
        assert!(r1.pass, "{r1:?}");
        assert_eq!(r1, r2);
    }
}
