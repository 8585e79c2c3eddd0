//! Preference families and their `h(t, x, y)` functions.
//!
//! Every family is described by the value functional
//! `J(t, pi) = g(t, v_a(t), y_a(t))` of a deterministic strategy and its
//! equilibrium multiplier `h(t, x, y) = -g_y(t, x^2, y) / (2 g_v(t, x^2, y))`.
//! The mean-variance, habit and random-risk-aversion families use closed
//! forms; [`h_from_g`] wraps arbitrary user supplied derivatives.

use std::fmt;
use std::sync::Arc;

use gauss_quad::legendre::GaussLegendre;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintFamily;
use crate::error::{Error, Result};
use crate::market::{MarketModel, TimeGrid};

/// Exponents above this overflow-guard are rejected.
pub const EXP_GUARD: f64 = 700.0;
/// Quadrature order for continuous risk-aversion distributions.
pub const DENSITY_QUADRATURE_ORDER: usize = 64;
/// Safety factor applied to sampled Lipschitz constants.
pub const SAMPLED_LIPSCHITZ_SAFETY: f64 = 1.5;

#[inline]
pub(crate) fn exp_checked(z: f64) -> Result<f64> {
    if z > EXP_GUARD || z.is_nan() {
        Err(Error::NumericOverflow { exponent: z })
    } else {
        Ok(z.exp())
    }
}

/// `(t, v, y) -> value`.
pub type Evaluator = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct GenericG {
    g: Option<Evaluator>,
    g_v: Evaluator,
    g_y: Evaluator,
}

impl fmt::Debug for GenericG {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GenericG")
            .field("g", &self.g.as_ref().map(|_| "<fn>"))
            .finish_non_exhaustive()
    }
}

/// Right-continuous piecewise-constant habit level `k(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HabitLevels {
    nodes: Vec<f64>,
    values: Vec<f64>,
}

impl HabitLevels {
    pub fn constant(level: f64) -> Result<Self> {
        Self::new(&TimeGrid::from_nodes(vec![0.0, f64::MAX])?, vec![level])
    }

    pub fn new(grid: &TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(Error::DimensionMismatch(format!(
                "habit path has {} cells, grid has {}",
                values.len(),
                grid.n_cells()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("habit levels must be finite".into()));
        }
        Ok(Self {
            nodes: grid.nodes().to_vec(),
            values,
        })
    }

    pub fn at(&self, t: f64) -> f64 {
        let idx = self.nodes.partition_point(|&n| n <= t);
        self.values[idx.saturating_sub(1).min(self.values.len() - 1)]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Discrete distribution of the random risk aversion `R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskAversionDist {
    atoms: Vec<(f64, f64)>,
    support_lower: f64,
    support_upper: f64,
}

/// Tilted moments `E[R^j e^{-R x^2/2}]`, j = 0, 1, 2, all multiplied by `e^{gamma_0 x^2/2}`.
#[derive(Debug, Clone, Copy)]
struct Tilted {
    /// `E_q[R]`, accumulated as `gamma_0 + E_q[R - gamma_0]`.
    mean: f64,
    var: f64,
}

impl RiskAversionDist {
    /// Atoms `(gamma_i, weight_i)` with weights summing to one.
    pub fn from_atoms(atoms: Vec<(f64, f64)>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidParameter("risk-aversion distribution has no atoms".into()));
        }
        for &(g, w) in &atoms {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::InvalidParameter(format!("atom gamma {g} must be > 0")));
            }
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::InvalidParameter(format!("atom weight {w} must be > 0")));
            }
        }
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "atom weights sum to {total}, expected 1"
            )));
        }
        let lower = atoms.iter().map(|a| a.0).fold(f64::INFINITY, f64::min);
        let upper = atoms.iter().map(|a| a.0).fold(0.0, f64::max);
        Ok(Self {
            atoms,
            support_lower: lower,
            support_upper: upper,
        })
    }

    /// Continuous density on `[lower, upper]`, discretized by Gauss-Legendre quadrature.
    /// The density need not be normalized.
    pub fn from_density(lower: f64, upper: f64, density: impl Fn(f64) -> f64) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite() && 0.0 < lower && lower < upper) {
            return Err(Error::InvalidParameter(format!(
                "density support [{lower}, {upper}] must satisfy 0 < lower < upper"
            )));
        }
        let rule = GaussLegendre::new(DENSITY_QUADRATURE_ORDER)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let half = 0.5 * (upper - lower);
        let mid = 0.5 * (upper + lower);
        let mut atoms: Vec<(f64, f64)> = rule
            .as_node_weight_pairs()
            .iter()
            .map(|&(x, w)| {
                let g = mid + half * x;
                (g, w * half * density(g))
            })
            .collect();
        if atoms.iter().any(|a| !(a.1.is_finite() && a.1 >= 0.0)) {
            return Err(Error::InvalidParameter("density must be finite and non-negative".into()));
        }
        atoms.retain(|a| a.1 > 0.0);
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        if !(total > 0.0) {
            return Err(Error::InvalidParameter("density integrates to zero".into()));
        }
        for a in &mut atoms {
            a.1 /= total;
        }
        Ok(Self {
            atoms,
            support_lower: lower,
            support_upper: upper,
        })
    }

    pub fn uniform(lower: f64, upper: f64) -> Result<Self> {
        Self::from_density(lower, upper, |_| 1.0)
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn support_lower(&self) -> f64 {
        self.support_lower
    }

    pub fn support_upper(&self) -> f64 {
        self.support_upper
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().map(|(g, w)| g * w).sum()
    }

    pub fn second_moment(&self) -> f64 {
        self.atoms.iter().map(|(g, w)| g * g * w).sum()
    }

    fn tilted(&self, x: f64) -> Tilted {
        let half_x2 = 0.5 * x * x;
        let g0 = self.support_lower;
        let mut m0 = 0.0;
        let mut excess = 0.0;
        for &(g, w) in &self.atoms {
            let e = w * (-(g - g0) * half_x2).exp();
            m0 += e;
            excess += e * (g - g0);
        }
        // the excess form keeps h <= 1/gamma_0 and avoids ulp-level dips where h saturates
        let mean = g0 + excess / m0;
        let mut var = 0.0;
        for &(g, w) in &self.atoms {
            let e = w * (-(g - g0) * half_x2).exp();
            var += e * (g - mean) * (g - mean);
        }
        Tilted { mean, var: var / m0 }
    }

    /// `h(x) = E[e^{-R x^2/2}] / E[R e^{-R x^2/2}]`.
    pub fn h(&self, x: f64) -> f64 {
        1.0 / self.tilted(x).mean
    }

    /// `E[e^{-R v/2}]`.
    fn laplace(&self, v: f64) -> Result<(f64, f64)> {
        let mut m0 = 0.0;
        let mut m1 = 0.0;
        for &(g, w) in &self.atoms {
            let e = w * exp_checked(-0.5 * g * v)?;
            m0 += e;
            m1 += e * g;
        }
        Ok((m0, m1))
    }
}

/// `dh/dx` for random risk aversion: `x Var_q(R) h(x)^2` under the tilted law
/// `q ∝ e^{-R x^2/2} dGamma`, obtained from the quotient rule on
/// `f = E[e^{-R x^2/2}]` and its first two derivatives.
pub fn rra_h_derivative(dist: &RiskAversionDist, x: f64) -> f64 {
    let t = dist.tilted(x);
    let h = 1.0 / t.mean;
    x * t.var * h * h
}

#[derive(Debug, Clone)]
pub enum Family {
    MeanVariance { gamma: f64 },
    HabitMv { gamma: f64, habit: HabitLevels },
    RandomRiskAversion(RiskAversionDist),
    GenericG(GenericG),
}

/// Value of `g` and its partial derivatives at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GValues {
    pub g: f64,
    pub g_v: f64,
    pub g_y: f64,
}

/// Box `[0, x_max] x [y_min, y_max]` on which a Lipschitz constant is sought.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzBox {
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

/// A-priori constants for mean-variance type families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorBound {
    /// `|y_a'(t)| <= c1 |lambda(t)|^2`.
    pub c1: f64,
    /// `|y_a(t)| <= y_bound = c1 v_lambda(0)`.
    pub y_bound: f64,
    /// `|h| <= m` on `x >= 0, |y| <= y_bound`.
    pub m: f64,
}

/// Mean-variance prior bound: `c1 = 2 + e^{v_lambda(0)/4}/gamma`, `y_bound = c1 v_lambda(0)`,
/// `m = max(1, e^{y_bound}/gamma + 1)`.
pub fn mv_prior_bound(gamma: f64, v_lambda_0: f64) -> PriorBound {
    let c1 = 2.0 + (0.25 * v_lambda_0).exp() / gamma;
    let y_bound = c1 * v_lambda_0;
    let m = (y_bound.exp() / gamma + 1.0).max(1.0);
    PriorBound { c1, y_bound, m }
}

/// Habit analog of [`mv_prior_bound`] with `c = max_t |1 + gamma k(t)| / gamma`:
/// `c1 = 1 + c e^{v_lambda(0)/4}`, `m = max(1, c e^{y_bound} + 1)`.
pub fn habit_prior_bound(gamma: f64, habit: &HabitLevels, v_lambda_0: f64) -> PriorBound {
    let c = habit_coefficient(gamma, habit);
    let c1 = 1.0 + c * (0.25 * v_lambda_0).exp();
    let y_bound = c1 * v_lambda_0;
    let m = (c * y_bound.exp() + 1.0).max(1.0);
    PriorBound { c1, y_bound, m }
}

fn habit_coefficient(gamma: f64, habit: &HabitLevels) -> f64 {
    habit
        .values()
        .iter()
        .map(|k| (1.0 + gamma * k).abs() / gamma)
        .fold(0.0, f64::max)
}

/// A family together with an optional symmetric clamp `h -> min(max(h, -M), M)`.
#[derive(Debug, Clone)]
pub struct PreferenceFamily {
    family: Family,
    clamp: Option<f64>,
}

pub fn h_from_g(g: Option<Evaluator>, g_v: Evaluator, g_y: Evaluator) -> PreferenceFamily {
    PreferenceFamily {
        family: Family::GenericG(GenericG { g, g_v, g_y }),
        clamp: None,
    }
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(Error::InvalidParameter(format!("{name} must be > 0, got {v}")))
    }
}

impl PreferenceFamily {
    pub fn mean_variance(gamma: f64) -> Result<Self> {
        Ok(Self {
            family: Family::MeanVariance {
                gamma: positive("gamma", gamma)?,
            },
            clamp: None,
        })
    }

    pub fn habit_mv(gamma: f64, habit: HabitLevels) -> Result<Self> {
        Ok(Self {
            family: Family::HabitMv {
                gamma: positive("gamma", gamma)?,
                habit,
            },
            clamp: None,
        })
    }

    pub fn random_risk_aversion(dist: RiskAversionDist) -> Self {
        Self {
            family: Family::RandomRiskAversion(dist),
            clamp: None,
        }
    }

    pub fn with_clamp(mut self, bound: Option<f64>) -> Self {
        self.clamp = bound;
        self
    }

    pub fn clamp(&self) -> Option<f64> {
        self.clamp
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn name(&self) -> &'static str {
        match self.family {
            Family::MeanVariance { .. } => "mean_variance",
            Family::HabitMv { .. } => "habit_mv",
            Family::RandomRiskAversion(_) => "random_risk_aversion",
            Family::GenericG(_) => "generic_g",
        }
    }

    /// Prior bound for the mean-variance type families.
    pub fn prior_bound(&self, v_lambda_0: f64) -> Option<PriorBound> {
        match &self.family {
            Family::MeanVariance { gamma } => Some(mv_prior_bound(*gamma, v_lambda_0)),
            Family::HabitMv { gamma, habit } => Some(habit_prior_bound(*gamma, habit, v_lambda_0)),
            _ => None,
        }
    }

    /// Unclamped `h(t, x, y)`.
    pub fn h_raw(&self, t: f64, x: f64, y: f64) -> Result<f64> {
        match &self.family {
            Family::MeanVariance { gamma } => {
                let e = exp_checked(-y - x * x)?;
                Ok(e / gamma + (-x * x).exp() - 1.0)
            }
            Family::HabitMv { gamma, habit } => {
                let k = habit.at(t);
                Ok((1.0 + gamma * k) / gamma * exp_checked(-y - x * x)? - 1.0)
            }
            Family::RandomRiskAversion(dist) => Ok(dist.h(x)),
            Family::GenericG(gen) => {
                let v = x * x;
                let g_v = (gen.g_v)(t, v, y);
                if !(g_v < 0.0) {
                    return Err(Error::NonNegativeGv { t, v, y, g_v });
                }
                Ok(-(gen.g_y)(t, v, y) / (2.0 * g_v))
            }
        }
    }

    /// `h(t, x, y)` with the clamp applied when set.
    pub fn h_eval(&self, t: f64, x: f64, y: f64) -> Result<f64> {
        let h = self.h_raw(t, x, y)?;
        Ok(match self.clamp {
            Some(m) => h.clamp(-m, m),
            None => h,
        })
    }

    /// `g` and its partials at `(t, v, y)`.
    pub fn g(&self, t: f64, v: f64, y: f64) -> Result<GValues> {
        match &self.family {
            Family::MeanVariance { gamma } => {
                let ey = exp_checked(y)?;
                let e2 = exp_checked(v + 2.0 * y)?;
                let e2y = ey * ey;
                Ok(GValues {
                    g: ey - 0.5 * gamma * (e2 - e2y),
                    g_v: -0.5 * gamma * e2,
                    g_y: ey - gamma * (e2 - e2y),
                })
            }
            Family::HabitMv { gamma, habit } => {
                let k = habit.at(t);
                let ey = exp_checked(y)?;
                let e2 = exp_checked(v + 2.0 * y)?;
                Ok(GValues {
                    g: ey - 0.5 * gamma * (e2 - 2.0 * k * ey + k * k),
                    g_v: -0.5 * gamma * e2,
                    g_y: ey - gamma * e2 + gamma * k * ey,
                })
            }
            Family::RandomRiskAversion(dist) => {
                let ey = exp_checked(y)?;
                let (m0, m1) = dist.laplace(v)?;
                Ok(GValues {
                    g: ey * m0,
                    g_v: -0.5 * ey * m1,
                    g_y: ey * m0,
                })
            }
            Family::GenericG(gen) => {
                let g = gen.g.as_ref().ok_or(Error::GExposureMissing)?;
                Ok(GValues {
                    g: g(t, v, y),
                    g_v: (gen.g_v)(t, v, y),
                    g_y: (gen.g_y)(t, v, y),
                })
            }
        }
    }

    /// Upper bound on `sup |dh/dx| + |dh/dy|` over the box. Closed form for the
    /// catalog families; finite-difference sampling at `times` with a safety
    /// factor for [`Family::GenericG`].
    pub fn lipschitz_estimate(&self, bx: &LipschitzBox, times: &[f64]) -> Result<f64> {
        match &self.family {
            Family::MeanVariance { gamma } => {
                let a = exp_checked(-bx.y_min)? / gamma;
                // e^{-x^2} (2x(a+1) + a) increases up to its single positive critical point
                let b = a + 1.0;
                let crit = (-2.0 * a + (4.0 * a * a + 32.0 * b * b).sqrt()) / (8.0 * b);
                let x = crit.min(bx.x_max);
                Ok((-x * x).exp() * (2.0 * x * b + a))
            }
            Family::HabitMv { gamma, habit } => {
                let c = habit_coefficient(*gamma, habit);
                let x = bx.x_max.min(0.5);
                Ok(c * exp_checked(-bx.y_min)? * (-x * x).exp() * (2.0 * x + 1.0))
            }
            Family::RandomRiskAversion(dist) => {
                let spread = dist.support_upper - dist.support_lower;
                if spread == 0.0 {
                    return Ok(0.0);
                }
                if !bx.x_max.is_finite() {
                    return Ok(f64::INFINITY);
                }
                // h is nondecreasing and the tilted variance is at most spread^2 / 4
                let h = dist.h(bx.x_max);
                Ok(bx.x_max * h * h * spread * spread / 4.0)
            }
            Family::GenericG(_) => self.sampled_lipschitz(bx, times),
        }
    }

    fn sampled_lipschitz(&self, bx: &LipschitzBox, times: &[f64]) -> Result<f64> {
        const N: usize = 41;
        let x_max = if bx.x_max.is_finite() { bx.x_max } else { 10.0 };
        let dx = x_max / (N - 1) as f64;
        let dy = (bx.y_max - bx.y_min) / (N - 1) as f64;
        let mut best = 0.0f64;
        let default_t = [0.0];
        let times = if times.is_empty() { &default_t[..] } else { times };
        for &t in times {
            let mut grid = vec![0.0; N * N];
            for i in 0..N {
                for j in 0..N {
                    grid[i * N + j] =
                        self.h_raw(t, i as f64 * dx, bx.y_min + j as f64 * dy)?;
                }
            }
            for i in 0..N - 1 {
                for j in 0..N - 1 {
                    let h = grid[i * N + j];
                    let gx = (grid[(i + 1) * N + j] - h).abs() / dx;
                    let gy = if dy > 0.0 {
                        (grid[i * N + j + 1] - h).abs() / dy
                    } else {
                        0.0
                    };
                    best = best.max(gx + gy);
                }
            }
        }
        Ok(SAMPLED_LIPSCHITZ_SAFETY * best)
    }

    /// Closed-form bound on `sup |h|`, when one exists.
    pub fn h_sup_bound(&self) -> Option<f64> {
        let intrinsic = match &self.family {
            Family::RandomRiskAversion(dist) => Some(1.0 / dist.support_lower),
            _ => None,
        };
        match (intrinsic, self.clamp) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }
}

/// Outcome of the I-boundedness certificate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum IBound {
    Certified { bound: f64 },
    NotCertified,
}

/// Finite bound on `∫ sup_{x,y} |P_t(h λ)|^2 dt` from either a bounded `h`
/// (`sup|h|^2 v_lambda(0)`) or uniformly bounded constraint sets
/// (`∫ diam(U_t)^2 dt`), whichever is smaller.
pub fn i_bounded_margin(p: &PreferenceFamily, f: &ConstraintFamily, m: &MarketModel) -> IBound {
    let from_h = p.h_sup_bound().map(|h| h * h * m.v_lambda_total());
    let from_set = (0..m.n_cells())
        .map(|i| f.diameter_sq(i).map(|d| d * m.grid().dt(i)))
        .sum::<Option<f64>>();
    match (from_h, from_set) {
        (Some(a), Some(b)) => IBound::Certified { bound: a.min(b) },
        (Some(a), None) | (None, Some(a)) => IBound::Certified { bound: a },
        (None, None) => IBound::NotCertified,
    }
}
