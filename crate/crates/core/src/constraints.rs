//! Time-indexed closed convex constraint sets `U_t` containing the origin and
//! the Euclidean projection onto them.
//!
//! All variants except [`ConvexSetSpec::TransformedBox`] live directly in the
//! exposure space of `a(t)`. `TransformedBox` is a box of portfolio weights
//! `pi` mapped cell-by-cell through `sigma(t)^T`, so projecting onto it is a
//! small strictly convex box-constrained QP in the weights.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{dot, norm_sq, MarketModel};

/// Largest dimension for which the box QP is solved by active-set enumeration.
const ENUMERATION_MAX_DIM: usize = 8;
const KKT_TOL: f64 = 1e-12;
const PG_MAX_ITERS: usize = 200_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConvexSetSpec {
    WholeSpace,
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
    /// `{k : normal·k <= offset}`.
    HalfSpace { normal: Vec<f64>, offset: f64 },
    /// Box of portfolio weights; the exposure set on a cell is `sigma^T [lower, upper]`.
    TransformedBox { lower: Vec<f64>, upper: Vec<f64> },
}

impl ConvexSetSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        let finite = |v: &[f64], what: &str| -> Result<()> {
            if v.iter().all(|x| x.is_finite()) {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{what} must be finite")))
            }
        };
        let len = |v: &[f64], what: &str| -> Result<()> {
            if v.len() == dim {
                Ok(())
            } else {
                Err(Error::DimensionMismatch(format!(
                    "{what} has length {}, market dimension is {dim}",
                    v.len()
                )))
            }
        };
        match self {
            ConvexSetSpec::WholeSpace => Ok(()),
            ConvexSetSpec::Box { lower, upper } | ConvexSetSpec::TransformedBox { lower, upper } => {
                len(lower, "lower")?;
                len(upper, "upper")?;
                finite(lower, "lower")?;
                finite(upper, "upper")?;
                for (i, (l, u)) in lower.iter().zip(upper).enumerate() {
                    if !(*l <= 0.0 && 0.0 <= *u) {
                        return Err(Error::OriginNotFeasible(format!(
                            "coordinate {i}: bounds [{l}, {u}] exclude 0"
                        )));
                    }
                }
                Ok(())
            }
            ConvexSetSpec::Ball { center, radius } => {
                len(center, "center")?;
                finite(center, "center")?;
                if !(radius.is_finite() && *radius >= 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "radius must be finite and non-negative, got {radius}"
                    )));
                }
                if norm_sq(center).sqrt() > *radius {
                    return Err(Error::OriginNotFeasible(format!(
                        "|center| = {} exceeds radius {radius}",
                        norm_sq(center).sqrt()
                    )));
                }
                Ok(())
            }
            ConvexSetSpec::HalfSpace { normal, offset } => {
                len(normal, "normal")?;
                finite(normal, "normal")?;
                if norm_sq(normal) == 0.0 {
                    return Err(Error::InvalidParameter("half-space normal is zero".into()));
                }
                if !(offset.is_finite() && *offset >= 0.0) {
                    return Err(Error::OriginNotFeasible(format!(
                        "half-space offset {offset} must be >= 0"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// `sigma^T` on one cell together with the QP data of the weight-space projection.
#[derive(Debug, Clone)]
struct TransformedCell {
    st: DMatrix<f64>,
    st_inv: DMatrix<f64>,
    hessian: DMatrix<f64>,
    lipschitz: f64,
}

/// A constraint family bound to a market grid.
#[derive(Debug, Clone)]
pub struct ConstraintFamily {
    spec: ConvexSetSpec,
    dim: usize,
    cells: Vec<TransformedCell>,
}

impl ConstraintFamily {
    pub fn new(spec: ConvexSetSpec, market: &MarketModel) -> Result<Self> {
        let dim = market.dim();
        spec.validate(dim)?;
        let mut cells = Vec::new();
        if matches!(spec, ConvexSetSpec::TransformedBox { .. }) {
            cells.reserve(market.n_cells());
            for i in 0..market.n_cells() {
                let st = market.sigma(i).transpose();
                let st_inv = st.clone().try_inverse().ok_or(Error::SingularSigma {
                    cell: i,
                    condition: f64::INFINITY,
                })?;
                let hessian = st.transpose() * &st;
                let lipschitz = hessian.clone().symmetric_eigenvalues().max();
                cells.push(TransformedCell {
                    st,
                    st_inv,
                    hessian,
                    lipschitz,
                });
            }
        }
        Ok(Self { spec, dim, cells })
    }

    pub fn unconstrained(market: &MarketModel) -> Self {
        Self {
            spec: ConvexSetSpec::WholeSpace,
            dim: market.dim(),
            cells: Vec::new(),
        }
    }

    pub fn spec(&self) -> &ConvexSetSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// True when constant perturbations are portfolio weights rather than exposures.
    pub fn is_weight_space(&self) -> bool {
        matches!(self.spec, ConvexSetSpec::TransformedBox { .. })
    }

    /// Projection onto `U_t` for the cell containing `t`.
    pub fn project(&self, market: &MarketModel, t: f64, k: &[f64]) -> Result<Vec<f64>> {
        self.project_cell(market.grid().cell_of(t), k)
    }

    pub fn project_cell(&self, cell: usize, k: &[f64]) -> Result<Vec<f64>> {
        let mut out = k.to_vec();
        self.project_cell_into(cell, k, &mut out)?;
        Ok(out)
    }

    pub(crate) fn project_cell_into(&self, cell: usize, k: &[f64], out: &mut [f64]) -> Result<()> {
        match &self.spec {
            ConvexSetSpec::WholeSpace => out.copy_from_slice(k),
            ConvexSetSpec::Box { lower, upper } => {
                for i in 0..k.len() {
                    out[i] = k[i].clamp(lower[i], upper[i]);
                }
            }
            ConvexSetSpec::Ball { center, radius } => {
                let dist = k
                    .iter()
                    .zip(center)
                    .map(|(a, c)| (a - c) * (a - c))
                    .sum::<f64>()
                    .sqrt();
                if dist <= *radius {
                    out.copy_from_slice(k);
                } else {
                    let s = radius / dist;
                    for i in 0..k.len() {
                        out[i] = center[i] + s * (k[i] - center[i]);
                    }
                }
            }
            ConvexSetSpec::HalfSpace { normal, offset } => {
                let excess = dot(normal, k) - offset;
                if excess <= 0.0 {
                    out.copy_from_slice(k);
                } else {
                    let s = excess / norm_sq(normal);
                    for i in 0..k.len() {
                        out[i] = k[i] - s * normal[i];
                    }
                }
            }
            ConvexSetSpec::TransformedBox { lower, upper } => {
                let tc = &self.cells[cell];
                let c = tc.st.transpose() * DVector::from_column_slice(k);
                let u = solve_box_qp(&tc.hessian, &c, lower, upper, tc.lipschitz)
                    .map_err(|residual| Error::InfeasibleQp { cell, residual })?;
                let p = &tc.st * u;
                out.copy_from_slice(p.as_slice());
            }
        }
        Ok(())
    }

    /// Membership of `k` in `U_t` up to `tol`.
    pub fn contains(&self, cell: usize, k: &[f64], tol: f64) -> bool {
        match &self.spec {
            ConvexSetSpec::WholeSpace => true,
            ConvexSetSpec::Box { lower, upper } => k
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(x, (l, u))| *x >= l - tol && *x <= u + tol),
            ConvexSetSpec::Ball { center, radius } => {
                let dist = k
                    .iter()
                    .zip(center)
                    .map(|(a, c)| (a - c) * (a - c))
                    .sum::<f64>()
                    .sqrt();
                dist <= radius + tol
            }
            ConvexSetSpec::HalfSpace { normal, offset } => {
                dot(normal, k) <= offset + tol * norm_sq(normal).sqrt()
            }
            ConvexSetSpec::TransformedBox { lower, upper } => {
                let u = &self.cells[cell].st_inv * DVector::from_column_slice(k);
                u.iter()
                    .zip(lower.iter().zip(upper))
                    .all(|(x, (l, h))| *x >= l - tol && *x <= h + tol)
            }
        }
    }

    /// Support function `sup_{u in U_t} w·u`; `None` when unbounded.
    pub fn support(&self, cell: usize, w: &[f64]) -> Option<f64> {
        let box_support = |w: &[f64], lower: &[f64], upper: &[f64]| -> f64 {
            w.iter()
                .zip(lower.iter().zip(upper))
                .map(|(wi, (l, u))| (wi * l).max(wi * u))
                .sum()
        };
        let wn = norm_sq(w).sqrt();
        match &self.spec {
            ConvexSetSpec::WholeSpace => (wn == 0.0).then_some(0.0),
            ConvexSetSpec::Box { lower, upper } => Some(box_support(w, lower, upper)),
            ConvexSetSpec::Ball { center, radius } => Some(dot(w, center) + radius * wn),
            ConvexSetSpec::HalfSpace { normal, offset } => {
                if wn == 0.0 {
                    return Some(0.0);
                }
                let alpha = dot(w, normal) / norm_sq(normal);
                let resid: f64 = w
                    .iter()
                    .zip(normal)
                    .map(|(wi, ni)| (wi - alpha * ni).powi(2))
                    .sum::<f64>()
                    .sqrt();
                (alpha >= 0.0 && resid <= 1e-12 * wn).then_some(alpha * offset)
            }
            ConvexSetSpec::TransformedBox { lower, upper } => {
                let sw = self.cells[cell].st.transpose() * DVector::from_column_slice(w);
                Some(box_support(sw.as_slice(), lower, upper))
            }
        }
    }

    /// Optimality certificate for `p = P_t(k)`: membership plus
    /// `(k - p)·(u - p) <= tol (1 + |k|)` for every `u` in `U_t`, evaluated
    /// exactly over the extreme points through the support function.
    pub fn check_variational_inequality(&self, cell: usize, k: &[f64], p: &[f64], tol: f64) -> bool {
        let scale = tol * (1.0 + norm_sq(k).sqrt());
        if !self.contains(cell, p, scale) {
            return false;
        }
        let w: Vec<f64> = k.iter().zip(p).map(|(a, b)| a - b).collect();
        if norm_sq(&w).sqrt() <= scale {
            return true;
        }
        match self.support(cell, &w) {
            Some(s) => s - dot(&w, p) <= scale,
            None => false,
        }
    }

    /// `sup_{u in U_t} |u|^2`-type bound used for I-boundedness: squared diameter of `U_t`.
    pub fn diameter_sq(&self, cell: usize) -> Option<f64> {
        match &self.spec {
            ConvexSetSpec::WholeSpace | ConvexSetSpec::HalfSpace { .. } => None,
            ConvexSetSpec::Box { lower, upper } => Some(
                lower
                    .iter()
                    .zip(upper)
                    .map(|(l, u)| (u - l) * (u - l))
                    .sum(),
            ),
            ConvexSetSpec::Ball { radius, .. } => Some(4.0 * radius * radius),
            ConvexSetSpec::TransformedBox { lower, upper } => {
                let st = &self.cells[cell].st;
                let widths: Vec<f64> = lower.iter().zip(upper).map(|(l, u)| u - l).collect();
                let d = widths.len();
                if d <= 12 {
                    // |S w|^2 is convex, so its max over the symmetric width box sits at a vertex.
                    let mut best = 0.0f64;
                    for mask in 0u32..(1 << d) {
                        let w = DVector::from_iterator(
                            d,
                            widths
                                .iter()
                                .enumerate()
                                .map(|(i, x)| if mask & (1 << i) != 0 { *x } else { -*x }),
                        );
                        best = best.max((st * w).norm_squared());
                    }
                    Some(best)
                } else {
                    Some(st.norm_squared() * norm_sq(&widths))
                }
            }
        }
    }

    /// Draws a point of the strategy-space set `U` (weights for `TransformedBox`,
    /// exposures otherwise). Unbounded sets are sampled inside a ball of `radius`.
    pub fn sample_strategy<R: Rng + ?Sized>(&self, rng: &mut R, radius: f64) -> Vec<f64> {
        let d = self.dim;
        let in_ball = |rng: &mut R, center: &[f64], r: f64| -> Vec<f64> {
            loop {
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect();
                if norm_sq(&v) <= 1.0 {
                    return v.iter().zip(center).map(|(x, c)| c + r * x).collect();
                }
            }
        };
        let origin = vec![0.0; d];
        match &self.spec {
            ConvexSetSpec::WholeSpace => in_ball(rng, &origin, radius),
            ConvexSetSpec::Box { lower, upper } | ConvexSetSpec::TransformedBox { lower, upper } => {
                lower
                    .iter()
                    .zip(upper)
                    .map(|(l, u)| if l < u { rng.random_range(*l..=*u) } else { *l })
                    .collect()
            }
            ConvexSetSpec::Ball { center, radius: r } => in_ball(rng, center, *r),
            ConvexSetSpec::HalfSpace { .. } => {
                let k = in_ball(rng, &origin, radius);
                let mut out = k.clone();
                // half-space projection never fails
                let _ = self.project_cell_into(0, &k, &mut out);
                out
            }
        }
    }

    /// Exposure `a` on `cell` produced by the constant strategy `k`.
    pub fn strategy_exposure(&self, market: &MarketModel, cell: usize, k: &[f64]) -> Vec<f64> {
        if self.is_weight_space() {
            market.weights_to_exposure(cell, k)
        } else {
            k.to_vec()
        }
    }
}

fn kkt_residual(q: &DMatrix<f64>, c: &DVector<f64>, u: &DVector<f64>, lo: &[f64], hi: &[f64]) -> f64 {
    let g = q * u - c;
    (0..u.len())
        .map(|i| (u[i] - (u[i] - g[i]).clamp(lo[i], hi[i])).abs())
        .fold(0.0, f64::max)
}

/// Minimizes `0.5 u^T Q u - c^T u` over `lo <= u <= hi` for positive definite `Q`.
/// Returns the KKT residual on failure.
fn solve_box_qp(
    q: &DMatrix<f64>,
    c: &DVector<f64>,
    lo: &[f64],
    hi: &[f64],
    lipschitz: f64,
) -> std::result::Result<DVector<f64>, f64> {
    let d = c.len();
    let scale = 1.0 + c.amax() + q.amax();
    let tol = KKT_TOL * scale;

    // Unconstrained minimizer and its clipped pattern as the first guess.
    if let Some(u0) = q.clone().cholesky().map(|ch| ch.solve(c)) {
        if (0..d).all(|i| u0[i] >= lo[i] && u0[i] <= hi[i]) {
            return Ok(u0);
        }
        if d <= ENUMERATION_MAX_DIM {
            let guess: Vec<u8> = (0..d)
                .map(|i| {
                    if u0[i] < lo[i] {
                        1
                    } else if u0[i] > hi[i] {
                        2
                    } else {
                        0
                    }
                })
                .collect();
            if let Some(u) = try_pattern(q, c, lo, hi, &guess, tol) {
                return Ok(u);
            }
        }
    }

    if d <= ENUMERATION_MAX_DIM {
        let total = 3usize.pow(d as u32);
        let mut pattern = vec![0u8; d];
        for code in 0..total {
            let mut x = code;
            for p in pattern.iter_mut() {
                *p = (x % 3) as u8;
                x /= 3;
            }
            if let Some(u) = try_pattern(q, c, lo, hi, &pattern, tol) {
                return Ok(u);
            }
        }
    }

    projected_gradient(q, c, lo, hi, lipschitz, tol)
}

/// Pattern entries: 0 free, 1 at lower, 2 at upper.
fn try_pattern(
    q: &DMatrix<f64>,
    c: &DVector<f64>,
    lo: &[f64],
    hi: &[f64],
    pattern: &[u8],
    tol: f64,
) -> Option<DVector<f64>> {
    let d = c.len();
    let mut u = DVector::zeros(d);
    let mut free = Vec::with_capacity(d);
    for i in 0..d {
        if lo[i] == hi[i] {
            if pattern[i] != 1 {
                return None;
            }
            u[i] = lo[i];
            continue;
        }
        match pattern[i] {
            0 => free.push(i),
            1 => u[i] = lo[i],
            _ => u[i] = hi[i],
        }
    }
    if !free.is_empty() {
        let nf = free.len();
        let mut qff = DMatrix::zeros(nf, nf);
        let mut rhs = DVector::zeros(nf);
        for (a, &i) in free.iter().enumerate() {
            let mut r = c[i];
            for j in 0..d {
                if !free.contains(&j) {
                    r -= q[(i, j)] * u[j];
                }
            }
            rhs[a] = r;
            for (b, &j) in free.iter().enumerate() {
                qff[(a, b)] = q[(i, j)];
            }
        }
        let sol = qff.cholesky()?.solve(&rhs);
        for (a, &i) in free.iter().enumerate() {
            if sol[a] < lo[i] - tol || sol[a] > hi[i] + tol {
                return None;
            }
            u[i] = sol[a].clamp(lo[i], hi[i]);
        }
    }
    let g = q * &u - c;
    for i in 0..d {
        if lo[i] == hi[i] {
            continue;
        }
        match pattern[i] {
            1 if g[i] < -tol => return None,
            2 if g[i] > tol => return None,
            _ => {}
        }
    }
    Some(u)
}

/// Accelerated projected gradient with adaptive restart.
fn projected_gradient(
    q: &DMatrix<f64>,
    c: &DVector<f64>,
    lo: &[f64],
    hi: &[f64],
    lipschitz: f64,
    tol: f64,
) -> std::result::Result<DVector<f64>, f64> {
    let d = c.len();
    let clip = |v: &mut DVector<f64>| {
        for i in 0..d {
            v[i] = v[i].clamp(lo[i], hi[i]);
        }
    };
    let step = 1.0 / lipschitz.max(f64::MIN_POSITIVE);
    let mut x = DVector::zeros(d);
    clip(&mut x);
    let mut y = x.clone();
    let mut theta = 1.0f64;
    let mut residual = f64::INFINITY;
    for _ in 0..PG_MAX_ITERS {
        let g = q * &y - c;
        let mut x_next = &y - g * step;
        clip(&mut x_next);
        let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        let momentum = (theta - 1.0) / theta_next;
        // restart when the step opposes the momentum direction
        if (&y - &x_next).dot(&(&x_next - &x)) > 0.0 {
            theta = 1.0;
            y = x_next.clone();
        } else {
            y = &x_next + (&x_next - &x) * momentum;
            theta = theta_next;
        }
        x = x_next;
        residual = kkt_residual(q, c, &x, lo, hi);
        if residual <= tol {
            return Ok(x);
        }
    }
    Err(residual)
}
