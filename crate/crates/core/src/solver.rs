//! Backward interval-by-interval fixed-point solver for
//!
//! ```text
//! a(t) = P_t( h(t, sqrt(v_a(t)), y_a(t)) lambda(t) ),   v_a(t) = ∫_t^T |a|^2,  y_a(t) = ∫_t^T a·lambda
//! ```
//!
//! on a piecewise-constant grid. The horizon is split from the right into
//! intervals `[tau1, tau2)` on which `l sqrt(v_lambda(tau1, tau2)) (1 + sqrt(v_lambda(0))) <= 1/2`,
//! where `l` is a Lipschitz constant of `h` on a box reachable by solutions.
//! On each interval the Picard map is a contraction with factor at most 1/2,
//! and the tails already solved to the right enter as a fixed boundary.
//!
//! The discrete equation is evaluated at cell left endpoints, so
//! `v_a(t_i)` includes the contribution of cell `i` itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintFamily;
use crate::error::{Error, Result};
use crate::market::{dot, norm_sq, GridPath, MarketModel};
use crate::preferences::{i_bounded_margin, IBound, LipschitzBox, PreferenceFamily, PriorBound};

/// Tail energy above which the backward extension is treated as blowing up.
pub const BLOW_UP_THRESHOLD: f64 = 1e6;
/// Largest admissible product `l sqrt(v_lambda(tau1, tau2)) (1 + sqrt(v_lambda(0)))`.
pub const CONTRACTION_TARGET: f64 = 0.5;
const SINGLE_CELL_DAMPING: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClampMode {
    Off,
    /// Clamp `h` to `[-M, M]` with `M` from the mean-variance prior bound, and
    /// require the clamp to be inactive at the converged solution.
    MvAuto,
    Manual(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveOptions {
    pub fp_tol: f64,
    pub max_iters_per_interval: usize,
    pub interval_safety: f64,
    pub min_interval_cells: usize,
    pub clamp_mode: ClampMode,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            fp_tol: 1e-10,
            max_iters_per_interval: 200,
            interval_safety: 1.0,
            min_interval_cells: 1,
            clamp_mode: ClampMode::Off,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.fp_tol > 0.0 && self.fp_tol < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "fp_tol must lie in (0, 1), got {}",
                self.fp_tol
            )));
        }
        if self.max_iters_per_interval == 0 || self.min_interval_cells == 0 {
            return Err(Error::InvalidParameter(
                "max_iters_per_interval and min_interval_cells must be positive".into(),
            ));
        }
        if !(self.interval_safety > 0.0 && self.interval_safety <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "interval_safety must lie in (0, 1], got {}",
                self.interval_safety
            )));
        }
        if let ClampMode::Manual(m) = self.clamp_mode {
            if !(m.is_finite() && m > 0.0) {
                return Err(Error::InvalidParameter(format!("clamp bound must be > 0, got {m}")));
            }
        }
        Ok(())
    }
}

/// Tail contributions `(v_a(tau2), y_a(tau2))` of the already solved cells.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Boundary {
    pub v: f64,
    pub y: f64,
}

impl Boundary {
    /// Extends the boundary leftward over `segment`, which covers cells `[start, end)`.
    pub fn extend(self, m: &MarketModel, segment: &GridPath, start: usize) -> Boundary {
        let grid = m.grid();
        let (mut v, mut y) = (self.v, self.y);
        for i in (0..segment.n_cells()).rev() {
            let cell = start + i;
            let dt = grid.dt(cell);
            let a = segment.cell(i);
            v += norm_sq(a) * dt;
            y += dot(a, m.lambda_at(cell)) * dt;
        }
        Boundary { v, y }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRecord {
    pub start: f64,
    pub end: f64,
    pub start_node: usize,
    pub end_node: usize,
    pub iterations: usize,
    /// Ratio of the last two successive-iterate distances.
    pub final_ratio: f64,
    /// Largest successive-iterate distance ratio over all sweeps.
    pub max_ratio: f64,
    pub lipschitz: f64,
    pub lipschitz_box: LipschitzBox,
    /// `l sqrt(v_lambda(start, end)) (1 + sqrt(v_lambda(0)))`.
    pub contraction_factor: f64,
    /// The scheduler condition held without falling back to the cell floor.
    pub certified: bool,
    /// The converged segment stayed inside the box used for `l`.
    pub box_respected: bool,
    /// Produced by the non-convergence fallback.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionPath {
    pub a: GridPath,
    pub v_tail: Vec<f64>,
    pub y_tail: Vec<f64>,
    pub intervals: Vec<IntervalRecord>,
    pub residual_sup: f64,
    pub residual_l2: f64,
    pub clamp_active: bool,
    pub clamp_bound: Option<f64>,
    /// Unclamped `h(t_i, sqrt(v_a(t_i)), y_a(t_i))` per cell.
    pub h_values: Vec<f64>,
    pub warnings: Vec<String>,
}

impl SolutionPath {
    pub fn total_iterations(&self) -> usize {
        self.intervals.iter().map(|r| r.iterations).sum()
    }
}

/// One application of the Picard map on cells `[start, end)`.
///
/// `segment` holds the current iterate on those cells and `boundary` the tails
/// at `t_end`. Returns `T a` on the same cells.
pub fn picard_step(
    m: &MarketModel,
    f: &ConstraintFamily,
    p: &PreferenceFamily,
    segment: &GridPath,
    start: usize,
    end: usize,
    boundary: Boundary,
) -> Result<GridPath> {
    let mut out = GridPath::zeros(end - start, m.dim());
    apply_map(m, f, p, segment, start, end, boundary, &mut out)?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn apply_map(
    m: &MarketModel,
    f: &ConstraintFamily,
    p: &PreferenceFamily,
    segment: &GridPath,
    start: usize,
    end: usize,
    boundary: Boundary,
    out: &mut GridPath,
) -> Result<()> {
    debug_assert_eq!(segment.n_cells(), end - start);
    let grid = m.grid();
    let d = m.dim();
    let (mut v, mut y) = (boundary.v, boundary.y);
    let mut scaled = vec![0.0; d];
    for cell in (start..end).rev() {
        let i = cell - start;
        let dt = grid.dt(cell);
        let a = segment.cell(i);
        let lam = m.lambda_at(cell);
        v += norm_sq(a) * dt;
        y += dot(a, lam) * dt;
        let h = p.h_eval(grid.node(cell), v.sqrt(), y)?;
        for (s, l) in scaled.iter_mut().zip(lam) {
            *s = h * l;
        }
        f.project_cell_into(cell, &scaled, out.cell_mut(i))?;
    }
    Ok(())
}

/// L^2 distance of two segments over cells starting at `start`.
fn segment_distance(m: &MarketModel, a: &GridPath, b: &GridPath, start: usize) -> f64 {
    let grid = m.grid();
    (0..a.n_cells())
        .map(|i| {
            let d: f64 = a
                .cell(i)
                .iter()
                .zip(b.cell(i))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            d * grid.dt(start + i)
        })
        .sum::<f64>()
        .sqrt()
}

/// `l sqrt(v_lambda(t_start, t_end)) (1 + sqrt(v_lambda(0)))`.
pub fn contraction_factor(lipschitz: f64, m: &MarketModel, start: usize, end: usize) -> f64 {
    let grid = m.grid();
    let v = m.integrate_cells(grid.node(start), grid.node(end), |i| norm_sq(m.lambda_at(i)));
    if lipschitz == 0.0 {
        return 0.0;
    }
    lipschitz * v.sqrt() * (1.0 + m.v_lambda_total().sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalChoice {
    pub start: usize,
    pub contraction_factor: f64,
    pub certified: bool,
}

/// Chooses the longest interval `[start, end)` satisfying the contraction
/// condition, stepping back at least `min_interval_cells` cells. When even
/// that floor violates the condition the floor is used and `certified` is false.
pub fn pick_interval(lipschitz: f64, m: &MarketModel, end: usize, opts: &SolveOptions) -> IntervalChoice {
    let target = CONTRACTION_TARGET * opts.interval_safety;
    let floor_start = end.saturating_sub(opts.min_interval_cells.max(1));
    if lipschitz == 0.0 {
        return IntervalChoice {
            start: 0,
            contraction_factor: 0.0,
            certified: true,
        };
    }
    let grid = m.grid();
    let scale = lipschitz * (1.0 + m.v_lambda_total().sqrt());
    // accumulated in the same backward order as MarketModel::integrate_cells
    let mut acc = 0.0;
    let mut best: Option<(usize, f64)> = None;
    for j in (0..end).rev() {
        acc += norm_sq(m.lambda_at(j)) * grid.dt(j);
        let factor = scale * acc.sqrt();
        if factor <= target {
            best = Some((j, factor));
        } else {
            break;
        }
    }
    match best {
        Some((start, factor)) if start <= floor_start => IntervalChoice {
            start,
            contraction_factor: factor,
            certified: true,
        },
        _ => {
            let factor = contraction_factor(lipschitz, m, floor_start, end);
            IntervalChoice {
                start: floor_start,
                contraction_factor: factor,
                certified: factor <= target,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalSolve {
    pub segment: GridPath,
    pub iterations: usize,
    pub final_ratio: f64,
    pub max_ratio: f64,
}

/// Picard iteration on `[start, end)` until successive iterates are closer
/// than `fp_tol` in `L^2(t_start, t_end)`.
#[allow(clippy::too_many_arguments)]
pub fn solve_interval(
    m: &MarketModel,
    f: &ConstraintFamily,
    p: &PreferenceFamily,
    start: usize,
    end: usize,
    boundary: Boundary,
    opts: &SolveOptions,
    init: Option<&GridPath>,
) -> Result<IntervalSolve> {
    let n = end - start;
    let mut a = match init {
        Some(seg) => seg.clone(),
        None => GridPath::zeros(n, m.dim()),
    };
    let mut next = GridPath::zeros(n, m.dim());
    let mut prev_dist: Option<f64> = None;
    let mut final_ratio = 0.0;
    let mut max_ratio = 0.0f64;
    let mut best = f64::INFINITY;
    for it in 1..=opts.max_iters_per_interval {
        apply_map(m, f, p, &a, start, end, boundary, &mut next)?;
        let dist = segment_distance(m, &a, &next, start);
        std::mem::swap(&mut a, &mut next);
        if !dist.is_finite() {
            break;
        }
        if let Some(pd) = prev_dist {
            if pd > 0.0 {
                final_ratio = dist / pd;
                // ratios between round-off sized distances carry no information
                if pd > 1e3 * f64::EPSILON * (1.0 + a.values().iter().fold(0.0f64, |s, v| s.max(v.abs()))) {
                    max_ratio = max_ratio.max(final_ratio);
                }
            }
        }
        best = best.min(dist);
        if dist < opts.fp_tol {
            return Ok(IntervalSolve {
                segment: a,
                iterations: it,
                final_ratio,
                max_ratio,
            });
        }
        prev_dist = Some(dist);
    }
    let grid = m.grid();
    Err(Error::NoConvergence {
        start: grid.node(start),
        end: grid.node(end),
        iterations: opts.max_iters_per_interval,
        best,
    })
}

struct Context<'a> {
    m: &'a MarketModel,
    f: &'a ConstraintFamily,
    p: PreferenceFamily,
    opts: &'a SolveOptions,
    prior: Option<PriorBound>,
    warnings: Vec<String>,
}

impl Context<'_> {
    fn lipschitz_box(&self, boundary: Boundary) -> LipschitzBox {
        if let Some(pb) = self.prior {
            return LipschitzBox {
                x_max: f64::INFINITY,
                y_min: -pb.y_bound,
                y_max: pb.y_bound,
            };
        }
        let x_cap = 1.0 + boundary.v.sqrt();
        let y_cap = x_cap * self.m.v_lambda_total().sqrt();
        LipschitzBox {
            x_max: x_cap,
            y_min: -y_cap,
            y_max: y_cap,
        }
    }

    fn sample_times(&self, end: usize) -> Vec<f64> {
        let step = (end / 16).max(1);
        (0..end).step_by(step).map(|i| self.m.grid().node(i)).collect()
    }

    fn box_respected(&self, bx: &LipschitzBox, segment: &GridPath, start: usize, boundary: Boundary) -> bool {
        let grid = self.m.grid();
        let (mut v, mut y) = (boundary.v, boundary.y);
        let tol = 1e-12;
        for i in (0..segment.n_cells()).rev() {
            let cell = start + i;
            let a = segment.cell(i);
            v += norm_sq(a) * grid.dt(cell);
            y += dot(a, self.m.lambda_at(cell)) * grid.dt(cell);
            if v.sqrt() > bx.x_max + tol || y < bx.y_min - tol || y > bx.y_max + tol {
                return false;
            }
        }
        true
    }

    #[allow(clippy::too_many_arguments)]
    fn solve_range(
        &mut self,
        start: usize,
        end: usize,
        boundary: Boundary,
        lipschitz: f64,
        bx: LipschitzBox,
        init: Option<&GridPath>,
        a: &mut GridPath,
        records: &mut Vec<IntervalRecord>,
        fallback: bool,
    ) -> Result<()> {
        let init_seg = init.map(|g| slice_path(g, start, end));
        let grid = self.m.grid();
        let factor = contraction_factor(lipschitz, self.m, start, end);
        let target = CONTRACTION_TARGET * self.opts.interval_safety;
        match solve_interval(self.m, self.f, &self.p, start, end, boundary, self.opts, init_seg.as_ref()) {
            Ok(sol) => {
                let respected = self.box_respected(&bx, &sol.segment, start, boundary);
                write_segment(a, &sol.segment, start);
                records.push(IntervalRecord {
                    start: grid.node(start),
                    end: grid.node(end),
                    start_node: start,
                    end_node: end,
                    iterations: sol.iterations,
                    final_ratio: sol.final_ratio,
                    max_ratio: sol.max_ratio,
                    lipschitz,
                    lipschitz_box: bx,
                    contraction_factor: factor,
                    certified: factor <= target,
                    box_respected: respected,
                    fallback,
                });
                Ok(())
            }
            Err(Error::NoConvergence { .. }) if end - start > 1 => {
                self.warnings.push(format!(
                    "no convergence on [{}, {}); bisecting",
                    grid.node(start),
                    grid.node(end)
                ));
                let mid = start + (end - start) / 2;
                self.solve_range(mid, end, boundary, lipschitz, bx, init, a, records, true)?;
                let inner = Boundary::extend(boundary, self.m, &slice_path(a, mid, end), mid);
                self.solve_range(start, mid, inner, lipschitz, bx, init, a, records, true)
            }
            Err(Error::NoConvergence { best, .. }) => {
                let (segment, iterations) = self.single_cell(start, boundary, best)?;
                write_segment(a, &segment, start);
                records.push(IntervalRecord {
                    start: grid.node(start),
                    end: grid.node(end),
                    start_node: start,
                    end_node: end,
                    iterations,
                    final_ratio: 0.0,
                    max_ratio: 0.0,
                    lipschitz,
                    lipschitz_box: bx,
                    contraction_factor: factor,
                    certified: false,
                    box_respected: self.box_respected(&bx, &segment, start, boundary),
                    fallback: true,
                });
                Ok(())
            }
            Err(e) => Err(e),
        }
    }

    /// Damped iteration on one cell, then scalar bisection when `d = 1`.
    fn single_cell(&mut self, cell: usize, boundary: Boundary, best: f64) -> Result<(GridPath, usize)> {
        let (m, f, p) = (self.m, self.f, &self.p);
        let mut a = GridPath::zeros(1, m.dim());
        let max_iters = 10 * self.opts.max_iters_per_interval;
        for it in 1..=max_iters {
            let t = picard_step(m, f, p, &a, cell, cell + 1, boundary)?;
            let dist = segment_distance(m, &a, &t, cell);
            for (x, y) in a.cell_mut(0).iter_mut().zip(t.cell(0)) {
                *x = (1.0 - SINGLE_CELL_DAMPING) * *x + SINGLE_CELL_DAMPING * y;
            }
            if dist < self.opts.fp_tol {
                return Ok((a, it));
            }
        }
        let grid = m.grid();
        let err = Error::NoConvergence {
            start: grid.node(cell),
            end: grid.node(cell + 1),
            iterations: max_iters,
            best,
        };
        if m.dim() != 1 {
            return Err(err);
        }
        let residual = |x: f64| -> Result<f64> {
            let seg = GridPath::constant(1, &[x]);
            Ok(x - picard_step(m, f, p, &seg, cell, cell + 1, boundary)?.cell(0)[0])
        };
        for radius in [1.0, 10.0, 100.0] {
            let n = 400;
            let mut lo = -radius;
            let mut f_lo = residual(lo)?;
            for k in 1..=n {
                let hi = -radius + 2.0 * radius * k as f64 / n as f64;
                let f_hi = residual(hi)?;
                if f_lo == 0.0 {
                    return Ok((GridPath::constant(1, &[lo]), max_iters));
                }
                if f_lo.signum() != f_hi.signum() {
                    let (mut a0, mut b0, mut fa) = (lo, hi, f_lo);
                    for _ in 0..200 {
                        let mid = 0.5 * (a0 + b0);
                        let fm = residual(mid)?;
                        if fm == 0.0 || (b0 - a0) < 1e-15 * (1.0 + mid.abs()) {
                            a0 = mid;
                            b0 = mid;
                            break;
                        }
                        if fm.signum() == fa.signum() {
                            a0 = mid;
                            fa = fm;
                        } else {
                            b0 = mid;
                        }
                    }
                    self.warnings
                        .push(format!("cell {cell} solved by scalar bisection"));
                    return Ok((GridPath::constant(1, &[0.5 * (a0 + b0)]), max_iters));
                }
                lo = hi;
                f_lo = f_hi;
            }
        }
        Err(err)
    }
}

fn slice_path(path: &GridPath, start: usize, end: usize) -> GridPath {
    let d = path.dim();
    GridPath::from_flat(d, path.values()[start * d..end * d].to_vec())
        .expect("slice of a finite path")
}

fn write_segment(path: &mut GridPath, segment: &GridPath, start: usize) {
    for i in 0..segment.n_cells() {
        path.cell_mut(start + i).copy_from_slice(segment.cell(i));
    }
}

/// Solves the equation on the whole horizon starting every interval from `a = 0`.
pub fn solve_global(
    m: &MarketModel,
    f: &ConstraintFamily,
    p: &PreferenceFamily,
    opts: &SolveOptions,
) -> Result<SolutionPath> {
    solve_global_from(m, f, p, opts, None)
}

/// As [`solve_global`], seeding each interval's iteration from `init`.
pub fn solve_global_from(
    m: &MarketModel,
    f: &ConstraintFamily,
    p: &PreferenceFamily,
    opts: &SolveOptions,
    init: Option<&GridPath>,
) -> Result<SolutionPath> {
    opts.validate()?;
    if f.dim() != m.dim() {
        return Err(Error::DimensionMismatch(format!(
            "constraint dimension {} differs from market dimension {}",
            f.dim(),
            m.dim()
        )));
    }
    if let Some(g) = init {
        if g.n_cells() != m.n_cells() || g.dim() != m.dim() {
            return Err(Error::DimensionMismatch("initial guess does not match the grid".into()));
        }
    }
    let v_lambda_0 = m.v_lambda_total();
    let (p_eff, prior) = match opts.clamp_mode {
        ClampMode::Off => (p.clone(), None),
        ClampMode::MvAuto => {
            let pb = p.prior_bound(v_lambda_0).ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "automatic clamp needs a mean-variance family, got {}",
                    p.name()
                ))
            })?;
            (p.clone().with_clamp(Some(pb.m)), Some(pb))
        }
        ClampMode::Manual(bound) => (p.clone().with_clamp(Some(bound)), None),
    };
    let mut ctx = Context {
        m,
        f,
        p: p_eff,
        opts,
        prior,
        warnings: Vec::new(),
    };
    if ctx.p.clamp().is_none() && i_bounded_margin(&ctx.p, f, m) == IBound::NotCertified {
        let msg = format!(
            "{} is not certified I-bounded under {:?}; global existence relies on convergence monitoring",
            p.name(),
            opts.clamp_mode
        );
        log::warn!("{msg}");
        ctx.warnings.push(msg);
    }

    let n = m.n_cells();
    let mut a = GridPath::zeros(n, m.dim());
    let mut records = Vec::new();
    let mut end = n;
    let mut boundary = Boundary::default();
    while end > 0 {
        let bx = ctx.lipschitz_box(boundary);
        let times = ctx.sample_times(end);
        let lipschitz = ctx.p.lipschitz_estimate(&bx, &times)?;
        let choice = pick_interval(lipschitz, m, end, opts);
        if !choice.certified {
            let msg = format!(
                "contraction condition unattainable at grid resolution on [{}, {}) (factor {:.3})",
                m.grid().node(choice.start),
                m.grid().node(end),
                choice.contraction_factor
            );
            log::warn!("{msg}");
            ctx.warnings.push(msg);
        }
        let first = records.len();
        ctx.solve_range(choice.start, end, boundary, lipschitz, bx, init, &mut a, &mut records, false)?;
        // bisection pushes records right-to-left already; keep assembly order explicit
        records[first..].sort_by(|x, y| y.start_node.cmp(&x.start_node));
        boundary = Boundary::extend(boundary, m, &slice_path(&a, choice.start, end), choice.start);
        if !(boundary.v <= BLOW_UP_THRESHOLD) {
            return Err(Error::BlowUp {
                t: m.grid().node(choice.start),
                v: boundary.v,
            });
        }
        end = choice.start;
    }

    let Assessment {
        tails,
        residual_sup,
        residual_l2,
        h_values,
        clamp_hit,
    } = assess(m, f, &ctx.p, &a)?;
    if let (Some((cell, h)), ClampMode::MvAuto) = (clamp_hit, opts.clamp_mode) {
        return Err(Error::ClampBinding {
            cell,
            h,
            bound: ctx.p.clamp().unwrap_or(f64::NAN),
        });
    }
    if let Some((cell, h)) = clamp_hit {
        ctx.warnings
            .push(format!("clamp active at cell {cell} (h = {h:.6e})"));
    }
    Ok(SolutionPath {
        a,
        v_tail: tails.v,
        y_tail: tails.y,
        intervals: records,
        residual_sup,
        residual_l2,
        clamp_active: clamp_hit.is_some(),
        clamp_bound: ctx.p.clamp(),
        h_values,
        warnings: ctx.warnings,
    })
}

struct Assessment {
    tails: crate::market::TailTables,
    residual_sup: f64,
    residual_l2: f64,
    h_values: Vec<f64>,
    clamp_hit: Option<(usize, f64)>,
}

fn assess(m: &MarketModel, f: &ConstraintFamily, p: &PreferenceFamily, a: &GridPath) -> Result<Assessment> {
    let tails = m.tail_tables(a)?;
    let grid = m.grid();
    let n = m.n_cells();
    let mut residual_sup = 0.0f64;
    let mut residual_sq = 0.0;
    let mut h_values = Vec::with_capacity(n);
    let mut clamp_hit: Option<(usize, f64)> = None;
    let mut scaled = vec![0.0; m.dim()];
    for i in 0..n {
        let t = grid.node(i);
        let x = tails.v[i].sqrt();
        let h_raw = p.h_raw(t, x, tails.y[i])?;
        let h = p.h_eval(t, x, tails.y[i])?;
        if h != h_raw && clamp_hit.is_none() {
            clamp_hit = Some((i, h_raw));
        }
        h_values.push(h_raw);
        for (s, l) in scaled.iter_mut().zip(m.lambda_at(i)) {
            *s = h * l;
        }
        let target = f.project_cell(i, &scaled)?;
        let r: f64 = a
            .cell(i)
            .iter()
            .zip(&target)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        residual_sup = residual_sup.max(r.sqrt());
        residual_sq += r * grid.dt(i);
    }
    Ok(Assessment {
        tails,
        residual_sup,
        residual_l2: residual_sq.sqrt(),
        h_values,
        clamp_hit,
    })
}

/// Residuals, tails and `h` values of an arbitrary path, e.g. one read back
/// from disk. The result carries no interval records.
pub fn assess_path(
    m: &MarketModel,
    f: &ConstraintFamily,
    p: &PreferenceFamily,
    a: &GridPath,
) -> Result<SolutionPath> {
    if a.n_cells() != m.n_cells() || a.dim() != m.dim() {
        return Err(Error::DimensionMismatch("path does not match the market grid".into()));
    }
    let r = assess(m, f, p, a)?;
    Ok(SolutionPath {
        a: a.clone(),
        v_tail: r.tails.v,
        y_tail: r.tails.y,
        intervals: Vec::new(),
        residual_sup: r.residual_sup,
        residual_l2: r.residual_l2,
        clamp_active: r.clamp_hit.is_some(),
        clamp_bound: p.clamp(),
        h_values: r.h_values,
        warnings: Vec::new(),
    })
}

/// Maximum pairwise `L^2(0, T)` distance between solutions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessReport {
    pub starts: usize,
    pub max_distance: f64,
}

/// Re-solves from `a = 0`, `a = P_t(lambda)` and random bounded paths and
/// compares the converged solutions.
pub fn cross_check_uniqueness(
    m: &MarketModel,
    f: &ConstraintFamily,
    p: &PreferenceFamily,
    opts: &SolveOptions,
    n_starts: usize,
    seed: u64,
) -> Result<UniquenessReport> {
    if n_starts < 2 {
        return Err(Error::InvalidParameter("need at least two starting points".into()));
    }
    let n = m.n_cells();
    let d = m.dim();
    let mut inits: Vec<Option<GridPath>> = vec![None];
    let mut projected = GridPath::zeros(n, d);
    for i in 0..n {
        let pl = f.project_cell(i, m.lambda_at(i))?;
        projected.cell_mut(i).copy_from_slice(&pl);
    }
    inits.push(Some(projected));
    let mut k = 0u64;
    while inits.len() < n_starts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k);
        k += 1;
        let mut path = GridPath::zeros(n, d);
        for i in 0..n {
            let raw: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let pl = f.project_cell(i, &raw)?;
            path.cell_mut(i).copy_from_slice(&pl);
        }
        inits.push(Some(path));
    }
    inits.truncate(n_starts);
    let sols: Vec<SolutionPath> = inits
        .par_iter()
        .map(|init| solve_global_from(m, f, p, opts, init.as_ref()))
        .collect::<Result<_>>()?;
    let mut max_distance = 0.0f64;
    for i in 0..sols.len() {
        for j in i + 1..sols.len() {
            max_distance = max_distance.max(segment_distance(m, &sols[i].a, &sols[j].a, 0));
        }
    }
    Ok(UniquenessReport {
        starts: sols.len(),
        max_distance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::ConvexSetSpec;
    use crate::market::TimeGrid;
    use crate::preferences::RiskAversionDist;

    fn scalar_market(cells: usize, mu: f64, sigma: f64) -> MarketModel {
        MarketModel::scalar(
            TimeGrid::uniform(1.0, cells).unwrap(),
            &vec![mu; cells],
            &vec![sigma; cells],
        )
        .unwrap()
    }

    fn single_atom(gamma: f64) -> PreferenceFamily {
        PreferenceFamily::random_risk_aversion(RiskAversionDist::from_atoms(vec![(gamma, 1.0)]).unwrap())
    }

    #[test]
    fn picard_step_with_zero_lambda_is_zero() {
        let m = scalar_market(10, 0.0, 0.2);
        let f = ConstraintFamily::unconstrained(&m);
        let p = PreferenceFamily::mean_variance(1.0).unwrap();
        let seg = GridPath::constant(10, &[0.7]);
        let out = picard_step(&m, &f, &p, &seg, 0, 10, Boundary::default()).unwrap();
        assert!(out.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn picard_step_single_cell() {
        let m = MarketModel::scalar(TimeGrid::uniform(0.01, 1).unwrap(), &[0.06], &[0.2]).unwrap();
        let f = ConstraintFamily::unconstrained(&m);
        let p = PreferenceFamily::mean_variance(1.0).unwrap();
        let out = picard_step(&m, &f, &p, &GridPath::zeros(1, 1), 0, 1, Boundary::default()).unwrap();
        assert!((out.cell(0)[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn pick_interval_examples() {
        let m = scalar_market(100, 0.06, 0.2);
        let opts = SolveOptions::default();
        let c = pick_interval(0.0, &m, 100, &opts);
        assert_eq!((c.start, c.certified), (0, true));
        // 1 * sqrt(0.09 D) * 1.3 <= 0.5 holds for D <= 1.644, so the whole horizon fits
        let c = pick_interval(1.0, &m, 100, &opts);
        assert_eq!(c.start, 0);
        assert!(c.certified && c.contraction_factor <= 0.5);
        let c = pick_interval(1e6, &m, 100, &opts);
        assert_eq!(c.start, 99);
        assert!(!c.certified);
        let wide = SolveOptions {
            min_interval_cells: 5,
            ..opts
        };
        assert_eq!(pick_interval(1e6, &m, 100, &wide).start, 95);
    }

    #[test]
    fn pick_interval_is_longest_admissible() {
        let m = scalar_market(200, 0.06, 0.2);
        let opts = SolveOptions::default();
        let ell = 4.0;
        let c = pick_interval(ell, &m, 200, &opts);
        assert!(c.certified);
        assert!(contraction_factor(ell, &m, c.start, 200) <= 0.5);
        assert!(contraction_factor(ell, &m, c.start - 1, 200) > 0.5);
        assert_eq!(c.contraction_factor, contraction_factor(ell, &m, c.start, 200));
    }

    #[test]
    fn zero_lambda_gives_zero_solution() {
        let m = scalar_market(50, 0.0, 0.2);
        let f = ConstraintFamily::unconstrained(&m);
        for p in [PreferenceFamily::mean_variance(1.0).unwrap(), single_atom(2.0)] {
            let sol = solve_global(&m, &f, &p, &SolveOptions::default()).unwrap();
            assert!(sol.a.values().iter().all(|&x| x == 0.0));
            assert_eq!(sol.residual_sup, 0.0);
            assert_eq!(sol.intervals.len(), 1);
            assert_eq!(sol.intervals[0].iterations, 1);
        }
    }

    #[test]
    fn single_atom_interval_converges_immediately() {
        let m = scalar_market(40, 0.06, 0.2);
        let f = ConstraintFamily::unconstrained(&m);
        let p = single_atom(2.0);
        let sol = solve_interval(&m, &f, &p, 10, 40, Boundary::default(), &SolveOptions::default(), None)
            .unwrap();
        assert!(sol.iterations <= 2);
        assert!(sol.segment.values().iter().all(|&x| (x - 0.15).abs() < 1e-15));
    }

    #[test]
    fn tails_match_tail_tables_exactly() {
        let m = scalar_market(300, 0.06, 0.2);
        let f = ConstraintFamily::unconstrained(&m);
        let p = PreferenceFamily::mean_variance(1.0).unwrap();
        let sol = solve_global(
            &m,
            &f,
            &p,
            &SolveOptions {
                clamp_mode: ClampMode::MvAuto,
                ..Default::default()
            },
        )
        .unwrap();
        let tails = m.tail_tables(&sol.a).unwrap();
        assert_eq!(tails.v, sol.v_tail);
        assert_eq!(tails.y, sol.y_tail);
        assert!(!sol.clamp_active);
        assert!(sol.intervals.len() > 1);
        // intervals tile [0, T) from the right
        assert_eq!(sol.intervals[0].end_node, 300);
        assert_eq!(sol.intervals.last().unwrap().start_node, 0);
        for w in sol.intervals.windows(2) {
            assert_eq!(w[0].start_node, w[1].end_node);
        }
    }

    #[test]
    fn clamp_binding_is_reported() {
        // a tiny manual clamp binds; MvAuto refuses non-MV families
        let m = scalar_market(100, 0.06, 0.2);
        let f = ConstraintFamily::unconstrained(&m);
        let p = PreferenceFamily::mean_variance(1.0).unwrap();
        let sol = solve_global(
            &m,
            &f,
            &p,
            &SolveOptions {
                clamp_mode: ClampMode::Manual(0.5),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(sol.clamp_active);
        assert!(sol.a.values().iter().all(|&x| x <= 0.5 * 0.3 + 1e-15));
        let err = solve_global(
            &m,
            &f,
            &single_atom(1.0),
            &SolveOptions {
                clamp_mode: ClampMode::MvAuto,
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidParameter(_)));
    }

    #[test]
    fn unconstrained_mv_without_clamp_warns() {
        let m = scalar_market(100, 0.06, 0.2);
        let f = ConstraintFamily::unconstrained(&m);
        let p = PreferenceFamily::mean_variance(1.0).unwrap();
        let sol = solve_global(&m, &f, &p, &SolveOptions::default()).unwrap();
        assert!(sol.warnings.iter().any(|w| w.contains("I-bounded")));
        assert!(sol.residual_sup < 1e-9);
    }

    #[test]
    fn monotone_assembly() {
        let m = scalar_market(200, 0.06, 0.2);
        let f = ConstraintFamily::unconstrained(&m);
        let p = PreferenceFamily::mean_variance(1.0).unwrap();
        let opts = SolveOptions {
            fp_tol: 1e-12,
            ..Default::default()
        };
        let direct = solve_interval(&m, &f, &p, 100, 200, Boundary::default(), &opts, None).unwrap();
        let right = solve_interval(&m, &f, &p, 150, 200, Boundary::default(), &opts, None).unwrap();
        let b = Boundary::default().extend(&m, &right.segment, 150);
        let left = solve_interval(&m, &f, &p, 100, 150, b, &opts, None).unwrap();
        for i in 0..50 {
            assert!((direct.segment.cell(i)[0] - left.segment.cell(i)[0]).abs() < 1e-10);
            assert!((direct.segment.cell(50 + i)[0] - right.segment.cell(i)[0]).abs() < 1e-10);
        }
    }

    #[test]
    fn non_convergence_falls_back_to_bisection() {
        let m = scalar_market(64, 0.06, 0.2);
        let f = ConstraintFamily::unconstrained(&m);
        let p = PreferenceFamily::mean_variance(1.0).unwrap();
        let opts = SolveOptions {
            max_iters_per_interval: 3,
            ..Default::default()
        };
        let sol = solve_global(&m, &f, &p, &opts).unwrap();
        assert!(sol.intervals.iter().any(|r| r.fallback));
        assert!(sol.residual_sup < 1e-8, "{}", sol.residual_sup);
        let reference = solve_global(&m, &f, &p, &SolveOptions::default()).unwrap();
        for (x, y) in sol.a.values().iter().zip(reference.a.values()) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn single_atom_merton_solution() {
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let m = MarketModel::scalar(grid, &[0.06, 0.12, -0.03, 0.0], &[0.2, 0.3, 0.1, 0.25]).unwrap();
        let f = ConstraintFamily::unconstrained(&m);
        let sol = solve_global(&m, &f, &single_atom(5.0), &SolveOptions::default()).unwrap();
        for i in 0..4 {
            assert!((sol.a.cell(i)[0] - m.lambda_at(i)[0] / 5.0).abs() < 1e-14);
        }
    }

    #[test]
    fn box_constraint_clips_solution() {
        let m = scalar_market(200, 0.06, 0.2);
        let f = ConstraintFamily::new(
            ConvexSetSpec::TransformedBox {
                lower: vec![0.0],
                upper: vec![0.5],
            },
            &m,
        )
        .unwrap();
        let p = PreferenceFamily::mean_variance(1.0).unwrap();
        let opts = SolveOptions {
            clamp_mode: ClampMode::MvAuto,
            ..Default::default()
        };
        let sol = solve_global(&m, &f, &p, &opts).unwrap();
        for i in 0..200 {
            let a = sol.a.cell(i)[0];
            let unclipped = sol.h_values[i] * 0.3;
            assert!((a - unclipped.clamp(0.0, 0.1)).abs() < 1e-9);
            assert!(a <= 0.1 + 1e-15);
        }
        // h λ exceeds 0.1 near the horizon, so the bound is active there
        assert!((sol.a.cell(199)[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn uniqueness_trivial_cases() {
        let m = scalar_market(100, 0.0, 0.2);
        let f = ConstraintFamily::unconstrained(&m);
        let p = PreferenceFamily::mean_variance(1.0).unwrap();
        let r = cross_check_uniqueness(&m, &f, &p, &SolveOptions::default(), 3, 1).unwrap();
        assert_eq!(r.max_distance, 0.0);
        let m = scalar_market(100, 0.06, 0.2);
        let f = ConstraintFamily::unconstrained(&m);
        let r = cross_check_uniqueness(&m, &f, &single_atom(2.0), &SolveOptions::default(), 4, 1)
            .unwrap();
        assert!(r.max_distance < 1e-13);
        assert!(cross_check_uniqueness(&m, &f, &single_atom(2.0), &SolveOptions::default(), 1, 1).is_err());
    }
}
