//! Acceptance suite. Runs every criterion sequentially, prints one PASS/FAIL
//! line per criterion and exits non-zero if any fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nalgebra::DMatrix;
use tieq_core::constraints::{ConstraintFamily, ConvexSetSpec};
use tieq_core::market::{GridPath, MarketModel, TimeGrid};
use tieq_core::oracle::{dense_oracle, OracleOptions};
use tieq_core::preferences::{rra_h_derivative, PreferenceFamily, RiskAversionDist};
use tieq_core::solver::{
    contraction_factor, cross_check_uniqueness, solve_global, ClampMode, SolutionPath, SolveOptions,
    CONTRACTION_TARGET,
};
use tieq_core::verify::{
    bounds_check, lognormal_test, perturbation_quotient, simulate_wealth, PerturbationSpec, SimSpec,
    DEFAULT_EPSILONS,
};

const BASELINE_CELLS: usize = 2000;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

struct Problem {
    name: &'static str,
    market: MarketModel,
    spec: ConvexSetSpec,
    pref: PreferenceFamily,
    opts: SolveOptions,
}

impl Problem {
    fn constraints(&self) -> ConstraintFamily {
        ConstraintFamily::new(self.spec.clone(), &self.market).unwrap()
    }

    fn solve(&self) -> SolutionPath {
        solve_global(&self.market, &self.constraints(), &self.pref, &self.opts).unwrap()
    }
}

fn scalar_market(cells: usize, mu: impl Fn(f64) -> f64, sigma: f64) -> MarketModel {
    let grid = TimeGrid::uniform(1.0, cells).unwrap();
    let mus: Vec<f64> = (0..cells).map(|i| mu(grid.node(i))).collect();
    MarketModel::scalar(grid, &mus, &vec![sigma; cells]).unwrap()
}

fn mv_auto() -> SolveOptions {
    SolveOptions {
        clamp_mode: ClampMode::MvAuto,
        ..Default::default()
    }
}

fn baseline(cells: usize) -> Problem {
    Problem {
        name: "mv baseline",
        market: scalar_market(cells, |_| 0.06, 0.2),
        spec: ConvexSetSpec::WholeSpace,
        pref: PreferenceFamily::mean_variance(1.0).unwrap(),
        opts: mv_auto(),
    }
}

fn oracle_problems() -> Vec<Problem> {
    vec![
        baseline(BASELINE_CELLS),
        Problem {
            name: "two-atom rra",
            market: scalar_market(BASELINE_CELLS, |_| 0.06, 0.2),
            spec: ConvexSetSpec::WholeSpace,
            pref: PreferenceFamily::random_risk_aversion(
                RiskAversionDist::from_atoms(vec![(1.0, 0.5), (3.0, 0.5)]).unwrap(),
            ),
            opts: SolveOptions::default(),
        },
        Problem {
            name: "mv weight box [0, 0.5]",
            market: scalar_market(BASELINE_CELLS, |_| 0.06, 0.2),
            spec: ConvexSetSpec::TransformedBox {
                lower: vec![0.0],
                upper: vec![0.5],
            },
            pref: PreferenceFamily::mean_variance(1.0).unwrap(),
            opts: mv_auto(),
        },
        Problem {
            name: "mv lambda 0.3 -> 0.6",
            market: scalar_market(BASELINE_CELLS, |t| if t < 0.5 { 0.06 } else { 0.12 }, 0.2),
            spec: ConvexSetSpec::WholeSpace,
            pref: PreferenceFamily::mean_variance(1.0).unwrap(),
            opts: mv_auto(),
        },
    ]
}

fn sup_diff(a: &GridPath, b: &GridPath) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn within(elapsed: Duration, limit_secs: f64) -> bool {
    elapsed.as_secs_f64() < limit_secs
}

fn merton_limit() -> Outcome {
    let cells = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let grid = TimeGrid::uniform(1.0, cells).unwrap();
    // twenty pieces of random drift and volatility
    let pieces: Vec<(f64, f64)> = (0..20)
        .map(|_| (rng.random_range(-0.1..0.2), rng.random_range(0.1..0.5)))
        .collect();
    let mu: Vec<f64> = (0..cells).map(|i| pieces[i * 20 / cells].0).collect();
    let sigma: Vec<f64> = (0..cells).map(|i| pieces[i * 20 / cells].1).collect();
    let m = MarketModel::scalar(grid, &mu, &sigma).unwrap();
    let f = ConstraintFamily::unconstrained(&m);
    let mut worst_err = 0.0f64;
    let mut worst_time = 0.0f64;
    for gamma in [0.5, 1.0, 2.0, 5.0] {
        let p = PreferenceFamily::random_risk_aversion(RiskAversionDist::from_atoms(vec![(gamma, 1.0)]).unwrap());
        let start = Instant::now();
        let sol = solve_global(&m, &f, &p, &SolveOptions::default()).unwrap();
        worst_time = worst_time.max(start.elapsed().as_secs_f64());
        for i in 0..cells {
            let expected = mu[i] / (sigma[i] * sigma[i]) * sigma[i] / gamma;
            worst_err = worst_err.max((sol.a.cell(i)[0] - expected).abs());
        }
    }
    Outcome::new(
        worst_err <= 1e-12 && worst_time < 1.0,
        format!("sup error {worst_err:.2e}, slowest solve {worst_time:.3}s at 1e4 cells"),
    )
}

fn fixed_point_residual() -> Outcome {
    let prob = baseline(BASELINE_CELLS);
    let start = Instant::now();
    let sol = prob.solve();
    let elapsed = start.elapsed();
    let bounds = bounds_check(&sol, &prob.pref, &prob.market);
    Outcome::new(
        sol.residual_sup <= 1e-9 && !sol.clamp_active && bounds.clamp_inactive && within(elapsed, 5.0),
        format!(
            "residual_sup {:.2e}, h in [{:.4}, {:.4}] vs clamp {:.4}, {:.3}s",
            sol.residual_sup,
            bounds.h_min,
            bounds.h_max,
            sol.clamp_bound.unwrap_or(f64::NAN),
            elapsed.as_secs_f64()
        ),
    )
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for prob in oracle_problems() {
        let sol = prob.solve();
        let oracle = dense_oracle(&prob.market, &prob.spec, &prob.pref, &OracleOptions::default()).unwrap();
        let diff = sup_diff(&sol.a, &oracle.coarse_values());
        pass &= diff <= 5e-4;
        parts.push(format!("{} {:.2e} ({} sweeps)", prob.name, diff, oracle.sweeps));
    }
    let elapsed = start.elapsed();
    pass &= within(elapsed, 60.0);
    Outcome::new(pass, format!("{}; {:.2}s", parts.join(", "), elapsed.as_secs_f64()))
}

fn uniqueness() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for prob in oracle_problems() {
        let r = cross_check_uniqueness(&prob.market, &prob.constraints(), &prob.pref, &prob.opts, 4, 7).unwrap();
        pass &= r.max_distance <= 1e-7;
        parts.push(format!("{} {:.2e}", prob.name, r.max_distance));
    }
    Outcome::new(pass, parts.join(", "))
}

fn contraction_certificate() -> Outcome {
    let mut pass = true;
    let mut worst_ratio = 0.0f64;
    let mut worst_factor = 0.0f64;
    let mut certified = 0;
    let mut total = 0;
    for prob in oracle_problems() {
        let sol = prob.solve();
        for r in &sol.intervals {
            total += 1;
            let factor = contraction_factor(r.lipschitz, &prob.market, r.start_node, r.end_node);
            // the recorded factor must be reproducible from the market alone
            pass &= factor == r.contraction_factor;
            if r.certified && !r.fallback {
                certified += 1;
                pass &= factor <= CONTRACTION_TARGET;
                worst_factor = worst_factor.max(factor);
                worst_ratio = worst_ratio.max(r.max_ratio);
            }
        }
    }
    pass &= worst_ratio <= 0.55 && certified > 0;
    Outcome::new(
        pass,
        format!("{certified}/{total} certified intervals, max ratio {worst_ratio:.3}, max factor {worst_factor:.3}"),
    )
}

fn equilibrium_condition() -> Outcome {
    let mut pass = true;
    let mut controls = 0;
    let mut parts = Vec::new();
    for prob in oracle_problems() {
        let sol = prob.solve();
        let f = prob.constraints();
        let wrong = sol.a.scaled(2.0);
        // the control only probes equilibrium when the scaled path is itself admissible
        let control_admissible = (0..wrong.n_cells()).all(|i| f.contains(i, wrong.cell(i), 1e-12));
        let (mut q_max, mut control_max) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        let start = Instant::now();
        for t in [0.0, 0.25, 0.5, 0.75] {
            let spec = PerturbationSpec::sampled(&prob.market, &f, &sol.a, t, DEFAULT_EPSILONS.to_vec(), 16, 42);
            let table = perturbation_quotient(&prob.market, &f, &prob.pref, &sol.a, &spec).unwrap();
            q_max = q_max.max(table.max_extrapolated);
            let control = perturbation_quotient(&prob.market, &f, &prob.pref, &wrong, &spec).unwrap();
            control_max = control_max.max(control.max_extrapolated);
        }
        pass &= q_max <= 1e-4 && within(start.elapsed(), 2.0);
        if control_admissible {
            controls += 1;
            pass &= control_max >= 1e-2;
            parts.push(format!("{} max {:.2e} control {:.2e}", prob.name, q_max, control_max));
        } else {
            parts.push(format!("{} max {:.2e} control n/a (2a leaves U)", prob.name, q_max));
        }
    }
    pass &= controls > 0;
    Outcome::new(pass, parts.join(", "))
}

fn conditional_law() -> Outcome {
    let prob = baseline(BASELINE_CELLS);
    let sol = prob.solve();
    let spec = SimSpec {
        n_paths: 100_000,
        steps_per_cell: 1,
        seed: 0,
        t_eval: vec![0.0, 0.25, 0.5, 0.75],
    };
    let start = Instant::now();
    let sims = simulate_wealth(&prob.market, &sol.a, &spec).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for (e, &node) in sims.nodes.iter().enumerate() {
        let test = lognormal_test(&sims.samples[e], sol.v_tail[node], sol.y_tail[node]);
        pass &= test.pass && !test.degenerate;
        parts.push(format!(
            "t={} z=({:+.2}, {:+.2}) p={:.3}",
            sims.t_eval[e], test.z_mean, test.z_variance, test.normality_p
        ));
    }
    let elapsed = start.elapsed();
    pass &= within(elapsed, 30.0);
    Outcome::new(pass, format!("{}; {:.2}s", parts.join(", "), elapsed.as_secs_f64()))
}

fn grid_convergence() -> Outcome {
    let sols: Vec<SolutionPath> = [1, 2, 4].iter().map(|k| baseline(BASELINE_CELLS * k).solve()).collect();
    let coarse_diff = |coarse: &SolutionPath, fine: &SolutionPath| {
        (0..coarse.a.n_cells())
            .map(|i| (coarse.a.cell(i)[0] - fine.a.cell(2 * i)[0]).abs())
            .fold(0.0, f64::max)
    };
    let d1 = coarse_diff(&sols[0], &sols[1]);
    let d2 = coarse_diff(&sols[1], &sols[2]);
    let order = (d1 / d2).log2();
    Outcome::new(
        (0.8..=1.5).contains(&order),
        format!("differences {d1:.3e}, {d2:.3e}, order {order:.3}"),
    )
}

fn projection_variants(rng: &mut ChaCha8Rng) -> Vec<(&'static str, MarketModel, ConvexSetSpec)> {
    let cells = 16;
    let grid = TimeGrid::uniform(1.0, cells).unwrap();
    let mut sigmas = Vec::new();
    let mut mus = Vec::new();
    for _ in 0..cells {
        let mut s = DMatrix::zeros(3, 3);
        for r in 0..3 {
            for c in 0..=r {
                s[(r, c)] = if r == c {
                    rng.random_range(0.1..0.4)
                } else {
                    rng.random_range(-0.1..0.1)
                };
            }
        }
        sigmas.push(s);
        mus.push((0..3).map(|_| rng.random_range(-0.05..0.1)).collect::<Vec<f64>>());
    }
    let m = tieq_core::market::build_market(grid, &mus, sigmas).unwrap();
    vec![
        ("whole space", m.clone(), ConvexSetSpec::WholeSpace),
        (
            "box",
            m.clone(),
            ConvexSetSpec::Box {
                lower: vec![-0.2, 0.0, -1.0],
                upper: vec![0.3, 0.5, 0.0],
            },
        ),
        (
            "ball",
            m.clone(),
            ConvexSetSpec::Ball {
                center: vec![0.1, -0.1, 0.2],
                radius: 0.5,
            },
        ),
        (
            "half space",
            m.clone(),
            ConvexSetSpec::HalfSpace {
                normal: vec![1.0, -2.0, 0.5],
                offset: 0.3,
            },
        ),
        (
            "weight box",
            m,
            ConvexSetSpec::TransformedBox {
                lower: vec![0.0, -0.5, 0.0],
                upper: vec![1.0, 0.5, 2.0],
            },
        ),
    ]
}

fn projection_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let tol = 1e-10;
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, m, spec) in projection_variants(&mut rng) {
        let f = ConstraintFamily::new(spec, &m).unwrap();
        let mut worst = 0.0f64;
        let mut ok = true;
        for _ in 0..10_000 {
            let t = rng.random_range(0.0..1.0);
            let k1: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let k2: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let cell = m.grid().cell_of(t);
            let p1 = f.project(&m, t, &k1).unwrap();
            let p2 = f.project(&m, t, &k2).unwrap();
            let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let expansion = dist(&p1, &p2) - dist(&k1, &k2);
            let idem = dist(&f.project(&m, t, &p1).unwrap(), &p1);
            let zero = f.project(&m, t, &[0.0; 3]).unwrap();
            let zero_err = zero.iter().fold(0.0f64, |s, x| s.max(x.abs()));
            worst = worst.max(expansion).max(idem).max(zero_err);
            ok &= expansion <= tol && idem <= tol && zero_err <= tol && f.contains(cell, &p1, tol);
        }
        pass &= ok;
        parts.push(format!("{name} {}", if ok { "ok" } else { "violated" }));
        let _ = worst;
    }
    Outcome::new(pass, format!("{} (1e4 triples each)", parts.join(", ")))
}

fn rra_structure() -> Outcome {
    let dists = [
        vec![(1.0, 0.5), (3.0, 0.5)],
        vec![(0.5, 0.2), (4.0, 0.8)],
        vec![(2.0, 0.9), (10.0, 0.1)],
    ];
    let mut pass = true;
    let (mut worst_h0, mut worst_sup, mut worst_fd) = (0.0f64, f64::NEG_INFINITY, 0.0f64);
    for atoms in dists {
        let dist = RiskAversionDist::from_atoms(atoms.clone()).unwrap();
        let gamma0 = atoms.iter().map(|a| a.0).fold(f64::INFINITY, f64::min);
        let mean: f64 = atoms.iter().map(|(g, w)| g * w).sum();
        worst_h0 = worst_h0.max((dist.h(0.0) - 1.0 / mean).abs());
        let mut prev = dist.h(0.0);
        for i in 1..=4000 {
            let x = i as f64 * 0.005;
            let h = dist.h(x);
            pass &= h >= prev;
            worst_sup = worst_sup.max(h - 1.0 / gamma0);
            prev = h;
        }
        for i in 0..=490 {
            let x = 0.1 + i as f64 * 0.01;
            let fd = stable_central_difference(&atoms, x, 1e-5);
            let exact = rra_h_derivative(&dist, x);
            worst_fd = worst_fd.max((exact - fd).abs() / fd.abs());
        }
    }
    pass &= worst_h0 <= 1e-12 && worst_sup <= 1e-12 && worst_fd <= 1e-6;
    Outcome::new(
        pass,
        format!("|h(0) - 1/E[R]| {worst_h0:.1e}, sup h - 1/gamma0 {worst_sup:.1e}, derivative rel error {worst_fd:.1e}"),
    )
}

/// `(h(x + d) - h(x - d)) / 2d` for `h = E[e^{-R s}] / E[R e^{-R s}]`, `s = x^2/2`.
///
/// The numerator `N(x+d) D(x-d) - N(x-d) D(x+d)` is expanded over atom pairs and
/// each pair difference is evaluated with `exp_m1`, so the quotient keeps full
/// relative accuracy even where `h` is flat to within round-off.
fn stable_central_difference(atoms: &[(f64, f64)], x: f64, d: f64) -> f64 {
    let g0 = atoms.iter().map(|a| a.0).fold(f64::INFINITY, f64::min);
    let (sp, sm) = (0.5 * (x + d) * (x + d), 0.5 * (x - d) * (x - d));
    let ds = 2.0 * x * d;
    let moments = |s: f64| {
        atoms.iter().fold((0.0, 0.0), |(n, dd), &(r, w)| {
            let e = w * (-(r - g0) * s).exp();
            (n + e, dd + r * e)
        })
    };
    let mut num = 0.0;
    for &(ri, wi) in atoms {
        for &(rj, wj) in atoms {
            let base = -(ri - g0) * sm - (rj - g0) * sp;
            num += wi * wj * rj * base.exp() * ((rj - ri) * ds).exp_m1();
        }
    }
    let (_, dp) = moments(sp);
    let (_, dm) = moments(sm);
    num / (dp * dm) / (2.0 * d)
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("merton limit", merton_limit),
        ("fixed-point residual", fixed_point_residual),
        ("oracle equivalence", oracle_equivalence),
        ("uniqueness", uniqueness),
        ("contraction certificate", contraction_certificate),
        ("equilibrium condition", equilibrium_condition),
        ("conditional law", conditional_law),
        ("grid convergence", grid_convergence),
        ("projection properties", projection_properties),
        ("rra structure", rra_structure),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        if !outcome.pass {
            failures += 1;
        }
        println!(
            "{} criterion {:>2} {:<24} [{:.2}s] {}",
            if outcome.pass { "PASS" } else { "FAIL" },
            i + 1,
            name,
            start.elapsed().as_secs_f64(),
            outcome.detail
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
