//! Brute-force reference solution: damped Picard iteration over the whole
//! horizon on a refined grid, with no interval scheduling and no clamp.
//! Deliberately shares none of the solver's iteration code.

use serde::{Deserialize, Serialize};

use crate::constraints::{ConstraintFamily, ConvexSetSpec};
use crate::error::{Error, Result};
use crate::market::{GridPath, MarketModel};
use crate::preferences::PreferenceFamily;

pub const ORACLE_MAX_CELLS: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleOptions {
    pub refine_factor: usize,
    pub damping: f64,
    pub max_sweeps: usize,
    /// Stop once `||T a - a||_{L^2(0,T)}` falls below this.
    pub tol: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            refine_factor: 10,
            damping: 0.25,
            max_sweeps: 10_000,
            tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub fine_market: MarketModel,
    pub a: GridPath,
    pub refine_factor: usize,
    pub sweeps: usize,
    pub last_update: f64,
}

impl OracleSolution {
    /// Values at the coarse nodes, i.e. fine cell `refine_factor * i` for coarse cell `i`.
    pub fn coarse_values(&self) -> GridPath {
        let n = self.a.n_cells() / self.refine_factor;
        let cells: Vec<Vec<f64>> = (0..n)
            .map(|i| self.a.cell(i * self.refine_factor).to_vec())
            .collect();
        GridPath::from_cells(&cells).expect("oracle path is finite")
    }

    /// `(v_a, y_a)` at the fine cell left endpoints, summed directly per node.
    pub fn tails(&self) -> (Vec<f64>, Vec<f64>) {
        let m = &self.fine_market;
        let n = m.n_cells();
        let mut v = vec![0.0; n + 1];
        let mut y = vec![0.0; n + 1];
        for i in (0..n).rev() {
            let dt = m.grid().node(i + 1) - m.grid().node(i);
            let a = self.a.cell(i);
            let lam = m.lambda_at(i);
            v[i] = v[i + 1] + a.iter().map(|x| x * x).sum::<f64>() * dt;
            y[i] = y[i + 1] + a.iter().zip(lam).map(|(x, l)| x * l).sum::<f64>() * dt;
        }
        (v, y)
    }
}

pub fn dense_oracle(
    m: &MarketModel,
    spec: &ConvexSetSpec,
    p: &PreferenceFamily,
    opts: &OracleOptions,
) -> Result<OracleSolution> {
    if m.n_cells() > ORACLE_MAX_CELLS {
        return Err(Error::InvalidParameter(format!(
            "oracle accepts at most {ORACLE_MAX_CELLS} cells, got {}",
            m.n_cells()
        )));
    }
    if opts.refine_factor == 0 || !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::InvalidParameter(
            "oracle needs refine_factor >= 1 and damping in (0, 1]".into(),
        ));
    }
    let fine = m.refine(opts.refine_factor);
    let f = ConstraintFamily::new(spec.clone(), &fine)?;
    let p = p.clone().with_clamp(None);
    let n = fine.n_cells();
    let d = fine.dim();
    let nodes = fine.grid().nodes().to_vec();

    let mut a = vec![0.0; n * d];
    let mut image = vec![0.0; n * d];
    let mut last = f64::INFINITY;
    for sweep in 1..=opts.max_sweeps {
        let (mut v, mut y) = (0.0, 0.0);
        for i in (0..n).rev() {
            let dt = nodes[i + 1] - nodes[i];
            let ai = &a[i * d..(i + 1) * d];
            let lam = fine.lambda_at(i);
            for k in 0..d {
                v += ai[k] * ai[k] * dt;
                y += ai[k] * lam[k] * dt;
            }
            let h = p.h_raw(nodes[i], v.sqrt(), y)?;
            let target: Vec<f64> = lam.iter().map(|l| h * l).collect();
            let pt = f.project_cell(i, &target)?;
            image[i * d..(i + 1) * d].copy_from_slice(&pt);
        }
        let mut sq = 0.0;
        for i in 0..n {
            let dt = nodes[i + 1] - nodes[i];
            for k in 0..d {
                let diff = image[i * d + k] - a[i * d + k];
                sq += diff * diff * dt;
                a[i * d + k] += opts.damping * diff;
            }
        }
        last = sq.sqrt();
        if !last.is_finite() {
            break;
        }
        if last < opts.tol {
            return Ok(OracleSolution {
                fine_market: fine,
                a: GridPath::from_flat(d, a)?,
                refine_factor: opts.refine_factor,
                sweeps: sweep,
                last_update: last,
            });
        }
    }
    Err(Error::OracleNoConvergence {
        sweeps: opts.max_sweeps,
        last,
    })
}
