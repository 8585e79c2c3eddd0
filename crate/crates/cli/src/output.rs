//! Strategy tables, plot data and reports on disk.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a table
//! read back with [`read_strategy_csv`] reproduces every value bit for bit.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use tieq_core::constraints::ConvexSetSpec;
use tieq_core::market::{GridPath, MarketModel};

use crate::error::CliError;

/// Per-cell rows of a strategy: exposures, weights, tails and `h`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyTable {
    pub t: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    /// Absent when some `sigma^T` is too ill-conditioned to invert.
    pub pi: Option<Vec<Vec<f64>>>,
    pub v_a: Vec<f64>,
    pub y_a: Vec<f64>,
    pub h_value: Vec<f64>,
}

impl StrategyTable {
    /// Builds the table, dropping the weight columns with a warning when any cell is ill-conditioned.
    pub fn new(
        m: &MarketModel,
        a: &GridPath,
        v_a: &[f64],
        y_a: &[f64],
        h_value: &[f64],
        warnings: &mut Vec<String>,
    ) -> Self {
        let n = m.n_cells();
        let pi: Option<Vec<Vec<f64>>> = (0..n).map(|i| m.exposure_to_weights(i, a.cell(i))).collect();
        if pi.is_none() {
            let msg = "sigma^T is ill-conditioned on some cell; weight columns omitted".to_string();
            log::warn!("{msg}");
            warnings.push(msg);
        }
        Self {
            t: m.grid().nodes()[..n].to_vec(),
            a: (0..n).map(|i| a.cell(i).to_vec()).collect(),
            pi,
            v_a: v_a[..n].to_vec(),
            y_a: y_a[..n].to_vec(),
            h_value: h_value.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.a.first().map_or(0, Vec::len)
    }

    pub fn path(&self) -> Result<GridPath, tieq_core::Error> {
        GridPath::from_cells(&self.a)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(CliError::io(path))
}

pub fn write_strategy_csv(path: &Path, table: &StrategyTable) -> Result<(), CliError> {
    let d = table.dim();
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["t".to_string()];
    header.extend((1..=d).map(|i| format!("a_{i}")));
    if table.pi.is_some() {
        header.extend((1..=d).map(|i| format!("pi_{i}")));
    }
    header.extend(["v_a", "y_a", "h_value"].map(String::from));
    let csv_err = |e: csv::Error| CliError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..table.t.len() {
        let mut row = vec![table.t[i].to_string()];
        row.extend(table.a[i].iter().map(f64::to_string));
        if let Some(pi) = &table.pi {
            row.extend(pi[i].iter().map(f64::to_string));
        }
        row.push(table.v_a[i].to_string());
        row.push(table.y_a[i].to_string());
        row.push(table.h_value[i].to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(CliError::io(path))
}

pub fn read_strategy_csv(path: &Path) -> Result<StrategyTable, CliError> {
    let fail = |message: String| CliError::Solution {
        path: path.to_path_buf(),
        message,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| fail(e.to_string()))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| fail(e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    let col = |name: &str| header.iter().position(|h| h == name);
    let d = header.iter().filter(|h| h.starts_with("a_")).count();
    if d == 0 {
        return Err(fail("no a_i columns".into()));
    }
    let need = |name: String| col(&name).ok_or_else(|| fail(format!("missing column {name}")));
    let t_col = need("t".into())?;
    let a_cols = (1..=d).map(|i| need(format!("a_{i}"))).collect::<Result<Vec<_>, _>>()?;
    let pi_cols: Option<Vec<usize>> = (1..=d).map(|i| col(&format!("pi_{i}"))).collect();
    let (v_col, y_col, h_col) = (need("v_a".into())?, need("y_a".into())?, need("h_value".into())?);

    let mut table = StrategyTable {
        t: Vec::new(),
        a: Vec::new(),
        pi: pi_cols.as_ref().map(|_| Vec::new()),
        v_a: Vec::new(),
        y_a: Vec::new(),
        h_value: Vec::new(),
    };
    for (line, record) in r.records().enumerate() {
        let record = record.map_err(|e| fail(e.to_string()))?;
        let num = |c: usize| -> Result<f64, CliError> {
            let field = record.get(c).unwrap_or("");
            field
                .parse::<f64>()
                .map_err(|_| fail(format!("row {}: `{field}` is not a number", line + 2)))
        };
        table.t.push(num(t_col)?);
        table.a.push(a_cols.iter().map(|&c| num(c)).collect::<Result<_, _>>()?);
        if let (Some(cols), Some(pi)) = (&pi_cols, table.pi.as_mut()) {
            pi.push(cols.iter().map(|&c| num(c)).collect::<Result<_, _>>()?);
        }
        table.v_a.push(num(v_col)?);
        table.y_a.push(num(y_col)?);
        table.h_value.push(num(h_col)?);
    }
    if table.t.is_empty() {
        return Err(fail("no rows".into()));
    }
    Ok(table)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    w.write_all(b"\n").map_err(CliError::io(path))?;
    w.flush().map_err(CliError::io(path))
}

/// `t`, `|a|`, and the constraint bounds in the coordinates the set is given in.
pub fn write_plot_csv(path: &Path, m: &MarketModel, spec: &ConvexSetSpec, table: &StrategyTable) -> Result<(), CliError> {
    let d = table.dim();
    let mut w = create(path)?;
    let io = CliError::io(path);
    let mut header = vec!["t".to_string(), "abs_a".to_string()];
    let bounds: Option<(&str, &[f64], &[f64])> = match spec {
        ConvexSetSpec::Box { lower, upper } => Some(("a", lower, upper)),
        ConvexSetSpec::TransformedBox { lower, upper } => Some(("pi", lower, upper)),
        _ => None,
    };
    if let Some((name, _, _)) = bounds {
        for i in 1..=d {
            header.push(format!("{name}_{i}"));
            header.push(format!("{name}_{i}_lower"));
            header.push(format!("{name}_{i}_upper"));
        }
    }
    if let ConvexSetSpec::Ball { .. } = spec {
        header.push("distance_to_center".into());
        header.push("radius".into());
    }
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for (i, a) in table.a.iter().enumerate() {
        let mut row = vec![table.t[i].to_string(), a.iter().map(|x| x * x).sum::<f64>().sqrt().to_string()];
        if let Some((name, lower, upper)) = bounds {
            let coords = if name == "pi" {
                m.exposure_to_weights(i, a).unwrap_or_else(|| vec![f64::NAN; d])
            } else {
                a.clone()
            };
            for k in 0..d {
                row.push(coords[k].to_string());
                row.push(lower[k].to_string());
                row.push(upper[k].to_string());
            }
        }
        if let ConvexSetSpec::Ball { center, radius } = spec {
            let dist: f64 = a.iter().zip(center).map(|(x, c)| (x - c) * (x - c)).sum::<f64>().sqrt();
            row.push(dist.to_string());
            row.push(radius.to_string());
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    w.write_all(out.as_bytes()).map_err(io)?;
    w.flush().map_err(CliError::io(path))
}
