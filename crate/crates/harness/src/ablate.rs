//! Ablation sweeps: train-and-evaluate one cell per setting, in
//! parallel, and append the results to a schema-stable long-form CSV.
//! Cell failures are recorded in the CSV's error column and never stop
//! the rest of the sweep.

use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;

use fel_core::rng::fnv1a64;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::train::train;

/// The six supported sweep axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    /// Anchors per class K in {0, 1, 4, 6, 8, 10, 20}.
    K,
    /// Label-noise percentage in {0, 5, ..., 50}.
    Noise,
    /// Label-smoothing term in {0, 5, 10, 11, 15, 20, ..., 50}.
    Smoothing,
    /// Loss-term combinations: cls, a, c, cls+a, cls+a+c.
    LossSetup,
    /// Correction arms: Without RB, Anchors, MHSA, Both.
    RbSetup,
    /// One loss weight at a time in {0.1, 0.5, 1.0}, others at 1.0.
    Lambda,
}

impl Sweep {
    pub const ALL: [Sweep; 6] = [
        Sweep::K,
        Sweep::Noise,
        Sweep::Smoothing,
        Sweep::LossSetup,
        Sweep::RbSetup,
        Sweep::Lambda,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Sweep::K => "k",
            Sweep::Noise => "noise",
            Sweep::Smoothing => "smoothing",
            Sweep::LossSetup => "loss-setup",
            Sweep::RbSetup => "rb-setup",
            Sweep::Lambda => "lambda",
        }
    }

    /// Columns identifying a cell, before the fixed result columns.
    fn axis_columns(self) -> &'static [&'static str] {
        match self {
            Sweep::K => &["k"],
            Sweep::Noise => &["noise_pct"],
            Sweep::Smoothing => &["smoothing_term"],
            Sweep::LossSetup => &["setup"],
            Sweep::RbSetup => &["setup"],
            Sweep::Lambda => &["lambda_name", "lambda_value"],
        }
    }
}

impl FromStr for Sweep {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "k" => Ok(Sweep::K),
            "noise" => Ok(Sweep::Noise),
            "smoothing" => Ok(Sweep::Smoothing),
            "loss-setup" => Ok(Sweep::LossSetup),
            "rb-setup" => Ok(Sweep::RbSetup),
            "lambda" => Ok(Sweep::Lambda),
            other => Err(HarnessError::UnknownSweep(other.to_string())),
        }
    }
}

/// One sweep cell: its axis labels and the config to run.
struct Cell {
    labels: Vec<String>,
    cfg: ExperimentConfig,
}

/// A finished sweep as an ordered table.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl SweepTable {
    pub fn header_line(&self) -> String {
        self.header.join(",")
    }

    pub fn rows_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let cells: Vec<String> =
                row.iter().map(|c| csv_escape(c)).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}", self.header_line(), self.rows_csv())
    }
}

/// Build every cell of a sweep from the base config. All cells share the
/// base config's dataset; the run seed is derived from the base seed and
/// the cell coordinates so cells are independent yet reproducible.
fn cells(base: &ExperimentConfig, sweep: Sweep) -> Vec<Cell> {
    let shared_data_seed = base.resolved_data_seed();
    let make = |labels: Vec<String>, edit: &dyn Fn(&mut ExperimentConfig)| {
        let mut cfg = base.clone();
        cfg.data_seed = Some(shared_data_seed);
        cfg.seed = fnv1a64(
            format!("{}:{}:{}", base.seed, sweep.name(), labels.join(":"))
                .as_bytes(),
        );
        edit(&mut cfg);
        Cell { labels, cfg }
    };

    match sweep {
        Sweep::K => [0usize, 1, 4, 6, 8, 10, 20]
            .iter()
            .map(|&k| {
                make(vec![k.to_string()], &move |c| c.anchors_per_class = k)
            })
            .collect(),
        Sweep::Noise => (0..=10)
            .map(|i| {
                let pct = 5 * i;
                make(vec![pct.to_string()], &move |c| {
                    c.noise_rate = pct as f64 / 100.0
                })
            })
            .collect(),
        Sweep::Smoothing => [0, 5, 10, 11, 15, 20, 25, 30, 35, 40, 45, 50]
            .iter()
            .map(|&t| {
                make(vec![t.to_string()], &move |c| c.smoothing_term = t as f64)
            })
            .collect(),
        Sweep::LossSetup => {
            let setups: [(&str, (f64, f64, f64)); 5] = [
                ("cls", (1.0, 0.0, 0.0)),
                ("a", (0.0, 1.0, 0.0)),
                ("c", (0.0, 0.0, 1.0)),
                ("cls+a", (1.0, 1.0, 0.0)),
                ("cls+a+c", (1.0, 1.0, 1.0)),
            ];
            setups
                .iter()
                .map(|&(name, (cls, a, c))| {
                    make(vec![name.to_string()], &move |cfg| {
                        cfg.lambda_cls = cls;
                        cfg.lambda_anchor = a;
                        cfg.lambda_center = c;
                    })
                })
                .collect()
        }
        Sweep::RbSetup => {
            let arms: [(&str, bool, bool); 4] = [
                ("Without RB", false, false),
                ("Anchors", true, false),
                ("MHSA", false, true),
                ("Both", true, true),
            ];
            arms.iter()
                .map(|&(name, anchors, mhsa)| {
                    make(vec![name.to_string()], &move |cfg| {
                        cfg.enable_anchors = anchors;
                        cfg.enable_mhsa = mhsa;
                    })
                })
                .collect()
        }
        Sweep::Lambda => {
            let names = ["lambda_cls", "lambda_anchor", "lambda_center"];
            let values = [0.1, 0.5, 1.0];
            names
                .iter()
                .flat_map(|&name| {
                    values.iter().map(move |&v| (name, v))
                })
                .map(|(name, v)| {
                    make(
                        vec![name.to_string(), v.to_string()],
                        &move |cfg| match name {
                            "lambda_cls" => cfg.lambda_cls = v,
                            "lambda_anchor" => cfg.lambda_anchor = v,
                            _ => cfg.lambda_center = v,
                        },
                    )
                })
                .collect()
        }
    }
}

/// Run every cell of the sweep (in parallel) and collect the table.
pub fn run_sweep(base: &ExperimentConfig, sweep: Sweep) -> Result<SweepTable> {
    base.validate()?;
    let mut header: Vec<String> =
        sweep.axis_columns().iter().map(|s| s.to_string()).collect();
    header.extend(
        ["seed", "accuracy", "macro_f1", "error"].map(str::to_string),
    );

    let cells = cells(base, sweep);
    let rows: Vec<Vec<String>> = cells
        .par_iter()
        .map(|cell| {
            let mut row = cell.labels.clone();
            row.push(cell.cfg.seed.to_string());
            match train(&cell.cfg) {
                Ok(outcome) => {
                    row.push(format!("{:.6}", outcome.record.eval.accuracy));
                    row.push(format!("{:.6}", outcome.record.eval.macro_f1));
                    row.push(String::new());
                }
                Err(e) => {
                    row.push(String::new());
                    row.push(String::new());
                    row.push(one_line(&e.to_string()));
                }
            }
            row
        })
        .collect();

    Ok(SweepTable { header, rows })
}

/// Append the sweep results to `ablation_<sweep>.csv` in the output
/// directory, writing the header only when the file is new. Returns the
/// path written.
pub fn write_sweep_csv(
    cfg: &ExperimentConfig,
    sweep: Sweep,
    table: &SweepTable,
) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| HarnessError::io(&cfg.out_dir, e))?;
    let path = cfg.out_dir.join(format!("ablation_{}.csv", sweep.name()));
    let existing = match std::fs::read_to_string(&path) {
        Ok(text) => {
            let first = text.lines().next().unwrap_or("");
            if first != table.header_line() {
                return Err(HarnessError::Config(format!(
                    "{} exists with header {first:?}, expected {:?}",
                    path.display(),
                    table.header_line()
                )));
            }
            text
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            format!("{}\n", table.header_line())
        }
        Err(e) => return Err(HarnessError::io(&path, e)),
    };
    let combined = format!("{existing}{}", table.rows_csv());
    crate::train::atomic_write(&path, combined.as_bytes())?;
    Ok(path)
}

fn csv_escape(cell: &str) -> String {
    if cell.contains(',') || cell.contains('"') || cell.contains('\n') {
        format!("\"{}\"", cell.replace('"', "\"\""))
    } else {
        cell.to_string()
    }
}

fn one_line(msg: &str) -> String {
    msg.replace('\n', "; ")
}
