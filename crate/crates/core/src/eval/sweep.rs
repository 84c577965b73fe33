//! One-factor-at-a-time sweeps over m, s, w or l.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{absolute_error, missing_only_error};
use crate::baselines::{mean_fill, tsvd_impute};
use crate::datagen::simulate_observations;
use crate::error::{Error, Result};
use crate::factorization::solve_centralized_with_rule;
use crate::model::{Field, Hyperparams, LocalObservations};
use crate::protocol::{aggregate_for_baseline, Executor, ProtocolOptions, Simulation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SweepAxis {
    #[serde(rename = "m")]
    Participants,
    #[serde(rename = "s")]
    MaxSubareas,
    #[serde(rename = "w")]
    Window,
    #[serde(rename = "l")]
    Latent,
}

impl SweepAxis {
    pub fn label(self) -> &'static str {
        match self {
            SweepAxis::Participants => "m",
            SweepAxis::MaxSubareas => "s",
            SweepAxis::Window => "w",
            SweepAxis::Latent => "l",
        }
    }

    /// `base` with this axis set to `value`. Varying m clamps the batch size
    /// to `min(N, m)`.
    pub fn compose(self, base: &Hyperparams, value: usize) -> Hyperparams {
        let mut p = base.clone();
        match self {
            SweepAxis::Participants => {
                p.num_participants = value;
                p.batch_size = base.batch_size.min(value);
            }
            SweepAxis::MaxSubareas => p.max_subareas = value,
            SweepAxis::Window => p.window = value,
            SweepAxis::Latent => p.latent = value,
        }
        p
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m" => Ok(SweepAxis::Participants),
            "s" => Ok(SweepAxis::MaxSubareas),
            "w" => Ok(SweepAxis::Window),
            "l" => Ok(SweepAxis::Latent),
            other => Err(Error::param(format!("unknown sweep axis `{other}` (expected m, s, w or l)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cswa,
    Centralized,
    Tsvd,
    Meanfill,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Cswa, Method::Centralized, Method::Tsvd, Method::Meanfill];

    pub fn label(self) -> &'static str {
        match self {
            Method::Cswa => "cswa",
            Method::Centralized => "centralized",
            Method::Tsvd => "tsvd",
            Method::Meanfill => "meanfill",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| Error::param(format!("unknown method `{s}`")))
    }
}

/// Truncated-SVD baseline settings. `rank: None` uses the run's latent size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsvdSettings {
    pub rank: Option<usize>,
    pub max_rounds: usize,
    pub tol: f64,
}

impl Default for TsvdSettings {
    fn default() -> Self {
        TsvdSettings {
            rank: None,
            max_rounds: 200,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: Hyperparams,
    pub axis: SweepAxis,
    pub values: Vec<usize>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    /// Last cycle of the evaluated window; defaults to the field's last cycle.
    #[serde(default)]
    pub end_cycle: Option<usize>,
    #[serde(default)]
    pub options: ProtocolOptions,
    #[serde(default)]
    pub tsvd: TsvdSettings,
    /// Record wall-clock time per cell. Off, `wall_ms` is written as 0 and
    /// output files are byte-reproducible.
    #[serde(default)]
    pub record_wall_time: bool,
    /// Evaluate (value, seed) cells on the rayon pool.
    #[serde(default)]
    pub parallel: bool,
}

impl SweepSpec {
    pub fn new(base: Hyperparams, axis: SweepAxis, values: Vec<usize>, seeds: Vec<u64>, methods: Vec<Method>) -> Self {
        SweepSpec {
            base,
            axis,
            values,
            seeds,
            methods,
            end_cycle: None,
            options: ProtocolOptions::default(),
            tsvd: TsvdSettings::default(),
            record_wall_time: false,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub axis: SweepAxis,
    pub value: usize,
    pub method: Method,
    pub seed: u64,
    pub abs_error: f64,
    /// Error over cells no participant observed.
    pub missing_abs_error: Option<f64>,
    /// CSWA: longest chain; centralized: updates; TSVD: rounds; mean fill: 0.
    pub iters: usize,
    /// Reals transferred between parties (CSWA only, initialization included).
    pub scalars: u64,
    pub wall_ms: f64,
}

/// Outcome of one recovery method on one observation set.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutput {
    pub recovered: Array2<f64>,
    pub iters: usize,
    pub scalars: u64,
}

/// Run one method on shared observations.
pub fn run_method(
    method: Method,
    obs: &[LocalObservations],
    params: &Hyperparams,
    options: &ProtocolOptions,
    tsvd: &TsvdSettings,
) -> Result<MethodOutput> {
    match method {
        Method::Cswa => {
            let res = Simulation::new(params.clone()).with_options(*options).run(obs)?;
            Ok(MethodOutput {
                iters: res.per_chain_iters.iter().copied().max().unwrap_or(0),
                scalars: res.scalars_transferred,
                recovered: res.recovered,
            })
        }
        Method::Centralized => {
            let agg = aggregate_for_baseline(obs)?;
            let (f, iters) = solve_centralized_with_rule(&agg, params, options.update_rule)?;
            Ok(MethodOutput {
                recovered: f.product(),
                iters,
                scalars: 0,
            })
        }
        Method::Tsvd => {
            let agg = aggregate_for_baseline(obs)?;
            let k = tsvd.rank.unwrap_or(params.latent);
            let res = tsvd_impute(&agg, k, tsvd.max_rounds, tsvd.tol)?;
            Ok(MethodOutput {
                recovered: res.completed,
                iters: res.iterations,
                scalars: 0,
            })
        }
        Method::Meanfill => {
            let agg = aggregate_for_baseline(obs)?;
            Ok(MethodOutput {
                recovered: mean_fill(&agg)?,
                iters: 0,
                scalars: 0,
            })
        }
    }
}

fn run_cell(spec: &SweepSpec, field: &Field, value: usize, seed: u64) -> Result<Vec<SweepRecord>> {
    let mut params = spec.axis.compose(&spec.base, value);
    params.seed = seed;
    params.validate(field.num_subareas()).map_err(|e| {
        Error::param(format!("{}={value} with seed {seed}: {e}", spec.axis))
    })?;
    let end = spec.end_cycle.unwrap_or(field.num_cycles());
    let truth = field.window(end, params.window)?;
    let (_, obs) = simulate_observations(&truth, &params)?;
    let observed = aggregate_for_baseline(&obs)?.mask().clone();
    let mut options = spec.options;
    options.executor = Executor::Sequential;

    spec.methods
        .iter()
        .map(|&method| {
            let started = Instant::now();
            let out = run_method(method, &obs, &params, &options, &spec.tsvd)?;
            let wall_ms = if spec.record_wall_time {
                started.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            };
            Ok(SweepRecord {
                axis: spec.axis,
                value,
                method,
                seed,
                abs_error: absolute_error(&out.recovered, &truth)?,
                missing_abs_error: missing_only_error(&out.recovered, &truth, &observed)?,
                iters: out.iters,
                scalars: out.scalars,
                wall_ms,
            })
        })
        .collect()
}

/// Evaluate every (value, seed, method) combination. Records come back
/// ordered by value, then seed, then method in the order given,
/// regardless of execution order.
pub fn run_sweep(spec: &SweepSpec, field: &Field) -> Result<Vec<SweepRecord>> {
    if spec.values.is_empty() || spec.seeds.is_empty() {
        return Err(Error::param("sweep needs at least one value and one seed"));
    }
    if spec.methods.is_empty() {
        return Err(Error::param("sweep needs at least one method"));
    }
    let cells: Vec<(usize, u64)> = spec
        .values
        .iter()
        .flat_map(|&v| spec.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let per_cell: Vec<Vec<SweepRecord>> = if spec.parallel {
        cells
            .par_iter()
            .map(|&(v, s)| run_cell(spec, field, v, s))
            .collect::<Result<_>>()?
    } else {
        cells
            .iter()
            .map(|&(v, s)| run_cell(spec, field, v, s))
            .collect::<Result<_>>()?
    };
    Ok(per_cell.into_iter().flatten().collect())
}

pub const CSV_HEADER: &str = "axis,value,method,seed,abs_error,iters,scalars,wall_ms";

pub fn write_records_csv<W: Write>(records: &[SweepRecord], mut out: W) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.axis, r.value, r.method, r.seed, r.abs_error, r.iters, r.scalars, r.wall_ms
        )?;
    }
    Ok(())
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// One row per axis value, one column per method: median `abs_error` over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MedianTable {
    pub axis: SweepAxis,
    pub methods: Vec<Method>,
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl MedianTable {
    pub fn from_records(spec: &SweepSpec, records: &[SweepRecord]) -> Self {
        let rows = spec
            .values
            .iter()
            .map(|&v| {
                let medians = spec
                    .methods
                    .iter()
                    .map(|&m| {
                        let mut errs: Vec<f64> = records
                            .iter()
                            .filter(|r| r.value == v && r.method == m)
                            .map(|r| r.abs_error)
                            .collect();
                        median(&mut errs).unwrap_or(f64::NAN)
                    })
                    .collect();
                (v, medians)
            })
            .collect();
        MedianTable {
            axis: spec.axis,
            methods: spec.methods.clone(),
            rows,
        }
    }

    /// Median for `method` at each axis value, in axis order.
    pub fn column(&self, method: Method) -> Option<Vec<f64>> {
        let idx = self.methods.iter().position(|&m| m == method)?;
        Some(self.rows.iter().map(|(_, meds)| meds[idx]).collect())
    }
}

impl fmt::Display for MedianTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:>8}", self.axis.label())?;
        for m in &self.methods {
            write!(f, " {:>12}", m.label())?;
        }
        writeln!(f)?;
        for (v, meds) in &self.rows {
            write!(f, "{v:>8}")?;
            for x in meds {
                write!(f, " {x:>12.6}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
