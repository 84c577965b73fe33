//! Ground-truth fields, participant coverage and noisy local observations.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Field, Hyperparams, LocalObservations};
use crate::rng::stream;

/// Field `A * B` with `A` (`num_subareas x rank`) and `B` (`rank x num_cycles`)
/// drawn i.i.d. uniform on `[0, 1)`. Non-negative and of exact rank `rank`
/// with probability one.
pub fn generate_lowrank_field(
    num_subareas: usize,
    num_cycles: usize,
    rank: usize,
    seed: u64,
) -> Result<Field> {
    if rank == 0 || rank > num_subareas.min(num_cycles) {
        return Err(Error::param(format!(
            "rank {rank} must lie in 1..={}",
            num_subareas.min(num_cycles)
        )));
    }
    let (a, b) = lowrank_factors(num_subareas, num_cycles, rank, seed);
    Field::new(a.dot(&b), "synthetic")
}

/// The two uniform factors behind [`generate_lowrank_field`].
pub fn lowrank_factors(
    num_subareas: usize,
    num_cycles: usize,
    rank: usize,
    seed: u64,
) -> (Array2<f64>, Array2<f64>) {
    let mut rng = stream(seed, "field", &[]);
    let a = Array2::from_shape_simple_fn((num_subareas, rank), || rng.random::<f64>());
    let b = Array2::from_shape_simple_fn((rank, num_cycles), || rng.random::<f64>());
    (a, b)
}

/// Which subareas each participant covered in each cycle of the window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSchedule {
    pub num_subareas: usize,
    pub num_cycles: usize,
    /// `covered[j][t]`: sorted 1-based subarea indices for participant `j + 1`
    /// in window cycle `t + 1`.
    pub covered: Vec<Vec<Vec<usize>>>,
}

impl CoverageSchedule {
    pub fn num_participants(&self) -> usize {
        self.covered.len()
    }

    /// `S^t`: union of all participants' coverage in window cycle `t` (0-based).
    pub fn overall(&self, t: usize) -> BTreeSet<usize> {
        self.covered
            .iter()
            .flat_map(|per_cycle| per_cycle[t].iter().copied())
            .collect()
    }
}

/// Draw `S_j^t` for every participant and window cycle: a size `k ~ U{1, s}`
/// followed by `k` distinct subareas chosen uniformly. Participant `j` draws
/// from its own stream of `params.seed`.
pub fn assign_coverage(params: &Hyperparams, num_subareas: usize) -> Result<CoverageSchedule> {
    let s = params.max_subareas;
    if s == 0 || s > num_subareas {
        return Err(Error::param(format!(
            "max_subareas {s} must lie in 1..={num_subareas}"
        )));
    }
    let covered = (1..=params.num_participants)
        .map(|j| {
            let mut rng = stream(params.seed, "coverage", &[j as u64]);
            (0..params.window)
                .map(|_| {
                    let k = rng.random_range(1..=s);
                    let mut cells: Vec<usize> = index::sample(&mut rng, num_subareas, k)
                        .into_iter()
                        .map(|a| a + 1)
                        .collect();
                    cells.sort_unstable();
                    cells
                })
                .collect()
        })
        .collect();
    Ok(CoverageSchedule {
        num_subareas,
        num_cycles: params.window,
        covered,
    })
}

/// Local observations `R^j = max(0, R* + eps)` on each participant's covered
/// cells, with `eps ~ N(0, noise_sigma^2)` independent per participant and cell.
pub fn observe(
    window: &Array2<f64>,
    schedule: &CoverageSchedule,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<LocalObservations>> {
    let dim = (schedule.num_subareas, schedule.num_cycles);
    crate::model::check_shape("coverage schedule vs window", window.dim(), dim)?;
    schedule
        .covered
        .iter()
        .enumerate()
        .map(|(j, per_cycle)| {
            let participant = j + 1;
            let mut rng = stream(seed, "noise", &[participant as u64]);
            let mut values = Array2::zeros(dim);
            let mut mask = Array2::zeros(dim);
            for (t, cells) in per_cycle.iter().enumerate() {
                for &a in cells {
                    let eps: f64 = rng.sample(StandardNormal);
                    values[[a - 1, t]] = (window[[a - 1, t]] + noise_sigma * eps).max(0.0);
                    mask[[a - 1, t]] = 1.0;
                }
            }
            LocalObservations::new(participant, values, mask)
        })
        .collect()
}

/// Coverage plus observations for one run, all derived from `params.seed`.
pub fn simulate_observations(
    window: &Array2<f64>,
    params: &Hyperparams,
) -> Result<(CoverageSchedule, Vec<LocalObservations>)> {
    let schedule = assign_coverage(params, window.nrows())?;
    let obs = observe(window, &schedule, params.noise_sigma, params.seed)?;
    Ok((schedule, obs))
}

/// Parse a field CSV: header `subarea,<cycle_1>,...,<cycle_T>`, then one row
/// per subarea with a label followed by `T` non-negative readings.
pub fn read_field_csv<R: Read>(reader: R, unit: &str) -> Result<Field> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = rdr.records();
    let parse_err = |row, column, message: String| Error::Parse {
        row,
        column,
        message,
    };
    let header = match records.next() {
        Some(h) => h.map_err(|e| parse_err(1, 1, e.to_string()))?,
        None => return Err(parse_err(1, 1, "empty file".into())),
    };
    if header.get(0) != Some("subarea") {
        return Err(parse_err(
            1,
            1,
            format!("header must start with `subarea`, found {:?}", header.get(0).unwrap_or("")),
        ));
    }
    let cycles = header.len() - 1;
    if cycles == 0 {
        return Err(parse_err(1, 2, "header names no cycles".into()));
    }
    let mut flat = Vec::new();
    let mut rows = 0;
    for (i, rec) in records.enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| parse_err(row, 1, e.to_string()))?;
        if rec.len() != cycles + 1 {
            return Err(parse_err(
                row,
                rec.len().min(cycles + 1),
                format!("expected {} fields, found {}", cycles + 1, rec.len()),
            ));
        }
        for (c, cell) in rec.iter().enumerate().skip(1) {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(row, c + 1, format!("`{cell}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(row, c + 1, format!("`{cell}` is not finite")));
            }
            if v < 0.0 {
                return Err(parse_err(
                    row,
                    c + 1,
                    format!("negative reading {v}; shift the data to be non-negative and record the offset in the unit label"),
                ));
            }
            flat.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(parse_err(2, 1, "no subarea rows".into()));
    }
    let values = Array2::from_shape_vec((rows, cycles), flat).expect("row lengths checked");
    Field::new(values, unit)
}

pub fn load_field_csv(path: impl AsRef<Path>) -> Result<Field> {
    let path = path.as_ref();
    let unit = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("field")
        .to_string();
    read_field_csv(std::fs::File::open(path)?, &unit)
}

/// Write a field in the CSV layout accepted by [`read_field_csv`].
pub fn write_field_csv<W: Write>(field: &Field, mut out: W) -> Result<()> {
    write!(out, "subarea")?;
    for t in 1..=field.num_cycles() {
        write!(out, ",{t}")?;
    }
    writeln!(out)?;
    for (a, row) in field.values().outer_iter().enumerate() {
        write!(out, "{}", a + 1)?;
        for v in row {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}
