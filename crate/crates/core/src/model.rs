//! Domain types shared by every stage of the pipeline.
//!
//! Rows of every matrix are subareas and columns are sensing cycles. All
//! matrices are dense `f64`.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Serde adapter storing an `Array2<f64>` as a row-major list of rows.
pub mod matrix_rows {
    use ndarray::Array2;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Array2<f64>, ser: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.outer_iter().map(|r| r.to_vec()).collect();
        rows.serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Array2<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(de)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Array2::from_shape_vec((nrows, ncols), flat).map_err(D::Error::custom)
    }
}

pub(crate) fn check_shape(
    context: &'static str,
    expected: (usize, usize),
    found: (usize, usize),
) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Shape {
            context,
            expected,
            found,
        })
    }
}

/// Ground-truth sensor field: `|S|` subareas by `|T|` cycles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    #[serde(with = "matrix_rows")]
    values: Array2<f64>,
    unit: String,
}

impl Field {
    /// Wrap a matrix as a field. Rejects empty, non-finite or negative data;
    /// shift signed modalities before ingestion and record the offset in `unit`.
    pub fn new(values: Array2<f64>, unit: impl Into<String>) -> Result<Self> {
        let (rows, cols) = values.dim();
        if rows == 0 || cols == 0 {
            return Err(Error::param(format!("field must be non-empty, got {rows}x{cols}")));
        }
        if let Some(((r, c), v)) = values
            .indexed_iter()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::param(format!(
                "field entry ({}, {}) = {v} is not a finite non-negative value",
                r + 1,
                c + 1
            )));
        }
        Ok(Field {
            values,
            unit: unit.into(),
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn unit(&self) -> &str {
        &self.unit
    }

    pub fn num_subareas(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_cycles(&self) -> usize {
        self.values.ncols()
    }

    /// Columns `end_cycle - w + 1 ..= end_cycle` (1-based cycle numbers).
    pub fn window(&self, end_cycle: usize, w: usize) -> Result<Array2<f64>> {
        build_window(self, end_cycle, w)
    }
}

/// Extract the `|S| x w` window ending at `end_cycle` (1-based, inclusive).
pub fn build_window(field: &Field, end_cycle: usize, w: usize) -> Result<Array2<f64>> {
    if w == 0 {
        return Err(Error::Range("window size must be positive".into()));
    }
    if w > end_cycle || end_cycle > field.num_cycles() {
        return Err(Error::Range(format!(
            "window of {w} cycles ending at cycle {end_cycle} does not fit in {} cycles",
            field.num_cycles()
        )));
    }
    Ok(field.values.slice(s![.., end_cycle - w..end_cycle]).to_owned())
}

/// Run hyperparameters. Field names follow their role; the usual symbols are
/// m, N, s, w, l, eta, lambda_P, lambda_Q, t_max.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    /// Number of participants (m).
    pub num_participants: usize,
    /// Number of parallel chains (N), one per starting participant.
    pub batch_size: usize,
    /// Maximum number of subareas a participant covers per cycle (s).
    pub max_subareas: usize,
    /// Number of cycles recovered jointly (w).
    pub window: usize,
    /// Latent dimension of the factorization (l).
    pub latent: usize,
    pub step_size: f64,
    pub reg_p: f64,
    pub reg_q: f64,
    /// A chain stops once the largest gradient entry drops to this value.
    pub grad_tol: f64,
    /// Per-chain update budget (t_max).
    pub max_iters: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            num_participants: 10,
            batch_size: 10,
            max_subareas: 3,
            window: 30,
            latent: 2,
            step_size: 1e-3,
            reg_p: 1e-4,
            reg_q: 1e-4,
            grad_tol: 1e-4,
            max_iters: 5000,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

impl Hyperparams {
    /// Check every parameter against a field with `num_subareas` rows.
    pub fn validate(&self, num_subareas: usize) -> Result<()> {
        let positive = [
            ("num_participants", self.num_participants),
            ("batch_size", self.batch_size),
            ("max_subareas", self.max_subareas),
            ("window", self.window),
            ("latent", self.latent),
            ("max_iters", self.max_iters),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::param(format!("{name} must be positive")));
            }
        }
        if self.batch_size > self.num_participants {
            return Err(Error::param(format!(
                "batch_size N = {} exceeds num_participants m = {}",
                self.batch_size, self.num_participants
            )));
        }
        if self.max_subareas > num_subareas {
            return Err(Error::param(format!(
                "max_subareas s = {} exceeds the {num_subareas} subareas",
                self.max_subareas
            )));
        }
        if self.latent > num_subareas.min(self.window) {
            return Err(Error::param(format!(
                "latent l = {} exceeds min(|S|, w) = {}",
                self.latent,
                num_subareas.min(self.window)
            )));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::param("step_size must be positive and finite"));
        }
        for (name, v) in [
            ("reg_p", self.reg_p),
            ("reg_q", self.reg_q),
            ("grad_tol", self.grad_tol),
            ("noise_sigma", self.noise_sigma),
        ] {
            if v.is_nan() || v < 0.0 {
                return Err(Error::param(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// One participant's view of the window: noisy readings on the cells it
/// covered and zeros elsewhere. Never leaves the participant during a
/// decentralized run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalObservations {
    /// 1-based participant index.
    pub participant_id: usize,
    #[serde(with = "matrix_rows")]
    r_local: Array2<f64>,
    #[serde(with = "matrix_rows")]
    f_mask: Array2<f64>,
}

impl LocalObservations {
    pub fn new(participant_id: usize, r_local: Array2<f64>, f_mask: Array2<f64>) -> Result<Self> {
        check_shape("observation mask", r_local.dim(), f_mask.dim())?;
        for ((idx, &m), &r) in f_mask.indexed_iter().zip(r_local.iter()) {
            let (a, t) = (idx.0 + 1, idx.1 + 1);
            if m == 0.0 {
                if r != 0.0 {
                    return Err(Error::param(format!(
                        "participant {participant_id}: masked-out cell ({a}, {t}) carries value {r}"
                    )));
                }
            } else if m == 1.0 {
                if !(r.is_finite() && r >= 0.0) {
                    return Err(Error::param(format!(
                        "participant {participant_id}: observed cell ({a}, {t}) = {r} is not finite and non-negative"
                    )));
                }
            } else {
                return Err(Error::param(format!(
                    "participant {participant_id}: mask entry ({a}, {t}) = {m} is not 0 or 1"
                )));
            }
        }
        Ok(LocalObservations {
            participant_id,
            r_local,
            f_mask,
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.r_local
    }

    pub fn mask(&self) -> &Array2<f64> {
        &self.f_mask
    }

    pub fn dim(&self) -> (usize, usize) {
        self.r_local.dim()
    }

    pub fn observed_count(&self) -> usize {
        self.f_mask.iter().filter(|&&m| m == 1.0).count()
    }

    /// Mean over observed cells, or `None` when nothing was observed.
    pub fn observed_mean(&self) -> Option<f64> {
        let n = self.observed_count();
        (n > 0).then(|| self.r_local.sum() / n as f64)
    }
}

/// Low-rank factors `P` (`|S| x l`) and `Q` (`l x w`). This is the only
/// payload that travels between participants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorPair {
    #[serde(with = "matrix_rows")]
    pub p: Array2<f64>,
    #[serde(with = "matrix_rows")]
    pub q: Array2<f64>,
}

impl FactorPair {
    pub fn new(p: Array2<f64>, q: Array2<f64>) -> Result<Self> {
        if p.ncols() != q.nrows() {
            return Err(Error::Shape {
                context: "factor pair inner dimension",
                expected: (p.nrows(), q.nrows()),
                found: p.dim(),
            });
        }
        Ok(FactorPair { p, q })
    }

    pub fn latent(&self) -> usize {
        self.p.ncols()
    }

    /// `(|S|, w)` of the matrix these factors reconstruct.
    pub fn target_dim(&self) -> (usize, usize) {
        (self.p.nrows(), self.q.ncols())
    }

    pub fn product(&self) -> Array2<f64> {
        self.p.dot(&self.q)
    }

    /// Number of reals carried when the pair is sent: `|S|*l + l*w`.
    pub fn scalar_count(&self) -> usize {
        self.p.len() + self.q.len()
    }

    pub fn is_nonnegative(&self) -> bool {
        self.p.iter().chain(self.q.iter()).all(|&v| v >= 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.q.iter()).all(|v| v.is_finite())
    }
}
