//! Run configuration: one flat JSON document, overridden by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cswa::datagen::{generate_lowrank_field, load_field_csv};
use cswa::eval::{Method, SweepAxis, TsvdSettings};
use cswa::factorization::UpdateRule;
use cswa::protocol::{InitMode, ProtocolOptions};
use cswa::{Field, Hyperparams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub params: Hyperparams,

    /// CSV field source. Mutually exclusive with the `synthetic_*` keys.
    pub field_csv: Option<PathBuf>,
    pub synthetic_subareas: Option<usize>,
    pub synthetic_cycles: Option<usize>,
    pub synthetic_rank: Option<usize>,
    /// Seed for the synthetic field; defaults to `seed`.
    pub field_seed: Option<u64>,
    /// Last cycle of the recovered window; defaults to the field's last cycle.
    pub end_cycle: Option<usize>,
    pub out_dir: PathBuf,

    pub literal_update: bool,
    pub exclude_self: bool,
    pub require_convergence: bool,
    pub missing_only_error: bool,
    pub init: InitMode,

    pub sweep_axis: Option<SweepAxis>,
    pub sweep_values: Vec<usize>,
    pub sweep_seeds: Vec<u64>,
    /// Defaults to every method.
    pub sweep_methods: Vec<Method>,
    pub tsvd: TsvdSettings,
    /// Record wall-clock time in sweep output.
    pub timing: bool,
    /// Evaluate sweep cells in parallel.
    pub parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            params: Hyperparams::default(),
            field_csv: None,
            synthetic_subareas: None,
            synthetic_cycles: None,
            synthetic_rank: None,
            field_seed: None,
            end_cycle: None,
            out_dir: PathBuf::from("out"),
            literal_update: false,
            exclude_self: true,
            require_convergence: false,
            missing_only_error: false,
            init: InitMode::Shared,
            sweep_axis: None,
            sweep_values: Vec::new(),
            sweep_seeds: Vec::new(),
            sweep_methods: Method::ALL.to_vec(),
            tsvd: TsvdSettings::default(),
            timing: false,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub subareas: usize,
    pub cycles: usize,
    pub rank: usize,
}

pub enum FieldSource<'a> {
    Csv(&'a Path),
    Synthetic(SyntheticSpec),
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }

    pub fn synthetic(&self) -> Result<Option<SyntheticSpec>, String> {
        match (self.synthetic_subareas, self.synthetic_cycles, self.synthetic_rank) {
            (None, None, None) => Ok(None),
            (Some(subareas), Some(cycles), Some(rank)) => Ok(Some(SyntheticSpec {
                subareas,
                cycles,
                rank,
            })),
            _ => Err("synthetic field needs all of synthetic_subareas, synthetic_cycles and synthetic_rank".into()),
        }
    }

    pub fn field_source(&self) -> Result<FieldSource<'_>, String> {
        match (&self.field_csv, self.synthetic()?) {
            (Some(_), Some(_)) => Err("give either field_csv or a synthetic field, not both".into()),
            (Some(path), None) => Ok(FieldSource::Csv(path)),
            (None, Some(spec)) => Ok(FieldSource::Synthetic(spec)),
            (None, None) => Err("no field source: set field_csv or the synthetic_* keys".into()),
        }
    }

    pub fn field_seed(&self) -> u64 {
        self.field_seed.unwrap_or(self.params.seed)
    }

    pub fn options(&self) -> ProtocolOptions {
        ProtocolOptions {
            update_rule: UpdateRule::from_literal_flag(self.literal_update),
            exclude_self: self.exclude_self,
            require_convergence: self.require_convergence,
            init: self.init,
            ..ProtocolOptions::default()
        }
    }
}

pub fn load_field(config: &RunConfig) -> Result<Field, crate::CliError> {
    use crate::CliError;
    match config.field_source().map_err(CliError::Usage)? {
        FieldSource::Csv(path) => load_field_csv(path).map_err(|e| CliError::stage("datagen", e)),
        FieldSource::Synthetic(s) => generate_lowrank_field(s.subareas, s.cycles, s.rank, config.field_seed())
            .map_err(|e| CliError::stage("datagen", e)),
    }
}
