use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cswa::eval::{Method, SweepAxis};

mod commands;
mod config;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "cswa", version, about = "Aggregation-free community sensing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic field CSV and the coverage schedule for it.
    Generate(Common),
    /// Simulate one decentralized run and report its error.
    Run {
        #[command(flatten)]
        common: Common,
        /// Also audit the run's transcript.
        #[arg(long)]
        audit: bool,
    },
    /// Vary one of m, s, w, l and compare methods.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: Option<SweepAxis>,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<usize>>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Comma-separated subset of cswa, centralized, tsvd, meanfill.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
        /// Record wall-clock time per cell.
        #[arg(long)]
        timing: bool,
        /// Evaluate cells on all cores.
        #[arg(long)]
        parallel: bool,
    },
    /// Check a transcript (JSON lines or a run result JSON) for privacy violations.
    Audit {
        path: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    participants: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_subareas: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    latent: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    grad_tol: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    end_cycle: Option<usize>,
    #[arg(long)]
    field_csv: Option<PathBuf>,
    /// Synthetic field: number of subareas.
    #[arg(long)]
    subareas: Option<usize>,
    /// Synthetic field: number of cycles.
    #[arg(long)]
    cycles: Option<usize>,
    /// Synthetic field: rank.
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    field_seed: Option<u64>,
    #[arg(long)]
    literal_update: bool,
    #[arg(long)]
    no_exclude_self: bool,
    #[arg(long)]
    require_convergence: bool,
    #[arg(long)]
    missing_only_error: bool,
}

impl Common {
    /// Defaults, then the config file, then flags.
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path).map_err(CliError::Usage)?,
            None => RunConfig::default(),
        };
        let p = &mut c.params;
        macro_rules! set {
            ($($flag:ident => $field:expr),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { $field = v; })*
            };
        }
        set!(
            seed => p.seed,
            participants => p.num_participants,
            batch_size => p.batch_size,
            max_subareas => p.max_subareas,
            window => p.window,
            latent => p.latent,
            step_size => p.step_size,
            max_iters => p.max_iters,
            grad_tol => p.grad_tol,
            noise_sigma => p.noise_sigma,
            out => c.out_dir,
        );
        if let Some(e) = self.end_cycle {
            c.end_cycle = Some(e);
        }
        for (flag, key) in [
            (self.subareas, &mut c.synthetic_subareas),
            (self.cycles, &mut c.synthetic_cycles),
            (self.rank, &mut c.synthetic_rank),
        ] {
            if flag.is_some() {
                *key = flag;
            }
        }
        if self.field_seed.is_some() {
            c.field_seed = self.field_seed;
        }
        if let Some(path) = &self.field_csv {
            c.field_csv = Some(path.clone());
        }
        c.literal_update |= self.literal_update;
        c.exclude_self &= !self.no_exclude_self;
        c.require_convergence |= self.require_convergence;
        c.missing_only_error |= self.missing_only_error;
        Ok(c)
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Stage { stage: &'static str, source: cswa::Error },
    AuditFailed(String),
}

impl CliError {
    pub fn stage(stage: &'static str, source: cswa::Error) -> Self {
        CliError::Stage { stage, source }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Stage { source, .. } if source.is_numeric() => 3,
            CliError::Stage { .. } => 2,
            CliError::AuditFailed(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage: {msg}"),
            CliError::Stage { stage, source } => write!(f, "{stage}: {source}"),
            CliError::AuditFailed(msg) => write!(f, "audit failed: {msg}"),
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(common) => commands::generate(&common.resolve()?),
        Command::Run { common, audit } => commands::run(&common.resolve()?, audit),
        Command::Sweep {
            common,
            axis,
            values,
            seeds,
            methods,
            timing,
            parallel,
        } => {
            let mut c = common.resolve()?;
            if axis.is_some() {
                c.sweep_axis = axis;
            }
            if let Some(v) = values {
                c.sweep_values = v;
            }
            if let Some(s) = seeds {
                c.sweep_seeds = s;
            }
            if let Some(m) = methods {
                c.sweep_methods = m;
            }
            c.timing |= timing;
            c.parallel |= parallel;
            commands::sweep(&c)
        }
        Command::Audit { path } => commands::audit(&path),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
