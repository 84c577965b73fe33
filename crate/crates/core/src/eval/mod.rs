//! Error metrics, communication accounting and parameter sweeps.

mod metrics;
mod sweep;

pub use metrics::{absolute_error, comm_bound, missing_only_error, per_message_scalars};
pub use sweep::{
    median, run_method, run_sweep, write_records_csv, MedianTable, Method, MethodOutput, SweepAxis,
    SweepRecord, SweepSpec, TsvdSettings, CSV_HEADER,
};
