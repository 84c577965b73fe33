use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use cswa::datagen::{assign_coverage, simulate_observations, write_field_csv, CoverageSchedule};
use cswa::eval::{absolute_error, missing_only_error, run_sweep, write_records_csv, MedianTable, SweepRecord, SweepSpec};
use cswa::protocol::{
    aggregate_for_baseline, audit_transcript, read_transcript_jsonl, write_transcript_jsonl, AuditReport,
    RunResult, Simulation, TranscriptEntry,
};

use crate::config::{load_field, RunConfig};
use crate::CliError;

fn io_err(stage: &'static str) -> impl Fn(std::io::Error) -> CliError {
    move |e| CliError::stage(stage, e.into())
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| CliError::stage("output", e.into()))?;
    writeln!(out).map_err(io_err("output"))?;
    out.flush().map_err(io_err("output"))
}

fn prepare_out_dir(config: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&config.out_dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", config.out_dir.display())))
}

#[derive(Serialize)]
struct ScheduleFile<'a> {
    config: &'a RunConfig,
    end_cycle: usize,
    schedule: &'a CoverageSchedule,
}

pub fn generate(config: &RunConfig) -> Result<(), CliError> {
    if config.field_csv.is_some() {
        return Err(CliError::Usage("generate writes a synthetic field; drop field_csv".into()));
    }
    if config.synthetic().map_err(CliError::Usage)?.is_none() {
        return Err(CliError::Usage(
            "generate needs synthetic_subareas, synthetic_cycles and synthetic_rank".into(),
        ));
    }
    let field = load_field(config)?;
    let end_cycle = config.end_cycle.unwrap_or(field.num_cycles());
    field
        .window(end_cycle, config.params.window)
        .map_err(|e| CliError::stage("model", e))?;
    config
        .params
        .validate(field.num_subareas())
        .map_err(|e| CliError::stage("model", e))?;
    let schedule = assign_coverage(&config.params, field.num_subareas()).map_err(|e| CliError::stage("datagen", e))?;

    prepare_out_dir(config)?;
    let csv_path = config.out_dir.join("field.csv");
    let mut out = create(&csv_path)?;
    write_field_csv(&field, &mut out).map_err(|e| CliError::stage("datagen", e))?;
    out.flush().map_err(io_err("datagen"))?;
    write_json(&config.out_dir.join("field.config.json"), config)?;
    write_json(
        &config.out_dir.join("schedule.json"),
        &ScheduleFile {
            config,
            end_cycle,
            schedule: &schedule,
        },
    )?;
    println!(
        "wrote {} ({} subareas x {} cycles) and schedule.json",
        csv_path.display(),
        field.num_subareas(),
        field.num_cycles()
    );
    Ok(())
}

#[derive(Serialize)]
struct RunFile<'a> {
    config: &'a RunConfig,
    end_cycle: usize,
    abs_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    missing_abs_error: Option<f64>,
    result: &'a RunResult,
}

pub fn run(config: &RunConfig, audit: bool) -> Result<(), CliError> {
    let field = load_field(config)?;
    config
        .params
        .validate(field.num_subareas())
        .map_err(|e| CliError::stage("model", e))?;
    let end_cycle = config.end_cycle.unwrap_or(field.num_cycles());
    let truth = field
        .window(end_cycle, config.params.window)
        .map_err(|e| CliError::stage("model", e))?;
    let (_, obs) = simulate_observations(&truth, &config.params).map_err(|e| CliError::stage("datagen", e))?;
    let result = Simulation::new(config.params.clone())
        .with_options(config.options())
        .run(&obs)
        .map_err(|e| CliError::stage("protocol", e))?;
    let abs_error = absolute_error(&result.recovered, &truth).map_err(|e| CliError::stage("eval", e))?;
    let missing_abs_error = if config.missing_only_error {
        let observed = aggregate_for_baseline(&obs).map_err(|e| CliError::stage("protocol", e))?;
        missing_only_error(&result.recovered, &truth, observed.mask()).map_err(|e| CliError::stage("eval", e))?
    } else {
        None
    };

    prepare_out_dir(config)?;
    write_json(
        &config.out_dir.join("run_result.json"),
        &RunFile {
            config,
            end_cycle,
            abs_error,
            missing_abs_error,
            result: &result,
        },
    )?;
    let mut t = create(&config.out_dir.join("transcript.jsonl"))?;
    write_transcript_jsonl(&result.transcript, &mut t).map_err(|e| CliError::stage("protocol", e))?;
    t.flush().map_err(io_err("protocol"))?;

    let mut summary = format!(
        "abs_error={abs_error} chains_converged={}/{} scalars={}",
        result.converged_chains,
        result.per_chain_iters.len(),
        result.scalars_transferred
    );
    if let Some(m) = missing_abs_error {
        summary.push_str(&format!(" missing_abs_error={m}"));
    }
    println!("{summary}");
    if audit {
        report_audit(&audit_transcript(&result.transcript))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepFile<'a> {
    config: &'a RunConfig,
    records: &'a [SweepRecord],
}

pub fn sweep(config: &RunConfig) -> Result<(), CliError> {
    let axis = config
        .sweep_axis
        .ok_or_else(|| CliError::Usage("sweep needs an axis (m, s, w or l)".into()))?;
    if config.sweep_methods.is_empty() {
        return Err(CliError::Usage("sweep needs at least one method".into()));
    }
    if config.sweep_values.is_empty() {
        return Err(CliError::Usage("sweep needs at least one axis value".into()));
    }
    let seeds = if config.sweep_seeds.is_empty() {
        vec![config.params.seed]
    } else {
        config.sweep_seeds.clone()
    };
    let field = load_field(config)?;
    let spec = SweepSpec {
        end_cycle: config.end_cycle,
        options: config.options(),
        tsvd: config.tsvd,
        record_wall_time: config.timing,
        parallel: config.parallel,
        ..SweepSpec::new(
            config.params.clone(),
            axis,
            config.sweep_values.clone(),
            seeds,
            config.sweep_methods.clone(),
        )
    };
    let records = run_sweep(&spec, &field).map_err(|e| CliError::stage("eval", e))?;

    prepare_out_dir(config)?;
    let mut csv = create(&config.out_dir.join("sweep.csv"))?;
    write_records_csv(&records, &mut csv).map_err(|e| CliError::stage("eval", e))?;
    csv.flush().map_err(io_err("eval"))?;
    write_json(
        &config.out_dir.join("sweep.json"),
        &SweepFile {
            config,
            records: &records,
        },
    )?;
    print!("{}", MedianTable::from_records(&spec, &records));
    Ok(())
}

fn report_audit(report: &AuditReport) -> Result<(), CliError> {
    if report.passed() {
        println!("audit=pass entries={} chains={}", report.entries, report.chains);
        return Ok(());
    }
    println!(
        "audit=fail entries={} chains={} violations={}",
        report.entries,
        report.chains,
        report.violations.len()
    );
    for v in &report.violations {
        println!("  entry {} (chain {}): {:?}: {}", v.index, v.chain_id, v.rule, v.detail);
    }
    let first = &report.violations[0];
    Err(CliError::AuditFailed(format!(
        "{} violation(s), first at entry {}",
        report.violations.len(),
        first.index
    )))
}

fn load_transcript(path: &Path) -> Result<Vec<TranscriptEntry>, CliError> {
    let file = File::open(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        let value: serde_json::Value =
            serde_json::from_reader(BufReader::new(file)).map_err(|e| CliError::stage("protocol", e.into()))?;
        let transcript = value
            .pointer("/result/transcript")
            .or_else(|| value.get("transcript"))
            .cloned()
            .unwrap_or(value);
        serde_json::from_value(transcript).map_err(|e| CliError::stage("protocol", e.into()))
    } else {
        read_transcript_jsonl(BufReader::new(file)).map_err(|e| CliError::stage("protocol", e))
    }
}

pub fn audit(path: &Path) -> Result<(), CliError> {
    let transcript = load_transcript(path)?;
    report_audit(&audit_transcript(&transcript))
}
