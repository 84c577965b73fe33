//! Decentralized message-passing protocol.
//!
//! The organizer picks `N` distinct starting participants and sends each a
//! fresh random factor pair. Every chain then random-walks over the
//! participants: the holder applies one local descent step on its own
//! observations and forwards the factors to a peer other than the one it
//! received them from. When the local gradient is small enough, or the
//! chain's update budget is spent, the holder returns the factors to the
//! organizer, which averages all `N` pairs and multiplies the averages.
//!
//! Observations are never part of a message: [`ChainMessage`] and
//! [`TranscriptEntry`] have no field that could hold them.

mod audit;

pub use audit::{audit_transcript, AuditReport, AuditRule, Violation};

use std::io::{BufRead, Write};

use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorization::{random_factors, sgd_step_with_rule, UpdateRule};
use crate::model::{matrix_rows, FactorPair, Hyperparams, LocalObservations};
use crate::rng::{stream, Stream};

/// Endpoint of a transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Organizer,
    Participant(usize),
}

/// What travels along a chain: the factors, the number of updates applied so
/// far, and the participant the message came from (`None` when it came from
/// the organizer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMessage {
    pub factors: FactorPair,
    pub iteration: usize,
    pub prev_participant: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    FactorsOnly,
    FinalFactors,
}

/// One recorded transfer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    /// 1-based chain index.
    pub chain_id: usize,
    pub from: Node,
    pub to: Node,
    pub payload_kind: PayloadKind,
    /// Updates applied to the factors before this transfer.
    pub iteration: usize,
    pub p_shape: [usize; 2],
    pub q_shape: [usize; 2],
    /// Reals carried: `|S|*l + l*w`.
    pub scalar_count: usize,
}

impl TranscriptEntry {
    fn new(chain_id: usize, from: Node, to: Node, kind: PayloadKind, msg: &FactorPair, iteration: usize) -> Self {
        TranscriptEntry {
            chain_id,
            from,
            to,
            payload_kind: kind,
            iteration,
            p_shape: [msg.p.nrows(), msg.p.ncols()],
            q_shape: [msg.q.nrows(), msg.q.ncols()],
            scalar_count: msg.scalar_count(),
        }
    }
}

/// How chains are executed. Both produce identical results.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Executor {
    #[default]
    Sequential,
    Parallel,
}

/// Switches that alter the protocol relative to its plain form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolOptions {
    pub update_rule: UpdateRule,
    /// Also exclude the current holder when drawing the next hop.
    pub exclude_self: bool,
    /// Drop chains that hit the update budget without converging.
    pub require_convergence: bool,
    pub init: InitMode,
    #[serde(skip)]
    pub executor: Executor,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        ProtocolOptions {
            update_rule: UpdateRule::Descent,
            exclude_self: true,
            require_convergence: false,
            init: InitMode::Shared,
            executor: Executor::Sequential,
        }
    }
}

/// A chain as handed out by the organizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainStart {
    pub chain_id: usize,
    pub participant: usize,
    pub message: ChainMessage,
}

/// How the organizer seeds the chains' starting factors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// One random pair, copied to every chain. Chains then differ only in the
    /// participants they visit, so their factors stay aligned and can be
    /// averaged entry-wise.
    #[default]
    Shared,
    /// A fresh random pair per chain. Latent columns of different chains are
    /// then unrelated (NMF is only unique up to permutation and scaling), and
    /// the averaged factors can reconstruct poorly.
    Independent,
}

/// Draw `N` distinct starting participants and a random factor pair for each.
///
/// Factor entries are `|N(0,1)| * sqrt(obs_scale / l)`. The organizer calls
/// this with `obs_scale = l` (unit entries) and each starting participant
/// rescales with [`rescale_to_local`], so no observed value reaches the
/// organizer.
pub fn init_batch(
    params: &Hyperparams,
    num_subareas: usize,
    obs_scale: f64,
    init: InitMode,
) -> Result<Vec<ChainStart>> {
    let (m, n) = (params.num_participants, params.batch_size);
    if n > m {
        return Err(Error::param(format!("batch size N = {n} exceeds m = {m}")));
    }
    if !(obs_scale > 0.0 && obs_scale.is_finite()) {
        return Err(Error::param(format!("observation scale must be positive, got {obs_scale}")));
    }
    let mut rng = stream(params.seed, "batch", &[]);
    let starts = index::sample(&mut rng, m, n);
    let shared = (init == InitMode::Shared).then(|| {
        let mut init_rng = stream(params.seed, "chain-init", &[]);
        random_factors(num_subareas, params.window, params.latent, obs_scale, &mut init_rng)
    });
    Ok(starts
        .into_iter()
        .enumerate()
        .map(|(c, start)| {
            let chain_id = c + 1;
            let factors = match init {
                InitMode::Shared => shared.clone().expect("drawn for shared mode"),
                InitMode::Independent => {
                    let mut init_rng = stream(params.seed, "chain-init", &[chain_id as u64]);
                    random_factors(num_subareas, params.window, params.latent, obs_scale, &mut init_rng)
                }
            };
            ChainStart {
                chain_id,
                participant: start + 1,
                message: ChainMessage {
                    factors,
                    iteration: 0,
                    prev_participant: None,
                },
            }
        })
        .collect())
}

/// Rescale unit-scale initial factors so `E[PQ]` tracks the participant's own
/// observed mean.
pub fn rescale_to_local(factors: &mut FactorPair, obs: &LocalObservations) {
    let latent = factors.latent() as f64;
    let mean = obs.observed_mean().filter(|m| *m > 0.0).unwrap_or(latent);
    let scale = (mean / latent).sqrt();
    factors.p *= scale;
    factors.q *= scale;
}

/// Uniform draw from `{1..m}` minus `prev` and, if `exclude_self`, minus
/// `current`. When that leaves nothing, only `prev` is excluded; when even
/// that is empty (a single participant), the holder keeps the message.
pub fn next_hop(m: usize, current: usize, prev: Option<usize>, exclude_self: bool, rng: &mut Stream) -> usize {
    let pick = |excluded: &[usize], rng: &mut Stream| {
        let candidates: Vec<usize> = (1..=m).filter(|j| !excluded.contains(j)).collect();
        (!candidates.is_empty()).then(|| candidates[rng.random_range(0..candidates.len())])
    };
    let prev_only: Vec<usize> = prev.into_iter().collect();
    let mut strict = prev_only.clone();
    if exclude_self {
        strict.push(current);
    }
    pick(&strict, rng)
        .or_else(|| pick(&prev_only, rng))
        .unwrap_or(current)
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Continue { next: usize, message: ChainMessage },
    Finished { factors: FactorPair, iterations: usize, converged: bool },
}

/// Process one incoming message on the participant owning `obs`.
pub fn participant_step(
    msg: ChainMessage,
    obs: &LocalObservations,
    params: &Hyperparams,
    options: &ProtocolOptions,
    rng: &mut Stream,
) -> Result<StepOutcome> {
    let iteration = msg.iteration + 1;
    let (factors, grads) = sgd_step_with_rule(
        obs,
        &msg.factors,
        params.step_size,
        params.reg_p,
        params.reg_q,
        options.update_rule,
    )
    .map_err(|e| e.at_iteration(iteration))?;
    let delta = grads.max_abs();
    if delta > params.grad_tol && iteration < params.max_iters {
        let current = obs.participant_id;
        let next = next_hop(
            params.num_participants,
            current,
            msg.prev_participant,
            options.exclude_self,
            rng,
        );
        Ok(StepOutcome::Continue {
            next,
            message: ChainMessage {
                factors,
                iteration,
                prev_participant: Some(current),
            },
        })
    } else {
        Ok(StepOutcome::Finished {
            factors,
            iterations: iteration,
            converged: delta <= params.grad_tol,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ChainOutcome {
    factors: FactorPair,
    iterations: usize,
    converged: bool,
    transcript: Vec<TranscriptEntry>,
}

fn run_chain(
    start: ChainStart,
    all_obs: &[LocalObservations],
    params: &Hyperparams,
    options: &ProtocolOptions,
) -> Result<ChainOutcome> {
    let chain_id = start.chain_id;
    let mut rng = stream(params.seed, "chain-hops", &[chain_id as u64]);
    let mut transcript = vec![TranscriptEntry::new(
        chain_id,
        Node::Organizer,
        Node::Participant(start.participant),
        PayloadKind::FactorsOnly,
        &start.message.factors,
        0,
    )];
    let mut holder = start.participant;
    let mut message = start.message;
    rescale_to_local(&mut message.factors, &all_obs[holder - 1]);
    loop {
        let outcome = participant_step(message, &all_obs[holder - 1], params, options, &mut rng)
            .map_err(|e| e.in_chain(chain_id))?;
        match outcome {
            StepOutcome::Continue { next, message: m } => {
                transcript.push(TranscriptEntry::new(
                    chain_id,
                    Node::Participant(holder),
                    Node::Participant(next),
                    PayloadKind::FactorsOnly,
                    &m.factors,
                    m.iteration,
                ));
                holder = next;
                message = m;
            }
            StepOutcome::Finished {
                factors,
                iterations,
                converged,
            } => {
                transcript.push(TranscriptEntry::new(
                    chain_id,
                    Node::Participant(holder),
                    Node::Organizer,
                    PayloadKind::FinalFactors,
                    &factors,
                    iterations,
                ));
                return Ok(ChainOutcome {
                    factors,
                    iterations,
                    converged,
                    transcript,
                });
            }
        }
    }
}

/// Everything the organizer ends up with after a run, plus bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub params: Hyperparams,
    pub options: ProtocolOptions,
    /// `p_bar * q_bar`.
    #[serde(with = "matrix_rows")]
    pub recovered: Array2<f64>,
    #[serde(with = "matrix_rows")]
    pub p_bar: Array2<f64>,
    #[serde(with = "matrix_rows")]
    pub q_bar: Array2<f64>,
    pub start_participants: Vec<usize>,
    pub per_chain_iters: Vec<usize>,
    pub chain_converged: Vec<bool>,
    pub converged_chains: usize,
    /// Reals sent over all transfers, initialization sends included.
    pub scalars_transferred: u64,
    /// Reals in the `N` organizer-to-participant initialization sends.
    pub init_scalars: u64,
    pub transcript: Vec<TranscriptEntry>,
}

impl RunResult {
    /// Reals moved by chain hops and final returns, excluding initialization.
    pub fn update_scalars(&self) -> u64 {
        self.scalars_transferred - self.init_scalars
    }
}

/// Configured simulator. `run` is a pure function of the observations, the
/// parameters and the options.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub params: Hyperparams,
    pub options: ProtocolOptions,
}

impl Simulation {
    pub fn new(params: Hyperparams) -> Self {
        Simulation {
            params,
            options: ProtocolOptions::default(),
        }
    }

    pub fn with_options(mut self, options: ProtocolOptions) -> Self {
        self.options = options;
        self
    }

    pub fn run(&self, all_obs: &[LocalObservations]) -> Result<RunResult> {
        let params = &self.params;
        if all_obs.len() != params.num_participants {
            return Err(Error::param(format!(
                "expected observations from {} participants, got {}",
                params.num_participants,
                all_obs.len()
            )));
        }
        let dim = all_obs[0].dim();
        params.validate(dim.0)?;
        for (j, o) in all_obs.iter().enumerate() {
            crate::model::check_shape("participant observations", (dim.0, params.window), o.dim())?;
            if o.participant_id != j + 1 {
                return Err(Error::param(format!(
                    "observation slot {} holds participant {}",
                    j + 1,
                    o.participant_id
                )));
            }
        }

        let starts = init_batch(params, dim.0, params.latent as f64, self.options.init)?;
        let start_participants: Vec<usize> = starts.iter().map(|s| s.participant).collect();
        let outcomes: Vec<ChainOutcome> = match self.options.executor {
            Executor::Sequential => starts
                .into_iter()
                .map(|s| run_chain(s, all_obs, params, &self.options))
                .collect::<Result<_>>()?,
            Executor::Parallel => starts
                .into_par_iter()
                .map(|s| run_chain(s, all_obs, params, &self.options))
                .collect::<Result<_>>()?,
        };

        let kept: Vec<FactorPair> = outcomes
            .iter()
            .filter(|o| o.converged || !self.options.require_convergence)
            .map(|o| o.factors.clone())
            .collect();
        if kept.is_empty() {
            return Err(Error::param(
                "no chain converged and require_convergence is set",
            ));
        }
        let (recovered, avg) = recover(&kept)?;

        let transcript: Vec<TranscriptEntry> =
            outcomes.iter().flat_map(|o| o.transcript.iter().cloned()).collect();
        let scalars_transferred = transcript.iter().map(|e| e.scalar_count as u64).sum();
        let init_scalars = transcript
            .iter()
            .filter(|e| e.from == Node::Organizer)
            .map(|e| e.scalar_count as u64)
            .sum();
        let chain_converged: Vec<bool> = outcomes.iter().map(|o| o.converged).collect();
        Ok(RunResult {
            params: params.clone(),
            options: self.options,
            recovered,
            p_bar: avg.p,
            q_bar: avg.q,
            start_participants,
            per_chain_iters: outcomes.iter().map(|o| o.iterations).collect(),
            converged_chains: chain_converged.iter().filter(|c| **c).count(),
            chain_converged,
            scalars_transferred,
            init_scalars,
            transcript,
        })
    }
}

/// Run every chain to completion with default options and recover the window.
pub fn run_simulation(all_obs: &[LocalObservations], params: &Hyperparams) -> Result<RunResult> {
    Simulation::new(params.clone()).run(all_obs)
}

/// Average the factor pairs entry-wise, then multiply the averages.
pub fn recover(finished: &[FactorPair]) -> Result<(Array2<f64>, FactorPair)> {
    let first = finished
        .first()
        .ok_or_else(|| Error::param("cannot recover from zero factor pairs"))?;
    // Running mean: exact when all pairs are equal.
    let mut p = first.p.clone();
    let mut q = first.q.clone();
    for (k, f) in finished.iter().enumerate().skip(1) {
        crate::model::check_shape("averaged P", p.dim(), f.p.dim())?;
        crate::model::check_shape("averaged Q", q.dim(), f.q.dim())?;
        let w = 1.0 / (k + 1) as f64;
        p.zip_mut_with(&f.p, |m, &x| *m += (x - *m) * w);
        q.zip_mut_with(&f.q, |m, &x| *m += (x - *m) * w);
    }
    let avg = FactorPair { p, q };
    Ok((avg.product(), avg))
}

/// Organizer-side aggregation used only by the centralized baselines: each
/// covered cell takes the mean of every reading of it. The result carries
/// participant id 0.
pub fn aggregate_for_baseline(all_obs: &[LocalObservations]) -> Result<LocalObservations> {
    let first = all_obs
        .first()
        .ok_or_else(|| Error::param("no observations to aggregate"))?;
    let mut sum = Array2::<f64>::zeros(first.dim());
    let mut count = Array2::<f64>::zeros(first.dim());
    for o in all_obs {
        crate::model::check_shape("aggregated observations", first.dim(), o.dim())?;
        sum += o.values();
        count += o.mask();
    }
    let mask = count.mapv(|c| if c > 0.0 { 1.0 } else { 0.0 });
    let values = ndarray::Zip::from(&sum)
        .and(&count)
        .map_collect(|&s, &c| if c > 0.0 { s / c } else { 0.0 });
    LocalObservations::new(0, values, mask)
}

/// Write one JSON object per line.
pub fn write_transcript_jsonl<W: Write>(entries: &[TranscriptEntry], mut out: W) -> Result<()> {
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_transcript_jsonl<R: BufRead>(input: R) -> Result<Vec<TranscriptEntry>> {
    let mut entries = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line).map_err(|e| Error::Parse {
            row: i + 1,
            column: e.column(),
            message: e.to_string(),
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_params(m: usize, n: usize) -> Hyperparams {
        Hyperparams {
            num_participants: m,
            batch_size: n,
            max_subareas: 2,
            window: 4,
            latent: 2,
            max_iters: 50,
            ..Hyperparams::default()
        }
    }

    fn uniform_obs(m: usize, rows: usize, cols: usize) -> Vec<LocalObservations> {
        (1..=m)
            .map(|j| {
                let mask = Array2::from_shape_fn((rows, cols), |(a, t)| ((a + t + j) % 2) as f64);
                let vals = &mask * 2.0;
                LocalObservations::new(j, vals, mask).unwrap()
            })
            .collect()
    }

    #[test]
    fn batch_without_replacement() {
        let p = small_params(6, 6);
        let starts = init_batch(&p, 5, 2.0, InitMode::Independent).unwrap();
        let mut who: Vec<usize> = starts.iter().map(|s| s.participant).collect();
        who.sort_unstable();
        assert_eq!(who, (1..=6).collect::<Vec<_>>());
        for s in &starts {
            assert!(s.message.factors.is_nonnegative());
            assert_eq!(s.message.iteration, 0);
            assert_eq!(s.message.prev_participant, None);
        }
    }

    #[test]
    fn batch_larger_than_population() {
        let p = Hyperparams {
            batch_size: 7,
            ..small_params(6, 6)
        };
        assert!(matches!(init_batch(&p, 5, 2.0, InitMode::Independent), Err(Error::Param(_))));
    }

    #[test]
    fn next_hop_exclusions() {
        let mut rng = stream(0, "t", &[]);
        for _ in 0..200 {
            let j = next_hop(5, 2, Some(4), true, &mut rng);
            assert!(![2, 4].contains(&j));
            let j = next_hop(5, 2, Some(4), false, &mut rng);
            assert_ne!(j, 4);
        }
    }

    #[test]
    fn next_hop_degenerate_two_participants() {
        let mut rng = stream(0, "t", &[]);
        // {1,2} \ {2} \ {1} is empty, so only j_p is excluded
        assert_eq!(next_hop(2, 1, Some(2), true, &mut rng), 1);
        assert_eq!(next_hop(2, 1, None, true, &mut rng), 2);
        assert_eq!(next_hop(1, 1, None, true, &mut rng), 1);
    }

    #[test]
    fn huge_tolerance_finishes_after_one_update() {
        let params = Hyperparams {
            grad_tol: f64::MAX,
            ..small_params(3, 1)
        };
        let obs = uniform_obs(3, 5, 4);
        let start = &init_batch(&params, 5, 2.0, InitMode::Shared).unwrap()[0];
        let mut rng = stream(0, "t", &[]);
        let out = participant_step(start.message.clone(), &obs[0], &params, &ProtocolOptions::default(), &mut rng)
            .unwrap();
        assert!(matches!(out, StepOutcome::Finished { iterations: 1, converged: true, .. }));
    }

    #[test]
    fn budget_cap_finishes() {
        let params = Hyperparams {
            grad_tol: 0.0,
            ..small_params(3, 1)
        };
        let obs = uniform_obs(3, 5, 4);
        let mut msg = init_batch(&params, 5, 2.0, InitMode::Shared).unwrap()[0].message.clone();
        msg.iteration = params.max_iters - 1;
        let mut rng = stream(0, "t", &[]);
        let out = participant_step(msg, &obs[1], &params, &ProtocolOptions::default(), &mut rng).unwrap();
        assert!(matches!(
            out,
            StepOutcome::Finished { iterations, converged: false, .. } if iterations == params.max_iters
        ));
    }

    #[test]
    fn continue_records_sender() {
        let params = Hyperparams {
            grad_tol: 0.0,
            ..small_params(4, 1)
        };
        let obs = uniform_obs(4, 5, 4);
        let msg = init_batch(&params, 5, 2.0, InitMode::Shared).unwrap()[0].message.clone();
        let mut rng = stream(0, "t", &[]);
        match participant_step(msg, &obs[2], &params, &ProtocolOptions::default(), &mut rng).unwrap() {
            StepOutcome::Continue { next, message } => {
                assert_ne!(next, 3);
                assert_eq!(message.prev_participant, Some(3));
                assert_eq!(message.iteration, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn recover_hand_example() {
        let a = FactorPair::new(array![[2.0], [0.0]], array![[1.0, 1.0]]).unwrap();
        let b = FactorPair::new(array![[0.0], [2.0]], array![[1.0, 1.0]]).unwrap();
        let (r, avg) = recover(&[a, b]).unwrap();
        assert_eq!(avg.p, array![[1.0], [1.0]]);
        assert_eq!(r, array![[1.0, 1.0], [1.0, 1.0]]);
    }

    #[test]
    fn recover_of_copies_is_product() {
        let a = FactorPair::new(array![[0.3, 1.7], [2.0, 0.1]], array![[1.0, 0.5], [0.25, 3.0]]).unwrap();
        let (one, _) = recover(std::slice::from_ref(&a)).unwrap();
        assert_eq!(one, a.product());
        let (many, _) = recover(&vec![a.clone(); 7]).unwrap();
        assert_eq!(many, a.product());
        assert!(recover(&[]).is_err());
    }

    #[test]
    fn aggregation_averages_overlaps() {
        let a = LocalObservations::new(1, array![[4.0, 0.0]], array![[1.0, 0.0]]).unwrap();
        let b = LocalObservations::new(2, array![[6.0, 0.0]], array![[1.0, 0.0]]).unwrap();
        let c = LocalObservations::new(3, array![[0.0, 5.0]], array![[0.0, 1.0]]).unwrap();
        let agg = aggregate_for_baseline(&[a.clone(), b, c]).unwrap();
        assert_eq!(*agg.values(), array![[5.0, 5.0]]);
        assert_eq!(*agg.mask(), array![[1.0, 1.0]]);
        let single = aggregate_for_baseline(&[a]).unwrap();
        assert_eq!(*single.values(), array![[4.0, 0.0]]);
        assert_eq!(*single.mask(), array![[1.0, 0.0]]);
    }

    #[test]
    fn single_chain_recovers_its_own_product() {
        let params = small_params(3, 1);
        let res = run_simulation(&uniform_obs(3, 5, 4), &params).unwrap();
        let last = res.transcript.last().unwrap();
        assert_eq!(last.to, Node::Organizer);
        assert_eq!(res.recovered, res.p_bar.dot(&res.q_bar));
        assert_eq!(res.per_chain_iters.len(), 1);
    }

    #[test]
    fn observation_count_must_match() {
        let params = small_params(3, 1);
        assert!(run_simulation(&uniform_obs(2, 5, 4), &params).is_err());
    }

    #[test]
    fn transcript_jsonl_round_trip() {
        let params = small_params(4, 2);
        let res = run_simulation(&uniform_obs(4, 5, 4), &params).unwrap();
        let mut buf = Vec::new();
        write_transcript_jsonl(&res.transcript, &mut buf).unwrap();
        let back = read_transcript_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, res.transcript);
    }
}
