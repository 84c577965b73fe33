use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Node, PayloadKind, TranscriptEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditRule {
    /// A participant returned factors to the peer it just received them from.
    BackTransfer,
    /// The organizer received factors before the chain finished, or a chain
    /// kept moving after its final send.
    EarlyOrganizerContact,
    /// A payload is not a well-formed factor pair.
    NonFactorPayload,
    /// A transfer does not originate at the current holder of the chain.
    BrokenChain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// Position in the full transcript.
    pub index: usize,
    pub chain_id: usize,
    pub rule: AuditRule,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub entries: usize,
    pub chains: usize,
    pub violations: Vec<Violation>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn first_violation(&self) -> Option<&Violation> {
        self.violations.first()
    }
}

#[derive(Default)]
struct ChainState {
    last: Option<(Node, Node)>,
    finished: bool,
    shape: Option<([usize; 2], [usize; 2])>,
}

/// Check a transcript against the privacy rules of the protocol.
///
/// Per chain, in transcript order:
/// - no transfer `X -> Y` directly after `Y -> X` (self-sends exempt);
/// - the organizer only sends the first message and only receives the final
///   one, after which the chain is silent;
/// - every payload is a factor pair: `p` is `|S| x l`, `q` is `l x w`, the
///   scalar count equals `|S|*l + l*w`, and shapes never change;
/// - each transfer leaves from the participant the previous one reached.
pub fn audit_transcript(transcript: &[TranscriptEntry]) -> AuditReport {
    let mut chains: HashMap<usize, ChainState> = HashMap::new();
    let mut violations = Vec::new();
    for (index, e) in transcript.iter().enumerate() {
        let mut flag = |rule, detail: String| {
            violations.push(Violation {
                index,
                chain_id: e.chain_id,
                rule,
                detail,
            })
        };
        let state = chains.entry(e.chain_id).or_default();

        let [pr, pc] = e.p_shape;
        let [qr, qc] = e.q_shape;
        if pc != qr || e.scalar_count != pr * pc + qr * qc {
            flag(
                AuditRule::NonFactorPayload,
                format!(
                    "payload of {} scalars does not match factor shapes {:?} and {:?}",
                    e.scalar_count, e.p_shape, e.q_shape
                ),
            );
        }
        match state.shape {
            Some(shape) if shape != (e.p_shape, e.q_shape) => flag(
                AuditRule::NonFactorPayload,
                format!("factor shapes changed from {shape:?}"),
            ),
            Some(_) => {}
            None => state.shape = Some((e.p_shape, e.q_shape)),
        }

        if state.finished {
            flag(
                AuditRule::EarlyOrganizerContact,
                "transfer after the chain's final send".into(),
            );
        }
        match (e.from, e.to, e.payload_kind) {
            (Node::Organizer, Node::Participant(_), PayloadKind::FactorsOnly) => {
                if state.last.is_some() {
                    flag(
                        AuditRule::EarlyOrganizerContact,
                        "organizer sent into a running chain".into(),
                    );
                }
            }
            (Node::Participant(_), Node::Organizer, PayloadKind::FinalFactors) => {
                state.finished = true;
            }
            (Node::Participant(_), Node::Organizer, PayloadKind::FactorsOnly) => {
                flag(
                    AuditRule::EarlyOrganizerContact,
                    "organizer received factors before the chain finished".into(),
                );
            }
            (Node::Participant(x), Node::Participant(y), PayloadKind::FactorsOnly) => {
                if x != y && state.last == Some((Node::Participant(y), Node::Participant(x))) {
                    flag(
                        AuditRule::BackTransfer,
                        format!("participant {x} sent factors straight back to {y}"),
                    );
                }
            }
            (from, to, kind) => flag(
                AuditRule::EarlyOrganizerContact,
                format!("unexpected {kind:?} transfer {from:?} -> {to:?}"),
            ),
        }

        match state.last {
            Some((_, holder)) if holder != e.from => flag(
                AuditRule::BrokenChain,
                format!("transfer leaves {:?} but the chain is held by {holder:?}", e.from),
            ),
            None if e.from != Node::Organizer => flag(
                AuditRule::BrokenChain,
                "chain does not start at the organizer".into(),
            ),
            _ => {}
        }
        state.last = Some((e.from, e.to));
    }
    AuditReport {
        entries: transcript.len(),
        chains: chains.len(),
        violations,
    }
}
