//! Shared domain types: resource arithmetic, job and glidein state machines,
//! and the fit predicate used by matchmaking, carving, and throttling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulation / wall-clock time in milliseconds. In simulation mode the
/// origin is the start of the run; in process mode it is the Unix epoch.
pub type TimeMs = u64;

/// Convert a duration in (possibly fractional) seconds to milliseconds.
pub fn secs_to_ms(secs: f64) -> TimeMs {
    (secs * 1000.0).round() as TimeMs
}

/// Convert milliseconds back to fractional seconds for reporting.
pub fn ms_to_secs(ms: TimeMs) -> f64 {
    ms as f64 / 1000.0
}

/// Integer resource quantities carried by nodes, glideins, and jobs.
///
/// All arithmetic is per-field and exact; subtraction is only defined when
/// every field of the subtrahend fits in the minuend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct ResourceSpec {
    pub cores: u64,
    pub memory_mb: u64,
    pub disk_mb: u64,
    pub gpus: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("resource underflow: cannot carve {requested:?} out of {available:?}")]
pub struct ResourceUnderflow {
    pub available: ResourceSpec,
    pub requested: ResourceSpec,
}

impl ResourceSpec {
    pub const fn new(cores: u64, memory_mb: u64, disk_mb: u64, gpus: u64) -> Self {
        Self { cores, memory_mb, disk_mb, gpus }
    }

    pub const fn zero() -> Self {
        Self::new(0, 0, 0, 0)
    }

    /// True iff every field of `self` is at most the corresponding field of
    /// `available`.
    pub fn fits_in(&self, available: &ResourceSpec) -> bool {
        self.cores <= available.cores
            && self.memory_mb <= available.memory_mb
            && self.disk_mb <= available.disk_mb
            && self.gpus <= available.gpus
    }

    /// Remove `requirements` from `self`, failing on any per-field underflow.
    pub fn carve(&self, requirements: &ResourceSpec) -> Result<ResourceSpec, ResourceUnderflow> {
        if !requirements.fits_in(self) {
            return Err(ResourceUnderflow { available: *self, requested: *requirements });
        }
        Ok(ResourceSpec {
            cores: self.cores - requirements.cores,
            memory_mb: self.memory_mb - requirements.memory_mb,
            disk_mb: self.disk_mb - requirements.disk_mb,
            gpus: self.gpus - requirements.gpus,
        })
    }

    /// Exact inverse of [`ResourceSpec::carve`].
    pub fn release(&self, carved: &ResourceSpec) -> ResourceSpec {
        ResourceSpec {
            cores: self.cores + carved.cores,
            memory_mb: self.memory_mb + carved.memory_mb,
            disk_mb: self.disk_mb + carved.disk_mb,
            gpus: self.gpus + carved.gpus,
        }
    }
}

/// Fit predicate used by both the negotiator and the glidein-side re-check.
pub fn fits(requirements: &ResourceSpec, available: &ResourceSpec) -> bool {
    requirements.fits_in(available)
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("illegal transition: {state} does not accept {event}")]
pub struct IllegalTransition {
    pub state: String,
    pub event: String,
}

fn illegal(state: impl std::fmt::Debug, event: impl std::fmt::Debug) -> IllegalTransition {
    IllegalTransition { state: format!("{state:?}"), event: format!("{event:?}") }
}

// ---------------------------------------------------------------------------
// Jobs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Idle,
    Matched,
    Running,
    Completed,
    Failed,
    Removed,
}

impl JobState {
    pub fn is_terminal(&self) -> bool {
        matches!(self, JobState::Completed | JobState::Failed | JobState::Removed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobEvent {
    /// Negotiator matched the job to a glidein and sent a claim.
    Matched,
    /// The glidein accepted the claim and carved a slot.
    Started,
    /// The execution finished successfully.
    Completed,
    /// The execution finished unsuccessfully.
    Failed,
    /// A claim was refused or the execution point vanished; back to the queue.
    Unmatched,
    /// The job was withdrawn before ever matching.
    Removed,
}

/// Job state machine. `Unmatched` is the bookkeeping edge that returns a
/// provisionally matched job to the idle queue when its claim falls through.
pub fn job_transition(state: JobState, event: JobEvent) -> Result<JobState, IllegalTransition> {
    match (state, event) {
        (JobState::Idle, JobEvent::Matched) => Ok(JobState::Matched),
        (JobState::Idle, JobEvent::Removed) => Ok(JobState::Removed),
        (JobState::Matched, JobEvent::Started) => Ok(JobState::Running),
        (JobState::Matched, JobEvent::Unmatched) => Ok(JobState::Idle),
        (JobState::Running, JobEvent::Completed) => Ok(JobState::Completed),
        (JobState::Running, JobEvent::Failed) => Ok(JobState::Failed),
        (s, e) => Err(illegal(s, e)),
    }
}

/// Where and when a job actually ran.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub glidein_id: String,
    pub slot_id: String,
    pub start_time: TimeMs,
    pub end_time: TimeMs,
}

/// A user computation tracked by the pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: String,
    pub owner: String,
    pub submit_time: TimeMs,
    pub requirements: ResourceSpec,
    pub declared_runtime_ms: TimeMs,
    /// Workloads may mark a job to fail at the end of its run.
    #[serde(default)]
    pub fail: bool,
    pub state: JobState,
    pub execution_record: Option<ExecutionRecord>,
}

// ---------------------------------------------------------------------------
// Glideins
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlideinState {
    Submitted,
    Queued,
    Starting,
    Registered,
    Running,
    Retiring,
    Done,
    Failed,
}

impl GlideinState {
    pub fn is_terminal(&self) -> bool {
        matches!(self, GlideinState::Done | GlideinState::Failed)
    }

    /// States that count toward the pressure a factory maintains at an entry.
    pub fn counts_as_pressure(&self) -> bool {
        matches!(
            self,
            GlideinState::Submitted
                | GlideinState::Queued
                | GlideinState::Starting
                | GlideinState::Registered
                | GlideinState::Running
        )
    }

    pub const ALL: [GlideinState; 8] = [
        GlideinState::Submitted,
        GlideinState::Queued,
        GlideinState::Starting,
        GlideinState::Registered,
        GlideinState::Running,
        GlideinState::Retiring,
        GlideinState::Done,
        GlideinState::Failed,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlideinEvent {
    /// The CE accepted the submission into its batch queue.
    Queued,
    /// The CE assigned a node; startup begins.
    Assigned,
    /// Validation passed and the pilot joined the pool.
    Registered,
    /// The pilot carved its first active slot.
    Claimed,
    /// The last active slot finished; the pilot is idle again.
    Drained,
    /// The pilot stopped accepting work and is draining.
    Retire,
    /// Drain finished; the pilot deregistered and released its node.
    Done,
    /// Validation, registration, or the CE gave up on the pilot.
    Failed,
}

/// Glidein state machine. Any pre-terminal state may fail; `Retire` is legal
/// from both `Registered` and `Running` so a busy pilot drains gracefully.
pub fn glidein_transition(
    state: GlideinState,
    event: GlideinEvent,
) -> Result<GlideinState, IllegalTransition> {
    type S = GlideinState;
    type E = GlideinEvent;
    match (state, event) {
        (s, E::Failed) if !s.is_terminal() => Ok(S::Failed),
        (S::Submitted, E::Queued) => Ok(S::Queued),
        (S::Queued, E::Assigned) => Ok(S::Starting),
        (S::Starting, E::Registered) => Ok(S::Registered),
        (S::Registered, E::Claimed) => Ok(S::Running),
        (S::Running, E::Drained) => Ok(S::Registered),
        (S::Registered, E::Retire) | (S::Running, E::Retire) => Ok(S::Retiring),
        (S::Retiring, E::Done) => Ok(S::Done),
        (s, e) => Err(illegal(s, e)),
    }
}

/// A pilot as tracked by the factory (and mirrored by the CE and pool).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlideinRecord {
    pub glidein_id: String,
    pub entry_id: String,
    pub client_id: String,
    pub state: GlideinState,
    pub submit_time: TimeMs,
    /// Present iff the pilot registered and reported its node resources.
    pub detected: Option<ResourceSpec>,
    pub jobs_served: u64,
}

impl GlideinRecord {
    pub fn apply(&mut self, event: GlideinEvent) -> Result<GlideinState, IllegalTransition> {
        let next = glidein_transition(self.state, event)?;
        self.state = next;
        Ok(next)
    }
}

// ---------------------------------------------------------------------------
// Entries
// ---------------------------------------------------------------------------

/// A compute entrypoint as known to the factory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryDescriptor {
    pub entry_id: String,
    /// hostname:port of the CE that receives submissions for this entry.
    pub ce_address: String,
    /// Token audience the CE enforces on submissions.
    pub audience: String,
    /// Cap on queued+running glideins at this entry, across all clients.
    pub max_pressure: u64,
    /// Cap on new submissions per factory cycle.
    pub max_submit_per_cycle: u64,
    /// Clients whose requests this entry serves.
    pub trusted_clients: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rs(cores: u64, mem: u64, disk: u64, gpus: u64) -> ResourceSpec {
        ResourceSpec::new(cores, mem, disk, gpus)
    }

    #[test]
    fn fits_componentwise() {
        assert!(fits(&rs(1, 1024, 0, 0), &rs(4, 8192, 1000, 0)));
        assert!(!fits(&rs(4, 1024, 0, 0), &rs(2, 8192, 1000, 0)));
        assert!(fits(&rs(0, 0, 0, 0), &rs(0, 0, 0, 0)));
    }

    #[test]
    fn carve_subtracts_per_field() {
        let avail = rs(8, 8192, 1000, 1);
        assert_eq!(avail.carve(&rs(2, 2048, 0, 1)).unwrap(), rs(6, 6144, 1000, 0));
        assert_eq!(avail.carve(&ResourceSpec::zero()).unwrap(), avail);
        let err = rs(1, 8192, 1000, 1).carve(&rs(2, 0, 0, 0)).unwrap_err();
        assert_eq!(err.requested.cores, 2);
    }

    #[test]
    fn glidein_transition_table_edges() {
        assert_eq!(
            glidein_transition(GlideinState::Queued, GlideinEvent::Assigned).unwrap(),
            GlideinState::Starting
        );
        assert_eq!(
            glidein_transition(GlideinState::Running, GlideinEvent::Drained).unwrap(),
            GlideinState::Registered
        );
        for ev in [GlideinEvent::Queued, GlideinEvent::Retire, GlideinEvent::Failed] {
            assert!(glidein_transition(GlideinState::Done, ev).is_err());
        }
    }

    #[test]
    fn job_transition_table_edges() {
        assert_eq!(job_transition(JobState::Idle, JobEvent::Matched).unwrap(), JobState::Matched);
        assert_eq!(job_transition(JobState::Matched, JobEvent::Unmatched).unwrap(), JobState::Idle);
        assert_eq!(job_transition(JobState::Idle, JobEvent::Removed).unwrap(), JobState::Removed);
        assert!(job_transition(JobState::Completed, JobEvent::Started).is_err());
        assert!(job_transition(JobState::Idle, JobEvent::Completed).is_err());
    }

    fn arb_spec() -> impl Strategy<Value = ResourceSpec> {
        (0u64..64, 0u64..65536, 0u64..4096, 0u64..8)
            .prop_map(|(c, m, d, g)| rs(c, m, d, g))
    }

    proptest! {
        #[test]
        fn carve_release_round_trip(avail in arb_spec(), req in arb_spec()) {
            if let Ok(rest) = avail.carve(&req) {
                prop_assert_eq!(rest.release(&req), avail);
            }
        }

        #[test]
        fn fits_is_transitive(a in arb_spec(), b in arb_spec(), c in arb_spec()) {
            if fits(&a, &b) && fits(&b, &c) {
                prop_assert!(fits(&a, &c));
            }
        }

        #[test]
        fn glidein_machine_single_terminal_and_replayable(
            events in proptest::collection::vec(
                prop_oneof![
                    Just(GlideinEvent::Queued),
                    Just(GlideinEvent::Assigned),
                    Just(GlideinEvent::Registered),
                    Just(GlideinEvent::Claimed),
                    Just(GlideinEvent::Drained),
                    Just(GlideinEvent::Retire),
                    Just(GlideinEvent::Done),
                    Just(GlideinEvent::Failed),
                ],
                0..24,
            )
        ) {
            // Apply events, skipping rejected ones; once a terminal state is
            // reached every further event must be rejected, and replaying the
            // accepted subsequence must walk the identical state path.
            let mut state = GlideinState::Submitted;
            let mut accepted = Vec::new();
            let mut path = vec![state];
            for ev in &events {
                if let Ok(next) = glidein_transition(state, *ev) {
                    prop_assert!(!state.is_terminal());
                    state = next;
                    accepted.push(*ev);
                    path.push(next);
                }
            }
            let mut replay = GlideinState::Submitted;
            let mut replay_path = vec![replay];
            for ev in &accepted {
                replay = glidein_transition(replay, *ev).unwrap();
                replay_path.push(replay);
            }
            prop_assert_eq!(path, replay_path);
        }
    }
}
