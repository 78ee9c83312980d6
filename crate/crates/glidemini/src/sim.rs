//! Deterministic discrete-event simulation: every service in one scheduler,
//! a global event queue ordered by (time, insertion sequence), fixed 0.01 s
//! message delivery latency between services, and all randomness drawn from
//! one seeded generator in event order. (topology, workload, seed) fully
//! determine the event log and therefore its hash.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, BTreeMap};
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::audit::{self, metrics_report, MetricsReport};
use crate::ce::CeService;
use crate::credentials::{Authority, Scope, Token};
use crate::events::{EventLog, Recorder};
use crate::factory::FactoryService;
use crate::frontend::FrontendService;
use crate::model::{secs_to_ms, GlideinState, JobState, TimeMs};
use crate::pool::PoolState;
use crate::topology::{TopologyConfig, WorkloadSpec};
use crate::wire::{Dest, Effects, JobSpec, Payload, TimerKind};

/// Fixed cross-service delivery latency: small but nonzero, so cause always
/// precedes effect without interleaving ambiguity.
pub const MESSAGE_LATENCY_MS: TimeMs = 10;

#[derive(Debug)]
enum Ev {
    Timer(TimerKind),
    Deliver { dest: Dest, payload: Payload },
}

struct QueuedEv {
    at: TimeMs,
    seq: u64,
    ev: Ev,
}

impl PartialEq for QueuedEv {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for QueuedEv {}
impl PartialOrd for QueuedEv {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueuedEv {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed: BinaryHeap is a max-heap, we pop the earliest event,
        // FIFO within one instant
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// Everything a finished run hands back.
pub struct SimOutcome {
    pub log: EventLog,
    pub report: MetricsReport,
    pub final_jobs: BTreeMap<String, JobState>,
    pub final_glideins: BTreeMap<String, GlideinState>,
    pub wall: std::time::Duration,
}

impl SimOutcome {
    pub fn all_jobs_completed(&self) -> bool {
        !self.final_jobs.is_empty()
            && self.final_jobs.values().all(|s| *s == JobState::Completed)
    }

    pub fn all_glideins_terminal(&self) -> bool {
        self.final_glideins.values().all(|s| s.is_terminal())
    }
}

struct SimWorld {
    now: TimeMs,
    queue: BinaryHeap<QueuedEv>,
    next_seq: u64,
    authority: Authority,
    ce: CeService,
    factory: FactoryService,
    frontend: FrontendService,
    pool: PoolState,
    harness_recorder: Recorder,
    log: EventLog,
    rng: ChaCha8Rng,
    frontend_period_ms: TimeMs,
    negotiation_period_ms: TimeMs,
}

impl SimWorld {
    fn push(&mut self, at: TimeMs, ev: Ev) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(QueuedEv { at, seq, ev });
    }

    fn route(&mut self, effects: Effects) {
        for (dest, payload) in effects.messages {
            self.push(self.now + MESSAGE_LATENCY_MS, Ev::Deliver { dest, payload });
        }
        for timer in effects.timers {
            self.push(timer.at, Ev::Timer(timer.kind));
        }
    }

    fn drain_records(&mut self) {
        // stable service order keeps the log deterministic
        for recorder in [
            &mut self.harness_recorder,
            &mut self.factory.recorder,
            &mut self.frontend.recorder,
            &mut self.pool.recorder,
            &mut self.ce.recorder,
            &mut self.ce.glidein_recorder,
        ] {
            let service = recorder.service.clone();
            for (time, kind, payload) in recorder.drain() {
                self.log.append(time, &service, &kind, payload);
            }
        }
    }

    /// Throttle safety, checked after every event: per entry, glideins
    /// holding pressure never exceed the entry's cap.
    fn assert_pressure_within_limits(&self) {
        for (entry_id, entry) in &self.factory.entries {
            let pressure = self.factory.pressure_at(entry_id);
            assert!(
                pressure <= entry.max_pressure,
                "pressure {pressure} exceeds max_pressure {} at {entry_id} (t={})",
                entry.max_pressure,
                self.now,
            );
        }
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::Timer(kind) => self.handle_timer(kind),
            Ev::Deliver { dest, payload } => self.handle_delivery(dest, payload),
        }
    }

    fn handle_timer(&mut self, kind: TimerKind) {
        let now = self.now;
        match kind {
            TimerKind::CeCycle => {
                let mut fx = Effects::none();
                self.ce.cycle(now, &mut fx);
                self.route(fx);
            }
            TimerKind::FactoryCycle => {
                let mut fx = Effects::none();
                self.factory.cycle(&self.authority, now, &mut fx);
                self.route(fx);
            }
            TimerKind::FrontendCycle => {
                let snapshot = self.pool.snapshot();
                let statuses = self.factory.mailbox.fetch_status();
                let requests = self.frontend.prepare_requests(
                    &mut self.authority,
                    &snapshot,
                    &statuses,
                    now,
                );
                for msg in requests {
                    self.push(
                        now + MESSAGE_LATENCY_MS,
                        Ev::Deliver { dest: Dest::Factory, payload: Payload::RequestPut(msg) },
                    );
                }
                self.push(now + self.frontend_period_ms, Ev::Timer(TimerKind::FrontendCycle));
            }
            TimerKind::Negotiate => {
                self.pool.expire_ads(now);
                let claims = self.pool.negotiate(now);
                for (_job_id, glidein_id, ticket) in claims {
                    self.push(
                        now + MESSAGE_LATENCY_MS,
                        Ev::Deliver {
                            dest: Dest::Ce,
                            payload: Payload::Claim { glidein_id, job: ticket },
                        },
                    );
                }
                self.push(now + self.negotiation_period_ms, Ev::Timer(TimerKind::Negotiate));
            }
            TimerKind::GlideinStart { glidein_id } => {
                let draw: f64 = self.rng.gen();
                let mut fx = Effects::none();
                self.ce.glidein_start(&glidein_id, draw, now, &mut fx);
                self.route(fx);
            }
            TimerKind::GlideinPoll { glidein_id } => {
                let mut fx = Effects::none();
                self.ce.glidein_poll(&glidein_id, now, &mut fx);
                self.route(fx);
            }
            TimerKind::SlotDone { glidein_id, slot_id } => {
                let mut fx = Effects::none();
                self.ce.slot_done(&glidein_id, &slot_id, now, &mut fx);
                self.route(fx);
            }
        }
    }

    fn handle_delivery(&mut self, dest: Dest, payload: Payload) {
        let now = self.now;
        match (dest, payload) {
            (Dest::Factory, Payload::RequestPut(msg)) => {
                let entry_id = msg.entry_id.clone();
                let seq = msg.seq;
                let result = self.factory.handle_request_put(&self.authority, msg, now);
                let (accepted, reason) = match result {
                    Ok(()) => (true, None),
                    Err(e) => (false, Some(e.to_string())),
                };
                self.push(
                    now + MESSAGE_LATENCY_MS,
                    Ev::Deliver {
                        dest: Dest::Frontend,
                        payload: Payload::RequestAck { entry_id, seq, accepted, reason },
                    },
                );
            }
            (Dest::Factory, Payload::GlideinEvent { glidein_id, event, detected, jobs_served, .. }) => {
                self.factory
                    .handle_glidein_event(&glidein_id, event, detected, jobs_served, now)
                    .unwrap_or_else(|e| {
                        panic!("factory rejected glidein event for {glidein_id}: {e}")
                    });
            }
            (Dest::Ce, Payload::GlideinSubmit { glidein_id, client_id, credential, .. }) => {
                let mut fx = Effects::none();
                // rejections already notify the factory and the audit log
                let _ = self.ce.submit_glidein(
                    &self.authority,
                    &glidein_id,
                    &client_id,
                    &credential,
                    now,
                    &mut fx,
                );
                self.route(fx);
            }
            (Dest::Ce, Payload::GlideinRetire { glidein_id }) => {
                let mut fx = Effects::none();
                self.ce.retire_glidein(&glidein_id, now, &mut fx);
                self.route(fx);
            }
            (Dest::Ce, Payload::Claim { glidein_id, job }) => {
                let job_id = job.job_id.clone();
                let mut fx = Effects::none();
                let result = self.ce.claim(&glidein_id, job, now, &mut fx);
                self.route(fx);
                self.push(
                    now + MESSAGE_LATENCY_MS,
                    Ev::Deliver {
                        dest: Dest::Frontend,
                        payload: Payload::ClaimReply { glidein_id, job_id, result },
                    },
                );
            }
            (Dest::Frontend, Payload::JobSubmit { spec, credential }) => {
                let _ = self.pool.submit_job(&self.authority, spec, &credential, now);
            }
            (Dest::Frontend, Payload::EpRegister { glidein_id, detected }) => {
                self.pool.register_ep(&glidein_id, detected, now);
            }
            (Dest::Frontend, Payload::EpHeartbeat { glidein_id, remaining, retiring }) => {
                self.pool.heartbeat_ep(&glidein_id, remaining, retiring, now);
            }
            (Dest::Frontend, Payload::EpDeregister { glidein_id }) => {
                self.pool.deregister_ep(&glidein_id, now);
            }
            (Dest::Frontend, Payload::ClaimReply { glidein_id, job_id, result }) => {
                self.pool.claim_resolved(&job_id, &glidein_id, &result, now);
            }
            (Dest::Frontend, Payload::JobDone {
                glidein_id,
                slot_id,
                job_id,
                start_time,
                end_time,
                outcome,
                remaining,
            }) => {
                self.pool.job_done(
                    &job_id,
                    &glidein_id,
                    &slot_id,
                    start_time,
                    end_time,
                    outcome,
                    remaining,
                    now,
                );
            }
            (Dest::Frontend, Payload::RequestAck { entry_id, seq, accepted, .. }) => {
                if accepted {
                    self.frontend.commit_seq(&entry_id, seq);
                }
            }
            (dest, payload) => {
                panic!("no handler for {:?} at {:?}", payload.type_name(), dest)
            }
        }
    }
}

/// Run the full deterministic simulation.
///
/// All services are instantiated in one scheduler; the run ends when the
/// event queue drains or `until_s` is reached, whichever comes first. After
/// the run, the audit trail is replayed and must reconstruct every entity's
/// final state exactly.
pub fn run_simulation(
    topology: &TopologyConfig,
    workload: &WorkloadSpec,
    seed: u64,
    until_s: f64,
) -> SimOutcome {
    let started = Instant::now();
    let until_ms = secs_to_ms(until_s);
    let mut authority = Authority::from_seed(seed);
    let user_token = authority
        .issue_token("user", &topology.pool_audience(), Scope::JobSubmit, until_ms + 60_000, 0)
        .expect("positive ttl");

    let mut world = SimWorld {
        now: 0,
        queue: BinaryHeap::new(),
        next_seq: 0,
        authority,
        ce: topology.build_ce(),
        factory: topology.build_factory(),
        frontend: topology.build_frontend(),
        pool: topology.build_pool(),
        harness_recorder: Recorder::new("harness"),
        log: EventLog::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
        frontend_period_ms: topology.frontend.cycle_period_ms,
        negotiation_period_ms: topology.frontend.negotiation_period_ms,
    };

    world.log.append(
        0,
        "harness",
        "init",
        json!({
            "seed": seed,
            "until_ms": until_ms,
            "authority_fingerprint": world.authority.fingerprint(),
            "topology_digest": topology.digest(),
            "domain": topology.domain,
            "services": {
                "ce": topology.ce.endpoint.address(),
                "factory": topology.factory.endpoint.address(),
                "frontend": topology.frontend.endpoint.address(),
            },
        }),
    );

    schedule_workload(&mut world, workload, &user_token);

    // first cycles fire one period in; insertion order fixes tie-breaking
    // at shared ticks for good
    let ce_period = world.ce.cycle_period_ms;
    let factory_period = world.factory.cycle_period_ms;
    let frontend_period = world.frontend_period_ms;
    let negotiation_period = world.negotiation_period_ms;
    world.push(ce_period, Ev::Timer(TimerKind::CeCycle));
    world.push(factory_period, Ev::Timer(TimerKind::FactoryCycle));
    world.push(frontend_period, Ev::Timer(TimerKind::FrontendCycle));
    world.push(negotiation_period, Ev::Timer(TimerKind::Negotiate));

    while let Some(next) = world.queue.peek() {
        if next.at > until_ms {
            break;
        }
        let queued = world.queue.pop().expect("peeked");
        world.now = queued.at;
        world.handle(queued.ev);
        world.drain_records();
        world.assert_pressure_within_limits();
    }

    let final_jobs: BTreeMap<String, JobState> =
        world.pool.jobs.iter().map(|(id, job)| (id.clone(), job.state)).collect();
    // the factory owns a pilot's existence (Submitted); from Queued onward
    // the CE hosting it is authoritative. A submission still in flight at
    // the horizon is therefore Submitted.
    let mut final_glideins: BTreeMap<String, GlideinState> = world
        .factory
        .glideins
        .iter()
        .map(|(id, record)| (id.clone(), record.state))
        .collect();
    for (id, state) in world.ce.actual_states() {
        final_glideins.insert(id.clone(), *state);
    }

    // audit completeness: the trail alone must reconstruct final states
    let (replayed_jobs, replayed_glideins) = audit::replay_final_states(&world.log);
    assert_eq!(replayed_jobs, final_jobs, "audit replay mismatch for jobs");
    assert_eq!(replayed_glideins, final_glideins, "audit replay mismatch for glideins");

    let report = metrics_report(&world.log).expect("own log is well-formed");
    SimOutcome {
        log: world.log,
        report,
        final_jobs,
        final_glideins,
        wall: started.elapsed(),
    }
}

fn schedule_workload(world: &mut SimWorld, workload: &WorkloadSpec, user_token: &Token) {
    for item in &workload.jobs {
        let submit_ms = secs_to_ms(item.submit_time_s);
        for _ in 0..item.count {
            world.push(
                submit_ms + MESSAGE_LATENCY_MS,
                Ev::Deliver {
                    dest: Dest::Frontend,
                    payload: Payload::JobSubmit {
                        spec: JobSpec {
                            owner: "user".to_string(),
                            requirements: item.requirements,
                            declared_runtime_ms: secs_to_ms(item.runtime_s),
                            fail: item.fail,
                        },
                        credential: user_token.clone(),
                    },
                },
            );
        }
    }
}

/// Smoke test in simulation mode: run the built-in workload and require
/// every job completed and every pilot terminal.
pub struct SmokeOutcome {
    pub pass: bool,
    pub failures: Vec<String>,
    pub outcome: SimOutcome,
}

pub fn smoke_sim(topology: &TopologyConfig, seed: u64, until_s: f64) -> SmokeOutcome {
    let workload = crate::topology::smoke_workload();
    let outcome = run_simulation(topology, &workload, seed, until_s);
    let mut failures = Vec::new();
    let completed =
        outcome.final_jobs.values().filter(|s| **s == JobState::Completed).count() as u64;
    if completed != workload.total_jobs() {
        failures.push(format!(
            "jobs completed {completed} of {}",
            workload.total_jobs()
        ));
    }
    for (id, state) in &outcome.final_glideins {
        if !state.is_terminal() {
            failures.push(format!("glidein {id} ended non-terminal in {state:?}"));
        }
    }
    SmokeOutcome { pass: failures.is_empty(), failures, outcome }
}
