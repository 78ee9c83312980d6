//! Process mode: the same three services as the simulation, each running as
//! its own OS process with a single event loop, talking over TCP with the
//! signed line protocol. Virtual hostnames under the fictitious domain are
//! resolved through a generated table, never the real resolver.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::audit::{metrics_report, MetricsReport};
use crate::canonical::canonical_string;
use crate::credentials::{init_authority, Authority, AuthorityError, Scope, Token};
use crate::events::EventLog;
use crate::model::{GlideinState, JobState, TimeMs};
use crate::topology::{smoke_workload, Mode, TopologyConfig, WorkloadSpec};
use crate::wire::{Dest, Effects, Envelope, Payload, PoolSnapshot, TimerKind};

pub const RUN_FILE: &str = "run.json";
pub const RESOLVE_FILE: &str = "resolv.json";
pub const USER_TOKEN_FILE: &str = "user.token.json";
pub const HEALTH_TIMEOUT: Duration = Duration::from_secs(10);
pub const DEFAULT_SMOKE_TIMEOUT: Duration = Duration::from_secs(120);
const RPC_TIMEOUT: Duration = Duration::from_secs(3);
const LOOP_SLEEP: Duration = Duration::from_millis(2);

pub fn wall_ms() -> TimeMs {
    SystemTime::now().duration_since(UNIX_EPOCH).expect("clock after epoch").as_millis() as TimeMs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Ce,
    Factory,
    Frontend,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Ce, Role::Factory, Role::Frontend];

    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Ce => "ce",
            Role::Factory => "factory",
            Role::Frontend => "frontend",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        Role::ALL.iter().find(|r| r.as_str() == s).copied()
    }
}

#[derive(Debug, Error)]
pub enum ProcsError {
    #[error("topology is not in procs mode")]
    NotProcsMode,
    #[error("port {port} for service {service} is already in use")]
    PortInUse { service: String, port: u16 },
    #[error("service {service} failed its health check within {:?}", HEALTH_TIMEOUT)]
    HealthCheck { service: String },
    #[error("no running deployment found at {0}")]
    NotRunning(PathBuf),
    #[error(transparent)]
    Authority(#[from] AuthorityError),
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
    #[error("{0}")]
    Protocol(String),
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> ProcsError {
    let context = context.into();
    move |source| ProcsError::Io { context, source }
}

/// hostname -> local socket address map handed to every service.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ResolutionTable {
    pub hosts: BTreeMap<String, String>,
}

impl ResolutionTable {
    pub fn for_topology(topology: &TopologyConfig) -> Self {
        let mut hosts = BTreeMap::new();
        hosts.insert(
            topology.ce.endpoint.hostname.clone(),
            format!("127.0.0.1:{}", topology.ce.endpoint.port),
        );
        hosts.insert(
            topology.factory.endpoint.hostname.clone(),
            format!("127.0.0.1:{}", topology.factory.endpoint.port),
        );
        hosts.insert(
            topology.frontend.endpoint.hostname.clone(),
            format!("127.0.0.1:{}", topology.frontend.endpoint.port),
        );
        Self { hosts }
    }

    pub fn resolve(&self, hostname: &str) -> Option<SocketAddr> {
        self.hosts.get(hostname).and_then(|addr| addr.parse().ok())
    }

    pub fn load(path: &Path) -> Result<Self, ProcsError> {
        let text = fs::read_to_string(path).map_err(io_err(format!("read {}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ProcsError::Protocol(e.to_string()))
    }

    pub fn store(&self, path: &Path) -> Result<(), ProcsError> {
        fs::write(path, canonical_string(self))
            .map_err(io_err(format!("write {}", path.display())))
    }
}

// ---------------------------------------------------------------------------
// outbound connections
// ---------------------------------------------------------------------------

/// Lazily connected outbound streams, one per peer hostname.
struct Connector {
    table: ResolutionTable,
    sender: String,
    seq: u64,
    streams: BTreeMap<String, TcpStream>,
}

impl Connector {
    fn new(table: ResolutionTable, sender: &str) -> Self {
        Self { table, sender: sender.to_string(), seq: 0, streams: BTreeMap::new() }
    }

    fn stream_for(&mut self, hostname: &str) -> io::Result<&mut TcpStream> {
        if !self.streams.contains_key(hostname) {
            let addr = self
                .table
                .resolve(hostname)
                .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, "unresolvable host"))?;
            let stream = TcpStream::connect_timeout(&addr, RPC_TIMEOUT)?;
            stream.set_read_timeout(Some(RPC_TIMEOUT))?;
            stream.set_nodelay(true)?;
            self.streams.insert(hostname.to_string(), stream);
        }
        Ok(self.streams.get_mut(hostname).unwrap())
    }

    fn write_line(&mut self, authority: &Authority, hostname: &str, payload: Payload) -> io::Result<()> {
        self.seq += 1;
        let line = Envelope::new(self.sender.clone(), self.seq, payload).to_line(authority);
        let result = self.stream_for(hostname).and_then(|s| s.write_all(line.as_bytes()));
        if result.is_err() {
            // one reconnect attempt, then give up for this call
            self.streams.remove(hostname);
            self.stream_for(hostname)?.write_all(line.as_bytes())?;
        }
        Ok(())
    }

    /// Fire-and-forget notification.
    fn send(&mut self, authority: &Authority, hostname: &str, payload: Payload) -> io::Result<()> {
        self.write_line(authority, hostname, payload)
    }

    /// Request expecting exactly one reply line.
    fn rpc(&mut self, authority: &Authority, hostname: &str, payload: Payload) -> io::Result<Payload> {
        self.write_line(authority, hostname, payload)?;
        let stream = self.stream_for(hostname)?;
        let mut reader = BufReader::new(stream.try_clone()?);
        let mut line = String::new();
        let n = reader.read_line(&mut line)?;
        if n == 0 {
            self.streams.remove(hostname);
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "peer closed"));
        }
        let envelope = Envelope::from_line(authority, &line)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
        Ok(envelope.payload)
    }
}

// ---------------------------------------------------------------------------
// the service event loop
// ---------------------------------------------------------------------------

struct LineConn {
    stream: TcpStream,
    buffer: Vec<u8>,
}

/// Per-service append-only log file writer with its own sequence counter.
struct LogSink {
    file: fs::File,
    service_seqs: BTreeMap<String, u64>,
}

impl LogSink {
    fn open(path: &Path) -> Result<Self, ProcsError> {
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(format!("open {}", path.display())))?;
        Ok(Self { file, service_seqs: BTreeMap::new() })
    }

    fn write(&mut self, time: TimeMs, service: &str, kind: &str, payload: serde_json::Value) {
        let seq = self.service_seqs.entry(service.to_string()).or_insert(0);
        let entry = crate::events::EventRecord {
            time,
            seq: *seq,
            service: service.to_string(),
            kind: kind.to_string(),
            payload,
        };
        *seq += 1;
        let _ = self.file.write_all(canonical_string(&entry).as_bytes());
        let _ = self.file.write_all(b"\n");
        let _ = self.file.flush();
    }
}

enum ServiceState {
    Ce(crate::ce::CeService),
    Factory(crate::factory::FactoryService),
    Frontend {
        frontend: crate::frontend::FrontendService,
        pool: crate::pool::PoolState,
    },
}

struct ServiceHost {
    role: Role,
    authority: Authority,
    state: ServiceState,
    connector: Connector,
    ce_host: String,
    factory_host: String,
    frontend_host: String,
    timers: std::collections::BinaryHeap<std::cmp::Reverse<(TimeMs, u64, String)>>,
    timer_seq: u64,
    timer_kinds: BTreeMap<String, TimerKind>,
    sink: LogSink,
    rng: ChaCha8Rng,
    shutting_down: bool,
}

impl ServiceHost {
    fn schedule(&mut self, at: TimeMs, kind: TimerKind) {
        let key = format!("t{}", self.timer_seq);
        self.timer_seq += 1;
        self.timer_kinds.insert(key.clone(), kind);
        self.timers.push(std::cmp::Reverse((at, self.timer_seq, key)));
    }

    fn dest_host(&self, dest: Dest) -> &str {
        match dest {
            Dest::Ce => &self.ce_host,
            Dest::Factory => &self.factory_host,
            Dest::Frontend => &self.frontend_host,
        }
    }

    fn apply_effects(&mut self, effects: Effects) {
        for (dest, payload) in effects.messages {
            let host = self.dest_host(dest).to_string();
            let sent = self.connector.send(&self.authority, &host, payload.clone());
            if sent.is_err() {
                self.handle_send_failure(dest, &payload);
            } else {
                self.handle_send_success(&payload);
            }
        }
        for timer in effects.timers {
            self.schedule(timer.at, timer.kind);
        }
    }

    fn handle_send_success(&mut self, payload: &Payload) {
        if let (ServiceState::Ce(ce), Payload::EpRegister { glidein_id, .. }) =
            (&mut self.state, payload)
        {
            if let Some(rt) = ce.glideins.get_mut(glidein_id) {
                rt.pool_registered = true;
                rt.register_failures = 0;
            }
        }
    }

    fn handle_send_failure(&mut self, _dest: Dest, payload: &Payload) {
        let now = wall_ms();
        if let (ServiceState::Ce(ce), Payload::EpRegister { glidein_id, .. }) =
            (&mut self.state, payload)
        {
            let mut fx = Effects::none();
            ce.registration_send_failed(glidein_id, now, &mut fx);
            // failure notifications go to the factory; if that also fails
            // there is nobody left to tell
            for (dest, payload) in std::mem::take(&mut fx.messages) {
                let host = self.dest_host(dest).to_string();
                let _ = self.connector.send(&self.authority, &host, payload);
            }
        }
    }

    fn fire_timer(&mut self, kind: TimerKind, now: TimeMs) {
        match kind {
            TimerKind::CeCycle => {
                let mut fx = Effects::none();
                if let ServiceState::Ce(ce) = &mut self.state {
                    ce.cycle(now, &mut fx);
                }
                self.apply_effects(fx);
            }
            TimerKind::GlideinStart { glidein_id } => {
                let draw: f64 = self.rng.gen();
                let mut fx = Effects::none();
                if let ServiceState::Ce(ce) = &mut self.state {
                    ce.glidein_start(&glidein_id, draw, now, &mut fx);
                }
                self.apply_effects(fx);
            }
            TimerKind::GlideinPoll { glidein_id } => {
                let mut fx = Effects::none();
                if let ServiceState::Ce(ce) = &mut self.state {
                    ce.glidein_poll(&glidein_id, now, &mut fx);
                }
                self.apply_effects(fx);
            }
            TimerKind::SlotDone { glidein_id, slot_id } => {
                let mut fx = Effects::none();
                if let ServiceState::Ce(ce) = &mut self.state {
                    ce.slot_done(&glidein_id, &slot_id, now, &mut fx);
                }
                self.apply_effects(fx);
            }
            TimerKind::FactoryCycle => {
                let mut fx = Effects::none();
                if let ServiceState::Factory(factory) = &mut self.state {
                    factory.cycle(&self.authority, now, &mut fx);
                }
                // pilot submissions go out as RPCs so a dead CE surfaces
                // immediately; everything else is a notification
                let messages = std::mem::take(&mut fx.messages);
                for (dest, payload) in messages {
                    let host = self.dest_host(dest).to_string();
                    match payload {
                        Payload::GlideinSubmit { ref glidein_id, .. } => {
                            let reply =
                                self.connector.rpc(&self.authority, &host, payload.clone());
                            if reply.is_err() {
                                if let ServiceState::Factory(factory) = &mut self.state {
                                    let _ = factory.handle_glidein_event(
                                        glidein_id,
                                        crate::model::GlideinEvent::Failed,
                                        None,
                                        None,
                                        now,
                                    );
                                }
                            }
                        }
                        other => {
                            let _ = self.connector.send(&self.authority, &host, other);
                        }
                    }
                }
                self.apply_effects(fx);
            }
            TimerKind::FrontendCycle => {
                let factory_host = self.factory_host.clone();
                let statuses = match self.connector.rpc(
                    &self.authority,
                    &factory_host,
                    Payload::StatusGet,
                ) {
                    Ok(Payload::StatusReply { statuses }) => statuses,
                    _ => Vec::new(),
                };
                let (requests, period) = match &mut self.state {
                    ServiceState::Frontend { frontend, pool } => {
                        let snapshot = pool.snapshot();
                        (
                            frontend.prepare_requests(
                                &mut self.authority,
                                &snapshot,
                                &statuses,
                                now,
                            ),
                            frontend.cycle_period_ms,
                        )
                    }
                    _ => return,
                };
                for msg in requests {
                    let entry_id = msg.entry_id.clone();
                    let seq = msg.seq;
                    if let Ok(Payload::RequestAck { accepted: true, .. }) = self.connector.rpc(
                        &self.authority,
                        &factory_host,
                        Payload::RequestPut(msg),
                    ) {
                        if let ServiceState::Frontend { frontend, .. } = &mut self.state {
                            frontend.commit_seq(&entry_id, seq);
                        }
                    }
                    // otherwise skipped this cycle; retried with the same seq
                }
                self.schedule(now + period, TimerKind::FrontendCycle);
            }
            TimerKind::Negotiate => {
                let (claims, period) = match &mut self.state {
                    ServiceState::Frontend { pool, .. } => {
                        pool.expire_ads(now);
                        (pool.negotiate(now), pool.negotiation_period_ms)
                    }
                    _ => return,
                };
                let ce_host = self.ce_host.clone();
                for (job_id, glidein_id, ticket) in claims {
                    let reply = self.connector.rpc(
                        &self.authority,
                        &ce_host,
                        Payload::Claim { glidein_id: glidein_id.clone(), job: ticket },
                    );
                    let result = match reply {
                        Ok(Payload::ClaimReply { result, .. }) => result,
                        _ => crate::wire::ClaimResult::Refused {
                            reason: "ce-unreachable".to_string(),
                        },
                    };
                    if let ServiceState::Frontend { pool, .. } = &mut self.state {
                        pool.claim_resolved(&job_id, &glidein_id, &result, wall_ms());
                    }
                }
                self.schedule(now + period, TimerKind::Negotiate);
            }
        }
    }

    /// Dispatch one verified inbound message; `Some` means reply expected.
    fn dispatch(&mut self, envelope: Envelope, now: TimeMs) -> Option<Payload> {
        let mut fx = Effects::none();
        let reply = match (&mut self.state, envelope.payload) {
            (_, Payload::Ping) => Some(Payload::Pong { service: self.role.as_str().to_string() }),
            (_, Payload::Shutdown) => {
                self.shutting_down = true;
                Some(Payload::Ok)
            }
            (ServiceState::Ce(ce), Payload::GlideinSubmit { glidein_id, client_id, credential, .. }) => {
                let result = ce.submit_glidein(
                    &self.authority,
                    &glidein_id,
                    &client_id,
                    &credential,
                    now,
                    &mut fx,
                );
                Some(match result {
                    Ok(()) => Payload::Ok,
                    Err(e) => Payload::Error { reason: e.to_string() },
                })
            }
            (ServiceState::Ce(ce), Payload::GlideinRetire { glidein_id }) => {
                ce.retire_glidein(&glidein_id, now, &mut fx);
                None
            }
            (ServiceState::Ce(ce), Payload::Claim { glidein_id, job }) => {
                let job_id = job.job_id.clone();
                let result = ce.claim(&glidein_id, job, now, &mut fx);
                Some(Payload::ClaimReply { glidein_id, job_id, result })
            }
            (ServiceState::Factory(factory), Payload::RequestPut(msg)) => {
                let entry_id = msg.entry_id.clone();
                let seq = msg.seq;
                let result = factory.handle_request_put(&self.authority, msg, now);
                Some(Payload::RequestAck {
                    entry_id,
                    seq,
                    accepted: result.is_ok(),
                    reason: result.err().map(|e| e.to_string()),
                })
            }
            (ServiceState::Factory(factory), Payload::StatusGet) => {
                Some(Payload::StatusReply { statuses: factory.mailbox.fetch_status() })
            }
            (ServiceState::Factory(factory), Payload::StatusPut(status)) => {
                factory.mailbox.publish_status(status);
                Some(Payload::Ok)
            }
            (
                ServiceState::Factory(factory),
                Payload::GlideinEvent { glidein_id, event, detected, jobs_served, .. },
            ) => {
                if let Err(err) =
                    factory.handle_glidein_event(&glidein_id, event, detected, jobs_served, now)
                {
                    factory.recorder.record(
                        now,
                        "event_error",
                        json!({"glidein_id": glidein_id, "error": err.to_string()}),
                    );
                }
                None
            }
            (ServiceState::Frontend { pool, .. }, Payload::JobSubmit { spec, credential }) => {
                let result = pool.submit_job(&self.authority, spec, &credential, now);
                Some(match result {
                    Ok(job_id) => Payload::JobSubmitAck { job_id: Some(job_id), reason: None },
                    Err(e) => Payload::JobSubmitAck { job_id: None, reason: Some(e.to_string()) },
                })
            }
            (ServiceState::Frontend { pool, .. }, Payload::Query) => {
                Some(Payload::QueryReply { snapshot: pool.snapshot() })
            }
            (ServiceState::Frontend { pool, .. }, Payload::EpRegister { glidein_id, detected }) => {
                pool.register_ep(&glidein_id, detected, now);
                None
            }
            (
                ServiceState::Frontend { pool, .. },
                Payload::EpHeartbeat { glidein_id, remaining, retiring },
            ) => {
                pool.heartbeat_ep(&glidein_id, remaining, retiring, now);
                None
            }
            (ServiceState::Frontend { pool, .. }, Payload::EpDeregister { glidein_id }) => {
                pool.deregister_ep(&glidein_id, now);
                None
            }
            (
                ServiceState::Frontend { pool, .. },
                Payload::JobDone {
                    glidein_id,
                    slot_id,
                    job_id,
                    start_time,
                    end_time,
                    outcome,
                    remaining,
                },
            ) => {
                pool.job_done(
                    &job_id,
                    &glidein_id,
                    &slot_id,
                    start_time,
                    end_time,
                    outcome,
                    remaining,
                    now,
                );
                None
            }
            (_, other) => Some(Payload::Error {
                reason: format!("unsupported message {} for {}", other.type_name(), self.role.as_str()),
            }),
        };
        self.apply_effects(fx);
        reply
    }

    fn drain_logs(&mut self) {
        let recorders: Vec<&mut crate::events::Recorder> = match &mut self.state {
            ServiceState::Ce(ce) => vec![&mut ce.recorder, &mut ce.glidein_recorder],
            ServiceState::Factory(factory) => vec![&mut factory.recorder],
            ServiceState::Frontend { frontend, pool } => {
                vec![&mut frontend.recorder, &mut pool.recorder]
            }
        };
        for recorder in recorders {
            let service = recorder.service.clone();
            for (time, kind, payload) in recorder.drain() {
                self.sink.write(time, &service, &kind, payload);
            }
        }
    }
}

/// Run one service process until it is told to shut down. This is what the
/// CLI's hidden `run-service` subcommand executes.
pub fn run_service(
    role: Role,
    topology: &TopologyConfig,
    resolve_path: &Path,
    logs_dir: &Path,
) -> Result<(), ProcsError> {
    let table = ResolutionTable::load(resolve_path)?;
    let authority = init_authority(&topology.secret_dir, topology.seed)?;
    let endpoint = match role {
        Role::Ce => &topology.ce.endpoint,
        Role::Factory => &topology.factory.endpoint,
        Role::Frontend => &topology.frontend.endpoint,
    };
    let listener = TcpListener::bind(("127.0.0.1", endpoint.port))
        .map_err(io_err(format!("bind port {}", endpoint.port)))?;
    listener.set_nonblocking(true).map_err(io_err("set_nonblocking"))?;

    fs::create_dir_all(logs_dir).map_err(io_err("create logs dir"))?;
    let sink = LogSink::open(&logs_dir.join(format!("{}.log", role.as_str())))?;

    let state = match role {
        Role::Ce => ServiceState::Ce(topology.build_ce()),
        Role::Factory => ServiceState::Factory(topology.build_factory()),
        Role::Frontend => ServiceState::Frontend {
            frontend: topology.build_frontend(),
            pool: topology.build_pool(),
        },
    };
    let seed = topology.seed.unwrap_or_else(|| rand::thread_rng().gen());
    let mut host = ServiceHost {
        role,
        authority,
        state,
        connector: Connector::new(table, role.as_str()),
        ce_host: topology.ce.endpoint.hostname.clone(),
        factory_host: topology.factory.endpoint.hostname.clone(),
        frontend_host: topology.frontend.endpoint.hostname.clone(),
        timers: std::collections::BinaryHeap::new(),
        timer_seq: 0,
        timer_kinds: BTreeMap::new(),
        sink,
        rng: ChaCha8Rng::seed_from_u64(seed),
        shutting_down: false,
    };

    let now = wall_ms();
    match role {
        Role::Ce => host.schedule(now + topology.ce.cycle_period_ms, TimerKind::CeCycle),
        Role::Factory => {
            host.schedule(now + topology.factory.cycle_period_ms, TimerKind::FactoryCycle)
        }
        Role::Frontend => {
            host.schedule(now + topology.frontend.cycle_period_ms, TimerKind::FrontendCycle);
            host.schedule(
                now + topology.frontend.negotiation_period_ms,
                TimerKind::Negotiate,
            );
        }
    }

    let mut conns: Vec<LineConn> = Vec::new();
    while !host.shutting_down {
        let now = wall_ms();
        // due timers first, in (time, insertion) order
        while let Some(std::cmp::Reverse((at, _, _))) = host.timers.peek() {
            if *at > now {
                break;
            }
            let std::cmp::Reverse((_, _, key)) = host.timers.pop().unwrap();
            if let Some(kind) = host.timer_kinds.remove(&key) {
                host.fire_timer(kind, now);
            }
        }
        // new connections
        loop {
            match listener.accept() {
                Ok((stream, _)) => {
                    stream.set_nonblocking(true).ok();
                    stream.set_nodelay(true).ok();
                    conns.push(LineConn { stream, buffer: Vec::new() });
                }
                Err(ref e) if e.kind() == io::ErrorKind::WouldBlock => break,
                Err(_) => break,
            }
        }
        // inbound lines
        let mut closed = Vec::new();
        for (idx, conn) in conns.iter_mut().enumerate() {
            let mut chunk = [0u8; 4096];
            loop {
                match conn.stream.read(&mut chunk) {
                    Ok(0) => {
                        closed.push(idx);
                        break;
                    }
                    Ok(n) => conn.buffer.extend_from_slice(&chunk[..n]),
                    Err(ref e) if e.kind() == io::ErrorKind::WouldBlock => break,
                    Err(_) => {
                        closed.push(idx);
                        break;
                    }
                }
            }
            while let Some(pos) = conn.buffer.iter().position(|b| *b == b'\n') {
                let line: Vec<u8> = conn.buffer.drain(..=pos).collect();
                let text = String::from_utf8_lossy(&line).to_string();
                if text.trim().is_empty() {
                    continue;
                }
                let now = wall_ms();
                match Envelope::from_line(&host.authority, &text) {
                    Ok(envelope) => {
                        if let Some(reply) = host.dispatch(envelope, now) {
                            let line = Envelope::new(
                                host.role.as_str().to_string(),
                                0,
                                reply,
                            )
                            .to_line(&host.authority);
                            let _ = conn.stream.write_all(line.as_bytes());
                        }
                        if host.shutting_down {
                            break;
                        }
                    }
                    Err(err) => {
                        // rejected and logged; sender gets a typed refusal
                        host.sink.write(
                            now,
                            host.role.as_str(),
                            "rejected_line",
                            json!({"error": err.to_string()}),
                        );
                        let line = Envelope::new(
                            host.role.as_str().to_string(),
                            0,
                            Payload::Error { reason: err.to_string() },
                        )
                        .to_line(&host.authority);
                        let _ = conn.stream.write_all(line.as_bytes());
                    }
                }
            }
        }
        for idx in closed.into_iter().rev() {
            conns.remove(idx);
        }
        host.drain_logs();
        std::thread::sleep(LOOP_SLEEP);
    }
    host.drain_logs();
    Ok(())
}

// ---------------------------------------------------------------------------
// orchestration: up / down / status / submit / smoke
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct RunState {
    pub topology_path: PathBuf,
    pub secret_dir: PathBuf,
    pub logs_dir: PathBuf,
    pub services: Vec<RunService>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunService {
    pub role: String,
    pub hostname: String,
    pub port: u16,
    pub pid: u32,
}

fn run_file(logs_dir: &Path) -> PathBuf {
    logs_dir.join(RUN_FILE)
}

/// A live deployment as seen by the orchestrating CLI.
pub struct RunHandle {
    pub state: RunState,
    children: Vec<Child>,
}

/// Issue the CLI user's job.submit token and persist the wire form.
fn write_user_token(
    authority: &mut Authority,
    topology: &TopologyConfig,
    now: TimeMs,
) -> Result<Token, ProcsError> {
    let token = authority
        .issue_token("user", &topology.pool_audience(), Scope::JobSubmit, 7_200_000, now)
        .expect("positive ttl");
    let path = topology.secret_dir.join(USER_TOKEN_FILE);
    fs::write(&path, canonical_string(&token))
        .map_err(io_err(format!("write {}", path.display())))?;
    Ok(token)
}

fn load_user_token(secret_dir: &Path) -> Result<Token, ProcsError> {
    let path = secret_dir.join(USER_TOKEN_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(format!("read {}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| ProcsError::Protocol(e.to_string()))
}

/// Bring the three services up as separate processes and health-check them.
pub fn up(
    topology: &TopologyConfig,
    topology_path: &Path,
    bin: &Path,
    logs_dir: &Path,
) -> Result<RunHandle, ProcsError> {
    if topology.mode != Mode::Procs {
        return Err(ProcsError::NotProcsMode);
    }
    let endpoints = [
        ("ce", &topology.ce.endpoint),
        ("factory", &topology.factory.endpoint),
        ("frontend", &topology.frontend.endpoint),
    ];
    for (service, endpoint) in &endpoints {
        match TcpListener::bind(("127.0.0.1", endpoint.port)) {
            Ok(probe) => drop(probe),
            Err(_) => {
                return Err(ProcsError::PortInUse {
                    service: service.to_string(),
                    port: endpoint.port,
                })
            }
        }
    }

    fs::create_dir_all(logs_dir).map_err(io_err("create logs dir"))?;
    let mut authority = init_authority(&topology.secret_dir, topology.seed)?;
    write_user_token(&mut authority, topology, wall_ms())?;
    let table = ResolutionTable::for_topology(topology);
    let resolve_path = logs_dir.join(RESOLVE_FILE);
    table.store(&resolve_path)?;

    let mut children = Vec::new();
    let mut services = Vec::new();
    for role in Role::ALL {
        let endpoint = match role {
            Role::Ce => &topology.ce.endpoint,
            Role::Factory => &topology.factory.endpoint,
            Role::Frontend => &topology.frontend.endpoint,
        };
        // console output goes to a file, never into the launcher's pipes
        let console = fs::File::create(logs_dir.join(format!("{}.console.log", role.as_str())))
            .map_err(io_err("create console log"))?;
        let child = Command::new(bin)
            .arg("run-service")
            .arg("--role")
            .arg(role.as_str())
            .arg("-f")
            .arg(topology_path)
            .arg("--resolve")
            .arg(&resolve_path)
            .arg("--logs")
            .arg(logs_dir)
            .env("GLIDEMINI_SECRET_DIR", &topology.secret_dir)
            .stdin(std::process::Stdio::null())
            .stdout(console.try_clone().map_err(io_err("clone console log"))?)
            .stderr(console)
            .spawn()
            .map_err(io_err(format!("spawn {}", role.as_str())))?;
        services.push(RunService {
            role: role.as_str().to_string(),
            hostname: endpoint.hostname.clone(),
            port: endpoint.port,
            pid: child.id(),
        });
        children.push(child);
    }

    let handle = RunHandle {
        state: RunState {
            topology_path: topology_path.to_path_buf(),
            secret_dir: topology.secret_dir.clone(),
            logs_dir: logs_dir.to_path_buf(),
            services,
        },
        children,
    };

    for service in &handle.state.services {
        if !wait_healthy(&authority, service) {
            let failed = service.role.clone();
            kill_all(&handle.state);
            return Err(ProcsError::HealthCheck { service: failed });
        }
    }
    let text = serde_json::to_string_pretty(&handle.state)
        .expect("run state serializes");
    fs::write(run_file(logs_dir), text).map_err(io_err("write run state"))?;
    Ok(handle)
}

fn wait_healthy(authority: &Authority, service: &RunService) -> bool {
    let deadline = Instant::now() + HEALTH_TIMEOUT;
    while Instant::now() < deadline {
        if let Ok(Payload::Pong { service: name }) =
            client_rpc(authority, service.port, Payload::Ping)
        {
            return name == service.role;
        }
        std::thread::sleep(Duration::from_millis(100));
    }
    false
}

/// One-shot client call to a local service port.
pub fn client_rpc(authority: &Authority, port: u16, payload: Payload) -> Result<Payload, ProcsError> {
    let addr: SocketAddr = format!("127.0.0.1:{port}").parse().unwrap();
    let stream = TcpStream::connect_timeout(&addr, Duration::from_millis(500))
        .map_err(io_err(format!("connect 127.0.0.1:{port}")))?;
    stream.set_read_timeout(Some(RPC_TIMEOUT)).map_err(io_err("set timeout"))?;
    stream.set_nodelay(true).ok();
    let mut stream = stream;
    let line = Envelope::new("cli", 0, payload).to_line(authority);
    stream.write_all(line.as_bytes()).map_err(io_err("send"))?;
    let mut reader = BufReader::new(stream);
    let mut reply = String::new();
    reader.read_line(&mut reply).map_err(io_err("read reply"))?;
    let envelope = Envelope::from_line(authority, &reply)
        .map_err(|e| ProcsError::Protocol(e.to_string()))?;
    Ok(envelope.payload)
}

pub fn load_run_state(logs_dir: &Path) -> Result<RunState, ProcsError> {
    let path = run_file(logs_dir);
    if !path.exists() {
        return Err(ProcsError::NotRunning(path));
    }
    let text = fs::read_to_string(&path).map_err(io_err(format!("read {}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| ProcsError::Protocol(e.to_string()))
}

/// Is a process with this pid still running?
pub fn pid_alive(pid: u32) -> bool {
    unsafe { libc::kill(pid as libc::pid_t, 0) == 0 }
}

fn kill_all(state: &RunState) {
    for service in &state.services {
        if pid_alive(service.pid) {
            unsafe {
                libc::kill(service.pid as libc::pid_t, libc::SIGKILL);
            }
        }
    }
}

/// Tear the deployment down: graceful wire shutdown, then SIGKILL leftovers.
/// Logs stay on disk and get merged into events.log; secrets stay intact.
pub fn down(logs_dir: &Path) -> Result<(), ProcsError> {
    let state = load_run_state(logs_dir)?;
    let authority = init_authority(&state.secret_dir, None)?;
    for service in &state.services {
        let _ = client_rpc(&authority, service.port, Payload::Shutdown);
    }
    let deadline = Instant::now() + Duration::from_secs(5);
    while Instant::now() < deadline
        && state.services.iter().any(|s| pid_alive(s.pid))
    {
        std::thread::sleep(Duration::from_millis(50));
    }
    kill_all(&state);
    // reap children if we were the spawner; harmless otherwise
    merge_logs(logs_dir)?;
    fs::remove_file(run_file(logs_dir)).ok();
    Ok(())
}

/// Merge the per-service logs into one events.log ordered by
/// (time, service, seq).
pub fn merge_logs(logs_dir: &Path) -> Result<EventLog, ProcsError> {
    let mut logs = Vec::new();
    for role in Role::ALL {
        let path = logs_dir.join(format!("{}.log", role.as_str()));
        if path.exists() {
            let file = fs::File::open(&path).map_err(io_err(format!("open {}", path.display())))?;
            let log = EventLog::read_from(BufReader::new(file))
                .map_err(|e| ProcsError::Protocol(e.to_string()))?;
            logs.push(log);
        }
    }
    let merged = EventLog::merge(logs);
    let mut out = fs::File::create(logs_dir.join("events.log"))
        .map_err(io_err("create events.log"))?;
    merged.write_to(&mut out).map_err(io_err("write events.log"))?;
    Ok(merged)
}

/// Submit a workload to the running deployment's access point.
pub fn submit_workload(
    logs_dir: &Path,
    workload: &WorkloadSpec,
) -> Result<Vec<String>, ProcsError> {
    let state = load_run_state(logs_dir)?;
    let authority = init_authority(&state.secret_dir, None)?;
    let token = load_user_token(&state.secret_dir)?;
    let frontend = state
        .services
        .iter()
        .find(|s| s.role == "frontend")
        .ok_or_else(|| ProcsError::Protocol("no frontend in run state".into()))?;
    let started = Instant::now();
    let mut job_ids = Vec::new();
    for item in &workload.jobs {
        let due = Duration::from_millis(crate::model::secs_to_ms(item.submit_time_s));
        if let Some(wait) = due.checked_sub(started.elapsed()) {
            std::thread::sleep(wait);
        }
        for _ in 0..item.count {
            let payload = Payload::JobSubmit {
                spec: crate::wire::JobSpec {
                    owner: "user".to_string(),
                    requirements: item.requirements,
                    declared_runtime_ms: crate::model::secs_to_ms(item.runtime_s),
                    fail: item.fail,
                },
                credential: token.clone(),
            };
            match client_rpc(&authority, frontend.port, payload)? {
                Payload::JobSubmitAck { job_id: Some(id), .. } => job_ids.push(id),
                Payload::JobSubmitAck { reason, .. } => {
                    return Err(ProcsError::Protocol(format!(
                        "job submission rejected: {}",
                        reason.unwrap_or_default()
                    )))
                }
                other => {
                    return Err(ProcsError::Protocol(format!(
                        "unexpected reply {}",
                        other.type_name()
                    )))
                }
            }
        }
    }
    Ok(job_ids)
}

/// A point-in-time view of the running deployment.
pub struct StatusView {
    pub services: Vec<(String, u16, bool)>,
    pub snapshot: Option<PoolSnapshot>,
    pub glidein_counts: BTreeMap<GlideinState, u64>,
}

pub fn status(logs_dir: &Path) -> Result<StatusView, ProcsError> {
    let state = load_run_state(logs_dir)?;
    let authority = init_authority(&state.secret_dir, None)?;
    let mut view = StatusView {
        services: Vec::new(),
        snapshot: None,
        glidein_counts: BTreeMap::new(),
    };
    for service in &state.services {
        let healthy = matches!(
            client_rpc(&authority, service.port, Payload::Ping),
            Ok(Payload::Pong { .. })
        );
        view.services.push((service.role.clone(), service.port, healthy));
        if service.role == "frontend" {
            if let Ok(Payload::QueryReply { snapshot }) =
                client_rpc(&authority, service.port, Payload::Query)
            {
                view.snapshot = Some(snapshot);
            }
        }
        if service.role == "factory" {
            if let Ok(Payload::StatusReply { statuses }) =
                client_rpc(&authority, service.port, Payload::StatusGet)
            {
                for status in statuses {
                    for by_state in status.counts.values() {
                        for (state, count) in by_state {
                            *view.glidein_counts.entry(*state).or_insert(0) += count;
                        }
                    }
                }
            }
        }
    }
    Ok(view)
}

/// Smoke-test outcome in process mode.
pub struct ProcsSmoke {
    pub pass: bool,
    pub failures: Vec<String>,
    pub completed_job_ids: Vec<String>,
    pub report: MetricsReport,
}

/// Drive the built-in smoke workload against a running deployment and wait
/// for full completion and pilot retirement.
pub fn smoke_procs(logs_dir: &Path, timeout: Duration) -> Result<ProcsSmoke, ProcsError> {
    let state = load_run_state(logs_dir)?;
    let authority = init_authority(&state.secret_dir, None)?;
    let workload = smoke_workload();
    let expected = workload.total_jobs();
    let job_ids = submit_workload(logs_dir, &workload)?;
    let frontend_port = state.services.iter().find(|s| s.role == "frontend").unwrap().port;
    let factory_port = state.services.iter().find(|s| s.role == "factory").unwrap().port;

    let deadline = Instant::now() + timeout;
    let mut failures = Vec::new();
    loop {
        let snapshot = match client_rpc(&authority, frontend_port, Payload::Query)? {
            Payload::QueryReply { snapshot } => snapshot,
            other => {
                return Err(ProcsError::Protocol(format!("unexpected {}", other.type_name())))
            }
        };
        let completed = snapshot.job_counts.get(&JobState::Completed).copied().unwrap_or(0);
        let terminal_jobs = completed
            + snapshot.job_counts.get(&JobState::Failed).copied().unwrap_or(0)
            + snapshot.job_counts.get(&JobState::Removed).copied().unwrap_or(0);

        let mut glideins_total = 0;
        let mut glideins_terminal = 0;
        if let Payload::StatusReply { statuses } =
            client_rpc(&authority, factory_port, Payload::StatusGet)?
        {
            for status in statuses {
                for by_state in status.counts.values() {
                    for (state, count) in by_state {
                        glideins_total += count;
                        if state.is_terminal() {
                            glideins_terminal += count;
                        }
                    }
                }
            }
        }

        if terminal_jobs >= expected && glideins_total > 0 && glideins_terminal == glideins_total {
            if completed != expected {
                failures.push(format!("jobs completed {completed} of {expected}"));
            }
            break;
        }
        if Instant::now() > deadline {
            failures.push(format!(
                "timeout: {terminal_jobs}/{expected} jobs terminal, \
                 {glideins_terminal}/{glideins_total} glideins terminal"
            ));
            break;
        }
        std::thread::sleep(Duration::from_millis(250));
    }

    // completed ids come from the merged audit trail
    let merged = merge_logs(logs_dir)?;
    let (jobs, _) = crate::audit::replay_final_states(&merged);
    let completed_job_ids: Vec<String> = jobs
        .iter()
        .filter(|(_, s)| **s == JobState::Completed)
        .map(|(id, _)| id.clone())
        .collect();
    for id in &job_ids {
        if !completed_job_ids.contains(id) && failures.is_empty() {
            failures.push(format!("job {id} did not complete"));
        }
    }
    let report = metrics_report(&merged).map_err(|e| ProcsError::Protocol(e.to_string()))?;
    Ok(ProcsSmoke { pass: failures.is_empty(), failures, completed_job_ids, report })
}

/// Find the glidemini binary for spawning services: explicit override, then
/// next to the current executable (tests and examples live one level down).
pub fn locate_bin() -> Option<PathBuf> {
    if let Ok(path) = std::env::var("GLIDEMINI_BIN") {
        let path = PathBuf::from(path);
        if path.exists() {
            return Some(path);
        }
    }
    let exe = std::env::current_exe().ok()?;
    let mut dir = exe.parent()?.to_path_buf();
    for _ in 0..3 {
        let candidate = dir.join("glidemini");
        if candidate.exists() {
            return Some(candidate);
        }
        dir = dir.parent()?.to_path_buf();
    }
    None
}

impl RunHandle {
    /// Wait for children to exit after a down(); reaps zombies.
    pub fn reap(&mut self) {
        for child in &mut self.children {
            let _ = child.wait();
        }
    }
}
