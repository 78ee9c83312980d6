//! glidemini: a miniature pilot- and pressure-based workload management
//! system — factory, frontend, compute entrypoint, glideins, and user pool —
//! runnable both as a deterministic discrete-event simulation and as
//! cooperating local processes launched from a declarative 3-node topology.
//!
//! The frontend watches the user pool's job queue and publishes signed
//! provisioning requests to the factory's mailbox; the factory keeps pilot
//! pressure at each compute entrypoint inside its limits; the CE queues
//! authenticated pilot submissions onto whole nodes; each pilot detects the
//! node's advertised resources, registers with the pool as one
//! partitionable slot, runs jobs in parallel and in sequence, and retires
//! when idle so nothing is wasted.
//!
//! Start with the runnable examples:
//!
//! ```bash
//! cargo run --example sim_smoke            # end-to-end run in simulation
//! cargo run --example determinism          # identical seeds, identical logs
//! cargo run --example pressure_convergence # the control loop under a deep queue
//! cargo run --example fake_cores           # advertised vs actual resources
//! cargo run --example token_authority      # scoped bearer tokens
//! cargo run --example matchmaking          # FIFO first-fit negotiation
//! cargo run --example event_replay         # metrics recomputed from the log
//! cargo run --example wire_protocol        # the signed line protocol
//! cargo run --example procs_up_smoke       # three real processes end to end
//! ```
//!
//! The `glidemini` binary wraps the same library for the command line:
//! `up`, `down`, `status`, `submit`, `smoke-test`, and `sim`.

pub mod audit;
pub mod canonical;
pub mod ce;
pub mod credentials;
pub mod events;
pub mod factory;
pub mod frontend;
pub mod glidein;
pub mod mailbox;
pub mod model;
pub mod pool;
pub mod procs;
pub mod sim;
pub mod topology;
pub mod wire;

pub use audit::{metrics_report, waste, AuditVerb, MetricsReport};
pub use credentials::{init_authority, Authority, Scope, Token, VerifyError};
pub use events::EventLog;
pub use model::{fits, GlideinState, JobState, ResourceSpec, TimeMs};
pub use sim::{run_simulation, smoke_sim, SimOutcome};
pub use topology::{parse_topology, parse_workload, Mode, TopologyConfig, WorkloadSpec};
