//! Everything is recomputable from the event log: run a simulation, write
//! the log out, read it back, and rebuild final states, per-pilot waste,
//! and the metrics report offline.
//!
//! ```bash
//! cargo run --example event_replay
//! ```

use std::path::Path;

use glidemini::audit::{metrics_report, replay_final_states, waste};
use glidemini::events::EventLog;
use glidemini::sim::run_simulation;
use glidemini::topology::{parse_topology, smoke_workload};

fn main() {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/configs/minimal_sim.json");
    let topology = parse_topology(&config).expect("shipped topology parses");
    let outcome = run_simulation(&topology, &smoke_workload(), 42, 120.0);

    // round-trip the log through its line-oriented file form
    let mut bytes = Vec::new();
    outcome.log.write_to(&mut bytes).unwrap();
    let log = EventLog::read_from(bytes.as_slice()).unwrap();
    println!("log: {} entries, hash {}", log.len(), log.hash());
    assert_eq!(log.hash(), outcome.log.hash());

    let (jobs, glideins) = replay_final_states(&log);
    println!("replayed {} jobs and {} glideins from audit records alone", jobs.len(), glideins.len());
    for (id, state) in &glideins {
        println!(
            "  {id}: {state:?}, waste {:.2} s",
            waste(&log, id).unwrap() as f64 / 1000.0
        );
    }

    let offline = metrics_report(&log).unwrap();
    assert_eq!(offline.jobs_completed, outcome.report.jobs_completed);
    assert_eq!(offline.makespan_ms, outcome.report.makespan_ms);
    println!(
        "offline report matches the live one: {} completed, makespan {:.2} s",
        offline.jobs_completed,
        offline.makespan_ms as f64 / 1000.0
    );
}
