//! End-to-end smoke test in simulation mode: ten small jobs against the
//! minimal three-service topology, checked for full completion and clean
//! pilot retirement.
//!
//! ```bash
//! cargo run --example sim_smoke
//! ```

use std::path::Path;

use glidemini::sim::smoke_sim;
use glidemini::topology::parse_topology;

fn main() {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/configs/minimal_sim.json");
    let topology = parse_topology(&config).expect("shipped topology parses");
    let smoke = smoke_sim(&topology, 42, 120.0);

    let report = &smoke.outcome.report;
    println!(
        "jobs: {}/{} completed, makespan {:.2} s",
        report.jobs_completed,
        report.jobs_submitted,
        report.makespan_ms as f64 / 1000.0
    );
    for (id, g) in &report.per_glidein {
        println!(
            "{id}: startup {:.2} s, busy {:.2} s, idle {:.2} s, {} jobs, ended {:?}",
            g.startup_ms as f64 / 1000.0,
            g.busy_ms as f64 / 1000.0,
            g.idle_ms as f64 / 1000.0,
            g.jobs_served,
            g.terminal_state
        );
    }
    println!("event log: {} entries, hash {}", smoke.outcome.log.len(), smoke.outcome.log.hash());
    println!("wall time: {:.3} s", smoke.outcome.wall.as_secs_f64());

    if smoke.pass {
        println!("smoke test: PASS");
    } else {
        for failure in &smoke.failures {
            eprintln!("failure: {failure}");
        }
        std::process::exit(1);
    }
}
