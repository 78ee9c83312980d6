//! Watch the control loop converge: with a deep queue of idle jobs and a
//! per-entry cap of 5, the factory climbs to exactly 5 queued+running
//! pilots within ceil(5 / max_submit_per_cycle) cycles and holds there.
//!
//! ```bash
//! cargo run --example pressure_convergence
//! ```

use std::path::Path;

use glidemini::model::ResourceSpec;
use glidemini::sim::run_simulation;
use glidemini::topology::{parse_topology, WorkloadItem, WorkloadSpec};

fn main() {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/configs/minimal_sim.json");
    let mut topology = parse_topology(&config).expect("shipped topology parses");
    topology.frontend.policy.max_pressure_per_entry = 5;
    topology.frontend.policy.expansion_factor = 1.0;

    let workload = WorkloadSpec {
        jobs: vec![WorkloadItem {
            submit_time_s: 0.0,
            count: 100,
            requirements: ResourceSpec::new(1, 1024, 0, 0),
            runtime_s: 30.0,
            fail: false,
        }],
    };
    let outcome = run_simulation(&topology, &workload, 7, 60.0);

    println!("factory cycle | pressure at entry-ce-1 (cap 5, 4 submissions/cycle)");
    for entry in outcome.log.entries() {
        if entry.service == "factory" && entry.kind == "cycle" {
            let pressure = entry.payload["entries"][0]["pressure"].as_u64().unwrap();
            let submitted = entry.payload["entries"][0]["submitted"].as_u64().unwrap();
            println!(
                "t = {:>5.1} s | {} {} (+{submitted})",
                entry.time as f64 / 1000.0,
                "#".repeat(pressure as usize),
                pressure,
            );
        }
    }
}
