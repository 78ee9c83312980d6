//! The fake-cores option: a node with 4 real cores advertising 16 runs all
//! sixteen one-core jobs at once, because the pilot detects the advertised
//! spec and carves slots from it. Advertising the truth caps concurrency
//! at 4.
//!
//! ```bash
//! cargo run --example fake_cores
//! ```

use std::path::Path;

use glidemini::audit::audit_records;
use glidemini::model::ResourceSpec;
use glidemini::sim::run_simulation;
use glidemini::topology::{parse_topology, WorkloadItem, WorkloadSpec};

fn peak_concurrency(log: &glidemini::events::EventLog) -> i64 {
    let mut boundary = Vec::new();
    for rec in audit_records(log) {
        if rec.subject.starts_with("job-") && rec.verb == glidemini::audit::AuditVerb::Completed {
            let start = rec.detail["start_time"].as_u64().unwrap();
            let end = rec.detail["end_time"].as_u64().unwrap();
            boundary.push((start, 1i64));
            boundary.push((end, -1i64));
        }
    }
    boundary.sort();
    let mut level = 0;
    let mut peak = 0;
    for (_, delta) in boundary {
        level += delta;
        peak = peak.max(level);
    }
    peak
}

fn run(advertised_cores: u64) -> (u64, i64) {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/configs/fake_cores.json");
    let mut topology = parse_topology(&config).expect("shipped topology parses");
    topology.ce.nodes[0].advertised.cores = advertised_cores;
    let workload = WorkloadSpec {
        jobs: vec![WorkloadItem {
            submit_time_s: 0.0,
            count: 16,
            requirements: ResourceSpec::new(1, 256, 0, 0),
            runtime_s: 100.0,
            fail: false,
        }],
    };
    let outcome = run_simulation(&topology, &workload, 42, 500.0);
    (outcome.report.jobs_completed, peak_concurrency(&outcome.log))
}

fn main() {
    let (completed, peak) = run(16);
    println!("advertised 16 cores (4 real): {completed}/16 completed, peak concurrency {peak}");
    let (completed, peak) = run(4);
    println!("advertised 4 cores (honest):  {completed}/16 completed, peak concurrency {peak}");
}
