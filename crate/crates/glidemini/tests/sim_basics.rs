//! Simulation engine behavior on the minimal topology.

use glidemini::model::{GlideinState, JobState};
use glidemini::sim::{run_simulation, smoke_sim};
use glidemini::topology::{parse_topology_str, smoke_workload, WorkloadSpec};

fn minimal_topology() -> glidemini::topology::TopologyConfig {
    parse_topology_str(
        r#"{
        "mode": "sim",
        "secret_dir": "./secrets",
        "services": {
            "ce": {
                "hostname": "ce-1.glideinwms.org", "port": 19620,
                "config": {
                    "cycle_period_s": 1.0, "startup_delay_s": 3.0,
                    "nodes": [
                        {"node_id": "node-0", "actual": {"cores": 8, "memory_mb": 8192, "disk_mb": 1000, "gpus": 0}},
                        {"node_id": "node-1", "actual": {"cores": 8, "memory_mb": 8192, "disk_mb": 1000, "gpus": 0}}
                    ],
                    "glidein": {"max_lifetime_s": 3600.0, "idle_timeout_s": 30.0, "poll_period_s": 2.0}
                }
            },
            "factory": {
                "hostname": "factory-1.glideinwms.org", "port": 19619,
                "config": {
                    "cycle_period_s": 2.0,
                    "entries": [{"entry_id": "entry-ce-1", "max_pressure": 8, "max_submit_per_cycle": 4}]
                }
            },
            "frontend": {
                "hostname": "frontend-1.glideinwms.org", "port": 19618,
                "config": {
                    "client_id": "frontend-1", "cycle_period_s": 2.0,
                    "max_pressure_per_entry": 8, "expansion_factor": 0.125,
                    "pool": {"negotiation_period_s": 2.0, "ad_lifetime_s": 10.0}
                }
            }
        }
    }"#,
    )
    .unwrap()
}

#[test]
fn smoke_timeline() {
    let topo = minimal_topology();
    let smoke = smoke_sim(&topo, 42, 120.0);
    for f in &smoke.failures {
        eprintln!("failure: {f}");
    }
    eprintln!("jobs: {:?}", smoke.outcome.final_jobs.values().collect::<Vec<_>>());
    eprintln!("glideins: {:?}", smoke.outcome.final_glideins);
    eprintln!("report: {}", serde_json::to_string_pretty(&smoke.outcome.report).unwrap());
    for e in smoke.outcome.log.entries().iter().take(60) {
        eprintln!("{} {} {} {}", e.time, e.service, e.kind, e.payload);
    }
    assert!(smoke.pass);
}

#[test]
fn empty_workload_only_cycle_status_events() {
    let topo = minimal_topology();
    let out = run_simulation(&topo, &WorkloadSpec { jobs: vec![] }, 1, 30.0);
    assert_eq!(out.report.jobs_completed, 0);
    for e in out.log.entries() {
        assert!(
            ["init", "cycle", "status"].contains(&e.kind.as_str()),
            "unexpected event kind {} in empty run",
            e.kind
        );
    }
}

#[test]
fn same_seed_same_hash() {
    let topo = minimal_topology();
    let a = run_simulation(&topo, &smoke_workload(), 42, 120.0);
    let b = run_simulation(&topo, &smoke_workload(), 42, 120.0);
    assert_eq!(a.log.hash(), b.log.hash());
}

#[test]
fn terminal_checks() {
    let topo = minimal_topology();
    let smoke = smoke_sim(&topo, 42, 120.0);
    assert!(smoke.outcome.final_jobs.values().all(|s| *s == JobState::Completed));
    assert!(smoke
        .outcome
        .final_glideins
        .values()
        .all(|s| *s == GlideinState::Done));
}
