//! Shared fixtures and independent oracles for the acceptance suite.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use glidemini::audit::{audit_records, AuditVerb};
use glidemini::events::EventLog;
use glidemini::model::{JobState, ResourceSpec, TimeMs};
use glidemini::sim::run_simulation;
use glidemini::topology::{
    parse_topology, parse_topology_str, smoke_workload, TopologyConfig, WorkloadItem, WorkloadSpec,
};

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/configs")
}

/// The shipped minimal topology: 1 CE with 2 x (8 cores, 8192 MB, 1000 MB),
/// factory max_pressure 8 / 4 per cycle / 2 s cycle, frontend cap 8 / 2 s
/// cycle, CE cycle 1 s, startup 3 s, negotiation 2 s, poll 2 s.
pub fn criterion1_topology() -> TopologyConfig {
    parse_topology(&configs_dir().join("minimal_sim.json")).expect("shipped topology parses")
}

pub fn fake_cores_topology() -> TopologyConfig {
    parse_topology(&configs_dir().join("fake_cores.json")).expect("shipped topology parses")
}

/// Peak number of pilots simultaneously in Running, replayed from the audit
/// trail.
pub fn peak_running_glideins(log: &EventLog) -> usize {
    let mut running: BTreeSet<String> = BTreeSet::new();
    let mut peak = 0;
    for rec in audit_records(log) {
        if !rec.subject.starts_with("glidein-") {
            continue;
        }
        match rec.verb {
            AuditVerb::Claimed => {
                running.insert(rec.subject.to_string());
            }
            AuditVerb::Registered
            | AuditVerb::Retiring
            | AuditVerb::Done
            | AuditVerb::Failed => {
                running.remove(rec.subject);
            }
            _ => {}
        }
        peak = peak.max(running.len());
    }
    peak
}

/// Closed slot occupancy intervals for one pilot.
pub fn slot_intervals(log: &EventLog, glidein_id: &str) -> Vec<(TimeMs, TimeMs)> {
    audit_records(log)
        .iter()
        .filter(|r| {
            r.subject.starts_with("job-")
                && matches!(r.verb, AuditVerb::Completed | AuditVerb::Failed)
                && r.detail.get("glidein_id").and_then(|v| v.as_str()) == Some(glidein_id)
        })
        .filter_map(|r| {
            Some((
                r.detail.get("start_time")?.as_u64()?,
                r.detail.get("end_time")?.as_u64()?,
            ))
        })
        .collect()
}

/// Maximum number of simultaneously occupied slots across all pilots:
/// a sweep over every execution interval in the log.
pub fn peak_slot_overlap(log: &EventLog) -> usize {
    let mut boundary: Vec<(TimeMs, i64)> = Vec::new();
    for rec in audit_records(log) {
        if rec.subject.starts_with("job-")
            && matches!(rec.verb, AuditVerb::Completed | AuditVerb::Failed)
        {
            if let (Some(start), Some(end)) = (
                rec.detail.get("start_time").and_then(|v| v.as_u64()),
                rec.detail.get("end_time").and_then(|v| v.as_u64()),
            ) {
                boundary.push((start, 1));
                boundary.push((end, -1));
            }
        }
    }
    boundary.sort();
    let mut current = 0i64;
    let mut peak = 0i64;
    for (_, delta) in boundary {
        current += delta;
        peak = peak.max(current);
    }
    peak as usize
}

/// Independent matchmaker: FIFO by (submit order), first fit by glidein id,
/// provisional deduction — written with bare loops and per-field checks so
/// it shares no code with the negotiator it cross-checks.
pub fn brute_force_match(
    jobs: &[(String, ResourceSpec)],
    eps: &[(String, ResourceSpec)],
) -> Vec<(String, String)> {
    let mut remaining: Vec<(String, ResourceSpec)> = eps.to_vec();
    remaining.sort_by(|a, b| a.0.cmp(&b.0));
    let mut matches = Vec::new();
    for (job_id, req) in jobs {
        for (glidein_id, capacity) in remaining.iter_mut() {
            let fits_here = req.cores <= capacity.cores
                && req.memory_mb <= capacity.memory_mb
                && req.disk_mb <= capacity.disk_mb
                && req.gpus <= capacity.gpus;
            if fits_here {
                capacity.cores -= req.cores;
                capacity.memory_mb -= req.memory_mb;
                capacity.disk_mb -= req.disk_mb;
                capacity.gpus -= req.gpus;
                matches.push((job_id.clone(), glidein_id.clone()));
                break;
            }
        }
    }
    matches
}

/// One randomized fuzz scenario: limits, request shapes, failure
/// probability, and workloads all drawn from the scenario index.
pub fn fuzz_scenario(scenario: u64) -> (TopologyConfig, WorkloadSpec, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + scenario);
    let nodes: u64 = rng.gen_range(1..=3);
    let cores: u64 = rng.gen_range(2..=8);
    let memory: u64 = rng.gen_range(2..=8) * 1024;
    let max_pressure: u64 = rng.gen_range(1..=10);
    let max_submit: u64 = rng.gen_range(1..=5);
    let max_per_entry: u64 = rng.gen_range(1..=12);
    let expansion = [0.125, 0.25, 0.5, 1.0, 2.0][rng.gen_range(0..5)];
    let curb: u64 = rng.gen_range(1..=6);
    let max_total: u64 = curb + rng.gen_range(0..=10);
    let failure_prob = [0.0, 0.1, 0.3][rng.gen_range(0..3)];
    let idle_timeout: f64 = rng.gen_range(5..=30) as f64;

    let node_list: Vec<serde_json::Value> = (0..nodes)
        .map(|i| {
            serde_json::json!({
                "node_id": format!("node-{i}"),
                "actual": {"cores": cores, "memory_mb": memory, "disk_mb": 1000, "gpus": 0}
            })
        })
        .collect();
    let doc = serde_json::json!({
        "mode": "sim",
        "secret_dir": "./secrets",
        "services": {
            "ce": {
                "hostname": "ce-1.glideinwms.org", "port": 19620,
                "config": {
                    "cycle_period_s": 1.0,
                    "startup_delay_s": rng.gen_range(1..=4) as f64,
                    "validation_failure_prob": failure_prob,
                    "nodes": node_list,
                    "glidein": {"max_lifetime_s": 3600.0, "idle_timeout_s": idle_timeout, "poll_period_s": 2.0}
                }
            },
            "factory": {
                "hostname": "factory-1.glideinwms.org", "port": 19619,
                "config": {
                    "cycle_period_s": 2.0,
                    "entries": [{"entry_id": "entry-ce-1", "max_pressure": max_pressure, "max_submit_per_cycle": max_submit}]
                }
            },
            "frontend": {
                "hostname": "frontend-1.glideinwms.org", "port": 19618,
                "config": {
                    "client_id": "frontend-1", "cycle_period_s": 2.0,
                    "max_pressure_per_entry": max_per_entry,
                    "total_max_glideins": max_total, "total_curb_glideins": curb,
                    "expansion_factor": expansion,
                    "pool": {"negotiation_period_s": 2.0, "ad_lifetime_s": 10.0}
                }
            }
        }
    });
    let topology = parse_topology_str(&doc.to_string()).expect("fuzz topology is valid");

    let batches = rng.gen_range(1..=3);
    let jobs = (0..batches)
        .map(|_| WorkloadItem {
            submit_time_s: rng.gen_range(0..=20) as f64,
            count: rng.gen_range(1..=15),
            requirements: ResourceSpec::new(
                rng.gen_range(1..=2),
                rng.gen_range(1..=2) * 512,
                0,
                0,
            ),
            runtime_s: rng.gen_range(3..=30) as f64,
            fail: rng.gen_bool(0.1),
        })
        .collect();
    let seed = rng.gen();
    (topology, WorkloadSpec { jobs }, seed)
}

/// Criterion 9 body: the criterion-1 topology run as three real processes
/// completes the same ten job ids with the same terminal pilot states as
/// the simulation, inside the wall budget.
pub fn procs_mode_equivalence() {
    // reference run in simulation mode
    let sim = run_simulation(&criterion1_topology(), &smoke_workload(), 42, 120.0);
    let sim_completed: BTreeSet<String> = sim
        .final_jobs
        .iter()
        .filter(|(_, s)| **s == JobState::Completed)
        .map(|(id, _)| id.clone())
        .collect();
    assert_eq!(sim_completed.len(), 10);

    // the same topology, procs mode, on ports private to this test
    let dir = tempfile::tempdir().expect("tempdir");
    let secret_dir = dir.path().join("secrets");
    let logs_dir = dir.path().join("logs");
    let text = std::fs::read_to_string(configs_dir().join("minimal_sim.json")).unwrap();
    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    doc["mode"] = "procs".into();
    doc["secret_dir"] = secret_dir.to_str().unwrap().into();
    doc["services"]["frontend"]["port"] = 21618.into();
    doc["services"]["factory"]["port"] = 21619.into();
    doc["services"]["ce"]["port"] = 21620.into();
    let topo_path = dir.path().join("topology.json");
    std::fs::write(&topo_path, doc.to_string()).unwrap();
    let topology = parse_topology(&topo_path).unwrap();

    let bin = PathBuf::from(env!("CARGO_BIN_EXE_glidemini"));
    let started = std::time::Instant::now();
    let mut handle =
        glidemini::procs::up(&topology, &topo_path, &bin, &logs_dir).expect("deployment up");
    // tear down even if an assertion below panics
    struct DownGuard(std::path::PathBuf, Vec<u32>);
    impl Drop for DownGuard {
        fn drop(&mut self) {
            let _ = glidemini::procs::down(&self.0);
            for pid in &self.1 {
                if glidemini::procs::pid_alive(*pid) {
                    let _ = std::process::Command::new("kill")
                        .args(["-9", &pid.to_string()])
                        .status();
                }
            }
        }
    }
    let guard = DownGuard(
        logs_dir.clone(),
        handle.state.services.iter().map(|s| s.pid).collect(),
    );
    let smoke = glidemini::procs::smoke_procs(&logs_dir, std::time::Duration::from_secs(120))
        .expect("smoke drove to a verdict");
    glidemini::procs::down(&logs_dir).expect("deployment down");
    drop(guard);
    handle.reap();
    let elapsed = started.elapsed();

    assert!(smoke.pass, "procs smoke failures: {:?}", smoke.failures);
    assert!(
        elapsed < std::time::Duration::from_secs(120),
        "procs run took {elapsed:?}"
    );

    let procs_completed: BTreeSet<String> = smoke.completed_job_ids.iter().cloned().collect();
    assert_eq!(procs_completed, sim_completed, "same set of completed job ids");

    let merged = glidemini::procs::merge_logs(&logs_dir).expect("logs merge");
    let (_, procs_glideins) = glidemini::audit::replay_final_states(&merged);
    assert_eq!(
        procs_glideins, sim.final_glideins,
        "terminal glidein states must match between modes"
    );

    // exactly-once holds on the process-mode trail too
    let mut executions: std::collections::BTreeMap<String, u64> = Default::default();
    for rec in audit_records(&merged) {
        if rec.subject.starts_with("job-")
            && matches!(rec.verb, AuditVerb::Completed | AuditVerb::Failed)
        {
            *executions.entry(rec.subject.to_string()).or_insert(0) += 1;
        }
    }
    for (job, n) in executions {
        assert_eq!(n, 1, "job {job} executed {n} times in procs mode");
    }
}
