//! Full process mode: bring the ce, factory, and frontend up as separate
//! local processes, run the smoke workload over real sockets, and tear
//! everything down.
//!
//! Build the binary first so the launcher can find it:
//!
//! ```bash
//! cargo build -p glidemini
//! cargo run --example procs_up_smoke
//! ```

use std::path::Path;
use std::time::Duration;

use glidemini::procs::{down, locate_bin, smoke_procs, up};
use glidemini::topology::parse_topology;

fn main() {
    let Some(bin) = locate_bin() else {
        eprintln!("glidemini binary not found; run `cargo build -p glidemini` first");
        std::process::exit(2);
    };

    // private working directory so repeated runs never collide
    let dir = tempfile::tempdir().expect("tempdir");
    let logs_dir = dir.path().join("logs");
    let secret_dir = dir.path().join("secrets");

    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/configs/minimal_procs.json");
    let mut doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&shipped).unwrap()).unwrap();
    doc["secret_dir"] = secret_dir.to_str().unwrap().into();
    let topo_path = dir.path().join("topology.json");
    std::fs::write(&topo_path, doc.to_string()).unwrap();
    let topology = parse_topology(&topo_path).unwrap();

    println!("bringing up ce, factory, frontend ...");
    let mut handle = up(&topology, &topo_path, &bin, &logs_dir).expect("up");
    for service in &handle.state.services {
        println!("  {} on 127.0.0.1:{} (pid {})", service.role, service.port, service.pid);
    }

    println!("running the smoke workload (this takes about a minute) ...");
    let smoke = smoke_procs(&logs_dir, Duration::from_secs(120)).expect("smoke ran");
    println!(
        "jobs completed: {:?}; glideins: {:?}",
        smoke.completed_job_ids, smoke.report.glideins_by_terminal_state
    );

    down(&logs_dir).expect("down");
    handle.reap();
    println!("all services stopped");
    if smoke.pass {
        println!("smoke test: PASS");
    } else {
        for failure in &smoke.failures {
            eprintln!("failure: {failure}");
        }
        std::process::exit(1);
    }
}
