//! The negotiator up close: FIFO by submission, first fit by pilot id,
//! provisional deduction so one cycle can pack several jobs onto one
//! partitionable slot.
//!
//! ```bash
//! cargo run --example matchmaking
//! ```

use glidemini::model::{Job, JobState, ResourceSpec};
use glidemini::pool::PoolState;

fn job(id: &str, submit: u64, cores: u64) -> Job {
    Job {
        job_id: id.to_string(),
        owner: "user".to_string(),
        submit_time: submit,
        requirements: ResourceSpec::new(cores, 1024, 0, 0),
        declared_runtime_ms: 10_000,
        fail: false,
        state: JobState::Idle,
        execution_record: None,
    }
}

fn main() {
    let mut pool = PoolState::new("frontend-1.glideinwms.org", 2_000, 10_000);

    // two execution points: a small one with 2 free cores, a bigger one
    // with 4; a 4-core job and a 1-core job arrive in that order
    pool.register_ep("glidein-000001", ResourceSpec::new(2, 8192, 1000, 0), 0);
    pool.register_ep("glidein-000002", ResourceSpec::new(4, 8192, 1000, 0), 0);
    pool.jobs.insert("job-000001".into(), job("job-000001", 0, 4));
    pool.jobs.insert("job-000002".into(), job("job-000002", 1, 1));

    println!("jobs: job-000001 wants 4 cores, job-000002 wants 1 core");
    println!("eps:  glidein-000001 has 2 cores free, glidein-000002 has 4");
    for (job_id, glidein_id, _) in pool.negotiate(2_000) {
        println!("match: {job_id} -> {glidein_id}");
    }

    // packing: eight 1-core jobs all fit one 8-core partitionable slot
    let mut pool = PoolState::new("frontend-1.glideinwms.org", 2_000, 10_000);
    pool.register_ep("glidein-000001", ResourceSpec::new(8, 8192, 1000, 0), 0);
    for i in 1..=8 {
        let id = format!("job-{i:06}");
        pool.jobs.insert(id.clone(), job(&id, i, 1));
    }
    let matches = pool.negotiate(2_000);
    println!(
        "packing: {} one-core jobs matched onto glidein-000001 in one cycle, {} cores left",
        matches.len(),
        pool.ep_ads["glidein-000001"].remaining.cores
    );
}
