//! Thin command-line front end: all behavior lives in the library.
//!
//! Exit codes: 0 on success/pass, 1 on a failed run or smoke test, 2 on
//! configuration errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use glidemini::procs::{self, Role, DEFAULT_SMOKE_TIMEOUT};
use glidemini::sim::{run_simulation, smoke_sim};
use glidemini::topology::{parse_topology, parse_workload, Mode, TopologyConfig};

#[derive(Parser)]
#[command(name = "glidemini", about = "miniature pilot-based workload management system", version)]
struct Cli {
    /// Directory for service logs, the merged event log, and run state.
    #[arg(long, global = true, default_value = "./logs")]
    logs: PathBuf,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Start the ce, factory, and frontend services as local processes.
    Up {
        #[arg(short = 'f', long = "file")]
        topology: PathBuf,
    },
    /// Stop a running deployment; logs are kept and merged.
    Down,
    /// Health and queue overview of a running deployment.
    Status,
    /// Submit a workload file to the running deployment.
    Submit {
        #[arg(short = 'f', long = "file")]
        workload: PathBuf,
    },
    /// Bring up (if needed), run the built-in smoke workload, and verify
    /// full completion and pilot retirement.
    SmokeTest {
        #[arg(short = 'f', long = "file")]
        topology: PathBuf,
        /// Simulation horizon (sim mode) or wall timeout (procs mode), seconds.
        #[arg(long, default_value_t = 120.0)]
        timeout: f64,
        /// Seed for sim-mode smoke tests.
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Run the deterministic simulation and write logs/events.log.
    Sim {
        #[arg(short = 'f', long = "file")]
        topology: PathBuf,
        #[arg(short = 'w', long = "workload")]
        workload: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Simulation horizon in seconds.
        #[arg(long, default_value_t = 120.0)]
        until: f64,
    },
    /// Internal: run one service inside an up'd deployment.
    #[command(hide = true)]
    RunService {
        #[arg(long)]
        role: String,
        #[arg(short = 'f', long = "file")]
        topology: PathBuf,
        #[arg(long)]
        resolve: PathBuf,
        #[arg(long)]
        logs: PathBuf,
    },
}

fn load_topology(path: &Path) -> Result<TopologyConfig, ExitCode> {
    match parse_topology(path) {
        Ok(mut topology) => {
            if let Ok(dir) = std::env::var("GLIDEMINI_SECRET_DIR") {
                topology.secret_dir = PathBuf::from(dir);
            }
            Ok(topology)
        }
        Err(err) => {
            eprintln!("{err}");
            Err(ExitCode::from(2))
        }
    }
}

fn locate_bin_or_self() -> PathBuf {
    procs::locate_bin().unwrap_or_else(|| {
        std::env::current_exe().expect("current executable path is known")
    })
}

fn print_report(report: &glidemini::audit::MetricsReport) {
    println!(
        "jobs: {} submitted, {} completed, {} failed; makespan {:.2}s",
        report.jobs_submitted,
        report.jobs_completed,
        report.jobs_failed,
        report.makespan_ms as f64 / 1000.0
    );
    println!(
        "glideins: {} total, terminal {:?}, auth failures {}",
        report.total_glideins, report.glideins_by_terminal_state, report.auth_failures
    );
    for (id, g) in &report.per_glidein {
        println!(
            "  {id}: busy {:.2}s idle {:.2}s startup {:.2}s jobs {}",
            g.busy_ms as f64 / 1000.0,
            g.idle_ms as f64 / 1000.0,
            g.startup_ms as f64 / 1000.0,
            g.jobs_served
        );
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Cmd::Up { topology: path } => {
            let topology = match load_topology(&path) {
                Ok(t) => t,
                Err(code) => return code,
            };
            match procs::up(&topology, &path, &locate_bin_or_self(), &cli.logs) {
                Ok(handle) => {
                    for service in &handle.state.services {
                        println!(
                            "{} up: {} (127.0.0.1:{}) pid {}",
                            service.role, service.hostname, service.port, service.pid
                        );
                    }
                    ExitCode::SUCCESS
                }
                Err(err) => {
                    eprintln!("up failed: {err}");
                    ExitCode::FAILURE
                }
            }
        }
        Cmd::Down => match procs::down(&cli.logs) {
            Ok(()) => {
                println!("all services stopped; logs merged to {}/events.log", cli.logs.display());
                ExitCode::SUCCESS
            }
            Err(err) => {
                eprintln!("down failed: {err}");
                ExitCode::FAILURE
            }
        },
        Cmd::Status => match procs::status(&cli.logs) {
            Ok(view) => {
                for (role, port, healthy) in &view.services {
                    println!("{role} (port {port}): {}", if *healthy { "up" } else { "DOWN" });
                }
                if let Some(snapshot) = &view.snapshot {
                    println!("jobs: {:?}", snapshot.job_counts);
                    println!("execution points: {}", snapshot.eps.len());
                }
                if !view.glidein_counts.is_empty() {
                    println!("glideins: {:?}", view.glidein_counts);
                }
                ExitCode::SUCCESS
            }
            Err(err) => {
                eprintln!("status failed: {err}");
                ExitCode::FAILURE
            }
        },
        Cmd::Submit { workload } => {
            let spec = match parse_workload(&workload) {
                Ok(spec) => spec,
                Err(err) => {
                    eprintln!("{err}");
                    return ExitCode::from(2);
                }
            };
            match procs::submit_workload(&cli.logs, &spec) {
                Ok(ids) => {
                    println!("submitted {} jobs: {:?}", ids.len(), ids);
                    ExitCode::SUCCESS
                }
                Err(err) => {
                    eprintln!("submit failed: {err}");
                    ExitCode::FAILURE
                }
            }
        }
        Cmd::SmokeTest { topology: path, timeout, seed } => {
            let topology = match load_topology(&path) {
                Ok(t) => t,
                Err(code) => return code,
            };
            match topology.mode {
                Mode::Sim => {
                    let smoke = smoke_sim(&topology, seed, timeout);
                    print_report(&smoke.outcome.report);
                    println!("event log hash: {}", smoke.outcome.log.hash());
                    if smoke.pass {
                        println!("smoke test: PASS");
                        ExitCode::SUCCESS
                    } else {
                        for failure in &smoke.failures {
                            eprintln!("smoke test failure: {failure}");
                        }
                        println!("smoke test: FAIL");
                        ExitCode::FAILURE
                    }
                }
                Mode::Procs => {
                    let already_up = procs::load_run_state(&cli.logs).is_ok();
                    let mut handle = None;
                    if !already_up {
                        match procs::up(&topology, &path, &locate_bin_or_self(), &cli.logs) {
                            Ok(h) => handle = Some(h),
                            Err(err) => {
                                eprintln!("up failed: {err}");
                                return ExitCode::FAILURE;
                            }
                        }
                    }
                    let timeout = std::time::Duration::from_secs_f64(
                        timeout.max(DEFAULT_SMOKE_TIMEOUT.as_secs_f64()),
                    );
                    let result = procs::smoke_procs(&cli.logs, timeout);
                    if let Some(mut h) = handle {
                        let _ = procs::down(&cli.logs);
                        h.reap();
                    }
                    match result {
                        Ok(smoke) => {
                            print_report(&smoke.report);
                            if smoke.pass {
                                println!("smoke test: PASS");
                                ExitCode::SUCCESS
                            } else {
                                for failure in &smoke.failures {
                                    eprintln!("smoke test failure: {failure}");
                                }
                                println!("smoke test: FAIL");
                                ExitCode::FAILURE
                            }
                        }
                        Err(err) => {
                            eprintln!("smoke test error: {err}");
                            ExitCode::FAILURE
                        }
                    }
                }
            }
        }
        Cmd::Sim { topology: path, workload, seed, until } => {
            let topology = match load_topology(&path) {
                Ok(t) => t,
                Err(code) => return code,
            };
            let spec = match parse_workload(&workload) {
                Ok(spec) => spec,
                Err(err) => {
                    eprintln!("{err}");
                    return ExitCode::from(2);
                }
            };
            let outcome = run_simulation(&topology, &spec, seed, until);
            if let Err(err) = std::fs::create_dir_all(&cli.logs).and_then(|_| {
                let file = std::fs::File::create(cli.logs.join("events.log"))?;
                outcome.log.write_to(file)
            }) {
                eprintln!("could not write event log: {err}");
                return ExitCode::FAILURE;
            }
            print_report(&outcome.report);
            println!("events: {} (hash {})", outcome.log.len(), outcome.log.hash());
            println!("wall time: {:.3}s", outcome.wall.as_secs_f64());
            ExitCode::SUCCESS
        }
        Cmd::RunService { role, topology: path, resolve, logs } => {
            let topology = match load_topology(&path) {
                Ok(t) => t,
                Err(code) => return code,
            };
            let Some(role) = Role::parse(&role) else {
                eprintln!("unknown role {role:?}");
                return ExitCode::from(2);
            };
            match procs::run_service(role, &topology, &resolve, &logs) {
                Ok(()) => ExitCode::SUCCESS,
                Err(err) => {
                    eprintln!("{} service failed: {err}", role.as_str());
                    ExitCode::FAILURE
                }
            }
        }
    }
}
