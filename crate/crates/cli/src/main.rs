//! `cirrus`: command-line client of the cirrus service. Unless `--server`
//! is given, each command starts an in-process server on an ephemeral
//! port and talks to it over HTTP.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cirrus_client::Client;
use cirrus_core::api::PlanRequest;
use cirrus_core::harness::{load_report, round_significant, Scenario, BUILTIN_SCENARIOS};
use clap::{Parser, Subcommand};
use serde_json::json;
use tracing_subscriber::EnvFilter;

#[derive(Debug, Parser)]
#[command(
    name = "cirrus",
    version,
    about = "Multi-cloud PaaS control plane on a simulated cloud fabric"
)]
struct Cli {
    /// Service to talk to instead of an in-process one.
    #[arg(long, global = true, value_name = "URL")]
    server: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario and write report.json, series.csv, requests.csv and
    /// events.ndjson.
    Run {
        /// Scenario file, or the name of a bundled scenario.
        scenario: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Steady-state availability MTBF / (MTBF + MTTR).
    Availability {
        /// Mean time between failures, hours.
        #[arg(long, value_name = "H")]
        mtbf: f64,
        /// Mean time to repair, hours.
        #[arg(long, value_name = "H")]
        mttr: f64,
    },
    /// Run a master-failure scenario and report recovery times.
    Recovery {
        scenario: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Relative overhead of a platform run over a baseline run.
    Overhead {
        baseline_dir: PathBuf,
        platform_dir: PathBuf,
    },
    /// Validate a composite descriptor and show its placement.
    Plan {
        descriptor: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// List the bundled scenarios.
    Scenarios,
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

fn load_scenario(arg: &str) -> Result<Scenario> {
    let path = Path::new(arg);
    if path.exists() {
        return Scenario::load(path).with_context(|| format!("loading {arg}"));
    }
    if BUILTIN_SCENARIOS.iter().any(|(n, _)| *n == arg) {
        return Ok(Scenario::builtin(arg)?);
    }
    bail!("no scenario file or bundled scenario named `{arg}`")
}

fn print(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

async fn connect(server: Option<&str>) -> Result<Client> {
    match server {
        Some(url) => Ok(Client::new(url)?),
        None => {
            let (addr, _) = cirrus_server::spawn(SocketAddr::from(([127, 0, 0, 1], 0))).await?;
            Ok(Client::new(&format!("http://{addr}"))?)
        }
    }
}

async fn execute(cli: Cli) -> Result<()> {
    if let Command::Serve { addr } = cli.command {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        cirrus_server::serve(listener, shutdown).await?;
        return Ok(());
    }
    let client = connect(cli.server.as_deref()).await?;
    match cli.command {
        Command::Run {
            scenario,
            seed,
            out,
        } => {
            let scenario = load_scenario(&scenario)?;
            let bundle = client.run(&scenario, seed).await?;
            bundle
                .write_dir(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            let r = &bundle.report;
            print(&json!({
                "scenario": r.scenario,
                "seed": r.seed,
                "out": out,
                "end_time_s": r.end_time.as_secs_f64(),
                "aggregate": r.aggregate,
                "scale_events": r.scale_events.len(),
                "failovers": r.failovers.len(),
                "recoveries": r.recoveries.len(),
            }))
        }
        Command::Availability { mtbf, mttr } => {
            let a = client.availability(mtbf, mttr).await?;
            print(&json!({
                "mtbf_hours": a.mtbf_hours,
                "mttr_hours": a.mttr_hours,
                "availability": a.availability,
                "percent": round_significant(a.availability * 100.0, 5),
            }))
        }
        Command::Recovery { scenario, seed } => {
            let scenario = load_scenario(&scenario)?;
            print(&client.recovery(&scenario, seed).await?.summary)
        }
        Command::Overhead {
            baseline_dir,
            platform_dir,
        } => {
            let read = |d: &Path| {
                load_report(d).with_context(|| format!("reading {}/report.json", d.display()))
            };
            let (baseline, platform) = (read(&baseline_dir)?, read(&platform_dir)?);
            print(&client.overhead(&baseline, &platform).await?)
        }
        Command::Plan { descriptor, seed } => {
            let text = std::fs::read_to_string(&descriptor)
                .with_context(|| format!("reading {}", descriptor.display()))?;
            print(
                &client
                    .plan(&PlanRequest {
                        descriptor: text,
                        seed,
                        providers: None,
                    })
                    .await?,
            )
        }
        Command::Scenarios => print(&client.scenarios().await?),
        Command::Serve { .. } => unreachable!("handled above"),
    }
}

#[tokio::main]
async fn main() {
    let cli = Cli::parse();
    let level = if matches!(cli.command, Command::Serve { .. }) {
        "info"
    } else {
        "warn"
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level)),
        )
        .with_writer(std::io::stderr)
        .init();
    if let Err(e) = execute(cli).await {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
