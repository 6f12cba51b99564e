//! `twinbed`: run, serve and replay the sand-table digital twin.

use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use twinbed_core::config::TwinConfig;
use twinbed_core::scenario::{run_experiment, Simulation};
use twinbed_core::server::{serve_live, serve_replay, LiveOptions};
use twinbed_core::telemetry::{
    latency_report, load_replay, read_archive, write_archive, RunArchive,
};

#[derive(Parser)]
#[command(name = "twinbed", version, about = "Sand-table digital twin")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the platoon experiment on the virtual clock and write an archive.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Override the configured duration, in seconds.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Run the testbed live against the wall clock and serve clients.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
        /// Virtual seconds per wall-clock second.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        /// Stop after this many virtual seconds.
        #[arg(long)]
        duration: Option<f64>,
        /// Leave the platoon service off.
        #[arg(long)]
        no_platoon: bool,
    },
    /// Stream the snapshots of an archive to clients.
    Replay {
        #[arg(long)]
        archive: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
        /// Exit after the first client has received the whole stream.
        #[arg(long)]
        once: bool,
    },
    /// Print per-stage latency statistics of an archive.
    Report {
        #[arg(long)]
        archive: PathBuf,
    },
    /// Print the default configuration as TOML.
    DefaultConfig,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<TwinConfig> {
    let mut cfg = match path {
        Some(p) => TwinConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => TwinConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.scenario.seed = seed;
    }
    Ok(cfg)
}

fn announce(listener: &TcpListener) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "listening on {}", listener.local_addr()?)?;
    out.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            duration,
        } => {
            let mut cfg = load_config(config.as_deref(), seed)?;
            if let Some(d) = duration {
                cfg.scenario.duration_s = d;
            }
            let output = run_experiment(&cfg)?;
            let abort = output.abort;
            let archive = RunArchive::from(output);
            let manifest = write_archive(&archive, &out)?;
            if let Some(m) = &archive.metrics {
                println!("{}", serde_json::to_string(m)?);
            }
            println!("archive {} digest {}", out.display(), manifest.digest());
            if let Some(a) = abort {
                eprintln!(
                    "collision at t={:.3}s: vehicle {} is {:.3} m behind vehicle {}",
                    a.time_s, a.follower, a.spacing_m, a.predecessor
                );
                return Ok(ExitCode::from(2));
            }
        }
        Command::Serve {
            config,
            seed,
            bind,
            speed,
            duration,
            no_platoon,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let mut sim = Simulation::new(&cfg)?;
            sim.set_platoon_enabled(!no_platoon);
            let listener = TcpListener::bind(&bind).with_context(|| format!("binding {bind}"))?;
            announce(&listener)?;
            let opts = LiveOptions {
                speed_factor: speed,
                step: Duration::from_millis(10),
                duration_s: duration,
                snapshot_hz: cfg.scenario.snapshot_hz,
            };
            let stats = serve_live(listener, sim, &opts, &AtomicBool::new(false))?;
            println!(
                "served {} clients, {} messages, {} snapshots, stopped at {:.3}s",
                stats.clients,
                stats.messages,
                stats.snapshots_pushed,
                stats.sim_time.as_secs_f64()
            );
        }
        Command::Replay {
            archive,
            speed,
            bind,
            once,
        } => {
            let snapshots = load_replay(&archive)?;
            let listener = TcpListener::bind(&bind).with_context(|| format!("binding {bind}"))?;
            announce(&listener)?;
            let n = serve_replay(
                listener,
                snapshots,
                speed,
                once.then_some(1),
                &AtomicBool::new(false),
            )?;
            println!("replayed to {n} clients");
        }
        Command::Report { archive } => {
            let a = read_archive(&archive)?;
            print!("{}", latency_report(&a.delays).to_table());
        }
        Command::DefaultConfig => print!("{}", TwinConfig::default().to_toml()?),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
