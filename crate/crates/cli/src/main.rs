//! `tracesim` command-line front end.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use tracesim::engine::{Engine, RunOutcome, SimConfig};
use tracesim::harness::{
    ControlClient, ControlCommand, GreedyScheduler, Harness, HarnessConfig, ProtocolMessage,
    SchedulerClient,
};
use tracesim::pipeline::{BufferCaps, PipelineConfig};
use tracesim::toolkit::{compile_trace, generate_trace, EventLog, SyntheticSpec};
use tracesim::SimTime;

#[derive(Parser)]
#[command(name = "tracesim", version, about = "Trace-driven cluster workload simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a trace directory.
    Run {
        #[arg(long)]
        trace: PathBuf,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Replay a compiled event log.
    Replay {
        #[arg(long)]
        log: PathBuf,
        /// Refuse logs compiled from a different trace directory.
        #[arg(long)]
        expect_trace: Option<PathBuf>,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Write a synthetic trace in the GCD layout.
    Gen {
        #[arg(long, default_value_t = 500)]
        nodes: usize,
        #[arg(long, default_value_t = 5500)]
        tasks: usize,
        #[arg(long, default_value_t = 21_600_000_000)]
        duration_micros: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Corrupt lines to inject, as a fraction of clean records.
        #[arg(long, default_value_t = 0.0)]
        anomaly_rate: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse a trace once into an event log.
    Compile {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        workers: usize,
    },
    /// Connect a greedy scheduler to a running simulation.
    Sched {
        #[arg(long)]
        endpoint: String,
        #[arg(long, default_value = "remote-greedy")]
        id: String,
    },
    /// Control a running simulation.
    Ctl {
        #[arg(long)]
        endpoint: String,
        #[command(subcommand)]
        op: CtlOp,
    },
}

#[derive(Subcommand)]
enum CtlOp {
    Pause,
    Resume,
    Speed { factor: f64 },
    Snapshot { path: PathBuf },
    Stats,
}

#[derive(Args)]
struct SimArgs {
    /// Simulated seconds per wall second; 0 runs as fast as possible.
    #[arg(long, default_value_t = 1.0)]
    speed: f64,
    #[arg(long, default_value_t = 5_000_000)]
    tick_micros: u64,
    #[arg(long, default_value_t = 600_000_000)]
    offset_micros: u64,
    /// Absolute simulated time to stop at.
    #[arg(long)]
    end_micros: Option<u64>,
    #[arg(long, default_value_t = 1_000_000)]
    buffer_max_events: usize,
    #[arg(long, default_value_t = 1_800_000_000)]
    buffer_lookahead_micros: u64,
    #[arg(long, default_value_t = 6)]
    workers: usize,
    /// Listen for schedulers and control clients, e.g. 127.0.0.1:7070.
    #[arg(long)]
    listen: Option<String>,
    /// Remote schedulers to wait for before starting.
    #[arg(long, default_value_t = 0)]
    wait_schedulers: usize,
    /// In-process greedy schedulers to run.
    #[arg(long, default_value_t = 1)]
    greedy: usize,
    /// Id of the scheduler whose placements are applied; defaults to the
    /// first one registered.
    #[arg(long)]
    authoritative: Option<String>,
    #[arg(long, default_value_t = 12)]
    stats_period_ticks: u64,
    #[arg(long)]
    stats_out: Option<PathBuf>,
    #[arg(long)]
    snapshot_out: Option<PathBuf>,
}

impl SimArgs {
    fn config(&self, trace_root: PathBuf) -> SimConfig {
        SimConfig {
            trace_root,
            start_offset_micros: self.offset_micros,
            tick_micros: self.tick_micros,
            speed_factor: self.speed,
            pipeline: PipelineConfig {
                caps: BufferCaps {
                    lookahead_micros: self.buffer_lookahead_micros,
                    max_events: self.buffer_max_events,
                },
                workers: self.workers,
                ..Default::default()
            },
            end_time: self.end_micros.map(SimTime),
            listen_endpoint: self.listen.clone(),
            stats_period_ticks: self.stats_period_ticks,
            wait_schedulers: self.wait_schedulers,
            stats_out: self.stats_out.clone(),
            snapshot_out: self.snapshot_out.clone(),
            ..Default::default()
        }
    }

    fn harness(&self) -> Harness {
        let mut h = Harness::new(HarnessConfig {
            authoritative: self.authoritative.clone(),
            ..Default::default()
        });
        for i in 0..self.greedy {
            let id = if i == 0 { "greedy".to_owned() } else { format!("greedy-{i}") };
            h.add_scheduler(Box::new(GreedyScheduler::new(id)));
        }
        h
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { trace, sim } => {
            let engine = Engine::new(sim.config(trace), sim.harness()).context("cannot start simulation")?;
            print_addr(&engine);
            report(engine.run()?);
        }
        Command::Replay { log, expect_trace, sim } => {
            let expected = match expect_trace {
                Some(root) => Some(tracesim::parser::trace_digest(&root)?),
                None => None,
            };
            let log = EventLog::open(&log, expected).with_context(|| format!("cannot open {}", log.display()))?;
            info!("log holds {} events from trace {}", log.summary().events, log.summary().source_digest);
            let sources: Vec<Box<dyn tracesim::pipeline::EventSource>> = vec![Box::new(log.source()?)];
            let config = sim.config(log.path().to_owned());
            let engine = Engine::with_sources(config, sources, log.summary().source_digest, sim.harness())?;
            print_addr(&engine);
            report(engine.run()?);
        }
        Command::Gen {
            nodes,
            tasks,
            duration_micros,
            seed,
            anomaly_rate,
            out,
        } => {
            let spec = SyntheticSpec {
                nodes,
                tasks,
                duration_micros,
                seed,
                anomaly_rate,
                ..Default::default()
            };
            let m = generate_trace(&spec, &out)?;
            println!(
                "wrote {} files, {} clean records, {} injected, {} task runs to {}",
                m.files.len(),
                m.clean_records(),
                m.injected_total(),
                m.task_runs,
                out.display()
            );
        }
        Command::Compile { trace, out, workers } => {
            let config = PipelineConfig {
                workers,
                ..Default::default()
            };
            let s = compile_trace(&trace, &out, config)?;
            println!(
                "compiled {} events, {} parse anomalies, log digest {}",
                s.events,
                s.parse_anomalies.total(),
                s.log_digest
            );
        }
        Command::Sched { endpoint, id } => {
            let mut client = SchedulerClient::connect(endpoint.as_str(), id)?;
            let s = client.run_greedy()?;
            println!(
                "ticks {} decisions {} placed {} refused {}{}",
                s.ticks,
                s.decisions_sent,
                s.placed,
                s.refused,
                s.bye_reason.map(|r| format!(" ({r})")).unwrap_or_default()
            );
        }
        Command::Ctl { endpoint, op } => {
            let command = match op {
                CtlOp::Pause => ControlCommand::Pause,
                CtlOp::Resume => ControlCommand::Resume,
                CtlOp::Speed { factor } => ControlCommand::Speed { factor },
                CtlOp::Snapshot { path } => ControlCommand::Snapshot {
                    path: path.to_string_lossy().into_owned(),
                },
                CtlOp::Stats => ControlCommand::Stats,
            };
            let mut client = ControlClient::connect(endpoint.as_str())?;
            let reply = client.send(command)?;
            println!("{}", String::from_utf8_lossy(&reply.encode()).trim_end());
            if let ProtocolMessage::ControlReply { ok: false, detail, .. } = reply {
                bail!("command refused: {}", detail.unwrap_or_default());
            }
        }
    }
    Ok(())
}

fn print_addr(engine: &Engine) {
    if let Some(addr) = engine.local_addr() {
        println!("listening on {addr}");
    }
}

fn report(outcome: RunOutcome) {
    let s = outcome.final_stats;
    println!("ticks {} sim_time {} epoch {}", outcome.ticks, s.sim_time, s.epoch);
    println!(
        "nodes {} pending {} running {} applied {} rejected {}",
        s.nodes_online, s.tasks_pending, s.tasks_running, s.events_applied, s.events_rejected
    );
    let anomalies = outcome.anomalies();
    println!("anomalies {}", anomalies.total());
    for (class, n) in anomalies.counts() {
        println!("  {class} {n}");
    }
    for slot in &outcome.harness.schedulers {
        println!(
            "scheduler {}{} decisions {} placed {} refused {} missed {}",
            slot.scheduler_id,
            if slot.authoritative { " (authoritative)" } else { "" },
            slot.decisions,
            slot.placed,
            slot.refused,
            slot.missed
        );
    }
    println!("snapshot {}", outcome.snapshot_digest);
}
