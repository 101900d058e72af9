//! The tick loop.
//!
//! Every tick advances simulated time by `tick_micros`, drains the events up
//! to the new time from the pipeline, applies them to the state, runs the
//! scheduler decision phase and publishes the resulting view. With a positive
//! speed factor the loop sleeps until an absolute wall-clock deadline, so
//! pacing error does not accumulate; with speed factor 0 it runs flat out.
//! Throttling never changes results.
//!
//! Control commands (pause, resume, speed, snapshot, stats) come in through
//! an [`EngineHandle`] from any thread and take effect at tick boundaries.

use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::Digest;
use crate::harness::{ControlCommand, ControlTarget, Harness, HarnessStats, ProtocolMessage, Server};
use crate::model::SimTime;
use crate::parser::{trace_digest, AnomalyReport};
use crate::pipeline::{BufferStats, EventSource, Pipeline, PipelineConfig, PipelineError};
use crate::state::{ContextData, Snapshot, SnapshotError, StateStore, StatsSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub trace_root: PathBuf,
    pub start_offset_micros: u64,
    pub tick_micros: u64,
    /// Simulated seconds per wall second; 0 runs unthrottled.
    pub speed_factor: f64,
    pub pipeline: PipelineConfig,
    /// Absolute simulated time at which the run stops.
    pub end_time: Option<SimTime>,
    pub listen_endpoint: Option<String>,
    pub stats_period_ticks: u64,
    /// Per-tick wait for remote decisions. Defaults to one tick of wall time,
    /// or one second when unthrottled.
    pub decision_timeout: Option<Duration>,
    /// Remote schedulers to wait for before the first tick.
    pub wait_schedulers: usize,
    pub wait_timeout: Duration,
    pub stats_out: Option<PathBuf>,
    pub snapshot_out: Option<PathBuf>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            trace_root: PathBuf::new(),
            start_offset_micros: 600_000_000,
            tick_micros: 5_000_000,
            speed_factor: 1.0,
            pipeline: PipelineConfig::default(),
            end_time: None,
            listen_endpoint: None,
            stats_period_ticks: 12,
            decision_timeout: None,
            wait_schedulers: 0,
            wait_timeout: Duration::from_secs(60),
            stats_out: None,
            snapshot_out: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.tick_micros == 0 {
            return Err(EngineError::InvalidConfig("tick_micros must be positive".into()));
        }
        if !valid_speed(self.speed_factor) {
            return Err(EngineError::InvalidSpeed(self.speed_factor));
        }
        if self.stats_period_ticks == 0 {
            return Err(EngineError::InvalidConfig("stats_period_ticks must be positive".into()));
        }
        self.pipeline.validate()?;
        Ok(())
    }

    /// Digest of the settings that determine simulation results. Worker
    /// counts, pacing and buffer caps are excluded: they never change
    /// results.
    pub fn digest(&self) -> Digest {
        #[derive(Serialize)]
        struct Relevant {
            start_offset_micros: u64,
            tick_micros: u64,
            end_time: Option<SimTime>,
        }
        let r = Relevant {
            start_offset_micros: self.start_offset_micros,
            tick_micros: self.tick_micros,
            end_time: self.end_time,
        };
        Digest::of(&serde_json::to_vec(&r).expect("plain struct serializes"))
    }
}

fn valid_speed(f: f64) -> bool {
    f.is_finite() && f >= 0.0
}

/// Wall-clock time budget for `sim_micros` of simulated time at `speed`.
/// `None` when unthrottled.
pub fn wall_budget(sim_micros: u64, speed: f64) -> Option<Duration> {
    if speed > 0.0 {
        Some(Duration::from_secs_f64(sim_micros as f64 / 1e6 / speed))
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "reason", rename_all = "snake_case")]
pub enum EngineState {
    Loading,
    Running,
    Paused,
    Finished,
    Failed(String),
}

impl fmt::Display for EngineState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EngineState::Loading => f.write_str("loading"),
            EngineState::Running => f.write_str("running"),
            EngineState::Paused => f.write_str("paused"),
            EngineState::Finished => f.write_str("finished"),
            EngineState::Failed(r) => write!(f, "failed: {r}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("cannot {command} while {from}")]
    InvalidTransition { from: EngineState, command: &'static str },
    #[error("invalid speed factor {0}")]
    InvalidSpeed(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// Receives one stats sample per stats period.
pub trait StatsSink: Send {
    fn record(&mut self, sample: &StatsSample) -> io::Result<()>;
    fn finish(&mut self) -> io::Result<()> {
        Ok(())
    }
}

pub const STATS_CSV_HEADER: &str = "sim_time,nodes_online,tasks_pending,tasks_running,events_applied,anomalies_total,displaced_total,mean_cpu_requested,mean_cpu_used";

/// Writes stats samples as CSV rows.
pub struct CsvStatsWriter<W: Write> {
    out: W,
    header_written: bool,
}

impl<W: Write> CsvStatsWriter<W> {
    pub fn new(out: W) -> Self {
        CsvStatsWriter {
            out,
            header_written: false,
        }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl CsvStatsWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> io::Result<Self> {
        Ok(Self::new(BufWriter::new(File::create(path)?)))
    }
}

impl<W: Write + Send> StatsSink for CsvStatsWriter<W> {
    fn record(&mut self, s: &StatsSample) -> io::Result<()> {
        if !self.header_written {
            writeln!(self.out, "{STATS_CSV_HEADER}")?;
            self.header_written = true;
        }
        writeln!(
            self.out,
            "{},{},{},{},{},{},{},{:.6},{:.6}",
            s.sim_time.0,
            s.nodes_online,
            s.tasks_pending,
            s.tasks_running,
            s.events_applied,
            s.anomalies_total,
            s.displaced_total,
            s.mean_cpu_requested,
            s.mean_cpu_used
        )
    }

    fn finish(&mut self) -> io::Result<()> {
        self.out.flush()
    }
}

struct Control {
    state: EngineState,
    pause_requested: bool,
    stop_requested: bool,
    speed_factor: f64,
    speed_changed: bool,
}

struct Shared {
    control: Mutex<Control>,
    cv: Condvar,
    store: StateStore,
    parse_anomalies: AtomicU64,
    config_digest: Digest,
    trace_digest: Digest,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, Control> {
        self.control.lock().expect("engine control poisoned")
    }

    fn set_state(&self, state: EngineState) {
        self.lock().state = state;
        self.cv.notify_all();
    }
}

/// Thread-safe control surface of a running engine.
#[derive(Clone)]
pub struct EngineHandle {
    shared: Arc<Shared>,
}

impl EngineHandle {
    pub fn state(&self) -> EngineState {
        self.shared.lock().state.clone()
    }

    /// Requests a pause and waits until the in-flight tick has completed.
    pub fn pause(&self) -> Result<EngineState, EngineError> {
        let mut g = self.shared.lock();
        if g.state != EngineState::Running {
            return Err(EngineError::InvalidTransition {
                from: g.state.clone(),
                command: "pause",
            });
        }
        g.pause_requested = true;
        self.shared.cv.notify_all();
        while g.state == EngineState::Running && g.pause_requested {
            g = self.shared.cv.wait(g).expect("engine control poisoned");
        }
        Ok(g.state.clone())
    }

    pub fn resume(&self) -> Result<EngineState, EngineError> {
        let mut g = self.shared.lock();
        if g.state != EngineState::Paused {
            return Err(EngineError::InvalidTransition {
                from: g.state.clone(),
                command: "resume",
            });
        }
        g.pause_requested = false;
        g.state = EngineState::Running;
        self.shared.cv.notify_all();
        Ok(EngineState::Running)
    }

    /// Applies from the next tick on. Returns the factor in effect.
    pub fn set_speed_factor(&self, factor: f64) -> Result<f64, EngineError> {
        if !valid_speed(factor) {
            return Err(EngineError::InvalidSpeed(factor));
        }
        let mut g = self.shared.lock();
        g.speed_factor = factor;
        g.speed_changed = true;
        self.shared.cv.notify_all();
        Ok(factor)
    }

    pub fn speed_factor(&self) -> f64 {
        self.shared.lock().speed_factor
    }

    /// Ends the run at the next tick boundary, also from the paused state.
    pub fn stop(&self) {
        let mut g = self.shared.lock();
        g.stop_requested = true;
        self.shared.cv.notify_all();
    }

    /// Snapshot of the current state; only while paused or finished.
    pub fn snapshot(&self) -> Result<Snapshot, EngineError> {
        let state = self.state();
        if !matches!(state, EngineState::Paused | EngineState::Finished) {
            return Err(SnapshotError::SnapshotWhileRunning(state.to_string()).into());
        }
        let ctx = (*self.shared.store.load()).clone();
        Ok(Snapshot::new(ctx, self.shared.config_digest, self.shared.trace_digest))
    }

    /// Takes a snapshot and writes it to `path`, returning its digest.
    pub fn snapshot_to(&self, path: &Path) -> Result<Digest, EngineError> {
        Ok(self.snapshot()?.write_to(path)?)
    }

    /// Current counters; parse anomalies are included in `anomalies_total`.
    pub fn stats(&self) -> StatsSample {
        let mut s = self.shared.store.load().counters_sample();
        s.anomalies_total += self.shared.parse_anomalies.load(Ordering::SeqCst);
        s
    }

    /// The latest published state view.
    pub fn view(&self) -> Arc<ContextData> {
        self.shared.store.load()
    }

    /// Blocks until the engine reaches `Finished` or `Failed`.
    pub fn wait_done(&self) -> EngineState {
        let mut g = self.shared.lock();
        while !matches!(g.state, EngineState::Finished | EngineState::Failed(_)) {
            g = self.shared.cv.wait(g).expect("engine control poisoned");
        }
        g.state.clone()
    }

    /// Blocks until the engine leaves `Loading`.
    pub fn wait_started(&self) -> EngineState {
        let mut g = self.shared.lock();
        while g.state == EngineState::Loading {
            g = self.shared.cv.wait(g).expect("engine control poisoned");
        }
        g.state.clone()
    }
}

impl ControlTarget for EngineHandle {
    fn handle(&self, command: &ControlCommand) -> ProtocolMessage {
        let reply = |r: Result<String, EngineError>| {
            let state = self.state().to_string();
            match r {
                Ok(detail) => ProtocolMessage::ControlReply {
                    ok: true,
                    state,
                    detail: (!detail.is_empty()).then_some(detail),
                },
                Err(e) => ProtocolMessage::ControlReply {
                    ok: false,
                    state,
                    detail: Some(e.to_string()),
                },
            }
        };
        match command {
            ControlCommand::Pause => reply(self.pause().map(|_| String::new())),
            ControlCommand::Resume => reply(self.resume().map(|_| String::new())),
            ControlCommand::Speed { factor } => {
                reply(self.set_speed_factor(*factor).map(|f| format!("speed factor {f}")))
            }
            ControlCommand::Snapshot { path } => reply(
                self.snapshot_to(Path::new(path))
                    .map(|d| format!("snapshot {d} written to {path}")),
            ),
            ControlCommand::Stats => ProtocolMessage::Stats { sample: self.stats() },
        }
    }
}

/// Result of a completed run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: EngineState,
    /// Ticks after the bootstrap batch.
    pub ticks: u64,
    pub final_stats: StatsSample,
    pub snapshot: Snapshot,
    pub snapshot_digest: Digest,
    pub snapshot_path: Option<PathBuf>,
    pub parse_anomalies: AnomalyReport,
    pub harness: HarnessStats,
    pub buffers: Vec<(String, BufferStats)>,
}

impl RunOutcome {
    /// Parse and state anomalies combined.
    pub fn anomalies(&self) -> AnomalyReport {
        let mut all = self.parse_anomalies.clone();
        all.merge(self.snapshot.context.anomalies());
        all
    }
}

pub struct Engine {
    config: SimConfig,
    pipeline: Pipeline,
    harness: Harness,
    shared: Arc<Shared>,
    server: Option<Server>,
    sink: Option<Box<dyn StatsSink>>,
}

impl Engine {
    /// Opens the trace under `config.trace_root`.
    pub fn new(config: SimConfig, harness: Harness) -> Result<Self, EngineError> {
        config.validate()?;
        let digest = trace_digest(&config.trace_root)?;
        let pipeline = Pipeline::from_trace_root(
            &config.trace_root,
            config.pipeline,
            SimTime(config.start_offset_micros),
        )?;
        Self::assemble(config, pipeline, digest, harness)
    }

    /// Runs over arbitrary event sources, e.g. a compiled event log.
    pub fn with_sources(
        config: SimConfig,
        sources: Vec<Box<dyn EventSource>>,
        trace_digest: Digest,
        harness: Harness,
    ) -> Result<Self, EngineError> {
        config.validate()?;
        let pipeline = Pipeline::start(sources, config.pipeline, SimTime(config.start_offset_micros))?;
        Self::assemble(config, pipeline, trace_digest, harness)
    }

    fn assemble(
        config: SimConfig,
        pipeline: Pipeline,
        trace_digest: Digest,
        mut harness: Harness,
    ) -> Result<Self, EngineError> {
        let shared = Arc::new(Shared {
            control: Mutex::new(Control {
                state: EngineState::Loading,
                pause_requested: false,
                stop_requested: false,
                speed_factor: config.speed_factor,
                speed_changed: false,
            }),
            cv: Condvar::new(),
            store: StateStore::default(),
            parse_anomalies: AtomicU64::new(0),
            config_digest: config.digest(),
            trace_digest,
        });
        let server = match &config.listen_endpoint {
            Some(ep) => {
                let handle: Arc<dyn ControlTarget> = Arc::new(EngineHandle { shared: shared.clone() });
                let (server, registrations) = Server::bind(ep.as_str(), Some(handle))?;
                harness.attach(registrations);
                Some(server)
            }
            None => None,
        };
        let sink: Option<Box<dyn StatsSink>> = match &config.stats_out {
            Some(p) => Some(Box::new(CsvStatsWriter::create(p)?)),
            None => None,
        };
        Ok(Engine {
            config,
            pipeline,
            harness,
            shared,
            server,
            sink,
        })
    }

    pub fn handle(&self) -> EngineHandle {
        EngineHandle {
            shared: self.shared.clone(),
        }
    }

    /// Address of the scheduler/control listener, if one was configured.
    pub fn local_addr(&self) -> Option<SocketAddr> {
        self.server.as_ref().map(Server::local_addr)
    }

    /// Replaces the stats sink configured by `stats_out`.
    pub fn set_stats_sink(&mut self, sink: Box<dyn StatsSink>) {
        self.sink = Some(sink);
    }

    fn decision_timeout(&self, speed: f64) -> Duration {
        self.config
            .decision_timeout
            .or_else(|| wall_budget(self.config.tick_micros, speed))
            .unwrap_or(Duration::from_secs(1))
    }

    fn sample(&self, ctx: &ContextData) -> StatsSample {
        let parse = self.pipeline.parse_anomalies().total();
        self.shared.parse_anomalies.store(parse, Ordering::SeqCst);
        let mut s = ctx.counters_sample();
        s.anomalies_total += parse;
        s
    }

    fn emit(&mut self, sample: &StatsSample) {
        if let Some(sink) = &mut self.sink {
            if let Err(e) = sink.record(sample) {
                warn!("stats sink failed, disabling it: {e}");
                self.sink = None;
            }
        }
    }

    /// Runs to the end time or trace exhaustion.
    pub fn run(mut self) -> Result<RunOutcome, EngineError> {
        match self.run_inner() {
            Ok(outcome) => Ok(outcome),
            Err(e) => {
                self.shared.set_state(EngineState::Failed(e.to_string()));
                self.harness.shutdown("simulation failed");
                Err(e)
            }
        }
    }

    fn run_inner(&mut self) -> Result<RunOutcome, EngineError> {
        let tick = self.config.tick_micros;
        if self.config.wait_schedulers > 0 {
            let n = self
                .harness
                .wait_for_remotes(self.config.wait_schedulers, self.config.wait_timeout);
            info!("{n} of {} remote schedulers connected", self.config.wait_schedulers);
        }

        let mut ctx = ContextData::new();
        let mut sim = SimTime(self.config.start_offset_micros);
        let boot = self.pipeline.drain_until(sim)?;
        debug!("bootstrap {boot}");
        ctx.apply_batch(&boot);
        let mut speed = self.shared.lock().speed_factor;
        self.harness.set_decision_timeout(self.decision_timeout(speed));
        self.harness.tick(ctx.epoch(), &boot, &mut ctx);
        self.shared.store.publish(ctx.clone());
        let mut exhausted = boot.exhausted;
        drop(boot);

        self.shared.set_state(EngineState::Running);
        info!("running from {sim} with tick {tick} us at speed {speed}");
        let mut wall_anchor = Instant::now();
        let mut sim_anchor = sim;
        let mut ticks = 0u64;
        let mut since_sample = 0u64;

        loop {
            // tick boundary: control commands take effect here
            {
                let mut g = self.shared.lock();
                if g.pause_requested && !g.stop_requested {
                    g.state = EngineState::Paused;
                    self.shared.cv.notify_all();
                    info!("paused at {sim}");
                    while g.state == EngineState::Paused && !g.stop_requested {
                        g = self.shared.cv.wait(g).expect("engine control poisoned");
                    }
                    wall_anchor = Instant::now();
                    sim_anchor = sim;
                }
                if g.stop_requested {
                    break;
                }
                if g.speed_changed {
                    g.speed_changed = false;
                    speed = g.speed_factor;
                    wall_anchor = Instant::now();
                    sim_anchor = sim;
                    drop(g);
                    self.harness.set_decision_timeout(self.decision_timeout(speed));
                }
            }
            if exhausted || self.config.end_time.is_some_and(|end| sim >= end) {
                break;
            }

            sim = sim.saturating_add(tick);
            let batch = self.pipeline.drain_until(sim)?;
            ctx.apply_batch(&batch);
            self.harness.tick(ctx.epoch(), &batch, &mut ctx);
            self.shared.store.publish(ctx.clone());
            exhausted = batch.exhausted;
            ticks += 1;
            since_sample += 1;
            if since_sample == self.config.stats_period_ticks {
                since_sample = 0;
                let s = self.sample(&ctx);
                self.emit(&s);
            }

            if let Some(budget) = wall_budget(sim.0 - sim_anchor.0, speed) {
                let deadline = wall_anchor + budget;
                let mut g = self.shared.lock();
                loop {
                    if g.pause_requested || g.stop_requested || g.speed_changed {
                        break;
                    }
                    let now = Instant::now();
                    if now >= deadline {
                        break;
                    }
                    g = self
                        .shared
                        .cv
                        .wait_timeout(g, deadline - now)
                        .expect("engine control poisoned")
                        .0;
                }
            }
        }

        let final_stats = self.sample(&ctx);
        if since_sample != 0 || ticks == 0 {
            self.emit(&final_stats);
        }
        if let Some(sink) = &mut self.sink {
            sink.finish()?;
        }
        let snapshot = Snapshot::new(ctx, self.shared.config_digest, self.shared.trace_digest);
        let snapshot_digest = match &self.config.snapshot_out {
            Some(p) => snapshot.write_to(p)?,
            None => snapshot.digest(),
        };
        self.harness.shutdown("simulation finished");
        self.shared.set_state(EngineState::Finished);
        info!("finished after {ticks} ticks at {sim}, digest {snapshot_digest}");
        Ok(RunOutcome {
            state: EngineState::Finished,
            ticks,
            final_stats,
            snapshot,
            snapshot_digest,
            snapshot_path: self.config.snapshot_out.clone(),
            parse_anomalies: self.pipeline.parse_anomalies(),
            harness: self.harness.stats(),
            buffers: self.pipeline.buffer_stats(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pacing_budget_at_75x() {
        assert_eq!(wall_budget(3_600_000_000, 75.0), Some(Duration::from_secs(48)));
        assert_eq!(wall_budget(5_000_000, 5.0), Some(Duration::from_secs(1)));
        assert_eq!(wall_budget(5_000_000, 0.0), None);
    }

    #[test]
    fn config_validation() {
        let mut c = SimConfig::default();
        assert!(c.validate().is_ok());
        c.speed_factor = -1.0;
        assert!(matches!(c.validate(), Err(EngineError::InvalidSpeed(_))));
        c.speed_factor = f64::NAN;
        assert!(c.validate().is_err());
        c.speed_factor = 0.0;
        c.tick_micros = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_digest_ignores_pacing_and_workers() {
        let a = SimConfig::default();
        let mut b = a.clone();
        b.speed_factor = 0.0;
        b.pipeline.workers = 1;
        assert_eq!(a.digest(), b.digest());
        b.tick_micros = 1_000_000;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn csv_header_and_row() {
        let mut w = CsvStatsWriter::new(Vec::new());
        w.record(&StatsSample {
            sim_time: SimTime(5),
            nodes_online: 2,
            ..Default::default()
        })
        .unwrap();
        let text = String::from_utf8(w.into_inner()).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(STATS_CSV_HEADER));
        assert_eq!(lines.next(), Some("5,2,0,0,0,0,0,0.000000,0.000000"));
    }
}
