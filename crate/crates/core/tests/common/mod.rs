#![allow(dead_code)]

use std::path::Path;

use tracesim::engine::{Engine, RunOutcome, SimConfig};
use tracesim::harness::{GreedyScheduler, Harness, HarnessConfig};
use tracesim::pipeline::EventSource;
use tracesim::toolkit::{generate_trace, EventLog, SyntheticSpec, TraceManifest};

pub const SECOND: u64 = 1_000_000;
pub const HOUR: u64 = 3600 * SECOND;

/// A small trace that still exercises every table.
pub fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        nodes: 20,
        tasks: 200,
        duration_micros: 2 * HOUR,
        seed,
        records_per_part: 2_000,
        ..Default::default()
    }
}

pub fn generate(spec: &SyntheticSpec, dir: &Path) -> TraceManifest {
    generate_trace(spec, dir).expect("trace generation")
}

/// Unthrottled config over `root`.
pub fn fast_config(root: &Path) -> SimConfig {
    SimConfig {
        trace_root: root.to_owned(),
        speed_factor: 0.0,
        ..Default::default()
    }
}

pub fn greedy_harness(shadows: usize) -> Harness {
    let mut h = Harness::new(HarnessConfig::default());
    h.add_scheduler(Box::new(GreedyScheduler::new("greedy")));
    for i in 0..shadows {
        h.add_scheduler(Box::new(GreedyScheduler::new(format!("shadow-{i}"))));
    }
    h
}

pub fn run_direct(config: SimConfig, harness: Harness) -> RunOutcome {
    Engine::new(config, harness).expect("engine").run().expect("run")
}

pub fn run_log(config: SimConfig, log: &EventLog, harness: Harness) -> RunOutcome {
    let sources: Vec<Box<dyn EventSource>> = vec![Box::new(log.source().expect("log source"))];
    Engine::with_sources(config, sources, log.summary().source_digest, harness)
        .expect("engine")
        .run()
        .expect("run")
}

pub mod fuzz {
    use rand::Rng;
    use tracesim::model::{
        ConstraintDelta, ConstraintOp, EventPayload, MachineId, NodeCapacity, NodeRecord,
        RemovalCause, RequestedResources, SimTime, TaskConstraint, TaskId, TaskState, UsageSample,
        WorkloadEvent,
    };
    use tracesim::state::ContextData;

    #[derive(Debug, Clone)]
    pub enum Op {
        Event(WorkloadEvent),
        Place(TaskId, MachineId),
    }

    fn task(rng: &mut impl Rng) -> TaskId {
        TaskId::new(rng.gen_range(1..=3), 0)
    }

    fn machine(rng: &mut impl Rng) -> MachineId {
        MachineId(rng.gen_range(1..=3))
    }

    /// A random operation over at most three tasks and three nodes.
    pub fn random_op(rng: &mut impl Rng, t: u64) -> Op {
        let ts = SimTime(t);
        let ev = |p| Op::Event(WorkloadEvent::new(ts, p));
        let req = |rng: &mut dyn rand::RngCore| {
            RequestedResources::new(rng.gen_range(0.0..0.6), rng.gen_range(0.0..0.6), 0.0)
        };
        match rng.gen_range(0..12) {
            0 | 1 => ev(EventPayload::AddTask {
                task: task(rng),
                priority: rng.gen_range(0..12),
                scheduling_class: rng.gen_range(0..4),
                requested: req(rng),
                constraints: vec![],
            }),
            2 => ev(EventPayload::UpdateTaskRequiredResources {
                task: task(rng),
                requested: req(rng),
                priority: rng.gen_range(0..12),
            }),
            3 => ev(EventPayload::UpdateTaskUsedResources {
                sample: UsageSample::empty(ts, SimTime(t + 1), task(rng), machine(rng)),
            }),
            4 => {
                let c = TaskConstraint::new("rack", ConstraintOp::Lt, rng.gen_range(0..4).to_string());
                let delta = if rng.gen_bool(0.7) { ConstraintDelta::Add(c) } else { ConstraintDelta::Remove(c) };
                ev(EventPayload::UpdateTaskConstraints { task: task(rng), delta })
            }
            5 | 6 => ev(EventPayload::RemoveTask {
                task: task(rng),
                cause: [RemovalCause::Evict, RemovalCause::Fail, RemovalCause::Finish, RemovalCause::Kill, RemovalCause::Lost]
                    [rng.gen_range(0..5)],
            }),
            7 => ev(EventPayload::AddNode {
                node: NodeRecord::new(machine(rng), "p", NodeCapacity::new(rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0))),
            }),
            8 => ev(EventPayload::AddNodeAttributes {
                machine: machine(rng),
                attributes: vec![("rack".into(), rng.gen_range(0..4).to_string())],
            }),
            9 => ev(EventPayload::RemoveNode { machine: machine(rng) }),
            _ => Op::Place(task(rng), machine(rng)),
        }
    }

    pub fn apply(ctx: &mut ContextData, op: &Op) {
        match op {
            Op::Event(e) => {
                ctx.apply_event(e);
            }
            Op::Place(t, m) => {
                ctx.place_task(*t, *m);
            }
        }
    }

    /// Checks the invariants that must hold after `op` moved `before` to
    /// `after`. Returns a description of the first violation.
    pub fn check_step(before: &ContextData, after: &ContextData, op: &Op) -> Result<(), String> {
        for t in before.tasks() {
            if let TaskState::Running(m) = t.state.clone() {
                match after.task(&t.id).map(|r| r.state.clone()) {
                    Some(TaskState::Pending) => return Err(format!("{} went from running to pending after {op:?}", t.id)),
                    Some(TaskState::Running(m2)) if m2 != m => {
                        return Err(format!("{} moved from {m} to {m2} after {op:?}", t.id))
                    }
                    _ => {}
                }
            }
        }
        let c = after.counters();
        let live = (after.pending_len() + after.running_len()) as u64;
        if c.tasks_added != live + c.tasks_removed + c.tasks_rejected {
            return Err(format!(
                "conservation broken after {op:?}: added {} != pending+running {live} + removed {} + rejected {}",
                c.tasks_added, c.tasks_removed, c.tasks_rejected
            ));
        }
        after.audit()
    }

    /// Runs one random sequence, checking every step.
    pub fn run_sequence(rng: &mut impl Rng, len: usize) -> Result<ContextData, String> {
        let mut ctx = ContextData::new();
        for i in 0..len {
            let op = random_op(rng, i as u64);
            let before = ctx.clone();
            apply(&mut ctx, &op);
            check_step(&before, &ctx, &op)?;
        }
        Ok(ctx)
    }
}

pub mod proto {
    use proptest::collection::vec;
    use proptest::option;
    use proptest::prelude::*;
    use tracesim::harness::{ClientRole, ControlCommand, DecisionResult, ProtocolMessage, SchedulerDecision};
    use tracesim::model::{
        ConstraintDelta, ConstraintOp, EventPayload, MachineId, NodeCapacity, NodeRecord,
        RemovalCause, RequestedResources, SimTime, TaskConstraint, TaskId, UsageSample,
        WorkloadEvent,
    };
    use tracesim::state::{PlacementOutcome, RefusalReason, StatsSample};

    fn float() -> impl Strategy<Value = f64> {
        prop_oneof![
            prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO,
            0.0..1.0f64,
        ]
    }

    fn text() -> impl Strategy<Value = String> {
        "\\PC{0,12}"
    }

    fn task() -> impl Strategy<Value = TaskId> {
        (any::<u64>(), any::<u64>()).prop_map(|(j, i)| TaskId::new(j, i))
    }

    fn machine() -> impl Strategy<Value = MachineId> {
        any::<u64>().prop_map(MachineId)
    }

    fn time() -> impl Strategy<Value = SimTime> {
        any::<u64>().prop_map(SimTime)
    }

    fn requested() -> impl Strategy<Value = RequestedResources> {
        (option::of(float()), option::of(float()), option::of(float()))
            .prop_map(|(cpu, memory, disk_space)| RequestedResources { cpu, memory, disk_space })
    }

    fn constraint() -> impl Strategy<Value = TaskConstraint> {
        (text(), 0..4usize, text()).prop_map(|(n, op, v)| {
            let op = [ConstraintOp::Eq, ConstraintOp::Neq, ConstraintOp::Lt, ConstraintOp::Gt][op];
            TaskConstraint::new(n, op, v)
        })
    }

    fn usage() -> impl Strategy<Value = UsageSample> {
        (time(), time(), task(), machine(), vec(option::of(float()), 12)).prop_map(|(s, e, t, m, f)| {
            let mut u = UsageSample::empty(s, e, t, m);
            u.cpu_rate = f[0];
            u.canonical_memory = f[1];
            u.assigned_memory = f[2];
            u.unmapped_page_cache = f[3];
            u.total_page_cache = f[4];
            u.max_memory = f[5];
            u.disk_io_time = f[6];
            u.local_disk_space = f[7];
            u.max_cpu_rate = f[8];
            u.max_disk_io_time = f[9];
            u.cycles_per_instruction = f[10];
            u.memory_accesses_per_instruction = f[11];
            u
        })
    }

    fn payload() -> impl Strategy<Value = EventPayload> {
        let cause = (0..5usize).prop_map(|i| {
            [RemovalCause::Evict, RemovalCause::Fail, RemovalCause::Finish, RemovalCause::Kill, RemovalCause::Lost][i]
        });
        let capacity = || (option::of(float()), option::of(float())).prop_map(|(cpu, memory)| NodeCapacity { cpu, memory });
        prop_oneof![
            (task(), 0..12u8, 0..4u8, requested(), vec(constraint(), 0..3)).prop_map(
                |(task, priority, scheduling_class, requested, constraints)| EventPayload::AddTask {
                    task,
                    priority,
                    scheduling_class,
                    requested,
                    constraints,
                }
            ),
            (task(), requested(), 0..12u8).prop_map(|(task, requested, priority)| {
                EventPayload::UpdateTaskRequiredResources { task, requested, priority }
            }),
            usage().prop_map(|sample| EventPayload::UpdateTaskUsedResources { sample }),
            (task(), constraint(), any::<bool>()).prop_map(|(task, c, add)| EventPayload::UpdateTaskConstraints {
                task,
                delta: if add { ConstraintDelta::Add(c) } else { ConstraintDelta::Remove(c) },
            }),
            (task(), cause).prop_map(|(task, cause)| EventPayload::RemoveTask { task, cause }),
            (machine(), text(), capacity(), vec((text(), text()), 0..3), any::<bool>()).prop_map(
                |(id, p, cap, attrs, online)| {
                    let mut node = NodeRecord::new(id, p, cap);
                    node.attributes = attrs.into_iter().collect();
                    node.online = online;
                    EventPayload::AddNode { node }
                }
            ),
            (machine(), capacity()).prop_map(|(machine, capacity)| EventPayload::UpdateNodeTotalResources {
                machine,
                capacity
            }),
            (machine(), vec((text(), text()), 0..3))
                .prop_map(|(machine, attributes)| EventPayload::AddNodeAttributes { machine, attributes }),
            (machine(), vec(text(), 0..3)).prop_map(|(machine, names)| EventPayload::RemoveNodeAttributes { machine, names }),
            machine().prop_map(|machine| EventPayload::RemoveNode { machine }),
        ]
    }

    fn event() -> impl Strategy<Value = WorkloadEvent> {
        (time(), payload()).prop_map(|(t, p)| WorkloadEvent::new(t, p))
    }

    fn outcome() -> impl Strategy<Value = PlacementOutcome> {
        (0..5usize).prop_map(|i| match i {
            0 => PlacementOutcome::Placed,
            1 => PlacementOutcome::Refused(RefusalReason::UnknownTask),
            2 => PlacementOutcome::Refused(RefusalReason::UnknownNode),
            3 => PlacementOutcome::Refused(RefusalReason::NotPending),
            _ => PlacementOutcome::Refused(RefusalReason::Ineligible),
        })
    }

    fn stats() -> impl Strategy<Value = StatsSample> {
        (time(), vec(any::<u64>(), 8), float(), float()).prop_map(|(t, n, a, b)| StatsSample {
            sim_time: t,
            epoch: n[0],
            nodes_online: n[1],
            tasks_pending: n[2],
            tasks_running: n[3],
            events_applied: n[4],
            events_rejected: n[5],
            anomalies_total: n[6],
            displaced_total: n[7],
            mean_cpu_requested: a,
            mean_cpu_used: b,
        })
    }

    fn command() -> impl Strategy<Value = ControlCommand> {
        prop_oneof![
            Just(ControlCommand::Pause),
            Just(ControlCommand::Resume),
            float().prop_map(|factor| ControlCommand::Speed { factor }),
            text().prop_map(|path| ControlCommand::Snapshot { path }),
            Just(ControlCommand::Stats),
        ]
    }

    /// Any protocol message.
    pub fn message() -> impl Strategy<Value = ProtocolMessage> {
        prop_oneof![
            (text(), any::<u32>(), any::<bool>()).prop_map(|(scheduler_id, protocol_version, control)| {
                ProtocolMessage::Hello {
                    scheduler_id,
                    protocol_version,
                    role: if control { ClientRole::Control } else { ClientRole::Scheduler },
                }
            }),
            (any::<u64>(), time(), vec(event(), 0..6))
                .prop_map(|(epoch, sim_time, events)| ProtocolMessage::EventBatch { epoch, sim_time, events }),
            (any::<u64>(), vec((task(), machine(), text()), 0..6)).prop_map(|(epoch, d)| ProtocolMessage::Decisions {
                epoch,
                decisions: d
                    .into_iter()
                    .map(|(task, node, scheduler_id)| SchedulerDecision { task, node, scheduler_id })
                    .collect(),
            }),
            (any::<u64>(), vec((task(), machine(), outcome()), 0..6)).prop_map(|(epoch, r)| {
                ProtocolMessage::DecisionResults {
                    epoch,
                    results: r.into_iter().map(|(task, node, outcome)| DecisionResult { task, node, outcome }).collect(),
                }
            }),
            command().prop_map(|command| ProtocolMessage::Control { command }),
            (any::<bool>(), text(), option::of(text()))
                .prop_map(|(ok, state, detail)| ProtocolMessage::ControlReply { ok, state, detail }),
            stats().prop_map(|sample| ProtocolMessage::Stats { sample }),
            option::of(text()).prop_map(|reason| ProtocolMessage::Bye { reason }),
        ]
    }
}
