//! Scenario orchestration: builds the network and node actors, injects the
//! timeline as timers, runs the event loop, and assembles the metrics
//! report and trace.

use crate::agent::{
    Directive, DecisionRecord, NodeActor, NodeSetup, ProviderEntry, TimerKind,
};
use crate::message::Message;
use crate::metrics::{
    msg_trace, ConvergenceSummary, DropCounters, LatencyStats, MetricsReport, StreamMetrics,
    TraceRecord, TransitionExport, ViolationCounters,
};
use crate::netsim::{Envelope, EventHandler, LinkModel, Network};
use crate::scenario::ScenarioSpec;
use crate::scene::{ObjectId, ObjectState};
use crate::state::NodeState;
use crate::time::SimTime;
use crate::types::{Labels, NodeId, StreamId};
use std::collections::{BTreeMap, BTreeSet};

type Net = Network<Message, TimerKind>;

/// Run-time knobs independent of the scenario document.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub seed_override: Option<u64>,
    pub t_end_override: Option<SimTime>,
    /// Extra horizon after `t_end` during which in-flight messages are
    /// drained (timers discarded) before quiescence checks.
    pub settle: SimTime,
    pub collect_trace: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            seed_override: None,
            t_end_override: None,
            settle: SimTime::ZERO,
            collect_trace: true,
        }
    }
}

/// Final protocol-visible state of one node, for assertions in tests.
#[derive(Debug, Clone)]
pub struct NodeSummary {
    pub id: NodeId,
    pub label: String,
    pub state: NodeState,
    pub left: bool,
    pub producers: BTreeMap<StreamId, ProviderEntry>,
    pub consumers: BTreeMap<StreamId, Vec<NodeId>>,
    pub failed_streams: BTreeSet<StreamId>,
}

/// One admission decision with its decider, merged across all nodes.
#[derive(Debug, Clone, Copy)]
pub struct DecisionEntry {
    pub decider: NodeId,
    pub record: DecisionRecord,
}

/// Everything a run produces.
pub struct RunOutput {
    pub report: MetricsReport,
    pub trace: Vec<TraceRecord>,
    pub nodes: Vec<NodeSummary>,
    pub decisions: Vec<DecisionEntry>,
    pub labels: Labels,
}

impl RunOutput {
    pub fn has_violations(&self) -> bool {
        self.report.violations.total() > 0
    }

    pub fn node(&self, label: &str) -> Option<&NodeSummary> {
        self.nodes.iter().find(|n| n.label == label)
    }
}

struct Pump<'a> {
    actors: &'a mut BTreeMap<NodeId, NodeActor>,
    trace: &'a mut Vec<TraceRecord>,
    cursors: &'a mut BTreeMap<NodeId, usize>,
    message_counts: &'a mut BTreeMap<&'static str, u64>,
    labels: &'a Labels,
    collect: bool,
}

impl Pump<'_> {
    fn drain_transitions(&mut self, node: NodeId) {
        let Some(actor) = self.actors.get(&node) else { return };
        let cursor = self.cursors.entry(node).or_insert(0);
        let all = actor.transitions();
        if self.collect {
            for rec in &all[*cursor..] {
                self.trace.push(TraceRecord::Transition {
                    t_ms: rec.t.as_ms(),
                    node: self.labels.node(node).to_string(),
                    from: rec.from.token().to_string(),
                    event: rec.event.token().to_string(),
                    to: rec.to.token().to_string(),
                    action: rec.action.token().to_string(),
                });
            }
        }
        *cursor = all.len();
    }

    fn timer_label(&self, timer: &TimerKind) -> String {
        match timer {
            TimerKind::Directive(d) => match d {
                Directive::Join => "directive:join".to_string(),
                Directive::Leave => "directive:leave".to_string(),
                Directive::Subscribe { stream } => {
                    format!("directive:subscribe:{}", self.labels.stream(*stream))
                }
                Directive::Unsubscribe { stream } => {
                    format!("directive:unsubscribe:{}", self.labels.stream(*stream))
                }
            },
            TimerKind::JoinTimeout => "join_timeout".to_string(),
            TimerKind::SensorEdge { sensor, rising } => {
                format!("sensor_edge:{}:{}", sensor, if *rising { "rising" } else { "falling" })
            }
            TimerKind::SensorTick { sensor, k } => format!("sensor_tick:{sensor}:{k}"),
            TimerKind::GuiCommand { index } => format!("gui_command:{index}"),
            TimerKind::GuiIdleCheck => "gui_idle_check".to_string(),
            TimerKind::PingCycle => "ping_cycle".to_string(),
            TimerKind::SubscribeTimeout { stream, try_id } => {
                format!("subscribe_timeout:{}:{}", self.labels.stream(*stream), try_id)
            }
            TimerKind::RetrySubscribe { stream } => {
                format!("retry_subscribe:{}", self.labels.stream(*stream))
            }
        }
    }
}

impl EventHandler<Message, TimerKind> for Pump<'_> {
    fn on_deliver(&mut self, net: &mut Net, env: Envelope<Message>) {
        *self.message_counts.entry(env.payload.kind()).or_insert(0) += 1;
        if self.collect {
            self.trace.push(TraceRecord::Deliver {
                t_ms: env.deliver_time.as_ms(),
                seq: env.global_seq,
                from: self.labels.node(env.from).to_string(),
                to: self.labels.node(env.to).to_string(),
                sent_ms: env.send_time.as_ms(),
                msg: msg_trace(&env.payload, self.labels),
            });
        }
        let to = env.to;
        if let Some(actor) = self.actors.get_mut(&to) {
            actor.handle_message(net, env.from, env.payload);
        }
        self.drain_transitions(to);
    }

    fn on_timer(&mut self, net: &mut Net, node: NodeId, timer: TimerKind) {
        if self.collect {
            self.trace.push(TraceRecord::Timer {
                t_ms: net.now().as_ms(),
                node: self.labels.node(node).to_string(),
                timer: self.timer_label(&timer),
            });
        }
        match timer {
            TimerKind::Directive(directive) => {
                let Some(actor) = self.actors.get_mut(&node) else { return };
                match directive {
                    Directive::Join => {
                        net.attach(node);
                        actor.bootstrap_timers(net);
                        actor.start_join(net);
                    }
                    Directive::Leave => {
                        actor.leave(net);
                        net.detach(node);
                    }
                    Directive::Subscribe { stream } => actor.request_subscribe(net, stream),
                    Directive::Unsubscribe { stream } => actor.request_unsubscribe(net, stream),
                }
            }
            other => {
                if let Some(actor) = self.actors.get_mut(&node) {
                    actor.handle_timer(net, other);
                }
            }
        }
        self.drain_transitions(node);
    }
}

/// A network plus its node actors, stepped as one deterministic loop.
/// `run_scenario` drives this; integration tests can also drive it
/// directly for fine-grained protocol checks.
pub struct Simulation {
    labels: Labels,
    net: Net,
    actors: BTreeMap<NodeId, NodeActor>,
    trace: Vec<TraceRecord>,
    cursors: BTreeMap<NodeId, usize>,
    message_counts: BTreeMap<&'static str, u64>,
    collect_trace: bool,
    events_processed: u64,
}

impl Simulation {
    pub fn new(
        setups: Vec<NodeSetup>,
        links: LinkModel,
        seed: u64,
        labels: Labels,
        collect_trace: bool,
    ) -> Self {
        let net = Network::new(links, seed);
        let mut actors = BTreeMap::new();
        for setup in setups {
            actors.insert(setup.id, NodeActor::new(setup));
        }
        Simulation {
            labels,
            net,
            actors,
            trace: Vec::new(),
            cursors: BTreeMap::new(),
            message_counts: BTreeMap::new(),
            collect_trace,
            events_processed: 0,
        }
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn net(&self) -> &Net {
        &self.net
    }

    pub fn actor(&self, id: NodeId) -> &NodeActor {
        &self.actors[&id]
    }

    pub fn actor_ids(&self) -> Vec<NodeId> {
        self.actors.keys().copied().collect()
    }

    /// Runs a closure against one actor with network access, for tests that
    /// drive protocol operations directly.
    pub fn with_actor<R>(&mut self, id: NodeId, f: impl FnOnce(&mut NodeActor, &mut Net) -> R) -> R {
        let actor = self.actors.get_mut(&id).expect("actor exists");
        let r = f(actor, &mut self.net);
        let mut pump = Pump {
            actors: &mut self.actors,
            trace: &mut self.trace,
            cursors: &mut self.cursors,
            message_counts: &mut self.message_counts,
            labels: &self.labels,
            collect: self.collect_trace,
        };
        pump.drain_transitions(id);
        r
    }

    pub fn attach(&mut self, id: NodeId) {
        self.net.attach(id);
    }

    /// Attaches a node and starts its source timers without the join
    /// handshake; test setups use this to skip discovery.
    pub fn activate(&mut self, id: NodeId) {
        self.net.attach(id);
        if let Some(actor) = self.actors.get_mut(&id) {
            actor.bootstrap_timers(&mut self.net);
        }
    }

    pub fn schedule_directive(&mut self, at: SimTime, node: NodeId, directive: Directive) {
        self.net.schedule_at(node, at, TimerKind::Directive(directive));
    }

    pub fn run_until(&mut self, t: SimTime) -> u64 {
        let mut pump = Pump {
            actors: &mut self.actors,
            trace: &mut self.trace,
            cursors: &mut self.cursors,
            message_counts: &mut self.message_counts,
            labels: &self.labels,
            collect: self.collect_trace,
        };
        let n = self.net.run_until(t, &mut pump);
        self.events_processed += n;
        n
    }

    /// Drains in-flight messages up to `horizon`, discarding timers.
    pub fn drain_messages_until(&mut self, horizon: SimTime) -> u64 {
        let mut pump = Pump {
            actors: &mut self.actors,
            trace: &mut self.trace,
            cursors: &mut self.cursors,
            message_counts: &mut self.message_counts,
            labels: &self.labels,
            collect: self.collect_trace,
        };
        let n = self.net.drain_messages_until(horizon, &mut pump);
        self.events_processed += n;
        n
    }

    pub fn events_processed(&self) -> u64 {
        self.events_processed
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn pending_data_messages(&self) -> u64 {
        self.net.pending_matching(|m| matches!(m, Message::Data(_))) as u64
    }
}

/// Builds, runs and measures one scenario.
pub fn run_scenario(spec: &ScenarioSpec, opts: &RunOptions) -> RunOutput {
    let seed = opts.seed_override.unwrap_or(spec.seed);
    let t_end = opts.t_end_override.unwrap_or(spec.t_end);
    let mut sim =
        Simulation::new(spec.setups(), spec.links.clone(), seed, spec.labels.clone(), opts.collect_trace);
    for d in &spec.timeline {
        sim.schedule_directive(d.at, d.node, d.directive);
    }
    sim.run_until(t_end);
    if opts.settle > SimTime::ZERO {
        sim.drain_messages_until(t_end + opts.settle);
    }
    assemble(spec, seed, t_end, sim)
}

fn assemble(spec: &ScenarioSpec, seed: u64, t_end: SimTime, sim: Simulation) -> RunOutput {
    let Simulation { labels, net, actors, trace, message_counts, events_processed, .. } = sim;

    // Per-stream delivery metrics.
    let mut latencies: BTreeMap<StreamId, Vec<u64>> = BTreeMap::new();
    let mut hops: BTreeMap<StreamId, u8> = BTreeMap::new();
    let mut max_hop_count = 0u8;
    for actor in actors.values() {
        for s in actor.latency_samples() {
            latencies.entry(s.stream).or_default().push(s.latency.as_ns());
            let h = hops.entry(s.stream).or_insert(0);
            *h = (*h).max(s.hop);
            max_hop_count = max_hop_count.max(s.hop);
        }
    }
    let mut per_stream = BTreeMap::new();
    for (stream, ns) in latencies {
        let deliveries = ns.len() as u64;
        if let Some(latency) = LatencyStats::from_ns(ns) {
            per_stream.insert(
                labels.stream(stream),
                StreamMetrics { deliveries, max_hop: hops[&stream], latency },
            );
        }
    }

    // Aggregated counters.
    let mut drops = DropCounters { transport: net.counters().dropped, ..DropCounters::default() };
    let mut violations = ViolationCounters::default();
    let (mut rejects, mut rejects_unknown, mut redirects, mut retries, mut failed) =
        (0u64, 0u64, 0u64, 0u64, 0u64);
    let mut transitions_export: BTreeMap<String, Vec<TransitionExport>> = BTreeMap::new();
    let mut state_transitions = 0u64;
    let mut final_states = BTreeMap::new();
    for (id, actor) in &actors {
        let c = actor.counters();
        drops.publish_inactive += c.publish_inactive_drops;
        drops.stale_route += c.stale_route_drops;
        drops.stale_unsubscribe += c.stale_unsubscribes;
        drops.duplicate_control += c.duplicate_control;
        drops.lww_stale += c.lww_stale;
        violations.hop_bound += c.hop_violations;
        violations.capacity += c.capacity_violations;
        violations.redirect_target += c.redirect_violations;
        violations.serving_coherence += c.coherence_violations;
        rejects += c.rejects_sent;
        rejects_unknown += c.rejects_unknown_stream;
        redirects += c.redirects_sent;
        retries += c.retries;
        failed += c.failed_subscribes;
        state_transitions += actor.transitions().len() as u64;
        let label = labels.node(*id).to_string();
        final_states.insert(label.clone(), actor.state().token().to_string());
        let export: Vec<TransitionExport> = actor
            .transitions()
            .iter()
            .map(|r| TransitionExport {
                t_ms: r.t.as_ms(),
                from: r.from.token().to_string(),
                event: r.event.token().to_string(),
                to: r.to.token().to_string(),
                action: r.action.token().to_string(),
            })
            .collect();
        if !export.is_empty() {
            transitions_export.insert(label, export);
        }
    }

    // Convergence: at data quiescence, every subscribed replica must hold
    // the origin's last published sample, bit for bit.
    let bindings = spec.bindings();
    let mut streams_per_object: BTreeMap<&ObjectId, usize> = BTreeMap::new();
    for object in bindings.values() {
        *streams_per_object.entry(object).or_insert(0) += 1;
    }
    let data_in_flight = net.pending_matching(|m| matches!(m, Message::Data(_))) as u64;
    let mut convergence = ConvergenceSummary {
        checked: data_in_flight == 0,
        data_in_flight,
        ..ConvergenceSummary::default()
    };
    if convergence.checked {
        for actor in actors.values() {
            if actor.has_left() {
                continue;
            }
            for (stream, entry) in actor.producers() {
                if entry.provider == actor.id() {
                    continue; // forwarder self-listing, not a subscription
                }
                let Some(object) = bindings.get(stream) else { continue };
                if streams_per_object.get(object).copied().unwrap_or(0) > 1 {
                    convergence.shared_objects_skipped += 1;
                    continue;
                }
                let origin = &actors[&stream.origin];
                match origin.last_published(*stream) {
                    None => {
                        if actor.scene().get(object).is_some() {
                            convergence.mismatches += 1;
                        }
                    }
                    Some(last) => {
                        let expected = ObjectState {
                            pose: last.pose,
                            last_seq: last.seq,
                            last_origin_time: last.origin_time,
                            last_source: stream.origin,
                        };
                        match actor.scene().get(object) {
                            Some(st) if st.bits_eq(&expected) => {}
                            _ => convergence.mismatches += 1,
                        }
                    }
                }
            }
        }
    }

    let report = MetricsReport {
        schema: 1,
        scenario: spec.name.clone(),
        seed,
        t_end_ms: t_end.as_ms(),
        final_states,
        per_stream,
        max_hop_count,
        message_counts: message_counts.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        rejects,
        rejects_unknown_stream: rejects_unknown,
        redirects,
        retries,
        failed_subscribes: failed,
        drops,
        violations,
        convergence,
        events_processed,
        state_transitions,
        transitions: transitions_export,
    };

    let nodes = actors
        .iter()
        .map(|(id, actor)| NodeSummary {
            id: *id,
            label: labels.node(*id).to_string(),
            state: actor.state(),
            left: actor.has_left(),
            producers: actor.producers().clone(),
            consumers: actor
                .consumers()
                .iter()
                .map(|(s, m)| (*s, m.keys().copied().collect()))
                .collect(),
            failed_streams: actor.failed_streams().clone(),
        })
        .collect();

    let mut decisions: Vec<DecisionEntry> = actors
        .iter()
        .flat_map(|(id, actor)| {
            actor.decisions().iter().map(|r| DecisionEntry { decider: *id, record: *r })
        })
        .collect();
    decisions.sort_by_key(|d| (d.record.t, d.decider, d.record.requester));

    RunOutput { report, trace, nodes, decisions, labels }
}
