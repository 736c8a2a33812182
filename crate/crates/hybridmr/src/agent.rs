//! Per-node control logic.
//!
//! Each node is one single-threaded actor: it owns its mode, its
//! producers/consumers tables, its ARTT table and its scene replica, and it
//! reacts to delivered messages and timers. Nodes share nothing except
//! messages.
//!
//! The distribution rules in one place:
//!
//! * a joining node broadcasts a query and learns peers and streams from
//!   the responses;
//! * a producing node advertises its local streams on each rising
//!   production edge;
//! * a subscription is admitted directly when QoS allows; otherwise the
//!   stream's origin searches its direct consumers (ascending ARTT, ties
//!   by node id) for one forwarder, keeping every delivery path at most
//!   two hops; with no candidate the request is rejected and the requester
//!   retries later;
//! * forwarders re-send data unchanged except for the hop counter, so the
//!   origin timestamp survives for last-writer-wins replication.

use crate::message::{Message, RejectReason};
use crate::netsim::Network;
use crate::qos::{self, ArttTable, ForwarderCandidate, QosConfig};
use crate::scene::{ObjectId, SceneReplica};
use crate::sensor::{GuiScript, GuiSource, PoseSample, SensorConfig};
use crate::state::{self, NodeEvent, NodeState, ServerAction};
use crate::time::SimTime;
use crate::types::{NodeId, StreamId};
use std::collections::{BTreeMap, BTreeSet};

/// Network type all node actors run on.
pub type Net = Network<Message, TimerKind>;

/// Protocol timing knobs, all in simulated milliseconds.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub join_timeout_ms: f64,
    pub subscribe_timeout_ms: f64,
    pub retry_backoff_ms: f64,
    pub max_retries: u32,
    pub gui_idle_timeout_ms: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            join_timeout_ms: 100.0,
            subscribe_timeout_ms: 250.0,
            retry_backoff_ms: 500.0,
            max_retries: 3,
            gui_idle_timeout_ms: 250.0,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("join_timeout_ms", self.join_timeout_ms),
            ("subscribe_timeout_ms", self.subscribe_timeout_ms),
            ("retry_backoff_ms", self.retry_backoff_ms),
            ("gui_idle_timeout_ms", self.gui_idle_timeout_ms),
        ] {
            if !(v > 0.0) {
                return Err(format!("{name} must be positive"));
            }
        }
        Ok(())
    }
}

/// Timers a node schedules for itself (plus runner-injected directives).
#[derive(Debug, Clone, PartialEq)]
pub enum TimerKind {
    /// Scenario directive, intercepted by the simulation driver.
    Directive(Directive),
    JoinTimeout,
    SensorEdge { sensor: usize, rising: bool },
    SensorTick { sensor: usize, k: u64 },
    GuiCommand { index: usize },
    GuiIdleCheck,
    PingCycle,
    SubscribeTimeout { stream: StreamId, try_id: u32 },
    RetrySubscribe { stream: StreamId },
}

/// Timed scenario operations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Directive {
    Join,
    Leave,
    Subscribe { stream: StreamId },
    Unsubscribe { stream: StreamId },
}

/// Where a consumed stream comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProviderEntry {
    pub provider: NodeId,
    pub origin: NodeId,
}

/// Outcome of one subscription request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubscriptionDecision {
    Accept,
    Redirect(NodeId),
    Reject(RejectReason),
}

/// One applied mode transition, kept for traces and reports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionRecord {
    pub t: SimTime,
    pub from: NodeState,
    pub event: NodeEvent,
    pub to: NodeState,
    pub action: ServerAction,
}

/// One admission decision, kept for oracle comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecisionRecord {
    pub t: SimTime,
    pub requester: NodeId,
    pub stream: StreamId,
    pub decision: SubscriptionDecision,
}

/// Latency of one applied remote delivery.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencySample {
    pub stream: StreamId,
    pub latency: SimTime,
    pub hop: u8,
}

/// Operational counters. Drops and rejects are normal protocol outcomes;
/// the `*_violations` fields must stay zero in a healthy run and gate the
/// harness exit status.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AgentCounters {
    pub publish_inactive_drops: u64,
    pub stale_route_drops: u64,
    pub stale_unsubscribes: u64,
    pub duplicate_control: u64,
    pub lww_stale: u64,
    pub rejects_sent: u64,
    pub rejects_unknown_stream: u64,
    pub retries: u64,
    pub failed_subscribes: u64,
    pub delegate_nacks: u64,
    pub redirects_sent: u64,
    pub hop_violations: u64,
    pub capacity_violations: u64,
    pub redirect_violations: u64,
    pub coherence_violations: u64,
}

impl AgentCounters {
    pub fn violations(&self) -> u64 {
        self.hop_violations
            + self.capacity_violations
            + self.redirect_violations
            + self.coherence_violations
    }
}

#[derive(Debug, Clone)]
pub struct SensorSetup {
    pub stream: StreamId,
    pub config: SensorConfig,
}

#[derive(Debug, Clone)]
pub struct GuiSetup {
    pub stream: StreamId,
    pub script: GuiScript,
}

/// Everything needed to build one node actor.
#[derive(Debug, Clone)]
pub struct NodeSetup {
    pub id: NodeId,
    pub qos: QosConfig,
    pub protocol: ProtocolConfig,
    pub sensors: Vec<SensorSetup>,
    pub gui: Option<GuiSetup>,
    /// Environment-wide stream-to-object binding (shared by all nodes).
    pub bindings: BTreeMap<StreamId, ObjectId>,
}

struct SensorAgent {
    stream: StreamId,
    config: SensorConfig,
    active: bool,
    next_seq: u64,
}

struct GuiAgent {
    stream: StreamId,
    source: GuiSource,
    next_seq: u64,
}

struct PendingSub {
    original: NodeId,
    target: NodeId,
    attempt: u32,
    try_id: u32,
    awaiting: bool,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum AgentError {
    #[error("stream is not originated by this node")]
    NotLocalStream,
}

/// One hybrid node.
pub struct NodeActor {
    id: NodeId,
    state: NodeState,
    qos: QosConfig,
    protocol: ProtocolConfig,

    sensors: Vec<SensorAgent>,
    gui: Option<GuiAgent>,
    gui_active: bool,
    last_gui_cmd: SimTime,
    producer_level: bool,

    local_streams: BTreeSet<StreamId>,
    bindings: BTreeMap<StreamId, ObjectId>,
    scene: SceneReplica,

    peers: BTreeSet<NodeId>,
    known_streams: BTreeSet<StreamId>,
    producers: BTreeMap<StreamId, ProviderEntry>,
    consumers: BTreeMap<StreamId, BTreeMap<NodeId, SimTime>>,
    delegations: BTreeMap<StreamId, BTreeMap<NodeId, BTreeSet<NodeId>>>,
    pending_delegations: BTreeMap<(StreamId, NodeId), Vec<NodeId>>,
    pending_subs: BTreeMap<StreamId, PendingSub>,
    deferred_subs: BTreeSet<StreamId>,
    deferred_unsubs: BTreeSet<StreamId>,

    artt: ArttTable,
    cached_free_slots: BTreeMap<NodeId, u32>,
    outstanding_pings: BTreeMap<u64, (NodeId, SimTime)>,
    next_nonce: u64,
    ping_armed: bool,

    joining: bool,
    joined: bool,
    left: bool,
    timers_bootstrapped: bool,

    last_published: BTreeMap<StreamId, PoseSample>,
    failed_streams: BTreeSet<StreamId>,
    transitions: Vec<TransitionRecord>,
    decisions: Vec<DecisionRecord>,
    latency_samples: Vec<LatencySample>,
    counters: AgentCounters,
}

impl NodeActor {
    pub fn new(setup: NodeSetup) -> Self {
        let mut local_streams = BTreeSet::new();
        let sensors: Vec<SensorAgent> = setup
            .sensors
            .into_iter()
            .map(|s| {
                local_streams.insert(s.stream);
                SensorAgent { stream: s.stream, config: s.config, active: false, next_seq: 0 }
            })
            .collect();
        let gui = setup.gui.map(|g| {
            local_streams.insert(g.stream);
            GuiAgent { stream: g.stream, source: GuiSource::new(g.script), next_seq: 0 }
        });
        let artt = ArttTable::new(setup.qos.artt_window);
        NodeActor {
            id: setup.id,
            state: NodeState::Passive,
            qos: setup.qos,
            protocol: setup.protocol,
            sensors,
            gui,
            gui_active: false,
            last_gui_cmd: SimTime::ZERO,
            producer_level: false,
            known_streams: local_streams.clone(),
            local_streams,
            bindings: setup.bindings,
            scene: SceneReplica::new(),
            peers: BTreeSet::new(),
            producers: BTreeMap::new(),
            consumers: BTreeMap::new(),
            delegations: BTreeMap::new(),
            pending_delegations: BTreeMap::new(),
            pending_subs: BTreeMap::new(),
            deferred_subs: BTreeSet::new(),
            deferred_unsubs: BTreeSet::new(),
            artt,
            cached_free_slots: BTreeMap::new(),
            outstanding_pings: BTreeMap::new(),
            next_nonce: 1,
            ping_armed: false,
            joining: false,
            joined: false,
            left: false,
            timers_bootstrapped: false,
            last_published: BTreeMap::new(),
            failed_streams: BTreeSet::new(),
            transitions: Vec::new(),
            decisions: Vec::new(),
            latency_samples: Vec::new(),
            counters: AgentCounters::default(),
        }
    }

    // ------------------------------------------------------------------
    // Introspection
    // ------------------------------------------------------------------

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn state(&self) -> NodeState {
        self.state
    }

    pub fn peers(&self) -> &BTreeSet<NodeId> {
        &self.peers
    }

    pub fn known_streams(&self) -> &BTreeSet<StreamId> {
        &self.known_streams
    }

    pub fn local_streams(&self) -> &BTreeSet<StreamId> {
        &self.local_streams
    }

    pub fn producers(&self) -> &BTreeMap<StreamId, ProviderEntry> {
        &self.producers
    }

    pub fn consumers(&self) -> &BTreeMap<StreamId, BTreeMap<NodeId, SimTime>> {
        &self.consumers
    }

    pub fn consumer_count(&self) -> usize {
        self.consumers.values().map(|m| m.len()).sum()
    }

    /// Origin-side record of who forwards which stream to whom.
    pub fn delegations(&self) -> &BTreeMap<StreamId, BTreeMap<NodeId, BTreeSet<NodeId>>> {
        &self.delegations
    }

    pub fn scene(&self) -> &SceneReplica {
        &self.scene
    }

    pub fn binding(&self, stream: StreamId) -> Option<&ObjectId> {
        self.bindings.get(&stream)
    }

    pub fn last_published(&self, stream: StreamId) -> Option<&PoseSample> {
        self.last_published.get(&stream)
    }

    pub fn failed_streams(&self) -> &BTreeSet<StreamId> {
        &self.failed_streams
    }

    pub fn counters(&self) -> &AgentCounters {
        &self.counters
    }

    pub fn transitions(&self) -> &[TransitionRecord] {
        &self.transitions
    }

    pub fn decisions(&self) -> &[DecisionRecord] {
        &self.decisions
    }

    pub fn latency_samples(&self) -> &[LatencySample] {
        &self.latency_samples
    }

    pub fn artt_table(&self) -> &ArttTable {
        &self.artt
    }

    pub fn has_left(&self) -> bool {
        self.left
    }

    pub fn join_complete(&self) -> bool {
        self.joined
    }

    // ------------------------------------------------------------------
    // Setup and directives
    // ------------------------------------------------------------------

    /// Schedules the node's source timers (sensor windows, GUI script).
    /// Runs once, when the node comes online; sources whose windows started
    /// while the node was offline resume on their original tick grid, and
    /// GUI commands scripted in the past are skipped.
    pub fn bootstrap_timers(&mut self, net: &mut Net) {
        if self.timers_bootstrapped {
            return;
        }
        self.timers_bootstrapped = true;
        let now = net.now();
        for (i, s) in self.sensors.iter().enumerate() {
            if s.config.stop <= now {
                continue;
            }
            let start = s.config.start.max(now);
            if start < s.config.stop {
                net.schedule_at(self.id, start, TimerKind::SensorEdge { sensor: i, rising: true });
                if let Some(k) = s.config.first_tick_at_or_after(start) {
                    net.schedule_at(
                        self.id,
                        s.config.sample_time(k),
                        TimerKind::SensorTick { sensor: i, k },
                    );
                }
            }
            net.schedule_at(self.id, s.config.stop, TimerKind::SensorEdge { sensor: i, rising: false });
        }
        if let Some(gui) = &self.gui {
            for (i, e) in gui.source.script().entries.iter().enumerate() {
                if e.at >= now {
                    net.schedule_at(self.id, e.at, TimerKind::GuiCommand { index: i });
                }
            }
        }
    }

    /// Broadcasts a join query and waits `join_timeout` for responses. The
    /// node starts Passive; learned peers and streams accumulate as the
    /// responses arrive.
    pub fn start_join(&mut self, net: &mut Net) {
        self.joining = true;
        self.joined = false;
        self.broadcast_msg(net, Message::JoinQuery);
        net.schedule(self.id, SimTime::from_ms(self.protocol.join_timeout_ms), TimerKind::JoinTimeout);
    }

    /// Scenario-driven subscribe: targets the stream's origin, deferring
    /// until the stream has been learned via join or advertisement.
    pub fn request_subscribe(&mut self, net: &mut Net, stream: StreamId) {
        if self.left {
            return;
        }
        if !self.known_streams.contains(&stream) {
            self.deferred_subs.insert(stream);
            return;
        }
        self.subscribe(net, stream.origin, stream);
    }

    /// Sends a subscription request to `provider` and arms the timeout.
    pub fn subscribe(&mut self, net: &mut Net, provider: NodeId, stream: StreamId) {
        if self.producers.contains_key(&stream) || self.pending_subs.contains_key(&stream) {
            self.counters.duplicate_control += 1;
            return;
        }
        self.pending_subs.insert(
            stream,
            PendingSub { original: provider, target: provider, attempt: 0, try_id: 0, awaiting: true },
        );
        self.send_msg(net, provider, Message::Subscribe { stream });
        self.arm_subscribe_timeout(net, stream, 0);
    }

    /// Consumer-side unsubscribe. A forwarder with live downstream
    /// consumers defers its own withdrawal until the downstream empties.
    pub fn request_unsubscribe(&mut self, net: &mut Net, stream: StreamId) {
        if self.pending_subs.remove(&stream).is_some() {
            // Withdrawing an unresolved request needs no wire traffic.
            self.producers.remove(&stream);
            return;
        }
        let Some(entry) = self.producers.get(&stream).copied() else {
            self.counters.stale_unsubscribes += 1;
            return;
        };
        if entry.provider == self.id {
            self.counters.stale_unsubscribes += 1;
            return;
        }
        if self.consumers.get(&stream).map(|m| !m.is_empty()).unwrap_or(false) {
            self.deferred_unsubs.insert(stream);
            return;
        }
        self.send_msg(net, entry.provider, Message::Unsubscribe { stream });
        self.producers.remove(&stream);
    }

    /// Graceful departure: withdraw all subscriptions, then the runner
    /// detaches the node from the network.
    pub fn leave(&mut self, net: &mut Net) {
        let subs: Vec<(StreamId, NodeId)> = self
            .producers
            .iter()
            .filter(|(_, e)| e.provider != self.id)
            .map(|(s, e)| (*s, e.provider))
            .collect();
        for (stream, provider) in subs {
            self.send_msg(net, provider, Message::Unsubscribe { stream });
        }
        self.producers.clear();
        self.consumers.clear();
        self.pending_subs.clear();
        self.deferred_subs.clear();
        self.deferred_unsubs.clear();
        self.left = true;
    }

    /// Broadcasts availability of a locally originated stream. Advertising
    /// a foreign stream is a programming error.
    pub fn advertise(&mut self, net: &mut Net, stream: StreamId) -> Result<(), AgentError> {
        if stream.origin != self.id || !self.local_streams.contains(&stream) {
            return Err(AgentError::NotLocalStream);
        }
        self.broadcast_msg(net, Message::Advertise { stream });
        Ok(())
    }

    /// Reflects the OR of sensor-agent and GUI-agent activity. A rising
    /// edge emits `SensorOn` and advertises all local streams; a falling
    /// edge emits `SensorOff`. Repeated edges at the same level are no-ops.
    pub fn set_producer_level(&mut self, net: &mut Net, now_active: bool) {
        if self.producer_level == now_active {
            // Duplicate edge; the mode machine would absorb it anyway.
            let _ = state::step(
                self.state,
                if now_active { NodeEvent::SensorOn } else { NodeEvent::SensorOff },
            );
            return;
        }
        self.producer_level = now_active;
        if now_active {
            self.apply_event(net.now(), NodeEvent::SensorOn);
            let streams: Vec<StreamId> = self.local_streams.iter().copied().collect();
            for s in streams {
                self.broadcast_msg(net, Message::Advertise { stream: s });
            }
        } else {
            self.apply_event(net.now(), NodeEvent::SensorOff);
        }
    }

    /// Publishes a locally produced sample: the local replica is updated
    /// first, then one data message goes to every consumer of the stream.
    /// Publishing while locally passive is dropped and counted.
    pub fn publish(&mut self, net: &mut Net, stream: StreamId, sample: PoseSample) {
        debug_assert_eq!(stream.origin, self.id);
        if !matches!(self.state, NodeState::Active | NodeState::ActiveForwarder) {
            self.counters.publish_inactive_drops += 1;
            return;
        }
        if let Some(object) = self.bindings.get(&stream).cloned() {
            self.scene.apply_update(&object, &sample);
        }
        self.last_published.insert(stream, sample.clone());
        let targets: Vec<NodeId> =
            self.consumers.get(&stream).map(|m| m.keys().copied().collect()).unwrap_or_default();
        for to in targets {
            self.send_msg(net, to, Message::Data(sample.with_hop(1)));
        }
    }

    // ------------------------------------------------------------------
    // Event plumbing
    // ------------------------------------------------------------------

    pub fn handle_message(&mut self, net: &mut Net, from: NodeId, msg: Message) {
        if self.left {
            return;
        }
        self.peers.insert(from);
        match msg {
            Message::JoinQuery => {
                let known: Vec<StreamId> = self.known_streams.iter().copied().collect();
                self.send_msg(net, from, Message::JoinResponse { known_streams: known });
            }
            Message::JoinResponse { known_streams } => {
                self.learn_streams(net, known_streams);
            }
            Message::Advertise { stream } => {
                self.learn_streams(net, vec![stream]);
            }
            Message::Subscribe { stream } => {
                self.handle_subscribe(net, from, stream);
            }
            Message::SubscribeAck { stream } => {
                if self.pending_subs.remove(&stream).is_some() {
                    self.producers
                        .insert(stream, ProviderEntry { provider: from, origin: stream.origin });
                } else {
                    self.counters.duplicate_control += 1;
                }
            }
            Message::RedirectTo { stream, forwarder } => {
                self.on_redirect(net, stream, forwarder);
            }
            Message::DelegateForward { stream, new_consumer } => {
                self.on_delegate(net, from, stream, new_consumer);
            }
            Message::Reject { stream, reason } => {
                self.on_reject(net, from, stream, reason);
            }
            Message::Unsubscribe { stream } => {
                self.on_unsubscribe(net, from, stream);
            }
            Message::ForwardOff { stream } => {
                let pruned = self
                    .delegations
                    .get_mut(&stream)
                    .map(|m| m.remove(&from).is_some())
                    .unwrap_or(false);
                if let Some(m) = self.delegations.get(&stream) {
                    if m.is_empty() {
                        self.delegations.remove(&stream);
                    }
                }
                if !pruned {
                    self.counters.duplicate_control += 1;
                }
            }
            Message::Ping { nonce } => {
                let free = self.qos.max_consumers.saturating_sub(self.consumer_count()) as u32;
                self.send_msg(net, from, Message::Pong { nonce, free_slots: free });
            }
            Message::Pong { nonce, free_slots } => {
                match self.outstanding_pings.remove(&nonce) {
                    Some((peer, sent_at)) if peer == from => {
                        let rtt_ms = net.now().saturating_sub(sent_at).as_ms();
                        self.artt.record(from, rtt_ms);
                        self.cached_free_slots.insert(from, free_slots);
                    }
                    _ => self.counters.duplicate_control += 1,
                }
            }
            Message::Data(sample) => {
                self.on_data(net, from, sample);
            }
        }
    }

    pub fn handle_timer(&mut self, net: &mut Net, timer: TimerKind) {
        if self.left {
            return;
        }
        match timer {
            TimerKind::Directive(_) => {
                debug_assert!(false, "directives are handled by the simulation driver");
            }
            TimerKind::JoinTimeout => {
                self.joining = false;
                self.joined = true;
            }
            TimerKind::SensorEdge { sensor, rising } => {
                if let Some(s) = self.sensors.get_mut(sensor) {
                    s.active = rising;
                    self.recompute_producer_level(net);
                }
            }
            TimerKind::SensorTick { sensor, k } => self.on_sensor_tick(net, sensor, k),
            TimerKind::GuiCommand { index } => self.on_gui_command(net, index),
            TimerKind::GuiIdleCheck => {
                let idle = SimTime::from_ms(self.protocol.gui_idle_timeout_ms);
                if self.gui_active && net.now().saturating_sub(self.last_gui_cmd) >= idle {
                    self.gui_active = false;
                    self.recompute_producer_level(net);
                }
            }
            TimerKind::PingCycle => self.on_ping_cycle(net),
            TimerKind::SubscribeTimeout { stream, try_id } => {
                self.on_subscribe_timeout(net, stream, try_id)
            }
            TimerKind::RetrySubscribe { stream } => self.on_retry_subscribe(net, stream),
        }
    }

    // ------------------------------------------------------------------
    // Subscription handling (provider side)
    // ------------------------------------------------------------------

    /// Decides a subscription request: direct admission, delegation to one
    /// of the origin's direct consumers, or rejection. The forwarder search
    /// is exactly one level deep.
    pub fn handle_subscribe(
        &mut self,
        net: &mut Net,
        requester: NodeId,
        stream: StreamId,
    ) -> SubscriptionDecision {
        let now = net.now();
        let is_local = stream.origin == self.id && self.local_streams.contains(&stream);
        let consumed = self.producers.get(&stream).copied();

        // A consumer can serve as forwarder only while it sits directly
        // under the origin, otherwise admitting would deepen the path
        // beyond two hops.
        let depth_one_consumer =
            !is_local && consumed.map(|e| e.provider == stream.origin).unwrap_or(false);

        if !is_local && !depth_one_consumer {
            let reason = if consumed.is_some() {
                RejectReason::NoCandidate
            } else {
                RejectReason::UnknownStream
            };
            return self.reject_subscribe(net, requester, stream, reason);
        }

        if self.consumers.get(&stream).map(|m| m.contains_key(&requester)).unwrap_or(false) {
            // Duplicate request: re-acknowledge, change nothing.
            self.send_msg(net, requester, Message::SubscribeAck { stream });
            let decision = SubscriptionDecision::Accept;
            self.decisions.push(DecisionRecord { t: now, requester, stream, decision });
            return decision;
        }

        if qos::admit(&self.qos, &self.artt, self.consumer_count(), requester) {
            self.admit_consumer(net, stream, requester);
            self.send_msg(net, requester, Message::SubscribeAck { stream });
            let decision = SubscriptionDecision::Accept;
            self.decisions.push(DecisionRecord { t: now, requester, stream, decision });
            return decision;
        }

        if is_local {
            let candidates: Vec<ForwarderCandidate> = self
                .consumers
                .get(&stream)
                .map(|m| {
                    m.keys()
                        .map(|peer| ForwarderCandidate {
                            peer: *peer,
                            artt_ms: self.artt.artt(*peer),
                            free_slots: self.cached_free_slots.get(peer).copied(),
                        })
                        .collect()
                })
                .unwrap_or_default();
            if let Some(forwarder) = qos::select_forwarder(&candidates) {
                if !self
                    .consumers
                    .get(&stream)
                    .map(|m| m.contains_key(&forwarder))
                    .unwrap_or(false)
                {
                    self.counters.redirect_violations += 1;
                }
                self.send_msg(net, forwarder, Message::DelegateForward { stream, new_consumer: requester });
                self.send_msg(net, requester, Message::RedirectTo { stream, forwarder });
                self.pending_delegations.entry((stream, forwarder)).or_default().push(requester);
                self.delegations
                    .entry(stream)
                    .or_default()
                    .entry(forwarder)
                    .or_default()
                    .insert(requester);
                if let Some(slots) = self.cached_free_slots.get_mut(&forwarder) {
                    *slots = slots.saturating_sub(1);
                }
                self.counters.redirects_sent += 1;
                let decision = SubscriptionDecision::Redirect(forwarder);
                self.decisions.push(DecisionRecord { t: now, requester, stream, decision });
                return decision;
            }
        }

        self.reject_subscribe(net, requester, stream, RejectReason::NoCandidate)
    }

    fn reject_subscribe(
        &mut self,
        net: &mut Net,
        requester: NodeId,
        stream: StreamId,
        reason: RejectReason,
    ) -> SubscriptionDecision {
        let now = net.now();
        self.counters.rejects_sent += 1;
        if reason == RejectReason::UnknownStream {
            self.counters.rejects_unknown_stream += 1;
        }
        self.send_msg(net, requester, Message::Reject { stream, reason });
        let decision = SubscriptionDecision::Reject(reason);
        self.decisions.push(DecisionRecord { t: now, requester, stream, decision });
        decision
    }

    fn admit_consumer(&mut self, net: &mut Net, stream: StreamId, peer: NodeId) {
        let now = net.now();
        let map = self.consumers.entry(stream).or_default();
        let newly_serving_stream = map.is_empty();
        map.entry(peer).or_insert(now);
        if self.consumer_count() > self.qos.max_consumers {
            self.counters.capacity_violations += 1;
        }
        if stream.origin != self.id && newly_serving_stream {
            // The node now serves a stream it does not originate; the mode
            // machine absorbs the event if it is already forwarding.
            self.apply_event(now, NodeEvent::ForwardOn);
        }
        self.ping_now(net, peer);
        self.arm_ping_cycle(net);
    }

    /// A direct consumer asked to forward `stream` to `new_consumer`.
    /// Capacity is re-checked fresh; a stale delegation gets a negative
    /// acknowledgment (a `Reject` back to the origin), which the origin
    /// converts into a rejection of the requester.
    pub fn on_delegate(
        &mut self,
        net: &mut Net,
        origin: NodeId,
        stream: StreamId,
        new_consumer: NodeId,
    ) {
        let consumes = self.producers.contains_key(&stream);
        let already = self
            .consumers
            .get(&stream)
            .map(|m| m.contains_key(&new_consumer))
            .unwrap_or(false);
        if already {
            return;
        }
        if !consumes || !qos::admit(&self.qos, &self.artt, self.consumer_count(), new_consumer) {
            self.counters.delegate_nacks += 1;
            self.send_msg(net, origin, Message::Reject { stream, reason: RejectReason::NoCandidate });
            return;
        }
        self.admit_consumer(net, stream, new_consumer);
    }

    // ------------------------------------------------------------------
    // Subscription handling (consumer side)
    // ------------------------------------------------------------------

    fn on_redirect(&mut self, net: &mut Net, stream: StreamId, forwarder: NodeId) {
        let Some(pending) = self.pending_subs.get_mut(&stream) else {
            self.counters.duplicate_control += 1;
            return;
        };
        if !pending.awaiting {
            self.counters.duplicate_control += 1;
            return;
        }
        pending.target = forwarder;
        pending.try_id += 1;
        let try_id = pending.try_id;
        // Provisional route; the forwarder's ack (or data) confirms it.
        self.producers.insert(stream, ProviderEntry { provider: forwarder, origin: stream.origin });
        self.send_msg(net, forwarder, Message::Subscribe { stream });
        self.arm_subscribe_timeout(net, stream, try_id);
    }

    fn on_reject(&mut self, net: &mut Net, from: NodeId, stream: StreamId, _reason: RejectReason) {
        // Origin role: a negative acknowledgment from a delegated forwarder.
        if let Some(queue) = self.pending_delegations.get_mut(&(stream, from)) {
            if !queue.is_empty() {
                let new_consumer = queue.remove(0);
                if queue.is_empty() {
                    self.pending_delegations.remove(&(stream, from));
                }
                if let Some(fwd_map) = self.delegations.get_mut(&stream) {
                    if let Some(set) = fwd_map.get_mut(&from) {
                        set.remove(&new_consumer);
                        if set.is_empty() {
                            fwd_map.remove(&from);
                        }
                    }
                    if fwd_map.is_empty() {
                        self.delegations.remove(&stream);
                    }
                }
                self.cached_free_slots.insert(from, 0);
                self.counters.rejects_sent += 1;
                self.send_msg(
                    net,
                    new_consumer,
                    Message::Reject { stream, reason: RejectReason::NoCandidate },
                );
                return;
            }
        }

        // Requester role: the current attempt failed.
        let Some(pending) = self.pending_subs.get_mut(&stream) else {
            self.counters.duplicate_control += 1;
            return;
        };
        if !pending.awaiting {
            self.counters.duplicate_control += 1;
            return;
        }
        pending.awaiting = false;
        self.producers.remove(&stream);
        if pending.attempt < self.protocol.max_retries {
            net.schedule(
                self.id,
                SimTime::from_ms(self.protocol.retry_backoff_ms),
                TimerKind::RetrySubscribe { stream },
            );
        } else {
            self.pending_subs.remove(&stream);
            self.counters.failed_subscribes += 1;
            self.failed_streams.insert(stream);
        }
    }

    fn on_subscribe_timeout(&mut self, net: &mut Net, stream: StreamId, try_id: u32) {
        let Some(pending) = self.pending_subs.get_mut(&stream) else { return };
        if !pending.awaiting || pending.try_id != try_id {
            return;
        }
        self.producers.remove(&stream);
        if pending.attempt < self.protocol.max_retries {
            pending.attempt += 1;
            pending.try_id += 1;
            let (target, next_try) = (pending.original, pending.try_id);
            self.counters.retries += 1;
            self.send_msg(net, target, Message::Subscribe { stream });
            self.arm_subscribe_timeout(net, stream, next_try);
        } else {
            self.pending_subs.remove(&stream);
            self.counters.failed_subscribes += 1;
            self.failed_streams.insert(stream);
        }
    }

    fn on_retry_subscribe(&mut self, net: &mut Net, stream: StreamId) {
        let Some(pending) = self.pending_subs.get_mut(&stream) else { return };
        if pending.awaiting {
            return;
        }
        pending.attempt += 1;
        pending.try_id += 1;
        pending.awaiting = true;
        pending.target = pending.original;
        let (target, try_id) = (pending.original, pending.try_id);
        self.counters.retries += 1;
        self.send_msg(net, target, Message::Subscribe { stream });
        self.arm_subscribe_timeout(net, stream, try_id);
    }

    fn arm_subscribe_timeout(&mut self, net: &mut Net, stream: StreamId, try_id: u32) {
        net.schedule(
            self.id,
            SimTime::from_ms(self.protocol.subscribe_timeout_ms),
            TimerKind::SubscribeTimeout { stream, try_id },
        );
    }

    // ------------------------------------------------------------------
    // Data plane
    // ------------------------------------------------------------------

    /// Applies an incoming sample and, when the node has downstream
    /// consumers for the stream, re-sends it with the hop counter bumped.
    /// The origin's sequence number and timestamp are preserved.
    pub fn on_data(&mut self, net: &mut Net, from: NodeId, sample: PoseSample) {
        let stream = sample.stream;
        match self.producers.get(&stream) {
            Some(entry) if entry.provider == from => {}
            _ => {
                self.counters.stale_route_drops += 1;
                return;
            }
        }
        if sample.hop_count > 2 {
            self.counters.hop_violations += 1;
        }
        let applied = match self.bindings.get(&stream).cloned() {
            Some(object) => self.scene.apply_update(&object, &sample),
            None => false,
        };
        if applied {
            let latency = net.now().saturating_sub(sample.origin_time);
            self.latency_samples.push(LatencySample { stream, latency, hop: sample.hop_count });
        } else {
            self.counters.lww_stale += 1;
        }
        let targets: Vec<NodeId> =
            self.consumers.get(&stream).map(|m| m.keys().copied().collect()).unwrap_or_default();
        if targets.is_empty() {
            return;
        }
        if sample.hop_count >= 2 {
            // Re-sending would exceed the two-hop bound: apply locally,
            // suppress the forward, surface the violation.
            self.counters.hop_violations += 1;
            return;
        }
        if !state::server_active(self.state) {
            self.counters.coherence_violations += 1;
        }
        let hop = sample.hop_count + 1;
        for to in targets {
            self.send_msg(net, to, Message::Data(sample.with_hop(hop)));
        }
    }

    fn on_unsubscribe(&mut self, net: &mut Net, from: NodeId, stream: StreamId) {
        let removed = self.consumers.get_mut(&stream).map(|m| m.remove(&from).is_some());
        if removed != Some(true) {
            self.counters.stale_unsubscribes += 1;
            return;
        }
        let emptied = self.consumers.get(&stream).map(|m| m.is_empty()).unwrap_or(true);
        if emptied {
            self.consumers.remove(&stream);
        }
        if stream.origin != self.id && emptied {
            self.send_msg(net, stream.origin, Message::ForwardOff { stream });
            let still_forwarding = self
                .consumers
                .iter()
                .any(|(s, m)| s.origin != self.id && !m.is_empty());
            if !still_forwarding {
                self.apply_event(net.now(), NodeEvent::ForwardOff);
            }
            if self.deferred_unsubs.remove(&stream) {
                if let Some(entry) = self.producers.get(&stream).copied() {
                    if entry.provider != self.id {
                        self.send_msg(net, entry.provider, Message::Unsubscribe { stream });
                        self.producers.remove(&stream);
                    }
                }
            }
        }
    }

    // ------------------------------------------------------------------
    // Sources
    // ------------------------------------------------------------------

    fn on_sensor_tick(&mut self, net: &mut Net, sensor: usize, k: u64) {
        let Some(agent) = self.sensors.get(sensor) else { return };
        let t = net.now();
        let stream = agent.stream;
        let sample = agent.config.next_sample(stream, t, agent.next_seq);
        let next_t = agent.config.sample_time(k + 1);
        let stop = agent.config.stop;
        if let Some(sample) = sample {
            self.sensors[sensor].next_seq += 1;
            self.publish(net, stream, sample);
        }
        if next_t < stop {
            net.schedule_at(self.id, next_t, TimerKind::SensorTick { sensor, k: k + 1 });
        }
    }

    fn on_gui_command(&mut self, net: &mut Net, index: usize) {
        let now = net.now();
        if !self.gui_active {
            self.gui_active = true;
            self.recompute_producer_level(net);
        }
        let Some(gui) = self.gui.as_mut() else { return };
        let stream = gui.stream;
        let seq = gui.next_seq;
        let Some(sample) = gui.source.apply(index, stream, seq) else { return };
        gui.next_seq += 1;
        self.last_gui_cmd = now;
        self.publish(net, stream, sample);
        net.schedule(
            self.id,
            SimTime::from_ms(self.protocol.gui_idle_timeout_ms),
            TimerKind::GuiIdleCheck,
        );
    }

    fn recompute_producer_level(&mut self, net: &mut Net) {
        let level = self.sensors.iter().any(|s| s.active) || self.gui_active;
        if level != self.producer_level {
            self.set_producer_level(net, level);
        }
    }

    // ------------------------------------------------------------------
    // Probes and bookkeeping
    // ------------------------------------------------------------------

    fn on_ping_cycle(&mut self, net: &mut Net) {
        let peers: BTreeSet<NodeId> =
            self.consumers.values().flat_map(|m| m.keys().copied()).collect();
        if peers.is_empty() {
            self.ping_armed = false;
            return;
        }
        for p in peers {
            self.ping_now(net, p);
        }
        net.schedule(self.id, SimTime::from_ms(self.qos.ping_period_ms), TimerKind::PingCycle);
    }

    fn ping_now(&mut self, net: &mut Net, peer: NodeId) {
        let nonce = self.next_nonce;
        self.next_nonce += 1;
        self.outstanding_pings.insert(nonce, (peer, net.now()));
        self.send_msg(net, peer, Message::Ping { nonce });
    }

    fn arm_ping_cycle(&mut self, net: &mut Net) {
        if !self.ping_armed {
            self.ping_armed = true;
            net.schedule(self.id, SimTime::from_ms(self.qos.ping_period_ms), TimerKind::PingCycle);
        }
    }

    fn learn_streams(&mut self, net: &mut Net, streams: Vec<StreamId>) {
        for s in streams {
            self.known_streams.insert(s);
        }
        let ready: Vec<StreamId> =
            self.deferred_subs.iter().filter(|s| self.known_streams.contains(*s)).copied().collect();
        for s in ready {
            self.deferred_subs.remove(&s);
            self.subscribe(net, s.origin, s);
        }
    }

    /// Runs one primitive event through the mode machine, recording applied
    /// transitions and keeping the forwarder self-listing in sync.
    fn apply_event(&mut self, t: SimTime, event: NodeEvent) -> bool {
        let was = self.state;
        let r = state::step(was, event);
        if !r.applied {
            return false;
        }
        self.state = r.next;
        self.transitions.push(TransitionRecord {
            t,
            from: was,
            event,
            to: r.next,
            action: r.server_action,
        });
        // An active forwarder lists itself as provider of its own streams.
        if r.next == NodeState::ActiveForwarder && was != NodeState::ActiveForwarder {
            for s in self.local_streams.iter().copied().collect::<Vec<_>>() {
                self.producers.insert(s, ProviderEntry { provider: self.id, origin: self.id });
            }
        }
        if was == NodeState::ActiveForwarder && r.next != NodeState::ActiveForwarder {
            let own: Vec<StreamId> = self
                .producers
                .iter()
                .filter(|(s, e)| e.provider == self.id && s.origin == self.id)
                .map(|(s, _)| *s)
                .collect();
            for s in own {
                self.producers.remove(&s);
            }
        }
        true
    }

    fn send_msg(&self, net: &mut Net, to: NodeId, msg: Message) {
        let size = msg.wire_size();
        net.send(self.id, to, msg, size);
    }

    fn broadcast_msg(&self, net: &mut Net, msg: Message) {
        let size = msg.wire_size();
        net.broadcast(self.id, msg, size);
    }
}
