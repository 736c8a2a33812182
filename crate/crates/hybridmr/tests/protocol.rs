//! End-to-end protocol behavior on small, hand-built environments:
//! join/advertise bootstrap, admission and delegation, the data plane with
//! forwarding, and unsubscription paths.

use hybridmr::agent::{Directive, NodeSetup, ProtocolConfig, SensorSetup, SubscriptionDecision};
use hybridmr::message::RejectReason;
use hybridmr::netsim::LinkModel;
use hybridmr::qos::QosConfig;
use hybridmr::scene::ObjectId;
use hybridmr::sensor::{Plane, PoseSample, SensorConfig, Trajectory};
use hybridmr::state::{server_active, NodeState};
use hybridmr::time::SimTime;
use hybridmr::types::{Labels, NodeId, Pose, StreamId};
use hybridmr::Simulation;
use std::collections::BTreeMap;

fn ms(v: f64) -> SimTime {
    SimTime::from_ms(v)
}

fn circle(start_ms: f64, stop_ms: f64, rate_hz: f64) -> SensorConfig {
    SensorConfig {
        rate_hz,
        trajectory: Trajectory::Circle { radius_m: 0.5, period_s: 10.0, plane: Plane::Xy },
        start: ms(start_ms),
        stop: ms(stop_ms),
    }
}

/// Builds small environments for protocol tests.
struct EnvBuilder {
    labels: Vec<String>,
    qos: Vec<QosConfig>,
    protocol: Vec<ProtocolConfig>,
    sensors: Vec<Vec<(StreamId, SensorConfig)>>,
    links: LinkModel,
}

impl EnvBuilder {
    fn new() -> Self {
        EnvBuilder {
            labels: Vec::new(),
            qos: Vec::new(),
            protocol: Vec::new(),
            sensors: Vec::new(),
            links: LinkModel::default(),
        }
    }

    fn node(&mut self, label: &str) -> NodeId {
        let id = NodeId(self.labels.len() as u32);
        self.labels.push(label.to_string());
        self.qos.push(QosConfig::default());
        self.protocol.push(ProtocolConfig::default());
        self.sensors.push(Vec::new());
        id
    }

    fn cap(&mut self, id: NodeId, max_consumers: usize) -> &mut Self {
        self.qos[id.index()].max_consumers = max_consumers;
        self
    }

    fn retries(&mut self, id: NodeId, max_retries: u32) -> &mut Self {
        self.protocol[id.index()].max_retries = max_retries;
        self
    }

    fn sensor(&mut self, id: NodeId, config: SensorConfig) -> StreamId {
        let stream = StreamId::sensor(id, self.sensors[id.index()].len() as u8);
        self.sensors[id.index()].push((stream, config));
        stream
    }

    fn link(&mut self, from: NodeId, to: NodeId, latency_ms: f64) -> &mut Self {
        self.links.overrides.insert((from, to), latency_ms);
        self
    }

    fn build(self) -> Simulation {
        let labels = Labels::new(self.labels.clone());
        let mut bindings: BTreeMap<StreamId, ObjectId> = BTreeMap::new();
        for per_node in &self.sensors {
            for (stream, _) in per_node {
                bindings.insert(*stream, ObjectId(labels.stream(*stream)));
            }
        }
        let setups: Vec<NodeSetup> = (0..self.labels.len())
            .map(|i| NodeSetup {
                id: NodeId(i as u32),
                qos: self.qos[i].clone(),
                protocol: self.protocol[i].clone(),
                sensors: self.sensors[i]
                    .iter()
                    .map(|(stream, config)| SensorSetup { stream: *stream, config: config.clone() })
                    .collect(),
                gui: None,
                bindings: bindings.clone(),
            })
            .collect();
        Simulation::new(setups, self.links, 7, labels, true)
    }
}

fn attach_all(sim: &mut Simulation) {
    for id in sim.actor_ids() {
        sim.activate(id);
    }
}

fn sample_for(stream: StreamId, t_ms: f64, seq: u64, hop: u8) -> PoseSample {
    PoseSample { stream, seq, origin_time: ms(t_ms), pose: Pose::IDENTITY, hop_count: hop }
}

// ----------------------------------------------------------------------
// Join bootstrap
// ----------------------------------------------------------------------

#[test]
fn join_collects_all_live_peers() {
    let mut b = EnvBuilder::new();
    let n0 = b.node("N0");
    let peers = [b.node("N1"), b.node("N2"), b.node("N3")];
    let mut sim = b.build();
    for (i, p) in peers.iter().enumerate() {
        sim.schedule_directive(ms(i as f64), *p, Directive::Join);
    }
    sim.schedule_directive(ms(200.0), n0, Directive::Join);
    sim.run_until(ms(400.0));
    // Oracle: every node alive at query time responds.
    let alive_at_query = 3;
    assert!(sim.actor(n0).join_complete());
    assert_eq!(sim.actor(n0).peers().len(), alive_at_query);
}

#[test]
fn join_on_empty_network_is_a_valid_bootstrap() {
    let mut b = EnvBuilder::new();
    let n0 = b.node("N0");
    let mut sim = b.build();
    sim.schedule_directive(ms(0.0), n0, Directive::Join);
    sim.run_until(ms(300.0));
    assert!(sim.actor(n0).join_complete());
    assert!(sim.actor(n0).peers().is_empty());
}

#[test]
fn join_response_carries_known_streams() {
    let mut b = EnvBuilder::new();
    let n1 = b.node("N1");
    let n2 = b.node("N2");
    let s = b.sensor(n1, circle(5000.0, 6000.0, 60.0));
    let mut sim = b.build();
    sim.schedule_directive(ms(0.0), n1, Directive::Join);
    sim.schedule_directive(ms(50.0), n2, Directive::Join);
    sim.run_until(ms(300.0));
    // The sensor has not produced yet; the stream is still learned via the
    // join response.
    assert!(sim.actor(n2).known_streams().contains(&s));
}

// ----------------------------------------------------------------------
// Advertisement
// ----------------------------------------------------------------------

#[test]
fn rising_edge_advertises_to_all_peers() {
    let mut b = EnvBuilder::new();
    let n1 = b.node("N1");
    for label in ["N2", "N3", "N4", "N5"] {
        b.node(label);
    }
    b.sensor(n1, circle(100.0, 900.0, 60.0));
    let mut sim = b.build();
    attach_all(&mut sim);
    sim.run_until(ms(200.0));
    let advertises = sim
        .trace()
        .iter()
        .filter(|r| matches!(r, hybridmr::metrics::TraceRecord::Deliver { msg, .. } if msg.kind == "Advertise"))
        .count();
    assert_eq!(advertises, 4, "broadcast fan-out is n-1");
}

#[test]
fn advertising_a_foreign_stream_is_rejected() {
    let mut b = EnvBuilder::new();
    let n1 = b.node("N1");
    let n3 = b.node("N3");
    let foreign = b.sensor(n3, circle(100.0, 900.0, 60.0));
    let mut sim = b.build();
    attach_all(&mut sim);
    let result = sim.with_actor(n1, |a, net| a.advertise(net, foreign));
    assert!(result.is_err());
}

#[test]
fn duplicate_advertise_is_rebroadcast_without_table_change() {
    let mut b = EnvBuilder::new();
    let n1 = b.node("N1");
    let n2 = b.node("N2");
    let s = b.sensor(n1, circle(5000.0, 6000.0, 60.0));
    let mut sim = b.build();
    attach_all(&mut sim);
    sim.with_actor(n1, |a, net| a.advertise(net, s).unwrap());
    sim.run_until(ms(10.0));
    let known_after_first = sim.actor(n2).known_streams().clone();
    sim.with_actor(n1, |a, net| a.advertise(net, s).unwrap());
    sim.run_until(ms(20.0));
    assert_eq!(sim.actor(n2).known_streams(), &known_after_first);
    let advertises = sim
        .trace()
        .iter()
        .filter(|r| matches!(r, hybridmr::metrics::TraceRecord::Deliver { msg, .. } if msg.kind == "Advertise"))
        .count();
    assert_eq!(advertises, 2, "both broadcasts are sent");
}

// ----------------------------------------------------------------------
// Admission, delegation, rejection
// ----------------------------------------------------------------------

#[test]
fn subscribe_with_capacity_is_accepted_directly() {
    let mut b = EnvBuilder::new();
    let n1 = b.node("N1");
    let n2 = b.node("N2");
    let n3 = b.node("N3");
    let s = b.sensor(n1, circle(100.0, 5000.0, 60.0));
    b.cap(n1, 4);
    let mut sim = b.build();
    attach_all(&mut sim);
    sim.with_actor(n2, |a, net| a.subscribe(net, n1, s));
    sim.run_until(ms(50.0));
    // Admission oracle: one existing consumer, capacity four.
    assert!(sim.actor(n1).consumer_count() < 4);
    sim.with_actor(n3, |a, net| a.subscribe(net, n1, s));
    sim.run_until(ms(100.0));
    let decision = sim.actor(n1).decisions().last().unwrap();
    assert_eq!(decision.requester, n3);
    assert_eq!(decision.decision, SubscriptionDecision::Accept);
    assert_eq!(
        sim.actor(n3).producers().get(&s).map(|e| e.provider),
        Some(n1),
        "direct accept records the origin as provider"
    );
}

#[test]
fn full_origin_redirects_to_its_direct_consumer() {
    let mut b = EnvBuilder::new();
    let n1 = b.node("N1");
    let n2 = b.node("N2");
    let n3 = b.node("N3");
    let s = b.sensor(n1, circle(100.0, 5000.0, 60.0));
    b.cap(n1, 1);
    let mut sim = b.build();
    attach_all(&mut sim);
    sim.with_actor(n2, |a, net| a.subscribe(net, n1, s));
    sim.run_until(ms(50.0));
    // Brute-force oracle over this topology: the candidate set is exactly
    // {N2}, N2 has spare capacity, so N2 is the unique possible target.
    let consumers: Vec<NodeId> =
        sim.actor(n1).consumers().get(&s).unwrap().keys().copied().collect();
    assert_eq!(consumers, vec![n2]);
    sim.with_actor(n3, |a, net| a.subscribe(net, n1, s));
    sim.run_until(ms(100.0));
    let decision = sim.actor(n1).decisions().last().unwrap();
    assert_eq!(decision.requester, n3);
    assert_eq!(decision.decision, SubscriptionDecision::Redirect(n2));
    // The requester followed the redirect and now consumes via N2.
    assert_eq!(sim.actor(n3).producers().get(&s).map(|e| e.provider), Some(n2));
    assert_eq!(sim.actor(n3).producers().get(&s).map(|e| e.origin), Some(n1));
    // The origin recorded the delegation.
    assert!(sim.actor(n1).delegations().get(&s).unwrap().get(&n2).unwrap().contains(&n3));
}

#[test]
fn exhausted_candidates_mean_reject() {
    let mut b = EnvBuilder::new();
    let n1 = b.node("N1");
    let n2 = b.node("N2");
    let n3 = b.node("N3");
    let n4 = b.node("N4");
    let s = b.sensor(n1, circle(100.0, 9000.0, 60.0));
    b.cap(n1, 1);
    b.cap(n2, 1);
    b.retries(n4, 0);
    let mut sim = b.build();
    attach_all(&mut sim);
    sim.with_actor(n2, |a, net| a.subscribe(net, n1, s));
    sim.run_until(ms(500.0));
    sim.with_actor(n3, |a, net| a.subscribe(net, n1, s));
    sim.run_until(ms(2000.0)); // N2 admits N3; a ping cycle refreshes gossip
    assert_eq!(sim.actor(n2).consumer_count(), 1);
    // Exhaustive scan oracle: the only candidate (N2) is at capacity.
    sim.with_actor(n4, |a, net| a.subscribe(net, n1, s));
    sim.run_until(ms(3000.0));
    let decision = sim.actor(n1).decisions().last().unwrap();
    assert_eq!(decision.requester, n4);
    assert_eq!(decision.decision, SubscriptionDecision::Reject(RejectReason::NoCandidate));
    // max_retries = 0: the failure is recorded and the node stays out.
    assert_eq!(sim.actor(n4).counters().failed_subscribes, 1);
    assert!(sim.actor(n4).producers().get(&s).is_none());
    for id in sim.actor_ids() {
        assert!(
            !sim.actor(id).consumers().get(&s).map(|m| m.contains_key(&n4)).unwrap_or(false),
            "rejected node must appear in no consumers list"
        );
    }
}

#[test]
fn subscribe_for_unknown_stream_rejects_with_distinct_reason() {
    let mut b = EnvBuilder::new();
    let n1 = b.node("N1");
    let n2 = b.node("N2");
    let n9 = b.node("N9");
    let ghost = StreamId::sensor(n9, 0); // declared by nobody
    let mut sim = b.build();
    attach_all(&mut sim);
    let decision = sim.with_actor(n1, |a, net| a.handle_subscribe(net, n2, ghost));
    assert_eq!(decision, SubscriptionDecision::Reject(RejectReason::UnknownStream));
}

#[test]
fn depth_two_consumer_refuses_to_deepen_the_path() {
    // N3 consumes via forwarder N2 (depth 2); a subscribe at N3 must not
    // create a third hop.
    let mut b = EnvBuilder::new();
    let n1 = b.node("N1");
    let n2 = b.node("N2");
    let n3 = b.node("N3");
    let n4 = b.node("N4");
    let s = b.sensor(n1, circle(100.0, 9000.0, 60.0));
    b.cap(n1, 1);
    let mut sim = b.build();
    attach_all(&mut sim);
    sim.with_actor(n2, |a, net| a.subscribe(net, n1, s));
    sim.run_until(ms(500.0));
    sim.with_actor(n3, |a, net| a.subscribe(net, n1, s));
    sim.run_until(ms(1000.0));
    assert_eq!(sim.actor(n3).producers().get(&s).map(|e| e.provider), Some(n2));
    let decision = sim.with_actor(n3, |a, net| a.handle_subscribe(net, n4, s));
    assert_eq!(decision, SubscriptionDecision::Reject(RejectReason::NoCandidate));
}

#[test]
fn stale_capacity_gossip_resolves_via_negative_ack() {
    let mut b = EnvBuilder::new();
    let n0 = b.node("N0");
    let n1 = b.node("N1");
    let n6 = b.node("N6");
    let n7 = b.node("N7");
    let s = b.sensor(n0, circle(100.0, 9000.0, 60.0));
    b.cap(n0, 1);
    b.cap(n1, 1);
    let mut sim = b.build();
    attach_all(&mut sim);
    sim.with_actor(n1, |a, net| a.subscribe(net, n0, s));
    sim.run_until(ms(1500.0)); // gossip now says N1 has one free slot
    // N6 fills N1 directly; N0's cached view of N1 goes stale.
    sim.with_actor(n6, |a, net| a.subscribe(net, n1, s));
    sim.run_until(ms(1600.0));
    assert_eq!(sim.actor(n1).consumer_count(), 1);
    let decision = sim.with_actor(n0, |a, net| a.handle_subscribe(net, n7, s));
    assert_eq!(decision, SubscriptionDecision::Redirect(n1), "stale gossip still redirects");
    sim.run_until(ms(1700.0));
    assert_eq!(sim.actor(n1).counters().delegate_nacks, 1);
    // The origin fell back to a rejection and pruned the record.
    assert!(sim
        .actor(n0)
        .delegations()
        .get(&s)
        .and_then(|m| m.get(&n1))
        .map(|set| !set.contains(&n7))
        .unwrap_or(true));
    assert!(sim.actor(n7).producers().get(&s).is_none());
}

#[test]
fn delegation_crossing_an_unsubscribe_recovers_through_retry() {
    let mut b = EnvBuilder::new();
    let n0 = b.node("N0");
    let n1 = b.node("N1");
    let n2 = b.node("N2");
    let s = b.sensor(n0, circle(50.0, 9000.0, 60.0));
    b.cap(n0, 1);
    // N2's subscribe overtakes N1's unsubscribe on a faster link.
    b.link(n2, n0, 0.05);
    let mut sim = b.build();
    attach_all(&mut sim);
    sim.with_actor(n1, |a, net| a.subscribe(net, n0, s));
    sim.run_until(ms(1500.0));
    sim.with_actor(n1, |a, net| a.request_unsubscribe(net, s));
    sim.with_actor(n2, |a, net| a.subscribe(net, n0, s));
    sim.run_until(ms(3000.0));
    // The stale delegation was nacked (N1 no longer consumes), and N2's
    // retry landed directly on the freed origin.
    assert_eq!(sim.actor(n1).counters().delegate_nacks, 1);
    assert_eq!(sim.actor(n2).producers().get(&s).map(|e| e.provider), Some(n0));
    assert!(sim.actor(n0).consumers().get(&s).unwrap().contains_key(&n2));
    assert!(sim.actor(n0).delegations().get(&s).is_none());
}

// ----------------------------------------------------------------------
// Delegated forwarder state changes
// ----------------------------------------------------------------------

#[test]
fn passive_consumer_becomes_passive_forwarder_when_delegated() {
    let mut b = EnvBuilder::new();
    let n1 = b.node("N1");
    let n2 = b.node("N2");
    let n3 = b.node("N3");
    let s = b.sensor(n1, circle(100.0, 9000.0, 60.0));
    b.cap(n1, 1);
    let mut sim = b.build();
    attach_all(&mut sim);
    sim.with_actor(n2, |a, net| a.subscribe(net, n1, s));
    sim.run_until(ms(500.0));
    assert_eq!(sim.actor(n2).state(), NodeState::Passive);
    sim.with_actor(n3, |a, net| a.subscribe(net, n1, s));
    sim.run_until(ms(1000.0));
    assert_eq!(sim.actor(n2).state(), NodeState::PassiveForwarder);
    assert!(server_active(sim.actor(n2).state()));
}

#[test]
fn active_node_becomes_active_forwarder_and_lists_itself() {
    let mut b = EnvBuilder::new();
    let n1 = b.node("N1");
    let n3 = b.node("N3");
    let n4 = b.node("N4");
    let s1 = b.sensor(n1, circle(100.0, 9000.0, 60.0));
    let s3 = b.sensor(n3, circle(100.0, 9000.0, 60.0));
    b.cap(n1, 1);
    let mut sim = b.build();
    attach_all(&mut sim);
    sim.with_actor(n3, |a, net| a.subscribe(net, n1, s1));
    sim.run_until(ms(500.0));
    assert_eq!(sim.actor(n3).state(), NodeState::Active, "own sensor is producing");
    sim.with_actor(n4, |a, net| a.subscribe(net, n1, s1));
    sim.run_until(ms(1000.0));
    assert_eq!(sim.actor(n3).state(), NodeState::ActiveForwarder);
    // An active forwarder adds itself to its producers list.
    assert_eq!(
        sim.actor(n3).producers().get(&s3).map(|e| e.provider),
        Some(n3),
        "self-listing for the locally produced stream"
    );
}

// ----------------------------------------------------------------------
// Producer edges and publishing
// ----------------------------------------------------------------------

#[test]
fn rising_edge_turns_passive_node_active_and_advertises() {
    let mut b = EnvBuilder::new();
    let n1 = b.node("N1");
    let n2 = b.node("N2");
    b.sensor(n1, circle(5000.0, 9000.0, 60.0));
    let mut sim = b.build();
    attach_all(&mut sim);
    assert_eq!(sim.actor(n1).state(), NodeState::Passive);
    sim.with_actor(n1, |a, net| a.set_producer_level(net, true));
    assert_eq!(sim.actor(n1).state(), NodeState::Active);
    sim.run_until(ms(10.0));
    assert_eq!(sim.actor(n2).known_streams().len(), 1, "advertise reached the peer");
}

#[test]
fn falling_edge_on_active_forwarder_keeps_forwarding() {
    let mut b = EnvBuilder::new();
    let n1 = b.node("N1");
    let n2 = b.node("N2");
    let n3 = b.node("N3");
    let s1 = b.sensor(n1, circle(100.0, 2000.0, 60.0));
    b.sensor(n2, circle(100.0, 2000.0, 60.0));
    b.cap(n1, 1);
    let mut sim = b.build();
    attach_all(&mut sim);
    sim.with_actor(n2, |a, net| a.subscribe(net, n1, s1));
    sim.run_until(ms(500.0));
    sim.with_actor(n3, |a, net| a.subscribe(net, n1, s1));
    sim.run_until(ms(1500.0));
    assert_eq!(sim.actor(n2).state(), NodeState::ActiveForwarder);
    let n3_samples_before = sim.actor(n3).latency_samples().len();
    // Sensor stops at 2000: falling edge, but forwarding continues.
    sim.run_until(ms(2500.0));
    assert_eq!(sim.actor(n2).state(), NodeState::PassiveForwarder);
    sim.run_until(ms(3000.0));
    let n3_samples_after = sim.actor(n3).latency_samples().len();
    assert!(n3_samples_after >= n3_samples_before);
}

#[test]
fn duplicate_rising_edge_is_absorbed() {
    let mut b = EnvBuilder::new();
    let n1 = b.node("N1");
    b.sensor(n1, circle(5000.0, 9000.0, 60.0));
    let mut sim = b.build();
    attach_all(&mut sim);
    sim.with_actor(n1, |a, net| a.set_producer_level(net, true));
    let transitions = sim.actor(n1).transitions().len();
    sim.with_actor(n1, |a, net| a.set_producer_level(net, true));
    assert_eq!(sim.actor(n1).state(), NodeState::Active);
    assert_eq!(sim.actor(n1).transitions().len(), transitions, "no new transition");
}

#[test]
fn publish_fans_out_to_each_consumer_after_local_apply() {
    let mut b = EnvBuilder::new();
    let n1 = b.node("N1");
    let n2 = b.node("N2");
    let n3 = b.node("N3");
    let s = b.sensor(n1, circle(5000.0, 9000.0, 60.0));
    let mut sim = b.build();
    attach_all(&mut sim);
    sim.with_actor(n2, |a, net| a.subscribe(net, n1, s));
    sim.with_actor(n3, |a, net| a.subscribe(net, n1, s));
    sim.run_until(ms(100.0));
    sim.with_actor(n1, |a, net| a.set_producer_level(net, true));
    let sample = sample_for(s, 100.0, 0, 0);
    sim.with_actor(n1, |a, net| a.publish(net, s, sample));
    sim.run_until(ms(200.0));
    let object = ObjectId("N1/sensor0".to_string());
    assert!(sim.actor(n1).scene().get(&object).is_some(), "local apply first");
    assert_eq!(sim.actor(n2).latency_samples().len(), 1);
    assert_eq!(sim.actor(n3).latency_samples().len(), 1);
}

#[test]
fn publish_with_no_consumers_is_local_only() {
    let mut b = EnvBuilder::new();
    let n1 = b.node("N1");
    b.node("N2");
    let s = b.sensor(n1, circle(5000.0, 9000.0, 60.0));
    let mut sim = b.build();
    attach_all(&mut sim);
    sim.with_actor(n1, |a, net| a.set_producer_level(net, true));
    sim.with_actor(n1, |a, net| a.publish(net, s, sample_for(s, 1.0, 0, 0)));
    sim.run_until(ms(100.0));
    let data = sim
        .trace()
        .iter()
        .filter(|r| matches!(r, hybridmr::metrics::TraceRecord::Deliver { msg, .. } if msg.kind == "Data"))
        .count();
    assert_eq!(data, 0);
    assert_eq!(sim.actor(n1).scene().len(), 1);
}

#[test]
fn publish_while_passive_is_dropped_and_counted() {
    let mut b = EnvBuilder::new();
    let n1 = b.node("N1");
    b.node("N2");
    let s = b.sensor(n1, circle(5000.0, 9000.0, 60.0));
    let mut sim = b.build();
    attach_all(&mut sim);
    assert_eq!(sim.actor(n1).state(), NodeState::Passive);
    sim.with_actor(n1, |a, net| a.publish(net, s, sample_for(s, 1.0, 0, 0)));
    assert_eq!(sim.actor(n1).counters().publish_inactive_drops, 1);
    assert!(sim.actor(n1).scene().is_empty(), "dropped publishes do not touch the scene");
}

// ----------------------------------------------------------------------
// Data plane
// ----------------------------------------------------------------------

#[test]
fn forwarder_resends_with_incremented_hop() {
    let mut b = EnvBuilder::new();
    let n1 = b.node("N1");
    let n2 = b.node("N2");
    let n3 = b.node("N3");
    let s = b.sensor(n1, circle(100.0, 3000.0, 60.0));
    b.cap(n1, 1);
    let mut sim = b.build();
    attach_all(&mut sim);
    sim.with_actor(n2, |a, net| a.subscribe(net, n1, s));
    sim.run_until(ms(500.0));
    sim.with_actor(n3, |a, net| a.subscribe(net, n1, s));
    sim.run_until(ms(3000.0));
    // The forwarder applied at hop 1, the downstream consumer at hop 2,
    // with origin sequence numbers preserved.
    assert!(sim.actor(n2).latency_samples().iter().all(|l| l.hop == 1));
    let n3_hops: Vec<u8> = sim.actor(n3).latency_samples().iter().map(|l| l.hop).collect();
    assert!(!n3_hops.is_empty());
    assert!(n3_hops.iter().all(|h| *h == 2));
    let n1_last = sim.actor(n1).last_published(s).unwrap().seq;
    let obj = ObjectId("N1/sensor0".to_string());
    assert_eq!(sim.actor(n3).scene().get(&obj).unwrap().last_seq, n1_last);
}

#[test]
fn plain_consumer_does_not_resend() {
    let mut b = EnvBuilder::new();
    let n1 = b.node("N1");
    let n2 = b.node("N2");
    let s = b.sensor(n1, circle(100.0, 1000.0, 30.0));
    let mut sim = b.build();
    attach_all(&mut sim);
    sim.with_actor(n2, |a, net| a.subscribe(net, n1, s));
    sim.run_until(ms(2000.0));
    let resent = sim
        .trace()
        .iter()
        .filter(|r| {
            matches!(r, hybridmr::metrics::TraceRecord::Deliver { from, msg, .. }
                if msg.kind == "Data" && from == "N2")
        })
        .count();
    assert_eq!(resent, 0);
}

#[test]
fn hop_limit_suppresses_resend_and_counts_violation() {
    let mut b = EnvBuilder::new();
    let n0 = b.node("N0");
    let n1 = b.node("N1");
    let n2 = b.node("N2");
    // Sensor stops at 900 so the injected sample is the newest thereafter.
    let s = b.sensor(n0, circle(100.0, 900.0, 60.0));
    b.cap(n0, 1);
    let mut sim = b.build();
    attach_all(&mut sim);
    sim.with_actor(n1, |a, net| a.subscribe(net, n0, s));
    sim.run_until(ms(500.0));
    sim.with_actor(n2, |a, net| a.subscribe(net, n0, s));
    sim.run_until(ms(1000.0));
    // N1 forwards to N2. A hop-2 sample arriving at N1 must be applied
    // locally but never re-sent.
    sim.with_actor(n1, |a, net| {
        let sample = sample_for(s, 999.5, 100_000, 2);
        a.on_data(net, n0, sample);
    });
    sim.run_until(ms(1500.0));
    assert_eq!(sim.actor(n1).counters().hop_violations, 1);
    let obj = ObjectId("N0/sensor0".to_string());
    assert_eq!(sim.actor(n1).scene().get(&obj).unwrap().last_seq, 100_000, "applied locally");
    // The suppressed sample never reached N2.
    assert_ne!(sim.actor(n2).scene().get(&obj).map(|o| o.last_seq), Some(100_000));
}

#[test]
fn data_for_unsubscribed_stream_is_dropped_and_counted() {
    let mut b = EnvBuilder::new();
    let n1 = b.node("N1");
    let n2 = b.node("N2");
    let s = b.sensor(n1, circle(100.0, 1000.0, 60.0));
    let mut sim = b.build();
    attach_all(&mut sim);
    sim.with_actor(n2, |a, net| {
        a.on_data(net, n1, sample_for(s, 50.0, 0, 1));
    });
    assert_eq!(sim.actor(n2).counters().stale_route_drops, 1);
    assert!(sim.actor(n2).scene().is_empty());
}

// ----------------------------------------------------------------------
// Unsubscription
// ----------------------------------------------------------------------

#[test]
fn passive_forwarder_losing_sole_consumer_returns_to_passive() {
    let mut b = EnvBuilder::new();
    let n1 = b.node("N1");
    let n2 = b.node("N2");
    let n3 = b.node("N3");
    let s = b.sensor(n1, circle(100.0, 9000.0, 60.0));
    b.cap(n1, 1);
    let mut sim = b.build();
    attach_all(&mut sim);
    sim.with_actor(n2, |a, net| a.subscribe(net, n1, s));
    sim.run_until(ms(500.0));
    sim.with_actor(n3, |a, net| a.subscribe(net, n1, s));
    sim.run_until(ms(1000.0));
    assert_eq!(sim.actor(n2).state(), NodeState::PassiveForwarder);
    sim.with_actor(n3, |a, net| a.request_unsubscribe(net, s));
    sim.run_until(ms(1500.0));
    assert_eq!(sim.actor(n2).state(), NodeState::Passive);
    assert!(!server_active(sim.actor(n2).state()));
    // The origin pruned its delegation record on the forward-off notice.
    assert!(sim.actor(n1).delegations().get(&s).is_none());
}

#[test]
fn active_forwarder_losing_sole_delegated_consumer_returns_to_active() {
    let mut b = EnvBuilder::new();
    let n1 = b.node("N1");
    let n3 = b.node("N3");
    let n4 = b.node("N4");
    let s1 = b.sensor(n1, circle(100.0, 9000.0, 60.0));
    b.sensor(n3, circle(100.0, 9000.0, 60.0));
    b.cap(n1, 1);
    let mut sim = b.build();
    attach_all(&mut sim);
    sim.with_actor(n3, |a, net| a.subscribe(net, n1, s1));
    sim.run_until(ms(500.0));
    sim.with_actor(n4, |a, net| a.subscribe(net, n1, s1));
    sim.run_until(ms(1000.0));
    assert_eq!(sim.actor(n3).state(), NodeState::ActiveForwarder);
    sim.with_actor(n4, |a, net| a.request_unsubscribe(net, s1));
    sim.run_until(ms(1500.0));
    assert_eq!(sim.actor(n3).state(), NodeState::Active);
}

#[test]
fn provider_with_remaining_consumers_has_no_state_event() {
    let mut b = EnvBuilder::new();
    let n1 = b.node("N1");
    let n2 = b.node("N2");
    let n3 = b.node("N3");
    let s = b.sensor(n1, circle(100.0, 9000.0, 60.0));
    let mut sim = b.build();
    attach_all(&mut sim);
    sim.with_actor(n2, |a, net| a.subscribe(net, n1, s));
    sim.with_actor(n3, |a, net| a.subscribe(net, n1, s));
    sim.run_until(ms(1000.0));
    let transitions_before = sim.actor(n1).transitions().len();
    sim.with_actor(n2, |a, net| a.request_unsubscribe(net, s));
    sim.run_until(ms(1500.0));
    assert_eq!(sim.actor(n1).transitions().len(), transitions_before);
    assert!(sim.actor(n1).consumers().get(&s).unwrap().contains_key(&n3));
}

#[test]
fn unknown_unsubscribe_is_absorbed_and_counted() {
    let mut b = EnvBuilder::new();
    let n1 = b.node("N1");
    let n2 = b.node("N2");
    let s = b.sensor(n1, circle(100.0, 9000.0, 60.0));
    let mut sim = b.build();
    attach_all(&mut sim);
    sim.with_actor(n2, |a, net| a.request_unsubscribe(net, s));
    assert_eq!(sim.actor(n2).counters().stale_unsubscribes, 1);
}

#[test]
fn forwarder_defers_own_unsubscribe_until_downstream_leaves() {
    let mut b = EnvBuilder::new();
    let n1 = b.node("N1");
    let n2 = b.node("N2");
    let n3 = b.node("N3");
    let s = b.sensor(n1, circle(100.0, 9000.0, 60.0));
    b.cap(n1, 1);
    let mut sim = b.build();
    attach_all(&mut sim);
    sim.with_actor(n2, |a, net| a.subscribe(net, n1, s));
    sim.run_until(ms(500.0));
    sim.with_actor(n3, |a, net| a.subscribe(net, n1, s));
    sim.run_until(ms(1000.0));
    // N2 wants out but still serves N3: the withdrawal waits.
    sim.with_actor(n2, |a, net| a.request_unsubscribe(net, s));
    sim.run_until(ms(1500.0));
    assert!(sim.actor(n2).producers().get(&s).is_some(), "still consuming for downstream");
    sim.with_actor(n3, |a, net| a.request_unsubscribe(net, s));
    sim.run_until(ms(2000.0));
    assert!(sim.actor(n2).producers().get(&s).is_none(), "deferred withdrawal completed");
    assert!(sim.actor(n1).consumers().get(&s).is_none());
}

#[test]
fn leave_withdraws_subscriptions_and_detaches() {
    let mut b = EnvBuilder::new();
    let n1 = b.node("N1");
    let n2 = b.node("N2");
    let s = b.sensor(n1, circle(100.0, 9000.0, 60.0));
    let mut sim = b.build();
    attach_all(&mut sim);
    sim.with_actor(n2, |a, net| a.subscribe(net, n1, s));
    sim.run_until(ms(500.0));
    assert!(sim.actor(n1).consumers().get(&s).unwrap().contains_key(&n2));
    sim.schedule_directive(ms(600.0), n2, Directive::Leave);
    sim.run_until(ms(1000.0));
    assert!(sim.actor(n2).has_left());
    assert!(sim.actor(n1).consumers().get(&s).is_none(), "provider pruned the leaver");
    assert!(!sim.net().is_attached(n2));
}
