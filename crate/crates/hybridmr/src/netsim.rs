//! Deterministic discrete-event message transport.
//!
//! One global simulated clock, one priority queue of pending deliveries and
//! timers, total order on (time, global send sequence). Unicast latency is
//! additive: per-pair base latency plus a bandwidth-proportional
//! transmission term plus optional seeded uniform jitter. Broadcast is
//! modeled as n-1 independent unicasts. With jitter disabled, deliveries
//! between the same ordered pair are clamped to FIFO.
//!
//! The transport is reliable and non-duplicating: every send is delivered
//! exactly once or counted as dropped (unknown or detached endpoints).

use crate::time::SimTime;
use crate::types::NodeId;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

/// Latency model of the simulated network.
#[derive(Debug, Clone)]
pub struct LinkModel {
    /// Symmetric default one-way latency in simulated ms.
    pub default_latency_ms: f64,
    /// Per-directed-pair overrides of the base latency.
    pub overrides: BTreeMap<(NodeId, NodeId), f64>,
    /// Link bandwidth in bits per second.
    pub bandwidth_bps: u64,
    /// Optional uniform jitter of the given half-width, seeded per run.
    pub jitter: Option<Jitter>,
}

#[derive(Debug, Clone, Copy)]
pub struct Jitter {
    pub half_width_ms: f64,
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel {
            default_latency_ms: 0.2,
            overrides: BTreeMap::new(),
            bandwidth_bps: 100_000_000,
            jitter: None,
        }
    }
}

impl LinkModel {
    fn base_latency_ns(&self, from: NodeId, to: NodeId) -> u64 {
        let ms = self.overrides.get(&(from, to)).copied().unwrap_or(self.default_latency_ms);
        SimTime::from_ms(ms).as_ns()
    }

    /// Transmission delay of `size_bytes` at the configured bandwidth,
    /// exact integer nanoseconds.
    fn transmission_ns(&self, size_bytes: u32) -> u64 {
        ((size_bytes as u128 * 8 * 1_000_000_000) / self.bandwidth_bps as u128) as u64
    }
}

/// One in-flight message.
#[derive(Debug, Clone)]
pub struct Envelope<M> {
    pub payload: M,
    pub from: NodeId,
    pub to: NodeId,
    pub send_time: SimTime,
    pub deliver_time: SimTime,
    pub size_bytes: u32,
    /// Unique, assigned in send order; ties on deliver time resolve by it.
    pub global_seq: u64,
}

enum Item<M, T> {
    Deliver(Envelope<M>),
    Timer { node: NodeId, kind: T },
}

struct Queued<M, T> {
    at: SimTime,
    seq: u64,
    item: Item<M, T>,
}

impl<M, T> PartialEq for Queued<M, T> {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}
impl<M, T> Eq for Queued<M, T> {}
impl<M, T> PartialOrd for Queued<M, T> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<M, T> Ord for Queued<M, T> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// Receives the events the loop dispatches. Handlers run synchronously
/// inside the loop and may send, broadcast and schedule on the network they
/// are handed.
pub trait EventHandler<M, T> {
    fn on_deliver(&mut self, net: &mut Network<M, T>, env: Envelope<M>);
    fn on_timer(&mut self, net: &mut Network<M, T>, node: NodeId, timer: T);
}

/// Transport counters, exposed for conservation checks and reports.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NetCounters {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub timers_fired: u64,
    pub timers_discarded: u64,
}

/// The event queue, clock and transport in one.
pub struct Network<M, T> {
    now: SimTime,
    queue: BinaryHeap<Reverse<Queued<M, T>>>,
    attached: BTreeSet<NodeId>,
    links: LinkModel,
    next_seq: u64,
    counters: NetCounters,
    jitter_rng: Option<ChaCha8Rng>,
    /// Last scheduled delivery per directed pair; used for the jitter-free
    /// FIFO clamp.
    last_deliver: BTreeMap<(NodeId, NodeId), SimTime>,
}

impl<M: Clone, T> Network<M, T> {
    pub fn new(links: LinkModel, seed: u64) -> Self {
        let jitter_rng = links.jitter.map(|_| ChaCha8Rng::seed_from_u64(seed));
        Network {
            now: SimTime::ZERO,
            queue: BinaryHeap::new(),
            attached: BTreeSet::new(),
            links,
            next_seq: 0,
            counters: NetCounters::default(),
            jitter_rng,
            last_deliver: BTreeMap::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn counters(&self) -> NetCounters {
        self.counters
    }

    pub fn attach(&mut self, node: NodeId) {
        self.attached.insert(node);
    }

    pub fn detach(&mut self, node: NodeId) {
        self.attached.remove(&node);
    }

    pub fn is_attached(&self, node: NodeId) -> bool {
        self.attached.contains(&node)
    }

    pub fn attached_count(&self) -> usize {
        self.attached.len()
    }

    fn take_seq(&mut self) -> u64 {
        let s = self.next_seq;
        self.next_seq += 1;
        s
    }

    /// Enqueues one unicast. A send involving a detached endpoint is
    /// dropped and counted, never faulted.
    pub fn send(&mut self, from: NodeId, to: NodeId, payload: M, size_bytes: u32) {
        self.counters.sent += 1;
        if !self.is_attached(from) || !self.is_attached(to) {
            self.counters.dropped += 1;
            return;
        }
        let seq = self.take_seq();
        let base = self.links.base_latency_ns(from, to);
        let tx = self.links.transmission_ns(size_bytes);
        let mut latency_ns = (base + tx) as i128;
        if let (Some(jitter), Some(rng)) = (self.links.jitter, self.jitter_rng.as_mut()) {
            let half = SimTime::from_ms(jitter.half_width_ms).as_ns() as i128;
            if half > 0 {
                latency_ns += rng.gen_range(-half..=half);
            }
        }
        let latency_ns = latency_ns.max(0) as u64;
        let mut deliver_time = self.now + SimTime::from_ns(latency_ns);
        if self.links.jitter.is_none() {
            if let Some(prev) = self.last_deliver.get(&(from, to)) {
                deliver_time = deliver_time.max(*prev);
            }
            self.last_deliver.insert((from, to), deliver_time);
        }
        let env = Envelope {
            payload,
            from,
            to,
            send_time: self.now,
            deliver_time,
            size_bytes,
            global_seq: seq,
        };
        self.queue.push(Reverse(Queued { at: deliver_time, seq, item: Item::Deliver(env) }));
    }

    /// One unicast to every attached node except the sender; per-link
    /// latency applies independently. Returns the number of envelopes sent.
    pub fn broadcast(&mut self, from: NodeId, payload: M, size_bytes: u32) -> usize {
        if !self.is_attached(from) {
            self.counters.sent += 1;
            self.counters.dropped += 1;
            return 0;
        }
        let recipients: Vec<NodeId> =
            self.attached.iter().copied().filter(|n| *n != from).collect();
        for to in &recipients {
            self.send(from, *to, payload.clone(), size_bytes);
        }
        recipients.len()
    }

    /// Fires `kind` at `node` after `delay`. Timers are local to a node and
    /// fire regardless of attachment.
    pub fn schedule(&mut self, node: NodeId, delay: SimTime, kind: T) {
        let at = self.now + delay;
        self.schedule_at(node, at, kind);
    }

    pub fn schedule_at(&mut self, node: NodeId, at: SimTime, kind: T) {
        debug_assert!(at >= self.now, "cannot schedule into the past");
        let seq = self.take_seq();
        self.queue.push(Reverse(Queued { at, seq, item: Item::Timer { node, kind } }));
    }

    /// Delivers every envelope and fires every timer with time <= `t_end`,
    /// in ascending (time, sequence) order, invoking the handler
    /// synchronously for each. Returns the number of events processed.
    pub fn run_until(&mut self, t_end: SimTime, handler: &mut impl EventHandler<M, T>) -> u64 {
        let mut processed = 0;
        loop {
            match self.queue.peek() {
                Some(Reverse(q)) if q.at <= t_end => {}
                _ => break,
            }
            let Reverse(q) = self.queue.pop().expect("peeked");
            self.now = q.at;
            match q.item {
                Item::Deliver(env) => {
                    if self.is_attached(env.to) {
                        self.counters.delivered += 1;
                        processed += 1;
                        handler.on_deliver(self, env);
                    } else {
                        self.counters.dropped += 1;
                    }
                }
                Item::Timer { node, kind } => {
                    self.counters.timers_fired += 1;
                    processed += 1;
                    handler.on_timer(self, node, kind);
                }
            }
        }
        self.now = self.now.max(t_end);
        processed
    }

    /// Settle drain: delivers remaining messages up to `horizon` while
    /// discarding timers in that window, so in-flight data can land without
    /// generating new samples. Used for quiescence checks past the nominal
    /// end of a run.
    pub fn drain_messages_until(
        &mut self,
        horizon: SimTime,
        handler: &mut impl EventHandler<M, T>,
    ) -> u64 {
        let mut processed = 0;
        loop {
            match self.queue.peek() {
                Some(Reverse(q)) if q.at <= horizon => {}
                _ => break,
            }
            let Reverse(q) = self.queue.pop().expect("peeked");
            self.now = q.at;
            match q.item {
                Item::Deliver(env) => {
                    if self.is_attached(env.to) {
                        self.counters.delivered += 1;
                        processed += 1;
                        handler.on_deliver(self, env);
                    } else {
                        self.counters.dropped += 1;
                    }
                }
                Item::Timer { .. } => {
                    self.counters.timers_discarded += 1;
                }
            }
        }
        self.now = self.now.max(horizon);
        processed
    }

    /// Number of message deliveries still queued.
    pub fn pending_messages(&self) -> usize {
        self.queue.iter().filter(|Reverse(q)| matches!(q.item, Item::Deliver(_))).count()
    }

    /// Number of queued deliveries whose payload matches the predicate.
    pub fn pending_matching(&self, mut pred: impl FnMut(&M) -> bool) -> usize {
        self.queue
            .iter()
            .filter(|Reverse(q)| match &q.item {
                Item::Deliver(env) => pred(&env.payload),
                Item::Timer { .. } => false,
            })
            .count()
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n(i: u32) -> NodeId {
        NodeId(i)
    }

    /// Collects deliveries and timer firings in processing order.
    #[derive(Default)]
    struct Recorder {
        deliveries: Vec<(SimTime, NodeId, NodeId, u64, &'static str)>,
        timers: Vec<(SimTime, NodeId, u32)>,
    }

    impl EventHandler<&'static str, u32> for Recorder {
        fn on_deliver(&mut self, net: &mut Network<&'static str, u32>, env: Envelope<&'static str>) {
            self.deliveries.push((net.now(), env.from, env.to, env.global_seq, env.payload));
        }
        fn on_timer(&mut self, net: &mut Network<&'static str, u32>, node: NodeId, timer: u32) {
            self.timers.push((net.now(), node, timer));
        }
    }

    fn lan() -> LinkModel {
        LinkModel::default()
    }

    fn net_with(nodes: u32) -> Network<&'static str, u32> {
        let mut net = Network::new(lan(), 7);
        for i in 0..nodes {
            net.attach(n(i));
        }
        net
    }

    #[test]
    fn additive_latency_for_empty_payload() {
        // base 0.2 ms, 0 bytes, sent at t=1.0 -> delivered at t=1.2.
        let mut net = net_with(2);
        let mut rec = Recorder::default();
        net.schedule_at(n(0), SimTime::from_ms(1.0), 0);
        struct SendAtTimer;
        impl EventHandler<&'static str, u32> for SendAtTimer {
            fn on_deliver(&mut self, _: &mut Network<&'static str, u32>, _: Envelope<&'static str>) {}
            fn on_timer(&mut self, net: &mut Network<&'static str, u32>, node: NodeId, _: u32) {
                net.send(node, NodeId(1), "m", 0);
            }
        }
        net.run_until(SimTime::from_ms(1.0), &mut SendAtTimer);
        net.run_until(SimTime::from_ms(10.0), &mut rec);
        assert_eq!(rec.deliveries.len(), 1);
        assert_eq!(rec.deliveries[0].0, SimTime::from_ms(1.2));
    }

    #[test]
    fn transmission_term_is_exact() {
        // 64 bytes at 100 Mbps: 64*8/1e8 s = 5.12 us.
        let links = lan();
        assert_eq!(links.transmission_ns(64), 5_120);
        let mut net = net_with(2);
        net.send(n(0), n(1), "m", 64);
        let mut rec = Recorder::default();
        net.run_until(SimTime::from_ms(1.0), &mut rec);
        assert_eq!(rec.deliveries[0].0.as_ns(), 200_000 + 5_120);
    }

    #[test]
    fn same_inputs_same_delivery_time() {
        let run = || {
            let mut net = net_with(2);
            net.send(n(0), n(1), "m", 16);
            let mut rec = Recorder::default();
            net.run_until(SimTime::from_ms(5.0), &mut rec);
            rec.deliveries[0].0
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn broadcast_fans_out_to_all_but_sender() {
        let mut net = net_with(5);
        assert_eq!(net.broadcast(n(0), "hello", 16), 4);
        let mut rec = Recorder::default();
        net.run_until(SimTime::from_ms(5.0), &mut rec);
        assert_eq!(rec.deliveries.len(), 4);
        let senders: Vec<NodeId> = rec.deliveries.iter().map(|d| d.1).collect();
        assert!(senders.iter().all(|s| *s == n(0)));
    }

    #[test]
    fn broadcast_alone_sends_nothing() {
        let mut net = net_with(1);
        assert_eq!(net.broadcast(n(0), "hello", 16), 0);
    }

    #[test]
    fn broadcast_respects_per_link_latency() {
        let mut links = lan();
        links.overrides.insert((n(0), n(1)), 0.3);
        links.overrides.insert((n(0), n(2)), 0.7);
        let mut net: Network<&'static str, u32> = Network::new(links, 0);
        for i in 0..3 {
            net.attach(n(i));
        }
        net.broadcast(n(0), "x", 0);
        let mut rec = Recorder::default();
        net.run_until(SimTime::from_ms(5.0), &mut rec);
        // Per-link arithmetic: 0.3 ms and 0.7 ms one-way.
        let times: BTreeMap<NodeId, SimTime> =
            rec.deliveries.iter().map(|d| (d.2, d.0)).collect();
        assert_eq!(times[&n(1)], SimTime::from_ms(0.3));
        assert_eq!(times[&n(2)], SimTime::from_ms(0.7));
    }

    #[test]
    fn empty_queue_processes_zero_events() {
        let mut net = net_with(2);
        let mut rec = Recorder::default();
        assert_eq!(net.run_until(SimTime::from_ms(100.0), &mut rec), 0);
        assert_eq!(net.now(), SimTime::from_ms(100.0));
    }

    #[test]
    fn equal_time_deliveries_follow_send_order() {
        let mut net = net_with(3);
        // Same size, same latency, sent back-to-back at t=0: equal deliver
        // times, processed in global_seq order.
        net.send(n(0), n(1), "first", 8);
        net.send(n(0), n(1), "second", 8);
        net.send(n(2), n(1), "third", 8);
        let mut rec = Recorder::default();
        assert_eq!(net.run_until(SimTime::from_ms(1.0), &mut rec), 3);
        let payloads: Vec<&str> = rec.deliveries.iter().map(|d| d.4).collect();
        assert_eq!(payloads, vec!["first", "second", "third"]);
    }

    #[test]
    fn unknown_destination_dropped_and_counted() {
        let mut net = net_with(1);
        net.send(n(0), n(9), "lost", 8);
        assert_eq!(net.counters().dropped, 1);
        assert_eq!(net.counters().sent, 1);
        assert_eq!(net.pending_messages(), 0);
    }

    #[test]
    fn detached_at_delivery_counts_as_drop() {
        let mut net = net_with(2);
        net.send(n(0), n(1), "late", 8);
        net.detach(n(1));
        let mut rec = Recorder::default();
        assert_eq!(net.run_until(SimTime::from_ms(5.0), &mut rec), 0);
        assert_eq!(net.counters().dropped, 1);
    }

    #[test]
    fn conservation_sent_equals_delivered_plus_dropped() {
        let mut net = net_with(4);
        for i in 0..4u32 {
            net.broadcast(n(i), "b", 12);
        }
        net.send(n(0), n(9), "lost", 1);
        let mut rec = Recorder::default();
        net.run_until(SimTime::from_ms(50.0), &mut rec);
        let c = net.counters();
        assert_eq!(c.sent, c.delivered + c.dropped + net.pending_messages() as u64);
        assert_eq!(c.delivered, rec.deliveries.len() as u64);
    }

    #[test]
    fn fifo_per_pair_without_jitter_even_with_size_inversion() {
        let mut net = net_with(2);
        // A large message followed by a tiny one: the additive formula alone
        // would invert them; the FIFO clamp keeps send order.
        net.send(n(0), n(1), "big", 1_000_000);
        net.send(n(0), n(1), "small", 0);
        let mut rec = Recorder::default();
        net.run_until(SimTime::from_ms(1000.0), &mut rec);
        let payloads: Vec<&str> = rec.deliveries.iter().map(|d| d.4).collect();
        assert_eq!(payloads, vec!["big", "small"]);
        assert!(rec.deliveries[0].0 <= rec.deliveries[1].0);
    }

    #[test]
    fn jitter_is_deterministic_per_seed_and_bounded() {
        let mut links = lan();
        links.jitter = Some(Jitter { half_width_ms: 0.1 });
        let run = |seed: u64| {
            let mut net: Network<&'static str, u32> = Network::new(links.clone(), seed);
            net.attach(n(0));
            net.attach(n(1));
            for _ in 0..50 {
                net.send(n(0), n(1), "j", 0);
            }
            let mut rec = Recorder::default();
            net.run_until(SimTime::from_ms(50.0), &mut rec);
            rec.deliveries.iter().map(|d| d.0).collect::<Vec<_>>()
        };
        let a = run(11);
        let b = run(11);
        assert_eq!(a, b);
        // All sent at t=0, so the delivery time is the sampled latency.
        let base = SimTime::from_ms(0.2).as_ns() as i128;
        let half = SimTime::from_ms(0.1).as_ns() as i128;
        for t in &a {
            let l = t.as_ns() as i128;
            assert!(l >= base - half && l <= base + half);
        }
        assert_ne!(run(11), run(12), "different seeds should perturb jitter");
    }

    #[test]
    fn drain_discards_timers_but_delivers_messages() {
        let mut net = net_with(2);
        net.send(n(0), n(1), "data", 8);
        net.schedule(n(0), SimTime::from_ms(0.1), 42);
        let mut rec = Recorder::default();
        let processed = net.drain_messages_until(SimTime::from_ms(5.0), &mut rec);
        assert_eq!(processed, 1);
        assert!(rec.timers.is_empty());
        assert_eq!(net.counters().timers_discarded, 1);
    }
}
