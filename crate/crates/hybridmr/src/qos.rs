//! Application-level quality-of-service bookkeeping.
//!
//! Each node keeps a table of average round-trip times (ARTT) to its data
//! consumers, fed by ping/pong probes. Admission of a new consumer is
//! gated on two things only: the node's consumer capacity and, when known,
//! the requester's ARTT against a threshold. Forwarder selection orders a
//! node's direct consumers by ascending ARTT (ties by ascending node id)
//! and picks the first with reported spare capacity.

use crate::types::NodeId;
use std::collections::{BTreeMap, VecDeque};

/// Per-node QoS parameters. All fields must be strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct QosConfig {
    /// Upper bound on the node's total consumer entries across all streams.
    pub max_consumers: usize,
    /// Admission threshold on the requester's known ARTT, in simulated ms.
    pub artt_threshold_ms: f64,
    /// Probe period for consumers, in simulated ms.
    pub ping_period_ms: f64,
    /// Number of RTT samples retained per peer.
    pub artt_window: usize,
}

impl Default for QosConfig {
    fn default() -> Self {
        QosConfig {
            max_consumers: 4,
            artt_threshold_ms: 50.0,
            ping_period_ms: 1000.0,
            artt_window: 16,
        }
    }
}

impl QosConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_consumers == 0 {
            return Err("max_consumers must be positive".into());
        }
        if !(self.artt_threshold_ms > 0.0) {
            return Err("artt_threshold_ms must be positive".into());
        }
        if !(self.ping_period_ms > 0.0) {
            return Err("ping_period_ms must be positive".into());
        }
        if self.artt_window == 0 {
            return Err("artt_window must be positive".into());
        }
        Ok(())
    }
}

/// Sliding-window round-trip-time table, one ring of samples per peer.
#[derive(Debug, Clone)]
pub struct ArttTable {
    window: usize,
    samples: BTreeMap<NodeId, VecDeque<f64>>,
    /// Negative samples offered to `record`, rejected and counted.
    pub rejected_samples: u64,
}

impl ArttTable {
    pub fn new(window: usize) -> Self {
        assert!(window > 0, "window must be positive");
        ArttTable { window, samples: BTreeMap::new(), rejected_samples: 0 }
    }

    /// Appends one RTT sample for `peer`, evicting the oldest sample once
    /// the ring exceeds the window. Negative samples are rejected.
    pub fn record(&mut self, peer: NodeId, sample_ms: f64) -> bool {
        if !(sample_ms >= 0.0) {
            self.rejected_samples += 1;
            return false;
        }
        let ring = self.samples.entry(peer).or_default();
        ring.push_back(sample_ms);
        while ring.len() > self.window {
            ring.pop_front();
        }
        true
    }

    /// Arithmetic mean of the retained window; undefined before the first
    /// sample.
    pub fn artt(&self, peer: NodeId) -> Option<f64> {
        let ring = self.samples.get(&peer)?;
        if ring.is_empty() {
            return None;
        }
        Some(ring.iter().sum::<f64>() / ring.len() as f64)
    }

    pub fn window(&self) -> usize {
        self.window
    }
}

/// Admission predicate for a new consumer: capacity first, then the ARTT
/// threshold when an ARTT is known. A requester with no recorded ARTT
/// passes the threshold vacuously; probing starts after acceptance.
pub fn admit(
    config: &QosConfig,
    table: &ArttTable,
    current_consumer_count: usize,
    requester: NodeId,
) -> bool {
    if current_consumer_count >= config.max_consumers {
        return false;
    }
    match table.artt(requester) {
        None => true,
        Some(artt) => artt <= config.artt_threshold_ms,
    }
}

/// One direct consumer considered as a delegation target.
#[derive(Debug, Clone, Copy)]
pub struct ForwarderCandidate {
    pub peer: NodeId,
    /// ARTT to the candidate, if measured.
    pub artt_ms: Option<f64>,
    /// Candidate's last gossiped free consumer slots; `None` means not yet
    /// reported and is treated optimistically as spare.
    pub free_slots: Option<u32>,
}

impl ForwarderCandidate {
    fn has_spare(&self) -> bool {
        self.free_slots.map(|n| n > 0).unwrap_or(true)
    }
}

/// Picks the first candidate with spare capacity under the deterministic
/// ordering: ascending ARTT (unmeasured last), ties by ascending node id.
pub fn select_forwarder(candidates: &[ForwarderCandidate]) -> Option<NodeId> {
    let mut ordered: Vec<&ForwarderCandidate> = candidates.iter().collect();
    ordered.sort_by(|a, b| {
        let ka = a.artt_ms.unwrap_or(f64::INFINITY);
        let kb = b.artt_ms.unwrap_or(f64::INFINITY);
        ka.partial_cmp(&kb).unwrap_or(std::cmp::Ordering::Equal).then(a.peer.cmp(&b.peer))
    });
    ordered.into_iter().find(|c| c.has_spare()).map(|c| c.peer)
}
