//! Per-node replica of the shared scene.
//!
//! The replica is the testable stand-in for a rendering backend: a map from
//! object to its latest pose, updated last-writer-wins on the sample's
//! origin timestamp (ties broken by ascending origin node id). Keying on
//! origin time rather than arrival time makes the converged replica
//! independent of delivery interleaving, including forwarded paths.

use crate::sensor::PoseSample;
use crate::time::SimTime;
use crate::types::{NodeId, Pose};
use std::collections::BTreeMap;

/// Names one object in the shared scene.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObjectId(pub String);

impl ObjectId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// Latest accepted update for one object.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectState {
    pub pose: Pose,
    pub last_seq: u64,
    pub last_origin_time: SimTime,
    pub last_source: NodeId,
}

impl ObjectState {
    /// Bitwise comparison on every stored field, as used by convergence
    /// checks.
    pub fn bits_eq(&self, other: &ObjectState) -> bool {
        self.pose.bits_eq(&other.pose)
            && self.last_seq == other.last_seq
            && self.last_origin_time == other.last_origin_time
            && self.last_source == other.last_source
    }
}

/// Point-in-time copy of a replica; later updates never alter it.
pub type SceneSnapshot = BTreeMap<ObjectId, ObjectState>;

#[derive(Debug, Clone, Default)]
pub struct SceneReplica {
    objects: BTreeMap<ObjectId, ObjectState>,
}

impl SceneReplica {
    pub fn new() -> Self {
        SceneReplica::default()
    }

    /// Applies `sample` to `object` under last-writer-wins. Returns whether
    /// the replica changed; stale (or identical) samples are ignored.
    pub fn apply_update(&mut self, object: &ObjectId, sample: &PoseSample) -> bool {
        let origin = sample.stream.origin;
        if let Some(current) = self.objects.get(object) {
            let newer = sample.origin_time > current.last_origin_time
                || (sample.origin_time == current.last_origin_time
                    && origin < current.last_source);
            if !newer {
                return false;
            }
        }
        self.objects.insert(
            object.clone(),
            ObjectState {
                pose: sample.pose,
                last_seq: sample.seq,
                last_origin_time: sample.origin_time,
                last_source: origin,
            },
        );
        true
    }

    pub fn get(&self, object: &ObjectId) -> Option<&ObjectState> {
        self.objects.get(object)
    }

    pub fn snapshot(&self) -> SceneSnapshot {
        self.objects.clone()
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }
}
