//! Core identifiers and geometry shared across the crate.

use std::fmt;

/// Identifies a node within one simulated environment.
///
/// The value is the node's declaration index in the scenario; the
/// human-readable label (e.g. `"N3"`) lives in [`Labels`]. Ordering by the
/// raw index is the deterministic tie-break used throughout the protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node{}", self.0)
    }
}

/// What kind of local source feeds a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SourceKind {
    Sensor,
    Gui,
}

impl SourceKind {
    pub fn token(self) -> &'static str {
        match self {
            SourceKind::Sensor => "sensor",
            SourceKind::Gui => "gui",
        }
    }
}

/// Environment-wide identity of one pose stream: the originating node, the
/// kind of source, and the source index on that node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StreamId {
    pub origin: NodeId,
    pub kind: SourceKind,
    pub index: u8,
}

impl StreamId {
    pub fn sensor(origin: NodeId, index: u8) -> Self {
        StreamId { origin, kind: SourceKind::Sensor, index }
    }

    pub fn gui(origin: NodeId, index: u8) -> Self {
        StreamId { origin, kind: SourceKind::Gui, index }
    }
}

/// Node labels, indexed by [`NodeId`]. Scenario loading assigns them; all
/// exported artifacts (reports, traces) speak in labels, never raw indices.
#[derive(Debug, Clone, Default)]
pub struct Labels(Vec<String>);

impl Labels {
    pub fn new(labels: Vec<String>) -> Self {
        Labels(labels)
    }

    pub fn node(&self, id: NodeId) -> &str {
        self.0.get(id.index()).map(String::as_str).unwrap_or("?")
    }

    /// Canonical stream token, e.g. `N1/sensor0`.
    pub fn stream(&self, stream: StreamId) -> String {
        format!("{}/{}{}", self.node(stream.origin), stream.kind.token(), stream.index)
    }

    pub fn lookup(&self, label: &str) -> Option<NodeId> {
        self.0.iter().position(|l| l == label).map(|i| NodeId(i as u32))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Unit quaternion stored as `(w, x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quat(pub [f64; 4]);

impl Quat {
    pub const IDENTITY: Quat = Quat([1.0, 0.0, 0.0, 0.0]);

    pub fn norm(self) -> f64 {
        self.0.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn normalized(self) -> Option<Quat> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return None;
        }
        Some(Quat([self.0[0] / n, self.0[1] / n, self.0[2] / n, self.0[3] / n]))
    }

    pub fn is_unit(self, eps: f64) -> bool {
        (self.norm() - 1.0).abs() <= eps
    }

    /// Hamilton product `self * rhs`.
    pub fn mul(self, rhs: Quat) -> Quat {
        let [aw, ax, ay, az] = self.0;
        let [bw, bx, by, bz] = rhs.0;
        Quat([
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ])
    }
}

/// Position plus orientation of one scene object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: [f64; 3],
    pub orientation: Quat,
}

impl Pose {
    pub const IDENTITY: Pose = Pose { position: [0.0; 3], orientation: Quat::IDENTITY };

    /// Field-by-field bit equality, the comparison used for convergence checks.
    pub fn bits_eq(&self, other: &Pose) -> bool {
        self.position
            .iter()
            .zip(other.position.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits())
            && self
                .orientation
                .0
                .iter()
                .zip(other.orientation.0.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_tokens_use_labels() {
        let labels = Labels::new(vec!["N1".into(), "N2".into()]);
        assert_eq!(labels.stream(StreamId::sensor(NodeId(0), 0)), "N1/sensor0");
        assert_eq!(labels.stream(StreamId::gui(NodeId(1), 1)), "N2/gui1");
        assert_eq!(labels.lookup("N2"), Some(NodeId(1)));
        assert_eq!(labels.lookup("N9"), None);
    }

    #[test]
    fn quaternion_product_of_units_is_unit() {
        let a = Quat([0.5f64.sqrt(), 0.0, 0.0, 0.5f64.sqrt()]);
        let b = Quat([0.5f64.sqrt(), 0.5f64.sqrt(), 0.0, 0.0]);
        assert!(a.mul(b).is_unit(1e-12));
    }
}
