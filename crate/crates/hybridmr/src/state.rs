//! The hybrid-node mode machine.
//!
//! A node runs in one of four modes: it produces local data (`Active`),
//! consumes only (`Passive`), or additionally forwards other nodes' data
//! (`ActiveForwarder` / `PassiveForwarder`). Four primitive events move a
//! node between modes:
//!
//! * `SensorOn` / `SensorOff` (`00` / `01`) — the local production level
//!   (sensor or GUI activity) rises or falls;
//! * `ForwardOn` / `ForwardOff` (`10` / `11`) — the node starts or stops
//!   serving a stream it does not originate.
//!
//! `step` is the whole machine: a pure total function over the 16
//! (state, event) pairs. The 8 applicable pairs produce the tabulated next
//! mode plus the action on the node's server thread; the other 8 are
//! absorbed unchanged, because duplicate or stale control messages must not
//! fault a node. Multi-event paths (e.g. `Active` to `PassiveForwarder`)
//! are compositions of primitive steps through the intermediate mode.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Running mode of a hybrid node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeState {
    #[serde(rename = "A")]
    Active,
    #[serde(rename = "P")]
    Passive,
    #[serde(rename = "AF")]
    ActiveForwarder,
    #[serde(rename = "PF")]
    PassiveForwarder,
}

impl NodeState {
    pub const ALL: [NodeState; 4] = [
        NodeState::Active,
        NodeState::Passive,
        NodeState::ActiveForwarder,
        NodeState::PassiveForwarder,
    ];

    pub fn token(self) -> &'static str {
        match self {
            NodeState::Active => "A",
            NodeState::Passive => "P",
            NodeState::ActiveForwarder => "AF",
            NodeState::PassiveForwarder => "PF",
        }
    }
}

impl fmt::Display for NodeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for NodeState {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "A" => Ok(NodeState::Active),
            "P" => Ok(NodeState::Passive),
            "AF" => Ok(NodeState::ActiveForwarder),
            "PF" => Ok(NodeState::PassiveForwarder),
            _ => Err(()),
        }
    }
}

/// Primitive transition event, with its two-bit wire token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeEvent {
    #[serde(rename = "00")]
    SensorOn,
    #[serde(rename = "01")]
    SensorOff,
    #[serde(rename = "10")]
    ForwardOn,
    #[serde(rename = "11")]
    ForwardOff,
}

impl NodeEvent {
    pub const ALL: [NodeEvent; 4] = [
        NodeEvent::SensorOn,
        NodeEvent::SensorOff,
        NodeEvent::ForwardOn,
        NodeEvent::ForwardOff,
    ];

    pub fn token(self) -> &'static str {
        match self {
            NodeEvent::SensorOn => "00",
            NodeEvent::SensorOff => "01",
            NodeEvent::ForwardOn => "10",
            NodeEvent::ForwardOff => "11",
        }
    }
}

impl fmt::Display for NodeEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// What an applied transition does to the node's server thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ServerAction {
    TurnOn,
    TurnOff,
    NoChange,
}

impl ServerAction {
    pub fn token(self) -> &'static str {
        match self {
            ServerAction::TurnOn => "TurnOn",
            ServerAction::TurnOff => "TurnOff",
            ServerAction::NoChange => "NoChange",
        }
    }
}

/// Outcome of [`step`]. When `applied` is false the event was inapplicable
/// in the current state: `next` equals the input state and `server_action`
/// is `NoChange`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransitionResult {
    pub next: NodeState,
    pub server_action: ServerAction,
    pub applied: bool,
}

/// Applies one primitive event to a node state.
pub fn step(current: NodeState, event: NodeEvent) -> TransitionResult {
    use NodeEvent::*;
    use NodeState::*;

    let (next, server_action) = match (current, event) {
        (Active, SensorOff) => (Passive, ServerAction::TurnOff),
        (Active, ForwardOn) => (ActiveForwarder, ServerAction::NoChange),
        (Passive, SensorOn) => (Active, ServerAction::TurnOn),
        (Passive, ForwardOn) => (PassiveForwarder, ServerAction::TurnOn),
        (ActiveForwarder, ForwardOff) => (Active, ServerAction::NoChange),
        (ActiveForwarder, SensorOff) => (PassiveForwarder, ServerAction::NoChange),
        (PassiveForwarder, ForwardOff) => (Passive, ServerAction::TurnOff),
        (PassiveForwarder, SensorOn) => (ActiveForwarder, ServerAction::NoChange),
        _ => {
            return TransitionResult {
                next: current,
                server_action: ServerAction::NoChange,
                applied: false,
            }
        }
    };
    TransitionResult { next, server_action, applied: true }
}

/// Whether the node's server thread is running in the given state: every
/// mode except `Passive` serves data to remote peers.
pub fn server_active(state: NodeState) -> bool {
    !matches!(state, NodeState::Passive)
}

/// Whether the node is currently forwarding data it does not originate.
pub fn is_forwarding(state: NodeState) -> bool {
    matches!(state, NodeState::ActiveForwarder | NodeState::PassiveForwarder)
}
