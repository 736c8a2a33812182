//! Control and data messages exchanged between nodes.
//!
//! The sender identity rides on the transport envelope; payloads carry only
//! protocol state. `wire_size` gives the nominal serialized size used for
//! the transmission-delay term of the latency model.

use crate::sensor::PoseSample;
use crate::types::{NodeId, StreamId};

/// Reason attached to a subscription rejection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    /// The receiver does not originate, forward or consume the stream.
    UnknownStream,
    /// The receiver is at capacity and found no delegable consumer.
    NoCandidate,
}

impl RejectReason {
    pub fn token(self) -> &'static str {
        match self {
            RejectReason::UnknownStream => "unknown-stream",
            RejectReason::NoCandidate => "no-candidate",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    /// Bootstrap probe broadcast by a joining node.
    JoinQuery,
    /// Reply to a join query, carrying the responder's known streams.
    JoinResponse { known_streams: Vec<StreamId> },
    /// Announces that the sender originates `stream`.
    Advertise { stream: StreamId },
    /// Asks the receiver to serve `stream` to the sender.
    Subscribe { stream: StreamId },
    /// Confirms the sender now serves `stream` to the receiver.
    SubscribeAck { stream: StreamId },
    /// Tells a requester to re-subscribe at `forwarder`.
    RedirectTo { stream: StreamId, forwarder: NodeId },
    /// Tells a direct consumer to start forwarding `stream` to `new_consumer`.
    DelegateForward { stream: StreamId, new_consumer: NodeId },
    /// Refusal: either a subscription rejection, or (candidate to origin)
    /// a negative acknowledgment of a delegation.
    Reject { stream: StreamId, reason: RejectReason },
    /// Consumer withdraws from `stream`.
    Unsubscribe { stream: StreamId },
    /// Forwarder tells the origin it stopped forwarding `stream`.
    ForwardOff { stream: StreamId },
    /// RTT probe.
    Ping { nonce: u64 },
    /// Probe reply, piggybacking the responder's free consumer slots.
    Pong { nonce: u64, free_slots: u32 },
    /// One pose sample in flight.
    Data(PoseSample),
}

impl Message {
    /// Message kind token as it appears in traces.
    pub fn kind(&self) -> &'static str {
        match self {
            Message::JoinQuery => "JoinQuery",
            Message::JoinResponse { .. } => "JoinResponse",
            Message::Advertise { .. } => "Advertise",
            Message::Subscribe { .. } => "Subscribe",
            Message::SubscribeAck { .. } => "SubscribeAck",
            Message::RedirectTo { .. } => "RedirectTo",
            Message::DelegateForward { .. } => "DelegateForward",
            Message::Reject { .. } => "Reject",
            Message::Unsubscribe { .. } => "Unsubscribe",
            Message::ForwardOff { .. } => "ForwardOff",
            Message::Ping { .. } => "Ping",
            Message::Pong { .. } => "Pong",
            Message::Data(_) => "Data",
        }
    }

    /// Nominal wire size in bytes, used for the transmission-delay term.
    pub fn wire_size(&self) -> u32 {
        match self {
            Message::JoinQuery => 16,
            Message::JoinResponse { known_streams } => 16 + 16 * known_streams.len() as u32,
            Message::Advertise { .. } => 24,
            Message::Subscribe { .. } => 24,
            Message::SubscribeAck { .. } => 24,
            Message::RedirectTo { .. } => 32,
            Message::DelegateForward { .. } => 32,
            Message::Reject { .. } => 24,
            Message::Unsubscribe { .. } => 24,
            Message::ForwardOff { .. } => 24,
            Message::Ping { .. } => 16,
            Message::Pong { .. } => 16,
            Message::Data(_) => 64,
        }
    }
}
