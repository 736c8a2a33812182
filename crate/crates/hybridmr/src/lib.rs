//! Hybrid-node overlay protocol with a deterministic discrete-event
//! simulator for sensor-driven shared scenes.
//!
//! Nodes in this design sit between pure peer-to-peer and client-server:
//! every node can produce pose data from local sources, consume remote
//! streams, and forward streams on behalf of an overloaded producer, all
//! at once, switching among four running modes as participants interact.
//! Delivery paths are capped at two hops (origin, or origin via one
//! forwarder) to keep distribution at interactive speeds.
//!
//! The crate is organized along that design:
//!
//! * [`state`] — the four-mode machine driven by production and
//!   forwarding edges;
//! * [`qos`] — ARTT tables, the admission predicate, forwarder selection;
//! * [`sensor`] — deterministic synthetic pose sources (sensors, GUI);
//! * [`scene`] — per-node scene replicas with last-writer-wins updates;
//! * [`netsim`] — the seeded discrete-event transport and clock;
//! * [`agent`] — the per-node behavior: join, advertise, subscribe,
//!   delegate, publish, forward;
//! * [`scenario`] — the TOML scenario format and built-in scenarios;
//! * [`runner`] — orchestration of one run;
//! * [`metrics`] — reports, traces and their export encodings.

pub mod agent;
pub mod message;
pub mod metrics;
pub mod netsim;
pub mod qos;
pub mod scenario;
pub mod scene;
pub mod sensor;
pub mod state;
pub mod time;
pub mod types;

mod runner;

pub use agent::{Directive, NodeActor, NodeSetup, ProtocolConfig, SubscriptionDecision};
pub use message::{Message, RejectReason};
pub use metrics::{export_report, export_trace, parse_format, ExportFormat, MetricsReport};
pub use netsim::{LinkModel, Network};
pub use qos::QosConfig;
pub use runner::{run_scenario, DecisionEntry, NodeSummary, RunOptions, RunOutput, Simulation};
pub use scenario::{builtin_scenario, load_scenario, ScenarioError, ScenarioSpec, BUILTIN_NAMES};
pub use state::{is_forwarding, server_active, step, NodeEvent, NodeState};
pub use time::SimTime;
pub use types::{Labels, NodeId, SourceKind, StreamId};
