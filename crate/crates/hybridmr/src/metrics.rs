//! Measured output of a run: the metrics report, the event trace, and
//! their export encodings.
//!
//! Exports are pure functions of the report with stable ordering (struct
//! field order plus sorted maps), so identical runs export byte-identical
//! documents.

use crate::message::Message;
use crate::types::Labels;
use serde::Serialize;
use std::collections::BTreeMap;
use thiserror::Error;

/// Latency distribution of applied deliveries, simulated milliseconds.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct LatencyStats {
    pub count: u64,
    pub min_ms: f64,
    pub mean_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    /// Builds stats from raw latencies in nanoseconds.
    pub fn from_ns(mut ns: Vec<u64>) -> Option<LatencyStats> {
        if ns.is_empty() {
            return None;
        }
        ns.sort_unstable();
        let count = ns.len() as u64;
        let min = ns[0];
        let max = ns[ns.len() - 1];
        let sum: u128 = ns.iter().map(|v| *v as u128).sum();
        let mean_ms = (sum as f64 / count as f64) / 1_000_000.0;
        let p99_idx = ((count as f64 * 0.99).ceil() as usize).clamp(1, ns.len()) - 1;
        Some(LatencyStats {
            count,
            min_ms: min as f64 / 1_000_000.0,
            mean_ms,
            p99_ms: ns[p99_idx] as f64 / 1_000_000.0,
            max_ms: max as f64 / 1_000_000.0,
        })
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct StreamMetrics {
    pub deliveries: u64,
    pub max_hop: u8,
    pub latency: LatencyStats,
}

/// One applied mode transition, in export form.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct TransitionExport {
    pub t_ms: f64,
    pub from: String,
    pub event: String,
    pub to: String,
    pub action: String,
}

/// Normal-operation drop counters (not failures of the run).
#[derive(Debug, Clone, Copy, Default, Serialize, PartialEq)]
pub struct DropCounters {
    pub publish_inactive: u64,
    pub stale_route: u64,
    pub stale_unsubscribe: u64,
    pub duplicate_control: u64,
    pub lww_stale: u64,
    pub transport: u64,
}

/// Invariant violations; any nonzero field fails the run.
#[derive(Debug, Clone, Copy, Default, Serialize, PartialEq)]
pub struct ViolationCounters {
    pub hop_bound: u64,
    pub capacity: u64,
    pub redirect_target: u64,
    pub serving_coherence: u64,
}

impl ViolationCounters {
    pub fn total(&self) -> u64 {
        self.hop_bound + self.capacity + self.redirect_target + self.serving_coherence
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, PartialEq)]
pub struct ConvergenceSummary {
    /// True when no data messages were left in flight, so replica
    /// comparison is meaningful.
    pub checked: bool,
    pub data_in_flight: u64,
    /// Objects fed by more than one stream are excluded from the check.
    pub shared_objects_skipped: u64,
    pub mismatches: u64,
}

/// The measured outcome of one scenario run.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MetricsReport {
    pub schema: u32,
    pub scenario: String,
    pub seed: u64,
    pub t_end_ms: f64,
    pub final_states: BTreeMap<String, String>,
    pub per_stream: BTreeMap<String, StreamMetrics>,
    pub max_hop_count: u8,
    pub message_counts: BTreeMap<String, u64>,
    pub rejects: u64,
    pub rejects_unknown_stream: u64,
    pub redirects: u64,
    pub retries: u64,
    pub failed_subscribes: u64,
    pub drops: DropCounters,
    pub violations: ViolationCounters,
    pub convergence: ConvergenceSummary,
    pub events_processed: u64,
    pub state_transitions: u64,
    pub transitions: BTreeMap<String, Vec<TransitionExport>>,
}

// ----------------------------------------------------------------------
// Trace records
// ----------------------------------------------------------------------

/// Flattened message payload for trace lines.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MsgTrace {
    pub kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stream: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub peer: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nonce: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub free_slots: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hop: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub origin_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub streams: Option<Vec<String>>,
}

impl MsgTrace {
    pub fn new(kind: &'static str) -> Self {
        MsgTrace {
            kind,
            stream: None,
            peer: None,
            reason: None,
            nonce: None,
            free_slots: None,
            seq: None,
            hop: None,
            origin_ms: None,
            streams: None,
        }
    }
}

/// Renders a message into its trace form, with node labels and stream
/// tokens instead of raw indices.
pub fn msg_trace(msg: &Message, labels: &Labels) -> MsgTrace {
    let mut t = MsgTrace::new(msg.kind());
    match msg {
        Message::JoinQuery => {}
        Message::JoinResponse { known_streams } => {
            t.streams = Some(known_streams.iter().map(|s| labels.stream(*s)).collect());
        }
        Message::Advertise { stream }
        | Message::Subscribe { stream }
        | Message::SubscribeAck { stream }
        | Message::Unsubscribe { stream }
        | Message::ForwardOff { stream } => {
            t.stream = Some(labels.stream(*stream));
        }
        Message::RedirectTo { stream, forwarder } => {
            t.stream = Some(labels.stream(*stream));
            t.peer = Some(labels.node(*forwarder).to_string());
        }
        Message::DelegateForward { stream, new_consumer } => {
            t.stream = Some(labels.stream(*stream));
            t.peer = Some(labels.node(*new_consumer).to_string());
        }
        Message::Reject { stream, reason } => {
            t.stream = Some(labels.stream(*stream));
            t.reason = Some(reason.token());
        }
        Message::Ping { nonce } => t.nonce = Some(*nonce),
        Message::Pong { nonce, free_slots } => {
            t.nonce = Some(*nonce);
            t.free_slots = Some(*free_slots);
        }
        Message::Data(sample) => {
            t.stream = Some(labels.stream(sample.stream));
            t.seq = Some(sample.seq);
            t.hop = Some(sample.hop_count);
            t.origin_ms = Some(sample.origin_time.as_ms());
        }
    }
    t
}

/// One line of the run trace: a delivered envelope, a fired timer, or an
/// applied mode transition.
#[derive(Debug, Clone, Serialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceRecord {
    Deliver { t_ms: f64, seq: u64, from: String, to: String, sent_ms: f64, msg: MsgTrace },
    Timer { t_ms: f64, node: String, timer: String },
    Transition { t_ms: f64, node: String, from: String, event: String, to: String, action: String },
}

// ----------------------------------------------------------------------
// Export
// ----------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Json,
    Csv,
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("unknown export format '{0}' (expected json or csv)")]
    UnknownFormat(String),
}

pub fn parse_format(token: &str) -> Result<ExportFormat, ExportError> {
    match token {
        "json" => Ok(ExportFormat::Json),
        "csv" => Ok(ExportFormat::Csv),
        other => Err(ExportError::UnknownFormat(other.to_string())),
    }
}

/// Serializes the report with stable key order; identical reports yield
/// byte-identical output.
pub fn export_report(report: &MetricsReport, format: ExportFormat) -> Vec<u8> {
    match format {
        ExportFormat::Json => {
            let mut bytes = serde_json::to_vec_pretty(report).expect("report serializes");
            bytes.push(b'\n');
            bytes
        }
        ExportFormat::Csv => export_csv(report).into_bytes(),
    }
}

fn export_csv(r: &MetricsReport) -> String {
    let mut out = String::from("section,name,value\n");
    let mut push = |section: &str, name: &str, value: String| {
        out.push_str(&format!("{section},{name},{value}\n"));
    };
    push("run", "scenario", r.scenario.clone());
    push("run", "seed", r.seed.to_string());
    push("run", "t_end_ms", r.t_end_ms.to_string());
    push("run", "events_processed", r.events_processed.to_string());
    push("run", "state_transitions", r.state_transitions.to_string());
    push("run", "max_hop_count", r.max_hop_count.to_string());
    for (node, state) in &r.final_states {
        push("final_state", node, state.clone());
    }
    for (stream, m) in &r.per_stream {
        push("deliveries", stream, m.deliveries.to_string());
        push("max_hop", stream, m.max_hop.to_string());
        push("latency_min_ms", stream, m.latency.min_ms.to_string());
        push("latency_mean_ms", stream, m.latency.mean_ms.to_string());
        push("latency_p99_ms", stream, m.latency.p99_ms.to_string());
        push("latency_max_ms", stream, m.latency.max_ms.to_string());
    }
    for (kind, n) in &r.message_counts {
        push("messages", kind, n.to_string());
    }
    push("outcome", "rejects", r.rejects.to_string());
    push("outcome", "rejects_unknown_stream", r.rejects_unknown_stream.to_string());
    push("outcome", "redirects", r.redirects.to_string());
    push("outcome", "retries", r.retries.to_string());
    push("outcome", "failed_subscribes", r.failed_subscribes.to_string());
    push("drops", "publish_inactive", r.drops.publish_inactive.to_string());
    push("drops", "stale_route", r.drops.stale_route.to_string());
    push("drops", "stale_unsubscribe", r.drops.stale_unsubscribe.to_string());
    push("drops", "duplicate_control", r.drops.duplicate_control.to_string());
    push("drops", "lww_stale", r.drops.lww_stale.to_string());
    push("drops", "transport", r.drops.transport.to_string());
    push("violations", "hop_bound", r.violations.hop_bound.to_string());
    push("violations", "capacity", r.violations.capacity.to_string());
    push("violations", "redirect_target", r.violations.redirect_target.to_string());
    push("violations", "serving_coherence", r.violations.serving_coherence.to_string());
    push("convergence", "checked", r.convergence.checked.to_string());
    push("convergence", "data_in_flight", r.convergence.data_in_flight.to_string());
    push("convergence", "shared_objects_skipped", r.convergence.shared_objects_skipped.to_string());
    push("convergence", "mismatches", r.convergence.mismatches.to_string());
    out
}

/// Newline-delimited JSON, one record per line.
pub fn export_trace(trace: &[TraceRecord]) -> String {
    let mut out = String::new();
    for rec in trace {
        out.push_str(&serde_json::to_string(rec).expect("trace record serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latency_stats_from_sorted_and_unsorted_input_agree() {
        let a = LatencyStats::from_ns(vec![3_000_000, 1_000_000, 2_000_000]).unwrap();
        let b = LatencyStats::from_ns(vec![1_000_000, 2_000_000, 3_000_000]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.min_ms, 1.0);
        assert_eq!(a.max_ms, 3.0);
        assert_eq!(a.mean_ms, 2.0);
        assert_eq!(a.p99_ms, 3.0);
    }

    #[test]
    fn empty_latency_has_no_stats() {
        assert!(LatencyStats::from_ns(vec![]).is_none());
    }

    #[test]
    fn unknown_format_token_is_an_error() {
        assert!(parse_format("json").is_ok());
        assert!(parse_format("csv").is_ok());
        assert!(parse_format("yaml").is_err());
    }
}
