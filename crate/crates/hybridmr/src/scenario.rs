//! Scenario documents: a human-editable description of one simulation run.
//!
//! A scenario is TOML with a versioned `schema` field. It declares the
//! nodes (with their QoS limits, sensors and GUI scripts), the link model,
//! and a timeline of timed directives (join, leave, subscribe,
//! unsubscribe). Loading validates the whole document and reports every
//! problem found, not just the first.
//!
//! Three scenarios ship built in: `fig5` (the five-node LAN reference
//! deployment), `fig5-delegation` (origin capacity 1, forcing forwarder
//! delegation) and `fig5-saturated` (everyone at capacity 1, forcing a
//! rejection).

use crate::agent::{Directive, GuiSetup, NodeSetup, ProtocolConfig, SensorSetup};
use crate::netsim::{Jitter, LinkModel};
use crate::qos::QosConfig;
use crate::scene::ObjectId;
use crate::sensor::{
    GuiCommand, GuiEntry, GuiScript, Plane, SensorConfig, Trajectory,
};
use crate::time::SimTime;
use crate::types::{Labels, NodeId, Pose, Quat, SourceKind, StreamId};
use serde::Deserialize;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("scenario validation failed:\n{}", .0.join("\n"))]
    Validation(Vec<String>),
}

impl ScenarioError {
    pub fn validation_messages(&self) -> &[String] {
        match self {
            ScenarioError::Validation(v) => v,
            ScenarioError::Parse(_) => &[],
        }
    }
}

/// One declared sensor, with its stream identity and object binding.
#[derive(Debug, Clone)]
pub struct SensorDecl {
    pub stream: StreamId,
    pub config: SensorConfig,
    pub object: ObjectId,
}

#[derive(Debug, Clone)]
pub struct GuiDecl {
    pub stream: StreamId,
    pub script: GuiScript,
    pub object: ObjectId,
}

#[derive(Debug, Clone)]
pub struct NodeDecl {
    pub id: NodeId,
    pub label: String,
    pub qos: QosConfig,
    pub protocol: ProtocolConfig,
    pub sensors: Vec<SensorDecl>,
    pub gui: Option<GuiDecl>,
}

#[derive(Debug, Clone, Copy)]
pub struct TimedDirective {
    pub at: SimTime,
    pub node: NodeId,
    pub directive: Directive,
}

/// A validated scenario, ready to run.
#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub name: String,
    pub seed: u64,
    pub t_end: SimTime,
    pub links: LinkModel,
    pub nodes: Vec<NodeDecl>,
    pub timeline: Vec<TimedDirective>,
    pub labels: Labels,
}

impl ScenarioSpec {
    /// Environment-wide stream-to-object binding.
    pub fn bindings(&self) -> BTreeMap<StreamId, ObjectId> {
        let mut map = BTreeMap::new();
        for n in &self.nodes {
            for s in &n.sensors {
                map.insert(s.stream, s.object.clone());
            }
            if let Some(g) = &n.gui {
                map.insert(g.stream, g.object.clone());
            }
        }
        map
    }

    pub fn declared_streams(&self) -> BTreeSet<StreamId> {
        self.bindings().keys().copied().collect()
    }

    /// Node actor setups sharing the global binding map.
    pub fn setups(&self) -> Vec<NodeSetup> {
        let bindings = self.bindings();
        self.nodes
            .iter()
            .map(|n| NodeSetup {
                id: n.id,
                qos: n.qos.clone(),
                protocol: n.protocol.clone(),
                sensors: n
                    .sensors
                    .iter()
                    .map(|s| SensorSetup { stream: s.stream, config: s.config.clone() })
                    .collect(),
                gui: n.gui.as_ref().map(|g| GuiSetup { stream: g.stream, script: g.script.clone() }),
                bindings: bindings.clone(),
            })
            .collect()
    }
}

// ----------------------------------------------------------------------
// Raw document layer (serde)
// ----------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDoc {
    schema: u32,
    name: Option<String>,
    seed: Option<u64>,
    t_end_ms: f64,
    #[serde(default)]
    links: LinksDoc,
    #[serde(default)]
    nodes: Vec<NodeDoc>,
    #[serde(default)]
    timeline: Vec<DirectiveDoc>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct LinksDoc {
    default_latency_ms: Option<f64>,
    bandwidth_bps: Option<u64>,
    jitter: Option<JitterDoc>,
    #[serde(default)]
    overrides: Vec<LinkOverrideDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JitterDoc {
    half_width_ms: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkOverrideDoc {
    from: String,
    to: String,
    latency_ms: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    id: String,
    qos: Option<QosDoc>,
    protocol: Option<ProtocolDoc>,
    #[serde(default)]
    sensors: Vec<SensorDoc>,
    #[serde(default)]
    gui: Vec<GuiEntryDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct QosDoc {
    max_consumers: Option<usize>,
    artt_threshold_ms: Option<f64>,
    ping_period_ms: Option<f64>,
    artt_window: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProtocolDoc {
    join_timeout_ms: Option<f64>,
    subscribe_timeout_ms: Option<f64>,
    retry_backoff_ms: Option<f64>,
    max_retries: Option<u32>,
    gui_idle_timeout_ms: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SensorDoc {
    index: Option<u8>,
    rate_hz: Option<f64>,
    start_ms: f64,
    stop_ms: f64,
    object: Option<String>,
    trajectory: TrajectoryDoc,
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum TrajectoryDoc {
    Circle { radius_m: f64, period_s: f64, plane: Option<Plane> },
    Fixed { position: [f64; 3], orientation: Option<[f64; 4]> },
    Scripted { keyframes: Vec<KeyframeDoc> },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct KeyframeDoc {
    at_ms: f64,
    position: [f64; 3],
    orientation: Option<[f64; 4]>,
}

#[derive(Deserialize)]
#[serde(tag = "command", rename_all = "snake_case", deny_unknown_fields)]
enum GuiEntryDoc {
    SetPose { at_ms: f64, position: [f64; 3], orientation: Option<[f64; 4]> },
    Translate { at_ms: f64, delta: [f64; 3] },
    Rotate { at_ms: f64, rotation: [f64; 4] },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DirectiveDoc {
    at_ms: f64,
    action: String,
    node: String,
    stream: Option<String>,
}

// ----------------------------------------------------------------------
// Loading and validation
// ----------------------------------------------------------------------

/// Parses and validates scenario text. Validation reports every error it
/// can find, not just the first.
pub fn load_scenario(text: &str) -> Result<ScenarioSpec, ScenarioError> {
    let doc: ScenarioDoc =
        toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    let mut errors: Vec<String> = Vec::new();

    if doc.schema != 1 {
        errors.push(format!("unsupported schema version {} (expected 1)", doc.schema));
    }
    if !(doc.t_end_ms > 0.0) {
        errors.push("t_end_ms must be positive".into());
    }
    if doc.nodes.is_empty() {
        errors.push("scenario declares no nodes".into());
    }

    // Pass 1: labels.
    let mut label_list: Vec<String> = Vec::new();
    for n in &doc.nodes {
        if label_list.contains(&n.id) {
            errors.push(format!("duplicate node id '{}'", n.id));
        } else {
            label_list.push(n.id.clone());
        }
    }
    let labels = Labels::new(label_list);

    // Pass 2: links.
    let mut links = LinkModel::default();
    if let Some(l) = doc.links.default_latency_ms {
        if l < 0.0 {
            errors.push("links.default_latency_ms must be non-negative".into());
        } else {
            links.default_latency_ms = l;
        }
    }
    if let Some(b) = doc.links.bandwidth_bps {
        if b == 0 {
            errors.push("links.bandwidth_bps must be positive".into());
        } else {
            links.bandwidth_bps = b;
        }
    }
    if let Some(j) = &doc.links.jitter {
        if j.half_width_ms < 0.0 {
            errors.push("links.jitter.half_width_ms must be non-negative".into());
        } else {
            links.jitter = Some(Jitter { half_width_ms: j.half_width_ms });
        }
    }
    for o in &doc.links.overrides {
        let from = labels.lookup(&o.from);
        let to = labels.lookup(&o.to);
        match (from, to) {
            (Some(f), Some(t)) if f != t => {
                if o.latency_ms < 0.0 {
                    errors.push(format!(
                        "link override {} -> {} has negative latency",
                        o.from, o.to
                    ));
                } else {
                    links.overrides.insert((f, t), o.latency_ms);
                }
            }
            (Some(f), Some(t)) if f == t => {
                errors.push(format!("link override {} -> {} is a self-loop", o.from, o.to));
            }
            _ => errors.push(format!(
                "link override references unknown node ('{}' or '{}')",
                o.from, o.to
            )),
        }
    }

    // Pass 3: nodes.
    let mut nodes: Vec<NodeDecl> = Vec::new();
    for (idx, n) in doc.nodes.iter().enumerate() {
        let id = NodeId(idx as u32);
        let qos = QosConfig {
            max_consumers: n.qos.as_ref().and_then(|q| q.max_consumers).unwrap_or(4),
            artt_threshold_ms: n.qos.as_ref().and_then(|q| q.artt_threshold_ms).unwrap_or(50.0),
            ping_period_ms: n.qos.as_ref().and_then(|q| q.ping_period_ms).unwrap_or(1000.0),
            artt_window: n.qos.as_ref().and_then(|q| q.artt_window).unwrap_or(16),
        };
        if let Err(e) = qos.validate() {
            errors.push(format!("node '{}': qos: {}", n.id, e));
        }
        let defaults = ProtocolConfig::default();
        let p = n.protocol.as_ref();
        let protocol = ProtocolConfig {
            join_timeout_ms: p.and_then(|p| p.join_timeout_ms).unwrap_or(defaults.join_timeout_ms),
            subscribe_timeout_ms: p
                .and_then(|p| p.subscribe_timeout_ms)
                .unwrap_or(defaults.subscribe_timeout_ms),
            retry_backoff_ms: p
                .and_then(|p| p.retry_backoff_ms)
                .unwrap_or(defaults.retry_backoff_ms),
            max_retries: p.and_then(|p| p.max_retries).unwrap_or(defaults.max_retries),
            gui_idle_timeout_ms: p
                .and_then(|p| p.gui_idle_timeout_ms)
                .unwrap_or(defaults.gui_idle_timeout_ms),
        };
        if let Err(e) = protocol.validate() {
            errors.push(format!("node '{}': protocol: {}", n.id, e));
        }

        let mut sensor_decls: Vec<SensorDecl> = Vec::new();
        let mut used_indices: BTreeSet<u8> = BTreeSet::new();
        for (si, s) in n.sensors.iter().enumerate() {
            let index = s.index.unwrap_or(si as u8);
            if !used_indices.insert(index) {
                errors.push(format!("node '{}': duplicate sensor index {}", n.id, index));
            }
            let stream = StreamId::sensor(id, index);
            let trajectory = match &s.trajectory {
                TrajectoryDoc::Circle { radius_m, period_s, plane } => Trajectory::Circle {
                    radius_m: *radius_m,
                    period_s: *period_s,
                    plane: plane.unwrap_or(Plane::Xy),
                },
                TrajectoryDoc::Fixed { position, orientation } => {
                    match make_pose(*position, *orientation) {
                        Ok(pose) => Trajectory::Fixed { pose },
                        Err(e) => {
                            errors.push(format!("node '{}': sensor {}: {}", n.id, index, e));
                            Trajectory::Fixed { pose: Pose::IDENTITY }
                        }
                    }
                }
                TrajectoryDoc::Scripted { keyframes } => {
                    let mut frames = Vec::new();
                    for k in keyframes {
                        match make_pose(k.position, k.orientation) {
                            Ok(pose) => frames.push((SimTime::from_ms(k.at_ms), pose)),
                            Err(e) => {
                                errors.push(format!("node '{}': sensor {}: {}", n.id, index, e))
                            }
                        }
                    }
                    Trajectory::Scripted { keyframes: frames }
                }
            };
            let config = SensorConfig {
                rate_hz: s.rate_hz.unwrap_or(60.0),
                trajectory,
                start: SimTime::from_ms(s.start_ms.max(0.0)),
                stop: SimTime::from_ms(s.stop_ms.max(0.0)),
            };
            if s.start_ms < 0.0 || s.stop_ms < 0.0 {
                errors.push(format!("node '{}': sensor {}: negative time", n.id, index));
            }
            if let Err(e) = config.validate() {
                errors.push(format!("node '{}': sensor {}: {}", n.id, index, e));
            }
            let object = ObjectId(
                s.object.clone().unwrap_or_else(|| labels.stream(stream)),
            );
            sensor_decls.push(SensorDecl { stream, config, object });
        }

        let gui = if n.gui.is_empty() {
            None
        } else {
            let stream = StreamId::gui(id, 0);
            let mut entries = Vec::new();
            for g in &n.gui {
                match gui_entry(g) {
                    Ok(e) => entries.push(e),
                    Err(e) => errors.push(format!("node '{}': gui: {}", n.id, e)),
                }
            }
            let script = GuiScript { entries };
            if let Err(e) = script.validate() {
                errors.push(format!("node '{}': gui: {}", n.id, e));
            }
            Some(GuiDecl { stream, script, object: ObjectId(labels.stream(stream)) })
        };

        nodes.push(NodeDecl { id, label: n.id.clone(), qos, protocol, sensors: sensor_decls, gui });
    }

    // Pass 4: declared streams, then the timeline.
    let mut declared: BTreeSet<StreamId> = BTreeSet::new();
    for n in &nodes {
        for s in &n.sensors {
            declared.insert(s.stream);
        }
        if let Some(g) = &n.gui {
            declared.insert(g.stream);
        }
    }

    let t_end = SimTime::from_ms(doc.t_end_ms.max(0.0));
    let mut timeline: Vec<TimedDirective> = Vec::new();
    for d in &doc.timeline {
        let Some(node) = labels.lookup(&d.node) else {
            errors.push(format!("timeline references unknown node '{}'", d.node));
            continue;
        };
        if d.at_ms < 0.0 {
            errors.push(format!("timeline entry for '{}' has negative time", d.node));
            continue;
        }
        let at = SimTime::from_ms(d.at_ms);
        if at >= t_end {
            errors.push(format!(
                "timeline entry for '{}' at {}ms is not before t_end",
                d.node, d.at_ms
            ));
        }
        let stream_ref = |errors: &mut Vec<String>| -> Option<StreamId> {
            let Some(token) = d.stream.as_deref() else {
                errors.push(format!("'{}' directive for '{}' needs a stream", d.action, d.node));
                return None;
            };
            match parse_stream_token(token, &labels) {
                Ok(s) if declared.contains(&s) => Some(s),
                Ok(_) => {
                    errors.push(format!("directive references undeclared stream '{token}'"));
                    None
                }
                Err(e) => {
                    errors.push(e);
                    None
                }
            }
        };
        match d.action.as_str() {
            "join" => timeline.push(TimedDirective { at, node, directive: Directive::Join }),
            "leave" => timeline.push(TimedDirective { at, node, directive: Directive::Leave }),
            "subscribe" => {
                if let Some(stream) = stream_ref(&mut errors) {
                    if stream.origin == node {
                        errors.push(format!(
                            "node '{}' cannot subscribe to its own stream",
                            d.node
                        ));
                    } else {
                        timeline.push(TimedDirective {
                            at,
                            node,
                            directive: Directive::Subscribe { stream },
                        });
                    }
                }
            }
            "unsubscribe" => {
                if let Some(stream) = stream_ref(&mut errors) {
                    timeline.push(TimedDirective {
                        at,
                        node,
                        directive: Directive::Unsubscribe { stream },
                    });
                }
            }
            other => errors.push(format!("unknown timeline action '{other}'")),
        }
    }

    if !errors.is_empty() {
        return Err(ScenarioError::Validation(errors));
    }

    Ok(ScenarioSpec {
        name: doc.name.unwrap_or_else(|| "unnamed".into()),
        seed: doc.seed.unwrap_or(0),
        t_end,
        links,
        nodes,
        timeline,
        labels,
    })
}

fn make_pose(position: [f64; 3], orientation: Option<[f64; 4]>) -> Result<Pose, String> {
    let orientation = match orientation {
        None => Quat::IDENTITY,
        Some(q) => Quat(q)
            .normalized()
            .ok_or_else(|| "orientation quaternion must be non-zero".to_string())?,
    };
    Ok(Pose { position, orientation })
}

fn gui_entry(doc: &GuiEntryDoc) -> Result<GuiEntry, String> {
    Ok(match doc {
        GuiEntryDoc::SetPose { at_ms, position, orientation } => GuiEntry {
            at: SimTime::from_ms(at_ms.max(0.0)),
            command: GuiCommand::SetPose(make_pose(*position, *orientation)?),
        },
        GuiEntryDoc::Translate { at_ms, delta } => GuiEntry {
            at: SimTime::from_ms(at_ms.max(0.0)),
            command: GuiCommand::Translate(*delta),
        },
        GuiEntryDoc::Rotate { at_ms, rotation } => GuiEntry {
            at: SimTime::from_ms(at_ms.max(0.0)),
            command: GuiCommand::Rotate(
                Quat(*rotation)
                    .normalized()
                    .ok_or_else(|| "rotation quaternion must be non-zero".to_string())?,
            ),
        },
    })
}

/// Parses a canonical stream token like `N1/sensor0`.
pub fn parse_stream_token(token: &str, labels: &Labels) -> Result<StreamId, String> {
    let Some((node_part, src_part)) = token.split_once('/') else {
        return Err(format!("stream '{token}' must look like '<node>/<sensor|gui><index>'"));
    };
    let Some(origin) = labels.lookup(node_part) else {
        return Err(format!("stream '{token}' references unknown node '{node_part}'"));
    };
    let (kind, idx_str) = if let Some(rest) = src_part.strip_prefix("sensor") {
        (SourceKind::Sensor, rest)
    } else if let Some(rest) = src_part.strip_prefix("gui") {
        (SourceKind::Gui, rest)
    } else {
        return Err(format!("stream '{token}' has an unknown source kind"));
    };
    let index: u8 = idx_str
        .parse()
        .map_err(|_| format!("stream '{token}' has an invalid source index"))?;
    Ok(StreamId { origin, kind, index })
}

/// Returns the text of a built-in scenario, if `name` matches one.
pub fn builtin_scenario(name: &str) -> Option<&'static str> {
    match name {
        "fig5" => Some(include_str!("../scenarios/fig5.toml")),
        "fig5-delegation" => Some(include_str!("../scenarios/fig5-delegation.toml")),
        "fig5-saturated" => Some(include_str!("../scenarios/fig5-saturated.toml")),
        _ => None,
    }
}

pub const BUILTIN_NAMES: [&str; 3] = ["fig5", "fig5-delegation", "fig5-saturated"];
