//! BPMN collaboration models: types, XML parsing and writing, validation and
//! normalization to well-formed shape.

pub mod guard;
mod normalize;
mod parse;
mod validate;
mod write;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use guard::{Guard, GuardError};
pub use normalize::{normalize, NormalizeError};
pub use parse::parse_bpmn;
pub use validate::{validate, DiagCode, Diagnostic, Severity};
pub use write::to_xml;

pub const MODEL_SCHEMA: &str = "tabsplus-model/1";

/// Extension namespace for task specs, payload schemas and credentials.
pub const EXT_NS: &str = "urn:tabsplus:ext:1";
pub const BPMN_NS: &str = "http://www.omg.org/spec/BPMN/20100524/MODEL";

pub const INIT_LABEL: &str = "INIT";
pub const SUCCESS_LABEL: &str = "SUCCESS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BpmnModel {
    pub name: String,
    pub actors: Vec<Actor>,
    pub nodes: Vec<FlowNode>,
    pub sequence_flows: Vec<SequenceFlow>,
    pub message_flows: Vec<MessageFlow>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Actor {
    pub id: String,
    pub name: String,
    pub credential: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatewayKind {
    Exclusive,
    Inclusive,
    /// Accepted by the parser so validation can report it; never survives.
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatewayRole {
    Fork,
    Join,
    /// More than one incoming and more than one outgoing flow.
    Mixed,
    /// At most one incoming and at most one outgoing flow.
    Pass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum NodeKind {
    StartEvent,
    EndEvent,
    Task,
    MessageSend,
    MessageReceive,
    Gateway { gateway: GatewayKind, role: GatewayRole },
}

impl NodeKind {
    pub fn is_gateway(self) -> bool {
        matches!(self, NodeKind::Gateway { .. })
    }

    pub fn is_fork(self) -> bool {
        matches!(self, NodeKind::Gateway { role: GatewayRole::Fork, .. })
    }

    pub fn is_join(self) -> bool {
        matches!(self, NodeKind::Gateway { role: GatewayRole::Join, .. })
    }

    /// Tasks wait for an external input from their owning actor; everything
    /// else fires automatically once its tokens are present.
    pub fn needs_input(self) -> bool {
        matches!(self, NodeKind::Task)
    }

    pub fn tag(self) -> &'static str {
        match self {
            NodeKind::StartEvent => "start",
            NodeKind::EndEvent => "end",
            NodeKind::Task => "task",
            NodeKind::MessageSend => "message_send",
            NodeKind::MessageReceive => "message_receive",
            NodeKind::Gateway { role: GatewayRole::Fork, .. } => "fork",
            NodeKind::Gateway { role: GatewayRole::Join, .. } => "join",
            NodeKind::Gateway { .. } => "gateway",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowNode {
    pub id: String,
    pub actor: String,
    pub kind: NodeKind,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_spec: Option<TaskSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub callback: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceFlow {
    pub id: String,
    pub source: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guard: Option<GuardText>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub is_default: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<PayloadSchema>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageFlow {
    pub id: String,
    pub source: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<PayloadSchema>,
}

/// A guard kept together with its canonical text so the model stays `Eq`
/// and serializes stably.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GuardText(pub String);

impl GuardText {
    pub fn new(guard: &Guard) -> Self {
        GuardText(guard.to_string())
    }

    pub fn parse(&self) -> Guard {
        // constructed only from parsed guards
        Guard::parse(&self.0).expect("guard text is canonical")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldType {
    Number,
    Text,
    Bool,
    Bytes,
}

impl FieldType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "number" => FieldType::Number,
            "text" | "string" => FieldType::Text,
            "bool" | "boolean" => FieldType::Bool,
            "bytes" => FieldType::Bytes,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            FieldType::Number => "number",
            FieldType::Text => "text",
            FieldType::Bool => "bool",
            FieldType::Bytes => "bytes",
        }
    }
}

/// Named, typed payload fields carried along a flow.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadSchema {
    pub fields: BTreeMap<String, FieldType>,
}

impl PayloadSchema {
    /// Parses the attribute form `name:type,name:type`.
    pub fn parse_attr(text: &str) -> Option<Self> {
        let mut fields = BTreeMap::new();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, ty) = part.split_once(':')?;
            fields.insert(name.trim().to_string(), FieldType::parse(ty.trim())?);
        }
        Some(PayloadSchema { fields })
    }

    pub fn to_attr(&self) -> String {
        self.fields
            .iter()
            .map(|(k, v)| format!("{k}:{}", v.name()))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Where the bytes of a ledger write come from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "from", content = "ref")]
pub enum WriteSource {
    /// Deterministic filler bytes of the declared size.
    Generated,
    /// A field of the triggering input payload.
    Payload(String),
    /// The value read from another key earlier in the same task.
    Read(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerWrite {
    pub key: String,
    pub size: u64,
    pub source: WriteSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmitSpec {
    pub to: String,
    pub message: String,
    pub size: u64,
}

/// Declarative effects of a task. Key templates may contain `{run}`,
/// `{actor}` and `{vertex}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(default)]
    pub ledger_writes: Vec<LedgerWrite>,
    #[serde(default)]
    pub ledger_reads: Vec<String>,
    #[serde(default)]
    pub emits: Vec<EmitSpec>,
    #[serde(default)]
    pub offchain_puts: Vec<u64>,
}

impl TaskSpec {
    pub fn is_empty(&self) -> bool {
        self.ledger_writes.is_empty()
            && self.ledger_reads.is_empty()
            && self.emits.is_empty()
            && self.offchain_puts.is_empty()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("XML syntax error: {0}")]
    XmlSyntax(String),
    #[error("unsupported element <{tag}> (id `{id}`)")]
    UnsupportedElement { id: String, tag: String },
    #[error("flow `{flow}` references unknown node `{node}`")]
    DanglingFlowRef { flow: String, node: String },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("duplicate actor name `{0}`")]
    DuplicateActor(String),
    #[error("flow `{flow}` violates pool boundaries: {reason}")]
    PoolBoundary { flow: String, reason: String },
    #[error("guard on flow `{flow}`: {error}")]
    Guard { flow: String, error: GuardError },
    #[error("invalid attribute on `{id}`: {message}")]
    BadAttribute { id: String, message: String },
}

impl BpmnModel {
    pub fn node(&self, id: &str) -> Option<&FlowNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn actor(&self, id: &str) -> Option<&Actor> {
        self.actors.iter().find(|a| a.id == id)
    }

    pub fn actor_by_name(&self, name: &str) -> Option<&Actor> {
        self.actors.iter().find(|a| a.name == name)
    }

    pub fn seq_in(&self, id: &str) -> impl Iterator<Item = &SequenceFlow> + '_ {
        let id = id.to_string();
        self.sequence_flows.iter().filter(move |f| f.target == id)
    }

    pub fn seq_out(&self, id: &str) -> impl Iterator<Item = &SequenceFlow> + '_ {
        let id = id.to_string();
        self.sequence_flows.iter().filter(move |f| f.source == id)
    }

    /// Number of incoming and outgoing sequence flows per node.
    pub(crate) fn seq_degrees(&self) -> BTreeMap<&str, (usize, usize)> {
        let mut deg: BTreeMap<&str, (usize, usize)> =
            self.nodes.iter().map(|n| (n.id.as_str(), (0, 0))).collect();
        for f in &self.sequence_flows {
            if let Some(d) = deg.get_mut(f.source.as_str()) {
                d.1 += 1;
            }
            if let Some(d) = deg.get_mut(f.target.as_str()) {
                d.0 += 1;
            }
        }
        deg
    }

    /// Re-derives the role of every gateway from its sequence-flow degrees.
    pub(crate) fn refresh_gateway_roles(&mut self) {
        let deg: BTreeMap<String, (usize, usize)> = self
            .seq_degrees()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        for n in &mut self.nodes {
            if let NodeKind::Gateway { gateway, .. } = n.kind {
                let (i, o) = deg[&n.id];
                let role = match (i > 1, o > 1) {
                    (true, true) => GatewayRole::Mixed,
                    (false, true) => GatewayRole::Fork,
                    (true, false) => GatewayRole::Join,
                    (false, false) => GatewayRole::Pass,
                };
                n.kind = NodeKind::Gateway { gateway, role };
            }
        }
    }

    /// Checks the structural invariants every model must satisfy.
    pub(crate) fn check_invariants(&self) -> Result<(), ParseError> {
        let mut ids = BTreeSet::new();
        for id in self
            .nodes
            .iter()
            .map(|n| &n.id)
            .chain(self.sequence_flows.iter().map(|f| &f.id))
            .chain(self.message_flows.iter().map(|f| &f.id))
            .chain(self.actors.iter().map(|a| &a.id))
        {
            if !ids.insert(id.as_str()) {
                return Err(ParseError::DuplicateId(id.clone()));
            }
        }
        let mut names = BTreeSet::new();
        for a in &self.actors {
            if !names.insert(a.name.as_str()) {
                return Err(ParseError::DuplicateActor(a.name.clone()));
            }
        }
        let owner: BTreeMap<&str, &str> = self
            .nodes
            .iter()
            .map(|n| (n.id.as_str(), n.actor.as_str()))
            .collect();
        let check = |flow: &str, s: &str, t: &str, cross: bool| -> Result<(), ParseError> {
            let sa = owner.get(s).ok_or_else(|| ParseError::DanglingFlowRef {
                flow: flow.to_string(),
                node: s.to_string(),
            })?;
            let ta = owner.get(t).ok_or_else(|| ParseError::DanglingFlowRef {
                flow: flow.to_string(),
                node: t.to_string(),
            })?;
            if cross && sa == ta {
                return Err(ParseError::PoolBoundary {
                    flow: flow.to_string(),
                    reason: "message flow stays inside one actor".into(),
                });
            }
            if !cross && sa != ta {
                return Err(ParseError::PoolBoundary {
                    flow: flow.to_string(),
                    reason: "sequence flow crosses actors".into(),
                });
            }
            Ok(())
        };
        for f in &self.sequence_flows {
            check(&f.id, &f.source, &f.target, false)?;
        }
        for f in &self.message_flows {
            check(&f.id, &f.source, &f.target, true)?;
        }
        Ok(())
    }
}
