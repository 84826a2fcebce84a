//! Discrete-event finite state machines synthesized from the flow DAG.
//!
//! Every vertex is fired by exactly one machine. Non-gateway vertices are
//! grouped into stream machines (maximal sequence-flow runs within one actor
//! and one innermost transaction region); each join and each fork gets a
//! machine of its own. A stage that needs several tokens is a hierarchical
//! state whose sub-machine collects them in any order.

mod flatten;
mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bpmn::{GuardText, WriteSource};

pub use flatten::flatten;
pub use synth::{synthesize, JoinMode, SynthError, SynthOptions};

pub const FSM_SCHEMA: &str = "tabsplus-fsm/1";

pub const EV_INIT: &str = "init";

pub fn ev_input(vertex: &str) -> String {
    format!("in:{vertex}")
}

pub fn ev_token(edge: &str) -> String {
    format!("tok:{edge}")
}

pub fn ev_fire(vertex: &str) -> String {
    format!("fire:{vertex}")
}

pub fn ev_decide(vertex: &str) -> String {
    format!("decide:{vertex}")
}

/// Splits an event name into its prefix and referent.
pub fn split_event(name: &str) -> (&str, &str) {
    name.split_once(':').unwrap_or((name, ""))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branch {
    pub event: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guard: Option<GuardText>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Action {
    Mark { vertex: String },
    Read { key: String },
    Write { key: String, size: u64, source: WriteSource },
    Emit { to: String, message: String, size: u64 },
    OffchainPut {
        size: u64,
        digest_key: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        txn: Option<String>,
    },
    Callback { name: String },
    Token { event: String },
    /// Inclusive fork: one token per branch whose guard holds.
    Spawn { branches: Vec<Branch> },
    AccessCheck { txn: String },
    BeginTxn { txn: String },
    CachedRead { txn: String, key: String },
    CachedWrite { txn: String, key: String, size: u64, source: WriteSource },
    /// Certification then write-back of a stand-alone transaction.
    EndTxn { txn: String },
    /// A sub-transaction reports that its work is done and waits for prepare.
    WorkComplete { txn: String },
    /// Coordinator runs two-phase commit over its children; the actions
    /// after it are held until commit and dropped on abort.
    CommitBarrier { txn: String },
}

impl Action {
    pub fn txn(&self) -> Option<&str> {
        match self {
            Action::AccessCheck { txn }
            | Action::BeginTxn { txn }
            | Action::CachedRead { txn, .. }
            | Action::CachedWrite { txn, .. }
            | Action::EndTxn { txn }
            | Action::WorkComplete { txn }
            | Action::CommitBarrier { txn } => Some(txn),
            Action::OffchainPut { txn, .. } => txn.as_deref(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct State {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sub: Option<Box<Fsm>>,
}

impl State {
    pub fn plain(name: impl Into<String>) -> Self {
        State { name: name.into(), sub: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub from: usize,
    pub event: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guard: Option<GuardText>,
    pub actions: Vec<Action>,
    pub to: usize,
}

impl Transition {
    pub fn marks(&self) -> Option<&str> {
        self.actions.iter().find_map(|a| match a {
            Action::Mark { vertex } => Some(vertex.as_str()),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Owner {
    Actor(String),
    Region(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MachineKind {
    Stream,
    Join,
    Fork,
    /// Sub-machine of a hierarchical state.
    Collector,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fsm {
    pub id: String,
    pub owner: Owner,
    pub kind: MachineKind,
    /// Vertices fired by this machine, in firing order.
    pub vertices: Vec<String>,
    pub states: Vec<State>,
    pub initial: usize,
    pub terminal: Vec<usize>,
    pub transitions: Vec<Transition>,
}

impl Fsm {
    pub fn is_flat(&self) -> bool {
        self.states.iter().all(|s| s.sub.is_none())
    }

    pub fn is_terminal(&self, state: usize) -> bool {
        self.terminal.contains(&state)
    }

    /// Transitions leaving `state` on `event`, in declaration order.
    pub fn candidates<'a>(&'a self, state: usize, event: &'a str) -> impl Iterator<Item = (usize, &'a Transition)> + 'a {
        self.transitions
            .iter()
            .enumerate()
            .filter(move |(_, t)| t.from == state && t.event == event)
    }

    /// Every event name this machine (and its sub-machines) reacts to.
    pub fn alphabet(&self) -> Vec<String> {
        let mut out: Vec<String> = self.transitions.iter().map(|t| t.event.clone()).collect();
        for s in &self.states {
            if let Some(sub) = &s.sub {
                out.extend(sub.alphabet());
            }
        }
        out.sort();
        out.dedup();
        out
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.states.iter().position(|s| s.name == name)
    }
}

/// Configuration of a possibly hierarchical machine: the active state and
/// the configuration of its sub-machine.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HierConfig {
    pub state: usize,
    pub sub: Option<Box<HierConfig>>,
}

impl HierConfig {
    pub fn initial(fsm: &Fsm) -> Self {
        Self::enter(fsm, fsm.initial)
    }

    fn enter(fsm: &Fsm, state: usize) -> Self {
        let sub = fsm.states[state].sub.as_ref().map(|m| Box::new(Self::initial(m)));
        HierConfig { state, sub }
    }

    fn settled(&self, fsm: &Fsm) -> bool {
        match (&fsm.states[self.state].sub, &self.sub) {
            (Some(m), Some(c)) => m.is_terminal(c.state) && c.settled(m),
            _ => true,
        }
    }

    pub fn is_terminal(&self, fsm: &Fsm) -> bool {
        fsm.is_terminal(self.state) && self.settled(fsm)
    }

    /// Fires the first transition on `event` whose guard holds. Sub-machine
    /// transitions come before the enclosing state's own, which are only
    /// considered once the sub-machine is terminal. Returns the actions.
    pub fn step(&mut self, fsm: &Fsm, event: &str, guard: &mut dyn FnMut(&Transition) -> bool) -> Option<Vec<Action>> {
        if let (Some(m), Some(c)) = (&fsm.states[self.state].sub, self.sub.as_mut()) {
            if let Some(actions) = c.step(m, event, guard) {
                return Some(actions);
            }
        }
        if !self.settled(fsm) {
            return None;
        }
        let (_, t) = fsm.candidates(self.state, event).find(|(_, t)| guard(t))?;
        let actions = t.actions.clone();
        *self = Self::enter(fsm, t.to);
        Some(actions)
    }
}

/// Machine catalog entry for one event name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventKind {
    pub name: String,
    /// DAG vertex the event originates from.
    pub origin: String,
    /// Machine id consuming the event.
    pub target: String,
    /// Submitted by an actor rather than produced by a machine.
    pub external: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeFsmModel {
    pub schema: String,
    pub actor_machines: BTreeMap<String, Vec<Fsm>>,
    pub control_fsms: Vec<Fsm>,
    pub txn_machines: BTreeMap<String, Vec<Fsm>>,
    pub event_catalog: Vec<EventKind>,
}

impl DeFsmModel {
    /// All machines: actor machines by actor, control machines, then
    /// transaction machines by region.
    pub fn machines(&self) -> impl Iterator<Item = &Fsm> {
        self.actor_machines
            .values()
            .flatten()
            .chain(self.control_fsms.iter())
            .chain(self.txn_machines.values().flatten())
    }

    pub fn machines_mut(&mut self) -> impl Iterator<Item = &mut Fsm> {
        self.actor_machines
            .values_mut()
            .flatten()
            .chain(self.control_fsms.iter_mut())
            .chain(self.txn_machines.values_mut().flatten())
    }

    pub fn machine(&self, id: &str) -> Option<&Fsm> {
        self.machines().find(|m| m.id == id)
    }

    pub fn machine_count(&self) -> usize {
        self.machines().count()
    }

    pub fn event(&self, name: &str) -> Option<&EventKind> {
        self.event_catalog.iter().find(|e| e.name == name)
    }

    /// Event name → consuming machine id.
    pub fn routes(&self) -> BTreeMap<String, String> {
        self.event_catalog.iter().map(|e| (e.name.clone(), e.target.clone())).collect()
    }

    /// Machine id → vertex ids it fires.
    pub fn owners(&self) -> BTreeMap<String, Vec<String>> {
        self.machines().map(|m| (m.id.clone(), m.vertices.clone())).collect()
    }

    /// Number of `Mark` actions per vertex, counted over flat and
    /// hierarchical transitions alike.
    pub fn mark_counts(&self) -> BTreeMap<String, usize> {
        fn visit(m: &Fsm, out: &mut BTreeMap<String, usize>) {
            for t in &m.transitions {
                for a in &t.actions {
                    if let Action::Mark { vertex } = a {
                        *out.entry(vertex.clone()).or_default() += 1;
                    }
                }
            }
            for s in &m.states {
                if let Some(sub) = &s.sub {
                    visit(sub, out);
                }
            }
        }
        let mut out = BTreeMap::new();
        for m in self.machines() {
            visit(m, &mut out);
        }
        out
    }
}
