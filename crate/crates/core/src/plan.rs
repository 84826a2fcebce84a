//! Transaction plans: which candidate regions become trade transactions,
//! how they nest, which mechanism hosts them, and the resulting method
//! partition.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::FlowDag;
use crate::sese::{Region, RegionForest};

pub const PLAN_SCHEMA: &str = "tabsplus-plan/1";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mechanism {
    #[default]
    #[serde(rename = "sc-all")]
    ScAll,
    #[serde(rename = "sc-2m")]
    Sc2m,
    #[serde(rename = "sc-2s")]
    Sc2s,
}

impl Mechanism {
    pub const ALL: [Mechanism; 3] = [Mechanism::ScAll, Mechanism::Sc2m, Mechanism::Sc2s];

    pub fn label(self) -> &'static str {
        match self {
            Mechanism::ScAll => "sc-all",
            Mechanism::Sc2m => "sc-2m",
            Mechanism::Sc2s => "sc-2s",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Mechanism {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mechanism::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| PlanError::UnsupportedMechanism(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub region: String,
    #[serde(default = "yes")]
    pub transaction: bool,
}

fn yes() -> bool {
    true
}

/// What the developer submits: a plan file or the body of the plan endpoint.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanInput {
    #[serde(default)]
    pub schema: Option<String>,
    #[serde(default)]
    pub selections: Vec<Selection>,
    #[serde(default)]
    pub mechanism: Mechanism,
    #[serde(default)]
    pub crypto_cache: bool,
}

impl PlanInput {
    pub fn new(regions: &[&str], mechanism: Mechanism, crypto_cache: bool) -> Self {
        PlanInput {
            schema: Some(PLAN_SCHEMA.into()),
            selections: regions
                .iter()
                .map(|r| Selection { region: r.to_string(), transaction: true })
                .collect(),
            mechanism,
            crypto_cache,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, PlanError> {
        let input: PlanInput = serde_json::from_str(text).map_err(|e| PlanError::Malformed(e.to_string()))?;
        match input.schema.as_deref() {
            None | Some(PLAN_SCHEMA) => Ok(input),
            Some(other) => Err(PlanError::SchemaVersionMismatch(other.to_string())),
        }
    }
}

/// A validated plan with derived nesting and participants.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxnPlan {
    pub schema: String,
    pub selections: Vec<Selection>,
    pub mechanism: Mechanism,
    pub crypto_cache: bool,
    /// Selected transactions in candidate order.
    pub transactions: Vec<String>,
    /// Nearest selected ancestor of each nested transaction.
    pub parent: BTreeMap<String, String>,
    /// Children of each transaction that has any.
    pub nesting: BTreeMap<String, Vec<String>>,
    pub participants: BTreeMap<String, Vec<String>>,
    pub members: BTreeMap<String, Vec<String>>,
    pub entry: BTreeMap<String, String>,
    pub exit: BTreeMap<String, String>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl TxnPlan {
    pub fn empty(mechanism: Mechanism) -> Self {
        TxnPlan {
            schema: PLAN_SCHEMA.into(),
            selections: Vec::new(),
            mechanism,
            crypto_cache: false,
            transactions: Vec::new(),
            parent: BTreeMap::new(),
            nesting: BTreeMap::new(),
            participants: BTreeMap::new(),
            members: BTreeMap::new(),
            entry: BTreeMap::new(),
            exit: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }

    pub fn children(&self, txn: &str) -> &[String] {
        self.nesting.get(txn).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn roots(&self) -> impl Iterator<Item = &String> {
        self.transactions.iter().filter(|t| !self.parent.contains_key(*t))
    }

    /// Depth-first pre-order over a transaction subtree.
    pub fn subtree(&self, txn: &str) -> Vec<String> {
        let mut out = vec![txn.to_string()];
        for c in self.children(txn) {
            out.extend(self.subtree(c));
        }
        out
    }

    /// Path from `txn` up to its root, starting with `txn`.
    pub fn ancestry(&self, txn: &str) -> Vec<String> {
        let mut out = vec![txn.to_string()];
        let mut cur = txn;
        while let Some(p) = self.parent.get(cur) {
            out.push(p.clone());
            cur = p;
        }
        out
    }

    pub fn is_participant(&self, txn: &str, actor: &str) -> bool {
        self.participants.get(txn).is_some_and(|p| p.iter().any(|a| a == actor))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("unknown region `{0}`")]
    PlanRegionUnknown(String),
    #[error("regions `{0}` and `{1}` overlap without nesting")]
    OverlapNotNested(String, String),
    #[error("region `{0}` selected twice")]
    DuplicateSelection(String),
    #[error("unsupported mechanism `{0}`")]
    UnsupportedMechanism(String),
    #[error("plan schema `{0}` is not supported")]
    SchemaVersionMismatch(String),
    #[error("malformed plan: {0}")]
    Malformed(String),
}

impl PlanError {
    pub fn code(&self) -> &'static str {
        match self {
            PlanError::PlanRegionUnknown(_) => "PlanRegionUnknown",
            PlanError::OverlapNotNested(..) => "OverlapNotNested",
            PlanError::DuplicateSelection(_) => "DuplicateSelection",
            PlanError::UnsupportedMechanism(_) => "UnsupportedMechanism",
            PlanError::SchemaVersionMismatch(_) => "SchemaVersionMismatch",
            PlanError::Malformed(_) => "Malformed",
        }
    }
}

/// Actors owning at least one member vertex, sorted by id.
pub fn derive_participants(region: &Region, dag: &FlowDag) -> Vec<String> {
    let set: BTreeSet<&str> = region.members.iter().map(|&v| dag.vertices[v].actor.as_str()).collect();
    set.into_iter().map(String::from).collect()
}

pub fn validate_selection(dag: &FlowDag, forest: &RegionForest, input: &PlanInput) -> Result<TxnPlan, PlanError> {
    let mut chosen: Vec<&Region> = Vec::new();
    let mut seen = BTreeSet::new();
    for s in &input.selections {
        let region = forest
            .get(&s.region)
            .ok_or_else(|| PlanError::PlanRegionUnknown(s.region.clone()))?;
        if !seen.insert(s.region.as_str()) {
            return Err(PlanError::DuplicateSelection(s.region.clone()));
        }
        if s.transaction {
            chosen.push(region);
        }
    }
    let order = |id: &str| forest.regions.iter().position(|r| r.id == id).unwrap();
    chosen.sort_by_key(|r| order(&r.id));

    for (i, a) in chosen.iter().enumerate() {
        for b in &chosen[i + 1..] {
            let nested = a.members.is_subset(&b.members) || b.members.is_subset(&a.members);
            if !nested && !a.members.is_disjoint(&b.members) {
                return Err(PlanError::OverlapNotNested(a.id.clone(), b.id.clone()));
            }
        }
    }

    let mut plan = TxnPlan::empty(input.mechanism);
    plan.selections = input.selections.clone();
    plan.crypto_cache = input.crypto_cache;
    for r in &chosen {
        plan.transactions.push(r.id.clone());
        plan.participants.insert(r.id.clone(), derive_participants(r, dag));
        plan.members
            .insert(r.id.clone(), r.members.iter().map(|&v| dag.vertices[v].id.clone()).collect());
        plan.entry.insert(r.id.clone(), dag.vertices[r.entry].id.clone());
        plan.exit.insert(r.id.clone(), dag.vertices[r.exit].id.clone());
        // selected containers form a chain; the smallest is the nearest
        let parent = chosen
            .iter()
            .filter(|p| p.strictly_contains(r))
            .min_by_key(|p| p.members.len());
        if let Some(p) = parent {
            plan.parent.insert(r.id.clone(), p.id.clone());
            plan.nesting.entry(p.id.clone()).or_default().push(r.id.clone());
        }
    }
    for (child, parent) in &plan.parent {
        let pp = &plan.participants[parent];
        let extra: Vec<&String> = plan.participants[child].iter().filter(|a| !pp.contains(a)).collect();
        if !extra.is_empty() {
            plan.warnings.push(format!(
                "participants of `{child}` not in parent `{parent}`: {}",
                extra.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            ));
        }
    }
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodRole {
    ActorInterpreter,
    Txn,
    TxnCoordinator,
    TxnParticipant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Method {
    pub name: String,
    pub role: MethodRole,
    /// Actor id or region id.
    pub owner: String,
    /// Coordinator of this method when it is a sub-transaction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    /// Sub-transactions coordinated by this method.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodPartition {
    pub methods: Vec<Method>,
}

impl MethodPartition {
    pub fn len(&self) -> usize {
        self.methods.len()
    }

    pub fn is_empty(&self) -> bool {
        self.methods.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Method> {
        self.methods.iter().find(|m| m.name == name)
    }
}

pub fn actor_method(actor: &str) -> String {
    format!("actor:{actor}")
}

pub fn txn_method(txn: &str) -> String {
    format!("txn:{txn}")
}

/// One interpreter method per actor plus one method per selected region,
/// flavoured by its position in the nesting forest.
pub fn method_partition(plan: &TxnPlan, actors: &[String]) -> MethodPartition {
    let mut methods: Vec<Method> = actors
        .iter()
        .map(|a| Method {
            name: actor_method(a),
            role: MethodRole::ActorInterpreter,
            owner: a.clone(),
            parent: None,
            children: Vec::new(),
        })
        .collect();
    for t in &plan.transactions {
        let children = plan.children(t).to_vec();
        let parent = plan.parent.get(t).cloned();
        let role = match (&parent, children.is_empty()) {
            (_, false) => MethodRole::TxnCoordinator,
            (Some(_), true) => MethodRole::TxnParticipant,
            (None, true) => MethodRole::Txn,
        };
        methods.push(Method { name: txn_method(t), role, owner: t.clone(), parent, children });
    }
    MethodPartition { methods }
}
