//! Pattern weaving and the deployable contract package.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpmn::BpmnModel;
use crate::canonical::{sha256_hex, sha256_parts, to_canonical_json};
use crate::fsm::{flatten, split_event, Action, DeFsmModel, Owner, SynthOptions, Transition};
use crate::plan::{actor_method, method_partition, txn_method, Mechanism, MethodPartition, TxnPlan};

pub const PACKAGE_SCHEMA: &str = "tabsplus-package/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EndKind {
    /// Certify, then write the cache back to the ledger.
    Commit,
    /// Report completion to the coordinator and wait for prepare.
    WorkComplete,
    /// Run two-phase commit over the children before continuing.
    CommitBarrier,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheRedirect {
    pub vertex: String,
    pub op: String,
    pub key: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TwoPcConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coordinator: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub participants: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxnPattern {
    pub txn: String,
    pub begin_vertex: String,
    pub end_vertex: String,
    pub end: EndKind,
    pub certify_to: Vec<String>,
    pub cache_redirect: Vec<CacheRedirect>,
    pub access_check: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub two_pc: Option<TwoPcConfig>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deployment {
    pub chain: String,
    pub contract: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractPackage {
    pub schema: String,
    pub model: BpmnModel,
    pub model_digest: String,
    pub plan: TxnPlan,
    pub plan_digest: String,
    pub synth: SynthOptions,
    /// Flat machines with patterns woven in.
    pub fsm: DeFsmModel,
    pub methods: MethodPartition,
    /// Machine id → method name.
    pub machine_method: BTreeMap<String, String>,
    /// Event name → machine id.
    pub routes: BTreeMap<String, String>,
    pub patterns: BTreeMap<String, TxnPattern>,
    pub deployment: BTreeMap<String, Deployment>,
    pub cache_namespace_seed: String,
    pub crypto_cache: bool,
    pub gas_schedule_ref: String,
}

impl ContractPackage {
    pub fn mechanism(&self) -> Mechanism {
        self.plan.mechanism
    }

    /// Machine ids hosted by `method`.
    pub fn method_machines(&self, method: &str) -> Vec<&str> {
        self.machine_method
            .iter()
            .filter(|(_, m)| m.as_str() == method)
            .map(|(k, _)| k.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IsolationViolation {
    pub method: String,
    pub machine: String,
    pub action: String,
    pub referent: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodegenError {
    #[error("isolation violation in {}: {} references {}", .0.method, .0.action, .0.referent)]
    IsolationViolation(IsolationViolation),
    #[error("package schema `{0}` is not supported")]
    SchemaVersionMismatch(String),
    #[error("corrupt package: {0}")]
    CorruptPackage(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerateOptions {
    pub seed: u64,
    pub gas_schedule_ref: String,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions { seed: 0, gas_schedule_ref: "default".into() }
    }
}

fn end_kind(plan: &TxnPlan, txn: &str) -> EndKind {
    match (plan.parent.contains_key(txn), plan.children(txn).is_empty()) {
        (true, _) => EndKind::WorkComplete,
        (false, false) => EndKind::CommitBarrier,
        (false, true) => EndKind::Commit,
    }
}

fn end_action(kind: EndKind, txn: &str) -> Action {
    let txn = txn.to_string();
    match kind {
        EndKind::Commit => Action::EndTxn { txn },
        EndKind::WorkComplete => Action::WorkComplete { txn },
        EndKind::CommitBarrier => Action::CommitBarrier { txn },
    }
}

fn weave_transition(t: &mut Transition, owner: &Owner, plan: &TxnPlan) {
    let region = match owner {
        Owner::Region(r) => Some(r.as_str()),
        Owner::Actor(_) => None,
    };
    let marked = t.marks().map(String::from);
    let mut begins: Vec<&String> = plan
        .transactions
        .iter()
        .filter(|r| marked.as_deref() == Some(plan.entry[*r].as_str()))
        .collect();
    begins.sort_by_key(|r| std::cmp::Reverse(plan.members[*r].len()));
    let mut ends: Vec<&String> = plan
        .transactions
        .iter()
        .filter(|r| marked.as_deref() == Some(plan.exit[*r].as_str()))
        .collect();
    ends.sort_by_key(|r| plan.members[*r].len());

    let mut out = Vec::new();
    if let Some(r) = region {
        if split_event(&t.event).0 == "in" {
            out.push(Action::AccessCheck { txn: r.to_string() });
        }
    }
    out.extend(begins.iter().map(|r| Action::BeginTxn { txn: r.to_string() }));
    let mut ended = false;
    for a in std::mem::take(&mut t.actions) {
        let is_flow = matches!(a, Action::Token { .. } | Action::Spawn { .. });
        if is_flow && !ended {
            out.extend(ends.iter().map(|r| end_action(end_kind(plan, r), r)));
            ended = true;
        }
        out.push(match (a, region) {
            (Action::Read { key }, Some(r)) => Action::CachedRead { txn: r.to_string(), key },
            (Action::Write { key, size, source }, Some(r)) => Action::CachedWrite { txn: r.to_string(), key, size, source },
            (Action::OffchainPut { size, digest_key, .. }, Some(r)) => {
                Action::OffchainPut { size, digest_key, txn: Some(r.to_string()) }
            }
            (a, _) => a,
        });
    }
    if !ended {
        out.extend(ends.iter().map(|r| end_action(end_kind(plan, r), r)));
    }
    t.actions = out;
}

/// Flattens the model and rewrites transaction-region transitions with
/// begin, cache-redirect, access-check and end patterns.
pub fn weave(model: &DeFsmModel, plan: &TxnPlan) -> DeFsmModel {
    let mut flat = flatten(model);
    for m in flat.machines_mut() {
        let owner = m.owner.clone();
        for t in &mut m.transitions {
            weave_transition(t, &owner, plan);
        }
    }
    flat
}

fn patterns(fsm: &DeFsmModel, plan: &TxnPlan) -> BTreeMap<String, TxnPattern> {
    let mut out = BTreeMap::new();
    for t in &plan.transactions {
        let mut redirect = Vec::new();
        for m in fsm.txn_machines.get(t).into_iter().flatten() {
            for tr in &m.transitions {
                let vertex = tr.marks().unwrap_or_default().to_string();
                for a in &tr.actions {
                    let (op, key) = match a {
                        Action::CachedRead { key, .. } => ("read", key),
                        Action::CachedWrite { key, .. } => ("write", key),
                        _ => continue,
                    };
                    redirect.push(CacheRedirect { vertex: vertex.clone(), op: op.into(), key: key.clone() });
                }
            }
        }
        let children = plan.children(t).to_vec();
        let parent = plan.parent.get(t).cloned();
        let two_pc = (parent.is_some() || !children.is_empty())
            .then_some(TwoPcConfig { coordinator: parent, participants: children });
        out.insert(
            t.clone(),
            TxnPattern {
                txn: t.clone(),
                begin_vertex: plan.entry[t].clone(),
                end_vertex: plan.exit[t].clone(),
                end: end_kind(plan, t),
                certify_to: plan.participants[t].clone(),
                cache_redirect: redirect,
                access_check: plan.participants[t].clone(),
                two_pc,
            },
        );
    }
    out
}

fn deployment(methods: &MethodPartition, mechanism: Mechanism) -> BTreeMap<String, Deployment> {
    methods
        .methods
        .iter()
        .map(|m| {
            let is_txn = m.name.starts_with("txn:");
            let (chain, contract) = match (mechanism, is_txn) {
                (Mechanism::Sc2s, true) => ("side", "c1"),
                (Mechanism::Sc2m, true) => ("main", "c1"),
                _ => ("main", "c0"),
            };
            (m.name.clone(), Deployment { chain: chain.into(), contract: contract.into() })
        })
        .collect()
}

pub fn generate(
    model: &BpmnModel,
    fsm: &DeFsmModel,
    plan: &TxnPlan,
    synth: SynthOptions,
    options: &GenerateOptions,
) -> Result<ContractPackage, CodegenError> {
    let woven = weave(fsm, plan);
    let actors: Vec<String> = model.actors.iter().map(|a| a.id.clone()).collect();
    let methods = method_partition(plan, &actors);
    let machine_method = woven
        .machines()
        .map(|m| {
            let method = match &m.owner {
                Owner::Actor(a) => actor_method(a),
                Owner::Region(r) => txn_method(r),
            };
            (m.id.clone(), method)
        })
        .collect();
    let model_digest = sha256_hex(to_canonical_json(model).as_bytes());
    let plan_digest = sha256_hex(to_canonical_json(plan).as_bytes());
    let seed = hex::encode(sha256_parts(&[model_digest.as_bytes(), plan_digest.as_bytes(), &options.seed.to_le_bytes()]));
    let package = ContractPackage {
        schema: PACKAGE_SCHEMA.into(),
        model: model.clone(),
        model_digest,
        plan: plan.clone(),
        plan_digest,
        synth,
        routes: woven.routes(),
        patterns: patterns(&woven, plan),
        fsm: woven,
        deployment: deployment(&methods, plan.mechanism),
        methods,
        machine_method,
        cache_namespace_seed: seed,
        crypto_cache: plan.crypto_cache,
        gas_schedule_ref: options.gas_schedule_ref.clone(),
    };
    if let Some(v) = static_isolation_check(&package).into_iter().next() {
        return Err(CodegenError::IsolationViolation(v));
    }
    Ok(package)
}

/// Checks that transaction methods only touch their own cache namespace,
/// notify participants only, and hand control out of their region only at
/// the region exit; interpreter methods must not touch any cache.
pub fn static_isolation_check(package: &ContractPackage) -> Vec<IsolationViolation> {
    let plan = &package.plan;
    let edge_target: BTreeMap<&str, &str> = package
        .model
        .sequence_flows
        .iter()
        .map(|f| (f.id.as_str(), f.target.as_str()))
        .chain(package.model.message_flows.iter().map(|f| (f.id.as_str(), f.target.as_str())))
        .collect();
    let actor_ids: BTreeMap<&str, &str> = package
        .model
        .actors
        .iter()
        .map(|a| (a.id.as_str(), a.id.as_str()))
        .chain(package.model.actors.iter().map(|a| (a.name.as_str(), a.id.as_str())))
        .collect();

    let mut out = Vec::new();
    for m in package.fsm.machines() {
        let method = package.machine_method.get(&m.id).cloned().unwrap_or_default();
        let mut flag = |action: &Action, referent: String| {
            out.push(IsolationViolation {
                method: method.clone(),
                machine: m.id.clone(),
                action: serde_json::to_string(action).unwrap_or_default(),
                referent,
            })
        };
        match &m.owner {
            Owner::Actor(_) => {
                for t in &m.transitions {
                    for a in &t.actions {
                        if let Some(txn) = a.txn() {
                            flag(a, format!("transaction `{txn}`"));
                        }
                    }
                }
            }
            Owner::Region(r) => {
                let ancestry: BTreeSet<String> = plan.ancestry(r).into_iter().collect();
                let members: BTreeSet<&str> = plan.members.get(r).into_iter().flatten().map(String::as_str).collect();
                let participants = plan.participants.get(r).cloned().unwrap_or_default();
                for t in &m.transitions {
                    let at_exit = t.marks() == plan.exit.get(r).map(String::as_str);
                    for a in &t.actions {
                        match a {
                            Action::Read { key } | Action::Write { key, .. } => flag(a, format!("ledger key `{key}`")),
                            Action::CachedRead { txn, .. } | Action::CachedWrite { txn, .. } if txn != r => {
                                flag(a, format!("cache of `{txn}`"))
                            }
                            Action::OffchainPut { txn, .. } if txn.as_deref() != Some(r.as_str()) => {
                                flag(a, format!("digest outside cache of `{r}`"))
                            }
                            Action::Emit { to, .. } => {
                                let id = actor_ids.get(to.as_str()).copied().unwrap_or(to.as_str());
                                if !participants.iter().any(|p| p == id) {
                                    flag(a, format!("non-participant `{to}`"));
                                }
                            }
                            Action::Token { event } => {
                                let (kind, referent) = split_event(event);
                                if kind != "tok" {
                                    continue;
                                }
                                let target = edge_target.get(referent).copied().unwrap_or_default();
                                if !members.contains(target) && !at_exit {
                                    flag(a, format!("vertex `{target}` outside `{r}`"));
                                }
                            }
                            _ => {
                                if let Some(txn) = a.txn() {
                                    if !ancestry.contains(txn) {
                                        flag(a, format!("transaction `{txn}`"));
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn serialize(package: &ContractPackage) -> String {
    to_canonical_json(package)
}

pub fn deserialize(text: &str) -> Result<ContractPackage, CodegenError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CodegenError::CorruptPackage(e.to_string()))?;
    match value.get("schema").and_then(|s| s.as_str()) {
        Some(PACKAGE_SCHEMA) => {}
        Some(other) => return Err(CodegenError::SchemaVersionMismatch(other.to_string())),
        None => return Err(CodegenError::CorruptPackage("missing schema".into())),
    }
    serde_json::from_value(value).map_err(|e| CodegenError::CorruptPackage(e.to_string()))
}
