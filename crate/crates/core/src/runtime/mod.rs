//! Discrete-event interpreter: runs a contract package against the
//! simulated ledger, one native invocation per machine step.
//!
//! Events sit in a queue ordered by logical timestamp, then by insertion.
//! An event that reaches a machine with no transition on it in the current
//! state is deferred and re-queued after that machine next fires. External
//! inputs are checked for credential, ownership, access and conformance
//! before they are queued.

mod cache;
mod trace;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

use crate::codegen::ContractPackage;
use crate::fsm::{ev_input, split_event, Action, Fsm, Owner, EV_INIT};
use crate::graph::build_dag;
use crate::ledger::{GasSchedule, Invocation, Ledger, MemoryStore, Usage, MAIN, SIDE};
use crate::plan::{txn_method, Mechanism};

pub use cache::{hidden_key, state_key};
pub use trace::{parse_trace, run_trace, trace_to_jsonl, TraceError, TraceOutcome};

use cache::{ApplyBatch, Env, Outcome};

pub const DEFAULT_VOTE_TIMEOUT: u64 = 1000;
pub const APPLY_METHOD: &str = "apply";
const ENTRY_CONTRACT: &str = "c0";
const MAX_STEPS: usize = 1_000_000;

/// Injected failures, keyed by vertex id (`revert_at`) or transaction id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Faults {
    #[serde(default)]
    pub revert_at: BTreeSet<String>,
    #[serde(default)]
    pub vote_no: BTreeSet<String>,
    #[serde(default)]
    pub crash_before_vote: BTreeSet<String>,
    /// The coordinator crashes after collecting votes; recovery aborts.
    #[serde(default)]
    pub coordinator_crash: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeOptions {
    pub schedule: GasSchedule,
    pub run_id: String,
    pub vote_timeout: u64,
    /// Children acknowledge the commit message.
    pub acks: bool,
    pub faults: Faults,
}

impl Default for RuntimeOptions {
    fn default() -> Self {
        RuntimeOptions {
            schedule: GasSchedule::default(),
            run_id: "run-0".into(),
            vote_timeout: DEFAULT_VOTE_TIMEOUT,
            acks: true,
            faults: Faults::default(),
        }
    }
}

/// One trace line: who acts, on which task, with what payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalInput {
    /// Actor credential.
    pub actor: String,
    pub origin: String,
    #[serde(default = "empty_payload")]
    pub payload: Json,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts: Option<u64>,
}

fn empty_payload() -> Json {
    Json::Object(Default::default())
}

impl ExternalInput {
    pub fn new(actor: &str, origin: &str) -> Self {
        ExternalInput { actor: actor.into(), origin: origin.into(), payload: empty_payload(), ts: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxnState {
    NotStarted,
    Active,
    Preparing,
    Ready,
    Committed,
    Aborted,
}

impl TxnState {
    pub fn can_move(self, to: TxnState) -> bool {
        use TxnState::*;
        matches!(
            (self, to),
            (NotStarted, Active)
                | (NotStarted, Aborted)
                | (Active, Preparing)
                | (Active, Committed)
                | (Active, Aborted)
                | (Preparing, Ready)
                | (Preparing, Aborted)
                | (Ready, Committed)
                | (Ready, Aborted)
        )
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn is_started(self) -> bool {
        !matches!(self, TxnState::NotStarted | TxnState::Aborted)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub len: u64,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TxnContext {
    pub id: String,
    pub state: TxnState,
    pub read_set: BTreeMap<String, String>,
    pub write_set: BTreeMap<String, CacheEntry>,
    pub hidden_keys: BTreeSet<String>,
    pub versions: u64,
    pub work_complete: bool,
    pub barrier: bool,
    pub votes: BTreeMap<String, bool>,
    pub acks: usize,
    #[serde(skip)]
    held: Option<(Vec<Action>, Json)>,
}

impl TxnContext {
    fn new(id: &str) -> Self {
        TxnContext {
            id: id.into(),
            state: TxnState::NotStarted,
            read_set: BTreeMap::new(),
            write_set: BTreeMap::new(),
            hidden_keys: BTreeSet::new(),
            versions: 0,
            work_complete: false,
            barrier: false,
            votes: BTreeMap::new(),
            acks: 0,
            held: None,
        }
    }
}

/// Submission errors. Rejected inputs leave the runtime untouched.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RuntimeError {
    #[error("unknown actor credential `{0}`")]
    UnknownActor(String),
    #[error("`{0}` is not a task of the model")]
    UnknownOrigin(String),
    #[error("actor `{actor}` is not a participant of transaction `{txn}`")]
    AccessDenied { actor: String, txn: String },
    #[error("task `{origin}` belongs to `{owner}`, not `{actor}`")]
    NotOwner { actor: String, origin: String, owner: String },
    #[error("`{origin}` is not enabled; expected one of {expected:?}")]
    NonConformant { origin: String, expected: Vec<String> },
    #[error("an input for `{0}` is already queued")]
    AlreadyQueued(String),
    #[error("ledger: {0}")]
    Ledger(String),
    #[error("package: {0}")]
    Package(String),
}

impl RuntimeError {
    pub fn code(&self) -> &'static str {
        match self {
            RuntimeError::UnknownActor(_) => "UnknownActor",
            RuntimeError::UnknownOrigin(_) => "UnknownOrigin",
            RuntimeError::AccessDenied { .. } => "AccessDenied",
            RuntimeError::NotOwner { .. } => "NotOwner",
            RuntimeError::NonConformant { .. } => "NonConformant",
            RuntimeError::AlreadyQueued(_) => "AlreadyQueued",
            RuntimeError::Ledger(_) => "LedgerError",
            RuntimeError::Package(_) => "PackageError",
        }
    }
}

/// Failure inside a step; the native invocation reverts.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StepError {
    #[error("injected failure at `{0}`")]
    Injected(String),
    #[error("actor `{actor}` is not a participant of `{txn}`")]
    AccessDenied { actor: String, txn: String },
    #[error("transaction `{txn}` is {state:?}, cannot move to {wanted:?}")]
    WrongState { txn: String, state: TxnState, wanted: TxnState },
    #[error("payload field `{0}` is missing")]
    MissingPayloadField(String),
    #[error("guard: {0}")]
    Guard(String),
    #[error("no branch of the inclusive fork is enabled")]
    NoBranch,
    #[error("cached value for `{0}` failed its integrity check")]
    CryptoIntegrity(String),
    #[error("offchain store: {0}")]
    Offchain(String),
    #[error("unknown transaction `{0}`")]
    UnknownTxn(String),
    #[error("ledger: {0}")]
    Ledger(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Fired,
    Deferred,
    Dropped,
    Reverted,
    Protocol,
    Dispatch,
    Relay,
    Note,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    pub ts: u64,
    pub event: String,
    pub kind: StepKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub machine: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub marks: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to_state: Option<String>,
    pub gas: u64,
    pub usage: Usage,
    /// Two-phase commit phase for protocol steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub txn: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
/// One committed transaction and the ledger keys it wrote, in commit order.
pub struct CommitEntry {
    pub txn: String,
    pub keys: Vec<String>,
    pub chain: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub mechanism: Mechanism,
    pub completed: bool,
    pub marked: Vec<String>,
    pub enabled: Vec<String>,
    pub machine_states: BTreeMap<String, String>,
    pub txn_states: BTreeMap<String, TxnState>,
    pub gas_total: u64,
    pub gas_by_chain: BTreeMap<String, u64>,
    pub gas_by_method: BTreeMap<String, u64>,
    pub usage: Usage,
    pub commit_order: Vec<CommitEntry>,
    pub block_hashes: BTreeMap<String, Vec<String>>,
    pub errors: Vec<String>,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone)]
enum Proto {
    Start(String),
    Prepare(String),
    Vote { from: String, to: String, yes: bool },
    Timeout(String),
    Apply(String),
    Broadcast(String),
    Commit(String),
    Ack { from: String, to: String },
    Recover(String),
}

#[derive(Debug, Clone)]
enum QEvent {
    Machine(String),
    Proto(Proto),
}

#[derive(Debug, Clone)]
struct Queued {
    ts: u64,
    event: QEvent,
    payload: Json,
    caller: Option<String>,
}

#[derive(Debug, Clone)]
struct MachineRt {
    fsm: Fsm,
    state: usize,
    halted: bool,
    deferred: Vec<Queued>,
    method: String,
    region: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Runtime {
    pkg: ContractPackage,
    options: RuntimeOptions,
    machines: Vec<MachineRt>,
    machine_ix: BTreeMap<String, usize>,
    credentials: BTreeMap<String, String>,
    sink: String,
    queue: BTreeMap<(u64, u64), Queued>,
    clock: u64,
    seq: u64,
    ledger: Ledger,
    offchain: MemoryStore,
    txns: BTreeMap<String, TxnContext>,
    steps: Vec<StepRecord>,
    marked: Vec<String>,
    commit_log: Vec<CommitEntry>,
    errors: Vec<String>,
}

fn record(event: &str, kind: StepKind) -> StepRecord {
    StepRecord {
        index: 0,
        ts: 0,
        event: event.to_string(),
        kind,
        machine: None,
        method: None,
        chain: None,
        marks: Vec::new(),
        to_state: None,
        gas: 0,
        usage: Usage::default(),
        phase: None,
        txn: None,
        detail: None,
    }
}

impl Runtime {
    /// Deploys the package on a fresh ledger and runs the `init` event to
    /// quiescence.
    pub fn new(pkg: ContractPackage, options: RuntimeOptions) -> Result<Self, RuntimeError> {
        let dag = build_dag(&pkg.model).map_err(|e| RuntimeError::Package(e.to_string()))?;
        let sink = dag.vertices[dag.sink].id.clone();
        let mut ledger = Ledger::new(options.schedule, pkg.mechanism() == Mechanism::Sc2s);
        for (method, d) in &pkg.deployment {
            ledger.chain_mut(&d.chain).map_err(|e| RuntimeError::Ledger(e.to_string()))?.deploy(method);
        }
        ledger.main.deploy(APPLY_METHOD);
        let mut machines = Vec::new();
        let mut machine_ix = BTreeMap::new();
        for m in pkg.fsm.machines() {
            let method = pkg
                .machine_method
                .get(&m.id)
                .cloned()
                .ok_or_else(|| RuntimeError::Package(format!("machine `{}` has no method", m.id)))?;
            let region = match &m.owner {
                Owner::Region(r) => Some(r.clone()),
                Owner::Actor(_) => None,
            };
            machine_ix.insert(m.id.clone(), machines.len());
            machines.push(MachineRt { fsm: m.clone(), state: m.initial, halted: false, deferred: Vec::new(), method, region });
        }
        let credentials = pkg.model.actors.iter().map(|a| (a.credential.clone(), a.id.clone())).collect();
        let txns = pkg.plan.transactions.iter().map(|t| (t.clone(), TxnContext::new(t))).collect();
        let mut rt = Runtime {
            pkg,
            options,
            machines,
            machine_ix,
            credentials,
            sink,
            queue: BTreeMap::new(),
            clock: 0,
            seq: 0,
            ledger,
            offchain: MemoryStore::new(),
            txns,
            steps: Vec::new(),
            marked: Vec::new(),
            commit_log: Vec::new(),
            errors: Vec::new(),
        };
        rt.enqueue(QEvent::Machine(EV_INIT.into()), empty_payload(), None, None);
        rt.run_to_quiescence();
        Ok(rt)
    }

    pub fn package(&self) -> &ContractPackage {
        &self.pkg
    }

    pub fn options(&self) -> &RuntimeOptions {
        &self.options
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    /// Direct ledger access, for fault injection in tests.
    pub fn ledger_mut(&mut self) -> &mut Ledger {
        &mut self.ledger
    }

    pub fn offchain(&self) -> &MemoryStore {
        &self.offchain
    }

    pub fn txn(&self, id: &str) -> Option<&TxnContext> {
        self.txns.get(id)
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn marked(&self) -> &[String] {
        &self.marked
    }

    pub fn is_complete(&self) -> bool {
        self.marked.contains(&self.sink)
    }

    pub fn errors(&self) -> &[String] {
        &self.errors
    }

    fn enqueue(&mut self, event: QEvent, payload: Json, caller: Option<String>, at: Option<u64>) {
        self.clock_tick();
        let ts = at.filter(|t| *t > self.clock).unwrap_or(self.clock);
        self.seq += 1;
        self.queue.insert((ts, self.seq), Queued { ts, event, payload, caller });
    }

    fn clock_tick(&mut self) {
        self.clock += 1;
    }

    fn chain_of(&self, method: &str) -> String {
        self.pkg.deployment.get(method).map_or_else(|| MAIN.to_string(), |d| d.chain.clone())
    }

    fn contract_of(&self, method: &str) -> String {
        self.pkg.deployment.get(method).map_or_else(|| ENTRY_CONTRACT.to_string(), |d| d.contract.clone())
    }

    fn push_step(&mut self, mut rec: StepRecord, ts: u64) {
        rec.index = self.steps.len();
        rec.ts = ts;
        self.steps.push(rec);
    }

    /// Charges the hop from the sending method to the machine consuming
    /// `event`: an extra call between contracts on one chain, or a relayed
    /// message between chains.
    fn send(&mut self, event: &str, payload: Json, caller: Option<String>, from_method: Option<&str>) {
        let target = self
            .pkg
            .routes
            .get(event)
            .and_then(|m| self.pkg.machine_method.get(m))
            .cloned();
        if let Some(target) = target {
            let (from_contract, from_chain) = match from_method {
                Some(m) => (self.contract_of(m), self.chain_of(m)),
                None => (ENTRY_CONTRACT.to_string(), MAIN.to_string()),
            };
            let (to_contract, to_chain) = (self.contract_of(&target), self.chain_of(&target));
            if from_contract != to_contract {
                let bytes = payload.to_string().len() as u64;
                let receipt = if from_chain != to_chain {
                    self.ledger.relay(&from_chain, &to_chain, event, bytes).ok()
                } else {
                    let usage = Usage { invokes: 1, ..Usage::default() };
                    self.ledger
                        .chain_mut(&from_chain)
                        .ok()
                        .map(|c| c.charge_system(&format!("dispatch:{event}"), &to_contract, usage))
                };
                if let Some(r) = receipt {
                    let kind = if from_chain != to_chain { StepKind::Relay } else { StepKind::Dispatch };
                    let mut rec = record(event, kind);
                    rec.chain = Some(r.chain);
                    rec.method = Some(target);
                    rec.gas = r.gas_used;
                    rec.usage = r.usage;
                    self.push_step(rec, self.clock);
                }
            }
        }
        self.enqueue(QEvent::Machine(event.to_string()), payload, caller, None);
    }

    /// Validates an external input and queues it.
    pub fn submit(&mut self, input: &ExternalInput) -> Result<(), RuntimeError> {
        let actor = self
            .credentials
            .get(&input.actor)
            .cloned()
            .ok_or_else(|| RuntimeError::UnknownActor(input.actor.clone()))?;
        let node = self
            .pkg
            .model
            .node(&input.origin)
            .filter(|n| n.kind.needs_input())
            .ok_or_else(|| RuntimeError::UnknownOrigin(input.origin.clone()))?;
        let event = ev_input(&input.origin);
        let mi = self
            .pkg
            .routes
            .get(&event)
            .and_then(|m| self.machine_ix.get(m))
            .copied()
            .ok_or_else(|| RuntimeError::UnknownOrigin(input.origin.clone()))?;
        if let Some(r) = &self.machines[mi].region {
            if !self.pkg.plan.is_participant(r, &actor) {
                return Err(RuntimeError::AccessDenied { actor, txn: r.clone() });
            }
        }
        if node.actor != actor {
            return Err(RuntimeError::NotOwner { actor, origin: input.origin.clone(), owner: node.actor.clone() });
        }
        let m = &self.machines[mi];
        if m.halted || m.fsm.candidates(m.state, &event).next().is_none() {
            return Err(RuntimeError::NonConformant { origin: input.origin.clone(), expected: self.enabled() });
        }
        if self.queued_input(&event) {
            return Err(RuntimeError::AlreadyQueued(input.origin.clone()));
        }
        let ts = input.ts;
        self.send(&event, input.payload.clone(), Some(actor), None);
        if let (Some(ts), Some((&key, _))) = (ts, self.queue.iter().next_back()) {
            // honour an explicit timestamp if it lies in the future
            if ts > key.0 {
                let mut q = self.queue.remove(&key).expect("just queued");
                q.ts = ts;
                self.queue.insert((ts, key.1), q);
            }
        }
        Ok(())
    }

    fn queued_input(&self, event: &str) -> bool {
        self.queue.values().any(|q| matches!(&q.event, QEvent::Machine(e) if e == event))
    }

    /// Task vertices that accept an external input right now, in model order.
    pub fn enabled(&self) -> Vec<String> {
        let mut ready = BTreeSet::new();
        for m in self.machines.iter().filter(|m| !m.halted) {
            for t in m.fsm.transitions.iter().filter(|t| t.from == m.state) {
                let (kind, v) = split_event(&t.event);
                if kind == "in" && !self.queued_input(&t.event) {
                    ready.insert(v.to_string());
                }
            }
        }
        self.pkg.model.nodes.iter().filter(|n| ready.contains(&n.id)).map(|n| n.id.clone()).collect()
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    /// Processes queued events until none are left.
    pub fn run_to_quiescence(&mut self) {
        let mut n = 0;
        while let Some((_, q)) = self.queue.pop_first() {
            self.clock = self.clock.max(q.ts);
            n += 1;
            if n > MAX_STEPS {
                self.errors.push("step limit reached".into());
                self.queue.clear();
                break;
            }
            match q.event.clone() {
                QEvent::Machine(name) => self.deliver(&name, q),
                QEvent::Proto(p) => self.protocol(p, q.ts),
            }
        }
        self.ledger.seal_all();
    }

    /// Submits an input and runs to quiescence.
    pub fn step_input(&mut self, input: &ExternalInput) -> Result<(), RuntimeError> {
        self.submit(input)?;
        self.run_to_quiescence();
        Ok(())
    }

    fn deliver(&mut self, name: &str, q: Queued) {
        let Some(&mi) = self.pkg.routes.get(name).and_then(|m| self.machine_ix.get(m)) else {
            let mut rec = record(name, StepKind::Dropped);
            rec.detail = Some("no machine consumes this event".into());
            self.push_step(rec, q.ts);
            return;
        };
        let m = &self.machines[mi];
        let mut rec = record(name, StepKind::Dropped);
        rec.machine = Some(m.fsm.id.clone());
        if m.halted {
            rec.detail = Some("machine halted".into());
            self.push_step(rec, q.ts);
            return;
        }
        let candidates: Vec<usize> = m.fsm.candidates(m.state, name).map(|(i, _)| i).collect();
        if candidates.is_empty() {
            rec.kind = StepKind::Deferred;
            self.push_step(rec, q.ts);
            self.machines[mi].deferred.push(q);
            return;
        }
        let mut chosen = None;
        for ti in candidates {
            match &m.fsm.transitions[ti].guard {
                None => {
                    chosen = Some(ti);
                    break;
                }
                Some(g) => match g.parse().eval(&q.payload) {
                    Ok(true) => {
                        chosen = Some(ti);
                        break;
                    }
                    Ok(false) => {}
                    Err(e) => {
                        let msg = format!("{}: guard on `{name}`: {e}", m.fsm.id);
                        rec.detail = Some(msg.clone());
                        self.errors.push(msg);
                        self.push_step(rec, q.ts);
                        return;
                    }
                },
            }
        }
        let Some(ti) = chosen else {
            let msg = format!("{}: no guard holds for `{name}`", m.fsm.id);
            rec.detail = Some(msg.clone());
            self.errors.push(msg);
            self.push_step(rec, q.ts);
            return;
        };
        self.fire(mi, ti, q);
    }

    /// Runs `f` as one native invocation of `method` with a staged copy of
    /// the transaction contexts, kept only if the invocation commits.
    fn invoke<T>(
        &mut self,
        method: &str,
        caller: Option<&str>,
        payload: &Json,
        f: impl FnOnce(&mut Env, &mut Invocation) -> Result<T, StepError>,
    ) -> (StepRecord, Result<T, StepError>) {
        let chain_id = self.chain_of(method);
        let mut staged = self.txns.clone();
        let caller_name = caller.unwrap_or("interpreter").to_string();
        let result = {
            let Ledger { main, side } = &mut self.ledger;
            let (chain, main_view) = if chain_id == SIDE {
                match side.as_mut() {
                    Some(s) => (s, Some(main.state())),
                    None => (main, None),
                }
            } else {
                (main, None)
            };
            let mut env = Env {
                pkg: &self.pkg,
                txns: &mut staged,
                offchain: &mut self.offchain,
                main_view,
                faults: &self.options.faults,
                run_id: &self.options.run_id,
                chain: &chain_id,
                caller,
                payload,
                scratch: BTreeMap::new(),
            };
            chain.invoke(method, &caller_name, |inv| f(&mut env, inv))
        };
        let mut rec = record("", StepKind::Fired);
        rec.method = Some(method.to_string());
        rec.chain = Some(chain_id);
        match result {
            Ok((receipt, out)) => {
                rec.gas = receipt.gas_used;
                rec.usage = receipt.usage;
                if out.is_ok() {
                    self.txns = staged;
                } else {
                    rec.kind = StepKind::Reverted;
                }
                (rec, out)
            }
            Err(e) => {
                rec.kind = StepKind::Reverted;
                (rec, Err(StepError::Ledger(e.to_string())))
            }
        }
    }

    fn fire(&mut self, mi: usize, ti: usize, q: Queued) {
        let t = self.machines[mi].fsm.transitions[ti].clone();
        let method = self.machines[mi].method.clone();
        let region = self.machines[mi].region.clone();
        let external = split_event(&t.event).0 == "in";
        let caller = if external { q.caller.clone() } else { None };
        let (mut rec, out) =
            self.invoke(&method, caller.as_deref(), &q.payload, |env, inv| env.run(inv, &t.actions, region.as_deref()));
        rec.event = t.event.clone();
        rec.machine = Some(self.machines[mi].fsm.id.clone());
        rec.txn = region.clone();
        match out {
            Ok(out) => {
                let m = &mut self.machines[mi];
                m.state = t.to;
                rec.to_state = Some(m.fsm.states[t.to].name.clone());
                rec.marks = out.marks.clone();
                if !out.notes.is_empty() {
                    rec.detail = Some(out.notes.join("; "));
                }
                self.push_step(rec, q.ts);
                self.after_fire(mi, &method, out, &q);
            }
            Err(e) => {
                rec.detail = Some(e.to_string());
                self.errors.push(format!("{}: {e}", t.event));
                self.push_step(rec, q.ts);
                if let Some(r) = region {
                    let root = self.root_of(&r);
                    self.abort_tree(&root, &format!("step reverted: {e}"), q.ts);
                }
            }
        }
    }

    fn after_fire(&mut self, mi: usize, method: &str, out: Outcome, q: &Queued) {
        self.marked.extend(out.marks);
        self.commit_log.extend(out.commits);
        if let Some(batch) = out.apply {
            self.apply_on_main(batch, q.ts);
        }
        for ev in out.tokens {
            self.send(&ev, q.payload.clone(), None, Some(method));
        }
        if let Some((txn, actions)) = out.held {
            if let Some(ctx) = self.txns.get_mut(&txn) {
                ctx.held = Some((actions, q.payload.clone()));
            }
        }
        let mut coords: Vec<String> = out.barriers;
        for c in out.work_complete {
            if let Some(p) = self.pkg.plan.parent.get(&c) {
                coords.push(p.clone());
            }
        }
        for c in coords {
            self.maybe_start_2pc(&c);
        }
        let deferred = std::mem::take(&mut self.machines[mi].deferred);
        for d in deferred {
            self.enqueue(d.event, d.payload, d.caller, None);
        }
    }

    fn root_of(&self, txn: &str) -> String {
        self.pkg.plan.ancestry(txn).pop().unwrap_or_else(|| txn.to_string())
    }

    fn state(&self, txn: &str) -> TxnState {
        self.txns.get(txn).map_or(TxnState::NotStarted, |c| c.state)
    }

    fn started_children(&self, txn: &str) -> Vec<String> {
        self.pkg.plan.children(txn).iter().filter(|c| self.state(c).is_started()).cloned().collect()
    }

    fn maybe_start_2pc(&mut self, coord: &str) {
        let Some(ctx) = self.txns.get(coord) else { return };
        if !ctx.barrier || ctx.state != TxnState::Active {
            return;
        }
        let ready = self
            .started_children(coord)
            .iter()
            .all(|c| self.txns[c].work_complete);
        if ready {
            self.enqueue(QEvent::Proto(Proto::Start(coord.to_string())), empty_payload(), None, None);
        }
    }

    fn proto_step(&mut self, rec: &mut StepRecord, event: String, txn: &str, phase: &str, ts: u64) {
        rec.event = event;
        rec.kind = if rec.kind == StepKind::Fired { StepKind::Protocol } else { rec.kind };
        rec.txn = Some(txn.to_string());
        rec.phase = Some(phase.to_string());
        self.push_step(rec.clone(), ts);
    }

    /// Sends prepare to the started children of `txn`.
    fn broadcast_prepare(&mut self, txn: &str, ts: u64) {
        let kids = self.started_children(txn);
        let t = txn.to_string();
        let k = kids.clone();
        let (mut rec, out) = self.invoke(&txn_method(txn), None, &empty_payload(), |env, inv| {
            env.set_state(&t, TxnState::Preparing)?;
            for c in &k {
                inv.emit(&format!("prepare:{c}"), c, &[]);
            }
            env.write_state(inv, &t);
            Ok(())
        });
        self.proto_step(&mut rec, format!("prepare-broadcast:{txn}"), txn, "phase1", ts);
        match out {
            Ok(()) => {
                for c in kids {
                    self.enqueue(QEvent::Proto(Proto::Prepare(c)), empty_payload(), None, None);
                }
                let deadline = self.clock + self.options.vote_timeout;
                self.enqueue(QEvent::Proto(Proto::Timeout(txn.to_string())), empty_payload(), None, Some(deadline));
            }
            Err(e) => {
                let root = self.root_of(txn);
                self.abort_tree(&root, &e.to_string(), ts);
            }
        }
    }

    /// Validates `txn` and sends its vote to its coordinator from within
    /// the current step.
    fn vote_in<'e>(env: &mut Env<'e>, inv: &mut Invocation, txn: &str, parent: &str) -> Result<bool, StepError> {
        let yes = !env.faults.vote_no.contains(txn) && env.txns[txn].work_complete && env.validate(inv, txn);
        if env.state(txn) == TxnState::Active {
            env.set_state(txn, TxnState::Preparing)?;
        }
        if yes {
            env.set_state(txn, TxnState::Ready)?;
        }
        env.write_state(inv, txn);
        inv.emit(&format!("vote:{txn}"), parent, &[u8::from(yes)]);
        Ok(yes)
    }

    fn protocol(&mut self, p: Proto, ts: u64) {
        match p {
            Proto::Start(coord) => {
                if self.state(&coord) == TxnState::Active {
                    self.broadcast_prepare(&coord, ts);
                }
            }
            Proto::Prepare(x) => {
                if self.state(&x) != TxnState::Active {
                    return;
                }
                if self.options.faults.crash_before_vote.contains(&x) {
                    let mut rec = record(&format!("prepare:{x}"), StepKind::Note);
                    rec.detail = Some("participant crashed before voting".into());
                    rec.txn = Some(x.clone());
                    rec.phase = Some("phase1".into());
                    self.push_step(rec, ts);
                    return;
                }
                if !self.started_children(&x).is_empty() {
                    self.broadcast_prepare(&x, ts);
                    return;
                }
                let parent = self.pkg.plan.parent.get(&x).cloned().unwrap_or_default();
                let xx = x.clone();
                let pp = parent.clone();
                let (mut rec, out) = self.invoke(&txn_method(&x), None, &empty_payload(), |env, inv| {
                    Self::vote_in(env, inv, &xx, &pp)
                });
                self.proto_step(&mut rec, format!("vote:{x}"), &x, "phase1", ts);
                let yes = out.unwrap_or(false);
                self.enqueue(QEvent::Proto(Proto::Vote { from: x, to: parent, yes }), empty_payload(), None, None);
            }
            Proto::Vote { from, to, yes } => self.collect_vote(from, to, yes, ts),
            Proto::Timeout(x) => {
                let missing = self
                    .started_children(&x)
                    .iter()
                    .any(|c| !self.txns[&x].votes.contains_key(c));
                if self.state(&x) == TxnState::Preparing && missing {
                    let root = self.root_of(&x);
                    self.abort_tree(&root, &format!("vote timeout at `{x}`"), ts);
                }
            }
            Proto::Apply(root) => self.apply_2pc(&root, ts),
            Proto::Broadcast(x) => {
                let kids = self.committed_children(&x);
                let xx = x.clone();
                let k = kids.clone();
                let (mut rec, _) = self.invoke(&txn_method(&x), None, &empty_payload(), |env, inv| {
                    for c in &k {
                        inv.emit(&format!("commit:{c}"), c, &[]);
                    }
                    env.write_state(inv, &xx);
                    Ok(())
                });
                self.proto_step(&mut rec, format!("commit-broadcast:{x}"), &x, "phase2", ts);
                for c in kids {
                    self.enqueue(QEvent::Proto(Proto::Commit(c)), empty_payload(), None, None);
                }
            }
            Proto::Commit(c) => {
                let parent = self.pkg.plan.parent.get(&c).cloned().unwrap_or_default();
                let kids = self.committed_children(&c);
                let acks = self.options.acks;
                let cc = c.clone();
                let k = kids.clone();
                let pp = parent.clone();
                let (mut rec, _) = self.invoke(&txn_method(&c), None, &empty_payload(), |env, inv| {
                    env.write_state(inv, &cc);
                    for g in &k {
                        inv.emit(&format!("commit:{g}"), g, &[]);
                    }
                    if acks {
                        inv.emit(&format!("ack:{cc}"), &pp, &[]);
                    }
                    Ok(())
                });
                self.proto_step(&mut rec, format!("commit:{c}"), &c, "phase2", ts);
                for g in kids {
                    self.enqueue(QEvent::Proto(Proto::Commit(g)), empty_payload(), None, None);
                }
                if acks {
                    self.enqueue(QEvent::Proto(Proto::Ack { from: c, to: parent }), empty_payload(), None, None);
                }
            }
            Proto::Ack { from, to } => {
                let (mut rec, _) = self.invoke(&txn_method(&to), None, &empty_payload(), |env, _| {
                    if let Some(ctx) = env.txns.get_mut(&to) {
                        ctx.acks += 1;
                    }
                    Ok(())
                });
                self.proto_step(&mut rec, format!("ack:{from}"), &to, "phase2", ts);
            }
            Proto::Recover(root) => {
                self.abort_tree(&root, "coordinator crashed; recovery aborts", ts);
            }
        }
    }

    fn committed_children(&self, txn: &str) -> Vec<String> {
        self.pkg
            .plan
            .children(txn)
            .iter()
            .filter(|c| self.state(c) == TxnState::Committed)
            .cloned()
            .collect()
    }

    fn collect_vote(&mut self, from: String, to: String, yes: bool, ts: u64) {
        if self.state(&to) != TxnState::Preparing {
            return;
        }
        let kids = self.started_children(&to);
        let parent = self.pkg.plan.parent.get(&to).cloned();
        let (f, t) = (from.clone(), to.clone());
        let (mut rec, out) = self.invoke(&txn_method(&to), None, &empty_payload(), |env, inv| {
            let ctx = env.txns.get_mut(&t).ok_or_else(|| StepError::UnknownTxn(t.clone()))?;
            ctx.votes.insert(f.clone(), yes);
            let all = kids.iter().all(|c| ctx.votes.get(c) == Some(&true));
            if !yes || !all {
                return Ok(None);
            }
            match &parent {
                Some(p) => Self::vote_in(env, inv, &t, p).map(|v| Some((Some(p.clone()), v))),
                None => {
                    env.set_state(&t, TxnState::Ready)?;
                    Ok(Some((None, true)))
                }
            }
        });
        self.proto_step(&mut rec, format!("collect:{from}"), &to, "phase1", ts);
        match out {
            Err(e) => {
                let root = self.root_of(&to);
                self.abort_tree(&root, &e.to_string(), ts);
            }
            Ok(None) if !yes => {
                let root = self.root_of(&to);
                self.abort_tree(&root, &format!("`{from}` voted no"), ts);
            }
            Ok(None) => {}
            Ok(Some((Some(p), v))) => {
                self.enqueue(QEvent::Proto(Proto::Vote { from: to, to: p, yes: v }), empty_payload(), None, None);
            }
            Ok(Some((None, _))) => {
                let event = if self.options.faults.coordinator_crash.contains(&to) {
                    let mut rec = record(&format!("crash:{to}"), StepKind::Note);
                    rec.detail = Some("coordinator crashed between phases".into());
                    rec.txn = Some(to.clone());
                    self.push_step(rec, ts);
                    Proto::Recover(to)
                } else {
                    Proto::Apply(to)
                };
                self.enqueue(QEvent::Proto(event), empty_payload(), None, None);
            }
        }
    }

    /// Applies the write sets of a whole transaction tree, parent first, in
    /// one invocation, then releases the coordinator's held actions and
    /// starts the second phase.
    fn apply_2pc(&mut self, root: &str, ts: u64) {
        let txns: Vec<String> = self
            .pkg
            .plan
            .subtree(root)
            .into_iter()
            .filter(|t| self.state(t) == TxnState::Ready)
            .collect();
        let list = txns.clone();
        let (mut rec, out) = self.invoke(&txn_method(root), None, &empty_payload(), |env, inv| {
            let mut o = Outcome::default();
            env.commit(inv, &list, &mut o)?;
            Ok(o)
        });
        self.proto_step(&mut rec, format!("apply:{root}"), root, "commit", ts);
        match out {
            Ok(o) => {
                self.commit_log.extend(o.commits);
                if let Some(batch) = o.apply {
                    self.apply_on_main(batch, ts);
                }
                let method = txn_method(root);
                let held = self.txns.get_mut(root).and_then(|c| c.held.take());
                if let Some((actions, payload)) = held {
                    for a in actions {
                        match a {
                            Action::Token { event } => self.send(&event, payload.clone(), None, Some(&method)),
                            other => self.errors.push(format!("held action not replayable: {other:?}")),
                        }
                    }
                }
                self.enqueue(QEvent::Proto(Proto::Broadcast(root.to_string())), empty_payload(), None, None);
            }
            Err(e) => self.abort_tree(root, &e.to_string(), ts),
        }
    }

    /// Relays a committed write set from the sidechain and writes it on the
    /// main chain in one invocation.
    fn apply_on_main(&mut self, batch: ApplyBatch, ts: u64) {
        let label = batch.txns.join(",");
        if let Ok(r) = self.ledger.relay(SIDE, MAIN, &format!("commit:{label}"), batch.bytes()) {
            let mut rec = record(&format!("relay-commit:{label}"), StepKind::Relay);
            rec.chain = Some(r.chain);
            rec.gas = r.gas_used;
            rec.usage = r.usage;
            self.push_step(rec, ts);
        }
        let writes = batch.writes.clone();
        let (mut rec, out) = self.invoke(APPLY_METHOD, None, &empty_payload(), |_, inv| {
            for (_, k, v) in writes {
                inv.write(&k, v);
            }
            Ok(())
        });
        rec.event = format!("apply-main:{label}");
        rec.phase = Some("commit".into());
        self.push_step(rec, ts);
        match out {
            Ok(()) => self.commit_log.extend(batch.entries(MAIN)),
            Err(e) => self.errors.push(format!("apply on main failed: {e}")),
        }
    }

    /// Aborts every transaction in the tree rooted at `root` and halts
    /// their machines.
    fn abort_tree(&mut self, root: &str, reason: &str, ts: u64) {
        let tree = self.pkg.plan.subtree(root);
        let list = tree.clone();
        let (mut rec, out) = self.invoke(&txn_method(root), None, &empty_payload(), |env, inv| {
            env.abort(inv, &list);
            Ok(())
        });
        rec.event = format!("abort:{root}");
        rec.kind = StepKind::Protocol;
        rec.txn = Some(root.to_string());
        rec.phase = Some("abort".into());
        rec.detail = Some(reason.to_string());
        self.push_step(rec, ts);
        if let Err(e) = out {
            self.errors.push(format!("abort of `{root}` failed: {e}"));
        }
        for t in &tree {
            if let Some(ctx) = self.txns.get_mut(t) {
                ctx.held = None;
                if ctx.state == TxnState::NotStarted {
                    ctx.state = TxnState::Aborted;
                }
            }
        }
        for m in &mut self.machines {
            if m.region.as_ref().is_some_and(|r| tree.contains(r)) {
                m.halted = true;
                m.deferred.clear();
            }
        }
        self.errors.push(format!("transaction `{root}` aborted: {reason}"));
    }

    pub fn report(&self) -> RunReport {
        let mut gas_by_method: BTreeMap<String, u64> = BTreeMap::new();
        for s in &self.steps {
            if let Some(m) = &s.method {
                *gas_by_method.entry(m.clone()).or_default() += s.gas;
            }
        }
        RunReport {
            run_id: self.options.run_id.clone(),
            mechanism: self.pkg.mechanism(),
            completed: self.is_complete(),
            marked: self.marked.clone(),
            enabled: self.enabled(),
            machine_states: self
                .machines
                .iter()
                .map(|m| (m.fsm.id.clone(), m.fsm.states[m.state].name.clone()))
                .collect(),
            txn_states: self.txns.iter().map(|(k, c)| (k.clone(), c.state)).collect(),
            gas_total: self.ledger.total_gas(),
            gas_by_chain: self.ledger.chains().map(|c| (c.id.clone(), c.total_gas())).collect(),
            gas_by_method,
            usage: self.ledger.total_usage(),
            commit_order: self.commit_log.clone(),
            block_hashes: self.ledger.chains().map(|c| (c.id.clone(), c.block_hashes())).collect(),
            errors: self.errors.clone(),
            steps: self.steps.clone(),
        }
    }
}
