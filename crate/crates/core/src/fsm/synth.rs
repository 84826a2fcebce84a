use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpmn::{GatewayKind, NodeKind};
use crate::graph::{EdgeKind, FlowDag, VertexIx};
use crate::plan::TxnPlan;

use super::*;

/// Largest token set a single stage may wait for (collector size is 2^k).
const MAX_STAGE_TOKENS: usize = 12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JoinMode {
    /// The first token passes; later ones are absorbed.
    #[default]
    PassThrough,
    /// Fires once a token has arrived on every incoming edge.
    WaitAll,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthOptions {
    #[serde(default)]
    pub join_mode: JoinMode,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SynthError {
    #[error("plan refers to unknown region or vertex `{0}`")]
    PlanRegionUnknown(String),
    #[error("exclusive fork `{0}` has more than one branch without a guard")]
    UnguardedExclusiveFork(String),
    #[error("`{0}` waits for {1} tokens; at most {MAX_STAGE_TOKENS} are supported")]
    TooManyTokens(String, usize),
    #[error("parallel gateway `{0}` cannot be synthesized")]
    ParallelGateway(String),
}

struct Ctx<'a> {
    dag: &'a FlowDag,
    region_of: Vec<Option<String>>,
    catalog: Vec<EventKind>,
}

impl Ctx<'_> {
    fn owner(&self, v: VertexIx) -> Owner {
        match &self.region_of[v] {
            Some(r) => Owner::Region(r.clone()),
            None => Owner::Actor(self.dag.vertices[v].actor.clone()),
        }
    }

    fn id(&self, v: VertexIx) -> &str {
        &self.dag.vertices[v].id
    }

    fn register(&mut self, name: String, origin: VertexIx, target: &str, external: bool) {
        self.catalog.push(EventKind {
            name,
            origin: self.dag.vertices[origin].id.clone(),
            target: target.to_string(),
            external,
        });
    }

    /// Token events a vertex waits for, skipping the in-stream edge.
    fn required(&self, v: VertexIx, skip: Option<usize>) -> Vec<(String, VertexIx)> {
        let mut out = Vec::new();
        if v == self.dag.source {
            out.push((EV_INIT.to_string(), v));
        }
        for &e in self.dag.in_edges(v) {
            if Some(e) != skip {
                let edge = &self.dag.edges[e];
                out.push((ev_token(&edge.id), edge.source));
            }
        }
        out
    }

    fn out_tokens(&self, v: VertexIx, skip: Option<usize>) -> Vec<Action> {
        self.dag
            .out_edges(v)
            .iter()
            .filter(|&&e| Some(e) != skip)
            .map(|&e| Action::Token { event: ev_token(&self.dag.edges[e].id) })
            .collect()
    }

    fn effects(&self, v: VertexIx) -> Vec<Action> {
        let vx = &self.dag.vertices[v];
        let expand = |k: &str| k.replace("{actor}", &vx.actor).replace("{vertex}", &vx.id);
        let mut out = vec![Action::Mark { vertex: vx.id.clone() }];
        if let Some(spec) = &vx.task_spec {
            out.extend(spec.ledger_reads.iter().map(|k| Action::Read { key: expand(k) }));
            out.extend(spec.ledger_writes.iter().map(|w| Action::Write {
                key: expand(&w.key),
                size: w.size,
                source: w.source.clone(),
            }));
            out.extend(spec.emits.iter().map(|e| Action::Emit {
                to: e.to.clone(),
                message: e.message.clone(),
                size: e.size,
            }));
            out.extend(spec.offchain_puts.iter().enumerate().map(|(i, &size)| Action::OffchainPut {
                size,
                digest_key: format!("offchain/{}/{i}/{{run}}", vx.id),
                txn: None,
            }));
        }
        if let Some(name) = &vx.callback {
            out.push(Action::Callback { name: name.clone() });
        }
        out
    }
}

/// Token-subset collector: accepts `events` in any order and is terminal once
/// all have arrived. `complete` runs on the transition that finishes the set.
fn collector(id: &str, owner: &Owner, events: &[String], complete: Vec<Action>) -> Fsm {
    let k = events.len();
    let full = (1usize << k) - 1;
    let states = (0..=full).map(|mask| State::plain(format!("m{mask:0k$b}"))).collect();
    let mut transitions = Vec::new();
    for mask in 0..full {
        for (j, ev) in events.iter().enumerate() {
            if mask & (1 << j) != 0 {
                continue;
            }
            let to = mask | (1 << j);
            let actions = if to == full { complete.clone() } else { Vec::new() };
            transitions.push(Transition { from: mask, event: ev.clone(), guard: None, actions, to });
        }
    }
    Fsm {
        id: format!("{id}#collect"),
        owner: owner.clone(),
        kind: MachineKind::Collector,
        vertices: Vec::new(),
        states,
        initial: 0,
        terminal: vec![full],
        transitions,
    }
}

/// Wait state for an automatically firing vertex plus the event that fires
/// it: a single token directly, otherwise a self-addressed `fire` event.
fn auto_stage(machine: &str, owner: &Owner, name: &str, vertex: &str, tokens: &[String]) -> (State, String) {
    match tokens {
        [single] => (State::plain(name), single.clone()),
        _ => {
            let fire = ev_fire(vertex);
            let sub = (!tokens.is_empty())
                .then(|| Box::new(collector(machine, owner, tokens, vec![Action::Token { event: fire.clone() }])));
            (State { name: name.to_string(), sub }, fire)
        }
    }
}

fn check_tokens(vertex: &str, n: usize) -> Result<(), SynthError> {
    if n > MAX_STAGE_TOKENS {
        return Err(SynthError::TooManyTokens(vertex.to_string(), n));
    }
    Ok(())
}

fn stream_machine(ctx: &mut Ctx, run: &[VertexIx]) -> Result<Fsm, SynthError> {
    let dag = ctx.dag;
    let owner = ctx.owner(run[0]);
    let id = format!("stream:{}", ctx.id(run[0]));
    let link = |i: usize| -> Option<usize> {
        // sequence edge from run[i - 1] to run[i]
        (i > 0).then(|| {
            *dag.out_edges(run[i - 1])
                .iter()
                .find(|&&e| dag.edges[e].target == run[i] && dag.edges[e].kind == EdgeKind::Sequence)
                .unwrap()
        })
    };
    let mut states = Vec::new();
    let mut transitions = Vec::new();
    for (i, &v) in run.iter().enumerate() {
        let vid = ctx.id(v).to_string();
        let required = ctx.required(v, link(i));
        check_tokens(&vid, required.len())?;
        let tokens: Vec<String> = required.iter().map(|(t, _)| t.clone()).collect();
        for (t, origin) in &required {
            ctx.register(t.clone(), *origin, &id, false);
        }
        let (state, event) = if dag.vertices[v].kind.needs_input() {
            let sub = (!tokens.is_empty()).then(|| Box::new(collector(&format!("{id}@{vid}"), &owner, &tokens, Vec::new())));
            let input = ev_input(&vid);
            ctx.register(input.clone(), v, &id, true);
            (State { name: vid.clone(), sub }, input)
        } else {
            let (state, event) = auto_stage(&format!("{id}@{vid}"), &owner, &vid, &vid, &tokens);
            if event.starts_with("fire:") {
                ctx.register(event.clone(), v, &id, false);
            }
            (state, event)
        };
        let mut actions = ctx.effects(v);
        let next_link = if i + 1 < run.len() { link(i + 1) } else { None };
        actions.extend(ctx.out_tokens(v, next_link));
        if let Some(&next) = run.get(i + 1) {
            let next_tokens = ctx.required(next, next_link);
            if next_tokens.is_empty() && !dag.vertices[next].kind.needs_input() {
                actions.push(Action::Token { event: ev_fire(ctx.id(next)) });
            }
        }
        states.push(state);
        transitions.push(Transition { from: i, event, guard: None, actions, to: i + 1 });
    }
    states.push(State::plain("done"));
    Ok(Fsm {
        id,
        owner,
        kind: MachineKind::Stream,
        vertices: run.iter().map(|&v| ctx.id(v).to_string()).collect(),
        initial: 0,
        terminal: vec![run.len()],
        states,
        transitions,
    })
}

fn join_machine(ctx: &mut Ctx, j: VertexIx, mode: JoinMode) -> Result<Fsm, SynthError> {
    let jid = ctx.id(j).to_string();
    let owner = ctx.owner(j);
    let id = format!("join:{jid}");
    let required = ctx.required(j, None);
    check_tokens(&jid, required.len())?;
    let tokens: Vec<String> = required.iter().map(|(t, _)| t.clone()).collect();
    for (t, origin) in &required {
        ctx.register(t.clone(), *origin, &id, false);
    }
    let fire = ev_fire(&jid);
    ctx.register(fire.clone(), j, &id, false);
    let mut actions = ctx.effects(j);
    actions.extend(ctx.out_tokens(j, None));
    let absorb = |state: usize| -> Vec<Transition> {
        tokens
            .iter()
            .map(|t| Transition { from: state, event: t.clone(), guard: None, actions: Vec::new(), to: state })
            .collect()
    };
    let sub = match mode {
        JoinMode::WaitAll => collector(&id, &owner, &tokens, vec![Action::Token { event: fire.clone() }]),
        JoinMode::PassThrough => {
            let mut transitions: Vec<Transition> = tokens
                .iter()
                .map(|t| Transition {
                    from: 0,
                    event: t.clone(),
                    guard: None,
                    actions: vec![Action::Token { event: fire.clone() }],
                    to: 1,
                })
                .collect();
            transitions.extend(absorb(1));
            Fsm {
                id: format!("{id}#collect"),
                owner: owner.clone(),
                kind: MachineKind::Collector,
                vertices: Vec::new(),
                states: vec![State::plain("idle"), State::plain("got")],
                initial: 0,
                terminal: vec![1],
                transitions,
            }
        }
    };
    let mut transitions = vec![Transition { from: 0, event: fire, guard: None, actions, to: 1 }];
    if mode == JoinMode::PassThrough {
        transitions.extend(absorb(1));
    }
    Ok(Fsm {
        id,
        owner,
        kind: MachineKind::Join,
        vertices: vec![jid],
        states: vec![State { name: "wait".into(), sub: Some(Box::new(sub)) }, State::plain("passed")],
        initial: 0,
        terminal: vec![1],
        transitions,
    })
}

fn fork_machine(ctx: &mut Ctx, f: VertexIx, gateway: GatewayKind) -> Result<Fsm, SynthError> {
    let dag = ctx.dag;
    let fid = ctx.id(f).to_string();
    let owner = ctx.owner(f);
    let id = format!("fork:{fid}");
    let required = ctx.required(f, None);
    check_tokens(&fid, required.len())?;
    let tokens: Vec<String> = required.iter().map(|(t, _)| t.clone()).collect();
    for (t, origin) in &required {
        ctx.register(t.clone(), *origin, &id, false);
    }
    let (wait, trigger) = auto_stage(&id, &owner, "wait", &fid, &tokens);
    if trigger.starts_with("fire:") {
        ctx.register(trigger.clone(), f, &id, false);
    }
    let seq_out: Vec<usize> = dag
        .out_edges(f)
        .iter()
        .copied()
        .filter(|&e| dag.edges[e].kind == EdgeKind::Sequence)
        .collect();
    let mut actions = ctx.effects(f);
    // message flows leaving a fork are unconditional
    actions.extend(
        dag.out_edges(f)
            .iter()
            .filter(|&&e| dag.edges[e].kind == EdgeKind::Message)
            .map(|&e| Action::Token { event: ev_token(&dag.edges[e].id) }),
    );
    let branch = |e: usize| (ev_token(&dag.edges[e].id), dag.edges[e].guard.clone());
    match gateway {
        GatewayKind::Parallel => Err(SynthError::ParallelGateway(fid)),
        GatewayKind::Inclusive => {
            actions.push(Action::Spawn {
                branches: seq_out
                    .iter()
                    .map(|&e| {
                        let (event, guard) = branch(e);
                        Branch { event, guard }
                    })
                    .collect(),
            });
            Ok(Fsm {
                id,
                owner,
                kind: MachineKind::Fork,
                vertices: vec![fid],
                states: vec![wait, State::plain("done")],
                initial: 0,
                terminal: vec![1],
                transitions: vec![Transition { from: 0, event: trigger, guard: None, actions, to: 1 }],
            })
        }
        GatewayKind::Exclusive => {
            let decide = ev_decide(&fid);
            ctx.register(decide.clone(), f, &id, false);
            actions.push(Action::Token { event: decide.clone() });
            // guarded branches first, then the single fallback branch
            let (guarded, fallback): (Vec<usize>, Vec<usize>) = seq_out
                .iter()
                .partition(|&&e| dag.edges[e].guard.is_some() && !dag.edges[e].is_default);
            if fallback.len() > 1 {
                return Err(SynthError::UnguardedExclusiveFork(fid));
            }
            let mut transitions = vec![Transition { from: 0, event: trigger, guard: None, actions, to: 1 }];
            for e in guarded {
                let (event, guard) = branch(e);
                transitions.push(Transition {
                    from: 1,
                    event: decide.clone(),
                    guard,
                    actions: vec![Action::Token { event }],
                    to: 2,
                });
            }
            for e in fallback {
                let (event, _) = branch(e);
                transitions.push(Transition {
                    from: 1,
                    event: decide.clone(),
                    guard: None,
                    actions: vec![Action::Token { event }],
                    to: 2,
                });
            }
            Ok(Fsm {
                id,
                owner,
                kind: MachineKind::Fork,
                vertices: vec![fid],
                states: vec![wait, State::plain("deciding"), State::plain("done")],
                initial: 0,
                terminal: vec![2],
                transitions,
            })
        }
    }
}

/// Innermost selected transaction of each vertex.
fn regions_of(dag: &FlowDag, plan: &TxnPlan) -> Result<Vec<Option<String>>, SynthError> {
    let mut out: Vec<Option<(usize, String)>> = vec![None; dag.len()];
    for t in &plan.transactions {
        let members = plan.members.get(t).ok_or_else(|| SynthError::PlanRegionUnknown(t.clone()))?;
        for m in members {
            let v = dag.index_of(m).ok_or_else(|| SynthError::PlanRegionUnknown(m.clone()))?;
            if out[v].as_ref().is_none_or(|(n, _)| members.len() < *n) {
                out[v] = Some((members.len(), t.clone()));
            }
        }
    }
    Ok(out.into_iter().map(|o| o.map(|(_, t)| t)).collect())
}

/// Maximal runs of non-gateway vertices joined by sequence flows inside one
/// innermost region.
fn streams(dag: &FlowDag, region_of: &[Option<String>]) -> Vec<Vec<VertexIx>> {
    let mut run_of: BTreeMap<VertexIx, usize> = BTreeMap::new();
    let mut runs: Vec<Vec<VertexIx>> = Vec::new();
    for v in 0..dag.len() {
        if dag.vertices[v].kind.is_gateway() {
            continue;
        }
        let seq_in: Vec<VertexIx> = dag
            .in_edges(v)
            .iter()
            .filter(|&&e| dag.edges[e].kind == EdgeKind::Sequence)
            .map(|&e| dag.edges[e].source)
            .collect();
        let prev = match seq_in.as_slice() {
            [u] if !dag.vertices[*u].kind.is_gateway() && region_of[*u] == region_of[v] => run_of.get(u).copied(),
            _ => None,
        };
        let idx = prev.unwrap_or_else(|| {
            runs.push(Vec::new());
            runs.len() - 1
        });
        runs[idx].push(v);
        run_of.insert(v, idx);
    }
    runs
}

/// Builds the hierarchical machine model for a DAG under a plan. Vertices of
/// a selected region are placed in that region's machines.
pub fn synthesize(dag: &FlowDag, plan: &TxnPlan, options: SynthOptions) -> Result<DeFsmModel, SynthError> {
    let region_of = regions_of(dag, plan)?;
    let runs = streams(dag, &region_of);
    let mut ctx = Ctx { dag, region_of, catalog: Vec::new() };

    let mut machines: Vec<(VertexIx, Fsm)> = Vec::new();
    for run in &runs {
        machines.push((run[0], stream_machine(&mut ctx, run)?));
    }
    for v in 0..dag.len() {
        match dag.vertices[v].kind {
            NodeKind::Gateway { gateway, .. } if dag.vertices[v].kind.is_fork() => {
                machines.push((v, fork_machine(&mut ctx, v, gateway)?));
            }
            NodeKind::Gateway { .. } => machines.push((v, join_machine(&mut ctx, v, options.join_mode)?)),
            _ => {}
        }
    }
    machines.sort_by_key(|(v, _)| *v);

    let mut model = DeFsmModel {
        schema: FSM_SCHEMA.into(),
        actor_machines: BTreeMap::new(),
        control_fsms: Vec::new(),
        txn_machines: BTreeMap::new(),
        event_catalog: Vec::new(),
    };
    for a in dag.vertices.iter().map(|v| v.actor.clone()).collect::<BTreeSet<_>>() {
        model.actor_machines.insert(a, Vec::new());
    }
    for t in &plan.transactions {
        model.txn_machines.insert(t.clone(), Vec::new());
    }
    for (_, m) in machines {
        match (&m.owner, m.kind) {
            (Owner::Region(r), _) => model.txn_machines.get_mut(r).unwrap().push(m),
            (Owner::Actor(_), MachineKind::Fork) => model.control_fsms.push(m),
            (Owner::Actor(a), _) => model.actor_machines.get_mut(a).unwrap().push(m),
        }
    }
    let mut catalog = ctx.catalog;
    catalog.sort_by(|a, b| a.name.cmp(&b.name));
    catalog.dedup_by(|a, b| a.name == b.name);
    model.event_catalog = catalog;
    Ok(model)
}
