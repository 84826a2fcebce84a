//! Helpers and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;

use tabsplus_core::bpmn::{parse_bpmn, GatewayKind, GatewayRole, NodeKind};
use tabsplus_core::codegen::{ContractPackage, GenerateOptions};
use tabsplus_core::fixtures::SUPPLY_CHAIN;
use tabsplus_core::fsm::SynthOptions;
use tabsplus_core::graph::{EdgeSpec, FlowDag, Vertex, VertexIx};
use tabsplus_core::ledger::Chain;
use tabsplus_core::pipeline::Analysis;
use tabsplus_core::plan::{Mechanism, PlanInput};
use tabsplus_core::runtime::{parse_trace, ExternalInput, Runtime, RuntimeError};

pub fn fixture() -> Analysis {
    Analysis::from_xml(SUPPLY_CHAIN.as_bytes()).expect("fixture analyzes")
}

pub fn compile(analysis: &Analysis, regions: &[&str], mechanism: Mechanism, crypto: bool) -> ContractPackage {
    analysis
        .compile(&PlanInput::new(regions, mechanism, crypto), SynthOptions::default(), &GenerateOptions::default())
        .expect("plan compiles")
}

pub fn owner_input(pkg: &ContractPackage, origin: &str) -> ExternalInput {
    let owner = &pkg.model.node(origin).expect("known vertex").actor;
    let cred = &pkg.model.actor(owner).expect("known actor").credential;
    ExternalInput::new(cred, origin)
}

/// Bundled valid traces, sorted by file name.
pub fn fixture_traces() -> Vec<(String, Vec<ExternalInput>)> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/traces");
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .expect("trace dir")
        .map(|e| e.expect("dir entry").path())
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let text = std::fs::read_to_string(&p).expect("readable trace");
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (name, parse_trace(&text).expect("trace parses"))
        })
        .collect()
}

/// Submits a random enabled task until nothing is enabled. Tasks in
/// `first` are preferred whenever one is enabled.
pub fn drive_random(
    rt: &mut Runtime,
    rng: &mut impl Rng,
    first: &BTreeSet<String>,
    mut after_step: impl FnMut(&Runtime),
) -> Result<Vec<String>, RuntimeError> {
    let mut order = Vec::new();
    loop {
        let enabled = rt.enabled();
        let preferred: Vec<&String> = enabled.iter().filter(|o| first.contains(*o)).collect();
        let pick = if !preferred.is_empty() {
            (*preferred.choose(rng).unwrap()).clone()
        } else if let Some(o) = enabled.choose(rng) {
            o.clone()
        } else {
            break;
        };
        let input = owner_input(rt.package(), &pick);
        rt.step_input(&input)?;
        order.push(pick);
        after_step(rt);
    }
    Ok(order)
}

pub fn ledger_state(rt: &Runtime) -> BTreeMap<String, BTreeMap<String, Vec<u8>>> {
    rt.ledger().chains().map(|c| (c.id.clone(), c.state().clone())).collect()
}

/// Key sets of `chain` after each native transaction, replayed from its
/// blocks and pending records. Parts of a spilled transaction count as one.
pub fn replay_keys(chain: &Chain) -> Vec<BTreeSet<String>> {
    let records: Vec<_> = chain.blocks().iter().flat_map(|b| b.txs.iter()).chain(chain.pending()).collect();
    let mut keys = BTreeSet::new();
    let mut out = Vec::new();
    for (i, tx) in records.iter().enumerate() {
        if !tx.status.is_committed() {
            continue;
        }
        for w in &tx.writes {
            keys.insert(w.key.clone());
        }
        for d in &tx.deletes {
            keys.remove(d);
        }
        let last_part = records.get(i + 1).is_none_or(|n| n.seq != tx.seq);
        if last_part {
            out.push(keys.clone());
        }
    }
    out
}

/// Random DAG on `n >= 2` vertices with a single source `v00` and a single
/// sink. Vertices with more than one incoming or outgoing edge become
/// exclusive gateways.
pub fn random_dag(rng: &mut impl Rng, n: usize) -> FlowDag {
    let mut edges: BTreeSet<(usize, usize)> = BTreeSet::new();
    for v in 1..n {
        let k = rng.gen_range(1..=v.min(2));
        let mut preds: Vec<usize> = (0..v).collect();
        preds.shuffle(rng);
        for &p in &preds[..k] {
            edges.insert((p, v));
        }
    }
    for v in 0..n - 1 {
        if !edges.iter().any(|&(s, _)| s == v) {
            edges.insert((v, rng.gen_range(v + 1..n)));
        }
    }
    let indeg = |v| edges.iter().filter(|e| e.1 == v).count();
    let outdeg = |v| edges.iter().filter(|e| e.0 == v).count();
    let vertices = (0..n)
        .map(|v| {
            let (i, o) = (indeg(v), outdeg(v));
            let kind = if v == 0 {
                NodeKind::StartEvent
            } else if v == n - 1 {
                NodeKind::EndEvent
            } else if i > 1 || o > 1 {
                let role = match (i > 1, o > 1) {
                    (true, true) => GatewayRole::Mixed,
                    (true, false) => GatewayRole::Join,
                    _ => GatewayRole::Fork,
                };
                NodeKind::Gateway { gateway: GatewayKind::Exclusive, role }
            } else {
                NodeKind::Task
            };
            Vertex {
                id: format!("v{v:02}"),
                kind,
                actor: "a".into(),
                label: format!("v{v:02}"),
                task_spec: None,
                callback: None,
            }
        })
        .collect();
    let specs = edges
        .iter()
        .map(|&(s, t)| EdgeSpec::seq(format!("e{s:02}_{t:02}"), format!("v{s:02}"), format!("v{t:02}")))
        .collect();
    FlowDag::new(vertices, specs).expect("generated DAG is well formed")
}

/// Reflexive-transitive reachability by depth-first search.
fn reach(n: usize, next: impl Fn(usize) -> Vec<usize>, from: usize) -> BTreeSet<usize> {
    let mut seen = BTreeSet::from([from]);
    let mut stack = vec![from];
    while let Some(v) = stack.pop() {
        for w in next(v) {
            if w < n && seen.insert(w) {
                stack.push(w);
            }
        }
    }
    seen
}

/// Brute-force region oracle: for every ordered vertex pair, members are
/// the vertices on some entry-to-exit path, and the pair is a region when
/// no edge crosses the boundary except at the entry and the exit.
pub struct RegionOracle<'a> {
    dag: &'a FlowDag,
    fwd: Vec<BTreeSet<usize>>,
    bwd: Vec<BTreeSet<usize>>,
}

impl<'a> RegionOracle<'a> {
    pub fn new(dag: &'a FlowDag) -> Self {
        let n = dag.len();
        let succ = |v: usize| dag.edges.iter().filter(|e| e.source == v).map(|e| e.target).collect();
        let pred = |v: usize| dag.edges.iter().filter(|e| e.target == v).map(|e| e.source).collect();
        let fwd = (0..n).map(|v| reach(n, succ, v)).collect();
        let bwd = (0..n).map(|v| reach(n, pred, v)).collect();
        RegionOracle { dag, fwd, bwd }
    }

    fn in_degree(&self, v: usize) -> usize {
        let real = self.dag.edges.iter().filter(|e| e.target == v).count();
        real + usize::from(v == self.dag.source)
    }

    fn out_degree(&self, v: usize) -> usize {
        let real = self.dag.edges.iter().filter(|e| e.source == v).count();
        real + usize::from(v == self.dag.sink)
    }

    pub fn region(&self, a: usize, b: usize) -> Option<BTreeSet<usize>> {
        if !self.fwd[a].contains(&b) || self.in_degree(a) != 1 || self.out_degree(b) != 1 {
            return None;
        }
        let members: BTreeSet<usize> = self.fwd[a].intersection(&self.bwd[b]).copied().collect();
        let crosses = self.dag.edges.iter().any(|e| {
            let (s, t) = (members.contains(&e.source), members.contains(&e.target));
            (t && !s && e.target != a) || (s && !t && e.source != b)
        });
        (!crosses).then_some(members)
    }

    fn atomic(&self, v: usize) -> bool {
        !self.dag.vertices[v].kind.is_gateway() && self.in_degree(v) == 1 && self.out_degree(v) == 1
    }

    /// A region is in series when it splits at some internal edge into two
    /// regions that partition it.
    fn in_series(&self, a: usize, b: usize, members: &BTreeSet<usize>) -> bool {
        self.dag.edges.iter().any(|e| {
            members.contains(&e.source)
                && members.contains(&e.target)
                && match (self.region(a, e.source), self.region(e.target, b)) {
                    (Some(l), Some(r)) => l.is_disjoint(&r) && l.len() + r.len() == members.len(),
                    _ => false,
                }
        })
    }

    /// Canonical regions: multi-vertex regions that are not in series and
    /// contain a non-atomic vertex, plus connected runs of two or more
    /// atomic vertices.
    pub fn canonical(&self) -> BTreeSet<BTreeSet<usize>> {
        let n = self.dag.len();
        let mut out = BTreeSet::new();
        for a in 0..n {
            for b in 0..n {
                if a == b {
                    continue;
                }
                let Some(m) = self.region(a, b) else { continue };
                if m.iter().all(|&v| self.atomic(v)) {
                    continue;
                }
                if !self.in_series(a, b, &m) {
                    out.insert(m);
                }
            }
        }
        // connected components of the atomic subgraph
        let mut comp: Vec<usize> = (0..n).collect();
        fn find(c: &mut Vec<usize>, v: usize) -> usize {
            if c[v] != v {
                let r = find(c, c[v]);
                c[v] = r;
            }
            c[v]
        }
        for e in &self.dag.edges {
            if self.atomic(e.source) && self.atomic(e.target) {
                let (x, y) = (find(&mut comp, e.source), find(&mut comp, e.target));
                comp[x] = y;
            }
        }
        let mut groups: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for v in (0..n).filter(|&v| self.atomic(v)) {
            let root = find(&mut comp, v);
            groups.entry(root).or_default().insert(v);
        }
        out.extend(groups.into_values().filter(|g| g.len() >= 2));
        out
    }
}

/// `a` dominates `b` when every source-to-`b` path meets `a`, checked by
/// deleting `a` and searching.
pub fn brute_dominates(dag: &FlowDag, a: VertexIx, b: VertexIx) -> bool {
    if a == b {
        return true;
    }
    if a == dag.source {
        return true;
    }
    let succ = |v: usize| -> Vec<usize> {
        if v == a {
            return vec![];
        }
        dag.edges.iter().filter(|e| e.source == v && e.target != a).map(|e| e.target).collect()
    };
    !reach(dag.len(), succ, dag.source).contains(&b)
}

pub fn brute_postdominates(dag: &FlowDag, a: VertexIx, b: VertexIx) -> bool {
    if a == b || a == dag.sink {
        return true;
    }
    let pred = |v: usize| -> Vec<usize> {
        if v == a {
            return vec![];
        }
        dag.edges.iter().filter(|e| e.target == v && e.source != a).map(|e| e.source).collect()
    };
    !reach(dag.len(), pred, dag.sink).contains(&b)
}

/// Conformance oracle over the raw (unnormalized) fixture. Every flow is a
/// precondition: a task may run once all of its predecessors have
/// completed, and non-task nodes complete as soon as theirs have. This
/// matches the fixture, whose only gateway is an unconditional inclusive
/// fork.
pub struct TokenGame {
    preds: BTreeMap<String, Vec<String>>,
    tasks: BTreeMap<String, String>,
    sink: String,
}

impl TokenGame {
    pub fn fixture() -> Self {
        let model = parse_bpmn(SUPPLY_CHAIN.as_bytes()).expect("fixture parses");
        let mut preds: BTreeMap<String, Vec<String>> = model.nodes.iter().map(|n| (n.id.clone(), vec![])).collect();
        for (s, t) in model
            .sequence_flows
            .iter()
            .map(|f| (&f.source, &f.target))
            .chain(model.message_flows.iter().map(|f| (&f.source, &f.target)))
        {
            preds.get_mut(t).unwrap().push(s.clone());
        }
        let cred: BTreeMap<&str, &str> =
            model.actors.iter().map(|a| (a.id.as_str(), a.credential.as_str())).collect();
        let tasks = model
            .nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Task)
            .map(|n| (n.id.clone(), cred[n.actor.as_str()].to_string()))
            .collect();
        let sink = model.nodes.iter().find(|n| n.kind == NodeKind::EndEvent).unwrap().id.clone();
        TokenGame { preds, tasks, sink }
    }

    pub fn tasks(&self) -> impl Iterator<Item = (&String, &String)> {
        self.tasks.iter()
    }

    fn settle(&self, done: &mut BTreeSet<String>) {
        loop {
            let ready: Vec<String> = self
                .preds
                .iter()
                .filter(|(id, ps)| !self.tasks.contains_key(*id) && !done.contains(*id) && ps.iter().all(|p| done.contains(p)))
                .map(|(id, _)| id.clone())
                .collect();
            if ready.is_empty() {
                return;
            }
            done.extend(ready);
        }
    }

    /// Index of the first input the process must refuse, or the trace
    /// length when all are accepted but the process does not finish.
    pub fn first_rejection(&self, inputs: &[ExternalInput]) -> Option<usize> {
        let mut done = BTreeSet::new();
        self.settle(&mut done);
        for (i, input) in inputs.iter().enumerate() {
            let ok = self.tasks.get(&input.origin).is_some_and(|cred| *cred == input.actor)
                && !done.contains(&input.origin)
                && self.preds[&input.origin].iter().all(|p| done.contains(p));
            if !ok {
                return Some(i);
            }
            done.insert(input.origin.clone());
            self.settle(&mut done);
        }
        (!done.contains(&self.sink)).then_some(inputs.len())
    }
}

/// Every single-position substitution of a trace: the input at `i` is
/// replaced by another task submitted by its owner, or by the same task
/// submitted by another actor.
pub fn mutations(game: &TokenGame, trace: &[ExternalInput]) -> Vec<(usize, Vec<ExternalInput>)> {
    let creds: BTreeSet<&String> = game.tasks().map(|(_, c)| c).collect();
    let mut out = Vec::new();
    for i in 0..trace.len() {
        for (task, cred) in game.tasks() {
            if *task != trace[i].origin {
                let mut m = trace.to_vec();
                m[i] = ExternalInput { payload: trace[i].payload.clone(), ..ExternalInput::new(cred, task) };
                out.push((i, m));
            }
        }
        for cred in &creds {
            if **cred != trace[i].actor {
                let mut m = trace.to_vec();
                m[i].actor = (*cred).clone();
                out.push((i, m));
            }
        }
    }
    out
}
