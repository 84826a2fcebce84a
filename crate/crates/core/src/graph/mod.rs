//! Execution-flow DAG built from a well-formed model.

mod dominators;
mod dot;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpmn::{BpmnModel, GuardText, NodeKind, PayloadSchema, TaskSpec};

pub use dominators::{dominators, DominatorInfo};
pub use dot::to_dot;

pub type VertexIx = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vertex {
    pub id: String,
    pub kind: NodeKind,
    pub actor: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_spec: Option<TaskSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub callback: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Sequence,
    Message,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub id: String,
    pub source: VertexIx,
    pub target: VertexIx,
    pub kind: EdgeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guard: Option<GuardText>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub is_default: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<PayloadSchema>,
}

/// Edge as supplied to [`FlowDag::new`], with endpoints given by vertex id.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSpec {
    pub id: String,
    pub source: String,
    pub target: String,
    pub kind: EdgeKind,
    pub guard: Option<GuardText>,
    pub is_default: bool,
    pub payload: Option<PayloadSchema>,
}

impl EdgeSpec {
    pub fn seq(id: impl Into<String>, source: impl Into<String>, target: impl Into<String>) -> Self {
        EdgeSpec {
            id: id.into(),
            source: source.into(),
            target: target.into(),
            kind: EdgeKind::Sequence,
            guard: None,
            is_default: false,
            payload: None,
        }
    }
}

/// Vertices are stored in topological order (ties broken by vertex id), so a
/// vertex index doubles as its topological rank.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDag {
    pub vertices: Vec<Vertex>,
    pub edges: Vec<Edge>,
    pub source: VertexIx,
    pub sink: VertexIx,
    out_edges: Vec<Vec<usize>>,
    in_edges: Vec<Vec<usize>>,
    index: BTreeMap<String, VertexIx>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DagError {
    #[error("cycle detected: {}", .0.join(" -> "))]
    CycleDetected(Vec<String>),
    #[error("disconnected vertices: {}", .0.join(", "))]
    Disconnected(Vec<String>),
    #[error("edge `{edge}` references unknown vertex `{vertex}`")]
    UnknownVertex { edge: String, vertex: String },
    #[error("graph has no vertices")]
    Empty,
}

impl FlowDag {
    pub fn new(vertices: Vec<Vertex>, edges: Vec<EdgeSpec>) -> Result<Self, DagError> {
        if vertices.is_empty() {
            return Err(DagError::Empty);
        }
        let pos: BTreeMap<&str, usize> =
            vertices.iter().enumerate().map(|(i, v)| (v.id.as_str(), i)).collect();
        let n = vertices.len();
        let mut succ = vec![Vec::new(); n];
        let mut indeg = vec![0usize; n];
        for e in &edges {
            let s = *pos.get(e.source.as_str()).ok_or_else(|| DagError::UnknownVertex {
                edge: e.id.clone(),
                vertex: e.source.clone(),
            })?;
            let t = *pos.get(e.target.as_str()).ok_or_else(|| DagError::UnknownVertex {
                edge: e.id.clone(),
                vertex: e.target.clone(),
            })?;
            succ[s].push(t);
            indeg[t] += 1;
        }
        // Kahn's algorithm, always taking the smallest ready vertex id
        let mut ready: BTreeSet<(&str, usize)> = (0..n)
            .filter(|&i| indeg[i] == 0)
            .map(|i| (vertices[i].id.as_str(), i))
            .collect();
        let mut order = Vec::with_capacity(n);
        while let Some(first) = ready.pop_first() {
            let v = first.1;
            order.push(v);
            for &w in &succ[v] {
                indeg[w] -= 1;
                if indeg[w] == 0 {
                    ready.insert((vertices[w].id.as_str(), w));
                }
            }
        }
        if order.len() < n {
            return Err(DagError::CycleDetected(find_cycle(&succ, &indeg, &vertices)));
        }
        let index: BTreeMap<String, VertexIx> =
            order.iter().enumerate().map(|(r, &v)| (vertices[v].id.clone(), r)).collect();
        let mut sorted: Vec<Option<Vertex>> = vertices.into_iter().map(Some).collect();
        let vertices: Vec<Vertex> = order.iter().map(|&v| sorted[v].take().unwrap()).collect();
        let edges: Vec<Edge> = edges
            .into_iter()
            .map(|e| Edge {
                source: index[&e.source],
                target: index[&e.target],
                id: e.id,
                kind: e.kind,
                guard: e.guard,
                is_default: e.is_default,
                payload: e.payload,
            })
            .collect();
        let mut out_edges = vec![Vec::new(); n];
        let mut in_edges = vec![Vec::new(); n];
        for (i, e) in edges.iter().enumerate() {
            out_edges[e.source].push(i);
            in_edges[e.target].push(i);
        }
        let sources: Vec<usize> = (0..n).filter(|&v| in_edges[v].is_empty()).collect();
        let sinks: Vec<usize> = (0..n).filter(|&v| out_edges[v].is_empty()).collect();
        let source = sources[0];
        let sink = *sinks.last().unwrap();
        let dag = FlowDag { vertices, edges, source, sink, out_edges, in_edges, index };
        let fwd = dag.reachable_from(source);
        let bwd = dag.reaching(sink);
        let bad: Vec<String> = (0..n)
            .filter(|&v| !fwd.contains(&v) || !bwd.contains(&v))
            .map(|v| dag.vertices[v].id.clone())
            .collect();
        if !bad.is_empty() {
            return Err(DagError::Disconnected(bad));
        }
        Ok(dag)
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<VertexIx> {
        self.index.get(id).copied()
    }

    pub fn vertex(&self, id: &str) -> Option<&Vertex> {
        self.index_of(id).map(|i| &self.vertices[i])
    }

    pub fn out_edges(&self, v: VertexIx) -> &[usize] {
        &self.out_edges[v]
    }

    pub fn in_edges(&self, v: VertexIx) -> &[usize] {
        &self.in_edges[v]
    }

    pub fn successors(&self, v: VertexIx) -> impl Iterator<Item = VertexIx> + '_ {
        self.out_edges[v].iter().map(|&e| self.edges[e].target)
    }

    pub fn predecessors(&self, v: VertexIx) -> impl Iterator<Item = VertexIx> + '_ {
        self.in_edges[v].iter().map(|&e| self.edges[e].source)
    }

    /// In-degree with the virtual edge entering the source counted.
    pub fn padded_in(&self, v: VertexIx) -> usize {
        self.in_edges[v].len() + usize::from(v == self.source)
    }

    /// Out-degree with the virtual edge leaving the sink counted.
    pub fn padded_out(&self, v: VertexIx) -> usize {
        self.out_edges[v].len() + usize::from(v == self.sink)
    }

    pub fn reachable_from(&self, v: VertexIx) -> BTreeSet<VertexIx> {
        let mut seen = BTreeSet::from([v]);
        let mut stack = vec![v];
        while let Some(x) = stack.pop() {
            for y in self.successors(x) {
                if seen.insert(y) {
                    stack.push(y);
                }
            }
        }
        seen
    }

    pub fn reaching(&self, v: VertexIx) -> BTreeSet<VertexIx> {
        let mut seen = BTreeSet::from([v]);
        let mut stack = vec![v];
        while let Some(x) = stack.pop() {
            for y in self.predecessors(x) {
                if seen.insert(y) {
                    stack.push(y);
                }
            }
        }
        seen
    }

    pub fn labels(&self, members: impl IntoIterator<Item = VertexIx>) -> Vec<String> {
        members.into_iter().map(|v| self.vertices[v].label.clone()).collect()
    }

    pub fn view(&self) -> GraphView {
        GraphView {
            vertices: self
                .vertices
                .iter()
                .enumerate()
                .map(|(rank, v)| VertexView {
                    id: v.id.clone(),
                    kind: v.kind.tag().to_string(),
                    actor: v.actor.clone(),
                    label: v.label.clone(),
                    rank,
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|e| EdgeView {
                    id: e.id.clone(),
                    source: self.vertices[e.source].id.clone(),
                    target: self.vertices[e.target].id.clone(),
                    kind: e.kind,
                    guard: e.guard.as_ref().map(|g| g.0.clone()),
                })
                .collect(),
            source: self.vertices[self.source].id.clone(),
            sink: self.vertices[self.sink].id.clone(),
        }
    }
}

fn find_cycle(succ: &[Vec<usize>], indeg: &[usize], vertices: &[Vertex]) -> Vec<String> {
    // every vertex left with positive in-degree lies on or behind a cycle;
    // walk predecessors-with-remaining-degree forward until a repeat
    let stuck: Vec<usize> = (0..succ.len()).filter(|&v| indeg[v] > 0).collect();
    let in_stuck: BTreeSet<usize> = stuck.iter().copied().collect();
    let mut path = vec![stuck[0]];
    let mut seen = BTreeMap::from([(stuck[0], 0usize)]);
    loop {
        let v = *path.last().unwrap();
        let next = succ[v].iter().copied().find(|w| in_stuck.contains(w));
        let Some(w) = next else { break };
        if let Some(&at) = seen.get(&w) {
            let mut cycle: Vec<String> = path[at..].iter().map(|&x| vertices[x].id.clone()).collect();
            cycle.push(vertices[w].id.clone());
            return cycle;
        }
        seen.insert(w, path.len());
        path.push(w);
    }
    path.iter().map(|&x| vertices[x].id.clone()).collect()
}

/// Serializable graph for the UI: ids instead of indices, topological ranks
/// as layout hints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphView {
    pub vertices: Vec<VertexView>,
    pub edges: Vec<EdgeView>,
    pub source: String,
    pub sink: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VertexView {
    pub id: String,
    pub kind: String,
    pub actor: String,
    pub label: String,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeView {
    pub id: String,
    pub source: String,
    pub target: String,
    pub kind: EdgeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guard: Option<String>,
}

/// One vertex per flow node, one edge per sequence flow and per message flow.
pub fn build_dag(model: &BpmnModel) -> Result<FlowDag, DagError> {
    let vertices = model
        .nodes
        .iter()
        .map(|n| Vertex {
            id: n.id.clone(),
            kind: n.kind,
            actor: n.actor.clone(),
            label: n.label.clone(),
            task_spec: n.task_spec.clone(),
            callback: n.callback.clone(),
        })
        .collect();
    let edges = model
        .sequence_flows
        .iter()
        .map(|f| EdgeSpec {
            id: f.id.clone(),
            source: f.source.clone(),
            target: f.target.clone(),
            kind: EdgeKind::Sequence,
            guard: f.guard.clone(),
            is_default: f.is_default,
            payload: f.payload.clone(),
        })
        .chain(model.message_flows.iter().map(|f| EdgeSpec {
            id: f.id.clone(),
            source: f.source.clone(),
            target: f.target.clone(),
            kind: EdgeKind::Message,
            guard: None,
            is_default: false,
            payload: f.payload.clone(),
        }))
        .collect();
    FlowDag::new(vertices, edges)
}
