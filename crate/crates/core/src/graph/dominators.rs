use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{FlowDag, VertexIx};

/// Immediate dominators and postdominators, indexed by vertex.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DominatorInfo {
    pub idom: Vec<VertexIx>,
    pub ipdom: Vec<VertexIx>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DominatorView {
    pub idom: BTreeMap<String, String>,
    pub ipdom: BTreeMap<String, String>,
}

impl DominatorInfo {
    /// `a` dominates `b` (reflexive).
    pub fn dominates(&self, a: VertexIx, b: VertexIx) -> bool {
        walk_up(&self.idom, a, b)
    }

    /// `a` postdominates `b` (reflexive).
    pub fn postdominates(&self, a: VertexIx, b: VertexIx) -> bool {
        walk_up(&self.ipdom, a, b)
    }

    pub fn view(&self, dag: &FlowDag) -> DominatorView {
        let name = |v: VertexIx| dag.vertices[v].id.clone();
        DominatorView {
            idom: self.idom.iter().enumerate().map(|(v, &d)| (name(v), name(d))).collect(),
            ipdom: self.ipdom.iter().enumerate().map(|(v, &d)| (name(v), name(d))).collect(),
        }
    }
}

fn walk_up(tree: &[VertexIx], a: VertexIx, mut b: VertexIx) -> bool {
    loop {
        if a == b {
            return true;
        }
        let parent = tree[b];
        if parent == b {
            return false;
        }
        b = parent;
    }
}

/// Reverse postorder of a depth-first walk from `root`.
fn reverse_postorder(n: usize, root: usize, succ: &dyn Fn(usize) -> Vec<usize>) -> Vec<usize> {
    let mut visited = vec![false; n];
    let mut post = Vec::with_capacity(n);
    let mut stack: Vec<(usize, Vec<usize>, usize)> = vec![(root, succ(root), 0)];
    visited[root] = true;
    while let Some((v, next, i)) = stack.last_mut() {
        if *i < next.len() {
            let w = next[*i];
            *i += 1;
            if !visited[w] {
                visited[w] = true;
                let s = succ(w);
                stack.push((w, s, 0));
            }
        } else {
            post.push(*v);
            stack.pop();
        }
    }
    post.reverse();
    post
}

/// Iterative data-flow dominator computation over reverse postorder.
fn immediate(n: usize, root: usize, succ: &dyn Fn(usize) -> Vec<usize>, pred: &dyn Fn(usize) -> Vec<usize>) -> Vec<usize> {
    const UNDEF: usize = usize::MAX;
    let rpo = reverse_postorder(n, root, succ);
    let mut order = vec![UNDEF; n];
    for (i, &v) in rpo.iter().enumerate() {
        order[v] = i;
    }
    let mut idom = vec![UNDEF; n];
    idom[root] = root;
    let intersect = |idom: &[usize], mut a: usize, mut b: usize| {
        while a != b {
            while order[a] > order[b] {
                a = idom[a];
            }
            while order[b] > order[a] {
                b = idom[b];
            }
        }
        a
    };
    let mut changed = true;
    while changed {
        changed = false;
        for &v in rpo.iter().skip(1) {
            let mut new_idom = UNDEF;
            for p in pred(v) {
                if idom[p] == UNDEF {
                    continue;
                }
                new_idom = if new_idom == UNDEF { p } else { intersect(&idom, p, new_idom) };
            }
            if new_idom != UNDEF && idom[v] != new_idom {
                idom[v] = new_idom;
                changed = true;
            }
        }
    }
    idom
}

pub fn dominators(dag: &FlowDag) -> DominatorInfo {
    let n = dag.len();
    let succ = |v: usize| dag.successors(v).collect::<Vec<_>>();
    let pred = |v: usize| dag.predecessors(v).collect::<Vec<_>>();
    let idom = immediate(n, dag.source, &succ, &pred);
    let ipdom = immediate(n, dag.sink, &pred, &succ);
    DominatorInfo { idom, ipdom }
}
