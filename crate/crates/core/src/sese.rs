//! Single-entry single-exit regions: canonical decomposition, chain fusion,
//! candidate enumeration and the containment forest.
//!
//! A region `(a, b)` is the vertex set `M = {v : a ⇝ v ⇝ b}` such that every
//! edge into `M \ {a}` starts in `M`, every edge out of `M \ {b}` ends in `M`,
//! `a` has exactly one incoming and `b` exactly one outgoing edge. A virtual
//! edge enters the DAG source and one leaves the sink.
//!
//! Canonical regions are the multi-vertex regions that are not a series
//! composition of two smaller regions, plus maximal chains of atomic vertices
//! (non-gateway, one edge in, one edge out).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{DominatorInfo, FlowDag, VertexIx};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Canonical,
    Chain,
    Interval,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub id: String,
    pub entry: VertexIx,
    pub exit: VertexIx,
    pub members: BTreeSet<VertexIx>,
    pub composite: bool,
    pub kind: RegionKind,
}

impl Region {
    fn new(entry: VertexIx, exit: VertexIx, members: BTreeSet<VertexIx>, kind: RegionKind) -> Self {
        Region { id: String::new(), entry, exit, members, composite: false, kind }
    }

    pub fn contains(&self, other: &Region) -> bool {
        other.members.is_subset(&self.members)
    }

    pub fn strictly_contains(&self, other: &Region) -> bool {
        other.members.len() < self.members.len() && other.members.is_subset(&self.members)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionForest {
    pub regions: Vec<Region>,
    pub parent: BTreeMap<String, String>,
    pub roots: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainmentReport {
    /// Pairs of regions that overlap without nesting.
    pub violations: Vec<(String, String)>,
    pub parent: BTreeMap<String, String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SeseError {
    #[error("regions {0} and {1} overlap without nesting")]
    ContainmentViolation(String, String),
}

/// Members of region `(a, b)` via dominance, or `None` if `(a, b)` is not a
/// region.
pub fn region_members(dag: &FlowDag, dom: &DominatorInfo, a: VertexIx, b: VertexIx) -> Option<BTreeSet<VertexIx>> {
    if dag.padded_in(a) != 1 || dag.padded_out(b) != 1 {
        return None;
    }
    if !dom.dominates(a, b) || !dom.postdominates(b, a) {
        return None;
    }
    let members: BTreeSet<VertexIx> = (a..=b)
        .filter(|&v| dom.dominates(a, v) && dom.postdominates(b, v))
        .collect();
    boundary_ok(dag, a, b, &members).then_some(members)
}

pub(crate) fn boundary_ok(dag: &FlowDag, a: VertexIx, b: VertexIx, members: &BTreeSet<VertexIx>) -> bool {
    members.iter().all(|&v| {
        (v == a || dag.predecessors(v).all(|p| members.contains(&p)))
            && (v == b || dag.successors(v).all(|s| members.contains(&s)))
    })
}

pub fn is_atomic(dag: &FlowDag, v: VertexIx) -> bool {
    !dag.vertices[v].kind.is_gateway() && dag.padded_in(v) == 1 && dag.padded_out(v) == 1
}

/// All regions `(a, b)` including single vertices, ordered by `(a, b)`.
pub fn all_regions(dag: &FlowDag, dom: &DominatorInfo) -> Vec<(VertexIx, VertexIx, BTreeSet<VertexIx>)> {
    let mut out = Vec::new();
    for a in 0..dag.len() {
        for b in a..dag.len() {
            if let Some(m) = region_members(dag, dom, a, b) {
                out.push((a, b, m));
            }
        }
    }
    out
}

fn series_decomposable(dag: &FlowDag, dom: &DominatorInfo, a: VertexIx, b: VertexIx, members: &BTreeSet<VertexIx>) -> bool {
    members.iter().any(|&x| {
        x != b
            && dag.successors(x).filter(|y| members.contains(y)).any(|y| {
                let (Some(left), Some(right)) = (region_members(dag, dom, a, x), region_members(dag, dom, y, b)) else {
                    return false;
                };
                left.is_disjoint(&right) && left.len() + right.len() == members.len()
            })
    })
}

/// Merges overlapping or back-to-back chain regions into maximal chains.
/// Other regions pass through unchanged.
pub fn fuse_chains(dag: &FlowDag, regions: Vec<Region>) -> Vec<Region> {
    let (chains, mut out): (Vec<Region>, Vec<Region>) = regions
        .into_iter()
        .partition(|r| r.members.iter().all(|&v| is_atomic(dag, v)));
    let mut runs: Vec<BTreeSet<VertexIx>> = Vec::new();
    for c in chains {
        runs.push(c.members);
        // keep merging until no two runs touch
        loop {
            let mut merged = false;
            'outer: for i in 0..runs.len() {
                for j in i + 1..runs.len() {
                    let touch = !runs[i].is_disjoint(&runs[j]) || adjacent(dag, &runs[i], &runs[j]) || adjacent(dag, &runs[j], &runs[i]);
                    if touch {
                        let other = runs.remove(j);
                        runs[i].extend(other);
                        merged = true;
                        break 'outer;
                    }
                }
            }
            if !merged {
                break;
            }
        }
    }
    for run in runs {
        // topological order makes the first and last members the ends
        let entry = *run.first().unwrap();
        let exit = *run.last().unwrap();
        out.push(Region::new(entry, exit, run, RegionKind::Chain));
    }
    out
}

fn adjacent(dag: &FlowDag, left: &BTreeSet<VertexIx>, right: &BTreeSet<VertexIx>) -> bool {
    let (Some(&last), Some(&first)) = (left.last(), right.first()) else { return false };
    dag.successors(last).any(|s| s == first)
}

fn region_order(r: &Region) -> (VertexIx, usize, VertexIx) {
    (r.entry, r.members.len(), r.exit)
}

/// Canonical regions with chains fused; single vertices excluded.
pub fn canonical_regions(dag: &FlowDag, dom: &DominatorInfo) -> Vec<Region> {
    let mut regions = Vec::new();
    for (a, b, members) in all_regions(dag, dom) {
        if members.len() < 2 {
            continue;
        }
        if members.iter().all(|&v| is_atomic(dag, v)) {
            // chain pieces are collected below and fused
            continue;
        }
        if !series_decomposable(dag, dom, a, b, &members) {
            regions.push(Region::new(a, b, members, RegionKind::Canonical));
        }
    }
    for e in &dag.edges {
        if is_atomic(dag, e.source) && is_atomic(dag, e.target) {
            regions.push(Region::new(e.source, e.target, BTreeSet::from([e.source, e.target]), RegionKind::Chain));
        }
    }
    let mut regions = fuse_chains(dag, regions);
    regions.sort_by_key(region_order);
    regions
}

/// Number of non-interval regions inside `r`, itself included.
fn span(regions: &[Region], r: &Region) -> usize {
    regions
        .iter()
        .filter(|c| c.kind != RegionKind::Interval && r.contains(c))
        .count()
}

/// Smallest proper container by canonical span; ties go to the earlier id.
fn smallest_container<'a>(regions: &'a [Region], r: &Region) -> Option<&'a Region> {
    regions
        .iter()
        .enumerate()
        .filter(|(_, p)| p.strictly_contains(r))
        .min_by_key(|(i, p)| (span(regions, p), *i))
        .map(|(_, p)| p)
}

/// Canonical regions plus every contiguous run (of length at least two) of
/// sibling regions in series under the same parent. The whole DAG acts as
/// the parent of top-level regions.
pub fn enumerate_candidates(dag: &FlowDag, dom: &DominatorInfo) -> Result<RegionForest, SeseError> {
    let canonical = canonical_regions(dag, dom);
    let whole: BTreeSet<VertexIx> = (0..dag.len()).collect();
    let mut parents: Vec<BTreeSet<VertexIx>> = vec![whole];
    parents.extend(canonical.iter().filter(|r| r.kind != RegionKind::Chain).map(|r| r.members.clone()));

    let mut seen: BTreeSet<BTreeSet<VertexIx>> = canonical.iter().map(|r| r.members.clone()).collect();
    let mut intervals = Vec::new();
    for parent in &parents {
        let children: Vec<&Region> = canonical
            .iter()
            .filter(|c| c.members.len() < parent.len() && c.members.is_subset(parent))
            .filter(|c| {
                // keep maximal children only
                !canonical.iter().any(|o| {
                    o.members.len() < parent.len() && o.members.is_subset(parent) && o.strictly_contains(c)
                })
            })
            .collect();
        for (i, first) in children.iter().enumerate() {
            for last in &children[i + 1..] {
                let Some(members) = region_members(dag, dom, first.entry, last.exit) else { continue };
                if !members.is_subset(parent) {
                    continue;
                }
                let mut covered = 0;
                let clean = children.iter().all(|c| {
                    if c.members.is_subset(&members) {
                        covered += 1;
                        true
                    } else {
                        c.members.is_disjoint(&members)
                    }
                });
                if clean && covered >= 2 && seen.insert(members.clone()) {
                    intervals.push(Region::new(first.entry, last.exit, members, RegionKind::Interval));
                }
            }
        }
    }
    intervals.sort_by_key(region_order);

    let mut regions: Vec<Region> = canonical.into_iter().chain(intervals).collect();
    for (i, r) in regions.iter_mut().enumerate() {
        r.id = format!("S{}", i + 1);
    }
    let canonical_sets: Vec<BTreeSet<VertexIx>> = regions
        .iter()
        .filter(|r| r.kind != RegionKind::Interval)
        .map(|r| r.members.clone())
        .collect();
    for r in &mut regions {
        let spans = canonical_sets.iter().filter(|c| c.is_subset(&r.members)).count();
        let gateway = r.members.iter().any(|&v| dag.vertices[v].kind.is_gateway());
        r.composite = gateway || spans > 1;
    }
    RegionForest::build(regions)
}

/// Disjoint-or-nested check and parent assignment. Sibling intervals in
/// series overlap by construction (`A∪B` and `B∪C`), so only pairs involving
/// a canonical or chain region are required to nest.
pub fn check_containment(regions: &[Region]) -> ContainmentReport {
    let mut report = ContainmentReport::default();
    for (i, a) in regions.iter().enumerate() {
        for b in &regions[i + 1..] {
            let nested = a.members.is_subset(&b.members) || b.members.is_subset(&a.members);
            let both_intervals = a.kind == RegionKind::Interval && b.kind == RegionKind::Interval;
            if !nested && !both_intervals && !a.members.is_disjoint(&b.members) {
                report.violations.push((a.id.clone(), b.id.clone()));
            }
        }
        if let Some(p) = smallest_container(regions, a) {
            report.parent.insert(a.id.clone(), p.id.clone());
        }
    }
    report
}

impl RegionForest {
    pub fn build(regions: Vec<Region>) -> Result<Self, SeseError> {
        let report = check_containment(&regions);
        if let Some((a, b)) = report.violations.first() {
            return Err(SeseError::ContainmentViolation(a.clone(), b.clone()));
        }
        let roots = regions
            .iter()
            .filter(|r| !report.parent.contains_key(&r.id))
            .map(|r| r.id.clone())
            .collect();
        Ok(RegionForest { regions, parent: report.parent, roots })
    }

    pub fn get(&self, id: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.id == id)
    }

    pub fn children(&self, id: &str) -> Vec<&Region> {
        self.regions
            .iter()
            .filter(|r| self.parent.get(&r.id).map(String::as_str) == Some(id))
            .collect()
    }

    /// Regions with no other candidate nested inside.
    pub fn minimal(&self) -> Vec<&Region> {
        self.regions
            .iter()
            .filter(|r| !self.regions.iter().any(|o| r.strictly_contains(o)))
            .collect()
    }

    pub fn report(&self, dag: &FlowDag) -> Vec<RegionView> {
        self.regions
            .iter()
            .map(|r| RegionView {
                id: r.id.clone(),
                kind: r.kind,
                entry: dag.vertices[r.entry].label.clone(),
                exit: dag.vertices[r.exit].label.clone(),
                entry_id: dag.vertices[r.entry].id.clone(),
                exit_id: dag.vertices[r.exit].id.clone(),
                members: r.members.iter().map(|&v| dag.vertices[v].label.clone()).collect(),
                member_ids: r.members.iter().map(|&v| dag.vertices[v].id.clone()).collect(),
                parent: self.parent.get(&r.id).cloned(),
                composite: r.composite,
            })
            .collect()
    }
}

/// Candidate as reported to the CLI and the UI.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionView {
    pub id: String,
    pub kind: RegionKind,
    pub entry: String,
    pub exit: String,
    pub entry_id: String,
    pub exit_id: String,
    pub members: Vec<String>,
    pub member_ids: Vec<String>,
    #[serde(default)]
    pub parent: Option<String>,
    pub composite: bool,
}
