mod common;

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{brute_dominates, brute_postdominates, fixture, random_dag, RegionOracle};
use tabsplus_core::graph::dominators;
use tabsplus_core::sese::{canonical_regions, check_containment, enumerate_candidates, RegionKind};

fn labels(analysis: &tabsplus_core::pipeline::Analysis, id: &str) -> Vec<String> {
    let r = analysis.forest.get(id).unwrap_or_else(|| panic!("{id} exists"));
    analysis.dag.labels(r.members.iter().copied())
}

#[test]
fn fixture_minimal_regions() {
    let a = fixture();
    let minimal: Vec<&str> = a.forest.minimal().iter().map(|r| r.id.as_str()).collect();
    assert_eq!(minimal, ["S1", "S2", "S3", "S4"]);
    let s1 = labels(&a, "S1");
    assert_eq!(s1.first().map(String::as_str), Some("INIT"));
    assert_eq!(s1.last().map(String::as_str), Some("Middleman receives order"));
    let s3: BTreeSet<String> = labels(&a, "S3").into_iter().collect();
    let want: BTreeSet<String> =
        ["provide details", "provide waybill", "receive details", "receive waybill"].map(String::from).into();
    assert_eq!(s3, want);
    assert_eq!(labels(&a, "S4").last().map(String::as_str), Some("SUCCESS"));
}

#[test]
fn fixture_candidates_and_links() {
    let a = fixture();
    assert_eq!(a.forest.regions.len(), 10);
    let s5 = a.forest.get("S5").unwrap();
    let union: BTreeSet<_> = a.forest.get("S1").unwrap().members.union(&a.forest.get("S2").unwrap().members).copied().collect();
    assert_eq!(s5.members, union);
    assert_eq!(a.forest.parent["S1"], "S5");
    assert_eq!(a.forest.parent["S2"], "S5");
    let mut kids: Vec<&str> = a.forest.children("S5").iter().map(|r| r.id.as_str()).collect();
    kids.sort();
    assert_eq!(kids, ["S1", "S2"]);
    assert_eq!(a.forest.roots, ["S7"]);
    // S7 is the whole process
    assert_eq!(a.forest.get("S7").unwrap().members.len(), a.dag.len());
}

#[test]
fn fixture_region_ids_are_stable() {
    let a = fixture().report();
    let b = fixture().report();
    assert_eq!(a, b);
    let kinds: Vec<RegionKind> = fixture().forest.regions.iter().map(|r| r.kind).collect();
    assert_eq!(&kinds[..4], [RegionKind::Chain, RegionKind::Canonical, RegionKind::Canonical, RegionKind::Chain]);
}

#[test]
fn dominators_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..150 {
        let n = rng.gen_range(2..=12);
        let dag = random_dag(&mut rng, n);
        let dom = dominators(&dag);
        for a in 0..n {
            for b in 0..n {
                assert_eq!(dom.dominates(a, b), brute_dominates(&dag, a, b), "dom {a} {b} in {:?}", dag.view());
                assert_eq!(dom.postdominates(a, b), brute_postdominates(&dag, a, b), "pdom {a} {b}");
            }
        }
    }
}

#[test]
fn canonical_regions_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let n = rng.gen_range(2..=12);
        let dag = random_dag(&mut rng, n);
        let dom = dominators(&dag);
        let got: BTreeSet<BTreeSet<usize>> = canonical_regions(&dag, &dom).into_iter().map(|r| r.members).collect();
        assert_eq!(got, RegionOracle::new(&dag).canonical(), "{:?}", dag.view());
    }
}

#[test]
fn canonical_regions_nest() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let n = rng.gen_range(2..=12);
        let dag = random_dag(&mut rng, n);
        let regions = canonical_regions(&dag, &dominators(&dag));
        for (i, x) in regions.iter().enumerate() {
            for y in &regions[i + 1..] {
                let ok = x.members.is_disjoint(&y.members) || x.contains(y) || y.contains(x);
                assert!(ok, "{:?} / {:?}", x.members, y.members);
            }
        }
        let forest = enumerate_candidates(&dag, &dominators(&dag)).expect("candidates nest");
        assert!(check_containment(&forest.regions).violations.is_empty());
        for (child, parent) in &forest.parent {
            assert!(forest.get(parent).unwrap().strictly_contains(forest.get(child).unwrap()));
        }
    }
}

#[test]
fn intervals_are_regions() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let n = rng.gen_range(2..=12);
        let dag = random_dag(&mut rng, n);
        let oracle = RegionOracle::new(&dag);
        let forest = enumerate_candidates(&dag, &dominators(&dag)).unwrap();
        for r in &forest.regions {
            assert_eq!(oracle.region(r.entry, r.exit).as_ref(), Some(&r.members), "{}", r.id);
        }
    }
}
