mod common;

use std::collections::BTreeSet;

use common::{blocks, conj, letters};
use relmc_core::checker::{canonical_entries, CheckConfig, Checker, SatPattern};
use relmc_core::engine::{Engine, Step, VRule, ValueFunction};
use relmc_core::oracle::{ground_model, EnumerateOptions};
use relmc_core::pctl::parse_formula;
use relmc_core::term::{canonical_form, mgs, standardize_apart, subsumes, Conjunction};

fn canon_set(states: &[Conjunction]) -> BTreeSet<Conjunction> {
    states.iter().map(canonical_form).collect()
}

fn listing(rules: &[(f64, &str)]) -> ValueFunction {
    ValueFunction::new(rules.iter().map(|(v, s)| VRule { value: *v, state: conj(s) }).collect())
}

fn five_block_states() -> Vec<Conjunction> {
    ground_model(&blocks(), &letters(5), EnumerateOptions::default()).unwrap().states
}

/// Ground states from which the success branch of `move` produces `goal`,
/// restricted to states containing `within`.
fn ground_preimage(states: &[Conjunction], goal: &Conjunction, within: &Conjunction) -> BTreeSet<Conjunction> {
    let m = blocks();
    let success = &m.transitions[0].rules[0];
    let mut out = BTreeSet::new();
    for s in states.iter().filter(|s| within.is_subset_of(s)) {
        for inst in m.ground_instances(s).unwrap() {
            let body = m.transitions[0].body.map_terms(|t| inst.theta.term(t)).unwrap();
            let head = success.head.map_terms(|t| inst.theta.term(t)).unwrap();
            let next = s.without(&body).union(&head).unwrap();
            if goal.is_subset_of(&next) {
                out.insert(s.clone());
            }
        }
    }
    out
}

fn covered(states: &[Conjunction], abstract_states: &[Conjunction]) -> BTreeSet<Conjunction> {
    states.iter().filter(|s| abstract_states.iter().any(|a| subsumes(a, s))).cloned().collect()
}

#[test]
fn unconstrained_regression_golden() {
    let m = blocks();
    let engine = Engine::new(&m, None);
    let pre = engine.regression(&m.transitions[0].rules[0], None, &conj("on(a,b)"));
    let expected = [
        "cl(a), cl(b), on(a,Z)",
        "cl(X), cl(a), on(X,Z), on(a,b)",
        "cl(X), cl(Y), on(X,a), on(a,b)",
        "cl(X), cl(Y), on(X,Z), on(a,b)",
    ];
    let expected: Vec<Conjunction> = expected.iter().map(|s| conj(s)).collect();
    assert_eq!(canon_set(&pre), canon_set(&expected));

    let states = five_block_states();
    assert_eq!(covered(&states, &pre), ground_preimage(&states, &conj("on(a,b)"), &Conjunction::empty()));
}

#[test]
fn constrained_regression_is_the_ground_preimage() {
    let m = blocks();
    let engine = Engine::new(&m, None);
    let constraint = [conj("on(c,d)")];
    let pre = engine.regression(&m.transitions[0].rules[0], Some(&constraint), &conj("on(a,b)"));
    assert!(pre.iter().all(|s| conj("on(c,d)").is_subset_of(s)));
    let states = five_block_states();
    assert_eq!(covered(&states, &pre), ground_preimage(&states, &conj("on(a,b)"), &conj("on(c,d)")));
    // Every pre-state carries a move precondition: two clear blocks, one of
    // them on something.
    let body = conj("cl(A), cl(B), on(A,C)");
    assert!(pre.iter().all(|s| subsumes(&body, s)), "{pre:?}");
}

fn same_on(states: &[Conjunction], a: &ValueFunction, b: &ValueFunction) {
    for s in states {
        let (x, y) = (a.evaluate(s), b.evaluate(s));
        assert!((x - y).abs() <= 1e-12, "{s}: {x} vs {y}\n{a}\n{b}");
    }
}

#[test]
fn next_step_value_function() {
    let m = blocks();
    let engine = Engine::new(&m, None);
    let goal = [conj("on(a,b)")];
    let v0 = ValueFunction::goal(&goal);
    let (v1, _) = engine.one_iteration(&v0, &Step::Next);
    let expected = listing(&[
        (1.0, "cl(X), cl(a), on(X,Z), on(a,b)"),
        (1.0, "cl(X), cl(Y), on(X,a), on(a,b)"),
        (1.0, "cl(X), cl(Y), on(X,Z), on(a,b)"),
        (0.9, "cl(a), cl(b), on(a,Z)"),
        (0.1, "cl(a), cl(Y), on(a,b)"),
        (0.0, "cl(X), cl(Y), on(X,Z)"),
    ]);
    same_on(&five_block_states(), &v1, &expected);
    let values: BTreeSet<u64> = v1.rules().iter().map(|r| r.value.to_bits()).collect();
    let listed: BTreeSet<u64> = [1.0f64, 0.9, 0.1, 0.0].iter().map(|v| v.to_bits()).collect();
    assert_eq!(values, listed);
}

#[test]
fn until_value_function() {
    let m = blocks();
    let engine = Engine::new(&m, None);
    let goal = [conj("on(a,b)")];
    let constraint = [conj("on(c,d)")];
    let v0 = ValueFunction::goal(&goal);
    let step = Step::Until { constraint: Some(&constraint), goal: &goal };
    let (v1, _) = engine.one_iteration(&v0, &step);
    let expected = listing(&[
        (1.0, "on(a,b)"),
        (0.9, "cl(a), cl(b), on(a,Z), on(c,d)"),
        (0.9, "cl(a), cl(b), on(a,c), on(c,d)"),
        (0.0, "cl(X), cl(Y), on(X,Z), on(c,d)"),
    ]);
    same_on(&five_block_states(), &v1, &expected);
}

#[test]
fn literal_check() {
    let m = blocks();
    let checker = Checker::new(&m, CheckConfig::default());
    let out = checker.check(&parse_formula("on(a,b)").unwrap()).unwrap();
    assert_eq!(out.sat.len(), 1);
    assert_eq!(out.sat.entries[0].state, SatPattern::Pos(conj("on(a,b)")));
    assert!(out.nodes.is_empty());
}

#[test]
fn conjunction_check_uses_mgs() {
    let m = blocks();
    let checker = Checker::new(&m, CheckConfig::default());
    let out = checker.check(&parse_formula("cl(X) & on(X,Y)").unwrap()).unwrap();
    // Without constraints there are three specialisations; a clear block
    // under another block is illegal in the blocks world.
    let expected = canon_set(&[conj("cl(X), on(X,Y)"), conj("cl(X), on(Y,Z)")]);
    let got: BTreeSet<Conjunction> = out
        .sat
        .entries
        .iter()
        .map(|e| match &e.state {
            SatPattern::Pos(c) => canonical_form(c),
            SatPattern::Neg(a) => panic!("negative entry {a}"),
        })
        .collect();
    assert_eq!(got, expected);
    let left = conj("cl(X)");
    let right = standardize_apart(&conj("on(X,Y)"), &left.vars());
    assert_eq!(mgs(&left, &right).unwrap().len(), 3);
}

#[test]
fn next_probability_entries() {
    let m = blocks();
    let checker = Checker::new(&m, CheckConfig::default());
    let out = checker.check(&parse_formula("P>=0.9 [X on(a,b)]").unwrap()).unwrap();
    let values: Vec<f64> = out.sat.entries.iter().map(|e| e.value.unwrap()).collect();
    assert_eq!(values.iter().filter(|v| **v == 1.0).count(), 3);
    assert_eq!(values.iter().filter(|v| (**v - 0.9).abs() < 1e-12).count(), 1);
    assert_eq!(values.len(), 4);
    assert_eq!(out.iterations(), 1);
    assert!(out.converged());
    assert_eq!(canonical_entries(&out.sat).len(), 4);
}
