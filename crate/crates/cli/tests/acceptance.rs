//! Acceptance suite: one test per criterion, each printing a PASS or FAIL
//! line before asserting.

use std::collections::{BTreeSet, HashMap};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use relmc_core::checker::{CheckConfig, Checker, SatPattern};
use relmc_core::engine::{Engine, Step, VRule, ValueFunction};
use relmc_core::model::{parse_model, RmdpModel, BLOCKS_WORLD};
use relmc_core::oracle::{explicit_check, ground_model, path_probability, EnumerateOptions, ExplicitOptions, Path};
use relmc_core::pctl::parse_formula;
use relmc_core::syntax::parse_conjunction;
use relmc_core::term::{canonical_form, Atom, Conjunction, Sym, Term};

const VALUE_TOL: f64 = 1e-12;
const COMPARE_TOL: f64 = 1e-9;

fn verdict(id: u32, name: &str, ok: bool, detail: &str) {
    println!("{} criterion {id}: {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {id} failed: {detail}");
}

fn model_path(name: &str) -> String {
    format!("{}/../../models/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn blocks() -> RmdpModel {
    parse_model(BLOCKS_WORLD).unwrap()
}

fn conj(text: &str) -> Conjunction {
    parse_conjunction(text).unwrap()
}

fn pool(names: &[&str]) -> Vec<Sym> {
    names.iter().map(|n| Sym::intern(n)).collect()
}

fn relmc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relmc")).args(args).output().expect("binary runs")
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or(serde_json::Value::Null)
}

fn listing(rules: &[(f64, &str)]) -> ValueFunction {
    ValueFunction::new(rules.iter().map(|(v, s)| VRule { value: *v, state: conj(s) }).collect())
}

/// Largest value difference over all ground states of the 5-block world.
fn ground_difference(a: &ValueFunction, b: &ValueFunction) -> f64 {
    let g = ground_model(&blocks(), &pool(&["a", "b", "c", "d", "e"]), EnumerateOptions::default()).unwrap();
    g.states.iter().map(|s| (a.evaluate(s) - b.evaluate(s)).abs()).fold(0.0, f64::max)
}

#[test]
fn criterion_01_next_golden() {
    let start = Instant::now();
    let m = blocks();
    let goal = [conj("on(a,b)")];
    let (v1, _) = Engine::new(&m, None).one_iteration(&ValueFunction::goal(&goal), &Step::Next);
    let expected = listing(&[
        (1.0, "cl(X), cl(a), on(X,Z), on(a,b)"),
        (1.0, "cl(X), cl(Y), on(X,a), on(a,b)"),
        (1.0, "cl(X), cl(Y), on(X,Z), on(a,b)"),
        (0.9, "cl(a), cl(b), on(a,Z)"),
        (0.1, "cl(a), cl(Y), on(a,b)"),
        (0.0, "cl(X), cl(Y), on(X,Z)"),
    ]);
    let d = ground_difference(&v1, &expected);
    let elapsed = start.elapsed();
    verdict(
        1,
        "next-step V1 golden",
        d <= VALUE_TOL && elapsed < Duration::from_secs(5),
        &format!("max ground difference {d:e} (tol {VALUE_TOL:e}), {} ms", elapsed.as_millis()),
    );
}

#[test]
fn criterion_02_until_golden() {
    let m = blocks();
    let goal = [conj("on(a,b)")];
    let constraint = [conj("on(c,d)")];
    let step = Step::Until { constraint: Some(&constraint), goal: &goal };
    let (v1, _) = Engine::new(&m, None).one_iteration(&ValueFunction::goal(&goal), &step);
    let expected = listing(&[
        (1.0, "on(a,b)"),
        (0.9, "cl(a), cl(b), on(a,Z), on(c,d)"),
        (0.9, "cl(a), cl(b), on(a,c), on(c,d)"),
        (0.0, "cl(X), cl(Y), on(X,Z), on(c,d)"),
    ]);
    let d = ground_difference(&v1, &expected);
    verdict(2, "until V1 golden", d <= VALUE_TOL, &format!("max ground difference {d:e} (tol {VALUE_TOL:e})"));
}

fn canon_set(states: &[Conjunction]) -> BTreeSet<Conjunction> {
    states.iter().map(canonical_form).collect()
}

#[test]
fn criterion_03_regression_golden() {
    let m = blocks();
    let engine = Engine::new(&m, None);
    let success = &m.transitions[0].rules[0];
    let target = conj("on(a,b)");

    let free = engine.regression(success, None, &target);
    let free_expected: Vec<Conjunction> = [
        "cl(a), cl(b), on(a,Z)",
        "cl(X), cl(a), on(X,Z), on(a,b)",
        "cl(X), cl(Y), on(X,a), on(a,b)",
        "cl(X), cl(Y), on(X,Z), on(a,b)",
    ]
    .iter()
    .map(|s| conj(s))
    .collect();

    let constraint = [conj("on(c,d)")];
    let constrained = engine.regression(success, Some(&constraint), &target);
    let constrained_expected: Vec<Conjunction> = [
        "cl(a), cl(b), on(a,Z), on(c,d)",
        "cl(a), cl(b), on(a,c), on(c,d)",
        "cl(X), cl(a), on(X,Z), on(a,b), on(c,d)",
        "cl(a), on(a,b), on(c,d)",
        "cl(c), on(a,b), on(c,d)",
        "cl(X), cl(a), on(X,c), on(a,b), on(c,d)",
        "cl(X), cl(Y), on(X,a), on(a,b), on(c,d)",
        "cl(X), cl(c), on(X,a), on(a,b), on(c,d)",
        "cl(X), cl(Y), on(X,Z), on(a,b), on(c,d)",
        "cl(a), cl(Y), on(a,b), on(c,d)",
        "cl(a), cl(c), on(a,b), on(c,d)",
        "cl(c), cl(Y), on(a,b), on(c,d)",
        "cl(X), cl(Y), on(X,c), on(a,b), on(c,d)",
    ]
    .iter()
    .map(|s| conj(s))
    .collect();

    let (got_free, want_free) = (canon_set(&free), canon_set(&free_expected));
    let (got_con, want_con) = (canon_set(&constrained), canon_set(&constrained_expected));
    let missing: Vec<String> = want_con.difference(&got_con).map(|c| c.to_string()).collect();
    let extra: Vec<String> = got_con.difference(&want_con).map(|c| c.to_string()).collect();
    verdict(
        3,
        "regression golden",
        got_free == want_free && got_con == want_con,
        &format!(
            "unconstrained {}/{} listed states{}; constrained {} states vs {} listed, missing [{}], extra [{}]",
            got_free.intersection(&want_free).count(),
            want_free.len(),
            if got_free == want_free { " exactly" } else { " (mismatch)" },
            got_con.len(),
            want_con.len(),
            missing.join(" ; "),
            extra.join(" ; "),
        ),
    );
}

/// Counts stackings of `n` distinct blocks: each block rests on the table or
/// on a distinct other block, without cycles.
fn stackings(n: usize) -> usize {
    let mut count = 0;
    let mut support = vec![0usize; n];
    'outer: loop {
        let distinct = (0..n).all(|i| support[i] == n || (i + 1..n).all(|j| support[j] != support[i]));
        let acyclic = (0..n).all(|i| {
            let mut cur = i;
            (0..=n).any(|_| {
                if support[cur] == n {
                    return true;
                }
                cur = support[cur];
                false
            })
        });
        if distinct && acyclic {
            count += 1;
        }
        for k in 0..n {
            if support[k] < n {
                support[k] += 1;
                continue 'outer;
            }
            support[k] = 0;
        }
        return count;
    }
}

#[test]
fn criterion_04_ground_counts() {
    let m = blocks();
    let five = ground_model(&m, &pool(&["a", "b", "c", "d", "e"]), EnumerateOptions::default()).unwrap().len();
    let three = ground_model(&m, &pool(&["a", "b", "c"]), EnumerateOptions::default()).unwrap().len();
    let brute = stackings(3);
    verdict(
        4,
        "ground state counts",
        five == 501 && three == 13 && brute == 13,
        &format!("5 blocks: {five} (want 501); 3 blocks: {three} (want 13, brute force {brute})"),
    );
}

#[test]
fn criterion_05_abstract_structure() {
    let g = ground_model(&blocks(), &pool(&["a", "b", "c"]), EnumerateOptions::default()).unwrap();
    let mut shapes = BTreeSet::new();
    for s in &g.states {
        let index: HashMap<Sym, u32> = s.constants().into_iter().zip(0..).collect();
        let lifted = s
            .map_terms(|t| match t {
                Term::Const(c) => Term::Var(index[&c]),
                t => t,
            })
            .unwrap();
        shapes.insert(canonical_form(&lifted));
    }
    let listed: Vec<String> = shapes.iter().map(|s| s.to_string()).collect();
    verdict(
        5,
        "abstract states of the 3-block world",
        shapes.len() == 3,
        &format!("{} canonical abstract states: {}", shapes.len(), listed.join(" ; ")),
    );
}

/// The nested example with the outer and inner until bounds replaced.
fn phi_nested(i: u32, j: u32) -> String {
    format!("P>=0.5 [ cl(a) U<={i} (on(a,b) & P>=0.8 [ P>=0.9 [X cl(e)] U<={j} on(c,d) ]) ]")
}

#[test]
fn criterion_06_oracle_equivalence() {
    let start = Instant::now();
    let blocks = model_path("blocks.rmdp");
    let mut corpus: Vec<String> = [1, 2, 5, 10].iter().map(|k| format!("P>=0.5 [F<={k} on(a,b)]")).collect();
    corpus.push("P>=0.5 [on(c,d) U<=5 on(a,b)]".into());
    corpus.push("P>=0.9 [X on(a,b)]".into());
    corpus.push(phi_nested(3, 1));
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    let mut runs = 0;
    for constants in ["a,b,c", "a,b,c,d"] {
        for f in &corpus {
            let out = relmc(&["compare", "--model", &blocks, "--constants", constants, "--formula", f, "--output", "json"]);
            let v = json(&out);
            runs += 1;
            let deviation = v["report"]["max_deviation"].as_f64().unwrap_or(f64::INFINITY);
            let booleans = v["report"]["boolean_mismatches"].as_array().map_or(usize::MAX, |a| a.len());
            worst = worst.max(deviation);
            if out.status.code() != Some(0) || booleans != 0 || !(deviation < COMPARE_TOL) {
                failures.push(format!("[{constants}] {f}: exit {:?}, {booleans} boolean mismatches, deviation {deviation:e}", out.status.code()));
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        6,
        "oracle equivalence on 3 and 4 blocks",
        failures.is_empty() && elapsed < Duration::from_secs(600),
        &format!(
            "{runs} comparisons, {} failing, max deviation {worst:e} (tol {COMPARE_TOL:e}), {:.1} s{}",
            failures.len(),
            elapsed.as_secs_f64(),
            if failures.is_empty() { String::new() } else { format!(": {}", failures.join(" | ")) }
        ),
    );
}

fn ground_move(a: &str, b: &str, c: &str) -> Atom {
    conj(&format!("move({a},{b},{c})")).atoms()[0].clone()
}

#[test]
fn criterion_07_path_probability() {
    let m = blocks();
    let g = ground_model(&m, &pool(&["a", "b", "c", "d", "e"]), EnumerateOptions::default()).unwrap();
    // Towers c-a, b-d and e: put d on e, then a on b.
    let s0 = conj("cl(a), cl(d), cl(e), on(a,c), on(d,b)");
    let s1 = conj("cl(a), cl(b), cl(d), on(a,c), on(d,e)");
    let s2 = conj("cl(a), cl(c), cl(d), on(a,b), on(d,e)");
    let plan = HashMap::from([(s0.clone(), ground_move("d", "e", "b")), (s1.clone(), ground_move("a", "b", "c"))]);
    let policy = |s: &Conjunction| plan.get(s).cloned();
    let two = Path { states: vec![s0.clone(), s1.clone(), s2.clone()], actions: vec![plan[&s0].clone(), plan[&s1].clone()] };
    let one = Path { states: vec![s1.clone(), s2], actions: vec![plan[&s1].clone()] };
    let p2 = path_probability(&g, &policy, &two).unwrap();
    let p1 = path_probability(&g, &policy, &one).unwrap();

    let f = parse_formula("P>=0.5 [F<=2 on(a,b)]").unwrap();
    let r = explicit_check(&g, &f, ExplicitOptions::default(), &HashMap::new());
    let values = r.root().values.clone().unwrap();
    let one_move = conj("cl(a), cl(b), cl(d), cl(e), on(a,c)");
    let v1 = values[g.index_of(&one_move).unwrap()];
    let v2 = values[g.index_of(&s0).unwrap()];
    // Expected maxima by hand: 0.9 + 0.1 * 0.9 one move away, 0.9 * 0.9 two moves away.
    let ok = (p2 - 0.81).abs() < VALUE_TOL
        && (p1 - 0.9).abs() < VALUE_TOL
        && (v1 - 0.99).abs() < VALUE_TOL
        && (v2 - 0.81).abs() < VALUE_TOL;
    verdict(
        7,
        "path probabilities",
        ok,
        &format!("two-success path {p2}, one-success path {p1}; F<=2 maxima {v1} (one move), {v2} (two moves)"),
    );
}

#[test]
fn criterion_08_unbounded_box_world() {
    let boxes = model_path("box.rmdp");
    let f = "P>=0.5 [F bin(b1,paris)]";
    let check = relmc(&["check", "--model", &boxes, "--formula", f, "--output", "json"]);
    let v = json(&check);
    let converged = check.status.code() == Some(0) && v["converged"] == true;
    let iterations = v["iterations"].as_u64().unwrap_or(0);
    let mut details = vec![format!("lifted converged={converged} after {iterations} iterations (epsilon 1e-6, cap 1000)")];
    let mut ok = converged;
    for constants in ["b1,t1,paris", "b1,t1,paris,berlin"] {
        let out = relmc(&["compare", "--model", &boxes, "--constants", constants, "--formula", f, "--output", "json"]);
        let r = json(&out);
        let clean = out.status.code() == Some(0) && r["mismatches"] == 0;
        ok &= clean;
        details.push(format!(
            "[{constants}] {} states, {} mismatches, max deviation {:e}",
            r["report"]["states"], r["mismatches"], r["report"]["max_deviation"].as_f64().unwrap_or(f64::NAN)
        ));
    }
    verdict(8, "unbounded reachability in the box world", ok, &details.join("; "));
}

#[test]
fn criterion_09_infinite_domain() {
    let m = blocks();
    let f = parse_formula("P>=0.9 [X on(a,b)]").unwrap();
    let out = Checker::new(&m, CheckConfig { state_bound: Some(4), ..CheckConfig::default() }).check(&f).unwrap();
    let with_vars = out
        .sat
        .entries
        .iter()
        .filter(|e| matches!(&e.state, SatPattern::Pos(c) if !c.vars().is_empty()))
        .count();
    assert!(m.constants.is_none());

    let cli = relmc(&[
        "compare", "--model", &model_path("blocks.rmdp"), "--constants", "a,b,c,d,e,f", "--state-bound", "4",
        "--formula", "P>=0.9 [X on(a,b)]", "--output", "json",
    ]);
    let r = json(&cli);
    let clean = cli.status.code() == Some(0) && r["mismatches"] == 0;
    let deviation = r["report"]["max_deviation"].as_f64().unwrap_or(f64::INFINITY);
    verdict(
        9,
        "infinite-domain check at state bound 4",
        with_vars > 0 && clean && deviation < COMPARE_TOL,
        &format!(
            "{} sat entries, {with_vars} with variables; 6-constant oracle ({} states of at most 4 objects): {} mismatches, max deviation {deviation:e}",
            out.sat.len(),
            r["report"]["states"],
            r["mismatches"]
        ),
    );
}

#[test]
fn criterion_10_lifting_invariance() {
    let blocks = model_path("blocks.rmdp");
    let f = "P>=0.5 [F<=10 on(a,b)]";
    let unused: Vec<String> = (1..=20).map(|i| format!("u{i}")).collect();
    let with_unused = |n: usize| {
        let mut cs = vec!["a".to_string(), "b".to_string()];
        cs.extend(unused[..n].iter().cloned());
        cs.join(",")
    };
    let runs = [None, Some(with_unused(13)), Some(with_unused(20))];
    let mut counts = Vec::new();
    let mut ok = true;
    let start = Instant::now();
    for constants in &runs {
        let mut args = vec!["check", "--model", &blocks, "--formula", f, "--state-bound", "15", "--explosion-cap", "1", "--output", "json"];
        if let Some(cs) = constants {
            args.extend(["--constants", cs]);
        }
        let out = relmc(&args);
        let v = json(&out);
        ok &= out.status.code() == Some(0);
        let rules = v["nodes"][0]["value_function"].as_array().map_or(0, |a| a.len());
        counts.push(rules);
    }
    ok &= counts.iter().all(|&c| c > 0 && c == counts[0]);
    verdict(
        10,
        "lifted F<=10 at state bound 15",
        ok,
        &format!(
            "V-rule counts {counts:?} for 0, 15 and 22 declared constants (explosion cap 1, no ground enumeration), {:.1} s",
            start.elapsed().as_secs_f64()
        ),
    );
}
