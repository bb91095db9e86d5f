//! Explicit-state reference semantics: grounds a model over a finite set of
//! objects and runs textbook value iteration on the resulting MDP.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::Serialize;
use thiserror::Error;
use tracing::{debug, warn};

use crate::checker::CheckOutcome;
use crate::engine::ValueFunction;
use crate::model::{ModelError, RmdpModel, SeedSpec};
use crate::pctl::{parse_tree, PathFormula, StateFormula};
use crate::term::{Atom, Conjunction, Sym, Term};

pub const DEFAULT_EXPLOSION_CAP: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("ground state space exceeds the cap of {cap} states")]
    ExplosionGuard { cap: usize },
    #[error("inconsistent path: {0}")]
    InconsistentPath(String),
    #[error("illegal seed state {0}")]
    IllegalSeed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Choice {
    pub action: Atom,
    /// Successor indices with probabilities. Sums to 1 unless successors
    /// outside the state bound were dropped.
    pub outcomes: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Default)]
pub struct GroundMdp {
    pub states: Vec<Conjunction>,
    pub choices: Vec<Vec<Choice>>,
    /// Objects the ground model ranges over.
    pub constants: Vec<Sym>,
    index: HashMap<Conjunction, usize>,
}

impl GroundMdp {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn index_of(&self, s: &Conjunction) -> Option<usize> {
        self.index.get(s).copied()
    }

    pub fn transition_count(&self) -> usize {
        self.choices.iter().map(|c| c.iter().map(|ch| ch.outcomes.len()).sum::<usize>()).sum()
    }

    pub fn actions_of(&self, s: usize) -> impl Iterator<Item = &Atom> {
        self.choices[s].iter().map(|c| &c.action)
    }

    /// Distribution of taking `action` in state `s`.
    pub fn transition(&self, s: usize, action: &Atom) -> Option<&[(usize, f64)]> {
        self.choices[s].iter().find(|c| &c.action == action).map(|c| c.outcomes.as_slice())
    }

    /// States with their values, sorted by state text.
    pub fn to_csv(&self, values: &[f64]) -> String {
        let mut rows: Vec<(String, f64)> = self.states.iter().map(|s| s.to_string()).zip(values.iter().copied()).collect();
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        let mut out = String::from("state,value\n");
        for (s, v) in rows {
            out.push_str(&format!("\"{s}\",{v}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EnumerateOptions {
    /// Keep only states over at most this many objects. Transitions into
    /// larger states are dropped.
    pub state_bound: Option<usize>,
    pub cap: usize,
}

impl Default for EnumerateOptions {
    fn default() -> Self {
        EnumerateOptions { state_bound: None, cap: DEFAULT_EXPLOSION_CAP }
    }
}

fn object_count(s: &Conjunction) -> usize {
    s.constants().len()
}

/// Closes `seeds` under all ground actions.
pub fn enumerate(
    model: &RmdpModel,
    constants: &[Sym],
    seeds: &[Conjunction],
    opts: EnumerateOptions,
) -> Result<GroundMdp, OracleError> {
    let mut mdp = GroundMdp { constants: sorted(constants), ..GroundMdp::default() };
    let mut queue = VecDeque::new();
    let mut seeds: Vec<Conjunction> = seeds.to_vec();
    seeds.sort();
    seeds.dedup();
    for s in seeds {
        if !model.is_legal(&s) {
            return Err(OracleError::IllegalSeed(s.to_string()));
        }
        if opts.state_bound.is_some_and(|b| object_count(&s) > b) {
            continue;
        }
        intern(&mut mdp, s, &mut queue, opts.cap)?;
    }
    let mut dropped = 0usize;
    while let Some(i) = queue.pop_front() {
        let s = mdp.states[i].clone();
        let mut choices: Vec<Choice> = Vec::new();
        for inst in model.ground_instances(&s)? {
            let mut outcomes = Vec::new();
            for (next, p) in model.successors(&s, &inst) {
                if !model.is_legal(&next) || opts.state_bound.is_some_and(|b| object_count(&next) > b) {
                    dropped += 1;
                    continue;
                }
                let j = intern(&mut mdp, next, &mut queue, opts.cap)?;
                outcomes.push((j, p));
            }
            match choices.iter_mut().find(|c| c.action == inst.action) {
                Some(c) if c.outcomes == outcomes => {}
                Some(_) => warn!(action = %inst.action, "action grounds to distinct distributions; keeping the first"),
                None => choices.push(Choice { action: inst.action, outcomes }),
            }
        }
        choices.sort_by(|a, b| a.action.cmp(&b.action));
        mdp.choices[i] = choices;
    }
    if dropped > 0 {
        debug!(dropped, "successors outside the bound or illegal were dropped");
    }
    Ok(mdp)
}

fn intern(
    mdp: &mut GroundMdp,
    s: Conjunction,
    queue: &mut VecDeque<usize>,
    cap: usize,
) -> Result<usize, OracleError> {
    if let Some(&i) = mdp.index.get(&s) {
        return Ok(i);
    }
    if mdp.states.len() >= cap {
        return Err(OracleError::ExplosionGuard { cap });
    }
    let i = mdp.states.len();
    mdp.index.insert(s.clone(), i);
    mdp.states.push(s);
    mdp.choices.push(Vec::new());
    queue.push_back(i);
    Ok(i)
}

fn sorted(constants: &[Sym]) -> Vec<Sym> {
    let mut c = constants.to_vec();
    c.sort_by(|a, b| a.name().cmp(&b.name()));
    c.dedup();
    c
}

/// Seed states according to the model's seed declaration.
pub fn default_seeds(
    model: &RmdpModel,
    constants: &[Sym],
    opts: EnumerateOptions,
) -> Result<Vec<Conjunction>, OracleError> {
    let pool = sorted(constants);
    let seeds = match &model.seeds {
        SeedSpec::Towers { on, clear } => {
            let mut out = Vec::new();
            match opts.state_bound {
                Some(b) if b < pool.len() => {
                    for size in 1..=b {
                        for subset in subsets(&pool, size) {
                            towers(&subset, *on, *clear, &mut out, opts.cap)?;
                        }
                    }
                }
                _ => towers(&pool, *on, *clear, &mut out, opts.cap)?,
            }
            out
        }
        SeedSpec::Templates(ts) => {
            let mut out = Vec::new();
            for t in ts {
                ground_template(t, &pool, &mut out, opts.cap)?;
            }
            out.retain(|s| model.is_legal(s) && opts.state_bound.is_none_or(|b| object_count(s) <= b));
            out
        }
        SeedSpec::Legal => legal_states(model, &pool, opts)?,
    };
    Ok(seeds)
}

fn subsets(pool: &[Sym], size: usize) -> Vec<Vec<Sym>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn go(pool: &[Sym], size: usize, start: usize, cur: &mut Vec<Sym>, out: &mut Vec<Vec<Sym>>) {
        if cur.len() == size {
            out.push(cur.clone());
            return;
        }
        for i in start..pool.len() {
            cur.push(pool[i]);
            go(pool, size, i + 1, cur, out);
            cur.pop();
        }
    }
    go(pool, size, 0, &mut cur, &mut out);
    out
}

/// Every arrangement of `blocks` into towers.
fn towers(blocks: &[Sym], on: Sym, clear: Sym, out: &mut Vec<Conjunction>, cap: usize) -> Result<(), OracleError> {
    // Each block either starts a new tower or sits on a block that is still clear.
    fn go(
        rest: &[Sym],
        stacks: &mut Vec<Vec<Sym>>,
        on: Sym,
        clear: Sym,
        out: &mut Vec<Conjunction>,
        cap: usize,
    ) -> Result<(), OracleError> {
        let Some((&b, rest)) = rest.split_first() else {
            let mut atoms = Vec::new();
            for st in stacks.iter() {
                for w in st.windows(2) {
                    atoms.push(Atom::new(on, [Term::Const(w[1]), Term::Const(w[0])]));
                }
                atoms.push(Atom::new(clear, [Term::Const(*st.last().expect("non-empty tower"))]));
            }
            if out.len() >= cap {
                return Err(OracleError::ExplosionGuard { cap });
            }
            out.push(Conjunction::new(atoms));
            return Ok(());
        };
        for i in 0..stacks.len() {
            // Insert b anywhere within tower i.
            for pos in 0..=stacks[i].len() {
                stacks[i].insert(pos, b);
                go(rest, stacks, on, clear, out, cap)?;
                stacks[i].remove(pos);
            }
        }
        // Order towers by their first inserted block so each state appears once.
        stacks.push(vec![b]);
        go(rest, stacks, on, clear, out, cap)?;
        stacks.pop();
        Ok(())
    }
    go(blocks, &mut Vec::new(), on, clear, out, cap)
}

fn ground_template(t: &Conjunction, pool: &[Sym], out: &mut Vec<Conjunction>, cap: usize) -> Result<(), OracleError> {
    let vars: Vec<u32> = t.vars().into_iter().collect();
    let fixed = t.constants();
    let cands: Vec<Sym> = pool.iter().copied().filter(|c| !fixed.contains(c)).collect();
    let mut chosen: Vec<Sym> = Vec::new();
    fn go(
        t: &Conjunction,
        vars: &[u32],
        cands: &[Sym],
        chosen: &mut Vec<Sym>,
        out: &mut Vec<Conjunction>,
        cap: usize,
    ) -> Result<(), OracleError> {
        if chosen.len() == vars.len() {
            let map: BTreeMap<u32, Sym> = vars.iter().copied().zip(chosen.iter().copied()).collect();
            let g = t.map_terms(|x| match x {
                Term::Var(v) => Term::Const(map[&v]),
                c => c,
            });
            if let Some(g) = g {
                if out.len() >= cap {
                    return Err(OracleError::ExplosionGuard { cap });
                }
                out.push(g);
            }
            return Ok(());
        }
        for &c in cands {
            if !chosen.contains(&c) {
                chosen.push(c);
                go(t, vars, cands, chosen, out, cap)?;
                chosen.pop();
            }
        }
        Ok(())
    }
    go(t, &vars, &cands, &mut chosen, out, cap)
}

/// All legal subsets of the Herbrand base over `pool`.
fn legal_states(model: &RmdpModel, pool: &[Sym], opts: EnumerateOptions) -> Result<Vec<Conjunction>, OracleError> {
    let mut base = Vec::new();
    for &(p, arity) in &model.relations {
        let mut args = Vec::new();
        fn tuples(p: Sym, arity: usize, pool: &[Sym], args: &mut Vec<Term>, base: &mut Vec<Atom>) {
            if args.len() == arity {
                base.push(Atom::new(p, args.iter().copied()));
                return;
            }
            for &c in pool {
                args.push(Term::Const(c));
                tuples(p, arity, pool, args, base);
                args.pop();
            }
        }
        tuples(p, arity, pool, &mut args, &mut base);
    }
    let mut out = Vec::new();
    let mut cur: Vec<Atom> = Vec::new();
    fn go(
        model: &RmdpModel,
        base: &[Atom],
        i: usize,
        cur: &mut Vec<Atom>,
        out: &mut Vec<Conjunction>,
        opts: EnumerateOptions,
    ) -> Result<(), OracleError> {
        if i == base.len() {
            if out.len() >= opts.cap {
                return Err(OracleError::ExplosionGuard { cap: opts.cap });
            }
            out.push(Conjunction::new(cur.iter().cloned()));
            return Ok(());
        }
        go(model, base, i + 1, cur, out, opts)?;
        cur.push(base[i].clone());
        let c = Conjunction::new(cur.iter().cloned());
        // Constraints are patterns, so an illegal set stays illegal when grown.
        if model.is_legal(&c) && opts.state_bound.is_none_or(|b| object_count(&c) <= b) {
            go(model, base, i + 1, cur, out, opts)?;
        }
        cur.pop();
        Ok(())
    }
    go(model, &base, 0, &mut cur, &mut out, opts)?;
    Ok(out)
}

/// Grounds the model over `constants` from its default seeds.
pub fn ground_model(model: &RmdpModel, constants: &[Sym], opts: EnumerateOptions) -> Result<GroundMdp, OracleError> {
    let seeds = default_seeds(model, constants, opts)?;
    enumerate(model, constants, &seeds, opts)
}

/// A finite path: states interleaved with the actions taken between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub states: Vec<Conjunction>,
    pub actions: Vec<Atom>,
}

/// Probability of a finite path under a stationary deterministic policy.
pub fn path_probability(
    mdp: &GroundMdp,
    policy: &dyn Fn(&Conjunction) -> Option<Atom>,
    path: &Path,
) -> Result<f64, OracleError> {
    if path.states.is_empty() || path.actions.len() + 1 != path.states.len() {
        return Err(OracleError::InconsistentPath(format!(
            "{} states and {} actions",
            path.states.len(),
            path.actions.len()
        )));
    }
    let mut p = 1.0;
    for (i, a) in path.actions.iter().enumerate() {
        let (from, to) = (&path.states[i], &path.states[i + 1]);
        if policy(from).as_ref() != Some(a) {
            return Err(OracleError::InconsistentPath(format!("policy does not pick {a} in {from}")));
        }
        let si = mdp.index_of(from).ok_or_else(|| OracleError::InconsistentPath(format!("unknown state {from}")))?;
        let ti = mdp.index_of(to).ok_or_else(|| OracleError::InconsistentPath(format!("unknown state {to}")))?;
        let dist = mdp
            .transition(si, a)
            .ok_or_else(|| OracleError::InconsistentPath(format!("{a} is not applicable in {from}")))?;
        let step: f64 = dist.iter().filter(|(j, _)| *j == ti).map(|(_, q)| q).sum();
        if step <= 0.0 {
            return Err(OracleError::InconsistentPath(format!("{to} is unreachable from {from} via {a}")));
        }
        p *= step;
    }
    Ok(p)
}

#[derive(Debug, Clone, Copy)]
pub struct ExplicitOptions {
    pub epsilon: f64,
    pub max_iterations: usize,
    pub threshold_slack: f64,
}

impl Default for ExplicitOptions {
    fn default() -> Self {
        ExplicitOptions { epsilon: 1e-6, max_iterations: 1000, threshold_slack: 0.0 }
    }
}

/// Per-node result of the explicit check, indexed like the parse-tree plan.
#[derive(Debug, Clone)]
pub struct NodeResult {
    pub sat: Vec<bool>,
    /// Max probabilities, for probability operators.
    pub values: Option<Vec<f64>>,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct ExplicitResult {
    pub nodes: Vec<NodeResult>,
}

impl ExplicitResult {
    pub fn root(&self) -> &NodeResult {
        self.nodes.last().expect("plan has a root")
    }
}

/// Whether some injective binding of the literal's variables to objects
/// not already named in it yields an atom of `s`.
fn literal_holds(l: &Atom, s: &Conjunction) -> bool {
    let named: BTreeSet<Sym> = l
        .args
        .iter()
        .filter_map(|t| match t {
            Term::Const(c) => Some(*c),
            _ => None,
        })
        .collect();
    s.atoms().iter().any(|g| {
        if g.pred != l.pred || g.arity() != l.arity() {
            return false;
        }
        let mut bind: BTreeMap<u32, Sym> = BTreeMap::new();
        l.args.iter().zip(g.args.iter()).all(|(t, gt)| {
            let Term::Const(gc) = *gt else { return false };
            match *t {
                Term::Const(c) => c == gc,
                Term::Var(v) => match bind.get(&v) {
                    Some(&b) => b == gc,
                    None => {
                        if named.contains(&gc) || bind.values().any(|&b| b == gc) {
                            return false;
                        }
                        bind.insert(v, gc);
                        true
                    }
                },
            }
        })
    })
}

/// Whether some injective binding over the state's objects plus `domain`
/// yields an atom missing from `s`.
fn negated_literal_holds(l: &Atom, s: &Conjunction, domain: &[Sym]) -> bool {
    let mut pool: BTreeSet<Sym> = s.constants();
    pool.extend(domain.iter().copied());
    let named: BTreeSet<Sym> = l
        .args
        .iter()
        .filter_map(|t| match t {
            Term::Const(c) => Some(*c),
            _ => None,
        })
        .collect();
    let vars: BTreeSet<u32> = l
        .args
        .iter()
        .filter_map(|t| match t {
            Term::Var(v) => Some(*v),
            _ => None,
        })
        .collect();
    let vars: Vec<u32> = vars.into_iter().collect();
    let cands: Vec<Sym> = pool.into_iter().filter(|c| !named.contains(c)).collect();
    fn go(l: &Atom, s: &Conjunction, vars: &[u32], cands: &[Sym], bind: &mut Vec<Sym>) -> bool {
        if bind.len() == vars.len() {
            let g = l.map(|t| match t {
                Term::Var(v) => Term::Const(bind[vars.iter().position(|&x| x == v).expect("bound var")]),
                c => c,
            });
            return !s.contains(&g);
        }
        for &c in cands {
            if !bind.contains(&c) {
                bind.push(c);
                if go(l, s, vars, cands, bind) {
                    return true;
                }
                bind.pop();
            }
        }
        false
    }
    go(l, s, &vars, &cands, &mut Vec::new())
}

fn backup(mdp: &GroundMdp, x: &[f64], s: usize) -> f64 {
    mdp.choices[s]
        .iter()
        .map(|c| c.outcomes.iter().map(|&(j, p)| p * x[j]).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Explicit check of every plan node. `iterations` fixes the number of
/// backups of unbounded operators by plan index; the others iterate to
/// `epsilon`.
pub fn explicit_check(
    mdp: &GroundMdp,
    f: &StateFormula,
    opts: ExplicitOptions,
    iterations: &HashMap<usize, usize>,
) -> ExplicitResult {
    let plan = parse_tree(f);
    let n = mdp.len();
    let mut nodes: Vec<NodeResult> = Vec::with_capacity(plan.len());
    for (i, node) in plan.iter().enumerate() {
        let kid = |k: usize| &nodes[node.children[k]].sat;
        let result = match node.formula {
            StateFormula::True => plain(vec![true; n]),
            StateFormula::False => plain(vec![false; n]),
            StateFormula::Lit(l) => plain(mdp.states.iter().map(|s| literal_holds(l, s)).collect()),
            StateFormula::NegLit(l) => {
                plain(mdp.states.iter().map(|s| negated_literal_holds(l, s, &mdp.constants)).collect())
            }
            StateFormula::And(..) => plain((0..n).map(|s| kid(0)[s] && kid(1)[s]).collect()),
            StateFormula::Or(..) => plain((0..n).map(|s| kid(0)[s] || kid(1)[s]).collect()),
            StateFormula::Prob { cmp, threshold, path } => {
                let (values, its) = match path.as_ref() {
                    PathFormula::Next(_) => {
                        let goal: Vec<f64> = kid(0).iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                        ((0..n).map(|s| backup(mdp, &goal, s)).collect(), 1)
                    }
                    PathFormula::Until { bound, .. } => {
                        let (left, right) = (kid(0), kid(1));
                        let mut x: Vec<f64> = right.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                        let mut t = 0;
                        loop {
                            let limit = bound.map(|k| k as usize).or_else(|| iterations.get(&i).copied());
                            if limit.is_some_and(|k| t >= k) || (limit.is_none() && t >= opts.max_iterations) {
                                break;
                            }
                            let next: Vec<f64> = (0..n)
                                .map(|s| {
                                    if right[s] {
                                        1.0
                                    } else if !left[s] {
                                        0.0
                                    } else {
                                        backup(mdp, &x, s)
                                    }
                                })
                                .collect();
                            t += 1;
                            let d = x.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                            x = next;
                            if limit.is_none() && d < opts.epsilon {
                                break;
                            }
                        }
                        (x, t)
                    }
                };
                let sat = values.iter().map(|&v| cmp.holds(v, *threshold, opts.threshold_slack)).collect();
                NodeResult { sat, values: Some(values), iterations: its }
            }
        };
        nodes.push(result);
    }
    ExplicitResult { nodes }
}

fn plain(sat: Vec<bool>) -> NodeResult {
    NodeResult { sat, values: None, iterations: 0 }
}

#[derive(Debug, Clone, Serialize)]
pub struct BooleanMismatch {
    pub state: String,
    pub lifted: bool,
    pub explicit: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValueMismatch {
    pub node: usize,
    pub formula: String,
    pub state: String,
    pub lifted: f64,
    pub explicit: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub states: usize,
    pub boolean_mismatches: Vec<BooleanMismatch>,
    pub value_mismatches: Vec<ValueMismatch>,
    pub max_deviation: f64,
    pub tolerance: f64,
}

impl CompareReport {
    pub fn mismatch_count(&self) -> usize {
        self.boolean_mismatches.len() + self.value_mismatches.len()
    }

    pub fn is_clean(&self) -> bool {
        self.mismatch_count() == 0
    }
}

/// Compares a lifted outcome against the explicit check on `mdp`, state by
/// state. Unbounded operators are replayed with the lifted iteration counts.
pub fn compare(
    mdp: &GroundMdp,
    f: &StateFormula,
    lifted: &CheckOutcome,
    opts: ExplicitOptions,
    tolerance: f64,
) -> CompareReport {
    let values: Vec<(usize, String, &ValueFunction)> =
        lifted.nodes.iter().map(|n| (n.node, n.formula.clone(), &n.value_function)).collect();
    compare_values(mdp, f, lifted, &values, opts, tolerance)
}

/// As [`compare`], with the value functions given explicitly per plan node.
pub fn compare_values(
    mdp: &GroundMdp,
    f: &StateFormula,
    lifted: &CheckOutcome,
    values: &[(usize, String, &ValueFunction)],
    opts: ExplicitOptions,
    tolerance: f64,
) -> CompareReport {
    let iterations: HashMap<usize, usize> = lifted.nodes.iter().map(|n| (n.node, n.iterations)).collect();
    let explicit = explicit_check(mdp, f, opts, &iterations);
    let mut report = CompareReport {
        states: mdp.len(),
        boolean_mismatches: Vec::new(),
        value_mismatches: Vec::new(),
        max_deviation: 0.0,
        tolerance,
    };
    let root = explicit.root();
    for (i, s) in mdp.states.iter().enumerate() {
        let l = lifted.sat.contains(s, &mdp.constants);
        if l != root.sat[i] {
            report.boolean_mismatches.push(BooleanMismatch { state: s.to_string(), lifted: l, explicit: root.sat[i] });
        }
    }
    for (node, formula, vf) in values {
        let Some(ev) = explicit.nodes.get(*node).and_then(|n| n.values.as_ref()) else { continue };
        for (i, s) in mdp.states.iter().enumerate() {
            let lv = vf.evaluate(s);
            let d = (lv - ev[i]).abs();
            report.max_deviation = report.max_deviation.max(d);
            if d > tolerance {
                report.value_mismatches.push(ValueMismatch {
                    node: *node,
                    formula: formula.clone(),
                    state: s.to_string(),
                    lifted: lv,
                    explicit: ev[i],
                });
            }
        }
    }
    report.boolean_mismatches.sort_by(|a, b| a.state.cmp(&b.state));
    report.value_mismatches.sort_by(|a, b| (a.node, &a.state).cmp(&(b.node, &b.state)));
    report
}
