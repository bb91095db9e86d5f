//! Lifted pCTL checking: computes the abstract states satisfying a formula
//! by evaluating its parse tree bottom-up.

use std::collections::{BTreeSet, HashMap};
use std::ops::ControlFlow;

use serde::Serialize;
use thiserror::Error;
use tracing::{debug, info};

use crate::engine::{distance, ser_display, Engine, Step, ValueFunction};
use crate::model::RmdpModel;
use crate::pctl::{parse_tree, Comparator, PathFormula, StateFormula};
use crate::term::{
    canonical_form, oi_subsumes, prune_subsumed, subsumes, Atom, Conjunction, Substitution,
    Sym, Term,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckError {
    #[error("negation cannot be combined or regressed: {0}")]
    UnsupportedNegation(String),
    #[error("{formula} did not converge after {iterations} iterations (last change {distance:e})")]
    NonConvergence { formula: String, iterations: usize, distance: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum SatPattern {
    Pos(Conjunction),
    /// Some grounding of the atom over the state's objects is absent.
    Neg(Atom),
}

impl std::fmt::Display for SatPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SatPattern::Pos(c) => write!(f, "{c}"),
            SatPattern::Neg(a) => write!(f, "~{a}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SatEntry {
    #[serde(serialize_with = "ser_display")]
    pub state: SatPattern,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    /// States matched by an earlier rule whose value fails the comparator.
    /// Only upper-bound comparators produce these.
    #[serde(skip_serializing_if = "Vec::is_empty", serialize_with = "ser_states")]
    pub unless: Vec<Conjunction>,
}

fn ser_states<S: serde::Serializer>(v: &[Conjunction], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|c| c.to_string()))
}

impl SatEntry {
    fn pos(state: Conjunction) -> SatEntry {
        SatEntry { state: SatPattern::Pos(state), value: None, unless: Vec::new() }
    }

    /// Whether this entry covers the ground state `s`; returns the witness.
    pub fn matches(&self, s: &Conjunction, domain: &[Sym]) -> Option<Substitution> {
        if self.unless.iter().any(|u| subsumes(u, s)) {
            return None;
        }
        match &self.state {
            SatPattern::Pos(c) => oi_subsumes(c, s),
            SatPattern::Neg(a) => negation_witness(a, s, domain),
        }
    }
}

/// Witness θ over the objects of `s` plus `domain` with aθ not in `s`.
pub fn negation_witness(a: &Atom, s: &Conjunction, domain: &[Sym]) -> Option<Substitution> {
    let mut pool: Vec<Sym> = s.constants().into_iter().chain(domain.iter().copied()).collect();
    pool.sort_by(|x, y| x.name().cmp(&y.name()));
    pool.dedup();
    let fixed: BTreeSet<Sym> = a
        .args
        .iter()
        .filter_map(|t| match t {
            Term::Const(c) => Some(*c),
            _ => None,
        })
        .collect();
    let mut vars: Vec<u32> = a
        .args
        .iter()
        .filter_map(|t| match t {
            Term::Var(v) => Some(*v),
            _ => None,
        })
        .collect();
    vars.sort_unstable();
    vars.dedup();
    let candidates: Vec<Sym> = pool.into_iter().filter(|c| !fixed.contains(c)).collect();
    let mut chosen: Vec<Sym> = Vec::new();
    fn go(
        a: &Atom,
        s: &Conjunction,
        vars: &[u32],
        cands: &[Sym],
        chosen: &mut Vec<Sym>,
    ) -> Option<Substitution> {
        if chosen.len() == vars.len() {
            let theta: Substitution = vars.iter().zip(chosen.iter()).map(|(&v, &c)| (v, Term::Const(c))).collect();
            return (!s.contains(&theta.atom(a))).then_some(theta);
        }
        for &c in cands {
            if chosen.contains(&c) {
                continue;
            }
            chosen.push(c);
            if let Some(t) = go(a, s, vars, cands, chosen) {
                return Some(t);
            }
            chosen.pop();
        }
        None
    }
    go(a, s, &vars, &candidates, &mut chosen)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
#[serde(transparent)]
pub struct SatSet {
    pub entries: Vec<SatEntry>,
}

impl SatSet {
    pub fn universal() -> SatSet {
        SatSet { entries: vec![SatEntry::pos(Conjunction::empty())] }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// First entry covering `s`, with its witness.
    pub fn find(&self, s: &Conjunction, domain: &[Sym]) -> Option<(&SatEntry, Substitution)> {
        self.entries.iter().find_map(|e| e.matches(s, domain).map(|w| (e, w)))
    }

    pub fn contains(&self, s: &Conjunction, domain: &[Sym]) -> bool {
        self.find(s, domain).is_some()
    }

    fn is_universal(&self) -> bool {
        self.entries.iter().any(|e| e.unless.is_empty() && e.state == SatPattern::Pos(Conjunction::empty()))
    }

    /// Positive abstract states, refusing negation.
    fn positive_states(&self, context: &str) -> Result<Vec<Conjunction>, CheckError> {
        self.entries
            .iter()
            .map(|e| match &e.state {
                SatPattern::Pos(c) if e.unless.is_empty() => Ok(c.clone()),
                _ => Err(CheckError::UnsupportedNegation(format!("{e} in {context}", e = e.state))),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CheckConfig {
    /// Overrides the model's state bound.
    pub state_bound: Option<usize>,
    pub epsilon: f64,
    pub max_iterations: usize,
    pub threshold_slack: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig { state_bound: None, epsilon: 1e-6, max_iterations: 1000, threshold_slack: 0.0 }
    }
}

/// Value iteration record for one probability operator.
#[derive(Debug, Clone, Serialize)]
pub struct NodeReport {
    /// Index of the node in the post-order plan.
    pub node: usize,
    pub formula: String,
    pub iterations: usize,
    pub converged: bool,
    pub value_function: ValueFunction,
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub sat: SatSet,
    /// Reports of all probability operators in plan order.
    pub nodes: Vec<NodeReport>,
}

impl CheckOutcome {
    pub fn iterations(&self) -> usize {
        self.nodes.iter().map(|n| n.iterations).sum()
    }

    pub fn converged(&self) -> bool {
        self.nodes.iter().all(|n| n.converged)
    }

    /// Value function of the root, when the root is a probability operator.
    pub fn root_values(&self, plan_len: usize) -> Option<&ValueFunction> {
        self.nodes.last().filter(|n| n.node + 1 == plan_len).map(|n| &n.value_function)
    }
}

pub struct Checker<'m> {
    engine: Engine<'m>,
    config: CheckConfig,
}

impl<'m> Checker<'m> {
    pub fn new(model: &'m RmdpModel, config: CheckConfig) -> Checker<'m> {
        Checker { engine: Engine::new(model, config.state_bound), config }
    }

    pub fn engine(&self) -> &Engine<'m> {
        &self.engine
    }

    pub fn check(&self, f: &StateFormula) -> Result<CheckOutcome, CheckError> {
        self.check_folded(f, &HashMap::new())
    }

    /// Checks `f`, taking the Sat sets of the plan nodes in `folded` as given
    /// instead of recomputing them.
    pub fn check_folded(&self, f: &StateFormula, folded: &HashMap<usize, SatSet>) -> Result<CheckOutcome, CheckError> {
        let plan = parse_tree(f);
        let mut sats: Vec<SatSet> = Vec::with_capacity(plan.len());
        let mut nodes = Vec::new();
        for (i, node) in plan.iter().enumerate() {
            if let Some(given) = folded.get(&i) {
                sats.push(given.clone());
                continue;
            }
            let kids: Vec<&SatSet> = node.children.iter().map(|&c| &sats[c]).collect();
            let sat = match node.formula {
                StateFormula::True => SatSet::universal(),
                StateFormula::False => SatSet::default(),
                StateFormula::Lit(a) => {
                    let c = Conjunction::new([a.clone()]);
                    if self.engine.admits(&c) {
                        SatSet { entries: vec![SatEntry::pos(c)] }
                    } else {
                        SatSet::default()
                    }
                }
                StateFormula::NegLit(a) => SatSet {
                    entries: vec![SatEntry { state: SatPattern::Neg(a.clone()), value: None, unless: Vec::new() }],
                },
                StateFormula::And(..) => self.and(kids[0], kids[1])?,
                StateFormula::Or(..) => {
                    let mut entries = kids[0].entries.clone();
                    entries.extend(kids[1].entries.iter().cloned());
                    SatSet { entries }
                }
                StateFormula::Prob { cmp, threshold, path } => {
                    let (sat, report) = self.prob(i, node.formula, *cmp, *threshold, path, &kids)?;
                    nodes.push(report);
                    sat
                }
            };
            debug!(node = i, entries = sat.len(), "evaluated {}", node.formula);
            sats.push(sat);
        }
        Ok(CheckOutcome { sat: sats.pop().unwrap_or_default(), nodes })
    }

    fn and(&self, a: &SatSet, b: &SatSet) -> Result<SatSet, CheckError> {
        if a.is_universal() {
            return Ok(b.clone());
        }
        if b.is_universal() {
            return Ok(a.clone());
        }
        let left = a.positive_states("conjunction")?;
        let right = b.positive_states("conjunction")?;
        let mut out = Vec::new();
        for x in &left {
            for y in &right {
                out.extend(self.engine.mgs(x, y));
            }
        }
        Ok(SatSet { entries: prune_subsumed(out).into_iter().map(SatEntry::pos).collect() })
    }

    fn prob(
        &self,
        index: usize,
        formula: &StateFormula,
        cmp: Comparator,
        threshold: f64,
        path: &PathFormula,
        kids: &[&SatSet],
    ) -> Result<(SatSet, NodeReport), CheckError> {
        let text = formula.to_string();
        let (vf, iterations, converged) = match path {
            PathFormula::Next(_) => {
                let goal = kids[0].positive_states("next operand")?;
                let (v1, stats) = self.engine.one_iteration(&ValueFunction::goal(&goal), &Step::Next);
                debug!(?stats, "next step");
                (v1, 1, true)
            }
            PathFormula::Until { bound, .. } => {
                let constraint = if kids[0].is_universal() {
                    None
                } else {
                    Some(kids[0].positive_states("until constraint")?)
                };
                let goal = kids[1].positive_states("until goal")?;
                self.until(&text, constraint.as_deref(), &goal, *bound)?
            }
        };
        info!(formula = %text, iterations, rules = vf.len(), "value iteration done");
        let mut entries = Vec::new();
        let mut blockers: Vec<Conjunction> = Vec::new();
        for r in vf.rules() {
            if cmp.holds(r.value, threshold, self.config.threshold_slack) {
                entries.push(SatEntry {
                    state: SatPattern::Pos(r.state.clone()),
                    value: Some(r.value),
                    unless: Vec::new(),
                });
            } else if cmp.is_upper() {
                blockers.push(r.state.clone());
            }
        }
        // Rules are sorted by value, so under an upper bound every failing
        // rule precedes every passing one.
        if cmp.is_upper() {
            for e in &mut entries {
                e.unless = blockers.clone();
            }
        }
        let report = NodeReport { node: index, formula: text, iterations, converged, value_function: vf };
        Ok((SatSet { entries }, report))
    }

    fn until(
        &self,
        text: &str,
        constraint: Option<&[Conjunction]>,
        goal: &[Conjunction],
        bound: Option<u32>,
    ) -> Result<(ValueFunction, usize, bool), CheckError> {
        let step = Step::Until { constraint, goal };
        let mut vf = ValueFunction::goal(goal);
        let mut t = 0usize;
        loop {
            if bound.is_some_and(|k| t >= k as usize) {
                return Ok((vf, t, true));
            }
            let (next, stats) = self.engine.one_iteration(&vf, &step);
            t += 1;
            let d = distance(&vf, &next);
            debug!(iteration = t, distance = d, rules = next.len(), ?stats, "until step");
            vf = next;
            match bound {
                // A fixpoint cannot move again, so the remaining steps are skipped.
                Some(_) if d == 0.0 => return Ok((vf, t, true)),
                Some(_) => {}
                None if d < self.config.epsilon => return Ok((vf, t, true)),
                None if t >= self.config.max_iterations => {
                    return Err(CheckError::NonConvergence { formula: text.to_string(), iterations: t, distance: d })
                }
                None => {}
            }
        }
    }
}

/// Result of testing a ground state against a formula.
#[derive(Debug, Clone, PartialEq)]
pub struct Satisfaction {
    pub holds: bool,
    /// Binding of the formula's free variables under which the formula holds.
    pub witness: Option<Substitution>,
}

fn free_vars(f: &StateFormula, out: &mut BTreeSet<u32>) {
    match f {
        StateFormula::Lit(a) | StateFormula::NegLit(a) => out.extend(a.args.iter().filter_map(|t| match t {
            Term::Var(v) => Some(*v),
            _ => None,
        })),
        _ => {
            for c in f.children() {
                free_vars(c, out);
            }
        }
    }
}

fn instantiate(f: &StateFormula, theta: &Substitution) -> StateFormula {
    let path = |p: &PathFormula| match p {
        PathFormula::Next(x) => PathFormula::Next(instantiate(x, theta)),
        PathFormula::Until { left, right, bound } => PathFormula::Until {
            left: instantiate(left, theta),
            right: instantiate(right, theta),
            bound: *bound,
        },
    };
    match f {
        StateFormula::True => StateFormula::True,
        StateFormula::False => StateFormula::False,
        StateFormula::Lit(a) => StateFormula::Lit(theta.atom(a)),
        StateFormula::NegLit(a) => StateFormula::NegLit(theta.atom(a)),
        StateFormula::And(l, r) => StateFormula::And(Box::new(instantiate(l, theta)), Box::new(instantiate(r, theta))),
        StateFormula::Or(l, r) => StateFormula::Or(Box::new(instantiate(l, theta)), Box::new(instantiate(r, theta))),
        StateFormula::Prob { cmp, threshold, path: p } => {
            StateFormula::Prob { cmp: *cmp, threshold: *threshold, path: Box::new(path(p)) }
        }
    }
}

/// Tests a ground state against `f` and searches a binding of the free
/// variables that witnesses it.
pub fn satisfies(
    model: &RmdpModel,
    s: &Conjunction,
    f: &StateFormula,
    config: CheckConfig,
) -> Result<Satisfaction, CheckError> {
    let checker = Checker::new(model, config);
    let domain = model.constants.clone().unwrap_or_default();
    let holds = checker.check(f)?.sat.contains(s, &domain);
    if !holds {
        return Ok(Satisfaction { holds, witness: None });
    }
    let mut vars = BTreeSet::new();
    free_vars(f, &mut vars);
    let vars: Vec<u32> = vars.into_iter().collect();
    if vars.is_empty() {
        return Ok(Satisfaction { holds, witness: Some(Substitution::new()) });
    }
    let mut pool: Vec<Sym> = s.constants().into_iter().chain(domain.iter().copied()).collect();
    pool.sort_by(|x, y| x.name().cmp(&y.name()));
    pool.dedup();
    let mut witness = None;
    let mut chosen = Vec::new();
    let _ = search_bindings(&vars, &pool, &mut chosen, &mut |theta| {
        if satisfies_with(&checker, s, f, theta, &domain).unwrap_or(false) {
            witness = Some(theta.clone());
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    });
    Ok(Satisfaction { holds, witness })
}

/// Whether `s` satisfies `f` with its free variables bound by `theta`.
pub fn satisfies_with(
    checker: &Checker,
    s: &Conjunction,
    f: &StateFormula,
    theta: &Substitution,
    domain: &[Sym],
) -> Result<bool, CheckError> {
    let ground = instantiate(f, theta);
    Ok(checker.check(&ground)?.sat.contains(s, domain))
}

fn search_bindings(
    vars: &[u32],
    pool: &[Sym],
    chosen: &mut Vec<Sym>,
    f: &mut dyn FnMut(&Substitution) -> ControlFlow<()>,
) -> ControlFlow<()> {
    if chosen.len() == vars.len() {
        let theta: Substitution = vars.iter().zip(chosen.iter()).map(|(&v, &c)| (v, Term::Const(c))).collect();
        return f(&theta);
    }
    for &c in pool {
        if chosen.contains(&c) {
            continue;
        }
        chosen.push(c);
        let flow = search_bindings(vars, pool, chosen, f);
        chosen.pop();
        flow?;
    }
    ControlFlow::Continue(())
}

/// Canonical listing of the positive entries of a Sat set, used to compare
/// results independent of rule order and variable names.
pub fn canonical_entries(sat: &SatSet) -> BTreeSet<(String, Option<u64>)> {
    sat.entries
        .iter()
        .map(|e| {
            let state = match &e.state {
                SatPattern::Pos(c) => canonical_form(c).to_string(),
                SatPattern::Neg(a) => format!("~{a}"),
            };
            (state, e.value.map(f64::to_bits))
        })
        .collect()
}
