//! The relational Bellman operator: regression of value rules through
//! action rules, Q-rule construction, V-rule selection and evaluation.

use std::collections::{HashMap, HashSet};
use std::fmt;

use rayon::prelude::*;
use serde::Serialize;

use crate::model::{AbstractTransition, ActionRule, RmdpModel};
use crate::term::{
    canonical_form, merges_limited, prune_subsumed, shift_vars, MergeLimits, standardize_apart, subsumes, term_count, Atom, Conjunction, Sym, Term,
};

/// Values closer than this are treated as equal when pruning rules.
pub const VALUE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VRule {
    pub value: f64,
    #[serde(serialize_with = "crate::engine::ser_display")]
    pub state: Conjunction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QRule {
    pub value: f64,
    pub action: Option<Atom>,
    pub state: Conjunction,
}

impl fmt::Display for QRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.action {
            Some(a) => write!(f, "{}: {} <- {}", self.value, a, self.state),
            None => write!(f, "{}: <- {}", self.value, self.state),
        }
    }
}

pub fn ser_display<T: fmt::Display, S: serde::Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

/// Ordered V-rules with first-match semantics; the last rule is `0 <- true`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ValueFunction {
    rules: Vec<VRule>,
}

impl ValueFunction {
    /// Sorts by non-increasing value and appends the default rule.
    pub fn new(mut rules: Vec<VRule>) -> ValueFunction {
        rules.retain(|r| !(r.state.is_empty() && r.value <= 0.0));
        rules.sort_by(|a, b| b.value.total_cmp(&a.value).then_with(|| a.state.cmp(&b.state)));
        rules.push(VRule { value: 0.0, state: Conjunction::empty() });
        ValueFunction { rules }
    }

    /// Initial function for reaching one of `goals`: 1 on the goals, 0 elsewhere.
    pub fn goal(goals: &[Conjunction]) -> ValueFunction {
        ValueFunction::new(goals.iter().map(|g| VRule { value: 1.0, state: g.clone() }).collect())
    }

    pub fn rules(&self) -> &[VRule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Value of the first rule whose state subsumes `s`.
    pub fn evaluate(&self, s: &Conjunction) -> f64 {
        self.matching_rule(s).map_or(0.0, |r| r.value)
    }

    pub fn matching_rule(&self, s: &Conjunction) -> Option<&VRule> {
        self.rules.iter().find(|r| subsumes(&r.state, s))
    }

    /// Replaces a rule value; used to build deliberately corrupted functions.
    pub fn with_value(&self, index: usize, value: f64) -> ValueFunction {
        let mut out = self.clone();
        out.rules[index].value = value;
        out
    }
}

impl fmt::Display for ValueFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rules {
            writeln!(f, "{} <- {}", r.value, r.state)?;
        }
        Ok(())
    }
}

/// Largest value difference between two functions over the same abstract
/// states, or infinity when the state sets differ.
pub fn distance(v1: &ValueFunction, v2: &ValueFunction) -> f64 {
    if v1.len() != v2.len() {
        return f64::INFINITY;
    }
    let index: HashMap<Conjunction, f64> =
        v1.rules.iter().map(|r| (canonical_form(&r.state), r.value)).collect();
    let mut worst: f64 = 0.0;
    for r in &v2.rules {
        match index.get(&canonical_form(&r.state)) {
            Some(v) => worst = worst.max((v - r.value).abs()),
            None => return f64::INFINITY,
        }
    }
    worst
}

/// Path operator handled by one Bellman step.
#[derive(Debug, Clone)]
pub enum Step<'a> {
    /// Until: pre-states must satisfy one of `constraint` (all states when
    /// `None`); goal states are absorbing with value 1.
    Until { constraint: Option<&'a [Conjunction]>, goal: &'a [Conjunction] },
    Next,
}

#[derive(Debug, Clone, Default)]
pub struct IterationStats {
    pub regressions: usize,
    pub partials: usize,
    pub qrules: usize,
}

pub struct Engine<'m> {
    model: &'m RmdpModel,
    bound: Option<usize>,
    domain: Option<HashSet<Sym>>,
    act: Sym,
}

impl<'m> Engine<'m> {
    /// `bound` overrides the model's state bound. A declared constant set
    /// also caps the number of objects per state.
    pub fn new(model: &'m RmdpModel, bound: Option<usize>) -> Engine<'m> {
        let mut bound = bound.or(model.state_bound);
        if let Some(cs) = &model.constants {
            bound = Some(bound.map_or(cs.len(), |b| b.min(cs.len())));
        }
        Engine {
            model,
            bound,
            domain: model.constants.as_ref().map(|c| c.iter().copied().collect()),
            act: Sym::intern("$act"),
        }
    }

    pub fn model(&self) -> &RmdpModel {
        self.model
    }

    pub fn bound(&self) -> Option<usize> {
        self.bound
    }

    /// Whether an abstract state can describe a legal state of the model.
    pub fn admits(&self, s: &Conjunction) -> bool {
        if self.bound.is_some_and(|b| term_count(s) > b) {
            return false;
        }
        if let Some(d) = &self.domain {
            if s.constants().iter().any(|c| !d.contains(c)) {
                return false;
            }
        }
        self.model.is_legal(s)
    }

    fn violates(&self, s: &Conjunction) -> bool {
        if let Some(d) = &self.domain {
            if s.constants().iter().any(|c| !d.contains(c)) {
                return true;
            }
        }
        !self.model.is_legal(s)
    }

    /// Admissible merges of two standardized-apart states.
    fn merge(&self, a: &Conjunction, b: &Conjunction) -> Vec<Conjunction> {
        let reject = |c: &Conjunction| self.violates(c);
        merges_limited(a, b, MergeLimits { max_terms: self.bound, reject: Some(&reject) })
    }

    /// Maximally general specialisations restricted to admissible states.
    pub fn mgs(&self, a: &Conjunction, b: &Conjunction) -> Vec<Conjunction> {
        let b = standardize_apart(b, &a.vars());
        let out = self.merge(a, &b);
        prune_subsumed(out)
    }

    /// Abstract pre-states from which `rule` leads into `target`, keeping
    /// only those that satisfy one of the constraint states.
    pub fn regression(
        &self,
        rule: &ActionRule,
        constraint: Option<&[Conjunction]>,
        target: &Conjunction,
    ) -> Vec<Conjunction> {
        let mut seen = HashSet::new();
        self.regress_keyed(rule, constraint, target)
            .into_iter()
            .map(|s| self.strip_key(&s))
            .filter(|s| seen.insert(canonical_form(s)))
            .collect()
    }

    fn strip_key(&self, s: &Conjunction) -> Conjunction {
        Conjunction::with_diseqs(s.atoms().iter().filter(|a| a.pred != self.act).cloned(), s.diseqs().iter().copied())
            .expect("subset keeps disequalities")
    }

    /// Regression that records the instantiated rule variables in a
    /// reserved key atom, so pre-states of different branches of the same
    /// action instance can be merged later.
    fn regress_keyed(&self, rule: &ActionRule, constraint: Option<&[Conjunction]>, target: &Conjunction) -> Vec<Conjunction> {
        let start = target.var_bound();
        let shift = |t: Term| match t {
            Term::Var(v) => Term::Var(v + start),
            t => t,
        };
        let body = rule.body.map_terms(shift).expect("renaming");
        let head = rule.head.map_terms(shift).expect("renaming");
        let key: Vec<Term> = rule.body.vars().into_iter().map(|v| Term::Var(v + start)).collect();

        let tv = target.terms();
        let mut rv = body.terms();
        rv.extend(head.terms());
        rv.sort_unstable();
        rv.dedup();
        let free_t: Vec<Term> = tv.iter().copied().filter(|t| rv.binary_search(t).is_err()).collect();
        let free_r: Vec<Term> = rv.iter().copied().filter(|t| tv.binary_search(t).is_err()).collect();

        let mut out = Vec::new();
        let mut pairs = Vec::new();
        let mut used = vec![false; free_r.len()];
        let ctx = RegressCtx { target, body: &body, head: &head, key: &key, act: self.act };
        identify(&free_t, &free_r, target, 0, &mut used, &mut pairs, &mut |pairs| {
            if let Some(s) = ctx.pre_state(pairs) {
                out.push(s);
            }
        });

        let mut seen = HashSet::new();
        out.retain(|s| seen.insert(canonical_form(s)));
        let out: Vec<Conjunction> = match constraint {
            None => out.into_iter().filter(|s| self.admits(s)).collect(),
            Some(cs) => {
                let mut merged = Vec::new();
                for s in &out {
                    for c in cs {
                        let c = standardize_apart(c, &s.vars());
                        merged.extend(self.merge(s, &c));
                    }
                }
                merged
            }
        };
        prune_subsumed(out)
    }

    /// Q-rules of all abstract actions for the given value function.
    pub fn qrules(&self, vf: &ValueFunction, constraint: Option<&[Conjunction]>) -> (Vec<QRule>, IterationStats) {
        let mut stats = IterationStats::default();
        let mut out = Vec::new();
        // Zero-valued rules other than the default are dominated by it.
        let targets: Vec<&VRule> =
            vf.rules.iter().filter(|r| r.value > 0.0 || r.state.is_empty()).collect();
        for tr in &self.model.transitions {
            let jobs: Vec<(usize, usize)> =
                (0..tr.rules.len()).flat_map(|i| (0..targets.len()).map(move |j| (i, j))).collect();
            stats.regressions += jobs.len();
            let results: Vec<Vec<Conjunction>> = jobs
                .par_iter()
                .map(|&(i, j)| self.regress_keyed(&tr.rules[i], constraint, &targets[j].state))
                .collect();
            let mut partials: Vec<Vec<Partial>> = vec![Vec::new(); tr.rules.len()];
            for (&(i, j), states) in jobs.iter().zip(results) {
                let value = tr.rules[i].prob * targets[j].value;
                partials[i].extend(states.into_iter().map(|state| Partial { value, state }));
            }
            let mut acc: Option<Vec<Partial>> = None;
            for branch in partials {
                let branch = prune_dominated(branch);
                stats.partials += branch.len();
                acc = Some(match acc {
                    None => branch,
                    Some(prev) => self.combine(&prev, &branch),
                });
            }
            for p in acc.unwrap_or_default() {
                out.push(self.to_qrule(tr, p));
            }
        }
        stats.qrules = out.len();
        (out, stats)
    }

    fn combine(&self, left: &[Partial], right: &[Partial]) -> Vec<Partial> {
        let offset = left.iter().map(|p| p.state.var_bound()).max().unwrap_or(0);
        let left: Vec<Keyed> = left.iter().map(|p| self.keyed(p.value, p.state.clone())).collect();
        let right: Vec<Keyed> = right
            .iter()
            .map(|p| self.keyed(p.value, shift_vars(&p.state, offset).0))
            .collect();
        let merged: Vec<Vec<Partial>> = left
            .par_iter()
            .map(|x| {
                let mut out = Vec::new();
                for y in &right {
                    let value = x.value + y.value;
                    out.extend(self.merge_keyed(x, y).into_iter().map(|state| Partial { value, state }));
                }
                out
            })
            .collect();
        prune_dominated(merged.into_iter().flatten().collect())
    }

    fn keyed(&self, value: f64, state: Conjunction) -> Keyed {
        Keyed { value, key: self.key_of(&state), constants: state.constants(), state }
    }

    /// Merges two keyed pre-states with disjoint variables whose key atoms
    /// must coincide.
    fn merge_keyed(&self, x: &Keyed, y: &Keyed) -> Vec<Conjunction> {
        let mut mx: Vec<(Term, Term)> = Vec::new();
        let mut my: Vec<(Term, Term)> = Vec::new();
        for (&a, &b) in x.key.iter().zip(y.key.iter()) {
            match (a, b) {
                (Term::Const(_), Term::Const(_)) if a != b => return Vec::new(),
                (Term::Const(_), Term::Const(_)) => {}
                (Term::Var(_), Term::Const(c)) => {
                    if x.constants.contains(&c) {
                        return Vec::new();
                    }
                    mx.push((a, b));
                }
                (Term::Const(c), Term::Var(_)) => {
                    if y.constants.contains(&c) {
                        return Vec::new();
                    }
                    my.push((b, a));
                }
                (Term::Var(_), Term::Var(_)) => my.push((b, a)),
            }
        }
        let look = |m: &[(Term, Term)], t: Term| m.iter().find(|p| p.0 == t).map_or(t, |p| p.1);
        let (Some(x2), Some(y2)) = (x.state.map_terms(|t| look(&mx, t)), y.state.map_terms(|t| look(&my, t))) else {
            return Vec::new();
        };
        self.merge(&x2, &y2)
    }

    fn key_of(&self, s: &Conjunction) -> Vec<Term> {
        s.atoms().iter().find(|a| a.pred == self.act).map(|a| a.args.to_vec()).unwrap_or_default()
    }

    fn to_qrule(&self, tr: &AbstractTransition, p: Partial) -> QRule {
        let key = self.key_of(&p.state);
        let vars: Vec<u32> = tr.body.vars().into_iter().collect();
        let action = tr.action.map(|t| match t {
            Term::Var(v) => key[vars.binary_search(&v).unwrap()],
            t => t,
        });
        QRule { value: p.value.min(1.0), action: Some(action), state: canonical_form(&self.strip_key(&p.state)) }
    }

    /// Selects V-rules from Q-rules by decreasing value, dropping every
    /// rule that is subsumed by a kept rule of higher or equal value.
    pub fn vrules(&self, q: Vec<QRule>, step: &Step) -> ValueFunction {
        let mut rules: Vec<QRule> = q.into_iter().filter(|r| r.value > 0.0).collect();
        rules.sort_by(|a, b| b.value.total_cmp(&a.value).then_with(|| a.state.cmp(&b.state)));
        if let Step::Until { goal, .. } = step {
            let abs = goal.iter().map(|g| QRule { value: 1.0, action: None, state: canonical_form(g) });
            rules = abs.chain(rules).collect();
        }
        let mut kept: Vec<VRule> = Vec::new();
        let mut alive = vec![true; rules.len()];
        for i in 0..rules.len() {
            if !alive[i] {
                continue;
            }
            let r = &rules[i];
            let shadowed = (i + 1..rules.len()).any(|j| {
                alive[j]
                    && (rules[j].value - r.value).abs() <= VALUE_TOL
                    && subsumes(&rules[j].state, &r.state)
                    && !subsumes(&r.state, &rules[j].state)
            });
            if shadowed {
                continue;
            }
            for j in i + 1..rules.len() {
                if alive[j] && subsumes(&r.state, &rules[j].state) {
                    alive[j] = false;
                }
            }
            kept.push(VRule { value: r.value.clamp(0.0, 1.0), state: r.state.clone() });
        }
        // The absorbing rules come first and all carry value 1, so the kept
        // list is already ordered.
        kept.retain(|r| !(r.state.is_empty() && r.value <= 0.0));
        kept.push(VRule { value: 0.0, state: Conjunction::empty() });
        ValueFunction { rules: kept }
    }

    pub fn one_iteration(&self, vf: &ValueFunction, step: &Step) -> (ValueFunction, IterationStats) {
        let constraint = match step {
            Step::Until { constraint, .. } => *constraint,
            Step::Next => None,
        };
        let (q, stats) = self.qrules(vf, constraint);
        (self.vrules(q, step), stats)
    }
}

struct Keyed {
    value: f64,
    key: Vec<Term>,
    constants: std::collections::BTreeSet<Sym>,
    state: Conjunction,
}

#[derive(Debug, Clone)]
struct Partial {
    value: f64,
    state: Conjunction,
}

/// Keeps the highest value per renaming class, then drops partials whose
/// state is subsumed by one of at least the same value.
fn prune_dominated(items: Vec<Partial>) -> Vec<Partial> {
    let mut best: HashMap<Conjunction, Partial> = HashMap::new();
    let mut order = Vec::new();
    for p in items {
        let key = canonical_form(&p.state);
        match best.get_mut(&key) {
            Some(q) => {
                if p.value > q.value {
                    q.value = p.value;
                }
            }
            None => {
                order.push(key.clone());
                best.insert(key, Partial { value: p.value, state: p.state });
            }
        }
    }
    let mut items: Vec<Partial> = order.into_iter().map(|k| best.remove(&k).unwrap()).collect();
    items.sort_by(|a, b| {
        b.value
            .total_cmp(&a.value)
            .then_with(|| a.state.len().cmp(&b.state.len()))
            .then_with(|| a.state.constants().len().cmp(&b.state.constants().len()))
    });
    let mut kept: Vec<Partial> = Vec::new();
    for p in items {
        if !kept.iter().any(|k| k.value >= p.value && subsumes(&k.state, &p.state)) {
            kept.push(p);
        }
    }
    kept
}

struct RegressCtx<'a> {
    target: &'a Conjunction,
    body: &'a Conjunction,
    head: &'a Conjunction,
    key: &'a [Term],
    act: Sym,
}

impl RegressCtx<'_> {
    fn pre_state(&self, pairs: &[(Term, Term)]) -> Option<Conjunction> {
        let mut mt: HashMap<Term, Term> = HashMap::new();
        let mut mr: HashMap<Term, Term> = HashMap::new();
        for &(x, y) in pairs {
            if y.is_const() {
                mt.insert(x, y);
            } else {
                mr.insert(y, x);
            }
        }
        let v = self.target.map_terms(|t| *mt.get(&t).unwrap_or(&t))?;
        let fr = |t: Term| *mr.get(&t).unwrap_or(&t);
        let h = self.head.map_terms(fr)?;
        let b = self.body.map_terms(fr)?;
        let mut atoms: Vec<Atom> = Vec::new();
        for a in v.atoms() {
            if h.contains(a) {
                continue;
            }
            if b.contains(a) {
                // Deleted by the action and not restored.
                return None;
            }
            atoms.push(a.clone());
        }
        atoms.extend(b.atoms().iter().cloned());
        atoms.push(Atom::new(self.act, self.key.iter().map(|&t| fr(t))));
        Conjunction::with_diseqs(atoms, v.diseqs().iter().copied())
    }
}

/// Enumerates partial injective identifications of target terms with rule
/// terms. Constants only pair with variables.
fn identify(
    ft: &[Term],
    fr: &[Term],
    target: &Conjunction,
    i: usize,
    used: &mut Vec<bool>,
    pairs: &mut Vec<(Term, Term)>,
    f: &mut dyn FnMut(&[(Term, Term)]),
) {
    if i == ft.len() {
        f(pairs);
        return;
    }
    identify(ft, fr, target, i + 1, used, pairs, f);
    let x = ft[i];
    for (j, &y) in fr.iter().enumerate() {
        if used[j] || (x.is_const() && y.is_const()) {
            continue;
        }
        if y.is_const() && target.diseqs().iter().any(|&(a, b)| (a, b) == (x, y) || (a, b) == (y, x)) {
            continue;
        }
        used[j] = true;
        pairs.push((x, y));
        identify(ft, fr, target, i + 1, used, pairs, f);
        pairs.pop();
        used[j] = false;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::syntax::parse_conjunction;

    fn rule(value: f64, s: &str) -> VRule {
        VRule { value, state: parse_conjunction(s).unwrap() }
    }

    #[test]
    fn value_function_orders_rules_and_adds_default() {
        let vf = ValueFunction::new(vec![rule(0.5, "cl(a)"), rule(1.0, "on(a,b)")]);
        let values: Vec<f64> = vf.rules().iter().map(|r| r.value).collect();
        assert_eq!(values, vec![1.0, 0.5, 0.0]);
        assert!(vf.rules().last().unwrap().state.is_empty());
        assert_eq!(vf.evaluate(&parse_conjunction("cl(a), on(a,b)").unwrap()), 1.0);
        assert_eq!(vf.evaluate(&parse_conjunction("cl(b)").unwrap()), 0.0);
    }

    #[test]
    fn distance_is_infinite_on_different_states() {
        let a = ValueFunction::new(vec![rule(0.5, "cl(X)")]);
        let b = ValueFunction::new(vec![rule(0.75, "cl(Y)")]);
        let c = ValueFunction::new(vec![rule(0.75, "on(X,Y)")]);
        assert_eq!(distance(&a, &b), 0.25);
        assert_eq!(distance(&a, &c), f64::INFINITY);
        assert_eq!(distance(&a, &ValueFunction::goal(&[])), f64::INFINITY);
    }

    #[test]
    fn bound_is_capped_by_declared_constants() {
        let mut m = crate::model::parse_model(crate::model::BLOCKS_WORLD).unwrap();
        assert_eq!(Engine::new(&m, Some(5)).bound(), Some(5));
        m.constants = Some(vec![Sym::intern("a"), Sym::intern("b")]);
        let e = Engine::new(&m, Some(5));
        assert_eq!(e.bound(), Some(2));
        assert!(!e.admits(&parse_conjunction("on(a,c)").unwrap()));
        assert!(e.admits(&parse_conjunction("on(a,X)").unwrap()));
        assert!(!e.admits(&parse_conjunction("on(a,X), cl(Y)").unwrap()));
    }
}
