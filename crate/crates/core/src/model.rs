//! Relational MDPs: probabilistic action rules, parsing, validation and
//! single-state grounding.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::ops::ControlFlow;

use thiserror::Error;

use crate::syntax::{tokenize, Parser, SyntaxError, Tok, VarScope};
use crate::term::{canonical_form, for_each_subsumption, subsumes, Atom, Conjunction, Substitution, Sym, Term};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("syntax error at {0}")]
    Syntax(#[from] SyntaxError),
    #[error("invalid model: {0}")]
    Validation(String),
    #[error("state is not ground: {0}")]
    NonGroundState(String),
    #[error("action {0} is not applicable in the given state")]
    InapplicableAction(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionRule {
    pub prob: f64,
    pub head: Conjunction,
    pub body: Conjunction,
    pub action: Atom,
}

/// One probabilistic action rule group: a shared action and precondition
/// with a distribution over postconditions.
#[derive(Debug, Clone, PartialEq)]
pub struct AbstractTransition {
    pub action: Atom,
    pub body: Conjunction,
    pub rules: Vec<ActionRule>,
    /// Source names of the rule variables, indexed by id.
    pub var_names: Vec<String>,
}

impl AbstractTransition {
    pub fn label(&self) -> String {
        format!("{}/{}", self.action.pred, self.action.arity())
    }
}

/// How the explicit-state oracle picks its initial states.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum SeedSpec {
    /// Every legal subset of the Herbrand base over the constant pool.
    #[default]
    Legal,
    /// All stackings of the pool into towers: `on(upper, lower)` and `clear(top)`.
    Towers { on: Sym, clear: Sym },
    /// Injective groundings of the given template states.
    Templates(Vec<Conjunction>),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RmdpModel {
    pub relations: Vec<(Sym, usize)>,
    pub actions: Vec<(Sym, usize)>,
    pub transitions: Vec<AbstractTransition>,
    /// Forbidden patterns: a state is legal iff none of them subsumes it.
    pub constraints: Vec<Conjunction>,
    pub constants: Option<Vec<Sym>>,
    pub state_bound: Option<usize>,
    pub seeds: SeedSpec,
}

/// A ground action instance: the transition, its witness and the action atom.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundInstance {
    pub transition: usize,
    pub theta: Substitution,
    pub action: Atom,
}

impl RmdpModel {
    pub fn relation_arity(&self, p: Sym) -> Option<usize> {
        self.relations.iter().find(|r| r.0 == p).map(|r| r.1)
    }

    pub fn is_legal(&self, s: &Conjunction) -> bool {
        !self.constraints.iter().any(|c| subsumes(c, s))
    }

    pub fn ground_instances(&self, s: &Conjunction) -> Result<Vec<GroundInstance>, ModelError> {
        if !s.is_ground() {
            return Err(ModelError::NonGroundState(s.to_string()));
        }
        let mut out = Vec::new();
        for (i, tr) in self.transitions.iter().enumerate() {
            for_each_subsumption(&tr.body, s, |theta| {
                out.push(GroundInstance { transition: i, theta: theta.clone(), action: theta.atom(&tr.action) });
                ControlFlow::Continue(())
            });
        }
        Ok(out)
    }

    /// All ground actions applicable in `s`, over every witness.
    pub fn ground_actions(&self, s: &Conjunction) -> Result<BTreeSet<Atom>, ModelError> {
        Ok(self.ground_instances(s)?.into_iter().map(|g| g.action).collect())
    }

    /// Successor distribution of one ground instance. Branches leading to
    /// the same state are merged.
    pub fn successors(&self, s: &Conjunction, inst: &GroundInstance) -> Vec<(Conjunction, f64)> {
        let tr = &self.transitions[inst.transition];
        let body = tr.body.map_terms(|t| inst.theta.term(t)).expect("ground body");
        let rest = s.without(&body);
        let mut out: Vec<(Conjunction, f64)> = Vec::new();
        for r in &tr.rules {
            let head = r.head.map_terms(|t| inst.theta.term(t)).expect("ground head");
            let next = Conjunction::new(rest.atoms().iter().chain(head.atoms()).cloned());
            match out.iter_mut().find(|(n, _)| *n == next) {
                Some((_, p)) => *p += r.prob,
                None => out.push((next, r.prob)),
            }
        }
        out
    }

    pub fn ground_step(&self, s: &Conjunction, a: &Atom) -> Result<Vec<(Conjunction, f64)>, ModelError> {
        let inst = self
            .ground_instances(s)?
            .into_iter()
            .find(|g| &g.action == a)
            .ok_or_else(|| ModelError::InapplicableAction(a.to_string()))?;
        Ok(self.successors(s, &inst))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (r, n) in &self.relations {
            let _ = writeln!(out, "relation {r}/{n}.");
        }
        for (a, n) in &self.actions {
            let _ = writeln!(out, "action {a}/{n}.");
        }
        for tr in &self.transitions {
            let mut scope = VarScope::new();
            for name in &tr.var_names {
                scope.var(name);
            }
            let _ = write!(out, "rule {}: pre {}", scope.atom_text(&tr.action), scope.conj_text(&tr.body, ", "));
            for r in &tr.rules {
                let _ = write!(out, " ; {} -> {}", r.prob, scope.conj_text(&r.head, ", "));
            }
            out.push_str(".\n");
        }
        for c in &self.constraints {
            let _ = writeln!(out, "constraint {}.", VarScope::new().conj_text(c, ", "));
        }
        if let Some(cs) = &self.constants {
            let names: Vec<String> = cs.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(out, "constants {}.", names.join(", "));
        }
        if let Some(b) = self.state_bound {
            let _ = writeln!(out, "state_bound {b}.");
        }
        match &self.seeds {
            SeedSpec::Legal => {}
            SeedSpec::Towers { on, clear } => {
                let _ = writeln!(out, "seeds towers({on}, {clear}).");
            }
            SeedSpec::Templates(ts) => {
                for t in ts {
                    let _ = writeln!(out, "seed {}.", VarScope::new().conj_text(t, ", "));
                }
            }
        }
        out
    }
}

pub fn parse_model(text: &str) -> Result<RmdpModel, ModelError> {
    let toks = tokenize(text)?;
    let mut p = Parser::new(&toks);
    let mut m = RmdpModel::default();
    let mut templates = Vec::new();
    while *p.peek() != Tok::Eof {
        let (line, col) = (p.here().line, p.here().col);
        let kw = p.ident()?;
        match kw.as_str() {
            "relation" | "action" => {
                let name = p.ident()?;
                p.expect(Tok::Slash)?;
                let n = p.number()?;
                if n.fract() != 0.0 || n < 0.0 {
                    return Err(p.error("arity must be a non-negative integer").into());
                }
                let list = if kw == "relation" { &mut m.relations } else { &mut m.actions };
                let sym = Sym::intern(&name);
                if list.iter().any(|(s, _)| *s == sym) {
                    return Err(ModelError::Validation(format!("{kw} {name} declared twice")));
                }
                list.push((sym, n as usize));
            }
            "rule" => {
                let mut scope = VarScope::new();
                let action = p.atom(&mut scope)?;
                p.expect(Tok::Colon)?;
                if !p.is_keyword("pre") {
                    return Err(p.error("expected `pre`").into());
                }
                p.bump();
                let body = p.conjunction(&mut scope)?;
                let mut branches: Vec<(f64, Conjunction)> = Vec::new();
                while p.eat(&Tok::Semi) {
                    let prob = p.number()?;
                    p.expect(Tok::Arrow)?;
                    let head = p.conjunction(&mut scope)?;
                    match branches.iter_mut().find(|(_, h)| *h == head) {
                        Some((q, _)) => *q += prob,
                        None => branches.push((prob, head)),
                    }
                }
                // Number variables by name so rendering and parsing agree.
                let mut var_names: Vec<String> =
                    (0..scope.next_id()).map(|i| scope.name(i).unwrap().to_string()).collect();
                var_names.sort();
                let rank = |t: Term| match t {
                    Term::Var(v) => {
                        let name = scope.name(v).unwrap();
                        Term::Var(var_names.binary_search_by(|n| n.as_str().cmp(name)).unwrap() as u32)
                    }
                    t => t,
                };
                let action = action.map(rank);
                let body = body.map_terms(rank).expect("renaming");
                let branches: Vec<(f64, Conjunction)> =
                    branches.into_iter().map(|(p, h)| (p, h.map_terms(rank).expect("renaming"))).collect();
                let rules = branches
                    .into_iter()
                    .map(|(prob, head)| ActionRule { prob, head, body: body.clone(), action: action.clone() })
                    .collect();
                m.transitions.push(AbstractTransition { action, body, rules, var_names });
            }
            "constraint" => m.constraints.push(canonical_form(&p.conjunction(&mut VarScope::new())?)),
            "constants" => {
                let mut cs = Vec::new();
                loop {
                    let name = p.ident()?;
                    if name.starts_with(|c: char| c.is_uppercase() || c == '_') {
                        return Err(p.error(format!("constant `{name}` must start with a lower-case letter")).into());
                    }
                    cs.push(Sym::intern(&name));
                    if !p.eat(&Tok::Comma) {
                        break;
                    }
                }
                m.constants = Some(cs);
            }
            "state_bound" => {
                let n = p.number()?;
                if n.fract() != 0.0 || n < 1.0 {
                    return Err(p.error("state_bound must be a positive integer").into());
                }
                m.state_bound = Some(n as usize);
            }
            "seeds" => {
                if !p.is_keyword("towers") {
                    return Err(p.error("expected `towers`").into());
                }
                p.bump();
                p.expect(Tok::LParen)?;
                let on = Sym::intern(&p.ident()?);
                p.expect(Tok::Comma)?;
                let clear = Sym::intern(&p.ident()?);
                p.expect(Tok::RParen)?;
                m.seeds = SeedSpec::Towers { on, clear };
            }
            "seed" => templates.push(canonical_form(&p.conjunction(&mut VarScope::new())?)),
            other => {
                return Err(SyntaxError { line, col, msg: format!("unknown statement `{other}`") }.into());
            }
        }
        p.expect(Tok::Dot)?;
    }
    if !templates.is_empty() {
        if m.seeds != SeedSpec::Legal {
            return Err(ModelError::Validation("`seed` and `seeds` statements cannot be mixed".into()));
        }
        m.seeds = SeedSpec::Templates(templates);
    }
    validate(&m)?;
    Ok(m)
}

fn validate(m: &RmdpModel) -> Result<(), ModelError> {
    let fail = |msg: String| Err(ModelError::Validation(msg));
    for (a, _) in &m.actions {
        if m.relation_arity(*a).is_some() {
            return fail(format!("action symbol {a} is also declared as a relation"));
        }
    }
    let check_rel = |atom: &Atom, ctx: &str| -> Result<(), ModelError> {
        match m.relation_arity(atom.pred) {
            None => Err(ModelError::Validation(format!("undeclared relation {} in {ctx}", atom.pred))),
            Some(n) if n != atom.arity() => Err(ModelError::Validation(format!(
                "{} used with arity {} in {ctx}, declared {}/{n}",
                atom.pred,
                atom.arity(),
                atom.pred
            ))),
            _ => Ok(()),
        }
    };
    let domain: Option<HashSet<Sym>> = m.constants.as_ref().map(|c| c.iter().copied().collect());
    let check_consts = |c: &Conjunction, ctx: &str| -> Result<(), ModelError> {
        if let Some(d) = &domain {
            if let Some(k) = c.constants().into_iter().find(|k| !d.contains(k)) {
                return Err(ModelError::Validation(format!("constant {k} in {ctx} is not among the declared constants")));
            }
        }
        Ok(())
    };
    for tr in &m.transitions {
        let label = tr.label();
        match m.actions.iter().find(|(a, _)| *a == tr.action.pred) {
            None => return fail(format!("rule for undeclared action {}", tr.action.pred)),
            Some((_, n)) if *n != tr.action.arity() => {
                return fail(format!("action {} used with arity {}, declared {label}", tr.action.pred, tr.action.arity()))
            }
            _ => {}
        }
        let body_vars = tr.body.vars();
        let action_vars: BTreeSet<u32> = tr.action.args.iter().filter_map(|t| var_id(*t)).collect();
        if !action_vars.is_subset(&body_vars) {
            return fail(format!("action {label}: action variables must occur in the precondition"));
        }
        for a in tr.body.atoms() {
            check_rel(a, &format!("precondition of {label}"))?;
        }
        check_consts(&tr.body, &format!("rule {label}"))?;
        let mut total = 0.0;
        for r in &tr.rules {
            if !(0.0..=1.0).contains(&r.prob) {
                return fail(format!("action {label}: probability {} outside [0,1]", r.prob));
            }
            total += r.prob;
            for a in r.head.atoms() {
                check_rel(a, &format!("postcondition of {label}"))?;
            }
            check_consts(&r.head, &format!("rule {label}"))?;
            if !r.head.vars().is_subset(&body_vars) {
                return fail(format!(
                    "action {label}: every postcondition variable must occur in the precondition (vars(H_i) ⊆ vars(B))"
                ));
            }
        }
        if tr.rules.is_empty() || (total - 1.0).abs() > 1e-9 {
            return fail(format!("probabilities of action {label} sum to {}", round_report(total)));
        }
    }
    for c in &m.constraints {
        for a in c.atoms() {
            check_rel(a, "constraint")?;
        }
    }
    match &m.seeds {
        SeedSpec::Towers { on, clear } => {
            if m.relation_arity(*on) != Some(2) || m.relation_arity(*clear) != Some(1) {
                return fail(format!("seeds towers({on}, {clear}) needs relations {on}/2 and {clear}/1"));
            }
        }
        SeedSpec::Templates(ts) => {
            for t in ts {
                for a in t.atoms() {
                    check_rel(a, "seed")?;
                }
            }
        }
        SeedSpec::Legal => {}
    }
    Ok(())
}

fn round_report(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

fn var_id(t: Term) -> Option<u32> {
    match t {
        Term::Var(v) => Some(v),
        _ => None,
    }
}

/// Blocks world with the move action, used by tests and examples.
pub const BLOCKS_WORLD: &str = "\
relation cl/1.
relation on/2.
action move/3.
rule move(A,B,C): pre cl(A), cl(B), on(A,C) ; 0.9 -> cl(A), cl(C), on(A,B) ; 0.1 -> cl(A), cl(B), on(A,C).
constraint on(X,Y), on(X,Z).
constraint on(Y,X), on(Z,X).
constraint cl(X), on(Y,X).
seeds towers(on, cl).
";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::syntax::parse_conjunction;

    fn blocks() -> RmdpModel {
        parse_model(BLOCKS_WORLD).unwrap()
    }

    fn atom(text: &str) -> Atom {
        VarScope::new().atom(text).unwrap()
    }

    #[test]
    fn parses_blocks_world() {
        let m = blocks();
        assert_eq!(m.transitions.len(), 1);
        assert_eq!(m.transitions[0].rules.len(), 2);
        assert_eq!(m.constraints.len(), 3);
    }

    #[test]
    fn rejects_bad_probabilities() {
        let text = BLOCKS_WORLD.replace("0.1 ->", "0.05 ->");
        let err = parse_model(&text).unwrap_err();
        assert_eq!(err, ModelError::Validation("probabilities of action move/3 sum to 0.95".into()));
        let text = BLOCKS_WORLD.replace("0.9 ->", "0.7 ->");
        assert!(matches!(parse_model(&text), Err(ModelError::Validation(_))));
    }

    #[test]
    fn rejects_unbound_head_variable() {
        let text = BLOCKS_WORLD.replace("0.9 -> cl(A), cl(C)", "0.9 -> cl(D), cl(C)");
        let err = parse_model(&text).unwrap_err().to_string();
        assert!(err.contains("vars(H_i) ⊆ vars(B)"), "{err}");
    }

    #[test]
    fn rejects_action_relation_clash_and_arity() {
        let text = format!("{BLOCKS_WORLD}relation move/3.");
        assert!(matches!(parse_model(&text), Err(ModelError::Validation(_))));
        let text = BLOCKS_WORLD.replace("pre cl(A)", "pre cl(A,B)");
        assert!(matches!(parse_model(&text), Err(ModelError::Validation(_))));
    }

    #[test]
    fn syntax_error_has_position() {
        let err = parse_model("relation cl/1.\nrule move(A): pre cl(A) 0.9 -> cl(A).").unwrap_err();
        match err {
            ModelError::Syntax(e) => assert_eq!(e.line, 2),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn identical_branches_merge() {
        let text = "relation p/1. action a/1. rule a(X): pre p(X) ; 0.5 -> p(X) ; 0.5 -> p(X).";
        let m = parse_model(text).unwrap();
        assert_eq!(m.transitions[0].rules.len(), 1);
        assert_eq!(m.transitions[0].rules[0].prob, 1.0);
    }

    #[test]
    fn render_round_trip() {
        let m = blocks();
        let again = parse_model(&m.render()).unwrap();
        assert_eq!(m, again);
        let text = format!("{BLOCKS_WORLD}constants a, b, c.\nstate_bound 3.\n").replace("seeds towers(on, cl).", "seed cl(X), cl(Y).");
        let m = parse_model(&text).unwrap();
        assert_eq!(parse_model(&m.render()).unwrap(), m);
    }

    #[test]
    fn ground_actions_examples() {
        let m = blocks();
        let s = parse_conjunction("cl(a),cl(b),cl(d),on(a,c),on(d,e)").unwrap();
        assert!(m.ground_actions(&s).unwrap().contains(&atom("move(a,b,c)")));
        let s = parse_conjunction("on(a,b),on(b,c)").unwrap();
        assert!(m.ground_actions(&s).unwrap().is_empty());
        let s = parse_conjunction("cl(a),cl(b),on(a,c),on(b,d)").unwrap();
        let want: BTreeSet<Atom> = [atom("move(a,b,c)"), atom("move(b,a,d)")].into();
        assert_eq!(m.ground_actions(&s).unwrap(), want);
        let s = parse_conjunction("cl(X)").unwrap();
        assert!(matches!(m.ground_actions(&s), Err(ModelError::NonGroundState(_))));
    }

    #[test]
    fn ground_step_example() {
        let m = blocks();
        let s = parse_conjunction("cl(a),cl(b),cl(d),on(a,c),on(d,e)").unwrap();
        let out = m.ground_step(&s, &atom("move(a,b,c)")).unwrap();
        let moved = parse_conjunction("cl(a),cl(c),cl(d),on(a,b),on(d,e)").unwrap();
        assert_eq!(out, vec![(moved, 0.9), (s.clone(), 0.1)]);
        assert!(matches!(m.ground_step(&s, &atom("move(b,a,c)")), Err(ModelError::InapplicableAction(_))));
    }

    #[test]
    fn deterministic_rule_has_single_outcome() {
        let text = "relation p/1. relation q/1. action a/1. rule a(X): pre p(X) ; 1.0 -> q(X).";
        let m = parse_model(text).unwrap();
        let s = parse_conjunction("p(o)").unwrap();
        let out = m.ground_step(&s, &atom("a(o)")).unwrap();
        assert_eq!(out, vec![(parse_conjunction("q(o)").unwrap(), 1.0)]);
    }
}
