//! Relational pCTL formulas: syntax tree, parser, printer and evaluation plan.

use std::collections::HashMap;
use std::fmt;

use crate::syntax::{tokenize, Parser, SyntaxError, Tok, VarScope};
use crate::term::{var_name, Atom, Term};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Comparator {
    Ge,
    Gt,
    Le,
    Lt,
}

impl Comparator {
    /// `value ⋈ threshold`, with `slack` widening the accepted side.
    pub fn holds(self, value: f64, threshold: f64, slack: f64) -> bool {
        match self {
            Comparator::Ge => value >= threshold - slack,
            Comparator::Gt => value > threshold - slack,
            Comparator::Le => value <= threshold + slack,
            Comparator::Lt => value < threshold + slack,
        }
    }

    /// Upper-bound comparators select states by the absence of high values.
    pub fn is_upper(self) -> bool {
        matches!(self, Comparator::Le | Comparator::Lt)
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Comparator::Ge => ">=",
            Comparator::Gt => ">",
            Comparator::Le => "<=",
            Comparator::Lt => "<",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StateFormula {
    True,
    /// Shorthand for the negation of `true`.
    False,
    Lit(Atom),
    NegLit(Atom),
    And(Box<StateFormula>, Box<StateFormula>),
    Or(Box<StateFormula>, Box<StateFormula>),
    Prob { cmp: Comparator, threshold: f64, path: Box<PathFormula> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum PathFormula {
    Next(StateFormula),
    /// `left U<=bound right`; `None` is the unbounded operator.
    Until { left: StateFormula, right: StateFormula, bound: Option<u32> },
}

/// Raised when variables shared between different probability operators
/// had to be renamed apart.
#[derive(Debug, Clone, PartialEq)]
pub struct ScopeWarning {
    pub variable: String,
}

impl fmt::Display for ScopeWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "variable {} occurs under several probability operators; the occurrences were renamed apart",
            self.variable
        )
    }
}

pub fn parse_formula(text: &str) -> Result<StateFormula, SyntaxError> {
    parse_formula_with_warnings(text).map(|(f, _)| f)
}

pub fn parse_formula_with_warnings(text: &str) -> Result<(StateFormula, Vec<ScopeWarning>), SyntaxError> {
    let toks = tokenize(text)?;
    let mut p = Parser::new(&toks);
    let mut scope = VarScope::new();
    let mut f = state(&mut p, &mut scope)?;
    p.expect(Tok::Eof)?;
    let warnings = separate_scopes(&mut f, &scope);
    renumber(&mut f);
    Ok((f, warnings))
}

fn state(p: &mut Parser, s: &mut VarScope) -> Result<StateFormula, SyntaxError> {
    let mut left = conj(p, s)?;
    while p.eat(&Tok::Bar) {
        let right = conj(p, s)?;
        left = StateFormula::Or(Box::new(left), Box::new(right));
    }
    Ok(left)
}

fn conj(p: &mut Parser, s: &mut VarScope) -> Result<StateFormula, SyntaxError> {
    let mut left = unary(p, s)?;
    while p.eat(&Tok::Amp) {
        let right = unary(p, s)?;
        left = StateFormula::And(Box::new(left), Box::new(right));
    }
    Ok(left)
}

fn unary(p: &mut Parser, s: &mut VarScope) -> Result<StateFormula, SyntaxError> {
    match p.peek().clone() {
        Tok::Tilde => {
            p.bump();
            if p.is_keyword("true") {
                p.bump();
                return Ok(StateFormula::False);
            }
            if !matches!(p.peek(), Tok::Ident(n) if n.starts_with(char::is_lowercase)) {
                return Err(p.error("negation is only allowed in front of an atom"));
            }
            Ok(StateFormula::NegLit(p.atom(s)?))
        }
        Tok::LParen => {
            p.bump();
            let f = state(p, s)?;
            p.expect(Tok::RParen)?;
            Ok(f)
        }
        Tok::Ident(name) if name == "true" => {
            p.bump();
            Ok(StateFormula::True)
        }
        Tok::Ident(name) if name == "false" => {
            p.bump();
            Ok(StateFormula::False)
        }
        Tok::Ident(name) if name == "P" => prob(p, s),
        Tok::Ident(name) if name.starts_with(char::is_lowercase) => Ok(StateFormula::Lit(p.atom(s)?)),
        t => Err(p.error(format!("expected a state formula, found {t}"))),
    }
}

fn prob(p: &mut Parser, s: &mut VarScope) -> Result<StateFormula, SyntaxError> {
    p.bump();
    let cmp = match p.bump() {
        Tok::Ge => Comparator::Ge,
        Tok::Gt => Comparator::Gt,
        Tok::Le => Comparator::Le,
        Tok::Lt => Comparator::Lt,
        t => return Err(p.error(format!("expected a comparator after P, found {t}"))),
    };
    let threshold = p.number()?;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(p.error(format!("probability threshold {threshold} outside [0,1]")));
    }
    p.expect(Tok::LBrack)?;
    let path = path(p, s)?;
    p.expect(Tok::RBrack)?;
    Ok(StateFormula::Prob { cmp, threshold, path: Box::new(path) })
}

fn step_bound(p: &mut Parser) -> Result<Option<u32>, SyntaxError> {
    if !p.eat(&Tok::Le) {
        return Ok(None);
    }
    let k = p.number()?;
    if k.fract() != 0.0 || k < 1.0 || k > u32::MAX as f64 {
        return Err(p.error("step bound must be a positive integer"));
    }
    Ok(Some(k as u32))
}

fn path(p: &mut Parser, s: &mut VarScope) -> Result<PathFormula, SyntaxError> {
    if p.is_keyword("X") {
        p.bump();
        return Ok(PathFormula::Next(state(p, s)?));
    }
    if p.is_keyword("F") {
        p.bump();
        let bound = step_bound(p)?;
        return Ok(PathFormula::Until { left: StateFormula::True, right: state(p, s)?, bound });
    }
    let left = state(p, s)?;
    if !p.is_keyword("U") {
        return Err(p.error(format!("expected `U`, found {}", p.peek())));
    }
    p.bump();
    let bound = step_bound(p)?;
    let right = state(p, s)?;
    Ok(PathFormula::Until { left, right, bound })
}

fn for_each_atom_mut(f: &mut StateFormula, scope: usize, next: &mut usize, g: &mut dyn FnMut(&mut Atom, usize)) {
    match f {
        StateFormula::True | StateFormula::False => {}
        StateFormula::Lit(a) | StateFormula::NegLit(a) => g(a, scope),
        StateFormula::And(l, r) | StateFormula::Or(l, r) => {
            for_each_atom_mut(l, scope, next, g);
            for_each_atom_mut(r, scope, next, g);
        }
        StateFormula::Prob { path, .. } => {
            *next += 1;
            let mine = *next;
            match path.as_mut() {
                PathFormula::Next(x) => for_each_atom_mut(x, mine, next, g),
                PathFormula::Until { left, right, .. } => {
                    for_each_atom_mut(left, mine, next, g);
                    for_each_atom_mut(right, mine, next, g);
                }
            }
        }
    }
}

/// Gives each probability operator its own copy of any variable that also
/// occurs in another operator or at the top level.
fn separate_scopes(f: &mut StateFormula, names: &VarScope) -> Vec<ScopeWarning> {
    let mut owner: HashMap<u32, usize> = HashMap::new();
    let mut clashes: Vec<u32> = Vec::new();
    for_each_atom_mut(f, 0, &mut 0, &mut |a, scope| {
        for t in &a.args {
            if let Term::Var(v) = *t {
                let first = *owner.entry(v).or_insert(scope);
                if first != scope && !clashes.contains(&v) {
                    clashes.push(v);
                }
            }
        }
    });
    if clashes.is_empty() {
        return Vec::new();
    }
    let mut next_id = owner.keys().max().map_or(0, |m| m + 1);
    let mut fresh: HashMap<(u32, usize), u32> = HashMap::new();
    for_each_atom_mut(f, 0, &mut 0, &mut |a, scope| {
        for t in a.args.iter_mut() {
            if let Term::Var(v) = *t {
                if owner[&v] != scope {
                    let id = *fresh.entry((v, scope)).or_insert_with(|| {
                        next_id += 1;
                        next_id - 1
                    });
                    *t = Term::Var(id);
                }
            }
        }
    });
    clashes
        .into_iter()
        .map(|v| ScopeWarning { variable: names.name(v).unwrap_or("?").to_string() })
        .collect()
}

/// Numbers variables 0, 1, ... in order of first occurrence.
fn renumber(f: &mut StateFormula) {
    let mut map: HashMap<u32, u32> = HashMap::new();
    for_each_atom_mut(f, 0, &mut 0, &mut |a, _| {
        for t in a.args.iter_mut() {
            if let Term::Var(v) = *t {
                let n = map.len() as u32;
                *t = Term::Var(*map.entry(v).or_insert(n));
            }
        }
    });
}

impl StateFormula {
    pub fn is_inner(&self) -> bool {
        matches!(self, StateFormula::And(..) | StateFormula::Or(..) | StateFormula::Prob { .. })
    }

    /// Direct state-formula children.
    pub fn children(&self) -> Vec<&StateFormula> {
        match self {
            StateFormula::And(l, r) | StateFormula::Or(l, r) => vec![l, r],
            StateFormula::Prob { path, .. } => match path.as_ref() {
                PathFormula::Next(x) => vec![x],
                PathFormula::Until { left, right, .. } => vec![left, right],
            },
            _ => Vec::new(),
        }
    }
}

/// One node of the evaluation plan: the subformula and the plan indices of
/// its children.
#[derive(Debug, Clone)]
pub struct PlanNode<'a> {
    pub formula: &'a StateFormula,
    pub children: Vec<usize>,
}

/// Post-order listing of all subformulas; every node follows its children.
pub fn parse_tree(f: &StateFormula) -> Vec<PlanNode<'_>> {
    fn go<'a>(f: &'a StateFormula, out: &mut Vec<PlanNode<'a>>) -> usize {
        let children = f.children().into_iter().map(|c| go(c, out)).collect();
        out.push(PlanNode { formula: f, children });
        out.len() - 1
    }
    let mut out = Vec::new();
    go(f, &mut out);
    out
}

fn fmt_atom(f: &mut fmt::Formatter<'_>, a: &Atom) -> fmt::Result {
    write!(f, "{}", a.pred)?;
    if !a.args.is_empty() {
        let args: Vec<String> = a
            .args
            .iter()
            .map(|t| match t {
                Term::Var(v) => var_name(*v),
                Term::Const(c) => c.to_string(),
            })
            .collect();
        write!(f, "({})", args.join(","))?;
    }
    Ok(())
}

struct Operand<'a>(&'a StateFormula);

impl fmt::Display for Operand<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            StateFormula::And(..) | StateFormula::Or(..) => write!(f, "({})", self.0),
            g => write!(f, "{g}"),
        }
    }
}

impl fmt::Display for StateFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StateFormula::True => f.write_str("true"),
            StateFormula::False => f.write_str("false"),
            StateFormula::Lit(a) => fmt_atom(f, a),
            StateFormula::NegLit(a) => {
                f.write_str("~")?;
                fmt_atom(f, a)
            }
            StateFormula::And(l, r) => {
                let left = |f: &mut fmt::Formatter<'_>| match l.as_ref() {
                    StateFormula::Or(..) => write!(f, "({l})"),
                    _ => write!(f, "{l}"),
                };
                left(f)?;
                match r.as_ref() {
                    StateFormula::Or(..) | StateFormula::And(..) => write!(f, " & ({r})"),
                    _ => write!(f, " & {r}"),
                }
            }
            StateFormula::Or(l, r) => match r.as_ref() {
                StateFormula::Or(..) => write!(f, "{l} | ({r})"),
                _ => write!(f, "{l} | {r}"),
            },
            StateFormula::Prob { cmp, threshold, path } => {
                write!(f, "P{}{} [ {} ]", cmp.symbol(), threshold, path)
            }
        }
    }
}

impl fmt::Display for PathFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let bound = |b: &Option<u32>| b.map(|k| format!("<={k}")).unwrap_or_default();
        match self {
            PathFormula::Next(x) => write!(f, "X {}", Operand(x)),
            PathFormula::Until { left: StateFormula::True, right, bound: b } => {
                write!(f, "F{} {}", bound(b), Operand(right))
            }
            PathFormula::Until { left, right, bound: b } => {
                write!(f, "{} U{} {}", Operand(left), bound(b), Operand(right))
            }
        }
    }
}
