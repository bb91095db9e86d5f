//! Terms, atoms and conjunctions under the object identity assumption.
//!
//! Every pair of distinct terms inside one conjunction denotes distinct
//! objects. Subsumption and unification therefore only admit substitutions
//! that stay injective on the terms of each conjunction involved.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::ops::ControlFlow;
use std::sync::{Arc, OnceLock, RwLock};

use smallvec::SmallVec;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TermError {
    #[error("substitution identifies distinct terms {0} and {1}")]
    OIViolation(String, String),
    #[error("conjunctions share variables: {0}")]
    SharedVariables(String),
}

/// Interned predicate, action or constant name.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sym(u32);

#[derive(Default)]
struct Interner {
    names: Vec<Arc<str>>,
    ids: HashMap<Arc<str>, u32>,
}

fn interner() -> &'static RwLock<Interner> {
    static INTERNER: OnceLock<RwLock<Interner>> = OnceLock::new();
    INTERNER.get_or_init(Default::default)
}

impl Sym {
    pub fn intern(name: &str) -> Sym {
        if let Some(&id) = interner().read().unwrap().ids.get(name) {
            return Sym(id);
        }
        let mut w = interner().write().unwrap();
        if let Some(&id) = w.ids.get(name) {
            return Sym(id);
        }
        let id = w.names.len() as u32;
        let name: Arc<str> = Arc::from(name);
        w.names.push(name.clone());
        w.ids.insert(name, id);
        Sym(id)
    }

    pub fn name(self) -> Arc<str> {
        interner().read().unwrap().names[self.0 as usize].clone()
    }
}

impl fmt::Debug for Sym {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl fmt::Display for Sym {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub enum Term {
    Const(Sym),
    Var(u32),
}

impl Term {
    pub fn constant(name: &str) -> Term {
        Term::Const(Sym::intern(name))
    }

    pub fn is_var(self) -> bool {
        matches!(self, Term::Var(_))
    }

    pub fn is_const(self) -> bool {
        matches!(self, Term::Const(_))
    }
}

const VAR_LETTERS: [&str; 10] = ["X", "Y", "Z", "W", "V", "U", "T", "S", "R", "Q"];

/// Display name of a numbered variable: X, Y, Z, ..., X1, Y1, ...
pub fn var_name(id: u32) -> String {
    let letter = VAR_LETTERS[(id % 10) as usize];
    match id / 10 {
        0 => letter.to_string(),
        n => format!("{letter}{n}"),
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Const(s) => write!(f, "{s}"),
            Term::Var(v) => f.write_str(&var_name(*v)),
        }
    }
}

pub type Args = SmallVec<[Term; 3]>;

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct Atom {
    pub pred: Sym,
    pub args: Args,
}

impl Atom {
    pub fn new(pred: Sym, args: impl IntoIterator<Item = Term>) -> Atom {
        Atom { pred, args: args.into_iter().collect() }
    }

    pub fn arity(&self) -> usize {
        self.args.len()
    }

    pub fn is_ground(&self) -> bool {
        self.args.iter().all(|t| t.is_const())
    }

    pub fn map(&self, mut f: impl FnMut(Term) -> Term) -> Atom {
        Atom { pred: self.pred, args: self.args.iter().map(|&t| f(t)).collect() }
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.pred)?;
        if !self.args.is_empty() {
            f.write_str("(")?;
            for (i, t) in self.args.iter().enumerate() {
                if i > 0 {
                    f.write_str(",")?;
                }
                write!(f, "{t}")?;
            }
            f.write_str(")")?;
        }
        Ok(())
    }
}

/// A set of atoms plus explicit disequalities between a term of the
/// conjunction and a term outside it. Atoms and disequalities are kept
/// sorted and free of duplicates.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Default)]
pub struct Conjunction {
    atoms: Vec<Atom>,
    diseqs: Vec<(Term, Term)>,
}

impl Conjunction {
    pub fn empty() -> Conjunction {
        Conjunction::default()
    }

    pub fn new(atoms: impl IntoIterator<Item = Atom>) -> Conjunction {
        let mut atoms: Vec<Atom> = atoms.into_iter().collect();
        atoms.sort_unstable();
        atoms.dedup();
        Conjunction { atoms, diseqs: Vec::new() }
    }

    /// Builds a conjunction with disequalities. Pairs already implied by
    /// object identity are dropped; returns `None` if a pair equates a term
    /// with itself.
    pub fn with_diseqs(
        atoms: impl IntoIterator<Item = Atom>,
        diseqs: impl IntoIterator<Item = (Term, Term)>,
    ) -> Option<Conjunction> {
        let mut c = Conjunction::new(atoms);
        let terms: HashSet<Term> = c.term_iter().collect();
        let mut out = Vec::new();
        for (a, b) in diseqs {
            if a == b {
                return None;
            }
            let (a, b) = normalize_pair(a, b);
            if a.is_const() && b.is_const() {
                continue;
            }
            let (ia, ib) = (terms.contains(&a), terms.contains(&b));
            if ia && ib || !ia && !ib {
                continue;
            }
            out.push((a, b));
        }
        out.sort_unstable();
        out.dedup();
        c.diseqs = out;
        Some(c)
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn diseqs(&self) -> &[(Term, Term)] {
        &self.diseqs
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty() && self.diseqs.is_empty()
    }

    pub fn is_ground(&self) -> bool {
        self.atoms.iter().all(Atom::is_ground)
    }

    pub fn contains(&self, atom: &Atom) -> bool {
        self.atoms.binary_search(atom).is_ok()
    }

    pub fn is_subset_of(&self, other: &Conjunction) -> bool {
        self.atoms.iter().all(|a| other.contains(a))
    }

    fn term_iter(&self) -> impl Iterator<Item = Term> + '_ {
        self.atoms.iter().flat_map(|a| a.args.iter().copied())
    }

    /// Distinct terms of the atoms, sorted.
    pub fn terms(&self) -> Vec<Term> {
        let mut t: Vec<Term> = self.term_iter().collect();
        t.sort_unstable();
        t.dedup();
        t
    }

    pub fn vars(&self) -> BTreeSet<u32> {
        let mut v: BTreeSet<u32> = self
            .term_iter()
            .filter_map(|t| match t {
                Term::Var(v) => Some(v),
                _ => None,
            })
            .collect();
        for &(a, b) in &self.diseqs {
            for t in [a, b] {
                if let Term::Var(x) = t {
                    v.insert(x);
                }
            }
        }
        v
    }

    pub fn constants(&self) -> BTreeSet<Sym> {
        self.term_iter()
            .filter_map(|t| match t {
                Term::Const(s) => Some(s),
                _ => None,
            })
            .collect()
    }

    /// One past the largest variable id, or 0 for a variable-free conjunction.
    pub fn var_bound(&self) -> u32 {
        self.vars().iter().next_back().map_or(0, |v| v + 1)
    }

    /// Atom set union; disequalities of both sides are kept.
    pub fn union(&self, other: &Conjunction) -> Option<Conjunction> {
        Conjunction::with_diseqs(
            self.atoms.iter().chain(other.atoms.iter()).cloned(),
            self.diseqs.iter().chain(other.diseqs.iter()).copied(),
        )
    }

    /// Applies a term mapping without any object identity checks.
    pub fn map_terms(&self, mut f: impl FnMut(Term) -> Term) -> Option<Conjunction> {
        let atoms: Vec<Atom> = self.atoms.iter().map(|a| a.map(&mut f)).collect();
        let diseqs: Vec<(Term, Term)> = self.diseqs.iter().map(|&(a, b)| (f(a), f(b))).collect();
        Conjunction::with_diseqs(atoms, diseqs)
    }

    pub fn without(&self, atoms: &Conjunction) -> Conjunction {
        let kept = self.atoms.iter().filter(|a| !atoms.contains(a)).cloned();
        Conjunction::with_diseqs(kept, self.diseqs.iter().copied()).unwrap_or_default()
    }

    /// Count of atoms per predicate, used as a cheap subsumption filter.
    fn pred_counts(&self) -> SmallVec<[(Sym, u32); 6]> {
        let mut out: SmallVec<[(Sym, u32); 6]> = SmallVec::new();
        for a in &self.atoms {
            match out.last_mut() {
                Some((p, n)) if *p == a.pred => *n += 1,
                _ => out.push((a.pred, 1)),
            }
        }
        out
    }
}

fn normalize_pair(a: Term, b: Term) -> (Term, Term) {
    match (a, b) {
        (Term::Const(_), Term::Var(_)) => (b, a),
        (Term::Var(x), Term::Var(y)) if y < x => (b, a),
        _ => (a, b),
    }
}

impl fmt::Display for Conjunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("true");
        }
        let mut first = true;
        for a in &self.atoms {
            if !first {
                f.write_str(",")?;
            }
            first = false;
            write!(f, "{a}")?;
        }
        for (a, b) in &self.diseqs {
            if !first {
                f.write_str(",")?;
            }
            first = false;
            write!(f, "{a}!={b}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Default, PartialEq, Eq, Debug)]
pub struct Substitution {
    map: BTreeMap<u32, Term>,
}

impl Substitution {
    pub fn new() -> Substitution {
        Substitution::default()
    }

    pub fn bind(&mut self, var: u32, term: Term) {
        self.map.insert(var, term);
    }

    pub fn get(&self, var: u32) -> Option<Term> {
        self.map.get(&var).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, Term)> + '_ {
        self.map.iter().map(|(&v, &t)| (v, t))
    }

    pub fn term(&self, t: Term) -> Term {
        match t {
            Term::Var(v) => self.get(v).unwrap_or(t),
            c => c,
        }
    }

    pub fn atom(&self, a: &Atom) -> Atom {
        a.map(|t| self.term(t))
    }
}

impl FromIterator<(u32, Term)> for Substitution {
    fn from_iter<I: IntoIterator<Item = (u32, Term)>>(iter: I) -> Self {
        Substitution { map: iter.into_iter().collect() }
    }
}

impl fmt::Display for Substitution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, (v, t)) in self.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{}/{}", var_name(v), t)?;
        }
        f.write_str("}")
    }
}

/// Applies `subst` to `c`, refusing substitutions that identify two terms
/// of `c` or violate one of its disequalities.
pub fn apply(subst: &Substitution, c: &Conjunction) -> Result<Conjunction, TermError> {
    let mut seen: HashMap<Term, Term> = HashMap::new();
    for t in c.terms() {
        let img = subst.term(t);
        if let Some(prev) = seen.insert(img, t) {
            return Err(TermError::OIViolation(prev.to_string(), t.to_string()));
        }
    }
    for &(a, b) in c.diseqs() {
        if subst.term(a) == subst.term(b) {
            return Err(TermError::OIViolation(a.to_string(), b.to_string()));
        }
    }
    Ok(c.map_terms(|t| subst.term(t)).expect("disequalities checked above"))
}

struct Matcher<'a> {
    general: &'a Conjunction,
    specific: &'a Conjunction,
    order: Vec<usize>,
    var_ids: Vec<u32>,
    binding: Vec<Option<Term>>,
    used: SmallVec<[Term; 8]>,
}

impl<'a> Matcher<'a> {
    fn new(general: &'a Conjunction, specific: &'a Conjunction) -> Matcher<'a> {
        let var_ids: Vec<u32> = general
            .terms()
            .into_iter()
            .filter_map(|t| match t {
                Term::Var(v) => Some(v),
                _ => None,
            })
            .collect();
        let mut used: SmallVec<[Term; 8]> = general.term_iter().filter(|t| t.is_const()).collect();
        used.sort_unstable();
        used.dedup();
        let candidates = |a: &Atom| pred_range(specific, a.pred).len();

        // Greedy order: prefer atoms whose variables are already bound, then
        // atoms with fewer candidates.
        let mut order = Vec::with_capacity(general.len());
        let mut bound: SmallVec<[Term; 8]> = SmallVec::new();
        let mut left: Vec<usize> = (0..general.len()).collect();
        while !left.is_empty() {
            let (pos, _) = left
                .iter()
                .enumerate()
                .min_by_key(|(_, &i)| {
                    let a = &general.atoms[i];
                    let free = a.args.iter().filter(|t| t.is_var() && !bound.contains(t)).count();
                    (free, candidates(a), i)
                })
                .unwrap();
            let i = left.remove(pos);
            bound.extend(general.atoms[i].args.iter().copied());
            order.push(i);
        }
        Matcher {
            general,
            specific,
            order,
            binding: vec![None; var_ids.len()],
            var_ids,
            used,
        }
    }

    fn slot(&self, v: u32) -> usize {
        self.var_ids.binary_search(&v).expect("variable of general side")
    }

    fn image(&self, t: Term) -> Term {
        match t {
            Term::Var(v) => self.binding[self.slot(v)].unwrap_or(t),
            c => c,
        }
    }

    fn diseqs_hold(&self) -> bool {
        self.general.diseqs.iter().all(|&(a, b)| {
            let (ia, ib) = (self.image(a), self.image(b));
            if ia == ib {
                return false;
            }
            if ia.is_const() && ib.is_const() {
                return true;
            }
            // The specific side must itself guarantee the disequality.
            (self.specific.term_iter().any(|t| t == ia) && self.specific.term_iter().any(|t| t == ib))
                || self.specific.diseqs.binary_search(&normalize_pair(ia, ib)).is_ok()
        })
    }

    fn run<F: FnMut(&Substitution) -> ControlFlow<()>>(&mut self, depth: usize, f: &mut F) -> ControlFlow<()> {
        if depth == self.order.len() {
            if !self.diseqs_hold() {
                return ControlFlow::Continue(());
            }
            let theta: Substitution = self
                .var_ids
                .iter()
                .zip(&self.binding)
                .filter_map(|(&v, b)| b.map(|t| (v, t)))
                .collect();
            return f(&theta);
        }
        let atom = &self.general.atoms[self.order[depth]];
        let range = pred_range(self.specific, atom.pred);
        let specific = self.specific;
        'cand: for cand in &specific.atoms[range] {
            if cand.args.len() != atom.args.len() {
                continue;
            }
            let mut newly: SmallVec<[usize; 4]> = SmallVec::new();
            for (&g, &s) in atom.args.iter().zip(cand.args.iter()) {
                let ok = match g {
                    Term::Const(_) => g == s,
                    Term::Var(v) => {
                        let slot = self.slot(v);
                        match self.binding[slot] {
                            Some(b) => b == s,
                            None if self.used.contains(&s) => false,
                            None => {
                                self.binding[slot] = Some(s);
                                self.used.push(s);
                                newly.push(slot);
                                true
                            }
                        }
                    }
                };
                if !ok {
                    self.undo(&newly);
                    continue 'cand;
                }
            }
            let flow = self.run(depth + 1, f);
            self.undo(&newly);
            flow?;
        }
        ControlFlow::Continue(())
    }

    fn undo(&mut self, slots: &[usize]) {
        for &slot in slots {
            if let Some(t) = self.binding[slot].take() {
                if let Some(p) = self.used.iter().rposition(|&u| u == t) {
                    self.used.swap_remove(p);
                }
            }
        }
    }
}

fn pred_range(c: &Conjunction, pred: Sym) -> std::ops::Range<usize> {
    let lo = c.atoms.partition_point(|a| a.pred < pred);
    let hi = c.atoms.partition_point(|a| a.pred <= pred);
    lo..hi
}

fn may_subsume(general: &Conjunction, specific: &Conjunction) -> bool {
    if general.len() > specific.len() {
        return false;
    }
    let sc = specific.pred_counts();
    general.pred_counts().iter().all(|(p, n)| sc.iter().any(|(q, m)| q == p && m >= n))
}

/// Calls `f` for every substitution θ with general·θ ⊆ specific under
/// object identity, in a fixed order, until `f` breaks.
pub fn for_each_subsumption<F>(general: &Conjunction, specific: &Conjunction, mut f: F)
where
    F: FnMut(&Substitution) -> ControlFlow<()>,
{
    if !may_subsume(general, specific) {
        return;
    }
    let mut m = Matcher::new(general, specific);
    let _ = m.run(0, &mut f);
}

/// First witness θ with general·θ ⊆ specific, if any.
pub fn oi_subsumes(general: &Conjunction, specific: &Conjunction) -> Option<Substitution> {
    let mut out = None;
    for_each_subsumption(general, specific, |th| {
        out = Some(th.clone());
        ControlFlow::Break(())
    });
    out
}

pub fn subsumes(general: &Conjunction, specific: &Conjunction) -> bool {
    let mut found = false;
    for_each_subsumption(general, specific, |_| {
        found = true;
        ControlFlow::Break(())
    });
    found
}

fn check_apart(a: &Conjunction, b: &Conjunction) -> Result<(), TermError> {
    let shared: Vec<String> = a.vars().intersection(&b.vars()).map(|&v| var_name(v)).collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(TermError::SharedVariables(shared.join(", ")))
    }
}

/// Most general θ with a·θ = b·θ that is injective on the terms of each
/// side. Variables of `a` are bound to the matching terms of `b`.
pub fn unify(a: &Conjunction, b: &Conjunction) -> Result<Option<Substitution>, TermError> {
    check_apart(a, b)?;
    if a.len() != b.len() || a.pred_counts() != b.pred_counts() {
        return Ok(None);
    }
    let a_terms: HashSet<Term> = a.term_iter().collect();
    let b_terms: HashSet<Term> = b.term_iter().collect();
    let mut st = UnifyState {
        a,
        b,
        a_terms,
        b_terms,
        fwd: HashMap::new(),
        back: HashMap::new(),
        used: vec![false; b.len()],
    };
    let Some(pairs) = st.search(0) else { return Ok(None) };
    let mut theta = Substitution::new();
    for (x, y) in pairs {
        match (x, y) {
            (Term::Const(_), Term::Var(v)) => theta.bind(v, x),
            (Term::Var(v), _) => theta.bind(v, y),
            _ => {}
        }
    }
    let check = |c: &Conjunction| apply(&theta, c);
    if check(a)? != check(b)? {
        return Ok(None);
    }
    Ok(Some(theta))
}

struct UnifyState<'a> {
    a: &'a Conjunction,
    b: &'a Conjunction,
    a_terms: HashSet<Term>,
    b_terms: HashSet<Term>,
    fwd: HashMap<Term, Term>,
    back: HashMap<Term, Term>,
    used: Vec<bool>,
}

impl UnifyState<'_> {
    fn pair_ok(&self, x: Term, y: Term) -> bool {
        if let Some(&p) = self.fwd.get(&x) {
            return p == y;
        }
        if let Some(&p) = self.back.get(&y) {
            return p == x;
        }
        match (x, y) {
            (Term::Const(_), Term::Const(_)) => x == y,
            (Term::Const(_), Term::Var(_)) => !self.b_terms.contains(&x),
            (Term::Var(_), Term::Const(_)) => !self.a_terms.contains(&y),
            _ => true,
        }
    }

    fn search(&mut self, i: usize) -> Option<Vec<(Term, Term)>> {
        if i == self.a.len() {
            let mut pairs: Vec<(Term, Term)> = self.fwd.iter().map(|(&x, &y)| (x, y)).collect();
            pairs.sort_unstable();
            return Some(pairs);
        }
        let atom = &self.a.atoms[i];
        for j in pred_range(self.b, atom.pred) {
            if self.used[j] {
                continue;
            }
            let cand = &self.b.atoms[j];
            let mut added = Vec::new();
            let mut ok = true;
            for (&x, &y) in atom.args.iter().zip(cand.args.iter()) {
                if !self.pair_ok(x, y) {
                    ok = false;
                    break;
                }
                if !self.fwd.contains_key(&x) {
                    self.fwd.insert(x, y);
                    self.back.insert(y, x);
                    added.push(x);
                }
            }
            if ok {
                self.used[j] = true;
                if let Some(r) = self.search(i + 1) {
                    return Some(r);
                }
                self.used[j] = false;
            }
            for x in added {
                if let Some(y) = self.fwd.remove(&x) {
                    self.back.remove(&y);
                }
            }
        }
        None
    }
}

/// Limits applied while enumerating merges. Branches are cut as soon as
/// no completion can satisfy them.
#[derive(Default, Clone, Copy)]
pub struct MergeLimits<'a> {
    pub max_terms: Option<usize>,
    /// Rejects a partial union. Must be monotone: if it rejects a
    /// conjunction it rejects every superset.
    pub reject: Option<&'a dyn Fn(&Conjunction) -> bool>,
}

/// Enumerates every partial injective identification between the terms of
/// `a` and `b` that are not already shared, and returns the union of the
/// two identified conjunctions for each. Terms common to both sides are
/// identified by construction.
pub fn merges(a: &Conjunction, b: &Conjunction) -> Vec<Conjunction> {
    merges_limited(a, b, MergeLimits::default())
}

/// As [`merges`], skipping unions that exceed `limits`.
pub fn merges_limited(a: &Conjunction, b: &Conjunction, limits: MergeLimits) -> Vec<Conjunction> {
    let ta = a.terms();
    let tb = b.terms();
    let sb: HashSet<Term> = tb.iter().copied().collect();
    let sa: HashSet<Term> = ta.iter().copied().collect();
    let fa: Vec<Term> = ta.iter().copied().filter(|t| !sb.contains(t)).collect();
    let fb: Vec<Term> = tb.iter().copied().filter(|t| !sa.contains(t)).collect();
    let shared = ta.len() - fa.len();
    let mut m = MergeRun {
        a,
        b,
        fa,
        fb,
        used: Vec::new(),
        pairs: Vec::new(),
        limits,
        total_terms: ta.len() + tb.len() - shared,
        out: Vec::new(),
    };
    m.used = vec![false; m.fb.len()];
    m.rec(0);
    m.out
}

struct MergeRun<'a, 'l> {
    a: &'a Conjunction,
    b: &'a Conjunction,
    fa: Vec<Term>,
    fb: Vec<Term>,
    used: Vec<bool>,
    pairs: Vec<(Term, Term)>,
    limits: MergeLimits<'l>,
    total_terms: usize,
    out: Vec<Conjunction>,
}

impl MergeRun<'_, '_> {
    fn maps(&self) -> (HashMap<Term, Term>, HashMap<Term, Term>) {
        let mut ma: HashMap<Term, Term> = HashMap::new();
        let mut mb: HashMap<Term, Term> = HashMap::new();
        for &(x, y) in &self.pairs {
            if y.is_const() {
                ma.insert(x, y);
            } else {
                mb.insert(y, x);
            }
        }
        (ma, mb)
    }

    /// Union of the atoms whose terms are already final after deciding
    /// the first `i` terms of `fa`.
    fn settled(&self, i: usize) -> Conjunction {
        let open_a = &self.fa[i..];
        // An unused term of `b` ends up either as itself or as one of the
        // undecided terms of `a`, so it stays distinct from every settled
        // term. Only a later renaming to a constant could change a match.
        let const_pending = open_a.iter().any(|t| t.is_const());
        let open_b = |t: &Term| {
            const_pending && t.is_var() && self.fb.iter().zip(&self.used).any(|(f, &u)| !u && f == t)
        };
        let map_a = |t: Term| self.pairs.iter().find(|p| p.0 == t && p.1.is_const()).map_or(t, |p| p.1);
        let map_b = |t: Term| self.pairs.iter().find(|p| p.1 == t && p.1.is_var()).map_or(t, |p| p.0);
        let atoms_a = self
            .a
            .atoms
            .iter()
            .filter(|at| !at.args.iter().any(|t| open_a.contains(t)))
            .map(|at| at.map(map_a));
        let atoms_b = self.b.atoms.iter().filter(|at| !at.args.iter().any(open_b)).map(|at| at.map(map_b));
        Conjunction::new(atoms_a.chain(atoms_b))
    }

    fn rec(&mut self, i: usize) {
        if let Some(max) = self.limits.max_terms {
            let reachable = self.pairs.len() + (self.fa.len() - i).min(self.used.iter().filter(|u| !**u).count());
            if self.total_terms.saturating_sub(reachable) > max {
                return;
            }
        }
        if let Some(reject) = self.limits.reject {
            if reject(&self.settled(i)) {
                return;
            }
        }
        if i == self.fa.len() {
            let (ma, mb) = self.maps();
            let ra = self.a.map_terms(|t| *ma.get(&t).unwrap_or(&t));
            let rb = self.b.map_terms(|t| *mb.get(&t).unwrap_or(&t));
            if let (Some(ra), Some(rb)) = (ra, rb) {
                // The settled part checked above is the whole union here.
                if let Some(u) = ra.union(&rb) {
                    self.out.push(u);
                }
            }
            return;
        }
        self.rec(i + 1);
        let x = self.fa[i];
        for j in 0..self.fb.len() {
            let y = self.fb[j];
            if self.used[j] || (x.is_const() && y.is_const()) {
                continue;
            }
            let forbidden = self.a.diseqs.binary_search(&normalize_pair(x, y)).is_ok()
                || self.b.diseqs.binary_search(&normalize_pair(x, y)).is_ok();
            if forbidden {
                continue;
            }
            self.used[j] = true;
            self.pairs.push((x, y));
            self.rec(i + 1);
            self.pairs.pop();
            self.used[j] = false;
        }
    }
}

/// Removes renaming duplicates and every conjunction properly subsumed by
/// another one in the list. Order of the survivors follows the input.
pub fn prune_subsumed(items: Vec<Conjunction>) -> Vec<Conjunction> {
    let mut seen = HashSet::new();
    let items: Vec<Conjunction> = items.into_iter().filter(|c| seen.insert(canonical_form(c))).collect();
    let keep: Vec<bool> = (0..items.len())
        .map(|i| !(0..items.len()).any(|j| j != i && subsumes(&items[j], &items[i])))
        .collect();
    items.into_iter().zip(keep).filter_map(|(c, k)| k.then_some(c)).collect()
}

/// Maximally general specialisations of two standardized-apart conjunctions.
pub fn mgs(a: &Conjunction, b: &Conjunction) -> Result<Vec<Conjunction>, TermError> {
    check_apart(a, b)?;
    Ok(prune_subsumed(merges(a, b)))
}

/// Renames the variables of `c` that clash with `avoid` to fresh ids above
/// every variable of both.
pub fn standardize_apart(c: &Conjunction, avoid: &BTreeSet<u32>) -> Conjunction {
    let vars = c.vars();
    if vars.is_disjoint(avoid) {
        return c.clone();
    }
    let mut next = avoid.iter().chain(vars.iter()).max().map_or(0, |m| m + 1);
    let mut map = HashMap::new();
    for &v in vars.intersection(avoid) {
        map.insert(v, next);
        next += 1;
    }
    c.map_terms(|t| match t {
        Term::Var(v) => Term::Var(*map.get(&v).unwrap_or(&v)),
        t => t,
    })
    .expect("renaming keeps disequalities")
}

/// Renames all variables of `c` to `start`, `start + 1`, ... in order of
/// their ids. Returns the renamed conjunction and the next free id.
pub fn shift_vars(c: &Conjunction, start: u32) -> (Conjunction, u32) {
    let vars: Vec<u32> = c.vars().into_iter().collect();
    let renamed = c
        .map_terms(|t| match t {
            Term::Var(v) => Term::Var(start + vars.binary_search(&v).unwrap() as u32),
            t => t,
        })
        .expect("renaming keeps disequalities");
    (renamed, start + vars.len() as u32)
}

pub fn term_count(c: &Conjunction) -> usize {
    c.terms().len()
}

/// Deterministic representative of the renaming class of `c`: variables are
/// numbered 0, 1, ... so that the sorted atom list is lexicographically
/// least among all numberings.
pub fn canonical_form(c: &Conjunction) -> Conjunction {
    let vars: Vec<u32> = c.vars().into_iter().collect();
    if vars.is_empty() {
        return c.clone();
    }
    let mut canon = Canon::new(c, vars);
    let colors = canon.refine(vec![0; canon.vars.len()]);
    canon.search(colors);
    canon.best.expect("at least one leaf")
}

struct Canon<'a> {
    c: &'a Conjunction,
    vars: Vec<u32>,
    best: Option<Conjunction>,
}

#[derive(PartialEq, Eq, PartialOrd, Ord, Clone, Hash)]
enum Slot {
    Const(Sym),
    Var(usize),
    Me,
}

impl<'a> Canon<'a> {
    fn new(c: &'a Conjunction, vars: Vec<u32>) -> Canon<'a> {
        Canon { c, vars, best: None }
    }

    fn idx(&self, v: u32) -> usize {
        self.vars.binary_search(&v).unwrap()
    }

    /// Colour refinement: a variable's colour is refined by the multiset of
    /// atoms it occurs in, seen through the current colours.
    fn refine(&self, mut colors: Vec<usize>) -> Vec<usize> {
        loop {
            let classes = distinct(&colors);
            let mut sigs: Vec<(usize, Vec<(Sym, Vec<Slot>)>)> = Vec::with_capacity(self.vars.len());
            for (i, &v) in self.vars.iter().enumerate() {
                let mut occ: Vec<(Sym, Vec<Slot>)> = Vec::new();
                for a in &self.c.atoms {
                    if !a.args.contains(&Term::Var(v)) {
                        continue;
                    }
                    let slots = a
                        .args
                        .iter()
                        .map(|&t| match t {
                            Term::Var(w) if w == v => Slot::Me,
                            Term::Var(w) => Slot::Var(colors[self.idx(w)]),
                            Term::Const(s) => Slot::Const(s),
                        })
                        .collect();
                    occ.push((a.pred, slots));
                }
                for &(x, y) in &self.c.diseqs {
                    let other = if x == Term::Var(v) {
                        y
                    } else if y == Term::Var(v) {
                        x
                    } else {
                        continue;
                    };
                    let slot = match other {
                        Term::Const(s) => Slot::Const(s),
                        Term::Var(w) => Slot::Var(colors[self.idx(w)]),
                    };
                    occ.push((Sym(u32::MAX), vec![slot]));
                }
                occ.sort();
                sigs.push((colors[i], occ));
            }
            let mut sorted: Vec<&(usize, Vec<(Sym, Vec<Slot>)>)> = sigs.iter().collect();
            sorted.sort();
            sorted.dedup();
            let next: Vec<usize> = sigs.iter().map(|s| sorted.binary_search(&s).unwrap()).collect();
            if distinct(&next) == classes {
                return next;
            }
            colors = next;
        }
    }

    fn search(&mut self, colors: Vec<usize>) {
        let n = self.vars.len();
        // Smallest colour shared by several variables.
        let mut count = vec![0usize; n];
        for &c in &colors {
            count[c] += 1;
        }
        let Some(cell) = (0..n).find(|&c| count[c] > 1) else {
            let numbering: HashMap<u32, u32> =
                self.vars.iter().zip(&colors).map(|(&v, &c)| (v, c as u32)).collect();
            let leaf = self
                .c
                .map_terms(|t| match t {
                    Term::Var(v) => Term::Var(numbering[&v]),
                    t => t,
                })
                .unwrap();
            if self.best.as_ref().is_none_or(|b| leaf < *b) {
                self.best = Some(leaf);
            }
            return;
        };
        let members: Vec<usize> = (0..n).filter(|&i| colors[i] == cell).collect();
        let mut tried: Vec<usize> = Vec::new();
        for &m in &members {
            if tried.iter().any(|&t| self.swap_is_automorphism(t, m)) {
                continue;
            }
            tried.push(m);
            // Individualise m: it keeps colour `cell`, the rest of its cell
            // moves up by one.
            let split: Vec<usize> = colors
                .iter()
                .enumerate()
                .map(|(i, &c)| if c > cell || (c == cell && i != m) { c + 1 } else { c })
                .collect();
            let refined = self.refine(split);
            self.search(refined);
        }
    }

    fn swap_is_automorphism(&self, i: usize, j: usize) -> bool {
        let (x, y) = (Term::Var(self.vars[i]), Term::Var(self.vars[j]));
        let swapped = self.c.map_terms(|t| {
            if t == x {
                y
            } else if t == y {
                x
            } else {
                t
            }
        });
        swapped.as_ref() == Some(self.c)
    }
}

fn distinct(colors: &[usize]) -> usize {
    let mut c = colors.to_vec();
    c.sort_unstable();
    c.dedup();
    c.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::syntax::VarScope;

    fn conj(s: &mut VarScope, text: &str) -> Conjunction {
        s.conjunction(text).unwrap()
    }

    #[test]
    fn apply_replaces_and_rejects_collapse() {
        let mut s = VarScope::new();
        let c = conj(&mut s, "cl(X), on(Y,Z)");
        let theta: Substitution =
            [(s.var("X"), Term::constant("x")), (s.var("Y"), Term::constant("y"))].into_iter().collect();
        let out = apply(&theta, &c).unwrap();
        assert_eq!(out, conj(&mut s, "cl(x), on(y,Z)"));
        assert_eq!(apply(&Substitution::new(), &c).unwrap(), c);
        let c2 = conj(&mut s, "cl(X), cl(Y)");
        let bad: Substitution = [(s.var("X"), Term::Var(s.var("Y")))].into_iter().collect();
        assert!(matches!(apply(&bad, &c2), Err(TermError::OIViolation(..))));
    }

    #[test]
    fn subsumption_examples() {
        let mut s = VarScope::new();
        let g = conj(&mut s, "cl(A), cl(C), on(A,B)");
        let sp = conj(&mut s, "cl(bl1), cl(bl3), on(bl1,bl2)");
        let th = oi_subsumes(&g, &sp).unwrap();
        assert_eq!(th.get(s.var("A")), Some(Term::constant("bl1")));
        assert_eq!(th.get(s.var("B")), Some(Term::constant("bl2")));
        assert_eq!(th.get(s.var("C")), Some(Term::constant("bl3")));
        let ab = conj(&mut s, "on(a,b)");
        assert_eq!(oi_subsumes(&ab, &ab), Some(Substitution::new()));
        assert!(oi_subsumes(&conj(&mut s, "cl(X), cl(Y)"), &conj(&mut s, "cl(a)")).is_none());
    }

    #[test]
    fn six_groundings_of_example_state() {
        // cl(A),cl(C),on(A,B) over three blocks: A, B, C take distinct values.
        let mut s = VarScope::new();
        let g = conj(&mut s, "cl(A), cl(C), on(A,B)");
        let names = ["bl1", "bl2", "bl3"];
        let mut count = 0;
        for a in names {
            for b in names {
                for c in names {
                    if a == b || b == c || a == c {
                        continue;
                    }
                    let st = conj(&mut s, &format!("cl({a}), cl({c}), on({a},{b})"));
                    assert!(subsumes(&g, &st));
                    count += 1;
                }
            }
        }
        assert_eq!(count, 6);
    }

    #[test]
    fn constant_blocks_variable_binding() {
        // X may not become `a` because `a` already names another object.
        let mut s = VarScope::new();
        let g = conj(&mut s, "on(X,a)");
        assert!(!subsumes(&g, &conj(&mut s, "on(a,a)")));
        assert!(subsumes(&g, &conj(&mut s, "on(b,a)")));
    }

    #[test]
    fn diseq_respected_by_subsumption() {
        let mut s = VarScope::new();
        let g = s.conjunction("cl(X), X != c").unwrap();
        assert!(!subsumes(&g, &conj(&mut s, "cl(c)")));
        assert!(subsumes(&g, &conj(&mut s, "cl(d)")));
        assert!(subsumes(&g, &conj(&mut s, "cl(d), on(c,e)")));
        // An abstract specific state must guarantee the disequality itself.
        assert!(!subsumes(&g, &conj(&mut s, "cl(Y)")));
        assert!(subsumes(&g, &conj(&mut s, "cl(Y), on(c,e)")));
    }

    #[test]
    fn unify_examples() {
        let mut s = VarScope::new();
        let a = conj(&mut s, "cl(X), on(y,Z)");
        let b = conj(&mut s, "cl(x), on(Y,Z1)");
        let th = unify(&a, &b).unwrap().unwrap();
        assert_eq!(th.get(s.var("X")), Some(Term::constant("x")));
        assert_eq!(th.get(s.var("Y")), Some(Term::constant("y")));
        assert_eq!(th.get(s.var("Z")), Some(Term::Var(s.var("Z1"))));
        assert_eq!(apply(&th, &a).unwrap(), apply(&th, &b).unwrap());
        let ab = conj(&mut s, "on(a,b)");
        assert_eq!(unify(&ab, &ab).unwrap(), Some(Substitution::new()));
        assert_eq!(unify(&conj(&mut s, "cl(a)"), &conj(&mut s, "on(V,W)")).unwrap(), None);
        let shared = conj(&mut s, "cl(X)");
        assert!(matches!(unify(&shared, &shared), Err(TermError::SharedVariables(_))));
    }

    #[test]
    fn mgs_without_constraints_has_three_results() {
        let mut s = VarScope::new();
        let a = conj(&mut s, "cl(X)");
        let b = conj(&mut s, "on(X1,Y1)");
        let got: BTreeSet<Conjunction> = mgs(&a, &b).unwrap().iter().map(canonical_form).collect();
        let want: BTreeSet<Conjunction> = ["cl(X), on(X,Y)", "cl(X), on(Y,Z)", "cl(X), on(Y,X)"]
            .iter()
            .map(|t| canonical_form(&conj(&mut s, t)))
            .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn mgs_of_variants_and_constants() {
        let mut s = VarScope::new();
        let a = conj(&mut s, "cl(X), on(X,Y)");
        let b = conj(&mut s, "cl(U), on(U,V)");
        let got = mgs(&a, &b).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(canonical_form(&got[0]), canonical_form(&a));
        let got = mgs(&conj(&mut s, "on(a,b)"), &conj(&mut s, "on(c,d)")).unwrap();
        assert_eq!(got, vec![conj(&mut s, "on(a,b), on(c,d)")]);
    }

    #[test]
    fn standardize_apart_renames_clashes_only() {
        let mut s = VarScope::new();
        let c = conj(&mut s, "cl(X)");
        let avoid: BTreeSet<u32> = [s.var("X")].into();
        let out = standardize_apart(&c, &avoid);
        assert!(out.vars().is_disjoint(&avoid));
        assert_eq!(canonical_form(&out), canonical_form(&c));
        let g = conj(&mut s, "on(a,b)");
        assert_eq!(standardize_apart(&g, &avoid), g);
    }

    #[test]
    fn canonical_examples() {
        let mut s = VarScope::new();
        assert_eq!(canonical_form(&conj(&mut s, "cl(Z)")), canonical_form(&conj(&mut s, "cl(Q)")));
        assert_eq!(
            canonical_form(&conj(&mut s, "on(A,B), cl(A)")),
            canonical_form(&conj(&mut s, "cl(X), on(X,Y)"))
        );
        assert_eq!(canonical_form(&conj(&mut s, "cl(a)")), conj(&mut s, "cl(a)"));
        assert_ne!(
            canonical_form(&conj(&mut s, "cl(X), on(X,Y)")),
            canonical_form(&conj(&mut s, "cl(Y), on(X,Y)"))
        );
    }

    #[test]
    fn canonical_handles_symmetric_states() {
        let mut s = VarScope::new();
        let a = conj(&mut s, "cl(A), cl(B), cl(C), on(A,D), on(B,E)");
        let b = conj(&mut s, "cl(P), on(P,Q), cl(R), cl(S1), on(S1,T1)");
        assert_eq!(canonical_form(&a), canonical_form(&b));
    }

    #[test]
    fn term_count_examples() {
        let mut s = VarScope::new();
        assert_eq!(term_count(&conj(&mut s, "cl(A), cl(C), on(A,B)")), 3);
        assert_eq!(term_count(&Conjunction::empty()), 0);
        assert_eq!(term_count(&conj(&mut s, "cl(a), cl(b), on(a,Z)")), 3);
    }
}
