//! Tokenizer and the shared pieces of the model and formula grammars.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use crate::term::{Atom, Conjunction, Sym, Term};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("line {line}, column {col}: {msg}")]
pub struct SyntaxError {
    pub line: usize,
    pub col: usize,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Ident(String),
    Num(f64),
    LParen,
    RParen,
    LBrack,
    RBrack,
    Comma,
    Dot,
    Semi,
    Colon,
    Amp,
    Bar,
    Tilde,
    Slash,
    Arrow,
    Le,
    Lt,
    Ge,
    Gt,
    Neq,
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Tok::Ident(s) => return write!(f, "`{s}`"),
            Tok::Num(n) => return write!(f, "`{n}`"),
            Tok::LParen => "`(`",
            Tok::RParen => "`)`",
            Tok::LBrack => "`[`",
            Tok::RBrack => "`]`",
            Tok::Comma => "`,`",
            Tok::Dot => "`.`",
            Tok::Semi => "`;`",
            Tok::Colon => "`:`",
            Tok::Amp => "`&`",
            Tok::Bar => "`|`",
            Tok::Tilde => "`~`",
            Tok::Slash => "`/`",
            Tok::Arrow => "`->`",
            Tok::Le => "`<=`",
            Tok::Lt => "`<`",
            Tok::Ge => "`>=`",
            Tok::Gt => "`>`",
            Tok::Neq => "`!=`",
            Tok::Eof => "end of input",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct Token {
    pub tok: Tok,
    pub line: usize,
    pub col: usize,
}

pub fn tokenize(text: &str) -> Result<Vec<Token>, SyntaxError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0, 1, 1);
    let err = |line, col, msg: String| SyntaxError { line, col, msg };
    while i < chars.len() {
        let c = chars[i];
        let (tl, tc) = (line, col);
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c == '%' {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        let tok = if c.is_alphabetic() || c == '_' {
            while i < chars.len() {
                let d = chars[i];
                let hyphen = d == '-' && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
                if d.is_alphanumeric() || d == '_' || hyphen {
                    i += 1;
                } else {
                    break;
                }
            }
            Tok::Ident(chars[start..i].iter().collect())
        } else if c.is_ascii_digit() {
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if i + 1 < chars.len() && chars[i] == '.' && chars[i + 1].is_ascii_digit() {
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '-' || chars[j] == '+') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let s: String = chars[start..i].iter().collect();
            let n = s.parse::<f64>().map_err(|e| err(tl, tc, format!("bad number `{s}`: {e}")))?;
            Tok::Num(n)
        } else {
            let next = chars.get(i + 1).copied();
            let (tok, len) = match (c, next) {
                ('-', Some('>')) => (Tok::Arrow, 2),
                ('<', Some('=')) => (Tok::Le, 2),
                ('>', Some('=')) => (Tok::Ge, 2),
                ('!', Some('=')) => (Tok::Neq, 2),
                ('<', _) => (Tok::Lt, 1),
                ('>', _) => (Tok::Gt, 1),
                ('(', _) => (Tok::LParen, 1),
                (')', _) => (Tok::RParen, 1),
                ('[', _) => (Tok::LBrack, 1),
                (']', _) => (Tok::RBrack, 1),
                (',', _) => (Tok::Comma, 1),
                ('.', _) => (Tok::Dot, 1),
                (';', _) => (Tok::Semi, 1),
                (':', _) => (Tok::Colon, 1),
                ('&', _) => (Tok::Amp, 1),
                ('|', _) => (Tok::Bar, 1),
                ('~', _) => (Tok::Tilde, 1),
                ('/', _) => (Tok::Slash, 1),
                _ => return Err(err(tl, tc, format!("unexpected character `{c}`"))),
            };
            i += len;
            tok
        };
        col += i - start;
        out.push(Token { tok, line: tl, col: tc });
    }
    out.push(Token { tok: Tok::Eof, line, col });
    Ok(out)
}

/// Maps variable names to ids within one rule, formula or test.
#[derive(Debug, Clone, Default)]
pub struct VarScope {
    ids: HashMap<String, u32>,
    names: Vec<String>,
}

impl VarScope {
    pub fn new() -> VarScope {
        VarScope::default()
    }

    /// Id of the named variable, allocated on first use.
    pub fn var(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.ids.insert(name.to_string(), id);
        self.names.push(name.to_string());
        id
    }

    /// A fresh variable that no name maps to.
    pub fn fresh(&mut self) -> u32 {
        let id = self.names.len() as u32;
        self.names.push(format!("_G{id}"));
        id
    }

    pub fn next_id(&self) -> u32 {
        self.names.len() as u32
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn conjunction(&mut self, text: &str) -> Result<Conjunction, SyntaxError> {
        let toks = tokenize(text)?;
        let mut p = Parser::new(&toks);
        let c = p.conjunction(self)?;
        p.expect(Tok::Eof)?;
        Ok(c)
    }

    pub fn atom(&mut self, text: &str) -> Result<Atom, SyntaxError> {
        let toks = tokenize(text)?;
        let mut p = Parser::new(&toks);
        let a = p.atom(self)?;
        p.expect(Tok::Eof)?;
        Ok(a)
    }

    pub fn term_text(&self, t: Term) -> String {
        match t {
            Term::Var(v) => match self.name(v) {
                Some(n) if !n.starts_with('_') => n.to_string(),
                _ => crate::term::var_name(v),
            },
            Term::Const(s) => s.to_string(),
        }
    }

    pub fn atom_text(&self, a: &Atom) -> String {
        if a.args.is_empty() {
            return a.pred.to_string();
        }
        let args: Vec<String> = a.args.iter().map(|&t| self.term_text(t)).collect();
        format!("{}({})", a.pred, args.join(","))
    }

    /// Renders with the names of this scope, atoms separated by `sep`.
    pub fn conj_text(&self, c: &Conjunction, sep: &str) -> String {
        if c.is_empty() {
            return "true".into();
        }
        let mut parts: Vec<String> = c.atoms().iter().map(|a| self.atom_text(a)).collect();
        parts.extend(c.diseqs().iter().map(|&(a, b)| format!("{} != {}", self.term_text(a), self.term_text(b))));
        parts.join(sep)
    }
}

/// Parses a conjunction with a throwaway scope.
pub fn parse_conjunction(text: &str) -> Result<Conjunction, SyntaxError> {
    VarScope::new().conjunction(text)
}

pub struct Parser<'a> {
    toks: &'a [Token],
    pos: usize,
}

impl<'a> Parser<'a> {
    pub fn new(toks: &'a [Token]) -> Parser<'a> {
        Parser { toks, pos: 0 }
    }

    pub fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    pub fn peek_at(&self, k: usize) -> &Tok {
        &self.toks[(self.pos + k).min(self.toks.len() - 1)].tok
    }

    pub fn here(&self) -> &Token {
        &self.toks[self.pos]
    }

    pub fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].tok.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    pub fn error(&self, msg: impl Into<String>) -> SyntaxError {
        let t = self.here();
        SyntaxError { line: t.line, col: t.col, msg: msg.into() }
    }

    pub fn eat(&mut self, tok: &Tok) -> bool {
        if self.peek() == tok {
            self.bump();
            true
        } else {
            false
        }
    }

    pub fn expect(&mut self, tok: Tok) -> Result<(), SyntaxError> {
        if self.eat(&tok) {
            Ok(())
        } else {
            Err(self.error(format!("expected {tok}, found {}", self.peek())))
        }
    }

    pub fn ident(&mut self) -> Result<String, SyntaxError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.bump();
                Ok(s)
            }
            t => Err(self.error(format!("expected identifier, found {t}"))),
        }
    }

    pub fn is_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == kw)
    }

    pub fn number(&mut self) -> Result<f64, SyntaxError> {
        match self.peek().clone() {
            Tok::Num(n) => {
                self.bump();
                Ok(n)
            }
            t => Err(self.error(format!("expected number, found {t}"))),
        }
    }

    pub fn term(&mut self, scope: &mut VarScope) -> Result<Term, SyntaxError> {
        let name = match self.peek().clone() {
            Tok::Ident(s) => s,
            Tok::Num(n) if n.fract() == 0.0 && n >= 0.0 => format!("{}", n as u64),
            t => return Err(self.error(format!("expected term, found {t}"))),
        };
        self.bump();
        Ok(term_of(&name, scope))
    }

    pub fn atom(&mut self, scope: &mut VarScope) -> Result<Atom, SyntaxError> {
        let name = self.ident()?;
        if !starts_lower(&name) {
            return Err(self.error(format!("predicate `{name}` must start with a lower-case letter")));
        }
        let mut args = Vec::new();
        if self.eat(&Tok::LParen) {
            loop {
                args.push(self.term(scope)?);
                if !self.eat(&Tok::Comma) {
                    break;
                }
            }
            self.expect(Tok::RParen)?;
        }
        Ok(Atom::new(Sym::intern(&name), args))
    }

    /// Comma-separated atoms and `T != T` disequalities, or `true`.
    pub fn conjunction(&mut self, scope: &mut VarScope) -> Result<Conjunction, SyntaxError> {
        if self.is_keyword("true") {
            self.bump();
            return Ok(Conjunction::empty());
        }
        let mut atoms = Vec::new();
        let mut diseqs = Vec::new();
        loop {
            if *self.peek_at(1) == Tok::Neq {
                let a = self.term(scope)?;
                self.expect(Tok::Neq)?;
                let b = self.term(scope)?;
                diseqs.push((a, b));
            } else {
                atoms.push(self.atom(scope)?);
            }
            if !self.eat(&Tok::Comma) {
                break;
            }
        }
        Conjunction::with_diseqs(atoms, diseqs).ok_or_else(|| self.error("disequality between identical terms"))
    }
}

fn starts_lower(name: &str) -> bool {
    name.chars().next().is_some_and(|c| c.is_lowercase())
}

pub fn term_of(name: &str, scope: &mut VarScope) -> Term {
    let first = name.chars().next().unwrap_or('a');
    if first.is_uppercase() || first == '_' {
        Term::Var(scope.var(name))
    } else {
        Term::constant(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_with_comment_and_numbers() {
        let toks = tokenize("rule m(A): pre p(A) ; 0.9 -> q(A). % trailing\nstate_bound 5.").unwrap();
        let kinds: Vec<Tok> = toks.into_iter().map(|t| t.tok).collect();
        assert!(kinds.contains(&Tok::Num(0.9)));
        assert!(kinds.contains(&Tok::Arrow));
        assert_eq!(kinds[kinds.len() - 3], Tok::Num(5.0));
        assert_eq!(kinds[kinds.len() - 2], Tok::Dot);
    }

    #[test]
    fn hyphenated_identifiers() {
        let toks = tokenize("can-drive(X) -> y").unwrap();
        assert_eq!(toks[0].tok, Tok::Ident("can-drive".into()));
        assert!(toks.iter().any(|t| t.tok == Tok::Arrow));
    }

    #[test]
    fn conjunction_round_trip() {
        let mut s = VarScope::new();
        let c = s.conjunction("on(A,B), cl(A), A != c").unwrap();
        let text = s.conj_text(&c, ", ");
        let mut s2 = VarScope::new();
        assert_eq!(s2.conjunction(&text).unwrap(), c);
        assert_eq!(c.diseqs().len(), 1);
    }

    #[test]
    fn error_positions() {
        let e = parse_conjunction("cl(a),\n  on(a b)").unwrap_err();
        assert_eq!((e.line, e.col), (2, 8));
    }
}
