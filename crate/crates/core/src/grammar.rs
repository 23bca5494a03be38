//! Chord grammars that expand into sectioned song plans.
//!
//! Rules have the form `Name -> alt | alt ;`. An expression is a sequence of
//! Roman-numeral chords (`V`, `ii:2`, `IV:1/2`, durations in measures),
//! nonterminal names, modulations `M5(expr)`, parenthesized groups and
//! `let x = expr in expr` bindings. A bound name is expanded once and every
//! reference to it reuses that expansion; each reference carries a subscript
//! (`x_1`, `x_2`, ... assigned in order, or written explicitly) so that its
//! melody can be a variation of the first one.
//!
//! A file with no `->` is a single expression for the start rule `S`.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{ChordSlot, MEASURES, SLOTS_PER_MEASURE};
use crate::harmony::{roman, PitchClassSet, Qualities};
use crate::tonality::Mode;
use crate::Beat;

pub const DEFAULT_START: &str = "S";
pub const DEFAULT_DEPTH_LIMIT: usize = 32;
pub const DEFAULT_SIGMA: f64 = 0.2;

const DEFAULT_GRAMMAR: &str = include_str!("../data/default.grammar");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GrammarError {
    #[error("line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("line {line}: `{name}` is neither a bound variable nor a rule")]
    Scope { name: String, line: usize },
    #[error("rule `{0}` can never finish expanding")]
    Recursion(String),
    #[error("grammar has no rules")]
    Empty,
    #[error("no rule named `{0}`")]
    UnknownStart(String),
    #[error("rule `{0}` is defined twice")]
    Duplicate(String),
    #[error("expansion exceeded depth {0}")]
    Expansion(usize),
    #[error("reading grammar: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Seq(Vec<Expr>),
    /// Zero-based scale step and length in measures.
    Chord { step: u8, measures: Beat },
    /// `Mk(inner)`: shift every degree of `inner` by `k - 1` scale steps.
    Modulate { k: u32, inner: Box<Expr> },
    Let {
        name: String,
        binding: usize,
        value: Box<Expr>,
        body: Box<Expr>,
    },
    Ref { name: String, binding: usize, subscript: u32 },
    NonTerminal(String),
}

impl Expr {
    fn visit(&self, f: &mut impl FnMut(&Expr)) {
        f(self);
        match self {
            Expr::Seq(items) => items.iter().for_each(|e| e.visit(f)),
            Expr::Modulate { inner, .. } => inner.visit(f),
            Expr::Let { value, body, .. } => {
                value.visit(f);
                body.visit(f);
            }
            _ => {}
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Seq(items) => {
                for (i, e) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" ")?;
                    }
                    match e {
                        Expr::Seq(_) => write!(f, "({e})")?,
                        _ => write!(f, "{e}")?,
                    }
                }
                Ok(())
            }
            Expr::Chord { step, measures } => {
                f.write_str(roman(step + 1))?;
                if *measures != Beat::from_integer(1) {
                    write!(f, ":{measures}")?;
                }
                Ok(())
            }
            Expr::Modulate { k, inner } => write!(f, "M{k}({inner})"),
            Expr::Let { name, value, body, .. } => write!(f, "let {name} = ({value}) in {body}"),
            Expr::Ref { name, subscript, .. } => write!(f, "{name}_{subscript}"),
            Expr::NonTerminal(n) => f.write_str(n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Production {
    pub lhs: String,
    pub alternatives: Vec<Expr>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grammar {
    pub rules: Vec<Production>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Num(u32),
    Arrow,
    Pipe,
    Semi,
    Eq,
    LParen,
    RParen,
    Colon,
    Slash,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    column: usize,
}

fn lex(text: &str) -> Result<Vec<Token>, GrammarError> {
    let mut out = Vec::new();
    for (li, line) in text.lines().enumerate() {
        let line_no = li + 1;
        let chars: Vec<char> = line.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let column = i + 1;
            let push = |out: &mut Vec<Token>, tok| out.push(Token { tok, line: line_no, column });
            match c {
                '#' => break,
                c if c.is_whitespace() => i += 1,
                '-' if chars.get(i + 1) == Some(&'>') => {
                    push(&mut out, Tok::Arrow);
                    i += 2;
                }
                '→' => {
                    push(&mut out, Tok::Arrow);
                    i += 1;
                }
                '|' | ';' | '=' | '(' | ')' | ':' | '/' => {
                    let tok = match c {
                        '|' => Tok::Pipe,
                        ';' => Tok::Semi,
                        '=' => Tok::Eq,
                        '(' => Tok::LParen,
                        ')' => Tok::RParen,
                        ':' => Tok::Colon,
                        _ => Tok::Slash,
                    };
                    push(&mut out, tok);
                    i += 1;
                }
                c if c.is_ascii_digit() => {
                    let start = i;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                    let s: String = chars[start..i].iter().collect();
                    let n = s.parse().map_err(|_| GrammarError::Parse {
                        line: line_no,
                        column,
                        message: format!("number `{s}` too large"),
                    })?;
                    push(&mut out, Tok::Num(n));
                }
                c if c.is_alphabetic() => {
                    let start = i;
                    while i < chars.len() && (chars[i].is_alphanumeric() || matches!(chars[i], '_' | '\'' | '′')) {
                        i += 1;
                    }
                    push(&mut out, Tok::Ident(chars[start..i].iter().collect()));
                }
                other => {
                    return Err(GrammarError::Parse {
                        line: line_no,
                        column,
                        message: format!("unexpected character `{other}`"),
                    })
                }
            }
        }
    }
    Ok(out)
}

fn roman_step(s: &str) -> Option<u8> {
    let upper = s.to_ascii_uppercase();
    ["I", "II", "III", "IV", "V", "VI", "VII"]
        .iter()
        .position(|r| *r == upper)
        .map(|p| p as u8)
}

fn modulation_index(s: &str) -> Option<u32> {
    let rest = s.strip_prefix('M').or_else(|| s.strip_prefix('m'))?;
    if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    rest.parse().ok().filter(|&k| k >= 1)
}

fn split_subscript(s: &str) -> Option<(&str, u32)> {
    let (base, sub) = s.rsplit_once('_')?;
    if base.is_empty() || sub.is_empty() || !sub.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    sub.parse().ok().filter(|&n| n >= 1).map(|n| (base, n))
}

struct Binding {
    name: String,
    id: usize,
    next_subscript: u32,
}

struct Parser<'a> {
    toks: &'a [Token],
    pos: usize,
    rules: BTreeSet<String>,
    scope: Vec<Binding>,
    bindings: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.tok)
    }

    fn peek_at(&self, k: usize) -> Option<&Tok> {
        self.toks.get(self.pos + k).map(|t| &t.tok)
    }

    fn here(&self) -> (usize, usize) {
        self.toks
            .get(self.pos)
            .or_else(|| self.toks.last())
            .map_or((1, 1), |t| (t.line, t.column))
    }

    fn error(&self, message: impl Into<String>) -> GrammarError {
        let (line, column) = self.here();
        GrammarError::Parse {
            line,
            column,
            message: message.into(),
        }
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), GrammarError> {
        if self.peek() == Some(&tok) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(format!("expected {what}")))
        }
    }

    fn at_seq_end(&self) -> bool {
        match self.peek() {
            None | Some(Tok::Pipe | Tok::Semi | Tok::RParen) => true,
            Some(Tok::Ident(s)) => s == "in",
            _ => false,
        }
    }

    fn seq(&mut self) -> Result<Expr, GrammarError> {
        let mut items = Vec::new();
        while !self.at_seq_end() {
            if matches!(self.peek(), Some(Tok::Ident(s)) if s == "let") {
                items.push(self.let_expr()?);
                break;
            }
            items.push(self.item()?);
        }
        if items.is_empty() {
            return Err(self.error("expected an expression"));
        }
        Ok(if items.len() == 1 { items.pop().unwrap() } else { Expr::Seq(items) })
    }

    fn let_expr(&mut self) -> Result<Expr, GrammarError> {
        self.pos += 1;
        let name = match self.peek() {
            Some(Tok::Ident(s)) if roman_step(s).is_none() && s != "let" && s != "in" => s.clone(),
            _ => return Err(self.error("expected a variable name after `let`")),
        };
        self.pos += 1;
        self.expect(Tok::Eq, "`=`")?;
        let value = self.seq()?;
        match self.peek() {
            Some(Tok::Ident(s)) if s == "in" => self.pos += 1,
            _ => return Err(self.error("expected `in`")),
        }
        let binding = self.bindings;
        self.bindings += 1;
        self.scope.push(Binding {
            name: name.clone(),
            id: binding,
            next_subscript: 1,
        });
        let body = self.seq();
        self.scope.pop();
        Ok(Expr::Let {
            name,
            binding,
            value: Box::new(value),
            body: Box::new(body?),
        })
    }

    fn item(&mut self) -> Result<Expr, GrammarError> {
        let (line, _) = self.here();
        match self.peek().cloned() {
            Some(Tok::LParen) => {
                self.pos += 1;
                let e = self.seq()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(match e {
                    Expr::Seq(items) => Expr::Seq(items),
                    other => Expr::Seq(vec![other]),
                })
            }
            Some(Tok::Ident(s)) => {
                if let Some(k) = modulation_index(&s).filter(|_| self.peek_at(1) == Some(&Tok::LParen)) {
                    self.pos += 2;
                    let inner = self.seq()?;
                    self.expect(Tok::RParen, "`)`")?;
                    return Ok(Expr::Modulate { k, inner: Box::new(inner) });
                }
                self.pos += 1;
                if let Some(step) = roman_step(&s) {
                    let measures = self.duration()?;
                    return Ok(Expr::Chord { step, measures });
                }
                if s == "in" || s == "let" {
                    return Err(self.error(format!("unexpected `{s}`")));
                }
                self.resolve(&s, line)
            }
            Some(_) => Err(self.error("expected a chord, name, `M<k>(`, `(` or `let`")),
            None => Err(self.error("unexpected end of input")),
        }
    }

    fn duration(&mut self) -> Result<Beat, GrammarError> {
        if self.peek() != Some(&Tok::Colon) {
            return Ok(Beat::from_integer(1));
        }
        self.pos += 1;
        let num = match self.peek() {
            Some(Tok::Num(n)) => i64::from(*n),
            _ => return Err(self.error("expected a duration")),
        };
        self.pos += 1;
        let den = if self.peek() == Some(&Tok::Slash) {
            self.pos += 1;
            match self.peek() {
                Some(Tok::Num(n)) if *n > 0 => {
                    let d = i64::from(*n);
                    self.pos += 1;
                    d
                }
                _ => return Err(self.error("expected a denominator")),
            }
        } else {
            1
        };
        let d = Beat::new(num, den);
        if d <= Beat::from_integer(0) || !(d * Beat::from_integer(SLOTS_PER_MEASURE as i64)).is_integer() {
            return Err(self.error(format!("duration {d} is not a positive multiple of half a measure")));
        }
        Ok(d)
    }

    fn resolve(&mut self, s: &str, line: usize) -> Result<Expr, GrammarError> {
        if let Some(b) = self.scope.iter_mut().rev().find(|b| b.name == s) {
            let subscript = b.next_subscript;
            b.next_subscript += 1;
            return Ok(Expr::Ref {
                name: b.name.clone(),
                binding: b.id,
                subscript,
            });
        }
        if let Some((base, n)) = split_subscript(s) {
            if let Some(b) = self.scope.iter_mut().rev().find(|b| b.name == base) {
                b.next_subscript = b.next_subscript.max(n + 1);
                return Ok(Expr::Ref {
                    name: b.name.clone(),
                    binding: b.id,
                    subscript: n,
                });
            }
        }
        if self.rules.contains(s) {
            return Ok(Expr::NonTerminal(s.to_string()));
        }
        Err(GrammarError::Scope {
            name: s.to_string(),
            line,
        })
    }
}

impl Grammar {
    pub fn parse(text: &str) -> Result<Self, GrammarError> {
        let toks = lex(text)?;
        if toks.is_empty() {
            return Err(GrammarError::Empty);
        }
        let has_rules = toks.iter().any(|t| t.tok == Tok::Arrow);
        let rules: BTreeSet<String> = if has_rules {
            toks.windows(2)
                .filter_map(|w| match (&w[0].tok, &w[1].tok) {
                    (Tok::Ident(n), Tok::Arrow) => Some(n.clone()),
                    _ => None,
                })
                .collect()
        } else {
            BTreeSet::from([DEFAULT_START.to_string()])
        };
        let mut p = Parser {
            toks: &toks,
            pos: 0,
            rules,
            scope: Vec::new(),
            bindings: 0,
        };

        let mut productions: Vec<Production> = Vec::new();
        if !has_rules {
            let e = p.seq()?;
            if p.pos < toks.len() {
                return Err(p.error("unexpected token"));
            }
            productions.push(Production {
                lhs: DEFAULT_START.to_string(),
                alternatives: vec![e],
            });
        } else {
            while p.pos < toks.len() {
                let lhs = match p.peek() {
                    Some(Tok::Ident(n)) if p.peek_at(1) == Some(&Tok::Arrow) => n.clone(),
                    _ => return Err(p.error("expected `Name ->`")),
                };
                if productions.iter().any(|r| r.lhs == lhs) {
                    return Err(GrammarError::Duplicate(lhs));
                }
                p.pos += 2;
                let mut alternatives = vec![p.seq()?];
                while p.peek() == Some(&Tok::Pipe) {
                    p.pos += 1;
                    alternatives.push(p.seq()?);
                }
                match p.peek() {
                    Some(Tok::Semi) => p.pos += 1,
                    None => {}
                    _ => return Err(p.error("expected `|` or `;`")),
                }
                productions.push(Production { lhs, alternatives });
            }
        }
        let grammar = Grammar { rules: productions };
        grammar.check_productive()?;
        Ok(grammar)
    }

    pub fn load(path: &Path) -> Result<Self, GrammarError> {
        let text = std::fs::read_to_string(path).map_err(|e| GrammarError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn rule(&self, name: &str) -> Option<&Production> {
        self.rules.iter().find(|r| r.lhs == name)
    }

    /// Name of the first rule, used when no start symbol is given.
    pub fn first_rule(&self) -> &str {
        &self.rules[0].lhs
    }

    /// Every rule must have an alternative that can finish using only
    /// rules that can themselves finish.
    fn check_productive(&self) -> Result<(), GrammarError> {
        let mut productive: BTreeSet<&str> = BTreeSet::new();
        loop {
            let before = productive.len();
            for r in &self.rules {
                if productive.contains(r.lhs.as_str()) {
                    continue;
                }
                let ok = r.alternatives.iter().any(|alt| {
                    let mut all = true;
                    alt.visit(&mut |e| {
                        if let Expr::NonTerminal(n) = e {
                            all &= productive.contains(n.as_str());
                        }
                    });
                    all
                });
                if ok {
                    productive.insert(&r.lhs);
                }
            }
            if productive.len() == before {
                break;
            }
        }
        match self.rules.iter().find(|r| !productive.contains(r.lhs.as_str())) {
            Some(r) => Err(GrammarError::Recursion(r.lhs.clone())),
            None => Ok(()),
        }
    }
}

impl Default for Grammar {
    fn default() -> Self {
        Grammar::parse(DEFAULT_GRAMMAR).expect("bundled grammar is valid")
    }
}

impl fmt::Display for Grammar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rules {
            write!(f, "{} ->", r.lhs)?;
            for (i, alt) in r.alternatives.iter().enumerate() {
                if i > 0 {
                    f.write_str(" |")?;
                }
                write!(f, " {alt}")?;
            }
            f.write_str(" ;\n")?;
        }
        Ok(())
    }
}

/// One chord of a planned section, as a scale degree of the plan's key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PlannedChord {
    /// 1 = I through 7 = VII.
    pub degree: u8,
    pub qualities: Qualities,
    pub measures: Beat,
}

impl fmt::Display for PlannedChord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", roman(self.degree))?;
        if self.measures != Beat::from_integer(1) {
            write!(f, ":{}", self.measures)?;
        }
        Ok(())
    }
}

/// Identifies which melody a section shares with others: same base means
/// same chords, and the subscript picks a variation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MotifTag {
    pub base: String,
    pub subscript: u32,
}

impl fmt::Display for MotifTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.base, self.subscript)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub chords: Vec<PlannedChord>,
    pub tag: MotifTag,
    pub mode: Mode,
}

impl Section {
    pub fn measures(&self) -> Beat {
        self.chords.iter().map(|c| c.measures).sum()
    }

    /// The progression repeated to fill `measures` measures of half-measure slots.
    pub fn frame(&self, measures: usize) -> Vec<ChordSlot> {
        let one: Vec<ChordSlot> = self
            .chords
            .iter()
            .flat_map(|c| {
                let n = (c.measures * Beat::from_integer(SLOTS_PER_MEASURE as i64)).to_integer() as usize;
                std::iter::repeat_n(
                    ChordSlot {
                        degree: Some(c.degree),
                        qualities: c.qualities,
                    },
                    n,
                )
            })
            .collect();
        if one.is_empty() {
            return vec![ChordSlot::silent(); measures * SLOTS_PER_MEASURE];
        }
        one.iter().cycle().take(measures * SLOTS_PER_MEASURE).copied().collect()
    }

    pub fn default_frame(&self) -> Vec<ChordSlot> {
        self.frame(MEASURES)
    }
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:", self.tag)?;
        for c in &self.chords {
            write!(f, " {c}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionPlan {
    pub sections: Vec<Section>,
    pub mode: Mode,
}

impl SectionPlan {
    pub fn tags(&self) -> impl Iterator<Item = &MotifTag> {
        self.sections.iter().map(|s| &s.tag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpandOptions {
    pub seed: u64,
    pub depth_limit: usize,
    pub mode: Mode,
}

impl Default for ExpandOptions {
    fn default() -> Self {
        ExpandOptions {
            seed: 0,
            depth_limit: DEFAULT_DEPTH_LIMIT,
            mode: Mode::Major,
        }
    }
}

type Steps = Vec<(i32, Beat)>;

struct Expander<'g> {
    grammar: &'g Grammar,
    rng: ChaCha8Rng,
    limit: usize,
}

struct BoundValue {
    steps: Steps,
    base: String,
    /// Shift of the first reference; other shifts get their own base.
    first_shift: Option<i32>,
}

type Env = HashMap<usize, usize>;

impl Expander<'_> {
    fn choose<'a>(&mut self, alts: &'a [Expr]) -> &'a Expr {
        if alts.len() == 1 {
            &alts[0]
        } else {
            &alts[self.rng.random_range(0..alts.len())]
        }
    }

    fn expand_rule(&mut self, name: &str, depth: usize) -> Result<Steps, GrammarError> {
        if depth > self.limit {
            return Err(GrammarError::Expansion(self.limit));
        }
        let rule = self.grammar.rule(name).ok_or_else(|| GrammarError::UnknownStart(name.to_string()))?;
        let alt = self.choose(&rule.alternatives);
        let mut values = Vec::new();
        self.flatten(alt, &Env::new(), &mut values, 0, depth)
    }

    fn bind(
        &mut self,
        name: &str,
        binding: usize,
        value: &Expr,
        env: &Env,
        values: &mut Vec<BoundValue>,
        depth: usize,
    ) -> Result<Env, GrammarError> {
        let steps = self.flatten(value, env, values, 0, depth)?;
        let clashes = values.iter().filter(|v| v.base == name).count();
        let base = if clashes == 0 { name.to_string() } else { format!("{name}#{}", clashes + 1) };
        values.push(BoundValue {
            steps,
            base,
            first_shift: None,
        });
        let mut env = env.clone();
        env.insert(binding, values.len() - 1);
        Ok(env)
    }

    /// Expands `e` to `(scale step, measures)` pairs with `shift` steps added.
    fn flatten(
        &mut self,
        e: &Expr,
        env: &Env,
        values: &mut Vec<BoundValue>,
        shift: i32,
        depth: usize,
    ) -> Result<Steps, GrammarError> {
        Ok(match e {
            Expr::Seq(items) => {
                let mut out = Vec::new();
                for it in items {
                    out.extend(self.flatten(it, env, values, shift, depth)?);
                }
                out
            }
            Expr::Chord { step, measures } => vec![(i32::from(*step) + shift, *measures)],
            Expr::Modulate { k, inner } => self.flatten(inner, env, values, shift + *k as i32 - 1, depth)?,
            Expr::Let {
                name,
                binding,
                value,
                body,
            } => {
                let env = self.bind(name, *binding, value, env, values, depth)?;
                self.flatten(body, &env, values, shift, depth)?
            }
            Expr::Ref { binding, .. } => {
                let v = &values[env[binding]];
                v.steps.iter().map(|&(s, m)| (s + shift, m)).collect()
            }
            Expr::NonTerminal(n) => self
                .expand_rule(n, depth + 1)?
                .into_iter()
                .map(|(s, m)| (s + shift, m))
                .collect(),
        })
    }

    /// Splits the start expression into sections: each reference, rule,
    /// modulation or group is one section, and consecutive bare chords form one.
    fn sections(
        &mut self,
        e: &Expr,
        env: &Env,
        values: &mut Vec<BoundValue>,
        out: &mut Vec<(Steps, Option<MotifTag>)>,
        depth: usize,
    ) -> Result<(), GrammarError> {
        match e {
            Expr::Let {
                name,
                binding,
                value,
                body,
            } => {
                let env = self.bind(name, *binding, value, env, values, depth)?;
                self.sections(body, &env, values, out, depth)
            }
            Expr::NonTerminal(n) => {
                if depth >= self.limit {
                    return Err(GrammarError::Expansion(self.limit));
                }
                let rule = self.grammar.rule(n).ok_or_else(|| GrammarError::UnknownStart(n.clone()))?;
                let alt = self.choose(&rule.alternatives);
                self.sections(alt, &Env::new(), values, out, depth + 1)
            }
            Expr::Seq(items) => {
                let mut run: Steps = Vec::new();
                for it in items {
                    if let Expr::Chord { step, measures } = it {
                        run.push((i32::from(*step), *measures));
                        continue;
                    }
                    if !run.is_empty() {
                        out.push((std::mem::take(&mut run), None));
                    }
                    if let Expr::Let { .. } = it {
                        self.sections(it, env, values, out, depth)?;
                    } else {
                        let steps = self.flatten(it, env, values, 0, depth)?;
                        let tag = section_tag(it, env, values, 0);
                        out.push((steps, tag));
                    }
                }
                if !run.is_empty() {
                    out.push((run, None));
                }
                Ok(())
            }
            other => {
                let steps = self.flatten(other, env, values, 0, depth)?;
                let tag = section_tag(other, env, values, 0);
                out.push((steps, tag));
                Ok(())
            }
        }
    }
}

/// Motif tag of a section that is a (possibly modulated) reference.
fn section_tag(e: &Expr, env: &Env, values: &mut [BoundValue], shift: i32) -> Option<MotifTag> {
    match e {
        Expr::Modulate { k, inner } => section_tag(inner, env, values, shift + *k as i32 - 1),
        Expr::Seq(items) if items.len() == 1 => section_tag(&items[0], env, values, shift),
        Expr::Ref { binding, subscript, .. } => {
            let v = &mut values[env[binding]];
            let shift = shift.rem_euclid(7);
            let first = *v.first_shift.get_or_insert(shift);
            let base = if first == shift { v.base.clone() } else { format!("{}+{shift}", v.base) };
            Some(MotifTag {
                base,
                subscript: *subscript,
            })
        }
        _ => None,
    }
}

fn planned_chord(step: i32, measures: Beat, mode: Mode) -> PlannedChord {
    let s = step.rem_euclid(7) as usize;
    PlannedChord {
        degree: s as u8 + 1,
        qualities: Qualities::from_intervals(PitchClassSet::from_pitches(mode.triad_intervals(s))),
        measures,
    }
}

/// Expands `start` into a section plan. The result depends only on the
/// grammar, the start symbol and the options.
pub fn expand(grammar: &Grammar, start: &str, opts: &ExpandOptions) -> Result<SectionPlan, GrammarError> {
    let rule = grammar.rule(start).ok_or_else(|| GrammarError::UnknownStart(start.to_string()))?;
    let mut ex = Expander {
        grammar,
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
        limit: opts.depth_limit,
    };
    let alt = ex.choose(&rule.alternatives);
    let mut raw = Vec::new();
    let mut values = Vec::new();
    ex.sections(alt, &Env::new(), &mut values, &mut raw, 0)?;

    let mut anon = 0;
    let sections = raw
        .into_iter()
        .map(|(steps, tag)| {
            let tag = tag.unwrap_or_else(|| {
                anon += 1;
                MotifTag {
                    base: format!("#{anon}"),
                    subscript: 1,
                }
            });
            Section {
                chords: steps.into_iter().map(|(s, m)| planned_chord(s, m, opts.mode)).collect(),
                tag,
                mode: opts.mode,
            }
        })
        .collect();
    Ok(SectionPlan {
        sections,
        mode: opts.mode,
    })
}

/// Latent vectors for the sections of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotifLatentAssignment {
    /// One unit-Gaussian draw per base, in order of first appearance.
    pub bases: Vec<(String, Vec<f64>)>,
    /// Latent of each section of the plan.
    pub sections: Vec<Vec<f64>>,
}

impl MotifLatentAssignment {
    pub fn base(&self, name: &str) -> Option<&[f64]> {
        self.bases.iter().find(|(b, _)| b == name).map(|(_, v)| v.as_slice())
    }
}

/// Draws a base latent per motif base; subscript 1 uses it unchanged and
/// higher subscripts add `N(0, sigma^2)` noise, one draw per distinct tag.
pub fn assign_latents(plan: &SectionPlan, dim: usize, sigma: f64, seed: u64) -> MotifLatentAssignment {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bases: Vec<(String, Vec<f64>)> = Vec::new();
    let mut tagged: HashMap<MotifTag, Vec<f64>> = HashMap::new();
    let mut sections = Vec::with_capacity(plan.sections.len());
    for s in &plan.sections {
        if let Some(z) = tagged.get(&s.tag) {
            sections.push(z.clone());
            continue;
        }
        let base = match bases.iter().find(|(b, _)| *b == s.tag.base) {
            Some((_, v)) => v.clone(),
            None => {
                let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                bases.push((s.tag.base.clone(), v.clone()));
                v
            }
        };
        let z: Vec<f64> = if s.tag.subscript <= 1 {
            base
        } else {
            base.iter()
                .map(|b| {
                    let n: f64 = rng.sample(StandardNormal);
                    b + sigma * n
                })
                .collect()
        };
        tagged.insert(s.tag.clone(), z.clone());
        sections.push(z);
    }
    MotifLatentAssignment { bases, sections }
}
