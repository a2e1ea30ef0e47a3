//! Model formula mini-language.
//!
//! ```text
//! formula  := response '~' term ('+' term)*
//! response := ident | 'cbind' '(' ident ',' ident ')'
//! term     := ident | '1' | stap_call | '(' '1' '|' ident ')'
//! stap_call:= ('sap' | 'tap' | 'stap') '(' ident (',' kernel)* ')'
//! ```

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::KernelKind;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormulaError {
    #[error("formula is empty")]
    Empty,
    #[error("formula must contain exactly one '~', found {0}")]
    Tilde(usize),
    #[error("unexpected character '{ch}' at offset {pos}")]
    BadCharacter { ch: char, pos: usize },
    #[error("expected {expected} at offset {pos}, found {found}")]
    Unexpected { expected: &'static str, found: String, pos: usize },
    #[error("unknown {component} kernel '{keyword}' in {call}({name})")]
    UnknownKernel { component: &'static str, keyword: String, call: String, name: String },
    #[error("too many kernel arguments in {call}({name})")]
    TooManyKernels { call: String, name: String },
    #[error("duplicate {kind} term for '{name}'")]
    DuplicateStapTerm { name: String, kind: StapKind },
    #[error("duplicate fixed term '{0}'")]
    DuplicateFixedTerm(String),
    #[error("'{0}' appears both as a fixed term and as a STAP term")]
    NameConflict(String),
    #[error("unsupported group term: only (1 | factor) is accepted")]
    UnsupportedGroupTerm,
    #[error("duplicate group term for '{0}'")]
    DuplicateGroupTerm(String),
    #[error("intercept removal is not supported")]
    InterceptRemoval,
    #[error("function call '{0}(...)' is not supported; only sap, tap and stap are")]
    UnsupportedCall(String),
    #[error("formula has no sap, tap or stap term")]
    NoStapTerm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Response {
    Single(String),
    /// `cbind(successes, failures)`
    Binomial { successes: String, failures: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StapKind {
    Spatial,
    Temporal,
    SpatialTemporal,
}

impl StapKind {
    pub fn keyword(self) -> &'static str {
        match self {
            StapKind::Spatial => "sap",
            StapKind::Temporal => "tap",
            StapKind::SpatialTemporal => "stap",
        }
    }

    pub fn has_spatial(self) -> bool {
        self != StapKind::Temporal
    }

    pub fn has_temporal(self) -> bool {
        self != StapKind::Spatial
    }
}

impl fmt::Display for StapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StapKind::Spatial => "spatial",
            StapKind::Temporal => "temporal",
            StapKind::SpatialTemporal => "spatial-temporal",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StapTerm {
    pub bef_name: String,
    pub kind: StapKind,
    pub spatial_kernel: Option<KernelKind>,
    pub temporal_kernel: Option<KernelKind>,
}

impl StapTerm {
    pub fn new(bef_name: impl Into<String>, kind: StapKind) -> Self {
        StapTerm {
            bef_name: bef_name.into(),
            kind,
            spatial_kernel: kind.has_spatial().then_some(KernelKind::SpatialErfc),
            temporal_kernel: kind.has_temporal().then_some(KernelKind::TemporalErf),
        }
    }

    pub fn with_kernels(mut self, spatial: Option<KernelKind>, temporal: Option<KernelKind>) -> Self {
        if self.kind.has_spatial() {
            self.spatial_kernel = spatial.or(self.spatial_kernel);
        }
        if self.kind.has_temporal() {
            self.temporal_kernel = temporal.or(self.temporal_kernel);
        }
        self
    }

    /// Kernels in parameter order: spatial first, then temporal.
    pub fn kernels(&self) -> impl Iterator<Item = KernelKind> + '_ {
        self.spatial_kernel.into_iter().chain(self.temporal_kernel)
    }
}

impl fmt::Display for StapTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({}", self.kind.keyword(), self.bef_name)?;
        for k in self.kernels() {
            write!(f, ", {}", k.keyword())?;
        }
        f.write_str(")")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupTerm {
    pub grouping_factor: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormulaSpec {
    pub response: Response,
    pub fixed_terms: Vec<String>,
    pub intercept: bool,
    pub stap_terms: Vec<StapTerm>,
    pub group_terms: Vec<GroupTerm>,
}

impl FormulaSpec {
    pub fn count_kind(&self, kind: StapKind) -> usize {
        self.stap_terms.iter().filter(|t| t.kind == kind).count()
    }

    pub fn has_temporal(&self) -> bool {
        self.stap_terms.iter().any(|t| t.kind.has_temporal())
    }

    pub fn has_spatial(&self) -> bool {
        self.stap_terms.iter().any(|t| t.kind.has_spatial())
    }

    /// Display label for a STAP term's coefficient. The bare BEF name is used
    /// unless another term shares it, in which case the call keyword is
    /// appended.
    pub fn stap_label(&self, index: usize) -> String {
        let term = &self.stap_terms[index];
        let shared = self.stap_terms.iter().filter(|t| t.bef_name == term.bef_name).count() > 1;
        if shared {
            format!("{}_{}", term.bef_name, term.kind.keyword())
        } else {
            term.bef_name.clone()
        }
    }
}

impl fmt::Display for FormulaSpec {
    /// Canonical rendering with every kernel spelled out.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.response {
            Response::Single(name) => f.write_str(name)?,
            Response::Binomial { successes, failures } => {
                write!(f, "cbind({successes}, {failures})")?
            }
        }
        f.write_str(" ~ ")?;
        let mut parts: Vec<String> = self.fixed_terms.clone();
        parts.extend(self.stap_terms.iter().map(|t| t.to_string()));
        parts.extend(self.group_terms.iter().map(|g| format!("(1 | {})", g.grouping_factor)));
        f.write_str(&parts.join(" + "))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(String),
    Tilde,
    Plus,
    Minus,
    LParen,
    RParen,
    Comma,
    Bar,
    End,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "'{s}'"),
            Tok::Number(s) => write!(f, "'{s}'"),
            Tok::Tilde => f.write_str("'~'"),
            Tok::Plus => f.write_str("'+'"),
            Tok::Minus => f.write_str("'-'"),
            Tok::LParen => f.write_str("'('"),
            Tok::RParen => f.write_str("')'"),
            Tok::Comma => f.write_str("','"),
            Tok::Bar => f.write_str("'|'"),
            Tok::End => f.write_str("end of formula"),
        }
    }
}

fn tokenize(text: &str) -> Result<Vec<(Tok, usize)>, FormulaError> {
    let mut out = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some(&(pos, ch)) = chars.peek() {
        if ch.is_whitespace() {
            chars.next();
            continue;
        }
        let simple = match ch {
            '~' => Some(Tok::Tilde),
            '+' => Some(Tok::Plus),
            '-' => Some(Tok::Minus),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            ',' => Some(Tok::Comma),
            '|' => Some(Tok::Bar),
            _ => None,
        };
        if let Some(tok) = simple {
            out.push((tok, pos));
            chars.next();
            continue;
        }
        if ch.is_ascii_digit() {
            let mut s = String::new();
            while let Some(&(_, c)) = chars.peek() {
                if c.is_ascii_digit() || c == '.' {
                    s.push(c);
                    chars.next();
                } else {
                    break;
                }
            }
            out.push((Tok::Number(s), pos));
            continue;
        }
        if ch.is_alphabetic() || ch == '_' || ch == '.' {
            let mut s = String::new();
            while let Some(&(_, c)) = chars.peek() {
                if c.is_alphanumeric() || c == '_' || c == '.' {
                    s.push(c);
                    chars.next();
                } else {
                    break;
                }
            }
            out.push((Tok::Ident(s), pos));
            continue;
        }
        return Err(FormulaError::BadCharacter { ch, pos });
    }
    out.push((Tok::End, text.len()));
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].0
    }

    fn peek_at(&self, offset: usize) -> &Tok {
        let i = (self.at + offset).min(self.toks.len() - 1);
        &self.toks[i].0
    }

    fn pos(&self) -> usize {
        self.toks[self.at].1
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.at].0.clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn unexpected(&self, expected: &'static str) -> FormulaError {
        FormulaError::Unexpected { expected, found: self.peek().to_string(), pos: self.pos() }
    }

    fn expect(&mut self, tok: Tok, expected: &'static str) -> Result<(), FormulaError> {
        if *self.peek() == tok {
            self.bump();
            Ok(())
        } else {
            Err(self.unexpected(expected))
        }
    }

    fn ident(&mut self, expected: &'static str) -> Result<String, FormulaError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.bump();
                Ok(s)
            }
            _ => Err(self.unexpected(expected)),
        }
    }

    fn response(&mut self) -> Result<Response, FormulaError> {
        let name = self.ident("response name")?;
        if name == "cbind" && *self.peek() == Tok::LParen {
            self.bump();
            let successes = self.ident("success column")?;
            self.expect(Tok::Comma, "','")?;
            let failures = self.ident("failure column")?;
            self.expect(Tok::RParen, "')'")?;
            return Ok(Response::Binomial { successes, failures });
        }
        if *self.peek() == Tok::LParen {
            return Err(FormulaError::UnsupportedCall(name));
        }
        Ok(Response::Single(name))
    }

    fn stap_call(&mut self, call: String) -> Result<StapTerm, FormulaError> {
        let kind = match call.as_str() {
            "sap" => StapKind::Spatial,
            "tap" => StapKind::Temporal,
            _ => StapKind::SpatialTemporal,
        };
        self.expect(Tok::LParen, "'('")?;
        let name = self.ident("BEF name")?;
        let mut keywords = Vec::new();
        while *self.peek() == Tok::Comma {
            self.bump();
            keywords.push(self.ident("kernel keyword")?);
        }
        self.expect(Tok::RParen, "')'")?;

        let unknown = |component: &'static str, keyword: &str| FormulaError::UnknownKernel {
            component,
            keyword: keyword.to_string(),
            call: call.clone(),
            name: name.clone(),
        };
        let spatial = |kw: &str| match kw {
            "erfc" | "erf" => Ok(KernelKind::SpatialErfc),
            "exp" => Ok(KernelKind::SpatialExp),
            _ => Err(unknown("spatial", kw)),
        };
        let temporal = |kw: &str| match kw {
            "erf" => Ok(KernelKind::TemporalErf),
            "cexp" => Ok(KernelKind::TemporalCexp),
            _ => Err(unknown("temporal", kw)),
        };
        let max_args = if kind == StapKind::SpatialTemporal { 2 } else { 1 };
        if keywords.len() > max_args {
            return Err(FormulaError::TooManyKernels { call, name });
        }
        let (s, t) = match kind {
            StapKind::Spatial => (keywords.first().map(|k| spatial(k)).transpose()?, None),
            StapKind::Temporal => (None, keywords.first().map(|k| temporal(k)).transpose()?),
            StapKind::SpatialTemporal => (
                keywords.first().map(|k| spatial(k)).transpose()?,
                keywords.get(1).map(|k| temporal(k)).transpose()?,
            ),
        };
        Ok(StapTerm::new(name, kind).with_kernels(s, t))
    }

    fn group_term(&mut self) -> Result<GroupTerm, FormulaError> {
        self.expect(Tok::LParen, "'('")?;
        let ok_shape = matches!(self.peek(), Tok::Number(n) if n == "1")
            && *self.peek_at(1) == Tok::Bar
            && matches!(self.peek_at(2), Tok::Ident(_))
            && *self.peek_at(3) == Tok::RParen;
        if !ok_shape {
            return Err(FormulaError::UnsupportedGroupTerm);
        }
        self.bump();
        self.bump();
        let factor = self.ident("grouping factor")?;
        self.bump();
        Ok(GroupTerm { grouping_factor: factor })
    }
}

enum Term {
    Intercept,
    Fixed(String),
    Stap(StapTerm),
    Group(GroupTerm),
}

/// Parse formula text into a validated [`FormulaSpec`].
pub fn parse_formula(text: &str) -> Result<FormulaSpec, FormulaError> {
    if text.trim().is_empty() {
        return Err(FormulaError::Empty);
    }
    let tildes = text.matches('~').count();
    if tildes != 1 {
        return Err(FormulaError::Tilde(tildes));
    }
    let mut p = Parser { toks: tokenize(text)?, at: 0 };
    let response = p.response()?;
    p.expect(Tok::Tilde, "'~'")?;

    let mut terms = Vec::new();
    loop {
        let term = match p.peek().clone() {
            Tok::Number(n) if n == "1" => {
                p.bump();
                Term::Intercept
            }
            Tok::Number(n) if n == "0" => return Err(FormulaError::InterceptRemoval),
            Tok::Minus => return Err(FormulaError::InterceptRemoval),
            Tok::LParen => Term::Group(p.group_term()?),
            Tok::Ident(name) => {
                p.bump();
                if *p.peek() == Tok::LParen {
                    match name.as_str() {
                        "sap" | "tap" | "stap" => Term::Stap(p.stap_call(name)?),
                        _ => return Err(FormulaError::UnsupportedCall(name)),
                    }
                } else {
                    Term::Fixed(name)
                }
            }
            _ => return Err(p.unexpected("a term")),
        };
        terms.push(term);
        match p.peek() {
            Tok::Plus => {
                p.bump();
            }
            Tok::End => break,
            Tok::Minus => return Err(FormulaError::InterceptRemoval),
            _ => return Err(p.unexpected("'+' or end of formula")),
        }
    }

    let mut spec = FormulaSpec {
        response,
        fixed_terms: Vec::new(),
        intercept: true,
        stap_terms: Vec::new(),
        group_terms: Vec::new(),
    };
    for term in terms {
        match term {
            Term::Intercept => {}
            Term::Fixed(name) => {
                if spec.fixed_terms.contains(&name) {
                    return Err(FormulaError::DuplicateFixedTerm(name));
                }
                spec.fixed_terms.push(name);
            }
            Term::Stap(t) => {
                if spec.stap_terms.iter().any(|s| s.bef_name == t.bef_name && s.kind == t.kind) {
                    return Err(FormulaError::DuplicateStapTerm { name: t.bef_name, kind: t.kind });
                }
                spec.stap_terms.push(t);
            }
            Term::Group(g) => {
                if spec.group_terms.iter().any(|h| h.grouping_factor == g.grouping_factor) {
                    return Err(FormulaError::DuplicateGroupTerm(g.grouping_factor));
                }
                spec.group_terms.push(g);
            }
        }
    }
    if spec.stap_terms.is_empty() {
        return Err(FormulaError::NoStapTerm);
    }
    let stap_names: HashSet<&str> = spec.stap_terms.iter().map(|t| t.bef_name.as_str()).collect();
    if let Some(name) = spec.fixed_terms.iter().find(|n| stap_names.contains(n.as_str())) {
        return Err(FormulaError::NameConflict(name.clone()));
    }
    Ok(spec)
}
