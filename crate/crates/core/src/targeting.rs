//! Boolean targeting expressions over categorical user attributes.
//!
//! Grammar (whitespace-insensitive, identifiers are `[A-Za-z0-9_]+`):
//!
//! ```text
//! expr   := term ('OR' term)*
//! term   := factor ('AND' factor)*
//! factor := 'NOT' factor | '(' expr ')' | 'TRUE'
//!         | attr '=' value | attr 'IN' '{' value (',' value)* '}'
//! ```
//!
//! An absent attribute fails every positive predicate; `NOT` is classical negation of that
//! result, so `NOT gender = male` holds for a user of unknown gender.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::model::{AttributeMap, Contract, SupplyNode};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum TargetingExpr {
    True,
    Equals { attr: String, value: String },
    In { attr: String, values: Vec<String> },
    Not(Box<TargetingExpr>),
    And(Vec<TargetingExpr>),
    Or(Vec<TargetingExpr>),
}

impl TargetingExpr {
    pub fn equals(attr: impl Into<String>, value: impl Into<String>) -> Self {
        Self::Equals {
            attr: attr.into(),
            value: value.into(),
        }
    }

    pub fn is_in<I, S>(attr: impl Into<String>, values: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::In {
            attr: attr.into(),
            values: values.into_iter().map(Into::into).collect(),
        }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(expr: TargetingExpr) -> Self {
        Self::Not(Box::new(expr))
    }

    fn is_compound(&self) -> bool {
        matches!(self, Self::And(_) | Self::Or(_))
    }
}

/// Evaluates `expr` against a user's attributes.
pub fn eligible(attrs: &AttributeMap, expr: &TargetingExpr) -> bool {
    match expr {
        TargetingExpr::True => true,
        TargetingExpr::Equals { attr, value } => attrs.get(attr) == Some(value.as_str()),
        TargetingExpr::In { attr, values } => attrs
            .get(attr)
            .is_some_and(|v| values.iter().any(|x| x == v)),
        TargetingExpr::Not(inner) => !eligible(attrs, inner),
        TargetingExpr::And(children) => children.iter().all(|c| eligible(attrs, c)),
        TargetingExpr::Or(children) => children.iter().any(|c| eligible(attrs, c)),
    }
}

/// Eligibility edges `(node index, contract index)`, ordered by `(node id, contract id)`.
pub fn build_edges(supply: &[SupplyNode], contracts: &[Contract]) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = supply
        .iter()
        .enumerate()
        .flat_map(|(i, node)| {
            contracts
                .iter()
                .enumerate()
                .filter(move |(_, c)| node.is_eligible_for(c))
                .map(move |(j, _)| (i, j))
        })
        .collect();
    edges.sort_by(|a, b| {
        (supply[a.0].id.as_str(), contracts[a.1].id.as_str())
            .cmp(&(supply[b.0].id.as_str(), contracts[b.1].id.as_str()))
            .then(a.cmp(b))
    });
    edges
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("syntax error at byte {offset}: expected {}, found {found}", .expected.join(" | "))]
pub struct ParseError {
    pub offset: usize,
    pub expected: Vec<&'static str>,
    pub found: String,
}

pub fn parse_targeting(text: &str) -> Result<TargetingExpr, ParseError> {
    let tokens = tokenize(text)?;
    let mut parser = Parser { tokens, pos: 0 };
    let expr = parser.expr()?;
    match parser.peek() {
        Token { kind: Kind::End, .. } => Ok(expr),
        other => Err(ParseError {
            offset: other.offset,
            expected: vec!["AND", "OR", "end of input"],
            found: other.describe(),
        }),
    }
}

impl FromStr for TargetingExpr {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_targeting(s)
    }
}

const KEYWORDS: [&str; 5] = ["AND", "OR", "NOT", "IN", "TRUE"];

#[derive(Clone, Debug, PartialEq)]
enum Kind {
    Ident(String),
    Eq,
    LParen,
    RParen,
    LBrace,
    RBrace,
    Comma,
    End,
}

#[derive(Clone, Debug)]
struct Token {
    kind: Kind,
    offset: usize,
}

impl Token {
    fn describe(&self) -> String {
        match &self.kind {
            Kind::Ident(s) => format!("`{s}`"),
            Kind::Eq => "`=`".into(),
            Kind::LParen => "`(`".into(),
            Kind::RParen => "`)`".into(),
            Kind::LBrace => "`{`".into(),
            Kind::RBrace => "`}`".into(),
            Kind::Comma => "`,`".into(),
            Kind::End => "end of input".into(),
        }
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(&self.kind, Kind::Ident(s) if s == kw)
    }
}

fn tokenize(text: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let b = bytes[pos];
        let single = match b {
            b'=' => Some(Kind::Eq),
            b'(' => Some(Kind::LParen),
            b')' => Some(Kind::RParen),
            b'{' => Some(Kind::LBrace),
            b'}' => Some(Kind::RBrace),
            b',' => Some(Kind::Comma),
            _ => None,
        };
        if let Some(kind) = single {
            tokens.push(Token { kind, offset: pos });
            pos += 1;
        } else if b.is_ascii_whitespace() {
            pos += 1;
        } else if b.is_ascii_alphanumeric() || b == b'_' {
            let start = pos;
            while pos < bytes.len() && (bytes[pos].is_ascii_alphanumeric() || bytes[pos] == b'_') {
                pos += 1;
            }
            tokens.push(Token {
                kind: Kind::Ident(text[start..pos].to_owned()),
                offset: start,
            });
        } else {
            let ch = text[pos..].chars().next().unwrap_or('?');
            return Err(ParseError {
                offset: pos,
                expected: vec!["identifier", "`=`", "`(`", "`)`", "`{`", "`}`", "`,`"],
                found: format!("`{ch}`"),
            });
        }
    }
    tokens.push(Token {
        kind: Kind::End,
        offset: text.len(),
    });
    Ok(tokens)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn bump(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, expected: Vec<&'static str>) -> ParseError {
        let t = self.peek();
        ParseError {
            offset: t.offset,
            expected,
            found: t.describe(),
        }
    }

    fn expect(&mut self, kind: Kind, name: &'static str) -> Result<(), ParseError> {
        if self.peek().kind == kind {
            self.bump();
            Ok(())
        } else {
            Err(self.error(vec![name]))
        }
    }

    fn expr(&mut self) -> Result<TargetingExpr, ParseError> {
        let mut terms = vec![self.term()?];
        while self.peek().is_keyword("OR") {
            self.bump();
            terms.push(self.term()?);
        }
        Ok(if terms.len() == 1 {
            terms.pop().unwrap()
        } else {
            TargetingExpr::Or(terms)
        })
    }

    fn term(&mut self) -> Result<TargetingExpr, ParseError> {
        let mut factors = vec![self.factor()?];
        while self.peek().is_keyword("AND") {
            self.bump();
            factors.push(self.factor()?);
        }
        Ok(if factors.len() == 1 {
            factors.pop().unwrap()
        } else {
            TargetingExpr::And(factors)
        })
    }

    fn factor(&mut self) -> Result<TargetingExpr, ParseError> {
        const FACTOR_START: [&str; 4] = ["NOT", "TRUE", "`(`", "attribute"];
        let token = self.peek().clone();
        match &token.kind {
            Kind::LParen => {
                self.bump();
                let inner = self.expr()?;
                self.expect(Kind::RParen, "`)`")?;
                Ok(inner)
            }
            Kind::Ident(word) if word == "NOT" => {
                self.bump();
                Ok(TargetingExpr::not(self.factor()?))
            }
            Kind::Ident(word) if word == "TRUE" => {
                self.bump();
                Ok(TargetingExpr::True)
            }
            Kind::Ident(word) if !KEYWORDS.contains(&word.as_str()) => {
                let attr = word.clone();
                self.bump();
                if self.peek().kind == Kind::Eq {
                    self.bump();
                    let value = self.value()?;
                    Ok(TargetingExpr::Equals { attr, value })
                } else if self.peek().is_keyword("IN") {
                    self.bump();
                    self.expect(Kind::LBrace, "`{`")?;
                    let mut values = vec![self.value()?];
                    while self.peek().kind == Kind::Comma {
                        self.bump();
                        values.push(self.value()?);
                    }
                    self.expect(Kind::RBrace, "`}`")?;
                    Ok(TargetingExpr::In { attr, values })
                } else {
                    Err(self.error(vec!["`=`", "IN"]))
                }
            }
            _ => Err(self.error(FACTOR_START.to_vec())),
        }
    }

    fn value(&mut self) -> Result<String, ParseError> {
        match &self.peek().kind {
            Kind::Ident(v) => {
                let v = v.clone();
                self.bump();
                Ok(v)
            }
            _ => Err(self.error(vec!["value"])),
        }
    }
}

impl fmt::Display for TargetingExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn child(f: &mut fmt::Formatter<'_>, e: &TargetingExpr) -> fmt::Result {
            if e.is_compound() {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        }
        fn joined(f: &mut fmt::Formatter<'_>, cs: &[TargetingExpr], op: &str) -> fmt::Result {
            for (n, c) in cs.iter().enumerate() {
                if n > 0 {
                    write!(f, " {op} ")?;
                }
                child(f, c)?;
            }
            Ok(())
        }
        match self {
            Self::True => f.write_str("TRUE"),
            Self::Equals { attr, value } => write!(f, "{attr} = {value}"),
            Self::In { attr, values } => write!(f, "{attr} IN {{{}}}", values.join(", ")),
            Self::Not(inner) => {
                f.write_str("NOT ")?;
                child(f, inner)
            }
            Self::And(cs) => joined(f, cs, "AND"),
            Self::Or(cs) => joined(f, cs, "OR"),
        }
    }
}

impl Serialize for TargetingExpr {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TargetingExpr {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}
