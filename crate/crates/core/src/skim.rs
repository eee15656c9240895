//! Selection streams over processed files.
//!
//! A skim is a named boolean predicate over the integer fields of the
//! summary bank; every input event that satisfies it is copied to the skim's
//! output file, order preserved. One event may land in any number of skims.
//! A comparison over a missing bank or field evaluates to false and is
//! tallied per skim, so malformed or foreign events never abort a job.
//!
//! Predicate grammar:
//!
//! ```text
//! expr := term (('and'|'or') term)*
//! term := ['not'] ( '(' expr ')' | field op int )
//! op   := < <= > >= == !=
//! ```
//!
//! `and` and `or` bind equally and associate left.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::event::{
    Event, EventError, EventFileHeader, EventFileReader, EventFileWriter, FileType,
};
use crate::generator::{decode_summary, SUMMARY_BANK, SUMMARY_FIELDS};

#[derive(Debug, Error)]
pub enum SkimError {
    #[error("predicate syntax at offset {offset}: {message}")]
    PredicateSyntax { offset: usize, message: String },
    #[error("duplicate skim name {0:?}")]
    DuplicateSkimName(String),
    #[error("bad skim definition {0:?}: {1}")]
    BadDefinition(String, String),
    #[error(transparent)]
    Event(#[from] EventError),
}

/// Comparison operators of the predicate grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

impl CmpOp {
    fn eval(self, left: i64, right: i64) -> bool {
        match self {
            CmpOp::Lt => left < right,
            CmpOp::Le => left <= right,
            CmpOp::Gt => left > right,
            CmpOp::Ge => left >= right,
            CmpOp::Eq => left == right,
            CmpOp::Ne => left != right,
        }
    }
}

impl fmt::Display for CmpOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
        })
    }
}

/// Parsed selection expression.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Predicate {
    Compare { field: String, op: CmpOp, value: i64 },
    Not(Box<Predicate>),
    And(Box<Predicate>, Box<Predicate>),
    Or(Box<Predicate>, Box<Predicate>),
}

impl Predicate {
    pub fn parse(text: &str) -> Result<Self, SkimError> {
        Parser::new(text)?.parse()
    }

    /// Evaluates against a field lookup. A comparison whose field resolves
    /// to `None` is false and bumps `unevaluable`.
    pub fn eval(&self, lookup: &impl Fn(&str) -> Option<i64>, unevaluable: &mut u64) -> bool {
        match self {
            Predicate::Compare { field, op, value } => match lookup(field) {
                Some(actual) => op.eval(actual, *value),
                None => {
                    *unevaluable += 1;
                    false
                }
            },
            Predicate::Not(inner) => !inner.eval(lookup, unevaluable),
            Predicate::And(a, b) => {
                // Both sides evaluate so the unevaluable tally is stable.
                let left = a.eval(lookup, unevaluable);
                let right = b.eval(lookup, unevaluable);
                left && right
            }
            Predicate::Or(a, b) => {
                let left = a.eval(lookup, unevaluable);
                let right = b.eval(lookup, unevaluable);
                left || right
            }
        }
    }

    /// Evaluates against an event's summary bank.
    pub fn eval_event(&self, event: &Event, unevaluable: &mut u64) -> bool {
        let fields = summary_fields(event);
        self.eval(&|name| fields.as_ref().and_then(|f| f.get(name).copied()), unevaluable)
    }

    fn is_chain(&self) -> bool {
        matches!(self, Predicate::And(..) | Predicate::Or(..))
    }

    fn fmt_term(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::Compare { field, op, value } => write!(f, "{field} {op} {value}"),
            Predicate::Not(inner) => {
                f.write_str("not ")?;
                // The grammar allows a single optional `not` per term, so a
                // nested negation needs parentheses just like a chain does.
                if inner.is_chain() || matches!(**inner, Predicate::Not(_)) {
                    write!(f, "({inner})")
                } else {
                    inner.fmt_term(f)
                }
            }
            chain => write!(f, "({chain})"),
        }
    }
}

/// Renders in the grammar's own syntax; parsing the output reproduces the
/// predicate exactly.
impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::And(a, b) => {
                if a.is_chain() {
                    write!(f, "{a} and ")?;
                } else {
                    a.fmt_term(f)?;
                    f.write_str(" and ")?;
                }
                b.fmt_term(f)
            }
            Predicate::Or(a, b) => {
                if a.is_chain() {
                    write!(f, "{a} or ")?;
                } else {
                    a.fmt_term(f)?;
                    f.write_str(" or ")?;
                }
                b.fmt_term(f)
            }
            term => term.fmt_term(f),
        }
    }
}

/// Decodes the summary bank of an event into name → value, if present.
pub fn summary_fields(event: &Event) -> Option<HashMap<&'static str, i64>> {
    let bank = event.bank(SUMMARY_BANK)?;
    let mut map = HashMap::new();
    for (id, value) in decode_summary(bank) {
        if let Some(name) = SUMMARY_FIELDS.get(id as usize) {
            map.insert(*name, i64::from(value));
        }
    }
    Some(map)
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Ident(String),
    Int(i64),
    Op(CmpOp),
    LParen,
    RParen,
}

struct Parser {
    tokens: Vec<(usize, Token)>,
    pos: usize,
    len: usize,
}

impl Parser {
    fn new(text: &str) -> Result<Self, SkimError> {
        let mut tokens = Vec::new();
        let bytes = text.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            let c = bytes[i] as char;
            if c.is_ascii_whitespace() {
                i += 1;
                continue;
            }
            let start = i;
            let token = match c {
                '(' => {
                    i += 1;
                    Token::LParen
                }
                ')' => {
                    i += 1;
                    Token::RParen
                }
                '<' | '>' | '=' | '!' => {
                    let two = bytes.get(i + 1) == Some(&b'=');
                    let op = match (c, two) {
                        ('<', true) => CmpOp::Le,
                        ('<', false) => CmpOp::Lt,
                        ('>', true) => CmpOp::Ge,
                        ('>', false) => CmpOp::Gt,
                        ('=', true) => CmpOp::Eq,
                        ('!', true) => CmpOp::Ne,
                        _ => {
                            return Err(SkimError::PredicateSyntax {
                                offset: start,
                                message: format!("stray {c:?}"),
                            })
                        }
                    };
                    i += if two { 2 } else { 1 };
                    Token::Op(op)
                }
                _ if c.is_ascii_digit() || c == '-' => {
                    let mut j = i + 1;
                    while j < bytes.len() && (bytes[j] as char).is_ascii_digit() {
                        j += 1;
                    }
                    let value = text[i..j].parse().map_err(|e| SkimError::PredicateSyntax {
                        offset: start,
                        message: format!("bad integer: {e}"),
                    })?;
                    i = j;
                    Token::Int(value)
                }
                _ if c.is_ascii_alphabetic() || c == '_' => {
                    let mut j = i + 1;
                    while j < bytes.len() {
                        let c = bytes[j] as char;
                        if c.is_ascii_alphanumeric() || c == '_' {
                            j += 1;
                        } else {
                            break;
                        }
                    }
                    let ident = text[i..j].to_owned();
                    i = j;
                    Token::Ident(ident)
                }
                _ => {
                    return Err(SkimError::PredicateSyntax {
                        offset: start,
                        message: format!("unexpected character {c:?}"),
                    })
                }
            };
            tokens.push((start, token));
        }
        Ok(Self {
            tokens,
            pos: 0,
            len: text.len(),
        })
    }

    fn parse(mut self) -> Result<Predicate, SkimError> {
        let expr = self.expr()?;
        if let Some((offset, _)) = self.tokens.get(self.pos) {
            return Err(SkimError::PredicateSyntax {
                offset: *offset,
                message: "trailing input after expression".into(),
            });
        }
        Ok(expr)
    }

    fn expr(&mut self) -> Result<Predicate, SkimError> {
        let mut left = self.term()?;
        loop {
            match self.peek_keyword() {
                Some("and") => {
                    self.pos += 1;
                    let right = self.term()?;
                    left = Predicate::And(Box::new(left), Box::new(right));
                }
                Some("or") => {
                    self.pos += 1;
                    let right = self.term()?;
                    left = Predicate::Or(Box::new(left), Box::new(right));
                }
                _ => return Ok(left),
            }
        }
    }

    fn term(&mut self) -> Result<Predicate, SkimError> {
        if self.peek_keyword() == Some("not") {
            self.pos += 1;
            let inner = self.atom()?;
            return Ok(Predicate::Not(Box::new(inner)));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Predicate, SkimError> {
        match self.tokens.get(self.pos).cloned() {
            Some((_, Token::LParen)) => {
                self.pos += 1;
                let inner = self.expr()?;
                match self.tokens.get(self.pos) {
                    Some((_, Token::RParen)) => {
                        self.pos += 1;
                        Ok(inner)
                    }
                    other => Err(self.err_at(other.map(|t| t.0), "expected ')'")),
                }
            }
            Some((offset, Token::Ident(field))) => {
                if field == "and" || field == "or" || field == "not" {
                    return Err(SkimError::PredicateSyntax {
                        offset,
                        message: format!("keyword {field:?} where a field was expected"),
                    });
                }
                self.pos += 1;
                let op = match self.tokens.get(self.pos) {
                    Some((_, Token::Op(op))) => {
                        let op = *op;
                        self.pos += 1;
                        op
                    }
                    other => return Err(self.err_at(other.map(|t| t.0), "expected comparison operator")),
                };
                match self.tokens.get(self.pos) {
                    Some((_, Token::Int(value))) => {
                        let value = *value;
                        self.pos += 1;
                        Ok(Predicate::Compare { field, op, value })
                    }
                    other => Err(self.err_at(other.map(|t| t.0), "expected integer")),
                }
            }
            other => Err(self.err_at(other.map(|t| t.0), "expected '(', 'not' or a field")),
        }
    }

    fn peek_keyword(&self) -> Option<&str> {
        match self.tokens.get(self.pos) {
            Some((_, Token::Ident(word))) if word == "and" || word == "or" || word == "not" => {
                Some(word.as_str())
            }
            _ => None,
        }
    }

    fn err_at(&self, offset: Option<usize>, message: &str) -> SkimError {
        SkimError::PredicateSyntax {
            offset: offset.unwrap_or(self.len),
            message: message.to_owned(),
        }
    }
}

/// One named selection with its output location.
#[derive(Debug, Clone)]
pub struct SkimDef {
    pub name: String,
    pub predicate: Predicate,
    pub output: PathBuf,
}

impl SkimDef {
    pub fn new(name: impl Into<String>, predicate: Predicate, output: impl Into<PathBuf>) -> Self {
        Self {
            name: name.into(),
            predicate,
            output: output.into(),
        }
    }

    /// Parses the `name=EXPR:OUT` flag form.
    pub fn parse_flag(s: &str) -> Result<Self, SkimError> {
        let (name, rest) = s
            .split_once('=')
            .ok_or_else(|| SkimError::BadDefinition(s.into(), "expected name=EXPR:OUT".into()))?;
        let (expr, out) = rest
            .rsplit_once(':')
            .ok_or_else(|| SkimError::BadDefinition(s.into(), "expected EXPR:OUT".into()))?;
        if name.is_empty() || out.is_empty() {
            return Err(SkimError::BadDefinition(
                s.into(),
                "empty skim name or output path".into(),
            ));
        }
        Ok(Self::new(name, Predicate::parse(expr)?, out))
    }
}

/// Counters from one skim job.
#[derive(Debug, Clone)]
pub struct SkimReport {
    pub input_count: u64,
    pub skim_names: Vec<String>,
    pub accepted: Vec<u64>,
    pub unevaluable: Vec<u64>,
    /// `overlap[i][j]` = events accepted by both skim i and skim j; the
    /// diagonal repeats the per-skim counts.
    pub overlap: Vec<Vec<u64>>,
}

impl SkimReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("input_count={}\n", self.input_count);
        for (i, name) in self.skim_names.iter().enumerate() {
            out.push_str(&format!(
                "skim.{name}.accepted={} skim.{name}.unevaluable={}\n",
                self.accepted[i], self.unevaluable[i]
            ));
        }
        for i in 0..self.skim_names.len() {
            for j in (i + 1)..self.skim_names.len() {
                out.push_str(&format!(
                    "overlap.{}.{}={}\n",
                    self.skim_names[i], self.skim_names[j], self.overlap[i][j]
                ));
            }
        }
        out
    }
}

/// Streams one file through every skim, copying accepted events in order.
pub fn run_skims(
    input: impl AsRef<Path>,
    skims: &[SkimDef],
    compression: bool,
) -> Result<SkimReport, SkimError> {
    for (i, def) in skims.iter().enumerate() {
        if skims[..i].iter().any(|other| other.name == def.name) {
            return Err(SkimError::DuplicateSkimName(def.name.clone()));
        }
    }
    let mut reader = EventFileReader::open(&input)?;
    let header = reader.header().clone();
    let mut writers = Vec::with_capacity(skims.len());
    for def in skims {
        let out_header = EventFileHeader::new(
            FileType::Skim,
            header.experiment,
            header.run,
            def.name.clone(),
        );
        writers.push(EventFileWriter::create(&def.output, out_header, compression)?);
    }

    let n = skims.len();
    let mut report = SkimReport {
        input_count: 0,
        skim_names: skims.iter().map(|d| d.name.clone()).collect(),
        accepted: vec![0; n],
        unevaluable: vec![0; n],
        overlap: vec![vec![0; n]; n],
    };
    let mut hits = vec![false; n];
    while let Some(event) = reader.next_event()? {
        report.input_count += 1;
        for (i, def) in skims.iter().enumerate() {
            hits[i] = def.predicate.eval_event(&event, &mut report.unevaluable[i]);
            if hits[i] {
                report.accepted[i] += 1;
                writers[i].append_event(&event)?;
            }
        }
        for i in 0..n {
            if !hits[i] {
                continue;
            }
            for j in 0..n {
                if hits[j] {
                    report.overlap[i][j] += 1;
                }
            }
        }
    }
    for writer in writers {
        writer.close()?;
    }
    Ok(report)
}

/// Default bank keep-list for the compact analysis format.
pub const DEFAULT_MINIDST_KEEP: [&str; 2] = ["EVTH", "TRKL"];

/// Reduces one event to the keep-list banks, preserving order and identity.
/// Keep-list banks that are absent are simply absent in the output.
pub fn make_minidst(event: &Event, keep: &[&str]) -> Event {
    let mut out = Event::new(
        event.experiment(),
        event.run(),
        event.event_number(),
        event.provenance(),
    );
    for bank in event.banks() {
        if keep.contains(&bank.name().as_str()) {
            out.put_bank(bank.clone()).expect("fresh event, unique banks");
        }
    }
    out.seal();
    out
}

/// Streams a processed file into its compact form.
pub fn write_minidst_file(
    input: impl AsRef<Path>,
    output: impl AsRef<Path>,
    keep: &[&str],
    compression: bool,
) -> Result<u64, SkimError> {
    let mut reader = EventFileReader::open(&input)?;
    let header = reader.header().clone();
    let out_header = EventFileHeader::new(
        FileType::MiniDst,
        header.experiment,
        header.run,
        header.stream_label.clone(),
    );
    let mut writer = EventFileWriter::create(&output, out_header, compression)?;
    while let Some(event) = reader.next_event()? {
        writer.append_event(&make_minidst(&event, keep))?;
    }
    Ok(writer.close()?)
}
