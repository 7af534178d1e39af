//! Security rules: the variable catalog and the rule-file language.
//!
//! ```text
//! # comments run to end of line
//! extension TENANT_ID
//!
//! rule tz {
//!     match: DB_TYPE == "ORACLE"
//!     outlier: distinct($(CTIMEZONE)$, $(COLLECTOR_HOST_NAME)$)
//!     con_min_count: 1000
//!     confidence: 0.95
//!     action: terminate
//! }
//! ```

use std::collections::HashSet;
use std::fmt;

use crate::engine::ConnectionEvent;
use crate::error::PolicyError;

pub const DEFAULT_CON_MIN_COUNT: u64 = 1000;
pub const DEFAULT_CONFIDENCE: f64 = 0.95;

/// Built-in security rule variables.
pub const CATALOG: &[&str] = &[
    // database
    "DB_USER",
    "DB_NAME",
    "DB_TYPE",
    "SERVICE_NAME",
    // client
    "CLIENT_IP",
    "CLIENT_HOST_NAME",
    "CLIENT_OS_NAME",
    "AUTH_TYPE",
    "SOURCE_PROGRAM",
    "NET_PROTOCOL",
    "OS_USER",
    "SESSION_INFO",
    "SESSION_KEY",
    "CTIMEZONE",
    "DATETIME",
    // server
    "SERVER_IP",
    "SERVER_HOST_NAME",
    "SERVER_DESC",
    "SERVER_OS_NAME",
    "SENDER_IP",
    // query
    "STATEMENT_KEY",
    "COMMAND",
    "ERROR",
    "CONSTRUCT_KEY",
    "LITERALS_KEY",
    // collector
    "COLLECTOR_HOST_NAME",
];

/// A security rule variable name, `[A-Z][A-Z0-9_]*`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VariableName(String);

impl VariableName {
    /// Checks the name syntax only; catalog membership is checked separately.
    pub fn new(name: &str) -> Option<Self> {
        Self::is_valid(name).then(|| Self(name.to_owned()))
    }

    pub fn is_valid(name: &str) -> bool {
        let mut bytes = name.bytes();
        matches!(bytes.next(), Some(b'A'..=b'Z'))
            && bytes.all(|b| matches!(b, b'A'..=b'Z' | b'0'..=b'9' | b'_'))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn in_catalog(&self) -> bool {
        CATALOG.contains(&self.0.as_str())
    }
}

impl fmt::Display for VariableName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Alert,
    Terminate,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::Alert => "alert",
            Action::Terminate => "terminate",
        }
    }
}

/// One `VAR == "literal"` term of a match predicate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchTerm {
    pub var: VariableName,
    pub value: String,
}

/// One outlier definition.
#[derive(Debug, Clone, PartialEq)]
pub struct SecurityRule {
    pub id: String,
    /// Conjunction of equality terms; empty means the rule sees every event.
    pub match_predicate: Vec<MatchTerm>,
    /// The DISTINCT tuple. Order fixes the hash input.
    pub outlier_vars: Vec<VariableName>,
    pub con_min_count: u64,
    pub confidence: f64,
    pub action: Action,
}

impl SecurityRule {
    pub fn new(id: impl Into<String>, outlier_vars: Vec<VariableName>, action: Action) -> Self {
        Self {
            id: id.into(),
            match_predicate: Vec::new(),
            outlier_vars,
            con_min_count: DEFAULT_CON_MIN_COUNT,
            confidence: DEFAULT_CONFIDENCE,
            action,
        }
    }

    pub fn with_match(mut self, var: VariableName, value: impl Into<String>) -> Self {
        self.match_predicate.push(MatchTerm {
            var,
            value: value.into(),
        });
        self
    }

    pub fn with_con_min_count(mut self, con_min_count: u64) -> Self {
        self.con_min_count = con_min_count;
        self
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = confidence;
        self
    }

    /// `1 - confidence`.
    pub fn delta(&self) -> f64 {
        1.0 - self.confidence
    }

    fn variables(&self) -> impl Iterator<Item = &VariableName> {
        self.match_predicate
            .iter()
            .map(|t| &t.var)
            .chain(self.outlier_vars.iter())
    }
}

impl fmt::Display for SecurityRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "rule {} {{", self.id)?;
        if !self.match_predicate.is_empty() {
            f.write_str("    match: ")?;
            for (i, term) in self.match_predicate.iter().enumerate() {
                if i > 0 {
                    f.write_str(" && ")?;
                }
                write!(f, "{} == ", term.var)?;
                write_quoted(f, &term.value)?;
            }
            f.write_str("\n")?;
        }
        f.write_str("    outlier: distinct(")?;
        for (i, var) in self.outlier_vars.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "$({var})$")?;
        }
        f.write_str(")\n")?;
        writeln!(f, "    con_min_count: {}", self.con_min_count)?;
        writeln!(f, "    confidence: {}", self.confidence)?;
        writeln!(f, "    action: {}", self.action.as_str())?;
        f.write_str("}\n")
    }
}

fn write_quoted(f: &mut fmt::Formatter<'_>, s: &str) -> fmt::Result {
    f.write_str("\"")?;
    for c in s.chars() {
        if c == '"' || c == '\\' {
            f.write_str("\\")?;
        }
        write!(f, "{c}")?;
    }
    f.write_str("\"")
}

/// A parsed rule file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Policy {
    pub extensions: Vec<VariableName>,
    pub rules: Vec<SecurityRule>,
}

impl Policy {
    pub fn rule(&self, id: &str) -> Option<&SecurityRule> {
        self.rules.iter().find(|r| r.id == id)
    }

    /// True for catalog variables and declared extensions.
    pub fn knows(&self, var: &VariableName) -> bool {
        var.in_catalog() || self.extensions.contains(var)
    }
}

/// Canonical text form; parsing it back yields an equal policy.
impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for ext in &self.extensions {
            writeln!(f, "extension {ext}")?;
        }
        for (i, rule) in self.rules.iter().enumerate() {
            if i > 0 || !self.extensions.is_empty() {
                f.write_str("\n")?;
            }
            write!(f, "{rule}")?;
        }
        Ok(())
    }
}

/// True iff every predicate term equals the event's value byte for byte.
/// A term whose variable is missing from the event is false.
pub fn rule_matches(rule: &SecurityRule, event: &ConnectionEvent) -> bool {
    rule.match_predicate
        .iter()
        .all(|t| event.get(t.var.as_str()) == Some(t.value.as_str()))
}

pub fn parse_policy(source: &str) -> Result<Policy, PolicyError> {
    let tokens = Lexer::new(source).tokenize()?;
    let mut parser = Parser {
        tokens,
        pos: 0,
        eof: end_position(source),
    };
    let parsed = parser.policy()?;
    validate(parsed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Pos {
    line: usize,
    column: usize,
}

fn end_position(source: &str) -> Pos {
    let mut pos = Pos { line: 1, column: 1 };
    for c in source.chars() {
        if c == '\n' {
            pos.line += 1;
            pos.column = 1;
        } else {
            pos.column += 1;
        }
    }
    pos
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Str(String),
    Number(String),
    LBrace,
    RBrace,
    LParen,
    RParen,
    Comma,
    Colon,
    AndAnd,
    EqEq,
    VarOpen,
    VarClose,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Str(_) => f.write_str("string literal"),
            Tok::Number(s) => write!(f, "number `{s}`"),
            Tok::LBrace => f.write_str("`{`"),
            Tok::RBrace => f.write_str("`}`"),
            Tok::LParen => f.write_str("`(`"),
            Tok::RParen => f.write_str("`)`"),
            Tok::Comma => f.write_str("`,`"),
            Tok::Colon => f.write_str("`:`"),
            Tok::AndAnd => f.write_str("`&&`"),
            Tok::EqEq => f.write_str("`==`"),
            Tok::VarOpen => f.write_str("`$(`"),
            Tok::VarClose => f.write_str("`)$`"),
        }
    }
}

struct Lexer<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    pos: Pos,
}

impl<'a> Lexer<'a> {
    fn new(source: &'a str) -> Self {
        Self {
            chars: source.chars().peekable(),
            pos: Pos { line: 1, column: 1 },
        }
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.next()?;
        if c == '\n' {
            self.pos.line += 1;
            self.pos.column = 1;
        } else {
            self.pos.column += 1;
        }
        Some(c)
    }

    fn error(pos: Pos, message: impl Into<String>) -> PolicyError {
        PolicyError::Syntax {
            line: pos.line,
            column: pos.column,
            message: message.into(),
        }
    }

    fn tokenize(mut self) -> Result<Vec<(Tok, Pos)>, PolicyError> {
        let mut out = Vec::new();
        while let Some(&c) = self.chars.peek() {
            let start = self.pos;
            if c.is_whitespace() {
                self.bump();
                continue;
            }
            if c == '#' {
                while let Some(c) = self.bump() {
                    if c == '\n' {
                        break;
                    }
                }
                continue;
            }
            let tok = match c {
                '{' | '}' | '(' | ',' | ':' => {
                    self.bump();
                    match c {
                        '{' => Tok::LBrace,
                        '}' => Tok::RBrace,
                        '(' => Tok::LParen,
                        ',' => Tok::Comma,
                        _ => Tok::Colon,
                    }
                }
                ')' => {
                    self.bump();
                    if self.chars.peek() == Some(&'$') {
                        self.bump();
                        Tok::VarClose
                    } else {
                        Tok::RParen
                    }
                }
                '$' => {
                    self.bump();
                    if self.bump() != Some('(') {
                        return Err(Self::error(start, "expected `$(`"));
                    }
                    Tok::VarOpen
                }
                '&' => {
                    self.bump();
                    if self.bump() != Some('&') {
                        return Err(Self::error(start, "expected `&&`"));
                    }
                    Tok::AndAnd
                }
                '=' => {
                    self.bump();
                    if self.bump() != Some('=') {
                        return Err(Self::error(start, "expected `==`"));
                    }
                    Tok::EqEq
                }
                '"' => Tok::Str(self.string(start)?),
                c if c.is_ascii_digit() || c == '-' || c == '.' => Tok::Number(self.number()),
                c if c.is_ascii_alphabetic() || c == '_' => {
                    let mut s = String::new();
                    while let Some(&c) = self.chars.peek() {
                        if c.is_ascii_alphanumeric() || c == '_' {
                            s.push(c);
                            self.bump();
                        } else {
                            break;
                        }
                    }
                    Tok::Ident(s)
                }
                other => return Err(Self::error(start, format!("unexpected character {other:?}"))),
            };
            out.push((tok, start));
        }
        Ok(out)
    }

    fn string(&mut self, start: Pos) -> Result<String, PolicyError> {
        self.bump();
        let mut s = String::new();
        loop {
            let at = self.pos;
            match self.bump() {
                None => return Err(Self::error(start, "unterminated string literal")),
                Some('"') => return Ok(s),
                Some('\\') => match self.bump() {
                    Some(c @ ('"' | '\\')) => s.push(c),
                    _ => return Err(Self::error(at, "unsupported escape sequence")),
                },
                Some(c) => s.push(c),
            }
        }
    }

    fn number(&mut self) -> String {
        let mut s = String::new();
        let mut prev = '\0';
        while let Some(&c) = self.chars.peek() {
            let sign_after_exp = (c == '+' || c == '-') && (prev == 'e' || prev == 'E');
            let leading_minus = c == '-' && s.is_empty();
            if c.is_ascii_digit() || c == '.' || c == 'e' || c == 'E' || sign_after_exp || leading_minus
            {
                s.push(c);
                prev = c;
                self.bump();
            } else {
                break;
            }
        }
        s
    }
}

// Parse tree with source positions kept for semantic errors.
struct RawRule {
    rule: SecurityRule,
    id_pos: Pos,
    var_pos: Vec<Pos>,
    outlier_pos: Pos,
}

struct RawPolicy {
    extensions: Vec<VariableName>,
    rules: Vec<RawRule>,
}

struct Parser {
    tokens: Vec<(Tok, Pos)>,
    pos: usize,
    eof: Pos,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|(t, _)| t)
    }

    fn here(&self) -> Pos {
        self.tokens.get(self.pos).map_or(self.eof, |(_, p)| *p)
    }

    fn error_here(&self, message: impl Into<String>) -> PolicyError {
        let pos = self.here();
        PolicyError::Syntax {
            line: pos.line,
            column: pos.column,
            message: message.into(),
        }
    }

    fn unexpected(&self, expected: &str) -> PolicyError {
        match self.peek() {
            Some(tok) => self.error_here(format!("expected {expected}, found {tok}")),
            None => self.error_here(format!("expected {expected}, found end of input")),
        }
    }

    fn next(&mut self) -> Option<(Tok, Pos)> {
        let item = self.tokens.get(self.pos).cloned();
        if item.is_some() {
            self.pos += 1;
        }
        item
    }

    fn expect(&mut self, tok: Tok) -> Result<Pos, PolicyError> {
        if self.peek() == Some(&tok) {
            Ok(self.next().expect("peeked").1)
        } else {
            Err(self.unexpected(&tok.to_string()))
        }
    }

    fn ident(&mut self, what: &str) -> Result<(String, Pos), PolicyError> {
        match self.peek() {
            Some(Tok::Ident(_)) => match self.next() {
                Some((Tok::Ident(s), p)) => Ok((s, p)),
                _ => unreachable!(),
            },
            _ => Err(self.unexpected(what)),
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<(), PolicyError> {
        match self.peek() {
            Some(Tok::Ident(s)) if s == kw => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(self.unexpected(&format!("`{kw}`"))),
        }
    }

    fn variable_name(&mut self) -> Result<(VariableName, Pos), PolicyError> {
        let (name, pos) = self.ident("variable name")?;
        VariableName::new(&name)
            .map(|v| (v, pos))
            .ok_or(PolicyError::InvalidVariableName {
                name,
                line: pos.line,
                column: pos.column,
            })
    }

    fn policy(&mut self) -> Result<RawPolicy, PolicyError> {
        let mut policy = RawPolicy {
            extensions: Vec::new(),
            rules: Vec::new(),
        };
        while let Some(tok) = self.peek() {
            match tok {
                Tok::Ident(kw) if kw == "extension" => {
                    self.pos += 1;
                    let (var, _) = self.variable_name()?;
                    if !policy.extensions.contains(&var) {
                        policy.extensions.push(var);
                    }
                }
                Tok::Ident(kw) if kw == "rule" => {
                    self.pos += 1;
                    policy.rules.push(self.rule()?);
                }
                _ => return Err(self.unexpected("`rule` or `extension`")),
            }
        }
        Ok(policy)
    }

    fn rule(&mut self) -> Result<RawRule, PolicyError> {
        let (id, id_pos) = self.ident("rule id")?;
        self.expect(Tok::LBrace)?;

        let mut match_predicate = None;
        let mut outlier: Option<(Vec<VariableName>, Vec<Pos>, Pos)> = None;
        let mut con_min_count = None;
        let mut confidence = None;
        let mut action = None;
        let mut match_pos = Vec::new();

        loop {
            if self.peek() == Some(&Tok::RBrace) {
                self.pos += 1;
                break;
            }
            let (key, key_pos) = self.ident("rule field or `}`")?;
            self.expect(Tok::Colon)?;
            let duplicate = |present: bool| -> Result<(), PolicyError> {
                if present {
                    Err(PolicyError::Syntax {
                        line: key_pos.line,
                        column: key_pos.column,
                        message: format!("field `{key}` given twice"),
                    })
                } else {
                    Ok(())
                }
            };
            match key.as_str() {
                "match" => {
                    duplicate(match_predicate.is_some())?;
                    let mut terms = Vec::new();
                    loop {
                        let (var, pos) = self.variable_name()?;
                        self.expect(Tok::EqEq)?;
                        let value = match self.next() {
                            Some((Tok::Str(s), _)) => s,
                            _ => {
                                self.pos -= 1;
                                return Err(self.unexpected("string literal"));
                            }
                        };
                        terms.push(MatchTerm { var, value });
                        match_pos.push(pos);
                        if self.peek() == Some(&Tok::AndAnd) {
                            self.pos += 1;
                        } else {
                            break;
                        }
                    }
                    match_predicate = Some(terms);
                }
                "outlier" => {
                    duplicate(outlier.is_some())?;
                    self.keyword("distinct")?;
                    let open = self.expect(Tok::LParen)?;
                    let mut vars = Vec::new();
                    let mut positions = Vec::new();
                    if self.peek() != Some(&Tok::RParen) {
                        loop {
                            self.expect(Tok::VarOpen)?;
                            let (var, pos) = self.variable_name()?;
                            self.expect(Tok::VarClose)?;
                            vars.push(var);
                            positions.push(pos);
                            if self.peek() == Some(&Tok::Comma) {
                                self.pos += 1;
                            } else {
                                break;
                            }
                        }
                    }
                    self.expect(Tok::RParen)?;
                    outlier = Some((vars, positions, open));
                }
                "con_min_count" => {
                    duplicate(con_min_count.is_some())?;
                    let pos = self.here();
                    match self.next() {
                        Some((Tok::Number(s), _)) => match s.parse::<u64>() {
                            Ok(v) => con_min_count = Some(v),
                            Err(_) => {
                                return Err(PolicyError::Syntax {
                                    line: pos.line,
                                    column: pos.column,
                                    message: format!("`{s}` is not an unsigned integer"),
                                })
                            }
                        },
                        _ => {
                            self.pos -= 1;
                            return Err(self.unexpected("unsigned integer"));
                        }
                    }
                }
                "confidence" => {
                    duplicate(confidence.is_some())?;
                    let pos = self.here();
                    match self.next() {
                        Some((Tok::Number(s), _)) => {
                            let value: f64 = s.parse().map_err(|_| PolicyError::Syntax {
                                line: pos.line,
                                column: pos.column,
                                message: format!("`{s}` is not a number"),
                            })?;
                            if !(value > 0.0 && value < 1.0) {
                                return Err(PolicyError::ConfidenceOutOfRange {
                                    value,
                                    line: pos.line,
                                    column: pos.column,
                                });
                            }
                            confidence = Some(value);
                        }
                        _ => {
                            self.pos -= 1;
                            return Err(self.unexpected("number"));
                        }
                    }
                }
                "action" => {
                    duplicate(action.is_some())?;
                    let (word, pos) = self.ident("`alert` or `terminate`")?;
                    action = Some(match word.as_str() {
                        "alert" => Action::Alert,
                        "terminate" => Action::Terminate,
                        _ => {
                            return Err(PolicyError::Syntax {
                                line: pos.line,
                                column: pos.column,
                                message: format!("unknown action `{word}`"),
                            })
                        }
                    });
                }
                _ => {
                    return Err(PolicyError::Syntax {
                        line: key_pos.line,
                        column: key_pos.column,
                        message: format!("unknown rule field `{key}`"),
                    })
                }
            }
        }

        let missing = |field: &str| PolicyError::Syntax {
            line: id_pos.line,
            column: id_pos.column,
            message: format!("rule `{id}` is missing `{field}:`"),
        };
        let (outlier_vars, outlier_var_pos, outlier_pos) =
            outlier.ok_or_else(|| missing("outlier"))?;
        let action = action.ok_or_else(|| missing("action"))?;

        let mut var_pos = match_pos;
        var_pos.extend(outlier_var_pos);
        Ok(RawRule {
            rule: SecurityRule {
                id,
                match_predicate: match_predicate.unwrap_or_default(),
                outlier_vars,
                con_min_count: con_min_count.unwrap_or(DEFAULT_CON_MIN_COUNT),
                confidence: confidence.unwrap_or(DEFAULT_CONFIDENCE),
                action,
            },
            id_pos,
            var_pos,
            outlier_pos,
        })
    }
}

fn validate(raw: RawPolicy) -> Result<Policy, PolicyError> {
    let mut policy = Policy {
        extensions: raw.extensions,
        rules: Vec::with_capacity(raw.rules.len()),
    };
    let mut ids = HashSet::new();
    for r in raw.rules {
        if !ids.insert(r.rule.id.clone()) {
            return Err(PolicyError::DuplicateRule {
                id: r.rule.id,
                line: r.id_pos.line,
                column: r.id_pos.column,
            });
        }
        if r.rule.outlier_vars.is_empty() {
            return Err(PolicyError::EmptyOutlierVars {
                line: r.outlier_pos.line,
                column: r.outlier_pos.column,
            });
        }
        for (var, pos) in r.rule.variables().zip(&r.var_pos) {
            if !policy.knows(var) {
                return Err(PolicyError::UnknownVariable {
                    name: var.to_string(),
                    line: pos.line,
                    column: pos.column,
                });
            }
        }
        let offset = r.rule.match_predicate.len();
        let mut seen = HashSet::new();
        for (i, var) in r.rule.outlier_vars.iter().enumerate() {
            if !seen.insert(var) {
                let pos = r.var_pos[offset + i];
                return Err(PolicyError::DuplicateOutlierVar {
                    name: var.to_string(),
                    line: pos.line,
                    column: pos.column,
                });
            }
        }
        policy.rules.push(r.rule);
    }
    Ok(policy)
}
