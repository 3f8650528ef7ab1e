//! Filter rules: a Snort-style subset.
//!
//! ```text
//! action proto src_addr src_port -> dst_addr dst_port ( option; ... )
//! ```
//!
//! `action` is one of `alert`, `block`, `allow`; `proto` is `tcp`, `udp`
//! or `any`; addresses are `any`, a dotted quad, or a CIDR block; ports
//! are `any` or a decimal literal. Options are `content:"..."` (quoted
//! ASCII with `|hex|` runs), `nocase` (applies to the preceding content),
//! `msg:"..."` and the mandatory `sid:N`.

use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adu::Adu;
use crate::pcap::Proto;

/// What a middlebox does with an ADU. Ordered by precedence:
/// `Block > Alert > Allow`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MiddleboxAction {
    Allow,
    Alert,
    Block,
}

impl MiddleboxAction {
    pub const ALL: [MiddleboxAction; 3] = [MiddleboxAction::Alert, MiddleboxAction::Block, MiddleboxAction::Allow];

    /// Block and alert both count as a detection.
    pub fn is_detection(self) -> bool {
        self != MiddleboxAction::Allow
    }

    pub fn keyword(self) -> &'static str {
        match self {
            MiddleboxAction::Allow => "allow",
            MiddleboxAction::Alert => "alert",
            MiddleboxAction::Block => "block",
        }
    }
}

impl fmt::Display for MiddleboxAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MiddleboxAction::Allow => "ALLOW",
            MiddleboxAction::Alert => "ALERT",
            MiddleboxAction::Block => "BLOCK",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleProto {
    Tcp,
    Udp,
    Any,
}

impl RuleProto {
    pub const ALL: [RuleProto; 3] = [RuleProto::Tcp, RuleProto::Udp, RuleProto::Any];

    pub fn matches(self, proto: Proto) -> bool {
        match self {
            RuleProto::Any => true,
            RuleProto::Tcp => proto == Proto::Tcp,
            RuleProto::Udp => proto == Proto::Udp,
        }
    }

    pub fn keyword(self) -> &'static str {
        match self {
            RuleProto::Tcp => "tcp",
            RuleProto::Udp => "udp",
            RuleProto::Any => "any",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AddrMatch {
    Any,
    /// A literal address is a /32 block.
    Net {
        addr: Ipv4Addr,
        prefix: u8,
    },
}

impl AddrMatch {
    pub fn matches(self, ip: Ipv4Addr) -> bool {
        match self {
            AddrMatch::Any => true,
            AddrMatch::Net { addr, prefix } => {
                let mask = if prefix == 0 { 0 } else { u32::MAX << (32 - prefix) };
                u32::from(ip) & mask == u32::from(addr) & mask
            }
        }
    }
}

impl fmt::Display for AddrMatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AddrMatch::Any => f.write_str("any"),
            AddrMatch::Net { addr, prefix: 32 } => write!(f, "{addr}"),
            AddrMatch::Net { addr, prefix } => write!(f, "{addr}/{prefix}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PortMatch {
    Any,
    Port(u16),
}

impl PortMatch {
    pub fn matches(self, port: u16) -> bool {
        match self {
            PortMatch::Any => true,
            PortMatch::Port(p) => p == port,
        }
    }

    pub fn is_literal(self) -> bool {
        matches!(self, PortMatch::Port(_))
    }
}

impl fmt::Display for PortMatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PortMatch::Any => f.write_str("any"),
            PortMatch::Port(p) => write!(f, "{p}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContentOption {
    pub pattern: Vec<u8>,
    pub nocase: bool,
}

impl ContentOption {
    pub fn new(pattern: impl Into<Vec<u8>>) -> Self {
        ContentOption {
            pattern: pattern.into(),
            nocase: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FilterRule {
    pub action: MiddleboxAction,
    pub proto: RuleProto,
    pub src_addr: AddrMatch,
    pub src_port: PortMatch,
    pub dst_addr: AddrMatch,
    pub dst_port: PortMatch,
    pub options: Vec<ContentOption>,
    pub sid: u32,
    pub msg: String,
}

impl FilterRule {
    /// Checks the invariants `parse_rule` enforces on parsed text.
    pub fn validate(&self) -> Result<(), RuleError> {
        if let Some(i) = self.options.iter().position(|c| c.pattern.is_empty()) {
            return Err(RuleError::Semantic {
                position: 0,
                message: format!("content option {i} is empty"),
            });
        }
        if self.options.is_empty() && !self.src_port.is_literal() && !self.dst_port.is_literal() {
            return Err(RuleError::Semantic {
                position: 0,
                message: "rule matches everything: needs a content option or a port literal".into(),
            });
        }
        Ok(())
    }

    /// The 5-tuple predicates of the rule against an ADU, ignoring content.
    pub fn header_matches(&self, adu: &Adu) -> bool {
        self.proto.matches(adu.proto)
            && self.src_addr.matches(adu.src.ip)
            && self.dst_addr.matches(adu.dst.ip)
            && self.src_port.matches(adu.src.port)
            && self.dst_port.matches(adu.dst.port)
    }
}

fn write_quoted(f: &mut fmt::Formatter<'_>, bytes: &[u8], allow_hex: bool) -> fmt::Result {
    f.write_str("\"")?;
    let mut in_hex = false;
    for &b in bytes {
        let literal = (0x20..=0x7e).contains(&b) && b != b'|';
        if literal || !allow_hex {
            if in_hex {
                f.write_str("|")?;
                in_hex = false;
            }
            match b {
                b'"' | b'\\' | b';' => write!(f, "\\{}", b as char)?,
                _ if literal => write!(f, "{}", b as char)?,
                // msg text outside printable ASCII is written as-is
                _ => write!(f, "{}", b as char)?,
            }
        } else if in_hex {
            write!(f, " {b:02X}")?;
        } else {
            write!(f, "|{b:02X}")?;
            in_hex = true;
        }
    }
    if in_hex {
        f.write_str("|")?;
    }
    f.write_str("\"")
}

impl fmt::Display for FilterRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} -> {} {} (",
            self.action.keyword(),
            self.proto.keyword(),
            self.src_addr,
            self.src_port,
            self.dst_addr,
            self.dst_port
        )?;
        if !self.msg.is_empty() {
            f.write_str("msg:")?;
            f.write_str("\"")?;
            for c in self.msg.chars() {
                match c {
                    '"' | '\\' | ';' => write!(f, "\\{c}")?,
                    _ => write!(f, "{c}")?,
                }
            }
            f.write_str("\"; ")?;
        }
        for c in &self.options {
            f.write_str("content:")?;
            write_quoted(f, &c.pattern, true)?;
            f.write_str("; ")?;
            if c.nocase {
                f.write_str("nocase; ")?;
            }
        }
        write!(f, "sid:{};)", self.sid)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RuleError {
    #[error("syntax error at {position}: expected {expected}, found {found:?}")]
    Syntax {
        position: usize,
        expected: String,
        found: String,
    },
    #[error("semantic error at {position}: {message}")]
    Semantic { position: usize, message: String },
}

impl RuleError {
    pub fn position(&self) -> usize {
        match self {
            RuleError::Syntax { position, .. } | RuleError::Semantic { position, .. } => *position,
        }
    }
}

struct Cursor<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(|b| b.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn found(&self) -> String {
        if self.pos >= self.src.len() {
            return "end of input".into();
        }
        let end = (self.pos + 12).min(self.src.len());
        String::from_utf8_lossy(&self.src[self.pos..end]).into_owned()
    }

    fn syntax<T>(&self, expected: &str) -> Result<T, RuleError> {
        Err(RuleError::Syntax {
            position: self.pos,
            expected: expected.into(),
            found: self.found(),
        })
    }

    /// A whitespace-delimited word (also stops at '(').
    fn word(&mut self) -> (usize, &'a [u8]) {
        self.skip_ws();
        let start = self.pos;
        while self.peek().is_some_and(|b| !b.is_ascii_whitespace() && b != b'(') {
            self.pos += 1;
        }
        (start, &self.src[start..self.pos])
    }

    fn expect(&mut self, b: u8, what: &str) -> Result<(), RuleError> {
        self.skip_ws();
        if self.peek() == Some(b) {
            self.pos += 1;
            Ok(())
        } else {
            self.syntax(what)
        }
    }

    fn ident(&mut self) -> &'a [u8] {
        let start = self.pos;
        while self.peek().is_some_and(|b| b.is_ascii_lowercase() || b == b'_') {
            self.pos += 1;
        }
        &self.src[start..self.pos]
    }

    fn quoted(&mut self, allow_hex: bool) -> Result<Vec<u8>, RuleError> {
        self.skip_ws();
        if self.peek() != Some(b'"') {
            return self.syntax("'\"'");
        }
        self.pos += 1;
        let mut out = Vec::new();
        loop {
            match self.peek() {
                None => return self.syntax("closing '\"'"),
                Some(b'"') => {
                    self.pos += 1;
                    return Ok(out);
                }
                Some(b'\\') => {
                    self.pos += 1;
                    match self.peek() {
                        Some(c @ (b'"' | b'\\' | b';' | b'|' | b':')) => {
                            out.push(c);
                            self.pos += 1;
                        }
                        _ => return self.syntax("escaped '\"', '\\\\', ';', '|' or ':'"),
                    }
                }
                Some(b'|') if allow_hex => {
                    self.pos += 1;
                    loop {
                        while self.peek() == Some(b' ') {
                            self.pos += 1;
                        }
                        match self.peek() {
                            Some(b'|') => {
                                self.pos += 1;
                                break;
                            }
                            Some(h) if h.is_ascii_hexdigit() => {
                                let lo = self.src.get(self.pos + 1).copied();
                                match lo {
                                    Some(l) if l.is_ascii_hexdigit() => {
                                        out.push(hex_val(h) << 4 | hex_val(l));
                                        self.pos += 2;
                                    }
                                    _ => {
                                        self.pos += 1;
                                        return self.syntax("second hex digit");
                                    }
                                }
                            }
                            _ => return self.syntax("hex byte or closing '|'"),
                        }
                    }
                }
                Some(c) => {
                    out.push(c);
                    self.pos += 1;
                }
            }
        }
    }
}

fn hex_val(h: u8) -> u8 {
    match h {
        b'0'..=b'9' => h - b'0',
        b'a'..=b'f' => h - b'a' + 10,
        _ => h - b'A' + 10,
    }
}

fn parse_addr(pos: usize, w: &[u8]) -> Result<AddrMatch, RuleError> {
    let bad = || RuleError::Syntax {
        position: pos,
        expected: "'any', IPv4 address or CIDR".into(),
        found: String::from_utf8_lossy(w).into_owned(),
    };
    if w == b"any" {
        return Ok(AddrMatch::Any);
    }
    let s = std::str::from_utf8(w).map_err(|_| bad())?;
    let (ip, prefix) = match s.split_once('/') {
        Some((ip, p)) => {
            if p.is_empty() || p.len() > 2 || !p.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            let p: u8 = p.parse().map_err(|_| bad())?;
            if p > 32 {
                return Err(bad());
            }
            (ip, p)
        }
        None => (s, 32),
    };
    let addr: Ipv4Addr = ip.parse().map_err(|_| bad())?;
    Ok(AddrMatch::Net { addr, prefix })
}

fn parse_port(pos: usize, w: &[u8]) -> Result<PortMatch, RuleError> {
    if w == b"any" {
        return Ok(PortMatch::Any);
    }
    if !w.is_empty() && w.len() <= 5 && w.iter().all(u8::is_ascii_digit) {
        if let Ok(p) = std::str::from_utf8(w).expect("ascii digits").parse::<u16>() {
            return Ok(PortMatch::Port(p));
        }
    }
    Err(RuleError::Syntax {
        position: pos,
        expected: "'any' or port number 0-65535".into(),
        found: String::from_utf8_lossy(w).into_owned(),
    })
}

/// Parses one rule.
pub fn parse_rule(text: &str) -> Result<FilterRule, RuleError> {
    let mut c = Cursor {
        src: text.as_bytes(),
        pos: 0,
    };

    let (pos, w) = c.word();
    let action = match w {
        b"alert" => MiddleboxAction::Alert,
        b"block" => MiddleboxAction::Block,
        b"allow" => MiddleboxAction::Allow,
        _ => {
            c.pos = pos;
            return c.syntax("action 'alert', 'block' or 'allow'");
        }
    };
    let (pos, w) = c.word();
    let proto = match w {
        b"tcp" => RuleProto::Tcp,
        b"udp" => RuleProto::Udp,
        b"any" => RuleProto::Any,
        _ => {
            c.pos = pos;
            return c.syntax("protocol 'tcp', 'udp' or 'any'");
        }
    };
    let (pos, w) = c.word();
    let src_addr = parse_addr(pos, w)?;
    let (pos, w) = c.word();
    let src_port = parse_port(pos, w)?;
    let (pos, w) = c.word();
    if w != b"->" {
        c.pos = pos;
        return c.syntax("'->'");
    }
    let (pos, w) = c.word();
    let dst_addr = parse_addr(pos, w)?;
    let (pos, w) = c.word();
    let dst_port = parse_port(pos, w)?;
    c.expect(b'(', "'('")?;

    let mut options: Vec<ContentOption> = Vec::new();
    let mut sid: Option<u32> = None;
    let mut msg: Option<String> = None;
    loop {
        c.skip_ws();
        match c.peek() {
            Some(b')') => {
                c.pos += 1;
                break;
            }
            None => return c.syntax("option or ')'"),
            _ => {}
        }
        let key_pos = c.pos;
        let key = c.ident();
        match key {
            b"content" => {
                c.expect(b':', "':'")?;
                let value_pos = c.pos;
                let pattern = c.quoted(true)?;
                if pattern.is_empty() {
                    return Err(RuleError::Semantic {
                        position: value_pos,
                        message: "empty content pattern".into(),
                    });
                }
                options.push(ContentOption { pattern, nocase: false });
            }
            b"nocase" => match options.last_mut() {
                Some(last) if !last.nocase => last.nocase = true,
                Some(_) => {
                    return Err(RuleError::Semantic {
                        position: key_pos,
                        message: "duplicate nocase".into(),
                    })
                }
                None => {
                    return Err(RuleError::Semantic {
                        position: key_pos,
                        message: "nocase without a preceding content".into(),
                    })
                }
            },
            b"sid" => {
                c.expect(b':', "':'")?;
                c.skip_ws();
                let start = c.pos;
                while c.peek().is_some_and(|b| b.is_ascii_digit()) {
                    c.pos += 1;
                }
                let digits = &c.src[start..c.pos];
                let value = std::str::from_utf8(digits)
                    .ok()
                    .filter(|d| !d.is_empty())
                    .and_then(|d| d.parse::<u32>().ok());
                let Some(value) = value else {
                    c.pos = start;
                    return c.syntax("sid number");
                };
                if sid.replace(value).is_some() {
                    return Err(RuleError::Semantic {
                        position: key_pos,
                        message: "duplicate sid".into(),
                    });
                }
            }
            b"msg" => {
                c.expect(b':', "':'")?;
                let text = c.quoted(false)?;
                if msg.replace(String::from_utf8_lossy(&text).into_owned()).is_some() {
                    return Err(RuleError::Semantic {
                        position: key_pos,
                        message: "duplicate msg".into(),
                    });
                }
            }
            _ => {
                c.pos = key_pos;
                return c.syntax("option 'content', 'nocase', 'sid' or 'msg'");
            }
        }
        c.expect(b';', "';'")?;
    }
    c.skip_ws();
    if c.pos != c.src.len() {
        return c.syntax("end of rule");
    }
    let Some(sid) = sid else {
        return Err(RuleError::Semantic {
            position: c.pos,
            message: "missing sid".into(),
        });
    };
    let rule = FilterRule {
        action,
        proto,
        src_addr,
        src_port,
        dst_addr,
        dst_port,
        options,
        sid,
        msg: msg.unwrap_or_default(),
    };
    rule.validate().map_err(|e| match e {
        RuleError::Semantic { message, .. } => RuleError::Semantic { position: 0, message },
        other => other,
    })?;
    Ok(rule)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RuleSetError {
    #[error("line {line}: {error}")]
    Rule { line: usize, error: RuleError },
    #[error("duplicate sid {0}")]
    DuplicateSid(u32),
}

/// An ordered list of rules with unique sids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RuleSet {
    rules: Vec<FilterRule>,
}

impl RuleSet {
    pub fn new(rules: Vec<FilterRule>) -> Result<Self, RuleSetError> {
        let mut seen = std::collections::HashSet::new();
        for r in &rules {
            if !seen.insert(r.sid) {
                return Err(RuleSetError::DuplicateSid(r.sid));
            }
        }
        Ok(RuleSet { rules })
    }

    pub fn empty() -> Self {
        RuleSet::default()
    }

    pub fn single(rule: FilterRule) -> Self {
        RuleSet { rules: vec![rule] }
    }

    /// Parses one rule per line; blank lines and `#` comments are skipped.
    /// Line numbers in errors are 1-based.
    pub fn parse(text: &str) -> Result<Self, RuleSetError> {
        let mut rules = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let rule = parse_rule(line).map_err(|error| RuleSetError::Rule { line: i + 1, error })?;
            rules.push(rule);
        }
        RuleSet::new(rules)
    }

    pub fn rules(&self) -> &[FilterRule] {
        &self.rules
    }

    pub fn rules_mut(&mut self) -> &mut [FilterRule] {
        &mut self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Canonical text; identical rule sets render identically.
    pub fn canonical(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for RuleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rules {
            writeln!(f, "{r}")?;
        }
        Ok(())
    }
}
