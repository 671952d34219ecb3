//! Trace events.
//!
//! One line per event: `tick, actor, KIND, addr, k=v k=v ...`. Byte strings
//! are hex encoded. The same text is written to trace files and parsed back
//! by the checker, so a trace file is a complete record of a run.

use std::fmt;
use std::str::FromStr;

use crate::fabric::{ActorId, RemoteAddr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Search,
    Insert,
    Update,
    Delete,
}

impl OpKind {
    pub const ALL: [OpKind; 4] = [OpKind::Search, OpKind::Insert, OpKind::Update, OpKind::Delete];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Search => "SEARCH",
            OpKind::Insert => "INSERT",
            OpKind::Update => "UPDATE",
            OpKind::Delete => "DELETE",
        }
    }

    pub fn is_write(self) -> bool {
        self != OpKind::Search
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        OpKind::ALL.into_iter().find(|k| k.name().eq_ignore_ascii_case(s)).ok_or_else(|| format!("unknown op {s}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Status {
    Ok,
    NotFound,
    Exists,
    TableFull,
    Error,
}

impl Status {
    pub fn name(self) -> &'static str {
        match self {
            Status::Ok => "OK",
            Status::NotFound => "NOT_FOUND",
            Status::Exists => "EXISTS",
            Status::TableFull => "TABLE_FULL",
            Status::Error => "ERROR",
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Status {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        [Status::Ok, Status::NotFound, Status::Exists, Status::TableFull, Status::Error]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown status {s}"))
    }
}

/// Failure positions inside a write workflow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CrashPoint {
    /// While writing the KV object: all but its last byte lands.
    C0,
    /// After the backup CASes, before the log commit.
    C1,
    /// After the log commit, before the primary CAS.
    C2,
    /// After the primary CAS, before responding.
    C3,
}

impl CrashPoint {
    pub const ALL: [CrashPoint; 4] = [CrashPoint::C0, CrashPoint::C1, CrashPoint::C2, CrashPoint::C3];
}

impl fmt::Display for CrashPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", *self as u8)
    }
}

impl FromStr for CrashPoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "c0" => Ok(CrashPoint::C0),
            "c1" => Ok(CrashPoint::C1),
            "c2" => Ok(CrashPoint::C2),
            "c3" => Ok(CrashPoint::C3),
            _ => Err(format!("unknown crash point {s}")),
        }
    }
}

/// One trace line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub tick: u64,
    pub actor: ActorId,
    pub kind: String,
    pub addr: Option<RemoteAddr>,
    pub fields: Vec<(String, String)>,
}

impl Event {
    pub fn new(tick: u64, actor: ActorId, kind: &str) -> Self {
        Event { tick, actor, kind: kind.to_string(), addr: None, fields: Vec::new() }
    }

    pub fn at(mut self, addr: RemoteAddr) -> Self {
        self.addr = Some(addr);
        self
    }

    pub fn with(mut self, k: &str, v: impl fmt::Display) -> Self {
        self.fields.push((k.to_string(), v.to_string()));
        self
    }

    pub fn with_bytes(self, k: &str, v: &[u8]) -> Self {
        self.with(k, hex::encode(v))
    }

    pub fn with_word(self, k: &str, w: u64) -> Self {
        self.with(k, format!("{w:#x}"))
    }

    pub fn get(&self, k: &str) -> Option<&str> {
        self.fields.iter().find(|(f, _)| f == k).map(|(_, v)| v.as_str())
    }

    pub fn get_u64(&self, k: &str) -> Option<u64> {
        let v = self.get(k)?;
        match v.strip_prefix("0x") {
            Some(h) => u64::from_str_radix(h, 16).ok(),
            None => v.parse().ok(),
        }
    }

    pub fn get_bytes(&self, k: &str) -> Option<Vec<u8>> {
        hex::decode(self.get(k)?).ok()
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}, {}, {}, ", self.tick, self.actor, self.kind)?;
        match self.addr {
            Some(a) => write!(f, "{a}, ")?,
            None => f.write_str("-, ")?,
        }
        let mut first = true;
        for (k, v) in &self.fields {
            if !first {
                f.write_str(" ")?;
            }
            first = false;
            write!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

fn parse_actor(s: &str) -> Result<ActorId, String> {
    if s == "master" {
        return Ok(ActorId::MASTER);
    }
    s.strip_prefix('c').and_then(|v| v.parse().ok()).map(ActorId).ok_or_else(|| format!("bad actor {s}"))
}

impl FromStr for Event {
    type Err = String;

    fn from_str(line: &str) -> Result<Self, String> {
        let mut parts = line.splitn(5, ", ");
        let mut next = || parts.next().ok_or_else(|| format!("short trace line: {line}"));
        let tick = next()?.trim().parse().map_err(|e| format!("bad tick in {line}: {e}"))?;
        let actor = parse_actor(next()?.trim())?;
        let kind = next()?.trim().to_string();
        let addr = match next()?.trim() {
            "-" => None,
            a => Some(a.parse()?),
        };
        let rest = parts.next().unwrap_or("");
        let fields = rest
            .split_whitespace()
            .map(|tok| {
                tok.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| format!("bad field {tok} in {line}"))
            })
            .collect::<Result<_, _>>()?;
        Ok(Event { tick, actor, kind, addr, fields })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::NodeId;

    #[test]
    fn event_roundtrip() {
        let e = Event::new(42, ActorId(3), "INVOKE")
            .at(RemoteAddr::new(NodeId(1), 0x40))
            .with("id", 7)
            .with("op", OpKind::Update)
            .with_bytes("key", b"k1")
            .with_word("word", 0xabc);
        let line = e.to_string();
        assert_eq!(line, "42, c3, INVOKE, n1:0x40, id=7 op=UPDATE key=6b31 word=0xabc");
        let back: Event = line.parse().unwrap();
        assert_eq!(back, e);
        assert_eq!(back.get_u64("word"), Some(0xabc));
        assert_eq!(back.get_bytes("key").unwrap(), b"k1");
    }

    #[test]
    fn master_and_empty_fields() {
        let e = Event::new(1, ActorId::MASTER, "INSTALL_VIEW");
        let back: Event = e.to_string().parse().unwrap();
        assert_eq!(back, e);
    }
}
