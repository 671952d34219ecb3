//! Scenario description and its flat `key = value` text form.
//!
//! ```text
//! seed = 7
//! clients = 8
//! mns = 3
//! r = 3
//! keys = 64
//! ops = 10000
//! workload = A          # or: mix = 50:0:50:0 (search:insert:update:delete)
//! dist = zipf:0.99      # or: uniform
//! crash = node:2:400                 # node 2 at tick 400
//! crash = client:1:tick:300          # client 1 at tick 300
//! crash = client:1:c2:update:3       # client 1 at c2 of its 4th UPDATE
//! ```

use std::fmt::Write as _;
use std::str::FromStr;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::event::{CrashPoint, OpKind};
use crate::fabric::{ActorId, NodeId};

/// Operation ratios. They need not sum to one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mix {
    pub search: f64,
    pub insert: f64,
    pub update: f64,
    pub delete: f64,
}

impl Mix {
    /// YCSB-style workload shapes A to D.
    pub fn shape(name: &str) -> Option<Mix> {
        let m = |search, insert, update| Mix { search, insert, update, delete: 0.0 };
        match name.to_ascii_uppercase().as_str() {
            "A" => Some(m(0.5, 0.0, 0.5)),
            "B" => Some(m(0.95, 0.0, 0.05)),
            "C" => Some(m(1.0, 0.0, 0.0)),
            "D" => Some(m(0.95, 0.05, 0.0)),
            _ => None,
        }
    }

    fn total(&self) -> f64 {
        self.search + self.insert + self.update + self.delete
    }

    /// Pick an operation for a uniform draw in `[0, 1)`.
    pub fn pick(&self, u: f64) -> OpKind {
        let x = u * self.total();
        if x < self.search {
            OpKind::Search
        } else if x < self.search + self.insert {
            OpKind::Insert
        } else if x < self.search + self.insert + self.update {
            OpKind::Update
        } else {
            OpKind::Delete
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dist {
    Uniform,
    Zipf(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrashSpec {
    Node {
        node: NodeId,
        tick: u64,
    },
    ClientAt {
        client: ActorId,
        tick: u64,
    },
    /// Crash at a step boundary of the client's `skip`-th matching write.
    ClientPoint {
        client: ActorId,
        point: CrashPoint,
        op: Option<OpKind>,
        skip: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Random,
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub seed: u64,
    pub clients: usize,
    pub mns: usize,
    pub r: usize,
    pub keys: usize,
    /// Requests across all clients (split evenly).
    pub ops: usize,
    pub workload: Option<String>,
    pub mix: Mix,
    pub dist: Dist,
    pub value_size: usize,
    /// Insert every key before the clients start.
    pub preload: bool,
    pub crashes: Vec<CrashSpec>,
    pub mode: Mode,
    pub max_ticks: u64,
    pub cache: bool,
    pub logging: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            seed: 1,
            clients: 4,
            mns: 3,
            r: 3,
            keys: 16,
            ops: 400,
            workload: Some("A".into()),
            mix: Mix::shape("A").unwrap(),
            dist: Dist::Zipf(0.99),
            value_size: 32,
            preload: true,
            crashes: Vec::new(),
            mode: Mode::Random,
            max_ticks: 50_000_000,
            cache: true,
            logging: true,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Parse(format!("{key}: bad number {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Parse(format!("{key}: bad flag {v:?}"))),
    }
}

impl FromStr for CrashSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        let bad = || Error::Parse(format!("crash: cannot parse {s:?}"));
        match parts.as_slice() {
            ["node", n, t] => {
                Ok(CrashSpec::Node { node: NodeId(parse_num("crash", n)?), tick: parse_num("crash", t)? })
            }
            ["client", c, "tick", t] => {
                Ok(CrashSpec::ClientAt { client: ActorId(parse_num("crash", c)?), tick: parse_num("crash", t)? })
            }
            ["client", c, p, rest @ ..] => {
                let point: CrashPoint = p.parse().map_err(|_| bad())?;
                let op = match rest.first() {
                    None | Some(&"any") => None,
                    Some(o) => Some(o.parse::<OpKind>().map_err(|_| bad())?),
                };
                let skip = match rest.get(1) {
                    Some(k) => parse_num("crash", k)?,
                    None => 0,
                };
                Ok(CrashSpec::ClientPoint { client: ActorId(parse_num("crash", c)?), point, op, skip })
            }
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for CrashSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CrashSpec::Node { node, tick } => write!(f, "node:{}:{tick}", node.0),
            CrashSpec::ClientAt { client, tick } => write!(f, "client:{}:tick:{tick}", client.0),
            CrashSpec::ClientPoint { client, point, op, skip } => {
                let op = op.map_or("any".to_string(), |o| o.name().to_ascii_lowercase());
                write!(f, "client:{}:{point}:{op}:{skip}", client.0)
            }
        }
    }
}

impl Scenario {
    /// Parse the flat text form. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Scenario::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", no + 1)))?;
            s.set(k, v)?;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn set(&mut self, k: &str, v: &str) -> Result<()> {
        match k {
            "seed" => self.seed = parse_num(k, v)?,
            "clients" => self.clients = parse_num(k, v)?,
            "mns" => self.mns = parse_num(k, v)?,
            "r" => self.r = parse_num(k, v)?,
            "keys" => self.keys = parse_num(k, v)?,
            "ops" => self.ops = parse_num(k, v)?,
            "workload" => {
                self.mix = Mix::shape(v).ok_or_else(|| Error::Parse(format!("workload: unknown shape {v:?}")))?;
                self.workload = Some(v.to_ascii_uppercase());
            }
            "mix" => {
                let p: Vec<f64> = v.split(':').map(|x| parse_num(k, x.trim())).collect::<Result<_>>()?;
                let [search, insert, update, delete] = p[..] else {
                    return Err(Error::Parse("mix: expected search:insert:update:delete".into()));
                };
                self.mix = Mix { search, insert, update, delete };
                self.workload = None;
            }
            "dist" => {
                self.dist = match v.split_once(':') {
                    Some(("zipf", t)) => Dist::Zipf(parse_num(k, t)?),
                    None if v == "zipf" => Dist::Zipf(0.99),
                    None if v == "uniform" => Dist::Uniform,
                    _ => return Err(Error::Parse(format!("dist: unknown {v:?}"))),
                }
            }
            "value_size" => self.value_size = parse_num(k, v)?,
            "preload" => self.preload = parse_bool(k, v)?,
            "crash" => self.crashes.push(v.parse()?),
            "mode" => {
                self.mode = match v {
                    "random" => Mode::Random,
                    "exhaustive" => Mode::Exhaustive,
                    _ => return Err(Error::Parse(format!("mode: unknown {v:?}"))),
                }
            }
            "max_ticks" => self.max_ticks = parse_num(k, v)?,
            "cache" => self.cache = parse_bool(k, v)?,
            "logging" => self.logging = parse_bool(k, v)?,
            _ => return Err(Error::Parse(format!("unknown key {k:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config("at least one client is required".into()));
        }
        if self.keys == 0 {
            return Err(Error::Config("at least one key is required".into()));
        }
        if self.mode == Mode::Exhaustive && (self.clients > 3 || self.keys > 2) {
            return Err(Error::Config("exhaustive mode allows at most 3 clients and 2 keys".into()));
        }
        if self.mix.total() <= 0.0 {
            return Err(Error::Config("operation mix is empty".into()));
        }
        for c in &self.crashes {
            match c {
                CrashSpec::Node { node, .. } if node.0 as usize >= self.mns => {
                    return Err(Error::Config(format!("crash names {node}, but there are {} nodes", self.mns)));
                }
                CrashSpec::ClientAt { client, .. } | CrashSpec::ClientPoint { client, .. }
                    if client.0 as usize >= self.clients =>
                {
                    return Err(Error::Config(format!("crash names {client}, but there are {} clients", self.clients)));
                }
                _ => {}
            }
        }
        self.config().validate()
    }

    /// Exhaustive runs touch a handful of objects; a small memory keeps each
    /// replay cheap.
    fn geometry(&self) -> Config {
        match self.mode {
            Mode::Exhaustive => Config { num_regions: 4, region_size: 64 * 1024, ..Config::default() },
            Mode::Random => Config::default(),
        }
    }

    /// Store configuration for this scenario.
    pub fn config(&self) -> Config {
        Config {
            num_mns: self.mns,
            r: self.r,
            max_clients: (self.clients as u32 + 1).max(Config::default().max_clients),
            cache_capacity: if self.cache { Config::default().cache_capacity } else { 0 },
            logging: self.logging,
            ..self.geometry()
        }
    }

    /// The text form, parseable by [`Scenario::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "clients = {}", self.clients);
        let _ = writeln!(out, "mns = {}", self.mns);
        let _ = writeln!(out, "r = {}", self.r);
        let _ = writeln!(out, "keys = {}", self.keys);
        let _ = writeln!(out, "ops = {}", self.ops);
        match &self.workload {
            Some(w) => _ = writeln!(out, "workload = {w}"),
            None => {
                let m = self.mix;
                _ = writeln!(out, "mix = {}:{}:{}:{}", m.search, m.insert, m.update, m.delete);
            }
        }
        match self.dist {
            Dist::Uniform => _ = writeln!(out, "dist = uniform"),
            Dist::Zipf(t) => _ = writeln!(out, "dist = zipf:{t}"),
        }
        let _ = writeln!(out, "value_size = {}", self.value_size);
        let _ = writeln!(out, "preload = {}", self.preload);
        for c in &self.crashes {
            let _ = writeln!(out, "crash = {c}");
        }
        let mode = if self.mode == Mode::Random { "random" } else { "exhaustive" };
        let _ = writeln!(out, "mode = {mode}");
        let _ = writeln!(out, "max_ticks = {}", self.max_ticks);
        let _ = writeln!(out, "cache = {}", self.cache);
        let _ = writeln!(out, "logging = {}", self.logging);
        out
    }
}
