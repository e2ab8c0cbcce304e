//! Scenario description: topology, flows, algorithm and parameters, read
//! from a TOML file with explicit units in key names.

use std::collections::{HashMap, HashSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::asm::{coefficients_from_caps, AsmParams, CapFractions, DEFAULT_CAPS_APPROACH, DEFAULT_CAPS_SLIDING};
use crate::cp::asm_scale;
use crate::error::{Error, Result};
use crate::event::{RngStream, SimTime};
use crate::fluid::{sliding_condition, FluidSystem, SlidingCheck};
use crate::qcn::{default_timer_period, gain_for_max_code, QcnParams};

/// Scenario files shipped with the crate, addressable by file name.
pub const BUNDLED: &[(&str, &str)] = &[
    ("dumbbell3.cfg", include_str!("../scenarios/dumbbell3.cfg")),
    ("dumbbell100g.cfg", include_str!("../scenarios/dumbbell100g.cfg")),
    ("smallqueue.cfg", include_str!("../scenarios/smallqueue.cfg")),
    ("convergence.cfg", include_str!("../scenarios/convergence.cfg")),
    ("parkinglot.cfg", include_str!("../scenarios/parkinglot.cfg")),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Asm,
    Qcn,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "asm" => Ok(Algorithm::Asm),
            "qcn" => Ok(Algorithm::Qcn),
            other => Err(Error::Validation(format!("unknown algorithm `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub a: String,
    pub b: String,
    pub capacity_bps: f64,
    #[serde(default)]
    pub delay_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub src: String,
    pub dst: String,
    #[serde(default)]
    pub start_ns: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_ns: Option<u64>,
    /// Start drawn uniformly from this window using the scenario seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_window_ns: Option<[u64; 2]>,
    /// Lifetime after a drawn start.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_ns: Option<u64>,
    pub initial_rate_bps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub packet_size_bytes: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AsmConfig {
    pub w: f64,
    pub p: f64,
    pub b0_units: f64,
    pub bf_units: f64,
    pub caps_approach: CapFractions,
    pub caps_sliding: CapFractions,
    pub r_min_bps: f64,
    pub dedup: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dedup_window_ns: Option<u64>,
    /// Packets per code unit; derived from the buffer size when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale_packets: Option<f64>,
}

impl Default for AsmConfig {
    fn default() -> Self {
        AsmConfig {
            w: 32.0,
            p: 0.01,
            b0_units: 16.0,
            bf_units: 64.0,
            caps_approach: DEFAULT_CAPS_APPROACH,
            caps_sliding: DEFAULT_CAPS_SLIDING,
            r_min_bps: 1e6,
            dedup: true,
            dedup_window_ns: Some(100_000),
            scale_packets: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QcnConfig {
    pub w: f64,
    pub p: f64,
    pub fb_max_code: u8,
    pub bc_limit_bytes: u64,
    pub fr_cycles: u32,
    pub r_ai_bps: f64,
    pub r_hai_bps: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timer_period_ns: Option<u64>,
    pub r_min_bps: f64,
    pub trr: bool,
    pub efr: bool,
    pub dedup: bool,
}

impl Default for QcnConfig {
    fn default() -> Self {
        QcnConfig {
            w: 2.0,
            p: 0.01,
            fb_max_code: 63,
            bc_limit_bytes: 150_000,
            fr_cycles: 5,
            r_ai_bps: 5e6,
            r_hai_bps: 50e6,
            timer_period_ns: None,
            r_min_bps: 1e6,
            trr: true,
            efr: true,
            dedup: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TraceConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub period_ns: Option<u64>,
    /// Ports to record, written `from->to`. The first one drives metrics.
    /// When empty, the switch port shared by the most flows is used.
    pub monitor: Vec<String>,
    pub warmup_ns: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub band_packets: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub algorithm: Algorithm,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub duration_ns: u64,
    #[serde(default = "default_packet_size")]
    pub packet_size_bytes: u32,
    pub buffer_bytes: u64,
    pub q0_packets: f64,
    pub hosts: Vec<String>,
    pub switches: Vec<String>,
    #[serde(rename = "link")]
    pub links: Vec<LinkSpec>,
    #[serde(rename = "flow")]
    pub flows: Vec<FlowSpec>,
    #[serde(default)]
    pub asm: AsmConfig,
    #[serde(default)]
    pub qcn: QcnConfig,
    #[serde(default)]
    pub trace: TraceConfig,
}

fn default_seed() -> u64 {
    1
}

fn default_packet_size() -> u32 {
    1500
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|b| *b == b'\n').count() + 1
}

impl ScenarioSpec {
    /// Parses and validates a scenario.
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ScenarioSpec = toml::from_str(text).map_err(|e| Error::Parse {
            line: e.span().map(|s| line_of(text, s.start)).unwrap_or(0),
            message: e.message().trim().to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn packet_size(&self, flow: usize) -> u32 {
        self.flows[flow].packet_size_bytes.unwrap_or(self.packet_size_bytes)
    }

    pub fn duration(&self) -> SimTime {
        SimTime::from_nanos(self.duration_ns)
    }

    pub fn max_link_capacity(&self) -> f64 {
        self.links.iter().map(|l| l.capacity_bps).fold(0.0, f64::max)
    }

    /// Trace period: configured, or 100 µs up to 10 Gb/s and 10 µs above.
    pub fn trace_period(&self) -> SimTime {
        match self.trace.period_ns {
            Some(ns) => SimTime::from_nanos(ns),
            None if self.max_link_capacity() > 10e9 => SimTime::from_micros(10),
            None => SimTime::from_micros(100),
        }
    }

    /// Convergence band in packets: configured, or the larger of the
    /// near-stable bound and a tenth of the target.
    pub fn band_packets(&self) -> f64 {
        self.trace
            .band_packets
            .unwrap_or_else(|| (self.asm.b0_units * self.asm_scale()).max(0.1 * self.q0_packets))
    }

    pub fn buffer_packets(&self) -> f64 {
        self.buffer_bytes as f64 / self.packet_size_bytes as f64
    }

    /// Packets per ASM code unit.
    pub fn asm_scale(&self) -> f64 {
        self.asm.scale_packets.unwrap_or_else(|| asm_scale(self.buffer_packets()))
    }

    /// Packets per QCN feedback code unit, so that the code range covers a
    /// feedback value of `(1 + 2w) q0`.
    pub fn qcn_scale(&self) -> f64 {
        (1.0 + 2.0 * self.qcn.w) * self.q0_packets / self.qcn.fb_max_code as f64
    }

    pub fn asm_params(&self, nic_capacity_bps: f64) -> Result<AsmParams> {
        let params = AsmParams {
            approach: coefficients_from_caps(self.asm.caps_approach, nic_capacity_bps, i8::MAX as u32)?,
            sliding: coefficients_from_caps(self.asm.caps_sliding, nic_capacity_bps, i8::MAX as u32)?,
            b0: self.asm.b0_units,
            bf: self.asm.bf_units,
            w: self.asm.w,
            p: self.asm.p,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn qcn_params(&self, nic_capacity_bps: f64) -> QcnParams {
        let q = &self.qcn;
        QcnParams {
            gd: gain_for_max_code(q.fb_max_code),
            fb_max_code: q.fb_max_code,
            bc_limit_bytes: q.bc_limit_bytes,
            fr_cycles: q.fr_cycles,
            r_ai_bps: q.r_ai_bps,
            r_hai_bps: q.r_hai_bps,
            timer_period: q
                .timer_period_ns
                .map(SimTime::from_nanos)
                .unwrap_or_else(|| default_timer_period(q.bc_limit_bytes, nic_capacity_bps)),
            r_min_bps: q.r_min_bps,
            trr: q.trr,
            efr: q.efr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.name.trim().is_empty() {
            return bad("name must not be empty".into());
        }
        if self.duration_ns == 0 {
            return bad("duration_ns must be positive".into());
        }
        if self.packet_size_bytes == 0 {
            return bad("packet_size_bytes must be positive".into());
        }
        if !(self.q0_packets >= 0.0) || self.q0_packets * self.packet_size_bytes as f64 >= self.buffer_bytes as f64 {
            return bad(format!(
                "q0_packets * packet_size_bytes ({} B) must be below buffer_bytes ({} B)",
                self.q0_packets * self.packet_size_bytes as f64,
                self.buffer_bytes
            ));
        }

        let mut names = HashSet::new();
        for n in self.hosts.iter().chain(&self.switches) {
            if !names.insert(n.as_str()) {
                return bad(format!("node `{n}` declared twice"));
            }
        }
        let mut pairs = HashSet::new();
        for (i, l) in self.links.iter().enumerate() {
            for end in [&l.a, &l.b] {
                if !names.contains(end.as_str()) {
                    return bad(format!("link {i}: unknown node `{end}`"));
                }
            }
            if l.a == l.b {
                return bad(format!("link {i}: self loop on `{}`", l.a));
            }
            if !(l.capacity_bps > 0.0) || !l.capacity_bps.is_finite() {
                return bad(format!("link {i} ({}-{}): capacity_bps must be positive", l.a, l.b));
            }
            let key = if l.a < l.b { (&l.a, &l.b) } else { (&l.b, &l.a) };
            if !pairs.insert(key) {
                return bad(format!("link {i}: duplicate link {}-{}", l.a, l.b));
            }
        }

        let hosts: HashSet<&str> = self.hosts.iter().map(String::as_str).collect();
        let topo = Topology::new(self);
        for (i, f) in self.flows.iter().enumerate() {
            if !hosts.contains(f.src.as_str()) || !hosts.contains(f.dst.as_str()) {
                return bad(format!("flow {i}: endpoints must be hosts ({} -> {})", f.src, f.dst));
            }
            if f.src == f.dst {
                return bad(format!("flow {i}: source equals destination"));
            }
            if topo.route(&f.src, &f.dst).is_none() {
                return bad(format!("flow {i}: no path from {} to {}", f.src, f.dst));
            }
            let nic = topo.nic_capacity(&f.src).unwrap_or(0.0);
            if !(f.initial_rate_bps > 0.0) || f.initial_rate_bps > nic {
                return bad(format!(
                    "flow {i}: initial_rate_bps {} must be positive and at most the NIC capacity {nic}",
                    f.initial_rate_bps
                ));
            }
            if let Some([lo, hi]) = f.start_window_ns {
                if lo > hi {
                    return bad(format!("flow {i}: empty start window"));
                }
                if let Some(stop) = f.stop_ns {
                    if stop <= hi {
                        return bad(format!("flow {i}: stop_ns must follow the start window"));
                    }
                }
            } else if let Some(stop) = f.stop_ns {
                if stop <= f.start_ns {
                    return bad(format!("flow {i}: start_ns must be before stop_ns"));
                }
            }
            if f.active_ns == Some(0) {
                return bad(format!("flow {i}: active_ns must be positive"));
            }
            if f.packet_size_bytes == Some(0) {
                return bad(format!("flow {i}: packet_size_bytes must be positive"));
            }
        }

        for m in &self.trace.monitor {
            let (a, b) = parse_port(m)?;
            if !self.switches.iter().any(|s| s == a) || !topo.adjacent(a, b) {
                return bad(format!("monitor `{m}` is not a switch egress port"));
            }
        }
        if self.trace.period_ns == Some(0) {
            return bad("trace.period_ns must be positive".into());
        }

        match self.algorithm {
            Algorithm::Asm => {
                for nic in self.flows.iter().filter_map(|f| topo.nic_capacity(&f.src)) {
                    self.asm_params(nic)?;
                }
                if self.asm.r_min_bps <= 0.0 {
                    return bad("asm.r_min_bps must be positive".into());
                }
            }
            Algorithm::Qcn => {
                if !(self.qcn.p > 0.0 && self.qcn.p <= 1.0) {
                    return bad(format!("qcn.p = {} not in (0, 1]", self.qcn.p));
                }
                if self.qcn.fb_max_code == 0 || self.qcn.fb_max_code > 63 {
                    return bad("qcn.fb_max_code must be in 1..=63".into());
                }
                for nic in self.flows.iter().filter_map(|f| topo.nic_capacity(&f.src)) {
                    self.qcn_params(nic).validate()?;
                }
            }
        }
        Ok(())
    }

    /// Start and stop of every flow, with windowed starts drawn from the seed.
    pub fn flow_times(&self) -> Vec<(SimTime, Option<SimTime>)> {
        self.flows
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let start = match f.start_window_ns {
                    Some([lo, hi]) => RngStream::derive(self.seed, 0xF10_0000 + i as u64).range_u64(lo, hi),
                    None => f.start_ns,
                };
                let stop = match (f.stop_ns, f.active_ns) {
                    (Some(s), _) => Some(s),
                    (None, Some(a)) => Some(start + a),
                    (None, None) => None,
                };
                (SimTime::from_nanos(start), stop.map(SimTime::from_nanos))
            })
            .collect()
    }

    /// Fluid models of the approach and sliding gains, taking the first
    /// monitored port (or the busiest one) as the bottleneck shared by every
    /// flow crossing it.
    pub fn fluid_systems(&self) -> Option<[FluidSystem; 2]> {
        let topo = Topology::new(self);
        let (from, to) = match self.trace.monitor.first() {
            Some(m) => parse_port(m).ok()?,
            None => topo.busiest_port(self)?,
        };
        let link = topo.link(from, to)?;
        let n = self
            .flows
            .iter()
            .filter(|f| {
                topo.route(&f.src, &f.dst)
                    .is_some_and(|r| r.windows(2).any(|w| w[0] == from && w[1] == to))
            })
            .count();
        let nic = self.flows.first().and_then(|f| topo.nic_capacity(&f.src))?;
        let params = self.asm_params(nic).ok()?;
        let build = |g| {
            FluidSystem::from_rate_gains(
                n.max(1),
                link.capacity_bps,
                self.packet_size_bytes,
                self.asm.p,
                self.asm.w,
                self.q0_packets,
                g,
                self.asm_scale(),
            )
        };
        Some([build(&params.approach), build(&params.sliding)])
    }

    /// Sliding check of the approach and sliding gains.
    pub fn sliding_checks(&self) -> Option<[SlidingCheck; 2]> {
        self.fluid_systems().map(|s| s.map(|sys| sliding_condition(&sys)))
    }
}

/// Splits `from->to`.
pub fn parse_port(s: &str) -> Result<(&str, &str)> {
    s.split_once("->")
        .map(|(a, b)| (a.trim(), b.trim()))
        .ok_or_else(|| Error::Validation(format!("port `{s}` must be written `from->to`")))
}

/// Adjacency view of a scenario with shortest-path routing.
pub struct Topology<'a> {
    adj: HashMap<&'a str, Vec<&'a str>>,
    links: HashMap<(&'a str, &'a str), &'a LinkSpec>,
    hosts: HashSet<&'a str>,
}

impl<'a> Topology<'a> {
    pub fn new(spec: &'a ScenarioSpec) -> Self {
        let mut adj: HashMap<&str, Vec<&str>> = HashMap::new();
        let mut links = HashMap::new();
        for l in &spec.links {
            adj.entry(&l.a).or_default().push(&l.b);
            adj.entry(&l.b).or_default().push(&l.a);
            links.insert((l.a.as_str(), l.b.as_str()), l);
            links.insert((l.b.as_str(), l.a.as_str()), l);
        }
        Topology {
            adj,
            links,
            hosts: spec.hosts.iter().map(String::as_str).collect(),
        }
    }

    pub fn adjacent(&self, a: &str, b: &str) -> bool {
        self.links.contains_key(&(a, b))
    }

    pub fn link(&self, a: &str, b: &str) -> Option<&'a LinkSpec> {
        self.links.get(&(a, b)).copied()
    }

    /// Capacity of the host's single access link.
    pub fn nic_capacity(&self, host: &str) -> Option<f64> {
        self.adj.get(host)?.iter().filter_map(|n| self.link(host, n)).map(|l| l.capacity_bps).reduce(f64::max)
    }

    /// Breadth-first shortest path; hosts are never used as transit nodes.
    /// Neighbours are visited in declaration order, so ties are stable.
    pub fn route(&self, src: &'a str, dst: &'a str) -> Option<Vec<&'a str>> {
        let mut prev: HashMap<&str, &str> = HashMap::new();
        let mut queue = VecDeque::from([src]);
        let mut seen = HashSet::from([src]);
        while let Some(n) = queue.pop_front() {
            if n == dst {
                let mut path = vec![dst];
                let mut cur = dst;
                while let Some(p) = prev.get(cur) {
                    path.push(p);
                    cur = p;
                }
                path.reverse();
                return Some(path);
            }
            if n != src && self.hosts.contains(n) {
                continue;
            }
            for m in self.adj.get(n).into_iter().flatten() {
                if seen.insert(m) {
                    prev.insert(m, n);
                    queue.push_back(m);
                }
            }
        }
        None
    }

    /// Switch egress port crossed by the most flows; first found wins ties.
    pub fn busiest_port(&self, spec: &'a ScenarioSpec) -> Option<(&'a str, &'a str)> {
        let mut counts: Vec<((&str, &str), usize)> = Vec::new();
        for f in &spec.flows {
            let Some(path) = self.route(&f.src, &f.dst) else { continue };
            for w in path.windows(2) {
                if self.hosts.contains(w[0]) {
                    continue;
                }
                match counts.iter_mut().find(|(k, _)| *k == (w[0], w[1])) {
                    Some((_, c)) => *c += 1,
                    None => counts.push(((w[0], w[1]), 1)),
                }
            }
        }
        let best = counts.iter().map(|(_, c)| *c).max()?;
        counts.into_iter().find(|(_, c)| *c == best).map(|(k, _)| k)
    }
}

/// Reads a scenario from disk, or from the bundled set when `path` is the
/// bare name of a shipped file that does not exist locally.
pub fn load_scenario(path: &Path) -> Result<ScenarioSpec> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => match bundled(path.to_string_lossy().as_ref()) {
            Some(t) => t.to_string(),
            None => return Err(Error::Validation(format!("cannot read scenario {}: {e}", path.display()))),
        },
    };
    let spec = ScenarioSpec::from_toml(&text)?;
    if spec.algorithm == Algorithm::Asm {
        for (regime, check) in ["approach", "sliding"].iter().zip(spec.sliding_checks().into_iter().flatten()) {
            if !check.holds {
                log::warn!(
                    "{}: {regime} gains do not satisfy the sliding condition (lhs_minus = {:.3}, lhs_plus = {:.3})",
                    spec.name,
                    check.lhs_minus,
                    check.lhs_plus
                );
            }
        }
    }
    Ok(spec)
}

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Applies `key.path=value` overrides to a scenario, re-validating the result.
/// Array elements are addressed by index (`flow.0.start_ns=5`). Values are
/// read as TOML literals, falling back to a bare string.
pub fn apply_overrides(spec: &ScenarioSpec, overrides: &[String]) -> Result<ScenarioSpec> {
    if overrides.is_empty() {
        return Ok(spec.clone());
    }
    let mut doc = toml::Value::try_from(spec).map_err(|e| Error::Override(e.to_string()))?;
    for o in overrides {
        let (path, raw) = o.split_once('=').ok_or_else(|| Error::Override(o.clone()))?;
        let value = parse_literal(raw.trim());
        let mut node = &mut doc;
        let keys: Vec<&str> = path.trim().split('.').collect();
        for (depth, key) in keys.iter().enumerate() {
            let last = depth + 1 == keys.len();
            let key = match *key {
                "flow" | "flows" if depth == 0 => "flow",
                "link" | "links" if depth == 0 => "link",
                k => k,
            };
            node = match node {
                toml::Value::Table(t) => {
                    if last {
                        t.insert(key.to_string(), value.clone());
                        break;
                    }
                    t.entry(key.to_string())
                        .or_insert_with(|| toml::Value::Table(Default::default()))
                }
                toml::Value::Array(a) => {
                    let i: usize = key.parse().map_err(|_| Error::Override(o.clone()))?;
                    let slot = a.get_mut(i).ok_or_else(|| Error::Override(format!("{o}: index {i} out of range")))?;
                    if last {
                        *slot = value.clone();
                        break;
                    }
                    slot
                }
                _ => return Err(Error::Override(format!("{o}: `{key}` is not a table"))),
            };
        }
    }
    let text = toml::to_string(&doc).map_err(|e| Error::Override(e.to_string()))?;
    ScenarioSpec::from_toml(&text).map_err(|e| match e {
        Error::Parse { message, .. } => Error::Override(message),
        other => other,
    })
}

fn parse_literal(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn link(a: &str, b: &str, capacity_bps: f64, delay_ns: u64) -> LinkSpec {
    LinkSpec {
        a: a.into(),
        b: b.into(),
        capacity_bps,
        delay_ns,
    }
}

fn flow(src: &str, dst: &str, rate: f64) -> FlowSpec {
    FlowSpec {
        src: src.into(),
        dst: dst.into(),
        start_ns: 0,
        stop_ns: None,
        start_window_ns: None,
        active_ns: None,
        initial_rate_bps: rate,
        packet_size_bytes: None,
    }
}

/// `n` sources through one switch to one sink, all links identical. Each
/// source starts at half the link rate.
pub fn build_dumbbell(n_sources: usize, capacity_bps: f64, delay_ns: u64) -> ScenarioSpec {
    let n = n_sources.max(1);
    let mut hosts: Vec<String> = (0..n).map(|i| format!("h{i}")).collect();
    hosts.push("sink".into());
    let mut links: Vec<LinkSpec> = (0..n).map(|i| link(&format!("h{i}"), "s0", capacity_bps, delay_ns)).collect();
    links.push(link("s0", "sink", capacity_bps, delay_ns));
    let flows = (0..n).map(|i| flow(&format!("h{i}"), "sink", capacity_bps / 2.0)).collect();
    ScenarioSpec {
        name: format!("dumbbell{n}"),
        algorithm: Algorithm::Asm,
        seed: 1,
        duration_ns: 200_000_000,
        packet_size_bytes: 1500,
        buffer_bytes: 131_072,
        q0_packets: 64.0,
        hosts,
        switches: vec!["s0".into()],
        links,
        flows,
        asm: AsmConfig::default(),
        qcn: QcnConfig::default(),
        trace: TraceConfig {
            monitor: vec!["s0->sink".into()],
            ..TraceConfig::default()
        },
    }
}

/// Four-switch chain with five flows; see the bundled `parkinglot.cfg`.
pub fn build_parking_lot(capacity_bps: f64, delay_ns: u64) -> ScenarioSpec {
    let mut spec = ScenarioSpec::from_toml(bundled("parkinglot.cfg").unwrap()).expect("bundled parking lot is valid");
    for l in &mut spec.links {
        l.capacity_bps = capacity_bps;
        l.delay_ns = delay_ns;
    }
    for f in &mut spec.flows {
        f.initial_rate_bps = capacity_bps / 2.0;
    }
    spec
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bundled_scenarios_load() {
        for (name, text) in BUNDLED {
            let spec = ScenarioSpec::from_toml(text).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(!spec.flows.is_empty());
        }
        let d = ScenarioSpec::from_toml(bundled("dumbbell3.cfg").unwrap()).unwrap();
        assert_eq!(d.flows.len(), 3);
        assert_eq!(d.q0_packets, 64.0);
        assert!(d.links.iter().all(|l| l.capacity_bps == 1e9 && l.delay_ns == 2000));
    }

    #[test]
    fn parking_lot_times() {
        let p = ScenarioSpec::from_toml(bundled("parkinglot.cfg").unwrap()).unwrap();
        let t = p.flow_times();
        let secs = |s: SimTime| s.as_secs_f64();
        assert_eq!((secs(t[0].0), t[0].1.map(secs)), (0.0, Some(5.0)));
        assert_eq!((secs(t[3].0), t[3].1.map(secs)), (3.0, Some(4.0)));
        assert_eq!((secs(t[4].0), t[4].1.map(secs)), (4.0, Some(5.0)));
        for i in [1, 2] {
            let (start, stop) = t[i];
            assert!(secs(start) <= 3.0);
            assert_eq!(stop.unwrap() - start, SimTime::from_millis(1000));
        }
        assert_eq!(p.flow_times(), t);
        let mut other = p.clone();
        other.seed = 99;
        assert_ne!(other.flow_times()[1], t[1]);
    }

    #[test]
    fn parking_lot_routes() {
        let p = build_parking_lot(1e9, 2000);
        let topo = Topology::new(&p);
        assert_eq!(topo.route("a1", "b1").unwrap(), ["a1", "s1", "s2", "s3", "s4", "b1"]);
        assert_eq!(topo.route("a5", "b5").unwrap(), ["a5", "s2", "s3", "s4", "b5"]);
        assert_eq!(topo.busiest_port(&p), Some(("s2", "s3")));
    }

    #[test]
    fn zero_capacity_rejected() {
        let mut s = build_dumbbell(3, 1e9, 2000);
        s.links[0].capacity_bps = 0.0;
        let err = ScenarioSpec::from_toml(&s.to_toml()).unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("capacity_bps")), "{err}");
    }

    #[test]
    fn target_must_fit_in_buffer() {
        let mut s = build_dumbbell(3, 1e9, 2000);
        s.q0_packets = 100.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn rate_above_nic_rejected() {
        let mut s = build_dumbbell(2, 1e9, 2000);
        s.flows[0].initial_rate_bps = 2e9;
        assert!(s.validate().is_err());
    }

    #[test]
    fn parse_error_reports_line() {
        let text = "name = \"x\"\nalgorithm = \"asm\"\nduration_ns = \"soon\"\n";
        match ScenarioSpec::from_toml(text).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn unknown_key_is_an_error() {
        let mut text = build_dumbbell(1, 1e9, 0).to_toml();
        text = text.replacen("seed", "sede", 1);
        assert!(matches!(ScenarioSpec::from_toml(&text), Err(Error::Parse { .. })));
    }

    #[test]
    fn dumbbell_shapes() {
        for n in [1, 3, 10] {
            let s = build_dumbbell(n, 1e9, 2000);
            s.validate().unwrap();
            assert_eq!(s.flows.len(), n);
            assert_eq!(s.links.len(), n + 1);
        }
    }

    #[test]
    fn overrides() {
        let s = build_dumbbell(3, 1e9, 2000);
        let o = apply_overrides(
            &s,
            &[
                "algorithm=qcn".into(),
                "seed=9".into(),
                "asm.caps_approach=[0.25, 0.015625, 0.0625, 0.5]".into(),
                "flow.1.start_ns=1000".into(),
                "link.3.delay_ns=10000".into(),
            ],
        )
        .unwrap();
        assert_eq!(o.algorithm, Algorithm::Qcn);
        assert_eq!(o.seed, 9);
        assert_eq!(o.asm.caps_approach[0], 0.25);
        assert_eq!(o.flows[1].start_ns, 1000);
        assert_eq!(o.links[3].delay_ns, 10000);
        assert!(apply_overrides(&s, &["nonsense".into()]).is_err());
        assert!(apply_overrides(&s, &["bogus_key=1".into()]).is_err());
        assert!(apply_overrides(&s, &["flow.7.start_ns=1".into()]).is_err());
    }

    #[test]
    fn trace_period_defaults() {
        assert_eq!(build_dumbbell(1, 1e9, 0).trace_period(), SimTime::from_micros(100));
        assert_eq!(build_dumbbell(1, 100e9, 0).trace_period(), SimTime::from_micros(10));
    }

    #[test]
    fn default_band_and_scales() {
        let s = build_dumbbell(3, 1e9, 2000);
        assert_eq!(s.asm_scale(), 1.0);
        assert_eq!(s.band_packets(), 16.0);
        assert!((s.qcn_scale() - 5.0 * 64.0 / 63.0).abs() < 1e-12);
    }

    fn arb_spec() -> impl Strategy<Value = ScenarioSpec> {
        (1usize..6, 1e8f64..1e11, 0u64..50_000, any::<u64>(), prop::bool::ANY, 1u64..1_000_000_000)
            .prop_map(|(n, c, d, seed, qcn, dur)| {
                let mut s = build_dumbbell(n, c, d);
                s.seed = seed >> 1;
                s.duration_ns = dur;
                if qcn {
                    s.algorithm = Algorithm::Qcn;
                }
                s.flows[0].stop_ns = Some(dur);
                s
            })
    }

    proptest! {
        #[test]
        fn toml_round_trip(spec in arb_spec()) {
            let text = spec.to_toml();
            let back = ScenarioSpec::from_toml(&text).unwrap();
            prop_assert_eq!(&back, &spec);
            prop_assert_eq!(back.to_toml(), text);
        }
    }
}
