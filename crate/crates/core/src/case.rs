//! Network data model, JSON case files, bus classification and topology edits.
//!
//! Electrical quantities are stored in the units of the case file (MW, MVAr,
//! MVA, p.u. for voltages and admittances). Consumers convert to per-unit on
//! [`Network::base_mva`] when they need to.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;

use serde::de::{self, Deserializer, Visitor};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default system base in MVA.
pub const DEFAULT_BASE_MVA: f64 = 100.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CaseError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("duplicate bus id {0}")]
    DuplicateBus(usize),
    #[error("duplicate line id {0}")]
    DuplicateLine(usize),
    #[error("line {line} references unknown bus {bus}")]
    DanglingEndpoint { line: usize, bus: usize },
    #[error("line {0} has zero admittance")]
    ZeroAdmittance(usize),
    #[error("line {0} connects a bus to itself")]
    SelfLoop(usize),
    #[error("missing slack bus")]
    MissingSlack,
    #[error("multiple slack buses: {0:?}")]
    MultipleSlack(Vec<usize>),
    #[error("bus {bus}: invalid {field}: {reason}")]
    InvalidBus {
        bus: usize,
        field: &'static str,
        reason: String,
    },
    #[error("line {line}: invalid {field}: {reason}")]
    InvalidLine {
        line: usize,
        field: &'static str,
        reason: String,
    },
    #[error("network is not connected ({0} buses unreachable from the slack)")]
    Disconnected(usize),
    #[error("islanding: removing line {0} disconnects the network")]
    Islanding(usize),
    #[error("unknown line {0}")]
    UnknownLine(usize),
    #[error("unknown bus {0}")]
    UnknownBus(usize),
    #[error("matpower import: {0}")]
    Matpower(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Pv,
    Pq,
}

/// Voltage set-point ramp limit; `Unbounded` is written as the string
/// `"unbounded"` in case files.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ramp {
    Rate(f64),
    Unbounded,
}

impl Ramp {
    pub fn per_second(self) -> f64 {
        match self {
            Ramp::Rate(r) => r,
            Ramp::Unbounded => f64::INFINITY,
        }
    }
}

impl Serialize for Ramp {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Ramp::Rate(r) => s.serialize_f64(*r),
            Ramp::Unbounded => s.serialize_str("unbounded"),
        }
    }
}

impl<'de> Deserialize<'de> for Ramp {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct RampVisitor;
        impl Visitor<'_> for RampVisitor {
            type Value = Ramp;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a ramp rate or \"unbounded\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Ramp, E> {
                Ok(Ramp::Rate(v))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Ramp, E> {
                Ok(Ramp::Rate(v as f64))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Ramp, E> {
                Ok(Ramp::Rate(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Ramp, E> {
                if v == "unbounded" {
                    Ok(Ramp::Unbounded)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }
        d.deserialize_any(RampVisitor)
    }
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    /// Voltage magnitude set-point (p.u.), slack and PV buses.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_set: Option<f64>,
    /// Net active injection for PQ buses, generator output for PV buses (MW).
    #[serde(default, skip_serializing_if = "is_zero")]
    pub p_inj: f64,
    /// Net reactive injection for PQ buses (MVAr).
    #[serde(default, skip_serializing_if = "is_zero")]
    pub q_inj: f64,
    /// Local demand at a PV or slack bus (MW).
    #[serde(default, skip_serializing_if = "is_zero")]
    pub p_load: f64,
    /// Local reactive demand at a PV or slack bus (MVAr).
    #[serde(default, skip_serializing_if = "is_zero")]
    pub q_load: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_max: Option<f64>,
    /// Active power ramp limit R_g (MW/s). Absent means "use the scenario default".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ramp_p: Option<f64>,
    /// Voltage set-point ramp limit T_g (p.u./s).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ramp_v: Option<Ramp>,
}

impl Bus {
    pub fn pq(id: usize, p_inj: f64, q_inj: f64) -> Self {
        Bus {
            id,
            kind: BusKind::Pq,
            v_set: None,
            p_inj,
            q_inj,
            p_load: 0.0,
            q_load: 0.0,
            p_min: None,
            p_max: None,
            q_min: None,
            q_max: None,
            ramp_p: None,
            ramp_v: None,
        }
    }

    pub fn slack(id: usize) -> Self {
        Bus {
            kind: BusKind::Slack,
            v_set: Some(1.0),
            ..Bus::pq(id, 0.0, 0.0)
        }
    }

    pub fn pv(id: usize, p_gen: f64, v_set: f64, p_max: f64) -> Self {
        Bus {
            kind: BusKind::Pv,
            v_set: Some(v_set),
            p_inj: p_gen,
            p_min: Some(0.0),
            p_max: Some(p_max),
            ..Bus::pq(id, 0.0, 0.0)
        }
    }

    pub fn p_min_or_default(&self) -> f64 {
        self.p_min.unwrap_or(f64::NEG_INFINITY)
    }
    pub fn p_max_or_default(&self) -> f64 {
        self.p_max.unwrap_or(f64::INFINITY)
    }
    pub fn q_min_or_default(&self) -> f64 {
        self.q_min.unwrap_or(f64::NEG_INFINITY)
    }
    pub fn q_max_or_default(&self) -> f64 {
        self.q_max.unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Line {
    pub id: usize,
    pub from: usize,
    pub to: usize,
    /// Series conductance (p.u.).
    pub g: f64,
    /// Series susceptance (p.u.); negative for inductive lines.
    pub b: f64,
    /// Apparent power rating (MVA); `None` leaves the line unmonitored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_rating: Option<f64>,
}

impl Line {
    /// Line from series resistance and reactance in p.u.
    pub fn from_impedance(id: usize, from: usize, to: usize, r: f64, x: f64) -> Self {
        let d = r * r + x * x;
        Line {
            id,
            from,
            to,
            g: r / d,
            b: -x / d,
            s_rating: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CaseFile {
    #[serde(default = "default_base")]
    base_mva: f64,
    buses: Vec<Bus>,
    lines: Vec<Line>,
}

fn default_base() -> f64 {
    DEFAULT_BASE_MVA
}

/// Partition of the buses by kind, in bus ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BusClasses {
    pub slack: usize,
    pub pv: Vec<usize>,
    pub pq: Vec<usize>,
}

/// Validated, immutable grid description.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    base_mva: f64,
    buses: Vec<Bus>,
    lines: Vec<Line>,
    bus_index: HashMap<usize, usize>,
    line_index: HashMap<usize, usize>,
    slack: usize,
    pv: Vec<usize>,
    pq: Vec<usize>,
    // endpoints as bus indices
    ends: Vec<(usize, usize)>,
}

impl Network {
    pub fn new(base_mva: f64, buses: Vec<Bus>, lines: Vec<Line>) -> Result<Self, CaseError> {
        if !(base_mva > 0.0 && base_mva.is_finite()) {
            return Err(CaseError::InvalidBus {
                bus: 0,
                field: "base_mva",
                reason: format!("must be positive, got {base_mva}"),
            });
        }
        let mut bus_index = HashMap::with_capacity(buses.len());
        for (i, b) in buses.iter().enumerate() {
            if bus_index.insert(b.id, i).is_some() {
                return Err(CaseError::DuplicateBus(b.id));
            }
            validate_bus(b)?;
        }
        let slacks: Vec<usize> = buses
            .iter()
            .filter(|b| b.kind == BusKind::Slack)
            .map(|b| b.id)
            .collect();
        let slack = match slacks.len() {
            0 => return Err(CaseError::MissingSlack),
            1 => bus_index[&slacks[0]],
            _ => return Err(CaseError::MultipleSlack(slacks)),
        };
        let mut line_index = HashMap::with_capacity(lines.len());
        let mut ends = Vec::with_capacity(lines.len());
        for (k, l) in lines.iter().enumerate() {
            if line_index.insert(l.id, k).is_some() {
                return Err(CaseError::DuplicateLine(l.id));
            }
            let f = *bus_index.get(&l.from).ok_or(CaseError::DanglingEndpoint {
                line: l.id,
                bus: l.from,
            })?;
            let t = *bus_index.get(&l.to).ok_or(CaseError::DanglingEndpoint {
                line: l.id,
                bus: l.to,
            })?;
            if f == t {
                return Err(CaseError::SelfLoop(l.id));
            }
            if !(l.g.is_finite() && l.b.is_finite()) {
                return Err(CaseError::InvalidLine {
                    line: l.id,
                    field: "admittance",
                    reason: "non-finite value".into(),
                });
            }
            if l.g == 0.0 && l.b == 0.0 {
                return Err(CaseError::ZeroAdmittance(l.id));
            }
            if let Some(r) = l.s_rating {
                if !(r > 0.0 && r.is_finite()) {
                    return Err(CaseError::InvalidLine {
                        line: l.id,
                        field: "s_rating",
                        reason: format!("must be positive, got {r}"),
                    });
                }
            }
            ends.push((f, t));
        }
        let pv = (0..buses.len())
            .filter(|&i| buses[i].kind == BusKind::Pv)
            .collect();
        let pq = (0..buses.len())
            .filter(|&i| buses[i].kind == BusKind::Pq)
            .collect();
        let net = Network {
            base_mva,
            buses,
            lines,
            bus_index,
            line_index,
            slack,
            pv,
            pq,
            ends,
        };
        let unreached = net.unreachable_count(None);
        if unreached > 0 {
            return Err(CaseError::Disconnected(unreached));
        }
        Ok(net)
    }

    pub fn base_mva(&self) -> f64 {
        self.base_mva
    }
    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }
    pub fn lines(&self) -> &[Line] {
        &self.lines
    }
    pub fn bus_index(&self, id: usize) -> Option<usize> {
        self.bus_index.get(&id).copied()
    }
    pub fn line_index(&self, id: usize) -> Option<usize> {
        self.line_index.get(&id).copied()
    }
    /// Index of the slack bus.
    pub fn slack_index(&self) -> usize {
        self.slack
    }
    /// Indices of PV buses, in bus order. Control vectors follow this order.
    pub fn pv_indices(&self) -> &[usize] {
        &self.pv
    }
    /// Indices of PQ buses, in bus order.
    pub fn pq_indices(&self) -> &[usize] {
        &self.pq
    }
    /// Bus indices of each line's (from, to) endpoints.
    pub fn line_ends(&self) -> &[(usize, usize)] {
        &self.ends
    }

    pub fn classify_buses(&self) -> BusClasses {
        BusClasses {
            slack: self.buses[self.slack].id,
            pv: self.pv.iter().map(|&i| self.buses[i].id).collect(),
            pq: self.pq.iter().map(|&i| self.buses[i].id).collect(),
        }
    }

    /// Fingerprint of the line set (ids and endpoints, not parameters).
    pub fn topology_tag(&self) -> u64 {
        // FNV-1a over (id, from, to)
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for l in &self.lines {
            for v in [l.id, l.from, l.to] {
                for byte in (v as u64).to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Removes a line. The result must stay connected.
    pub fn apply_outage(&self, line_id: usize) -> Result<Network, CaseError> {
        let k = self
            .line_index(line_id)
            .ok_or(CaseError::UnknownLine(line_id))?;
        if self.unreachable_count(Some(k)) > 0 {
            return Err(CaseError::Islanding(line_id));
        }
        let mut lines = self.lines.clone();
        lines.remove(k);
        Network::new(self.base_mva, self.buses.clone(), lines)
    }

    pub fn with_rating(&self, line_id: usize, rating: Option<f64>) -> Result<Network, CaseError> {
        let k = self
            .line_index(line_id)
            .ok_or(CaseError::UnknownLine(line_id))?;
        let mut lines = self.lines.clone();
        lines[k].s_rating = rating;
        Network::new(self.base_mva, self.buses.clone(), lines)
    }

    /// Replaces all ratings, indexed like [`Network::lines`].
    pub fn with_ratings(&self, ratings: &[Option<f64>]) -> Result<Network, CaseError> {
        assert_eq!(ratings.len(), self.lines.len());
        let mut lines = self.lines.clone();
        for (l, r) in lines.iter_mut().zip(ratings) {
            l.s_rating = *r;
        }
        Network::new(self.base_mva, self.buses.clone(), lines)
    }

    /// Copy with every line susceptance multiplied by the matching factor.
    pub fn with_scaled_susceptances(&self, factors: &[f64]) -> Result<Network, CaseError> {
        assert_eq!(factors.len(), self.lines.len());
        let mut lines = self.lines.clone();
        for (l, f) in lines.iter_mut().zip(factors) {
            l.b *= f;
        }
        Network::new(self.base_mva, self.buses.clone(), lines)
    }

    pub fn with_buses(&self, buses: Vec<Bus>) -> Result<Network, CaseError> {
        Network::new(self.base_mva, buses, self.lines.clone())
    }

    /// Ramp defaults applied to PV buses that do not specify their own.
    pub fn with_default_ramps(&self, ramp_p: f64, ramp_v: Ramp) -> Network {
        let mut out = self.clone();
        for &i in &self.pv {
            let b = &mut out.buses[i];
            b.ramp_p.get_or_insert(ramp_p);
            b.ramp_v.get_or_insert(ramp_v);
        }
        out
    }

    pub fn to_json(&self) -> String {
        let file = CaseFile {
            base_mva: self.base_mva,
            buses: self.buses.clone(),
            lines: self.lines.clone(),
        };
        serde_json::to_string_pretty(&file).expect("case serialization cannot fail")
    }

    /// Adjacency list over bus indices, optionally skipping one line.
    fn unreachable_count(&self, skip: Option<usize>) -> usize {
        let n = self.buses.len();
        let mut adj = vec![Vec::new(); n];
        for (k, &(f, t)) in self.ends.iter().enumerate() {
            if Some(k) == skip {
                continue;
            }
            adj[f].push(t);
            adj[t].push(f);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([self.slack]);
        seen[self.slack] = true;
        let mut count = 1;
        while let Some(i) = queue.pop_front() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    count += 1;
                    queue.push_back(j);
                }
            }
        }
        n - count
    }

    /// Breadth-first hop distance from `bus` (index) to every bus.
    pub fn hop_distances(&self, bus: usize) -> Vec<usize> {
        let n = self.buses.len();
        let mut adj = vec![HashSet::new(); n];
        for &(f, t) in &self.ends {
            adj[f].insert(t);
            adj[t].insert(f);
        }
        let mut dist = vec![usize::MAX; n];
        dist[bus] = 0;
        let mut queue = VecDeque::from([bus]);
        while let Some(i) = queue.pop_front() {
            let mut next: Vec<usize> = adj[i].iter().copied().collect();
            next.sort_unstable();
            for j in next {
                if dist[j] == usize::MAX {
                    dist[j] = dist[i] + 1;
                    queue.push_back(j);
                }
            }
        }
        dist
    }
}

fn validate_bus(b: &Bus) -> Result<(), CaseError> {
    let bad = |field: &'static str, reason: String| CaseError::InvalidBus {
        bus: b.id,
        field,
        reason,
    };
    match b.kind {
        BusKind::Slack => {
            let v = b.v_set.unwrap_or(1.0);
            if v != 1.0 {
                return Err(bad("v_set", format!("slack voltage must be 1.0 p.u., got {v}")));
            }
        }
        BusKind::Pv => {
            let v = b.v_set.ok_or_else(|| bad("v_set", "required for PV buses".into()))?;
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad("v_set", format!("must be positive, got {v}")));
            }
            if b.p_min_or_default() > b.p_max_or_default() {
                return Err(bad("p_min", "p_min exceeds p_max".into()));
            }
            if b.q_min_or_default() > b.q_max_or_default() {
                return Err(bad("q_min", "q_min exceeds q_max".into()));
            }
            if let Some(r) = b.ramp_p {
                if !(r > 0.0) {
                    return Err(bad("ramp_p", format!("must be positive, got {r}")));
                }
            }
            if let Some(Ramp::Rate(r)) = b.ramp_v {
                if !(r > 0.0) {
                    return Err(bad("ramp_v", format!("must be positive, got {r}")));
                }
            }
        }
        BusKind::Pq => {}
    }
    for (field, v) in [
        ("p_inj", b.p_inj),
        ("q_inj", b.q_inj),
        ("p_load", b.p_load),
        ("q_load", b.q_load),
    ] {
        if !v.is_finite() {
            return Err(bad(field, "non-finite value".into()));
        }
    }
    Ok(())
}

/// Parses a JSON case document.
pub fn parse_case(text: &str) -> Result<Network, CaseError> {
    let file: CaseFile = serde_json::from_str(text).map_err(|e| CaseError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    Network::new(file.base_mva, file.buses, file.lines)
}
