//! Power-system data model, case-file parsing and bus admittance assembly.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The bundled IEEE 30-bus case, 283.4 MW base loading.
pub const IEEE30_CASE: &str = include_str!("../data/ieee30.case");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid network: {0}")]
    Validation(String),
    #[error("branch {from}-{to} has zero series impedance")]
    ZeroImpedance { from: usize, to: usize },
    #[error("target load must be positive, got {0} MW")]
    NonPositiveLoad(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BusKind {
    Slack,
    /// Generator bus with scheduled P and V.
    Generator,
    /// Load bus with scheduled P and Q.
    Load,
}

impl BusKind {
    pub fn keyword(self) -> &'static str {
        match self {
            BusKind::Slack => "slack",
            BusKind::Generator => "pv",
            BusKind::Load => "pq",
        }
    }
}

impl FromStr for BusKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "slack" | "ref" => Ok(BusKind::Slack),
            "pv" | "gen" | "generator" => Ok(BusKind::Generator),
            "pq" | "load" => Ok(BusKind::Load),
            other => Err(format!("unknown bus kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    pub p_demand: f64,
    pub q_demand: f64,
    pub v_mag: f64,
    /// Radians.
    pub v_angle: f64,
    pub v_min: f64,
    pub v_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from_bus: usize,
    pub to_bus: usize,
    pub r: f64,
    pub x: f64,
    pub b_total: f64,
    /// Off-nominal turns ratio on the from side; 1.0 for lines.
    pub tap_ratio: f64,
    /// `(tap_min, tap_max)` for regulating transformers.
    pub tap_bounds: Option<(f64, f64)>,
    pub s_rating: f64,
}

impl Branch {
    pub fn series_admittance(&self) -> Complex64 {
        Complex64::new(self.r, self.x).inv()
    }

    pub fn is_regulating(&self) -> bool {
        self.tap_bounds.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: usize,
    pub p_out: f64,
    pub q_out: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub v_setpoint: f64,
    /// $/hr
    pub cost_a: f64,
    /// $/MWh
    pub cost_b: f64,
    /// $/MW²h
    pub cost_c: f64,
}

impl Generator {
    /// Fuel cost in $/hr for an output given in MW.
    pub fn cost(&self, p_mw: f64) -> f64 {
        self.cost_a + self.cost_b * p_mw + self.cost_c * p_mw * p_mw
    }
}

/// Switchable VAR source, modelled as a shunt susceptance whose rated
/// injection at 1.0 pu voltage is `q_injection`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuntCompensator {
    pub bus: usize,
    pub q_injection: f64,
    pub q_min: f64,
    pub q_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
    pub shunts: Vec<ShuntCompensator>,
}

impl Network {
    /// Builds a network and checks every structural invariant.
    pub fn new(
        base_mva: f64,
        buses: Vec<Bus>,
        branches: Vec<Branch>,
        generators: Vec<Generator>,
        shunts: Vec<ShuntCompensator>,
    ) -> Result<Self, NetworkError> {
        let net = Network {
            base_mva,
            buses,
            branches,
            generators,
            shunts,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn ieee30() -> Self {
        parse_case(IEEE30_CASE).expect("bundled case is valid")
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// Position of a bus id in `buses`.
    pub fn bus_index(&self, id: usize) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub(crate) fn idx(&self, id: usize) -> usize {
        self.bus_index(id).expect("bus id validated")
    }

    pub fn slack_index(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .expect("validated network has a slack bus")
    }

    pub fn slack_bus(&self) -> &Bus {
        &self.buses[self.slack_index()]
    }

    pub fn branch_index(&self, from: usize, to: usize) -> Option<usize> {
        self.branches
            .iter()
            .position(|br| br.from_bus == from && br.to_bus == to)
    }

    pub fn total_p_demand(&self) -> f64 {
        self.buses.iter().map(|b| b.p_demand).sum()
    }

    pub fn total_p_demand_mw(&self) -> f64 {
        self.total_p_demand() * self.base_mva
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let invalid = |m: String| Err(NetworkError::Validation(m));
        if !(self.base_mva > 0.0) {
            return invalid(format!("base MVA must be positive, got {}", self.base_mva));
        }
        if self.buses.is_empty() {
            return invalid("no buses".into());
        }
        let mut ids = BTreeSet::new();
        for b in &self.buses {
            if !ids.insert(b.id) {
                return invalid(format!("duplicate bus id {}", b.id));
            }
            if !(b.v_min < b.v_max) {
                return invalid(format!("bus {}: v_min must be below v_max", b.id));
            }
        }
        let slacks = self
            .buses
            .iter()
            .filter(|b| b.kind == BusKind::Slack)
            .count();
        match slacks {
            0 => return invalid("missing slack bus".into()),
            1 => {}
            n => return invalid(format!("{n} slack buses, expected exactly one")),
        }
        for br in &self.branches {
            for end in [br.from_bus, br.to_bus] {
                if !ids.contains(&end) {
                    return invalid(format!(
                        "branch {}-{} references unknown bus {end}",
                        br.from_bus, br.to_bus
                    ));
                }
            }
            if br.from_bus == br.to_bus {
                return invalid(format!(
                    "branch {}-{} is a self loop",
                    br.from_bus, br.to_bus
                ));
            }
            if br.x == 0.0 && br.r == 0.0 {
                return Err(NetworkError::ZeroImpedance {
                    from: br.from_bus,
                    to: br.to_bus,
                });
            }
            if !(br.tap_ratio > 0.0) {
                return invalid(format!(
                    "branch {}-{}: tap ratio must be positive",
                    br.from_bus, br.to_bus
                ));
            }
            if let Some((lo, hi)) = br.tap_bounds {
                if !(lo <= br.tap_ratio && br.tap_ratio <= hi) {
                    return invalid(format!(
                        "branch {}-{}: tap {} outside [{lo}, {hi}]",
                        br.from_bus, br.to_bus, br.tap_ratio
                    ));
                }
            }
            if !(br.s_rating > 0.0) {
                return invalid(format!(
                    "branch {}-{}: rating must be positive",
                    br.from_bus, br.to_bus
                ));
            }
        }
        for g in &self.generators {
            let Some(i) = self.bus_index(g.bus) else {
                return invalid(format!("generator references unknown bus {}", g.bus));
            };
            if self.buses[i].kind == BusKind::Load {
                return invalid(format!("generator at bus {} which is a load bus", g.bus));
            }
            if !(g.p_min <= g.p_max) || !(g.q_min <= g.q_max) {
                return invalid(format!("generator at bus {}: inverted limits", g.bus));
            }
            if g.cost_c < 0.0 {
                return invalid(format!(
                    "generator at bus {}: negative quadratic cost",
                    g.bus
                ));
            }
        }
        for b in &self.buses {
            if b.kind != BusKind::Load && !self.generators.iter().any(|g| g.bus == b.id) {
                return invalid(format!("bus {} is {:?} but has no generator", b.id, b.kind));
            }
        }
        for s in &self.shunts {
            if !ids.contains(&s.bus) {
                return invalid(format!("shunt references unknown bus {}", s.bus));
            }
            if !(s.q_min <= s.q_injection && s.q_injection <= s.q_max) {
                return invalid(format!(
                    "shunt at bus {}: injection outside its limits",
                    s.bus
                ));
            }
        }
        self.check_connected()
    }

    fn check_connected(&self) -> Result<(), NetworkError> {
        let n = self.buses.len();
        let mut adj = vec![Vec::new(); n];
        for br in &self.branches {
            let (f, t) = (self.idx(br.from_bus), self.idx(br.to_bus));
            adj[f].push(t);
            adj[t].push(f);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        match seen.iter().position(|s| !s) {
            Some(i) => Err(NetworkError::Validation(format!(
                "network is not connected: bus {} is isolated from bus {}",
                self.buses[i].id, self.buses[0].id
            ))),
            None => Ok(()),
        }
    }

    /// Renders the network in the sectioned case format read by [`parse_case`].
    pub fn to_case_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[BASE_MVA]\n{}\n", self.base_mva);
        let _ = writeln!(
            s,
            "[BUS]\n# id kind p_demand q_demand v_mag v_angle v_min v_max"
        );
        for b in &self.buses {
            let _ = writeln!(
                s,
                "{} {} {:?} {:?} {:?} {:?} {:?} {:?}",
                b.id,
                b.kind.keyword(),
                b.p_demand,
                b.q_demand,
                b.v_mag,
                b.v_angle,
                b.v_min,
                b.v_max
            );
        }
        let _ = writeln!(
            s,
            "\n[BRANCH]\n# from to r x b_total tap_ratio tap_min tap_max s_rating"
        );
        for br in &self.branches {
            let bounds = match br.tap_bounds {
                Some((lo, hi)) => format!("{lo:?} {hi:?}"),
                None => "- -".to_string(),
            };
            let _ = writeln!(
                s,
                "{} {} {:?} {:?} {:?} {:?} {} {:?}",
                br.from_bus, br.to_bus, br.r, br.x, br.b_total, br.tap_ratio, bounds, br.s_rating
            );
        }
        let _ = writeln!(
            s,
            "\n[GENERATOR]\n# bus p_out q_out p_min p_max q_min q_max v_setpoint cost_a cost_b cost_c"
        );
        for g in &self.generators {
            let _ = writeln!(
                s,
                "{} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?}",
                g.bus,
                g.p_out,
                g.q_out,
                g.p_min,
                g.p_max,
                g.q_min,
                g.q_max,
                g.v_setpoint,
                g.cost_a,
                g.cost_b,
                g.cost_c
            );
        }
        let _ = writeln!(s, "\n[SHUNT]\n# bus q_injection q_min q_max");
        for sh in &self.shunts {
            let _ = writeln!(
                s,
                "{} {:?} {:?} {:?}",
                sh.bus, sh.q_injection, sh.q_min, sh.q_max
            );
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    BaseMva,
    Bus,
    Branch,
    Generator,
    Shunt,
}

struct Fields<'a> {
    line: usize,
    items: Vec<&'a str>,
    pos: usize,
}

impl<'a> Fields<'a> {
    fn err(&self, message: impl Into<String>) -> NetworkError {
        NetworkError::Parse {
            line: self.line,
            message: message.into(),
        }
    }

    fn expect_len(&self, n: usize, what: &str) -> Result<(), NetworkError> {
        if self.items.len() != n {
            return Err(self.err(format!(
                "{what} record needs {n} fields, found {}",
                self.items.len()
            )));
        }
        Ok(())
    }

    fn next_raw(&mut self) -> &'a str {
        let s = self.items[self.pos];
        self.pos += 1;
        s
    }

    fn real(&mut self, name: &str) -> Result<f64, NetworkError> {
        let raw = self.next_raw();
        raw.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.err(format!("{name}: expected a number, found `{raw}`")))
    }

    fn optional_real(&mut self, name: &str) -> Result<Option<f64>, NetworkError> {
        if self.items[self.pos] == "-" {
            self.pos += 1;
            return Ok(None);
        }
        self.real(name).map(Some)
    }

    fn id(&mut self, name: &str) -> Result<usize, NetworkError> {
        let raw = self.next_raw();
        raw.parse::<usize>().ok().filter(|&v| v > 0).ok_or_else(|| {
            self.err(format!(
                "{name}: expected a positive integer, found `{raw}`"
            ))
        })
    }
}

/// Parses a case file and validates the resulting network.
pub fn parse_case(text: &str) -> Result<Network, NetworkError> {
    let mut section = None;
    let mut base_mva = None;
    let mut buses = Vec::new();
    let mut branches = Vec::new();
    let mut generators = Vec::new();
    let mut shunts = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[').and_then(|c| c.strip_suffix(']')) {
            section = Some(match name.trim().to_ascii_uppercase().as_str() {
                "BASE_MVA" => Section::BaseMva,
                "BUS" => Section::Bus,
                "BRANCH" => Section::Branch,
                "GENERATOR" => Section::Generator,
                "SHUNT" => Section::Shunt,
                other => {
                    return Err(NetworkError::Parse {
                        line,
                        message: format!("unknown section [{other}]"),
                    })
                }
            });
            continue;
        }
        let mut f = Fields {
            line,
            items: content.split_whitespace().collect(),
            pos: 0,
        };
        match section {
            None => return Err(f.err("record outside of any section")),
            Some(Section::BaseMva) => {
                f.expect_len(1, "BASE_MVA")?;
                if base_mva.is_some() {
                    return Err(f.err("BASE_MVA given twice"));
                }
                base_mva = Some(f.real("base_mva")?);
            }
            Some(Section::Bus) => {
                f.expect_len(8, "BUS")?;
                let id = f.id("id")?;
                let kind_raw = f.next_raw();
                let kind = kind_raw.parse::<BusKind>().map_err(|m| f.err(m))?;
                buses.push(Bus {
                    id,
                    kind,
                    p_demand: f.real("p_demand")?,
                    q_demand: f.real("q_demand")?,
                    v_mag: f.real("v_mag")?,
                    v_angle: f.real("v_angle")?,
                    v_min: f.real("v_min")?,
                    v_max: f.real("v_max")?,
                });
            }
            Some(Section::Branch) => {
                f.expect_len(9, "BRANCH")?;
                let from_bus = f.id("from")?;
                let to_bus = f.id("to")?;
                let r = f.real("r")?;
                let x = f.real("x")?;
                let b_total = f.real("b_total")?;
                let tap_ratio = f.real("tap_ratio")?;
                let tap_min = f.optional_real("tap_min")?;
                let tap_max = f.optional_real("tap_max")?;
                let tap_bounds = match (tap_min, tap_max) {
                    (Some(lo), Some(hi)) => Some((lo, hi)),
                    (None, None) => None,
                    _ => return Err(f.err("tap_min and tap_max must both be given or both be `-`")),
                };
                let s_rating = f.real("s_rating")?;
                branches.push(Branch {
                    from_bus,
                    to_bus,
                    r,
                    x,
                    b_total,
                    tap_ratio,
                    tap_bounds,
                    s_rating,
                });
            }
            Some(Section::Generator) => {
                f.expect_len(11, "GENERATOR")?;
                generators.push(Generator {
                    bus: f.id("bus")?,
                    p_out: f.real("p_out")?,
                    q_out: f.real("q_out")?,
                    p_min: f.real("p_min")?,
                    p_max: f.real("p_max")?,
                    q_min: f.real("q_min")?,
                    q_max: f.real("q_max")?,
                    v_setpoint: f.real("v_setpoint")?,
                    cost_a: f.real("cost_a")?,
                    cost_b: f.real("cost_b")?,
                    cost_c: f.real("cost_c")?,
                });
            }
            Some(Section::Shunt) => {
                f.expect_len(4, "SHUNT")?;
                shunts.push(ShuntCompensator {
                    bus: f.id("bus")?,
                    q_injection: f.real("q_injection")?,
                    q_min: f.real("q_min")?,
                    q_max: f.real("q_max")?,
                });
            }
        }
    }

    let base_mva =
        base_mva.ok_or_else(|| NetworkError::Validation("missing [BASE_MVA] section".into()))?;
    Network::new(base_mva, buses, branches, generators, shunts)
}

/// Dense complex bus admittance matrix, per-unit on the system base.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceMatrix {
    n: usize,
    entries: Vec<Complex64>,
}

impl AdmittanceMatrix {
    pub fn zeros(n: usize) -> Self {
        AdmittanceMatrix {
            n,
            entries: vec![Complex64::new(0.0, 0.0); n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.entries[i * self.n + j]
    }

    #[inline]
    fn add(&mut self, i: usize, j: usize, v: Complex64) {
        self.entries[i * self.n + j] += v;
    }

    pub fn row(&self, i: usize) -> &[Complex64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    /// `Y · V` for a complex voltage vector.
    pub fn mul_vec(&self, v: &[Complex64]) -> Vec<Complex64> {
        (0..self.n)
            .map(|i| self.row(i).iter().zip(v).map(|(y, v)| y * v).sum())
            .collect()
    }
}

impl fmt::Display for AdmittanceMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.n {
            for j in 0..self.n {
                let y = self.get(i, j);
                if y.norm() > 0.0 {
                    writeln!(f, "({}, {}) {:+.6} {:+.6}j", i + 1, j + 1, y.re, y.im)?;
                }
            }
        }
        Ok(())
    }
}

/// Assembles the bus admittance matrix from the π-model of every branch,
/// with off-nominal taps on the from side, plus compensator susceptances.
pub fn build_admittance(net: &Network) -> Result<AdmittanceMatrix, NetworkError> {
    let mut y = AdmittanceMatrix::zeros(net.n_buses());
    for br in &net.branches {
        if br.r == 0.0 && br.x == 0.0 {
            return Err(NetworkError::ZeroImpedance {
                from: br.from_bus,
                to: br.to_bus,
            });
        }
        let (f, t) = (net.idx(br.from_bus), net.idx(br.to_bus));
        let ys = br.series_admittance();
        let half_charging = Complex64::new(0.0, br.b_total / 2.0);
        let tap = br.tap_ratio;
        y.add(f, f, (ys + half_charging) / (tap * tap));
        y.add(t, t, ys + half_charging);
        y.add(f, t, -ys / tap);
        y.add(t, f, -ys / tap);
    }
    for sh in &net.shunts {
        let i = net.idx(sh.bus);
        y.add(i, i, Complex64::new(0.0, sh.q_injection));
    }
    Ok(y)
}

/// Scales every bus demand so total real demand equals `target_total_mw`,
/// preserving each bus's power factor.
pub fn scale_load(net: &Network, target_total_mw: f64) -> Result<Network, NetworkError> {
    if !(target_total_mw > 0.0) {
        return Err(NetworkError::NonPositiveLoad(target_total_mw));
    }
    let current = net.total_p_demand_mw();
    if !(current > 0.0) {
        return Err(NetworkError::Validation(
            "network has no real demand to scale".into(),
        ));
    }
    let factor = target_total_mw / current;
    let mut scaled = net.clone();
    for b in &mut scaled.buses {
        b.p_demand *= factor;
        b.q_demand *= factor;
    }
    Ok(scaled)
}
