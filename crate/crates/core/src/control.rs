//! Identifiers for control and state variables, shared by the sensitivity
//! analysis and the OPF encoding.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::netmodel::Network;

/// An independent (control) variable. Bus ids are 1-based as in the case file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ControlId {
    /// Voltage setpoint of the generator(s) at a bus; the slack voltage when
    /// the bus is the slack.
    GenVoltage(usize),
    SlackAngle,
    /// Real output of the generator at a non-slack generator bus.
    GenActive(usize),
    LoadP(usize),
    LoadQ(usize),
    /// Tap ratio of the transformer between two buses, from side first.
    Tap(usize, usize),
    /// Shunt compensator injection at a bus.
    Shunt(usize),
}

impl fmt::Display for ControlId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ControlId::GenVoltage(b) => write!(f, "V_G{b}"),
            ControlId::SlackAngle => write!(f, "delta_sl"),
            ControlId::GenActive(b) => write!(f, "P_G{b}"),
            ControlId::LoadP(b) => write!(f, "P_L{b}"),
            ControlId::LoadQ(b) => write!(f, "Q_L{b}"),
            ControlId::Tap(a, b) => write!(f, "T_{a}-{b}"),
            ControlId::Shunt(b) => write!(f, "Q_C{b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelError(pub String);

impl fmt::Display for LabelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unrecognised variable label `{}`", self.0)
    }
}

impl std::error::Error for LabelError {}

fn bus_suffix(s: &str, prefix: &str) -> Option<usize> {
    s.strip_prefix(prefix)?.parse().ok()
}

impl FromStr for ControlId {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let upper = t.to_ascii_uppercase();
        let parsed = if upper == "DELTA_SL" {
            Some(ControlId::SlackAngle)
        } else if let Some(rest) = upper.strip_prefix("T_") {
            rest.split_once('-')
                .and_then(|(a, b)| Some(ControlId::Tap(a.parse().ok()?, b.parse().ok()?)))
        } else {
            bus_suffix(&upper, "V_G")
                .map(ControlId::GenVoltage)
                .or_else(|| bus_suffix(&upper, "P_G").map(ControlId::GenActive))
                .or_else(|| bus_suffix(&upper, "P_L").map(ControlId::LoadP))
                .or_else(|| bus_suffix(&upper, "Q_L").map(ControlId::LoadQ))
                .or_else(|| bus_suffix(&upper, "Q_C").map(ControlId::Shunt))
        };
        parsed.ok_or_else(|| LabelError(t.to_string()))
    }
}

impl Serialize for ControlId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ControlId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A dependent (state) variable of the power-flow equations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StateId {
    SlackP,
    SlackQ,
    GenQ(usize),
    GenAngle(usize),
    LoadVoltage(usize),
    LoadAngle(usize),
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            StateId::SlackP => write!(f, "P_sl"),
            StateId::SlackQ => write!(f, "Q_sl"),
            StateId::GenQ(b) => write!(f, "Q_G{b}"),
            StateId::GenAngle(b) => write!(f, "delta_G{b}"),
            StateId::LoadVoltage(b) => write!(f, "V_L{b}"),
            StateId::LoadAngle(b) => write!(f, "delta_L{b}"),
        }
    }
}

impl Serialize for StateId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// The OPF-relevant controls of a network in the conventional order:
/// generator voltages, non-slack real outputs, regulating taps, shunts.
pub fn opf_controls(net: &Network) -> Vec<ControlId> {
    let slack = net.slack_bus().id;
    let mut ids: Vec<ControlId> = Vec::new();
    for g in &net.generators {
        let id = ControlId::GenVoltage(g.bus);
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    for g in &net.generators {
        let id = ControlId::GenActive(g.bus);
        if g.bus != slack && !ids.contains(&id) {
            ids.push(id);
        }
    }
    ids.extend(
        net.branches
            .iter()
            .filter(|b| b.is_regulating())
            .map(|b| ControlId::Tap(b.from_bus, b.to_bus)),
    );
    ids.extend(net.shunts.iter().map(|s| ControlId::Shunt(s.bus)));
    ids
}

/// Current value of a control in a network, or `None` if the element does
/// not exist.
pub fn control_value(net: &Network, id: ControlId) -> Option<f64> {
    match id {
        ControlId::GenVoltage(b) => net
            .generators
            .iter()
            .find(|g| g.bus == b)
            .map(|g| g.v_setpoint),
        ControlId::SlackAngle => Some(net.slack_bus().v_angle),
        ControlId::GenActive(b) => {
            let mut gens = net.generators.iter().filter(|g| g.bus == b).peekable();
            gens.peek()?;
            Some(gens.map(|g| g.p_out).sum())
        }
        ControlId::LoadP(b) => net.bus_index(b).map(|i| net.buses[i].p_demand),
        ControlId::LoadQ(b) => net.bus_index(b).map(|i| net.buses[i].q_demand),
        ControlId::Tap(f, t) => net.branch_index(f, t).map(|k| net.branches[k].tap_ratio),
        ControlId::Shunt(b) => net
            .shunts
            .iter()
            .find(|s| s.bus == b)
            .map(|s| s.q_injection),
    }
}

/// Operating limits of an OPF control, or `None` for controls without
/// limits (loads, slack angle) and for unknown elements.
pub fn control_bounds(net: &Network, id: ControlId) -> Option<(f64, f64)> {
    match id {
        ControlId::GenVoltage(b) => {
            net.generators.iter().find(|g| g.bus == b)?;
            let bus = &net.buses[net.bus_index(b)?];
            Some((bus.v_min, bus.v_max))
        }
        ControlId::GenActive(b) => {
            let gens: Vec<_> = net.generators.iter().filter(|g| g.bus == b).collect();
            if gens.is_empty() {
                return None;
            }
            Some((
                gens.iter().map(|g| g.p_min).sum(),
                gens.iter().map(|g| g.p_max).sum(),
            ))
        }
        ControlId::Tap(f, t) => net.branches[net.branch_index(f, t)?].tap_bounds,
        ControlId::Shunt(b) => net
            .shunts
            .iter()
            .find(|s| s.bus == b)
            .map(|s| (s.q_min, s.q_max)),
        ControlId::SlackAngle | ControlId::LoadP(_) | ControlId::LoadQ(_) => None,
    }
}

/// Overwrites one control in place. Real output at a bus with several
/// generators is shared equally. Returns `false` if the element is absent.
pub fn set_control(net: &mut Network, id: ControlId, value: f64) -> bool {
    match id {
        ControlId::GenVoltage(b) => {
            let mut found = false;
            for g in net.generators.iter_mut().filter(|g| g.bus == b) {
                g.v_setpoint = value;
                found = true;
            }
            if let (true, Some(i)) = (found, net.bus_index(b)) {
                net.buses[i].v_mag = value;
            }
            found
        }
        ControlId::SlackAngle => {
            let i = net.slack_index();
            net.buses[i].v_angle = value;
            true
        }
        ControlId::GenActive(b) => {
            let count = net.generators.iter().filter(|g| g.bus == b).count();
            for g in net.generators.iter_mut().filter(|g| g.bus == b) {
                g.p_out = value / count as f64;
            }
            count > 0
        }
        ControlId::LoadP(b) | ControlId::LoadQ(b) => match net.bus_index(b) {
            Some(i) => {
                if matches!(id, ControlId::LoadP(_)) {
                    net.buses[i].p_demand = value;
                } else {
                    net.buses[i].q_demand = value;
                }
                true
            }
            None => false,
        },
        ControlId::Tap(f, t) => match net.branch_index(f, t) {
            Some(k) => {
                net.branches[k].tap_ratio = value;
                true
            }
            None => false,
        },
        ControlId::Shunt(b) => match net.shunts.iter_mut().find(|s| s.bus == b) {
            Some(s) => {
                s.q_injection = value;
                true
            }
            None => false,
        },
    }
}
