//! First-order sensitivities of the power-flow state to the controls at a
//! solved operating point, and influence ranking of controls on violated
//! bus voltages and branch currents.

use std::collections::{BTreeSet, HashMap};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::control::{ControlId, StateId};
use crate::netmodel::{build_admittance, BusKind, Network, NetworkError};
use crate::powerflow::{
    calc_power, complex_voltages, power_derivatives, solve_newton_raphson, PowerFlowError,
    PowerFlowOptions, PowerFlowSolution, ViolationReport,
};

/// Largest full-residual entry accepted as a converged operating point.
const CONVERGED_RESIDUAL: f64 = 1e-5;

/// Below this current magnitude, `R` reports the sensitivity of `|I|²`.
const ZERO_CURRENT: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SensitivityError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error("solution does not match the network ({0})")]
    Mismatched(String),
    #[error("operating point is not converged (largest residual {0:.3e})")]
    NotConverged(f64),
    #[error("state Jacobian is singular; the operating point is ill-conditioned (near voltage collapse)")]
    SingularJacobian,
    #[error("unknown control `{0}`")]
    UnknownControl(String),
}

/// A network together with a converged power-flow solution of it.
#[derive(Debug, Clone)]
pub struct OperatingPoint {
    pub network: Network,
    pub solution: PowerFlowSolution,
}

impl OperatingPoint {
    /// Checks that `solution` satisfies every power-flow equation of `network`.
    pub fn new(network: Network, solution: PowerFlowSolution) -> Result<Self, SensitivityError> {
        let n = network.n_buses();
        if solution.v_mag.len() != n
            || solution.v_angle.len() != n
            || solution.gen_q.len() != network.generators.len()
        {
            return Err(SensitivityError::Mismatched(format!("{n} buses expected")));
        }
        let op = OperatingPoint { network, solution };
        let worst = op.residuals()?.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
        if !(worst <= CONVERGED_RESIDUAL) {
            return Err(SensitivityError::NotConverged(worst));
        }
        Ok(op)
    }

    pub fn solve(network: Network, opts: &PowerFlowOptions) -> Result<Self, SensitivityError> {
        let solution = solve_newton_raphson(&network, None, opts)?;
        OperatingPoint::new(network, solution)
    }

    /// All `2N` residuals, real-power rows in bus order followed by
    /// reactive-power rows, with the slack and generator outputs of the solution.
    pub fn residuals(&self) -> Result<Vec<f64>, SensitivityError> {
        let net = &self.network;
        let n = net.n_buses();
        let y = build_admittance(net)?;
        let s = calc_power(
            &y,
            &complex_voltages(&self.solution.v_mag, &self.solution.v_angle),
        );
        let slack = net.slack_index();
        let mut g = vec![0.0; 2 * n];
        for (i, b) in net.buses.iter().enumerate() {
            g[i] = -b.p_demand - s[i].re;
            g[n + i] = -b.q_demand - s[i].im;
        }
        for (k, gen) in net.generators.iter().enumerate() {
            let i = net.idx(gen.bus);
            if i != slack {
                g[i] += gen.p_out;
            }
            g[n + i] += self.solution.gen_q[k];
        }
        g[slack] += self.solution.slack_p;
        Ok(g)
    }

    fn bus_ids(&self, kind: BusKind) -> Vec<usize> {
        self.network
            .buses
            .iter()
            .filter(|b| b.kind == kind)
            .map(|b| b.id)
            .collect()
    }

    /// State variables in grouped order: `P_sl, Q_sl, Q_G, δ_G, V_L, δ_L`.
    pub fn states(&self) -> Vec<StateId> {
        let pv = self.bus_ids(BusKind::Generator);
        let pq = self.bus_ids(BusKind::Load);
        let mut x = vec![StateId::SlackP, StateId::SlackQ];
        x.extend(pv.iter().map(|&b| StateId::GenQ(b)));
        x.extend(pv.iter().map(|&b| StateId::GenAngle(b)));
        x.extend(pq.iter().map(|&b| StateId::LoadVoltage(b)));
        x.extend(pq.iter().map(|&b| StateId::LoadAngle(b)));
        x
    }

    /// Value of one state variable at this point.
    pub fn state_value(&self, x: StateId) -> f64 {
        let net = &self.network;
        let sol = &self.solution;
        let reactive_at = |bus: usize| -> f64 {
            net.generators
                .iter()
                .zip(&sol.gen_q)
                .filter(|(g, _)| g.bus == bus)
                .map(|(_, q)| q)
                .sum()
        };
        match x {
            StateId::SlackP => sol.slack_p,
            StateId::SlackQ => reactive_at(net.slack_bus().id),
            StateId::GenQ(b) => reactive_at(b),
            StateId::GenAngle(b) | StateId::LoadAngle(b) => sol.v_angle[net.idx(b)],
            StateId::LoadVoltage(b) => sol.v_mag[net.idx(b)],
        }
    }

    /// Controls in grouped order `V_sl, δ_sl, P_G, V_G, P_L, Q_L`, followed by
    /// regulating taps and shunt compensators.
    pub fn controls(&self) -> Vec<ControlId> {
        let net = &self.network;
        let pv = self.bus_ids(BusKind::Generator);
        let pq = self.bus_ids(BusKind::Load);
        let mut u = vec![
            ControlId::GenVoltage(net.slack_bus().id),
            ControlId::SlackAngle,
        ];
        u.extend(pv.iter().map(|&b| ControlId::GenActive(b)));
        u.extend(pv.iter().map(|&b| ControlId::GenVoltage(b)));
        u.extend(pq.iter().map(|&b| ControlId::LoadP(b)));
        u.extend(pq.iter().map(|&b| ControlId::LoadQ(b)));
        u.extend(
            net.branches
                .iter()
                .filter(|b| b.is_regulating())
                .map(|b| ControlId::Tap(b.from_bus, b.to_bus)),
        );
        u.extend(net.shunts.iter().map(|s| ControlId::Shunt(s.bus)));
        u
    }
}

/// Residual Jacobians at an operating point, with their labels.
#[derive(Debug, Clone)]
pub struct ResidualJacobians {
    pub gx: DMatrix<f64>,
    pub gu: DMatrix<f64>,
    pub states: Vec<StateId>,
    pub controls: Vec<ControlId>,
}

struct Derivatives<'a> {
    net: &'a Network,
    n: usize,
    v: Vec<Complex64>,
    d_angle: Vec<Complex64>,
    d_mag: Vec<Complex64>,
}

impl Derivatives<'_> {
    fn unit(&self, row: usize, value: f64) -> DVector<f64> {
        let mut col = DVector::zeros(2 * self.n);
        col[row] = value;
        col
    }

    /// Residual column for `−∂S/∂(angle or magnitude of bus k)`.
    fn voltage_column(&self, bus: usize, magnitude: bool) -> DVector<f64> {
        let k = self.net.idx(bus);
        let d = if magnitude {
            &self.d_mag
        } else {
            &self.d_angle
        };
        let n = self.n;
        let mut col = DVector::zeros(2 * n);
        for i in 0..n {
            col[i] = -d[i * n + k].re;
            col[n + i] = -d[i * n + k].im;
        }
        col
    }

    fn tap_column(&self, from: usize, to: usize) -> Option<DVector<f64>> {
        let br = &self.net.branches[self.net.branch_index(from, to)?];
        let (f, t) = (self.net.idx(from), self.net.idx(to));
        let ys = br.series_admittance();
        let half = Complex64::new(0.0, br.b_total / 2.0);
        let tau = br.tap_ratio;
        let di_f = -2.0 * (ys + half) / tau.powi(3) * self.v[f] + ys / (tau * tau) * self.v[t];
        let di_t = ys / (tau * tau) * self.v[f];
        let mut col = DVector::zeros(2 * self.n);
        for (i, di) in [(f, di_f), (t, di_t)] {
            let ds = self.v[i] * di.conj();
            col[i] -= ds.re;
            col[self.n + i] -= ds.im;
        }
        Some(col)
    }

    fn state_column(&self, x: StateId) -> DVector<f64> {
        let slack = self.net.slack_index();
        match x {
            StateId::SlackP => self.unit(slack, 1.0),
            StateId::SlackQ => self.unit(self.n + slack, 1.0),
            StateId::GenQ(b) => self.unit(self.n + self.net.idx(b), 1.0),
            StateId::GenAngle(b) | StateId::LoadAngle(b) => self.voltage_column(b, false),
            StateId::LoadVoltage(b) => self.voltage_column(b, true),
        }
    }

    fn control_column(&self, u: ControlId) -> Option<DVector<f64>> {
        let bus = |b: usize| self.net.bus_index(b);
        Some(match u {
            ControlId::GenVoltage(b) => {
                bus(b)?;
                self.voltage_column(b, true)
            }
            ControlId::SlackAngle => self.voltage_column(self.net.slack_bus().id, false),
            ControlId::GenActive(b) => self.unit(bus(b)?, 1.0),
            ControlId::LoadP(b) => self.unit(bus(b)?, -1.0),
            ControlId::LoadQ(b) => self.unit(self.n + bus(b)?, -1.0),
            ControlId::Tap(f, t) => self.tap_column(f, t)?,
            ControlId::Shunt(b) => {
                let i = bus(b)?;
                self.unit(self.n + i, self.v[i].norm_sqr())
            }
        })
    }
}

fn derivatives(op: &OperatingPoint) -> Result<Derivatives<'_>, SensitivityError> {
    let y = build_admittance(&op.network)?;
    let v = complex_voltages(&op.solution.v_mag, &op.solution.v_angle);
    let (d_angle, d_mag) = power_derivatives(&y, &v);
    Ok(Derivatives {
        net: &op.network,
        n: op.network.n_buses(),
        v,
        d_angle,
        d_mag,
    })
}

/// Partial derivatives of the `2N` residuals with respect to the grouped
/// state variables (`gx`, square) and every control (`gu`).
pub fn build_gx_gu(op: &OperatingPoint) -> Result<ResidualJacobians, SensitivityError> {
    let d = derivatives(op)?;
    let states = op.states();
    let controls = op.controls();
    let gx_cols: Vec<_> = states.iter().map(|&x| d.state_column(x)).collect();
    let gu_cols = controls
        .iter()
        .map(|&u| {
            d.control_column(u)
                .ok_or_else(|| SensitivityError::UnknownControl(u.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let rows = 2 * d.n;
    Ok(ResidualJacobians {
        gx: DMatrix::from_columns(&gx_cols),
        gu: if gu_cols.is_empty() {
            DMatrix::zeros(rows, 0)
        } else {
            DMatrix::from_columns(&gu_cols)
        },
        states,
        controls,
    })
}

/// `Su = −gx⁻¹·gu`, rows labeled by state, columns by control.
#[derive(Debug, Clone)]
pub struct VoltageSensitivity {
    pub matrix: DMatrix<f64>,
    pub states: Vec<StateId>,
    pub controls: Vec<ControlId>,
    /// Controls whose perturbations are treated as zero when predicting.
    pub held: BTreeSet<ControlId>,
    slack_bus: usize,
}

impl VoltageSensitivity {
    pub fn state_index(&self, x: StateId) -> Option<usize> {
        self.states.iter().position(|&s| s == x)
    }

    pub fn control_index(&self, u: ControlId) -> Option<usize> {
        self.controls.iter().position(|&c| c == u)
    }

    pub fn get(&self, x: StateId, u: ControlId) -> Option<f64> {
        Some(self.matrix[(self.state_index(x)?, self.control_index(u)?)])
    }

    /// Holds the reference and generator voltages and the reference angle.
    pub fn hold_reference(&mut self) {
        for &u in &self.controls {
            if matches!(u, ControlId::GenVoltage(_) | ControlId::SlackAngle) {
                self.held.insert(u);
            }
        }
    }

    /// Sensitivity of every bus magnitude then every bus angle, in bus
    /// order, to every control. Generator-bus magnitudes and the reference
    /// angle are controls themselves, giving unit entries.
    pub fn bus_voltage_map(&self, net: &Network) -> DMatrix<f64> {
        let n = net.n_buses();
        let mut w = DMatrix::zeros(2 * n, self.controls.len());
        for (i, b) in net.buses.iter().enumerate() {
            let (mag, ang) = match b.kind {
                BusKind::Load => (
                    Some(StateId::LoadVoltage(b.id)),
                    Some(StateId::LoadAngle(b.id)),
                ),
                BusKind::Generator => (None, Some(StateId::GenAngle(b.id))),
                BusKind::Slack => (None, None),
            };
            match mag.and_then(|s| self.state_index(s)) {
                Some(r) => w.row_mut(i).copy_from(&self.matrix.row(r)),
                None => {
                    if let Some(c) = self.control_index(ControlId::GenVoltage(b.id)) {
                        w[(i, c)] = 1.0;
                    }
                }
            }
            match ang.and_then(|s| self.state_index(s)) {
                Some(r) => w.row_mut(n + i).copy_from(&self.matrix.row(r)),
                None if i == self.slack_bus => {
                    if let Some(c) = self.control_index(ControlId::SlackAngle) {
                        w[(n + i, c)] = 1.0;
                    }
                }
                None => {}
            }
        }
        w
    }
}

/// Solves for `Su`; a singular `gx` marks an ill-conditioned point.
pub fn voltage_sensitivity(op: &OperatingPoint) -> Result<VoltageSensitivity, SensitivityError> {
    let jac = build_gx_gu(op)?;
    let lu = jac.gx.clone().lu();
    let solved = lu
        .solve(&jac.gu)
        .ok_or(SensitivityError::SingularJacobian)?;
    if solved.iter().any(|v| !v.is_finite()) {
        return Err(SensitivityError::SingularJacobian);
    }
    Ok(VoltageSensitivity {
        matrix: -solved,
        states: jac.states,
        controls: jac.controls,
        held: BTreeSet::new(),
        slack_bus: op.network.slack_index(),
    })
}

/// `Δx = Su·Δu` over the supplied entries; held controls contribute nothing.
pub fn predict_state_change(
    s: &VoltageSensitivity,
    du: &[(ControlId, f64)],
) -> Result<Vec<(StateId, f64)>, SensitivityError> {
    let mut dx = DVector::zeros(s.states.len());
    for &(u, delta) in du {
        let c = s
            .control_index(u)
            .ok_or_else(|| SensitivityError::UnknownControl(u.to_string()))?;
        if !s.held.contains(&u) {
            dx.axpy(delta, &s.matrix.column(c), 1.0);
        }
    }
    Ok(s.states.iter().copied().zip(dx.iter().copied()).collect())
}

/// `R`: change of each branch-current magnitude per change of each bus
/// magnitude (first `N` columns) and angle (last `N`), plus the direct
/// effect of each branch's own tap.
#[derive(Debug, Clone)]
pub struct CurrentSensitivity {
    pub matrix: DMatrix<f64>,
    /// `(from, to)` bus ids per row.
    pub branches: Vec<(usize, usize)>,
    pub bus_ids: Vec<usize>,
    /// `∂|I|/∂τ` for each branch with respect to its own tap ratio.
    pub tap_direct: Vec<f64>,
    /// Rows where `|I|` vanished and the entries are for `|I|²`.
    pub squared_rows: Vec<usize>,
}

impl CurrentSensitivity {
    pub fn column_labels(&self) -> Vec<String> {
        let mags = self.bus_ids.iter().map(|b| format!("V{b}"));
        mags.chain(self.bus_ids.iter().map(|b| format!("delta{b}")))
            .collect()
    }

    pub fn row_labels(&self) -> Vec<String> {
        self.branches
            .iter()
            .map(|(f, t)| format!("I_{f}-{t}"))
            .collect()
    }

    /// Predicted `Δ|I|` per branch for bus magnitude/angle changes.
    pub fn predict(&self, dv: &[f64]) -> Vec<f64> {
        (&self.matrix * DVector::from_column_slice(dv))
            .iter()
            .copied()
            .collect()
    }
}

pub fn current_sensitivity(op: &OperatingPoint) -> CurrentSensitivity {
    let net = &op.network;
    let n = net.n_buses();
    let v = complex_voltages(&op.solution.v_mag, &op.solution.v_angle);
    let mut matrix = DMatrix::zeros(net.branches.len(), 2 * n);
    let mut tap_direct = Vec::with_capacity(net.branches.len());
    let mut squared_rows = Vec::new();
    let j = Complex64::i();
    for (row, br) in net.branches.iter().enumerate() {
        let (f, t) = (net.idx(br.from_bus), net.idx(br.to_bus));
        let ys = br.series_admittance();
        let tau = br.tap_ratio;
        let current = ys * (v[f] / tau - v[t]);
        // Re(conj(I)·dI)/|I|, or 2·Re(conj(I)·dI) for |I|² when |I| vanishes.
        let scale = if current.norm() < ZERO_CURRENT {
            squared_rows.push(row);
            2.0
        } else {
            1.0 / current.norm()
        };
        let project = |di: Complex64| (current.conj() * di).re * scale;
        matrix[(row, f)] += project(ys / tau * v[f] / v[f].norm());
        matrix[(row, n + f)] += project(ys / tau * j * v[f]);
        matrix[(row, t)] += project(-ys * v[t] / v[t].norm());
        matrix[(row, n + t)] += project(-ys * j * v[t]);
        tap_direct.push(project(-ys * v[f] / (tau * tau)));
    }
    CurrentSensitivity {
        matrix,
        branches: net
            .branches
            .iter()
            .map(|b| (b.from_bus, b.to_bus))
            .collect(),
        bus_ids: net.buses.iter().map(|b| b.id).collect(),
        tap_direct,
        squared_rows,
    }
}

/// Branch-current sensitivity to every control: `R·W` plus direct tap terms.
pub fn branch_control_sensitivity(
    s: &VoltageSensitivity,
    r: &CurrentSensitivity,
    net: &Network,
) -> DMatrix<f64> {
    let mut m = &r.matrix * s.bus_voltage_map(net);
    for (row, &(f, t)) in r.branches.iter().enumerate() {
        if let Some(c) = s.control_index(ControlId::Tap(f, t)) {
            m[(row, c)] += r.tap_direct[row];
        }
    }
    m
}

/// A quantity outside its limit that controls are ranked against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolatedQuantity {
    BusVoltage(usize),
    BranchCurrent(usize, usize),
}

impl std::fmt::Display for ViolatedQuantity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ViolatedQuantity::BusVoltage(b) => write!(f, "V_L{b}"),
            ViolatedQuantity::BranchCurrent(a, b) => write!(f, "I_{a}-{b}"),
        }
    }
}

impl Serialize for ViolatedQuantity {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedControl {
    pub control: ControlId,
    pub magnitude: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantityRanking {
    pub quantity: ViolatedQuantity,
    pub controls: Vec<RankedControl>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ControlRanking {
    pub per_quantity: Vec<QuantityRanking>,
    /// Each candidate scored by its largest magnitude over all quantities.
    pub aggregate: Vec<RankedControl>,
}

impl ControlRanking {
    pub fn is_empty(&self) -> bool {
        self.per_quantity.is_empty()
    }

    /// Keeps the first `k` controls of every list.
    pub fn truncate(&mut self, k: usize) {
        for q in &mut self.per_quantity {
            q.controls.truncate(k);
        }
        self.aggregate.truncate(k);
    }
}

/// Generator voltages other than the reference, regulating taps and shunts.
pub fn default_candidates(net: &Network) -> Vec<ControlId> {
    let slack = net.slack_bus().id;
    crate::control::opf_controls(net)
        .into_iter()
        .filter(|u| match u {
            ControlId::GenVoltage(b) => *b != slack,
            ControlId::Tap(..) | ControlId::Shunt(_) => true,
            _ => false,
        })
        .collect()
}

/// Sorts by magnitude, descending; ties keep the candidate order.
fn sorted(mut list: Vec<RankedControl>) -> Vec<RankedControl> {
    list.sort_by(|a, b| b.magnitude.total_cmp(&a.magnitude));
    list
}

/// Ranks `candidates` by absolute sensitivity of each violated load-bus
/// voltage (via `Su`) and each overloaded branch's current (via `R·W`).
pub fn rank_controls(
    s: &VoltageSensitivity,
    r: &CurrentSensitivity,
    net: &Network,
    violations: &ViolationReport,
    candidates: &[ControlId],
) -> Result<ControlRanking, SensitivityError> {
    let cols = candidates
        .iter()
        .map(|&u| {
            s.control_index(u)
                .ok_or_else(|| SensitivityError::UnknownControl(u.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows: Vec<(ViolatedQuantity, Vec<f64>)> = Vec::new();
    for v in &violations.voltage_violations {
        if let Some(r) = s.state_index(StateId::LoadVoltage(v.bus)) {
            rows.push((
                ViolatedQuantity::BusVoltage(v.bus),
                cols.iter().map(|&c| s.matrix[(r, c)]).collect(),
            ));
        }
    }
    if !violations.line_violations.is_empty() {
        let m = branch_control_sensitivity(s, r, net);
        for l in &violations.line_violations {
            if l.branch < m.nrows() {
                let q = ViolatedQuantity::BranchCurrent(l.from_bus, l.to_bus);
                rows.push((q, cols.iter().map(|&c| m[(l.branch, c)]).collect()));
            }
        }
    }

    let mut best: HashMap<ControlId, RankedControl> = HashMap::new();
    let mut per_quantity = Vec::with_capacity(rows.len());
    for (quantity, values) in rows {
        let list: Vec<RankedControl> = candidates
            .iter()
            .zip(values)
            .map(|(&control, value)| RankedControl {
                control,
                magnitude: value.abs(),
                sensitivity: value,
            })
            .collect();
        for rc in &list {
            let entry = best.entry(rc.control).or_insert_with(|| rc.clone());
            if rc.magnitude > entry.magnitude {
                *entry = rc.clone();
            }
        }
        per_quantity.push(QuantityRanking {
            quantity,
            controls: sorted(list),
        });
    }
    let aggregate = if per_quantity.is_empty() {
        Vec::new()
    } else {
        sorted(candidates.iter().filter_map(|u| best.remove(u)).collect())
    };
    Ok(ControlRanking {
        per_quantity,
        aggregate,
    })
}

/// Row-major matrix with row and column labels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabeledMatrix {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub data: Vec<Vec<f64>>,
}

impl LabeledMatrix {
    pub fn new(rows: Vec<String>, columns: Vec<String>, m: &DMatrix<f64>) -> Self {
        let data = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        LabeledMatrix {
            rows,
            columns,
            data,
        }
    }

    /// `(row, column, value)` for every entry with `|value| > threshold`.
    pub fn nonzeros(&self, threshold: f64) -> Vec<(&str, &str, f64)> {
        let mut out = Vec::new();
        for (r, row) in self.data.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if v.abs() > threshold {
                    out.push((self.rows[r].as_str(), self.columns[c].as_str(), v));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SensitivityReport {
    pub su: LabeledMatrix,
    pub r: LabeledMatrix,
    pub ranking: ControlRanking,
}

impl SensitivityReport {
    pub fn build(
        s: &VoltageSensitivity,
        r: &CurrentSensitivity,
        ranking: ControlRanking,
    ) -> SensitivityReport {
        SensitivityReport {
            su: LabeledMatrix::new(
                s.states.iter().map(|x| x.to_string()).collect(),
                s.controls.iter().map(|u| u.to_string()).collect(),
                &s.matrix,
            ),
            r: LabeledMatrix::new(r.row_labels(), r.column_labels(), &r.matrix),
            ranking,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::set_control;
    use crate::netmodel::parse_case;
    use crate::powerflow::check_violations;
    use approx::assert_relative_eq;

    const TWO_BUS: &str = "\
[BASE_MVA]
100
[BUS]
1 slack 0 0 1.0 0 0.9 1.1
2 pq 0.5 0.2 1.0 0 0.9 1.1
[BRANCH]
1 2 0.02 0.1 0 1 - - 2
[GENERATOR]
1 0 0 0 2 -1 1 1.0 0 1 0.01
";

    fn base() -> OperatingPoint {
        OperatingPoint::solve(Network::ieee30(), &PowerFlowOptions::default()).unwrap()
    }

    /// Residual of every power-flow equation in polar form, with all
    /// injections given explicitly per bus.
    fn polar_residuals(net: &Network, vm: &[f64], va: &[f64], pg: &[f64], qg: &[f64]) -> Vec<f64> {
        let y = build_admittance(net).unwrap();
        let n = net.n_buses();
        let mut g = vec![0.0; 2 * n];
        for i in 0..n {
            let (mut p, mut q) = (0.0, 0.0);
            for k in 0..n {
                let yik = y.get(i, k);
                let (mag, theta) = (yik.norm(), yik.arg());
                p += vm[i] * vm[k] * mag * (theta + va[k] - va[i]).cos();
                q -= vm[i] * vm[k] * mag * (theta + va[k] - va[i]).sin();
            }
            g[i] = pg[i] - net.buses[i].p_demand - p;
            g[n + i] = qg[i] - net.buses[i].q_demand - q;
        }
        g
    }

    struct Point {
        net: Network,
        vm: Vec<f64>,
        va: Vec<f64>,
        pg: Vec<f64>,
        qg: Vec<f64>,
    }

    impl Point {
        fn of(op: &OperatingPoint) -> Point {
            let net = op.network.clone();
            let n = net.n_buses();
            let (mut pg, mut qg) = (vec![0.0; n], vec![0.0; n]);
            for (k, g) in net.generators.iter().enumerate() {
                let i = net.idx(g.bus);
                pg[i] += g.p_out;
                qg[i] += op.solution.gen_q[k];
            }
            pg[net.slack_index()] = op.solution.slack_p;
            Point {
                vm: op.solution.v_mag.clone(),
                va: op.solution.v_angle.clone(),
                net,
                pg,
                qg,
            }
        }

        fn g(&self) -> Vec<f64> {
            polar_residuals(&self.net, &self.vm, &self.va, &self.pg, &self.qg)
        }

        fn bump_state(&mut self, x: StateId, h: f64) {
            let slack = self.net.slack_index();
            match x {
                StateId::SlackP => self.pg[slack] += h,
                StateId::SlackQ => self.qg[slack] += h,
                StateId::GenQ(b) => self.qg[self.net.idx(b)] += h,
                StateId::GenAngle(b) | StateId::LoadAngle(b) => self.va[self.net.idx(b)] += h,
                StateId::LoadVoltage(b) => self.vm[self.net.idx(b)] += h,
            }
        }

        fn bump_control(&mut self, u: ControlId, h: f64) {
            let net = &mut self.net;
            match u {
                ControlId::GenVoltage(b) => self.vm[net.idx(b)] += h,
                ControlId::SlackAngle => self.va[net.slack_index()] += h,
                ControlId::GenActive(b) => self.pg[net.idx(b)] += h,
                ControlId::LoadP(b) => {
                    let i = net.idx(b);
                    net.buses[i].p_demand += h;
                }
                ControlId::LoadQ(b) => {
                    let i = net.idx(b);
                    net.buses[i].q_demand += h;
                }
                ControlId::Tap(..) | ControlId::Shunt(_) => {
                    let v = crate::control::control_value(net, u).unwrap();
                    assert!(set_control(net, u, v + h));
                }
            }
        }
    }

    fn central_difference(op: &OperatingPoint, bump: impl Fn(&mut Point, f64)) -> Vec<f64> {
        let h = 1e-6;
        let mut plus = Point::of(op);
        bump(&mut plus, h);
        let mut minus = Point::of(op);
        bump(&mut minus, -h);
        plus.g()
            .iter()
            .zip(minus.g())
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect()
    }

    fn assert_columns_match(analytic: &DMatrix<f64>, col: usize, fd: &[f64], label: &str) {
        let scale = fd.iter().fold(1.0_f64, |m, x| m.max(x.abs()));
        for (r, &expected) in fd.iter().enumerate() {
            let err = (analytic[(r, col)] - expected).abs() / scale;
            assert!(
                err <= 1e-5,
                "{label} row {r}: {} vs {expected}",
                analytic[(r, col)]
            );
        }
    }

    #[test]
    fn residuals_vanish_at_solution() {
        let op = base();
        let g = Point::of(&op).g();
        assert!(g.iter().all(|r| r.abs() < 1e-6));
        assert_eq!(op.states().len(), 60);
        assert_eq!(op.controls().len(), 60 + 4 + 9);
    }

    #[test]
    fn gx_gu_match_finite_differences() {
        let op = base();
        let jac = build_gx_gu(&op).unwrap();
        for (c, &x) in jac.states.iter().enumerate() {
            let fd = central_difference(&op, |p, h| p.bump_state(x, h));
            assert_columns_match(&jac.gx, c, &fd, &x.to_string());
        }
        for (c, &u) in jac.controls.iter().enumerate() {
            let fd = central_difference(&op, |p, h| p.bump_control(u, h));
            assert_columns_match(&jac.gu, c, &fd, &u.to_string());
        }
    }

    #[test]
    fn injection_columns_are_unit() {
        let op = base();
        let jac = build_gx_gu(&op).unwrap();
        let n = 30;
        assert_eq!(jac.gx.column(0).iter().filter(|v| **v != 0.0).count(), 1);
        assert_eq!(jac.gx[(0, 0)], 1.0);
        assert_eq!(jac.gx[(n, 1)], 1.0);
        let c = jac
            .controls
            .iter()
            .position(|&u| u == ControlId::LoadQ(7))
            .unwrap();
        assert_eq!(jac.gu[(n + 6, c)], -1.0);
        assert_eq!(jac.gu.column(c).iter().filter(|v| **v != 0.0).count(), 1);
    }

    #[test]
    fn two_bus_gx_matches_hand_derivation() {
        let net = parse_case(TWO_BUS).unwrap();
        let op = OperatingPoint::solve(net, &PowerFlowOptions::default()).unwrap();
        let jac = build_gx_gu(&op).unwrap();
        assert_eq!(
            jac.states,
            vec![
                StateId::SlackP,
                StateId::SlackQ,
                StateId::LoadVoltage(2),
                StateId::LoadAngle(2)
            ]
        );
        // y = 1/(0.02 + 0.1j); Y12 = −y, Y22 = y.
        let y = Complex64::new(1.0, 0.0) / Complex64::new(0.02, 0.1);
        let (g, b) = (y.re, y.im);
        let (v1, v2, d) = (
            op.solution.v_mag[0],
            op.solution.v_mag[1],
            op.solution.v_angle[1],
        );
        // With V1 = v1∠0 and V2 = v2∠d:
        // P1 = g v1² − v1v2 (g cos d − b sin d),  Q1 = −b v1² + v1v2 (g sin d + b cos d)
        // P2 = g v2² − v1v2 (g cos d + b sin d),  Q2 = −b v2² − v1v2 (g sin d − b cos d)
        let p1_dv2 = -v1 * (g * d.cos() - b * d.sin());
        let p1_dd2 = v1 * v2 * (g * d.sin() + b * d.cos());
        let q1_dv2 = v1 * (g * d.sin() + b * d.cos());
        let q1_dd2 = v1 * v2 * (g * d.cos() - b * d.sin());
        let p2_dv2 = 2.0 * g * v2 - v1 * (g * d.cos() + b * d.sin());
        let p2_dd2 = v1 * v2 * (g * d.sin() - b * d.cos());
        let q2_dv2 = -2.0 * b * v2 - v1 * (g * d.sin() - b * d.cos());
        let q2_dd2 = -v1 * v2 * (g * d.cos() + b * d.sin());
        #[rustfmt::skip]
        let expected = DMatrix::from_row_slice(4, 4, &[
            1.0, 0.0, -p1_dv2, -p1_dd2,
            0.0, 0.0, -p2_dv2, -p2_dd2,
            0.0, 1.0, -q1_dv2, -q1_dd2,
            0.0, 0.0, -q2_dv2, -q2_dd2,
        ]);
        for (a, e) in jac.gx.iter().zip(expected.iter()) {
            assert_relative_eq!(*a, *e, epsilon = 1e-10, max_relative = 1e-10);
        }
    }

    #[test]
    fn su_satisfies_defining_identity() {
        let op = base();
        let jac = build_gx_gu(&op).unwrap();
        let s = voltage_sensitivity(&op).unwrap();
        let residual = -(&jac.gx * &s.matrix) - &jac.gu;
        assert!(residual.amax() <= 1e-10, "{}", residual.amax());
    }

    #[test]
    fn slack_voltage_prediction_matches_resolve() {
        let op = base();
        let s = voltage_sensitivity(&op).unwrap();
        let du = 0.01;
        let predicted = s
            .get(StateId::LoadVoltage(26), ControlId::GenVoltage(1))
            .unwrap()
            * du;
        let mut net = op.network.clone();
        set_control(&mut net, ControlId::GenVoltage(1), 1.01 + du);
        let after = solve_newton_raphson(&net, None, &PowerFlowOptions::default()).unwrap();
        let actual = after.v_mag[25] - op.solution.v_mag[25];
        assert!(actual > 0.0);
        assert!(
            (predicted - actual).abs() <= 0.1 * actual.abs(),
            "{predicted} vs {actual}"
        );
    }

    #[test]
    fn prediction_is_linear_and_maskable() {
        let op = base();
        let mut s = voltage_sensitivity(&op).unwrap();
        assert!(predict_state_change(&s, &[])
            .unwrap()
            .iter()
            .all(|(_, v)| *v == 0.0));
        let single = predict_state_change(&s, &[(ControlId::GenActive(2), 0.1)]).unwrap();
        let c = s.control_index(ControlId::GenActive(2)).unwrap();
        for (r, (_, v)) in single.iter().enumerate() {
            assert_eq!(*v, 0.1 * s.matrix[(r, c)]);
        }
        let a = [(ControlId::Shunt(10), 0.02)];
        let b = [(ControlId::Tap(6, 9), -0.01)];
        let both = predict_state_change(&s, &[a[0], b[0]]).unwrap();
        let (pa, pb) = (
            predict_state_change(&s, &a).unwrap(),
            predict_state_change(&s, &b).unwrap(),
        );
        for ((x, y), z) in pa.iter().zip(&pb).zip(&both) {
            assert_relative_eq!(x.1 + y.1, z.1, epsilon = 1e-15);
        }
        assert!(predict_state_change(&s, &[(ControlId::Shunt(2), 0.1)]).is_err());

        let with_reference = [
            (ControlId::GenVoltage(1), 0.01),
            (ControlId::SlackAngle, 0.1),
            b[0],
        ];
        s.hold_reference();
        assert_eq!(predict_state_change(&s, &with_reference).unwrap(), pb);
    }

    #[test]
    fn current_sensitivity_matches_finite_differences() {
        let op = base();
        let r = current_sensitivity(&op);
        assert_eq!(r.matrix.shape(), (41, 60));
        assert!(r.squared_rows.is_empty());
        assert!(r.predict(&[0.0; 60]).iter().all(|v| *v == 0.0));
        let h = 1e-7;
        let magnitudes = |vm: &[f64], va: &[f64]| -> Vec<f64> {
            crate::powerflow::compute_line_flows(&op.network, vm, va)
                .iter()
                .map(|f| f.current.norm())
                .collect()
        };
        for col in 0..60 {
            let (mut vm_p, mut va_p) = (op.solution.v_mag.clone(), op.solution.v_angle.clone());
            let (mut vm_m, mut va_m) = (vm_p.clone(), va_p.clone());
            if col < 30 {
                vm_p[col] += h;
                vm_m[col] -= h;
            } else {
                va_p[col - 30] += h;
                va_m[col - 30] -= h;
            }
            for (row, (p, m)) in magnitudes(&vm_p, &va_p)
                .iter()
                .zip(magnitudes(&vm_m, &va_m))
                .enumerate()
            {
                let fd = (p - m) / (2.0 * h);
                assert!(
                    (r.matrix[(row, col)] - fd).abs() <= 1e-5 * fd.abs().max(1.0),
                    "({row}, {col})"
                );
            }
        }
    }

    #[test]
    fn branch_current_prediction_matches_resolve() {
        let op = base();
        let s = voltage_sensitivity(&op).unwrap();
        let r = current_sensitivity(&op);
        let m = branch_control_sensitivity(&s, &r, &op.network);
        let du = 0.001;
        let predicted = m[(0, s.control_index(ControlId::GenVoltage(2)).unwrap())] * du;
        let mut net = op.network.clone();
        set_control(&mut net, ControlId::GenVoltage(2), 1.0 + du);
        let after = solve_newton_raphson(&net, None, &PowerFlowOptions::default()).unwrap();
        let actual = after.branch_current[0].norm() - op.solution.branch_current[0].norm();
        assert!(
            (predicted - actual).abs() <= 0.1 * actual.abs(),
            "{predicted} vs {actual}"
        );
    }

    #[test]
    fn zero_current_branch_uses_squared_magnitude() {
        let mut net = parse_case(TWO_BUS).unwrap();
        net.buses[1].p_demand = 0.0;
        net.buses[1].q_demand = 0.0;
        let op = OperatingPoint::solve(net, &PowerFlowOptions::default()).unwrap();
        let r = current_sensitivity(&op);
        assert_eq!(r.squared_rows, vec![0]);
        assert!(r.matrix.iter().all(|v| v.is_finite() && v.abs() < 1e-6));
    }

    #[test]
    fn base_case_ranking_covers_violations() {
        let op = base();
        let s = voltage_sensitivity(&op).unwrap();
        let r = current_sensitivity(&op);
        let report = check_violations(&op.network, &op.solution);
        let candidates = default_candidates(&op.network);
        let ranking = rank_controls(&s, &r, &op.network, &report, &candidates).unwrap();
        assert_eq!(ranking.per_quantity.len(), 13);
        for q in &ranking.per_quantity {
            assert_eq!(q.controls.len(), candidates.len());
            assert!(q
                .controls
                .windows(2)
                .all(|w| w[0].magnitude >= w[1].magnitude));
        }
        assert!(ranking
            .aggregate
            .windows(2)
            .all(|w| w[0].magnitude >= w[1].magnitude));

        let subset: Vec<ControlId> = [1, 2, 5, 8]
            .iter()
            .map(|&b| ControlId::GenVoltage(b))
            .collect();
        let ranking = rank_controls(&s, &r, &op.network, &report, &subset).unwrap();
        for q in &ranking.per_quantity {
            assert!(q.controls.iter().all(|c| subset.contains(&c.control)));
        }

        let empty = rank_controls(
            &s,
            &r,
            &op.network,
            &ViolationReport::default(),
            &candidates,
        )
        .unwrap();
        assert!(empty.is_empty() && empty.aggregate.is_empty());
        assert!(rank_controls(&s, &r, &op.network, &report, &[ControlId::Shunt(3)]).is_err());
    }

    #[test]
    fn unconverged_point_is_rejected() {
        let net = Network::ieee30();
        let mut sol = solve_newton_raphson(&net, None, &PowerFlowOptions::default()).unwrap();
        sol.v_mag[20] += 0.01;
        assert!(matches!(
            OperatingPoint::new(net, sol),
            Err(SensitivityError::NotConverged(_))
        ));
    }
}
