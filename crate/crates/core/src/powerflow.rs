//! Newton-Raphson AC power flow in polar coordinates, branch flows and
//! operating-limit checks.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netmodel::{build_admittance, AdmittanceMatrix, BusKind, Network, NetworkError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerFlowError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("singular Jacobian at iteration {iteration}")]
    SingularJacobian { iteration: usize },
    #[error("power flow diverged at iteration {iteration} (mismatch {mismatch:.3e} pu)")]
    Diverged { iteration: usize, mismatch: f64 },
    #[error("power flow did not converge in {iterations} iterations (last mismatch {last_mismatch:.3e} pu)")]
    NonConvergence {
        iterations: usize,
        last_mismatch: f64,
    },
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerFlowOptions {
    /// Largest admissible |mismatch|, per-unit.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        PowerFlowOptions {
            tol: 1e-6,
            max_iter: 30,
        }
    }
}

/// Mismatch magnitude treated as divergence; no physical state is this far off.
const DIVERGENCE_MISMATCH: f64 = 1e6;

/// Ordering of the reduced power-flow unknowns: angles at every non-slack
/// bus, then magnitudes at every load bus.
#[derive(Debug, Clone)]
pub struct BusOrdering {
    pub slack: usize,
    pub non_slack: Vec<usize>,
    pub pq: Vec<usize>,
}

impl BusOrdering {
    pub fn new(net: &Network) -> Self {
        let slack = net.slack_index();
        let non_slack = (0..net.n_buses()).filter(|&i| i != slack).collect();
        let pq = net
            .buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.kind == BusKind::Load)
            .map(|(i, _)| i)
            .collect();
        BusOrdering {
            slack,
            non_slack,
            pq,
        }
    }

    pub fn dim(&self) -> usize {
        self.non_slack.len() + self.pq.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution {
    pub v_mag: Vec<f64>,
    pub v_angle: Vec<f64>,
    /// Net injections computed from the network equations at the solution.
    pub p_injection: Vec<f64>,
    pub q_injection: Vec<f64>,
    /// Real output of the slack generator(s).
    pub slack_p: f64,
    /// Reactive output per generator, in network order.
    pub gen_q: Vec<f64>,
    /// Series current of each branch, `y·(V_from/t − V_to)`.
    pub branch_current: Vec<Complex64>,
    pub branch_power_from: Vec<Complex64>,
    pub branch_power_to: Vec<Complex64>,
    /// Apparent power at the more-loaded end.
    pub branch_flow_mva: Vec<f64>,
    pub iterations: usize,
    pub max_mismatch: f64,
    pub mismatch_history: Vec<f64>,
}

impl PowerFlowSolution {
    pub fn voltages(&self) -> Vec<Complex64> {
        complex_voltages(&self.v_mag, &self.v_angle)
    }

    /// Σ real(S_from + S_to) over all branches.
    pub fn losses(&self) -> f64 {
        self.branch_power_from
            .iter()
            .zip(&self.branch_power_to)
            .map(|(a, b)| (a + b).re)
            .sum()
    }
}

pub fn complex_voltages(v_mag: &[f64], v_angle: &[f64]) -> Vec<Complex64> {
    v_mag
        .iter()
        .zip(v_angle)
        .map(|(&m, &a)| Complex64::from_polar(m, a))
        .collect()
}

/// `S_i = V_i · conj(Σ_j Y_ij V_j)` at every bus.
pub fn calc_power(y: &AdmittanceMatrix, v: &[Complex64]) -> Vec<Complex64> {
    y.mul_vec(v)
        .iter()
        .zip(v)
        .map(|(i, v)| v * i.conj())
        .collect()
}

/// Scheduled net injections `P_G − P_D`, `Q_G − Q_D` at every bus.
pub fn scheduled_injections(net: &Network) -> (Vec<f64>, Vec<f64>) {
    let mut p: Vec<f64> = net.buses.iter().map(|b| -b.p_demand).collect();
    let mut q: Vec<f64> = net.buses.iter().map(|b| -b.q_demand).collect();
    for g in &net.generators {
        let i = net.idx(g.bus);
        p[i] += g.p_out;
        q[i] += g.q_out;
    }
    (p, q)
}

/// Power-flow residuals: `ΔP_i` at every non-slack bus followed by `ΔQ_i`
/// at every load bus, each as scheduled minus computed injection.
pub fn compute_mismatch(
    net: &Network,
    y: &AdmittanceMatrix,
    v_mag: &[f64],
    v_angle: &[f64],
) -> Vec<f64> {
    let order = BusOrdering::new(net);
    let (p_spec, q_spec) = scheduled_injections(net);
    mismatch_with(&order, &p_spec, &q_spec, y, v_mag, v_angle)
}

fn mismatch_with(
    order: &BusOrdering,
    p_spec: &[f64],
    q_spec: &[f64],
    y: &AdmittanceMatrix,
    v_mag: &[f64],
    v_angle: &[f64],
) -> Vec<f64> {
    let s = calc_power(y, &complex_voltages(v_mag, v_angle));
    order
        .non_slack
        .iter()
        .map(|&i| p_spec[i] - s[i].re)
        .chain(order.pq.iter().map(|&i| q_spec[i] - s[i].im))
        .collect()
}

/// Dense partial derivatives of the computed complex injections with respect
/// to every bus angle and magnitude: `(∂S/∂δ, ∂S/∂|V|)`, row-major `n × n`.
pub(crate) fn power_derivatives(
    y: &AdmittanceMatrix,
    v: &[Complex64],
) -> (Vec<Complex64>, Vec<Complex64>) {
    let n = y.n();
    let current = y.mul_vec(v);
    let j = Complex64::i();
    let mut d_angle = vec![Complex64::new(0.0, 0.0); n * n];
    let mut d_mag = vec![Complex64::new(0.0, 0.0); n * n];
    for i in 0..n {
        for k in 0..n {
            let yik = y.get(i, k);
            if yik.norm_sqr() == 0.0 && i != k {
                continue;
            }
            let unit_k = v[k] / v[k].norm();
            d_angle[i * n + k] = -j * v[i] * (yik * v[k]).conj();
            d_mag[i * n + k] = v[i] * (yik * unit_k).conj();
        }
        let unit_i = v[i] / v[i].norm();
        d_angle[i * n + i] += j * v[i] * current[i].conj();
        d_mag[i * n + i] += unit_i * current[i].conj();
    }
    (d_angle, d_mag)
}

/// Jacobian of the mismatch vector with respect to non-slack angles then
/// load-bus magnitudes.
pub fn build_jacobian(
    net: &Network,
    y: &AdmittanceMatrix,
    v_mag: &[f64],
    v_angle: &[f64],
) -> DMatrix<f64> {
    jacobian_with(&BusOrdering::new(net), y, v_mag, v_angle)
}

fn jacobian_with(
    order: &BusOrdering,
    y: &AdmittanceMatrix,
    v_mag: &[f64],
    v_angle: &[f64],
) -> DMatrix<f64> {
    let n = y.n();
    let (d_angle, d_mag) = power_derivatives(y, &complex_voltages(v_mag, v_angle));
    let np = order.non_slack.len();
    let dim = order.dim();
    let mut jac = DMatrix::zeros(dim, dim);
    let rows = order
        .non_slack
        .iter()
        .map(|&i| (i, true))
        .chain(order.pq.iter().map(|&i| (i, false)));
    for (r, (i, real_part)) in rows.enumerate() {
        let pick = |z: Complex64| if real_part { -z.re } else { -z.im };
        for (c, &k) in order.non_slack.iter().enumerate() {
            jac[(r, c)] = pick(d_angle[i * n + k]);
        }
        for (c, &k) in order.pq.iter().enumerate() {
            jac[(r, np + c)] = pick(d_mag[i * n + k]);
        }
    }
    jac
}

/// Starting voltages: generator setpoints at slack/PV buses, the supplied
/// state (or flat 1∠0) elsewhere; the slack angle is the reference.
fn initial_state(net: &Network, init: Option<&PowerFlowSolution>) -> (Vec<f64>, Vec<f64>) {
    let n = net.n_buses();
    let (mut v_mag, mut v_angle) = match init {
        Some(s) if s.v_mag.len() == n => (s.v_mag.clone(), s.v_angle.clone()),
        _ => (vec![1.0; n], vec![0.0; n]),
    };
    for g in &net.generators {
        v_mag[net.idx(g.bus)] = g.v_setpoint;
    }
    let slack = net.slack_index();
    v_angle[slack] = net.buses[slack].v_angle;
    (v_mag, v_angle)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(
        0.0_f64,
        |m, x| if x.is_nan() { f64::NAN } else { m.max(x.abs()) },
    )
}

/// Solves the power-flow equations by full Newton-Raphson.
pub fn solve_newton_raphson(
    net: &Network,
    init: Option<&PowerFlowSolution>,
    opts: &PowerFlowOptions,
) -> Result<PowerFlowSolution, PowerFlowError> {
    if !(opts.tol > 0.0) {
        return Err(PowerFlowError::BadTolerance(opts.tol));
    }
    let y = build_admittance(net)?;
    let order = BusOrdering::new(net);
    let (p_spec, q_spec) = scheduled_injections(net);
    let (mut v_mag, mut v_angle) = initial_state(net, init);
    let np = order.non_slack.len();

    let mut history = Vec::new();
    let mut iteration = 0;
    loop {
        let mismatch = mismatch_with(&order, &p_spec, &q_spec, &y, &v_mag, &v_angle);
        let worst = max_abs(&mismatch);
        history.push(worst);
        if worst.is_nan() || worst > DIVERGENCE_MISMATCH {
            return Err(PowerFlowError::Diverged {
                iteration,
                mismatch: worst,
            });
        }
        if worst <= opts.tol {
            break;
        }
        if iteration >= opts.max_iter {
            return Err(PowerFlowError::NonConvergence {
                iterations: iteration,
                last_mismatch: worst,
            });
        }
        let jac = jacobian_with(&order, &y, &v_mag, &v_angle);
        let rhs = DVector::from_iterator(mismatch.len(), mismatch.iter().map(|m| -m));
        let step = jac
            .lu()
            .solve(&rhs)
            .filter(|s| s.iter().all(|x| x.is_finite()))
            .ok_or(PowerFlowError::SingularJacobian { iteration })?;
        for (c, &k) in order.non_slack.iter().enumerate() {
            v_angle[k] += step[c];
        }
        for (c, &k) in order.pq.iter().enumerate() {
            v_mag[k] += step[np + c];
        }
        iteration += 1;
    }

    Ok(assemble_solution(
        net, &y, v_mag, v_angle, iteration, history,
    ))
}

fn assemble_solution(
    net: &Network,
    y: &AdmittanceMatrix,
    v_mag: Vec<f64>,
    v_angle: Vec<f64>,
    iterations: usize,
    mismatch_history: Vec<f64>,
) -> PowerFlowSolution {
    let s = calc_power(y, &complex_voltages(&v_mag, &v_angle));
    let slack = net.slack_index();
    let slack_p = s[slack].re + net.buses[slack].p_demand;

    let mut gen_q = vec![0.0; net.generators.len()];
    for (k, g) in net.generators.iter().enumerate() {
        let i = net.idx(g.bus);
        let sharing = net.generators.iter().filter(|h| h.bus == g.bus).count() as f64;
        gen_q[k] = (s[i].im + net.buses[i].q_demand) / sharing;
    }

    let flows = compute_line_flows(net, &v_mag, &v_angle);
    PowerFlowSolution {
        p_injection: s.iter().map(|z| z.re).collect(),
        q_injection: s.iter().map(|z| z.im).collect(),
        slack_p,
        gen_q,
        branch_current: flows.iter().map(|f| f.current).collect(),
        branch_power_from: flows.iter().map(|f| f.s_from).collect(),
        branch_power_to: flows.iter().map(|f| f.s_to).collect(),
        branch_flow_mva: flows.iter().map(|f| f.mva).collect(),
        max_mismatch: *mismatch_history.last().unwrap_or(&0.0),
        mismatch_history,
        iterations,
        v_mag,
        v_angle,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchFlow {
    /// Series current `y·(V_from/t − V_to)`.
    pub current: Complex64,
    pub s_from: Complex64,
    pub s_to: Complex64,
    /// Apparent power at the more-loaded end, per-unit.
    pub mva: f64,
}

/// Current and end powers on every branch for a given voltage state.
pub fn compute_line_flows(net: &Network, v_mag: &[f64], v_angle: &[f64]) -> Vec<BranchFlow> {
    let v = complex_voltages(v_mag, v_angle);
    net.branches
        .iter()
        .map(|br| {
            let (vf, vt) = (v[net.idx(br.from_bus)], v[net.idx(br.to_bus)]);
            let ys = br.series_admittance();
            let half = Complex64::new(0.0, br.b_total / 2.0);
            let t = br.tap_ratio;
            let current = ys * (vf / t - vt);
            let i_from = (ys + half) / (t * t) * vf - ys / t * vt;
            let i_to = (ys + half) * vt - ys / t * vf;
            let s_from = vf * i_from.conj();
            let s_to = vt * i_to.conj();
            BranchFlow {
                current,
                s_from,
                s_to,
                mva: s_from.norm().max(s_to.norm()),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundSide {
    Lower,
    Upper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageViolation {
    pub bus: usize,
    pub value: f64,
    pub bound: f64,
    pub side: BoundSide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReactiveViolation {
    /// Index into `Network::generators`.
    pub generator: usize,
    pub bus: usize,
    pub value: f64,
    pub bound: f64,
    pub side: BoundSide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineViolation {
    /// Index into `Network::branches`.
    pub branch: usize,
    pub from_bus: usize,
    pub to_bus: usize,
    pub flow: f64,
    pub rating: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlackViolation {
    pub value: f64,
    pub bound: f64,
    pub side: BoundSide,
}

/// Every dependent quantity outside its operating limits.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub voltage_violations: Vec<VoltageViolation>,
    pub q_violations: Vec<ReactiveViolation>,
    pub line_violations: Vec<LineViolation>,
    pub slack_p_violation: Option<SlackViolation>,
}

impl ViolationReport {
    pub fn is_empty(&self) -> bool {
        self.voltage_violations.is_empty()
            && self.q_violations.is_empty()
            && self.line_violations.is_empty()
            && self.slack_p_violation.is_none()
    }

    pub fn count(&self) -> usize {
        self.voltage_violations.len()
            + self.q_violations.len()
            + self.line_violations.len()
            + usize::from(self.slack_p_violation.is_some())
    }

    pub fn violated_buses(&self) -> Vec<usize> {
        self.voltage_violations.iter().map(|v| v.bus).collect()
    }
}

fn outside(value: f64, lo: f64, hi: f64) -> Option<(f64, BoundSide)> {
    if value < lo {
        Some((lo, BoundSide::Lower))
    } else if value > hi {
        Some((hi, BoundSide::Upper))
    } else {
        None
    }
}

/// Lists load-bus voltages, generator reactive outputs, branch loadings and
/// slack real output that fall outside their limits.
pub fn check_violations(net: &Network, sol: &PowerFlowSolution) -> ViolationReport {
    let mut report = ViolationReport::default();
    for (i, b) in net.buses.iter().enumerate() {
        if b.kind != BusKind::Load {
            continue;
        }
        if let Some((bound, side)) = outside(sol.v_mag[i], b.v_min, b.v_max) {
            report.voltage_violations.push(VoltageViolation {
                bus: b.id,
                value: sol.v_mag[i],
                bound,
                side,
            });
        }
    }
    for (k, g) in net.generators.iter().enumerate() {
        if let Some((bound, side)) = outside(sol.gen_q[k], g.q_min, g.q_max) {
            report.q_violations.push(ReactiveViolation {
                generator: k,
                bus: g.bus,
                value: sol.gen_q[k],
                bound,
                side,
            });
        }
    }
    for (k, br) in net.branches.iter().enumerate() {
        if sol.branch_flow_mva[k] > br.s_rating {
            report.line_violations.push(LineViolation {
                branch: k,
                from_bus: br.from_bus,
                to_bus: br.to_bus,
                flow: sol.branch_flow_mva[k],
                rating: br.s_rating,
            });
        }
    }
    let slack_id = net.slack_bus().id;
    let (lo, hi) = net
        .generators
        .iter()
        .filter(|g| g.bus == slack_id)
        .fold((0.0, 0.0), |(lo, hi), g| (lo + g.p_min, hi + g.p_max));
    if let Some((bound, side)) = outside(sol.slack_p, lo, hi) {
        report.slack_p_violation = Some(SlackViolation {
            value: sol.slack_p,
            bound,
            side,
        });
    }
    report
}
