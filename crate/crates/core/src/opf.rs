//! Penalised fuel-cost objective over a set of controls, solved with the
//! particle swarm, plus loading sweeps with warm starts.

use std::io::Write;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{
    control_bounds, control_value, opf_controls, set_control, ControlId, LabelError,
};
use crate::netmodel::{scale_load, Network, NetworkError};
use crate::powerflow::{
    check_violations, solve_newton_raphson, PowerFlowError, PowerFlowOptions, PowerFlowSolution,
    ViolationReport,
};
use crate::pso::{run_seeded, PsoConfig, PsoError, PsoResult, Termination};
use crate::sensitivity::{
    current_sensitivity, default_candidates, rank_controls, voltage_sensitivity, OperatingPoint,
    SensitivityError,
};

#[derive(Debug, Error)]
pub enum OpfError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error(transparent)]
    Pso(#[from] PsoError),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error("invalid control set: {0}")]
    ControlSet(String),
    #[error("expected {expected} control values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("penalty factor must be positive and finite, got {0}")]
    InvalidPenalty(f64),
    #[error("no particle reached a solvable power flow; the control set is infeasible")]
    Infeasible,
    #[error("loading levels must be positive and ascending")]
    UnsortedLevels,
}

/// Ordered OPF controls with their limits.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlSet {
    controls: Vec<ControlId>,
    bounds: Vec<(f64, f64)>,
}

impl ControlSet {
    /// Accepts generator voltages, non-slack real outputs, regulating taps
    /// and compensators that exist in `net`, once each.
    pub fn new(net: &Network, controls: Vec<ControlId>) -> Result<Self, OpfError> {
        let slack = net.slack_bus().id;
        let mut bounds = Vec::with_capacity(controls.len());
        for (k, &u) in controls.iter().enumerate() {
            if controls[..k].contains(&u) {
                return Err(OpfError::ControlSet(format!("{u} listed twice")));
            }
            match u {
                ControlId::GenActive(b) if b == slack => {
                    return Err(OpfError::ControlSet(format!(
                        "{u} is the slack output, a state variable"
                    )));
                }
                ControlId::SlackAngle | ControlId::LoadP(_) | ControlId::LoadQ(_) => {
                    return Err(OpfError::ControlSet(format!("{u} is not an OPF control")));
                }
                _ => {}
            }
            match control_bounds(net, u) {
                Some((lo, hi)) if lo < hi => bounds.push((lo, hi)),
                Some(_) => return Err(OpfError::ControlSet(format!("{u} has an empty range"))),
                None => {
                    return Err(OpfError::ControlSet(format!(
                        "{u} does not name a controllable element"
                    )))
                }
            }
        }
        Ok(ControlSet { controls, bounds })
    }

    /// Generator voltages, non-slack outputs, taps and compensators.
    pub fn full(net: &Network) -> Self {
        ControlSet::new(net, opf_controls(net)).expect("network controls resolve")
    }

    /// Every non-slack output and every generator voltage.
    pub fn pg_vg(net: &Network) -> Self {
        let ids = opf_controls(net)
            .into_iter()
            .filter(|u| matches!(u, ControlId::GenVoltage(_) | ControlId::GenActive(_)))
            .collect();
        ControlSet::new(net, ids).expect("network controls resolve")
    }

    /// Every non-slack output plus the voltages of the listed generator buses.
    pub fn pg_with_voltages(net: &Network, buses: &[usize]) -> Result<Self, OpfError> {
        let mut ids: Vec<ControlId> = buses.iter().map(|&b| ControlId::GenVoltage(b)).collect();
        ids.extend(
            opf_controls(net)
                .into_iter()
                .filter(|u| matches!(u, ControlId::GenActive(_))),
        );
        ControlSet::new(net, ids)
    }

    /// Parses `full`, `pg+vg`, `pg+vg:1,2,5,8`, or a comma-separated list of
    /// control labels such as `P_G2,V_G1,T_6-9,Q_C10`.
    pub fn parse(net: &Network, text: &str) -> Result<Self, OpfError> {
        let text = text.trim();
        match text.to_ascii_lowercase().as_str() {
            "full" => return Ok(ControlSet::full(net)),
            "pg+vg" => return Ok(ControlSet::pg_vg(net)),
            _ => {}
        }
        if let Some(list) = text.to_ascii_lowercase().strip_prefix("pg+vg:") {
            let buses = list
                .split(',')
                .map(|b| {
                    b.trim()
                        .parse::<usize>()
                        .map_err(|_| OpfError::ControlSet(format!("bad bus id `{b}`")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            return ControlSet::pg_with_voltages(net, &buses);
        }
        let ids = text
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<ControlId>, _>>()?;
        ControlSet::new(net, ids)
    }

    pub fn controls(&self) -> &[ControlId] {
        &self.controls
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    /// Values of the controls in `net`, clamped to their limits.
    pub fn current_values(&self, net: &Network) -> Vec<f64> {
        self.controls
            .iter()
            .zip(&self.bounds)
            .map(|(&u, &(lo, hi))| control_value(net, u).unwrap_or(lo).clamp(lo, hi))
            .collect()
    }

    pub fn labels(&self) -> Vec<String> {
        self.controls.iter().map(|u| u.to_string()).collect()
    }
}

/// Penalty factor and per-term weights of the augmented objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltyConfig {
    pub lambda: f64,
    /// Slack real output against its generator limits.
    pub lambda_p: f64,
    /// Load-bus voltage magnitudes.
    pub lambda_v: f64,
    /// Generator reactive outputs.
    pub lambda_q: f64,
    /// Branch apparent-power ratings.
    pub lambda_s: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            lambda: 1e6,
            lambda_p: 1.0,
            lambda_v: 1.0,
            lambda_q: 1.0,
            lambda_s: 1.0,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<(), OpfError> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(OpfError::InvalidPenalty(self.lambda));
        }
        for w in [self.lambda_p, self.lambda_v, self.lambda_q, self.lambda_s] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(OpfError::InvalidPenalty(w));
            }
        }
        Ok(())
    }

    /// `λ · Σ w · (x − x_lim)²` over the reported violations, per-unit.
    pub fn penalty(&self, v: &ViolationReport) -> f64 {
        let sq = |x: f64, lim: f64| (x - lim) * (x - lim);
        let voltage: f64 = v
            .voltage_violations
            .iter()
            .map(|e| sq(e.value, e.bound))
            .sum();
        let reactive: f64 = v.q_violations.iter().map(|e| sq(e.value, e.bound)).sum();
        let lines: f64 = v.line_violations.iter().map(|e| sq(e.flow, e.rating)).sum();
        let slack: f64 = v
            .slack_p_violation
            .iter()
            .map(|e| sq(e.value, e.bound))
            .sum();
        self.lambda
            * (self.lambda_v * voltage
                + self.lambda_q * reactive
                + self.lambda_s * lines
                + self.lambda_p * slack)
    }
}

/// `Σ a + b·P + c·P²` with each output in MW.
pub fn fuel_cost(net: &Network, p_outputs_mw: &[f64]) -> f64 {
    net.generators
        .iter()
        .zip(p_outputs_mw)
        .map(|(g, &p)| g.cost(p))
        .sum()
}

/// Real output of every generator in MW; slack generators share the slack
/// output of the solution equally.
pub fn generator_outputs_mw(net: &Network, sol: &PowerFlowSolution) -> Vec<f64> {
    let slack = net.slack_bus().id;
    let n_slack = net.generators.iter().filter(|g| g.bus == slack).count() as f64;
    net.generators
        .iter()
        .map(|g| if g.bus == slack { sol.slack_p / n_slack } else { g.p_out } * net.base_mva)
        .collect()
}

/// Copy of `net` with the controls of `cs` set to `values`.
pub fn apply_controls(net: &Network, cs: &ControlSet, values: &[f64]) -> Result<Network, OpfError> {
    if values.len() != cs.len() {
        return Err(OpfError::LengthMismatch {
            expected: cs.len(),
            got: values.len(),
        });
    }
    let mut out = net.clone();
    for (&u, &x) in cs.controls.iter().zip(values) {
        if !set_control(&mut out, u, x) {
            return Err(OpfError::ControlSet(format!(
                "{u} does not resolve in this network"
            )));
        }
    }
    Ok(out)
}

/// Power flow, fuel cost and penalty of one control vector.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub network: Network,
    pub solution: PowerFlowSolution,
    pub violations: ViolationReport,
    pub fuel_cost: f64,
    pub penalty: f64,
}

impl Evaluation {
    pub fn penalized(&self) -> f64 {
        self.fuel_cost + self.penalty
    }
}

pub fn evaluate(
    net: &Network,
    cs: &ControlSet,
    values: &[f64],
    penalty: &PenaltyConfig,
) -> Result<Evaluation, OpfError> {
    let network = apply_controls(net, cs, values)?;
    let solution = solve_newton_raphson(&network, None, &PowerFlowOptions::default())?;
    let violations = check_violations(&network, &solution);
    let fuel = fuel_cost(&network, &generator_outputs_mw(&network, &solution));
    let pen = penalty.penalty(&violations);
    Ok(Evaluation {
        network,
        solution,
        violations,
        fuel_cost: fuel,
        penalty: pen,
    })
}

/// Augmented objective of one particle; `+∞` when the power flow fails.
pub fn evaluate_particle(
    net: &Network,
    cs: &ControlSet,
    values: &[f64],
    penalty: &PenaltyConfig,
) -> f64 {
    evaluate(net, cs, values, penalty).map_or(f64::INFINITY, |e| e.penalized())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlValue {
    pub control: ControlId,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PsoSummary {
    pub seed: u64,
    pub iterations_run: usize,
    pub terminated_by: Termination,
    pub gbest_value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OpfResult {
    /// Fuel cost in $/hr at the optimum, without penalty.
    pub best_cost: f64,
    pub penalized_best: f64,
    pub controls: Vec<ControlValue>,
    pub generator_outputs_mw: Vec<f64>,
    pub solution: PowerFlowSolution,
    pub violations: ViolationReport,
    /// Penalised best value of the swarm after each iteration.
    pub trace: Vec<f64>,
    pub reported: Reported,
    pub pso: PsoSummary,
}

impl OpfResult {
    pub fn control_values(&self) -> Vec<f64> {
        self.controls.iter().map(|c| c.value).collect()
    }
}

pub fn solve_opf(
    net: &Network,
    cs: &ControlSet,
    penalty: &PenaltyConfig,
    cfg: &PsoConfig,
) -> Result<OpfResult, OpfError> {
    solve_opf_seeded(net, cs, penalty, cfg, &[])
}

/// Which evaluated point an [`OpfResult`] reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Reported {
    /// The swarm's best penalised point.
    SwarmBest,
    /// The cheapest violation-free point evaluated, used when the swarm's
    /// best point overshoots a limit.
    BestFeasible,
}

#[derive(Default)]
struct FeasibleBest(Mutex<Option<(f64, Vec<f64>)>>);

impl FeasibleBest {
    /// Keeps the lowest cost, ties broken by position, so the outcome does
    /// not depend on evaluation order.
    fn offer(&self, cost: f64, x: &[f64]) {
        let mut best = self.0.lock().expect("feasible-best lock");
        let better = match &*best {
            None => true,
            Some((c, p)) => {
                cost < *c
                    || (cost == *c
                        && x.iter()
                            .zip(p)
                            .map(|(a, b)| a.total_cmp(b))
                            .find(|o| o.is_ne())
                            == Some(std::cmp::Ordering::Less))
            }
        };
        if better {
            *best = Some((cost, x.to_vec()));
        }
    }
}

/// As [`solve_opf`], starting the first particles at `seeds`.
pub fn solve_opf_seeded(
    net: &Network,
    cs: &ControlSet,
    penalty: &PenaltyConfig,
    cfg: &PsoConfig,
    seeds: &[Vec<f64>],
) -> Result<OpfResult, OpfError> {
    penalty.validate()?;
    let feasible = FeasibleBest::default();
    let objective = |x: &[f64]| match evaluate(net, cs, x, penalty) {
        Ok(e) => {
            if e.violations.is_empty() {
                feasible.offer(e.fuel_cost, x);
            }
            e.penalized()
        }
        Err(_) => f64::INFINITY,
    };
    let pso: PsoResult = run_seeded(objective, cs.bounds(), cfg, seeds)?;
    if !pso.gbest_value.is_finite() {
        return Err(OpfError::Infeasible);
    }
    let mut position = pso.gbest_position.clone();
    let mut best = evaluate(net, cs, &position, penalty)?;
    let mut reported = Reported::SwarmBest;
    if !best.violations.is_empty() {
        if let Some((_, x)) = feasible.0.into_inner().expect("feasible-best lock") {
            best = evaluate(net, cs, &x, penalty)?;
            position = x;
            reported = Reported::BestFeasible;
        }
    }
    Ok(OpfResult {
        best_cost: best.fuel_cost,
        penalized_best: best.penalized(),
        controls: cs
            .controls
            .iter()
            .zip(&position)
            .map(|(&control, &value)| ControlValue { control, value })
            .collect(),
        generator_outputs_mw: generator_outputs_mw(&best.network, &best.solution),
        solution: best.solution,
        violations: best.violations,
        trace: pso.trace,
        reported,
        pso: PsoSummary {
            seed: cfg.seed,
            iterations_run: pso.iterations_run,
            terminated_by: pso.terminated_by,
            gbest_value: pso.gbest_value,
        },
    })
}

/// How each sweep level chooses its controls.
#[derive(Debug, Clone)]
pub enum ControlSelection {
    Fixed(Vec<ControlId>),
    /// Top two ranked controls per violated quantity at the warm-start
    /// point, plus every non-slack output.
    Auto,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepLevel {
    pub load_mw: f64,
    pub controls_used: Vec<ControlId>,
    /// Violations of the load-scaled case at its own control settings,
    /// before optimisation; `None` when that power flow fails.
    pub violations_before: Option<ViolationReport>,
    /// Violations at the warm-start point (previous optimum's controls on
    /// this level's load), where automatic selection ranks controls.
    pub violations_warm_start: Option<ViolationReport>,
    pub result: Option<OpfResult>,
    pub error: Option<String>,
    /// Network the level was optimised on: scaled load, warm-start controls.
    #[serde(skip)]
    pub network: Network,
}

impl SweepLevel {
    pub fn failed(&self) -> bool {
        self.result.is_none()
    }
}

const AUTO_PER_QUANTITY: usize = 2;

fn auto_controls(
    op: &OperatingPoint,
    violations: &ViolationReport,
) -> Result<Vec<ControlId>, OpfError> {
    let net = &op.network;
    let mut picked: Vec<ControlId> = Vec::new();
    if !violations.is_empty() {
        let s = voltage_sensitivity(op)?;
        let r = current_sensitivity(op);
        let ranking = rank_controls(&s, &r, net, violations, &default_candidates(net))?;
        for q in &ranking.per_quantity {
            picked.extend(q.controls.iter().take(AUTO_PER_QUANTITY).map(|c| c.control));
        }
    }
    Ok(opf_controls(net)
        .into_iter()
        .filter(|u| matches!(u, ControlId::GenActive(_)) || picked.contains(u))
        .collect())
}

/// Scales `base` to each level in turn and solves the OPF there, starting
/// from the previous level's optimal controls and seeding one particle with
/// them. A failed level is recorded and the sweep continues.
pub fn loading_sweep(
    base: &Network,
    levels: &[f64],
    selection: &ControlSelection,
    penalty: &PenaltyConfig,
    cfg: &PsoConfig,
) -> Result<Vec<SweepLevel>, OpfError> {
    if levels.iter().any(|l| !(*l > 0.0)) || levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(OpfError::UnsortedLevels);
    }
    penalty.validate()?;
    let base_total = base.total_p_demand_mw();
    let mut warm: Vec<ControlValue> = Vec::new();
    let mut out = Vec::with_capacity(levels.len());
    for (k, &level) in levels.iter().enumerate() {
        let scaled = if (level - base_total).abs() <= 1e-9 * base_total {
            base.clone()
        } else {
            scale_load(base, level)?
        };
        let violations_before = solve_newton_raphson(&scaled, None, &PowerFlowOptions::default())
            .ok()
            .map(|sol| check_violations(&scaled, &sol));
        let mut net = scaled;
        for c in &warm {
            set_control(&mut net, c.control, c.value);
        }
        let before = solve_newton_raphson(&net, None, &PowerFlowOptions::default())
            .ok()
            .map(|sol| (check_violations(&net, &sol), sol));

        let chosen: Result<Vec<ControlId>, OpfError> = match selection {
            ControlSelection::Fixed(ids) => Ok(ids.clone()),
            ControlSelection::Auto => match &before {
                Some((violations, sol)) => OperatingPoint::new(net.clone(), sol.clone())
                    .map_err(OpfError::from)
                    .and_then(|op| auto_controls(&op, violations)),
                None => Ok(opf_controls(&net)),
            },
        };
        let attempt = chosen.and_then(|ids| {
            let cs = ControlSet::new(&net, ids)?;
            let seeds = if k > 0 {
                vec![cs.current_values(&net)]
            } else {
                Vec::new()
            };
            let result = solve_opf_seeded(&net, &cs, penalty, cfg, &seeds)?;
            Ok((cs, result))
        });
        let violations_warm_start = before.map(|(v, _)| v);
        match attempt {
            Ok((cs, result)) => {
                for c in &result.controls {
                    match warm.iter_mut().find(|w| w.control == c.control) {
                        Some(w) => w.value = c.value,
                        None => warm.push(c.clone()),
                    }
                }
                out.push(SweepLevel {
                    load_mw: level,
                    controls_used: cs.controls().to_vec(),
                    violations_before,
                    violations_warm_start,
                    result: Some(result),
                    error: None,
                    network: net,
                });
            }
            Err(e) => out.push(SweepLevel {
                load_mw: level,
                controls_used: Vec::new(),
                violations_before,
                violations_warm_start,
                result: None,
                error: Some(e.to_string()),
                network: net,
            }),
        }
    }
    Ok(out)
}

/// `level_mw,cost,penalized,iterations,violations` for one or more results.
pub fn write_summary_csv<W: Write>(rows: &[(f64, &OpfResult)], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["level_mw", "cost", "penalized", "iterations", "violations"])?;
    for (level, r) in rows {
        w.write_record([
            format!("{level}"),
            format!("{:.5}", r.best_cost),
            format!("{:.5}", r.penalized_best),
            r.pso.iterations_run.to_string(),
            r.violations.count().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per sweep level, with the controls used and violation counts
/// before and after optimisation; failed levels carry their error.
pub fn write_sweep_csv<W: Write>(levels: &[SweepLevel], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "level_mw",
        "status",
        "cost",
        "iterations",
        "violations_before",
        "violations_after",
        "controls",
        "error",
    ])?;
    for l in levels {
        let before = l
            .violations_before
            .as_ref()
            .map_or("".to_string(), |v| v.count().to_string());
        let controls = l
            .controls_used
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        let (status, cost, iters, after) = match &l.result {
            Some(r) => (
                "ok",
                format!("{:.5}", r.best_cost),
                r.pso.iterations_run.to_string(),
                r.violations.count().to_string(),
            ),
            None => ("failed", String::new(), String::new(), String::new()),
        };
        w.write_record([
            format!("{}", l.load_mw),
            status.to_string(),
            cost,
            iters,
            before,
            after,
            controls,
            l.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
