//! End-to-end acceptance checks on the bundled IEEE 30-bus case.
//!
//! Runs with a plain `main` so every criterion prints exactly one
//! PASS/FAIL line, whatever happens to the others.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use psopf_core::control::{control_value, opf_controls, set_control, ControlId, StateId};
use psopf_core::netmodel::Network;
use psopf_core::opf::{loading_sweep, solve_opf, ControlSelection, ControlSet, PenaltyConfig};
use psopf_core::powerflow::{check_violations, solve_newton_raphson, BoundSide, PowerFlowOptions};
use psopf_core::pso::{inertia_weight, run, PsoConfig, Termination};
use psopf_core::sensitivity::{
    build_gx_gu, predict_state_change, voltage_sensitivity, OperatingPoint,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_time(start: Instant, limit: Duration) -> Result<Duration, String> {
    let took = start.elapsed();
    check(took < limit, || format!("took {took:.2?}, limit {limit:?}"))?;
    Ok(took)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

const SEEDS: std::ops::RangeInclusive<u64> = 1..=10;

/// Median cost of `cs` over [`SEEDS`]; errors if any optimum has a violation.
fn median_cost(net: &Network, cs: &ControlSet) -> Result<f64, String> {
    let mut costs = Vec::new();
    for seed in SEEDS {
        let cfg = PsoConfig {
            seed,
            ..PsoConfig::default()
        };
        let r = solve_opf(net, cs, &PenaltyConfig::default(), &cfg)
            .map_err(|e| format!("seed {seed}: {e}"))?;
        check(r.violations.is_empty(), || {
            format!(
                "seed {seed}: {} violations at optimum",
                r.violations.count()
            )
        })?;
        costs.push(r.best_cost);
    }
    Ok(median(costs))
}

fn within_band(value: f64, target: f64, frac: f64) -> bool {
    (value - target).abs() <= frac * target
}

fn base_power_flow() -> Outcome {
    let start = Instant::now();
    let net = Network::ieee30();
    let sol = solve_newton_raphson(&net, None, &PowerFlowOptions::default())
        .map_err(|e| e.to_string())?;
    let report = check_violations(&net, &sol);
    let took = within_time(start, Duration::from_secs(1))?;

    check(sol.iterations <= 10, || {
        format!("{} iterations", sol.iterations)
    })?;
    check(sol.max_mismatch <= 1e-6, || {
        format!("mismatch {:.2e}", sol.max_mismatch)
    })?;
    let low: Vec<usize> = report.voltage_violations.iter().map(|v| v.bus).collect();
    let expected: Vec<usize> = (18..=27).chain([29, 30]).collect();
    check(low == expected, || format!("low-voltage buses {low:?}"))?;
    check(
        report
            .voltage_violations
            .iter()
            .all(|v| v.side == BoundSide::Lower),
        || "a voltage violation is not on the lower bound".into(),
    )?;
    check(
        report
            .line_violations
            .iter()
            .any(|l| (l.from_bus, l.to_bus) == (1, 2)),
        || "branch 1-2 not over its rating".into(),
    )?;
    Ok(format!(
        "{} iterations, mismatch {:.1e}, low voltage at {low:?}, branch 1-2 overloaded, {took:.2?}",
        sol.iterations, sol.max_mismatch
    ))
}

fn full_control_opf() -> Outcome {
    let start = Instant::now();
    let net = Network::ieee30();
    let cost = median_cost(&net, &ControlSet::full(&net))?;
    let took = within_time(start, Duration::from_secs(120))?;
    check(within_band(cost, 798.43, 0.015), || {
        format!("median {cost:.3} outside 798.43 ±1.5%")
    })?;
    Ok(format!(
        "median {cost:.3} $/hr over 10 seeds, no violations, {took:.1?}"
    ))
}

fn reduced_control_opf() -> Outcome {
    let net = Network::ieee30();
    let full = median_cost(&net, &ControlSet::full(&net))?;
    let pg_vg = median_cost(&net, &ControlSet::pg_vg(&net))?;
    let subset = ControlSet::pg_with_voltages(&net, &[1, 2, 5, 8]).map_err(|e| e.to_string())?;
    let four = median_cost(&net, &subset)?;
    check(within_band(pg_vg, 799.86, 0.015), || {
        format!("pg+vg median {pg_vg:.3} outside 799.86 ±1.5%")
    })?;
    check(within_band(four, 800.22, 0.015), || {
        format!("4-voltage median {four:.3} outside 800.22 ±1.5%")
    })?;
    check(full <= pg_vg && pg_vg <= four, || {
        format!("ordering broken: full {full:.3}, pg+vg {pg_vg:.3}, 4-voltage {four:.3}")
    })?;
    Ok(format!(
        "full {full:.3} <= pg+vg {pg_vg:.3} <= 4-voltage {four:.3}"
    ))
}

/// Sets one state variable on a copy of the operating point.
fn bump_state(op: &mut OperatingPoint, x: StateId, h: f64) {
    let net = &op.network;
    let i = |b: usize| net.bus_index(b).unwrap();
    let first_gen = |b: usize| net.generators.iter().position(|g| g.bus == b).unwrap();
    let sol = &mut op.solution;
    match x {
        StateId::SlackP => sol.slack_p += h,
        StateId::SlackQ => sol.gen_q[first_gen(net.slack_bus().id)] += h,
        StateId::GenQ(b) => sol.gen_q[first_gen(b)] += h,
        StateId::GenAngle(b) | StateId::LoadAngle(b) => sol.v_angle[i(b)] += h,
        StateId::LoadVoltage(b) => sol.v_mag[i(b)] += h,
    }
}

fn bump_control(op: &mut OperatingPoint, u: ControlId, h: f64) {
    let i = |b: usize| op.network.bus_index(b).unwrap();
    match u {
        ControlId::GenVoltage(b) => op.solution.v_mag[i(b)] += h,
        ControlId::SlackAngle => op.solution.v_angle[i(op.network.slack_bus().id)] += h,
        ControlId::LoadP(b) => {
            let k = i(b);
            op.network.buses[k].p_demand += h;
        }
        ControlId::LoadQ(b) => {
            let k = i(b);
            op.network.buses[k].q_demand += h;
        }
        ControlId::GenActive(_) | ControlId::Tap(..) | ControlId::Shunt(_) => {
            let v = control_value(&op.network, u).unwrap();
            assert!(set_control(&mut op.network, u, v + h));
        }
    }
}

/// Worst scaled gap between an analytic column and central differences of
/// the residual function.
fn fd_gap(op: &OperatingPoint, analytic: &[f64], bump: impl Fn(&mut OperatingPoint, f64)) -> f64 {
    let h = 1e-6;
    let (mut plus, mut minus) = (op.clone(), op.clone());
    bump(&mut plus, h);
    bump(&mut minus, -h);
    let (gp, gm) = (plus.residuals().unwrap(), minus.residuals().unwrap());
    let fd: Vec<f64> = gp
        .iter()
        .zip(&gm)
        .map(|(a, b)| (a - b) / (2.0 * h))
        .collect();
    let scale = fd.iter().fold(1.0_f64, |m, x| m.max(x.abs()));
    fd.iter()
        .zip(analytic)
        .fold(0.0, |m, (f, a)| m.max((f - a).abs() / scale))
}

fn sensitivity_oracle() -> Outcome {
    let start = Instant::now();
    let op = OperatingPoint::solve(Network::ieee30(), &PowerFlowOptions::default())
        .map_err(|e| e.to_string())?;
    let jac = build_gx_gu(&op).map_err(|e| e.to_string())?;
    let s = voltage_sensitivity(&op).map_err(|e| e.to_string())?;

    let identity = (-(&jac.gx * &s.matrix) - &jac.gu).amax();
    check(identity <= 1e-10, || {
        format!("-gx*Su - gu = {identity:.2e}")
    })?;

    let mut fd_worst = 0.0_f64;
    for (c, &x) in jac.states.iter().enumerate() {
        let col: Vec<f64> = jac.gx.column(c).iter().copied().collect();
        fd_worst = fd_worst.max(fd_gap(&op, &col, |p, h| bump_state(p, x, h)));
    }
    for (c, &u) in jac.controls.iter().enumerate() {
        let col: Vec<f64> = jac.gu.column(c).iter().copied().collect();
        fd_worst = fd_worst.max(fd_gap(&op, &col, |p, h| bump_control(p, u, h)));
    }
    check(fd_worst <= 1e-5, || {
        format!("finite-difference gap {fd_worst:.2e}")
    })?;

    let controls = opf_controls(&op.network);
    let base: Vec<f64> = s.states.iter().map(|&x| op.state_value(x)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0_f64;
    for trial in 0..20 {
        let du: Vec<(ControlId, f64)> = controls
            .iter()
            .map(|&u| (u, rng.gen_range(-0.01..=0.01)))
            .collect();
        let predicted = predict_state_change(&s, &du).map_err(|e| e.to_string())?;
        let mut net = op.network.clone();
        for &(u, d) in &du {
            let v = control_value(&net, u).unwrap();
            set_control(&mut net, u, v + d);
        }
        let after = OperatingPoint::solve(net, &PowerFlowOptions::default())
            .map_err(|e| format!("trial {trial}: {e}"))?;
        let (mut err, mut size) = (0.0_f64, 0.0_f64);
        for (k, (x, p)) in predicted.iter().enumerate() {
            let actual = after.state_value(*x) - base[k];
            err = err.max((p - actual).abs());
            size = size.max(actual.abs());
        }
        worst = worst.max(err / size);
    }
    check(worst <= 0.10, || {
        format!("worst relative prediction error {:.1}%", 100.0 * worst)
    })?;
    let took = within_time(start, Duration::from_secs(30))?;
    Ok(format!(
        "identity {identity:.1e}, fd gap {fd_worst:.1e}, worst prediction error {:.2}% over 20 trials, {took:.2?}",
        100.0 * worst
    ))
}

fn sphere(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn pso_behaviour() -> Outcome {
    let start = Instant::now();
    let cfg = PsoConfig::default();
    check(inertia_weight(&cfg, 0) == 0.9, || "w(0) != 0.9".into())?;
    check(inertia_weight(&cfg, cfg.iter_max) == 0.4, || {
        "w(iter_max) != 0.4".into()
    })?;

    let bounds = vec![(-5.0, 5.0); 10];
    let mut worst = 0.0_f64;
    for seed in 0..20 {
        let r = run(
            sphere,
            &bounds,
            &PsoConfig {
                seed,
                ..cfg.clone()
            },
        )
        .map_err(|e| e.to_string())?;
        check(r.gbest_value <= 1e-4, || {
            format!("sphere seed {seed}: {:.2e}", r.gbest_value)
        })?;
        worst = worst.max(r.gbest_value);
    }

    let flat = run(|_| 3.0, &bounds, &cfg).map_err(|e| e.to_string())?;
    check(
        flat.terminated_by == Termination::Stagnation
            && flat.iterations_run == cfg.stagnation_window,
        || {
            format!(
                "constant objective stopped after {} ({:?})",
                flat.iterations_run, flat.terminated_by
            )
        },
    )?;

    let seeded = PsoConfig {
        seed: 42,
        ..cfg.clone()
    };
    let a = run(sphere, &bounds, &seeded).map_err(|e| e.to_string())?;
    let b = run(sphere, &bounds, &seeded).map_err(|e| e.to_string())?;
    check(
        a.gbest_position == b.gbest_position && a.trace == b.trace,
        || "same seed, different runs".into(),
    )?;

    let took = within_time(start, Duration::from_secs(30))?;
    Ok(format!(
        "worst sphere {worst:.1e} over 20 seeds, stagnation at {}, deterministic, {took:.2?}",
        flat.iterations_run
    ))
}

fn loading_sweep_check() -> Outcome {
    let start = Instant::now();
    let net = Network::ieee30();
    let levels = [125.0, 150.0, 200.0, 250.0, 283.4, 325.0, 350.0];
    let selection = ControlSelection::Fixed(ControlSet::full(&net).controls().to_vec());
    let cfg = PsoConfig {
        seed: 7,
        ..PsoConfig::default()
    };
    let sweep = loading_sweep(&net, &levels, &selection, &PenaltyConfig::default(), &cfg)
        .map_err(|e| e.to_string())?;
    let took = within_time(start, Duration::from_secs(15 * 60))?;

    let mut costs = Vec::new();
    for level in &sweep {
        let r = level.result.as_ref().ok_or_else(|| {
            format!(
                "{} MW: {}",
                level.load_mw,
                level.error.clone().unwrap_or_default()
            )
        })?;
        check(r.violations.is_empty(), || {
            format!("{} MW: {} violations", level.load_mw, r.violations.count())
        })?;
        costs.push(r.best_cost);
    }
    check(costs.windows(2).all(|w| w[0] < w[1]), || {
        format!("costs not increasing: {costs:.2?}")
    })?;

    let heavy = sweep.last().unwrap();
    let before = heavy
        .violations_before
        .as_ref()
        .ok_or("350 MW case did not solve before optimisation")?;
    let buses = before.violated_buses();
    check([26, 29, 30].iter().all(|b| buses.contains(b)), || {
        format!("350 MW pre-OPF violations {buses:?}")
    })?;
    Ok(format!(
        "costs {costs:.1?}, all violation-free, 350 MW pre-OPF buses {buses:?}, {took:.1?}"
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 6] = [
        ("base-case power flow", base_power_flow),
        ("full-control OPF", full_control_opf),
        ("reduced-control OPF", reduced_control_opf),
        ("sensitivity oracle", sensitivity_oracle),
        ("PSO behaviour", pso_behaviour),
        ("loading sweep", loading_sweep_check),
    ];
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("PASS {} {name}: {detail}", k + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name}: {why}", k + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
