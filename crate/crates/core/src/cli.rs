//! Command-line front end: argument parsing, configuration loading, and the
//! report files written by each command.

use std::ffi::OsString;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::control::ControlId;
use crate::netmodel::{parse_case, scale_load, BusKind, Network};
use crate::opf::{
    apply_controls, loading_sweep, solve_opf, write_summary_csv, write_sweep_csv, ControlSelection,
    ControlSet, OpfResult, PenaltyConfig,
};
use crate::powerflow::{check_violations, solve_newton_raphson, PowerFlowOptions};
use crate::pso::{write_trace_csv, PsoConfig};
use crate::sensitivity::{
    current_sensitivity, default_candidates, rank_controls, voltage_sensitivity, OperatingPoint,
    SensitivityReport,
};

#[derive(Debug, Parser)]
#[command(
    name = "psopf",
    version,
    about = "AC optimal power flow by particle swarm optimization"
)]
pub struct Cli {
    /// Case file; the bundled IEEE 30-bus case when omitted.
    #[arg(long, global = true, env = "PSOPF_CASE")]
    pub case: Option<PathBuf>,
    /// TOML file with [pso], [penalty] and [powerflow] tables.
    #[arg(long, global = true, env = "PSOPF_CONFIG")]
    pub config: Option<PathBuf>,
    /// Seed for the swarm; derived from the clock and recorded when omitted.
    #[arg(long, global = true, env = "PSOPF_SEED")]
    pub seed: Option<u64>,
    #[arg(
        long,
        global = true,
        env = "PSOPF_OUT_DIR",
        default_value = "psopf-out"
    )]
    pub out_dir: PathBuf,
    /// Worker threads for particle evaluation; all cores when omitted.
    #[arg(long, global = true, env = "PSOPF_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct LoadArg {
    /// Scale every demand so the total real load equals this many MW.
    #[arg(long)]
    pub load: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the power flow and report voltages and limit violations.
    Powerflow {
        #[command(flatten)]
        load: LoadArg,
    },
    /// Sensitivity matrices and control ranking for the violated quantities.
    Sensitivity {
        #[command(flatten)]
        load: LoadArg,
        /// Keep only the first N controls of every ranked list.
        #[arg(long)]
        top: Option<usize>,
        /// Comma-separated candidate controls, e.g. `V_G2,T_6-9,Q_C10`.
        #[arg(long, value_delimiter = ',')]
        candidates: Option<Vec<ControlId>>,
        /// Also write the non-zero pattern of both matrices as CSV.
        #[arg(long)]
        sparsity: bool,
    },
    /// Minimise fuel cost over a control set.
    Opf {
        #[command(flatten)]
        load: LoadArg,
        /// `full`, `pg+vg`, `pg+vg:1,2,5,8`, or a comma-separated label list.
        #[arg(long, default_value = "full")]
        controls: String,
    },
    /// Solve the OPF at a series of loading levels with warm starts.
    Sweep {
        /// Ascending total loads in MW, comma-separated.
        #[arg(long, value_delimiter = ',', required = true)]
        levels: Vec<f64>,
        /// Choose controls per level from the sensitivity ranking.
        #[arg(long, conflicts_with = "controls")]
        auto_select: bool,
        #[arg(long)]
        controls: Option<String>,
    },
}

/// Optional settings file contents.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub pso: PsoConfig,
    pub penalty: PenaltyConfig,
    pub powerflow: PowerFlowOptions,
}

impl RunConfig {
    /// Parses the TOML text; also reports whether it set `pso.seed`.
    pub fn from_toml(text: &str) -> Result<(RunConfig, bool), String> {
        let table: toml::Table = toml::from_str(text).map_err(|e| e.to_string())?;
        let has_seed = table.get("pso").and_then(|p| p.get("seed")).is_some();
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.pso.validate().map_err(|e| e.to_string())?;
        cfg.penalty.validate().map_err(|e| e.to_string())?;
        Ok((cfg, has_seed))
    }
}

/// Written next to every set of outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Command line that reproduces the run: a derived seed, and any case or
    /// config taken from the environment, appear as explicit flags.
    pub args: Vec<String>,
    pub case: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub seed_derived: bool,
    pub timestamp_unix: u64,
    pub tool_version: String,
    pub threads: Option<usize>,
    pub outputs: Vec<PathBuf>,
    /// Controls used per level, for sweeps.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub level_controls: Vec<(f64, Vec<String>)>,
}

#[derive(Debug)]
enum Failure {
    /// Bad input: unreadable files, invalid options.
    Input(String),
    /// The computation itself failed; reports written so far are kept.
    Run(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Run(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Input(m) | Failure::Run(m) => m,
        }
    }
}

fn input<E: std::fmt::Display>(context: &str) -> impl FnOnce(E) -> Failure + '_ {
    move |e| Failure::Input(format!("{context}: {e}"))
}

fn run_err<E: std::fmt::Display>(context: &str) -> impl FnOnce(E) -> Failure + '_ {
    move |e| Failure::Run(format!("{context}: {e}"))
}

fn replay_args(argv: &[String], m: &RunManifest) -> Vec<String> {
    let given = |flag: &str| {
        argv.iter()
            .any(|a| a == flag || a.starts_with(&format!("{flag}=")))
    };
    let mut extra = Vec::new();
    let path_flags = [("--case", &m.case), ("--config", &m.config)];
    for (flag, value) in path_flags {
        if let (Some(v), false) = (value, given(flag)) {
            extra.extend([flag.to_string(), v.display().to_string()]);
        }
    }
    if let (Some(seed), false) = (m.seed, given("--seed")) {
        extra.extend(["--seed".to_string(), seed.to_string()]);
    }
    let mut out = argv.to_vec();
    let at = out.len().min(1);
    out.splice(at..at, extra);
    out
}

struct Session {
    cli_args: Vec<String>,
    out_dir: PathBuf,
    manifest: RunManifest,
}

impl Session {
    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.out_dir.join(name);
        self.manifest.outputs.push(p.clone());
        p
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Failure> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(input("creating output directory"))?;
        }
        let f = fs::File::create(&p).map_err(input("creating output file"))?;
        serde_json::to_writer_pretty(BufWriter::new(f), value).map_err(input("writing JSON"))
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<fs::File>, Failure> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(input("creating output directory"))?;
        }
        Ok(BufWriter::new(
            fs::File::create(&p).map_err(input("creating output file"))?,
        ))
    }

    fn finish(mut self) -> Result<(), Failure> {
        self.manifest.args = replay_args(&self.cli_args, &self.manifest);
        let p = self.out_dir.join("manifest.json");
        let f = fs::File::create(p).map_err(input("writing manifest"))?;
        serde_json::to_writer_pretty(BufWriter::new(f), &self.manifest)
            .map_err(input("writing manifest"))
    }
}

fn load_case(path: Option<&Path>) -> Result<Network, Failure> {
    match path {
        None => Ok(Network::ieee30()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::Input(format!("reading {}: {e}", p.display())))?;
            parse_case(&text).map_err(|e| Failure::Input(format!("{}: {e}", p.display())))
        }
    }
}

fn at_load(net: Network, load: Option<f64>) -> Result<Network, Failure> {
    match load {
        None => Ok(net),
        Some(mw) => scale_load(&net, mw).map_err(input("--load")),
    }
}

fn derived_seed() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_nanos() as u64)
}

fn print_cost(label: &str, r: &OpfResult) {
    println!(
        "{label}: cost {:.5} $/hr, penalised {:.5}, {} iterations ({:?}), {} violations",
        r.best_cost,
        r.penalized_best,
        r.pso.iterations_run,
        r.pso.terminated_by,
        r.violations.count()
    );
}

fn write_opf_outputs(
    s: &mut Session,
    prefix: &str,
    net: &Network,
    cs: &ControlSet,
    r: &OpfResult,
    level: f64,
) -> Result<(), Failure> {
    s.write_json(&format!("{prefix}opf_result.json"), r)?;
    write_summary_csv(
        &[(level, r)],
        s.create(&format!("{prefix}opf_summary.csv"))?,
    )
    .map_err(input("writing CSV"))?;
    write_trace_csv(&r.trace, s.create(&format!("{prefix}opf_trace.csv"))?)
        .map_err(input("writing CSV"))?;
    let optimised =
        apply_controls(net, cs, &r.control_values()).map_err(run_err("applying controls"))?;
    let p = s.path(&format!("{prefix}optimized.case"));
    fs::write(p, optimised.to_case_string()).map_err(input("writing case"))
}

fn cmd_powerflow(s: &mut Session, net: &Network, opts: &PowerFlowOptions) -> Result<(), Failure> {
    let sol = match solve_newton_raphson(net, None, opts) {
        Ok(sol) => sol,
        Err(e) => {
            s.write_json(
                "powerflow_error.json",
                &serde_json::json!({ "error": e.to_string() }),
            )?;
            return Err(Failure::Run(format!("power flow: {e}")));
        }
    };
    let report = check_violations(net, &sol);
    s.write_json("powerflow.json", &sol)?;
    s.write_json("violations.json", &report)?;
    let mut w = csv::Writer::from_writer(s.create("bus_voltages.csv")?);
    let violated = report.violated_buses();
    w.write_record([
        "bus",
        "kind",
        "v_mag",
        "v_angle_deg",
        "v_min",
        "v_max",
        "violated",
    ])
    .map_err(input("writing CSV"))?;
    for (i, b) in net.buses.iter().enumerate() {
        w.write_record([
            b.id.to_string(),
            b.kind.keyword().to_string(),
            format!("{:.6}", sol.v_mag[i]),
            format!("{:.6}", sol.v_angle[i].to_degrees()),
            b.v_min.to_string(),
            b.v_max.to_string(),
            (b.kind == BusKind::Load && violated.contains(&b.id)).to_string(),
        ])
        .map_err(input("writing CSV"))?;
    }
    w.flush().map_err(input("writing CSV"))?;
    println!(
        "converged in {} iterations (max mismatch {:.2e} pu); slack output {:.5} MW, losses {:.5} MW",
        sol.iterations,
        sol.max_mismatch,
        sol.slack_p * net.base_mva,
        sol.losses() * net.base_mva
    );
    println!(
        "{} violations; low/high voltage at buses {:?}",
        report.count(),
        violated
    );
    for l in &report.line_violations {
        println!(
            "branch {}-{} at {:.5} pu over rating {:.5}",
            l.from_bus, l.to_bus, l.flow, l.rating
        );
    }
    Ok(())
}

fn cmd_sensitivity(
    s: &mut Session,
    net: Network,
    opts: &PowerFlowOptions,
    top: Option<usize>,
    candidates: Option<Vec<ControlId>>,
    sparsity: bool,
) -> Result<(), Failure> {
    let op = OperatingPoint::solve(net, opts).map_err(run_err("operating point"))?;
    let su = voltage_sensitivity(&op).map_err(run_err("sensitivity"))?;
    let r = current_sensitivity(&op);
    let report = check_violations(&op.network, &op.solution);
    let candidates = candidates.unwrap_or_else(|| default_candidates(&op.network));
    let mut ranking =
        rank_controls(&su, &r, &op.network, &report, &candidates).map_err(input("candidates"))?;
    if let Some(k) = top {
        ranking.truncate(k);
    }
    let full = SensitivityReport::build(&su, &r, ranking);
    s.write_json("sensitivity.json", &full)?;
    s.write_json("ranking.json", &full.ranking)?;
    if sparsity {
        let mut w = csv::Writer::from_writer(s.create("sparsity.csv")?);
        w.write_record(["matrix", "row", "column", "value"])
            .map_err(input("writing CSV"))?;
        for (name, m) in [("Su", &full.su), ("R", &full.r)] {
            for (row, col, v) in m.nonzeros(1e-9) {
                w.write_record([name, row, col, &format!("{v:e}")])
                    .map_err(input("writing CSV"))?;
            }
        }
        w.flush().map_err(input("writing CSV"))?;
    }
    println!(
        "{} violated quantities ranked",
        full.ranking.per_quantity.len()
    );
    for q in &full.ranking.per_quantity {
        let names: Vec<String> = q
            .controls
            .iter()
            .take(4)
            .map(|c| c.control.to_string())
            .collect();
        println!("{}: {}", q.quantity, names.join(" > "));
    }
    Ok(())
}

fn cmd_opf(s: &mut Session, net: Network, controls: &str, cfg: &RunConfig) -> Result<(), Failure> {
    let cs = ControlSet::parse(&net, controls).map_err(input("--controls"))?;
    let r = solve_opf(&net, &cs, &cfg.penalty, &cfg.pso).map_err(run_err("opf"))?;
    write_opf_outputs(s, "", &net, &cs, &r, net.total_p_demand_mw())?;
    print_cost(controls, &r);
    Ok(())
}

fn cmd_sweep(
    s: &mut Session,
    net: Network,
    levels: &[f64],
    auto_select: bool,
    controls: Option<&str>,
    cfg: &RunConfig,
) -> Result<(), Failure> {
    let selection = if auto_select {
        ControlSelection::Auto
    } else {
        let cs =
            ControlSet::parse(&net, controls.unwrap_or("full")).map_err(input("--controls"))?;
        ControlSelection::Fixed(cs.controls().to_vec())
    };
    let results = loading_sweep(&net, levels, &selection, &cfg.penalty, &cfg.pso)
        .map_err(input("--levels"))?;
    for l in &results {
        s.manifest.level_controls.push((
            l.load_mw,
            l.controls_used.iter().map(|c| c.to_string()).collect(),
        ));
        if let Some(r) = &l.result {
            let cs = ControlSet::new(&l.network, l.controls_used.clone())
                .map_err(run_err("controls"))?;
            write_opf_outputs(
                s,
                &format!("level_{}/", l.load_mw),
                &l.network,
                &cs,
                r,
                l.load_mw,
            )?;
            print_cost(&format!("{} MW", l.load_mw), r);
        } else {
            println!(
                "{} MW: failed: {}",
                l.load_mw,
                l.error.as_deref().unwrap_or("unknown error")
            );
        }
    }
    s.write_json("sweep.json", &results)?;
    write_sweep_csv(&results, s.create("sweep.csv")?).map_err(input("writing CSV"))?;
    let failed: Vec<String> = results
        .iter()
        .filter(|l| l.failed())
        .map(|l| l.load_mw.to_string())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Run(format!("levels {} failed", failed.join(", "))))
    }
}

fn execute(cli: Cli, args: Vec<String>) -> Result<(), Failure> {
    let (mut cfg, config_seed) = match &cli.config {
        None => (RunConfig::default(), false),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::Input(format!("reading {}: {e}", p.display())))?;
            RunConfig::from_toml(&text)
                .map_err(|e| Failure::Input(format!("{}: {e}", p.display())))?
        }
    };
    let stochastic = matches!(cli.command, Command::Opf { .. } | Command::Sweep { .. });
    let (seed, seed_derived) = match (cli.seed, config_seed) {
        (Some(seed), _) => (Some(seed), false),
        (None, true) => (Some(cfg.pso.seed), false),
        (None, false) if stochastic => (Some(derived_seed()), true),
        (None, false) => (None, false),
    };
    if let Some(seed) = seed {
        cfg.pso.seed = seed;
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Input("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .ok();
    }
    let command = match &cli.command {
        Command::Powerflow { .. } => "powerflow",
        Command::Sensitivity { .. } => "sensitivity",
        Command::Opf { .. } => "opf",
        Command::Sweep { .. } => "sweep",
    };
    fs::create_dir_all(&cli.out_dir).map_err(input("creating output directory"))?;
    let mut session = Session {
        cli_args: args,
        out_dir: cli.out_dir.clone(),
        manifest: RunManifest {
            command: command.to_string(),
            args: Vec::new(),
            case: cli.case.clone(),
            config: cli.config.clone(),
            seed,
            seed_derived,
            timestamp_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            threads: cli.threads,
            outputs: Vec::new(),
            level_controls: Vec::new(),
        },
    };
    if seed_derived {
        println!("seed {} (derived; recorded in manifest.json)", cfg.pso.seed);
    }
    let net = load_case(cli.case.as_deref())?;
    let outcome = match cli.command {
        Command::Powerflow { load } => {
            at_load(net, load.load).and_then(|n| cmd_powerflow(&mut session, &n, &cfg.powerflow))
        }
        Command::Sensitivity {
            load,
            top,
            candidates,
            sparsity,
        } => at_load(net, load.load).and_then(|n| {
            cmd_sensitivity(&mut session, n, &cfg.powerflow, top, candidates, sparsity)
        }),
        Command::Opf { load, controls } => {
            at_load(net, load.load).and_then(|n| cmd_opf(&mut session, n, &controls, &cfg))
        }
        Command::Sweep {
            levels,
            auto_select,
            controls,
        } => cmd_sweep(
            &mut session,
            net,
            &levels,
            auto_select,
            controls.as_deref(),
            &cfg,
        ),
    };
    session.finish()?;
    outcome
}

/// Parses `args` (program name first) and runs the selected command.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let recorded = args
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match execute(cli, recorded) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
