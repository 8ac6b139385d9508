//! The `routeguard` command-line front end.
//!
//! Every command reads one TOML experiment file (`--config`), applies flag
//! overrides and writes one table per output file into `--out`. Flags can
//! also be set through `ROUTEGUARD_*` environment variables.

pub mod config;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::Error;
use crate::model::{AttackStrategy, Grid, ProtectPolicy, SystemParams};
use crate::reliability::{self, Method};
use crate::security;
use crate::sim::{self, NamedPolicy};
use crate::stability;
use config::{ExperimentConfig, Format, PolicyRef};
use output::{Cell, Table};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("solver did not converge: {0}")]
    NotConverged(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::NotConverged(_) => EXIT_NOT_CONVERGED,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Config(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Vi,
    Tpi,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Vi => Method::ValueIteration,
            MethodArg::Tpi => Method::TruncatedPolicyIteration,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "routeguard", version, about = "Protection policies and attack equilibria for shortest-queue routing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Experiment file (TOML).
    #[arg(long, global = true, env = "ROUTEGUARD_CONFIG")]
    pub config: Option<PathBuf>,

    /// Output directory; tables go to stdout when omitted.
    #[arg(long, global = true, env = "ROUTEGUARD_OUT")]
    pub out: Option<PathBuf>,

    #[arg(long, global = true, value_enum, env = "ROUTEGUARD_FORMAT")]
    pub format: Option<Format>,

    /// Simulation seed.
    #[arg(long, global = true, env = "ROUTEGUARD_SEED")]
    pub seed: Option<u64>,

    #[arg(long, global = true, value_enum, env = "ROUTEGUARD_METHOD")]
    pub method: Option<MethodArg>,

    /// Restrict protection to the drift-certified floor.
    #[arg(long, global = true)]
    pub stability_constrained: bool,

    /// Omit the generation time from output headers.
    #[arg(long, global = true)]
    pub no_timestamp: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Stability verdicts, protection floors and drift certificates.
    CheckStability,
    /// Optimal protection policy under random routing faults.
    SolveReliability,
    /// Attacker-defender equilibrium.
    SolveSecurity {
        /// Also sweep the (c_a, c_b) lattice from the config.
        #[arg(long)]
        regime_sweep: bool,
    },
    /// Monte Carlo estimates for a set of policies.
    Simulate {
        /// Comma-separated policies; overrides the config list.
        #[arg(long, value_delimiter = ',')]
        policies: Vec<String>,
    },
    /// Risk classes over the (c_a, c_b) lattice.
    RegimeSweep,
    /// Whether protection is ever optimal over the (a, c_b) lattice.
    TippingPoints,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::CheckStability => "check-stability",
            Command::SolveReliability => "solve-reliability",
            Command::SolveSecurity { .. } => "solve-security",
            Command::Simulate { .. } => "simulate",
            Command::RegimeSweep => "regime-sweep",
            Command::TippingPoints => "tipping-points",
        }
    }
}

/// Parse arguments, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("routeguard: {e}");
            e.exit_code()
        }
    }
}

/// Load the config named on the command line and apply flag overrides.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(m) = cli.method {
        cfg.method = m.into();
    }
    if cli.stability_constrained {
        cfg.solver.stability_constrained = true;
    }
    if let Some(seed) = cli.seed {
        cfg.sim.get_or_insert_with(Default::default).seed = seed;
    }
    if let Some(f) = cli.format {
        cfg.output.format = f;
    }
    if let Some(out) = &cli.out {
        cfg.output.path = Some(out.clone());
    }
    if let Command::Simulate { policies } = &cli.command {
        if !policies.is_empty() {
            cfg.policies = policies.iter().map(|p| p.parse()).collect::<Result<_, _>>()?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve_config(cli)?;
    let mut unconverged = Vec::new();
    let tables = match &cli.command {
        Command::CheckStability => check_stability(&cfg, &mut unconverged)?,
        Command::SolveReliability => solve_reliability(&cfg, &mut unconverged)?,
        Command::SolveSecurity { regime_sweep } => solve_security(&cfg, *regime_sweep, &mut unconverged)?,
        Command::Simulate { .. } => simulate(&cfg, &mut unconverged)?,
        Command::RegimeSweep => vec![regimes(&cfg, &mut unconverged)?],
        Command::TippingPoints => tipping_points(&cfg, &mut unconverged)?,
    };
    let meta = output::metadata(cli.command.name(), &cfg, !cli.no_timestamp);
    output::emit(&tables, &meta, cfg.output.format, cfg.output.path.as_deref())?;
    if unconverged.is_empty() {
        Ok(())
    } else {
        Err(CliError::NotConverged(unconverged.join("; ")))
    }
}

struct Resolved {
    protect: ProtectPolicy,
    attack: Option<AttackStrategy>,
}

fn resolve_policy(
    cfg: &ExperimentConfig,
    params: &SystemParams,
    grid: &Grid,
    r: &PolicyRef,
    unconverged: &mut Vec<String>,
) -> Result<Resolved, CliError> {
    let protect = match r {
        PolicyRef::AlwaysProtect => ProtectPolicy::constant(*grid, 1.0),
        PolicyRef::NeverProtect => ProtectPolicy::constant(*grid, 0.0),
        PolicyRef::Optimal => {
            let rep = reliability::solve(params, grid, &cfg.solver, cfg.method)?;
            if !rep.converged {
                unconverged.push(format!("{r} policy (residual {})", rep.residual));
            }
            rep.policy
        }
        PolicyRef::Equilibrium => {
            let sol = security::shapley_iteration(params, grid, &cfg.solver)?;
            if !sol.converged {
                unconverged.push(format!("{r} (residual {})", sol.residual));
            }
            return Ok(Resolved { protect: sol.protect, attack: Some(sol.attack) });
        }
        PolicyRef::File(path) => ProtectPolicy::new(*grid, output::read_policy_csv(path, grid)?)?,
    };
    Ok(Resolved { protect, attack: None })
}

fn check_stability(cfg: &ExperimentConfig, unconverged: &mut Vec<String>) -> Result<Vec<Table>, CliError> {
    let params = &cfg.params;
    let grid = cfg.grid()?;
    let mut verdicts = Table::new("stability", &["subject", "stable", "reason", "witness", "c", "d", "mean_bound"]);
    let v = stability::unprotected_stability(params);
    verdicts.push(vec![
        "unprotected".into(),
        v.stable.into(),
        reason(&v.reason).into(),
        v.witness.map(|w| w.to_string()).into(),
        Cell::Empty,
        Cell::Empty,
        v.mean_bound.into(),
    ]);
    for r in &cfg.policies {
        let pol = resolve_policy(cfg, params, &grid, r, unconverged)?;
        let rep = stability::certify_policy(params, &grid, &pol.protect, pol.attack.as_ref())?;
        let v = rep.verdict();
        verdicts.push(vec![
            r.name().into(),
            v.stable.into(),
            reason(&v.reason).into(),
            v.witness.map(|w| w.to_string()).into(),
            rep.c.into(),
            rep.d.into(),
            v.mean_bound.into(),
        ]);
    }
    let mut floors = Table::with_coordinates("floors", &grid, &["protect_floor", "attack_ceiling"]);
    for x in grid.states() {
        let floor = stability::protect_floor(params, &x).ok();
        let ceiling = stability::attack_ceiling(params, &x).ok();
        floors.push_state(&x, vec![floor.into(), ceiling.into()]);
    }
    Ok(vec![verdicts, floors])
}

fn reason(r: &stability::VerdictReason) -> String {
    serde_json::to_value(r).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::ValueIteration => "vi",
        Method::TruncatedPolicyIteration => "tpi",
    }
}

fn residuals_table(history: &[f64]) -> Table {
    let mut t = Table::new("residuals", &["iteration", "residual"]);
    for (k, r) in history.iter().enumerate() {
        t.push(vec![(k + 1).into(), (*r).into()]);
    }
    t
}

fn solve_reliability(cfg: &ExperimentConfig, unconverged: &mut Vec<String>) -> Result<Vec<Table>, CliError> {
    let params = &cfg.params;
    let grid = cfg.grid()?;
    let rep = reliability::solve(params, &grid, &cfg.solver, cfg.method)?;
    if !rep.converged {
        unconverged.push(format!("reliability solve stopped at residual {}", rep.residual));
    }
    let mut policy = Table::with_coordinates("policy", &grid, &["protect", "value", "delta"]);
    for (idx, x) in grid.states().enumerate() {
        let delta = reliability::delta(&rep.value, &x, params).ok();
        policy.push_state(&x, vec![rep.policy.probs[idx].into(), rep.value.values[idx].into(), delta.into()]);
    }
    let cert = stability::certify_policy(params, &grid, &rep.policy, None)?;
    let mut report = Table::new(
        "solve_report",
        &["method", "stability_constrained", "iterations", "residual", "converged", "certified", "c", "mean_bound"],
    );
    report.push(vec![
        method_name(cfg.method).into(),
        cfg.solver.stability_constrained.into(),
        rep.iterations.into(),
        rep.residual.into(),
        rep.converged.into(),
        cert.stable_certificate.into(),
        cert.c.into(),
        cert.stable_certificate.then_some(cert.mean_bound).into(),
    ]);
    Ok(vec![policy, report, residuals_table(&rep.residual_history)])
}

fn solve_security(cfg: &ExperimentConfig, sweep: bool, unconverged: &mut Vec<String>) -> Result<Vec<Table>, CliError> {
    let params = &cfg.params;
    let grid = cfg.grid()?;
    let sol = security::shapley_iteration(params, &grid, &cfg.solver)?;
    if !sol.converged {
        unconverged.push(format!("Shapley iteration stopped at residual {}", sol.residual));
    }
    let mut eq = Table::with_coordinates("equilibrium", &grid, &["attack", "protect", "value", "delta", "label"]);
    for (idx, x) in grid.states().enumerate() {
        eq.push_state(
            &x,
            vec![
                sol.attack.probs[idx].into(),
                sol.protect.probs[idx].into(),
                sol.value.values[idx].into(),
                sol.deltas[idx].into(),
                sol.labels[idx].to_string().into(),
            ],
        );
    }
    let mut report = Table::new("solve_report", &["iterations", "residual", "converged", "s1", "s2", "s3"]);
    let count = |l| sol.labels.iter().filter(|&&k| k == l).count();
    report.push(vec![
        sol.iterations.into(),
        sol.residual.into(),
        sol.converged.into(),
        count(security::RiskLabel::S1).into(),
        count(security::RiskLabel::S2).into(),
        count(security::RiskLabel::S3).into(),
    ]);
    let mut tables = vec![eq, report, residuals_table(&sol.residual_history)];
    if sweep {
        tables.push(regimes(cfg, unconverged)?);
    }
    Ok(tables)
}

fn regimes(cfg: &ExperimentConfig, unconverged: &mut Vec<String>) -> Result<Table, CliError> {
    let grid = cfg.grid()?;
    let cells = security::regime_sweep(&cfg.params, &grid, &cfg.solver, &cfg.attack_costs(), &cfg.protect_costs())?;
    let mut t = Table::new("regimes", &["attack_cost", "protect_cost", "converged", "s1", "s2", "s3", "regime"]);
    for c in cells {
        match c.regime {
            Some(r) => t.push(vec![
                c.attack_cost.into(),
                c.protect_cost.into(),
                true.into(),
                r.s1.into(),
                r.s2.into(),
                r.s3.into(),
                r.to_string().into(),
            ]),
            None => {
                unconverged.push(format!("regime cell ({}, {})", c.attack_cost, c.protect_cost));
                t.push(vec![
                    c.attack_cost.into(),
                    c.protect_cost.into(),
                    false.into(),
                    Cell::Empty,
                    Cell::Empty,
                    Cell::Empty,
                    Cell::Empty,
                ]);
            }
        }
    }
    Ok(t)
}

fn tipping_points(cfg: &ExperimentConfig, unconverged: &mut Vec<String>) -> Result<Vec<Table>, CliError> {
    let grid = cfg.grid()?;
    let pairs: Vec<(f64, f64)> =
        cfg.fault_probs().into_iter().flat_map(|a| cfg.protect_costs().into_iter().map(move |cb| (a, cb))).collect();
    let sweep = reliability::tipping_point_sweep(&cfg.params, &grid, &cfg.solver, cfg.method, &pairs)?;
    let mut cells = Table::new("tipping", &["fault_prob", "protect_cost", "converged", "protects_somewhere"]);
    for c in &sweep.cells {
        if c.protects_somewhere.is_none() {
            unconverged.push(format!("tipping cell ({}, {})", c.fault_prob, c.protect_cost));
        }
        cells.push(vec![
            c.fault_prob.into(),
            c.protect_cost.into(),
            c.protects_somewhere.is_some().into(),
            c.protects_somewhere.into(),
        ]);
    }
    let mut viol =
        Table::new("tipping_violations", &["fault_prob", "protect_cost", "other_fault_prob", "other_protect_cost"]);
    for &(i, j) in &sweep.monotonicity_violations {
        let (a, b) = (&sweep.cells[i], &sweep.cells[j]);
        viol.push(vec![a.fault_prob.into(), a.protect_cost.into(), b.fault_prob.into(), b.protect_cost.into()]);
    }
    Ok(vec![cells, viol])
}

fn simulate(cfg: &ExperimentConfig, unconverged: &mut Vec<String>) -> Result<Vec<Table>, CliError> {
    let grid = cfg.grid()?;
    let sim_cfg = cfg.sim();
    if cfg.policies.is_empty() {
        return Err(CliError::Config("no policies to simulate".into()));
    }
    let mut t = Table::new(
        "estimates",
        &[
            "utilization",
            "fault_prob",
            "protect_cost",
            "policy",
            "mean",
            "half_width",
            "normalized",
            "degenerate",
            "mean_queue",
            "mean_queue_half_width",
            "certified",
            "mean_bound",
        ],
    );
    for rho in cfg.utilizations() {
        for a in cfg.fault_probs() {
            for cb in cfg.protect_costs() {
                let params =
                    SystemParams { fault_prob: a, protect_cost: cb, ..cfg.params.clone() }.with_utilization(rho);
                params.validate()?;
                let named = cfg
                    .policies
                    .iter()
                    .map(|r| {
                        resolve_policy(cfg, &params, &grid, r, unconverged).map(|p| NamedPolicy {
                            name: r.name(),
                            protect: p.protect,
                            attack: p.attack,
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let (normalized, degenerate, costs) = if named.len() >= 2 {
                    let c = sim::compare_policies(&params, &named, &sim_cfg)?;
                    (c.rows.iter().map(|r| Some(r.normalized)).collect(), Some(c.degenerate), c.estimates)
                } else {
                    let e =
                        sim::estimate_discounted_cost(&params, &named[0].protect, named[0].attack.as_ref(), &sim_cfg)?;
                    (vec![None], None, vec![e])
                };
                for (k, p) in named.iter().enumerate() {
                    let q = sim::estimate_mean_queue(&params, &p.protect, p.attack.as_ref(), &sim_cfg)?;
                    let cert = stability::certify_policy(&params, &grid, &p.protect, p.attack.as_ref())?;
                    t.push(vec![
                        rho.into(),
                        a.into(),
                        cb.into(),
                        p.name.clone().into(),
                        costs[k].mean.into(),
                        costs[k].half_width.into(),
                        normalized[k].into(),
                        degenerate.into(),
                        q.mean.into(),
                        q.half_width.into(),
                        cert.stable_certificate.into(),
                        cert.stable_certificate.then_some(cert.mean_bound).into(),
                    ]);
                }
            }
        }
    }
    Ok(vec![t])
}
