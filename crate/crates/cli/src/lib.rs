//! Command-line front end: scenario loading, run orchestration and result
//! files. Every artifact carries the scenario hash, the seed, the engine
//! version and the full parameter echo.

pub mod suites;

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mfdg_core::control::Player;
use mfdg_core::dynamics::{isaacs_check, sample_isaacs, StepOptions};
use mfdg_core::engine::{
    estimate_gamma1, estimate_gamma2, rollout_memory, rollout_upper, search_opponent, Cached,
    ConstantStrategy, Memoryless, RolloutOptions, RunMeta, SearchMode, TimeGrid,
};
use mfdg_core::measure::{read_measure, w2_exact, EmpiricalMeasure};
use mfdg_core::pim::{
    self, build_graph, mixture_gap, read_tables, write_tables, Iteration, ReachableGraph,
    TableValue,
};
use mfdg_core::scenario::{Scenario, ScenarioConfig};
use mfdg_core::shift::{
    verify_lemma_agent, verify_lemma_flow, ExtremalShiftStrategy, ShiftConstants, ValueFunction,
    VerifyOptions,
};
use mfdg_core::torus::TorusPoint;
use mfdg_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CAP: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "mfdg",
    version,
    about = "Zero-sum mean-field differential games on the torus"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Wasserstein distance between two measure files.
    W2(W2Args),
    /// Roll out constant controls and report flow diagnostics.
    Simulate(SimulateArgs),
    /// Extremal shift strategy against the worst opponent found.
    Rollout(SearchArgs),
    /// Upper and lower value estimates from extremal shift strategies.
    Gamma(SearchArgs),
    /// Programmed iteration on the reachable graph.
    Iterate(IterateArgs),
    /// Randomized and structural property suites.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Args)]
pub struct W2Args {
    pub a: PathBuf,
    pub b: PathBuf,
    /// Also print the optimal plan.
    #[arg(long)]
    pub plan: bool,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Random initial cloud of this size instead of the scenario's.
    #[arg(long)]
    pub particles: Option<usize>,
    #[arg(long, default_value_t = 3)]
    pub cells: usize,
    #[arg(long, default_value_t = 0.025)]
    pub resolution: f64,
    #[arg(long, default_value_t = 0.005)]
    pub step: f64,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    /// First-player atom for every particle.
    #[arg(long, default_value_t = 0)]
    pub u_atom: usize,
    /// Second-player atom for every particle.
    #[arg(long, default_value_t = 0)]
    pub v_atom: usize,
    /// Repeat with half the step and report the terminal distance.
    #[arg(long)]
    pub halve_step: bool,
    #[arg(long, default_value_t = 200)]
    pub isaacs_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SearchKind {
    Exhaustive,
    Heuristic,
}

#[derive(Debug, Clone, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.1,0.05")]
    pub eps: Vec<f64>,
    #[arg(long, value_enum, default_value_t = SearchKind::Exhaustive)]
    pub search: SearchKind,
    /// Cap on enumerated opponents, and on graph nodes.
    #[arg(long, default_value_t = 1_000_000)]
    pub cap: u64,
    #[arg(long, default_value_t = 8)]
    pub restarts: usize,
    #[arg(long, default_value_t = 20)]
    pub max_k: usize,
}

#[derive(Debug, Clone, Args)]
pub struct IterateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 0.0)]
    pub tol: f64,
    #[arg(long, default_value_t = 20)]
    pub max_k: usize,
    /// Cap on graph nodes.
    #[arg(long, default_value_t = 200_000)]
    pub cap: u64,
    /// Continue from the tables already in the output directory.
    #[arg(long)]
    pub resume: bool,
    #[arg(long, default_value_t = 32)]
    pub mixture_samples: usize,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    /// Cap on graph nodes for the structural suites.
    #[arg(long, default_value_t = 200_000)]
    pub cap: u64,
}

/// Exit code for an engine error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::GraphTooLarge { .. }
        | Error::SearchSpaceTooLarge { .. }
        | Error::OracleTooLarge { .. } => EXIT_CAP,
        _ => EXIT_USAGE,
    }
}

pub fn run(cli: Cli) -> i32 {
    let res = match &cli.command {
        Command::W2(a) => cmd_w2(a, &mut std::io::stdout()),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Rollout(a) => cmd_rollout(a),
        Command::Gamma(a) => cmd_gamma(a),
        Command::Iterate(a) => cmd_iterate(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::GraphTooLarge { layers, .. } = &e {
                eprintln!("layer sizes: {layers:?}");
            }
            exit_code(&e)
        }
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Scenario::from_config(&ScenarioConfig::from_toml(&text)?)
}

/// Scenario's initial cloud, or a seeded uniform cloud when `--particles` is set.
pub fn initial_measure(sc: &Scenario, common: &Common) -> Result<EmpiricalMeasure> {
    match (common.particles, &sc.initial) {
        (Some(0), _) => Err(Error::Config("--particles must be positive".into())),
        (Some(n), _) => {
            let mut rng = ChaCha8Rng::seed_from_u64(common.seed);
            rng.set_stream(u64::MAX);
            let pts = (0..n)
                .map(|_| {
                    TorusPoint::wrap(&(0..sc.dim).map(|_| rng.gen::<f64>()).collect::<Vec<_>>())
                })
                .collect::<Result<Vec<_>>>()?;
            EmpiricalMeasure::uniform(pts)
        }
        (None, Some(m)) => Ok(m.clone()),
        (None, None) => Err(Error::Config(
            "scenario has no initial cloud; pass --particles".into(),
        )),
    }
}

fn check_common(c: &Common) -> Result<()> {
    if !(c.step > 0.0) {
        return Err(Error::Config(format!(
            "--step must be positive, got {}",
            c.step
        )));
    }
    if !(c.resolution > 0.0 && c.resolution <= 1.0) {
        return Err(Error::Config(format!(
            "--resolution must lie in (0, 1], got {}",
            c.resolution
        )));
    }
    if c.cells == 0 {
        return Err(Error::Config("--cells must be positive".into()));
    }
    Ok(())
}

fn meta(sc: &Scenario, c: &Common) -> RunMeta {
    RunMeta::new(sc.hash(), c.seed)
        .param("scenario", c.scenario.display())
        .param(
            "particles",
            c.particles
                .map_or("scenario".to_string(), |n| n.to_string()),
        )
        .param("cells", c.cells)
        .param("resolution", c.resolution)
        .param("step", c.step)
}

fn meta_json(m: &RunMeta) -> Value {
    let params: serde_json::Map<String, Value> = m
        .params
        .iter()
        .map(|(k, v)| (k.clone(), Value::String(v.clone())))
        .collect();
    json!({
        "scenario_hash": m.scenario_hash,
        "seed": m.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "params": params,
    })
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<fs::File>> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(fs::File::create(dir.join(name))?))
}

fn write_json(dir: &Path, name: &str, v: &Value) -> Result<()> {
    let mut f = create(dir, name)?;
    writeln!(f, "{}", serde_json::to_string_pretty(v).expect("json"))?;
    f.flush()?;
    Ok(())
}

fn search_mode(kind: SearchKind, cap: u64, restarts: usize, seed: u64) -> SearchMode {
    match kind {
        SearchKind::Exhaustive => SearchMode::Exhaustive { cap },
        SearchKind::Heuristic => SearchMode::Heuristic { restarts, seed },
    }
}

fn grid_for(sc: &Scenario, cells: usize) -> Result<TimeGrid> {
    TimeGrid::uniform(0.0, sc.horizon, cells)
}

fn read_measure_file(path: &Path) -> Result<EmpiricalMeasure> {
    let f = fs::File::open(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    read_measure(BufReader::new(f))
}

pub fn cmd_w2(args: &W2Args, out: &mut dyn Write) -> Result<i32> {
    let a = read_measure_file(&args.a)?;
    let b = read_measure_file(&args.b)?;
    let (d, plan) = w2_exact(&a, &b)?;
    writeln!(out, "{d:.15}")?;
    if args.plan {
        writeln!(out, "source,target,mass")?;
        for e in plan.entries() {
            writeln!(out, "{},{},{:.15}", e.row, e.col, e.mass)?;
        }
    }
    Ok(EXIT_OK)
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<i32> {
    let c = &args.common;
    check_common(c)?;
    let sc = load_scenario(&c.scenario)?;
    let m0 = initial_measure(&sc, c)?;
    let grid = grid_for(&sc, c.cells)?;
    let strat = ConstantStrategy {
        player: Player::First,
        atom: args.u_atom,
    };
    let opponent = vec![vec![args.v_atom; m0.len()]; grid.cells()];
    let meta = meta(&sc, c)
        .param("u_atom", args.u_atom)
        .param("v_atom", args.v_atom)
        .param("halve_step", args.halve_step);
    let run = |h: f64, name: &str| -> Result<mfdg_core::engine::RolloutRecord> {
        let rec = rollout_upper(&sc, &grid, &m0, &strat, &opponent, RolloutOptions::new(h))?;
        let mut f = create(&c.out, name)?;
        rec.write_csv(&mut f, &meta)?;
        f.flush()?;
        Ok(rec)
    };
    let rec = run(c.step, "trace.csv")?;
    let consts = sc.constants()?;
    let observed = rec
        .cells
        .iter()
        .map(|cell| cell.flow.observed_lipschitz())
        .fold(0.0, f64::max);
    let isaacs = isaacs_check(&sc, &sample_isaacs(&sc, args.isaacs_samples, c.seed));
    let mut summary = json!({
        "meta": meta_json(&meta),
        "outcome": rec.outcome,
        "lipschitz": {"observed": observed, "bound": consts.c0, "ok": observed <= consts.c0 + 1e-9},
        "isaacs_gap": if args.isaacs_samples > 0 { json!(isaacs.max_gap) } else { Value::Null },
    });
    if args.halve_step {
        let half = run(c.step / 2.0, "trace_half.csv")?;
        let (d, _) = w2_exact(rec.terminal(), half.terminal())?;
        summary["halved_terminal_w2"] = json!(d);
        summary["halved_outcome"] = json!(half.outcome);
    }
    write_json(&c.out, "summary.json", &summary)?;
    Ok(EXIT_OK)
}

/// Graph and converged iteration for one partition.
pub fn solve(
    sc: &Scenario,
    m0: &EmpiricalMeasure,
    grid: &TimeGrid,
    c: &Common,
    cap: u64,
    max_k: usize,
) -> Result<(Arc<ReachableGraph>, Iteration)> {
    let g = build_graph(
        sc,
        grid,
        m0,
        c.resolution,
        StepOptions::euler(c.step),
        cap.min(usize::MAX as u64) as usize,
    )?;
    let it = pim::iterate(&g, 0.0, max_k)?;
    Ok((Arc::new(g), it))
}

pub fn cmd_rollout(args: &SearchArgs) -> Result<i32> {
    let c = &args.common;
    check_common(c)?;
    if args.eps.is_empty() || args.eps.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::Config("--eps needs positive values".into()));
    }
    let sc = load_scenario(&c.scenario)?;
    let m0 = initial_measure(&sc, c)?;
    let grid = grid_for(&sc, c.cells)?;
    let (g, it) = solve(&sc, &m0, &grid, c, args.cap, args.max_k)?;
    let mode = search_mode(args.search, args.cap, args.restarts, c.seed);
    let opts = RolloutOptions::snapped(c.step, c.resolution);
    let slack = 0.05 * g.terminal_range();
    let rows = suites::extremal(&sc, &g, &it, &m0, &args.eps, slack, mode, opts)?;
    let meta = meta(&sc, c)
        .param("eps", format!("{:?}", args.eps))
        .param("search", mode.label())
        .param("cap", args.cap);
    let value: Arc<dyn ValueFunction> = Arc::new(TableValue::new(g.clone(), it.omega_star())?);
    let base = sc.constants()?;
    let mut f = create(&c.out, "rollout.csv")?;
    meta.write(&mut f)?;
    writeln!(f, "epsilon,outcome,psi_root,modulus_term,excess,bound,mode")?;
    for (i, r) in rows.iter().enumerate() {
        writeln!(
            f,
            "{},{:.12},{:.12},{:.12},{:.12},{:.12},{}",
            r.epsilon, r.outcome, r.psi_root, r.modulus_term, r.excess, r.bound, r.mode
        )?;
        // trace against the worst opponent found
        let strat = Cached::new(ExtremalShiftStrategy {
            player: Player::First,
            constants: ShiftConstants::new(r.epsilon, base, sc.dim)?,
            value: value.clone(),
        });
        let res = search_opponent(&sc, &grid, &m0, &Memoryless(&strat), mode, opts)?;
        let rec = rollout_memory(&sc, &grid, &m0, &Memoryless(&strat), &res.opponent, opts)?;
        let mut t = create(&c.out, &format!("trace_eps{i}.csv"))?;
        rec.write_csv(&mut t, &meta.clone().param("epsilon", r.epsilon))?;
        t.flush()?;
    }
    f.flush()?;
    let violations = rows.iter().filter(|r| r.outcome > r.bound + 1e-12).count();
    write_json(
        &c.out,
        "summary.json",
        &json!({
            "meta": meta_json(&meta),
            "psi_root": it.omega_star().values[g.root()],
            "rows": rows.iter().map(|r| json!({
                "epsilon": r.epsilon, "outcome": r.outcome, "excess": r.excess, "bound": r.bound, "mode": r.mode,
            })).collect::<Vec<_>>(),
            "violations": violations,
        }),
    )?;
    Ok(if violations == 0 {
        EXIT_OK
    } else {
        EXIT_VIOLATION
    })
}

pub fn cmd_gamma(args: &SearchArgs) -> Result<i32> {
    let c = &args.common;
    check_common(c)?;
    let sc = load_scenario(&c.scenario)?;
    let m0 = initial_measure(&sc, c)?;
    let grids = (1..=c.cells)
        .map(|k| grid_for(&sc, k))
        .collect::<Result<Vec<_>>>()?;
    let mode = search_mode(args.search, args.cap, args.restarts, c.seed);
    let opts = RolloutOptions::snapped(c.step, c.resolution);
    let source = |grid: &TimeGrid, upper: bool| -> Result<Arc<dyn ValueFunction>> {
        let (g, it) = solve(&sc, &m0, grid, c, args.cap, args.max_k)?;
        let t = if upper {
            it.omega_upper_star()
        } else {
            it.omega_star()
        };
        Ok(Arc::new(TableValue::new(g, t)?) as Arc<dyn ValueFunction>)
    };
    let g1 = estimate_gamma1(
        &sc,
        &m0,
        &args.eps,
        &grids,
        &|grid: &TimeGrid| source(grid, false),
        mode,
        opts,
    )?;
    let g2 = estimate_gamma2(
        &sc,
        &m0,
        &args.eps,
        &grids,
        &|grid: &TimeGrid| source(grid, true),
        mode,
        opts,
    )?;
    let meta = meta(&sc, c)
        .param("eps", format!("{:?}", args.eps))
        .param("search", mode.label())
        .param("cap", args.cap);
    for (name, est) in [("gamma1.csv", &g1), ("gamma2.csv", &g2)] {
        let mut f = create(&c.out, name)?;
        est.write_csv(&mut f, &meta)?;
        f.flush()?;
    }
    write_json(
        &c.out,
        "summary.json",
        &json!({"meta": meta_json(&meta), "gamma1": g1.best, "gamma2": g2.best}),
    )?;
    Ok(EXIT_OK)
}

pub fn cmd_iterate(args: &IterateArgs) -> Result<i32> {
    let c = &args.common;
    check_common(c)?;
    let sc = load_scenario(&c.scenario)?;
    let m0 = initial_measure(&sc, c)?;
    let grid = grid_for(&sc, c.cells)?;
    let g = build_graph(
        &sc,
        &grid,
        &m0,
        c.resolution,
        StepOptions::euler(c.step),
        args.cap.min(usize::MAX as u64) as usize,
    )?;
    let tables_path = c.out.join("tables.csv");
    let it = if args.resume && tables_path.exists() {
        let (lower, upper) = read_tables(&g, BufReader::new(fs::File::open(&tables_path)?))?;
        pim::resume(&g, lower, upper, args.tol, args.max_k)?
    } else {
        pim::iterate(&g, args.tol, args.max_k)?
    };
    let meta = meta(&sc, c)
        .param("tol", args.tol)
        .param("max_k", args.max_k)
        .param("cap", args.cap);
    let mut f = create(&c.out, "tables.csv")?;
    let all: Vec<_> = it.lower.iter().chain(&it.upper).collect();
    write_tables(&g, &all, &mut f, &meta)?;
    f.flush()?;
    let mut f = create(&c.out, "gap_history.csv")?;
    meta.write(&mut f)?;
    writeln!(f, "k,lower_root,upper_root,gap")?;
    for (k, gap) in it.gap_history.iter().enumerate() {
        writeln!(
            f,
            "{k},{:.12},{:.12},{:.12}",
            it.lower[k].values[g.root()],
            it.upper[k].values[g.root()],
            gap
        )?;
    }
    f.flush()?;
    let mix = mixture_gap(&sc, &g, &it.lower[0], args.mixture_samples, c.seed)?;
    let isaacs = isaacs_check(&sc, &sample_isaacs(&sc, 200, c.seed));
    let max_inc = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    write_json(
        &c.out,
        "summary.json",
        &json!({
            "meta": meta_json(&meta),
            "layer_sizes": g.layer_sizes(),
            "nodes": g.len(),
            "edges": g.edge_count(),
            "k": it.lower.len() - 1,
            "sweeps": it.sweeps,
            "converged": it.converged,
            "lower_root": it.omega_star().values[g.root()],
            "upper_root": it.omega_upper_star().values[g.root()],
            "root_gap": it.root_gap(),
            "gap_tolerance": 0.05 * g.terminal_range(),
            "last_increment_lower": max_inc(&it.last_increment_lower),
            "last_increment_upper": max_inc(&it.last_increment_upper),
            "mixture_gap": mix.gap,
            "isaacs_gap": isaacs.max_gap,
        }),
    )?;
    Ok(EXIT_OK)
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<i32> {
    let c = &args.common;
    check_common(c)?;
    if args.trials == 0 {
        return Err(Error::Config("--trials must be positive".into()));
    }
    let sc = load_scenario(&c.scenario)?;
    let opts = VerifyOptions::new(args.trials, c.seed, c.step);
    let lemma = |name: &str, r: mfdg_core::shift::LemmaReport| suites::SuiteResult {
        name: name.to_string(),
        checked: r.trials.len(),
        violations: r.violations,
        worst: -r.min_slack,
    };
    let mut results = vec![
        lemma("lemma_agent", verify_lemma_agent(&sc, opts)?),
        lemma("lemma_flow", verify_lemma_flow(&sc, opts)?),
        suites::triangle(args.trials, c.seed)?,
        suites::projection(&sc, args.trials, c.seed, c.step)?,
    ];
    let m0 = initial_measure(&sc, c)?;
    let grid = grid_for(&sc, c.cells)?;
    let (g, it) = solve(&sc, &m0, &grid, c, args.cap, 50)?;
    results.extend(suites::structure(&g, &it));
    let meta = meta(&sc, c).param("trials", args.trials);
    let mut f = create(&c.out, "verify.csv")?;
    meta.write(&mut f)?;
    writeln!(f, "suite,checked,violations,worst")?;
    for r in &results {
        writeln!(
            f,
            "{},{},{},{:.6e}",
            r.name, r.checked, r.violations, r.worst
        )?;
    }
    f.flush()?;
    let violations: usize = results.iter().map(|r| r.violations).sum();
    write_json(
        &c.out,
        "summary.json",
        &json!({
            "meta": meta_json(&meta),
            "suites": results.iter().map(|r| json!({
                "name": r.name, "checked": r.checked, "violations": r.violations, "worst": r.worst,
            })).collect::<Vec<_>>(),
            "violations": violations,
        }),
    )?;
    Ok(if violations == 0 {
        EXIT_OK
    } else {
        EXIT_VIOLATION
    })
}
