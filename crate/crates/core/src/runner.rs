//! Command execution behind the `energyecon` binary: reading scenarios,
//! running the solvers, the invariant suite, and writing report files.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::equilibrium::{solve_autarky_economy, AutarkyEquilibrium};
use crate::error::{EconError, Result};
use crate::exchange::{
    metc_from_equilibrium, multi_agent_tatonnement, optimal_bilateral_trade, AgentGood, ConsumptionMode, CurveShape,
    TatonnementSettings,
};
use crate::io::{
    checks_csv, decomposition_csv, format_number, prices_csv, read_scenario, scenario_hash, table_csv, to_document,
    write_atomic, CheckResult, ExchangeReport, RunReport, ScenarioRecord,
};
use crate::model::{Economy, EconomyScenario};
use crate::money::{price_table, solved_money_report, synthetic_money_report, MoneyReport, MoneySpec};
use crate::numerics::{finite_diff_gradient, grid_oracle, GridBox, Sense};
use crate::producer::{solve_transfer_min, ProducerProblem};

/// Environment variable capping worker threads.
pub const THREADS_VAR: &str = "ENERGYECON_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    SolveAutarky,
    SolveExchange,
    PriceReport,
    Verify,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::SolveAutarky => "solve-autarky",
            Command::SolveExchange => "solve-exchange",
            Command::PriceReport => "price-report",
            Command::Verify => "verify",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Structured,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// `None` writes both the CSV tables and the JSON document.
    pub format: Option<OutputFormat>,
    pub seed: u64,
    pub mode: ConsumptionMode,
    pub threads: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("."), format: None, seed: 0, mode: ConsumptionMode::default(), threads: 1 }
    }
}

/// Worker count from `ENERGYECON_THREADS`, else the available parallelism.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_VAR)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// One report per scenario, or a single report for exchange.
    pub reports: Vec<RunReport>,
    pub files: Vec<PathBuf>,
}

impl RunOutcome {
    pub fn all_passed(&self) -> bool {
        self.reports.iter().all(RunReport::all_passed)
    }
}

/// Exit status for a run that failed with `err`.
pub fn exit_code(err: &EconError) -> i32 {
    match err {
        EconError::NoConvergence { .. }
        | EconError::NonFiniteEvaluation(_)
        | EconError::NonFiniteMarginal { .. }
        | EconError::DivisionByZero(_)
        | EconError::InconsistentAssignments { .. } => 2,
        EconError::Infeasible(_)
        | EconError::InsufficientSurplus { .. }
        | EconError::DegenerateHorizon { .. }
        | EconError::NoFeasibleGridPoint => 3,
        EconError::Validation(_)
        | EconError::Domain(_)
        | EconError::MissingHistory { .. }
        | EconError::DegenerateFit(_)
        | EconError::FiatMoney
        | EconError::Io(_)
        | EconError::Parse(_) => 1,
    }
}

/// Exit status when every command succeeded but some invariant failed.
pub const EXIT_CHECKS_FAILED: i32 = 4;

fn error_kind(err: &EconError) -> &'static str {
    match err {
        EconError::Validation(_) => "validation",
        EconError::NonFiniteMarginal { .. } => "non_finite_marginal",
        EconError::Domain(_) => "domain",
        EconError::Infeasible(_) => "infeasible",
        EconError::NoConvergence { .. } => "no_convergence",
        EconError::NonFiniteEvaluation(_) => "non_finite_evaluation",
        EconError::DegenerateHorizon { .. } => "degenerate_horizon",
        EconError::DivisionByZero(_) => "division_by_zero",
        EconError::InconsistentAssignments { .. } => "inconsistent_assignments",
        EconError::InsufficientSurplus { .. } => "insufficient_surplus",
        EconError::NoFeasibleGridPoint => "no_feasible_grid_point",
        EconError::MissingHistory { .. } => "missing_history",
        EconError::DegenerateFit(_) => "degenerate_fit",
        EconError::FiatMoney => "fiat_money",
        EconError::Io(_) => "io",
        EconError::Parse(_) => "parse",
    }
}

/// One-line JSON description of an error for standard error.
pub fn error_line(err: &EconError) -> String {
    let mut v = json!({
        "error": error_kind(err),
        "exit_code": exit_code(err),
        "message": err.to_string(),
    });
    match err {
        EconError::Validation(report) => v["violations"] = json!(report.violations),
        EconError::NoConvergence { iterations, residuals, .. } => {
            v["iterations"] = json!(iterations);
            v["residuals"] = json!(residuals);
        }
        EconError::MissingHistory { prime_mover } => v["prime_mover"] = json!(prime_mover),
        EconError::InsufficientSurplus { period } => v["period"] = json!(period),
        _ => {}
    }
    v.to_string()
}

/// Maps `f` over `items` on at most `threads` workers, keeping input order.
fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = threads.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("worker panicked").into_iter().map(|r| r.expect("every item mapped")).collect()
}

struct Loaded {
    name: String,
    scenario: EconomyScenario,
    record: ScenarioRecord,
}

fn load(path: &Path) -> Result<Loaded> {
    let scenario = read_scenario(path)?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scenario".into());
    let record = ScenarioRecord { name: name.clone(), hash: scenario_hash(&scenario)? };
    Ok(Loaded { name, scenario, record })
}

/// Money block of a scenario, or unit quantities so nominal prices equal
/// real prices.
fn money_spec(s: &EconomyScenario) -> MoneySpec {
    s.money.clone().unwrap_or(MoneySpec { real_good: None, real_quantity: 1.0, nominal_quantity: 1.0, fiat: false })
}

struct Writer<'a> {
    dir: PathBuf,
    format: Option<OutputFormat>,
    files: &'a mut Vec<PathBuf>,
}

impl Writer<'_> {
    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        let structured = name.ends_with(".json");
        let wanted = match self.format {
            None => true,
            Some(OutputFormat::Structured) => structured,
            Some(OutputFormat::Csv) => !structured,
        };
        if wanted {
            let path = self.dir.join(name);
            write_atomic(&path, text.as_bytes())?;
            self.files.push(path);
        }
        Ok(())
    }
}

/// Runs `command` on the scenario files in `paths` and writes its reports
/// under `opts.out_dir`. Several scenarios for a per-scenario command are
/// solved concurrently, each writing to a subdirectory named after its
/// file. The first failure in input order is returned once every scenario
/// has finished.
pub fn run(command: Command, paths: &[PathBuf], opts: &RunOptions) -> Result<RunOutcome> {
    if paths.is_empty() {
        return Err(EconError::Domain("no scenario files given".into()));
    }
    if command == Command::SolveExchange {
        return run_exchange(paths, opts);
    }
    let batch = paths.len() > 1;
    let results = parallel_map(paths, opts.threads, |path| -> Result<(RunReport, Vec<PathBuf>)> {
        let loaded = load(path)?;
        let dir = if batch { opts.out_dir.join(&loaded.name) } else { opts.out_dir.clone() };
        let mut files = Vec::new();
        let mut out = Writer { dir, format: opts.format, files: &mut files };
        let report = match command {
            Command::SolveAutarky => solve_autarky_command(&loaded, &mut out)?,
            Command::PriceReport => price_report_command(&loaded, &mut out)?,
            Command::Verify => verify_command(&loaded, opts, &mut out)?,
            Command::SolveExchange => unreachable!(),
        };
        Ok((report, files))
    });
    let mut outcome = RunOutcome { reports: Vec::new(), files: Vec::new() };
    for r in results {
        let (report, files) = r?;
        outcome.reports.push(report);
        outcome.files.extend(files);
    }
    Ok(outcome)
}

fn solve(loaded: &Loaded) -> Result<(Economy, AutarkyEquilibrium)> {
    let econ = Economy::from_scenario(&loaded.scenario)?;
    let eq = solve_autarky_economy(&econ)?;
    Ok((econ, eq))
}

fn solve_autarky_command(loaded: &Loaded, out: &mut Writer) -> Result<RunReport> {
    let (econ, eq) = solve(loaded)?;
    let money = solved_money_report(&econ, &eq, &money_spec(&loaded.scenario), 0)?;
    let mut report = RunReport::new(Command::SolveAutarky.name());
    report.scenarios.push(loaded.record.clone());
    out.write("prices.csv", &prices_csv(&money)?)?;
    out.write("decomposition.csv", &decomposition_csv(&eq)?)?;
    report.bundles.push(eq);
    report.money = Some(money);
    out.write("solution.json", &to_document(&report)?)?;
    Ok(report)
}

fn price_report_command(loaded: &Loaded, out: &mut Writer) -> Result<RunReport> {
    let spec = money_spec(&loaded.scenario);
    let mut report = RunReport::new(Command::PriceReport.name());
    report.scenarios.push(loaded.record.clone());
    let money = match &loaded.scenario.synthetic_accounts {
        Some(accounts) => {
            Economy::from_scenario(&loaded.scenario)?;
            synthetic_money_report(accounts, &spec)?
        }
        None => {
            let (econ, eq) = solve(loaded)?;
            let money = solved_money_report(&econ, &eq, &spec, 0)?;
            report.bundles.push(eq);
            money
        }
    };
    out.write("prices.csv", &prices_csv(&money)?)?;
    if let Some(fit) = money.fit.report() {
        let rows: Vec<Vec<String>> = fit
            .pairs
            .iter()
            .map(|p| {
                vec![
                    p.a.clone(),
                    p.b.clone(),
                    format_number(p.price_ratio),
                    format_number(p.predicted_ratio),
                    format_number(p.embodied_ratio),
                ]
            })
            .collect();
        out.write(
            "pairs.csv",
            &table_csv(&["good_a", "good_b", "price_ratio", "predicted_ratio", "embodied_ratio"], &rows)?,
        )?;
        let fit_row = vec![vec![format_number(fit.slope), format_number(fit.intercept), format_number(fit.r_squared)]];
        out.write("fit.csv", &table_csv(&["slope", "intercept", "r_squared"], &fit_row)?)?;
    }
    report.money = Some(money);
    out.write("report.json", &to_document(&report)?)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Exchange

fn run_exchange(paths: &[PathBuf], opts: &RunOptions) -> Result<RunOutcome> {
    if paths.len() < 2 {
        return Err(EconError::Domain("solve-exchange needs at least two scenario files".into()));
    }
    let solved = parallel_map(paths, opts.threads, |path| -> Result<(Loaded, Economy, AutarkyEquilibrium)> {
        let loaded = load(path)?;
        let (econ, eq) = solve(&loaded)?;
        Ok((loaded, econ, eq))
    });
    let solved: Vec<(Loaded, Economy, AutarkyEquilibrium)> = solved.into_iter().collect::<Result<_>>()?;
    let first = &solved[0].1;
    let goods: Vec<String> = first
        .final_goods
        .iter()
        .map(|f| f.id.clone())
        .filter(|id| solved.iter().all(|(_, econ, _)| econ.final_goods.iter().any(|f| &f.id == id)))
        .collect();
    if goods.is_empty() {
        return Err(EconError::Domain("the scenarios share no final good".into()));
    }
    let curves = parallel_map(&solved, opts.threads, |(_, econ, eq)| -> Result<Vec<AgentGood>> {
        goods
            .iter()
            .map(|id| {
                let k = econ.good_position(id).expect("common good");
                metc_from_equilibrium(econ, eq, k, 0, econ.settings.metc_points)
            })
            .collect()
    });
    let curves: Vec<Vec<AgentGood>> = curves.into_iter().collect::<Result<_>>()?;
    let s = &first.settings;
    let settings = TatonnementSettings { damping: s.damping, tol: s.tolerance, max_iter: s.max_iterations };
    let market = multi_agent_tatonnement(&curves, opts.mode, settings)?;
    let bilateral = match curves.as_slice() {
        [a, b] => Some(optimal_bilateral_trade([a, b], &vec![0.0; goods.len()], opts.mode)?),
        _ => None,
    };

    let mut report = RunReport::new(Command::SolveExchange.name());
    let agents: Vec<String> = solved.iter().map(|(l, _, _)| l.name.clone()).collect();
    let mut rows = Vec::new();
    for g in &market.goods {
        for (a, name) in agents.iter().enumerate() {
            rows.push(vec![
                g.good.clone(),
                name.clone(),
                format_number(g.autarky_tau[a]),
                format_number(g.market_tau),
                format_number(g.post_tau[a]),
                format_number(g.production[a]),
                format_number(g.consumption[a]),
                format_number(g.net_exports[a]),
                format_number(g.gains[a]),
            ]);
        }
    }
    let mut samples = Vec::new();
    for (name, agent) in agents.iter().zip(&curves) {
        for side in agent {
            if let CurveShape::Sampled { q, tau } = &side.curve.shape {
                for (x, t) in q.iter().zip(tau) {
                    samples.push(vec![name.clone(), side.curve.good.clone(), format_number(*x), format_number(*t)]);
                }
            }
        }
    }
    let mut files = Vec::new();
    let mut out = Writer { dir: opts.out_dir.clone(), format: opts.format, files: &mut files };
    out.write(
        "exchange.csv",
        &table_csv(
            &[
                "good_id",
                "agent",
                "autarky_tau",
                "market_tau",
                "post_tau",
                "production",
                "consumption",
                "net_exports",
                "gains",
            ],
            &rows,
        )?,
    )?;
    out.write("metc.csv", &table_csv(&["agent", "good_id", "q", "tau"], &samples)?)?;
    for (loaded, _, eq) in solved {
        report.scenarios.push(loaded.record);
        report.bundles.push(eq);
    }
    report.exchange = Some(ExchangeReport { mode: opts.mode, agents, curves, market, bilateral });
    out.write("exchange.json", &to_document(&report)?)?;
    Ok(RunOutcome { reports: vec![report], files })
}

// ---------------------------------------------------------------------------
// Verify

/// Random interior points per technology for the gradient checks.
const GRADIENT_POINTS: usize = 100;
const GRADIENT_TOL: f64 = 1e-6;
const CAPITAL_TOL: f64 = 1e-8;
const MONEY_IDENTITY_TOL: f64 = 1e-9;
/// Rounding allowance for log-difference identities built from separately
/// computed logarithms.
const LOG_IDENTITY_TOL: f64 = 1e-12;
/// Largest number of free allocation variables the grid cross-check takes.
const ORACLE_DIM: usize = 3;

fn verify_command(loaded: &Loaded, opts: &RunOptions, out: &mut Writer) -> Result<RunReport> {
    let (econ, eq) = solve(loaded)?;
    let mut report = RunReport::new(Command::Verify.name());
    report.seed = Some(opts.seed);
    report.scenarios.push(loaded.record.clone());
    let mut checks = equilibrium_checks(&econ, &eq);
    let spec = money_spec(&loaded.scenario);
    let money = if spec.fiat {
        checks.push(CheckResult::skip("money", "fiat money has no synthetic transfer"));
        None
    } else {
        let money = solved_money_report(&econ, &eq, &spec, 0)?;
        checks.extend(money_checks(&money)?);
        Some(money)
    };
    checks.push(identical_agents_check(&econ, &eq));
    checks.extend(gradient_checks(&econ, opts.seed));
    checks.push(oracle_check(&econ, &eq));
    report.checks = checks;
    out.write("verify.csv", &checks_csv(&report.checks)?)?;
    report.bundles.push(eq);
    report.money = money;
    out.write("verify.json", &to_document(&report)?)?;
    Ok(report)
}

fn equilibrium_checks(econ: &Economy, eq: &AutarkyEquilibrium) -> Vec<CheckResult> {
    let d = &eq.diagnostics;
    let tol = econ.settings.residual_tol;
    let mut checks = vec![
        CheckResult::at_most("kkt.stationarity", d.kkt.stationarity, tol),
        CheckResult::at_most("kkt.feasibility", d.kkt.primal.max(d.kkt.dual), tol),
        CheckResult::at_most("kkt.complementarity", d.kkt.complementarity, tol),
        CheckResult::at_most("producer.conditions", d.producer_kkt.max(), tol),
        CheckResult::at_most("consumer.first_order", d.consumer_foc, tol),
        CheckResult::at_most("consumer.euler", d.euler, tol),
        CheckResult::at_most("consumer.budget", d.budget_slack.max(d.budget_excess), tol),
        CheckResult::at_most("allocation.effective_assignment", d.effective_assignment, tol),
        CheckResult::at_most("capital.discounted_scarcity_stream", d.capital_identity, CAPITAL_TOL),
        CheckResult::at_most("energy.transfer_equals_discounted_content", d.energy_identity, tol),
        CheckResult::at_most("energy.equal_marginal_eroi", d.meroi_spread, tol),
        CheckResult::at_most("energy.discounted_marginal_eroi_is_one", d.beta_meroi, tol),
        CheckResult::at_most("decomposition.direct_plus_scarcity", d.decomposition, tol),
        CheckResult::at_most("decomposition.elasticity", d.elasticity, tol),
        CheckResult::at_most("cross_check.transfer_min", d.producer_gap, tol),
        CheckResult::at_most("cross_check.energy_sector", d.surplus_gap, tol),
        CheckResult::at_most("cross_check.capital_sector", d.capital_gap, tol),
        CheckResult::at_most("cross_check.consumer_lambda", d.lambda_gap, tol),
    ];
    if !d.clamped_over_assignment.is_empty() {
        let periods: Vec<String> = d.clamped_over_assignment.iter().map(|t| (t + 1).to_string()).collect();
        checks.push(
            CheckResult::at_most("allocation.over_assignment_clamped", 0.0, 0.0)
                .with_detail(format!("clamped in periods {}", periods.join(" "))),
        );
    }
    checks
}

fn money_checks(money: &MoneyReport) -> Result<Vec<CheckResult>> {
    let mut checks = Vec::new();
    let state = money.money.clone().expect("solved reports carry a money state");
    let prices = money.prices.as_ref().expect("solved reports carry prices");
    let doubled = crate::money::MoneyState { nominal_quantity: 2.0 * state.nominal_quantity, ..state.clone() };
    let tau: Vec<(String, f64)> = prices.rows.iter().map(|r| (r.good_id.clone(), r.tau)).collect();
    let after = price_table(&tau, &doubled)?;
    let mut neutrality = 0.0_f64;
    for (a, b) in prices.rows.iter().zip(&after.rows) {
        neutrality = neutrality.max((b.p_nominal / a.p_nominal - 2.0).abs());
    }
    for ((_, _, r0), (_, _, r1)) in prices.relative_prices().iter().zip(after.relative_prices()) {
        neutrality = neutrality.max((r1 / r0 - 1.0).abs());
    }
    checks.push(CheckResult::at_most("money.nominal_scaling", neutrality, f64::EPSILON));
    match &money.inflation {
        Some(inflation) => {
            let worst = inflation.residual.iter().flatten().fold(0.0_f64, |m, r| m.max(r.abs()));
            checks.push(CheckResult::at_most("money.inflation_decomposition", worst, LOG_IDENTITY_TOL));
        }
        None => {
            checks.push(CheckResult::skip("money.inflation_decomposition", "real-money good not priced every period"))
        }
    }
    let gap = money.accounts.iter().filter_map(|a| a.gap_residual.map(|r| r.abs() / a.tau)).fold(0.0_f64, f64::max);
    checks.push(CheckResult::at_most("money.transfer_embodied_gap", gap, MONEY_IDENTITY_TOL));
    let floor =
        money.accounts.iter().filter_map(|a| Some((-a.embodied?).max(a.psi? - a.gamma?))).fold(0.0_f64, f64::max);
    checks.push(CheckResult::at_most("money.embodied_non_negative", floor, 0.0));
    match money.fit.report() {
        Some(fit) => {
            let worst = fit.identity_residuals.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
            checks.push(CheckResult::at_most("money.price_identity", worst, MONEY_IDENTITY_TOL));
        }
        None => checks.push(CheckResult::skip("money.price_identity", "fewer than two goods with embodied accounts")),
    }
    Ok(checks)
}

/// An agent trading with an exact copy of itself must not trade.
fn identical_agents_check(econ: &Economy, eq: &AutarkyEquilibrium) -> CheckResult {
    let name = "exchange.identical_agents_do_not_trade";
    let k = econ.final_index(0);
    let side = match metc_from_equilibrium(econ, eq, k, 0, econ.settings.metc_points) {
        Ok(side) => side,
        Err(e) => return CheckResult::skip(name, format!("no curve for '{}': {e}", econ.goods[k].id)),
    };
    let agents = [vec![side.clone()], vec![side]];
    match optimal_bilateral_trade([&agents[0], &agents[1]], &[0.0], ConsumptionMode::FixedConsumption) {
        Ok(out) => {
            let traded = out.goods.iter().flat_map(|g| g.net_exports.iter()).fold(0.0_f64, |m, x| m.max(x.abs()));
            CheckResult::at_most(name, traded.max(out.gains.abs()), 0.0)
        }
        Err(e) => CheckResult::at_most(name, f64::INFINITY, 0.0).with_detail(e.to_string()),
    }
}

/// Analytic marginal products and marginal utilities against central
/// differences at seeded random interior points.
pub fn gradient_checks(econ: &Economy, seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut production = 0.0_f64;
    for tech in &econ.techs {
        for _ in 0..GRADIENT_POINTS {
            let x: Vec<f64> = tech.alpha.iter().map(|_| rng.gen_range(0.1..10.0)).collect();
            let analytic = tech.marginals(&x);
            let step = 1e-6 * x.iter().copied().fold(f64::INFINITY, f64::min);
            match finite_diff_gradient(|p| tech.output(p), &x, step) {
                Ok(fd) => {
                    for l in tech.inputs() {
                        production = production.max((analytic[l] - fd[l]).abs() / analytic[l].abs());
                    }
                }
                Err(_) => production = f64::INFINITY,
            }
        }
    }
    let mut utility = 0.0_f64;
    for _ in 0..GRADIENT_POINTS {
        let q: Vec<Vec<f64>> =
            (0..econ.num_final()).map(|_| (0..econ.horizon).map(|_| rng.gen_range(0.1..10.0)).collect()).collect();
        let Ok(eval) = econ.utility.eval(&q) else {
            utility = f64::INFINITY;
            continue;
        };
        for f in 0..econ.num_final() {
            for t in 0..econ.horizon {
                let mut probe = q.clone();
                let value = |v: f64, probe: &mut Vec<Vec<f64>>| {
                    probe[f][t] = v;
                    econ.utility.eval(probe).map(|e| e.value).unwrap_or(f64::NAN)
                };
                let h = 1e-6 * q[f][t];
                let fd = (value(q[f][t] + h, &mut probe) - value(q[f][t] - h, &mut probe)) / (2.0 * h);
                let a = eval.marginals[f][t];
                if a != 0.0 || fd.abs() > 0.0 {
                    utility = utility.max((a - fd).abs() / a.abs().max(f64::MIN_POSITIVE));
                }
            }
        }
    }
    vec![
        CheckResult::at_most("gradient.production", production, GRADIENT_TOL),
        CheckResult::at_most("gradient.utility", utility, GRADIENT_TOL),
    ]
}

/// Exhaustive grid search over the first period's allocations: no feasible
/// grid point may need fewer direct transfers than the solver's minimum.
fn oracle_check(econ: &Economy, eq: &AutarkyEquilibrium) -> CheckResult {
    let name = "oracle.transfer_min_dominance";
    let b = &eq.bundle;
    let n_pm = econ.num_prime_movers();
    let targets: Vec<f64> = (0..econ.num_goods()).map(|k| b.quantities[k][0]).collect();
    let endowments: Vec<f64> = (0..n_pm).map(|l| b.endowment[l][0]).collect();
    let vars: Vec<(usize, usize)> = (0..econ.num_goods())
        .filter(|&k| targets[k] > 0.0)
        .flat_map(|k| econ.techs[k].inputs().map(move |l| (k, l)))
        .collect();
    if vars.is_empty() || vars.len() > ORACLE_DIM {
        return CheckResult::skip(name, format!("{} allocation variables", vars.len()));
    }
    let problem = ProducerProblem {
        techs: econ.techs.clone(),
        targets: targets.clone(),
        endowments: endowments.clone(),
        epsilon: econ.epsilon.clone(),
        lambda: b.lambda[0].max(f64::MIN_POSITIVE),
        prime_mover_ids: b.prime_movers.clone(),
    };
    let solver = match solve_transfer_min(&problem, econ.settings.kkt_tol, econ.settings.kkt_max_iter) {
        Ok(s) => s.objective,
        Err(e) => return CheckResult::skip(name, format!("transfer minimization failed: {e}")),
    };
    let unpack = |v: &[f64]| {
        let mut x = vec![vec![0.0; n_pm]; econ.num_goods()];
        for (i, &(k, l)) in vars.iter().enumerate() {
            x[k][l] = v[i];
        }
        x
    };
    let objective = |v: &[f64]| vars.iter().zip(v).map(|(&(_, l), a)| econ.epsilon[l] * a).sum::<f64>();
    let feasible = |v: &[f64]| {
        let x = unpack(v);
        let made = (0..econ.num_goods()).all(|k| targets[k] <= 0.0 || econ.techs[k].output(&x[k]) >= targets[k]);
        made && (0..n_pm).all(|l| x.iter().map(|row| row[l]).sum::<f64>() <= endowments[l])
    };
    let bounds = GridBox::new(vec![0.0; vars.len()], vars.iter().map(|&(_, l)| endowments[l]).collect());
    match grid_oracle(objective, feasible, &bounds, econ.settings.grid_resolution, Sense::Minimize, 1) {
        Ok(grid) => {
            let lead = (solver - grid.value) / solver.abs().max(1.0);
            CheckResult::at_most(name, lead.max(0.0), econ.settings.residual_tol).with_detail(format!(
                "grid {} vs solver {}",
                format_number(grid.value),
                format_number(solver)
            ))
        }
        Err(EconError::NoFeasibleGridPoint) => CheckResult::skip(name, "no feasible grid point"),
        Err(e) => CheckResult::skip(name, e.to_string()),
    }
}
