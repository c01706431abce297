//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails. Runs without the libtest harness so
//! the lines are always shown.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use energyecon::energy_sector::solve_surplus_plan;
use energyecon::equilibrium::{solve_autarky, AutarkyEquilibrium};
use energyecon::exchange::{
    metc_from_equilibrium, multi_agent_tatonnement, optimal_bilateral_trade, AgentGood, ConsumptionMode, MetcCurve,
    TatonnementSettings, TradeOutcome,
};
use energyecon::io;
use energyecon::model::{
    eval_utility, Economy, EconomyScenario, EnergyGoodSpec, FinalGoodSpec, PrimeMoverSpec, ProductionTech, TechForm,
    TechnologySpec, UtilityModel, UtilitySpec,
};
use energyecon::money::{inflation_and_dynamics, solved_money_report, synthetic_money_report, MoneyPoint, MoneySpec};
use energyecon::numerics::{grid_oracle, GridBox, Sense, SolverSettings};
use energyecon::producer::{solve_transfer_min, ProducerProblem};
use energyecon::runner::{self, Command, RunOptions};
use energyecon::scenarios::{
    default_scenario, partner_scenario, perturbed_proportionality_demo, proportionality_demo, random_small_scenario,
    two_energy_scenario, two_good_scenario,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KKT_TOL: f64 = 1e-6;
const KKT_BUDGET_SECS: f64 = 60.0;
const ORACLE_TOL: f64 = 1e-3;
const ORACLE_RESOLUTION: usize = 200;
const ORACLE_BUDGET_SECS: f64 = 300.0;
const MEROI_TOL: f64 = 1e-6;
const CAPITAL_TOL: f64 = 1e-8;
const EULER_TOL: f64 = 1e-6;
const EXCHANGE_TOL: f64 = 1e-6;
/// Discrete log identities are exact in real arithmetic; each side is built
/// from separately rounded logarithms, so a few dozen ulps at unit scale.
const LOG_IDENTITY_TOL: f64 = 64.0 * f64::EPSILON;
const IDENTITY_TOL: f64 = 1e-9;
const GRADIENT_TOL: f64 = 1e-6;
const GRADIENT_POINTS: usize = 1000;
const RANDOM_SUITE: u64 = 50;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

// ---------------------------------------------------------------------------
// Scenario construction

struct Pm(&'static str, f64, f64, f64, f64);

fn scenario(
    horizon: usize,
    pms: &[Pm],
    energies: &[(&str, f64, f64)],
    finals: &[(&str, Vec<f64>)],
    techs: &[(&str, f64, &[(&str, f64)])],
) -> EconomyScenario {
    EconomyScenario {
        horizon,
        prime_movers: pms
            .iter()
            .map(|Pm(id, eps, d, endow, build)| PrimeMoverSpec {
                id: id.to_string(),
                epsilon: None,
                power_rate: *eps,
                depreciation: *d,
                initial_endowment: *endow,
                build_energy: Some(*build),
            })
            .collect(),
        energy_goods: energies
            .iter()
            .map(|(id, delta, stock)| EnergyGoodSpec {
                id: id.to_string(),
                energy_content: *delta,
                initial_stock: *stock,
            })
            .collect(),
        final_goods: finals.iter().map(|(id, w)| FinalGoodSpec { id: id.to_string(), weights: w.clone() }).collect(),
        technologies: techs
            .iter()
            .map(|(good, scale, coef)| TechnologySpec {
                good: good.to_string(),
                form: TechForm::CobbDouglas,
                scale: *scale,
                coefficients: coef.iter().map(|(k, v)| (k.to_string(), *v)).collect::<BTreeMap<_, _>>(),
            })
            .collect(),
        utility: UtilitySpec::default(),
        money: None,
        solver: SolverSettings::default(),
        synthetic_accounts: None,
    }
}

fn cd(scale: f64, alpha: &[f64], x: &[f64]) -> f64 {
    scale * alpha.iter().zip(x).map(|(a, v)| v.powf(*a)).product::<f64>()
}

/// Input `l` needed to reach `q` with the other Cobb-Douglas inputs fixed.
fn cd_residual_input(scale: f64, alpha: &[f64], x: &[f64], l: usize, q: f64) -> f64 {
    let rest: f64 = alpha.iter().zip(x).enumerate().filter(|(i, _)| *i != l).map(|(_, (a, v))| v.powf(*a)).product();
    (q / (scale * rest)).powf(1.0 / alpha[l])
}

fn suite() -> Vec<(String, EconomyScenario)> {
    let mut out = vec![
        ("default".to_string(), default_scenario()),
        ("partner".to_string(), partner_scenario()),
        ("two_good".to_string(), two_good_scenario()),
        ("two_energy".to_string(), two_energy_scenario()),
    ];
    out.extend((0..RANDOM_SUITE).map(|s| (format!("random{s}"), random_small_scenario(s))));
    out
}

// ---------------------------------------------------------------------------
// 1. KKT residuals on random scenarios

fn kkt_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0_f64;
    let mut failures = Vec::new();
    for seed in 0..RANDOM_SUITE {
        match solve_autarky(&random_small_scenario(seed)) {
            Ok(eq) => {
                let d = &eq.diagnostics;
                worst = worst.max(d.kkt.max()).max(d.producer_kkt.max());
            }
            Err(e) => failures.push(format!("seed {seed}: {e}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && worst < KKT_TOL && secs < KKT_BUDGET_SECS;
    outcome(
        pass,
        format!(
            "{RANDOM_SUITE} scenarios, worst residual {worst:.2e} (tol {KKT_TOL:.0e}), {secs:.2}s (limit {KKT_BUDGET_SECS}s){}",
            if failures.is_empty() { String::new() } else { format!(", errors: {}", failures.join("; ")) }
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. Grid oracles

struct OracleCase {
    name: &'static str,
    solver: f64,
    grid: f64,
    /// Scale for the relative comparison.
    scale: f64,
}

fn oracle(
    objective: impl Fn(&[f64]) -> f64 + Sync,
    feasible: impl Fn(&[f64]) -> bool + Sync,
    lower: Vec<f64>,
    upper: Vec<f64>,
    sense: Sense,
) -> f64 {
    grid_oracle(objective, feasible, &GridBox::new(lower, upper), ORACLE_RESOLUTION, sense, workers())
        .expect("grid has feasible points")
        .value
}

fn producer(techs: Vec<ProductionTech>, targets: Vec<f64>, endowments: Vec<f64>, epsilon: Vec<f64>) -> ProducerProblem {
    let ids = (0..epsilon.len()).map(|l| format!("pm{l}")).collect();
    ProducerProblem { techs, targets, endowments, epsilon, lambda: 1.0, prime_mover_ids: ids }
}

fn transfer_min(p: &ProducerProblem) -> f64 {
    let s = SolverSettings::default();
    solve_transfer_min(p, s.kkt_tol, s.kkt_max_iter).expect("transfer minimization converges").objective
}

/// Transfer minimization with one Cobb-Douglas good; the last input is
/// eliminated through the output target. Each remaining input is bounded by
/// the cost of the equal-input point divided by its own transfer rate.
fn transfer_min_single(
    name: &'static str,
    scale: f64,
    alpha: Vec<f64>,
    q: f64,
    endow: Vec<f64>,
    eps: Vec<f64>,
) -> OracleCase {
    let n = alpha.len();
    let solver = transfer_min(&producer(
        vec![ProductionTech::cobb_douglas(scale, alpha.clone())],
        vec![q],
        endow.clone(),
        eps.clone(),
    ));
    let equal = (q / scale).powf(1.0 / alpha.iter().sum::<f64>());
    let bound = equal * eps.iter().sum::<f64>();
    let full = |free: &[f64]| {
        let mut x = free.to_vec();
        x.push(1.0);
        x[n - 1] = cd_residual_input(scale, &alpha, &x, n - 1, q);
        x
    };
    let grid = oracle(
        |free| {
            let x = full(free);
            eps.iter().zip(&x).map(|(e, v)| e * v).sum()
        },
        |free| {
            let x = full(free);
            x.iter().all(|v| v.is_finite()) && x.iter().zip(&endow).all(|(v, e)| v <= e)
        },
        vec![0.0; n - 1],
        (0..n - 1).map(|l| (bound / eps[l]).min(endow[l])).collect(),
        Sense::Minimize,
    );
    OracleCase { name, solver, grid, scale: solver }
}

/// Two goods sharing a scarce first prime mover. The grid runs over its
/// total use and the share going to the first good, so the capacity bound
/// lies on the grid; second inputs follow from the targets.
fn transfer_min_shared() -> OracleCase {
    let (a1, a2) = (vec![0.5, 0.3], vec![0.3, 0.4]);
    let (s1, s2) = (1.0, 1.2);
    let (q1, q2) = (1.5, 1.0);
    let endow = vec![2.0, 40.0];
    let eps = vec![50.0, 400.0];
    let solver = transfer_min(&producer(
        vec![ProductionTech::cobb_douglas(s1, a1.clone()), ProductionTech::cobb_douglas(s2, a2.clone())],
        vec![q1, q2],
        endow.clone(),
        eps.clone(),
    ));
    let second = |v: &[f64]| {
        let (u, s) = (v[0], v[1]);
        let x12 = cd_residual_input(s1, &a1, &[s * u, 1.0], 1, q1);
        let x22 = cd_residual_input(s2, &a2, &[(1.0 - s) * u, 1.0], 1, q2);
        x12 + x22
    };
    let grid = oracle(
        |v| eps[0] * v[0] + eps[1] * second(v),
        |v| {
            let x2 = second(v);
            x2.is_finite() && x2 <= endow[1]
        },
        vec![0.0, 0.0],
        vec![endow[0], 1.0],
        Sense::Minimize,
    );
    OracleCase { name: "transfer_min.shared_capacity", solver, grid, scale: solver }
}

/// A linear technology: the cheaper input takes all production, a corner
/// that is an endpoint of the grid.
fn transfer_min_linear() -> OracleCase {
    let (scale, alpha, q) = (2.0, [1.0, 0.5], 3.0);
    let eps = vec![100.0, 30.0];
    let endow = vec![10.0, 10.0];
    let solver = transfer_min(&producer(
        vec![ProductionTech::linear(scale, alpha.to_vec())],
        vec![q],
        endow.clone(),
        eps.clone(),
    ));
    let x2 = |x1: f64| (q - scale * alpha[0] * x1) / (scale * alpha[1]);
    let grid = oracle(
        |v| eps[0] * v[0] + eps[1] * x2(v[0]),
        |v| v[0] <= endow[0] && x2(v[0]) >= 0.0 && x2(v[0]) <= endow[1],
        vec![0.0],
        vec![q / (scale * alpha[0])],
        Sense::Minimize,
    );
    OracleCase { name: "transfer_min.linear_corner", solver, grid, scale: solver }
}

fn surplus_case(
    name: &'static str,
    s: &EconomyScenario,
    beta: f64,
    phi0: Vec<f64>,
    caps: Vec<f64>,
    techs: Vec<(f64, Vec<f64>)>,
    // Maps grid coordinates to `x[e][l]`.
    layout: fn(&[f64]) -> Vec<Vec<f64>>,
    upper: Vec<f64>,
) -> OracleCase {
    let econ = Economy::from_scenario(s).expect("oracle scenario is valid");
    let delta: Vec<f64> = econ.energy_goods.iter().map(|e| e.energy_content).collect();
    let eps = econ.epsilon.clone();
    let plan =
        solve_surplus_plan(&econ, &[1.0, beta], &[phi0.clone(), vec![0.0; eps.len()]], &[caps.clone(), caps.clone()])
            .expect("surplus plan solves");
    let value = |q: &[f64], x: &[Vec<f64>]| {
        let income: f64 = delta.iter().zip(q).map(|(d, q)| beta * d * q).sum();
        let cost: f64 = x.iter().flat_map(|row| row.iter().enumerate().map(|(l, v)| (eps[l] + phi0[l]) * v)).sum();
        income - cost
    };
    let q_solver: Vec<f64> = plan.production.iter().map(|p| p[0]).collect();
    let solver = value(&q_solver, &plan.allocations[0]);
    let grid = oracle(
        |v| {
            let x = layout(v);
            let q: Vec<f64> = techs.iter().zip(&x).map(|((s, a), x)| cd(*s, a, x)).collect();
            value(&q, &x)
        },
        |v| {
            let x = layout(v);
            (0..caps.len()).all(|l| x.iter().map(|row| row[l]).sum::<f64>() <= caps[l] * (1.0 + 1e-12))
        },
        vec![0.0; upper.len()],
        upper,
        Sense::Maximize,
    );
    OracleCase { name, solver, grid, scale: solver.abs() }
}

fn surplus_cases() -> Vec<OracleCase> {
    let two_inputs = scenario(
        2,
        &[Pm("hand", 100.0, 0.9, 15.0, 200.0), Pm("mill", 300.0, 0.8, 5.0, 900.0)],
        &[("wood", 1000.0, 5.0)],
        &[("bread", vec![1.0, 1.0])],
        &[
            ("bread", 1.0, &[("hand", 0.5), ("mill", 0.2)]),
            ("wood", 1.0, &[("hand", 0.4), ("mill", 0.3)]),
            ("hand", 0.5, &[("hand", 0.5)]),
            ("mill", 0.4, &[("mill", 0.5)]),
        ],
    );
    let two_fuels = scenario(
        2,
        &[Pm("hand", 100.0, 0.9, 6.0, 200.0)],
        &[("wood", 1000.0, 1.0), ("coal", 2500.0, 1.0)],
        &[("bread", vec![1.0, 1.0])],
        &[
            ("bread", 1.0, &[("hand", 0.5)]),
            ("wood", 1.0, &[("hand", 0.6)]),
            ("coal", 0.5, &[("hand", 0.5)]),
            ("hand", 0.5, &[("hand", 0.5)]),
        ],
    );
    let three_inputs = scenario(
        2,
        &[Pm("a", 100.0, 0.9, 100.0, 200.0), Pm("b", 200.0, 0.9, 40.0, 200.0), Pm("c", 150.0, 0.9, 50.0, 200.0)],
        &[("wood", 2000.0, 10.0)],
        &[("bread", vec![1.0, 1.0])],
        &[
            ("bread", 1.0, &[("a", 0.3), ("b", 0.3)]),
            ("wood", 1.0, &[("a", 0.3), ("b", 0.2), ("c", 0.2)]),
            ("a", 0.5, &[("a", 0.5)]),
            ("b", 0.5, &[("b", 0.5)]),
            ("c", 0.5, &[("c", 0.5)]),
        ],
    );
    vec![
        surplus_case(
            "energy_surplus.two_inputs",
            &two_inputs,
            0.8,
            vec![0.0, 0.0],
            vec![15.0, 5.0],
            vec![(1.0, vec![0.4, 0.3])],
            |v| vec![v.to_vec()],
            vec![15.0, 5.0],
        ),
        surplus_case(
            "energy_surplus.two_fuels_shared_capacity",
            &two_fuels,
            0.9,
            vec![20.0],
            vec![6.0],
            vec![(1.0, vec![0.6]), (0.5, vec![0.5])],
            |v| vec![vec![v[0]], vec![v[1]]],
            vec![6.0, 6.0],
        ),
        surplus_case(
            "energy_surplus.three_inputs",
            &three_inputs,
            0.9,
            vec![0.0, 0.0, 0.0],
            vec![100.0, 40.0, 50.0],
            vec![(1.0, vec![0.3, 0.2, 0.2])],
            |v| vec![v.to_vec()],
            vec![100.0, 40.0, 50.0],
        ),
    ]
}

fn solved_utility(s: &EconomyScenario) -> f64 {
    let econ = Economy::from_scenario(s).expect("oracle scenario is valid");
    let eq = solve_autarky(s).expect("oracle scenario solves");
    let mut u = 0.0;
    for (f, good) in econ.final_goods.iter().enumerate() {
        for (t, w) in good.weights.iter().enumerate() {
            if *w > 0.0 {
                u += w * eq.bundle.quantities[econ.final_index(f)][t].ln();
            }
        }
    }
    u
}

/// Utility is increasing in every final good, so the oracle spends every
/// binding budget: in the last period the final good takes all it can get.
fn autarky_cases() -> Vec<OracleCase> {
    let mut out = Vec::new();

    // One period, three single-input final goods on one prime mover.
    let s = scenario(
        1,
        &[Pm("hand", 100.0, 0.9, 10.0, 200.0)],
        &[("wood", 1000.0, 0.5)],
        &[("a", vec![1.0]), ("b", vec![0.6]), ("c", vec![0.8])],
        &[
            ("a", 2.0, &[("hand", 0.5)]),
            ("b", 1.0, &[("hand", 0.7)]),
            ("c", 3.0, &[("hand", 0.4)]),
            ("wood", 1.0, &[("hand", 0.6)]),
            ("hand", 0.5, &[("hand", 0.5)]),
        ],
    );
    let solver = solved_utility(&s);
    let (w, scale, alpha) = ([1.0, 0.6, 0.8], [2.0, 1.0, 3.0], [0.5, 0.7, 0.4]);
    let budget = (1000.0_f64 * 0.5 / 100.0).min(10.0);
    let grid = oracle(
        |x| (0..3).map(|f| w[f] * (scale[f] * x[f].powf(alpha[f])).ln()).sum(),
        |x| x.iter().sum::<f64>() <= budget * (1.0 + 1e-12),
        vec![0.0; 3],
        vec![budget; 3],
        Sense::Maximize,
    );
    out.push(OracleCase { name: "autarky.three_final_goods", solver, grid, scale: solver.abs().max(1.0) });

    // One period, one final good on two prime movers; the second input
    // takes whatever the energy budget leaves.
    let s = scenario(
        1,
        &[Pm("hand", 100.0, 0.9, 4.0, 200.0), Pm("mill", 300.0, 0.8, 3.0, 900.0)],
        &[("wood", 1000.0, 0.6)],
        &[("cloth", vec![1.0])],
        &[
            ("cloth", 1.5, &[("hand", 0.4), ("mill", 0.4)]),
            ("wood", 1.0, &[("hand", 0.5)]),
            ("hand", 0.5, &[("hand", 0.5)]),
            ("mill", 0.5, &[("mill", 0.5)]),
        ],
    );
    let solver = solved_utility(&s);
    let income = 600.0;
    let x2 = |x1: f64| ((income - 100.0 * x1) / 300.0).min(3.0);
    let grid = oracle(
        |v| (1.5 * v[0].powf(0.4) * x2(v[0]).powf(0.4)).ln(),
        |v| x2(v[0]) >= 0.0,
        vec![0.0],
        vec![(income / 100.0).min(4.0)],
        Sense::Maximize,
    );
    out.push(OracleCase { name: "autarky.two_prime_movers", solver, grid, scale: solver.abs().max(1.0) });

    // Two periods: bread now, wood and new hands for later, bread later
    // from the energy the wood brings and the hands available.
    let s = scenario(
        2,
        &[Pm("hand", 100.0, 0.9, 100.0, 500.0)],
        &[("wood", 1000.0, 0.8)],
        &[("bread", vec![1.0, 0.9])],
        &[("bread", 2.0, &[("hand", 0.6)]), ("wood", 1.0, &[("hand", 0.7)]), ("hand", 0.5, &[("hand", 0.5)])],
    );
    let solver = solved_utility(&s);
    let x0 = (800.0_f64 / 100.0).min(100.0);
    let grid = oracle(
        |v| {
            let (bread, wood, hands) = (v[0], v[1], v[2]);
            let energy = 1000.0 * wood.powf(0.7);
            let endow = 0.9 * 100.0 + 0.5 * hands.powf(0.5);
            let later = (energy / 100.0).min(endow);
            (2.0 * bread.powf(0.6)).ln() + 0.9 * (2.0 * later.powf(0.6)).ln()
        },
        |v| v.iter().sum::<f64>() <= x0 * (1.0 + 1e-12),
        vec![0.0; 3],
        vec![x0; 3],
        Sense::Maximize,
    );
    out.push(OracleCase { name: "autarky.two_periods", solver, grid, scale: solver.abs().max(1.0) });
    out
}

fn grid_oracles() -> Outcome {
    let start = Instant::now();
    let mut cases = vec![
        transfer_min_single("transfer_min.two_inputs", 1.5, vec![0.4, 0.3], 2.0, vec![50.0, 50.0], vec![100.0, 300.0]),
        transfer_min_single(
            "transfer_min.three_inputs",
            1.0,
            vec![0.3, 0.3, 0.2],
            1.5,
            vec![100.0, 100.0, 100.0],
            vec![100.0, 200.0, 150.0],
        ),
        transfer_min_shared(),
        transfer_min_linear(),
    ];
    cases.extend(surplus_cases());
    cases.extend(autarky_cases());
    let secs = start.elapsed().as_secs_f64();
    let mut worst = 0.0_f64;
    let mut lines = Vec::new();
    for c in &cases {
        let err = (c.solver - c.grid).abs() / c.scale;
        worst = worst.max(err);
        lines.push(format!("{} {:.2e}", c.name, err));
    }
    let pass = cases.len() == 10 && worst <= ORACLE_TOL && secs < ORACLE_BUDGET_SECS;
    outcome(
        pass,
        format!(
            "{} instances at {ORACLE_RESOLUTION}/axis, worst relative gap {worst:.2e} (tol {ORACLE_TOL:.0e}), {secs:.1}s (limit {ORACLE_BUDGET_SECS}s) [{}]",
            cases.len(),
            lines.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. Marginal EROI

fn meroi() -> Outcome {
    let s = two_energy_scenario();
    let econ = Economy::from_scenario(&s).unwrap();
    let eq = solve_autarky(&s).unwrap();
    let b = &eq.bundle;
    let (mut spread, mut beta_err, mut periods) = (0.0_f64, 0.0_f64, 0);
    for t in 0..econ.horizon - 1 {
        let m: Vec<f64> = (0..econ.num_energy())
            .filter(|&e| b.quantities[econ.energy_index(e)][t] > 0.0)
            .map(|e| econ.energy_goods[e].energy_content / b.tau[econ.energy_index(e)][t])
            .collect();
        if m.len() < 2 {
            continue;
        }
        periods += 1;
        let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
        spread = spread.max(hi - lo);
        let beta = b.lambda[t + 1] / b.lambda[t];
        for v in &m {
            beta_err = beta_err.max((beta * v - 1.0).abs());
        }
    }
    outcome(
        periods > 0 && spread < MEROI_TOL && beta_err < MEROI_TOL,
        format!("{periods} periods with both fuels, spread {spread:.2e}, |beta mEROI - 1| {beta_err:.2e} (tol {MEROI_TOL:.0e})"),
    )
}

// ---------------------------------------------------------------------------
// 4 and 5. Capital identity and Euler equations over the suite

fn solved_suite() -> Vec<(String, Economy, AutarkyEquilibrium)> {
    suite()
        .into_iter()
        .map(|(name, s)| {
            let econ = Economy::from_scenario(&s).unwrap();
            let eq = solve_autarky(&s).unwrap_or_else(|e| panic!("{name}: {e}"));
            (name, econ, eq)
        })
        .collect()
}

fn capital_identity(solved: &[(String, Economy, AutarkyEquilibrium)]) -> Outcome {
    let (mut worst, mut count) = (0.0_f64, 0);
    for (_, econ, eq) in solved {
        let b = &eq.bundle;
        for (l, pm) in econ.prime_movers.iter().enumerate() {
            let k = econ.prime_mover_index(l);
            for t in 0..econ.horizon.saturating_sub(1) {
                if !(b.quantities[k][t] > 0.0 && b.lambda[t] > 0.0) {
                    continue;
                }
                let stream: f64 = (t + 1..econ.horizon)
                    .map(|s| b.lambda[s] / b.lambda[t] * pm.depreciation.powi((s - t - 1) as i32) * b.phi[s][l])
                    .sum();
                worst = worst.max(rel(b.tau[k][t], stream));
                count += 1;
            }
        }
    }
    outcome(
        count > 0 && worst < CAPITAL_TOL,
        format!("{count} produced prime movers, worst relative gap {worst:.2e} (tol {CAPITAL_TOL:.0e})"),
    )
}

fn euler(solved: &[(String, Economy, AutarkyEquilibrium)]) -> Outcome {
    let (mut worst, mut count) = (0.0_f64, 0);
    for (_, econ, eq) in solved {
        let b = &eq.bundle;
        for (f, good) in econ.final_goods.iter().enumerate() {
            let k = econ.final_index(f);
            let ok = |t: usize| b.energy_binding[t] && b.quantities[k][t] > 0.0 && good.weights[t] > 0.0;
            for t in 0..econ.horizon {
                for s in t + 1..econ.horizon {
                    if !(ok(t) && ok(s)) {
                        continue;
                    }
                    let (ut, us) = (good.weights[t] / b.quantities[k][t], good.weights[s] / b.quantities[k][s]);
                    let r = (ut / us) / (b.lambda[t] * b.tau[k][t] / (b.lambda[s] * b.tau[k][s])) - 1.0;
                    worst = worst.max(r.abs());
                    count += 1;
                }
            }
        }
    }
    outcome(
        count > 0 && worst < EULER_TOL,
        format!("{count} period pairs, worst residual {worst:.2e} (tol {EULER_TOL:.0e})"),
    )
}

// ---------------------------------------------------------------------------
// 6. Exchange

fn linear(good: &str, a: f64, b: f64, autarky: f64) -> AgentGood {
    AgentGood { curve: MetcCurve::linear(good, a, b).unwrap(), autarky }
}

fn exchange() -> Outcome {
    // The settings the CLI derives from a scenario's solver block.
    let s = SolverSettings::default();
    let tat = TatonnementSettings { damping: s.damping, tol: s.tolerance, max_iter: s.max_iterations };
    let mut pairs: Vec<(String, Vec<AgentGood>, Vec<AgentGood>)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..100 {
        let mut side = || -> Vec<AgentGood> {
            ["B", "C"]
                .iter()
                .map(|g| linear(g, rng.gen_range(0.1..3.0), rng.gen_range(0.05..2.0), rng.gen_range(0.5..5.0)))
                .collect()
        };
        let (a, b) = (side(), side());
        pairs.push((format!("linear{i}"), a, b));
    }
    let metc = |s: &EconomyScenario| -> Vec<AgentGood> {
        let econ = Economy::from_scenario(s).unwrap();
        let eq = solve_autarky(s).unwrap();
        (0..econ.num_final())
            .map(|f| metc_from_equilibrium(&econ, &eq, econ.final_index(f), 0, econ.settings.metc_points).unwrap())
            .collect()
    };
    pairs.push(("default+partner".into(), metc(&default_scenario()), metc(&partner_scenario())));

    let (mut spread, mut min_gain, mut reservation_ok, mut agreement) = (0.0_f64, f64::INFINITY, true, 0.0_f64);
    let mut errors = Vec::new();
    let mut costly_gains = Vec::new();
    let mut record = |out: &TradeOutcome| {
        spread = spread.max(out.max_spread());
        min_gain = min_gain.min(out.gains);
        for g in &out.goods {
            min_gain = min_gain.min(g.gains.iter().copied().fold(f64::INFINITY, f64::min));
        }
        for p in &out.commodity_prices {
            reservation_ok &= p.within_reservation(1e-12).unwrap_or(true);
        }
    };
    for (name, a, b) in &pairs {
        for mode in [ConsumptionMode::FixedConsumption, ConsumptionMode::ResolveDemand] {
            let bilateral = optimal_bilateral_trade([a, b], &[0.0, 0.0], mode);
            let market = multi_agent_tatonnement(&[a.clone(), b.clone()], mode, tat);
            let (Ok(bilateral), Ok(market)) = (bilateral, market) else {
                errors.push(format!("{name} {mode:?}"));
                continue;
            };
            record(&bilateral);
            record(&market);
            for (x, y) in bilateral.goods.iter().zip(&market.goods) {
                agreement = agreement.max(rel(y.market_tau, x.market_tau));
                for i in 0..2 {
                    agreement = agreement.max((x.net_exports[i] - y.net_exports[i]).abs() / (1.0 + x.production[i]));
                }
            }
            // A positive marginal transaction cost keeps gains non-negative.
            let costly = optimal_bilateral_trade([a, b], &[0.05, 0.05], mode);
            match costly {
                Ok(out) => costly_gains.push(out.gains),
                Err(_) => errors.push(format!("{name} {mode:?} with transaction cost")),
            }
        }
    }

    min_gain = costly_gains.into_iter().fold(min_gain, f64::min);

    let mut identical_max = 0.0_f64;
    for (_, a, _) in &pairs {
        for mode in [ConsumptionMode::FixedConsumption, ConsumptionMode::ResolveDemand] {
            let out = optimal_bilateral_trade([a, a], &[0.0, 0.0], mode).unwrap();
            for g in &out.goods {
                identical_max = identical_max.max(g.net_exports.iter().map(|x| x.abs()).fold(0.0, f64::max));
                identical_max = identical_max.max(g.gains.iter().map(|x| x.abs()).fold(0.0, f64::max));
            }
        }
    }

    let pass = errors.is_empty()
        && spread < EXCHANGE_TOL
        && min_gain >= 0.0
        && reservation_ok
        && agreement < EXCHANGE_TOL
        && identical_max == 0.0;
    outcome(
        pass,
        format!(
            "{} agent pairs x 2 modes: max spread {spread:.2e} (tol {EXCHANGE_TOL:.0e}), min gain {min_gain:.3e}, reservation bounds {}, market vs bilateral {agreement:.2e} (tol {EXCHANGE_TOL:.0e}), identical agents max trade {identical_max:e}{}",
            pairs.len(),
            if reservation_ok { "hold" } else { "violated" },
            if errors.is_empty() { String::new() } else { format!(", errors: {}", errors.join("; ")) }
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. Money identities

fn money(solved: &[(String, Economy, AutarkyEquilibrium)]) -> Outcome {
    let spec = |n: f64| MoneySpec { real_good: None, real_quantity: 1.0, nominal_quantity: n, fiat: false };
    let (econ, eq) = (&solved[0].1, &solved[0].2);
    let mut scaling_exact = true;
    for t in 0..econ.horizon {
        let one = solved_money_report(econ, eq, &spec(1.0), t).unwrap();
        let two = solved_money_report(econ, eq, &spec(2.0), t).unwrap();
        for (a, b) in one.accounts.iter().zip(&two.accounts) {
            scaling_exact &= b.p_nominal == 2.0 * a.p_nominal;
            for (c, d) in one.accounts.iter().zip(&two.accounts) {
                scaling_exact &= a.p_nominal / c.p_nominal == b.p_nominal / d.p_nominal;
            }
        }
    }

    let mut residual = 0.0_f64;
    for (_, econ, eq) in solved {
        if let Ok(report) = solved_money_report(econ, eq, &spec(1.0), 0) {
            if let Some(inf) = report.inflation {
                residual = residual.max(inf.residual.iter().flatten().fold(0.0, |m, r| m.max(r.abs())));
            }
        }
    }
    // Nominal money growing 10% a period with constant real money.
    let path: Vec<MoneyPoint> = (0..6)
        .map(|t| MoneyPoint { tau_m: 40.0, real_quantity: 3.0, nominal_quantity: 500.0 * 1.1_f64.powi(t) })
        .collect();
    let tau = vec![vec![12.0, 13.5, 11.0, 20.0, 18.0, 19.5], vec![300.0, 280.0, 310.0, 305.0, 290.0, 330.0]];
    let report = inflation_and_dynamics(&path, &tau).unwrap();
    residual = residual.max(report.residual.iter().flatten().fold(0.0, |m, r| m.max(r.abs())));
    let pi_err = report.inflation.iter().fold(0.0_f64, |m, p| m.max((p - 1.1_f64.ln()).abs()));

    outcome(
        scaling_exact && residual <= LOG_IDENTITY_TOL && pi_err <= LOG_IDENTITY_TOL,
        format!(
            "doubling Q_n {}, decomposition residual {residual:.2e}, |pi - ln 1.1| {pi_err:.2e} (tol {LOG_IDENTITY_TOL:.1e})",
            if scaling_exact { "exact" } else { "inexact" }
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. Proportionality

fn proportionality(solved: &[(String, Economy, AutarkyEquilibrium)]) -> Outcome {
    let demo = proportionality_demo();
    let report =
        synthetic_money_report(demo.synthetic_accounts.as_ref().unwrap(), demo.money.as_ref().unwrap()).unwrap();
    let tau_s = report.money.as_ref().unwrap().synthetic_transfer().unwrap();
    let fit = report.fit.report().expect("demo fit exists");
    let slope_err = rel(fit.slope, 1.0 / tau_s);
    let r2_err = (fit.r_squared - 1.0).abs();

    let perturbed = perturbed_proportionality_demo();
    let p_report =
        synthetic_money_report(perturbed.synthetic_accounts.as_ref().unwrap(), perturbed.money.as_ref().unwrap())
            .unwrap();
    let p_fit = p_report.fit.report().expect("perturbed fit exists");
    let p_identity = p_fit.identity_residuals.iter().fold(0.0_f64, |m, r| m.max(r.abs()));

    let spec = MoneySpec { real_good: None, real_quantity: 1.0, nominal_quantity: 1.0, fiat: false };
    let (mut gap, mut price, mut accounts) = (0.0_f64, 0.0_f64, 0);
    for (_, econ, eq) in solved {
        for t in 0..econ.horizon {
            let Ok(report) = solved_money_report(econ, eq, &spec, t) else { continue };
            let Some(tau_s) = report.money.as_ref().and_then(|m| m.synthetic_transfer().ok()) else { continue };
            for a in &report.accounts {
                let (Some(psi), Some(theta), Some(emb), Some(gamma_avg), Some(eta)) =
                    (a.psi, a.theta, a.embodied, a.gamma_avg, a.eta)
                else {
                    continue;
                };
                accounts += 1;
                let gamma = psi + emb;
                gap = gap.max((a.tau - (gamma + (theta - emb))).abs() / a.tau);
                let rebuilt = (gamma_avg * (1.0 + eta) + theta - emb) / tau_s;
                price = price.max(rel(a.p_nominal, rebuilt).abs());
            }
        }
    }
    let pass = slope_err < IDENTITY_TOL
        && r2_err < IDENTITY_TOL
        && p_fit.r_squared < 1.0 - IDENTITY_TOL
        && p_identity < IDENTITY_TOL
        && accounts > 0
        && gap < IDENTITY_TOL
        && price < IDENTITY_TOL;
    outcome(
        pass,
        format!(
            "demo slope error {slope_err:.2e}, |R2 - 1| {r2_err:.2e}; perturbed R2 {:.6}, identity {p_identity:.2e}; {accounts} solved accounts: gap identity {gap:.2e}, price identity {price:.2e} (tol {IDENTITY_TOL:.0e})",
            p_fit.r_squared
        ),
    )
}

// ---------------------------------------------------------------------------
// 9. Gradients

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut production, mut utility) = (0.0_f64, 0.0_f64);
    for i in 0..GRADIENT_POINTS {
        let n = rng.gen_range(1..=3);
        let alpha: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.6)).collect();
        let scale = rng.gen_range(0.5..3.0);
        let tech =
            if i % 4 == 0 { ProductionTech::linear(scale, alpha) } else { ProductionTech::cobb_douglas(scale, alpha) };
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..10.0)).collect();
        let analytic = tech.marginals(&x);
        for l in 0..n {
            let h = 1e-5 * x[l];
            let (mut up, mut down) = (x.clone(), x.clone());
            up[l] += h;
            down[l] -= h;
            let fd = (tech.output(&up) - tech.output(&down)) / (2.0 * h);
            production = production.max(rel(fd, analytic[l]));
        }

        let (nf, nt) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let weights: Vec<Vec<f64>> = (0..nf).map(|_| (0..nt).map(|_| rng.gen_range(0.1..2.0)).collect()).collect();
        let q: Vec<Vec<f64>> = (0..nf).map(|_| (0..nt).map(|_| rng.gen_range(0.1..10.0)).collect()).collect();
        let model = UtilityModel::weighted_log(weights);
        let eval = eval_utility(&model, &q).unwrap();
        for f in 0..nf {
            for t in 0..nt {
                let h = 1e-5 * q[f][t];
                let (mut up, mut down) = (q.clone(), q.clone());
                up[f][t] += h;
                down[f][t] -= h;
                let fd =
                    (eval_utility(&model, &up).unwrap().value - eval_utility(&model, &down).unwrap().value) / (2.0 * h);
                utility = utility.max(rel(fd, eval.marginals[f][t]));
            }
        }
    }
    outcome(
        production < GRADIENT_TOL && utility < GRADIENT_TOL,
        format!("{GRADIENT_POINTS} points each: production {production:.2e}, utility {utility:.2e} (tol {GRADIENT_TOL:.0e})"),
    )
}

// ---------------------------------------------------------------------------
// 10. Determinism

fn read_dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let path = root.path().join("default.json");
    io::write_atomic(&path, io::to_document(&default_scenario()).unwrap().as_bytes()).unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let opts = RunOptions { out_dir: root.path().join(run), seed: 42, threads: workers(), ..RunOptions::default() };
        runner::run(Command::Verify, std::slice::from_ref(&path), &opts).unwrap();
        outputs.push(read_dir_bytes(&opts.out_dir));
    }
    let same = outputs[0] == outputs[1] && !outputs[0].is_empty();
    outcome(same, format!("{} files, {}", outputs[0].len(), if same { "byte-identical" } else { "differ" }))
}

fn main() {
    let solved = solved_suite();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("kkt-residuals", Box::new(kkt_suite)),
        ("grid-oracles", Box::new(grid_oracles)),
        ("meroi-equalization", Box::new(meroi)),
        ("capital-identity", Box::new(|| capital_identity(&solved))),
        ("euler-equations", Box::new(|| euler(&solved))),
        ("exchange", Box::new(exchange)),
        ("money-identities", Box::new(|| money(&solved))),
        ("proportionality", Box::new(|| proportionality(&solved))),
        ("gradient-checks", Box::new(gradients)),
        ("verify-determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        if !o.pass {
            failed += 1;
        }
        println!("{} {:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
