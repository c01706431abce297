//! Real and nominal money prices, inflation, embodied energy and the
//! regression of nominal prices on average embodied energy.

use serde::{Deserialize, Serialize};

use crate::equilibrium::{AutarkyEquilibrium, SolutionBundle};
use crate::error::{EconError, Result};
use crate::model::{Economy, ProductionTech};
use crate::producer::cost_min_allocation;

/// Money block of a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoneySpec {
    /// Good serving as real money; defaults to the good whose average
    /// transfer is least sensitive to quantity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub real_good: Option<String>,
    #[serde(rename = "Q_m")]
    pub real_quantity: f64,
    #[serde(rename = "Q_n")]
    pub nominal_quantity: f64,
    /// Nominal money no longer backed by real money.
    #[serde(default)]
    pub fiat: bool,
}

/// Constructed per-good accounts used for price reports without solving.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticAccount {
    pub id: String,
    pub psi: f64,
    pub theta: f64,
    /// Amortized prime-mover embodiment per marginal unit.
    pub embodied: f64,
    pub gamma_avg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoneyState {
    pub real_good: String,
    /// Marginal transfer of the real-money good (Joules/unit).
    pub tau_m: f64,
    pub real_quantity: f64,
    pub nominal_quantity: f64,
    pub fiat: bool,
}

impl MoneyState {
    /// Joules per nominal unit, `tau_m Q_m / Q_n`.
    pub fn synthetic_transfer(&self) -> Result<f64> {
        if self.fiat {
            return Err(EconError::FiatMoney);
        }
        if !(self.tau_m > 0.0 && self.real_quantity > 0.0 && self.nominal_quantity > 0.0) {
            return Err(EconError::Domain("money quantities and tau_m must be positive".into()));
        }
        Ok(self.tau_m * self.real_quantity / self.nominal_quantity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceRow {
    pub good_id: String,
    pub tau: f64,
    pub p_real: f64,
    pub p_nominal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceTable {
    pub tau_m: f64,
    pub tau_s: f64,
    pub rows: Vec<PriceRow>,
}

impl PriceTable {
    /// `P_a / P_b` for every ordered pair `a < b`.
    pub fn relative_prices(&self) -> Vec<(String, String, f64)> {
        let mut out = Vec::new();
        for (i, a) in self.rows.iter().enumerate() {
            for b in &self.rows[i + 1..] {
                out.push((a.good_id.clone(), b.good_id.clone(), a.p_nominal / b.p_nominal));
            }
        }
        out
    }
}

/// Real prices `tau / tau_m` and nominal prices `tau / tau_s`.
pub fn price_table(tau: &[(String, f64)], money: &MoneyState) -> Result<PriceTable> {
    let tau_s = money.synthetic_transfer()?;
    let rows = tau
        .iter()
        .map(|(id, t)| PriceRow { good_id: id.clone(), tau: *t, p_real: t / money.tau_m, p_nominal: t / tau_s })
        .collect();
    Ok(PriceTable { tau_m: money.tau_m, tau_s, rows })
}

// ---------------------------------------------------------------------------
// Inflation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoneyPoint {
    pub tau_m: f64,
    pub real_quantity: f64,
    pub nominal_quantity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InflationReport {
    /// Inflation between consecutive periods.
    pub inflation: Vec<f64>,
    /// `[k][step]` log-change of the nominal price.
    pub dln_nominal: Vec<Vec<f64>>,
    /// `[k][step]` log-change of the real price.
    pub dln_real: Vec<Vec<f64>>,
    /// Log-change of nominal over real money per step.
    pub dln_money_ratio: Vec<f64>,
    /// `[k][step]` of `dln P - dln p - dln(Q_n/Q_m)`.
    pub residual: Vec<Vec<f64>>,
}

/// Discrete log-differences of money, real and nominal prices along a path.
/// `tau[k][t]` are marginal transfers per good.
pub fn inflation_and_dynamics(path: &[MoneyPoint], tau: &[Vec<f64>]) -> Result<InflationReport> {
    let positive = |v: f64| v > 0.0 && v.is_finite();
    if path.iter().any(|p| !(positive(p.tau_m) && positive(p.real_quantity) && positive(p.nominal_quantity)))
        || tau.iter().flatten().any(|v| !positive(*v))
        || tau.iter().any(|row| row.len() != path.len())
    {
        return Err(EconError::Domain("paths must be strictly positive and of equal length".into()));
    }
    let steps = path.len().saturating_sub(1);
    let ratio = |p: &MoneyPoint| p.nominal_quantity / p.real_quantity;
    let dln_money_ratio: Vec<f64> = (0..steps).map(|s| ratio(&path[s + 1]).ln() - ratio(&path[s]).ln()).collect();
    let inflation = (0..steps).map(|s| dln_money_ratio[s] - (path[s + 1].tau_m.ln() - path[s].tau_m.ln())).collect();
    let nominal = |k: usize, t: usize| {
        let p = &path[t];
        tau[k][t] / (p.tau_m * p.real_quantity / p.nominal_quantity)
    };
    let real = |k: usize, t: usize| tau[k][t] / path[t].tau_m;
    let dln_nominal: Vec<Vec<f64>> =
        (0..tau.len()).map(|k| (0..steps).map(|s| nominal(k, s + 1).ln() - nominal(k, s).ln()).collect()).collect();
    let dln_real: Vec<Vec<f64>> =
        (0..tau.len()).map(|k| (0..steps).map(|s| real(k, s + 1).ln() - real(k, s).ln()).collect()).collect();
    let residual = (0..tau.len())
        .map(|k| (0..steps).map(|s| dln_nominal[k][s] - dln_real[k][s] - dln_money_ratio[s]).collect())
        .collect();
    Ok(InflationReport { inflation, dln_nominal, dln_real, dln_money_ratio, residual })
}

// ---------------------------------------------------------------------------
// Embodied energy

/// Units of one prime mover built in one period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vintage {
    /// 0 for the initial endowment, otherwise the (1-based) period of
    /// construction; the units serve from the following period on.
    pub period: usize,
    pub units: f64,
    /// Total Joules spent building the vintage.
    pub build_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimeMoverHistory {
    pub id: String,
    pub depreciation: f64,
    pub vintages: Vec<Vintage>,
}

/// Survival-weighted service of a vintage over the periods `1..=horizon`.
fn lifetime_service(v: &Vintage, depreciation: f64, horizon: usize) -> f64 {
    let first = v.period + 1;
    (first..=horizon).map(|t| v.units * depreciation.powi((t - first) as i32)).sum()
}

/// Embodied energy charged per unit-period of each prime mover's service,
/// `[t][l]`. Each vintage's build energy is spread evenly over its
/// survival-weighted service within the horizon.
pub fn embodied_charge_rates(histories: &[PrimeMoverHistory], horizon: usize) -> Vec<Vec<f64>> {
    let mut rates = vec![vec![0.0; histories.len()]; horizon];
    for (l, h) in histories.iter().enumerate() {
        for t in 1..=horizon {
            let mut charge = 0.0;
            let mut service = 0.0;
            for v in &h.vintages {
                if v.period >= t || v.units <= 0.0 {
                    continue;
                }
                let alive = v.units * h.depreciation.powi((t - v.period - 1) as i32);
                let life = lifetime_service(v, h.depreciation, horizon);
                charge += v.build_energy / life * alive;
                service += alive;
            }
            rates[t - 1][l] = if service > 0.0 { charge / service } else { 0.0 };
        }
    }
    rates
}

/// Embodied-energy figures for one good in one period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbodiedAccount {
    pub psi: f64,
    /// Amortized prime-mover embodiment per marginal unit.
    pub embodied: f64,
    pub gamma: f64,
    pub gamma_avg: f64,
    /// `gamma / gamma_avg - 1`.
    pub eta: f64,
    /// Finite-difference elasticity of `gamma_avg` along the cost-minimizing
    /// expansion path; equals `eta` only when embodiment is proportional to
    /// direct transfers.
    pub eta_fd: Option<f64>,
}

/// Embodied account of a good produced at `x` with output `q`, given direct
/// transfers `epsilon`, embodiment rates `charges` and the factor prices
/// the producer faces (for the finite-difference elasticity).
pub fn embodied_account(
    tech: &ProductionTech,
    x: &[f64],
    q: f64,
    epsilon: &[f64],
    charges: &[f64],
    prices: &[f64],
    step: f64,
) -> Result<EmbodiedAccount> {
    let total: f64 = x.iter().sum();
    let used: Vec<usize> = tech.inputs().filter(|&l| x[l] > 1e-9 * total).collect();
    if used.is_empty() || !(q > 0.0) {
        return Err(EconError::Domain("embodied account needs positive output".into()));
    }
    let eval = tech.eval(x)?;
    let n = used.len() as f64;
    let mut psi = 0.0;
    let mut embodied = 0.0;
    for &l in &used {
        let g = eval.requirements[l].ok_or(EconError::NonFiniteMarginal { input: l })?;
        psi += epsilon[l] * g;
        embodied += charges[l] * g;
    }
    psi /= n;
    embodied /= n;
    let avg_at = |alloc: &[f64], qq: f64| -> f64 {
        alloc.iter().enumerate().map(|(l, a)| (epsilon[l] + charges[l]) * a).sum::<f64>() / qq
    };
    let gamma_avg = avg_at(x, q);
    let gamma = psi + embodied;
    let path_avg = |qq: f64| avg_at(&cost_min_allocation(tech, prices, qq), qq);
    let (up, down) = (path_avg(q * (1.0 + step)), path_avg(q * (1.0 - step)));
    let eta_fd = (up > 0.0 && down > 0.0).then(|| (up.ln() - down.ln()) / ((1.0 + step).ln() - (1.0 - step).ln()));
    Ok(EmbodiedAccount { psi, embodied, gamma, gamma_avg, eta: gamma / gamma_avg - 1.0, eta_fd })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub tau: f64,
    pub gamma: f64,
    pub gap: f64,
    /// `tau - (gamma + theta - embodied)`.
    pub residual: f64,
}

/// Marginal transfer against marginal embodied energy: both decompositions
/// share the direct component, so `tau = gamma + (theta - embodied)`.
pub fn transfer_embodied_gap(psi: f64, theta: f64, embodied: f64) -> GapRow {
    let tau = psi + theta;
    let gamma = psi + embodied;
    let gap = theta - embodied;
    GapRow { tau, gamma, gap, residual: tau - (gamma + gap) }
}

// ---------------------------------------------------------------------------
// Proportionality

/// Per-good inputs to the price regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProportionalityInput {
    pub good_id: String,
    pub tau: f64,
    pub theta: f64,
    pub embodied: f64,
    pub gamma_avg: f64,
    pub eta: f64,
    pub p_nominal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRatio {
    pub a: String,
    pub b: String,
    /// `P_a / P_b`.
    pub price_ratio: f64,
    /// The same ratio rebuilt from embodied energy, elasticities and gaps.
    pub predicted_ratio: f64,
    /// `gamma_avg_a / gamma_avg_b`.
    pub embodied_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProportionalityReport {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Regression residual per good.
    pub fit_residuals: Vec<f64>,
    /// `P - (gamma_avg (1 + eta) + theta - embodied) / tau_s` per good,
    /// relative to `P` since nominal units scale with the money supply.
    pub identity_residuals: Vec<f64>,
    pub pairs: Vec<PairRatio>,
}

/// Least-squares fit of nominal prices on average embodied energy, plus the
/// per-good price identity and pairwise relative prices.
pub fn proportionality_report(goods: &[ProportionalityInput], tau_s: f64) -> Result<ProportionalityReport> {
    if goods.len() < 2 {
        return Err(EconError::DegenerateFit("at least two goods are required".into()));
    }
    let n = goods.len() as f64;
    let mx = goods.iter().map(|g| g.gamma_avg).sum::<f64>() / n;
    let my = goods.iter().map(|g| g.p_nominal).sum::<f64>() / n;
    let sxx: f64 = goods.iter().map(|g| (g.gamma_avg - mx).powi(2)).sum();
    let sxy: f64 = goods.iter().map(|g| (g.gamma_avg - mx) * (g.p_nominal - my)).sum();
    let syy: f64 = goods.iter().map(|g| (g.p_nominal - my).powi(2)).sum();
    if !(sxx > 1e-300 * (1.0 + mx * mx)) || goods.iter().all(|g| g.gamma_avg == goods[0].gamma_avg) {
        return Err(EconError::DegenerateFit("all average embodied energies are equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let fit_residuals: Vec<f64> = goods.iter().map(|g| g.p_nominal - (intercept + slope * g.gamma_avg)).collect();
    let ss_res: f64 = fit_residuals.iter().map(|r| r * r).sum();
    let r_squared = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    let rebuilt = |g: &ProportionalityInput| (g.gamma_avg * (1.0 + g.eta) + g.theta - g.embodied) / tau_s;
    let identity_residuals = goods.iter().map(|g| (g.p_nominal - rebuilt(g)) / g.p_nominal).collect();
    let mut pairs = Vec::new();
    for (i, a) in goods.iter().enumerate() {
        for b in &goods[i + 1..] {
            pairs.push(PairRatio {
                a: a.good_id.clone(),
                b: b.good_id.clone(),
                price_ratio: a.p_nominal / b.p_nominal,
                predicted_ratio: rebuilt(a) / rebuilt(b),
                embodied_ratio: a.gamma_avg / b.gamma_avg,
            });
        }
    }
    Ok(ProportionalityReport { slope, intercept, r_squared, fit_residuals, identity_residuals, pairs })
}

/// Builds regression inputs from constructed accounts.
pub fn synthetic_inputs(accounts: &[SyntheticAccount], tau_s: f64) -> Vec<ProportionalityInput> {
    accounts
        .iter()
        .map(|a| {
            let tau = a.psi + a.theta;
            let gamma = a.psi + a.embodied;
            ProportionalityInput {
                good_id: a.id.clone(),
                tau,
                theta: a.theta,
                embodied: a.embodied,
                gamma_avg: a.gamma_avg,
                eta: gamma / a.gamma_avg - 1.0,
                p_nominal: tau / tau_s,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Reports from solved and constructed economies

/// Header stored with every money report.
pub const REPORT_NOTE: &str = "theta and embodied are marginal per-unit figures while gamma_avg is an \
average; the regression treats available embodied-energy estimates as averages";

/// Build histories of every prime mover: the initial endowment, then one
/// vintage per period of production built with the direct transfers spent
/// on it in that period.
pub fn prime_mover_histories(econ: &Economy, bundle: &SolutionBundle) -> Result<Vec<PrimeMoverHistory>> {
    let mut out = Vec::with_capacity(econ.num_prime_movers());
    for (l, pm) in econ.prime_movers.iter().enumerate() {
        let mut vintages = Vec::new();
        if pm.initial_endowment > 0.0 {
            let per_unit = pm.build_energy.ok_or_else(|| EconError::MissingHistory { prime_mover: pm.id.clone() })?;
            vintages.push(Vintage {
                period: 0,
                units: pm.initial_endowment,
                build_energy: per_unit * pm.initial_endowment,
            });
        }
        let k = econ.prime_mover_index(l);
        for t in 0..econ.horizon {
            let units = bundle.quantities[k][t];
            if units > 0.0 {
                let spent: f64 = bundle.allocations[t][k].iter().zip(&econ.epsilon).map(|(a, e)| a * e).sum();
                vintages.push(Vintage { period: t + 1, units, build_energy: spent });
            }
        }
        out.push(PrimeMoverHistory { id: pm.id.clone(), depreciation: pm.depreciation, vintages });
    }
    Ok(out)
}

/// One row of a money report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoodAccount {
    pub good_id: String,
    pub tau: f64,
    pub tau_avg: Option<f64>,
    pub psi: Option<f64>,
    pub theta: Option<f64>,
    pub embodied: Option<f64>,
    pub gamma: Option<f64>,
    pub gamma_avg: Option<f64>,
    pub eta: Option<f64>,
    pub eta_fd: Option<f64>,
    pub mu: Option<f64>,
    pub p_real: f64,
    pub p_nominal: f64,
    /// `theta - embodied`.
    pub gap: Option<f64>,
    /// `tau - (gamma + gap)` with `tau` rebuilt from its decomposition.
    pub gap_residual: Option<f64>,
}

impl GoodAccount {
    fn input(&self) -> Option<ProportionalityInput> {
        Some(ProportionalityInput {
            good_id: self.good_id.clone(),
            tau: self.tau,
            theta: self.theta?,
            embodied: self.embodied?,
            gamma_avg: self.gamma_avg?,
            eta: self.eta?,
            p_nominal: self.p_nominal,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FitOutcome {
    Fit { report: ProportionalityReport },
    Degenerate { reason: String },
}

impl FitOutcome {
    pub fn report(&self) -> Option<&ProportionalityReport> {
        match self {
            FitOutcome::Fit { report } => Some(report),
            FitOutcome::Degenerate { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoneyReport {
    pub note: String,
    /// 1-based period the prices refer to; 0 for constructed accounts.
    pub period: usize,
    /// Absent only when there is no good to serve as real money.
    pub money: Option<MoneyState>,
    pub prices: Option<PriceTable>,
    pub accounts: Vec<GoodAccount>,
    /// Inflation along the solved horizon with constant money quantities.
    pub inflation: Option<InflationReport>,
    pub fit: FitOutcome,
}

fn fit_outcome(accounts: &[GoodAccount], tau_s: Option<f64>) -> Result<FitOutcome> {
    let inputs: Vec<ProportionalityInput> = accounts.iter().filter_map(GoodAccount::input).collect();
    let Some(tau_s) = tau_s else {
        return Ok(FitOutcome::Degenerate { reason: "no goods to price".into() });
    };
    match proportionality_report(&inputs, tau_s) {
        Ok(report) => Ok(FitOutcome::Fit { report }),
        Err(EconError::DegenerateFit(reason)) => Ok(FitOutcome::Degenerate { reason }),
        Err(e) => Err(e),
    }
}

fn unknown_real_good(id: &str) -> EconError {
    EconError::Domain(format!("real-money good '{id}' has no positive marginal transfer"))
}

/// Prices, embodied accounts and the proportionality fit of a solved
/// economy in `period` (0-based). Real money defaults to the priced good
/// whose average transfer is least sensitive to quantity.
pub fn solved_money_report(
    econ: &Economy,
    eq: &AutarkyEquilibrium,
    spec: &MoneySpec,
    period: usize,
) -> Result<MoneyReport> {
    if period >= econ.horizon {
        return Err(EconError::Domain(format!("period {} outside the horizon", period + 1)));
    }
    let b = &eq.bundle;
    let priced: Vec<usize> = (0..econ.num_goods()).filter(|&k| b.tau[k][period] > 0.0).collect();
    let real = match &spec.real_good {
        Some(id) => econ.good_position(id).filter(|k| priced.contains(k)).ok_or_else(|| unknown_real_good(id))?,
        None => {
            let mu = |k: usize| eq.decomposition[k][period].as_ref().map(|d| d.mu.abs()).unwrap_or(f64::INFINITY);
            let Some(best) = priced.iter().copied().reduce(|a, c| if mu(c) < mu(a) { c } else { a }) else {
                return Err(EconError::Domain("no good has a positive marginal transfer".into()));
            };
            best
        }
    };
    let money = MoneyState {
        real_good: econ.goods[real].id.clone(),
        tau_m: b.tau[real][period],
        real_quantity: spec.real_quantity,
        nominal_quantity: spec.nominal_quantity,
        fiat: spec.fiat,
    };
    let tau: Vec<(String, f64)> = priced.iter().map(|&k| (econ.goods[k].id.clone(), b.tau[k][period])).collect();
    let prices = price_table(&tau, &money)?;
    // Without build records prices are still reported; the embodied columns
    // stay empty and the fit says why.
    let (charges, missing) = match prime_mover_histories(econ, b) {
        Ok(histories) => (Some(embodied_charge_rates(&histories, econ.horizon)), None),
        Err(e @ EconError::MissingHistory { .. }) => (None, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    let factor_prices: Vec<f64> = econ.epsilon.iter().zip(&b.phi[period]).map(|(e, p)| e + p).collect();
    let mut accounts = Vec::with_capacity(priced.len());
    for (&k, row) in priced.iter().zip(&prices.rows) {
        let decomposition = eq.decomposition[k][period].as_ref();
        let q = b.quantities[k][period];
        let embodied = match (decomposition, &charges) {
            (Some(_), Some(charges)) => Some(embodied_account(
                &econ.techs[k],
                &b.allocations[period][k],
                q,
                &econ.epsilon,
                &charges[period],
                &factor_prices,
                econ.settings.fd_step,
            )?),
            _ => None,
        };
        let gap = decomposition.zip(embodied.as_ref()).map(|(d, e)| transfer_embodied_gap(d.psi, d.theta, e.embodied));
        accounts.push(GoodAccount {
            good_id: row.good_id.clone(),
            tau: row.tau,
            tau_avg: b.tau_avg[k][period],
            psi: decomposition.map(|d| d.psi),
            theta: decomposition.map(|d| d.theta),
            embodied: embodied.as_ref().map(|e| e.embodied),
            gamma: embodied.as_ref().map(|e| e.gamma),
            gamma_avg: embodied.as_ref().map(|e| e.gamma_avg),
            eta: embodied.as_ref().map(|e| e.eta),
            eta_fd: embodied.as_ref().and_then(|e| e.eta_fd),
            mu: decomposition.map(|d| d.mu),
            p_real: row.p_real,
            p_nominal: row.p_nominal,
            gap: gap.as_ref().map(|g| g.gap),
            gap_residual: gap.as_ref().map(|g| g.residual),
        });
    }
    let inflation = if spec.fiat || (0..econ.horizon).any(|t| !(b.tau[real][t] > 0.0)) {
        None
    } else {
        let path: Vec<MoneyPoint> = (0..econ.horizon)
            .map(|t| MoneyPoint {
                tau_m: b.tau[real][t],
                real_quantity: spec.real_quantity,
                nominal_quantity: spec.nominal_quantity,
            })
            .collect();
        let goods: Vec<usize> =
            priced.iter().copied().filter(|&k| (0..econ.horizon).all(|t| b.tau[k][t] > 0.0)).collect();
        let tau_path: Vec<Vec<f64>> = goods.iter().map(|&k| b.tau[k].clone()).collect();
        Some(inflation_and_dynamics(&path, &tau_path)?)
    };
    let fit = match missing {
        Some(reason) => FitOutcome::Degenerate { reason },
        None => fit_outcome(&accounts, Some(prices.tau_s))?,
    };
    Ok(MoneyReport {
        note: REPORT_NOTE.into(),
        period: period + 1,
        money: Some(money),
        prices: Some(prices),
        accounts,
        inflation,
        fit,
    })
}

/// Report over constructed accounts. Real money defaults to the account
/// with the smallest quantity elasticity of average embodied energy.
pub fn synthetic_money_report(accounts: &[SyntheticAccount], spec: &MoneySpec) -> Result<MoneyReport> {
    let tau = |a: &SyntheticAccount| a.psi + a.theta;
    let eta = |a: &SyntheticAccount| ((a.psi + a.embodied) / a.gamma_avg - 1.0).abs();
    let real = match &spec.real_good {
        Some(id) => Some(accounts.iter().find(|a| &a.id == id).ok_or_else(|| unknown_real_good(id))?),
        None => accounts.iter().reduce(|a, c| if eta(c) < eta(a) { c } else { a }),
    };
    let Some(real) = real else {
        return Ok(MoneyReport {
            note: REPORT_NOTE.into(),
            period: 0,
            money: None,
            prices: None,
            accounts: Vec::new(),
            inflation: None,
            fit: fit_outcome(&[], None)?,
        });
    };
    let money = MoneyState {
        real_good: real.id.clone(),
        tau_m: tau(real),
        real_quantity: spec.real_quantity,
        nominal_quantity: spec.nominal_quantity,
        fiat: spec.fiat,
    };
    let prices = price_table(&accounts.iter().map(|a| (a.id.clone(), tau(a))).collect::<Vec<_>>(), &money)?;
    let rows: Vec<GoodAccount> = accounts
        .iter()
        .zip(synthetic_inputs(accounts, prices.tau_s))
        .zip(&prices.rows)
        .map(|((a, input), row)| {
            let gap = transfer_embodied_gap(a.psi, a.theta, a.embodied);
            GoodAccount {
                good_id: a.id.clone(),
                tau: row.tau,
                tau_avg: None,
                psi: Some(a.psi),
                theta: Some(a.theta),
                embodied: Some(a.embodied),
                gamma: Some(gap.gamma),
                gamma_avg: Some(a.gamma_avg),
                eta: Some(input.eta),
                eta_fd: None,
                mu: None,
                p_real: row.p_real,
                p_nominal: row.p_nominal,
                gap: Some(gap.gap),
                gap_residual: Some(gap.residual),
            }
        })
        .collect();
    let fit = fit_outcome(&rows, Some(prices.tau_s))?;
    Ok(MoneyReport {
        note: REPORT_NOTE.into(),
        period: 0,
        money: Some(money),
        prices: Some(prices),
        accounts: rows,
        inflation: None,
        fit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn money(tau_m: f64, q_m: f64, q_n: f64) -> MoneyState {
        MoneyState { real_good: "gold".into(), tau_m, real_quantity: q_m, nominal_quantity: q_n, fiat: false }
    }

    #[test]
    fn price_examples() {
        let t = price_table(&[("k".into(), 20.0)], &money(10.0, 100.0, 1000.0)).unwrap();
        assert_eq!(t.rows[0].p_real, 2.0);
        assert_eq!(t.tau_s, 1.0);
        assert_eq!(t.rows[0].p_nominal, 20.0);
    }

    #[test]
    fn fiat_has_no_synthetic_transfer() {
        let m = MoneyState { fiat: true, ..money(10.0, 100.0, 1000.0) };
        assert!(matches!(m.synthetic_transfer(), Err(EconError::FiatMoney)));
    }

    #[test]
    fn inflation_examples() {
        let base = MoneyPoint { tau_m: 10.0, real_quantity: 100.0, nominal_quantity: 1000.0 };
        let grown = MoneyPoint { nominal_quantity: 1100.0, ..base };
        let r = inflation_and_dynamics(&[base, grown], &[vec![5.0, 5.0]]).unwrap();
        assert!((r.inflation[0] - 1.1_f64.ln()).abs() < 1e-15);
        let r = inflation_and_dynamics(&[base, base], &[vec![5.0, 5.0]]).unwrap();
        assert_eq!(r.inflation[0], 0.0);
        assert_eq!(r.dln_nominal[0][0], 0.0);
        let cheaper = MoneyPoint { tau_m: 9.5, ..base };
        let r = inflation_and_dynamics(&[base, cheaper], &[vec![5.0, 5.0]]).unwrap();
        assert!((r.inflation[0] + 0.95_f64.ln()).abs() < 1e-15 && r.inflation[0] > 0.0);
    }

    #[test]
    fn amortization_arithmetic() {
        // 100 J over a single vintage of 50 unit-periods of service.
        let h = PrimeMoverHistory {
            id: "pm".into(),
            depreciation: 0.5,
            vintages: vec![Vintage { period: 0, units: 25.0, build_energy: 100.0 }],
        };
        // Service over two periods: 25 + 12.5.
        let rates = embodied_charge_rates(&[h], 2);
        assert!((rates[0][0] - 100.0 / 37.5).abs() < 1e-12);
        assert!((rates[1][0] - 100.0 / 37.5).abs() < 1e-12);
        let h = PrimeMoverHistory {
            id: "pm".into(),
            depreciation: 0.5,
            vintages: vec![Vintage { period: 0, units: 50.0, build_energy: 100.0 }],
        };
        assert!((embodied_charge_rates(&[h], 1)[0][0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn gap_examples() {
        let g = transfer_embodied_gap(5.0, 2.0, 3.0);
        assert_eq!((g.tau, g.gamma, g.gap, g.residual), (7.0, 8.0, -1.0, 0.0));
        let g = transfer_embodied_gap(5.0, 3.0, 3.0);
        assert_eq!(g.tau, g.gamma);
    }

    #[test]
    fn zero_gap_regression() {
        let tau_s = 2.5;
        let accounts: Vec<SyntheticAccount> = [(4.0, 1.0), (7.0, 2.0), (11.0, 0.5)]
            .iter()
            .enumerate()
            .map(|(i, (psi, g))| SyntheticAccount {
                id: format!("g{i}"),
                psi: *psi,
                theta: *g,
                embodied: *g,
                gamma_avg: psi + g,
            })
            .collect();
        let r = proportionality_report(&synthetic_inputs(&accounts, tau_s), tau_s).unwrap();
        assert!((r.slope - 1.0 / tau_s).abs() < 1e-12);
        assert!(r.intercept.abs() < 1e-12);
        assert!((r.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn higher_elasticity_commands_higher_relative_price() {
        let tau_s = 1.0;
        let goods = [
            ProportionalityInput {
                good_id: "a".into(),
                tau: 12.0,
                theta: 0.0,
                embodied: 0.0,
                gamma_avg: 10.0,
                eta: 0.2,
                p_nominal: 12.0,
            },
            ProportionalityInput {
                good_id: "b".into(),
                tau: 11.0,
                theta: 0.0,
                embodied: 0.0,
                gamma_avg: 10.0,
                eta: 0.1,
                p_nominal: 11.0,
            },
            ProportionalityInput {
                good_id: "c".into(),
                tau: 5.0,
                theta: 0.0,
                embodied: 0.0,
                gamma_avg: 5.0,
                eta: 0.0,
                p_nominal: 5.0,
            },
        ];
        let r = proportionality_report(&goods, tau_s).unwrap();
        let ab = &r.pairs[0];
        assert!(ab.price_ratio > ab.embodied_ratio);
        assert!(r.identity_residuals.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn degenerate_fit() {
        let g = ProportionalityInput {
            good_id: "a".into(),
            tau: 1.0,
            theta: 0.0,
            embodied: 0.0,
            gamma_avg: 1.0,
            eta: 0.0,
            p_nominal: 1.0,
        };
        assert!(matches!(proportionality_report(std::slice::from_ref(&g), 1.0), Err(EconError::DegenerateFit(_))));
        assert!(matches!(proportionality_report(&[g.clone(), g], 1.0), Err(EconError::DegenerateFit(_))));
    }
}
