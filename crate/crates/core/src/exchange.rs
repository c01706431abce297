//! Exchange between solved agents: marginal energy transfer curves, gains
//! from trade, bilateral trade and multilateral tâtonnement.
//!
//! Every curve maps an agent's produced quantity of one good to its marginal
//! energy transfer. Trade is single-period and good by good; an agent's
//! curve for one good does not move when it trades another.

use serde::{Deserialize, Serialize};

use crate::equilibrium::AutarkyEquilibrium;
use crate::error::{EconError, Result};
use crate::model::Economy;
use crate::producer::{solve_transfer_min, ProducerProblem};

/// Slack allowed when checking that sampled curves do not decrease.
const MONOTONE_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum CurveShape {
    Constant {
        tau: f64,
    },
    /// `tau(q) = intercept + slope q`.
    Linear {
        intercept: f64,
        slope: f64,
    },
    /// Piecewise linear through the samples, extended linearly past the
    /// last one with the final segment's slope.
    Sampled {
        q: Vec<f64>,
        tau: Vec<f64>,
    },
}

/// Marginal energy transfer as a function of produced quantity (Joules/unit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetcCurve {
    pub good: String,
    #[serde(flatten)]
    pub shape: CurveShape,
}

impl MetcCurve {
    pub fn constant(good: &str, tau: f64) -> Self {
        Self { good: good.into(), shape: CurveShape::Constant { tau } }
    }

    pub fn linear(good: &str, intercept: f64, slope: f64) -> Result<Self> {
        if !(slope >= 0.0) || !intercept.is_finite() {
            return Err(EconError::Domain(format!("curve for '{good}' must be finite and non-decreasing")));
        }
        Ok(Self { good: good.into(), shape: CurveShape::Linear { intercept, slope } })
    }

    /// Sampled curve; `q` must start at zero and increase strictly. Small
    /// decreases from solver noise are flattened.
    pub fn sampled(good: &str, q: Vec<f64>, mut tau: Vec<f64>) -> Result<Self> {
        if q.len() < 2 || q.len() != tau.len() {
            return Err(EconError::Domain(format!("curve for '{good}' needs at least two matching samples")));
        }
        if q[0] != 0.0 || q.windows(2).any(|w| !(w[1] > w[0])) || tau.iter().any(|t| !t.is_finite()) {
            return Err(EconError::Domain(format!("curve samples for '{good}' must start at 0 and increase")));
        }
        for i in 1..tau.len() {
            if tau[i] < tau[i - 1] {
                if tau[i - 1] - tau[i] > MONOTONE_SLACK * (1.0 + tau[i - 1].abs()) {
                    return Err(EconError::Domain(format!("marginal transfer of '{good}' decreases at q = {}", q[i])));
                }
                tau[i] = tau[i - 1];
            }
        }
        Ok(Self { good: good.into(), shape: CurveShape::Sampled { q, tau } })
    }

    pub fn tau(&self, q: f64) -> f64 {
        match &self.shape {
            CurveShape::Constant { tau } => *tau,
            CurveShape::Linear { intercept, slope } => intercept + slope * q,
            CurveShape::Sampled { q: qs, tau } => {
                let i = segment(qs, q);
                let w = (q - qs[i]) / (qs[i + 1] - qs[i]);
                tau[i] + w * (tau[i + 1] - tau[i])
            }
        }
    }

    /// `int_a^b tau(q) dq`, exact for every shape.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        if b < a {
            return -self.integral(b, a);
        }
        match &self.shape {
            CurveShape::Constant { tau } => tau * (b - a),
            CurveShape::Linear { .. } => 0.5 * (self.tau(a) + self.tau(b)) * (b - a),
            CurveShape::Sampled { q: qs, .. } => {
                let mut points = vec![a];
                points.extend(qs.iter().copied().filter(|x| *x > a && *x < b));
                points.push(b);
                points.windows(2).map(|w| 0.5 * (self.tau(w[0]) + self.tau(w[1])) * (w[1] - w[0])).sum()
            }
        }
    }

    /// Output at which the marginal transfer reaches `p`: zero when even the
    /// first unit costs more, infinite when the curve never gets there.
    pub fn quantity_at(&self, p: f64) -> f64 {
        if self.tau(0.0) >= p {
            return 0.0;
        }
        match &self.shape {
            CurveShape::Constant { .. } => f64::INFINITY,
            CurveShape::Linear { intercept, slope } => {
                if *slope > 0.0 {
                    (p - intercept) / slope
                } else {
                    f64::INFINITY
                }
            }
            CurveShape::Sampled { q: qs, tau } => {
                // First segment whose upper end reaches `p`.
                match (1..qs.len()).find(|&i| tau[i] >= p) {
                    Some(i) => qs[i - 1] + (p - tau[i - 1]) / (tau[i] - tau[i - 1]) * (qs[i] - qs[i - 1]),
                    None => {
                        let n = qs.len() - 1;
                        let slope = (tau[n] - tau[n - 1]) / (qs[n] - qs[n - 1]);
                        if slope > 0.0 {
                            qs[n] + (p - tau[n]) / slope
                        } else {
                            f64::INFINITY
                        }
                    }
                }
            }
        }
    }

    /// Right derivative of the curve at `q`.
    pub fn slope(&self, q: f64) -> f64 {
        match &self.shape {
            CurveShape::Constant { .. } => 0.0,
            CurveShape::Linear { slope, .. } => *slope,
            CurveShape::Sampled { q: qs, tau } => {
                let i = segment(qs, q);
                let i = if q >= qs[i + 1] && i + 2 < qs.len() { i + 1 } else { i };
                (tau[i + 1] - tau[i]) / (qs[i + 1] - qs[i])
            }
        }
    }

    /// `int_{p_lo}^{p_hi} quantity_at(p) dp` by parts, exact for every shape.
    pub fn supply_integral(&self, p_lo: f64, p_hi: f64) -> f64 {
        if p_hi < p_lo {
            return -self.supply_integral(p_hi, p_lo);
        }
        let floor = self.tau(0.0);
        if p_hi <= floor {
            return 0.0;
        }
        let lo = p_lo.max(floor);
        let (a, b) = (self.quantity_at(lo), self.quantity_at(p_hi));
        if !(a.is_finite() && b.is_finite()) {
            return f64::INFINITY;
        }
        b * p_hi - a * lo - self.integral(a, b)
    }
}

/// Index of the sample segment containing `q`, clamped to the end segments.
fn segment(qs: &[f64], q: f64) -> usize {
    let n = qs.len();
    match qs.iter().position(|x| *x > q) {
        Some(0) => 0,
        Some(i) => (i - 1).min(n - 2),
        None => n - 2,
    }
}

/// One agent's side of one good: its curve and autarkic output, which is
/// also its autarkic consumption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentGood {
    pub curve: MetcCurve,
    pub autarky: f64,
}

impl AgentGood {
    pub fn autarky_tau(&self) -> f64 {
        self.curve.tau(self.autarky)
    }
}

/// How consumption reacts to the post-trade marginal transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConsumptionMode {
    /// Consumption stays at its autarkic level.
    #[default]
    FixedConsumption,
    /// Demand follows `U_f / lambda = tau` with the agent's autarkic lambda,
    /// so consumption scales with `tau_autarky / tau`.
    ResolveDemand,
}

impl ConsumptionMode {
    fn demand(self, side: &AgentGood, p: f64) -> f64 {
        match self {
            ConsumptionMode::FixedConsumption => side.autarky,
            ConsumptionMode::ResolveDemand => side.autarky * side.autarky_tau() / p,
        }
    }

    /// `int_{p_lo}^{p_hi} demand(p) dp`.
    fn demand_integral(self, side: &AgentGood, p_lo: f64, p_hi: f64) -> f64 {
        match self {
            ConsumptionMode::FixedConsumption => side.autarky * (p_hi - p_lo),
            ConsumptionMode::ResolveDemand => side.autarky * side.autarky_tau() * (p_hi / p_lo).ln(),
        }
    }

    /// `d demand / dp`.
    fn demand_slope(self, side: &AgentGood, p: f64) -> f64 {
        match self {
            ConsumptionMode::FixedConsumption => 0.0,
            ConsumptionMode::ResolveDemand => -self.demand(side, p) / p,
        }
    }
}

/// Gains from trade between two agents when agent 1 sends `q_b` units of
/// good B to agent 2 and receives `q_c` units of good C, consumption held
/// fixed: savings of the importers minus extra spending of the exporters,
/// minus transaction costs `tc` (Joules). Sides are `[agent 1, agent 2]`.
pub fn gains_from_trade(b: [&AgentGood; 2], c: [&AgentGood; 2], q_b: f64, q_c: f64, tc: f64) -> f64 {
    let good_b =
        b[1].curve.integral(b[1].autarky - q_b, b[1].autarky) - b[0].curve.integral(b[0].autarky, b[0].autarky + q_b);
    let good_c =
        c[0].curve.integral(c[0].autarky - q_c, c[0].autarky) - c[1].curve.integral(c[1].autarky, c[1].autarky + q_c);
    good_b + good_c - tc
}

/// Outcome of trade in one good.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoodTrade {
    pub good: String,
    /// Transfer level the exporters face (Joules/unit); importers face it
    /// plus the marginal transaction cost.
    pub market_tau: f64,
    pub autarky_tau: Vec<f64>,
    /// Marginal transfer at each agent's post-trade output.
    pub post_tau: Vec<f64>,
    pub production: Vec<f64>,
    pub consumption: Vec<f64>,
    /// Production minus consumption; positive for exporters.
    pub net_exports: Vec<f64>,
    /// Energy released to each agent, valued at the prices it faces.
    pub gains: Vec<f64>,
    pub transaction_cost: f64,
    /// True when autarkic transfers are too close for trade to pay.
    pub no_gains: bool,
}

impl GoodTrade {
    /// Spread of post-trade marginal transfers over agents still producing.
    pub fn spread(&self) -> f64 {
        let active: Vec<f64> =
            self.post_tau.iter().zip(&self.production).filter(|(_, q)| **q > 0.0).map(|(t, _)| *t).collect();
        let hi = active.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = active.iter().copied().fold(f64::INFINITY, f64::min);
        if active.is_empty() {
            0.0
        } else {
            hi - lo
        }
    }

    pub fn total_gains(&self) -> f64 {
        self.gains.iter().sum()
    }
}

/// Rate of exchange between two goods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommodityPrice {
    pub good_b: String,
    pub good_c: String,
    /// Units of B per unit of C, `tau_C / tau_B` at the market levels.
    pub price: f64,
    /// Agents' autarkic ratios `tau_C / tau_B`, lowest first; present only
    /// when the two goods flow in opposite directions between two agents.
    pub reservation: Option<(f64, f64)>,
}

impl CommodityPrice {
    pub fn within_reservation(&self, rel_tol: f64) -> Option<bool> {
        self.reservation.map(|(lo, hi)| self.price >= lo * (1.0 - rel_tol) && self.price <= hi * (1.0 + rel_tol))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeOutcome {
    pub mode: ConsumptionMode,
    pub goods: Vec<GoodTrade>,
    pub commodity_prices: Vec<CommodityPrice>,
    /// Total gains from trade (Joules).
    pub gains: f64,
    pub transaction_cost: f64,
    pub iterations: usize,
}

impl TradeOutcome {
    fn new(mode: ConsumptionMode, goods: Vec<GoodTrade>, iterations: usize) -> Self {
        let commodity_prices = commodity_prices(&goods);
        let gains = goods.iter().map(GoodTrade::total_gains).sum();
        let transaction_cost = goods.iter().map(|g| g.transaction_cost).sum();
        Self { mode, goods, commodity_prices, gains, transaction_cost, iterations }
    }

    pub fn max_spread(&self) -> f64 {
        self.goods.iter().map(GoodTrade::spread).fold(0.0, f64::max)
    }
}

fn commodity_prices(goods: &[GoodTrade]) -> Vec<CommodityPrice> {
    let mut out = Vec::new();
    for (i, b) in goods.iter().enumerate() {
        for c in &goods[i + 1..] {
            let opposite = b.net_exports.len() == 2
                && b.net_exports[0] * c.net_exports[0] < 0.0
                && b.net_exports[1] * c.net_exports[1] < 0.0;
            let reservation = opposite.then(|| {
                let r: Vec<f64> = (0..2).map(|a| c.autarky_tau[a] / b.autarky_tau[a]).collect();
                (r[0].min(r[1]), r[0].max(r[1]))
            });
            out.push(CommodityPrice {
                good_b: b.good.clone(),
                good_c: c.good.clone(),
                price: c.market_tau / b.market_tau,
                reservation,
            });
        }
    }
    out
}

fn check_goods(agents: &[Vec<AgentGood>]) -> Result<usize> {
    let n_goods = agents.first().map_or(0, Vec::len);
    if agents.len() < 2 {
        return Err(EconError::Domain("exchange needs at least two agents".into()));
    }
    for side in agents {
        if side.len() != n_goods {
            return Err(EconError::Domain("every agent needs a curve for every good".into()));
        }
        for (g, s) in side.iter().enumerate() {
            if s.curve.good != agents[0][g].curve.good {
                return Err(EconError::Domain(format!(
                    "good {g} is '{}' for one agent and '{}' for another",
                    agents[0][g].curve.good, s.curve.good
                )));
            }
            if !(s.autarky >= 0.0 && s.autarky.is_finite()) || !(s.autarky_tau() > 0.0) {
                return Err(EconError::Domain(format!(
                    "autarkic output and marginal transfer of '{}' must be positive",
                    s.curve.good
                )));
            }
        }
    }
    Ok(n_goods)
}

/// Settles one good at exporter level `p` (importers face `p + mtc`) and
/// computes each agent's gains. `exporters[a]` marks agents facing `p`.
fn settle(
    sides: &[&AgentGood],
    exporters: &[bool],
    p: f64,
    mtc: f64,
    mode: ConsumptionMode,
    no_gains: bool,
) -> GoodTrade {
    let n = sides.len();
    let faced: Vec<f64> = (0..n).map(|a| if exporters[a] { p } else { p + mtc }).collect();
    let consumption: Vec<f64> = (0..n).map(|a| mode.demand(sides[a], faced[a])).collect();
    let mut production: Vec<f64> = (0..n).map(|a| sides[a].curve.quantity_at(faced[a])).collect();
    // Whatever the price search leaves unmatched is booked to the largest
    // producer so exports and imports balance.
    let excess: f64 = consumption.iter().sum::<f64>() - production.iter().sum::<f64>();
    if let Some(big) = (0..n).reduce(|a, b| if production[b] > production[a] { b } else { a }) {
        production[big] = (production[big] + excess).max(0.0);
    }
    let net_exports: Vec<f64> = (0..n).map(|a| production[a] - consumption[a]).collect();
    let gains = (0..n)
        .map(|a| {
            let t0 = sides[a].autarky_tau();
            mode.demand_integral(sides[a], faced[a], t0) + sides[a].curve.supply_integral(t0, faced[a])
        })
        .collect();
    let shipped: f64 = net_exports.iter().filter(|x| **x > 0.0).sum();
    GoodTrade {
        good: sides[0].curve.good.clone(),
        market_tau: p,
        autarky_tau: sides.iter().map(|s| s.autarky_tau()).collect(),
        post_tau: (0..n).map(|a| sides[a].curve.tau(production[a])).collect(),
        production,
        consumption,
        net_exports,
        gains,
        transaction_cost: mtc * shipped,
        no_gains,
    }
}

fn no_trade(sides: &[&AgentGood], mode: ConsumptionMode) -> GoodTrade {
    let mut out = settle(sides, &vec![true; sides.len()], sides[0].autarky_tau(), 0.0, mode, true);
    let n = sides.len();
    out.production = sides.iter().map(|s| s.autarky).collect();
    out.consumption = out.production.clone();
    out.net_exports = vec![0.0; n];
    out.gains = vec![0.0; n];
    out.post_tau = out.autarky_tau.clone();
    out
}

/// Optimal trade between two agents, good by good: the agent with the lower
/// autarkic transfer exports until the importer's transfer exceeds the
/// exporter's by exactly the marginal transaction cost. Agents are
/// `[agent 1, agent 2]`, each with one entry per good; `mtc` has one entry
/// per good. Goods with no gains come back with zero trade.
pub fn optimal_bilateral_trade(agents: [&[AgentGood]; 2], mtc: &[f64], mode: ConsumptionMode) -> Result<TradeOutcome> {
    let owned = [agents[0].to_vec(), agents[1].to_vec()];
    let n_goods = check_goods(&owned)?;
    if mtc.len() != n_goods || mtc.iter().any(|m| !(*m >= 0.0)) {
        return Err(EconError::Domain("one non-negative marginal transaction cost per good".into()));
    }
    let mut goods = Vec::with_capacity(n_goods);
    let mut iterations = 0;
    for g in 0..n_goods {
        let sides = [&agents[0][g], &agents[1][g]];
        let (t0, t1) = (sides[0].autarky_tau(), sides[1].autarky_tau());
        if (t0 - t1).abs() <= mtc[g] {
            goods.push(no_trade(&sides, mode));
            continue;
        }
        let exporter = if t0 < t1 { 0 } else { 1 };
        let importer = 1 - exporter;
        let exporters: Vec<bool> = (0..2).map(|a| a == exporter).collect();
        let excess = |p: f64| -> f64 {
            let e = sides[exporter];
            let i = sides[importer];
            mode.demand(e, p) - e.curve.quantity_at(p) + mode.demand(i, p + mtc[g]) - i.curve.quantity_at(p + mtc[g])
        };
        // Excess demand falls from non-negative at the exporter's autarkic
        // transfer to non-positive where the importer's is reached.
        let (mut lo, mut hi) = (sides[exporter].autarky_tau(), sides[importer].autarky_tau() - mtc[g]);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if !(mid > lo && mid < hi) {
                break;
            }
            iterations += 1;
            if excess(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        goods.push(settle(&sides, &exporters, 0.5 * (lo + hi), mtc[g], mode, false));
    }
    Ok(TradeOutcome::new(mode, goods, iterations))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TatonnementSettings {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for TatonnementSettings {
    fn default() -> Self {
        Self { damping: 0.5, tol: 1e-12, max_iter: 10_000 }
    }
}

/// Competitive exchange among any number of agents without transaction
/// costs. Each good's transfer level moves multiplicatively with its excess
/// demand, scaled by the local slope of aggregate net supply, until every
/// producing agent's marginal transfer matches it. `agents[a][g]`.
pub fn multi_agent_tatonnement(
    agents: &[Vec<AgentGood>],
    mode: ConsumptionMode,
    settings: TatonnementSettings,
) -> Result<TradeOutcome> {
    let n_goods = check_goods(agents)?;
    let n = agents.len();
    let mut goods = Vec::with_capacity(n_goods);
    let mut iterations = 0;
    for g in 0..n_goods {
        let sides: Vec<&AgentGood> = agents.iter().map(|a| &a[g]).collect();
        let taus: Vec<f64> = sides.iter().map(|s| s.autarky_tau()).collect();
        let (lo, hi) = taus.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), t| (l.min(*t), h.max(*t)));
        if hi - lo <= settings.tol * hi {
            goods.push(no_trade(&sides, mode));
            continue;
        }
        // Start from the output-weighted mean of autarkic transfers.
        let total: f64 = sides.iter().map(|s| s.autarky).sum();
        let mut p = if total > 0.0 {
            sides.iter().zip(&taus).map(|(s, t)| s.autarky * t).sum::<f64>() / total
        } else {
            0.5 * (lo + hi)
        };
        let scale = total.max(f64::MIN_POSITIVE);
        let mut converged = false;
        for _ in 0..settings.max_iter {
            iterations += 1;
            let supply: Vec<f64> = sides.iter().map(|s| s.curve.quantity_at(p)).collect();
            let demand: f64 = sides.iter().map(|s| mode.demand(s, p)).sum();
            let excess = demand - supply.iter().sum::<f64>();
            let mismatch = sides
                .iter()
                .zip(&supply)
                .filter(|(_, q)| **q > 0.0)
                .map(|(s, q)| (s.curve.tau(*q) - p).abs() / p)
                .fold(0.0, f64::max);
            if excess.abs() <= settings.tol * scale && mismatch <= settings.tol {
                converged = true;
                break;
            }
            let supply_slope: f64 = sides
                .iter()
                .zip(&supply)
                .filter(|(_, q)| **q > 0.0)
                .map(|(s, q)| 1.0 / s.curve.slope(*q).max(f64::MIN_POSITIVE))
                .sum();
            let demand_slope: f64 = sides.iter().map(|s| mode.demand_slope(s, p)).sum();
            let response = (supply_slope - demand_slope).max(scale / p);
            let step = (settings.damping * excess / (p * response)).clamp(-0.5, 1.0);
            p *= 1.0 + step;
        }
        if !converged {
            return Err(EconError::NoConvergence {
                iterations,
                max_residual: f64::NAN,
                residuals: vec![p],
                best: vec![p],
            });
        }
        goods.push(settle(&sides, &vec![true; n], p, 0.0, mode, false));
    }
    Ok(TradeOutcome::new(mode, goods, iterations))
}

/// Samples an agent's marginal transfer curve for good `k` in `period` by
/// re-solving the producer problem with every other target held at its
/// equilibrium level, over `points` outputs from zero to twice the
/// equilibrium output plus the equilibrium output itself. Samples stop at
/// the first target above equilibrium the producer cannot meet.
pub fn metc_from_equilibrium(
    econ: &Economy,
    eq: &AutarkyEquilibrium,
    k: usize,
    period: usize,
    points: usize,
) -> Result<AgentGood> {
    let b = &eq.bundle;
    let s = &econ.settings;
    let n_pm = econ.num_prime_movers();
    let autarky = b.quantities[k][period];
    if !(autarky > 0.0) || !(b.lambda[period] > 0.0) {
        return Err(EconError::Domain(format!(
            "good '{}' is not produced in period {} with a binding budget",
            econ.goods[k].id,
            period + 1
        )));
    }
    let base = ProducerProblem {
        techs: econ.techs.clone(),
        targets: (0..econ.num_goods()).map(|j| b.quantities[j][period]).collect(),
        endowments: (0..n_pm).map(|l| b.endowment[l][period]).collect(),
        epsilon: econ.epsilon.clone(),
        lambda: b.lambda[period],
        prime_mover_ids: econ.prime_movers.iter().map(|p| p.id.clone()).collect(),
    };
    let n = points.max(2);
    let mut grid: Vec<f64> = (0..n).map(|i| 2.0 * autarky * i as f64 / (n - 1) as f64).collect();
    if !grid.contains(&autarky) {
        grid.push(autarky);
        grid.sort_by(f64::total_cmp);
    }
    let mut qs = Vec::new();
    let mut taus = Vec::new();
    for q in grid {
        let mut problem = base.clone();
        problem.targets[k] = q;
        match solve_transfer_min(&problem, s.kkt_tol, s.kkt_max_iter) {
            Ok(sol) => {
                qs.push(q);
                taus.push(sol.tau[k]);
            }
            // Near the edge of what the endowment allows the solver fails
            // or reports infeasibility; the curve ends there.
            Err(_) if q > autarky => break,
            Err(e) => return Err(e),
        }
    }
    Ok(AgentGood { curve: MetcCurve::sampled(&econ.goods[k].id, qs, taus)?, autarky })
}
