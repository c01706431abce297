//! Direct-energy-transfer minimization for given production targets and
//! prime-mover endowments, and the per-good decomposition of marginal
//! energy transfers into direct and scarcity components.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{EconError, Result};
use crate::model::{ProductionTech, TechForm};
use crate::numerics::{barrier_solve, kkt_solve, KktResiduals, SmoothProgram};

/// How a good enters a [`SectorProgram`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SectorGood {
    /// Output must reach the target.
    Fixed(f64),
    /// Output is chosen and earns this value per unit.
    Priced(f64),
}

/// One period of production: minimize `p'x - sum v_k Q_k` over allocations
/// and priced outputs, subject to `Q_k <= f_k(x_k)` and optional prime-mover
/// capacities `sum_k x_{l,k} <= cap_l`.
pub struct SectorProgram<'a> {
    techs: Vec<&'a ProductionTech>,
    modes: Vec<SectorGood>,
    prices: Vec<f64>,
    capacity: Option<Vec<f64>>,
    scale: f64,
    /// `x_index[k][l]` is the variable index of `x_{l,k}` when used.
    x_index: Vec<Vec<Option<usize>>>,
    q_index: Vec<Option<usize>>,
    cap_rows: Vec<usize>,
    dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorSolution {
    /// `x[k][l]`.
    pub x: Vec<Vec<f64>>,
    pub output: Vec<f64>,
    /// Multiplier of each good's production constraint (Joules/unit).
    pub tau: Vec<f64>,
    /// Multiplier of each capacity constraint; zero without capacities.
    pub capacity_price: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

impl<'a> SectorProgram<'a> {
    pub fn new(
        techs: Vec<&'a ProductionTech>,
        modes: Vec<SectorGood>,
        prices: Vec<f64>,
        capacity: Option<Vec<f64>>,
    ) -> Self {
        assert_eq!(techs.len(), modes.len());
        let n_pm = prices.len();
        let mut dim = 0;
        let mut x_index = Vec::with_capacity(techs.len());
        for (tech, mode) in techs.iter().zip(&modes) {
            let skip = matches!(mode, SectorGood::Fixed(q) if *q <= 0.0);
            let row = (0..n_pm)
                .map(|l| {
                    (!skip && tech.uses(l)).then(|| {
                        dim += 1;
                        dim - 1
                    })
                })
                .collect();
            x_index.push(row);
        }
        let q_index = modes
            .iter()
            .map(|m| {
                matches!(m, SectorGood::Priced(_)).then(|| {
                    dim += 1;
                    dim - 1
                })
            })
            .collect();
        let cap_rows = match &capacity {
            Some(_) => (0..n_pm).filter(|&l| x_index.iter().any(|row: &Vec<Option<usize>>| row[l].is_some())).collect(),
            None => Vec::new(),
        };
        let mean_price = prices.iter().sum::<f64>() / n_pm.max(1) as f64;
        let scale = if mean_price > 0.0 { 1.0 / mean_price } else { 1.0 };
        Self { techs, modes, prices, capacity, scale, x_index, q_index, cap_rows, dim }
    }

    fn active(&self, k: usize) -> bool {
        !matches!(self.modes[k], SectorGood::Fixed(q) if q <= 0.0)
    }

    fn alloc(&self, v: &[f64], k: usize) -> Vec<f64> {
        self.x_index[k].iter().map(|i| i.map_or(0.0, |i| v[i])).collect()
    }

    fn target(&self, v: &[f64], k: usize) -> f64 {
        match self.modes[k] {
            SectorGood::Fixed(q) => q,
            SectorGood::Priced(_) => v[self.q_index[k].expect("priced good has a variable")],
        }
    }

    fn prod_rows(&self) -> Vec<usize> {
        (0..self.techs.len()).filter(|&k| self.active(k)).collect()
    }

    /// A strictly interior starting point.
    fn start(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let n_goods = self.techs.len().max(1) as f64;
        for k in 0..self.techs.len() {
            for l in 0..self.prices.len() {
                if let Some(i) = self.x_index[k][l] {
                    let cap = self.capacity.as_ref().map_or(1.0, |c| c[l]);
                    v[i] = (0.5 * cap / n_goods).max(1e-3);
                }
            }
            if let Some(i) = self.q_index[k] {
                let x = self.alloc(&v, k);
                v[i] = (0.5 * self.techs[k].output(&x)).max(1e-6);
            }
        }
        v
    }

    /// Packs allocations `x[k][l]` into a start vector; priced outputs start
    /// at half of what the allocation produces.
    pub fn pack(&self, x: &[Vec<f64>]) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for k in 0..self.techs.len() {
            for l in 0..self.prices.len() {
                if let Some(i) = self.x_index[k][l] {
                    v[i] = x[k][l];
                }
            }
            if let Some(i) = self.q_index[k] {
                v[i] = 0.5 * self.techs[k].output(&x[k]);
            }
        }
        v
    }

    pub fn solve(&self, tol: f64, max_iter: usize) -> Result<SectorSolution> {
        self.solve_from(None, tol, max_iter)
    }

    /// Solves from `start` (a packed vector) or from the built-in start.
    pub fn solve_from(&self, start: Option<Vec<f64>>, tol: f64, max_iter: usize) -> Result<SectorSolution> {
        let n_pm = self.prices.len();
        let n_goods = self.techs.len();
        let (x, z, iterations) = if self.dim == 0 {
            (Vec::new(), Vec::new(), 0)
        } else {
            // The barrier path copes better with badly scaled targets; it
            // needs a strictly feasible start, which large targets may lack.
            let start = start.unwrap_or_else(|| self.start());
            let sol = match barrier_solve(self, &start, tol, max_iter) {
                Ok(sol) => sol,
                Err(EconError::NonFiniteEvaluation(_))
                | Err(EconError::Domain(_))
                | Err(EconError::NoConvergence { .. }) => kkt_solve(self, &start, tol, max_iter)?,
                Err(e) => return Err(e),
            };
            (sol.x, sol.inequality_multipliers, sol.iterations)
        };
        let rows = self.prod_rows();
        let mut tau = vec![0.0; n_goods];
        for (r, &k) in rows.iter().enumerate() {
            tau[k] = z[r] / self.scale;
        }
        let mut capacity_price = vec![0.0; n_pm];
        for (r, &l) in self.cap_rows.iter().enumerate() {
            capacity_price[l] = z[rows.len() + r] / self.scale;
        }
        let allocs: Vec<Vec<f64>> = (0..n_goods).map(|k| self.alloc(&x, k)).collect();
        let output = (0..n_goods)
            .map(|k| match self.modes[k] {
                SectorGood::Fixed(q) => q.max(0.0),
                SectorGood::Priced(_) => self.target(&x, k),
            })
            .collect();
        Ok(SectorSolution {
            objective: self.objective(&x) / self.scale,
            x: allocs,
            output,
            tau,
            capacity_price,
            iterations,
        })
    }
}

impl SmoothProgram for SectorProgram<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn num_inequalities(&self) -> usize {
        self.prod_rows().len() + self.cap_rows.len()
    }

    fn lower_bounds(&self) -> Vec<f64> {
        vec![0.0; self.dim]
    }

    fn objective(&self, v: &[f64]) -> f64 {
        let mut f = 0.0;
        for k in 0..self.techs.len() {
            for l in 0..self.prices.len() {
                if let Some(i) = self.x_index[k][l] {
                    f += self.prices[l] * v[i];
                }
            }
            if let (SectorGood::Priced(value), Some(i)) = (self.modes[k], self.q_index[k]) {
                f -= value * v[i];
            }
        }
        self.scale * f
    }

    fn gradient(&self, _v: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim);
        for k in 0..self.techs.len() {
            for l in 0..self.prices.len() {
                if let Some(i) = self.x_index[k][l] {
                    g[i] = self.scale * self.prices[l];
                }
            }
            if let (SectorGood::Priced(value), Some(i)) = (self.modes[k], self.q_index[k]) {
                g[i] = -self.scale * value;
            }
        }
        g
    }

    fn hessian(&self, _v: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.dim, self.dim)
    }

    fn inequalities(&self, v: &[f64]) -> DVector<f64> {
        let rows = self.prod_rows();
        let mut g = DVector::zeros(rows.len() + self.cap_rows.len());
        for (r, &k) in rows.iter().enumerate() {
            g[r] = self.target(v, k) - self.techs[k].output(&self.alloc(v, k));
        }
        if let Some(cap) = &self.capacity {
            for (r, &l) in self.cap_rows.iter().enumerate() {
                let used: f64 = self.x_index.iter().filter_map(|row| row[l]).map(|i| v[i]).sum();
                g[rows.len() + r] = used - cap[l];
            }
        }
        g
    }

    fn inequality_jacobian(&self, v: &[f64]) -> DMatrix<f64> {
        let rows = self.prod_rows();
        let mut j = DMatrix::zeros(rows.len() + self.cap_rows.len(), self.dim);
        for (r, &k) in rows.iter().enumerate() {
            let marg = self.techs[k].marginals(&self.alloc(v, k));
            for l in 0..self.prices.len() {
                if let Some(i) = self.x_index[k][l] {
                    j[(r, i)] = -marg[l];
                }
            }
            if let Some(i) = self.q_index[k] {
                j[(r, i)] = 1.0;
            }
        }
        for (r, &l) in self.cap_rows.iter().enumerate() {
            for row in &self.x_index {
                if let Some(i) = row[l] {
                    j[(rows.len() + r, i)] = 1.0;
                }
            }
        }
        j
    }

    fn inequality_hessian(&self, v: &[f64], weights: &[f64]) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.dim, self.dim);
        for (r, &k) in self.prod_rows().iter().enumerate() {
            if self.techs[k].form == TechForm::Linear || weights[r] == 0.0 {
                continue;
            }
            let hk = self.techs[k].hessian(&self.alloc(v, k));
            for a in 0..self.prices.len() {
                for b in 0..self.prices.len() {
                    if let (Some(i), Some(j)) = (self.x_index[k][a], self.x_index[k][b]) {
                        h[(i, j)] -= weights[r] * hk[(a, b)];
                    }
                }
            }
        }
        h
    }
}

// ---------------------------------------------------------------------------
// Transfer minimization

/// One period of the producer's problem.
#[derive(Debug, Clone)]
pub struct ProducerProblem {
    pub techs: Vec<ProductionTech>,
    /// Output targets per good.
    pub targets: Vec<f64>,
    /// Prime-mover endowments.
    pub endowments: Vec<f64>,
    pub epsilon: Vec<f64>,
    /// Marginal utility of energy in this period. It cancels from the
    /// first-order conditions and is only checked for positivity.
    pub lambda: f64,
    /// Prime-mover ids, used to break ties between equally cheap inputs.
    pub prime_mover_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProducerSolution {
    /// `x[k][l]`.
    pub x: Vec<Vec<f64>>,
    pub tau: Vec<f64>,
    pub phi: Vec<f64>,
    /// Total direct energy transfer `eps'x`.
    pub objective: f64,
    pub residuals: KktResiduals,
}

/// Minimum marginal cost of the first unit at fixed factor prices.
pub fn marginal_cost_at_zero(tech: &ProductionTech, prices: &[f64]) -> f64 {
    match tech.form {
        TechForm::Linear => {
            tech.inputs().map(|l| prices[l] / (tech.scale * tech.alpha[l])).fold(f64::INFINITY, f64::min)
        }
        TechForm::CobbDouglas => {
            let r = tech.returns_to_scale();
            if r < 1.0 - 1e-12 {
                0.0
            } else {
                tech.inputs().map(|l| (prices[l] / tech.alpha[l]).powf(tech.alpha[l])).product::<f64>() / tech.scale
            }
        }
    }
}

impl ProducerProblem {
    fn check(&self) -> Result<()> {
        let n_pm = self.epsilon.len();
        if self.techs.len() != self.targets.len()
            || self.endowments.len() != n_pm
            || self.prime_mover_ids.len() != n_pm
            || self.techs.iter().any(|t| t.alpha.len() != n_pm)
        {
            return Err(EconError::Domain("producer problem dimensions disagree".into()));
        }
        if !(self.lambda > 0.0) {
            return Err(EconError::Domain("lambda must be positive".into()));
        }
        if self.targets.iter().chain(&self.endowments).any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(EconError::Domain("targets and endowments must be finite and non-negative".into()));
        }
        for (k, (tech, q)) in self.techs.iter().zip(&self.targets).enumerate() {
            if *q > 0.0 && tech.output(&self.endowments) < *q {
                return Err(EconError::Infeasible(format!(
                    "target {q} of good {k} exceeds what the whole endowment can produce"
                )));
            }
        }
        Ok(())
    }

    /// Residuals of the transfer-minimization conditions, relative to the
    /// scale of each condition: reduced costs are divided by the input price
    /// `epsilon + phi`, quantities by one plus their reference amount.
    pub fn residuals(&self, x: &[Vec<f64>], tau: &[f64], phi: &[f64]) -> KktResiduals {
        let n_pm = self.epsilon.len();
        let mut r = KktResiduals::default();
        for (k, tech) in self.techs.iter().enumerate() {
            if self.targets[k] <= 0.0 {
                continue;
            }
            let out = tech.output(&x[k]);
            let marg = tech.marginals(&x[k]);
            let shortfall = (self.targets[k] - out) / (1.0 + self.targets[k]);
            r.primal = r.primal.max(shortfall);
            r.dual = r.dual.max(-tau[k]);
            r.complementarity = r.complementarity.max(shortfall.abs() * tau[k].abs() / (1.0 + tau[k].abs()));
            for l in tech.inputs() {
                // A positive reduced cost is the bound multiplier of x >= 0,
                // which must vanish where the input is used.
                let price = self.epsilon[l] + phi[l];
                let reduced = (price - tau[k] * marg[l]) / price;
                r.stationarity = r.stationarity.max((-reduced).max(0.0));
                r.complementarity = r.complementarity.max(reduced.max(0.0) * x[k][l] / (1.0 + self.endowments[l]));
            }
        }
        for l in 0..n_pm {
            let used: f64 = x.iter().map(|row| row[l]).sum();
            let slack = (self.endowments[l] - used) / (1.0 + self.endowments[l]);
            r.primal = r.primal.max(-slack);
            r.dual = r.dual.max(-phi[l]);
            r.complementarity = r.complementarity.max((phi[l] / (self.epsilon[l] + phi[l]) * slack).abs());
        }
        r.primal = r.primal.max(0.0);
        r
    }
}

/// Solves one period of the transfer-minimization problem.
pub fn solve_transfer_min(p: &ProducerProblem, tol: f64, max_iter: usize) -> Result<ProducerSolution> {
    solve_transfer_min_from(p, None, tol, max_iter)
}

/// As [`solve_transfer_min`], optionally starting from allocations
/// `start[k][l]`, which should be strictly feasible.
pub fn solve_transfer_min_from(
    p: &ProducerProblem,
    start: Option<&[Vec<f64>]>,
    tol: f64,
    max_iter: usize,
) -> Result<ProducerSolution> {
    p.check()?;
    let n_pm = p.epsilon.len();
    let modes = p.targets.iter().map(|q| SectorGood::Fixed(*q)).collect();
    let program = SectorProgram::new(p.techs.iter().collect(), modes, p.epsilon.clone(), Some(p.endowments.clone()));
    let sol = match program.solve_from(start.map(|x| program.pack(x)), tol, max_iter) {
        Ok(s) => s,
        Err(EconError::NoConvergence { residuals, iterations, max_residual, best }) => {
            // Residual order is stationarity, primal, dual, complementarity.
            if residuals.get(1).is_some_and(|p| *p > 1e-6) {
                return Err(EconError::Infeasible(format!(
                    "targets not reachable with the endowment (primal residual {:e})",
                    residuals[1]
                )));
            }
            return Err(EconError::NoConvergence { iterations, max_residual, residuals, best });
        }
        Err(e) => return Err(e),
    };
    let mut x = sol.x;
    let phi = sol.capacity_price;
    let mut tau = sol.tau;
    for (k, tech) in p.techs.iter().enumerate() {
        if p.targets[k] <= 0.0 {
            let prices: Vec<f64> = (0..n_pm).map(|l| p.epsilon[l] + phi[l]).collect();
            tau[k] = marginal_cost_at_zero(tech, &prices);
        }
    }
    break_linear_ties(p, &mut x, &tau, &phi, tol.max(1e-9));
    let objective = x.iter().map(|row| row.iter().zip(&p.epsilon).map(|(a, e)| a * e).sum::<f64>()).sum();
    let residuals = p.residuals(&x, &tau, &phi);
    Ok(ProducerSolution { x, tau, phi, objective, residuals })
}

/// Moves output of linear technologies toward the lexicographically first of
/// several equally cheap prime movers. Only unpriced (non-scarce) inputs are
/// touched so every multiplier stays valid.
fn break_linear_ties(p: &ProducerProblem, x: &mut [Vec<f64>], tau: &[f64], phi: &[f64], tol: f64) {
    let n_pm = p.epsilon.len();
    let mut order: Vec<usize> = (0..n_pm).collect();
    order.sort_by(|a, b| p.prime_mover_ids[*a].cmp(&p.prime_mover_ids[*b]));
    for (k, tech) in p.techs.iter().enumerate() {
        if tech.form != TechForm::Linear || p.targets[k] <= 0.0 {
            continue;
        }
        let tied: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&l| {
                tech.uses(l)
                    && phi[l].abs() <= tol
                    && (tau[k] * tech.scale * tech.alpha[l] - p.epsilon[l]).abs() <= tol * (1.0 + p.epsilon[l])
            })
            .collect();
        if tied.len() < 2 {
            continue;
        }
        let mut remaining: f64 = tied.iter().map(|&l| tech.scale * tech.alpha[l] * x[k][l]).sum();
        for &l in &tied {
            let others: f64 = (0..x.len()).filter(|&j| j != k).map(|j| x[j][l]).sum();
            let room = (p.endowments[l] - others).max(0.0);
            let rate = tech.scale * tech.alpha[l];
            let take = (remaining / rate).min(room);
            x[k][l] = take;
            remaining -= take * rate;
        }
    }
}

/// Solves every period of a multi-period producer problem independently.
pub fn solve_transfer_min_path(
    periods: &[ProducerProblem],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<ProducerSolution>> {
    periods.iter().map(|p| solve_transfer_min(p, tol, max_iter)).collect()
}

// ---------------------------------------------------------------------------
// Decomposition

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferDecomposition {
    /// Direct-transfer component (Joules/unit).
    pub psi: f64,
    /// Power-scarcity component (Joules/unit).
    pub theta: f64,
    pub tau: f64,
    pub tau_avg: f64,
    /// Quantity elasticity of the average transfer.
    pub mu: f64,
    /// Prime movers the averages run over (those with positive use).
    pub used_prime_movers: Vec<usize>,
    /// False when some prime mover is idle for this good, so the averages do
    /// not cover every prime mover type.
    pub all_prime_movers_used: bool,
}

/// Share of a good's total input below which a prime mover counts as unused.
const USE_THRESHOLD: f64 = 1e-9;

/// Cost-minimizing allocation for output `q` of one good at fixed factor
/// prices, in closed form. Linear ties go to the lowest input index.
pub fn cost_min_allocation(tech: &ProductionTech, prices: &[f64], q: f64) -> Vec<f64> {
    let mut x = vec![0.0; tech.alpha.len()];
    match tech.form {
        TechForm::Linear => {
            let unit = |l: usize| prices[l] / (tech.scale * tech.alpha[l]);
            if let Some(best) = tech.inputs().reduce(|a, b| if unit(b) < unit(a) { b } else { a }) {
                x[best] = q / (tech.scale * tech.alpha[best]);
            }
        }
        TechForm::CobbDouglas => {
            let r = tech.returns_to_scale();
            let factor: f64 = tech.inputs().map(|l| (prices[l] / tech.alpha[l]).powf(tech.alpha[l] / r)).product();
            let cost = r * (q / tech.scale).powf(1.0 / r) * factor;
            for l in tech.inputs() {
                x[l] = tech.alpha[l] * cost / (r * prices[l]);
            }
        }
    }
    x
}

/// Average cost per unit of producing `q > 0` of one good at fixed prices.
pub fn average_cost_at_prices(tech: &ProductionTech, prices: &[f64], q: f64) -> f64 {
    cost_min_allocation(tech, prices, q).iter().zip(prices).map(|(a, p)| a * p).sum::<f64>() / q
}

/// Decomposes one good's marginal transfer at an optimum with allocation
/// `x` (one entry per prime mover), output `q` and multipliers `tau`, `phi`.
pub fn decompose_good(
    tech: &ProductionTech,
    x: &[f64],
    q: f64,
    tau: f64,
    epsilon: &[f64],
    phi: &[f64],
    step: f64,
) -> Result<TransferDecomposition> {
    let total: f64 = x.iter().sum();
    let used: Vec<usize> = tech.inputs().filter(|&l| x[l] > USE_THRESHOLD * total.max(f64::MIN_POSITIVE)).collect();
    if used.is_empty() || !(q > 0.0) {
        return Err(EconError::Domain("decomposition needs positive output".into()));
    }
    let eval = tech.eval(x)?;
    let n = used.len() as f64;
    let mut psi = 0.0;
    let mut theta = 0.0;
    for &l in &used {
        let g = eval.requirements[l].ok_or(EconError::NonFiniteMarginal { input: l })?;
        psi += epsilon[l] * g;
        theta += phi[l] * g;
    }
    psi /= n;
    theta /= n;
    let prices: Vec<f64> = epsilon.iter().zip(phi).map(|(e, p)| e + p).collect();
    let tau_avg = x.iter().zip(&prices).map(|(a, p)| a * p).sum::<f64>() / q;
    let up = average_cost_at_prices(tech, &prices, q * (1.0 + step));
    let down = average_cost_at_prices(tech, &prices, q * (1.0 - step));
    let mu = (up.ln() - down.ln()) / ((1.0 + step).ln() - (1.0 - step).ln());
    Ok(TransferDecomposition {
        psi,
        theta,
        tau,
        tau_avg,
        mu,
        all_prime_movers_used: used.len() == tech.alpha.len(),
        used_prime_movers: used,
    })
}

/// Decomposes every good with a positive target in a producer solution.
pub fn decompose_marginal_transfer(
    p: &ProducerProblem,
    sol: &ProducerSolution,
    step: f64,
) -> Result<Vec<Option<TransferDecomposition>>> {
    p.techs
        .iter()
        .enumerate()
        .map(|(k, tech)| {
            if p.targets[k] <= 0.0 {
                return Ok(None);
            }
            decompose_good(tech, &sol.x[k], p.targets[k], sol.tau[k], &p.epsilon, &sol.phi, step).map(Some)
        })
        .collect()
}
