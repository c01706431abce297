//! Energy-surplus maximization, power scarcity costs, EROI identities and
//! prime-mover accumulation.

use serde::{Deserialize, Serialize};

use crate::equilibrium::discount_factors;
use crate::error::{EconError, Result};
use crate::model::Economy;
use crate::producer::{SectorGood, SectorProgram};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurplusPlan {
    /// `production[e][t]`; zero in the last period.
    pub production: Vec<Vec<f64>>,
    /// `allocations[t][e][l]`.
    pub allocations: Vec<Vec<Vec<f64>>>,
    /// Energy income net of the energy sector's direct transfers (Joules).
    pub surplus: Vec<f64>,
    /// `tau[e][t]` (Joules/unit).
    pub tau: Vec<Vec<f64>>,
    pub tau_avg: Vec<Vec<Option<f64>>>,
    pub m_eroi: Vec<Vec<Option<f64>>>,
    pub a_eroi: Vec<Vec<Option<f64>>>,
    /// Discounted surplus net of scarcity charges, in first-period Joules.
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapitalPlan {
    /// `production[l][t]`; zero in the last period.
    pub production: Vec<Vec<f64>>,
    /// `endowment[l][t]`.
    pub endowment: Vec<Vec<f64>>,
    /// `tau[l][t]` (Joules/unit).
    pub tau: Vec<Vec<f64>>,
    /// `allocations[t][l'][l]`: use of `l` building prime mover `l'`.
    pub allocations: Vec<Vec<Vec<f64>>>,
    /// Aggregate power rate per period (Watts).
    pub power: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eroi {
    pub m_eroi: f64,
    pub a_eroi: f64,
    /// Discount factor implied by `beta = 1 / mEROI`.
    pub beta: f64,
}

/// Marginal and average EROI of an energy good and the implied one-period
/// discount factor.
pub fn eroi_and_discount(delta: f64, tau: f64, tau_avg: f64) -> Result<Eroi> {
    if tau == 0.0 {
        return Err(EconError::DivisionByZero("marginal energy transfer is zero".into()));
    }
    if tau_avg == 0.0 {
        return Err(EconError::DivisionByZero("average energy transfer is zero".into()));
    }
    let m_eroi = delta / tau;
    Ok(Eroi { m_eroi, a_eroi: delta / tau_avg, beta: 1.0 / m_eroi })
}

/// Power scarcity cost per prime mover from the energy sector's marginal
/// surplus, averaged over `active` energy goods and clamped at zero.
///
/// `marginals[e][l]` is the marginal productivity of `l` in energy good `e`.
pub fn power_scarcity_cost(
    delta: &[f64],
    epsilon: &[f64],
    beta1: f64,
    marginals: &[Vec<f64>],
    active: &[bool],
) -> Vec<f64> {
    let count = active.iter().filter(|a| **a).count();
    (0..epsilon.len())
        .map(|l| {
            if count == 0 {
                return 0.0;
            }
            let sum: f64 =
                (0..delta.len()).filter(|&e| active[e]).map(|e| delta[e] * marginals[e][l] - epsilon[l]).sum();
            (beta1 * sum / count as f64).max(0.0)
        })
        .collect()
}

/// Prime-mover endowment per period from production history:
/// `x_t = sum_{i=0}^{t-1} d^i Q_{t-1-i}` with `Q_0` the initial endowment.
///
/// `produced[s-1]` is the quantity produced in period `s`; entries past
/// `horizon - 1` are ignored.
pub fn endowment_path(produced: &[f64], initial: f64, depreciation: f64, horizon: usize) -> Vec<f64> {
    let q = |s: usize| if s == 0 { initial } else { produced.get(s - 1).copied().unwrap_or(0.0) };
    (1..=horizon).map(|t| (0..t).map(|i| depreciation.powi(i as i32) * q(t - 1 - i)).sum()).collect()
}

/// Discounted scarcity-cost stream of one more unit of prime mover `l`
/// produced in period `t` (0-based): `sum_i beta_{t,i} phi_{l,t+i} d^(i-1)`.
pub fn capital_value(beta: &[Vec<f64>], phi: &[Vec<f64>], depreciation: f64, t: usize, l: usize) -> f64 {
    let horizon = phi.len();
    (1..horizon - t).map(|i| beta[t][i] * phi[t + i][l] * depreciation.powi(i as i32 - 1)).sum()
}

fn zero_surplus_plan(econ: &Economy) -> SurplusPlan {
    let t_len = econ.horizon;
    let n_e = econ.num_energy();
    let n_pm = econ.num_prime_movers();
    let mut surplus = vec![0.0; t_len];
    surplus[0] = econ.energy_goods.iter().map(|e| e.energy_content * e.initial_stock).sum();
    SurplusPlan {
        production: vec![vec![0.0; t_len]; n_e],
        allocations: vec![vec![vec![0.0; n_pm]; n_e]; t_len],
        surplus,
        tau: vec![vec![0.0; t_len]; n_e],
        tau_avg: vec![vec![None; t_len]; n_e],
        m_eroi: vec![vec![None; t_len]; n_e],
        a_eroi: vec![vec![None; t_len]; n_e],
        objective: 0.0,
    }
}

fn check_schedules(econ: &Economy, lambda: &[f64], phi: &[Vec<f64>]) -> Result<()> {
    if lambda.len() != econ.horizon || phi.len() != econ.horizon {
        return Err(EconError::Domain("schedules must cover every period".into()));
    }
    if lambda.iter().any(|l| !(*l > 0.0)) {
        return Err(EconError::Domain("lambda must be positive".into()));
    }
    if phi.iter().flatten().any(|p| !(*p >= 0.0)) {
        return Err(EconError::Domain("scarcity costs must be non-negative".into()));
    }
    Ok(())
}

/// Energy-good production that maximizes discounted surplus given marginal
/// utilities of energy, scarcity costs and per-period prime-mover
/// capacities `endowments[t][l]`.
pub fn solve_surplus_plan(
    econ: &Economy,
    lambda: &[f64],
    phi: &[Vec<f64>],
    endowments: &[Vec<f64>],
) -> Result<SurplusPlan> {
    check_schedules(econ, lambda, phi)?;
    let mut plan = zero_surplus_plan(econ);
    if econ.horizon == 1 {
        return Err(EconError::DegenerateHorizon { plan: Box::new(plan) });
    }
    let s = &econ.settings;
    let n_e = econ.num_energy();
    let delta: Vec<f64> = econ.energy_goods.iter().map(|e| e.energy_content).collect();
    let techs: Vec<_> = (0..n_e).map(|e| &econ.techs[econ.energy_index(e)]).collect();
    for t in 0..econ.horizon - 1 {
        let beta1 = lambda[t + 1] / lambda[t];
        let prices: Vec<f64> = econ.epsilon.iter().zip(&phi[t]).map(|(e, p)| e + p).collect();
        let modes = delta.iter().map(|d| SectorGood::Priced(beta1 * d)).collect();
        let program = SectorProgram::new(techs.clone(), modes, prices.clone(), Some(endowments[t].clone()));
        let sol = program.solve(s.kkt_tol, s.kkt_max_iter)?;
        for e in 0..n_e {
            let q = sol.output[e];
            plan.production[e][t] = q;
            plan.allocations[t][e] = sol.x[e].clone();
            plan.tau[e][t] = sol.tau[e];
            if q > 0.0 {
                let cost: f64 = sol.x[e].iter().zip(&prices).map(|(a, p)| a * p).sum();
                let avg = cost / q;
                plan.tau_avg[e][t] = Some(avg);
                if let Ok(r) = eroi_and_discount(delta[e], sol.tau[e], avg) {
                    plan.m_eroi[e][t] = Some(r.m_eroi);
                    plan.a_eroi[e][t] = Some(r.a_eroi);
                }
            }
        }
    }
    for t in 0..econ.horizon {
        let income: f64 = (0..n_e)
            .map(|e| {
                let prev = if t == 0 { econ.energy_goods[e].initial_stock } else { plan.production[e][t - 1] };
                delta[e] * prev
            })
            .sum();
        let spent: f64 =
            plan.allocations[t].iter().map(|x| x.iter().zip(&econ.epsilon).map(|(a, e)| a * e).sum::<f64>()).sum();
        plan.surplus[t] = income - spent;
        let charge: f64 =
            plan.allocations[t].iter().map(|x| x.iter().zip(&phi[t]).map(|(a, p)| a * p).sum::<f64>()).sum();
        plan.objective += lambda[t] / lambda[0] * (plan.surplus[t] - charge);
    }
    if let Some(t) = plan.surplus.iter().position(|e| *e < -s.residual_tol) {
        return Err(EconError::Infeasible(format!("energy sector spends more than its income in period {}", t + 1)));
    }
    Ok(plan)
}

/// Prime-mover production that maximizes the discounted scarcity-cost value
/// of future endowments net of the transfers spent building them. Periods
/// are solved in order since each period's capacity depends on earlier
/// production.
pub fn solve_capital_plan(econ: &Economy, lambda: &[f64], phi: &[Vec<f64>]) -> Result<CapitalPlan> {
    check_schedules(econ, lambda, phi)?;
    let s = &econ.settings;
    let t_len = econ.horizon;
    let n_pm = econ.num_prime_movers();
    let beta = discount_factors(lambda);
    let depreciation = econ.depreciation();
    let techs: Vec<_> = (0..n_pm).map(|l| &econ.techs[econ.prime_mover_index(l)]).collect();
    let mut production = vec![vec![0.0; t_len]; n_pm];
    let mut tau = vec![vec![0.0; t_len]; n_pm];
    let mut allocations = vec![vec![vec![0.0; n_pm]; n_pm]; t_len];
    for t in 0..t_len.saturating_sub(1) {
        let capacity: Vec<f64> = (0..n_pm)
            .map(|l| endowment_path(&production[l], econ.prime_movers[l].initial_endowment, depreciation[l], t + 1)[t])
            .collect();
        let values: Vec<f64> = (0..n_pm).map(|l| capital_value(&beta, phi, depreciation[l], t, l)).collect();
        let modes =
            values.iter().map(|v| if *v > 0.0 { SectorGood::Priced(*v) } else { SectorGood::Fixed(0.0) }).collect();
        let prices: Vec<f64> = econ.epsilon.iter().zip(&phi[t]).map(|(e, p)| e + p).collect();
        let program = SectorProgram::new(techs.clone(), modes, prices, Some(capacity));
        let sol = program.solve(s.kkt_tol, s.kkt_max_iter)?;
        for l in 0..n_pm {
            production[l][t] = sol.output[l];
            tau[l][t] = if values[l] > 0.0 { sol.tau[l] } else { 0.0 };
            allocations[t][l] = sol.x[l].clone();
        }
    }
    let endowment: Vec<Vec<f64>> = (0..n_pm)
        .map(|l| endowment_path(&production[l], econ.prime_movers[l].initial_endowment, depreciation[l], t_len))
        .collect();
    let rates = econ.power_rates();
    let power = (0..t_len).map(|t| (0..n_pm).map(|l| rates[l] * endowment[l][t]).sum()).collect();
    Ok(CapitalPlan { production, endowment, tau, allocations, power })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scarcity_cost_examples() {
        let phi = power_scarcity_cost(&[100.0], &[10.0], 0.9, &[vec![0.5]], &[true]);
        assert!((phi[0] - 36.0).abs() < 1e-12);
        let phi = power_scarcity_cost(&[100.0], &[50.0], 0.9, &[vec![0.5]], &[true]);
        assert_eq!(phi[0], 0.0);
        let phi = power_scarcity_cost(&[100.0], &[60.0], 0.9, &[vec![0.5]], &[true]);
        assert_eq!(phi[0], 0.0);
    }

    #[test]
    fn eroi_examples() {
        let r = eroi_and_discount(100.0, 50.0, 40.0).unwrap();
        assert_eq!((r.m_eroi, r.beta, r.a_eroi), (2.0, 0.5, 2.5));
        assert!(matches!(eroi_and_discount(100.0, 0.0, 1.0), Err(EconError::DivisionByZero(_))));
    }

    #[test]
    fn endowment_examples() {
        let x = endowment_path(&[0.0, 0.0], 10.0, 0.9, 3);
        assert_eq!(x[0], 10.0);
        assert!((x[1] - 9.0).abs() < 1e-12 && (x[2] - 8.1).abs() < 1e-12);
        let x = endowment_path(&[5.0], 10.0, 0.9, 2);
        assert!((x[1] - 14.0).abs() < 1e-12);
        let c = 3.0;
        let d: f64 = 0.8;
        let x = endowment_path(&[c; 6], c, d, 6);
        for (t, v) in x.iter().enumerate() {
            let n = (t + 1) as i32;
            assert!((v - c * (1.0 - d.powi(n)) / (1.0 - d)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_future_term() {
        let beta = vec![vec![1.0, 0.5], vec![1.0, 0.0]];
        let phi = vec![vec![0.0], vec![20.0]];
        assert!((capital_value(&beta, &phi, 0.9, 0, 0) - 10.0).abs() < 1e-12);
        assert_eq!(capital_value(&beta, &phi, 0.9, 1, 0), 0.0);
    }
}
