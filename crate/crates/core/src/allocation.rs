//! Assignment of energy surplus to final goods and the over-assignment
//! multiplier that reconciles assignments with marginal transfers.

use serde::{Deserialize, Serialize};

use crate::error::{EconError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    /// `assignments[f][t]` (Joules/unit).
    pub assignments: Vec<Vec<f64>>,
    /// Over-assignment per period, in `[0, 1)`.
    pub over_assignment: Vec<f64>,
    /// `output[f][t]`.
    pub output: Vec<Vec<f64>>,
    /// `(1 - theta_t) * assignments[f][t]`.
    pub effective: Vec<Vec<f64>>,
}

/// Agreement required between the over-assignments implied by each good.
const THETA_AGREEMENT: f64 = 1e-9;

/// Scales the desired final-good outputs down to what the surplus covers
/// and recovers the over-assignment `theta_t` from `(1 - theta) Lambda = tau`.
///
/// All matrices are indexed `[f][t]`; goods with zero desired output in a
/// period take no part in that period's reconciliation.
pub fn allocate_surplus(
    surplus: &[f64],
    tau: &[Vec<f64>],
    requested: &[Vec<f64>],
    desired: &[Vec<f64>],
) -> Result<AllocationPlan> {
    let n_f = tau.len();
    let horizon = surplus.len();
    if requested.len() != n_f || desired.len() != n_f {
        return Err(EconError::Domain("allocation inputs disagree in goods".into()));
    }
    let mut plan = AllocationPlan {
        assignments: requested.to_vec(),
        over_assignment: vec![0.0; horizon],
        output: vec![vec![0.0; horizon]; n_f],
        effective: vec![vec![0.0; horizon]; n_f],
    };
    for t in 0..horizon {
        let active: Vec<usize> = (0..n_f).filter(|&f| desired[f][t] > 0.0).collect();
        if active.is_empty() {
            continue;
        }
        if !(surplus[t] > 0.0) {
            return Err(EconError::InsufficientSurplus { period: t + 1 });
        }
        for &f in &active {
            if !(tau[f][t] > 0.0) || !(requested[f][t] > 0.0) {
                return Err(EconError::Domain(format!(
                    "marginal transfer and assignment must be positive (good {f}, period {})",
                    t + 1
                )));
            }
        }
        let implied: Vec<f64> = active.iter().map(|&f| 1.0 - tau[f][t] / requested[f][t]).collect();
        let lo = implied.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = implied.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo > THETA_AGREEMENT * (1.0 + hi.abs()) || lo < -THETA_AGREEMENT || hi >= 1.0 {
            return Err(EconError::InconsistentAssignments { period: t + 1, implied });
        }
        let theta = (implied.iter().sum::<f64>() / implied.len() as f64).max(0.0);
        plan.over_assignment[t] = theta;
        let planned: f64 = active.iter().map(|&f| requested[f][t] * desired[f][t]).sum();
        let shrink = (surplus[t] / planned).min(1.0);
        for f in 0..n_f {
            plan.effective[f][t] = (1.0 - theta) * requested[f][t];
            if desired[f][t] > 0.0 {
                plan.output[f][t] = desired[f][t] * shrink;
            }
        }
    }
    Ok(plan)
}

/// Residual `(1 - theta) Lambda - U_f / lambda` per good and period; `None`
/// where the marginal utility of energy is zero or the good is not produced.
pub fn effective_assignment_check(
    plan: &AllocationPlan,
    marginal_utility: &[Vec<f64>],
    lambda: &[f64],
) -> Vec<Vec<Option<f64>>> {
    plan.effective
        .iter()
        .enumerate()
        .map(|(f, row)| {
            row.iter()
                .enumerate()
                .map(|(t, eff)| {
                    (lambda[t] > 0.0 && plan.output[f][t] > 0.0).then(|| eff - marginal_utility[f][t] / lambda[t])
                })
                .collect()
        })
        .collect()
}
