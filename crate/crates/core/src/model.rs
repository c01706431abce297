//! Goods, prime movers, technologies and utility, plus scenario validation.
//!
//! Goods are indexed in one list ordered final goods, then energy goods, then
//! prime movers. Every good has exactly one technology whose inputs are
//! prime-mover services.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{EconError, Result};
use crate::money::{MoneySpec, SyntheticAccount};
use crate::numerics::SolverSettings;

/// Length of one planning period in seconds; with unit periods the direct
/// energy transfer of a prime mover equals its power rate numerically.
pub const PERIOD_LENGTH: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrimeMoverSpec {
    pub id: String,
    /// Joules per unit-period; defaults to `power_rate * PERIOD_LENGTH`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// Watts.
    pub power_rate: f64,
    /// Survival factor per period.
    pub depreciation: f64,
    pub initial_endowment: f64,
    /// Joules spent building one unit of the initial endowment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub build_energy: Option<f64>,
}

impl PrimeMoverSpec {
    pub fn epsilon(&self) -> f64 {
        self.epsilon.unwrap_or(self.power_rate * PERIOD_LENGTH)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyGoodSpec {
    pub id: String,
    /// Joules per unit.
    pub energy_content: f64,
    pub initial_stock: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinalGoodSpec {
    pub id: String,
    /// Utility weight per period.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TechForm {
    Linear,
    CobbDouglas,
}

/// Technology as written in a scenario file: coefficients keyed by prime
/// mover id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TechnologySpec {
    pub good: String,
    pub form: TechForm,
    pub scale: f64,
    pub coefficients: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityForm {
    #[default]
    WeightedLog,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilitySpec {
    pub form: UtilityForm,
}

/// Full static description of one agent's economy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EconomyScenario {
    pub horizon: usize,
    pub prime_movers: Vec<PrimeMoverSpec>,
    pub energy_goods: Vec<EnergyGoodSpec>,
    pub final_goods: Vec<FinalGoodSpec>,
    pub technologies: Vec<TechnologySpec>,
    #[serde(default)]
    pub utility: UtilitySpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub money: Option<MoneySpec>,
    #[serde(default)]
    pub solver: SolverSettings,
    /// Constructed per-good accounts for price reports that bypass solving.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic_accounts: Option<Vec<SyntheticAccount>>,
}

// ---------------------------------------------------------------------------
// Production

/// A production technology with coefficients in prime-mover order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductionTech {
    pub form: TechForm,
    pub scale: f64,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProductionEval {
    pub output: f64,
    /// Marginal productivity per prime mover.
    pub marginals: Vec<f64>,
    /// Marginal requirement `1/f_l` for inputs the technology uses.
    pub requirements: Vec<Option<f64>>,
}

impl ProductionTech {
    pub fn linear(scale: f64, alpha: Vec<f64>) -> Self {
        Self { form: TechForm::Linear, scale, alpha }
    }

    pub fn cobb_douglas(scale: f64, alpha: Vec<f64>) -> Self {
        Self { form: TechForm::CobbDouglas, scale, alpha }
    }

    pub fn uses(&self, input: usize) -> bool {
        self.alpha[input] > 0.0
    }

    pub fn inputs(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.alpha.len()).filter(|&l| self.alpha[l] > 0.0)
    }

    pub fn returns_to_scale(&self) -> f64 {
        match self.form {
            TechForm::Linear => 1.0,
            TechForm::CobbDouglas => self.alpha.iter().sum(),
        }
    }

    pub fn output(&self, x: &[f64]) -> f64 {
        match self.form {
            TechForm::Linear => self.scale * self.alpha.iter().zip(x).map(|(a, v)| a * v).sum::<f64>(),
            TechForm::CobbDouglas => self.scale * self.inputs().map(|l| x[l].powf(self.alpha[l])).product::<f64>(),
        }
    }

    /// Partial derivatives of output; may be infinite at the boundary.
    pub fn marginals(&self, x: &[f64]) -> Vec<f64> {
        match self.form {
            TechForm::Linear => self.alpha.iter().map(|a| self.scale * a).collect(),
            TechForm::CobbDouglas => (0..self.alpha.len())
                .map(|l| {
                    if !self.uses(l) {
                        return 0.0;
                    }
                    let others: f64 = self.inputs().filter(|&j| j != l).map(|j| x[j].powf(self.alpha[j])).product();
                    self.scale * self.alpha[l] * x[l].powf(self.alpha[l] - 1.0) * others
                })
                .collect(),
        }
    }

    /// Hessian of output over all prime movers (zero rows for unused inputs).
    pub fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.alpha.len();
        let mut h = DMatrix::zeros(n, n);
        if self.form == TechForm::CobbDouglas {
            let out = self.output(x);
            for l in self.inputs() {
                for m in self.inputs() {
                    let diag = if l == m { self.alpha[l] } else { 0.0 };
                    h[(l, m)] = out * (self.alpha[l] * self.alpha[m] - diag) / (x[l] * x[m]);
                }
            }
        }
        h
    }

    /// Output, marginal productivities and marginal requirements at `x`.
    pub fn eval(&self, x: &[f64]) -> Result<ProductionEval> {
        assert_eq!(x.len(), self.alpha.len(), "allocation has wrong length");
        if x.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(EconError::Domain("allocations must be finite and non-negative".into()));
        }
        let output = self.output(x);
        let marginals = self.marginals(x);
        let mut requirements = Vec::with_capacity(x.len());
        for (l, f) in marginals.iter().enumerate() {
            if !self.uses(l) {
                requirements.push(None);
            } else if !f.is_finite() || *f <= 0.0 {
                return Err(EconError::NonFiniteMarginal { input: l });
            } else {
                requirements.push(Some(1.0 / f));
            }
        }
        Ok(ProductionEval { output, marginals, requirements })
    }
}

/// Evaluates a technology at an allocation.
pub fn eval_production(tech: &ProductionTech, x: &[f64]) -> Result<ProductionEval> {
    tech.eval(x)
}

// ---------------------------------------------------------------------------
// Utility

#[derive(Debug, Clone, PartialEq)]
pub struct UtilityModel {
    pub form: UtilityForm,
    /// `weights[f][t]`.
    pub weights: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtilityEval {
    pub value: f64,
    /// `marginals[f][t]` in utils per unit.
    pub marginals: Vec<Vec<f64>>,
}

impl UtilityModel {
    pub fn weighted_log(weights: Vec<Vec<f64>>) -> Self {
        Self { form: UtilityForm::WeightedLog, weights }
    }

    /// `U = sum w ln Q`; entries with zero weight are ignored.
    pub fn eval(&self, q: &[Vec<f64>]) -> Result<UtilityEval> {
        let mut value = 0.0;
        let mut marginals = Vec::with_capacity(self.weights.len());
        for (f, (w_row, q_row)) in self.weights.iter().zip(q).enumerate() {
            let mut row = Vec::with_capacity(w_row.len());
            for (t, (w, qv)) in w_row.iter().zip(q_row).enumerate() {
                if *w == 0.0 {
                    row.push(0.0);
                    continue;
                }
                if !(*qv > 0.0) {
                    return Err(EconError::Domain(format!("log utility undefined at Q[{f}][{t}] = {qv}")));
                }
                value += w * qv.ln();
                row.push(w / qv);
            }
            marginals.push(row);
        }
        Ok(UtilityEval { value, marginals })
    }
}

pub fn eval_utility(u: &UtilityModel, q: &[Vec<f64>]) -> Result<UtilityEval> {
    u.eval(q)
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, field: impl Into<String>, rule: impl Into<String>) {
        self.violations.push(Violation { field: field.into(), rule: rule.into() });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.violations.iter().map(|v| format!("{}: {}", v.field, v.rule)).collect();
        write!(f, "{}", parts.join("; "))
    }
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

fn non_negative(v: f64) -> bool {
    v >= 0.0 && v.is_finite()
}

/// Checks every scenario invariant; an empty report means the scenario is
/// well formed.
pub fn validate_scenario(s: &EconomyScenario) -> ValidationReport {
    let mut r = ValidationReport::default();
    if s.horizon < 1 {
        r.push("horizon", "horizon must be at least 1");
    }

    let mut ids = BTreeSet::new();
    let all_ids = s
        .final_goods
        .iter()
        .map(|g| &g.id)
        .chain(s.energy_goods.iter().map(|g| &g.id))
        .chain(s.prime_movers.iter().map(|g| &g.id));
    for id in all_ids {
        if id.is_empty() {
            r.push("id", "empty good id");
        } else if !ids.insert(id.clone()) {
            r.push(format!("id {id}"), "duplicate good id");
        }
    }

    if s.final_goods.is_empty() {
        r.push("final_goods", "at least one final good is required");
    }

    for pm in &s.prime_movers {
        let base = format!("prime_movers[{}]", pm.id);
        if let Some(eps) = pm.epsilon {
            if !positive(eps) {
                r.push(format!("{base}.epsilon"), "epsilon must be positive");
            }
        }
        if !positive(pm.power_rate) {
            r.push(format!("{base}.power_rate"), "power rate must be positive");
        }
        if !(pm.depreciation > 0.0 && pm.depreciation < 1.0) {
            r.push(format!("{base}.depreciation"), "depreciation outside (0,1)");
        }
        if !non_negative(pm.initial_endowment) {
            r.push(format!("{base}.initial_endowment"), "initial endowment must be non-negative");
        }
        if let Some(b) = pm.build_energy {
            if !non_negative(b) {
                r.push(format!("{base}.build_energy"), "build energy must be non-negative");
            }
        }
    }

    for e in &s.energy_goods {
        let base = format!("energy_goods[{}]", e.id);
        if !positive(e.energy_content) {
            r.push(format!("{base}.energy_content"), "energy content must be positive");
        }
        if !non_negative(e.initial_stock) {
            r.push(format!("{base}.initial_stock"), "initial stock must be non-negative");
        }
    }

    for f in &s.final_goods {
        let base = format!("final_goods[{}].weights", f.id);
        if f.weights.len() != s.horizon {
            r.push(&base, "one weight per period is required");
        }
        if f.weights.iter().any(|w| !non_negative(*w)) {
            r.push(&base, "weights must be non-negative");
        }
        if !f.weights.iter().any(|w| *w > 0.0) {
            r.push(&base, "at least one weight must be positive");
        }
    }

    let pm_ids: BTreeSet<&String> = s.prime_movers.iter().map(|p| &p.id).collect();
    let mut covered = BTreeMap::new();
    for (i, t) in s.technologies.iter().enumerate() {
        let base = format!("technologies[{i}]");
        if !ids.contains(&t.good) {
            r.push(format!("{base}.good"), format!("unknown good '{}'", t.good));
        }
        *covered.entry(t.good.clone()).or_insert(0) += 1;
        if !positive(t.scale) {
            r.push(format!("{base}.scale"), "scale must be positive");
        }
        for (pm, a) in &t.coefficients {
            if !pm_ids.contains(pm) {
                r.push(format!("{base}.coefficients.{pm}"), "unknown prime mover");
            }
            if !non_negative(*a) {
                r.push(format!("{base}.coefficients.{pm}"), "coefficients must be non-negative");
            }
        }
        if !t.coefficients.values().any(|a| *a > 0.0) {
            r.push(format!("{base}.coefficients"), "at least one positive coefficient is required");
        }
        if t.form == TechForm::CobbDouglas {
            let sum: f64 = t.coefficients.values().sum();
            if sum > 1.0 + 1e-12 {
                r.push(format!("{base}.coefficients"), "non-concave technology (exponents sum above 1)");
            }
        }
    }
    for id in &ids {
        match covered.get(id) {
            None => r.push(format!("technologies[{id}]"), "good has no technology"),
            Some(n) if *n > 1 => r.push(format!("technologies[{id}]"), "good has more than one technology"),
            _ => {}
        }
    }

    if let Some(m) = &s.money {
        if let Some(g) = &m.real_good {
            let synthetic = s.synthetic_accounts.iter().flatten().any(|a| &a.id == g);
            if !ids.contains(g) && !synthetic {
                r.push("money.real_good", format!("unknown good '{g}'"));
            }
        }
        if !positive(m.real_quantity) {
            r.push("money.Q_m", "real money quantity must be positive");
        }
        if !positive(m.nominal_quantity) {
            r.push("money.Q_n", "nominal money quantity must be positive");
        }
    }

    for (field, rule) in s.solver.violations() {
        r.push(field, rule);
    }
    r
}

// ---------------------------------------------------------------------------
// Compiled economy

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GoodKind {
    Final(usize),
    Energy(usize),
    PrimeMover(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Good {
    pub id: String,
    pub kind: GoodKind,
}

/// Index-based view of a validated scenario used by the solvers.
#[derive(Debug, Clone)]
pub struct Economy {
    pub horizon: usize,
    pub prime_movers: Vec<PrimeMoverSpec>,
    pub energy_goods: Vec<EnergyGoodSpec>,
    pub final_goods: Vec<FinalGoodSpec>,
    pub goods: Vec<Good>,
    pub techs: Vec<ProductionTech>,
    pub epsilon: Vec<f64>,
    pub utility: UtilityModel,
    pub settings: SolverSettings,
}

impl Economy {
    pub fn from_scenario(s: &EconomyScenario) -> Result<Self> {
        let report = validate_scenario(s);
        if !report.is_empty() {
            return Err(EconError::Validation(report));
        }
        let mut goods = Vec::new();
        goods
            .extend(s.final_goods.iter().enumerate().map(|(i, g)| Good { id: g.id.clone(), kind: GoodKind::Final(i) }));
        goods.extend(
            s.energy_goods.iter().enumerate().map(|(i, g)| Good { id: g.id.clone(), kind: GoodKind::Energy(i) }),
        );
        goods.extend(
            s.prime_movers.iter().enumerate().map(|(i, g)| Good { id: g.id.clone(), kind: GoodKind::PrimeMover(i) }),
        );
        let techs = goods
            .iter()
            .map(|g| {
                let spec = s.technologies.iter().find(|t| t.good == g.id).expect("validated");
                let alpha =
                    s.prime_movers.iter().map(|pm| spec.coefficients.get(&pm.id).copied().unwrap_or(0.0)).collect();
                ProductionTech { form: spec.form, scale: spec.scale, alpha }
            })
            .collect();
        Ok(Self {
            horizon: s.horizon,
            epsilon: s.prime_movers.iter().map(PrimeMoverSpec::epsilon).collect(),
            prime_movers: s.prime_movers.clone(),
            energy_goods: s.energy_goods.clone(),
            final_goods: s.final_goods.clone(),
            utility: UtilityModel::weighted_log(s.final_goods.iter().map(|f| f.weights.clone()).collect()),
            goods,
            techs,
            settings: s.solver.clone(),
        })
    }

    pub fn num_final(&self) -> usize {
        self.final_goods.len()
    }

    pub fn num_energy(&self) -> usize {
        self.energy_goods.len()
    }

    pub fn num_prime_movers(&self) -> usize {
        self.prime_movers.len()
    }

    pub fn num_goods(&self) -> usize {
        self.goods.len()
    }

    pub fn final_index(&self, f: usize) -> usize {
        f
    }

    pub fn energy_index(&self, e: usize) -> usize {
        self.num_final() + e
    }

    pub fn prime_mover_index(&self, l: usize) -> usize {
        self.num_final() + self.num_energy() + l
    }

    pub fn good_position(&self, id: &str) -> Option<usize> {
        self.goods.iter().position(|g| g.id == id)
    }

    pub fn depreciation(&self) -> Vec<f64> {
        self.prime_movers.iter().map(|p| p.depreciation).collect()
    }

    pub fn power_rates(&self) -> Vec<f64> {
        self.prime_movers.iter().map(|p| p.power_rate).collect()
    }
}
