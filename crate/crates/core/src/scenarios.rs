//! Built-in scenarios and a seeded generator of small random economies.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{
    EconomyScenario, EnergyGoodSpec, FinalGoodSpec, PrimeMoverSpec, TechForm, TechnologySpec, UtilitySpec,
};
use crate::money::{MoneySpec, SyntheticAccount};
use crate::numerics::SolverSettings;

fn pm(id: &str, power: f64, d: f64, initial: f64, build: Option<f64>) -> PrimeMoverSpec {
    PrimeMoverSpec {
        id: id.into(),
        epsilon: None,
        power_rate: power,
        depreciation: d,
        initial_endowment: initial,
        build_energy: build,
    }
}

fn energy(id: &str, delta: f64, stock: f64) -> EnergyGoodSpec {
    EnergyGoodSpec { id: id.into(), energy_content: delta, initial_stock: stock }
}

fn final_good(id: &str, weights: Vec<f64>) -> FinalGoodSpec {
    FinalGoodSpec { id: id.into(), weights }
}

fn tech(good: &str, form: TechForm, scale: f64, coefficients: &[(&str, f64)]) -> TechnologySpec {
    TechnologySpec {
        good: good.into(),
        form,
        scale,
        coefficients: coefficients.iter().map(|(k, v)| (k.to_string(), *v)).collect::<BTreeMap<_, _>>(),
    }
}

fn base(horizon: usize) -> EconomyScenario {
    EconomyScenario {
        horizon,
        prime_movers: Vec::new(),
        energy_goods: Vec::new(),
        final_goods: Vec::new(),
        technologies: Vec::new(),
        utility: UtilitySpec::default(),
        money: None,
        solver: SolverSettings::default(),
        synthetic_accounts: None,
    }
}

/// Two final goods, two energy goods and two prime movers over three
/// periods, all with decreasing-returns Cobb-Douglas technologies.
pub fn default_scenario() -> EconomyScenario {
    use TechForm::CobbDouglas as Cd;
    let mut s = base(3);
    s.prime_movers = vec![pm("labor", 100.0, 0.9, 10.0, Some(400.0)), pm("engine", 400.0, 0.6, 6.0, Some(1500.0))];
    s.energy_goods = vec![energy("grain", 1500.0, 0.6), energy("oil", 4000.0, 0.3)];
    s.final_goods = vec![final_good("bread", vec![1.0, 0.9, 0.8]), final_good("cloth", vec![0.6, 0.6, 0.6])];
    s.technologies = vec![
        tech("bread", Cd, 2.0, &[("labor", 0.5), ("engine", 0.3)]),
        tech("cloth", Cd, 1.5, &[("labor", 0.3), ("engine", 0.5)]),
        tech("grain", Cd, 1.0, &[("labor", 0.6), ("engine", 0.2)]),
        tech("oil", Cd, 0.8, &[("labor", 0.2), ("engine", 0.6)]),
        tech("labor", Cd, 1.2, &[("labor", 0.5), ("engine", 0.2)]),
        tech("engine", Cd, 0.6, &[("labor", 0.3), ("engine", 0.4)]),
    ];
    s.money = Some(MoneySpec { real_good: None, real_quantity: 100.0, nominal_quantity: 1000.0, fiat: false });
    s
}

/// The default economy with bread made less and cloth made more
/// productively, so the two agents gain from trading.
pub fn partner_scenario() -> EconomyScenario {
    let mut s = default_scenario();
    for t in &mut s.technologies {
        match t.good.as_str() {
            "bread" => t.scale = 1.4,
            "cloth" => t.scale = 2.2,
            _ => {}
        }
    }
    s
}

/// One final good and one energy good made by a single prime mover.
pub fn two_good_scenario() -> EconomyScenario {
    use TechForm::CobbDouglas as Cd;
    let mut s = base(2);
    s.prime_movers = vec![pm("worker", 100.0, 0.8, 10.0, Some(300.0))];
    s.energy_goods = vec![energy("grain", 1000.0, 0.6)];
    s.final_goods = vec![final_good("bread", vec![1.0, 1.0])];
    s.technologies = vec![
        tech("bread", Cd, 2.0, &[("worker", 0.7)]),
        tech("grain", Cd, 1.0, &[("worker", 0.6)]),
        tech("worker", Cd, 0.5, &[("worker", 0.5)]),
    ];
    s
}

/// One final good, two energy goods and two prime movers.
pub fn two_energy_scenario() -> EconomyScenario {
    use TechForm::CobbDouglas as Cd;
    let mut s = base(3);
    s.prime_movers = vec![pm("labor", 100.0, 0.85, 8.0, Some(400.0)), pm("mill", 300.0, 0.7, 3.0, Some(1200.0))];
    s.energy_goods = vec![energy("wood", 1200.0, 0.6), energy("coal", 3000.0, 0.2)];
    s.final_goods = vec![final_good("tools", vec![1.0, 1.0, 1.0])];
    s.technologies = vec![
        tech("tools", Cd, 1.5, &[("labor", 0.4), ("mill", 0.4)]),
        tech("wood", Cd, 1.0, &[("labor", 0.5), ("mill", 0.2)]),
        tech("coal", Cd, 0.7, &[("labor", 0.2), ("mill", 0.5)]),
        tech("labor", Cd, 1.0, &[("labor", 0.5), ("mill", 0.2)]),
        tech("mill", Cd, 0.5, &[("labor", 0.3), ("mill", 0.4)]),
    ];
    s
}

/// Constructed accounts where scarcity costs equal amortized embodiment and
/// average embodied energy equals marginal embodied energy, so nominal
/// prices are exactly proportional to average embodied energy.
pub fn proportionality_demo() -> EconomyScenario {
    let mut s = two_good_scenario();
    let accounts =
        [("wheat", 4.0, 1.0), ("iron", 9.0, 3.0), ("salt", 2.5, 0.5), ("silver", 20.0, 6.0), ("wool", 6.0, 2.5)];
    s.synthetic_accounts = Some(
        accounts
            .iter()
            .map(|(id, psi, g)| SyntheticAccount {
                id: id.to_string(),
                psi: *psi,
                theta: *g,
                embodied: *g,
                gamma_avg: psi + g,
            })
            .collect(),
    );
    s.money = Some(MoneySpec {
        real_good: Some("silver".into()),
        real_quantity: 50.0,
        nominal_quantity: 2000.0,
        fiat: false,
    });
    s
}

/// The demo with scarcity costs moved away from embodiment; the price
/// identity still holds per good but the fit is no longer exact.
pub fn perturbed_proportionality_demo() -> EconomyScenario {
    let mut s = proportionality_demo();
    let shifts = [0.8, -0.5, 1.2, -2.0, 0.3];
    for (a, d) in s.synthetic_accounts.iter_mut().flatten().zip(shifts) {
        a.theta += d;
    }
    s
}

/// A random economy with at most two goods per class, two prime movers and
/// three periods. Initial energy income covers only part of the cost of
/// running every prime mover, so energy is scarce in the first period.
pub fn random_small_scenario(seed: u64) -> EconomyScenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = rng.gen_range(1..=3);
    let n_pm = rng.gen_range(1..=2);
    let n_e = rng.gen_range(1..=2);
    let n_f = rng.gen_range(1..=2);
    let mut s = base(horizon);
    for l in 0..n_pm {
        s.prime_movers.push(pm(
            &format!("pm{l}"),
            rng.gen_range(50.0..400.0),
            rng.gen_range(0.5..0.95),
            rng.gen_range(2.0..12.0),
            Some(rng.gen_range(100.0..2000.0)),
        ));
    }
    let full_use: f64 = s.prime_movers.iter().map(|p| p.power_rate * p.initial_endowment).sum();
    let budget = full_use * rng.gen_range(0.3..0.8);
    for e in 0..n_e {
        let delta = rng.gen_range(500.0..5000.0);
        s.energy_goods.push(energy(&format!("e{e}"), delta, budget / (n_e as f64 * delta)));
    }
    for f in 0..n_f {
        let weights = (0..horizon).map(|_| rng.gen_range(0.2..1.5)).collect();
        s.final_goods.push(final_good(&format!("f{f}"), weights));
    }
    let ids: Vec<String> = s
        .final_goods
        .iter()
        .map(|g| g.id.clone())
        .chain(s.energy_goods.iter().map(|g| g.id.clone()))
        .chain(s.prime_movers.iter().map(|g| g.id.clone()))
        .collect();
    for id in ids {
        let mut coefficients = BTreeMap::new();
        let total = rng.gen_range(0.4..0.9);
        let mut shares: Vec<f64> = (0..n_pm).map(|_| rng.gen_range(0.2..1.0)).collect();
        let sum: f64 = shares.iter().sum();
        for v in &mut shares {
            *v *= total / sum;
        }
        for (l, a) in shares.into_iter().enumerate() {
            coefficients.insert(format!("pm{l}"), a);
        }
        s.technologies.push(TechnologySpec {
            good: id,
            form: TechForm::CobbDouglas,
            scale: rng.gen_range(0.5..2.0),
            coefficients,
        });
    }
    s
}
