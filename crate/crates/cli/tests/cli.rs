use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.json"))
}

fn energyecon(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_energyecon"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("ENERGYECON_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn edited(dir: &Path, name: &str, edit: impl FnOnce(&mut Value)) -> String {
    let mut doc: Value = serde_json::from_str(&fs::read_to_string(scenario("default")).unwrap()).unwrap();
    edit(&mut doc);
    let path = dir.join(format!("{name}.json"));
    fs::write(&path, doc.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

fn error_line(out: &Output) -> Value {
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(text.lines().count(), 1, "{text}");
    serde_json::from_str(text.trim()).unwrap()
}

#[test]
fn solve_autarky_writes_solution_and_prices() {
    let dir = tempfile::tempdir().unwrap();
    let out = energyecon(&["solve-autarky", scenario("default").to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let prices = fs::read_to_string(dir.path().join("prices.csv")).unwrap();
    assert_eq!(prices.lines().next().unwrap(), "good_id,tau,tau_avg,psi,theta,gamma_avg,eta,p_real,P_nominal,gap");
    assert_eq!(prices.lines().count(), 1 + 6);
    let doc: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("solution.json")).unwrap()).unwrap();
    assert_eq!(doc["command"], "solve-autarky");
    assert_eq!(doc["scenarios"][0]["hash"].as_str().unwrap().len(), 64);
    assert!(dir.path().join("decomposition.csv").exists());
}

#[test]
fn invalid_depreciation_exits_one_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = edited(dir.path(), "bad", |d| d["prime_movers"][0]["depreciation"] = 1.2.into());
    let out = energyecon(&["solve-autarky", &path], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = error_line(&out);
    assert_eq!(err["error"], "validation");
    assert_eq!(err["violations"][0]["field"], "prime_movers[labor].depreciation");
    assert!(!dir.path().join("solution.json").exists());
}

#[test]
fn iteration_budget_exhaustion_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = edited(dir.path(), "short", |d| d["solver"]["kkt_max_iter"] = 1.into());
    let out = energyecon(&["solve-autarky", &path], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "no_convergence");
}

#[test]
fn economy_without_energy_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let path = edited(dir.path(), "dark", |d| {
        for e in d["energy_goods"].as_array_mut().unwrap() {
            e["initial_stock"] = 0.0.into();
        }
    });
    let out = energyecon(&["solve-autarky", &path], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["error"], "infeasible");
}

#[test]
fn verify_passes_and_repeats_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario("default");
    let first = energyecon(&["verify", path.to_str().unwrap(), "--seed", "7"], &dir.path().join("a"));
    let second = energyecon(&["verify", path.to_str().unwrap(), "--seed", "7"], &dir.path().join("b"));
    assert_eq!(first.status.code(), Some(0), "{}", String::from_utf8_lossy(&first.stdout));
    assert_eq!(second.status.code(), Some(0));
    for file in ["verify.json", "verify.csv"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert!(a == b, "{file} differs between runs");
    }
    let table = fs::read_to_string(dir.path().join("a/verify.csv")).unwrap();
    assert!(table.lines().skip(1).all(|l| !l.contains(",fail,")));
}

#[test]
fn price_report_on_the_demo_fits_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let out = energyecon(&["price-report", scenario("proportionality_demo").to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let fit = fs::read_to_string(dir.path().join("fit.csv")).unwrap();
    let row: Vec<f64> = fit.lines().nth(1).unwrap().split(',').map(|c| c.parse().unwrap()).collect();
    assert!((row[2] - 1.0).abs() < 1e-12, "R^2 {}", row[2]);
}

#[test]
fn empty_goods_list_reports_degenerate_fit() {
    let dir = tempfile::tempdir().unwrap();
    let path = edited(dir.path(), "empty", |d| d["synthetic_accounts"] = Value::Array(Vec::new()));
    let out = energyecon(&["price-report", &path], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(doc["money"]["fit"]["status"], "degenerate");
    let prices = fs::read_to_string(dir.path().join("prices.csv")).unwrap();
    assert_eq!(prices.lines().count(), 1);
}

#[test]
fn format_flag_selects_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario("two_good");
    let csv = energyecon(&["solve-autarky", path.to_str().unwrap(), "--format", "csv"], &dir.path().join("csv"));
    let doc = energyecon(&["solve-autarky", path.to_str().unwrap(), "--format", "structured"], &dir.path().join("doc"));
    assert_eq!(csv.status.code(), Some(0));
    assert_eq!(doc.status.code(), Some(0));
    assert!(dir.path().join("csv/prices.csv").exists() && !dir.path().join("csv/solution.json").exists());
    assert!(dir.path().join("doc/solution.json").exists() && !dir.path().join("doc/prices.csv").exists());
}

#[test]
fn batch_runs_write_one_directory_per_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let a = scenario("default");
    let b = scenario("two_energy");
    let out = energyecon(&["solve-autarky", a.to_str().unwrap(), b.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.path().join("default/solution.json").exists());
    assert!(dir.path().join("two_energy/solution.json").exists());
}

#[test]
fn exchange_between_partners_in_both_modes() {
    let dir = tempfile::tempdir().unwrap();
    let a = scenario("default");
    let b = scenario("partner");
    for mode in ["fixed-consumption", "re-solve"] {
        let out = energyecon(
            &["solve-exchange", a.to_str().unwrap(), b.to_str().unwrap(), "--mode", mode],
            &dir.path().join(mode),
        );
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let doc: Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(mode).join("exchange.json")).unwrap()).unwrap();
        assert!(doc["exchange"]["market"]["gains"].as_f64().unwrap() > 0.0);
        assert!(dir.path().join(mode).join("metc.csv").exists());
    }
    let single = energyecon(&["solve-exchange", a.to_str().unwrap()], dir.path());
    assert_eq!(single.status.code(), Some(1));
}
