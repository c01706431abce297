//! Scenario files, report documents and CSV tables.
//!
//! Documents are JSON with object keys in sorted order. Numbers in JSON use
//! the shortest representation that round-trips; CSV cells carry 17
//! significant digits. Every file is written to a temporary sibling and
//! renamed into place.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::equilibrium::AutarkyEquilibrium;
use crate::error::{EconError, Result};
use crate::exchange::{AgentGood, ConsumptionMode, TradeOutcome};
use crate::model::EconomyScenario;
use crate::money::MoneyReport;

pub const TOOL: &str = "energyecon";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Columns of the price table.
pub const PRICE_COLUMNS: [&str; 10] =
    ["good_id", "tau", "tau_avg", "psi", "theta", "gamma_avg", "eta", "p_real", "P_nominal", "gap"];

pub fn parse_scenario(text: &str) -> Result<EconomyScenario> {
    Ok(serde_json::from_str(text)?)
}

pub fn read_scenario(path: &Path) -> Result<EconomyScenario> {
    parse_scenario(&fs::read_to_string(path)?)
}

/// Pretty JSON with sorted keys and a trailing newline.
///
/// Relies on `serde_json::Map` being ordered by key, which holds as long as
/// the `preserve_order` feature stays off.
pub fn to_document<T: Serialize>(value: &T) -> Result<String> {
    let tree = serde_json::to_value(value)?;
    let mut text = serde_json::to_string_pretty(&tree)?;
    text.push('\n');
    Ok(text)
}

/// SHA-256 of the compact, key-sorted JSON form of a scenario, in hex.
/// Defaults are filled in before hashing, so files that differ only in
/// omitted defaults or key order hash alike.
pub fn scenario_hash(scenario: &EconomyScenario) -> Result<String> {
    let tree = serde_json::to_value(scenario)?;
    let bytes = serde_json::to_vec(&tree)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes `bytes` to a temporary file beside `path`, then renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| EconError::Domain(format!("'{}' is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes)?;
    if let Err(e) = fs::rename(&tmp, path) {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(())
}

/// 17 significant digits in scientific notation.
pub fn format_number(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

fn format_option(v: Option<f64>) -> String {
    v.map(format_number).unwrap_or_default()
}

/// CSV text of a header and rows of preformatted cells.
pub fn table_csv<S: AsRef<str>>(header: &[&str], rows: &[Vec<S>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_io = |e: csv::Error| EconError::Io(std::io::Error::other(e));
    w.write_record(header).map_err(to_io)?;
    for row in rows {
        w.write_record(row.iter().map(AsRef::as_ref)).map_err(to_io)?;
    }
    let bytes = w.into_inner().map_err(|e| EconError::Io(std::io::Error::other(e.to_string())))?;
    String::from_utf8(bytes).map_err(|e| EconError::Io(std::io::Error::other(e)))
}

/// The price table of a money report, one row per priced good.
pub fn prices_csv(report: &MoneyReport) -> Result<String> {
    let rows: Vec<Vec<String>> = report
        .accounts
        .iter()
        .map(|a| {
            vec![
                a.good_id.clone(),
                format_number(a.tau),
                format_option(a.tau_avg),
                format_option(a.psi),
                format_option(a.theta),
                format_option(a.gamma_avg),
                format_option(a.eta),
                format_number(a.p_real),
                format_number(a.p_nominal),
                format_option(a.gap),
            ]
        })
        .collect();
    table_csv(&PRICE_COLUMNS, &rows)
}

/// Per-good, per-period quantities, transfers and their decomposition.
pub fn decomposition_csv(eq: &AutarkyEquilibrium) -> Result<String> {
    let b = &eq.bundle;
    let mut rows = Vec::new();
    for (k, id) in b.goods.iter().enumerate() {
        for t in 0..b.lambda.len() {
            let d = eq.decomposition[k][t].as_ref();
            rows.push(vec![
                id.clone(),
                (t + 1).to_string(),
                format_number(b.quantities[k][t]),
                format_number(b.tau[k][t]),
                format_option(b.tau_avg[k][t]),
                format_option(d.map(|d| d.psi)),
                format_option(d.map(|d| d.theta)),
                format_option(d.map(|d| d.mu)),
            ]);
        }
    }
    table_csv(&["good_id", "period", "quantity", "tau", "tau_avg", "psi", "theta", "mu"], &rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    /// The check does not apply to this scenario.
    Skip,
}

/// One row of the invariant table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub status: CheckStatus,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl CheckResult {
    /// Passes when `value <= tolerance`; non-finite values fail.
    pub fn at_most(name: &str, value: f64, tolerance: f64) -> Self {
        let status = if value <= tolerance { CheckStatus::Pass } else { CheckStatus::Fail };
        Self { name: name.into(), value, tolerance, status, detail: String::new() }
    }

    pub fn skip(name: &str, detail: impl Into<String>) -> Self {
        Self { name: name.into(), value: 0.0, tolerance: 0.0, status: CheckStatus::Skip, detail: detail.into() }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }
}

pub fn checks_csv(checks: &[CheckResult]) -> Result<String> {
    let rows: Vec<Vec<String>> = checks
        .iter()
        .map(|c| {
            let status = match c.status {
                CheckStatus::Pass => "pass",
                CheckStatus::Fail => "fail",
                CheckStatus::Skip => "skip",
            };
            vec![c.name.clone(), format_number(c.value), format_number(c.tolerance), status.into(), c.detail.clone()]
        })
        .collect();
    table_csv(&["check", "value", "tolerance", "status", "detail"], &rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    /// File stem of the scenario.
    pub name: String,
    pub hash: String,
}

/// Trade between solved agents, with the curves it was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeReport {
    pub mode: ConsumptionMode,
    pub agents: Vec<String>,
    /// `curves[agent][good]`, sampled around each agent's autarky.
    pub curves: Vec<Vec<AgentGood>>,
    pub market: TradeOutcome,
    /// Two-agent direct solution, present for exactly two agents.
    pub bilateral: Option<TradeOutcome>,
}

/// Everything one command produced. Contains no paths or timings, so equal
/// inputs give equal reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub scenarios: Vec<ScenarioRecord>,
    pub bundles: Vec<AutarkyEquilibrium>,
    pub money: Option<MoneyReport>,
    pub exchange: Option<ExchangeReport>,
    pub checks: Vec<CheckResult>,
}

impl RunReport {
    pub fn new(command: &str) -> Self {
        Self {
            tool: TOOL.into(),
            version: VERSION.into(),
            command: command.into(),
            seed: None,
            scenarios: Vec::new(),
            bundles: Vec::new(),
            money: None,
            exchange: None,
            checks: Vec::new(),
        }
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::default_scenario;

    #[test]
    fn numbers_keep_seventeen_digits() {
        assert_eq!(format_number(0.1), "1.0000000000000001e-1");
        assert_eq!(format_number(20.0), "2.0000000000000000e1");
        assert_eq!(format_number(-3.5e-12), "-3.5000000000000000e-12");
        for v in [0.1, 1.0 / 3.0, 6.02214076e23, -2.2250738585072014e-308] {
            assert_eq!(format_number(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn document_keys_are_sorted() {
        let text = to_document(&default_scenario()).unwrap();
        let top: Vec<&str> = text
            .lines()
            .filter(|l| l.starts_with("  \"") && !l.starts_with("   "))
            .map(|l| l.trim().split('"').nth(1).unwrap())
            .collect();
        let mut sorted = top.clone();
        sorted.sort();
        assert_eq!(top, sorted);
        assert!(text.ends_with("}\n"));
    }

    #[test]
    fn hash_ignores_key_order_and_spacing() {
        let s = default_scenario();
        let compact = serde_json::to_string(&s).unwrap();
        let pretty = to_document(&s).unwrap();
        let a = scenario_hash(&parse_scenario(&compact).unwrap()).unwrap();
        let b = scenario_hash(&parse_scenario(&pretty).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        let mut other = s.clone();
        other.horizon = 2;
        other.final_goods.iter_mut().for_each(|f| f.weights.truncate(2));
        assert_ne!(scenario_hash(&other).unwrap(), a);
    }

    #[test]
    fn csv_quotes_awkward_ids() {
        let text = table_csv(&["a", "b"], &[vec!["x,y", "1"]]).unwrap();
        assert_eq!(text, "a,b\n\"x,y\",1\n");
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested").join("out.txt");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "second");
        let leftovers = fs::read_dir(path.parent().unwrap()).unwrap().count();
        assert_eq!(leftovers, 1);
    }
}
