//! Metrics CSV files and the summaries built from them.
//!
//! A metrics file starts with a `#schema=` line, followed by a header with
//! the fixed column set and one row per (run, round).

use std::collections::BTreeMap;
use std::path::Path;

use apolab::apo::EpochMetrics;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::persist::{read_file, write_file};

pub const METRICS_SCHEMA: &str = "apolab-metrics/1";

pub const COLUMNS: [&str; 15] = [
    "run_id",
    "seed",
    "method",
    "apo",
    "round",
    "rm_dev_acc",
    "rm_test_acc",
    "rm_dev_ece",
    "rm_test_ece",
    "policy_true_utility",
    "policy_rm_reward",
    "kl_to_ref",
    "win",
    "lose",
    "tie",
];

/// Numeric columns that can be summarized.
pub const VALUE_COLUMNS: [&str; 10] = [
    "rm_dev_acc",
    "rm_test_acc",
    "rm_dev_ece",
    "rm_test_ece",
    "policy_true_utility",
    "policy_rm_reward",
    "kl_to_ref",
    "win",
    "lose",
    "tie",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub method: String,
    pub apo: bool,
    pub round: usize,
    pub rm_dev_acc: f64,
    pub rm_test_acc: f64,
    pub rm_dev_ece: f64,
    pub rm_test_ece: f64,
    pub policy_true_utility: f64,
    pub policy_rm_reward: f64,
    pub kl_to_ref: f64,
    pub win: f64,
    pub lose: f64,
    pub tie: f64,
}

impl MetricsRow {
    pub fn new(run_id: &str, seed: u64, method: &str, apo: bool, m: &EpochMetrics) -> Self {
        Self {
            run_id: run_id.to_string(),
            seed,
            method: method.to_string(),
            apo,
            round: m.round,
            rm_dev_acc: m.rm_dev_acc,
            rm_test_acc: m.rm_test_acc,
            rm_dev_ece: m.rm_dev_ece,
            rm_test_ece: m.rm_test_ece,
            policy_true_utility: m.policy_true_utility,
            policy_rm_reward: m.policy_rm_reward,
            kl_to_ref: m.kl_to_ref,
            win: m.win,
            lose: m.lose,
            tie: m.tie,
        }
    }

    pub fn value(&self, column: &str) -> Option<f64> {
        Some(match column {
            "rm_dev_acc" => self.rm_dev_acc,
            "rm_test_acc" => self.rm_test_acc,
            "rm_dev_ece" => self.rm_dev_ece,
            "rm_test_ece" => self.rm_test_ece,
            "policy_true_utility" => self.policy_true_utility,
            "policy_rm_reward" => self.policy_rm_reward,
            "kl_to_ref" => self.kl_to_ref,
            "win" => self.win,
            "lose" => self.lose,
            "tie" => self.tie,
            _ => return None,
        })
    }
}

pub fn check_column(column: &str) -> Result<()> {
    if VALUE_COLUMNS.contains(&column) {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "unknown column {column:?}; valid columns: {}",
            VALUE_COLUMNS.join(", ")
        )))
    }
}

/// Serializes rows with a schema line, in the order given.
pub fn to_csv<T: Serialize>(schema: &str, rows: &[T]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("rows serialize infallibly");
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv output is utf-8");
    format!("#schema={schema}\n{body}")
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    if rows.is_empty() {
        // serde headers come from the first row; write the fixed header by hand.
        return write_file(path, format!("#schema={METRICS_SCHEMA}\n{}\n", COLUMNS.join(",")).as_bytes());
    }
    write_file(path, to_csv(METRICS_SCHEMA, rows).as_bytes())
}

pub fn parse_metrics(text: &str, path: &Path) -> Result<Vec<MetricsRow>> {
    let (first, body) = text.split_once('\n').unwrap_or((text, ""));
    let found = first.strip_prefix("#schema=").unwrap_or("").trim_end_matches('\r');
    if found != METRICS_SCHEMA {
        return Err(CliError::Schema {
            path: path.to_path_buf(),
            found: found.to_string(),
            expected: METRICS_SCHEMA,
        });
    }
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::format(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != COLUMNS {
        return Err(CliError::format(path, format!("unexpected columns {header:?}")));
    }
    reader
        .deserialize()
        .map(|r| r.map_err(|e| CliError::format(path, e.to_string())))
        .collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| CliError::format(path, "not utf-8"))?;
    parse_metrics(&text, path)
}

/// Mean, sample standard deviation and count. The deviation is 0 for a
/// single value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Summary { mean, std, n })
    }
}

/// Distinct run ids, sorted.
pub fn run_ids(rows: &[MetricsRow]) -> Vec<String> {
    let mut ids: Vec<String> = rows.iter().map(|r| r.run_id.clone()).collect();
    ids.sort();
    ids.dedup();
    ids
}

/// `column` values of one run, keyed by round then seed.
pub fn by_round(rows: &[MetricsRow], run_id: &str, column: &str) -> BTreeMap<usize, BTreeMap<u64, f64>> {
    let mut out: BTreeMap<usize, BTreeMap<u64, f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.run_id == run_id) {
        if let Some(v) = r.value(column) {
            out.entry(r.round).or_default().insert(r.seed, v);
        }
    }
    out
}

/// One-sided sign-test p-value `P(X >= wins)` for `X ~ Binomial(n, 1/2)`.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    if wins == 0 {
        return 1.0;
    }
    // Binomial coefficients of a seed count are exact in f64.
    let mut coef = 1.0f64;
    let mut tail = 0.0;
    for k in 0..=n {
        if k > 0 {
            coef = coef * (n - k + 1) as f64 / k as f64;
        }
        if k >= wins {
            tail += coef;
        }
    }
    tail / 2f64.powi(n as i32)
}
