//! The subcommands, as library functions returning structured reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use apolab::apo::{prepare_lab, run_apo_observed, ExperimentConfig, ExperimentLog};
use apolab::reward;
use apolab::rng::{stream, Stream};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::metrics::{self, by_round, check_column, run_ids, sign_test_p, MetricsRow, Summary, VALUE_COLUMNS};
use crate::persist::{self, read_file, save_json, save_params, write_file};

pub const MANIFEST_SCHEMA: &str = "apolab-manifest/1";
pub const RM_EVAL_SCHEMA: &str = "apolab-rm-eval/1";
pub const LOG_FILE: &str = "log.json";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RM_EVAL_FILE: &str = "rm_eval.csv";
/// Optional cap on concurrently running seeds.
pub const WORKERS_ENV: &str = "APOLAB_WORKERS";

/// Reads an experiment config. Missing fields take their defaults; unknown
/// fields are rejected.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let bytes = read_file(path).map_err(|e| CliError::Config(e.to_string()))?;
    let config: ExperimentConfig =
        serde_json::from_slice(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(config)
}

/// Config from `--config`, or the defaults when no file is given.
pub fn resolve_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => load_config(p),
        None => Ok(ExperimentConfig::default()),
    }
}

/// Parses a seed list such as `1,2,5-8`. Duplicates are removed and the
/// result is sorted.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let bad = || CliError::Usage(format!("bad seed list {spec:?}; expected e.g. 1,2,5-8"));
    let mut seeds = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b || b - a > 100_000 {
                    return Err(bad());
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(part.parse().map_err(|_| bad())?),
        }
    }
    seeds.sort_unstable();
    seeds.dedup();
    if seeds.is_empty() {
        return Err(CliError::Usage("the seed list is empty".into()));
    }
    Ok(seeds)
}

/// Record of every file a command wrote, with SHA-256 checksums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub command: String,
    pub config_path: Option<String>,
    pub seeds: Vec<u64>,
    pub out_dir: String,
    /// Path relative to `out_dir` mapped to a hex digest.
    pub artifacts: BTreeMap<String, String>,
    pub failures: Vec<SeedFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn relative(out: &Path, path: &Path) -> String {
    path.strip_prefix(out).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

fn write_manifest(
    out: &Path,
    command: &str,
    config_path: Option<&Path>,
    seeds: &[u64],
    files: &[PathBuf],
    failures: Vec<SeedFailure>,
) -> Result<RunManifest> {
    let mut artifacts = BTreeMap::new();
    for f in files {
        artifacts.insert(relative(out, f), sha256_hex(&read_file(f)?));
    }
    let manifest = RunManifest {
        schema: MANIFEST_SCHEMA.into(),
        command: command.into(),
        config_path: config_path.map(|p| p.to_string_lossy().into_owned()),
        seeds: seeds.to_vec(),
        out_dir: out.to_string_lossy().into_owned(),
        artifacts,
        failures,
    };
    save_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenWorldSummary {
    pub n_queries: usize,
    pub n_candidates: usize,
    pub rm_train_queries: usize,
    pub llm_train_queries: usize,
    pub test_queries: usize,
    pub pref_pairs: usize,
    pub golden_examples: usize,
    pub dev_pairs: usize,
    pub test_pairs: usize,
}

/// Builds the world, split, D_P and golden set for the config's seed and
/// writes them to `out`.
pub fn gen_world(config_path: Option<&Path>, out: &Path) -> Result<GenWorldSummary> {
    let config = resolve_config(config_path)?;
    let lab = prepare_lab(&config.world, &config.split, config.world_seed(), config.seed)?;
    let mut files = persist::save_lab(out, &lab)?;
    let config_file = out.join("config.json");
    save_json(&config_file, &config)?;
    files.push(config_file);
    write_manifest(out, "gen-world", config_path, &[config.seed], &files, Vec::new())?;
    Ok(GenWorldSummary {
        n_queries: lab.world.n_queries(),
        n_candidates: lab.world.n_candidates(),
        rm_train_queries: lab.split.rm_train_queries.len(),
        llm_train_queries: lab.split.llm_train_queries.len(),
        test_queries: lab.split.test_queries.len(),
        pref_pairs: lab.d_p.len(),
        golden_examples: lab.golden_set.len(),
        dev_pairs: lab.split.dev_pairs.len(),
        test_pairs: lab.split.test_pairs.len(),
    })
}

fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| CliError::Config(e.to_string()))
}

fn sorted_seeds(seeds: &[u64]) -> Vec<u64> {
    let mut seeds = seeds.to_vec();
    seeds.sort_unstable();
    seeds.dedup();
    seeds
}

/// Runs `f` for every seed, concurrently, returning results in ascending
/// seed order.
fn per_seed<T: Send>(seeds: &[u64], f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<(u64, Result<T>)>> {
    let pool = worker_pool()?;
    let seeds = sorted_seeds(seeds);
    Ok(pool.install(|| seeds.par_iter().map(|&s| (s, f(s))).collect()))
}

fn seed_config(config: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        ..config.clone()
    }
}

fn seed_dir(out: &Path, config: &ExperimentConfig, seed: u64) -> PathBuf {
    out.join("runs").join(&config.tag).join(format!("seed-{seed}"))
}

/// Runs one seed and writes its private artifacts. Returns the log and the
/// written paths.
fn run_one(config: &ExperimentConfig, out: &Path) -> Result<(ExperimentLog, Vec<PathBuf>)> {
    let mut events = String::new();
    let log = run_apo_observed(config, |e| {
        events.push_str(&serde_json::to_string(e).expect("events serialize infallibly"));
        events.push('\n');
    })?;
    let dir = seed_dir(out, config, config.seed);
    let files = vec![
        dir.join(LOG_FILE),
        dir.join(EVENTS_FILE),
        dir.join("final_policy.bin"),
        dir.join("final_rm.bin"),
        dir.join("base_rm.bin"),
    ];
    save_json(&files[0], &log)?;
    write_file(&files[1], events.as_bytes())?;
    save_params(&files[2], &log.final_policy.params)?;
    save_params(&files[3], &log.final_rm.params)?;
    save_params(&files[4], &log.base_rm.params)?;
    Ok((log, files))
}

#[derive(Debug)]
pub struct RunReport {
    pub rows: Vec<MetricsRow>,
    pub manifest: RunManifest,
}

/// Splits per-seed outcomes into successes and failures, and turns the
/// failure pattern into the command's final status.
fn settle<T>(results: Vec<(u64, Result<T>)>) -> (Vec<(u64, T)>, Vec<SeedFailure>) {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(v) => ok.push((seed, v)),
            Err(e) => failed.push(SeedFailure {
                seed,
                error: e.to_string(),
            }),
        }
    }
    (ok, failed)
}

fn status(failed: &[SeedFailure], total: usize) -> Result<()> {
    match failed.len() {
        0 => Ok(()),
        n if n == total => Err(CliError::AllFailed(total)),
        n => Err(CliError::PartialFailure { failed: n, total }),
    }
}

/// Runs the experiment for every seed and writes per-seed logs, event
/// streams and snapshots plus the aggregate metrics CSV and manifest.
///
/// Seeds run concurrently, each into its own directory; the CSV is merged
/// afterwards in seed order. Returns the report alongside the status so
/// callers can inspect partial results.
pub fn run(config_path: Option<&Path>, seeds: &[u64], out: &Path) -> (Result<RunReport>, Result<()>) {
    let config = match resolve_config(config_path) {
        Ok(c) => c,
        Err(e) => return (Err(e), Ok(())),
    };
    let results = match per_seed(seeds, |s| run_one(&seed_config(&config, s), out)) {
        Ok(r) => r,
        Err(e) => return (Err(e), Ok(())),
    };
    let (ok, failed) = settle(results);
    let report = (|| {
        let mut rows = Vec::new();
        let mut files = Vec::new();
        for (seed, (log, written)) in &ok {
            for m in &log.rounds {
                rows.push(MetricsRow::new(
                    &config.tag,
                    *seed,
                    config.method.method.name(),
                    config.apo_enabled,
                    m,
                ));
            }
            files.extend(written.iter().cloned());
        }
        let metrics_path = out.join(METRICS_FILE);
        metrics::write_metrics(&metrics_path, &rows)?;
        files.push(metrics_path);
        let manifest = write_manifest(out, "run", config_path, &sorted_seeds(seeds), &files, failed.clone())?;
        Ok(RunReport { rows, manifest })
    })();
    (report, status(&failed, sorted_seeds(seeds).len()))
}

/// One reward-model evaluation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmEvalRow {
    pub run_id: String,
    pub seed: u64,
    pub variant: String,
    pub round: usize,
    pub rm_dev_acc: f64,
    pub rm_test_acc: f64,
    pub rm_dev_ece: f64,
    pub rm_test_ece: f64,
    pub rm_shift_acc: f64,
    pub base_rm_shift_acc: f64,
}

/// Runs the configured pipeline per seed and reports reward-model quality
/// for every round (round 0 is the base model), plus a reliability diagram
/// of the final reward model on the test pairs.
pub fn eval_rm(config_path: Option<&Path>, seeds: &[u64], out: &Path) -> (Result<Vec<RmEvalRow>>, Result<()>) {
    let config = match resolve_config(config_path) {
        Ok(c) => c,
        Err(e) => return (Err(e), Ok(())),
    };
    let results = match per_seed(seeds, |s| {
        let cfg = seed_config(&config, s);
        let log = apolab::apo::run_apo(&cfg)?;
        let lab = prepare_lab(&cfg.world, &cfg.split, cfg.world_seed(), cfg.seed)?;
        let report = reward::ece(
            &log.final_rm,
            &lab.world,
            &lab.split.test_pairs,
            cfg.eval.ece_bins,
            &mut stream(cfg.seed, Stream::Calibration),
        )?;
        let path = seed_dir(out, &cfg, s).join("reliability.json");
        save_json(&path, &report)?;
        Ok((log, path))
    }) {
        Ok(r) => r,
        Err(e) => return (Err(e), Ok(())),
    };
    let (ok, failed) = settle(results);
    let report = (|| {
        let mut rows = Vec::new();
        let mut files = Vec::new();
        for (seed, (log, path)) in &ok {
            for m in std::iter::once(&log.initial).chain(&log.rounds) {
                rows.push(RmEvalRow {
                    run_id: config.tag.clone(),
                    seed: *seed,
                    variant: if m.round == 0 { "base".into() } else { rm_label(&config) },
                    round: m.round,
                    rm_dev_acc: m.rm_dev_acc,
                    rm_test_acc: m.rm_test_acc,
                    rm_dev_ece: m.rm_dev_ece,
                    rm_test_ece: m.rm_test_ece,
                    rm_shift_acc: m.rm_shift_acc,
                    base_rm_shift_acc: m.base_rm_shift_acc,
                });
            }
            files.push(path.clone());
        }
        let csv_path = out.join(RM_EVAL_FILE);
        let text = if rows.is_empty() {
            format!("#schema={RM_EVAL_SCHEMA}\n")
        } else {
            metrics::to_csv(RM_EVAL_SCHEMA, &rows)
        };
        write_file(&csv_path, text.as_bytes())?;
        files.push(csv_path);
        write_manifest(out, "eval-rm", config_path, &sorted_seeds(seeds), &files, failed.clone())?;
        Ok(rows)
    })();
    (report, status(&failed, sorted_seeds(seeds).len()))
}

fn rm_label(config: &ExperimentConfig) -> String {
    if config.apo_enabled {
        config.rm_variant.name().to_string()
    } else {
        "base".to_string()
    }
}

/// Per-round comparison of two runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub variant: String,
    pub rounds: Vec<RoundComparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundComparison {
    pub round: usize,
    pub metrics: Vec<MetricComparison>,
    /// Seeds present in both runs where the variant's policy_true_utility is
    /// strictly higher.
    pub sign_wins: usize,
    pub sign_n: usize,
    /// One-sided sign-test p-value for the wins.
    pub sign_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricComparison {
    pub metric: String,
    pub baseline: Summary,
    pub variant: Summary,
    /// `variant.mean - baseline.mean`.
    pub delta: f64,
}

fn load_rows(files: &[PathBuf]) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for f in files {
        rows.extend(metrics::read_metrics(f)?);
    }
    Ok(rows)
}

fn require_tag(rows: &[MetricsRow], tag: &str) -> Result<()> {
    if rows.iter().any(|r| r.run_id == tag) {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "run id {tag:?} not found; available: {}",
            run_ids(rows).join(", ")
        )))
    }
}

pub fn compare_rows(rows: &[MetricsRow], baseline: &str, variant: &str) -> Result<Comparison> {
    require_tag(rows, baseline)?;
    require_tag(rows, variant)?;
    let mut per_round: BTreeMap<usize, Vec<MetricComparison>> = BTreeMap::new();
    for column in VALUE_COLUMNS {
        let b = by_round(rows, baseline, column);
        let v = by_round(rows, variant, column);
        for (round, bv) in &b {
            let Some(vv) = v.get(round) else { continue };
            let bs = Summary::of(&bv.values().copied().collect::<Vec<_>>()).expect("non-empty round");
            let vs = Summary::of(&vv.values().copied().collect::<Vec<_>>()).expect("non-empty round");
            per_round.entry(*round).or_default().push(MetricComparison {
                metric: column.to_string(),
                baseline: bs,
                variant: vs,
                delta: vs.mean - bs.mean,
            });
        }
    }
    let b_util = by_round(rows, baseline, "policy_true_utility");
    let v_util = by_round(rows, variant, "policy_true_utility");
    let rounds = per_round
        .into_iter()
        .map(|(round, metrics)| {
            let (bu, vu) = (&b_util[&round], &v_util[&round]);
            let paired: Vec<(f64, f64)> = bu.iter().filter_map(|(s, b)| vu.get(s).map(|v| (*b, *v))).collect();
            let wins = paired.iter().filter(|(b, v)| v > b).count();
            RoundComparison {
                round,
                metrics,
                sign_wins: wins,
                sign_n: paired.len(),
                sign_p: sign_test_p(wins, paired.len()),
            }
        })
        .collect();
    Ok(Comparison {
        baseline: baseline.into(),
        variant: variant.into(),
        rounds,
    })
}

pub fn compare(files: &[PathBuf], baseline: &str, variant: &str) -> Result<Comparison> {
    compare_rows(&load_rows(files)?, baseline, variant)
}

/// One curve of a plot export: a run's column, labelled `label`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeriesSpec {
    pub label: String,
    pub run_id: String,
    pub column: String,
}

/// Parses `run_id:column` or `label=run_id:column`, comma-separated.
pub fn parse_series(spec: &str) -> Result<Vec<SeriesSpec>> {
    let bad = |p: &str| CliError::Usage(format!("bad series {p:?}; expected [label=]run_id:column"));
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (label, rest) = match part.split_once('=') {
            Some((l, r)) => (Some(l.trim()), r),
            None => (None, part),
        };
        let (run_id, column) = rest.rsplit_once(':').ok_or_else(|| bad(part))?;
        let (run_id, column) = (run_id.trim(), column.trim());
        if run_id.is_empty() {
            return Err(bad(part));
        }
        check_column(column)?;
        out.push(SeriesSpec {
            label: label.map_or_else(|| format!("{run_id}:{column}"), str::to_string),
            run_id: run_id.into(),
            column: column.into(),
        });
    }
    if out.is_empty() {
        return Err(CliError::Usage("no series requested".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub series: String,
    pub round: usize,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn plot_rows(rows: &[MetricsRow], series: &[SeriesSpec]) -> Result<Vec<PlotRow>> {
    let mut out = Vec::new();
    for s in series {
        require_tag(rows, &s.run_id)?;
        for (round, values) in by_round(rows, &s.run_id, &s.column) {
            let sum = Summary::of(&values.values().copied().collect::<Vec<_>>()).expect("non-empty round");
            out.push(PlotRow {
                series: s.label.clone(),
                round,
                mean: sum.mean,
                std: sum.std,
                n: sum.n,
            });
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage("the requested series contain no seeds".into()));
    }
    Ok(out)
}

/// Writes the long-format plot table. Nothing is written on error.
pub fn export_plot(files: &[PathBuf], series: &str, out: &Path) -> Result<Vec<PlotRow>> {
    let specs = parse_series(series)?;
    let rows = plot_rows(&load_rows(files)?, &specs)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).expect("plot rows serialize infallibly");
    }
    write_file(out, &w.into_inner().expect("in-memory writer"))?;
    Ok(rows)
}

/// Plain-text rendering of a comparison.
pub fn render_comparison(c: &Comparison) -> String {
    let mut s = format!("baseline: {}  variant: {}\n", c.baseline, c.variant);
    for r in &c.rounds {
        s.push_str(&format!(
            "round {}  sign test on policy_true_utility: {}/{} seeds, p = {:.4}\n",
            r.round, r.sign_wins, r.sign_n, r.sign_p
        ));
        for m in &r.metrics {
            s.push_str(&format!(
                "  {:<20} {:>10.4} ± {:<8.4} {:>10.4} ± {:<8.4} delta {:+.4}\n",
                m.metric, m.baseline.mean, m.baseline.std, m.variant.mean, m.variant.std, m.delta
            ));
        }
    }
    s
}
