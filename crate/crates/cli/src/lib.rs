//! Scenario runner behind the `htsim` binary: config loading, thread pool, result files.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use htsim::experiments::{run, Clause, ExperimentConfig, Outcome, Resolved, Scenario};
use serde::Serialize;

/// Environment override for the output directory; `--out` still wins.
pub const OUT_ENV: &str = "HTSIM_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Pass,
    ToleranceFail,
    Error,
}

impl Status {
    pub fn code(self) -> i32 {
        match self {
            Status::Pass => 0,
            Status::Error => 1,
            Status::ToleranceFail => 2,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::ToleranceFail => "fail",
            Status::Error => "error",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
}

pub struct RunReport {
    pub status: Status,
    pub out_dir: Option<PathBuf>,
    pub outcome: Option<Outcome>,
    pub reason: Option<String>,
}

#[derive(Serialize)]
struct Summary<'a> {
    scenario: &'a str,
    status: &'a str,
    exit_code: i32,
    reason: Option<&'a str>,
    clauses: &'a [Clause],
    notes: &'a [String],
    runtime_s: f64,
    runtime_budget_s: Option<f64>,
    threads: usize,
    seed: Option<u64>,
    commit: String,
    config: Option<&'a Resolved>,
}

fn commit_hash() -> String {
    Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn out_dir_for(opts: &RunOptions, cfg: Option<&ExperimentConfig>) -> Option<PathBuf> {
    if let Some(p) = &opts.out {
        return Some(p.clone());
    }
    if let Ok(p) = std::env::var(OUT_ENV) {
        if !p.is_empty() {
            return Some(PathBuf::from(p));
        }
    }
    let cfg = cfg?;
    Some(cfg.output.dir.as_ref().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("results").join(cfg.scenario.name())))
}

fn load(path: &Path, opts: &RunOptions) -> Result<(ExperimentConfig, Resolved), String> {
    let text = fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let mut cfg = ExperimentConfig::from_json(&text).map_err(|e| format!("cannot parse {}: {e}", path.display()))?;
    if opts.seed.is_some() {
        cfg.seed = opts.seed;
    }
    let resolved = Resolved::from_config(&cfg).map_err(|e| e.to_string())?;
    Ok((cfg, resolved))
}

fn pool(threads: Option<usize>) -> Result<rayon::ThreadPool, String> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err("--threads must be at least 1".into());
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| format!("thread pool: {e}"))
}

pub fn report_text(resolved: &Resolved, outcome: &Outcome, status: Status, runtime: f64, threads: usize, commit: &str) -> String {
    let mut s = String::new();
    s.push_str(&format!("htsim {} - {}\n", resolved.scenario.name(), resolved.scenario.summary()));
    s.push_str(&format!("status: {} (exit {})\n", status.label(), status.code()));
    s.push_str(&format!("runtime: {runtime:.2} s on {threads} thread(s), seed {}, commit {commit}\n\n", resolved.seed));
    let width = outcome.clauses.iter().map(|c| c.name.len()).max().unwrap_or(10);
    for c in &outcome.clauses {
        s.push_str(&format!(
            "  [{}] criterion {:>2}  {:<width$}  {:>12.4e}  {}\n",
            if c.pass { "PASS" } else { "FAIL" },
            c.criterion,
            c.name,
            c.measured,
            c.target
        ));
    }
    if !outcome.notes.is_empty() {
        s.push_str("\nnotes:\n");
        for n in &outcome.notes {
            s.push_str(&format!("  - {n}\n"));
        }
    }
    s.push_str(&format!("\n{} rows in results.csv\n", outcome.rows.len()));
    s
}

fn write_outputs(dir: &Path, resolved: &Resolved, outcome: &Outcome, status: Status, runtime: f64, threads: usize) -> Result<(), String> {
    let io = |e: std::io::Error| format!("writing {}: {e}", dir.display());
    fs::create_dir_all(dir).map_err(io)?;
    fs::write(dir.join("results.csv"), outcome.csv()).map_err(io)?;
    let commit = commit_hash();
    let budget = outcome.clauses.iter().filter(|c| c.name.ends_with("runtime (s)")).filter_map(|c| c.target.trim_start_matches("<= ").parse::<f64>().ok()).reduce(f64::max);
    let summary = Summary {
        scenario: resolved.scenario.name(),
        status: status.label(),
        exit_code: status.code(),
        reason: None,
        clauses: &outcome.clauses,
        notes: &outcome.notes,
        runtime_s: runtime,
        runtime_budget_s: budget,
        threads,
        seed: Some(resolved.seed),
        commit: commit.clone(),
        config: Some(resolved),
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary).expect("summary serializes")).map_err(io)?;
    fs::write(dir.join("report.txt"), report_text(resolved, outcome, status, runtime, threads, &commit)).map_err(io)?;
    for (name, state, a) in &outcome.states {
        htsim::io::save_state(state, &dir.join(format!("state-{name}")), Some(*a)).map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn write_error(dir: &Path, scenario: &str, reason: &str, threads: usize, config: Option<&Resolved>) {
    let summary = Summary {
        scenario,
        status: Status::Error.label(),
        exit_code: Status::Error.code(),
        reason: Some(reason),
        clauses: &[],
        notes: &[],
        runtime_s: 0.0,
        runtime_budget_s: None,
        threads,
        seed: config.map(|c| c.seed),
        commit: commit_hash(),
        config,
    };
    if fs::create_dir_all(dir).is_ok() {
        let _ = fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary).expect("summary serializes"));
    }
}

/// Loads, validates and runs one config file, writing results.csv, summary.json and report.txt.
pub fn run_config(path: &Path, opts: &RunOptions) -> RunReport {
    let error = |reason: String, out_dir: Option<PathBuf>| RunReport { status: Status::Error, out_dir, outcome: None, reason: Some(reason) };
    let (cfg, resolved) = match load(path, opts) {
        Ok(x) => x,
        Err(reason) => return error(reason, None),
    };
    let dir = out_dir_for(opts, Some(&cfg)).expect("config present");
    let threads_pool = match pool(opts.threads) {
        Ok(p) => p,
        Err(reason) => return error(reason, None),
    };
    let threads = threads_pool.current_num_threads();
    let start = Instant::now();
    let result = threads_pool.install(|| run(&resolved));
    let runtime = start.elapsed().as_secs_f64();
    match result {
        Ok(outcome) => {
            let status = if outcome.passed() { Status::Pass } else { Status::ToleranceFail };
            if let Err(reason) = write_outputs(&dir, &resolved, &outcome, status, runtime, threads) {
                return error(reason, Some(dir));
            }
            RunReport { status, out_dir: Some(dir), outcome: Some(outcome), reason: None }
        }
        Err(e) => {
            let reason = e.to_string();
            write_error(&dir, resolved.scenario.name(), &reason, threads, Some(&resolved));
            error(reason, Some(dir))
        }
    }
}

pub fn list_text() -> String {
    Scenario::ALL.iter().map(|s| format!("{:<20} {}\n", s.name(), s.summary())).collect()
}

pub fn describe_text(name: &str) -> Result<String, String> {
    Scenario::parse(name).map(|s| s.describe()).map_err(|e| e.to_string())
}

/// Machine-readable failure line for stderr.
pub fn error_json(reason: &str) -> String {
    serde_json::json!({ "status": "error", "exit_code": 1, "reason": reason }).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!([Status::Pass, Status::ToleranceFail, Status::Error].map(Status::code), [0, 2, 1]);
    }

    #[test]
    fn flag_beats_config_dir() {
        let cfg = ExperimentConfig::from_json(r#"{"scenario":"oscillation","output":{"dir":"x/y"}}"#).unwrap();
        let opts = RunOptions { out: Some("flag".into()), ..Default::default() };
        assert_eq!(out_dir_for(&opts, Some(&cfg)), Some(PathBuf::from("flag")));
        if std::env::var_os(OUT_ENV).is_none() {
            assert_eq!(out_dir_for(&RunOptions::default(), Some(&cfg)), Some(PathBuf::from("x/y")));
            let bare = ExperimentConfig::from_json(r#"{"scenario":"oscillation"}"#).unwrap();
            assert_eq!(out_dir_for(&RunOptions::default(), Some(&bare)), Some(PathBuf::from("results/oscillation")));
        }
    }

    #[test]
    fn error_line_is_json() {
        let v: serde_json::Value = serde_json::from_str(&error_json("bad \"grid\"")).unwrap();
        assert_eq!(v["reason"], "bad \"grid\"");
        assert!(describe_text("nope").is_err());
        assert_eq!(list_text().lines().count(), Scenario::ALL.len());
    }
}
