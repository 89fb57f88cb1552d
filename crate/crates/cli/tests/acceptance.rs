//! Acceptance suite: runs the default manifest, prints one PASS/FAIL line per
//! criterion, then reruns it with a different thread count and compares CSVs.
//!
//! A FAIL line does not fail the test target; set `ACCEPTANCE_STRICT=1` for that.
//! Experiment errors (as opposed to failed checks) always do.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use nonlocal_acf::functionals::Outcome;
use nonlocal_acf_cli::manifest::{verify_all, RunOptions, SuiteEntry, SuiteSummary};

const CRITERIA: [(u32, &str); 12] = [
    (1, "constants and moment integrals"),
    (2, "operator oracles and product rule"),
    (3, "mean value and Dirichlet problem"),
    (4, "Green identities"),
    (5, "functional route equivalence"),
    (6, "scaling invariance"),
    (7, "monotonicity"),
    (8, "stability as s -> 1"),
    (9, "Bochner identities"),
    (10, "local limits"),
    (11, "bound experiments"),
    (12, "determinism"),
];

fn manifest() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../experiments/default.manifest")
}

/// `c07_mono_G_bump` -> 7
fn criterion_of(name: &str) -> Option<u32> {
    name.strip_prefix('c')?.get(..2)?.parse().ok()
}

fn describe(e: &SuiteEntry) -> String {
    match (&e.error, e.status) {
        (Some(err), _) => format!("{}: error {err}", e.name),
        (None, Some(Outcome::Pass)) => format!("{}: pass", e.name),
        (None, Some(Outcome::HypothesisNotMet)) => format!("{}: hypothesis not met", e.name),
        (None, _) => format!("{}: failed {}", e.name, e.failed_checks.join(", ")),
    }
}

fn csv_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .expect("output directory")
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (name, std::fs::read(&p).expect("csv readable"))
        })
        .collect()
}

fn run_suite(out: &Path, jobs: usize) -> SuiteSummary {
    let opts = RunOptions {
        jobs: Some(jobs),
        seed: None,
    };
    verify_all(&manifest(), out, opts, |e| eprintln!("  [{:>7.1}s] {}", e.wall_time_s, describe(e)))
        .expect("default manifest runs")
}

fn main() -> ExitCode {
    let first = tempfile::tempdir().expect("tempdir");
    let second = tempfile::tempdir().expect("tempdir");

    eprintln!("acceptance: running the default manifest");
    let summary = run_suite(first.path(), 1);
    let mut by_criterion: BTreeMap<u32, Vec<&SuiteEntry>> = BTreeMap::new();
    for e in &summary.entries {
        match criterion_of(&e.name) {
            Some(c) => by_criterion.entry(c).or_default().push(e),
            None => eprintln!("  config {} is not tied to a criterion", e.name),
        }
    }

    eprintln!("acceptance: rerunning with 2 threads for the determinism check");
    let rerun = run_suite(second.path(), 2);
    let a = csv_files(first.path());
    let b = csv_files(second.path());
    let differing: Vec<&String> = a.keys().filter(|k| b.get(*k) != a.get(*k)).collect();
    let determinism = !a.is_empty() && a.len() == b.len() && differing.is_empty();

    let mut failed = Vec::new();
    let errors = summary.errors + rerun.errors;
    println!();
    for (id, title) in CRITERIA {
        let (pass, detail) = if id == 12 {
            let detail = if differing.is_empty() {
                format!("{} CSV files byte-identical across runs with 1 and 2 threads", a.len())
            } else {
                format!("differing CSV files: {differing:?}")
            };
            (determinism, detail)
        } else {
            let entries = by_criterion.get(&id).map(Vec::as_slice).unwrap_or(&[]);
            let pass = !entries.is_empty()
                && entries.iter().all(|e| e.error.is_none() && e.status == Some(Outcome::Pass));
            let detail = if entries.is_empty() {
                "no experiments configured".to_string()
            } else {
                entries.iter().map(|e| describe(e)).collect::<Vec<_>>().join("; ")
            };
            (pass, detail)
        };
        if !pass {
            failed.push(id);
        }
        println!("criterion {id:>2} {}: {title} ({detail})", if pass { "PASS" } else { "FAIL" });
    }
    println!();
    println!(
        "acceptance: {} of {} criteria pass; {} experiments, {} errors",
        CRITERIA.len() - failed.len(),
        CRITERIA.len(),
        summary.experiments,
        errors
    );

    let strict = std::env::var_os("ACCEPTANCE_STRICT").is_some_and(|v| v != "0");
    if errors > 0 || (strict && !failed.is_empty()) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
