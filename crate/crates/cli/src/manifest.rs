//! Manifests: newline-separated lists of config files, run as one suite.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nonlocal_acf::functionals::Outcome;
use serde::{Deserialize, Serialize};

use crate::config::{Claim, ExperimentConfig};
use crate::error::{io_error, CliError, Result};
use crate::report::{write_atomic, Report};
use crate::run::run;

/// Config paths listed in a manifest, resolved against its directory. Blank lines
/// and lines starting with `#` are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_file() {
        return Err(CliError::MissingManifest(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(io_error(path))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| base.join(l))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub config: PathBuf,
    pub name: String,
    pub claim: Option<Claim>,
    pub status: Option<Outcome>,
    pub failed_checks: Vec<String>,
    pub error: Option<String>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub experiments: usize,
    pub passed: usize,
    pub failed: usize,
    pub hypothesis_not_met: usize,
    pub errors: usize,
    pub entries: Vec<SuiteEntry>,
}

impl SuiteSummary {
    pub fn ok(&self) -> bool {
        self.failed == 0 && self.errors == 0
    }

    /// Names of failed or erroring experiments.
    pub fn failing(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.error.is_some() || e.status == Some(Outcome::Fail))
            .map(|e| e.name.as_str())
            .collect()
    }
}

/// Overrides applied to every config of a suite.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub jobs: Option<usize>,
    pub seed: Option<u64>,
}

impl RunOptions {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(j) = self.jobs {
            cfg.jobs = Some(j);
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
    }
}

/// Runs every config of the manifest in order, writes each report to `out` and a
/// `summary.json` next to them. Experiment errors are recorded, not propagated.
pub fn verify_all(
    manifest: &Path,
    out: &Path,
    opts: RunOptions,
    mut progress: impl FnMut(&SuiteEntry),
) -> Result<SuiteSummary> {
    let configs = read_manifest(manifest)?;
    let mut summary = SuiteSummary::default();
    for path in configs {
        let start = Instant::now();
        let outcome = ExperimentConfig::load(&path).and_then(|mut cfg| {
            opts.apply(&mut cfg);
            let report = run(&cfg)?;
            report.write(out)?;
            Ok(report)
        });
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let entry = match outcome {
            Ok(Report {
                claim,
                status,
                ref checks,
                ref config,
                wall_time_s,
                ..
            }) => SuiteEntry {
                config: path.clone(),
                name: config.name(),
                claim: Some(claim),
                status: Some(status),
                failed_checks: checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect(),
                error: None,
                wall_time_s,
            },
            Err(e) => SuiteEntry {
                config: path.clone(),
                name,
                claim: None,
                status: None,
                failed_checks: Vec::new(),
                error: Some(e.to_string()),
                wall_time_s: start.elapsed().as_secs_f64(),
            },
        };
        summary.experiments += 1;
        match (&entry.error, entry.status) {
            (Some(_), _) => summary.errors += 1,
            (None, Some(Outcome::Pass)) => summary.passed += 1,
            (None, Some(Outcome::HypothesisNotMet)) => summary.hypothesis_not_met += 1,
            _ => summary.failed += 1,
        }
        progress(&entry);
        summary.entries.push(entry);
    }
    std::fs::create_dir_all(out).map_err(io_error(out))?;
    let mut json = serde_json::to_vec_pretty(&summary)?;
    json.push(b'\n');
    write_atomic(&out.join("summary.json"), &json)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_skips_comments_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("suite.txt");
        std::fs::write(&m, "# comment\n\na.toml\n  sub/b.toml  \n").unwrap();
        let paths = read_manifest(&m).unwrap();
        assert_eq!(paths, vec![dir.path().join("a.toml"), dir.path().join("sub/b.toml")]);
    }

    #[test]
    fn missing_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_manifest(&dir.path().join("none.txt")),
            Err(CliError::MissingManifest(_))
        ));
    }
}
