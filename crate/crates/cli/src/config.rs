//! Experiment configs: one TOML file per experiment.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nonlocal_acf::QuadratureSpec;
use serde::{Deserialize, Serialize};

use crate::error::{io_error, CliError, Result};

/// The claim an experiment checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Claim {
    #[serde(rename = "constants")]
    Constants,
    #[serde(rename = "moments")]
    Moments,
    #[serde(rename = "oracles")]
    Oracles,
    #[serde(rename = "meanvalue")]
    MeanValue,
    #[serde(rename = "greens")]
    Greens,
    #[serde(rename = "routes")]
    Routes,
    #[serde(rename = "scaling")]
    Scaling,
    #[serde(rename = "monotonicity-G")]
    MonotonicityG,
    #[serde(rename = "monotonicity-grad")]
    MonotonicityGrad,
    #[serde(rename = "monotonicity-grad-f")]
    MonotonicityGradF,
    #[serde(rename = "stability-G")]
    StabilityG,
    #[serde(rename = "stability-grad")]
    StabilityGrad,
    #[serde(rename = "bochner-G")]
    BochnerG,
    #[serde(rename = "bochner-grad")]
    BochnerGrad,
    #[serde(rename = "limits")]
    Limits,
    #[serde(rename = "bound")]
    Bound,
    #[serde(rename = "gradest")]
    GradEst,
}

impl Claim {
    pub const ALL: [Claim; 17] = [
        Claim::Constants,
        Claim::Moments,
        Claim::Oracles,
        Claim::MeanValue,
        Claim::Greens,
        Claim::Routes,
        Claim::Scaling,
        Claim::MonotonicityG,
        Claim::MonotonicityGrad,
        Claim::MonotonicityGradF,
        Claim::StabilityG,
        Claim::StabilityGrad,
        Claim::BochnerG,
        Claim::BochnerGrad,
        Claim::Limits,
        Claim::Bound,
        Claim::GradEst,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Claim::Constants => "constants",
            Claim::Moments => "moments",
            Claim::Oracles => "oracles",
            Claim::MeanValue => "meanvalue",
            Claim::Greens => "greens",
            Claim::Routes => "routes",
            Claim::Scaling => "scaling",
            Claim::MonotonicityG => "monotonicity-G",
            Claim::MonotonicityGrad => "monotonicity-grad",
            Claim::MonotonicityGradF => "monotonicity-grad-f",
            Claim::StabilityG => "stability-G",
            Claim::StabilityGrad => "stability-grad",
            Claim::BochnerG => "bochner-G",
            Claim::BochnerGrad => "bochner-grad",
            Claim::Limits => "limits",
            Claim::Bound => "bound",
            Claim::GradEst => "gradest",
        }
    }

    /// The subcommand that runs this claim.
    pub fn subcommand(self) -> &'static str {
        match self {
            Claim::Constants => "constants",
            Claim::Moments => "moments",
            Claim::Oracles => "eval",
            Claim::MeanValue => "meanvalue",
            Claim::Greens => "greens",
            Claim::Routes | Claim::Scaling => "scaling",
            Claim::MonotonicityG | Claim::MonotonicityGrad | Claim::MonotonicityGradF => "monotonicity",
            Claim::StabilityG | Claim::StabilityGrad => "stability",
            Claim::BochnerG | Claim::BochnerGrad => "bochner",
            Claim::Limits => "limits",
            Claim::Bound => "bound",
            Claim::GradEst => "gradest",
        }
    }
}

impl fmt::Display for Claim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Claim {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Claim::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| CliError::Invalid(format!("unknown claim id `{s}`")))
    }
}

/// Which functional density an experiment uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DensityName {
    /// `G_u`
    Energy,
    /// `|grad^s u|^2`
    Grad,
}

/// Overrides of the default quadrature for the experiment's dimension.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecOverrides {
    pub panels: Option<usize>,
    pub grading_ratio: Option<f64>,
    pub nodes_per_panel: Option<usize>,
    pub angular_nodes: Option<usize>,
    pub tail_tol: Option<f64>,
    pub target_rel_tol: Option<f64>,
    pub cache_quantum: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub claim: Claim,
    /// Stem of the output files; defaults to the config file stem.
    pub name: Option<String>,
    /// Catalog id of the main field.
    pub field: Option<String>,
    /// Second field (identity partner, subharmonic field, inner-product partner).
    pub other_field: Option<String>,
    /// Field averaged by the kernel limit.
    pub kernel_field: Option<String>,
    #[serde(default = "default_dim")]
    pub n: usize,
    /// Dimension grid for `constants` and `moments`.
    pub dims: Option<Vec<usize>>,
    /// Moment heights for `moments`.
    pub orders: Option<Vec<usize>>,
    pub s: Option<f64>,
    pub s_grid: Option<Vec<f64>>,
    pub radius: Option<f64>,
    pub radii: Option<Vec<f64>>,
    pub lambdas: Option<Vec<f64>>,
    /// Evaluation points, each with up to three coordinates.
    pub points: Option<Vec<Vec<f64>>>,
    /// Number of seeded random points.
    pub random_points: Option<usize>,
    /// Radius of the ball random points are drawn from.
    pub sample_radius: Option<f64>,
    pub density: Option<DensityName>,
    pub quadrature: Option<SpecOverrides>,
    pub jobs: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_dim() -> usize {
    1
}

fn check_grid(name: &str, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(CliError::Invalid(format!("`{name}` is empty")));
    }
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Invalid(format!("`{name}` has a non-finite entry")));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CliError::Invalid(format!("`{name}` must be strictly increasing")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config {
            path: "<inline>".into(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_error(path))?;
        let mut cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        if cfg.name.is_none() {
            cfg.name = path.file_stem().map(|s| s.to_string_lossy().into_owned());
        }
        cfg.validate().map_err(|e| CliError::Config {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.n) {
            return Err(CliError::Invalid(format!("n = {} is outside 1..=3", self.n)));
        }
        for (name, grid) in [
            ("s_grid", &self.s_grid),
            ("radii", &self.radii),
            ("lambdas", &self.lambdas),
        ] {
            if let Some(g) = grid {
                check_grid(name, g)?;
            }
        }
        for (name, grid) in [("dims", &self.dims), ("orders", &self.orders)] {
            if let Some(g) = grid {
                let as_f: Vec<f64> = g.iter().map(|v| *v as f64).collect();
                check_grid(name, &as_f)?;
            }
        }
        if let Some(pts) = &self.points {
            if pts.is_empty() {
                return Err(CliError::Invalid("`points` is empty".into()));
            }
            if let Some(p) = pts.iter().find(|p| p.len() != self.n) {
                return Err(CliError::Invalid(format!("point {p:?} does not have n = {} coordinates", self.n)));
            }
        }
        if self.jobs == Some(0) {
            return Err(CliError::Invalid("`jobs` must be at least 1".into()));
        }
        self.spec().validate().map_err(|e| CliError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.claim.as_str().to_string())
    }

    /// Default quadrature for the dimension with the overrides applied.
    pub fn spec(&self) -> QuadratureSpec {
        self.spec_for(self.n)
    }

    pub fn spec_for(&self, n: usize) -> QuadratureSpec {
        let mut spec = QuadratureSpec::for_dim(n);
        if let Some(o) = &self.quadrature {
            if let Some(v) = o.panels {
                spec.panels = v;
            }
            if let Some(v) = o.grading_ratio {
                spec.grading_ratio = v;
            }
            if let Some(v) = o.nodes_per_panel {
                spec.nodes_per_panel = v;
            }
            if let Some(v) = o.angular_nodes {
                spec.angular_nodes = v;
            }
            if let Some(v) = o.tail_tol {
                spec.tail_tol = v;
            }
            if let Some(v) = o.target_rel_tol {
                spec.target_rel_tol = v;
            }
            if let Some(v) = o.cache_quantum {
                spec.cache_quantum = v;
            }
        }
        spec
    }

    fn missing(&self, key: &str) -> CliError {
        CliError::Invalid(format!("claim `{}` needs `{key}`", self.claim))
    }

    pub fn field_id(&self) -> Result<&str> {
        self.field.as_deref().ok_or_else(|| self.missing("field"))
    }

    pub fn other_field_id(&self) -> Result<&str> {
        self.other_field.as_deref().ok_or_else(|| self.missing("other_field"))
    }

    pub fn order(&self) -> Result<f64> {
        self.s.ok_or_else(|| self.missing("s"))
    }

    pub fn order_grid(&self) -> Result<Vec<f64>> {
        match (&self.s_grid, self.s) {
            (Some(g), _) => Ok(g.clone()),
            (None, Some(s)) => Ok(vec![s]),
            (None, None) => Err(self.missing("s_grid")),
        }
    }

    pub fn single_radius(&self) -> Result<f64> {
        self.radius.ok_or_else(|| self.missing("radius"))
    }

    pub fn radius_grid(&self) -> Result<&[f64]> {
        self.radii.as_deref().ok_or_else(|| self.missing("radii"))
    }

    pub fn lambda_grid(&self) -> Result<&[f64]> {
        self.lambdas.as_deref().ok_or_else(|| self.missing("lambdas"))
    }

    /// Configured points padded to three coordinates.
    pub fn point_list(&self) -> Option<Vec<[f64; 3]>> {
        self.points.as_ref().map(|pts| {
            pts.iter()
                .map(|p| {
                    let mut q = [0.0; 3];
                    q[..p.len()].copy_from_slice(p);
                    q
                })
                .collect()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_config() {
        let cfg = ExperimentConfig::parse("claim = \"constants\"\nn = 2\ns = 0.5\n").unwrap();
        assert_eq!(cfg.claim, Claim::Constants);
        assert_eq!(cfg.n, 2);
        assert_eq!(cfg.spec().angular_nodes, QuadratureSpec::for_dim(2).angular_nodes);
    }

    #[test]
    fn rejects_unknown_keys_and_claims() {
        assert!(ExperimentConfig::parse("claim = \"constants\"\nfoo = 1\n").is_err());
        assert!(ExperimentConfig::parse("claim = \"nope\"\n").is_err());
        assert!(ExperimentConfig::parse("claim = \"constants\"\n[quadrature]\npanel = 3\n").is_err());
    }

    #[test]
    fn rejects_unsorted_or_empty_grids() {
        assert!(ExperimentConfig::parse("claim = \"bound\"\nradii = [0.5, 0.1]\n").is_err());
        assert!(ExperimentConfig::parse("claim = \"bound\"\nradii = []\n").is_err());
        assert!(ExperimentConfig::parse("claim = \"stability-G\"\ns_grid = [0.6, 0.6]\n").is_err());
    }

    #[test]
    fn overrides_apply_and_are_validated() {
        let cfg = ExperimentConfig::parse("claim = \"constants\"\n[quadrature]\npanels = 20\n").unwrap();
        assert_eq!(cfg.spec().panels, 20);
        assert!(ExperimentConfig::parse("claim = \"constants\"\n[quadrature]\ngrading_ratio = 1.5\n").is_err());
    }

    #[test]
    fn claim_ids_round_trip() {
        for c in Claim::ALL {
            assert_eq!(c.as_str().parse::<Claim>().unwrap(), c);
            let toml_text = format!("claim = \"{c}\"\n");
            assert_eq!(ExperimentConfig::parse(&toml_text).unwrap().claim, c);
        }
    }
}
