use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::{Grid, SystemParams};
use crate::reliability::{Method, SolverConfig};
use crate::sim::SimConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub bound: usize,
    /// Defaults to `max(2, bound / 5)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { bound: 30, margin: None }
    }
}

/// Parameter lists for the sweep commands. Empty lists fall back to the
/// single value in `params`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub fault_probs: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub protect_costs: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub attack_costs: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub utilizations: Vec<f64>,
}

/// A strategy to simulate or certify.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PolicyRef {
    /// Solved reliability policy.
    Optimal,
    AlwaysProtect,
    NeverProtect,
    /// Solved security-game strategy pair.
    Equilibrium,
    /// A policy table written by `solve-reliability`.
    File(PathBuf),
}

impl PolicyRef {
    pub fn name(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for PolicyRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyRef::Optimal => f.write_str("optimal"),
            PolicyRef::AlwaysProtect => f.write_str("always-protect"),
            PolicyRef::NeverProtect => f.write_str("never-protect"),
            PolicyRef::Equilibrium => f.write_str("equilibrium"),
            PolicyRef::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

impl FromStr for PolicyRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "optimal" => PolicyRef::Optimal,
            "always-protect" => PolicyRef::AlwaysProtect,
            "never-protect" => PolicyRef::NeverProtect,
            "equilibrium" => PolicyRef::Equilibrium,
            _ => match s.strip_prefix("file:") {
                Some(p) if !p.is_empty() => PolicyRef::File(PathBuf::from(p)),
                _ => return Err(Error::Config(format!(
                    "unknown policy `{s}`; expected optimal, always-protect, never-protect, equilibrium or file:PATH"
                ))),
            },
        })
    }
}

impl Serialize for PolicyRef {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PolicyRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

fn default_policies() -> Vec<PolicyRef> {
    vec![PolicyRef::Optimal, PolicyRef::AlwaysProtect, PolicyRef::NeverProtect]
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Directory receiving one file per table; stdout when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub format: Format,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub params: SystemParams,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimConfig>,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default = "default_policies")]
    pub policies: Vec<PolicyRef>,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> std::result::Result<Self, super::CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| super::CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(Self::from_toml(&text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn grid(&self) -> Result<Grid> {
        let margin = self.grid.margin.unwrap_or_else(|| Grid::default_margin(self.grid.bound));
        Grid::new(self.params.n, self.grid.bound, margin)
    }

    pub fn sim(&self) -> SimConfig {
        self.sim.clone().unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.grid()?;
        self.solver.validate()?;
        if let Some(sim) = &self.sim {
            sim.validate(&self.params)?;
        }
        let s = &self.sweep;
        if s.fault_probs.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Config("sweep.fault_probs must lie in [0, 1]".into()));
        }
        if s.protect_costs.iter().chain(&s.attack_costs).any(|c| !(*c > 0.0 && c.is_finite())) {
            return Err(Error::Config("sweep costs must be positive".into()));
        }
        if s.utilizations.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::Config("sweep.utilizations must be positive".into()));
        }
        Ok(())
    }

    pub fn fault_probs(&self) -> Vec<f64> {
        or_single(&self.sweep.fault_probs, self.params.fault_prob)
    }

    pub fn protect_costs(&self) -> Vec<f64> {
        or_single(&self.sweep.protect_costs, self.params.protect_cost)
    }

    pub fn attack_costs(&self) -> Vec<f64> {
        or_single(&self.sweep.attack_costs, self.params.attack_cost)
    }

    pub fn utilizations(&self) -> Vec<f64> {
        or_single(&self.sweep.utilizations, self.params.utilization())
    }
}

fn or_single(v: &[f64], fallback: f64) -> Vec<f64> {
    if v.is_empty() {
        vec![fallback]
    } else {
        v.to_vec()
    }
}
