//! Run configuration: one JSON file per run, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use vd_core::grid::TimeGrid;
use vd_core::kernels::KernelSpec;
use vd_core::models::ModelSpec;
use vd_core::verify::DeviationEvent;
use vd_core::volterra::{BranchPolicy, ControlInterp};

use crate::error::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub grid: Option<TimeGrid>,
    #[serde(default)]
    pub kernel: Option<KernelBlock>,
    #[serde(default)]
    pub limit: Option<LimitBlock>,
    #[serde(default)]
    pub simulate: Option<SimulateBlock>,
    #[serde(default)]
    pub rate: Option<RateBlock>,
    #[serde(default)]
    pub smile: Option<SmileBlock>,
    #[serde(default)]
    pub experiment: Option<ExperimentBlock>,
    /// Default output file; `--out` wins.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelBlock {
    pub kernel: KernelSpec,
    /// Evaluation times for K(t) and ‖K‖²_{L²[0,t]}.
    pub times: Vec<f64>,
    /// Regularity exponent to test, with the dyadic h grid 2⁻⁴..2⁻¹² unless given.
    #[serde(default)]
    pub gamma_claim: Option<f64>,
    #[serde(default)]
    pub h_grid: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitBlock {
    /// Constant node control (u, v₁..vₘ); zero when absent.
    #[serde(default)]
    pub control: Option<Vec<f64>>,
    #[serde(default)]
    pub policy: BranchPolicy,
    #[serde(default)]
    pub interp: ControlInterp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PathFormat {
    #[default]
    Csv,
    Binary,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateBlock {
    pub n_paths: usize,
    pub seed: u64,
    /// Constant Girsanov shift (u, v₁..vₘ); log-weights are written when set.
    #[serde(default)]
    pub control: Option<Vec<f64>>,
    #[serde(default)]
    pub format: PathFormat,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateBlock {
    #[serde(default)]
    pub n_steps: Option<usize>,
    #[serde(default)]
    pub richardson: Option<bool>,
    #[serde(default)]
    pub max_iters: Option<u64>,
    /// Regularisation for the Heston rates; the library default when absent.
    #[serde(default)]
    pub heston_delta: Option<f64>,
    /// CSV with columns t, phi, vphi_1..vphi_m on the config grid (`rate eval`).
    #[serde(default)]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmileBlock {
    pub maturities: Vec<f64>,
    /// Normalised log-moneyness for the asymptotic regimes.
    #[serde(default)]
    pub k: Vec<f64>,
    /// Actual log-strikes for Monte Carlo.
    #[serde(default)]
    pub strikes: Vec<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub n_paths: Option<usize>,
    #[serde(default)]
    pub n_steps: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub solver_n_steps: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentBlock {
    pub event: DeviationEvent,
    pub epsilons: Vec<f64>,
    pub n_paths: usize,
    pub seed: u64,
    #[serde(default)]
    pub importance_sampling: bool,
    #[serde(default)]
    pub reference_rate: Option<f64>,
}

/// A parsed config together with the bytes it came from (hashed into headers).
pub struct Loaded {
    pub path: PathBuf,
    pub raw: Vec<u8>,
    pub config: RunConfig,
}

impl Loaded {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let raw = std::fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let config = serde_json::from_slice(&raw).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(Self { path: path.to_path_buf(), raw, config })
    }

    fn missing(&self, block: &str) -> CliError {
        CliError::Config(format!("{}: missing `{block}`", self.path.display()))
    }

    pub fn model(&self) -> Result<&ModelSpec, CliError> {
        self.config.model.as_ref().ok_or_else(|| self.missing("model"))
    }

    pub fn grid(&self) -> Result<TimeGrid, CliError> {
        let g = self.config.grid.ok_or_else(|| self.missing("grid"))?;
        TimeGrid::new(g.horizon, g.n_steps).map_err(|e| CliError::Config(format!("{}: grid: {e}", self.path.display())))
    }

    pub fn kernel(&self) -> Result<&KernelBlock, CliError> {
        self.config.kernel.as_ref().ok_or_else(|| self.missing("kernel"))
    }

    pub fn simulate(&self) -> Result<&SimulateBlock, CliError> {
        self.config.simulate.as_ref().ok_or_else(|| self.missing("simulate"))
    }

    pub fn smile(&self) -> Result<&SmileBlock, CliError> {
        self.config.smile.as_ref().ok_or_else(|| self.missing("smile"))
    }

    pub fn experiment(&self) -> Result<&ExperimentBlock, CliError> {
        self.config.experiment.as_ref().ok_or_else(|| self.missing("experiment"))
    }

    /// Tag a config-level problem with the file it came from.
    pub fn invalid(&self, field: &str, msg: impl std::fmt::Display) -> CliError {
        CliError::Config(format!("{}: {field}: {msg}", self.path.display()))
    }
}
