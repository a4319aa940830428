use std::path::PathBuf;

use cgmm_core::sim::{MonteCarloConfig, SimModel};
use cgmm_core::{CgmmError, DesignSpec, FitConfig, JackknifeConfig, PenaltyConfig, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    #[default]
    Fit,
    Impute,
    SelectG,
    Cv,
    Jackknife,
    Simulate,
}

impl CommandKind {
    pub fn name(&self) -> &'static str {
        match self {
            CommandKind::Fit => "fit",
            CommandKind::Impute => "impute",
            CommandKind::SelectG => "select-g",
            CommandKind::Cv => "cv",
            CommandKind::Jackknife => "jackknife",
            CommandKind::Simulate => "simulate",
        }
    }
}

/// Everything a run needs. `--print-config` writes this document and
/// `--config` reads it back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: CommandKind,
    pub data: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    /// Fixed component count; when absent G is chosen by BIC over `1..=g_max`.
    pub g: Option<usize>,
    pub g_max: usize,
    /// Gate and mean covariates; all covariates with intercepts when absent.
    pub design: Option<DesignSpec>,
    pub fit: FitConfig,
    /// Fixed penalty for `cv`; when absent λ is chosen by cross-validation.
    pub lambda: Option<f64>,
    pub penalty: PenaltyConfig,
    pub jackknife: JackknifeConfig,
    pub simulation: MonteCarloConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: CommandKind::Fit,
            data: None,
            params: None,
            out: None,
            threads: None,
            g: None,
            g_max: 6,
            design: None,
            fit: FitConfig::default(),
            lambda: None,
            penalty: PenaltyConfig::default(),
            jackknife: JackknifeConfig::default(),
            simulation: MonteCarloConfig::new(SimModel::M1, 100, 0),
        }
    }
}

impl RunConfig {
    pub fn set_seed(&mut self, seed: u64) {
        self.fit.seed = seed;
        self.jackknife.seed = seed;
        self.simulation.seed = seed;
    }

    pub fn g_range(&self) -> Vec<usize> {
        match self.g {
            Some(g) => vec![g],
            None => (1..=self.g_max).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CgmmError::InvalidConfig(m.to_string()));
        let needs_data = !matches!(self.command, CommandKind::Simulate);
        if needs_data && self.data.is_none() {
            return bad("--data is required");
        }
        if self.g == Some(0) || self.g_max == 0 {
            return bad("component counts must be at least 1");
        }
        if self.threads == Some(0) {
            return bad("--threads must be at least 1");
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return bad("--lambda must be a finite non-negative number");
            }
        }
        self.fit.validate()?;
        match self.command {
            CommandKind::Cv => self.penalty.validate(),
            CommandKind::Simulate => self.simulation.validate(),
            _ => Ok(()),
        }
    }
}
