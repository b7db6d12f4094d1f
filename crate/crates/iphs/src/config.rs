//! Declarative scenario configuration: a versioned TOML schema mapping onto
//! models, simulations, transition problems, sweeps and certificates.

use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;
use serde::Deserialize;
use thiserror::Error;

use crate::model::{Control, CostWeights, IphsModel, State};
use crate::models::{heat_exchanger_model, ControlVariant, HeatExchangerParams};
use crate::ocp::{OcpSpec, TerminalSet};
use crate::sim::{ControlSignal, Integrator, IntegratorOpts};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unsupported schema_version {found} (expected {SCHEMA_VERSION})")]
    SchemaVersion { found: u32 },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub model: ModelSection,
    #[serde(default)]
    pub simulate: Option<SimulateSection>,
    #[serde(default)]
    pub ocp: Option<OcpSection>,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub certify: Option<CertifySection>,
    #[serde(default)]
    pub numerics: NumericsSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Currently the only supported kind is "heat_exchanger".
    pub kind: String,
    #[serde(default = "default_variant")]
    pub variant: String,
    #[serde(default = "one")]
    pub lambda: f64,
    #[serde(default = "one")]
    pub lambda_e: f64,
    #[serde(default = "one")]
    pub c1: f64,
    #[serde(default = "one")]
    pub c2: f64,
    #[serde(default = "one")]
    pub t_ref: f64,
    #[serde(default)]
    pub s_ref: f64,
}

fn one() -> f64 {
    1.0
}
fn default_variant() -> String {
    "entropy_flow".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub x0: Vec<f64>,
    pub t_f: f64,
    pub control: ControlSection,
    /// Relative tolerance on the balance residuals for exit-code purposes.
    #[serde(default = "default_balance_tol")]
    pub balance_tol: f64,
}

fn default_balance_tol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum ControlSection {
    Zero,
    Constant { value: Vec<f64> },
    Piecewise { grid: Vec<f64>, values: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcpSection {
    pub x0: Vec<f64>,
    pub terminal: Vec<f64>,
    #[serde(default)]
    pub t_f: Option<f64>,
    pub control_lo: Vec<f64>,
    pub control_hi: Vec<f64>,
    pub alpha1: f64,
    pub alpha2: f64,
    #[serde(default = "one")]
    pub t0: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub horizons: Vec<f64>,
    #[serde(default = "default_eps_list")]
    pub eps: Vec<f64>,
}

fn default_eps_list() -> Vec<f64> {
    vec![0.05, 0.1, 0.2]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifySection {
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
}

fn default_samples() -> usize {
    10_000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericsSection {
    /// Collocation interval count; defaults to max(100, 20 t_f).
    pub n_intervals: Option<usize>,
    pub integrator: Integrator,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub fixed_step: f64,
    pub max_output_step: f64,
    pub feas_tol: f64,
    pub opt_tol: f64,
}

impl Default for NumericsSection {
    fn default() -> Self {
        let sim = IntegratorOpts::default();
        Self {
            n_intervals: None,
            integrator: sim.method,
            abs_tol: sim.abs_tol,
            rel_tol: sim.rel_tol,
            fixed_step: sim.fixed_step,
            max_output_step: sim.max_output_step,
            feas_tol: 1e-8,
            opt_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: String,
    pub formats: Vec<String>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "out".into(), formats: vec!["csv".into(), "json".into()] }
    }
}

impl ScenarioConfig {
    pub fn from_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(text)?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::SchemaVersion { found: cfg.schema_version });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        Self::from_str(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.model.kind != "heat_exchanger" {
            return Err(ConfigError::Invalid(format!(
                "unknown model kind '{}'",
                self.model.kind
            )));
        }
        self.variant()?;
        for f in &self.output.formats {
            if !matches!(f.as_str(), "csv" | "json" | "svg") {
                return Err(ConfigError::Invalid(format!("unknown output format '{f}'")));
            }
        }
        Ok(())
    }

    fn variant(&self) -> Result<ControlVariant, ConfigError> {
        match self.model.variant.as_str() {
            "entropy_flow" => Ok(ControlVariant::EntropyFlow),
            "thermostat" => Ok(ControlVariant::Thermostat),
            other => Err(ConfigError::Invalid(format!("unknown control variant '{other}'"))),
        }
    }

    pub fn build_model(&self) -> Result<IphsModel, ConfigError> {
        let p = HeatExchangerParams {
            lambda: self.model.lambda,
            lambda_e: self.model.lambda_e,
            c1: self.model.c1,
            c2: self.model.c2,
            t_ref: self.model.t_ref,
            s_ref: self.model.s_ref,
        };
        heat_exchanger_model(&p, self.variant()?)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn integrator_opts(&self) -> IntegratorOpts {
        IntegratorOpts {
            method: self.numerics.integrator,
            abs_tol: self.numerics.abs_tol,
            rel_tol: self.numerics.rel_tol,
            fixed_step: self.numerics.fixed_step,
            max_output_step: self.numerics.max_output_step,
            ..Default::default()
        }
    }

    pub fn build_control(section: &ControlSection) -> Result<ControlSignal, ConfigError> {
        match section {
            ControlSection::Zero => Ok(ControlSignal::Zero),
            ControlSection::Constant { value } => {
                Ok(ControlSignal::constant(DVector::from_vec(value.clone())))
            }
            ControlSection::Piecewise { grid, values } => {
                let vals: Vec<Control> =
                    values.iter().map(|v| DVector::from_vec(v.clone())).collect();
                ControlSignal::piecewise(grid.clone(), vals)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))
            }
        }
    }

    /// Assemble the transition problem for a given horizon (`t_f` falls back
    /// to the ocp section's own horizon).
    pub fn build_ocp_spec(&self, t_f: Option<f64>) -> Result<OcpSpec, ConfigError> {
        let section = self
            .ocp
            .as_ref()
            .ok_or_else(|| ConfigError::Invalid("missing [ocp] section".into()))?;
        let t_f = t_f
            .or(section.t_f)
            .ok_or_else(|| ConfigError::Invalid("no horizon given (ocp.t_f)".into()))?;
        let model = Arc::new(self.build_model()?);
        let weights = CostWeights::new(section.alpha1, section.alpha2, section.t0)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let x0: State = DVector::from_vec(section.x0.clone());
        let terminal = TerminalSet::Point(DVector::from_vec(section.terminal.clone()));
        OcpSpec::new(
            model,
            x0,
            terminal,
            t_f,
            DVector::from_vec(section.control_lo.clone()),
            DVector::from_vec(section.control_hi.clone()),
            weights,
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}
