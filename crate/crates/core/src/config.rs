//! JSON experiment configuration: source specs, detector entries given as
//! (r_aa, r_bb, |r_ab|, theta), backend choice, and the optional
//! conditioning / scaling / sweep blocks.

use crate::detector::{validate_array, DetectorArray, DetectorMatrix};
use crate::kernel::{Backend, KernelOptions, DEFAULT_BUDGET, DEFAULT_PHASE_NODES, DEFAULT_RADIAL_NODES};
use crate::number_stats::{make_distribution, NumberDistribution, SourceFamily, DEFAULT_TAIL_TOLERANCE};
use num_complex::Complex64;
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config field {field}: {detail}")]
    Field { field: String, detail: String },
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
}

fn field_err(field: &str, detail: impl ToString) -> ConfigError {
    ConfigError::Field {
        field: field.to_string(),
        detail: detail.to_string(),
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceSpec {
    Fock { n: usize },
    Poisson { mean: f64 },
    Thermal { nbar: f64 },
    GammaP { mean: f64, q_param: f64 },
    PhotonAddedThermal { nbar: f64 },
    Binomial { n: usize, q: f64 },
    Custom { pmf: Vec<f64> },
}

impl SourceSpec {
    pub fn build(&self, tail_tolerance: f64) -> Result<NumberDistribution, ConfigError> {
        let to = |e| field_err("sources", e);
        match self {
            SourceSpec::Custom { pmf } => NumberDistribution::from_custom_pmf(pmf).map_err(to),
            other => {
                let family = match other {
                    SourceSpec::Fock { n } => SourceFamily::Fock { n: *n },
                    SourceSpec::Poisson { mean } => SourceFamily::Poisson { mean: *mean },
                    SourceSpec::Thermal { nbar } => SourceFamily::Thermal { nbar: *nbar },
                    SourceSpec::GammaP { mean, q_param } => SourceFamily::GammaP {
                        mean: *mean,
                        q_param: *q_param,
                    },
                    SourceSpec::PhotonAddedThermal { nbar } => {
                        SourceFamily::PhotonAddedThermal { nbar: *nbar }
                    }
                    SourceSpec::Binomial { n, q } => SourceFamily::Binomial { n: *n, q: *q },
                    SourceSpec::Custom { .. } => unreachable!(),
                };
                make_distribution(family, tail_tolerance).map_err(to)
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSpec {
    pub r_aa: f64,
    pub r_bb: f64,
    pub r_ab_modulus: f64,
    pub theta: f64,
    #[serde(default)]
    pub label: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    #[default]
    Auto,
    Network,
    CoherentQuadrature,
}

impl From<BackendChoice> for Backend {
    fn from(c: BackendChoice) -> Backend {
        match c {
            BackendChoice::Auto => Backend::Auto,
            BackendChoice::Network => Backend::Network,
            BackendChoice::CoherentQuadrature => Backend::CoherentQuadrature,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conditioning {
    pub detector_index: usize,
    pub count: u32,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scaling {
    pub q: f64,
    pub keep_m: usize,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureSettings {
    #[serde(default = "default_phase_nodes")]
    pub phase_nodes: usize,
    #[serde(default = "default_radial_nodes")]
    pub radial_nodes: usize,
}

impl Default for QuadratureSettings {
    fn default() -> Self {
        Self {
            phase_nodes: DEFAULT_PHASE_NODES,
            radial_nodes: DEFAULT_RADIAL_NODES,
        }
    }
}

fn default_phase_nodes() -> usize {
    DEFAULT_PHASE_NODES
}
fn default_radial_nodes() -> usize {
    DEFAULT_RADIAL_NODES
}
fn default_budget() -> u64 {
    DEFAULT_BUDGET
}
fn default_tail_tolerance() -> f64 {
    DEFAULT_TAIL_TOLERANCE
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    /// gamma_p super-Poissonian strength
    Q,
    /// thinning / detector-rescaling fraction
    ScalingQ,
    /// overall detector strength multiplier (source means divided to keep
    /// the detected flux fixed)
    R,
    /// phase offset of the second detector relative to the first
    ThetaDiff,
    /// conditioning count at detector 1
    N1,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub sources: Vec<SourceSpec>,
    pub detectors: Vec<DetectorSpec>,
    #[serde(default)]
    pub backend: BackendChoice,
    #[serde(default)]
    pub conditioning: Option<Conditioning>,
    #[serde(default)]
    pub scaling: Option<Scaling>,
    #[serde(default)]
    pub quadrature: QuadratureSettings,
    #[serde(default = "default_budget")]
    pub budget: u64,
    #[serde(default = "default_tail_tolerance")]
    pub tail_tolerance: f64,
    #[serde(default)]
    pub sweep: Option<Sweep>,
    /// file-name prefix for outputs inside the --out directory
    #[serde(default)]
    pub output_prefix: Option<String>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.sources.len() != 2 {
            return Err(field_err(
                "sources",
                format!("exactly two sources required, got {}", self.sources.len()),
            ));
        }
        if self.detectors.is_empty() {
            return Err(field_err("detectors", "at least one detector required"));
        }
        if let Some(c) = &self.conditioning {
            if c.detector_index == 0 || c.detector_index > self.detectors.len() {
                return Err(field_err(
                    "conditioning.detector_index",
                    format!("must lie in 1..={}", self.detectors.len()),
                ));
            }
        }
        if let Some(s) = &self.scaling {
            if !(s.q > 0.0 && s.q <= 1.0) {
                return Err(field_err("scaling.q", format!("must lie in (0, 1], got {}", s.q)));
            }
            if s.keep_m == 0 || s.keep_m > self.detectors.len() {
                return Err(field_err(
                    "scaling.keep_m",
                    format!("must lie in 1..={}", self.detectors.len()),
                ));
            }
        }
        if let Some(sw) = &self.sweep {
            if sw.values.is_empty() {
                return Err(field_err("sweep.values", "at least one grid point required"));
            }
        }
        if !(self.tail_tolerance > 0.0 && self.tail_tolerance < 1e-2) {
            return Err(field_err(
                "tail_tolerance",
                format!("must lie in (0, 0.01), got {}", self.tail_tolerance),
            ));
        }
        Ok(())
    }

    pub fn build_sources(&self) -> Result<(NumberDistribution, NumberDistribution), ConfigError> {
        Ok((
            self.sources[0].build(self.tail_tolerance)?,
            self.sources[1].build(self.tail_tolerance)?,
        ))
    }

    pub fn build_array(&self) -> Result<DetectorArray, crate::detector::DetectorError> {
        let detectors = self
            .detectors
            .iter()
            .enumerate()
            .map(|(i, d)| {
                DetectorMatrix::new(
                    d.r_aa,
                    d.r_bb,
                    Complex64::from_polar(d.r_ab_modulus, d.theta),
                    d.label.clone().unwrap_or_else(|| format!("d{}", i + 1)),
                )
            })
            .collect();
        validate_array(detectors)
    }

    pub fn kernel_options(&self) -> KernelOptions {
        KernelOptions {
            budget: self.budget,
            tail_tolerance: self.tail_tolerance,
            phase_nodes: self.quadrature.phase_nodes,
            radial_nodes: self.quadrature.radial_nodes,
            ..Default::default()
        }
    }
}
