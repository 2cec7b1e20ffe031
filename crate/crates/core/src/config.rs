//! Experiment configuration: one structured file with flat sections per
//! command. Unknown keys are rejected, and a calibration table, when
//! supplied, must name every constant.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::MixtureSpec;
use crate::pipeline::Calibration;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub tolerance: Option<f64>,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub input: Option<PathBuf>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub calibration: Calibration,
    #[serde(default)]
    pub certify: Option<CertifySection>,
    #[serde(default)]
    pub robust_mean: Option<RobustMeanSection>,
    #[serde(default)]
    pub cluster: Option<ClusterSection>,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    /// generator used when no input dataset is supplied
    #[serde(default)]
    pub data: Option<MixtureSpec>,
    /// sample size for generated data
    #[serde(default = "default_n")]
    pub n: usize,
}

fn default_n() -> usize {
    1000
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: default_seeds(),
            tolerance: None,
            threads: None,
            input: None,
            output: None,
            calibration: Calibration::default(),
            certify: None,
            robust_mean: None,
            cluster: None,
            sweep: None,
            data: None,
            n: default_n(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifySection {
    #[serde(default = "default_t")]
    pub t: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustMeanSection {
    #[serde(default = "default_t")]
    pub t: usize,
    pub eps: f64,
    /// moment bound; omitted means estimate from trimmed data
    #[serde(default)]
    pub b: Option<f64>,
    #[serde(default)]
    pub r0: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSection {
    #[serde(default = "default_t")]
    pub t: usize,
    pub alpha: f64,
    #[serde(default)]
    pub eps: f64,
    /// exact cluster count for the separated mode; omit for list-decodable
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub c_sep: Option<f64>,
    #[serde(default)]
    pub b: Option<f64>,
    #[serde(default)]
    pub r0: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "default_t_values")]
    pub t_values: Vec<usize>,
    pub eps_values: Vec<f64>,
    #[serde(default = "default_sweep_n")]
    pub n: usize,
    #[serde(default = "default_sweep_d")]
    pub d: usize,
    /// outliers sit at scale·ε^{−1/(2t)} from the mean, just inside the
    /// removal threshold so the induced bias tracks the ε-dependence
    #[serde(default = "default_outlier_scale")]
    pub outlier_scale: f64,
}

fn default_t() -> usize {
    1
}
fn default_t_values() -> Vec<usize> {
    vec![1]
}
fn default_sweep_n() -> usize {
    500
}
fn default_sweep_d() -> usize {
    5
}
fn default_outlier_scale() -> f64 {
    2.0
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("seed list must be non-empty".into()));
        }
        if let Some(tol) = self.tolerance {
            if !(tol > 0.0) {
                return Err(ConfigError::Invalid(format!(
                    "tolerance must be positive, got {tol}"
                )));
            }
        }
        if let Some(rm) = &self.robust_mean {
            if !(0.0..=0.25).contains(&rm.eps) {
                return Err(ConfigError::Invalid(format!(
                    "robust_mean.eps must lie in [0, 1/4], got {}",
                    rm.eps
                )));
            }
            check_t(rm.t)?;
        }
        if let Some(cl) = &self.cluster {
            if !(0.0 < cl.alpha && cl.alpha <= 1.0) {
                return Err(ConfigError::Invalid(format!(
                    "cluster.alpha must lie in (0, 1], got {}",
                    cl.alpha
                )));
            }
            if cl.eps > cl.alpha {
                return Err(ConfigError::Invalid(
                    "cluster.eps above alpha is information-theoretically hopeless".into(),
                ));
            }
            check_t(cl.t)?;
        }
        if let Some(cert) = &self.certify {
            if cert.t == 0 || cert.t > 4 {
                return Err(ConfigError::Invalid(format!(
                    "certify.t must lie in 1..=4, got {}",
                    cert.t
                )));
            }
        }
        if let Some(sw) = &self.sweep {
            if sw.eps_values.is_empty() || sw.t_values.is_empty() {
                return Err(ConfigError::Invalid(
                    "sweep needs non-empty eps_values and t_values".into(),
                ));
            }
            for &t in &sw.t_values {
                check_t(t)?;
            }
        }
        Ok(())
    }
}

fn check_t(t: usize) -> Result<(), ConfigError> {
    if t == 1 || t == 2 {
        Ok(())
    } else {
        Err(ConfigError::Invalid(format!(
            "t = {t} unsupported; estimation commands handle t in {{1, 2}}"
        )))
    }
}
