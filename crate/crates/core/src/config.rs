//! Run configuration, read from and written to TOML.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::TmleConfig;
use crate::bootstrap::BootstrapConfig;
use crate::error::{KdpeError, Result};
use crate::functionals::TargetParameter;
use crate::kdpe::KdpeConfig;
use crate::kernel::BaseKernel;
use crate::observation::Schema;
use crate::preestimate::PreEstimateConfig;
use crate::simulation::DgpSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Kdpe,
    Tmle,
    Ltmle,
    Naive,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Kdpe => "kdpe",
            Method::Tmle => "tmle",
            Method::Ltmle => "ltmle",
            Method::Naive => "naive",
        }
    }

    pub fn supports(self, schema: Schema) -> bool {
        !matches!(
            (self, schema),
            (Method::Tmle, Schema::Dgp2) | (Method::Ltmle, Schema::Dgp1)
        )
    }

    pub fn defaults_for(schema: Schema) -> Vec<Method> {
        match schema {
            Schema::Dgp1 => vec![Method::Kdpe, Method::Tmle, Method::Naive],
            Schema::Dgp2 => vec![Method::Kdpe, Method::Ltmle, Method::Naive],
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Method {
    type Err = KdpeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "kdpe" => Ok(Method::Kdpe),
            "tmle" => Ok(Method::Tmle),
            "ltmle" => Ok(Method::Ltmle),
            "naive" | "sl" => Ok(Method::Naive),
            other => Err(KdpeError::Config(format!("unknown method '{other}'"))),
        }
    }
}

/// Parses a comma-separated method list.
pub fn parse_methods(s: &str) -> Result<Vec<Method>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dgp: DgpSpec,
    #[serde(default = "default_sims")]
    pub sims: usize,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<Method>>,
    #[serde(default = "default_targets")]
    pub targets: Vec<TargetParameter>,
    #[serde(default)]
    pub pre_estimate: PreEstimateConfig,
    /// Falls back to the per-DGP defaults when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kdpe: Option<KdpeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_length_scales: Option<Vec<f64>>,
    #[serde(default)]
    pub tmle: TmleConfig,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
}

fn default_sims() -> usize {
    100
}

fn default_jobs() -> usize {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_targets() -> Vec<TargetParameter> {
    TargetParameter::ALL.to_vec()
}

impl RunConfig {
    pub fn new(dgp: DgpSpec) -> Self {
        RunConfig {
            dgp,
            sims: default_sims(),
            jobs: default_jobs(),
            output_dir: default_output_dir(),
            methods: None,
            targets: default_targets(),
            pre_estimate: PreEstimateConfig::default(),
            kdpe: None,
            kernel_length_scales: None,
            tmle: TmleConfig::default(),
            bootstrap: BootstrapConfig::default(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| KdpeError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| KdpeError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| KdpeError::Config(e.to_string()))
    }

    pub fn kdpe_config(&self) -> KdpeConfig {
        self.kdpe.unwrap_or_else(|| KdpeConfig::default_for(self.dgp.kind))
    }

    pub fn kernel(&self) -> Result<BaseKernel> {
        match &self.kernel_length_scales {
            Some(s) => BaseKernel::gaussian(s.clone()),
            None => Ok(BaseKernel::default_for(self.dgp.kind)),
        }
    }

    pub fn methods(&self) -> Vec<Method> {
        self.methods
            .clone()
            .unwrap_or_else(|| Method::defaults_for(self.dgp.kind))
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: KdpeError| KdpeError::Config(e.to_string());
        self.dgp.validate().map_err(wrap)?;
        self.pre_estimate.validate().map_err(wrap)?;
        let k = self.kdpe_config();
        k.validate().map_err(wrap)?;
        if self.pre_estimate.clip <= k.c_bound {
            return Err(KdpeError::Config(format!(
                "pre_estimate.clip ({}) must exceed kdpe.c_bound ({})",
                self.pre_estimate.clip, k.c_bound
            )));
        }
        self.tmle.validate().map_err(wrap)?;
        self.bootstrap.validate().map_err(wrap)?;
        self.kernel().map_err(wrap)?;
        if self.sims == 0 || self.jobs == 0 {
            return Err(KdpeError::Config("sims and jobs must be >= 1".into()));
        }
        let methods = self.methods();
        if methods.is_empty() {
            return Err(KdpeError::Config("methods must not be empty".into()));
        }
        if let Some(m) = methods.iter().find(|m| !m.supports(self.dgp.kind)) {
            return Err(KdpeError::Config(format!("method {m} does not apply to {}", self.dgp.kind)));
        }
        if self.targets.is_empty() {
            return Err(KdpeError::Config("targets must not be empty".into()));
        }
        Ok(())
    }
}
