//! Planner configuration document (TOML). Every field is optional; unknown
//! keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::DynamicsModel;
use crate::error::{Error, Result};
use crate::geom::GeomPlanConfig;
use crate::mpc::{AlphaPolicy, Mpc, MpcConfig};
use crate::polygeom::FootprintSpec;
use crate::risk::{default_factor_specs, RiskFactorSpec, RiskLevel};
use crate::sim::SimConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskConfig {
    /// Mission risk level; when set it overrides `geometric.alpha` and
    /// `mpc.alpha`.
    pub alpha: Option<RiskLevel>,
    pub factors: Vec<RiskFactorSpec>,
}

impl Default for RiskConfig {
    fn default() -> Self {
        Self {
            alpha: None,
            factors: default_factor_specs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub risk: RiskConfig,
    pub geometric: GeomPlanConfig,
    pub dynamics: DynamicsModel,
    pub footprint: FootprintSpec,
    pub mpc: MpcConfig,
    pub alpha_policy: AlphaPolicy,
    pub sim: SimConfig,
}

impl PlannerConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            context: "config".into(),
            message: e.to_string(),
        })?;
        if let Some(a) = cfg.risk.alpha {
            cfg.set_alpha(a);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                context: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Uses `alpha` for both planning layers.
    pub fn set_alpha(&mut self, alpha: RiskLevel) {
        self.risk.alpha = Some(alpha);
        self.geometric.alpha = alpha;
        self.mpc.alpha = alpha;
    }

    pub fn validate(&self) -> Result<()> {
        self.geometric.validate()?;
        self.dynamics.validate()?;
        self.footprint.validate()?;
        self.mpc.validate()?;
        self.sim.validate()?;
        if self.geometric.alpha != self.mpc.alpha {
            log::warn!(
                "geometric alpha {} differs from mpc alpha {}",
                self.geometric.alpha,
                self.mpc.alpha
            );
        }
        Ok(())
    }

    pub fn mpc(&self) -> Result<Mpc> {
        Mpc::new(self.dynamics.clone(), self.footprint, self.mpc.clone())
    }
}
