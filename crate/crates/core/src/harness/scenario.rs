//! Scenario files: one TOML document describing the link physics, the
//! protocol run, the optional attack, and the monitor thresholds.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::AttackConfig;
use crate::ioc::MonitorConfig;
use crate::optics::{ChannelParams, DetectorParams, SourceParams};
use crate::protocol::Bb84Config;

use super::HarnessError;

/// Seed offset separating a scenario's calibration run from its main run.
const CALIBRATION_SEED_SALT: u64 = 0x5EED_0CA1_1B8A_7E00;

/// A fully specified, reproducible run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub source: SourceParams,
    pub channel: ChannelParams,
    pub detector: DetectorParams,
    pub protocol: Bb84Config,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackConfig>,
    #[serde(default)]
    pub monitors: MonitorConfig,
    /// Mean photon number the operator declares to the monitors. Defaults
    /// to the true source mean; a mismatch models an inaccurately
    /// characterized source.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub declared_mu: Option<f64>,
    /// Allow this run to generate its own calibration baseline when none
    /// exists yet.
    #[serde(default)]
    pub calibration_run: bool,
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let scenario = Self::from_toml_str(&text).map_err(|e| match e {
            HarnessError::Parse { message, .. } => HarnessError::Parse {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })?;
        Ok(scenario)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| HarnessError::Parse {
            path: "<inline>".into(),
            message: e.to_string(),
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    /// Cross-validate every parameter group, including attack-vs-detector
    /// compatibility, before any simulation runs.
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.name.is_empty() {
            return Err(HarnessError::Validation("scenario name is empty".into()));
        }
        self.source
            .validate()
            .map_err(|e| HarnessError::Validation(e.to_string()))?;
        self.channel
            .validate()
            .map_err(|e| HarnessError::Validation(e.to_string()))?;
        self.detector
            .validate()
            .map_err(|e| HarnessError::Validation(e.to_string()))?;
        self.protocol
            .validate()
            .map_err(|e| HarnessError::Validation(e.to_string()))?;
        self.monitors
            .validate()
            .map_err(|e| HarnessError::Validation(e.to_string()))?;
        if let Some(attack) = &self.attack {
            attack
                .validate(&self.detector)
                .map_err(|e| HarnessError::Validation(e.to_string()))?;
        }
        if let Some(mu) = self.declared_mu {
            if !mu.is_finite() || mu < 0.0 {
                return Err(HarnessError::Validation("declared_mu must be >= 0".into()));
            }
        }
        Ok(())
    }

    /// Mean photon number as declared to the monitors.
    pub fn effective_declared_mu(&self) -> f64 {
        self.declared_mu.unwrap_or(self.source.mu)
    }

    /// Content hash of the physics configuration (source, channel,
    /// detector, protocol). Calibration baselines are keyed by it, which
    /// makes baseline reuse explicit and tamper-evident.
    pub fn physics_hash(&self) -> String {
        #[derive(Serialize)]
        struct Physics<'a> {
            source: &'a SourceParams,
            channel: &'a ChannelParams,
            detector: &'a DetectorParams,
            protocol: &'a Bb84Config,
        }
        let bytes = serde_json::to_vec(&Physics {
            source: &self.source,
            channel: &self.channel,
            detector: &self.detector,
            protocol: &self.protocol,
        })
        .expect("physics config serializes");
        let digest = Sha256::digest(&bytes);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Seed of the attack-free calibration run, derived from the scenario
    /// seed so the calibration never replays the main run's draws.
    pub fn calibration_seed(&self) -> u64 {
        self.seed ^ CALIBRATION_SEED_SALT
    }
}
