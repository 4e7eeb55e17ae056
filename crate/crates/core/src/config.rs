// SPDX-License-Identifier: Apache-2.0

//! Workspace configuration (`<root>/config.toml`) and defense selection.
//!
//! ```toml
//! [defense]
//! nvram_binding = true
//! attestation = true
//! trusted_clock = true
//!
//! [rollback]
//! mechanism = "counter"      # off | software | counter
//!
//! [clock]
//! tick_rate_hz = 1000
//! correction_interval_ms = 1000
//!
//! [lockout]
//! max_tries = 3
//! recovery_interval_ms = 10000
//!
//! [attestation]
//! allowlist = "cloud/allowlist.txt"   # relative to the workspace root
//! cert_validity_ms = 86400000
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::ClockConfig;
use crate::rollback::Mechanism;
use crate::tpm::state::{DEFAULT_MAX_TRIES, DEFAULT_RECOVERY_INTERVAL_MS};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Which of the four defenses are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DefenseConfig {
    /// Seal NVRAM under the user's signer, verify the VM/enclave binding at
    /// boot and run the remote registry check. Off means plain NVRAM files
    /// and enclaves signed by a shared provider key.
    pub nvram_binding: bool,
    /// The PCA checks the quote signature and the measurement allowlist.
    pub attestation: bool,
    /// Lockout deadlines use the enclave's trusted clock instead of host time.
    pub trusted_clock: bool,
    #[serde(skip)]
    pub rollback: Mechanism,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig::full()
    }
}

impl DefenseConfig {
    pub fn none() -> Self {
        DefenseConfig {
            nvram_binding: false,
            attestation: false,
            trusted_clock: false,
            rollback: Mechanism::Off,
        }
    }

    /// Every defense on, rollback via the software ledger.
    pub fn software() -> Self {
        DefenseConfig {
            rollback: Mechanism::Software,
            ..DefenseConfig::full()
        }
    }

    /// Every defense on, rollback via monotonic counters.
    pub fn full() -> Self {
        DefenseConfig {
            nvram_binding: true,
            attestation: true,
            trusted_clock: true,
            rollback: Mechanism::Counter,
        }
    }

    pub const NAMES: [&'static str; 3] = ["none", "software", "full"];

    /// `none`, `software` or `full` for the three presets, `custom` otherwise.
    pub fn name(&self) -> &'static str {
        Self::NAMES
            .into_iter()
            .find(|n| Self::by_name(n).as_ref() == Some(self))
            .unwrap_or("custom")
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "none" => Some(Self::none()),
            "software" => Some(Self::software()),
            "full" => Some(Self::full()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RollbackConfig {
    pub mechanism: Mechanism,
}

impl Default for RollbackConfig {
    fn default() -> Self {
        RollbackConfig {
            mechanism: Mechanism::Counter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LockoutConfig {
    pub max_tries: u32,
    pub recovery_interval_ms: u64,
}

impl Default for LockoutConfig {
    fn default() -> Self {
        LockoutConfig {
            max_tries: DEFAULT_MAX_TRIES,
            recovery_interval_ms: DEFAULT_RECOVERY_INTERVAL_MS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttestationConfig {
    pub allowlist: String,
    pub cert_validity_ms: u64,
}

impl Default for AttestationConfig {
    fn default() -> Self {
        AttestationConfig {
            allowlist: "cloud/allowlist.txt".into(),
            cert_validity_ms: 24 * 3600 * 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub defense: DefenseConfig,
    pub rollback: RollbackConfig,
    pub clock: ClockConfig,
    pub lockout: LockoutConfig,
    pub attestation: AttestationConfig,
}

impl SimConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: SimConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Missing file means defaults.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        match std::fs::read_to_string(path) {
            Ok(text) => Self::parse(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.clock.tick_rate_hz < 1000 {
            return Err(ConfigError::Invalid("clock.tick_rate_hz must be at least 1000".into()));
        }
        if self.clock.correction_interval_ms == 0 {
            return Err(ConfigError::Invalid("clock.correction_interval_ms must be positive".into()));
        }
        if self.lockout.max_tries == 0 || self.lockout.recovery_interval_ms == 0 {
            return Err(ConfigError::Invalid("lockout parameters must be positive".into()));
        }
        Ok(())
    }

    /// Defense settings with the rollback mechanism from `[rollback]`.
    pub fn effective_defense(&self) -> DefenseConfig {
        DefenseConfig {
            rollback: self.rollback.mechanism,
            ..self.defense
        }
    }
}
