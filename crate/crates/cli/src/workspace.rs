// SPDX-License-Identifier: Apache-2.0

//! On-disk layout of a `--root` workspace and assembly of the runtime
//! environment from it.
//!
//! ```text
//! <root>/config.toml              optional, see vtpm_core::config
//! <root>/cloud/registry.txt       binding registry
//! <root>/cloud/channel.key        registry channel MAC key
//! <root>/cloud/provider.key       signs enclaves when binding is off
//! <root>/cloud/pca.key, pca.pub   PCA signing key and its public half
//! <root>/cloud/allowlist.txt      enclave measurements the PCA accepts
//! <root>/users/<name>.key         user signing key
//! <root>/instances/<name>/        nvram.bin enclave.bin binding.bin vm.img
//! <root>/ledger/<name>.ledger     software rollback ledger
//! <root>/snapshots/<name>/<tag>/  copies of the instance files
//! <root>/certs/<name>/            ek.crt aik.crt from `attest`
//! ```
//!
//! The platform directory (secret, counter store, clock epoch) is kept
//! outside the workspace, like the hardware it stands for.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use sha2::{Digest, Sha256};
use vtpm_core::attest::{Pca, PcaConfig, PcaPolicy, VerificationService};
use vtpm_core::clock::{ClockHandle, HostClock, ThreadTicker, TrustedClock};
use vtpm_core::config::SimConfig;
use vtpm_core::enclave::{measure, Platform, WallTime};
use vtpm_core::instance::{
    Cloud, DirStorage, Environment, InstanceOptions, ENCLAVE_FILE, INSTANCE_FILES, NVRAM_FILE,
};
use vtpm_core::nvram::binding::UserKey;
use vtpm_core::nvram::{ChannelKey, Registry};

use crate::CliError;

pub const CONFIG_FILE: &str = "config.toml";

pub struct Workspace {
    pub root: PathBuf,
    pub config: SimConfig,
    pub platform: Arc<Platform>,
    seed: Option<u64>,
}

fn read_key(path: &Path) -> Result<Option<[u8; 32]>, CliError> {
    match fs::read(path) {
        Ok(b) => b
            .try_into()
            .map(Some)
            .map_err(|_| CliError::Corrupt(format!("{} must hold 32 bytes", path.display()))),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

impl Workspace {
    /// Opens (creating as needed) the workspace and the platform. `context`
    /// separates the platform RNG streams of different invocations when a
    /// seed is set.
    pub fn open(root: &Path, platform_dir: &Path, seed: Option<u64>, context: &str) -> Result<Self, CliError> {
        let config = SimConfig::load(&root.join(CONFIG_FILE))?;
        for d in ["cloud", "users", "instances", "ledger", "snapshots", "certs"] {
            fs::create_dir_all(root.join(d))?;
        }
        let platform_seed = seed.map(|s| {
            let d = Sha256::new()
                .chain_update(b"vtpm-sim platform")
                .chain_update(s.to_be_bytes())
                .chain_update(context.as_bytes())
                .finalize();
            u64::from_be_bytes(d[..8].try_into().expect("8 bytes"))
        });
        let platform = Platform::open(platform_dir, Arc::new(WallTime), platform_seed)
            .map_err(|e| CliError::Platform(e.to_string()))?;
        let ws = Workspace {
            root: root.to_path_buf(),
            config,
            platform: Arc::new(platform),
            seed,
        };
        let allowlist = ws.allowlist_path();
        if !allowlist.exists() {
            let mut policy = PcaPolicy::default();
            policy.allow(measure(vtpm_core::instance::VTPM_CODE, &[]).mrenclave);
            fs::write(&allowlist, policy.to_text())?;
        }
        let pca = ws.key("cloud/pca.key", "pca")?;
        let pca_pub = ed25519_public(&pca);
        fs::write(ws.root.join("cloud/pca.pub"), pca_pub)?;
        Ok(ws)
    }

    /// A fresh 32-byte secret, derived from the seed and `label` when one
    /// is set.
    fn secret(&self, label: &str) -> [u8; 32] {
        match self.seed {
            Some(s) => Sha256::new()
                .chain_update(b"vtpm-sim secret")
                .chain_update(s.to_be_bytes())
                .chain_update(label.as_bytes())
                .finalize()
                .into(),
            None => self.platform.random_bytes(),
        }
    }

    /// Reads a key file under the root, creating it on first use.
    fn key(&self, rel: &str, label: &str) -> Result<[u8; 32], CliError> {
        let path = self.root.join(rel);
        if let Some(k) = read_key(&path)? {
            return Ok(k);
        }
        let k = self.secret(label);
        fs::write(&path, k)?;
        Ok(k)
    }

    pub fn allowlist_path(&self) -> PathBuf {
        self.root.join(&self.config.attestation.allowlist)
    }

    pub fn instance_dir(&self, name: &str) -> PathBuf {
        self.root.join("instances").join(name)
    }

    pub fn snapshot_dir(&self, name: &str, tag: &str) -> PathBuf {
        self.root.join("snapshots").join(name).join(tag)
    }

    pub fn cert_dir(&self, name: &str) -> PathBuf {
        self.root.join("certs").join(name)
    }

    pub fn storage(&self, name: &str) -> DirStorage {
        DirStorage::new(self.instance_dir(name))
    }

    pub fn is_provisioned(&self, name: &str) -> bool {
        self.instance_dir(name).join(ENCLAVE_FILE).exists()
    }

    pub fn is_initialized(&self, name: &str) -> bool {
        self.instance_dir(name).join(NVRAM_FILE).exists()
    }

    pub fn instance_files(&self) -> [&'static str; 4] {
        INSTANCE_FILES
    }

    /// The key that signs `name`'s enclave: the user's own with binding on,
    /// the shared provider key otherwise.
    pub fn signer(&self, name: &str) -> Result<UserKey, CliError> {
        let bytes = if self.config.effective_defense().nvram_binding {
            self.key(&format!("users/{name}.key"), &format!("user {name}"))?
        } else {
            self.key("cloud/provider.key", "provider")?
        };
        Ok(UserKey::from_bytes(&bytes))
    }

    pub fn cloud(&self) -> Result<Cloud, CliError> {
        Ok(Cloud {
            registry: Registry::open(self.root.join("cloud/registry.txt")),
            channel_key: ChannelKey(self.key("cloud/channel.key", "channel")?),
        })
    }

    pub fn options(&self) -> InstanceOptions {
        InstanceOptions {
            lockout: self.config.lockout,
            ..InstanceOptions::for_defense(self.config.effective_defense())
        }
    }

    pub fn environment(&self) -> Result<Environment, CliError> {
        let defense = self.config.effective_defense();
        let clock: Arc<dyn ClockHandle> = if defense.trusted_clock {
            Arc::new(TrustedClock::new(
                self.platform.clone(),
                Arc::new(ThreadTicker::spawn(self.config.clock.tick_rate_hz)),
                self.config.clock,
            ))
        } else {
            Arc::new(HostClock::new(Arc::new(WallTime)))
        };
        Ok(Environment {
            platform: self.platform.clone(),
            clock,
            ledger_dir: Some(self.root.join("ledger")),
            cloud: if defense.nvram_binding { Some(self.cloud()?) } else { None },
        })
    }

    pub fn pca(&self) -> Result<Pca, CliError> {
        let policy = PcaPolicy::load(&self.allowlist_path())?;
        Ok(Pca::new(
            PcaConfig {
                signing_key: self.key("cloud/pca.key", "pca")?,
                policy,
                enforce: self.config.effective_defense().attestation,
                validity_ms: self.config.attestation.cert_validity_ms,
            },
            VerificationService::new(self.platform.group_public()),
            Arc::new(HostClock::new(Arc::new(WallTime))),
            self.secret("pca nonces"),
        ))
    }
}

fn ed25519_public(secret: &[u8; 32]) -> [u8; 32] {
    UserKey::from_bytes(secret).public()
}

/// Copies the instance files present in `from` into `to`.
pub fn copy_files(files: &[&str], from: &Path, to: &Path) -> io::Result<usize> {
    fs::create_dir_all(to)?;
    let mut n = 0;
    for f in files {
        match fs::read(from.join(f)) {
            Ok(b) => {
                fs::write(to.join(f), b)?;
                n += 1;
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}
