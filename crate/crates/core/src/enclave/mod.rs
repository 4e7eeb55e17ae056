// SPDX-License-Identifier: Apache-2.0

//! Simulated enclave services: measured identity, policy-keyed sealing,
//! monotonic counters, coarse trusted time and quoting.
//!
//! Everything the rest of the crate needs from "SGX" goes through
//! [`Platform`], so swapping the simulation for real hardware would touch
//! only this module. The platform secret and the counter store model fused
//! keys and management-engine storage: they live in a platform directory that
//! no vTPM snapshot covers.

pub mod counter;
pub mod identity;
pub mod quote;
pub mod seal;
pub mod time;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use ed25519_dalek::{SigningKey, VerifyingKey};
use hkdf::Hkdf;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::Sha256;
use thiserror::Error;

pub use counter::{CounterAccess, CounterService, CounterUuid, MAX_COUNTERS};
pub use identity::{measure, EnclaveIdentity, Measurement};
pub use quote::Quote;
pub use seal::{SealPolicy, SealedBlob};
pub use time::{Epoch, MonotonicTime, PlatformClock, TimeSource, VirtualTime, WallTime};

pub const PLATFORM_SECRET_FILE: &str = "platform.secret";
pub const COUNTER_STORE_FILE: &str = "counters.bin";
pub const EPOCH_FILE: &str = "epoch.bin";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnclaveError {
    #[error("sealing policy register does not match the caller")]
    PolicyMismatch,
    #[error("sealed data is corrupt: {0}")]
    Corrupt(String),
    #[error("no monotonic counters left on this platform")]
    NoCounters,
    #[error("caller does not satisfy the counter access policy")]
    Access,
    #[error("unknown monotonic counter {0}")]
    UnknownUuid(CounterUuid),
    #[error("platform storage: {0}")]
    Io(String),
}

impl From<io::Error> for EnclaveError {
    fn from(e: io::Error) -> Self {
        EnclaveError::Io(e.to_string())
    }
}

pub struct Platform {
    secret: [u8; 32],
    counters: CounterService,
    clock: PlatformClock,
    group_key: SigningKey,
    rng: Mutex<ChaCha20Rng>,
    dir: Option<PathBuf>,
}

impl std::fmt::Debug for Platform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Platform")
            .field("dir", &self.dir)
            .field("counters", &self.counters)
            .field("clock", &self.clock)
            .finish_non_exhaustive()
    }
}

fn derive_group_key(secret: &[u8; 32]) -> SigningKey {
    let hk = Hkdf::<Sha256>::new(Some(b"vtpm-sim/platform"), secret);
    let mut seed = [0u8; 32];
    hk.expand(b"group signing key", &mut seed)
        .expect("32 bytes is a valid HKDF length");
    SigningKey::from_bytes(&seed)
}

fn platform_rng(seed: Option<u64>) -> ChaCha20Rng {
    match seed {
        Some(s) => ChaCha20Rng::seed_from_u64(s),
        None => ChaCha20Rng::from_entropy(),
    }
}

impl Platform {
    /// In-memory platform; nothing touches the filesystem.
    pub fn ephemeral(time: Arc<dyn TimeSource>, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut secret = [0u8; 32];
        rng.fill_bytes(&mut secret);
        let nonce = rng.next_u64();
        Platform {
            group_key: derive_group_key(&secret),
            secret,
            counters: CounterService::in_memory(),
            clock: PlatformClock::new(time, nonce),
            rng: Mutex::new(rng),
            dir: None,
        }
    }

    /// Opens the platform directory, creating the secret, counter store and
    /// epoch record on first use.
    pub fn open(
        dir: impl AsRef<Path>,
        time: Arc<dyn TimeSource>,
        seed: Option<u64>,
    ) -> Result<Self, EnclaveError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut rng = platform_rng(seed);

        let secret_path = dir.join(PLATFORM_SECRET_FILE);
        let secret: [u8; 32] = match fs::read(&secret_path) {
            Ok(bytes) => bytes
                .try_into()
                .map_err(|_| EnclaveError::Corrupt("platform secret must be 32 bytes".into()))?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                let mut s = [0u8; 32];
                rng.fill_bytes(&mut s);
                fs::write(&secret_path, s)?;
                s
            }
            Err(e) => return Err(e.into()),
        };

        let epoch_path = dir.join(EPOCH_FILE);
        let clock = match fs::read(&epoch_path) {
            Ok(bytes) if bytes.len() == 16 => {
                let nonce = u64::from_be_bytes(bytes[..8].try_into().expect("8 bytes"));
                let start_ms = u64::from_be_bytes(bytes[8..].try_into().expect("8 bytes"));
                PlatformClock::resume(time, Epoch { nonce, start_ms })
            }
            Ok(_) => return Err(EnclaveError::Corrupt("epoch record must be 16 bytes".into())),
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                let clock = PlatformClock::new(time, rng.next_u64());
                write_epoch(&epoch_path, clock.epoch())?;
                clock
            }
            Err(e) => return Err(e.into()),
        };

        Ok(Platform {
            group_key: derive_group_key(&secret),
            secret,
            counters: CounterService::open(dir.join(COUNTER_STORE_FILE))?,
            clock,
            rng: Mutex::new(rng),
            dir: Some(dir.to_path_buf()),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn random_bytes<const N: usize>(&self) -> [u8; N] {
        let mut out = [0u8; N];
        self.rng.lock().expect("rng poisoned").fill_bytes(&mut out);
        out
    }

    pub fn random_u64(&self) -> u64 {
        self.rng.lock().expect("rng poisoned").next_u64()
    }

    pub fn seal(&self, identity: &EnclaveIdentity, policy: SealPolicy, plaintext: &[u8]) -> SealedBlob {
        let mut rng = self.rng.lock().expect("rng poisoned");
        seal::seal(&self.secret, identity, policy, plaintext, &mut *rng)
    }

    pub fn unseal(&self, identity: &EnclaveIdentity, blob: &SealedBlob) -> Result<Vec<u8>, EnclaveError> {
        seal::unseal(&self.secret, identity, blob)
    }

    pub fn counters(&self) -> &CounterService {
        &self.counters
    }

    pub fn counter_create(
        &self,
        identity: &EnclaveIdentity,
        access: CounterAccess,
    ) -> Result<CounterUuid, EnclaveError> {
        let uuid = CounterUuid(self.random_bytes());
        self.counters.create(identity, access, uuid)
    }

    pub fn counter_increment(&self, identity: &EnclaveIdentity, uuid: CounterUuid) -> Result<u64, EnclaveError> {
        self.counters.increment(identity, uuid)
    }

    pub fn counter_read(&self, identity: &EnclaveIdentity, uuid: CounterUuid) -> Result<u64, EnclaveError> {
        self.counters.read(identity, uuid)
    }

    pub fn counter_destroy(&self, identity: &EnclaveIdentity, uuid: CounterUuid) -> Result<(), EnclaveError> {
        self.counters.destroy(identity, uuid)
    }

    pub fn clock(&self) -> &PlatformClock {
        &self.clock
    }

    pub fn platform_time(&self) -> (u64, u64) {
        self.clock.platform_time()
    }

    /// Simulated platform reset: the coarse clock loses its reference.
    pub fn reset_epoch(&self) -> Result<(), EnclaveError> {
        self.clock.reset(self.random_u64());
        if let Some(dir) = &self.dir {
            write_epoch(&dir.join(EPOCH_FILE), self.clock.epoch())?;
        }
        Ok(())
    }

    pub fn quote(&self, identity: &EnclaveIdentity, user_data: [u8; 64]) -> Quote {
        quote::quote(identity, user_data, &self.group_key)
    }

    /// Public half of the group key, handed to the verification service.
    pub fn group_public(&self) -> VerifyingKey {
        self.group_key.verifying_key()
    }
}

fn write_epoch(path: &Path, epoch: Epoch) -> Result<(), EnclaveError> {
    let mut buf = [0u8; 16];
    buf[..8].copy_from_slice(&epoch.nonce.to_be_bytes());
    buf[8..].copy_from_slice(&epoch.start_ms.to_be_bytes());
    fs::write(path, buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn open_persists_secret_and_counters() {
        let dir = tempfile::tempdir().unwrap();
        let id = measure(b"code", b"alice");
        let time: Arc<dyn TimeSource> = Arc::new(VirtualTime::new());
        let (uuid, blob) = {
            let p = Platform::open(dir.path(), time.clone(), Some(1)).unwrap();
            let u = p.counter_create(&id, CounterAccess::SameSigner).unwrap();
            p.counter_increment(&id, u).unwrap();
            (u, p.seal(&id, SealPolicy::BySigner, b"hello"))
        };
        assert_eq!(fs::read(dir.path().join(PLATFORM_SECRET_FILE)).unwrap().len(), 32);
        let p = Platform::open(dir.path(), time, None).unwrap();
        assert_eq!(p.unseal(&id, &blob).unwrap(), b"hello");
        assert_eq!(p.counter_read(&id, uuid).unwrap(), 1);
    }

    #[test]
    fn platform_time_and_reset() {
        let t = VirtualTime::new();
        let p = Platform::ephemeral(Arc::new(t.clone()), 5);
        let (n0, s0) = p.platform_time();
        assert_eq!(s0, 0);
        t.advance(1500);
        assert_eq!(p.platform_time(), (n0, 1));
        p.reset_epoch().unwrap();
        let (n1, s1) = p.platform_time();
        assert_ne!(n0, n1);
        assert_eq!(s1, 0);
    }

    #[test]
    fn quote_binds_user_data() {
        let p = Platform::ephemeral(Arc::new(VirtualTime::new()), 5);
        let id = measure(b"code", b"alice");
        let q1 = p.quote(&id, [1u8; 64]);
        let q2 = p.quote(&id, [2u8; 64]);
        assert!(q1.verify(&p.group_public()) && q2.verify(&p.group_public()));
        let mut spliced = q2.clone();
        spliced.user_data = q1.user_data;
        assert!(!spliced.verify(&p.group_public()));
    }
}
