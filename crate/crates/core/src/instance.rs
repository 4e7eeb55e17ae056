// SPDX-License-Identifier: Apache-2.0

//! A running vTPM instance: the launcher checks, the enclave-side command
//! loop, and write-through persistence of NVRAM.
//!
//! Everything the enclave reads from or writes to disk passes through
//! [`HostStorage`], the OCALL boundary. The host side is untrusted: it may
//! hand back any bytes it likes, so every file is authenticated on load.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::clock::ClockHandle;
use crate::codec::CodecError;
use crate::config::{DefenseConfig, LockoutConfig};
use crate::enclave::{EnclaveIdentity, Platform};
use crate::nvram::binding::{provision, vm_digest, Provisioned, UserKey};
use crate::nvram::{
    load_nvram_bytes, remote_binding_check, store_nvram, verify_boot_binding, BindingRecord, BindingReport,
    ChannelKey, EnclaveFile, NvramError, NvramImage, Registry, RegistryEntry, Verdict,
};
use crate::rollback::{LedgerRef, Mechanism, RollbackGuard};
use crate::tpm::lockout::LedgerFault;
use crate::tpm::{Command, Response, Tpm, TpmError, TpmOptions, TpmState};

pub const NVRAM_FILE: &str = "nvram.bin";
pub const ENCLAVE_FILE: &str = "enclave.bin";
pub const BINDING_FILE: &str = "binding.bin";
pub const VM_IMAGE_FILE: &str = "vm.img";

/// Every file an instance directory may hold; this is the rollback space.
pub const INSTANCE_FILES: [&str; 4] = [NVRAM_FILE, ENCLAVE_FILE, BINDING_FILE, VM_IMAGE_FILE];

/// The vTPM enclave code that gets measured and signed.
pub const VTPM_CODE: &[u8] = b"vtpm-sim enclave image v1\0tpm2 command dispatcher\0nvram sealing\0lockout ledger";

/// Untrusted host file access for one instance.
pub trait HostStorage: Send {
    fn read(&self, name: &str) -> io::Result<Vec<u8>>;
    fn write(&mut self, name: &str, data: &[u8]) -> io::Result<()>;
}

/// Files in one directory, replaced atomically on write.
#[derive(Debug, Clone)]
pub struct DirStorage {
    dir: PathBuf,
}

impl DirStorage {
    pub fn new(dir: impl AsRef<Path>) -> Self {
        DirStorage {
            dir: dir.as_ref().to_path_buf(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl HostStorage for DirStorage {
    fn read(&self, name: &str) -> io::Result<Vec<u8>> {
        fs::read(self.dir.join(name))
    }

    fn write(&mut self, name: &str, data: &[u8]) -> io::Result<()> {
        fs::create_dir_all(&self.dir)?;
        let tmp = self.dir.join(format!(".{name}.tmp"));
        fs::write(&tmp, data)?;
        fs::rename(tmp, self.dir.join(name))
    }
}

#[derive(Debug, Clone, Default)]
pub struct MemStorage {
    pub files: HashMap<String, Vec<u8>>,
}

impl HostStorage for MemStorage {
    fn read(&self, name: &str) -> io::Result<Vec<u8>> {
        self.files
            .get(name)
            .cloned()
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, name.to_string()))
    }

    fn write(&mut self, name: &str, data: &[u8]) -> io::Result<()> {
        self.files.insert(name.to_string(), data.to_vec());
        Ok(())
    }
}

/// How the NVRAM image is written to disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    /// Sealed under the enclave signer.
    Sealed,
    /// Plain serialized image, as an unprotected vTPM would keep it.
    Plain,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::Sealed => "sealed",
            Backend::Plain => "plain",
        }
    }
}

/// The cloud-side endpoint of the remote binding check.
#[derive(Debug, Clone)]
pub struct Cloud {
    pub registry: Registry,
    pub channel_key: ChannelKey,
}

impl Cloud {
    /// Records the expected measurements for `name`, pinning the signer.
    pub fn register(&self, name: &str, p: &Provisioned) -> io::Result<()> {
        self.registry.append(&RegistryEntry {
            mrenclave: p.identity.mrenclave,
            vm_digest: p.record.vm_image_digest,
            label: name.to_string(),
            mrsigner: Some(p.identity.mrsigner),
        })
    }
}

/// Signs `code` and `vm_image` with `signer` and writes the enclave file,
/// binding record and VM image of a new instance.
pub fn install(storage: &mut dyn HostStorage, signer: &UserKey, vm_image: &[u8], code: &[u8]) -> io::Result<Provisioned> {
    let p = provision(signer, vm_image, code);
    storage.write(ENCLAVE_FILE, &p.enclave.to_bytes())?;
    storage.write(BINDING_FILE, &p.record.to_bytes())?;
    storage.write(VM_IMAGE_FILE, vm_image)?;
    Ok(p)
}

/// Platform services and host resources shared by instances.
#[derive(Clone)]
pub struct Environment {
    pub platform: Arc<Platform>,
    pub clock: Arc<dyn ClockHandle>,
    /// Directory for software ledgers; `None` keeps them in memory.
    pub ledger_dir: Option<PathBuf>,
    /// Remote binding check endpoint; `None` skips the check.
    pub cloud: Option<Cloud>,
}

impl std::fmt::Debug for Environment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Environment")
            .field("platform", &self.platform)
            .field("ledger_dir", &self.ledger_dir)
            .field("cloud", &self.cloud)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LaunchError {
    #[error("enclave file missing or its signature does not verify")]
    BadEnclave,
    #[error("boot refused: VM image does not match the binding record")]
    BootRefused,
    #[error("remote binding check failed: {}", .0.name())]
    RemoteCheck(Verdict),
    #[error("instance {0:?} is not in the cloud registry")]
    Unregistered(String),
    #[error(transparent)]
    Nvram(#[from] NvramError),
    #[error("TPM state: {0}")]
    State(#[from] CodecError),
    #[error(transparent)]
    Ledger(#[from] LedgerFault),
    #[error("trusted clock unavailable")]
    Clock,
    #[error("host storage: {0}")]
    Io(String),
}

impl From<io::Error> for LaunchError {
    fn from(e: io::Error) -> Self {
        LaunchError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceOptions {
    pub defense: DefenseConfig,
    pub backend: Backend,
    pub lockout: LockoutConfig,
    pub tpm: TpmOptions,
}

impl InstanceOptions {
    /// Sealed storage iff NVRAM binding is on.
    pub fn for_defense(defense: DefenseConfig) -> Self {
        InstanceOptions {
            defense,
            backend: if defense.nvram_binding { Backend::Sealed } else { Backend::Plain },
            lockout: LockoutConfig::default(),
            tpm: TpmOptions::default(),
        }
    }
}

pub struct VtpmInstance {
    name: String,
    env: Environment,
    options: InstanceOptions,
    storage: Box<dyn HostStorage>,
    identity: EnclaveIdentity,
    tpm: Tpm,
    guard: RollbackGuard,
    halted: Option<String>,
}

impl std::fmt::Debug for VtpmInstance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VtpmInstance")
            .field("name", &self.name)
            .field("identity", &self.identity)
            .field("options", &self.options)
            .field("guard", &self.guard)
            .field("halted", &self.halted)
            .finish_non_exhaustive()
    }
}

/// Loads the enclave and, with binding on, runs the boot-time and remote
/// checks. Returns the identity the enclave runs under.
fn boot_checks(
    env: &Environment,
    name: &str,
    storage: &dyn HostStorage,
    defense: &DefenseConfig,
) -> Result<EnclaveIdentity, LaunchError> {
    let enclave = storage
        .read(ENCLAVE_FILE)
        .ok()
        .and_then(|b| EnclaveFile::from_bytes(&b).ok())
        .filter(EnclaveFile::verify)
        .ok_or(LaunchError::BadEnclave)?;
    let identity = enclave.identity();
    if !defense.nvram_binding {
        return Ok(identity);
    }
    let vm = storage.read(VM_IMAGE_FILE).map_err(|_| LaunchError::BootRefused)?;
    let record = storage
        .read(BINDING_FILE)
        .ok()
        .and_then(|b| BindingRecord::from_bytes(&b).ok())
        .ok_or(LaunchError::BootRefused)?;
    if !verify_boot_binding(&vm, &record, &enclave.signer_pub) {
        return Err(LaunchError::BootRefused);
    }
    if let Some(cloud) = &env.cloud {
        let report = BindingReport::new(&cloud.channel_key, name, &identity, vm_digest(&vm));
        let expected = cloud
            .registry
            .lookup(name)?
            .ok_or_else(|| LaunchError::Unregistered(name.to_string()))?;
        match remote_binding_check(&report, &expected, &cloud.channel_key) {
            Verdict::Ok => {}
            v => return Err(LaunchError::RemoteCheck(v)),
        }
    }
    Ok(identity)
}

fn ledger_path(env: &Environment, name: &str) -> Option<PathBuf> {
    env.ledger_dir.as_ref().map(|d| d.join(format!("{name}.ledger")))
}

impl VtpmInstance {
    /// First start: fresh seeds, fresh ledger, NVRAM written.
    pub fn create(
        env: Environment,
        name: &str,
        storage: Box<dyn HostStorage>,
        options: InstanceOptions,
    ) -> Result<Self, LaunchError> {
        let identity = boot_checks(&env, name, storage.as_ref(), &options.defense)?;
        let mut rng = ChaCha20Rng::from_seed(env.platform.random_bytes());
        let mut state = TpmState::new(&mut rng);
        state.lockout.max_tries = options.lockout.max_tries;
        state.lockout.recovery_interval_ms = options.lockout.recovery_interval_ms;
        let guard = match options.defense.rollback {
            Mechanism::Off => RollbackGuard::off(env.platform.clone(), identity),
            Mechanism::Software => {
                let path = ledger_path(&env, name);
                if let Some(p) = &path {
                    // a re-initialized instance starts from a clean ledger
                    match fs::remove_file(p) {
                        Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(e.into()),
                        _ => {}
                    }
                }
                RollbackGuard::software(env.platform.clone(), identity, path)?
            }
            Mechanism::Counter => RollbackGuard::counter_create(env.platform.clone(), identity)?,
        };
        Self::start(env, name, storage, options, identity, state, guard, None)
    }

    /// Boots an existing instance from its files.
    pub fn launch(
        env: Environment,
        name: &str,
        storage: Box<dyn HostStorage>,
        options: InstanceOptions,
    ) -> Result<Self, LaunchError> {
        let identity = boot_checks(&env, name, storage.as_ref(), &options.defense)?;
        let bytes = storage.read(NVRAM_FILE)?;
        let image = match options.backend {
            Backend::Sealed => load_nvram_bytes(&env.platform, &identity, &bytes)?,
            Backend::Plain => NvramImage::from_bytes(&bytes)?,
        };
        let mut state = TpmState::from_bytes(&image.tpm_state)?;
        let mut guard = match (options.defense.rollback, image.rollback_ledger_ref) {
            (Mechanism::Off, _) => RollbackGuard::off(env.platform.clone(), identity),
            (Mechanism::Software, _) => {
                RollbackGuard::software(env.platform.clone(), identity, ledger_path(&env, name))?
            }
            (Mechanism::Counter, LedgerRef::Counter(uuid)) => {
                RollbackGuard::counter_open(env.platform.clone(), identity, uuid)
            }
            (Mechanism::Counter, _) => RollbackGuard::counter_create(env.platform.clone(), identity)?,
        };
        let now = env.clock.now_ms().map_err(|_| LaunchError::Clock)?;
        let halted = guard
            .on_restore(&mut state.lockout, now)
            .err()
            .map(|f| f.to_string());
        Self::start(env, name, storage, options, identity, state, guard, halted)
    }

    #[allow(clippy::too_many_arguments)]
    fn start(
        env: Environment,
        name: &str,
        storage: Box<dyn HostStorage>,
        options: InstanceOptions,
        identity: EnclaveIdentity,
        mut state: TpmState,
        guard: RollbackGuard,
        halted: Option<String>,
    ) -> Result<Self, LaunchError> {
        state.note_startup();
        let rng_seed = env.platform.random_bytes();
        let mut inst = VtpmInstance {
            name: name.to_string(),
            tpm: Tpm::new(state, rng_seed, options.tpm),
            env,
            options,
            storage,
            identity,
            guard,
            halted,
        };
        if inst.halted.is_none() {
            inst.persist()?;
        }
        Ok(inst)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn identity(&self) -> &EnclaveIdentity {
        &self.identity
    }

    pub fn options(&self) -> &InstanceOptions {
        &self.options
    }

    pub fn platform(&self) -> &Arc<Platform> {
        &self.env.platform
    }

    pub fn tpm(&self) -> &Tpm {
        &self.tpm
    }

    /// Direct access for tests and oracles; bypasses write-through.
    pub fn tpm_mut(&mut self) -> &mut Tpm {
        &mut self.tpm
    }

    pub fn guard(&self) -> &RollbackGuard {
        &self.guard
    }

    /// Why the instance stopped serving, if it did.
    pub fn halted(&self) -> Option<&str> {
        self.halted.as_deref()
    }

    pub fn interrupt_next_sync(&mut self) {
        self.guard.interrupt_next_sync();
    }

    fn image(&self) -> NvramImage {
        NvramImage::new(self.tpm.state().to_bytes(), self.guard.ledger_ref())
    }

    /// Serialized NVRAM exactly as it would be written now.
    pub fn nvram_bytes(&self) -> Vec<u8> {
        match self.options.backend {
            Backend::Sealed => store_nvram(&self.env.platform, &self.identity, &self.image()).to_bytes(),
            Backend::Plain => self.image().to_bytes(),
        }
    }

    fn persist(&mut self) -> Result<(), LaunchError> {
        let bytes = self.nvram_bytes();
        self.storage.write(NVRAM_FILE, &bytes)?;
        Ok(())
    }

    pub fn execute(&mut self, cmd: &Command) -> Response {
        if self.halted.is_some() {
            return Response::error(&TpmError::Failure);
        }
        let outcome = self.tpm.execute(cmd, self.env.clock.as_ref(), &mut self.guard);
        if let Some(f) = outcome.fault {
            self.halted = Some(f.to_string());
        }
        if outcome.state_changed {
            if let Err(e) = self.persist() {
                self.halted = Some(e.to_string());
                return Response::error(&TpmError::Failure);
            }
        }
        outcome.response
    }

    /// Raw bytes in, raw bytes out, as the host would relay them.
    pub fn execute_bytes(&mut self, bytes: &[u8]) -> Vec<u8> {
        match Command::decode(bytes) {
            Ok(cmd) => self.execute(&cmd).encode(),
            Err(e) => Response::error(&e).encode(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::enclave::VirtualTime;
    use crate::nvram::{provision, RegistryEntry, UserKey};
    use crate::tpm::{build, parse, KeyKind};

    struct Rig {
        env: Environment,
        clock: Arc<ManualClock>,
        _dir: tempfile::TempDir,
    }

    fn rig() -> Rig {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(ManualClock::at(0));
        let cloud = Cloud {
            registry: Registry::open(dir.path().join("registry.txt")),
            channel_key: ChannelKey([7; 32]),
        };
        Rig {
            env: Environment {
                platform: Arc::new(Platform::ephemeral(Arc::new(VirtualTime::new()), 1)),
                clock: clock.clone(),
                ledger_dir: Some(dir.path().join("ledger")),
                cloud: Some(cloud),
            },
            clock,
            _dir: dir,
        }
    }

    fn provisioned(env: &Environment, user: u8, name: &str) -> MemStorage {
        let key = UserKey::from_bytes(&[user; 32]);
        let vm = format!("vm image of {name}").into_bytes();
        let p = provision(&key, &vm, VTPM_CODE);
        env.cloud
            .as_ref()
            .unwrap()
            .registry
            .append(&RegistryEntry {
                mrenclave: p.identity.mrenclave,
                vm_digest: vm_digest(&vm),
                label: name.into(),
                mrsigner: Some(p.identity.mrsigner),
            })
            .unwrap();
        let mut s = MemStorage::default();
        s.write(ENCLAVE_FILE, &p.enclave.to_bytes()).unwrap();
        s.write(BINDING_FILE, &p.record.to_bytes()).unwrap();
        s.write(VM_IMAGE_FILE, &vm).unwrap();
        s
    }

    /// Storage that shares its map so the test can look at what was written.
    #[derive(Clone, Default)]
    struct Shared(Arc<std::sync::Mutex<MemStorage>>);

    impl HostStorage for Shared {
        fn read(&self, name: &str) -> io::Result<Vec<u8>> {
            self.0.lock().unwrap().read(name)
        }
        fn write(&mut self, name: &str, data: &[u8]) -> io::Result<()> {
            self.0.lock().unwrap().write(name, data)
        }
    }

    #[test]
    fn write_through_matches_memory() {
        let r = rig();
        let shared = Shared(Arc::new(std::sync::Mutex::new(provisioned(&r.env, 1, "alice"))));
        let opts = InstanceOptions::for_defense(DefenseConfig::full());
        let mut inst = VtpmInstance::create(r.env.clone(), "alice", Box::new(shared.clone()), opts).unwrap();
        let resp = inst.execute(&build::nv_write(1, b"secret"));
        assert!(resp.is_success());
        inst.execute(&build::pcr_extend(3, &[1; 32]));
        let on_disk = shared.read(NVRAM_FILE).unwrap();
        let img = load_nvram_bytes(&r.env.platform, inst.identity(), &on_disk).unwrap();
        assert_eq!(img.tpm_state, inst.tpm().state().to_bytes());
    }

    #[test]
    fn relaunch_preserves_state() {
        let r = rig();
        let shared = Shared(Arc::new(std::sync::Mutex::new(provisioned(&r.env, 1, "alice"))));
        let opts = InstanceOptions::for_defense(DefenseConfig::software());
        let mut inst = VtpmInstance::create(r.env.clone(), "alice", Box::new(shared.clone()), opts).unwrap();
        let cmd = build::create_primary(0x4000_0001, b"", KeyKind::AesSymmetric, 256, b"k", b"");
        let (_, public) = parse::created(&inst.execute(&cmd).payload).unwrap();
        drop(inst);
        let mut again = VtpmInstance::launch(r.env.clone(), "alice", Box::new(shared), opts).unwrap();
        assert_eq!(again.tpm().state().startup_counter, 2);
        let (_, p2) = parse::created(&again.execute(&cmd).payload).unwrap();
        assert_eq!(public, p2);
    }

    #[test]
    fn tampered_vm_image_refuses_boot() {
        let r = rig();
        let mut s = provisioned(&r.env, 1, "alice");
        s.write(VM_IMAGE_FILE, b"evil").unwrap();
        let opts = InstanceOptions::for_defense(DefenseConfig::full());
        let e = VtpmInstance::create(r.env.clone(), "alice", Box::new(s), opts).unwrap_err();
        assert_eq!(e, LaunchError::BootRefused);
    }

    #[test]
    fn stack_in_wrong_slot_fails_remote_check() {
        let r = rig();
        provisioned(&r.env, 1, "alice");
        let bob = provisioned(&r.env, 2, "bob");
        let opts = InstanceOptions::for_defense(DefenseConfig::full());
        let e = VtpmInstance::create(r.env.clone(), "alice", Box::new(bob), opts).unwrap_err();
        assert_eq!(e, LaunchError::RemoteCheck(Verdict::MismatchEnclave));
    }

    #[test]
    fn counter_snapshot_across_recovery_halts() {
        let r = rig();
        let shared = Shared(Arc::new(std::sync::Mutex::new(provisioned(&r.env, 1, "alice"))));
        let opts = InstanceOptions::for_defense(DefenseConfig::full());
        let mut inst = VtpmInstance::create(r.env.clone(), "alice", Box::new(shared.clone()), opts).unwrap();
        let snapshot = shared.read(NVRAM_FILE).unwrap();
        for _ in 0..3 {
            inst.execute(&build::hierarchy_change_auth(0x4000_0001, b"wrong", b""));
        }
        r.clock.advance(10_000);
        assert!(inst.execute(&build::pcr_read(&[])).is_success());
        assert_eq!(inst.tpm().state().lockout.failed_tries, 0);
        drop(inst);
        shared.clone().write(NVRAM_FILE, &snapshot).unwrap();
        let mut restored = VtpmInstance::launch(r.env.clone(), "alice", Box::new(shared), opts).unwrap();
        assert!(restored.halted().is_some());
        assert_eq!(restored.execute(&build::pcr_read(&[])).code, TpmError::Failure.code());
    }
}
