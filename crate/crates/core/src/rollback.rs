// SPDX-License-Identifier: Apache-2.0

//! Rollback protection for the dictionary-attack counter.
//!
//! Two mechanisms keep a copy of `failed_tries` outside the files an
//! adversary can snapshot and restore:
//!
//! * `Software` mirrors the count into a sealed ledger file after every
//!   failure and takes the maximum of both copies after a restore. A crash
//!   (or a deliberate kill) between the state update and the ledger write
//!   leaves the ledger stale, which is the mechanism's known weakness.
//! * `Counter` keeps the count in a platform monotonic counter. Recovery from
//!   lockout destroys the counter and creates a fresh one, so a snapshot taken
//!   before the recovery names a counter that no longer exists and the
//!   instance refuses to serve until it is re-provisioned.
//!
//! Ledger file layout: a `SealedBlob` (signer policy) whose plaintext is
//! `"VLDG" | version u16 = 1 | global_failed_tries u32`.

use std::fs;
use std::io;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::enclave::{CounterAccess, CounterUuid, EnclaveError, EnclaveIdentity, Platform, SealPolicy, SealedBlob};
use crate::tpm::lockout::{derive_deadline, FailureLedger, LedgerFault};
use crate::tpm::LockoutRecord;

const LEDGER_MAGIC: &[u8; 4] = b"VLDG";
const LEDGER_VERSION: u16 = 1;

/// Access policy for the counters this module creates.
pub const COUNTER_ACCESS: CounterAccess = CounterAccess::SameEnclaveAndSigner;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Off,
    #[default]
    Software,
    Counter,
}

impl std::str::FromStr for Mechanism {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(Mechanism::Off),
            "software" => Ok(Mechanism::Software),
            "counter" => Ok(Mechanism::Counter),
            other => Err(format!("unknown rollback mechanism {other:?}")),
        }
    }
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mechanism::Off => "off",
            Mechanism::Software => "software",
            Mechanism::Counter => "counter",
        })
    }
}

/// What the NVRAM image records about the ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LedgerRef {
    None,
    Software,
    Counter(CounterUuid),
}

fn fault(e: impl std::fmt::Display) -> LedgerFault {
    LedgerFault(e.to_string())
}

/// Sealed file (or memory cell) holding `Global_FailedTries`.
#[derive(Debug)]
struct GlobalStore {
    path: Option<PathBuf>,
    value: u32,
}

impl GlobalStore {
    fn load(platform: &Platform, identity: &EnclaveIdentity, path: Option<PathBuf>) -> Result<Self, LedgerFault> {
        let value = match &path {
            None => 0,
            Some(p) => match fs::read(p) {
                Ok(bytes) => {
                    let blob = SealedBlob::from_bytes(&bytes).map_err(fault)?;
                    let plain = platform.unseal(identity, &blob).map_err(fault)?;
                    let mut r = Reader::new(&plain);
                    r.expect_magic(LEDGER_MAGIC).map_err(fault)?;
                    if r.u16().map_err(fault)? != LEDGER_VERSION {
                        return Err(LedgerFault("unsupported ledger version".into()));
                    }
                    let v = r.u32().map_err(fault)?;
                    r.finish().map_err(fault)?;
                    v
                }
                Err(e) if e.kind() == io::ErrorKind::NotFound => 0,
                Err(e) => return Err(fault(e)),
            },
        };
        Ok(GlobalStore { path, value })
    }

    fn write(&mut self, platform: &Platform, identity: &EnclaveIdentity, value: u32) -> Result<(), LedgerFault> {
        if let Some(p) = &self.path {
            let mut w = Writer::new();
            w.raw(LEDGER_MAGIC).u16(LEDGER_VERSION).u32(value);
            let blob = platform.seal(identity, SealPolicy::BySigner, w.as_slice());
            if let Some(dir) = p.parent() {
                fs::create_dir_all(dir).map_err(fault)?;
            }
            let tmp = p.with_extension("tmp");
            fs::write(&tmp, blob.to_bytes()).map_err(fault)?;
            fs::rename(&tmp, p).map_err(fault)?;
        }
        self.value = value;
        Ok(())
    }
}

#[derive(Debug)]
enum Kind {
    Off,
    Software(GlobalStore),
    Counter(CounterUuid),
}

/// The active rollback mechanism for one vTPM instance.
pub struct RollbackGuard {
    platform: Arc<Platform>,
    identity: EnclaveIdentity,
    kind: Kind,
    interrupt_next: bool,
}

impl std::fmt::Debug for RollbackGuard {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RollbackGuard")
            .field("kind", &self.kind)
            .field("interrupt_next", &self.interrupt_next)
            .finish_non_exhaustive()
    }
}

impl RollbackGuard {
    pub fn off(platform: Arc<Platform>, identity: EnclaveIdentity) -> Self {
        RollbackGuard {
            platform,
            identity,
            kind: Kind::Off,
            interrupt_next: false,
        }
    }

    /// `ledger_path = None` keeps the global copy in memory only.
    pub fn software(
        platform: Arc<Platform>,
        identity: EnclaveIdentity,
        ledger_path: Option<PathBuf>,
    ) -> Result<Self, LedgerFault> {
        let store = GlobalStore::load(&platform, &identity, ledger_path)?;
        Ok(RollbackGuard {
            platform,
            identity,
            kind: Kind::Software(store),
            interrupt_next: false,
        })
    }

    /// Allocates a fresh counter for a new instance.
    pub fn counter_create(platform: Arc<Platform>, identity: EnclaveIdentity) -> Result<Self, LedgerFault> {
        let uuid = platform.counter_create(&identity, COUNTER_ACCESS).map_err(fault)?;
        Ok(Self::counter_open(platform, identity, uuid))
    }

    pub fn counter_open(platform: Arc<Platform>, identity: EnclaveIdentity, uuid: CounterUuid) -> Self {
        RollbackGuard {
            platform,
            identity,
            kind: Kind::Counter(uuid),
            interrupt_next: false,
        }
    }

    pub fn mechanism(&self) -> Mechanism {
        match self.kind {
            Kind::Off => Mechanism::Off,
            Kind::Software(_) => Mechanism::Software,
            Kind::Counter(_) => Mechanism::Counter,
        }
    }

    pub fn ledger_ref(&self) -> LedgerRef {
        match &self.kind {
            Kind::Off => LedgerRef::None,
            Kind::Software(_) => LedgerRef::Software,
            Kind::Counter(u) => LedgerRef::Counter(*u),
        }
    }

    pub fn global_failed_tries(&self) -> Option<u32> {
        match &self.kind {
            Kind::Software(s) => Some(s.value),
            _ => None,
        }
    }

    pub fn counter_uuid(&self) -> Option<CounterUuid> {
        match &self.kind {
            Kind::Counter(u) => Some(*u),
            _ => None,
        }
    }

    /// The next software synchronization is skipped, as if the process were
    /// killed between the state update and the ledger write. No effect on
    /// the counter mechanism, whose single increment is the update.
    pub fn interrupt_next_sync(&mut self) {
        self.interrupt_next = true;
    }

    fn counter_value(&self, uuid: CounterUuid) -> Result<u32, LedgerFault> {
        let v = self.platform.counter_read(&self.identity, uuid).map_err(map_counter)?;
        Ok(u32::try_from(v).unwrap_or(u32::MAX))
    }

    /// Re-synchronizes a freshly loaded (possibly rolled back) lockout record.
    pub fn on_restore(&mut self, lockout: &mut LockoutRecord, now_ms: u64) -> Result<(), LedgerFault> {
        let synced = match &self.kind {
            Kind::Off => return Ok(()),
            Kind::Software(s) => lockout.failed_tries.max(s.value),
            Kind::Counter(u) => self.counter_value(*u)?,
        };
        lockout.failed_tries = synced;
        derive_deadline(lockout, now_ms);
        Ok(())
    }
}

fn map_counter(e: EnclaveError) -> LedgerFault {
    match e {
        EnclaveError::UnknownUuid(u) => LedgerFault(format!("monotonic counter {u} no longer exists")),
        other => fault(other),
    }
}

impl FailureLedger for RollbackGuard {
    fn on_auth_failure(&mut self, lockout: &mut LockoutRecord) -> Result<(), LedgerFault> {
        let interrupted = std::mem::take(&mut self.interrupt_next);
        match &mut self.kind {
            Kind::Off => lockout.failed_tries += 1,
            Kind::Software(store) => {
                lockout.failed_tries += 1;
                if !interrupted {
                    store.write(&self.platform, &self.identity, lockout.failed_tries)?;
                }
            }
            Kind::Counter(uuid) => {
                let v = self
                    .platform
                    .counter_increment(&self.identity, *uuid)
                    .map_err(map_counter)?;
                lockout.failed_tries = u32::try_from(v).unwrap_or(u32::MAX);
            }
        }
        Ok(())
    }

    fn on_lockout_recovery(&mut self, lockout: &mut LockoutRecord) -> Result<(), LedgerFault> {
        match &mut self.kind {
            Kind::Off => {}
            Kind::Software(store) => store.write(&self.platform, &self.identity, 0)?,
            Kind::Counter(uuid) => {
                self.platform
                    .counter_destroy(&self.identity, *uuid)
                    .map_err(map_counter)?;
                *uuid = self
                    .platform
                    .counter_create(&self.identity, COUNTER_ACCESS)
                    .map_err(fault)?;
            }
        }
        lockout.failed_tries = 0;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enclave::{measure, VirtualTime};
    use crate::tpm::{lockout_tick, record_auth_failure};

    fn platform() -> Arc<Platform> {
        Arc::new(Platform::ephemeral(Arc::new(VirtualTime::new()), 3))
    }

    fn id() -> EnclaveIdentity {
        measure(b"code", b"user")
    }

    #[test]
    fn software_failure_syncs_both_copies() {
        let mut g = RollbackGuard::software(platform(), id(), None).unwrap();
        let mut l = LockoutRecord::default();
        record_auth_failure(&mut l, 0, &mut g).unwrap();
        assert_eq!(l.failed_tries, 1);
        assert_eq!(g.global_failed_tries(), Some(1));
    }

    #[test]
    fn counter_failure_mirrors_counter() {
        let p = platform();
        let mut g = RollbackGuard::counter_create(p.clone(), id()).unwrap();
        let mut l = LockoutRecord::default();
        record_auth_failure(&mut l, 0, &mut g).unwrap();
        let uuid = g.counter_uuid().unwrap();
        assert_eq!(p.counter_read(&id(), uuid).unwrap(), l.failed_tries as u64);
    }

    #[test]
    fn destroyed_uuid_is_a_fault() {
        let p = platform();
        let mut g = RollbackGuard::counter_create(p.clone(), id()).unwrap();
        p.counter_destroy(&id(), g.counter_uuid().unwrap()).unwrap();
        let mut l = LockoutRecord::default();
        assert!(record_auth_failure(&mut l, 0, &mut g).is_err());
        assert!(g.on_restore(&mut l, 0).is_err());
    }

    #[test]
    fn restore_takes_the_larger_count() {
        for mech in [Mechanism::Software, Mechanism::Counter] {
            let p = platform();
            let mut g = match mech {
                Mechanism::Software => RollbackGuard::software(p, id(), None).unwrap(),
                _ => RollbackGuard::counter_create(p, id()).unwrap(),
            };
            let mut l = LockoutRecord::default();
            record_auth_failure(&mut l, 0, &mut g).unwrap();
            record_auth_failure(&mut l, 0, &mut g).unwrap();
            let snapshot = l.clone();
            record_auth_failure(&mut l, 50, &mut g).unwrap();
            assert!(l.is_locked());
            let mut restored = snapshot.clone();
            g.on_restore(&mut restored, 60).unwrap();
            assert_eq!(restored.failed_tries, 3, "{mech}");
            assert!(restored.is_locked());

            // no intervening failures: unchanged
            let mut same = l.clone();
            g.on_restore(&mut same, 70).unwrap();
            assert_eq!(same, l);
        }
    }

    #[test]
    fn interrupted_sync_leaves_global_stale() {
        let mut g = RollbackGuard::software(platform(), id(), None).unwrap();
        let mut l = LockoutRecord::default();
        record_auth_failure(&mut l, 0, &mut g).unwrap();
        record_auth_failure(&mut l, 0, &mut g).unwrap();
        let snapshot = l.clone();
        g.interrupt_next_sync();
        record_auth_failure(&mut l, 0, &mut g).unwrap();
        assert_eq!(g.global_failed_tries(), Some(2));
        let mut restored = snapshot;
        g.on_restore(&mut restored, 0).unwrap();
        assert_eq!(restored.failed_tries, 2);
        assert!(!restored.is_locked());
    }

    #[test]
    fn counter_recovery_replaces_uuid_and_keeps_budget() {
        let p = platform();
        let mut g = RollbackGuard::counter_create(p.clone(), id()).unwrap();
        let old = g.counter_uuid().unwrap();
        let free = p.counters().free_slots();
        let mut l = LockoutRecord::default();
        for _ in 0..3 {
            record_auth_failure(&mut l, 0, &mut g).unwrap();
        }
        lockout_tick(&mut l, 10_000, &mut g).unwrap();
        let new = g.counter_uuid().unwrap();
        assert_ne!(old, new);
        assert_eq!(l.failed_tries, 0);
        assert_eq!(p.counters().free_slots(), free);
        assert!(matches!(p.counter_read(&id(), old), Err(EnclaveError::UnknownUuid(_))));
        assert_eq!(p.counter_read(&id(), new).unwrap(), 0);
    }

    #[test]
    fn ledger_file_is_sealed_and_persistent() {
        let dir = tempfile::tempdir().unwrap();
        let p = platform();
        let path = dir.path().join("ledger/u.ledger");
        let mut g = RollbackGuard::software(p.clone(), id(), Some(path.clone())).unwrap();
        let mut l = LockoutRecord::default();
        record_auth_failure(&mut l, 0, &mut g).unwrap();
        let raw = fs::read(&path).unwrap();
        assert!(!raw.windows(4).any(|w| w == LEDGER_MAGIC));
        let g2 = RollbackGuard::software(p.clone(), id(), Some(path.clone())).unwrap();
        assert_eq!(g2.global_failed_tries(), Some(1));
        assert!(RollbackGuard::software(p, measure(b"code", b"other"), Some(path)).is_err());
    }

    #[test]
    fn mechanism_parses() {
        assert_eq!("counter".parse::<Mechanism>().unwrap(), Mechanism::Counter);
        assert!("hw".parse::<Mechanism>().is_err());
    }
}
