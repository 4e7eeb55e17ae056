// SPDX-License-Identifier: Apache-2.0

//! Platform monotonic counters.
//!
//! The table lives outside any vTPM instance directory and is shared by all
//! enclaves on the platform. When file-backed, every operation takes an
//! exclusive lock on `<store>.lock`, re-reads the store, applies the change and
//! atomically replaces the file, so separate processes observe one history.
//!
//! Store layout (big-endian):
//!
//! ```text
//! magic   "VCTR"     4
//! version u16 = 1    2
//! count   u32        4
//! count x { uuid [16], value u64, policy u8, owner_digest [32] }
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use super::identity::EnclaveIdentity;
use super::EnclaveError;
use crate::codec::{CodecError, Reader, Writer};

/// Platform-wide limit on live counters.
pub const MAX_COUNTERS: usize = 256;

const STORE_MAGIC: &[u8; 4] = b"VCTR";
const STORE_VERSION: u16 = 1;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CounterUuid(pub [u8; 16]);

impl fmt::Display for CounterUuid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for CounterUuid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CounterUuid({self})")
    }
}

/// Which enclaves may operate on a counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CounterAccess {
    SameSigner,
    SameEnclave,
    SameEnclaveAndSigner,
}

impl CounterAccess {
    pub fn to_byte(self) -> u8 {
        match self {
            CounterAccess::SameSigner => 0,
            CounterAccess::SameEnclave => 1,
            CounterAccess::SameEnclaveAndSigner => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(CounterAccess::SameSigner),
            1 => Some(CounterAccess::SameEnclave),
            2 => Some(CounterAccess::SameEnclaveAndSigner),
            _ => None,
        }
    }

    /// Digest of the identity registers this policy pins.
    pub fn owner_digest(self, identity: &EnclaveIdentity) -> [u8; 32] {
        let zero = [0u8; 32];
        let (enclave, signer) = match self {
            CounterAccess::SameSigner => (&zero, &identity.mrsigner),
            CounterAccess::SameEnclave => (&identity.mrenclave, &zero),
            CounterAccess::SameEnclaveAndSigner => (&identity.mrenclave, &identity.mrsigner),
        };
        let mut h = Sha256::new();
        h.update([self.to_byte()]);
        h.update(enclave);
        h.update(signer);
        h.finalize().into()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct CounterRecord {
    value: u64,
    access: CounterAccess,
    owner_digest: [u8; 32],
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
struct CounterTable {
    counters: BTreeMap<CounterUuid, CounterRecord>,
}

impl CounterTable {
    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(10 + self.counters.len() * 57);
        w.raw(STORE_MAGIC)
            .u16(STORE_VERSION)
            .u32(self.counters.len() as u32);
        for (uuid, rec) in &self.counters {
            w.raw(&uuid.0)
                .u64(rec.value)
                .u8(rec.access.to_byte())
                .raw(&rec.owner_digest);
        }
        w.into_vec()
    }

    fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        r.expect_magic(STORE_MAGIC)?;
        let version = r.u16()?;
        if version != STORE_VERSION {
            return Err(CodecError::Version(version));
        }
        let count = r.u32()? as usize;
        if count > MAX_COUNTERS {
            return Err(CodecError::Invalid("counter count above platform limit"));
        }
        let mut counters = BTreeMap::new();
        for _ in 0..count {
            let uuid = CounterUuid(r.array()?);
            let value = r.u64()?;
            let access = CounterAccess::from_byte(r.u8()?)
                .ok_or(CodecError::Invalid("counter access policy"))?;
            let owner_digest = r.array()?;
            counters.insert(
                uuid,
                CounterRecord {
                    value,
                    access,
                    owner_digest,
                },
            );
        }
        r.finish()?;
        Ok(CounterTable { counters })
    }

    fn authorized(
        &mut self,
        identity: &EnclaveIdentity,
        uuid: CounterUuid,
    ) -> Result<&mut CounterRecord, EnclaveError> {
        let rec = self
            .counters
            .get_mut(&uuid)
            .ok_or(EnclaveError::UnknownUuid(uuid))?;
        if rec.access.owner_digest(identity) != rec.owner_digest {
            return Err(EnclaveError::Access);
        }
        Ok(rec)
    }
}

pub struct CounterService {
    table: Mutex<CounterTable>,
    path: Option<PathBuf>,
}

impl fmt::Debug for CounterService {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CounterService")
            .field("path", &self.path)
            .field("live", &self.live())
            .finish()
    }
}

impl CounterService {
    pub fn in_memory() -> Self {
        CounterService {
            table: Mutex::new(CounterTable::default()),
            path: None,
        }
    }

    /// Opens (or creates) a file-backed store.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, EnclaveError> {
        let svc = CounterService {
            table: Mutex::new(CounterTable::default()),
            path: Some(path.as_ref().to_path_buf()),
        };
        svc.transact(|_| Ok(()))?;
        Ok(svc)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn lock_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".lock");
        PathBuf::from(p)
    }

    /// Runs `f` against the authoritative table. Changes are persisted only
    /// when `f` succeeds.
    fn transact<T>(
        &self,
        f: impl FnOnce(&mut CounterTable) -> Result<T, EnclaveError>,
    ) -> Result<T, EnclaveError> {
        let mut table = self.table.lock().expect("counter table poisoned");
        let Some(path) = &self.path else {
            let mut scratch = table.clone();
            let out = f(&mut scratch)?;
            *table = scratch;
            return Ok(out);
        };
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(Self::lock_path(path))?;
        lock.lock()?;
        let mut current = match fs::read(path) {
            Ok(bytes) => CounterTable::decode(&bytes)
                .map_err(|e| EnclaveError::Corrupt(format!("counter store: {e}")))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => CounterTable::default(),
            Err(e) => return Err(e.into()),
        };
        let before = current.clone();
        let out = f(&mut current)?;
        if current != before || !path.exists() {
            let tmp = path.with_extension("tmp");
            fs::write(&tmp, current.encode())?;
            File::open(&tmp)?.sync_all()?;
            fs::rename(&tmp, path)?;
        }
        *table = current;
        drop(lock);
        Ok(out)
    }

    pub fn create(
        &self,
        identity: &EnclaveIdentity,
        access: CounterAccess,
        uuid: CounterUuid,
    ) -> Result<CounterUuid, EnclaveError> {
        self.transact(|t| {
            if t.counters.len() >= MAX_COUNTERS {
                return Err(EnclaveError::NoCounters);
            }
            if t.counters.contains_key(&uuid) {
                return Err(EnclaveError::Corrupt("duplicate counter uuid".into()));
            }
            t.counters.insert(
                uuid,
                CounterRecord {
                    value: 0,
                    access,
                    owner_digest: access.owner_digest(identity),
                },
            );
            Ok(uuid)
        })
    }

    pub fn increment(
        &self,
        identity: &EnclaveIdentity,
        uuid: CounterUuid,
    ) -> Result<u64, EnclaveError> {
        self.transact(|t| {
            let rec = t.authorized(identity, uuid)?;
            rec.value = rec
                .value
                .checked_add(1)
                .ok_or(EnclaveError::Corrupt("counter overflow".into()))?;
            Ok(rec.value)
        })
    }

    pub fn read(&self, identity: &EnclaveIdentity, uuid: CounterUuid) -> Result<u64, EnclaveError> {
        self.transact(|t| Ok(t.authorized(identity, uuid)?.value))
    }

    pub fn destroy(&self, identity: &EnclaveIdentity, uuid: CounterUuid) -> Result<(), EnclaveError> {
        self.transact(|t| {
            t.authorized(identity, uuid)?;
            t.counters.remove(&uuid);
            Ok(())
        })
    }

    pub fn live(&self) -> usize {
        self.table.lock().expect("counter table poisoned").counters.len()
    }

    pub fn free_slots(&self) -> usize {
        MAX_COUNTERS - self.live()
    }
}
