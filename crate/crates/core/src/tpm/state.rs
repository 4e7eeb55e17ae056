// SPDX-License-Identifier: Apache-2.0

//! Persistent TPM state and its binary image.
//!
//! Layout (big-endian, `b16`/`b32` = u16/u32 length prefix + bytes):
//!
//! ```text
//! magic "VTPS", version u16 = 1
//! eps [32], sps [32], pps [32]
//! owner_auth b16, endorsement_auth b16, platform_auth b16
//! pcr_count u8 (= 16), pcr_count x [32]
//! failed_tries u32, max_tries u32, has_deadline u8, lockout_until u64, recovery_interval_ms u64
//! nv_count u32, nv_count x { index u32, data b32 }          ascending index
//! next_handle u32
//! key_count u32, key_count x { handle u32, key }            ascending handle
//! startup_counter u64
//!
//! key: kind u8, parent u32, public b32, private b32, auth b16,
//!      policy_count u8, policy_count x { pcr u8, digest [32] }
//! ```

use std::collections::BTreeMap;

use rand::RngCore;

use crate::codec::{CodecError, Reader, Writer};

pub const PCR_COUNT: usize = 16;
pub const DIGEST_LEN: usize = 32;
pub const DEFAULT_MAX_TRIES: u32 = 3;
pub const DEFAULT_RECOVERY_INTERVAL_MS: u64 = 10_000;
pub const FIRST_TRANSIENT_HANDLE: u32 = 0x8000_0000;

const STATE_MAGIC: &[u8; 4] = b"VTPS";
const STATE_VERSION: u16 = 1;

pub type Digest = [u8; DIGEST_LEN];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Hierarchy {
    Endorsement,
    Storage,
    Platform,
}

impl Hierarchy {
    pub const OWNER_HANDLE: u32 = 0x4000_0001;
    pub const ENDORSEMENT_HANDLE: u32 = 0x4000_000B;
    pub const PLATFORM_HANDLE: u32 = 0x4000_000C;

    pub fn handle(self) -> u32 {
        match self {
            Hierarchy::Storage => Self::OWNER_HANDLE,
            Hierarchy::Endorsement => Self::ENDORSEMENT_HANDLE,
            Hierarchy::Platform => Self::PLATFORM_HANDLE,
        }
    }

    pub fn from_handle(h: u32) -> Option<Self> {
        match h {
            Self::OWNER_HANDLE => Some(Hierarchy::Storage),
            Self::ENDORSEMENT_HANDLE => Some(Hierarchy::Endorsement),
            Self::PLATFORM_HANDLE => Some(Hierarchy::Platform),
            _ => None,
        }
    }

    fn slot(self) -> usize {
        match self {
            Hierarchy::Storage => 0,
            Hierarchy::Endorsement => 1,
            Hierarchy::Platform => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KeyKind {
    RsaSigning,
    RsaDecryption,
    AesSymmetric,
    SealedData,
}

impl KeyKind {
    pub fn to_byte(self) -> u8 {
        match self {
            KeyKind::RsaSigning => 1,
            KeyKind::RsaDecryption => 2,
            KeyKind::AesSymmetric => 3,
            KeyKind::SealedData => 4,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(KeyKind::RsaSigning),
            2 => Some(KeyKind::RsaDecryption),
            3 => Some(KeyKind::AesSymmetric),
            4 => Some(KeyKind::SealedData),
            _ => None,
        }
    }

    pub fn is_rsa(self) -> bool {
        matches!(self, KeyKind::RsaSigning | KeyKind::RsaDecryption)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LockoutRecord {
    pub failed_tries: u32,
    pub max_tries: u32,
    pub lockout_until: Option<u64>,
    pub recovery_interval_ms: u64,
}

impl Default for LockoutRecord {
    fn default() -> Self {
        LockoutRecord {
            failed_tries: 0,
            max_tries: DEFAULT_MAX_TRIES,
            lockout_until: None,
            recovery_interval_ms: DEFAULT_RECOVERY_INTERVAL_MS,
        }
    }
}

impl LockoutRecord {
    pub fn is_locked(&self) -> bool {
        self.lockout_until.is_some()
    }

    fn check(&self) -> Result<(), CodecError> {
        if self.max_tries == 0 || self.recovery_interval_ms == 0 {
            return Err(CodecError::Invalid("lockout parameters must be positive"));
        }
        if self.failed_tries > self.max_tries {
            return Err(CodecError::Invalid("failed_tries above max_tries"));
        }
        if self.lockout_until.is_some() != (self.failed_tries == self.max_tries) {
            return Err(CodecError::Invalid("lockout deadline inconsistent with failed_tries"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyObject {
    pub kind: KeyKind,
    pub public_part: Vec<u8>,
    /// Always ciphertext under the parent's storage key.
    pub private_part: Vec<u8>,
    pub parent: u32,
    pub auth_value: Vec<u8>,
    pub pcr_policy: Vec<(u8, Digest)>,
}

impl KeyObject {
    fn encode(&self, w: &mut Writer) {
        w.u8(self.kind.to_byte())
            .u32(self.parent)
            .b32(&self.public_part)
            .b32(&self.private_part)
            .b16(&self.auth_value)
            .u8(self.pcr_policy.len() as u8);
        for (idx, digest) in &self.pcr_policy {
            w.u8(*idx).raw(digest);
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let kind = KeyKind::from_byte(r.u8()?).ok_or(CodecError::Invalid("key kind"))?;
        let parent = r.u32()?;
        let public_part = r.b32()?.to_vec();
        let private_part = r.b32()?.to_vec();
        let auth_value = r.b16()?.to_vec();
        let n = r.u8()?;
        let mut pcr_policy = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let idx = r.u8()?;
            if idx as usize >= PCR_COUNT {
                return Err(CodecError::Invalid("policy PCR index"));
            }
            pcr_policy.push((idx, r.array()?));
        }
        Ok(KeyObject {
            kind,
            public_part,
            private_part,
            parent,
            auth_value,
            pcr_policy,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TpmState {
    pub eps: [u8; 32],
    pub sps: [u8; 32],
    pub pps: [u8; 32],
    hierarchy_auth: [Vec<u8>; 3],
    pub pcr_bank: [Digest; PCR_COUNT],
    pub lockout: LockoutRecord,
    pub nv_store: BTreeMap<u32, Vec<u8>>,
    pub loaded_keys: BTreeMap<u32, KeyObject>,
    pub next_handle: u32,
    pub startup_counter: u64,
}

impl TpmState {
    /// Fresh state with three distinct random seeds.
    pub fn new(rng: &mut dyn RngCore) -> Self {
        let mut seeds = [[0u8; 32]; 3];
        loop {
            for s in &mut seeds {
                rng.fill_bytes(s);
            }
            if seeds[0] != seeds[1] && seeds[1] != seeds[2] && seeds[0] != seeds[2] {
                break;
            }
        }
        Self::from_seeds(seeds[0], seeds[1], seeds[2])
    }

    pub fn from_seeds(eps: [u8; 32], sps: [u8; 32], pps: [u8; 32]) -> Self {
        TpmState {
            eps,
            sps,
            pps,
            hierarchy_auth: Default::default(),
            pcr_bank: [[0u8; DIGEST_LEN]; PCR_COUNT],
            lockout: LockoutRecord::default(),
            nv_store: BTreeMap::new(),
            loaded_keys: BTreeMap::new(),
            next_handle: FIRST_TRANSIENT_HANDLE,
            startup_counter: 0,
        }
    }

    pub fn seed(&self, h: Hierarchy) -> &[u8; 32] {
        match h {
            Hierarchy::Endorsement => &self.eps,
            Hierarchy::Storage => &self.sps,
            Hierarchy::Platform => &self.pps,
        }
    }

    pub fn hierarchy_auth(&self, h: Hierarchy) -> &[u8] {
        &self.hierarchy_auth[h.slot()]
    }

    pub fn set_hierarchy_auth(&mut self, h: Hierarchy, auth: Vec<u8>) {
        self.hierarchy_auth[h.slot()] = auth;
    }

    pub fn note_startup(&mut self) {
        self.startup_counter += 1;
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(1024);
        w.raw(STATE_MAGIC)
            .u16(STATE_VERSION)
            .raw(&self.eps)
            .raw(&self.sps)
            .raw(&self.pps);
        for auth in &self.hierarchy_auth {
            w.b16(auth);
        }
        w.u8(PCR_COUNT as u8);
        for pcr in &self.pcr_bank {
            w.raw(pcr);
        }
        let l = &self.lockout;
        w.u32(l.failed_tries)
            .u32(l.max_tries)
            .u8(l.lockout_until.is_some() as u8)
            .u64(l.lockout_until.unwrap_or(0))
            .u64(l.recovery_interval_ms);
        w.u32(self.nv_store.len() as u32);
        for (idx, data) in &self.nv_store {
            w.u32(*idx).b32(data);
        }
        w.u32(self.next_handle);
        w.u32(self.loaded_keys.len() as u32);
        for (handle, key) in &self.loaded_keys {
            w.u32(*handle);
            key.encode(&mut w);
        }
        w.u64(self.startup_counter);
        w.into_vec()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        r.expect_magic(STATE_MAGIC)?;
        let version = r.u16()?;
        if version != STATE_VERSION {
            return Err(CodecError::Version(version));
        }
        let eps = r.array()?;
        let sps = r.array()?;
        let pps = r.array()?;
        if eps == sps || sps == pps || eps == pps {
            return Err(CodecError::Invalid("hierarchy seeds must be distinct"));
        }
        let mut hierarchy_auth: [Vec<u8>; 3] = Default::default();
        for auth in &mut hierarchy_auth {
            *auth = r.b16()?.to_vec();
        }
        if r.u8()? as usize != PCR_COUNT {
            return Err(CodecError::Invalid("PCR bank must have 16 slots"));
        }
        let mut pcr_bank = [[0u8; DIGEST_LEN]; PCR_COUNT];
        for pcr in &mut pcr_bank {
            *pcr = r.array()?;
        }
        let failed_tries = r.u32()?;
        let max_tries = r.u32()?;
        let has_deadline = match r.u8()? {
            0 => false,
            1 => true,
            _ => return Err(CodecError::Invalid("lockout deadline flag")),
        };
        let deadline = r.u64()?;
        let lockout = LockoutRecord {
            failed_tries,
            max_tries,
            lockout_until: has_deadline.then_some(deadline),
            recovery_interval_ms: r.u64()?,
        };
        lockout.check()?;
        let mut nv_store = BTreeMap::new();
        for _ in 0..r.u32()? {
            let idx = r.u32()?;
            let data = r.b32()?.to_vec();
            if nv_store.insert(idx, data).is_some() {
                return Err(CodecError::Invalid("duplicate NV index"));
            }
        }
        let next_handle = r.u32()?;
        let mut loaded_keys = BTreeMap::new();
        for _ in 0..r.u32()? {
            let handle = r.u32()?;
            let key = KeyObject::decode(&mut r)?;
            if loaded_keys.insert(handle, key).is_some() {
                return Err(CodecError::Invalid("duplicate key handle"));
            }
        }
        let startup_counter = r.u64()?;
        r.finish()?;
        Ok(TpmState {
            eps,
            sps,
            pps,
            hierarchy_auth,
            pcr_bank,
            lockout,
            nv_store,
            loaded_keys,
            next_handle,
            startup_counter,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn fresh_state_shape() {
        let s = TpmState::new(&mut ChaCha20Rng::seed_from_u64(1));
        assert_eq!(s.pcr_bank.len(), 16);
        assert!(s.pcr_bank.iter().all(|p| p == &[0u8; 32]));
        assert_ne!(s.eps, s.sps);
        assert_ne!(s.sps, s.pps);
        assert_eq!(s.lockout, LockoutRecord::default());
        assert_eq!(s.lockout.max_tries, 3);
        assert_eq!(s.lockout.recovery_interval_ms, 10_000);
    }

    #[test]
    fn rejects_inconsistent_lockout() {
        let mut s = TpmState::new(&mut ChaCha20Rng::seed_from_u64(1));
        s.lockout.failed_tries = 3;
        assert!(TpmState::from_bytes(&s.to_bytes()).is_err());
        s.lockout.lockout_until = Some(5);
        assert!(TpmState::from_bytes(&s.to_bytes()).is_ok());
        s.lockout.failed_tries = 4;
        assert!(TpmState::from_bytes(&s.to_bytes()).is_err());
    }

    #[test]
    fn rejects_equal_seeds() {
        let s = TpmState::from_seeds([1; 32], [1; 32], [2; 32]);
        assert!(TpmState::from_bytes(&s.to_bytes()).is_err());
    }

    fn arb_key() -> impl Strategy<Value = KeyObject> {
        (
            1u8..=4,
            any::<u32>(),
            prop::collection::vec(any::<u8>(), 0..64),
            prop::collection::vec(any::<u8>(), 0..64),
            prop::collection::vec(any::<u8>(), 0..16),
            prop::collection::vec((0u8..16, any::<[u8; 32]>()), 0..3),
        )
            .prop_map(|(k, parent, public_part, private_part, auth_value, pcr_policy)| KeyObject {
                kind: KeyKind::from_byte(k).unwrap(),
                public_part,
                private_part,
                parent,
                auth_value,
                pcr_policy,
            })
    }

    proptest! {
        #[test]
        fn serialization_roundtrip(
            seed in any::<u64>(),
            pcrs in prop::collection::vec((0usize..16, any::<[u8; 32]>()), 0..8),
            failed in 0u32..3,
            nv in prop::collection::btree_map(any::<u32>(), prop::collection::vec(any::<u8>(), 0..40), 0..5),
            keys in prop::collection::btree_map(any::<u32>(), arb_key(), 0..4),
            auth in prop::collection::vec(any::<u8>(), 0..8),
            startups in any::<u64>(),
        ) {
            let mut s = TpmState::new(&mut ChaCha20Rng::seed_from_u64(seed));
            for (i, d) in pcrs { s.pcr_bank[i] = d; }
            s.lockout.failed_tries = failed;
            s.nv_store = nv;
            s.loaded_keys = keys;
            s.set_hierarchy_auth(Hierarchy::Endorsement, auth);
            s.startup_counter = startups;
            let bytes = s.to_bytes();
            prop_assert_eq!(TpmState::from_bytes(&bytes).unwrap(), s);
        }

        #[test]
        fn decoding_arbitrary_bytes_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..512)) {
            let _ = TpmState::from_bytes(&bytes);
        }
    }
}
