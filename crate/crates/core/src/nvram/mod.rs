// SPDX-License-Identifier: Apache-2.0

//! NVRAM image, its sealed on-disk form, and the binding between a user's
//! VM image and their enclave.
//!
//! NvramImage layout (big-endian):
//!
//! ```text
//! magic "VNVR", format_version u16 = 1
//! ledger_tag u8            0 none, 1 software ledger, 2 monotonic counter
//! counter_uuid [16]        only when ledger_tag = 2
//! tpm_state b32            serialized TpmState
//! ```
//!
//! On disk the image is wrapped in a `SealedBlob` under the signer policy,
//! or written as-is by the unprotected backend.

pub mod binding;
pub mod registry;

use thiserror::Error;

use crate::codec::{CodecError, Reader, Writer};
use crate::enclave::{CounterUuid, EnclaveError, EnclaveIdentity, Platform, SealPolicy, SealedBlob};
use crate::rollback::LedgerRef;

pub use binding::{provision, verify_boot_binding, BindingRecord, EnclaveFile, UserKey};
pub use registry::{remote_binding_check, BindingReport, ChannelKey, Registry, RegistryEntry, Verdict};

pub const NVRAM_MAGIC: &[u8; 4] = b"VNVR";
pub const NVRAM_VERSION: u16 = 1;

/// The only policy NVRAM is sealed under: any enclave signed by the same
/// user key can open it, no other enclave can.
pub const NVRAM_SEAL_POLICY: SealPolicy = SealPolicy::BySigner;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NvramError {
    #[error("NVRAM was sealed for a different signer")]
    PolicyMismatch,
    #[error("NVRAM file is corrupt: {0}")]
    Corrupt(String),
}

impl From<EnclaveError> for NvramError {
    fn from(e: EnclaveError) -> Self {
        match e {
            EnclaveError::PolicyMismatch => NvramError::PolicyMismatch,
            other => NvramError::Corrupt(other.to_string()),
        }
    }
}

impl From<CodecError> for NvramError {
    fn from(e: CodecError) -> Self {
        NvramError::Corrupt(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NvramImage {
    pub format_version: u16,
    pub tpm_state: Vec<u8>,
    pub rollback_ledger_ref: LedgerRef,
}

impl NvramImage {
    pub fn new(tpm_state: Vec<u8>, rollback_ledger_ref: LedgerRef) -> Self {
        NvramImage {
            format_version: NVRAM_VERSION,
            tpm_state,
            rollback_ledger_ref,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(self.tpm_state.len() + 32);
        w.raw(NVRAM_MAGIC).u16(self.format_version);
        match self.rollback_ledger_ref {
            LedgerRef::None => {
                w.u8(0);
            }
            LedgerRef::Software => {
                w.u8(1);
            }
            LedgerRef::Counter(u) => {
                w.u8(2).raw(&u.0);
            }
        }
        w.b32(&self.tpm_state);
        w.into_vec()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NvramError> {
        let mut r = Reader::new(bytes);
        r.expect_magic(NVRAM_MAGIC)?;
        let format_version = r.u16()?;
        if format_version != NVRAM_VERSION {
            return Err(CodecError::Version(format_version).into());
        }
        let rollback_ledger_ref = match r.u8()? {
            0 => LedgerRef::None,
            1 => LedgerRef::Software,
            2 => LedgerRef::Counter(CounterUuid(r.array()?)),
            _ => return Err(CodecError::Invalid("ledger tag").into()),
        };
        let tpm_state = r.b32()?.to_vec();
        r.finish()?;
        Ok(NvramImage {
            format_version,
            tpm_state,
            rollback_ledger_ref,
        })
    }
}

pub fn store_nvram(platform: &Platform, identity: &EnclaveIdentity, image: &NvramImage) -> SealedBlob {
    platform.seal(identity, NVRAM_SEAL_POLICY, &image.to_bytes())
}

pub fn load_nvram(platform: &Platform, identity: &EnclaveIdentity, blob: &SealedBlob) -> Result<NvramImage, NvramError> {
    if blob.policy != NVRAM_SEAL_POLICY {
        return Err(NvramError::Corrupt("NVRAM blob uses the wrong seal policy".into()));
    }
    let plain = platform.unseal(identity, blob)?;
    NvramImage::from_bytes(&plain)
}

/// Parses and unseals raw file bytes.
pub fn load_nvram_bytes(platform: &Platform, identity: &EnclaveIdentity, bytes: &[u8]) -> Result<NvramImage, NvramError> {
    load_nvram(platform, identity, &SealedBlob::from_bytes(bytes)?)
}
