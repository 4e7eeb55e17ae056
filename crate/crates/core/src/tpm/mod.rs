// SPDX-License-Identifier: Apache-2.0

//! TPM 2.0 command subset: wire codec, persistent state, key objects, PCRs,
//! NV indices and the dictionary-attack lockout.

pub mod dispatch;
pub mod keys;
pub mod lockout;
pub mod state;
pub mod wire;

use thiserror::Error;

pub use dispatch::{dispatch, Outcome, Tpm, TpmOptions};
pub use lockout::{lockout_tick, record_auth_failure, FailureLedger, LedgerFault, LocalLedger};
pub use state::{Digest, Hierarchy, KeyKind, KeyObject, LockoutRecord, TpmState, PCR_COUNT};
pub use wire::{build, cc, parse, Command, Response};

/// Response codes carried in the `code` field of a response.
pub mod rc {
    pub const SUCCESS: u32 = 0x000;
    pub const BAD_TAG: u32 = 0x01E;
    pub const VALUE: u32 = 0x084;
    pub const HIERARCHY: u32 = 0x085;
    pub const PAYLOAD_TOO_LARGE: u32 = 0x087;
    pub const HANDLE: u32 = 0x08B;
    pub const SIZE: u32 = 0x095;
    pub const TRUNCATED: u32 = 0x09A;
    pub const WRONG_KEY_KIND: u32 = 0x09C;
    pub const FAILURE: u32 = 0x101;
    pub const UNKNOWN_CODE: u32 = 0x143;
    pub const NV_SPACE: u32 = 0x14B;
    pub const BAD_INDEX: u32 = 0x184;
    pub const OBJECT_MEMORY: u32 = 0x902;
    pub const LOCKED_OUT: u32 = 0x921;
    pub const AUTH: u32 = 0x98E;
    pub const POLICY: u32 = 0x99D;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Error)]
pub enum TpmError {
    #[error("command tag not supported")]
    BadTag,
    #[error("command shorter than its header or size field")]
    Truncated,
    #[error("size field does not match the command length")]
    Size,
    #[error("unknown command code")]
    UnknownCode,
    #[error("dictionary-attack lockout in effect")]
    LockedOut,
    #[error("authorization failed")]
    Auth,
    #[error("PCR policy not satisfied")]
    Policy,
    #[error("PCR or NV index out of range or undefined")]
    BadIndex,
    #[error("handle does not name a loaded object")]
    Handle,
    #[error("object kind does not support this command")]
    WrongKeyKind,
    #[error("payload exceeds the limit for this command")]
    PayloadTooLarge,
    #[error("not a hierarchy handle")]
    Hierarchy,
    #[error("parameter value out of range")]
    Value,
    #[error("no room for another NV index")]
    NvSpace,
    #[error("no room for another loaded object")]
    ObjectMemory,
    #[error("internal failure")]
    Failure,
}

impl TpmError {
    pub fn code(self) -> u32 {
        match self {
            TpmError::BadTag => rc::BAD_TAG,
            TpmError::Truncated => rc::TRUNCATED,
            TpmError::Size => rc::SIZE,
            TpmError::UnknownCode => rc::UNKNOWN_CODE,
            TpmError::LockedOut => rc::LOCKED_OUT,
            TpmError::Auth => rc::AUTH,
            TpmError::Policy => rc::POLICY,
            TpmError::BadIndex => rc::BAD_INDEX,
            TpmError::Handle => rc::HANDLE,
            TpmError::WrongKeyKind => rc::WRONG_KEY_KIND,
            TpmError::PayloadTooLarge => rc::PAYLOAD_TOO_LARGE,
            TpmError::Hierarchy => rc::HIERARCHY,
            TpmError::Value => rc::VALUE,
            TpmError::NvSpace => rc::NV_SPACE,
            TpmError::ObjectMemory => rc::OBJECT_MEMORY,
            TpmError::Failure => rc::FAILURE,
        }
    }

    /// Maps a non-success response code back to an error; unrecognized
    /// codes collapse to `Failure`.
    pub fn from_code(code: u32) -> TpmError {
        const ALL: [TpmError; 16] = [
            TpmError::BadTag,
            TpmError::Truncated,
            TpmError::Size,
            TpmError::UnknownCode,
            TpmError::LockedOut,
            TpmError::Auth,
            TpmError::Policy,
            TpmError::BadIndex,
            TpmError::Handle,
            TpmError::WrongKeyKind,
            TpmError::PayloadTooLarge,
            TpmError::Hierarchy,
            TpmError::Value,
            TpmError::NvSpace,
            TpmError::ObjectMemory,
            TpmError::Failure,
        ];
        ALL.into_iter()
            .find(|e| e.code() == code)
            .unwrap_or(TpmError::Failure)
    }

    /// Short stable name used in CLI output and reports.
    pub fn name(self) -> &'static str {
        match self {
            TpmError::BadTag => "ERR_BAD_TAG",
            TpmError::Truncated => "ERR_TRUNCATED",
            TpmError::Size => "ERR_SIZE",
            TpmError::UnknownCode => "ERR_UNKNOWN_CODE",
            TpmError::LockedOut => "ERR_LOCKED_OUT",
            TpmError::Auth => "ERR_AUTH",
            TpmError::Policy => "ERR_POLICY",
            TpmError::BadIndex => "ERR_BAD_INDEX",
            TpmError::Handle => "ERR_HANDLE",
            TpmError::WrongKeyKind => "ERR_WRONG_KEY_KIND",
            TpmError::PayloadTooLarge => "ERR_PAYLOAD_TOO_LARGE",
            TpmError::Hierarchy => "ERR_HIERARCHY",
            TpmError::Value => "ERR_VALUE",
            TpmError::NvSpace => "ERR_NV_SPACE",
            TpmError::ObjectMemory => "ERR_OBJECT_MEMORY",
            TpmError::Failure => "ERR_FAILURE",
        }
    }
}

impl From<crate::codec::CodecError> for TpmError {
    fn from(e: crate::codec::CodecError) -> Self {
        use crate::codec::CodecError;
        match e {
            CodecError::Truncated { .. } => TpmError::Truncated,
            CodecError::Trailing(_) => TpmError::Size,
            CodecError::BadMagic | CodecError::Version(_) | CodecError::Invalid(_) => TpmError::Value,
        }
    }
}
