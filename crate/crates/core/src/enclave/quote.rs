// SPDX-License-Identifier: Apache-2.0

//! Attestation quotes.
//!
//! The group signature is simulated by an Ed25519 signature under a key held
//! by the platform's quoting service; the verification service holds the
//! public half. Layout (big-endian):
//!
//! ```text
//! magic     "VQOT"       4
//! version   u16 = 1      2
//! mrenclave [32]
//! mrsigner  [32]
//! user_data [64]
//! signature [64]         over every preceding byte
//! ```

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};

use super::identity::{EnclaveIdentity, Measurement};
use crate::codec::{CodecError, Reader, Writer};

pub const QUOTE_MAGIC: &[u8; 4] = b"VQOT";
pub const QUOTE_VERSION: u16 = 1;
pub const QUOTE_LEN: usize = 4 + 2 + 32 + 32 + 64 + 64;

#[derive(Clone, PartialEq, Eq)]
pub struct Quote {
    pub mrenclave: Measurement,
    pub mrsigner: Measurement,
    pub user_data: [u8; 64],
    pub signature: [u8; 64],
}

impl std::fmt::Debug for Quote {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Quote")
            .field("mrenclave", &hex::encode(&self.mrenclave[..8]))
            .field("mrsigner", &hex::encode(&self.mrsigner[..8]))
            .field("user_data", &hex::encode(&self.user_data[..8]))
            .finish_non_exhaustive()
    }
}

impl Quote {
    pub fn signed_body(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(QUOTE_LEN - 64);
        w.raw(QUOTE_MAGIC)
            .u16(QUOTE_VERSION)
            .raw(&self.mrenclave)
            .raw(&self.mrsigner)
            .raw(&self.user_data);
        w.into_vec()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.signed_body();
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        r.expect_magic(QUOTE_MAGIC)?;
        let version = r.u16()?;
        if version != QUOTE_VERSION {
            return Err(CodecError::Version(version));
        }
        let q = Quote {
            mrenclave: r.array()?,
            mrsigner: r.array()?,
            user_data: r.array()?,
            signature: r.array()?,
        };
        r.finish()?;
        Ok(q)
    }

    pub fn identity(&self) -> EnclaveIdentity {
        EnclaveIdentity {
            mrenclave: self.mrenclave,
            mrsigner: self.mrsigner,
        }
    }

    pub fn verify(&self, group_public: &VerifyingKey) -> bool {
        group_public
            .verify(&self.signed_body(), &Signature::from_bytes(&self.signature))
            .is_ok()
    }
}

pub fn quote(identity: &EnclaveIdentity, user_data: [u8; 64], group_key: &SigningKey) -> Quote {
    let mut q = Quote {
        mrenclave: identity.mrenclave,
        mrsigner: identity.mrsigner,
        user_data,
        signature: [0u8; 64],
    };
    q.signature = group_key.sign(&q.signed_body()).to_bytes();
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enclave::identity::measure;

    fn group() -> SigningKey {
        SigningKey::from_bytes(&[3u8; 32])
    }

    #[test]
    fn quote_verifies_under_group_public() {
        let q = quote(&measure(b"c", b"s"), [1u8; 64], &group());
        assert!(q.verify(&group().verifying_key()));
        let parsed = Quote::from_bytes(&q.to_bytes()).unwrap();
        assert_eq!(parsed, q);
        assert_eq!(q.to_bytes().len(), QUOTE_LEN);
    }

    #[test]
    fn altered_fields_fail() {
        let q = quote(&measure(b"c", b"s"), [1u8; 64], &group());
        let mut bad = q.clone();
        bad.mrenclave[0] ^= 1;
        assert!(!bad.verify(&group().verifying_key()));
        let mut bad = q.clone();
        bad.user_data[63] ^= 1;
        assert!(!bad.verify(&group().verifying_key()));
        let other = SigningKey::from_bytes(&[4u8; 32]);
        assert!(!q.verify(&other.verifying_key()));
    }
}
