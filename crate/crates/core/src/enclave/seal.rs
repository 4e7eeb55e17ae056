// SPDX-License-Identifier: Apache-2.0

//! Policy-keyed AEAD sealing.
//!
//! Container layout (big-endian):
//!
//! ```text
//! magic    "VSBL"           4
//! version  u16 = 1          2
//! policy   u8               1   0 = by-enclave, 1 = by-signer
//! key_id   [u8; 32]         32
//! nonce    [u8; 12]         12
//! ct_len   u32              4
//! ct       [u8; ct_len]
//! tag      [u8; 16]         16
//! ```
//!
//! Everything before `ct` is authenticated as associated data.

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use hkdf::Hkdf;
use rand::RngCore;
use sha2::Sha256;

use super::identity::{EnclaveIdentity, Measurement};
use super::EnclaveError;
use crate::codec::{Reader, Writer};

pub const SEALED_BLOB_MAGIC: &[u8; 4] = b"VSBL";
pub const SEALED_BLOB_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 1 + 32 + 12 + 4;
const TAG_LEN: usize = 16;
const SEAL_SALT: &[u8] = b"vtpm-sim/seal/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SealPolicy {
    ByEnclave,
    BySigner,
}

impl SealPolicy {
    pub fn to_byte(self) -> u8 {
        match self {
            SealPolicy::ByEnclave => 0,
            SealPolicy::BySigner => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(SealPolicy::ByEnclave),
            1 => Some(SealPolicy::BySigner),
            _ => None,
        }
    }

    /// The identity register this policy derives from.
    pub fn register(self, identity: &EnclaveIdentity) -> Measurement {
        match self {
            SealPolicy::ByEnclave => identity.mrenclave,
            SealPolicy::BySigner => identity.mrsigner,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedBlob {
    pub version: u16,
    pub policy: SealPolicy,
    pub key_id: Measurement,
    pub nonce: [u8; 12],
    pub ciphertext: Vec<u8>,
    pub tag: [u8; 16],
}

impl SealedBlob {
    fn header(&self) -> Writer {
        let mut w = Writer::with_capacity(HEADER_LEN + self.ciphertext.len() + TAG_LEN);
        w.raw(SEALED_BLOB_MAGIC)
            .u16(self.version)
            .u8(self.policy.to_byte())
            .raw(&self.key_id)
            .raw(&self.nonce)
            .u32(self.ciphertext.len() as u32);
        w
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = self.header();
        w.raw(&self.ciphertext).raw(&self.tag);
        w.into_vec()
    }

    /// Any structural problem is reported as [`EnclaveError::Corrupt`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EnclaveError> {
        let parse = || -> Result<Self, crate::codec::CodecError> {
            let mut r = Reader::new(bytes);
            r.expect_magic(SEALED_BLOB_MAGIC)?;
            let version = r.u16()?;
            if version != SEALED_BLOB_VERSION {
                return Err(crate::codec::CodecError::Version(version));
            }
            let policy = SealPolicy::from_byte(r.u8()?)
                .ok_or(crate::codec::CodecError::Invalid("seal policy"))?;
            let key_id = r.array()?;
            let nonce = r.array()?;
            let ciphertext = r.b32()?.to_vec();
            let tag = r.array()?;
            r.finish()?;
            Ok(SealedBlob {
                version,
                policy,
                key_id,
                nonce,
                ciphertext,
                tag,
            })
        };
        parse().map_err(|e| EnclaveError::Corrupt(e.to_string()))
    }
}

fn sealing_key(platform_secret: &[u8; 32], policy: SealPolicy, key_id: &Measurement) -> [u8; 32] {
    let hk = Hkdf::<Sha256>::new(Some(SEAL_SALT), platform_secret);
    let mut info = [0u8; 33];
    info[0] = policy.to_byte();
    info[1..].copy_from_slice(key_id);
    let mut key = [0u8; 32];
    hk.expand(&info, &mut key).expect("32 bytes is a valid HKDF length");
    key
}

pub fn seal(
    platform_secret: &[u8; 32],
    identity: &EnclaveIdentity,
    policy: SealPolicy,
    plaintext: &[u8],
    rng: &mut dyn RngCore,
) -> SealedBlob {
    let key_id = policy.register(identity);
    let mut nonce = [0u8; 12];
    rng.fill_bytes(&mut nonce);
    let mut blob = SealedBlob {
        version: SEALED_BLOB_VERSION,
        policy,
        key_id,
        nonce,
        ciphertext: Vec::new(),
        tag: [0u8; 16],
    };
    // ct_len is part of the AAD, so fix it before encrypting.
    blob.ciphertext = vec![0u8; plaintext.len()];
    let aad = blob.header();
    let cipher = Aes256Gcm::new(&sealing_key(platform_secret, policy, &key_id).into());
    let mut out = cipher
        .encrypt(
            Nonce::from_slice(&nonce),
            Payload {
                msg: plaintext,
                aad: aad.as_slice(),
            },
        )
        .expect("AES-GCM encryption does not fail for in-memory buffers");
    let tag = out.split_off(plaintext.len());
    blob.ciphertext = out;
    blob.tag.copy_from_slice(&tag);
    blob
}

pub fn unseal(
    platform_secret: &[u8; 32],
    identity: &EnclaveIdentity,
    blob: &SealedBlob,
) -> Result<Vec<u8>, EnclaveError> {
    if blob.policy.register(identity) != blob.key_id {
        return Err(EnclaveError::PolicyMismatch);
    }
    let aad = blob.header();
    let cipher = Aes256Gcm::new(&sealing_key(platform_secret, blob.policy, &blob.key_id).into());
    let mut msg = Vec::with_capacity(blob.ciphertext.len() + TAG_LEN);
    msg.extend_from_slice(&blob.ciphertext);
    msg.extend_from_slice(&blob.tag);
    cipher
        .decrypt(
            Nonce::from_slice(&blob.nonce),
            Payload {
                msg: &msg,
                aad: aad.as_slice(),
            },
        )
        .map_err(|_| EnclaveError::Corrupt("authentication tag mismatch".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enclave::identity::measure;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const SECRET: [u8; 32] = [7u8; 32];

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(1)
    }

    #[test]
    fn roundtrip_same_identity() {
        let id = measure(b"code", b"alice");
        let blob = seal(&SECRET, &id, SealPolicy::BySigner, b"nvram", &mut rng());
        let parsed = SealedBlob::from_bytes(&blob.to_bytes()).unwrap();
        assert_eq!(unseal(&SECRET, &id, &parsed).unwrap(), b"nvram");
    }

    #[test]
    fn other_signer_is_policy_mismatch() {
        let alice = measure(b"code", b"alice");
        let mallory = measure(b"code", b"mallory");
        let blob = seal(&SECRET, &alice, SealPolicy::BySigner, b"nvram", &mut rng());
        assert_eq!(unseal(&SECRET, &mallory, &blob), Err(EnclaveError::PolicyMismatch));
    }

    #[test]
    fn by_signer_survives_code_update() {
        let v1 = measure(b"code v1", b"alice");
        let v2 = measure(b"code v2", b"alice");
        let blob = seal(&SECRET, &v1, SealPolicy::BySigner, b"x", &mut rng());
        assert_eq!(unseal(&SECRET, &v2, &blob).unwrap(), b"x");
        let blob = seal(&SECRET, &v1, SealPolicy::ByEnclave, b"x", &mut rng());
        assert_eq!(unseal(&SECRET, &v2, &blob), Err(EnclaveError::PolicyMismatch));
    }

    #[test]
    fn flipped_ciphertext_byte_is_corrupt() {
        let id = measure(b"code", b"alice");
        let mut blob = seal(&SECRET, &id, SealPolicy::BySigner, b"nvram", &mut rng());
        blob.ciphertext[0] ^= 1;
        assert!(matches!(unseal(&SECRET, &id, &blob), Err(EnclaveError::Corrupt(_))));
    }

    #[test]
    fn every_byte_of_the_container_is_authenticated() {
        let id = measure(b"code", b"alice");
        let bytes = seal(&SECRET, &id, SealPolicy::BySigner, b"payload", &mut rng()).to_bytes();
        for i in 0..bytes.len() {
            let mut tampered = bytes.clone();
            tampered[i] ^= 0x40;
            let result = SealedBlob::from_bytes(&tampered).and_then(|b| unseal(&SECRET, &id, &b));
            assert!(result.is_err(), "flip at byte {i} went unnoticed");
        }
    }

    #[test]
    fn truncated_container_is_corrupt() {
        let id = measure(b"code", b"alice");
        let bytes = seal(&SECRET, &id, SealPolicy::BySigner, b"payload", &mut rng()).to_bytes();
        for n in 0..bytes.len() {
            assert!(matches!(
                SealedBlob::from_bytes(&bytes[..n]),
                Err(EnclaveError::Corrupt(_))
            ));
        }
    }

    #[test]
    fn distinct_registers_are_mutually_undecryptable() {
        // Four identities with pairwise-distinct signer registers; forcing the
        // key_id to the victim's register must still fail authentication.
        let ids: Vec<_> = (0..4u8)
            .map(|i| measure(&[i; 8], &[i + 100; 8]))
            .collect();
        for (i, owner) in ids.iter().enumerate() {
            for policy in [SealPolicy::BySigner, SealPolicy::ByEnclave] {
                let blob = seal(&SECRET, owner, policy, b"secret", &mut rng());
                for (j, other) in ids.iter().enumerate() {
                    let got = unseal(&SECRET, other, &blob);
                    if i == j {
                        assert_eq!(got.unwrap(), b"secret");
                    } else {
                        assert_eq!(got, Err(EnclaveError::PolicyMismatch));
                        let mut forged = blob.clone();
                        forged.key_id = policy.register(other);
                        assert!(unseal(&SECRET, other, &forged).is_err());
                    }
                }
            }
        }
    }

    #[test]
    fn other_platform_secret_cannot_unseal() {
        let id = measure(b"code", b"alice");
        let blob = seal(&SECRET, &id, SealPolicy::BySigner, b"x", &mut rng());
        assert!(matches!(unseal(&[8u8; 32], &id, &blob), Err(EnclaveError::Corrupt(_))));
    }
}
