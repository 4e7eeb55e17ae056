// SPDX-License-Identifier: Apache-2.0

//! Key derivation, private-part wrapping and the per-kind crypto operations.
//!
//! Primary keys are a pure function of (hierarchy seed, template digest):
//!
//! ```text
//! template = SHA256("template" || kind || bits_be16 || unique)
//! okm      = HKDF-SHA256(salt = "vtpm-sim/primary", ikm = seed, info = template)
//! ```
//!
//! AES keys use `okm` directly; RSA keys are generated from a ChaCha20 stream
//! seeded with `okm`. Object auth is deliberately not part of the template.
//!
//! Private parts at rest are `nonce || AES-256-GCM(ct || tag)` under the
//! parent's wrap key, with `kind || public` as associated data. The nonce is
//! an HMAC of the plaintext, so wrapping is deterministic.

use aes::Aes256;
use aes_gcm::aead::{Aead, Payload};
use aes_gcm::{Aes256Gcm, KeyInit};
use cbc::cipher::block_padding::Pkcs7;
use cbc::cipher::{BlockDecryptMut, BlockEncryptMut, KeyIvInit};
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rsa::pkcs1::{DecodeRsaPrivateKey, DecodeRsaPublicKey, EncodeRsaPrivateKey, EncodeRsaPublicKey};
use rsa::{Oaep, Pss, RsaPrivateKey, RsaPublicKey};
use sha2::{Digest as _, Sha256};

use super::state::{Digest, KeyKind};
use super::TpmError;

pub const RSA_BITS: [u16; 2] = [1024, 2048];
pub const AES_BITS: u16 = 256;
pub const MAX_UNIQUE_LEN: usize = 64;
pub const MAX_AUTH_LEN: usize = 32;
pub const MAX_SEAL_PAYLOAD: usize = 256;
pub const MAX_AES_DATA: usize = 4096;
pub const MAX_SIGN_MSG: usize = 4096;

type HmacSha256 = Hmac<Sha256>;

pub fn template_digest(kind: KeyKind, bits: u16, unique: &[u8]) -> Digest {
    let mut h = Sha256::new();
    h.update(b"template");
    h.update([kind.to_byte()]);
    h.update(bits.to_be_bytes());
    h.update(unique);
    h.finalize().into()
}

fn hkdf32(salt: &[u8], ikm: &[u8], info: &[u8]) -> [u8; 32] {
    let mut out = [0u8; 32];
    Hkdf::<Sha256>::new(Some(salt), ikm)
        .expand(info, &mut out)
        .expect("32 bytes is a valid HKDF length");
    out
}

fn hmac32(key: &[u8], parts: &[&[u8]]) -> [u8; 32] {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(key).expect("HMAC takes any key length");
    for p in parts {
        mac.update(p);
    }
    mac.finalize().into_bytes().into()
}

/// Wrap key for objects whose parent is a hierarchy.
pub fn hierarchy_wrap_key(seed: &[u8; 32]) -> [u8; 32] {
    hkdf32(b"vtpm-sim/storage", seed, b"wrap")
}

/// Wrap key for objects whose parent is an AES storage key.
pub fn storage_wrap_key(aes_key: &[u8]) -> [u8; 32] {
    hkdf32(b"vtpm-sim/storage", aes_key, b"wrap")
}

/// Private key material in the clear; only ever lives inside a handler.
pub enum Material {
    Rsa(Box<RsaPrivateKey>),
    Aes([u8; 32]),
    Sealed(Vec<u8>),
}

pub fn check_bits(kind: KeyKind, bits: u16) -> Result<(), TpmError> {
    let ok = match kind {
        KeyKind::RsaSigning | KeyKind::RsaDecryption => RSA_BITS.contains(&bits),
        KeyKind::AesSymmetric => bits == AES_BITS,
        KeyKind::SealedData => false,
    };
    if ok {
        Ok(())
    } else {
        Err(TpmError::Value)
    }
}

pub fn derive_primary(seed: &[u8; 32], kind: KeyKind, bits: u16, unique: &[u8]) -> Result<Material, TpmError> {
    check_bits(kind, bits)?;
    let okm = hkdf32(b"vtpm-sim/primary", seed, &template_digest(kind, bits, unique));
    Ok(match kind {
        KeyKind::AesSymmetric => Material::Aes(okm),
        KeyKind::RsaSigning | KeyKind::RsaDecryption => {
            let mut rng = ChaCha20Rng::from_seed(okm);
            let key = RsaPrivateKey::new(&mut rng, bits as usize).map_err(|_| TpmError::Failure)?;
            Material::Rsa(Box::new(key))
        }
        KeyKind::SealedData => return Err(TpmError::Value),
    })
}

impl Material {
    pub fn public_part(&self, wrap_key: &[u8; 32]) -> Vec<u8> {
        match self {
            Material::Rsa(k) => k
                .to_public_key()
                .to_pkcs1_der()
                .expect("RSA public key encodes")
                .as_bytes()
                .to_vec(),
            Material::Aes(k) => {
                let mut h = Sha256::new();
                h.update(b"aes-unique");
                h.update(k);
                h.finalize().to_vec()
            }
            Material::Sealed(p) => hmac32(wrap_key, &[b"sealed-unique", p]).to_vec(),
        }
    }

    pub fn private_bytes(&self) -> Vec<u8> {
        match self {
            Material::Rsa(k) => k.to_pkcs1_der().expect("RSA private key encodes").as_bytes().to_vec(),
            Material::Aes(k) => k.to_vec(),
            Material::Sealed(p) => p.clone(),
        }
    }

    pub fn from_private(kind: KeyKind, bytes: &[u8]) -> Result<Self, TpmError> {
        Ok(match kind {
            KeyKind::RsaSigning | KeyKind::RsaDecryption => Material::Rsa(Box::new(
                RsaPrivateKey::from_pkcs1_der(bytes).map_err(|_| TpmError::Failure)?,
            )),
            KeyKind::AesSymmetric => Material::Aes(bytes.try_into().map_err(|_| TpmError::Failure)?),
            KeyKind::SealedData => Material::Sealed(bytes.to_vec()),
        })
    }
}

fn aad(kind: KeyKind, public: &[u8]) -> Vec<u8> {
    let mut v = Vec::with_capacity(1 + public.len());
    v.push(kind.to_byte());
    v.extend_from_slice(public);
    v
}

pub fn wrap(wrap_key: &[u8; 32], kind: KeyKind, public: &[u8], plaintext: &[u8]) -> Vec<u8> {
    let nonce_full = hmac32(wrap_key, &[b"nonce", public, plaintext]);
    let nonce = &nonce_full[..12];
    let aad = aad(kind, public);
    let ct = Aes256Gcm::new(wrap_key.into())
        .encrypt(nonce.into(), Payload { msg: plaintext, aad: &aad })
        .expect("AES-GCM encryption of bounded input");
    let mut out = Vec::with_capacity(12 + ct.len());
    out.extend_from_slice(nonce);
    out.extend_from_slice(&ct);
    out
}

pub fn unwrap(wrap_key: &[u8; 32], kind: KeyKind, public: &[u8], blob: &[u8]) -> Result<Vec<u8>, TpmError> {
    if blob.len() < 12 + 16 {
        return Err(TpmError::Failure);
    }
    let (nonce, ct) = blob.split_at(12);
    let aad = aad(kind, public);
    Aes256Gcm::new(wrap_key.into())
        .decrypt(nonce.into(), Payload { msg: ct, aad: &aad })
        .map_err(|_| TpmError::Failure)
}

pub fn rsa_public(public_der: &[u8]) -> Result<RsaPublicKey, TpmError> {
    RsaPublicKey::from_pkcs1_der(public_der).map_err(|_| TpmError::Failure)
}

/// Largest OAEP-SHA256 plaintext for a modulus of `modulus_len` bytes.
pub fn oaep_limit(modulus_len: usize) -> usize {
    modulus_len.saturating_sub(2 * 32 + 2)
}

pub fn rsa_sign(key: &RsaPrivateKey, msg: &[u8], rng: &mut ChaCha20Rng) -> Result<Vec<u8>, TpmError> {
    let digest = Sha256::digest(msg);
    key.sign_with_rng(rng, Pss::new::<Sha256>(), &digest)
        .map_err(|_| TpmError::Failure)
}

pub fn rsa_verify(key: &RsaPublicKey, msg: &[u8], sig: &[u8]) -> bool {
    let digest = Sha256::digest(msg);
    key.verify(Pss::new::<Sha256>(), &digest, sig).is_ok()
}

pub fn rsa_encrypt(key: &RsaPublicKey, msg: &[u8], rng: &mut ChaCha20Rng) -> Result<Vec<u8>, TpmError> {
    use rsa::traits::PublicKeyParts;
    if msg.len() > oaep_limit(key.size()) {
        return Err(TpmError::PayloadTooLarge);
    }
    key.encrypt(rng, Oaep::new::<Sha256>(), msg)
        .map_err(|_| TpmError::Failure)
}

pub fn rsa_decrypt(key: &RsaPrivateKey, ct: &[u8], rng: &mut ChaCha20Rng) -> Result<Vec<u8>, TpmError> {
    key.decrypt_blinded(rng, Oaep::new::<Sha256>(), ct)
        .map_err(|_| TpmError::Value)
}

pub fn aes_cbc(key: &[u8; 32], iv: &[u8; 16], decrypt: bool, data: &[u8]) -> Result<Vec<u8>, TpmError> {
    if decrypt {
        cbc::Decryptor::<Aes256>::new(key.into(), iv.into())
            .decrypt_padded_vec_mut::<Pkcs7>(data)
            .map_err(|_| TpmError::Value)
    } else {
        Ok(cbc::Encryptor::<Aes256>::new(key.into(), iv.into()).encrypt_padded_vec_mut::<Pkcs7>(data))
    }
}
