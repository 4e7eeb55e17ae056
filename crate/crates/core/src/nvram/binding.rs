// SPDX-License-Identifier: Apache-2.0

//! User-key provisioning: the user signs both their enclave file and their
//! VM image with one Ed25519 key, so the launcher can check that the two
//! belong together before any NVRAM is opened.
//!
//! ```text
//! EnclaveFile   "VENC" | version u16 = 1 | signer_pub [32] | signature [64] | code b32
//!               signature over "vtpm-sim/enclave" || SHA256(code)
//! BindingRecord "VBND" | version u16 = 1 | vm_image_digest [32] | enclave_mrsigner [32]
//!               | vm_image_signature [64]
//!               signature over "vtpm-sim/vm-image" || vm_image_digest
//! ```

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};

use crate::codec::{CodecError, Reader, Writer};
use crate::enclave::{measure, EnclaveIdentity, Measurement};

const ENCLAVE_MAGIC: &[u8; 4] = b"VENC";
const BINDING_MAGIC: &[u8; 4] = b"VBND";
const VERSION: u16 = 1;
const ENCLAVE_DOMAIN: &[u8] = b"vtpm-sim/enclave";
const VM_DOMAIN: &[u8] = b"vtpm-sim/vm-image";

#[derive(Clone)]
pub struct UserKey(SigningKey);

impl std::fmt::Debug for UserKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "UserKey({})", hex::encode(&self.public()[..8]))
    }
}

impl UserKey {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        UserKey(SigningKey::generate(rng))
    }

    pub fn from_bytes(secret: &[u8; 32]) -> Self {
        UserKey(SigningKey::from_bytes(secret))
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.to_bytes()
    }

    pub fn public(&self) -> [u8; 32] {
        self.0.verifying_key().to_bytes()
    }

    fn sign(&self, domain: &[u8], digest: &[u8; 32]) -> [u8; 64] {
        let mut msg = domain.to_vec();
        msg.extend_from_slice(digest);
        self.0.sign(&msg).to_bytes()
    }
}

fn verify(public: &[u8; 32], domain: &[u8], digest: &[u8; 32], sig: &[u8; 64]) -> bool {
    let Ok(vk) = VerifyingKey::from_bytes(public) else {
        return false;
    };
    let mut msg = domain.to_vec();
    msg.extend_from_slice(digest);
    vk.verify(&msg, &Signature::from_bytes(sig)).is_ok()
}

/// A signed enclave image as the loader sees it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnclaveFile {
    pub signer_pub: [u8; 32],
    pub signature: [u8; 64],
    pub code: Vec<u8>,
}

impl EnclaveFile {
    pub fn sign(code: &[u8], key: &UserKey) -> Self {
        EnclaveFile {
            signer_pub: key.public(),
            signature: key.sign(ENCLAVE_DOMAIN, &Sha256::digest(code).into()),
            code: code.to_vec(),
        }
    }

    /// The loader refuses enclaves whose signature does not verify.
    pub fn verify(&self) -> bool {
        verify(&self.signer_pub, ENCLAVE_DOMAIN, &Sha256::digest(&self.code).into(), &self.signature)
    }

    pub fn identity(&self) -> EnclaveIdentity {
        measure(&self.code, &self.signer_pub)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(self.code.len() + 110);
        w.raw(ENCLAVE_MAGIC)
            .u16(VERSION)
            .raw(&self.signer_pub)
            .raw(&self.signature)
            .b32(&self.code);
        w.into_vec()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        r.expect_magic(ENCLAVE_MAGIC)?;
        let v = r.u16()?;
        if v != VERSION {
            return Err(CodecError::Version(v));
        }
        let f = EnclaveFile {
            signer_pub: r.array()?,
            signature: r.array()?,
            code: r.b32()?.to_vec(),
        };
        r.finish()?;
        Ok(f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BindingRecord {
    pub vm_image_digest: [u8; 32],
    pub enclave_mrsigner: Measurement,
    pub vm_image_signature: [u8; 64],
}

impl BindingRecord {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(134);
        w.raw(BINDING_MAGIC)
            .u16(VERSION)
            .raw(&self.vm_image_digest)
            .raw(&self.enclave_mrsigner)
            .raw(&self.vm_image_signature);
        w.into_vec()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        r.expect_magic(BINDING_MAGIC)?;
        let v = r.u16()?;
        if v != VERSION {
            return Err(CodecError::Version(v));
        }
        let b = BindingRecord {
            vm_image_digest: r.array()?,
            enclave_mrsigner: r.array()?,
            vm_image_signature: r.array()?,
        };
        r.finish()?;
        Ok(b)
    }
}

#[derive(Debug, Clone)]
pub struct Provisioned {
    pub record: BindingRecord,
    pub enclave: EnclaveFile,
    pub identity: EnclaveIdentity,
}

pub fn vm_digest(vm_image: &[u8]) -> [u8; 32] {
    Sha256::digest(vm_image).into()
}

pub fn provision(user: &UserKey, vm_image: &[u8], vtpm_code_blob: &[u8]) -> Provisioned {
    let enclave = EnclaveFile::sign(vtpm_code_blob, user);
    let identity = enclave.identity();
    let digest = vm_digest(vm_image);
    let record = BindingRecord {
        vm_image_digest: digest,
        enclave_mrsigner: identity.mrsigner,
        vm_image_signature: user.sign(VM_DOMAIN, &digest),
    };
    Provisioned {
        record,
        enclave,
        identity,
    }
}

/// `true` iff the image hashes to the recorded digest, the record names the
/// signer of `user_pub`, and the signature verifies under `user_pub`.
pub fn verify_boot_binding(vm_image: &[u8], record: &BindingRecord, user_pub: &[u8; 32]) -> bool {
    let digest = vm_digest(vm_image);
    let signer: [u8; 32] = Sha256::digest(user_pub).into();
    digest == record.vm_image_digest
        && signer == record.enclave_mrsigner
        && verify(user_pub, VM_DOMAIN, &digest, &record.vm_image_signature)
}
