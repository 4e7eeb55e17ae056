// SPDX-License-Identifier: Apache-2.0

use sha2::{Digest, Sha256};
use std::fmt;

pub type Measurement = [u8; 32];

/// Simulated MRENCLAVE / MRSIGNER pair.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct EnclaveIdentity {
    pub mrenclave: Measurement,
    pub mrsigner: Measurement,
}

impl fmt::Debug for EnclaveIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EnclaveIdentity")
            .field("mrenclave", &hex::encode(&self.mrenclave[..8]))
            .field("mrsigner", &hex::encode(&self.mrsigner[..8]))
            .finish()
    }
}

/// `mrenclave = SHA256(code_blob)`, `mrsigner = SHA256(signer_key_pub)`.
pub fn measure(code_blob: &[u8], signer_key_pub: &[u8]) -> EnclaveIdentity {
    EnclaveIdentity {
        mrenclave: Sha256::digest(code_blob).into(),
        mrsigner: Sha256::digest(signer_key_pub).into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn measure_is_pure() {
        assert_eq!(measure(b"code", b"key"), measure(b"code", b"key"));
    }

    #[test]
    fn blob_bit_flip_changes_only_mrenclave() {
        let a = measure(b"vtpm code v1", b"signer");
        let b = measure(b"vtpm code v0", b"signer");
        assert_ne!(a.mrenclave, b.mrenclave);
        assert_eq!(a.mrsigner, b.mrsigner);
    }

    #[test]
    fn matches_standalone_sha256() {
        // sha256("abc") from FIPS 180-2 appendix B.1
        let id = measure(b"abc", b"");
        assert_eq!(
            hex::encode(id.mrenclave),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(
            hex::encode(id.mrsigner),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
