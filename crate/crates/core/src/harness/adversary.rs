// SPDX-License-Identifier: Apache-2.0

//! Attacker tooling. Everything here uses only what the threat model grants:
//! file contents, the public source (so the state format and key derivation
//! are known), and the ability to run modified code on the platform.

use ed25519_dalek::SigningKey;

use crate::attest::{report_data, AttestError, Certificate, Evidence, KeyRequest, Message, Transport};
use crate::enclave::quote::quote;
use crate::enclave::EnclaveIdentity;
use crate::instance::VTPM_CODE;
use crate::nvram::NvramImage;
use crate::tpm::state::KeyKind;
use crate::tpm::{Tpm, TpmOptions, TpmState};

/// Public half of a key the attacker wants certified.
pub const ATTACKER_KEY: &[u8] = b"attacker-controlled public key";

/// The vTPM code with a key-export backdoor appended.
pub fn patched_code() -> Vec<u8> {
    let mut code = VTPM_CODE.to_vec();
    code.extend_from_slice(b"\0debug: export all key material");
    code
}

/// Parses a stolen NVRAM file as a plain image and unwraps every sealed
/// object in it. A sealed file yields nothing: the wrapping key never
/// leaves the platform.
pub fn recover_plaintexts(nvram: &[u8]) -> Vec<Vec<u8>> {
    let Ok(image) = NvramImage::from_bytes(nvram) else {
        return Vec::new();
    };
    let Ok(state) = TpmState::from_bytes(&image.tpm_state) else {
        return Vec::new();
    };
    let handles: Vec<u32> = state
        .loaded_keys
        .iter()
        .filter(|(_, k)| k.kind == KeyKind::SealedData)
        .map(|(h, _)| *h)
        .collect();
    // the attacker runs a debug build of the same open code over the state
    let tpm = Tpm::new(state, [0; 32], TpmOptions { test_mode: true });
    handles
        .into_iter()
        .filter_map(|h| tpm.export_key_material(h).ok())
        .collect()
}

/// Asks for an EK certificate for `identity` with a quote signed by a key
/// the attacker made up, since the platform group key is out of reach.
pub fn forged_certificate_request(
    transport: &mut dyn Transport,
    identity: &EnclaveIdentity,
    key_pub: &[u8],
) -> Result<Certificate, AttestError> {
    let req = match transport.round_trip(&Message::Hello(KeyRequest::Ek))? {
        Message::Challenge(req) => req,
        other => return Err(AttestError::Protocol(format!("unexpected message type {}", other.type_byte()))),
    };
    let fake_group = SigningKey::from_bytes(&[0x66; 32]);
    let ev = Evidence {
        request: req,
        quote: quote(identity, report_data(key_pub, &req.challenge_nonce), &fake_group),
        key_pub: key_pub.to_vec(),
        ek_cert: None,
    };
    match transport.round_trip(&Message::Evidence(Box::new(ev)))? {
        Message::Certificate(c) => Ok(c),
        Message::Rejection(r) => Err(AttestError::Rejected(r)),
        other => Err(AttestError::Protocol(format!("unexpected message type {}", other.type_byte()))),
    }
}
