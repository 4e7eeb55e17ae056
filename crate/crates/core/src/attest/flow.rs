// SPDX-License-Identifier: Apache-2.0

//! Client side of trust establishment: Hello, Challenge, Evidence, then
//! Certificate or Rejection.

use thiserror::Error;

use super::messages::{AttestationRequest, Certificate, Evidence, KeyRequest, Message, Rejection};
use super::transport::Transport;
use super::{enclave_report, quote_report};
use crate::enclave::{EnclaveIdentity, Platform};
use crate::instance::VtpmInstance;
use crate::tpm::state::{Hierarchy, KeyKind};
use crate::tpm::wire::{build, parse};
use crate::tpm::TpmError;

/// Unique field of the EK and AIK templates. Both are primaries under the
/// endorsement hierarchy, so they are stable for a given instance.
pub const EK_UNIQUE: &[u8] = b"vtpm-sim EK";
pub const AIK_UNIQUE: &[u8] = b"vtpm-sim AIK";

#[derive(Debug, Error)]
pub enum AttestError {
    #[error("PCA rejected the evidence: {0}")]
    Rejected(Rejection),
    #[error("TPM error creating key: {0}")]
    Tpm(TpmError),
    #[error("transport: {0}")]
    Transport(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
}

impl From<std::io::Error> for AttestError {
    fn from(e: std::io::Error) -> Self {
        AttestError::Transport(e.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct AttestOptions {
    pub key_bits: u16,
    pub endorsement_auth: Vec<u8>,
}

impl Default for AttestOptions {
    fn default() -> Self {
        AttestOptions {
            key_bits: 2048,
            endorsement_auth: Vec::new(),
        }
    }
}

/// One certificate round: works for any identity the platform will quote,
/// including enclaves that are not on the PCA's allowlist.
pub fn request_certificate(
    platform: &Platform,
    identity: &EnclaveIdentity,
    key_pub: &[u8],
    kind: KeyRequest,
    ek_cert: Option<&Certificate>,
    transport: &mut dyn Transport,
) -> Result<Certificate, AttestError> {
    let req = match transport.round_trip(&Message::Hello(kind))? {
        Message::Challenge(req) if req.requested_key == kind => req,
        other => return Err(AttestError::Protocol(format!("expected challenge, got type {}", other.type_byte()))),
    };
    submit(platform, identity, key_pub, &req, ek_cert, transport)
}

/// Sends evidence for an already received challenge.
pub fn submit(
    platform: &Platform,
    identity: &EnclaveIdentity,
    key_pub: &[u8],
    req: &AttestationRequest,
    ek_cert: Option<&Certificate>,
    transport: &mut dyn Transport,
) -> Result<Certificate, AttestError> {
    let quote = quote_report(platform, &enclave_report(identity, key_pub, req));
    let ev = Evidence {
        request: *req,
        quote,
        key_pub: key_pub.to_vec(),
        ek_cert: ek_cert.cloned(),
    };
    match transport.round_trip(&Message::Evidence(Box::new(ev)))? {
        Message::Certificate(c) => Ok(c),
        Message::Rejection(r) => Err(AttestError::Rejected(r)),
        other => Err(AttestError::Protocol(format!("expected verdict, got type {}", other.type_byte()))),
    }
}

/// Creates (or re-derives) the EK or AIK, flushes the handle and returns
/// the public part.
pub fn instance_key(instance: &mut VtpmInstance, kind: KeyRequest, opts: &AttestOptions) -> Result<Vec<u8>, AttestError> {
    let (key_kind, unique) = match kind {
        KeyRequest::Ek => (KeyKind::RsaDecryption, EK_UNIQUE),
        KeyRequest::Aik => (KeyKind::RsaSigning, AIK_UNIQUE),
    };
    let cmd = build::create_primary(
        Hierarchy::ENDORSEMENT_HANDLE,
        &opts.endorsement_auth,
        key_kind,
        opts.key_bits,
        unique,
        &[],
    );
    let payload = instance.execute(&cmd).into_result().map_err(AttestError::Tpm)?;
    let (handle, public) = parse::created(&payload).map_err(|e| AttestError::Tpm(e.into()))?;
    instance
        .execute(&build::flush_context(handle))
        .into_result()
        .map_err(AttestError::Tpm)?;
    Ok(public)
}

#[derive(Debug, Clone)]
pub struct Attested {
    pub ek_pub: Vec<u8>,
    pub ek_cert: Certificate,
    pub aik_pub: Vec<u8>,
    pub aik_cert: Certificate,
}

/// Full flow for a running instance: EK certificate, then AIK certificate.
pub fn attest_instance(
    instance: &mut VtpmInstance,
    transport: &mut dyn Transport,
    opts: &AttestOptions,
) -> Result<Attested, AttestError> {
    let ek_pub = instance_key(instance, KeyRequest::Ek, opts)?;
    let aik_pub = instance_key(instance, KeyRequest::Aik, opts)?;
    let platform = instance.platform().clone();
    let identity = *instance.identity();
    let ek_cert = request_certificate(&platform, &identity, &ek_pub, KeyRequest::Ek, None, transport)?;
    let aik_cert = request_certificate(&platform, &identity, &aik_pub, KeyRequest::Aik, Some(&ek_cert), transport)?;
    Ok(Attested {
        ek_pub,
        ek_cert,
        aik_pub,
        aik_cert,
    })
}
