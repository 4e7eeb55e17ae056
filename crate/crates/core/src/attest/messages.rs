// SPDX-License-Identifier: Apache-2.0

//! Attestation records and their length-prefixed message encoding.
//!
//! ```text
//! message     type u8 | body_len u32 | body
//!   1 Hello       requested u8                       (1 EK, 2 AIK)
//!   2 Challenge   nonce [32] | requested u8
//!   3 Evidence    nonce [32] | requested u8 | quote [QUOTE_LEN] | key_pub b16
//!                 | has_ek_cert u8 | ek_cert b16 (when present)
//!   4 Certificate certificate bytes
//!   5 Rejection   code u8
//!
//! certificate "VCRT" | version u16 = 1 | kind u8 | serial u64 | issuer_id [32]
//!             | subject_key b16 | mrenclave [32] | not_before u64 | not_after u64
//!             | signature [64]      Ed25519 over every preceding byte
//! ```

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};

use crate::codec::{CodecError, Reader, Writer};
use crate::enclave::{Measurement, Quote};

pub const CERT_MAGIC: &[u8; 4] = b"VCRT";
pub const CERT_VERSION: u16 = 1;
pub const MAX_MESSAGE_LEN: usize = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KeyRequest {
    Ek,
    Aik,
}

impl KeyRequest {
    pub fn to_byte(self) -> u8 {
        match self {
            KeyRequest::Ek => 1,
            KeyRequest::Aik => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(KeyRequest::Ek),
            2 => Some(KeyRequest::Aik),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttestationRequest {
    pub challenge_nonce: [u8; 32],
    pub requested_key: KeyRequest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rejection {
    BadSignature,
    UnknownMeasurement,
    StaleNonce,
    BadEkCert,
}

impl Rejection {
    pub fn to_byte(self) -> u8 {
        match self {
            Rejection::BadSignature => 1,
            Rejection::UnknownMeasurement => 2,
            Rejection::StaleNonce => 3,
            Rejection::BadEkCert => 4,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(Rejection::BadSignature),
            2 => Some(Rejection::UnknownMeasurement),
            3 => Some(Rejection::StaleNonce),
            4 => Some(Rejection::BadEkCert),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Rejection::BadSignature => "REJECT_BAD_SIGNATURE",
            Rejection::UnknownMeasurement => "REJECT_UNKNOWN_MEASUREMENT",
            Rejection::StaleNonce => "REJECT_STALE_NONCE",
            Rejection::BadEkCert => "REJECT_BAD_EK_CERT",
        }
    }
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Certificate {
    pub kind: KeyRequest,
    pub serial: u64,
    pub issuer_id: [u8; 32],
    pub subject_key: Vec<u8>,
    pub mrenclave: Measurement,
    pub not_before: u64,
    pub not_after: u64,
    pub signature: [u8; 64],
}

impl Certificate {
    pub fn signed_body(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(200 + self.subject_key.len());
        w.raw(CERT_MAGIC)
            .u16(CERT_VERSION)
            .u8(self.kind.to_byte())
            .u64(self.serial)
            .raw(&self.issuer_id)
            .b16(&self.subject_key)
            .raw(&self.mrenclave)
            .u64(self.not_before)
            .u64(self.not_after);
        w.into_vec()
    }

    pub fn sign(mut self, key: &SigningKey) -> Self {
        self.signature = key.sign(&self.signed_body()).to_bytes();
        self
    }

    pub fn verify(&self, issuer: &VerifyingKey) -> bool {
        issuer
            .verify(&self.signed_body(), &Signature::from_bytes(&self.signature))
            .is_ok()
    }

    pub fn is_valid_at(&self, now_ms: u64) -> bool {
        self.not_before <= now_ms && now_ms < self.not_after
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.signed_body();
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        r.expect_magic(CERT_MAGIC)?;
        let v = r.u16()?;
        if v != CERT_VERSION {
            return Err(CodecError::Version(v));
        }
        let c = Certificate {
            kind: KeyRequest::from_byte(r.u8()?).ok_or(CodecError::Invalid("certificate kind"))?,
            serial: r.u64()?,
            issuer_id: r.array()?,
            subject_key: r.b16()?.to_vec(),
            mrenclave: r.array()?,
            not_before: r.u64()?,
            not_after: r.u64()?,
            signature: r.array()?,
        };
        r.finish()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Evidence {
    pub request: AttestationRequest,
    pub quote: Quote,
    pub key_pub: Vec<u8>,
    pub ek_cert: Option<Certificate>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Hello(KeyRequest),
    Challenge(AttestationRequest),
    Evidence(Box<Evidence>),
    Certificate(Certificate),
    Rejection(Rejection),
}

impl Message {
    pub fn type_byte(&self) -> u8 {
        match self {
            Message::Hello(_) => 1,
            Message::Challenge(_) => 2,
            Message::Evidence(_) => 3,
            Message::Certificate(_) => 4,
            Message::Rejection(_) => 5,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut body = Writer::new();
        match self {
            Message::Hello(k) => {
                body.u8(k.to_byte());
            }
            Message::Challenge(req) => {
                body.raw(&req.challenge_nonce).u8(req.requested_key.to_byte());
            }
            Message::Evidence(ev) => {
                body.raw(&ev.request.challenge_nonce)
                    .u8(ev.request.requested_key.to_byte())
                    .raw(&ev.quote.to_bytes())
                    .b16(&ev.key_pub);
                match &ev.ek_cert {
                    Some(c) => body.u8(1).b16(&c.to_bytes()),
                    None => body.u8(0),
                };
            }
            Message::Certificate(c) => {
                body.raw(&c.to_bytes());
            }
            Message::Rejection(r) => {
                body.u8(r.to_byte());
            }
        }
        let mut w = Writer::with_capacity(5 + body.len());
        w.u8(self.type_byte()).b32(body.as_slice());
        w.into_vec()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut outer = Reader::new(bytes);
        let ty = outer.u8()?;
        let body = outer.b32()?;
        outer.finish()?;
        let mut r = Reader::new(body);
        let req = |r: &mut Reader<'_>| -> Result<AttestationRequest, CodecError> {
            Ok(AttestationRequest {
                challenge_nonce: r.array()?,
                requested_key: KeyRequest::from_byte(r.u8()?).ok_or(CodecError::Invalid("requested key"))?,
            })
        };
        let msg = match ty {
            1 => Message::Hello(KeyRequest::from_byte(r.u8()?).ok_or(CodecError::Invalid("requested key"))?),
            2 => Message::Challenge(req(&mut r)?),
            3 => {
                let request = req(&mut r)?;
                let quote = Quote::from_bytes(r.take(crate::enclave::quote::QUOTE_LEN)?)?;
                let key_pub = r.b16()?.to_vec();
                let ek_cert = match r.u8()? {
                    0 => None,
                    1 => Some(Certificate::from_bytes(r.b16()?)?),
                    _ => return Err(CodecError::Invalid("certificate flag")),
                };
                Message::Evidence(Box::new(Evidence {
                    request,
                    quote,
                    key_pub,
                    ek_cert,
                }))
            }
            4 => Message::Certificate(Certificate::from_bytes(r.take(r.remaining())?)?),
            5 => Message::Rejection(Rejection::from_byte(r.u8()?).ok_or(CodecError::Invalid("rejection code"))?),
            _ => return Err(CodecError::Invalid("message type")),
        };
        r.finish()?;
        Ok(msg)
    }
}
