// SPDX-License-Identifier: Apache-2.0

//! Command/response framing and per-command payload builders.
//!
//! Every frame is `tag: u16 | size: u32 | code: u32 | payload`, big-endian,
//! with `size` covering the whole frame. Payload layouts are documented in
//! `docs/wire.md`; the builders here are the reference encoders.

use super::state::{Digest, KeyKind};
use super::TpmError;
use crate::codec::{Reader, Writer};

pub const TAG_NO_SESSIONS: u16 = 0x8001;
pub const HEADER_LEN: usize = 10;

/// Command codes (TPM 2.0 numbering).
pub mod cc {
    pub const HIERARCHY_CHANGE_AUTH: u32 = 0x0000_0129;
    pub const CREATE_PRIMARY: u32 = 0x0000_0131;
    pub const NV_WRITE: u32 = 0x0000_0137;
    pub const SELF_TEST: u32 = 0x0000_0143;
    pub const NV_READ: u32 = 0x0000_014E;
    pub const CREATE: u32 = 0x0000_0153;
    pub const RSA_DECRYPT: u32 = 0x0000_0159;
    pub const SIGN: u32 = 0x0000_015D;
    pub const UNSEAL: u32 = 0x0000_015E;
    pub const ENCRYPT_DECRYPT: u32 = 0x0000_0164;
    pub const FLUSH_CONTEXT: u32 = 0x0000_0165;
    pub const READ_PUBLIC: u32 = 0x0000_0173;
    pub const RSA_ENCRYPT: u32 = 0x0000_0174;
    pub const VERIFY_SIGNATURE: u32 = 0x0000_0177;
    pub const PCR_READ: u32 = 0x0000_017E;
    pub const PCR_EXTEND: u32 = 0x0000_0182;

    pub const ALL: [(u32, &str); 16] = [
        (HIERARCHY_CHANGE_AUTH, "HierarchyChangeAuth"),
        (CREATE_PRIMARY, "CreatePrimary"),
        (NV_WRITE, "NV_Write"),
        (SELF_TEST, "SelfTest"),
        (NV_READ, "NV_Read"),
        (CREATE, "Create"),
        (RSA_DECRYPT, "RSA_Decrypt"),
        (SIGN, "Sign"),
        (UNSEAL, "Unseal"),
        (ENCRYPT_DECRYPT, "EncryptDecrypt"),
        (FLUSH_CONTEXT, "FlushContext"),
        (READ_PUBLIC, "ReadPublic"),
        (RSA_ENCRYPT, "RSA_Encrypt"),
        (VERIFY_SIGNATURE, "VerifySignature"),
        (PCR_READ, "PCR_Read"),
        (PCR_EXTEND, "PCR_Extend"),
    ];

    pub fn name(code: u32) -> Option<&'static str> {
        ALL.iter().find(|(c, _)| *c == code).map(|(_, n)| *n)
    }
}

fn frame(tag: u16, code: u32, payload: &[u8]) -> Vec<u8> {
    let mut w = Writer::with_capacity(HEADER_LEN + payload.len());
    w.u16(tag)
        .u32((HEADER_LEN + payload.len()) as u32)
        .u32(code)
        .raw(payload);
    w.into_vec()
}

fn unframe(bytes: &[u8]) -> Result<(u16, u32, Vec<u8>), TpmError> {
    if bytes.len() < HEADER_LEN {
        return Err(TpmError::Truncated);
    }
    let mut r = Reader::new(bytes);
    let tag = r.u16().map_err(|_| TpmError::Truncated)?;
    let size = r.u32().map_err(|_| TpmError::Truncated)? as usize;
    let code = r.u32().map_err(|_| TpmError::Truncated)?;
    if size > bytes.len() {
        return Err(TpmError::Truncated);
    }
    if size < HEADER_LEN || size < bytes.len() {
        return Err(TpmError::Size);
    }
    Ok((tag, code, bytes[HEADER_LEN..].to_vec()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Command {
    pub tag: u16,
    pub code: u32,
    pub payload: Vec<u8>,
}

impl Command {
    pub fn new(code: u32, payload: Vec<u8>) -> Self {
        Command {
            tag: TAG_NO_SESSIONS,
            code,
            payload,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        frame(self.tag, self.code, &self.payload)
    }

    /// Structural decode only; tag and code are validated by dispatch.
    pub fn decode(bytes: &[u8]) -> Result<Self, TpmError> {
        let (tag, code, payload) = unframe(bytes)?;
        Ok(Command { tag, code, payload })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub tag: u16,
    pub code: u32,
    pub payload: Vec<u8>,
}

impl Response {
    pub fn success(payload: Vec<u8>) -> Self {
        Response {
            tag: TAG_NO_SESSIONS,
            code: super::rc::SUCCESS,
            payload,
        }
    }

    pub fn error(err: &TpmError) -> Self {
        Response {
            tag: TAG_NO_SESSIONS,
            code: err.code(),
            payload: Vec::new(),
        }
    }

    pub fn is_success(&self) -> bool {
        self.code == super::rc::SUCCESS
    }

    pub fn encode(&self) -> Vec<u8> {
        frame(self.tag, self.code, &self.payload)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TpmError> {
        let (tag, code, payload) = unframe(bytes)?;
        Ok(Response { tag, code, payload })
    }

    /// `Ok(payload reader)` on success, the mapped error otherwise.
    pub fn into_result(self) -> Result<Vec<u8>, TpmError> {
        if self.is_success() {
            Ok(self.payload)
        } else {
            Err(TpmError::from_code(self.code))
        }
    }
}

/// Encoders for each supported command.
pub mod build {
    use super::*;

    /// An empty `indices` selects all sixteen PCRs.
    pub fn pcr_read(indices: &[u8]) -> Command {
        let mut w = Writer::new();
        w.u8(indices.len() as u8).raw(indices);
        Command::new(cc::PCR_READ, w.into_vec())
    }

    pub fn pcr_extend(index: u8, digest: &Digest) -> Command {
        let mut w = Writer::new();
        w.u8(index).raw(digest);
        Command::new(cc::PCR_EXTEND, w.into_vec())
    }

    pub fn create_primary(
        hierarchy: u32,
        hierarchy_auth: &[u8],
        kind: KeyKind,
        key_bits: u16,
        unique: &[u8],
        object_auth: &[u8],
    ) -> Command {
        let mut w = Writer::new();
        w.u32(hierarchy)
            .b16(hierarchy_auth)
            .u8(kind.to_byte())
            .u16(key_bits)
            .b16(unique)
            .b16(object_auth);
        Command::new(cc::CREATE_PRIMARY, w.into_vec())
    }

    pub fn hierarchy_change_auth(hierarchy: u32, current: &[u8], new: &[u8]) -> Command {
        let mut w = Writer::new();
        w.u32(hierarchy).b16(current).b16(new);
        Command::new(cc::HIERARCHY_CHANGE_AUTH, w.into_vec())
    }

    /// Creates a sealed-data object under a storage parent.
    pub fn seal(
        parent: u32,
        parent_auth: &[u8],
        payload: &[u8],
        object_auth: &[u8],
        pcr_policy: &[(u8, Digest)],
    ) -> Command {
        let mut w = Writer::new();
        w.u32(parent)
            .b16(parent_auth)
            .b16(payload)
            .b16(object_auth)
            .u8(pcr_policy.len() as u8);
        for (idx, d) in pcr_policy {
            w.u8(*idx).raw(d);
        }
        Command::new(cc::CREATE, w.into_vec())
    }

    pub fn unseal(handle: u32, auth: &[u8]) -> Command {
        let mut w = Writer::new();
        w.u32(handle).b16(auth);
        Command::new(cc::UNSEAL, w.into_vec())
    }

    pub fn sign(handle: u32, auth: &[u8], msg: &[u8]) -> Command {
        let mut w = Writer::new();
        w.u32(handle).b16(auth).b16(msg);
        Command::new(cc::SIGN, w.into_vec())
    }

    pub fn verify_signature(handle: u32, msg: &[u8], sig: &[u8]) -> Command {
        let mut w = Writer::new();
        w.u32(handle).b16(msg).b16(sig);
        Command::new(cc::VERIFY_SIGNATURE, w.into_vec())
    }

    pub fn rsa_encrypt(handle: u32, plaintext: &[u8]) -> Command {
        let mut w = Writer::new();
        w.u32(handle).b16(plaintext);
        Command::new(cc::RSA_ENCRYPT, w.into_vec())
    }

    pub fn rsa_decrypt(handle: u32, auth: &[u8], ciphertext: &[u8]) -> Command {
        let mut w = Writer::new();
        w.u32(handle).b16(auth).b16(ciphertext);
        Command::new(cc::RSA_DECRYPT, w.into_vec())
    }

    pub fn encrypt_decrypt(handle: u32, auth: &[u8], decrypt: bool, iv: &[u8; 16], data: &[u8]) -> Command {
        let mut w = Writer::new();
        w.u32(handle).b16(auth).u8(decrypt as u8).raw(iv).b16(data);
        Command::new(cc::ENCRYPT_DECRYPT, w.into_vec())
    }

    pub fn nv_write(index: u32, data: &[u8]) -> Command {
        let mut w = Writer::new();
        w.u32(index).b16(data);
        Command::new(cc::NV_WRITE, w.into_vec())
    }

    pub fn nv_read(index: u32) -> Command {
        let mut w = Writer::new();
        w.u32(index);
        Command::new(cc::NV_READ, w.into_vec())
    }

    pub fn read_public(handle: u32) -> Command {
        let mut w = Writer::new();
        w.u32(handle);
        Command::new(cc::READ_PUBLIC, w.into_vec())
    }

    pub fn flush_context(handle: u32) -> Command {
        let mut w = Writer::new();
        w.u32(handle);
        Command::new(cc::FLUSH_CONTEXT, w.into_vec())
    }

    pub fn self_test() -> Command {
        Command::new(cc::SELF_TEST, Vec::new())
    }
}

/// Decoders for success payloads.
pub mod parse {
    use super::*;
    use crate::codec::CodecError;

    fn done<T>(r: Reader<'_>, v: T) -> Result<T, CodecError> {
        r.finish()?;
        Ok(v)
    }

    pub fn digests(payload: &[u8]) -> Result<Vec<Digest>, CodecError> {
        let mut r = Reader::new(payload);
        let n = r.u8()?;
        let mut out = Vec::with_capacity(n as usize);
        for _ in 0..n {
            out.push(r.array()?);
        }
        done(r, out)
    }

    pub fn digest(payload: &[u8]) -> Result<Digest, CodecError> {
        let mut r = Reader::new(payload);
        let d = r.array()?;
        done(r, d)
    }

    /// `(handle, public part)` from CreatePrimary / Create.
    pub fn created(payload: &[u8]) -> Result<(u32, Vec<u8>), CodecError> {
        let mut r = Reader::new(payload);
        let h = r.u32()?;
        let public = r.b16()?.to_vec();
        done(r, (h, public))
    }

    pub fn bytes(payload: &[u8]) -> Result<Vec<u8>, CodecError> {
        let mut r = Reader::new(payload);
        let b = r.b16()?.to_vec();
        done(r, b)
    }

    pub fn verified(payload: &[u8]) -> Result<bool, CodecError> {
        let mut r = Reader::new(payload);
        let v = match r.u8()? {
            0 => false,
            1 => true,
            _ => return Err(CodecError::Invalid("verify flag")),
        };
        done(r, v)
    }

    pub fn public(payload: &[u8]) -> Result<(KeyKind, Vec<u8>), CodecError> {
        let mut r = Reader::new(payload);
        let kind = KeyKind::from_byte(r.u8()?).ok_or(CodecError::Invalid("key kind"))?;
        let public = r.b16()?.to_vec();
        done(r, (kind, public))
    }
}
