// SPDX-License-Identifier: Apache-2.0

//! Naive reference interpreter for the TPM command subset.
//!
//! Written straight from the command layouts, with its own framing, cursor,
//! lockout arithmetic and object table. Only the cryptographic primitives
//! (primary key derivation, object wrapping, RSA and AES-CBC) are shared
//! with the implementation under test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest as _, Sha256};

use vtpm_core::tpm::keys::{self, Material};
use vtpm_core::tpm::{Hierarchy, KeyKind, TpmError, TpmState};

const OWNER: u32 = 0x4000_0001;
const ENDORSEMENT: u32 = 0x4000_000B;
const PLATFORM: u32 = 0x4000_000C;

const CC_HIERARCHY_CHANGE_AUTH: u32 = 0x129;
const CC_CREATE_PRIMARY: u32 = 0x131;
const CC_NV_WRITE: u32 = 0x137;
const CC_SELF_TEST: u32 = 0x143;
const CC_NV_READ: u32 = 0x14E;
const CC_CREATE: u32 = 0x153;
const CC_RSA_DECRYPT: u32 = 0x159;
const CC_SIGN: u32 = 0x15D;
const CC_UNSEAL: u32 = 0x15E;
const CC_ENCRYPT_DECRYPT: u32 = 0x164;
const CC_FLUSH_CONTEXT: u32 = 0x165;
const CC_READ_PUBLIC: u32 = 0x173;
const CC_RSA_ENCRYPT: u32 = 0x174;
const CC_VERIFY_SIGNATURE: u32 = 0x177;
const CC_PCR_READ: u32 = 0x17E;
const CC_PCR_EXTEND: u32 = 0x182;

#[derive(Clone)]
pub struct RefObject {
    kind: u8,
    public: Vec<u8>,
    private: Vec<u8>,
    parent: u32,
    auth: Vec<u8>,
    policy: Vec<(u8, [u8; 32])>,
}

#[derive(Clone)]
pub struct RefTpm {
    /// Indexed 0 owner, 1 endorsement, 2 platform.
    seeds: [[u8; 32]; 3],
    auths: [Vec<u8>; 3],
    pcrs: Vec<[u8; 32]>,
    failed: u32,
    max_tries: u32,
    until: Option<u64>,
    recovery_ms: u64,
    nv: Vec<(u32, Vec<u8>)>,
    objects: Vec<(u32, RefObject)>,
    next_handle: u32,
    rng: ChaCha20Rng,
}

fn hier_slot(h: u32) -> Option<usize> {
    match h {
        OWNER => Some(0),
        ENDORSEMENT => Some(1),
        PLATFORM => Some(2),
        _ => None,
    }
}

fn kind_of(b: u8) -> KeyKind {
    match b {
        1 => KeyKind::RsaSigning,
        2 => KeyKind::RsaDecryption,
        3 => KeyKind::AesSymmetric,
        _ => KeyKind::SealedData,
    }
}

struct Cur<'a> {
    b: &'a [u8],
    i: usize,
}

impl<'a> Cur<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8], TpmError> {
        if self.b.len() - self.i < n {
            return Err(TpmError::Truncated);
        }
        let s = &self.b[self.i..self.i + n];
        self.i += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, TpmError> {
        Ok(self.bytes(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, TpmError> {
        let s = self.bytes(2)?;
        Ok(((s[0] as u16) << 8) | s[1] as u16)
    }
    fn u32(&mut self) -> Result<u32, TpmError> {
        let s = self.bytes(4)?;
        Ok(((s[0] as u32) << 24) | ((s[1] as u32) << 16) | ((s[2] as u32) << 8) | s[3] as u32)
    }
    fn sized(&mut self) -> Result<&'a [u8], TpmError> {
        let n = self.u16()? as usize;
        self.bytes(n)
    }
    fn sized_max(&mut self, max: usize, err: TpmError) -> Result<&'a [u8], TpmError> {
        let s = self.sized()?;
        if s.len() > max {
            Err(err)
        } else {
            Ok(s)
        }
    }
    fn end(&self) -> Result<(), TpmError> {
        if self.i == self.b.len() {
            Ok(())
        } else {
            Err(TpmError::Size)
        }
    }
}

fn sized_out(out: &mut Vec<u8>, b: &[u8]) {
    out.push((b.len() >> 8) as u8);
    out.push(b.len() as u8);
    out.extend_from_slice(b);
}

fn frame(code: u32, payload: &[u8]) -> Vec<u8> {
    let size = 10 + payload.len() as u32;
    let mut out = vec![0x80, 0x01];
    out.extend_from_slice(&size.to_be_bytes());
    out.extend_from_slice(&code.to_be_bytes());
    out.extend_from_slice(payload);
    out
}

fn rc(e: TpmError) -> u32 {
    match e {
        TpmError::BadTag => 0x01E,
        TpmError::Value => 0x084,
        TpmError::Hierarchy => 0x085,
        TpmError::PayloadTooLarge => 0x087,
        TpmError::Handle => 0x08B,
        TpmError::Size => 0x095,
        TpmError::Truncated => 0x09A,
        TpmError::WrongKeyKind => 0x09C,
        TpmError::Failure => 0x101,
        TpmError::UnknownCode => 0x143,
        TpmError::NvSpace => 0x14B,
        TpmError::BadIndex => 0x184,
        TpmError::ObjectMemory => 0x902,
        TpmError::LockedOut => 0x921,
        TpmError::Auth => 0x98E,
        TpmError::Policy => 0x99D,
    }
}

impl RefTpm {
    pub fn from_state(s: &TpmState, rng_seed: [u8; 32]) -> Self {
        RefTpm {
            seeds: [s.sps, s.eps, s.pps],
            auths: [
                s.hierarchy_auth(Hierarchy::Storage).to_vec(),
                s.hierarchy_auth(Hierarchy::Endorsement).to_vec(),
                s.hierarchy_auth(Hierarchy::Platform).to_vec(),
            ],
            pcrs: s.pcr_bank.to_vec(),
            failed: s.lockout.failed_tries,
            max_tries: s.lockout.max_tries,
            until: s.lockout.lockout_until,
            recovery_ms: s.lockout.recovery_interval_ms,
            nv: s.nv_store.iter().map(|(k, v)| (*k, v.clone())).collect(),
            objects: s
                .loaded_keys
                .iter()
                .map(|(h, k)| {
                    (
                        *h,
                        RefObject {
                            kind: k.kind.to_byte(),
                            public: k.public_part.clone(),
                            private: k.private_part.clone(),
                            parent: k.parent,
                            auth: k.auth_value.clone(),
                            policy: k.pcr_policy.clone(),
                        },
                    )
                })
                .collect(),
            next_handle: s.next_handle,
            rng: ChaCha20Rng::from_seed(rng_seed),
        }
    }

    /// Field-by-field comparison against the implementation's state.
    pub fn diff(&self, s: &TpmState) -> Option<String> {
        let auths = [
            s.hierarchy_auth(Hierarchy::Storage),
            s.hierarchy_auth(Hierarchy::Endorsement),
            s.hierarchy_auth(Hierarchy::Platform),
        ];
        if self.seeds != [s.sps, s.eps, s.pps] {
            return Some("seeds".into());
        }
        if self.auths.iter().zip(auths).any(|(a, b)| a.as_slice() != b) {
            return Some("hierarchy auth".into());
        }
        if self.pcrs != s.pcr_bank.to_vec() {
            return Some("pcrs".into());
        }
        let l = &s.lockout;
        if (self.failed, self.max_tries, self.until, self.recovery_ms)
            != (l.failed_tries, l.max_tries, l.lockout_until, l.recovery_interval_ms)
        {
            return Some(format!("lockout ref={:?} impl={l:?}", (self.failed, self.until)));
        }
        let nv: Vec<(u32, Vec<u8>)> = s.nv_store.iter().map(|(k, v)| (*k, v.clone())).collect();
        if self.nv != nv {
            return Some("nv".into());
        }
        if self.objects.len() != s.loaded_keys.len() {
            return Some("object count".into());
        }
        for ((h, o), (h2, k)) in self.objects.iter().zip(&s.loaded_keys) {
            let same = h == h2
                && o.kind == k.kind.to_byte()
                && o.public == k.public_part
                && o.private == k.private_part
                && o.parent == k.parent
                && o.auth == k.auth_value
                && o.policy == k.pcr_policy;
            if !same {
                return Some(format!("object {h:#x}"));
            }
        }
        if self.next_handle != s.next_handle {
            return Some("next handle".into());
        }
        None
    }

    pub fn handles(&self) -> Vec<u32> {
        self.objects.iter().map(|(h, _)| *h).collect()
    }

    /// Loaded handles of the given kind byte with their auth values.
    pub fn objects_of(&self, kind: u8) -> Vec<(u32, Vec<u8>)> {
        self.objects
            .iter()
            .filter(|(_, o)| o.kind == kind)
            .map(|(h, o)| (*h, o.auth.clone()))
            .collect()
    }

    pub fn pcr(&self, i: u8) -> [u8; 32] {
        self.pcrs.get(i as usize).copied().unwrap_or([0; 32])
    }

    fn object(&self, h: u32) -> Result<&RefObject, TpmError> {
        self.objects
            .iter()
            .find(|(k, _)| *k == h)
            .map(|(_, o)| o)
            .ok_or(TpmError::Handle)
    }

    fn wrap_key_under(&self, parent: u32) -> Result<[u8; 32], TpmError> {
        if let Some(slot) = hier_slot(parent) {
            return Ok(keys::hierarchy_wrap_key(&self.seeds[slot]));
        }
        match self.material(parent)? {
            Material::Aes(k) => Ok(keys::storage_wrap_key(&k)),
            _ => Err(TpmError::WrongKeyKind),
        }
    }

    fn material(&self, h: u32) -> Result<Material, TpmError> {
        let o = self.object(h)?;
        let wk = self.wrap_key_under(o.parent)?;
        let plain = keys::unwrap(&wk, kind_of(o.kind), &o.public, &o.private)?;
        Material::from_private(kind_of(o.kind), &plain)
    }

    fn add_object(&mut self, o: RefObject) -> Result<u32, TpmError> {
        if self.objects.len() >= 64 {
            return Err(TpmError::ObjectMemory);
        }
        let h = self.next_handle;
        if h == u32::MAX {
            return Err(TpmError::ObjectMemory);
        }
        self.next_handle = h + 1;
        self.objects.push((h, o));
        self.objects.sort_by_key(|(k, _)| *k);
        Ok(h)
    }

    fn typed(&self, h: u32, kinds: &[u8]) -> Result<&RefObject, TpmError> {
        let o = self.object(h)?;
        if kinds.contains(&o.kind) {
            Ok(o)
        } else {
            Err(TpmError::WrongKeyKind)
        }
    }

    fn auth_ok(expected: &[u8], given: &[u8]) -> Result<(), TpmError> {
        if expected == given {
            Ok(())
        } else {
            Err(TpmError::Auth)
        }
    }

    fn op_rng(&mut self) -> ChaCha20Rng {
        ChaCha20Rng::from_seed(self.rng.gen())
    }

    /// Runs one raw command at time `now`. Returns the response bytes and
    /// whether persistent state changed.
    pub fn execute(&mut self, bytes: &[u8], now: u64) -> (Vec<u8>, bool) {
        if bytes.len() < 10 {
            return (frame(rc(TpmError::Truncated), &[]), false);
        }
        let tag = ((bytes[0] as u16) << 8) | bytes[1] as u16;
        let size = u32::from_be_bytes(bytes[2..6].try_into().unwrap()) as usize;
        let code = u32::from_be_bytes(bytes[6..10].try_into().unwrap());
        if size > bytes.len() {
            return (frame(rc(TpmError::Truncated), &[]), false);
        }
        if size < 10 || size < bytes.len() {
            return (frame(rc(TpmError::Size), &[]), false);
        }
        if tag != 0x8001 {
            return (frame(rc(TpmError::BadTag), &[]), false);
        }
        let payload = &bytes[10..];

        let mut changed = false;
        if let Some(until) = self.until {
            if now >= until {
                self.failed = 0;
                self.until = None;
                changed = true;
            }
        }
        let known = [
            CC_HIERARCHY_CHANGE_AUTH,
            CC_CREATE_PRIMARY,
            CC_NV_WRITE,
            CC_SELF_TEST,
            CC_NV_READ,
            CC_CREATE,
            CC_RSA_DECRYPT,
            CC_SIGN,
            CC_UNSEAL,
            CC_ENCRYPT_DECRYPT,
            CC_FLUSH_CONTEXT,
            CC_READ_PUBLIC,
            CC_RSA_ENCRYPT,
            CC_VERIFY_SIGNATURE,
            CC_PCR_READ,
            CC_PCR_EXTEND,
        ];
        if !known.contains(&code) {
            return (frame(rc(TpmError::UnknownCode), &[]), changed);
        }
        let needs_auth = [
            CC_HIERARCHY_CHANGE_AUTH,
            CC_CREATE_PRIMARY,
            CC_CREATE,
            CC_UNSEAL,
            CC_SIGN,
            CC_RSA_DECRYPT,
            CC_ENCRYPT_DECRYPT,
        ];
        if needs_auth.contains(&code) && self.until.is_some() {
            return (frame(rc(TpmError::LockedOut), &[]), changed);
        }
        let mutating = [
            CC_HIERARCHY_CHANGE_AUTH,
            CC_CREATE_PRIMARY,
            CC_CREATE,
            CC_PCR_EXTEND,
            CC_NV_WRITE,
            CC_FLUSH_CONTEXT,
        ];
        let result = if mutating.contains(&code) {
            let mut scratch = self.clone();
            let r = scratch.handle(code, payload);
            if r.is_ok() {
                *self = scratch;
                changed = true;
            }
            r
        } else {
            self.handle(code, payload)
        };
        match result {
            Ok(out) => (frame(0, &out), changed),
            Err(e) => {
                if e == TpmError::Auth {
                    if self.until.is_none() {
                        self.failed = (self.failed + 1).min(self.max_tries);
                        if self.failed == self.max_tries {
                            self.until = Some(now.saturating_add(self.recovery_ms));
                        }
                    }
                    changed = true;
                }
                (frame(rc(e), &[]), changed)
            }
        }
    }

    fn handle(&mut self, code: u32, payload: &[u8]) -> Result<Vec<u8>, TpmError> {
        let mut c = Cur { b: payload, i: 0 };
        let mut out = Vec::new();
        match code {
            CC_SELF_TEST => {
                c.end()?;
            }
            CC_PCR_READ => {
                let n = c.u8()? as usize;
                let sel = c.bytes(n)?.to_vec();
                c.end()?;
                let sel: Vec<u8> = if sel.is_empty() { (0..16).collect() } else { sel };
                out.push(sel.len() as u8);
                for i in sel {
                    if i >= 16 {
                        return Err(TpmError::BadIndex);
                    }
                    out.extend_from_slice(&self.pcrs[i as usize]);
                }
            }
            CC_PCR_EXTEND => {
                let i = c.u8()? as usize;
                let d = c.bytes(32)?;
                c.end()?;
                if i >= 16 {
                    return Err(TpmError::BadIndex);
                }
                let mut h = Sha256::new();
                h.update(self.pcrs[i]);
                h.update(d);
                self.pcrs[i] = h.finalize().into();
                out.extend_from_slice(&self.pcrs[i]);
            }
            CC_CREATE_PRIMARY => {
                let hh = c.u32()?;
                let slot = hier_slot(hh).ok_or(TpmError::Hierarchy)?;
                let hauth = c.sized()?;
                let kind = c.u8()?;
                if !(1..=4).contains(&kind) {
                    return Err(TpmError::Value);
                }
                let bits = c.u16()?;
                let unique = c.sized_max(64, TpmError::Value)?;
                let auth = c.sized_max(32, TpmError::Value)?.to_vec();
                c.end()?;
                Self::auth_ok(&self.auths[slot], hauth)?;
                let bits_ok = match kind {
                    1 | 2 => bits == 1024 || bits == 2048,
                    3 => bits == 256,
                    _ => false,
                };
                if !bits_ok {
                    return Err(TpmError::Value);
                }
                let m = keys::derive_primary(&self.seeds[slot], kind_of(kind), bits, unique)?;
                let wk = keys::hierarchy_wrap_key(&self.seeds[slot]);
                let public = m.public_part(&wk);
                let private = keys::wrap(&wk, kind_of(kind), &public, &m.private_bytes());
                let h = self.add_object(RefObject {
                    kind,
                    public: public.clone(),
                    private,
                    parent: hh,
                    auth,
                    policy: Vec::new(),
                })?;
                out.extend_from_slice(&h.to_be_bytes());
                sized_out(&mut out, &public);
            }
            CC_HIERARCHY_CHANGE_AUTH => {
                let slot = hier_slot(c.u32()?).ok_or(TpmError::Hierarchy)?;
                let current = c.sized()?;
                let new = c.sized_max(32, TpmError::Value)?;
                c.end()?;
                Self::auth_ok(&self.auths[slot], current)?;
                self.auths[slot] = new.to_vec();
            }
            CC_CREATE => {
                let parent = c.u32()?;
                let pauth = c.sized()?;
                let data = c.sized_max(256, TpmError::PayloadTooLarge)?.to_vec();
                let auth = c.sized_max(32, TpmError::Value)?.to_vec();
                let n = c.u8()? as usize;
                if n > 16 {
                    return Err(TpmError::Value);
                }
                let mut policy = Vec::new();
                for _ in 0..n {
                    let i = c.u8()?;
                    let d: [u8; 32] = c.bytes(32)?.try_into().unwrap();
                    if i >= 16 {
                        return Err(TpmError::BadIndex);
                    }
                    policy.push((i, d));
                }
                c.end()?;
                let p = self.typed(parent, &[3])?;
                Self::auth_ok(&p.auth, pauth)?;
                let Material::Aes(pk) = self.material(parent)? else {
                    return Err(TpmError::WrongKeyKind);
                };
                let wk = keys::storage_wrap_key(&pk);
                let public = Material::Sealed(data.clone()).public_part(&wk);
                let private = keys::wrap(&wk, KeyKind::SealedData, &public, &data);
                let h = self.add_object(RefObject {
                    kind: 4,
                    public: public.clone(),
                    private,
                    parent,
                    auth,
                    policy,
                })?;
                out.extend_from_slice(&h.to_be_bytes());
                sized_out(&mut out, &public);
            }
            CC_UNSEAL => {
                let h = c.u32()?;
                let auth = c.sized()?;
                c.end()?;
                let o = self.typed(h, &[4])?;
                Self::auth_ok(&o.auth, auth)?;
                for (i, d) in &o.policy {
                    if &self.pcrs[*i as usize] != d {
                        return Err(TpmError::Policy);
                    }
                }
                let Material::Sealed(data) = self.material(h)? else {
                    return Err(TpmError::Failure);
                };
                sized_out(&mut out, &data);
            }
            CC_SIGN => {
                let h = c.u32()?;
                let auth = c.sized()?;
                let msg = c.sized_max(4096, TpmError::PayloadTooLarge)?;
                c.end()?;
                let o = self.typed(h, &[1])?;
                Self::auth_ok(&o.auth, auth)?;
                let Material::Rsa(sk) = self.material(h)? else {
                    return Err(TpmError::Failure);
                };
                let mut r = self.op_rng();
                sized_out(&mut out, &keys::rsa_sign(&sk, msg, &mut r)?);
            }
            CC_VERIFY_SIGNATURE => {
                let h = c.u32()?;
                let msg = c.sized_max(4096, TpmError::PayloadTooLarge)?;
                let sig = c.sized()?;
                c.end()?;
                let o = self.typed(h, &[1])?;
                let pk = keys::rsa_public(&o.public)?;
                out.push(keys::rsa_verify(&pk, msg, sig) as u8);
            }
            CC_RSA_ENCRYPT => {
                let h = c.u32()?;
                let msg = c.sized()?;
                c.end()?;
                let o = self.typed(h, &[2])?;
                let pk = keys::rsa_public(&o.public)?;
                let mut r = self.op_rng();
                sized_out(&mut out, &keys::rsa_encrypt(&pk, msg, &mut r)?);
            }
            CC_RSA_DECRYPT => {
                let h = c.u32()?;
                let auth = c.sized()?;
                let ct = c.sized()?;
                c.end()?;
                let o = self.typed(h, &[2])?;
                Self::auth_ok(&o.auth, auth)?;
                let Material::Rsa(sk) = self.material(h)? else {
                    return Err(TpmError::Failure);
                };
                let mut r = self.op_rng();
                sized_out(&mut out, &keys::rsa_decrypt(&sk, ct, &mut r)?);
            }
            CC_ENCRYPT_DECRYPT => {
                let h = c.u32()?;
                let auth = c.sized()?;
                let decrypt = match c.u8()? {
                    0 => false,
                    1 => true,
                    _ => return Err(TpmError::Value),
                };
                let iv: [u8; 16] = c.bytes(16)?.try_into().unwrap();
                let data = c.sized_max(4096, TpmError::PayloadTooLarge)?;
                c.end()?;
                let o = self.typed(h, &[3])?;
                Self::auth_ok(&o.auth, auth)?;
                let Material::Aes(k) = self.material(h)? else {
                    return Err(TpmError::Failure);
                };
                sized_out(&mut out, &keys::aes_cbc(&k, &iv, decrypt, data)?);
            }
            CC_NV_WRITE => {
                let index = c.u32()?;
                let data = c.sized_max(2048, TpmError::PayloadTooLarge)?.to_vec();
                c.end()?;
                match self.nv.iter_mut().find(|(k, _)| *k == index) {
                    Some(slot) => slot.1 = data,
                    None => {
                        if self.nv.len() >= 64 {
                            return Err(TpmError::NvSpace);
                        }
                        self.nv.push((index, data));
                        self.nv.sort_by_key(|(k, _)| *k);
                    }
                }
            }
            CC_NV_READ => {
                let index = c.u32()?;
                c.end()?;
                let (_, data) = self.nv.iter().find(|(k, _)| *k == index).ok_or(TpmError::BadIndex)?;
                sized_out(&mut out, data);
            }
            CC_READ_PUBLIC => {
                let h = c.u32()?;
                c.end()?;
                let o = self.object(h)?;
                out.push(o.kind);
                sized_out(&mut out, &o.public);
            }
            CC_FLUSH_CONTEXT => {
                let h = c.u32()?;
                c.end()?;
                let pos = self.objects.iter().position(|(k, _)| *k == h).ok_or(TpmError::Handle)?;
                self.objects.remove(pos);
            }
            _ => return Err(TpmError::UnknownCode),
        }
        Ok(out)
    }
}
