// SPDX-License-Identifier: Apache-2.0

//! Command routing and the per-command handlers.
//!
//! Mutating handlers run on a scratch copy of the state that is committed
//! only on success, so an error leaves the state untouched apart from the
//! lockout counter after an authorization failure.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use subtle::ConstantTimeEq;

use super::keys::{self, Material};
use super::lockout::{lockout_tick, record_auth_failure, FailureLedger, LedgerFault};
use super::state::{Hierarchy, KeyKind, KeyObject, TpmState, PCR_COUNT};
use super::wire::{cc, Command, Response, TAG_NO_SESSIONS};
use super::TpmError;
use crate::clock::ClockHandle;
use crate::codec::{Reader, Writer};

pub const MAX_LOADED_KEYS: usize = 64;
pub const MAX_NV_INDICES: usize = 64;
pub const MAX_NV_DATA: usize = 2048;

/// Commands that check an authorization value and are refused during lockout.
pub const AUTH_BEARING: [u32; 7] = [
    cc::HIERARCHY_CHANGE_AUTH,
    cc::CREATE_PRIMARY,
    cc::CREATE,
    cc::UNSEAL,
    cc::SIGN,
    cc::RSA_DECRYPT,
    cc::ENCRYPT_DECRYPT,
];

const MUTATING: [u32; 6] = [
    cc::HIERARCHY_CHANGE_AUTH,
    cc::CREATE_PRIMARY,
    cc::CREATE,
    cc::PCR_EXTEND,
    cc::NV_WRITE,
    cc::FLUSH_CONTEXT,
];

pub fn is_auth_bearing(code: u32) -> bool {
    AUTH_BEARING.contains(&code)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub response: Response,
    /// The persistent state differs from before the command.
    pub state_changed: bool,
    /// Set when the rollback ledger refused an update.
    pub fault: Option<LedgerFault>,
}

impl Outcome {
    fn new(result: Result<Vec<u8>, TpmError>, state_changed: bool) -> Self {
        Outcome {
            response: match result {
                Ok(payload) => Response::success(payload),
                Err(e) => Response::error(&e),
            },
            state_changed,
            fault: None,
        }
    }

    fn faulted(fault: LedgerFault, state_changed: bool) -> Self {
        Outcome {
            response: Response::error(&TpmError::Failure),
            state_changed,
            fault: Some(fault),
        }
    }
}

pub fn dispatch(
    state: &mut TpmState,
    cmd: &Command,
    clock: &dyn ClockHandle,
    ledger: &mut dyn FailureLedger,
    rng: &mut ChaCha20Rng,
) -> Outcome {
    if cmd.tag != TAG_NO_SESSIONS {
        return Outcome::new(Err(TpmError::BadTag), false);
    }
    let Ok(now) = clock.now_ms() else {
        return Outcome::new(Err(TpmError::Failure), false);
    };

    let mut changed = false;
    if state.lockout.is_locked() {
        let mut l = state.lockout.clone();
        if let Err(f) = lockout_tick(&mut l, now, ledger) {
            return Outcome::faulted(f, false);
        }
        if l != state.lockout {
            state.lockout = l;
            changed = true;
        }
    }

    if cc::name(cmd.code).is_none() {
        return Outcome::new(Err(TpmError::UnknownCode), changed);
    }
    if is_auth_bearing(cmd.code) && state.lockout.is_locked() {
        return Outcome::new(Err(TpmError::LockedOut), changed);
    }

    let result = if MUTATING.contains(&cmd.code) {
        let mut work = state.clone();
        let r = run(&mut work, cmd.code, &cmd.payload, rng);
        if r.is_ok() {
            *state = work;
            changed = true;
        }
        r
    } else {
        run(state, cmd.code, &cmd.payload, rng)
    };

    if result == Err(TpmError::Auth) {
        let mut l = state.lockout.clone();
        if let Err(f) = record_auth_failure(&mut l, now, ledger) {
            return Outcome::faulted(f, changed);
        }
        state.lockout = l;
        changed = true;
    }
    Outcome::new(result, changed)
}

fn check_auth(expected: &[u8], given: &[u8]) -> Result<(), TpmError> {
    if bool::from(expected.ct_eq(given)) {
        Ok(())
    } else {
        Err(TpmError::Auth)
    }
}

fn bounded<'a>(r: &mut Reader<'a>, max: usize, err: TpmError) -> Result<&'a [u8], TpmError> {
    let b = r.b16()?;
    if b.len() > max {
        return Err(err);
    }
    Ok(b)
}

fn key<'s>(state: &'s TpmState, handle: u32) -> Result<&'s KeyObject, TpmError> {
    state.loaded_keys.get(&handle).ok_or(TpmError::Handle)
}

fn key_of_kind<'s>(state: &'s TpmState, handle: u32, kinds: &[KeyKind]) -> Result<&'s KeyObject, TpmError> {
    let k = key(state, handle)?;
    if kinds.contains(&k.kind) {
        Ok(k)
    } else {
        Err(TpmError::WrongKeyKind)
    }
}

fn wrap_key_for_parent(state: &TpmState, parent: u32) -> Result<[u8; 32], TpmError> {
    if let Some(h) = Hierarchy::from_handle(parent) {
        return Ok(keys::hierarchy_wrap_key(state.seed(h)));
    }
    match material(state, parent)? {
        Material::Aes(k) => Ok(keys::storage_wrap_key(&k)),
        _ => Err(TpmError::WrongKeyKind),
    }
}

/// Decrypts the private part of a loaded object.
pub(crate) fn material(state: &TpmState, handle: u32) -> Result<Material, TpmError> {
    let k = key(state, handle)?;
    let wrap_key = wrap_key_for_parent(state, k.parent)?;
    let plain = keys::unwrap(&wrap_key, k.kind, &k.public_part, &k.private_part)?;
    Material::from_private(k.kind, &plain)
}

fn insert_key(state: &mut TpmState, obj: KeyObject) -> Result<u32, TpmError> {
    if state.loaded_keys.len() >= MAX_LOADED_KEYS {
        return Err(TpmError::ObjectMemory);
    }
    let handle = state.next_handle;
    state.next_handle = handle.checked_add(1).ok_or(TpmError::ObjectMemory)?;
    state.loaded_keys.insert(handle, obj);
    Ok(handle)
}

fn created(handle: u32, public: &[u8]) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(handle).b16(public);
    w.into_vec()
}

fn b16_payload(bytes: &[u8]) -> Vec<u8> {
    let mut w = Writer::with_capacity(2 + bytes.len());
    w.b16(bytes);
    w.into_vec()
}

fn run(state: &mut TpmState, code: u32, payload: &[u8], rng: &mut ChaCha20Rng) -> Result<Vec<u8>, TpmError> {
    let mut r = Reader::new(payload);
    match code {
        cc::SELF_TEST => {
            r.finish()?;
            Ok(Vec::new())
        }
        cc::PCR_READ => {
            let n = r.u8()? as usize;
            let indices = r.take(n)?.to_vec();
            r.finish()?;
            let indices: Vec<u8> = if indices.is_empty() {
                (0..PCR_COUNT as u8).collect()
            } else {
                indices
            };
            let mut w = Writer::with_capacity(1 + 32 * indices.len());
            w.u8(indices.len() as u8);
            for i in indices {
                w.raw(state.pcr_bank.get(i as usize).ok_or(TpmError::BadIndex)?);
            }
            Ok(w.into_vec())
        }
        cc::PCR_EXTEND => {
            let idx = r.u8()? as usize;
            let digest: [u8; 32] = r.array()?;
            r.finish()?;
            let slot = state.pcr_bank.get_mut(idx).ok_or(TpmError::BadIndex)?;
            *slot = extend_digest(slot, &digest);
            Ok(slot.to_vec())
        }
        cc::CREATE_PRIMARY => {
            let h = Hierarchy::from_handle(r.u32()?).ok_or(TpmError::Hierarchy)?;
            let hier_auth = r.b16()?;
            let kind = KeyKind::from_byte(r.u8()?).ok_or(TpmError::Value)?;
            let bits = r.u16()?;
            let unique = bounded(&mut r, keys::MAX_UNIQUE_LEN, TpmError::Value)?;
            let auth = bounded(&mut r, keys::MAX_AUTH_LEN, TpmError::Value)?;
            r.finish()?;
            check_auth(state.hierarchy_auth(h), hier_auth)?;
            let m = keys::derive_primary(state.seed(h), kind, bits, unique)?;
            let wrap_key = keys::hierarchy_wrap_key(state.seed(h));
            let public = m.public_part(&wrap_key);
            let private = keys::wrap(&wrap_key, kind, &public, &m.private_bytes());
            let handle = insert_key(
                state,
                KeyObject {
                    kind,
                    public_part: public.clone(),
                    private_part: private,
                    parent: h.handle(),
                    auth_value: auth.to_vec(),
                    pcr_policy: Vec::new(),
                },
            )?;
            Ok(created(handle, &public))
        }
        cc::HIERARCHY_CHANGE_AUTH => {
            let h = Hierarchy::from_handle(r.u32()?).ok_or(TpmError::Hierarchy)?;
            let current = r.b16()?;
            let new = bounded(&mut r, keys::MAX_AUTH_LEN, TpmError::Value)?;
            r.finish()?;
            check_auth(state.hierarchy_auth(h), current)?;
            state.set_hierarchy_auth(h, new.to_vec());
            Ok(Vec::new())
        }
        cc::CREATE => {
            let parent = r.u32()?;
            let parent_auth = r.b16()?;
            let data = bounded(&mut r, keys::MAX_SEAL_PAYLOAD, TpmError::PayloadTooLarge)?;
            let auth = bounded(&mut r, keys::MAX_AUTH_LEN, TpmError::Value)?;
            let n = r.u8()? as usize;
            if n > PCR_COUNT {
                return Err(TpmError::Value);
            }
            let mut policy = Vec::with_capacity(n);
            for _ in 0..n {
                let idx = r.u8()?;
                let d = r.array()?;
                if idx as usize >= PCR_COUNT {
                    return Err(TpmError::BadIndex);
                }
                policy.push((idx, d));
            }
            r.finish()?;
            let p = key_of_kind(state, parent, &[KeyKind::AesSymmetric])?;
            check_auth(&p.auth_value, parent_auth)?;
            let Material::Aes(parent_key) = material(state, parent)? else {
                return Err(TpmError::WrongKeyKind);
            };
            let wrap_key = keys::storage_wrap_key(&parent_key);
            let m = Material::Sealed(data.to_vec());
            let public = m.public_part(&wrap_key);
            let private = keys::wrap(&wrap_key, KeyKind::SealedData, &public, data);
            let handle = insert_key(
                state,
                KeyObject {
                    kind: KeyKind::SealedData,
                    public_part: public.clone(),
                    private_part: private,
                    parent,
                    auth_value: auth.to_vec(),
                    pcr_policy: policy,
                },
            )?;
            Ok(created(handle, &public))
        }
        cc::UNSEAL => {
            let handle = r.u32()?;
            let auth = r.b16()?;
            r.finish()?;
            let k = key_of_kind(state, handle, &[KeyKind::SealedData])?;
            check_auth(&k.auth_value, auth)?;
            if k.pcr_policy.iter().any(|(i, d)| &state.pcr_bank[*i as usize] != d) {
                return Err(TpmError::Policy);
            }
            let Material::Sealed(data) = material(state, handle)? else {
                return Err(TpmError::Failure);
            };
            Ok(b16_payload(&data))
        }
        cc::SIGN => {
            let handle = r.u32()?;
            let auth = r.b16()?;
            let msg = bounded(&mut r, keys::MAX_SIGN_MSG, TpmError::PayloadTooLarge)?;
            r.finish()?;
            let k = key_of_kind(state, handle, &[KeyKind::RsaSigning])?;
            check_auth(&k.auth_value, auth)?;
            let Material::Rsa(sk) = material(state, handle)? else {
                return Err(TpmError::Failure);
            };
            let mut op_rng = ChaCha20Rng::from_seed(rand::Rng::gen(rng));
            Ok(b16_payload(&keys::rsa_sign(&sk, msg, &mut op_rng)?))
        }
        cc::VERIFY_SIGNATURE => {
            let handle = r.u32()?;
            let msg = bounded(&mut r, keys::MAX_SIGN_MSG, TpmError::PayloadTooLarge)?;
            let sig = r.b16()?;
            r.finish()?;
            let k = key_of_kind(state, handle, &[KeyKind::RsaSigning])?;
            let pk = keys::rsa_public(&k.public_part)?;
            Ok(vec![keys::rsa_verify(&pk, msg, sig) as u8])
        }
        cc::RSA_ENCRYPT => {
            let handle = r.u32()?;
            let msg = r.b16()?;
            r.finish()?;
            let k = key_of_kind(state, handle, &[KeyKind::RsaDecryption])?;
            let pk = keys::rsa_public(&k.public_part)?;
            let mut op_rng = ChaCha20Rng::from_seed(rand::Rng::gen(rng));
            Ok(b16_payload(&keys::rsa_encrypt(&pk, msg, &mut op_rng)?))
        }
        cc::RSA_DECRYPT => {
            let handle = r.u32()?;
            let auth = r.b16()?;
            let ct = r.b16()?;
            r.finish()?;
            let k = key_of_kind(state, handle, &[KeyKind::RsaDecryption])?;
            check_auth(&k.auth_value, auth)?;
            let Material::Rsa(sk) = material(state, handle)? else {
                return Err(TpmError::Failure);
            };
            let mut op_rng = ChaCha20Rng::from_seed(rand::Rng::gen(rng));
            Ok(b16_payload(&keys::rsa_decrypt(&sk, ct, &mut op_rng)?))
        }
        cc::ENCRYPT_DECRYPT => {
            let handle = r.u32()?;
            let auth = r.b16()?;
            let decrypt = match r.u8()? {
                0 => false,
                1 => true,
                _ => return Err(TpmError::Value),
            };
            let iv: [u8; 16] = r.array()?;
            let data = bounded(&mut r, keys::MAX_AES_DATA, TpmError::PayloadTooLarge)?;
            r.finish()?;
            let k = key_of_kind(state, handle, &[KeyKind::AesSymmetric])?;
            check_auth(&k.auth_value, auth)?;
            let Material::Aes(key) = material(state, handle)? else {
                return Err(TpmError::Failure);
            };
            Ok(b16_payload(&keys::aes_cbc(&key, &iv, decrypt, data)?))
        }
        cc::NV_WRITE => {
            let index = r.u32()?;
            let data = bounded(&mut r, MAX_NV_DATA, TpmError::PayloadTooLarge)?;
            r.finish()?;
            if !state.nv_store.contains_key(&index) && state.nv_store.len() >= MAX_NV_INDICES {
                return Err(TpmError::NvSpace);
            }
            state.nv_store.insert(index, data.to_vec());
            Ok(Vec::new())
        }
        cc::NV_READ => {
            let index = r.u32()?;
            r.finish()?;
            let data = state.nv_store.get(&index).ok_or(TpmError::BadIndex)?;
            Ok(b16_payload(data))
        }
        cc::READ_PUBLIC => {
            let handle = r.u32()?;
            r.finish()?;
            let k = key(state, handle)?;
            let mut w = Writer::new();
            w.u8(k.kind.to_byte()).b16(&k.public_part);
            Ok(w.into_vec())
        }
        cc::FLUSH_CONTEXT => {
            let handle = r.u32()?;
            r.finish()?;
            state.loaded_keys.remove(&handle).ok_or(TpmError::Handle)?;
            Ok(Vec::new())
        }
        _ => Err(TpmError::UnknownCode),
    }
}

/// `SHA256(old || digest)`.
pub fn extend_digest(old: &[u8; 32], digest: &[u8; 32]) -> [u8; 32] {
    use sha2::{Digest as _, Sha256};
    let mut h = Sha256::new();
    h.update(old);
    h.update(digest);
    h.finalize().into()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TpmOptions {
    /// Enables RNG reseeding and key-material export for oracle checks.
    pub test_mode: bool,
}

/// A TPM state plus the randomness source its commands draw from.
pub struct Tpm {
    state: TpmState,
    rng: ChaCha20Rng,
    options: TpmOptions,
}

impl std::fmt::Debug for Tpm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tpm")
            .field("options", &self.options)
            .field("loaded_keys", &self.state.loaded_keys.len())
            .finish_non_exhaustive()
    }
}

impl Tpm {
    pub fn new(state: TpmState, rng_seed: [u8; 32], options: TpmOptions) -> Self {
        Tpm {
            state,
            rng: ChaCha20Rng::from_seed(rng_seed),
            options,
        }
    }

    pub fn options(&self) -> TpmOptions {
        self.options
    }

    pub fn state(&self) -> &TpmState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut TpmState {
        &mut self.state
    }

    pub fn into_state(self) -> TpmState {
        self.state
    }

    /// Replaces the command RNG. Test mode only.
    pub fn reseed(&mut self, seed: u64) -> Result<(), TpmError> {
        if !self.options.test_mode {
            return Err(TpmError::Failure);
        }
        self.rng = ChaCha20Rng::seed_from_u64(seed);
        Ok(())
    }

    /// Clear private material of a loaded object (PKCS#1 DER for RSA, raw
    /// key for AES, payload for sealed data). Test mode only.
    pub fn export_key_material(&self, handle: u32) -> Result<Vec<u8>, TpmError> {
        if !self.options.test_mode {
            return Err(TpmError::Failure);
        }
        Ok(material(&self.state, handle)?.private_bytes())
    }

    pub fn execute(&mut self, cmd: &Command, clock: &dyn ClockHandle, ledger: &mut dyn FailureLedger) -> Outcome {
        dispatch(&mut self.state, cmd, clock, ledger, &mut self.rng)
    }

    /// Decodes raw bytes first; framing errors come back as error responses.
    pub fn execute_bytes(&mut self, bytes: &[u8], clock: &dyn ClockHandle, ledger: &mut dyn FailureLedger) -> Outcome {
        match Command::decode(bytes) {
            Ok(cmd) => self.execute(&cmd, clock, ledger),
            Err(e) => Outcome::new(Err(e), false),
        }
    }
}
