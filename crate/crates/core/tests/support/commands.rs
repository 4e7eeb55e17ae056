// SPDX-License-Identifier: Apache-2.0

//! Random command sequences for comparing the TPM against the reference
//! interpreter.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use vtpm_core::clock::{ClockHandle, ManualClock};
use vtpm_core::tpm::{build, cc, parse, Hierarchy, KeyKind, LocalLedger, Tpm, TpmOptions, TpmState};

use super::reference::RefTpm;

pub const OWNER: u32 = 0x4000_0001;
pub const ENDORSEMENT: u32 = 0x4000_000B;
pub const PLATFORM: u32 = 0x4000_000C;

pub struct Fixture {
    pub state: TpmState,
    pub storage: u32,
}

/// Base state with one object of every kind, so sequences rarely need to
/// generate RSA keys themselves.
pub fn fixture() -> Fixture {
    let mut state = TpmState::from_seeds([1; 32], [2; 32], [3; 32]);
    state.set_hierarchy_auth(Hierarchy::Endorsement, b"endorse".to_vec());
    let mut tpm = Tpm::new(state, [9; 32], TpmOptions::default());
    let clock = ManualClock::at(0);
    let mut run = |cmd: vtpm_core::tpm::Command| {
        let out = tpm.execute(&cmd, &clock, &mut LocalLedger);
        parse::created(&out.response.into_result().expect("fixture command")).expect("created").0
    };
    let storage = run(build::create_primary(OWNER, b"", KeyKind::AesSymmetric, 256, b"srk", b"sk"));
    run(build::create_primary(ENDORSEMENT, b"endorse", KeyKind::RsaSigning, 1024, b"aik", b"sig"));
    run(build::create_primary(PLATFORM, b"", KeyKind::RsaDecryption, 1024, b"ek", b"dec"));
    run(build::create_primary(OWNER, b"", KeyKind::AesSymmetric, 256, b"aes", b"aes"));
    run(build::seal(storage, b"sk", b"the sealed secret", b"pw", &[]));
    run(build::seal(storage, b"sk", b"bound to pcr 2", b"pw", &[(2, [0; 32])]));
    Fixture {
        state: tpm.into_state(),
        storage,
    }
}

pub struct W(pub Vec<u8>);

impl W {
    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.0.push(v);
        self
    }
    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.0.extend_from_slice(&v.to_be_bytes());
        self
    }
    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.0.extend_from_slice(&v.to_be_bytes());
        self
    }
    pub fn raw(&mut self, b: &[u8]) -> &mut Self {
        self.0.extend_from_slice(b);
        self
    }
    pub fn b16(&mut self, b: &[u8]) -> &mut Self {
        self.u16(b.len() as u16).raw(b)
    }
}

/// Usually up to `small` random bytes, up to `big` with probability `p`.
pub fn rand_sized(rng: &mut ChaCha20Rng, p: f64, big: usize, small: usize) -> Vec<u8> {
    let max = if rng.gen_bool(p) { big } else { small };
    rand_bytes(rng, max)
}

pub fn pick<T: Copy>(rng: &mut ChaCha20Rng, xs: &[T]) -> T {
    xs[rng.gen_range(0..xs.len())]
}

pub fn rand_bytes(rng: &mut ChaCha20Rng, max: usize) -> Vec<u8> {
    let n = rng.gen_range(0..=max);
    (0..n).map(|_| rng.gen()).collect()
}

/// Mostly well-formed commands over live handles, with a share of bad
/// auth, bad sizes, framing damage and unknown codes.
pub fn random_command(rng: &mut ChaCha20Rng, r: &RefTpm, storage: u32, sigs: &[Vec<u8>], cts: &[Vec<u8>]) -> Vec<u8> {
    let mut handles = r.handles();
    handles.extend([OWNER, ENDORSEMENT, PLATFORM, 0x8000_00FF, storage]);
    let handle = pick(rng, &handles);
    let auth = |rng: &mut ChaCha20Rng| -> Vec<u8> {
        pick(rng, &[&b""[..], b"pw", b"sk", b"sig", b"dec", b"aes", b"endorse", b"wrong"]).to_vec()
    };
    // an object of `kind` with its auth most of the time, otherwise anything
    let target = |rng: &mut ChaCha20Rng, kind: u8| -> (u32, Vec<u8>) {
        let objs = r.objects_of(kind);
        let h = if objs.is_empty() || rng.gen_bool(0.2) {
            handle
        } else {
            objs[rng.gen_range(0..objs.len())].0
        };
        let a = match objs.iter().find(|o| o.0 == h) {
            Some(o) if rng.gen_bool(0.8) => o.1.clone(),
            _ => auth(rng),
        };
        (h, a)
    };
    let hier = |rng: &mut ChaCha20Rng| pick(rng, &[OWNER, ENDORSEMENT, PLATFORM, 0x4000_0007]);
    let mut w = W(Vec::new());
    let code = match rng.gen_range(0..17) {
        0 => {
            if rng.gen_bool(0.2) {
                w.u8(0);
            }
            0x143
        }
        1 => {
            let n = rng.gen_range(0..4);
            w.u8(n);
            for _ in 0..n {
                w.u8(rng.gen_range(0..18));
            }
            0x17E
        }
        2 | 3 => {
            w.u8(rng.gen_range(0..17)).raw(&rng.gen::<[u8; 32]>());
            0x182
        }
        4 => {
            let kind = pick(rng, &[1u8, 2, 3, 3, 3, 4, 9]);
            let rsa_ok = rng.gen_bool(0.04);
            let bits = match kind {
                1 | 2 if rsa_ok => 1024,
                1 | 2 => pick(rng, &[512u16, 4096]),
                _ => pick(rng, &[256u16, 256, 128]),
            };
            let unique = rand_sized(rng, 0.05, 80, 8);
            let h = hier(rng);
            let hauth = if rng.gen_bool(0.8) && h == ENDORSEMENT { b"endorse".to_vec() } else { auth(rng) };
            w.u32(h).b16(&hauth).u8(kind).u16(bits).b16(&unique).b16(&auth(rng));
            0x131
        }
        5 => {
            let h = hier(rng);
            let new = if rng.gen_bool(0.05) { vec![1; 40] } else { auth(rng) };
            w.u32(h).b16(&auth(rng)).b16(&new);
            0x129
        }
        6 => {
            let parent = if rng.gen_bool(0.7) { storage } else { handle };
            let pauth = if rng.gen_bool(0.8) { b"sk".to_vec() } else { auth(rng) };
            let data = rand_sized(rng, 0.05, 300, 40);
            let n = if rng.gen_bool(0.03) { 17 } else { rng.gen_range(0..3) };
            w.u32(parent).b16(&pauth).b16(&data).b16(&auth(rng)).u8(n);
            for _ in 0..n.min(3) {
                let i = rng.gen_range(0..17);
                let d = if rng.gen_bool(0.5) { r.pcr(i) } else { rng.gen() };
                w.u8(i).raw(&d);
            }
            0x153
        }
        7 => {
            let (h, a) = target(rng, 4);
            w.u32(h).b16(&a);
            0x15E
        }
        8 => {
            let (h, a) = target(rng, 1);
            w.u32(h).b16(&a).b16(&rand_bytes(rng, 64));
            0x15D
        }
        9 => {
            let msg = rand_bytes(rng, 16);
            let sig = if rng.gen_bool(0.5) && !sigs.is_empty() { pick_vec(rng, sigs) } else { rand_bytes(rng, 140) };
            w.u32(target(rng, 1).0).b16(&msg).b16(&sig);
            0x177
        }
        10 => {
            let h = target(rng, 2).0;
            w.u32(h).b16(&rand_sized(rng, 0.1, 120, 60));
            0x174
        }
        11 => {
            let ct = if rng.gen_bool(0.5) && !cts.is_empty() { pick_vec(rng, cts) } else { rand_bytes(rng, 140) };
            let (h, a) = target(rng, 2);
            w.u32(h).b16(&a).b16(&ct);
            0x159
        }
        12 => {
            let mode = pick(rng, &[0u8, 0, 1, 1, 2]);
            let len = 16 * rng.gen_range(0..4) + if rng.gen_bool(0.2) { 3 } else { 0 };
            let data: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            let (h, a) = target(rng, 3);
            w.u32(h).b16(&a).u8(mode).raw(&rng.gen::<[u8; 16]>()).b16(&data);
            0x164
        }
        13 => {
            let data = rand_sized(rng, 0.05, 2100, 24);
            w.u32(0x0150_0000 + rng.gen_range(0..4)).b16(&data);
            0x137
        }
        14 => {
            w.u32(0x0150_0000 + rng.gen_range(0..5));
            0x14E
        }
        15 => {
            w.u32(handle);
            pick(rng, &[0x173, 0x173, 0x165])
        }
        _ => {
            w.raw(&rand_bytes(rng, 6));
            pick(rng, &[0x100, 0x17F, 0x143, 0x165])
        }
    };
    let mut payload = w.0;
    // damage the payload now and then
    match rng.gen_range(0..40) {
        0 if !payload.is_empty() => {
            let n = rng.gen_range(0..payload.len());
            payload.truncate(n);
        }
        1 => payload.push(rng.gen()),
        _ => {}
    }
    let mut frame = W(Vec::new());
    let tag = if rng.gen_range(0..50) == 0 { 0x8002 } else { 0x8001 };
    frame.u16(tag).u32(10 + payload.len() as u32).u32(code).raw(&payload);
    let mut bytes = frame.0;
    match rng.gen_range(0..60) {
        0 => bytes.truncate(rng.gen_range(0..10)),
        1 => bytes[5] = bytes[5].wrapping_add(1),
        2 => bytes[5] = bytes[5].wrapping_sub(1),
        _ => {}
    }
    bytes
}

pub fn pick_vec(rng: &mut ChaCha20Rng, xs: &[Vec<u8>]) -> Vec<u8> {
    xs[rng.gen_range(0..xs.len())].clone()
}

/// One PCR extend observed during a run: old value, digest, new value.
pub type Extend = ([u8; 32], [u8; 32], [u8; 32]);

#[derive(Debug, Default)]
pub struct SeqReport {
    pub steps: usize,
    /// Command codes that succeeded, in order.
    pub successes: Vec<u32>,
    pub extends: Vec<Extend>,
}

/// Runs `len` random commands through the implementation and the reference
/// side by side from the fixture state. Stops at the first difference in
/// response bytes, state-changed flag or state.
pub fn compare_sequence(fx: &Fixture, rng: &mut ChaCha20Rng, len: usize) -> Result<SeqReport, String> {
    let seed: [u8; 32] = rng.gen();
    let mut tpm = Tpm::new(fx.state.clone(), seed, TpmOptions::default());
    let mut reference = RefTpm::from_state(&fx.state, seed);
    let clock = ManualClock::at(1_000);
    let mut sigs = Vec::new();
    let mut cts = Vec::new();
    let mut report = SeqReport::default();
    for step in 0..len {
        clock.advance(pick(rng, &[0, 1, 100, 2_500, 9_999, 10_000]));
        let now = clock.now_ms().expect("manual clock");
        let bytes = random_command(rng, &reference, fx.storage, &sigs, &cts);
        let before = tpm.state().pcr_bank;
        let out = tpm.execute_bytes(&bytes, &clock, &mut LocalLedger);
        let got = out.response.encode();
        let (want, want_changed) = reference.execute(&bytes, now);
        report.steps += 1;
        if got != want || out.state_changed != want_changed {
            return Err(format!(
                "step {step}: command {} -> impl {} changed={} / reference {} changed={want_changed}",
                hex::encode(&bytes),
                hex::encode(&got),
                out.state_changed,
                hex::encode(&want)
            ));
        }
        if out.response.is_success() {
            let code = u32::from_be_bytes(bytes[6..10].try_into().expect("4 bytes"));
            report.successes.push(code);
            match code {
                cc::SIGN => sigs.push(parse::bytes(&out.response.payload).expect("signature")),
                cc::RSA_ENCRYPT => cts.push(parse::bytes(&out.response.payload).expect("ciphertext")),
                cc::PCR_EXTEND => {
                    let i = bytes[10] as usize;
                    let d: [u8; 32] = bytes[11..43].try_into().expect("digest");
                    report.extends.push((before[i], d, tpm.state().pcr_bank[i]));
                }
                _ => {}
            }
        }
        if let Some(field) = reference.diff(tpm.state()) {
            return Err(format!("step {step}: state differs in {field}"));
        }
    }
    if tpm.state().startup_counter != fx.state.startup_counter {
        return Err("startup counter moved".into());
    }
    Ok(report)
}
