// SPDX-License-Identifier: Apache-2.0

//! Trust establishment between a vTPM enclave and a privacy CA.
//!
//! The PCA hands out a challenge nonce, the enclave binds its key and the
//! nonce into a quote, and the PCA issues an EK or AIK certificate once the
//! quote checks out. Quote verification stands in for the remote
//! attestation service: a local verifier holding the platform group key.

pub mod flow;
pub mod messages;
pub mod transport;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use ed25519_dalek::{SigningKey, VerifyingKey};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::{ClockError, ClockHandle};
use crate::enclave::{EnclaveIdentity, Measurement, Platform, Quote};

pub use flow::{attest_instance, request_certificate, AttestError, AttestOptions};
pub use messages::{AttestationRequest, Certificate, Evidence, KeyRequest, Message, Rejection};
pub use transport::{InProcess, LoopbackServer, TcpTransport, Transport};

/// Outstanding challenges older than this are treated as stale.
pub const NONCE_TTL_MS: u64 = 60_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Report {
    pub mrenclave: Measurement,
    pub mrsigner: Measurement,
    pub user_data: [u8; 64],
}

/// `SHA256(key_pub || nonce)` in the first half, zeros in the second.
pub fn report_data(key_pub: &[u8], nonce: &[u8; 32]) -> [u8; 64] {
    let mut h = Sha256::new();
    h.update(key_pub);
    h.update(nonce);
    let mut out = [0u8; 64];
    out[..32].copy_from_slice(&h.finalize());
    out
}

pub fn enclave_report(identity: &EnclaveIdentity, key_pub: &[u8], req: &AttestationRequest) -> Report {
    Report {
        mrenclave: identity.mrenclave,
        mrsigner: identity.mrsigner,
        user_data: report_data(key_pub, &req.challenge_nonce),
    }
}

pub fn quote_report(platform: &Platform, report: &Report) -> Quote {
    let identity = EnclaveIdentity {
        mrenclave: report.mrenclave,
        mrsigner: report.mrsigner,
    };
    platform.quote(&identity, report.user_data)
}

/// Local stand-in for the remote quote verification service.
#[derive(Debug, Clone)]
pub struct VerificationService {
    group_public: VerifyingKey,
}

impl VerificationService {
    pub fn new(group_public: VerifyingKey) -> Self {
        VerificationService { group_public }
    }

    pub fn verify(&self, quote: &Quote) -> bool {
        quote.verify(&self.group_public)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PcaPolicy {
    pub allowlist: BTreeSet<Measurement>,
}

impl PcaPolicy {
    pub fn allow(&mut self, mrenclave: Measurement) {
        self.allowlist.insert(mrenclave);
    }

    pub fn permits(&self, mrenclave: &Measurement) -> bool {
        self.allowlist.contains(mrenclave)
    }

    /// One hex mrenclave per line; `#` comments and blank lines ignored.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut policy = PcaPolicy::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bytes = hex::decode(line).map_err(|e| format!("line {}: {e}", n + 1))?;
            let m: Measurement = bytes
                .try_into()
                .map_err(|_| format!("line {}: measurement must be 32 bytes", n + 1))?;
            policy.allow(m);
        }
        Ok(policy)
    }

    pub fn to_text(&self) -> String {
        self.allowlist.iter().map(|m| format!("{}\n", hex::encode(m))).collect()
    }

    /// A missing file is an empty allowlist.
    pub fn load(path: &Path) -> std::io::Result<Self> {
        match std::fs::read_to_string(path) {
            Ok(t) => Self::parse(&t).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(e),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum PcaError {
    #[error("{0}")]
    Rejected(Rejection),
    #[error("PCA clock: {0}")]
    Clock(#[from] ClockError),
    #[error("unexpected message type {0}")]
    Protocol(u8),
}

impl From<Rejection> for PcaError {
    fn from(r: Rejection) -> Self {
        PcaError::Rejected(r)
    }
}

#[derive(Debug, Clone)]
pub struct PcaConfig {
    pub signing_key: [u8; 32],
    pub policy: PcaPolicy,
    /// When false the PCA skips the quote signature and allowlist checks.
    pub enforce: bool,
    pub validity_ms: u64,
}

struct Outstanding {
    requested: KeyRequest,
    issued_at: u64,
}

pub struct Pca {
    key: SigningKey,
    id: [u8; 32],
    verifier: VerificationService,
    policy: PcaPolicy,
    enforce: bool,
    validity_ms: u64,
    clock: Arc<dyn ClockHandle>,
    rng: ChaCha20Rng,
    outstanding: HashMap<[u8; 32], Outstanding>,
    revoked: HashSet<u64>,
    next_serial: u64,
}

impl std::fmt::Debug for Pca {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pca")
            .field("id", &hex::encode(&self.id[..8]))
            .field("enforce", &self.enforce)
            .field("outstanding", &self.outstanding.len())
            .finish_non_exhaustive()
    }
}

impl Pca {
    pub fn new(config: PcaConfig, verifier: VerificationService, clock: Arc<dyn ClockHandle>, rng_seed: [u8; 32]) -> Self {
        let key = SigningKey::from_bytes(&config.signing_key);
        let id = Sha256::digest(key.verifying_key().as_bytes()).into();
        Pca {
            key,
            id,
            verifier,
            policy: config.policy,
            enforce: config.enforce,
            validity_ms: config.validity_ms,
            clock,
            rng: ChaCha20Rng::from_seed(rng_seed),
            outstanding: HashMap::new(),
            revoked: HashSet::new(),
            next_serial: 1,
        }
    }

    pub fn public(&self) -> VerifyingKey {
        self.key.verifying_key()
    }

    pub fn id(&self) -> [u8; 32] {
        self.id
    }

    pub fn policy(&self) -> &PcaPolicy {
        &self.policy
    }

    pub fn outstanding(&self) -> usize {
        self.outstanding.len()
    }

    pub fn revoke(&mut self, serial: u64) {
        self.revoked.insert(serial);
    }

    pub fn challenge(&mut self, requested: KeyRequest) -> Result<AttestationRequest, PcaError> {
        let issued_at = self.clock.now_ms()?;
        let mut nonce = [0u8; 32];
        self.rng.fill_bytes(&mut nonce);
        self.outstanding.insert(nonce, Outstanding { requested, issued_at });
        Ok(AttestationRequest {
            challenge_nonce: nonce,
            requested_key: requested,
        })
    }

    /// Signature, then measurement, then freshness. The nonce is consumed by
    /// any evidence that names it, accepted or not.
    fn check(&mut self, quote: &Quote, key_pub: &[u8], req: &AttestationRequest, now: u64) -> Result<(), Rejection> {
        let live = self.outstanding.remove(&req.challenge_nonce);
        if self.enforce && !self.verifier.verify(quote) {
            return Err(Rejection::BadSignature);
        }
        if self.enforce && !self.policy.permits(&quote.mrenclave) {
            return Err(Rejection::UnknownMeasurement);
        }
        let fresh = live.is_some_and(|o| {
            o.requested == req.requested_key && now.saturating_sub(o.issued_at) <= NONCE_TTL_MS
        });
        if !fresh || quote.user_data != report_data(key_pub, &req.challenge_nonce) {
            return Err(Rejection::StaleNonce);
        }
        Ok(())
    }

    fn issue(&mut self, kind: KeyRequest, key_pub: &[u8], mrenclave: Measurement, now: u64) -> Certificate {
        let serial = self.next_serial;
        self.next_serial += 1;
        Certificate {
            kind,
            serial,
            issuer_id: self.id,
            subject_key: key_pub.to_vec(),
            mrenclave,
            not_before: now,
            not_after: now.saturating_add(self.validity_ms),
            signature: [0; 64],
        }
        .sign(&self.key)
    }

    pub fn verify_and_issue(
        &mut self,
        quote: &Quote,
        ek_pub: &[u8],
        req: &AttestationRequest,
    ) -> Result<Certificate, PcaError> {
        let now = self.clock.now_ms()?;
        if req.requested_key != KeyRequest::Ek {
            self.outstanding.remove(&req.challenge_nonce);
            return Err(Rejection::StaleNonce.into());
        }
        self.check(quote, ek_pub, req, now)?;
        Ok(self.issue(KeyRequest::Ek, ek_pub, quote.mrenclave, now))
    }

    pub fn issue_aik(
        &mut self,
        quote: &Quote,
        aik_pub: &[u8],
        ek_cert: Option<&Certificate>,
        req: &AttestationRequest,
    ) -> Result<Certificate, PcaError> {
        let now = self.clock.now_ms()?;
        if req.requested_key != KeyRequest::Aik {
            self.outstanding.remove(&req.challenge_nonce);
            return Err(Rejection::StaleNonce.into());
        }
        self.check(quote, aik_pub, req, now)?;
        let chain_ok = ek_cert.is_some_and(|c| {
            c.kind == KeyRequest::Ek
                && c.issuer_id == self.id
                && c.verify(&self.key.verifying_key())
                && c.is_valid_at(now)
                && !self.revoked.contains(&c.serial)
                && c.mrenclave == quote.mrenclave
        });
        if !chain_ok {
            return Err(Rejection::BadEkCert.into());
        }
        Ok(self.issue(KeyRequest::Aik, aik_pub, quote.mrenclave, now))
    }

    /// Server side of one message exchange.
    pub fn handle(&mut self, msg: Message) -> Result<Message, PcaError> {
        let reply = match msg {
            Message::Hello(k) => Message::Challenge(self.challenge(k)?),
            Message::Evidence(ev) => {
                let res = match ev.request.requested_key {
                    KeyRequest::Ek => self.verify_and_issue(&ev.quote, &ev.key_pub, &ev.request),
                    KeyRequest::Aik => self.issue_aik(&ev.quote, &ev.key_pub, ev.ek_cert.as_ref(), &ev.request),
                };
                match res {
                    Ok(c) => Message::Certificate(c),
                    Err(PcaError::Rejected(r)) => Message::Rejection(r),
                    Err(e) => return Err(e),
                }
            }
            other => return Err(PcaError::Protocol(other.type_byte())),
        };
        Ok(reply)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::enclave::{measure, VirtualTime};

    struct Rig {
        platform: Platform,
        clock: Arc<ManualClock>,
        pca: Pca,
        honest: EnclaveIdentity,
    }

    fn rig(enforce: bool) -> Rig {
        let platform = Platform::ephemeral(Arc::new(VirtualTime::new()), 7);
        let honest = measure(b"vtpm", b"alice");
        let mut policy = PcaPolicy::default();
        policy.allow(honest.mrenclave);
        let clock = Arc::new(ManualClock::at(1_000));
        let pca = Pca::new(
            PcaConfig {
                signing_key: [9; 32],
                policy,
                enforce,
                validity_ms: 10_000,
            },
            VerificationService::new(platform.group_public()),
            clock.clone(),
            [1; 32],
        );
        Rig {
            platform,
            clock,
            pca,
            honest,
        }
    }

    fn evidence(r: &Rig, id: &EnclaveIdentity, key: &[u8], req: &AttestationRequest) -> Quote {
        quote_report(&r.platform, &enclave_report(id, key, req))
    }

    #[test]
    fn nonces_are_fresh() {
        let mut r = rig(true);
        let a = r.pca.challenge(KeyRequest::Ek).unwrap();
        let b = r.pca.challenge(KeyRequest::Ek).unwrap();
        assert_ne!(a.challenge_nonce, b.challenge_nonce);
        assert_eq!(r.pca.outstanding(), 2);
    }

    #[test]
    fn report_binds_key_and_nonce() {
        let id = measure(b"x", b"y");
        let req = |n| AttestationRequest {
            challenge_nonce: [n; 32],
            requested_key: KeyRequest::Ek,
        };
        assert_eq!(enclave_report(&id, b"k", &req(1)), enclave_report(&id, b"k", &req(1)));
        assert_ne!(enclave_report(&id, b"k", &req(1)).user_data, enclave_report(&id, b"k", &req(2)).user_data);
        assert_ne!(enclave_report(&id, b"k", &req(1)).user_data, enclave_report(&id, b"j", &req(1)).user_data);
        assert_eq!(&enclave_report(&id, b"k", &req(1)).user_data[32..], &[0u8; 32]);
    }

    #[test]
    fn honest_ek_then_aik() {
        let mut r = rig(true);
        let req = r.pca.challenge(KeyRequest::Ek).unwrap();
        let q = evidence(&r, &r.honest.clone(), b"ek", &req);
        let ek = r.pca.verify_and_issue(&q, b"ek", &req).unwrap();
        assert!(ek.verify(&r.pca.public()));
        assert_eq!(ek.not_before, 1_000);
        assert_eq!(ek.not_after, 11_000);

        let req = r.pca.challenge(KeyRequest::Aik).unwrap();
        let q = evidence(&r, &r.honest.clone(), b"aik", &req);
        let aik = r.pca.issue_aik(&q, b"aik", Some(&ek), &req).unwrap();
        assert_eq!(aik.kind, KeyRequest::Aik);
        assert!(aik.verify(&r.pca.public()));
    }

    #[test]
    fn rejections_are_distinct() {
        let mut r = rig(true);
        let honest = r.honest;
        let req = r.pca.challenge(KeyRequest::Ek).unwrap();
        let mut q = evidence(&r, &honest, b"ek", &req);
        q.signature[0] ^= 1;
        assert_eq!(r.pca.verify_and_issue(&q, b"ek", &req), Err(Rejection::BadSignature.into()));

        let req = r.pca.challenge(KeyRequest::Ek).unwrap();
        let rogue = measure(b"vtpm patched", b"alice");
        let q = evidence(&r, &rogue, b"ek", &req);
        assert_eq!(r.pca.verify_and_issue(&q, b"ek", &req), Err(Rejection::UnknownMeasurement.into()));

        let old = r.pca.challenge(KeyRequest::Ek).unwrap();
        let q_old = evidence(&r, &honest, b"ek", &old);
        r.pca.verify_and_issue(&q_old, b"ek", &old).unwrap();
        // replay against the same nonce and against a new one
        assert_eq!(r.pca.verify_and_issue(&q_old, b"ek", &old), Err(Rejection::StaleNonce.into()));
        let new = r.pca.challenge(KeyRequest::Ek).unwrap();
        assert_eq!(r.pca.verify_and_issue(&q_old, b"ek", &new), Err(Rejection::StaleNonce.into()));
    }

    #[test]
    fn expired_challenge_is_stale() {
        let mut r = rig(true);
        let honest = r.honest;
        let req = r.pca.challenge(KeyRequest::Ek).unwrap();
        r.clock.advance(NONCE_TTL_MS + 1);
        let q = evidence(&r, &honest, b"ek", &req);
        assert_eq!(r.pca.verify_and_issue(&q, b"ek", &req), Err(Rejection::StaleNonce.into()));
    }

    #[test]
    fn aik_needs_good_ek_cert() {
        let mut r = rig(true);
        let honest = r.honest;
        let req = r.pca.challenge(KeyRequest::Ek).unwrap();
        let ek = r.pca.verify_and_issue(&evidence(&r, &honest, b"ek", &req), b"ek", &req).unwrap();

        let try_aik = |r: &mut Rig, cert: Option<&Certificate>| {
            let req = r.pca.challenge(KeyRequest::Aik).unwrap();
            let q = evidence(r, &honest, b"aik", &req);
            r.pca.issue_aik(&q, b"aik", cert, &req)
        };
        assert_eq!(try_aik(&mut r, None), Err(Rejection::BadEkCert.into()));
        let mut forged = ek.clone();
        forged.not_after += 1;
        assert_eq!(try_aik(&mut r, Some(&forged)), Err(Rejection::BadEkCert.into()));
        r.pca.revoke(ek.serial);
        assert_eq!(try_aik(&mut r, Some(&ek)), Err(Rejection::BadEkCert.into()));
    }

    #[test]
    fn unenforced_pca_accepts_rogue_quotes() {
        let mut r = rig(false);
        let req = r.pca.challenge(KeyRequest::Ek).unwrap();
        let rogue = measure(b"vtpm patched", b"mallory");
        let q = evidence(&r, &rogue, b"ek", &req);
        assert!(r.pca.verify_and_issue(&q, b"ek", &req).is_ok());
        // freshness is still enforced
        assert_eq!(r.pca.verify_and_issue(&q, b"ek", &req), Err(Rejection::StaleNonce.into()));
    }

    #[test]
    fn allowlist_text_roundtrip() {
        let mut p = PcaPolicy::default();
        p.allow([1; 32]);
        p.allow([2; 32]);
        let text = format!("# comment\n\n{}", p.to_text());
        assert_eq!(PcaPolicy::parse(&text).unwrap(), p);
        assert!(PcaPolicy::parse("abcd\n").is_err());
    }
}
