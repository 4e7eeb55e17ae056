// SPDX-License-Identifier: Apache-2.0

//! The simulated cloud a scenario runs in.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::adversary::{forged_certificate_request, patched_code, recover_plaintexts, ATTACKER_KEY};
use super::{max_in_window, CheckOutcome, Event, FileRef, Goal, HarnessError, InstanceFile, Op, Scenario, Verdict};
use crate::attest::flow::request_certificate;
use crate::attest::{
    attest_instance, AttestOptions, InProcess, KeyRequest, Pca, PcaConfig, PcaPolicy, VerificationService,
};
use crate::clock::{ClockConfig, ClockHandle, HostClock, TrustedClock, VirtualTicker};
use crate::config::{AttestationConfig, DefenseConfig};
use crate::enclave::{measure, Platform, TimeSource, VirtualTime};
use crate::instance::{install, Cloud, DirStorage, Environment, InstanceOptions, VtpmInstance, VTPM_CODE};
use crate::nvram::binding::UserKey;
use crate::nvram::{ChannelKey, Registry};
use crate::tpm::state::{Hierarchy, KeyKind};
use crate::tpm::wire::{build, parse};
use crate::tpm::TpmError;

/// Virtual start time; leaves room for negative host clock skew.
const START_MS: u64 = 1_000_000_000;

/// Host time as the untrusted OS reports it.
struct HostTime {
    base: VirtualTime,
    skew: Arc<AtomicI64>,
}

impl TimeSource for HostTime {
    fn now_ms(&self) -> u64 {
        (self.base.now_ms() as i64).saturating_add(self.skew.load(Ordering::SeqCst)).max(0) as u64
    }
}

struct User {
    key: UserKey,
    secret: Vec<u8>,
}

struct Slot {
    running: Option<VtpmInstance>,
    /// Which user each file in the directory was provisioned for.
    provenance: BTreeMap<InstanceFile, String>,
    secret_handle: Option<u32>,
}

struct Snap {
    files: BTreeMap<InstanceFile, Option<Vec<u8>>>,
    provenance: BTreeMap<InstanceFile, String>,
    secret_handle: Option<u32>,
}

pub(super) struct World {
    root: PathBuf,
    defense: DefenseConfig,
    options: InstanceOptions,
    time: VirtualTime,
    skew: Arc<AtomicI64>,
    env: Environment,
    provider: UserKey,
    users: BTreeMap<String, User>,
    slots: BTreeMap<String, Slot>,
    snapshots: BTreeMap<(String, String), Snap>,
    pca: Pca,
    accepted_guesses: Vec<u64>,
    recovered: Vec<String>,
    mismatched: Vec<String>,
    rogue_certs: Vec<String>,
    trace: Vec<String>,
}

fn env_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Environment(e.to_string())
}

fn tpm_outcome(r: Result<Vec<u8>, TpmError>) -> String {
    match r {
        Ok(_) => "TPM_RC_SUCCESS".to_string(),
        Err(e) => e.name().to_string(),
    }
}

impl World {
    pub(super) fn new(root: &Path, scenario: &Scenario, seed: u64) -> Result<Self, HarnessError> {
        let defense = scenario.defense;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut bytes = || {
            let mut b = [0u8; 32];
            rng.fill_bytes(&mut b);
            b
        };
        let time = VirtualTime::starting_at(START_MS);
        let skew = Arc::new(AtomicI64::new(0));
        let platform = Arc::new(Platform::ephemeral(Arc::new(time.clone()), seed));
        let clock: Arc<dyn ClockHandle> = if defense.trusted_clock {
            Arc::new(TrustedClock::new(
                platform.clone(),
                Arc::new(VirtualTicker::new(time.clone(), 1000)),
                ClockConfig::default(),
            ))
        } else {
            Arc::new(HostClock::new(Arc::new(HostTime {
                base: time.clone(),
                skew: skew.clone(),
            })))
        };
        let cloud = defense.nvram_binding.then(|| Cloud {
            registry: Registry::open(root.join("cloud/registry.txt")),
            channel_key: ChannelKey(bytes()),
        });
        let ledger_dir = root.join("ledger");
        fs::create_dir_all(&ledger_dir).map_err(env_err)?;
        let env = Environment {
            platform: platform.clone(),
            clock,
            ledger_dir: Some(ledger_dir),
            cloud,
        };
        let mut policy = PcaPolicy::default();
        policy.allow(measure(VTPM_CODE, &[]).mrenclave);
        let pca = Pca::new(
            PcaConfig {
                signing_key: bytes(),
                policy,
                enforce: defense.attestation,
                validity_ms: AttestationConfig::default().cert_validity_ms,
            },
            VerificationService::new(platform.group_public()),
            Arc::new(HostClock::new(Arc::new(time.clone()))),
            bytes(),
        );
        let provider = UserKey::from_bytes(&bytes());
        let options = InstanceOptions {
            lockout: scenario.lockout,
            ..InstanceOptions::for_defense(defense)
        };
        Ok(World {
            root: root.to_path_buf(),
            defense,
            options,
            time,
            skew,
            env,
            provider,
            users: BTreeMap::new(),
            slots: BTreeMap::new(),
            snapshots: BTreeMap::new(),
            pca,
            accepted_guesses: Vec::new(),
            recovered: Vec::new(),
            mismatched: Vec::new(),
            rogue_certs: Vec::new(),
            trace: Vec::new(),
        })
    }

    fn dir(&self, instance: &str) -> PathBuf {
        self.root.join("instances").join(instance)
    }

    fn read(&self, f: &FileRef) -> Option<Vec<u8>> {
        fs::read(self.dir(&f.instance).join(f.file.file_name())).ok()
    }

    fn put(&self, f: &FileRef, data: Option<&[u8]>) -> io::Result<()> {
        let path = self.dir(&f.instance).join(f.file.file_name());
        match data {
            Some(d) => fs::write(path, d),
            None => match fs::remove_file(path) {
                Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
                _ => Ok(()),
            },
        }
    }

    fn slot(&mut self, instance: &str) -> &mut Slot {
        self.slots.get_mut(instance).expect("validated script names only provisioned instances")
    }

    fn signer(&self, user: &str) -> &UserKey {
        // without binding every enclave is signed by the provider
        if self.defense.nvram_binding {
            &self.users[user].key
        } else {
            &self.provider
        }
    }

    pub(super) fn run(&mut self, events: &[Event]) -> Result<(), HarnessError> {
        for ev in events {
            if let Event::Repeat { times, body } = ev {
                for _ in 0..*times {
                    self.run(body)?;
                }
                continue;
            }
            let outcome = self.step(ev)?;
            let line = format!("{:06} t={} {ev} -> {outcome}", self.trace.len(), self.time.now_ms() - START_MS);
            self.trace.push(line);
        }
        Ok(())
    }

    fn step(&mut self, ev: &Event) -> Result<String, HarnessError> {
        Ok(match ev {
            Event::Provision { user } => self.provision(user)?,
            Event::Launch { instance } => {
                self.slot(instance).running = None;
                self.launch(instance)
            }
            Event::Command { instance, op } => self.command(instance, op),
            Event::Snapshot { instance, tag } => {
                let files = InstanceFile::ALL
                    .into_iter()
                    .map(|f| (f, self.read(&FileRef::new(instance, f))))
                    .collect();
                let slot = &self.slots[instance];
                let snap = Snap {
                    files,
                    provenance: slot.provenance.clone(),
                    secret_handle: slot.secret_handle,
                };
                self.snapshots.insert((instance.clone(), tag.clone()), snap);
                "saved".into()
            }
            Event::Restore { instance, tag } => {
                self.slot(instance).running = None;
                let snap = &self.snapshots[&(instance.clone(), tag.clone())];
                for (f, data) in &snap.files {
                    self.put(&FileRef::new(instance, *f), data.as_deref()).map_err(env_err)?;
                }
                let (provenance, handle) = (snap.provenance.clone(), snap.secret_handle);
                let slot = self.slot(instance);
                slot.provenance = provenance;
                slot.secret_handle = handle;
                self.launch(instance)
            }
            Event::FileSwap { a, b } => {
                let (da, db) = (self.read(a), self.read(b));
                self.put(a, db.as_deref()).map_err(env_err)?;
                self.put(b, da.as_deref()).map_err(env_err)?;
                let pa = self.slots[&a.instance].provenance.get(&a.file).cloned();
                let pb = self.slots[&b.instance].provenance.get(&b.file).cloned();
                for (slot, file, p) in [(&a.instance, a.file, pb), (&b.instance, b.file, pa)] {
                    let prov = &mut self.slot(slot).provenance;
                    match p {
                        Some(p) => prov.insert(file, p),
                        None => prov.remove(&file),
                    };
                }
                "swapped".into()
            }
            Event::InterruptSync { instance } => match &mut self.slot(instance).running {
                Some(i) => {
                    i.interrupt_next_sync();
                    "armed".into()
                }
                None => "instance down".into(),
            },
            Event::AdvanceTime { ms } => {
                self.time.advance(*ms);
                "ok".into()
            }
            Event::SkewHostClock { ms } => {
                let total = self.skew.fetch_add(*ms, Ordering::SeqCst) + ms;
                format!("host skew {total} ms")
            }
            Event::Steal { file } => {
                let data = self.read(file).unwrap_or_default();
                let found = recover_plaintexts(&data);
                let mut hits = 0;
                for p in &found {
                    if let Some((owner, _)) = self.users.iter().find(|(_, u)| &u.secret == p) {
                        hits += 1;
                        self.recovered.push(format!("{owner}'s secret from stolen {file}"));
                    }
                }
                format!("{} objects unwrapped, {hits} secrets", found.len())
            }
            Event::Attest { instance } => {
                let opts = AttestOptions {
                    key_bits: 1024,
                    ..AttestOptions::default()
                };
                let Some(inst) = self.slots.get_mut(instance).and_then(|s| s.running.as_mut()) else {
                    return Ok("instance down".into());
                };
                match attest_instance(inst, &mut InProcess::new(&mut self.pca), &opts) {
                    Ok(a) => format!("EK serial {} AIK serial {}", a.ek_cert.serial, a.aik_cert.serial),
                    Err(e) => e.to_string(),
                }
            }
            Event::AttestRogue { instance } => {
                let signer = self.signer(instance).public();
                let rogue = measure(&patched_code(), &signer);
                let platform = self.env.platform.clone();
                let res = request_certificate(
                    &platform,
                    &rogue,
                    ATTACKER_KEY,
                    KeyRequest::Ek,
                    None,
                    &mut InProcess::new(&mut self.pca),
                );
                match res {
                    Ok(c) => {
                        self.rogue_certs.push(format!("EK serial {} for patched enclave", c.serial));
                        "certificate issued".into()
                    }
                    Err(e) => e.to_string(),
                }
            }
            Event::ForgeQuote { instance } => {
                let honest = measure(VTPM_CODE, &self.signer(instance).public());
                match forged_certificate_request(&mut InProcess::new(&mut self.pca), &honest, ATTACKER_KEY) {
                    Ok(c) => {
                        self.rogue_certs.push(format!("EK serial {} for forged quote", c.serial));
                        "certificate issued".into()
                    }
                    Err(e) => e.to_string(),
                }
            }
            Event::Repeat { .. } => unreachable!("expanded by run"),
        })
    }

    fn provision(&mut self, user: &str) -> Result<String, HarnessError> {
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&self.env.platform.random_bytes::<32>());
        self.users.insert(
            user.to_string(),
            User {
                key: UserKey::from_bytes(&seed),
                secret: format!("disk encryption key of {user}").into_bytes(),
            },
        );
        let mut storage = DirStorage::new(self.dir(user));
        let vm = format!("vm image of {user}").into_bytes();
        let signer = self.signer(user).clone();
        let p = install(&mut storage, &signer, &vm, VTPM_CODE).map_err(env_err)?;
        if let Some(cloud) = &self.env.cloud {
            cloud.register(user, &p).map_err(env_err)?;
        }
        let inst = VtpmInstance::create(self.env.clone(), user, Box::new(storage), self.options).map_err(env_err)?;
        self.slots.insert(
            user.to_string(),
            Slot {
                running: Some(inst),
                provenance: InstanceFile::ALL.into_iter().map(|f| (f, user.to_string())).collect(),
                secret_handle: None,
            },
        );
        Ok("created".into())
    }

    fn launch(&mut self, name: &str) -> String {
        let storage = Box::new(DirStorage::new(self.dir(name)));
        match VtpmInstance::launch(self.env.clone(), name, storage, self.options) {
            Ok(inst) => {
                let outcome = match inst.halted() {
                    Some(why) => format!("halted: {why}"),
                    None => {
                        let foreign: Vec<String> = self.slots[name]
                            .provenance
                            .iter()
                            .filter(|(_, owner)| owner.as_str() != name)
                            .map(|(f, owner)| format!("{} of {owner}", f.file_name()))
                            .collect();
                        if foreign.is_empty() {
                            "booted".into()
                        } else {
                            let d = format!("{name} booted with {}", foreign.join(", "));
                            self.mismatched.push(d.clone());
                            d
                        }
                    }
                };
                self.slot(name).running = Some(inst);
                outcome
            }
            Err(e) => format!("refused: {e}"),
        }
    }

    fn command(&mut self, instance: &str, op: &Op) -> String {
        let secret = self.users[instance].secret.clone();
        let now = self.time.now_ms();
        let slot = self.slots.get_mut(instance).expect("validated");
        let Some(inst) = slot.running.as_mut() else {
            return "instance down".into();
        };
        match op {
            Op::SealSecret { auth } => {
                let parent = build::create_primary(Hierarchy::OWNER_HANDLE, &[], KeyKind::AesSymmetric, 256, b"storage", &[]);
                let res = inst.execute(&parent).into_result().and_then(|p| {
                    let (ph, _) = parse::created(&p)?;
                    let sealed = inst.execute(&build::seal(ph, &[], &secret, auth, &[])).into_result()?;
                    Ok(parse::created(&sealed)?.0)
                });
                match res {
                    Ok(h) => {
                        slot.secret_handle = Some(h);
                        format!("sealed as {h:#x}")
                    }
                    Err(e) => e.name().into(),
                }
            }
            Op::Guess { auth } => {
                let handle = slot.secret_handle.unwrap_or(0);
                let resp = inst.execute(&build::unseal(handle, auth));
                let res = resp.into_result();
                if matches!(res, Ok(_) | Err(TpmError::Auth)) {
                    self.accepted_guesses.push(now);
                }
                if let Ok(payload) = &res {
                    if let Ok(plain) = parse::bytes(payload) {
                        if let Some((owner, _)) = self.users.iter().find(|(o, u)| u.secret == plain && o.as_str() != instance) {
                            self.recovered.push(format!("{owner}'s secret unsealed on {instance}"));
                        }
                    }
                }
                tpm_outcome(res)
            }
            Op::Raw(cmd) => tpm_outcome(inst.execute(cmd).into_result()),
        }
    }

    pub(super) fn verdict(self, scenario: &Scenario, seed: u64) -> Verdict {
        let budget = max_in_window(&self.accepted_guesses, scenario.lockout.recovery_interval_ms);
        let first = |v: &[String]| v.first().cloned().unwrap_or_else(|| "none".into());
        let checks: Vec<CheckOutcome> = scenario
            .goals
            .iter()
            .map(|&goal| {
                let (achieved, detail) = match goal {
                    Goal::PlaintextRecovered => (!self.recovered.is_empty(), first(&self.recovered)),
                    Goal::MismatchedBoot => (!self.mismatched.is_empty(), first(&self.mismatched)),
                    Goal::GuessBudgetExceeded => (
                        budget > scenario.lockout.max_tries as usize,
                        format!(
                            "{budget} guesses evaluated within one {} ms window, limit {}",
                            scenario.lockout.recovery_interval_ms, scenario.lockout.max_tries
                        ),
                    ),
                    Goal::RogueCertificate => (!self.rogue_certs.is_empty(), first(&self.rogue_certs)),
                };
                CheckOutcome { goal, achieved, detail }
            })
            .collect();
        Verdict {
            scenario: scenario.name.clone(),
            defense: scenario.defense.name(),
            seed,
            attack_succeeded: checks.iter().any(|c| c.achieved),
            checks,
            trace: self.trace,
        }
    }
}
