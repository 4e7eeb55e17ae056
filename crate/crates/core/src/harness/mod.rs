// SPDX-License-Identifier: Apache-2.0

//! Scripted adversary against vTPM instances.
//!
//! A [`Scenario`] is an ordered event script run against one defense
//! configuration. The attacker may read and copy any file in an instance
//! directory, swap files between instances, snapshot and restore an
//! instance directory, interrupt the software ledger sync, skew the host
//! clock and run modified enclave code on the same platform. The platform
//! secret, counter store and ledger directory stay out of reach.
//!
//! Verdicts depend only on the script and the seed: every random value is
//! drawn from a seeded generator and time is virtual.

pub mod adversary;
pub mod builtin;
mod world;

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::config::{DefenseConfig, LockoutConfig};
use crate::instance::{BINDING_FILE, ENCLAVE_FILE, NVRAM_FILE, VM_IMAGE_FILE};
use crate::tpm::Command;

pub use builtin::builtin_scenarios;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("ERR_BAD_SCRIPT: {0}")]
    BadScript(String),
    #[error("harness environment: {0}")]
    Environment(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InstanceFile {
    Nvram,
    Enclave,
    Binding,
    VmImage,
}

impl InstanceFile {
    pub const ALL: [InstanceFile; 4] = [
        InstanceFile::Nvram,
        InstanceFile::Enclave,
        InstanceFile::Binding,
        InstanceFile::VmImage,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            InstanceFile::Nvram => NVRAM_FILE,
            InstanceFile::Enclave => ENCLAVE_FILE,
            InstanceFile::Binding => BINDING_FILE,
            InstanceFile::VmImage => VM_IMAGE_FILE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileRef {
    pub instance: String,
    pub file: InstanceFile,
}

impl FileRef {
    pub fn new(instance: &str, file: InstanceFile) -> Self {
        FileRef {
            instance: instance.to_string(),
            file,
        }
    }
}

impl fmt::Display for FileRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.instance, self.file.file_name())
    }
}

/// TPM-level actions a script can take on a running instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    /// Storage primary plus a sealed object holding the owner's secret.
    SealSecret { auth: Vec<u8> },
    /// Unseal the secret with a guessed authorization value.
    Guess { auth: Vec<u8> },
    Raw(Command),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    /// New user with a signed enclave, bound VM image and running instance
    /// of the same name.
    Provision { user: String },
    /// (Re)boot an instance from whatever files its directory holds.
    Launch { instance: String },
    Command { instance: String, op: Op },
    Snapshot { instance: String, tag: String },
    /// Stop the instance, put the snapshot's files back and boot it.
    Restore { instance: String, tag: String },
    FileSwap { a: FileRef, b: FileRef },
    InterruptSync { instance: String },
    AdvanceTime { ms: u64 },
    SkewHostClock { ms: i64 },
    /// Offline read of a file followed by a plaintext recovery attempt.
    Steal { file: FileRef },
    /// Honest EK and AIK certification of a running instance.
    Attest { instance: String },
    /// Certification attempt from a patched enclave on the same platform.
    AttestRogue { instance: String },
    /// Certification attempt with a quote signed by a non-platform key.
    ForgeQuote { instance: String },
    Repeat { times: u32, body: Vec<Event> },
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Event::Provision { user } => write!(f, "provision {user}"),
            Event::Launch { instance } => write!(f, "launch {instance}"),
            Event::Command { instance, op } => match op {
                Op::SealSecret { .. } => write!(f, "seal-secret {instance}"),
                Op::Guess { auth } => write!(f, "guess {instance} {}", hex::encode(auth)),
                Op::Raw(c) => write!(f, "command {instance} {:#x}", c.code),
            },
            Event::Snapshot { instance, tag } => write!(f, "snapshot {instance} {tag}"),
            Event::Restore { instance, tag } => write!(f, "restore {instance} {tag}"),
            Event::FileSwap { a, b } => write!(f, "swap {a} {b}"),
            Event::InterruptSync { instance } => write!(f, "interrupt-sync {instance}"),
            Event::AdvanceTime { ms } => write!(f, "advance-time {ms}"),
            Event::SkewHostClock { ms } => write!(f, "skew-host-clock {ms}"),
            Event::Steal { file } => write!(f, "steal {file}"),
            Event::Attest { instance } => write!(f, "attest {instance}"),
            Event::AttestRogue { instance } => write!(f, "attest-rogue {instance}"),
            Event::ForgeQuote { instance } => write!(f, "forge-quote {instance}"),
            Event::Repeat { times, body } => write!(f, "repeat {times}x{}", body.len()),
        }
    }
}

/// What the attacker is trying to achieve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Goal {
    /// Another user's sealed secret ends up in attacker hands.
    PlaintextRecovered,
    /// An instance boots past every check with files it was not provisioned with.
    MismatchedBoot,
    /// More than `max_tries` authorization guesses evaluated within one
    /// recovery interval of real time.
    GuessBudgetExceeded,
    /// A certificate issued for a patched enclave or a forged quote.
    RogueCertificate,
}

impl Goal {
    pub fn name(self) -> &'static str {
        match self {
            Goal::PlaintextRecovered => "plaintext_recovered",
            Goal::MismatchedBoot => "mismatched_boot",
            Goal::GuessBudgetExceeded => "guess_budget_exceeded",
            Goal::RogueCertificate => "rogue_certificate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub name: String,
    pub summary: String,
    pub defense: DefenseConfig,
    pub lockout: LockoutConfig,
    /// The attack succeeds if any of these is achieved.
    pub goals: Vec<Goal>,
    pub events: Vec<Event>,
}

impl Scenario {
    pub fn with_defense(mut self, defense: DefenseConfig) -> Self {
        self.defense = defense;
        self
    }

    /// Static well-formedness: names are provisioned before use, snapshots
    /// are taken before they are restored, guesses follow a sealed secret.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let mut users = BTreeSet::new();
        let mut snaps = BTreeSet::new();
        let mut sealed = BTreeSet::new();
        if self.goals.is_empty() {
            return Err(HarnessError::BadScript(format!("{}: no goals", self.name)));
        }
        validate_events(&self.events, &mut users, &mut snaps, &mut sealed)
    }
}

fn validate_events(
    events: &[Event],
    users: &mut BTreeSet<String>,
    snaps: &mut BTreeSet<(String, String)>,
    sealed: &mut BTreeSet<String>,
) -> Result<(), HarnessError> {
    let bad = |msg: String| Err(HarnessError::BadScript(msg));
    for ev in events {
        let known = |name: &String| users.contains(name);
        match ev {
            Event::Provision { user } => {
                if user.is_empty() || user.contains(|c: char| !c.is_ascii_alphanumeric() && c != '-') {
                    return bad(format!("invalid user name {user:?}"));
                }
                if !users.insert(user.clone()) {
                    return bad(format!("user {user} provisioned twice"));
                }
            }
            Event::Launch { instance }
            | Event::InterruptSync { instance }
            | Event::Attest { instance }
            | Event::AttestRogue { instance }
            | Event::ForgeQuote { instance } => {
                if !known(instance) {
                    return bad(format!("{ev}: unknown instance"));
                }
            }
            Event::Command { instance, op } => {
                if !known(instance) {
                    return bad(format!("{ev}: unknown instance"));
                }
                match op {
                    Op::SealSecret { .. } => {
                        sealed.insert(instance.clone());
                    }
                    Op::Guess { .. } if !sealed.contains(instance) => {
                        return bad(format!("{ev}: no sealed secret yet"));
                    }
                    _ => {}
                }
            }
            Event::Snapshot { instance, tag } => {
                if !known(instance) {
                    return bad(format!("{ev}: unknown instance"));
                }
                snaps.insert((instance.clone(), tag.clone()));
            }
            Event::Restore { instance, tag } => {
                if !snaps.contains(&(instance.clone(), tag.clone())) {
                    return bad(format!("{ev}: no such snapshot"));
                }
            }
            Event::FileSwap { a, b } => {
                if !known(&a.instance) || !known(&b.instance) {
                    return bad(format!("{ev}: unknown instance"));
                }
            }
            Event::Steal { file } => {
                if !known(&file.instance) {
                    return bad(format!("{ev}: unknown instance"));
                }
            }
            Event::AdvanceTime { .. } | Event::SkewHostClock { .. } => {}
            Event::Repeat { times, body } => {
                if *times == 0 || body.is_empty() {
                    return bad(format!("{ev}: empty repeat"));
                }
                validate_events(body, users, snaps, sealed)?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckOutcome {
    pub goal: Goal,
    pub achieved: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub scenario: String,
    pub defense: &'static str,
    pub seed: u64,
    pub attack_succeeded: bool,
    pub checks: Vec<CheckOutcome>,
    pub trace: Vec<String>,
}

/// Runs `scenario` in a scratch directory that is removed afterwards.
pub fn run_scenario(scenario: &Scenario, seed: u64) -> Result<Verdict, HarnessError> {
    let dir = tempfile::tempdir().map_err(|e| HarnessError::Environment(e.to_string()))?;
    run_scenario_in(scenario, seed, dir.path())
}

/// Runs `scenario` with `dir` as the workspace root. The directory should
/// be empty.
pub fn run_scenario_in(scenario: &Scenario, seed: u64, dir: &Path) -> Result<Verdict, HarnessError> {
    scenario.validate()?;
    let mut world = world::World::new(dir, scenario, seed)?;
    world.run(&scenario.events)?;
    Ok(world.verdict(scenario, seed))
}

/// The largest number of timestamps inside any half-open window
/// `[t, t + window_ms)`. `times` must be sorted.
pub fn max_in_window(times: &[u64], window_ms: u64) -> usize {
    let mut best = 0;
    let mut lo = 0;
    for hi in 0..times.len() {
        while times[hi] - times[lo] >= window_ms {
            lo += 1;
        }
        best = best.max(hi - lo + 1);
    }
    best
}

/// One line per verdict:
///
/// ```text
/// scenario=<name> defense=<none|software|full|custom> seed=<n> attack_succeeded=<bool> checks=<goal>:<bool>[,...] events=<n>
/// ```
pub fn report(verdicts: &[Verdict]) -> String {
    let mut out = String::new();
    for v in verdicts {
        let checks: Vec<String> = v
            .checks
            .iter()
            .map(|c| format!("{}:{}", c.goal.name(), c.achieved))
            .collect();
        out.push_str(&format!(
            "scenario={} defense={} seed={} attack_succeeded={} checks={} events={}\n",
            v.scenario,
            v.defense,
            v.seed,
            v.attack_succeeded,
            checks.join(","),
            v.trace.len()
        ));
    }
    out
}
