// SPDX-License-Identifier: Apache-2.0

//! The builtin attack scripts, one per threat plus the interrupted
//! software sync.

use super::{Event, FileRef, Goal, InstanceFile, Op, Scenario};
use crate::config::{DefenseConfig, LockoutConfig};

pub const NVRAM_REPLACEMENT: &str = "nvram-replacement";
pub const ROGUE_ATTESTATION: &str = "rogue-attestation";
pub const ROLLBACK_DICTIONARY: &str = "rollback-dictionary";
pub const CLOCK_MANIPULATION: &str = "clock-manipulation";
pub const SYNC_INTERRUPTION: &str = "sync-interruption";

pub const NAMES: [&str; 5] = [
    NVRAM_REPLACEMENT,
    ROGUE_ATTESTATION,
    ROLLBACK_DICTIONARY,
    CLOCK_MANIPULATION,
    SYNC_INTERRUPTION,
];

/// Restore cycles in the default rollback scripts.
pub const DEFAULT_CYCLES: u32 = 30;

const VICTIM: &str = "alice";
const ATTACKER: &str = "mallory";
const PIN: &[u8] = b"correct horse battery staple";

fn provision(user: &str) -> Event {
    Event::Provision { user: user.into() }
}

fn seal() -> Event {
    Event::Command {
        instance: VICTIM.into(),
        op: Op::SealSecret { auth: PIN.to_vec() },
    }
}

fn guess(n: u32) -> Event {
    Event::Command {
        instance: VICTIM.into(),
        op: Op::Guess {
            auth: format!("guess-{n:05}").into_bytes(),
        },
    }
}

fn scenario(name: &str, summary: &str, goals: Vec<Goal>, events: Vec<Event>) -> Scenario {
    Scenario {
        name: name.into(),
        summary: summary.into(),
        defense: DefenseConfig::full(),
        lockout: LockoutConfig::default(),
        goals,
        events,
    }
}

pub fn nvram_replacement() -> Scenario {
    let swap = |file| Event::FileSwap {
        a: FileRef::new(VICTIM, file),
        b: FileRef::new(ATTACKER, file),
    };
    scenario(
        NVRAM_REPLACEMENT,
        "steal the victim's NVRAM, boot it behind the attacker's VM, boot the victim's vTPM with the attacker's VM image",
        vec![Goal::PlaintextRecovered, Goal::MismatchedBoot],
        vec![
            provision(VICTIM),
            provision(ATTACKER),
            seal(),
            Event::Steal {
                file: FileRef::new(VICTIM, InstanceFile::Nvram),
            },
            swap(InstanceFile::Nvram),
            Event::Launch {
                instance: ATTACKER.into(),
            },
            swap(InstanceFile::Nvram),
            swap(InstanceFile::VmImage),
            Event::Launch {
                instance: VICTIM.into(),
            },
        ],
    )
}

pub fn rogue_attestation() -> Scenario {
    scenario(
        ROGUE_ATTESTATION,
        "obtain an EK certificate for a patched enclave and for a quote signed without the platform key",
        vec![Goal::RogueCertificate],
        vec![
            provision(VICTIM),
            Event::Attest {
                instance: VICTIM.into(),
            },
            Event::AttestRogue {
                instance: VICTIM.into(),
            },
            Event::ForgeQuote {
                instance: VICTIM.into(),
            },
        ],
    )
}

/// Two failures, snapshot, then `cycles` rounds of guess and restore.
pub fn rollback_dictionary(cycles: u32) -> Scenario {
    let mut events = vec![provision(VICTIM), seal(), guess(0), guess(1), snapshot()];
    for n in 0..cycles {
        events.push(guess(n + 2));
        events.push(restore());
    }
    scenario(
        ROLLBACK_DICTIONARY,
        "roll the vTPM back after each failed guess to reset the lockout counter",
        vec![Goal::GuessBudgetExceeded],
        events,
    )
}

/// As [`rollback_dictionary`] but the software ledger write is interrupted
/// before every guess.
pub fn sync_interruption(cycles: u32) -> Scenario {
    let mut events = vec![provision(VICTIM), seal(), guess(0), guess(1), snapshot()];
    for n in 0..cycles {
        events.push(Event::InterruptSync {
            instance: VICTIM.into(),
        });
        events.push(guess(n + 2));
        events.push(restore());
    }
    scenario(
        SYNC_INTERRUPTION,
        "suppress the failure-count sync, then roll back",
        vec![Goal::GuessBudgetExceeded],
        events,
    )
}

/// Exhaust the lockout, then push the host clock past the recovery
/// interval, repeatedly, without real time passing.
pub fn clock_manipulation(rounds: u32) -> Scenario {
    let lockout = LockoutConfig::default();
    let mut events = vec![provision(VICTIM), seal()];
    for r in 0..rounds {
        for k in 0..lockout.max_tries {
            events.push(guess(r * lockout.max_tries + k));
        }
        events.push(Event::SkewHostClock {
            ms: lockout.recovery_interval_ms as i64 + 1,
        });
    }
    scenario(
        CLOCK_MANIPULATION,
        "fast-forward the host clock to end the lockout early",
        vec![Goal::GuessBudgetExceeded],
        events,
    )
}

fn snapshot() -> Event {
    Event::Snapshot {
        instance: VICTIM.into(),
        tag: "two-failures".into(),
    }
}

fn restore() -> Event {
    Event::Restore {
        instance: VICTIM.into(),
        tag: "two-failures".into(),
    }
}

/// Every builtin scenario, set to the full defense configuration.
pub fn builtin_scenarios() -> Vec<Scenario> {
    NAMES.iter().map(|n| by_name(n).expect("listed names resolve")).collect()
}

pub fn by_name(name: &str) -> Option<Scenario> {
    Some(match name {
        NVRAM_REPLACEMENT => nvram_replacement(),
        ROGUE_ATTESTATION => rogue_attestation(),
        ROLLBACK_DICTIONARY => rollback_dictionary(DEFAULT_CYCLES),
        CLOCK_MANIPULATION => clock_manipulation(8),
        SYNC_INTERRUPTION => sync_interruption(DEFAULT_CYCLES),
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::run_scenario;

    #[test]
    fn five_valid_scenarios() {
        let all = builtin_scenarios();
        assert_eq!(all.len(), 5);
        for s in &all {
            s.validate().unwrap();
        }
        assert!(by_name("nope").is_none());
    }

    #[test]
    fn dictionary_attack_succeeds_without_rollback_defense() {
        let v = run_scenario(&rollback_dictionary(5).with_defense(DefenseConfig::none()), 1).unwrap();
        assert!(v.attack_succeeded, "{:#?}", v.checks);
        let v = run_scenario(&rollback_dictionary(5), 1).unwrap();
        assert!(!v.attack_succeeded, "{:#?}", v.checks);
    }

    #[test]
    fn interruption_beats_software_but_not_counter() {
        let v = run_scenario(&sync_interruption(5).with_defense(DefenseConfig::software()), 2).unwrap();
        assert!(v.attack_succeeded, "{:#?}", v.checks);
        let v = run_scenario(&sync_interruption(5).with_defense(DefenseConfig::full()), 2).unwrap();
        assert!(!v.attack_succeeded, "{:#?}", v.checks);
    }

    #[test]
    fn replacement_needs_binding_off() {
        let v = run_scenario(&nvram_replacement().with_defense(DefenseConfig::none()), 3).unwrap();
        assert!(v.checks.iter().all(|c| c.achieved), "{:#?}", v);
        let v = run_scenario(&nvram_replacement(), 3).unwrap();
        assert!(!v.attack_succeeded, "{:#?}", v);
    }

    #[test]
    fn deterministic_trace() {
        let s = clock_manipulation(2).with_defense(DefenseConfig::none());
        let a = run_scenario(&s, 9).unwrap();
        let b = run_scenario(&s, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.attack_succeeded);
    }
}
