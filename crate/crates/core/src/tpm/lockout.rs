// SPDX-License-Identifier: Apache-2.0

//! Dictionary-attack lockout state machine.
//!
//! The counter update itself is delegated to a [`FailureLedger`] so the
//! rollback guard can mirror `failed_tries` into storage that survives a
//! snapshot restore. Recovery resets `failed_tries` to zero in one step once
//! the deadline passes.

use thiserror::Error;

use super::state::LockoutRecord;

/// A ledger could not record a transition. The instance must stop serving
/// auth-gated commands until an operator intervenes.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("rollback ledger fault: {0}")]
pub struct LedgerFault(pub String);

pub trait FailureLedger {
    /// Must increase `lockout.failed_tries` by at least one.
    fn on_auth_failure(&mut self, lockout: &mut LockoutRecord) -> Result<(), LedgerFault>;
    /// Must leave `lockout.failed_tries` at zero.
    fn on_lockout_recovery(&mut self, lockout: &mut LockoutRecord) -> Result<(), LedgerFault>;
}

/// No external mirror: the count lives only in TPM state.
#[derive(Debug, Default, Clone, Copy)]
pub struct LocalLedger;

impl FailureLedger for LocalLedger {
    fn on_auth_failure(&mut self, lockout: &mut LockoutRecord) -> Result<(), LedgerFault> {
        lockout.failed_tries += 1;
        Ok(())
    }

    fn on_lockout_recovery(&mut self, lockout: &mut LockoutRecord) -> Result<(), LedgerFault> {
        lockout.failed_tries = 0;
        Ok(())
    }
}

/// Sets the deadline if the count has reached the limit. Used after the
/// ledger changes `failed_tries` and after a restore re-synchronizes it.
pub fn derive_deadline(lockout: &mut LockoutRecord, now_ms: u64) {
    lockout.failed_tries = lockout.failed_tries.min(lockout.max_tries);
    if lockout.failed_tries == lockout.max_tries {
        if lockout.lockout_until.is_none() {
            lockout.lockout_until = Some(now_ms.saturating_add(lockout.recovery_interval_ms));
        }
    } else {
        lockout.lockout_until = None;
    }
}

pub fn record_auth_failure(
    lockout: &mut LockoutRecord,
    now_ms: u64,
    ledger: &mut dyn FailureLedger,
) -> Result<LockoutRecord, LedgerFault> {
    if !lockout.is_locked() {
        ledger.on_auth_failure(lockout)?;
        derive_deadline(lockout, now_ms);
    }
    Ok(lockout.clone())
}

pub fn lockout_tick(
    lockout: &mut LockoutRecord,
    now_ms: u64,
    ledger: &mut dyn FailureLedger,
) -> Result<LockoutRecord, LedgerFault> {
    if let Some(until) = lockout.lockout_until {
        if now_ms >= until {
            ledger.on_lockout_recovery(lockout)?;
            lockout.failed_tries = 0;
            lockout.lockout_until = None;
        }
    }
    Ok(lockout.clone())
}
