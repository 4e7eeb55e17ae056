// SPDX-License-Identifier: Apache-2.0

//! Host time sources and the coarse platform clock.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

/// Millisecond time as seen by the simulated hardware.
pub trait TimeSource: Send + Sync {
    fn now_ms(&self) -> u64;
}

/// Manually advanced time for tests and scenarios.
#[derive(Debug, Clone, Default)]
pub struct VirtualTime(Arc<AtomicU64>);

impl VirtualTime {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn starting_at(ms: u64) -> Self {
        VirtualTime(Arc::new(AtomicU64::new(ms)))
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl TimeSource for VirtualTime {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

/// Process-local monotonic time.
#[derive(Debug, Clone)]
pub struct MonotonicTime(Instant);

impl MonotonicTime {
    pub fn new() -> Self {
        MonotonicTime(Instant::now())
    }
}

impl Default for MonotonicTime {
    fn default() -> Self {
        Self::new()
    }
}

impl TimeSource for MonotonicTime {
    fn now_ms(&self) -> u64 {
        self.0.elapsed().as_millis() as u64
    }
}

/// Milliseconds since the Unix epoch; survives process restarts.
#[derive(Debug, Clone, Copy, Default)]
pub struct WallTime;

impl TimeSource for WallTime {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Epoch {
    pub nonce: u64,
    pub start_ms: u64,
}

#[derive(Debug)]
struct EpochState {
    epoch: Epoch,
    last_seconds: u64,
}

/// Coarse trusted time: whole seconds relative to a reference point, plus a
/// nonce that changes whenever the reference is lost.
pub struct PlatformClock {
    source: Arc<dyn TimeSource>,
    state: Mutex<EpochState>,
}

impl fmt::Debug for PlatformClock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PlatformClock")
            .field("epoch", &self.epoch())
            .finish()
    }
}

impl PlatformClock {
    /// Starts a new epoch at the source's current time.
    pub fn new(source: Arc<dyn TimeSource>, nonce: u64) -> Self {
        let start_ms = source.now_ms();
        Self::resume(source, Epoch { nonce, start_ms })
    }

    /// Continues a previously recorded epoch.
    pub fn resume(source: Arc<dyn TimeSource>, epoch: Epoch) -> Self {
        PlatformClock {
            source,
            state: Mutex::new(EpochState {
                epoch,
                last_seconds: 0,
            }),
        }
    }

    pub fn epoch(&self) -> Epoch {
        self.state.lock().expect("clock poisoned").epoch
    }

    pub fn source(&self) -> &Arc<dyn TimeSource> {
        &self.source
    }

    /// `(epoch_nonce, seconds since the epoch reference)`.
    pub fn platform_time(&self) -> (u64, u64) {
        let mut st = self.state.lock().expect("clock poisoned");
        let elapsed = self.source.now_ms().saturating_sub(st.epoch.start_ms);
        // A host source stepping backwards must not move trusted time back.
        st.last_seconds = st.last_seconds.max(elapsed / 1000);
        (st.epoch.nonce, st.last_seconds)
    }

    /// Loses the reference point: new nonce, seconds restart from zero.
    pub fn reset(&self, new_nonce: u64) {
        let mut st = self.state.lock().expect("clock poisoned");
        st.epoch = Epoch {
            nonce: new_nonce,
            start_ms: self.source.now_ms(),
        };
        st.last_seconds = 0;
    }
}
