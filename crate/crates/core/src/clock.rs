// SPDX-License-Identifier: Apache-2.0

//! Millisecond trusted clock.
//!
//! The platform only offers whole seconds plus an epoch nonce. A tick counter
//! driven by a dedicated execution context inside the enclave supplies the
//! sub-second part, and the clock re-reads the platform time every
//! `correction_interval_ms` to keep the two in step:
//!
//! * derived time behind platform time: step forward to the platform value;
//! * derived time more than one platform granule ahead: keep the current
//!   value and slow the tick scale to [`SLEW_PPM`] until platform time
//!   catches up.
//!
//! Derived time therefore never moves backwards within an epoch. An epoch
//! nonce change is reported as [`ClockError::EpochChanged`] before any
//! timestamp from the new epoch is handed out.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::enclave::{Platform, PlatformClock, VirtualTime, TimeSource};

/// Tick scale applied while derived time is ahead of platform time.
pub const SLEW_PPM: u64 = 800_000;
const UNITY_PPM: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ClockError {
    #[error("platform epoch changed (recorded nonce {recorded:#x}, now {current:#x}); re-anchor required")]
    EpochChanged { recorded: u64, current: u64 },
}

/// Millisecond time source consumed by TPM command handlers.
pub trait ClockHandle: Send + Sync {
    fn now_ms(&self) -> Result<u64, ClockError>;
}

/// Coarse `(epoch_nonce, seconds)` source.
pub trait CoarseTime: Send + Sync {
    fn platform_time(&self) -> (u64, u64);
}

impl CoarseTime for PlatformClock {
    fn platform_time(&self) -> (u64, u64) {
        PlatformClock::platform_time(self)
    }
}

impl CoarseTime for Platform {
    fn platform_time(&self) -> (u64, u64) {
        Platform::platform_time(self)
    }
}

pub trait TickSource: Send + Sync {
    fn ticks(&self) -> u64;
}

/// Ticks derived from virtual time with an optional rate error, for
/// deterministic tests.
#[derive(Debug, Clone)]
pub struct VirtualTicker {
    time: VirtualTime,
    rate_hz: u64,
    drift_ppm: i64,
}

impl VirtualTicker {
    pub fn new(time: VirtualTime, rate_hz: u64) -> Self {
        Self::with_drift(time, rate_hz, 0)
    }

    /// `drift_ppm` of +100_000 makes the ticker run 10% fast.
    pub fn with_drift(time: VirtualTime, rate_hz: u64, drift_ppm: i64) -> Self {
        assert!(drift_ppm > -(UNITY_PPM as i64), "ticker cannot run backwards");
        VirtualTicker {
            time,
            rate_hz,
            drift_ppm,
        }
    }
}

impl TickSource for VirtualTicker {
    fn ticks(&self) -> u64 {
        let scale = (UNITY_PPM as i64 + self.drift_ppm) as u128;
        (self.time.now_ms() as u128 * self.rate_hz as u128 * scale / (1000 * UNITY_PPM as u128)) as u64
    }
}

/// A counter bumped by hand.
#[derive(Debug, Clone, Default)]
pub struct ManualTicker(Arc<AtomicU64>);

impl ManualTicker {
    pub fn tick(&self, n: u64) {
        self.0.fetch_add(n, Ordering::SeqCst);
    }
}

impl TickSource for ManualTicker {
    fn ticks(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

/// Background thread that loops and advances an atomic tick counter at the
/// configured rate.
#[derive(Debug)]
pub struct ThreadTicker {
    counter: Arc<AtomicU64>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl ThreadTicker {
    pub fn spawn(rate_hz: u64) -> Self {
        let counter = Arc::new(AtomicU64::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let handle = {
            let counter = counter.clone();
            let stop = stop.clone();
            let period = Duration::from_nanos(1_000_000_000 / rate_hz.max(1));
            thread::Builder::new()
                .name("trusted-clock-ticker".into())
                .spawn(move || {
                    let start = Instant::now();
                    while !stop.load(Ordering::Relaxed) {
                        thread::sleep(period);
                        // Catch up on oversleeps so the rate stays constant.
                        let due = (start.elapsed().as_nanos() * rate_hz as u128 / 1_000_000_000) as u64;
                        counter.fetch_max(due, Ordering::SeqCst);
                    }
                })
                .expect("spawn ticker thread")
        };
        ThreadTicker {
            counter,
            stop,
            handle: Some(handle),
        }
    }
}

impl TickSource for ThreadTicker {
    fn ticks(&self) -> u64 {
        self.counter.load(Ordering::SeqCst)
    }
}

impl Drop for ThreadTicker {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClockConfig {
    pub tick_rate_hz: u64,
    pub correction_interval_ms: u64,
}

impl Default for ClockConfig {
    fn default() -> Self {
        ClockConfig {
            tick_rate_hz: 1000,
            correction_interval_ms: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClockState {
    pub last_platform_read: (u64, u64),
    pub tick_count: u64,
    pub tick_rate_hz: u64,
    pub last_correction_tick: u64,
    anchor_ms: u64,
    anchor_tick: u64,
    scale_ppm: u64,
    last_returned: u64,
}

impl ClockState {
    pub fn anchor_ms(&self) -> u64 {
        self.anchor_ms
    }

    pub fn is_slewing(&self) -> bool {
        self.scale_ppm != UNITY_PPM
    }

    fn derived(&self, ticks: u64) -> u64 {
        let elapsed = ticks.saturating_sub(self.anchor_tick) as u128;
        let ms = elapsed * 1000 * self.scale_ppm as u128 / (self.tick_rate_hz as u128 * UNITY_PPM as u128);
        (self.anchor_ms + ms as u64).max(self.last_returned)
    }
}

pub struct TrustedClock {
    coarse: Arc<dyn CoarseTime>,
    ticker: Arc<dyn TickSource>,
    config: ClockConfig,
    state: Mutex<ClockState>,
}

impl std::fmt::Debug for TrustedClock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrustedClock")
            .field("config", &self.config)
            .field("state", &self.state())
            .finish()
    }
}

impl TrustedClock {
    /// Anchors at the current platform reading.
    pub fn new(coarse: Arc<dyn CoarseTime>, ticker: Arc<dyn TickSource>, config: ClockConfig) -> Self {
        assert!(config.tick_rate_hz >= 1000, "millisecond resolution needs >= 1 kHz ticks");
        let (nonce, secs) = coarse.platform_time();
        let ticks = ticker.ticks();
        TrustedClock {
            coarse,
            ticker,
            config,
            state: Mutex::new(ClockState {
                last_platform_read: (nonce, secs),
                tick_count: ticks,
                tick_rate_hz: config.tick_rate_hz,
                last_correction_tick: ticks,
                anchor_ms: secs * 1000,
                anchor_tick: ticks,
                scale_ppm: UNITY_PPM,
                last_returned: 0,
            }),
        }
    }

    pub fn config(&self) -> ClockConfig {
        self.config
    }

    pub fn state(&self) -> ClockState {
        *self.state.lock().expect("clock poisoned")
    }

    fn correction_interval_ticks(&self) -> u64 {
        (self.config.correction_interval_ms * self.config.tick_rate_hz / 1000).max(1)
    }

    fn correct_locked(&self, st: &mut ClockState, ticks: u64) -> Result<(), ClockError> {
        let (nonce, secs) = self.coarse.platform_time();
        if nonce != st.last_platform_read.0 {
            return Err(ClockError::EpochChanged {
                recorded: st.last_platform_read.0,
                current: nonce,
            });
        }
        let derived = st.derived(ticks);
        let platform_ms = secs * 1000;
        if derived < platform_ms {
            st.anchor_ms = platform_ms;
            st.scale_ppm = UNITY_PPM;
        } else if derived > platform_ms + 1000 {
            st.anchor_ms = derived;
            st.scale_ppm = SLEW_PPM;
        } else {
            st.anchor_ms = derived;
            st.scale_ppm = UNITY_PPM;
        }
        st.anchor_tick = ticks;
        st.last_correction_tick = ticks;
        st.tick_count = ticks;
        st.last_platform_read = (nonce, secs);
        st.last_returned = st.last_returned.max(st.anchor_ms);
        Ok(())
    }

    /// Milliseconds since the epoch reference; corrects lazily once per
    /// correction interval.
    pub fn now_ms(&self) -> Result<u64, ClockError> {
        let mut st = self.state.lock().expect("clock poisoned");
        let ticks = self.ticker.ticks().max(st.tick_count);
        if ticks - st.last_correction_tick >= self.correction_interval_ticks() {
            self.correct_locked(&mut st, ticks)?;
        } else {
            let (nonce, _) = self.coarse.platform_time();
            if nonce != st.last_platform_read.0 {
                return Err(ClockError::EpochChanged {
                    recorded: st.last_platform_read.0,
                    current: nonce,
                });
            }
        }
        st.tick_count = ticks;
        let out = st.derived(ticks);
        st.last_returned = out;
        Ok(out)
    }

    /// Forces a correction against the platform clock now.
    pub fn correct(&self) -> Result<ClockState, ClockError> {
        let mut st = self.state.lock().expect("clock poisoned");
        let ticks = self.ticker.ticks().max(st.tick_count);
        self.correct_locked(&mut st, ticks)?;
        Ok(*st)
    }

    /// Accepts a new platform epoch after [`ClockError::EpochChanged`].
    pub fn reanchor(&self) -> ClockState {
        let mut st = self.state.lock().expect("clock poisoned");
        let (nonce, secs) = self.coarse.platform_time();
        let ticks = self.ticker.ticks();
        *st = ClockState {
            last_platform_read: (nonce, secs),
            tick_count: ticks,
            tick_rate_hz: self.config.tick_rate_hz,
            last_correction_tick: ticks,
            anchor_ms: secs * 1000,
            anchor_tick: ticks,
            scale_ppm: UNITY_PPM,
            last_returned: 0,
        };
        *st
    }

    /// Coarse passthrough to the platform clock.
    pub fn coarse_now_s(&self) -> (u64, u64) {
        self.coarse.platform_time()
    }
}

impl ClockHandle for TrustedClock {
    fn now_ms(&self) -> Result<u64, ClockError> {
        TrustedClock::now_ms(self)
    }
}

/// A settable clock for unit tests of time-dependent state machines.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn at(ms: u64) -> Self {
        ManualClock(AtomicU64::new(ms))
    }

    pub fn set(&self, ms: u64) {
        self.0.store(ms, Ordering::SeqCst);
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl ClockHandle for ManualClock {
    fn now_ms(&self) -> Result<u64, ClockError> {
        Ok(self.0.load(Ordering::SeqCst))
    }
}

/// Reads any host [`TimeSource`] as if it were trustworthy. This is what a
/// vTPM without the trusted clock ends up using.
pub struct HostClock {
    source: Arc<dyn TimeSource>,
}

impl HostClock {
    pub fn new(source: Arc<dyn TimeSource>) -> Self {
        HostClock { source }
    }
}

impl ClockHandle for HostClock {
    fn now_ms(&self) -> Result<u64, ClockError> {
        Ok(self.source.now_ms())
    }
}
