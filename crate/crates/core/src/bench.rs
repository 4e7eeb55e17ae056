// SPDX-License-Identifier: Apache-2.0

//! Per-command latency of a protected instance (sealed NVRAM, trusted
//! clock, counter-backed lockout) against a plain one, plus NVRAM launch
//! time.
//!
//! Each timed sample is one `VtpmInstance::execute` call, write-through
//! persistence included. Setup and cleanup around a sample are untimed.
//! Backends are interleaved sample by sample with alternating order so
//! drift in machine load hits both equally.

use std::fs;
use std::hint::black_box;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use thiserror::Error;

use crate::clock::{ClockConfig, ClockHandle, HostClock, TrustedClock, VirtualTicker};
use crate::config::{DefenseConfig, LockoutConfig};
use crate::enclave::{EnclaveIdentity, Platform, VirtualTime};
use crate::instance::{install, Backend, DirStorage, Environment, InstanceOptions, VtpmInstance, NVRAM_FILE, VTPM_CODE};
use crate::nvram::binding::UserKey;
use crate::nvram::{load_nvram_bytes, NvramImage};
use crate::tpm::state::{Hierarchy, KeyKind};
use crate::tpm::wire::{build, parse};
use crate::tpm::{Command, TpmError, TpmState};

pub const DEFAULT_ITERATIONS: usize = 100;
pub const WARMUP_ITERATIONS: usize = 5;
pub const CSV_HEADER: &str = "command,backend,iteration,nanos";
pub const LAUNCH: &str = "launch";
pub const PERSIST: &str = "persist";

/// Every benchmarkable command, in CSV order.
pub const COMMANDS: [&str; 14] = [
    "self_test",
    "pcr_read",
    "pcr_extend",
    "create_primary",
    "create",
    "unseal",
    "sign",
    "verify_signature",
    "rsa_encrypt",
    "rsa_decrypt",
    "encrypt_decrypt",
    "nv_write",
    "nv_read",
    "read_public",
];

/// Key size of the RSA objects, matching the usual storage and signing keys.
pub const RSA_BITS: u16 = 2048;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("ERR_UNKNOWN_COMMAND: {0}")]
    UnknownCommand(String),
    #[error("bench setup: {0}")]
    Setup(String),
    #[error("{command} failed with {}", .rc.name())]
    Command { command: String, rc: TpmError },
    #[error("writing results: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub mean_ns: f64,
    pub p50_ns: u64,
    pub p95_ns: u64,
    pub min_ns: u64,
    pub max_ns: u64,
}

impl Stats {
    /// Nearest-rank percentiles. Panics on an empty slice.
    pub fn from_samples(samples: &[u64]) -> Self {
        assert!(!samples.is_empty(), "no samples");
        let mut sorted = samples.to_vec();
        sorted.sort_unstable();
        let rank = |p: usize| sorted[(p * sorted.len()).div_ceil(100).max(1) - 1];
        Stats {
            mean_ns: samples.iter().map(|&s| s as f64).sum::<f64>() / samples.len() as f64,
            p50_ns: rank(50),
            p95_ns: rank(95),
            min_ns: sorted[0],
            max_ns: sorted[sorted.len() - 1],
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub command: String,
    pub backend: Backend,
    /// Executions per timed sample. Samples are per-execution nanoseconds.
    pub batch: u32,
    pub samples: Vec<u64>,
    pub stats: Stats,
}

impl BenchResult {
    fn new(command: &str, backend: Backend, batch: u32, samples: Vec<u64>) -> Self {
        BenchResult {
            command: command.to_string(),
            backend,
            batch,
            stats: Stats::from_samples(&samples),
            samples,
        }
    }

    /// Timer cost attributed to one execution, given a [`calibrate`] result.
    pub fn harness_overhead_ns(&self, calibration: &Stats) -> f64 {
        calibration.mean_ns / self.batch as f64
    }
}

/// A timed sample should last at least this many calibrated no-op samples,
/// which nominally keeps the timer under 0.5% of every execution.
pub const MIN_SAMPLE_IN_NOOPS: f64 = 200.0;
const MAX_BATCH: u32 = 4096;

fn time<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_nanos() as u64)
}

/// Cost of the timing wrapper itself around a call that does nothing.
pub fn calibrate(iterations: usize) -> Stats {
    let samples: Vec<u64> = (0..iterations.max(1)).map(|_| time(|| black_box(())).1).collect();
    Stats::from_samples(&samples)
}

/// A running instance with the objects the commands operate on.
struct Rig {
    _dir: tempfile::TempDir,
    inst: VtpmInstance,
    storage_key: u32,
    sealed: u32,
    signer: u32,
    decrypter: u32,
    aes: u32,
    signature: Vec<u8>,
    ciphertext: Vec<u8>,
    pcr_step: u8,
}

const MESSAGE: &[u8] = b"benchmark message";
const NV_INDEX: u32 = 0x0150_0001;

fn setup_err(e: impl std::fmt::Display) -> BenchError {
    BenchError::Setup(e.to_string())
}

fn ok(inst: &mut VtpmInstance, what: &str, cmd: &Command) -> Result<Vec<u8>, BenchError> {
    inst.execute(cmd).into_result().map_err(|rc| BenchError::Command {
        command: what.to_string(),
        rc,
    })
}

/// The protected configuration for [`Backend::Sealed`], the unprotected one
/// for [`Backend::Plain`].
fn environment(backend: Backend, dir: &Path, seed: u64) -> Result<(Environment, InstanceOptions), BenchError> {
    let time = VirtualTime::new();
    let platform = Arc::new(Platform::ephemeral(Arc::new(time.clone()), seed));
    let (defense, clock): (DefenseConfig, Arc<dyn ClockHandle>) = match backend {
        Backend::Sealed => (
            DefenseConfig::full(),
            Arc::new(TrustedClock::new(
                platform.clone(),
                Arc::new(VirtualTicker::new(time, 1000)),
                ClockConfig::default(),
            )),
        ),
        Backend::Plain => (DefenseConfig::none(), Arc::new(HostClock::new(Arc::new(time)))),
    };
    let ledger_dir = dir.join("ledger");
    fs::create_dir_all(&ledger_dir).map_err(setup_err)?;
    let env = Environment {
        platform,
        clock,
        ledger_dir: Some(ledger_dir),
        cloud: None,
    };
    let options = InstanceOptions {
        backend,
        lockout: LockoutConfig::default(),
        ..InstanceOptions::for_defense(defense)
    };
    Ok((env, options))
}

impl Rig {
    fn new(backend: Backend, seed: u64) -> Result<Self, BenchError> {
        let dir = tempfile::tempdir().map_err(setup_err)?;
        let (env, options) = environment(backend, dir.path(), seed)?;
        let mut storage = DirStorage::new(dir.path().join("instance"));
        let user = UserKey::from_bytes(&[seed as u8; 32]);
        install(&mut storage, &user, b"bench vm", VTPM_CODE).map_err(setup_err)?;
        let mut inst = VtpmInstance::create(env, "bench", Box::new(storage), options).map_err(setup_err)?;

        let owner = Hierarchy::OWNER_HANDLE;
        let created = |inst: &mut VtpmInstance, what: &str, cmd: Command| -> Result<u32, BenchError> {
            let p = ok(inst, what, &cmd)?;
            Ok(parse::created(&p).map_err(setup_err)?.0)
        };
        let storage_key = created(
            &mut inst,
            "storage key",
            build::create_primary(owner, &[], KeyKind::AesSymmetric, 256, b"storage", &[]),
        )?;
        let sealed = created(&mut inst, "seal", build::seal(storage_key, &[], b"sealed secret", b"pw", &[]))?;
        let signer = created(
            &mut inst,
            "signing key",
            build::create_primary(owner, &[], KeyKind::RsaSigning, RSA_BITS, b"sign", &[]),
        )?;
        let decrypter = created(
            &mut inst,
            "decryption key",
            build::create_primary(owner, &[], KeyKind::RsaDecryption, RSA_BITS, b"decrypt", &[]),
        )?;
        let aes = created(
            &mut inst,
            "aes key",
            build::create_primary(owner, &[], KeyKind::AesSymmetric, 256, b"aes", &[]),
        )?;
        let signature = parse::bytes(&ok(&mut inst, "sign", &build::sign(signer, &[], MESSAGE))?).map_err(setup_err)?;
        let ciphertext =
            parse::bytes(&ok(&mut inst, "encrypt", &build::rsa_encrypt(decrypter, MESSAGE))?).map_err(setup_err)?;
        ok(&mut inst, "nv_write", &build::nv_write(NV_INDEX, &[7; 64]))?;
        Ok(Rig {
            _dir: dir,
            inst,
            storage_key,
            sealed,
            signer,
            decrypter,
            aes,
            signature,
            ciphertext,
            pcr_step: 0,
        })
    }

    fn command(&mut self, name: &str) -> Result<Command, BenchError> {
        Ok(match name {
            "self_test" => build::self_test(),
            "pcr_read" => build::pcr_read(&[0, 1, 2, 3, 4, 5, 6, 7]),
            "pcr_extend" => {
                self.pcr_step = self.pcr_step.wrapping_add(1);
                build::pcr_extend(15, &[self.pcr_step; 32])
            }
            "create_primary" => build::create_primary(
                Hierarchy::OWNER_HANDLE,
                &[],
                KeyKind::RsaDecryption,
                RSA_BITS,
                b"storage root",
                &[],
            ),
            "create" => build::seal(self.storage_key, &[], b"benchmark payload", b"pw", &[]),
            "unseal" => build::unseal(self.sealed, b"pw"),
            "sign" => build::sign(self.signer, &[], MESSAGE),
            "verify_signature" => build::verify_signature(self.signer, MESSAGE, &self.signature),
            "rsa_encrypt" => build::rsa_encrypt(self.decrypter, MESSAGE),
            "rsa_decrypt" => build::rsa_decrypt(self.decrypter, &[], &self.ciphertext),
            "encrypt_decrypt" => build::encrypt_decrypt(self.aes, &[], false, &[0; 16], &[1; 256]),
            "nv_write" => build::nv_write(NV_INDEX, &[self.pcr_step; 64]),
            "nv_read" => build::nv_read(NV_INDEX),
            "read_public" => build::read_public(self.signer),
            other => return Err(BenchError::UnknownCommand(other.to_string())),
        })
    }

    /// `batch` timed executions of one command, then untimed cleanup.
    /// Returns nanoseconds per execution.
    fn sample(&mut self, name: &str, batch: u32) -> Result<u64, BenchError> {
        let cmd = self.command(name)?;
        let inst = &mut self.inst;
        let (resps, nanos) = time(|| (0..batch).map(|_| inst.execute(&cmd)).collect::<Vec<_>>());
        for resp in resps {
            let payload = resp.into_result().map_err(|rc| BenchError::Command {
                command: name.to_string(),
                rc,
            })?;
            if creates_object(name) {
                let (h, _) = parse::created(&payload).map_err(setup_err)?;
                ok(&mut self.inst, "flush", &build::flush_context(h))?;
            }
        }
        Ok(nanos / batch as u64)
    }
}

/// Commands whose result must be flushed, which bounds them to one
/// execution per sample. They are slow enough not to need more.
fn creates_object(name: &str) -> bool {
    matches!(name, "create_primary" | "create")
}

fn batch_size(name: &str, single_ns: u64, calibration: &Stats) -> u32 {
    if creates_object(name) {
        return 1;
    }
    let want = MIN_SAMPLE_IN_NOOPS * calibration.mean_ns / single_ns.max(1) as f64;
    (want.ceil() as u32).clamp(1, MAX_BATCH)
}

pub fn check_command(name: &str) -> Result<(), BenchError> {
    if COMMANDS.contains(&name) {
        Ok(())
    } else {
        Err(BenchError::UnknownCommand(name.to_string()))
    }
}

/// Runs each command on each backend, `iterations` timed samples apiece
/// after [`WARMUP_ITERATIONS`] untimed ones. Results come back grouped by
/// command in input order, backends in input order within a command.
pub fn bench_commands(
    commands: &[&str],
    backends: &[Backend],
    iterations: usize,
    seed: u64,
) -> Result<Vec<BenchResult>, BenchError> {
    for c in commands {
        check_command(c)?;
    }
    let mut rigs = backends
        .iter()
        .map(|&b| Rig::new(b, seed))
        .collect::<Result<Vec<_>, _>>()?;
    let calibration = calibrate(DEFAULT_ITERATIONS);
    let mut out = Vec::new();
    for &name in commands {
        // warmup, which also sizes the batch from the fastest backend
        let mut fastest = u64::MAX;
        for _ in 0..WARMUP_ITERATIONS {
            for rig in rigs.iter_mut() {
                fastest = fastest.min(rig.sample(name, 1)?);
            }
        }
        let batch = batch_size(name, fastest, &calibration);
        let mut samples: Vec<Vec<u64>> = vec![Vec::with_capacity(iterations); rigs.len()];
        for i in 0..iterations {
            let order: Vec<usize> = if i % 2 == 0 {
                (0..rigs.len()).collect()
            } else {
                (0..rigs.len()).rev().collect()
            };
            for r in order {
                samples[r].push(rigs[r].sample(name, batch)?);
            }
        }
        for (r, s) in samples.into_iter().enumerate() {
            out.push(BenchResult::new(name, backends[r], batch, s));
        }
    }
    Ok(out)
}

pub fn bench_command(name: &str, backend: Backend, iterations: usize) -> Result<BenchResult, BenchError> {
    Ok(bench_commands(&[name], &[backend], iterations, 1)?.remove(0))
}

/// Cold start of NVRAM: read the file and turn it back into TPM state.
pub fn bench_launch(backend: Backend, iterations: usize) -> Result<BenchResult, BenchError> {
    let rig = Rig::new(backend, 1)?;
    let path: PathBuf = rig._dir.path().join("instance").join(NVRAM_FILE);
    let platform = rig.inst.platform().clone();
    let identity: EnclaveIdentity = *rig.inst.identity();
    let load = || -> Result<TpmState, BenchError> {
        let bytes = fs::read(&path)?;
        let image = match backend {
            Backend::Sealed => load_nvram_bytes(&platform, &identity, &bytes).map_err(setup_err)?,
            Backend::Plain => NvramImage::from_bytes(&bytes).map_err(setup_err)?,
        };
        TpmState::from_bytes(&image.tpm_state).map_err(setup_err)
    };
    let mut samples = Vec::with_capacity(iterations);
    for i in 0..WARMUP_ITERATIONS + iterations {
        let (state, nanos) = time(load);
        black_box(state?);
        if i >= WARMUP_ITERATIONS {
            samples.push(nanos);
        }
    }
    Ok(BenchResult::new(LAUNCH, backend, 1, samples))
}

/// The write-through step alone: serialize, seal if the backend seals, and
/// write the NVRAM file. This is the only per-command work that differs
/// between backends.
pub fn bench_persist(backend: Backend, iterations: usize) -> Result<BenchResult, BenchError> {
    let rig = Rig::new(backend, 1)?;
    let path = rig._dir.path().join("persist.bin");
    let mut samples = Vec::with_capacity(iterations);
    for i in 0..WARMUP_ITERATIONS + iterations {
        let (res, nanos) = time(|| fs::write(&path, rig.inst.nvram_bytes()));
        res?;
        if i >= WARMUP_ITERATIONS {
            samples.push(nanos);
        }
    }
    Ok(BenchResult::new(PERSIST, backend, 1, samples))
}

/// Relative overhead of `a` over `b` by mean latency.
pub fn overhead(a: &BenchResult, b: &BenchResult) -> f64 {
    (a.stats.mean_ns - b.stats.mean_ns) / b.stats.mean_ns
}

pub fn write_csv(results: &[BenchResult], mut out: impl Write) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in results {
        for (i, n) in r.samples.iter().enumerate() {
            writeln!(out, "{},{},{},{}", r.command, r.backend.name(), i, n)?;
        }
    }
    out.flush()
}

pub fn emit_csv(results: &[BenchResult], path: &Path) -> io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_csv(results, io::BufWriter::new(fs::File::create(path)?))
}
