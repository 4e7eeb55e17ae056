// SPDX-License-Identifier: Apache-2.0

//! `vtpm-sim`: operator front end for the simulator. See docs/cli.md.

mod workspace;

use std::fs;
use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;
use vtpm_core::attest::{attest_instance, AttestError, AttestOptions, InProcess, LoopbackServer, TcpTransport};
use vtpm_core::bench::{self, BenchError, BenchResult};
use vtpm_core::config::{ConfigError, DefenseConfig};
use vtpm_core::harness::{self, builtin, HarnessError};
use vtpm_core::instance::{install, Backend, LaunchError, VtpmInstance, VTPM_CODE};
use vtpm_core::tpm::{Response, TpmError};

use workspace::{copy_files, Workspace};

pub const SEED_ENV: &str = "VTPM_SIM_SEED";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("platform: {0}")]
    Platform(String),
    #[error("corrupt workspace: {0}")]
    Corrupt(String),
    #[error("instance {0:?} is not initialized; run `init` first")]
    NotInitialized(String),
    #[error("instance {0:?} already exists")]
    Exists(String),
    #[error("launch refused: {0}")]
    Launch(#[from] LaunchError),
    #[error("instance halted: {0}")]
    Halted(String),
    #[error("TPM returned {0}")]
    Tpm(&'static str),
    #[error("attestation: {0}")]
    Attest(#[from] AttestError),
    #[error("{0} of {1} attacks succeeded")]
    AttackSucceeded(usize, usize),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

impl CliError {
    /// Process exit code. 2 is reserved for usage errors, as clap uses it.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) | CliError::Corrupt(_) | CliError::Platform(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::NotInitialized(_) | CliError::Exists(_) | CliError::Launch(_) | CliError::Halted(_) => 4,
            CliError::Tpm(_) => 5,
            CliError::Attest(_) => 6,
            CliError::AttackSucceeded(..) => 7,
            CliError::Harness(_) => 8,
            CliError::Bench(_) => 9,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "vtpm-sim", version, about = "Simulated enclave-protected vTPM")]
struct Cli {
    /// Workspace directory holding all instance and cloud state.
    #[arg(long, global = true, default_value = "vtpm-root")]
    root: PathBuf,
    /// Platform directory (sealing secret, monotonic counters, clock epoch).
    /// Defaults to $HOME/.vtpm-sim/platform.
    #[arg(long, global = true, env = "VTPM_SIM_PLATFORM")]
    platform: Option<PathBuf>,
    /// Instance name.
    #[arg(short, long, global = true, default_value = "default")]
    instance: String,
    /// Seed for deterministic runs.
    #[arg(long, global = true, env = SEED_ENV)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Create the user key, sign the enclave, write the binding record and
    /// register the instance.
    Provision {
        /// VM image file to bind; a placeholder image is used if omitted.
        #[arg(long)]
        vm_image: Option<PathBuf>,
    },
    /// Create a fresh vTPM (provisioning first if needed).
    Init {
        /// Replace an existing vTPM's state.
        #[arg(long)]
        force: bool,
    },
    /// Send one hex-encoded TPM command and print the hex response.
    Cmd { hex: String },
    /// Copy the instance files under a tag.
    Snapshot { tag: String },
    /// Put a snapshot's files back in place.
    Restore { tag: String },
    /// Obtain EK and AIK certificates from the workspace PCA.
    Attest(AttestArgs),
    /// Run the builtin attack scenarios against a defense configuration.
    #[command(subcommand)]
    Attack(AttackCmd),
    /// Sealed-vs-plain command latency and NVRAM launch time.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct AttestArgs {
    #[arg(long, default_value_t = 2048)]
    key_bits: u16,
    /// Talk to the PCA over a loopback TCP socket instead of in process.
    #[arg(long)]
    tcp: bool,
}

#[derive(Debug, Subcommand)]
enum AttackCmd {
    /// List the builtin scenarios.
    List,
    /// Run one scenario or all of them.
    Run {
        /// Scenario name or `all`.
        name: String,
        /// Defense configuration; `config` uses the workspace config.toml.
        #[arg(long, value_enum, default_value_t = DefenseArg::Config)]
        defense: DefenseArg,
        /// Print each scenario's event trace.
        #[arg(long)]
        trace: bool,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DefenseArg {
    None,
    Software,
    Full,
    Config,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Comma-separated command names; all of them by default.
    #[arg(long, value_delimiter = ',')]
    commands: Vec<String>,
    #[arg(long, default_value_t = bench::DEFAULT_ITERATIONS)]
    iterations: usize,
    /// CSV output path; defaults to <root>/bench/bench.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn platform_dir(cli: &Cli) -> PathBuf {
    cli.platform.clone().unwrap_or_else(|| {
        let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
        home.join(".vtpm-sim").join("platform")
    })
}

fn open(cli: &Cli, context: &str) -> Result<Workspace, CliError> {
    Workspace::open(&cli.root, &platform_dir(cli), cli.seed, &format!("{context} {}", cli.instance))
}

fn provision(ws: &Workspace, name: &str, vm_image: Option<&PathBuf>) -> Result<(), CliError> {
    if ws.is_provisioned(name) {
        return Err(CliError::Exists(name.to_string()));
    }
    let vm = match vm_image {
        Some(p) => fs::read(p)?,
        None => format!("vm image of {name}").into_bytes(),
    };
    let signer = ws.signer(name)?;
    let p = install(&mut ws.storage(name), &signer, &vm, VTPM_CODE)?;
    ws.cloud()?.register(name, &p)?;
    println!(
        "provisioned {name} mrenclave={} mrsigner={}",
        hex::encode(p.identity.mrenclave),
        hex::encode(p.identity.mrsigner)
    );
    Ok(())
}

fn launch(ws: &Workspace, name: &str) -> Result<VtpmInstance, CliError> {
    if !ws.is_initialized(name) {
        return Err(CliError::NotInitialized(name.to_string()));
    }
    let inst = VtpmInstance::launch(ws.environment()?, name, Box::new(ws.storage(name)), ws.options())?;
    match inst.halted() {
        Some(why) => Err(CliError::Halted(why.to_string())),
        None => Ok(inst),
    }
}

fn run_cmd(ws: &Workspace, name: &str, hex_cmd: &str) -> Result<(), CliError> {
    let bytes = hex::decode(hex_cmd.trim()).map_err(|e| CliError::Usage(format!("command is not hex: {e}")))?;
    let mut inst = launch(ws, name)?;
    let out = inst.execute_bytes(&bytes);
    println!("{}", hex::encode(&out));
    // the response was already printed; the exit code reports its rc
    match Response::decode(&out).map(Response::into_result) {
        Ok(Ok(_)) => Ok(()),
        Ok(Err(rc)) => Err(CliError::Tpm(rc.name())),
        Err(_) => Err(CliError::Tpm(TpmError::Failure.name())),
    }
}

fn attest(ws: &Workspace, name: &str, args: &AttestArgs) -> Result<(), CliError> {
    let mut inst = launch(ws, name)?;
    let opts = AttestOptions {
        key_bits: args.key_bits,
        ..AttestOptions::default()
    };
    let pca = ws.pca()?;
    let pca_pub = pca.public();
    let attested = if args.tcp {
        let server = LoopbackServer::spawn(pca)?;
        let mut transport = TcpTransport::connect(server.addr())?;
        let res = attest_instance(&mut inst, &mut transport, &opts);
        drop(transport);
        server.join().map_err(AttestError::Transport)?;
        res?
    } else {
        let mut pca = pca;
        attest_instance(&mut inst, &mut InProcess::new(&mut pca), &opts)?
    };
    let dir = ws.cert_dir(name);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("ek.crt"), attested.ek_cert.to_bytes())?;
    fs::write(dir.join("aik.crt"), attested.aik_cert.to_bytes())?;
    println!("pca_public={}", hex::encode(pca_pub.as_bytes()));
    for (kind, cert) in [("ek", &attested.ek_cert), ("aik", &attested.aik_cert)] {
        println!(
            "{kind}_cert serial={} mrenclave={} file={}",
            cert.serial,
            hex::encode(cert.mrenclave),
            dir.join(format!("{kind}.crt")).display()
        );
    }
    Ok(())
}

fn attack(ws: &Workspace, cmd: &AttackCmd, seed: u64) -> Result<(), CliError> {
    let (name, defense_arg, trace) = match cmd {
        AttackCmd::List => {
            for s in builtin::builtin_scenarios() {
                println!("{:22} {}", s.name, s.summary);
            }
            return Ok(());
        }
        AttackCmd::Run { name, defense, trace } => (name, *defense, *trace),
    };
    let scenarios = if name == "all" {
        builtin::builtin_scenarios()
    } else {
        vec![builtin::by_name(name).ok_or_else(|| {
            CliError::Usage(format!("unknown scenario {name:?}; try `attack list`"))
        })?]
    };
    let defense = match defense_arg {
        DefenseArg::None => DefenseConfig::none(),
        DefenseArg::Software => DefenseConfig::software(),
        DefenseArg::Full => DefenseConfig::full(),
        DefenseArg::Config => ws.config.effective_defense(),
    };
    let verdicts = scenarios
        .into_iter()
        .map(|s| {
            let s = harness::Scenario {
                lockout: ws.config.lockout,
                ..s.with_defense(defense)
            };
            harness::run_scenario(&s, seed)
        })
        .collect::<Result<Vec<_>, _>>()?;
    print!("{}", harness::report(&verdicts));
    if trace {
        for v in &verdicts {
            println!("# {}", v.scenario);
            for line in &v.trace {
                println!("{line}");
            }
        }
    }
    let succeeded = verdicts.iter().filter(|v| v.attack_succeeded).count();
    println!(
        "summary defense={} attacks={} succeeded={succeeded} defended={}",
        defense.name(),
        verdicts.len(),
        verdicts.len() - succeeded
    );
    if succeeded > 0 {
        return Err(CliError::AttackSucceeded(succeeded, verdicts.len()));
    }
    Ok(())
}

fn micros(ns: f64) -> String {
    format!("{:.3}", ns / 1000.0)
}

fn run_bench(ws: &Workspace, args: &BenchArgs, seed: u64) -> Result<(), CliError> {
    let names: Vec<&str> = if args.commands.is_empty() {
        bench::COMMANDS.to_vec()
    } else {
        args.commands.iter().map(String::as_str).collect()
    };
    for n in &names {
        bench::check_command(n)?;
    }
    if args.iterations == 0 {
        return Err(CliError::Usage("--iterations must be positive".into()));
    }
    let backends = [Backend::Sealed, Backend::Plain];
    let calibration = bench::calibrate(bench::DEFAULT_ITERATIONS);
    let mut results: Vec<BenchResult> = bench::bench_commands(&names, &backends, args.iterations, seed)?;
    for b in backends {
        results.push(bench::bench_launch(b, args.iterations)?);
    }
    for b in backends {
        results.push(bench::bench_persist(b, args.iterations)?);
    }
    println!("{:18} {:7} {:>6} {:>12} {:>12} {:>12}", "command", "backend", "batch", "mean_us", "p50_us", "p95_us");
    for r in &results {
        println!(
            "{:18} {:7} {:>6} {:>12} {:>12} {:>12}",
            r.command,
            r.backend.name(),
            r.batch,
            micros(r.stats.mean_ns),
            micros(r.stats.p50_ns as f64),
            micros(r.stats.p95_ns as f64)
        );
    }
    for pair in results.chunks(2) {
        if let [sealed, plain] = pair {
            println!("overhead {} {:+.2}%", sealed.command, 100.0 * bench::overhead(sealed, plain));
        }
    }
    let worst = results
        .iter()
        .map(|r| r.harness_overhead_ns(&calibration) / r.stats.mean_ns)
        .fold(0.0, f64::max);
    println!(
        "timer calibration mean_ns={:.1} worst_share={:.2}%",
        calibration.mean_ns,
        100.0 * worst
    );
    let out = args.out.clone().unwrap_or_else(|| ws.root.join("bench").join("bench.csv"));
    bench::emit_csv(&results, &out)?;
    println!("csv {}", out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let name = cli.instance.as_str();
    if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
        return Err(CliError::Usage(format!("bad instance name {name:?}")));
    }
    match &cli.command {
        Cmd::Provision { vm_image } => provision(&open(cli, "provision")?, name, vm_image.as_ref()),
        Cmd::Init { force } => {
            let ws = open(cli, "init")?;
            if !ws.is_provisioned(name) {
                provision(&ws, name, None)?;
            }
            if ws.is_initialized(name) && !force {
                return Err(CliError::Exists(name.to_string()));
            }
            let inst = VtpmInstance::create(ws.environment()?, name, Box::new(ws.storage(name)), ws.options())?;
            println!(
                "initialized {name} backend={} defense={}",
                inst.options().backend.name(),
                inst.options().defense.name()
            );
            Ok(())
        }
        Cmd::Cmd { hex } => run_cmd(&open(cli, "cmd")?, name, hex),
        Cmd::Snapshot { tag } | Cmd::Restore { tag } => {
            if tag.is_empty() || tag.contains(['/', '\\']) || tag.starts_with('.') {
                return Err(CliError::Usage(format!("bad tag {tag:?}")));
            }
            let ws = open(cli, "snapshot")?;
            let (live, snap) = (ws.instance_dir(name), ws.snapshot_dir(name, tag));
            let n = if matches!(cli.command, Cmd::Snapshot { .. }) {
                if !ws.is_initialized(name) {
                    return Err(CliError::NotInitialized(name.to_string()));
                }
                copy_files(&ws.instance_files(), &live, &snap)?
            } else {
                if !snap.is_dir() {
                    return Err(CliError::Usage(format!("no snapshot {tag:?} of {name}")));
                }
                copy_files(&ws.instance_files(), &snap, &live)?
            };
            println!("{n} files copied");
            Ok(())
        }
        Cmd::Attest(args) => attest(&open(cli, "attest")?, name, args),
        Cmd::Attack(cmd) => attack(&open(cli, "attack")?, cmd, cli.seed.unwrap_or(1)),
        Cmd::Bench(args) => run_bench(&open(cli, "bench")?, args, cli.seed.unwrap_or(1)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vtpm-sim: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
