use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, RwLock};

use clap::{Parser, Subcommand, ValueEnum};

use devintegrity::applet::{Applet, PolicyConfig};
use devintegrity::immustore::{audit_file, Durability, Store};
use devintegrity::measure::{measure_manifest, Digest};
use devintegrity::pdl::{self, Ledger};
use devintegrity::verifier::{serve_forever, Clock, ServiceConfig, SystemClock, Verifier, VerifierService};

use devintegrity_sim::bench::{bench_hash, bench_store};
use devintegrity_sim::consortium::{provision, Consortium, Transcript};
use devintegrity_sim::devtree;
use devintegrity_sim::scenario::{run_scenario, ScenarioConfig, TamperKind, TransportKind};
use devintegrity_sim::transport::InProcess;
use devintegrity_sim::{Result, SimError};

#[derive(Parser)]
#[command(name = "devsim", version, about = "Device integrity simulation and tooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a device directory with random artifacts and a manifest.
    InitDevice {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value = "fw-demo")]
        software_id: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the provisioning handshake for a device directory.
    Provision {
        #[arg(long)]
        device: PathBuf,
        #[arg(long, default_value = "DEV001")]
        device_id: String,
        /// Hash the vendor registers in the ledger (defaults to the measured hash).
        #[arg(long)]
        vendor_hash: Option<String>,
        /// Ledger file, created if missing.
        #[arg(long)]
        ledger: Option<PathBuf>,
        /// Verifier store file, created if missing.
        #[arg(long)]
        store: Option<PathBuf>,
        /// Seed for the participant keys.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a multi-device scenario from a key = value file.
    RunScenario {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        tcp: bool,
        /// Write the text report here instead of standard output.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also write the tab-separated detection records.
        #[arg(long)]
        tsv: Option<PathBuf>,
    },
    /// Modify, delete or restore an artifact in a device directory.
    Tamper {
        #[arg(long)]
        device: PathBuf,
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Latency benchmarks.
    Bench {
        #[arg(value_enum)]
        target: BenchTarget,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
        /// Records preloaded into the store before measuring.
        #[arg(long, default_value_t = 10_000)]
        preload: usize,
        /// Directory for the store file (a temporary one by default).
        #[arg(long)]
        dir: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-verify a store or ledger file.
    Audit {
        #[arg(value_enum)]
        target: AuditTarget,
        #[arg(long)]
        path: PathBuf,
        /// Print the ledger blocks.
        #[arg(long)]
        dump: bool,
    },
    /// Run a verifier over TCP.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Modify,
    Delete,
    Restore,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchTarget {
    Hash,
    Store,
}

#[derive(Clone, Copy, ValueEnum)]
enum AuditTarget {
    Store,
    Ledger,
}

fn open_ledger(path: Option<&Path>, consortium: &Consortium) -> Result<Ledger> {
    Ok(match path {
        Some(p) if p.exists() => Ledger::open(p)?,
        Some(p) => Ledger::create(p, consortium.participants())?,
        None => consortium.new_ledger()?,
    })
}

fn open_store(path: Option<&Path>) -> Result<Store> {
    match path {
        Some(p) => Store::open(p, Durability::Fsync)
            .map_err(|e| devintegrity::verifier::VerifierError::StoreUnavailable(e).into()),
        None => Ok(Store::in_memory()),
    }
}

fn cmd_provision(
    device: &Path,
    device_id: &str,
    vendor_hash: Option<&str>,
    ledger_path: Option<&Path>,
    store_path: Option<&Path>,
    seed: u64,
) -> Result<()> {
    let (manifest, files) = devtree::load_device(device)?;
    let report = measure_manifest(&manifest, &files, SystemClock.now_micros())?;
    let consortium = Consortium::new(seed);
    let mut ledger = open_ledger(ledger_path, &consortium)?;
    let registered = match vendor_hash {
        Some(h) => Some(
            Digest::from_hex(h).ok_or_else(|| SimError::ConfigInvalid(format!("bad hash {h:?}")))?,
        ),
        None if ledger.query_benchmark(manifest.software_id()).is_err() => Some(report.composite),
        None => None,
    };
    if let Some(h) = registered {
        let height = consortium.register_benchmark(&mut ledger, manifest.software_id(), h)?;
        println!("ledger block {height} benchmark {} {h}", manifest.software_id());
    }
    let verifier = Verifier::open("verifier-1", open_store(store_path)?);
    let service = Arc::new(VerifierService::new(
        verifier,
        Arc::new(RwLock::new(ledger)),
        Arc::new(SystemClock),
    ));
    let mut transport = InProcess::new(vec![("verifier-1".into(), service)]);
    let mut applet = Applet::new(device_id.as_bytes(), b"AAP001", PolicyConfig::default())?;
    let mut transcript = Transcript::default();
    let result = provision(&mut applet, report, &mut transport, &mut transcript);
    print!("{}", transcript.render());
    println!("applet mode {:?}", applet.mode());
    result.map(|_| ())
}

fn cmd_run_scenario(
    config: &Path,
    seed: Option<u64>,
    tcp: bool,
    report: Option<&Path>,
    tsv: Option<&Path>,
) -> Result<()> {
    let text = std::fs::read_to_string(config)?;
    let mut cfg = ScenarioConfig::parse(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if tcp {
        cfg.transport = TransportKind::Tcp;
    }
    let r = run_scenario(&cfg)?;
    match report {
        Some(p) => std::fs::write(p, r.render_text())?,
        None => print!("{}", r.render_text()),
    }
    if let Some(p) = tsv {
        std::fs::write(p, r.render_tsv())?;
    }
    Ok(())
}

fn cmd_bench(target: BenchTarget, iterations: usize, preload: usize, dir: Option<&Path>, seed: u64) -> Result<()> {
    let reports = match target {
        BenchTarget::Hash => bench_hash(iterations, seed)?,
        BenchTarget::Store => {
            let tmp;
            let dir = match dir {
                Some(d) => d,
                None => {
                    tmp = tempfile::tempdir()?;
                    tmp.path()
                }
            };
            bench_store(iterations, preload, dir, seed)?
        }
    };
    for r in reports {
        println!("{r}");
    }
    Ok(())
}

fn cmd_audit(target: AuditTarget, path: &Path, dump: bool) -> Result<()> {
    match target {
        AuditTarget::Store => {
            let verdict = audit_file(path)?;
            println!("{verdict:?}");
            if !verdict.is_ok() {
                return Err(SimError::Corruption(format!("{verdict:?}")));
            }
        }
        AuditTarget::Ledger => {
            if dump {
                let bytes = std::fs::read(path)?;
                if let Ok(text) = pdl::dump(&bytes) {
                    print!("{text}");
                }
            }
            let verdict = pdl::verify_ledger_file(path)?;
            println!("{verdict}");
            if !verdict.is_ok() {
                return Err(SimError::Corruption(verdict.to_string()));
            }
        }
    }
    Ok(())
}

fn cmd_serve(config: &Path) -> Result<()> {
    let text = std::fs::read_to_string(config)?;
    let cfg = ServiceConfig::parse(&text).map_err(SimError::ConfigInvalid)?;
    let consortium = Consortium::new(0);
    let ledger = open_ledger(Some(Path::new(&cfg.ledger_path)), &consortium)?;
    let verifier = Verifier::open(&cfg.verifier_id, open_store(Some(Path::new(&cfg.store_path)))?)
        .with_default_action(cfg.default_action);
    let service = Arc::new(VerifierService::new(
        verifier,
        Arc::new(RwLock::new(ledger)),
        Arc::new(SystemClock),
    ));
    let listener = TcpListener::bind(&cfg.listen)?;
    eprintln!("{} listening on {}", cfg.verifier_id, listener.local_addr()?);
    if !cfg.quorum_peers.is_empty() {
        eprintln!("quorum peers: {}", cfg.quorum_peers.join(", "));
    }
    serve_forever(listener, service)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitDevice { dir, software_id, seed } => {
            let m = devtree::init_device(&dir, &software_id, seed)?;
            println!("created {} with {} artifacts", dir.display(), m.artifact_paths().len());
            Ok(())
        }
        Command::Provision { device, device_id, vendor_hash, ledger, store, seed } => cmd_provision(
            &device,
            &device_id,
            vendor_hash.as_deref(),
            ledger.as_deref(),
            store.as_deref(),
            seed,
        ),
        Command::RunScenario { config, seed, tcp, report, tsv } => {
            cmd_run_scenario(&config, seed, tcp, report.as_deref(), tsv.as_deref())
        }
        Command::Tamper { device, kind, seed } => {
            let kind = match kind {
                KindArg::Modify => TamperKind::ModifyArtifact,
                KindArg::Delete => TamperKind::DeleteArtifact,
                KindArg::Restore => TamperKind::Restore,
            };
            println!("{}", devtree::tamper(&device, kind, seed)?);
            Ok(())
        }
        Command::Bench { target, iterations, preload, dir, seed } => {
            cmd_bench(target, iterations, preload, dir.as_deref(), seed)
        }
        Command::Audit { target, path, dump } => cmd_audit(target, &path, dump),
        Command::Serve { config } => cmd_serve(&config),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.class());
            ExitCode::FAILURE
        }
    }
}
