use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use clap::{Parser, Subcommand, ValueEnum};

use pvtn::codec::Canonical;
use pvtn::crypto::{CryptoProvider, MockProvider, RealProvider};
use pvtn::scenario::{self, Scenario, ScenarioError};
use pvtn::snapshot::Snapshot;
use pvtn::tree::{chain_from_hex, key_from_hex, verify_chain, RevocationSet};

const PASS: u8 = 0;
const FAIL: u8 = 1;
const USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "pvtn", version, about = "Run tree-network scenarios and inspect their artifacts")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderArg {
    Mock,
    Real,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run scenario files (or directories of them) to quiescence.
    Run {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        /// Override the seed in each scenario file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "mock")]
        provider: ProviderArg,
        /// Write the rendered trace here (single scenario only).
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Override the tick bound from the scenario config.
        #[arg(long)]
        max_ticks: Option<u64>,
        /// Compare each run against `<dir>/<stem>.trace`.
        #[arg(long)]
        golden: Option<PathBuf>,
        /// Rewrite the golden traces instead of comparing.
        #[arg(long, requires = "golden")]
        bless: bool,
        /// Write the final tree snapshot here (single scenario only).
        #[arg(long)]
        snapshot: Option<PathBuf>,
        /// Write `<node>.chain` and `<tenant>.anchor` files here (single
        /// scenario only).
        #[arg(long)]
        export_chains: Option<PathBuf>,
        /// Independent scenarios to run in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Print a snapshot as an indented tree.
    DumpTree { snapshot: PathBuf },
    /// Verify a certificate chain (hex, one per line, root first) against an
    /// anchor public key (hex).
    VerifyChain {
        certs: PathBuf,
        anchor: PathBuf,
        #[arg(long, default_value_t = 0)]
        at: u64,
        #[arg(long, value_enum, default_value = "mock")]
        provider: ProviderArg,
    },
    /// Check a snapshot for edges or keys crossing tenant boundaries.
    IsolationCheck { snapshot: PathBuf },
}

fn provider(p: ProviderArg) -> Arc<dyn CryptoProvider> {
    match p {
        ProviderArg::Mock => Arc::new(MockProvider),
        ProviderArg::Real => Arc::new(RealProvider),
    }
}

fn read(path: &Path) -> Result<String, u8> {
    fs::read_to_string(path).map_err(|e| {
        eprintln!("{}: {e}", path.display());
        USAGE
    })
}

fn collect(paths: &[PathBuf]) -> Result<Vec<PathBuf>, u8> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| {
                    eprintln!("{}: {e}", p.display());
                    USAGE
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "toml"))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

/// First differing line between two texts, for golden mismatches.
fn first_diff(want: &str, got: &str) -> String {
    let (mut w, mut g) = (want.lines(), got.lines());
    for n in 1.. {
        match (w.next(), g.next()) {
            (None, None) => break,
            (a, b) if a == b => continue,
            (a, b) => return format!("line {n}:\n  - {}\n  + {}", a.unwrap_or("<eof>"), b.unwrap_or("<eof>")),
        }
    }
    String::new()
}

struct Job {
    path: PathBuf,
    code: u8,
    log: String,
}

struct RunOpts {
    seed: Option<u64>,
    provider: ProviderArg,
    trace: Option<PathBuf>,
    max_ticks: Option<u64>,
    golden: Option<PathBuf>,
    bless: bool,
    snapshot: Option<PathBuf>,
    export_chains: Option<PathBuf>,
}

fn run_one(path: &Path, o: &RunOpts) -> Job {
    let mut log = String::new();
    let job = |code: u8, log: String| Job { path: path.to_path_buf(), code, log };
    let text = match read(path) {
        Ok(t) => t,
        Err(c) => return job(c, String::new()),
    };
    let sc = match Scenario::parse(&text) {
        Ok(s) => s,
        Err(e) => return job(USAGE, format!("{}: {e}\n", path.display())),
    };
    let run = match scenario::run(&sc, provider(o.provider), o.seed, o.max_ticks) {
        Ok(r) => r,
        Err(e @ ScenarioError::Setup(_)) => return job(FAIL, format!("{}: {e}\n", path.display())),
        Err(e) => return job(USAGE, format!("{}: {e}\n", path.display())),
    };
    let rendered = run.render();
    let mut code = if run.passed() { PASS } else { FAIL };
    match &run.report {
        Ok(r) => {
            log.push_str(&format!("{}: quiescent at tick {} ({} events)\n", sc.name, r.final_tick, r.events));
            for v in &r.violations {
                log.push_str(&format!("  violation {v}\n"));
            }
        }
        Err(e) => log.push_str(&format!("{}: {e}\n", sc.name)),
    }
    for a in &run.assertions {
        log.push_str(&format!("  {} {} ({})\n", if a.pass { "pass" } else { "FAIL" }, a.label, a.detail));
    }
    let write = |p: &Path, body: &str, log: &mut String| -> bool {
        match fs::write(p, body) {
            Ok(()) => true,
            Err(e) => {
                log.push_str(&format!("{}: {e}\n", p.display()));
                false
            }
        }
    };
    if let Some(t) = &o.trace {
        if !write(t, &rendered, &mut log) {
            code = USAGE;
        }
    }
    if let Some(s) = &o.snapshot {
        if !write(s, &Snapshot::of(&run.world).render(), &mut log) {
            code = USAGE;
        }
    }
    if let Some(dir) = &o.export_chains {
        if let Err(e) = export_chains(&run.world, dir) {
            log.push_str(&format!("{}: {e}\n", dir.display()));
            code = USAGE;
        }
    }
    if let Some(dir) = &o.golden {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let g = dir.join(format!("{stem}.trace"));
        if o.bless {
            if write(&g, &rendered, &mut log) {
                log.push_str(&format!("  blessed {}\n", g.display()));
            } else {
                code = USAGE;
            }
        } else {
            match fs::read_to_string(&g) {
                Ok(want) if want == rendered => log.push_str(&format!("  golden match {}\n", g.display())),
                Ok(want) => {
                    log.push_str(&format!("  golden MISMATCH {}\n{}\n", g.display(), first_diff(&want, &rendered)));
                    code = code.max(FAIL);
                }
                Err(e) => {
                    log.push_str(&format!("  golden {}: {e}\n", g.display()));
                    code = code.max(FAIL);
                }
            }
        }
    }
    job(code, log)
}

fn export_chains(w: &pvtn::sim::World, dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    for t in &w.tenants {
        let root = &w.nodes[t.root].record;
        fs::write(dir.join(format!("{}.anchor", t.name)), format!("{}\n", hex::encode(root.public().as_bytes())))?;
    }
    for n in &w.nodes {
        if n.record.tenant.is_none() || n.record.cert.is_none() {
            continue;
        }
        let mut body = String::new();
        for a in w.tree_path(n.addr) {
            if let Some(c) = &w.nodes[a].record.cert {
                body.push_str(&hex::encode(c.to_canonical()));
                body.push('\n');
            }
        }
        fs::write(dir.join(format!("{}.chain", n.record.name)), body)?;
    }
    Ok(())
}

fn cmd_run(scenarios: Vec<PathBuf>, jobs: usize, o: RunOpts) -> u8 {
    let paths = match collect(&scenarios) {
        Ok(p) => p,
        Err(c) => return c,
    };
    let single = o.trace.is_some() || o.snapshot.is_some() || o.export_chains.is_some();
    if single && paths.len() != 1 {
        eprintln!("--trace, --snapshot and --export-chains take exactly one scenario");
        return USAGE;
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Job>>> = Mutex::new((0..paths.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, paths.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(p) = paths.get(i) else { break };
                let j = run_one(p, &o);
                results.lock().unwrap()[i] = Some(j);
            });
        }
    });
    let mut worst = PASS;
    for j in results.into_inner().unwrap().into_iter().flatten() {
        print!("{}", j.log);
        if j.code != PASS {
            eprintln!("{}: exit {}", j.path.display(), j.code);
        }
        worst = worst.max(j.code);
    }
    worst
}

fn cmd_verify_chain(certs: &Path, anchor: &Path, at: u64, p: ProviderArg) -> u8 {
    let (Ok(ct), Ok(at_text)) = (read(certs), read(anchor)) else { return USAGE };
    let chain = match chain_from_hex(&ct) {
        Ok(c) => c,
        Err((line, e)) => {
            eprintln!("{}:{line}: {e}", certs.display());
            return USAGE;
        }
    };
    let anchor_pk = match key_from_hex(&at_text) {
        Ok(k) => k,
        Err(e) => {
            eprintln!("{}: {e}", anchor.display());
            return USAGE;
        }
    };
    if verify_chain(provider(p).as_ref(), &chain, &anchor_pk, at, &RevocationSet::default()) {
        println!("valid: {} certificates", chain.len());
        PASS
    } else {
        println!("invalid");
        FAIL
    }
}

fn load_snapshot(path: &Path) -> Result<Snapshot, u8> {
    let text = read(path)?;
    Snapshot::parse(&text).map_err(|e| {
        eprintln!("{}: {e}", path.display());
        USAGE
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE } else { PASS });
        }
    };
    let code = match cli.cmd {
        Cmd::Run { scenarios, seed, provider, trace, max_ticks, golden, bless, snapshot, export_chains, jobs } => {
            let o = RunOpts { seed, provider, trace, max_ticks, golden, bless, snapshot, export_chains };
            cmd_run(scenarios, jobs, o)
        }
        Cmd::DumpTree { snapshot } => match load_snapshot(&snapshot) {
            Ok(s) => {
                print!("{}", s.dump_tree());
                PASS
            }
            Err(c) => c,
        },
        Cmd::VerifyChain { certs, anchor, at, provider } => cmd_verify_chain(&certs, &anchor, at, provider),
        Cmd::IsolationCheck { snapshot } => match load_snapshot(&snapshot) {
            Ok(s) => {
                let v = s.isolation_violations();
                for x in &v {
                    println!("violation {x}");
                }
                println!("{} nodes, {} violations", s.entries.len(), v.len());
                if v.is_empty() {
                    PASS
                } else {
                    FAIL
                }
            }
            Err(c) => c,
        },
    };
    ExitCode::from(code)
}
