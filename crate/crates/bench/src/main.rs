use std::net::TcpStream;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use offgrid_bench::{emit_report, reference, run_matrix, BenchError, ClockMode, Format, MatrixConfig};
use offgrid_core::client::{Client, ClientConfig, SpeedProfile, StrategyChoice};
use offgrid_core::netsim::parse_network;
use offgrid_core::transport::{tcp_endpoint, Side};
use offgrid_core::{Server, ServerConfig, TransmissionStrategy};
use offgrid_workloads::{build_graph, bundle, catalog, describe_output, descriptors, WorkloadName, WorkloadSpec};

#[derive(Parser)]
#[command(name = "offgrid", version, about = "Computation offloading over emulated or real links")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment matrix and print a table or CSV.
    Bench(BenchArgs),
    /// Accept offload connections over TCP.
    Serve(ServeArgs),
    /// Start a loopback server and offload a small workload to it with every strategy.
    Demo(DemoArgs),
    /// Run one workload against the server named in a client config file.
    Invoke(InvokeArgs),
}

#[derive(Args, Clone)]
struct WorkloadArgs {
    #[arg(long, default_value = "blob_detect")]
    workload: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Blob count, or matrix size for linsolve.
    #[arg(long)]
    n: Option<u32>,
    #[arg(long, default_value_t = 150_000)]
    blob_bytes: u32,
    #[arg(long, default_value_t = 1)]
    rounds: u32,
    #[arg(long, default_value_t = 5)]
    depth: u32,
    /// Solve repetitions for linsolve.
    #[arg(long, default_value_t = 10)]
    iterations: u32,
    #[arg(long, default_value_t = 2_000)]
    digits: u32,
}

impl WorkloadArgs {
    fn spec(&self) -> Result<WorkloadSpec, BenchError> {
        let name: WorkloadName = self.workload.parse()?;
        let spec = match name {
            WorkloadName::GameTree => WorkloadSpec::game_tree(self.seed, self.depth),
            WorkloadName::Linsolve => WorkloadSpec::linsolve(self.seed, self.n.unwrap_or(64), self.iterations),
            WorkloadName::BlobDetect => {
                WorkloadSpec::blob_detect(self.seed, self.n.unwrap_or(10), self.blob_bytes, self.rounds)
            }
            WorkloadName::BlobDetect1OfN => {
                WorkloadSpec::blob_detect_1_of_n(self.seed, self.n.unwrap_or(10), self.blob_bytes, self.rounds)
            }
            WorkloadName::PiMachin => WorkloadSpec::pi_machin(self.seed, self.digits),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CacheArg {
    On,
    Off,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClockArg {
    Virtual,
    Real,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    /// Comma-separated: local, auto, eager, lazy, pipelined.
    #[arg(long, value_delimiter = ',', default_value = "local,eager,lazy,pipelined")]
    strategy: Vec<String>,
    /// wifi, 3g, loopback or custom:<rtt_ms>,<up_Bps>,<down_Bps>. Repeat for several links.
    #[arg(long, default_value = "wifi")]
    network: Vec<String>,
    #[arg(long, value_enum, default_value = "off")]
    cache: CacheArg,
    #[arg(long, default_value_t = 1)]
    trials: u32,
    /// table or csv
    #[arg(long, default_value = "table")]
    format: Format,
    /// Write the report here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "virtual")]
    clock: ClockArg,
    /// Local compute speed in work units per second.
    #[arg(long, default_value_t = 5e7)]
    local_speed: f64,
    /// Server compute speed in work units per second.
    #[arg(long, default_value_t = 5e8)]
    server_speed: f64,
    /// Drop all traffic once this many bytes have entered a cell's link
    #[arg(long)]
    blackhole_after: Option<u64>,
    /// Let the server answer pi requests with twice the digits.
    #[arg(long)]
    pi_alternative: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 7070)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Directory where uploaded code bundles persist across restarts.
    #[arg(long)]
    registry: Option<PathBuf>,
    #[arg(long, default_value_t = 5e8)]
    speed: f64,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long, default_value_t = 4)]
    blobs: u32,
    #[arg(long, default_value_t = 50_000)]
    blob_bytes: u32,
}

#[derive(Args)]
struct InvokeArgs {
    /// Client configuration TOML.
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    workload: WorkloadArgs,
    #[arg(long, default_value_t = 5e7)]
    local_speed: f64,
    #[arg(long, default_value_t = 5e8)]
    server_speed: f64,
}

fn bench(args: BenchArgs) -> Result<(), BenchError> {
    let strategies = args
        .strategy
        .iter()
        .map(|s| s.parse::<StrategyChoice>())
        .collect::<Result<Vec<_>, _>>()?;
    let links = args
        .network
        .iter()
        .map(|n| parse_network(n))
        .collect::<Result<Vec<_>, _>>()?;
    let mut cfg = MatrixConfig::new(args.workload.spec()?, strategies, links);
    cfg.cache = match args.cache {
        CacheArg::On => vec![true],
        CacheArg::Off => vec![false],
        CacheArg::Both => vec![false, true],
    };
    cfg.trials = args.trials;
    cfg.speeds = SpeedProfile {
        local: args.local_speed,
        server: args.server_speed,
    };
    cfg.clock = match args.clock {
        ClockArg::Virtual => ClockMode::Virtual,
        ClockArg::Real => ClockMode::Real,
    };
    cfg.pi_alternative = args.pi_alternative;
    cfg.blackhole_after = args.blackhole_after;

    let report = run_matrix(&cfg)?;
    let text = emit_report(&report.rows, args.format);
    eprintln!("clock: {}", report.clock);
    for r in &report.rows {
        if r.code_up_bytes > 0 {
            eprintln!("code registration ({} {} cache={}): {} bytes up", r.strategy, r.link, r.cache, r.code_up_bytes);
        }
        if r.fallbacks > 0 {
            eprintln!("{} {}: {} trial(s) fell back to local", r.strategy, r.link, r.fallbacks);
        }
    }
    if cfg.workload.name == WorkloadName::Linsolve {
        let flops = offgrid_workloads::compute_hint(&cfg.workload)?;
        for r in &report.rows {
            eprintln!(
                "{} {}: {:.1} MFLOPS compute-only, {:.1} MFLOPS end-to-end",
                r.strategy,
                r.link,
                flops / r.exec_s / 1e6,
                flops / r.wall_s / 1e6
            );
        }
    }
    match args.out {
        Some(path) => std::fs::write(&path, text).map_err(offgrid_core::Error::from)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<(), BenchError> {
    let server = Server::new(
        catalog(),
        ServerConfig {
            speed: args.speed,
            registry_dir: args.registry,
            ..Default::default()
        },
    )?;
    let (listener, addr) = Server::bind(&format!("{}:{}", args.host, args.port))?;
    println!("listening on {addr}");
    server.serve_listener(listener)?;
    Ok(())
}

fn connect(addr: &str, config: ClientConfig, speeds: SpeedProfile, pi_alternative: bool) -> Result<Client, BenchError> {
    let stream = TcpStream::connect(addr).map_err(offgrid_core::Error::from)?;
    stream.set_nodelay(true).map_err(offgrid_core::Error::from)?;
    let mut client = Client::new(tcp_endpoint(stream, Side::Client)?, speeds, config);
    for d in descriptors(pi_alternative) {
        client.register_task(d)?;
    }
    client.register_code(bundle())?;
    Ok(client)
}

fn demo(args: DemoArgs) -> Result<(), BenchError> {
    let server = Server::new(catalog(), ServerConfig::default())?;
    let (listener, addr) = Server::bind("127.0.0.1:0")?;
    std::thread::spawn(move || server.serve_listener(listener));
    println!("server on {addr}");

    let spec = WorkloadSpec::blob_detect(7, args.blobs, args.blob_bytes, 20);
    spec.validate()?;
    let want = reference(&spec, spec.task_id())?;
    let speeds = SpeedProfile {
        local: 5e7,
        server: 5e8,
    };
    let strategies = [
        StrategyChoice::Local,
        StrategyChoice::Remote(TransmissionStrategy::Eager),
        StrategyChoice::Remote(TransmissionStrategy::Lazy),
        StrategyChoice::Remote(TransmissionStrategy::Pipelined),
    ];
    for strategy in strategies {
        let config = ClientConfig {
            strategy,
            ..Default::default()
        };
        let mut client = connect(&addr.to_string(), config, speeds, false)?;
        let mut inst = build_graph(&spec)?;
        let (ret, m) = client.invoke(spec.task_id(), &mut inst.graph, inst.target, &inst.params)?;
        let same = ret == want.ret && inst.graph.canonical_hash() == want.graph;
        println!(
            "{:<9} {:>8.4} s  up {:>8} B  down {:>8} B  fetches {}  {}  {}",
            strategy.to_string(),
            m.wall_time,
            m.bytes_up,
            m.bytes_down,
            m.fetch_round_trips,
            describe_output(spec.name, &ret),
            if same { "matches local" } else { "MISMATCH" }
        );
        if !same {
            return Err(BenchError::Equivalence {
                cell: format!("demo/{strategy}"),
                detail: "result differs from local run".into(),
            });
        }
    }
    Ok(())
}

fn invoke(args: InvokeArgs) -> Result<(), BenchError> {
    let config = ClientConfig::load(&args.config)?;
    let spec = args.workload.spec()?;
    let speeds = SpeedProfile {
        local: args.local_speed,
        server: args.server_speed,
    };
    let mut inst = build_graph(&spec)?;
    let (ret, m) = match config.server.clone() {
        Some(addr) => {
            let mut client = connect(&addr, config, speeds, false)?;
            client.invoke(spec.task_id(), &mut inst.graph, inst.target, &inst.params)?
        }
        None => {
            let mut f = catalog();
            let task = f.remove(&spec.task_id()).expect("workload tasks are in the catalog");
            let inv = offgrid_core::Invocation {
                target: inst.target,
                params: inst.params.clone(),
            };
            let start = std::time::Instant::now();
            let ret = offgrid_core::task::run_local(&task, &mut inst.graph, &inv).map_err(offgrid_core::Error::from)?;
            println!("no server configured; ran locally in {:.4} s", start.elapsed().as_secs_f64());
            println!("{}", describe_output(spec.name, &ret));
            return Ok(());
        }
    };
    println!("{}", describe_output(spec.name, &ret));
    println!(
        "placement {}{}, {:.4} s, up {} B, down {} B, fetches {}",
        m.placement,
        m.fallback_from.map(|p| format!(" (after {p} failed)")).unwrap_or_default(),
        m.wall_time,
        m.bytes_up,
        m.bytes_down,
        m.fetch_round_trips
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Bench(a) => bench(a),
        Command::Serve(a) => serve(a),
        Command::Demo(a) => demo(a),
        Command::Invoke(a) => invoke(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ BenchError::Equivalence { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
