use std::net::SocketAddrV4;
use std::path::PathBuf;
use std::process::{Command, ExitCode};
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use appnet::model::{parse_app_spec, render_app_spec, RealEndpoint};
use appnet::node::control::{request, ControlRequest, ControlResponse, ErrorKind};
use appnet::node::daemon::{self, default_run_dir};
use appnet::node::NodeConfig;
use appnet::simharness::{bench, run_script, script};
use appnet::switch::select::SelectionMode;
use appnet::trap::channel::{ENV_APP_ID, ENV_TRAP, ENV_VIP};

mod tools;

const EXIT_SPEC: u8 = 2;
const EXIT_UNREACHABLE: u8 = 3;

#[derive(Parser)]
#[command(name = "appnet", version, about = "Per-host application network")]
struct Cli {
    /// Run directory of the local daemon (default: $APPNET_RUN_DIR or
    /// <tmp>/appnet).
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Rr,
    Rendezvous,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the node daemon.
    Daemon {
        #[arg(long)]
        bind: SocketAddrV4,
        /// One existing member to join through.
        #[arg(long)]
        join: Option<SocketAddrV4>,
        #[arg(long)]
        gateway: bool,
        #[arg(long, value_enum, default_value = "rendezvous")]
        strategy: Strategy,
    },
    /// Run a program attached to the local daemon.
    Run {
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        ip: Option<String>,
        #[arg(long = "tag", value_name = "KEY=VALUE")]
        tags: Vec<String>,
        /// Expose through a gateway, on the given port or the first free one.
        #[arg(long, value_name = "PORT", num_args = 0..=1, default_missing_value = "")]
        expose: Option<String>,
        #[arg(last = true, required = true)]
        command: Vec<String>,
    },
    /// Print the service table.
    List,
    /// Remove an application and tombstone its services.
    Remove { app_id: String },
    /// Print node status as JSON.
    Status,
    /// Compare fast-path and loopback throughput; prints one CSV row.
    Bench {
        #[arg(long, default_value_t = 65536)]
        size: usize,
        #[arg(long, default_value_t = 2.0)]
        seconds: f64,
        /// Omit the CSV header line.
        #[arg(long)]
        no_header: bool,
    },
    /// In a sandbox: serve a stream echo on the app's vip.
    Echo {
        #[arg(long)]
        port: u16,
    },
    /// In a sandbox: connect, send bytes and read the echo back.
    Send {
        addr: SocketAddrV4,
        #[arg(long, default_value_t = 1024)]
        bytes: usize,
    },
    /// In a sandbox: look a name up through the built-in resolver.
    Resolve { name: String },
    /// Run a simulator script and print its JSON-lines trace.
    Sim {
        script: PathBuf,
        /// Write the trace here instead of stdout.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

fn call(run_dir: &std::path::Path, req: &ControlRequest) -> Result<ControlResponse, ExitCode> {
    match request(run_dir, req) {
        Ok(r) if r.ok => Ok(r),
        Ok(r) => {
            eprintln!("appnet: {}", r.error.as_deref().unwrap_or("request failed"));
            Err(match r.kind {
                Some(ErrorKind::Spec) => ExitCode::from(EXIT_SPEC),
                _ => ExitCode::FAILURE,
            })
        }
        Err(e) => {
            eprintln!("appnet: daemon unreachable at {}: {e}", run_dir.display());
            Err(ExitCode::from(EXIT_UNREACHABLE))
        }
    }
}

fn run_daemon(run_dir: PathBuf, bind: SocketAddrV4, join: Option<SocketAddrV4>, gateway: bool, strategy: Strategy) -> ExitCode {
    let mut cfg = NodeConfig::new(RealEndpoint::from(bind));
    cfg.join = join.map(RealEndpoint::from);
    cfg.gateway = gateway;
    cfg.strategy.mode = match strategy {
        Strategy::Rr => SelectionMode::RoundRobin,
        Strategy::Rendezvous => SelectionMode::Rendezvous,
    };
    cfg.run_dir = Some(run_dir);
    match daemon::spawn(cfg) {
        Ok(d) => {
            println!("node {} on {} (run dir {})", d.host(), d.gossip_addr(), d.run_dir().display());
            d.wait();
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("appnet: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run_app(run_dir: PathBuf, args: Vec<String>, command: Vec<String>) -> ExitCode {
    let spec = match parse_app_spec(&args) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("appnet: {e}");
            return ExitCode::from(EXIT_SPEC);
        }
    };
    let resp = match call(&run_dir, &ControlRequest::Add { args: render_app_spec(&spec) }) {
        Ok(r) => r,
        Err(code) => return code,
    };
    let (app_id, vip, trap) = match (resp.app_id, resp.vip, resp.trap) {
        (Some(a), Some(v), Some(t)) => (a, v, t),
        _ => {
            eprintln!("appnet: incomplete reply from daemon");
            return ExitCode::FAILURE;
        }
    };
    log::info!("started {app_id} as {vip}");
    let status = Command::new(&command[0])
        .args(&command[1..])
        .env(ENV_TRAP, &trap)
        .env(ENV_APP_ID, &app_id)
        .env(ENV_VIP, &vip)
        .status();
    let _ = request(&run_dir, &ControlRequest::Remove { app_id });
    match status {
        Ok(s) => ExitCode::from(s.code().unwrap_or(1).clamp(0, 255) as u8),
        Err(e) => {
            eprintln!("appnet: cannot run {}: {e}", command[0]);
            ExitCode::FAILURE
        }
    }
}

fn run_sim(path: PathBuf, trace: Option<PathBuf>) -> ExitCode {
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("appnet: {}: {e}", path.display());
            return ExitCode::FAILURE;
        }
    };
    let script = match script::parse(&text) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("appnet: {}: {e}", path.display());
            return ExitCode::from(EXIT_SPEC);
        }
    };
    let run = run_script(&script);
    let out = run.cluster.trace.to_jsonl();
    let written = match trace {
        Some(p) => std::fs::write(&p, out),
        None => {
            print!("{out}");
            Ok(())
        }
    };
    if let Err(e) = written {
        eprintln!("appnet: writing trace: {e}");
        return ExitCode::FAILURE;
    }
    match run.result {
        Ok(()) => {
            eprintln!("ok: {} ticks, {} ms simulated", run.cluster.round(), run.simulated_ms());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("failed: {e}");
            ExitCode::FAILURE
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let run_dir = cli.run_dir.unwrap_or_else(default_run_dir);
    match cli.cmd {
        Cmd::Daemon {
            bind,
            join,
            gateway,
            strategy,
        } => run_daemon(run_dir, bind, join, gateway, strategy),
        Cmd::Run {
            name,
            ip,
            tags,
            expose,
            command,
        } => {
            let mut args = Vec::new();
            if let Some(n) = name {
                args.extend(["--name".to_string(), n]);
            }
            if let Some(a) = ip {
                args.extend(["--ip".to_string(), a]);
            }
            for t in tags {
                args.extend(["--tag".to_string(), t]);
            }
            if let Some(p) = expose {
                args.push("--expose".into());
                if !p.is_empty() {
                    args.push(p);
                }
            }
            run_app(run_dir, args, command)
        }
        Cmd::List => match call(&run_dir, &ControlRequest::List) {
            Ok(r) => {
                print!("{}", r.dump.unwrap_or_default());
                ExitCode::SUCCESS
            }
            Err(code) => code,
        },
        Cmd::Remove { app_id } => match call(&run_dir, &ControlRequest::Remove { app_id }) {
            Ok(r) => {
                println!("{} entries tombstoned", r.removed.unwrap_or(0));
                ExitCode::SUCCESS
            }
            Err(code) => code,
        },
        Cmd::Status => match call(&run_dir, &ControlRequest::Status) {
            Ok(r) => {
                let s = r.status.unwrap_or_default();
                println!("{}", serde_json::to_string_pretty(&s).unwrap_or_default());
                ExitCode::SUCCESS
            }
            Err(code) => code,
        },
        Cmd::Bench {
            size,
            seconds,
            no_header,
        } => match bench::run(size, Duration::from_secs_f64(seconds)) {
            Ok(r) => {
                if !no_header {
                    println!("{}", bench::BenchResult::CSV_HEADER);
                }
                println!("{}", r.csv_row());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("appnet: bench failed: {e}");
                ExitCode::FAILURE
            }
        },
        Cmd::Echo { port } => tools::echo(port),
        Cmd::Send { addr, bytes } => tools::send(addr, bytes),
        Cmd::Resolve { name } => tools::resolve(&name),
        Cmd::Sim { script, trace } => run_sim(script, trace),
    }
}
