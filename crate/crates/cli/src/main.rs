use std::io::Read;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use faaslite_cli::bench::{self, ChurnParams, ColdstartParams};
use faaslite_cli::client::{Client, Gateway};
use faaslite_cli::cluster::Cluster;
use faaslite_cli::report::Report;
use faaslite_cli::sgd::{Mode, SgdParams};
use faaslite_core::node::{Node, NodeConfig};
use faaslite_core::state::{GlobalTierServer, InMemoryGlobalTier};

#[derive(Parser)]
#[command(name = "faaslite", about = "Deploy, invoke and benchmark faaslite functions")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Upload a module.
    Upload {
        #[arg(long, default_value = "127.0.0.1:8080")]
        node: String,
        user: String,
        name: String,
        /// Module file; `-` reads stdin.
        #[arg(required_unless_present = "fixture")]
        file: Option<PathBuf>,
        /// Upload a built-in guest instead of a file.
        #[arg(long, conflicts_with = "file")]
        fixture: Option<String>,
    },
    /// Invoke a function and print its output.
    Invoke {
        /// Node address; repeat to spread calls round-robin.
        #[arg(long = "node", default_value = "127.0.0.1:8080")]
        nodes: Vec<String>,
        user: String,
        name: String,
        #[arg(long, default_value = "")]
        input: String,
        #[arg(long, conflicts_with = "input")]
        input_file: Option<PathBuf>,
        /// Print the call id instead of waiting.
        #[arg(long = "async")]
        is_async: bool,
        #[arg(long, default_value_t = 1)]
        repeat: usize,
    },
    /// Print a call's record.
    Status {
        #[arg(long, default_value = "127.0.0.1:8080")]
        node: String,
        call_id: i64,
    },
    Node {
        #[command(subcommand)]
        cmd: NodeCmd,
    },
    GlobalTier {
        #[command(subcommand)]
        cmd: GlobalCmd,
    },
    Cluster {
        #[command(subcommand)]
        cmd: ClusterCmd,
    },
    Bench {
        #[command(subcommand)]
        cmd: BenchCmd,
    },
}

#[derive(Subcommand)]
enum NodeCmd {
    /// Run a node until killed.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum GlobalCmd {
    /// Run a global tier server until killed.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7070")]
        bind: String,
    },
}

#[derive(Subcommand)]
enum ClusterCmd {
    /// Start a global tier and N nodes on localhost.
    Up {
        #[arg(long, default_value_t = 1)]
        nodes: usize,
        /// Tear down after this many seconds; otherwise when stdin closes.
        #[arg(long)]
        duration: Option<u64>,
    },
}

#[derive(Args)]
struct Output {
    /// Directory for the CSV and gnuplot script; CSV goes to stdout
    /// otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Distributed logistic-regression SGD in one or both state modes.
    Sgd {
        #[arg(long, default_value_t = 4)]
        workers: u32,
        #[arg(long, default_value_t = 3)]
        epochs: u32,
        /// `two-tier`, `data-shipping` or `both`.
        #[arg(long, default_value = "both")]
        mode: String,
        #[arg(long, default_value_t = 10)]
        push_every: u32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 4000)]
        examples: usize,
        #[arg(long, default_value_t = 512)]
        features: usize,
        #[arg(long, default_value_t = 16)]
        nnz: usize,
        #[arg(long, default_value_t = 0.5)]
        learning_rate: f64,
        #[command(flatten)]
        out: Output,
    },
    /// Cold starts at fixed rates via each start path.
    Churn {
        /// Target cold starts per second; repeatable. Without it each path
        /// is swept around its measured capacity.
        #[arg(long = "rate")]
        rates: Vec<f64>,
        #[arg(long, default_value = "noop")]
        function: String,
        /// Length of each rate step.
        #[arg(long, default_value_t = 300)]
        step_ms: u64,
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        out: Output,
    },
    /// Instantiate, restore and reset latencies.
    Coldstart {
        #[arg(long, default_value_t = 500)]
        samples: usize,
        #[arg(long, default_value_t = 30)]
        heavy_samples: usize,
        #[arg(long, default_value_t = bench::DEFAULT_WARMUP)]
        warmup: usize,
        #[command(flatten)]
        out: Output,
    },
}

/// Why a command did not succeed.
enum Failure {
    /// The command ran and its result is a failure.
    Failed,
    Infra(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Infra(e)
    }
}

impl From<faaslite_core::Error> for Failure {
    fn from(e: faaslite_core::Error) -> Self {
        Failure::Infra(e.into())
    }
}

fn read_input(path: &std::path::Path) -> Result<Vec<u8>> {
    if path.as_os_str() == "-" {
        let mut buf = Vec::new();
        std::io::stdin().read_to_end(&mut buf)?;
        return Ok(buf);
    }
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn emit(report: &Report, out: &Output) -> Result<bool> {
    match &out.out {
        Some(dir) => {
            report.table.save(dir, report.plot.as_deref())?;
            eprintln!(
                "wrote {}",
                dir.join(format!("{}.csv", report.table.experiment)).display()
            );
        }
        None => print!("{}", report.table.to_csv()),
    }
    for c in &report.checks {
        eprintln!("{c}");
    }
    Ok(report.passed())
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let passed = match cli.cmd {
        Cmd::Upload {
            node,
            user,
            name,
            file,
            fixture,
        } => {
            let module = match (file, fixture) {
                (_, Some(f)) => bench::fixture(&f)?.to_vec(),
                (Some(p), None) => read_input(&p)?,
                (None, None) => unreachable!("clap requires one"),
            };
            let version = Client::new(&node).upload(&user, &name, &module)?;
            println!("version {version}");
            true
        }
        Cmd::Invoke {
            nodes,
            user,
            name,
            input,
            input_file,
            is_async,
            repeat,
        } => {
            let input = match input_file {
                Some(p) => read_input(&p)?,
                None => input.into_bytes(),
            };
            let gw = Gateway::new(&nodes)?;
            let mut all_ok = true;
            for _ in 0..repeat {
                let client = gw.pick();
                if is_async {
                    println!("{}", client.invoke_async(&user, &name, &input)?);
                    continue;
                }
                let r = client.invoke(&user, &name, &input)?;
                if r.http_status == 404 || r.http_status == 400 {
                    return Err(Failure::Infra(anyhow::anyhow!(
                        "{}: {}",
                        r.http_status,
                        String::from_utf8_lossy(&r.body).trim()
                    )));
                }
                eprintln!(
                    "call {} on {} returned {}",
                    r.call_id.map_or("?".into(), |c| c.to_string()),
                    r.executed_on.as_deref().unwrap_or("?"),
                    r.return_code.map_or("?".into(), |c| c.to_string())
                );
                std::io::Write::write_all(&mut std::io::stdout(), &r.body).context("writing output")?;
                all_ok &= r.ok();
            }
            all_ok
        }
        Cmd::Status { node, call_id } => match Client::new(&node).status(call_id)? {
            Some(v) => {
                println!("{}", serde_json::to_string_pretty(&v).context("formatting status")?);
                v["status"] != "failed"
            }
            None => return Err(Failure::Infra(anyhow::anyhow!("unknown call {call_id}"))),
        },
        Cmd::Node {
            cmd: NodeCmd::Serve { config },
        } => {
            let cfg = NodeConfig::load(config.as_deref())?;
            let node = Node::start(cfg)?;
            println!(
                "node {} http {} bus {}",
                node.node_id(),
                node.http_addr(),
                node.bus_addr()
            );
            node.wait_for_shutdown();
            true
        }
        Cmd::GlobalTier {
            cmd: GlobalCmd::Serve { bind },
        } => {
            let server = GlobalTierServer::bind(bind.as_str(), Arc::new(InMemoryGlobalTier::new()))?;
            println!("global tier {}", server.local_addr());
            server.wait();
            true
        }
        Cmd::Cluster {
            cmd: ClusterCmd::Up { nodes, duration },
        } => {
            let exe = std::env::current_exe().context("locating this executable")?;
            let mut cluster = Cluster::up(&exe, nodes, |_| {})?;
            println!("global tier {}", cluster.global);
            for n in &cluster.nodes {
                println!("{} http://{} bus {}", n.node_id, n.http, n.bus);
            }
            match duration {
                Some(s) => std::thread::sleep(Duration::from_secs(s)),
                None => {
                    let mut sink = Vec::new();
                    let _ = std::io::stdin().read_to_end(&mut sink);
                }
            }
            cluster.down();
            true
        }
        Cmd::Bench { cmd } => match cmd {
            BenchCmd::Sgd {
                workers,
                epochs,
                mode,
                push_every,
                seed,
                examples,
                features,
                nnz,
                learning_rate,
                out,
            } => {
                let modes = match mode.as_str() {
                    "both" => vec![Mode::TwoTier, Mode::DataShipping],
                    m => match Mode::parse(m) {
                        Some(m) => vec![m],
                        None => return Err(Failure::Infra(anyhow::anyhow!("unknown mode {m}"))),
                    },
                };
                let params = SgdParams {
                    seed,
                    features,
                    examples,
                    nnz,
                    workers,
                    epochs,
                    push_every,
                    learning_rate,
                    ..SgdParams::default()
                };
                emit(&bench::sgd(&params, &modes)?, &out)?
            }
            BenchCmd::Churn {
                rates,
                function,
                step_ms,
                workers,
                out,
            } => {
                if rates.iter().any(|r| !(*r > 0.0)) {
                    return Err(Failure::Infra(anyhow::anyhow!("rates must be positive")));
                }
                let defaults = ChurnParams::default();
                let params = ChurnParams {
                    function,
                    rates,
                    duration: Duration::from_millis(step_ms),
                    workers: workers.unwrap_or(defaults.workers).max(1),
                };
                emit(&bench::churn(&params)?, &out)?
            }
            BenchCmd::Coldstart {
                samples,
                heavy_samples,
                warmup,
                out,
            } => {
                if samples == 0 || heavy_samples == 0 {
                    return Err(Failure::Infra(anyhow::anyhow!("sample counts must be positive")));
                }
                let params = ColdstartParams {
                    samples,
                    heavy_samples,
                    warmup,
                };
                emit(&bench::coldstart(&params)?, &out)?
            }
        },
    };
    if passed {
        Ok(())
    } else {
        Err(Failure::Failed)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Failed) => ExitCode::from(1),
        Err(Failure::Infra(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
