use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use crowd_kernel::config::KernelConfig;
use crowd_kernel::kernel::Kernel;
use crowd_kernel::protocol::Server;
use crowd_kernel::sim::{compare_tro_costs, emit_metrics, emit_tro, run_scenario, slope, write_json, Scenario};

#[derive(Parser)]
#[command(name = "crowd-kernel", version, about = "Task-orchestration kernel for crowdsourcing platforms")]
struct Cli {
    /// Kernel config file; falls back to $CROWD_KERNEL_CONFIG, then built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the line protocol over TCP.
    Serve {
        #[arg(long, default_value_t = 7878)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a scenario file and write metrics.
    Sim {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Offline evaluations.
    Eval {
        /// Compare result-correction costs over participant counts.
        #[arg(long)]
        tro: bool,
        #[arg(long, value_delimiter = ',', default_value = "10,100,1000")]
        n: Vec<u32>,
        #[arg(long, default_value_t = 5)]
        v: u32,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    let cfg = KernelConfig::resolve(cli.config.as_deref())?;
    match cli.command {
        Command::Serve { port, host, seed } => {
            let server = Server::start((host.as_str(), port), Kernel::new(cfg, seed)?)?;
            println!("listening on {}", server.local_addr());
            server.wait();
        }
        Command::Sim { scenario, seed, out } => {
            let mut s = Scenario::load(&scenario)?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let run = run_scenario(&s, cfg)?;
            let mut files = emit_metrics(&run.metrics, &out)?;
            let state = out.join("state.json");
            write_json(&state, &run.state)?;
            files.push(state);
            let m = &run.metrics;
            println!(
                "{} tasks: {} terminated, {} hit the round limit, {} open; {} ticks, {} messages",
                m.tasks.len(),
                m.count("terminated"),
                m.count("max-rounds"),
                m.count("open"),
                m.ticks,
                m.messages
            );
            for f in files {
                println!("wrote {}", f.display());
            }
        }
        Command::Eval { tro, n, v, out } => {
            if !tro {
                return Err("nothing to evaluate; pass --tro".into());
            }
            if n.is_empty() || n.contains(&0) || v == 0 {
                return Err("--n values and --v must be at least 1".into());
            }
            let rows = compare_tro_costs(&n, v, &cfg.cost_model, &cfg)?;
            println!("{:>8} {:>4} {:>12} {:>12}", "n", "V", "cost_A", "cost_B");
            for r in &rows {
                println!("{:>8} {:>4} {:>12.3} {:>12.3}", r.n, r.v, r.cost_a, r.cost_b);
            }
            let pa: Vec<(f64, f64)> = rows.iter().map(|r| (r.n as f64, r.cost_a)).collect();
            let pb: Vec<(f64, f64)> = rows.iter().map(|r| (r.n as f64, r.cost_b)).collect();
            println!("slope over n: cost_A {:.6}, cost_B {:.6}", slope(&pa), slope(&pb));
            for f in emit_tro(&rows, &out)? {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}
