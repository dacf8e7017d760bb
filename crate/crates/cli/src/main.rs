mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use lttd_core::experiment::{self, Experiment};
use lttd_core::federated::{load_topology, metropolis_weights, SimOptions};
use lttd_core::lttd::{admissible_slices, param_count};
use lttd_core::params_io;
use lttd_core::verify::{self, VerifyOptions};
use lttd_core::{LttdConfig, RunConfig};

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "lttd", version = manifest::VERSION, about = "Decomposed temporal attention and federated training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the oracle, gradient and consensus self-checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb the factorized attention path; the suite must then fail.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Full-tensor versus decomposed parameter counts of a config's block.
    ParamCount {
        config: PathBuf,
        /// Tabulate every admissible slicing parameter.
        #[arg(long)]
        sweep: bool,
    },
    /// Train from a config file or a previous run's manifest.json.
    Train {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replaces the training and initialization seeds.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; LTTD_THREADS takes precedence.
        #[arg(long)]
        threads: Option<usize>,
        /// Record elapsed milliseconds in metrics.csv instead of 0.
        #[arg(long)]
        wall_clock: bool,
    },
    /// Held-out RMSE and MAE of a parameter file.
    Eval {
        params: PathBuf,
        /// Draw a different held-out set.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Size, connectivity and consensus weights of a topology file.
    TopologyInfo { file: PathBuf },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Verify { seed, inject_fault } => cmd_verify(seed, inject_fault),
        Command::ParamCount { config, sweep } => cmd_param_count(&config, sweep),
        Command::Train { config, out, seed, threads, wall_clock } => {
            cmd_train(&config, &out, seed, threads, wall_clock)
        }
        Command::Eval { params, seed } => cmd_eval(&params, seed),
        Command::TopologyInfo { file } => cmd_topology_info(&file),
    }
}

fn cmd_verify(seed: u64, inject_fault: bool) -> Result<ExitCode> {
    let checks = verify::run_checks(&VerifyOptions { seed, inject_fault });
    print!("{}", verify::format_report(&checks));
    Ok(if checks.iter().all(|c| c.passed) { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    RunConfig::parse(&text).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_param_count(path: &Path, sweep: bool) -> Result<ExitCode> {
    let cfg = read_config(path)?.model.lttd;
    let c = param_count(&cfg)?;
    println!("n = {:?}  d = {:?}  R = {}  d_z = {}", cfg.n, cfg.d, cfg.r_slices, cfg.d_z);
    println!("full tensor parameters: {}", c.full_tensor_params);
    println!("decomposed parameters:  {}", c.decomposed_params);
    println!(
        "decomposition rate:     {:.3} ({} / {})",
        c.decomposition_rate, c.full_tensor_params, c.decomposed_params
    );
    if sweep {
        println!();
        println!("{:>6} {:>24} {:>14} {:>16}", "R", "full", "decomposed", "rate");
        for r in admissible_slices(cfg.d) {
            let c = param_count(&LttdConfig { r_slices: r, ..cfg.clone() })?;
            println!("{r:>6} {:>24} {:>14} {:>16.3}", c.full_tensor_params, c.decomposed_params, c.decomposition_rate);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn thread_count(flag: Option<usize>) -> Result<usize> {
    if let Ok(v) = std::env::var("LTTD_THREADS") {
        let n: usize = v.trim().parse().with_context(|| format!("LTTD_THREADS={v:?}"))?;
        if n == 0 {
            bail!("LTTD_THREADS must be positive");
        }
        return Ok(n);
    }
    match flag {
        Some(0) => bail!("--threads must be positive"),
        Some(n) => Ok(n),
        None => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

fn cmd_train(path: &Path, out: &Path, seed: Option<u64>, threads: Option<usize>, wall_clock: bool) -> Result<ExitCode> {
    let (mut config, topology) = if path.extension().is_some_and(|e| e == "json") {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let m: RunManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        (m.resolved_config()?, m.topology()?)
    } else {
        let config = read_config(path)?;
        let topo_path = path.parent().unwrap_or(Path::new(".")).join(&config.topology);
        let topology = load_topology(&topo_path).context("loading topology")?;
        (config, topology)
    };
    if let Some(s) = seed {
        config.train.seed = s;
        config.model.init_seed = s;
    }
    let threads = thread_count(threads)?;
    let manifest = RunManifest::new(&config, &topology);
    let exp = Experiment::new(config, topology)?;

    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let write = |name: &str, bytes: &[u8]| {
        let p = out.join(name);
        std::fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))
    };
    write("manifest.json", serde_json::to_string_pretty(&manifest)?.as_bytes())?;

    let outcome = exp.run(&SimOptions { threads, wall_clock, consensus: None })?;
    write("metrics.csv", outcome.history.to_csv().as_bytes())?;
    let params = lttd_core::model::PredictorParams::from_flat(exp.objective.config(), &outcome.global)?;
    write("params.bin", &params_io::encode(&exp.config, &params))?;

    let last = outcome.history.last().expect("initial row is always present");
    println!(
        "{} rounds of {} on {} ({} silos): global rmse {} mae {} (constant predictor rmse {})",
        exp.config.train.rounds,
        exp.config.train.mode,
        exp.topology.name,
        exp.topology.n_silos,
        last.global_rmse,
        last.global_mae,
        exp.constant_rmse()
    );
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(path: &Path, seed: Option<u64>) -> Result<ExitCode> {
    let mut file = params_io::read_params(path)?;
    if let Some(s) = seed {
        file.config.data.eval_seed = s;
    }
    let m = experiment::evaluate(&file.config, &file.params)?;
    println!("held-out sequences: {} (eval seed {})", file.config.data.held_out_sequences, file.config.data.eval_seed);
    println!("rmse = {}", m.rmse);
    println!("mae = {}", m.mae);
    Ok(ExitCode::SUCCESS)
}

fn cmd_topology_info(path: &Path) -> Result<ExitCode> {
    let t = load_topology(path)?;
    println!("{}: {} silos, {} directed edges", t.name, t.n_silos, t.edges.len());
    println!("strongly connected: {}", if t.is_strongly_connected() { "yes" } else { "no" });
    println!("in-degree histogram:");
    for (deg, count) in t.in_degree_histogram() {
        println!("  {deg:>3}: {count}");
    }
    match metropolis_weights(&t) {
        Ok(a) => {
            println!("metropolis row-sum residual: {:.3e}", a.max_row_residual());
            println!("metropolis column-sum residual: {:.3e}", a.max_col_residual());
        }
        Err(e) => println!("metropolis weights: unavailable ({e})"),
    }
    Ok(ExitCode::SUCCESS)
}
