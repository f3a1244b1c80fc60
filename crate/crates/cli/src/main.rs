use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use doge_core::check::{self, CheckOptions, Fault};
use doge_core::dual::{run, DualProblem, DualState, SolverParams};
use doge_core::model::generate_independent_set;
use doge_core::net::{Arch, Predict};
use doge_core::train::{
    evaluate, EvalSummary, InferenceConfig, NetPair, Prepared, TrainConfig, Trainer,
};

mod io;

use io::{load_dataset, load_instance, write_file, BadInput};

const VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (",
    env!("DOGE_BUILD_TARGET"),
    ", ",
    env!("DOGE_BUILD_PROFILE"),
    ")"
);

/// Learned dual solver for 0-1 integer linear programs.
#[derive(Debug, Parser)]
#[command(name = "doge", version = VERSION)]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate random independent-set instances.
    Gen(GenArgs),
    /// Run the default-parameter solver on one instance.
    Solve(SolveArgs),
    /// Train early/late stage networks.
    Train(TrainArgs),
    /// Compare trained networks against the default solver.
    Eval(EvalArgs),
    /// Run the invariant and gradient self-checks.
    Check(CheckArgs),
}

#[derive(Debug, Args, serde::Serialize)]
struct GenArgs {
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Vertices per graph.
    #[arg(long, default_value_t = 50)]
    n: usize,
    /// Edge probability.
    #[arg(long, default_value_t = 0.25)]
    p: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, serde::Serialize)]
struct SolveArgs {
    /// Instance file (`.json` or `.lp`).
    instance: PathBuf,
    #[arg(long, default_value_t = 100)]
    sweeps: usize,
    /// Convergence CSV; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, serde::Serialize)]
struct TrainArgs {
    /// Directory of instance files.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "doge")]
    arch: Arch,
    #[arg(long, default_value_t = 20)]
    rounds: usize,
    #[arg(long, default_value_t = 20)]
    sweeps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Gradient clipping norm.
    #[arg(long, default_value_t = 50.0)]
    clip: f64,
    /// Predicted quantities: all, param (α, ω) or non-param (θ).
    #[arg(long, default_value = "all")]
    predict: Predict,
    #[arg(long)]
    out: PathBuf,
    /// Per-iteration CSV log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args, serde::Serialize)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Network pair written by `train`.
    #[arg(long)]
    weights: PathBuf,
    /// Round cap `R`.
    #[arg(long, default_value_t = 20)]
    rounds: usize,
    /// Sweeps per round `T`.
    #[arg(long, default_value_t = 20)]
    sweeps: usize,
    /// Rounds skipped before integrating the gap.
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    /// Per-instance CSV; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, serde::Serialize)]
struct CheckArgs {
    /// Run a single suite.
    #[arg(long)]
    suite: Option<String>,
    /// Break a component on purpose: grad-sign or live-snapshot.
    #[arg(long, hide = true)]
    inject: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.chain().any(|e| e.is::<BadInput>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(BadInput::new("--threads must be positive").into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Solve(a) => solve(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Check(a) => check_cmd(a),
    }
}

fn print_config<T: serde::Serialize>(name: &str, cfg: &T) {
    let json = serde_json::to_string(cfg).expect("config serializes");
    info!("{name} config: {json}");
}

fn gen(a: GenArgs) -> Result<ExitCode> {
    print_config("gen", &a);
    if !(0.0..=1.0).contains(&a.p) {
        return Err(BadInput::new("--p must lie in [0, 1]").into());
    }
    if a.n == 0 {
        return Err(BadInput::new("--n must be positive").into());
    }
    if a.p == 0.0 {
        warn!("p = 0: instances have no constraints");
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut entries = Vec::with_capacity(a.count);
    for k in 0..a.count {
        let seed = a.seed.wrapping_add(k as u64);
        let inst = generate_independent_set(a.n, a.p, seed);
        let file = format!("is_{k:05}.json");
        write_file(&a.out.join(&file), inst.to_json().as_bytes())?;
        entries.push(serde_json::json!({
            "file": file,
            "seed": seed,
            "constraints": inst.num_constraints(),
            "unconstrained": inst.num_constraints() == 0,
        }));
    }
    let manifest = serde_json::json!({
        "generator": "independent-set",
        "n": a.n,
        "p": a.p,
        "seed": a.seed,
        "instances": entries,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&a.out.join("manifest.json"), text.as_bytes())?;
    println!("wrote {} instances to {}", a.count, a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn solve(a: SolveArgs) -> Result<ExitCode> {
    print_config("solve", &a);
    let inst = load_instance(&a.instance)?;
    let problem = DualProblem::new(&inst)
        .map_err(|e| BadInput::new(format!("{}: {e}", a.instance.display())))?;
    let mut state = DualState::init(&problem);
    let trace = run(
        &problem,
        &mut state,
        &SolverParams::defaults(&problem),
        a.sweeps,
    )?;
    let mut csv = String::from("sweep,seconds,lower_bound\n");
    for (k, (b, t)) in trace.bounds.iter().zip(&trace.seconds).enumerate() {
        csv.push_str(&format!("{k},{t},{b}\n"));
    }
    let last = *trace.bounds.last().expect("trace has the initial row");
    match &a.out {
        Some(path) => {
            write_file(path, csv.as_bytes())?;
            println!("{last}");
        }
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn prepare(dir: &std::path::Path) -> Result<Vec<Prepared>> {
    let data = load_dataset(dir)?;
    if data.is_empty() {
        return Err(BadInput::new(format!("no instances in {}", dir.display())).into());
    }
    data.into_iter()
        .map(|(name, inst)| {
            Prepared::new(name.clone(), inst)
                .map_err(|e| BadInput::new(format!("{name}: {e}")).into())
        })
        .collect()
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = TrainConfig {
        arch: a.arch,
        rounds: a.rounds,
        sweeps: a.sweeps,
        lr: a.lr,
        batch: a.batch,
        clip: a.clip,
        iters: a.iters,
        seed: a.seed,
        predict: a.predict,
    };
    print_config(
        "train",
        &serde_json::json!({ "data": a.data, "out": a.out, "log": a.log, "train": cfg }),
    );
    cfg.validate().map_err(|e| BadInput::new(e.to_string()))?;
    let data = prepare(&a.data)?;
    let mut trainer = Trainer::new(cfg)?;
    let mut log = String::from("iter,loss,mean_rounds,grad_norm_early,grad_norm_late\n");
    for it in 0..trainer.cfg.iters {
        let s = trainer.step(&data, it)?;
        log.push_str(&format!(
            "{},{},{},{},{}\n",
            s.iter, s.loss, s.mean_rounds, s.grad_norm_early, s.grad_norm_late
        ));
        if it % 50 == 0 || it + 1 == trainer.cfg.iters {
            info!("iter {it}: loss {}", s.loss);
        }
    }
    write_file(&a.out, &trainer.nets.to_bytes())?;
    if let Some(path) = &a.log {
        write_file(path, log.as_bytes())?;
    }
    println!("wrote {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    print_config("eval", &a);
    let bytes =
        std::fs::read(&a.weights).with_context(|| format!("reading {}", a.weights.display()))?;
    let nets = NetPair::from_bytes(&bytes)
        .map_err(|e| BadInput::new(format!("{}: {e}", a.weights.display())))?;
    let data = prepare(&a.data)?;
    let cfg = InferenceConfig {
        sweeps: a.sweeps,
        max_rounds: a.rounds,
        time_limit: None,
    };
    let results = evaluate(&data, &nets, &cfg, a.warmup)?;
    let summary = EvalSummary::new(&results);
    let mut csv = String::from("instance,method,E,t_best,g_I\n");
    for r in &results {
        for (method, m) in [("learned", &r.learned), ("baseline", &r.baseline)] {
            csv.push_str(&format!(
                "{},{method},{},{},{}\n",
                r.name, m.best_bound, m.best_time, m.g_integral
            ));
        }
    }
    let rows = [
        (
            "learned",
            summary.learned_best,
            summary.learned_best_time,
            summary.learned_g_integral,
        ),
        (
            "baseline",
            summary.baseline_best,
            summary.baseline_best_time,
            summary.baseline_g_integral,
        ),
    ];
    for (method, e, t, g) in rows {
        csv.push_str(&format!("mean,{method},{e},{t},{g}\n"));
    }
    match &a.out {
        Some(path) => {
            write_file(path, csv.as_bytes())?;
            println!(
                "g_I learned {} baseline {}; final bound not worse on {}/{}",
                summary.learned_g_integral,
                summary.baseline_g_integral,
                summary.not_worse,
                summary.instances
            );
        }
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn check_cmd(a: CheckArgs) -> Result<ExitCode> {
    print_config("check", &a);
    // The suites build many synthetic instances; their warnings are noise here.
    log::set_max_level(log::LevelFilter::Error);
    let fault = a
        .inject
        .as_deref()
        .map(str::parse::<Fault>)
        .transpose()
        .map_err(BadInput::new)?;
    let opts = CheckOptions { fault };
    let results = match &a.suite {
        Some(name) => vec![check::run_suite(name, &opts).ok_or_else(|| {
            BadInput::new(format!(
                "unknown suite `{name}` (one of {})",
                check::SUITES.join(", ")
            ))
        })?],
        None => check::run_all(&opts),
    };
    println!("{:<14} {:<6} {:>8}  detail", "suite", "result", "seconds");
    for r in &results {
        let verdict = if r.passed { "pass" } else { "FAIL" };
        println!(
            "{:<14} {:<6} {:>8.2}  {}",
            r.name, verdict, r.seconds, r.detail
        );
    }
    Ok(if results.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
