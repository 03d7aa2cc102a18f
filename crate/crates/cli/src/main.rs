use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fbi_core::flow2tactile::SearchMode;
use fbi_core::perception::{FusionMethod, TactileMode};
use fbi_core::pipeline::{
    evaluate_policy, gradcheck_suite, load_config, load_flow2tactile, load_policy, run_protocol, save_flow2tactile,
    save_policy, train_flow2tactile_pipeline, train_policy, eval_seed, EvalReport, FbiPolicy, PolicyMode, PolicySpec,
    RunConfig, TactileRepr, TrainState,
};
use fbi_core::toyenv::{generate_demos_with_mode, read_dataset, write_dataset, Task};
use fbi_core::{par, Error, Result};

mod report;

#[derive(Parser)]
#[command(name = "fbi", version, about = "Toy visuotactile imitation learning with one-step shortcut policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the scripted expert and write a trajectory dataset.
    GenData(GenData),
    /// Train the flow generator and contact search head.
    TrainF2t(TrainF2t),
    /// Train a policy on a dataset.
    TrainPolicy(TrainPolicy),
    /// Closed-loop evaluation of a policy checkpoint.
    Eval(Eval),
    /// Check every training loss against finite differences.
    Gradcheck(Gradcheck),
    /// Sweep one ablation switch over the configured seeds.
    Ablate(Ablate),
    /// Merge evaluation CSVs into a table and SVG plots.
    Report(Report),
}

#[derive(Args)]
struct ConfigArg {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => load_config(p),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Args)]
struct GenData {
    #[arg(long, value_parser = parse_task)]
    task: Task,
    /// Number of successful demonstrations.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Store pseudo-force readings instead of binary contacts.
    #[arg(long)]
    continuous: bool,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct TrainF2t {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Search-head input; overrides the config.
    #[arg(long, value_parser = parse_search_mode)]
    mode: Option<SearchMode>,
    /// Write the accuracy report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct TrainPolicy {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Flow2Tactile checkpoint; required in vision-only mode.
    #[arg(long)]
    f2t: Option<PathBuf>,
    /// Continue from this checkpoint, including its optimizer state.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides the configured epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Evaluate during training and append rows to this CSV.
    #[arg(long)]
    eval_csv: Option<PathBuf>,
    /// Per-epoch mean losses.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    policy: PathBuf,
    #[arg(long, value_parser = parse_task)]
    task: Task,
    /// Euler steps per action sample.
    #[arg(long, default_value_t = 1)]
    steps: usize,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Record wall-clock latency per inference.
    #[arg(long)]
    timing: bool,
    /// Summary JSON path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Append `seed,checkpoint_epoch,success_rate` to this CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct Gradcheck {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum Sweep {
    /// Dense binary, dense continuous, sparse and no tactile input.
    Tactile,
    /// Transformer, MLP and additive fusion.
    Fusion,
    /// Flow2Tactile against PC-to-Tactile contact accuracy.
    Contact,
}

#[derive(Args)]
struct Ablate {
    #[arg(long, value_enum)]
    sweep: Sweep,
    /// Demonstrations generated for the sweep.
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Output table CSV.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct Report {
    /// Evaluation CSVs with `seed,checkpoint_epoch,success_rate` rows; the
    /// file stem names the variant.
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// Summary JSONs from `eval` whose latency is plotted.
    #[arg(long, num_args = 1..)]
    summaries: Vec<PathBuf>,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    /// Output directory for `report.csv`, `success.svg` and `latency.svg`.
    #[arg(long)]
    out: PathBuf,
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_search_mode(s: &str) -> std::result::Result<SearchMode, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("expected flow or pc, got {s}"))
}

fn run_gen_data(a: &GenData) -> Result<()> {
    let cfg = a.config.load()?;
    let mode = if a.continuous { TactileMode::Continuous } else { TactileMode::Binary };
    let ds = generate_demos_with_mode(&cfg.env, a.task, a.n, a.seed, mode)?;
    write_dataset(&ds, &a.out)?;
    let steps: usize = ds.trajectories.iter().map(|t| t.len()).sum();
    println!("wrote {} trajectories ({steps} steps) to {}", ds.trajectories.len(), a.out.display());
    Ok(())
}

fn run_train_f2t(a: &TrainF2t) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(m) = a.mode {
        cfg.f2t.mode = m;
    }
    let ds = read_dataset(&a.data)?;
    let (f2t, report) = train_flow2tactile_pipeline(&ds, &cfg.env, &cfg.f2t, cfg.policy.norm, a.seed)?;
    save_flow2tactile(&a.out, &f2t)?;
    let text = serde_json::to_string_pretty(&report)?;
    match &a.report {
        Some(p) => fs::write(p, text)?,
        None => println!("{text}"),
    }
    println!(
        "held-out accuracy {:.4} precision {:.4} recall {:.4} over {} frames",
        report.holdout.accuracy, report.holdout.precision, report.holdout.recall, report.holdout.frames
    );
    Ok(())
}

fn append_eval_rows(path: &Path, rows: &[(u64, usize, f64)]) -> Result<()> {
    let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
    let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(["seed", "checkpoint_epoch", "success_rate"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn run_train_policy(a: &TrainPolicy) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let ds = read_dataset(&a.data)?;
    if ds.manifest.task != cfg.task {
        eprintln!("note: dataset task {} overrides config task {}", ds.manifest.task, cfg.task);
        cfg.task = ds.manifest.task;
    }
    let (mut policy, mut state) = match &a.resume {
        Some(p) => {
            let (policy, state) = load_policy(p)?;
            let state = state.ok_or_else(|| Error::Config("checkpoint has no optimizer state".into()))?;
            (policy, state)
        }
        None => {
            let policy = FbiPolicy::new(PolicySpec::from_run(&cfg), fbi_core::rng::derive_seed(a.seed, &[0x90]))?;
            let state = TrainState::new(&policy);
            (policy, state)
        }
    };
    if let Some(p) = &a.f2t {
        policy.attach_flow2tactile(load_flow2tactile(p)?)?;
    }
    if policy.spec.mode == PolicyMode::VisionOnly && policy.spec.representation != TactileRepr::None && policy.f2t.is_none() {
        return Err(Error::Config("vision-only mode needs --f2t".into()));
    }
    let task = cfg.task;
    let mut rows = Vec::new();
    let report = train_policy(&mut policy, &mut state, &ds, &cfg.train, a.seed, |epoch, p| {
        if a.eval_csv.is_none() {
            return Ok(None);
        }
        let sr = evaluate_policy(p, task, &cfg.eval, eval_seed(a.seed))?.success_rate;
        println!("epoch {epoch}: success rate {sr:.3}");
        rows.push((a.seed, epoch, sr));
        Ok(Some(sr))
    })?;
    save_policy(&a.out, &policy, Some(&state))?;
    if let Some(p) = &a.eval_csv {
        append_eval_rows(p, &rows)?;
    }
    if let Some(p) = &a.loss_csv {
        let mut w = csv::Writer::from_path(p)?;
        w.write_record(["epoch", "loss"])?;
        let first = state.epoch - report.losses.len();
        for (i, l) in report.losses.iter().enumerate() {
            w.serialize((first + i + 1, l))?;
        }
        w.flush()?;
    }
    if let Some(l) = report.losses.last() {
        println!("trained to epoch {} (final loss {l:.5}); wrote {}", state.epoch, a.out.display());
    }
    Ok(())
}

fn summary_json(r: &EvalReport, checkpoint_epoch: Option<usize>, seed: u64, n_steps: usize) -> serde_json::Value {
    let sr: Vec<f64> = r.episodes.iter().map(|e| f64::from(u8::from(e.success))).collect();
    let n = sr.len() as f64;
    let mean = r.success_rate;
    let std = (sr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut v = serde_json::json!({
        "seed": seed,
        "checkpoint_epoch": checkpoint_epoch,
        "episodes": r.episodes.len(),
        "n_steps": n_steps,
        "mean": mean,
        "std": std,
        "nfe": r.nfe,
    });
    if let Some(l) = r.latency_ms {
        v["latency_ms"] = serde_json::json!(l);
    }
    v
}

fn run_eval(a: &Eval) -> Result<()> {
    let cfg = a.config.load()?;
    let (policy, state) = load_policy(&a.policy)?;
    let mut ev = cfg.eval.clone();
    ev.n_steps = a.steps;
    ev.timing = a.timing;
    if let Some(n) = a.episodes {
        ev.episodes = n;
    }
    let report = evaluate_policy(&policy, a.task, &ev, a.seed)?;
    let epoch = state.map(|s| s.epoch);
    let text = serde_json::to_string_pretty(&summary_json(&report, epoch, a.seed, a.steps))?;
    match &a.out {
        Some(p) => fs::write(p, &text)?,
        None => println!("{text}"),
    }
    if let Some(p) = &a.csv {
        append_eval_rows(p, &[(a.seed, epoch.unwrap_or(0), report.success_rate)])?;
    }
    Ok(())
}

fn run_gradcheck(a: &Gradcheck) -> Result<bool> {
    let entries = gradcheck_suite(a.seed)?;
    let mut worst: f64 = 0.0;
    for e in &entries {
        println!("{:<28} params {:>5}  max rel err {:.3e}", e.name, e.params, e.max_rel_error);
        worst = worst.max(e.max_rel_error);
    }
    println!("max relative error {worst:.3e}");
    Ok(worst < 1e-4)
}

fn run_ablate(a: &Ablate) -> Result<()> {
    let base = a.config.load()?;
    let ds = generate_demos_with_mode(&base.env, base.task, a.n, a.data_seed, TactileMode::Continuous)?;
    let mut w = csv::Writer::from_path(&a.out)?;
    match a.sweep {
        Sweep::Contact => {
            w.write_record(["variant", "seed", "accuracy", "precision", "recall", "f1"])?;
            for (name, mode) in [("flow2tactile", SearchMode::Flow), ("pc2tactile", SearchMode::Pc)] {
                let mut f = base.f2t.clone();
                f.mode = mode;
                for &seed in &base.train.seeds {
                    let (_, rep) = train_flow2tactile_pipeline(&ds, &base.env, &f, base.policy.norm, seed)?;
                    let h = rep.holdout;
                    println!("{name} seed {seed}: accuracy {:.4}", h.accuracy);
                    w.serialize((name, seed, h.accuracy, h.precision, h.recall, h.f1))?;
                }
            }
        }
        Sweep::Tactile | Sweep::Fusion => {
            let variants: Vec<(&str, RunConfig)> = if a.sweep == Sweep::Tactile {
                [
                    ("dense-binary", TactileRepr::DenseBinary),
                    ("dense-continuous", TactileRepr::DenseContinuous),
                    ("sparse", TactileRepr::Sparse),
                    ("none", TactileRepr::None),
                ]
                .into_iter()
                .map(|(n, r)| (n, RunConfig { representation: r, mode: PolicyMode::Visuotactile, ..base.clone() }))
                .collect()
            } else {
                [("transformer", FusionMethod::Transformer), ("mlp", FusionMethod::Mlp), ("add", FusionMethod::Add)]
                    .into_iter()
                    .map(|(n, f)| (n, RunConfig { fusion: f, mode: PolicyMode::Visuotactile, ..base.clone() }))
                    .collect()
            };
            w.write_record(["variant", "seed", "top_k_mean"])?;
            for (name, cfg) in variants {
                let (summary, _) = run_protocol(&cfg, &ds, None)?;
                println!("{name}: {:.3} ± {:.3}", summary.mean, summary.std);
                for (seed, v) in summary.per_seed {
                    w.serialize((name, seed, v))?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData(a) => run_gen_data(&a)?,
        Command::TrainF2t(a) => run_train_f2t(&a)?,
        Command::TrainPolicy(a) => run_train_policy(&a)?,
        Command::Eval(a) => run_eval(&a)?,
        Command::Gradcheck(a) => return run_gradcheck(&a),
        Command::Ablate(a) => run_ablate(&a)?,
        Command::Report(a) => report::run(&a.inputs, &a.summaries, a.top_k, &a.out)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("FBI_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        par::init_workers(n);
    }
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
