//! Command-line entry point: train, evaluate, run the expert, solve an
//! assignment problem, analyze recorded traces.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use cluster_alloc::analysis::{cluster_decay_fit, detect_clusters};
use cluster_alloc::assignment::AssignmentProblem;
use cluster_alloc::config::RunConfig;
use cluster_alloc::episode::StepRecord;
use cluster_alloc::evaluation::{evaluate, Controller, EvalSummary};
use cluster_alloc::expert::ExpertGains;
use cluster_alloc::io::{output_root, read_jsonl, Header, JsonlWriter, OUTPUT_ENV};
use cluster_alloc::neuro::tape::Mat;
use cluster_alloc::neuro::Checkpoint;
use cluster_alloc::policy::Actor;
use cluster_alloc::training::Trainer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "cluster-alloc", version, about = "Multi-agent resource allocation: training, evaluation and analysis")]
struct Cli {
    /// Artifact root directory.
    #[arg(long, global = true, env = OUTPUT_ENV)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train actor and critic with PPO; writes metrics, timing and a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a checkpoint with deterministic actions.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides the config stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the per-step trace.
        #[arg(long)]
        trace: bool,
    },
    /// Roll out the centralized expert and write its trace.
    ExpertRollout {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Solve an assignment problem given as JSON `{distances, supply, demand}`.
    Solve {
        #[arg(long)]
        problem: PathBuf,
    },
    /// Detect state clusters and decay rates in a policy trace.
    Analyze {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        #[arg(long, default_value_t = 20)]
        window: usize,
        /// Supplies dt for the decay fit; defaults apply otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemFile {
    distances: Vec<Vec<f64>>,
    supply: Vec<Vec<f64>>,
    demand: Vec<Vec<f64>>,
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<Mat> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        bail!("{what}: rows have different lengths");
    }
    Ok(Mat::from_shape_vec((rows.len(), cols), rows.concat())?)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn expert_gains(cfg: &RunConfig) -> ExpertGains {
    ExpertGains { k_p: cfg.expert.k_p, k_rep: cfg.expert.k_rep, eps_safe: cfg.expert_eps_safe() }
}

fn summary_json(name: &str, s: &EvalSummary) -> serde_json::Value {
    json!({ "record": "evaluation", "controller": name, "mean": s.mean, "std": s.std, "returns": s.returns })
}

fn write_trace(path: &Path, header: &Header, records: &[StepRecord]) -> Result<()> {
    let mut w = JsonlWriter::create(path, header)?;
    for r in records {
        w.write(r)?;
    }
    w.finish()?;
    Ok(())
}

fn train(out: &Path, config: Option<&Path>, seed: u64) -> Result<()> {
    let cfg = load_config(config)?;
    let hash = cfg.hash();
    let dir = out.join(format!("train-seed{seed}"));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml_string())?;
    let mut metrics = JsonlWriter::create(&dir.join("metrics.jsonl"), &Header::new("metrics", &hash, seed))?;
    let mut timing = JsonlWriter::create(&dir.join("timing.jsonl"), &Header::new("timing", &hash, seed))?;
    let start = Instant::now();
    let mut trainer = Trainer::new(&cfg, seed)?;
    for _ in 0..cfg.train.iterations {
        let m = trainer.iterate()?;
        metrics.write(&m)?;
        timing.write(&json!({ "iteration": m.iteration, "wall_seconds": start.elapsed().as_secs_f64() }))?;
        eprintln!(
            "iteration {:>4}  reward {:>8.3}  policy {:>8.4}  value {:>8.4}  c {:>7.3}",
            m.iteration, m.mean_episode_reward, m.update.policy_loss, m.update.value_loss, m.update.actor_contraction
        );
    }
    metrics.finish()?;
    timing.finish()?;
    trainer.checkpoint()?.save(&dir.join("checkpoint.json"))?;

    let eval_seed = seed.wrapping_add(1);
    let (policy, _) = evaluate(Controller::Policy(trainer.actor()), &cfg.env, &cfg.rewards, cfg.train.eval_episodes, eval_seed, false)?;
    let (expert, _) = evaluate(Controller::Expert(expert_gains(&cfg)), &cfg.env, &cfg.rewards, cfg.train.eval_episodes, eval_seed, false)?;
    let (random, _) = evaluate(Controller::Random, &cfg.env, &cfg.rewards, cfg.train.eval_episodes, eval_seed, false)?;
    let mut report = JsonlWriter::create(&dir.join("report.jsonl"), &Header::new("report", &hash, seed))?;
    for (name, s) in [("policy", &policy), ("expert", &expert), ("random", &random)] {
        report.write(&summary_json(name, s))?;
    }
    report.finish()?;
    println!("policy {:.4} ± {:.4}  expert {:.4}  random {:.4}", policy.mean, policy.std, expert.mean, random.mean);
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn eval(out: &Path, checkpoint: &Path, config: Option<&Path>, episodes: usize, seed: u64, trace: bool) -> Result<()> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
    let cfg = match config {
        Some(p) => load_config(Some(p))?,
        None => serde_json::from_value(ck.metadata["config"].clone()).context("checkpoint carries no run config")?,
    };
    cfg.validate()?;
    let mut actor = Actor::new(&cfg.env, &cfg.model, &mut ChaCha8Rng::seed_from_u64(0));
    ck.restore("actor", actor.net_mut().params_mut())?;
    let (summary, records) = evaluate(Controller::Policy(&actor), &cfg.env, &cfg.rewards, episodes, seed, trace)?;
    let hash = cfg.hash();
    let dir = out.join(format!("eval-seed{seed}"));
    let mut report = JsonlWriter::create(&dir.join("report.jsonl"), &Header::new("report", &hash, seed))?;
    report.write(&summary_json("policy", &summary))?;
    report.finish()?;
    if trace {
        write_trace(&dir.join("trace.jsonl"), &Header::new("trace", &hash, seed), &records)?;
    }
    println!("episode reward {:.4} ± {:.4} over {episodes} episodes", summary.mean, summary.std);
    Ok(())
}

fn expert_rollout(out: &Path, config: Option<&Path>, episodes: usize, seed: u64) -> Result<()> {
    let cfg = load_config(config)?;
    let (summary, records) = evaluate(Controller::Expert(expert_gains(&cfg)), &cfg.env, &cfg.rewards, episodes, seed, true)?;
    let hash = cfg.hash();
    let dir = out.join(format!("expert-seed{seed}"));
    write_trace(&dir.join("trace.jsonl"), &Header::new("trace", &hash, seed), &records)?;
    let mut report = JsonlWriter::create(&dir.join("report.jsonl"), &Header::new("report", &hash, seed))?;
    report.write(&summary_json("expert", &summary))?;
    report.finish()?;
    println!("expert episode reward {:.4} ± {:.4}; trace in {}", summary.mean, summary.std, dir.display());
    Ok(())
}

fn solve(problem: &Path) -> Result<()> {
    let text = fs::read_to_string(problem).with_context(|| format!("reading {}", problem.display()))?;
    let p: ProblemFile = serde_json::from_str(&text)?;
    let problem = AssignmentProblem::new(
        matrix(&p.distances, "distances")?,
        matrix(&p.supply, "supply")?,
        matrix(&p.demand, "demand")?,
    )?;
    let sol = problem.solve_exact()?;
    let binary: Vec<Vec<u8>> = sol.assignment.to_binary().rows().into_iter().map(|r| r.to_vec()).collect();
    println!("{}", json!({ "assignment": binary, "objective": sol.objective }));
    Ok(())
}

fn analyze(out: &Path, trace: &Path, tol: f64, window: usize, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let (header, records) = read_jsonl(trace)?;
    let steps: Vec<StepRecord> = records.into_iter().map(serde_json::from_value).collect::<std::result::Result<_, _>>()?;
    let episodes = steps.iter().map(|s| s.episode).max().map_or(0, |e| e + 1);
    let dir = out.join(format!("analysis-seed{}", header.seed));
    let mut report = JsonlWriter::create(&dir.join("clusters.jsonl"), &Header::new("clusters", &header.config_hash, header.seed))?;
    for episode in 0..episodes {
        let ep: Vec<&StepRecord> = steps.iter().filter(|s| s.episode == episode).collect();
        let states: Vec<Mat> = ep
            .iter()
            .filter_map(|s| s.state.as_ref())
            .map(|rows| matrix(rows, "state"))
            .collect::<Result<_>>()?;
        if states.is_empty() {
            bail!("trace has no recurrent states; record it with `eval --trace`");
        }
        let clusters = detect_clusters(&states, tol, window.min(states.len()))?;
        let fits: Vec<serde_json::Value> = match cluster_decay_fit(&states, &clusters, cfg.env.dt) {
            Ok(fits) => fits.iter().map(|f| json!(f)).collect(),
            Err(e) => vec![json!({ "error": e.to_string() })],
        };
        let groups: Vec<Vec<usize>> = {
            let last = ep.last().expect("episode has steps");
            let m = last.assignment.iter().max().map_or(0, |m| m + 1);
            (0..m).map(|c| (0..last.assignment.len()).filter(|&i| last.assignment[i] == c).collect()).collect()
        };
        report.write(&json!({
            "record": "episode",
            "episode": episode,
            "steps": states.len(),
            "clusters": clusters,
            "assignment_groups": groups,
            "decay_fits": fits,
        }))?;
        println!("episode {episode}: {} clusters {:?}", clusters.len(), clusters);
    }
    report.finish()?;
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let out = output_root(cli.out.as_deref());
    match cli.command {
        Command::Train { config, seed } => train(&out, config.as_deref(), seed),
        Command::Eval { checkpoint, config, episodes, seed, trace } => eval(&out, &checkpoint, config.as_deref(), episodes, seed, trace),
        Command::ExpertRollout { config, episodes, seed } => expert_rollout(&out, config.as_deref(), episodes, seed),
        Command::Solve { problem } => solve(&problem),
        Command::Analyze { trace, tol, window, config } => analyze(&out, &trace, tol, window, config.as_deref()),
    }
}
