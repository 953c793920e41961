//! `cpv`: data generation, training, evaluation and diagnostics for
//! compositional plan vectors.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cpv_core::craftworld::{render, sample_env, Observation};
use cpv_core::eval::{eval_composition, eval_generalization, write_results, Controller, Criterion, EvalResult};
use cpv_core::model::{
    check_layers, check_total_loss, jitter_biases, ConditioningMode, LossWeights, GRAD_TOLERANCE,
};
use cpv_core::planner::{generate_dataset, replay_check, sample_task, Dataset, PlannerConfig};
use cpv_core::train::{item_at, train, TrainConfig};
use cpv_core::{io::write_atomic, Model, Model64};

#[derive(Parser, Debug)]
#[command(name = "cpv", version, about = "Compositional plan vectors on a crafting grid-world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a paired-demonstration dataset.
    GenData(GenDataArgs),
    /// Train a model from a key = value config file.
    Train(TrainArgs),
    /// Evaluate on fresh tasks of a given length.
    Eval(EvalArgs),
    /// Evaluate composition of two references by plan-vector addition.
    Compose(ComposeArgs),
    /// Finite-difference gradient checks.
    GradCheck(GradCheckArgs),
    /// Write a PPM image of a sampled world or a dataset frame.
    Render(RenderArgs),
    /// Replay every trajectory of a dataset through the environment.
    ReplayCheck(ReplayCheckArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    pairs: usize,
    #[arg(long, default_value_t = 1)]
    kmin: usize,
    #[arg(long, default_value_t = 4)]
    kmax: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CriterionArg {
    Contain,
    Exact,
}

impl From<CriterionArg> for Criterion {
    fn from(c: CriterionArg) -> Criterion {
        match c {
            CriterionArg::Contain => Criterion::Contain,
            CriterionArg::Exact => Criterion::Exact,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AgentArg {
    /// The checkpointed model.
    Model,
    /// The planner, as an upper bound.
    Expert,
    /// Uniformly random actions.
    Random,
}

#[derive(Args, Debug)]
struct CommonEval {
    /// Required for `--agent model`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = AgentArg::Model)]
    agent: AgentArg,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = CriterionArg::Contain)]
    criterion: CriterionArg,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    skills: usize,
    #[command(flatten)]
    common: CommonEval,
}

#[derive(Args, Debug)]
struct ComposeArgs {
    /// Skill counts of the two references, e.g. `1,1` or `2+2`.
    #[arg(long, value_parser = parse_arm)]
    arm: (usize, usize),
    #[command(flatten)]
    common: CommonEval,
}

fn parse_arm(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once([',', '+']).ok_or_else(|| format!("expected k1,k2 but got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(a)?, p(b)?))
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Plan-vector size of the checked model.
    #[arg(long, default_value_t = 8)]
    dim: usize,
    /// Coordinates checked per parameter tensor.
    #[arg(long, default_value_t = 20)]
    samples: usize,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    out: PathBuf,
    /// World seed (ignored with --dataset).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Task length used to populate the sampled world.
    #[arg(long, default_value_t = 2)]
    skills: usize,
    /// Render a stored frame instead of a sampled world.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pair: usize,
    /// Demonstration frame index.
    #[arg(long, default_value_t = 0)]
    frame: usize,
}

#[derive(Args, Debug)]
struct ReplayCheckArgs {
    #[arg(long)]
    dataset: PathBuf,
}

fn load_model(common: &CommonEval) -> Result<Option<Model>> {
    match common.agent {
        AgentArg::Model => {
            let path = common.checkpoint.as_ref().context("--checkpoint is required for --agent model")?;
            let (m, _) = Model::load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            log::info!("loaded {} model (dim {}) from {}", m.mode, m.dim(), path.display());
            Ok(Some(m))
        }
        _ => Ok(None),
    }
}

fn controller<'a>(common: &CommonEval, model: Option<&'a Model>) -> Controller<'a> {
    match (common.agent, model) {
        (AgentArg::Model, Some(m)) => Controller::Model(m),
        (AgentArg::Expert, _) => Controller::Expert,
        _ => Controller::Random,
    }
}

fn report(result: &EvalResult, out: Option<&PathBuf>) -> Result<()> {
    println!(
        "{}: {}/{} successes ({:.1}%), mean steps {:.1}",
        result.condition,
        result.successes,
        result.episodes,
        100.0 * result.rate,
        result.mean_steps
    );
    if let Some(path) = out {
        write_results(path, std::slice::from_ref(result))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData(a) => {
            println!("{a:#?}");
            let d = generate_dataset(a.seed, a.pairs, a.kmin, a.kmax, a.noise, &PlannerConfig::default(), a.workers)?;
            d.save(&a.out)?;
            let steps: usize = d.pairs.iter().map(|p| p.demo.len()).sum();
            println!("wrote {} pairs ({} demo steps) to {}", d.len(), steps, a.out.display());
        }
        Command::Train(a) => {
            let cfg = TrainConfig::load(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
            println!("{cfg}");
            let out = train(&cfg)?;
            println!(
                "{} steps; best validation IL {:.4} at step {}; checkpoints {} and {}",
                out.steps,
                out.best_val_il,
                out.best_step,
                cfg.checkpoint.display(),
                cfg.last_checkpoint_path().display()
            );
        }
        Command::Eval(a) => {
            println!("{a:#?}");
            let model = load_model(&a.common)?;
            let c = &a.common;
            let r = eval_generalization(controller(c, model.as_ref()), a.skills, c.episodes, c.seed, c.criterion.into(), c.workers)?;
            report(&r, c.out.as_ref())?;
        }
        Command::Compose(a) => {
            println!("{a:#?}");
            let model = load_model(&a.common)?;
            let c = &a.common;
            let r = eval_composition(controller(c, model.as_ref()), a.arm, c.episodes, c.seed, c.criterion.into(), c.workers)?;
            report(&r, c.out.as_ref())?;
        }
        Command::GradCheck(a) => {
            println!("{a:#?}");
            return grad_check(&a);
        }
        Command::Render(a) => {
            println!("{a:#?}");
            let obs = render_target(&a)?;
            write_atomic(&a.out, &obs.to_ppm())?;
            println!("wrote {}", a.out.display());
        }
        Command::ReplayCheck(a) => {
            println!("{a:#?}");
            let d = Dataset::load(&a.dataset)?;
            if d.is_empty() {
                log::warn!("{} holds no pairs", a.dataset.display());
            }
            let r = replay_check(&d);
            for issue in &r.issues {
                println!("pair {}: {}", issue.pair, issue.detail);
            }
            println!("{}/{} pairs passed, {} failed", r.passed, r.checked, r.checked - r.passed);
            return Ok(r.all_passed());
        }
    }
    Ok(true)
}

fn render_target(a: &RenderArgs) -> Result<Observation> {
    match &a.dataset {
        Some(path) => {
            let d = Dataset::load(path)?;
            let Some(p) = d.pairs.get(a.pair) else { bail!("pair {} out of range ({} pairs)", a.pair, d.len()) };
            let Some(o) = p.demo.observations.get(a.frame) else {
                bail!("frame {} out of range ({} frames)", a.frame, p.demo.observations.len())
            };
            Ok(o.clone())
        }
        None => {
            let task = sample_task(a.seed, a.skills, a.skills);
            Ok(render(&sample_env(a.seed, &task)?))
        }
    }
}

fn grad_check(a: &GradCheckArgs) -> Result<bool> {
    let mut ok = true;
    let mut line = |name: &str, r: &cpv_core::nn::GradCheckReport| {
        let pass = r.max_rel_error <= GRAD_TOLERANCE && r.checked > 0;
        ok &= pass;
        println!(
            "{:<34} max rel err {:.2e}  checked {:>4}  skipped {:>3}  {}",
            name,
            r.max_rel_error,
            r.checked,
            r.skipped,
            if pass { "ok" } else { "FAIL" }
        );
    };
    for (name, r) in check_layers(a.seed) {
        line(&name, &r);
    }
    let d = generate_dataset(a.seed, 2, 1, 2, 0.1, &PlannerConfig::default(), 1)?;
    let (p0, p1) = (&d.pairs[0], &d.pairs[1]);
    let batch = cpv_core::model::Batch {
        items: vec![
            item_at(p0, p0.demo.len() / 2, (p0.demo.len() - 1).max(1), Some(1)),
            item_at(p1, 0, (p1.demo.len() / 2).max(1), Some(0)),
        ],
    };
    let mut model = Model64::new(ConditioningMode::Cpv, a.dim, a.seed);
    jitter_biases(&mut model, a.seed ^ 1);
    let weights = LossWeights { hom: 1.0, pair: 1.0 };
    for (name, r) in check_total_loss(&model, &batch, weights, a.samples, a.seed)? {
        line(&format!("total_loss/{name}"), &r);
    }
    println!("{}", if ok { "all gradients within tolerance" } else { "gradient check FAILED" });
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CPV_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
