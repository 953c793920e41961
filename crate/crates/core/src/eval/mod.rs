//! Closed-loop evaluation: rollouts, success scoring, generalization to
//! longer tasks, and composition by plan-vector addition.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::craftworld::{render, Action, GridState, Observation, SkillEvent};
use crate::error::{CpvError, Result};
use crate::model::{argmax, obs_pixels, stack_images, ConditioningMode, CpvModel, Img, PlanVector, PolicyContext};
use crate::planner::{multiset, plan_task, sample_task, solvable_env, DemoPair, ExpertPolicy, PlannerConfig, Trajectory};
use crate::{seed, Scalar};

/// Episode length limits for 4, 8 and 16 skill references.
pub const STANDARD_HORIZONS: [(usize, usize); 3] = [(4, 160), (8, 280), (16, 550)];
pub const HORIZON_PROBES: usize = 200;
const HORIZON_PROBE_SEED: u64 = 0x686f_7269_7a6f_6e;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Criterion {
    /// The task's skill multiset is contained in the emitted events.
    #[default]
    Contain,
    /// The multisets are equal.
    Exact,
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Contain => "contain",
            Criterion::Exact => "exact",
        })
    }
}

impl FromStr for Criterion {
    type Err = CpvError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contain" | "containment" => Ok(Criterion::Contain),
            "exact" => Ok(Criterion::Exact),
            other => Err(CpvError::Config(format!("unknown criterion {other:?} (contain|exact)"))),
        }
    }
}

pub fn score(events: &[SkillEvent], task: &[SkillEvent], criterion: Criterion) -> bool {
    let (have, want) = (multiset(events), multiset(task));
    match criterion {
        Criterion::Contain => have.iter().zip(&want).all(|(h, w)| h >= w),
        Criterion::Exact => have == want,
    }
}

/// Three times the mean noise-free expert length over 200 probe tasks of
/// `skills` skills, or the standard value for 4, 8 and 16.
pub fn horizon_for(skills: usize) -> Result<usize> {
    if let Some(&(_, h)) = STANDARD_HORIZONS.iter().find(|(k, _)| *k == skills) {
        return Ok(h);
    }
    if skills == 0 {
        return Err(CpvError::Invalid("a task needs at least one skill".into()));
    }
    let cfg = PlannerConfig::default();
    let base = seed::derive(HORIZON_PROBE_SEED, skills as u64);
    let mut total = 0usize;
    for i in 0..HORIZON_PROBES {
        let s = seed::derive(base, i as u64);
        let task = sample_task(seed::derive(s, 0), skills, skills);
        total += plan_task(seed::derive(s, 1), &task, 0.0, &cfg)?.len();
    }
    Ok((3 * total).div_ceil(HORIZON_PROBES))
}

/// What a model is conditioned on for one episode.
#[derive(Clone, Debug)]
pub enum Conditioning {
    /// Reference plan vector (CPV and TE modes).
    Plan(PlanVector<f32>),
    /// Reference endpoint pixels (naive mode).
    Frames { first: Vec<f32>, last: Vec<f32> },
}

impl Conditioning {
    /// Conditioning from a reference trajectory's endpoints.
    pub fn from_reference(model: &CpvModel<f32>, first: &Observation, last: &Observation) -> Result<Conditioning> {
        Ok(match model.mode {
            ConditioningMode::Naive => Conditioning::Frames { first: obs_pixels(first), last: obs_pixels(last) },
            _ => Conditioning::Plan(model.embed_obs(first, last)?),
        })
    }

    /// Sum of plan vectors, or the average of reference frames in naive mode.
    pub fn combine(&self, other: &Conditioning) -> Result<Conditioning> {
        match (self, other) {
            (Conditioning::Plan(a), Conditioning::Plan(b)) => Ok(Conditioning::Plan(a.add(b))),
            (Conditioning::Frames { first: f1, last: l1 }, Conditioning::Frames { first: f2, last: l2 }) => {
                let avg = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
                Ok(Conditioning::Frames { first: avg(f1, f2), last: avg(l1, l2) })
            }
            _ => Err(CpvError::Invalid("cannot combine conditioning of different kinds".into())),
        }
    }
}

/// A closed-loop controller.
pub trait Agent {
    fn act(&mut self, state: &GridState, obs: &Observation) -> Result<Action>;
    fn observe(&mut self, _events: &[SkillEvent]) {}
}

/// Greedy policy of a trained model.
pub struct ModelAgent<'a> {
    model: &'a CpvModel<f32>,
    cond: Conditioning,
    first: Option<Observation>,
}

impl<'a> ModelAgent<'a> {
    pub fn new(model: &'a CpvModel<f32>, cond: Conditioning) -> Self {
        ModelAgent { model, cond, first: None }
    }

    pub fn logits(&mut self, obs: &Observation) -> Result<[f32; Action::COUNT]> {
        let first = self.first.get_or_insert_with(|| obs.clone());
        match (&self.cond, self.model.mode) {
            (Conditioning::Plan(v), ConditioningMode::Cpv) => {
                let progress = self.model.embed_obs(first, obs)?;
                self.model.policy_logits(obs, PolicyContext::Cpv { reference: v, progress: &progress })
            }
            (Conditioning::Plan(v), ConditioningMode::Te) => self.model.policy_logits(obs, PolicyContext::Te { reference: v }),
            (Conditioning::Frames { first: rf, last: rl }, ConditioningMode::Naive) => self.model.policy_logits(
                obs,
                PolicyContext::Naive { ref_first: Img::Pixels(rf), ref_last: Img::Pixels(rl), first: Img::Obs(first) },
            ),
            (_, mode) => Err(CpvError::Invalid(format!("conditioning does not match {mode} model"))),
        }
    }
}

impl Agent for ModelAgent<'_> {
    fn act(&mut self, _state: &GridState, obs: &Observation) -> Result<Action> {
        let logits = self.logits(obs)?;
        Ok(Action::from_index(argmax(&logits)).expect("six logits"))
    }
}

/// The planner acting on privileged state.
pub struct ExpertAgent(pub ExpertPolicy);

impl Agent for ExpertAgent {
    fn act(&mut self, state: &GridState, _obs: &Observation) -> Result<Action> {
        Ok(self.0.act(state))
    }

    fn observe(&mut self, events: &[SkillEvent]) {
        events.iter().for_each(|&e| self.0.observe(e));
    }
}

/// Uniformly random actions.
pub struct RandomAgent(pub ChaCha8Rng);

impl Agent for RandomAgent {
    fn act(&mut self, _state: &GridState, _obs: &Observation) -> Result<Action> {
        Ok(Action::ALL[self.0.gen_range(0..Action::COUNT)])
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub events: Vec<SkillEvent>,
    pub steps: usize,
    pub success: bool,
}

/// Runs `agent` from `start` until the task is scored successful or
/// `horizon` actions have been taken.
pub fn rollout(
    agent: &mut dyn Agent,
    start: &GridState,
    task: &[SkillEvent],
    criterion: Criterion,
    horizon: usize,
) -> Result<Episode> {
    if horizon == 0 {
        return Err(CpvError::Invalid("horizon must be at least 1".into()));
    }
    let mut state = start.clone();
    let mut events = Vec::new();
    for step in 1..=horizon {
        let obs = render(&state);
        let action = agent.act(&state, &obs)?;
        let out = state.step(action);
        agent.observe(out.events());
        events.extend_from_slice(out.events());
        state = out.next_state;
        if score(&events, task, criterion) {
            return Ok(Episode { events, steps: step, success: true });
        }
    }
    Ok(Episode { events, steps: horizon, success: false })
}

/// Who acts during evaluation.
#[derive(Clone, Copy)]
pub enum Controller<'a> {
    Model(&'a CpvModel<f32>),
    Expert,
    Random,
}

impl Controller<'_> {
    fn name(&self) -> String {
        match self {
            Controller::Model(m) => m.mode.to_string(),
            Controller::Expert => "expert".into(),
            Controller::Random => "random".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub condition: String,
    pub criterion: Criterion,
    pub seed: u64,
    pub episodes: usize,
    pub successes: usize,
    pub rate: f64,
    /// Mean steps over successful episodes; NaN if there were none.
    pub mean_steps: f64,
}

impl EvalResult {
    fn from_episodes(condition: String, criterion: Criterion, seed: u64, eps: &[Episode]) -> EvalResult {
        let wins: Vec<&Episode> = eps.iter().filter(|e| e.success).collect();
        let mean_steps = if wins.is_empty() {
            f64::NAN
        } else {
            wins.iter().map(|e| e.steps as f64).sum::<f64>() / wins.len() as f64
        };
        EvalResult {
            condition,
            criterion,
            seed,
            episodes: eps.len(),
            successes: wins.len(),
            rate: if eps.is_empty() { 0.0 } else { wins.len() as f64 / eps.len() as f64 },
            mean_steps,
        }
    }
}

pub const RESULTS_HEADER: &str = "condition,episodes,successes,rate,mean_steps";

pub fn write_results(path: &Path, results: &[EvalResult]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{RESULTS_HEADER}")?;
    for r in results {
        writeln!(out, "{},{},{},{:.4},{:.2}", r.condition, r.episodes, r.successes, r.rate, r.mean_steps)?;
    }
    crate::io::write_atomic(path, &out)?;
    Ok(())
}

fn run_episodes<F>(episodes: usize, workers: usize, f: F) -> Result<Vec<Episode>>
where
    F: Fn(usize) -> Result<Episode> + Sync + Send,
{
    if workers <= 1 {
        return (0..episodes).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CpvError::Invalid(format!("thread pool: {e}")))?;
    pool.install(|| (0..episodes).into_par_iter().map(f).collect())
}

fn expert_reference(seed: u64, task: &[SkillEvent], cfg: &PlannerConfig) -> Result<Trajectory> {
    plan_task(seed, task, 0.0, cfg)
}

fn act_episode(
    policy: Controller<'_>,
    cond: impl FnOnce(&CpvModel<f32>) -> Result<Conditioning>,
    start: &GridState,
    task: &[SkillEvent],
    criterion: Criterion,
    horizon: usize,
    ep_seed: u64,
) -> Result<Episode> {
    match policy {
        Controller::Model(m) => rollout(&mut ModelAgent::new(m, cond(m)?), start, task, criterion, horizon),
        Controller::Expert => rollout(&mut ExpertAgent(ExpertPolicy::new(task)), start, task, criterion, horizon),
        Controller::Random => {
            rollout(&mut RandomAgent(seed::rng(seed::derive(ep_seed, 5))), start, task, criterion, horizon)
        }
    }
}

/// Evaluation on fresh `skills`-skill tasks conditioned on an expert reference
/// recorded in a different environment.
pub fn eval_generalization(
    policy: Controller<'_>,
    skills: usize,
    episodes: usize,
    seed: u64,
    criterion: Criterion,
    workers: usize,
) -> Result<EvalResult> {
    let horizon = horizon_for(skills)?;
    let cfg = PlannerConfig::default();
    let eps = run_episodes(episodes, workers, |ep| {
        let e = seed::derive(seed, ep as u64);
        let task = sample_task(seed::derive(e, 0), skills, skills);
        let reference = expert_reference(seed::derive(e, 1), &task, &cfg)?;
        let (_, start) = solvable_env(seed::derive(e, 2), &task, &cfg)?;
        let cond = |m: &CpvModel<f32>| Conditioning::from_reference(m, reference.first_obs(), reference.last_obs());
        act_episode(policy, cond, &start, &task, criterion, horizon, e)
    })?;
    Ok(EvalResult::from_episodes(format!("{}/skills={skills}/{criterion}", policy.name()), criterion, seed, &eps))
}

/// Composition: two independent references whose conditioning is added; the
/// agent must perform the union of both tasks. An arm `(k, 0)` pairs the
/// first reference with a no-op reference `(o, o)`.
pub fn eval_composition(
    policy: Controller<'_>,
    arm: (usize, usize),
    episodes: usize,
    seed: u64,
    criterion: Criterion,
    workers: usize,
) -> Result<EvalResult> {
    let (k1, k2) = arm;
    if k1 == 0 {
        return Err(CpvError::Invalid("the first composition reference needs at least one skill".into()));
    }
    let horizon = horizon_for(k1 + k2)?;
    let cfg = PlannerConfig::default();
    let eps = run_episodes(episodes, workers, |ep| {
        let e = seed::derive(seed, ep as u64);
        let t1 = sample_task(seed::derive(e, 0), k1, k1);
        let r1 = expert_reference(seed::derive(e, 1), &t1, &cfg)?;
        let (t2, r2) = if k2 > 0 {
            let t2 = sample_task(seed::derive(e, 3), k2, k2);
            let r2 = expert_reference(seed::derive(e, 4), &t2, &cfg)?;
            (t2, Some(r2))
        } else {
            (Vec::new().into(), None)
        };
        let union = t1.concat(&t2);
        let (_, start) = solvable_env(seed::derive(e, 2), &union, &cfg)?;
        let cond = |m: &CpvModel<f32>| {
            let c1 = Conditioning::from_reference(m, r1.first_obs(), r1.last_obs())?;
            let c2 = match &r2 {
                Some(r) => Conditioning::from_reference(m, r.first_obs(), r.last_obs())?,
                None => Conditioning::from_reference(m, r1.last_obs(), r1.last_obs())?,
            };
            c1.combine(&c2)
        };
        act_episode(policy, cond, &start, &union, criterion, horizon, e)
    })?;
    Ok(EvalResult::from_episodes(format!("{}/compose={k1}+{k2}/{criterion}", policy.name()), criterion, seed, &eps))
}

/// Mean `|g(o_0,o_s) + g(o_s,o_T) - g(o_0,o_T)|` over `pairs` with a uniformly
/// sampled split `s` per demonstration.
pub fn hom_gap<T: Scalar>(model: &CpvModel<T>, pairs: &[&DemoPair], seed: u64) -> Result<f64> {
    let enc = model.encoder.as_ref().ok_or_else(|| CpvError::Invalid("naive model has no encoder".into()))?;
    if pairs.is_empty() {
        return Err(CpvError::Invalid("hom_gap needs at least one demonstration".into()));
    }
    let mut rng = seed::rng(seed);
    let splits: Vec<usize> = pairs.iter().map(|p| rng.gen_range(1..=(p.demo.len().max(2) - 1))).collect();
    let d = model.dim();
    let mut total = 0.0;
    for (chunk, s_chunk) in pairs.chunks(32).zip(splits.chunks(32)) {
        let mut rows = Vec::new();
        for (p, &s) in chunk.iter().zip(s_chunk) {
            let o = &p.demo.observations;
            let (first, mid, last) = (&o[0], &o[s.min(o.len() - 1)], p.demo.last_obs());
            rows.push(vec![Img::Obs(first), Img::Obs(mid)]);
            rows.push(vec![Img::Obs(mid), Img::Obs(last)]);
            rows.push(vec![Img::Obs(first), Img::Obs(last)]);
        }
        let (emb, _) = enc.forward(&stack_images::<T>(&rows), None)?;
        for v in emb.data().chunks(3 * d) {
            let r: T = (0..d).map(|i| (v[i] + v[d + i] - v[2 * d + i]).powi(2)).sum::<T>().sqrt();
            total += r.to_f64_lossy();
        }
    }
    Ok(total / pairs.len() as f64)
}

