//! Search-based expert and paired-demonstration dataset generation.
//!
//! The expert decomposes a task into its skills and executes them in list
//! order. Each skill is: drop a wrong tool, fetch the right one, walk into the
//! target. Navigation is breadth-first search over agent positions and is
//! recomputed after every step so injected action noise is recovered from.

mod dataset;

pub use dataset::{
    check_reference, generate_dataset, replay_check, replay_trajectory, Dataset, DatasetMeta, DemoPair, ReplayIssue,
    ReplayReport, DATASET_MAGIC, DATASET_VERSION,
};

use std::collections::VecDeque;
use std::ops::Deref;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::craftworld::{
    entry_effect, render, sample_env, Action, CellObject, Entry, GridState, Observation, Pos, SkillEvent, GRID_CELLS,
};
use crate::error::{CpvError, Result};
use crate::seed;

/// Ordered skills making up a task.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct SkillList(Vec<SkillEvent>);

impl SkillList {
    pub const MAX_LEN: usize = 16;

    pub fn new(skills: Vec<SkillEvent>) -> SkillList {
        SkillList(skills)
    }

    pub fn into_vec(self) -> Vec<SkillEvent> {
        self.0
    }

    /// Per-skill occurrence counts.
    pub fn multiset(&self) -> [usize; SkillEvent::COUNT] {
        multiset(&self.0)
    }

    pub fn concat(&self, other: &SkillList) -> SkillList {
        SkillList(self.0.iter().chain(&other.0).copied().collect())
    }
}

impl Deref for SkillList {
    type Target = [SkillEvent];
    fn deref(&self) -> &[SkillEvent] {
        &self.0
    }
}

impl From<Vec<SkillEvent>> for SkillList {
    fn from(v: Vec<SkillEvent>) -> Self {
        SkillList(v)
    }
}

pub fn multiset(events: &[SkillEvent]) -> [usize; SkillEvent::COUNT] {
    let mut m = [0; SkillEvent::COUNT];
    for e in events {
        m[e.index()] += 1;
    }
    m
}

/// Task of uniform length in `[k_min, k_max]`, skills drawn with replacement.
pub fn sample_task(seed: u64, k_min: usize, k_max: usize) -> SkillList {
    assert!(1 <= k_min && k_min <= k_max, "need 1 <= k_min <= k_max");
    let mut rng = seed::rng(seed);
    let len = rng.gen_range(k_min..=k_max);
    SkillList((0..len).map(|_| SkillEvent::ALL[rng.gen_range(0..SkillEvent::COUNT)]).collect())
}

/// Shortest movement sequence whose last move enters (or triggers) a goal cell.
///
/// Cells whose entry would block or fire any transform are walls unless they
/// satisfy `goal`. Returns an empty path when the agent already stands on a
/// goal cell, `None` when no goal is reachable. Ties go to the earliest
/// action in `Up < Down < Left < Right` order.
pub fn shortest_path(state: &GridState, goal: impl Fn(Pos) -> bool) -> Option<Vec<Action>> {
    let start = state.agent();
    if goal(start) {
        return Some(Vec::new());
    }
    let held = state.held();
    let mut parent: [Option<(usize, Action)>; GRID_CELLS] = [None; GRID_CELLS];
    let mut seen = [false; GRID_CELLS];
    seen[start.index()] = true;
    let mut queue = VecDeque::from([start]);
    while let Some(pos) = queue.pop_front() {
        for action in Action::MOVES {
            let Some(next) = pos.offset(action) else { continue };
            if seen[next.index()] {
                continue;
            }
            if goal(next) {
                let mut path = vec![action];
                let mut cur = pos.index();
                while let Some((prev, a)) = parent[cur] {
                    path.push(a);
                    cur = prev;
                }
                path.reverse();
                return Some(path);
            }
            seen[next.index()] = true;
            if entry_effect(state.cell(next), held) == Entry::Move {
                parent[next.index()] = Some((pos.index(), action));
                queue.push_back(next);
            }
        }
    }
    None
}

/// The expert's intended next action for `skill`, or `None` if it is stuck.
pub fn expert_action(state: &GridState, skill: SkillEvent) -> Option<Action> {
    let tool = skill.tool();
    let held = state.held();
    if let Some(h) = held {
        if skill != SkillEvent::EatBread && Some(h) != tool {
            let path = shortest_path(state, |p| state.cell(p) == CellObject::Empty)?;
            return Some(path.first().copied().unwrap_or(Action::Drop));
        }
    }
    if let Some(t) = tool {
        if held != Some(t) {
            let path = shortest_path(state, |p| state.cell(p) == t.cell())?;
            return Some(path.first().copied().unwrap_or(Action::Pickup));
        }
    }
    let agent = state.agent();
    let path = shortest_path(state, |p| {
        p != agent
            && matches!(entry_effect(state.cell(p), held), Entry::Transform { event, .. } if event == skill)
    })?;
    path.first().copied()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum PlanFailure {
    #[error("no reachable tool or target")]
    Unreachable,
    #[error("unintended event {0}")]
    UnintendedEvent(SkillEvent),
    #[error("step cap exceeded")]
    StepCap,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlannerConfig {
    pub step_cap: usize,
    pub retries: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig { step_cap: 100, retries: 50 }
    }
}

/// Runs one skill in place, appending actions and the observation after each
/// step to `frames` when given.
fn run_skill(
    state: &mut GridState,
    skill: SkillEvent,
    rng: &mut ChaCha8Rng,
    noise: f64,
    step_cap: usize,
    actions: &mut Vec<Action>,
    mut frames: Option<&mut Vec<Observation>>,
) -> std::result::Result<(), PlanFailure> {
    for _ in 0..step_cap {
        let mut action = expert_action(state, skill).ok_or(PlanFailure::Unreachable)?;
        if noise > 0.0 && rng.gen::<f64>() < noise {
            action = Action::ALL[rng.gen_range(0..Action::COUNT)];
        }
        let event = state.apply(action);
        actions.push(action);
        if let Some(f) = frames.as_deref_mut() {
            f.push(render(state));
        }
        match event {
            Some(e) if e == skill => return Ok(()),
            Some(e) => return Err(PlanFailure::UnintendedEvent(e)),
            None => {}
        }
    }
    Err(PlanFailure::StepCap)
}

/// Executes a single skill from `state`; returns the actions and final state.
pub fn plan_skill(
    state: &GridState,
    skill: SkillEvent,
    seed: u64,
    noise: f64,
    step_cap: usize,
) -> std::result::Result<(Vec<Action>, GridState), PlanFailure> {
    let mut s = state.clone();
    let mut rng = seed::rng(seed);
    let mut actions = Vec::new();
    run_skill(&mut s, skill, &mut rng, noise, step_cap, &mut actions, None)?;
    Ok((actions, s))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trajectory {
    /// Seed that, with the pair's task, reproduces the start state via `sample_env`.
    pub start_seed: u64,
    /// Number of actions taken, known even when the actions are not kept.
    pub steps: usize,
    /// Every action, or none for a reference trajectory.
    pub actions: Vec<Action>,
    pub events: Vec<SkillEvent>,
    /// Either every frame (`steps + 1`) or just the first and last.
    pub observations: Vec<Observation>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.steps == 0
    }

    pub fn first_obs(&self) -> &Observation {
        &self.observations[0]
    }

    pub fn last_obs(&self) -> &Observation {
        self.observations.last().expect("trajectory has observations")
    }

    pub fn has_all_frames(&self) -> bool {
        self.actions.len() == self.steps && self.observations.len() == self.steps + 1
    }

    /// Reference form: drops the actions and intermediate frames, keeping
    /// the length and exactly the first and last frame.
    pub fn endpoints_only(mut self) -> Trajectory {
        let last = self.last_obs().clone();
        self.observations.truncate(1);
        self.observations.push(last);
        self.actions.clear();
        self
    }
}

/// One expert attempt at `task` in the world sampled from `env_seed`, with
/// noise drawn from a stream derived from the same seed. `None` unless the
/// emitted events equal `task` exactly.
pub fn attempt_task(env_seed: u64, task: &[SkillEvent], noise: f64, cfg: &PlannerConfig) -> Result<Option<Trajectory>> {
    let mut state = sample_env(env_seed, task)?;
    let mut rng = seed::rng(seed::derive(env_seed, 0x6e6f_6973_65));
    let mut actions = Vec::new();
    let mut frames = vec![render(&state)];
    let ok = task
        .iter()
        .all(|&skill| run_skill(&mut state, skill, &mut rng, noise, cfg.step_cap, &mut actions, Some(&mut frames)).is_ok());
    Ok(ok.then(|| Trajectory {
        start_seed: env_seed,
        steps: actions.len(),
        actions,
        events: task.to_vec(),
        observations: frames,
    }))
}

/// Expert demonstration of `task` with rejection of unsuccessful attempts.
///
/// Attempt `i` samples its environment with seed `derive(seed, i)`. An attempt
/// succeeds only if the emitted events equal `task` exactly.
pub fn plan_task(seed: u64, task: &[SkillEvent], noise: f64, cfg: &PlannerConfig) -> Result<Trajectory> {
    if task.is_empty() {
        return Err(CpvError::Invalid("plan_task needs a nonempty task".into()));
    }
    for attempt in 0..cfg.retries {
        if let Some(t) = attempt_task(seed::derive(seed, attempt as u64), task, noise, cfg)? {
            return Ok(t);
        }
    }
    Err(CpvError::RetriesExhausted { attempts: cfg.retries })
}

/// First environment seed (searching `derive(seed, i)`) on which the
/// noise-free expert completes `task`; used to build evaluation worlds.
pub fn solvable_env(seed: u64, task: &[SkillEvent], cfg: &PlannerConfig) -> Result<(u64, GridState)> {
    let traj = plan_task(seed, task, 0.0, cfg)?;
    let state = sample_env(traj.start_seed, task)?;
    Ok((traj.start_seed, state))
}

/// Noise-free expert that works through a task in list order.
#[derive(Clone, Debug)]
pub struct ExpertPolicy {
    remaining: Vec<SkillEvent>,
}

impl ExpertPolicy {
    pub fn new(task: &[SkillEvent]) -> ExpertPolicy {
        ExpertPolicy { remaining: task.to_vec() }
    }

    pub fn act(&self, state: &GridState) -> Action {
        self.remaining
            .first()
            .and_then(|&skill| expert_action(state, skill))
            .unwrap_or(Action::Pickup)
    }

    pub fn observe(&mut self, event: SkillEvent) {
        if let Some(i) = self.remaining.iter().position(|&e| e == event) {
            self.remaining.remove(i);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::craftworld::Holdable;

    fn replay(state: &GridState, actions: &[Action]) -> (GridState, Vec<SkillEvent>) {
        let mut s = state.clone();
        let mut ev = Vec::new();
        for &a in actions {
            ev.extend(s.apply(a));
        }
        (s, ev)
    }

    #[test]
    fn sample_task_lengths_and_determinism() {
        for s in 0..200 {
            let t = sample_task(s, 2, 4);
            assert!((2..=4).contains(&t.len()));
            assert_eq!(t, sample_task(s, 2, 4));
        }
        assert_eq!(sample_task(3, 1, 1).len(), 1);
    }

    #[test]
    fn sample_task_single_skill_is_uniform() {
        // chi-square goodness of fit, 4 dof, critical value 18.47 at p=0.001
        let n = 10_000;
        let mut counts = [0usize; 5];
        for s in 0..n {
            counts[sample_task(seed::derive(11, s), 1, 1)[0].index()] += 1;
        }
        let expected = n as f64 / 5.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 18.47, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn straight_line_path() {
        let s = GridState::empty(Pos::new(0, 0));
        let p = shortest_path(&s, |p| p == Pos::new(0, 3)).unwrap();
        assert_eq!(p, vec![Action::Right; 3]);
        assert_eq!(shortest_path(&s, |p| p == Pos::new(0, 0)).unwrap(), vec![]);
    }

    #[test]
    fn walled_goal_is_unreachable() {
        let mut s = GridState::empty(Pos::new(0, 0));
        let goal = Pos::new(5, 5);
        for a in Action::MOVES {
            s.set_cell(goal.offset(a).unwrap(), CellObject::Rock);
        }
        // goal is inside the ring; the ring itself is not a goal
        assert!(shortest_path(&s, |p| p == goal).is_none());
    }

    /// Independent BFS over an explicit adjacency list.
    fn oracle_distance(state: &GridState, goal: &dyn Fn(Pos) -> bool) -> Option<usize> {
        let held = state.held();
        let mut dist = vec![usize::MAX; GRID_CELLS];
        let start = state.agent().index();
        if goal(state.agent()) {
            return Some(0);
        }
        dist[start] = 0;
        let mut frontier = vec![start];
        let mut best = None;
        while !frontier.is_empty() && best.is_none() {
            let mut next = Vec::new();
            for &u in &frontier {
                let (r, c) = ((u / 10) as i64, (u % 10) as i64);
                for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                    let (nr, nc) = (r + dr, c + dc);
                    if !(0..10).contains(&nr) || !(0..10).contains(&nc) {
                        continue;
                    }
                    let v = (nr * 10 + nc) as usize;
                    if goal(Pos::from_index(v)) {
                        best = Some(dist[u] + 1);
                    } else if dist[v] == usize::MAX && entry_effect(state.cells()[v], held) == Entry::Move {
                        dist[v] = dist[u] + 1;
                        next.push(v);
                    }
                }
            }
            frontier = next;
        }
        best
    }

    #[test]
    fn path_length_matches_oracle_on_random_worlds() {
        let mut checked = 0;
        for s in 0..300u64 {
            let task = sample_task(s, 1, 4);
            let state = sample_env(seed::derive(s, 1), &task).unwrap();
            let target = CellObject::ALL[(s % 9) as usize];
            let goal = |p: Pos| state.cell(p) == target && p != state.agent();
            let ours = shortest_path(&state, goal);
            let theirs = oracle_distance(&state, &goal);
            assert_eq!(ours.as_ref().map(Vec::len), theirs, "seed {s}");
            if let Some(path) = ours {
                // all but the last move are plain moves
                let (end, ev) = replay(&state, &path[..path.len().saturating_sub(1)]);
                assert!(ev.is_empty());
                if let Some(&last) = path.last() {
                    assert!(goal(end.agent().offset(last).unwrap()));
                }
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn eat_adjacent_bread_is_one_move() {
        let mut s = GridState::empty(Pos::new(3, 3));
        s.set_cell(Pos::new(3, 4), CellObject::Bread);
        let (actions, end) = plan_skill(&s, SkillEvent::EatBread, 0, 0.0, 100).unwrap();
        assert_eq!(actions, vec![Action::Right]);
        assert_eq!(end.agent(), Pos::new(3, 4));
    }

    #[test]
    fn wrong_tool_is_dropped_first() {
        let mut s = GridState::empty(Pos::new(0, 0));
        s.set_held(Some(Holdable::Hammer));
        s.set_cell(Pos::new(0, 5), CellObject::Axe);
        s.set_cell(Pos::new(9, 9), CellObject::Tree);
        let (actions, end) = plan_skill(&s, SkillEvent::ChopTree, 0, 0.0, 100).unwrap();
        let drop = actions.iter().position(|&a| a == Action::Drop).unwrap();
        let pick = actions.iter().position(|&a| a == Action::Pickup).unwrap();
        assert!(drop < pick);
        assert_eq!(actions[0], Action::Drop);
        assert_eq!(end.cell(Pos::new(9, 9)), CellObject::Logs);
        assert_eq!(end.cell(Pos::new(0, 0)), CellObject::Hammer);
    }

    #[test]
    fn expert_avoids_unintended_transforms() {
        // Axe in hand, wheat sits on the direct route to the tree.
        let mut s = GridState::empty(Pos::new(0, 0));
        s.set_held(Some(Holdable::Axe));
        s.set_cell(Pos::new(0, 1), CellObject::Wheat);
        s.set_cell(Pos::new(0, 3), CellObject::Tree);
        s.set_cell(Pos::new(1, 1), CellObject::Bread);
        let (actions, _) = plan_skill(&s, SkillEvent::ChopTree, 0, 0.0, 100).unwrap();
        let (_, events) = replay(&s, &actions);
        assert_eq!(events, vec![SkillEvent::ChopTree]);
    }

    #[test]
    fn noisy_skills_replay_to_one_event() {
        let mut ok = 0;
        for s in 0..1000u64 {
            let skill = SkillEvent::ALL[(s % 5) as usize];
            let start = sample_env(seed::derive(s, 7), &[skill]).unwrap();
            if let Ok((actions, end)) = plan_skill(&start, skill, s, 0.1, 100) {
                let (replayed, events) = replay(&start, &actions);
                assert_eq!(events, vec![skill]);
                assert_eq!(replayed, end);
                ok += 1;
            }
        }
        assert!(ok > 800, "only {ok} noisy plans succeeded");
    }

    #[test]
    fn plan_task_replays_to_exact_events() {
        let cfg = PlannerConfig::default();
        let task = [SkillEvent::ChopTree, SkillEvent::EatBread];
        let t = plan_task(5, &task, 0.0, &cfg).unwrap();
        let start = sample_env(t.start_seed, &task).unwrap();
        let (_, events) = replay(&start, &t.actions);
        assert_eq!(events, task);
        assert!(t.has_all_frames());
        assert_eq!(t.observations[0], render(&start));

        let single = plan_task(1, &[SkillEvent::ChopTree], 0.0, &cfg).unwrap();
        assert_eq!(single.events, vec![SkillEvent::ChopTree]);

        for s in 0..100 {
            let task = sample_task(s, 2, 4);
            let t = plan_task(s, &task, 0.1, &cfg).unwrap();
            let start = sample_env(t.start_seed, &task).unwrap();
            let (end, events) = replay(&start, &t.actions);
            assert_eq!(events, task.to_vec());
            assert_eq!(t.last_obs(), &render(&end));
        }
    }

    #[test]
    fn expert_policy_tracks_remaining_skills() {
        let task = [SkillEvent::EatBread, SkillEvent::EatBread];
        let mut s = GridState::empty(Pos::new(0, 0));
        s.set_cell(Pos::new(0, 1), CellObject::Bread);
        s.set_cell(Pos::new(0, 2), CellObject::Bread);
        let mut expert = ExpertPolicy::new(&task);
        let mut events = Vec::new();
        for _ in 0..2 {
            let a = expert.act(&s);
            if let Some(e) = s.apply(a) {
                expert.observe(e);
                events.push(e);
            }
        }
        assert_eq!(events, task);
    }
}
