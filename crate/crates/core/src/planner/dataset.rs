use std::path::Path;

use rayon::prelude::*;

use super::{attempt_task, plan_task, sample_task, PlannerConfig, SkillList, Trajectory};
use crate::craftworld::{render, sample_env, Action, Observation, SkillEvent, OBS_LEN};
use crate::error::{CpvError, Result};
use crate::io::{write_atomic, Reader};
use crate::seed;

pub const DATASET_MAGIC: &[u8; 4] = b"CPVD";
pub const DATASET_VERSION: u32 = 1;

/// Two expert runs of the same task in different worlds.
///
/// The reference keeps only its first and last frames; the demonstration
/// keeps every frame and is the behavioral-cloning target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DemoPair {
    /// Evaluation metadata only; never fed to the model.
    pub task: SkillList,
    pub reference: Trajectory,
    pub demo: Trajectory,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetMeta {
    pub seed: u64,
    pub k_min: u8,
    pub k_max: u8,
    pub noise: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub pairs: Vec<DemoPair>,
}

fn generate_pair(pair_seed: u64, k_min: usize, k_max: usize, noise: f64, cfg: &PlannerConfig) -> Result<DemoPair> {
    let task = sample_task(seed::derive(pair_seed, 0), k_min, k_max);
    let reference = plan_task(seed::derive(pair_seed, 1), &task, noise, cfg)?.endpoints_only();
    let demo = plan_task(seed::derive(pair_seed, 2), &task, noise, cfg)?;
    Ok(DemoPair { task, reference, demo })
}

/// Pair `i` is generated from `derive(seed, i)`, so the result does not
/// depend on `workers`.
pub fn generate_dataset(
    seed: u64,
    n_pairs: usize,
    k_min: usize,
    k_max: usize,
    noise: f64,
    cfg: &PlannerConfig,
    workers: usize,
) -> Result<Dataset> {
    if n_pairs == 0 {
        return Err(CpvError::Invalid("n_pairs must be at least 1".into()));
    }
    if !(1 <= k_min && k_min <= k_max && k_max <= SkillList::MAX_LEN) {
        return Err(CpvError::Invalid(format!("bad skill range [{k_min}, {k_max}]")));
    }
    let build = |i: usize| generate_pair(seed::derive(seed, i as u64), k_min, k_max, noise, cfg);
    let pairs = if workers <= 1 {
        (0..n_pairs).map(build).collect::<Result<Vec<_>>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| CpvError::Invalid(e.to_string()))?;
        pool.install(|| (0..n_pairs).into_par_iter().map(build).collect::<Result<Vec<_>>>())?
    };
    let meta = DatasetMeta { seed, k_min: k_min as u8, k_max: k_max as u8, noise: noise as f32 };
    Ok(Dataset { meta, pairs })
}

fn write_traj(out: &mut Vec<u8>, t: &Trajectory) {
    out.extend_from_slice(&t.start_seed.to_le_bytes());
    out.extend_from_slice(&(t.steps as u32).to_le_bytes());
    out.extend(t.actions.iter().map(|&a| a as u8));
    for o in &t.observations {
        out.extend_from_slice(o.planes());
    }
}

fn corrupt(msg: impl Into<String>) -> CpvError {
    CpvError::CorruptDataset(msg.into())
}

/// Reads a trajectory; references carry no actions and two frames.
fn read_traj(r: &mut Reader<'_>, task: &[SkillEvent], reference: bool) -> Result<Trajectory> {
    let start_seed = r.u64().ok_or_else(|| corrupt("truncated trajectory header"))?;
    let steps = r.u32().ok_or_else(|| corrupt("truncated trajectory header"))? as usize;
    let n_actions = if reference { 0 } else { steps };
    if n_actions > r.remaining() {
        return Err(corrupt("action count exceeds file size"));
    }
    let actions = r
        .bytes(n_actions)
        .ok_or_else(|| corrupt("truncated actions"))?
        .iter()
        .map(|&b| Action::from_index(b as usize).ok_or_else(|| corrupt(format!("bad action id {b}"))))
        .collect::<Result<Vec<_>>>()?;
    let n_obs = if reference { 2 } else { steps + 1 };
    let mut observations = Vec::with_capacity(n_obs);
    for _ in 0..n_obs {
        let planes = r.bytes(OBS_LEN).ok_or_else(|| corrupt("truncated observations"))?;
        observations.push(Observation::from_planes(planes.to_vec()).expect("length checked"));
    }
    // Events are not stored. Demonstrations recover them by replay; accepted
    // references completed their task exactly.
    let events = if reference {
        task.to_vec()
    } else {
        match sample_env(start_seed, task) {
            Ok(mut s) => actions.iter().filter_map(|&a| s.apply(a)).collect(),
            Err(_) => Vec::new(),
        }
    };
    Ok(Trajectory { start_seed, steps, actions, events, observations })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Train/validation split by pair index: every tenth pair validates.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.pairs.len()).partition(|i| i % 10 != 9)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.pairs.len() as u64).to_le_bytes());
        out.push(self.meta.k_min);
        out.push(self.meta.k_max);
        out.extend_from_slice(&self.meta.noise.to_le_bytes());
        out.extend_from_slice(&self.meta.seed.to_le_bytes());
        for p in &self.pairs {
            out.push(p.task.len() as u8);
            out.extend(p.task.iter().map(|&s| s as u8));
            write_traj(&mut out, &p.reference);
            write_traj(&mut out, &p.demo);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut r = Reader::new(bytes);
        if r.bytes(4) != Some(DATASET_MAGIC.as_slice()) {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32().ok_or_else(|| corrupt("truncated header"))?;
        if version != DATASET_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let n = r.u64().ok_or_else(|| corrupt("truncated header"))? as usize;
        let k_min = r.u8().ok_or_else(|| corrupt("truncated header"))?;
        let k_max = r.u8().ok_or_else(|| corrupt("truncated header"))?;
        let noise = r.f32().ok_or_else(|| corrupt("truncated header"))?;
        let seed = r.u64().ok_or_else(|| corrupt("truncated header"))?;
        let mut pairs = Vec::with_capacity(n.min(1 << 20));
        for i in 0..n {
            let tl = r.u8().ok_or_else(|| corrupt(format!("truncated pair {i}")))? as usize;
            let task: Vec<SkillEvent> = r
                .bytes(tl)
                .ok_or_else(|| corrupt(format!("truncated pair {i}")))?
                .iter()
                .map(|&b| SkillEvent::from_index(b as usize).ok_or_else(|| corrupt(format!("bad skill id {b}"))))
                .collect::<Result<_>>()?;
            let reference = read_traj(&mut r, &task, true)?;
            let demo = read_traj(&mut r, &task, false)?;
            pairs.push(DemoPair { task: SkillList::new(task), reference, demo });
        }
        if r.remaining() != 0 {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Dataset { meta: DatasetMeta { seed, k_min, k_max, noise }, pairs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(write_atomic(path, &self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplayIssue {
    pub pair: usize,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReplayReport {
    pub checked: usize,
    pub passed: usize,
    pub issues: Vec<ReplayIssue>,
}

impl ReplayReport {
    pub fn all_passed(&self) -> bool {
        self.passed == self.checked
    }
}

/// Replays a demonstration from its seeded start and checks frames and events.
pub fn replay_trajectory(traj: &Trajectory, task: &[SkillEvent]) -> std::result::Result<(), String> {
    if !traj.has_all_frames() {
        return Err(format!("{} frames and {} actions for {} steps", traj.observations.len(), traj.actions.len(), traj.steps));
    }
    let mut state = sample_env(traj.start_seed, task).map_err(|e| e.to_string())?;
    if render(&state) != traj.observations[0] {
        return Err("first frame differs from seeded start".into());
    }
    let mut events = Vec::new();
    for (i, &a) in traj.actions.iter().enumerate() {
        events.extend(state.apply(a));
        if render(&state) != traj.observations[i + 1] {
            return Err(format!("frame {} differs", i + 1));
        }
    }
    if events != task {
        return Err(format!("events {events:?} != task {task:?}"));
    }
    Ok(())
}

/// Re-runs the expert attempt that produced a reference and compares its
/// length, endpoints and events.
pub fn check_reference(
    traj: &Trajectory,
    task: &[SkillEvent],
    noise: f64,
    cfg: &PlannerConfig,
) -> std::result::Result<(), String> {
    if traj.observations.len() != 2 {
        return Err(format!("reference has {} frames", traj.observations.len()));
    }
    let redo = attempt_task(traj.start_seed, task, noise, cfg)
        .map_err(|e| e.to_string())?
        .ok_or_else(|| "expert does not complete the task from this start".to_string())?;
    if redo.steps != traj.steps {
        return Err(format!("length {} != regenerated {}", traj.steps, redo.steps));
    }
    if redo.first_obs() != traj.first_obs() || redo.last_obs() != traj.last_obs() {
        return Err("endpoint frames differ from regenerated trajectory".into());
    }
    replay_trajectory(&redo, task)
}

pub fn replay_check(dataset: &Dataset) -> ReplayReport {
    let cfg = PlannerConfig::default();
    let noise = f64::from(dataset.meta.noise);
    let mut report = ReplayReport::default();
    for (i, p) in dataset.pairs.iter().enumerate() {
        report.checked += 1;
        let mut problems = Vec::new();
        if let Err(e) = check_reference(&p.reference, &p.task, noise, &cfg) {
            problems.push(format!("reference: {e}"));
        }
        if let Err(e) = replay_trajectory(&p.demo, &p.task) {
            problems.push(format!("demo: {e}"));
        }
        if problems.is_empty() {
            report.passed += 1;
        } else {
            report.issues.push(ReplayIssue { pair: i, detail: problems.join("; ") });
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        generate_dataset(3, 6, 1, 3, 0.1, &PlannerConfig::default(), 1).unwrap()
    }

    #[test]
    fn bytes_round_trip_and_layout() {
        let d = small();
        let bytes = d.to_bytes();
        assert_eq!(&bytes[..4], b"CPVD");
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_bytes(), bytes);
        for p in &back.pairs {
            assert_eq!(p.reference.observations.len(), 2);
            assert!(p.demo.has_all_frames());
            assert_eq!(p.reference.events, p.task.to_vec());
        }
    }

    #[test]
    fn generation_is_deterministic_and_worker_independent() {
        let a = small();
        assert_eq!(a.to_bytes(), small().to_bytes());
        let b = generate_dataset(3, 6, 1, 3, 0.1, &PlannerConfig::default(), 3).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn pairs_share_task_and_replay() {
        let d = small();
        let r = replay_check(&d);
        assert!(r.all_passed(), "{:?}", r.issues);
        for p in &d.pairs {
            assert_eq!(super::super::multiset(&p.reference.events), super::super::multiset(&p.demo.events));
            assert_ne!(p.reference.start_seed, p.demo.start_seed);
        }
    }

    #[test]
    fn tampered_reference_is_flagged() {
        let mut d = small();
        d.pairs[2].reference.steps += 1;
        let r = replay_check(&d);
        assert_eq!(r.issues.len(), 1);
        assert_eq!(r.issues[0].pair, 2);
        assert!(r.issues[0].detail.starts_with("reference"));
        assert!(d.pairs[0].reference.actions.is_empty());
    }

    #[test]
    fn truncated_and_corrupt_files_are_rejected() {
        let bytes = small().to_bytes();
        assert!(matches!(Dataset::from_bytes(&bytes[..bytes.len() - 1]), Err(CpvError::CorruptDataset(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Dataset::from_bytes(&bad).is_err());
        assert!(Dataset::from_bytes(&[]).is_err());
    }

    #[test]
    fn corrupted_action_flags_that_pair() {
        let mut d = small();
        let original = d.pairs[2].demo.actions[0];
        let swapped = Action::ALL
            .into_iter()
            .filter(|&a| a != original)
            .find(|&a| {
                let mut t = d.pairs[2].demo.clone();
                t.actions[0] = a;
                replay_trajectory(&t, &d.pairs[2].task).is_err()
            })
            .unwrap();
        d.pairs[2].demo.actions[0] = swapped;
        let r = replay_check(&d);
        assert_eq!(r.checked, 6);
        assert_eq!(r.passed, 5);
        assert_eq!(r.issues.len(), 1);
        assert_eq!(r.issues[0].pair, 2);
    }

    #[test]
    fn split_is_ninety_ten() {
        let d = generate_dataset(1, 20, 1, 1, 0.0, &PlannerConfig::default(), 1).unwrap();
        let (train, val) = d.split();
        assert_eq!(val, vec![9, 19]);
        assert_eq!(train.len(), 18);
    }
}
