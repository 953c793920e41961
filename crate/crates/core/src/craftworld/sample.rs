use rand::seq::SliceRandom;
use rand::Rng;

use super::{CellObject, GridState, Holdable, Pos, SkillEvent, GRID_CELLS};
use crate::error::{CpvError, Result};
use crate::seed;

const EXTRA_TYPES: [CellObject; 7] = [
    CellObject::Tree,
    CellObject::Rock,
    CellObject::Logs,
    CellObject::Wheat,
    CellObject::Bread,
    CellObject::Hammer,
    CellObject::Axe,
];

/// Objects the task needs on the grid so that no skill depends on another.
pub fn required_objects(task: &[SkillEvent]) -> Vec<(CellObject, usize)> {
    let mut counts = [0usize; 9];
    for skill in task {
        counts[skill.target().index()] += 1;
        if let Some(tool) = skill.tool() {
            let c = &mut counts[tool.cell().index()];
            *c = (*c).max(1);
        }
    }
    CellObject::ALL.iter().map(|&o| (o, counts[o.index()])).filter(|&(_, n)| n > 0).collect()
}

/// Random initial state on which every skill in `task` has its own target
/// object and tool. Fully determined by `seed` and `task`.
pub fn sample_env(seed: u64, task: &[SkillEvent]) -> Result<GridState> {
    if task.is_empty() {
        return Err(CpvError::Invalid("sample_env needs a nonempty task".into()));
    }
    let mut rng = seed::rng(seed);
    let mut objects: Vec<CellObject> = Vec::new();
    for (obj, n) in required_objects(task) {
        objects.extend(std::iter::repeat(obj).take(n));
    }
    // one cell is reserved for the agent
    let free = GRID_CELLS - 1;
    if objects.len() > free {
        return Err(CpvError::Infeasible { required: objects.len(), free });
    }
    for obj in EXTRA_TYPES {
        let extra: usize = rng.gen_range(0..=2);
        for _ in 0..extra {
            if objects.len() < free {
                objects.push(obj);
            }
        }
    }
    let mut order: Vec<usize> = (0..GRID_CELLS).collect();
    order.shuffle(&mut rng);
    let mut cells = [CellObject::Empty; GRID_CELLS];
    for (&idx, &obj) in order.iter().zip(&objects) {
        cells[idx] = obj;
    }
    let agent = Pos::from_index(order[objects.len()]);
    Ok(GridState::from_parts(cells, agent, None::<Holdable>))
}
