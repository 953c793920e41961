//! Deterministic crafting grid-world.
//!
//! A 10x10 grid of objects, an agent, and a one-slot hand. Moving into a
//! cell while holding the right tool transforms the cell and emits a
//! [`SkillEvent`]; everything else is plain movement or a no-op.

mod render;
mod sample;

pub use render::{render, Observation, OBS_CHANNELS, OBS_HEIGHT, OBS_LEN, OBS_WIDTH};
pub use sample::sample_env;

use std::fmt;

pub const GRID_HEIGHT: usize = 10;
pub const GRID_WIDTH: usize = 10;
pub const GRID_CELLS: usize = GRID_HEIGHT * GRID_WIDTH;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum CellObject {
    Empty = 0,
    Tree,
    Rock,
    Logs,
    Wheat,
    Bread,
    Hammer,
    Axe,
    House,
}

impl CellObject {
    pub const ALL: [CellObject; 9] = [
        CellObject::Empty,
        CellObject::Tree,
        CellObject::Rock,
        CellObject::Logs,
        CellObject::Wheat,
        CellObject::Bread,
        CellObject::Hammer,
        CellObject::Axe,
        CellObject::House,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_blocking(self) -> bool {
        matches!(self, CellObject::Tree | CellObject::Rock | CellObject::House)
    }

    pub fn holdable(self) -> Option<Holdable> {
        match self {
            CellObject::Axe => Some(Holdable::Axe),
            CellObject::Hammer => Some(Holdable::Hammer),
            CellObject::Logs => Some(Holdable::Logs),
            _ => None,
        }
    }
}

/// Objects that fit in the agent's hand.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Holdable {
    Axe,
    Hammer,
    Logs,
}

impl Holdable {
    pub fn cell(self) -> CellObject {
        match self {
            Holdable::Axe => CellObject::Axe,
            Holdable::Hammer => CellObject::Hammer,
            Holdable::Logs => CellObject::Logs,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Action {
    Up = 0,
    Down,
    Left,
    Right,
    Pickup,
    Drop,
}

impl Action {
    pub const COUNT: usize = 6;
    pub const ALL: [Action; 6] = [
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::Pickup,
        Action::Drop,
    ];
    pub const MOVES: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    fn delta(self) -> Option<(isize, isize)> {
        match self {
            Action::Up => Some((-1, 0)),
            Action::Down => Some((1, 0)),
            Action::Left => Some((0, -1)),
            Action::Right => Some((0, 1)),
            Action::Pickup | Action::Drop => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum SkillEvent {
    ChopTree = 0,
    BreakRock,
    BuildHouse,
    MakeBread,
    EatBread,
}

impl SkillEvent {
    pub const COUNT: usize = 5;
    pub const ALL: [SkillEvent; 5] = [
        SkillEvent::ChopTree,
        SkillEvent::BreakRock,
        SkillEvent::BuildHouse,
        SkillEvent::MakeBread,
        SkillEvent::EatBread,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<SkillEvent> {
        Self::ALL.get(i).copied()
    }

    /// Tool that must be in hand for the transform to fire.
    pub fn tool(self) -> Option<Holdable> {
        match self {
            SkillEvent::ChopTree | SkillEvent::MakeBread => Some(Holdable::Axe),
            SkillEvent::BreakRock | SkillEvent::BuildHouse => Some(Holdable::Hammer),
            SkillEvent::EatBread => None,
        }
    }

    /// Object the skill consumes.
    pub fn target(self) -> CellObject {
        match self {
            SkillEvent::ChopTree => CellObject::Tree,
            SkillEvent::BreakRock => CellObject::Rock,
            SkillEvent::BuildHouse => CellObject::Logs,
            SkillEvent::MakeBread => CellObject::Wheat,
            SkillEvent::EatBread => CellObject::Bread,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SkillEvent::ChopTree => "ChopTree",
            SkillEvent::BreakRock => "BreakRock",
            SkillEvent::BuildHouse => "BuildHouse",
            SkillEvent::MakeBread => "MakeBread",
            SkillEvent::EatBread => "EatBread",
        }
    }
}

impl fmt::Display for SkillEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// What happens when the agent attempts to enter a cell containing `target`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Entry {
    /// Plain move, nothing changes.
    Move,
    /// Nothing happens.
    Blocked,
    /// The target cell is rewritten and `event` fires.
    Transform {
        becomes: CellObject,
        event: SkillEvent,
        enters: bool,
    },
}

pub fn entry_effect(target: CellObject, held: Option<Holdable>) -> Entry {
    use CellObject::*;
    match (target, held) {
        (Tree, Some(Holdable::Axe)) => Entry::Transform { becomes: Logs, event: SkillEvent::ChopTree, enters: false },
        (Rock, Some(Holdable::Hammer)) => Entry::Transform { becomes: Empty, event: SkillEvent::BreakRock, enters: false },
        (Logs, Some(Holdable::Hammer)) => Entry::Transform { becomes: House, event: SkillEvent::BuildHouse, enters: false },
        (Wheat, Some(Holdable::Axe)) => Entry::Transform { becomes: Bread, event: SkillEvent::MakeBread, enters: false },
        (Bread, _) => Entry::Transform { becomes: Empty, event: SkillEvent::EatBread, enters: true },
        (t, _) if t.is_blocking() => Entry::Blocked,
        _ => Entry::Move,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pos {
    pub row: usize,
    pub col: usize,
}

impl Pos {
    pub fn new(row: usize, col: usize) -> Pos {
        Pos { row, col }
    }

    pub fn index(self) -> usize {
        self.row * GRID_WIDTH + self.col
    }

    pub fn from_index(i: usize) -> Pos {
        Pos { row: i / GRID_WIDTH, col: i % GRID_WIDTH }
    }

    /// Neighbour in the direction of a movement action, if in bounds.
    pub fn offset(self, action: Action) -> Option<Pos> {
        let (dr, dc) = action.delta()?;
        let row = self.row.checked_add_signed(dr)?;
        let col = self.col.checked_add_signed(dc)?;
        (row < GRID_HEIGHT && col < GRID_WIDTH).then_some(Pos { row, col })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GridState {
    cells: [CellObject; GRID_CELLS],
    agent: Pos,
    held: Option<Holdable>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepOutcome {
    pub next_state: GridState,
    pub event: Option<SkillEvent>,
}

impl StepOutcome {
    pub fn events(&self) -> &[SkillEvent] {
        self.event.as_slice()
    }
}

/// Per-type cell counts plus the held object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct ObjectCounts {
    pub cells: [usize; 9],
    pub held: Option<Holdable>,
}

impl ObjectCounts {
    pub fn get(&self, obj: CellObject) -> usize {
        self.cells[obj.index()]
    }

    /// Cell counts with the held object folded back in as if it were on the grid.
    pub fn with_held(&self) -> [usize; 9] {
        let mut out = self.cells;
        if let Some(h) = self.held {
            out[h.cell().index()] += 1;
        }
        out
    }
}

impl GridState {
    pub fn empty(agent: Pos) -> GridState {
        GridState { cells: [CellObject::Empty; GRID_CELLS], agent, held: None }
    }

    pub fn from_parts(cells: [CellObject; GRID_CELLS], agent: Pos, held: Option<Holdable>) -> GridState {
        assert!(agent.row < GRID_HEIGHT && agent.col < GRID_WIDTH, "agent out of bounds");
        assert!(!cells[agent.index()].is_blocking(), "agent on blocking cell");
        GridState { cells, agent, held }
    }

    pub fn agent(&self) -> Pos {
        self.agent
    }

    pub fn held(&self) -> Option<Holdable> {
        self.held
    }

    pub fn cell(&self, pos: Pos) -> CellObject {
        self.cells[pos.index()]
    }

    pub fn cells(&self) -> &[CellObject; GRID_CELLS] {
        &self.cells
    }

    /// Places an object; panics if it would put the agent on a blocking cell.
    pub fn set_cell(&mut self, pos: Pos, obj: CellObject) {
        assert!(!(pos == self.agent && obj.is_blocking()), "cannot block the agent's cell");
        self.cells[pos.index()] = obj;
    }

    pub fn set_held(&mut self, held: Option<Holdable>) {
        self.held = held;
    }

    pub fn is_valid(&self) -> bool {
        self.agent.row < GRID_HEIGHT && self.agent.col < GRID_WIDTH && !self.cell(self.agent).is_blocking()
    }

    pub fn count_objects(&self) -> ObjectCounts {
        let mut counts = ObjectCounts { held: self.held, ..Default::default() };
        for c in &self.cells {
            counts.cells[c.index()] += 1;
        }
        counts
    }

    /// Applies `action` in place and returns the emitted event, if any.
    pub fn apply(&mut self, action: Action) -> Option<SkillEvent> {
        match action {
            Action::Pickup => {
                let here = self.agent.index();
                if self.held.is_none() {
                    if let Some(h) = self.cells[here].holdable() {
                        self.held = Some(h);
                        self.cells[here] = CellObject::Empty;
                    }
                }
                None
            }
            Action::Drop => {
                let here = self.agent.index();
                if let Some(h) = self.held {
                    if self.cells[here] == CellObject::Empty {
                        self.cells[here] = h.cell();
                        self.held = None;
                    }
                }
                None
            }
            mv => {
                let target = self.agent.offset(mv)?;
                match entry_effect(self.cell(target), self.held) {
                    Entry::Move => {
                        self.agent = target;
                        None
                    }
                    Entry::Blocked => None,
                    Entry::Transform { becomes, event, enters } => {
                        self.cells[target.index()] = becomes;
                        if enters {
                            self.agent = target;
                        }
                        Some(event)
                    }
                }
            }
        }
    }

    pub fn step(&self, action: Action) -> StepOutcome {
        let mut next_state = self.clone();
        let event = next_state.apply(action);
        StepOutcome { next_state, event }
    }
}

pub fn step(state: &GridState, action: Action) -> StepOutcome {
    state.step(action)
}

pub fn count_objects(state: &GridState) -> ObjectCounts {
    state.count_objects()
}
