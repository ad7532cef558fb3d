//! Sparse-reward grid environments.
//!
//! Two families share one state type:
//!
//! - the tabular lake (four compass moves, optional slipping, full
//!   observability through a single state index), and
//! - MiniGrid-style rooms (seven egocentric actions, a `V×V` symbolic view
//!   with ray-cast occlusion, keys, doors and balls).
//!
//! Layouts are either fixed (the 8×8 lake, a text fixture) or generated
//! from a seed (DoorKey, RedBall fetch, LavaCrossing, distracted DoorKey).

use std::collections::VecDeque;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error("step called on a finished episode")]
    EpisodeDone,
    #[error("action {action} is not valid for the {family} family")]
    InvalidAction { action: u8, family: Family },
}

/// Row-major grid coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub row: usize,
    pub col: usize,
}

impl Pos {
    pub const fn new(row: usize, col: usize) -> Self {
        Pos { row, col }
    }

    fn offset(self, drow: i64, dcol: i64, width: usize, height: usize) -> Option<Pos> {
        let r = self.row as i64 + drow;
        let c = self.col as i64 + dcol;
        if r < 0 || c < 0 || r >= height as i64 || c >= width as i64 {
            None
        } else {
            Some(Pos::new(r as usize, c as usize))
        }
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.row, self.col)
    }
}

/// Orientation unit vectors, MiniGrid order: 0 east, 1 south, 2 west, 3 north.
const DIR_VEC: [(i64, i64); 4] = [(0, 1), (1, 0), (0, -1), (-1, 0)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Four-action tabular lake.
    Lake,
    /// Seven-action egocentric gridworld.
    Grid,
}

impl Family {
    pub fn n_actions(self) -> usize {
        match self {
            Family::Lake => 4,
            Family::Grid => 7,
        }
    }

    pub fn is_tabular(self) -> bool {
        matches!(self, Family::Lake)
    }

    pub fn action_name(self, action: Action) -> &'static str {
        const LAKE: [&str; 4] = ["left", "down", "right", "up"];
        const GRID: [&str; 7] = ["turn-left", "turn-right", "forward", "pickup", "drop", "toggle", "done"];
        match self {
            Family::Lake => LAKE.get(action.0 as usize).copied().unwrap_or("?"),
            Family::Grid => GRID.get(action.0 as usize).copied().unwrap_or("?"),
        }
    }

    /// Parses an action name (or a bare index) for this family.
    pub fn parse_action(self, name: &str) -> Option<Action> {
        let n = name.trim().to_ascii_lowercase().replace(['_', ' '], "-");
        if let Ok(i) = n.parse::<u8>() {
            return ((i as usize) < self.n_actions()).then_some(Action(i));
        }
        let idx = match self {
            Family::Lake => match n.as_str() {
                "left" | "l" | "west" => 0,
                "down" | "d" | "south" => 1,
                "right" | "r" | "east" => 2,
                "up" | "u" | "north" => 3,
                _ => return None,
            },
            Family::Grid => match n.as_str() {
                "turn-left" | "left" | "rotate-left" => 0,
                "turn-right" | "right" | "rotate-right" => 1,
                "forward" | "move-forward" | "move" | "fwd" => 2,
                "pickup" | "pick-up" | "pick" => 3,
                "drop" => 4,
                "toggle" | "open" => 5,
                "done" | "stop" => 6,
                _ => return None,
            },
        };
        Some(Action(idx))
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Lake => "lake",
            Family::Grid => "grid",
        })
    }
}

/// Action index, interpreted per [`Family`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Action(pub u8);

impl Action {
    pub const LAKE_LEFT: Action = Action(0);
    pub const LAKE_DOWN: Action = Action(1);
    pub const LAKE_RIGHT: Action = Action(2);
    pub const LAKE_UP: Action = Action(3);

    pub const TURN_LEFT: Action = Action(0);
    pub const TURN_RIGHT: Action = Action(1);
    pub const FORWARD: Action = Action(2);
    pub const PICKUP: Action = Action(3);
    pub const DROP: Action = Action(4);
    pub const TOGGLE: Action = Action(5);
    pub const DONE: Action = Action(6);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Purple,
    Yellow,
    Grey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DoorState {
    Open,
    Closed,
    Locked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cell {
    Floor,
    Hole,
    Lava,
    Wall,
    Door { color: Color, state: DoorState },
    Key(Color),
    Ball(Color),
    Box(Color),
    Goal,
}

impl Cell {
    fn can_overlap(self) -> bool {
        matches!(
            self,
            Cell::Floor | Cell::Goal | Cell::Lava | Cell::Hole | Cell::Door { state: DoorState::Open, .. }
        )
    }

    fn is_opaque(self) -> bool {
        matches!(self, Cell::Wall | Cell::Door { state: DoorState::Closed | DoorState::Locked, .. })
    }

    fn can_pickup(self) -> bool {
        matches!(self, Cell::Key(_) | Cell::Ball(_) | Cell::Box(_))
    }

    fn fingerprint(self) -> u8 {
        let color = |c: Color| c as u8;
        match self {
            Cell::Floor => 1,
            Cell::Hole => 2,
            Cell::Lava => 3,
            Cell::Wall => 4,
            Cell::Goal => 5,
            Cell::Door { color: c, state } => 16 + color(c) * 3 + state as u8,
            Cell::Key(c) => 40 + color(c),
            Cell::Ball(c) => 50 + color(c),
            Cell::Box(c) => 60 + color(c),
        }
    }

    fn fixture_char(self) -> char {
        match self {
            Cell::Floor => 'F',
            Cell::Hole => 'H',
            Cell::Lava => 'L',
            Cell::Wall => 'W',
            Cell::Door { .. } => 'D',
            Cell::Key(_) => 'K',
            Cell::Ball(Color::Red) => 'B',
            Cell::Ball(_) => 'O',
            Cell::Box(_) => 'X',
            Cell::Goal => 'G',
        }
    }
}

/// Symbolic codes used in egocentric views.
pub mod view_code {
    pub const UNSEEN: u8 = 0;
    pub const EMPTY: u8 = 1;
    pub const WALL: u8 = 2;
    pub const KEY: u8 = 3;
    pub const DOOR_LOCKED: u8 = 4;
    pub const DOOR_CLOSED: u8 = 5;
    pub const DOOR_OPEN: u8 = 6;
    pub const GOAL: u8 = 7;
    pub const LAVA: u8 = 8;
    pub const BALL_RED: u8 = 9;
    pub const BALL_OTHER: u8 = 10;
    pub const BOX: u8 = 11;
    pub const HOLE: u8 = 12;
    pub const COUNT: usize = 13;

    pub fn to_char(code: u8) -> char {
        match code {
            UNSEEN => '?',
            EMPTY => '.',
            WALL => '#',
            KEY => 'k',
            DOOR_LOCKED => 'L',
            DOOR_CLOSED => 'C',
            DOOR_OPEN => 'O',
            GOAL => 'g',
            LAVA => '~',
            BALL_RED => 'r',
            BALL_OTHER => 'b',
            BOX => 'x',
            HOLE => 'h',
            _ => '!',
        }
    }
}

fn cell_code(cell: Cell) -> u8 {
    use view_code::*;
    match cell {
        Cell::Floor => EMPTY,
        Cell::Hole => HOLE,
        Cell::Lava => LAVA,
        Cell::Wall => WALL,
        Cell::Door { state: DoorState::Locked, .. } => DOOR_LOCKED,
        Cell::Door { state: DoorState::Closed, .. } => DOOR_CLOSED,
        Cell::Door { state: DoorState::Open, .. } => DOOR_OPEN,
        Cell::Key(_) => KEY,
        Cell::Ball(Color::Red) => BALL_RED,
        Cell::Ball(_) => BALL_OTHER,
        Cell::Box(_) => BOX,
        Cell::Goal => GOAL,
    }
}

/// What the agent is asked to do in a layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    ReachGoal,
    /// Pick up the ball of this color; any other pickup ends the episode.
    Fetch(Color),
    /// Key, then door, then goal.
    DoorKey,
}

/// Layout generator selection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "text")]
pub enum LayoutKind {
    Lake8x8,
    Lake4x4,
    RedBall,
    DoorKey,
    DistractedDoorKey,
    LavaCrossing,
    /// Plain-text fixture grid (see [`Layout::parse`]).
    Text(String),
}

impl LayoutKind {
    pub fn family(&self) -> Family {
        match self {
            LayoutKind::Lake8x8 | LayoutKind::Lake4x4 => Family::Lake,
            LayoutKind::Text(t) => {
                if t.chars().any(|c| matches!(c, 'W' | 'K' | 'D' | 'B' | 'O' | 'X' | 'L')) {
                    Family::Grid
                } else {
                    Family::Lake
                }
            }
            _ => Family::Grid,
        }
    }

    fn is_procedural(&self) -> bool {
        matches!(
            self,
            LayoutKind::RedBall | LayoutKind::DoorKey | LayoutKind::DistractedDoorKey | LayoutKind::LavaCrossing
        )
    }
}

/// Static description of an environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub kind: LayoutKind,
    /// Cell count; for fixed layouts must match the layout.
    pub width: usize,
    pub height: usize,
    /// Probability that a lake move is replaced by a perpendicular one.
    pub slip_prob: f64,
    /// Default layout seed.
    pub seed: u64,
    pub max_steps: usize,
    pub view_size: usize,
}

pub const LAKE_8X8: [&str; 8] = [
    "SFFFFFFF", "FFFFFFFF", "FFFHFFFF", "FFFFFHFF", "FFFHFFFF", "FHHFFFHF", "FHFFHFHF", "FFFHFFFG",
];
pub const LAKE_4X4: [&str; 4] = ["SFFF", "FHFH", "FFFH", "HFFG"];

impl GridSpec {
    /// The 8×8 lake with gymnasium's slippery dynamics (each of the three
    /// candidate moves equally likely) and a 200-step horizon.
    pub fn lake8x8() -> Self {
        GridSpec {
            kind: LayoutKind::Lake8x8,
            width: 8,
            height: 8,
            slip_prob: 2.0 / 3.0,
            seed: 0,
            max_steps: 200,
            view_size: 7,
        }
    }

    pub fn doorkey(size: usize) -> Self {
        Self::generated(LayoutKind::DoorKey, size)
    }

    pub fn generated(kind: LayoutKind, size: usize) -> Self {
        GridSpec { kind, width: size, height: size, slip_prob: 0.0, seed: 0, max_steps: 300, view_size: 7 }
    }

    pub fn from_text(text: &str) -> Result<Self, EnvError> {
        let layout = Layout::parse(text)?;
        let kind = LayoutKind::Text(text.to_string());
        let max_steps = if kind.family() == Family::Lake { 200 } else { 300 };
        Ok(GridSpec {
            kind,
            width: layout.width,
            height: layout.height,
            slip_prob: 0.0,
            seed: 0,
            max_steps,
            view_size: 7,
        })
    }

    pub fn family(&self) -> Family {
        self.kind.family()
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.width == 0 || self.height == 0 {
            return Err(EnvError::InvalidSpec("zero dimensions".into()));
        }
        if !(0.0..=1.0).contains(&self.slip_prob) || self.slip_prob.is_nan() {
            return Err(EnvError::InvalidSpec(format!("slip_prob {} outside [0,1]", self.slip_prob)));
        }
        if self.max_steps == 0 {
            return Err(EnvError::InvalidSpec("max_steps must be positive".into()));
        }
        if self.view_size == 0 || self.view_size.is_multiple_of(2) {
            return Err(EnvError::InvalidSpec(format!("view_size {} must be odd", self.view_size)));
        }
        if self.kind.is_procedural() && self.width.min(self.height) < 5 {
            return Err(EnvError::InvalidSpec("generated layouts need at least 5×5 cells".into()));
        }
        Ok(())
    }

    /// Builds the concrete layout for `seed`. Fixed layouts ignore the seed.
    pub fn build_layout(&self, seed: u64) -> Result<Layout, EnvError> {
        self.validate()?;
        let layout = match &self.kind {
            LayoutKind::Lake8x8 => Layout::parse(&LAKE_8X8.join("\n"))?,
            LayoutKind::Lake4x4 => Layout::parse(&LAKE_4X4.join("\n"))?,
            LayoutKind::Text(t) => Layout::parse(t)?,
            LayoutKind::DoorKey => gen_doorkey(self.width, self.height, seed, 0)?,
            LayoutKind::DistractedDoorKey => gen_doorkey(self.width, self.height, seed, 2)?,
            LayoutKind::RedBall => gen_redball(self.width, self.height, seed)?,
            LayoutKind::LavaCrossing => gen_lava(self.width, self.height, seed)?,
        };
        if layout.width != self.width || layout.height != self.height {
            return Err(EnvError::InvalidSpec(format!(
                "layout is {}×{} but spec says {}×{}",
                layout.width, layout.height, self.width, self.height
            )));
        }
        Ok(layout)
    }
}

/// A concrete grid: cells, start pose and task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<Cell>,
    pub start: Pos,
    pub start_dir: u8,
    pub task: Task,
    pub family: Family,
}

impl Layout {
    /// Parses a fixture grid: one row per line, single-character codes
    /// `S F H G W K D B X` (start, floor, hole, goal, wall, key, door, ball,
    /// box), plus `L` for lava and `.` as a floor alias. Doors are locked and
    /// yellow, keys yellow, balls red, boxes grey.
    pub fn parse(text: &str) -> Result<Layout, EnvError> {
        let rows: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        if rows.is_empty() {
            return Err(EnvError::Layout("empty grid".into()));
        }
        let width = rows[0].chars().count();
        let height = rows.len();
        let family = LayoutKind::Text(text.to_string()).family();
        let mut cells = Vec::with_capacity(width * height);
        let mut start = None;
        let mut has_goal = false;
        let mut has_ball = false;
        let mut has_key = false;
        for (r, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(EnvError::Layout(format!("row {r} has {} cells, expected {width}", row.chars().count())));
            }
            for (c, ch) in row.chars().enumerate() {
                let cell = match ch.to_ascii_uppercase() {
                    'S' => {
                        if start.replace(Pos::new(r, c)).is_some() {
                            return Err(EnvError::Layout("more than one start cell".into()));
                        }
                        Cell::Floor
                    }
                    'F' | '.' => Cell::Floor,
                    'H' => Cell::Hole,
                    'L' => Cell::Lava,
                    'G' => {
                        has_goal = true;
                        Cell::Goal
                    }
                    'W' => Cell::Wall,
                    'K' => {
                        has_key = true;
                        Cell::Key(Color::Yellow)
                    }
                    'D' => Cell::Door { color: Color::Yellow, state: DoorState::Locked },
                    'B' => {
                        has_ball = true;
                        Cell::Ball(Color::Red)
                    }
                    'O' => Cell::Ball(Color::Grey),
                    'X' => Cell::Box(Color::Grey),
                    other => return Err(EnvError::Layout(format!("unknown cell code {other:?} at ({r},{c})"))),
                };
                cells.push(cell);
            }
        }
        let start = start.ok_or_else(|| EnvError::Layout("no start cell".into()))?;
        let has_door = cells.iter().any(|c| matches!(c, Cell::Door { .. }));
        let task = if has_door && has_key {
            Task::DoorKey
        } else if !has_goal && has_ball {
            Task::Fetch(Color::Red)
        } else {
            Task::ReachGoal
        };
        if !has_goal && !matches!(task, Task::Fetch(_)) {
            return Err(EnvError::Layout("no goal cell".into()));
        }
        Ok(Layout { width, height, cells, start, start_dir: 0, task, family })
    }

    pub fn cell(&self, p: Pos) -> Cell {
        self.cells[p.row * self.width + p.col]
    }

    fn set(&mut self, p: Pos, cell: Cell) {
        self.cells[p.row * self.width + p.col] = cell;
    }

    /// Stable 64-bit FNV-1a hash of the grid, start pose and task.
    pub fn layout_id(&self) -> u64 {
        let mut h = Fnv::new();
        h.write(&(self.width as u32).to_le_bytes());
        h.write(&(self.height as u32).to_le_bytes());
        for c in &self.cells {
            h.write(&[c.fingerprint()]);
        }
        h.write(&(self.start.row as u32).to_le_bytes());
        h.write(&(self.start.col as u32).to_le_bytes());
        h.write(&[self.start_dir]);
        h.write(&[match self.task {
            Task::ReachGoal => 0,
            Task::Fetch(c) => 10 + c as u8,
            Task::DoorKey => 1,
        }]);
        h.finish()
    }

    /// Renders the grid as fixture text (start marked `S`).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in 0..self.height {
            for c in 0..self.width {
                let p = Pos::new(r, c);
                out.push(if p == self.start { 'S' } else { self.cell(p).fixture_char() });
            }
            out.push('\n');
        }
        out
    }

    fn find(&self, pred: impl Fn(Cell) -> bool) -> Option<Pos> {
        self.cells
            .iter()
            .position(|&c| pred(c))
            .map(|i| Pos::new(i / self.width, i % self.width))
    }
}

/// 64-bit FNV-1a.
pub(crate) struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= *b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

fn walled_room(width: usize, height: usize) -> Vec<Cell> {
    let mut cells = vec![Cell::Floor; width * height];
    for r in 0..height {
        for c in 0..width {
            if r == 0 || c == 0 || r == height - 1 || c == width - 1 {
                cells[r * width + c] = Cell::Wall;
            }
        }
    }
    cells
}

fn free_cells(layout: &Layout, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Vec<Pos> {
    let mut out = Vec::new();
    for r in rows {
        for c in cols.clone() {
            let p = Pos::new(r, c);
            if layout.cell(p) == Cell::Floor && p != layout.start {
                out.push(p);
            }
        }
    }
    out
}

fn gen_doorkey(width: usize, height: usize, seed: u64, distractors: usize) -> Result<Layout, EnvError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD00D_0000_0000_0000);
    for _attempt in 0..64 {
        let mut layout = Layout {
            width,
            height,
            cells: walled_room(width, height),
            start: Pos::new(0, 0),
            start_dir: 0,
            task: Task::DoorKey,
            family: Family::Grid,
        };
        let goal = Pos::new(height - 2, width - 2);
        layout.set(goal, Cell::Goal);
        let split = rng.gen_range(2..=width - 3);
        for r in 0..height {
            layout.set(Pos::new(r, split), Cell::Wall);
        }
        let door = Pos::new(rng.gen_range(1..=height - 2), split);
        layout.set(door, Cell::Door { color: Color::Yellow, state: DoorState::Locked });
        let left = free_cells(&layout, 1..height - 1, 1..split);
        let key = *left.choose(&mut rng).expect("left room has cells");
        layout.set(key, Cell::Key(Color::Yellow));
        let left = free_cells(&layout, 1..height - 1, 1..split);
        let Some(&start) = left.choose(&mut rng) else { continue };
        layout.start = start;
        layout.start_dir = rng.gen_range(0..4);
        let mut placed = 0;
        while placed < distractors {
            let near_door = |p: Pos| p.row.abs_diff(door.row) + p.col.abs_diff(door.col) <= 1;
            let cands: Vec<Pos> = free_cells(&layout, 1..height - 1, 1..width - 1)
                .into_iter()
                .filter(|&p| !near_door(p) && p != goal)
                .collect();
            let Some(&p) = cands.choose(&mut rng) else { break };
            let obj = if placed % 2 == 0 { Cell::Ball(Color::Grey) } else { Cell::Box(Color::Purple) };
            layout.set(p, obj);
            placed += 1;
        }
        if solvable(&layout) {
            return Ok(layout);
        }
    }
    Err(EnvError::Layout(format!("could not generate a solvable doorkey layout for seed {seed}")))
}

fn gen_redball(width: usize, height: usize, seed: u64) -> Result<Layout, EnvError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBA11_0000_0000_0000);
    let mut layout = Layout {
        width,
        height,
        cells: walled_room(width, height),
        start: Pos::new(0, 0),
        start_dir: 0,
        task: Task::Fetch(Color::Red),
        family: Family::Grid,
    };
    let mut cells = free_cells(&layout, 1..height - 1, 1..width - 1);
    cells.shuffle(&mut rng);
    layout.set(cells[0], Cell::Ball(Color::Red));
    layout.set(cells[1], Cell::Ball(Color::Grey));
    layout.set(cells[2], Cell::Ball(Color::Blue));
    layout.start = cells[3];
    layout.start_dir = rng.gen_range(0..4);
    Ok(layout)
}

fn gen_lava(width: usize, height: usize, seed: u64) -> Result<Layout, EnvError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1A7A_0000_0000_0000);
    let mut layout = Layout {
        width,
        height,
        cells: walled_room(width, height),
        start: Pos::new(1, 1),
        start_dir: 0,
        task: Task::ReachGoal,
        family: Family::Grid,
    };
    layout.set(Pos::new(height - 2, width - 2), Cell::Goal);
    if rng.gen_bool(0.5) {
        let col = rng.gen_range(2..=width - 3);
        let gap = rng.gen_range(1..=height - 2);
        for r in 1..height - 1 {
            if r != gap {
                layout.set(Pos::new(r, col), Cell::Lava);
            }
        }
    } else {
        let row = rng.gen_range(2..=height - 3);
        let gap = rng.gen_range(1..=width - 2);
        for c in 1..width - 1 {
            if c != gap {
                layout.set(Pos::new(row, c), Cell::Lava);
            }
        }
    }
    Ok(layout)
}

fn solvable(layout: &Layout) -> bool {
    let Ok(state) = EnvState::from_layout(layout.clone(), 0.0, 1, 7) else { return false };
    let lm = state.landmarks;
    match (lm.key, lm.door, lm.goal) {
        (Some(key), Some(door), Some(goal)) => {
            let mut with_key = state.clone();
            with_key.carrying = Some(Cell::Key(Color::Yellow));
            state.shortest_path_distance(key).is_some()
                && with_key.distance_between(key, door).is_some()
                && with_key.distance_between(door, goal).is_some()
        }
        (_, _, Some(goal)) => state.shortest_path_distance(goal).is_some(),
        _ => true,
    }
}

/// Entity vocabulary of subgoal descriptions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Entity {
    Key,
    Door,
    Goal,
    Ball,
    Box,
    Lava,
}

impl Entity {
    pub fn as_str(self) -> &'static str {
        match self {
            Entity::Key => "key",
            Entity::Door => "door",
            Entity::Goal => "goal",
            Entity::Ball => "ball",
            Entity::Box => "box",
            Entity::Lava => "lava",
        }
    }
}

/// Action-phase vocabulary of subgoal descriptions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseVerb {
    Navigate,
    Acquire,
    Toggle,
}

impl PhaseVerb {
    pub fn as_str(self) -> &'static str {
        match self {
            PhaseVerb::Navigate => "navigate",
            PhaseVerb::Acquire => "acquire",
            PhaseVerb::Toggle => "toggle",
        }
    }
}

/// Entity–phase token pair. Phases read off the environment always carry
/// both parts; parsed descriptions may carry only one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubgoalPhase {
    pub entity: Option<Entity>,
    pub verb: Option<PhaseVerb>,
}

impl SubgoalPhase {
    pub const KEY_NAVIGATE: SubgoalPhase = SubgoalPhase::new(Entity::Key, PhaseVerb::Navigate);
    pub const DOOR_TOGGLE: SubgoalPhase = SubgoalPhase::new(Entity::Door, PhaseVerb::Toggle);
    pub const GOAL_NAVIGATE: SubgoalPhase = SubgoalPhase::new(Entity::Goal, PhaseVerb::Navigate);

    pub const fn new(entity: Entity, verb: PhaseVerb) -> Self {
        SubgoalPhase { entity: Some(entity), verb: Some(verb) }
    }

    pub fn tokens(&self) -> Vec<&'static str> {
        self.entity
            .map(Entity::as_str)
            .into_iter()
            .chain(self.verb.map(PhaseVerb::as_str))
            .collect()
    }

    /// Canonical description, e.g. `"go to key"`.
    pub fn describe(&self) -> String {
        let verb = match self.verb {
            Some(PhaseVerb::Navigate) => "go to",
            Some(PhaseVerb::Acquire) => "pick up",
            Some(PhaseVerb::Toggle) => "toggle",
            None => "reach",
        };
        let entity = self.entity.map(Entity::as_str).unwrap_or("target");
        format!("{verb} {entity}")
    }
}

impl fmt::Display for SubgoalPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {})",
            self.entity.map(Entity::as_str).unwrap_or("-"),
            self.verb.map(PhaseVerb::as_str).unwrap_or("-")
        )
    }
}

/// Agent position and (for grid families) orientation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pose {
    pub pos: Pos,
    pub dir: Option<u8>,
}

/// Initial positions of the task-relevant objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Landmarks {
    pub key: Option<Pos>,
    pub door: Option<Pos>,
    pub goal: Option<Pos>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Observation {
    /// Lake: the agent's cell index `row·width + col`.
    Tabular { index: usize, n_states: usize },
    /// Row-major `size×size` window; row 0 is farthest ahead, the agent
    /// sits at `(size−1, size/2)` facing up the window.
    Egocentric { view: Vec<u8>, dir: u8, size: usize },
}

impl Observation {
    /// Number of distinct feature indices for this observation kind.
    pub fn feature_dim(&self) -> usize {
        match self {
            Observation::Tabular { n_states, .. } => *n_states,
            Observation::Egocentric { size, .. } => size * size * view_code::COUNT + 4,
        }
    }

    /// Active one-hot feature indices.
    pub fn features(&self) -> Vec<u32> {
        match self {
            Observation::Tabular { index, .. } => vec![*index as u32],
            Observation::Egocentric { view, dir, size } => {
                let mut f: Vec<u32> = view
                    .iter()
                    .enumerate()
                    .map(|(i, &code)| (i * view_code::COUNT + code as usize) as u32)
                    .collect();
                f.push((size * size * view_code::COUNT + *dir as usize) as u32);
                f
            }
        }
    }

    /// Character rendering of an egocentric window, one row per line.
    pub fn render(&self) -> String {
        match self {
            Observation::Tabular { index, .. } => format!("state {index}"),
            Observation::Egocentric { view, size, .. } => {
                let mut s = String::with_capacity(view.len() + size);
                for r in 0..*size {
                    for c in 0..*size {
                        s.push(view_code::to_char(view[r * size + c]));
                    }
                    s.push('\n');
                }
                s
            }
        }
    }
}

/// Result of a single transition.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
    /// Ended by the horizon rather than by success or failure.
    pub truncated: bool,
    /// Lake only: the move actually executed after slipping.
    pub realized: Option<Action>,
}

/// Mutable episode state. Cheap to clone.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub family: Family,
    pub task: Task,
    pub width: usize,
    pub height: usize,
    pub cells: Vec<Cell>,
    pub agent_pos: Pos,
    /// 0 east, 1 south, 2 west, 3 north. Always 0 on the lake.
    pub agent_dir: u8,
    pub carrying: Option<Cell>,
    pub step_count: usize,
    pub max_steps: usize,
    pub slip_prob: f64,
    pub view_size: usize,
    pub layout_id: u64,
    pub landmarks: Landmarks,
    pub done: bool,
    /// Furthest DoorKey subgoal reached this episode: 0 none, 1 key
    /// picked up, 2 door opened. Phases never move backwards.
    pub progress: u8,
}

/// Starts a fresh episode; deterministic in `(spec, seed)`.
pub fn reset(spec: &GridSpec, seed: u64) -> Result<(EnvState, Observation), EnvError> {
    let layout = spec.build_layout(seed)?;
    let state = EnvState::from_layout(layout, spec.slip_prob, spec.max_steps, spec.view_size)?;
    let obs = state.observe();
    Ok((state, obs))
}

impl EnvState {
    pub fn from_layout(layout: Layout, slip_prob: f64, max_steps: usize, view_size: usize) -> Result<Self, EnvError> {
        if max_steps == 0 {
            return Err(EnvError::InvalidSpec("max_steps must be positive".into()));
        }
        let layout_id = layout.layout_id();
        let goal = match layout.task {
            Task::Fetch(color) => layout.find(|c| c == Cell::Ball(color)),
            _ => layout.find(|c| c == Cell::Goal),
        };
        let landmarks = Landmarks {
            key: layout.find(|c| matches!(c, Cell::Key(_))),
            door: layout.find(|c| matches!(c, Cell::Door { .. })),
            goal,
        };
        if goal.is_none() {
            return Err(EnvError::Layout("no goal cell".into()));
        }
        Ok(EnvState {
            family: layout.family,
            task: layout.task,
            width: layout.width,
            height: layout.height,
            cells: layout.cells,
            agent_pos: layout.start,
            agent_dir: if layout.family == Family::Lake { 0 } else { layout.start_dir },
            carrying: None,
            step_count: 0,
            max_steps,
            slip_prob,
            view_size,
            layout_id,
            landmarks,
            done: false,
            progress: 0,
        })
    }

    pub fn cell(&self, p: Pos) -> Cell {
        self.cells[p.row * self.width + p.col]
    }

    fn set(&mut self, p: Pos, cell: Cell) {
        self.cells[p.row * self.width + p.col] = cell;
    }

    pub fn n_states(&self) -> usize {
        self.width * self.height
    }

    pub fn pose(&self) -> Pose {
        Pose { pos: self.agent_pos, dir: (!self.family.is_tabular()).then_some(self.agent_dir) }
    }

    /// Cell directly in front of the agent, if inside the grid.
    pub fn front(&self) -> Option<Pos> {
        let (dr, dc) = DIR_VEC[self.agent_dir as usize];
        self.agent_pos.offset(dr, dc, self.width, self.height)
    }

    pub fn door_states(&self) -> Vec<(Pos, DoorState)> {
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(i, c)| match c {
                Cell::Door { state, .. } => Some((Pos::new(i / self.width, i % self.width), *state)),
                _ => None,
            })
            .collect()
    }

    pub fn observe(&self) -> Observation {
        match self.family {
            Family::Lake => Observation::Tabular {
                index: self.agent_pos.row * self.width + self.agent_pos.col,
                n_states: self.n_states(),
            },
            Family::Grid => Observation::Egocentric {
                view: self.egocentric_view(),
                dir: self.agent_dir,
                size: self.view_size,
            },
        }
    }

    /// World position of a window cell, if inside the grid.
    pub fn view_to_world(&self, vrow: usize, vcol: usize) -> Option<Pos> {
        let v = self.view_size as i64;
        let fwd = v - 1 - vrow as i64;
        let lat = vcol as i64 - v / 2;
        let (fr, fc) = DIR_VEC[self.agent_dir as usize];
        let (rr, rc) = DIR_VEC[((self.agent_dir + 1) % 4) as usize];
        self.agent_pos.offset(fwd * fr + lat * rr, fwd * fc + lat * rc, self.width, self.height)
    }

    fn egocentric_view(&self) -> Vec<u8> {
        let v = self.view_size;
        let mut view = vec![view_code::UNSEEN; v * v];
        for vr in 0..v {
            for vc in 0..v {
                let idx = vr * v + vc;
                if vr == v - 1 && vc == v / 2 {
                    view[idx] = self.carrying.map_or(view_code::EMPTY, cell_code);
                    continue;
                }
                view[idx] = match self.view_to_world(vr, vc) {
                    None => view_code::WALL,
                    Some(p) if self.line_of_sight(p) => cell_code(self.cell(p)),
                    Some(_) => view_code::UNSEEN,
                };
            }
        }
        view
    }

    /// True when no opaque cell lies strictly between the agent and `p`.
    fn line_of_sight(&self, p: Pos) -> bool {
        // a cell counts as seen when any of a few rays toward it is clear,
        // so diagonal neighbours are not hidden by rounding
        const AIM: [(f64, f64); 5] = [(0.0, 0.0), (-0.3, -0.3), (-0.3, 0.3), (0.3, -0.3), (0.3, 0.3)];
        let (r0, c0) = (self.agent_pos.row as f64, self.agent_pos.col as f64);
        AIM.iter().any(|&(dr, dc)| {
            let (r1, c1) = (p.row as f64 + dr, p.col as f64 + dc);
            let steps = ((r1 - r0).abs().max((c1 - c0).abs()) * 4.0).ceil() as usize;
            (1..steps).all(|i| {
                let t = i as f64 / steps as f64;
                let q = Pos::new((r0 + t * (r1 - r0)).round() as usize, (c0 + t * (c1 - c0)).round() as usize);
                q == self.agent_pos || q == p || !self.cell(q).is_opaque()
            })
        })
    }

    /// Applies `action`; `rng` drives lake slipping only.
    pub fn step<R: Rng + ?Sized>(&mut self, action: Action, rng: &mut R) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        if action.index() >= self.family.n_actions() {
            return Err(EnvError::InvalidAction { action: action.0, family: self.family });
        }
        self.step_count += 1;
        let (reward, mut done, success, realized) = match self.family {
            Family::Lake => self.step_lake(action, rng),
            Family::Grid => self.step_grid(action),
        };
        let mut truncated = false;
        if !done && self.step_count >= self.max_steps {
            done = true;
            truncated = true;
        }
        self.done = done;
        Ok(StepOutcome { obs: self.observe(), reward, done, success, truncated, realized })
    }

    fn step_lake<R: Rng + ?Sized>(&mut self, action: Action, rng: &mut R) -> (f64, bool, bool, Option<Action>) {
        let mut realized = action;
        if self.slip_prob > 0.0 && rng.gen::<f64>() < self.slip_prob {
            let side = rng.gen_bool(0.5);
            realized = match (action.0, side) {
                (0 | 2, false) => Action::LAKE_UP,
                (0 | 2, true) => Action::LAKE_DOWN,
                (_, false) => Action::LAKE_LEFT,
                (_, true) => Action::LAKE_RIGHT,
            };
        }
        let (dr, dc) = match realized.0 {
            0 => (0, -1),
            1 => (1, 0),
            2 => (0, 1),
            _ => (-1, 0),
        };
        if let Some(p) = self.agent_pos.offset(dr, dc, self.width, self.height) {
            self.agent_pos = p;
        }
        match self.cell(self.agent_pos) {
            Cell::Goal => (1.0, true, true, Some(realized)),
            Cell::Hole | Cell::Lava => (0.0, true, false, Some(realized)),
            _ => (0.0, false, false, Some(realized)),
        }
    }

    fn success_reward(&self) -> f64 {
        1.0 - 0.9 * (self.step_count as f64 / self.max_steps as f64)
    }

    fn step_grid(&mut self, action: Action) -> (f64, bool, bool, Option<Action>) {
        let front = self.front();
        let front_cell = front.map(|p| self.cell(p));
        match action {
            Action::TURN_LEFT => self.agent_dir = (self.agent_dir + 3) % 4,
            Action::TURN_RIGHT => self.agent_dir = (self.agent_dir + 1) % 4,
            Action::FORWARD => {
                if let (Some(p), Some(cell)) = (front, front_cell) {
                    if cell.can_overlap() {
                        self.agent_pos = p;
                        match cell {
                            Cell::Goal if !matches!(self.task, Task::Fetch(_)) => {
                                return (self.success_reward(), true, true, None);
                            }
                            Cell::Lava | Cell::Hole => return (0.0, true, false, None),
                            _ => {}
                        }
                    }
                }
            }
            Action::PICKUP => {
                if let (Some(p), Some(cell)) = (front, front_cell) {
                    if cell.can_pickup() && self.carrying.is_none() {
                        self.carrying = Some(cell);
                        if matches!(cell, Cell::Key(_)) {
                            self.progress = self.progress.max(1);
                        }
                        self.set(p, Cell::Floor);
                        if let Task::Fetch(color) = self.task {
                            return if cell == Cell::Ball(color) {
                                (self.success_reward(), true, true, None)
                            } else {
                                (0.0, true, false, None)
                            };
                        }
                    }
                }
            }
            Action::DROP => {
                if let (Some(p), Some(Cell::Floor), Some(obj)) = (front, front_cell, self.carrying) {
                    self.set(p, obj);
                    self.carrying = None;
                }
            }
            Action::TOGGLE => {
                if let (Some(p), Some(Cell::Door { color, state })) = (front, front_cell) {
                    let next = match state {
                        DoorState::Locked => {
                            if self.carrying == Some(Cell::Key(color)) {
                                DoorState::Open
                            } else {
                                DoorState::Locked
                            }
                        }
                        DoorState::Closed => DoorState::Open,
                        DoorState::Open => DoorState::Closed,
                    };
                    if next == DoorState::Open {
                        self.progress = 2;
                    }
                    self.set(p, Cell::Door { color, state: next });
                }
            }
            _ => {}
        }
        (0.0, false, false, None)
    }

    /// Which subgoal the episode is in, by furthest progress.
    pub fn subgoal_phase(&self) -> SubgoalPhase {
        if self.task != Task::DoorKey {
            return SubgoalPhase::GOAL_NAVIGATE;
        }
        match self.progress {
            0 => SubgoalPhase::KEY_NAVIGATE,
            1 => SubgoalPhase::DOOR_TOGGLE,
            _ => SubgoalPhase::GOAL_NAVIGATE,
        }
    }

    /// Target cell of a phase in this layout, if it has one.
    pub fn phase_target(&self, phase: &SubgoalPhase) -> Option<Pos> {
        match phase.entity? {
            Entity::Key => self.landmarks.key,
            Entity::Door => self.landmarks.door,
            Entity::Goal | Entity::Ball => self.landmarks.goal,
            Entity::Box => self.find_cell(|c| matches!(c, Cell::Box(_))),
            Entity::Lava => self.find_cell(|c| c == Cell::Lava),
        }
    }

    fn find_cell(&self, pred: impl Fn(Cell) -> bool) -> Option<Pos> {
        self.cells
            .iter()
            .position(|&c| pred(c))
            .map(|i| Pos::new(i / self.width, i % self.width))
    }

    fn passable(&self, cell: Cell) -> bool {
        match cell {
            Cell::Floor | Cell::Goal => true,
            Cell::Door { state: DoorState::Open | DoorState::Closed, .. } => true,
            Cell::Door { state: DoorState::Locked, color } => self.carrying == Some(Cell::Key(color)),
            Cell::Wall | Cell::Lava | Cell::Hole | Cell::Key(_) | Cell::Ball(_) | Cell::Box(_) => false,
        }
    }

    /// BFS step count from the agent to `target`; `None` when unreachable.
    pub fn shortest_path_distance(&self, target: Pos) -> Option<usize> {
        self.distance_between(self.agent_pos, target)
    }

    /// BFS step count between two cells under this state's passability
    /// (the target cell itself may always be entered).
    pub fn distance_between(&self, from: Pos, target: Pos) -> Option<usize> {
        if target.row >= self.height || target.col >= self.width || from.row >= self.height || from.col >= self.width {
            return None;
        }
        if from == target {
            return Some(0);
        }
        let mut dist = vec![usize::MAX; self.width * self.height];
        let mut queue = VecDeque::new();
        dist[from.row * self.width + from.col] = 0;
        queue.push_back(from);
        while let Some(p) = queue.pop_front() {
            let d = dist[p.row * self.width + p.col];
            for (dr, dc) in DIR_VEC {
                let Some(q) = p.offset(dr, dc, self.width, self.height) else { continue };
                let qi = q.row * self.width + q.col;
                if dist[qi] != usize::MAX {
                    continue;
                }
                if q == target {
                    return Some(d + 1);
                }
                if self.passable(self.cell(q)) {
                    dist[qi] = d + 1;
                    queue.push_back(q);
                }
            }
        }
        None
    }

    /// Whether `target` shows in the agent's current window. Always true on
    /// the lake, whose map is known.
    pub fn target_visible(&self, target: Pos) -> bool {
        if self.family.is_tabular() {
            return true;
        }
        let v = self.view_size;
        (0..v).any(|vr| {
            (0..v).any(|vc| self.view_to_world(vr, vc) == Some(target) && self.line_of_sight(target))
        })
    }

    /// Free-text description of the layout, for offline guidance.
    pub fn describe(&self) -> String {
        let mut grid = String::new();
        for r in 0..self.height {
            for c in 0..self.width {
                let p = Pos::new(r, c);
                grid.push(if p == self.agent_pos { 'S' } else { self.cell(p).fixture_char() });
            }
            grid.push('\n');
        }
        let task = match self.task {
            Task::ReachGoal => "reach the goal square G",
            Task::Fetch(_) => "pick up the red ball B",
            Task::DoorKey => "pick up the key K, unlock the door D and reach the goal square G",
        };
        format!(
            "{}x{} {} world; task: {task}; start facing {}.\n{grid}",
            self.width,
            self.height,
            self.family,
            ["east", "south", "west", "north"][self.agent_dir as usize % 4]
        )
    }
}
