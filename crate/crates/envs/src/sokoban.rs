//! Sokoban with object-level macro actions.
//!
//! The engine implements the usual elementary moves. The agent instead picks
//! a cell and one of five macros (walk there, or push the box on it one cell
//! in a direction); a breadth-first planner expands the macro into elementary
//! moves and the macro's reward is the sum of theirs.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use relrl_core::a2c::{Domain, Environment, StepResult};
use relrl_core::graph::{Edge, GraphShape, StateGraph};
use relrl_core::policy::{ActionChoice, ActionKind, ActionSchema, Preconditions};

use crate::error::{parse_err, EnvError, Result};

pub const STEP_REWARD: f64 = -0.1;
pub const BOX_ON_GOAL: f64 = 1.0;
pub const BOX_OFF_GOAL: f64 = -1.0;
pub const SOLVED_REWARD: f64 = 10.0;

/// Minimum number of pulls in a generated level.
pub const MIN_PULLS: usize = 5;
const GENERATION_ATTEMPTS: usize = 1000;
/// Chance that a step away from an adjacent box drags it along.
const PULL_PROBABILITY: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dir {
    Left,
    Right,
    Up,
    Down,
}

impl Dir {
    /// Planner neighbor order.
    pub const ALL: [Dir; 4] = [Dir::Left, Dir::Right, Dir::Up, Dir::Down];

    pub fn index(self) -> usize {
        self as usize
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Dir::Left => (0, -1),
            Dir::Right => (0, 1),
            Dir::Up => (-1, 0),
            Dir::Down => (1, 0),
        }
    }

    pub fn opposite(self) -> Dir {
        match self {
            Dir::Left => Dir::Right,
            Dir::Right => Dir::Left,
            Dir::Up => Dir::Down,
            Dir::Down => Dir::Up,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementary {
    Move(Dir),
    Noop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MacroKind {
    MoveTo,
    Push(Dir),
}

impl MacroKind {
    /// Schema order: move_to, push_left, push_right, push_up, push_down.
    pub fn from_schema(id: usize) -> Option<Self> {
        match id {
            0 => Some(MacroKind::MoveTo),
            1..=4 => Some(MacroKind::Push(Dir::ALL[id - 1])),
            _ => None,
        }
    }
}

pub fn shape() -> GraphShape {
    GraphShape {
        node_width: 3,
        edge_width: 0,
        edge_types: 4,
        global_width: 0,
    }
}

pub fn schemas() -> Vec<ActionSchema> {
    ["move_to", "push_left", "push_right", "push_up", "push_down"]
        .iter()
        .enumerate()
        .map(|(i, name)| ActionSchema::new(i, name, ActionKind::Parametric { arity: 1 }))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MacroOutcome {
    pub reward: f64,
    pub terminal: bool,
    /// Elementary actions actually executed.
    pub executed: Vec<Elementary>,
}

/// Static layout shared by every state of one level.
#[derive(Debug, PartialEq, Eq)]
struct Layout {
    width: usize,
    height: usize,
    walls: Vec<bool>,
    goals: Vec<bool>,
    /// Cell of each graph node.
    node_cells: Vec<usize>,
    /// Graph node of each cell.
    cell_nodes: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sokoban {
    layout: Arc<Layout>,
    boxes: Vec<bool>,
    player: usize,
}

impl Sokoban {
    /// Builds a level from row-major matrices, checking the usual invariants.
    pub fn from_matrices(
        width: usize,
        height: usize,
        walls: Vec<bool>,
        goals: Vec<bool>,
        boxes: Vec<bool>,
        player: usize,
    ) -> Result<Self> {
        let cells = width * height;
        if [walls.len(), goals.len(), boxes.len()].iter().any(|l| *l != cells) || cells == 0 {
            return Err(EnvError::Invalid("matrices must all be width × height".into()));
        }
        if player >= cells || walls[player] || boxes[player] {
            return Err(EnvError::Invalid("player must stand on a free floor cell".into()));
        }
        if (0..cells).any(|c| walls[c] && (boxes[c] || goals[c])) {
            return Err(EnvError::Invalid("boxes and goals cannot sit in walls".into()));
        }
        let nb = boxes.iter().filter(|b| **b).count();
        let ng = goals.iter().filter(|g| **g).count();
        if nb != ng {
            return Err(EnvError::Invalid(format!("{nb} boxes but {ng} goals")));
        }
        let mut node_cells = Vec::new();
        let mut cell_nodes = vec![None; cells];
        for c in 0..cells {
            if !walls[c] {
                cell_nodes[c] = Some(node_cells.len());
                node_cells.push(c);
            }
        }
        Ok(Self {
            layout: Arc::new(Layout {
                width,
                height,
                walls,
                goals,
                node_cells,
                cell_nodes,
            }),
            boxes,
            player,
        })
    }

    pub fn width(&self) -> usize {
        self.layout.width
    }

    pub fn height(&self) -> usize {
        self.layout.height
    }

    pub fn player(&self) -> usize {
        self.player
    }

    pub fn is_wall(&self, cell: usize) -> bool {
        self.layout.walls[cell]
    }

    pub fn is_goal(&self, cell: usize) -> bool {
        self.layout.goals[cell]
    }

    pub fn has_box(&self, cell: usize) -> bool {
        self.boxes[cell]
    }

    pub fn boxes(&self) -> &[bool] {
        &self.boxes
    }

    pub fn num_nodes(&self) -> usize {
        self.layout.node_cells.len()
    }

    pub fn node_cell(&self, node: usize) -> usize {
        self.layout.node_cells[node]
    }

    pub fn cell_node(&self, cell: usize) -> Option<usize> {
        self.layout.cell_nodes[cell]
    }

    pub fn is_solved(&self) -> bool {
        self.boxes.iter().zip(&self.layout.goals).all(|(b, g)| b == g)
    }

    pub fn neighbor(&self, cell: usize, dir: Dir) -> Option<usize> {
        let (w, h) = (self.layout.width as isize, self.layout.height as isize);
        let (r, c) = ((cell / self.layout.width) as isize, (cell % self.layout.width) as isize);
        let (dr, dc) = dir.delta();
        let (r, c) = (r + dr, c + dc);
        (r >= 0 && r < h && c >= 0 && c < w).then(|| (r * w + c) as usize)
    }

    fn is_floor(&self, cell: usize) -> bool {
        !self.layout.walls[cell]
    }

    fn is_open(&self, cell: usize) -> bool {
        self.is_floor(cell) && !self.boxes[cell]
    }

    /// One elementary action with the standard mechanics. Blocked moves only cost the step penalty.
    pub fn elementary_step(&mut self, action: Elementary) -> (f64, bool) {
        let mut reward = STEP_REWARD;
        if let Elementary::Move(d) = action {
            if let Some(t) = self.neighbor(self.player, d).filter(|&t| self.is_floor(t)) {
                if !self.boxes[t] {
                    self.player = t;
                } else if let Some(t2) = self.neighbor(t, d).filter(|&t2| self.is_open(t2)) {
                    self.boxes[t] = false;
                    self.boxes[t2] = true;
                    self.player = t;
                    reward += self.goal_delta(t, t2);
                }
            }
        }
        let solved = self.is_solved();
        if solved {
            reward += SOLVED_REWARD;
        }
        (reward, solved)
    }

    fn goal_delta(&self, from: usize, to: usize) -> f64 {
        match (self.layout.goals[from], self.layout.goals[to]) {
            (false, true) => BOX_ON_GOAL,
            (true, false) => BOX_OFF_GOAL,
            _ => 0.0,
        }
    }

    /// Shortest walk to `cell` with boxes as obstacles; `None` when unreachable.
    pub fn plan_move_to(&self, cell: usize) -> Option<Vec<Dir>> {
        if cell >= self.boxes.len() || !self.is_open(cell) {
            return (cell == self.player).then(Vec::new);
        }
        let mut came: Vec<Option<(usize, Dir)>> = vec![None; self.boxes.len()];
        let mut seen = vec![false; self.boxes.len()];
        seen[self.player] = true;
        let mut queue = VecDeque::from([self.player]);
        while let Some(c) = queue.pop_front() {
            if c == cell {
                let mut path = Vec::new();
                let mut cur = c;
                while let Some((prev, d)) = came[cur] {
                    path.push(d);
                    cur = prev;
                }
                path.reverse();
                return Some(path);
            }
            for d in Dir::ALL {
                if let Some(n) = self.neighbor(c, d) {
                    if !seen[n] && self.is_open(n) {
                        seen[n] = true;
                        came[n] = Some((c, d));
                        queue.push_back(n);
                    }
                }
            }
        }
        None
    }

    /// Elementary expansion of a macro, or `None` when it is not executable.
    pub fn macro_plan(&self, kind: MacroKind, node: usize) -> Option<Vec<Elementary>> {
        let cell = *self.layout.node_cells.get(node)?;
        match kind {
            MacroKind::MoveTo => Some(self.plan_move_to(cell)?.into_iter().map(Elementary::Move).collect()),
            MacroKind::Push(d) => {
                if !self.boxes[cell] {
                    return None;
                }
                let behind = self.neighbor(cell, d.opposite())?;
                let ahead = self.neighbor(cell, d)?;
                if !self.is_open(ahead) {
                    return None;
                }
                let mut plan: Vec<Elementary> = self.plan_move_to(behind)?.into_iter().map(Elementary::Move).collect();
                plan.push(Elementary::Move(d));
                Some(plan)
            }
        }
    }

    /// Executes a macro; infeasible macros execute a single no-op.
    ///
    /// The outcome is computed directly from the plan's end points rather than
    /// by simulating every elementary step.
    pub fn macro_step(&mut self, kind: MacroKind, node: usize) -> MacroOutcome {
        let Some(plan) = self.macro_plan(kind, node) else {
            let (reward, terminal) = self.elementary_step(Elementary::Noop);
            return MacroOutcome {
                reward,
                terminal,
                executed: vec![Elementary::Noop],
            };
        };
        let mut reward = STEP_REWARD * plan.len() as f64;
        let cell = self.layout.node_cells[node];
        match kind {
            MacroKind::MoveTo => self.player = cell,
            MacroKind::Push(d) => {
                let ahead = self.neighbor(cell, d).expect("checked by the planner");
                self.boxes[cell] = false;
                self.boxes[ahead] = true;
                self.player = cell;
                reward += self.goal_delta(cell, ahead);
            }
        }
        let terminal = self.is_solved();
        if terminal {
            reward += SOLVED_REWARD;
        }
        MacroOutcome {
            reward,
            terminal,
            executed: plan,
        }
    }

    pub fn to_graph(&self) -> StateGraph {
        let nodes = self
            .layout
            .node_cells
            .iter()
            .map(|&c| {
                vec![
                    self.layout.goals[c] as u8 as f32,
                    self.boxes[c] as u8 as f32,
                    (c == self.player) as u8 as f32,
                ]
            })
            .collect();
        let mut edges = Vec::new();
        for (i, &c) in self.layout.node_cells.iter().enumerate() {
            for d in Dir::ALL {
                if let Some(j) = self.neighbor(c, d).and_then(|n| self.layout.cell_nodes[n]) {
                    edges.push(Edge::new(i, j, d.index()));
                }
            }
        }
        StateGraph::build(shape(), nodes, edges, vec![]).expect("Sokoban graphs are well formed")
    }

    /// Parses one level in the Boxoban character format.
    pub fn parse(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text
            .lines()
            .map(|l| l.trim_end_matches('\r'))
            .filter(|l| !l.trim().is_empty())
            .collect();
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.chars().count());
        if height == 0 || width == 0 {
            return Err(parse_err(1, "empty level"));
        }
        let mut walls = Vec::with_capacity(width * height);
        let mut goals = Vec::with_capacity(width * height);
        let mut boxes = Vec::with_capacity(width * height);
        let mut player = None;
        for (r, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(parse_err(r + 1, format!("row has {} cells, expected {width}", row.chars().count())));
            }
            for ch in row.chars() {
                let (w, g, b, p) = match ch {
                    '#' => (true, false, false, false),
                    ' ' => (false, false, false, false),
                    '.' => (false, true, false, false),
                    '$' => (false, false, true, false),
                    '*' => (false, true, true, false),
                    '@' => (false, false, false, true),
                    '+' => (false, true, false, true),
                    other => return Err(parse_err(r + 1, format!("unexpected character `{other}`"))),
                };
                if p {
                    if player.is_some() {
                        return Err(parse_err(r + 1, "more than one player"));
                    }
                    player = Some(walls.len());
                }
                walls.push(w);
                goals.push(g);
                boxes.push(b);
            }
        }
        let player = player.ok_or_else(|| parse_err(height, "no player"))?;
        Self::from_matrices(width, height, walls, goals, boxes, player)
    }

    /// Parses a Boxoban file: levels separated by `;` header lines or blank lines.
    pub fn parse_collection(text: &str) -> Result<Vec<Self>> {
        let mut levels = Vec::new();
        let mut block = String::new();
        let mut flush = |block: &mut String| -> Result<()> {
            if !block.trim().is_empty() {
                levels.push(Self::parse(block)?);
            }
            block.clear();
            Ok(())
        };
        for line in text.lines() {
            if line.starts_with(';') || line.trim().is_empty() {
                flush(&mut block)?;
            } else {
                block.push_str(line);
                block.push('\n');
            }
        }
        flush(&mut block)?;
        Ok(levels)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity((self.layout.width + 1) * self.layout.height);
        for r in 0..self.layout.height {
            for c in 0..self.layout.width {
                let cell = r * self.layout.width + c;
                s.push(match (self.layout.walls[cell], self.layout.goals[cell], self.boxes[cell], cell == self.player) {
                    (true, ..) => '#',
                    (_, true, true, _) => '*',
                    (_, false, true, _) => '$',
                    (_, true, _, true) => '+',
                    (_, false, _, true) => '@',
                    (_, true, ..) => '.',
                    _ => ' ',
                });
            }
            s.push('\n');
        }
        s
    }
}

/// Carves a connected floor region by a random walk inside the border walls.
fn room_topology<R: Rng + ?Sized>(width: usize, height: usize, target: usize, rng: &mut R) -> Vec<bool> {
    let mut walls = vec![true; width * height];
    let interior = |r: isize, c: isize| r >= 1 && c >= 1 && r < height as isize - 1 && c < width as isize - 1;
    let mut r = rng.gen_range(1..height - 1) as isize;
    let mut c = rng.gen_range(1..width - 1) as isize;
    let mut dir = Dir::ALL[rng.gen_range(0..4)];
    let mut carved = 0;
    for _ in 0..width * height * 20 {
        let cell = r as usize * width + c as usize;
        if walls[cell] {
            walls[cell] = false;
            carved += 1;
        }
        // Occasionally widen the corridor sideways.
        if rng.gen_bool(0.3) {
            let side = if matches!(dir, Dir::Left | Dir::Right) { Dir::Up } else { Dir::Left };
            let (dr, dc) = if rng.gen_bool(0.5) { side.delta() } else { side.opposite().delta() };
            if interior(r + dr, c + dc) {
                let cell = (r + dr) as usize * width + (c + dc) as usize;
                if walls[cell] {
                    walls[cell] = false;
                    carved += 1;
                }
            }
        }
        if carved >= target {
            break;
        }
        if rng.gen_bool(0.35) {
            dir = Dir::ALL[rng.gen_range(0..4)];
        }
        let (dr, dc) = dir.delta();
        if interior(r + dr, c + dc) {
            r += dr;
            c += dc;
        } else {
            dir = Dir::ALL[rng.gen_range(0..4)];
        }
    }
    walls
}

/// A solvable level built by pulling boxes away from their goals.
///
/// Boxes start on goals; the player then random-walks for a budget drawn
/// uniformly from `[hw/2, 2hw]` moves. Next to a box it steps directly away
/// half of the time, and a step away from a box usually drags it along.
/// Reversing the walk solves the level.
pub fn generate_level<R: Rng + ?Sized>(width: usize, height: usize, num_boxes: usize, rng: &mut R) -> Result<Sokoban> {
    if width < 3 || height < 3 {
        return Err(EnvError::Invalid("levels need at least a 3 × 3 grid".into()));
    }
    let interior = (width - 2) * (height - 2);
    if num_boxes == 0 || interior < num_boxes + 2 {
        return Err(EnvError::Invalid(format!("{num_boxes} boxes do not fit in {width} × {height}")));
    }
    let target = ((interior as f64 * 0.7) as usize).max(num_boxes * 3 + 2).min(interior);
    let hw = width * height;
    for _ in 0..GENERATION_ATTEMPTS {
        let walls = room_topology(width, height, target, rng);
        let floor: Vec<usize> = (0..hw).filter(|&c| !walls[c]).collect();
        if floor.len() < num_boxes + 2 {
            continue;
        }
        let picks = sample(rng, floor.len(), num_boxes + 1);
        let mut goals = vec![false; hw];
        for i in picks.iter().take(num_boxes) {
            goals[floor[i]] = true;
        }
        let player = floor[picks.index(num_boxes)];
        let mut level = Sokoban::from_matrices(width, height, walls, goals.clone(), goals, player)?;

        let budget = rng.gen_range(hw / 2..=2 * hw);
        let mut pulls = 0;
        let mut moves = 0;
        for _ in 0..budget * 20 {
            if moves == budget {
                break;
            }
            let pulls_open: Vec<Dir> = Dir::ALL
                .into_iter()
                .filter(|&d| {
                    level.neighbor(level.player, d).is_some_and(|t| level.is_open(t))
                        && level.neighbor(level.player, d.opposite()).is_some_and(|b| level.boxes[b])
                })
                .collect();
            let d = if !pulls_open.is_empty() && rng.gen_bool(0.5) {
                pulls_open[rng.gen_range(0..pulls_open.len())]
            } else {
                Dir::ALL[rng.gen_range(0..4)]
            };
            let Some(t) = level.neighbor(level.player, d).filter(|&t| level.is_open(t)) else {
                continue;
            };
            let behind = level.neighbor(level.player, d.opposite());
            let pull = rng.gen_bool(PULL_PROBABILITY);
            if let Some(b) = behind.filter(|&b| pull && level.boxes[b]) {
                level.boxes[b] = false;
                level.boxes[level.player] = true;
                pulls += 1;
            }
            level.player = t;
            moves += 1;
        }
        if pulls >= MIN_PULLS && !level.is_solved() {
            return Ok(level);
        }
    }
    Err(EnvError::Generation(GENERATION_ATTEMPTS))
}

impl Preconditions for Sokoban {
    fn num_nodes(&self) -> usize {
        self.layout.node_cells.len()
    }
}

impl Environment for Sokoban {
    fn graph(&self) -> StateGraph {
        self.to_graph()
    }

    fn step<R: Rng + ?Sized>(&mut self, action: &ActionChoice, _rng: &mut R) -> relrl_core::Result<StepResult> {
        let kind = MacroKind::from_schema(action.action_id)
            .ok_or_else(|| EnvError::IllegalAction(format!("unknown macro {}", action.action_id)))?;
        let &[node] = &action.params[..] else {
            return Err(EnvError::IllegalAction("macros take exactly one node".into()).into());
        };
        if node >= self.num_nodes() {
            return Err(EnvError::IllegalAction(format!("node {node} out of range")).into());
        }
        let out = self.macro_step(kind, node);
        Ok(StepResult {
            reward: out.reward,
            terminal: out.terminal,
        })
    }
}

#[derive(Clone, Debug)]
pub enum SokobanDomain {
    Generated { width: usize, height: usize, boxes: usize },
    /// Uniform draws from a fixed set of levels.
    Levels(Arc<Vec<Sokoban>>),
}

impl Domain for SokobanDomain {
    type Env = Sokoban;

    fn shape(&self) -> GraphShape {
        shape()
    }

    fn schemas(&self) -> Vec<ActionSchema> {
        schemas()
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Sokoban {
        match self {
            SokobanDomain::Generated { width, height, boxes } => {
                generate_level(*width, *height, *boxes, rng).expect("level generation within the retry budget")
            }
            SokobanDomain::Levels(levels) => levels[rng.gen_range(0..levels.len())].clone(),
        }
    }
}
