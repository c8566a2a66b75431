//! Blocks stacked on each other or on the ground, rearranged one `move(x, y)` at a time.
//!
//! Node `i < N` is block `i`; node `N` is the ground. A configuration stores
//! the support of every block, with `N` meaning the ground.

use std::collections::{HashSet, VecDeque};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use relrl_core::a2c::{Domain, Environment, StepResult};
use relrl_core::graph::{Edge, GraphShape, StateGraph};
use relrl_core::policy::{ActionChoice, ActionKind, ActionSchema, Preconditions};

use crate::error::{parse_err, EnvError, Result};

pub const STEP_REWARD: f64 = -0.1;
pub const GOAL_REWARD: f64 = 10.0;
/// Largest instance the exact oracle accepts.
pub const ORACLE_MAX_BLOCKS: usize = 8;

pub const EDGE_ABOVE: usize = 0;
pub const EDGE_BELOW: usize = 1;
pub const EDGE_GOAL_ABOVE: usize = 2;
pub const EDGE_GOAL_BELOW: usize = 3;

pub fn shape() -> GraphShape {
    GraphShape {
        node_width: 1,
        edge_width: 0,
        edge_types: 4,
        global_width: 0,
    }
}

pub fn schemas() -> Vec<ActionSchema> {
    vec![ActionSchema::new(0, "move", ActionKind::Parametric { arity: 2 })]
}

/// Checks the forest invariant: supports in range, no self-support, one block per block, no cycles.
pub fn validate_configuration(on: &[usize]) -> Result<()> {
    let n = on.len();
    let mut carried = vec![false; n];
    for (x, &s) in on.iter().enumerate() {
        if s > n {
            return Err(EnvError::Invalid(format!("block {x} rests on unknown node {s}")));
        }
        if s == x {
            return Err(EnvError::Invalid(format!("block {x} rests on itself")));
        }
        if s < n {
            if carried[s] {
                return Err(EnvError::Invalid(format!("two blocks rest on block {s}")));
            }
            carried[s] = true;
        }
    }
    for start in 0..n {
        let mut cur = start;
        for _ in 0..=n {
            if on[cur] == n {
                break;
            }
            cur = on[cur];
            if cur == start {
                return Err(EnvError::Invalid(format!("cycle through block {start}")));
            }
        }
    }
    Ok(())
}

/// Stacks random subsets of the remaining blocks in random order until none remain.
pub fn random_configuration<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut on = vec![n; n];
    while !remaining.is_empty() {
        let size = rng.gen_range(1..=remaining.len());
        remaining.shuffle(rng);
        let stack: Vec<usize> = remaining.drain(..size).collect();
        for w in stack.windows(2) {
            on[w[1]] = w[0];
        }
        on[stack[0]] = n;
    }
    on
}

/// `Σ_{i≥1} C(N,i)·(N−1)!/(i−1)!`, the number of configurations of `N` labelled blocks.
///
/// This counts forests of `i` ordered stacks. The `i = 0` term has no stacks and is taken as zero.
pub fn count_configurations(n: usize) -> u128 {
    if n == 0 {
        return 1;
    }
    let mut fact = vec![1u128; n + 1];
    for i in 1..=n {
        fact[i] = fact[i - 1] * i as u128;
    }
    (1..=n)
        .map(|i| fact[n] / (fact[i] * fact[n - i]) * fact[n - 1] / fact[i - 1])
        .sum()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BlockWorld {
    on: Vec<usize>,
    goal: Vec<usize>,
}

impl BlockWorld {
    pub fn new(on: Vec<usize>, goal: Vec<usize>) -> Result<Self> {
        if on.len() != goal.len() || on.is_empty() {
            return Err(EnvError::Invalid("start and goal need the same positive block count".into()));
        }
        validate_configuration(&on)?;
        validate_configuration(&goal)?;
        Ok(Self { on, goal })
    }

    pub fn generate<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        assert!(n >= 1, "BlockWorld needs at least one block");
        let on = random_configuration(n, rng);
        let goal = random_configuration(n, rng);
        Self { on, goal }
    }

    pub fn num_blocks(&self) -> usize {
        self.on.len()
    }

    pub fn ground(&self) -> usize {
        self.on.len()
    }

    pub fn on(&self) -> &[usize] {
        &self.on
    }

    pub fn goal(&self) -> &[usize] {
        &self.goal
    }

    pub fn is_solved(&self) -> bool {
        self.on == self.goal
    }

    /// No block rests on `node`. The ground is never free in this sense but always accepts blocks.
    pub fn is_free(&self, node: usize) -> bool {
        node < self.ground() && !self.on.contains(&node)
    }

    fn free_mask(&self) -> Vec<bool> {
        let n = self.ground();
        let mut free = vec![true; n + 1];
        free[n] = false;
        for &s in &self.on {
            if s < n {
                free[s] = false;
            }
        }
        free
    }

    pub fn is_legal(&self, x: usize, y: usize) -> bool {
        x != y && x < self.ground() && y <= self.ground() && self.is_free(x) && (y == self.ground() || self.is_free(y))
    }

    /// Applies `move(x, y)` and returns the reward and whether the goal was reached.
    pub fn apply_move(&mut self, x: usize, y: usize) -> Result<(f64, bool)> {
        if !self.is_legal(x, y) {
            return Err(EnvError::IllegalAction(format!("move({x}, {y})")));
        }
        self.on[x] = y;
        if self.is_solved() {
            Ok((STEP_REWARD + GOAL_REWARD, true))
        } else {
            Ok((STEP_REWARD, false))
        }
    }

    pub fn to_graph(&self) -> StateGraph {
        let n = self.ground();
        let nodes = (0..=n).map(|i| vec![(i == n) as u8 as f32]).collect();
        let mut edges = Vec::with_capacity(4 * n);
        for (rel, above, below) in [(&self.on, EDGE_ABOVE, EDGE_BELOW), (&self.goal, EDGE_GOAL_ABOVE, EDGE_GOAL_BELOW)] {
            for (x, &s) in rel.iter().enumerate() {
                edges.push(Edge::new(x, s, above));
                edges.push(Edge::new(s, x, below));
            }
        }
        StateGraph::build(shape(), nodes, edges, vec![]).expect("BlockWorld graphs are well formed")
    }

    /// Shortest number of moves to the goal, by breadth-first search.
    pub fn optimal_steps(&self) -> Result<usize> {
        let n = self.num_blocks();
        if n > ORACLE_MAX_BLOCKS {
            return Err(EnvError::Unsupported(format!(
                "optimal_steps is limited to {ORACLE_MAX_BLOCKS} blocks, got {n}"
            )));
        }
        let key = |on: &[usize]| on.iter().fold(0u64, |k, &s| (k << 4) | s as u64);
        let goal = key(&self.goal);
        let start = key(&self.on);
        if start == goal {
            return Ok(0);
        }
        let mut seen = HashSet::from([start]);
        let mut queue = VecDeque::from([(self.on.clone(), 0usize)]);
        while let Some((on, dist)) = queue.pop_front() {
            let state = BlockWorld {
                on,
                goal: self.goal.clone(),
            };
            for x in 0..n {
                if !state.is_free(x) {
                    continue;
                }
                for y in 0..=n {
                    if !state.is_legal(x, y) || state.on[x] == y {
                        continue;
                    }
                    let mut next = state.on.clone();
                    next[x] = y;
                    let k = key(&next);
                    if k == goal {
                        return Ok(dist + 1);
                    }
                    if seen.insert(k) {
                        queue.push_back((next, dist + 1));
                    }
                }
            }
        }
        Err(EnvError::Invalid("goal unreachable".into()))
    }

    /// `N`, then the start and goal as `block:support` pairs with `G` for the ground.
    pub fn to_text(&self) -> String {
        let mut s = format!("{}\n", self.num_blocks());
        for rel in [&self.on, &self.goal] {
            let pairs: Vec<String> = rel
                .iter()
                .enumerate()
                .map(|(x, &y)| {
                    if y == self.ground() {
                        format!("{x}:G")
                    } else {
                        format!("{x}:{y}")
                    }
                })
                .collect();
            writeln!(s, "{}", pairs.join(" ")).expect("writing to a String");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (i, first) = lines.next().ok_or_else(|| parse_err(1, "empty input"))?;
        let n: usize = first.trim().parse().map_err(|_| parse_err(i + 1, "expected block count"))?;
        let mut rels = Vec::new();
        for _ in 0..2 {
            let (i, line) = lines.next().ok_or_else(|| parse_err(i + 2, "missing relation line"))?;
            let mut on = vec![usize::MAX; n];
            for tok in line.split_whitespace() {
                let (x, y) = tok.split_once(':').ok_or_else(|| parse_err(i + 1, format!("bad pair `{tok}`")))?;
                let x: usize = x.parse().map_err(|_| parse_err(i + 1, format!("bad block `{x}`")))?;
                let y = if y == "G" {
                    n
                } else {
                    y.parse().map_err(|_| parse_err(i + 1, format!("bad support `{y}`")))?
                };
                if x >= n || on[x] != usize::MAX {
                    return Err(parse_err(i + 1, format!("block {x} out of range or repeated")));
                }
                on[x] = y;
            }
            if on.contains(&usize::MAX) {
                return Err(parse_err(i + 1, "every block needs a support"));
            }
            rels.push(on);
        }
        let goal = rels.pop().expect("two lines");
        let on = rels.pop().expect("two lines");
        Self::new(on, goal)
    }
}

impl Preconditions for BlockWorld {
    fn num_nodes(&self) -> usize {
        self.ground() + 1
    }

    fn parameter_mask(&self, _schema: &ActionSchema, partial: &[usize]) -> Vec<bool> {
        let mut mask = self.free_mask();
        if let [x] = partial {
            mask[self.ground()] = true;
            mask[*x] = false;
        }
        mask
    }
}

impl Environment for BlockWorld {
    fn graph(&self) -> StateGraph {
        self.to_graph()
    }

    fn step<R: Rng + ?Sized>(&mut self, action: &ActionChoice, _rng: &mut R) -> relrl_core::Result<StepResult> {
        let [x, y] = action.params[..] else {
            return Err(EnvError::IllegalAction(format!("move takes 2 parameters, got {:?}", action.params)).into());
        };
        let (reward, terminal) = self.apply_move(x, y)?;
        Ok(StepResult { reward, terminal })
    }
}

/// Random instances with `n` blocks. Training skips instances that start solved.
#[derive(Clone, Copy, Debug)]
pub struct BlockWorldDomain {
    pub n: usize,
}

impl Domain for BlockWorldDomain {
    type Env = BlockWorld;

    fn shape(&self) -> GraphShape {
        shape()
    }

    fn schemas(&self) -> Vec<ActionSchema> {
        schemas()
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> BlockWorld {
        loop {
            let bw = BlockWorld::generate(self.n, rng);
            if !bw.is_solved() || self.n == 1 {
                return bw;
            }
        }
    }
}
