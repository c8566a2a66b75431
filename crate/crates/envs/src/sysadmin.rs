//! SysAdmin: a network of computers that fail when the machines they depend on are down.

use rand::seq::index::sample;
use rand::Rng;
use relrl_core::a2c::{Domain, Environment, StepResult};
use relrl_core::graph::{Edge, GraphShape, StateGraph};
use relrl_core::policy::{ActionChoice, ActionKind, ActionSchema, Preconditions};

use crate::error::{parse_err, EnvError, Result};

pub const STAY_ON: f64 = 0.9;
pub const REBOOT: f64 = 0.04;
pub const RESET_COST: f64 = 0.75;

/// Single resets (`noop` + `reset(c)`) or one set action resetting any subset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Single,
    Multi,
}

pub fn shape() -> GraphShape {
    GraphShape {
        node_width: 1,
        edge_width: 0,
        edge_types: 1,
        global_width: 0,
    }
}

pub fn schemas(mode: Mode) -> Vec<ActionSchema> {
    match mode {
        Mode::Single => vec![
            ActionSchema::new(0, "noop", ActionKind::Elementary),
            ActionSchema::new(1, "reset", ActionKind::Parametric { arity: 1 }),
        ],
        Mode::Multi => vec![ActionSchema::new(0, "reset", ActionKind::Set)],
    }
}

/// Probability that a running computer stays on, given `d` dependencies of which `m` are on.
pub fn stay_on_probability(d: usize, m: usize) -> f64 {
    STAY_ON * (1 + m) as f64 / (1 + d) as f64
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SysAdmin {
    mode: Mode,
    /// `(a, b)`: b depends on a.
    deps: Vec<(usize, usize)>,
    depends_on: Vec<Vec<usize>>,
    on: Vec<bool>,
}

impl SysAdmin {
    pub fn new(n: usize, deps: Vec<(usize, usize)>, mode: Mode) -> Result<Self> {
        if n == 0 {
            return Err(EnvError::Invalid("a network needs at least one computer".into()));
        }
        let mut depends_on = vec![Vec::new(); n];
        for &(a, b) in &deps {
            if a >= n || b >= n {
                return Err(EnvError::Invalid(format!("dependency ({a}, {b}) out of range for {n} computers")));
            }
            if a == b {
                return Err(EnvError::Invalid(format!("computer {a} depends on itself")));
            }
            depends_on[b].push(a);
        }
        Ok(Self {
            mode,
            deps,
            depends_on,
            on: vec![true; n],
        })
    }

    /// Each computer gets 1 to 3 distinct other computers depending on it. All start on.
    pub fn generate<R: Rng + ?Sized>(n: usize, mode: Mode, rng: &mut R) -> Result<Self> {
        if n < 4 {
            return Err(EnvError::Invalid(format!("generation needs at least 4 computers, got {n}")));
        }
        let mut deps = Vec::new();
        for c in 0..n {
            let k = rng.gen_range(1..=3);
            for i in sample(rng, n - 1, k).iter() {
                let other = if i >= c { i + 1 } else { i };
                deps.push((c, other));
            }
        }
        Self::new(n, deps, mode)
    }

    pub fn num_computers(&self) -> usize {
        self.on.len()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn dependencies(&self) -> &[(usize, usize)] {
        &self.deps
    }

    /// Computers that `c` depends on.
    pub fn depends_on(&self, c: usize) -> &[usize] {
        &self.depends_on[c]
    }

    pub fn on(&self) -> &[bool] {
        &self.on
    }

    pub fn set_on(&mut self, on: Vec<bool>) -> Result<()> {
        if on.len() != self.on.len() {
            return Err(EnvError::Invalid(format!("{} states for {} computers", on.len(), self.on.len())));
        }
        self.on = on;
        Ok(())
    }

    pub fn offline(&self) -> Vec<usize> {
        (0..self.on.len()).filter(|&c| !self.on[c]).collect()
    }

    pub fn reward(&self, resets: &[usize]) -> f64 {
        self.on.iter().filter(|o| **o).count() as f64 - RESET_COST * resets.len() as f64
    }

    /// Rewards the current state, then advances it. Every computer consumes exactly one uniform draw.
    pub fn transition<R: Rng + ?Sized>(&mut self, resets: &[usize], rng: &mut R) -> Result<f64> {
        if self.mode == Mode::Single && resets.len() > 1 {
            return Err(EnvError::IllegalAction(format!("single mode resets at most one computer, got {}", resets.len())));
        }
        let n = self.on.len();
        let mut forced = vec![false; n];
        for &c in resets {
            if c >= n {
                return Err(EnvError::IllegalAction(format!("computer {c} out of range")));
            }
            if std::mem::replace(&mut forced[c], true) {
                return Err(EnvError::IllegalAction(format!("computer {c} reset twice")));
            }
        }
        let reward = self.reward(resets);
        let next = (0..n)
            .map(|c| {
                let u: f64 = rng.gen();
                let p = if self.on[c] {
                    let deps = &self.depends_on[c];
                    stay_on_probability(deps.len(), deps.iter().filter(|&&d| self.on[d]).count())
                } else {
                    REBOOT
                };
                forced[c] || u < p
            })
            .collect();
        self.on = next;
        Ok(reward)
    }

    /// Reset set chosen by the normalization baseline: a random offline computer (or none) in
    /// single mode, every offline computer in multi mode.
    pub fn baseline_resets<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let offline = self.offline();
        match self.mode {
            Mode::Multi => offline,
            Mode::Single if offline.is_empty() => vec![],
            Mode::Single => vec![offline[rng.gen_range(0..offline.len())]],
        }
    }

    /// The baseline's decision as a grounded action of this mode.
    pub fn baseline_action<R: Rng + ?Sized>(&self, rng: &mut R) -> ActionChoice {
        let resets = self.baseline_resets(rng);
        let schemas = schemas(self.mode);
        let grounded = match (self.mode, resets.as_slice()) {
            (Mode::Multi, _) => ActionChoice::grounded(self, &schemas, 0, vec![], resets),
            (Mode::Single, []) => ActionChoice::grounded(self, &schemas, 0, vec![], vec![]),
            (Mode::Single, _) => ActionChoice::grounded(self, &schemas, 1, resets, vec![]),
        };
        grounded.expect("baseline actions are always admissible")
    }

    fn resets_of(&self, action: &ActionChoice) -> Result<Vec<usize>> {
        match (self.mode, action.action_id) {
            (Mode::Single, 0) => Ok(vec![]),
            (Mode::Single, 1) => match action.params[..] {
                [c] => Ok(vec![c]),
                _ => Err(EnvError::IllegalAction("reset takes one computer".into())),
            },
            (Mode::Multi, 0) => Ok(action.subset.clone()),
            (_, id) => Err(EnvError::IllegalAction(format!("unknown action {id}"))),
        }
    }

    pub fn to_graph(&self) -> StateGraph {
        let nodes = self.on.iter().map(|&o| vec![o as u8 as f32]).collect();
        let edges = self.deps.iter().map(|&(a, b)| Edge::new(a, b, 0)).collect();
        StateGraph::build(shape(), nodes, edges, vec![]).expect("SysAdmin graphs are well formed")
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{}\n", self.on.len());
        for (a, b) in &self.deps {
            s.push_str(&format!("{a} {b}\n"));
        }
        s
    }

    pub fn from_text(text: &str, mode: Mode) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (line, first) = lines.next().ok_or_else(|| parse_err(1, "empty instance"))?;
        let n: usize = first.parse().map_err(|_| parse_err(line, format!("expected a computer count, got `{first}`")))?;
        let mut deps = Vec::new();
        for (line, l) in lines {
            let fields: Vec<&str> = l.split_whitespace().collect();
            let [a, b] = fields[..] else {
                return Err(parse_err(line, "expected `i j`"));
            };
            let parse = |f: &str| f.parse::<usize>().map_err(|_| parse_err(line, format!("bad index `{f}`")));
            deps.push((parse(a)?, parse(b)?));
        }
        Self::new(n, deps, mode)
    }
}

impl Preconditions for SysAdmin {
    fn num_nodes(&self) -> usize {
        self.on.len()
    }
}

impl Environment for SysAdmin {
    fn graph(&self) -> StateGraph {
        self.to_graph()
    }

    fn step<R: Rng + ?Sized>(&mut self, action: &ActionChoice, rng: &mut R) -> relrl_core::Result<StepResult> {
        let resets = self.resets_of(action)?;
        let reward = self.transition(&resets, rng)?;
        Ok(StepResult { reward, terminal: false })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SysAdminDomain {
    pub n: usize,
    pub mode: Mode,
}

impl Domain for SysAdminDomain {
    type Env = SysAdmin;

    fn shape(&self) -> GraphShape {
        shape()
    }

    fn schemas(&self) -> Vec<ActionSchema> {
        schemas(self.mode)
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SysAdmin {
        SysAdmin::generate(self.n, self.mode, rng).expect("domain size validated on construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reward_substitution() {
        let s = SysAdmin::new(10, vec![], Mode::Multi).unwrap();
        assert_eq!(s.reward(&[3, 7]), 8.5);
    }

    #[test]
    fn resets_force_on() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = SysAdmin::new(4, vec![(0, 1), (1, 2)], Mode::Multi).unwrap();
        for _ in 0..200 {
            s.set_on(vec![false; 4]).unwrap();
            s.transition(&[0, 2], &mut rng).unwrap();
            assert!(s.on()[0] && s.on()[2]);
        }
    }

    #[test]
    fn single_mode_rejects_multiple_resets() {
        let mut s = SysAdmin::new(4, vec![], Mode::Single).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(s.transition(&[0, 1], &mut rng).is_err());
    }

    #[test]
    fn chain_graph() {
        let s = SysAdmin::new(3, vec![(0, 1), (1, 2)], Mode::Single).unwrap();
        let g = s.to_graph();
        assert_eq!(g.node_count(), 3);
        assert!((0..3).all(|i| g.node_feature(i) == [1.0]));
        assert_eq!(g.edges().len(), 2);
        assert_eq!((g.edges()[0].src, g.edges()[0].dst), (0, 1));
        assert_eq!(s.depends_on(1), &[0]);
    }

    #[test]
    fn text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = SysAdmin::generate(12, Mode::Multi, &mut rng).unwrap();
        assert_eq!(SysAdmin::from_text(&s.to_text(), Mode::Multi).unwrap(), s);
        assert!(SysAdmin::from_text("3\n0 0\n", Mode::Multi).is_err());
        assert!(SysAdmin::from_text("3\n0 1 2\n", Mode::Multi).is_err());
    }

    #[test]
    fn baselines() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = SysAdmin::new(6, vec![], Mode::Multi).unwrap();
        let mut on = vec![true; 6];
        on[2] = false;
        on[5] = false;
        s.set_on(on.clone()).unwrap();
        assert_eq!(s.baseline_resets(&mut rng), vec![2, 5]);
        assert_eq!(s.baseline_action(&mut rng).subset, vec![2, 5]);

        let mut single = SysAdmin::new(6, vec![], Mode::Single).unwrap();
        let noop = single.baseline_action(&mut rng);
        assert_eq!((noop.action_id, noop.params.len()), (0, 0));
        on[2] = true;
        single.set_on(on).unwrap();
        for _ in 0..20 {
            assert_eq!(single.baseline_resets(&mut rng), vec![5]);
        }
    }
}
