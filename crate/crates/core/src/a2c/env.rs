use rand::Rng;

use crate::error::Result;
use crate::graph::{GraphShape, StateGraph};
use crate::policy::{ActionChoice, ActionSchema, Preconditions};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepResult {
    pub reward: f64,
    /// The environment reached a terminal state (a solved puzzle, for instance).
    pub terminal: bool,
}

/// One simulated problem instance. Its preconditions describe the current state.
pub trait Environment: Preconditions {
    fn graph(&self) -> StateGraph;

    fn step<R: Rng + ?Sized>(&mut self, action: &ActionChoice, rng: &mut R) -> Result<StepResult>;
}

/// A family of instances sharing one graph encoding and action vocabulary.
pub trait Domain {
    type Env: Environment;

    fn shape(&self) -> GraphShape;

    fn schemas(&self) -> Vec<ActionSchema>;

    /// A fresh instance for training.
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Self::Env;
}
