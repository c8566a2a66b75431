//! One-step synchronous advantage actor-critic.
//!
//! For a batch of transitions with targets `q` and advantages `A = q − V(s)`
//! (held constant), the parameters move along
//! `∇(−J + α_v·L_V − α_h·L_H)` where `∇J = mean A·∇log π(a|s)`,
//! `L_V = mean (q − V(s))²` and the entropy gradient is estimated from the
//! sampled action alone as `−log π(a|s)·∇log π(a|s)`, optionally divided by
//! `log |A(s)|`.

mod env;
mod eval;
mod trainer;

pub use env::{Domain, Environment, StepResult};
pub use eval::{evaluate, EpisodeResult};
pub use trainer::{EpochMetrics, Trainer, METRICS_HEADER};

use crate::error::{Error, Result};
use crate::gnn::encode;
use crate::graph::{BatchedGraph, StateGraph};
use crate::numerics::{Gradients, Matrix, ParamSource, ParameterStore, Real, Tape, TargetStore};
use crate::policy::{replay, value, ActionChoice, PolicyModel};

#[derive(Clone, Debug, PartialEq)]
pub struct Hyperparams {
    pub p_envs: usize,
    pub rho: f64,
    pub gamma: f64,
    pub epoch: usize,
    pub step_limit: usize,
    pub mp_steps: usize,
    pub emb_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub grad_max_norm: f64,
    pub q_range: (f64, f64),
    pub alpha_v: f64,
    pub alpha_h_start: f64,
    pub alpha_h_end: f64,
    pub weight_decay: f64,
    /// Divide each state's entropy term by `log |A(s)|`.
    pub entropy_normalization: bool,
}

/// SysAdmin sizes with a tuned initial entropy coefficient.
const SYSADMIN_SIZES: [usize; 6] = [5, 10, 20, 40, 80, 160];
const SYSADMIN_ALPHA_S: [f64; 6] = [0.3, 0.3, 1.0, 1.0, 2.0, 2.0];
const SYSADMIN_ALPHA_M: [f64; 6] = [0.3, 0.3, 3.0, 10.0, 20.0, 24.0];

impl Hyperparams {
    pub fn blockworld() -> Self {
        Self {
            p_envs: 256,
            rho: 0.005,
            gamma: 0.99,
            epoch: 1000,
            step_limit: 100,
            mp_steps: 3,
            emb_size: 32,
            lr_start: 3e-4,
            lr_end: 1e-5,
            grad_max_norm: 3.0,
            q_range: (-15.0, 15.0),
            alpha_v: 0.1,
            alpha_h_start: 1e-4,
            alpha_h_end: 5e-5,
            weight_decay: 1e-4,
            entropy_normalization: true,
        }
    }

    pub fn sokoban() -> Self {
        Self {
            step_limit: 200,
            mp_steps: 10,
            emb_size: 64,
            lr_start: 3e-3,
            lr_end: 1e-4,
            grad_max_norm: 5.0,
            alpha_h_start: 0.2,
            alpha_h_end: 0.1,
            ..Self::blockworld()
        }
    }

    /// `multi` selects the set-action variant. Sizes between the tuned ones use the nearest tuned size.
    pub fn sysadmin(n: usize, multi: bool) -> Self {
        let nearest = (0..SYSADMIN_SIZES.len())
            .min_by_key(|&i| SYSADMIN_SIZES[i].abs_diff(n))
            .expect("nonempty table");
        let alpha = if multi { SYSADMIN_ALPHA_M } else { SYSADMIN_ALPHA_S }[nearest];
        Self {
            epoch: 100,
            step_limit: 100,
            mp_steps: 5,
            emb_size: 32,
            lr_start: 3e-3,
            lr_end: 1e-4,
            grad_max_norm: 3.0,
            q_range: (-100.0, 200.0 * n as f64),
            alpha_h_start: alpha,
            alpha_h_end: alpha / 2.0,
            ..Self::blockworld()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if self.q_range.0 >= self.q_range.1 {
            return bad("q_range must have low < high");
        }
        if self.lr_end > self.lr_start {
            return bad("LR_end must not exceed LR_start");
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad("rho must lie in [0, 1]");
        }
        if self.p_envs == 0 || self.epoch == 0 || self.step_limit == 0 || self.emb_size == 0 {
            return bad("p_envs, epoch, step_limit and emb_size must be positive");
        }
        Ok(())
    }

    /// Halves every `20·epoch` steps, floored at `lr_end`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let halvings = step / (20 * self.epoch as u64);
        (self.lr_start * 0.5f64.powi(halvings.min(1024) as i32)).max(self.lr_end)
    }

    /// `α_h_start / t` with `t = 1 + ⌊step/epoch⌋`, floored at `alpha_h_end`.
    pub fn alpha_h_at(&self, step: u64) -> f64 {
        let t = 1 + step / self.epoch as u64;
        (self.alpha_h_start / t as f64).max(self.alpha_h_end)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    None,
    /// The environment itself ended the episode.
    Terminal,
    /// The step limit ended the episode; the final state is still bootstrapped.
    Truncated,
}

#[derive(Clone, Debug)]
pub struct Transition {
    pub state: StateGraph,
    pub action: ActionChoice,
    pub reward: f64,
    pub next_state: StateGraph,
    pub termination: Termination,
}

/// Bootstrapped one-step target, clipped into `q_range`.
pub fn q_target(reward: f64, termination: Termination, next_value: f64, gamma: f64, q_range: (f64, f64)) -> f64 {
    let q = match termination {
        Termination::Terminal => reward,
        Termination::None | Termination::Truncated => reward + gamma * next_value,
    };
    q.clamp(q_range.0, q_range.1)
}

/// Action value `r + γ·V_θ(s′)` under the current parameters, used for the advantage.
///
/// Unlike [`q_target`] it is not clipped and bootstraps from the online value head, so an
/// action that leaves the state unchanged always has advantage `r − (1−γ)·V_θ(s)`.
pub fn q_value(reward: f64, termination: Termination, next_value: f64, gamma: f64) -> f64 {
    match termination {
        Termination::Terminal => reward,
        Termination::None | Termination::Truncated => reward + gamma * next_value,
    }
}

/// First factor of the sampled entropy gradient, `log π(a|s) / H_max(s)`.
///
/// `None` when the state has a single action and contributes no entropy term.
pub fn entropy_factor(log_prob: f64, log_action_space: f64, normalize: bool) -> Option<f64> {
    if log_action_space <= 0.0 {
        return None;
    }
    Some(if normalize { log_prob / log_action_space } else { log_prob })
}

/// `V(s)` for every graph, evaluated outside any training tape.
pub fn state_values<T: Real, P: ParamSource<T> + ?Sized>(
    params: &P,
    model: &PolicyModel,
    graphs: Vec<StateGraph>,
) -> Result<Vec<f64>> {
    let batch = BatchedGraph::union(graphs)?;
    let mut tape = Tape::<T>::new();
    let enc = encode(&mut tape, params, &model.gnn, &batch)?;
    let v = value(&mut tape, params, enc)?;
    Ok(tape.value(v).data.iter().map(|x| x.to_f64_lossy()).collect())
}

/// Gradients of the three loss components for a frozen batch.
#[derive(Clone, Debug)]
pub struct A2cLosses<T> {
    /// `∇(−J)`.
    pub policy_grad: Gradients<T>,
    /// `∇L_V`.
    pub value_grad: Gradients<T>,
    /// Sampled estimate of `∇L_H`.
    pub entropy_grad: Gradients<T>,
    pub policy_loss: f64,
    pub value_loss: f64,
    /// Mean of `−log π(a|s)/H_max(s)` over states with more than one action.
    pub entropy: f64,
    pub q: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl<T: Real> A2cLosses<T> {
    /// The update direction `∇(−J) + α_v·∇L_V − α_h·∇L_H`.
    pub fn combined(&self, alpha_v: f64, alpha_h: f64) -> Gradients<T> {
        let mut out = Gradients::default();
        for (grads, scale) in [(&self.policy_grad, 1.0), (&self.value_grad, alpha_v), (&self.entropy_grad, -alpha_h)] {
            for (name, g) in grads.iter() {
                let scaled: Vec<T> = g.iter().map(|v| T::from_f64_lossy(v.to_f64_lossy() * scale)).collect();
                out.insert_or_add(name, &scaled);
            }
        }
        out
    }
}

/// Replays a batch of transitions and returns the separate loss gradients.
pub fn a2c_losses<T: Real>(
    batch: &[Transition],
    model: &PolicyModel,
    params: &ParameterStore<T>,
    target: &TargetStore<T>,
    hp: &Hyperparams,
) -> Result<A2cLosses<T>> {
    if batch.is_empty() {
        return Err(Error::Validation("empty transition batch".into()));
    }
    let b = batch.len();
    let next_states: Vec<StateGraph> = batch.iter().map(|t| t.next_state.clone()).collect();
    let next = state_values::<T, _>(target, model, next_states.clone())?;
    let next_online = state_values::<T, _>(params, model, next_states)?;
    let q: Vec<f64> = batch
        .iter()
        .zip(&next)
        .map(|(t, v)| q_target(t.reward, t.termination, *v, hp.gamma, hp.q_range))
        .collect();

    let graphs = BatchedGraph::union(batch.iter().map(|t| t.state.clone()).collect())?;
    let actions: Vec<ActionChoice> = batch.iter().map(|t| t.action.clone()).collect();
    let mut tape = Tape::<T>::new();
    let enc = encode(&mut tape, params, &model.gnn, &graphs)?;
    let v = value(&mut tape, params, enc)?;
    let decoded = replay(&mut tape, params, model, &graphs, enc, &actions)?;
    let values: Vec<f64> = tape.value(v).data.iter().map(|x| x.to_f64_lossy()).collect();
    let log_probs: Vec<f64> = decoded.choices.iter().map(|c| c.log_prob).collect();
    let advantages: Vec<f64> = batch
        .iter()
        .zip(&next_online)
        .zip(&values)
        .map(|((t, next), v)| q_value(t.reward, t.termination, *next, hp.gamma) - v)
        .collect();

    let scale = 1.0 / b as f64;
    let policy_coeffs: Vec<T> = advantages.iter().map(|a| T::from_f64_lossy(-a * scale)).collect();
    let mut entropy = 0.0;
    let mut entropy_states = 0;
    let entropy_coeffs: Vec<T> = decoded
        .choices
        .iter()
        .map(|c| match entropy_factor(c.log_prob, c.log_action_space, hp.entropy_normalization) {
            Some(f) => {
                entropy -= f;
                entropy_states += 1;
                T::from_f64_lossy(-f * scale)
            }
            None => T::zero(),
        })
        .collect();
    let value_seed = Matrix::column(
        values
            .iter()
            .zip(&q)
            .map(|(v, q)| T::from_f64_lossy(2.0 * (v - q) * scale))
            .collect(),
    );

    let policy_grad = tape.backward(&decoded.seeds(&policy_coeffs))?;
    let entropy_grad = tape.backward(&decoded.seeds(&entropy_coeffs))?;
    let value_grad = tape.backward(&[(v, value_seed)])?;
    Ok(A2cLosses {
        policy_grad,
        value_grad,
        entropy_grad,
        policy_loss: -advantages.iter().zip(&log_probs).map(|(a, l)| a * l).sum::<f64>() * scale,
        value_loss: q.iter().zip(&values).map(|(q, v)| (q - v) * (q - v)).sum::<f64>() * scale,
        entropy: if entropy_states > 0 { entropy / entropy_states as f64 } else { 0.0 },
        q,
        advantages,
    })
}
