use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{entropy_factor, q_target, q_value, state_values, Domain, Environment, Hyperparams, Termination};
use crate::error::Result;
use crate::gnn::{encode, GnnConfig};
use crate::graph::{BatchedGraph, StateGraph};
use crate::numerics::{clip_grad_norm, save_checkpoint, AdamW, Manifest, Matrix, ParameterStore, Tape, TargetStore};
use crate::policy::{decode, value, DecodeMode, PolicyModel, Preconditions};

pub const METRICS_HEADER: &str = "epoch,step,episodes,mean_return,solved_fraction,mean_length,\
policy_loss,value_loss,entropy,grad_norm,lr,alpha_h";

/// Aggregates over one epoch of training steps.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub step: u64,
    pub episodes: usize,
    pub mean_return: f64,
    pub solved_fraction: f64,
    pub mean_length: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub alpha_h: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.episodes,
            self.mean_return,
            self.solved_fraction,
            self.mean_length,
            self.policy_loss,
            self.value_loss,
            self.entropy,
            self.grad_norm,
            self.lr,
            self.alpha_h
        )
        .expect("writing to a String");
        s
    }
}

#[derive(Default)]
struct Accumulator {
    steps: usize,
    episodes: usize,
    returns: f64,
    solved: usize,
    lengths: usize,
    policy_loss: f64,
    value_loss: f64,
    entropy: f64,
    grad_norm: f64,
}

struct Slot<E> {
    env: E,
    graph: StateGraph,
    env_rng: ChaCha8Rng,
    steps: usize,
    episode_return: f64,
}

/// Runs `p_envs` environments in lock step, one gradient update per environment step.
pub struct Trainer<D: Domain> {
    pub domain: D,
    pub model: PolicyModel,
    pub hp: Hyperparams,
    pub params: ParameterStore<f32>,
    pub target: TargetStore<f32>,
    optimizer: AdamW,
    slots: Vec<Slot<D::Env>>,
    policy_rngs: Vec<ChaCha8Rng>,
    step: u64,
    acc: Accumulator,
}

impl<D: Domain> Trainer<D> {
    pub fn new(domain: D, hp: Hyperparams, seed: u64) -> Result<Self> {
        hp.validate()?;
        let model = PolicyModel::new(
            GnnConfig {
                shape: domain.shape(),
                emb_size: hp.emb_size,
                mp_steps: hp.mp_steps,
            },
            domain.schemas(),
        );
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        let params = model.init_params(&mut init_rng)?;
        let target = TargetStore::from_store(&params);
        let mut slots = Vec::with_capacity(hp.p_envs);
        let mut policy_rngs = Vec::with_capacity(hp.p_envs);
        for i in 0..hp.p_envs as u64 {
            let mut env_rng = ChaCha8Rng::seed_from_u64(seed);
            env_rng.set_stream(2 * i + 1);
            let mut policy_rng = ChaCha8Rng::seed_from_u64(seed);
            policy_rng.set_stream(2 * i + 2);
            let env = domain.sample(&mut env_rng);
            slots.push(Slot {
                graph: env.graph(),
                env,
                env_rng,
                steps: 0,
                episode_return: 0.0,
            });
            policy_rngs.push(policy_rng);
        }
        Ok(Self {
            optimizer: AdamW::new(hp.weight_decay),
            domain,
            model,
            hp,
            params,
            target,
            slots,
            policy_rngs,
            step: 0,
            acc: Accumulator::default(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Advances every environment by one action and applies one optimizer update.
    ///
    /// Returns the epoch summary when this step completes an epoch.
    pub fn train_step(&mut self) -> Result<Option<EpochMetrics>> {
        let hp = &self.hp;
        let b = self.slots.len();
        let scale = 1.0 / b as f64;
        let lr = hp.lr_at(self.step);
        let alpha_h = hp.alpha_h_at(self.step);

        let batch = BatchedGraph::union(self.slots.iter().map(|s| s.graph.clone()).collect())?;
        let mut tape = Tape::<f32>::new();
        let enc = encode(&mut tape, &self.params, &self.model.gnn, &batch)?;
        let v = value(&mut tape, &self.params, enc)?;
        let pres: Vec<&dyn Preconditions> = self.slots.iter().map(|s| &s.env as &dyn Preconditions).collect();
        let decoded = decode(
            &mut tape,
            &self.params,
            &self.model,
            &batch,
            enc,
            DecodeMode::Sample {
                pre: &pres,
                rngs: &mut self.policy_rngs,
                greedy: false,
            },
        )?;
        drop(pres);

        let mut rewards = Vec::with_capacity(b);
        let mut terms = Vec::with_capacity(b);
        let mut next_graphs = Vec::with_capacity(b);
        for (slot, action) in self.slots.iter_mut().zip(&decoded.choices) {
            let out = slot.env.step(action, &mut slot.env_rng)?;
            slot.steps += 1;
            slot.episode_return += out.reward;
            let termination = if out.terminal {
                Termination::Terminal
            } else if slot.steps >= hp.step_limit {
                Termination::Truncated
            } else {
                Termination::None
            };
            rewards.push(out.reward);
            terms.push(termination);
            next_graphs.push(slot.env.graph());
        }
        let next_values = state_values::<f32, _>(&self.target, &self.model, next_graphs.clone())?;
        let next_online = state_values::<f32, _>(&self.params, &self.model, next_graphs.clone())?;

        let values: Vec<f64> = tape.value(v).data.iter().map(|x| *x as f64).collect();
        let mut policy_coeffs = Vec::with_capacity(b);
        let mut value_seed = Vec::with_capacity(b);
        let (mut policy_loss, mut value_loss, mut entropy, mut entropy_states) = (0.0, 0.0, 0.0, 0);
        for i in 0..b {
            let q = q_target(rewards[i], terms[i], next_values[i], hp.gamma, hp.q_range);
            let adv = q_value(rewards[i], terms[i], next_online[i], hp.gamma) - values[i];
            let choice = &decoded.choices[i];
            let mut coeff = -adv;
            if let Some(f) = entropy_factor(choice.log_prob, choice.log_action_space, hp.entropy_normalization) {
                coeff += alpha_h * f;
                entropy -= f;
                entropy_states += 1;
            }
            policy_coeffs.push((coeff * scale) as f32);
            value_seed.push((hp.alpha_v * 2.0 * (values[i] - q) * scale) as f32);
            policy_loss -= adv * choice.log_prob * scale;
            value_loss += (q - values[i]) * (q - values[i]) * scale;
        }
        let mut seeds = decoded.seeds(&policy_coeffs);
        seeds.push((v, Matrix::column(value_seed)));
        let grads = tape.backward(&seeds)?;
        drop(tape);

        self.params.zero_grad();
        self.params.accumulate(&grads, 1.0)?;
        let grad_norm = self.params.grad_norm();
        clip_grad_norm(&mut self.params, hp.grad_max_norm);
        self.optimizer.step(&mut self.params, lr);
        self.target.polyak_update(&self.params, hp.rho)?;
        self.step += 1;

        let acc = &mut self.acc;
        acc.steps += 1;
        acc.policy_loss += policy_loss;
        acc.value_loss += value_loss;
        acc.entropy += if entropy_states > 0 { entropy / entropy_states as f64 } else { 0.0 };
        acc.grad_norm += grad_norm;
        for ((slot, term), graph) in self.slots.iter_mut().zip(terms).zip(next_graphs) {
            if term == Termination::None {
                slot.graph = graph;
                continue;
            }
            acc.episodes += 1;
            acc.returns += slot.episode_return;
            acc.lengths += slot.steps;
            if term == Termination::Terminal {
                acc.solved += 1;
            }
            slot.env = self.domain.sample(&mut slot.env_rng);
            slot.graph = slot.env.graph();
            slot.steps = 0;
            slot.episode_return = 0.0;
        }

        if !self.step.is_multiple_of(self.hp.epoch as u64) {
            return Ok(None);
        }
        let acc = std::mem::take(&mut self.acc);
        let per_step = 1.0 / acc.steps.max(1) as f64;
        let per_episode = if acc.episodes > 0 { 1.0 / acc.episodes as f64 } else { f64::NAN };
        Ok(Some(EpochMetrics {
            epoch: self.step / self.hp.epoch as u64,
            step: self.step,
            episodes: acc.episodes,
            mean_return: acc.returns * per_episode,
            solved_fraction: acc.solved as f64 * per_episode,
            mean_length: acc.lengths as f64 * per_episode,
            policy_loss: acc.policy_loss * per_step,
            value_loss: acc.value_loss * per_step,
            entropy: acc.entropy * per_step,
            grad_norm: acc.grad_norm * per_step,
            lr,
            alpha_h,
        }))
    }

    /// Runs `epoch` steps and returns that epoch's metrics.
    pub fn train_epoch(&mut self) -> Result<EpochMetrics> {
        loop {
            if let Some(m) = self.train_step()? {
                return Ok(m);
            }
        }
    }

    /// Saves parameters with the hyperparameters and step count in the manifest.
    pub fn save(&self, dir: &Path, extra: &Manifest) -> Result<()> {
        let mut manifest = extra.clone();
        let hp = &self.hp;
        manifest.set("p_envs", hp.p_envs);
        manifest.set("rho", hp.rho);
        manifest.set("gamma", hp.gamma);
        manifest.set("epoch", hp.epoch);
        manifest.set("step_limit", hp.step_limit);
        manifest.set("mp_steps", hp.mp_steps);
        manifest.set("emb_size", hp.emb_size);
        manifest.set("lr_start", hp.lr_start);
        manifest.set("lr_end", hp.lr_end);
        manifest.set("grad_max_norm", hp.grad_max_norm);
        manifest.set("q_low", hp.q_range.0);
        manifest.set("q_high", hp.q_range.1);
        manifest.set("alpha_v", hp.alpha_v);
        manifest.set("alpha_h_start", hp.alpha_h_start);
        manifest.set("alpha_h_end", hp.alpha_h_end);
        manifest.set("weight_decay", hp.weight_decay);
        manifest.set("entropy_normalization", hp.entropy_normalization);
        save_checkpoint(dir, &self.params, &manifest)
    }
}
