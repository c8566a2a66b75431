use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Environment;
use crate::error::Result;
use crate::gnn::encode;
use crate::graph::BatchedGraph;
use crate::numerics::{ParamSource, Tape};
use crate::policy::{decode, DecodeMode, PolicyModel, Preconditions};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeResult {
    pub total_reward: f64,
    pub steps: usize,
    /// Ended by the environment before the step limit.
    pub solved: bool,
}

/// Episodes evaluated together in one batch.
const EVAL_BATCH: usize = 256;

/// Runs one episode per instance under a frozen policy.
///
/// Episode `i` draws actions from stream `2i+2` and transitions from stream
/// `2i+1` of `seed`, so results do not depend on batching.
pub fn evaluate<E: Environment, P: ParamSource<f32> + ?Sized>(
    instances: Vec<E>,
    params: &P,
    model: &PolicyModel,
    step_limit: usize,
    greedy: bool,
    seed: u64,
) -> Result<Vec<EpisodeResult>> {
    let mut results = Vec::with_capacity(instances.len());
    let mut rest = instances.into_iter().enumerate().peekable();
    while rest.peek().is_some() {
        let chunk: Vec<(usize, E)> = rest.by_ref().take(EVAL_BATCH).collect();
        results.extend(run_chunk(chunk, params, model, step_limit, greedy, seed)?);
    }
    Ok(results)
}

fn run_chunk<E: Environment, P: ParamSource<f32> + ?Sized>(
    chunk: Vec<(usize, E)>,
    params: &P,
    model: &PolicyModel,
    step_limit: usize,
    greedy: bool,
    seed: u64,
) -> Result<Vec<EpisodeResult>> {
    let n = chunk.len();
    let mut envs = Vec::with_capacity(n);
    let mut env_rngs = Vec::with_capacity(n);
    let mut policy_rngs = Vec::with_capacity(n);
    for (i, env) in chunk {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(2 * i as u64 + 1);
        env_rngs.push(r);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(2 * i as u64 + 2);
        policy_rngs.push(r);
        envs.push(env);
    }
    let mut results = vec![
        EpisodeResult {
            total_reward: 0.0,
            steps: 0,
            solved: false,
        };
        n
    ];
    let mut active: Vec<usize> = (0..n).collect();
    while !active.is_empty() {
        let batch = BatchedGraph::union(active.iter().map(|&i| envs[i].graph()).collect())?;
        let mut tape = Tape::<f32>::new();
        let enc = encode(&mut tape, params, &model.gnn, &batch)?;
        let pres: Vec<&dyn Preconditions> = active.iter().map(|&i| &envs[i] as &dyn Preconditions).collect();
        let mut rngs: Vec<ChaCha8Rng> = active.iter().map(|&i| policy_rngs[i].clone()).collect();
        let decoded = decode(
            &mut tape,
            params,
            model,
            &batch,
            enc,
            DecodeMode::Sample {
                pre: &pres,
                rngs: &mut rngs,
                greedy,
            },
        )?;
        drop(pres);
        for (&i, r) in active.iter().zip(rngs) {
            policy_rngs[i] = r;
        }
        let mut still = Vec::with_capacity(active.len());
        for (&i, action) in active.iter().zip(&decoded.choices) {
            let out = envs[i].step(action, &mut env_rngs[i])?;
            let res = &mut results[i];
            res.total_reward += out.reward;
            res.steps += 1;
            if out.terminal {
                res.solved = true;
            } else if res.steps < step_limit {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(results)
}
