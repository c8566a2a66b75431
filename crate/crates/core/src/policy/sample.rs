use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::decode::{draw, level_scores};
use super::model::{set_head, SCHEMA_HEAD, VALUE_HEAD};
use super::{
    decode, log_action_space, viable_parameter_mask, viable_schema_mask, ActionChoice, ActionKind, ActionMasks,
    DecodeMode, Decoded, PolicyModel, Preconditions,
};
use crate::error::{Error, Result};
use crate::gnn::{encode, BatchInputs, EncodedBatch};
use crate::graph::{BatchedGraph, StateGraph};
use crate::numerics::{sigmoid, softplus, ParamSource, Real, Tape, Var};

/// State value `V(s)` for every graph of an encoded batch, as a `B × 1` column.
pub fn value<T: Real, P: ParamSource<T> + ?Sized>(tape: &mut Tape<T>, params: &P, enc: EncodedBatch) -> Result<Var> {
    tape.dense(params, VALUE_HEAD, enc.globals)
}

/// Replays recorded actions; shorthand for [`decode`] in replay mode.
pub fn replay<T: Real, P: ParamSource<T> + ?Sized>(
    tape: &mut Tape<T>,
    params: &P,
    model: &PolicyModel,
    batch: &BatchedGraph,
    enc: EncodedBatch,
    actions: &[ActionChoice],
) -> Result<Decoded> {
    decode::<T, P, ChaCha8Rng>(tape, params, model, batch, enc, DecodeMode::Replay { actions })
}

/// Differentiable `log π(action | graph)` as a `1 × 1` tape value.
pub fn action_log_prob<T: Real, P: ParamSource<T> + ?Sized>(
    tape: &mut Tape<T>,
    params: &P,
    model: &PolicyModel,
    graph: &StateGraph,
    action: &ActionChoice,
) -> Result<Var> {
    let batch = BatchedGraph::union(vec![graph.clone()])?;
    let enc = encode(tape, params, &model.gnn, &batch)?;
    let decoded = replay(tape, params, model, &batch, enc, std::slice::from_ref(action))?;
    let mut total: Option<Var> = None;
    for term in &decoded.terms {
        let s = tape.sum(term.var)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    total.ok_or_else(|| Error::State("decoder produced no terms".into()))
}

fn log_softmax_at(scores: &[f64], mask: &[bool], pick: usize) -> f64 {
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(s, _)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(s, _)| (s - max).exp())
        .sum();
    scores[pick] - max - z.ln()
}

/// Draws one action for a single graph, backtracking out of dead ends.
///
/// A level whose candidates are all masked disables the choice that led to it
/// and redraws one level up. `log_prob` is scored against the viable masks,
/// which is the exact probability of this procedure.
pub fn sample_action<T: Real, P: ParamSource<T> + ?Sized, R: Rng + ?Sized>(
    graph: &StateGraph,
    params: &P,
    model: &PolicyModel,
    pre: &dyn Preconditions,
    rng: &mut R,
) -> Result<ActionChoice> {
    let schemas = &model.schemas;
    let n = graph.node_count();
    let batch = BatchedGraph::union(vec![graph.clone()])?;
    let mut tape = Tape::<T>::new();
    let enc = encode(&mut tape, params, &model.gnn, &batch)?;
    let logits = tape.dense(params, SCHEMA_HEAD, enc.globals)?;
    let logits: Vec<f64> = tape.value(logits).data.iter().map(|v| v.to_f64_lossy()).collect();
    let inputs = BatchInputs::new(&mut tape, &batch);

    let mut open = pre.schema_mask(schemas);
    let mut cache: HashMap<Vec<usize>, Vec<f64>> = HashMap::new();
    loop {
        if !open.iter().any(|m| *m) {
            return Err(Error::NoValidAction);
        }
        let id = draw(&logits, &open, Some(&mut *rng))?;
        let schema = &schemas[id];
        let mut params_out = Vec::new();
        let mut subset = Vec::new();
        let mut masks = ActionMasks {
            schemas: viable_schema_mask(pre, schemas),
            levels: Vec::new(),
        };
        let mut levels = vec![log_softmax_at(&logits, &masks.schemas, id)];
        match schema.kind {
            ActionKind::Elementary => {}
            ActionKind::Parametric { arity } => {
                let mut scores_for = |tape: &mut Tape<T>, partial: &[usize]| -> Result<Vec<f64>> {
                    if let Some(s) = cache.get(partial) {
                        return Ok(s.clone());
                    }
                    let var = level_scores(tape, params, schema, partial.len() + 1, &batch, Some(&inputs), enc, &[partial])?;
                    let s: Vec<f64> = tape.value(var).data.iter().map(|v| v.to_f64_lossy()).collect();
                    cache.insert(partial.to_vec(), s.clone());
                    Ok(s)
                };
                // Depth-first search with random candidate order; each level keeps its own exclusions.
                let mut stack = vec![pre.parameter_mask(schema, &[])];
                while params_out.len() < arity {
                    let Some(mask) = stack.last_mut() else { break };
                    if !mask.iter().any(|m| *m) {
                        stack.pop();
                        match params_out.pop() {
                            Some(c) => stack.last_mut().expect("parent level")[c] = false,
                            None => break,
                        }
                        continue;
                    }
                    let mask = mask.clone();
                    let scores = scores_for(&mut tape, &params_out)?;
                    let c = draw(&scores, &mask, Some(&mut *rng))?;
                    params_out.push(c);
                    if params_out.len() < arity {
                        stack.push(pre.parameter_mask(schema, &params_out));
                    }
                }
                if params_out.len() < arity {
                    open[id] = false;
                    cache.clear();
                    continue;
                }
                for l in 0..arity {
                    let m = viable_parameter_mask(pre, schema, &params_out[..l]);
                    let scores = scores_for(&mut tape, &params_out[..l])?;
                    levels.push(log_softmax_at(&scores, &m, params_out[l]));
                    masks.levels.push(m);
                }
            }
            ActionKind::Set => {
                let m = pre.set_mask(schema);
                if m.len() != n {
                    return Err(Error::dim("set mask", n, m.len()));
                }
                let var = tape.dense(params, &set_head(id), enc.nodes)?;
                let mut lp = 0.0;
                for (v, ok) in m.iter().enumerate() {
                    if !ok {
                        continue;
                    }
                    let s = tape.value(var).data[v].to_f64_lossy();
                    let p = sigmoid(s);
                    if rng.gen::<f64>() < p {
                        subset.push(v);
                        lp -= softplus(-s);
                    } else {
                        lp -= softplus(s);
                    }
                }
                levels.push(lp);
                masks.levels.push(m);
            }
        }
        return Ok(ActionChoice {
            action_id: id,
            params: params_out,
            subset,
            log_prob: levels.iter().sum(),
            level_log_probs: levels,
            masks,
            log_action_space: log_action_space(pre, schemas),
        });
    }
}
