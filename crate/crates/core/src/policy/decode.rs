use std::sync::Arc;

use rand::Rng;

use super::model::{level_prefix, set_head, LEVEL_MP_STEPS, SCHEMA_HEAD};
use super::{
    log_action_space, viable_parameter_mask, viable_schema_mask, ActionChoice, ActionKind, ActionMasks,
    ActionSchema, Preconditions, PolicyModel,
};
use crate::error::{Error, Result};
use crate::gnn::{message_pass_step, BatchInputs, EncodedBatch};
use crate::graph::BatchedGraph;
use crate::numerics::{sigmoid, softmax_masked, Group, Matrix, ParamSource, Real, Tape, Var};

/// How the decoder obtains the action of each batch member.
pub enum DecodeMode<'a, R> {
    /// Draw fresh actions; member `i` uses `rngs[i]` unless `greedy`.
    Sample {
        pre: &'a [&'a dyn Preconditions],
        rngs: &'a mut [R],
        greedy: bool,
    },
    /// Score previously chosen actions against their recorded masks.
    Replay { actions: &'a [ActionChoice] },
}

/// Log-probabilities of one selection level, as a column with one row per participating member.
#[derive(Clone, Debug)]
pub struct LogProbTerm {
    pub var: Var,
    pub graphs: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Decoded {
    pub choices: Vec<ActionChoice>,
    pub terms: Vec<LogProbTerm>,
}

impl Decoded {
    /// Backward seeds for `Σ_i coeffs[i] · log π(a_i | s_i)`.
    pub fn seeds<T: Real>(&self, coeffs: &[T]) -> Vec<(Var, Matrix<T>)> {
        self.terms
            .iter()
            .map(|t| (t.var, Matrix::column(t.graphs.iter().map(|&g| coeffs[g]).collect())))
            .collect()
    }
}

/// Draws an index from `softmax(scores)` restricted to `mask`, or its mode when `rng` is `None`.
pub(crate) fn draw<R: Rng + ?Sized>(scores: &[f64], mask: &[bool], rng: Option<&mut R>) -> Result<usize> {
    let probs = softmax_masked(scores, mask)?;
    let Some(rng) = rng else {
        let mut best = None;
        for (i, p) in probs.iter().enumerate() {
            if mask[i] && best.is_none_or(|b: usize| *p > probs[b]) {
                best = Some(i);
            }
        }
        return best.ok_or(Error::NoValidChoice);
    };
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = None;
    for (i, p) in probs.iter().enumerate() {
        if !mask[i] {
            continue;
        }
        acc += p;
        last = Some(i);
        if u < acc {
            return Ok(i);
        }
    }
    last.ok_or(Error::NoValidChoice)
}

/// Node scores for parameter `level` of `schema` over a sub-batch.
///
/// `nodes`/`globals` are the encoder outputs restricted to the sub-batch and
/// `partials[k]` holds the earlier parameters of member `k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn level_scores<T: Real, P: ParamSource<T> + ?Sized>(
    tape: &mut Tape<T>,
    params: &P,
    schema: &ActionSchema,
    level: usize,
    sub: &BatchedGraph,
    inputs: Option<&BatchInputs>,
    enc: EncodedBatch,
    partials: &[&[usize]],
) -> Result<Var> {
    let prefix = level_prefix(schema.id, level);
    if level == 1 {
        return tape.dense(params, &format!("{prefix}.score"), enc.nodes);
    }
    let inputs = inputs.ok_or_else(|| Error::State("missing batch inputs for conditioned level".into()))?;
    let mut z = Matrix::zeros(sub.num_nodes(), level - 1);
    for (k, partial) in partials.iter().enumerate() {
        let offset = sub.node_offsets[k];
        for (j, &p) in partial.iter().enumerate() {
            z.row_mut(offset + p)[j] = T::one();
        }
    }
    let z = tape.input(z);
    let aug_in = tape.concat(&[enc.nodes, z])?;
    let aug_lin = tape.dense(params, &format!("{prefix}.augment"), aug_in)?;
    let mut e = EncodedBatch {
        nodes: tape.leaky_relu(aug_lin),
        globals: enc.globals,
    };
    for j in 0..LEVEL_MP_STEPS {
        e = message_pass_step(tape, params, &format!("{prefix}.mp{j}"), sub, inputs, e)?;
    }
    tape.dense(params, &format!("{prefix}.score"), e.nodes)
}

fn column_f64<T: Real>(tape: &Tape<T>, v: Var) -> Vec<f64> {
    tape.value(v).data.iter().map(|x| x.to_f64_lossy()).collect()
}

fn replay_err(index: usize, e: Error) -> Error {
    Error::Replay {
        index,
        reason: e.to_string(),
    }
}

struct Partial {
    action_id: usize,
    params: Vec<usize>,
    subset: Vec<usize>,
    levels: Vec<f64>,
    masks: ActionMasks,
    log_action_space: f64,
}

/// Samples or replays one action per batch member on `tape`.
///
/// Every level contributes a [`LogProbTerm`]; the summed terms of member `i`
/// equal `choices[i].log_prob` and are differentiable through `enc`.
pub fn decode<T: Real, P: ParamSource<T> + ?Sized, R: Rng>(
    tape: &mut Tape<T>,
    params: &P,
    model: &PolicyModel,
    batch: &BatchedGraph,
    enc: EncodedBatch,
    mut mode: DecodeMode<'_, R>,
) -> Result<Decoded> {
    let b = batch.num_graphs();
    let schemas = &model.schemas;
    let s = schemas.len();
    match &mode {
        DecodeMode::Sample { pre, rngs, greedy } => {
            if pre.len() != b || (!greedy && rngs.len() != b) {
                return Err(Error::dim("decode sample inputs", b, pre.len().min(rngs.len())));
            }
        }
        DecodeMode::Replay { actions } => {
            if actions.len() != b {
                return Err(Error::dim("decode replay actions", b, actions.len()));
            }
            for (i, a) in actions.iter().enumerate() {
                a.check_consistency(schemas, batch.graph(i).node_count())
                    .map_err(|e| replay_err(i, e))?;
            }
        }
    }

    let logits = tape.dense(params, SCHEMA_HEAD, enc.globals)?;
    let logit_values = column_f64(tape, logits);
    let mut state = Vec::with_capacity(b);
    let mut mask0 = Vec::with_capacity(b * s);
    for i in 0..b {
        let p = match &mut mode {
            DecodeMode::Sample { pre, rngs, greedy } => {
                let mask = viable_schema_mask(pre[i], schemas);
                let row = &logit_values[i * s..(i + 1) * s];
                let rng = if *greedy { None } else { Some(&mut rngs[i]) };
                let id = draw(row, &mask, rng).map_err(|e| match e {
                    Error::NoValidChoice => Error::NoValidAction,
                    e => e,
                })?;
                Partial {
                    action_id: id,
                    params: Vec::new(),
                    subset: Vec::new(),
                    levels: Vec::new(),
                    masks: ActionMasks {
                        schemas: mask,
                        levels: Vec::new(),
                    },
                    log_action_space: log_action_space(pre[i], schemas),
                }
            }
            DecodeMode::Replay { actions } => Partial {
                action_id: actions[i].action_id,
                params: Vec::new(),
                subset: Vec::new(),
                levels: Vec::new(),
                masks: ActionMasks {
                    schemas: actions[i].masks.schemas.clone(),
                    levels: Vec::new(),
                },
                log_action_space: actions[i].log_action_space,
            },
        };
        mask0.extend_from_slice(&p.masks.schemas);
        state.push(p);
    }
    let groups: Vec<Group> = (0..b).map(|i| (i * s, s)).collect();
    let picks = state.iter().map(|p| p.action_id).collect();
    let lp0 = tape.log_softmax_pick(logits, groups, mask0, picks)?;
    for (p, v) in state.iter_mut().zip(column_f64(tape, lp0)) {
        p.levels.push(v);
    }
    let mut terms = vec![LogProbTerm {
        var: lp0,
        graphs: (0..b).collect(),
    }];

    for schema in schemas {
        let members: Vec<usize> = (0..b).filter(|&i| state[i].action_id == schema.id).collect();
        if members.is_empty() || schema.kind == ActionKind::Elementary {
            continue;
        }
        let rows: Vec<usize> = members.iter().flat_map(|&i| batch.node_range(i)).collect();
        let mut offsets = vec![0];
        for &i in &members {
            offsets.push(offsets.last().unwrap() + batch.node_range(i).len());
        }
        let groups: Vec<Group> = offsets.windows(2).map(|w| (w[0], w[1] - w[0])).collect();
        let sub_enc = EncodedBatch {
            nodes: tape.gather(enc.nodes, Arc::from(rows))?,
            globals: tape.gather(enc.globals, Arc::from(members.as_slice()))?,
        };

        match schema.kind {
            ActionKind::Elementary => unreachable!(),
            ActionKind::Parametric { arity } => {
                let sub = if arity >= 2 { Some(batch.select(&members)?.0) } else { None };
                let inputs = sub.as_ref().map(|sb| BatchInputs::new(tape, sb));
                for level in 1..=arity {
                    let partials: Vec<&[usize]> = members.iter().map(|&i| state[i].params.as_slice()).collect();
                    let scores = level_scores(
                        tape,
                        params,
                        schema,
                        level,
                        sub.as_ref().unwrap_or(batch),
                        inputs.as_ref(),
                        sub_enc,
                        &partials,
                    )?;
                    let values = column_f64(tape, scores);
                    let mut mask = Vec::with_capacity(values.len());
                    let mut picks = Vec::with_capacity(members.len());
                    for (k, &i) in members.iter().enumerate() {
                        let (lo, hi) = (offsets[k], offsets[k + 1]);
                        let (m, pick) = match &mut mode {
                            DecodeMode::Sample { pre, rngs, greedy } => {
                                let m = viable_parameter_mask(pre[i], schema, &state[i].params);
                                let rng = if *greedy { None } else { Some(&mut rngs[i]) };
                                let pick = draw(&values[lo..hi], &m, rng)?;
                                (m, pick)
                            }
                            DecodeMode::Replay { actions } => {
                                (actions[i].masks.levels[level - 1].clone(), actions[i].params[level - 1])
                            }
                        };
                        mask.extend_from_slice(&m);
                        state[i].masks.levels.push(m);
                        state[i].params.push(pick);
                        picks.push(pick);
                    }
                    let lp = tape.log_softmax_pick(scores, groups.clone(), mask, picks)?;
                    for (&i, v) in members.iter().zip(column_f64(tape, lp)) {
                        state[i].levels.push(v);
                    }
                    terms.push(LogProbTerm {
                        var: lp,
                        graphs: members.clone(),
                    });
                }
            }
            ActionKind::Set => {
                let logit = tape.dense(params, &set_head(schema.id), sub_enc.nodes)?;
                let values = column_f64(tape, logit);
                let mut mask = Vec::with_capacity(values.len());
                let mut selected = Vec::with_capacity(values.len());
                for (k, &i) in members.iter().enumerate() {
                    let (lo, hi) = (offsets[k], offsets[k + 1]);
                    let (m, subset) = match &mut mode {
                        DecodeMode::Sample { pre, rngs, greedy } => {
                            let m = pre[i].set_mask(schema);
                            if m.len() != hi - lo {
                                return Err(Error::dim("set mask", hi - lo, m.len()));
                            }
                            let mut subset = Vec::new();
                            for (v, ok) in m.iter().enumerate() {
                                if !ok {
                                    continue;
                                }
                                let p = sigmoid(values[lo + v]);
                                let take = if *greedy { p > 0.5 } else { rngs[i].gen::<f64>() < p };
                                if take {
                                    subset.push(v);
                                }
                            }
                            (m, subset)
                        }
                        DecodeMode::Replay { actions } => (actions[i].masks.levels[0].clone(), actions[i].subset.clone()),
                    };
                    let mut sel = vec![false; hi - lo];
                    for &v in &subset {
                        sel[v] = true;
                    }
                    mask.extend_from_slice(&m);
                    selected.extend(sel);
                    state[i].masks.levels.push(m);
                    state[i].subset = subset;
                }
                let lp = tape.bernoulli_log_prob(logit, groups, mask, selected)?;
                for (&i, v) in members.iter().zip(column_f64(tape, lp)) {
                    state[i].levels.push(v);
                }
                terms.push(LogProbTerm { var: lp, graphs: members });
            }
        }
    }

    let choices = state
        .into_iter()
        .map(|p| ActionChoice {
            action_id: p.action_id,
            params: p.params,
            subset: p.subset,
            log_prob: p.levels.iter().sum(),
            level_log_probs: p.levels,
            masks: p.masks,
            log_action_space: p.log_action_space,
        })
        .collect();
    Ok(Decoded { choices, terms })
}
