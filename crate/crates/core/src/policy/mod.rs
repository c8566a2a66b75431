//! Auto-regressive action selection over graph embeddings.
//!
//! An action is `(a₀, a₁, …, a_L)`: a schema id drawn from the global
//! embedding, followed by node parameters drawn one level at a time. From the
//! second parameter on, node embeddings are augmented with a one-hot record of
//! earlier choices and refined by two dedicated message-pass steps before
//! scoring. Set actions draw an independent Bernoulli per node instead.
//!
//! Preconditions mask candidates out of each softmax. When a level has no
//! admissible candidate the sampler backtracks and disables the choice that
//! led there. Rejecting dead ends this way samples each surviving candidate
//! with probability proportional to its softmax weight, so the exact
//! log-probability of a sampled action is the softmax restricted to *viable*
//! candidates (those with at least one admissible completion). That restricted
//! mask is what [`ActionChoice`] records and what replay scores against.

mod decode;
mod model;
mod sample;

pub use decode::{decode, DecodeMode, Decoded, LogProbTerm};
pub use model::{PolicyModel, VALUE_HEAD};
pub use sample::{action_log_prob, replay, sample_action, value};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActionKind {
    /// No parameters.
    Elementary,
    /// `arity` node parameters chosen in sequence.
    Parametric { arity: usize },
    /// One arbitrary subset of nodes.
    Set,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ActionSchema {
    pub id: usize,
    pub name: String,
    pub kind: ActionKind,
}

impl ActionSchema {
    pub fn new(id: usize, name: &str, kind: ActionKind) -> Self {
        if let ActionKind::Parametric { arity } = kind {
            assert!(arity >= 1, "parametric schema `{name}` needs arity >= 1");
        }
        Self {
            id,
            name: name.to_string(),
            kind,
        }
    }

    pub fn arity(&self) -> usize {
        match self.kind {
            ActionKind::Parametric { arity } => arity,
            _ => 0,
        }
    }
}

/// Domain-supplied admissibility of candidates at each selection level.
pub trait Preconditions {
    fn num_nodes(&self) -> usize;

    /// Level 0: which schemas are available. Defaults to all.
    fn schema_mask(&self, schemas: &[ActionSchema]) -> Vec<bool> {
        vec![true; schemas.len()]
    }

    /// Candidates for parameter `partial.len() + 1` of `schema`. Defaults to all nodes.
    fn parameter_mask(&self, _schema: &ActionSchema, _partial: &[usize]) -> Vec<bool> {
        vec![true; self.num_nodes()]
    }

    /// Nodes that may join the subset of a set action; the rest have p(v) = 0.
    fn set_mask(&self, _schema: &ActionSchema) -> Vec<bool> {
        vec![true; self.num_nodes()]
    }
}

/// Preconditions that admit everything on a graph of `n` nodes.
#[derive(Clone, Copy, Debug)]
pub struct Unconstrained(pub usize);

impl Preconditions for Unconstrained {
    fn num_nodes(&self) -> usize {
        self.0
    }
}

/// Masks in force at each level of one decision.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActionMasks {
    pub schemas: Vec<bool>,
    /// One node mask per parameter level, or a single mask for a set action.
    pub levels: Vec<Vec<bool>>,
}

/// A concrete action together with its log-probability under the policy that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChoice {
    pub action_id: usize,
    pub params: Vec<usize>,
    /// Sorted node indices; set actions only.
    pub subset: Vec<usize>,
    pub log_prob: f64,
    pub level_log_probs: Vec<f64>,
    pub masks: ActionMasks,
    /// `log |A(s)|`, the log of the number of grounded actions available in the state.
    pub log_action_space: f64,
}

impl ActionChoice {
    /// Builds an unscored choice with the masks the sampler would have applied.
    pub fn grounded(
        pre: &dyn Preconditions,
        schemas: &[ActionSchema],
        action_id: usize,
        params: Vec<usize>,
        subset: Vec<usize>,
    ) -> Result<Self> {
        let schema = schemas
            .get(action_id)
            .ok_or_else(|| Error::Consistency(format!("unknown schema {action_id}")))?;
        let mut masks = ActionMasks {
            schemas: viable_schema_mask(pre, schemas),
            levels: Vec::new(),
        };
        match schema.kind {
            ActionKind::Elementary => {}
            ActionKind::Parametric { arity } => {
                if params.len() != arity {
                    return Err(Error::Consistency(format!(
                        "schema `{}` takes {arity} parameters, got {}",
                        schema.name,
                        params.len()
                    )));
                }
                for l in 0..arity {
                    masks.levels.push(viable_parameter_mask(pre, schema, &params[..l]));
                }
            }
            ActionKind::Set => masks.levels.push(pre.set_mask(schema)),
        }
        Ok(Self {
            action_id,
            params,
            subset,
            log_prob: 0.0,
            level_log_probs: Vec::new(),
            masks,
            log_action_space: log_action_space(pre, schemas),
        })
    }

    /// Checks that every recorded pick is admitted by its recorded mask.
    pub fn check_consistency(&self, schemas: &[ActionSchema], num_nodes: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Consistency(msg));
        let Some(schema) = schemas.get(self.action_id) else {
            return bad(format!("unknown schema {}", self.action_id));
        };
        if self.masks.schemas.len() != schemas.len() || !self.masks.schemas[self.action_id] {
            return bad(format!("schema `{}` is masked", schema.name));
        }
        match schema.kind {
            ActionKind::Elementary => {
                if !self.params.is_empty() || !self.subset.is_empty() {
                    return bad(format!("elementary `{}` carries parameters", schema.name));
                }
            }
            ActionKind::Parametric { arity } => {
                if self.params.len() != arity || self.masks.levels.len() != arity {
                    return bad(format!("`{}` expects {arity} parameters", schema.name));
                }
                for (l, (&p, mask)) in self.params.iter().zip(&self.masks.levels).enumerate() {
                    if mask.len() != num_nodes {
                        return bad(format!("level {} mask has {} entries for {num_nodes} nodes", l + 1, mask.len()));
                    }
                    if p >= num_nodes || !mask[p] {
                        return bad(format!("parameter {} = {p} violates its precondition mask", l + 1));
                    }
                }
            }
            ActionKind::Set => {
                let Some(mask) = self.masks.levels.first() else {
                    return bad("set action without a node mask".into());
                };
                if mask.len() != num_nodes {
                    return bad(format!("set mask has {} entries for {num_nodes} nodes", mask.len()));
                }
                if let Some(v) = self.subset.iter().find(|v| **v >= num_nodes || !mask[**v]) {
                    return bad(format!("node {v} is not allowed in the subset"));
                }
            }
        }
        Ok(())
    }
}

/// Number of complete admissible groundings below `partial`.
fn completions(pre: &dyn Preconditions, schema: &ActionSchema, partial: &mut Vec<usize>) -> f64 {
    let arity = schema.arity();
    if partial.len() == arity {
        return 1.0;
    }
    let mask = pre.parameter_mask(schema, partial);
    if partial.len() + 1 == arity {
        return mask.iter().filter(|m| **m).count() as f64;
    }
    let mut total = 0.0;
    for (c, ok) in mask.into_iter().enumerate() {
        if ok {
            partial.push(c);
            total += completions(pre, schema, partial);
            partial.pop();
        }
    }
    total
}

fn has_completion(pre: &dyn Preconditions, schema: &ActionSchema, partial: &mut Vec<usize>) -> bool {
    let arity = schema.arity();
    if partial.len() == arity {
        return true;
    }
    let mask = pre.parameter_mask(schema, partial);
    if partial.len() + 1 == arity {
        return mask.iter().any(|m| *m);
    }
    for (c, ok) in mask.into_iter().enumerate() {
        if ok {
            partial.push(c);
            let found = has_completion(pre, schema, partial);
            partial.pop();
            if found {
                return true;
            }
        }
    }
    false
}

/// Candidates for the next parameter that admit at least one full grounding.
pub fn viable_parameter_mask(pre: &dyn Preconditions, schema: &ActionSchema, partial: &[usize]) -> Vec<bool> {
    let mut mask = pre.parameter_mask(schema, partial);
    if partial.len() + 1 < schema.arity() {
        let mut prefix = partial.to_vec();
        for (c, ok) in mask.iter_mut().enumerate() {
            if *ok {
                prefix.push(c);
                *ok = has_completion(pre, schema, &mut prefix);
                prefix.pop();
            }
        }
    }
    mask
}

/// Available schemas that admit at least one full grounding.
pub fn viable_schema_mask(pre: &dyn Preconditions, schemas: &[ActionSchema]) -> Vec<bool> {
    let shallow = pre.schema_mask(schemas);
    schemas
        .iter()
        .zip(shallow)
        .map(|(s, ok)| ok && (s.arity() == 0 || has_completion(pre, s, &mut Vec::new())))
        .collect()
}

/// `log |A(s)|` over all schemas; a set schema contributes `2^k` for `k` admissible nodes.
pub fn log_action_space(pre: &dyn Preconditions, schemas: &[ActionSchema]) -> f64 {
    let shallow = pre.schema_mask(schemas);
    let logs: Vec<f64> = schemas
        .iter()
        .zip(shallow)
        .filter(|(_, ok)| *ok)
        .filter_map(|(s, _)| {
            let log = match s.kind {
                ActionKind::Elementary => 0.0,
                ActionKind::Parametric { .. } => completions(pre, s, &mut Vec::new()).ln(),
                ActionKind::Set => {
                    pre.set_mask(s).iter().filter(|m| **m).count() as f64 * std::f64::consts::LN_2
                }
            };
            log.is_finite().then_some(log)
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Every grounded action of a state, for brute-force enumeration.
pub fn enumerate_actions(pre: &dyn Preconditions, schemas: &[ActionSchema]) -> Result<Vec<ActionChoice>> {
    let mut out = Vec::new();
    let viable = viable_schema_mask(pre, schemas);
    for (schema, ok) in schemas.iter().zip(viable) {
        if !ok {
            continue;
        }
        match schema.kind {
            ActionKind::Elementary => {
                out.push(ActionChoice::grounded(pre, schemas, schema.id, vec![], vec![])?);
            }
            ActionKind::Parametric { arity } => {
                let mut stack = vec![Vec::new()];
                while let Some(partial) = stack.pop() {
                    if partial.len() == arity {
                        out.push(ActionChoice::grounded(pre, schemas, schema.id, partial, vec![])?);
                        continue;
                    }
                    let mask = viable_parameter_mask(pre, schema, &partial);
                    for (c, ok) in mask.into_iter().enumerate().rev() {
                        if ok {
                            let mut next = partial.clone();
                            next.push(c);
                            stack.push(next);
                        }
                    }
                }
            }
            ActionKind::Set => {
                let allowed: Vec<usize> = pre
                    .set_mask(schema)
                    .iter()
                    .enumerate()
                    .filter(|(_, m)| **m)
                    .map(|(i, _)| i)
                    .collect();
                if allowed.len() > 20 {
                    return Err(Error::Consistency(format!(
                        "refusing to enumerate 2^{} subsets",
                        allowed.len()
                    )));
                }
                for bits in 0u32..(1 << allowed.len()) {
                    let subset = allowed
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| bits & (1 << i) != 0)
                        .map(|(_, v)| *v)
                        .collect();
                    out.push(ActionChoice::grounded(pre, schemas, schema.id, vec![], subset)?);
                }
            }
        }
    }
    Ok(out)
}
