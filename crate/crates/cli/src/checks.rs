//! Numerical self-checks: finite-difference gradients and policy normalization.

use anyhow::{ensure, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relrl_core::a2c::Environment;
use relrl_core::gnn::{encode, GnnConfig};
use relrl_core::graph::BatchedGraph;
use relrl_core::numerics::{grad_check, GradCheckReport, ParameterStore, Tape};
use relrl_core::policy::{action_log_prob, enumerate_actions, replay, sample_action, value, PolicyModel};
use relrl_envs::blockworld::BlockWorld;
use relrl_envs::sokoban::{generate_level, Sokoban};
use relrl_envs::sysadmin::{Mode, SysAdmin};

use crate::config::{DomainKind, DomainSpec};
use crate::run::{model_of, schemas_of, shape_of};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const EPSILON: f64 = 1e-6;
const CHECK_EMB: usize = 4;
const CHECK_MP_STEPS: usize = 2;

fn small_model(kind: DomainKind) -> PolicyModel {
    PolicyModel::new(
        GnnConfig {
            shape: shape_of(kind),
            emb_size: CHECK_EMB,
            mp_steps: CHECK_MP_STEPS,
        },
        schemas_of(kind),
    )
}

/// A fresh instance of `spec`, drawn from `rng`.
pub fn instance(spec: &DomainSpec, rng: &mut ChaCha8Rng) -> Result<Box<dyn Instance>> {
    spec.validate()?;
    Ok(match spec {
        DomainSpec::BlockWorld { n } => Box::new(BlockWorld::generate(*n, rng)),
        DomainSpec::Sokoban { width, height, boxes, .. } => Box::new(generate_level(*width, *height, *boxes, rng)?),
        DomainSpec::SysAdmin { n, mode } => Box::new(SysAdmin::generate(*n, *mode, rng)?),
    })
}

/// Object-safe view of an environment state for the checks.
pub trait Instance {
    fn graph(&self) -> relrl_core::graph::StateGraph;
    fn pre(&self) -> &dyn relrl_core::policy::Preconditions;
}

impl<E: Environment> Instance for E {
    fn graph(&self) -> relrl_core::graph::StateGraph {
        Environment::graph(self)
    }

    fn pre(&self) -> &dyn relrl_core::policy::Preconditions {
        self
    }
}

/// Too small for the generator, so the 5×5 Sokoban check uses a fixed level.
pub const SMALL_SOKOBAN: &str = "#####\n#@  #\n# $ #\n#  .#\n#####\n";

/// The smallest instance of each domain used by [`gradcheck_all`].
pub fn smallest_instances() -> Vec<DomainSpec> {
    vec![
        DomainSpec::BlockWorld { n: 2 },
        DomainSpec::Sokoban {
            width: 5,
            height: 5,
            boxes: 1,
            levels: None,
        },
        DomainSpec::SysAdmin { n: 4, mode: Mode::Single },
        DomainSpec::SysAdmin { n: 4, mode: Mode::Multi },
    ]
}

/// Checks `∂(log π(a|s) + V(s))/∂θ` for a sampled action against central differences.
pub fn gradcheck(spec: &DomainSpec, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = small_model(spec.kind());
    let mut params: ParameterStore<f64> = model.init_params(&mut rng)?;
    // Zero biases put zero-feature nodes exactly on the leaky-relu kink.
    params.randomize(0.5, &mut rng);
    let inst: Box<dyn Instance> = match spec {
        DomainSpec::Sokoban { width: 5, height: 5, .. } => Box::new(Sokoban::parse(SMALL_SOKOBAN)?),
        _ => instance(spec, &mut rng)?,
    };
    let graph = inst.graph();
    let action = sample_action::<f64, _, _>(&graph, &params, &model, inst.pre(), &mut rng)?;
    let report = grad_check(
        &params,
        |tape, p| {
            let logp = action_log_prob(tape, p, &model, &graph, &action)?;
            let batch = BatchedGraph::union(vec![graph.clone()])?;
            let enc = encode(tape, p, &model.gnn, &batch)?;
            let v = value(tape, p, enc)?;
            tape.add(logp, v)
        },
        EPSILON,
        GRADCHECK_TOLERANCE,
    )?;
    Ok(report)
}

pub fn gradcheck_all(seed: u64) -> Result<Vec<(DomainSpec, GradCheckReport)>> {
    smallest_instances()
        .into_iter()
        .map(|spec| gradcheck(&spec, seed).map(|r| (spec, r)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnumCheck {
    pub settings: usize,
    pub actions: usize,
    pub max_deviation: f64,
}

/// Sums `π(a|s)` over every grounded action for `settings` freshly initialized models.
///
/// Uses the domain's default model size. All actions are replayed in one
/// batched pass over copies of the state graph.
pub fn enumcheck(spec: &DomainSpec, settings: usize, seed: u64) -> Result<EnumCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = model_of(spec.kind(), &spec.default_hyperparams());
    let mut max_deviation: f64 = 0.0;
    let mut actions_seen = 0;
    for _ in 0..settings {
        let params: ParameterStore<f64> = model.init_params(&mut rng)?;
        let inst = instance(spec, &mut rng)?;
        let actions = enumerate_actions(inst.pre(), &model.schemas)?;
        ensure!(!actions.is_empty(), "no grounded actions in {spec:?}");
        actions_seen = actions.len();
        let batch = BatchedGraph::union(vec![inst.graph(); actions.len()])?;
        let mut tape = Tape::new();
        let enc = encode(&mut tape, &params, &model.gnn, &batch)?;
        let decoded = replay(&mut tape, &params, &model, &batch, enc, &actions)?;
        let mut log_probs = vec![0.0; actions.len()];
        for term in &decoded.terms {
            for (&g, v) in term.graphs.iter().zip(&tape.value(term.var).data) {
                log_probs[g] += v;
            }
        }
        let total: f64 = log_probs.iter().map(|l| l.exp()).sum();
        max_deviation = max_deviation.max((total - 1.0).abs());
    }
    Ok(EnumCheck {
        settings,
        actions: actions_seen,
        max_deviation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_instances_pass_gradcheck() {
        for (spec, report) in gradcheck_all(1).unwrap() {
            assert!(report.checked > 0);
            assert!(report.passed(), "{spec:?}: {:?}", report.failures.first());
        }
    }

    #[test]
    fn enumeration_is_normalized() {
        let spec = DomainSpec::SysAdmin { n: 4, mode: Mode::Multi };
        let check = enumcheck(&spec, 3, 2).unwrap();
        assert_eq!(check.actions, 16);
        assert!(check.max_deviation < 1e-9);
        let bw = enumcheck(&DomainSpec::BlockWorld { n: 3 }, 3, 2).unwrap();
        assert!(bw.max_deviation < 1e-9);
    }
}
