use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relrl_core::gnn::{encode, GnnConfig};
use relrl_core::graph::{BatchedGraph, Edge, GraphShape, StateGraph};
use relrl_core::numerics::{grad_check, ParameterStore, Tape};
use relrl_core::policy::{
    action_log_prob, decode, enumerate_actions, replay, sample_action, ActionChoice, ActionKind, ActionSchema,
    DecodeMode, PolicyModel, Preconditions, Unconstrained,
};
use relrl_core::Error;

fn shape() -> GraphShape {
    GraphShape {
        node_width: 2,
        edge_width: 0,
        edge_types: 2,
        global_width: 0,
    }
}

fn model(schemas: Vec<ActionSchema>) -> PolicyModel {
    PolicyModel::new(
        GnnConfig {
            shape: shape(),
            emb_size: 4,
            mp_steps: 2,
        },
        schemas,
    )
}

fn mixed_schemas() -> Vec<ActionSchema> {
    vec![
        ActionSchema::new(0, "noop", ActionKind::Elementary),
        ActionSchema::new(1, "pair", ActionKind::Parametric { arity: 2 }),
        ActionSchema::new(2, "mark", ActionKind::Parametric { arity: 1 }),
    ]
}

fn params(m: &PolicyModel, seed: u64, scale: f64) -> ParameterStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = m.init_params(&mut rng).unwrap();
    store.randomize(scale, &mut rng);
    store
}

fn graph(n: usize, seed: u64) -> StateGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = (0..n)
        .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
        .collect();
    let edges = (0..n).map(|i| Edge::new(i, (i + 1) % n, i % 2)).collect();
    StateGraph::build(shape(), nodes, edges, vec![]).unwrap()
}

/// `pair(x, y)` needs `x != y` and `x != 0`, but the first level only sees `x`;
/// node 0 looks admissible until its second level turns out empty.
/// `mark(x)` admits odd nodes.
struct Fixture(usize);

impl Preconditions for Fixture {
    fn num_nodes(&self) -> usize {
        self.0
    }
    fn parameter_mask(&self, schema: &ActionSchema, partial: &[usize]) -> Vec<bool> {
        match (schema.name.as_str(), partial) {
            ("pair", []) => vec![true; self.0],
            ("pair", [0]) => vec![false; self.0],
            ("pair", [x]) => (0..self.0).map(|c| c != *x).collect(),
            ("mark", []) => (0..self.0).map(|c| c % 2 == 1).collect(),
            _ => unreachable!(),
        }
    }
}

type Key = (usize, Vec<usize>, Vec<usize>);

fn key(a: &ActionChoice) -> Key {
    (a.action_id, a.params.clone(), a.subset.clone())
}

fn exact_log_prob(m: &PolicyModel, store: &ParameterStore<f64>, g: &StateGraph, a: &ActionChoice) -> f64 {
    let mut tape = Tape::new();
    let v = action_log_prob(&mut tape, store, m, g, a).unwrap();
    tape.value(v).data[0]
}

#[test]
fn enumerated_probabilities_sum_to_one() {
    let m = model(mixed_schemas());
    let g = graph(4, 1);
    for seed in 0..5 {
        let store = params(&m, seed, 1.0);
        let actions = enumerate_actions(&Fixture(4), &m.schemas).unwrap();
        assert_eq!(actions.len(), 1 + 9 + 2);
        let total: f64 = actions.iter().map(|a| exact_log_prob(&m, &store, &g, a).exp()).sum();
        assert!((total - 1.0).abs() < 1e-9, "seed {seed}: {total}");
    }
}

#[test]
fn set_action_subsets_sum_to_one() {
    let m = model(vec![
        ActionSchema::new(0, "noop", ActionKind::Elementary),
        ActionSchema::new(1, "reset", ActionKind::Set),
    ]);
    let g = graph(4, 2);
    let store = params(&m, 3, 1.0);
    let actions = enumerate_actions(&Unconstrained(4), &m.schemas).unwrap();
    assert_eq!(actions.len(), 17);
    let total: f64 = actions.iter().map(|a| exact_log_prob(&m, &store, &g, a).exp()).sum();
    assert!((total - 1.0).abs() < 1e-9, "{total}");
}

#[test]
fn sampling_frequencies_match_log_probs() {
    let m = model(mixed_schemas());
    let g = graph(4, 4);
    let store = params(&m, 5, 0.5);
    let pre = Fixture(4);
    let probs: HashMap<Key, f64> = enumerate_actions(&pre, &m.schemas)
        .unwrap()
        .iter()
        .map(|a| (key(a), exact_log_prob(&m, &store, &g, a).exp()))
        .collect();

    let draws = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut counts: HashMap<Key, usize> = HashMap::new();
    for _ in 0..draws {
        let a = sample_action::<f64, _, _>(&g, &store, &m, &pre, &mut rng).unwrap();
        assert_ne!((a.action_id, a.params.first()), (1, Some(&0)), "dead-end parameter sampled");
        let p = probs[&key(&a)];
        assert!((a.log_prob - p.ln()).abs() < 1e-9);
        *counts.entry(key(&a)).or_default() += 1;
    }

    let mut chi2 = 0.0;
    for (k, p) in &probs {
        let expected = p * draws as f64;
        let observed = *counts.get(k).unwrap_or(&0) as f64;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        assert!((observed - expected).abs() <= 3.0 * sigma + 1.0, "{k:?}: {observed} vs {expected}");
        chi2 += (observed - expected).powi(2) / expected;
    }
    // 11 degrees of freedom, 0.1% critical value.
    assert!(chi2 < 31.26, "chi2 = {chi2}");
}

#[test]
fn dead_end_first_parameter_never_sampled_by_batched_decoder() {
    let m = model(vec![ActionSchema::new(0, "pair", ActionKind::Parametric { arity: 2 })]);
    let g = graph(3, 7);
    let store = params(&m, 8, 0.5);
    let pre = Fixture(3);
    let b = 64;
    let batch = BatchedGraph::union(vec![g; b]).unwrap();
    let pres: Vec<&dyn Preconditions> = (0..b).map(|_| &pre as &dyn Preconditions).collect();
    let mut rngs: Vec<ChaCha8Rng> = (0..b as u64).map(ChaCha8Rng::seed_from_u64).collect();
    for _ in 0..20 {
        let mut tape = Tape::new();
        let enc = encode(&mut tape, &store, &m.gnn, &batch).unwrap();
        let out = decode(
            &mut tape,
            &store,
            &m,
            &batch,
            enc,
            DecodeMode::Sample {
                pre: &pres,
                rngs: &mut rngs,
                greedy: false,
            },
        )
        .unwrap();
        for a in &out.choices {
            assert_ne!(a.params[0], 0);
            assert_ne!(a.params[0], a.params[1]);
        }
    }
}

#[test]
fn batched_sample_agrees_with_single_graph_replay() {
    let m = model(mixed_schemas());
    let store = params(&m, 9, 0.7);
    let graphs: Vec<StateGraph> = (0..6).map(|i| graph(3 + i % 3, 20 + i as u64)).collect();
    let pre: Vec<Fixture> = graphs.iter().map(|g| Fixture(g.node_count())).collect();
    let pres: Vec<&dyn Preconditions> = pre.iter().map(|p| p as &dyn Preconditions).collect();
    let mut rngs: Vec<ChaCha8Rng> = (0..6).map(|i| ChaCha8Rng::seed_from_u64(100 + i)).collect();
    let batch = BatchedGraph::union(graphs.clone()).unwrap();
    let mut tape = Tape::new();
    let enc = encode(&mut tape, &store, &m.gnn, &batch).unwrap();
    let out = decode(
        &mut tape,
        &store,
        &m,
        &batch,
        enc,
        DecodeMode::Sample {
            pre: &pres,
            rngs: &mut rngs,
            greedy: false,
        },
    )
    .unwrap();
    for (i, a) in out.choices.iter().enumerate() {
        let lp = exact_log_prob(&m, &store, &graphs[i], a);
        assert!((lp - a.log_prob).abs() < 1e-9, "member {i}: {lp} vs {}", a.log_prob);
        let summed: f64 = a.level_log_probs.iter().sum();
        assert!((summed - a.log_prob).abs() < 1e-12);
    }

    // Replaying the whole batch reproduces the same terms.
    let mut tape = Tape::new();
    let enc = encode(&mut tape, &store, &m.gnn, &batch).unwrap();
    let again = replay(&mut tape, &store, &m, &batch, enc, &out.choices).unwrap();
    for (a, b) in out.choices.iter().zip(&again.choices) {
        assert_eq!(key(a), key(b));
        assert!((a.log_prob - b.log_prob).abs() < 1e-12);
    }
}

#[test]
fn f32_sample_and_replay_agree() {
    let m = model(mixed_schemas());
    let store = params(&m, 10, 0.7).cast::<f32>();
    let g = graph(5, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let a = sample_action::<f32, _, _>(&g, &store, &m, &Fixture(5), &mut rng).unwrap();
        let mut tape = Tape::<f32>::new();
        let v = action_log_prob(&mut tape, &store, &m, &g, &a).unwrap();
        assert!((tape.value(v).data[0] as f64 - a.log_prob).abs() < 1e-5);
    }
}

#[test]
fn greedy_picks_the_mode() {
    let m = model(mixed_schemas());
    let store = params(&m, 13, 1.5);
    let g = graph(4, 14);
    let pre = Fixture(4);
    let best = enumerate_actions(&pre, &m.schemas)
        .unwrap()
        .into_iter()
        .map(|a| (exact_log_prob(&m, &store, &g, &a), a))
        .collect::<Vec<_>>();
    let batch = BatchedGraph::union(vec![g.clone()]).unwrap();
    let mut tape = Tape::new();
    let enc = encode(&mut tape, &store, &m.gnn, &batch).unwrap();
    let pres: Vec<&dyn Preconditions> = vec![&pre];
    let out = decode::<f64, _, ChaCha8Rng>(
        &mut tape,
        &store,
        &m,
        &batch,
        enc,
        DecodeMode::Sample {
            pre: &pres,
            rngs: &mut [],
            greedy: true,
        },
    )
    .unwrap();
    let chosen = &out.choices[0];
    // Greedy decoding maximizes level by level, so each level's pick is its own argmax.
    let same_schema: Vec<_> = best.iter().filter(|(_, a)| a.action_id == chosen.action_id).collect();
    let schema_mass: f64 = same_schema.iter().map(|(lp, _)| lp.exp()).sum();
    for id in 0..m.schemas.len() {
        let mass: f64 = best.iter().filter(|(_, a)| a.action_id == id).map(|(lp, _)| lp.exp()).sum();
        assert!(mass <= schema_mass + 1e-12);
    }
}

#[test]
fn single_elementary_schema_is_certain() {
    let m = model(vec![ActionSchema::new(0, "noop", ActionKind::Elementary)]);
    let store = params(&m, 15, 1.0);
    let g = graph(3, 16);
    let a = sample_action::<f64, _, _>(&g, &store, &m, &Unconstrained(3), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a.log_prob, 0.0);
    assert_eq!(a.log_action_space, 0.0);
}

#[test]
fn no_admissible_action_is_an_error() {
    struct Nothing;
    impl Preconditions for Nothing {
        fn num_nodes(&self) -> usize {
            3
        }
        fn parameter_mask(&self, _: &ActionSchema, _: &[usize]) -> Vec<bool> {
            vec![false; 3]
        }
    }
    let m = model(vec![ActionSchema::new(0, "mark", ActionKind::Parametric { arity: 1 })]);
    let store = params(&m, 17, 1.0);
    let g = graph(3, 18);
    let r = sample_action::<f64, _, _>(&g, &store, &m, &Nothing, &mut ChaCha8Rng::seed_from_u64(1));
    assert!(matches!(r, Err(Error::NoValidAction)));
}

#[test]
fn replay_rejects_inconsistent_action() {
    let m = model(mixed_schemas());
    let store = params(&m, 19, 1.0);
    let g = graph(4, 20);
    let mut a = ActionChoice::grounded(&Fixture(4), &m.schemas, 2, vec![1], vec![]).unwrap();
    a.params = vec![2];
    let batch = BatchedGraph::union(vec![g]).unwrap();
    let mut tape = Tape::new();
    let enc = encode(&mut tape, &store, &m.gnn, &batch).unwrap();
    let r = replay(&mut tape, &store, &m, &batch, enc, &[a]);
    assert!(matches!(r, Err(Error::Replay { index: 0, .. })), "{r:?}");
}

#[test]
fn decoder_gradients_match_finite_differences() {
    let m = model(vec![
        ActionSchema::new(0, "pair", ActionKind::Parametric { arity: 2 }),
        ActionSchema::new(1, "reset", ActionKind::Set),
    ]);
    let store = params(&m, 21, 0.8);
    let g = graph(4, 22);
    let pre = Unconstrained(4);
    let pair = ActionChoice::grounded(&pre, &m.schemas, 0, vec![2, 1], vec![]).unwrap();
    let set = ActionChoice::grounded(&pre, &m.schemas, 1, vec![], vec![0, 3]).unwrap();
    for a in [pair, set] {
        let report = grad_check(
            &store,
            |tape, p| {
                let lp = action_log_prob(tape, p, &m, &g, &a)?;
                let batch = BatchedGraph::union(vec![g.clone()])?;
                let enc = encode(tape, p, &m.gnn, &batch)?;
                let v = relrl_core::policy::value(tape, p, enc)?;
                tape.add(lp, v)
            },
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", &report.failures[..report.failures.len().min(5)]);
    }
}
