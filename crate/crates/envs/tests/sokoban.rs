use std::collections::{HashSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relrl_envs::sokoban::{generate_level, Dir, Elementary, MacroKind, Sokoban};

fn random_macro<R: Rng>(s: &Sokoban, rng: &mut R) -> (MacroKind, usize) {
    let kind = MacroKind::from_schema(rng.gen_range(0..5)).unwrap();
    // Bias toward box cells so that most pushes are feasible.
    let node = if matches!(kind, MacroKind::Push(_)) && rng.gen_bool(0.7) {
        let boxed: Vec<usize> = (0..s.num_nodes()).filter(|&n| s.has_box(s.node_cell(n))).collect();
        boxed[rng.gen_range(0..boxed.len())]
    } else {
        rng.gen_range(0..s.num_nodes())
    };
    (kind, node)
}

#[test]
fn macros_equal_their_elementary_expansion() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut feasible = 0;
    let mut s = generate_level(6, 6, 1, &mut rng).unwrap();
    for i in 0..1_000 {
        if i % 25 == 0 {
            s = if i % 50 == 0 {
                generate_level(6, 6, 1, &mut rng).unwrap()
            } else {
                generate_level(10, 10, 4, &mut rng).unwrap()
            };
        }
        let (kind, node) = random_macro(&s, &mut rng);
        let mut folded = s.clone();
        let out = s.macro_step(kind, node);
        let mut reward = 0.0;
        let mut terminal = false;
        for &e in &out.executed {
            let (r, t) = folded.elementary_step(e);
            reward += r;
            terminal = t;
            if t {
                break;
            }
        }
        assert_eq!(folded, s, "state after {kind:?}({node})");
        assert!((reward - out.reward).abs() < 1e-9, "reward {reward} vs {}", out.reward);
        assert_eq!(terminal, out.terminal);
        if out.executed != [Elementary::Noop] {
            feasible += 1;
        }
        if out.terminal {
            s = generate_level(6, 6, 1, &mut rng).unwrap();
        }
    }
    assert!(feasible > 200, "only {feasible} feasible macros exercised");
}

#[test]
fn walking_never_moves_boxes() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let mut s = generate_level(10, 10, 4, &mut rng).unwrap();
        let boxes = s.boxes().to_vec();
        let node = rng.gen_range(0..s.num_nodes());
        if let Some(plan) = s.plan_move_to(s.node_cell(node)) {
            for d in plan {
                s.elementary_step(Elementary::Move(d));
                assert_eq!(s.boxes(), &boxes[..]);
            }
            assert_eq!(s.player(), s.node_cell(node));
        }
    }
}

#[test]
fn planner_finds_shortest_paths() {
    let s = Sokoban::parse("#######\n#@    #\n# ### #\n#   $.#\n#######\n").unwrap();
    let target = 3 * 7 + 1;
    assert_eq!(s.plan_move_to(target).unwrap(), vec![Dir::Down, Dir::Down]);
    // the box blocks the bottom corridor, so the goal is reached round the top
    assert_eq!(s.plan_move_to(3 * 7 + 5).unwrap().len(), 6);
    assert_eq!(s.plan_move_to(3 * 7 + 3).unwrap().len(), 4);
}

/// Breadth-first search over `(player, boxes)` with elementary moves.
fn solvable(start: &Sokoban, budget: usize) -> bool {
    let key = |s: &Sokoban| (s.player(), s.boxes().to_vec());
    let mut seen = HashSet::from([key(start)]);
    let mut queue = VecDeque::from([start.clone()]);
    while let Some(s) = queue.pop_front() {
        for d in Dir::ALL {
            let mut t = s.clone();
            if t.elementary_step(Elementary::Move(d)).1 {
                return true;
            }
            if seen.insert(key(&t)) {
                assert!(seen.len() < budget, "search budget exhausted");
                queue.push_back(t);
            }
        }
    }
    false
}

#[test]
fn generated_levels_hold_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..1_000 {
        let s = generate_level(10, 10, 4, &mut rng).unwrap();
        let cells = s.width() * s.height();
        let boxes = (0..cells).filter(|&c| s.has_box(c)).count();
        let goals = (0..cells).filter(|&c| s.is_goal(c)).count();
        assert_eq!((boxes, goals), (4, 4));
        assert!(!s.is_wall(s.player()) && !s.has_box(s.player()));
        assert!((0..cells).all(|c| !(s.is_wall(c) && s.has_box(c))));
        for c in 0..s.width() {
            assert!(s.is_wall(c) && s.is_wall(cells - 1 - c));
        }
        assert!(!s.is_solved());
    }
}

#[test]
fn generated_small_levels_are_solvable() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let s = generate_level(6, 6, 1, &mut rng).unwrap();
        assert!(solvable(&s, 10_000), "unsolvable level:\n{}", s.to_text());
    }
}

#[test]
fn generator_rejects_impossible_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(generate_level(4, 4, 3, &mut rng).is_err());
    assert!(generate_level(2, 8, 1, &mut rng).is_err());
}

#[test]
fn boxoban_file_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let levels: Vec<Sokoban> = (0..5).map(|_| generate_level(10, 10, 4, &mut rng).unwrap()).collect();
    let file: String = levels.iter().enumerate().map(|(i, l)| format!("; {i}\n{}\n", l.to_text())).collect();
    let parsed = Sokoban::parse_collection(&file).unwrap();
    assert_eq!(parsed.len(), 5);
    for (a, b) in parsed.iter().zip(&levels) {
        assert_eq!(a.to_text(), b.to_text());
    }
    assert!(Sokoban::parse_collection("; 0\n#####\n#@$ #\n#####\n").is_err());
}
