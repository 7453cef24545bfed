mod common;

use std::collections::BTreeMap;

use compose_rl::geometry::{Pose, PoseRegion};
use compose_rl::hlm::{build_hlm, reach_probability, ParamVector, Subtask, TaskSpec};
use compose_rl::policy::codec::PolicyFile;
use compose_rl::policy::tile::{TileCoder, TileQPolicy};
use compose_rl::policy::{GoToPose, PolicyHandle};
use compose_rl::sim::{step, Action, ActionLimits, EnvironmentMap, FidelityConfig, Obstacle, Rect, RobotState};
use compose_rl::synthesis::{allocate_path_probs, enumerate_paths, path_policy, synthesize, SynthesisProblem};
use compose_rl::verify::lower_confidence_bound;
use proptest::prelude::*;

use common::{clopper_pearson_oracle, random_hlm, random_meta_policy, random_params};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn path_policy_reachability_is_path_product(seed in any::<u64>()) {
        let hlm = random_hlm(seed, 8, 10);
        let params = random_params(&hlm, seed ^ 1);
        for path in enumerate_paths(&hlm).unwrap_or_default() {
            let mu = path_policy(&hlm, &path);
            let product: f64 = path.iter().map(|c| params.get(c).unwrap()).product();
            let reach = reach_probability(&hlm, &mu, &params).unwrap();
            prop_assert!((reach - product).abs() <= 1e-12, "{reach} vs {product}");
        }
    }

    #[test]
    fn reachability_monotone_in_params(seed in any::<u64>(), bump in 0.0f64..1.0) {
        let hlm = random_hlm(seed, 8, 10);
        let mu = random_meta_policy(&hlm, seed ^ 2);
        let low = random_params(&hlm, seed ^ 3);
        let high: ParamVector = low
            .values
            .iter()
            .map(|(c, p)| (c.clone(), p + bump * (1.0 - p)))
            .collect();
        let a = reach_probability(&hlm, &mu, &low).unwrap();
        let b = reach_probability(&hlm, &mu, &high).unwrap();
        prop_assert!(b >= a - 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn allocation_respects_caps_and_target(
        caps in prop::collection::vec(0.3f64..=1.0, 1..8),
        target in 0.01f64..=1.0,
    ) {
        let n = caps.len();
        match allocate_path_probs(n, target, &caps) {
            Ok(p) => {
                prop_assert_eq!(p.len(), n);
                for (v, c) in p.iter().zip(&caps) {
                    prop_assert!(*v >= 0.0 && *v <= *c);
                }
                prop_assert!(p.iter().product::<f64>() >= target);
            }
            Err(_) => prop_assert!(caps.iter().product::<f64>() < target),
        }
    }

    #[test]
    fn tighter_caps_never_lower_the_objective(
        seed in any::<u64>(),
        target in 0.5f64..0.99,
        cap in 0.0f64..1.0,
    ) {
        let hlm = random_hlm(seed, 8, 10);
        let loose = SynthesisProblem::new(hlm.clone(), target);
        let Ok(first) = synthesize(&loose) else { return Ok(()) };
        let Some(c) = first.path.first().cloned() else { return Ok(()) };
        let tight = SynthesisProblem::new(hlm, target).with_caps(BTreeMap::from([(c, cap)]));
        if let Ok(second) = synthesize(&tight) {
            prop_assert!(second.objective >= first.objective - 1e-12);
            prop_assert!(second.achieved_bound >= target - 1e-12);
        }
    }

    #[test]
    fn build_hlm_ignores_subtask_order(order in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle()) {
        let subtasks = fork_subtasks();
        let permuted: Vec<Subtask> = order.iter().map(|i| subtasks[*i].clone()).collect();
        let task = fork_task();
        prop_assert_eq!(build_hlm(&subtasks, &task).unwrap(), build_hlm(&permuted, &task).unwrap());
    }

    #[test]
    fn clamp_lands_inside_limits(v in prop_oneof![any::<f64>(), -5.0f64..5.0], w in prop_oneof![any::<f64>(), -5.0f64..5.0]) {
        let lim = ActionLimits::default();
        let (out, changed) = lim.clamp(Action::new(v, w));
        prop_assert!(lim.contains(&out));
        if lim.contains(&Action::new(v, w)) {
            prop_assert!(!changed);
            prop_assert_eq!(out, Action::new(v, w));
        }
    }

    #[test]
    fn policy_files_round_trip(policy in policy_strategy(), fingerprint in any::<u64>()) {
        let file = PolicyFile { fingerprint, policy };
        let bytes = file.encode();
        let back = PolicyFile::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode(), bytes);
        prop_assert_eq!(back, file);
    }

    #[test]
    fn policy_decoder_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = PolicyFile::decode(&bytes);
    }

    #[test]
    fn reported_collisions_cover_sampled_overlaps(
        ox in -3.0f64..3.0, oy in -3.0f64..3.0, size in 0.2f64..2.0, circle in any::<bool>(),
        x in -4.0f64..4.0, y in -4.0f64..4.0, r in 0.1f64..1.0,
    ) {
        let obstacle = if circle {
            Obstacle::Circle { x: ox, y: oy, radius: size }
        } else {
            Obstacle::Rect { min_x: ox, min_y: oy, max_x: ox + size, max_y: oy + 0.5 * size }
        };
        let inside_obstacle = |px: f64, py: f64| match obstacle {
            Obstacle::Circle { x, y, radius } => (px - x).hypot(py - y) < radius,
            Obstacle::Rect { min_x, min_y, max_x, max_y } => px > min_x && px < max_x && py > min_y && py < max_y,
        };
        let k = 40;
        let mut sampled = false;
        for i in 0..=k {
            for j in 0..=k {
                let px = x - r + 2.0 * r * i as f64 / k as f64;
                let py = y - r + 2.0 * r * j as f64 / k as f64;
                if (px - x).hypot(py - y) < r && inside_obstacle(px, py) {
                    sampled = true;
                }
            }
        }
        if sampled {
            prop_assert!(obstacle.overlaps_disc(x, y, r));
        }
    }

    #[test]
    fn step_never_ends_inside_an_obstacle(v in 0.0f64..2.0, w in -1.0f64..1.0, heading in -3.0f64..3.0) {
        let mut env = EnvironmentMap::open(Rect { min_x: -5.0, min_y: -5.0, max_x: 5.0, max_y: 5.0 }, 0.3);
        env.obstacles.push(Obstacle::Circle { x: 0.6, y: 0.0, radius: 0.25 });
        let mut s = RobotState::at_rest(Pose::new(0.0, 0.0, heading));
        let cfg = FidelityConfig::low_fidelity();
        for _ in 0..40 {
            let out = step(&s, Action::new(v, w), &env, &cfg);
            prop_assert!(!env.collides(out.state.x, out.state.y));
            s = out.state;
        }
    }
}

#[test]
fn lower_bound_matches_oracle_and_is_monotone() {
    for n in 1..=200u64 {
        let mut prev = -1.0;
        for k in 0..=n {
            let v = lower_confidence_bound(k, n, 0.05).unwrap();
            assert!(v >= prev, "not monotone at k={k}, n={n}");
            assert!(v <= k as f64 / n as f64 + 1e-15);
            prev = v;
        }
    }
    for (k, n) in [(1, 10), (5, 10), (50, 100), (98, 100), (150, 200), (199, 200)] {
        let ours = lower_confidence_bound(k, n, 0.05).unwrap();
        let oracle = clopper_pearson_oracle(k, n, 0.05);
        assert!((ours - oracle).abs() < 1e-9, "k={k} n={n}: {ours} vs {oracle}");
    }
    // Reference value from an independent arbitrary-precision beta quantile.
    let v = lower_confidence_bound(98, 100, 0.05).unwrap();
    assert!((v - 0.938_380_799_603_959_3).abs() < 1e-9, "{v}");
}

fn fork_subtasks() -> Vec<Subtask> {
    let r = |x, y, rad| PoseRegion::new(x, y, rad, 0.0, 0.4);
    vec![
        Subtask {
            id: "a".into(),
            entry: r(0.0, 0.0, 1.0),
            exit: r(8.0, 0.0, 0.8),
            timeout: 20.0,
        },
        Subtask {
            id: "b".into(),
            entry: r(8.0, 0.0, 1.0),
            exit: r(24.0, 0.0, 0.8),
            timeout: 20.0,
        },
        Subtask {
            id: "c".into(),
            entry: r(8.0, 0.0, 1.0),
            exit: r(16.0, 8.0, 0.8),
            timeout: 20.0,
        },
        Subtask {
            id: "d".into(),
            entry: r(16.0, 8.0, 1.0),
            exit: r(24.0, 0.0, 0.8),
            timeout: 20.0,
        },
        Subtask {
            id: "e".into(),
            entry: r(16.0, 8.0, 1.0),
            exit: r(16.0, 16.0, 0.8),
            timeout: 20.0,
        },
    ]
}

fn fork_task() -> TaskSpec {
    TaskSpec {
        initial_pose: Pose::new(0.0, 0.0, 0.0),
        target: PoseRegion::new(24.0, 0.0, 0.8, 0.0, 0.4),
        min_success_probability: 0.9,
    }
}

fn policy_strategy() -> impl Strategy<Value = PolicyHandle> {
    let finite = prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::SUBNORMAL;
    let constant = (finite, finite).prop_map(|(v, w)| PolicyHandle::Constant(Action::new(v, w)));
    let go = (-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0).prop_map(|(k_rho, k_alpha, k_beta)| {
        PolicyHandle::GoToPose(GoToPose {
            k_rho,
            k_alpha,
            k_beta,
            limits: ActionLimits::default(),
        })
    });
    let tile = (1u32..3, 1u32..4, 1usize..4, any::<u64>()).prop_map(|(tilings, bins, n_actions, seed)| {
        let coder = TileCoder {
            tilings,
            bins: [bins, bins + 1, 2],
            lo: [-1.0, -2.0, -3.0],
            hi: [1.0, 2.0, 3.0],
        };
        let actions = (0..n_actions)
            .map(|i| Action::new(i as f64 * 0.5, -0.25 * i as f64))
            .collect();
        let mut p = TileQPolicy::new(coder, actions, ActionLimits::default());
        let mut x = seed;
        for w in &mut p.weights {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *w = (x >> 11) as f64 / (1u64 << 53) as f64 * 200.0 - 100.0;
        }
        PolicyHandle::TileQ(p)
    });
    let leaf = prop_oneof![constant, go, tile];
    (leaf, 0usize..4, 0.0f64..=1.0).prop_map(|(mut p, depth, q)| {
        for _ in 0..depth {
            p = p.with_failure_probability(q);
        }
        p
    })
}
