use itertools::Itertools;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rnco::datagen::gen_instance;
use rnco::env::{replay, Instance, Plan, ProblemKind, Solution, State};
use rnco::model::{EncoderConfig, Model, ModelConfig};
use rnco::numerics::{grad_check, NumericsError};
use rnco::oracle::{exact_tsp_cycle, extract_trajectory, solve_exact};
use rnco::search::{
    beam_search, greedy_rollout, sample_subproblem_cvrp, sample_subproblems_tsp, splice_cvrp, splice_tsp,
};
use rnco::train::loss_recurrent_segment;

fn kind_of(i: u8) -> ProblemKind {
    [ProblemKind::Tsp, ProblemKind::Cvrp, ProblemKind::Op][i as usize % 3]
}

fn instance(kind: ProblemKind, n: usize, seed: u64) -> Instance {
    let cap = (kind == ProblemKind::Cvrp).then_some(15);
    gen_instance(kind, n, cap, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn noisy_model(kind: ProblemKind, seed: u64, scale: f64) -> Model {
    let cfg = ModelConfig {
        kind,
        base: EncoderConfig::new(2, 16, 32, 2),
        recurrent: Some(EncoderConfig::new(1, 8, 16, 2)),
    };
    let mut m = Model::<f32>::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for n in m.params.names().to_vec() {
        for v in m.params.get_mut(&n).unwrap().data_mut() {
            *v += rng.gen_range(-scale..scale) as f32;
        }
    }
    m
}

fn random_finish<'a, R: Rng>(mut s: State<'a>, rng: &mut R) -> State<'a> {
    while !s.is_done() {
        let mask = s.feasible_mask().unwrap();
        let feas: Vec<usize> = (0..mask.len()).filter(|&a| mask[a]).collect();
        s.apply(*feas.choose(rng).unwrap()).unwrap();
    }
    s
}

/// Relabels the non-depot nodes of `inst` by `perm` (node `c` becomes
/// `perm[c - 1]`).
fn relabel(inst: &Instance, perm: &[usize]) -> Instance {
    let n = inst.num_nodes();
    let mut coords = vec![inst.coords[0]; n];
    let mut demands = vec![0; n];
    let mut prizes = vec![0; n];
    for c in 1..n {
        let to = perm[c - 1];
        coords[to] = inst.coords[c];
        if !inst.demands.is_empty() {
            demands[to] = inst.demands[c];
        }
        if !inst.prizes.is_empty() {
            prizes[to] = inst.prizes[c];
        }
    }
    match inst.kind {
        ProblemKind::Tsp => Instance::tsp(coords),
        ProblemKind::Cvrp => Instance::cvrp(coords, &demands[1..], inst.capacity),
        ProblemKind::Op => Instance::op(coords, &prizes[1..], inst.distance_limit),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn exact_tsp_matches_enumeration(n in 3usize..=7, seed in any::<u64>()) {
        let inst = instance(ProblemKind::Tsp, n, seed);
        let (tour, cost) = exact_tsp_cycle(&inst.coords).unwrap();
        prop_assert_eq!(tour[0], 0);
        let brute = (1..n)
            .permutations(n - 1)
            .map(|p| {
                let mut t = vec![0];
                t.extend(p);
                inst.path_length(&t) + inst.dist(t[n - 1], 0)
            })
            .fold(f64::INFINITY, f64::min);
        prop_assert!((cost - brute).abs() < 1e-9, "{} vs {}", cost, brute);
    }

    #[test]
    fn expert_trajectory_replays_to_the_oracle_objective(k in 0u8..3, n in 4usize..=9, seed in any::<u64>()) {
        let inst = instance(kind_of(k), n, seed);
        let sol = solve_exact(&inst).unwrap();
        let traj = extract_trajectory(&inst, &sol).unwrap();
        let again = replay(&inst, &traj.actions).unwrap();
        prop_assert!((again.objective - sol.objective).abs() < 1e-9);
        prop_assert!((traj.objective - sol.objective).abs() < 1e-9);
    }

    #[test]
    fn oracle_objective_ignores_node_labels(k in 0u8..3, n in 4usize..=8, seed in any::<u64>()) {
        let inst = instance(kind_of(k), n, seed);
        let mut perm: Vec<usize> = (1..inst.num_nodes()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)));
        let moved = relabel(&inst, &perm);
        let a = solve_exact(&inst).unwrap();
        let b = solve_exact(&moved).unwrap();
        prop_assert!((a.objective - b.objective).abs() < 1e-9, "{} vs {}", a.objective, b.objective);
        // the original plan, relabelled, is optimal for the moved instance
        let map = |c: usize| if c == 0 { 0 } else { perm[c - 1] };
        let plan = match &a.plan {
            Plan::Tsp { tour } => {
                let mut t: Vec<usize> = tour.iter().map(|&c| map(c)).collect();
                let z = t.iter().position(|&c| c == 0).unwrap();
                t.rotate_left(z);
                Plan::Tsp { tour: t }
            }
            Plan::Cvrp { routes } => Plan::Cvrp { routes: routes.iter().map(|r| r.iter().map(|&c| map(c)).collect()).collect() },
            Plan::Op { path } => Plan::Op { path: path.iter().map(|&c| map(c)).collect() },
        };
        let moved_sol = Solution::new(&moved, plan).unwrap();
        prop_assert!((moved_sol.objective - a.objective).abs() < 1e-9);
    }

    #[test]
    fn width_one_beam_is_greedy(k in 0u8..3, n in 5usize..=12, seed in any::<u64>(), interval in 1usize..=4) {
        let kind = kind_of(k);
        let inst = instance(kind, n, seed);
        let m = noisy_model(kind, seed % 7, 0.3);
        let g = greedy_rollout(&m, &inst, interval).unwrap();
        let b = beam_search(&m, &inst, interval, 1).unwrap();
        prop_assert_eq!(g.actions, b.actions);
        prop_assert_eq!(g.solution, b.solution);
    }

    #[test]
    fn tsp_splice_keeps_a_tour_and_the_cost_delta(n in 6usize..=30, seed in any::<u64>(), sub in 4usize..=10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = instance(ProblemKind::Tsp, n, seed);
        let mut tour: Vec<usize> = (1..n).collect();
        tour.shuffle(&mut rng);
        tour.insert(0, 0);
        let x = Solution::new(&inst, Plan::Tsp { tour: tour.clone() }).unwrap();
        let sub = sub.min(n);
        for seg in sample_subproblems_tsp(&tour, sub, &mut rng).unwrap() {
            let k = seg.nodes.len();
            let s = State::path_tsp(&inst, seg.nodes[0], seg.nodes[1..k - 1].to_vec(), seg.nodes[k - 1]);
            let done = random_finish(s, &mut rng);
            let new = splice_tsp(&tour, &seg, done.trail());
            let y = Solution::new(&inst, Plan::Tsp { tour: new }).unwrap();
            let delta = inst.path_length(&seg.nodes) - inst.path_length(done.trail());
            prop_assert!((x.objective - y.objective - delta).abs() < 1e-9);
        }
    }

    #[test]
    fn cvrp_splice_keeps_feasibility_and_the_cost_delta(n in 5usize..=25, seed in any::<u64>(), sub in 4usize..=12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = instance(ProblemKind::Cvrp, n, seed);
        let x = random_finish(State::initial(&inst), &mut rng).solution().unwrap();
        let Plan::Cvrp { routes } = &x.plan else { unreachable!() };
        if let Some(w) = sample_subproblem_cvrp(&inst, routes, sub, &mut rng) {
            prop_assert_eq!(*w.nodes().last().unwrap(), 0);
            let s = State::cvrp_from(&inst, w.start_node(), w.customers(), w.capacity_left);
            let done = random_finish(s, &mut rng);
            let y = Solution::new(&inst, Plan::Cvrp { routes: splice_cvrp(&w, done.trail()) }).unwrap();
            let delta = inst.path_length(w.nodes()) - inst.path_length(done.trail());
            prop_assert!((x.objective - y.objective - delta).abs() < 1e-9);
        }
    }
}

#[test]
fn long_recurrent_chain_stays_finite() {
    let inst = instance(ProblemKind::Tsp, 201, 3);
    let m = noisy_model(ProblemKind::Tsp, 3, 0.1);
    let mut s = State::initial(&inst);
    let mut emb = m.base_embed(&s).unwrap();
    let mut steps = 0;
    while !s.is_done() {
        if steps > 0 {
            emb = m.recurrent_embed(&emb, &s).unwrap();
        }
        assert!(emb.h.is_finite(), "non-finite embedding at step {steps}");
        assert!(emb.h.max_abs() < 1e3, "embedding blew up at step {steps}: {}", emb.h.max_abs());
        let mask = s.feasible_mask().unwrap();
        let p = m.probs(&emb.h, &mask).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        let a = (0..p.len()).filter(|&a| mask[a]).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
        s.apply(a).unwrap();
        steps += 1;
    }
    assert_eq!(steps, 200);
    // the same chain through the search code
    let r = greedy_rollout(&m, &inst, 1000).unwrap();
    assert_eq!((r.calls.base, r.calls.recurrent), (1, 199));
    assert!(r.solution.objective.is_finite());
}

#[test]
fn bptt_gradient_through_three_recurrent_steps() {
    for (i, kind) in [ProblemKind::Tsp, ProblemKind::Cvrp, ProblemKind::Op].into_iter().enumerate() {
        let inst = instance(kind, 8, 40 + i as u64);
        let sol = solve_exact(&inst).unwrap();
        let traj = extract_trajectory(&inst, &sol).unwrap();
        let cfg = ModelConfig {
            kind,
            base: EncoderConfig::new(1, 8, 12, 2),
            recurrent: Some(EncoderConfig::new(1, 4, 8, 2)),
        };
        let mut m = Model::<f64>::init(cfg.clone(), i as u64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        for n in m.params.names().to_vec() {
            m.params.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        }
        let r = grad_check(&mut m.params, 1e-3, |g| {
            loss_recurrent_segment(g, &cfg, &inst, &traj, 0, 3).map_err(|e| NumericsError::Contract(e.to_string()))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{kind}: {r:?}");
        assert!(r.checked > 0);
    }
}
