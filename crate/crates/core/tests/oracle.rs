#![allow(clippy::needless_range_loop)]
use budgetcomm::env::{Difficulty, TrafficJunction, TrafficJunctionConfig, BRAKE, GAS};
use budgetcomm::oracle::{evaluate_plan, solve, verify_memoization, OracleConfig};
use budgetcomm::rng;
use budgetcomm::Error;

fn toy(n_max: usize, p: f64, steps: usize) -> TrafficJunctionConfig {
    TrafficJunctionConfig {
        difficulty: Difficulty::Easy,
        grid: 3,
        n_max,
        p_arrive: p,
        step_penalty: 0.01,
        collision_penalty: 10.0,
        max_steps: steps,
        gamma: 1.0,
    }
}

/// Per-car bookkeeping of the plan: (position, brakes so far at it).
#[derive(Clone, Copy)]
struct Driver {
    pos: usize,
    waited: usize,
}

fn act(d: &mut Driver, waits: &[usize]) -> usize {
    if d.waited < waits[d.pos] {
        d.waited += 1;
        BRAKE
    } else {
        d.pos += 1;
        d.waited = 0;
        GAS
    }
}

/// Arrive or not at `entry` and every later one, then step the real
/// environment; returns the probability of finishing collision-free.
fn brute(
    env: &TrafficJunction,
    drivers: &[Option<Driver>],
    waits: &[Vec<usize>],
    entry: usize,
    p: f64,
    rng_seed: u64,
) -> f64 {
    let n_entries = env.routes().len();
    if entry == n_entries {
        let mut env = env.clone();
        let mut drivers = drivers.to_vec();
        let mut actions = vec![GAS; drivers.len()];
        for (slot, d) in drivers.iter_mut().enumerate() {
            if let (Some(d), Some((route, _))) = (d.as_mut(), env.car(slot)) {
                actions[slot] = act(d, &waits[route]);
            }
        }
        let mut r = rng::seeded(rng_seed);
        let res = env.step(&actions, &mut r).unwrap();
        if res.info.collisions > 0 {
            return 0.0;
        }
        for (slot, d) in drivers.iter_mut().enumerate() {
            if !res.alive[slot] {
                *d = None;
            }
        }
        if res.done {
            return 1.0;
        }
        return brute(&env, &drivers, waits, 0, p, rng_seed);
    }
    let stay = brute(env, drivers, waits, entry + 1, p, rng_seed);
    let route = entry;
    let first = env.routes()[route].cells[0];
    let occupied = (0..drivers.len()).any(|s| env.car(s).is_some_and(|(r, pos)| env.routes()[r].cells[pos] == first));
    let free = (0..drivers.len()).find(|&s| env.car(s).is_none());
    let go = match free {
        Some(slot) if !occupied => {
            let mut env = env.clone();
            env.place_car(slot, route, 0, 0).unwrap();
            let mut drivers = drivers.to_vec();
            drivers[slot] = Some(Driver { pos: 0, waited: 0 });
            brute(&env, &drivers, waits, entry + 1, p, rng_seed)
        }
        _ => stay,
    };
    (1.0 - p) * stay + p * go
}

fn brute_success(cfg: &TrafficJunctionConfig, waits: &[Vec<usize>]) -> f64 {
    let mut quiet = cfg.clone();
    quiet.p_arrive = 0.0;
    let mut env = TrafficJunction::new(quiet).unwrap();
    env.reset(&mut rng::seeded(0));
    brute(&env, &vec![None; cfg.n_max], waits, 0, cfg.p_arrive, 0)
}

fn all_waits(len: usize, max: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|w| {
                (0..=max).map(move |x| {
                    let mut w = w.clone();
                    w.push(x);
                    w
                })
            })
            .collect();
    }
    out
}

#[test]
fn toy_junction_matches_brute_force_environment() {
    let env = toy(2, 0.5, 5);
    let cfg = OracleConfig::new(env.clone());
    for a in all_waits(3, 1) {
        for b in all_waits(3, 1) {
            let plan = vec![a.clone(), b.clone()];
            let exact = evaluate_plan(&cfg, &plan, true).unwrap().success;
            let plain = evaluate_plan(&cfg, &plan, false).unwrap().success;
            let brute = brute_success(&env, &plan);
            assert_eq!(exact, plain);
            assert!((exact - brute).abs() < 1e-12, "{plan:?}: {exact} vs {brute}");
        }
    }
}

#[test]
fn memoized_equals_plain_search() {
    let mut cfg = OracleConfig::new(toy(2, 0.4, 6));
    assert!(verify_memoization(&cfg).unwrap());
    cfg.history = 1;
    assert!(verify_memoization(&cfg).unwrap());
    cfg.env.p_arrive = 0.0;
    assert!(verify_memoization(&cfg).unwrap());
    let big = OracleConfig::new(TrafficJunctionConfig::easy());
    assert!(matches!(verify_memoization(&big), Err(Error::InstanceTooLarge(_))));
}

#[test]
fn trivial_instances_always_succeed() {
    let single = solve(&OracleConfig::new(toy(1, 0.7, 8))).unwrap();
    assert_eq!(single.success, 1.0);
    assert_eq!(single.collision_rate, 0.0);
    let mut empty = TrafficJunctionConfig::easy();
    empty.p_arrive = 0.0;
    let r = solve(&OracleConfig::new(empty)).unwrap();
    assert_eq!(r.success, 1.0);
    assert_eq!(r.b_lb, 0.0);
}

#[test]
fn toy_optimum_beats_every_plan_and_is_pure() {
    let env = toy(2, 0.5, 6);
    let cfg = OracleConfig::new(env.clone());
    let best = solve(&cfg).unwrap();
    assert_eq!(best.joint_plans, 64);
    let mut top: f64 = 0.0;
    for a in all_waits(3, 1) {
        for b in all_waits(3, 1) {
            top = top.max(brute_success(&env, &[a.clone(), b]));
        }
    }
    assert!((best.success - top).abs() < 1e-12);
    assert!((best.success + best.collision_rate - 1.0).abs() < 1e-15);
    assert_eq!(best.b_lb, best.collision_rate);
    assert!(best.cache_hits > 0);
    assert_eq!(solve(&cfg).unwrap(), best);
}

#[test]
fn monte_carlo_plays_agree_with_exact_value() {
    let env_cfg = TrafficJunctionConfig::easy();
    let cfg = OracleConfig::new(env_cfg.clone());
    let plan = vec![vec![0, 1, 0, 0, 0, 0, 0], vec![1, 1, 1, 0, 0, 0, 0]];
    let exact = evaluate_plan(&cfg, &plan, true).unwrap().success;
    let mut env = TrafficJunction::new(env_cfg).unwrap();
    let mut r = rng::seeded(11);
    let episodes = 4000;
    let mut ok = 0;
    for _ in 0..episodes {
        let mut res = env.reset(&mut r);
        let mut drivers: Vec<Option<Driver>> = vec![None; 5];
        let mut clean = true;
        while !res.done {
            let mut actions = vec![GAS; 5];
            for slot in 0..5 {
                if res.spawned[slot] {
                    drivers[slot] = Some(Driver { pos: 0, waited: 0 });
                }
                if let (Some(d), Some((route, _))) = (drivers[slot].as_mut(), env.car(slot)) {
                    actions[slot] = act(d, &plan[route]);
                }
            }
            res = env.step(&actions, &mut r).unwrap();
            clean &= res.info.collisions == 0;
            for slot in 0..5 {
                if !res.alive[slot] {
                    drivers[slot] = None;
                }
            }
        }
        ok += clean as usize;
    }
    let mc = ok as f64 / episodes as f64;
    let se = (exact * (1.0 - exact) / episodes as f64).sqrt();
    assert!((mc - exact).abs() < 4.0 * se + 1e-9, "mc {mc} exact {exact}");
}

#[test]
fn over_cap_is_an_error() {
    let mut cfg = OracleConfig::new(TrafficJunctionConfig::easy());
    cfg.history = 2;
    assert!(matches!(solve(&cfg), Err(Error::InstanceTooLarge(_))));
    let medium = OracleConfig::new(TrafficJunctionConfig::medium());
    assert!(matches!(solve(&medium), Err(Error::InstanceTooLarge(_))));
}

#[test]
fn bad_plan_shapes_are_rejected() {
    let cfg = OracleConfig::new(toy(2, 0.5, 4));
    assert!(evaluate_plan(&cfg, &[vec![0, 0, 0]], true).is_err());
    assert!(evaluate_plan(&cfg, &[vec![0, 0, 0], vec![0, 5, 0]], true).is_err());
}

#[test]
fn pruned_solve_equals_exhaustive_maximum() {
    let mut env = toy(3, 0.4, 10);
    env.grid = 5;
    let cfg = OracleConfig::new(env);
    let best = solve(&cfg).unwrap();
    let mut top = (f64::MIN, vec![]);
    for a in all_waits(5, 1) {
        for b in all_waits(5, 1) {
            let plan = vec![a.clone(), b];
            let v = evaluate_plan(&cfg, &plan, true).unwrap().success;
            if v > top.0 {
                top = (v, plan);
            }
        }
    }
    assert_eq!(best.joint_plans, 1024);
    assert!((best.success - top.0).abs() < 1e-12);
    let chosen: Vec<Vec<usize>> = best.policy.iter().map(|p| p.waits.clone()).collect();
    let again = evaluate_plan(&cfg, &chosen, true).unwrap().success;
    assert!((again - best.success).abs() < 1e-12);
}
