//! Exact no-communication ceiling for small blind traffic junctions.
//!
//! A car sees only its own route, position and previous action, so under a
//! deterministic policy its whole trajectory is fixed by its route: the
//! policy reduces to a plan of how long to brake at each route position.
//! With an observation window of `h + 1` steps the window stops changing
//! after `h + 1` consecutive brakes at one position; braking again would
//! repeat the same window forever, so a live policy waits at most `h + 1`
//! steps per position.
//!
//! For a joint plan the success probability is computed by expectimax over
//! the arrival chance nodes, memoized on `(t, sorted (route, age))`. The
//! maximum is taken over joint plans, since blind cars must commit to their
//! plan before any arrival is revealed.

use std::collections::HashMap;

use rayon::prelude::*;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::env::{TrafficJunction, TrafficJunctionConfig, BRAKE, GAS};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub env: TrafficJunctionConfig,
    /// Past observations a car remembers besides the current one.
    #[serde(default)]
    pub history: usize,
    /// Joint plans that may be enumerated before giving up.
    #[serde(default = "default_max_plans")]
    pub max_joint_plans: u64,
    /// Search nodes one joint plan may expand before giving up.
    #[serde(default = "default_max_states")]
    pub max_states: u64,
}

fn default_max_plans() -> u64 {
    20_000
}

fn default_max_states() -> u64 {
    5_000_000
}

impl OracleConfig {
    pub fn new(env: TrafficJunctionConfig) -> Self {
        OracleConfig {
            env,
            history: 0,
            max_joint_plans: default_max_plans(),
            max_states: default_max_states(),
        }
    }
}

/// What one route's cars do, by age.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutePlan {
    pub route: usize,
    /// Brakes at each route position before moving on.
    pub waits: Vec<usize>,
    /// Action taken at each age until the car leaves the grid.
    pub actions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub success: f64,
    pub collision_rate: f64,
    pub policy: Vec<RoutePlan>,
    pub joint_plans: u64,
    pub states_expanded: u64,
    pub cache_hits: u64,
    /// Fraction of episodes that cannot succeed without messages.
    pub b_lb: f64,
}

/// Value of one joint plan, with search statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanValue {
    pub success: f64,
    pub states_expanded: u64,
    pub cache_hits: u64,
}

const EXITED: u8 = u8::MAX;

struct Instance {
    cells: Vec<Vec<(usize, usize)>>,
    /// Dense ids of the road cells, per route position.
    cell_ids: Vec<Vec<u8>>,
    entries: Vec<Vec<usize>>,
    n_max: usize,
    p: f64,
    horizon: usize,
}

impl Instance {
    fn new(cfg: &TrafficJunctionConfig) -> Result<Self> {
        let tj = TrafficJunction::new(cfg.clone())?;
        let cells: Vec<_> = tj.routes().iter().map(|r| r.cells.clone()).collect();
        let n_entries = tj.routes().iter().map(|r| r.entry).max().unwrap_or(0) + 1;
        let mut entries = vec![Vec::new(); n_entries];
        for (i, r) in tj.routes().iter().enumerate() {
            entries[r.entry].push(i);
        }
        if cfg.n_max > MAX_CARS || cells.len() > 32 || cfg.max_steps > 126 {
            return Err(Error::InstanceTooLarge(format!(
                "state keys hold at most {MAX_CARS} cars, 32 routes and 126 steps (n_max {}, {} routes, {} steps)",
                cfg.n_max,
                cells.len(),
                cfg.max_steps
            )));
        }
        let mut ids: HashMap<(usize, usize), u8> = HashMap::new();
        let mut cell_ids = Vec::with_capacity(cells.len());
        for route in &cells {
            let mut row = Vec::with_capacity(route.len());
            for c in route {
                let next = ids.len();
                if next >= 128 {
                    return Err(Error::InstanceTooLarge("more than 128 road cells".into()));
                }
                row.push(*ids.entry(*c).or_insert(next as u8));
            }
            cell_ids.push(row);
        }
        Ok(Instance {
            cells,
            cell_ids,
            entries,
            n_max: cfg.n_max,
            p: cfg.p_arrive,
            horizon: cfg.max_steps,
        })
    }
}

/// Route position after each age, `EXITED` once the car has left.
fn positions(waits: &[usize], horizon: usize) -> Vec<u8> {
    let len = waits.len();
    let mut out = Vec::with_capacity(horizon + 1);
    let (mut p, mut waited) = (0usize, 0usize);
    for _ in 0..=horizon {
        out.push(if p >= len { EXITED } else { p as u8 });
        if p >= len {
            continue;
        }
        if waited < waits[p] {
            waited += 1;
        } else {
            p += 1;
            waited = 0;
        }
    }
    out
}

fn actions_of(pos: &[u8]) -> Vec<usize> {
    pos.windows(2)
        .take_while(|w| w[0] != EXITED)
        .map(|w| if w[1] != w[0] { GAS } else { BRAKE })
        .collect()
}

/// Every live plan for a route of `len` cells, deduplicated by what happens
/// within the horizon.
fn route_plans(len: usize, history: usize, horizon: usize) -> Vec<(Vec<usize>, Vec<u8>)> {
    let radix = history + 2;
    let mut seen = HashMap::new();
    let mut out = Vec::new();
    let mut waits = vec![0usize; len];
    loop {
        let pos = positions(&waits, horizon);
        if seen.insert(pos.clone(), ()).is_none() {
            out.push((waits.clone(), pos));
        }
        let mut k = 0;
        loop {
            if k == len {
                return out;
            }
            waits[k] += 1;
            if waits[k] < radix {
                break;
            }
            waits[k] = 0;
            k += 1;
        }
    }
}

const MAX_CARS: usize = 9;

/// Cars packed as `route << 7 | age`, kept sorted.
#[derive(Clone, Copy)]
struct Cars {
    car: [u16; MAX_CARS],
    len: usize,
}

impl Cars {
    const EMPTY: Cars = Cars {
        car: [0; MAX_CARS],
        len: 0,
    };

    fn as_slice(&self) -> &[u16] {
        &self.car[..self.len]
    }

    fn insert(&mut self, c: u16) {
        let mut k = self.len;
        while k > 0 && self.car[k - 1] > c {
            self.car[k] = self.car[k - 1];
            k -= 1;
        }
        self.car[k] = c;
        self.len += 1;
    }

    fn key(&self, t: usize) -> u128 {
        let mut k = t as u128;
        for &c in self.as_slice() {
            k = (k << 12) | c as u128;
        }
        // the car count disambiguates keys of different lengths
        (k << 4) | self.len as u128
    }
}

struct Search<'a> {
    inst: &'a Instance,
    /// Cell id of a car by route and age, `EXITED` once it has left.
    cell: Vec<Vec<u8>>,
    /// Cell id of each route's entry.
    entry_cell: Vec<u8>,
    horizon: usize,
    memo: Option<FxHashMap<u128, f64>>,
    expanded: u64,
    hits: u64,
    max_states: u64,
}

impl Search<'_> {
    fn cell_of(&self, c: u16) -> u8 {
        self.cell[(c >> 7) as usize][(c & 0x7f) as usize]
    }

    /// Probability of no collision from the state just before step `t + 1`.
    fn value(&mut self, t: usize, cars: &Cars) -> Result<f64> {
        if t == self.horizon {
            return Ok(1.0);
        }
        let key = cars.key(t);
        if let Some(v) = self.memo.as_ref().and_then(|m| m.get(&key)) {
            self.hits += 1;
            return Ok(*v);
        }
        self.expanded += 1;
        if self.expanded > self.max_states {
            return Err(Error::InstanceTooLarge(format!(
                "more than {} search states for one joint plan",
                self.max_states
            )));
        }
        let mut next = Cars::EMPTY;
        let mut occupied = 0u128;
        let mut crashed = false;
        for &c in cars.as_slice() {
            let aged = c + 1;
            let id = self.cell_of(aged);
            if id == EXITED {
                continue;
            }
            let bit = 1u128 << id;
            crashed |= occupied & bit != 0;
            occupied |= bit;
            next.car[next.len] = aged;
            next.len += 1;
        }
        let v = if crashed {
            0.0
        } else if t + 1 == self.horizon {
            1.0
        } else {
            self.arrivals(t + 1, next, occupied, 0)?
        };
        if let Some(m) = self.memo.as_mut() {
            m.insert(key, v);
        }
        Ok(v)
    }

    /// Expectation over the arrival draws of entries `e..`, in entry order.
    fn arrivals(&mut self, t: usize, cars: Cars, occupied: u128, e: usize) -> Result<f64> {
        if e == self.inst.entries.len() {
            return self.value(t, &cars);
        }
        let p = self.inst.p;
        let mut v = 0.0;
        let stay = if p < 1.0 || cars.len >= self.inst.n_max {
            Some(self.arrivals(t, cars, occupied, e + 1)?)
        } else {
            None
        };
        if let Some(x) = stay.filter(|_| p < 1.0) {
            v += (1.0 - p) * x;
        }
        if p > 0.0 {
            let n_opts = self.inst.entries[e].len();
            let mut arrived = 0.0;
            for k in 0..n_opts {
                let r = self.inst.entries[e][k];
                let bit = 1u128 << self.entry_cell[r];
                arrived += if cars.len < self.inst.n_max && occupied & bit == 0 {
                    let mut with = cars;
                    with.insert((r as u16) << 7);
                    self.arrivals(t, with, occupied | bit, e + 1)?
                } else {
                    match stay {
                        Some(x) => x,
                        None => self.arrivals(t, cars, occupied, e + 1)?,
                    }
                };
            }
            v += p * arrived / n_opts as f64;
        }
        Ok(v)
    }
}

fn evaluate(inst: &Instance, plans: &[&[u8]], horizon: usize, memoize: bool, max_states: u64) -> Result<PlanValue> {
    let cell = plans
        .iter()
        .enumerate()
        .map(|(r, pos)| {
            pos.iter()
                .map(|&p| {
                    if p == EXITED {
                        EXITED
                    } else {
                        inst.cell_ids[r][p as usize]
                    }
                })
                .collect()
        })
        .collect();
    let mut s = Search {
        inst,
        cell,
        entry_cell: inst.cell_ids.iter().map(|c| c[0]).collect(),
        horizon,
        memo: memoize.then(FxHashMap::default),
        expanded: 0,
        hits: 0,
        max_states,
    };
    let success = s.arrivals(0, Cars::EMPTY, 0, 0)?;
    Ok(PlanValue {
        success,
        states_expanded: s.expanded,
        cache_hits: s.hits,
    })
}

fn check_plans(inst: &Instance, waits: &[Vec<usize>], history: usize) -> Result<()> {
    if waits.len() != inst.cells.len() {
        return Err(Error::config(format!("need one plan per route ({})", inst.cells.len())));
    }
    for (r, w) in waits.iter().enumerate() {
        if w.len() != inst.cells[r].len() {
            return Err(Error::config(format!(
                "plan for route {r} must have {} waits",
                inst.cells[r].len()
            )));
        }
        if w.iter().any(|&x| x > history + 1) {
            return Err(Error::config(format!("route {r} waits longer than a live policy can")));
        }
    }
    Ok(())
}

/// Exact success probability of one joint plan (`waits[route][position]`).
pub fn evaluate_plan(cfg: &OracleConfig, waits: &[Vec<usize>], memoize: bool) -> Result<PlanValue> {
    let inst = Instance::new(&cfg.env)?;
    check_plans(&inst, waits, cfg.history)?;
    let pos: Vec<Vec<u8>> = waits.iter().map(|w| positions(w, inst.horizon)).collect();
    let refs: Vec<&[u8]> = pos.iter().map(|p| p.as_slice()).collect();
    evaluate(&inst, &refs, inst.horizon, memoize, cfg.max_states)
}

/// Full evaluations per pruning round.
const PROBES: usize = 4;
/// Round-off allowance when comparing a bound with an exact value.
const PRUNE_SLACK: f64 = 1e-12;

/// Increasing horizons ending at the full one.
fn bound_horizons(full: usize) -> Vec<usize> {
    let step = (full / 10).max(1);
    let mut out: Vec<usize> = (1..).map(|k| 2 * step + k * step).take_while(|&h| h < full).collect();
    out.push(full);
    out
}

/// Best no-communication success over every live joint plan.
pub fn solve(cfg: &OracleConfig) -> Result<OracleResult> {
    let inst = Instance::new(&cfg.env)?;
    let per_route: Vec<_> = inst
        .cells
        .iter()
        .map(|c| route_plans(c.len(), cfg.history, inst.horizon))
        .collect();
    let total = per_route
        .iter()
        .try_fold(1u64, |acc, p| acc.checked_mul(p.len() as u64))
        .filter(|&n| n <= cfg.max_joint_plans)
        .ok_or_else(|| {
            let sizes: Vec<_> = per_route.iter().map(|p| p.len()).collect();
            Error::InstanceTooLarge(format!(
                "plans per route {sizes:?} exceed the cap of {} joint plans",
                cfg.max_joint_plans
            ))
        })?;
    let pick = |mut idx: u64| -> Vec<usize> {
        per_route
            .iter()
            .map(|p| {
                let k = (idx % p.len() as u64) as usize;
                idx /= p.len() as u64;
                k
            })
            .collect()
    };
    let value_at = |idx: u64, horizon: usize| -> Result<PlanValue> {
        let refs: Vec<&[u8]> = pick(idx)
            .iter()
            .zip(&per_route)
            .map(|(&k, p)| p[k].1.as_slice())
            .collect();
        evaluate(&inst, &refs, horizon, true, cfg.max_states)
    };
    let (mut expanded, mut hits) = (0u64, 0u64);
    let mut tally = |v: &PlanValue| {
        expanded += v.states_expanded;
        hits += v.cache_hits;
    };
    // Success within a shorter horizon bounds success within the full one,
    // so plans whose bound falls below the best exact value are dropped.
    let mut alive: Vec<u64> = (0..total).collect();
    let mut best: Option<(u64, f64)> = None;
    let mut exact: HashMap<u64, f64> = HashMap::new();
    for horizon in bound_horizons(inst.horizon) {
        let bounds: Vec<PlanValue> = alive
            .par_iter()
            .map(|&idx| value_at(idx, horizon))
            .collect::<Result<_>>()?;
        bounds.iter().for_each(&mut tally);
        let mut order: Vec<usize> = (0..alive.len()).collect();
        order.sort_by(|&a, &b| bounds[b].success.total_cmp(&bounds[a].success).then(a.cmp(&b)));
        let probe: Vec<u64> = order
            .iter()
            .map(|&k| alive[k])
            .filter(|idx| !exact.contains_key(idx))
            .take(PROBES)
            .collect();
        let probed: Vec<PlanValue> = if horizon == inst.horizon {
            Vec::new()
        } else {
            probe
                .par_iter()
                .map(|&idx| value_at(idx, inst.horizon))
                .collect::<Result<_>>()?
        };
        probed.iter().for_each(&mut tally);
        for (&idx, v) in probe.iter().zip(&probed) {
            exact.insert(idx, v.success);
        }
        if horizon == inst.horizon {
            for (&idx, v) in alive.iter().zip(&bounds) {
                exact.insert(idx, v.success);
            }
        }
        for (&idx, &v) in &exact {
            let better = match best {
                None => true,
                Some((bi, bv)) => v > bv || (v == bv && idx < bi),
            };
            if better {
                best = Some((idx, v));
            }
        }
        let floor = best.map_or(f64::NEG_INFINITY, |(_, v)| v - PRUNE_SLACK);
        alive = alive
            .iter()
            .zip(&bounds)
            .filter(|(_, b)| b.success >= floor)
            .map(|(&idx, _)| idx)
            .collect();
    }
    let (idx, success) = best.expect("at least one joint plan");
    let policy = pick(idx)
        .into_iter()
        .enumerate()
        .map(|(route, k)| {
            let (waits, pos) = &per_route[route][k];
            RoutePlan {
                route,
                waits: waits.clone(),
                actions: actions_of(pos),
            }
        })
        .collect();
    let collision_rate = 1.0 - success;
    Ok(OracleResult {
        success,
        collision_rate,
        policy,
        joint_plans: total,
        states_expanded: expanded,
        cache_hits: hits,
        b_lb: collision_rate.clamp(0.0, 1.0),
    })
}

/// Memoized and plain searches agree on every joint plan of a tiny instance.
pub fn verify_memoization(cfg: &OracleConfig) -> Result<bool> {
    let inst = Instance::new(&cfg.env)?;
    if cfg.env.grid > 3 || cfg.env.n_max > 2 {
        return Err(Error::InstanceTooLarge(
            "memoization check needs grid <= 3 and n_max <= 2".into(),
        ));
    }
    let per_route: Vec<_> = inst
        .cells
        .iter()
        .map(|c| route_plans(c.len(), cfg.history, inst.horizon))
        .collect();
    let mut idx = vec![0usize; per_route.len()];
    loop {
        let refs: Vec<&[u8]> = idx.iter().zip(&per_route).map(|(&k, p)| p[k].1.as_slice()).collect();
        let a = evaluate(&inst, &refs, inst.horizon, true, cfg.max_states)?;
        let b = evaluate(&inst, &refs, inst.horizon, false, u64::MAX)?;
        if a.success != b.success {
            return Err(Error::Correctness(format!(
                "memoized {} != plain {} for plan {idx:?}",
                a.success, b.success
            )));
        }
        let mut k = 0;
        loop {
            if k == idx.len() {
                return Ok(true);
            }
            idx[k] += 1;
            if idx[k] < per_route[k].len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positions_follow_waits() {
        let pos = positions(&[1, 0, 2], 8);
        assert_eq!(pos, vec![0, 0, 1, 2, 2, 2, EXITED, EXITED, EXITED]);
        assert_eq!(actions_of(&pos), vec![BRAKE, GAS, GAS, BRAKE, BRAKE, GAS]);
    }

    #[test]
    fn horizons_end_at_full() {
        assert_eq!(bound_horizons(20), vec![6, 8, 10, 12, 14, 16, 18, 20]);
        assert_eq!(bound_horizons(3), vec![3]);
        assert_eq!(*bound_horizons(7).last().unwrap(), 7);
    }

    #[test]
    fn plan_count_is_radix_power() {
        assert_eq!(route_plans(3, 0, 20).len(), 8);
        assert_eq!(route_plans(3, 2, 20).len(), 64);
        // a two-step horizon only sees the first position's wait
        assert_eq!(route_plans(3, 0, 1).len(), 2);
    }

    #[test]
    fn keys_distinguish_lengths() {
        let mut one = Cars::EMPTY;
        one.insert(0);
        let mut two = one;
        two.insert(0);
        assert_ne!(one.key(1), two.key(1));
        let mut aged = Cars::EMPTY;
        aged.insert(1);
        assert_ne!(Cars::EMPTY.key(1), aged.key(0));
    }

    #[test]
    fn cars_stay_sorted() {
        let mut c = Cars::EMPTY;
        for x in [300, 5, 129, 5, 0] {
            c.insert(x);
        }
        assert_eq!(c.as_slice(), &[0, 5, 5, 129, 300]);
    }
}
