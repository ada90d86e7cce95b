//! Blind traffic junction.
//!
//! Cars enter at road entry points, follow a fixed route one cell per
//! `gas` action, and leave when they pass the last cell. Each car sees
//! only its own route position, route id and previous action; it knows
//! nothing about other cars unless they tell it.

use std::collections::HashMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{DecPomdpSpec, StepInfo, StepResult};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const GAS: usize = 0;
pub const BRAKE: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    /// Two one-way roads crossing once.
    Easy,
    /// Two two-way roads; every entry offers straight, left and right routes.
    Medium,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficJunctionConfig {
    pub difficulty: Difficulty,
    pub grid: usize,
    pub n_max: usize,
    pub p_arrive: f64,
    /// Each active car receives `-step_penalty * τ`, τ = steps since arrival.
    pub step_penalty: f64,
    /// Magnitude of the per-car collision penalty.
    pub collision_penalty: f64,
    pub max_steps: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn default_gamma() -> f64 {
    1.0
}

impl TrafficJunctionConfig {
    pub fn easy() -> Self {
        TrafficJunctionConfig {
            difficulty: Difficulty::Easy,
            grid: 7,
            n_max: 5,
            p_arrive: 0.3,
            step_penalty: 0.01,
            collision_penalty: 10.0,
            max_steps: 20,
            gamma: 1.0,
        }
    }

    pub fn medium() -> Self {
        TrafficJunctionConfig {
            difficulty: Difficulty::Medium,
            grid: 14,
            n_max: 10,
            p_arrive: 0.2,
            step_penalty: 0.01,
            collision_penalty: 10.0,
            max_steps: 40,
            gamma: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_max == 0 {
            return Err(Error::config("traffic junction needs n_max >= 1"));
        }
        if !(0.0..=1.0).contains(&self.p_arrive) {
            return Err(Error::config(format!(
                "p_arrive must be a probability, got {}",
                self.p_arrive
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::config("max_steps must be at least 1"));
        }
        let min_grid = match self.difficulty {
            Difficulty::Easy => 3,
            Difficulty::Medium => 4,
        };
        if self.grid < min_grid {
            return Err(Error::config(format!("grid must be at least {min_grid}")));
        }
        if !(self.step_penalty.is_finite() && self.collision_penalty.is_finite()) {
            return Err(Error::config("penalties must be finite"));
        }
        Ok(())
    }
}

/// Ordered list of grid cells a car traverses.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub entry: usize,
    pub cells: Vec<(usize, usize)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
struct Car {
    route: usize,
    pos: usize,
    age: usize,
    prev_action: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrafficJunction {
    cfg: TrafficJunctionConfig,
    routes: Vec<Route>,
    /// Routes offered at each entry point.
    entries: Vec<Vec<usize>>,
    /// Offset of each route's first cell in the observation's cell slots.
    slot_offset: Vec<usize>,
    n_slots: usize,
    cars: Vec<Option<Car>>,
    t: usize,
    done: bool,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Heading {
    North,
    South,
    East,
    West,
}

impl Heading {
    fn delta(self) -> (isize, isize) {
        match self {
            Heading::North => (-1, 0),
            Heading::South => (1, 0),
            Heading::East => (0, 1),
            Heading::West => (0, -1),
        }
    }

    fn left(self) -> Heading {
        match self {
            Heading::East => Heading::North,
            Heading::West => Heading::South,
            Heading::South => Heading::East,
            Heading::North => Heading::West,
        }
    }

    fn right(self) -> Heading {
        match self {
            Heading::East => Heading::South,
            Heading::West => Heading::North,
            Heading::South => Heading::West,
            Heading::North => Heading::East,
        }
    }
}

fn easy_routes(grid: usize) -> Vec<Route> {
    let mid = grid / 2;
    vec![
        Route {
            entry: 0,
            cells: (0..grid).map(|c| (mid, c)).collect(),
        },
        Route {
            entry: 1,
            cells: (0..grid).map(|r| (r, mid)).collect(),
        },
    ]
}

/// Right-hand traffic on two two-way roads through the grid centre.
fn medium_routes(grid: usize) -> Vec<Route> {
    let a = grid / 2 - 1;
    let b = grid / 2;
    // lane: row for east/west traffic, column for north/south traffic
    let lane = |h: Heading| match h {
        Heading::East => b,
        Heading::West => a,
        Heading::South => a,
        Heading::North => b,
    };
    let start = |h: Heading| -> (usize, usize) {
        match h {
            Heading::East => (lane(h), 0),
            Heading::West => (lane(h), grid - 1),
            Heading::South => (0, lane(h)),
            Heading::North => (grid - 1, lane(h)),
        }
    };
    let walk = |from: (usize, usize), h: Heading, until: Option<(usize, usize)>| {
        let mut cells = vec![from];
        let (dr, dc) = h.delta();
        let mut cur = from;
        loop {
            if Some(cur) == until {
                break;
            }
            let nr = cur.0 as isize + dr;
            let nc = cur.1 as isize + dc;
            if nr < 0 || nc < 0 || nr >= grid as isize || nc >= grid as isize {
                break;
            }
            cur = (nr as usize, nc as usize);
            cells.push(cur);
        }
        cells
    };
    let turn_cell = |h: Heading, into: Heading| match h {
        Heading::East | Heading::West => (lane(h), lane(into)),
        Heading::North | Heading::South => (lane(into), lane(h)),
    };
    let mut routes = Vec::new();
    for (entry, h) in [Heading::East, Heading::West, Heading::South, Heading::North]
        .into_iter()
        .enumerate()
    {
        routes.push(Route {
            entry,
            cells: walk(start(h), h, None),
        });
        for into in [h.left(), h.right()] {
            let corner = turn_cell(h, into);
            let mut cells = walk(start(h), h, Some(corner));
            let tail = walk(corner, into, None);
            cells.extend_from_slice(&tail[1..]);
            routes.push(Route { entry, cells });
        }
    }
    routes
}

impl TrafficJunction {
    pub fn new(cfg: TrafficJunctionConfig) -> Result<Self> {
        cfg.validate()?;
        let routes = match cfg.difficulty {
            Difficulty::Easy => easy_routes(cfg.grid),
            Difficulty::Medium => medium_routes(cfg.grid),
        };
        let n_entries = routes.iter().map(|r| r.entry).max().unwrap_or(0) + 1;
        let mut entries = vec![Vec::new(); n_entries];
        for (i, r) in routes.iter().enumerate() {
            entries[r.entry].push(i);
        }
        let mut slot_offset = Vec::with_capacity(routes.len());
        let mut n_slots = 0;
        for r in &routes {
            slot_offset.push(n_slots);
            n_slots += r.cells.len();
        }
        Ok(TrafficJunction {
            cars: vec![None; cfg.n_max],
            cfg,
            routes,
            entries,
            slot_offset,
            n_slots,
            t: 0,
            done: false,
        })
    }

    pub fn config(&self) -> &TrafficJunctionConfig {
        &self.cfg
    }

    pub fn routes(&self) -> &[Route] {
        &self.routes
    }

    /// Number of `(route, position)` cell slots in the observation.
    pub fn route_cell_slots(&self) -> usize {
        self.n_slots
    }

    /// Distinct grid cells covered by some route.
    pub fn distinct_road_cells(&self) -> usize {
        let mut cells: Vec<_> = self.routes.iter().flat_map(|r| r.cells.iter().copied()).collect();
        cells.sort_unstable();
        cells.dedup();
        cells.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.n_slots + self.routes.len() + 2
    }

    pub fn spec(&self) -> DecPomdpSpec {
        DecPomdpSpec {
            n_agents: self.cfg.n_max,
            action_sizes: vec![2; self.cfg.n_max],
            obs_dim: self.obs_dim(),
            max_steps: self.cfg.max_steps,
            gamma: self.cfg.gamma,
        }
    }

    pub fn time(&self) -> usize {
        self.t
    }

    pub fn active_cars(&self) -> usize {
        self.cars.iter().flatten().count()
    }

    /// `(route, position)` of the car in `slot`, if any.
    pub fn car(&self, slot: usize) -> Option<(usize, usize)> {
        self.cars.get(slot).copied().flatten().map(|c| (c.route, c.pos))
    }

    /// Place a car directly; used by tests and the oracle cross-checks.
    pub fn place_car(&mut self, slot: usize, route: usize, pos: usize, age: usize) -> Result<()> {
        if slot >= self.cars.len() || route >= self.routes.len() || pos >= self.routes[route].cells.len() {
            return Err(Error::contract("car placement out of range"));
        }
        self.cars[slot] = Some(Car {
            route,
            pos,
            age,
            prev_action: None,
        });
        Ok(())
    }

    pub fn clear(&mut self) {
        self.cars.iter_mut().for_each(|c| *c = None);
        self.t = 0;
        self.done = false;
    }

    fn cell_of(&self, car: &Car) -> (usize, usize) {
        self.routes[car.route].cells[car.pos]
    }

    /// Arrival process: each entry point spawns a car with probability
    /// `p_arrive` if a slot is free, fewer than `n_max` cars are active and
    /// the entry cell is empty. Returns which slots were filled.
    fn arrivals(&mut self, rng: &mut Rng) -> Vec<bool> {
        let mut spawned = vec![false; self.cars.len()];
        for e in 0..self.entries.len() {
            let roll: f64 = rng.gen();
            let pick: f64 = rng.gen();
            if roll >= self.cfg.p_arrive {
                continue;
            }
            let Some(slot) = self.cars.iter().position(|c| c.is_none()) else {
                continue;
            };
            let options = &self.entries[e];
            let route = options[((pick * options.len() as f64) as usize).min(options.len() - 1)];
            let entry_cell = self.routes[route].cells[0];
            if self.cars.iter().flatten().any(|c| self.cell_of(c) == entry_cell) {
                continue;
            }
            self.cars[slot] = Some(Car {
                route,
                pos: 0,
                age: 0,
                prev_action: None,
            });
            spawned[slot] = true;
        }
        spawned
    }

    pub fn reset(&mut self, rng: &mut Rng) -> StepResult {
        self.clear();
        let spawned = self.arrivals(rng);
        let n = self.cars.len();
        StepResult {
            obs: (0..n).map(|i| self.observe(i)).collect(),
            rewards: vec![0.0; n],
            alive: self.cars.iter().map(|c| c.is_some()).collect(),
            spawned,
            done: false,
            info: StepInfo::default(),
        }
    }

    pub fn step(&mut self, actions: &[usize], rng: &mut Rng) -> Result<StepResult> {
        let n = self.cars.len();
        if self.done {
            return Err(Error::contract("step called on a finished episode"));
        }
        if actions.len() != n {
            return Err(Error::contract(format!("expected {n} actions, got {}", actions.len())));
        }
        let mut rewards = vec![0.0; n];
        for (slot, car) in self.cars.iter_mut().enumerate() {
            let Some(car) = car else { continue };
            let a = actions[slot];
            if a > BRAKE {
                return Err(Error::contract(format!(
                    "traffic action {a} out of range for car {slot}"
                )));
            }
            car.age += 1;
            car.prev_action = Some(a);
            rewards[slot] -= self.cfg.step_penalty * car.age as f64;
        }
        for slot in 0..n {
            let Some(mut car) = self.cars[slot] else { continue };
            if actions[slot] == GAS {
                car.pos += 1;
            }
            self.cars[slot] = if car.pos >= self.routes[car.route].cells.len() {
                None
            } else {
                Some(car)
            };
        }
        let mut occupancy: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (slot, car) in self.cars.iter().enumerate() {
            if let Some(car) = car {
                occupancy.entry(self.cell_of(car)).or_default().push(slot);
            }
        }
        let mut collisions = 0;
        for slots in occupancy.values().filter(|s| s.len() >= 2) {
            collisions += 1;
            for &s in slots {
                rewards[s] -= self.cfg.collision_penalty;
            }
        }
        self.t += 1;
        self.done = self.t >= self.cfg.max_steps;
        let spawned = if self.done { vec![false; n] } else { self.arrivals(rng) };
        Ok(StepResult {
            obs: (0..n).map(|i| self.observe(i)).collect(),
            rewards,
            alive: self.cars.iter().map(|c| c.is_some()).collect(),
            spawned,
            done: self.done,
            info: StepInfo { collisions, on_prey: 0 },
        })
    }

    /// `[cell slot one-hot | route one-hot | previous action one-hot]`;
    /// the previous-action block is all zero for a car that has not acted.
    pub fn observe(&self, slot: usize) -> Vec<f64> {
        let mut obs = vec![0.0; self.obs_dim()];
        if let Some(Some(car)) = self.cars.get(slot) {
            obs[self.slot_offset[car.route] + car.pos] = 1.0;
            obs[self.n_slots + car.route] = 1.0;
            if let Some(a) = car.prev_action {
                obs[self.n_slots + self.routes.len() + a] = 1.0;
            }
        }
        obs
    }

    pub fn snapshot(&self) -> serde_json::Value {
        let cars: Vec<_> = self
            .cars
            .iter()
            .map(|c| {
                c.map(|c| serde_json::json!({"route": c.route, "pos": c.pos, "age": c.age, "cell": self.cell_of(&c)}))
            })
            .collect();
        serde_json::json!({ "t": self.t, "cars": cars })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn easy() -> TrafficJunction {
        TrafficJunction::new(TrafficJunctionConfig::easy()).unwrap()
    }

    #[test]
    fn easy_has_fourteen_route_cells() {
        let tj = easy();
        assert_eq!(tj.route_cell_slots(), 14);
        assert_eq!(tj.routes().len(), 2);
        // both routes share exactly the junction cell
        assert_eq!(tj.distinct_road_cells(), 13);
        assert_eq!(tj.routes()[0].cells[3], tj.routes()[1].cells[3]);
    }

    #[test]
    fn medium_routes_are_connected_and_cross() {
        let tj = TrafficJunction::new(TrafficJunctionConfig::medium()).unwrap();
        assert_eq!(tj.routes().len(), 12);
        for r in tj.routes() {
            for w in r.cells.windows(2) {
                let d = w[0].0.abs_diff(w[1].0) + w[0].1.abs_diff(w[1].1);
                assert_eq!(d, 1, "route not connected: {:?}", r.cells);
            }
            let last = *r.cells.last().unwrap();
            let g = tj.config().grid - 1;
            assert!(last.0 == 0 || last.1 == 0 || last.0 == g || last.1 == g);
        }
        // straight routes of crossing roads share a cell
        let shared = tj.routes()[0].cells.iter().any(|c| tj.routes()[6].cells.contains(c));
        assert!(shared);
    }

    #[test]
    fn no_arrivals_means_no_cars() {
        let mut cfg = TrafficJunctionConfig::easy();
        cfg.p_arrive = 0.0;
        let mut tj = TrafficJunction::new(cfg).unwrap();
        let r = tj.reset(&mut rng::seeded(0));
        assert!(r.alive.iter().all(|a| !a));
        assert_eq!(tj.active_cars(), 0);
    }

    #[test]
    fn same_seed_same_episode() {
        let run = |seed| {
            let mut tj = easy();
            let mut r = rng::seeded(seed);
            let mut out = vec![tj.reset(&mut r)];
            for t in 0..20 {
                let acts: Vec<usize> = (0..5).map(|i| (i + t) % 2).collect();
                out.push(tj.step(&acts, &mut r).unwrap());
            }
            out
        };
        assert_eq!(run(3), run(3));
    }

    #[test]
    fn junction_collision_penalizes_both() {
        let mut cfg = TrafficJunctionConfig::easy();
        cfg.p_arrive = 0.0;
        let mut tj = TrafficJunction::new(cfg).unwrap();
        tj.reset(&mut rng::seeded(0));
        tj.place_car(0, 0, 2, 0).unwrap();
        tj.place_car(1, 1, 2, 0).unwrap();
        let r = tj.step(&[GAS, GAS, GAS, GAS, GAS], &mut rng::seeded(0)).unwrap();
        assert_eq!(r.info.collisions, 1);
        assert!((r.rewards[0] - (-10.0 - 0.01)).abs() < 1e-12);
        assert!((r.rewards[1] - (-10.0 - 0.01)).abs() < 1e-12);
    }

    #[test]
    fn braking_car_time_penalty_grows() {
        let mut cfg = TrafficJunctionConfig::easy();
        cfg.p_arrive = 0.0;
        let mut tj = TrafficJunction::new(cfg).unwrap();
        tj.reset(&mut rng::seeded(0));
        tj.place_car(0, 0, 0, 0).unwrap();
        let mut r = rng::seeded(0);
        let stream: Vec<f64> = (0..3)
            .map(|_| tj.step(&[BRAKE, 0, 0, 0, 0], &mut r).unwrap().rewards[0])
            .collect();
        for (got, want) in stream.iter().zip([-0.01, -0.02, -0.03]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rear_end_collision_on_same_route() {
        let mut cfg = TrafficJunctionConfig::easy();
        cfg.p_arrive = 0.0;
        let mut tj = TrafficJunction::new(cfg).unwrap();
        tj.reset(&mut rng::seeded(0));
        tj.place_car(0, 0, 5, 0).unwrap();
        tj.place_car(1, 0, 4, 0).unwrap();
        let r = tj.step(&[BRAKE, GAS, 0, 0, 0], &mut rng::seeded(0)).unwrap();
        assert_eq!(r.info.collisions, 1);
    }

    #[test]
    fn finished_car_is_removed() {
        let mut cfg = TrafficJunctionConfig::easy();
        cfg.p_arrive = 0.0;
        let mut tj = TrafficJunction::new(cfg).unwrap();
        tj.reset(&mut rng::seeded(0));
        tj.place_car(2, 1, 6, 3).unwrap();
        let r = tj.step(&[0; 5], &mut rng::seeded(0)).unwrap();
        assert!(!r.alive[2]);
        assert!((r.rewards[2] + 0.04).abs() < 1e-12);
        assert_eq!(r.obs[2], vec![0.0; tj.obs_dim()]);
    }

    #[test]
    fn observation_is_blind() {
        let mut cfg = TrafficJunctionConfig::easy();
        cfg.p_arrive = 0.0;
        let mut a = TrafficJunction::new(cfg.clone()).unwrap();
        let mut b = TrafficJunction::new(cfg).unwrap();
        a.place_car(0, 0, 2, 1).unwrap();
        b.place_car(0, 0, 2, 1).unwrap();
        a.place_car(1, 1, 1, 1).unwrap();
        b.place_car(3, 1, 5, 2).unwrap();
        b.place_car(4, 0, 6, 2).unwrap();
        assert_eq!(a.observe(0), b.observe(0));
        let obs = a.observe(0);
        assert_eq!(obs[..14].iter().filter(|v| **v == 1.0).count(), 1);
    }

    #[test]
    fn wrong_action_is_contract_violation() {
        let mut tj = easy();
        tj.reset(&mut rng::seeded(0));
        tj.place_car(0, 0, 0, 0).unwrap();
        assert!(matches!(
            tj.step(&[2, 0, 0, 0, 0], &mut rng::seeded(0)),
            Err(Error::Contract(_))
        ));
        assert!(tj.step(&[0; 3], &mut rng::seeded(0)).is_err());
    }

    #[test]
    fn no_step_after_done() {
        let mut tj = easy();
        let mut r = rng::seeded(1);
        tj.reset(&mut r);
        for _ in 0..20 {
            tj.step(&[0; 5], &mut r).unwrap();
        }
        assert!(tj.step(&[0; 5], &mut r).is_err());
    }
}
