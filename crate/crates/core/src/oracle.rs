//! Exact small-instance solvers used as experts and references, and
//! conversion of their solutions into action sequences.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvError, Instance, Plan, ProblemKind, Solution, State};

/// Largest number of interior nodes the path Held–Karp accepts (a TSP cycle
/// of up to 20 cities).
pub const HELD_KARP_MAX_INTERIOR: usize = 19;
/// Largest customer count for the CVRP and OP exact solvers.
pub const SMALL_MAX_CUSTOMERS: usize = 12;

const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("instance too large for the exact solver: {n} > {cap}")]
    Size { n: usize, cap: usize },
    #[error("solution does not match the environment: {0}")]
    Consistency(String),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Expert action sequence for one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub instance_id: usize,
    pub actions: Vec<usize>,
    pub objective: f64,
}

fn euclid(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Suffix table for paths that visit a subset of `nodes` and then end at a
/// fixed node: `cost[s * m + j]` is the cheapest walk that starts at
/// `nodes[j]`, visits every node of subset `s` (which contains `j`) and ends.
struct SuffixTable<'a> {
    nodes: &'a [usize],
    cost: Vec<f64>,
}

impl<'a> SuffixTable<'a> {
    fn build(nodes: &'a [usize], d: &dyn Fn(usize, usize) -> f64, end: usize) -> Self {
        let m = nodes.len();
        let mut cost = vec![f64::INFINITY; (1usize << m) * m];
        let dm: Vec<f64> = (0..m * m).map(|x| d(nodes[x / m], nodes[x % m])).collect();
        for s in 1usize..1 << m {
            if s.count_ones() == 1 {
                let j = s.trailing_zeros() as usize;
                cost[s * m + j] = d(nodes[j], end);
                continue;
            }
            let mut bits = s;
            while bits != 0 {
                let j = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                let rest = s & !(1 << j);
                let row = &cost[rest * m..rest * m + m];
                let mut best = f64::INFINITY;
                let mut rb = rest;
                while rb != 0 {
                    let k = rb.trailing_zeros() as usize;
                    rb &= rb - 1;
                    let c = dm[j * m + k] + row[k];
                    if c < best {
                        best = c;
                    }
                }
                cost[s * m + j] = best;
            }
        }
        Self { nodes, cost }
    }

    /// Cheapest cost from `from` through all of `s`, and the lexicographically
    /// smallest node order achieving it.
    fn walk(&self, d: &dyn Fn(usize, usize) -> f64, from: usize, s: usize) -> (f64, Vec<usize>) {
        let m = self.nodes.len();
        let best_of = |cur: usize, s: usize| {
            let mut best = f64::INFINITY;
            let mut bits = s;
            while bits != 0 {
                let j = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                best = best.min(d(cur, self.nodes[j]) + self.cost[s * m + j]);
            }
            best
        };
        let total = best_of(from, s);
        let (mut cur, mut s, mut order) = (from, s, Vec::new());
        while s != 0 {
            let target = best_of(cur, s);
            let mut bits = s;
            let j = loop {
                let j = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                if d(cur, self.nodes[j]) + self.cost[s * m + j] <= target + TIE_EPS || bits == 0 {
                    break j;
                }
            };
            order.push(self.nodes[j]);
            cur = self.nodes[j];
            s &= !(1 << j);
        }
        (total, order)
    }
}

/// Shortest Hamiltonian path from `start` through every other point to `end`
/// (`start == end` gives a cycle). Returns the full node sequence including
/// both endpoints. Ties go to the lexicographically smallest sequence.
pub fn held_karp_path_tsp(coords: &[[f64; 2]], start: usize, end: usize) -> Result<(Vec<usize>, f64), OracleError> {
    let n = coords.len();
    if start >= n || end >= n {
        return Err(OracleError::Consistency(format!("endpoint out of range for {n} points")));
    }
    let interior: Vec<usize> = (0..n).filter(|&i| i != start && i != end).collect();
    if interior.len() > HELD_KARP_MAX_INTERIOR {
        return Err(OracleError::Size {
            n: interior.len(),
            cap: HELD_KARP_MAX_INTERIOR,
        });
    }
    let d = |a: usize, b: usize| euclid(coords[a], coords[b]);
    if interior.is_empty() {
        return Ok((vec![start, end], d(start, end)));
    }
    let table = SuffixTable::build(&interior, &d, end);
    let (cost, order) = table.walk(&d, start, (1 << interior.len()) - 1);
    let mut path = Vec::with_capacity(n + 1);
    path.push(start);
    path.extend(order);
    path.push(end);
    Ok((path, cost))
}

/// Optimal TSP tour starting at city 0.
pub fn exact_tsp_cycle(coords: &[[f64; 2]]) -> Result<(Vec<usize>, f64), OracleError> {
    if coords.len() < 2 {
        return Ok(((0..coords.len()).collect(), 0.0));
    }
    let (mut path, cost) = held_karp_path_tsp(coords, 0, 0)?;
    path.pop();
    Ok((path, cost))
}

fn check_small(inst: &Instance) -> Result<usize, OracleError> {
    let m = inst.size();
    if m > SMALL_MAX_CUSTOMERS {
        return Err(OracleError::Size {
            n: m,
            cap: SMALL_MAX_CUSTOMERS,
        });
    }
    Ok(m)
}

/// Optimal CVRP routes: single-route costs for every capacity-feasible
/// customer subset, then the cheapest partition into such subsets.
pub fn exact_cvrp_small(inst: &Instance) -> Result<Solution, OracleError> {
    if inst.kind != ProblemKind::Cvrp {
        return Err(OracleError::Consistency("exact_cvrp_small needs a CVRP instance".into()));
    }
    let m = check_small(inst)?;
    let customers: Vec<usize> = (1..=m).collect();
    let d = |a: usize, b: usize| inst.dist(a, b);
    let full = (1usize << m) - 1;
    let mut load = vec![0u32; 1 << m];
    for s in 1..=full {
        let j = s.trailing_zeros() as usize;
        load[s] = load[s & (s - 1)] + inst.demands[customers[j]];
    }
    let table = SuffixTable::build(&customers, &d, 0);
    let mut route = vec![f64::INFINITY; 1 << m];
    for s in 1..=full {
        if load[s] <= inst.capacity {
            let mut best = f64::INFINITY;
            let mut bits = s;
            while bits != 0 {
                let j = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                best = best.min(d(0, customers[j]) + table.cost[s * m + j]);
            }
            route[s] = best;
        }
    }
    // best[s]: cheapest set of routes covering s; the route holding the
    // lowest customer of s is enumerated first.
    let mut best = vec![f64::INFINITY; 1 << m];
    let mut choice = vec![0usize; 1 << m];
    best[0] = 0.0;
    for s in 1..=full {
        let low = s & s.wrapping_neg();
        let rest = s & !low;
        let mut sub = rest;
        loop {
            let t = sub | low;
            let c = route[t] + best[s & !t];
            if c < best[s] - TIE_EPS {
                best[s] = c;
                choice[s] = t;
            }
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & rest;
        }
    }
    if !best[full].is_finite() {
        return Err(OracleError::Env(EnvError::Infeasible("a customer exceeds vehicle capacity".into())));
    }
    let mut routes = Vec::new();
    let mut s = full;
    while s != 0 {
        let t = choice[s];
        let (_, forward) = table.walk(&d, 0, t);
        let mut backward = forward.clone();
        backward.reverse();
        routes.push(forward.min(backward));
        s &= !t;
    }
    routes.sort();
    Ok(Solution::new(inst, Plan::Cvrp { routes })?)
}

/// Maximum-prize OP path by depth-first search over partial paths, pruned by
/// the remaining budget and by the prize still reachable in one hop.
pub fn exact_op_small(inst: &Instance) -> Result<Solution, OracleError> {
    if inst.kind != ProblemKind::Op {
        return Err(OracleError::Consistency("exact_op_small needs an OP instance".into()));
    }
    let m = check_small(inst)?;
    struct Search<'a> {
        inst: &'a Instance,
        m: usize,
        path: Vec<usize>,
        used: Vec<bool>,
        best: u32,
        best_path: Vec<usize>,
    }
    impl Search<'_> {
        fn reachable(&self, cur: usize, budget: f64, c: usize) -> bool {
            !self.used[c] && self.inst.dist(cur, c) + self.inst.dist(c, 0) <= budget
        }

        fn go(&mut self, cur: usize, budget: f64, prize: u32) {
            if prize > self.best {
                self.best = prize;
                self.best_path = self.path.clone();
            }
            let bound: u32 = (1..=self.m)
                .filter(|&c| self.reachable(cur, budget, c))
                .map(|c| self.inst.prizes[c])
                .sum();
            if prize + bound <= self.best {
                return;
            }
            for c in 1..=self.m {
                if self.reachable(cur, budget, c) {
                    self.used[c] = true;
                    self.path.push(c);
                    self.go(c, budget - self.inst.dist(cur, c), prize + self.inst.prizes[c]);
                    self.path.pop();
                    self.used[c] = false;
                }
            }
        }
    }
    let mut s = Search {
        inst,
        m,
        path: Vec::new(),
        used: vec![false; m + 1],
        best: 0,
        best_path: Vec::new(),
    };
    s.go(0, inst.distance_limit, 0);
    Ok(Solution::new(inst, Plan::Op { path: s.best_path })?)
}

/// Exact solution for any supported kind.
pub fn solve_exact(inst: &Instance) -> Result<Solution, OracleError> {
    match inst.kind {
        ProblemKind::Tsp => {
            let (tour, _) = exact_tsp_cycle(&inst.coords)?;
            Ok(Solution::new(inst, Plan::Tsp { tour })?)
        }
        ProblemKind::Cvrp => exact_cvrp_small(inst),
        ProblemKind::Op => exact_op_small(inst),
    }
}

fn row_of(state: &State<'_>, node: usize) -> Result<usize, OracleError> {
    state
        .interior()
        .iter()
        .position(|&c| c == node)
        .ok_or_else(|| OracleError::Consistency(format!("node {node} is not pending at step {}", state.step_index())))
}

/// Steps the environment along `sol`, recording the action taken at each
/// state. TSP tours are rotated to start at city 0; CVRP routes after the
/// first begin with a via-depot action.
pub fn extract_trajectory(inst: &Instance, sol: &Solution) -> Result<Trajectory, OracleError> {
    let mut state = State::initial(inst);
    let mut actions = Vec::new();
    let mut push = |state: &mut State<'_>, a: usize| -> Result<(), OracleError> {
        state.apply(a)?;
        actions.push(a);
        Ok(())
    };
    match (&sol.plan, inst.kind) {
        (Plan::Tsp { tour }, ProblemKind::Tsp) => {
            let at = tour
                .iter()
                .position(|&c| c == 0)
                .ok_or_else(|| OracleError::Consistency("tour misses city 0".into()))?;
            for &c in tour[at + 1..].iter().chain(&tour[..at]) {
                let r = row_of(&state, c)?;
                push(&mut state, r + 1)?;
            }
        }
        (Plan::Cvrp { routes }, ProblemKind::Cvrp) => {
            for (k, route) in routes.iter().enumerate() {
                for (i, &c) in route.iter().enumerate() {
                    let r = row_of(&state, c)?;
                    let via = k > 0 && i == 0;
                    let a = if via { r + state.interior().len() } else { r };
                    push(&mut state, a)?;
                }
            }
        }
        (Plan::Op { path }, ProblemKind::Op) => {
            for &c in path {
                let r = row_of(&state, c)?;
                push(&mut state, r + 1)?;
            }
            let dest = state.num_rows() - 1;
            push(&mut state, dest)?;
        }
        _ => return Err(OracleError::Consistency("solution kind does not match the instance".into())),
    }
    if !state.is_done() {
        return Err(OracleError::Consistency("solution leaves nodes unvisited".into()));
    }
    let objective = state.solution()?.objective;
    if (objective - sol.objective).abs() > 1e-9 {
        return Err(OracleError::Consistency(format!(
            "replayed objective {objective} differs from {}",
            sol.objective
        )));
    }
    Ok(Trajectory {
        instance_id: 0,
        actions,
        objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn forced_three_node_path() {
        let c = [[0.0, 0.0], [0.3, 0.4], [1.0, 0.0]];
        let (path, cost) = held_karp_path_tsp(&c, 0, 2).unwrap();
        assert_eq!(path, vec![0, 1, 2]);
        assert_abs_diff_eq!(cost, 0.5 + euclid(c[1], c[2]), epsilon = 1e-12);
    }

    #[test]
    fn collinear_points_are_visited_in_order() {
        let c: Vec<[f64; 2]> = [0.0, 0.6, 0.2, 1.0, 0.8, 0.4].iter().map(|&x| [x, 0.5]).collect();
        let (path, cost) = held_karp_path_tsp(&c, 0, 3).unwrap();
        assert_eq!(path, vec![0, 2, 5, 1, 4, 3]);
        assert_abs_diff_eq!(cost, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn square_cycle() {
        let c = [[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
        let (tour, cost) = exact_tsp_cycle(&c).unwrap();
        assert_abs_diff_eq!(cost, 4.0, epsilon = 1e-12);
        assert_eq!(tour, vec![0, 2, 1, 3]);
    }

    #[test]
    fn size_cap() {
        let c = vec![[0.5, 0.5]; HELD_KARP_MAX_INTERIOR + 3];
        assert!(matches!(held_karp_path_tsp(&c, 0, 1), Err(OracleError::Size { .. })));
        let big = Instance::cvrp(vec![[0.5, 0.5]; SMALL_MAX_CUSTOMERS + 2], &[1; SMALL_MAX_CUSTOMERS + 1], 30);
        assert!(matches!(exact_cvrp_small(&big), Err(OracleError::Size { .. })));
    }

    #[test]
    fn cvrp_single_and_split() {
        let one = Instance::cvrp(vec![[0.0, 0.0], [0.3, 0.4]], &[5], 30);
        let s = exact_cvrp_small(&one).unwrap();
        assert_abs_diff_eq!(s.objective, 1.0, epsilon = 1e-12);
        let two = Instance::cvrp(vec![[0.0, 0.0], [0.3, 0.4], [0.31, 0.4]], &[6, 5], 10);
        let s = exact_cvrp_small(&two).unwrap();
        assert_eq!(s.plan, Plan::Cvrp { routes: vec![vec![1], vec![2]] });
    }

    #[test]
    fn op_extremes() {
        let far = Instance::op(vec![[0.0, 0.0], [1.0, 1.0], [0.9, 1.0]], &[10, 20], 2.0);
        let s = exact_op_small(&far).unwrap();
        assert_eq!(s.plan, Plan::Op { path: vec![] });
        assert_eq!(s.objective, 0.0);
        let near = Instance::op(vec![[0.0, 0.0], [0.1, 0.1], [0.2, 0.0], [0.0, 0.3]], &[3, 4, 5], 4.0);
        assert_eq!(exact_op_small(&near).unwrap().objective, 12.0);
    }

    #[test]
    fn trajectory_shapes() {
        let tsp = Instance::tsp(vec![[0.1, 0.1], [0.9, 0.2], [0.5, 0.8], [0.3, 0.4]]);
        let sol = Solution::new(&tsp, Plan::Tsp { tour: vec![2, 0, 1, 3] }).unwrap();
        let t = extract_trajectory(&tsp, &sol).unwrap();
        assert_eq!(t.actions.len(), 3);

        let cvrp = Instance::cvrp(vec![[0.5, 0.5], [0.1, 0.1], [0.9, 0.9], [0.1, 0.9]], &[3, 3, 3], 10);
        let sol = Solution::new(&cvrp, Plan::Cvrp { routes: vec![vec![2], vec![3, 1]] }).unwrap();
        let t = extract_trajectory(&cvrp, &sol).unwrap();
        assert_eq!(t.actions, vec![1, 2 + 1, 0]);

        let op = Instance::op(vec![[0.0, 0.0], [0.1, 0.1], [0.2, 0.0]], &[3, 4], 4.0);
        let sol = Solution::new(&op, Plan::Op { path: vec![] }).unwrap();
        assert_eq!(extract_trajectory(&op, &sol).unwrap().actions, vec![3]);
    }
}
