//! Construction environments for path-TSP, CVRP and OP.
//!
//! Every state is itself a smaller instance of the same problem: row 0 is the
//! current position, the last row is the destination (the start node for TSP,
//! the depot for CVRP and OP), and the rows in between are the nodes still to
//! be decided.

mod state;

pub use state::{replay, RowId, State};

use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Instances with at least this many nodes precompute the distance matrix.
pub const DIST_MATRIX_THRESHOLD: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Tsp,
    Cvrp,
    Op,
}

impl ProblemKind {
    pub fn feature_dim(self) -> usize {
        match self {
            ProblemKind::Tsp => 2,
            ProblemKind::Cvrp | ProblemKind::Op => 4,
        }
    }

    /// Decoder outputs per node (CVRP: direct and via-depot).
    pub fn action_arity(self) -> usize {
        match self {
            ProblemKind::Cvrp => 2,
            _ => 1,
        }
    }

    pub fn maximize(self) -> bool {
        self == ProblemKind::Op
    }

    pub fn name(self) -> &'static str {
        match self {
            ProblemKind::Tsp => "tsp",
            ProblemKind::Cvrp => "cvrp",
            ProblemKind::Op => "op",
        }
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ProblemKind {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tsp" => Ok(ProblemKind::Tsp),
            "cvrp" => Ok(ProblemKind::Cvrp),
            "op" => Ok(ProblemKind::Op),
            other => Err(EnvError::InvalidInstance(format!("unknown problem kind `{other}`"))),
        }
    }
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("infeasible action {action} at step {step}")]
    InfeasibleAction { step: usize, action: usize },
    #[error("infeasible solution: {0}")]
    Infeasible(String),
    #[error("action sequence ended after {0} steps before the episode finished")]
    Incomplete(usize),
    #[error("instance is terminal at the initial state")]
    TerminalAtStart,
}

#[derive(Clone, Debug, Default)]
struct DistCache(OnceLock<Vec<f64>>);

impl PartialEq for DistCache {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

/// Immutable problem description. For CVRP and OP node 0 is the depot and
/// `demands` / `prizes` are indexed by node (the depot entry is 0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub kind: ProblemKind,
    pub coords: Vec<[f64; 2]>,
    #[serde(default)]
    pub demands: Vec<u32>,
    #[serde(default)]
    pub capacity: u32,
    #[serde(default)]
    pub prizes: Vec<u32>,
    #[serde(default)]
    pub distance_limit: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(skip)]
    dist: DistCache,
}

impl Instance {
    pub fn tsp(coords: Vec<[f64; 2]>) -> Self {
        Self::raw(ProblemKind::Tsp, coords, Vec::new(), 0, Vec::new(), 0.0)
    }

    /// `coords[0]` is the depot; `demands` covers the customers only.
    pub fn cvrp(coords: Vec<[f64; 2]>, demands: &[u32], capacity: u32) -> Self {
        let mut d = vec![0];
        d.extend_from_slice(demands);
        Self::raw(ProblemKind::Cvrp, coords, d, capacity, Vec::new(), 0.0)
    }

    /// `coords[0]` is the depot; `prizes` covers the customers only.
    pub fn op(coords: Vec<[f64; 2]>, prizes: &[u32], distance_limit: f64) -> Self {
        let mut p = vec![0];
        p.extend_from_slice(prizes);
        Self::raw(ProblemKind::Op, coords, Vec::new(), 0, p, distance_limit)
    }

    fn raw(
        kind: ProblemKind,
        coords: Vec<[f64; 2]>,
        demands: Vec<u32>,
        capacity: u32,
        prizes: Vec<u32>,
        distance_limit: f64,
    ) -> Self {
        Self {
            kind,
            coords,
            demands,
            capacity,
            prizes,
            distance_limit,
            seed: None,
            dist: DistCache::default(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn num_nodes(&self) -> usize {
        self.coords.len()
    }

    /// Problem size: cities for TSP, customers for CVRP and OP.
    pub fn size(&self) -> usize {
        match self.kind {
            ProblemKind::Tsp => self.coords.len(),
            _ => self.coords.len().saturating_sub(1),
        }
    }

    pub fn dist(&self, i: usize, j: usize) -> f64 {
        let n = self.coords.len();
        if n >= DIST_MATRIX_THRESHOLD {
            let m = self.dist.0.get_or_init(|| {
                let mut m = vec![0.0; n * n];
                for a in 0..n {
                    for b in 0..n {
                        m[a * n + b] = euclid(self.coords[a], self.coords[b]);
                    }
                }
                m
            });
            m[i * n + j]
        } else {
            euclid(self.coords[i], self.coords[j])
        }
    }

    pub fn max_prize(&self) -> u32 {
        self.prizes.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidInstance(m));
        if self.coords.len() < 2 {
            return bad(format!("{} nodes is too few", self.coords.len()));
        }
        if let Some(c) = self
            .coords
            .iter()
            .find(|c| !(0.0..=1.0).contains(&c[0]) || !(0.0..=1.0).contains(&c[1]))
        {
            return bad(format!("coordinate {c:?} outside the unit square"));
        }
        let n = self.coords.len();
        match self.kind {
            ProblemKind::Tsp => {}
            ProblemKind::Cvrp => {
                if self.demands.len() != n || self.demands[0] != 0 {
                    return bad("demands must cover every node with 0 at the depot".into());
                }
                if self.capacity < 10 {
                    return bad(format!("capacity {} below 10", self.capacity));
                }
                if let Some(d) = self.demands[1..].iter().find(|&&d| !(1..=10).contains(&d)) {
                    return bad(format!("demand {d} outside 1..=10"));
                }
            }
            ProblemKind::Op => {
                if self.prizes.len() != n || self.prizes[0] != 0 {
                    return bad("prizes must cover every node with 0 at the depot".into());
                }
                if let Some(p) = self.prizes[1..].iter().find(|&&p| !(1..=100).contains(&p)) {
                    return bad(format!("prize {p} outside 1..=100"));
                }
                if !(self.distance_limit > 0.0) {
                    return bad("distance limit must be positive".into());
                }
            }
        }
        Ok(())
    }

    /// Length of the walk visiting `nodes` in order.
    pub fn path_length(&self, nodes: &[usize]) -> f64 {
        nodes.windows(2).map(|w| self.dist(w[0], w[1])).sum()
    }
}

fn euclid(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Problem-specific solution body. CVRP routes and the OP path list
/// customers only; the depot is implicit at both ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Plan {
    Tsp { tour: Vec<usize> },
    Cvrp { routes: Vec<Vec<usize>> },
    Op { path: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub plan: Plan,
    pub objective: f64,
}

impl Solution {
    /// Validates `plan` against `inst` and computes its objective.
    pub fn new(inst: &Instance, plan: Plan) -> Result<Self, EnvError> {
        let objective = objective(inst, &plan)?;
        Ok(Self { plan, objective })
    }

    pub fn kind(&self) -> ProblemKind {
        match self.plan {
            Plan::Tsp { .. } => ProblemKind::Tsp,
            Plan::Cvrp { .. } => ProblemKind::Cvrp,
            Plan::Op { .. } => ProblemKind::Op,
        }
    }
}

/// Tour / route length (TSP, CVRP; minimized) or collected prize (OP;
/// maximized). Fails naming the violated constraint when `plan` is infeasible.
pub fn objective(inst: &Instance, plan: &Plan) -> Result<f64, EnvError> {
    let infeasible = |m: String| Err(EnvError::Infeasible(m));
    let n = inst.num_nodes();
    match (inst.kind, plan) {
        (ProblemKind::Tsp, Plan::Tsp { tour }) => {
            let mut seen = vec![false; n];
            for &c in tour {
                if c >= n || std::mem::replace(&mut seen[c], true) {
                    return infeasible(format!("city {c} repeated or out of range"));
                }
            }
            if tour.len() != n {
                return infeasible(format!("tour visits {} of {n} cities", tour.len()));
            }
            Ok(inst.path_length(tour) + inst.dist(tour[n - 1], tour[0]))
        }
        (ProblemKind::Cvrp, Plan::Cvrp { routes }) => {
            let mut seen = vec![false; n];
            let mut total = 0.0;
            for (r, route) in routes.iter().enumerate() {
                if route.is_empty() {
                    return infeasible(format!("route {r} is empty"));
                }
                let mut load = 0u32;
                let mut prev = 0;
                for &c in route {
                    if c == 0 || c >= n || std::mem::replace(&mut seen[c], true) {
                        return infeasible(format!("customer {c} repeated or out of range"));
                    }
                    load += inst.demands[c];
                    total += inst.dist(prev, c);
                    prev = c;
                }
                total += inst.dist(prev, 0);
                if load > inst.capacity {
                    return infeasible(format!(
                        "capacity: route {r} load {load} exceeds {}",
                        inst.capacity
                    ));
                }
            }
            if let Some(c) = (1..n).find(|&c| !seen[c]) {
                return infeasible(format!("customer {c} not served"));
            }
            Ok(total)
        }
        (ProblemKind::Op, Plan::Op { path }) => {
            let mut seen = vec![false; n];
            let mut prize = 0u32;
            let mut prev = 0;
            let mut length = 0.0;
            for &c in path {
                if c == 0 || c >= n || std::mem::replace(&mut seen[c], true) {
                    return infeasible(format!("customer {c} repeated or out of range"));
                }
                prize += inst.prizes[c];
                length += inst.dist(prev, c);
                prev = c;
            }
            length += inst.dist(prev, 0);
            if length > inst.distance_limit + 1e-9 {
                return infeasible(format!(
                    "distance limit: path length {length} exceeds {}",
                    inst.distance_limit
                ));
            }
            Ok(prize as f64)
        }
        (kind, _) => Err(EnvError::Contract(format!("solution kind does not match {kind} instance"))),
    }
}
