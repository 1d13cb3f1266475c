use crate::numerics::{Scalar, Tensor};

use super::{EnvError, Instance, Plan, ProblemKind, Solution};

/// Identity of a state row, stable across steps. The destination row keeps
/// its own identity because for TSP it duplicates the start node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RowId {
    Node(usize),
    Dest,
}

/// Reduced subproblem at one construction step.
///
/// Rows are `[current, interior…, destination]`. Stepping moves the chosen
/// interior node to row 0 and drops the previous row 0; the other interior
/// nodes keep their relative order.
#[derive(Clone, Debug)]
pub struct State<'a> {
    inst: &'a Instance,
    current: usize,
    interior: Vec<usize>,
    dest: usize,
    capacity_left: u32,
    budget_left: f64,
    step: usize,
    length: f64,
    prize: u32,
    trail: Vec<usize>,
    done: bool,
}

impl<'a> State<'a> {
    /// Initial state: TSP starts at node 0 and returns to it, CVRP and OP
    /// start and end at the depot.
    pub fn initial(inst: &'a Instance) -> Self {
        let (interior, capacity, budget) = match inst.kind {
            ProblemKind::Tsp => ((1..inst.num_nodes()).collect(), 0, 0.0),
            ProblemKind::Cvrp => ((1..inst.num_nodes()).collect(), inst.capacity, 0.0),
            ProblemKind::Op => ((1..inst.num_nodes()).collect(), 0, inst.distance_limit),
        };
        Self::assemble(inst, 0, interior, 0, capacity, budget)
    }

    /// Path-TSP subproblem over nodes of `inst`: from `start` through every
    /// node of `interior` to `end`.
    pub fn path_tsp(inst: &'a Instance, start: usize, interior: Vec<usize>, end: usize) -> Self {
        assert_eq!(inst.kind, ProblemKind::Tsp);
        Self::assemble(inst, start, interior, end, 0, 0.0)
    }

    /// CVRP subproblem: the vehicle stands at `start` (a customer already
    /// served, or the depot) with `capacity_left`, and must serve
    /// `customers` before returning to the depot.
    pub fn cvrp_from(inst: &'a Instance, start: usize, customers: Vec<usize>, capacity_left: u32) -> Self {
        assert_eq!(inst.kind, ProblemKind::Cvrp);
        Self::assemble(inst, start, customers, 0, capacity_left, 0.0)
    }

    fn assemble(
        inst: &'a Instance,
        current: usize,
        interior: Vec<usize>,
        dest: usize,
        capacity_left: u32,
        budget_left: f64,
    ) -> Self {
        let mut s = Self {
            inst,
            current,
            interior,
            dest,
            capacity_left,
            budget_left,
            step: 0,
            length: 0.0,
            prize: 0,
            trail: vec![current],
            done: false,
        };
        if s.kind() != ProblemKind::Op && s.interior.is_empty() {
            s.finish();
        }
        s
    }

    fn finish(&mut self) {
        self.length += self.inst.dist(self.current, self.dest);
        self.trail.push(self.dest);
        self.done = true;
    }

    pub fn instance(&self) -> &'a Instance {
        self.inst
    }

    pub fn kind(&self) -> ProblemKind {
        self.inst.kind
    }

    /// Number of rows `n_t`.
    pub fn num_rows(&self) -> usize {
        self.interior.len() + 2
    }

    pub fn current(&self) -> usize {
        self.current
    }

    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    pub fn dest(&self) -> usize {
        self.dest
    }

    /// Instance node behind every row.
    pub fn nodes(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.num_rows());
        v.push(self.current);
        v.extend_from_slice(&self.interior);
        v.push(self.dest);
        v
    }

    pub fn row_ids(&self) -> Vec<RowId> {
        let mut v = Vec::with_capacity(self.num_rows());
        v.push(RowId::Node(self.current));
        v.extend(self.interior.iter().map(|&i| RowId::Node(i)));
        v.push(RowId::Dest);
        v
    }

    pub fn capacity_left(&self) -> u32 {
        self.capacity_left
    }

    pub fn budget_left(&self) -> f64 {
        self.budget_left
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Distance travelled so far (including the final leg once done).
    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn prize(&self) -> u32 {
        self.prize
    }

    /// Objective accumulated so far: length, or prize for OP.
    pub fn cost(&self) -> f64 {
        match self.kind() {
            ProblemKind::Op => self.prize as f64,
            _ => self.length,
        }
    }

    /// Visited nodes in order, starting with the initial position. CVRP
    /// trips through the depot appear as depot entries.
    pub fn trail(&self) -> &[usize] {
        &self.trail
    }

    pub fn num_actions(&self) -> usize {
        match self.kind() {
            ProblemKind::Cvrp => 2 * self.interior.len(),
            _ => self.num_rows(),
        }
    }

    /// Node features, one row per state row.
    pub fn features<F: Scalar>(&self) -> Tensor<F> {
        let d = self.kind().feature_dim();
        let n = self.num_rows();
        let mut out = Vec::with_capacity(n * d);
        let last = n - 1;
        let inst = self.inst;
        let q = inst.capacity.max(1) as f64;
        let max_prize = inst.max_prize().max(1) as f64;
        for (r, node) in self.nodes().into_iter().enumerate() {
            let [x, y] = inst.coords[node];
            out.push(F::of(x));
            out.push(F::of(y));
            let interior = r != 0 && r != last;
            match self.kind() {
                ProblemKind::Tsp => {}
                ProblemKind::Cvrp => {
                    let demand = if interior { inst.demands[node] as f64 } else { 0.0 };
                    out.push(F::of(demand / q));
                    out.push(F::of(self.capacity_left as f64 / q));
                }
                ProblemKind::Op => {
                    let prize = if interior { inst.prizes[node] as f64 } else { 0.0 };
                    out.push(F::of(prize / max_prize));
                    out.push(F::of(self.budget_left));
                }
            }
        }
        Tensor::matrix(n, d, out)
    }

    /// Feasibility of each action. TSP/OP: one entry per row; CVRP: direct
    /// visits of the interior customers followed by visits via the depot.
    pub fn feasible_mask(&self) -> Result<Vec<bool>, EnvError> {
        if self.done {
            return Err(EnvError::Contract("mask requested for a terminal state".into()));
        }
        let inst = self.inst;
        Ok(match self.kind() {
            ProblemKind::Tsp => {
                let mut m = vec![false; self.num_rows()];
                m[1..=self.interior.len()].iter_mut().for_each(|x| *x = true);
                *m.last_mut().unwrap() = self.interior.is_empty();
                m
            }
            ProblemKind::Cvrp => {
                let mut m: Vec<bool> = self
                    .interior
                    .iter()
                    .map(|&c| inst.demands[c] <= self.capacity_left)
                    .collect();
                m.extend(self.interior.iter().map(|&c| inst.demands[c] <= inst.capacity));
                m
            }
            ProblemKind::Op => {
                let mut m = vec![false];
                m.extend(self.interior.iter().map(|&c| {
                    inst.dist(self.current, c) + inst.dist(c, self.dest) <= self.budget_left
                }));
                m.push(true);
                m
            }
        })
    }

    /// Applies `action` in place.
    pub fn apply(&mut self, action: usize) -> Result<(), EnvError> {
        let mask = self.feasible_mask()?;
        if !mask.get(action).copied().unwrap_or(false) {
            return Err(EnvError::InfeasibleAction {
                step: self.step,
                action,
            });
        }
        let inst = self.inst;
        self.step += 1;
        match self.kind() {
            ProblemKind::Tsp => {
                let next = self.interior.remove(action - 1);
                self.length += inst.dist(self.current, next);
                self.move_to(next);
                if self.interior.is_empty() {
                    self.finish();
                }
            }
            ProblemKind::Cvrp => {
                let m = self.interior.len();
                let (via_depot, idx) = if action < m { (false, action) } else { (true, action - m) };
                let next = self.interior.remove(idx);
                if via_depot {
                    if self.current != self.dest {
                        self.length += inst.dist(self.current, self.dest);
                        self.trail.push(self.dest);
                    }
                    self.current = self.dest;
                    self.capacity_left = inst.capacity;
                }
                self.length += inst.dist(self.current, next);
                self.capacity_left -= inst.demands[next];
                self.move_to(next);
                if self.interior.is_empty() {
                    self.finish();
                }
            }
            ProblemKind::Op => {
                if action == self.num_rows() - 1 {
                    self.finish();
                } else {
                    let next = self.interior.remove(action - 1);
                    let leg = inst.dist(self.current, next);
                    self.length += leg;
                    self.budget_left -= leg;
                    self.prize += inst.prizes[next];
                    self.move_to(next);
                }
            }
        }
        Ok(())
    }

    fn move_to(&mut self, node: usize) {
        self.current = node;
        self.trail.push(node);
    }

    /// Functional form of [`State::apply`]: returns the successor and whether
    /// it is terminal.
    pub fn step(&self, action: usize) -> Result<(State<'a>, bool), EnvError> {
        let mut next = self.clone();
        next.apply(action)?;
        let done = next.done;
        Ok((next, done))
    }

    /// Complete solution of a finished episode started by [`State::initial`].
    pub fn solution(&self) -> Result<Solution, EnvError> {
        if !self.done {
            return Err(EnvError::Contract("episode is not finished".into()));
        }
        let t = &self.trail;
        let plan = match self.kind() {
            ProblemKind::Tsp => Plan::Tsp {
                tour: t[..t.len() - 1].to_vec(),
            },
            ProblemKind::Cvrp => Plan::Cvrp {
                routes: t
                    .split(|&n| n == 0)
                    .filter(|r| !r.is_empty())
                    .map(<[usize]>::to_vec)
                    .collect(),
            },
            ProblemKind::Op => Plan::Op {
                path: t[1..t.len() - 1].to_vec(),
            },
        };
        Solution::new(self.inst, plan)
    }
}

/// Rebuilds the solution reached by following `actions` from the initial state.
pub fn replay(inst: &Instance, actions: &[usize]) -> Result<Solution, EnvError> {
    let mut s = State::initial(inst);
    if s.is_done() {
        return Err(EnvError::TerminalAtStart);
    }
    for (i, &a) in actions.iter().enumerate() {
        if s.is_done() {
            return Err(EnvError::Contract(format!("{} actions left after the episode ended", actions.len() - i)));
        }
        s.apply(a).map_err(|e| match e {
            EnvError::InfeasibleAction { action, .. } => EnvError::InfeasibleAction { step: i, action },
            e => e,
        })?;
    }
    if !s.is_done() {
        return Err(EnvError::Incomplete(actions.len()));
    }
    s.solution()
}
