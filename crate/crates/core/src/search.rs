//! Greedy decoding, beam search and large neighborhood search.
//!
//! Every decoder follows the same recompute schedule: at step `t` (counted
//! from the state the search starts in) the base encoder embeds the state
//! when `t % k == 0`, otherwise the recurrent encoder updates the previous
//! embeddings.

use std::rc::Rc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvError, Instance, Plan, ProblemKind, Solution, State};
use crate::model::{Embeddings, Model, ModelError};
use crate::numerics::Scalar;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("search configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Number of base and recurrent encoder invocations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub base: usize,
    pub recurrent: usize,
}

impl std::ops::AddAssign for CallCounts {
    fn add_assign(&mut self, o: Self) {
        self.base += o.base;
        self.recurrent += o.recurrent;
    }
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub solution: Solution,
    pub actions: Vec<usize>,
    pub calls: CallCounts,
}

fn check_k<F: Scalar>(model: &Model<F>, k: usize) -> Result<(), SearchError> {
    if k == 0 {
        return Err(SearchError::Config("k must be at least 1".into()));
    }
    if k > 1 && !model.has_recurrent() {
        return Err(SearchError::Config(format!("k = {k} needs a recurrent encoder")));
    }
    Ok(())
}

fn embed<F: Scalar>(
    model: &Model<F>,
    state: &State<'_>,
    prev: Option<&Embeddings<F>>,
    t: usize,
    k: usize,
    calls: &mut CallCounts,
) -> Result<Embeddings<F>, SearchError> {
    match prev {
        Some(p) if t % k != 0 => {
            calls.recurrent += 1;
            Ok(model.recurrent_embed(p, state)?)
        }
        _ => {
            calls.base += 1;
            Ok(model.base_embed(state)?)
        }
    }
}

/// Lowest index among the maximal entries of `p` restricted to `mask`.
fn argmax<F: Scalar>(p: &[F], mask: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (&pi, &m)) in p.iter().zip(mask).enumerate() {
        if m && best.is_none_or(|b| pi > p[b]) {
            best = Some(i);
        }
    }
    best
}

/// Greedy decoding from an arbitrary (non-terminal) state.
pub fn greedy_from<'a, F: Scalar>(
    model: &Model<F>,
    mut state: State<'a>,
    k: usize,
) -> Result<(State<'a>, Vec<usize>, CallCounts), SearchError> {
    check_k(model, k)?;
    let mut calls = CallCounts::default();
    let mut actions = Vec::new();
    let mut prev: Option<Embeddings<F>> = None;
    let mut t = 0;
    while !state.is_done() {
        let e = embed(model, &state, prev.as_ref(), t, k, &mut calls)?;
        let mask = state.feasible_mask()?;
        let p = model.probs(&e.h, &mask)?;
        let a = argmax(&p, &mask).ok_or_else(|| SearchError::Config("no feasible action".into()))?;
        state.apply(a)?;
        actions.push(a);
        prev = Some(e);
        t += 1;
    }
    Ok((state, actions, calls))
}

pub fn greedy_rollout<F: Scalar>(model: &Model<F>, inst: &Instance, k: usize) -> Result<Rollout, SearchError> {
    let start = State::initial(inst);
    if start.is_done() {
        return Err(EnvError::TerminalAtStart.into());
    }
    let (end, actions, calls) = greedy_from(model, start, k)?;
    Ok(Rollout {
        solution: end.solution()?,
        actions,
        calls,
    })
}

/// Uniformly random feasible actions until the episode ends.
pub fn random_rollout<R: Rng>(inst: &Instance, rng: &mut R) -> Result<Solution, SearchError> {
    let mut s = State::initial(inst);
    while !s.is_done() {
        let mask = s.feasible_mask()?;
        let feasible: Vec<usize> = (0..mask.len()).filter(|&a| mask[a]).collect();
        s.apply(*feasible.choose(rng).expect("non-terminal states have a feasible action"))?;
    }
    Ok(s.solution()?)
}

/// A partial solution in the beam.
#[derive(Clone)]
pub struct BeamHypothesis<'a, F: Scalar> {
    pub state: State<'a>,
    pub embeddings: Option<Rc<Embeddings<F>>>,
    pub log_prob: f64,
    pub actions: Vec<usize>,
}

/// Finished beam entries, best objective first.
pub struct BeamOutcome<'a> {
    pub finished: Vec<(State<'a>, Vec<usize>, f64)>,
    pub calls: CallCounts,
}

/// Beam search of width `b` from `start`, ranked by cumulative
/// log-probability. Hypotheses that finish leave the beam; the outcome lists
/// them ordered by objective (ties keep beam order).
pub fn beam_from<'a, F: Scalar>(
    model: &Model<F>,
    start: State<'a>,
    k: usize,
    b: usize,
) -> Result<BeamOutcome<'a>, SearchError> {
    check_k(model, k)?;
    if b == 0 {
        return Err(SearchError::Config("beam width must be at least 1".into()));
    }
    let kind = start.kind();
    let mut calls = CallCounts::default();
    let mut finished = Vec::new();
    if start.is_done() {
        let c = start.cost();
        finished.push((start, Vec::new(), c));
        return Ok(BeamOutcome { finished, calls });
    }
    let mut beam = vec![BeamHypothesis {
        state: start,
        embeddings: None,
        log_prob: 0.0,
        actions: Vec::new(),
    }];
    let mut t = 0;
    while !beam.is_empty() {
        // (log-prob, parent, action)
        let mut cands = Vec::new();
        let mut embs = Vec::with_capacity(beam.len());
        for (pi, h) in beam.iter().enumerate() {
            let e = Rc::new(embed(model, &h.state, h.embeddings.as_deref(), t, k, &mut calls)?);
            let mask = h.state.feasible_mask()?;
            let p = model.probs(&e.h, &mask)?;
            for (a, (&pa, &m)) in p.iter().zip(&mask).enumerate() {
                if m {
                    cands.push((h.log_prob + pa.as_f64().ln(), pi, a));
                }
            }
            embs.push(e);
        }
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        cands.truncate(b);
        let mut next = Vec::with_capacity(cands.len());
        for (lp, pi, a) in cands {
            let parent = &beam[pi];
            let mut state = parent.state.clone();
            state.apply(a)?;
            let mut actions = parent.actions.clone();
            actions.push(a);
            if state.is_done() {
                let c = state.cost();
                finished.push((state, actions, c));
            } else {
                next.push(BeamHypothesis {
                    state,
                    embeddings: Some(Rc::clone(&embs[pi])),
                    log_prob: lp,
                    actions,
                });
            }
        }
        beam = next;
        t += 1;
    }
    // stable sort keeps log-prob order among equal objectives
    if kind.maximize() {
        finished.sort_by(|x, y| y.2.total_cmp(&x.2));
    } else {
        finished.sort_by(|x, y| x.2.total_cmp(&y.2));
    }
    Ok(BeamOutcome { finished, calls })
}

pub fn beam_search<F: Scalar>(model: &Model<F>, inst: &Instance, k: usize, b: usize) -> Result<Rollout, SearchError> {
    let start = State::initial(inst);
    if start.is_done() {
        return Err(EnvError::TerminalAtStart.into());
    }
    let out = beam_from(model, start, k, b)?;
    let (state, actions, _) = out.finished.into_iter().next().expect("beam finishes at least one hypothesis");
    Ok(Rollout {
        solution: state.solution()?,
        actions,
        calls: out.calls,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LnsConfig {
    pub k_init: usize,
    pub k_sub: usize,
    pub b_init: usize,
    pub b_sub: usize,
    pub t_max: usize,
    pub n_sub: usize,
    pub seed: u64,
    #[serde(default)]
    pub budget_secs: Option<f64>,
}

impl Default for LnsConfig {
    fn default() -> Self {
        Self {
            k_init: 1000,
            k_sub: 1000,
            b_init: 16,
            b_sub: 16,
            t_max: 100,
            n_sub: 20,
            seed: 0,
            budget_secs: None,
        }
    }
}

impl LnsConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        if self.n_sub < 4 {
            return Err(SearchError::Config(format!("n_sub = {} below 4", self.n_sub)));
        }
        if self.b_init == 0 || self.b_sub == 0 {
            return Err(SearchError::Config("beam widths must be at least 1".into()));
        }
        Ok(())
    }
}

/// Path-TSP segment of a tour: `nodes[0]` and the last node stay fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct TspSegment {
    /// Position of `nodes[0]` in the tour.
    pub offset: usize,
    pub nodes: Vec<usize>,
}

/// Splits the tour, rotated by a random offset, into consecutive disjoint
/// segments of `n_sub` nodes; a shorter remainder is left out.
pub fn sample_subproblems_tsp<R: Rng>(tour: &[usize], n_sub: usize, rng: &mut R) -> Result<Vec<TspSegment>, SearchError> {
    let n = tour.len();
    if n_sub > n || n_sub < 3 {
        return Err(SearchError::Config(format!("segment size {n_sub} invalid for a tour of {n}")));
    }
    let off = rng.gen_range(0..n);
    Ok((0..n / n_sub)
        .map(|i| {
            let offset = (off + i * n_sub) % n;
            TspSegment {
                offset,
                nodes: (0..n_sub).map(|j| tour[(offset + j) % n]).collect(),
            }
        })
        .collect())
}

/// Replaces the segment starting at `seg.offset` by `new_nodes` (same
/// endpoints, same node set).
pub fn splice_tsp(tour: &[usize], seg: &TspSegment, new_nodes: &[usize]) -> Vec<usize> {
    let n = tour.len();
    let mut out = tour.to_vec();
    for (j, &c) in new_nodes.iter().enumerate() {
        out[(seg.offset + j) % n] = c;
    }
    out
}

/// A CVRP window over the flattened depot-separated sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct CvrpWindow {
    /// Flattened solution `[0, r1…, 0, r2…, 0, …, 0]` in the sampled route order.
    pub sequence: Vec<usize>,
    /// Inclusive window bounds in `sequence`; `sequence[end]` is a depot visit.
    pub start: usize,
    pub end: usize,
    /// Capacity left after serving `sequence[start]`.
    pub capacity_left: u32,
}

impl CvrpWindow {
    pub fn start_node(&self) -> usize {
        self.sequence[self.start]
    }

    /// Customers strictly inside the window.
    pub fn customers(&self) -> Vec<usize> {
        self.sequence[self.start + 1..self.end].iter().copied().filter(|&c| c != 0).collect()
    }

    pub fn nodes(&self) -> &[usize] {
        &self.sequence[self.start..=self.end]
    }
}

pub fn flatten_routes(routes: &[Vec<usize>]) -> Vec<usize> {
    let mut seq = vec![0];
    for r in routes {
        seq.extend_from_slice(r);
        seq.push(0);
    }
    seq
}

pub fn unflatten_routes(seq: &[usize]) -> Vec<Vec<usize>> {
    seq.split(|&c| c == 0).filter(|r| !r.is_empty()).map(<[usize]>::to_vec).collect()
}

/// Shuffles the route order, then picks a window of at most `n_sub` nodes
/// ending at a uniformly chosen depot visit. `None` when the window holds no
/// customer to reorder.
pub fn sample_subproblem_cvrp<R: Rng>(
    inst: &Instance,
    routes: &[Vec<usize>],
    n_sub: usize,
    rng: &mut R,
) -> Option<CvrpWindow> {
    if routes.is_empty() {
        return None;
    }
    let mut order = routes.to_vec();
    order.shuffle(rng);
    let sequence = flatten_routes(&order);
    let depots: Vec<usize> = (1..sequence.len()).filter(|&i| sequence[i] == 0).collect();
    let end = *depots.choose(rng)?;
    let start = (end + 1).saturating_sub(n_sub);
    let mut load = 0;
    for &c in sequence[..=start].iter().rev() {
        if c == 0 {
            break;
        }
        load += inst.demands[c];
    }
    let w = CvrpWindow {
        capacity_left: inst.capacity.saturating_sub(load),
        sequence,
        start,
        end,
    };
    (!w.customers().is_empty()).then_some(w)
}

/// Replaces the window's nodes by `trail` (which starts at the window's
/// start node and ends at the depot) and returns the new routes.
pub fn splice_cvrp(w: &CvrpWindow, trail: &[usize]) -> Vec<Vec<usize>> {
    let mut seq = w.sequence[..w.start].to_vec();
    seq.extend_from_slice(trail);
    seq.extend_from_slice(&w.sequence[w.end + 1..]);
    unflatten_routes(&seq)
}

/// Applies an accepted sub-solution: checks the strict improvement, splices
/// and validates the result.
pub fn update_solution(
    inst: &Instance,
    x: &Solution,
    new_plan: Plan,
    f_sub_old: f64,
    f_sub_new: f64,
) -> Result<Solution, SearchError> {
    if f_sub_new >= f_sub_old {
        return Err(SearchError::Config("sub-solution does not improve".into()));
    }
    let s = Solution::new(inst, new_plan)?;
    let expected = x.objective - (f_sub_old - f_sub_new);
    if (s.objective - expected).abs() > 1e-9 * expected.abs().max(1.0) {
        return Err(SearchError::Config(format!(
            "splice changed the objective by {} instead of {}",
            x.objective - s.objective,
            f_sub_old - f_sub_new
        )));
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub elapsed_s: f64,
    pub objective: f64,
}

#[derive(Clone, Debug)]
pub struct LnsResult {
    pub solution: Solution,
    pub trace: Vec<TraceRow>,
    pub calls: CallCounts,
}

fn lns_tsp_iteration<F: Scalar, R: Rng>(
    model: &Model<F>,
    inst: &Instance,
    x: Solution,
    cfg: &LnsConfig,
    rng: &mut R,
    calls: &mut CallCounts,
) -> Result<Solution, SearchError> {
    let Plan::Tsp { tour } = &x.plan else {
        return Err(SearchError::Config("TSP search got a non-TSP solution".into()));
    };
    let mut tour = tour.clone();
    let mut x = x;
    for seg in sample_subproblems_tsp(&tour, cfg.n_sub, rng)? {
        let n = seg.nodes.len();
        let f_old = inst.path_length(&seg.nodes);
        let state = State::path_tsp(inst, seg.nodes[0], seg.nodes[1..n - 1].to_vec(), seg.nodes[n - 1]);
        let out = beam_from(model, state, cfg.k_sub, cfg.b_sub)?;
        *calls += out.calls;
        let (best, _, f_new) = &out.finished[0];
        if *f_new < f_old {
            let new_tour = splice_tsp(&tour, &seg, best.trail());
            x = update_solution(inst, &x, Plan::Tsp { tour: new_tour.clone() }, f_old, *f_new)?;
            tour = new_tour;
        }
    }
    Ok(x)
}

fn lns_cvrp_iteration<F: Scalar, R: Rng>(
    model: &Model<F>,
    inst: &Instance,
    x: Solution,
    cfg: &LnsConfig,
    rng: &mut R,
    calls: &mut CallCounts,
) -> Result<Solution, SearchError> {
    let Plan::Cvrp { routes } = &x.plan else {
        return Err(SearchError::Config("CVRP search got a non-CVRP solution".into()));
    };
    let Some(w) = sample_subproblem_cvrp(inst, routes, cfg.n_sub, rng) else {
        return Ok(x);
    };
    let f_old = inst.path_length(w.nodes());
    let state = State::cvrp_from(inst, w.start_node(), w.customers(), w.capacity_left);
    let out = beam_from(model, state, cfg.k_sub, cfg.b_sub)?;
    *calls += out.calls;
    let (best, _, f_new) = &out.finished[0];
    if *f_new < f_old {
        let plan = Plan::Cvrp {
            routes: splice_cvrp(&w, best.trail()),
        };
        return update_solution(inst, &x, plan, f_old, *f_new);
    }
    Ok(x)
}

/// Improves `initial` for at most `cfg.t_max` iterations (or the wall-clock
/// budget). The trace starts with the initial objective at iteration 0 and
/// gets one row per completed iteration.
pub fn lns_improve<F: Scalar, R: Rng>(
    model: &Model<F>,
    inst: &Instance,
    initial: Solution,
    cfg: &LnsConfig,
    rng: &mut R,
) -> Result<LnsResult, SearchError> {
    cfg.validate()?;
    if inst.kind == ProblemKind::Op {
        return Err(SearchError::Config("LNS supports TSP and CVRP only".into()));
    }
    let clock = Instant::now();
    let budget = cfg.budget_secs.map(Duration::from_secs_f64);
    let mut calls = CallCounts::default();
    let mut x = initial;
    let mut trace = vec![TraceRow {
        iteration: 0,
        elapsed_s: clock.elapsed().as_secs_f64(),
        objective: x.objective,
    }];
    for it in 1..=cfg.t_max {
        if budget.is_some_and(|b| clock.elapsed() >= b) {
            break;
        }
        x = match inst.kind {
            ProblemKind::Tsp => lns_tsp_iteration(model, inst, x, cfg, rng, &mut calls)?,
            _ => lns_cvrp_iteration(model, inst, x, cfg, rng, &mut calls)?,
        };
        trace.push(TraceRow {
            iteration: it,
            elapsed_s: clock.elapsed().as_secs_f64(),
            objective: x.objective,
        });
    }
    Ok(LnsResult {
        solution: x,
        trace,
        calls,
    })
}

/// Beam-search construction followed by [`lns_improve`].
pub fn lns_run<F: Scalar, R: Rng>(
    model: &Model<F>,
    inst: &Instance,
    cfg: &LnsConfig,
    rng: &mut R,
) -> Result<LnsResult, SearchError> {
    cfg.validate()?;
    if inst.kind == ProblemKind::Op {
        return Err(SearchError::Config("LNS supports TSP and CVRP only".into()));
    }
    let init = beam_search(model, inst, cfg.k_init, cfg.b_init)?;
    let mut r = lns_improve(model, inst, init.solution, cfg, rng)?;
    let mut calls = init.calls;
    calls += r.calls;
    r.calls = calls;
    Ok(r)
}
