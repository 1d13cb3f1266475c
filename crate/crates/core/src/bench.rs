//! Relative gap, timed batch-size-1 evaluation, CSV reports and closed-form
//! encoder FLOP estimates.

use std::io::{Read, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Instance, State};
use crate::model::{ModelConfig, Model, ModelError};
use crate::numerics::Scalar;
use crate::oracle::{solve_exact, OracleError};
use crate::search::{beam_search, greedy_rollout, CallCounts, SearchError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("evaluation: {0}")]
    Eval(String),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Percent gap of `f_test` to `f_ref`; positive means worse for both senses.
pub fn relative_gap(f_ref: f64, f_test: f64, maximize: bool) -> Result<f64, BenchError> {
    if !(f_ref > 0.0) {
        return Err(BenchError::Domain(format!("reference objective {f_ref} is not positive")));
    }
    Ok(if maximize {
        100.0 * (f_ref - f_test) / f_ref
    } else {
        100.0 * (f_test - f_ref) / f_ref
    })
}

/// Source of timestamps in seconds.
pub trait Clock {
    fn now(&mut self) -> f64;
}

/// Monotonic wall clock.
pub struct WallClock(Instant);

impl Default for WallClock {
    fn default() -> Self {
        Self(Instant::now())
    }
}

impl Clock for WallClock {
    fn now(&mut self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// One evaluated (instance, method) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub instance_id: usize,
    pub problem: String,
    pub n: usize,
    pub method: String,
    #[serde(rename = "L_E")]
    pub l_e: usize,
    #[serde(rename = "L_U")]
    pub l_u: usize,
    pub d: usize,
    pub k: usize,
    pub beam: usize,
    pub objective: f64,
    pub ref_objective: f64,
    pub gap_pct: f64,
    pub time_s: f64,
    pub base_calls: usize,
    pub rec_calls: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub method: String,
    pub l_e: usize,
    pub l_u: usize,
    pub d: usize,
    pub k: usize,
    pub beam: usize,
    pub count: usize,
    pub mean_gap: f64,
    pub mean_time_s: f64,
    pub base_calls: usize,
    pub rec_calls: usize,
}

impl EvalReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), BenchError> {
        let mut wr = csv::Writer::from_writer(w);
        if self.rows.is_empty() {
            wr.write_record(CSV_COLUMNS)?;
        }
        for r in &self.rows {
            wr.serialize(r)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, BenchError> {
        let rows = csv::Reader::from_reader(r).deserialize().collect::<Result<Vec<EvalRow>, _>>()?;
        Ok(Self { rows })
    }

    /// Means per (method, L_E, L_U, d, k, beam), in first-seen order.
    pub fn aggregate(&self) -> Vec<Aggregate> {
        let mut out: Vec<Aggregate> = Vec::new();
        for r in &self.rows {
            let a = match out.iter_mut().find(|a| {
                (&a.method, a.l_e, a.l_u, a.d, a.k, a.beam) == (&r.method, r.l_e, r.l_u, r.d, r.k, r.beam)
            }) {
                Some(a) => a,
                None => {
                    out.push(Aggregate {
                        method: r.method.clone(),
                        l_e: r.l_e,
                        l_u: r.l_u,
                        d: r.d,
                        k: r.k,
                        beam: r.beam,
                        count: 0,
                        mean_gap: 0.0,
                        mean_time_s: 0.0,
                        base_calls: 0,
                        rec_calls: 0,
                    });
                    out.last_mut().unwrap()
                }
            };
            a.count += 1;
            a.mean_gap += r.gap_pct;
            a.mean_time_s += r.time_s;
            a.base_calls += r.base_calls;
            a.rec_calls += r.rec_calls;
        }
        for a in &mut out {
            a.mean_gap /= a.count as f64;
            a.mean_time_s /= a.count as f64;
        }
        out
    }

    pub fn mean_gap(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.gap_pct).sum::<f64>() / self.rows.len() as f64
    }
}

pub const CSV_COLUMNS: [&str; 15] = [
    "instance_id",
    "problem",
    "n",
    "method",
    "L_E",
    "L_U",
    "d",
    "k",
    "beam",
    "objective",
    "ref_objective",
    "gap_pct",
    "time_s",
    "base_calls",
    "rec_calls",
];

/// Evaluation grid: every model is decoded with every (k, beam) pair; a beam
/// of 1 means greedy decoding.
#[derive(Clone, Debug)]
pub struct EvalSpec {
    pub ks: Vec<usize>,
    pub beams: Vec<usize>,
    /// Add rows for the exact oracle.
    pub oracle: bool,
}

fn row_for(inst: &Instance, id: usize, method: &str, reference: f64, objective: f64) -> Result<EvalRow, BenchError> {
    Ok(EvalRow {
        instance_id: id,
        problem: inst.kind.name().into(),
        n: inst.size(),
        method: method.into(),
        l_e: 0,
        l_u: 0,
        d: 0,
        k: 0,
        beam: 0,
        objective,
        ref_objective: reference,
        gap_pct: relative_gap(reference, objective, inst.kind.maximize())?,
        time_s: 0.0,
        base_calls: 0,
        rec_calls: 0,
    })
}

/// Solves every instance one at a time and times each solve with `clock`.
/// `L_U` and `d` describe the encoder used after the first step: the
/// recurrent one when `k > 1`, otherwise the base one (`L_U = 0`). Models
/// without a recurrent encoder are only run at the `k = 1` entries.
pub fn run_eval<F: Scalar, C: Clock>(
    models: &[&Model<F>],
    instances: &[Instance],
    references: &[f64],
    spec: &EvalSpec,
    clock: &mut C,
) -> Result<EvalReport, BenchError> {
    if instances.len() != references.len() {
        return Err(BenchError::Eval(format!(
            "{} instances but {} reference objectives",
            instances.len(),
            references.len()
        )));
    }
    for m in models {
        if let Some(i) = instances.iter().find(|i| i.kind != m.kind()) {
            return Err(BenchError::Eval(format!("{} model on a {} instance", m.kind(), i.kind)));
        }
    }
    let mut rows = Vec::new();
    for (id, (inst, &reference)) in instances.iter().zip(references).enumerate() {
        for m in models {
            let cfg = &m.config;
            for &k in spec.ks.iter().filter(|&&k| k == 1 || cfg.recurrent.is_some()) {
                for &b in &spec.beams {
                    let t0 = clock.now();
                    let r = if b <= 1 {
                        greedy_rollout(*m, inst, k)?
                    } else {
                        beam_search(*m, inst, k, b)?
                    };
                    let elapsed = clock.now() - t0;
                    let mut row = row_for(inst, id, if b <= 1 { "greedy" } else { "beam" }, reference, r.solution.objective)?;
                    let rec = cfg.recurrent.filter(|_| k > 1);
                    row.l_e = cfg.base.layers;
                    row.l_u = rec.map_or(0, |r| r.layers);
                    row.d = rec.map_or(cfg.base.dim, |r| r.dim);
                    row.k = k;
                    row.beam = b.max(1);
                    row.time_s = elapsed;
                    row.base_calls = r.calls.base;
                    row.rec_calls = r.calls.recurrent;
                    rows.push(row);
                }
            }
        }
        if spec.oracle {
            let t0 = clock.now();
            let sol = solve_exact(inst)?;
            let elapsed = clock.now() - t0;
            let mut row = row_for(inst, id, "oracle", reference, sol.objective)?;
            row.time_s = elapsed;
            rows.push(row);
        }
    }
    Ok(EvalReport { rows })
}

/// FLOPs of one transformer block on `n` rows (multiply-adds count two).
pub fn block_flops(n: usize, d: usize, ff: usize) -> f64 {
    let (n, d, ff) = (n as f64, d as f64, ff as f64);
    8.0 * n * d * d + 4.0 * n * n * d + 4.0 * n * d * ff
}

/// Closed-form FLOPs of one base-encoder and one recurrent-encoder call on a
/// state with `n` rows.
pub fn encoder_flops(cfg: &ModelConfig, n: usize) -> (f64, f64) {
    let f = cfg.feature_dim() as f64;
    let nf = n as f64;
    let b = cfg.base;
    let de = b.dim as f64;
    let base = 2.0 * nf * f * de + b.layers as f64 * block_flops(n, b.dim, b.ff);
    let rec = cfg.recurrent.map_or(0.0, |r| {
        let du = r.dim as f64;
        2.0 * nf * f * du
            + 2.0 * nf * (du + de) * du
            + r.layers as f64 * block_flops(n, r.dim, r.ff)
            + 2.0 * nf * du * de
    });
    (base, rec)
}

/// Mean seconds per base-encoder call and per recurrent-encoder call
/// (including alignment) on `state` and its successor, over `reps` calls.
pub fn time_encoders<F: Scalar, C: Clock>(
    model: &Model<F>,
    state: &State<'_>,
    action: usize,
    reps: usize,
    clock: &mut C,
) -> Result<(f64, f64), BenchError> {
    let prev = model.base_embed(state)?;
    let (next, _) = state.step(action).map_err(ModelError::from)?;
    let mut calls = CallCounts::default();
    let t0 = clock.now();
    for _ in 0..reps {
        std::hint::black_box(model.base_embed(state)?);
        calls.base += 1;
    }
    let t1 = clock.now();
    for _ in 0..reps {
        std::hint::black_box(model.recurrent_embed(&prev, &next)?);
        calls.recurrent += 1;
    }
    let t2 = clock.now();
    Ok(((t1 - t0) / calls.base as f64, (t2 - t1) / calls.recurrent as f64))
}
