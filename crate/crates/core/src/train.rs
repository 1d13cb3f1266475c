//! Imitation learning: the base model on single expert steps, then the
//! recurrent encoder on k-step segments with the base model frozen.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{relative_gap, BenchError};
use crate::env::{EnvError, Instance, State};
use crate::model::{
    align_indices, base_encode, decode_logits, is_base_param, is_recurrent_param, recurrent_encode, Model, ModelConfig,
    ModelError,
};
use crate::numerics::{Gradients, Graph, NumericsError, ParamStore, Scalar, Tensor, Var};
use crate::oracle::Trajectory;
use crate::search::{greedy_rollout, SearchError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training configuration: {0}")]
    Config(String),
    #[error("expert trajectory {0} is not feasible: {1}")]
    Corrupt(usize, EnvError),
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// BPTT horizon (recurrent stage) and validation recompute interval.
    pub k: usize,
    pub seed: u64,
    /// Validate every this many epochs (and after the last one).
    pub val_every: usize,
    /// Stop after the first epoch that ends past this many seconds.
    pub max_seconds: Option<f64>,
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 64,
            steps_per_epoch: 500,
            max_epochs: 100,
            patience: 10,
            k: 5,
            seed: 0,
            val_every: 1,
            max_seconds: None,
            verbose: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 || self.val_every == 0 {
            return bad("batch size, steps per epoch and validation cadence must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &Gradients<F>) {
        if self.m.len() != store.len() {
            self.m = (0..store.len()).map(|i| vec![F::zero(); store.value(i).numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let c1 = F::of(1.0 / (1.0 - self.beta1.powi(self.t)));
        let c2 = F::of(1.0 / (1.0 - self.beta2.powi(self.t)));
        let (lr, eps) = (F::of(self.lr), F::of(self.eps));
        for id in 0..store.len() {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            let w = store.value_mut(id).data_mut();
            for (((wi, &gi), mi), vi) in w.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (F::one() - b1) * gi;
                *vi = b2 * *vi + (F::one() - b2) * gi * gi;
                *wi = *wi - lr * (*mi * c1) / ((*vi * c2).sqrt() + eps);
            }
        }
    }
}

/// Expert state `j` of a trajectory, rebuilt by replay.
pub fn state_at<'a>(inst: &'a Instance, traj: &Trajectory, j: usize) -> Result<State<'a>, TrainError> {
    let mut s = State::initial(inst);
    for &a in &traj.actions[..j] {
        s.apply(a).map_err(|e| TrainError::Corrupt(traj.instance_id, e))?;
    }
    Ok(s)
}

fn step_loss<F: Scalar>(g: &mut Graph<'_, F>, cfg: &ModelConfig, h: Var, s: &State<'_>, target: usize) -> Result<Var, TrainError> {
    let logits = decode_logits(g, cfg, h)?;
    let mask = s.feasible_mask()?;
    Ok(g.cross_entropy(logits, &mask, target)?)
}

impl From<EnvError> for TrainError {
    fn from(e: EnvError) -> Self {
        TrainError::Model(ModelError::Env(e))
    }
}

/// Cross-entropy of the expert action at step `j`.
pub fn loss_base_step<F: Scalar>(
    g: &mut Graph<'_, F>,
    cfg: &ModelConfig,
    inst: &Instance,
    traj: &Trajectory,
    j: usize,
) -> Result<Var, TrainError> {
    let s = state_at(inst, traj, j)?;
    let x = g.constant(s.features());
    let h = base_encode(g, cfg, x)?;
    step_loss(g, cfg, h, &s, traj.actions[j])
}

/// Cross-entropy summed over the `k` steps after `j`: the state at `j` is
/// embedded by the base encoder, every later state by the recurrent encoder
/// along the expert actions.
pub fn loss_recurrent_segment<F: Scalar>(
    g: &mut Graph<'_, F>,
    cfg: &ModelConfig,
    inst: &Instance,
    traj: &Trajectory,
    j: usize,
    k: usize,
) -> Result<Var, TrainError> {
    if k == 0 || j + k >= traj.actions.len() {
        return Err(TrainError::Config(format!(
            "segment {j}+{k} does not fit a trajectory of {} actions",
            traj.actions.len()
        )));
    }
    let mut s = state_at(inst, traj, j)?;
    let x = g.constant(s.features());
    let mut h = base_encode(g, cfg, x)?;
    let mut rows = s.row_ids();
    let mut losses = Vec::with_capacity(k);
    for i in j + 1..=j + k {
        s.apply(traj.actions[i - 1]).map_err(|e| TrainError::Corrupt(traj.instance_id, e))?;
        let next_rows = s.row_ids();
        let aligned = g.gather_rows(h, align_indices(&rows, &next_rows)?)?;
        let x = g.constant(s.features());
        h = recurrent_encode(g, cfg, aligned, x)?;
        losses.push(step_loss(g, cfg, h, &s, traj.actions[i])?);
        rows = next_rows;
    }
    Ok(g.sum(&losses)?)
}

/// One sampled training example: trajectory index and start step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    pub index: usize,
    pub step: usize,
}

/// Mean base loss over the batch and the gradients of the base model.
pub fn loss_base_batch<F: Scalar>(
    model: &Model<F>,
    data: &[(&Instance, &Trajectory)],
    batch: &[Sample],
) -> Result<(f64, Gradients<F>), TrainError> {
    let mut g = Graph::new(&model.params).with_trainable(is_base_param);
    let mut losses = Vec::with_capacity(batch.len());
    for smp in batch {
        let (inst, traj) = data[smp.index];
        losses.push(loss_base_step(&mut g, &model.config, inst, traj, smp.step)?);
    }
    finish_batch(g, &losses)
}

/// Mean (over the batch) of the summed segment losses, with gradients of
/// the recurrent encoder only.
pub fn loss_recurrent_batch<F: Scalar>(
    model: &Model<F>,
    data: &[(&Instance, &Trajectory)],
    batch: &[Sample],
    k: usize,
) -> Result<(f64, Gradients<F>), TrainError> {
    let mut g = Graph::new(&model.params).with_trainable(is_recurrent_param);
    let mut losses = Vec::with_capacity(batch.len());
    for smp in batch {
        let (inst, traj) = data[smp.index];
        let kk = segment_len(traj, k).ok_or_else(|| TrainError::Config("trajectory too short for a segment".into()))?;
        losses.push(loss_recurrent_segment(&mut g, &model.config, inst, traj, smp.step, kk)?);
    }
    finish_batch(g, &losses)
}

fn finish_batch<F: Scalar>(mut g: Graph<'_, F>, losses: &[Var]) -> Result<(f64, Gradients<F>), TrainError> {
    let total = g.sum(losses)?;
    let mean = g.scale_const(total, F::of(1.0 / losses.len() as f64))?;
    let value = g.value(mean).data()[0].as_f64();
    if !value.is_finite() {
        return Err(TrainError::NonFinite {
            epoch: 0,
            step: 0,
            loss: value,
        });
    }
    Ok((value, g.backward(mean)?))
}

/// Segment length used for a trajectory: `min(k, T − 1)`, or `None` when it
/// has fewer than two actions.
pub fn segment_len(traj: &Trajectory, k: usize) -> Option<usize> {
    let t = traj.actions.len();
    (t >= 2).then(|| k.min(t - 1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Base,
    Recurrent,
}

fn sample_batch<R: Rng>(
    rng: &mut R,
    data: &[(&Instance, &Trajectory)],
    usable: &[usize],
    stage: Stage,
    k: usize,
    size: usize,
) -> Vec<Sample> {
    (0..size)
        .map(|_| {
            let index = usable[rng.gen_range(0..usable.len())];
            let t = data[index].1.actions.len();
            let step = match stage {
                Stage::Base => rng.gen_range(0..t),
                Stage::Recurrent => {
                    let kk = k.min(t - 1);
                    rng.gen_range(0..t - kk)
                }
            };
            Sample { index, step }
        })
        .collect()
}

/// Mean greedy gap (percent) of `model` on `val` with recompute interval `k`.
pub fn validation_gap<F: Scalar>(model: &Model<F>, val: &[(Instance, f64)], k: usize) -> Result<f64, TrainError> {
    if val.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (inst, reference) in val {
        let r = greedy_rollout(model, inst, k)?;
        sum += relative_gap(*reference, r.solution.objective, inst.kind.maximize())?;
    }
    Ok(sum / val.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_gap: Option<f64>,
    pub elapsed_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_val_gap: f64,
}

impl TrainReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), TrainError> {
        let mut wr = csv::Writer::from_writer(w);
        for row in &self.epochs {
            wr.serialize(row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn run<F: Scalar>(
    model: &mut Model<F>,
    data: &[(&Instance, &Trajectory)],
    val: &[(Instance, f64)],
    cfg: &TrainConfig,
    stage: Stage,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    let usable: Vec<usize> = (0..data.len())
        .filter(|&i| match stage {
            Stage::Base => !data[i].1.actions.is_empty(),
            Stage::Recurrent => segment_len(data[i].1, cfg.k).is_some(),
        })
        .collect();
    if usable.is_empty() {
        return Err(TrainError::Config("no usable trajectories".into()));
    }
    let val_k = match stage {
        Stage::Base => 1,
        Stage::Recurrent => cfg.k,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let clock = Instant::now();
    let mut rows = Vec::new();
    let mut best: Option<(f64, usize, ParamStore<F>)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut loss_sum = 0.0;
        for step in 0..cfg.steps_per_epoch {
            let batch = sample_batch(&mut rng, data, &usable, stage, cfg.k, cfg.batch_size);
            let res = match stage {
                Stage::Base => loss_base_batch(model, data, &batch),
                Stage::Recurrent => loss_recurrent_batch(model, data, &batch, cfg.k),
            };
            let (loss, grads) = match res {
                Err(TrainError::NonFinite { loss, .. }) => return Err(TrainError::NonFinite { epoch, step, loss }),
                r => r?,
            };
            adam.step(&mut model.params, &grads);
            loss_sum += loss;
        }
        let out_of_time = cfg.max_seconds.is_some_and(|s| clock.elapsed().as_secs_f64() >= s);
        let last = epoch == cfg.max_epochs || out_of_time;
        let val_gap = if epoch % cfg.val_every == 0 || last {
            Some(validation_gap(model, val, val_k)?)
        } else {
            None
        };
        let row = EpochRow {
            epoch,
            train_loss: loss_sum / cfg.steps_per_epoch as f64,
            val_gap,
            elapsed_s: clock.elapsed().as_secs_f64(),
        };
        if cfg.verbose {
            eprintln!(
                "epoch {:>4}  loss {:.5}  val gap {}  {:.1}s",
                row.epoch,
                row.train_loss,
                row.val_gap.map_or("-".to_string(), |g| format!("{g:.3}%")),
                row.elapsed_s
            );
        }
        rows.push(row);
        if let Some(gap) = val_gap {
            if best.as_ref().is_none_or(|b| gap < b.0) {
                best = Some((gap, epoch, model.params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        if last || since_best >= cfg.patience {
            break;
        }
    }
    let (best_val_gap, best_epoch, params) = best.expect("validation runs at the last epoch");
    model.params = params;
    model.meta.epochs = rows.len();
    model.meta.best_val_gap = Some(best_val_gap);
    model.meta.seed = cfg.seed;
    if stage == Stage::Recurrent {
        model.meta.k = Some(cfg.k);
    }
    Ok(TrainReport {
        epochs: rows,
        best_epoch,
        best_val_gap,
    })
}

/// Stage one: trains the base encoder and decoder; the model keeps the
/// parameters with the best validation gap (base encoder at every step).
pub fn train_base<F: Scalar>(
    model: &mut Model<F>,
    data: &[(&Instance, &Trajectory)],
    val: &[(Instance, f64)],
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    run(model, data, val, cfg, Stage::Base)
}

/// Stage two: trains the recurrent encoder only; validation decodes with
/// recompute interval `cfg.k`.
pub fn train_recurrent<F: Scalar>(
    model: &mut Model<F>,
    data: &[(&Instance, &Trajectory)],
    val: &[(Instance, f64)],
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    if !model.has_recurrent() {
        return Err(TrainError::Config("model has no recurrent encoder".into()));
    }
    run(model, data, val, cfg, Stage::Recurrent)
}

/// Bytes of every base and decoder parameter, for freeze checks.
pub fn base_fingerprint<F: Scalar>(params: &ParamStore<F>) -> Vec<Tensor<F>> {
    params
        .iter()
        .filter(|(n, _)| is_base_param(n))
        .map(|(_, t)| t.clone())
        .collect()
}
