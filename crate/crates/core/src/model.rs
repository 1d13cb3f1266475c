//! Policy network: base encoder, recurrent encoder and decoder.
//!
//! Parameter names: `base.*` and `decoder.*` form the base model, `rec.*`
//! the recurrent encoder. The graph-level functions work on any [`Graph`];
//! the methods on [`Model`] are inference shortcuts.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvError, ProblemKind, RowId, State};
use crate::numerics::layers::{add_block, add_linear, add_zero_linear, block_param_count, transformer_block, RMSNORM_EPS};
use crate::numerics::{checkpoint, masked_softmax, Graph, NumericsError, ParamStore, Scalar, Tensor, Var};

pub const BASE_PREFIX: &str = "base.";
pub const DECODER_PREFIX: &str = "decoder.";
pub const RECURRENT_PREFIX: &str = "rec.";

const MARKER_SCALE: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("embedding alignment: {0}")]
    Alignment(String),
    #[error("model configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub ff: usize,
    pub heads: usize,
}

impl EncoderConfig {
    pub fn new(layers: usize, dim: usize, ff: usize, heads: usize) -> Self {
        Self { layers, dim, ff, heads }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ProblemKind,
    pub base: EncoderConfig,
    #[serde(default)]
    pub recurrent: Option<EncoderConfig>,
}

impl ModelConfig {
    /// Base L=3, d=64, FF=128, 4 heads; recurrent L=1, d=32, FF=64, 4 heads.
    pub fn small(kind: ProblemKind) -> Self {
        Self {
            kind,
            base: EncoderConfig::new(3, 64, 128, 4),
            recurrent: Some(EncoderConfig::new(1, 32, 64, 4)),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.kind.feature_dim()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let check = |name: &str, c: &EncoderConfig| {
            if c.dim == 0 || c.heads == 0 || c.dim % c.heads != 0 {
                return Err(ModelError::Config(format!(
                    "{name}: dim {} not divisible by {} heads",
                    c.dim, c.heads
                )));
            }
            if c.ff == 0 {
                return Err(ModelError::Config(format!("{name}: zero feed-forward width")));
            }
            Ok(())
        };
        check("base", &self.base)?;
        if let Some(r) = &self.recurrent {
            check("recurrent", r)?;
        }
        Ok(())
    }

    /// Parameter count of the base encoder plus decoder.
    pub fn base_param_count(&self) -> usize {
        let (f, b) = (self.feature_dim(), &self.base);
        let arity = self.kind.action_arity();
        (f * b.dim + b.dim) + 2 * b.dim + b.layers * block_param_count(b.dim, b.ff) + (b.dim * arity + arity)
    }

    /// Parameter count of the recurrent encoder.
    pub fn recurrent_param_count(&self) -> usize {
        let Some(r) = &self.recurrent else { return 0 };
        let (f, de) = (self.feature_dim(), self.base.dim);
        (f * r.dim + r.dim)
            + 2 * r.dim
            + de
            + ((r.dim + de) * r.dim + r.dim)
            + r.layers * block_param_count(r.dim, r.ff)
            + (r.dim * de + de)
    }
}

fn add_markers<F: Scalar, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, prefix: &str, d: usize) -> Result<(), ModelError> {
    for m in ["start", "end"] {
        let v = (0..d).map(|_| F::of(rng.gen_range(-MARKER_SCALE..MARKER_SCALE))).collect();
        store.insert(format!("{prefix}.{m}"), Tensor::vector(v))?;
    }
    Ok(())
}

/// Fresh parameters: Glorot linears, zero biases, zero ReZero scalars and a
/// zero decoder (uniform initial policy).
pub fn init_params<F: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<F>, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let (f, b) = (cfg.feature_dim(), cfg.base);
    add_linear(&mut s, &mut rng, "base.input", f, b.dim)?;
    add_markers(&mut s, &mut rng, "base", b.dim)?;
    for i in 0..b.layers {
        add_block(&mut s, &mut rng, &format!("base.block{i}"), b.dim, b.ff)?;
    }
    add_zero_linear(&mut s, "decoder", b.dim, cfg.kind.action_arity())?;
    if let Some(r) = cfg.recurrent {
        add_recurrent_params(&mut s, cfg, &r, &mut rng)?;
    }
    Ok(s)
}

fn add_recurrent_params<F: Scalar, R: Rng>(
    s: &mut ParamStore<F>,
    cfg: &ModelConfig,
    r: &EncoderConfig,
    rng: &mut R,
) -> Result<(), ModelError> {
    let (f, de) = (cfg.feature_dim(), cfg.base.dim);
    add_linear(s, rng, "rec.input", f, r.dim)?;
    add_markers(s, rng, "rec", r.dim)?;
    s.insert("rec.norm", Tensor::filled(&[de], F::one()))?;
    add_linear(s, rng, "rec.merge", r.dim + de, r.dim)?;
    for i in 0..r.layers {
        add_block(s, rng, &format!("rec.block{i}"), r.dim, r.ff)?;
    }
    add_linear(s, rng, "rec.out", r.dim, de)?;
    Ok(())
}

pub fn is_base_param(name: &str) -> bool {
    name.starts_with(BASE_PREFIX) || name.starts_with(DECODER_PREFIX)
}

pub fn is_recurrent_param(name: &str) -> bool {
    name.starts_with(RECURRENT_PREFIX)
}

/// Input linear plus start/end markers, then the base blocks.
pub fn base_encode<F: Scalar>(g: &mut Graph<'_, F>, cfg: &ModelConfig, feats: Var) -> Result<Var, ModelError> {
    let x = g.dense(feats, "base.input")?;
    let (start, end) = (g.param("base.start")?, g.param("base.end")?);
    let mut h = g.add_markers(x, start, end)?;
    for i in 0..cfg.base.layers {
        h = transformer_block(g, h, &format!("base.block{i}"), cfg.base.heads)?;
    }
    Ok(h)
}

/// Recurrent update of `prev` (aligned with the state behind `feats`).
pub fn recurrent_encode<F: Scalar>(
    g: &mut Graph<'_, F>,
    cfg: &ModelConfig,
    prev: Var,
    feats: Var,
) -> Result<Var, ModelError> {
    let r = cfg
        .recurrent
        .ok_or_else(|| ModelError::Config("model has no recurrent encoder".into()))?;
    if g.value(prev).rows() != g.value(feats).rows() {
        return Err(ModelError::Alignment(format!(
            "{} embeddings for {} state rows",
            g.value(prev).rows(),
            g.value(feats).rows()
        )));
    }
    let x = g.dense(feats, "rec.input")?;
    let (start, end) = (g.param("rec.start")?, g.param("rec.end")?);
    let h0 = g.add_markers(x, start, end)?;
    let gain = g.param("rec.norm")?;
    let hn = g.rmsnorm(prev, gain, F::of(RMSNORM_EPS))?;
    let cat = g.concat_cols(hn, h0)?;
    let merged = g.dense(cat, "rec.merge")?;
    let merged = g.relu(merged)?;
    let mut h = g.add(merged, h0)?;
    for i in 0..r.layers {
        h = transformer_block(g, h, &format!("rec.block{i}"), r.heads)?;
    }
    Ok(g.dense(h, "rec.out")?)
}

/// Flattened action logits as a single row: one per state row, or for CVRP
/// the direct logits of the interior rows followed by their via-depot logits.
pub fn decode_logits<F: Scalar>(g: &mut Graph<'_, F>, cfg: &ModelConfig, h: Var) -> Result<Var, ModelError> {
    let h = if cfg.kind == ProblemKind::Cvrp {
        let n = g.value(h).rows();
        g.gather_rows(h, (1..n.saturating_sub(1)).collect())?
    } else {
        h
    };
    let logits = g.dense(h, "decoder")?;
    Ok(g.transpose(logits)?)
}

/// Row indices of `prev` for each row of `next`; exactly one row of `prev`
/// (its row 0) may be missing.
pub fn align_indices(prev: &[RowId], next: &[RowId]) -> Result<Vec<usize>, ModelError> {
    if next.len() + 1 != prev.len() {
        return Err(ModelError::Alignment(format!(
            "{} previous rows for {} new rows",
            prev.len(),
            next.len()
        )));
    }
    let idx = next
        .iter()
        .map(|id| {
            prev.iter()
                .position(|p| p == id)
                .ok_or_else(|| ModelError::Alignment(format!("row {id:?} has no previous embedding")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if idx.contains(&0) {
        return Err(ModelError::Alignment("previous current node survived the step".into()));
    }
    Ok(idx)
}

/// Embeddings of a state, with the row identities they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings<F> {
    pub h: Tensor<F>,
    pub rows: Vec<RowId>,
    pub step: usize,
}

/// Row-aligned copy of `prev` for `state`.
pub fn align_embeddings<F: Scalar>(prev: &Embeddings<F>, state: &State<'_>) -> Result<Tensor<F>, ModelError> {
    let idx = align_indices(&prev.rows, &state.row_ids())?;
    let c = prev.h.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for i in idx {
        data.extend_from_slice(prev.h.row(i));
    }
    Ok(Tensor::matrix(data.len() / c.max(1), c, data))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub dataset_checksum: Option<String>,
    #[serde(default)]
    pub epochs: usize,
    #[serde(default)]
    pub best_val_gap: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: TrainMeta,
}

/// Configuration plus parameters.
#[derive(Clone, Debug)]
pub struct Model<F: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    pub meta: TrainMeta,
}

impl<F: Scalar> Model<F> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let params = init_params(&config, seed)?;
        Ok(Self {
            config,
            params,
            meta: TrainMeta {
                seed,
                ..TrainMeta::default()
            },
        })
    }

    pub fn kind(&self) -> ProblemKind {
        self.config.kind
    }

    pub fn has_recurrent(&self) -> bool {
        self.config.recurrent.is_some()
    }

    /// Adds a freshly initialized recurrent encoder.
    pub fn attach_recurrent(&mut self, r: EncoderConfig, seed: u64) -> Result<(), ModelError> {
        if self.config.recurrent.is_some() {
            return Err(ModelError::Config("model already has a recurrent encoder".into()));
        }
        let mut cfg = self.config.clone();
        cfg.recurrent = Some(r);
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        add_recurrent_params(&mut self.params, &cfg, &r, &mut rng)?;
        self.config = cfg;
        Ok(())
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            meta: self.meta.clone(),
        }
    }

    pub fn base_embed(&self, state: &State<'_>) -> Result<Embeddings<F>, ModelError> {
        let mut g = Graph::inference(&self.params);
        let x = g.constant(state.features());
        let h = base_encode(&mut g, &self.config, x)?;
        Ok(Embeddings {
            h: g.value(h).clone(),
            rows: state.row_ids(),
            step: state.step_index(),
        })
    }

    pub fn recurrent_embed(&self, prev: &Embeddings<F>, state: &State<'_>) -> Result<Embeddings<F>, ModelError> {
        let aligned = align_embeddings(prev, state)?;
        let mut g = Graph::inference(&self.params);
        let p = g.constant(aligned);
        let x = g.constant(state.features());
        let h = recurrent_encode(&mut g, &self.config, p, x)?;
        Ok(Embeddings {
            h: g.value(h).clone(),
            rows: state.row_ids(),
            step: state.step_index(),
        })
    }

    pub fn logits(&self, h: &Tensor<F>) -> Result<Vec<F>, ModelError> {
        let mut g = Graph::inference(&self.params);
        let hv = g.constant(h.clone());
        let l = decode_logits(&mut g, &self.config, hv)?;
        Ok(g.value(l).data().to_vec())
    }

    /// Action probabilities under `mask`; exact zeros at infeasible actions.
    pub fn probs(&self, h: &Tensor<F>, mask: &[bool]) -> Result<Vec<F>, ModelError> {
        let l = self.logits(h)?;
        if l.len() != mask.len() {
            return Err(ModelError::Numerics(NumericsError::Shape(format!(
                "{} logits for a mask of {}",
                l.len(),
                mask.len()
            ))));
        }
        Ok(masked_softmax(&l, mask)?)
    }

    /// Writes `model.json`, `params.manifest` and `params.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        fs::create_dir_all(dir)?;
        let header = Header {
            config: self.config.clone(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_string_pretty(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        fs::write(dir.join("model.json"), json + "\n")?;
        checkpoint::save(&self.params, &dir.join("params.manifest"), &dir.join("params.bin"))?;
        Ok(())
    }
}

impl Model<f32> {
    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let text = fs::read_to_string(dir.join("model.json"))?;
        let header: Header = serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        header.config.validate()?;
        let params = checkpoint::load(&dir.join("params.manifest"), &dir.join("params.bin"))?;
        let expected = init_params::<f32>(&header.config, 0)?;
        for (name, t) in expected.iter() {
            let got = params
                .get(name)
                .map_err(|_| ModelError::Checkpoint(format!("missing parameter `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(ModelError::Checkpoint(format!("parameter `{name}` has the wrong shape")));
            }
        }
        if params.len() != expected.len() {
            return Err(ModelError::Checkpoint("unexpected extra parameters".into()));
        }
        Ok(Self {
            config: header.config,
            params,
            meta: header.meta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::gen_instance;
    use crate::env::Instance;
    use crate::numerics::linear;
    use approx::assert_abs_diff_eq;

    fn tiny(kind: ProblemKind) -> ModelConfig {
        ModelConfig {
            kind,
            base: EncoderConfig::new(2, 16, 32, 4),
            recurrent: Some(EncoderConfig::new(1, 8, 16, 2)),
        }
    }

    fn inst(kind: ProblemKind, n: usize, seed: u64) -> Instance {
        gen_instance(kind, n, None, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn param_count_closed_form() {
        let cfg = ModelConfig {
            kind: ProblemKind::Tsp,
            base: EncoderConfig::new(2, 32, 64, 4),
            recurrent: None,
        };
        let p = init_params::<f32>(&cfg, 0).unwrap();
        // input 2·32+32, markers 64, two blocks of 8482, decoder 32+1
        assert_eq!(p.count(), 96 + 64 + 2 * 8482 + 33);
        assert_eq!(p.count(), cfg.base_param_count());
        let full = init_params::<f32>(&tiny(ProblemKind::Cvrp), 0).unwrap();
        let c = tiny(ProblemKind::Cvrp);
        assert_eq!(full.count(), c.base_param_count() + c.recurrent_param_count());
        assert_eq!(full.count_prefix("rec."), c.recurrent_param_count());
    }

    #[test]
    fn same_seed_same_params() {
        let a = init_params::<f32>(&tiny(ProblemKind::Op), 5).unwrap();
        let b = init_params::<f32>(&tiny(ProblemKind::Op), 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_heads_rejected() {
        let mut c = tiny(ProblemKind::Tsp);
        c.base.heads = 3;
        assert!(init_params::<f32>(&c, 0).is_err());
    }

    #[test]
    fn base_at_init_is_input_plus_markers() {
        let m = Model::<f32>::init(tiny(ProblemKind::Tsp), 1).unwrap();
        let i = inst(ProblemKind::Tsp, 6, 2);
        let s = State::initial(&i);
        let e = m.base_embed(&s).unwrap();
        let p = &m.params;
        let mut expect = linear(&s.features(), p.get("base.input.w").unwrap(), p.get("base.input.b").unwrap()).unwrap();
        let d = expect.cols();
        let n = expect.rows();
        for j in 0..d {
            expect.data_mut()[j] += p.get("base.start").unwrap().data()[j];
            expect.data_mut()[(n - 1) * d + j] += p.get("base.end").unwrap().data()[j];
        }
        assert_eq!(e.h, expect);
    }

    #[test]
    fn zero_merge_gives_out_projection_of_h0() {
        let mut m = Model::<f64>::init(tiny(ProblemKind::Tsp), 3).unwrap();
        for n in ["rec.merge.w", "rec.merge.b"] {
            m.params.get_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let i = inst(ProblemKind::Tsp, 6, 4);
        let s0 = State::initial(&i);
        let e0 = m.base_embed(&s0).unwrap();
        let (s1, _) = s0.step(2).unwrap();
        let e1 = m.recurrent_embed(&e0, &s1).unwrap();
        let p = &m.params;
        let mut h0 = linear(&s1.features(), p.get("rec.input.w").unwrap(), p.get("rec.input.b").unwrap()).unwrap();
        let (n, d) = (h0.rows(), h0.cols());
        for j in 0..d {
            h0.data_mut()[j] += p.get("rec.start").unwrap().data()[j];
            h0.data_mut()[(n - 1) * d + j] += p.get("rec.end").unwrap().data()[j];
        }
        let out = linear(&h0, p.get("rec.out.w").unwrap(), p.get("rec.out.b").unwrap()).unwrap();
        assert_eq!(e1.h, out);
        assert_eq!(e1.h.shape(), &[6, 16]);
    }

    #[test]
    fn alignment_drops_old_current() {
        use RowId::*;
        let prev = [Node(1), Node(2), Node(3), Dest];
        let idx = align_indices(&prev, &[Node(3), Node(2), Dest]).unwrap();
        assert_eq!(idx, vec![2, 1, 3]);
        assert!(align_indices(&prev, &[Node(1), Node(2), Dest]).is_err());
        assert!(align_indices(&prev, &[Node(3), Dest]).is_err());
        assert!(align_indices(&prev, &[Node(9), Node(2), Dest]).is_err());
    }

    #[test]
    fn zero_decoder_is_uniform_and_cvrp_has_two_per_customer() {
        let m = Model::<f32>::init(tiny(ProblemKind::Cvrp), 1).unwrap();
        let i = inst(ProblemKind::Cvrp, 8, 9);
        let s = State::initial(&i);
        let e = m.base_embed(&s).unwrap();
        let mask = s.feasible_mask().unwrap();
        assert_eq!(m.logits(&e.h).unwrap().len(), 16);
        let p = m.probs(&e.h, &mask).unwrap();
        let k = mask.iter().filter(|&&b| b).count() as f32;
        for (pi, mi) in p.iter().zip(&mask) {
            assert_eq!(*pi, if *mi { 1.0 / k } else { 0.0 });
        }
    }

    #[test]
    fn interior_permutation_is_equivariant() {
        let mut m = Model::<f64>::init(tiny(ProblemKind::Op), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let names: Vec<String> = m.params.names().to_vec();
        for n in names {
            m.params
                .get_mut(&n)
                .unwrap()
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.gen_range(-0.3..0.3));
        }
        let a = inst(ProblemKind::Op, 6, 13);
        // swap customers 2 and 5
        let mut b = a.clone();
        b.coords.swap(2, 5);
        b.prizes.swap(2, 5);
        let (sa, sb) = (State::initial(&a), State::initial(&b));
        let (ea, eb) = (m.base_embed(&sa).unwrap(), m.base_embed(&sb).unwrap());
        let perm = [0, 1, 5, 3, 4, 2, 6];
        for (r, &pr) in perm.iter().enumerate() {
            for c in 0..ea.h.cols() {
                assert_abs_diff_eq!(ea.h.get(r, c), eb.h.get(pr, c), epsilon = 1e-9);
            }
        }
        let (pa, pb) = (
            m.probs(&ea.h, &sa.feasible_mask().unwrap()).unwrap(),
            m.probs(&eb.h, &sb.feasible_mask().unwrap()).unwrap(),
        );
        for (r, &pr) in perm.iter().enumerate() {
            assert_abs_diff_eq!(pa[r], pb[pr], epsilon = 1e-9);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Model::<f32>::init(tiny(ProblemKind::Tsp), 2).unwrap();
        m.meta.k = Some(5);
        m.save(dir.path()).unwrap();
        let back = Model::load(dir.path()).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.config, m.config);
        assert_eq!(back.meta, m.meta);
    }
}
