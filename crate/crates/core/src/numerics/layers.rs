//! Parameter initialization and the pre-norm ReZero transformer block.

use rand::Rng;

use super::{Graph, NumericsError, ParamStore, Scalar, Tensor, Var};

pub const RMSNORM_EPS: f64 = 1e-8;

/// Glorot-uniform `out × in` weight plus zero bias under `{name}.w` / `{name}.b`.
pub fn add_linear<F: Scalar, R: Rng>(
    store: &mut ParamStore<F>,
    rng: &mut R,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<(), NumericsError> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w = (0..fan_in * fan_out)
        .map(|_| F::of(rng.gen_range(-limit..limit)))
        .collect();
    store.insert(format!("{name}.w"), Tensor::matrix(fan_out, fan_in, w))?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
    Ok(())
}

/// Linear layer with all-zero weight and bias.
pub fn add_zero_linear<F: Scalar>(
    store: &mut ParamStore<F>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<(), NumericsError> {
    store.insert(format!("{name}.w"), Tensor::zeros(&[fan_out, fan_in]))?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
    Ok(())
}

/// Registers the parameters of one transformer block under `prefix`.
pub fn add_block<F: Scalar, R: Rng>(
    store: &mut ParamStore<F>,
    rng: &mut R,
    prefix: &str,
    d: usize,
    d_ff: usize,
) -> Result<(), NumericsError> {
    store.insert(format!("{prefix}.norm_attn"), Tensor::filled(&[d], F::one()))?;
    for p in ["q", "k", "v", "o"] {
        add_linear(store, rng, &format!("{prefix}.attn.{p}"), d, d)?;
    }
    store.insert(format!("{prefix}.alpha_attn"), Tensor::zeros(&[1]))?;
    store.insert(format!("{prefix}.norm_ff"), Tensor::filled(&[d], F::one()))?;
    add_linear(store, rng, &format!("{prefix}.ff1"), d, d_ff)?;
    add_linear(store, rng, &format!("{prefix}.ff2"), d_ff, d)?;
    store.insert(format!("{prefix}.alpha_ff"), Tensor::zeros(&[1]))?;
    Ok(())
}

/// Scalar count of [`add_block`].
pub fn block_param_count(d: usize, d_ff: usize) -> usize {
    4 * (d * d + d) + (d * d_ff + d_ff) + (d_ff * d + d) + 2 * d + 2
}

pub fn multi_head_attention<F: Scalar>(
    g: &mut Graph<'_, F>,
    h: Var,
    prefix: &str,
    heads: usize,
) -> Result<Var, NumericsError> {
    let q = g.dense(h, &format!("{prefix}.q"))?;
    let k = g.dense(h, &format!("{prefix}.k"))?;
    let v = g.dense(h, &format!("{prefix}.v"))?;
    let a = g.attention(q, k, v, heads)?;
    g.dense(a, &format!("{prefix}.o"))
}

/// `h + α_attn·MHA(norm(h))`, then `h + α_ff·FF(norm(h))`.
pub fn transformer_block<F: Scalar>(
    g: &mut Graph<'_, F>,
    h: Var,
    prefix: &str,
    heads: usize,
) -> Result<Var, NumericsError> {
    let eps = F::of(RMSNORM_EPS);
    let gain = g.param(&format!("{prefix}.norm_attn"))?;
    let x = g.rmsnorm(h, gain, eps)?;
    let x = multi_head_attention(g, x, &format!("{prefix}.attn"), heads)?;
    let alpha = g.param(&format!("{prefix}.alpha_attn"))?;
    let x = g.scale(x, alpha)?;
    let h = g.add(h, x)?;

    let gain = g.param(&format!("{prefix}.norm_ff"))?;
    let x = g.rmsnorm(h, gain, eps)?;
    let x = g.dense(x, &format!("{prefix}.ff1"))?;
    let x = g.relu(x)?;
    let x = g.dense(x, &format!("{prefix}.ff2"))?;
    let alpha = g.param(&format!("{prefix}.alpha_ff"))?;
    let x = g.scale(x, alpha)?;
    g.add(h, x)
}
