use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

use super::NumericsError;

/// Floating point element type. `f32` for training and inference, `f64` for
/// gradient checks.
pub trait Scalar: Float + Default + Debug + Send + Sync + Sum + 'static {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self, NumericsError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); len],
        }
    }

    pub fn filled(shape: &[usize], value: F) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<F>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds an `rows × cols` matrix; panics if `data.len() != rows * cols`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NumericsError::Shape("ragged rows".into()));
        }
        Ok(Self::matrix(rows.len(), cols, rows.concat()))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading dimension (1 for vectors).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> F {
        self.data[i * self.cols() + j]
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::of(x.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |m, x| m.max(x.abs()))
    }

    pub fn norm(&self) -> F {
        self.data.iter().map(|&x| x * x).sum::<F>().sqrt()
    }
}

#[inline]
pub(crate) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    // four independent accumulators so the loop vectorizes
    let mut acc = [F::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] = acc[0] + a[i] * b[i];
        acc[1] = acc[1] + a[i + 1] * b[i + 1];
        acc[2] = acc[2] + a[i + 2] * b[i + 2];
        acc[3] = acc[3] + a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s = s + a[i] * b[i];
    }
    s
}

#[inline]
pub(crate) fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// `y = x · Wᵀ + b` for `x: n×a`, `w: b×a`, `bias: b`.
pub fn linear<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    bias: &Tensor<F>,
) -> Result<Tensor<F>, NumericsError> {
    if x.shape().len() != 2 || w.shape().len() != 2 {
        return Err(NumericsError::Shape("linear expects matrices".into()));
    }
    let (n, a) = (x.rows(), x.cols());
    let (b, wa) = (w.rows(), w.cols());
    if wa != a || bias.numel() != b {
        return Err(NumericsError::Shape(format!(
            "linear: x {:?}, w {:?}, b {:?}",
            x.shape(),
            w.shape(),
            bias.shape()
        )));
    }
    let mut out = Vec::with_capacity(n * b);
    for i in 0..n {
        let xi = x.row(i);
        for j in 0..b {
            out.push(dot(xi, w.row(j)) + bias.data()[j]);
        }
    }
    Ok(Tensor::matrix(n, b, out))
}

/// Row-wise `gain ⊙ x / sqrt(mean(x²) + eps)`. Also returns the per-row
/// inverse RMS factors.
pub fn rmsnorm<F: Scalar>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    eps: F,
) -> Result<(Tensor<F>, Vec<F>), NumericsError> {
    let d = x.cols();
    if d == 0 || gain.numel() != d {
        return Err(NumericsError::Shape(format!(
            "rmsnorm: x {:?}, gain {:?}",
            x.shape(),
            gain.shape()
        )));
    }
    let n = x.rows();
    let mut out = Vec::with_capacity(n * d);
    let mut inv = Vec::with_capacity(n);
    let df = F::of(d as f64);
    for i in 0..n {
        let row = x.row(i);
        let ms = dot(row, row) / df;
        let r = F::one() / (ms + eps).sqrt();
        inv.push(r);
        out.extend(row.iter().zip(gain.data()).map(|(&v, &g)| g * v * r));
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, inv))
}

/// Softmax over the entries where `mask` is true; masked entries are exactly
/// zero.
pub fn masked_softmax<F: Scalar>(logits: &[F], mask: &[bool]) -> Result<Vec<F>, NumericsError> {
    if logits.len() != mask.len() {
        return Err(NumericsError::Shape(format!(
            "masked_softmax: {} logits, {} mask entries",
            logits.len(),
            mask.len()
        )));
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l)
        .fold(None, |acc: Option<F>, l| Some(acc.map_or(l, |a| a.max(l))))
        .ok_or(NumericsError::Infeasible)?;
    let mut out = vec![F::zero(); logits.len()];
    let mut sum = F::zero();
    for (o, (&l, &m)) in out.iter_mut().zip(logits.iter().zip(mask)) {
        if m {
            *o = (l - max).exp();
            sum = sum + *o;
        }
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
    Ok(out)
}

/// `−ln masked_softmax(logits)[target]`.
pub fn cross_entropy<F: Scalar>(
    logits: &[F],
    mask: &[bool],
    target: usize,
) -> Result<F, NumericsError> {
    if target >= mask.len() || !mask[target] {
        return Err(NumericsError::Contract(format!(
            "cross-entropy target {target} is not a feasible action"
        )));
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l)
        .fold(F::neg_infinity(), F::max);
    let lse = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| (l - max).exp())
        .sum::<F>()
        .ln()
        + max;
    Ok(lse - logits[target])
}
