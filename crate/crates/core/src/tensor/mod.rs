//! Dense f64 tensors and a reverse-mode tape.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Values
//! live on the tape; callers hold lightweight [`Var`] handles. Calling
//! [`Tape::backward`] replays the record in reverse and returns gradients for
//! every leaf registered with `requires_grad`.

mod kernels;
mod tape;
pub(crate) use tape::validate_probabilities;

pub use tape::{BnMode, BnStats, Gradients, Tape, Var, BN_EPS, SOFTMAX_FLOOR};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-element FLOP charges for non-MAC primitives.
///
/// Matmul and convolution are charged 2 FLOPs per multiply-accumulate. The
/// analytic counters in [`crate::models`] use the same table, so an
/// instrumented forward pass and the closed-form count agree exactly.
pub mod flop_cost {
    pub const ADD: u64 = 1;
    pub const MUL: u64 = 1;
    pub const BIAS: u64 = 1;
    pub const RELU: u64 = 1;
    pub const GELU: u64 = 8;
    pub const BATCH_NORM: u64 = 4;
    /// Global average pooling, per input element.
    pub const POOL: u64 = 1;
    pub const SOFTMAX: u64 = 3;
    pub const LOG_SOFTMAX: u64 = 4;
    pub const LOG: u64 = 1;
    pub const FLOOR: u64 = 1;
    pub const REDUCE: u64 = 1;
    pub const CROSS_ENTROPY: u64 = 4;
    pub const KL: u64 = 3;
    /// Backward pass cost relative to forward.
    pub const BACKWARD_MULTIPLIER: u64 = 2;
}

/// FLOPs split into multiply-accumulate work and everything else.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopTally {
    pub mac: u64,
    pub elementwise: u64,
}

impl FlopTally {
    pub fn total(&self) -> u64 {
        self.mac + self.elementwise
    }
}

impl std::ops::AddAssign for FlopTally {
    fn add_assign(&mut self, rhs: Self) {
        self.mac += rhs.mac;
        self.elementwise += rhs.elementwise;
    }
}

impl std::ops::Add for FlopTally {
    type Output = FlopTally;
    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

/// Dense row-major tensor. A rank-0 tensor (empty shape) is a scalar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", format!("shape {shape:?} holds {numel} values, got {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// Build a rank-2 tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::shape("item", format!("tensor of shape {:?} is not a scalar", self.shape))),
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data)
    }

    /// Leading dimension (batch size for batched tensors).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Elements per leading-dimension slice.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    /// Gather rows along the leading dimension.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let w = self.row_len();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor { shape, data }
    }

    /// Concatenate along the leading dimension.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::shape("concat_rows", format!("{:?} vs {:?}", first.shape, p.shape)));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Tensor { shape, data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Largest absolute entry; 0 for an all-zero tensor.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Row-wise argmax of a rank-2 tensor. Ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Row-wise softmax of a rank-2 tensor, computed with the max-shift trick.
    pub fn softmax_rows(&self) -> Tensor {
        let mut out = self.clone();
        let w = self.row_len();
        for row in out.data.chunks_mut(w) {
            softmax_in_place(row);
        }
        out
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Mean Kullback-Leibler divergence `Σ p·ln(p/q)` over the rows of two
/// probability tables. Entries must be strictly positive; callers clamp.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.shape() != q.shape() || p.rank() != 2 {
        return Err(Error::shape(
            "kl_divergence",
            format!("expected matching rank-2 tables, got {:?} and {:?}", p.shape(), q.shape()),
        ));
    }
    check_positive("kl_divergence", p)?;
    check_positive("kl_divergence", q)?;
    let total: f64 = p.data().iter().zip(q.data()).map(|(&a, &b)| a * (a.ln() - b.ln())).sum();
    Ok(total / p.rows() as f64)
}

pub(crate) fn check_positive(op: &'static str, t: &Tensor) -> Result<()> {
    if let Some((i, v)) = t.data().iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::domain(op, format!("entry {i} is {v}; probabilities must be > 0")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().len(), 6);
        assert_eq!(Tensor::scalar(3.0).item().unwrap(), 3.0);
    }

    #[test]
    fn kl_of_identical_rows_is_zero() {
        let p = Tensor::from_rows(&[vec![0.2, 0.8], vec![0.5, 0.5]]).unwrap();
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_two_term_value() {
        // 0.999·ln(0.999/0.5) + 0.001·ln(0.001/0.5)
        let want = 0.999 * (0.999f64 / 0.5).ln() + 0.001 * (0.001f64 / 0.5).ln();
        assert!((want - 0.685_239_925_4).abs() < 1e-9);
        let p = Tensor::from_rows(&[vec![0.999, 0.001]]).unwrap();
        let q = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let got = kl_divergence(&p, &q).unwrap();
        assert!((got - want).abs() < 1e-15);
        assert!((got - 0.6852).abs() < 5e-5);
    }

    #[test]
    fn kl_is_asymmetric() {
        let p = Tensor::from_rows(&[vec![0.9, 0.1]]).unwrap();
        let q = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let pq = kl_divergence(&p, &q).unwrap();
        let qp = kl_divergence(&q, &p).unwrap();
        // Direct two-term sums.
        assert!((pq - 0.368_064_207_2).abs() < 1e-9);
        assert!((qp - 0.510_825_623_8).abs() < 1e-9);
        assert!((pq - qp).abs() > 0.1);
    }

    #[test]
    fn kl_rejects_nonpositive_entries() {
        let p = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let q = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert!(matches!(kl_divergence(&p, &q), Err(Error::Domain { .. })));
        assert!(matches!(kl_divergence(&q, &p), Err(Error::Domain { .. })));
    }

    #[test]
    fn softmax_is_finite_for_large_logits() {
        let t = Tensor::from_rows(&[vec![1e3, -1e3, 0.0], vec![-1e3, -1e3, -1e3]]).unwrap();
        let s = t.softmax_rows();
        for i in 0..2 {
            let sum: f64 = s.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(s.row(i).iter().all(|v| v.is_finite()));
        }
    }
}
