//! Dense row-major f32 tensors and the handful of neural primitives the
//! rest of the crate is built on.
//!
//! Every operation is a pure function over immutable inputs and reduces in
//! a fixed serial order, so identical inputs give bit-identical outputs on
//! every run. Dot products accumulate in f64 before rounding back to f32.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    InvalidShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("axis {axis} out of range for rank-{rank} tensor")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("data length {got} does not match shape {shape:?} (product {expected})")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
}

/// Dense row-major array of f32 values.
///
/// `data.len()` always equals the product of `shape`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Seeded Gaussian init; draws in flat row-major order so the result is
    /// fully determined by the RNG state.
    pub fn randn<R: Rng>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f32, std).expect("std must be finite and non-negative");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            shape: vec![r, c],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2, "rows() requires a 2-D tensor");
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2, "cols() requires a 2-D tensor");
        self.shape[1]
    }

    pub fn get2(&self, r: usize, c: usize) -> f32 {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        debug_assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self, TensorError> {
        Self::new(shape, self.data.clone())
    }

    /// Standard matrix product `[m×k] · [k×n] -> [m×n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let mut acc = 0.0f64;
                for (p, &a) in a_row.iter().enumerate() {
                    acc += f64::from(a) * f64::from(other.data[p * n + j]);
                }
                out[i * n + j] = acc as f32;
            }
        }
        Tensor::new(&[m, n], out)
    }

    /// `self · otherᵀ`: `[m×k] · [n×k]ᵀ -> [m×n]`. Row-against-row dot
    /// products, the natural layout for `y = x·Wᵀ` projections.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[0]);
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                let mut acc = 0.0f64;
                for p in 0..k {
                    acc += f64::from(a_row[p]) * f64::from(b_row[p]);
                }
                out[i * n + j] = acc as f32;
            }
        }
        Tensor::new(&[m, n], out)
    }

    pub fn transpose(&self) -> Tensor {
        assert_eq!(self.rank(), 2, "transpose() requires a 2-D tensor");
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "sub",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, s: f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Adds `row` to every row of a 2-D tensor (bias add).
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor, TensorError> {
        if self.rank() != 2 || row.rank() != 1 || self.shape[1] != row.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape.clone(),
                rhs: row.shape.clone(),
            });
        }
        let c = self.shape[1];
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + row.data[i % c])
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Numerically stable softmax along `axis`: the maximum is subtracted
    /// before exponentiation, so even inputs like 1000 cannot overflow.
    pub fn softmax(&self, axis: usize) -> Result<Tensor, TensorError> {
        if axis >= self.rank() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                rank: self.rank(),
            });
        }
        let axis_len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = vec![0.0f32; self.data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let mut max = f32::NEG_INFINITY;
                for a in 0..axis_len {
                    max = max.max(self.data[base + a * inner]);
                }
                let mut sum = 0.0f64;
                for a in 0..axis_len {
                    let e = f64::from(self.data[base + a * inner] - max).exp();
                    out[base + a * inner] = e as f32;
                    sum += e;
                }
                for a in 0..axis_len {
                    out[base + a * inner] = (f64::from(out[base + a * inner]) / sum) as f32;
                }
            }
        }
        Tensor::new(&self.shape, out)
    }

    /// Layer normalization over the last axis followed by the affine
    /// `gamma * x̂ + beta`. Mean and variance accumulate in f64.
    pub fn layernorm(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f32,
    ) -> Result<Tensor, TensorError> {
        let last = *self.shape.last().ok_or(TensorError::InvalidShape {
            op: "layernorm",
            expected: "rank >= 1".into(),
            got: self.shape.clone(),
        })?;
        if gamma.shape != [last] || beta.shape != [last] {
            return Err(TensorError::ShapeMismatch {
                op: "layernorm",
                lhs: gamma.shape.clone(),
                rhs: vec![last],
            });
        }
        let groups = self.data.len() / last;
        let mut out = vec![0.0f32; self.data.len()];
        for g in 0..groups {
            let xs = &self.data[g * last..(g + 1) * last];
            let mut mean = 0.0f64;
            for &x in xs {
                mean += f64::from(x);
            }
            mean /= last as f64;
            let mut var = 0.0f64;
            for &x in xs {
                let d = f64::from(x) - mean;
                var += d * d;
            }
            var /= last as f64;
            let inv_std = 1.0 / (var + f64::from(eps)).sqrt();
            for (j, &x) in xs.iter().enumerate() {
                let norm = (f64::from(x) - mean) * inv_std;
                out[g * last + j] =
                    (norm * f64::from(gamma.data[j]) + f64::from(beta.data[j])) as f32;
            }
        }
        Tensor::new(&self.shape, out)
    }

    /// Elementwise GELU using the tanh approximation.
    pub fn gelu(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| gelu_scalar(x)).collect(),
        }
    }
}

pub(crate) const GELU_COEF: f64 = 0.044_715;

pub(crate) fn gelu_scalar(x: f32) -> f32 {
    let x = f64::from(x);
    let inner = (2.0 / std::f64::consts::PI).sqrt() * (x + GELU_COEF * x * x * x);
    (0.5 * x * (1.0 + inner.tanh())) as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: &[&[f32]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn matmul_identity() {
        let a = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let got = Tensor::identity(2).matmul(&a).unwrap();
        assert_eq!(got, a);
    }

    #[test]
    fn matmul_all_ones() {
        let a = t2(&[&[1.0, 1.0]]);
        let b = Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap();
        let got = a.matmul(&b).unwrap();
        assert_eq!(got.data(), &[2.0]);
    }

    #[test]
    fn matmul_hand_product() {
        // Frozen from an independent triple-loop hand computation.
        let a = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = t2(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let got = a.matmul(&b).unwrap();
        assert_eq!(got.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "got: {msg}");
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let via_nt = a.matmul_nt(&b).unwrap();
        let via_t = a.matmul(&b.transpose()).unwrap();
        assert_eq!(via_nt, via_t);
    }

    #[test]
    fn softmax_uniform_input() {
        let x = Tensor::new(&[3], vec![0.0, 0.0, 0.0]).unwrap();
        let got = x.softmax(0).unwrap();
        for &v in got.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_large_input_is_stable() {
        let x = Tensor::new(&[2], vec![1000.0, 0.0]).unwrap();
        let got = x.softmax(0).unwrap();
        assert!(got.is_finite());
        assert!((got.data()[0] - 1.0).abs() < 1e-7);
        assert!(got.data()[1].abs() < 1e-7);
    }

    #[test]
    fn softmax_closed_form() {
        // e^{ln2} / (e^{ln2} + 1) = 2/3.
        let x = Tensor::new(&[2], vec![std::f32::consts::LN_2, 0.0]).unwrap();
        let got = x.softmax(0).unwrap();
        assert!((got.data()[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((got.data()[1] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_rows_of_matrix() {
        let x = t2(&[&[0.0, 0.0], &[5.0, 5.0]]);
        let got = x.softmax(1).unwrap();
        for &v in got.data() {
            assert!((v - 0.5).abs() < 1e-7);
        }
    }

    #[test]
    fn layernorm_constant_input_is_zero() {
        let x = Tensor::filled(&[4], 3.5);
        let gamma = Tensor::filled(&[4], 1.0);
        let beta = Tensor::zeros(&[4]);
        let got = x.layernorm(&gamma, &beta, 1e-5).unwrap();
        for &v in got.data() {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn layernorm_already_normalized() {
        let x = Tensor::new(&[2], vec![1.0, -1.0]).unwrap();
        let gamma = Tensor::filled(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let got = x.layernorm(&gamma, &beta, 1e-12).unwrap();
        assert!((got.data()[0] - 1.0).abs() < 1e-5);
        assert!((got.data()[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn layernorm_affine_shift() {
        // x = [0, 2]: mean 1, std 1, so x̂ = [-1, 1]; beta 5 shifts to [4, 6].
        let x = Tensor::new(&[2], vec![0.0, 2.0]).unwrap();
        let gamma = Tensor::filled(&[2], 1.0);
        let beta = Tensor::filled(&[2], 5.0);
        let got = x.layernorm(&gamma, &beta, 1e-12).unwrap();
        assert!((got.data()[0] - 4.0).abs() < 1e-4);
        assert!((got.data()[1] - 6.0).abs() < 1e-4);
    }

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(1.0) - 0.8412).abs() < 1e-4);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-4);
        assert!(gelu_scalar(-10.0).abs() < 1e-4);
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(&[4, 4], 0.02, &mut r1);
        let b = Tensor::randn(&[4, 4], 0.02, &mut r2);
        assert_eq!(a, b);
    }

    #[test]
    fn data_length_checked() {
        let err = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(err, TensorError::DataLength { .. }));
    }

    fn small_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[rows, cols], 1.0, &mut rng)
    }

    proptest! {
        #[test]
        fn matmul_associative(seed in 0u64..500, m in 1usize..5, k in 1usize..5, n in 1usize..5, q in 1usize..5) {
            let a = small_tensor(m, k, seed);
            let b = small_tensor(k, n, seed.wrapping_add(1));
            let c = small_tensor(n, q, seed.wrapping_add(2));
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (l, r) in left.data().iter().zip(right.data()) {
                let denom = l.abs().max(r.abs()).max(1.0);
                prop_assert!((l - r).abs() / denom < 1e-4);
            }
        }

        #[test]
        fn lowrank_update_distributes(seed in 0u64..500, d in 1usize..8, r in 1usize..4) {
            // (W0 + B·A)·x agrees with W0·x + B·(A·x).
            let w0 = small_tensor(d, d, seed);
            let b = small_tensor(d, r, seed.wrapping_add(1));
            let a = small_tensor(r, d, seed.wrapping_add(2));
            let x = small_tensor(d, 1, seed.wrapping_add(3));
            let dense = w0.add(&b.matmul(&a).unwrap()).unwrap().matmul(&x).unwrap();
            let factored = w0.matmul(&x).unwrap().add(&b.matmul(&a.matmul(&x).unwrap()).unwrap()).unwrap();
            for (l, r) in dense.data().iter().zip(factored.data()) {
                let denom = l.abs().max(r.abs()).max(1.0);
                prop_assert!((l - r).abs() / denom < 1e-5);
            }
        }

        #[test]
        fn softmax_is_probability_vector(seed in 0u64..500, n in 1usize..16) {
            let x = small_tensor(1, n, seed).scale(10.0);
            let s = x.softmax(1).unwrap();
            let mut sum = 0.0f64;
            for &v in s.data() {
                prop_assert!(v >= 0.0);
                sum += f64::from(v);
            }
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }

        #[test]
        fn primitives_are_deterministic(seed in 0u64..200) {
            let a = small_tensor(3, 4, seed);
            let b = small_tensor(4, 2, seed.wrapping_add(9));
            prop_assert_eq!(a.matmul(&b).unwrap(), a.matmul(&b).unwrap());
            prop_assert_eq!(a.softmax(1).unwrap(), a.softmax(1).unwrap());
            prop_assert_eq!(a.gelu(), a.gelu());
        }
    }
}
