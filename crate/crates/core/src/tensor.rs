// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major `f32` tensors and the handful of kernels the model needs.
//!
//! Reductions (matmul, softmax normaliser, layer-norm moments) accumulate in
//! `f64` and round once on store.

use crate::error::{DlensError, Result};

/// Layer-norm epsilon used by GPT-2.
pub const LN_EPS: f32 = 1e-5;

/// Dense row-major array of `f32` with shape metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Wrap a buffer, checking that `product(shape) == data.len()`.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(DlensError::Shape(format!(
                "shape {:?} needs {} elements, buffer has {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// 1-D tensor from a vector.
    pub fn vector(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor from a row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Build a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(DlensError::Shape("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Tensor::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        self.data[0]
    }

    /// Same data, new shape.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(DlensError::Shape(format!(
                "{what}: expected a matrix, got shape {other:?}"
            ))),
        }
    }

    /// Number of rows of a matrix (1 for vectors).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols() + j]
    }

    /// Copy of row `i` as a `[1, cols]` matrix.
    pub fn row_tensor(&self, i: usize) -> Tensor {
        Tensor {
            shape: vec![1, self.cols()],
            data: self.row(i).to_vec(),
        }
    }

    /// Column `j` of a matrix.
    pub fn column(&self, j: usize) -> Vec<f32> {
        (0..self.rows()).map(|i| self.at(i, j)).collect()
    }

    /// Sub-matrix of columns `start..end`.
    pub fn column_slice(&self, start: usize, end: usize) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        debug_assert!(start <= end && end <= c);
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Tensor {
            shape: vec![r, end - start],
            data,
        }
    }

    /// Sub-matrix of rows `start..end`.
    pub fn row_slice(&self, start: usize, end: usize) -> Tensor {
        let c = self.cols();
        Tensor {
            shape: vec![end - start, c],
            data: self.data[start * c..end * c].to_vec(),
        }
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data,
        }
    }

    /// `self · other` for `[m,k] × [k,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul lhs")?;
        let (k2, n) = other.dims2("matmul rhs")?;
        if k != k2 {
            return Err(DlensError::Shape(format!("matmul inner dimensions {m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0f32; m * n];
        let mut acc = vec![0.0f64; n];
        for i in 0..m {
            acc.iter_mut().for_each(|a| *a = 0.0);
            let a_row = &self.data[i * k..(i + 1) * k];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let a = a as f64;
                let b_row = &other.data[p * n..(p + 1) * n];
                for (s, &b) in acc.iter_mut().zip(b_row) {
                    *s += a * b as f64;
                }
            }
            for (o, &s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
                *o = s as f32;
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `self · otherᵀ` for `[m,k] × [n,k]`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul_nt lhs")?;
        let (n, k2) = other.dims2("matmul_nt rhs")?;
        if k != k2 {
            return Err(DlensError::Shape(format!(
                "matmul_nt inner dimensions {m}x{k} · ({n}x{k2})ᵀ"
            )));
        }
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = dot64(a, b) as f32;
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `selfᵀ · other` for `[k,m] × [k,n]`.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = self.dims2("matmul_tn lhs")?;
        let (k2, n) = other.dims2("matmul_tn rhs")?;
        if k != k2 {
            return Err(DlensError::Shape(format!(
                "matmul_tn inner dimensions ({k}x{m})ᵀ · {k2}x{n}"
            )));
        }
        let mut acc = vec![0.0f64; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let a = a as f64;
                for (s, &b) in acc[i * n..(i + 1) * n].iter_mut().zip(b_row) {
                    *s += a * b as f64;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: acc.into_iter().map(|v| v as f32).collect(),
        })
    }

    fn zip_with(&self, other: &Tensor, what: &str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(DlensError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(DlensError::Shape(format!(
                "add_assign: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a += b);
        Ok(())
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Add a length-`cols` vector to every row.
    pub fn add_row_vector(&self, v: &[f32]) -> Result<Tensor> {
        let c = self.cols();
        if v.len() != c {
            return Err(DlensError::Shape(format!("row broadcast: {} vs {}", v.len(), c)));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(c) {
            row.iter_mut().zip(v).for_each(|(a, &b)| *a += b);
        }
        Ok(out)
    }

    /// Multiply every row element-wise by a length-`cols` vector.
    pub fn mul_row_vector(&self, v: &[f32]) -> Result<Tensor> {
        let c = self.cols();
        if v.len() != c {
            return Err(DlensError::Shape(format!("row broadcast: {} vs {}", v.len(), c)));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(c) {
            row.iter_mut().zip(v).for_each(|(a, &b)| *a *= b);
        }
        Ok(out)
    }

    /// Prepend a constant-1 column: `x ↦ [1, x]`.
    pub fn augment_ones(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut data = Vec::with_capacity(r * (c + 1));
        for i in 0..r {
            data.push(1.0);
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![r, c + 1],
            data,
        }
    }

    /// Stack matrices vertically.
    pub fn vstack(parts: &[&Tensor]) -> Result<Tensor> {
        let c = parts.first().map_or(0, |t| t.cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != c {
                return Err(DlensError::Shape("vstack: column mismatch".into()));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Tensor::matrix(rows, c, data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }

    /// Largest element-wise absolute difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Error out if any element is NaN or infinite.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(DlensError::NonFinite(what.to_string()))
        }
    }

    /// Index of the largest element of row `i` (lowest index on ties).
    pub fn argmax_row(&self, i: usize) -> usize {
        argmax(self.row(i))
    }
}

pub(crate) fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Index of the first maximum.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax; with `causal`, entries `j > i` are exactly zero.
pub fn softmax_rows(a: &Tensor, causal: bool) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    let mut out = Tensor::zeros(a.shape());
    for i in 0..r {
        let row = a.row(i);
        let limit = if causal { (i + 1).min(c) } else { c };
        let max = row[..limit].iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut total = 0.0f64;
        let dst = out.row_mut(i);
        for j in 0..limit {
            let e = ((row[j] - max) as f64).exp();
            dst[j] = e as f32;
            total += e;
        }
        for v in &mut dst[..limit] {
            *v = (*v as f64 / total) as f32;
        }
    }
    out
}

/// Per-row statistics saved by [`layer_norm_with_stats`]: normalised values
/// and reciprocal standard deviation.
pub struct LayerNormStats {
    pub normalized: Tensor,
    pub inv_std: Vec<f32>,
}

/// Layer normalisation over the last dimension followed by `gamma`, `beta`.
pub fn layer_norm(x: &Tensor, gamma: &[f32], beta: &[f32], eps: f32) -> Result<Tensor> {
    Ok(layer_norm_with_stats(x, gamma, beta, eps)?.0)
}

pub fn layer_norm_with_stats(x: &Tensor, gamma: &[f32], beta: &[f32], eps: f32) -> Result<(Tensor, LayerNormStats)> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(DlensError::Shape(format!(
            "layer_norm: width {d}, gamma {}, beta {}",
            gamma.len(),
            beta.len()
        )));
    }
    let mut out = Tensor::zeros(x.shape());
    let mut normalized = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|&v| {
                let c = v as f64 - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let rstd = 1.0 / (var + eps as f64).sqrt();
        inv_std.push(rstd as f32);
        let nrow = normalized.row_mut(i);
        for j in 0..d {
            nrow[j] = ((row[j] as f64 - mean) * rstd) as f32;
        }
        let orow = out.row_mut(i);
        for j in 0..d {
            orow[j] = nrow[j] * gamma[j] + beta[j];
        }
    }
    Ok((out, LayerNormStats { normalized, inv_std }))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximation GELU, element-wise.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn gelu_scalar(x: f32) -> f32 {
    let x = x as f64;
    (0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())) as f32
}

/// Derivative of [`gelu_scalar`].
pub fn gelu_grad_scalar(x: f32) -> f32 {
    let x = x as f64;
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner) as f32
}

/// Numerically stable log-softmax of a vector, in `f64`.
pub fn log_softmax64(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let lse = logits.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&v| v as f64 - lse).collect()
}

/// Softmax of a vector.
pub fn softmax_vec(logits: &[f32]) -> Vec<f32> {
    log_softmax64(logits).into_iter().map(|l| l.exp() as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let a = Tensor::from_rows(&[vec![1., 2.], vec![3., 4.]]).unwrap();
        assert_eq!(a.matmul(&Tensor::eye(2)).unwrap(), a);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random(&mut rng, 3, 3);
        assert_eq!(Tensor::eye(3).matmul(&b).unwrap(), b);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, 8, 8);
        let b = random(&mut rng, 8, 8);
        let c = a.matmul(&b).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let mut s = 0.0f32;
                for p in 0..8 {
                    s += a.at(i, p) * b.at(p, j);
                }
                assert!((c.at(i, j) - s).abs() <= 1e-6, "({i},{j})");
            }
        }
        let nt = a.matmul_nt(&b.transpose()).unwrap();
        let tn = a.transpose().matmul_tn(&b).unwrap();
        assert!(nt.max_abs_diff(&c) <= 1e-6);
        assert!(tn.max_abs_diff(&c) <= 1e-6);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&a), Err(DlensError::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::zeros(&[1, 4]), false);
        for &v in s.data() {
            assert!((v - 0.25).abs() < 1e-7);
        }
        let s = softmax_rows(&Tensor::from_rows(&[vec![1000., 0.]]).unwrap(), false);
        assert!((s.at(0, 0) - 1.0).abs() <= 1e-6 && s.at(0, 1).abs() <= 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 1, 9).scale(5.0);
        let s = softmax_rows(&x, false);
        let z: f64 = x.data().iter().map(|&v| (v as f64).exp()).sum();
        for (j, &v) in s.data().iter().enumerate() {
            assert!((v as f64 - (x.data()[j] as f64).exp() / z).abs() <= 1e-6);
        }
    }

    #[test]
    fn causal_softmax_zeroes_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = softmax_rows(&random(&mut rng, 5, 5), true);
        for i in 0..5 {
            for j in i + 1..5 {
                assert_eq!(s.at(i, j), 0.0);
            }
            assert!((s.row(i).iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let x = Tensor::full(&[1, 6], 3.5);
        let y = layer_norm(&x, &[1.0; 6], &[0.0; 6], LN_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 1, 6);
        let beta = [0.1, -0.2, 0.3, 0.0, 1.0, 2.0];
        let y = layer_norm(&x, &[0.0; 6], &beta, LN_EPS).unwrap();
        assert_eq!(y.data(), &beta);

        let gamma = [1.5, 0.5, -1.0, 2.0, 1.0, 0.25];
        let y = layer_norm(&x, &gamma, &beta, LN_EPS).unwrap();
        let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let mean = xs.iter().sum::<f64>() / 6.0;
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        for j in 0..6 {
            let r = (xs[j] - mean) / (var + 1e-5).sqrt() * gamma[j] as f64 + beta[j] as f64;
            assert!((y.data()[j] as f64 - r).abs() <= 1e-6);
        }
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() <= 1e-4);
        assert!(gelu_scalar(-10.0).abs() <= 1e-4);
        for &x in &[-2.0f32, -0.3, 0.7, 1.9] {
            let h = 1e-3f64;
            let fd =
                (gelu_scalar((x as f64 + h) as f32) as f64 - gelu_scalar((x as f64 - h) as f32) as f64) / (2.0 * h);
            assert!((fd - gelu_grad_scalar(x) as f64).abs() < 1e-3);
        }
    }

    #[test]
    fn augment_prepends_one() {
        let x = Tensor::from_rows(&[vec![2., 3.]]).unwrap();
        assert_eq!(x.augment_ones().data(), &[1., 2., 3.]);
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_are_distributions(v in proptest::collection::vec(-50.0f32..50.0, 1..40)) {
            let n = v.len();
            let s = softmax_rows(&Tensor::matrix(1, n, v).unwrap(), false);
            let total: f32 = s.data().iter().sum();
            proptest::prop_assert!((total - 1.0).abs() <= 1e-6);
            proptest::prop_assert!(s.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }

        #[test]
        fn matmul_is_associative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, 5, 7);
            let b = random(&mut rng, 7, 4);
            let c = random(&mut rng, 4, 6);
            let l = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let r = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            proptest::prop_assert!(l.max_abs_diff(&r) <= 1e-4);
        }
    }
}
