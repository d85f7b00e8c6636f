//! Dense tensors: row-major `f64` storage with shape metadata.
//!
//! Tensors are immutable values in practice — every operation allocates its
//! output — which keeps them safe to share read-only across threads. The
//! matrix product parallelizes over output rows; each element is still the
//! result of one sequential inner loop, so results are bitwise identical
//! regardless of thread count.

use crate::error::{Error, Result};
use crate::par;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![v; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    /// Gaussian-initialized tensor, mean 0 and the given std.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut SplitMix64) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.next_gaussian() * std).collect();
        Tensor { shape, data }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Rows of a 2-D tensor (a 1-D tensor counts as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on tensor of rank {}", self.shape.len()),
        }
    }

    /// Columns of a 2-D tensor (its last dimension).
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("cols() on empty shape")
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn check_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn mul_elem(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "mul_elem")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// Matrix product of `self` (m×k) and `b` (k×n).
    pub fn matmul(&self, b: &Tensor) -> Result<Tensor> {
        let (m, k) = mat_dims(self, "matmul lhs")?;
        let (k2, n) = mat_dims(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: inner dimensions disagree, lhs {:?} vs rhs {:?}",
                self.shape, b.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        let (a_data, b_data) = (&self.data, &b.data);
        par::for_each_row(&mut out, n, |i, row| {
            let a_row = &a_data[i * k..(i + 1) * k];
            for (p, &a_ip) in a_row.iter().enumerate() {
                let b_row = &b_data[p * n..(p + 1) * n];
                for (r, &bv) in row.iter_mut().zip(b_row) {
                    *r += a_ip * bv;
                }
            }
        });
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    /// Matrix product of `self` (m×k) with the transpose of `b` (n×k).
    pub fn matmul_tb(&self, b: &Tensor) -> Result<Tensor> {
        let (m, k) = mat_dims(self, "matmul_tb lhs")?;
        let (n, k2) = mat_dims(b, "matmul_tb rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_tb: inner dimensions disagree, lhs {:?} vs rhs-transposed {:?}",
                self.shape, b.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        let (a_data, b_data) = (&self.data, &b.data);
        par::for_each_row(&mut out, n, |i, row| {
            let a_row = &a_data[i * k..(i + 1) * k];
            for (j, r) in row.iter_mut().enumerate() {
                let b_row = &b_data[j * k..(j + 1) * k];
                *r = dot(a_row, b_row);
            }
        });
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = mat_dims(self, "transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor { shape: vec![n, m], data: out })
    }

    /// Softmax along `axis`, computed with max-subtraction for stability.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(Error::Dimension(format!(
                "softmax: axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        if self.shape[axis] == 0 {
            return Err(Error::Dimension(format!(
                "softmax: empty axis {axis} in shape {:?}",
                self.shape
            )));
        }
        let axis_len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = vec![0.0; self.data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for a in 0..axis_len {
                    max = max.max(self.data[base + a * inner]);
                }
                let mut sum = 0.0;
                for a in 0..axis_len {
                    let e = (self.data[base + a * inner] - max).exp();
                    out[base + a * inner] = e;
                    sum += e;
                }
                for a in 0..axis_len {
                    out[base + a * inner] /= sum;
                }
            }
        }
        Ok(Tensor { shape: self.shape.clone(), data: out })
    }

    /// Layer normalization over the last dimension with population variance:
    /// `gamma * (x - mean) / sqrt(var + eps) + beta` per vector.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = self.cols();
        if gamma.numel() != d || beta.numel() != d {
            return Err(Error::Dimension(format!(
                "layer_norm: gamma/beta of {}/{} elements for last dim {d}",
                gamma.numel(),
                beta.numel()
            )));
        }
        let mut out = self.data.clone();
        let (g, b) = (&gamma.data, &beta.data);
        for row in out.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = g[j] * (*v - mean) * inv + b[j];
            }
        }
        Ok(Tensor { shape: self.shape.clone(), data: out })
    }
}

/// Four-lane dot product: a fixed association order that the compiler can
/// keep in SIMD registers. Deterministic for given inputs.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ac = a.chunks_exact(4);
    let mut bc = b.chunks_exact(4);
    for (xs, ys) in ac.by_ref().zip(bc.by_ref()) {
        acc[0] += xs[0] * ys[0];
        acc[1] += xs[1] * ys[1];
        acc[2] += xs[2] * ys[2];
        acc[3] += xs[3] * ys[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ac.remainder().iter().zip(bc.remainder()) {
        s += x * y;
    }
    s
}

fn mat_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape.len() {
        2 => Ok((t.shape[0], t.shape[1])),
        _ => Err(Error::Dimension(format!(
            "{what}: expected rank-2 tensor, got shape {:?}",
            t.shape
        ))),
    }
}

/// Central-difference gradient of a scalar function:
/// `(f(x + eps*e_i) - f(x - eps*e_i)) / (2 eps)` per coordinate.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, eps: f64) -> Tensor
where
    F: Fn(&Tensor) -> f64,
{
    let mut grad = Tensor::zeros(x.shape().to_vec());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let up = f(&probe);
        probe.data[i] = orig - eps;
        let down = f(&probe);
        probe.data[i] = orig;
        grad.data[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// sigmoid, used for the mixing scalars and the smooth FFN nonlinearity.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// silu(x) = x * sigmoid(x).
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn matmul_identity() {
        let id = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(id.matmul(&m).unwrap().data(), m.data());
    }

    #[test]
    fn matmul_projector_row() {
        let p = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let m = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let y = p.matmul(&m).unwrap();
        assert_eq!(y.data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = SplitMix64::new(11);
        let a = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let b = Tensor::randn(vec![4, 2], 1.0, &mut rng);
        let got = a.matmul(&b).unwrap();
        let want = oracle::naive_matmul(&a, &b);
        for (g, w) in got.data().iter().zip(want.data()) {
            approx(*g, *w, 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![4, 2]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn matmul_associativity() {
        let mut rng = SplitMix64::new(5);
        for _ in 0..10 {
            let a = Tensor::randn(vec![3, 4], 1.0, &mut rng);
            let b = Tensor::randn(vec![4, 5], 1.0, &mut rng);
            let c = Tensor::randn(vec![5, 2], 1.0, &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (l, r) in left.data().iter().zip(right.data()) {
                approx(*l, *r, 1e-9);
            }
        }
    }

    #[test]
    fn matmul_repeated_is_bitwise_identical() {
        let mut rng = SplitMix64::new(23);
        let a = Tensor::randn(vec![17, 9], 1.0, &mut rng);
        let b = Tensor::randn(vec![9, 13], 1.0, &mut rng);
        let x = a.matmul(&b).unwrap();
        let y = a.matmul(&b).unwrap();
        for (p, q) in x.data().iter().zip(y.data()) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
    }

    #[test]
    fn softmax_symmetry() {
        let x = Tensor::new(vec![4], vec![0.0; 4]).unwrap();
        let y = x.softmax(0).unwrap();
        for v in y.data() {
            approx(*v, 0.25, 1e-15);
        }
    }

    #[test]
    fn softmax_direct_evaluation() {
        let x = Tensor::new(vec![2], vec![2.0, 1.0]).unwrap();
        let y = x.softmax(0).unwrap();
        approx(y.data()[0], 0.73106, 1e-5);
        approx(y.data()[1], 0.26894, 1e-5);
    }

    #[test]
    fn softmax_no_overflow() {
        let x = Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap();
        let y = x.softmax(0).unwrap();
        assert!(y.all_finite());
        approx(y.data()[0], 1.0, 1e-12);
    }

    #[test]
    fn softmax_slices_sum_to_one() {
        let mut rng = SplitMix64::new(9);
        let x = Tensor::randn(vec![5, 7], 3.0, &mut rng);
        for axis in 0..2 {
            let y = x.softmax(axis).unwrap();
            assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            // Sum along the axis must be 1 for every slice.
            let (rows, cols) = (5, 7);
            if axis == 1 {
                for i in 0..rows {
                    let s: f64 = y.data()[i * cols..(i + 1) * cols].iter().sum();
                    approx(s, 1.0, 1e-12);
                }
            } else {
                for j in 0..cols {
                    let s: f64 = (0..rows).map(|i| y.data()[i * cols + j]).sum();
                    approx(s, 1.0, 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_bad_axis() {
        let x = Tensor::zeros(vec![2, 2]);
        assert!(x.softmax(2).is_err());
    }

    #[test]
    fn layer_norm_constant_vector_is_zero() {
        let x = Tensor::full(vec![1, 4], 3.25);
        let g = Tensor::full(vec![4], 1.0);
        let b = Tensor::zeros(vec![4]);
        let y = x.layer_norm(&g, &b, 1e-5).unwrap();
        for v in y.data() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn layer_norm_hand_case() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap();
        let g = Tensor::full(vec![2], 1.0);
        let b = Tensor::zeros(vec![2]);
        let y = x.layer_norm(&g, &b, 0.0).unwrap();
        approx(y.data()[0], -1.0, 1e-12);
        approx(y.data()[1], 1.0, 1e-12);
    }

    #[test]
    fn layer_norm_zero_gamma_gives_beta() {
        let mut rng = SplitMix64::new(2);
        let x = Tensor::randn(vec![3, 4], 2.0, &mut rng);
        let g = Tensor::zeros(vec![4]);
        let b = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let y = x.layer_norm(&g, &b, 1e-5).unwrap();
        for row in 0..3 {
            for j in 0..4 {
                assert_eq!(y.data()[row * 4 + j], b.data()[j]);
            }
        }
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut rng = SplitMix64::new(8);
        let d = 16;
        let x = Tensor::randn(vec![4, d], 2.0, &mut rng);
        let g = Tensor::full(vec![d], 1.0);
        let b = Tensor::zeros(vec![d]);
        let y = x.layer_norm(&g, &b, 0.0).unwrap();
        for row in y.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            approx(mean, 0.0, 1e-10);
            approx(var, 1.0, 1e-6);
        }
    }

    #[test]
    fn finite_diff_on_sum_of_squares() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-5);
        approx(g.data()[0], 2.0, 1e-6);
        approx(g.data()[1], 4.0, 1e-6);
    }

    #[test]
    fn finite_diff_on_constant_is_zero() {
        let x = Tensor::new(vec![3], vec![1.0, -1.0, 0.5]).unwrap();
        let g = finite_diff_grad(|_| 7.5, &x, 1e-4);
        for v in g.data() {
            assert_eq!(*v, 0.0);
        }
    }
}
