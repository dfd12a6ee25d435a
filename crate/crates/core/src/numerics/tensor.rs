//! Dense row-major f32 tensors.
//!
//! All reductions (dot products, sums, log-sum-exp) accumulate in f64 and
//! run in a fixed sequential row-major order, so repeated runs are
//! bit-identical on a given platform.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {:?} does not match data length {}", shape, data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], v: f32) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Number of rows when viewed as a matrix ([m, n] or [n] as [1, n]).
    pub fn nrows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            r => panic!("nrows on rank-{} tensor", r),
        }
    }

    pub fn ncols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            r => panic!("ncols on rank-{} tensor", r),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let n = self.ncols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.ncols();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    // ── arithmetic ──────────────────────────────────────────────────

    /// `[m, k] @ [k, n] -> [m, n]` with f64 accumulators.
    pub fn matmul(&self, b: &Tensor) -> Tensor {
        let (m, k) = (self.nrows(), self.ncols());
        let (kb, n) = (b.nrows(), b.ncols());
        assert_eq!(k, kb, "matmul inner dims {} vs {}", k, kb);
        let mut out = vec![0.0f32; m * n];
        let mut acc = vec![0.0f64; n];
        for i in 0..m {
            acc.iter_mut().for_each(|v| *v = 0.0);
            let arow = &self.data[i * k..(i + 1) * k];
            for (p, &a) in arow.iter().enumerate() {
                let a = a as f64;
                let brow = &b.data[p * n..(p + 1) * n];
                for (j, &bv) in brow.iter().enumerate() {
                    acc[j] += a * bv as f64;
                }
            }
            for j in 0..n {
                out[i * n + j] = acc[j] as f32;
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// `[m, k] @ [n, k]^T -> [m, n]`: row-by-row dot products.
    pub fn matmul_bt(&self, b: &Tensor) -> Tensor {
        let (m, k) = (self.nrows(), self.ncols());
        let (n, kb) = (b.nrows(), b.ncols());
        assert_eq!(k, kb, "matmul_bt inner dims {} vs {}", k, kb);
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b.data[j * k..(j + 1) * k];
                let mut acc = 0.0f64;
                for p in 0..k {
                    acc += arow[p] as f64 * brow[p] as f64;
                }
                out[i * n + j] = acc as f32;
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// `[m, k]^T @ [m, n] -> [k, n]` (used by matmul backward).
    pub fn matmul_at(&self, b: &Tensor) -> Tensor {
        let (m, k) = (self.nrows(), self.ncols());
        let (mb, n) = (b.nrows(), b.ncols());
        assert_eq!(m, mb, "matmul_at outer dims {} vs {}", m, mb);
        let mut acc = vec![0.0f64; k * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let brow = &b.data[i * n..(i + 1) * n];
            for (p, &a) in arow.iter().enumerate() {
                let a = a as f64;
                let dst = &mut acc[p * n..(p + 1) * n];
                for (j, &bv) in brow.iter().enumerate() {
                    dst[j] += a * bv as f64;
                }
            }
        }
        Tensor::new(vec![k, n], acc.into_iter().map(|v| v as f32).collect())
    }

    pub fn add(&self, b: &Tensor) -> Tensor {
        self.zip(b, |x, y| x + y)
    }

    pub fn sub(&self, b: &Tensor) -> Tensor {
        self.zip(b, |x, y| x - y)
    }

    pub fn mul(&self, b: &Tensor) -> Tensor {
        self.zip(b, |x, y| x * y)
    }

    pub fn scale(&self, c: f32) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| v * c).collect() }
    }

    pub fn add_assign(&mut self, b: &Tensor) {
        assert_eq!(self.shape, b.shape);
        for (x, y) in self.data.iter_mut().zip(&b.data) {
            *x += y;
        }
    }

    fn zip(&self, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
        assert_eq!(self.shape, b.shape, "elementwise op shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        }
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn dot_f64(&self, b: &Tensor) -> f64 {
        assert_eq!(self.data.len(), b.data.len());
        self.data.iter().zip(&b.data).map(|(&x, &y)| x as f64 * y as f64).sum()
    }

    pub fn sq_norm_f64(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }
}

/// In-place row softmax over the first `len` entries; entries beyond `len`
/// are set to zero. Max-subtraction and f64 accumulation throughout.
pub fn softmax_prefix_in_place(row: &mut [f32], len: usize) {
    debug_assert!(len > 0 && len <= row.len());
    let mut mx = f32::NEG_INFINITY;
    for &v in &row[..len] {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = 0.0f64;
    for v in &mut row[..len] {
        let e = ((*v - mx) as f64).exp();
        *v = e as f32;
        sum += e;
    }
    let inv = 1.0 / sum;
    for v in &mut row[..len] {
        *v = (*v as f64 * inv) as f32;
    }
    for v in &mut row[len..] {
        *v = 0.0;
    }
}

/// log(sum(exp(x))) with max-subtraction, f64 accumulation.
pub fn log_sum_exp(xs: &[f32]) -> f64 {
    let mx = xs.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if !mx.is_finite() {
        return mx as f64;
    }
    let sum: f64 = xs.iter().map(|&v| ((v - mx) as f64).exp()).sum();
    mx as f64 + sum.ln()
}

/// softmax of a slice into a fresh f64 vector (used by loss kernels).
pub fn softmax_f64(xs: &[f32]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|&v| (v as f64 - lse).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::new(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn matmul_bt_matches_explicit_transpose() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::new(vec![2, 3], vec![7., 9., 11., 8., 10., 12.]);
        let c = a.matmul_bt(&b);
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn matmul_at_is_transposed_product() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]);
        let c = a.matmul_at(&b); // a^T @ I = a^T
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(c.data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn softmax_prefix_sums_to_one_and_zeroes_tail() {
        let mut row = vec![0.5, -1.0, 2.0, 9.9];
        softmax_prefix_in_place(&mut row, 3);
        let s: f32 = row[..3].iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert_eq!(row[3], 0.0);
        assert!(row[..3].iter().all(|&p| p > 0.0));
    }

    #[test]
    fn log_sum_exp_saturated_does_not_overflow() {
        let v = log_sum_exp(&[1000.0, 0.0, -5.0]);
        assert!((v - 1000.0).abs() < 1e-6);
    }
}
