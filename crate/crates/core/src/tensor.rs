//! Minimal dense-tensor kernel. Row-major storage, no broadcasting beyond
//! what the model needs; every public operation leaves only finite values
//! behind.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor over a [`Scalar`] element type.
///
/// Storage precision for checkpoints is f32 ([`crate::Tensor32`]); the f64
/// alias exists for finite-difference gradient checking.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor, validating that the shape is positive, matches the
    /// data length, and that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!(
                "dimension sizes must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().try_fold(1usize, |acc, &d| {
            acc.checked_mul(d)
                .ok_or_else(|| Error::shape(format!("element count overflow for shape {shape:?}")))
        })?;
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} implies {numel} elements, data has {}",
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.check_finite()?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Self::new(shape, vec![S::zero(); numel])
    }

    pub fn filled(shape: Vec<usize>, value: S) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Self::new(shape, vec![value; numel])
    }

    /// Scalar tensor (shape `[1]`).
    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// 2-D tensor from nested rows; rows must be equal length.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::shape("from_rows requires at least one row"));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows requires equal-length rows"));
        }
        let data: Vec<S> = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(vec![n, n])?;
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Number of rows of a 2-D tensor.
    pub fn nrows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns of a 2-D tensor.
    pub fn ncols(&self) -> usize {
        self.shape[1]
    }

    pub fn at2(&self, row: usize, col: usize) -> S {
        self.data[row * self.shape[1] + col]
    }

    pub fn set2(&mut self, row: usize, col: usize, value: S) {
        self.data[row * self.shape[1] + col] = value;
    }

    pub fn row(&self, r: usize) -> &[S] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite("tensor construction".into()))
        }
    }

    /// Crate-internal constructor that skips validation; for hot paths where
    /// shape and length are correct by construction. Finiteness is checked
    /// at the loss, not per intermediate.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<S>) -> Tensor<S> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    /// Converts element type, e.g. f32 checkpoint weights into the f64
    /// gradient-check graph.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| T::from_f64(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: S) -> Tensor<S> {
        self.map(|v| v * factor)
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip(other, |a, b| a + b, "add")
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip(other, |a, b| a - b, "sub")
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "add_assign shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    fn zip(&self, other: &Tensor<S>, f: impl Fn(S, S) -> S, op: &str) -> Result<Tensor<S>> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op} shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> S {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), |m, d| if d > m { d } else { m })
    }

    fn require_2d(&self, op: &str) -> Result<()> {
        if self.rank() != 2 {
            return Err(Error::shape(format!(
                "{op} requires a 2-D tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    /// `self[m×k] · other[k×n] -> [m×n]`.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.require_2d("matmul")?;
        other.require_2d("matmul")?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![S::zero(); m * n];
        // ikj order keeps the inner loop contiguous over both operands.
        for i in 0..m {
            let row_out = &mut out[i * n..(i + 1) * n];
            for kk in 0..k {
                let a = self.data[i * k + kk];
                if a == S::zero() {
                    continue;
                }
                let row_b = &other.data[kk * n..(kk + 1) * n];
                for (o, &b) in row_out.iter_mut().zip(row_b) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// `self[m×k] · other[n×k]ᵀ -> [m×n]`, the linear-layer pattern.
    pub fn matmul_nt(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.require_2d("matmul_nt")?;
        other.require_2d("matmul_nt")?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (n, k2) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_nt inner dimensions disagree: {:?} x {:?}ᵀ",
                self.shape, other.shape
            )));
        }
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row_a = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let row_b = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = row_a.iter().zip(row_b).map(|(&a, &b)| a * b).sum();
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// `self[m×k]ᵀ · other[m×n] -> [k×n]`, used by matmul backward rules.
    pub fn matmul_tn(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.require_2d("matmul_tn")?;
        other.require_2d("matmul_tn")?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (m2, n) = (other.shape[0], other.shape[1]);
        if m != m2 {
            return Err(Error::shape(format!(
                "matmul_tn inner dimensions disagree: {:?}ᵀ x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![S::zero(); k * n];
        for i in 0..m {
            let row_a = &self.data[i * k..(i + 1) * k];
            let row_b = &other.data[i * n..(i + 1) * n];
            for (kk, &a) in row_a.iter().enumerate() {
                if a == S::zero() {
                    continue;
                }
                let row_out = &mut out[kk * n..(kk + 1) * n];
                for (o, &b) in row_out.iter_mut().zip(row_b) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![k, n], out)
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Tensor<S>> {
        self.require_2d("transpose")?;
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    /// Softmax over the last dimension, computed with max-subtraction.
    pub fn softmax(&self) -> Result<Tensor<S>> {
        if self.rank() == 0 {
            return Err(Error::shape("softmax requires a last dimension"));
        }
        let width = *self.shape.last().unwrap();
        let mut data = self.data.clone();
        for row in data.chunks_mut(width) {
            softmax_row(row);
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }
}

/// In-place stable softmax of one row.
pub(crate) fn softmax_row<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Mean negative log-softmax of `logits[T×V]` at `targets`, restricted to
/// positions where `mask` is true.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, targets: &[usize], mask: &[bool]) -> Result<S> {
    if logits.rank() != 2 {
        return Err(Error::shape(format!(
            "cross_entropy expects 2-D logits, got {:?}",
            logits.shape()
        )));
    }
    let (t, v) = (logits.nrows(), logits.ncols());
    if targets.len() != t || mask.len() != t {
        return Err(Error::shape(format!(
            "cross_entropy expects {t} targets and mask entries, got {} and {}",
            targets.len(),
            mask.len()
        )));
    }
    let mut total = S::zero();
    let mut count = 0usize;
    for pos in 0..t {
        if !mask[pos] {
            continue;
        }
        if targets[pos] >= v {
            return Err(Error::Index(format!(
                "target {} at position {pos} out of range for vocab {v}",
                targets[pos]
            )));
        }
        total += nll_row(logits.row(pos), targets[pos]);
        count += 1;
    }
    if count == 0 {
        return Err(Error::DegenerateBatch(
            "cross_entropy over fully masked positions".into(),
        ));
    }
    Ok(total / S::from_f64(count as f64))
}

/// −log softmax(row)[target], stable form.
pub(crate) fn nll_row<S: Scalar>(row: &[S], target: usize) -> S {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let log_sum: S = row.iter().map(|&x| (x - max).exp()).sum::<S>().ln();
    max + log_sum - row[target]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent triple-loop product used as the matmul oracle.
    fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.nrows(), a.ncols(), b.ncols());
        let mut out = Tensor::zeros(vec![m, n]).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a.at2(i, kk) * b.at2(kk, j);
                }
                out.set2(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_left_and_right() {
        let x = Tensor::from_rows(&[vec![1.0f32, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let i2 = Tensor::identity(2).unwrap();
        let i3 = Tensor::identity(3).unwrap();
        assert_eq!(i2.matmul(&x).unwrap(), x);
        assert_eq!(x.matmul(&i3).unwrap(), x);
    }

    #[test]
    fn matmul_zeros_annihilate() {
        let z = Tensor::<f32>::zeros(vec![2, 3]).unwrap();
        let x = Tensor::from_rows(&[
            vec![1.0f32, -1.0, 2.0, 0.5],
            vec![3.0, 0.0, 1.0, 1.0],
            vec![2.0, 2.0, 2.0, 2.0],
        ])
        .unwrap();
        let out = z.matmul(&x).unwrap();
        assert_eq!(out, Tensor::zeros(vec![2, 4]).unwrap());
    }

    #[test]
    fn matmul_fixed_2x2_matches_oracle() {
        let a = Tensor::from_rows(&[vec![1.0f32, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0f32, 6.0], vec![7.0, 8.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        let expected = Tensor::from_rows(&[vec![19.0f32, 22.0], vec![43.0, 50.0]]).unwrap();
        assert_eq!(c, expected);
    }

    #[test]
    fn matmul_dimension_mismatch_names_both_shapes() {
        let a = Tensor::<f32>::zeros(vec![2, 3]).unwrap();
        let b = Tensor::<f32>::zeros(vec![4, 2]).unwrap();
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_variants_agree_with_transpose() {
        let mut rng = crate::rng::SeededRng::new(9);
        let a = crate::rng::gaussian_fill::<f64>(&[3, 5], &mut rng, 1.0).unwrap();
        let b = crate::rng::gaussian_fill::<f64>(&[4, 5], &mut rng, 1.0).unwrap();
        let nt = a.matmul_nt(&b).unwrap();
        let via_t = a.matmul(&b.transpose().unwrap()).unwrap();
        assert!(nt.max_abs_diff(&via_t) < 1e-12);

        let c = crate::rng::gaussian_fill::<f64>(&[3, 6], &mut rng, 1.0).unwrap();
        let tn = a.matmul_tn(&c).unwrap();
        let via_t2 = a.transpose().unwrap().matmul(&c).unwrap();
        assert!(tn.max_abs_diff(&via_t2) < 1e-12);
        assert!(
            a.matmul(&b.transpose().unwrap())
                .unwrap()
                .max_abs_diff(&matmul_oracle(&a, &b.transpose().unwrap()))
                < 1e-12
        );
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let t = Tensor::filled(vec![5], 3.25f32).unwrap();
        let s = t.softmax().unwrap();
        for &v in s.data() {
            assert!((v - 0.2).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_single_element_row() {
        let t = Tensor::new(vec![1], vec![42.0f32]).unwrap();
        assert_eq!(t.softmax().unwrap().data(), &[1.0]);
    }

    #[test]
    fn softmax_shift_invariance() {
        let t = Tensor::new(vec![4], vec![0.3f32, -1.2, 2.0, 0.0]).unwrap();
        let shifted = t.map(|v| v + 7.5);
        let a = t.softmax().unwrap();
        let b = shifted.softmax().unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn softmax_rank0_rejected() {
        let t = Tensor::new(vec![], vec![1.0f32]).unwrap();
        assert!(matches!(t.softmax(), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..4, cols in 1usize..16, seed in any::<u64>()) {
            let mut rng = crate::rng::SeededRng::new(seed);
            let t = crate::rng::gaussian_fill::<f32>(&[rows, cols], &mut rng, 3.0).unwrap();
            let s = t.softmax().unwrap();
            for r in 0..rows {
                let sum: f32 = s.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_v() {
        for v in 2usize..=64 {
            let logits = Tensor::filled(vec![3, v], 0.7f32).unwrap();
            let loss = cross_entropy(&logits, &[0, v - 1, v / 2], &[true, true, true]).unwrap();
            assert!(
                (loss - (v as f32).ln()).abs() < 1e-6,
                "V={v}: loss {loss} vs ln {}",
                (v as f32).ln()
            );
        }
    }

    #[test]
    fn cross_entropy_large_margin_tends_to_zero() {
        let mut logits = Tensor::<f32>::zeros(vec![1, 4]).unwrap();
        logits.set2(0, 2, 50.0);
        let loss = cross_entropy(&logits, &[2], &[true]).unwrap();
        assert!(loss < 1e-6, "loss {loss}");
    }

    /// Scalar-by-scalar log-softmax oracle for a fixed 2×3 case.
    #[test]
    fn cross_entropy_fixed_case_matches_scalar_oracle() {
        let logits =
            Tensor::from_rows(&[vec![0.5f64, -1.0, 2.0], vec![1.0, 1.0, -0.5]]).unwrap();
        let targets = [2usize, 0usize];
        let mut expect = 0.0f64;
        for (row, &t) in [(logits.row(0)), (logits.row(1))].iter().zip(&targets) {
            let denom: f64 = row.iter().map(|&x| x.exp()).sum();
            expect += -(row[t].exp() / denom).ln();
        }
        expect /= 2.0;
        let got = cross_entropy(&logits, &targets, &[true, true]).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn cross_entropy_masked_out_positions_ignore_targets() {
        let logits = Tensor::filled(vec![2, 3], 0.0f32).unwrap();
        // Masked position carries an out-of-range target; it must not be read.
        let loss = cross_entropy(&logits, &[1, 999], &[true, false]).unwrap();
        assert!((loss - 3.0f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_all_masked_is_degenerate() {
        let logits = Tensor::filled(vec![2, 3], 0.0f32).unwrap();
        let err = cross_entropy(&logits, &[0, 0], &[false, false]).unwrap_err();
        assert!(matches!(err, Error::DegenerateBatch(_)));
    }

    #[test]
    fn cross_entropy_out_of_range_target_is_index_error() {
        let logits = Tensor::filled(vec![1, 3], 0.0f32).unwrap();
        let err = cross_entropy(&logits, &[3], &[true]).unwrap_err();
        assert!(matches!(err, Error::Index(_)));
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(Tensor::<f32>::zeros(vec![2, 0]).is_err());
    }

    #[test]
    fn non_finite_data_rejected() {
        assert!(Tensor::new(vec![2], vec![1.0f32, f32::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0f32, f32::INFINITY]).is_err());
    }
}
