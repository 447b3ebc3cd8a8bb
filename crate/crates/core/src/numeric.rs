//! Dense vector/matrix primitives, stable reductions and the finite-difference
//! gradient oracle every analytic backward pass is certified against.

use thiserror::Error;

use crate::scalar::Scalar;

/// Relative-error floor used by [`check_gradient`].
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("function evaluation was not finite at coordinate {index}")]
    NonFiniteEvaluation { index: usize },
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("matrix shape {rows}x{cols} does not match {len} values")]
    ShapeMismatch { rows: usize, cols: usize, len: usize },
}

fn check_finite<T: Scalar>(values: &[T]) -> Result<(), NumericError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(NumericError::NonFinite { index }),
        None => Ok(()),
    }
}

/// A non-empty vector of finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector<T> {
    values: Vec<T>,
}

impl<T: Scalar> DenseVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self, NumericError> {
        if values.is_empty() {
            return Err(NumericError::EmptyInput);
        }
        check_finite(&values)?;
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "vector dimension must be positive");
        Self {
            values: vec![T::zero(); dim],
        }
    }

    /// Builds from values already known to be finite and non-empty.
    pub(crate) fn from_raw(values: Vec<T>) -> Self {
        debug_assert!(!values.is_empty());
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self { values }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<T> {
        self.values
    }

    pub fn norm(&self) -> T {
        norm(&self.values)
    }

    pub fn dot(&self, other: &Self) -> Result<T, NumericError> {
        same_dim(self.dim(), other.dim())?;
        Ok(dot(&self.values, &other.values))
    }

    pub fn normalized(&self) -> Result<Self, NumericError> {
        let n = self.norm();
        if n == T::zero() {
            return Err(NumericError::ZeroVector);
        }
        Ok(Self::from_raw(self.values.iter().map(|&v| v / n).collect()))
    }

    pub fn scaled(&self, alpha: T) -> Self {
        Self::from_raw(self.values.iter().map(|&v| v * alpha).collect())
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: T, other: &Self) -> Result<(), NumericError> {
        same_dim(self.dim(), other.dim())?;
        axpy(alpha, &other.values, &mut self.values);
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == T::zero())
    }
}

/// Row-major dense matrix of finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    values: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn new(rows: usize, cols: usize, values: Vec<T>) -> Result<Self, NumericError> {
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(NumericError::ShapeMismatch {
                rows,
                cols,
                len: values.len(),
            });
        }
        check_finite(&values)?;
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            values: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(f(r, c));
            }
        }
        Self { rows, cols, values }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn fill_zero(&mut self) {
        self.values.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `out = selfᵀ x`, i.e. `out[c] = Σ_r x[r]·self[r][c]`.
    pub fn transpose_mul(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![T::zero(); self.cols];
        for (r, &xr) in x.iter().enumerate() {
            axpy(xr, self.row(r), &mut out);
        }
        out
    }

    /// `out = self y`, i.e. `out[r] = Σ_c self[r][c]·y[c]`.
    pub fn mul(&self, y: &[T]) -> Vec<T> {
        debug_assert_eq!(y.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), y)).collect()
    }
}

#[inline]
fn same_dim(left: usize, right: usize) -> Result<(), NumericError> {
    if left != right {
        return Err(NumericError::DimensionMismatch { left, right });
    }
    Ok(())
}

/// Left-to-right dot product.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_sim<T: Scalar>(a: &DenseVector<T>, b: &DenseVector<T>) -> Result<T, NumericError> {
    same_dim(a.dim(), b.dim())?;
    cosine_slices(a.as_slice(), b.as_slice())
}

pub(crate) fn cosine_slices<T: Scalar>(a: &[T], b: &[T]) -> Result<T, NumericError> {
    let na = norm(a);
    let nb = norm(b);
    if na == T::zero() || nb == T::zero() {
        return Err(NumericError::ZeroVector);
    }
    let c = dot(a, b) / (na * nb);
    Ok(c.max(-T::one()).min(T::one()))
}

/// `log Σ exp(x)` with max subtraction.
pub fn logsumexp<T: Scalar>(xs: &[T]) -> Result<T, NumericError> {
    let first = *xs.first().ok_or(NumericError::EmptyInput)?;
    check_finite(xs)?;
    let m = xs.iter().fold(first, |acc, &x| acc.max(x));
    let mut s = T::zero();
    for &x in xs {
        s += (x - m).exp();
    }
    Ok(m + s.ln())
}

/// Softmax weights `exp(x_k - lse)` given a precomputed log-sum-exp.
pub(crate) fn softmax_with<T: Scalar>(xs: &[T], lse: T) -> Vec<T> {
    xs.iter().map(|&x| (x - lse).exp()).collect()
}

/// Central differences over a flat parameter slice.
pub fn finite_diff_grad_slice<T, F>(mut f: F, x: &[T], h: T) -> Result<Vec<T>, NumericError>
where
    T: Scalar,
    F: FnMut(&[T]) -> T,
{
    if !(h > T::zero()) {
        return Err(NumericError::InvalidStep(h.as_f64()));
    }
    let mut probe = x.to_vec();
    let two_h = h + h;
    let mut grad = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let orig = probe[k];
        probe[k] = orig + h;
        let plus = f(&probe);
        probe[k] = orig - h;
        let minus = f(&probe);
        probe[k] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(NumericError::NonFiniteEvaluation { index: k });
        }
        grad.push((plus - minus) / two_h);
    }
    Ok(grad)
}

/// Central-difference gradient of a scalar function of a vector.
pub fn finite_diff_grad<T, F>(
    mut f: F,
    x: &DenseVector<T>,
    h: T,
) -> Result<DenseVector<T>, NumericError>
where
    T: Scalar,
    F: FnMut(&DenseVector<T>) -> T,
{
    let grad = finite_diff_grad_slice(
        |probe: &[T]| f(&DenseVector::from_raw(probe.to_vec())),
        x.as_slice(),
        h,
    )?;
    Ok(DenseVector::from_raw(grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

pub fn check_gradient<T: Scalar>(
    analytic: &[T],
    numeric: &[T],
    tol: f64,
) -> Result<GradCheckReport, NumericError> {
    same_dim(analytic.len(), numeric.len())?;
    let mut worst = 0.0f64;
    let mut worst_index = 0;
    for (k, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let (a, n) = (a.as_f64(), n.as_f64());
        let denom = a.abs().max(n.abs()).max(REL_ERR_FLOOR);
        let err = (a - n).abs() / denom;
        if !(err <= worst) {
            worst = err;
            worst_index = k;
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst,
        worst_index,
        passed: worst <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DenseVector<f64> {
        DenseVector::new(xs.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(cosine_sim(&v(&[2.0, 0.0]), &v(&[1.0, 0.0])).unwrap(), 1.0);
        let c = cosine_sim(&v(&[1.0, 1.0]), &v(&[1.0, 0.0])).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn cosine_errors() {
        assert_eq!(
            cosine_sim(&v(&[1.0]), &v(&[1.0, 0.0])),
            Err(NumericError::DimensionMismatch { left: 1, right: 2 })
        );
        assert_eq!(
            cosine_sim(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])),
            Err(NumericError::ZeroVector)
        );
    }

    #[test]
    fn cosine_works_in_f32() {
        let a = DenseVector::new(vec![1.0f32, 1.0]).unwrap();
        let b = DenseVector::new(vec![1.0f32, 0.0]).unwrap();
        assert!((cosine_sim(&a, &b).unwrap() - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn logsumexp_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((logsumexp(&[0.0, 0.0]).unwrap() - ln2).abs() < 1e-15);
        assert_eq!(logsumexp(&[5.0]).unwrap(), 5.0);
        let big = logsumexp(&[1000.0, 1000.0]).unwrap();
        assert!((big - (1000.0 + ln2)).abs() < 1e-12);
        assert_eq!(logsumexp::<f64>(&[]), Err(NumericError::EmptyInput));
    }

    #[test]
    fn rejects_non_finite_construction() {
        assert_eq!(
            DenseVector::new(vec![1.0, f64::NAN]),
            Err(NumericError::NonFinite { index: 1 })
        );
        assert_eq!(DenseVector::<f64>::new(vec![]), Err(NumericError::EmptyInput));
        assert!(DenseMatrix::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x| x.as_slice()[0].powi(2), &v(&[3.0]), 1e-5).unwrap();
        assert!((g.as_slice()[0] - 6.0).abs() < 1e-6);

        let x = v(&[0.3, -2.0, 7.5]);
        let g = finite_diff_grad(|x| x.as_slice().iter().sum(), &x, 1e-5).unwrap();
        for &gi in g.as_slice() {
            assert!((gi - 1.0).abs() < 1e-9);
        }
        assert!(matches!(
            finite_diff_grad(|x| x.as_slice()[0], &x, 0.0),
            Err(NumericError::InvalidStep(_))
        ));
        assert_eq!(
            finite_diff_grad(|x| x.as_slice()[0].ln(), &v(&[0.0]), 1e-5),
            Err(NumericError::NonFiniteEvaluation { index: 0 })
        );
    }

    #[test]
    fn check_gradient_examples() {
        let r = check_gradient(&[1.0, 2.0], &[1.0, 2.0], 1e-4).unwrap();
        assert!(r.passed);
        assert_eq!(r.max_relative_error, 0.0);

        let r = check_gradient(&[1.0], &[1.001], 1e-4).unwrap();
        assert!(!r.passed);
        assert!((r.max_relative_error - 0.001 / 1.001).abs() < 1e-12);

        let r = check_gradient(&[0.0], &[0.0], 1e-4).unwrap();
        assert!(r.passed);

        let r = check_gradient(&[0.0, 5.0, 1.0], &[0.0, 5.0, 2.0], 1e-4).unwrap();
        assert_eq!(r.worst_index, 2);
        assert!(check_gradient(&[0.0], &[0.0, 1.0], 1e-4).is_err());
    }

    #[test]
    fn matrix_products() {
        let m = DenseMatrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.transpose_mul(&[1.0, 1.0]), vec![5.0, 7.0, 9.0]);
        assert_eq!(m.mul(&[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
    }

    fn nonzero_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, dim)
            .prop_filter("nonzero", |xs| xs.iter().any(|x| x.abs() > 1e-3))
    }

    proptest! {
        #[test]
        fn cosine_self_is_one(xs in nonzero_vec(6)) {
            let a = v(&xs);
            prop_assert!((cosine_sim(&a, &a).unwrap() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn cosine_scale_invariant(xs in nonzero_vec(5), ys in nonzero_vec(5), alpha in 1e-3f64..1e3) {
            let (a, b) = (v(&xs), v(&ys));
            let c1 = cosine_sim(&a, &b).unwrap();
            let c2 = cosine_sim(&a.scaled(alpha), &b).unwrap();
            prop_assert!((c1 - c2).abs() <= 1e-12);
            prop_assert!((c1 - cosine_sim(&b, &a).unwrap()).abs() <= 1e-15);
            prop_assert!((-1.0..=1.0).contains(&c1));
        }

        #[test]
        fn logsumexp_bounds(xs in prop::collection::vec(-700.0f64..700.0, 1..20)) {
            let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let l = logsumexp(&xs).unwrap();
            prop_assert!(l >= m);
            prop_assert!(l <= m + (xs.len() as f64).ln() + 1e-12);
        }
    }
}
