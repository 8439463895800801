//! Unit-norm feature vectors and cosine similarity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};

/// Components smaller than this (in absolute value) count as zero when normalizing.
pub const ZERO_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SampleId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassLabel(pub u32);

impl ClassLabel {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// An embedding with unit Euclidean norm.
///
/// The only ways to build one are [`l2_normalize`] and
/// [`FeatureVector::from_unit_unchecked`]; similarity functions assume the
/// invariant and never re-normalize.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector<S: Scalar = f64> {
    values: Vec<S>,
}

impl<S: Scalar> FeatureVector<S> {
    /// Wraps values that are already unit-norm (for example read back from a
    /// feature file written by this crate).
    pub fn from_unit_unchecked(values: Vec<S>) -> Self {
        Self { values }
    }

    pub fn as_slice(&self) -> &[S] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn into_inner(self) -> Vec<S> {
        self.values
    }
}

impl<S: Scalar> AsRef<[S]> for FeatureVector<S> {
    fn as_ref(&self) -> &[S] {
        &self.values
    }
}

pub fn l2_normalize<S: Scalar>(v: &[S]) -> Result<FeatureVector<S>> {
    let tol = S::lit(ZERO_TOLERANCE);
    if v.is_empty() || v.iter().all(|x| x.abs() <= tol) {
        return Err(Error::ZeroVector);
    }
    let n = dot(v, v).sqrt();
    Ok(FeatureVector {
        values: v.iter().map(|x| *x / n).collect(),
    })
}

pub fn cosine_sim<S: Scalar>(a: &FeatureVector<S>, b: &FeatureVector<S>) -> Result<S> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(dot(&a.values, &b.values))
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<S: Scalar = f64> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = S::one();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// `self · x` for a column vector `x`.
    pub fn mul_vec(&self, x: &[S]) -> Vec<S> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `selfᵀ · y`.
    pub fn tr_mul_vec(&self, y: &[S]) -> Vec<S> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![S::zero(); self.cols];
        for (i, yi) in y.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.row(i)) {
                *o += *w * *yi;
            }
        }
        out
    }

    /// `self += y · xᵀ`.
    pub fn add_outer(&mut self, y: &[S], x: &[S]) {
        for (i, yi) in y.iter().enumerate() {
            for (w, xj) in self.row_mut(i).iter_mut().zip(x) {
                *w += *yi * *xj;
            }
        }
    }
}

impl<S: Scalar> std::ops::Index<(usize, usize)> for Matrix<S> {
    type Output = S;
    fn index(&self, (i, j): (usize, usize)) -> &S {
        &self.data[i * self.cols + j]
    }
}

impl<S: Scalar> std::ops::IndexMut<(usize, usize)> for Matrix<S> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut S {
        &mut self.data[i * self.cols + j]
    }
}

/// Pairwise similarities, entry `(i, j)` is `cosine_sim(rows[i], cols[j])`.
pub fn sim_matrix<S: Scalar>(
    rows: &[FeatureVector<S>],
    cols: &[FeatureVector<S>],
) -> Result<Matrix<S>> {
    if rows.is_empty() || cols.is_empty() {
        return Err(Error::EmptyInput("sim_matrix needs at least one row and column"));
    }
    let d = rows[0].dim();
    for v in rows.iter().chain(cols) {
        if v.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: v.dim(),
            });
        }
    }
    let mut m = Matrix::zeros(rows.len(), cols.len());
    for (i, r) in rows.iter().enumerate() {
        for (j, c) in cols.iter().enumerate() {
            m[(i, j)] = dot(&r.values, &c.values);
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn unit(v: &[f64]) -> FeatureVector {
        l2_normalize(v).unwrap()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(unit(&[3.0, 4.0]).as_slice(), &[0.6, 0.8]);
        assert_eq!(unit(&[0.0, 0.0, 5.0]).as_slice(), &[0.0, 0.0, 1.0]);
        let v = unit(&[1.0, 1.0]);
        assert_abs_diff_eq!(v.as_slice()[0], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-8);
        assert_abs_diff_eq!(v.as_slice()[1], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-8);
    }

    #[test]
    fn normalize_rejects_zero() {
        assert!(matches!(l2_normalize(&[0.0, 1e-13]), Err(Error::ZeroVector)));
        assert!(matches!(l2_normalize::<f64>(&[]), Err(Error::ZeroVector)));
    }

    #[test]
    fn cosine_examples() {
        let a = unit(&[1.0, 2.0, 3.0]);
        assert_abs_diff_eq!(cosine_sim(&a, &a).unwrap(), 1.0, epsilon = 1e-15);
        let e1 = unit(&[1.0, 0.0]);
        let e2 = unit(&[0.0, 1.0]);
        assert_eq!(cosine_sim(&e1, &e2).unwrap(), 0.0);
        let neg = unit(&[-1.0, -2.0, -3.0]);
        assert_abs_diff_eq!(cosine_sim(&a, &neg).unwrap(), -1.0, epsilon = 1e-15);
        assert!(matches!(
            cosine_sim(&a, &e1),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn sim_matrix_examples() {
        let basis = vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0])];
        assert_eq!(sim_matrix(&basis, &basis).unwrap(), Matrix::identity(2));
        let a = vec![unit(&[0.3, 0.4])];
        assert_eq!(sim_matrix(&a, &a).unwrap()[(0, 0)], cosine_sim(&a[0], &a[0]).unwrap());

        let rows = vec![unit(&[1.0, 2.0, 0.5]), unit(&[-1.0, 0.0, 1.0])];
        let cols = vec![unit(&[0.0, 1.0, 1.0]), unit(&[2.0, -1.0, 0.0]), unit(&[1.0, 1.0, 1.0])];
        let m = sim_matrix(&rows, &cols).unwrap();
        assert_eq!((m.rows(), m.cols()), (2, 3));
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(m[(i, j)], cosine_sim(&rows[i], &cols[j]).unwrap());
            }
        }
        assert!(matches!(sim_matrix(&rows, &[]), Err(Error::EmptyInput(_))));
        assert!(matches!(
            sim_matrix(&rows, &[unit(&[1.0, 0.0])]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn works_in_single_precision() {
        let v = l2_normalize(&[3.0f32, 4.0]).unwrap();
        assert!((cosine_sim(&v, &v).unwrap() - 1.0).abs() < 1e-6);
    }

    fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, 4).prop_filter("nonzero", |v| {
            v.iter().any(|x| x.abs() > 1e-3)
        })
    }

    proptest! {
        #[test]
        fn normalized_is_unit_and_idempotent(v in vec_strategy()) {
            let f = unit(&v);
            let n: f64 = f.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-9);
            let g = unit(f.as_slice());
            for (a, b) in f.as_slice().iter().zip(g.as_slice()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn cosine_is_symmetric_and_bounded(a in vec_strategy(), b in vec_strategy()) {
            let (a, b) = (unit(&a), unit(&b));
            let ab = cosine_sim(&a, &b).unwrap();
            prop_assert_eq!(ab, cosine_sim(&b, &a).unwrap());
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&ab));
        }
    }
}
