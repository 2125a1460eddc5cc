//! Dense linear algebra, seeded randomness and gradient checking.

mod gradcheck;
mod matrix;
mod rng;

pub use gradcheck::check_gradient;
pub use matrix::{dot, norm, Matrix};
pub use rng::SeededRng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// K×N matrix whose columns are probability vectors, one column per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMatrix<S>(Matrix<S>);

impl<S: Scalar> PredictionMatrix<S> {
    /// Wraps `m` after checking that it is non-negative and column-stochastic
    /// within `tol`.
    pub fn from_matrix(m: Matrix<S>, tol: S) -> Result<Self> {
        m.ensure_finite("prediction matrix")?;
        if m.data().iter().any(|&v| v < S::zero()) {
            return Err(Error::Shape("negative probability".into()));
        }
        for (j, s) in m.col_sums().into_iter().enumerate() {
            if (s - S::one()).abs() > tol {
                return Err(Error::Shape(format!("column {j} sums to {s}")));
            }
        }
        Ok(Self(m))
    }

    pub fn num_classes(&self) -> usize {
        self.0.rows()
    }

    pub fn num_samples(&self) -> usize {
        self.0.cols()
    }

    pub fn as_matrix(&self) -> &Matrix<S> {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix<S> {
        self.0
    }

    pub fn column(&self, n: usize) -> Vec<S> {
        self.0.column(n)
    }
}

/// Numerically stable softmax of a slice, written into `out`.
pub fn softmax_into<S: Scalar>(logits: &[S], out: &mut [S]) {
    let max = logits
        .iter()
        .copied()
        .fold(S::neg_infinity(), |a, b| if b > a { b } else { a });
    let mut total = S::zero();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// `ln Σ exp(v)` with the usual max shift.
pub fn log_sum_exp<S: Scalar>(values: impl Iterator<Item = S> + Clone) -> S {
    let max = values
        .clone()
        .fold(S::neg_infinity(), |a, b| if b > a { b } else { a });
    if max == S::neg_infinity() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<S>().ln()
}

/// Column-wise softmax of a K×N logit matrix.
pub fn softmax_columns<S: Scalar>(m: &Matrix<S>) -> PredictionMatrix<S> {
    let t = m.transpose();
    let mut out = Matrix::zeros(t.rows(), t.cols());
    for r in 0..t.rows() {
        softmax_into(t.row(r), out.row_mut(r));
    }
    PredictionMatrix(out.transpose())
}

pub fn cosine_similarity<S: Scalar>(a: &[S], b: &[S]) -> Result<S> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if !(na > S::zero()) || !(nb > S::zero()) {
        return Err(Error::DegenerateFeature);
    }
    let c = dot(a, b) / (na * nb);
    Ok(c.max(-S::one()).min(S::one()))
}

/// Unit-norm copy of every row. Rows with zero norm are rejected.
pub fn l2_normalize_rows<S: Scalar>(m: &Matrix<S>) -> Result<Matrix<S>> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = norm(row);
        if !(n > S::zero()) {
            return Err(Error::DegenerateFeature);
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<S: Scalar>(values: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
