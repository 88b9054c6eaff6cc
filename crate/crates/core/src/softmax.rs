use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Tolerance on row sums accepted by [`ProbBatch::new`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// A batch of categorical distributions, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbBatch(Matrix);

impl ProbBatch {
    /// Validates that every row is a distribution.
    pub fn new(m: Matrix) -> Result<Self> {
        for (i, row) in m.row_iter().enumerate() {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::InvalidArgument(format!(
                    "probability row {i} has entries outside [0, 1]"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::InvalidArgument(format!(
                    "probability row {i} sums to {s}"
                )));
            }
        }
        Ok(ProbBatch(m))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        ProbBatch::new(Matrix::from_rows(rows)?)
    }

    pub(crate) fn from_matrix_unchecked(m: Matrix) -> Self {
        ProbBatch(m)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn classes(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn get(&self, i: usize, c: usize) -> f64 {
        self.0.get(i, c)
    }

    pub fn select_rows(&self, indices: &[usize]) -> ProbBatch {
        ProbBatch(self.0.select_rows(indices))
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> ProbBatch {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    ProbBatch(out)
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Pulls a gradient with respect to softmax outputs back to the logits:
/// `dz_c = p_c (g_c - Σ_j p_j g_j)`.
pub fn softmax_backward(probs: &ProbBatch, d_probs: &Matrix) -> Result<Matrix> {
    probs.matrix().ensure_same_shape(d_probs, "softmax_backward")?;
    let mut out = Matrix::zeros(probs.rows(), probs.classes());
    for i in 0..probs.rows() {
        let p = probs.row(i);
        let g = d_probs.row(i);
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for (o, (&pc, &gc)) in out.row_mut(i).iter_mut().zip(p.iter().zip(g)) {
            *o = pc * (gc - dot);
        }
    }
    Ok(out)
}
