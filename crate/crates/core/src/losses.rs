//! Objective terms for source pretraining and adaptation.
//!
//! Every function returns its value together with the gradient with respect
//! to its inputs. Losses are batch means, and every logarithm of a
//! probability is clamped at [`LOG_EPS`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::softmax::{softmax_rows, ProbBatch};

pub const LOG_EPS: f64 = 1e-12;

#[inline]
pub(crate) fn clamped_ln(x: f64) -> f64 {
    x.max(LOG_EPS).ln()
}

#[inline]
fn clamped_ln_grad(x: f64) -> f64 {
    if x > LOG_EPS {
        1.0 / x
    } else {
        0.0
    }
}

#[inline]
fn active(x: f64) -> f64 {
    if x > LOG_EPS {
        1.0
    } else {
        0.0
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape("labels", rows, labels.len()));
    }
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::LabelOutOfRange {
            label,
            classes,
            row,
        });
    }
    Ok(())
}

fn check_nonempty(rows: usize, context: &str) -> Result<()> {
    if rows == 0 {
        return Err(Error::InvalidArgument(format!("{context} needs a non-empty batch")));
    }
    Ok(())
}

/// Label-smoothed targets `(1 − σ)·1[c = y] + σ/C`.
pub fn smooth_targets(labels: &[usize], classes: usize, sigma: f64) -> Result<Matrix> {
    if !(0.0..1.0).contains(&sigma) {
        return Err(Error::InvalidArgument(format!("sigma must lie in [0, 1), got {sigma}")));
    }
    check_labels(labels, labels.len(), classes)?;
    let mut t = Matrix::filled(labels.len(), classes, sigma / classes as f64);
    for (i, &y) in labels.iter().enumerate() {
        t.set(i, y, 1.0 - sigma + sigma / classes as f64);
    }
    Ok(t)
}

/// Cross-entropy against smoothed one-hot targets. Returns the mean loss and
/// its gradient with respect to the logits.
pub fn smoothed_cross_entropy(logits: &Matrix, labels: &[usize], sigma: f64) -> Result<(f64, Matrix)> {
    check_nonempty(logits.rows(), "smoothed_cross_entropy")?;
    check_labels(labels, logits.rows(), logits.cols())?;
    let targets = smooth_targets(labels, logits.cols(), sigma)?;
    let n = logits.rows() as f64;
    let probs = softmax_rows(logits);
    let mut loss = 0.0;
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss -= targets
            .row(i)
            .iter()
            .zip(row)
            .map(|(t, z)| t * (z - lse))
            .sum::<f64>();
    }
    let grad = probs.matrix().zip_map(&targets, |p, t| (p - t) / n)?;
    Ok((loss / n, grad))
}

/// Mutual information of a batch pair and its gradients.
#[derive(Debug, Clone)]
pub struct MutualInformation {
    pub value: f64,
    pub d_first: Matrix,
    pub d_second: Matrix,
}

/// Mutual information between the paired predictions of two batches.
///
/// The joint is `J = (1/n) Σ_i a_i ⊗ b_i` and the estimate is
/// `Σ J (ln J − ln J_row − ln J_col)`. Swapping the arguments transposes the
/// joint, which leaves the value unchanged.
pub fn mutual_information(first: &ProbBatch, second: &ProbBatch) -> Result<MutualInformation> {
    first
        .matrix()
        .ensure_same_shape(second.matrix(), "mutual_information")?;
    check_nonempty(first.rows(), "mutual_information")?;
    let n = first.rows() as f64;
    let joint = first.matrix().t_matmul(second.matrix())?.scale(1.0 / n);
    let c = joint.rows();
    let row_m: Vec<f64> = (0..c).map(|a| joint.row(a).iter().sum()).collect();
    let col_m = joint.column_sums();

    let mut value = 0.0;
    let mut g = Matrix::zeros(c, c);
    for a in 0..c {
        for b in 0..c {
            let j = joint.get(a, b);
            let (la, lb) = (clamped_ln(row_m[a]), clamped_ln(col_m[b]));
            value += j * (clamped_ln(j) - la - lb);
            g.set(
                a,
                b,
                clamped_ln(j) - la - lb + active(j) - active(row_m[a]) - active(col_m[b]),
            );
        }
    }
    // dJ/d first_{ia} = second_{ib} / n, and symmetrically for the second batch.
    let d_first = second.matrix().matmul_t(&g)?.scale(1.0 / n);
    let d_second = first.matrix().matmul(&g)?.scale(1.0 / n);
    Ok(MutualInformation {
        value,
        d_first,
        d_second,
    })
}

/// `Σ_c q̄_c ln q̄_c` over the batch marginal `q̄`; most negative (−ln C)
/// when the marginal is uniform.
pub fn balance_entropy(p: &ProbBatch) -> Result<(f64, Matrix)> {
    check_nonempty(p.rows(), "balance_entropy")?;
    let n = p.rows() as f64;
    let marginal = p.matrix().column_means();
    let value = marginal.iter().map(|&q| q * clamped_ln(q)).sum();
    let per_class: Vec<f64> = marginal
        .iter()
        .map(|&q| (clamped_ln(q) + active(q)) / n)
        .collect();
    let mut grad = Matrix::zeros(p.rows(), p.classes());
    for i in 0..p.rows() {
        grad.row_mut(i).copy_from_slice(&per_class);
    }
    Ok((value, grad))
}

/// `mean_i ln p_{i, y'_i}` for hard pseudo labels `y'`. The adaptation
/// objective subtracts this term, so maximizing it sharpens agreement.
pub fn refinement_ce(p: &ProbBatch, pseudo: &[usize]) -> Result<(f64, Matrix)> {
    check_nonempty(p.rows(), "refinement_ce")?;
    check_labels(pseudo, p.rows(), p.classes())?;
    let n = p.rows() as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(p.rows(), p.classes());
    for (i, &y) in pseudo.iter().enumerate() {
        let pi = p.get(i, y);
        value += clamped_ln(pi);
        grad.set(i, y, clamped_ln_grad(pi) / n);
    }
    Ok((value / n, grad))
}

/// `mean_i KL(teacher_i ‖ student_i)` and its gradients.
pub fn kl_teacher_student(teacher: &ProbBatch, student: &ProbBatch) -> Result<(f64, Matrix, Matrix)> {
    teacher
        .matrix()
        .ensure_same_shape(student.matrix(), "kl_teacher_student")?;
    check_nonempty(teacher.rows(), "kl_teacher_student")?;
    let n = teacher.rows() as f64;
    let mut value = 0.0;
    let mut d_teacher = Matrix::zeros(teacher.rows(), teacher.classes());
    let mut d_student = Matrix::zeros(teacher.rows(), teacher.classes());
    for i in 0..teacher.rows() {
        for c in 0..teacher.classes() {
            let (t, s) = (teacher.get(i, c), student.get(i, c));
            value += t * (clamped_ln(t) - clamped_ln(s));
            d_teacher.set(i, c, (clamped_ln(t) + t * clamped_ln_grad(t) - clamped_ln(s)) / n);
            d_student.set(i, c, -t * clamped_ln_grad(s) / n);
        }
    }
    Ok((value / n, d_teacher, d_student))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 0.4,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "loss weight {name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// How the teacher–student synchronization term is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynTerm {
    #[default]
    MutualInformation,
    /// Replace `−MI` by `KL(teacher ‖ student)`.
    Kl,
}

/// Assembled adaptation objective and its parts.
///
/// `total = α·(−syn_mi + syn_kl + γ·syn_balance) − β·refine`; exactly one of
/// `syn_mi`, `syn_kl` is active for a given [`SynTerm`], the other is zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub syn_mi: f64,
    pub syn_kl: f64,
    pub syn_balance: f64,
    #[serde(rename = "ref")]
    pub refine: f64,
}

impl LossValue {
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        w.alpha * (-self.syn_mi + self.syn_kl + w.gamma * self.syn_balance) - w.beta * self.refine
    }
}

#[derive(Debug, Clone)]
pub struct ProdeLoss {
    pub value: LossValue,
    /// Gradient with respect to the (denoised) teacher probabilities.
    pub d_teacher: Matrix,
    /// Gradient with respect to the target model's probabilities.
    pub d_target: Matrix,
}

/// The adaptation objective over teacher predictions `teacher`, target
/// predictions `target` and hard pseudo labels `pseudo`.
pub fn prode_loss(
    teacher: &ProbBatch,
    target: &ProbBatch,
    pseudo: &[usize],
    w: &LossWeights,
    syn: SynTerm,
) -> Result<ProdeLoss> {
    w.validate()?;
    teacher
        .matrix()
        .ensure_same_shape(target.matrix(), "prode_loss")?;
    let (rows, classes) = target.matrix().shape();
    let mut value = LossValue::default();
    let mut d_teacher = Matrix::zeros(rows, classes);
    let mut d_target = Matrix::zeros(rows, classes);

    match syn {
        SynTerm::MutualInformation => {
            let mi = mutual_information(teacher, target)?;
            value.syn_mi = mi.value;
            d_teacher.add_scaled_assign(&mi.d_first, -w.alpha)?;
            d_target.add_scaled_assign(&mi.d_second, -w.alpha)?;
        }
        SynTerm::Kl => {
            let (kl, dt, ds) = kl_teacher_student(teacher, target)?;
            value.syn_kl = kl;
            d_teacher.add_scaled_assign(&dt, w.alpha)?;
            d_target.add_scaled_assign(&ds, w.alpha)?;
        }
    }

    let (bal, d_bal) = balance_entropy(target)?;
    value.syn_balance = bal;
    d_target.add_scaled_assign(&d_bal, w.alpha * w.gamma)?;

    let (refine, d_ref) = refinement_ce(target, pseudo)?;
    value.refine = refine;
    d_target.add_scaled_assign(&d_ref, -w.beta)?;

    value.total = value.recompose(w);
    Ok(ProdeLoss {
        value,
        d_teacher,
        d_target,
    })
}
