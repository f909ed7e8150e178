//! Softmax-based losses.

use super::{Matrix, Tape};
use crate::error::{Error, Result};

pub(crate) fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - lse).collect()
}

pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Row-wise softmax.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let p = softmax_row(logits.row(r));
        out.row_mut(r).copy_from_slice(&p);
    }
    out
}

/// Mean cross-entropy of `softmax(logits)` against integer labels.
pub fn loss_ce_softmax(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if logits.rows() == 0 {
        return Err(Error::Input("cross-entropy needs at least one row".into()));
    }
    let n = logits.rows();
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let loss = tape.cross_entropy(l, labels, &vec![1.0 / n as f64; n])?;
    Ok(tape.scalar(loss))
}

/// Mean over rows of `KL(softmax(teacher) ‖ softmax(student))`.
pub fn loss_kl_softmax(student_logits: &Matrix, teacher_logits: &Matrix) -> Result<f64> {
    if student_logits.shape() != teacher_logits.shape() {
        return Err(Error::Input(format!(
            "KL shape mismatch: student {:?}, teacher {:?}",
            student_logits.shape(),
            teacher_logits.shape()
        )));
    }
    let n = student_logits.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let mut tape = Tape::new();
    let s = tape.leaf(student_logits.clone());
    let loss = tape.kl_softmax(s, teacher_logits, &vec![1.0 / n as f64; n])?;
    Ok(tape.scalar(loss))
}
