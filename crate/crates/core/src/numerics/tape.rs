//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node holding its value and the ids of its
//! inputs. Node ids only ever refer to earlier nodes, so the graph is acyclic
//! by construction and a single reverse sweep over the tape visits nodes in
//! topological order.
//!
//! ```
//! use fedcache::numerics::{Matrix, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Matrix::from_rows(&[[1.0, 2.0]]));
//! let loss = tape.half_sum_sq(x);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().as_slice(), &[1.0, 2.0]);
//! ```

use super::linalg::Cholesky;
use super::loss::{log_softmax_row, softmax_row};
use super::Matrix;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// Broadcast a `1 × c` row over every row of `a`.
    AddRow(Var, Var),
    Relu(Var),
    Scale(Var, f64),
    SolveSpd {
        k: Var,
        y: Var,
        factor: Cholesky,
    },
    HalfSumSq(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
    },
    KlSoftmax {
        student: Var,
        teacher_probs: Matrix,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Records a computation for one backward pass. Confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Accumulated gradients, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` does not influence it.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient w.r.t. `v`, or zeros shaped like `like` when unreachable.
    pub fn get_or_zeros(&self, v: Var, like: &Matrix) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.as_slice()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(value, Op::MatMulNT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (am, rm) = (self.value(a), self.value(row));
        if rm.rows() != 1 || rm.cols() != am.cols() {
            return Err(Error::shape(
                "add_row",
                format!("1x{}", am.cols()),
                format!("{}x{}", rm.rows(), rm.cols()),
            ));
        }
        let mut value = am.clone();
        let bias = rm.as_slice().to_vec();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(&bias) {
                *x += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    /// `(K + λI)⁻¹·Y`, differentiable in both `K` and `Y`. `lambda` is a
    /// constant.
    pub fn solve_spd(&mut self, k: Var, lambda: f64, y: Var) -> Result<Var> {
        let factor = Cholesky::factor(self.value(k), lambda)?;
        let value = factor.solve(self.value(y))?;
        Ok(self.push(value, Op::SolveSpd { k, y, factor }))
    }

    /// `½‖A‖²_F` as a `1 × 1` node.
    pub fn half_sum_sq(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, 0.5 * self.value(a).frobenius_sq());
        self.push(value, Op::HalfSumSq(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// `Σᵢ wᵢ · CE(softmax(logitsᵢ), labelsᵢ)` with log-sum-exp stabilization.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        let lm = self.value(logits);
        if labels.len() != lm.rows() || weights.len() != lm.rows() {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels and weights", lm.rows()),
                format!("{} labels, {} weights", labels.len(), weights.len()),
            ));
        }
        let mut total = 0.0;
        for (r, (&y, &w)) in labels.iter().zip(weights).enumerate() {
            if y >= lm.cols() {
                return Err(Error::Input(format!(
                    "label {y} out of range for {} classes",
                    lm.cols()
                )));
            }
            if w != 0.0 {
                total -= w * log_softmax_row(lm.row(r))[y];
            }
        }
        Ok(self.push(
            Matrix::filled(1, 1, total),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// `Σᵢ wᵢ · KL(softmax(teacherᵢ) ‖ softmax(studentᵢ))`; the teacher is a
    /// constant.
    pub fn kl_softmax(&mut self, student: Var, teacher_logits: &Matrix, weights: &[f64]) -> Result<Var> {
        let sm = self.value(student);
        if sm.shape() != teacher_logits.shape() || weights.len() != sm.rows() {
            return Err(Error::shape(
                "kl_softmax",
                format!("{:?} teacher, {} weights", sm.shape(), sm.rows()),
                format!("{:?} teacher, {} weights", teacher_logits.shape(), weights.len()),
            ));
        }
        let mut teacher_probs = Matrix::zeros(sm.rows(), sm.cols());
        let mut total = 0.0;
        for r in 0..sm.rows() {
            let log_p = log_softmax_row(teacher_logits.row(r));
            let log_q = log_softmax_row(sm.row(r));
            let mut kl = 0.0;
            for j in 0..sm.cols() {
                let p = log_p[j].exp();
                teacher_probs.set(r, j, p);
                if p > 0.0 {
                    kl += p * (log_p[j] - log_q[j]);
                }
            }
            total += weights[r] * kl.max(0.0);
        }
        Ok(self.push(
            Matrix::filled(1, 1, total),
            Op::KlSoftmax {
                student,
                teacher_probs,
                weights: weights.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                "1x1 loss",
                format!("{:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(self.value(*b))?;
                    let gb = self.value(*a).matmul_tn(&g)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::MatMulNT(a, b) => {
                    let ga = g.matmul(self.value(*b))?;
                    let gb = g.matmul_tn(self.value(*a))?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.clone())?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.scale(-1.0))?;
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *row, g.col_sums())?;
                    accumulate(&mut grads, *a, g.clone())?;
                }
                Op::Relu(a) => {
                    let input = self.value(*a);
                    let mut ga = g.clone();
                    for (x, &v) in ga.as_mut_slice().iter_mut().zip(input.as_slice()) {
                        if v <= 0.0 {
                            *x = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s))?,
                Op::SolveSpd { k, y, factor } => {
                    // Z = A⁻¹Y with A symmetric: dY = A⁻ᵀ·G = A⁻¹·G and
                    // dA = -dY·Zᵀ, symmetrized because only the symmetric
                    // part of K enters the factorization.
                    let gy = factor.solve(&g)?;
                    let outer = gy.matmul_nt(&node.value)?;
                    let gk = outer.add(&outer.transpose())?.scale(-0.5);
                    accumulate(&mut grads, *y, gy)?;
                    accumulate(&mut grads, *k, gk)?;
                }
                Op::HalfSumSq(a) => {
                    let s = g.as_slice()[0];
                    accumulate(&mut grads, *a, self.value(*a).scale(s))?;
                }
                Op::Sum(a) => {
                    let s = g.as_slice()[0];
                    let v = self.value(*a);
                    accumulate(&mut grads, *a, Matrix::filled(v.rows(), v.cols(), s))?;
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    weights,
                } => {
                    let s = g.as_slice()[0];
                    let lm = self.value(*logits);
                    let mut gl = Matrix::zeros(lm.rows(), lm.cols());
                    for (r, (&y, &w)) in labels.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let p = softmax_row(lm.row(r));
                        let row = gl.row_mut(r);
                        for (j, (o, pj)) in row.iter_mut().zip(p).enumerate() {
                            let t = if j == y { 1.0 } else { 0.0 };
                            *o = s * w * (pj - t);
                        }
                    }
                    accumulate(&mut grads, *logits, gl)?;
                }
                Op::KlSoftmax {
                    student,
                    teacher_probs,
                    weights,
                } => {
                    let s = g.as_slice()[0];
                    let sm = self.value(*student);
                    let mut gs = Matrix::zeros(sm.rows(), sm.cols());
                    for (r, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let q = softmax_row(sm.row(r));
                        let row = gs.row_mut(r);
                        for ((o, qj), &pj) in row.iter_mut().zip(q).zip(teacher_probs.row(r)) {
                            *o = s * w * (qj - pj);
                        }
                    }
                    accumulate(&mut grads, *student, gs)?;
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
