//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! Every operation appends a node to the tape; [`grad`] walks the tape
//! backwards and emits the adjoint computation *as new tape nodes*, so the
//! returned gradients are themselves differentiable. Nested calls give
//! higher-order derivatives: second derivatives of a network output with
//! respect to its inputs stay on the tape and can later be differentiated
//! with respect to the network parameters.
//!
//! All arithmetic is f64. Broadcasting is limited to scalar-with-array and
//! equal shapes; everything else needs an explicit reshape/broadcast op.

use std::cell::RefCell;
use std::rc::Rc;

use thiserror::Error;

use crate::spline::KnotVector;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in `{op}`: left operand {left:?}, right operand {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("gradient source must be a scalar, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("variable does not belong to this tape")]
    ForeignTape,
    #[error("input derivative order {0} unsupported (orders 1 and 2 only)")]
    UnsupportedOrder(usize),
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Operation identifier stored on each tape node; carries whatever constant
/// data the backward replay needs.
#[derive(Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    AddScalar,
    MulScalar(f64),
    PowScalar(f64),
    Matmul,
    Transpose,
    Sum,
    Mean,
    SumAxis(usize),
    BroadcastScalar,
    BroadcastRow,
    BroadcastCol,
    Tanh,
    Sigmoid,
    Silu,
    StackCols,
    Concat,
    Slice { axis: usize, start: usize },
    Embed { axis: usize, start: usize },
    Reshape,
    ConcatRows,
    /// (m, g*size) -> (m, g): sum over consecutive column groups.
    SumColGroups { size: usize },
    /// (m, g) -> (m, g*times): repeat each column in place.
    RepeatCols { times: usize },
    BsplineBasis { kv: Rc<KnotVector>, deriv: usize },
    /// Per-column knot vectors: (m, u) -> (m, u * n_basis).
    BsplineBasisMulti { kvs: Rc<Vec<KnotVector>>, deriv: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    parents: Vec<usize>,
    requires_grad: bool,
}

/// Recording tape. Cheap to clone (shared handle); single-threaded by
/// construction. Independent training runs use independent tapes.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<Vec<Node>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { inner: Rc::new(RefCell::new(Vec::new())) }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, parents: Vec<usize>, requires_grad: bool) -> Var {
        let mut nodes = self.inner.borrow_mut();
        let idx = nodes.len();
        nodes.push(Node { value, op, parents, requires_grad });
        Var { tape: self.clone(), idx }
    }

    /// Differentiable leaf.
    pub fn var(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, vec![], true)
    }

    /// Non-differentiable leaf (data, targets, frozen values).
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, vec![], false)
    }

    pub fn scalar(&self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }
}

/// Handle to one tape node.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    idx: usize,
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow()[self.idx].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.inner.borrow()[self.idx].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn scalar(&self) -> f64 {
        self.with_value(|t| t.scalar_value())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow()[self.idx].requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.tape.inner.borrow()[self.idx].op, Op::Leaf)
    }

    /// Copy of the value as a fresh constant leaf: gradients stop here.
    pub fn detach(&self) -> Var {
        self.tape.constant(self.value())
    }

    fn same_tape(&self, other: &Var) -> bool {
        Rc::ptr_eq(&self.tape.inner, &other.tape.inner)
    }

    fn binary(&self, other: &Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        assert!(self.same_tape(other), "operands from different tapes");
        let value = {
            let nodes = self.tape.inner.borrow();
            nodes[self.idx].value.zip(&nodes[other.idx].value, name, f)?
        };
        Ok(self.tape.push(value, op, vec![self.idx, other.idx], false))
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.with_value(|t| t.map(f));
        self.tape.push(value, op, vec![self.idx], false)
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Add, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Sub, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Mul, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Div, "div", |a, b| a / b)
    }

    pub fn neg(&self) -> Var {
        self.unary(Op::Neg, |x| -x)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        self.unary(Op::AddScalar, |x| x + c)
    }

    pub fn mul_scalar(&self, c: f64) -> Var {
        self.unary(Op::MulScalar(c), |x| x * c)
    }

    /// Elementwise power with a constant exponent.
    pub fn powf(&self, p: f64) -> Var {
        self.unary(Op::PowScalar(p), |x| x.powf(p))
    }

    pub fn square(&self) -> Var {
        self.unary(Op::PowScalar(2.0), |x| x * x)
    }

    pub fn tanh(&self) -> Var {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(Op::Sigmoid, |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn silu(&self) -> Var {
        self.unary(Op::Silu, |x| x / (1.0 + (-x).exp()))
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        assert!(self.same_tape(other), "operands from different tapes");
        let value = {
            let nodes = self.tape.inner.borrow();
            nodes[self.idx].value.matmul(&nodes[other.idx].value)?
        };
        Ok(self.tape.push(value, Op::Matmul, vec![self.idx, other.idx], false))
    }

    pub fn transpose(&self) -> Var {
        let value = self.with_value(|t| t.transpose());
        self.tape.push(value, Op::Transpose, vec![self.idx], false)
    }

    pub fn sum(&self) -> Var {
        let value = self.with_value(|t| Tensor::scalar(t.sum()));
        self.tape.push(value, Op::Sum, vec![self.idx], false)
    }

    pub fn mean(&self) -> Var {
        let value = self.with_value(|t| Tensor::scalar(t.mean()));
        self.tape.push(value, Op::Mean, vec![self.idx], false)
    }

    pub fn sum_axis(&self, axis: usize) -> Var {
        let value = self.with_value(|t| t.sum_axis(axis));
        self.tape.push(value, Op::SumAxis(axis), vec![self.idx], false)
    }

    /// Scalar -> arbitrary shape.
    pub fn broadcast_as(&self, shape: &[usize]) -> Var {
        let value = self.with_value(|t| Tensor::filled(shape, t.scalar_value()));
        self.tape.push(value, Op::BroadcastScalar, vec![self.idx], false)
    }

    /// (n,) -> (rows, n) by repeating the row.
    pub fn broadcast_row(&self, rows: usize) -> Var {
        let value = self.with_value(|t| {
            assert_eq!(t.rank(), 1, "broadcast_row needs rank 1");
            let n = t.len();
            let mut data = Vec::with_capacity(rows * n);
            for _ in 0..rows {
                data.extend_from_slice(t.data());
            }
            Tensor::matrix(rows, n, data)
        });
        self.tape.push(value, Op::BroadcastRow, vec![self.idx], false)
    }

    /// (m,) -> (m, cols) by repeating the column.
    pub fn broadcast_col(&self, cols: usize) -> Var {
        let value = self.with_value(|t| {
            assert_eq!(t.rank(), 1, "broadcast_col needs rank 1");
            let m = t.len();
            let mut data = Vec::with_capacity(m * cols);
            for &x in t.data() {
                data.extend(std::iter::repeat(x).take(cols));
            }
            Tensor::matrix(m, cols, data)
        });
        self.tape.push(value, Op::BroadcastCol, vec![self.idx], false)
    }

    /// Contiguous slice along an axis (copy).
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Var {
        let value = self.with_value(|t| slice_tensor(t, axis, start, len));
        self.tape.push(value, Op::Slice { axis, start }, vec![self.idx], false)
    }

    /// Column `j` of a rank-2 tensor as a rank-1 vector.
    pub fn col(&self, j: usize) -> Var {
        let rows = self.with_value(|t| t.rows());
        self.slice_axis(1, j, 1).reshape(&[rows])
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let value = self.with_value(|t| {
            assert_eq!(t.len(), shape.iter().product::<usize>(), "reshape size mismatch");
            Tensor::from_shape(shape.to_vec(), t.data().to_vec())
        });
        self.tape.push(value, Op::Reshape, vec![self.idx], false)
    }

    /// Place this tensor into a zero tensor of `shape` at `start` along `axis`.
    fn embed(&self, shape: &[usize], axis: usize, start: usize) -> Var {
        let value = self.with_value(|t| embed_tensor(t, shape, axis, start));
        self.tape.push(value, Op::Embed { axis, start }, vec![self.idx], false)
    }

    /// All active B-spline basis functions evaluated at each entry of a
    /// rank-1 input: output is (len, n_basis). Differentiable in the input
    /// to any order (derivatives above the spline degree vanish).
    pub fn bspline_basis(&self, kv: &Rc<KnotVector>) -> Var {
        self.bspline_basis_deriv(kv, 0)
    }

    fn bspline_basis_deriv(&self, kv: &Rc<KnotVector>, deriv: usize) -> Var {
        let value = self.with_value(|t| {
            assert_eq!(t.rank(), 1, "bspline_basis needs rank 1 input");
            let nb = kv.n_basis();
            let mut data = vec![0.0; t.len() * nb];
            for (r, &x) in t.data().iter().enumerate() {
                kv.eval_all(x, deriv, &mut data[r * nb..(r + 1) * nb]);
            }
            Tensor::matrix(t.len(), nb, data)
        });
        self.tape.push(
            value,
            Op::BsplineBasis { kv: Rc::clone(kv), deriv },
            vec![self.idx],
            false,
        )
    }

    /// Basis functions of every column of a rank-2 input, each column with
    /// its own knot vector: (m, u) -> (m, u * n_basis), column j expanding
    /// into the block j*n_basis..(j+1)*n_basis.
    pub fn bspline_basis_multi(&self, kvs: &Rc<Vec<KnotVector>>) -> Var {
        self.bspline_basis_multi_deriv(kvs, 0)
    }

    fn bspline_basis_multi_deriv(&self, kvs: &Rc<Vec<KnotVector>>, deriv: usize) -> Var {
        let value = self.with_value(|t| {
            assert_eq!(t.rank(), 2, "bspline_basis_multi needs rank 2 input");
            let (m, u) = (t.rows(), t.cols());
            assert_eq!(u, kvs.len(), "one knot vector per input column");
            let nb = kvs[0].n_basis();
            let mut data = vec![0.0; m * u * nb];
            for r in 0..m {
                let row = &mut data[r * u * nb..(r + 1) * u * nb];
                for (j, kv) in kvs.iter().enumerate() {
                    kv.eval_all(t.at2(r, j), deriv, &mut row[j * nb..(j + 1) * nb]);
                }
            }
            Tensor::matrix(m, u * nb, data)
        });
        self.tape.push(
            value,
            Op::BsplineBasisMulti { kvs: Rc::clone(kvs), deriv },
            vec![self.idx],
            false,
        )
    }

    /// (m, g*size) -> (m, g): sum over consecutive groups of `size` columns.
    pub fn sum_col_groups(&self, size: usize) -> Var {
        let value = self.with_value(|t| {
            assert_eq!(t.rank(), 2);
            let (m, n) = (t.rows(), t.cols());
            assert_eq!(n % size, 0);
            let g = n / size;
            let mut data = vec![0.0; m * g];
            for r in 0..m {
                for j in 0..g {
                    let mut s = 0.0;
                    for k in 0..size {
                        s += t.at2(r, j * size + k);
                    }
                    data[r * g + j] = s;
                }
            }
            Tensor::matrix(m, g, data)
        });
        self.tape.push(value, Op::SumColGroups { size }, vec![self.idx], false)
    }

    /// (m, g) -> (m, g*times): each column repeated `times` in place.
    pub fn repeat_cols(&self, times: usize) -> Var {
        let value = self.with_value(|t| {
            assert_eq!(t.rank(), 2);
            let (m, g) = (t.rows(), t.cols());
            let mut data = vec![0.0; m * g * times];
            for r in 0..m {
                for j in 0..g {
                    let v = t.at2(r, j);
                    for k in 0..times {
                        data[(r * g + j) * times + k] = v;
                    }
                }
            }
            Tensor::matrix(m, g * times, data)
        });
        self.tape.push(value, Op::RepeatCols { times }, vec![self.idx], false)
    }
}

/// Stack rank-2 blocks with equal column counts vertically.
pub fn concat_rows(vars: &[Var]) -> Result<Var> {
    assert!(!vars.is_empty());
    let tape = vars[0].tape.clone();
    let cols = vars[0].with_value(|t| t.cols());
    let mut rows = 0;
    let mut data = Vec::new();
    for v in vars {
        v.with_value(|t| {
            if t.rank() != 2 || t.cols() != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![rows, cols],
                    right: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
            Ok(())
        })?;
    }
    let parents = vars.iter().map(|v| v.idx).collect();
    Ok(tape.push(Tensor::matrix(rows, cols, data), Op::ConcatRows, parents, false))
}

fn slice_tensor(t: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    match (t.rank(), axis) {
        (1, 0) => Tensor::vector(t.data()[start..start + len].to_vec()),
        (2, 0) => {
            let n = t.cols();
            Tensor::matrix(len, n, t.data()[start * n..(start + len) * n].to_vec())
        }
        (2, 1) => {
            let (m, n) = (t.rows(), t.cols());
            let mut data = Vec::with_capacity(m * len);
            for i in 0..m {
                data.extend_from_slice(&t.data()[i * n + start..i * n + start + len]);
            }
            Tensor::matrix(m, len, data)
        }
        _ => panic!("slice axis {axis} invalid for rank {}", t.rank()),
    }
}

fn embed_tensor(t: &Tensor, shape: &[usize], axis: usize, start: usize) -> Tensor {
    let mut out = Tensor::zeros(shape);
    match (shape.len(), axis) {
        (1, 0) => out.data_mut()[start..start + t.len()].copy_from_slice(t.data()),
        (2, 0) => {
            let n = shape[1];
            out.data_mut()[start * n..start * n + t.len()].copy_from_slice(t.data());
        }
        (2, 1) => {
            let (m, n) = (shape[0], shape[1]);
            let w = t.cols();
            for i in 0..m {
                out.data_mut()[i * n + start..i * n + start + w]
                    .copy_from_slice(&t.data()[i * w..(i + 1) * w]);
            }
        }
        _ => panic!("embed axis {axis} invalid for rank {}", shape.len()),
    }
    out
}

/// Stack rank-1 vectors of equal length as the columns of a matrix.
pub fn stack_cols(vars: &[Var]) -> Result<Var> {
    assert!(!vars.is_empty());
    let tape = vars[0].tape.clone();
    let m = vars[0].with_value(|t| t.len());
    let k = vars.len();
    let mut data = vec![0.0; m * k];
    for (j, v) in vars.iter().enumerate() {
        v.with_value(|t| {
            if t.rank() != 1 || t.len() != m {
                return Err(AutodiffError::ShapeMismatch {
                    op: "stack_cols",
                    left: vec![m],
                    right: t.shape().to_vec(),
                });
            }
            for (i, &x) in t.data().iter().enumerate() {
                data[i * k + j] = x;
            }
            Ok(())
        })?;
    }
    let parents = vars.iter().map(|v| v.idx).collect();
    Ok(tape.push(Tensor::matrix(m, k, data), Op::StackCols, parents, false))
}

/// Concatenate rank-1 vectors.
pub fn concat(vars: &[Var]) -> Result<Var> {
    assert!(!vars.is_empty());
    let tape = vars[0].tape.clone();
    let mut data = Vec::new();
    for v in vars {
        v.with_value(|t| {
            if t.rank() != 1 {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    left: vec![data.len()],
                    right: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
            Ok(())
        })?;
    }
    let parents = vars.iter().map(|v| v.idx).collect();
    Ok(tape.push(Tensor::vector(data), Op::Concat, parents, false))
}

/// mean((a - b)^2)
pub fn mse(a: &Var, b: &Var) -> Result<Var> {
    Ok(a.sub(b)?.square().mean())
}

/// mean(a^2), the mse against zero.
pub fn mse_zero(a: &Var) -> Var {
    a.square().mean()
}

/// Reduce an adjoint to the shape of the parent it feeds (handles the
/// scalar-with-array broadcast case).
fn reduce_to(g: &Var, target: &[usize]) -> Var {
    let gs = g.shape();
    if gs == target {
        g.clone()
    } else {
        assert!(target.is_empty(), "irreducible adjoint {gs:?} -> {target:?}");
        g.sum()
    }
}

/// Gradient of a scalar `output` with respect to each entry of `wrt`.
///
/// The returned values live on the same tape and can be differentiated
/// again. Variables the output does not depend on get a zero gradient.
pub fn grad(output: &Var, wrt: &[Var]) -> Result<Vec<Var>> {
    output.with_value(|t| {
        if !t.is_scalar() {
            return Err(AutodiffError::NonScalarOutput { shape: t.shape().to_vec() });
        }
        Ok(())
    })?;
    let tape = output.tape.clone();
    for w in wrt {
        if !w.same_tape(output) {
            return Err(AutodiffError::ForeignTape);
        }
    }

    let out_idx = output.idx;
    let mut adjoints: Vec<Option<Var>> = vec![None; out_idx + 1];
    adjoints[out_idx] = Some(tape.scalar(1.0));

    for idx in (0..=out_idx).rev() {
        let Some(g) = adjoints[idx].clone() else { continue };
        let (op, parents) = {
            let nodes = tape.inner.borrow();
            (nodes[idx].op.clone(), nodes[idx].parents.clone())
        };
        if matches!(op, Op::Leaf) {
            continue;
        }
        let this = Var { tape: tape.clone(), idx };
        let contribs = backward_rule(&tape, &this, &op, &parents, &g)?;
        for (p, contrib) in contribs {
            adjoints[p] = Some(match adjoints[p].take() {
                None => contrib,
                Some(prev) => prev.add(&contrib)?,
            });
        }
    }

    Ok(wrt
        .iter()
        .map(|w| match adjoints.get(w.idx).and_then(|a| a.clone()) {
            Some(v) => v,
            None => tape.constant(Tensor::zeros(&w.shape())),
        })
        .collect())
}

fn parent_var(tape: &Tape, idx: usize) -> Var {
    Var { tape: tape.clone(), idx }
}

/// Adjoint contributions of one node, built from differentiable ops.
fn backward_rule(tape: &Tape, node: &Var, op: &Op, parents: &[usize], g: &Var) -> Result<Vec<(usize, Var)>> {
    let p = |i: usize| parent_var(tape, parents[i]);
    let shape_of = |i: usize| p(i).shape();
    Ok(match op {
        Op::Leaf => vec![],
        Op::Add => vec![
            (parents[0], reduce_to(g, &shape_of(0))),
            (parents[1], reduce_to(g, &shape_of(1))),
        ],
        Op::Sub => vec![
            (parents[0], reduce_to(g, &shape_of(0))),
            (parents[1], reduce_to(&g.neg(), &shape_of(1))),
        ],
        Op::Mul => {
            let (a, b) = (p(0), p(1));
            vec![
                (parents[0], reduce_to(&g.mul(&b)?, &shape_of(0))),
                (parents[1], reduce_to(&g.mul(&a)?, &shape_of(1))),
            ]
        }
        Op::Div => {
            let b = p(1);
            let adj_a = g.div(&b)?;
            let adj_b = g.mul(node)?.div(&b)?.neg();
            vec![
                (parents[0], reduce_to(&adj_a, &shape_of(0))),
                (parents[1], reduce_to(&adj_b, &shape_of(1))),
            ]
        }
        Op::Neg => vec![(parents[0], g.neg())],
        Op::AddScalar => vec![(parents[0], g.clone())],
        Op::MulScalar(c) => vec![(parents[0], g.mul_scalar(*c))],
        Op::PowScalar(pw) => {
            let a = p(0);
            let d = a.powf(pw - 1.0).mul_scalar(*pw);
            vec![(parents[0], g.mul(&d)?)]
        }
        Op::Matmul => {
            let (a, b) = (p(0), p(1));
            vec![
                (parents[0], g.matmul(&b.transpose())?),
                (parents[1], a.transpose().matmul(g)?),
            ]
        }
        Op::Transpose => vec![(parents[0], g.transpose())],
        Op::Sum => vec![(parents[0], g.broadcast_as(&shape_of(0)))],
        Op::Mean => {
            let shape = shape_of(0);
            let n: usize = shape.iter().product::<usize>().max(1);
            vec![(parents[0], g.mul_scalar(1.0 / n as f64).broadcast_as(&shape))]
        }
        Op::SumAxis(axis) => {
            let shape = shape_of(0);
            let adj = match axis {
                0 => g.broadcast_row(shape[0]),
                1 => g.broadcast_col(shape[1]),
                _ => unreachable!(),
            };
            vec![(parents[0], adj)]
        }
        Op::BroadcastScalar => vec![(parents[0], g.sum())],
        Op::BroadcastRow => vec![(parents[0], g.sum_axis(0))],
        Op::BroadcastCol => vec![(parents[0], g.sum_axis(1))],
        Op::Tanh => {
            let d = node.square().neg().add_scalar(1.0);
            vec![(parents[0], g.mul(&d)?)]
        }
        Op::Sigmoid => {
            let d = node.mul(&node.neg().add_scalar(1.0))?;
            vec![(parents[0], g.mul(&d)?)]
        }
        Op::Silu => {
            let x = p(0);
            let s = x.sigmoid();
            let d = s.mul(&x.mul(&s.neg().add_scalar(1.0))?.add_scalar(1.0))?;
            vec![(parents[0], g.mul(&d)?)]
        }
        Op::StackCols => (0..parents.len()).map(|j| (parents[j], g.col(j))).collect(),
        Op::Concat => {
            let mut out = Vec::with_capacity(parents.len());
            let mut offset = 0;
            for (j, &pi) in parents.iter().enumerate() {
                let len = p(j).with_value(|t| t.len());
                out.push((pi, g.slice_axis(0, offset, len)));
                offset += len;
            }
            out
        }
        Op::Slice { axis, start } => {
            let shape = shape_of(0);
            vec![(parents[0], g.embed(&shape, *axis, *start))]
        }
        Op::Embed { axis, start, .. } => {
            let pshape = shape_of(0);
            let len = if pshape.is_empty() { 1 } else { pshape[*axis] };
            vec![(parents[0], g.slice_axis(*axis, *start, len))]
        }
        Op::Reshape => vec![(parents[0], g.reshape(&shape_of(0)))],
        Op::ConcatRows => {
            let mut out = Vec::with_capacity(parents.len());
            let mut offset = 0;
            for (j, &pi) in parents.iter().enumerate() {
                let rows = p(j).with_value(|t| t.rows());
                out.push((pi, g.slice_axis(0, offset, rows)));
                offset += rows;
            }
            out
        }
        Op::SumColGroups { size } => vec![(parents[0], g.repeat_cols(*size))],
        Op::RepeatCols { times } => vec![(parents[0], g.sum_col_groups(*times))],
        Op::BsplineBasis { kv, deriv } => {
            let z = p(0);
            let next = z.bspline_basis_deriv(kv, deriv + 1);
            vec![(parents[0], g.mul(&next)?.sum_axis(1))]
        }
        Op::BsplineBasisMulti { kvs, deriv } => {
            let z = p(0);
            let next = z.bspline_basis_multi_deriv(kvs, deriv + 1);
            let nb = kvs[0].n_basis();
            vec![(parents[0], g.mul(&next)?.sum_col_groups(nb))]
        }
    })
}

/// Derivative of a network output with respect to one input coordinate.
///
/// `output` and `coord` must be same-length rank-1 batches (or scalars)
/// where sample i of the output depends only on sample i of the coordinate;
/// the summed-output trick then yields the per-sample derivative. The result
/// stays differentiable, e.g. with respect to network parameters.
pub fn input_derivative(output: &Var, coord: &Var, order: usize) -> Result<Var> {
    if order == 0 || order > 2 {
        return Err(AutodiffError::UnsupportedOrder(order));
    }
    let first = grad(&output.sum(), std::slice::from_ref(coord))?.remove(0);
    if order == 1 {
        Ok(first)
    } else {
        Ok(grad(&first.sum(), std::slice::from_ref(coord))?.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::rel_err;
    use proptest::prelude::*;

    #[test]
    fn tanh_value_and_derivative_at_zero() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(0.0));
        let y = x.tanh();
        assert_eq!(y.scalar(), 0.0);
        let g = grad(&y, &[x]).unwrap();
        assert_eq!(g[0].scalar(), 1.0);
    }

    #[test]
    fn silu_value_and_derivative_at_zero() {
        // silu(x) = x * sigmoid(x); silu'(0) = sigmoid(0) = 0.5.
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(0.0));
        let y = x.silu();
        assert_eq!(y.scalar(), 0.0);
        let g = grad(&y, &[x.clone()]).unwrap();
        assert!((g[0].scalar() - 0.5).abs() < 1e-15);
        // Cross-check against central differences.
        let h = 1e-5;
        let f = |v: f64| v / (1.0 + (-v).exp());
        let fd = (f(h) - f(-h)) / (2.0 * h);
        assert!((g[0].scalar() - fd).abs() < 1e-10);
    }

    #[test]
    fn mse_of_ones_vs_zeros() {
        let tape = Tape::new();
        let a = tape.var(Tensor::vector(vec![1.0, 1.0]));
        let b = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        assert_eq!(mse(&a, &b).unwrap().scalar(), 1.0);
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(3.0));
        let y = x.square();
        let g = grad(&y, &[x]).unwrap();
        assert_eq!(g[0].scalar(), 6.0);
    }

    #[test]
    fn second_gradient_of_cube() {
        // f = x^3: f'' (2) = 6x = 12, via grad-of-grad.
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(2.0));
        let y = x.powf(3.0);
        let g1 = grad(&y, &[x.clone()]).unwrap().remove(0);
        let g2 = grad(&g1, &[x]).unwrap().remove(0);
        assert_eq!(g2.scalar(), 12.0);
    }

    #[test]
    fn mixed_partial_matches_nested_finite_differences() {
        // d2/dxdy tanh(x*y) at (0.3, 0.7), oracle = two-level central FD.
        let f = |x: f64, y: f64| (x * y).tanh();
        let h = 1e-5;
        let dfdx = |x: f64, y: f64| (f(x + h, y) - f(x - h, y)) / (2.0 * h);
        let oracle = (dfdx(0.3, 0.7 + h) - dfdx(0.3, 0.7 - h)) / (2.0 * h);

        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(0.3));
        let y = tape.var(Tensor::scalar(0.7));
        let z = x.mul(&y).unwrap().tanh();
        let gx = grad(&z, &[x]).unwrap().remove(0);
        let gxy = grad(&gx, &[y]).unwrap().remove(0);
        assert!(rel_err(gxy.scalar(), oracle) < 1e-5, "{} vs {oracle}", gxy.scalar());
    }

    #[test]
    fn input_derivative_of_identity() {
        let tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![0.2, -0.4, 0.9]));
        let out = x.mul_scalar(1.0);
        let d1 = input_derivative(&out, &x, 1).unwrap();
        assert_eq!(d1.value().data(), &[1.0, 1.0, 1.0]);
        let d2 = input_derivative(&out, &x, 2).unwrap();
        assert_eq!(d2.value().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn input_derivative_tanh_second_order_zero_at_origin() {
        let tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![0.0]));
        let out = x.tanh();
        let d2 = input_derivative(&out, &x, 2).unwrap();
        assert_eq!(d2.value().data()[0], 0.0);
    }

    #[test]
    fn input_derivative_order_guard() {
        let tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![0.1]));
        assert!(matches!(
            input_derivative(&x.tanh(), &x, 3),
            Err(AutodiffError::UnsupportedOrder(3))
        ));
    }

    /// Tiny two-layer tanh network y = w2 . tanh(w1 x + b1), evaluated
    /// pointwise; returns d2y/dx2 from the tape and from FD-of-FD.
    #[test]
    fn random_net_second_input_derivative_vs_fd() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let w1: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b1: Vec<f64> = (0..6).map(|_| rng.random_range(-0.5..0.5)).collect();
        let w2: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();

        let eval = |x: f64| -> f64 {
            (0..6).map(|i| w2[i] * (w1[i] * x + b1[i]).tanh()).sum()
        };
        let x0 = 0.37;
        let h = 1e-3;
        let d1 = |x: f64| (eval(x + h) - eval(x - h)) / (2.0 * h);
        let fd2 = (d1(x0 + h) - d1(x0 - h)) / (2.0 * h);

        let tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![x0]));
        let xm = x.reshape(&[1, 1]);
        let w1v = tape.var(Tensor::matrix(1, 6, w1));
        let b1v = tape.var(Tensor::vector(b1));
        let w2v = tape.var(Tensor::matrix(6, 1, w2));
        let h1 = xm.matmul(&w1v).unwrap().add(&b1v.broadcast_row(1)).unwrap().tanh();
        let y = h1.matmul(&w2v).unwrap().reshape(&[1]);
        let d2 = input_derivative(&y, &x, 2).unwrap();
        assert!(
            rel_err(d2.value().data()[0], fd2) < 1e-4,
            "{} vs {fd2}",
            d2.value().data()[0]
        );
    }

    #[test]
    fn grad_of_unreachable_is_zero() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(1.0));
        let z = tape.var(Tensor::vector(vec![1.0, 2.0]));
        let y = x.square();
        let g = grad(&y, &[z]).unwrap();
        assert_eq!(g[0].value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn grad_rejects_nonscalar_and_foreign() {
        let tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(grad(&x, &[x.clone()]), Err(AutodiffError::NonScalarOutput { .. })));
        let other = Tape::new();
        let w = other.var(Tensor::scalar(1.0));
        assert!(matches!(grad(&x.sum(), &[w]), Err(AutodiffError::ForeignTape)));
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(2.0));
        let y = x.detach().square();
        let g = grad(&y, &[x]).unwrap();
        assert_eq!(g[0].scalar(), 0.0);
    }

    #[test]
    fn matmul_gradients_match_fd() {
        let tape = Tape::new();
        let a = tape.var(Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.1, 0.7, -0.3]));
        let b = tape.var(Tensor::matrix(3, 2, vec![1.0, 0.2, -0.4, 0.9, 0.3, -0.6]));
        let y = a.matmul(&b).unwrap().square().sum();
        let gs = grad(&y, &[a.clone(), b.clone()]).unwrap();

        let f = |av: &Tensor, bv: &Tensor| -> f64 {
            av.matmul(bv).unwrap().data().iter().map(|x| x * x).sum()
        };
        let h = 1e-6;
        for (var, gv) in [(&a, &gs[0]), (&b, &gs[1])] {
            let base = var.value();
            for k in 0..base.len() {
                let mut up = base.clone();
                up.data_mut()[k] += h;
                let mut dn = base.clone();
                dn.data_mut()[k] -= h;
                let (av, bv) = (a.value(), b.value());
                let (fu, fd) = if std::ptr::eq(var, &a) {
                    (f(&up, &bv), f(&dn, &bv))
                } else {
                    (f(&av, &up), f(&av, &dn))
                };
                let fd_grad = (fu - fd) / (2.0 * h);
                assert!(rel_err(gv.value().data()[k], fd_grad) < 1e-6);
            }
        }
    }

    #[test]
    fn bspline_basis_op_gradients() {
        // d/dz of column sums of the basis matrix vs finite differences.
        let kv = Rc::new(KnotVector::uniform(-1.0, 1.0, 3, 8));
        let tape = Tape::new();
        let z0 = vec![-0.7, -0.1, 0.33, 0.8];
        let z = tape.var(Tensor::vector(z0.clone()));
        let y = z.bspline_basis(&kv).sum();
        let g = grad(&y, &[z]).unwrap().remove(0);

        let nb = kv.n_basis();
        let mut buf = vec![0.0; nb];
        let h = 1e-6;
        for (i, &zi) in z0.iter().enumerate() {
            kv.eval_all(zi + h, 0, &mut buf);
            let up: f64 = buf.iter().sum();
            kv.eval_all(zi - h, 0, &mut buf);
            let dn: f64 = buf.iter().sum();
            let fd = (up - dn) / (2.0 * h);
            assert!((g.value().data()[i] - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn replaying_same_graph_is_bit_identical() {
        let build = || {
            let tape = Tape::new();
            let x = tape.var(Tensor::vector(vec![0.3, -0.9, 1.7]));
            let w = tape.var(Tensor::vector(vec![0.11, 0.22, 0.33]));
            let y = x.tanh().mul(&w).unwrap().square().mean();
            let g = grad(&y, &[x, w]).unwrap();
            (y.scalar(), g[0].value(), g[1].value())
        };
        let (y1, gx1, gw1) = build();
        let (y2, gx2, gw2) = build();
        assert_eq!(y1.to_bits(), y2.to_bits());
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }

    proptest! {
        /// Linearity: grad(f + g) = grad(f) + grad(g) on random small graphs.
        #[test]
        fn gradient_linearity(seed in 0u64..500) {
            use rand::prelude::*;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let tape = Tape::new();
            let n = 4;
            let x = tape.var(Tensor::vector((0..n).map(|_| rng.random_range(-1.0..1.0)).collect()));
            let a = x.tanh().square().mean();
            let b = x.silu().mul_scalar(0.5).sum();
            let ga = grad(&a, std::slice::from_ref(&x)).unwrap().remove(0);
            let gb = grad(&b, std::slice::from_ref(&x)).unwrap().remove(0);
            let gsum = grad(&a.add(&b).unwrap(), std::slice::from_ref(&x)).unwrap().remove(0);
            for i in 0..n {
                let lhs = gsum.value().data()[i];
                let rhs = ga.value().data()[i] + gb.value().data()[i];
                prop_assert!((lhs - rhs).abs() < 1e-12);
            }
        }
    }
}
