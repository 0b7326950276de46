//! Reverse-mode differentiation over row-batched matrices.
//!
//! Every value on the tape is an `Array2<f64>` whose rows are batch samples.
//! Operations append a node that remembers its parents; [`Tape::backward`]
//! walks the nodes in reverse creation order and accumulates adjoints.
//!
//! ```
//! use ndarray::array;
//! use trfp_core::diffcore::Tape;
//!
//! let tape = Tape::new();
//! let w = tape.leaf(array![[3.0]]);
//! let y = (w * w).sum();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(w)[[0, 0]], 6.0);
//! ```
//!
//! A tape lives for one update step. Parameters are copied in as leaves, and
//! gradients are read back by handle once the backward pass has run.

use std::cell::{Ref, RefCell};
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use ndarray::{concatenate, s, Array2, Axis};

use crate::error::{Result, TrfpError};

use super::activation;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulCol(usize, usize),
    MulScalar(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Mish(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Softplus(usize),
    Square(usize),
    Clamp(usize, f64, f64),
    Min(usize, usize),
    Concat(Vec<usize>),
    Slice(usize, usize),
    SumCols(usize),
    Sum(usize),
    Mean(usize),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Operation record for a single forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("idx", &self.idx)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// Records an input. Leaves receive adjoints but have no parents.
    pub fn leaf(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Alias of [`Tape::leaf`] for values whose adjoint is never read.
    pub fn constant(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.push(Array2::from_elem((1, 1), value), Op::Leaf)
    }

    /// Same value as `x`, but the backward pass treats it as a leaf: no
    /// adjoint reaches anything `x` was computed from.
    pub fn stop_gradient<'t>(&'t self, x: Var<'t>) -> Var<'t> {
        let value = x.value().clone();
        self.push(value, Op::Leaf)
    }

    fn value_of(&self, idx: usize) -> Ref<'_, Array2<f64>> {
        Ref::map(self.nodes.borrow(), |n| &n[idx].value)
    }

    fn unary(&self, x: usize, op: Op, f: impl FnOnce(&Array2<f64>) -> Array2<f64>) -> Var<'_> {
        let value = f(&self.value_of(x));
        self.push(value, op)
    }

    fn binary(
        &self,
        a: usize,
        b: usize,
        op: Op,
        f: impl FnOnce(&Array2<f64>, &Array2<f64>) -> Array2<f64>,
    ) -> Var<'_> {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a].value, &nodes[b].value)
        };
        self.push(value, op)
    }

    /// Concatenates along columns. All parts must have the same row count.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.idx].value.view()).collect();
            concatenate(Axis(1), &views).expect("concat: row counts differ")
        };
        self.push(value, Op::Concat(parts.iter().map(|p| p.idx).collect()))
    }

    /// Reverse pass from a `1 x 1` root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.idx].value.dim();
        if root_shape != (1, 1) {
            return Err(TrfpError::Usage(format!(
                "backward requires a scalar root, got shape {:?}",
                root_shape
            )));
        }
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; nodes.len()];
        adj[root.idx] = Some(Array2::ones((1, 1)));

        for i in (0..=root.idx).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            let val = |j: usize| &nodes[j].value;
            match &node.op {
                Op::Leaf => {
                    adj[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&val(*b).t());
                    let gb = val(*a).t().dot(&g);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::AddRow(x, r) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut adj, *r, gr);
                    accumulate(&mut adj, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, -g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * val(*b);
                    let gb = &g * val(*a);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::MulCol(x, c) => {
                    let gx = &g * val(*c);
                    let gc = (&g * val(*x)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut adj, *x, gx);
                    accumulate(&mut adj, *c, gc);
                }
                Op::MulScalar(x, c) => {
                    let cv = val(*c)[[0, 0]];
                    let gc = (&g * val(*x)).sum();
                    accumulate(&mut adj, *x, &g * cv);
                    accumulate(&mut adj, *c, Array2::from_elem((1, 1), gc));
                }
                Op::Scale(x, k) => accumulate(&mut adj, *x, g * *k),
                Op::Offset(x) => accumulate(&mut adj, *x, g),
                Op::Mish(x) => {
                    let d = val(*x).mapv(activation::mish_grad);
                    accumulate(&mut adj, *x, g * d);
                }
                Op::Tanh(x) => {
                    let d = node.value.mapv(|y| 1.0 - y * y);
                    accumulate(&mut adj, *x, g * d);
                }
                Op::Sigmoid(x) => {
                    let d = node.value.mapv(|y| y * (1.0 - y));
                    accumulate(&mut adj, *x, g * d);
                }
                Op::Exp(x) => accumulate(&mut adj, *x, g * &node.value),
                Op::Ln(x) => accumulate(&mut adj, *x, g / val(*x)),
                Op::Softplus(x) => {
                    let d = val(*x).mapv(activation::logistic);
                    accumulate(&mut adj, *x, g * d);
                }
                Op::Square(x) => {
                    let d = val(*x) * 2.0;
                    accumulate(&mut adj, *x, g * d);
                }
                Op::Clamp(x, lo, hi) => {
                    let d = val(*x).mapv(|v| if v > *lo && v < *hi { 1.0 } else { 0.0 });
                    accumulate(&mut adj, *x, g * d);
                }
                Op::Min(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let mut ga = g.clone();
                    let mut gb = g;
                    ndarray::Zip::from(&mut ga)
                        .and(&mut gb)
                        .and(va)
                        .and(vb)
                        .for_each(|ga, gb, &x, &y| {
                            if x <= y {
                                *gb = 0.0;
                            } else {
                                *ga = 0.0;
                            }
                        });
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = val(p).ncols();
                        let gp = g.slice(s![.., start..start + w]).to_owned();
                        accumulate(&mut adj, p, gp);
                        start += w;
                    }
                }
                Op::Slice(x, start) => {
                    let mut gx = Array2::zeros(val(*x).dim());
                    let w = g.ncols();
                    gx.slice_mut(s![.., *start..*start + w]).assign(&g);
                    accumulate(&mut adj, *x, gx);
                }
                Op::SumCols(x) => {
                    let gx = Array2::from_shape_fn(val(*x).dim(), |(r, _)| g[[r, 0]]);
                    accumulate(&mut adj, *x, gx);
                }
                Op::Sum(x) => {
                    let gx = Array2::from_elem(val(*x).dim(), g[[0, 0]]);
                    accumulate(&mut adj, *x, gx);
                }
                Op::Mean(x) => {
                    let n = val(*x).len() as f64;
                    let gx = Array2::from_elem(val(*x).dim(), g[[0, 0]] / n);
                    accumulate(&mut adj, *x, gx);
                }
            }
        }

        // Interior adjoints were consumed above; only leaves keep theirs.
        let adjoints = adj;
        let shapes = nodes.iter().map(|n| n.value.dim()).collect();
        Ok(Gradients { adjoints, shapes })
    }
}

fn accumulate(adj: &mut [Option<Array2<f64>>], idx: usize, g: Array2<f64>) {
    match &mut adj[idx] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Adjoints of the leaves reached by a backward pass.
pub struct Gradients {
    adjoints: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of a leaf; zeros when the leaf was not reached.
    pub fn wrt(&self, v: Var<'_>) -> Array2<f64> {
        match &self.adjoints[v.idx] {
            Some(a) => a.clone(),
            None => Array2::zeros(self.shapes[v.idx]),
        }
    }

    pub fn reached(&self, v: Var<'_>) -> bool {
        self.adjoints[v.idx].is_some()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Array2<f64>> {
        self.tape.value_of(self.idx)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().dim()
    }

    /// The `[0, 0]` entry; convenient for scalar roots.
    pub fn item(&self) -> f64 {
        self.value()[[0, 0]]
    }

    pub fn matmul(self, w: Var<'t>) -> Var<'t> {
        self.tape.binary(self.idx, w.idx, Op::MatMul(self.idx, w.idx), |a, b| a.dot(b))
    }

    /// Adds a `1 x n` row to every row of `self`.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.idx, row.idx, Op::AddRow(self.idx, row.idx), |a, b| a + b)
    }

    /// Multiplies every column of `self` by a `B x 1` column.
    pub fn mul_col(self, col: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.idx, col.idx, Op::MulCol(self.idx, col.idx), |a, b| a * b)
    }

    /// Multiplies by a `1 x 1` node.
    pub fn mul_scalar(self, c: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.idx, c.idx, Op::MulScalar(self.idx, c.idx), |a, b| {
                a * b[[0, 0]]
            })
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.tape.unary(self.idx, Op::Scale(self.idx, k), |a| a * k)
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        self.tape.unary(self.idx, Op::Offset(self.idx), |a| a + c)
    }

    pub fn mish(self) -> Var<'t> {
        self.tape
            .unary(self.idx, Op::Mish(self.idx), |a| a.mapv(activation::mish))
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::Tanh(self.idx), |a| a.mapv(f64::tanh))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape
            .unary(self.idx, Op::Sigmoid(self.idx), |a| a.mapv(activation::logistic))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::Exp(self.idx), |a| a.mapv(f64::exp))
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::Ln(self.idx), |a| a.mapv(f64::ln))
    }

    pub fn softplus(self) -> Var<'t> {
        self.tape
            .unary(self.idx, Op::Softplus(self.idx), |a| a.mapv(activation::softplus))
    }

    pub fn square(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::Square(self.idx), |a| a * a)
    }

    /// Elementwise clamp to `[lo, hi]`; zero adjoint outside the open interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.tape
            .unary(self.idx, Op::Clamp(self.idx, lo, hi), |a| a.mapv(|v| v.clamp(lo, hi)))
    }

    /// Elementwise minimum; ties send the adjoint to `self`.
    pub fn minimum(self, other: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.idx, other.idx, Op::Min(self.idx, other.idx), |a, b| {
                let mut out = a.clone();
                out.zip_mut_with(b, |x, &y| *x = x.min(y));
                out
            })
    }

    /// Columns `start..end`.
    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        self.tape.unary(self.idx, Op::Slice(self.idx, start), |a| {
            a.slice(s![.., start..end]).to_owned()
        })
    }

    /// Row sums as a `B x 1` column.
    pub fn sum_cols(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::SumCols(self.idx), |a| {
            a.sum_axis(Axis(1)).insert_axis(Axis(1))
        })
    }

    pub fn sum(self) -> Var<'t> {
        self.tape
            .unary(self.idx, Op::Sum(self.idx), |a| Array2::from_elem((1, 1), a.sum()))
    }

    pub fn mean(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::Mean(self.idx), |a| {
            Array2::from_elem((1, 1), a.sum() / a.len() as f64)
        })
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.idx, rhs.idx, Op::Add(self.idx, rhs.idx), |a, b| a + b)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.idx, rhs.idx, Op::Sub(self.idx, rhs.idx), |a, b| a - b)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.idx, rhs.idx, Op::Mul(self.idx, rhs.idx), |a, b| a * b)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

/// Free-function form of [`Tape::stop_gradient`].
pub fn stop_gradient(x: Var<'_>) -> Var<'_> {
    x.tape.stop_gradient(x)
}
