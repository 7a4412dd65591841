//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices.
//!
//! Every value recorded on a [`Tape`] is a 2-D matrix. Scalars are `1×1`
//! matrices and row vectors are `1×c`. Operations append a node and return a
//! [`Var`] handle; [`Tape::backward`] walks the nodes in reverse and
//! accumulates gradients for every node that the output depends on.
//!
//! The op set is deliberately narrow: it covers what the encoder, the
//! subgraph extractor, the prototype layer and the heads need, and nothing
//! else. Each op's backward rule is checked against central finite
//! differences in the unit tests below.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    BroadcastRows(Var),
    Scale(Var, f64),
    AddScalar(Var),
    DivScalar(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    ConcatCols(Var, Var),
    Reshape(Var),
    RowSlice(Var, usize),
    BlockLeftMul(Rc<Mat>, Var),
    BlockMean(Var, usize),
    RowNormalize(Var, f64),
    SqDist(Var, Var),
    CrossEntropy(Var, Rc<Vec<usize>>),
    StraightThrough(Var),
    AffineCols(Var, Rc<Vec<f64>>),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Records a computation for later differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient of the differentiated output with respect to `v`, or `None`
    /// when the output does not depend on `v`.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but returns zeros of the right shape when `v`
    /// does not influence the output.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape))
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

    fn push(&self, value: Mat, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    /// Records a leaf (input, constant or parameter).
    pub fn leaf(&self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.leaf(Mat::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> Mat {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.dim()
    }

    fn with<R>(&self, v: Var, f: impl FnOnce(&Mat) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    fn with2<R>(&self, a: Var, b: Var, f: impl FnOnce(&Mat, &Mat) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let v = self.with2(a, b, |x, y| {
            assert_eq!(x.ncols(), y.nrows(), "matmul inner dimension mismatch");
            x.dot(y)
        });
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = self.with2(a, b, |x, y| {
            assert_eq!(x.dim(), y.dim(), "add shape mismatch");
            x + y
        });
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = self.with2(a, b, |x, y| {
            assert_eq!(x.dim(), y.dim(), "sub shape mismatch");
            x - y
        });
        self.push(v, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = self.with2(a, b, |x, y| {
            assert_eq!(x.dim(), y.dim(), "mul shape mismatch");
            x * y
        });
        self.push(v, Op::Mul(a, b))
    }

    /// `a (r×c) + row (1×c)` broadcast over rows.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let v = self.with2(a, row, |x, r| {
            assert_eq!(r.dim(), (1, x.ncols()), "add_row shape mismatch");
            x + r
        });
        self.push(v, Op::AddRow(a, row))
    }

    /// `a (r×c) * col (r×1)` broadcast over columns.
    pub fn mul_col(&self, a: Var, col: Var) -> Var {
        let v = self.with2(a, col, |x, c| {
            assert_eq!(c.dim(), (x.nrows(), 1), "mul_col shape mismatch");
            x * c
        });
        self.push(v, Op::MulCol(a, col))
    }

    /// Repeats a `1×c` row `n` times.
    pub fn broadcast_rows(&self, row: Var, n: usize) -> Var {
        let v = self.with(row, |r| {
            assert_eq!(r.nrows(), 1, "broadcast_rows expects a row vector");
            r.broadcast((n, r.ncols())).unwrap().to_owned()
        });
        self.push(v, Op::BroadcastRows(row))
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let v = self.with(a, |x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&self, a: Var, k: f64) -> Var {
        let v = self.with(a, |x| x + k);
        self.push(v, Op::AddScalar(a))
    }

    /// `1 - a`.
    pub fn one_minus(&self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    /// Divides every entry of `a` by the `1×1` value `s`.
    pub fn div_scalar(&self, a: Var, s: Var) -> Var {
        let v = self.with2(a, s, |x, d| {
            assert_eq!(d.dim(), (1, 1), "div_scalar expects a 1x1 divisor");
            x / d[[0, 0]]
        });
        self.push(v, Op::DivScalar(a, s))
    }

    pub fn relu(&self, a: Var) -> Var {
        let v = self.with(a, |x| x.mapv(|e| e.max(0.0)));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let v = self.with(a, |x| x.mapv(sigmoid));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn log(&self, a: Var) -> Var {
        let v = self.with(a, |x| x.mapv(f64::ln));
        self.push(v, Op::Log(a))
    }

    /// Square root; the backward pass treats the derivative at 0 as 0.
    pub fn sqrt(&self, a: Var) -> Var {
        let v = self.with(a, |x| x.mapv(f64::sqrt));
        self.push(v, Op::Sqrt(a))
    }

    pub fn square(&self, a: Var) -> Var {
        let v = self.with(a, |x| x.mapv(|e| e * e));
        self.push(v, Op::Square(a))
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.with(a, |x| x.mapv(|e| e.clamp(lo, hi)));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn sum(&self, a: Var) -> Var {
        let v = self.with(a, |x| Mat::from_elem((1, 1), x.sum()));
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let v = self.with(a, |x| Mat::from_elem((1, 1), x.sum() / x.len() as f64));
        self.push(v, Op::Mean(a))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let v = self.with(a, |x| x.t().to_owned());
        self.push(v, Op::Transpose(a))
    }

    pub fn concat_cols(&self, a: Var, b: Var) -> Var {
        let v = self.with2(a, b, |x, y| {
            assert_eq!(x.nrows(), y.nrows(), "concat_cols row mismatch");
            ndarray::concatenate(Axis(1), &[x.view(), y.view()]).unwrap()
        });
        self.push(v, Op::ConcatCols(a, b))
    }

    /// Row-major reshape.
    pub fn reshape(&self, a: Var, shape: (usize, usize)) -> Var {
        let v = self.with(a, |x| {
            assert_eq!(x.len(), shape.0 * shape.1, "reshape size mismatch");
            let flat: Vec<f64> = x.iter().copied().collect();
            Mat::from_shape_vec(shape, flat).unwrap()
        });
        self.push(v, Op::Reshape(a))
    }

    /// Rows `start..start + len`.
    pub fn row_slice(&self, a: Var, start: usize, len: usize) -> Var {
        let v = self.with(a, |x| {
            assert!(start + len <= x.nrows(), "row_slice out of range");
            x.slice(s![start..start + len, ..]).to_owned()
        });
        self.push(v, Op::RowSlice(a, start))
    }

    /// Treats `a` as a vertical stack of `n×c` blocks and left-multiplies each
    /// block by the constant `n×n` matrix `m`.
    pub fn block_left_mul(&self, m: Rc<Mat>, a: Var) -> Var {
        let v = self.with(a, |x| {
            let n = m.nrows();
            assert_eq!(m.ncols(), n, "block_left_mul expects a square matrix");
            assert_eq!(x.nrows() % n, 0, "block_left_mul row count not a multiple");
            let mut out = Mat::zeros(x.dim());
            for b in 0..x.nrows() / n {
                let blk = x.slice(s![b * n..(b + 1) * n, ..]);
                out.slice_mut(s![b * n..(b + 1) * n, ..]).assign(&m.dot(&blk));
            }
            out
        });
        self.push(v, Op::BlockLeftMul(m, a))
    }

    /// Treats `a` as `blocks` stacked blocks and returns their mean.
    pub fn block_mean(&self, a: Var, blocks: usize) -> Var {
        let v = self.with(a, |x| {
            assert!(blocks > 0 && x.nrows() % blocks == 0, "block_mean shape");
            let n = x.nrows() / blocks;
            let mut out = Mat::zeros((n, x.ncols()));
            for b in 0..blocks {
                out += &x.slice(s![b * n..(b + 1) * n, ..]);
            }
            out / blocks as f64
        });
        self.push(v, Op::BlockMean(a, blocks))
    }

    /// Divides each row by its sum; rows whose sum is below `eps` are passed
    /// through unchanged.
    pub fn row_normalize(&self, a: Var, eps: f64) -> Var {
        let v = self.with(a, |x| {
            let mut out = x.clone();
            for mut row in out.rows_mut() {
                let s = row.sum();
                if s >= eps {
                    row /= s;
                }
            }
            out
        });
        self.push(v, Op::RowNormalize(a, eps))
    }

    /// Squared Euclidean distance from the row vector `z (1×d)` to each row
    /// of `v (m×d)`, returned as `1×m`.
    pub fn sq_dist(&self, z: Var, rows: Var) -> Var {
        let v = self.with2(z, rows, |zv, vv| {
            assert_eq!(zv.nrows(), 1, "sq_dist expects a row vector");
            assert_eq!(zv.ncols(), vv.ncols(), "sq_dist dimension mismatch");
            let mut out = Mat::zeros((1, vv.nrows()));
            for (m, row) in vv.rows().into_iter().enumerate() {
                out[[0, m]] = row.iter().zip(zv.row(0)).map(|(a, b)| (b - a).powi(2)).sum();
            }
            out
        });
        self.push(v, Op::SqDist(z, rows))
    }

    /// Mean over rows of the softmax cross-entropy between `logits (n×k)` and
    /// integer labels, in nats.
    pub fn cross_entropy(&self, logits: Var, labels: Rc<Vec<usize>>) -> Var {
        let v = self.with(logits, |x| {
            assert_eq!(x.nrows(), labels.len(), "cross_entropy label count");
            let mut total = 0.0;
            for (row, &y) in x.rows().into_iter().zip(labels.iter()) {
                assert!(y < row.len(), "label out of range");
                let max = row.fold(f64::NEG_INFINITY, |m, &e| m.max(e));
                let lse = max + row.iter().map(|e| (e - max).exp()).sum::<f64>().ln();
                total += lse - row[y];
            }
            Mat::from_elem((1, 1), total / x.nrows() as f64)
        });
        self.push(v, Op::CrossEntropy(logits, labels))
    }

    /// Records `forward` as the value while routing gradients to `a`
    /// unchanged (straight-through estimator).
    pub fn straight_through(&self, a: Var, forward: Mat) -> Var {
        assert_eq!(self.shape(a), forward.dim(), "straight_through shape mismatch");
        self.push(forward, Op::StraightThrough(a))
    }

    /// `(a - shift_c) / scale_c` per column with constant statistics.
    pub fn affine_cols(&self, a: Var, shift: &[f64], scale: &[f64]) -> Var {
        let v = self.with(a, |x| {
            assert_eq!(shift.len(), x.ncols());
            assert_eq!(scale.len(), x.ncols());
            let mut out = x.clone();
            for mut row in out.rows_mut() {
                for (c, e) in row.iter_mut().enumerate() {
                    *e = (*e - shift[c]) / scale[c];
                }
            }
            out
        });
        self.push(v, Op::AffineCols(a, Rc::new(scale.to_vec())))
    }

    /// Reverse pass from a `1×1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.0].value.dim(), (1, 1), "backward expects a scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Mat::ones((1, 1)));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.dot(&val(*b).t()));
                    acc(&mut grads, *b, val(*a).t().dot(&g));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -&g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * val(*b));
                    acc(&mut grads, *b, &g * val(*a));
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g.clone());
                }
                Op::MulCol(a, col) => {
                    let gc = (&g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *a, &g * val(*col));
                    acc(&mut grads, *col, gc);
                }
                Op::BroadcastRows(row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::Scale(a, k) => acc(&mut grads, *a, &g * *k),
                Op::AddScalar(a) => acc(&mut grads, *a, g.clone()),
                Op::DivScalar(a, sv) => {
                    let d = val(*sv)[[0, 0]];
                    let gs = -(&g * val(*a)).sum() / (d * d);
                    acc(&mut grads, *a, &g / d);
                    acc(&mut grads, *sv, Mat::from_elem((1, 1), gs));
                }
                Op::Relu(a) => {
                    let mask = val(*a).mapv(|e| if e > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut grads, *a, &g * &mask);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(&mut grads, *a, &g * &y.mapv(|e| e * (1.0 - e)));
                }
                Op::Log(a) => acc(&mut grads, *a, &g / val(*a)),
                Op::Sqrt(a) => {
                    let d = node.value.mapv(|e| if e > 0.0 { 0.5 / e } else { 0.0 });
                    acc(&mut grads, *a, &g * &d);
                }
                Op::Square(a) => acc(&mut grads, *a, &g * &(val(*a) * 2.0)),
                Op::Clamp(a, lo, hi) => {
                    let mask = val(*a).mapv(|e| if e >= *lo && e <= *hi { 1.0 } else { 0.0 });
                    acc(&mut grads, *a, &g * &mask);
                }
                Op::Sum(a) => {
                    let gs = g[[0, 0]];
                    acc(&mut grads, *a, Mat::from_elem(val(*a).dim(), gs));
                }
                Op::Mean(a) => {
                    let x = val(*a);
                    let gs = g[[0, 0]] / x.len() as f64;
                    acc(&mut grads, *a, Mat::from_elem(x.dim(), gs));
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::ConcatCols(a, b) => {
                    let ca = val(*a).ncols();
                    acc(&mut grads, *a, g.slice(s![.., ..ca]).to_owned());
                    acc(&mut grads, *b, g.slice(s![.., ca..]).to_owned());
                }
                Op::Reshape(a) => {
                    let flat: Vec<f64> = g.iter().copied().collect();
                    acc(&mut grads, *a, Mat::from_shape_vec(val(*a).dim(), flat).unwrap());
                }
                Op::RowSlice(a, start) => {
                    let mut ga = Mat::zeros(val(*a).dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::BlockLeftMul(m, a) => {
                    let n = m.nrows();
                    let mt = m.t();
                    let mut ga = Mat::zeros(g.dim());
                    for b in 0..g.nrows() / n {
                        let blk = g.slice(s![b * n..(b + 1) * n, ..]);
                        ga.slice_mut(s![b * n..(b + 1) * n, ..]).assign(&mt.dot(&blk));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::BlockMean(a, blocks) => {
                    let n = g.nrows();
                    let mut ga = Mat::zeros(val(*a).dim());
                    let gb = &g / *blocks as f64;
                    for b in 0..*blocks {
                        ga.slice_mut(s![b * n..(b + 1) * n, ..]).assign(&gb);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::RowNormalize(a, eps) => {
                    let x = val(*a);
                    let mut ga = Mat::zeros(x.dim());
                    for r in 0..x.nrows() {
                        let sum = x.row(r).sum();
                        if sum >= *eps {
                            // d(x_j / s)/dx_k = delta_jk / s - x_j / s^2
                            let dot: f64 = g.row(r).iter().zip(x.row(r)).map(|(a, b)| a * b).sum();
                            for c in 0..x.ncols() {
                                ga[[r, c]] = g[[r, c]] / sum - dot / (sum * sum);
                            }
                        } else {
                            ga.row_mut(r).assign(&g.row(r));
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SqDist(z, rows) => {
                    let zv = val(*z);
                    let vv = val(*rows);
                    let mut gz = Mat::zeros(zv.dim());
                    let mut gv = Mat::zeros(vv.dim());
                    for m in 0..vv.nrows() {
                        let gm = g[[0, m]];
                        for c in 0..vv.ncols() {
                            let d = 2.0 * (zv[[0, c]] - vv[[m, c]]) * gm;
                            gz[[0, c]] += d;
                            gv[[m, c]] -= d;
                        }
                    }
                    acc(&mut grads, *z, gz);
                    acc(&mut grads, *rows, gv);
                }
                Op::CrossEntropy(logits, labels) => {
                    let x = val(*logits);
                    let n = x.nrows() as f64;
                    let mut gl = Mat::zeros(x.dim());
                    for (r, &y) in labels.iter().enumerate() {
                        let row = x.row(r);
                        let max = row.fold(f64::NEG_INFINITY, |m, &e| m.max(e));
                        let z: f64 = row.iter().map(|e| (e - max).exp()).sum();
                        for c in 0..x.ncols() {
                            let p = (x[[r, c]] - max).exp() / z;
                            let t = if c == y { 1.0 } else { 0.0 };
                            gl[[r, c]] = g[[0, 0]] * (p - t) / n;
                        }
                    }
                    acc(&mut grads, *logits, gl);
                }
                Op::StraightThrough(a) => acc(&mut grads, *a, g.clone()),
                Op::AffineCols(a, scale) => {
                    let mut ga = g.clone();
                    for mut row in ga.rows_mut() {
                        for (c, e) in row.iter_mut().enumerate() {
                            *e /= scale[c];
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
            }
            // Ops only feed earlier nodes, so the slot is free to restore.
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference(x: &Mat, step: f64, mut f: impl FnMut(&Mat) -> f64) -> Mat {
    let mut grad = Mat::zeros(x.dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + step;
        let up = f(&probe);
        probe[[r, c]] = orig - step;
        let down = f(&probe);
        probe[[r, c]] = orig;
        grad[[r, c]] = (up - down) / (2.0 * step);
    }
    grad
}

/// Largest entrywise relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(analytic: &Mat, numeric: &Mat, floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}
