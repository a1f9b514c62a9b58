use std::sync::atomic::{AtomicU32, Ordering};

use super::matrix::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Matrix};
use crate::error::{Error, Result};
use crate::geometry::DENOM_EPS;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    AddRowBias(usize, usize),
    ScaleRows(usize, usize),
    Conv1d {
        input: usize,
        weight: usize,
        kernel: usize,
        dilation: usize,
    },
    Relu(usize),
    Tanh(usize),
    Artanh(usize),
    Sqrt(usize),
    Ln(usize),
    Asin(usize),
    Atan2(usize, usize),
    Clamp { a: usize, lo: f64, hi: f64 },
    SoftmaxRows(usize),
    RowSumSq(usize),
    RowDot(usize, usize),
    SumAll(usize),
    MeanAll(usize),
    SliceRows { a: usize, start: usize },
    GatherRows { a: usize, index: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// A record of matrix operations for reverse-mode differentiation.
///
/// Every method appends one node and returns its [`Var`]. Shape errors in
/// the recorded operations are programming errors and panic; callers that
/// take user input validate shapes before building the graph.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node on a tape.
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zero-filled when the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes.get(v.idx).copied().unwrap_or((0, 0));
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.idx).and_then(Option::take)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        v.idx
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[self.idx(v)].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// A differentiable input holding `m`.
    pub fn leaf(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    /// An input that never receives a gradient (a stop-gradient).
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Constant)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Matrix::scalar(v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let v = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x + y);
        self.push(v, Op::Add(ia, ib))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let v = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x - y);
        self.push(v, Op::Sub(ia, ib))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let v = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x * y);
        self.push(v, Op::Mul(ia, ib))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let v = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x / y);
        self.push(v, Op::Div(ia, ib))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ia = self.idx(a);
        let v = self.nodes[ia].value.map(|x| x * s);
        self.push(v, Op::Scale(ia, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let ia = self.idx(a);
        let v = self.nodes[ia].value.map(|x| x + s);
        self.push(v, Op::AddScalar(ia))
    }

    /// `s - a`.
    pub fn rsub_scalar(&mut self, s: f64, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, s)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let v = self.nodes[ia].value.matmul(&self.nodes[ib].value);
        self.push(v, Op::MatMul(ia, ib))
    }

    /// Adds the 1×n row `bias` to every row of `a`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(bias));
        let b = &self.nodes[ib].value;
        let mut v = self.nodes[ia].value.clone();
        assert_eq!(b.rows(), 1, "bias must be a single row");
        assert_eq!(b.cols(), v.cols(), "bias width mismatch");
        for i in 0..v.rows() {
            for (x, y) in v.row_mut(i).iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        self.push(v, Op::AddRowBias(ia, ib))
    }

    /// Multiplies row `i` of `a` by `s[i]`, where `s` is a column.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Var {
        let (ia, is) = (self.idx(a), self.idx(s));
        let sv = &self.nodes[is].value;
        let mut v = self.nodes[ia].value.clone();
        assert_eq!(sv.shape(), (v.rows(), 1), "scale_rows expects an L×1 column");
        for i in 0..v.rows() {
            let f = sv.data()[i];
            v.row_mut(i).iter_mut().for_each(|x| *x *= f);
        }
        self.push(v, Op::ScaleRows(ia, is))
    }

    /// Dilated 1-D convolution along rows with zero "same" padding.
    ///
    /// `input` is L×C_in, `weight` is (kernel·C_in)×C_out where block `j`
    /// of `C_in` rows is applied to frame `t + (j - kernel/2)·dilation`.
    pub fn conv1d(&mut self, input: Var, weight: Var, kernel: usize, dilation: usize) -> Var {
        let (ii, iw) = (self.idx(input), self.idx(weight));
        let x = &self.nodes[ii].value;
        let w = &self.nodes[iw].value;
        let (len, cin) = x.shape();
        assert_eq!(w.rows(), kernel * cin, "conv1d weight rows must be kernel·C_in");
        let cout = w.cols();
        let mut out = Matrix::zeros(len, cout);
        let half = (kernel / 2) as isize;
        for j in 0..kernel {
            let off = (j as isize - half) * dilation as isize;
            let wj = &w.data()[j * cin * cout..(j + 1) * cin * cout];
            let (dst, src, n) = shifted_range(len, off);
            if n == 0 {
                continue;
            }
            matmul_acc(
                &x.data()[src * cin..(src + n) * cin],
                wj,
                &mut out.data_mut()[dst * cout..(dst + n) * cout],
                n,
                cin,
                cout,
            );
        }
        self.push(
            out,
            Op::Conv1d {
                input: ii,
                weight: iw,
                kernel,
                dilation,
            },
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let v = self.nodes[ia].value.map(|x| x.max(0.0));
        self.push(v, Op::Relu(ia))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let v = self.nodes[ia].value.map(f64::tanh);
        self.push(v, Op::Tanh(ia))
    }

    /// Inverse hyperbolic tangent; callers clamp the argument inside (-1, 1).
    pub fn artanh(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let v = self.nodes[ia].value.map(|u| 0.5 * ((1.0 + u) / (1.0 - u)).ln());
        self.push(v, Op::Artanh(ia))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let v = self.nodes[ia].value.map(f64::sqrt);
        self.push(v, Op::Sqrt(ia))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let v = self.nodes[ia].value.map(f64::ln);
        self.push(v, Op::Ln(ia))
    }

    pub fn asin(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let v = self.nodes[ia].value.map(f64::asin);
        self.push(v, Op::Asin(ia))
    }

    /// Elementwise `atan2(y, x)`.
    pub fn atan2(&mut self, y: Var, x: Var) -> Var {
        let (iy, ix) = (self.idx(y), self.idx(x));
        let v = self.nodes[iy].value.zip_map(&self.nodes[ix].value, f64::atan2);
        self.push(v, Op::Atan2(iy, ix))
    }

    /// Elementwise clamp; the gradient passes only where `lo <= a <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let ia = self.idx(a);
        let v = self.nodes[ia].value.map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp { a: ia, lo, hi })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let v = self.nodes[ia].value.softmax_rows();
        self.push(v, Op::SoftmaxRows(ia))
    }

    /// Squared Euclidean norm of each row, as an L×1 column.
    pub fn row_sum_sq(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let m = &self.nodes[ia].value;
        let data = m.iter_rows().map(|r| r.iter().map(|x| x * x).sum()).collect();
        let v = Matrix::from_vec(m.rows(), 1, data).expect("row count");
        self.push(v, Op::RowSumSq(ia))
    }

    /// Row-wise inner products of two equally shaped matrices, as an L×1 column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        assert_eq!(x.shape(), y.shape(), "row_dot shape mismatch");
        let data = x
            .iter_rows()
            .zip(y.iter_rows())
            .map(|(r, s)| r.iter().zip(s).map(|(p, q)| p * q).sum())
            .collect();
        let v = Matrix::from_vec(x.rows(), 1, data).expect("row count");
        self.push(v, Op::RowDot(ia, ib))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let v = Matrix::scalar(self.nodes[ia].value.sum());
        self.push(v, Op::SumAll(ia))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let m = &self.nodes[ia].value;
        let v = Matrix::scalar(m.sum() / m.len() as f64);
        self.push(v, Op::MeanAll(ia))
    }

    /// Rows `start..start + len` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ia = self.idx(a);
        let m = &self.nodes[ia].value;
        assert!(start + len <= m.rows(), "slice_rows out of bounds");
        let cols = m.cols();
        let v = Matrix::from_vec(len, cols, m.data()[start * cols..(start + len) * cols].to_vec())
            .expect("slice shape");
        self.push(v, Op::SliceRows { a: ia, start })
    }

    /// Row `index[i]` of `a` becomes row `i` of the result.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Var {
        let ia = self.idx(a);
        let m = &self.nodes[ia].value;
        let cols = m.cols();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &r in index {
            assert!(r < m.rows(), "gather_rows index out of bounds");
            data.extend_from_slice(m.row(r));
        }
        let v = Matrix::from_vec(index.len(), cols, data).expect("gather shape");
        self.push(
            v,
            Op::GatherRows {
                a: ia,
                index: index.to_vec(),
            },
        )
    }

    /// Reverse pass from the scalar `output`.
    ///
    /// Nodes are visited in reverse recording order, which is a reverse
    /// topological order because inputs are always recorded before use.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if output.tape != self.id || output.idx >= self.nodes.len() {
            return Err(Error::InvalidArgument("output is not a node of this tape".into()));
        }
        let out_shape = self.nodes[output.idx].value.shape();
        if out_shape != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar output, got {}x{}",
                out_shape.0, out_shape.1
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.idx] = Some(Matrix::scalar(1.0));
        for i in (0..=output.idx).rev() {
            if matches!(self.nodes[i].op, Op::Constant) {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let val = |k: usize| &self.nodes[k].value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                accumulate(grads, *a, g.zip_map(vb, |x, y| x / y));
                let gb = Matrix::from_fn(g.rows(), g.cols(), |r, c| {
                    let (gx, ax, bx) = (g.get(r, c), va.get(r, c), vb.get(r, c));
                    -gx * ax / (bx * bx)
                });
                accumulate(grads, *b, gb);
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                let mut ga = Matrix::zeros(m, k);
                matmul_nt_acc(g.data(), vb.data(), ga.data_mut(), m, n, k);
                let mut gb = Matrix::zeros(k, n);
                matmul_tn_acc(va.data(), g.data(), gb.data_mut(), m, k, n);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::AddRowBias(a, b) => {
                let mut gb = Matrix::zeros(1, g.cols());
                for r in g.iter_rows() {
                    for (x, y) in gb.data_mut().iter_mut().zip(r) {
                        *x += y;
                    }
                }
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, gb);
            }
            Op::ScaleRows(a, s) => {
                let (va, vs) = (val(*a), val(*s));
                let mut ga = g.clone();
                let mut gs = Matrix::zeros(vs.rows(), 1);
                for r in 0..g.rows() {
                    let f = vs.data()[r];
                    ga.row_mut(r).iter_mut().for_each(|x| *x *= f);
                    gs.data_mut()[r] = g.row(r).iter().zip(va.row(r)).map(|(x, y)| x * y).sum();
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *s, gs);
            }
            Op::Conv1d {
                input,
                weight,
                kernel,
                dilation,
            } => {
                let (x, w) = (val(*input), val(*weight));
                let (len, cin) = x.shape();
                let cout = w.cols();
                let mut gx = Matrix::zeros(len, cin);
                let mut gw = Matrix::zeros(w.rows(), cout);
                let half = (*kernel / 2) as isize;
                for j in 0..*kernel {
                    let off = (j as isize - half) * *dilation as isize;
                    let (dst, src, n) = shifted_range(len, off);
                    if n == 0 {
                        continue;
                    }
                    let block = j * cin * cout..(j + 1) * cin * cout;
                    // out[dst..] += x[src..] · W_j
                    matmul_nt_acc(
                        &g.data()[dst * cout..(dst + n) * cout],
                        &w.data()[block.clone()],
                        &mut gx.data_mut()[src * cin..(src + n) * cin],
                        n,
                        cout,
                        cin,
                    );
                    matmul_tn_acc(
                        &x.data()[src * cin..(src + n) * cin],
                        &g.data()[dst * cout..(dst + n) * cout],
                        &mut gw.data_mut()[block],
                        n,
                        cin,
                        cout,
                    );
                }
                accumulate(grads, *input, gx);
                accumulate(grads, *weight, gw);
            }
            Op::Relu(a) => {
                accumulate(grads, *a, g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 }))
            }
            Op::Tanh(a) => {
                accumulate(grads, *a, g.zip_map(&node.value, |x, t| x * (1.0 - t * t)))
            }
            Op::Artanh(a) => {
                accumulate(grads, *a, g.zip_map(val(*a), |x, u| x / (1.0 - u * u)))
            }
            Op::Sqrt(a) => accumulate(
                grads,
                *a,
                g.zip_map(&node.value, |x, s| 0.5 * x / s.max(DENOM_EPS)),
            ),
            Op::Ln(a) => accumulate(grads, *a, g.zip_map(val(*a), |x, u| x / u)),
            Op::Asin(a) => accumulate(
                grads,
                *a,
                g.zip_map(val(*a), |x, u| x / (1.0 - u * u).max(0.0).sqrt().max(DENOM_EPS)),
            ),
            Op::Atan2(y, x) => {
                let (vy, vx) = (val(*y), val(*x));
                let den = vy.zip_map(vx, |p, q| (p * p + q * q).max(DENOM_EPS * DENOM_EPS));
                let gy = Matrix::from_fn(g.rows(), g.cols(), |r, c| {
                    g.get(r, c) * vx.get(r, c) / den.get(r, c)
                });
                let gx = Matrix::from_fn(g.rows(), g.cols(), |r, c| {
                    -g.get(r, c) * vy.get(r, c) / den.get(r, c)
                });
                accumulate(grads, *y, gy);
                accumulate(grads, *x, gx);
            }
            Op::Clamp { a, lo, hi } => accumulate(
                grads,
                *a,
                g.zip_map(val(*a), |x, u| if u >= *lo && u <= *hi { x } else { 0.0 }),
            ),
            Op::SoftmaxRows(a) => {
                let p = &node.value;
                let mut ga = Matrix::zeros(p.rows(), p.cols());
                for r in 0..p.rows() {
                    let (pr, gr) = (p.row(r), g.row(r));
                    let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for ((o, pv), gv) in ga.row_mut(r).iter_mut().zip(pr).zip(gr) {
                        *o = pv * (gv - dot);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::RowSumSq(a) => {
                let va = val(*a);
                let ga = Matrix::from_fn(va.rows(), va.cols(), |r, c| 2.0 * va.get(r, c) * g.data()[r]);
                accumulate(grads, *a, ga);
            }
            Op::RowDot(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga = Matrix::from_fn(va.rows(), va.cols(), |r, c| vb.get(r, c) * g.data()[r]);
                let gb = Matrix::from_fn(va.rows(), va.cols(), |r, c| va.get(r, c) * g.data()[r]);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::SumAll(a) => {
                let (r, c) = val(*a).shape();
                accumulate(grads, *a, Matrix::filled(r, c, g.item()));
            }
            Op::MeanAll(a) => {
                let (r, c) = val(*a).shape();
                accumulate(grads, *a, Matrix::filled(r, c, g.item() / (r * c) as f64));
            }
            Op::SliceRows { a, start } => {
                let (r, c) = val(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                accumulate(grads, *a, ga);
            }
            Op::GatherRows { a, index } => {
                let (r, c) = val(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for (i, &src) in index.iter().enumerate() {
                    for (x, y) in ga.row_mut(src).iter_mut().zip(g.row(i)) {
                        *x += y;
                    }
                }
                accumulate(grads, *a, ga);
            }
        }
    }
}

/// For a shift `off`, returns `(dst, src, n)` such that output rows
/// `dst..dst+n` read input rows `src..src+n` (`src = dst + off`).
fn shifted_range(len: usize, off: isize) -> (usize, usize, usize) {
    let len = len as isize;
    let dst = (-off).max(0);
    let end = (len - off).min(len);
    let n = (end - dst).max(0);
    (dst as usize, (dst + off).max(0) as usize, n as usize)
}

fn accumulate(grads: &mut [Option<Matrix>], i: usize, g: Matrix) {
    match &mut grads[i] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
