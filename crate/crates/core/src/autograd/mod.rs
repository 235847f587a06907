//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices.
//!
//! Every value is a 2-D matrix; vectors are `1 x n` rows and scalars are
//! `1 x 1`. A [`Tape`] records operations as they are executed and
//! [`Tape::backward`] walks the record in reverse, accumulating gradients.
//! Binary elementwise operations broadcast along any axis of length one.

mod params;
mod optim;
pub mod gradcheck;

pub use optim::{Adaptive, AdaptiveConfig};
pub use params::{Bound, ParamStore};

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

type BackFn = Box<dyn Fn(&Mat) -> Vec<Mat>>;

struct Node {
    value: Rc<Mat>,
    parents: Vec<usize>,
    backward: Option<BackFn>,
    requires_grad: bool,
}

/// Records operations for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var(#{}, {}x{})", self.id, r, c)
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when `var` does not
    /// influence the loss.
    pub fn of(&self, var: Var<'_>) -> Mat {
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = var.shape();
                Mat::zeros((r, c))
            }
        }
    }

    pub fn get(&self, var: Var<'_>) -> Option<&Mat> {
        self.grads[var.id].as_ref()
    }
}

/// Compressed sparse row matrix used as a constant left operand.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub rows: usize,
    pub cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub data: Vec<f64>,
}

impl Csr {
    /// Row `r` averages the listed columns; empty rows stay all-zero.
    pub fn mean_rows<I: AsRef<[usize]>>(rows: &[I], cols: usize) -> Self {
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut data = Vec::new();
        for row in rows {
            let row = row.as_ref();
            let w = if row.is_empty() { 0.0 } else { 1.0 / row.len() as f64 };
            for &c in row {
                assert!(c < cols, "column {c} out of range {cols}");
                indices.push(c);
                data.push(w);
            }
            indptr.push(indices.len());
        }
        Csr {
            rows: rows.len(),
            cols,
            indptr,
            indices,
            data,
        }
    }

    pub fn to_dense(&self) -> Mat {
        let mut m = Mat::zeros((self.rows, self.cols));
        for r in 0..self.rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                m[[r, self.indices[k]]] += self.data[k];
            }
        }
        m
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("cannot broadcast {a:?} with {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

/// Sums `g` down to `shape` along broadcast axes.
fn unbroadcast(g: &Mat, shape: (usize, usize)) -> Mat {
    let mut out = g.clone();
    if shape.0 == 1 && out.nrows() != 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && out.ncols() != 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    out
}

fn dims(m: &Mat) -> (usize, usize) {
    (m.nrows(), m.ncols())
}

fn broadcast_to(m: &Mat, shape: (usize, usize)) -> Mat {
    if dims(m) == shape {
        m.clone()
    } else {
        m.broadcast(shape)
            .expect("broadcast checked by broadcast_shape")
            .to_owned()
    }
}

/// Row-wise softmax honouring an optional 0/1 mask. Rows with no allowed
/// entry produce all zeros.
pub fn masked_softmax_rows(x: &Mat, mask: Option<&Mat>) -> Mat {
    let mut out = Mat::zeros(x.raw_dim());
    for r in 0..x.nrows() {
        let allowed = |c: usize| mask.is_none_or(|m| m[[r, c]] > 0.0);
        let mut max = f64::NEG_INFINITY;
        for c in 0..x.ncols() {
            if allowed(c) && x[[r, c]] > max {
                max = x[[r, c]];
            }
        }
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for c in 0..x.ncols() {
            if allowed(c) {
                let e = (x[[r, c]] - max).exp();
                out[[r, c]] = e;
                total += e;
            }
        }
        for c in 0..x.ncols() {
            out[[r, c]] /= total;
        }
    }
    out
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

    fn push(&self, value: Mat, parents: &[Var<'_>], backward: Option<BackFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad { backward } else { None },
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// A value that never receives gradients.
    pub fn constant(&self, value: Mat) -> Var<'_> {
        self.push(value, &[], None)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Mat::from_elem((1, 1), value))
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Mat) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        });
        Var { tape: self, id }
    }

    /// Records an operation with a caller-supplied backward rule. The rule
    /// receives the output gradient and returns one gradient per input, each
    /// shaped like that input.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t>],
        value: Mat,
        backward: impl Fn(&Mat) -> Vec<Mat> + 'static,
    ) -> Var<'t> {
        self.push(value, inputs, Some(Box::new(backward)))
    }

    /// Reverse pass from a `1 x 1` loss.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            dims(&nodes[loss.id].value),
            (1, 1),
            "backward requires a scalar loss"
        );
        let mut grads: Vec<Option<Mat>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Mat::ones((1, 1)));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(back) = &node.backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            let contributions = back(&g);
            debug_assert_eq!(contributions.len(), node.parents.len());
            for (&pid, contrib) in node.parents.iter().zip(contributions) {
                if !nodes[pid].requires_grad {
                    continue;
                }
                debug_assert_eq!(dims(&contrib), dims(&nodes[pid].value));
                match &mut grads[pid] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Mat> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> (usize, usize) {
        dims(&self.tape.nodes.borrow()[self.id].value)
    }

    /// Value of a `1 x 1` variable.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(dims(&v), (1, 1), "item() on non-scalar");
        v[[0, 0]]
    }

    fn unary(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let x = self.value();
        let y = Rc::new(x.mapv(f));
        let out = Rc::clone(&y);
        self.tape.push(
            (*y).clone(),
            &[self],
            Some(Box::new(move |g| {
                let mut gx = g.clone();
                Zip::from(&mut gx)
                    .and(&*x)
                    .and(&*out)
                    .for_each(|gx, &xi, &yi| *gx *= df(xi, yi));
                vec![gx]
            })),
        )
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        assert_eq!(
            a.ncols(),
            b.nrows(),
            "matmul shape mismatch {:?} x {:?}",
            dims(&a),
            dims(&b)
        );
        let value = a.dot(&*b);
        self.tape.push(
            value,
            &[self, other],
            Some(Box::new(move |g| vec![g.dot(&b.t()), a.t().dot(g)])),
        )
    }

    pub fn t(self) -> Var<'t> {
        let value = self.value().t().to_owned();
        self.tape.push(
            value,
            &[self],
            Some(Box::new(|g| vec![g.t().to_owned()])),
        )
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(dims(&a), dims(&b));
        let value = broadcast_to(&a, shape) + broadcast_to(&b, shape);
        let (sa, sb) = (dims(&a), dims(&b));
        self.tape.push(
            value,
            &[self, other],
            Some(Box::new(move |g| vec![unbroadcast(g, sa), unbroadcast(g, sb)])),
        )
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(dims(&a), dims(&b));
        let value = broadcast_to(&a, shape) - broadcast_to(&b, shape);
        let (sa, sb) = (dims(&a), dims(&b));
        self.tape.push(
            value,
            &[self, other],
            Some(Box::new(move |g| {
                vec![unbroadcast(g, sa), unbroadcast(&g.mapv(|x| -x), sb)]
            })),
        )
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(dims(&a), dims(&b));
        let (ab, bb) = (broadcast_to(&a, shape), broadcast_to(&b, shape));
        let value = &ab * &bb;
        let (sa, sb) = (dims(&a), dims(&b));
        self.tape.push(
            value,
            &[self, other],
            Some(Box::new(move |g| {
                vec![unbroadcast(&(g * &bb), sa), unbroadcast(&(g * &ab), sb)]
            })),
        )
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(dims(&a), dims(&b));
        let (ab, bb) = (broadcast_to(&a, shape), broadcast_to(&b, shape));
        let value = &ab / &bb;
        let (sa, sb) = (dims(&a), dims(&b));
        self.tape.push(
            value,
            &[self, other],
            Some(Box::new(move |g| {
                let ga = g / &bb;
                let gb = -(g * &ab) / (&bb * &bb);
                vec![unbroadcast(&ga, sa), unbroadcast(&gb, sb)]
            })),
        )
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let value = self.value().mapv(|x| x * c);
        self.tape.push(
            value,
            &[self],
            Some(Box::new(move |g| vec![g.mapv(|x| x * c)])),
        )
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let value = self.value().mapv(|x| x + c);
        self.tape
            .push(value, &[self], Some(Box::new(|g| vec![g.clone()])))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, |x, _| x.signum())
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        self.unary(
            |x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let inner = C * (x + 0.044715 * x * x * x);
                let th = inner.tanh();
                let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner
            },
        )
    }

    /// Clamps into `[lo, hi]`; the gradient is passed through only inside
    /// the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 },
        )
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(
            |x| x.max(0.0),
            |x, _| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn sum(self) -> Var<'t> {
        let v = self.value();
        let shape = dims(&v);
        let value = Mat::from_elem((1, 1), v.sum());
        self.tape.push(
            value,
            &[self],
            Some(Box::new(move |g| vec![Mat::from_elem(shape, g[[0, 0]])])),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let (r, c) = self.shape();
        self.sum().scale(1.0 / (r * c).max(1) as f64)
    }

    /// Column sums as a `1 x cols` row.
    pub fn sum_rows(self) -> Var<'t> {
        let v = self.value();
        let shape = dims(&v);
        let value = v.sum_axis(Axis(0)).insert_axis(Axis(0));
        self.tape.push(
            value,
            &[self],
            Some(Box::new(move |g| vec![broadcast_to(g, shape)])),
        )
    }

    /// Row sums as a `rows x 1` column.
    pub fn sum_cols(self) -> Var<'t> {
        let v = self.value();
        let shape = dims(&v);
        let value = v.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.tape.push(
            value,
            &[self],
            Some(Box::new(move |g| vec![broadcast_to(g, shape)])),
        )
    }

    pub fn mean_cols(self) -> Var<'t> {
        let c = self.shape().1.max(1);
        self.sum_cols().scale(1.0 / c as f64)
    }

    /// Row-wise softmax. Masked-out entries (mask value 0) get probability
    /// zero; a row with nothing allowed is all zeros.
    pub fn softmax_rows(self, mask: Option<Rc<Mat>>) -> Var<'t> {
        let x = self.value();
        if let Some(m) = &mask {
            assert_eq!(dims(m), dims(&x), "softmax mask shape");
        }
        let y = Rc::new(masked_softmax_rows(&x, mask.as_deref()));
        let out = Rc::clone(&y);
        self.tape.push(
            (*y).clone(),
            &[self],
            Some(Box::new(move |g| {
                let gy = g * &*out;
                let dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                vec![&gy - &(&*out * &dot)]
            })),
        )
    }

    /// Row-wise log-softmax (no masking).
    pub fn log_softmax_rows(self) -> Var<'t> {
        let x = self.value();
        let mut y = Mat::zeros(x.raw_dim());
        for (mut yr, xr) in y.rows_mut().into_iter().zip(x.rows()) {
            let max = xr.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + xr.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            yr.assign(&xr.mapv(|v| v - lse));
        }
        let probs = y.mapv(f64::exp);
        self.tape.push(
            y,
            &[self],
            Some(Box::new(move |g| {
                let total = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                vec![g - &(&probs * &total)]
            })),
        )
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(self, idx: Rc<Vec<usize>>) -> Var<'t> {
        let x = self.value();
        let n = x.nrows();
        let mut value = Mat::zeros((idx.len(), x.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < n, "gather_rows index {i} out of range {n}");
            value.row_mut(r).assign(&x.row(i));
        }
        let cols = x.ncols();
        self.tape.push(
            value,
            &[self],
            Some(Box::new(move |g| {
                let mut gx = Mat::zeros((n, cols));
                for (r, &i) in idx.iter().enumerate() {
                    let mut row = gx.row_mut(i);
                    row += &g.row(r);
                }
                vec![gx]
            })),
        )
    }

    /// Adds row `r` of `self` into output row `idx[r]` of an `n`-row result.
    pub fn scatter_add_rows(self, idx: Rc<Vec<usize>>, n: usize) -> Var<'t> {
        let x = self.value();
        assert_eq!(idx.len(), x.nrows(), "scatter index length");
        let mut value = Mat::zeros((n, x.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < n, "scatter index {i} out of range {n}");
            let mut row = value.row_mut(i);
            row += &x.row(r);
        }
        self.tape.push(
            value,
            &[self],
            Some(Box::new(move |g| {
                let mut gx = Mat::zeros((idx.len(), g.ncols()));
                for (r, &i) in idx.iter().enumerate() {
                    gx.row_mut(r).assign(&g.row(i));
                }
                vec![gx]
            })),
        )
    }

    /// Softmax of a `P x 1` score column within groups given by `segment`.
    pub fn segment_softmax(self, segment: Rc<Vec<usize>>, num_segments: usize) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.ncols(), 1, "segment_softmax expects a column");
        assert_eq!(x.nrows(), segment.len());
        let mut max = vec![f64::NEG_INFINITY; num_segments];
        for (p, &s) in segment.iter().enumerate() {
            max[s] = max[s].max(x[[p, 0]]);
        }
        let mut total = vec![0.0; num_segments];
        let mut y = Mat::zeros(x.raw_dim());
        for (p, &s) in segment.iter().enumerate() {
            let e = (x[[p, 0]] - max[s]).exp();
            y[[p, 0]] = e;
            total[s] += e;
        }
        for (p, &s) in segment.iter().enumerate() {
            y[[p, 0]] /= total[s];
        }
        let out = y.clone();
        self.tape.push(
            y,
            &[self],
            Some(Box::new(move |g| {
                let mut dot = vec![0.0; num_segments];
                for (p, &s) in segment.iter().enumerate() {
                    dot[s] += g[[p, 0]] * out[[p, 0]];
                }
                let mut gx = Mat::zeros(out.raw_dim());
                for (p, &s) in segment.iter().enumerate() {
                    gx[[p, 0]] = out[[p, 0]] * (g[[p, 0]] - dot[s]);
                }
                vec![gx]
            })),
        )
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        let x = self.value();
        let shape = dims(&x);
        let value = x.slice(s![.., start..end]).to_owned();
        self.tape.push(
            value,
            &[self],
            Some(Box::new(move |g| {
                let mut gx = Mat::zeros(shape);
                gx.slice_mut(s![.., start..end]).assign(g);
                vec![gx]
            })),
        )
    }

    /// Builds a matrix of the given shape whose entry `k` (row-major) is
    /// element `idx[k]` of `self` (row-major). Used to expand small
    /// parameter tables into dense bias matrices.
    pub fn gather_flat(self, idx: Rc<Vec<usize>>, rows: usize, cols: usize) -> Var<'t> {
        assert_eq!(idx.len(), rows * cols);
        let x = self.value();
        let shape = dims(&x);
        let flat: Vec<f64> = x.iter().copied().collect();
        let value = Mat::from_shape_fn((rows, cols), |(r, c)| flat[idx[r * cols + c]]);
        self.tape.push(
            value,
            &[self],
            Some(Box::new(move |g| {
                let mut acc = vec![0.0; shape.0 * shape.1];
                for (k, &gv) in g.iter().enumerate() {
                    acc[idx[k]] += gv;
                }
                vec![Mat::from_shape_vec(shape, acc).expect("shape preserved")]
            })),
        )
    }

    /// Standardizes each row to zero mean and unit variance (no affine part).
    pub fn normalize_rows(self, eps: f64) -> Var<'t> {
        let x = self.value();
        let c = x.ncols() as f64;
        let mut y = Mat::zeros(x.raw_dim());
        let mut inv_std = Vec::with_capacity(x.nrows());
        for (mut yr, xr) in y.rows_mut().into_iter().zip(x.rows()) {
            let mean = xr.sum() / c;
            let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c;
            let inv = 1.0 / (var + eps).sqrt();
            yr.assign(&xr.mapv(|v| (v - mean) * inv));
            inv_std.push(inv);
        }
        let out = y.clone();
        self.tape.push(
            y,
            &[self],
            Some(Box::new(move |g| {
                let mut gx = Mat::zeros(g.raw_dim());
                for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                    let gr = g.row(r);
                    let yr = out.row(r);
                    let gm = gr.sum() / c;
                    let gym = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / c;
                    for k in 0..row.len() {
                        row[k] = inv_std[r] * (gr[k] - gm - yr[k] * gym);
                    }
                }
                vec![gx]
            })),
        )
    }

    /// `sparse * self` for a constant sparse left operand.
    pub fn left_sparse_mul(self, sparse: Rc<Csr>) -> Var<'t> {
        let x = self.value();
        assert_eq!(sparse.cols, x.nrows(), "sparse product shape");
        let mut value = Mat::zeros((sparse.rows, x.ncols()));
        for r in 0..sparse.rows {
            for k in sparse.indptr[r]..sparse.indptr[r + 1] {
                let w = sparse.data[k];
                let mut row = value.row_mut(r);
                row.scaled_add(w, &x.row(sparse.indices[k]));
            }
        }
        let shape = dims(&x);
        self.tape.push(
            value,
            &[self],
            Some(Box::new(move |g| {
                let mut gx = Mat::zeros(shape);
                for r in 0..sparse.rows {
                    for k in sparse.indptr[r]..sparse.indptr[r + 1] {
                        let mut row = gx.row_mut(sparse.indices[k]);
                        row.scaled_add(sparse.data[k], &g.row(r));
                    }
                }
                vec![gx]
            })),
        )
    }
}

/// Concatenates variables with equal row counts side by side.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty());
    let tape = parts[0].tape;
    let values: Vec<Rc<Mat>> = parts.iter().map(|p| p.value()).collect();
    let rows = values[0].nrows();
    let widths: Vec<usize> = values.iter().map(|v| v.ncols()).collect();
    let total: usize = widths.iter().sum();
    let mut value = Mat::zeros((rows, total));
    let mut off = 0;
    for v in &values {
        assert_eq!(v.nrows(), rows, "concat_cols row mismatch");
        value.slice_mut(s![.., off..off + v.ncols()]).assign(v);
        off += v.ncols();
    }
    tape.push(
        value,
        parts,
        Some(Box::new(move |g| {
            let mut off = 0;
            widths
                .iter()
                .map(|&w| {
                    let part = g.slice(s![.., off..off + w]).to_owned();
                    off += w;
                    part
                })
                .collect()
        })),
    )
}

/// Stacks variables with equal column counts vertically.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty());
    let tape = parts[0].tape;
    let values: Vec<Rc<Mat>> = parts.iter().map(|p| p.value()).collect();
    let cols = values[0].ncols();
    let heights: Vec<usize> = values.iter().map(|v| v.nrows()).collect();
    let total: usize = heights.iter().sum();
    let mut value = Mat::zeros((total, cols));
    let mut off = 0;
    for v in &values {
        assert_eq!(v.ncols(), cols, "concat_rows column mismatch");
        value.slice_mut(s![off..off + v.nrows(), ..]).assign(v);
        off += v.nrows();
    }
    tape.push(
        value,
        parts,
        Some(Box::new(move |g| {
            let mut off = 0;
            heights
                .iter()
                .map(|&h| {
                    let part = g.slice(s![off..off + h, ..]).to_owned();
                    off += h;
                    part
                })
                .collect()
        })),
    )
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
