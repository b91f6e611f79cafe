//! Tape-based reverse-mode differentiation over 2-D `f64` arrays.
//!
//! A [`Graph`] records every operation applied to its variables. Calling
//! [`Graph::backward`] on a scalar node fills gradients for every node that
//! depends on a parameter or on a leaf created with [`Graph::variable`].
//!
//! Binary element-wise operations broadcast rows of length one and columns
//! of length one, as in numpy.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::score::{level_from_z, level_from_z_derivative, normal_cdf, normal_pdf};

pub type Tensor = Array2<f64>;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Exp(Var),
    Ln(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Square(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    SumRows(Var),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    StackTokens(Vec<Var>),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Tensor },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Tensor },
    Attention { q: Var, k: Var, v: Var, batch: usize, tokens: usize, heads: usize, probs: Vec<f64> },
    Im2Col { x: Var, tokens: usize },
    GssmLevel(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch normalisation.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Tensor,
    pub var: Tensor,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn reduce_to(grad: Tensor, shape: (usize, usize)) -> Tensor {
    let mut g = grad;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        assert!(x == y || x == 1 || y == 1, "incompatible shapes {a:?} and {b:?}");
        x.max(y)
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let shape = broadcast_shape(a.dim(), b.dim());
    let av = a.broadcast(shape).expect("broadcast");
    let bv = b.broadcast(shape).expect("broadcast");
    Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
}

fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_normalize(x: &Tensor) -> (Tensor, Tensor) {
    let d = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / d;
    let mut xhat = x.clone();
    let mut inv_std = Tensor::zeros((x.nrows(), 1));
    for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
        let m = mean[i];
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        row.mapv_inplace(|v| (v - m) * is);
        inv_std[[i, 0]] = is;
    }
    (xhat, inv_std)
}

/// Backward of `xhat = (x − mean) · inv_std` along rows, given `dxhat`.
fn row_normalize_backward(dxhat: &Tensor, xhat: &Tensor, inv_std: &Tensor) -> Tensor {
    let d = xhat.ncols() as f64;
    let mut dx = Tensor::zeros(xhat.dim());
    Zip::from(dx.rows_mut())
        .and(dxhat.rows())
        .and(xhat.rows())
        .and(inv_std.rows())
        .for_each(|mut out, g, xh, is| {
            let mean_g = g.sum() / d;
            let mean_gx = g.dot(&xh) / d;
            let is = is[0];
            Zip::from(&mut out).and(&g).and(&xh).for_each(|o, &gv, &xv| {
                *o = is * (gv - mean_g - xv * mean_gx);
            });
        });
    dx
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is retained (see [`Graph::grad`]).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf bound to entry `index` of a parameter store.
    pub fn param(&mut self, index: usize, value: Tensor) -> Var {
        self.push(value, Op::Param(index), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = zip_broadcast(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = zip_broadcast(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = zip_broadcast(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = zip_broadcast(self.value(a), self.value(b), |x, y| x / y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Div(a, b), rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).mapv(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), crate::lognormal::softplus)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    /// Element-wise clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    /// GSSM level applied element-wise to standardised log-spacings.
    pub fn gssm_level(&mut self, z: Var) -> Var {
        self.unary(z, Op::GssmLevel(z), level_from_z)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Tensor::from_elem((1, 1), v.sum() / v.len() as f64);
        let rg = self.rg(&[a]);
        self.push(value, Op::MeanAll(a), rg)
    }

    /// Sums each row across its columns, giving `[rows, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(&[a]);
        self.push(value, Op::SumCols(a), rg)
    }

    /// Sums each column across its rows, giving `[1, cols]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let rg = self.rg(&[a]);
        self.push(value, Op::SumRows(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(&[a]);
        self.push(value, Op::SliceCols(a, start, end), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        let rg = self.rg(&[a]);
        self.push(value, Op::SliceRows(a, start, end), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        let rg = self.rg(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a);
        let value = Tensor::from_shape_vec((rows, cols), v.iter().copied().collect()).expect("element count");
        let rg = self.rg(&[a]);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Interleaves `T` token matrices of shape `[B, d]` into `[B·T, d]`,
    /// with row `b·T + t` taken from token `t`.
    pub fn stack_tokens(&mut self, tokens: &[Var]) -> Var {
        let t = tokens.len();
        let (b, d) = self.shape(tokens[0]);
        let mut value = Tensor::zeros((b * t, d));
        for (k, tok) in tokens.iter().enumerate() {
            let src = self.value(*tok);
            assert_eq!(src.dim(), (b, d), "token shapes differ");
            value.slice_mut(s![k..;t, ..]).assign(src);
        }
        let rg = self.rg(tokens);
        self.push(value, Op::StackTokens(tokens.to_vec()), rg)
    }

    /// Normalises each row, then applies `gamma`, `beta` (both `[1, d]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (xhat, inv_std) = row_normalize(self.value(x));
        let value = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(&[x, gamma, beta]);
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg)
    }

    /// Training-mode batch normalisation over rows; also returns the batch
    /// mean and (biased) variance per column.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, BatchStats) {
        let xt = self.value(x).t().to_owned();
        let n = xt.ncols() as f64;
        let mean = xt.sum_axis(Axis(1)) / n;
        let (xhat_t, inv_std) = row_normalize(&xt);
        let var = inv_std.mapv(|is| 1.0 / (is * is) - NORM_EPS);
        let xhat = xhat_t.t().to_owned();
        let value = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(&[x, gamma, beta]);
        let stats = BatchStats {
            mean: mean.insert_axis(Axis(0)),
            var: var.t().to_owned(),
        };
        let v = self.push(value, Op::BatchNorm { x, gamma, beta, xhat: xhat_t, inv_std }, rg);
        (v, stats)
    }

    /// Multi-head scaled dot-product self-attention over `batch` groups of
    /// `tokens` consecutive rows. `q`, `k`, `v` are `[batch·tokens, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, tokens: usize, heads: usize) -> Var {
        let (rows, d) = self.shape(q);
        assert_eq!(rows, batch * tokens);
        assert_eq!(d % heads, 0, "repr_dim must be divisible by heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (qs, ks, vs) = (
            qv.as_slice().expect("standard layout"),
            kv.as_slice().expect("standard layout"),
            vv.as_slice().expect("standard layout"),
        );
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; batch * heads * tokens * tokens];
        let mut row = vec![0.0; tokens];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                let pbase = (b * heads + h) * tokens * tokens;
                for i in 0..tokens {
                    let qi = &qs[(b * tokens + i) * d + off..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..tokens {
                        let kj = &ks[(b * tokens + j) * d + off..][..dh];
                        let dotv: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        row[j] = dotv;
                        max = max.max(dotv);
                    }
                    let mut total = 0.0;
                    for r in row.iter_mut() {
                        *r = (*r - max).exp();
                        total += *r;
                    }
                    let o = &mut out[(b * tokens + i) * d + off..][..dh];
                    for j in 0..tokens {
                        let p = row[j] / total;
                        probs[pbase + i * tokens + j] = p;
                        let vj = &vs[(b * tokens + j) * d + off..][..dh];
                        for (oc, vc) in o.iter_mut().zip(vj) {
                            *oc += p * vc;
                        }
                    }
                }
            }
        }
        let value = Tensor::from_shape_vec((rows, d), out).expect("shape");
        let rg = self.rg(&[q, k, v]);
        self.push(value, Op::Attention { q, k, v, batch, tokens, heads, probs }, rg)
    }

    /// Kernel-3 im2col along the token axis with zero padding:
    /// row `b·T + t` becomes `[x_{t−1}, x_t, x_{t+1}]`.
    pub fn im2col3(&mut self, x: Var, tokens: usize) -> Var {
        let xv = self.value(x);
        let (rows, d) = xv.dim();
        let mut value = Tensor::zeros((rows, 3 * d));
        for r in 0..rows {
            let t = r % tokens;
            if t > 0 {
                value.slice_mut(s![r, 0..d]).assign(&xv.row(r - 1));
            }
            value.slice_mut(s![r, d..2 * d]).assign(&xv.row(r));
            if t + 1 < tokens {
                value.slice_mut(s![r, 2 * d..]).assign(&xv.row(r + 1));
            }
        }
        let rg = self.rg(&[x]);
        self.push(value, Op::Im2Col { x, tokens }, rg)
    }

    /// `x · w + b` for a dense layer.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add(xw, b)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of parameter leaves as `(store index, gradient)`.
    pub fn param_grads(&self) -> Vec<(usize, &Tensor)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(p) => self.grads[i].as_ref().map(|g| (p, g)),
                _ => None,
            })
            .collect()
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => *existing += &g,
            slot => *slot = Some(g),
        }
    }

    /// Back-propagates from the scalar node `root`.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(Tensor::ones((1, 1)));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_op(i, &op, &g);
            self.nodes[i].op = op;
            self.grads[i] = Some(g);
        }
    }

    fn backward_op(&mut self, i: usize, op: &Op, g: &Tensor) {
        let val = |s: &Self, v: Var| s.nodes[v.0].value.clone();
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let ga = g.dot(&self.nodes[b.0].value.t());
                    self.accumulate(*a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let gb = self.nodes[a.0].value.t().dot(g);
                    self.accumulate(*b, gb);
                }
            }
            Op::Add(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                self.accumulate(*a, reduce_to(g.clone(), sa));
                self.accumulate(*b, reduce_to(g.clone(), sb));
            }
            Op::Sub(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                self.accumulate(*a, reduce_to(g.clone(), sa));
                self.accumulate(*b, reduce_to(-g, sb));
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                if self.nodes[a.0].requires_grad {
                    let ga = zip_broadcast(g, self.value(*b), |x, y| x * y);
                    self.accumulate(*a, reduce_to(ga, sa));
                }
                if self.nodes[b.0].requires_grad {
                    let gb = zip_broadcast(g, self.value(*a), |x, y| x * y);
                    self.accumulate(*b, reduce_to(gb, sb));
                }
            }
            Op::Div(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                if self.nodes[a.0].requires_grad {
                    let ga = zip_broadcast(g, self.value(*b), |x, y| x / y);
                    self.accumulate(*a, reduce_to(ga, sa));
                }
                if self.nodes[b.0].requires_grad {
                    // d(a/b)/db = −out / b
                    let out = &self.nodes[i].value;
                    let gout = g * out;
                    let gb = zip_broadcast(&gout, self.value(*b), |x, y| -x / y);
                    self.accumulate(*b, reduce_to(gb, sb));
                }
            }
            Op::Exp(a) => {
                let ga = g * &self.nodes[i].value;
                self.accumulate(*a, ga);
            }
            Op::Ln(a) => {
                let ga = g / &self.nodes[a.0].value;
                self.accumulate(*a, ga);
            }
            Op::Gelu(a) => {
                let ga = Zip::from(g).and(&self.nodes[a.0].value).map_collect(|&g, &x| g * gelu_grad(x));
                self.accumulate(*a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = Zip::from(g).and(&self.nodes[i].value).map_collect(|&g, &y| g * y * (1.0 - y));
                self.accumulate(*a, ga);
            }
            Op::Tanh(a) => {
                let ga = Zip::from(g).and(&self.nodes[i].value).map_collect(|&g, &y| g * (1.0 - y * y));
                self.accumulate(*a, ga);
            }
            Op::Softplus(a) => {
                let ga = Zip::from(g).and(&self.nodes[a.0].value).map_collect(|&g, &x| g * sigmoid(x));
                self.accumulate(*a, ga);
            }
            Op::Square(a) => {
                let ga = Zip::from(g).and(&self.nodes[a.0].value).map_collect(|&g, &x| 2.0 * g * x);
                self.accumulate(*a, ga);
            }
            Op::Sqrt(a) => {
                let ga = Zip::from(g).and(&self.nodes[i].value).map_collect(|&g, &y| 0.5 * g / y);
                self.accumulate(*a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let ga = Zip::from(g)
                    .and(&self.nodes[a.0].value)
                    .map_collect(|&g, &x| if x >= lo && x <= hi { g } else { 0.0 });
                self.accumulate(*a, ga);
            }
            Op::Neg(a) => self.accumulate(*a, -g),
            Op::Scale(a, c) => self.accumulate(*a, g * *c),
            Op::AddScalar(a) => self.accumulate(*a, g.clone()),
            Op::GssmLevel(a) => {
                let ga = Zip::from(g)
                    .and(&self.nodes[a.0].value)
                    .map_collect(|&g, &z| g * level_from_z_derivative(z));
                self.accumulate(*a, ga);
            }
            Op::SumAll(a) => {
                let ga = Tensor::from_elem(self.shape(*a), g[[0, 0]]);
                self.accumulate(*a, ga);
            }
            Op::MeanAll(a) => {
                let shape = self.shape(*a);
                let ga = Tensor::from_elem(shape, g[[0, 0]] / (shape.0 * shape.1) as f64);
                self.accumulate(*a, ga);
            }
            Op::SumCols(a) => {
                let ga = g.broadcast(self.shape(*a)).expect("broadcast").to_owned();
                self.accumulate(*a, ga);
            }
            Op::SumRows(a) => {
                let ga = g.broadcast(self.shape(*a)).expect("broadcast").to_owned();
                self.accumulate(*a, ga);
            }
            Op::SliceCols(a, start, end) => {
                let mut ga = Tensor::zeros(self.shape(*a));
                ga.slice_mut(s![.., *start..*end]).assign(g);
                self.accumulate(*a, ga);
            }
            Op::SliceRows(a, start, end) => {
                let mut ga = Tensor::zeros(self.shape(*a));
                ga.slice_mut(s![*start..*end, ..]).assign(g);
                self.accumulate(*a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    let gp = g.slice(s![.., offset..offset + w]).to_owned();
                    offset += w;
                    self.accumulate(*p, gp);
                }
            }
            Op::Reshape(a) => {
                let ga = Tensor::from_shape_vec(self.shape(*a), g.iter().copied().collect()).expect("shape");
                self.accumulate(*a, ga);
            }
            Op::StackTokens(tokens) => {
                let t = tokens.len();
                for (k, tok) in tokens.iter().enumerate() {
                    if self.nodes[tok.0].requires_grad {
                        let gt = g.slice(s![k..;t, ..]).to_owned();
                        self.accumulate(*tok, gt);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gam = val(self, *gamma);
                if self.nodes[x.0].requires_grad {
                    let dxhat = g * &gam;
                    self.accumulate(*x, row_normalize_backward(&dxhat, xhat, inv_std));
                }
                let dgamma = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                let dbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.accumulate(*gamma, dgamma);
                self.accumulate(*beta, dbeta);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                // `xhat` and `inv_std` are stored transposed (channels as rows).
                let gam = val(self, *gamma);
                let xhat_n = xhat.t();
                if self.nodes[x.0].requires_grad {
                    let dxhat_t = (g * &gam).t().to_owned();
                    let dx_t = row_normalize_backward(&dxhat_t, xhat, inv_std);
                    self.accumulate(*x, dx_t.t().to_owned());
                }
                let dgamma = (g * &xhat_n).sum_axis(Axis(0)).insert_axis(Axis(0));
                let dbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.accumulate(*gamma, dgamma);
                self.accumulate(*beta, dbeta);
            }
            Op::Attention { q, k, v, batch, tokens, heads, probs } => {
                let (batch, tokens, heads) = (*batch, *tokens, *heads);
                let (rows, d) = self.shape(*q);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let qs = self.nodes[q.0].value.as_slice().expect("standard layout");
                let ks = self.nodes[k.0].value.as_slice().expect("standard layout");
                let vs = self.nodes[v.0].value.as_slice().expect("standard layout");
                let gs = g.as_slice().expect("standard layout");
                let mut dq = vec![0.0; rows * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                let mut dp = vec![0.0; tokens];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = h * dh;
                        let pbase = (b * heads + h) * tokens * tokens;
                        for i in 0..tokens {
                            let gi = &gs[(b * tokens + i) * d + off..][..dh];
                            let prow = &probs[pbase + i * tokens..][..tokens];
                            let mut weighted = 0.0;
                            for j in 0..tokens {
                                let vj = &vs[(b * tokens + j) * d + off..][..dh];
                                let dpj: f64 = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                                dp[j] = dpj;
                                weighted += dpj * prow[j];
                                let dvj = &mut dv[(b * tokens + j) * d + off..][..dh];
                                for (o, gc) in dvj.iter_mut().zip(gi) {
                                    *o += prow[j] * gc;
                                }
                            }
                            for j in 0..tokens {
                                let ds = prow[j] * (dp[j] - weighted) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &ks[(b * tokens + j) * d + off..][..dh];
                                let dqi = &mut dq[(b * tokens + i) * d + off..][..dh];
                                for (o, kc) in dqi.iter_mut().zip(kj) {
                                    *o += ds * kc;
                                }
                                let qi = &qs[(b * tokens + i) * d + off..][..dh];
                                let dkj = &mut dk[(b * tokens + j) * d + off..][..dh];
                                for (o, qc) in dkj.iter_mut().zip(qi) {
                                    *o += ds * qc;
                                }
                            }
                        }
                    }
                }
                let shape = (rows, d);
                self.accumulate(*q, Tensor::from_shape_vec(shape, dq).expect("shape"));
                self.accumulate(*k, Tensor::from_shape_vec(shape, dk).expect("shape"));
                self.accumulate(*v, Tensor::from_shape_vec(shape, dv).expect("shape"));
            }
            Op::Im2Col { x, tokens } => {
                let (rows, d) = self.shape(*x);
                let mut gx = Tensor::zeros((rows, d));
                for r in 0..rows {
                    let t = r % tokens;
                    let mut row = gx.row_mut(r);
                    row += &g.slice(s![r, d..2 * d]);
                    if t + 1 < *tokens {
                        row += &g.slice(s![r + 1, 0..d]);
                    }
                    if t > 0 {
                        row += &g.slice(s![r - 1, 2 * d..]);
                    }
                }
                self.accumulate(*x, gx);
            }
        }
    }
}
