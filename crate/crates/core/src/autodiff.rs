//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every output element of a product is accumulated over the shared
//! dimension in ascending order, so a row of a result depends only on the
//! corresponding input row and never on how many other rows were computed
//! alongside it.

use std::rc::Rc;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { rows, cols, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// `a * b`.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    let mut out = Mat::zeros(a.rows, b.cols);
    let n = b.cols;
    for i in 0..a.rows {
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in orow.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    out
}

/// `a * b^T`.
pub fn matmul_nt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dimension");
    matmul(a, &b.transpose())
}

/// `a^T * b`.
fn matmul_tn(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows, b.rows, "matmul_tn inner dimension");
    matmul(&a.transpose(), b)
}

/// Row-major boolean mask; `true` marks an entry that may be attended.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub allow: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allow = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                allow.push(f(r, c));
            }
        }
        Self { rows, cols, allow }
    }

    pub fn causal(n: usize) -> Self {
        Self::new(n, n, |r, c| c <= r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Rows(Var, Vec<usize>),
    VStack(Vec<Var>),
    HConcat(Vec<Var>),
    Cols(Var, usize),
}

enum Value {
    Owned(Mat),
    Param(usize),
}

struct Node {
    value: Value,
    op: Op,
    /// Some trainable parameter feeds this node.
    needs_grad: bool,
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => Vec::new(),
            Op::MatMul(a, b) | Op::MatMulNt(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Sigmoid(a) | Op::Gelu(a) | Op::Softmax(a) | Op::Rows(a, _) | Op::Cols(a, _) => {
                vec![*a]
            }
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::VStack(parts) | Op::HConcat(parts) => parts.clone(),
        }
    }
}

/// Records a forward computation; parameters are borrowed, not copied.
pub struct Tape<'p> {
    params: &'p [Mat],
    /// Parameters that receive no gradient; backward skips everything that
    /// depends on them alone.
    frozen: Option<&'p [bool]>,
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Mat]) -> Self {
        Self {
            params,
            frozen: None,
            nodes: Vec::new(),
        }
    }

    /// A tape on which `frozen[i]` parameters get no gradient.
    pub fn with_frozen(params: &'p [Mat], frozen: &'p [bool]) -> Self {
        assert_eq!(params.len(), frozen.len(), "one frozen flag per parameter");
        Self {
            params,
            frozen: Some(frozen),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(i) => &self.params[*i],
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is reported for it.
    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn param(&mut self, index: usize) -> Var {
        assert!(index < self.params.len(), "parameter index {index} out of range");
        let needs_grad = self.frozen.map_or(true, |f| !f[index]);
        self.nodes.push(Node {
            value: Value::Param(index),
            op: Op::Param(index),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_nt(self.value(a), self.value(b));
        self.push(v, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shapes");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let v = Mat::from_vec(x.rows, x.cols, data);
        self.push(v, Op::Add(a, b))
    }

    /// Adds the `1 x n` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let (x, b) = (self.value(a), self.value(r));
        assert_eq!((1, x.cols), b.shape(), "add_row shapes");
        let mut v = x.clone();
        for row in v.data.chunks_mut(x.cols) {
            for (o, bj) in row.iter_mut().zip(&b.data) {
                *o += bj;
            }
        }
        self.push(v, Op::AddRow(a, r))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shapes");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let v = Mat::from_vec(x.rows, x.cols, data);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let v = Mat::from_vec(x.rows, x.cols, x.data.iter().map(|p| p * s).collect());
        self.push(v, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Mat::from_vec(x.rows, x.cols, x.data.iter().map(|&p| sigmoid(p)).collect());
        self.push(v, Op::Sigmoid(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Mat::from_vec(x.rows, x.cols, x.data.iter().map(|&p| gelu(p)).collect());
        self.push(v, Op::Gelu(a))
    }

    /// Row-wise layer normalisation with `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xm = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let n = xm.cols;
        assert_eq!((1, n), g.shape(), "layer_norm gain shape");
        assert_eq!((1, n), b.shape(), "layer_norm bias shape");
        let mut xhat = Mat::zeros(xm.rows, n);
        let mut out = Mat::zeros(xm.rows, n);
        let mut inv_std = Vec::with_capacity(xm.rows);
        for r in 0..xm.rows {
            let row = xm.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat.data[r * n + c] = h;
                out.data[r * n + c] = h * g.data[c] + b.data[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Row-wise softmax over allowed entries; disallowed entries are 0 and a
    /// row with nothing allowed is all zeros.
    pub fn softmax_masked(&mut self, a: Var, mask: Rc<Mask>) -> Var {
        let x = self.value(a);
        assert_eq!((mask.rows, mask.cols), x.shape(), "softmax mask shape");
        let mut v = Mat::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let allow = &mask.allow[r * x.cols..(r + 1) * x.cols];
            let row = x.row(r);
            let mut max = f64::NEG_INFINITY;
            for (val, &ok) in row.iter().zip(allow) {
                if ok && *val > max {
                    max = *val;
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let out = &mut v.data[r * x.cols..(r + 1) * x.cols];
            let mut sum = 0.0;
            for c in 0..x.cols {
                if allow[c] {
                    let e = (row[c] - max).exp();
                    out[c] = e;
                    sum += e;
                }
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        self.push(v, Op::Softmax(a))
    }

    /// Gathers rows of `a` by index; indices may repeat.
    pub fn rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * x.cols);
        for &i in idx {
            data.extend_from_slice(x.row(i));
        }
        let v = Mat::from_vec(idx.len(), x.cols, data);
        self.push(v, Op::Rows(a, idx.to_vec()))
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "vstack widths");
            rows += m.rows;
            data.extend_from_slice(&m.data);
        }
        let v = Mat::from_vec(rows, cols, data);
        self.push(v, Op::VStack(parts.to_vec()))
    }

    pub fn hconcat(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let m = self.value(p);
                assert_eq!(m.rows, rows, "hconcat heights");
                v.data[r * cols + off..r * cols + off + m.cols].copy_from_slice(m.row(r));
                off += m.cols;
            }
        }
        self.push(v, Op::HConcat(parts.to_vec()))
    }

    /// Columns `start..start + len` of `a`.
    pub fn cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols, "column slice out of range");
        let mut v = Mat::zeros(x.rows, len);
        for r in 0..x.rows {
            v.data[r * len..(r + 1) * len].copy_from_slice(&x.row(r)[start..start + len]);
        }
        self.push(v, Op::Cols(a, start))
    }

    /// Propagates the given output gradients back through the tape and
    /// returns one gradient slot per parameter (`None` if unused).
    pub fn backward(&self, seeds: &[(Var, Mat)]) -> Vec<Option<Mat>> {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "seed gradient shape");
            self.accumulate(&mut grads, *v, g.clone());
        }
        let mut out: Vec<Option<Mat>> = (0..self.params.len()).map(|_| None).collect();
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param(p) => match &mut out[*p] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        self.accumulate(&mut grads, *a, matmul_nt(&g, self.value(*b)));
                    }
                    if self.nodes[b.0].needs_grad {
                        self.accumulate(&mut grads, *b, matmul_tn(self.value(*a), &g));
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        self.accumulate(&mut grads, *a, matmul(&g, self.value(*b)));
                    }
                    if self.nodes[b.0].needs_grad {
                        self.accumulate(&mut grads, *b, matmul_tn(&g, self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *b, g.clone());
                    self.accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, r) => {
                    let mut gr = Mat::zeros(1, g.cols);
                    for row in g.data.chunks(g.cols) {
                        for (o, v) in gr.data.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.accumulate(&mut grads, *r, gr);
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let ga = g.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
                    let gb = g.data.iter().zip(&x.data).map(|(p, q)| p * q).collect();
                    self.accumulate(&mut grads, *a, Mat::from_vec(g.rows, g.cols, ga));
                    self.accumulate(&mut grads, *b, Mat::from_vec(g.rows, g.cols, gb));
                }
                Op::Scale(a, s) => {
                    let ga = g.data.iter().map(|p| p * s).collect();
                    self.accumulate(&mut grads, *a, Mat::from_vec(g.rows, g.cols, ga));
                }
                Op::Sigmoid(a) => {
                    let y = self.value(Var(i));
                    let ga = g.data.iter().zip(&y.data).map(|(p, s)| p * s * (1.0 - s)).collect();
                    self.accumulate(&mut grads, *a, Mat::from_vec(g.rows, g.cols, ga));
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let ga = g.data.iter().zip(&x.data).map(|(p, &v)| p * gelu_grad(v)).collect();
                    self.accumulate(&mut grads, *a, Mat::from_vec(g.rows, g.cols, ga));
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gm = self.value(*gain);
                    let n = g.cols;
                    let mut gx = Mat::zeros(g.rows, n);
                    let mut gg = Mat::zeros(1, n);
                    let mut gb = Mat::zeros(1, n);
                    for r in 0..g.rows {
                        let grow = g.row(r);
                        let hrow = xhat.row(r);
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..n {
                            let dh = grow[c] * gm.data[c];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[c];
                            gg.data[c] += grow[c] * hrow[c];
                            gb.data[c] += grow[c];
                        }
                        mean_dh /= n as f64;
                        mean_dh_h /= n as f64;
                        for c in 0..n {
                            let dh = grow[c] * gm.data[c];
                            gx.data[r * n + c] = inv_std[r] * (dh - mean_dh - hrow[c] * mean_dh_h);
                        }
                    }
                    self.accumulate(&mut grads, *x, gx);
                    self.accumulate(&mut grads, *gain, gg);
                    self.accumulate(&mut grads, *bias, gb);
                }
                Op::Softmax(a) => {
                    let y = self.value(Var(i));
                    let mut ga = Mat::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for c in 0..g.cols {
                            ga.data[r * g.cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Rows(a, idx) => {
                    let x = self.value(*a);
                    let mut ga = Mat::zeros(x.rows, x.cols);
                    for (k, &src) in idx.iter().enumerate() {
                        for (o, v) in ga.data[src * x.cols..(src + 1) * x.cols].iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::VStack(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let m = self.value(p);
                        let part = g.data[off * g.cols..(off + m.rows) * g.cols].to_vec();
                        off += m.rows;
                        self.accumulate(&mut grads, p, Mat::from_vec(m.rows, m.cols, part));
                    }
                }
                Op::HConcat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let m = self.value(p);
                        let mut gp = Mat::zeros(m.rows, m.cols);
                        for r in 0..m.rows {
                            gp.data[r * m.cols..(r + 1) * m.cols]
                                .copy_from_slice(&g.row(r)[off..off + m.cols]);
                        }
                        off += m.cols;
                        self.accumulate(&mut grads, p, gp);
                    }
                }
                Op::Cols(a, start) => {
                    let x = self.value(*a);
                    let mut ga = Mat::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        ga.data[r * x.cols + start..r * x.cols + start + g.cols].copy_from_slice(g.row(r));
                    }
                    self.accumulate(&mut grads, *a, ga);
                }
            }
        }
        out
    }
}

impl Tape<'_> {
    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }
}
