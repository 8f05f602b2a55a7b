use super::conv::{col2im, from_channel_major, im2col, to_channel_major, TAPS};
use super::real::gemm;
use super::{Real, Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddBias(usize, usize),
    MulBias(usize, usize),
    Conv2d {
        input: usize,
        kernel: usize,
        bias: usize,
        stride: usize,
        cols: Vec<T>,
    },
    ConvTranspose2d {
        input: usize,
        kernel: usize,
        bias: usize,
    },
    Gelu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Softmax(usize),
    Normalize {
        input: usize,
        inv_std: Vec<T>,
    },
    Mse(usize, usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Transpose(usize),
    Index {
        input: usize,
        index: usize,
    },
    Stack(Vec<usize>),
    SliceCols {
        input: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::MulBias(a, b)
            | Op::Mse(a, b) => vec![*a, *b],
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            }
            | Op::ConvTranspose2d {
                input,
                kernel,
                bias,
            } => vec![*input, *kernel, *bias],
            Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Softmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a)
            | Op::Transpose(a) => vec![*a],
            Op::Normalize { input, .. }
            | Op::Index { input, .. }
            | Op::SliceCols { input, .. } => vec![*input],
            Op::Stack(v) | Op::ConcatCols(v) => v.clone(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Wengert list recording every forward op for one reverse sweep.
///
/// Single-threaded; build one tape per training step and drop or
/// [`clear`](Tape::clear) it afterwards.
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_cdf<T: Real>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_pdf<T: Real>(x: T) -> T {
    T::lit(0.398_942_280_401_432_7) * (-T::lit(0.5) * x * x).exp()
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn dim_err(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Dimension {
        op,
        msg: msg.into(),
    }
}

/// Gradient slot for `idx`, zero-initialised on first touch.
fn slot<T: Real>(grads: &mut [Option<Vec<T>>], idx: usize, len: usize) -> &mut Vec<T> {
    grads[idx].get_or_insert_with(|| vec![T::zero(); len])
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded value and gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Tape::backward) loss with respect to a
    /// leaf. `None` for leaves the loss does not reach or that were created
    /// without `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(())
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.val(a).data(), false, self.val(b).data(), false, T::zero(), &mut out);
        self.push("matmul", Tensor::new([m, n], out)?, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(dim_err("transpose", format!("expected a matrix, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.val(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", Tensor::new([c, r], out)?, Op::Transpose(a.0))
    }

    /// Affine map over the last dimension: `x · w + b` with `w[d_in,d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || last_dim(&xs) != ws[0] || xs.is_empty() {
            return Err(mismatch("linear", &xs, &ws));
        }
        let rows = self.val(x).len() / ws[0];
        let flat = self.reshape(x, [rows, ws[0]])?;
        let y = self.matmul(flat, w)?;
        let y = self.add_bias(y, b)?;
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = ws[1];
        self.reshape(y, out_shape)
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.val(a), self.val(b));
        Tensor::new(
            va.shape().to_vec(),
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let t = self.val(a).map(|x| x * c);
        self.push("scale", t, Op::Scale(a.0, c))
    }

    fn check_bias(&self, op: &'static str, x: Var, b: Var) -> Result<usize> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        let d = last_dim(xs);
        if bs.len() != 1 || bs[0] != d || xs.is_empty() {
            return Err(mismatch(op, xs, bs));
        }
        Ok(d)
    }

    /// `x + b` with `b` broadcast along the last dimension.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.check_bias("add_bias", x, b)?;
        let bias = self.val(b).data();
        let mut t = self.val(x).clone();
        for row in t.data_mut().chunks_mut(d) {
            row.iter_mut().zip(bias).for_each(|(v, &c)| *v += c);
        }
        self.push("add_bias", t, Op::AddBias(x.0, b.0))
    }

    /// `x ⊙ g` with `g` broadcast along the last dimension.
    pub fn mul_bias(&mut self, x: Var, g: Var) -> Result<Var> {
        let d = self.check_bias("mul_bias", x, g)?;
        let gain = self.val(g).data();
        let mut t = self.val(x).clone();
        for row in t.data_mut().chunks_mut(d) {
            row.iter_mut().zip(gain).for_each(|(v, &c)| *v *= c);
        }
        self.push("mul_bias", t, Op::MulBias(x.0, g.0))
    }

    /// `x · Φ(x)` with the exact Gaussian CDF.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x).map(|v| v * gelu_cdf(v));
        self.push("gelu", t, Op::Gelu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push("sigmoid", t, Op::Sigmoid(x.0))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x).map(|v| v.tanh());
        self.push("tanh", t, Op::Tanh(x.0))
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let d = last_dim(self.shape(x));
        let mut t = self.val(x).clone();
        for row in t.data_mut().chunks_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / total);
        }
        self.push("softmax", t, Op::Softmax(x.0))
    }

    /// Zero-mean, unit-variance rows over the last dimension (no affine).
    pub fn normalize_lastdim(&mut self, x: Var, eps: T) -> Result<Var> {
        let d = last_dim(self.shape(x));
        let n = T::lit(d as f64);
        let mut t = self.val(x).clone();
        let mut inv_std = Vec::with_capacity(t.len() / d);
        for row in t.data_mut().chunks_mut(d) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        self.push("layer_norm", t, Op::Normalize { input: x.0, inv_std })
    }

    pub fn layer_norm_lastdim(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let y = self.normalize_lastdim(x, eps)?;
        let y = self.mul_bias(y, gain)?;
        self.add_bias(y, bias)
    }

    // ── reductions ──────────────────────────────────────────────────────

    /// Mean squared difference, as a scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let (p, q) = (self.val(pred), self.val(target));
        let n = T::lit(p.len() as f64);
        let total: T = p.data().iter().zip(q.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        self.push("mse", Tensor::scalar(total / n), Op::Mse(pred.0, target.0))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.val(x);
        let s = v.sum() / T::lit(v.len() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(x.0))
    }

    // ── layout ──────────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.val(x).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x.0))
    }

    /// `x[index]` along the leading dimension.
    pub fn index(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.val(x).index(index)?;
        self.push("index", t, Op::Index { input: x.0, index })
    }

    /// Stacks equal-shaped values along a new leading dimension.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        let values: Vec<Tensor<T>> = items.iter().map(|&v| self.val(v).clone()).collect();
        let t = Tensor::stack(&values)?;
        self.push("stack", t, Op::Stack(items.iter().map(|v| v.0).collect()))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(dim_err(
                "slice_cols",
                format!("columns {start}..{} of {s:?}", start + len),
            ));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.val(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        self.push("slice_cols", Tensor::new([r, len], out)?, Op::SliceCols { input: x.0, start })
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, items: &[Var]) -> Result<Var> {
        let first = items
            .first()
            .ok_or_else(|| dim_err("concat_cols", "nothing to concatenate"))?;
        let rows = self.shape(*first).first().copied().unwrap_or(0);
        let mut total = 0;
        for &v in items {
            let s = self.shape(v);
            if s.len() != 2 || s[0] != rows {
                return Err(mismatch("concat_cols", self.shape(*first), s));
            }
            total += s[1];
        }
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &v in items {
                let t = self.val(v);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
        }
        self.push(
            "concat_cols",
            Tensor::new([rows, total], out)?,
            Op::ConcatCols(items.iter().map(|v| v.0).collect()),
        )
    }

    // ── convolution ─────────────────────────────────────────────────────

    /// Validates conv operands; returns `(n, [c, h, w], [k0, k1], batched)`.
    fn conv_shapes(
        &self,
        op: &'static str,
        input: Var,
        kernel: Var,
        bias: Var,
    ) -> Result<(usize, [usize; 3], [usize; 2], bool)> {
        let xs = self.shape(input);
        let ks = self.shape(kernel);
        let bs = self.shape(bias);
        let (n, chw, batched) = match *xs {
            [c, h, w] => (1, [c, h, w], false),
            [n, c, h, w] => (n, [c, h, w], true),
            _ => return Err(dim_err(op, format!("input must be [C,H,W] or [N,C,H,W], got {xs:?}"))),
        };
        if ks.len() != 4 || ks[2] != 3 || ks[3] != 3 {
            return Err(dim_err(op, format!("kernel must be [A,B,3,3], got {ks:?}")));
        }
        if chw[0] != ks[0] && op == "conv2d_transpose" || chw[0] != ks[1] && op == "conv2d" {
            return Err(mismatch(op, xs, ks));
        }
        let out_c = if op == "conv2d" { ks[0] } else { ks[1] };
        if bs != [out_c] {
            return Err(mismatch(op, ks, bs));
        }
        Ok((n, chw, [ks[0], ks[1]], batched))
    }

    fn conv_out_shape(n: usize, batched: bool, chw: [usize; 3]) -> Vec<usize> {
        if batched {
            vec![n, chw[0], chw[1], chw[2]]
        } else {
            chw.to_vec()
        }
    }

    /// 3×3 cross-correlation with zero padding 1.
    ///
    /// `input[C_in,H,W]` or `[N,C_in,H,W]`, `kernel[C_out,C_in,3,3]`,
    /// `bias[C_out]`; output is `[(N,) C_out, H/stride, W/stride]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let (n, [c, h, w], [co, _], batched) = self.conv_shapes("conv2d", input, kernel, bias)?;
        if stride != 1 && stride != 2 {
            return Err(dim_err("conv2d", format!("stride must be 1 or 2, got {stride}")));
        }
        if h % stride != 0 || w % stride != 0 {
            return Err(dim_err(
                "conv2d",
                format!("spatial dims {h}×{w} not divisible by stride {stride}"),
            ));
        }
        let (oh, ow) = (h / stride, w / stride);
        let p = oh * ow;
        let cols = im2col(self.val(input).data(), n, c, h, w, stride);
        let mut out = Vec::with_capacity(co * n * p);
        for &b in self.val(bias).data() {
            out.extend(std::iter::repeat_n(b, n * p));
        }
        gemm(co, c * TAPS, n * p, self.val(kernel).data(), false, &cols, false, T::one(), &mut out);
        let out = from_channel_major(out, n, co, p);
        self.push(
            "conv2d",
            Tensor::new(Self::conv_out_shape(n, batched, [co, oh, ow]), out)?,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                bias: bias.0,
                stride,
                cols,
            },
        )
    }

    /// Stride-2 transposed 3×3 convolution, the adjoint of stride-2
    /// [`conv2d`](Tape::conv2d).
    ///
    /// `input[C_in,H,W]` or `[N,C_in,H,W]`, `kernel[C_in,C_out,3,3]`,
    /// `bias[C_out]`; output is `[(N,) C_out, 2H, 2W]`.
    pub fn conv2d_transpose(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (n, [ci, h, w], [_, co], batched) = self.conv_shapes("conv2d_transpose", input, kernel, bias)?;
        let p = h * w;
        let x = to_channel_major(self.val(input).data(), n, ci, p);
        let mut cols = vec![T::zero(); co * TAPS * n * p];
        gemm(co * TAPS, ci, n * p, self.val(kernel).data(), true, &x, false, T::zero(), &mut cols);
        let mut out = col2im(&cols, n, co, 2 * h, 2 * w, 2);
        let plane = 4 * p;
        let bias_v = self.val(bias).data();
        for (k, ch) in out.chunks_mut(plane).enumerate() {
            let b = bias_v[k % co];
            ch.iter_mut().for_each(|v| *v += b);
        }
        self.push(
            "conv2d_transpose",
            Tensor::new(Self::conv_out_shape(n, batched, [co, 2 * h, 2 * w]), out)?,
            Op::ConvTranspose2d {
                input: input.0,
                kernel: kernel.0,
                bias: bias.0,
            },
        )
    }

    // ── reverse sweep ───────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Populates [`grad`](Tape::grad) for every `requires_grad` leaf reachable
    /// from `loss`. Contributions from repeated uses add up. Calling it again
    /// replaces the previous gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(TensorError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        if !loss_node.requires_grad {
            return Err(TensorError::NoGradientPath);
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        self.grads = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                self.grads[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let rg = |j: usize| nodes[j].requires_grad;
        let val = |j: usize| &nodes[j].value;
        let out = &nodes[i].value;

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if rg(*a) {
                    let da = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, val(*b).data(), true, T::one(), da);
                }
                if rg(*b) {
                    let db = slot(grads, *b, k * n);
                    gemm(k, m, n, val(*a).data(), true, g, false, T::one(), db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                let da = slot(grads, *a, r * c);
                for x in 0..r {
                    for y in 0..c {
                        da[x * c + y] += g[y * r + x];
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -T::one() } else { T::one() };
                if rg(*a) {
                    let da = slot(grads, *a, g.len());
                    da.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if rg(*b) {
                    let db = slot(grads, *b, g.len());
                    db.iter_mut().zip(g).for_each(|(d, &v)| *d += sign * v);
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let vb = val(*b).data();
                    let da = slot(grads, *a, g.len());
                    for ((d, &v), &y) in da.iter_mut().zip(g).zip(vb) {
                        *d += v * y;
                    }
                }
                if rg(*b) {
                    let va = val(*a).data();
                    let db = slot(grads, *b, g.len());
                    for ((d, &v), &x) in db.iter_mut().zip(g).zip(va) {
                        *d += v * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                let da = slot(grads, *a, g.len());
                da.iter_mut().zip(g).for_each(|(d, &v)| *d += *c * v);
            }
            Op::AddBias(x, b) => {
                let d = val(*b).len();
                if rg(*x) {
                    let dx = slot(grads, *x, g.len());
                    dx.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
                }
                if rg(*b) {
                    let db = slot(grads, *b, d);
                    for row in g.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
                    }
                }
            }
            Op::MulBias(x, s) => {
                let d = val(*s).len();
                if rg(*x) {
                    let gain = val(*s).data();
                    let dx = slot(grads, *x, g.len());
                    for (orow, grow) in dx.chunks_mut(d).zip(g.chunks(d)) {
                        for ((o, &v), &c) in orow.iter_mut().zip(grow).zip(gain) {
                            *o += v * c;
                        }
                    }
                }
                if rg(*s) {
                    let xv = val(*x).data();
                    let ds = slot(grads, *s, d);
                    for (grow, xrow) in g.chunks(d).zip(xv.chunks(d)) {
                        for ((o, &v), &xx) in ds.iter_mut().zip(grow).zip(xrow) {
                            *o += v * xx;
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                cols,
            } => {
                let xs = val(*input).shape();
                let (n, c, h, w) = match *xs {
                    [c, h, w] => (1, c, h, w),
                    [n, c, h, w] => (n, c, h, w),
                    _ => unreachable!("conv input rank checked in forward"),
                };
                let co = val(*kernel).shape()[0];
                let r = c * TAPS;
                let np = g.len() / co;
                let gc = to_channel_major(g, n, co, np / n);
                if rg(*kernel) {
                    let dk = slot(grads, *kernel, co * r);
                    gemm(co, np, r, &gc, false, cols, true, T::one(), dk);
                }
                if rg(*bias) {
                    let db = slot(grads, *bias, co);
                    for (o, row) in db.iter_mut().zip(gc.chunks(np)) {
                        *o += row.iter().copied().sum::<T>();
                    }
                }
                if rg(*input) {
                    let mut dcols = vec![T::zero(); r * np];
                    gemm(r, co, np, val(*kernel).data(), true, &gc, false, T::zero(), &mut dcols);
                    let dx = col2im(&dcols, n, c, h, w, *stride);
                    let slot_x = slot(grads, *input, dx.len());
                    slot_x.iter_mut().zip(&dx).for_each(|(o, &v)| *o += v);
                }
            }
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
            } => {
                let ys = val(*input).shape();
                let (n, ci, h, w) = match *ys {
                    [c, h, w] => (1, c, h, w),
                    [n, c, h, w] => (n, c, h, w),
                    _ => unreachable!("conv input rank checked in forward"),
                };
                let co = val(*kernel).shape()[1];
                let p = h * w;
                let r = co * TAPS;
                let gcols = im2col(g, n, co, 2 * h, 2 * w, 2);
                if rg(*kernel) {
                    let x = to_channel_major(val(*input).data(), n, ci, p);
                    let dk = slot(grads, *kernel, ci * r);
                    gemm(ci, n * p, r, &x, false, &gcols, true, T::one(), dk);
                }
                if rg(*bias) {
                    let db = slot(grads, *bias, co);
                    for (k, plane) in g.chunks(4 * p).enumerate() {
                        db[k % co] += plane.iter().copied().sum::<T>();
                    }
                }
                if rg(*input) {
                    let mut dy = vec![T::zero(); ci * n * p];
                    gemm(ci, r, n * p, val(*kernel).data(), false, &gcols, false, T::zero(), &mut dy);
                    let dy = from_channel_major(dy, n, ci, p);
                    let slot_y = slot(grads, *input, ci * n * p);
                    slot_y.iter_mut().zip(&dy).for_each(|(o, &v)| *o += v);
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x).data();
                let dx = slot(grads, *x, g.len());
                for ((o, &v), &xx) in dx.iter_mut().zip(g).zip(xv) {
                    *o += v * (gelu_cdf(xx) + xx * gelu_pdf(xx));
                }
            }
            Op::Sigmoid(x) => {
                let dx = slot(grads, *x, g.len());
                for ((o, &v), &y) in dx.iter_mut().zip(g).zip(out.data()) {
                    *o += v * y * (T::one() - y);
                }
            }
            Op::Tanh(x) => {
                let dx = slot(grads, *x, g.len());
                for ((o, &v), &y) in dx.iter_mut().zip(g).zip(out.data()) {
                    *o += v * (T::one() - y * y);
                }
            }
            Op::Softmax(x) => {
                let d = last_dim(out.shape());
                let dx = slot(grads, *x, g.len());
                for ((orow, grow), yrow) in dx.chunks_mut(d).zip(g.chunks(d)).zip(out.data().chunks(d)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for ((o, &gv), &y) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o += y * (gv - dot);
                    }
                }
            }
            Op::Normalize { input, inv_std } => {
                let d = last_dim(out.shape());
                let n = T::lit(d as f64);
                let dx = slot(grads, *input, g.len());
                for (((orow, grow), yrow), &inv) in dx
                    .chunks_mut(d)
                    .zip(g.chunks(d))
                    .zip(out.data().chunks(d))
                    .zip(inv_std)
                {
                    let mean_g = grow.iter().copied().sum::<T>() / n;
                    let mean_gy = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for ((o, &gv), &y) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o += inv * (gv - mean_g - y * mean_gy);
                    }
                }
            }
            Op::Mse(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                let k = T::lit(2.0) * g[0] / T::lit(va.len() as f64);
                if rg(*a) {
                    let da = slot(grads, *a, va.len());
                    for ((o, &x), &y) in da.iter_mut().zip(va).zip(vb) {
                        *o += k * (x - y);
                    }
                }
                if rg(*b) {
                    let db = slot(grads, *b, vb.len());
                    for ((o, &x), &y) in db.iter_mut().zip(va).zip(vb) {
                        *o -= k * (x - y);
                    }
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                let n = val(*x).len();
                let v = if matches!(nodes[i].op, Op::Mean(_)) {
                    g[0] / T::lit(n as f64)
                } else {
                    g[0]
                };
                slot(grads, *x, n).iter_mut().for_each(|o| *o += v);
            }
            Op::Reshape(x) => {
                let dx = slot(grads, *x, g.len());
                dx.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
            }
            Op::Index { input, index } => {
                let n = val(*input).len();
                let dx = slot(grads, *input, n);
                let stride = g.len();
                dx[index * stride..(index + 1) * stride]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(o, &v)| *o += v);
            }
            Op::Stack(items) => {
                let stride = g.len() / items.len();
                for (k, &j) in items.iter().enumerate() {
                    if rg(j) {
                        let dj = slot(grads, j, stride);
                        dj.iter_mut()
                            .zip(&g[k * stride..(k + 1) * stride])
                            .for_each(|(o, &v)| *o += v);
                    }
                }
            }
            Op::SliceCols { input, start } => {
                let s = val(*input).shape();
                let (r, c) = (s[0], s[1]);
                let len = out.shape()[1];
                let dx = slot(grads, *input, r * c);
                for row in 0..r {
                    dx[row * c + start..row * c + start + len]
                        .iter_mut()
                        .zip(&g[row * len..(row + 1) * len])
                        .for_each(|(o, &v)| *o += v);
                }
            }
            Op::ConcatCols(items) => {
                let (rows, total) = (out.shape()[0], out.shape()[1]);
                let mut offset = 0;
                for &j in items {
                    let c = val(j).shape()[1];
                    if rg(j) {
                        let dj = slot(grads, j, rows * c);
                        for row in 0..rows {
                            dj[row * c..(row + 1) * c]
                                .iter_mut()
                                .zip(&g[row * total + offset..row * total + offset + c])
                                .for_each(|(o, &v)| *o += v);
                        }
                    }
                    offset += c;
                }
            }
        }
    }
}
