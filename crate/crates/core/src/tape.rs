//! Reverse-mode differentiation tape.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are appended
//! in evaluation order, so the node list is already topologically sorted and
//! [`Tape::backward`] is a single reverse sweep. Parameters are borrowed for
//! the lifetime of the tape rather than copied; their gradients are looked up
//! afterwards by tensor identity through [`Gradients::param`].

use std::sync::atomic::{AtomicU64, Ordering};

use crate::element::Element;
use crate::error::TensorError;
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// Backward rule of a user-defined operation: given the inputs, the output and
/// the output gradient, return one optional gradient per input.
pub type CustomBackward<'a, T> =
    Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &[T]) -> Vec<Option<Vec<T>>> + 'a>;

enum Value<'a, T> {
    Owned(Tensor<T>),
    Borrowed(&'a Tensor<T>),
}

impl<T> Value<'_, T> {
    fn get(&self) -> &Tensor<T> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op<'a, T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Sum(usize),
    Mean(usize),
    Mse(usize, usize),
    SumSquaredError(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Reshape(usize),
    Concat(Vec<usize>),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    MaxPool2 {
        x: usize,
        argmax: Vec<u32>,
    },
    GlobalAvgPool(usize),
    GridSample {
        f: usize,
        field: usize,
    },
    Custom {
        name: &'static str,
        inputs: Vec<usize>,
        backward: CustomBackward<'a, T>,
    },
}

struct Node<'a, T> {
    value: Value<'a, T>,
    op: Op<'a, T>,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Tape<'a, T: Element> {
    id: u64,
    nodes: Vec<Node<'a, T>>,
    /// (address of the borrowed parameter tensor, node index)
    params: Vec<(usize, usize)>,
}

impl<T: Element> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Element> Tape<'a, T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize, TensorError> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Value<'a, T>, op: Op<'a, T>, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, idx }
    }

    fn push_result(
        &mut self,
        name: &'static str,
        out: Tensor<T>,
        op: Op<'a, T>,
        inputs: &[usize],
    ) -> Result<Var, TensorError> {
        if !out.all_finite() {
            return Err(TensorError::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(Value::Owned(out), op, requires_grad))
    }

    /// Registers a trainable tensor. Its gradient is retrievable by identity.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        let v = self.push(Value::Borrowed(t), Op::Leaf, true);
        self.params.push((t as *const Tensor<T> as usize, v.idx));
        v
    }

    /// Owned leaf; with `requires_grad` its gradient is available via [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Value::Owned(t), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// Borrowed leaf that never receives a gradient (frozen weights, fixed bases).
    pub fn constant_ref(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(Value::Borrowed(t), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let idx = self.idx(v).expect("variable from another tape");
        self.nodes[idx].value.get()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad && v.tape == self.id
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        self.nodes[i].value.get()
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<(), TensorError> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&self, a: usize, b: usize, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.val(a), self.val(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("same-shape elementwise result")
    }

    fn map(&self, a: usize, f: impl Fn(T) -> T) -> Tensor<T> {
        let ta = self.val(a);
        Tensor::new(ta.shape(), ta.data().iter().map(|&x| f(x)).collect()).expect("unary map")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        self.push_result("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        self.push_result("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        self.push_result("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var, TensorError> {
        let a = self.idx(a)?;
        let out = self.map(a, |x| x * s);
        self.push_result("scale", out, Op::Scale(a, s), &[a])
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.val(ia).shape(), self.val(ib).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![T::ZERO; m * n];
        T::gemm(m, k, n, self.val(ia).data(), false, self.val(ib).data(), false, T::ZERO, &mut c);
        let out = Tensor::new(&[m, n], c)?;
        self.push_result("matmul", out, Op::MatMul { a: ia, b: ib, m, k, n }, &[ia, ib])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let a = self.idx(a)?;
        let s: T = self.val(a).data().iter().copied().sum();
        self.push_result("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let a = self.idx(a)?;
        let t = self.val(a);
        if t.numel() == 0 {
            return Err(TensorError::invalid("mean", "empty tensor"));
        }
        let s: T = t.data().iter().copied().sum::<T>() / T::from_f64(t.numel() as f64);
        self.push_result("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("mse", a, b)?;
        let n = self.val(a).numel();
        if n == 0 {
            return Err(TensorError::invalid("mse", "empty tensor"));
        }
        let s = squared_error(self.val(a).data(), self.val(b).data()) / T::from_f64(n as f64);
        self.push_result("mse", Tensor::scalar(s), Op::Mse(a, b), &[a, b])
    }

    /// Squared L2 norm of `a - b`.
    pub fn sum_squared_error(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("sum_squared_error", a, b)?;
        let s = squared_error(self.val(a).data(), self.val(b).data());
        self.push_result("sum_squared_error", Tensor::scalar(s), Op::SumSquaredError(a, b), &[a, b])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let a = self.idx(a)?;
        let out = self.map(a, |x| if x > T::ZERO { x } else { T::ZERO });
        self.push_result("relu", out, Op::Relu(a), &[a])
    }

    /// Logistic function, clamped so that outputs stay strictly inside (0, 1).
    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let a = self.idx(a)?;
        let out = self.map(a, |x| {
            let y = T::ONE / (T::ONE + (-x).exp());
            y.max(T::MIN_POSITIVE).min(T::ONE_MINUS_ULP)
        });
        self.push_result("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let a = self.idx(a)?;
        let out = self.val(a).clone().reshape(shape)?;
        self.push_result("reshape", out, Op::Reshape(a), &[a])
    }

    /// Concatenates along the leading axis; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::invalid("concat", "no inputs"));
        }
        let idxs = parts.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>, _>>()?;
        let first = self.val(idxs[0]).shape().to_vec();
        if first.is_empty() {
            return Err(TensorError::invalid("concat", "cannot concatenate scalars"));
        }
        let mut lead = 0;
        let mut data = Vec::new();
        for &i in &idxs {
            let t = self.val(i);
            if t.shape().len() != first.len() || t.shape()[1..] != first[1..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = first;
        shape[0] = lead;
        let out = Tensor::new(&shape, data)?;
        self.push_result("concat", out, Op::Concat(idxs.clone()), &idxs)
    }

    /// Cross-correlation of `x: C×H×W` with `w: C'×C×kh×kw` plus bias `b: C'`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let (ix, iw, ib) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (sx, sw, sb) = (self.val(ix).shape(), self.val(iw).shape(), self.val(ib).shape());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        if sb != [sw[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: sw.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let geom = ConvGeom::new(sx[0], sx[1], sx[2], sw[2], sw[3], stride, pad).ok_or_else(|| {
            TensorError::invalid(
                "conv2d",
                format!("kernel {}×{} does not fit padded input {:?} (pad {pad}, stride {stride})", sw[2], sw[3], sx),
            )
        })?;
        let out_c = sw[0];
        let data = kernels::conv2d_forward(self.val(ix).data(), self.val(iw).data(), self.val(ib).data(), &geom);
        let out = Tensor::new(&[out_c, geom.out_h, geom.out_w], data)?;
        self.push_result("conv2d", out, Op::Conv2d { x: ix, w: iw, b: ib, geom }, &[ix, iw, ib])
    }

    /// Transposed convolution of `x: C×H×W` with `w: C×C'×kh×kw`, bias `b: C'`.
    /// Output side is `(H-1)·stride - 2·pad + kh`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let (ix, iw, ib) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (sx, sw, sb) = (self.val(ix).shape(), self.val(iw).shape(), self.val(ib).shape());
        if sx.len() != 3 || sw.len() != 4 || sw[0] != sx[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        if sb != [sw[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d bias",
                lhs: sw.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::invalid("conv_transpose2d", "stride must be positive"));
        }
        let (kh, kw) = (sw[2], sw[3]);
        let full_h = (sx[1] - 1) * stride + kh;
        let full_w = (sx[2] - 1) * stride + kw;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(TensorError::invalid("conv_transpose2d", "padding removes the whole output"));
        }
        let (oh, ow) = (full_h - 2 * pad, full_w - 2 * pad);
        let geom = ConvGeom::new(sw[1], oh, ow, kh, kw, stride, pad)
            .filter(|g| g.out_h == sx[1] && g.out_w == sx[2])
            .ok_or_else(|| TensorError::invalid("conv_transpose2d", "inconsistent geometry"))?;
        let data = kernels::conv_transpose2d_forward(
            self.val(ix).data(),
            self.val(iw).data(),
            self.val(ib).data(),
            sx[0],
            &geom,
        );
        let out = Tensor::new(&[sw[1], oh, ow], data)?;
        self.push_result(
            "conv_transpose2d",
            out,
            Op::ConvTranspose2d { x: ix, w: iw, b: ib, geom },
            &[ix, iw, ib],
        )
    }

    /// `W·x + b` for a vector `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (ix, iw, ib) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (sx, sw, sb) = (self.val(ix).shape(), self.val(iw).shape(), self.val(ib).shape());
        if sx.len() != 1 || sw.len() != 2 || sw[1] != sx[0] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        if sb != [sw[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "linear bias",
                lhs: sw.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (out_n, in_n) = (sw[0], sw[1]);
        let mut y = self.val(ib).data().to_vec();
        T::gemm(out_n, in_n, 1, self.val(iw).data(), false, self.val(ix).data(), false, T::ONE, &mut y);
        let out = Tensor::new(&[out_n], y)?;
        self.push_result("linear", out, Op::Linear { x: ix, w: iw, b: ib }, &[ix, iw, ib])
    }

    /// 2×2 max pooling with stride 2 over `C×H×W` (H, W even).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var, TensorError> {
        let ix = self.idx(x)?;
        let s = self.val(ix).shape().to_vec();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 || s[1] == 0 || s[2] == 0 {
            return Err(TensorError::invalid("max_pool2", format!("needs C×H×W with even H, W; got {s:?}")));
        }
        let (data, argmax) = kernels::max_pool2_forward(self.val(ix).data(), s[0], s[1], s[2]);
        let out = Tensor::new(&[s[0], s[1] / 2, s[2] / 2], data)?;
        self.push_result("max_pool2", out, Op::MaxPool2 { x: ix, argmax }, &[ix])
    }

    /// Spatial mean of `C×H×W`, giving a length-C vector.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let ix = self.idx(x)?;
        let s = self.val(ix).shape().to_vec();
        if s.len() != 3 || s[1] * s[2] == 0 {
            return Err(TensorError::invalid("global_avg_pool", format!("needs C×H×W; got {s:?}")));
        }
        let hw = s[1] * s[2];
        let inv = T::from_f64(1.0 / hw as f64);
        let data = self
            .val(ix)
            .data()
            .chunks_exact(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(&[s[0]], data)?;
        self.push_result("global_avg_pool", out, Op::GlobalAvgPool(ix), &[ix])
    }

    /// Bilinear sampling of `f: D×H×W` at the normalized coordinates of
    /// `field: 2×H'×W'` (x plane then y plane), clamping to the border.
    pub fn grid_sample(&mut self, f: Var, field: Var) -> Result<Var, TensorError> {
        let (i_f, i_g) = (self.idx(f)?, self.idx(field)?);
        let (sf, sg) = (self.val(i_f).shape(), self.val(i_g).shape());
        if sf.len() != 3 || sg.len() != 3 || sg[0] != 2 || sf[1] == 0 || sf[2] == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "grid_sample",
                lhs: sf.to_vec(),
                rhs: sg.to_vec(),
            });
        }
        if !self.val(i_g).all_finite() {
            return Err(TensorError::NonFinite("grid_sample coordinates"));
        }
        let (c, h, w) = (sf[0], sf[1], sf[2]);
        let (oh, ow) = (sg[1], sg[2]);
        let taps = kernels::bilinear_taps(self.val(i_g).data(), oh * ow, h, w);
        let data = kernels::grid_sample_forward(self.val(i_f).data(), c, h, w, &taps);
        let out = Tensor::new(&[c, oh, ow], data)?;
        self.push_result("grid_sample", out, Op::GridSample { f: i_f, field: i_g }, &[i_f, i_g])
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        output: Tensor<T>,
        backward: CustomBackward<'a, T>,
    ) -> Result<Var, TensorError> {
        let idxs = inputs.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>, _>>()?;
        self.push_result(
            name,
            output,
            Op::Custom {
                name,
                inputs: idxs.clone(),
                backward,
            },
            &idxs,
        )
    }

    /// Reverse sweep from a scalar `loss`. Leaves that do not influence the
    /// loss get no gradient entry; [`Gradients::param_or_zeros`] fills zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let root = self.idx(loss)?;
        let lt = self.val(root);
        if !lt.is_scalar() {
            return Err(TensorError::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root].requires_grad {
            grads[root] = Some(vec![T::ONE]);
        }
        for idx in (0..=root).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
        }
        let leaves = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| if matches!(self.nodes[i].op, Op::Leaf) { g } else { None })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads: leaves,
            params: self.params.clone(),
        })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn backward_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.accumulate(grads, a, || g.to_vec());
                self.accumulate(grads, b, || g.to_vec());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, || g.to_vec());
                self.accumulate(grads, b, || g.iter().map(|&v| -v).collect());
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.val(a).data(), self.val(b).data());
                self.accumulate(grads, a, || g.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                self.accumulate(grads, b, || g.iter().zip(va).map(|(&g, &x)| g * x).collect());
            }
            &Op::Scale(a, s) => self.accumulate(grads, a, || g.iter().map(|&v| v * s).collect()),
            &Op::MatMul { a, b, m, k, n } => {
                let (va, vb) = (self.val(a).data(), self.val(b).data());
                self.accumulate(grads, a, || {
                    let mut da = vec![T::ZERO; m * k];
                    T::gemm(m, n, k, g, false, vb, true, T::ZERO, &mut da);
                    da
                });
                self.accumulate(grads, b, || {
                    let mut db = vec![T::ZERO; k * n];
                    T::gemm(k, m, n, va, true, g, false, T::ZERO, &mut db);
                    db
                });
            }
            &Op::Sum(a) => {
                let n = self.val(a).numel();
                self.accumulate(grads, a, || vec![g[0]; n]);
            }
            &Op::Mean(a) => {
                let n = self.val(a).numel();
                let v = g[0] / T::from_f64(n as f64);
                self.accumulate(grads, a, || vec![v; n]);
            }
            &Op::Mse(a, b) | &Op::SumSquaredError(a, b) => {
                let (va, vb) = (self.val(a).data(), self.val(b).data());
                let scale = match node.op {
                    Op::Mse(..) => T::from_f64(2.0 / va.len() as f64),
                    _ => T::from_f64(2.0),
                } * g[0];
                let diff = || va.iter().zip(vb).map(|(&x, &y)| (x - y) * scale);
                self.accumulate(grads, a, || diff().collect());
                self.accumulate(grads, b, || diff().map(|d| -d).collect());
            }
            &Op::Relu(a) => {
                let va = self.val(a).data();
                self.accumulate(grads, a, || {
                    g.iter()
                        .zip(va)
                        .map(|(&g, &x)| if x > T::ZERO { g } else { T::ZERO })
                        .collect()
                });
            }
            &Op::Sigmoid(a) => {
                let y = node.value.get().data();
                self.accumulate(grads, a, || g.iter().zip(y).map(|(&g, &y)| g * y * (T::ONE - y)).collect());
            }
            &Op::Reshape(a) => self.accumulate(grads, a, || g.to_vec()),
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.val(p).numel();
                    self.accumulate(grads, p, || g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            &Op::Conv2d { x, w, b, geom } => {
                let out_c = self.val(b).numel();
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.val(x).data(),
                    self.val(w).data(),
                    out_c,
                    &geom,
                    g,
                    self.wants(x),
                    self.wants(w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, x, || dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, w, || dw);
                }
                self.accumulate(grads, b, || db);
            }
            &Op::ConvTranspose2d { x, w, b, geom } => {
                let in_c = self.val(x).shape()[0];
                let (dx, dw, db) = kernels::conv_transpose2d_backward(
                    self.val(x).data(),
                    self.val(w).data(),
                    in_c,
                    &geom,
                    g,
                    self.wants(x),
                    self.wants(w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, x, || dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, w, || dw);
                }
                self.accumulate(grads, b, || db);
            }
            &Op::Linear { x, w, b } => {
                let (vx, vw) = (self.val(x).data(), self.val(w).data());
                let (out_n, in_n) = (g.len(), vx.len());
                self.accumulate(grads, x, || {
                    let mut dx = vec![T::ZERO; in_n];
                    T::gemm(in_n, out_n, 1, vw, true, g, false, T::ZERO, &mut dx);
                    dx
                });
                self.accumulate(grads, w, || {
                    let mut dw = Vec::with_capacity(out_n * in_n);
                    for &go in g {
                        dw.extend(vx.iter().map(|&xv| go * xv));
                    }
                    dw
                });
                self.accumulate(grads, b, || g.to_vec());
            }
            Op::MaxPool2 { x, argmax } => {
                let n = self.val(*x).numel();
                self.accumulate(grads, *x, || {
                    let mut dx = vec![T::ZERO; n];
                    for (&a, &gv) in argmax.iter().zip(g) {
                        dx[a as usize] += gv;
                    }
                    dx
                });
            }
            &Op::GlobalAvgPool(x) => {
                let s = self.val(x).shape();
                let hw = s[1] * s[2];
                let inv = T::from_f64(1.0 / hw as f64);
                self.accumulate(grads, x, || g.iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, hw)).collect());
            }
            &Op::GridSample { f, field } => {
                let sf = self.val(f).shape();
                let sg = self.val(field).shape();
                let (c, h, w) = (sf[0], sf[1], sf[2]);
                let taps = kernels::bilinear_taps(self.val(field).data(), sg[1] * sg[2], h, w);
                let (df, dfield) = kernels::grid_sample_backward(
                    self.val(f).data(),
                    c,
                    h,
                    w,
                    &taps,
                    g,
                    self.wants(f),
                    self.wants(field),
                );
                if let Some(df) = df {
                    self.accumulate(grads, f, || df);
                }
                if let Some(dfield) = dfield {
                    self.accumulate(grads, field, || dfield);
                }
            }
            Op::Custom { name, inputs, backward } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&i| self.val(i)).collect();
                let outs = backward(&ins, node.value.get(), g);
                assert_eq!(outs.len(), inputs.len(), "custom op {name}: one gradient slot per input");
                for (&i, d) in inputs.iter().zip(outs) {
                    if let Some(d) = d {
                        assert_eq!(d.len(), self.val(i).numel(), "custom op {name}: gradient length");
                        self.accumulate(grads, i, || d);
                    }
                }
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], i: usize, make: impl FnOnce() -> Vec<T>) {
        if !self.nodes[i].requires_grad {
            return;
        }
        match &mut grads[i] {
            Some(acc) => {
                let d = make();
                acc.iter_mut().zip(d).for_each(|(a, v)| *a += v);
            }
            slot @ None => *slot = Some(make()),
        }
    }
}

fn squared_error<T: Element>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(usize, usize)>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a leaf variable, `None` if it did not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    /// Gradient of a parameter registered with [`Tape::param`]. A tensor
    /// registered several times receives the sum of all its uses.
    pub fn param(&self, t: &Tensor<T>) -> Option<Vec<T>> {
        let addr = t as *const Tensor<T> as usize;
        let mut total: Option<Vec<T>> = None;
        for &(a, idx) in &self.params {
            if a != addr {
                continue;
            }
            if let Some(g) = &self.grads[idx] {
                match &mut total {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(x, &y)| *x += y),
                    None => total = Some(g.clone()),
                }
            }
        }
        total
    }

    pub fn param_or_zeros(&self, t: &Tensor<T>) -> Vec<T> {
        self.param(t).unwrap_or_else(|| vec![T::ZERO; t.numel()])
    }
}
