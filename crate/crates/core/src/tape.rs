//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward rule. Parents always precede children, so a single
//! reverse sweep from the loss visits nodes in valid topological order.
//! Broadcasting is limited to scalar operands and a handful of named row/bias
//! operations; everything else requires exact shape agreement.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::peft::AdapterSet;
use crate::tensor::{Mask, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Exp,
    Silu,
    Softplus,
    Neg,
    Sigmoid,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Tanh => "tanh",
            Unary::Exp => "exp",
            Unary::Silu => "silu",
            Unary::Softplus => "softplus",
            Unary::Neg => "neg",
            Unary::Sigmoid => "sigmoid",
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))`, switching to `x + log1p(exp(-x))` above 20.
pub fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MulRows(Var, Var),
    Unary(Var, Unary),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reshape(Var),
    Rearrange {
        x: Var,
        index: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    AddCols {
        base: Var,
        delta: Var,
        offset: usize,
    },
    CausalConv1d {
        x: Var,
        kernel: Var,
    },
    SelectiveScan {
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        states: Vec<f64>,
    },
    Sum(Var),
    NllSum {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Recorded computation. Build one per forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that requires one.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

// ---- kernels -------------------------------------------------------------

/// `a[m×k] · b[k×n]`, accumulating over `k` in ascending order.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
fn mm_t(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// `a[r×m]ᵀ · b[r×n]`.
fn t_mm(a: &[f64], b: &[f64], r: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..r {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..m {
            let av = a[i * m + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, v) in acc.iter_mut().zip(g) {
        *a += v;
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a parameter leaf; its gradient is routed back to `id`.
    pub fn param_leaf(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Leaf,
            requires_grad: p.requires_grad,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    fn mat(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a)?;
        let (k2, n) = self.mat(b)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let data = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(
            "matmul",
            Tensor::new(&[m, n], data)?,
            Op::MatMul(a, b),
            &[a, b],
        )
    }

    /// `a · bᵀ`; the natural form for `x · Wᵀ` with `W` stored `[out × in]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a)?;
        let (n, k2) = self.mat(b)?;
        if k != k2 {
            return Err(Error::dim("matmul_t", self.shape(a), self.shape(b)));
        }
        let data = mm_t(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(
            "matmul_t",
            Tensor::new(&[m, n], data)?,
            Op::MatMulT(a, b),
            &[a, b],
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat(a)?;
        let src = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        self.push(
            "transpose",
            Tensor::new(&[n, m], data)?,
            Op::Transpose(a),
            &[a],
        )
    }

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() || tb.is_scalar() {
            Ok(ta.shape().to_vec())
        } else if ta.is_scalar() {
            Ok(tb.shape().to_vec())
        } else {
            Err(Error::dim(op, ta.shape(), tb.shape()))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Vec<f64>> {
        let shape = self.broadcast_shape(name, a, b)?;
        let n: usize = shape.iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        Ok((0..n).map(|i| f(pick(da, i), pick(db, i))).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_shape("add", a, b)?;
        let data = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", Tensor::new(&shape, data)?, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_shape("mul", a, b)?;
        let data = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", Tensor::new(&shape, data)?, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|v| v * s).collect();
        let shape = t.shape().to_vec();
        self.push("scale", Tensor::new(&shape, data)?, Op::Scale(a, s), &[a])
    }

    /// Adds a `[d]` bias to every row of an `[n × d]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.mat(x)?;
        if self.shape(bias) != [d] {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..n {
            for (v, bv) in data[i * d..(i + 1) * d].iter_mut().zip(b) {
                *v += bv;
            }
        }
        self.push(
            "add_bias",
            Tensor::new(&[n, d], data)?,
            Op::AddBias(x, bias),
            &[x, bias],
        )
    }

    /// Multiplies row `i` of `x[n × d]` by the scalar `g[i, 0]`.
    pub fn mul_rows(&mut self, x: Var, g: Var) -> Result<Var> {
        let (n, d) = self.mat(x)?;
        if self.shape(g) != [n, 1] {
            return Err(Error::dim("mul_rows", self.shape(x), self.shape(g)));
        }
        let gv = self.value(g).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..n {
            for v in &mut data[i * d..(i + 1) * d] {
                *v *= gv[i];
            }
        }
        self.push(
            "mul_rows",
            Tensor::new(&[n, d], data)?,
            Op::MulRows(x, g),
            &[x, g],
        )
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let t = self.value(x);
        let f: fn(f64) -> f64 = match kind {
            Unary::Tanh => libm::tanh,
            Unary::Exp => libm::exp,
            Unary::Silu => |v| v * sigmoid(v),
            Unary::Softplus => softplus,
            Unary::Neg => |v| -v,
            Unary::Sigmoid => sigmoid,
        };
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        self.push(
            kind.name(),
            Tensor::new(&shape, data)?,
            Op::Unary(x, kind),
            &[x],
        )
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Silu)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Softplus)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Neg)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = t.data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mx = (0..len)
                    .map(|k| src[at(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = libm::exp(src[at(k)] - mx);
                    data[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    data[at(k)] /= z;
                }
            }
        }
        self.push(
            "softmax",
            Tensor::new(&shape, data)?,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        )
    }

    /// Row-wise softmax of a matrix where disallowed entries get probability 0.
    pub fn masked_softmax(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        let (n, m) = self.mat(x)?;
        let (mr, mc) = mask.dims();
        if (mr, mc) != (n, m) {
            return Err(Error::dim("masked_softmax", &[n, m], &[mr, mc]));
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let mut mx = f64::NEG_INFINITY;
            for j in 0..m {
                if mask.allows(i, j) {
                    mx = mx.max(src[i * m + j]);
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(Error::Contract(format!("mask row {i} allows no keys")));
            }
            let mut z = 0.0;
            for j in 0..m {
                if mask.allows(i, j) {
                    let e = libm::exp(src[i * m + j] - mx);
                    data[i * m + j] = e;
                    z += e;
                }
            }
            for v in &mut data[i * m..(i + 1) * m] {
                *v /= z;
            }
        }
        self.push(
            "masked_softmax",
            Tensor::new(&[n, m], data)?,
            Op::MaskedSoftmax(x),
            &[x],
        )
    }

    /// Normalises over the last axis then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::Contract("layer_norm on a scalar".into()))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim("layer_norm", &shape, self.shape(gain)));
        }
        let rows = t.numel() / d;
        let src = t.data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut data = vec![0.0; src.len()];
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / libm::sqrt(var + eps);
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                data[r * d + j] = h * g[j] + b[j];
            }
        }
        self.push(
            "layer_norm",
            Tensor::new(&shape, data)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let data = self.value(x).data().to_vec();
        let t = Tensor::new(shape, data)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    /// Gathers `out[i] = x.flat[index[i]]` into a tensor of `shape`.
    /// Indices may repeat; the backward rule scatter-adds.
    pub fn rearrange(&mut self, x: Var, shape: &[usize], index: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Contract(format!(
                "rearrange index {bad} out of bounds for {} elements",
                src.len()
            )));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape, data)?;
        self.push("rearrange", t, Op::Rearrange { x, index }, &[x])
    }

    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.mat(x)?;
        if len == 0 || start + len > m {
            return Err(Error::dim("narrow_cols", &[n, m], &[start, len]));
        }
        let index = (0..n)
            .flat_map(|i| (start..start + len).map(move |j| i * m + j))
            .collect();
        self.rearrange(x, &[n, len], index)
    }

    pub fn narrow_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.mat(x)?;
        if len == 0 || start + len > n {
            return Err(Error::dim("narrow_rows", &[n, m], &[start, len]));
        }
        let index = (start * m..(start + len) * m).collect();
        self.rearrange(x, &[len, m], index)
    }

    /// Reverses the order of the rows of a matrix.
    pub fn flip_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.mat(x)?;
        let index = (0..n)
            .flat_map(|i| {
                let src = n - 1 - i;
                (0..m).map(move |j| src * m + j)
            })
            .collect();
        self.rearrange(x, &[n, m], index)
    }

    /// Row lookup `table[ids[i]]` for a `[vocab × d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.mat(table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Vocabulary(bad));
        }
        if ids.is_empty() {
            return Err(Error::Contract("embedding lookup with no ids".into()));
        }
        let index = ids
            .iter()
            .flat_map(|&t| (0..d).map(move |j| t * d + j))
            .collect();
        self.rearrange(table, &[ids.len(), d], index)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (n, _) = self.mat(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.mat(p)?;
            if r != n {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(
            "concat_cols",
            Tensor::new(&[n, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (_, m) = self.mat(first)?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.mat(p)?;
            if c != m {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        self.push(
            "concat_rows",
            Tensor::new(&[rows, m], data)?,
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    /// `base` with `delta` added into columns `offset..offset + delta_cols`.
    /// Columns outside that window are copied untouched.
    pub fn add_cols(&mut self, base: Var, delta: Var, offset: usize) -> Result<Var> {
        let (n, m) = self.mat(base)?;
        let (n2, w) = self.mat(delta)?;
        if n != n2 || offset + w > m {
            return Err(Error::dim("add_cols", self.shape(base), self.shape(delta)));
        }
        let mut data = self.value(base).data().to_vec();
        let dv = self.value(delta).data();
        for i in 0..n {
            for j in 0..w {
                data[i * m + offset + j] += dv[i * w + j];
            }
        }
        self.push(
            "add_cols",
            Tensor::new(&[n, m], data)?,
            Op::AddCols {
                base,
                delta,
                offset,
            },
            &[base, delta],
        )
    }

    /// Depthwise causal convolution of `x[L × C]` with `kernel[C × K]`,
    /// left-padded with `K − 1` zeros.
    pub fn causal_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (l, c) = self.mat(x)?;
        let (c2, k) = self.mat(kernel)?;
        if c != c2 {
            return Err(Error::dim(
                "causal_conv1d",
                self.shape(x),
                self.shape(kernel),
            ));
        }
        let (xv, kv) = (self.value(x).data(), self.value(kernel).data());
        let mut data = vec![0.0; l * c];
        for t in 0..l {
            for ch in 0..c {
                let mut s = 0.0;
                for j in 0..k {
                    if t + j + 1 >= k {
                        let src = t + j + 1 - k;
                        s += kv[ch * k + j] * xv[src * c + ch];
                    }
                }
                data[t * c + ch] = s;
            }
        }
        self.push(
            "causal_conv1d",
            Tensor::new(&[l, c], data)?,
            Op::CausalConv1d { x, kernel },
            &[x, kernel],
        )
    }

    /// Sequential selective scan. See [`crate::ssm::selective_scan`].
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
    ) -> Result<Var> {
        let (l, ch) = self.mat(x)?;
        let (ach, s) = self.mat(a)?;
        if self.shape(delta) != [l, ch] {
            return Err(Error::dim(
                "selective_scan(delta)",
                self.shape(x),
                self.shape(delta),
            ));
        }
        if ach != ch {
            return Err(Error::dim(
                "selective_scan(A)",
                self.shape(x),
                self.shape(a),
            ));
        }
        if self.shape(b) != [l, s] || self.shape(c) != [l, s] {
            return Err(Error::dim(
                "selective_scan(B/C)",
                self.shape(b),
                self.shape(c),
            ));
        }
        if self.shape(d) != [ch] {
            return Err(Error::dim(
                "selective_scan(D)",
                self.shape(x),
                self.shape(d),
            ));
        }
        let dv = self.value(delta).data();
        if let Some(bad) = dv.iter().find(|&&v| v <= 0.0) {
            return Err(Error::Contract(format!(
                "selective_scan requires delta > 0, got {bad}"
            )));
        }
        let (xv, av, bv, cv, skip) = (
            self.value(x).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
            self.value(d).data(),
        );
        let mut states = vec![0.0; l * ch * s];
        let mut y = vec![0.0; l * ch];
        for c_ in 0..ch {
            for s_ in 0..s {
                let a_cs = av[c_ * s + s_];
                let mut h = 0.0;
                for t in 0..l {
                    let dt = dv[t * ch + c_];
                    h = libm::exp(dt * a_cs) * h + dt * bv[t * s + s_] * xv[t * ch + c_];
                    states[(t * ch + c_) * s + s_] = h;
                    y[t * ch + c_] += cv[t * s + s_] * h;
                }
            }
        }
        for t in 0..l {
            for c_ in 0..ch {
                y[t * ch + c_] += skip[c_] * xv[t * ch + c_];
            }
        }
        self.push(
            "selective_scan",
            Tensor::new(&[l, ch], y)?,
            Op::SelectiveScan {
                x,
                delta,
                a,
                b,
                c,
                d,
                states,
            },
            &[x, delta, a, b, c, d],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// `Σ_{i: mask[i]} −log softmax(logits_i)[targets[i]]`.
    pub fn nll_sum(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, v) = self.mat(logits)?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::dim("nll_sum", &[t, v], &[targets.len(), mask.len()]));
        }
        let lv = self.value(logits).data();
        let mut total = 0.0;
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            let target = targets[i];
            if target >= v {
                return Err(Error::Vocabulary(target));
            }
            let row = &lv[i * v..(i + 1) * v];
            total += logsumexp(row) - row[target];
        }
        self.push(
            "nll_sum",
            Tensor::scalar(total),
            Op::NllSum {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            &[logits],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds every parameter-leaf gradient into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, grads.grads[i].as_deref()) {
                store.accumulate_grad(id, g);
            }
        }
        Ok(grads)
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, contribution: &[f64]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => add_into(acc, contribution),
                slot @ None => *slot = Some(contribution.to_vec()),
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2().unwrap();
                let n = self.value(b).shape()[1];
                if self.requires_grad(a) {
                    send(a, &mm_t(g, self.value(b).data(), m, n, k));
                }
                if self.requires_grad(b) {
                    send(b, &t_mm(self.value(a).data(), g, m, k, n));
                }
            }
            &Op::MatMulT(a, b) => {
                let (m, k) = self.value(a).dims2().unwrap();
                let n = self.value(b).shape()[0];
                if self.requires_grad(a) {
                    send(a, &mm(g, self.value(b).data(), m, n, k));
                }
                if self.requires_grad(b) {
                    send(b, &t_mm(g, self.value(a).data(), m, n, k));
                }
            }
            &Op::Transpose(a) => {
                let (m, n) = self.value(a).dims2().unwrap();
                let mut ga = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        ga[r * n + c] = g[c * m + r];
                    }
                }
                send(a, &ga);
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.value(v).numel() == g.len() {
                        send(v, g);
                    } else {
                        send(v, &[g.iter().sum()]);
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (da, db) = (self.value(a).data(), self.value(b).data());
                let pick = |d: &[f64], k: usize| if d.len() == 1 { d[0] } else { d[k] };
                for (v, other, own) in [(a, db, da), (b, da, db)] {
                    if !self.requires_grad(v) {
                        continue;
                    }
                    let full: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(k, gv)| gv * pick(other, k))
                        .collect();
                    if own.len() == g.len() {
                        send(v, &full);
                    } else {
                        send(v, &[full.iter().sum()]);
                    }
                }
            }
            &Op::Scale(a, s) => {
                let ga: Vec<f64> = g.iter().map(|v| v * s).collect();
                send(a, &ga);
            }
            &Op::AddBias(x, bias) => {
                send(x, g);
                let d = self.value(bias).numel();
                let mut gb = vec![0.0; d];
                for row in g.chunks(d) {
                    add_into(&mut gb, row);
                }
                send(bias, &gb);
            }
            &Op::MulRows(x, gate) => {
                let (n, d) = self.value(x).dims2().unwrap();
                let (xv, gv) = (self.value(x).data(), self.value(gate).data());
                if self.requires_grad(x) {
                    let mut gx = vec![0.0; n * d];
                    for r in 0..n {
                        for c in 0..d {
                            gx[r * d + c] = g[r * d + c] * gv[r];
                        }
                    }
                    send(x, &gx);
                }
                if self.requires_grad(gate) {
                    let gg: Vec<f64> = (0..n)
                        .map(|r| (0..d).map(|c| g[r * d + c] * xv[r * d + c]).sum())
                        .collect();
                    send(gate, &gg);
                }
            }
            &Op::Unary(x, kind) => {
                let (xv, yv) = (self.value(x).data(), node.value.data());
                let ga: Vec<f64> = g
                    .iter()
                    .zip(xv.iter().zip(yv))
                    .map(|(gv, (&xi, &yi))| {
                        gv * match kind {
                            Unary::Tanh => 1.0 - yi * yi,
                            Unary::Exp => yi,
                            Unary::Neg => -1.0,
                            Unary::Sigmoid => yi * (1.0 - yi),
                            Unary::Softplus => sigmoid(xi),
                            Unary::Silu => {
                                let s = sigmoid(xi);
                                s + xi * s * (1.0 - s)
                            }
                        }
                    })
                    .collect();
                send(x, &ga);
            }
            &Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + ii;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                send(x, &gx);
            }
            &Op::MaskedSoftmax(x) => {
                let (n, m) = node.value.dims2().unwrap();
                let y = node.value.data();
                let mut gx = vec![0.0; n * m];
                for r in 0..n {
                    let row = r * m..(r + 1) * m;
                    let dot: f64 = g[row.clone()].iter().zip(&y[row]).map(|(a, b)| a * b).sum();
                    for c in 0..m {
                        gx[r * m + c] = y[r * m + c] * (g[r * m + c] - dot);
                    }
                }
                send(x, &gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                let rows = xhat.len() / d;
                if self.requires_grad(*x) {
                    let mut gx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let (mut m1, mut m2) = (0.0, 0.0);
                        for j in 0..d {
                            let gh = g[r * d + j] * gv[j];
                            m1 += gh;
                            m2 += gh * xhat[r * d + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let gh = g[r * d + j] * gv[j];
                            gx[r * d + j] = rstd[r] * (gh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                    send(*x, &gx);
                }
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                        gb[j] += g[r * d + j];
                    }
                }
                send(*gain, &gg);
                send(*bias, &gb);
            }
            &Op::Reshape(x) => send(x, g),
            Op::Rearrange { x, index } => {
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (k, &src) in index.iter().enumerate() {
                    gx[src] += g[k];
                }
                send(*x, &gx);
            }
            Op::ConcatCols(parts) => {
                let (n, total) = node.value.dims2().unwrap();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    let mut gp = Vec::with_capacity(n * w);
                    for r in 0..n {
                        gp.extend_from_slice(&g[r * total + off..r * total + off + w]);
                    }
                    send(p, &gp);
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    send(p, &g[off..off + len]);
                    off += len;
                }
            }
            &Op::AddCols {
                base,
                delta,
                offset,
            } => {
                send(base, g);
                let (n, m) = node.value.dims2().unwrap();
                let w = self.value(delta).shape()[1];
                let mut gd = Vec::with_capacity(n * w);
                for r in 0..n {
                    gd.extend_from_slice(&g[r * m + offset..r * m + offset + w]);
                }
                send(delta, &gd);
            }
            &Op::CausalConv1d { x, kernel } => {
                let (l, c) = self.value(x).dims2().unwrap();
                let k = self.value(kernel).shape()[1];
                let (xv, kv) = (self.value(x).data(), self.value(kernel).data());
                let mut gx = vec![0.0; l * c];
                let mut gk = vec![0.0; c * k];
                for t in 0..l {
                    for ch in 0..c {
                        let go = g[t * c + ch];
                        for j in 0..k {
                            if t + j + 1 >= k {
                                let src = t + j + 1 - k;
                                gx[src * c + ch] += go * kv[ch * k + j];
                                gk[ch * k + j] += go * xv[src * c + ch];
                            }
                        }
                    }
                }
                send(x, &gx);
                send(kernel, &gk);
            }
            Op::SelectiveScan {
                x,
                delta,
                a,
                b,
                c,
                d,
                states,
            } => {
                let (l, ch) = self.value(*x).dims2().unwrap();
                let s = self.value(*a).shape()[1];
                let (xv, dv, av, bv, cv, skip) = (
                    self.value(*x).data(),
                    self.value(*delta).data(),
                    self.value(*a).data(),
                    self.value(*b).data(),
                    self.value(*c).data(),
                    self.value(*d).data(),
                );
                let mut gx = vec![0.0; l * ch];
                let mut gdelta = vec![0.0; l * ch];
                let mut ga = vec![0.0; ch * s];
                let mut gb = vec![0.0; l * s];
                let mut gc = vec![0.0; l * s];
                let mut gd = vec![0.0; ch];
                for c_ in 0..ch {
                    for s_ in 0..s {
                        let a_cs = av[c_ * s + s_];
                        let mut carry = 0.0;
                        for t in (0..l).rev() {
                            let gy = g[t * ch + c_];
                            let h = states[(t * ch + c_) * s + s_];
                            let h_prev = if t > 0 {
                                states[((t - 1) * ch + c_) * s + s_]
                            } else {
                                0.0
                            };
                            let dt = dv[t * ch + c_];
                            let decay = libm::exp(dt * a_cs);
                            gc[t * s + s_] += gy * h;
                            let gh = gy * cv[t * s + s_] + carry;
                            let g_arg = gh * h_prev * decay;
                            let xt = xv[t * ch + c_];
                            let bt = bv[t * s + s_];
                            gdelta[t * ch + c_] += g_arg * a_cs + gh * bt * xt;
                            ga[c_ * s + s_] += g_arg * dt;
                            gb[t * s + s_] += gh * dt * xt;
                            gx[t * ch + c_] += gh * dt * bt;
                            carry = gh * decay;
                        }
                    }
                }
                for t in 0..l {
                    for c_ in 0..ch {
                        let gy = g[t * ch + c_];
                        gd[c_] += gy * xv[t * ch + c_];
                        gx[t * ch + c_] += gy * skip[c_];
                    }
                }
                send(*x, &gx);
                send(*delta, &gdelta);
                send(*a, &ga);
                send(*b, &gb);
                send(*c, &gc);
                send(*d, &gd);
            }
            &Op::Sum(x) => {
                let n = self.value(x).numel();
                send(x, &vec![g[0]; n]);
            }
            Op::NllSum {
                logits,
                targets,
                mask,
            } => {
                let (t, v) = self.value(*logits).dims2().unwrap();
                let lv = self.value(*logits).data();
                let mut gl = vec![0.0; t * v];
                for i in 0..t {
                    if !mask[i] {
                        continue;
                    }
                    let row = &lv[i * v..(i + 1) * v];
                    let lse = logsumexp(row);
                    for j in 0..v {
                        gl[i * v + j] = g[0] * libm::exp(row[j] - lse);
                    }
                    gl[i * v + targets[i]] -= g[0];
                }
                send(*logits, &gl);
            }
        }
    }
}

pub fn logsumexp(row: &[f64]) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| libm::exp(v - mx)).sum();
    mx + libm::log(z)
}

/// A forward pass over a model: a fresh tape plus read access to the
/// parameters and any attached adapters. Each parameter is recorded at most
/// once per session.
pub struct Session<'m> {
    pub tape: Tape,
    params: &'m ParamStore,
    adapters: &'m AdapterSet,
    cache: Vec<Option<Var>>,
}

impl<'m> Session<'m> {
    pub fn new(params: &'m ParamStore, adapters: &'m AdapterSet) -> Self {
        Session {
            tape: Tape::new(),
            params,
            adapters,
            cache: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'m ParamStore {
        self.params
    }

    pub fn adapters(&self) -> &'m AdapterSet {
        self.adapters
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.cache[id.index()] {
            return v;
        }
        let v = self.tape.param_leaf(self.params, id);
        self.cache[id.index()] = Some(v);
        v
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }
}
