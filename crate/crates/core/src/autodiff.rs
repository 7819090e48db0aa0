//! Tape-based reverse-mode differentiation.
//!
//! Every operation evaluates eagerly, stores its output on the [`Tape`] and
//! records what it needs for the backward sweep. [`Tape::backward`] walks the
//! nodes in strict reverse recording order.

use crate::error::{Error, Result};
use crate::kernels::{self, Conv2dDims, ConvT2dDims, NormSaved};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Sigmoid(Var),
    Silu(Var),
    Relu6(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: NormSaved,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: NormSaved,
        training: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: Conv2dDims,
    },
    ConvT2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvT2dDims,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        din: usize,
        dout: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        plan: MatMulPlan,
    },
    /// `out[i] = x[index[i]]`; covers permutes, patch unfolding/folding and
    /// nearest-neighbour resizing.
    Gather { x: Var, index: Vec<usize> },
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    BceWithLogits { logits: Var, target: Var },
}

#[derive(Debug, Clone)]
struct MatMulPlan {
    m: usize,
    k: usize,
    p: usize,
    /// `(a_offset, b_offset)` per output batch, in units of matrices.
    pairs: Vec<(usize, usize)>,
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Operation recorder for one forward/backward pair.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    macs: u64,
    flip_silu_grad: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    /// Raw gradient, or `None` when the loss does not depend on `v`.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros for values the loss never reached.
    pub fn wrt<T: Scalar>(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::from_parts(shape.clone(), g.iter().map(|&x| T::from_f64(x)).collect()),
            None => Tensor::zeros(shape),
        }
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("operand shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

fn accumulate_owned(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            macs: 0,
            flip_silu_grad: false,
        }
    }

    /// Deliberately negates the SiLU backward rule on this tape.
    #[doc(hidden)]
    pub fn inject_sign_flip(&mut self) {
        self.flip_silu_grad = true;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by convolutions and matrix products so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn f64s(&self, v: Var) -> Vec<f64> {
        self.nodes[v.0].value.to_f64_vec()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records an input. Gradients flow to it iff `t.requires_grad`.
    pub fn leaf(&mut self, mut t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad;
        t.grad = None;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that always receives a gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        // Checked after narrowing so storage-type overflow is caught too.
        let mut finite = true;
        let stored = data
            .into_iter()
            .map(|v| {
                let t = T::from_f64(v);
                finite &= t.to_f64().is_finite();
                t
            })
            .collect();
        if !finite {
            return Err(Error::NonFinite { op: op_name });
        }
        let value = Tensor::from_parts(shape, stored);
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let (xa, xb) = (self.f64s(a), self.f64s(b));
        let data = xa.iter().zip(&xb).map(|(&p, &q)| f(p, q)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, data, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let data = self.f64s(x).into_iter().map(f).collect();
        let shape = self.shape(x).to_vec();
        self.push(name, shape, data, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |p, q| p / q, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.f64s(x).iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.f64s(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean", vec![1], vec![s], Op::Mean(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary("silu", x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn relu6(&mut self, x: Var) -> Result<Var> {
        self.unary("relu6", x, |v| v.clamp(0.0, 6.0), Op::Relu6(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::arg("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = kernels::split_axis(&shape, axis);
        let y = kernels::softmax_forward(&self.f64s(x), outer, len, inner);
        self.push("softmax", shape, y, Op::Softmax { x, outer, len, inner }, &[x])
    }

    /// Normalizes over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let dim = *shape.last().unwrap();
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [dim] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{what} has shape {:?}, expected [{dim}]", self.shape(v)),
                ));
            }
        }
        let (y, saved) = kernels::layer_norm_forward(&self.f64s(x), dim, &self.f64s(gamma), &self.f64s(beta), eps);
        self.push("layer_norm", shape, y, Op::LayerNorm { x, gamma, beta, saved }, &[x, gamma, beta])
    }

    /// Batch normalization over `[N, C, H, W]`.
    ///
    /// In training mode the batch statistics `(mean, biased var)` are
    /// returned so the caller can update its running estimates; in eval mode
    /// `running` must hold `(mean, var)`.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        training: bool,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("batch_norm2d", format!("expected NCHW input, got {shape:?}")));
        }
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::shape(
                    "batch_norm2d",
                    format!("{what} has shape {:?}, expected [{c}]", self.shape(v)),
                ));
            }
        }
        let xs = self.f64s(x);
        let (mean, var, stats) = if training {
            if n * hw == 1 {
                return Err(Error::DegenerateBatch);
            }
            let (m, v) = kernels::channel_stats(&xs, n, c, hw);
            (m.clone(), v.clone(), Some((m, v)))
        } else {
            let (m, v) = running.ok_or_else(|| Error::arg("batch_norm2d", "eval mode needs running statistics"))?;
            if m.len() != c || v.len() != c {
                return Err(Error::shape("batch_norm2d", format!("running stats length != {c}")));
            }
            (m.to_vec(), v.to_vec(), None)
        };
        let (y, saved) = kernels::batch_norm_apply(&xs, n, c, hw, &mean, &var, &self.f64s(gamma), &self.f64s(beta), eps);
        let out = self.push(
            "batch_norm2d",
            shape,
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
                training,
            },
            &[x, gamma, beta],
        )?;
        Ok((out, stats))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        if stride == 0 {
            return Err(Error::arg(OP, "stride must be positive"));
        }
        if groups == 0 {
            return Err(Error::arg(OP, "groups must be positive"));
        }
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(OP, format!("expected 4-d input and weight, got {xs:?} and {ws:?}")));
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, cig, k) = (ws[0], ws[1], ws[2]);
        if ws[3] != k {
            return Err(Error::shape(OP, format!("kernel must be square, got {ws:?}")));
        }
        if cin % groups != 0 || cout % groups != 0 {
            return Err(Error::shape(OP, format!("channels {cin}->{cout} not divisible by groups {groups}")));
        }
        if cig != cin / groups {
            return Err(Error::shape(
                OP,
                format!("weight expects {cig} input channels per group, input gives {}", cin / groups),
            ));
        }
        if k > h + 2 * padding || k > wd + 2 * padding {
            return Err(Error::shape(OP, format!("kernel {k} larger than padded input {h}x{wd}+2*{padding}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(OP, format!("bias shape {:?} != [{cout}]", self.shape(b))));
            }
        }
        let dims = Conv2dDims {
            n,
            cin,
            cout,
            h,
            w: wd,
            k,
            stride,
            pad: padding,
            groups,
        };
        let bias = b.map(|b| self.f64s(b));
        let y = kernels::conv2d_forward(&dims, &self.f64s(x), &self.f64s(w), bias.as_deref());
        let (oh, ow) = dims.out_hw();
        self.macs += dims.macs();
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(OP, vec![n, cout, oh, ow], y, Op::Conv2d { x, w, b, dims }, &inputs)
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv_transpose2d";
        if stride == 0 {
            return Err(Error::arg(OP, "stride must be positive"));
        }
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(OP, format!("expected 4-d input and weight, got {xs:?} and {ws:?}")));
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (wcin, cout, k) = (ws[0], ws[1], ws[2]);
        if wcin != cin || ws[3] != k {
            return Err(Error::shape(OP, format!("weight {ws:?} incompatible with input {xs:?}")));
        }
        if (h - 1) * stride + k <= 2 * padding || (wd - 1) * stride + k <= 2 * padding {
            return Err(Error::shape(OP, format!("padding {padding} leaves an empty output")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(OP, format!("bias shape {:?} != [{cout}]", self.shape(b))));
            }
        }
        let dims = ConvT2dDims {
            n,
            cin,
            cout,
            h,
            w: wd,
            k,
            stride,
            pad: padding,
        };
        let bias = b.map(|b| self.f64s(b));
        let y = kernels::conv_transpose2d_forward(&dims, &self.f64s(x), &self.f64s(w), bias.as_deref());
        let (oh, ow) = dims.out_hw();
        self.macs += dims.macs();
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(OP, vec![n, cout, oh, ow], y, Op::ConvT2d { x, w, b, dims }, &inputs)
    }

    /// `x[..., Din] · wᵀ + b` with `w` of shape `[Dout, Din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || *xs.last().unwrap() != ws[1] {
            return Err(Error::shape(OP, format!("input {xs:?} incompatible with weight {ws:?}")));
        }
        let (dout, din) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape(OP, format!("bias shape {:?} != [{dout}]", self.shape(b))));
            }
        }
        let rows = xs.iter().product::<usize>() / din;
        let mut y = vec![0.0; rows * dout];
        kernels::gemm_nt(rows, din, dout, &self.f64s(x), &self.f64s(w), &mut y);
        if let Some(b) = b {
            let bv = self.f64s(b);
            for r in y.chunks_mut(dout) {
                r.iter_mut().zip(&bv).for_each(|(v, c)| *v += c);
            }
        }
        self.macs += (rows * din * dout) as u64;
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(OP, shape, y, Op::Linear { x, w, b, din, dout }, &inputs)
    }

    /// Batched matrix product with broadcasting over leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "matmul";
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(OP, format!("operands must be at least 2-d, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, p) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape(OP, format!("inner dimensions differ: {sa:?} x {sb:?}")));
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let nd = ba.len().max(bb.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut v = vec![1; nd - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(ba), pad(bb));
        let mut batch = Vec::with_capacity(nd);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(Error::shape(OP, format!("batch dimensions not broadcastable: {sa:?} x {sb:?}")));
            }
            batch.push(x.max(y));
        }
        let nbatch: usize = batch.iter().product();
        let mut pairs = Vec::with_capacity(nbatch);
        let mut counter = vec![0usize; nd];
        for _ in 0..nbatch {
            let (mut oa, mut ob) = (0, 0);
            for d in 0..nd {
                oa = oa * pa[d] + if pa[d] == 1 { 0 } else { counter[d] };
                ob = ob * pb[d] + if pb[d] == 1 { 0 } else { counter[d] };
            }
            pairs.push((oa, ob));
            for d in (0..nd).rev() {
                counter[d] += 1;
                if counter[d] < batch[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        let (xa, xb) = (self.f64s(a), self.f64s(b));
        let mut y = vec![0.0; nbatch * m * p];
        for (i, &(oa, ob)) in pairs.iter().enumerate() {
            kernels::gemm(
                m,
                k,
                p,
                &xa[oa * m * k..(oa + 1) * m * k],
                &xb[ob * k * p..(ob + 1) * k * p],
                &mut y[i * m * p..(i + 1) * m * p],
            );
        }
        self.macs += (nbatch * m * k * p) as u64;
        let mut shape = batch;
        shape.extend([m, p]);
        self.push(OP, shape, y, Op::MatMul { a, b, plan: MatMulPlan { m, k, p, pairs } }, &[a, b])
    }

    fn gather(&mut self, name: &'static str, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let xs = self.f64s(x);
        let y = index.iter().map(|&i| xs[i]).collect();
        self.push(name, shape, y, Op::Gather { x, index }, &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::arg("permute", format!("{perm:?} is not a permutation of {} axes", shape.len())));
        }
        let index = kernels::permute_index(&shape, perm);
        let out: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        self.gather("permute", x, index, out)
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(Error::arg("transpose", "needs at least 2 axes"));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 1, nd - 2);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(x)),
            ));
        }
        let data = self.f64s(x);
        self.push("reshape", shape.to_vec(), data, Op::Reshape(x), &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        const OP: &str = "concat";
        let first = inputs
            .first()
            .ok_or_else(|| Error::arg(OP, "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::arg(OP, format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::shape(OP, format!("{s:?} incompatible with {base:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut y = Vec::with_capacity(outer * total * inner);
        let parts: Vec<Vec<f64>> = inputs.iter().map(|&v| self.f64s(v)).collect();
        for o in 0..outer {
            for (v, part) in inputs.iter().zip(&parts) {
                let len = self.shape(*v)[axis] * inner;
                y.extend_from_slice(&part[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(OP, shape, y, Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    /// `[N, D, H, W]` → `[N·ph·pw, (H/ph)·(W/pw), D]`.
    pub fn unfold_patches(&mut self, x: Var, ph: usize, pw: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("unfold_patches", format!("expected NCHW input, got {s:?}")));
        }
        let (n, d, h, w) = (s[0], s[1], s[2], s[3]);
        if ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0 {
            return Err(Error::PatchSize { ph, pw, h, w });
        }
        let index = kernels::unfold_index(n, d, h, w, ph, pw);
        self.gather("unfold_patches", x, index, vec![n * ph * pw, (h / ph) * (w / pw), d])
    }

    /// Inverse of [`Tape::unfold_patches`].
    pub fn fold_patches(&mut self, seq: Var, ph: usize, pw: usize, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(seq).to_vec();
        if ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0 {
            return Err(Error::PatchSize { ph, pw, h, w });
        }
        if s.len() != 3 || s[0] % (ph * pw) != 0 || s[1] != (h / ph) * (w / pw) {
            return Err(Error::shape(
                "fold_patches",
                format!("sequence {s:?} does not tile a {h}x{w} map with {ph}x{pw} patches"),
            ));
        }
        let (n, d) = (s[0] / (ph * pw), s[2]);
        let unfold = kernels::unfold_index(n, d, h, w, ph, pw);
        let mut index = vec![0usize; unfold.len()];
        for (dst, &src) in unfold.iter().enumerate() {
            index[src] = dst;
        }
        self.gather("fold_patches", seq, index, vec![n, d, h, w])
    }

    /// Nearest-neighbour upsampling of `[N, C, H, W]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(Error::arg("upsample_nearest", format!("bad input {s:?} or factor {factor}")));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let mut index = Vec::with_capacity(nc * oh * ow);
        for p in 0..nc {
            for y in 0..oh {
                for xx in 0..ow {
                    index.push((p * h + y / factor) * w + xx / factor);
                }
            }
        }
        self.gather("upsample_nearest", x, index, vec![s[0], s[1], oh, ow])
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `target`.
    pub fn bce_with_logits(&mut self, logits: Var, target: Var) -> Result<Var> {
        same_shape("bce_with_logits", self.shape(logits), self.shape(target))?;
        let (z, t) = (self.f64s(logits), self.f64s(target));
        let total: f64 = z
            .iter()
            .zip(&t)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let loss = total / z.len() as f64;
        self.push("bce_with_logits", vec![1], vec![loss], Op::BceWithLogits { logits, target }, &[logits, target])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).numel() != 1 {
            return Err(Error::arg(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Grads { grads, shapes })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let needs = |v: Var| self.needs(v);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        accumulate(&mut grads[v.0], g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if needs(*b) {
                    accumulate_owned(&mut grads[b.0], g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.f64s(*a), self.f64s(*b));
                if needs(*a) {
                    accumulate_owned(&mut grads[a.0], g.iter().zip(&xb).map(|(g, y)| g * y).collect());
                }
                if needs(*b) {
                    accumulate_owned(&mut grads[b.0], g.iter().zip(&xa).map(|(g, x)| g * x).collect());
                }
            }
            Op::Div(a, b) => {
                let (xa, xb) = (self.f64s(*a), self.f64s(*b));
                if needs(*a) {
                    accumulate_owned(&mut grads[a.0], g.iter().zip(&xb).map(|(g, y)| g / y).collect());
                }
                if needs(*b) {
                    let d = g.iter().zip(xa.iter().zip(&xb)).map(|(g, (x, y))| -g * x / (y * y)).collect();
                    accumulate_owned(&mut grads[b.0], d);
                }
            }
            Op::Scale(x, c) => {
                if needs(*x) {
                    accumulate_owned(&mut grads[x.0], g.iter().map(|v| v * c).collect());
                }
            }
            Op::AddScalar(x) => {
                if needs(*x) {
                    accumulate(&mut grads[x.0], g);
                }
            }
            Op::Sum(x) => {
                if needs(*x) {
                    accumulate_owned(&mut grads[x.0], vec![g[0]; self.value(*x).numel()]);
                }
            }
            Op::Mean(x) => {
                if needs(*x) {
                    let n = self.value(*x).numel();
                    accumulate_owned(&mut grads[x.0], vec![g[0] / n as f64; n]);
                }
            }
            Op::Sigmoid(x) => {
                if needs(*x) {
                    let y = node.value.to_f64_vec();
                    accumulate_owned(&mut grads[x.0], g.iter().zip(&y).map(|(g, y)| g * y * (1.0 - y)).collect());
                }
            }
            Op::Silu(x) => {
                if needs(*x) {
                    let sign = if self.flip_silu_grad { -1.0 } else { 1.0 };
                    let d = g
                        .iter()
                        .zip(self.f64s(*x))
                        .map(|(g, v)| {
                            let s = sigmoid(v);
                            sign * g * s * (1.0 + v * (1.0 - s))
                        })
                        .collect();
                    accumulate_owned(&mut grads[x.0], d);
                }
            }
            Op::Relu6(x) => {
                if needs(*x) {
                    let d = g
                        .iter()
                        .zip(self.f64s(*x))
                        .map(|(g, v)| if v > 0.0 && v < 6.0 { *g } else { 0.0 })
                        .collect();
                    accumulate_owned(&mut grads[x.0], d);
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                if needs(*x) {
                    let y = node.value.to_f64_vec();
                    accumulate_owned(&mut grads[x.0], kernels::softmax_backward(&y, g, *outer, *len, *inner));
                }
            }
            Op::LayerNorm { x, gamma, beta, saved } => {
                let dim = *node.value.shape().last().unwrap();
                let (dx, dg, db) = kernels::layer_norm_backward(saved, &self.f64s(*gamma), g, dim);
                for (v, d) in [(*x, dx), (*gamma, dg), (*beta, db)] {
                    if needs(v) {
                        accumulate_owned(&mut grads[v.0], d);
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, saved, training } => {
                let s = node.value.shape();
                let (dx, dg, db) =
                    kernels::batch_norm_backward(saved, &self.f64s(*gamma), g, s[0], s[1], s[2] * s[3], *training);
                for (v, d) in [(*x, dx), (*gamma, dg), (*beta, db)] {
                    if needs(v) {
                        accumulate_owned(&mut grads[v.0], d);
                    }
                }
            }
            Op::Conv2d { x, w, b, dims } => {
                let (dx, dw, db) = kernels::conv2d_backward(dims, &self.f64s(*x), &self.f64s(*w), g, needs(*x));
                if let Some(dx) = dx {
                    accumulate_owned(&mut grads[x.0], dx);
                }
                if needs(*w) {
                    accumulate_owned(&mut grads[w.0], dw);
                }
                if let Some(b) = b.filter(|b| needs(*b)) {
                    accumulate_owned(&mut grads[b.0], db);
                }
            }
            Op::ConvT2d { x, w, b, dims } => {
                let (dx, dw, db) =
                    kernels::conv_transpose2d_backward(dims, &self.f64s(*x), &self.f64s(*w), g, needs(*x));
                if let Some(dx) = dx {
                    accumulate_owned(&mut grads[x.0], dx);
                }
                if needs(*w) {
                    accumulate_owned(&mut grads[w.0], dw);
                }
                if let Some(b) = b.filter(|b| needs(*b)) {
                    accumulate_owned(&mut grads[b.0], db);
                }
            }
            Op::Linear { x, w, b, din, dout } => {
                let rows = g.len() / dout;
                if needs(*x) {
                    let mut dx = vec![0.0; rows * din];
                    kernels::gemm(rows, *dout, *din, g, &self.f64s(*w), &mut dx);
                    accumulate_owned(&mut grads[x.0], dx);
                }
                if needs(*w) {
                    let mut dw = vec![0.0; dout * din];
                    kernels::gemm_tn(*dout, rows, *din, g, &self.f64s(*x), &mut dw);
                    accumulate_owned(&mut grads[w.0], dw);
                }
                if let Some(b) = b.filter(|b| needs(*b)) {
                    let mut db = vec![0.0; *dout];
                    for r in g.chunks(*dout) {
                        db.iter_mut().zip(r).for_each(|(a, v)| *a += v);
                    }
                    accumulate_owned(&mut grads[b.0], db);
                }
            }
            Op::MatMul { a, b, plan } => {
                let MatMulPlan { m, k, p, pairs } = plan;
                let (m, k, p) = (*m, *k, *p);
                let (xa, xb) = (self.f64s(*a), self.f64s(*b));
                if needs(*a) {
                    let mut da = vec![0.0; xa.len()];
                    for (i, &(oa, ob)) in pairs.iter().enumerate() {
                        kernels::gemm_nt(
                            m,
                            p,
                            k,
                            &g[i * m * p..(i + 1) * m * p],
                            &xb[ob * k * p..(ob + 1) * k * p],
                            &mut da[oa * m * k..(oa + 1) * m * k],
                        );
                    }
                    accumulate_owned(&mut grads[a.0], da);
                }
                if needs(*b) {
                    let mut db = vec![0.0; xb.len()];
                    for (i, &(oa, ob)) in pairs.iter().enumerate() {
                        kernels::gemm_tn(
                            k,
                            m,
                            p,
                            &xa[oa * m * k..(oa + 1) * m * k],
                            &g[i * m * p..(i + 1) * m * p],
                            &mut db[ob * k * p..(ob + 1) * k * p],
                        );
                    }
                    accumulate_owned(&mut grads[b.0], db);
                }
            }
            Op::Gather { x, index } => {
                if needs(*x) {
                    let mut dx = vec![0.0; self.value(*x).numel()];
                    for (gv, &src) in g.iter().zip(index) {
                        dx[src] += gv;
                    }
                    accumulate_owned(&mut grads[x.0], dx);
                }
            }
            Op::Reshape(x) => {
                if needs(*x) {
                    accumulate(&mut grads[x.0], g);
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis] * inner;
                    if needs(*v) {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                        }
                        accumulate_owned(&mut grads[v.0], d);
                    }
                    offset += len;
                }
            }
            Op::BceWithLogits { logits, target } => {
                let (z, t) = (self.f64s(*logits), self.f64s(*target));
                let n = z.len() as f64;
                if needs(*logits) {
                    let d = z.iter().zip(&t).map(|(&z, &t)| g[0] * (sigmoid(z) - t) / n).collect();
                    accumulate_owned(&mut grads[logits.0], d);
                }
                if needs(*target) {
                    let d = z.iter().map(|&z| -g[0] * z / n).collect();
                    accumulate_owned(&mut grads[target.0], d);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn conv_unit_kernel_sums_window() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = tape.conv2d(x, w, None, 1, 0, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let mut tape = Tape::<f32>::new();
        let xv = Tensor::<f32>::arange(&[1, 1, 4, 5]);
        let x = tape.constant(xv.clone());
        let w = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = tape.conv2d(x, w, None, 1, 0, 1).unwrap();
        assert_eq!(tape.value(y), &xv);
    }

    #[test]
    fn conv_output_shape_formula() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 16, 8, 8]));
        let w = tape.constant(Tensor::zeros(&[32, 16, 3, 3]));
        let y = tape.conv2d(x, w, None, 2, 1, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 32, 4, 4]);
    }

    #[test]
    fn conv_rejects_bad_arguments() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 6, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
        assert!(matches!(tape.conv2d(x, w, None, 0, 1, 2), Err(Error::Argument { .. })));
        assert!(matches!(tape.conv2d(x, w, None, 1, 1, 4), Err(Error::Shape { .. })));
        let big = tape.constant(Tensor::zeros(&[4, 3, 7, 7]));
        assert!(matches!(tape.conv2d(x, big, None, 1, 1, 2), Err(Error::Shape { .. })));
    }

    #[test]
    fn transpose_conv_doubles_and_spreads() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 8, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[8, 5, 2, 2]));
        let y = tape.conv_transpose2d(x, w, None, 2, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 5, 8, 8]);

        let one = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        let w = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        let y = tape.conv_transpose2d(one, w, None, 2, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0; 4]);
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[17.0, 39.0]);

        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(y), tape.value(a));

        let a = tape.constant(Tensor::zeros(&[4, 8, 16]));
        let b = tape.constant(Tensor::zeros(&[4, 16, 32]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(y), &[4, 8, 32]);

        let bad = tape.constant(Tensor::zeros(&[4, 15, 32]));
        assert!(matches!(tape.matmul(a, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_broadcasts_batch_of_one() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::arange(&[3, 2, 2]));
        let b = tape.constant(t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y), tape.value(a));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-6 && v[1].abs() < 1e-6);

        let x = tape.constant(t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
        let y = tape.softmax(x, 0).unwrap();
        for (got, want) in tape.value(y).data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!(tape.softmax(x, 1).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let ones2 = tape.constant(Tensor::ones(&[2]));
        let zeros2 = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[2], &[-1.0, 1.0]));
        let y = tape.layer_norm(x, ones2, zeros2, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);

        let ones3 = tape.constant(Tensor::ones(&[3]));
        let zeros3 = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(Tensor::ones(&[3]));
        let y = tape.layer_norm(x, ones3, zeros3, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 3]);

        let five = tape.constant(t(&[2], &[5.0, 5.0]));
        let x = tape.constant(t(&[2], &[3.0, -7.5]));
        let y = tape.layer_norm(x, zeros2, five, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 5.0]);

        assert!(tape.layer_norm(x, ones3, zeros3, 1e-5).is_err());
    }

    #[test]
    fn batch_norm_modes() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let xv = Tensor::<f64>::arange(&[2, 2, 3, 3]);
        let x = tape.constant(xv.clone());
        let (y, stats) = tape
            .batch_norm2d(x, g, b, Some((&[0.0, 0.0], &[1.0, 1.0])), false, 0.0)
            .unwrap();
        assert!(stats.is_none());
        assert_eq!(tape.value(y), &xv);

        let (y, stats) = tape.batch_norm2d(x, g, b, None, true, 1e-5).unwrap();
        let (mean, _) = stats.unwrap();
        assert_eq!(mean, vec![13.0, 22.0]);
        let out = tape.value(y);
        for c in 0..2 {
            let mut s = 0.0;
            for n in 0..2 {
                for i in 0..9 {
                    s += out.at(&[n, c, i / 3, i % 3]);
                }
            }
            assert!((s / 18.0).abs() < 1e-5);
        }

        let one = tape.constant(Tensor::ones(&[1, 2, 1, 1]));
        assert!(matches!(
            tape.batch_norm2d(one, g, b, None, true, 1e-5),
            Err(Error::DegenerateBatch)
        ));
    }

    #[test]
    fn silu_and_sigmoid_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.0, 1.0, 40.0]));
        let y = tape.silu(x).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((v[2] - 40.0).abs() < 1e-12);
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).data()[0], 0.5);
    }

    #[test]
    fn patch_round_trip_and_raster_order() {
        let mut tape = Tape::<f32>::new();
        let xv = Tensor::<f32>::arange(&[1, 1, 2, 2]);
        let x = tape.constant(xv.clone());
        let seq = tape.unfold_patches(x, 2, 2).unwrap();
        assert_eq!(tape.shape(seq), &[4, 1, 1]);
        assert_eq!(tape.value(seq).data(), &[0.0, 1.0, 2.0, 3.0]);
        let back = tape.fold_patches(seq, 2, 2, 2, 2).unwrap();
        assert_eq!(tape.value(back), &xv);

        let big = tape.constant(Tensor::zeros(&[1, 64, 4, 4]));
        let seq = tape.unfold_patches(big, 2, 2).unwrap();
        assert_eq!(tape.shape(seq), &[4, 4, 64]);
        assert!(matches!(tape.unfold_patches(big, 3, 2), Err(Error::PatchSize { .. })));
        assert!(tape.fold_patches(seq, 2, 2, 4, 8).is_err());
    }

    #[test]
    fn concat_and_elementwise() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::ones(&[1, 8, 4, 4]));
        let b = tape.constant(Tensor::zeros(&[1, 16, 4, 4]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[1, 24, 4, 4]);
        let z = tape.constant(Tensor::zeros(&[1, 8, 4, 4]));
        let s = tape.add(a, z).unwrap();
        assert_eq!(tape.value(s), tape.value(a));
        let bad = tape.constant(Tensor::zeros(&[1, 8, 4, 5]));
        assert!(tape.concat(&[a, bad], 1).is_err());
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn backward_simple_losses() {
        let mut tape = Tape::<f64>::new();
        let xv = t(&[3], &[1.0, -2.0, 0.5]);
        let x = tape.param(xv.clone());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt::<f64>(x).data(), &[1.0; 3]);

        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt::<f64>(x).data(), &[2.0, -4.0, 1.0]);

        assert!(matches!(tape.backward(sq), Err(Error::Argument { .. })));
    }

    #[test]
    fn unreached_leaf_gets_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones(&[2]));
        let unused = tape.param(Tensor::ones(&[3]));
        let l = tape.sum(x).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt::<f64>(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[1], &[1.0]));
        let z = tape.constant(t(&[1], &[0.0]));
        assert!(matches!(tape.div(a, z), Err(Error::NonFinite { .. })));
        let mut tape = Tape::<f32>::new();
        let big = tape.constant(Tensor::full(&[1], 3e38));
        assert!(matches!(tape.scale(big, 10.0), Err(Error::NonFinite { .. })));
    }
}
