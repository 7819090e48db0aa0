use super::{BatchStats, Builder, BufferId, Ctx, ParamId, BN_EPS, LN_EPS};
use crate::analyzer::{kind, CostSink};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Std-dev of the truncated-normal init used for transformer weights.
pub const LINEAR_INIT_STD: f64 = 0.02;

fn expect_channels(layer: &str, shape: &[usize], axis: usize, want: usize) -> Result<()> {
    match shape.get(axis) {
        Some(&c) if c == want => Ok(()),
        _ => Err(Error::shape(
            "layer",
            format!("{layer} expects {want} channels on axis {axis}, got shape {shape:?}"),
        )),
    }
}

/// 2-D convolution with "same"-style zero padding `k / 2`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        let mut b = b.sub(name);
        let fan_in = cin / groups * k * k;
        let weight = b.kaiming_uniform("weight", &[cout, cin / groups, k, k], fan_in);
        let bias = bias.then(|| b.zeros("bias", &[cout]));
        Self {
            name: b.prefix().to_string(),
            cin,
            cout,
            k,
            stride,
            pad: k / 2,
            groups,
            weight,
            bias,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = self.bias.map(|id| cx.param(id));
        cx.tape.conv2d(x, w, b, self.stride, self.pad, self.groups)
    }

    pub fn param_count(&self) -> u64 {
        (self.k * self.k * (self.cin / self.groups) * self.cout + if self.bias.is_some() { self.cout } else { 0 }) as u64
    }

    pub fn out_shape(&self, shape: &[usize]) -> Result<Vec<usize>> {
        expect_channels(&self.name, shape, 1, self.cin)?;
        let (h, w) = (shape[2], shape[3]);
        if self.k > h + 2 * self.pad || self.k > w + 2 * self.pad {
            return Err(Error::shape("conv2d", format!("{}: input {h}x{w} smaller than kernel", self.name)));
        }
        let oh = (h + 2 * self.pad - self.k) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.k) / self.stride + 1;
        Ok(vec![shape[0], self.cout, oh, ow])
    }

    pub fn cost(&self, shape: &[usize], sink: &mut CostSink) -> Result<Vec<usize>> {
        let out = self.out_shape(shape)?;
        let macs = out[0] * self.k * self.k * (self.cin / self.groups) * self.cout * out[2] * out[3];
        sink.push(&self.name, kind::CONV, self.param_count(), macs as u64, 0);
        Ok(out)
    }
}

/// Transposed convolution, weight layout `[Cin, Cout, K, K]`, no padding.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl ConvTranspose2d {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Self {
        let mut b = b.sub(name);
        let weight = b.kaiming_uniform("weight", &[cin, cout, k, k], cout * k * k);
        let bias = bias.then(|| b.zeros("bias", &[cout]));
        Self {
            name: b.prefix().to_string(),
            cin,
            cout,
            k,
            stride,
            weight,
            bias,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = self.bias.map(|id| cx.param(id));
        cx.tape.conv_transpose2d(x, w, b, self.stride, 0)
    }

    pub fn param_count(&self) -> u64 {
        (self.k * self.k * self.cin * self.cout + if self.bias.is_some() { self.cout } else { 0 }) as u64
    }

    pub fn cost(&self, shape: &[usize], sink: &mut CostSink) -> Result<Vec<usize>> {
        expect_channels(&self.name, shape, 1, self.cin)?;
        let (h, w) = (shape[2], shape[3]);
        let macs = shape[0] * self.k * self.k * self.cin * self.cout * h * w;
        sink.push(&self.name, kind::CONV_TRANSPOSE, self.param_count(), macs as u64, 0);
        Ok(vec![
            shape[0],
            self.cout,
            (h - 1) * self.stride + self.k,
            (w - 1) * self.stride + self.k,
        ])
    }
}

/// Batch normalization with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Self {
        let mut b = b.sub(name);
        let gamma = b.ones("weight", &[channels]);
        let beta = b.zeros("bias", &[channels]);
        let running_mean = b.buffer("running_mean", Tensor::zeros(&[channels]));
        let running_var = b.buffer("running_var", Tensor::ones(&[channels]));
        Self {
            name: b.prefix().to_string(),
            channels,
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = cx.param(self.gamma);
        let b = cx.param(self.beta);
        if cx.training() {
            let (y, stats) = cx.tape.batch_norm2d(x, g, b, None, true, BN_EPS)?;
            let (mean, var) = stats.expect("training mode returns batch statistics");
            let s = cx.tape.shape(x);
            let count = s[0] * s[2] * s[3];
            cx.record_stats(BatchStats {
                running_mean: self.running_mean,
                running_var: self.running_var,
                mean,
                var,
                count,
            });
            Ok(y)
        } else {
            let (rm, rv) = (cx.buffer_f64(self.running_mean), cx.buffer_f64(self.running_var));
            Ok(cx.tape.batch_norm2d(x, g, b, Some((&rm, &rv)), false, BN_EPS)?.0)
        }
    }

    pub fn param_count(&self) -> u64 {
        2 * self.channels as u64
    }

    pub fn cost(&self, shape: &[usize], extra_elementwise: u64, sink: &mut CostSink) -> Result<Vec<usize>> {
        expect_channels(&self.name, shape, 1, self.channels)?;
        let numel: usize = shape.iter().product();
        sink.push(
            &self.name,
            kind::BATCH_NORM,
            self.param_count(),
            0,
            numel as u64 + extra_elementwise,
        );
        Ok(shape.to_vec())
    }
}

/// Convolution → batch norm → optional SiLU.
#[derive(Debug, Clone)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub act: bool,
}

impl ConvBnAct {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        act: bool,
    ) -> Self {
        let mut b = b.sub(name);
        Self {
            conv: Conv2d::new(&mut b, "conv", cin, cout, k, stride, groups, false),
            bn: BatchNorm2d::new(&mut b, "bn", cout),
            act,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        let y = self.bn.forward(cx, y)?;
        if self.act {
            cx.tape.silu(y)
        } else {
            Ok(y)
        }
    }

    pub fn cost(&self, shape: &[usize], sink: &mut CostSink) -> Result<Vec<usize>> {
        let out = self.conv.cost(shape, sink)?;
        let act = if self.act { out.iter().product::<usize>() as u64 } else { 0 };
        self.bn.cost(&out, act, sink)
    }
}

/// `y = x·Wᵀ + b`, weight `[Dout, Din]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, din: usize, dout: usize) -> Self {
        let mut b = b.sub(name);
        let weight = b.trunc_normal("weight", &[dout, din], LINEAR_INIT_STD);
        let bias = b.zeros("bias", &[dout]);
        Self {
            name: b.prefix().to_string(),
            din,
            dout,
            weight,
            bias,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = cx.param(self.bias);
        cx.tape.linear(x, w, Some(b))
    }

    pub fn param_count(&self) -> u64 {
        (self.din * self.dout + self.dout) as u64
    }

    pub fn cost(&self, shape: &[usize], sink: &mut CostSink) -> Result<Vec<usize>> {
        expect_channels(&self.name, shape, shape.len() - 1, self.din)?;
        let rows: usize = shape[..shape.len() - 1].iter().product();
        sink.push(&self.name, kind::LINEAR, self.param_count(), (rows * self.din * self.dout) as u64, 0);
        let mut out = shape.to_vec();
        *out.last_mut().unwrap() = self.dout;
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, dim: usize) -> Self {
        let mut b = b.sub(name);
        let gamma = b.ones("weight", &[dim]);
        let beta = b.zeros("bias", &[dim]);
        Self {
            name: b.prefix().to_string(),
            dim,
            gamma,
            beta,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = cx.param(self.gamma);
        let b = cx.param(self.beta);
        cx.tape.layer_norm(x, g, b, LN_EPS)
    }

    pub fn param_count(&self) -> u64 {
        2 * self.dim as u64
    }

    pub fn cost(&self, shape: &[usize], sink: &mut CostSink) -> Result<Vec<usize>> {
        expect_channels(&self.name, shape, shape.len() - 1, self.dim)?;
        let numel: usize = shape.iter().product();
        sink.push(&self.name, kind::LAYER_NORM, self.param_count(), 0, numel as u64);
        Ok(shape.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::nn::test_util::{block_gradcheck, build, random};

    #[test]
    fn conv_param_count_formula() {
        let (c, store) = build(0, |b| Conv2d::new(b, "c", 16, 32, 3, 1, 1, true));
        assert_eq!(c.param_count(), 4_640);
        assert_eq!(store.num_elements(), 4_640);
    }

    #[test]
    fn linear_param_count_formula() {
        let (l, store) = build(0, |b| Linear::new(b, "l", 64, 64));
        assert_eq!(l.param_count(), 4_160);
        assert_eq!(store.num_elements(), 4_160);
    }

    #[test]
    fn single_conv_macs() {
        let (c, _) = build(0, |b| Conv2d::new(b, "c", 1, 1, 3, 1, 1, false));
        let mut sink = CostSink::new();
        c.cost(&[1, 1, 4, 4], &mut sink).unwrap();
        assert_eq!(sink.into_rows()[0].macs, 144);
    }

    #[test]
    fn conv_bn_act_gradcheck_training() {
        let (layer, store) = build(3, |b| ConvBnAct::new(b, "cba", 3, 4, 3, 2, 1, true));
        let x = random(&[2, 3, 5, 5], 11);
        let r = block_gradcheck(&store, &[x], true, |cx, v| layer.forward(cx, v[0]));
        assert!(r.max_rel_err < 1e-3, "{r:?}");
    }

    #[test]
    fn depthwise_conv_gradcheck() {
        let (layer, store) = build(4, |b| Conv2d::new(b, "dw", 4, 4, 3, 1, 4, true));
        let x = random(&[1, 4, 4, 4], 12);
        let r = block_gradcheck(&store, &[x], true, |cx, v| layer.forward(cx, v[0]));
        assert!(r.max_rel_err < 1e-3, "{r:?}");
    }

    #[test]
    fn eval_batch_norm_uses_running_stats() {
        let (bn, store) = build(0, |b| BatchNorm2d::new(b, "bn", 2));
        let mut tape = Tape::<f64>::new();
        let xv = random(&[1, 2, 3, 3], 5);
        let x = tape.constant(xv.clone());
        let mut cx = Ctx::new(&mut tape, &store, false);
        let y = bn.forward(&mut cx, x).unwrap();
        assert!(cx.take_batch_stats().is_empty());
        assert!(tape.value(y).max_abs_diff(&xv) < 1e-5);
    }

    #[test]
    fn running_mean_momentum_update() {
        let (bn, mut store) = build(0, |b| BatchNorm2d::new(b, "bn", 1));
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[2, 1, 2, 2], 10.0));
        let mut cx = Ctx::new(&mut tape, &store, true);
        bn.forward(&mut cx, x).unwrap();
        let stats = cx.take_batch_stats();
        store.apply_batch_stats(&stats, 0.1);
        assert!((store.buffer(bn.running_mean).tensor.data()[0] - 1.0).abs() < 1e-12);
    }
}
