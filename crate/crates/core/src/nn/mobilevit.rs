use super::layers::{Conv2d, ConvBnAct};
use super::spec::MobileVitSpec;
use super::transformer::TransformerLayer;
use super::{Builder, Ctx};
use crate::analyzer::CostSink;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Local convolution + patch-wise transformer block with input fusion.
///
/// Pipeline: depthwise-separable 3×3 (C→C) → 1×1 projection C→d → unfold into
/// patches → transformer layers → fold → 1×1 projection d→C → concat with the
/// block input → 3×3 fusion conv 2C→C.
#[derive(Debug, Clone)]
pub struct MobileVitBlock {
    pub spec: MobileVitSpec,
    pub name: String,
    pub local_dw: ConvBnAct,
    pub local_pw: ConvBnAct,
    pub proj_in: Conv2d,
    pub layers: Vec<TransformerLayer>,
    pub proj_out: ConvBnAct,
    pub fusion: ConvBnAct,
}

impl MobileVitBlock {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, spec: &MobileVitSpec) -> Self {
        let mut b = b.sub(name);
        let (c, d, k) = (spec.channels, spec.transformer_dim, spec.kernel_size);
        let local_dw = ConvBnAct::new(&mut b, "local.depthwise", c, c, k, 1, c, true);
        let local_pw = ConvBnAct::new(&mut b, "local.pointwise", c, c, 1, 1, 1, true);
        let proj_in = Conv2d::new(&mut b, "proj_in", c, d, 1, 1, 1, false);
        let layers = (0..spec.transformer_layers)
            .map(|i| TransformerLayer::new(&mut b, &format!("transformer.{i}"), d, spec.heads, spec.mlp_hidden()))
            .collect();
        let proj_out = ConvBnAct::new(&mut b, "proj_out", d, c, 1, 1, 1, true);
        let fusion = ConvBnAct::new(&mut b, "fusion", 2 * c, c, k, 1, 1, true);
        Self {
            spec: spec.clone(),
            name: b.prefix().to_string(),
            local_dw,
            local_pw,
            proj_in,
            layers,
            proj_out,
            fusion,
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.spec.channels {
            return Err(Error::shape(
                "mobilevit",
                format!("{} expects [N, {}, H, W], got {shape:?}", self.name, self.spec.channels),
            ));
        }
        let (ph, pw) = (self.spec.patch_h, self.spec.patch_w);
        if shape[2] % ph != 0 || shape[3] % pw != 0 {
            return Err(Error::PatchSize {
                ph,
                pw,
                h: shape[2],
                w: shape[3],
            });
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let shape = cx.tape.shape(x).to_vec();
        self.check_input(&shape)?;
        let (h, w) = (shape[2], shape[3]);
        let (ph, pw) = (self.spec.patch_h, self.spec.patch_w);

        let y = self.local_dw.forward(cx, x)?;
        let y = self.local_pw.forward(cx, y)?;
        let y = self.proj_in.forward(cx, y)?;
        let mut seq = cx.tape.unfold_patches(y, ph, pw)?;
        for layer in &self.layers {
            seq = layer.forward(cx, seq)?;
        }
        let y = cx.tape.fold_patches(seq, ph, pw, h, w)?;
        let y = self.proj_out.forward(cx, y)?;
        let y = cx.tape.concat(&[y, x], 1)?;
        self.fusion.forward(cx, y)
    }

    pub fn cost(&self, shape: &[usize], sink: &mut CostSink) -> Result<Vec<usize>> {
        self.check_input(shape)?;
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let (ph, pw) = (self.spec.patch_h, self.spec.patch_w);
        let s = self.local_dw.cost(shape, sink)?;
        let s = self.local_pw.cost(&s, sink)?;
        let s = self.proj_in.cost(&s, sink)?;
        let mut seq = vec![n * ph * pw, (h / ph) * (w / pw), s[1]];
        for layer in &self.layers {
            seq = layer.cost(&seq, sink)?;
        }
        let s = self.proj_out.cost(&[n, seq[2], h, w], sink)?;
        self.fusion.cost(&[n, s[1] + shape[1], h, w], sink)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::nn::test_util::{block_gradcheck, build, random};
    use crate::tensor::Tensor;

    pub(crate) fn spec(c: usize, d: usize, l: usize) -> MobileVitSpec {
        MobileVitSpec {
            channels: c,
            transformer_dim: d,
            transformer_layers: l,
            heads: 2,
            mlp_ratio: 2.0,
            patch_h: 2,
            patch_w: 2,
            kernel_size: 3,
        }
    }

    #[test]
    fn shape_is_preserved() {
        let mut s = spec(48, 64, 2);
        s.heads = 4;
        let (block, store) = build(0, |b| MobileVitBlock::new(b, "mvit", &s));
        let mut tape = Tape::<f32>::new();
        let store = store.cast::<f32>();
        let x = tape.constant(random(&[1, 48, 16, 16], 1).cast());
        let mut cx = Ctx::new(&mut tape, &store, false);
        let y = block.forward(&mut cx, x).unwrap();
        assert_eq!(tape.shape(y), &[1, 48, 16, 16]);
    }

    #[test]
    fn zero_layers_reduce_to_conv_path() {
        let (block, store) = build(1, |b| MobileVitBlock::new(b, "mvit", &spec(4, 4, 0)));
        assert!(block.layers.is_empty());
        let xv = random(&[1, 4, 4, 4], 2);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(xv);
        let mut cx = Ctx::new(&mut tape, &store, false);
        let y = block.forward(&mut cx, x).unwrap();
        let l = block.local_dw.forward(&mut cx, x).unwrap();
        let l = block.local_pw.forward(&mut cx, l).unwrap();
        let l = block.proj_in.forward(&mut cx, l).unwrap();
        let l = block.proj_out.forward(&mut cx, l).unwrap();
        let l = cx.tape.concat(&[l, x], 1).unwrap();
        let expect = block.fusion.forward(&mut cx, l).unwrap();
        assert_eq!(tape.value(y), tape.value(expect));
    }

    #[test]
    fn patch_divisibility_is_checked() {
        let (block, store) = build(0, |b| MobileVitBlock::new(b, "mvit", &spec(4, 8, 1)));
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 4, 5, 4]));
        let mut cx = Ctx::new(&mut tape, &store, false);
        assert!(matches!(block.forward(&mut cx, x), Err(Error::PatchSize { .. })));
    }

    #[test]
    fn mobilevit_gradcheck_tiny() {
        let (block, store) = build(2, |b| MobileVitBlock::new(b, "mvit", &spec(4, 8, 1)));
        let r = block_gradcheck(&store, &[random(&[1, 4, 4, 4], 3)], true, |cx, v| block.forward(cx, v[0]));
        assert!(r.max_rel_err < 1e-3, "{r:?}");
    }
}
