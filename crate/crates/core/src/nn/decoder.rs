use super::layers::{ConvBnAct, ConvTranspose2d};
use super::mobilevit::MobileVitBlock;
use super::spec::DecoderBlockSpec;
use super::{Builder, Ctx};
use crate::analyzer::CostSink;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Which decoder steps to run; used to observe the step order in isolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecoderAblation {
    #[default]
    Full,
    /// Stop after upsampling and skip fusion.
    SkipGlobalRefine,
}

/// Hybrid decoder stage.
///
/// 1. 2×2 stride-2 transposed convolution Cin→Cout (doubles H and W).
/// 2. Concat with the skip connection, 3×3 conv (Cout+Cs)→Cout.
/// 3. MobileViT block on Cout channels.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub spec: DecoderBlockSpec,
    pub name: String,
    pub upsample: ConvTranspose2d,
    pub local: ConvBnAct,
    pub global: MobileVitBlock,
}

impl DecoderBlock {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, spec: &DecoderBlockSpec) -> Self {
        let mut b = b.sub(name);
        let upsample = ConvTranspose2d::new(&mut b, "upsample", spec.in_channels, spec.out_channels, 2, 2, true);
        let local = ConvBnAct::new(
            &mut b,
            "local",
            spec.out_channels + spec.skip_channels,
            spec.out_channels,
            3,
            1,
            1,
            true,
        );
        let global = MobileVitBlock::new(&mut b, "global", &spec.global_refine);
        Self {
            spec: spec.clone(),
            name: b.prefix().to_string(),
            upsample,
            local,
            global,
        }
    }

    fn check_wiring(&self, x: &[usize], skip: &[usize]) -> Result<()> {
        let ok = x.len() == 4
            && skip.len() == 4
            && x[0] == skip[0]
            && x[1] == self.spec.in_channels
            && skip[1] == self.spec.skip_channels
            && skip[2] == 2 * x[2]
            && skip[3] == 2 * x[3];
        if ok {
            Ok(())
        } else {
            Err(Error::DecoderWiring(format!(
                "{}: input {x:?} with skip {skip:?}; expected [N, {}, H, W] and [N, {}, 2H, 2W]",
                self.name, self.spec.in_channels, self.spec.skip_channels
            )))
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var, skip: Var) -> Result<Var> {
        self.forward_with(cx, x, skip, DecoderAblation::Full)
    }

    pub fn forward_with<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var, skip: Var, ablation: DecoderAblation) -> Result<Var> {
        self.check_wiring(cx.tape.shape(x), cx.tape.shape(skip))?;
        let up = self.upsample.forward(cx, x)?;
        let fused = cx.tape.concat(&[up, skip], 1)?;
        let local = self.local.forward(cx, fused)?;
        match ablation {
            DecoderAblation::Full => self.global.forward(cx, local),
            DecoderAblation::SkipGlobalRefine => Ok(local),
        }
    }

    pub fn cost(&self, shape: &[usize], skip: &[usize], sink: &mut CostSink) -> Result<Vec<usize>> {
        self.check_wiring(shape, skip)?;
        let up = self.upsample.cost(shape, sink)?;
        let local = self.local.cost(&[up[0], up[1] + skip[1], up[2], up[3]], sink)?;
        self.global.cost(&local, sink)
    }
}
