use super::layers::ConvBnAct;
use super::spec::{Mv2Spec, StemSpec};
use super::{Builder, Ctx};
use crate::analyzer::{kind, CostSink};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// MobileNetV2 inverted-residual block.
#[derive(Debug, Clone)]
pub struct Mv2Block {
    pub spec: Mv2Spec,
    pub name: String,
    /// Absent when the expansion ratio is 1.
    pub expand: Option<ConvBnAct>,
    pub depthwise: ConvBnAct,
    pub project: ConvBnAct,
}

impl Mv2Block {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, spec: &Mv2Spec) -> Self {
        let mut b = b.sub(name);
        let hidden = spec.hidden_channels();
        let expand = (spec.expansion_ratio != 1)
            .then(|| ConvBnAct::new(&mut b, "expand", spec.in_channels, hidden, 1, 1, 1, true));
        let depthwise = ConvBnAct::new(&mut b, "depthwise", hidden, hidden, 3, spec.stride, hidden, true);
        let project = ConvBnAct::new(&mut b, "project", hidden, spec.out_channels, 1, 1, 1, false);
        Self {
            spec: spec.clone(),
            name: b.prefix().to_string(),
            expand,
            depthwise,
            project,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let c = cx.tape.shape(x)[1];
        if c != self.spec.in_channels {
            return Err(Error::shape(
                "mv2",
                format!("{} expects {} channels, got {c}", self.name, self.spec.in_channels),
            ));
        }
        let mut y = x;
        if let Some(e) = &self.expand {
            y = e.forward(cx, y)?;
        }
        y = self.depthwise.forward(cx, y)?;
        y = self.project.forward(cx, y)?;
        if self.spec.has_residual() {
            y = cx.tape.add(y, x)?;
        }
        Ok(y)
    }

    pub fn cost(&self, shape: &[usize], sink: &mut CostSink) -> Result<Vec<usize>> {
        let mut s = shape.to_vec();
        if let Some(e) = &self.expand {
            s = e.cost(&s, sink)?;
        }
        s = self.depthwise.cost(&s, sink)?;
        s = self.project.cost(&s, sink)?;
        if self.spec.has_residual() {
            let numel: usize = s.iter().product();
            sink.push(&format!("{}.residual", self.name), kind::ELEMENTWISE, 0, 0, numel as u64);
        }
        Ok(s)
    }
}

/// Convolution stem for low-level features and the first downsampling.
#[derive(Debug, Clone)]
pub struct Stem {
    pub spec: StemSpec,
    pub conv: ConvBnAct,
    pub blocks: Vec<Mv2Block>,
}

impl Stem {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, in_channels: usize, spec: &StemSpec) -> Self {
        let mut b = b.sub(name);
        let conv = ConvBnAct::new(&mut b, "conv", in_channels, spec.out_channels, 3, 2, 1, true);
        let blocks = spec
            .blocks()
            .iter()
            .enumerate()
            .map(|(i, s)| Mv2Block::new(&mut b, &format!("mv2_{i}"), s))
            .collect();
        Self {
            spec: spec.clone(),
            conv,
            blocks,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = cx.tape.shape(x);
        let stride = self.spec.stride();
        if s.len() != 4 || s[2] % stride != 0 || s[3] % stride != 0 {
            return Err(Error::shape(
                "stem",
                format!("input {s:?} not divisible by stem stride {stride}"),
            ));
        }
        let mut y = self.conv.forward(cx, x)?;
        for b in &self.blocks {
            y = b.forward(cx, y)?;
        }
        Ok(y)
    }

    pub fn cost(&self, shape: &[usize], sink: &mut CostSink) -> Result<Vec<usize>> {
        let mut s = self.conv.cost(shape, sink)?;
        for b in &self.blocks {
            s = b.cost(&s, sink)?;
        }
        Ok(s)
    }
}
