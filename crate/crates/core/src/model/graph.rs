use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{EncoderStageSpec, ModelConfig};
use crate::analyzer::{kind, CostReport, CostSink};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{
    BatchNorm2d, Builder, Conv2d, ConvTranspose2d, Ctx, DecoderBlock, MobileVitBlock, Mv2Block, ParamStore, Stem,
};
use crate::tensor::{Scalar, Tensor};

/// Downsampling MV2 blocks followed by an optional MobileViT block.
#[derive(Debug, Clone)]
pub struct EncoderStage {
    pub name: String,
    pub blocks: Vec<Mv2Block>,
    pub mobilevit: Option<MobileVitBlock>,
}

impl EncoderStage {
    fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, spec: &EncoderStageSpec) -> Self {
        let mut b = b.sub(name);
        let blocks = spec
            .blocks
            .iter()
            .enumerate()
            .map(|(i, s)| Mv2Block::new(&mut b, &format!("mv2_{i}"), s))
            .collect();
        let mobilevit = spec.mobilevit.as_ref().map(|m| MobileVitBlock::new(&mut b, "mobilevit", m));
        Self {
            name: b.prefix().to_string(),
            blocks,
            mobilevit,
        }
    }

    fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(cx, x)?;
        }
        match &self.mobilevit {
            Some(m) => m.forward(cx, x),
            None => Ok(x),
        }
    }

    fn cost(&self, shape: &[usize], sink: &mut CostSink) -> Result<Vec<usize>> {
        let mut s = shape.to_vec();
        for b in &self.blocks {
            s = b.cost(&s, sink)?;
        }
        match &self.mobilevit {
            Some(m) => m.cost(&s, sink),
            None => Ok(s),
        }
    }
}

/// Transposed-conv upsampling to input resolution, then 1×1 logits.
#[derive(Debug, Clone)]
pub struct Head {
    pub upsample: ConvTranspose2d,
    pub bn: BatchNorm2d,
    pub classifier: Conv2d,
}

impl Head {
    fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, hidden: usize, cout: usize) -> Self {
        let mut b = b.sub(name);
        Self {
            upsample: ConvTranspose2d::new(&mut b, "upsample", cin, hidden, 2, 2, false),
            bn: BatchNorm2d::new(&mut b, "bn", hidden),
            classifier: Conv2d::new(&mut b, "classifier", hidden, cout, 1, 1, 1, true),
        }
    }

    fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.upsample.forward(cx, x)?;
        let y = self.bn.forward(cx, y)?;
        let y = cx.tape.silu(y)?;
        self.classifier.forward(cx, y)
    }

    fn cost(&self, shape: &[usize], sink: &mut CostSink) -> Result<Vec<usize>> {
        let s = self.upsample.cost(shape, sink)?;
        let act = s.iter().product::<usize>() as u64;
        let s = self.bn.cost(&s, act, sink)?;
        self.classifier.cost(&s, sink)
    }
}

/// One entry of the skip-connection table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkipEdge {
    pub from: String,
    pub to: String,
    pub channels: usize,
}

/// The assembled encoder-decoder network with its parameters.
#[derive(Debug, Clone)]
pub struct MobileUnetr<T: Scalar = f32> {
    config: ModelConfig,
    store: ParamStore<T>,
    stem: Stem,
    stages: Vec<EncoderStage>,
    bottleneck: EncoderStage,
    decoder: Vec<DecoderBlock>,
    head: Head,
    wiring: Vec<SkipEdge>,
}

/// Builds the model in `f32` storage.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<MobileUnetr<f32>> {
    MobileUnetr::build(config, seed)
}

impl<T: Scalar> MobileUnetr<T> {
    /// Validates `config` and initializes every parameter from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut root = Builder::new(&mut store, &mut rng);

        let mut enc = root.sub("encoder");
        let stem = Stem::new(&mut enc, "stem", config.in_channels, &config.stem);
        let stages: Vec<EncoderStage> = config
            .encoder_stages
            .iter()
            .enumerate()
            .map(|(i, s)| EncoderStage::new(&mut enc, &format!("stage{}", i + 1), s))
            .collect();
        let bottleneck = EncoderStage::new(&mut enc, "bottleneck", &config.bottleneck);

        let mut dec = root.sub("decoder");
        let decoder: Vec<DecoderBlock> = config
            .decoder_stages
            .iter()
            .enumerate()
            .map(|(i, s)| DecoderBlock::new(&mut dec, &format!("stage{}", i + 1), s))
            .collect();
        let last = config.decoder_stages.last().map_or(0, |d| d.out_channels);
        let head = Head::new(&mut dec, "head", last, config.head.upsample_channels, config.out_channels);

        let mut sources = vec![("encoder.stem".to_string(), config.stem.final_channels())];
        sources.extend(stages.iter().zip(&config.encoder_stages).map(|(s, spec)| {
            (s.name.clone(), spec.out_channels().unwrap_or(0))
        }));
        let wiring = sources
            .into_iter()
            .rev()
            .zip(&decoder)
            .map(|((from, channels), d)| SkipEdge {
                from,
                to: d.name.clone(),
                channels,
            })
            .collect();

        Ok(Self {
            config: config.clone(),
            store,
            stem,
            stages,
            bottleneck,
            decoder,
            head,
            wiring,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Which encoder output feeds which decoder stage.
    pub fn skip_wiring(&self) -> &[SkipEdge] {
        &self.wiring
    }

    /// Top-level layers in execution order.
    pub fn layer_names(&self) -> Vec<String> {
        let mut v = vec!["encoder.stem".to_string()];
        v.extend(self.stages.iter().map(|s| s.name.clone()));
        v.push(self.bottleneck.name.clone());
        v.extend(self.decoder.iter().map(|d| d.name.clone()));
        v.push("decoder.head".to_string());
        v
    }

    /// Parameters in construction order.
    pub fn named_parameters(&self) -> Vec<(&str, &Tensor<T>)> {
        self.store.params().iter().map(|p| (p.name.as_str(), &p.tensor)).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_elements()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::shape(
                "model",
                format!("expected [N, {}, H, W], got {shape:?}", self.config.in_channels),
            ));
        }
        self.config.check_resolution(shape[2])?;
        self.config.check_resolution(shape[3])
    }

    /// Mask logits `[N, out_channels, H, W]` for an input `[N, C, H, W]`.
    pub fn forward(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        self.check_input(cx.tape.shape(x))?;
        let mut skips = Vec::with_capacity(self.stages.len() + 1);
        let mut y = self.stem.forward(cx, x)?;
        for stage in &self.stages {
            skips.push(y);
            y = stage.forward(cx, y)?;
        }
        skips.push(y);
        y = self.bottleneck.forward(cx, y)?;
        for (block, skip) in self.decoder.iter().zip(skips.into_iter().rev()) {
            y = block.forward(cx, y, skip)?;
        }
        self.head.forward(cx, y)
    }

    /// Eval-mode logits for a batch, without keeping the graph.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut cx = Ctx::new(&mut tape, &self.store, false);
        let y = self.forward(&mut cx, xv)?;
        Ok(tape.value(y).clone())
    }

    /// Per-layer parameter and MAC accounting for a square input of side `resolution`.
    pub fn cost_report(&self, resolution: usize) -> Result<CostReport> {
        let shape = [1, self.config.in_channels, resolution, resolution];
        self.check_input(&shape)?;
        let mut sink = CostSink::new();
        let mut skips = Vec::new();
        let mut s = self.stem.cost(&shape, &mut sink)?;
        for stage in &self.stages {
            skips.push(s.clone());
            s = stage.cost(&s, &mut sink)?;
        }
        skips.push(s.clone());
        s = self.bottleneck.cost(&s, &mut sink)?;
        for (block, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            s = block.cost(&s, skip, &mut sink)?;
        }
        let out = self.head.cost(&s, &mut sink)?;
        debug_assert_eq!(out[2], resolution);
        let rows = sink.into_rows();
        debug_assert!(rows.iter().all(|r| r.kind != kind::ELEMENTWISE || r.params == 0));
        Ok(CostReport::from_rows(resolution, rows))
    }

    /// Same structure with parameters converted to another storage precision.
    pub fn cast<U: Scalar>(&self) -> MobileUnetr<U> {
        MobileUnetr {
            config: self.config.clone(),
            store: self.store.cast(),
            stem: self.stem.clone(),
            stages: self.stages.clone(),
            bottleneck: self.bottleneck.clone(),
            decoder: self.decoder.clone(),
            head: self.head.clone(),
            wiring: self.wiring.clone(),
        }
    }
}
