use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{DecoderBlockSpec, MobileVitSpec, Mv2Spec, StemSpec, StemStage};

const REFERENCE_JSON: &str = include_str!("../../../../configs/mobileunetr-ref.json");
const TINY_JSON: &str = include_str!("../../../../configs/mobileunetr-tiny.json");

/// One encoder level: inverted-residual blocks, optionally followed by a MobileViT block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderStageSpec {
    pub blocks: Vec<Mv2Spec>,
    #[serde(default)]
    pub mobilevit: Option<MobileVitSpec>,
}

impl EncoderStageSpec {
    pub fn stride(&self) -> usize {
        self.blocks.iter().map(|b| b.stride).product()
    }

    pub fn out_channels(&self) -> Option<usize> {
        self.blocks.last().map(|b| b.out_channels)
    }
}

/// Final 2× upsampling to input resolution plus the 1×1 logit projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub upsample_channels: usize,
}

/// Declarative description of the full encoder-decoder network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stem: StemSpec,
    pub encoder_stages: Vec<EncoderStageSpec>,
    pub bottleneck: EncoderStageSpec,
    pub decoder_stages: Vec<DecoderBlockSpec>,
    pub head: HeadSpec,
}

impl ModelConfig {
    /// The frozen full-size configuration (`configs/mobileunetr-ref.json`).
    pub fn reference() -> Self {
        Self::from_json(REFERENCE_JSON).expect("bundled reference config is valid")
    }

    /// The small configuration used for tests and desk-scale training.
    pub fn tiny() -> Self {
        Self::from_json(TINY_JSON).expect("bundled tiny config is valid")
    }

    /// Parses JSON, rejecting unknown keys, then validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// A small random valid configuration; `image_size` is a valid input size for it.
    ///
    /// Depth, widths, expansion ratios, transformer sizes and patch sizes all vary
    /// with `seed`.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let depth = rng.random_range(0..=2usize);
        let width = |rng: &mut ChaCha8Rng| *[4, 6, 8, 12].choose(rng).unwrap();
        let mvit = |rng: &mut ChaCha8Rng, channels: usize| {
            let heads = rng.random_range(1..=2usize);
            MobileVitSpec {
                channels,
                transformer_dim: heads * *[4, 8].choose(rng).unwrap(),
                transformer_layers: rng.random_range(1..=2),
                heads,
                mlp_ratio: *[1.0, 2.0].choose(rng).unwrap(),
                patch_h: rng.random_range(1..=2),
                patch_w: rng.random_range(1..=2),
                kernel_size: *[1, 3].choose(rng).unwrap(),
            }
        };

        let mut stem = StemSpec {
            out_channels: width(rng),
            stages: Vec::new(),
        };
        if rng.random_bool(0.5) {
            stem.stages.push(StemStage {
                out_channels: width(rng),
                stride: 1,
                expansion_ratio: rng.random_range(1..=3),
            });
        }
        let mut channels = stem.final_channels();
        let stage = |rng: &mut ChaCha8Rng, channels: &mut usize| {
            let mut blocks = vec![Mv2Spec {
                in_channels: *channels,
                out_channels: width(rng),
                stride: 2,
                expansion_ratio: rng.random_range(1..=3),
            }];
            if rng.random_bool(0.5) {
                let c = blocks[0].out_channels;
                blocks.push(Mv2Spec {
                    in_channels: c,
                    out_channels: c,
                    stride: 1,
                    expansion_ratio: 2,
                });
            }
            *channels = blocks.last().unwrap().out_channels;
            let mobilevit = rng.random_bool(0.6).then(|| mvit(rng, *channels));
            EncoderStageSpec { blocks, mobilevit }
        };
        let encoder_stages: Vec<_> = (0..depth).map(|_| stage(rng, &mut channels)).collect();
        let bottleneck = stage(rng, &mut channels);

        let mut cfg = Self {
            image_size: 0,
            in_channels: rng.random_range(1..=3),
            out_channels: rng.random_range(1..=2),
            stem,
            encoder_stages,
            bottleneck,
            decoder_stages: Vec::new(),
            head: HeadSpec {
                upsample_channels: width(rng),
            },
        };
        for skip in cfg.skip_channels().into_iter().rev() {
            let out = width(rng);
            cfg.decoder_stages.push(DecoderBlockSpec {
                in_channels: channels,
                skip_channels: skip,
                out_channels: out,
                global_refine: mvit(rng, out),
            });
            channels = out;
        }
        // Bottleneck map of 2x2 or 4x4, so every patch size of 1 or 2 divides each level.
        cfg.image_size = cfg.total_stride() * rng.random_range(1..=2usize) * 2;
        cfg
    }

    /// Downsampling factor between the input and the bottleneck.
    pub fn total_stride(&self) -> usize {
        self.stem.stride()
            * self.encoder_stages.iter().map(EncoderStageSpec::stride).product::<usize>()
            * self.bottleneck.stride()
    }

    /// Upsampling factor of the decoder plus head.
    pub fn total_upsampling(&self) -> usize {
        2usize.pow(self.decoder_stages.len() as u32 + 1)
    }

    /// Channel counts of the skip connections, shallowest first.
    pub fn skip_channels(&self) -> Vec<usize> {
        let mut v = vec![self.stem.final_channels()];
        v.extend(self.encoder_stages.iter().filter_map(EncoderStageSpec::out_channels));
        v
    }

    /// Checks every structural constraint, reporting all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.image_size == 0 {
            p.push("image_size must be positive".into());
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            p.push("in_channels and out_channels must be positive".into());
        }
        if self.stem.out_channels == 0 {
            p.push("stem.out_channels must be positive".into());
        }
        for (i, b) in self.stem.blocks().iter().enumerate() {
            mv2_problems(&format!("stem.stages[{i}]"), b, &mut p);
        }
        if self.stem.stride() != 2 {
            p.push(format!("stem total stride is {}, must be 2", self.stem.stride()));
        }

        let mut channels = self.stem.final_channels();
        let stages = self.encoder_stages.iter().enumerate().map(|(i, s)| (format!("encoder_stages[{i}]"), s));
        for (at, stage) in stages.chain(std::iter::once(("bottleneck".to_string(), &self.bottleneck))) {
            if stage.blocks.is_empty() {
                p.push(format!("{at}: needs at least one block"));
                continue;
            }
            for (j, b) in stage.blocks.iter().enumerate() {
                let at = format!("{at}.blocks[{j}]");
                if b.in_channels != channels {
                    p.push(format!("{at}: in_channels {} but previous layer gives {channels}", b.in_channels));
                }
                mv2_problems(&at, b, &mut p);
                channels = b.out_channels;
            }
            if stage.stride() != 2 {
                p.push(format!("{at}: total stride is {}, must be 2", stage.stride()));
            }
            if let Some(m) = &stage.mobilevit {
                if m.channels != channels {
                    p.push(format!("{at}.mobilevit: channels {} but stage gives {channels}", m.channels));
                }
                m.problems(&format!("{at}.mobilevit"), &mut p);
            }
        }

        let skips = self.skip_channels();
        if self.decoder_stages.len() != skips.len() {
            p.push(format!(
                "{} decoder stages but the encoder provides {} skip connections",
                self.decoder_stages.len(),
                skips.len()
            ));
        }
        for (i, d) in self.decoder_stages.iter().enumerate() {
            let at = format!("decoder_stages[{i}]");
            if d.in_channels != channels {
                p.push(format!("{at}: in_channels {} but previous stage gives {channels}", d.in_channels));
            }
            if let Some(&s) = skips.iter().rev().nth(i) {
                if d.skip_channels != s {
                    p.push(format!("{at}: skip_channels {} but mirrored encoder stage gives {s}", d.skip_channels));
                }
            }
            if d.out_channels == 0 {
                p.push(format!("{at}: out_channels must be positive"));
            }
            if d.global_refine.channels != d.out_channels {
                p.push(format!(
                    "{at}.global_refine: channels {} must equal out_channels {}",
                    d.global_refine.channels, d.out_channels
                ));
            }
            d.global_refine.problems(&format!("{at}.global_refine"), &mut p);
            channels = d.out_channels;
        }
        if self.head.upsample_channels == 0 {
            p.push("head.upsample_channels must be positive".into());
        }

        if p.is_empty() {
            if self.total_stride() != self.total_upsampling() {
                p.push(format!(
                    "encoder stride {} does not match decoder upsampling {}",
                    self.total_stride(),
                    self.total_upsampling()
                ));
            }
            if let Err(e) = self.check_resolution(self.image_size) {
                p.push(format!("image_size: {e}"));
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Whether a square input of side `size` passes through every stage.
    pub fn check_resolution(&self, size: usize) -> Result<()> {
        let stride = self.total_stride();
        if size == 0 || size % stride != 0 {
            return Err(Error::shape(
                "model",
                format!("input size {size} not divisible by total stride {stride}"),
            ));
        }
        let mut res = size / self.stem.stride();
        let check = |m: &MobileVitSpec, res: usize, at: &str| -> Result<()> {
            if res % m.patch_h != 0 || res % m.patch_w != 0 {
                return Err(Error::shape(
                    "model",
                    format!("{at}: {res}x{res} feature map not divisible by patch {}x{}", m.patch_h, m.patch_w),
                ));
            }
            Ok(())
        };
        for (i, s) in self.encoder_stages.iter().enumerate() {
            res /= s.stride();
            if let Some(m) = &s.mobilevit {
                check(m, res, &format!("encoder_stages[{i}]"))?;
            }
        }
        res /= self.bottleneck.stride();
        if let Some(m) = &self.bottleneck.mobilevit {
            check(m, res, "bottleneck")?;
        }
        for (i, d) in self.decoder_stages.iter().enumerate() {
            res *= 2;
            check(&d.global_refine, res, &format!("decoder_stages[{i}]"))?;
        }
        Ok(())
    }
}

fn mv2_problems(at: &str, b: &Mv2Spec, p: &mut Vec<String>) {
    if b.in_channels == 0 || b.out_channels == 0 {
        p.push(format!("{at}: channel counts must be positive"));
    }
    if b.stride != 1 && b.stride != 2 {
        p.push(format!("{at}: stride {} must be 1 or 2", b.stride));
    }
    if b.expansion_ratio == 0 {
        p.push(format!("{at}: expansion_ratio must be positive"));
    }
}
