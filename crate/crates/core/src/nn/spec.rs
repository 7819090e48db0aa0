use serde::{Deserialize, Serialize};

/// Convolution stem: a 3×3 stride-2 convolution followed by inverted-residual stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemSpec {
    pub out_channels: usize,
    #[serde(default)]
    pub stages: Vec<StemStage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemStage {
    pub out_channels: usize,
    pub stride: usize,
    pub expansion_ratio: usize,
}

impl StemSpec {
    pub fn stride(&self) -> usize {
        2 * self.stages.iter().map(|s| s.stride).product::<usize>()
    }

    pub fn final_channels(&self) -> usize {
        self.stages.last().map_or(self.out_channels, |s| s.out_channels)
    }

    /// Expands the stage list into concrete block specs.
    pub fn blocks(&self) -> Vec<Mv2Spec> {
        let mut cin = self.out_channels;
        self.stages
            .iter()
            .map(|s| {
                let b = Mv2Spec {
                    in_channels: cin,
                    out_channels: s.out_channels,
                    stride: s.stride,
                    expansion_ratio: s.expansion_ratio,
                };
                cin = s.out_channels;
                b
            })
            .collect()
    }
}

/// Inverted-residual block: expand 1×1 → depthwise 3×3 → project 1×1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mv2Spec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub expansion_ratio: usize,
}

impl Mv2Spec {
    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    pub fn hidden_channels(&self) -> usize {
        self.in_channels * self.expansion_ratio
    }
}

/// Local/global MobileViT block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MobileVitSpec {
    pub channels: usize,
    pub transformer_dim: usize,
    pub transformer_layers: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub patch_h: usize,
    pub patch_w: usize,
    pub kernel_size: usize,
}

impl MobileVitSpec {
    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.transformer_dim as f64).round() as usize
    }

    pub(crate) fn problems(&self, at: &str, out: &mut Vec<String>) {
        if self.channels == 0 || self.transformer_dim == 0 {
            out.push(format!("{at}: channels and transformer_dim must be positive"));
        }
        if self.heads == 0 || self.transformer_dim % self.heads != 0 {
            out.push(format!(
                "{at}: transformer_dim {} not divisible by heads {}",
                self.transformer_dim, self.heads
            ));
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) || self.mlp_hidden() == 0 {
            out.push(format!("{at}: mlp_ratio {} must give a positive hidden size", self.mlp_ratio));
        }
        if self.patch_h == 0 || self.patch_w == 0 {
            out.push(format!("{at}: patch size must be positive"));
        }
        if self.kernel_size % 2 == 0 {
            out.push(format!("{at}: kernel_size {} must be odd", self.kernel_size));
        }
    }
}

/// Hybrid decoder stage: upsample, fuse the skip connection, refine globally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderBlockSpec {
    pub in_channels: usize,
    pub skip_channels: usize,
    pub out_channels: usize,
    pub global_refine: MobileVitSpec,
}
