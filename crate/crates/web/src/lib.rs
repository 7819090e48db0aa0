//! WebAssembly bindings for the static demo page in `www/`.

use mutr_core::data::gen_sample;
use mutr_core::model::{build_model, ModelConfig};
use mutr_core::train::{lr_at, ScheduleSpec};
use serde_json::json;
use wasm_bindgen::prelude::*;

const MAX_LESION_SIZE: usize = 512;

fn config(spec: &str) -> Result<ModelConfig, String> {
    match spec.trim() {
        "reference" => Ok(ModelConfig::reference()),
        "tiny" => Ok(ModelConfig::tiny()),
        text => ModelConfig::from_json(text).map_err(|e| e.to_string()),
    }
}

/// Cost report grouped by stage (`encoder.stage1`, `decoder.head`, ...), as JSON.
///
/// `config` is `reference`, `tiny` or a JSON config; `resolution` 0 means the
/// config's own image size.
#[wasm_bindgen]
pub fn analyze(config_spec: &str, resolution: usize) -> Result<String, String> {
    let cfg = config(config_spec)?;
    let resolution = if resolution == 0 { cfg.image_size } else { resolution };
    let model = build_model(&cfg, 0).map_err(|e| e.to_string())?;
    let report = model.cost_report(resolution).map_err(|e| e.to_string())?;

    let mut stages: Vec<(String, u64, u64)> = Vec::new();
    for row in &report.rows {
        let stage = row.name.splitn(3, '.').take(2).collect::<Vec<_>>().join(".");
        match stages.last_mut() {
            Some(last) if last.0 == stage => {
                last.1 += row.params;
                last.2 += row.macs;
            }
            _ => stages.push((stage, row.params, row.macs)),
        }
    }
    let t = &report.totals;
    Ok(json!({
        "resolution": resolution,
        "params": t.params,
        "macs": t.macs,
        "flops": t.flops,
        "decoder_params": report.subtree("decoder").params,
        "layers": report.rows.len(),
        "stages": stages
            .iter()
            .map(|(name, params, macs)| json!({ "name": name, "params": params, "macs": macs }))
            .collect::<Vec<_>>(),
    })
    .to_string())
}

/// One synthetic sample rendered as RGBA buffers for a canvas.
#[wasm_bindgen]
pub struct Lesion {
    size: usize,
    image: Vec<u8>,
    mask: Vec<u8>,
    area: f64,
}

#[wasm_bindgen]
impl Lesion {
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, seed: u32, index: u32, hair: bool) -> Result<Lesion, String> {
        if !(8..=MAX_LESION_SIZE).contains(&size) {
            return Err(format!("size must lie in [8, {MAX_LESION_SIZE}]"));
        }
        let s = gen_sample(size, seed as u64, index as u64, hair);
        let hw = size * size;
        let (img, m) = (s.image.data(), s.mask.data());
        let mut image = Vec::with_capacity(4 * hw);
        let mut mask = Vec::with_capacity(4 * hw);
        for i in 0..hw {
            for c in 0..3 {
                image.push((img[c * hw + i] * 255.0).round() as u8);
            }
            image.push(255);
            let v = if m[i] > 0.5 { 255 } else { 0 };
            mask.extend_from_slice(&[v, v, v, 255]);
        }
        let area = m.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
        Ok(Lesion { size, image, mask, area })
    }

    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    /// Lesion share of the image.
    #[wasm_bindgen(getter)]
    pub fn area(&self) -> f64 {
        self.area
    }

    pub fn image(&self) -> Vec<u8> {
        self.image.clone()
    }

    pub fn mask(&self) -> Vec<u8> {
        self.mask.clone()
    }

    /// The image with the mask boundary drawn in green.
    pub fn overlay(&self) -> Vec<u8> {
        let n = self.size;
        let inside = |x: usize, y: usize| self.mask[4 * (y * n + x)] > 0;
        let mut out = self.image.clone();
        for y in 0..n {
            for x in 0..n {
                if !inside(x, y) {
                    continue;
                }
                let edge = x == 0
                    || y == 0
                    || x + 1 == n
                    || y + 1 == n
                    || !inside(x - 1, y)
                    || !inside(x + 1, y)
                    || !inside(x, y - 1)
                    || !inside(x, y + 1);
                if edge {
                    out[4 * (y * n + x)..4 * (y * n + x) + 3].copy_from_slice(&[40, 230, 90]);
                }
            }
        }
        out
    }
}

/// Learning rate at `points` evenly spaced epochs across `[0, total_epochs]`.
#[wasm_bindgen]
pub fn lr_curve(base_lr: f64, warmup_epochs: f64, total_epochs: f64, min_lr: f64, points: usize) -> Result<Vec<f64>, String> {
    let spec = ScheduleSpec {
        base_lr,
        warmup_epochs,
        total_epochs,
        min_lr,
    };
    spec.validate().map_err(|e| e.to_string())?;
    let points = points.max(2);
    (0..points)
        .map(|i| lr_at(total_epochs * i as f64 / (points - 1) as f64, &spec).map_err(|e| e.to_string()))
        .collect()
}
