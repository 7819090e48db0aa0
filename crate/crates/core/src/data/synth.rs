//! Procedural skin-lesion images.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub const MIN_LESION_FRACTION: f64 = 0.02;
pub const MAX_LESION_FRACTION: f64 = 0.60;

/// One generated image `[3, H, W]` in `[0, 1]` and its mask `[1, H, W]` in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
}

impl Wave {
    fn random(rng: &mut ChaCha8Rng, max_freq: f64, amp: f64) -> Self {
        Self {
            fx: rng.random_range(-max_freq..max_freq),
            fy: rng.random_range(-max_freq..max_freq),
            phase: rng.random_range(0.0..TAU),
            amp: rng.random_range(0.3..1.0) * amp,
        }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        self.amp * (TAU * (self.fx * u + self.fy * v) + self.phase).sin()
    }
}

struct Lesion {
    cx: f64,
    cy: f64,
    radius: f64,
    aspect: f64,
    angle: f64,
    harmonics: Vec<(f64, f64)>,
}

impl Lesion {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            cx: rng.random_range(0.3..0.7),
            cy: rng.random_range(0.3..0.7),
            radius: rng.random_range(0.12..0.3),
            aspect: rng.random_range(0.7..1.3),
            angle: rng.random_range(0.0..PI),
            harmonics: (0..4).map(|_| (rng.random_range(0.0..0.1), rng.random_range(0.0..TAU))).collect(),
        }
    }

    /// Normalized radial coordinate: below 1 inside the lesion.
    fn level(&self, u: f64, v: f64) -> f64 {
        let (dx, dy) = (u - self.cx, v - self.cy);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let x = (c * dx + s * dy) / self.aspect.sqrt();
        let y = (-s * dx + c * dy) * self.aspect.sqrt();
        let phi = y.atan2(x);
        let boundary = self.radius
            * (1.0
                + self
                    .harmonics
                    .iter()
                    .enumerate()
                    .map(|(k, &(a, p))| a * ((k + 2) as f64 * phi + p).cos())
                    .sum::<f64>());
        (x * x + y * y).sqrt() / boundary
    }
}

/// Quadratic Bézier stroke emulating a hair.
struct Hair {
    p: [(f64, f64); 3],
    width: f64,
    shade: f64,
}

impl Hair {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut pt = || (rng.random_range(-0.1..1.1), rng.random_range(-0.1..1.1));
        let p = [pt(), pt(), pt()];
        Self {
            p,
            width: rng.random_range(0.004..0.012),
            shade: rng.random_range(0.08..0.25),
        }
    }

    fn points(&self, steps: usize) -> impl Iterator<Item = (f64, f64)> + '_ {
        (0..=steps).map(move |i| {
            let t = i as f64 / steps as f64;
            let a = (1.0 - t) * (1.0 - t);
            let b = 2.0 * (1.0 - t) * t;
            let c = t * t;
            (
                a * self.p[0].0 + b * self.p[1].0 + c * self.p[2].0,
                a * self.p[0].1 + b * self.p[1].1 + c * self.p[2].1,
            )
        })
    }
}

fn render(rng: &mut ChaCha8Rng, size: usize, hair: bool) -> (Vec<f64>, Vec<f32>) {
    let hw = size * size;
    let r = rng.random_range(0.78..0.95);
    let g = r * rng.random_range(0.68..0.82);
    let b = g * rng.random_range(0.75..0.92);
    let skin = [r, g, b];
    let shade = rng.random_range(0.3..0.55);
    let lesion_tint = [shade, shade * rng.random_range(0.6..0.8), shade * rng.random_range(0.45..0.7)];
    let background: Vec<Wave> = (0..3).map(|_| Wave::random(rng, 2.0, 0.04)).collect();
    let texture: Vec<Wave> = (0..3).map(|_| Wave::random(rng, 9.0, 0.05)).collect();
    let lesion = Lesion::random(rng);

    let mut image = vec![0.0; 3 * hw];
    let mut mask = vec![0.0f32; hw];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
            let i = y * size + x;
            let low: f64 = background.iter().map(|w| w.at(u, v)).sum();
            let level = lesion.level(u, v);
            let inside = level < 1.0;
            mask[i] = inside as u8 as f32;
            let jitter = rng.random_range(-0.02..0.02);
            for c in 0..3 {
                let value = if inside {
                    let tex: f64 = texture.iter().map(|w| w.at(u, v)).sum();
                    // Darker toward the center.
                    lesion_tint[c] * (0.75 + 0.25 * level) + tex
                } else {
                    skin[c] + low
                };
                image[c * hw + i] = value + jitter;
            }
        }
    }

    if hair {
        let strands = rng.random_range(3..9);
        for _ in 0..strands {
            let h = Hair::random(rng);
            let radius = h.width * size as f64;
            for (px, py) in h.points(4 * size) {
                let (cx, cy) = (px * size as f64, py * size as f64);
                let lo_x = (cx - radius).floor().max(0.0) as usize;
                let hi_x = ((cx + radius).ceil() as usize).min(size);
                let lo_y = (cy - radius).floor().max(0.0) as usize;
                let hi_y = ((cy + radius).ceil() as usize).min(size);
                for y in lo_y..hi_y {
                    for x in lo_x..hi_x {
                        let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                        if d <= radius.max(0.5) {
                            for c in 0..3 {
                                image[c * hw + y * size + x] = h.shade;
                            }
                        }
                    }
                }
            }
        }
    }
    image.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    (image, mask)
}

/// Generates sample `index` of the stream identified by `seed`.
///
/// The result depends only on `(seed, index, size, hair)`, so samples can be
/// produced in any order or in parallel. Draws violating the area or
/// brightness constraints are rejected and redrawn from the same stream.
pub fn gen_sample(size: usize, seed: u64, index: u64, hair: bool) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    loop {
        let (image, mask) = render(&mut rng, size, hair);
        let area = mask.iter().map(|&m| m as f64).sum::<f64>() / (size * size) as f64;
        let mean = image.iter().sum::<f64>() / image.len() as f64;
        if (MIN_LESION_FRACTION..=MAX_LESION_FRACTION).contains(&area) && (0.2..=0.9).contains(&mean) {
            return Sample {
                image: Tensor::from_f64(&[3, size, size], &image).expect("shape matches"),
                mask: Tensor::new(&[1, size, size], mask).expect("shape matches"),
            };
        }
    }
}
