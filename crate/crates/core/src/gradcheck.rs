//! Central finite-difference check of tape gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::model::{MobileUnetr, ModelConfig};
use crate::nn::{
    Builder, Ctx, DecoderBlock, DecoderBlockSpec, MobileVitBlock, MobileVitSpec, Mv2Block, Mv2Spec, ParamId, ParamStore,
    Stem, StemSpec, StemStage, TransformerLayer,
};
use crate::tensor::{Scalar, Tensor};

/// Central-difference formula used for the numeric derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, truncation error O(h²).
    ThreePoint,
    /// `(8[f(x+h) - f(x-h)] - [f(x+2h) - f(x-2h)]) / 12h`, truncation error O(h⁴).
    #[default]
    FivePoint,
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub h: f64,
    pub stencil: Stencil,
    /// Check at most this many components (sampled with `seed`); `None` checks all.
    pub max_components: Option<usize>,
    /// Seeds the projection weights for non-scalar outputs and the component sample.
    pub seed: u64,
    /// Negates one backward rule; used to show the harness catches bad gradients.
    pub inject_sign_flip: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-3,
            stencil: Stencil::default(),
            max_components: None,
            seed: 0,
            inject_sign_flip: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// `max |analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
    pub max_rel_err: f64,
    /// `(input index, flat component)` of the worst component.
    pub worst: Option<(usize, usize)>,
    /// Analytic and numeric derivative at `worst`.
    pub worst_values: (f64, f64),
    pub components: usize,
}

/// Relative error used by the checker.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Checks `f` against central differences with respect to every input.
///
/// Non-scalar outputs are reduced to `Σ rᵢ·yᵢ` with fixed pseudo-random
/// weights `rᵢ ∈ [-1, 1]`, so directions where a plain sum has zero
/// derivative (softmax rows, normalized features) are still exercised.
pub fn gradcheck<T, F>(f: F, inputs: &[Tensor<T>], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    // Analytic pass.
    let mut tape = Tape::new();
    if opts.inject_sign_flip {
        tape.inject_sign_flip();
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let weights: Vec<f64> = (0..tape.value(out).numel())
        .map(|_| if tape.value(out).numel() == 1 { 1.0 } else { rng.random_range(-1.0..=1.0) })
        .collect();
    let w = tape.constant(Tensor::from_f64(tape.shape(out), &weights)?);
    let weighted = tape.mul(out, w)?;
    let loss = tape.sum(weighted)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
        .collect();

    let eval = |perturbed: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape
            .value(out)
            .data()
            .iter()
            .zip(&weights)
            .map(|(y, r)| y.to_f64() * r)
            .sum())
    };

    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let picks: Vec<usize> = match opts.max_components {
        Some(k) if k < total => {
            let mut v = sample(&mut rng, total, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..total).collect(),
    };

    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        components: picks.len(),
    };
    for flat in picks {
        let (mut which, mut comp) = (0, flat);
        while comp >= inputs[which].numel() {
            comp -= inputs[which].numel();
            which += 1;
        }
        let orig = inputs[which].data()[comp];
        let mut diff = |step: f64| -> Result<f64> {
            work[which].data_mut()[comp] = T::from_f64(orig.to_f64() + step);
            let plus = eval(&work)?;
            work[which].data_mut()[comp] = T::from_f64(orig.to_f64() - step);
            let minus = eval(&work)?;
            work[which].data_mut()[comp] = orig;
            Ok(plus - minus)
        };
        let numeric = match opts.stencil {
            Stencil::ThreePoint => diff(opts.h)? / (2.0 * opts.h),
            Stencil::FivePoint => (8.0 * diff(opts.h)? - diff(2.0 * opts.h)?) / (12.0 * opts.h),
        };
        let err = rel_err(analytic[which][comp], numeric);
        if report.worst.is_none() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((which, comp));
            report.worst_values = (analytic[which][comp], numeric);
        }
    }
    Ok(report)
}

/// Single-input convenience wrapper returning the maximum relative error.
pub fn gradcheck_fn<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let opts = GradcheckOptions {
        h,
        ..GradcheckOptions::default()
    };
    Ok(gradcheck(|tape, v| f(tape, v[0]), std::slice::from_ref(x), &opts)?.max_rel_err)
}

/// Tolerance for single blocks.
pub const BLOCK_TOLERANCE: f64 = 1e-3;
/// Tolerance for the assembled model.
pub const MODEL_TOLERANCE: f64 = 1e-2;

/// Gradcheck of a layer forward with respect to its inputs and every parameter in `store`.
pub fn gradcheck_module<T, F>(
    store: &ParamStore<T>,
    inputs: &[Tensor<T>],
    training: bool,
    forward: F,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport>
where
    T: Scalar,
    F: Fn(&mut Ctx<'_, T>, &[Var]) -> Result<Var>,
{
    let mut all: Vec<Tensor<T>> = inputs.to_vec();
    all.extend(store.params().iter().map(|p| p.tensor.clone()));
    let n_in = inputs.len();
    gradcheck(
        |tape, vars| {
            let mut cx = Ctx::new(tape, store, training);
            for (i, &v) in vars[n_in..].iter().enumerate() {
                cx.bind(ParamId(i), v);
            }
            forward(&mut cx, &vars[..n_in])
        },
        &all,
        opts,
    )
}

/// One row of a gradcheck table.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub name: &'static str,
    /// Batch statistics (training) or running statistics (eval) in batch norm.
    pub training: bool,
    pub report: GradcheckReport,
    pub tolerance: f64,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err < self.tolerance
    }
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape, &data).expect("shape matches")
}

fn build_block<L>(seed: u64, f: impl FnOnce(&mut Builder<'_, f64>) -> L) -> (L, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = f(&mut Builder::new(&mut store, &mut rng));
    (layer, store)
}

/// Checks each block type on tiny shapes in double precision, once with running
/// batch-norm statistics and once with batch statistics.
pub fn block_suite(seed: u64, opts: &GradcheckOptions) -> Result<Vec<SuiteRow>> {
    let mvit = |c: usize, d: usize| MobileVitSpec {
        channels: c,
        transformer_dim: d,
        transformer_layers: 1,
        heads: 2,
        mlp_ratio: 2.0,
        patch_h: 2,
        patch_w: 2,
        kernel_size: 3,
    };
    let stem_spec = StemSpec {
        out_channels: 4,
        stages: vec![StemStage {
            out_channels: 4,
            stride: 1,
            expansion_ratio: 2,
        }],
    };
    let mv2_spec = Mv2Spec {
        in_channels: 4,
        out_channels: 4,
        stride: 1,
        expansion_ratio: 2,
    };
    let dec_spec = DecoderBlockSpec {
        in_channels: 6,
        skip_channels: 4,
        out_channels: 4,
        global_refine: mvit(4, 8),
    };
    let (stem, stem_store) = build_block(seed, |b| Stem::new(b, "stem", 3, &stem_spec));
    let (mv2, mv2_store) = build_block(seed, |b| Mv2Block::new(b, "mv2", &mv2_spec));
    let (layer, layer_store) = build_block(seed, |b| TransformerLayer::new(b, "transformer", 8, 2, 16));
    let (block, block_store) = build_block(seed, |b| MobileVitBlock::new(b, "mobilevit", &mvit(4, 8)));
    let (dec, dec_store) = build_block(seed, |b| DecoderBlock::new(b, "decoder", &dec_spec));

    // Batch 2 gives every batch-norm channel at least 32 values; with fewer the
    // batch statistics can be near-degenerate and curve the function enough to
    // dominate an h=1e-3 central difference.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x_stem = random_tensor(&[2, 3, 8, 8], &mut rng);
    let x_mv2 = random_tensor(&[2, 4, 4, 4], &mut rng);
    let x_seq = random_tensor(&[2, 3, 8], &mut rng);
    let x_block = random_tensor(&[2, 4, 4, 4], &mut rng);
    let x_low = random_tensor(&[2, 6, 2, 2], &mut rng);
    let x_skip = random_tensor(&[2, 4, 4, 4], &mut rng);

    let mut rows = Vec::new();
    for training in [false, true] {
        let row = |name, report| SuiteRow {
            name,
            training,
            report,
            tolerance: BLOCK_TOLERANCE,
        };
        let check = |store, inputs: &[Tensor<f64>], f: &dyn Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>| {
            gradcheck_module(store, inputs, training, f, opts)
        };
        rows.push(row(
            "stem",
            check(&stem_store, &[x_stem.clone()], &|cx, v| stem.forward(cx, v[0]))?,
        ));
        rows.push(row("mv2", check(&mv2_store, &[x_mv2.clone()], &|cx, v| mv2.forward(cx, v[0]))?));
        rows.push(row(
            "transformer",
            check(&layer_store, &[x_seq.clone()], &|cx, v| layer.forward(cx, v[0]))?,
        ));
        rows.push(row(
            "mobilevit",
            check(&block_store, &[x_block.clone()], &|cx, v| block.forward(cx, v[0]))?,
        ));
        rows.push(row(
            "decoder",
            check(&dec_store, &[x_low.clone(), x_skip.clone()], &|cx, v| dec.forward(cx, v[0], v[1]))?,
        ));
    }
    Ok(rows)
}

/// Full-model check in double precision on a `[batch, C, size, size]` input.
///
/// Covers the input and every parameter; set `opts.max_components` to sample.
pub fn model_gradcheck(
    config: &ModelConfig,
    size: usize,
    batch: usize,
    seed: u64,
    opts: &GradcheckOptions,
) -> Result<SuiteRow> {
    let model = MobileUnetr::<f64>::build(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xda7a);
    let x = random_tensor(&[batch, config.in_channels, size, size], &mut rng);
    let report = gradcheck_module(model.store(), &[x], true, |cx, v| model.forward(cx, v[0]), opts)?;
    Ok(SuiteRow {
        name: "model",
        training: true,
        report,
        tolerance: MODEL_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_zero_error() {
        let x = Tensor::<f64>::from_f64(&[4], &[0.3, -1.0, 2.0, 0.0]).unwrap();
        let err = gradcheck_fn(|_, v| Ok(v), &x, 1e-3).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn sign_flip_is_detected() {
        let x = Tensor::<f64>::from_f64(&[3], &[0.3, -1.0, 2.0]).unwrap();
        let opts = GradcheckOptions {
            inject_sign_flip: true,
            ..Default::default()
        };
        let r = gradcheck(|t, v| t.silu(v[0]), &[x], &opts).unwrap();
        assert!(r.max_rel_err > 0.5);
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1.0, 3.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn block_suite_passes() {
        for row in block_suite(3, &GradcheckOptions::default()).unwrap() {
            assert!(row.passed(), "{} {}", row.name, row.report.max_rel_err);
        }
    }

    #[test]
    fn block_suite_catches_sign_flip() {
        let opts = GradcheckOptions {
            inject_sign_flip: true,
            ..Default::default()
        };
        let rows = block_suite(3, &opts).unwrap();
        assert!(rows.iter().all(|r| !r.passed()), "{rows:?}");
    }
}
