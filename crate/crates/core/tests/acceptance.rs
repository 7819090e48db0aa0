//! Acceptance criteria. Prints one PASS/FAIL line per criterion; exits 1 on any failure.
//!
//! Pass criterion numbers as arguments to run a subset, e.g. `cargo test --test acceptance -- 1 6`.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mutr_core::data::{compute_metrics, gen_synthetic, Confusion, Dataset, MetricsReport};
use mutr_core::gradcheck::{block_suite, model_gradcheck, GradcheckOptions};
use mutr_core::model::{build_model, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
use mutr_core::model::{LoadOptions, ModelConfig};
use mutr_core::train::{lr_at, train, AdamWParams, OptimState, ScheduleSpec, TrainOptions};
use mutr_core::{Error, Tape, Tensor};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_s: f64, detail: String) -> Outcome {
    let s = elapsed.as_secs_f64();
    check(s < limit_s, format!("{detail}; {s:.1}s (limit {limit_s}s)"))
}

fn efficiency() -> Outcome {
    let t = Instant::now();
    let cfg = ModelConfig::reference();
    let model = build_model(&cfg, 0).map_err(|e| e.to_string())?;
    let reports: Vec<_> = [256, 512]
        .into_iter()
        .map(|r| model.cost_report(r))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let calib = reports
        .iter()
        .min_by(|a, b| (a.gmacs() - 1.3).abs().total_cmp(&(b.gmacs() - 1.3).abs()))
        .unwrap();
    let params = calib.totals.params;
    let decoder = calib.subtree("decoder").params;
    let mut detail = format!(
        "params {params}, decoder {decoder}, {:.3} GMACs at {} (calibration), {:.3} GMACs at {}",
        calib.gmacs(),
        calib.resolution,
        reports.iter().find(|r| r.resolution != calib.resolution).unwrap().gmacs(),
        reports.iter().find(|r| r.resolution != calib.resolution).unwrap().resolution,
    );
    let mut ok = (2_700_000..=3_300_000).contains(&params)
        && (1.0..=1.6).contains(&calib.gmacs())
        && (1_200_000..=1_800_000).contains(&decoder);
    if params as usize != model.num_parameters() {
        ok = false;
        detail += &format!("; analyzer/runtime param mismatch {params} vs {}", model.num_parameters());
    }
    if !ok {
        return Err(detail);
    }
    within(t.elapsed(), 5.0, detail)
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let opts = GradcheckOptions::default();
    let mut rows = block_suite(0, &opts).map_err(|e| e.to_string())?;
    let model_opts = GradcheckOptions {
        max_components: Some(200),
        seed: 1,
        ..Default::default()
    };
    rows.push(model_gradcheck(&ModelConfig::tiny(), 32, 2, 0, &model_opts).map_err(|e| e.to_string())?);
    let flipped = block_suite(
        0,
        &GradcheckOptions {
            inject_sign_flip: true,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let caught = flipped.iter().filter(|r| !r.passed()).count();
    let detail = rows
        .iter()
        .map(|r| format!("{}{} {:.1e}", r.name, if r.training { "/train" } else { "" }, r.report.max_rel_err))
        .collect::<Vec<_>>()
        .join(", ")
        + &format!("; five-point stencil, h=1e-3; sign flip caught in {caught}/{} rows", flipped.len());
    if !rows.iter().all(|r| r.passed()) || caught != flipped.len() {
        return Err(detail);
    }
    within(t.elapsed(), 300.0, detail)
}

fn assembly() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..20u64 {
        let cfg = ModelConfig::random(seed);
        let model = build_model(&cfg, seed).map_err(|e| format!("config {seed}: {e}"))?;
        let s = cfg.image_size;
        let data: Vec<f32> = (0..2 * cfg.in_channels * s * s).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::new(&[2, cfg.in_channels, s, s], data).unwrap();
        let y = model.predict(&x).map_err(|e| format!("config {seed}: {e}"))?;
        if y.shape() != [2, cfg.out_channels, s, s] {
            return Err(format!("config {seed}: input {s}x{s} gave output {:?}", y.shape()));
        }

        let (ph, pw) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let (h, w) = (ph * rng.random_range(1..=5), pw * rng.random_range(1..=5));
        let shape = [rng.random_range(1..=2), rng.random_range(1..=6), h, w];
        let n = shape.iter().product();
        let x = Tensor::new(&shape, (0..n).map(|_| rng.random::<f32>()).collect()).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let seq = tape.unfold_patches(v, ph, pw).map_err(|e| e.to_string())?;
        let back = tape.fold_patches(seq, ph, pw, h, w).map_err(|e| e.to_string())?;
        let same = tape.value(back).shape() == x.shape()
            && tape.value(back).data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(format!("fold(unfold) differs for {shape:?} patch {ph}x{pw}"));
        }
    }
    within(
        t.elapsed(),
        60.0,
        "20 random configs keep input resolution; fold(unfold) bitwise identity".into(),
    )
}

fn learning() -> Outcome {
    let t = Instant::now();
    let cfg = ModelConfig::tiny();
    let data = gen_synthetic(16, 64, 7, false);
    let run = || {
        let mut model = build_model(&cfg, 0)?;
        let opts = TrainOptions {
            schedule: ScheduleSpec::scaled_to(300),
            ..Default::default()
        };
        train(&mut model, &data, &Dataset::default(), &opts, |e| {
            if e.epoch % 25 == 0 {
                eprintln!("  epoch {:3} loss {:.4} dice {:.4}", e.epoch, e.train_loss, e.val_dice);
            }
        })
    };
    let params = build_model(&cfg, 0).map_err(|e| e.to_string())?.num_parameters();
    let a = run().map_err(|e| e.to_string())?;
    let b = run().map_err(|e| e.to_string())?;
    let losses = |o: &mutr_core::train::TrainOutcome| o.history.iter().map(|e| e.train_loss.to_bits()).collect::<Vec<_>>();
    let identical = losses(&a) == losses(&b);
    let first = a.history.iter().position(|e| e.val_dice >= 0.95).map(|i| a.history[i].epoch);

    let early: Vec<f64> = a.history.iter().take(20).map(|e| e.train_loss).collect();
    let smooth: Vec<f64> = early.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    let monotone = smooth.windows(2).all(|w| w[1] <= w[0]);

    let detail = format!(
        "{params} params; best train Dice {:.4} at epoch {}, first >= 0.95 at {}; logs identical: {identical}; \
         smoothed early loss non-increasing: {monotone}",
        a.best_dice,
        a.best_epoch,
        first.map_or("never".into(), |e| e.to_string()),
    );
    if params > 150_000 || first.is_none() || !identical || !monotone {
        return Err(detail);
    }
    within(t.elapsed(), 1800.0, detail)
}

fn brute_force(pred: &[bool], gt: &[bool]) -> Confusion {
    let mut c = Confusion::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

fn ratio(num: u64, den: u64, empty_ok: bool) -> f64 {
    if den == 0 {
        if empty_ok {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

fn metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for i in 0..100 {
        // Densities include exact 0 and 1 so the empty-set rules are exercised.
        let density = |rng: &mut ChaCha8Rng| match rng.random_range(0..6) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random::<f64>(),
        };
        let (dp, dg) = (density(&mut rng), density(&mut rng));
        let pred: Vec<bool> = (0..256).map(|_| rng.random_bool(dp)).collect();
        let gt: Vec<bool> = (0..256).map(|_| rng.random_bool(dg)).collect();
        let t = |m: &[bool]| Tensor::new(&[1, 1, 16, 16], m.iter().map(|&b| b as u8 as f32).collect()).unwrap();
        let r = compute_metrics(&t(&pred), &t(&gt)).map_err(|e| e.to_string())?;
        let c = brute_force(&pred, &gt);
        let gt_empty = c.tp + c.fn_ == 0;
        let pred_empty = c.tp + c.fp == 0;
        let want = MetricsReport {
            se: ratio(c.tp, c.tp + c.fn_, pred_empty),
            sp: ratio(c.tn, c.tn + c.fp, c.tn + c.fp == 0 && c.fn_ == 0),
            acc: ratio(c.tp + c.tn, 256, false),
            iou: ratio(c.tp, c.tp + c.fp + c.fn_, gt_empty && pred_empty),
            dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, gt_empty && pred_empty),
            confusion: c,
        };
        if r != want {
            return Err(format!("pair {i}: {r:?} != brute force {want:?}"));
        }
        worst = worst.max((r.dice - 2.0 * r.iou / (1.0 + r.iou)).abs());
    }
    check(
        worst <= 1e-12,
        format!("100 random 16x16 pairs match brute force exactly; max |Dice - 2IoU/(1+IoU)| = {worst:.1e}"),
    )
}

fn schedule() -> Outcome {
    let spec = ScheduleSpec::default();
    let lr = |e: f64| lr_at(e, &spec).unwrap();
    let cases = [(0.0, 1e-5), (40.0, 4e-4), (240.0, 2e-4), (440.0, spec.min_lr)];
    let mut worst = 0.0f64;
    for (e, want) in cases {
        worst = worst.max((lr(e) - want).abs());
    }
    let jump = (lr(40.0 - 1e-9) - lr(40.0 + 1e-9)).abs();
    check(
        worst <= 1e-12 && jump <= 1e-12,
        format!("max error {worst:.1e} at epochs 0/40/240/440; jump across epoch 40 {jump:.1e}"),
    )
}

fn serialization() -> Outcome {
    let err = |e: Error| e.to_string();
    let cfg = ModelConfig::tiny();
    let model = build_model(&cfg, 4).map_err(err)?;
    let mut optim = OptimState::new(model.store(), AdamWParams::default());
    optim.step = 17;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for t in optim.m.iter_mut().chain(optim.v.iter_mut()) {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random());
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.mutr");
    save_checkpoint(&model, Some(&optim), &path).map_err(err)?;
    let opts = LoadOptions {
        expected: Some(&cfg),
        allow_config_override: false,
    };
    let back = load_checkpoint(&path, &opts).map_err(err)?;
    let bits = |ts: Vec<&Tensor<f32>>| ts.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
    let tensors = |m: &mutr_core::model::MobileUnetr<f32>| {
        let s = m.store();
        bits(s.params().iter().map(|p| &p.tensor).chain(s.buffers().iter().map(|b| &b.tensor)).collect())
    };
    let o = back.optimizer.as_ref().ok_or("optimizer state lost")?;
    let exact = tensors(&model) == tensors(&back.model)
        && bits(optim.m.iter().chain(&optim.v).collect()) == bits(o.m.iter().chain(&o.v).collect())
        && o.step == optim.step
        && encode_checkpoint(&back.model, Some(o)) == std::fs::read(&path).unwrap();
    if !exact {
        return Err("round trip not bit-exact".into());
    }

    let bytes = std::fs::read(&path).unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    let magic_ok = matches!(decode_checkpoint(&bad_magic, &opts), Err(Error::CheckpointFormat(_)));

    // Rewrite one tensor's declared shape in the header, keeping the payload.
    let header_len = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[14..14 + header_len]).unwrap();
    let shape = &mut header["tensors"][0]["shape"];
    let n: u64 = shape.as_array().unwrap().iter().map(|d| d.as_u64().unwrap()).product();
    *shape = serde_json::json!([n]);
    let header = serde_json::to_vec(&header).unwrap();
    let mut reshaped = b"MUTR1\n".to_vec();
    reshaped.extend_from_slice(&(header.len() as u64).to_le_bytes());
    reshaped.extend_from_slice(&header);
    reshaped.extend_from_slice(&bytes[14 + header_len..]);
    let shape_ok = matches!(decode_checkpoint(&reshaped, &opts), Err(Error::CheckpointTensor { .. }));

    let mut other = cfg.clone();
    other.image_size = 128;
    let mismatch = decode_checkpoint(
        &bytes,
        &LoadOptions {
            expected: Some(&other),
            allow_config_override: false,
        },
    );
    let field_ok = matches!(&mismatch, Err(Error::ConfigMismatch { field, .. }) if field == "image_size");

    check(
        magic_ok && shape_ok && field_ok,
        format!(
            "bit-exact round trip incl. optimizer; bad magic -> format error: {magic_ok}; \
             shape mismatch -> tensor error: {shape_ok}; image_size mismatch named: {field_ok}"
        ),
    )
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 7] = [
        (1, "efficiency", efficiency),
        (2, "gradients", gradients),
        (3, "assembly", assembly),
        (4, "learning", learning),
        (5, "metrics", metrics),
        (6, "schedule", schedule),
        (7, "serialization", serialization),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        match f() {
            Ok(detail) => println!("PASS {n} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n} {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
