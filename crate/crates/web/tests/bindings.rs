use mutr_core::model::{build_model, ModelConfig};
use mutr_web::{analyze, lr_curve, Lesion};

#[test]
fn analyze_stages_sum_to_totals() {
    let v: serde_json::Value = serde_json::from_str(&analyze("tiny", 0).unwrap()).unwrap();
    let report = build_model(&ModelConfig::tiny(), 0).unwrap().cost_report(64).unwrap();
    assert_eq!(v["params"].as_u64(), Some(report.totals.params));
    let stages = v["stages"].as_array().unwrap();
    let params: u64 = stages.iter().map(|s| s["params"].as_u64().unwrap()).sum();
    let macs: u64 = stages.iter().map(|s| s["macs"].as_u64().unwrap()).sum();
    assert_eq!(params, report.totals.params);
    assert_eq!(macs, report.totals.macs);
    assert!(stages.iter().any(|s| s["name"].as_str().unwrap().starts_with("decoder.")));
}

#[test]
fn analyze_rejects_bad_input() {
    assert!(analyze("{not json", 64).is_err());
    assert!(analyze("reference", 100).is_err());
}

#[test]
fn lesion_buffers_are_rgba_and_deterministic() {
    let a = Lesion::new(32, 3, 1, true).unwrap();
    let b = Lesion::new(32, 3, 1, true).unwrap();
    assert_eq!(a.image().len(), 4 * 32 * 32);
    assert_eq!(a.image(), b.image());
    assert_eq!(a.mask(), b.mask());
    assert!(a.area() > 0.0 && a.area() < 1.0);
    assert_ne!(a.overlay(), a.image());
    assert!(Lesion::new(4, 0, 0, false).is_err());
}

#[test]
fn lr_curve_warms_up_and_decays() {
    let ys = lr_curve(4e-4, 40.0, 440.0, 0.0, 441).unwrap();
    assert_eq!(ys.len(), 441);
    let peak = ys.iter().cloned().fold(0.0, f64::max);
    assert!((peak - 4e-4).abs() < 1e-9, "{peak}");
    assert!(ys[440] < 1e-9);
    assert!(ys[..40].windows(2).all(|w| w[0] <= w[1]));
    assert!(lr_curve(4e-4, 500.0, 440.0, 0.0, 10).is_err());
}
