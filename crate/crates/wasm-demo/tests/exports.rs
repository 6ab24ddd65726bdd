use catn_wasm_demo::{project_pair, remove_pixels, sample};

#[test]
fn projection_json_has_every_field() {
    let text = project_pair(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0]).unwrap_or_else(|_| panic!("projection failed"));
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    for key in ["lambda", "mu_fine", "mu_coarse", "objective", "oracle_objective", "penalty_at_zero", "penalty_at_witness"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    let mu: Vec<f64> = serde_json::from_value(v["mu_coarse"].clone()).unwrap();
    assert!((mu[0] - 0.39564392).abs() < 1e-7);
}

#[test]
fn removal_zeroes_the_dimmest_pixels() {
    let s = sample(5, true, 0.7, 6.0, 0.3, 0.05).unwrap();
    let total: f64 = s.image.iter().map(|&v| f64::from(v)).sum();
    let attribution: Vec<f64> = s.image.iter().map(|&v| f64::from(v) / total).collect();
    let out = remove_pixels(&s.image, &attribution, 0.5).unwrap_or_else(|_| panic!("removal failed"));
    assert!(out.iter().filter(|&&v| v == 0.0).count() >= 2048);
    let kept_max = s.image.iter().cloned().fold(0.0f32, f32::max);
    assert!(out.contains(&kept_max));
}
