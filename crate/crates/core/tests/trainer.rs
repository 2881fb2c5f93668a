use slider_forge::config::AppConfig;
use slider_forge::trainer::train_slider;

// 500 steps on the toy brightness task: the held-out triplet loss ends below
// a fifth of its step-10 value, and the loss weights follow the schedule.
#[test]
fn default_run_converges() {
    let cfg = AppConfig::default();
    let ck = train_slider(&cfg).unwrap();
    let history = ck.history();
    let curve = history.probe_curve();
    assert_eq!(curve[0].0, 10);
    let (first, last) = (curve[0].1, curve.last().unwrap().1);
    assert!(last < 0.2 * first, "probe triplet {first} -> {last}");

    let records = history.records();
    assert_eq!(records.len(), 500);
    let at = |step: u64| records.iter().find(|r| r.step == step).unwrap();
    assert!(at(1).lambda_perp > 0.9 && at(500).lambda_perp < 0.01);
    // Record n holds the weights of update n, taken at t = n - 1 completed updates.
    assert!((at(cfg.schedule.t0 + 1).lambda_perp - 0.5).abs() < 1e-12);
    assert!(records.iter().all(|r| r.total.is_finite()));
}
