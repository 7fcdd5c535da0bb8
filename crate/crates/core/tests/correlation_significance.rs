use mhel_core::eval::{correlation_t_test, point_biserial};

// n = 150 mentions, r = 0.655: t = r·sqrt(n-2)/sqrt(1-r²); p from mpmath at 50 digits.
const T_REF: f64 = 10.545413437117784;
const P_REF: f64 = 9.67668696407442e-20;

#[test]
fn t_test_matches_reference_values() {
    let (t, p) = correlation_t_test(0.655, 150);
    assert!((t - T_REF).abs() / T_REF < 1e-12, "t = {t}");
    assert!((p - P_REF).abs() / P_REF < 1e-8, "p = {p}");
    assert!(p < 1e-18);
}

/// 150 scores with a within-group spread and a class gap `gap`.
fn scores(gap: f64, correct: &[bool]) -> Vec<f64> {
    correct
        .iter()
        .enumerate()
        .map(|(i, &c)| ((i * 37) % 101) as f64 / 10.0 + if c { gap } else { 0.0 })
        .collect()
}

#[test]
fn contrived_strong_correlation_is_highly_significant() {
    let correct: Vec<bool> = (0..150).map(|i| i % 5 != 0).collect();
    let r_of = |gap: f64| {
        point_biserial(&scores(gap, &correct), &correct)
            .unwrap()
            .r_pb
    };
    // r grows monotonically with the gap; bisect to r = 0.655
    let (mut lo, mut hi) = (0.0, 50.0);
    for _ in 0..200 {
        let mid = (lo + hi) / 2.0;
        if r_of(mid) < 0.655 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let report = point_biserial(&scores(hi, &correct), &correct).unwrap();
    assert!((report.r_pb - 0.655).abs() < 1e-9, "r = {}", report.r_pb);
    assert_eq!(report.n, 150);
    assert!(report.p_value < 1e-17, "p = {}", report.p_value);
    assert!((report.p_value - P_REF).abs() / P_REF < 1e-6);
}

#[test]
fn weak_correlation_on_small_sample_is_not_significant() {
    let correct = [true, false, true, false, true, false, true, false];
    let scores = [1.0, 1.1, 0.9, 1.0, 1.2, 0.8, 0.7, 1.3];
    let report = point_biserial(&scores, &correct).unwrap();
    assert!(report.p_value > 0.05, "{report:?}");
    assert!(report.p_value <= 1.0);
}
