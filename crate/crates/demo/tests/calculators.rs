use softmix_demo::{mixture_weights_impl, ranking_metrics_impl, significance_impl};

#[test]
fn weights_sum_to_one_and_report_effective_count() {
    let r = mixture_weights_impl(&[1.0, 0.0, -1.0], 0.5, &[-2.0, -1.0, -3.0]).unwrap();
    assert!((r[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!((r[4] - r[3].exp2()).abs() < 1e-12);
    assert!(r[4] >= 1.0 && r[4] <= 3.0);
}

#[test]
fn high_temperature_recovers_static_weights() {
    let stat = mixture_weights_impl(&[0.4, -0.4], 0.0, &[]).unwrap();
    let dd = mixture_weights_impl(&[0.4, -0.4], 20.0, &[-1.0, -9.0]).unwrap();
    assert!((stat[0] - dd[0]).abs() < 1e-6);
}

#[test]
fn significance_of_eight_wins() {
    let r = significance_impl("1111111111", "1100000000", 1).unwrap();
    assert_eq!(r, vec![2.0 / 256.0, 2.0 / 256.0, 1.0]);
}

#[test]
fn bad_inputs_are_errors() {
    assert!(ranking_metrics_impl("1, zero").is_err());
    assert!(significance_impl("101", "10", 1).is_err());
    assert!(mixture_weights_impl(&[], 0.0, &[]).is_err());
    assert_eq!(ranking_metrics_impl("1 2 20").unwrap()[2], (1.0 + 0.5 + 0.05) / 3.0);
}
