use proptest::prelude::*;
use textgan::metrics::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn frechet_is_symmetric_and_non_negative(a in prop::collection::vec(-3.0f64..3.0, 60), b in prop::collection::vec(-3.0f64..3.0, 60)) {
        let (sa, sb) = (fit_stats(&a, 3).unwrap(), fit_stats(&b, 3).unwrap());
        let ab = frechet_distance(&sa, &sb).unwrap();
        let ba = frechet_distance(&sb, &sa).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-8 * ab.max(1.0));
    }

    #[test]
    fn inception_score_stays_in_range(raw in prop::collection::vec(0.01f64..1.0, 40)) {
        let y = 4;
        let probs: Vec<f64> = raw.chunks(y).flat_map(|r| { let s: f64 = r.iter().sum(); r.iter().map(move |v| v / s) }).collect();
        let s = inception_style_score(&probs, y, 2).unwrap();
        prop_assert!(s.mean >= 1.0 && s.mean <= y as f64);
    }

    #[test]
    fn perceptual_distance_is_zero_on_itself(data in prop::collection::vec(-1.0f64..1.0, 12)) {
        let layer = LayerActivations { data: [data.clone(), data].concat(), channels: 3, positions: 4 };
        prop_assert_eq!(perceptual_distance(&[layer], 0, 1), 0.0);
    }
}

#[test]
fn frechet_of_a_shifted_copy_is_the_squared_shift() {
    let a: Vec<f64> = (0..200).map(|i| ((i * 37) % 23) as f64 / 7.0).collect();
    let b: Vec<f64> = a.iter().map(|v| v + 3.0).collect();
    let d = frechet_distance(&fit_stats(&a, 2).unwrap(), &fit_stats(&b, 2).unwrap()).unwrap();
    assert!((d - 18.0).abs() < 1e-9, "{d}");
}

#[test]
fn undersampled_stats_are_flagged() {
    let s = fit_stats(&vec![0.5; 3 * 8], 8).unwrap();
    assert!(s.is_undersampled());
}

#[test]
fn perfect_retrieval_scores_one() {
    let captions: Vec<Vec<f64>> = (0..12).map(|i| (0..12).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let items: Vec<Vec<Vec<f64>>> = (0..12).map(|i| vec![captions[i].clone(), captions[i].clone()]).collect();
    let truth: Vec<usize> = (0..12).collect();
    let rp = r_precision(&items, &truth, &captions, 10, 1).unwrap();
    assert_eq!(rp.summary.mean, 1.0);
    assert_eq!(rp.per_branch, vec![1.0, 1.0]);
    assert!(r_precision(&items, &truth, &captions[..5], 10, 1).is_err());
}
