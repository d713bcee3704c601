use differflow::detect::classify;
use differflow::metrics::{auroc, histogram, roc_curve};
use proptest::prelude::*;

/// Counts every (anomalous, normal) pair directly.
fn pairwise_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Scores on a coarse grid (many ties) or continuous, with both classes present.
fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..=500, any::<bool>(), any::<u64>()).prop_map(|(n, coarse, seed)| {
        use rand::Rng;
        let mut rng = differflow::rng(seed);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores = labels
            .iter()
            .map(|&l| {
                let shift = if l { 0.7 } else { 0.0 };
                let v: f64 = rng.random_range(-2.0..2.0) + shift;
                if coarse {
                    (v * 2.0).round()
                } else {
                    v
                }
            })
            .collect();
        (scores, labels)
    })
}

fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_pairwise_oracle((scores, labels) in instance()) {
        let a = auroc(&scores, &labels).unwrap();
        prop_assert!((a - pairwise_oracle(&scores, &labels)).abs() < 1e-9);
        let curve = roc_curve(&scores, &labels).unwrap();
        prop_assert!((trapezoid(&curve.points) - curve.auroc).abs() < 1e-12);
    }

    #[test]
    fn curve_is_monotone_with_fixed_ends((scores, labels) in instance()) {
        let c = roc_curve(&scores, &labels).unwrap();
        prop_assert_eq!(c.points[0], (0.0, 0.0));
        prop_assert_eq!(*c.points.last().unwrap(), (1.0, 1.0));
        for w in c.points.windows(2) {
            prop_assert!(w[0].0 <= w[1].0 && w[0].1 <= w[1].1);
        }
    }

    #[test]
    fn invariant_under_increasing_maps((scores, labels) in instance()) {
        let a = auroc(&scores, &labels).unwrap();
        let doubled: Vec<f64> = scores.iter().map(|s| 2.0 * s).collect();
        let cubed: Vec<f64> = scores.iter().map(|s| s.powi(3)).collect();
        prop_assert_eq!(auroc(&doubled, &labels).unwrap(), a);
        prop_assert!((auroc(&cubed, &labels).unwrap() - a).abs() < 1e-12);
    }

    #[test]
    fn flipping_labels_complements((scores, labels) in instance()) {
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let sum = auroc(&scores, &labels).unwrap() + auroc(&scores, &flipped).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn threshold_sweep_reproduces_curve((scores, labels) in instance()) {
        let c = roc_curve(&scores, &labels).unwrap();
        let pos = labels.iter().filter(|&&l| l).count() as f64;
        let neg = labels.len() as f64 - pos;
        for (theta, &point) in c.thresholds.iter().zip(&c.points[1..]) {
            let mut tp = 0.0;
            let mut fp = 0.0;
            for (&s, &l) in scores.iter().zip(&labels) {
                if classify(s, *theta).unwrap() {
                    if l { tp += 1.0 } else { fp += 1.0 }
                }
            }
            prop_assert_eq!(point, (fp / neg, tp / pos));
        }
    }

    #[test]
    fn histogram_conserves_counts(
        scores in prop::collection::vec(-10.0f64..10.0, 0..200),
        bins in 1usize..20,
        clip in -5.0f64..15.0,
    ) {
        let h = histogram(&scores, bins, clip).unwrap();
        prop_assert_eq!(h.total(), scores.len() as u64);
        let above = scores.iter().filter(|&&s| s > clip).count() as u64;
        prop_assert!(h.counts[bins - 1] >= above);
    }
}

#[test]
fn classify_is_monotone() {
    let theta = 0.3;
    let mut last = false;
    for i in -100..100 {
        let flagged = classify(f64::from(i) / 50.0, theta).unwrap();
        assert!(flagged || !last);
        last = flagged;
    }
}
