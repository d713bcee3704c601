//! Extractor, scoring and localization working together.

use differflow::autodiff::Tensor;
use differflow::detect::{anomaly_score, localize, rotation_angles, ScoreMode};
use differflow::extractor::{input_gradient, toy_extractor, FeaturePipeline, MultiScaleConfig};
use differflow::flow::{FlowConfig, FlowModel};
use differflow::imageops::{rotate, sample_transforms, Image, TransformConfig, TransformSpec};
use proptest::prelude::*;
use rand::Rng;

fn pipeline(scales: Vec<usize>, seed: u64) -> FeaturePipeline {
    FeaturePipeline::new(
        toy_extractor(seed),
        MultiScaleConfig {
            scales,
            multi_scale: true,
        },
    )
    .unwrap()
}

fn flow(dim: usize, seed: u64) -> FlowModel {
    let mut f = FlowModel::new(
        FlowConfig {
            dim,
            blocks: 2,
            hidden_width: 16,
            hidden_layers: 2,
            alpha: 3.0,
        },
        seed,
    )
    .unwrap();
    f.randomize_output_layers(seed + 1, 0.05);
    f
}

fn noise_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = differflow::rng(seed);
    Image::from_fn(h, w, |_, _, _| rng.random_range(0.05..0.95))
}

fn plain_nll(p: &FeaturePipeline, f: &FlowModel, img: &Image) -> f64 {
    let feats = p.extract::<f64>(img).unwrap();
    f.nll(&feats).unwrap()[0]
}

#[test]
fn input_gradient_matches_finite_differences() {
    let p = pipeline(vec![10, 7], 1);
    let f = flow(32, 2);
    let img = noise_image(10, 10, 3);
    let g = input_gradient::<f64>(&p, &f, &img).unwrap();
    assert_eq!(g.shape(), &[3, 10, 10]);

    // Perturb through an f64 copy of the pixels so the step is not rounded to f32.
    let base = img.to_nchw::<f64>();
    let eval = |t: &Tensor<f64>| {
        use differflow::autodiff::{Bindings, GraphBuilder};
        let mut b = GraphBuilder::new();
        let x = b.leaf("image", &[1, 3, 10, 10]);
        let feats = p.extractor().build(&mut b, x, p.config()).unwrap();
        let nodes = f.build(&mut b, feats).unwrap();
        let graph = b.build();
        let mut bind = Bindings::new();
        p.extractor().bind(&mut bind);
        f.bind(&mut bind);
        bind.bind("image", t);
        graph.evaluate(bind).unwrap().value(nodes.nll_sum).data()[0]
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in (0..base.len()).step_by(7) {
        let mut plus = base.clone();
        plus.data_mut()[i] += h;
        let mut minus = base.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let analytic = g.data()[i];
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3));
    }
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn scales_concatenate_largest_first() {
    let img = noise_image(16, 16, 4);
    let both = pipeline(vec![8, 16], 5).extract::<f64>(&img).unwrap();
    let big = pipeline(vec![16], 5).extract::<f64>(&img).unwrap();
    let small = pipeline(vec![8], 5).extract::<f64>(&img).unwrap();
    let expected: Vec<f64> = big.data().iter().chain(small.data()).copied().collect();
    assert_eq!(both.data(), expected.as_slice());
    // Swapping the blocks gives a different vector, so the order is observable.
    let swapped: Vec<f64> = small.data().iter().chain(big.data()).copied().collect();
    assert_ne!(both.data(), swapped.as_slice());
}

#[test]
fn batch_extraction_keeps_order() {
    let p = pipeline(vec![12, 7], 6);
    let images: Vec<Image> = (0..5).map(|s| noise_image(12, 12, 10 + s)).collect();
    let batch = p.extract_batch(&images).unwrap();
    for (i, img) in images.iter().enumerate() {
        assert_eq!(batch.row(i), p.extract::<f32>(img).unwrap().data());
    }
}

#[test]
fn single_identity_transform_is_plain_score() {
    let p = pipeline(vec![12, 7], 7);
    let f = flow(32, 8);
    let img = noise_image(12, 12, 9);
    let r = anomaly_score(&img, &p, &f, &[TransformSpec::IDENTITY], ScoreMode::Nll).unwrap();
    assert_eq!(r.per_transform.len(), 1);
    assert!((r.score - plain_nll(&p, &f, &img)).abs() < 1e-4 * r.score.abs().max(1.0));

    let latent = anomaly_score(&img, &p, &f, &[TransformSpec::IDENTITY], ScoreMode::Latent).unwrap();
    let (z, logdet) = f.forward(&p.extract::<f64>(&img).unwrap()).unwrap();
    let half_sq = z.data().iter().map(|v| v * v).sum::<f64>() / 2.0;
    assert!((latent.score - half_sq).abs() < 1e-4 * half_sq.max(1.0));
    assert!((r.score - (half_sq - logdet[0])).abs() < 1e-4 * r.score.abs().max(1.0));
    assert!(anomaly_score(&img, &p, &f, &[], ScoreMode::Latent).is_err());
}

#[test]
fn score_is_mean_over_transforms() {
    let p = pipeline(vec![12, 7], 11);
    let f = flow(32, 12);
    let img = noise_image(12, 12, 13);
    let ts = sample_transforms(14, 4, &TransformConfig::default()).unwrap();
    for mode in [ScoreMode::Nll, ScoreMode::Latent] {
        let r = anomaly_score(&img, &p, &f, &ts, mode).unwrap();
        let by_hand: Vec<f64> = ts
            .iter()
            .map(|t| {
                let view = t.apply(&img).unwrap();
                let feats = p.extract::<f32>(&view).unwrap();
                let (z, logdet) = f.forward(&feats).unwrap();
                let half_sq = z.data().iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / 2.0;
                match mode {
                    ScoreMode::Latent => half_sq,
                    ScoreMode::Nll => half_sq - f64::from(logdet[0]),
                }
            })
            .collect();
        let mean = by_hand.iter().sum::<f64>() / 4.0;
        assert!(
            (r.score - mean).abs() < 1e-6 * mean.abs().max(1.0),
            "{mode}: {} vs {mean}",
            r.score
        );

        let twice: Vec<TransformSpec> = [ts[0], ts[0]].to_vec();
        let once = anomaly_score(&img, &p, &f, &ts[..1], mode).unwrap().score;
        assert_eq!(anomaly_score(&img, &p, &f, &twice, mode).unwrap().score, once);

        let mut reversed = ts.clone();
        reversed.reverse();
        let r2 = anomaly_score(&img, &p, &f, &reversed, mode).unwrap();
        assert!((r2.score - r.score).abs() < 1e-9 * r.score.abs().max(1.0));
    }
}

#[test]
fn zero_extractor_gives_black_map() {
    let mut e = toy_extractor(15);
    for (w, _) in &mut e.weights {
        w.data_mut().fill(0.0);
    }
    let p = FeaturePipeline::new(
        e,
        MultiScaleConfig {
            scales: vec![16, 8],
            multi_scale: true,
        },
    )
    .unwrap();
    let f = flow(32, 16);
    let map = localize(&noise_image(16, 16, 17), &p, &f, &rotation_angles(3), 0.5).unwrap();
    assert!(map.data.iter().all(|&v| v == 0.0));
    assert_eq!(map.max(), 0.0);
}

#[test]
fn maps_are_non_negative_and_image_sized() {
    let p = pipeline(vec![16, 8], 18);
    let f = flow(32, 19);
    let img = noise_image(16, 12, 20);
    let map = localize(&img, &p, &f, &rotation_angles(2), 0.25).unwrap();
    assert_eq!((map.height, map.width), (16, 12));
    assert!(map.data.iter().all(|&v| v >= 0.0));
    assert!(map.max() > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rotation_undoes_itself_in_the_interior(seed: u64, angle in 0.0f64..std::f64::consts::TAU) {
        let n = 33;
        // Smooth content keeps bilinear resampling error small.
        let img = Image::from_fn(n, n, |y, x, c| {
            let (fy, fx) = (y as f32 / n as f32, x as f32 / n as f32);
            0.5 + 0.3 * ((3.0 * fx + 2.0 * fy + c as f32 + (seed % 7) as f32).sin())
        });
        let back = rotate(&rotate(&img, angle), -angle);
        let c = (n / 2) as isize;
        for y in 0..n {
            for x in 0..n {
                let (dy, dx) = (y as isize - c, x as isize - c);
                if dy * dy + dx * dx <= (c - 2) * (c - 2) {
                    for ch in 0..3 {
                        prop_assert!((back.get(y, x, ch) - img.get(y, x, ch)).abs() < 2e-2);
                    }
                }
            }
        }
    }

    #[test]
    fn transforms_keep_pixels_in_range(seed: u64) {
        let img = noise_image(9, 9, seed);
        for t in sample_transforms(seed, 3, &TransformConfig::default()).unwrap() {
            let out = t.apply(&img).unwrap();
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
