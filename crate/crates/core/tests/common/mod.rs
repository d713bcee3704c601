//! Helpers shared by the integration tests.
#![allow(dead_code)]

use differflow::autodiff::{Bindings, GraphBuilder, NodeId, Tensor};
use rand::Rng;

pub fn uniform(shape: &[usize], rng: &mut differflow::Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Uniform values kept at least `gap` away from zero (clear of kinks).
pub fn away_from_zero(shape: &[usize], gap: f64, rng: &mut differflow::Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Compares reverse-mode gradients of `<out, r>` (for a random `r`) with
/// central differences. Returns the largest error relative to
/// `max(|analytic|, |numeric|, 1e-3)`.
pub fn gradient_error(
    inputs: &[(&str, Tensor<f64>)],
    build: impl FnOnce(&mut GraphBuilder, &[NodeId]) -> NodeId,
    seed: u64,
) -> f64 {
    let mut b = GraphBuilder::new();
    let leaves: Vec<NodeId> = inputs.iter().map(|(n, t)| b.leaf(*n, t.shape())).collect();
    let out = build(&mut b, &leaves);
    let graph = b.build();

    let eval = |values: &[Tensor<f64>]| {
        let mut bind = Bindings::new();
        for ((n, _), v) in inputs.iter().zip(values) {
            bind.bind_owned(*n, v.clone());
        }
        graph.evaluate(bind).expect("evaluates").value(out).clone()
    };
    let base: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let y = eval(&base);
    let mut rng = differflow::rng(seed);
    let proj = uniform(y.shape(), &mut rng);
    let loss =
        |values: &[Tensor<f64>]| -> f64 { eval(values).data().iter().zip(proj.data()).map(|(a, b)| a * b).sum() };

    let mut bind = Bindings::new();
    for (n, t) in inputs {
        bind.bind(*n, t);
    }
    let exec = graph.evaluate(bind).unwrap();
    let grads = exec.backward_wrt(out, &proj, &leaves).unwrap();

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.node(*leaf).unwrap();
        for i in 0..base[k].len() {
            let mut plus = base.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = base.clone();
            minus[k].data_mut()[i] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    worst
}
