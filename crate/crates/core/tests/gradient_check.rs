//! Analytic gradients against central finite differences, in f64.

use pipesgd_core::numerics::{backward_grad, forward_loss, Dataset, Minibatch, ModelKind, ModelSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
/// Below this magnitude both gradients count as zero-ish and the error is
/// taken relative to the floor instead.
const FLOOR: f64 = 1e-6;
const DRAWS: usize = 100;

fn random_case(rng: &mut ChaCha8Rng, kind: ModelKind) -> (ModelSpec, Vec<f64>, Dataset<f64>, Minibatch) {
    let dim = rng.random_range(2..7);
    let classes = rng.random_range(2..5);
    let model = match kind {
        ModelKind::LogisticRegression => ModelSpec::logistic(dim, classes).unwrap(),
        ModelKind::Mlp => {
            let hidden: Vec<usize> = (0..rng.random_range(1..3)).map(|_| rng.random_range(3..8)).collect();
            let dims: Vec<usize> = std::iter::once(dim).chain(hidden).chain(std::iter::once(classes)).collect();
            ModelSpec::mlp(&dims).unwrap()
        }
    };
    let params: Vec<f64> = (0..model.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let samples = rng.random_range(1..9);
    let features: Vec<f64> = (0..samples * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels: Vec<usize> = (0..samples).map(|_| rng.random_range(0..classes)).collect();
    let data = Dataset::new(features, labels, dim, classes).unwrap();
    let batch = Minibatch::new((0..samples).collect());
    (model, params, data, batch)
}

/// Smallest |pre-activation| over all hidden units and samples. Central
/// differences are meaningless when a ReLU kink sits inside the stencil.
fn kink_margin(model: &ModelSpec, params: &[f64], data: &Dataset<f64>) -> f64 {
    let dims = model.layer_dims();
    let layout = model.param_layout();
    let mut margin = f64::INFINITY;
    for s in 0..data.num_samples() {
        let mut act = data.row(s).to_vec();
        for layer in 0..dims.len().saturating_sub(2) {
            let (w, b) = (&layout[2 * layer], &layout[2 * layer + 1]);
            let (n_in, n_out) = (dims[layer], dims[layer + 1]);
            let mut next = vec![0.0; n_out];
            for (o, out) in next.iter_mut().enumerate() {
                let z: f64 = (0..n_in).map(|i| params[w.offset + o * n_in + i] * act[i]).sum::<f64>() + params[b.offset + o];
                margin = margin.min(z.abs());
                *out = z.max(0.0);
            }
            act = next;
        }
    }
    margin
}

fn worst_error(kind: ModelKind, seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for _ in 0..DRAWS {
        let (model, mut params, data, batch) = loop {
            let case = random_case(&mut rng, kind);
            if kink_margin(&case.0, &case.1, &case.2) > 1e-3 {
                break case;
            }
        };
        let analytic = backward_grad(&params, &model, &data, &batch).unwrap();
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + STEP;
            let up = forward_loss(&params, &model, &data, &batch).unwrap();
            params[i] = orig - STEP;
            let down = forward_loss(&params, &model, &data, &batch).unwrap();
            params[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
            checked += 1;
        }
    }
    (worst, checked)
}

#[test]
fn logistic_gradient_matches_finite_differences() {
    let (worst, checked) = worst_error(ModelKind::LogisticRegression, 1);
    assert!(checked >= DRAWS);
    assert!(worst < TOL, "worst relative error {worst:e}");
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    let (worst, checked) = worst_error(ModelKind::Mlp, 2);
    assert!(checked >= DRAWS);
    assert!(worst < TOL, "worst relative error {worst:e}");
}

#[test]
fn f32_gradient_agrees_with_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (model, params, data, batch) = random_case(&mut rng, ModelKind::Mlp);
    let g64 = backward_grad(&params, &model, &data, &batch).unwrap();
    let p32: Vec<f32> = params.iter().map(|&v| v as f32).collect();
    let g32 = backward_grad(&p32, &model, &data.cast::<f32>(), &batch).unwrap();
    for (a, b) in g64.iter().zip(g32.iter()) {
        assert!((a - *b as f64).abs() < 1e-5, "{a} vs {b}");
    }
}
