//! Analytic gradients against central finite differences.

use rand::Rng;
use ra_marl::learn::{Actor, Critic, NetShape};
use ra_marl::seed::rng_from;
use ra_marl::sim::Action;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 50;

fn shape() -> NetShape {
    NetShape {
        feature_dim: 6,
        hidden_width: 8,
        hidden_layers: 2,
    }
}

fn random_vec<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Norm-wise relative error, robust to individual near-zero components.
fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm(a).max(norm(b)).max(1e-12)
}

fn central_difference(params: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|k| {
            let orig = p[k];
            p[k] = orig + STEP;
            let up = f(&p);
            p[k] = orig - STEP;
            let down = f(&p);
            p[k] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

#[test]
fn actor_log_prob_gradient_matches_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let mut rng = rng_from(seed);
        // Random biases keep preactivations off the ReLU kink at zero.
        let mut actor = Actor::new(shape(), &mut rng);
        let n = actor.net.params().len();
        actor.net.set_params(&random_vec(&mut rng, n, 0.5)).unwrap();
        let x = random_vec(&mut rng, shape().feature_dim, 2.0);
        for action in [Action::Wait, Action::Transmit] {
            let analytic = actor.log_prob_gradient(&x, action).unwrap();
            let mut probe = actor.clone();
            let numeric = central_difference(&actor.net.params(), |p| {
                probe.net.set_params(p).unwrap();
                probe.log_prob(&x, action).unwrap()
            });
            worst = worst.max(relative_error(&analytic, &numeric));
        }
    }
    assert!(worst <= TOL, "worst relative error {worst:e}");
}

#[test]
fn linear_critic_gradient_matches_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let mut rng = rng_from(seed);
        let dim = shape().feature_dim;
        let mut critic = Critic::linear(dim);
        critic.set_params(&random_vec(&mut rng, dim + 1, 1.0)).unwrap();
        let x = random_vec(&mut rng, dim, 2.0);
        let analytic = critic.value_gradient(&x).unwrap();
        let mut probe = critic.clone();
        let numeric = central_difference(&critic.params(), |p| {
            probe.set_params(p).unwrap();
            probe.value(&x).unwrap()
        });
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    assert!(worst <= TOL, "worst relative error {worst:e}");
}

#[test]
fn deep_linear_critic_gradient_matches_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let mut rng = rng_from(seed);
        let mut critic = Critic::deep_linear(shape(), &mut rng);
        let n = critic.params().len();
        critic.set_params(&random_vec(&mut rng, n, 0.5)).unwrap();
        let x = random_vec(&mut rng, shape().feature_dim, 2.0);
        let analytic = critic.value_gradient(&x).unwrap();
        let mut probe = critic.clone();
        let numeric = central_difference(&critic.params(), |p| {
            probe.set_params(p).unwrap();
            probe.value(&x).unwrap()
        });
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    assert!(worst <= TOL, "worst relative error {worst:e}");
}

#[test]
fn deep_linear_critic_is_linear_in_its_input() {
    let mut rng = rng_from(7);
    let mut critic = Critic::deep_linear(shape(), &mut rng);
    let n = critic.params().len();
    critic.set_params(&random_vec(&mut rng, n, 0.5)).unwrap();
    let zero = vec![0.0; shape().feature_dim];
    let bias = critic.value(&zero).unwrap();
    let x = random_vec(&mut rng, shape().feature_dim, 2.0);
    let y = random_vec(&mut rng, shape().feature_dim, 2.0);
    let (a, b) = (0.7, -1.3);
    let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
    let lhs = critic.value(&combo).unwrap() - bias;
    let rhs = a * (critic.value(&x).unwrap() - bias) + b * (critic.value(&y).unwrap() - bias);
    assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
}
