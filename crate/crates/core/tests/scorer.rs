use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqcad::detector::{train_scorer, ScorerTrainConfig};

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// With gamma = 0 and every negative kept, training is plain logistic
/// regression by full-batch gradient descent.
#[test]
fn gamma_zero_matches_logistic_regression() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let xs: Vec<Vec<f64>> = (0..60)
        .map(|_| (0..3).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect();
    let ys: Vec<bool> = xs.iter().map(|x| x[0] - 0.5 * x[2] + rng.random_range(-1.0..1.0) > 0.0).collect();
    let cfg = ScorerTrainConfig {
        gamma: 0.0,
        ratio_k: 1000,
        learning_rate: 0.3,
        epochs: 150,
        seed: 4,
    };
    let trained = train_scorer(&xs, &ys, "toy", &cfg).unwrap();
    let m = &trained.model;

    let norm: Vec<Vec<f64>> = xs.iter().map(|x| m.normalize(x)).collect();
    let n = norm.len() as f64;
    let mut w = [0.0; 3];
    let mut b = 0.0;
    for epoch in 0..cfg.epochs {
        let mut loss = 0.0;
        let mut gw = [0.0; 3];
        let mut gb = 0.0;
        for (x, &y) in norm.iter().zip(&ys) {
            let p = sigmoid(w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b);
            let t = if y { 1.0 } else { 0.0 };
            loss -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
            for j in 0..3 {
                gw[j] += (p - t) * x[j];
            }
            gb += p - t;
        }
        assert!((loss / n - trained.losses[epoch]).abs() < 1e-10, "epoch {epoch}");
        for j in 0..3 {
            w[j] -= cfg.learning_rate * gw[j] / n;
        }
        b -= cfg.learning_rate * gb / n;
    }
    for j in 0..3 {
        assert!((w[j] - m.weights[j]).abs() < 1e-10, "weight {j}: {} vs {}", w[j], m.weights[j]);
    }
    assert!((b - m.bias).abs() < 1e-10);
}
