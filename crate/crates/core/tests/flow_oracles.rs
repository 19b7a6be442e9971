//! Trained velocity fields against closed-form flow-matching optima.

use flowplan_core::flow::interpolate_rows;
use flowplan_core::rng::seeded;
use flowplan_core::*;

fn broadcast(row: &[f64], n: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * row.len());
    for _ in 0..n {
        data.extend_from_slice(row);
    }
    Tensor::new(&[n, row.len()], data).unwrap()
}

fn train_on_points(points: &[Vec<f64>], steps: u64, seed: u64) -> VelocityModel {
    let dim = points[0].len();
    let cfg = VelocityConfig {
        state_dim: dim,
        cond_dim: 1,
        width: 64,
        depth: 3,
    };
    let mut model = VelocityModel::new(cfg, &mut seeded(seed)).unwrap();
    let tc = TrainConfig {
        steps,
        batch_size: 64,
        schedule: LrSchedule {
            base_lr: 2e-3,
            warmup_steps: 100,
            decay_interval: steps / 3,
            decay_factor: 0.5,
        },
        seed,
        ..Default::default()
    };
    let points = points.to_vec();
    train_velocity(&mut model, &tc, move |rng, b| {
        use rand::Rng;
        let mut data = Vec::with_capacity(b * dim);
        for _ in 0..b {
            data.extend_from_slice(&points[rng.random_range(0..points.len())]);
        }
        Batch {
            x1: Tensor::new(&[b, dim], data).unwrap(),
            cond: Tensor::full(&[b, 1], 1.0),
        }
    })
    .unwrap();
    model
}

/// Posterior-weighted optimal velocity for a finite equiprobable dataset,
/// evaluated by direct enumeration of the Gaussian likelihoods
/// `N(x_t; t·p, (1-t)² I)`.
fn enumerated_optimum(points: &[Vec<f64>], x: &[f64], t: f64) -> Vec<f64> {
    let s2 = (1.0 - t).powi(2);
    let logw: Vec<f64> = points
        .iter()
        .map(|p| -p.iter().zip(x).map(|(pi, xi)| (xi - t * pi).powi(2)).sum::<f64>() / (2.0 * s2))
        .collect();
    let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = w.iter().sum();
    (0..x.len())
        .map(|j| {
            points
                .iter()
                .zip(&w)
                .map(|(p, wi)| wi / z * (p[j] - x[j]) / (1.0 - t))
                .sum()
        })
        .collect()
}

#[test]
fn single_point_field_and_samples() {
    let a = vec![1.5, -0.5, 0.8, -1.2];
    let model = train_on_points(std::slice::from_ref(&a), 10_000, 0);
    let mut rng = seeded(9);
    let n = 256;
    let (mut se, mut count) = (0.0, 0.0);
    for k in 1..10 {
        let t = k as f64 / 10.0;
        let noise = Tensor::randn(&[n, 4], &mut rng);
        let xt = interpolate_rows(&noise, &broadcast(&a, n), &vec![t; n]).unwrap();
        let v = model.forward(t, &xt, &Tensor::full(&[n, 1], 1.0)).unwrap();
        for i in 0..n {
            let want = enumerated_optimum(std::slice::from_ref(&a), xt.row(i), t);
            for (got, w) in v.row(i).iter().zip(&want) {
                se += (got - w).powi(2);
                count += 1.0;
            }
        }
    }
    let rmse = (se / count).sqrt();
    assert!(rmse <= 0.05, "rmse {rmse}");

    let noise = Tensor::randn(&[64, 4], &mut rng);
    let cfg = SamplerConfig {
        steps: 50,
        guidance_scale: 1.0,
        seed: 0,
    };
    let out = euler_integrate(&model, &noise, &Tensor::full(&[64, 1], 1.0), &cfg).unwrap();
    for i in 0..64 {
        let l2 = out
            .row(i)
            .iter()
            .zip(&a)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(l2 <= 0.1, "sample {i} lands {l2} from the data point");
    }
}

#[test]
fn two_point_field_tracks_posterior_mixture() {
    let a = vec![1.0, 1.0];
    let b = vec![-1.0, 0.5];
    let points = [a, b];
    let model = train_on_points(&points, 10_000, 3);
    let mut rng = seeded(4);
    let n = 512;
    let (mut se, mut norm2, mut count) = (0.0, 0.0, 0.0);
    for k in 1..10 {
        let t = k as f64 / 10.0;
        // states drawn from the true marginal of x_t
        let noise = Tensor::randn(&[n, 2], &mut rng);
        let mut x1 = Vec::with_capacity(n * 2);
        for i in 0..n {
            x1.extend_from_slice(&points[i % 2]);
        }
        let x1 = Tensor::new(&[n, 2], x1).unwrap();
        let xt = interpolate_rows(&noise, &x1, &vec![t; n]).unwrap();
        let v = model.forward(t, &xt, &Tensor::full(&[n, 1], 1.0)).unwrap();
        for i in 0..n {
            let want = enumerated_optimum(&points, xt.row(i), t);
            for (got, w) in v.row(i).iter().zip(&want) {
                se += (got - w).powi(2);
                norm2 += w * w;
                count += 1.0;
            }
        }
    }
    let rmse = (se / count).sqrt();
    let rel = (se / norm2).sqrt();
    assert!(rel <= 0.1, "rmse {rmse}, relative {rel}");
}

#[test]
fn logit_normal_median() {
    let mut rng = seeded(2024);
    let mut draws: Vec<f64> = (0..100_000).map(|_| sample_timestep(&mut rng, 0.4, 1.0)).collect();
    assert!(draws.iter().all(|&t| t > 0.0 && t < 1.0));
    draws.sort_by(f64::total_cmp);
    let median = 0.5 * (draws[49_999] + draws[50_000]);
    let expected = 1.0 / (1.0 + (-0.4f64).exp());
    assert!((expected - 0.5987).abs() < 1e-4);
    assert!((median - expected).abs() <= 0.02, "median {median}");
}
