//! Statistical and training invariants that need trained models or large
//! sample counts.

mod common;

use std::sync::OnceLock;

use common::known_noise;
use trajcast::aleatoric::{train_residual_cvae, ResidualCvae};
use trajcast::baselines::{train_full_vae, train_prob_mlp, FullVae, ProbMlp, ProbMlpConfig};
use trajcast::ensemble::{rollout, train_ensemble, DynamicsArch, DynamicsEnsemble};
use trajcast::env::{generate_dataset, PolicyKind, TrajectoryDataset};
use trajcast::forecast::{decompose, forecast, ActionPlan};
use trajcast::numeric::{reparameterize, GaussianHead, RngStream};
use trajcast::train::TrainConfig;
use trajcast::vae::VaeConfig;

const EPOCHS: usize = 12;

struct Fixture {
    data: TrajectoryDataset,
    ens: DynamicsEnsemble,
    cvae: ResidualCvae,
    full: FullVae,
    mlp: ProbMlp,
}

fn train_config() -> TrainConfig {
    TrainConfig {
        epochs: EPOCHS,
        ..TrainConfig::default()
    }
}

/// Models trained on the known-noise environment with the default settings
/// apart from a shorter schedule.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let data = generate_dataset(&known_noise::env(), PolicyKind::LinearGoal, 60, 21).unwrap();
        let arch = DynamicsArch {
            state_dim: 2,
            action_dim: 2,
            hidden: 32,
            head_hidden: 32,
        };
        let vc = VaeConfig {
            train: train_config(),
            ..VaeConfig::default()
        };
        let ens = train_ensemble(&data, 5, &arch, &train_config(), 22).unwrap();
        let cvae = train_residual_cvae(&data, &ens, &vc, 23).unwrap();
        let full = train_full_vae(&data, &vc, 24).unwrap();
        let mlp = train_prob_mlp(
            &data,
            &ProbMlpConfig {
                train: train_config(),
                ..Default::default()
            },
            25,
        )
        .unwrap();
        Fixture {
            data,
            ens,
            cvae,
            full,
            mlp,
        }
    })
}

fn plan(f: &Fixture) -> (Vec<f64>, ActionPlan) {
    let tr = &f.data.trajectories[0];
    (tr.states[0].clone(), ActionPlan::Fixed(tr.actions.clone()))
}

fn moments(xs: &[f64]) -> (f64, f64, f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let m = |k: i32| xs.iter().map(|x| (x - mean).powi(k)).sum::<f64>() / n;
    let var = m(2);
    (mean, var, m(3) / var.powf(1.5), m(4) / (var * var) - 3.0)
}

#[test]
fn reparameterization_matches_head_moments() {
    let head = GaussianHead::new(vec![0.7, -2.0, 0.0], vec![-1.5, 0.3, 2.0]).unwrap();
    let mut rng = RngStream::new(31, 0);
    let n = 100_000;
    let draws: Vec<Vec<f64>> = (0..n)
        .map(|_| reparameterize(&head, &rng.normals(3)).unwrap())
        .collect();
    for d in 0..3 {
        let xs: Vec<f64> = draws.iter().map(|v| v[d]).collect();
        let (mean, var, _, _) = moments(&xs);
        let target = head.logvar[d].exp();
        let se = (target / n as f64).sqrt();
        assert!((mean - head.mean[d]).abs() <= 3.0 * se, "dim {d}: mean {mean}");
        assert!((var / target - 1.0).abs() <= 0.05, "dim {d}: var {var} vs {target}");
    }
}

/// Covers the squared-error and ELBO losses; the probabilistic MLP's
/// Gaussian NLL has no fixed sign, so a relative band means nothing there.
#[test]
fn training_loss_settles_over_the_second_half() {
    let f = fixture();
    for (name, curve) in [
        ("ensemble", &f.ens.train_meta.loss_curve),
        ("residual-cvae", &f.cvae.vae.train_meta.loss_curve),
        ("full-vae", &f.full.vae.train_meta.loss_curve),
    ] {
        assert_eq!(curve.len(), EPOCHS, "{name}");
        for e in EPOCHS / 2..EPOCHS {
            assert!(
                curve[e] <= curve[e - 1] + 0.05 * curve[e - 1].abs(),
                "{name} epoch {e}: {curve:?}"
            );
        }
    }
}

#[test]
fn both_vaes_have_the_same_parameter_count() {
    let f = fixture();
    assert_eq!(f.full.vae.arch, f.cvae.vae.arch);
    assert_eq!(f.full.vae.encoder.len(), f.cvae.vae.encoder.len());
    assert_eq!(f.full.vae.decoder.len(), f.cvae.vae.decoder.len());
}

#[test]
fn prob_mlp_one_step_forecast_is_gaussian() {
    let f = fixture();
    let tr = &f.data.trajectories[3];
    let n = 100_000;
    let mut rng = RngStream::new(32, 0);
    let states = vec![tr.states[5].clone(); n];
    let actions = vec![tr.actions[5].clone(); n];
    let noise: Vec<Vec<f64>> = (0..n).map(|_| rng.normals(2)).collect();
    let next = f.mlp.step(&states, &actions, &noise).unwrap();
    for d in 0..2 {
        let xs: Vec<f64> = next.iter().map(|s| s[d]).collect();
        let (_, _, skew, kurt) = moments(&xs);
        assert!(
            skew.abs() <= 0.2 && kurt.abs() <= 0.2,
            "dim {d}: skew {skew}, excess kurtosis {kurt}"
        );
    }
}

#[test]
fn uncertainty_is_present_from_the_first_step() {
    let f = fixture();
    let (s0, plan) = plan(f);
    let b = forecast(&f.ens, &f.cvae, &s0, &plan, 1000, &RngStream::new(33, 0)).unwrap();
    let c = decompose(&b).unwrap();
    for (d, v) in c.total[0].iter().enumerate() {
        assert!(*v > 1e-8, "dim {d}: total variance {v}");
    }
}

#[test]
fn forecasts_do_not_depend_on_sample_count_or_thread_count() {
    let f = fixture();
    let (s0, plan) = plan(f);
    let rng = RngStream::new(34, 0);
    let run = |threads: usize, n: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| forecast(&f.ens, &f.cvae, &s0, &plan, n, &rng).unwrap())
    };
    let a = run(1, 150);
    let b = run(4, 150);
    let c = run(2, 70);
    assert_eq!(a.forecasts, b.forecasts);
    assert_eq!(a.member_indices, b.member_indices);
    assert_eq!(&a.forecasts[..70], &c.forecasts[..]);
    assert_eq!(&a.member_indices[..70], &c.member_indices[..]);
}

/// Mean over held-out trajectories, steps and dimensions of the variance
/// across members' closed-loop rollouts.
fn ensemble_variance(ens: &DynamicsEnsemble, test: &[trajcast::env::Trajectory]) -> f64 {
    let mut acc = 0.0;
    let mut count = 0.0;
    for tr in test {
        let rolls: Vec<_> = (0..ens.len())
            .map(|m| rollout(ens, m, &tr.states[0], &tr.actions).unwrap().states)
            .collect();
        for t in 0..tr.actions.len() {
            for d in 0..tr.state_dim() {
                let xs: Vec<f64> = rolls.iter().map(|r| r[t][d]).collect();
                acc += moments(&xs).1;
                count += 1.0;
            }
        }
    }
    acc / count
}

#[test]
fn ten_times_more_data_shrinks_ensemble_variance() {
    let arch = DynamicsArch {
        state_dim: 2,
        action_dim: 2,
        hidden: 32,
        head_hidden: 32,
    };
    let (mut low, mut high) = (0.0, 0.0);
    for seed in [1, 2, 3] {
        let (lo_data, hi_data) = known_noise::datasets(seed);
        let test = known_noise::test_set(seed);
        low += ensemble_variance(
            &train_ensemble(&lo_data, 5, &arch, &train_config(), seed).unwrap(),
            &test,
        ) / 3.0;
        high += ensemble_variance(
            &train_ensemble(&hi_data, 5, &arch, &train_config(), seed).unwrap(),
            &test,
        ) / 3.0;
    }
    assert!(low < high, "low-epistemic {low} vs high-epistemic {high}");
}
