//! Linear-Gaussian fixture with a known injected noise level, and the
//! one-step spreads each model predicts when fed the true history of
//! held-out trajectories.

use trajcast::aleatoric::{train_residual_cvae, ResidualCvae, ResidualStepper};
use trajcast::baselines::{train_full_vae, train_prob_mlp, FullVae, FullVaeStepper, ProbMlp, ProbMlpConfig};
use trajcast::ensemble::{rollout, train_ensemble, DynamicsArch, DynamicsEnsemble, MemberStepper};
use trajcast::env::{generate_dataset, EnvConfig, PolicyKind, Trajectory, TrajectoryDataset};
use trajcast::numeric::RngStream;
use trajcast::train::TrainConfig;
use trajcast::vae::VaeConfig;

/// Std of the per-step state noise the environment injects.
pub const STATE_NOISE: f64 = 0.1;
/// The toy's input gain of 0.1 turns this into `STATE_NOISE`.
const ACTION_NOISE: f64 = 1.0;
const HORIZON: usize = 30;
pub const N_LOW: usize = 200;
pub const N_HIGH: usize = N_LOW / 10;
const MEMBERS: usize = 5;
const EPOCHS: usize = 20;
const N_TEST: usize = 10;
/// Samples per conditional spread estimate.
const DRAWS: usize = 200;

pub fn env() -> EnvConfig {
    EnvConfig::linear_toy(ACTION_NOISE, HORIZON)
}

pub struct Models {
    pub ensemble: DynamicsEnsemble,
    pub residual: ResidualCvae,
    pub full_vae: FullVae,
    pub prob_mlp: ProbMlp,
}

/// `N_LOW` training trajectories drawn with `seed`; the high-epistemic set is
/// their first `N_HIGH`.
pub fn datasets(seed: u64) -> (TrajectoryDataset, TrajectoryDataset) {
    let low = generate_dataset(&env(), PolicyKind::LinearGoal, N_LOW, seed).unwrap();
    let high = TrajectoryDataset::new(low.env_id, low.trajectories[..N_HIGH].to_vec(), seed).unwrap();
    (low, high)
}

pub fn train(data: &TrajectoryDataset, seed: u64) -> Models {
    let tc = TrainConfig {
        epochs: EPOCHS,
        ..TrainConfig::default()
    };
    let arch = DynamicsArch {
        state_dim: data.state_dim(),
        action_dim: data.action_dim(),
        hidden: 32,
        head_hidden: 32,
    };
    let vc = VaeConfig {
        train: tc.clone(),
        ..VaeConfig::default()
    };
    let ensemble = train_ensemble(data, MEMBERS, &arch, &tc, seed).unwrap();
    let residual = train_residual_cvae(data, &ensemble, &vc, seed).unwrap();
    let full_vae = train_full_vae(data, &vc, seed).unwrap();
    let prob_mlp = train_prob_mlp(
        data,
        &ProbMlpConfig {
            train: tc,
            ..Default::default()
        },
        seed,
    )
    .unwrap();
    Models {
        ensemble,
        residual,
        full_vae,
        prob_mlp,
    }
}

/// Mean one-step standard deviations over held-out states and dimensions.
#[derive(Clone, Debug)]
pub struct Spreads {
    /// Residual-CVAE samples, per member, given the true residual history.
    pub residual: f64,
    /// Full-VAE samples given the true state history.
    pub full_vae: f64,
    /// Disagreement of the members' one-step predictions.
    pub ensemble: f64,
    /// Predicted std of the probabilistic MLP.
    pub prob_mlp: f64,
}

fn std_of(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    (xs.map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Mean over dimensions of the per-dimension std across rows.
fn row_spread(rows: &[Vec<f64>]) -> f64 {
    let ds = rows[0].len();
    (0..ds).map(|d| std_of(rows.iter().map(|r| r[d]))).sum::<f64>() / ds as f64
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn test_set(seed: u64) -> Vec<Trajectory> {
    generate_dataset(&env(), PolicyKind::LinearGoal, N_TEST, seed ^ 0x7e57)
        .unwrap()
        .trajectories
}

pub fn one_step_spreads(models: &Models, test: &[Trajectory], seed: u64) -> Spreads {
    let ens = &models.ensemble;
    let latent = models.residual.vae.arch.latent_dim;
    let full_latent = models.full_vae.vae.arch.latent_dim;
    let mut rng = RngStream::labeled(seed, "spreads");
    let (mut res, mut full, mut spread, mut pm) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for tr in test {
        let t_len = tr.actions.len();
        let rep = |v: &Vec<f64>| vec![v.clone(); DRAWS];
        for m in 0..ens.len() {
            let member = rollout(ens, m, &tr.states[0], &tr.actions).unwrap();
            let mut guide = vec![tr.states[0].clone()];
            guide.extend(member.states);
            let mut stepper = ResidualStepper::new(&models.residual, DRAWS).unwrap();
            for t in 0..t_len {
                let eps: Vec<f64> = tr.states[t].iter().zip(&guide[t]).map(|(a, b)| a - b).collect();
                let z: Vec<Vec<f64>> = (0..DRAWS).map(|_| rng.normals(latent)).collect();
                let out = stepper.step(
                    &rep(&guide[t]),
                    &rep(&guide[t + 1]),
                    &rep(&eps),
                    &rep(&tr.actions[t]),
                    &z,
                );
                res.push(row_spread(&out));
            }
        }
        let mut members: Vec<MemberStepper> = (0..ens.len()).map(|m| MemberStepper::new(ens, m, 1).unwrap()).collect();
        let mut vae = FullVaeStepper::new(&models.full_vae, DRAWS).unwrap();
        for t in 0..t_len {
            let now = std::slice::from_ref(&tr.states[t]);
            let act = std::slice::from_ref(&tr.actions[t]);
            let preds: Vec<Vec<f64>> = members.iter_mut().map(|s| s.step(now, act).0.remove(0)).collect();
            spread.push(row_spread(&preds));
            let z: Vec<Vec<f64>> = (0..DRAWS).map(|_| rng.normals(full_latent)).collect();
            let prev = (t > 0).then(|| rep(&tr.states[t - 1]));
            let out = vae.step(&rep(&tr.states[t]), prev.as_deref(), &rep(&tr.actions[t]), &z);
            full.push(row_spread(&out));
            pm.push(mean(
                &models.prob_mlp.predicted_std(&tr.states[t], &tr.actions[t]).unwrap(),
            ));
        }
    }
    Spreads {
        residual: mean(&res),
        full_vae: mean(&full),
        ensemble: mean(&spread),
        prob_mlp: mean(&pm),
    }
}
