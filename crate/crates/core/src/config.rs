//! Experiment configuration: one TOML document with `env`, `policy`, `data`,
//! `models` and `eval` sections. Every setting the pipeline uses lives here.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::ProbMlpConfig;
use crate::ensemble::DynamicsArch;
use crate::env::{EnvConfig, EnvId, OutcomeSpec, PolicyConfig, PolicyKind, Scenario};
use crate::error::{Error, Result};
use crate::metrics::BandwidthRule;
use crate::numeric::RngStream;
use crate::train::TrainConfig;
use crate::vae::VaeConfig;

/// Ratio between the low- and high-epistemic training set sizes.
pub const DATA_RATIO: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub env: EnvConfig,
    pub policy: PolicyConfig,
    pub data: DataConfig,
    pub models: ModelsConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Training trajectories at the low-epistemic level.
    pub n_train_low_epistemic: usize,
    /// Training trajectories at the high-epistemic level; the first
    /// trajectories of the low-epistemic set.
    pub n_train_high_epistemic: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub hidden: usize,
    pub head_hidden: usize,
    pub train: TrainConfig,
}

impl EnsembleConfig {
    pub fn arch(&self, state_dim: usize, action_dim: usize) -> DynamicsArch {
        DynamicsArch {
            state_dim,
            action_dim,
            hidden: self.hidden,
            head_hidden: self.head_hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsConfig {
    pub ensemble_size: usize,
    pub ensemble: EnsembleConfig,
    pub residual_vae: VaeConfig,
    pub full_vae: VaeConfig,
    pub prob_mlp: ProbMlpConfig,
    pub seed: u64,
}

/// Where forecast actions come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionMode {
    /// The scripted policy runs on each forecast's own states.
    Policy,
    /// One dithered policy rollout fixes the actions for every forecast and
    /// every observed rollout of the scenario.
    Fixed,
}

/// Ranges the per-scenario outcome tasks are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeRanges {
    /// Distance of the target from the policy goal.
    pub target_offset: [f64; 2],
    pub radius: [f64; 2],
    /// Deadline as a fraction of the horizon.
    pub deadline_fraction: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Forecast samples per scenario and model.
    pub n_samples: usize,
    pub n_scenarios: usize,
    /// Ground-truth rollouts per scenario.
    pub n_observed: usize,
    /// Samples per side entering each MMD slice; 0 uses all.
    pub mmd_max_samples: usize,
    pub bandwidth: BandwidthRule,
    pub action_mode: ActionMode,
    pub outcome: OutcomeRanges,
    pub seed: u64,
}

/// One evaluation scenario: start, policy goal and outcome task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalScenario {
    pub scenario: Scenario,
    pub outcome: OutcomeSpec,
}

impl OutcomeRanges {
    fn violations(&self, v: &mut Vec<String>) {
        let check = |v: &mut Vec<String>, name: &str, [lo, hi]: [f64; 2], min: f64, max: f64| {
            if !(min <= lo && lo <= hi && hi <= max) {
                v.push(format!(
                    "eval.outcome.{name} [{lo}, {hi}] must be an interval within [{min}, {max}]"
                ));
            }
        };
        check(v, "target_offset", self.target_offset, 0.0, f64::MAX);
        check(v, "radius", self.radius, f64::MIN_POSITIVE, f64::MAX);
        check(v, "deadline_fraction", self.deadline_fraction, f64::MIN_POSITIVE, 1.0);
    }
}

impl EvalConfig {
    /// Draws scenario `k`. The target sits at a random direction and
    /// distance from the goal; the deadline is at least one step.
    pub fn scenario(&self, env: &EnvConfig, k: usize) -> Result<EvalScenario> {
        let mut rng = RngStream::labeled(self.seed, "scenarios").fork(k as u64);
        let scenario = crate::env::sample_scenario(env, &mut rng);
        let o = &self.outcome;
        let dir = loop {
            let d = rng.normals(scenario.goal.len());
            let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-9 {
                break d.into_iter().map(|x| x / n).collect::<Vec<_>>();
            }
        };
        let dist = rng.uniform(o.target_offset[0], o.target_offset[1]);
        let target = scenario.goal.iter().zip(&dir).map(|(g, d)| g + dist * d).collect();
        let radius = rng.uniform(o.radius[0], o.radius[1]);
        let frac = rng.uniform(o.deadline_fraction[0], o.deadline_fraction[1]);
        let deadline = ((frac * env.horizon as f64).round() as usize).clamp(1, env.horizon);
        Ok(EvalScenario {
            outcome: OutcomeSpec::new(target, radius, deadline)?,
            scenario,
        })
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults for one environment.
    pub fn preset(env_id: EnvId) -> Self {
        let env = EnvConfig::for_env(env_id);
        let train = TrainConfig {
            epochs: 30,
            ..TrainConfig::default()
        };
        let vae = VaeConfig {
            train: train.clone(),
            ..VaeConfig::default()
        };
        let outcome = match env_id {
            EnvId::PusherLite => OutcomeRanges {
                target_offset: [0.0, 0.3],
                radius: [0.1, 0.25],
                deadline_fraction: [0.4, 1.0],
            },
            EnvId::DroneLite => OutcomeRanges {
                target_offset: [0.0, 1.0],
                radius: [0.3, 0.8],
                deadline_fraction: [0.3, 1.0],
            },
            EnvId::LinearToy => OutcomeRanges {
                target_offset: [0.0, 0.5],
                radius: [0.1, 0.4],
                deadline_fraction: [0.3, 1.0],
            },
        };
        Self {
            output_dir: PathBuf::from(format!("runs/{env_id}")),
            policy: PolicyKind::default_for(env_id).into(),
            env,
            data: DataConfig {
                n_train_low_epistemic: 200,
                n_train_high_epistemic: 20,
                seed: 1,
            },
            models: ModelsConfig {
                ensemble_size: 5,
                ensemble: EnsembleConfig {
                    hidden: 32,
                    head_hidden: 32,
                    train: train.clone(),
                },
                residual_vae: vae.clone(),
                full_vae: vae,
                prob_mlp: ProbMlpConfig {
                    hidden: vec![64, 64],
                    train,
                },
                seed: 2,
            },
            eval: EvalConfig {
                n_samples: 256,
                n_scenarios: 50,
                n_observed: 200,
                mmd_max_samples: 64,
                bandwidth: BandwidthRule::MedianHeuristic,
                action_mode: ActionMode::Policy,
                outcome,
                seed: 3,
            },
        }
    }

    /// Smallest configuration that exercises every stage.
    pub fn minimal(env_id: EnvId) -> Self {
        let mut c = Self::preset(env_id);
        c.env.horizon = c.env.horizon.min(20);
        c.data.n_train_low_epistemic = 20;
        c.data.n_train_high_epistemic = 2;
        c.models.ensemble_size = 2;
        c.models.ensemble.hidden = 8;
        c.models.ensemble.head_hidden = 8;
        for v in [&mut c.models.residual_vae, &mut c.models.full_vae] {
            v.hidden = 8;
            v.head_hidden = 8;
            v.latent_dim = 2;
        }
        c.models.prob_mlp.hidden = vec![16];
        for t in [
            &mut c.models.ensemble.train,
            &mut c.models.residual_vae.train,
            &mut c.models.full_vae.train,
            &mut c.models.prob_mlp.train,
        ] {
            t.epochs = 2;
            t.batches_per_epoch = 3;
            t.batch_size = 4;
            t.window = 8;
        }
        c.eval.n_samples = 8;
        c.eval.n_scenarios = 5;
        c.eval.n_observed = 8;
        c
    }

    /// Points every seed at `seed`; the stages draw from distinct labelled
    /// streams, so sharing the value does not correlate them.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.models.seed = seed;
        self.eval.seed = seed;
        self
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = self.env.violations();
        if self.policy.kind.env() != self.env.env_id {
            v.push(format!(
                "policy.kind {:?} does not drive {}",
                self.policy.kind, self.env.env_id
            ));
        }
        if !(self.policy.dither >= 0.0) {
            v.push("policy.dither must be >= 0".into());
        }
        let d = &self.data;
        if d.n_train_high_epistemic < 2 {
            v.push("data.n_train_high_epistemic must be >= 2".into());
        }
        if d.n_train_low_epistemic != DATA_RATIO * d.n_train_high_epistemic {
            v.push(format!(
                "data.n_train_low_epistemic ({}) must be {DATA_RATIO}x data.n_train_high_epistemic ({})",
                d.n_train_low_epistemic, d.n_train_high_epistemic
            ));
        }
        let m = &self.models;
        if m.ensemble_size < 2 {
            v.push("models.ensemble_size must be >= 2".into());
        }
        if m.ensemble.hidden == 0 || m.ensemble.head_hidden == 0 {
            v.push("models.ensemble hidden sizes must be >= 1".into());
        }
        v.extend(m.ensemble.train.violations("models.ensemble.train"));
        v.extend(m.residual_vae.violations("models.residual_vae"));
        v.extend(m.full_vae.violations("models.full_vae"));
        if m.prob_mlp.hidden.is_empty() || m.prob_mlp.hidden.contains(&0) {
            v.push("models.prob_mlp.hidden must list positive sizes".into());
        }
        v.extend(m.prob_mlp.train.violations("models.prob_mlp.train"));
        let e = &self.eval;
        if e.n_samples < 2 {
            v.push("eval.n_samples must be >= 2".into());
        }
        if e.n_scenarios == 0 {
            v.push("eval.n_scenarios must be >= 1".into());
        }
        if e.n_observed < 2 {
            v.push("eval.n_observed must be >= 2".into());
        }
        if let BandwidthRule::Fixed(b) = e.bandwidth {
            if !(b > 0.0 && b.is_finite()) {
                v.push("eval.bandwidth must be > 0".into());
            }
        }
        e.outcome.violations(&mut v);
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(format!("config serialization: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// SHA-256 of the canonical TOML form, hex encoded. The output
    /// directory is excluded, so moving a run does not change its hash.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        Ok(hex::encode(Sha256::digest(c.to_toml()?.as_bytes())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_and_round_trip() {
        for env in [EnvId::PusherLite, EnvId::DroneLite, EnvId::LinearToy] {
            for c in [ExperimentConfig::preset(env), ExperimentConfig::minimal(env)] {
                c.validate().unwrap();
                let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
                assert_eq!(back, c);
                assert_eq!(back.hash().unwrap(), c.hash().unwrap());
            }
        }
    }

    #[test]
    fn data_ratio_violation_is_reported() {
        let mut c = ExperimentConfig::minimal(EnvId::DroneLite);
        c.data.n_train_low_epistemic = 5 * c.data.n_train_high_epistemic;
        c.eval.n_observed = 1;
        match c.validate() {
            Err(Error::Config(v)) => {
                assert_eq!(v.len(), 2, "{v:?}");
                assert!(v[0].contains("10x"), "{v:?}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hash_tracks_content_not_location() {
        let a = ExperimentConfig::minimal(EnvId::LinearToy);
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        assert_ne!(a.hash().unwrap(), a.clone().with_seed(99).hash().unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = ExperimentConfig::minimal(EnvId::LinearToy).to_toml().unwrap();
        let text = text.replacen("[data]", "[data]\nsurprise = 1", 1);
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Parse(_))));
    }

    #[test]
    fn scenarios_respect_ranges() {
        let c = ExperimentConfig::preset(EnvId::DroneLite);
        for k in 0..20 {
            let s = c.eval.scenario(&c.env, k).unwrap();
            assert!(s.outcome.deadline >= 1 && s.outcome.deadline <= c.env.horizon);
            let off: f64 = s
                .outcome
                .target
                .iter()
                .zip(&s.scenario.goal)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(off <= 1.0 + 1e-12);
            assert_eq!(s, c.eval.scenario(&c.env, k).unwrap());
        }
    }
}
