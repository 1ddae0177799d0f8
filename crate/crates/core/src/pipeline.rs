//! The experiment pipeline: generate → train-ensemble → train-aleatoric →
//! train-baselines → forecast → evaluate → report, for both epistemic
//! levels.
//!
//! Every stage writes its artifacts under the output directory and records
//! them, with their SHA-256 digests, in `manifest.json`. A stage whose
//! recorded artifacts are intact is skipped on rerun; rerunning a stage
//! invalidates everything downstream of it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aleatoric::train_residual_cvae;
use crate::baselines::{train_full_vae, train_prob_mlp};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Model};
use crate::config::{ActionMode, EvalScenario, ExperimentConfig};
use crate::ensemble::train_ensemble;
use crate::env::{generate_dataset, label_outcome, rollout, rollout_actions, Trajectory, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::forecast::{
    decompose, forecast, forecast_full_vae, forecast_prob_mlp, outcome_probability, ActionPlan, ForecastBundle,
};
use crate::metrics::{brier, trajectory_mmd, MmdCurve};
use crate::numeric::RngStream;
use crate::report;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

/// Forecasting models compared in the evaluation, in report order.
pub const MODELS: [&str; 3] = ["residual-vae", "full-vae", "prob-mlp"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Generate,
    TrainEnsemble,
    TrainAleatoric,
    TrainBaselines,
    Forecast,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Generate,
        Stage::TrainEnsemble,
        Stage::TrainAleatoric,
        Stage::TrainBaselines,
        Stage::Forecast,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::TrainEnsemble => "train-ensemble",
            Stage::TrainAleatoric => "train-aleatoric",
            Stage::TrainBaselines => "train-baselines",
            Stage::Forecast => "forecast",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    /// Stages whose outputs this one reads, directly or not.
    fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Generate => &[],
            Stage::TrainEnsemble => &[Stage::Generate],
            Stage::TrainAleatoric => &[Stage::Generate, Stage::TrainEnsemble],
            Stage::TrainBaselines => &[Stage::Generate],
            Stage::Forecast => &[
                Stage::Generate,
                Stage::TrainEnsemble,
                Stage::TrainAleatoric,
                Stage::TrainBaselines,
            ],
            Stage::Evaluate => &[
                Stage::Generate,
                Stage::TrainEnsemble,
                Stage::TrainAleatoric,
                Stage::TrainBaselines,
                Stage::Forecast,
            ],
            Stage::Report => &[
                Stage::Generate,
                Stage::TrainEnsemble,
                Stage::TrainAleatoric,
                Stage::TrainBaselines,
                Stage::Forecast,
                Stage::Evaluate,
            ],
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown stage `{s}`")))
    }
}

/// Epistemic level: how much training data the models see.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Level {
    /// The full training set.
    Low,
    /// A tenth of it.
    High,
}

impl Level {
    pub const ALL: [Level; 2] = [Level::Low, Level::High];

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Low => "low",
            Level::High => "high",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub wall_time_s: f64,
    pub artifacts: Vec<Artifact>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub stages: BTreeMap<Stage, StageRecord>,
}

impl RunManifest {
    fn new(config_hash: String) -> Self {
        Self {
            format_version: MANIFEST_VERSION,
            config_hash,
            stages: BTreeMap::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: RunManifest = read_json(&dir.join(MANIFEST_FILE))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::UnsupportedVersion {
                found: m.format_version,
                expected: MANIFEST_VERSION,
            });
        }
        Ok(m)
    }

    pub fn artifact_paths(&self) -> impl Iterator<Item = &str> {
        self.stages
            .values()
            .flat_map(|r| r.artifacts.iter().map(|a| a.path.as_str()))
    }
}

pub(crate) fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Evaluation scenarios with their ground-truth rollouts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservedScenario {
    pub task: EvalScenario,
    /// Fixed actions, in fixed action mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actions: Option<Vec<Vec<f64>>>,
    /// Outcome of every ground-truth rollout.
    pub outcomes: Vec<bool>,
    /// The rollouts that enter the MMD.
    pub trajectories: Vec<Trajectory>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservedSet {
    pub config_hash: String,
    pub scenarios: Vec<ObservedScenario>,
}

/// Per-scenario forecast statistics of one model at one level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastStats {
    pub config_hash: String,
    pub model: String,
    pub level: Level,
    pub probabilities: Vec<f64>,
    pub mmd: Vec<MmdCurve>,
}

/// Aggregated metrics of one model at one level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub level: Level,
    pub model: String,
    /// Scenario-mean squared MMD per step `t = 1..T`.
    pub mmd_curve: Vec<f64>,
    pub mmd_mean: f64,
    /// Mean over the last quarter of the horizon.
    pub mmd_final_quarter: f64,
    pub brier: f64,
    /// Mean outcome probability over scenarios.
    pub mean_probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub config_hash: String,
    /// Empirical success rate over all ground-truth rollouts.
    pub observed_success_rate: f64,
    pub entries: Vec<MetricEntry>,
}

/// Artifact locations relative to the output directory.
pub mod paths {
    use super::Level;

    pub const OBSERVED: &str = "data/observed.json";
    pub const EVALUATION: &str = "eval/metrics.json";

    pub fn train_data(level: Level) -> String {
        format!("data/train_{}.jsonl", level.as_str())
    }

    pub fn checkpoint(level: Level, model: &str) -> String {
        format!("models/{}/{model}.ckpt", level.as_str())
    }

    pub fn forecast_stats(level: Level, model: &str) -> String {
        format!("forecast/{}/{model}.json", level.as_str())
    }

    /// Full sample export of the first scenario.
    pub fn forecast_bundle(level: Level, model: &str) -> String {
        format!("forecast/{}/{model}_scenario0.jsonl", level.as_str())
    }

    pub fn decomposition(level: Level) -> String {
        format!("forecast/{}/decomposition_scenario0.csv", level.as_str())
    }

    pub fn mmd_csv(level: Level, model: &str) -> String {
        format!("eval/{}/{model}_mmd.csv", level.as_str())
    }

    pub fn brier_csv(level: Level, model: &str) -> String {
        format!("eval/{}/{model}_brier.csv", level.as_str())
    }
}

pub struct Pipeline {
    cfg: ExperimentConfig,
    hash: String,
    root: PathBuf,
    manifest: RunManifest,
}

impl Pipeline {
    /// Validates the config, prepares the output directory and picks up a
    /// previous manifest when it was written for the same config.
    pub fn open(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash()?;
        let root = cfg.output_dir.clone();
        std::fs::create_dir_all(&root)?;
        std::fs::write(root.join(CONFIG_FILE), cfg.to_toml()?)?;
        let manifest = match RunManifest::load(&root) {
            Ok(m) if m.config_hash == hash => m,
            _ => RunManifest::new(hash.clone()),
        };
        Ok(Self {
            cfg,
            hash,
            root,
            manifest,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// True when the stage is recorded and all its artifacts are intact.
    pub fn is_complete(&self, stage: Stage) -> bool {
        self.manifest.stages.get(&stage).is_some_and(|r| {
            r.artifacts
                .iter()
                .all(|a| file_digest(&self.root.join(&a.path)).is_ok_and(|d| d == a.sha256))
        })
    }

    /// Runs `stage` unless it is already complete.
    pub fn run_stage(&mut self, stage: Stage) -> Result<()> {
        if self.is_complete(stage) {
            return Ok(());
        }
        let start = Instant::now();
        let produced = match stage {
            Stage::Generate => self.generate()?,
            Stage::TrainEnsemble => self.train_ensembles()?,
            Stage::TrainAleatoric => self.train_aleatoric()?,
            Stage::TrainBaselines => self.train_baselines()?,
            Stage::Forecast => self.forecast()?,
            Stage::Evaluate => self.evaluate()?,
            Stage::Report => report::emit_report(&self.root)?,
        };
        let artifacts = produced
            .into_iter()
            .map(|path| {
                Ok(Artifact {
                    sha256: file_digest(&self.root.join(&path))?,
                    path,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.manifest.stages.retain(|s, _| !s.upstream().contains(&stage));
        self.manifest.stages.insert(
            stage,
            StageRecord {
                wall_time_s: start.elapsed().as_secs_f64(),
                artifacts,
            },
        );
        write_json(&self.root.join(MANIFEST_FILE), &self.manifest)
    }

    /// Runs every stage in order.
    pub fn run_all(&mut self) -> Result<RunManifest> {
        for stage in Stage::ALL {
            self.run_stage(stage)?;
        }
        Ok(self.manifest.clone())
    }

    fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        Ok(p)
    }

    fn load_model(&self, level: Level, model: &str) -> Result<Model> {
        let rel = paths::checkpoint(level, model);
        let m = load_checkpoint(&self.root.join(&rel))?;
        if m.train_meta().config_hash.as_deref() != Some(self.hash.as_str()) {
            return Err(Error::Integrity(format!("{rel} was produced by a different config")));
        }
        Ok(m)
    }

    fn save_model(&self, level: Level, model: Model) -> Result<String> {
        let rel = paths::checkpoint(level, model.kind());
        save_checkpoint(&model, &self.path(&rel)?)?;
        Ok(rel)
    }

    fn load_data(&self, level: Level) -> Result<TrajectoryDataset> {
        let rel = paths::train_data(level);
        let d = TrajectoryDataset::read_jsonl(&self.root.join(&rel))?;
        if d.config_hash.as_deref() != Some(self.hash.as_str()) {
            return Err(Error::Integrity(format!("{rel} was produced by a different config")));
        }
        Ok(d)
    }

    fn load_observed(&self) -> Result<ObservedSet> {
        let o: ObservedSet = read_json(&self.root.join(paths::OBSERVED))?;
        if o.config_hash != self.hash {
            return Err(Error::Integrity(format!(
                "{} was produced by a different config",
                paths::OBSERVED
            )));
        }
        Ok(o)
    }

    fn generate(&self) -> Result<Vec<String>> {
        let c = &self.cfg;
        let mut low = generate_dataset(&c.env, c.policy, c.data.n_train_low_epistemic, c.data.seed)?;
        let mut high = TrajectoryDataset::new(
            c.env.env_id,
            low.trajectories[..c.data.n_train_high_epistemic].to_vec(),
            c.data.seed,
        )?;
        low.config_hash = Some(self.hash.clone());
        high.config_hash = Some(self.hash.clone());
        let mut out = Vec::new();
        for (level, d) in [(Level::Low, &low), (Level::High, &high)] {
            let rel = paths::train_data(level);
            d.write_jsonl(&self.path(&rel)?)?;
            out.push(rel);
        }
        let scenarios = (0..c.eval.n_scenarios)
            .map(|k| observe_scenario(c, k))
            .collect::<Result<Vec<_>>>()?;
        write_json(
            &self.path(paths::OBSERVED)?,
            &ObservedSet {
                config_hash: self.hash.clone(),
                scenarios,
            },
        )?;
        out.push(paths::OBSERVED.into());
        Ok(out)
    }

    fn train_ensembles(&self) -> Result<Vec<String>> {
        let m = &self.cfg.models;
        let mut out = Vec::new();
        for level in Level::ALL {
            let data = self.load_data(level)?;
            let arch = m.ensemble.arch(data.state_dim(), data.action_dim());
            let mut ens = train_ensemble(&data, m.ensemble_size, &arch, &m.ensemble.train, m.seed)?;
            ens.train_meta.config_hash = Some(self.hash.clone());
            out.push(self.save_model(level, Model::Ensemble(ens))?);
        }
        Ok(out)
    }

    fn train_aleatoric(&self) -> Result<Vec<String>> {
        let m = &self.cfg.models;
        let mut out = Vec::new();
        for level in Level::ALL {
            let data = self.load_data(level)?;
            let Model::Ensemble(ens) = self.load_model(level, "ensemble")? else {
                return Err(Error::Integrity("ensemble checkpoint holds another model kind".into()));
            };
            let mut cvae = train_residual_cvae(&data, &ens, &m.residual_vae, m.seed)?;
            cvae.vae.train_meta.config_hash = Some(self.hash.clone());
            out.push(self.save_model(level, Model::ResidualCvae(cvae))?);
        }
        Ok(out)
    }

    fn train_baselines(&self) -> Result<Vec<String>> {
        let m = &self.cfg.models;
        let mut out = Vec::new();
        for level in Level::ALL {
            let data = self.load_data(level)?;
            let mut full = train_full_vae(&data, &m.full_vae, m.seed)?;
            full.vae.train_meta.config_hash = Some(self.hash.clone());
            out.push(self.save_model(level, Model::FullVae(full))?);
            let mut pm = train_prob_mlp(&data, &m.prob_mlp, m.seed)?;
            pm.train_meta.config_hash = Some(self.hash.clone());
            out.push(self.save_model(level, Model::ProbMlp(pm))?);
        }
        Ok(out)
    }

    fn forecast(&self) -> Result<Vec<String>> {
        let observed = self.load_observed()?;
        let e = &self.cfg.eval;
        let env = self.cfg.env.env_id;
        let mut out = Vec::new();
        for level in Level::ALL {
            let models = Forecaster::load(self, level)?;
            for (mi, model) in MODELS.into_iter().enumerate() {
                let mut stats = ForecastStats {
                    config_hash: self.hash.clone(),
                    model: model.into(),
                    level,
                    probabilities: Vec::with_capacity(observed.scenarios.len()),
                    mmd: Vec::with_capacity(observed.scenarios.len()),
                };
                for (k, sc) in observed.scenarios.iter().enumerate() {
                    let plan = plan_for(&self.cfg, sc);
                    let rng = RngStream::labeled(e.seed, "forecast")
                        .fork(level as u64)
                        .fork(mi as u64)
                        .fork(k as u64);
                    let mut bundle = models.forecast(model, &sc.task.scenario.s0, &plan, e.n_samples, &rng)?;
                    bundle.provenance.config_hash = Some(self.hash.clone());
                    stats
                        .probabilities
                        .push(outcome_probability(&bundle, env, &sc.task.outcome)?);
                    stats.mmd.push(trajectory_mmd(
                        &bundle,
                        &sc.trajectories,
                        e.bandwidth,
                        e.mmd_max_samples,
                    )?);
                    if k == 0 {
                        out.extend(self.export_first(level, model, &bundle)?);
                    }
                }
                let rel = paths::forecast_stats(level, model);
                write_json(&self.path(&rel)?, &stats)?;
                out.push(rel);
            }
        }
        Ok(out)
    }

    /// Writes the full sample set of the first scenario, and for the
    /// residual model its variance decomposition when every member drew at
    /// least two samples.
    fn export_first(&self, level: Level, model: &str, bundle: &ForecastBundle) -> Result<Vec<String>> {
        let rel = paths::forecast_bundle(level, model);
        bundle.write_jsonl(&self.path(&rel)?)?;
        let mut out = vec![rel];
        if model == "residual-vae" {
            match decompose(bundle) {
                Ok(curve) => {
                    let rel = paths::decomposition(level);
                    curve.write_csv(&self.path(&rel)?)?;
                    out.push(rel);
                }
                Err(Error::InsufficientSamples(_)) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    fn evaluate(&self) -> Result<Vec<String>> {
        let observed = self.load_observed()?;
        let mut out = Vec::new();
        let mut entries = Vec::new();
        for level in Level::ALL {
            for model in MODELS {
                let rel = paths::forecast_stats(level, model);
                let stats: ForecastStats = read_json(&self.root.join(&rel))?;
                if stats.config_hash != self.hash || stats.probabilities.len() != observed.scenarios.len() {
                    return Err(Error::Integrity(format!("{rel} does not match this run")));
                }
                let curve = mean_curve(&stats.mmd)?;
                let mmd_rel = paths::mmd_csv(level, model);
                curve.write_csv(&self.path(&mmd_rel)?)?;
                let pairs: Vec<(f64, bool)> = stats
                    .probabilities
                    .iter()
                    .zip(&observed.scenarios)
                    .flat_map(|(&p, sc)| sc.outcomes.iter().map(move |&o| (p, o)))
                    .collect();
                let b = brier(&pairs)?;
                let brier_rel = paths::brier_csv(level, model);
                b.write_csv(&self.path(&brier_rel)?)?;
                let t = curve.values.len();
                entries.push(MetricEntry {
                    level,
                    model: model.into(),
                    mmd_mean: curve.mean(),
                    mmd_final_quarter: curve.mean_over(t - t.div_ceil(4), t),
                    mmd_curve: curve.values,
                    brier: b.score,
                    mean_probability: stats.probabilities.iter().sum::<f64>() / stats.probabilities.len() as f64,
                });
                out.extend([mmd_rel, brier_rel]);
            }
        }
        let outcomes: Vec<bool> = observed
            .scenarios
            .iter()
            .flat_map(|s| s.outcomes.iter().copied())
            .collect();
        let summary = EvaluationSummary {
            config_hash: self.hash.clone(),
            observed_success_rate: outcomes.iter().filter(|&&o| o).count() as f64 / outcomes.len() as f64,
            entries,
        };
        write_json(&self.path(paths::EVALUATION)?, &summary)?;
        out.push(paths::EVALUATION.into());
        Ok(out)
    }
}

/// Validates `cfg` and runs every stage, resuming from intact artifacts.
pub fn run_pipeline(cfg: ExperimentConfig) -> Result<RunManifest> {
    Pipeline::open(cfg)?.run_all()
}

/// Ground-truth rollouts of scenario `k`. Rollout `j` draws its hidden
/// parameter, noise and dither from its own stream.
pub fn observe_scenario(cfg: &ExperimentConfig, k: usize) -> Result<ObservedScenario> {
    let task = cfg.eval.scenario(&cfg.env, k)?;
    observe(cfg, task, k, cfg.eval.n_observed, cfg.eval.mmd_max_samples)
}

/// Like [`observe_scenario`] with `n` rollouts, keeping the evenly spaced
/// `keep` of them (all when 0) as trajectories.
pub fn observe(
    cfg: &ExperimentConfig,
    task: EvalScenario,
    k: usize,
    n: usize,
    keep: usize,
) -> Result<ObservedScenario> {
    let root = RngStream::labeled(cfg.eval.seed, "observed").fork(k as u64);
    let policy = cfg.policy.for_goal(task.scenario.goal.clone());
    let actions = match cfg.eval.action_mode {
        ActionMode::Policy => None,
        ActionMode::Fixed => {
            let mut rng = root.fork_labeled("plan");
            let hidden = cfg.env.sample_hidden(&mut rng);
            Some(rollout(&cfg.env, &policy, &task.scenario.s0, hidden, &mut rng)?.actions)
        }
    };
    let kept: Vec<usize> = if keep == 0 || n <= keep {
        (0..n).collect()
    } else {
        (0..keep).map(|i| i * n / keep).collect()
    };
    let runs = crate::par::try_map_range(n, |j| {
        let mut rng = root.fork(j as u64);
        let hidden = cfg.env.sample_hidden(&mut rng);
        let s0 = &task.scenario.s0;
        match &actions {
            None => rollout(&cfg.env, &policy, s0, hidden, &mut rng),
            Some(a) => rollout_actions(&cfg.env, s0, a, hidden, &mut rng),
        }
    })?;
    let outcomes = runs
        .iter()
        .map(|t| label_outcome(cfg.env.env_id, t, &task.outcome))
        .collect::<Result<Vec<_>>>()?;
    let mut runs: Vec<Option<Trajectory>> = runs.into_iter().map(Some).collect();
    let trajectories = kept
        .iter()
        .map(|&j| runs[j].take().expect("distinct indices"))
        .collect();
    Ok(ObservedScenario {
        task,
        actions,
        outcomes,
        trajectories,
    })
}

pub fn plan_for(cfg: &ExperimentConfig, sc: &ObservedScenario) -> ActionPlan {
    match &sc.actions {
        Some(a) => ActionPlan::Fixed(a.clone()),
        None => ActionPlan::Policy {
            policy: cfg.policy.for_goal(sc.task.scenario.goal.clone()),
            horizon: cfg.env.horizon,
        },
    }
}

/// The three trained forecasting models of one level.
pub struct Forecaster {
    pub ensemble: crate::ensemble::DynamicsEnsemble,
    pub residual: crate::aleatoric::ResidualCvae,
    pub full_vae: crate::baselines::FullVae,
    pub prob_mlp: crate::baselines::ProbMlp,
}

impl Forecaster {
    fn load(p: &Pipeline, level: Level) -> Result<Self> {
        let wrong = |what: &str| Error::Integrity(format!("{what} checkpoint holds another model kind"));
        let Model::Ensemble(ensemble) = p.load_model(level, "ensemble")? else {
            return Err(wrong("ensemble"));
        };
        let Model::ResidualCvae(residual) = p.load_model(level, "residual-vae")? else {
            return Err(wrong("residual-vae"));
        };
        let Model::FullVae(full_vae) = p.load_model(level, "full-vae")? else {
            return Err(wrong("full-vae"));
        };
        let Model::ProbMlp(prob_mlp) = p.load_model(level, "prob-mlp")? else {
            return Err(wrong("prob-mlp"));
        };
        Ok(Self {
            ensemble,
            residual,
            full_vae,
            prob_mlp,
        })
    }

    /// Loads the models of `level` from a finished run directory.
    pub fn from_run(dir: &Path, level: Level) -> Result<Self> {
        let cfg = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
        let cfg = ExperimentConfig {
            output_dir: dir.to_path_buf(),
            ..cfg
        };
        Self::load(&Pipeline::open(cfg)?, level)
    }

    pub fn forecast(
        &self,
        model: &str,
        s0: &[f64],
        plan: &ActionPlan,
        n: usize,
        rng: &RngStream,
    ) -> Result<ForecastBundle> {
        match model {
            "residual-vae" => forecast(&self.ensemble, &self.residual, s0, plan, n, rng),
            "full-vae" => forecast_full_vae(&self.full_vae, s0, plan, n, rng),
            "prob-mlp" => forecast_prob_mlp(&self.prob_mlp, s0, plan, n, rng),
            other => Err(Error::config(format!("unknown forecasting model `{other}`"))),
        }
    }
}

/// Scenario-mean of per-scenario MMD curves.
fn mean_curve(curves: &[MmdCurve]) -> Result<MmdCurve> {
    let first = curves
        .first()
        .ok_or_else(|| Error::InsufficientSamples("no scenarios to average".into()))?;
    let t = first.values.len();
    if curves.iter().any(|c| c.values.len() != t) {
        return Err(Error::dim("mmd curves disagree in horizon"));
    }
    let n = curves.len() as f64;
    let values = (0..t)
        .map(|i| curves.iter().map(|c| c.values[i]).sum::<f64>() / n)
        .collect();
    let bandwidths = (0..t)
        .map(|i| {
            (0..first.bandwidths[i].len())
                .map(|d| curves.iter().map(|c| c.bandwidths[i][d]).sum::<f64>() / n)
                .collect()
        })
        .collect();
    Ok(MmdCurve {
        values,
        bandwidths,
        n_forecast: first.n_forecast,
        n_observed: first.n_observed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
        }
        assert!("nope".parse::<Stage>().is_err());
    }

    #[test]
    fn stages_only_depend_on_earlier_ones() {
        for (i, s) in Stage::ALL.iter().enumerate() {
            assert!(s.upstream().iter().all(|u| Stage::ALL[..i].contains(u)), "{s}");
        }
    }

    #[test]
    fn observed_rollouts_are_thinned_evenly() {
        let cfg = ExperimentConfig::minimal(crate::env::EnvId::LinearToy);
        let task = cfg.eval.scenario(&cfg.env, 0).unwrap();
        let all = observe(&cfg, task.clone(), 0, 10, 0).unwrap();
        let some = observe(&cfg, task, 0, 10, 4).unwrap();
        assert_eq!(all.outcomes, some.outcomes);
        let picked: Vec<_> = [0, 2, 5, 7].iter().map(|&j| all.trajectories[j].clone()).collect();
        assert_eq!(some.trajectories, picked);
    }
}
