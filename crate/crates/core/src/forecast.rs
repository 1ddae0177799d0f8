//! Sampling trajectory forecasts, splitting their spread into epistemic and
//! aleatoric parts, and turning them into outcome probabilities.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aleatoric::{sample_members, ResidualCvae, ResidualSample, ResidualStepper};
use crate::baselines::{FullVae, FullVaeStepper, ProbMlp};
use crate::ensemble::{DynamicsEnsemble, MemberStepper};
use crate::env::{label_states, EnvId, OutcomeSpec, Policy};
use crate::error::{Error, Result};
use crate::numeric::RngStream;
use crate::par;
use crate::vae::prior_draws;

/// Rows per batched stepping job. Rows never interact, so the chunking only
/// affects speed.
const CHUNK: usize = 64;

/// Where the actions of a forecast come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionPlan {
    /// The same action sequence for every sample.
    Fixed(Vec<Vec<f64>>),
    /// The scripted policy, run on each sample's own forecast states.
    Policy { policy: Policy, horizon: usize },
}

impl ActionPlan {
    pub fn horizon(&self) -> usize {
        match self {
            ActionPlan::Fixed(a) => a.len(),
            ActionPlan::Policy { horizon, .. } => *horizon,
        }
    }

    fn check(&self, action_dim: usize) -> Result<()> {
        if self.horizon() == 0 {
            return Err(Error::config("forecast horizon must be >= 1"));
        }
        if let ActionPlan::Fixed(a) = self {
            if a.iter().any(|x| x.len() != action_dim) {
                return Err(Error::dim(format!("actions must have {action_dim} components")));
            }
        }
        Ok(())
    }

    /// Actions for the rows of one step.
    fn actions(&self, t: usize, states: &[Vec<f64>], rngs: &mut [RngStream]) -> Vec<Vec<f64>> {
        match self {
            ActionPlan::Fixed(a) => vec![a[t].clone(); states.len()],
            ActionPlan::Policy { policy, .. } => states.iter().zip(rngs).map(|(s, r)| policy.act(s, r)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model: String,
    pub rng_seed: u64,
    pub rng_stream: u64,
    pub s0: Vec<f64>,
    pub plan: ActionPlan,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastBundle {
    /// `ŝ_1 .. ŝ_T` per sample.
    pub forecasts: Vec<Vec<Vec<f64>>>,
    pub member_indices: Vec<usize>,
    /// Empty for models without a residual part.
    pub residual_samples: Vec<ResidualSample>,
    /// Actions each sample was rolled out under.
    pub actions: Vec<Vec<Vec<f64>>>,
    pub n_members: usize,
    pub provenance: Provenance,
}

impl ForecastBundle {
    pub fn len(&self) -> usize {
        self.forecasts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forecasts.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.forecasts.first().map_or(0, Vec::len)
    }

    pub fn state_dim(&self) -> usize {
        self.provenance.s0.len()
    }

    /// `s_0, ŝ_1, .., ŝ_T` of sample `i`.
    pub fn states(&self, i: usize) -> Vec<Vec<f64>> {
        let mut v = Vec::with_capacity(self.horizon() + 1);
        v.push(self.provenance.s0.clone());
        v.extend(self.forecasts[i].iter().cloned());
        v
    }

    pub fn validate(&self) -> Result<()> {
        let (t, ds) = (self.horizon(), self.state_dim());
        if self.member_indices.len() != self.len() || self.actions.len() != self.len() {
            return Err(Error::dim("bundle fields disagree in sample count"));
        }
        if self
            .forecasts
            .iter()
            .any(|f| f.len() != t || f.iter().any(|s| s.len() != ds))
        {
            return Err(Error::dim("forecasts disagree in shape"));
        }
        if let Some(m) = self.member_indices.iter().find(|&&m| m >= self.n_members) {
            return Err(Error::OutOfRange(format!("member index {m} >= M = {}", self.n_members)));
        }
        Ok(())
    }

    /// One header line, then one record per sample in the trajectory format
    /// plus its member index.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        let header = BundleHeader {
            n: self.len(),
            horizon: self.horizon(),
            n_members: self.n_members,
            provenance: self.provenance.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for i in 0..self.len() {
            let rec = BundleRecord {
                states: self.states(i),
                actions: self.actions[i].clone(),
                member_index: self.member_indices[i],
                residuals: self.residual_samples.get(i).map(|r| r.residuals.clone()),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
        let mut lines = BufReader::new(file).lines();
        let head = lines
            .next()
            .ok_or_else(|| Error::Parse(format!("{}: empty forecast file", path.display())))??;
        let header: BundleHeader = serde_json::from_str(&head)?;
        let mut b = ForecastBundle {
            forecasts: Vec::with_capacity(header.n),
            member_indices: Vec::with_capacity(header.n),
            residual_samples: Vec::new(),
            actions: Vec::with_capacity(header.n),
            n_members: header.n_members,
            provenance: header.provenance,
        };
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut rec: BundleRecord = serde_json::from_str(&line)?;
            if rec.states.is_empty() {
                return Err(Error::Parse("forecast record without states".into()));
            }
            let states = rec.states.split_off(1);
            if let Some(residuals) = rec.residuals {
                b.residual_samples.push(ResidualSample {
                    residuals,
                    s0: rec.states[0].clone(),
                    actions: rec.actions.clone(),
                    member_index: rec.member_index,
                });
            }
            b.forecasts.push(states);
            b.member_indices.push(rec.member_index);
            b.actions.push(rec.actions);
        }
        if b.len() != header.n || b.horizon() != header.horizon {
            return Err(Error::Integrity(format!(
                "{}: header announces {} samples of horizon {}",
                path.display(),
                header.n,
                header.horizon
            )));
        }
        b.validate()?;
        Ok(b)
    }
}

#[derive(Serialize, Deserialize)]
struct BundleHeader {
    n: usize,
    horizon: usize,
    n_members: usize,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct BundleRecord {
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    member_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    residuals: Option<Vec<Vec<f64>>>,
}

/// Per-sample random streams: sample `i` owns fork `i` of `rng`.
struct SampleRngs {
    latent: Vec<RngStream>,
    policy: Vec<RngStream>,
}

impl SampleRngs {
    fn new(rng: &RngStream, rows: &[usize]) -> Self {
        let forks: Vec<RngStream> = rows.iter().map(|&i| rng.fork(i as u64)).collect();
        Self {
            latent: forks.iter().map(|f| f.fork_labeled("latent")).collect(),
            policy: forks.iter().map(|f| f.fork_labeled("policy")).collect(),
        }
    }
}

/// Output of one batched job: per-row states, actions and residuals.
struct Chunk {
    rows: Vec<usize>,
    states: Vec<Vec<Vec<f64>>>,
    actions: Vec<Vec<Vec<f64>>>,
    residuals: Vec<Vec<Vec<f64>>>,
}

impl Chunk {
    fn new(rows: Vec<usize>, horizon: usize) -> Self {
        let n = rows.len();
        Self {
            rows,
            states: vec![Vec::with_capacity(horizon); n],
            actions: vec![Vec::with_capacity(horizon); n],
            residuals: vec![Vec::with_capacity(horizon); n],
        }
    }

    fn record(&mut self, states: &[Vec<f64>], actions: Vec<Vec<f64>>, residuals: Option<&[Vec<f64>]>) {
        for (r, a) in actions.into_iter().enumerate() {
            self.states[r].push(states[r].clone());
            self.actions[r].push(a);
            if let Some(e) = residuals {
                self.residuals[r].push(e[r].clone());
            }
        }
    }
}

fn chunked(groups: Vec<(usize, Vec<usize>)>) -> Vec<(usize, Vec<usize>)> {
    groups
        .into_iter()
        .flat_map(|(key, rows)| rows.chunks(CHUNK).map(|c| (key, c.to_vec())).collect::<Vec<_>>())
        .collect()
}

fn assemble(
    n: usize,
    chunks: Vec<Chunk>,
    member_indices: Vec<usize>,
    n_members: usize,
    s0: &[f64],
    with_residuals: bool,
    provenance: Provenance,
) -> ForecastBundle {
    let mut forecasts = vec![Vec::new(); n];
    let mut actions = vec![Vec::new(); n];
    let mut residuals = vec![Vec::new(); n];
    for c in chunks {
        let rows = c.rows.into_iter().zip(c.states).zip(c.actions).zip(c.residuals);
        for (((row, s), a), r) in rows {
            forecasts[row] = s;
            actions[row] = a;
            residuals[row] = r;
        }
    }
    let residual_samples = if with_residuals {
        residuals
            .into_iter()
            .zip(&actions)
            .zip(&member_indices)
            .map(|((r, a), &m)| ResidualSample {
                residuals: r,
                s0: s0.to_vec(),
                actions: a.clone(),
                member_index: m,
            })
            .collect()
    } else {
        Vec::new()
    };
    ForecastBundle {
        forecasts,
        member_indices,
        residual_samples,
        actions,
        n_members,
        provenance,
    }
}

fn provenance(model: &str, rng: &RngStream, s0: &[f64], plan: &ActionPlan) -> Provenance {
    Provenance {
        model: model.to_string(),
        rng_seed: rng.master_seed(),
        rng_stream: rng.stream_id(),
        s0: s0.to_vec(),
        plan: plan.clone(),
        config_hash: None,
    }
}

fn check_start(n: usize, s0: &[f64], state_dim: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::config("number of forecast samples must be >= 1"));
    }
    if s0.len() != state_dim {
        return Err(Error::dim(format!("start state must have {state_dim} components")));
    }
    if s0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric { segment: "s0".into() });
    }
    Ok(())
}

/// Draws `n` forecasts: each sample picks a member uniformly, rolls it out
/// and adds a residual sequence from the CVAE conditioned on that rollout,
/// `ŝ_pred,t = ŝ^m_t + ε̂_t`.
///
/// Sample `i` draws its latents and policy dither from fork `i` of `rng`
/// and its member from the `"members"` fork, so the result does not depend
/// on how the work is scheduled.
pub fn forecast(
    ens: &DynamicsEnsemble,
    cvae: &ResidualCvae,
    s0: &[f64],
    plan: &ActionPlan,
    n: usize,
    rng: &RngStream,
) -> Result<ForecastBundle> {
    if ens.normalization != cvae.vae.normalization {
        return Err(Error::config(
            "ensemble and residual model were trained with different normalizations",
        ));
    }
    check_start(n, s0, ens.arch.state_dim)?;
    plan.check(ens.arch.action_dim)?;
    let m = ens.len();
    let horizon = plan.horizon();
    let latent = cvae.vae.arch.latent_dim;
    let members = sample_members(&mut rng.fork_labeled("members"), m, n);
    let groups = (0..m)
        .map(|k| (k, (0..n).filter(|&i| members[i] == k).collect::<Vec<_>>()))
        .filter(|(_, rows)| !rows.is_empty())
        .collect();
    let jobs = chunked(groups);
    let chunks = par::try_map_slice(&jobs, |(member, rows)| {
        let b = rows.len();
        let mut rngs = SampleRngs::new(rng, rows);
        let mut dyn_step = MemberStepper::new(ens, *member, b)?;
        let mut res_step = ResidualStepper::new(cvae, b)?;
        let mut guide = vec![s0.to_vec(); b];
        let mut eps = vec![vec![0.0; s0.len()]; b];
        let mut composed = guide.clone();
        let mut out = Chunk::new(rows.clone(), horizon);
        for t in 0..horizon {
            let actions = plan.actions(t, &composed, &mut rngs.policy);
            let (next, _) = dyn_step.step(&guide, &actions);
            let z = prior_draws(&mut rngs.latent, latent);
            eps = res_step.step(&guide, &next, &eps, &actions, &z);
            composed = next
                .iter()
                .zip(&eps)
                .map(|(s, e)| s.iter().zip(e).map(|(a, b)| a + b).collect())
                .collect();
            guide = next;
            out.record(&composed, actions, Some(&eps));
        }
        Ok::<_, Error>(out)
    })?;
    let bundle = assemble(
        n,
        chunks,
        members,
        m,
        s0,
        true,
        provenance("residual-vae", rng, s0, plan),
    );
    check_finite(&bundle)?;
    Ok(bundle)
}

/// Forecasts with the full-VAE baseline, latents from the prior.
pub fn forecast_full_vae(
    model: &FullVae,
    s0: &[f64],
    plan: &ActionPlan,
    n: usize,
    rng: &RngStream,
) -> Result<ForecastBundle> {
    check_start(n, s0, model.vae.arch.state_dim)?;
    plan.check(model.vae.arch.action_dim)?;
    let horizon = plan.horizon();
    let latent = model.vae.arch.latent_dim;
    let jobs = chunked(vec![(0, (0..n).collect())]);
    let chunks = par::try_map_slice(&jobs, |(_, rows)| {
        let b = rows.len();
        let mut rngs = SampleRngs::new(rng, rows);
        let mut stepper = FullVaeStepper::new(model, b)?;
        let mut now = vec![s0.to_vec(); b];
        let mut prev: Option<Vec<Vec<f64>>> = None;
        let mut out = Chunk::new(rows.clone(), horizon);
        for t in 0..horizon {
            let actions = plan.actions(t, &now, &mut rngs.policy);
            let z = prior_draws(&mut rngs.latent, latent);
            let next = stepper.step(&now, prev.as_deref(), &actions, &z);
            out.record(&next, actions, None);
            prev = Some(std::mem::replace(&mut now, next));
        }
        Ok::<_, Error>(out)
    })?;
    let bundle = assemble(
        n,
        chunks,
        vec![0; n],
        1,
        s0,
        false,
        provenance("full-vae", rng, s0, plan),
    );
    check_finite(&bundle)?;
    Ok(bundle)
}

/// Forecasts with the probabilistic MLP, sampling every step.
pub fn forecast_prob_mlp(
    model: &ProbMlp,
    s0: &[f64],
    plan: &ActionPlan,
    n: usize,
    rng: &RngStream,
) -> Result<ForecastBundle> {
    check_start(n, s0, model.arch.state_dim)?;
    plan.check(model.arch.action_dim)?;
    let horizon = plan.horizon();
    let ds = model.arch.state_dim;
    let jobs = chunked(vec![(0, (0..n).collect())]);
    let chunks = par::try_map_slice(&jobs, |(_, rows)| {
        let b = rows.len();
        let mut rngs = SampleRngs::new(rng, rows);
        let mut now = vec![s0.to_vec(); b];
        let mut out = Chunk::new(rows.clone(), horizon);
        for t in 0..horizon {
            let actions = plan.actions(t, &now, &mut rngs.policy);
            let noise: Vec<Vec<f64>> = rngs.latent.iter_mut().map(|r| r.normals(ds)).collect();
            now = model.step(&now, &actions, &noise)?;
            out.record(&now, actions, None);
        }
        Ok::<_, Error>(out)
    })?;
    let bundle = assemble(
        n,
        chunks,
        vec![0; n],
        1,
        s0,
        false,
        provenance("prob-mlp", rng, s0, plan),
    );
    check_finite(&bundle)?;
    Ok(bundle)
}

fn check_finite(b: &ForecastBundle) -> Result<()> {
    if b.forecasts.iter().flatten().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            segment: format!("{} forecast", b.provenance.model),
        });
    }
    Ok(())
}

/// Per-time, per-dimension variance split; `[t][d]` holds step `t + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionCurve {
    pub total: Vec<Vec<f64>>,
    pub epistemic: Vec<Vec<f64>>,
    pub aleatoric: Vec<Vec<f64>>,
}

impl DecompositionCurve {
    /// Columns `t, dim, total, epistemic, aleatoric`; `t` counts from 1.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "t,dim,total,epistemic,aleatoric")?;
        for (t, row) in self.total.iter().enumerate() {
            for d in 0..row.len() {
                writeln!(
                    w,
                    "{},{},{:e},{:e},{:e}",
                    t + 1,
                    d,
                    row[d],
                    self.epistemic[t][d],
                    self.aleatoric[t][d]
                )?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Law-of-total-variance split of the forecast spread.
///
/// Samples are grouped by member. With group weights `w_m = n_m / N`,
/// epistemic is the weighted variance of the group means and aleatoric the
/// weighted mean of the within-group (population) variances; their sum
/// equals the population variance of all samples. With equal group sizes
/// the weights are uniform.
pub fn decompose(bundle: &ForecastBundle) -> Result<DecompositionCurve> {
    bundle.validate()?;
    let m = bundle.n_members;
    let mut counts = vec![0usize; m];
    bundle.member_indices.iter().for_each(|&k| counts[k] += 1);
    if let Some(k) = counts.iter().position(|&c| c < 2) {
        return Err(Error::InsufficientSamples(format!(
            "member {k} has {} forecast samples; decomposition needs >= 2 per member",
            counts[k]
        )));
    }
    let n = bundle.len() as f64;
    let (t_len, ds) = (bundle.horizon(), bundle.state_dim());
    let mut curve = DecompositionCurve {
        total: vec![vec![0.0; ds]; t_len],
        epistemic: vec![vec![0.0; ds]; t_len],
        aleatoric: vec![vec![0.0; ds]; t_len],
    };
    for t in 0..t_len {
        for d in 0..ds {
            let x = |i: usize| bundle.forecasts[i][t][d];
            let mut sums = vec![0.0; m];
            for (i, &k) in bundle.member_indices.iter().enumerate() {
                sums[k] += x(i);
            }
            let means: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
            let mut within = vec![0.0; m];
            for (i, &k) in bundle.member_indices.iter().enumerate() {
                within[k] += (x(i) - means[k]).powi(2);
            }
            let grand = (0..bundle.len()).map(x).sum::<f64>() / n;
            let epi: f64 = means
                .iter()
                .zip(&counts)
                .map(|(mu, &c)| c as f64 * (mu - grand).powi(2))
                .sum::<f64>()
                / n;
            let alea = within.iter().sum::<f64>() / n;
            let total = (0..bundle.len()).map(|i| (x(i) - grand).powi(2)).sum::<f64>() / n;
            curve.total[t][d] = total;
            curve.epistemic[t][d] = epi;
            curve.aleatoric[t][d] = alea;
        }
    }
    Ok(curve)
}

/// Fraction of the forecasts whose task position reaches the target by the
/// deadline.
pub fn outcome_probability(bundle: &ForecastBundle, env: EnvId, spec: &OutcomeSpec) -> Result<f64> {
    if bundle.is_empty() {
        return Err(Error::InsufficientSamples("empty forecast bundle".into()));
    }
    if spec.deadline > bundle.horizon() {
        return Err(Error::OutOfRange(format!(
            "outcome deadline {} exceeds forecast horizon {}",
            spec.deadline,
            bundle.horizon()
        )));
    }
    let mut hits = 0usize;
    for i in 0..bundle.len() {
        if label_states(env, &bundle.states(i), spec)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / bundle.len() as f64)
}
