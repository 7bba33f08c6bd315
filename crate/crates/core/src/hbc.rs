//! Hierarchical behavior cloning: goal-conditioned skill policies with
//! subgoal encoders, and a per-task cVAE meta controller choosing
//! `(skill, subgoal)` pairs.

use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cluster::{subgoal_index, SkillDataset, SkillPartition};
use crate::data::{self, DemoSet};
use crate::env::{Action, Controller, ACTION_DIM};
use crate::error::{Error, Result};
use crate::nn::{self, Adam, Mlp, Standardizer};
use crate::repr::TrainReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HbcConfig {
    pub subgoal_dim: usize,
    pub horizon: usize,
    pub policy_hidden: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
    pub meta_hidden: Vec<usize>,
    pub meta_latent_dim: usize,
    pub epochs: usize,
    pub meta_epochs: usize,
    pub learning_rate: f64,
    pub kl_weight: f64,
    pub meta_period: usize,
    /// Minibatch size; 0 trains on the full batch.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for HbcConfig {
    fn default() -> Self {
        HbcConfig {
            subgoal_dim: 4,
            horizon: 10,
            policy_hidden: vec![64, 64],
            encoder_hidden: vec![32, 32],
            meta_hidden: vec![64, 64],
            meta_latent_dim: 2,
            epochs: 100,
            meta_epochs: 100,
            learning_rate: 1e-3,
            kl_weight: 1.0,
            meta_period: 5,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl HbcConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.subgoal_dim == 0 {
            return Err("subgoal_dim must be positive".into());
        }
        if self.horizon == 0 {
            return Err("horizon must be positive".into());
        }
        if self.meta_period == 0 {
            return Err("meta_period must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err("learning_rate must be positive".into());
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err("kl_weight must be non-negative".into());
        }
        let hidden = [&self.policy_hidden, &self.encoder_hidden, &self.meta_hidden];
        if hidden.iter().any(|h| h.contains(&0)) {
            return Err("hidden layer widths must be positive".into());
        }
        Ok(())
    }
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut v = vec![input];
    v.extend_from_slice(hidden);
    v.push(output);
    v
}

fn batch_size(cfg: usize, n: usize) -> usize {
    if cfg == 0 {
        n.max(1)
    } else {
        cfg
    }
}

/// Goal-conditioned policy `a = scale ⊙ π([s, E(g)])` for one skill, with
/// its subgoal encoder `E`. Parameters hold the policy first, then `E`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkillPolicy {
    pub skill: usize,
    pub policy: Mlp,
    pub encoder: Mlp,
    /// Applied to states and goal states before either network.
    pub input: Standardizer,
    /// Per-dimension action scale; the policy regresses `a / scale`.
    pub action_scale: Vec<f64>,
    pub params: Vec<f64>,
}

/// Rows of a skill dataset, with actions already divided by the scale.
struct SkillBatch {
    states: Array2<f64>,
    goals: Array2<f64>,
    targets: Array2<f64>,
}

impl SkillPolicy {
    pub fn init(skill: usize, state_dim: usize, action_dim: usize, cfg: &HbcConfig) -> Self {
        let policy = Mlp::new(&sizes(state_dim + cfg.subgoal_dim, &cfg.policy_hidden, action_dim));
        let encoder = Mlp::new(&sizes(state_dim, &cfg.encoder_hidden, cfg.subgoal_dim));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(skill as u64 + 1);
        let mut params = policy.init(&mut rng);
        params.extend(encoder.init(&mut rng));
        SkillPolicy {
            skill,
            policy,
            encoder,
            input: Standardizer::identity(state_dim),
            action_scale: vec![1.0; action_dim],
            params,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.policy.output_dim()
    }

    pub fn subgoal_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn split(&self) -> (&[f64], &[f64]) {
        self.params.split_at(self.policy.num_params())
    }

    /// Subgoal vectors `E(g)` for a batch of goal states.
    pub fn encode_goals(&self, goals: ArrayView2<f64>) -> Array2<f64> {
        self.encoder.forward(self.split().1, self.input.apply(goals).view())
    }

    pub fn encode_goal(&self, goal: &[f64]) -> Result<Vec<f64>> {
        if goal.len() != self.state_dim() {
            return Err(Error::shape(format!("goal of {}", self.state_dim()), goal.len()));
        }
        Ok(self.encoder.forward_one(self.split().1, &self.input.apply_one(goal)))
    }

    fn batch(&self, data: &SkillDataset) -> SkillBatch {
        let mut targets = data.actions.clone();
        for (mut col, &s) in targets.axis_iter_mut(Axis(1)).zip(&self.action_scale) {
            col.mapv_inplace(|a| a / s);
        }
        SkillBatch {
            states: self.input.apply(data.states.view()),
            goals: self.input.apply(data.goals.view()),
            targets,
        }
    }

    fn loss_and_grad(&self, b: &SkillBatch, want_grad: bool) -> (f64, Vec<f64>) {
        let n = b.states.nrows();
        let (pp, ep) = self.split();
        let enc_trace = self.encoder.forward_trace(ep, b.goals.view());
        let x = nn::concat_cols(&[b.states.view(), enc_trace.output().view()]);
        let trace = self.policy.forward_trace(pp, x.view());
        let diff = trace.output() - &b.targets;
        let denom = (n * self.action_dim()).max(1) as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / denom;
        if !want_grad {
            return (loss, Vec::new());
        }
        let mut grad = vec![0.0; self.params.len()];
        let np = self.policy.num_params();
        let dx = self.policy.backward(pp, &trace, diff * (2.0 / denom), &mut grad[..np]);
        let d_omega = dx.slice(s![.., self.state_dim()..]).to_owned();
        self.encoder.backward(ep, &enc_trace, d_omega, &mut grad[np..]);
        (loss, grad)
    }

    /// Mean squared error of normalized actions on `data`.
    pub fn loss(&self, data: &SkillDataset) -> f64 {
        self.loss_and_grad(&self.batch(data), false).0
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let header = SkillHeader {
            skill: self.skill,
            state_dim: self.state_dim(),
            action_dim: self.action_dim(),
            subgoal_dim: self.subgoal_dim(),
            policy_sizes: self.policy.sizes().to_vec(),
            encoder_sizes: self.encoder.sizes().to_vec(),
            input: self.input.clone(),
            action_scale: self.action_scale.clone(),
            num_params: self.params.len(),
        };
        data::write_json(dir.join(skill_header(self.skill)), &header)?;
        data::write_f32_blob(dir.join(skill_params(self.skill)), &data::params_to_f32(&self.params))
    }

    pub fn load(dir: impl AsRef<Path>, skill: usize) -> Result<SkillPolicy> {
        let dir = dir.as_ref();
        let h: SkillHeader = data::read_json(dir.join(skill_header(skill)))?;
        let params = data::params_from_f32(&data::read_f32_blob(dir.join(skill_params(skill)))?);
        let policy = Mlp::new(&h.policy_sizes);
        let encoder = Mlp::new(&h.encoder_sizes);
        let expected = policy.num_params() + encoder.num_params();
        if params.len() != expected
            || h.num_params != expected
            || h.action_scale.len() != policy.output_dim()
            || h.input.dim() != encoder.input_dim()
        {
            return Err(Error::CorruptData {
                file: skill_params(skill),
                detail: format!("{} params, layout needs {expected}", params.len()),
            });
        }
        Ok(SkillPolicy {
            skill: h.skill,
            policy,
            encoder,
            input: h.input,
            action_scale: h.action_scale,
            params,
        })
    }
}

pub fn skill_header(k: usize) -> String {
    format!("skill_{k}.json")
}

pub fn skill_params(k: usize) -> String {
    format!("skill_{k}.params.f32")
}

#[derive(Serialize, Deserialize)]
struct SkillHeader {
    skill: usize,
    state_dim: usize,
    action_dim: usize,
    subgoal_dim: usize,
    policy_sizes: Vec<usize>,
    encoder_sizes: Vec<usize>,
    input: Standardizer,
    action_scale: Vec<f64>,
    num_params: usize,
}

/// Action for `state` under subgoal `omega`.
pub fn skill_act(policy: &SkillPolicy, state: &[f64], omega: &[f64]) -> Result<Vec<f64>> {
    if state.len() != policy.state_dim() {
        return Err(Error::shape(format!("state of {}", policy.state_dim()), state.len()));
    }
    if omega.len() != policy.subgoal_dim() {
        return Err(Error::shape(format!("subgoal of {}", policy.subgoal_dim()), omega.len()));
    }
    let mut x = policy.input.apply_one(state);
    x.extend_from_slice(omega);
    let out = policy.policy.forward_one(policy.split().0, &x);
    Ok(out.iter().zip(&policy.action_scale).map(|(o, s)| o * s).collect())
}

/// Shared minibatch Adam loop. Keeps the parameters with the lowest full
/// training loss seen, so the returned loss never exceeds the initial one.
fn fit(
    params: &mut Vec<f64>,
    n: usize,
    epochs: usize,
    lr: f64,
    batch: usize,
    rng: &mut ChaCha8Rng,
    mut full_loss: impl FnMut(&[f64]) -> f64,
    mut grad: impl FnMut(&[f64], &[usize]) -> Vec<f64>,
) -> Result<TrainReport> {
    let mut best = full_loss(params);
    if !best.is_finite() {
        return Err(Error::Divergence { epoch: 0 });
    }
    let mut best_params = params.clone();
    let mut losses = vec![best];
    let mut opt = Adam::new(params.len(), lr);
    let mut order: Vec<usize> = (0..n).collect();
    let full = batch >= n;
    for epoch in 1..=epochs {
        if !full {
            order.shuffle(rng);
        }
        for chunk in order.chunks(batch.max(1)) {
            let g = grad(params, chunk);
            opt.step(params, &g);
        }
        let loss = full_loss(params);
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        if loss < best {
            best = loss;
            best_params.clone_from(params);
        }
        losses.push(best);
    }
    *params = best_params;
    Ok(TrainReport { losses })
}

fn select(b: &SkillBatch, rows: &[usize]) -> SkillBatch {
    if rows.len() == b.states.nrows() && rows.iter().enumerate().all(|(i, &r)| i == r) {
        return SkillBatch {
            states: b.states.clone(),
            goals: b.goals.clone(),
            targets: b.targets.clone(),
        };
    }
    SkillBatch {
        states: b.states.select(Axis(0), rows),
        goals: b.goals.select(Axis(0), rows),
        targets: b.targets.select(Axis(0), rows),
    }
}

/// Fits the policy and its subgoal encoder jointly on one skill's data by
/// minimizing the squared error of normalized actions.
pub fn train_skill(data: &SkillDataset, cfg: &HbcConfig) -> Result<(SkillPolicy, TrainReport)> {
    cfg.validate().map_err(Error::Format)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset(format!("skill {}", data.skill)));
    }
    let mut model = SkillPolicy::init(data.skill, data.states.ncols(), data.actions.ncols(), cfg);
    model.input = Standardizer::fit(data.states.view());
    model.action_scale = nn::column_rms(data.actions.view())
        .iter()
        .map(|&r| if r > 1e-8 { r } else { 1.0 })
        .collect();
    let b = model.batch(data);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(data.skill as u64 + 1_000);
    let mut probe = model.clone();
    let mut params = std::mem::take(&mut model.params);
    let report = fit(
        &mut params,
        data.len(),
        cfg.epochs,
        cfg.learning_rate,
        batch_size(cfg.batch_size, data.len()),
        &mut rng,
        |p| {
            probe.params.clear();
            probe.params.extend_from_slice(p);
            probe.loss_and_grad(&b, false).0
        },
        |p, rows| {
            let mut m = model.clone();
            m.params = p.to_vec();
            m.loss_and_grad(&select(&b, rows), true).1
        },
    )?;
    model.params = params;
    Ok((model, report))
}

/// Worst relative error between the analytic skill-loss gradient and central
/// differences over up to 64 sampled parameters.
pub fn skill_grad_check(policy: &SkillPolicy, data: &SkillDataset, eps: f64, seed: u64) -> f64 {
    let b = policy.batch(data);
    let (_, grad) = policy.loss_and_grad(&b, true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = nn::sample_indices(policy.num_params(), 64, &mut rng);
    let mut probe = policy.clone();
    nn::max_relative_error(&policy.params, &grad, &idx, eps, 1e-6, |p| {
        probe.params.copy_from_slice(p);
        probe.loss_and_grad(&b, false).0
    })
}

/// Per-state supervision for a meta controller.
#[derive(Debug, Clone)]
pub struct MetaDataset {
    pub states: Array2<f64>,
    pub skills: Vec<usize>,
    pub subgoals: Array2<f64>,
}

impl MetaDataset {
    pub fn len(&self) -> usize {
        self.skills.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skills.is_empty()
    }
}

/// Labels every state of `set` with its skill from `partition` and the
/// subgoal `E_k(s_g)` from the frozen encoder of that skill.
pub fn meta_dataset(
    set: &DemoSet,
    partition: &SkillPartition,
    skills: &[SkillPolicy],
    horizon: usize,
) -> Result<MetaDataset> {
    let state_dim = set.state_dim();
    let subgoal_dim = skills.first().map_or(0, SkillPolicy::subgoal_dim);
    if skills.len() != partition.k {
        return Err(Error::shape(format!("{} skills", partition.k), skills.len()));
    }
    let mut states = Vec::new();
    let mut labels = Vec::new();
    let mut subgoals = Vec::new();
    for traj in &set.trajectories {
        let feats = set.state_features(traj);
        let segs = partition.trajectory(&traj.id);
        let covered: usize = segs.iter().map(|a| a.end - a.start).sum();
        if segs.is_empty() || covered != traj.len {
            return Err(Error::Format(format!(
                "partition does not cover trajectory `{}`",
                traj.id
            )));
        }
        for a in segs {
            let policy = &skills[a.skill];
            let goal_rows: Vec<usize> = (a.start..a.end).map(|t| subgoal_index(t, horizon, a.end)).collect();
            let omega = policy.encode_goals(feats.select(Axis(0), &goal_rows).view());
            for (i, t) in (a.start..a.end).enumerate() {
                states.extend(feats.row(t).iter().copied());
                labels.push(a.skill);
                subgoals.extend(omega.row(i).iter().copied());
            }
        }
    }
    let n = labels.len();
    Ok(MetaDataset {
        states: Array2::from_shape_vec((n, state_dim), states).expect("state rows"),
        skills: labels,
        subgoals: Array2::from_shape_vec((n, subgoal_dim), subgoals).expect("subgoal rows"),
    })
}

/// cVAE over `(skill, subgoal)` given the state. The encoder
/// `q(z | s, k, ω)` is absent when the latent is zero-dimensional.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaController {
    pub task: String,
    pub num_skills: usize,
    pub latent_dim: usize,
    pub meta_period: usize,
    /// Applied to states before either network.
    pub input: Standardizer,
    pub encoder: Option<Mlp>,
    pub decoder: Mlp,
    pub params: Vec<f64>,
}

/// Loss terms averaged over a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetaLoss {
    pub total: f64,
    pub cross_entropy: f64,
    pub subgoal_mse: f64,
    pub kl: f64,
}

impl MetaController {
    pub fn init(task: &str, num_skills: usize, state_dim: usize, subgoal_dim: usize, cfg: &HbcConfig) -> Self {
        let dz = cfg.meta_latent_dim;
        let encoder =
            (dz > 0).then(|| Mlp::new(&sizes(state_dim + num_skills + subgoal_dim, &cfg.meta_hidden, 2 * dz)));
        let decoder = Mlp::new(&sizes(state_dim + dz, &cfg.meta_hidden, num_skills + subgoal_dim));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0);
        let mut params = encoder.as_ref().map_or_else(Vec::new, |e| e.init(&mut rng));
        params.extend(decoder.init(&mut rng));
        MetaController {
            task: task.to_owned(),
            num_skills,
            latent_dim: dz,
            meta_period: cfg.meta_period,
            input: Standardizer::identity(state_dim),
            encoder,
            decoder,
            params,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.decoder.input_dim() - self.latent_dim
    }

    pub fn subgoal_dim(&self) -> usize {
        self.decoder.output_dim() - self.num_skills
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn split(&self) -> (&[f64], &[f64]) {
        self.params
            .split_at(self.encoder.as_ref().map_or(0, Mlp::num_params))
    }

    /// Skill probabilities and subgoals decoded from states and latents.
    pub fn decode(&self, states: ArrayView2<f64>, z: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let x = nn::concat_cols(&[self.input.apply(states).view(), z.view()]);
        let out = self.decoder.forward(self.split().1, x.view());
        let probs = nn::softmax_rows(out.slice(s![.., ..self.num_skills]));
        (probs, out.slice(s![.., self.num_skills..]).to_owned())
    }

    /// Mode of the skill head at the prior mean `z = 0`.
    pub fn predict_modes(&self, states: ArrayView2<f64>) -> Vec<usize> {
        let z = Array2::zeros((states.nrows(), self.latent_dim));
        let (probs, _) = self.decode(states, z.view());
        probs.rows().into_iter().map(|r| nn::argmax(r.as_slice().expect("contiguous"))).collect()
    }

    fn loss_and_grad(
        &self,
        data: &MetaDataset,
        rows: Option<&[usize]>,
        noise: ArrayView2<f64>,
        kl_weight: f64,
        want_grad: bool,
    ) -> (MetaLoss, Vec<f64>) {
        let (states, labels, omega, noise) = match rows {
            Some(r) => (
                self.input.apply(data.states.select(Axis(0), r).view()),
                r.iter().map(|&i| data.skills[i]).collect(),
                data.subgoals.select(Axis(0), r),
                noise.select(Axis(0), r),
            ),
            None => (
                self.input.apply(data.states.view()),
                data.skills.clone(),
                data.subgoals.clone(),
                noise.to_owned(),
            ),
        };
        let n = labels.len();
        let nf = n.max(1) as f64;
        let (k, dz, dw) = (self.num_skills, self.latent_dim, self.subgoal_dim());
        let (ep, dp) = self.split();
        let mut grad = if want_grad { vec![0.0; self.params.len()] } else { Vec::new() };

        // Posterior sample, or an empty latent.
        let mut kl = 0.0;
        let mut enc = None;
        let z = if let Some(encoder) = &self.encoder {
            let onehot = nn::one_hot(&labels, k);
            let x = nn::concat_cols(&[states.view(), onehot.view(), omega.view()]);
            let trace = encoder.forward_trace(ep, x.view());
            let out = trace.output();
            let mu = out.slice(s![.., ..dz]).to_owned();
            let lv = out.slice(s![.., dz..]).to_owned();
            let std = lv.mapv(|v| (0.5 * v).exp());
            let z = &mu + &(&std * &noise);
            kl = mu
                .iter()
                .zip(lv.iter())
                .map(|(m, l)| 0.5 * (m * m + l.exp() - 1.0 - l))
                .sum::<f64>()
                / nf;
            enc = Some((trace, mu, lv, std));
            z
        } else {
            Array2::zeros((n, 0))
        };

        let x = nn::concat_cols(&[states.view(), z.view()]);
        let trace = self.decoder.forward_trace(dp, x.view());
        let out = trace.output();
        let probs = nn::softmax_rows(out.slice(s![.., ..k]));
        let ce = labels
            .iter()
            .enumerate()
            .map(|(i, &c)| -probs[[i, c]].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / nf;
        let diff = &out.slice(s![.., k..]) - &omega;
        let mse = diff.iter().map(|d| d * d).sum::<f64>() / (nf * dw.max(1) as f64);
        let loss = MetaLoss {
            total: ce + mse + kl_weight * kl,
            cross_entropy: ce,
            subgoal_mse: mse,
            kl,
        };
        if !want_grad {
            return (loss, grad);
        }

        let mut g_out = Array2::zeros(out.raw_dim());
        {
            let mut g_logits = g_out.slice_mut(s![.., ..k]);
            g_logits.assign(&probs);
            for (i, &c) in labels.iter().enumerate() {
                g_logits[[i, c]] -= 1.0;
            }
            g_logits.mapv_inplace(|v| v / nf);
        }
        g_out
            .slice_mut(s![.., k..])
            .assign(&(diff * (2.0 / (nf * dw.max(1) as f64))));
        let ne = ep.len();
        let dx = self.decoder.backward(dp, &trace, g_out, &mut grad[ne..]);

        if let (Some(encoder), Some((trace, mu, lv, std))) = (&self.encoder, enc) {
            let dz_up = dx.slice(s![.., states.ncols()..]);
            let mut g_enc = Array2::zeros((n, 2 * dz));
            for i in 0..n {
                for j in 0..dz {
                    let gz = dz_up[[i, j]];
                    g_enc[[i, j]] = gz + kl_weight * mu[[i, j]] / nf;
                    g_enc[[i, dz + j]] =
                        gz * noise[[i, j]] * 0.5 * std[[i, j]] + kl_weight * 0.5 * (lv[[i, j]].exp() - 1.0) / nf;
                }
            }
            encoder.backward(ep, &trace, g_enc, &mut grad[..ne]);
        }
        (loss, grad)
    }

    pub fn loss(&self, data: &MetaDataset, noise: ArrayView2<f64>, kl_weight: f64) -> MetaLoss {
        self.loss_and_grad(data, None, noise, kl_weight, false).0
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let header = MetaHeader {
            task: self.task.clone(),
            num_skills: self.num_skills,
            state_dim: self.state_dim(),
            subgoal_dim: self.subgoal_dim(),
            latent_dim: self.latent_dim,
            meta_period: self.meta_period,
            input: self.input.clone(),
            encoder_sizes: self.encoder.as_ref().map(|e| e.sizes().to_vec()),
            decoder_sizes: self.decoder.sizes().to_vec(),
            num_params: self.params.len(),
        };
        data::write_json(dir.join(meta_header(&self.task)), &header)?;
        data::write_f32_blob(dir.join(meta_params(&self.task)), &data::params_to_f32(&self.params))
    }

    pub fn load(dir: impl AsRef<Path>, task: &str) -> Result<MetaController> {
        let dir = dir.as_ref();
        let h: MetaHeader = data::read_json(dir.join(meta_header(task)))?;
        let params = data::params_from_f32(&data::read_f32_blob(dir.join(meta_params(task)))?);
        let encoder = h.encoder_sizes.as_deref().map(Mlp::new);
        let decoder = Mlp::new(&h.decoder_sizes);
        let expected = encoder.as_ref().map_or(0, Mlp::num_params) + decoder.num_params();
        if params.len() != expected || h.num_params != expected || h.input.dim() != h.state_dim {
            return Err(Error::CorruptData {
                file: meta_params(task),
                detail: format!("{} params, layout needs {expected}", params.len()),
            });
        }
        Ok(MetaController {
            task: h.task,
            num_skills: h.num_skills,
            latent_dim: h.latent_dim,
            meta_period: h.meta_period,
            input: h.input,
            encoder,
            decoder,
            params,
        })
    }
}

pub fn meta_header(task: &str) -> String {
    format!("meta_{task}.json")
}

pub fn meta_params(task: &str) -> String {
    format!("meta_{task}.params.f32")
}

#[derive(Serialize, Deserialize)]
struct MetaHeader {
    task: String,
    num_skills: usize,
    state_dim: usize,
    subgoal_dim: usize,
    latent_dim: usize,
    meta_period: usize,
    input: Standardizer,
    encoder_sizes: Option<Vec<usize>>,
    decoder_sizes: Vec<usize>,
    num_params: usize,
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Trains the meta controller of `task` on its demos in `set`. Skill labels
/// come from `partition`; subgoal targets from the frozen skill encoders.
/// Each state keeps one posterior noise draw for the whole run.
pub fn train_meta(
    set: &DemoSet,
    task: &str,
    partition: &SkillPartition,
    skills: &[SkillPolicy],
    cfg: &HbcConfig,
) -> Result<(MetaController, TrainReport)> {
    cfg.validate().map_err(Error::Format)?;
    let demos = set.filter(|t| t.task_id == task);
    if demos.trajectories.is_empty() {
        return Err(Error::EmptyDataset(format!("task `{task}`")));
    }
    let data = meta_dataset(&demos, partition, skills, cfg.horizon)?;
    let dw = skills.first().map_or(cfg.subgoal_dim, SkillPolicy::subgoal_dim);
    let mut model = MetaController::init(task, partition.k, demos.state_dim(), dw, cfg);
    model.input = Standardizer::fit(data.states.view());
    train_meta_on(&mut model, &data, cfg)
}

/// Trains `model` in place on a prepared dataset.
pub fn train_meta_on(
    model: &mut MetaController,
    data: &MetaDataset,
    cfg: &HbcConfig,
) -> Result<(MetaController, TrainReport)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset(format!("task `{}`", model.task)));
    }
    if let Some(&bad) = data.skills.iter().find(|&&k| k >= model.num_skills) {
        return Err(Error::shape(format!("skill below {}", model.num_skills), bad));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2_000);
    let noise = gaussian_matrix(data.len(), model.latent_dim, &mut rng);
    let mut probe = model.clone();
    let worker = model.clone();
    let mut params = std::mem::take(&mut model.params);
    let report = fit(
        &mut params,
        data.len(),
        cfg.meta_epochs,
        cfg.learning_rate,
        batch_size(cfg.batch_size, data.len()),
        &mut rng,
        |p| {
            probe.params.clear();
            probe.params.extend_from_slice(p);
            probe.loss(data, noise.view(), cfg.kl_weight).total
        },
        |p, rows| {
            let mut m = worker.clone();
            m.params = p.to_vec();
            m.loss_and_grad(data, Some(rows), noise.view(), cfg.kl_weight, true).1
        },
    )?;
    model.params = params;
    Ok((model.clone(), report))
}

/// Worst relative error between the analytic meta-loss gradient and central
/// differences over up to 64 sampled parameters.
pub fn meta_grad_check(meta: &MetaController, data: &MetaDataset, kl_weight: f64, eps: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = gaussian_matrix(data.len(), meta.latent_dim, &mut rng);
    let (_, grad) = meta.loss_and_grad(data, None, noise.view(), kl_weight, true);
    let idx = nn::sample_indices(meta.num_params(), 64, &mut rng);
    let mut probe = meta.clone();
    nn::max_relative_error(&meta.params, &grad, &idx, eps, 1e-6, |p| {
        probe.params.copy_from_slice(p);
        probe.loss(data, noise.view(), kl_weight).total
    })
}

/// Samples `z` from the prior and returns the mode of the skill head (lowest
/// index on ties) with the decoded subgoal.
pub fn meta_decide<R: Rng + ?Sized>(meta: &MetaController, state: &[f64], rng: &mut R) -> Result<(usize, Vec<f64>)> {
    if state.len() != meta.state_dim() {
        return Err(Error::shape(format!("state of {}", meta.state_dim()), state.len()));
    }
    let z: Vec<f64> = (0..meta.latent_dim).map(|_| StandardNormal.sample(rng)).collect();
    let s = ArrayView2::from_shape((1, state.len()), state).expect("row");
    let z = ArrayView2::from_shape((1, z.len()), &z).expect("row");
    let (probs, omega) = meta.decode(s, z);
    let k = nn::argmax(probs.row(0).as_slice().expect("contiguous"));
    Ok((k, omega.row(0).to_vec()))
}

/// One step of the hierarchical policy. `(k, ω)` is refreshed on steps that
/// are multiples of the meta period (and whenever nothing is cached), and
/// reused otherwise.
pub fn hier_act<R: Rng + ?Sized>(
    meta: &MetaController,
    skills: &[SkillPolicy],
    state: &[f64],
    step: usize,
    cache: &mut Option<(usize, Vec<f64>)>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if step % meta.meta_period == 0 || cache.is_none() {
        *cache = Some(meta_decide(meta, state, rng)?);
    }
    let (k, omega) = cache.as_ref().expect("refreshed above");
    let policy = skills
        .get(*k)
        .ok_or_else(|| Error::shape(format!("skill below {}", skills.len()), *k))?;
    skill_act(policy, state, omega)
}

/// Closed-loop controller over a trained hierarchy.
#[derive(Debug, Clone)]
pub struct HierarchicalController<'a> {
    meta: &'a MetaController,
    skills: &'a [SkillPolicy],
    rng: ChaCha8Rng,
    cache: Option<(usize, Vec<f64>)>,
    /// Steps at which the meta controller was consulted.
    pub decisions: Vec<usize>,
}

impl<'a> HierarchicalController<'a> {
    pub fn new(meta: &'a MetaController, skills: &'a [SkillPolicy], seed: u64) -> Result<Self> {
        if skills.len() != meta.num_skills {
            return Err(Error::shape(format!("{} skills", meta.num_skills), skills.len()));
        }
        for (k, p) in skills.iter().enumerate() {
            if p.skill != k
                || p.state_dim() != meta.state_dim()
                || p.subgoal_dim() != meta.subgoal_dim()
                || p.action_dim() != ACTION_DIM
            {
                return Err(Error::shape(
                    format!("skill {k} matching the meta controller"),
                    format!("skill {} ({} → {})", p.skill, p.state_dim(), p.action_dim()),
                ));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        Ok(HierarchicalController {
            meta,
            skills,
            rng,
            cache: None,
            decisions: Vec::new(),
        })
    }
}

impl Controller for HierarchicalController<'_> {
    fn act(&mut self, obs: &[f64], step: usize) -> Action {
        let before = self.cache.is_none() || step % self.meta.meta_period == 0;
        let a = hier_act(self.meta, self.skills, obs, step, &mut self.cache, &mut self.rng)
            .expect("dimensions checked at construction");
        if before {
            self.decisions.push(step);
        }
        [a[0], a[1], a[2]]
    }

    fn active_skill(&self) -> Option<usize> {
        self.cache.as_ref().map(|c| c.0)
    }
}
