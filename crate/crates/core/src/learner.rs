//! PPO with GAE advantages, value regression and the mirror symmetry loss.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assistant::{Lesson, LessonRange};
use crate::charmodel::SignedPermutation;
use crate::env::{Environment, Termination};
use crate::error::{Error, Result};
use crate::policy::{self, OutputGradient, ParamGradient, PolicyParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub learning_rate: f64,
    /// Iterations over which the learning rate decays linearly.
    pub lr_decay_iterations: usize,
    /// Floor of the decayed learning rate, as a fraction of the initial one.
    pub min_lr_fraction: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub w_sym: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    /// Environment steps collected per iteration.
    pub batch_steps: usize,
    pub workers: usize,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            learning_rate: 1e-3,
            lr_decay_iterations: 1500,
            min_lr_fraction: 0.01,
            epochs: 10,
            minibatch: 1024,
            w_sym: 4.0,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            batch_steps: 20_000,
            workers: 8,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                field: format!("learner.{field}"),
                message: message.into(),
            })
        };
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma", "must lie in (0, 1]");
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad("lambda", "must lie in (0, 1]");
        }
        if !(self.clip > 0.0) {
            return bad("clip", "must be positive");
        }
        if !(self.w_sym >= 0.0) {
            return bad("w_sym", "must be non-negative");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate", "must be positive");
        }
        if self.minibatch == 0 || self.batch_steps == 0 {
            return bad("minibatch", "batch sizes must be positive");
        }
        if self.workers == 0 {
            return bad("workers", "must be at least 1");
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        let frac = if self.lr_decay_iterations == 0 {
            1.0
        } else {
            1.0 - iteration as f64 / self.lr_decay_iterations as f64
        };
        self.learning_rate * frac.max(self.min_lr_fraction)
    }
}

/// A contiguous rollout inside a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutSpan {
    pub start: usize,
    pub len: usize,
    /// Ended by termination rather than by the step budget.
    pub complete: bool,
    /// Value of the state after the last step if the rollout was cut short.
    pub bootstrap: f64,
    pub termination: Option<Termination>,
}

/// Per-step arrays of one iteration; observations are stored column-wise.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutBatch {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub observations: Vec<f64>,
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub values: Vec<f64>,
    /// Assistance at the end of each step.
    pub assist: Vec<Lesson>,
    pub rollouts: Vec<RolloutSpan>,
}

impl RolloutBatch {
    pub fn new(obs_dim: usize, act_dim: usize) -> Self {
        Self {
            obs_dim,
            act_dim,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn observation_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.obs_dim, self.len(), &self.observations)
    }

    pub fn action_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.act_dim, self.len(), &self.actions)
    }

    fn append(&mut self, mut o: RolloutBatch) {
        let off = self.len();
        for r in &mut o.rollouts {
            r.start += off;
        }
        self.observations.append(&mut o.observations);
        self.actions.append(&mut o.actions);
        self.log_probs.append(&mut o.log_probs);
        self.rewards.append(&mut o.rewards);
        self.dones.append(&mut o.dones);
        self.values.append(&mut o.values);
        self.assist.append(&mut o.assist);
        self.rollouts.append(&mut o.rollouts);
    }

    /// Rollouts used for return and length statistics: the complete ones, or
    /// every rollout when none completed.
    fn scored_rollouts(&self) -> Vec<&RolloutSpan> {
        let complete: Vec<_> = self.rollouts.iter().filter(|r| r.complete).collect();
        if complete.is_empty() {
            self.rollouts.iter().collect()
        } else {
            complete
        }
    }

    pub fn avg_len(&self) -> Result<f64> {
        let r = self.scored_rollouts();
        if r.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Ok(r.iter().map(|s| s.len as f64).sum::<f64>() / r.len() as f64)
    }

    /// Lengths that decide the balance test: complete rollouts, plus cut
    /// rollouts that already reached `min_len`.
    pub fn balance_lengths(&self, min_len: usize) -> Vec<usize> {
        self.rollouts
            .iter()
            .filter(|r| r.complete || r.len >= min_len)
            .map(|r| r.len)
            .collect()
    }
}

/// Mean undiscounted return per rollout.
pub fn avg_return(batch: &RolloutBatch) -> Result<f64> {
    let r = batch.scored_rollouts();
    if r.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let total: f64 = r
        .iter()
        .map(|s| batch.rewards[s.start..s.start + s.len].iter().sum::<f64>())
        .sum();
    Ok(total / r.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gae {
    /// Normalized to zero mean and unit standard deviation.
    pub advantages: Vec<f64>,
    pub raw: Vec<f64>,
    pub targets: Vec<f64>,
}

/// Generalized advantage estimation within each rollout.
pub fn compute_gae(batch: &RolloutBatch, gamma: f64, lambda: f64) -> Result<Gae> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = batch.len();
    let mut raw = vec![0.0; n];
    for span in &batch.rollouts {
        let mut next_value = span.bootstrap;
        let mut acc = 0.0;
        for t in (span.start..span.start + span.len).rev() {
            let nonterminal = if batch.dones[t] { 0.0 } else { 1.0 };
            let delta = batch.rewards[t] + gamma * next_value * nonterminal - batch.values[t];
            acc = delta + gamma * lambda * nonterminal * acc;
            raw[t] = acc;
            next_value = batch.values[t];
        }
    }
    let targets: Vec<f64> = raw.iter().zip(&batch.values).map(|(a, v)| a + v).collect();
    Ok(Gae {
        advantages: normalize(&raw),
        raw,
        targets,
    })
}

fn normalize(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        return x.iter().map(|v| v - mean).collect();
    }
    x.iter().map(|v| (v - mean) / std).collect()
}

/// Samples used by one optimizer step.
#[derive(Debug, Clone)]
pub struct Minibatch {
    /// Raw observations, one column per sample.
    pub obs: DMatrix<f64>,
    pub actions: DMatrix<f64>,
    pub log_probs_old: Vec<f64>,
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.obs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.ncols() == 0
    }
}

/// Clipped surrogate loss and its output gradient.
pub fn ppo_loss_and_grad(params: &PolicyParams, mb: &Minibatch, clip: f64) -> (f64, OutputGradient) {
    let b = mb.len() as f64;
    let mean = params.batch_mean(&mb.obs);
    let ls = params.log_std.as_slice();
    let mut dmean = DMatrix::zeros(mean.nrows(), mean.ncols());
    let mut dls = DVector::zeros(ls.len());
    let mut loss = 0.0;
    for j in 0..mb.len() {
        let m = mean.column(j);
        let a = mb.actions.column(j);
        let lp = policy::gaussian_log_prob(m.as_slice(), ls, a.as_slice());
        let ratio = (lp - mb.log_probs_old[j]).exp();
        let adv = mb.advantages[j];
        let unclipped = ratio * adv;
        let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
        loss -= unclipped.min(clipped) / b;
        if unclipped <= clipped {
            // d(-ratio * A / B)/d logp
            let g = -unclipped / b;
            let (gm, gs) = policy::log_prob_gradients(m.as_slice(), ls, a.as_slice());
            for i in 0..gm.len() {
                dmean[(i, j)] = g * gm[i];
                dls[i] += g * gs[i];
            }
        }
    }
    (
        loss,
        OutputGradient {
            mean: Some(dmean),
            log_std: Some(dls),
            value: None,
        },
    )
}

pub fn ppo_loss(params: &PolicyParams, mb: &Minibatch, clip: f64) -> f64 {
    ppo_loss_and_grad(params, mb, clip).0
}

fn mirror_columns(m: &DMatrix<f64>, p: &SignedPermutation) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| p.sign(i) * m[(p.target(i), j)])
}

/// Mean squared mismatch between the policy mean and its mirrored
/// counterpart, with the parameter gradient through both branches.
pub fn sym_loss_and_grad(
    params: &PolicyParams,
    obs: &DMatrix<f64>,
    mirror_obs: &SignedPermutation,
    mirror_act: &SignedPermutation,
) -> Result<(f64, ParamGradient)> {
    let b = obs.ncols();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    let mirrored = mirror_columns(obs, mirror_obs);
    let x = params.normalizer.normalize(obs);
    let xm = params.normalizer.normalize(&mirrored);
    let (mu, acts) = params.mean.forward_cached(&x);
    let (mu_m, acts_m) = params.mean.forward_cached(&xm);
    let d = &mu - mirror_columns(&mu_m, mirror_act);
    let loss = d.norm_squared() / b as f64;
    let g = d * (2.0 / b as f64);
    let g_m = -mirror_columns(&g, mirror_act);
    let mut grad = ParamGradient::zeros_like(params);
    grad.mean = params.mean.backward(&acts, g);
    let other = params.mean.backward(&acts_m, g_m);
    for (a, o) in grad.mean.iter_mut().zip(&other) {
        a.w += &o.w;
        a.b += &o.b;
    }
    Ok((loss, grad))
}

pub fn sym_loss(
    params: &PolicyParams,
    obs: &DMatrix<f64>,
    mirror_obs: &SignedPermutation,
    mirror_act: &SignedPermutation,
) -> Result<f64> {
    sym_loss_and_grad(params, obs, mirror_obs, mirror_act).map(|r| r.0)
}

/// Mean squared error of the value net and its output gradient.
pub fn value_loss_and_grad(params: &PolicyParams, obs: &DMatrix<f64>, targets: &[f64]) -> (f64, OutputGradient) {
    let b = targets.len() as f64;
    let v = params.batch_value(obs);
    let mut dv = DMatrix::zeros(1, targets.len());
    let mut loss = 0.0;
    for (j, t) in targets.iter().enumerate() {
        let e = v[j] - t;
        loss += e * e / b;
        dv[(0, j)] = 2.0 * e / b;
    }
    (
        loss,
        OutputGradient {
            value: Some(dv),
            ..OutputGradient::default()
        },
    )
}

pub fn value_loss(params: &PolicyParams, obs: &DMatrix<f64>, targets: &[f64]) -> f64 {
    value_loss_and_grad(params, obs, targets).0
}

/// Adaptive-moment optimizer over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Per-iteration training statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub avg_return: f64,
    pub avg_len: f64,
    pub ppo_loss: f64,
    pub sym_loss: f64,
    pub value_loss: f64,
    /// Norm of the assistance at the start of a rollout.
    pub lesson_norm: f64,
    pub rollouts: usize,
    pub wall_time_s: f64,
}

pub const STATS_HEADER: &str = "iteration,avg_return,avg_len,L_PPO,L_sym,value_loss,x_norm,wall_time_s";

impl IterationStats {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.3}",
            self.iteration,
            self.avg_return,
            self.avg_len,
            self.ppo_loss,
            self.sym_loss,
            self.value_loss,
            self.lesson_norm,
            self.wall_time_s
        )
    }
}

fn collect_worker<E: Environment>(
    env: &mut E,
    rng: &mut ChaCha8Rng,
    params: &PolicyParams,
    quota: usize,
) -> Result<RolloutBatch> {
    let mut out = RolloutBatch::new(env.obs_dim(), env.act_dim());
    let mut steps = 0;
    while steps < quota {
        let mut obs = env.reset(rng.random());
        let start = out.len();
        loop {
            let (act, lp) = policy::sample_action(params, &obs, rng)?;
            let v = policy::value(params, &obs)?;
            let res = env.step(&act);
            out.observations.extend_from_slice(&obs);
            out.actions.extend_from_slice(&act);
            out.log_probs.push(lp);
            out.rewards.push(res.reward);
            out.dones.push(res.done);
            out.values.push(v);
            out.assist.push(res.info.lesson);
            steps += 1;
            obs = res.observation;
            if res.done || steps == quota {
                let bootstrap = if res.done { 0.0 } else { policy::value(params, &obs)? };
                out.rollouts.push(RolloutSpan {
                    start,
                    len: out.len() - start,
                    complete: res.done,
                    bootstrap,
                    termination: res.info.termination,
                });
                break;
            }
        }
    }
    Ok(out)
}

fn run_eval<E: Environment>(env: &mut E, params: &PolicyParams, seed: u64, max_steps: usize) -> Result<(f64, usize)> {
    let mut obs = env.reset(seed);
    let mut total = 0.0;
    for k in 1..=max_steps {
        let act = policy::mean_action(params, &obs)?;
        let res = env.step(&act);
        total += res.reward;
        obs = res.observation;
        if res.done {
            return Ok((total, k));
        }
    }
    Ok((total, max_steps))
}

/// Rollout workers plus optimizer state.
pub struct Trainer<E: Environment> {
    pub config: LearnerConfig,
    envs: Vec<E>,
    rngs: Vec<ChaCha8Rng>,
    rng: ChaCha8Rng,
    mirror_obs: SignedPermutation,
    mirror_act: SignedPermutation,
    adam: Option<Adam>,
    iteration: usize,
    /// Safety bound on evaluation rollouts.
    pub eval_max_steps: usize,
}

impl<E: Environment> Trainer<E> {
    /// One environment per worker; worker `i` draws from seed `seed + i`.
    pub fn new(
        config: LearnerConfig,
        envs: Vec<E>,
        mirror_obs: SignedPermutation,
        mirror_act: SignedPermutation,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if envs.is_empty() {
            return Err(Error::Config {
                field: "learner.workers".into(),
                message: "need at least one environment".into(),
            });
        }
        let rngs = (0..envs.len())
            .map(|i| ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64)))
            .collect();
        Ok(Self {
            config,
            envs,
            rngs,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1ea5_0000_0000),
            mirror_obs,
            mirror_act,
            adam: None,
            iteration: 0,
            eval_max_steps: 10_000,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn mirror_maps(&self) -> (&SignedPermutation, &SignedPermutation) {
        (&self.mirror_obs, &self.mirror_act)
    }

    /// Collects `batch_steps` across the workers, gathered in worker order.
    pub fn collect(&mut self, params: &PolicyParams, range: LessonRange) -> Result<RolloutBatch> {
        let w = self.envs.len();
        let total = self.config.batch_steps;
        let quotas: Vec<usize> = (0..w).map(|i| total / w + usize::from(i < total % w)).collect();
        for e in &mut self.envs {
            e.set_lesson(range);
        }
        let results: Vec<Result<RolloutBatch>> = std::thread::scope(|s| {
            let handles: Vec<_> = self
                .envs
                .iter_mut()
                .zip(self.rngs.iter_mut())
                .zip(&quotas)
                .map(|((env, rng), &q)| s.spawn(move || collect_worker(env, rng, params, q)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Worker("rollout worker panicked".into()))))
                .collect()
        });
        let mut batch = RolloutBatch::new(params.obs_dim(), params.act_dim());
        for r in results {
            let part = r?;
            if part.obs_dim != batch.obs_dim || part.act_dim != batch.act_dim {
                return Err(Error::Worker("worker batch has mismatched dimensions".into()));
            }
            batch.append(part);
        }
        Ok(batch)
    }

    /// Collects one batch under `range` and runs the PPO epochs on it.
    pub fn train_iteration(
        &mut self,
        params: &mut PolicyParams,
        range: LessonRange,
    ) -> Result<(RolloutBatch, IterationStats)> {
        let started = Instant::now();
        let batch = self.collect(params, range)?;
        let gae = compute_gae(&batch, self.config.gamma, self.config.lambda)?;
        let obs = batch.observation_matrix();
        let actions = batch.action_matrix();
        let n = batch.len();
        let lr = self.config.learning_rate_at(self.iteration);
        let mut flat = params.flat();
        let adam = self.adam.get_or_insert_with(|| Adam::new(flat.len()));

        let mut order: Vec<usize> = (0..n).collect();
        let (mut lp_sum, mut ls_sum, mut lv_sum, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for _ in 0..self.config.epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.config.minibatch) {
                let mb = Minibatch {
                    obs: obs.select_columns(chunk),
                    actions: actions.select_columns(chunk),
                    log_probs_old: chunk.iter().map(|&i| batch.log_probs[i]).collect(),
                    advantages: chunk.iter().map(|&i| gae.advantages[i]).collect(),
                    value_targets: chunk.iter().map(|&i| gae.targets[i]).collect(),
                };
                let (lp, gp) = ppo_loss_and_grad(params, &mb, self.config.clip);
                let mut grad = policy::backward(params, &mb.obs, &gp)?;
                let (lv, gv) = value_loss_and_grad(params, &mb.obs, &mb.value_targets);
                let mut gv = policy::backward(params, &mb.obs, &gv)?;
                for l in &mut gv.value {
                    l.w *= self.config.value_coef;
                    l.b *= self.config.value_coef;
                }
                grad.value = gv.value;
                let mut ls = 0.0;
                if self.config.w_sym > 0.0 {
                    let (l, mut gs) = sym_loss_and_grad(params, &mb.obs, &self.mirror_obs, &self.mirror_act)?;
                    for layer in &mut gs.mean {
                        layer.w *= self.config.w_sym;
                        layer.b *= self.config.w_sym;
                    }
                    grad.add_assign(&gs);
                    ls = l;
                }
                let mut g = grad.flat();
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !norm.is_finite() {
                    return Err(Error::Numerical("non-finite policy gradient".into()));
                }
                if norm > self.config.max_grad_norm {
                    let s = self.config.max_grad_norm / norm;
                    g.iter_mut().for_each(|v| *v *= s);
                }
                adam.step(&mut flat, &g, lr);
                params.set_flat(&flat);
                params.clamp_log_std();
                flat = params.flat();
                lp_sum += lp;
                ls_sum += ls;
                lv_sum += lv;
                steps += 1;
            }
        }
        params.normalizer.update_symmetric(&obs, &self.mirror_obs);
        self.iteration += 1;
        let k = steps.max(1) as f64;
        let stats = IterationStats {
            iteration: self.iteration,
            avg_return: avg_return(&batch)?,
            avg_len: batch.avg_len()?,
            ppo_loss: lp_sum / k,
            sym_loss: ls_sum / k,
            value_loss: lv_sum / k,
            lesson_norm: range.begin.norm(),
            rollouts: batch.rollouts.len(),
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        Ok((batch, stats))
    }

    /// Mean return of `n` deterministic rollouts under constant assistance.
    ///
    /// Rollout `i` resets with seed `seed + i`; rollouts are spread over the
    /// workers.
    pub fn eval_return(&mut self, params: &PolicyParams, lesson: Lesson, n: usize, seed: u64) -> Result<f64> {
        Ok(self.eval_rollouts(params, lesson, n, seed)?.0)
    }

    /// Mean return and mean length of deterministic rollouts.
    pub fn eval_rollouts(
        &mut self,
        params: &PolicyParams,
        lesson: Lesson,
        n: usize,
        seed: u64,
    ) -> Result<(f64, f64)> {
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let w = self.envs.len();
        let max_steps = self.eval_max_steps;
        for e in &mut self.envs {
            e.set_lesson(LessonRange::constant(lesson));
        }
        let results: Vec<Vec<Result<(f64, usize)>>> = std::thread::scope(|s| {
            let handles: Vec<_> = self
                .envs
                .iter_mut()
                .enumerate()
                .map(|(k, env)| {
                    s.spawn(move || {
                        (k..n)
                            .step_by(w)
                            .map(|i| run_eval(env, params, seed.wrapping_add(i as u64), max_steps))
                            .collect()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| vec![Err(Error::Worker("evaluation worker panicked".into()))]))
                .collect()
        });
        let mut total = 0.0;
        let mut len = 0.0;
        for r in results.into_iter().flatten() {
            let (ret, l) = r?;
            total += ret;
            len += l as f64;
        }
        Ok((total / n as f64, len / n as f64))
    }
}
