//! PPO with a sequence-level reward, per-token KL shaping against a frozen
//! reference, GAE advantages from the policy's value head and a clipped
//! ratio objective.

use ndarray::Array1;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{PoConfig, PoPrompt};
use crate::error::{Error, Result};
use crate::policy::generate::sample;
use crate::policy::optim::Adam;
use crate::policy::{PolicyModel, Sequence};
use crate::reward::{RewardBackend, RewardBreakdown};
use crate::seed::{derive_seed, rng_for};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub value_coef: f64,
    pub prompts_per_step: usize,
    pub rollouts_per_prompt: usize,
    /// Optimization passes over each rollout batch.
    pub update_epochs: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip: 0.2,
            gamma: 1.0,
            lambda: 0.95,
            value_coef: 0.1,
            prompts_per_step: 8,
            rollouts_per_prompt: 1,
            update_epochs: 2,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0) || !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config("ppo clip must be positive; gamma and lambda in [0, 1]".into()));
        }
        if self.value_coef < 0.0 {
            return Err(Error::Config("value_coef must be non-negative".into()));
        }
        if self.prompts_per_step == 0 || self.rollouts_per_prompt == 0 || self.update_epochs == 0 {
            return Err(Error::Config("ppo batch sizes must be positive".into()));
        }
        Ok(())
    }
}

/// One sampled completion with everything the update needs.
#[derive(Debug, Clone)]
pub(crate) struct Rollout {
    pub seq: Sequence,
    pub old_logp: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub reward: RewardBreakdown,
    /// Sum over tokens of `log pi - log pi_ref`.
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoStepStats {
    pub step: usize,
    pub epoch: usize,
    pub reward: f64,
    pub toward: f64,
    pub away: f64,
    pub length_penalty: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoEpochStats {
    pub epoch: usize,
    pub reward: f64,
    pub toward: f64,
    pub away: f64,
    pub length_penalty: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoRun {
    pub steps: Vec<PpoStepStats>,
    /// Epoch 0 samples the initial policy without updating it.
    pub epochs: Vec<PpoEpochStats>,
}

/// Generalized advantage estimates and returns for one trajectory whose
/// final value is zero.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let next_v = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_v - values[t];
        next_adv = delta + gamma * lambda * next_adv;
        adv[t] = next_adv;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

fn rollout(
    policy: &PolicyModel,
    reference: &PolicyModel,
    backend: &RewardBackend,
    prompt: &PoPrompt,
    config: &PoConfig,
    seed: u64,
) -> Result<Option<Rollout>> {
    let text = prompt.render(policy)?;
    let tokens = policy.tokenizer.encode_prompt(&text)?;
    let s = sample(policy, &tokens, &config.gen.with_seed(seed))?;
    let seq = policy.sequence_from_tokens(&tokens, &s.tokens, s.ended)?;
    if seq.completion_steps().is_empty() {
        return Ok(None);
    }
    let out = policy.tokenizer.decode(&s.tokens);
    let reward = prompt.reward(&out, backend, &config.reward)?;
    let fwd = policy.transformer.forward(&seq.input)?;
    let ref_fwd = reference.transformer.forward(&seq.input)?;
    let steps: Vec<usize> = seq.completion_steps().collect();
    let old_logp: Vec<f64> = steps.iter().map(|&t| fwd.next_token_logp(&seq.input.tokens, t)).collect();
    let ref_logp: Vec<f64> = steps.iter().map(|&t| ref_fwd.next_token_logp(&seq.input.tokens, t)).collect();
    let values: Vec<f64> = steps.iter().map(|&t| fwd.values[t]).collect();
    let mut rewards: Vec<f64> = old_logp
        .iter()
        .zip(&ref_logp)
        .map(|(o, r)| -config.beta * (o - r))
        .collect();
    *rewards.last_mut().expect("non-empty") += reward.total;
    let kl = old_logp.iter().zip(&ref_logp).map(|(o, r)| o - r).sum();
    let (advantages, returns) = gae(&rewards, &values, config.ppo.gamma, config.ppo.lambda);
    Ok(Some(Rollout {
        seq,
        old_logp,
        advantages,
        returns,
        reward,
        kl,
    }))
}

#[allow(clippy::too_many_arguments)]
fn collect(
    policy: &PolicyModel,
    reference: &PolicyModel,
    backend: &RewardBackend,
    prompts: &[PoPrompt],
    chunk: &[usize],
    config: &PoConfig,
    seed: u64,
    epoch: usize,
    per_prompt: usize,
) -> Result<Vec<Rollout>> {
    let mut rollouts = Vec::new();
    for &i in chunk {
        let p = &prompts[i];
        for j in 0..per_prompt {
            let s = derive_seed(seed, &format!("ppo/{epoch}/{}/{j}", p.id));
            match rollout(policy, reference, backend, p, config, s) {
                Ok(Some(r)) => rollouts.push(r),
                Ok(None) => {}
                Err(Error::ContextOverflow { .. }) => log::warn!("prompt {} overflows the context; skipped", p.id),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(rollouts)
}

/// Whitens advantages across every token of the batch.
fn whiten(rollouts: &mut [Rollout]) {
    let all: Vec<f64> = rollouts.iter().flat_map(|r| r.advantages.iter().copied()).collect();
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for r in rollouts.iter_mut() {
        for a in r.advantages.iter_mut() {
            *a = (*a - mean) / std;
        }
    }
}

/// Token-mean clipped surrogate plus value loss. Accumulates the gradient and
/// returns (policy loss, value loss, clip fraction).
pub(crate) fn surrogate_gradient(
    policy: &PolicyModel,
    rollouts: &[Rollout],
    config: &PoConfig,
    grads: &mut [f64],
) -> Result<(f64, f64, f64)> {
    let n_tok: usize = rollouts.iter().map(|r| r.old_logp.len()).sum();
    let scale = 1.0 / n_tok as f64;
    let eps = config.ppo.clip;
    let (mut pl, mut vl, mut clipped) = (0.0, 0.0, 0usize);
    for r in rollouts {
        let fwd = policy.transformer.forward(&r.seq.input)?;
        let steps: Vec<usize> = r.seq.completion_steps().collect();
        let mut weights = Vec::with_capacity(steps.len());
        let mut dvalues = Array1::zeros(r.seq.input.len());
        for (k, &t) in steps.iter().enumerate() {
            let lp = fwd.next_token_logp(&r.seq.input.tokens, t);
            let ratio = (lp - r.old_logp[k]).exp();
            let a = r.advantages[k];
            let unclipped = ratio * a;
            let clipped_term = ratio.clamp(1.0 - eps, 1.0 + eps) * a;
            // the clipped branch is active (and flat) when it is the smaller term
            let is_clipped = clipped_term < unclipped;
            if is_clipped {
                clipped += 1;
                pl -= clipped_term * scale;
                weights.push((t, 0.0));
            } else {
                pl -= unclipped * scale;
                weights.push((t, -a * ratio * scale));
            }
            let v = fwd.values[t];
            let diff = v - r.returns[k];
            vl += 0.5 * diff * diff * scale;
            dvalues[t] = config.ppo.value_coef * diff * scale;
        }
        policy
            .transformer
            .logprob_backward(&r.seq.input, &fwd, &weights, Some(&dvalues), grads);
    }
    Ok((pl, vl, clipped as f64 * scale))
}

/// A completion with fixed behaviour log-probabilities, advantages and
/// returns, one per completion token including the end token.
#[derive(Debug, Clone)]
pub struct SurrogateInput {
    pub seq: Sequence,
    pub old_logp: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Token-mean clipped surrogate plus `value_coef` times the value loss, and
/// its gradient with respect to the flat parameter vector.
pub fn surrogate_objective(policy: &PolicyModel, inputs: &[SurrogateInput], config: &PoConfig) -> Result<(f64, Vec<f64>)> {
    let rollouts = inputs
        .iter()
        .map(|i| {
            let n = i.seq.completion_steps().len();
            if i.old_logp.len() != n || i.advantages.len() != n || i.returns.len() != n {
                return Err(Error::Data(format!("surrogate input needs {n} values per token array")));
            }
            Ok(fixed_rollout(i.seq.clone(), i.old_logp.clone(), i.advantages.clone(), i.returns.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    if rollouts.is_empty() {
        return Err(Error::Data("no surrogate inputs".into()));
    }
    let mut grads = vec![0.0; policy.transformer.n_params()];
    let (pl, vl, _) = surrogate_gradient(policy, &rollouts, config, &mut grads)?;
    Ok((pl + config.ppo.value_coef * vl, grads))
}

pub(super) fn fixed_rollout(seq: Sequence, old_logp: Vec<f64>, advantages: Vec<f64>, returns: Vec<f64>) -> Rollout {
    Rollout {
        seq,
        old_logp,
        advantages,
        returns,
        reward: RewardBreakdown {
            toward: 0.0,
            away: 0.0,
            length_penalty: 0.0,
            total: 0.0,
        },
        kl: 0.0,
    }
}

/// Runs PPO in place. On a non-finite update the parameters from before that
/// update are restored and an error is returned.
pub fn ppo_train(
    policy: &mut PolicyModel,
    reference: &PolicyModel,
    backend: &RewardBackend,
    prompts: &[PoPrompt],
    config: &PoConfig,
    seed: u64,
) -> Result<PpoRun> {
    config.validate()?;
    if prompts.is_empty() {
        return Err(Error::Data("PPO needs at least one prompt".into()));
    }
    let mut opt = Adam::new(policy.transformer.n_params(), config.learning_rate);
    let mut grads = vec![0.0; policy.transformer.n_params()];
    let mut run = PpoRun {
        steps: Vec::new(),
        epochs: Vec::new(),
    };
    // epoch 0: one rollout per prompt from the initial policy, no update
    let mut order: Vec<usize> = (0..prompts.len()).collect();
    let initial = collect(policy, reference, backend, prompts, &order, config, seed, 0, 1)?;
    if !initial.is_empty() {
        let n = initial.len() as f64;
        let mean = |f: &dyn Fn(&Rollout) -> f64| initial.iter().map(f).sum::<f64>() / n;
        run.epochs.push(PpoEpochStats {
            epoch: 0,
            reward: mean(&|r| r.reward.total),
            toward: mean(&|r| r.reward.toward),
            away: mean(&|r| r.reward.away),
            length_penalty: mean(&|r| r.reward.length_penalty),
            kl: mean(&|r| r.kl),
        });
    }
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng_for(seed, &format!("ppo/epoch{epoch}")));
        let first_step = run.steps.len();
        for chunk in order.chunks(config.ppo.prompts_per_step) {
            let mut rollouts = collect(
                policy,
                reference,
                backend,
                prompts,
                chunk,
                config,
                seed,
                epoch,
                config.ppo.rollouts_per_prompt,
            )?;
            if rollouts.is_empty() {
                continue;
            }
            let n = rollouts.len() as f64;
            let mean = |f: &dyn Fn(&Rollout) -> f64| rollouts.iter().map(f).sum::<f64>() / n;
            let mut stats = PpoStepStats {
                step: run.steps.len() + 1,
                epoch,
                reward: mean(&|r| r.reward.total),
                toward: mean(&|r| r.reward.toward),
                away: mean(&|r| r.reward.away),
                length_penalty: mean(&|r| r.reward.length_penalty),
                kl: mean(&|r| r.kl),
                clip_fraction: 0.0,
                policy_loss: 0.0,
                value_loss: 0.0,
            };
            whiten(&mut rollouts);
            let last_good = policy.transformer.params.clone();
            for _ in 0..config.ppo.update_epochs {
                grads.fill(0.0);
                let (pl, vl, cf) = surrogate_gradient(policy, &rollouts, config, &mut grads)?;
                let finite = pl.is_finite() && vl.is_finite() && grads.iter().all(|g| g.is_finite());
                if finite {
                    opt.step(&mut policy.transformer.params, &grads);
                }
                if !finite || !policy.transformer.all_finite() {
                    policy.transformer.params = last_good;
                    return Err(Error::Diverged { step: opt.steps() });
                }
                stats.policy_loss = pl;
                stats.value_loss = vl;
                stats.clip_fraction = cf;
            }
            log::info!(
                "ppo step {}: reward {:.4} kl {:.4} clip {:.3}",
                stats.step,
                stats.reward,
                stats.kl,
                stats.clip_fraction
            );
            run.steps.push(stats);
        }
        let steps = &run.steps[first_step..];
        if !steps.is_empty() {
            let m = steps.len() as f64;
            let avg = |f: &dyn Fn(&PpoStepStats) -> f64| steps.iter().map(f).sum::<f64>() / m;
            run.epochs.push(PpoEpochStats {
                epoch,
                reward: avg(&|s| s.reward),
                toward: avg(&|s| s.toward),
                away: avg(&|s| s.away),
                length_penalty: avg(&|s| s.length_penalty),
                kl: avg(&|s| s.kl),
            });
        }
    }
    Ok(run)
}
