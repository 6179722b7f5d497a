//! Offline preference training (DPO and CPO).

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::losses::{cpo, dpo, PairLoss};
use super::{Algo, PoConfig, PreferencePair};
use crate::error::{Error, Result};
use crate::policy::optim::Adam;
use crate::policy::{PolicyModel, Sequence};
use crate::seed::rng_for;

/// Minimum number of pairs accepted by [`preference_train`].
pub const MIN_PAIRS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceEpochStats {
    pub epoch: usize,
    /// Mean loss over all pairs, evaluated after the epoch (before training for epoch 0).
    pub loss: f64,
    /// Mean implicit reward margin inside the sigmoid.
    pub margin: f64,
    /// Mean `log p(chosen) - log p(rejected)` under the policy.
    pub logprob_margin: f64,
}

pub(crate) struct PairSeqs {
    chosen: Sequence,
    rejected: Sequence,
    ref_chosen: f64,
    ref_rejected: f64,
}

fn sum_logprob(model: &PolicyModel, seq: &Sequence) -> Result<f64> {
    Ok(model.token_logprobs(seq)?.iter().sum())
}

/// Pairs whose sequences no longer fit into the context (lossy decoding can
/// lengthen a sample) are skipped with a warning.
pub(crate) fn prepare(policy: &PolicyModel, reference: Option<&PolicyModel>, pairs: &[PreferencePair]) -> Result<Vec<PairSeqs>> {
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        let prompt = p.prompt.render(policy)?;
        let seqs = policy
            .sequence(&prompt, &p.chosen, true)
            .and_then(|c| policy.sequence(&prompt, &p.rejected, true).map(|r| (c, r)));
        let (chosen, rejected) = match seqs {
            Ok(s) => s,
            Err(Error::ContextOverflow { len, context, .. }) => {
                log::warn!("pair for prompt {} has {len} tokens, context is {context}; skipped", p.prompt.id);
                continue;
            }
            Err(e) => return Err(e),
        };
        let (ref_chosen, ref_rejected) = match reference {
            Some(r) => (sum_logprob(r, &chosen)?, sum_logprob(r, &rejected)?),
            None => (0.0, 0.0),
        };
        out.push(PairSeqs {
            chosen,
            rejected,
            ref_chosen,
            ref_rejected,
        });
    }
    Ok(out)
}

fn pair_loss(algo: Algo, config: &PoConfig, s: &PairSeqs, lp_w: f64, lp_l: f64) -> Result<PairLoss> {
    match algo {
        Algo::Dpo => dpo(lp_w, lp_l, s.ref_chosen, s.ref_rejected, config.beta),
        Algo::Cpo => cpo(lp_w, lp_l, config.beta, config.nll_weight, s.chosen.completion_steps().len()),
        Algo::Ppo => Err(Error::Config("PPO is not a preference algorithm".into())),
    }
}

/// Batch-mean loss; accumulates its gradient into `grads`.
pub(crate) fn batch_gradient(
    policy: &PolicyModel,
    algo: Algo,
    config: &PoConfig,
    batch: &[&PairSeqs],
    grads: &mut [f64],
) -> Result<f64> {
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for s in batch {
        let fw = policy.transformer.forward(&s.chosen.input)?;
        let fl = policy.transformer.forward(&s.rejected.input)?;
        let lp = |seq: &Sequence, f: &crate::policy::model::ForwardPass| -> f64 {
            seq.completion_steps().map(|t| f.next_token_logp(&seq.input.tokens, t)).sum()
        };
        let l = pair_loss(algo, config, s, lp(&s.chosen, &fw), lp(&s.rejected, &fl))?;
        total += l.loss * scale;
        let ww: Vec<(usize, f64)> = s.chosen.completion_steps().map(|t| (t, l.d_chosen * scale)).collect();
        let wl: Vec<(usize, f64)> = s.rejected.completion_steps().map(|t| (t, l.d_rejected * scale)).collect();
        policy.transformer.logprob_backward(&s.chosen.input, &fw, &ww, None, grads);
        policy.transformer.logprob_backward(&s.rejected.input, &fl, &wl, None, grads);
    }
    Ok(total)
}

/// Mean DPO or CPO loss over `pairs` and its gradient with respect to the
/// flat parameter vector of `policy`.
pub fn preference_objective(
    algo: Algo,
    policy: &PolicyModel,
    reference: Option<&PolicyModel>,
    pairs: &[PreferencePair],
    config: &PoConfig,
) -> Result<(f64, Vec<f64>)> {
    let seqs = prepare(policy, reference, pairs)?;
    if seqs.is_empty() {
        return Err(Error::Data("no pairs fit the context".into()));
    }
    let batch: Vec<&PairSeqs> = seqs.iter().collect();
    let mut grads = vec![0.0; policy.transformer.n_params()];
    let loss = batch_gradient(policy, algo, config, &batch, &mut grads)?;
    Ok((loss, grads))
}

fn evaluate(policy: &PolicyModel, algo: Algo, config: &PoConfig, seqs: &[PairSeqs], epoch: usize) -> Result<PreferenceEpochStats> {
    let (mut loss, mut margin, mut lpm) = (0.0, 0.0, 0.0);
    for s in seqs {
        let lp_w = sum_logprob(policy, &s.chosen)?;
        let lp_l = sum_logprob(policy, &s.rejected)?;
        let l = pair_loss(algo, config, s, lp_w, lp_l)?;
        loss += l.loss;
        margin += l.margin;
        lpm += lp_w - lp_l;
    }
    let n = seqs.len() as f64;
    Ok(PreferenceEpochStats {
        epoch,
        loss: loss / n,
        margin: margin / n,
        logprob_margin: lpm / n,
    })
}

/// Trains `policy` in place on offline pairs. DPO needs a frozen reference;
/// CPO is reference-free and rejects one.
pub fn preference_train(
    algo: Algo,
    policy: &mut PolicyModel,
    reference: Option<&PolicyModel>,
    pairs: &[PreferencePair],
    config: &PoConfig,
    seed: u64,
) -> Result<Vec<PreferenceEpochStats>> {
    config.validate()?;
    match (algo, reference) {
        (Algo::Dpo, None) => return Err(Error::Config("DPO needs a frozen reference model".into())),
        (Algo::Cpo, Some(_)) => return Err(Error::Config("CPO is reference-free; no reference model expected".into())),
        (Algo::Ppo, _) => return Err(Error::Config("use ppo_train for PPO".into())),
        _ => {}
    }
    let seqs = prepare(policy, reference, pairs)?;
    if seqs.len() < MIN_PAIRS {
        return Err(Error::Data(format!(
            "preference training needs at least {MIN_PAIRS} pairs that fit the context, got {}",
            seqs.len()
        )));
    }
    let mut stats = vec![evaluate(policy, algo, config, &seqs, 0)?];
    let mut opt = Adam::new(policy.transformer.n_params(), config.learning_rate);
    let mut grads = vec![0.0; policy.transformer.n_params()];
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng_for(seed, &format!("{}/epoch{epoch}", algo.as_str())));
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PairSeqs> = chunk.iter().map(|&i| &seqs[i]).collect();
            grads.fill(0.0);
            let loss = batch_gradient(policy, algo, config, &batch, &mut grads)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { step: opt.steps() });
            }
            opt.step(&mut policy.transformer.params, &grads);
            if !policy.transformer.all_finite() {
                return Err(Error::Diverged { step: opt.steps() });
            }
        }
        let s = evaluate(policy, algo, config, &seqs, epoch)?;
        log::info!(
            "{} epoch {epoch}: loss {:.4} margin {:.4}",
            algo.as_str(),
            s.loss,
            s.margin
        );
        stats.push(s);
    }
    Ok(stats)
}
