//! Policy optimization: the shifted-target prompt set, offline candidate
//! generation and preference pairs, and the PPO, DPO and CPO trainers.

pub mod losses;
pub mod ppo;
pub mod preference;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paraphraser::{read_jsonl, write_jsonl, TransferExample};
use crate::policy::generate::sample;
use crate::policy::train::ExemplarPool;
use crate::policy::{GenerationConfig, PolicyMode, PolicyModel};
use crate::reward::{total_reward, RewardBackend, RewardBreakdown, RewardConfig, StyleRef};
use crate::seed::derive_seed;

pub use losses::{cpo_loss, dpo_loss};
pub use ppo::{ppo_train, surrogate_objective, PpoConfig, PpoStepStats, SurrogateInput};
pub use preference::{preference_objective, preference_train, PreferenceEpochStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Ppo,
    Dpo,
    Cpo,
}

impl Algo {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algo::Ppo => "ppo",
            Algo::Dpo => "dpo",
            Algo::Cpo => "cpo",
        }
    }
}

impl std::str::FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ppo" => Ok(Algo::Ppo),
            "dpo" => Ok(Algo::Dpo),
            "cpo" => Ok(Algo::Cpo),
            other => Err(Error::Config(format!("unknown algorithm {other:?}"))),
        }
    }
}

/// A neutral text with a target style different from its own.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoPrompt {
    pub id: String,
    pub neutral_text: String,
    pub source_style: String,
    pub target_style: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exemplars: Option<Vec<String>>,
}

impl PoPrompt {
    pub fn render(&self, model: &PolicyModel) -> Result<String> {
        let ex = self.exemplars.as_deref().unwrap_or(&[]);
        model.format_prompt(&self.neutral_text, Some(&self.target_style), ex)
    }

    pub fn reward(&self, out: &str, backend: &RewardBackend, config: &RewardConfig) -> Result<RewardBreakdown> {
        total_reward(
            out,
            &self.neutral_text,
            StyleRef::Id(&self.source_style),
            StyleRef::Id(&self.target_style),
            backend,
            config,
        )
    }
}

/// Each prompt keeps its neutral text and takes the style of the next example,
/// skipping ahead past examples that share its own style. Gold outputs are dropped.
pub fn build_po_dataset(examples: &[TransferExample]) -> Result<Vec<PoPrompt>> {
    let n = examples.len();
    let distinct: std::collections::BTreeSet<&str> = examples.iter().map(|e| e.target_style.as_str()).collect();
    if distinct.len() < 2 {
        return Err(Error::Data("shifting targets needs at least two distinct styles".into()));
    }
    Ok(examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let mut j = (i + 1) % n;
            while examples[j].target_style == e.target_style {
                j = (j + 1) % n;
            }
            PoPrompt {
                id: e.id.clone(),
                neutral_text: e.prompt_neutral.clone(),
                source_style: e.target_style.clone(),
                target_style: examples[j].target_style.clone(),
                exemplars: None,
            }
        })
        .collect())
}

/// Fills in target-style exemplars for individual-mode policies.
pub fn attach_exemplars(prompts: &mut [PoPrompt], mode: PolicyMode, pool: &ExemplarPool, seed: u64) -> Result<()> {
    if let PolicyMode::Individual { n_exemplars } = mode {
        for p in prompts.iter_mut() {
            let key = format!("po/{}", p.id);
            p.exemplars = Some(pool.draw(&p.target_style, &p.id, n_exemplars, seed, &key)?);
        }
    }
    Ok(())
}

/// Raw sampled candidates keyed by prompt id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub candidates: BTreeMap<String, Vec<String>>,
    /// Prompts that did not fit into the context.
    pub skipped: Vec<String>,
}

/// `k` samples per prompt; the j-th sample of prompt `id` is seeded from
/// `(seed, id, j)` so results do not depend on prompt order.
pub fn generate_candidates(
    model: &PolicyModel,
    prompts: &[PoPrompt],
    k: usize,
    gen: &GenerationConfig,
    seed: u64,
) -> Result<CandidateSet> {
    if k < 2 {
        return Err(Error::Config("pair building needs at least two candidates per prompt".into()));
    }
    let mut set = CandidateSet::default();
    for p in prompts {
        let prompt = p.render(model)?;
        let tokens = model.tokenizer.encode_prompt(&prompt)?;
        let mut outs = Vec::with_capacity(k);
        for j in 0..k {
            let g = gen.with_seed(derive_seed(seed, &format!("candidates/{}/{j}", p.id)));
            match sample(model, &tokens, &g) {
                Ok(s) => outs.push(model.tokenizer.decode(&s.tokens)),
                Err(Error::ContextOverflow { .. }) => break,
                Err(e) => return Err(e),
            }
        }
        if outs.len() < k {
            log::warn!("prompt {} does not fit into the context; skipped", p.id);
            set.skipped.push(p.id.clone());
        } else {
            set.candidates.insert(p.id.clone(), outs);
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: PoPrompt,
    pub chosen: String,
    pub rejected: String,
    pub reward_chosen: f64,
    pub reward_rejected: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairStats {
    pub prompts: usize,
    pub pairs: usize,
    pub skipped_identical: usize,
    pub skipped_margin: usize,
    pub skipped_missing: usize,
}

/// Best-versus-worst pairs by total reward. Prompts whose candidates are all
/// identical, or whose reward gap is below `margin`, are skipped.
pub fn build_preference_pairs(
    prompts: &[PoPrompt],
    candidates: &CandidateSet,
    backend: &RewardBackend,
    config: &RewardConfig,
    margin: f64,
) -> Result<(Vec<PreferencePair>, PairStats)> {
    let mut stats = PairStats {
        prompts: prompts.len(),
        ..PairStats::default()
    };
    let mut pairs = Vec::new();
    for p in prompts {
        let Some(cands) = candidates.candidates.get(&p.id) else {
            stats.skipped_missing += 1;
            continue;
        };
        if cands.len() < 2 || cands.iter().all(|c| *c == cands[0]) {
            stats.skipped_identical += 1;
            continue;
        }
        let rewards = cands
            .iter()
            .map(|c| p.reward(c, backend, config).map(|r| r.total))
            .collect::<Result<Vec<f64>>>()?;
        match select_pair(&rewards, margin) {
            Some((w, l)) => pairs.push(PreferencePair {
                prompt: p.clone(),
                chosen: cands[w].clone(),
                rejected: cands[l].clone(),
                reward_chosen: rewards[w],
                reward_rejected: rewards[l],
            }),
            None => stats.skipped_margin += 1,
        }
    }
    stats.pairs = pairs.len();
    Ok((pairs, stats))
}

/// Indices of the first maximum and first minimum, if their gap reaches `margin`.
pub fn select_pair(rewards: &[f64], margin: f64) -> Option<(usize, usize)> {
    if rewards.len() < 2 {
        return None;
    }
    let mut best = 0;
    let mut worst = 0;
    for (i, &r) in rewards.iter().enumerate() {
        if r > rewards[best] {
            best = i;
        }
        if r < rewards[worst] {
            worst = i;
        }
    }
    let gap = rewards[best] - rewards[worst];
    (best != worst && gap >= margin && gap > 0.0).then_some((best, worst))
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    prompt_id: String,
    neutral: String,
    source_style: String,
    target_style: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    exemplars: Option<Vec<String>>,
    chosen: String,
    rejected: String,
    reward_chosen: f64,
    reward_rejected: f64,
}

pub fn write_pairs(path: &Path, pairs: &[PreferencePair]) -> Result<()> {
    let records: Vec<PairRecord> = pairs
        .iter()
        .map(|p| PairRecord {
            prompt_id: p.prompt.id.clone(),
            neutral: p.prompt.neutral_text.clone(),
            source_style: p.prompt.source_style.clone(),
            target_style: p.prompt.target_style.clone(),
            exemplars: p.prompt.exemplars.clone(),
            chosen: p.chosen.clone(),
            rejected: p.rejected.clone(),
            reward_chosen: p.reward_chosen,
            reward_rejected: p.reward_rejected,
        })
        .collect();
    write_jsonl(path, &records)
}

pub fn read_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    let records: Vec<PairRecord> = read_jsonl(path)?;
    Ok(records
        .into_iter()
        .map(|r| PreferencePair {
            prompt: PoPrompt {
                id: r.prompt_id,
                neutral_text: r.neutral,
                source_style: r.source_style,
                target_style: r.target_style,
                exemplars: r.exemplars,
            },
            chosen: r.chosen,
            rejected: r.rejected,
            reward_chosen: r.reward_chosen,
            reward_rejected: r.reward_rejected,
        })
        .collect())
}

/// Settings shared by the three trainers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoConfig {
    pub algo: Algo,
    /// KL coefficient for PPO, beta for DPO and CPO.
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub candidates_per_prompt: usize,
    pub pair_margin: f64,
    /// Weight of the length-normalized likelihood term in CPO.
    pub nll_weight: f64,
    pub gen: GenerationConfig,
    pub reward: RewardConfig,
    pub ppo: PpoConfig,
}

impl Default for PoConfig {
    fn default() -> Self {
        PoConfig::desk(Algo::Dpo)
    }
}

impl PoConfig {
    /// Settings for a small from-scratch policy. Coefficients and sampling
    /// follow the published defaults; step sizes are larger.
    pub fn desk(algo: Algo) -> Self {
        let (beta, learning_rate) = match algo {
            Algo::Ppo => (0.2, 1e-4),
            Algo::Dpo => (0.5, 5e-5),
            Algo::Cpo => (0.1, 5e-5),
        };
        PoConfig {
            algo,
            beta,
            learning_rate,
            epochs: 6,
            batch_size: 16,
            candidates_per_prompt: 4,
            pair_margin: 0.05,
            nll_weight: 1.0,
            gen: GenerationConfig::rollout(0),
            reward: RewardConfig::default(),
            ppo: PpoConfig::default(),
        }
    }

    /// The published settings for fine-tuning a large pretrained policy.
    pub fn pretrained_preset(algo: Algo) -> Self {
        let (learning_rate, batch_size) = match algo {
            Algo::Ppo => (1.41e-5, 32),
            Algo::Dpo | Algo::Cpo => (2e-6, 32),
        };
        PoConfig {
            learning_rate,
            batch_size,
            ..PoConfig::desk(algo)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("beta must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.pair_margin < 0.0 || self.nll_weight < 0.0 {
            return Err(Error::Config("pair_margin and nll_weight must be non-negative".into()));
        }
        self.gen.validate()?;
        self.reward.validate()?;
        self.ppo.validate()
    }
}
