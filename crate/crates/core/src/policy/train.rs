//! Supervised fine-tuning with the loss masked to the completion span.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::optim::Adam;
use super::{PolicyMode, PolicyModel, Tokenizer};
use crate::error::{Error, Result};
use crate::paraphraser::TransferExample;
use crate::seed::rng_for;

/// Minimum number of examples accepted by [`train_sft`].
pub const MIN_SFT_EXAMPLES: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub context_length: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Share of examples held out for validation loss.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// Defaults for a from-scratch byte-level model.
    pub fn desk() -> Self {
        TrainConfig {
            learning_rate: 2e-3,
            batch_size: 8,
            epochs: 8,
            context_length: 192,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            val_fraction: 0.1,
        }
    }

    /// Optimizer settings used for fine-tuning a large pretrained model
    /// (lr 5e-5, batch 32, 6 epochs). Too small a step size for random init.
    pub fn pretrained_preset() -> Self {
        TrainConfig {
            learning_rate: 5e-5,
            batch_size: 32,
            epochs: 6,
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("context_length", self.context_length),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config("d_model must be divisible by n_heads".into()));
        }
        Ok(())
    }
}

/// One tokenized prompt/target pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SftExample {
    pub id: String,
    pub prompt: Vec<u32>,
    /// Target bytes; the end token is appended during training.
    pub target: Vec<u32>,
}

impl SftExample {
    pub fn new(tokenizer: &Tokenizer, id: &str, prompt: &str, target: &str) -> Result<Self> {
        Ok(SftExample {
            id: id.to_string(),
            prompt: tokenizer.encode_prompt(prompt)?,
            target: target.bytes().map(u32::from).collect(),
        })
    }

    /// Tokens including the end token.
    pub fn len(&self) -> usize {
        self.prompt.len() + self.target.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-token loss over the epoch's batches; absent before training.
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub steps: u64,
}

/// Splits off a `fraction` share (at least one item when non-zero) for validation.
pub fn holdout<T, R: Rng>(mut items: Vec<T>, fraction: f64, rng: &mut R) -> (Vec<T>, Vec<T>) {
    items.shuffle(rng);
    let n_val = if fraction > 0.0 {
        ((items.len() as f64 * fraction).round() as usize).clamp(1, items.len().saturating_sub(1))
    } else {
        0
    };
    let train = items.split_off(n_val);
    (train, items)
}

/// Mean masked cross-entropy per target token; also returns the token count.
fn example_loss(model: &PolicyModel, ex: &SftExample) -> Result<(f64, usize)> {
    let seq = model.sequence_from_tokens(&ex.prompt, &ex.target, true)?;
    let lps = model.token_logprobs(&seq)?;
    Ok((-lps.iter().sum::<f64>(), lps.len()))
}

/// Mean per-token loss over a set of examples.
pub fn evaluate_loss(model: &PolicyModel, examples: &[SftExample]) -> Result<Option<f64>> {
    if examples.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    let mut count = 0;
    for ex in examples {
        let (l, n) = example_loss(model, ex)?;
        total += l;
        count += n;
    }
    Ok(Some(total / count as f64))
}

/// Accumulates the gradient of the batch-mean token loss; returns that loss.
pub(crate) fn sft_batch_gradient(model: &PolicyModel, batch: &[&SftExample], grads: &mut [f64]) -> Result<f64> {
    let n_tok: usize = batch.iter().map(|e| e.target.len() + 1).sum();
    let w = -1.0 / n_tok as f64;
    let mut loss = 0.0;
    for ex in batch {
        let seq = model.sequence_from_tokens(&ex.prompt, &ex.target, true)?;
        let fwd = model.transformer.forward(&seq.input)?;
        let weights: Vec<(usize, f64)> = seq.completion_steps().map(|t| (t, w)).collect();
        for &(t, _) in &weights {
            loss -= fwd.next_token_logp(&seq.input.tokens, t);
        }
        model.transformer.logprob_backward(&seq.input, &fwd, &weights, None, grads);
    }
    Ok(loss / n_tok as f64)
}

/// Mean token cross-entropy over the completions of `examples` and its
/// gradient with respect to the flat parameter vector.
pub fn sft_objective(model: &PolicyModel, examples: &[SftExample]) -> Result<(f64, Vec<f64>)> {
    if examples.is_empty() {
        return Err(Error::Data("no examples".into()));
    }
    let mut grads = vec![0.0; model.transformer.n_params()];
    let batch: Vec<&SftExample> = examples.iter().collect();
    let loss = sft_batch_gradient(model, &batch, &mut grads)?;
    Ok((loss, grads))
}

/// Trains in place. Returns one log entry per epoch plus an initial entry.
pub fn train_policy(
    model: &mut PolicyModel,
    train: &[SftExample],
    val: &[SftExample],
    config: &TrainConfig,
    seed: u64,
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no training examples".into()));
    }
    check_context(train, model.context_length())?;
    check_context(val, model.context_length())?;
    let mut opt = Adam::new(model.transformer.n_params(), config.learning_rate);
    let mut grads = vec![0.0; model.transformer.n_params()];
    let mut log = vec![EpochLog {
        epoch: 0,
        train_loss: None,
        val_loss: evaluate_loss(model, val)?,
        steps: 0,
    }];
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng_for(seed, &format!("sft/epoch{epoch}")));
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&SftExample> = chunk.iter().map(|&i| &train[i]).collect();
            grads.fill(0.0);
            let loss = sft_batch_gradient(model, &batch, &mut grads)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { step: opt.steps() });
            }
            opt.step(&mut model.transformer.params, &grads);
            if !model.transformer.all_finite() {
                return Err(Error::Diverged { step: opt.steps() });
            }
            epoch_loss += loss;
            n_batches += 1;
        }
        let entry = EpochLog {
            epoch,
            train_loss: Some(epoch_loss / n_batches as f64),
            val_loss: evaluate_loss(model, val)?,
            steps: opt.steps(),
        };
        log::info!(
            "epoch {epoch}: train {:.4} val {:?}",
            entry.train_loss.unwrap_or(f64::NAN),
            entry.val_loss
        );
        log.push(entry);
    }
    Ok(log)
}

/// Texts grouped by style, used to draw exemplars for individual mode.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExemplarPool {
    by_style: BTreeMap<String, Vec<(String, String)>>,
}

impl ExemplarPool {
    pub fn new() -> Self {
        ExemplarPool::default()
    }

    pub fn add(&mut self, style: &str, id: &str, text: &str) {
        self.by_style
            .entry(style.to_string())
            .or_default()
            .push((id.to_string(), text.to_string()));
    }

    pub fn from_examples(examples: &[TransferExample]) -> Self {
        let mut pool = ExemplarPool::new();
        for e in examples {
            pool.add(&e.target_style, &e.id, &e.target_text);
        }
        pool
    }

    pub fn contains(&self, style: &str) -> bool {
        self.by_style.contains_key(style)
    }

    /// Up to `n` texts of `style` other than `exclude_id`, chosen by `key`.
    pub fn draw(&self, style: &str, exclude_id: &str, n: usize, seed: u64, key: &str) -> Result<Vec<String>> {
        let texts = self
            .by_style
            .get(style)
            .ok_or_else(|| Error::UnknownStyle(style.to_string()))?;
        let mut candidates: Vec<&String> = texts
            .iter()
            .filter(|(id, _)| id != exclude_id)
            .map(|(_, t)| t)
            .collect();
        if candidates.is_empty() {
            return Err(Error::Data(format!("no exemplars available for style {style}")));
        }
        candidates.shuffle(&mut rng_for(seed, &format!("exemplars/{key}")));
        Ok(candidates.into_iter().take(n).cloned().collect())
    }
}

/// Formats the SFT prompt for one transfer example under `mode`.
pub fn transfer_prompt(
    mode: PolicyMode,
    example: &TransferExample,
    pool: &ExemplarPool,
    seed: u64,
) -> Result<String> {
    let exemplars = match mode {
        PolicyMode::Individual { n_exemplars } => {
            pool.draw(&example.target_style, &example.id, n_exemplars, seed, &example.id)?
        }
        _ => Vec::new(),
    };
    mode.format_prompt(&example.prompt_neutral, Some(&example.target_style), &exemplars)
}

/// Tokenizer matching `mode`: community mode adds one token per style.
pub fn tokenizer_for(mode: PolicyMode, styles: &[String]) -> Tokenizer {
    match mode {
        PolicyMode::Community => Tokenizer::new(styles.to_vec()),
        _ => Tokenizer::new(Vec::new()),
    }
}

/// Trains the reference transfer model `p(x | y, s)` from scratch.
pub fn train_sft(
    examples: &[TransferExample],
    mode: PolicyMode,
    config: &TrainConfig,
    seed: u64,
) -> Result<(PolicyModel, Vec<EpochLog>)> {
    if examples.len() < MIN_SFT_EXAMPLES {
        return Err(Error::Data(format!(
            "transfer training needs at least {MIN_SFT_EXAMPLES} examples, got {}",
            examples.len()
        )));
    }
    let styles: Vec<String> = examples
        .iter()
        .map(|e| e.target_style.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let tokenizer = tokenizer_for(mode, &styles);
    let pool = ExemplarPool::from_examples(examples);
    let sft = examples
        .iter()
        .map(|e| {
            let prompt = transfer_prompt(mode, e, &pool, seed)?;
            SftExample::new(&tokenizer, &e.id, &prompt, &e.target_text)
        })
        .collect::<Result<Vec<_>>>()?;
    let (train, val) = holdout(sft, config.val_fraction, &mut rng_for(seed, "sft/split"));
    let mut model = PolicyModel::init(tokenizer, mode, config, seed)?;
    let log = train_policy(&mut model, &train, &val, config, seed)?;
    Ok((model, log))
}

/// Trains one plain-prompt model per target style.
pub fn train_per_style(
    examples: &[TransferExample],
    config: &TrainConfig,
    seed: u64,
) -> Result<BTreeMap<String, (PolicyModel, Vec<EpochLog>)>> {
    let mut groups: BTreeMap<String, Vec<TransferExample>> = BTreeMap::new();
    for e in examples {
        groups.entry(e.target_style.clone()).or_default().push(e.clone());
    }
    if groups.len() < 2 {
        return Err(Error::Data("per-style training needs at least two styles".into()));
    }
    groups
        .into_iter()
        .map(|(style, group)| {
            let style_seed = crate::seed::derive_seed(seed, &format!("style/{style}"));
            train_sft(&group, PolicyMode::Plain, config, style_seed).map(|r| (style, r))
        })
        .collect()
}

/// Checks that no example exceeds the context; the error names the offender.
pub fn check_context(examples: &[SftExample], context: usize) -> Result<()> {
    match examples.iter().find(|e| e.len() > context) {
        Some(e) => Err(Error::ContextOverflow {
            id: Some(e.id.clone()),
            len: e.len(),
            context,
        }),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::model::standard_normal;
    use crate::policy::tests::tiny_train_config;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn examples(n: usize) -> Vec<TransferExample> {
        (0..n)
            .map(|i| {
                let style = if i % 2 == 0 { "lower" } else { "shout" };
                let neutral = format!("It is {i}.");
                let target = if style == "lower" {
                    neutral.to_lowercase()
                } else {
                    neutral.to_uppercase().replace('.', "!")
                };
                TransferExample {
                    id: format!("e{i}"),
                    prompt_neutral: neutral,
                    target_text: target,
                    target_style: style.into(),
                }
            })
            .collect()
    }

    #[test]
    fn holdout_partitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = holdout((0..20).collect::<Vec<_>>(), 0.1, &mut rng);
        assert_eq!((a.len(), b.len()), (18, 2));
        let mut all: Vec<_> = a.into_iter().chain(b).collect();
        all.sort();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn sft_reduces_validation_loss_and_is_deterministic() {
        let config = TrainConfig {
            epochs: 3,
            learning_rate: 3e-3,
            ..tiny_train_config()
        };
        let data = examples(60);
        let (m1, log) = train_sft(&data, PolicyMode::Community, &config, 0).unwrap();
        let first = log.first().unwrap().val_loss.unwrap();
        let last = log.last().unwrap().val_loss.unwrap();
        assert!(last < first, "{first} -> {last}");
        let (m2, _) = train_sft(&data, PolicyMode::Community, &config, 0).unwrap();
        assert_eq!(m1.transformer.params, m2.transformer.params);
    }

    #[test]
    fn overflow_names_the_example() {
        let mut data = examples(60);
        data[7].target_text = "x".repeat(100);
        match train_sft(&data, PolicyMode::Community, &tiny_train_config(), 0) {
            Err(Error::ContextOverflow { id, .. }) => assert_eq!(id.as_deref(), Some("e7")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn too_few_examples() {
        assert!(matches!(
            train_sft(&examples(10), PolicyMode::Community, &tiny_train_config(), 0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn individual_prompts_use_other_texts_of_the_target() {
        let data = examples(10);
        let pool = ExemplarPool::from_examples(&data);
        let p = transfer_prompt(PolicyMode::Individual { n_exemplars: 2 }, &data[0], &pool, 0).unwrap();
        assert_eq!(p.matches("[REF]").count(), 2);
        assert!(!p.contains(&format!("[REF]{}[/REF]", data[0].target_text)));
        assert!(p.ends_with("[SRC]It is 0.[/SRC]"));
    }

    #[test]
    fn masked_cross_entropy_gradient_matches_finite_differences() {
        let config = TrainConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            context_length: 24,
            ..TrainConfig::desk()
        };
        let mut model = PolicyModel::init(Tokenizer::new(vec![]), PolicyMode::Plain, &config, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for p in model.transformer.params.iter_mut() {
            *p += 0.1 * standard_normal(&mut rng);
        }
        let tok = model.tokenizer.clone();
        let a = SftExample::new(&tok, "a", "[SRC]ab[/SRC]", "AB").unwrap();
        let b = SftExample::new(&tok, "b", "[SRC]xyz[/SRC]", "q").unwrap();
        let batch = vec![&a, &b];
        let mut grads = vec![0.0; model.transformer.n_params()];
        sft_batch_gradient(&model, &batch, &mut grads).unwrap();
        let loss = |m: &PolicyModel| {
            let mut g = vec![0.0; m.transformer.n_params()];
            sft_batch_gradient(m, &batch, &mut g).unwrap()
        };
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for i in (0..model.transformer.n_params()).step_by(3) {
            let orig = model.transformer.params[i];
            model.transformer.params[i] = orig + eps;
            let up = loss(&model);
            model.transformer.params[i] = orig - eps;
            let down = loss(&model);
            model.transformer.params[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            worst = worst.max((fd - grads[i]).abs() / (fd.abs() + grads[i].abs()).max(1e-6));
        }
        assert!(worst <= 1e-4, "max relative error {worst}");
    }
}
