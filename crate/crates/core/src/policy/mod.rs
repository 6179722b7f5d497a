//! The conditional text policy: tokenizer, transformer, prompt formats,
//! sampling and sequence scoring.

pub mod checkpoint;
pub mod generate;
pub mod model;
pub mod optim;
pub mod tokenizer;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

pub use generate::GenerationConfig;
pub use model::{ModelConfig, SeqInput, Transformer};
pub use tokenizer::{Tokenizer, EOS, N_SEGMENTS};
pub use train::TrainConfig;

/// Default number of exemplars per target author in individual mode.
pub const DEFAULT_EXEMPLARS: usize = 5;

/// How a policy is conditioned on the target style.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyMode {
    /// `[SRC]y[/SRC]`; paraphrasers and per-style transfer models.
    Plain,
    /// `[REF]e[/REF]`... then `[SRC]y[/SRC]`.
    Individual { n_exemplars: usize },
    /// `<sty:s>[SRC]y[/SRC]` with one control token per style.
    Community,
}

impl PolicyMode {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyMode::Plain => "plain",
            PolicyMode::Individual { .. } => "individual",
            PolicyMode::Community => "community",
        }
    }

    pub fn format_prompt(
        &self,
        neutral: &str,
        target_style: Option<&str>,
        exemplars: &[String],
    ) -> Result<String> {
        Tokenizer::check_plain(neutral)?;
        let src = format!("[SRC]{neutral}[/SRC]");
        match self {
            PolicyMode::Plain => Ok(src),
            PolicyMode::Individual { .. } => {
                if exemplars.is_empty() {
                    return Err(Error::Data("individual mode needs at least one exemplar".into()));
                }
                let mut out = String::new();
                for e in exemplars {
                    Tokenizer::check_plain(e)?;
                    out.push_str("[REF]");
                    out.push_str(e);
                    out.push_str("[/REF]");
                }
                out.push_str(&src);
                Ok(out)
            }
            PolicyMode::Community => {
                let style = target_style
                    .ok_or_else(|| Error::Data("community mode needs a target style".into()))?;
                Ok(format!("{}{src}", Tokenizer::style_marker(style)))
            }
        }
    }
}

/// A transformer together with its tokenizer and prompt format.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    pub transformer: Transformer,
    pub tokenizer: Tokenizer,
    pub mode: PolicyMode,
}

/// A prompt plus completion laid out for the transformer.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub input: SeqInput,
    /// Index of the first completion token.
    pub prompt_len: usize,
}

impl Sequence {
    /// Positions `t` whose next-token prediction is a completion token.
    pub fn completion_steps(&self) -> std::ops::Range<usize> {
        self.prompt_len - 1..self.input.len() - 1
    }
}

impl PolicyModel {
    pub fn init(tokenizer: Tokenizer, mode: PolicyMode, config: &TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if mode == PolicyMode::Community && tokenizer.styles().is_empty() {
            return Err(Error::Config("community mode needs a style vocabulary".into()));
        }
        let model_config = ModelConfig {
            vocab_size: tokenizer.vocab_size(),
            d_model: config.d_model,
            n_layers: config.n_layers,
            n_heads: config.n_heads,
            context_length: config.context_length,
            n_segments: N_SEGMENTS,
        };
        let mut rng = rng_for(seed, "policy/init");
        Ok(PolicyModel {
            transformer: Transformer::init(model_config, &mut rng)?,
            tokenizer,
            mode,
        })
    }

    pub fn context_length(&self) -> usize {
        self.transformer.config.context_length
    }

    /// Formats a prompt, checking community styles against the vocabulary.
    pub fn format_prompt(&self, neutral: &str, target_style: Option<&str>, exemplars: &[String]) -> Result<String> {
        if self.mode == PolicyMode::Community {
            let style = target_style
                .ok_or_else(|| Error::Data("community mode needs a target style".into()))?;
            self.tokenizer.style_token(style)?;
        }
        let exemplars = match self.mode {
            PolicyMode::Individual { n_exemplars } => &exemplars[..exemplars.len().min(n_exemplars)],
            _ => exemplars,
        };
        self.mode.format_prompt(neutral, target_style, exemplars)
    }

    /// Prompt tokens followed by the completion's bytes and, optionally, EOS.
    pub fn sequence_from_tokens(&self, prompt: &[u32], completion: &[u32], with_eos: bool) -> Result<Sequence> {
        let mut tokens = prompt.to_vec();
        tokens.extend_from_slice(completion);
        if with_eos {
            tokens.push(EOS);
        }
        if tokens.len() > self.context_length() {
            return Err(Error::ContextOverflow {
                id: None,
                len: tokens.len(),
                context: self.context_length(),
            });
        }
        let (positions, segments) = Tokenizer::layout(&tokens);
        Ok(Sequence {
            input: SeqInput {
                tokens,
                positions,
                segments,
            },
            prompt_len: prompt.len(),
        })
    }

    /// Completion text is taken as raw bytes; marker-like substrings are not special.
    pub fn sequence(&self, prompt: &str, completion: &str, with_eos: bool) -> Result<Sequence> {
        let p = self.tokenizer.encode_prompt(prompt)?;
        let c: Vec<u32> = completion.bytes().map(u32::from).collect();
        self.sequence_from_tokens(&p, &c, with_eos)
    }

    /// Per-token log-probabilities of the completion (and EOS when requested).
    pub fn token_logprobs(&self, seq: &Sequence) -> Result<Vec<f64>> {
        let fwd = self.transformer.forward(&seq.input)?;
        Ok(seq
            .completion_steps()
            .map(|t| fwd.next_token_logp(&seq.input.tokens, t))
            .collect())
    }

    /// `sum_i log p(c_i | prompt, c_<i)` over the completion's tokens.
    pub fn sequence_logprob(&self, prompt: &str, completion: &str) -> Result<f64> {
        let seq = self.sequence(prompt, completion, false)?;
        if seq.prompt_len == seq.input.len() {
            return Ok(0.0);
        }
        Ok(self.token_logprobs(&seq)?.iter().sum())
    }

    /// Same as [`Self::sequence_logprob`] but also scores the end token.
    pub fn sequence_logprob_eos(&self, prompt: &str, completion: &str) -> Result<f64> {
        let seq = self.sequence(prompt, completion, true)?;
        Ok(self.token_logprobs(&seq)?.iter().sum())
    }

    pub fn generate(&self, prompt: &str, gen: &GenerationConfig) -> Result<String> {
        let out = self.generate_tokens(prompt, gen)?;
        Ok(self.tokenizer.decode(&out))
    }

    /// Sampled completion tokens, excluding the end token.
    pub fn generate_tokens(&self, prompt: &str, gen: &GenerationConfig) -> Result<Vec<u32>> {
        let tokens = self.tokenizer.encode_prompt(prompt)?;
        generate::sample(self, &tokens, gen).map(|s| s.tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            context_length: 48,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn prompt_formats() {
        let ind = PolicyMode::Individual { n_exemplars: 5 };
        assert_eq!(
            ind.format_prompt("y", None, &["e1".into(), "e2".into()]).unwrap(),
            "[REF]e1[/REF][REF]e2[/REF][SRC]y[/SRC]"
        );
        assert!(ind.format_prompt("y", None, &[]).is_err());
        assert_eq!(
            PolicyMode::Community.format_prompt("y", Some("lower"), &[]).unwrap(),
            "<sty:lower>[SRC]y[/SRC]"
        );
        assert_eq!(PolicyMode::Plain.format_prompt("y", None, &[]).unwrap(), "[SRC]y[/SRC]");
        assert!(PolicyMode::Plain.format_prompt("[SRC]", None, &[]).is_err());
    }

    #[test]
    fn community_style_must_be_known() {
        let tok = Tokenizer::new(vec!["lower".into()]);
        let m = PolicyModel::init(tok, PolicyMode::Community, &tiny_train_config(), 0).unwrap();
        assert!(m.format_prompt("y", Some("lower"), &[]).is_ok());
        assert!(matches!(
            m.format_prompt("y", Some("shout"), &[]),
            Err(Error::UnknownStyle(_))
        ));
    }

    #[test]
    fn empty_completion_scores_zero() {
        let m = PolicyModel::init(Tokenizer::new(vec![]), PolicyMode::Plain, &tiny_train_config(), 0).unwrap();
        assert_eq!(m.sequence_logprob("[SRC]abc[/SRC]", "").unwrap(), 0.0);
    }

    #[test]
    fn constant_logits_give_uniform_logprob() {
        let mut m = PolicyModel::init(Tokenizer::new(vec![]), PolicyMode::Plain, &tiny_train_config(), 0).unwrap();
        let idx = m.transformer.index().clone();
        for (name, off, shape) in &idx.tensors {
            if name.starts_with("head.") {
                let n: usize = shape.iter().product();
                m.transformer.params[*off..off + n].fill(0.0);
            }
        }
        let v = m.tokenizer.vocab_size() as f64;
        let c = "hello there";
        let lp = m.sequence_logprob("[SRC]abc[/SRC]", c).unwrap();
        assert!((lp - c.len() as f64 * (1.0 / v).ln()).abs() < 1e-6);
    }

    #[test]
    fn logprobs_are_additive_and_nonpositive() {
        let m = PolicyModel::init(Tokenizer::new(vec![]), PolicyMode::Plain, &tiny_train_config(), 3).unwrap();
        let seq = m.sequence("[SRC]ab[/SRC]", "xyz", false).unwrap();
        let per = m.token_logprobs(&seq).unwrap();
        assert_eq!(per.len(), 3);
        assert!(per.iter().all(|v| *v <= 0.0));
        let total = m.sequence_logprob("[SRC]ab[/SRC]", "xyz").unwrap();
        assert!((per.iter().sum::<f64>() - total).abs() < 1e-12);
        let with_eos = m.sequence_logprob_eos("[SRC]ab[/SRC]", "xyz").unwrap();
        assert!(with_eos < total);
    }

    #[test]
    fn overflow_is_reported() {
        let m = PolicyModel::init(Tokenizer::new(vec![]), PolicyMode::Plain, &tiny_train_config(), 0).unwrap();
        let long = "a".repeat(60);
        assert!(matches!(
            m.sequence_logprob(&format!("[SRC]{long}[/SRC]"), "b"),
            Err(Error::ContextOverflow { .. })
        ));
    }
}
