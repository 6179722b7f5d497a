//! Nucleus sampling with a key/value cache.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::tokenizer::{Layout, SRC_OPEN, EOS, N_BYTES};
use super::PolicyModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub top_p: f64,
    pub temperature: f64,
    /// Defaults to twice the length of the source span.
    pub max_new_tokens: Option<usize>,
    pub seed: u64,
    /// Argmax decoding; the zero-temperature limit.
    pub greedy: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig::inference(0)
    }
}

impl GenerationConfig {
    /// Inference settings: top_p 1.0, temperature 0.7.
    pub fn inference(seed: u64) -> Self {
        GenerationConfig {
            top_p: 1.0,
            temperature: 0.7,
            max_new_tokens: None,
            seed,
            greedy: false,
        }
    }

    /// Rollout settings for policy optimization: top_p 1.0, temperature 1.0.
    pub fn rollout(seed: u64) -> Self {
        GenerationConfig {
            temperature: 1.0,
            ..GenerationConfig::inference(seed)
        }
    }

    pub fn greedy() -> Self {
        GenerationConfig {
            greedy: true,
            ..GenerationConfig::inference(0)
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        GenerationConfig { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Byte tokens after the last `[SRC]`, the length of the text being rewritten.
fn source_len(prompt: &[u32]) -> usize {
    let start = prompt.iter().rposition(|&t| t == SRC_OPEN).map_or(0, |i| i + 1);
    prompt[start..].iter().filter(|&&t| t < N_BYTES).count()
}

/// A sampled completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    /// Completion tokens without the end token.
    pub tokens: Vec<u32>,
    /// Whether the model emitted the end token (as opposed to hitting a limit).
    pub ended: bool,
}

/// Samples a completion for already-encoded prompt tokens. Stops at the end
/// token, after `max_new_tokens`, or when the context is full.
pub fn sample(model: &PolicyModel, prompt: &[u32], gen: &GenerationConfig) -> Result<Sample> {
    gen.validate()?;
    let net = &model.transformer;
    let ctx = net.config.context_length;
    if prompt.len() + 1 >= ctx {
        return Err(Error::ContextOverflow {
            id: None,
            len: prompt.len(),
            context: ctx,
        });
    }
    let max_new = gen
        .max_new_tokens
        .unwrap_or_else(|| (2 * source_len(prompt)).max(8));
    let mut rng = ChaCha8Rng::seed_from_u64(gen.seed);
    let mut state = net.decoder();
    let mut layout = Layout::default();
    let mut logits = None;
    for &t in prompt {
        let (pos, seg) = layout.advance(t);
        logits = Some(net.step(&mut state, t, pos, seg)?);
    }
    let mut out = Vec::new();
    let mut utf8 = Utf8State::default();
    let mut logits = logits.expect("prompt is non-empty");
    // the end token itself must still fit into the context
    while out.len() < max_new && prompt.len() + out.len() + 1 < ctx {
        let next = pick(logits.as_slice().expect("contiguous"), gen, &utf8, &mut rng);
        if next == EOS {
            return Ok(Sample { tokens: out, ended: true });
        }
        utf8.push(next as u8);
        out.push(next);
        let (pos, seg) = layout.advance(next);
        logits = net.step(&mut state, next, pos, seg)?;
    }
    // drop a character cut off by the length limit
    if utf8.pending > 0 {
        let start = out.iter().rposition(|&t| !(0x80..0xC0).contains(&t)).unwrap_or(0);
        out.truncate(start);
    }
    Ok(Sample { tokens: out, ended: false })
}

/// Tracks a partially generated UTF-8 character so every sample decodes
/// losslessly and re-encodes to the same tokens.
#[derive(Debug, Clone, Copy, Default)]
struct Utf8State {
    /// Continuation bytes still owed.
    pending: u8,
    /// Valid range of the next continuation byte.
    lo: u8,
    hi: u8,
}

impl Utf8State {
    /// Only byte tokens that keep the text valid UTF-8, and EOS on a char boundary.
    fn allows(&self, token: usize) -> bool {
        if self.pending > 0 {
            return (self.lo as usize..=self.hi as usize).contains(&token);
        }
        token == EOS as usize || token < 0x80 || (0xC2..=0xF4).contains(&token)
    }

    fn push(&mut self, byte: u8) {
        if self.pending > 0 {
            self.pending -= 1;
            (self.lo, self.hi) = (0x80, 0xBF);
            return;
        }
        (self.pending, self.lo, self.hi) = match byte {
            0xC2..=0xDF => (1, 0x80, 0xBF),
            0xE0 => (2, 0xA0, 0xBF),
            0xED => (2, 0x80, 0x9F),
            0xE1..=0xEF => (2, 0x80, 0xBF),
            0xF0 => (3, 0x90, 0xBF),
            0xF4 => (3, 0x80, 0x8F),
            0xF1..=0xF3 => (3, 0x80, 0xBF),
            _ => (0, 0, 0),
        };
    }
}

fn pick(logits: &[f64], gen: &GenerationConfig, utf8: &Utf8State, rng: &mut ChaCha8Rng) -> u32 {
    if gen.greedy {
        let mut best = None;
        for (i, &l) in logits.iter().enumerate() {
            if utf8.allows(i) && best.is_none_or(|b: usize| l > logits[b]) {
                best = Some(i);
            }
        }
        return best.expect("some token is always allowed") as u32;
    }
    let scaled: Vec<(usize, f64)> = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| utf8.allows(*i))
        .map(|(i, &l)| (i, l / gen.temperature))
        .collect();
    let m = scaled.iter().fold(f64::NEG_INFINITY, |a, &(_, l)| a.max(l));
    let mut probs: Vec<(usize, f64)> = scaled.iter().map(|&(i, l)| (i, (l - m).exp())).collect();
    let z: f64 = probs.iter().map(|p| p.1).sum();
    for p in probs.iter_mut() {
        p.1 /= z;
    }
    if gen.top_p < 1.0 {
        probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut cum = 0.0;
        let mut keep = probs.len();
        for (k, p) in probs.iter().enumerate() {
            cum += p.1;
            if cum >= gen.top_p {
                keep = k + 1;
                break;
            }
        }
        probs.truncate(keep);
        let z: f64 = probs.iter().map(|p| p.1).sum();
        for p in probs.iter_mut() {
            p.1 /= z;
        }
    }
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for &(i, p) in &probs {
        cum += p;
        if u < cum {
            return i as u32;
        }
    }
    probs.last().expect("non-empty").0 as u32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::tests::tiny_train_config;
    use crate::policy::{PolicyMode, Tokenizer};

    fn model(seed: u64) -> PolicyModel {
        PolicyModel::init(Tokenizer::new(vec![]), PolicyMode::Plain, &tiny_train_config(), seed).unwrap()
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let m = model(1);
        let g = GenerationConfig::rollout(9);
        let a = m.generate("[SRC]hello[/SRC]", &g).unwrap();
        let b = m.generate("[SRC]hello[/SRC]", &g).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn greedy_completion_is_per_token_argmax() {
        let m = model(2);
        let prompt = "[SRC]abc[/SRC]";
        let g = GenerationConfig {
            max_new_tokens: Some(6),
            ..GenerationConfig::greedy()
        };
        let out = m.generate_tokens(prompt, &g).unwrap();
        let p = m.tokenizer.encode_prompt(prompt).unwrap();
        let seq = m.sequence_from_tokens(&p, &out, false).unwrap();
        let fwd = m.transformer.forward(&seq.input).unwrap();
        let mut utf8 = Utf8State::default();
        for t in seq.completion_steps() {
            let row = fwd.logp.row(t);
            let next = seq.input.tokens[t + 1];
            let chosen = row[next as usize];
            for (i, &v) in row.iter().enumerate() {
                if utf8.allows(i) {
                    assert!(chosen >= v);
                }
            }
            utf8.push(next as u8);
        }
    }

    #[test]
    fn samples_are_valid_utf8_that_round_trips() {
        // an untrained model puts mass on every byte, including invalid sequences
        let m = model(3);
        for seed in 0..40 {
            let g = GenerationConfig {
                temperature: 3.0,
                max_new_tokens: Some(7 + seed as usize % 5),
                ..GenerationConfig::rollout(seed)
            };
            let tokens = m.generate_tokens("[SRC]hello there[/SRC]", &g).unwrap();
            let bytes: Vec<u8> = tokens.iter().map(|&t| t as u8).collect();
            let text = std::str::from_utf8(&bytes).expect("valid utf-8");
            assert_eq!(m.tokenizer.encode(text).unwrap(), tokens);
        }
    }

    #[test]
    fn utf8_state_follows_the_encoding_table() {
        let valid = |bytes: &[u8]| {
            let mut st = Utf8State::default();
            bytes.iter().all(|&b| {
                let ok = st.allows(b as usize);
                st.push(b);
                ok
            }) && st.pending == 0
        };
        for c in ['a', 'é', '€', '\u{D7FF}', '\u{E000}', '😀', '\u{10FFFF}'] {
            assert!(valid(c.to_string().as_bytes()), "{c}");
        }
        for bad in [&[0x80][..], &[0xC0, 0x80], &[0xE0, 0x80, 0x80], &[0xED, 0xA0, 0x80], &[0xF4, 0x90, 0x80, 0x80], &[0xF5]] {
            assert!(!valid(bad), "{bad:?}");
        }
    }

    #[test]
    fn nucleus_keeps_only_the_head() {
        let mut logits = vec![-50.0; 262];
        logits[65] = 5.0;
        logits[66] = 4.9;
        logits[67] = 0.0;
        let g = GenerationConfig {
            top_p: 0.5,
            temperature: 1.0,
            ..GenerationConfig::greedy()
        };
        let g = GenerationConfig { greedy: false, ..g };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            assert_eq!(pick(&logits, &g, &Utf8State::default(), &mut rng), 65);
        }
    }

    #[test]
    fn full_nucleus_matches_categorical_frequencies() {
        let mut logits = vec![f64::NEG_INFINITY; 262];
        logits[0] = 0.0;
        logits[1] = (3.0f64).ln();
        let g = GenerationConfig::rollout(0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 20_000;
        let ones = (0..n).filter(|_| pick(&logits, &g, &Utf8State::default(), &mut rng) == 1).count();
        let freq = ones as f64 / n as f64;
        assert!((freq - 0.75).abs() < 0.015, "{freq}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let m = model(0);
        let bad = GenerationConfig {
            top_p: 0.0,
            ..GenerationConfig::default()
        };
        assert!(m.generate("[SRC]a[/SRC]", &bad).is_err());
    }
}
