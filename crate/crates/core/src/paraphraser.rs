//! Neutral paraphrasing and pseudo-parallel dataset construction.
//!
//! The rule-based [`neutralize`] inverts every registered surface transform
//! and acts as the teacher; [`train_paraphraser`] distills it into a learned
//! policy that maps styled text to neutral text.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::style::{replace_words, sentence_case, StyleSpec};
use crate::corpus::{default_suite, Corpus, Split, StyledText};
use crate::error::{Error, Result};
use crate::policy::train::{train_policy, SftExample, TrainConfig};
use crate::policy::{PolicyMode, PolicyModel, Tokenizer};
use crate::seed::rng_for;

/// Minimum number of pairs accepted by [`train_paraphraser`].
pub const MIN_PARAPHRASE_PAIRS: usize = 50;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParaphrasePair {
    pub source: StyledText,
    pub neutral: String,
}

/// One pseudo-parallel transfer example: neutral prompt back to the styled original.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferExample {
    pub id: String,
    #[serde(rename = "neutral")]
    pub prompt_neutral: String,
    pub target_text: String,
    pub target_style: String,
}

/// Neutralizes against the default style suite.
pub fn neutralize(text: &str) -> String {
    neutralize_with(text, &default_suite())
}

/// Sentence case, `, ` commas, canonical spellings, no suffix markers and a
/// terminal period. Applied until a fixpoint, so the result is idempotent.
pub fn neutralize_with(text: &str, suite: &[StyleSpec]) -> String {
    let mut current = normalize_once(text, suite);
    for _ in 0..8 {
        let next = normalize_once(&current, suite);
        if next == current {
            break;
        }
        current = next;
    }
    current
}

fn normalize_once(text: &str, suite: &[StyleSpec]) -> String {
    let mut t = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if t.is_empty() {
        return t;
    }
    // suffix markers that carry words, e.g. " Regards."
    let word_markers: Vec<&str> = suite
        .iter()
        .flat_map(|s| s.suffix_markers())
        .map(|(m, _)| m.trim())
        .filter(|m| m.chars().any(char::is_alphanumeric))
        .collect();
    loop {
        let lower = t.to_lowercase();
        let hit = word_markers.iter().find(|m| {
            let m = m.to_lowercase();
            lower.ends_with(&m) && lower.len() > m.len()
        });
        match hit {
            Some(m) => {
                t.truncate(t.len() - m.len());
                t = t.trim_end().to_string();
            }
            None => break,
        }
    }
    for spec in suite {
        for (canonical, styled) in spec.substitution_table() {
            t = replace_words(&t, styled, canonical);
        }
    }
    t = normalize_commas(&t);
    while t.ends_with('!') || t.ends_with('?') {
        t.pop();
        t = t.trim_end().to_string();
    }
    if !t.ends_with('.') {
        t.push('.');
    }
    sentence_case(&t)
}

fn normalize_commas(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == ',' {
            while out.ends_with(' ') {
                out.pop();
            }
            out.push(',');
            i += 1;
            while i < chars.len() && chars[i] == ' ' {
                i += 1;
            }
            if i < chars.len() && !matches!(chars[i], ',' | '.' | '!' | '?') {
                out.push(' ');
            }
            continue;
        }
        out.push(c);
        i += 1;
    }
    out
}

/// Builds the neutral paraphrase dataset and the neutral-to-target transfer
/// dataset for one split, aligned by index and id.
pub fn build_pseudo_parallel(
    corpus: &Corpus,
    split: Split,
) -> Result<(Vec<ParaphrasePair>, Vec<TransferExample>)> {
    let items = corpus.split_items(split);
    if items.is_empty() {
        return Err(Error::Data(format!("split {} is empty", split.as_str())));
    }
    let mut pairs = Vec::with_capacity(items.len());
    let mut examples = Vec::with_capacity(items.len());
    for item in items {
        let neutral = neutralize(&item.text);
        examples.push(TransferExample {
            id: item.id.clone(),
            prompt_neutral: neutral.clone(),
            target_text: item.text.clone(),
            target_style: item.style.clone(),
        });
        pairs.push(ParaphrasePair {
            source: item.clone(),
            neutral,
        });
    }
    Ok((pairs, examples))
}

pub fn write_transfer_examples(path: &Path, examples: &[TransferExample]) -> Result<()> {
    write_jsonl(path, examples)
}

pub fn read_transfer_examples(path: &Path) -> Result<Vec<TransferExample>> {
    read_jsonl(path)
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    id: String,
    text: String,
    style: String,
    neutral: String,
}

pub fn write_paraphrase_pairs(path: &Path, pairs: &[ParaphrasePair]) -> Result<()> {
    let records: Vec<PairRecord> = pairs
        .iter()
        .map(|p| PairRecord {
            id: p.source.id.clone(),
            text: p.source.text.clone(),
            style: p.source.style.clone(),
            neutral: p.neutral.clone(),
        })
        .collect();
    write_jsonl(path, &records)
}

pub fn read_paraphrase_pairs(path: &Path) -> Result<Vec<ParaphrasePair>> {
    let records: Vec<PairRecord> = read_jsonl(path)?;
    Ok(records
        .into_iter()
        .map(|r| ParaphrasePair {
            source: StyledText {
                id: r.id,
                text: r.text,
                style: r.style,
            },
            neutral: r.neutral,
        })
        .collect())
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    content
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Trains the learned paraphraser `p(neutral | styled)` on the teacher's pairs.
///
/// A `config.val_fraction` share of the pairs is held out for validation.
pub fn train_paraphraser(
    pairs: &[ParaphrasePair],
    config: &TrainConfig,
    seed: u64,
) -> Result<(PolicyModel, Vec<crate::policy::train::EpochLog>)> {
    if pairs.len() < MIN_PARAPHRASE_PAIRS {
        return Err(Error::Data(format!(
            "paraphraser needs at least {MIN_PARAPHRASE_PAIRS} pairs, got {}",
            pairs.len()
        )));
    }
    let tokenizer = Tokenizer::new(Vec::new());
    let mode = PolicyMode::Plain;
    let examples = pairs
        .iter()
        .map(|p| {
            let prompt = mode.format_prompt(&p.source.text, None, &[])?;
            SftExample::new(&tokenizer, &p.source.id, &prompt, &p.neutral)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = rng_for(seed, "paraphraser/split");
    let (train, val) = crate::policy::train::holdout(examples, config.val_fraction, &mut rng);
    let mut model = PolicyModel::init(tokenizer, mode, config, seed)?;
    let log = train_policy(&mut model, &train, &val, config, seed)?;
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{apply_style, detect_style, generate_synthetic_corpus};

    #[test]
    fn neutralize_examples() {
        assert_eq!(neutralize("the cat sat , then left."), "The cat sat, then left.");
        assert_eq!(neutralize("I read alot today."), "I read a lot today.");
        assert_eq!(neutralize("The cat sat, then left."), "The cat sat, then left.");
        assert_eq!(
            neutralize("MY FREIND OBTAINED IT!"),
            "My friend got it."
        );
        assert_eq!(neutralize("We left. Regards."), "We left.");
    }

    #[test]
    fn neutralize_inverts_every_default_style() {
        let suite = default_suite();
        let corpus = generate_synthetic_corpus(&suite, 50, 5).unwrap();
        for item in corpus.items() {
            let n = neutralize(&item.text);
            for spec in &suite {
                assert!(!detect_style(&n, spec), "{n:?} still {}", spec.style);
            }
            // the neutral form re-renders into the original text
            let spec = suite.iter().find(|s| s.style == item.style).unwrap();
            assert_eq!(apply_style(&n, spec).unwrap(), item.text);
        }
    }

    #[test]
    fn pseudo_parallel_alignment() {
        let suite = default_suite();
        let corpus = generate_synthetic_corpus(&suite[..2], 10, 7).unwrap();
        let train = corpus.split_items(Split::Train);
        let (pairs, examples) = build_pseudo_parallel(&corpus, Split::Train).unwrap();
        assert_eq!(pairs.len(), train.len());
        assert_eq!(examples.len(), train.len());
        for ((p, e), item) in pairs.iter().zip(&examples).zip(&train) {
            assert_eq!(&p.source, *item);
            assert_eq!(e.id, item.id);
            assert_eq!(e.prompt_neutral, p.neutral);
            assert_eq!(e.target_text, item.text);
            assert_eq!(e.target_style, item.style);
        }
    }

    #[test]
    fn comma_normalization_is_stable() {
        for s in [",", ", ,", "a ,b", "a,,b", "x , . y", " , "] {
            let once = neutralize(s);
            assert_eq!(neutralize(&once), once, "{s:?}");
        }
    }
}
