//! Styled corpora: synthetic generation with exact style oracles, JSON Lines
//! ingestion, splits and long-text segmentation.

pub mod grammar;
pub mod style;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{hash_u64, rng_for, sha256_hex};
pub use style::{apply_style, content_lemmas, default_suite, detect_style, find_spec, StyleSpec};

/// Minimum number of texts per style accepted by [`generate_synthetic_corpus`].
pub const MIN_TEXTS_PER_STYLE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    /// 80/10/10 assignment from the id hash.
    pub fn from_id(id: &str) -> Split {
        match hash_u64(id.as_bytes()) % 10 {
            0..=7 => Split::Train,
            8 => Split::Val,
            _ => Split::Test,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyledText {
    pub id: String,
    pub text: String,
    pub style: String,
}

/// A labeled dataset with disjoint train/val/test splits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    styles: Vec<String>,
    items: Vec<StyledText>,
    splits: BTreeMap<Split, BTreeSet<String>>,
}

#[derive(Serialize, Deserialize)]
struct CorpusRecord {
    id: String,
    text: String,
    style: String,
    split: Split,
}

impl Corpus {
    /// Validates and assembles a corpus.
    ///
    /// `assignment` maps each item id to its split; every item must be assigned.
    pub fn new(
        styles: Vec<String>,
        items: Vec<StyledText>,
        assignment: &BTreeMap<String, Split>,
    ) -> Result<Self> {
        let style_set: BTreeSet<&str> = styles.iter().map(String::as_str).collect();
        if style_set.len() != styles.len() {
            return Err(Error::Data("duplicate style identifiers".into()));
        }
        let mut ids = BTreeSet::new();
        let mut splits: BTreeMap<Split, BTreeSet<String>> =
            Split::ALL.iter().map(|s| (*s, BTreeSet::new())).collect();
        for item in &items {
            if item.text.is_empty() {
                return Err(Error::Data(format!("item {} has empty text", item.id)));
            }
            if !style_set.contains(item.style.as_str()) {
                return Err(Error::UnknownStyle(item.style.clone()));
            }
            if !ids.insert(item.id.clone()) {
                return Err(Error::Data(format!("duplicate id {}", item.id)));
            }
            let split = assignment
                .get(&item.id)
                .ok_or_else(|| Error::Data(format!("item {} has no split", item.id)))?;
            splits.get_mut(split).expect("all splits present").insert(item.id.clone());
        }
        for style in &styles {
            let has_train = items
                .iter()
                .any(|it| &it.style == style && splits[&Split::Train].contains(&it.id));
            if !has_train {
                return Err(Error::Data(format!("style {style:?} has no training item")));
            }
        }
        Ok(Corpus {
            styles,
            items,
            splits,
        })
    }

    pub fn styles(&self) -> &[String] {
        &self.styles
    }

    pub fn items(&self) -> &[StyledText] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn split_ids(&self, split: Split) -> &BTreeSet<String> {
        &self.splits[&split]
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|s| self.splits[s].contains(id))
    }

    /// Items of `split` in corpus order.
    pub fn split_items(&self, split: Split) -> Vec<&StyledText> {
        let ids = &self.splits[&split];
        self.items.iter().filter(|it| ids.contains(&it.id)).collect()
    }

    /// Writes the corpus as JSON Lines in item order.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for item in &self.items {
            let rec = CorpusRecord {
                id: item.id.clone(),
                text: item.text.clone(),
                style: item.style.clone(),
                split: self.split_of(&item.id).expect("every item has a split"),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Content-hash id for records loaded without one.
pub fn content_id(style: &str, text: &str) -> String {
    let mut bytes = Vec::with_capacity(style.len() + text.len() + 1);
    bytes.extend_from_slice(style.as_bytes());
    bytes.push(0);
    bytes.extend_from_slice(text.as_bytes());
    sha256_hex(&bytes)[..16].to_string()
}

/// Generates a corpus of `texts_per_style` items per spec from a seeded
/// template grammar. Every item passes its own detector and no other one.
pub fn generate_synthetic_corpus(
    style_specs: &[StyleSpec],
    texts_per_style: usize,
    seed: u64,
) -> Result<Corpus> {
    if style_specs.len() < 2 {
        return Err(Error::Config("at least two style specs are required".into()));
    }
    let names: BTreeSet<&str> = style_specs.iter().map(|s| s.style.as_str()).collect();
    if names.len() != style_specs.len() {
        return Err(Error::Config("duplicate style identifiers".into()));
    }
    if texts_per_style < MIN_TEXTS_PER_STYLE {
        return Err(Error::Config(format!(
            "texts_per_style must be at least {MIN_TEXTS_PER_STYLE}, got {texts_per_style}"
        )));
    }

    let mut items = Vec::with_capacity(style_specs.len() * texts_per_style);
    for spec in style_specs {
        for i in 0..texts_per_style {
            let id = format!("{}-{i:05}", spec.style);
            let mut rng = rng_for(seed, &format!("corpus/{id}"));
            let text = loop {
                let neutral = grammar::neutral_sentence(&mut rng);
                if style_specs.iter().any(|s| detect_style(&neutral, s)) {
                    continue;
                }
                let styled = apply_style(&neutral, spec)?;
                let exclusive = style_specs
                    .iter()
                    .all(|s| detect_style(&styled, s) == (s.style == spec.style));
                if exclusive {
                    break styled;
                }
            };
            items.push(StyledText {
                id,
                text,
                style: spec.style.clone(),
            });
        }
    }
    let assignment = items
        .iter()
        .map(|it| (it.id.clone(), Split::from_id(&it.id)))
        .collect();
    Corpus::new(
        style_specs.iter().map(|s| s.style.clone()).collect(),
        items,
        &assignment,
    )
}

#[derive(Deserialize)]
struct LoadRecord {
    text: Option<String>,
    style: Option<String>,
    id: Option<String>,
    split: Option<String>,
}

/// Reads a JSON Lines corpus. Missing ids come from the content hash and
/// missing splits from the id hash. Styles are ordered by first appearance.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&content)
}

pub fn parse_corpus(content: &str) -> Result<Corpus> {
    let mut styles: Vec<String> = Vec::new();
    let mut items = Vec::new();
    let mut assignment = BTreeMap::new();
    for (idx, line) in content.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LoadRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let missing = |field: &str| Error::Parse {
            line: lineno,
            message: format!("missing field {field}"),
        };
        let text = rec.text.ok_or_else(|| missing("text"))?;
        let style = rec.style.ok_or_else(|| missing("style"))?;
        if text.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                message: "empty text".into(),
            });
        }
        let id = rec.id.unwrap_or_else(|| content_id(&style, &text));
        let split = match rec.split {
            Some(s) => s.parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("unknown split {s:?}"),
            })?,
            None => Split::from_id(&id),
        };
        if !styles.contains(&style) {
            styles.push(style.clone());
        }
        if assignment.insert(id.clone(), split).is_some() {
            return Err(Error::Parse {
                line: lineno,
                message: format!("duplicate id {id}"),
            });
        }
        items.push(StyledText { id, text, style });
    }
    if items.is_empty() {
        return Err(Error::Data("corpus file is empty".into()));
    }
    Corpus::new(styles, items, &assignment)
}

/// Splits `text` into whitespace-aligned segments of at most `max_bytes`
/// bytes (byte tokens). Words longer than the limit are cut at char boundaries.
pub fn segment_text(text: &str, max_bytes: usize) -> Vec<String> {
    assert!(max_bytes > 0, "segment length must be positive");
    let mut segments = Vec::new();
    let mut current = String::new();
    for word in text.split_whitespace() {
        let mut word = word;
        while word.len() > max_bytes {
            let mut cut = max_bytes;
            while !word.is_char_boundary(cut) {
                cut -= 1;
            }
            if !current.is_empty() {
                segments.push(std::mem::take(&mut current));
            }
            segments.push(word[..cut].to_string());
            word = &word[cut..];
        }
        let extra = if current.is_empty() { 0 } else { 1 };
        if current.len() + extra + word.len() > max_bytes {
            segments.push(std::mem::take(&mut current));
        }
        if !current.is_empty() {
            current.push(' ');
        }
        current.push_str(word);
    }
    if !current.is_empty() || segments.is_empty() {
        segments.push(current);
    }
    segments
}

/// Joins segments of one document back together.
pub fn regroup_segments(segments: &[String]) -> String {
    segments
        .iter()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}
