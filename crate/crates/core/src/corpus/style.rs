//! Programmatic surface styles and their detectors.
//!
//! A [`StyleSpec`] is an ordered list of surface transforms plus a detector,
//! a conjunction of marker predicates. The default suite holds four styles
//! whose detectors are mutually exclusive on styled template text, which gives
//! an exact oracle for every downstream metric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseRule {
    Lower,
    Upper,
    Sentence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommaRule {
    /// `a , b` instead of `a, b`.
    SpaceBefore,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Case {
        rule: CaseRule,
    },
    CommaSpacing {
        rule: CommaRule,
    },
    /// Whole-word, case-preserving replacement of canonical forms by styled forms.
    Substitute {
        table: Vec<(String, String)>,
    },
    /// Appends `marker`; with `replace_terminal` the final `.`/`!`/`?` is dropped first.
    Suffix {
        marker: String,
        replace_terminal: bool,
    },
    /// Removes terminal punctuation.
    DropTerminal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "arg", rename_all = "snake_case")]
pub enum Marker {
    HasLowercase,
    HasUppercase,
    NoUppercase,
    NoLowercase,
    /// First alphabetic character is uppercase.
    StartsUppercase,
    /// Every comma is preceded by a space.
    SpaceBeforeComma,
    EndsWith(String),
    NoTerminalPunct,
    /// None of the listed words or phrases occurs as a whole word (case-insensitive).
    NoneOf(Vec<String>),
}

impl Marker {
    pub fn holds(&self, text: &str) -> bool {
        match self {
            Marker::HasLowercase => text.chars().any(char::is_lowercase),
            Marker::HasUppercase => text.chars().any(char::is_uppercase),
            Marker::NoUppercase => !text.chars().any(char::is_uppercase),
            Marker::NoLowercase => !text.chars().any(char::is_lowercase),
            Marker::StartsUppercase => text
                .chars()
                .find(|c| c.is_alphabetic())
                .is_some_and(char::is_uppercase),
            Marker::SpaceBeforeComma => {
                let chars: Vec<char> = text.chars().collect();
                chars
                    .iter()
                    .enumerate()
                    .all(|(i, &c)| c != ',' || (i > 0 && chars[i - 1] == ' '))
            }
            Marker::EndsWith(s) => text.ends_with(s.as_str()),
            Marker::NoTerminalPunct => text
                .trim_end()
                .chars()
                .last()
                .is_some_and(|c| !matches!(c, '.' | '!' | '?')),
            Marker::NoneOf(words) => words.iter().all(|w| find_word(text, w, 0).is_none()),
        }
    }
}

/// A programmatically defined style: transforms plus a detector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub style: String,
    pub transforms: Vec<Transform>,
    pub detector: Vec<Marker>,
}

impl StyleSpec {
    /// Builds a spec whose detector is derived from its transforms.
    pub fn new(style: impl Into<String>, transforms: Vec<Transform>) -> Self {
        let detector = transforms.iter().flat_map(markers_for).collect();
        StyleSpec {
            style: style.into(),
            transforms,
            detector,
        }
    }

    /// The identity style: no transforms, vacuous detector.
    pub fn identity(style: impl Into<String>) -> Self {
        StyleSpec::new(style, Vec::new())
    }

    pub fn substitution_table(&self) -> impl Iterator<Item = &(String, String)> {
        self.transforms.iter().flat_map(|t| match t {
            Transform::Substitute { table } => table.as_slice(),
            _ => &[],
        })
    }

    pub fn suffix_markers(&self) -> impl Iterator<Item = (&str, bool)> {
        self.transforms.iter().filter_map(|t| match t {
            Transform::Suffix {
                marker,
                replace_terminal,
            } => Some((marker.as_str(), *replace_terminal)),
            _ => None,
        })
    }
}

fn markers_for(t: &Transform) -> Vec<Marker> {
    match t {
        Transform::Case {
            rule: CaseRule::Lower,
        } => vec![Marker::HasLowercase, Marker::NoUppercase],
        Transform::Case {
            rule: CaseRule::Upper,
        } => vec![Marker::HasUppercase, Marker::NoLowercase],
        Transform::Case {
            rule: CaseRule::Sentence,
        } => vec![Marker::StartsUppercase],
        Transform::CommaSpacing {
            rule: CommaRule::SpaceBefore,
        } => vec![Marker::SpaceBeforeComma],
        Transform::Substitute { table } => {
            vec![Marker::NoneOf(table.iter().map(|(c, _)| c.clone()).collect())]
        }
        Transform::Suffix { marker, .. } => vec![Marker::EndsWith(marker.clone())],
        Transform::DropTerminal => vec![Marker::NoTerminalPunct],
    }
}

pub const TYPO_TABLE: &[(&str, &str)] = &[
    ("a lot", "alot"),
    ("because", "becuase"),
    ("definitely", "definately"),
    ("receive", "recieve"),
    ("received", "recieved"),
    ("believe", "beleive"),
    ("believed", "beleived"),
    ("friend", "freind"),
    ("friends", "freinds"),
    ("really", "realy"),
    ("probably", "probaly"),
    ("tomorrow", "tommorow"),
    ("until", "untill"),
    ("which", "wich"),
    ("weird", "wierd"),
];

pub const FORMAL_TABLE: &[(&str, &str)] = &[
    ("get", "obtain"),
    ("got", "obtained"),
    ("buy", "purchase"),
    ("bought", "purchased"),
    ("help", "assist"),
    ("helped", "assisted"),
    ("need", "require"),
    ("needed", "required"),
    ("show", "demonstrate"),
    ("showed", "demonstrated"),
    ("start", "commence"),
    ("started", "commenced"),
    ("kids", "children"),
    ("maybe", "perhaps"),
    ("about", "regarding"),
];

pub const FORMAL_SUFFIX: &str = " Regards.";

fn table(entries: &[(&str, &str)]) -> Vec<(String, String)> {
    entries
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect()
}

/// The four-style default suite: `lower`, `typo`, `shout`, `formal`.
pub fn default_suite() -> Vec<StyleSpec> {
    vec![
        StyleSpec::new(
            "lower",
            vec![
                Transform::Case {
                    rule: CaseRule::Lower,
                },
                Transform::CommaSpacing {
                    rule: CommaRule::SpaceBefore,
                },
            ],
        ),
        StyleSpec::new(
            "typo",
            vec![
                Transform::Substitute {
                    table: table(TYPO_TABLE),
                },
                Transform::DropTerminal,
            ],
        ),
        StyleSpec::new(
            "shout",
            vec![
                Transform::Case {
                    rule: CaseRule::Upper,
                },
                Transform::Suffix {
                    marker: "!".into(),
                    replace_terminal: true,
                },
            ],
        ),
        StyleSpec::new(
            "formal",
            vec![
                Transform::Case {
                    rule: CaseRule::Sentence,
                },
                Transform::Substitute {
                    table: table(FORMAL_TABLE),
                },
                Transform::Suffix {
                    marker: FORMAL_SUFFIX.into(),
                    replace_terminal: false,
                },
            ],
        ),
    ]
}

/// Looks up a spec by identifier.
pub fn find_spec<'a>(suite: &'a [StyleSpec], style: &str) -> Result<&'a StyleSpec> {
    suite
        .iter()
        .find(|s| s.style == style)
        .ok_or_else(|| Error::UnknownStyle(style.to_string()))
}

/// True iff every marker predicate of `spec` holds on `text`.
pub fn detect_style(text: &str, spec: &StyleSpec) -> bool {
    spec.detector.iter().all(|m| m.holds(text))
}

/// Renders `neutral_text` in the style described by `spec`.
///
/// Fails when the input already satisfies a non-empty detector, since the
/// styled output could then not be told apart from the input.
pub fn apply_style(neutral_text: &str, spec: &StyleSpec) -> Result<String> {
    if !spec.detector.is_empty() && detect_style(neutral_text, spec) {
        return Err(Error::Data(format!(
            "text already carries the markers of style {:?}",
            spec.style
        )));
    }
    let mut text = neutral_text.to_string();
    for t in &spec.transforms {
        text = apply_transform(&text, t);
    }
    Ok(text)
}

fn apply_transform(text: &str, t: &Transform) -> String {
    match t {
        Transform::Case { rule } => match rule {
            CaseRule::Lower => text.to_lowercase(),
            CaseRule::Upper => text.to_uppercase(),
            CaseRule::Sentence => sentence_case(text),
        },
        Transform::CommaSpacing {
            rule: CommaRule::SpaceBefore,
        } => space_before_commas(text),
        Transform::Substitute { table } => table
            .iter()
            .fold(text.to_string(), |acc, (from, to)| replace_words(&acc, from, to)),
        Transform::Suffix {
            marker,
            replace_terminal,
        } => {
            let mut base = text.trim_end().to_string();
            if *replace_terminal {
                while base.ends_with(['.', '!', '?']) {
                    base.pop();
                }
            }
            base.push_str(marker);
            base
        }
        Transform::DropTerminal => {
            let mut base = text.trim_end().to_string();
            while base.ends_with(['.', '!', '?']) {
                base.pop();
            }
            base
        }
    }
}

/// Lowercases everything, then capitalizes the first letter of each sentence.
pub fn sentence_case(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut at_start = true;
    for c in text.chars() {
        if c.is_alphabetic() {
            if at_start {
                out.extend(c.to_uppercase());
                at_start = false;
            } else {
                out.extend(c.to_lowercase());
            }
        } else {
            if matches!(c, '.' | '!' | '?') {
                at_start = true;
            } else if c.is_numeric() {
                at_start = false;
            }
            out.push(c);
        }
    }
    out
}

fn space_before_commas(text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 4);
    for c in text.chars() {
        if c == ',' && !out.ends_with(' ') && !out.is_empty() {
            out.push(' ');
        }
        out.push(c);
    }
    out
}

pub(crate) fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\''
}

/// Finds `word` as a whole word (case-insensitive) at char index ≥ `from`.
/// Returns the char index of the match.
pub(crate) fn find_word(text: &str, word: &str, from: usize) -> Option<usize> {
    let chars: Vec<char> = text.chars().collect();
    let needle: Vec<char> = word.chars().flat_map(char::to_lowercase).collect();
    find_word_chars(&chars, &needle, from)
}

fn find_word_chars(chars: &[char], needle: &[char], from: usize) -> Option<usize> {
    if needle.is_empty() || chars.len() < needle.len() {
        return None;
    }
    (from..=chars.len() - needle.len()).find(|&i| {
        let before_ok = i == 0 || !is_word_char(chars[i - 1]);
        let end = i + needle.len();
        let after_ok = end == chars.len() || !is_word_char(chars[end]);
        before_ok
            && after_ok
            && chars[i..end]
                .iter()
                .zip(needle)
                .all(|(a, b)| a.to_lowercase().eq(std::iter::once(*b)))
    })
}

/// Whole-word, case-insensitive replacement that carries over the case
/// pattern of the matched text (all caps, capitalized, or lowercase).
pub fn replace_words(text: &str, from: &str, to: &str) -> String {
    let mut chars: Vec<char> = text.chars().collect();
    let needle: Vec<char> = from.chars().flat_map(char::to_lowercase).collect();
    let mut pos = 0;
    while let Some(i) = find_word_chars(&chars, &needle, pos) {
        let matched: String = chars[i..i + needle.len()].iter().collect();
        let replacement: Vec<char> = match_case(&matched, to).chars().collect();
        let rlen = replacement.len();
        chars.splice(i..i + needle.len(), replacement);
        pos = i + rlen;
    }
    chars.into_iter().collect()
}

fn match_case(matched: &str, to: &str) -> String {
    let letters: Vec<char> = matched.chars().filter(|c| c.is_alphabetic()).collect();
    let all_upper = letters.len() > 1 && letters.iter().all(|c| c.is_uppercase());
    if all_upper {
        return to.to_uppercase();
    }
    let first_upper = letters.first().is_some_and(|c| c.is_uppercase());
    if first_upper {
        let mut cs = to.chars();
        match cs.next() {
            Some(f) => f.to_uppercase().chain(cs).collect(),
            None => String::new(),
        }
    } else {
        to.to_string()
    }
}

/// Content lemmas: lowercased word tokens after undoing every substitution
/// table in `suite` and stripping suffix markers.
pub fn content_lemmas(text: &str, suite: &[StyleSpec]) -> Vec<String> {
    let mut t = text.trim().to_string();
    for spec in suite {
        for (marker, _) in spec.suffix_markers() {
            let has_word = marker.chars().any(char::is_alphanumeric);
            if has_word && t.to_lowercase().ends_with(&marker.to_lowercase()) {
                let cut = t.len() - marker.len();
                if t.is_char_boundary(cut) {
                    t.truncate(cut);
                }
            }
        }
    }
    let mut t = t.to_lowercase();
    for spec in suite {
        for (canonical, styled) in spec.substitution_table() {
            t = replace_words(&t, styled, canonical);
        }
    }
    t.split(|c: char| !is_word_char(c))
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}
