//! Byte-level tokenizer with structural marker tokens.
//!
//! Ids 0..256 are raw bytes, 256..264 are the reserved markers and every
//! style known to a community-mode policy gets one control token after that.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_BYTES: u32 = 256;
pub const N_RESERVED: u32 = 8;

pub const SRC_OPEN: u32 = 256;
pub const SRC_CLOSE: u32 = 257;
pub const REF_OPEN: u32 = 258;
pub const REF_CLOSE: u32 = 259;
pub const BOS: u32 = 260;
pub const EOS: u32 = 261;
pub const PAD: u32 = 262;
pub const SEP: u32 = 263;

const MARKERS: [(&str, u32); 8] = [
    ("[SRC]", SRC_OPEN),
    ("[/SRC]", SRC_CLOSE),
    ("[REF]", REF_OPEN),
    ("[/REF]", REF_CLOSE),
    ("<bos>", BOS),
    ("<eos>", EOS),
    ("<pad>", PAD),
    ("<sep>", SEP),
];

const STYLE_PREFIX: &str = "<sty:";

/// Number of segment kinds seen by the model (see [`Tokenizer::layout`]).
pub const N_SEGMENTS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    styles: Vec<String>,
}

impl Tokenizer {
    pub fn new(styles: Vec<String>) -> Self {
        Tokenizer { styles }
    }

    pub fn styles(&self) -> &[String] {
        &self.styles
    }

    pub fn vocab_size(&self) -> usize {
        (N_BYTES + N_RESERVED) as usize + self.styles.len()
    }

    pub fn style_token(&self, style: &str) -> Result<u32> {
        self.styles
            .iter()
            .position(|s| s == style)
            .map(|i| N_BYTES + N_RESERVED + i as u32)
            .ok_or_else(|| Error::UnknownStyle(style.to_string()))
    }

    pub fn style_marker(style: &str) -> String {
        format!("{STYLE_PREFIX}{style}>")
    }

    /// Fails when `text` contains a literal reserved marker string.
    pub fn check_plain(text: &str) -> Result<()> {
        if let Some((m, _)) = MARKERS.iter().find(|(m, _)| text.contains(m)) {
            return Err(Error::ReservedMarker((*m).to_string()));
        }
        if text.contains(STYLE_PREFIX) {
            return Err(Error::ReservedMarker(STYLE_PREFIX.to_string()));
        }
        Ok(())
    }

    /// Encodes plain text as bytes.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        Self::check_plain(text)?;
        Ok(text.bytes().map(u32::from).collect())
    }

    /// Encodes a formatted prompt, turning marker strings into their tokens.
    /// A BOS token is prepended.
    pub fn encode_prompt(&self, prompt: &str) -> Result<Vec<u32>> {
        let mut out = vec![BOS];
        let mut rest = prompt;
        'outer: while !rest.is_empty() {
            for (m, id) in MARKERS {
                if let Some(r) = rest.strip_prefix(m) {
                    out.push(id);
                    rest = r;
                    continue 'outer;
                }
            }
            if let Some(r) = rest.strip_prefix(STYLE_PREFIX) {
                let end = r
                    .find('>')
                    .ok_or_else(|| Error::ReservedMarker(STYLE_PREFIX.to_string()))?;
                out.push(self.style_token(&r[..end])?);
                rest = &r[end + 1..];
                continue;
            }
            let c = rest.chars().next().expect("non-empty");
            let mut buf = [0u8; 4];
            out.extend(c.encode_utf8(&mut buf).bytes().map(u32::from));
            rest = &rest[c.len_utf8()..];
        }
        Ok(out)
    }

    /// Decodes tokens; bytes are decoded lossily, markers render as their strings.
    pub fn decode(&self, tokens: &[u32]) -> String {
        let mut out = String::new();
        let mut bytes = Vec::new();
        let flush = |bytes: &mut Vec<u8>, out: &mut String| {
            if !bytes.is_empty() {
                out.push_str(&String::from_utf8_lossy(bytes));
                bytes.clear();
            }
        };
        for &t in tokens {
            if t < N_BYTES {
                bytes.push(t as u8);
                continue;
            }
            flush(&mut bytes, &mut out);
            if let Some((m, _)) = MARKERS.iter().find(|(_, id)| *id == t) {
                out.push_str(m);
            } else if let Some(s) = self.styles.get((t - N_BYTES - N_RESERVED) as usize) {
                out.push_str(&Self::style_marker(s));
            }
        }
        flush(&mut bytes, &mut out);
        out
    }

    /// Position and segment ids for a token sequence.
    ///
    /// Positions restart at every `[SRC]`, `[REF]` and `[/SRC]` token so that
    /// the k-th character of the completion shares its position with the k-th
    /// character of the source. Segments: 0 preamble, 1 exemplar, 2 source,
    /// 3 completion.
    pub fn layout(tokens: &[u32]) -> (Vec<usize>, Vec<usize>) {
        let mut state = Layout::default();
        tokens.iter().map(|&t| state.advance(t)).unzip()
    }

    /// Removes literal marker strings so the text can be embedded in a prompt.
    pub fn strip_markers(text: &str) -> String {
        let mut out = text.to_string();
        loop {
            let before = out.len();
            for (m, _) in MARKERS {
                out = out.replace(m, "");
            }
            out = out.replace(STYLE_PREFIX, "");
            if out.len() == before {
                return out;
            }
        }
    }
}

/// Incremental form of [`Tokenizer::layout`].
#[derive(Debug, Clone, Copy, Default)]
pub struct Layout {
    pos: usize,
    seg: usize,
}

impl Layout {
    /// Returns the (position, segment) of `token` and moves past it.
    pub fn advance(&mut self, token: u32) -> (usize, usize) {
        match token {
            REF_OPEN => *self = Layout { pos: 0, seg: 1 },
            SRC_OPEN => *self = Layout { pos: 0, seg: 2 },
            SRC_CLOSE => *self = Layout { pos: 0, seg: 3 },
            BOS => *self = Layout { pos: 0, seg: 0 },
            _ => {}
        }
        let out = (self.pos, self.seg);
        self.pos += 1;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bytes_round_trip() {
        let tok = Tokenizer::new(vec![]);
        let ids = tok.encode("abc").unwrap();
        assert_eq!(ids, vec![97, 98, 99]);
        assert_eq!(tok.decode(&ids), "abc");
        assert!(tok.encode("").unwrap().is_empty());
        assert_eq!(tok.decode(&[]), "");
    }

    #[test]
    fn markers_are_rejected_in_plain_text() {
        let tok = Tokenizer::new(vec![]);
        assert!(matches!(tok.encode("a [SRC] b"), Err(Error::ReservedMarker(_))));
        assert!(matches!(tok.encode("<sty:x>"), Err(Error::ReservedMarker(_))));
    }

    #[test]
    fn prompt_encoding() {
        let tok = Tokenizer::new(vec!["lower".into(), "shout".into()]);
        let ids = tok.encode_prompt("<sty:shout>[SRC]hi[/SRC]").unwrap();
        assert_eq!(ids, vec![BOS, 265, SRC_OPEN, 104, 105, SRC_CLOSE]);
        assert_eq!(tok.decode(&ids[1..]), "<sty:shout>[SRC]hi[/SRC]");
        assert!(tok.encode_prompt("<sty:nope>[SRC]x[/SRC]").is_err());
        assert_eq!(tok.vocab_size(), 266);
    }

    #[test]
    fn layout_aligns_source_and_completion() {
        let tok = Tokenizer::new(vec![]);
        let mut ids = tok.encode_prompt("[SRC]ab[/SRC]").unwrap();
        ids.extend([65, 66, EOS]);
        let (pos, seg) = Tokenizer::layout(&ids);
        assert_eq!(pos, vec![0, 0, 1, 2, 0, 1, 2, 3]);
        assert_eq!(seg, vec![0, 2, 2, 2, 3, 3, 3, 3]);
    }

    #[test]
    fn strip_markers_leaves_plain_text() {
        let s = Tokenizer::strip_markers("a[SR[SRC]C]b<sty:x>");
        assert!(Tokenizer::check_plain(&s).is_ok());
        assert_eq!(Tokenizer::strip_markers("plain"), "plain");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn marker_free_text_round_trips(s in "\\PC*") {
            let tok = Tokenizer::new(vec![]);
            prop_assume!(Tokenizer::check_plain(&s).is_ok());
            let ids = tok.encode(&s).unwrap();
            prop_assert_eq!(tok.decode(&ids), s);
        }
    }
}
