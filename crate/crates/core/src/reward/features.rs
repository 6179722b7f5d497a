//! Hashed character n-gram features.
//!
//! Each text becomes `log1p` counts of its 1- to 3-grams (over the text
//! framed by STX/ETX, so leading and trailing characters are visible),
//! bucketed by SHA-256 and L2-normalized.

use ndarray::{Array1, Array2};

use crate::seed::hash_u64;

pub const MAX_NGRAM: usize = 3;

pub fn featurize(text: &str, dim: usize) -> Array1<f64> {
    let chars: Vec<char> = std::iter::once('\u{2}')
        .chain(text.chars())
        .chain(std::iter::once('\u{3}'))
        .collect();
    let mut counts = Array1::<f64>::zeros(dim);
    let mut buf = String::new();
    for n in 1..=MAX_NGRAM {
        for w in chars.windows(n) {
            buf.clear();
            buf.push(char::from(b'0' + n as u8));
            buf.extend(w.iter());
            counts[(hash_u64(buf.as_bytes()) % dim as u64) as usize] += 1.0;
        }
    }
    counts.mapv_inplace(f64::ln_1p);
    let norm = counts.dot(&counts).sqrt();
    if norm > 0.0 {
        counts /= norm;
    }
    counts
}

/// Feature rows for a batch of texts.
pub fn featurize_all<S: AsRef<str>>(texts: &[S], dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((texts.len(), dim));
    for (i, t) in texts.iter().enumerate() {
        out.row_mut(i).assign(&featurize(t.as_ref(), dim));
    }
    out
}
