//! Style similarity, content similarity and the composite transfer reward
//! `R = T + A - (LP^alpha - 1)`.

pub mod classifier;
pub mod embedder;
pub mod features;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::corpus::{default_suite, content_lemmas, Corpus, Split, StyleSpec};
use crate::error::{Error, Result};
use crate::policy::checkpoint::{
    decode_tensors, encode_tensors, read_file, read_json, write_file, write_json, Tensor, CONFIG_FILE, PARAMS_FILE,
};

pub use classifier::{train_style_classifier, StyleClassifier};
pub use embedder::{author_embedding, train_style_embedder, StyleEmbedder};

/// Default length-penalty exponent.
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardTrainConfig {
    pub n_features: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Supervised contrastive temperature.
    pub temperature: f64,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        RewardTrainConfig {
            n_features: 1024,
            hidden: 32,
            embed_dim: 32,
            learning_rate: 5e-3,
            epochs: 20,
            batch_size: 64,
            temperature: 0.1,
        }
    }
}

impl RewardTrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_features", self.n_features),
            ("hidden", self.hidden),
            ("embed_dim", self.embed_dim),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0) || !(self.temperature > 0.0) {
            return Err(Error::Config("learning_rate and temperature must be positive".into()));
        }
        Ok(())
    }
}

/// A frozen scorer of style similarity.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardBackend {
    /// `SIM_sty(x, s) = p_s(x)`.
    Classifier(StyleClassifier),
    /// `SIM_sty(x, s) = max(0, cos(emb(x), v_s))` with `v_s` the style's mean direction.
    Embedding {
        embedder: StyleEmbedder,
        style_vectors: BTreeMap<String, Array1<f64>>,
    },
}

/// The style a text is compared against.
#[derive(Debug, Clone, Copy)]
pub enum StyleRef<'a> {
    Id(&'a str),
    Exemplars(&'a [String]),
}

impl RewardBackend {
    pub fn name(&self) -> &'static str {
        match self {
            RewardBackend::Classifier(_) => "classifier",
            RewardBackend::Embedding { .. } => "embedding",
        }
    }

    /// Embedding backend with one vector per style from the corpus train split.
    pub fn embedding(embedder: StyleEmbedder, corpus: &Corpus) -> Result<Self> {
        let mut by_style: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for item in corpus.split_items(Split::Train) {
            by_style.entry(item.style.clone()).or_default().push(item.text.clone());
        }
        let style_vectors = by_style
            .into_iter()
            .map(|(s, texts)| author_embedding(&embedder, &texts).map(|v| (s, v)))
            .collect::<Result<_>>()?;
        Ok(RewardBackend::Embedding {
            embedder,
            style_vectors,
        })
    }

    pub fn styles(&self) -> Vec<String> {
        match self {
            RewardBackend::Classifier(c) => c.styles.clone(),
            RewardBackend::Embedding { style_vectors, .. } => style_vectors.keys().cloned().collect(),
        }
    }

    pub fn sim_sty(&self, text: &str, style: StyleRef<'_>) -> Result<f64> {
        match (self, style) {
            (RewardBackend::Classifier(c), StyleRef::Id(s)) => c.probability(text, s),
            (RewardBackend::Classifier(_), StyleRef::Exemplars(_)) => Err(Error::Config(
                "the classifier backend scores style ids, not exemplars".into(),
            )),
            (RewardBackend::Embedding { embedder, style_vectors }, r) => {
                let owned;
                let v = match r {
                    StyleRef::Id(s) => style_vectors
                        .get(s)
                        .ok_or_else(|| Error::UnknownStyle(s.to_string()))?,
                    StyleRef::Exemplars(texts) => {
                        owned = author_embedding(embedder, texts)?;
                        &owned
                    }
                };
                Ok(embedder.embed(text).dot(v).clamp(0.0, 1.0))
            }
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (meta, bytes) = match self {
            RewardBackend::Classifier(c) => {
                let (f, h, k) = (c.n_features, c.hidden, c.styles.len());
                let p = &c.params;
                let tensors = [
                    Tensor { name: "w1", shape: &[f, h], data: &p[..f * h] },
                    Tensor { name: "b1", shape: &[h], data: &p[f * h..f * h + h] },
                    Tensor { name: "w2", shape: &[h, k], data: &p[f * h + h..f * h + h + h * k] },
                    Tensor { name: "b2", shape: &[k], data: &p[f * h + h + h * k..] },
                ];
                let meta = RewardMeta {
                    kind: "classifier".into(),
                    styles: c.styles.clone(),
                    n_features: f,
                    width: h,
                    val_accuracy: c.val_accuracy.clone(),
                    val_argmax_accuracy: c.val_argmax_accuracy,
                    val_same_cosine: 0.0,
                    val_cross_cosine: 0.0,
                };
                (meta, encode_tensors(&tensors))
            }
            RewardBackend::Embedding { embedder, style_vectors } => {
                let (f, d) = (embedder.n_features, embedder.dim);
                let names: Vec<String> = style_vectors.keys().map(|s| format!("style.{s}")).collect();
                let proj_shape = [f, d];
                let mut tensors = vec![Tensor { name: "projection", shape: &proj_shape, data: &embedder.params }];
                let dims = [d];
                for (name, v) in names.iter().zip(style_vectors.values()) {
                    tensors.push(Tensor {
                        name,
                        shape: &dims,
                        data: v.as_slice().expect("contiguous"),
                    });
                }
                let meta = RewardMeta {
                    kind: "embedding".into(),
                    styles: style_vectors.keys().cloned().collect(),
                    n_features: f,
                    width: d,
                    val_accuracy: Vec::new(),
                    val_argmax_accuracy: 0.0,
                    val_same_cosine: embedder.val_same_cosine,
                    val_cross_cosine: embedder.val_cross_cosine,
                };
                (meta, encode_tensors(&tensors))
            }
        };
        write_file(&dir.join(PARAMS_FILE), &bytes)?;
        write_json(&dir.join(CONFIG_FILE), &meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: RewardMeta = read_json(&dir.join(CONFIG_FILE))?;
        let tensors = decode_tensors(&read_file(&dir.join(PARAMS_FILE))?)?;
        let by_name: HashMap<&str, &Vec<f64>> = tensors.iter().map(|t| (t.name.as_str(), &t.data)).collect();
        let get = |name: &str| -> Result<&Vec<f64>> {
            by_name
                .get(name)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        match meta.kind.as_str() {
            "classifier" => {
                let mut params = Vec::new();
                for n in ["w1", "b1", "w2", "b2"] {
                    params.extend_from_slice(get(n)?);
                }
                let (f, h, k) = (meta.n_features, meta.width, meta.styles.len());
                if params.len() != f * h + h + h * k + k {
                    return Err(Error::Checkpoint("classifier shape mismatch".into()));
                }
                Ok(RewardBackend::Classifier(StyleClassifier {
                    styles: meta.styles,
                    n_features: f,
                    hidden: h,
                    params,
                    val_accuracy: meta.val_accuracy,
                    val_argmax_accuracy: meta.val_argmax_accuracy,
                }))
            }
            "embedding" => {
                let params = get("projection")?.clone();
                if params.len() != meta.n_features * meta.width {
                    return Err(Error::Checkpoint("embedder shape mismatch".into()));
                }
                let style_vectors = meta
                    .styles
                    .iter()
                    .map(|s| Ok((s.clone(), Array1::from(get(&format!("style.{s}"))?.clone()))))
                    .collect::<Result<_>>()?;
                Ok(RewardBackend::Embedding {
                    embedder: StyleEmbedder {
                        n_features: meta.n_features,
                        dim: meta.width,
                        params,
                        val_same_cosine: meta.val_same_cosine,
                        val_cross_cosine: meta.val_cross_cosine,
                    },
                    style_vectors,
                })
            }
            other => Err(Error::Checkpoint(format!("unknown reward model kind {other:?}"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RewardMeta {
    kind: String,
    styles: Vec<String>,
    n_features: usize,
    /// Hidden width for the classifier, embedding size for the embedder.
    width: usize,
    val_accuracy: Vec<f64>,
    val_argmax_accuracy: f64,
    val_same_cosine: f64,
    val_cross_cosine: f64,
}

/// `LP^alpha - 1` with `LP = e^(1 - min/max)` over token lengths.
/// An empty output gets the maximum penalty `e^alpha - 1`.
pub fn length_penalty_tokens(out_len: usize, ref_len: usize, alpha: f64) -> f64 {
    let ratio = if out_len == 0 || ref_len == 0 {
        if out_len == ref_len && out_len > 0 {
            1.0
        } else {
            0.0
        }
    } else {
        out_len.min(ref_len) as f64 / out_len.max(ref_len) as f64
    };
    (alpha * (1.0 - ratio)).exp() - 1.0
}

/// Length penalty over byte-token lengths of the policy tokenizer.
pub fn length_penalty(out_text: &str, ref_text: &str, alpha: f64) -> f64 {
    length_penalty_tokens(out_text.len(), ref_text.len(), alpha)
}

/// Which reward terms enter the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Component {
    #[serde(rename = "T")]
    Toward,
    #[serde(rename = "A")]
    Away,
    #[serde(rename = "LP")]
    LengthPenalty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub alpha: f64,
    pub components: Vec<Component>,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            alpha: DEFAULT_ALPHA,
            components: vec![Component::Toward, Component::Away, Component::LengthPenalty],
        }
    }
}

impl RewardConfig {
    pub fn with_components(components: &[Component]) -> Self {
        RewardConfig {
            components: components.to_vec(),
            ..RewardConfig::default()
        }
    }

    pub fn uses(&self, c: Component) -> bool {
        self.components.contains(&c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("alpha must be non-negative".into()));
        }
        if self.components.is_empty() {
            return Err(Error::Config("reward needs at least one component".into()));
        }
        Ok(())
    }
}

/// All three terms are always computed; `total` includes only the masked-in ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub toward: f64,
    pub away: f64,
    pub length_penalty: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn compose(toward: f64, away: f64, length_penalty: f64, config: &RewardConfig) -> Self {
        let mut total = 0.0;
        if config.uses(Component::Toward) {
            total += toward;
        }
        if config.uses(Component::Away) {
            total += away;
        }
        if config.uses(Component::LengthPenalty) {
            total -= length_penalty;
        }
        RewardBreakdown {
            toward,
            away,
            length_penalty,
            total,
        }
    }
}

/// `T = SIM_sty(x, t)`, `A = 1 - SIM_sty(x, s)`, penalty against the neutral prompt text.
pub fn total_reward(
    out_text: &str,
    prompt_neutral: &str,
    source_style: StyleRef<'_>,
    target_style: StyleRef<'_>,
    backend: &RewardBackend,
    config: &RewardConfig,
) -> Result<RewardBreakdown> {
    if let (StyleRef::Id(s), StyleRef::Id(t)) = (source_style, target_style) {
        if s == t {
            return Err(Error::Data(format!(
                "source and target style are both {s:?}; toward and away would contradict"
            )));
        }
    }
    let toward = backend.sim_sty(out_text, target_style)?;
    let away = 1.0 - backend.sim_sty(out_text, source_style)?;
    let lp = length_penalty(out_text, prompt_neutral, config.alpha);
    Ok(RewardBreakdown::compose(toward, away, lp, config))
}

/// Cosine of content-lemma frequency vectors under the default style suite.
pub fn content_sim(a: &str, b: &str) -> f64 {
    content_sim_with(a, b, &default_suite())
}

pub fn content_sim_with(a: &str, b: &str, suite: &[StyleSpec]) -> f64 {
    let count = |t: &str| {
        let mut m: BTreeMap<String, f64> = BTreeMap::new();
        for l in content_lemmas(t, suite) {
            *m.entry(l).or_default() += 1.0;
        }
        m
    };
    let (ca, cb) = (count(a), count(b));
    if ca.is_empty() && cb.is_empty() {
        return 1.0;
    }
    if ca.is_empty() || cb.is_empty() {
        return 0.0;
    }
    if ca == cb {
        return 1.0;
    }
    let dot: f64 = ca.iter().filter_map(|(k, v)| cb.get(k).map(|w| v * w)).sum();
    let na: f64 = ca.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = cb.values().map(|v| v * v).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(0.0, 1.0)
}
