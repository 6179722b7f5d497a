//! Style transfer metrics: angular similarity, individual and community
//! toward/away/confusion, content preservation and the joint score.

pub mod ttest;

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::corpus::{detect_style, find_spec, StyleSpec};
use crate::error::{Error, Result};
use crate::paraphraser::{read_jsonl, write_jsonl};
use crate::reward::classifier::StyleClassifier;
use crate::reward::embedder::{author_embedding, StyleEmbedder};
use crate::reward::content_sim;

pub use ttest::{align_units, resampled_paired_ttest, TTestConfig, TTestResult};

/// Denominators at or below this are treated as zero.
const DEGENERATE: f64 = 1e-12;

/// `1 - arccos(cos(u, v)) / pi`.
pub fn angular_sim(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Data(format!("vector lengths differ: {} vs {}", u.len(), v.len())));
    }
    let uu = u.dot(&u);
    let vv = v.dot(&v);
    if uu == 0.0 || vv == 0.0 {
        return Err(Error::Data("angular similarity of a zero vector".into()));
    }
    // a single square root keeps cos(u, u) exactly 1
    let cos = (u.dot(&v) / (uu * vv).sqrt()).clamp(-1.0, 1.0);
    Ok(1.0 - cos.acos() / std::f64::consts::PI)
}

/// Similarities among output, source and target style vectors.
#[derive(Debug, Clone, Copy)]
struct Triple {
    out_src: f64,
    out_tgt: f64,
    tgt_src: f64,
}

impl Triple {
    fn new(out: ArrayView1<f64>, src: ArrayView1<f64>, tgt: ArrayView1<f64>) -> Result<Self> {
        Ok(Triple {
            out_src: angular_sim(out, src)?,
            out_tgt: angular_sim(out, tgt)?,
            tgt_src: angular_sim(tgt, src)?,
        })
    }

    fn denominator(&self) -> Option<f64> {
        let d = 1.0 - self.tgt_src;
        (d > DEGENERATE).then_some(d)
    }
}

/// `None` when source and target vectors are parallel.
pub fn toward_individual(out: ArrayView1<f64>, src: ArrayView1<f64>, tgt: ArrayView1<f64>) -> Result<Option<f64>> {
    let s = Triple::new(out, src, tgt)?;
    Ok(s.denominator().map(|d| (1.0 - s.out_src.max(s.tgt_src)) / d))
}

/// `None` when source and target vectors are parallel.
pub fn away_individual(out: ArrayView1<f64>, src: ArrayView1<f64>, tgt: ArrayView1<f64>) -> Result<Option<f64>> {
    let s = Triple::new(out, src, tgt)?;
    Ok(s.denominator().map(|d| (s.out_tgt - s.tgt_src).max(0.0) / d))
}

/// 1 when the output is strictly closer to the target than to the source.
pub fn confusion_individual(out: ArrayView1<f64>, src: ArrayView1<f64>, tgt: ArrayView1<f64>) -> Result<f64> {
    let s = Triple::new(out, src, tgt)?;
    Ok(if s.out_tgt > s.out_src { 1.0 } else { 0.0 })
}

/// Classifier decisions for one (source, target) group of documents.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DecisionTable {
    /// `C_t` on the source documents.
    pub src_is_target: Vec<bool>,
    /// `C_t` on the outputs.
    pub out_is_target: Vec<bool>,
    /// `C_s` on the source documents.
    pub src_is_source: Vec<bool>,
    /// `C_s` on the outputs.
    pub out_is_source: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommunityPairScores {
    /// `None` when every source document is already classified as the target.
    pub toward: Option<f64>,
    /// `None` when no source document is classified as the source.
    pub away: Option<f64>,
    pub confusion: f64,
}

fn count(v: &[bool]) -> usize {
    v.iter().filter(|b| **b).count()
}

pub fn community_pair_scores(table: &DecisionTable) -> Result<CommunityPairScores> {
    let n = table.src_is_target.len();
    if n == 0 || [&table.out_is_target, &table.src_is_source, &table.out_is_source].iter().any(|v| v.len() != n) {
        return Err(Error::Data("decision table columns must be non-empty and equally long".into()));
    }
    let src_t = count(&table.src_is_target) as f64;
    let out_t = count(&table.out_is_target) as f64;
    let src_s = count(&table.src_is_source) as f64;
    let out_s = count(&table.out_is_source) as f64;
    let toward = (n as f64 - src_t > 0.0).then(|| ((out_t - src_t) / (n as f64 - src_t)).max(0.0));
    let away = (src_s > 0.0).then(|| ((src_s - out_s) / src_s).max(0.0));
    let confused = table
        .out_is_target
        .iter()
        .zip(&table.out_is_source)
        .filter(|(t, s)| **t && !**s)
        .count();
    Ok(CommunityPairScores {
        toward,
        away,
        confusion: confused as f64 / n as f64,
    })
}

/// `G(G(toward, away), content)` with `G` the geometric mean.
pub fn joint_score(toward: f64, away: f64, content: f64) -> Result<f64> {
    if [toward, away, content].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Data(format!(
            "joint score inputs must be finite and non-negative: {toward}, {away}, {content}"
        )));
    }
    Ok(((toward * away).sqrt() * content).sqrt())
}

/// One transferred text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub id: String,
    pub source_text: String,
    pub transferred_text: String,
    pub source_style: String,
    pub target_style: String,
    /// Output of the paraphrase hop, when recorded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neutral: Option<String>,
}

pub fn write_records(path: &Path, records: &[TransferRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn read_records(path: &Path) -> Result<Vec<TransferRecord>> {
    read_jsonl(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Individual,
    Community,
}

/// The frozen style models an evaluation reads from.
#[derive(Debug, Clone, Copy)]
pub enum StyleModels<'a> {
    /// Target style vectors come from held-out texts of each target style.
    Individual {
        embedder: &'a StyleEmbedder,
        target_texts: &'a BTreeMap<String, Vec<String>>,
    },
    Community { classifier: &'a StyleClassifier },
}

impl StyleModels<'_> {
    pub fn mode(&self) -> EvalMode {
        match self {
            StyleModels::Individual { .. } => EvalMode::Individual,
            StyleModels::Community { .. } => EvalMode::Community,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub source_style: String,
    pub target_style: String,
    pub n: usize,
    pub toward: Option<f64>,
    pub away: Option<f64>,
    pub confusion: f64,
    pub content: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_confusion: Option<f64>,
}

impl PairReport {
    /// Unit key for paired comparisons.
    pub fn key(&self) -> String {
        format!("{}->{}", self.source_style, self.target_style)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: EvalMode,
    pub n_records: usize,
    pub toward: f64,
    pub away: f64,
    pub confusion: f64,
    pub content: f64,
    pub joint: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_confusion: Option<f64>,
    pub per_pair: Vec<PairReport>,
    /// Pairs excluded from an aggregate, with the reason.
    pub warnings: Vec<String>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Passes the target detector and fails the source detector.
fn oracle_hit(text: &str, source: &StyleSpec, target: &StyleSpec) -> f64 {
    if detect_style(text, target) && !detect_style(text, source) {
        1.0
    } else {
        0.0
    }
}

/// Scores a set of transfer records. Pairs are weighted equally; within a pair
/// records are processed in id order so aggregates do not depend on input order.
/// `oracle` supplies the synthetic style definitions when available.
pub fn evaluate_run(records: &[TransferRecord], models: StyleModels<'_>, oracle: Option<&[StyleSpec]>) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::Data("no transfer records to evaluate".into()));
    }
    let mut groups: BTreeMap<(&str, &str), Vec<&TransferRecord>> = BTreeMap::new();
    for r in records {
        if r.source_style == r.target_style {
            return Err(Error::Data(format!("record {} has identical source and target style", r.id)));
        }
        groups.entry((&r.source_style, &r.target_style)).or_default().push(r);
    }
    let mut warnings = Vec::new();
    let mut per_pair = Vec::with_capacity(groups.len());
    for ((s, t), mut group) in groups {
        group.sort_by(|a, b| a.id.cmp(&b.id).then(a.transferred_text.cmp(&b.transferred_text)));
        let outs: Vec<String> = group.iter().map(|r| r.transferred_text.clone()).collect();
        let srcs: Vec<String> = group.iter().map(|r| r.source_text.clone()).collect();
        let (toward, away, confusion) = match models {
            StyleModels::Individual { embedder, target_texts } => {
                let tgt_texts = target_texts
                    .get(t)
                    .filter(|v| !v.is_empty())
                    .ok_or_else(|| Error::UnknownStyle(t.to_string()))?;
                let v_out = author_embedding(embedder, &outs)?;
                let v_src = author_embedding(embedder, &srcs)?;
                let v_tgt = author_embedding(embedder, tgt_texts)?;
                let (o, sv, tv) = (v_out.view(), v_src.view(), v_tgt.view());
                let toward = toward_individual(o, sv, tv)?;
                if toward.is_none() {
                    warnings.push(format!("{s}->{t}: source and target vectors coincide; excluded"));
                }
                (toward, away_individual(o, sv, tv)?, confusion_individual(o, sv, tv)?)
            }
            StyleModels::Community { classifier } => {
                let decide = |texts: &[String], style: &str| -> Result<Vec<bool>> {
                    texts.iter().map(|x| classifier.decision(x, style)).collect()
                };
                let table = DecisionTable {
                    src_is_target: decide(&srcs, t)?,
                    out_is_target: decide(&outs, t)?,
                    src_is_source: decide(&srcs, s)?,
                    out_is_source: decide(&outs, s)?,
                };
                let c = community_pair_scores(&table)?;
                if c.toward.is_none() {
                    warnings.push(format!("{s}->{t}: every source already classified as target; toward excluded"));
                }
                if c.away.is_none() {
                    warnings.push(format!("{s}->{t}: no source classified as source; away excluded"));
                }
                (c.toward, c.away, c.confusion)
            }
        };
        let content = mean(group.iter().map(|r| content_sim(&r.source_text, &r.transferred_text))).expect("non-empty group");
        let oracle_confusion = match oracle {
            Some(suite) => {
                let (src_spec, tgt_spec) = (find_spec(suite, s)?, find_spec(suite, t)?);
                mean(outs.iter().map(|o| oracle_hit(o, src_spec, tgt_spec)))
            }
            None => None,
        };
        per_pair.push(PairReport {
            source_style: s.to_string(),
            target_style: t.to_string(),
            n: group.len(),
            toward,
            away,
            confusion,
            content,
            oracle_confusion,
        });
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let toward = mean(per_pair.iter().filter_map(|p| p.toward))
        .ok_or_else(|| Error::Data("toward is undefined for every pair".into()))?;
    let away = mean(per_pair.iter().filter_map(|p| p.away))
        .ok_or_else(|| Error::Data("away is undefined for every pair".into()))?;
    let confusion = mean(per_pair.iter().map(|p| p.confusion)).expect("non-empty");
    let mut sorted: Vec<&TransferRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.id, &a.source_style, &a.target_style, &a.transferred_text).cmp(&(&b.id, &b.source_style, &b.target_style, &b.transferred_text))
    });
    let content = mean(sorted.iter().map(|r| content_sim(&r.source_text, &r.transferred_text))).expect("non-empty");
    let oracle_confusion = match oracle {
        Some(suite) => {
            let hits = sorted
                .iter()
                .map(|r| Ok(oracle_hit(&r.transferred_text, find_spec(suite, &r.source_style)?, find_spec(suite, &r.target_style)?)))
                .collect::<Result<Vec<f64>>>()?;
            mean(hits.into_iter())
        }
        None => None,
    };
    Ok(MetricsReport {
        mode: models.mode(),
        n_records: records.len(),
        toward,
        away,
        confusion,
        content,
        joint: joint_score(toward, away, content)?,
        oracle_confusion,
        per_pair,
        warnings,
    })
}

/// Per-pair values of one metric keyed by `source->target`, for paired tests.
pub fn pair_units(report: &MetricsReport, metric: &str) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for p in &report.per_pair {
        let v = match metric {
            "toward" => p.toward,
            "away" => p.away,
            "confusion" => Some(p.confusion),
            "content" => Some(p.content),
            "oracle_confusion" => p.oracle_confusion,
            other => return Err(Error::Config(format!("unknown metric {other:?}"))),
        };
        if let Some(v) = v {
            out.insert(p.key(), v);
        }
    }
    Ok(out)
}

/// Per-document values of one community metric keyed by `id->target`, for
/// paired tests. toward counts an output classified as the target among
/// documents whose source was not; away counts an output no longer classified
/// as the source among documents whose source was. Other documents carry no
/// unit for that metric. The oracle confusion units average to the report's
/// aggregate exactly.
pub fn document_units(
    records: &[TransferRecord],
    classifier: &StyleClassifier,
    oracle: Option<&[StyleSpec]>,
    metric: &str,
) -> Result<BTreeMap<String, f64>> {
    let indicator = |b: bool| if b { 1.0 } else { 0.0 };
    let mut out = BTreeMap::new();
    for r in records {
        let (s, t) = (r.source_style.as_str(), r.target_style.as_str());
        let v = match metric {
            "toward" => (!classifier.decision(&r.source_text, t)?)
                .then(|| classifier.decision(&r.transferred_text, t).map(indicator))
                .transpose()?,
            "away" => classifier
                .decision(&r.source_text, s)?
                .then(|| classifier.decision(&r.transferred_text, s).map(|b| indicator(!b)))
                .transpose()?,
            "confusion" => Some(indicator(
                classifier.decision(&r.transferred_text, t)? && !classifier.decision(&r.transferred_text, s)?,
            )),
            "content" => Some(content_sim(&r.source_text, &r.transferred_text)),
            "oracle_confusion" => {
                let suite = oracle.ok_or_else(|| Error::Config("oracle_confusion units need style definitions".into()))?;
                Some(oracle_hit(&r.transferred_text, find_spec(suite, s)?, find_spec(suite, t)?))
            }
            other => return Err(Error::Config(format!("unknown metric {other:?}"))),
        };
        if let Some(v) = v {
            let key = format!("{}->{t}", r.id);
            if out.insert(key.clone(), v).is_some() {
                return Err(Error::Data(format!("duplicate document unit {key}")));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
