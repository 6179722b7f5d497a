//! Style embedder: a linear projection of n-gram features onto the unit
//! sphere, trained with a supervised contrastive loss.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::classifier::labeled_split;
use super::features::{featurize, featurize_all};
use super::RewardTrainConfig;
use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result};
use crate::policy::model::standard_normal;
use crate::policy::optim::Adam;
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleEmbedder {
    pub n_features: usize,
    pub dim: usize,
    /// Projection, features x dim, row-major.
    pub params: Vec<f64>,
    /// Mean cosine of same-style and cross-style validation pairs.
    pub val_same_cosine: f64,
    pub val_cross_cosine: f64,
}

fn normalize_rows(z: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = z.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(1e-12));
    let e = z / &norms.view().insert_axis(Axis(1));
    (e, norms)
}

/// Supervised contrastive loss over one batch of unit embeddings, averaged
/// over anchors that have at least one positive. Returns loss and dL/dE.
pub(crate) fn supcon(e: &Array2<f64>, labels: &[usize], temperature: f64) -> (f64, Array2<f64>) {
    let n = e.nrows();
    let s = e.dot(&e.t()) / temperature;
    let mut ds = Array2::<f64>::zeros((n, n));
    let mut loss = 0.0;
    let anchors: Vec<usize> = (0..n)
        .filter(|&i| (0..n).any(|j| j != i && labels[j] == labels[i]))
        .collect();
    if anchors.is_empty() {
        return (0.0, Array2::zeros(e.dim()));
    }
    let scale = 1.0 / anchors.len() as f64;
    for &i in &anchors {
        let m = (0..n)
            .filter(|&a| a != i)
            .fold(f64::NEG_INFINITY, |acc, a| acc.max(s[[i, a]]));
        let z: f64 = (0..n).filter(|&a| a != i).map(|a| (s[[i, a]] - m).exp()).sum();
        let lse = m + z.ln();
        let pos: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        let np = pos.len() as f64;
        for &p in &pos {
            loss -= scale * (s[[i, p]] - lse) / np;
        }
        for a in (0..n).filter(|&a| a != i) {
            let soft = (s[[i, a]] - lse).exp();
            let target = if labels[a] == labels[i] { 1.0 / np } else { 0.0 };
            ds[[i, a]] += scale * (soft - target);
        }
    }
    let de = (&ds + &ds.t()).dot(e) / temperature;
    (loss, de)
}

impl StyleEmbedder {
    fn projection(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.n_features, self.dim), &self.params).expect("layout")
    }

    pub fn embed_features(&self, x: &Array2<f64>) -> Array2<f64> {
        normalize_rows(&x.dot(&self.projection())).0
    }

    /// Unit-norm style embedding of one text.
    pub fn embed(&self, text: &str) -> Array1<f64> {
        let x = featurize(text, self.n_features).insert_axis(Axis(0));
        self.embed_features(&x).row(0).to_owned()
    }

    pub(crate) fn loss_and_grad(&self, x: &Array2<f64>, labels: &[usize], temperature: f64, grads: &mut [f64]) -> f64 {
        let z = x.dot(&self.projection());
        let (e, norms) = normalize_rows(&z);
        let (loss, de) = supcon(&e, labels, temperature);
        let mut dz = de.clone();
        for i in 0..e.nrows() {
            let dot = e.row(i).dot(&de.row(i));
            let mut row = dz.row_mut(i);
            row.scaled_add(-dot, &e.row(i));
            row /= norms[i];
        }
        let dw = x.t().dot(&dz);
        for (g, d) in grads.iter_mut().zip(dw.iter()) {
            *g += d;
        }
        loss
    }
}

/// Mean of unit embeddings, re-normalized.
pub fn author_embedding(embedder: &StyleEmbedder, texts: &[String]) -> Result<Array1<f64>> {
    if texts.is_empty() {
        return Err(Error::Data("author embedding needs at least one text".into()));
    }
    let x = featurize_all(texts, embedder.n_features);
    let e = embedder.embed_features(&x);
    mean_direction(&e)
}

/// Normalized mean of the rows of `e`.
pub fn mean_direction(e: &Array2<f64>) -> Result<Array1<f64>> {
    let mean = e.sum_axis(Axis(0)) / e.nrows() as f64;
    let norm = mean.dot(&mean).sqrt();
    if norm < 1e-12 {
        return Err(Error::Data("embeddings cancel out; mean direction undefined".into()));
    }
    Ok(mean / norm)
}

pub fn train_style_embedder(corpus: &Corpus, config: &RewardTrainConfig, seed: u64) -> Result<StyleEmbedder> {
    config.validate()?;
    let (texts, labels) = labeled_split(corpus, Split::Train, 2)?;
    let (f, d) = (config.n_features, config.embed_dim);
    let mut rng = rng_for(seed, "embedder/init");
    let s = 1.0 / (f as f64).sqrt();
    let mut model = StyleEmbedder {
        n_features: f,
        dim: d,
        params: (0..f * d).map(|_| s * standard_normal(&mut rng)).collect(),
        val_same_cosine: 0.0,
        val_cross_cosine: 0.0,
    };
    let x = featurize_all(&texts, f);
    let mut opt = Adam::new(f * d, config.learning_rate);
    let mut grads = vec![0.0; f * d];
    let mut order: Vec<usize> = (0..texts.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng_for(seed, &format!("embedder/epoch{epoch}")));
        for chunk in order.chunks(config.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let lb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            grads.fill(0.0);
            let loss = model.loss_and_grad(&xb, &lb, config.temperature, &mut grads);
            if !loss.is_finite() {
                return Err(Error::Diverged { step: opt.steps() });
            }
            opt.step(&mut model.params, &grads);
        }
    }
    let (vt, vl) = labeled_split(corpus, Split::Val, 0)?;
    let (same, cross) = separation(&model, &vt, &vl);
    log::info!("embedder validation cosine same {same:.3} cross {cross:.3}");
    model.val_same_cosine = same;
    model.val_cross_cosine = cross;
    Ok(model)
}

/// Mean cosine over same-style and cross-style pairs.
pub fn separation(model: &StyleEmbedder, texts: &[String], labels: &[usize]) -> (f64, f64) {
    if texts.is_empty() {
        return (0.0, 0.0);
    }
    let e = model.embed_features(&featurize_all(texts, model.n_features));
    let sims = e.dot(&e.t());
    let (mut same, mut ns, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..texts.len() {
        for j in i + 1..texts.len() {
            if labels[i] == labels[j] {
                same += sims[[i, j]];
                ns += 1;
            } else {
                cross += sims[[i, j]];
                nc += 1;
            }
        }
    }
    (same / ns.max(1) as f64, cross / nc.max(1) as f64)
}
