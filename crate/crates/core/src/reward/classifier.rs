//! Multi-head binary style classifier: a shared tanh layer over n-gram
//! features and one sigmoid head per style, trained one-vs-rest.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::features::{featurize, featurize_all};
use super::RewardTrainConfig;
use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result};
use crate::policy::model::standard_normal;
use crate::policy::optim::Adam;
use crate::seed::rng_for;

/// Minimum number of training texts per style.
pub const MIN_ITEMS_PER_STYLE: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleClassifier {
    pub styles: Vec<String>,
    pub n_features: usize,
    pub hidden: usize,
    /// Flat parameters: w1 (features x hidden), b1, w2 (hidden x styles), b2.
    pub params: Vec<f64>,
    /// One-vs-rest accuracy of each head on the validation split.
    pub val_accuracy: Vec<f64>,
    /// Accuracy of the argmax head on the validation split.
    pub val_argmax_accuracy: f64,
}

struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    total: usize,
}

fn offsets(f: usize, h: usize, k: usize) -> Offsets {
    let w1 = 0;
    let b1 = w1 + f * h;
    let w2 = b1 + h;
    let b2 = w2 + h * k;
    Offsets {
        w1,
        b1,
        w2,
        b2,
        total: b2 + k,
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
pub(crate) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl StyleClassifier {
    fn off(&self) -> Offsets {
        offsets(self.n_features, self.hidden, self.styles.len())
    }

    fn views(&self) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>, ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let o = self.off();
        let (f, h, k) = (self.n_features, self.hidden, self.styles.len());
        let p = &self.params;
        (
            ArrayView2::from_shape((f, h), &p[o.w1..o.b1]).expect("layout"),
            ArrayView1::from(&p[o.b1..o.w2]),
            ArrayView2::from_shape((h, k), &p[o.w2..o.b2]).expect("layout"),
            ArrayView1::from(&p[o.b2..o.total]),
        )
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let (w1, b1, w2, b2) = self.views();
        let hid = (x.dot(&w1) + b1).mapv(f64::tanh);
        let logits = hid.dot(&w2) + b2;
        (hid, logits)
    }

    /// Mean binary cross-entropy over all heads and rows; accumulates its gradient.
    pub(crate) fn loss_and_grad(&self, x: &Array2<f64>, y: &Array2<f64>, grads: &mut [f64]) -> f64 {
        let (hid, logits) = self.forward(x);
        let n = (y.len()) as f64;
        let mut loss = 0.0;
        let mut dz = Array2::zeros(logits.dim());
        ndarray::Zip::from(&mut dz)
            .and(&logits)
            .and(y)
            .for_each(|d, &z, &t| {
                loss += softplus(z) - t * z;
                *d = (sigmoid(z) - t) / n;
            });
        let o = self.off();
        let (f, h, k) = (self.n_features, self.hidden, self.styles.len());
        let (_, _, w2, _) = self.views();
        let dw2 = hid.t().dot(&dz);
        let db2 = dz.sum_axis(Axis(0));
        let dhid = dz.dot(&w2.t()) * hid.mapv(|v| 1.0 - v * v);
        let dw1 = x.t().dot(&dhid);
        let db1 = dhid.sum_axis(Axis(0));
        add(&mut grads[o.w1..o.b1], dw1.as_slice().expect("contiguous"));
        add(&mut grads[o.b1..o.w2], db1.as_slice().expect("contiguous"));
        add(&mut grads[o.w2..o.b2], dw2.as_slice().expect("contiguous"));
        add(&mut grads[o.b2..o.total], db2.as_slice().expect("contiguous"));
        debug_assert_eq!((f * h + h + h * k + k), o.total);
        loss / n
    }

    pub fn style_index(&self, style: &str) -> Result<usize> {
        self.styles
            .iter()
            .position(|s| s == style)
            .ok_or_else(|| Error::UnknownStyle(style.to_string()))
    }

    /// `p_s(x)` for every head, in `styles` order.
    pub fn probabilities(&self, text: &str) -> Array1<f64> {
        let x = featurize(text, self.n_features).insert_axis(Axis(0));
        self.forward(&x).1.row(0).mapv(sigmoid)
    }

    pub fn probability(&self, text: &str, style: &str) -> Result<f64> {
        let k = self.style_index(style)?;
        Ok(self.probabilities(text)[k])
    }

    /// `C_s(x) = p_s(x) > 0.5`.
    pub fn decision(&self, text: &str, style: &str) -> Result<bool> {
        Ok(self.probability(text, style)? > 0.5)
    }

    pub fn predict(&self, text: &str) -> &str {
        let p = self.probabilities(text);
        let best = (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b });
        &self.styles[best]
    }
}

fn add(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Train-split texts and style indices; fails when a style has too few items.
pub(crate) fn labeled_split(corpus: &Corpus, split: Split, min_per_style: usize) -> Result<(Vec<String>, Vec<usize>)> {
    if corpus.styles().len() < 2 {
        return Err(Error::Data("reward models need at least two styles".into()));
    }
    let items = corpus.split_items(split);
    let mut texts = Vec::with_capacity(items.len());
    let mut labels = Vec::with_capacity(items.len());
    let mut counts = vec![0usize; corpus.styles().len()];
    for item in items {
        let k = corpus
            .styles()
            .iter()
            .position(|s| *s == item.style)
            .ok_or_else(|| Error::UnknownStyle(item.style.clone()))?;
        counts[k] += 1;
        texts.push(item.text.clone());
        labels.push(k);
    }
    if let Some((k, c)) = counts.iter().enumerate().find(|(_, c)| **c < min_per_style) {
        return Err(Error::Data(format!(
            "style {} has {c} {} items, need at least {min_per_style}",
            corpus.styles()[k],
            split.as_str()
        )));
    }
    Ok((texts, labels))
}

pub fn train_style_classifier(corpus: &Corpus, config: &RewardTrainConfig, seed: u64) -> Result<StyleClassifier> {
    config.validate()?;
    let (texts, labels) = labeled_split(corpus, Split::Train, MIN_ITEMS_PER_STYLE)?;
    let styles = corpus.styles().to_vec();
    let (f, h, k) = (config.n_features, config.hidden, styles.len());
    let o = offsets(f, h, k);
    let mut rng = rng_for(seed, "classifier/init");
    let mut params = vec![0.0; o.total];
    let s1 = 1.0 / (f as f64).sqrt();
    let s2 = 1.0 / (h as f64).sqrt();
    for v in &mut params[o.w1..o.b1] {
        *v = s1 * standard_normal(&mut rng);
    }
    for v in &mut params[o.w2..o.b2] {
        *v = s2 * standard_normal(&mut rng);
    }
    let mut model = StyleClassifier {
        styles,
        n_features: f,
        hidden: h,
        params,
        val_accuracy: Vec::new(),
        val_argmax_accuracy: 0.0,
    };
    let x = featurize_all(&texts, f);
    let mut y = Array2::zeros((texts.len(), k));
    for (i, &l) in labels.iter().enumerate() {
        y[[i, l]] = 1.0;
    }
    let mut opt = Adam::new(o.total, config.learning_rate);
    let mut grads = vec![0.0; o.total];
    let mut order: Vec<usize> = (0..texts.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng_for(seed, &format!("classifier/epoch{epoch}")));
        for chunk in order.chunks(config.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let yb = y.select(Axis(0), chunk);
            grads.fill(0.0);
            let loss = model.loss_and_grad(&xb, &yb, &mut grads);
            if !loss.is_finite() {
                return Err(Error::Diverged { step: opt.steps() });
            }
            opt.step(&mut model.params, &grads);
        }
    }
    let (val_texts, val_labels) = labeled_split(corpus, Split::Val, 0)?;
    let (per_head, argmax) = accuracy(&model, &val_texts, &val_labels);
    log::info!("classifier validation accuracy per head {per_head:?}, argmax {argmax:.3}");
    model.val_accuracy = per_head;
    model.val_argmax_accuracy = argmax;
    Ok(model)
}

/// One-vs-rest accuracy of each head and argmax accuracy.
pub fn accuracy(model: &StyleClassifier, texts: &[String], labels: &[usize]) -> (Vec<f64>, f64) {
    let k = model.styles.len();
    if texts.is_empty() {
        return (vec![0.0; k], 0.0);
    }
    let mut head_hits = vec![0usize; k];
    let mut argmax_hits = 0usize;
    for (t, &l) in texts.iter().zip(labels) {
        let p = model.probabilities(t);
        for j in 0..k {
            if (p[j] > 0.5) == (j == l) {
                head_hits[j] += 1;
            }
        }
        let best = (0..k).fold(0, |b, i| if p[i] > p[b] { i } else { b });
        if best == l {
            argmax_hits += 1;
        }
    }
    let n = texts.len() as f64;
    (
        head_hits.iter().map(|&h| h as f64 / n).collect(),
        argmax_hits as f64 / n,
    )
}
