//! A small pre-norm decoder-only transformer with hand-written backprop.
//!
//! Parameters live in one flat `Vec<f64>`; [`ParamIndex`] records where each
//! tensor sits. Gradients use the same layout, which keeps the optimizer,
//! finite-difference checks and checkpointing trivial.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_length: usize,
    pub n_segments: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("context_length", self.context_length),
            ("n_segments", self.n_segments),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    w_qkv: usize,
    b_qkv: usize,
    w_o: usize,
    b_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_fc1: usize,
    b_fc1: usize,
    w_fc2: usize,
    b_fc2: usize,
}

/// Offsets of every tensor in the flat parameter vector.
#[derive(Debug, Clone)]
pub struct ParamIndex {
    tok_emb: usize,
    pos_emb: usize,
    seg_emb: usize,
    layers: Vec<LayerIdx>,
    lnf_g: usize,
    lnf_b: usize,
    w_head: usize,
    b_head: usize,
    w_value: usize,
    b_value: usize,
    /// (name, offset, shape) in storage order.
    pub tensors: Vec<(String, usize, Vec<usize>)>,
    pub total: usize,
}

impl ParamIndex {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut tensors = Vec::new();
        let mut total = 0usize;
        let mut add = |name: String, shape: Vec<usize>| -> usize {
            let off = total;
            total += shape.iter().product::<usize>();
            tensors.push((name, off, shape));
            off
        };
        let tok_emb = add("tok_emb".into(), vec![cfg.vocab_size, d]);
        let pos_emb = add("pos_emb".into(), vec![cfg.context_length, d]);
        let seg_emb = add("seg_emb".into(), vec![cfg.n_segments, d]);
        let layers = (0..cfg.n_layers)
            .map(|l| LayerIdx {
                ln1_g: add(format!("layer{l}.ln1.g"), vec![d]),
                ln1_b: add(format!("layer{l}.ln1.b"), vec![d]),
                w_qkv: add(format!("layer{l}.attn.w_qkv"), vec![d, 3 * d]),
                b_qkv: add(format!("layer{l}.attn.b_qkv"), vec![3 * d]),
                w_o: add(format!("layer{l}.attn.w_o"), vec![d, d]),
                b_o: add(format!("layer{l}.attn.b_o"), vec![d]),
                ln2_g: add(format!("layer{l}.ln2.g"), vec![d]),
                ln2_b: add(format!("layer{l}.ln2.b"), vec![d]),
                w_fc1: add(format!("layer{l}.mlp.w_fc1"), vec![d, 4 * d]),
                b_fc1: add(format!("layer{l}.mlp.b_fc1"), vec![4 * d]),
                w_fc2: add(format!("layer{l}.mlp.w_fc2"), vec![4 * d, d]),
                b_fc2: add(format!("layer{l}.mlp.b_fc2"), vec![d]),
            })
            .collect();
        let lnf_g = add("ln_f.g".into(), vec![d]);
        let lnf_b = add("ln_f.b".into(), vec![d]);
        let w_head = add("head.w".into(), vec![d, cfg.vocab_size]);
        let b_head = add("head.b".into(), vec![cfg.vocab_size]);
        let w_value = add("value.w".into(), vec![d]);
        let b_value = add("value.b".into(), vec![1]);
        ParamIndex {
            tok_emb,
            pos_emb,
            seg_emb,
            layers,
            lnf_g,
            lnf_b,
            w_head,
            b_head,
            w_value,
            b_value,
            tensors,
            total,
        }
    }
}

/// One tokenized sequence with its position and segment ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqInput {
    pub tokens: Vec<u32>,
    pub positions: Vec<usize>,
    pub segments: Vec<usize>,
}

impl SeqInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

struct LayerCache {
    xhat1: Array2<f64>,
    rstd1: Array1<f64>,
    a: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    xhat2: Array2<f64>,
    rstd2: Array1<f64>,
    m: Array2<f64>,
    h1: Array2<f64>,
    g: Array2<f64>,
}

/// Activations of one forward pass, kept for the backward pass.
pub struct ForwardPass {
    layers: Vec<LayerCache>,
    xhat_f: Array2<f64>,
    rstd_f: Array1<f64>,
    hidden: Array2<f64>,
    /// Log-softmax over the vocabulary, one row per input position.
    pub logp: Array2<f64>,
    /// Value-head outputs, one per input position.
    pub values: Array1<f64>,
}

impl ForwardPass {
    /// `log p(tokens[t + 1] | tokens[..=t])`.
    pub fn next_token_logp(&self, tokens: &[u32], t: usize) -> f64 {
        self.logp[[t, tokens[t + 1] as usize]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    pub config: ModelConfig,
    pub params: Vec<f64>,
    index: IndexHolder,
}

// ParamIndex is derived from the config; kept out of equality checks.
#[derive(Debug, Clone)]
struct IndexHolder(ParamIndex);

impl PartialEq for IndexHolder {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn layer_norm(x: &Array2<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array2<f64>, Array1<f64>, Array2<f64>) {
    let (t, d) = x.dim();
    let mut xhat = Array2::zeros((t, d));
    let mut rstd = Array1::zeros(t);
    for i in 0..t {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            xhat[[i, j]] = (row[j] - mean) * r;
        }
    }
    let y = &xhat * &g + &b;
    (xhat, rstd, y)
}

fn layer_norm_vec(x: &Array1<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let d = x.len() as f64;
    let mean = x.sum() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let r = 1.0 / (var + LN_EPS).sqrt();
    x.mapv(|v| (v - mean) * r) * &g + &b
}

/// Backward of layer norm. Accumulates dg/db, returns dx.
fn layer_norm_backward(
    dy: &Array2<f64>,
    xhat: &Array2<f64>,
    rstd: &Array1<f64>,
    g: ArrayView1<f64>,
    mut dg: ArrayViewMut1<f64>,
    mut db: ArrayViewMut1<f64>,
) -> Array2<f64> {
    let (t, d) = dy.dim();
    dg += &(dy * xhat).sum_axis(Axis(0));
    db += &dy.sum_axis(Axis(0));
    let dxhat = dy * &g;
    let mut dx = Array2::zeros((t, d));
    for i in 0..t {
        let row = dxhat.row(i);
        let xh = xhat.row(i);
        let mean_d = row.sum() / d as f64;
        let mean_dx = row.dot(&xh) / d as f64;
        for j in 0..d {
            dx[[i, j]] = rstd[i] * (row[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

impl Transformer {
    /// Random initialization: N(0, 0.02) weights, residual projections scaled
    /// by 1/sqrt(2 L), zero biases, unit layer-norm gains, zero value head.
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let index = ParamIndex::new(&config);
        let mut params = vec![0.0; index.total];
        let resid_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        for (name, off, shape) in &index.tensors {
            let n: usize = shape.iter().product();
            let slot = &mut params[*off..off + n];
            if name.ends_with(".g") {
                slot.fill(1.0);
            } else if name.ends_with(".b")
                || name.contains(".b_")
                || name.starts_with("value.")
            {
                slot.fill(0.0);
            } else {
                let std = if name.ends_with("w_o") || name.ends_with("w_fc2") {
                    0.02 * resid_scale
                } else {
                    0.02
                };
                for v in slot.iter_mut() {
                    *v = std * standard_normal(rng);
                }
            }
        }
        Ok(Transformer {
            config,
            params,
            index: IndexHolder(index),
        })
    }

    /// Wraps an existing parameter vector; its length must match the layout.
    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let index = ParamIndex::new(&config);
        if params.len() != index.total {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                index.total,
                params.len()
            )));
        }
        Ok(Transformer {
            config,
            params,
            index: IndexHolder(index),
        })
    }

    pub fn index(&self) -> &ParamIndex {
        &self.index.0
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    fn mat(&self, off: usize, r: usize, c: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((r, c), &self.params[off..off + r * c]).expect("layout")
    }

    fn vec(&self, off: usize, n: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[off..off + n])
    }

    fn check_input(&self, input: &SeqInput) -> Result<()> {
        if input.len() > self.config.context_length {
            return Err(Error::ContextOverflow {
                id: None,
                len: input.len(),
                context: self.config.context_length,
            });
        }
        Ok(())
    }

    fn embed(&self, input: &SeqInput) -> Array2<f64> {
        let d = self.config.d_model;
        let idx = self.index();
        let tok = self.mat(idx.tok_emb, self.config.vocab_size, d);
        let pos = self.mat(idx.pos_emb, self.config.context_length, d);
        let seg = self.mat(idx.seg_emb, self.config.n_segments, d);
        let mut x = Array2::zeros((input.len(), d));
        for (i, mut row) in x.rows_mut().into_iter().enumerate() {
            row += &tok.row(input.tokens[i] as usize);
            row += &pos.row(input.positions[i]);
            row += &seg.row(input.segments[i]);
        }
        x
    }

    /// Full forward pass over one sequence with causal attention.
    pub fn forward(&self, input: &SeqInput) -> Result<ForwardPass> {
        self.check_input(input)?;
        let cfg = &self.config;
        let (d, h, dh) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
        let t = input.len();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = self.embed(input);
        let mut caches = Vec::with_capacity(cfg.n_layers);
        for li in &self.index().layers {
            let (xhat1, rstd1, a) = layer_norm(&x, self.vec(li.ln1_g, d), self.vec(li.ln1_b, d));
            let qkv = a.dot(&self.mat(li.w_qkv, d, 3 * d)) + &self.vec(li.b_qkv, 3 * d);
            let mut attn = Array2::zeros((t, d));
            let mut probs = Vec::with_capacity(h);
            for head in 0..h {
                let q = qkv.slice(s![.., head * dh..(head + 1) * dh]);
                let k = qkv.slice(s![.., d + head * dh..d + (head + 1) * dh]);
                let v = qkv.slice(s![.., 2 * d + head * dh..2 * d + (head + 1) * dh]);
                let mut p = q.dot(&k.t()) * scale;
                for i in 0..t {
                    let mut row = p.row_mut(i);
                    let m = row
                        .slice(s![..=i])
                        .fold(f64::NEG_INFINITY, |acc, &b| acc.max(b));
                    let mut sum = 0.0;
                    for j in 0..t {
                        if j <= i {
                            let e = (row[j] - m).exp();
                            row[j] = e;
                            sum += e;
                        } else {
                            row[j] = 0.0;
                        }
                    }
                    row.mapv_inplace(|e| e / sum);
                }
                attn.slice_mut(s![.., head * dh..(head + 1) * dh])
                    .assign(&p.dot(&v));
                probs.push(p);
            }
            let proj = attn.dot(&self.mat(li.w_o, d, d)) + &self.vec(li.b_o, d);
            let x1 = &x + &proj;
            let (xhat2, rstd2, m) = layer_norm(&x1, self.vec(li.ln2_g, d), self.vec(li.ln2_b, d));
            let h1 = m.dot(&self.mat(li.w_fc1, d, 4 * d)) + &self.vec(li.b_fc1, 4 * d);
            let g = h1.mapv(gelu);
            let x2 = &x1 + &(g.dot(&self.mat(li.w_fc2, 4 * d, d)) + &self.vec(li.b_fc2, d));
            caches.push(LayerCache {
                xhat1,
                rstd1,
                a,
                qkv,
                probs,
                attn,
                xhat2,
                rstd2,
                m,
                h1,
                g,
            });
            x = x2;
        }
        let idx = self.index();
        let (xhat_f, rstd_f, hidden) = layer_norm(&x, self.vec(idx.lnf_g, d), self.vec(idx.lnf_b, d));
        let logits = hidden.dot(&self.mat(idx.w_head, d, cfg.vocab_size))
            + &self.vec(idx.b_head, cfg.vocab_size);
        let values = hidden.dot(&self.vec(idx.w_value, d)) + self.params[idx.b_value];
        Ok(ForwardPass {
            layers: caches,
            xhat_f,
            rstd_f,
            hidden,
            logp: log_softmax_rows(&logits),
            values,
        })
    }

    /// Accumulates into `grads` the gradient of a scalar objective whose
    /// derivative w.r.t. the logits is `dlogits` and w.r.t. the value-head
    /// outputs is `dvalues`.
    pub fn backward(
        &self,
        input: &SeqInput,
        fwd: &ForwardPass,
        dlogits: &Array2<f64>,
        dvalues: Option<&Array1<f64>>,
        grads: &mut [f64],
    ) {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer size");
        let cfg = &self.config;
        let (d, h, dh, v) = (cfg.d_model, cfg.n_heads, cfg.head_dim(), cfg.vocab_size);
        let t = input.len();
        let scale = 1.0 / (dh as f64).sqrt();
        let idx = self.index().clone();

        {
            let mut dw = mat_mut(grads, idx.w_head, d, v);
            general_mat_mul(1.0, &fwd.hidden.t(), dlogits, 1.0, &mut dw);
        }
        vec_mut(grads, idx.b_head, v).scaled_add(1.0, &dlogits.sum_axis(Axis(0)));
        let mut dhidden = dlogits.dot(&self.mat(idx.w_head, d, v).t());
        if let Some(dv) = dvalues {
            vec_mut(grads, idx.w_value, d).scaled_add(1.0, &fwd.hidden.t().dot(dv));
            grads[idx.b_value] += dv.sum();
            let wv = self.vec(idx.w_value, d);
            for i in 0..t {
                dhidden.row_mut(i).scaled_add(dv[i], &wv);
            }
        }
        let mut dx = {
            let (dg, db) = two_vecs_mut(grads, idx.lnf_g, idx.lnf_b, d);
            layer_norm_backward(&dhidden, &fwd.xhat_f, &fwd.rstd_f, self.vec(idx.lnf_g, d), dg, db)
        };

        for (li, cache) in idx.layers.iter().zip(&fwd.layers).rev() {
            // MLP
            {
                let mut dw = mat_mut(grads, li.w_fc2, 4 * d, d);
                general_mat_mul(1.0, &cache.g.t(), &dx, 1.0, &mut dw);
            }
            vec_mut(grads, li.b_fc2, d).scaled_add(1.0, &dx.sum_axis(Axis(0)));
            let dg_act = dx.dot(&self.mat(li.w_fc2, 4 * d, d).t());
            let mut dh1 = dg_act;
            ndarray::Zip::from(&mut dh1)
                .and(&cache.h1)
                .for_each(|g, &x| *g *= gelu_grad(x));
            {
                let mut dw = mat_mut(grads, li.w_fc1, d, 4 * d);
                general_mat_mul(1.0, &cache.m.t(), &dh1, 1.0, &mut dw);
            }
            vec_mut(grads, li.b_fc1, 4 * d).scaled_add(1.0, &dh1.sum_axis(Axis(0)));
            let dm = dh1.dot(&self.mat(li.w_fc1, d, 4 * d).t());
            let dx1 = {
                let (dg, db) = two_vecs_mut(grads, li.ln2_g, li.ln2_b, d);
                layer_norm_backward(&dm, &cache.xhat2, &cache.rstd2, self.vec(li.ln2_g, d), dg, db)
            } + &dx;

            // attention
            {
                let mut dw = mat_mut(grads, li.w_o, d, d);
                general_mat_mul(1.0, &cache.attn.t(), &dx1, 1.0, &mut dw);
            }
            vec_mut(grads, li.b_o, d).scaled_add(1.0, &dx1.sum_axis(Axis(0)));
            let dattn = dx1.dot(&self.mat(li.w_o, d, d).t());
            let mut dqkv = Array2::<f64>::zeros((t, 3 * d));
            for head in 0..h {
                let q = cache.qkv.slice(s![.., head * dh..(head + 1) * dh]);
                let k = cache.qkv.slice(s![.., d + head * dh..d + (head + 1) * dh]);
                let vv = cache.qkv.slice(s![.., 2 * d + head * dh..2 * d + (head + 1) * dh]);
                let p = &cache.probs[head];
                let dout = dattn.slice(s![.., head * dh..(head + 1) * dh]);
                let dp = dout.dot(&vv.t());
                let dv = p.t().dot(&dout);
                let mut ds = Array2::zeros((t, t));
                for i in 0..t {
                    let pr = p.row(i);
                    let dpr = dp.row(i);
                    let dot: f64 = (0..=i).map(|j| pr[j] * dpr[j]).sum();
                    for j in 0..=i {
                        ds[[i, j]] = pr[j] * (dpr[j] - dot) * scale;
                    }
                }
                let dq = ds.dot(&k);
                let dk = ds.t().dot(&q);
                dqkv.slice_mut(s![.., head * dh..(head + 1) * dh]).assign(&dq);
                dqkv.slice_mut(s![.., d + head * dh..d + (head + 1) * dh])
                    .assign(&dk);
                dqkv.slice_mut(s![.., 2 * d + head * dh..2 * d + (head + 1) * dh])
                    .assign(&dv);
            }
            {
                let mut dw = mat_mut(grads, li.w_qkv, d, 3 * d);
                general_mat_mul(1.0, &cache.a.t(), &dqkv, 1.0, &mut dw);
            }
            vec_mut(grads, li.b_qkv, 3 * d).scaled_add(1.0, &dqkv.sum_axis(Axis(0)));
            let da = dqkv.dot(&self.mat(li.w_qkv, d, 3 * d).t());
            dx = {
                let (dg, db) = two_vecs_mut(grads, li.ln1_g, li.ln1_b, d);
                layer_norm_backward(&da, &cache.xhat1, &cache.rstd1, self.vec(li.ln1_g, d), dg, db)
            } + &dx1;
        }

        // embeddings
        for i in 0..t {
            let row = dx.row(i);
            vec_mut(grads, idx.tok_emb + input.tokens[i] as usize * d, d).scaled_add(1.0, &row);
            vec_mut(grads, idx.pos_emb + input.positions[i] * d, d).scaled_add(1.0, &row);
            vec_mut(grads, idx.seg_emb + input.segments[i] * d, d).scaled_add(1.0, &row);
        }
    }

    /// Gradient of `sum_k w_k * log p(tokens[t_k + 1] | tokens[..=t_k])`
    /// accumulated into `grads`, plus optional value-head gradient.
    pub fn logprob_backward(
        &self,
        input: &SeqInput,
        fwd: &ForwardPass,
        weights: &[(usize, f64)],
        dvalues: Option<&Array1<f64>>,
        grads: &mut [f64],
    ) {
        let mut dlogits = Array2::zeros(fwd.logp.dim());
        for &(t, w) in weights {
            if w == 0.0 {
                continue;
            }
            let target = input.tokens[t + 1] as usize;
            let mut row = dlogits.row_mut(t);
            ndarray::Zip::from(&mut row)
                .and(fwd.logp.row(t))
                .for_each(|g, &lp| *g -= w * lp.exp());
            row[target] += w;
        }
        self.backward(input, fwd, &dlogits, dvalues, grads);
    }

    /// Starts an incremental decoding state.
    pub fn decoder(&self) -> DecodeState {
        DecodeState {
            keys: vec![Vec::new(); self.config.n_layers],
            vals: vec![Vec::new(); self.config.n_layers],
            len: 0,
        }
    }

    /// Feeds one token through the model using the key/value cache and
    /// returns the next-token logits.
    pub fn step(&self, state: &mut DecodeState, token: u32, position: usize, segment: usize) -> Result<Array1<f64>> {
        let cfg = &self.config;
        if state.len >= cfg.context_length || position >= cfg.context_length {
            return Err(Error::ContextOverflow {
                id: None,
                len: state.len + 1,
                context: cfg.context_length,
            });
        }
        let (d, h, dh) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let idx = self.index();
        let mut x: Array1<f64> = self.mat(idx.tok_emb, cfg.vocab_size, d).row(token as usize).to_owned()
            + self.mat(idx.pos_emb, cfg.context_length, d).row(position)
            + self.mat(idx.seg_emb, cfg.n_segments, d).row(segment);
        let n = state.len + 1;
        for (l, li) in idx.layers.iter().enumerate() {
            let a = layer_norm_vec(&x, self.vec(li.ln1_g, d), self.vec(li.ln1_b, d));
            let qkv = a.dot(&self.mat(li.w_qkv, d, 3 * d)) + self.vec(li.b_qkv, 3 * d);
            state.keys[l].extend(qkv.slice(s![d..2 * d]).iter());
            state.vals[l].extend(qkv.slice(s![2 * d..3 * d]).iter());
            let keys = ArrayView2::from_shape((n, d), &state.keys[l]).expect("cache layout");
            let vals = ArrayView2::from_shape((n, d), &state.vals[l]).expect("cache layout");
            let mut attn = Array1::zeros(d);
            for head in 0..h {
                let q = qkv.slice(s![head * dh..(head + 1) * dh]);
                let k = keys.slice(s![.., head * dh..(head + 1) * dh]);
                let v = vals.slice(s![.., head * dh..(head + 1) * dh]);
                let mut sc = k.dot(&q) * scale;
                let m = sc.fold(f64::NEG_INFINITY, |acc, &b| acc.max(b));
                sc.mapv_inplace(|s| (s - m).exp());
                let sum = sc.sum();
                sc /= sum;
                attn.slice_mut(s![head * dh..(head + 1) * dh]).assign(&v.t().dot(&sc));
            }
            let x1 = &x + &(attn.dot(&self.mat(li.w_o, d, d)) + self.vec(li.b_o, d));
            let m = layer_norm_vec(&x1, self.vec(li.ln2_g, d), self.vec(li.ln2_b, d));
            let g = (m.dot(&self.mat(li.w_fc1, d, 4 * d)) + self.vec(li.b_fc1, 4 * d)).mapv(gelu);
            x = &x1 + &(g.dot(&self.mat(li.w_fc2, 4 * d, d)) + self.vec(li.b_fc2, d));
        }
        state.len = n;
        let hidden = layer_norm_vec(&x, self.vec(idx.lnf_g, d), self.vec(idx.lnf_b, d));
        Ok(hidden.dot(&self.mat(idx.w_head, d, cfg.vocab_size)) + self.vec(idx.b_head, cfg.vocab_size))
    }
}

/// Key/value cache for incremental decoding.
#[derive(Debug, Clone)]
pub struct DecodeState {
    keys: Vec<Vec<f64>>,
    vals: Vec<Vec<f64>>,
    len: usize,
}

impl DecodeState {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn mat_mut(grads: &mut [f64], off: usize, r: usize, c: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((r, c), &mut grads[off..off + r * c]).expect("layout")
}

fn vec_mut(grads: &mut [f64], off: usize, n: usize) -> ArrayViewMut1<'_, f64> {
    ArrayViewMut1::from(&mut grads[off..off + n])
}

/// Two disjoint vector views; `a` must precede `b` in the layout.
fn two_vecs_mut(grads: &mut [f64], a: usize, b: usize, n: usize) -> (ArrayViewMut1<'_, f64>, ArrayViewMut1<'_, f64>) {
    debug_assert!(a + n <= b);
    let (left, right) = grads.split_at_mut(b);
    (
        ArrayViewMut1::from(&mut left[a..a + n]),
        ArrayViewMut1::from(&mut right[..n]),
    )
}

pub(crate) fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            context_length: 16,
            n_segments: 4,
        }
    }

    fn input(tokens: Vec<u32>) -> SeqInput {
        let n = tokens.len();
        SeqInput {
            tokens,
            positions: (0..n).collect(),
            segments: (0..n).map(|i| (i / 3) % 4).collect(),
        }
    }

    #[test]
    fn log_probs_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Transformer::init(tiny_config(11), &mut rng).unwrap();
        let f = m.forward(&input(vec![1, 4, 2, 9, 3])).unwrap();
        for row in f.logp.rows() {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| *v <= 0.0));
        }
    }

    #[test]
    fn incremental_decoding_matches_full_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = Transformer::init(tiny_config(11), &mut rng).unwrap();
        // perturb everything so biases and gains matter
        for p in m.params.iter_mut() {
            *p += 0.05 * standard_normal(&mut rng);
        }
        let inp = input(vec![1, 4, 2, 9, 3, 3, 7]);
        let full = m.forward(&inp).unwrap();
        let mut st = m.decoder();
        for i in 0..inp.len() {
            let logits = m.step(&mut st, inp.tokens[i], inp.positions[i], inp.segments[i]).unwrap();
            let lse = logits.iter().map(|v| v.exp()).sum::<f64>().ln();
            for j in 0..11 {
                assert!((logits[j] - lse - full.logp[[i, j]]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn overflow_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Transformer::init(tiny_config(11), &mut rng).unwrap();
        assert!(matches!(
            m.forward(&input(vec![1; 17])),
            Err(Error::ContextOverflow { .. })
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = Transformer::init(tiny_config(7), &mut rng).unwrap();
        for p in m.params.iter_mut() {
            *p += 0.1 * standard_normal(&mut rng);
        }
        let inp = input(vec![1, 4, 2, 6, 3, 0]);
        let weights = vec![(1, -0.7), (3, 1.3), (4, -0.4)];
        let dvalues = Array1::from(vec![0.3, -0.2, 0.0, 0.5, 0.1, -0.4]);
        let objective = |m: &Transformer| {
            let f = m.forward(&inp).unwrap();
            let lp: f64 = weights
                .iter()
                .map(|&(t, w)| w * f.next_token_logp(&inp.tokens, t))
                .sum();
            lp + f.values.dot(&dvalues)
        };
        let f = m.forward(&inp).unwrap();
        let mut grads = vec![0.0; m.n_params()];
        m.logprob_backward(&inp, &f, &weights, Some(&dvalues), &mut grads);
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for i in (0..m.n_params()).step_by(7) {
            let orig = m.params[i];
            m.params[i] = orig + eps;
            let up = objective(&m);
            m.params[i] = orig - eps;
            let down = objective(&m);
            m.params[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let err = (fd - grads[i]).abs() / (fd.abs() + grads[i].abs()).max(1e-6);
            worst = worst.max(err);
        }
        assert!(worst < 1e-5, "max relative error {worst}");
    }
}
