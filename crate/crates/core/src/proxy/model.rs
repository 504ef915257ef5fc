//! Compact post-norm transformer encoder classifier with hand-written
//! reverse-mode gradients.
//!
//! Layout per layer: multi-head self-attention, residual, layer norm,
//! GELU feed-forward (`d -> ff_mult * d -> d`), residual, layer norm.
//! The encoder output is mean-pooled over non-pad positions and fed to a
//! linear head. All weights are stored `in x out` so a layer computes
//! `y = x W + b` on row vectors.

use rand::rngs::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::tensor::{axpy, dot, softmax, Matrix};
use super::vocab::{TokenizedInput, Vocab, PAD_ID};
use super::ProxyError;
use crate::corpus::{word_segment, LabelSet, WordSegmentation};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxyConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
    pub ff_mult: usize,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig {
            d_model: 64,
            heads: 4,
            layers: 2,
            max_len: 128,
            ff_mult: 4,
        }
    }
}

impl ProxyConfig {
    fn validate(&self) -> Result<(), ProxyError> {
        if self.d_model == 0 || self.heads == 0 || self.max_len == 0 || self.ff_mult == 0 {
            return Err(ProxyError::InvalidConfig(
                "dimensions must be positive".into(),
            ));
        }
        if self.d_model % self.heads != 0 {
            return Err(ProxyError::InvalidConfig(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// Scalar whose input gradient is taken.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientTarget {
    /// Pre-softmax logit of the target label.
    #[default]
    Logit,
    /// Post-softmax probability of the target label.
    Probability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub wq: Matrix,
    pub bq: Vec<f64>,
    pub wk: Matrix,
    pub bk: Vec<f64>,
    pub wv: Matrix,
    pub bv: Vec<f64>,
    pub wo: Matrix,
    pub bo: Vec<f64>,
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
}

impl EncoderLayer {
    fn init(d: usize, ff: usize, rng: &mut ChaCha8Rng) -> Self {
        let lin = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            Matrix::random_normal(rows, cols, 1.0 / (rows as f64).sqrt(), rng)
        };
        EncoderLayer {
            wq: lin(d, d, rng),
            bq: vec![0.0; d],
            wk: lin(d, d, rng),
            bk: vec![0.0; d],
            wv: lin(d, d, rng),
            bv: vec![0.0; d],
            wo: lin(d, d, rng),
            bo: vec![0.0; d],
            ln1_gamma: vec![1.0; d],
            ln1_beta: vec![0.0; d],
            w1: lin(d, ff, rng),
            b1: vec![0.0; ff],
            w2: lin(ff, d, rng),
            b2: vec![0.0; d],
            ln2_gamma: vec![1.0; d],
            ln2_beta: vec![0.0; d],
        }
    }

    fn tensors(&self) -> [&[f64]; 16] {
        [
            &self.wq.data,
            &self.bq,
            &self.wk.data,
            &self.bk,
            &self.wv.data,
            &self.bv,
            &self.wo.data,
            &self.bo,
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.w1.data,
            &self.b1,
            &self.w2.data,
            &self.b2,
            &self.ln2_gamma,
            &self.ln2_beta,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 16] {
        [
            &mut self.wq.data,
            &mut self.bq,
            &mut self.wk.data,
            &mut self.bk,
            &mut self.wv.data,
            &mut self.bv,
            &mut self.wo.data,
            &mut self.bo,
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.w1.data,
            &mut self.b1,
            &mut self.w2.data,
            &mut self.b2,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
        ]
    }
}

/// Every trainable tensor. The same struct doubles as a gradient buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub token_embedding: Matrix,
    pub positions: Matrix,
    pub layers: Vec<EncoderLayer>,
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
}

impl Parameters {
    fn init(cfg: &ProxyConfig, vocab_len: usize, n_labels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let token_embedding = Matrix::random_normal(vocab_len, d, 1.0, &mut rng);
        let positions = Matrix::random_normal(cfg.max_len, d, 0.1, &mut rng);
        let layers = (0..cfg.layers)
            .map(|_| EncoderLayer::init(d, d * cfg.ff_mult, &mut rng))
            .collect();
        let head_w = Matrix::random_normal(d, n_labels, 1.0 / (d as f64).sqrt(), &mut rng);
        Parameters {
            token_embedding,
            positions,
            layers,
            head_w,
            head_b: vec![0.0; n_labels],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Flat views in a fixed order (embedding, positions, layers, head).
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.token_embedding.data, &self.positions.data];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out.push(&self.head_w.data);
        out.push(&self.head_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> =
            vec![&mut self.token_embedding.data, &mut self.positions.data];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.push(&mut self.head_w.data);
        out.push(&mut self.head_b);
        out
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyModel {
    pub config: ProxyConfig,
    pub vocab: Vocab,
    pub labels: LabelSet,
    pub params: Parameters,
}

struct LayerTrace {
    input: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    attn: Vec<Matrix>,
    ctx: Matrix,
    xhat1: Matrix,
    inv_std1: Vec<f64>,
    h1: Matrix,
    pre_act: Matrix,
    act: Matrix,
    xhat2: Matrix,
    inv_std2: Vec<f64>,
}

/// Intermediates of one forward pass, consumed by `backward`.
pub(crate) struct Trace {
    token_ids: Vec<usize>,
    layers: Vec<LayerTrace>,
    pooled: Vec<f64>,
    pool_rows: Vec<bool>,
    pool_count: usize,
    pub(crate) logits: Vec<f64>,
}

/// Index of the largest probability; exact ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn linear(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    let mut y = x.matmul(w);
    y.add_row_vector(b);
    y
}

fn layer_norm(x: &Matrix, gamma: &[f64], beta: &[f64]) -> (Matrix, Matrix, Vec<f64>) {
    let d = x.cols;
    let mut y = Matrix::zeros(x.rows, d);
    let mut xhat = Matrix::zeros(x.rows, d);
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        let xh = xhat.row_mut(r);
        for j in 0..d {
            xh[j] = (row[j] - mean) * inv;
        }
        let yr = y.row_mut(r);
        for j in 0..d {
            yr[j] = xhat.data[r * d + j] * gamma[j] + beta[j];
        }
    }
    (y, xhat, inv_std)
}

fn layer_norm_backward(
    dy: &Matrix,
    xhat: &Matrix,
    inv_std: &[f64],
    gamma: &[f64],
    mut grads: Option<(&mut [f64], &mut [f64])>,
) -> Matrix {
    let d = dy.cols;
    let mut dx = Matrix::zeros(dy.rows, d);
    let mut dxhat = vec![0.0; d];
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let xh = xhat.row(r);
        if let Some((dg, db)) = grads.as_mut() {
            for j in 0..d {
                dg[j] += dyr[j] * xh[j];
                db[j] += dyr[j];
            }
        }
        for j in 0..d {
            dxhat[j] = dyr[j] * gamma[j];
        }
        let m1 = dxhat.iter().sum::<f64>() / d as f64;
        let m2 = dot(&dxhat, xh) / d as f64;
        let dxr = dx.row_mut(r);
        for j in 0..d {
            dxr[j] = inv_std[r] * (dxhat[j] - m1 - xh[j] * m2);
        }
    }
    dx
}

/// `dx = dy Wᵀ`, and when collecting parameter gradients
/// `dW += xᵀ dy`, `db += Σ dy`.
fn linear_backward(
    x: &Matrix,
    w: &Matrix,
    dy: &Matrix,
    grads: Option<(&mut Matrix, &mut [f64])>,
) -> Matrix {
    if let Some((gw, gb)) = grads {
        x.t_matmul_into(dy, gw);
        dy.col_sums_into(gb);
    }
    dy.matmul_t(w)
}

impl EncoderLayer {
    fn forward(&self, h: &Matrix, key_mask: &[bool], heads: usize) -> (Matrix, LayerTrace) {
        let n = h.rows;
        let d = h.cols;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = linear(h, &self.wq, &self.bq);
        let k = linear(h, &self.wk, &self.bk);
        let v = linear(h, &self.wv, &self.bv);

        let mut ctx = Matrix::zeros(n, d);
        let mut attn = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = q.columns(head * dh, dh);
            let kh = k.columns(head * dh, dh);
            let vh = v.columns(head * dh, dh);
            let mut a = qh.matmul_t(&kh);
            for i in 0..n {
                let row = a.row_mut(i);
                let mut scores: Vec<f64> = Vec::with_capacity(n);
                for j in 0..n {
                    scores.push(if key_mask[j] {
                        row[j] * scale
                    } else {
                        f64::NEG_INFINITY
                    });
                }
                row.copy_from_slice(&softmax(&scores));
            }
            ctx.set_columns(head * dh, &a.matmul(&vh));
            attn.push(a);
        }
        let mut s1 = linear(&ctx, &self.wo, &self.bo);
        s1.add_assign(h);
        let (h1, xhat1, inv_std1) = layer_norm(&s1, &self.ln1_gamma, &self.ln1_beta);

        let pre_act = linear(&h1, &self.w1, &self.b1);
        let act = Matrix {
            rows: pre_act.rows,
            cols: pre_act.cols,
            data: pre_act.data.iter().map(|&x| gelu(x)).collect(),
        };
        let mut s2 = linear(&act, &self.w2, &self.b2);
        s2.add_assign(&h1);
        let (h2, xhat2, inv_std2) = layer_norm(&s2, &self.ln2_gamma, &self.ln2_beta);

        let trace = LayerTrace {
            input: h.clone(),
            q,
            k,
            v,
            attn,
            ctx,
            xhat1,
            inv_std1,
            h1,
            pre_act,
            act,
            xhat2,
            inv_std2,
        };
        (h2, trace)
    }

    fn backward(
        &self,
        t: &LayerTrace,
        dh2: &Matrix,
        heads: usize,
        mut g: Option<&mut EncoderLayer>,
    ) -> Matrix {
        let n = dh2.rows;
        let d = dh2.cols;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let ds2 = layer_norm_backward(
            dh2,
            &t.xhat2,
            &t.inv_std2,
            &self.ln2_gamma,
            g.as_deref_mut()
                .map(|g| (g.ln2_gamma.as_mut_slice(), g.ln2_beta.as_mut_slice())),
        );
        // feed-forward branch
        let mut dact = linear_backward(
            &t.act,
            &self.w2,
            &ds2,
            g.as_deref_mut().map(|g| (&mut g.w2, g.b2.as_mut_slice())),
        );
        for (da, &u) in dact.data.iter_mut().zip(&t.pre_act.data) {
            *da *= gelu_grad(u);
        }
        let mut dh1 = linear_backward(
            &t.h1,
            &self.w1,
            &dact,
            g.as_deref_mut().map(|g| (&mut g.w1, g.b1.as_mut_slice())),
        );
        dh1.add_assign(&ds2);

        let ds1 = layer_norm_backward(
            &dh1,
            &t.xhat1,
            &t.inv_std1,
            &self.ln1_gamma,
            g.as_deref_mut()
                .map(|g| (g.ln1_gamma.as_mut_slice(), g.ln1_beta.as_mut_slice())),
        );
        // attention branch
        let dctx = linear_backward(
            &t.ctx,
            &self.wo,
            &ds1,
            g.as_deref_mut().map(|g| (&mut g.wo, g.bo.as_mut_slice())),
        );
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        for head in 0..heads {
            let a = &t.attn[head];
            let qh = t.q.columns(head * dh, dh);
            let kh = t.k.columns(head * dh, dh);
            let vh = t.v.columns(head * dh, dh);
            let dctx_h = dctx.columns(head * dh, dh);

            let da = dctx_h.matmul_t(&vh);
            let mut dvh = Matrix::zeros(n, dh);
            a.t_matmul_into(&dctx_h, &mut dvh);

            let mut dscores = Matrix::zeros(n, n);
            for i in 0..n {
                let ar = a.row(i);
                let dar = da.row(i);
                let inner = dot(ar, dar);
                let dsr = dscores.row_mut(i);
                for j in 0..n {
                    dsr[j] = ar[j] * (dar[j] - inner) * scale;
                }
            }
            let dqh = dscores.matmul(&kh);
            let mut dkh = Matrix::zeros(n, dh);
            dscores.t_matmul_into(&qh, &mut dkh);
            dq.set_columns(head * dh, &dqh);
            dk.set_columns(head * dh, &dkh);
            dv.set_columns(head * dh, &dvh);
        }
        let mut dh = ds1;
        for (w, dy, gsel) in [
            (&self.wq, &dq, 0usize),
            (&self.wk, &dk, 1),
            (&self.wv, &dv, 2),
        ] {
            let grads = g.as_deref_mut().map(|g| match gsel {
                0 => (&mut g.wq, g.bq.as_mut_slice()),
                1 => (&mut g.wk, g.bk.as_mut_slice()),
                _ => (&mut g.wv, g.bv.as_mut_slice()),
            });
            dh.add_assign(&linear_backward(&t.input, w, dy, grads));
        }
        dh
    }
}

impl ProxyModel {
    pub fn new(
        config: ProxyConfig,
        vocab: Vocab,
        labels: LabelSet,
        seed: u64,
    ) -> Result<Self, ProxyError> {
        config.validate()?;
        let params = Parameters::init(&config, vocab.len(), labels.len(), seed);
        Ok(ProxyModel {
            config,
            vocab,
            labels,
            params,
        })
    }

    /// Encoder bypassed (no layers) with a zero positional table: the
    /// logits are an affine function of the mean token embedding.
    pub fn linear(vocab: Vocab, labels: LabelSet, d_model: usize, max_len: usize, seed: u64) -> Result<Self, ProxyError> {
        let config = ProxyConfig {
            d_model,
            heads: 1,
            layers: 0,
            max_len,
            ff_mult: 1,
        };
        let mut model = ProxyModel::new(config, vocab, labels, seed)?;
        model.params.positions.data.fill(0.0);
        Ok(model)
    }

    pub fn zero_head(&mut self) {
        self.params.head_w.data.fill(0.0);
        self.params.head_b.fill(0.0);
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn tokenize(&self, seg: &WordSegmentation) -> TokenizedInput {
        self.vocab.tokenize(seg, self.config.max_len)
    }

    pub fn tokenize_text(&self, text: &str) -> (WordSegmentation, TokenizedInput) {
        let seg = word_segment(text);
        let input = self.tokenize(&seg);
        (seg, input)
    }

    fn check_input(&self, token_ids: &[usize]) -> Result<(), ProxyError> {
        if token_ids.len() > self.config.max_len {
            return Err(ProxyError::SequenceTooLong {
                len: token_ids.len(),
                max: self.config.max_len,
            });
        }
        if let Some(&bad) = token_ids.iter().find(|&&t| t >= self.vocab.len()) {
            return Err(ProxyError::TokenOutOfRange(bad));
        }
        Ok(())
    }

    /// Embedding rows for the input tokens, before positions are added.
    pub fn embeddings(&self, input: &TokenizedInput) -> Result<Matrix, ProxyError> {
        self.check_input(&input.token_ids)?;
        let d = self.config.d_model;
        let mut x = Matrix::zeros(input.len(), d);
        for (i, &t) in input.token_ids.iter().enumerate() {
            x.row_mut(i).copy_from_slice(self.params.token_embedding.row(t));
        }
        Ok(x)
    }

    pub(crate) fn forward_trace(&self, token_ids: &[usize], embedded: &Matrix) -> Trace {
        let n = token_ids.len();
        let d = self.config.d_model;
        let mut h = embedded.clone();
        for i in 0..n {
            axpy(1.0, self.params.positions.row(i), h.row_mut(i));
        }
        let non_pad: Vec<bool> = token_ids.iter().map(|&t| t != PAD_ID).collect();
        let key_mask = if non_pad.iter().any(|&b| b) {
            non_pad.clone()
        } else {
            vec![true; n]
        };
        let mut layers = Vec::with_capacity(self.params.layers.len());
        for layer in &self.params.layers {
            let (next, trace) = layer.forward(&h, &key_mask, self.config.heads);
            layers.push(trace);
            h = next;
        }
        let pool_count = non_pad.iter().filter(|&&b| b).count();
        let mut pooled = vec![0.0; d];
        if pool_count > 0 {
            for i in (0..n).filter(|&i| non_pad[i]) {
                axpy(1.0 / pool_count as f64, h.row(i), &mut pooled);
            }
        }
        let mut logits = self.params.head_b.clone();
        for (j, &p) in pooled.iter().enumerate() {
            axpy(p, self.params.head_w.row(j), &mut logits);
        }
        Trace {
            token_ids: token_ids.to_vec(),
            layers,
            pooled,
            pool_rows: non_pad,
            pool_count,
            logits,
        }
    }

    /// Propagates `dlogits` back to the input embeddings; parameter
    /// gradients are accumulated into `grads` when given.
    pub(crate) fn backward(
        &self,
        trace: &Trace,
        dlogits: &[f64],
        mut grads: Option<&mut Parameters>,
    ) -> Matrix {
        let n = trace.token_ids.len();
        let d = self.config.d_model;
        if let Some(g) = grads.as_deref_mut() {
            for (j, &p) in trace.pooled.iter().enumerate() {
                axpy(p, dlogits, g.head_w.row_mut(j));
            }
            axpy(1.0, dlogits, &mut g.head_b);
        }
        let dpooled: Vec<f64> = (0..d)
            .map(|j| dot(self.params.head_w.row(j), dlogits))
            .collect();
        let mut dh = Matrix::zeros(n, d);
        if trace.pool_count > 0 {
            let inv = 1.0 / trace.pool_count as f64;
            for i in (0..n).filter(|&i| trace.pool_rows[i]) {
                axpy(inv, &dpooled, dh.row_mut(i));
            }
        }
        for (li, layer) in self.params.layers.iter().enumerate().rev() {
            let g = grads.as_deref_mut().map(|g| &mut g.layers[li]);
            dh = layer.backward(&trace.layers[li], &dh, self.config.heads, g);
        }
        if let Some(g) = grads {
            for (i, &t) in trace.token_ids.iter().enumerate() {
                axpy(1.0, dh.row(i), g.positions.row_mut(i));
                axpy(1.0, dh.row(i), g.token_embedding.row_mut(t));
            }
        }
        dh
    }

    /// Logits for explicitly supplied token embeddings (pre-position).
    pub fn logits_from_embeddings(
        &self,
        input: &TokenizedInput,
        embedded: &Matrix,
    ) -> Result<Vec<f64>, ProxyError> {
        self.check_input(&input.token_ids)?;
        assert_eq!(embedded.rows, input.len());
        assert_eq!(embedded.cols, self.config.d_model);
        Ok(self.forward_trace(&input.token_ids, embedded).logits)
    }

    pub fn logits(&self, input: &TokenizedInput) -> Result<Vec<f64>, ProxyError> {
        let x = self.embeddings(input)?;
        Ok(self.forward_trace(&input.token_ids, &x).logits)
    }

    /// Class probabilities over the label set.
    pub fn forward(&self, input: &TokenizedInput) -> Result<Vec<f64>, ProxyError> {
        Ok(softmax(&self.logits(input)?))
    }

    pub fn predict_index(&self, input: &TokenizedInput) -> Result<usize, ProxyError> {
        Ok(argmax(&self.forward(input)?))
    }

    pub fn predict(&self, input: &TokenizedInput) -> Result<&str, ProxyError> {
        let idx = self.predict_index(input)?;
        Ok(self.labels.get(idx).expect("argmax index within label set"))
    }

    /// Gradient of the target label's score with respect to each input
    /// token's embedding: one `d_model` row per token.
    pub fn input_gradients(
        &self,
        input: &TokenizedInput,
        target: usize,
        scalar: GradientTarget,
    ) -> Result<Matrix, ProxyError> {
        if target >= self.num_labels() {
            return Err(ProxyError::LabelOutOfRange(target));
        }
        let x = self.embeddings(input)?;
        let trace = self.forward_trace(&input.token_ids, &x);
        let mut dlogits = vec![0.0; self.num_labels()];
        match scalar {
            GradientTarget::Logit => dlogits[target] = 1.0,
            GradientTarget::Probability => {
                let p = softmax(&trace.logits);
                for (l, dl) in dlogits.iter_mut().enumerate() {
                    let delta = if l == target { 1.0 } else { 0.0 };
                    *dl = p[target] * (delta - p[l]);
                }
            }
        }
        Ok(self.backward(&trace, &dlogits, None))
    }

    /// Cross-entropy of `gold` with parameter gradients accumulated into
    /// `grads` (scaled by `weight`).
    pub fn loss_and_grads(
        &self,
        input: &TokenizedInput,
        gold: usize,
        weight: f64,
        grads: &mut Parameters,
    ) -> Result<f64, ProxyError> {
        let x = self.embeddings(input)?;
        let trace = self.forward_trace(&input.token_ids, &x);
        let p = softmax(&trace.logits);
        let loss = -p[gold].max(f64::MIN_POSITIVE).ln();
        let mut dlogits: Vec<f64> = p.iter().map(|pi| pi * weight).collect();
        dlogits[gold] -= weight;
        self.backward(&trace, &dlogits, Some(grads));
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proxy::vocab::Vocab;
    use rand::RngExt;

    fn tiny_model(layers: usize, seed: u64) -> ProxyModel {
        let vocab = Vocab::build(&["alpha beta gamma delta epsilon zeta eta theta"], 40);
        let labels = LabelSet::new(["A", "B", "C"]).unwrap();
        let cfg = ProxyConfig {
            d_model: 8,
            heads: 2,
            layers,
            max_len: 8,
            ff_mult: 2,
        };
        ProxyModel::new(cfg, vocab, labels, seed).unwrap()
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut m = tiny_model(2, 3);
        m.zero_head();
        let (_, input) = m.tokenize_text("alpha beta gamma");
        for p in m.forward(&input).unwrap() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn too_long_input_is_rejected() {
        let m = tiny_model(1, 0);
        let input = TokenizedInput {
            token_ids: vec![3; 9],
            token_to_word: vec![Some(0); 9],
        };
        assert!(matches!(
            m.forward(&input),
            Err(ProxyError::SequenceTooLong { len: 9, max: 8 })
        ));
    }

    #[test]
    fn empty_input_gives_bias_softmax() {
        let m = tiny_model(1, 0);
        let input = TokenizedInput {
            token_ids: vec![],
            token_to_word: vec![],
        };
        let logits = m.logits(&input).unwrap();
        assert_eq!(logits, m.params.head_b);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.7, 0.3]), 0);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
    }

    #[test]
    fn argmax_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.random_range(2..7);
            // coarse values make ties common
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64).collect();
            let sum: f64 = raw.iter().sum::<f64>() + 1e-300;
            let probs: Vec<f64> = raw.iter().map(|r| r / sum).collect();
            let max = probs.iter().cloned().fold(f64::MIN, f64::max);
            let expected = probs.iter().position(|&p| p == max).unwrap();
            assert_eq!(argmax(&probs), expected);
        }
    }

    #[test]
    fn linear_model_gradient_is_head_row_over_n() {
        let vocab = Vocab::build(&["a b c d"], 20);
        let labels = LabelSet::new(["A", "B"]).unwrap();
        let m = ProxyModel::linear(vocab, labels, 6, 16, 5).unwrap();
        let (_, input) = m.tokenize_text("a b c d b");
        let g = m.input_gradients(&input, 1, GradientTarget::Logit).unwrap();
        let n = input.len() as f64;
        for i in 0..input.len() {
            for j in 0..6 {
                assert!((g.get(i, j) - m.params.head_w.get(j, 1) / n).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn duplicate_tokens_get_identical_rows_under_shared_positions() {
        let mut m = tiny_model(1, 9);
        let p0 = m.params.positions.row(0).to_vec();
        for i in 0..m.config.max_len {
            m.params.positions.row_mut(i).copy_from_slice(&p0);
        }
        let (_, input) = m.tokenize_text("beta beta beta");
        let g = m.input_gradients(&input, 2, GradientTarget::Logit).unwrap();
        for i in 1..3 {
            for j in 0..m.config.d_model {
                assert!((g.get(i, j) - g.get(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn probability_gradient_is_chain_rule_of_logit_gradients() {
        let m = tiny_model(2, 4);
        let (_, input) = m.tokenize_text("alpha gamma eta");
        let p = m.forward(&input).unwrap();
        let gp = m.input_gradients(&input, 0, GradientTarget::Probability).unwrap();
        let mut expected = Matrix::zeros(gp.rows, gp.cols);
        for l in 0..3 {
            let gl = m.input_gradients(&input, l, GradientTarget::Logit).unwrap();
            let coef = p[0] * (if l == 0 { 1.0 } else { 0.0 } - p[l]);
            for (e, x) in expected.data.iter_mut().zip(&gl.data) {
                *e += coef * x;
            }
        }
        for (a, b) in gp.data.iter().zip(&expected.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_head_count() {
        let vocab = Vocab::build(&["a"], 10);
        let labels = LabelSet::new(["A", "B"]).unwrap();
        let cfg = ProxyConfig {
            d_model: 10,
            heads: 3,
            ..ProxyConfig::default()
        };
        assert!(matches!(
            ProxyModel::new(cfg, vocab, labels, 0),
            Err(ProxyError::InvalidConfig(_))
        ));
    }
}
