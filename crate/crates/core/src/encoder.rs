//! Speaker encoder: layer-weighted frontend sum, bidirectional LSTM,
//! feed-forward attention pooling, and the style token layer.
//!
//! `encode` turns a feature stack into the utterance embedding x; the STL
//! re-expresses an embedding as an attention-weighted mix of learned token
//! value projections, which stabilizes what the acoustic model consumes.

use thiserror::Error;

use crate::frontend::SslFeatureStack;
use crate::tensor::{LstmParams, ParamId, ParamStore, Tape, Tensor, Var};

use rand_chacha::ChaCha8Rng;

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("EmptySequence: all frames are masked")]
    EmptySequence,
}

#[derive(Clone, Debug)]
pub struct SpeakerEncoderConfig {
    pub frontend_layers: usize,
    pub frontend_dim: usize,
    pub lstm_hidden: usize,
    pub attn_hidden: usize,
    pub latent_dim: usize,
    pub stl_tokens: usize,
    pub stl_heads: usize,
}

impl Default for SpeakerEncoderConfig {
    fn default() -> Self {
        SpeakerEncoderConfig {
            frontend_layers: 4,
            frontend_dim: 96,
            lstm_hidden: 128,
            attn_hidden: 64,
            latent_dim: 384,
            stl_tokens: 8,
            stl_heads: 4,
        }
    }
}

/// Utterance embedding x produced by [`SpeakerEncoder::encode`] in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerLatent(pub Vec<f32>);

/// STL output e, a softmax combination of token value projections.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding(pub Vec<f32>);

/// Parameters of the encoder proper (namespace `encoder.`).
pub struct SpeakerEncoder {
    pub cfg: SpeakerEncoderConfig,
    layer_logits: ParamId,
    lstm_fwd: LstmParams,
    lstm_bwd: LstmParams,
    attn_w: ParamId,
    attn_b: ParamId,
    attn_v: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
}

impl SpeakerEncoder {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &SpeakerEncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let h2 = 2 * cfg.lstm_hidden;
        let layer_logits =
            store.register(&format!("{prefix}.layer_logits"), Tensor::zeros(&[1, cfg.frontend_layers]));
        let lstm_fwd = LstmParams::register(
            store,
            &format!("{prefix}.lstm_fwd"),
            cfg.frontend_dim,
            cfg.lstm_hidden,
            rng,
        );
        let lstm_bwd = LstmParams::register(
            store,
            &format!("{prefix}.lstm_bwd"),
            cfg.frontend_dim,
            cfg.lstm_hidden,
            rng,
        );
        let attn_w = store.register(
            &format!("{prefix}.attn.w"),
            crate::tensor::store::xavier(&[h2, cfg.attn_hidden], rng),
        );
        let attn_b = store.register(&format!("{prefix}.attn.b"), Tensor::zeros(&[cfg.attn_hidden]));
        let attn_v = store.register(
            &format!("{prefix}.attn.v"),
            crate::tensor::store::xavier(&[cfg.attn_hidden, 1], rng),
        );
        let proj_w = store.register(
            &format!("{prefix}.proj.w"),
            crate::tensor::store::xavier(&[h2, cfg.latent_dim], rng),
        );
        let proj_b = store.register(&format!("{prefix}.proj.b"), Tensor::zeros(&[cfg.latent_dim]));
        SpeakerEncoder {
            cfg: cfg.clone(),
            layer_logits,
            lstm_fwd,
            lstm_bwd,
            attn_w,
            attn_b,
            attn_v,
            proj_w,
            proj_b,
        }
    }

    /// Softmax layer weights (diagnostic view).
    pub fn layer_weights(&self, store: &ParamStore) -> Vec<f32> {
        let tape = Tape::new();
        let logits = tape.param(store, self.layer_logits);
        let w = tape.softmax_rows(logits);
        tape.value(w).data().to_vec()
    }

    /// Full encode pass on the tape; returns x (1×E) plus diagnostics.
    pub fn encode_on_tape(
        &self,
        tape: &Tape,
        store: &ParamStore,
        stack: &SslFeatureStack,
    ) -> EncodeDetails {
        let logits = tape.param(store, self.layer_logits);
        let weights = tape.softmax_rows(logits);
        let layer_vars: Vec<Var> =
            stack.layers().iter().map(|l| tape.constant(l.clone())).collect();
        let summed = weighted_layer_sum(tape, &layer_vars, weights);
        let fwd = (
            tape.param(store, self.lstm_fwd.w_x),
            tape.param(store, self.lstm_fwd.w_h),
            tape.param(store, self.lstm_fwd.bias),
        );
        let bwd = (
            tape.param(store, self.lstm_bwd.w_x),
            tape.param(store, self.lstm_bwd.w_h),
            tape.param(store, self.lstm_bwd.bias),
        );
        let states = tape.bilstm(summed, fwd, bwd);
        let (pooled, pool_weights) = attention_pool_on_tape(
            tape,
            states,
            None,
            (
                tape.param(store, self.attn_w),
                tape.param(store, self.attn_b),
                tape.param(store, self.attn_v),
            ),
        )
        .expect("unmasked sequence cannot be empty");
        let latent = tape.linear(
            pooled,
            tape.param(store, self.proj_w),
            tape.param(store, self.proj_b),
        );
        EncodeDetails { latent, layer_weights: weights, pool_weights }
    }

    /// Eval-mode encode to a concrete latent.
    pub fn encode(&self, store: &ParamStore, stack: &SslFeatureStack) -> SpeakerLatent {
        let tape = Tape::new();
        let details = self.encode_on_tape(&tape, store, stack);
        SpeakerLatent(tape.value(details.latent).data().to_vec())
    }
}

pub struct EncodeDetails {
    pub latent: Var,
    pub layer_weights: Var,
    pub pool_weights: Var,
}

/// Σ_l w_l · layer_l with pairwise accumulation over layers.
pub fn weighted_layer_sum(tape: &Tape, layers: &[Var], weights: Var) -> Var {
    assert!(!layers.is_empty());
    let wv = tape.value(weights);
    assert_eq!(wv.len(), layers.len(), "one weight per layer");
    let terms: Vec<Var> = layers
        .iter()
        .enumerate()
        .map(|(l, &layer)| {
            let w_l = tape.slice_cols(weights, l, 1); // 1×1
            scale_by_scalar_var(tape, layer, w_l)
        })
        .collect();
    pairwise_add(tape, &terms)
}

fn pairwise_add(tape: &Tape, terms: &[Var]) -> Var {
    match terms.len() {
        1 => terms[0],
        n => {
            let mid = n / 2;
            let left = pairwise_add(tape, &terms[..mid]);
            let right = pairwise_add(tape, &terms[mid..]);
            tape.add(left, right)
        }
    }
}

/// Multiply a matrix by a 1×1 tape scalar (gradient flows to both).
fn scale_by_scalar_var(tape: &Tape, a: Var, s: Var) -> Var {
    let va = tape.value(a);
    let vs = tape.value(s);
    assert_eq!(vs.len(), 1);
    let sval = vs.data()[0];
    let out = Tensor::from_vec(va.shape(), va.data().iter().map(|x| x * sval).collect());
    let sa = va.shape().to_vec();
    let ca = std::rc::Rc::clone(&va);
    tape.push_custom(
        out,
        Box::new(move |g, buf| {
            buf.accum(a.id, &sa, |d| {
                for (d, g) in d.iter_mut().zip(g.data()) {
                    *d += g * sval;
                }
            });
            buf.accum(s.id, &[1, 1], |d| {
                let dot: f32 = g.data().iter().zip(ca.data()).map(|(g, x)| g * x).sum();
                d[0] += dot;
            });
        }),
    )
}

/// Feed-forward attention pooling: score_t = vᵀ tanh(W h_t + b), masked
/// softmax over frames, pooled = Σ w_t h_t. Masked frames get weight 0.
pub fn attention_pool_on_tape(
    tape: &Tape,
    seq: Var,
    mask: Option<&[bool]>,
    (w, b, v): (Var, Var, Var),
) -> Result<(Var, Var), EncoderError> {
    let t_len = tape.value(seq).rows();
    if let Some(m) = mask {
        assert_eq!(m.len(), t_len, "mask length must match frames");
        if !m.iter().any(|&x| x) {
            return Err(EncoderError::EmptySequence);
        }
    }
    let hidden = tape.tanh(tape.linear(seq, w, b));
    let scores = tape.matmul(hidden, v); // T×1
    let row = tape.reshape(scores, &[1, t_len]);
    let weights = match mask {
        Some(m) => tape.softmax_masked(row, m),
        None => tape.softmax_rows(row),
    };
    let pooled = tape.matmul(weights, seq); // 1×H
    Ok((pooled, weights))
}

/// Style token layer: multi-head attention with the input as query over a
/// bank of learned tokens (namespace `stl.`).
pub struct StyleTokenLayer {
    pub tokens: ParamId,
    pub heads: Vec<StlHead>,
    pub n_tokens: usize,
    pub dim: usize,
}

pub struct StlHead {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

impl StyleTokenLayer {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &SpeakerEncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let dim = cfg.latent_dim;
        let heads_n = cfg.stl_heads;
        assert_eq!(dim % heads_n, 0, "latent dim must divide by head count");
        let d_head = dim / heads_n;
        let tokens = store.register(
            &format!("{prefix}.tokens"),
            crate::tensor::store::xavier(&[cfg.stl_tokens, dim], rng),
        );
        let heads = (0..heads_n)
            .map(|h| StlHead {
                w_q: store.register(
                    &format!("{prefix}.head{h}.w_q"),
                    crate::tensor::store::xavier(&[dim, d_head], rng),
                ),
                w_k: store.register(
                    &format!("{prefix}.head{h}.w_k"),
                    crate::tensor::store::xavier(&[dim, d_head], rng),
                ),
                w_v: store.register(
                    &format!("{prefix}.head{h}.w_v"),
                    crate::tensor::store::xavier(&[dim, d_head], rng),
                ),
            })
            .collect();
        StyleTokenLayer { tokens, heads, n_tokens: cfg.stl_tokens, dim }
    }

    /// Transform a 1×E query into the 1×E embedding; also returns per-head
    /// attention weights (each 1×K).
    pub fn transform_on_tape(
        &self,
        tape: &Tape,
        store: &ParamStore,
        query: Var,
    ) -> (Var, Vec<Var>) {
        let tokens = tape.param(store, self.tokens);
        let d_head = self.dim / self.heads.len();
        let scale = 1.0 / (d_head as f32).sqrt();
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut attns = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let q = tape.matmul(query, tape.param(store, head.w_q)); // 1×d
            let k = tape.matmul(tokens, tape.param(store, head.w_k)); // K×d
            let v = tape.matmul(tokens, tape.param(store, head.w_v)); // K×d
            let scores = tape.scale(tape.matmul(q, transpose_on_tape(tape, k)), scale);
            let attn = tape.softmax_rows(scores); // 1×K
            outs.push(tape.matmul(attn, v)); // 1×d
            attns.push(attn);
        }
        (tape.concat_cols(&outs), attns)
    }

    /// Eval-mode transform of a concrete vector.
    pub fn transform(&self, store: &ParamStore, x: &[f32]) -> SpeakerEmbedding {
        let tape = Tape::new();
        let q = tape.constant(Tensor::from_vec(&[1, x.len()], x.to_vec()));
        let (e, _) = self.transform_on_tape(&tape, store, q);
        SpeakerEmbedding(tape.value(e).data().to_vec())
    }

    /// Per-head value projections of every token (K×d per head), eval view.
    pub fn value_projections(&self, store: &ParamStore) -> Vec<Tensor> {
        self.heads
            .iter()
            .map(|h| crate::tensor::matmul(store.get(self.tokens), store.get(h.w_v), false, false))
            .collect()
    }
}

/// Matrix transpose as a tape op.
pub fn transpose_on_tape(tape: &Tape, a: Var) -> Var {
    let va = tape.value(a);
    let (m, n) = (va.rows(), va.cols());
    let mut data = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            data[j * m + i] = va.data()[i * n + j];
        }
    }
    let sa = va.shape().to_vec();
    tape.push_custom(
        Tensor::from_vec(&[n, m], data),
        Box::new(move |g, buf| {
            buf.accum(a.id, &sa, |d| {
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] += g.data()[j * m + i];
                    }
                }
            });
        }),
    )
}
