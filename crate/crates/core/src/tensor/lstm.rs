//! Fused single-layer LSTM as one tape op with hand-derived BPTT.
//!
//! Keeping the recurrence inside one node avoids thousands of tiny tape
//! entries per utterance. The input projection and the weight gradients are
//! single gemms; only the hidden-to-hidden path runs per step.

use std::rc::Rc;

use super::store::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::{gemm, Tensor};

/// Parameter handles for one LSTM direction. Gate order: i, f, g, o.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
}

impl LstmParams {
    /// Register freshly initialized weights under `prefix.{w_x,w_h,bias}`.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        let w_x = store.register(
            &format!("{prefix}.w_x"),
            super::store::xavier(&[input_dim, 4 * hidden], rng),
        );
        let w_h = store.register(
            &format!("{prefix}.w_h"),
            super::store::xavier(&[hidden, 4 * hidden], rng),
        );
        // Forget-gate bias starts at 1 so early training keeps state.
        let mut b = Tensor::zeros(&[4 * hidden]);
        b.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let bias = store.register(&format!("{prefix}.bias"), b);
        LstmParams { w_x, w_h, bias }
    }
}

impl Tape {
    /// Run an LSTM over `x` (T×D). Output is T×H in original time order;
    /// `reverse` processes the sequence back-to-front.
    pub fn lstm(&self, x: Var, w_x: Var, w_h: Var, bias: Var, reverse: bool) -> Var {
        let vx = self.value(x);
        let vwx = self.value(w_x);
        let vwh = self.value(w_h);
        let vb = self.value(bias);
        let (t_len, d_in) = (vx.rows(), vx.cols());
        let h4 = vwx.cols();
        assert_eq!(h4 % 4, 0);
        let h = h4 / 4;
        assert_eq!(vwh.rows(), h);
        assert_eq!(vwh.cols(), h4);
        assert_eq!(vb.len(), h4);
        assert_eq!(vwx.rows(), d_in);

        let order: Vec<usize> = if reverse {
            (0..t_len).rev().collect()
        } else {
            (0..t_len).collect()
        };

        // One gemm for all input projections, indexed by original time.
        let mut xproj = vec![0.0f32; t_len * h4];
        gemm(t_len, d_in, h4, 1.0, vx.data(), false, vwx.data(), false, 0.0, &mut xproj);

        // Caches in processing order.
        let mut gates = vec![0.0f32; t_len * h4]; // post-activation i,f,g,o
        let mut cells = vec![0.0f32; t_len * h];
        let mut h_prev_cache = vec![0.0f32; t_len * h];
        let mut out = vec![0.0f32; t_len * h];

        let mut h_state = vec![0.0f32; h];
        let mut c_state = vec![0.0f32; h];
        let mut z = vec![0.0f32; h4];
        for (s, &ti) in order.iter().enumerate() {
            h_prev_cache[s * h..(s + 1) * h].copy_from_slice(&h_state);
            z.copy_from_slice(&xproj[ti * h4..(ti + 1) * h4]);
            // z += h_state · w_h
            gemm(1, h, h4, 1.0, &h_state, false, vwh.data(), false, 1.0, &mut z);
            for (zv, bv) in z.iter_mut().zip(vb.data()) {
                *zv += bv;
            }
            let g = &mut gates[s * h4..(s + 1) * h4];
            for j in 0..h {
                let i_g = sigmoid(z[j]);
                let f_g = sigmoid(z[h + j]);
                let g_g = z[2 * h + j].tanh();
                let o_g = sigmoid(z[3 * h + j]);
                g[j] = i_g;
                g[h + j] = f_g;
                g[2 * h + j] = g_g;
                g[3 * h + j] = o_g;
                c_state[j] = f_g * c_state[j] + i_g * g_g;
                h_state[j] = o_g * c_state[j].tanh();
            }
            cells[s * h..(s + 1) * h].copy_from_slice(&c_state);
            out[ti * h..(ti + 1) * h].copy_from_slice(&h_state);
        }

        let gates = Rc::new(gates);
        let cells = Rc::new(cells);
        let h_prev_cache = Rc::new(h_prev_cache);
        let cx = Rc::clone(&vx);
        let cwx = Rc::clone(&vwx);
        let cwh = Rc::clone(&vwh);
        let sx = vx.shape().to_vec();
        let swx = vwx.shape().to_vec();
        let swh = vwh.shape().to_vec();
        let sb = vb.shape().to_vec();

        let node = Tensor::from_vec(&[t_len, h], out);
        self.push_custom(
            node,
            Box::new(move |g_out, buf| {
                // dz per step in processing order, then batched gemms.
                let mut dz_all = vec![0.0f32; t_len * h4];
                let mut dh_next = vec![0.0f32; h];
                let mut dc_next = vec![0.0f32; h];
                let zero_cell = vec![0.0f32; h];
                for s in (0..t_len).rev() {
                    let ti = order[s];
                    let g = &gates[s * h4..(s + 1) * h4];
                    let c = &cells[s * h..(s + 1) * h];
                    let c_prev: &[f32] = if s == 0 {
                        &zero_cell
                    } else {
                        &cells[(s - 1) * h..s * h]
                    };
                    let dz = &mut dz_all[s * h4..(s + 1) * h4];
                    for j in 0..h {
                        let dh = g_out.data()[ti * h + j] + dh_next[j];
                        let tc = c[j].tanh();
                        let i_g = g[j];
                        let f_g = g[h + j];
                        let g_g = g[2 * h + j];
                        let o_g = g[3 * h + j];
                        let d_o = dh * tc;
                        let dc = dh * o_g * (1.0 - tc * tc) + dc_next[j];
                        let d_i = dc * g_g;
                        let d_g = dc * i_g;
                        let d_f = dc * c_prev[j];
                        dz[j] = d_i * i_g * (1.0 - i_g);
                        dz[h + j] = d_f * f_g * (1.0 - f_g);
                        dz[2 * h + j] = d_g * (1.0 - g_g * g_g);
                        dz[3 * h + j] = d_o * o_g * (1.0 - o_g);
                        dc_next[j] = dc * f_g;
                    }
                    // dh_next = dz · w_hᵀ
                    dh_next.iter_mut().for_each(|v| *v = 0.0);
                    gemm(1, h4, h, 1.0, dz, false, cwh.data(), true, 0.0, &mut dh_next);
                }
                // Scatter dz back to original time order for the input grads.
                let mut dz_time = vec![0.0f32; t_len * h4];
                for (s, &ti) in order.iter().enumerate() {
                    dz_time[ti * h4..(ti + 1) * h4].copy_from_slice(&dz_all[s * h4..(s + 1) * h4]);
                }
                buf.accum(x.id, &sx, |d| {
                    gemm(t_len, h4, d_in, 1.0, &dz_time, false, cwx.data(), true, 1.0, d);
                });
                buf.accum(w_x.id, &swx, |d| {
                    gemm(d_in, t_len, h4, 1.0, cx.data(), true, &dz_time, false, 1.0, d);
                });
                buf.accum(w_h.id, &swh, |d| {
                    gemm(h, t_len, h4, 1.0, &h_prev_cache, true, &dz_all, false, 1.0, d);
                });
                buf.accum(bias.id, &sb, |d| {
                    for s in 0..t_len {
                        for (d, g) in d.iter_mut().zip(&dz_all[s * h4..(s + 1) * h4]) {
                            *d += g;
                        }
                    }
                });
            }),
        )
    }

    /// Bidirectional LSTM: forward and reverse passes concatenated to T×2H.
    pub fn bilstm(&self, x: Var, fwd: (Var, Var, Var), bwd: (Var, Var, Var)) -> Var {
        let hf = self.lstm(x, fwd.0, fwd.1, fwd.2, false);
        let hb = self.lstm(x, bwd.0, bwd.1, bwd.2, true);
        self.concat_cols(&[hf, hb])
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}
