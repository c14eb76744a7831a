//! Reverse-mode tape.
//!
//! A `Tape` records one forward computation as a Wengert list. Each op pushes
//! a node whose backward closure scatters gradient contributions to its
//! parents. `backward` walks the list in reverse. Tapes are cheap and get
//! rebuilt every step; parameters bind in via [`Tape::param`] so their
//! gradients can be collected afterwards in registration order.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::store::{ParamId, ParamStore};
use super::{gemm, matmul, Tensor};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    pub(crate) id: usize,
}

pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &mut GradBuf)>;

struct Node {
    value: Rc<Tensor>,
    backward: Option<BackwardFn>,
}

pub(crate) struct GradBuf {
    grads: Vec<Option<Tensor>>,
}

impl GradBuf {
    pub(crate) fn accum(&mut self, id: usize, shape: &[usize], f: impl FnOnce(&mut [f32])) {
        let slot = &mut self.grads[id];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(shape));
        }
        f(slot.as_mut().unwrap().data_mut());
    }
}

/// Gradients of one backward pass, indexed by `Var`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.id].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.id].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<Vec<(ParamId, Var)>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Rc<Tensor>, backward: Option<BackwardFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, backward });
        Var { id: nodes.len() - 1 }
    }

    /// Entry point for fused ops defined in sibling modules.
    pub(crate) fn push_custom(&self, value: Tensor, backward: BackwardFn) -> Var {
        self.push(Rc::new(value), Some(backward))
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.id].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.id].value.shape().to_vec()
    }

    /// Leaf with no gradient flow (inputs, targets, fixed features).
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(Rc::new(t), None)
    }

    /// Leaf that participates in gradient collection.
    pub fn leaf(&self, t: Tensor) -> Var {
        // Identity backward marks the node as grad-carrying; accumulation
        // happens when children write into it.
        self.push(Rc::new(t), Some(Box::new(|_, _| {})))
    }

    /// Bind a stored parameter as a leaf. Binding the same parameter twice
    /// returns the same `Var`, so shared use accumulates one gradient.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.bound.borrow().iter().find(|(pid, _)| *pid == id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.bound.borrow_mut().push((id, v));
        v
    }

    /// Parameter gradients in binding order, moved out of the buffer.
    /// Unreached params yield zeros.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<(ParamId, Tensor)> {
        self.bound
            .borrow()
            .iter()
            .map(|&(pid, var)| {
                let g = grads
                    .take(var)
                    .unwrap_or_else(|| Tensor::zeros(&self.shape(var)));
                (pid, g)
            })
            .collect()
    }

    /// Run reverse accumulation from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.len(), 1, "backward root must be scalar");
        let mut buf = GradBuf { grads: vec![None; nodes.len()] };
        buf.grads[root.id] = Some(Tensor::scalar(1.0));
        for id in (0..=root.id).rev() {
            let Some(g) = buf.grads[id].take() else { continue };
            if let Some(back) = &nodes[id].backward {
                back(&g, &mut buf);
            }
            buf.grads[id] = Some(g);
        }
        Gradients { grads: buf.grads }
    }

    // ---- elementwise ----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut out = (*va).clone();
        out.add_assign(&vb);
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        self.push(
            Rc::new(out),
            Some(Box::new(move |g, buf| {
                buf.accum(a.id, &sa, |d| add_into(d, g.data()));
                buf.accum(b.id, &sb, |d| add_into(d, g.data()));
            })),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let shape = va.shape().to_vec();
        let (sa, sb) = (shape.clone(), shape.clone());
        self.push(
            Rc::new(Tensor::from_vec(&shape, data)),
            Some(Box::new(move |g, buf| {
                buf.accum(a.id, &sa, |d| add_into(d, g.data()));
                buf.accum(b.id, &sb, |d| sub_into(d, g.data()));
            })),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let shape = va.shape().to_vec();
        let (sa, sb) = (shape.clone(), shape.clone());
        let (ca, cb) = (Rc::clone(&va), Rc::clone(&vb));
        self.push(
            Rc::new(Tensor::from_vec(&shape, data)),
            Some(Box::new(move |g, buf| {
                buf.accum(a.id, &sa, |d| {
                    for ((d, g), o) in d.iter_mut().zip(g.data()).zip(cb.data()) {
                        *d += g * o;
                    }
                });
                buf.accum(b.id, &sb, |d| {
                    for ((d, g), o) in d.iter_mut().zip(g.data()).zip(ca.data()) {
                        *d += g * o;
                    }
                });
            })),
        )
    }

    pub fn scale(&self, a: Var, s: f32) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * s).collect();
        let shape = va.shape().to_vec();
        let sa = shape.clone();
        self.push(
            Rc::new(Tensor::from_vec(&shape, data)),
            Some(Box::new(move |g, buf| {
                buf.accum(a.id, &sa, |d| {
                    for (d, g) in d.iter_mut().zip(g.data()) {
                        *d += g * s;
                    }
                });
            })),
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = Rc::new(Tensor::from_vec(
            va.shape(),
            va.data().iter().map(|x| x.tanh()).collect(),
        ));
        let sa = va.shape().to_vec();
        let co = Rc::clone(&out);
        self.push(
            out,
            Some(Box::new(move |g, buf| {
                buf.accum(a.id, &sa, |d| {
                    for ((d, g), y) in d.iter_mut().zip(g.data()).zip(co.data()) {
                        *d += g * (1.0 - y * y);
                    }
                });
            })),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = Rc::new(Tensor::from_vec(
            va.shape(),
            va.data().iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect(),
        ));
        let sa = va.shape().to_vec();
        let co = Rc::clone(&out);
        self.push(
            out,
            Some(Box::new(move |g, buf| {
                buf.accum(a.id, &sa, |d| {
                    for ((d, g), y) in d.iter_mut().zip(g.data()).zip(co.data()) {
                        *d += g * y * (1.0 - y);
                    }
                });
            })),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = Rc::new(Tensor::from_vec(
            va.shape(),
            va.data().iter().map(|x| x.max(0.0)).collect(),
        ));
        let sa = va.shape().to_vec();
        let ci = Rc::clone(&va);
        self.push(
            out,
            Some(Box::new(move |g, buf| {
                buf.accum(a.id, &sa, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g.data()).zip(ci.data()) {
                        if *x > 0.0 {
                            *d += g;
                        }
                    }
                });
            })),
        )
    }

    // ---- gradient reversal ----

    /// Identity forward; backward multiplies the upstream gradient by
    /// `-lambda`. The forward value shares the input buffer, so it is
    /// bit-identical by construction.
    pub fn grl(&self, a: Var, lambda: f32) -> Var {
        assert!(lambda >= 0.0, "grl lambda must be >= 0");
        let va = self.value(a);
        let sa = va.shape().to_vec();
        self.push(
            va,
            Some(Box::new(move |g, buf| {
                buf.accum(a.id, &sa, |d| {
                    for (d, g) in d.iter_mut().zip(g.data()) {
                        *d += -lambda * g;
                    }
                });
            })),
        )
    }

    // ---- dropout ----

    /// Inverted dropout: zero each coordinate with probability `rate` and
    /// scale survivors by `1/(1-rate)` so the expectation is preserved.
    /// In eval mode (`train == false`) this is the identity.
    pub fn dropout(&self, a: Var, rate: f32, train: bool, rng: &mut ChaCha8Rng) -> Var {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0,1)");
        let va = self.value(a);
        if !train || rate == 0.0 {
            let sa = va.shape().to_vec();
            return self.push(
                va,
                Some(Box::new(move |g, buf| {
                    buf.accum(a.id, &sa, |d| add_into(d, g.data()));
                })),
            );
        }
        let keep = 1.0 - rate;
        let inv = 1.0 / keep;
        let mask: Vec<f32> = (0..va.len())
            .map(|_| if rng.random::<f32>() < keep { inv } else { 0.0 })
            .collect();
        let data = va.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let sa = va.shape().to_vec();
        let shape = sa.clone();
        self.push(
            Rc::new(Tensor::from_vec(&shape, data)),
            Some(Box::new(move |g, buf| {
                buf.accum(a.id, &sa, |d| {
                    for ((d, g), m) in d.iter_mut().zip(g.data()).zip(&mask) {
                        *d += g * m;
                    }
                });
            })),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let out = matmul(&va, &vb, false, false);
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let (ca, cb) = (Rc::clone(&va), Rc::clone(&vb));
        self.push(
            Rc::new(out),
            Some(Box::new(move |g, buf| {
                // dA = g · Bᵀ ; dB = Aᵀ · g
                buf.accum(a.id, &[m, k], |d| {
                    gemm(m, n, k, 1.0, g.data(), false, cb.data(), true, 1.0, d);
                });
                buf.accum(b.id, &[k, n], |d| {
                    gemm(k, m, n, 1.0, ca.data(), true, g.data(), false, 1.0, d);
                });
            })),
        )
    }

    /// `x @ w + b` with the bias broadcast over rows.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row_broadcast(y, b)
    }

    /// Add a 1×n (or length-n) row vector to every row of an m×n matrix.
    pub fn add_row_broadcast(&self, a: Var, row: Var) -> Var {
        let (va, vrow) = (self.value(a), self.value(row));
        let (m, n) = (va.rows(), va.cols());
        assert_eq!(vrow.len(), n, "row broadcast width mismatch");
        let mut out = (*va).clone();
        for r in 0..m {
            for (o, x) in out.data_mut()[r * n..(r + 1) * n].iter_mut().zip(vrow.data()) {
                *o += x;
            }
        }
        let sa = va.shape().to_vec();
        let srow = vrow.shape().to_vec();
        self.push(
            Rc::new(out),
            Some(Box::new(move |g, buf| {
                buf.accum(a.id, &sa, |d| add_into(d, g.data()));
                buf.accum(row.id, &srow, |d| {
                    for r in 0..m {
                        for (d, g) in d.iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                            *d += g;
                        }
                    }
                });
            })),
        )
    }

    /// Gather rows of `table` by index; backward scatter-adds.
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Var {
        let vt = self.value(table);
        let (v, p) = (vt.rows(), vt.cols());
        let mut data = Vec::with_capacity(ids.len() * p);
        for &i in ids {
            assert!(i < v, "token id {} out of vocab {}", i, v);
            data.extend_from_slice(&vt.data()[i * p..(i + 1) * p]);
        }
        let ids = ids.to_vec();
        let st = vt.shape().to_vec();
        self.push(
            Rc::new(Tensor::from_vec(&[ids.len(), p], data)),
            Some(Box::new(move |g, buf| {
                buf.accum(table.id, &st, |d| {
                    for (r, &i) in ids.iter().enumerate() {
                        for (d, g) in d[i * p..(i + 1) * p].iter_mut().zip(&g.data()[r * p..(r + 1) * p]) {
                            *d += g;
                        }
                    }
                });
            })),
        )
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let m = vals[0].rows();
        for v in &vals {
            assert_eq!(v.rows(), m, "concat_cols row mismatch");
        }
        let widths: Vec<usize> = vals.iter().map(|v| v.cols()).collect();
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0f32; m * n];
        let mut off = 0;
        for (v, &w) in vals.iter().zip(&widths) {
            for r in 0..m {
                data[r * n + off..r * n + off + w].copy_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let parts = parts.to_vec();
        let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
        self.push(
            Rc::new(Tensor::from_vec(&[m, n], data)),
            Some(Box::new(move |g, buf| {
                let mut off = 0;
                for ((part, w), shape) in parts.iter().zip(&widths).zip(&shapes) {
                    buf.accum(part.id, shape, |d| {
                        for r in 0..m {
                            for (d, g) in d[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(&g.data()[r * n + off..r * n + off + w])
                            {
                                *d += g;
                            }
                        }
                    });
                    off += w;
                }
            })),
        )
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        let (m, n) = (va.rows(), va.cols());
        assert!(start + len <= n);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&va.data()[r * n + start..r * n + start + len]);
        }
        let sa = va.shape().to_vec();
        self.push(
            Rc::new(Tensor::from_vec(&[m, len], data)),
            Some(Box::new(move |g, buf| {
                buf.accum(a.id, &sa, |d| {
                    for r in 0..m {
                        for (d, g) in d[r * n + start..r * n + start + len]
                            .iter_mut()
                            .zip(&g.data()[r * len..(r + 1) * len])
                        {
                            *d += g;
                        }
                    }
                });
            })),
        )
    }

    /// Reinterpret the shape without moving data.
    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        let out = va.reshaped(shape);
        let sa = va.shape().to_vec();
        self.push(
            Rc::new(out),
            Some(Box::new(move |g, buf| {
                buf.accum(a.id, &sa, |d| add_into(d, g.data()));
            })),
        )
    }

    // ---- reductions / softmax ----

    pub fn sum(&self, a: Var) -> Var {
        let va = self.value(a);
        let s: f32 = va.data().iter().sum();
        let sa = va.shape().to_vec();
        self.push(
            Rc::new(Tensor::scalar(s)),
            Some(Box::new(move |g, buf| {
                let gv = g.data()[0];
                buf.accum(a.id, &sa, |d| {
                    for d in d.iter_mut() {
                        *d += gv;
                    }
                });
            })),
        )
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len() as f32;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean over rows: m×n → 1×n.
    pub fn mean_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        let (m, n) = (va.rows(), va.cols());
        let mut out = vec![0.0f32; n];
        for r in 0..m {
            for (o, x) in out.iter_mut().zip(&va.data()[r * n..(r + 1) * n]) {
                *o += x;
            }
        }
        let inv = 1.0 / m as f32;
        out.iter_mut().for_each(|o| *o *= inv);
        let sa = va.shape().to_vec();
        self.push(
            Rc::new(Tensor::from_vec(&[1, n], out)),
            Some(Box::new(move |g, buf| {
                buf.accum(a.id, &sa, |d| {
                    for r in 0..m {
                        for (d, g) in d[r * n..(r + 1) * n].iter_mut().zip(g.data()) {
                            *d += g * inv;
                        }
                    }
                });
            })),
        )
    }

    /// Row-wise softmax with a numerically stable max shift.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        let (m, n) = (va.rows(), va.cols());
        let mut data = vec![0.0f32; m * n];
        for r in 0..m {
            let row = &va.data()[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f32;
            for (o, x) in data[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (x - mx).exp();
                z += *o;
            }
            for o in data[r * n..(r + 1) * n].iter_mut() {
                *o /= z;
            }
        }
        let out = Rc::new(Tensor::from_vec(va.shape(), data));
        let co = Rc::clone(&out);
        let sa = va.shape().to_vec();
        self.push(
            out,
            Some(Box::new(move |g, buf| {
                buf.accum(a.id, &sa, |d| {
                    for r in 0..m {
                        let y = &co.data()[r * n..(r + 1) * n];
                        let gr = &g.data()[r * n..(r + 1) * n];
                        let dot: f32 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for ((d, y), g) in d[r * n..(r + 1) * n].iter_mut().zip(y).zip(gr) {
                            *d += y * (g - dot);
                        }
                    }
                });
            })),
        )
    }

    /// Softmax over the allowed entries of a single score row; masked
    /// entries get weight exactly 0 and are excluded from every reduction.
    pub fn softmax_masked(&self, a: Var, mask: &[bool]) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), mask.len(), "mask length mismatch");
        assert!(mask.iter().any(|&m| m), "softmax over fully masked row");
        let mx = va
            .data()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(x, _)| *x)
            .fold(f32::NEG_INFINITY, f32::max);
        let mut data = vec![0.0f32; va.len()];
        let mut z = 0.0f32;
        for ((o, x), &m) in data.iter_mut().zip(va.data()).zip(mask) {
            if m {
                *o = (x - mx).exp();
                z += *o;
            }
        }
        for (o, &m) in data.iter_mut().zip(mask) {
            if m {
                *o /= z;
            }
        }
        let out = Rc::new(Tensor::from_vec(va.shape(), data));
        let co = Rc::clone(&out);
        let sa = va.shape().to_vec();
        let mask = mask.to_vec();
        self.push(
            out,
            Some(Box::new(move |g, buf| {
                buf.accum(a.id, &sa, |d| {
                    let dot: f32 = co
                        .data()
                        .iter()
                        .zip(g.data())
                        .zip(&mask)
                        .filter(|(_, &m)| m)
                        .map(|((y, g), _)| y * g)
                        .sum();
                    for (((d, y), g), &m) in
                        d.iter_mut().zip(co.data()).zip(g.data()).zip(&mask)
                    {
                        if m {
                            *d += y * (g - dot);
                        }
                    }
                });
            })),
        )
    }

    /// Per-row layer normalization with learned gain/bias.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f32) -> Var {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let (m, n) = (vx.rows(), vx.cols());
        assert_eq!(vg.len(), n);
        assert_eq!(vb.len(), n);
        let mut norm = vec![0.0f32; m * n];
        let mut inv_std = vec![0.0f32; m];
        for r in 0..m {
            let row = &vx.data()[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f32>() / n as f32;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, x) in norm[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (x - mu) * is;
            }
        }
        let mut data = vec![0.0f32; m * n];
        for r in 0..m {
            for c in 0..n {
                data[r * n + c] = norm[r * n + c] * vg.data()[c] + vb.data()[c];
            }
        }
        let sx = vx.shape().to_vec();
        let (sg, sb) = (vg.shape().to_vec(), vb.shape().to_vec());
        let norm = Rc::new(norm);
        let cg = Rc::clone(&vg);
        self.push(
            Rc::new(Tensor::from_vec(vx.shape(), data)),
            Some(Box::new(move |g, buf| {
                buf.accum(gamma.id, &sg, |d| {
                    for r in 0..m {
                        for c in 0..n {
                            d[c] += g.data()[r * n + c] * norm[r * n + c];
                        }
                    }
                });
                buf.accum(beta.id, &sb, |d| {
                    for r in 0..m {
                        for c in 0..n {
                            d[c] += g.data()[r * n + c];
                        }
                    }
                });
                buf.accum(x.id, &sx, |d| {
                    for r in 0..m {
                        // dxn = g ⊙ gamma; dx = (dxn − mean(dxn) − x̂·mean(dxn ⊙ x̂)) · inv_std
                        let gr = &g.data()[r * n..(r + 1) * n];
                        let xn = &norm[r * n..(r + 1) * n];
                        let mut s1 = 0.0f32;
                        let mut s2 = 0.0f32;
                        for c in 0..n {
                            let dxn = gr[c] * cg.data()[c];
                            s1 += dxn;
                            s2 += dxn * xn[c];
                        }
                        s1 /= n as f32;
                        s2 /= n as f32;
                        for c in 0..n {
                            let dxn = gr[c] * cg.data()[c];
                            d[r * n + c] += (dxn - s1 - xn[c] * s2) * inv_std[r];
                        }
                    }
                });
            })),
        )
    }

    // ---- losses ----

    /// Mean squared error over all elements.
    pub fn mse(&self, pred: Var, target: Var) -> Var {
        let (vp, vt) = (self.value(pred), self.value(target));
        assert_eq!(vp.shape(), vt.shape(), "mse shape mismatch");
        let n = vp.len() as f32;
        let s: f32 = vp
            .data()
            .iter()
            .zip(vt.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let (cp, ct) = (Rc::clone(&vp), Rc::clone(&vt));
        let (sp, st) = (vp.shape().to_vec(), vt.shape().to_vec());
        self.push(
            Rc::new(Tensor::scalar(s / n)),
            Some(Box::new(move |g, buf| {
                let gv = g.data()[0] * 2.0 / n;
                buf.accum(pred.id, &sp, |d| {
                    for ((d, p), t) in d.iter_mut().zip(cp.data()).zip(ct.data()) {
                        *d += gv * (p - t);
                    }
                });
                buf.accum(target.id, &st, |d| {
                    for ((d, p), t) in d.iter_mut().zip(cp.data()).zip(ct.data()) {
                        *d -= gv * (p - t);
                    }
                });
            })),
        )
    }

    /// Mean absolute error over all elements.
    pub fn l1(&self, pred: Var, target: Var) -> Var {
        let (vp, vt) = (self.value(pred), self.value(target));
        assert_eq!(vp.shape(), vt.shape(), "l1 shape mismatch");
        let n = vp.len() as f32;
        let s: f32 = vp
            .data()
            .iter()
            .zip(vt.data())
            .map(|(p, t)| (p - t).abs())
            .sum();
        let (cp, ct) = (Rc::clone(&vp), Rc::clone(&vt));
        let (sp, st) = (vp.shape().to_vec(), vt.shape().to_vec());
        self.push(
            Rc::new(Tensor::scalar(s / n)),
            Some(Box::new(move |g, buf| {
                let gv = g.data()[0] / n;
                buf.accum(pred.id, &sp, |d| {
                    for ((d, p), t) in d.iter_mut().zip(cp.data()).zip(ct.data()) {
                        *d += gv * (p - t).signum();
                    }
                });
                buf.accum(target.id, &st, |d| {
                    for ((d, p), t) in d.iter_mut().zip(cp.data()).zip(ct.data()) {
                        *d -= gv * (p - t).signum();
                    }
                });
            })),
        )
    }

    /// Sum of squares (handy scalar loss for gradient checks).
    pub fn sum_sq(&self, a: Var) -> Var {
        let m = self.mul(a, a);
        self.sum(m)
    }

    /// Cross entropy of a 1×C logit row against a class index.
    pub fn cross_entropy(&self, logits: Var, target: usize) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.rows(), 1, "cross_entropy expects a single logit row");
        let c = vl.cols();
        assert!(target < c, "target {target} out of {c} classes");
        let mx = vl.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let z: f32 = vl.data().iter().map(|x| (x - mx).exp()).sum();
        let lse = mx + z.ln();
        let loss = lse - vl.data()[target];
        let probs: Vec<f32> = vl.data().iter().map(|x| (x - mx).exp() / z).collect();
        let sl = vl.shape().to_vec();
        self.push(
            Rc::new(Tensor::scalar(loss)),
            Some(Box::new(move |g, buf| {
                let gv = g.data()[0];
                buf.accum(logits.id, &sl, |d| {
                    for (i, (d, p)) in d.iter_mut().zip(&probs).enumerate() {
                        let onehot = if i == target { 1.0 } else { 0.0 };
                        *d += gv * (p - onehot);
                    }
                });
            })),
        )
    }

    // ---- sequence ops ----

    /// Expand N token rows into Σd frame rows, token i repeated d[i] times.
    pub fn length_regulate(&self, a: Var, durations: &[usize]) -> Var {
        let va = self.value(a);
        let (nrows, w) = (va.rows(), va.cols());
        assert_eq!(nrows, durations.len(), "length_regulate duration count");
        assert!(durations.iter().all(|&d| d >= 1), "durations must be >= 1");
        let total: usize = durations.iter().sum();
        let mut data = Vec::with_capacity(total * w);
        for (r, &d) in durations.iter().enumerate() {
            for _ in 0..d {
                data.extend_from_slice(&va.data()[r * w..(r + 1) * w]);
            }
        }
        let durations = durations.to_vec();
        let sa = va.shape().to_vec();
        self.push(
            Rc::new(Tensor::from_vec(&[total, w], data)),
            Some(Box::new(move |g, buf| {
                buf.accum(a.id, &sa, |d| {
                    let mut frame = 0;
                    for (r, &dur) in durations.iter().enumerate() {
                        for _ in 0..dur {
                            for (d, g) in d[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(&g.data()[frame * w..(frame + 1) * w])
                            {
                                *d += g;
                            }
                            frame += 1;
                        }
                    }
                });
            })),
        )
    }

    /// Sliding-window unfold for 1-D convolution: T×C → (T−k+1)×(k·C).
    pub fn unfold(&self, a: Var, k: usize) -> Var {
        let va = self.value(a);
        let (t, c) = (va.rows(), va.cols());
        assert!(t >= k && k >= 1, "unfold window {} over {} rows", k, t);
        let rows = t - k + 1;
        let mut data = Vec::with_capacity(rows * k * c);
        for r in 0..rows {
            data.extend_from_slice(&va.data()[r * c..(r + k) * c]);
        }
        let sa = va.shape().to_vec();
        self.push(
            Rc::new(Tensor::from_vec(&[rows, k * c], data)),
            Some(Box::new(move |g, buf| {
                buf.accum(a.id, &sa, |d| {
                    for r in 0..rows {
                        for (d, g) in d[r * c..(r + k) * c]
                            .iter_mut()
                            .zip(&g.data()[r * k * c..(r + 1) * k * c])
                        {
                            *d += g;
                        }
                    }
                });
            })),
        )
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sub_into(dst: &mut [f32], src: &[f32]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d -= s;
    }
}

#[cfg(test)]
pub fn test_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Central finite differences on an f32 scalar function of leaves.
    fn finite_diff(
        build: &dyn Fn(&Tape, &[Var]) -> Var,
        inputs: &[Tensor],
        which: usize,
        idx: usize,
        h: f32,
    ) -> f32 {
        let eval = |delta: f32| {
            let tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let mut t = t.clone();
                    if i == which {
                        t.data_mut()[idx] += delta;
                    }
                    tape.leaf(t)
                })
                .collect();
            let out = build(&tape, &vars);
            tape.value(out).item()
        };
        (eval(h) - eval(-h)) / (2.0 * h)
    }

    /// Analytic grads vs central differences for every input coordinate.
    fn check_grads(build: &dyn Fn(&Tape, &[Var]) -> Var, inputs: &[Tensor], tol: f32) {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&tape, &vars);
        let grads = tape.backward(out);
        for (wi, t) in inputs.iter().enumerate() {
            let g = grads.get(vars[wi]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            for idx in 0..t.len() {
                let fd = finite_diff(build, inputs, wi, idx, 2e-2);
                let an = g.data()[idx];
                let denom = an.abs().max(fd.abs()).max(1.0);
                assert!(
                    (an - fd).abs() / denom < tol,
                    "input {wi} coord {idx}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0f32)).collect())
    }

    #[test]
    fn grad_check_matmul_chain() {
        let mut rng = test_rng(1);
        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[4, 2], &mut rng);
        check_grads(
            &|t, v| {
                let y = t.matmul(v[0], v[1]);
                t.sum_sq(y)
            },
            &[a, b],
            2e-2,
        );
    }

    #[test]
    fn grad_check_elementwise_and_activations() {
        let mut rng = test_rng(2);
        let a = rand_tensor(&[2, 3], &mut rng);
        let b = rand_tensor(&[2, 3], &mut rng);
        check_grads(
            &|t, v| {
                let s = t.add(v[0], v[1]);
                let m = t.mul(s, v[0]);
                let th = t.tanh(m);
                let sg = t.sigmoid(th);
                let r = t.relu(sg);
                t.sum_sq(r)
            },
            &[a, b],
            2e-2,
        );
    }

    #[test]
    fn grad_check_softmax_rows() {
        let mut rng = test_rng(3);
        let a = rand_tensor(&[3, 5], &mut rng);
        let w = rand_tensor(&[3, 5], &mut rng);
        check_grads(
            &|t, v| {
                let s = t.softmax_rows(v[0]);
                let m = t.mul(s, v[1]);
                t.sum_sq(m)
            },
            &[a, w],
            3e-2,
        );
    }

    #[test]
    fn grad_check_layer_norm() {
        let mut rng = test_rng(4);
        let x = rand_tensor(&[3, 6], &mut rng);
        let g = rand_tensor(&[6], &mut rng);
        let b = rand_tensor(&[6], &mut rng);
        check_grads(
            &|t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5);
                let w = t.mul(y, v[0]);
                t.sum(w)
            },
            &[x, g, b],
            3e-2,
        );
    }

    #[test]
    fn grad_check_structural_ops() {
        let mut rng = test_rng(5);
        let a = rand_tensor(&[4, 3], &mut rng);
        let b = rand_tensor(&[4, 2], &mut rng);
        check_grads(
            &|t, v| {
                let c = t.concat_cols(&[v[0], v[1]]);
                let s = t.slice_cols(c, 1, 3);
                let u = t.unfold(s, 2);
                let lr = t.length_regulate(u, &[2, 1, 3]);
                let m = t.mean_rows(lr);
                t.sum_sq(m)
            },
            &[a, b],
            2e-2,
        );
    }

    #[test]
    fn grad_check_losses_and_broadcast() {
        let mut rng = test_rng(6);
        let x = rand_tensor(&[3, 4], &mut rng);
        let w = rand_tensor(&[4, 2], &mut rng);
        let bias = rand_tensor(&[2], &mut rng);
        // Shift targets well away from the predictions so the finite
        // difference never straddles the |.| kink of the L1 term.
        let mut tgt = rand_tensor(&[3, 2], &mut rng);
        for v in tgt.data_mut() {
            *v += 4.0;
        }
        check_grads(
            &|t, v| {
                let y = t.linear(v[0], v[1], v[2]);
                let a = t.mse(y, v[3]);
                let b = t.l1(y, v[3]);
                t.add(a, b)
            },
            &[x, w, bias, tgt],
            3e-2,
        );
    }

    #[test]
    fn grad_check_cross_entropy() {
        let mut rng = test_rng(17);
        let logits = rand_tensor(&[1, 5], &mut rng);
        check_grads(
            &|t, v| {
                let a = t.cross_entropy(v[0], 2);
                let b = t.cross_entropy(v[0], 4);
                t.add(a, b)
            },
            &[logits],
            2e-2,
        );
    }

    #[test]
    fn grad_check_gather_rows() {
        let mut rng = test_rng(7);
        let table = rand_tensor(&[5, 3], &mut rng);
        check_grads(
            &|t, v| {
                let g = t.gather_rows(v[0], &[1, 1, 4, 0]);
                t.sum_sq(g)
            },
            &[table],
            2e-2,
        );
    }

    #[test]
    fn grl_forward_shares_input_buffer() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.5, -2.0]));
        let y = tape.grl(x, 0.7);
        let (vx, vy) = (tape.value(x), tape.value(y));
        assert!(Rc::ptr_eq(&vx, &vy), "grl forward must share the input allocation");
        assert_eq!(vy.data(), &[1.5, -2.0]);
    }

    #[test]
    fn grl_backward_negates_and_scales() {
        // loss = sum((grl(x) * w)) so upstream grad at grl output is w
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![3.0, -1.0]));
        let w = tape.constant(Tensor::from_vec(&[2], vec![2.0, -4.0]));
        let y = tape.grl(x, 0.5);
        let p = tape.mul(y, w);
        let loss = tape.sum(p);
        let grads = tape.backward(loss);
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.data(), &[-1.0, 2.0]);
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        let tape = Tape::new();
        let mut rng = test_rng(8);
        let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]));
        let y = tape.dropout(x, 0.8, false, &mut rng);
        assert!(Rc::ptr_eq(&tape.value(x), &tape.value(y)));
    }

    #[test]
    fn dropout_train_statistics() {
        // Over 10k scalar draws at rate 0.8 the zero count must sit inside a
        // 99% binomial CI, and survivors carry the 1/(1-r) inverse scale.
        let rate = 0.8f32;
        let n = 10_000;
        let mut rng = test_rng(9);
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[n], vec![1.0; n]));
        let y = tape.dropout(x, rate, true, &mut rng);
        let vy = tape.value(y);
        let zeros = vy.data().iter().filter(|v| **v == 0.0).count();
        let mean = n as f64 * rate as f64;
        let sd = (n as f64 * rate as f64 * (1.0 - rate as f64)).sqrt();
        assert!(
            (zeros as f64 - mean).abs() < 2.576 * sd,
            "zero count {zeros} outside 99% CI around {mean}"
        );
        for v in vy.data() {
            assert!(*v == 0.0 || (*v - 1.0 / (1.0 - rate)).abs() < 1e-6);
        }
        // E[dropout(x)] == x: empirical mean of survivors-scaled values ~ 1
        let emp: f64 = vy.data().iter().map(|v| *v as f64).sum::<f64>() / n as f64;
        assert!((emp - 1.0).abs() < 0.05, "inverse scaling broke the mean: {emp}");
    }

    #[test]
    fn softmax_masked_zeroes_masked_entries_exactly() {
        let tape = Tape::new();
        let s = tape.leaf(Tensor::from_vec(&[1, 4], vec![0.3, 9.0, -2.0, 5.0]));
        let w = tape.softmax_masked(s, &[true, false, true, false]);
        let vw = tape.value(w);
        assert_eq!(vw.data()[1], 0.0);
        assert_eq!(vw.data()[3], 0.0);
        let total: f32 = vw.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn shared_param_accumulates_gradient_once_per_use() {
        // y = x·x (elementwise via mul with itself): dy/dx = 2x
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![3.0, -2.0]));
        let y = tape.mul(x, x);
        let loss = tape.sum(y);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(x).unwrap().data(), &[6.0, -4.0]);
    }
}
