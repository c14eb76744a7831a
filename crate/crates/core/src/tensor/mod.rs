//! Minimal dense-tensor math with reverse-mode automatic differentiation.
//!
//! Everything downstream (speaker encoder, control module, acoustic model,
//! estimator) is built from the ops in this module. Values are flat `f32`
//! buffers; matrix products go through `matrixmultiply::sgemm`. The tape is
//! single-threaded and rebuilt per training step, which keeps runs bit-for-bit
//! reproducible under a fixed seed.

pub(crate) mod lstm;
mod optim;
pub mod store;
mod tape;

pub use lstm::LstmParams;
pub use optim::{Adam, GradAccum, LrSchedule};
pub use store::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};

/// Dense row-major tensor. Rank 1 and 2 cover every shape used here.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {:?} does not match data length {}", shape, data.len());
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn row(data: Vec<f32>) -> Self {
        Tensor { shape: vec![1, data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Rows of a rank-2 tensor (rank-1 counts as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on rank-{} tensor", self.shape.len()),
        }
    }

    /// Columns of a rank-2 tensor (rank-1 counts as one row of n columns).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on tensor of {} elements", self.data.len());
        self.data[0]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.data.len());
        Tensor { shape: shape.to_vec(), data: self.data.clone() }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f32> {
        self.data.iter()
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// FNV-1a over the little-endian byte image; used for freeze audits.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for d in &self.shape {
            for b in (*d as u64).to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        for v in &self.data {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// `c = alpha * op(a) @ op(b) + beta * c` where `op` optionally transposes.
/// Shapes refer to the logical (post-transpose) operands: a is m×k, b is k×n.
///
/// Single-row products take a hand-rolled path: `sgemm`'s packing overhead
/// dwarfs the arithmetic for the matvec-shaped calls the LSTM recurrence
/// makes hundreds of times per utterance.
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 1 && !ta {
        return vec_mat(k, n, alpha, a, b, tb, beta, c);
    }
    if k == 1 {
        // Rank-1 outer product; both operands are contiguous vectors.
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        } else if beta != 1.0 {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        for i in 0..m {
            let s = alpha * a[i];
            if s != 0.0 {
                for (cv, bv) in c[i * n..(i + 1) * n].iter_mut().zip(b) {
                    *cv += s * bv;
                }
            }
        }
        return;
    }
    if n == 1 && !ta {
        // Matvec against a contiguous length-k vector (k×1 or 1×k alike).
        for i in 0..m {
            let dot = lane_dot(&a[i * k..(i + 1) * k], b);
            c[i] = if beta == 0.0 { alpha * dot } else { beta * c[i] + alpha * dot };
        }
        return;
    }
    // Stored row-major; a transposed operand swaps its strides.
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = alpha * a(1×k) @ op(b)(k×n) + beta * c`.
fn vec_mat(k: usize, n: usize, alpha: f32, a: &[f32], b: &[f32], tb: bool, beta: f32, c: &mut [f32]) {
    if beta == 0.0 {
        c.iter_mut().for_each(|v| *v = 0.0);
    } else if beta != 1.0 {
        c.iter_mut().for_each(|v| *v *= beta);
    }
    if tb {
        // b stored n×k: c[j] += alpha * dot(a, b_row_j)
        for (j, row) in b.chunks_exact(k).enumerate() {
            c[j] += alpha * lane_dot(a, row);
        }
    } else {
        // b stored k×n: accumulate scaled rows.
        for (x, row) in a.iter().zip(b.chunks_exact(n)) {
            let s = alpha * x;
            if s != 0.0 {
                for (cv, bv) in c.iter_mut().zip(row) {
                    *cv += s * bv;
                }
            }
        }
    }
}

/// Dot product accumulated over eight independent lanes so the compiler can
/// vectorize; the lane assignment is fixed, keeping results deterministic.
fn lane_dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let mut ai = a.chunks_exact(8);
    let mut bi = b.chunks_exact(8);
    for (ca, cb) in (&mut ai).zip(&mut bi) {
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ai.remainder().iter().zip(bi.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Plain matrix product of stored tensors with optional transposes.
pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (am, ak) = (a.rows(), a.cols());
    let (bm, bk) = (b.rows(), b.cols());
    let (m, k) = if ta { (ak, am) } else { (am, ak) };
    let (kb, n) = if tb { (bk, bm) } else { (bm, bk) };
    assert_eq!(k, kb, "matmul inner dims {} vs {}", k, kb);
    let mut out = Tensor::zeros(&[m, n]);
    gemm(m, k, n, 1.0, a.data(), ta, b.data(), tb, 0.0, out.data_mut());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
        let get = |t: &Tensor, tr: bool, i: usize, j: usize| {
            if tr {
                t.data()[j * t.cols() + i]
            } else {
                t.data()[i * t.cols() + j]
            }
        };
        let (m, k) = if ta { (a.cols(), a.rows()) } else { (a.rows(), a.cols()) };
        let n = if tb { b.rows() } else { b.cols() };
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for kk in 0..k {
                    s += get(a, ta, i, kk) as f64 * get(b, tb, kk, j) as f64;
                }
                out.data_mut()[i * n + j] = s as f32;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_naive_loop_all_transpose_combos() {
        let mut rng = crate::tensor::tape::test_rng(7);
        for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
            let (m, k, n) = (5, 7, 3);
            let a_shape = if ta { [k, m] } else { [m, k] };
            let b_shape = if tb { [n, k] } else { [k, n] };
            let a = Tensor::from_vec(&a_shape, (0..m * k).map(|_| rng_val(&mut rng)).collect());
            let b = Tensor::from_vec(&b_shape, (0..k * n).map(|_| rng_val(&mut rng)).collect());
            let fast = matmul(&a, &b, ta, tb);
            let slow = naive_matmul(&a, &b, ta, tb);
            for (x, y) in fast.iter().zip(slow.iter()) {
                assert!((x - y).abs() < 1e-4, "ta={ta} tb={tb}: {x} vs {y}");
            }
        }
    }

    fn rng_val(rng: &mut impl rand::Rng) -> f32 {
        rng.random_range(-1.0..1.0)
    }

    #[test]
    fn content_hash_changes_with_data_and_shape() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]);
        let mut c = a.clone();
        c.data_mut()[0] = 1.0000001;
        assert_ne!(a.content_hash(), b.content_hash());
        assert_ne!(a.content_hash(), c.content_hash());
        assert_eq!(a.content_hash(), a.clone().content_hash());
    }
}
