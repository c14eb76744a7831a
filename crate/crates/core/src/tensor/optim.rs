//! Adam with optional Noam warmup, plus a gradient accumulator for
//! multi-utterance steps.

use super::store::{ParamId, ParamStore};
use super::Tensor;

/// Learning-rate schedule for a training stage.
#[derive(Clone, Copy, Debug)]
pub enum LrSchedule {
    Fixed(f32),
    /// `factor * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`
    Noam { d_model: usize, warmup: usize, factor: f32 },
}

impl LrSchedule {
    pub fn lr(&self, step: u64) -> f32 {
        match *self {
            LrSchedule::Fixed(lr) => lr,
            LrSchedule::Noam { d_model, warmup, factor } => {
                let s = (step.max(1)) as f32;
                let w = warmup.max(1) as f32;
                factor * (d_model as f32).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
            }
        }
    }
}

/// Sums per-utterance gradients into one step gradient.
#[derive(Default)]
pub struct GradAccum {
    slots: Vec<Option<Tensor>>,
}

impl GradAccum {
    pub fn new(store: &ParamStore) -> Self {
        GradAccum { slots: (0..store.len()).map(|_| None).collect() }
    }

    pub fn add(&mut self, grads: Vec<(ParamId, Tensor)>) {
        for (pid, g) in grads {
            match &mut self.slots[pid.index()] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for slot in self.slots.iter_mut().flatten() {
            for v in slot.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn take(self) -> Vec<(ParamId, Tensor)> {
        self.slots
            .into_iter()
            .enumerate()
            .filter_map(|(i, s)| s.map(|t| (ParamId(i), t)))
            .collect()
    }
}

/// Adam (β1=0.9, β2=0.999, ε=1e-8). Moments are kept per parameter index;
/// frozen parameters are skipped entirely so their bytes never change.
pub struct Adam {
    beta1: f32,
    beta2: f32,
    eps: f32,
    /// Decoupled weight decay (AdamW-style); 0 disables it.
    pub weight_decay: f32,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            m: (0..store.len()).map(|_| None).collect(),
            v: (0..store.len()).map(|_| None).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. `trainable` filters by parameter name; anything it
    /// rejects is left bit-identical.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[(ParamId, Tensor)],
        lr: f32,
        trainable: &dyn Fn(&str) -> bool,
    ) {
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for (pid, grad) in grads {
            if !trainable(store.name(*pid)) {
                continue;
            }
            let i = pid.index();
            if self.m[i].is_none() {
                self.m[i] = Some(Tensor::zeros(grad.shape()));
                self.v[i] = Some(Tensor::zeros(grad.shape()));
            }
            let m = self.m[i].as_mut().unwrap();
            let v = self.v[i].as_mut().unwrap();
            let p = store.get_mut(*pid);
            for j in 0..grad.len() {
                let g = grad.data()[j];
                let mj = self.beta1 * m.data()[j] + (1.0 - self.beta1) * g;
                let vj = self.beta2 * v.data()[j] + (1.0 - self.beta2) * g * g;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let mhat = mj / b1t;
                let vhat = vj / b2t;
                let pj = p.data()[j];
                p.data_mut()[j] =
                    pj - lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * pj);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::from_vec(&[2], vec![3.0, -2.0]));
        let mut opt = Adam::new(&store);
        for _ in 0..400 {
            let tape = Tape::new();
            let vw = tape.param(&store, w);
            let loss = tape.sum_sq(vw);
            let mut grads = tape.backward(loss);
            let pg = tape.param_grads(&mut grads);
            opt.step(&mut store, &pg, 0.05, &|_| true);
        }
        for v in store.get(w).data() {
            assert!(v.abs() < 1e-2, "w did not converge: {v}");
        }
    }

    #[test]
    fn frozen_names_stay_bit_identical() {
        let mut store = ParamStore::new();
        let w = store.register("train.w", Tensor::from_vec(&[1], vec![1.0]));
        let f = store.register("frozen.w", Tensor::from_vec(&[1], vec![5.0]));
        let before = store.get(f).content_hash();
        let mut opt = Adam::new(&store);
        for _ in 0..10 {
            let tape = Tape::new();
            let vw = tape.param(&store, w);
            let vf = tape.param(&store, f);
            let s = tape.add(vw, vf);
            let loss = tape.sum_sq(s);
            let mut grads = tape.backward(loss);
            let pg = tape.param_grads(&mut grads);
            opt.step(&mut store, &pg, 0.1, &|n| n.starts_with("train."));
        }
        assert_eq!(store.get(f).content_hash(), before);
        assert_ne!(store.get(w).data()[0], 1.0);
    }

    #[test]
    fn noam_schedule_warms_up_then_decays() {
        let sched = LrSchedule::Noam { d_model: 128, warmup: 400, factor: 1.0 };
        assert!(sched.lr(100) < sched.lr(400));
        assert!(sched.lr(4000) < sched.lr(400));
        let fixed = LrSchedule::Fixed(1e-3);
        assert_eq!(fixed.lr(1), 1e-3);
        assert_eq!(fixed.lr(1_000_000), 1e-3);
    }
}
