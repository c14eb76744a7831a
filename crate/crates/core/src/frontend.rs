//! Pluggable speech frontend producing layered feature stacks.
//!
//! The default implementation is a deterministic seeded stub: each pseudo
//! layer is a fixed linear map of the mel frame with one frame of context on
//! either side. It is frozen by construction and stands in for a large
//! pretrained SSL model, which keeps multi-gigabyte downloads out of the
//! test path. An adapter for a real model can implement [`Frontend`] and
//! drop in unchanged.

use crate::corpus::{MelSpectrogram, MEL_BINS};
use crate::tensor::{matmul, ParamId, ParamStore, Tensor};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Per-utterance frames × layers × channels representation.
#[derive(Clone, Debug)]
pub struct SslFeatureStack {
    layers: Vec<Tensor>,
}

impl SslFeatureStack {
    pub fn new(layers: Vec<Tensor>) -> Self {
        assert!(!layers.is_empty());
        let (t, d) = (layers[0].rows(), layers[0].cols());
        assert!(t >= 1);
        for l in &layers {
            assert_eq!(l.rows(), t);
            assert_eq!(l.cols(), d);
        }
        SslFeatureStack { layers }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn frames(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].cols()
    }

    pub fn layer(&self, l: usize) -> &Tensor {
        &self.layers[l]
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    /// Reverse the frame order of every layer (used by order-sensitivity tests).
    pub fn frame_reversed(&self) -> SslFeatureStack {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let (t, d) = (l.rows(), l.cols());
                let mut data = Vec::with_capacity(t * d);
                for r in (0..t).rev() {
                    data.extend_from_slice(&l.data()[r * d..(r + 1) * d]);
                }
                Tensor::from_vec(&[t, d], data)
            })
            .collect();
        SslFeatureStack { layers }
    }
}

/// Utterance-level feature extractor.
pub trait Frontend {
    fn n_layers(&self) -> usize;
    fn dim(&self) -> usize;
    fn extract(&self, mel: &MelSpectrogram) -> SslFeatureStack;
}

pub const STUB_CONTEXT: usize = 3; // previous, current, next frame

/// Deterministic frozen frontend over mel input.
pub struct FrontendStub {
    seed: u64,
    weights: Vec<ParamId>,
    n_layers: usize,
    dim: usize,
}

impl FrontendStub {
    pub const DEFAULT_LAYERS: usize = 4;
    pub const DEFAULT_DIM: usize = 96;

    /// Build the stub and register its (never trained) weights under
    /// `frontend.layer{i}.w` so checkpoints and freeze audits can see them.
    pub fn register(store: &mut ParamStore, seed: u64, n_layers: usize, dim: usize) -> Self {
        assert!(n_layers >= 1 && dim >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(crate::corpus::seed_chain(&[0xf407e4d, seed]));
        let scale = 1.0 / ((STUB_CONTEXT * MEL_BINS) as f32).sqrt();
        let weights = (0..n_layers)
            .map(|l| {
                let n = STUB_CONTEXT * MEL_BINS * dim;
                let w = Tensor::from_vec(
                    &[STUB_CONTEXT * MEL_BINS, dim],
                    (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
                );
                store.register(&format!("frontend.layer{l}.w"), w)
            })
            .collect();
        FrontendStub { seed, weights, n_layers, dim }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Extract using weights from `store` (the registered ones).
    pub fn extract_with(&self, store: &ParamStore, mel: &MelSpectrogram) -> SslFeatureStack {
        let t = mel.frames();
        // Window of previous/current/next frame, clamped at the edges.
        let mut window = Tensor::zeros(&[t, STUB_CONTEXT * MEL_BINS]);
        for r in 0..t {
            let prev = r.saturating_sub(1);
            let next = (r + 1).min(t - 1);
            let dst = &mut window.data_mut()[r * STUB_CONTEXT * MEL_BINS..];
            dst[..MEL_BINS].copy_from_slice(mel.frame(prev));
            dst[MEL_BINS..2 * MEL_BINS].copy_from_slice(mel.frame(r));
            dst[2 * MEL_BINS..3 * MEL_BINS].copy_from_slice(mel.frame(next));
        }
        let layers = self
            .weights
            .iter()
            .map(|&w| matmul(&window, store.get(w), false, false))
            .collect();
        SslFeatureStack::new(layers)
    }
}

/// Stub bundled with its own private store, for components that only need
/// feature extraction (estimator, embedder).
pub struct StandaloneFrontend {
    store: ParamStore,
    stub: FrontendStub,
}

impl StandaloneFrontend {
    pub fn new(seed: u64, n_layers: usize, dim: usize) -> Self {
        let mut store = ParamStore::new();
        let stub = FrontendStub::register(&mut store, seed, n_layers, dim);
        StandaloneFrontend { store, stub }
    }

    pub fn weights_hash(&self) -> u64 {
        self.store.namespace_hash("frontend.")
    }
}

impl Frontend for StandaloneFrontend {
    fn n_layers(&self) -> usize {
        self.stub.n_layers
    }

    fn dim(&self) -> usize {
        self.stub.dim
    }

    fn extract(&self, mel: &MelSpectrogram) -> SslFeatureStack {
        self.stub.extract_with(&self.store, mel)
    }
}
