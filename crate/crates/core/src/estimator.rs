//! Impression estimator: frozen frontend, layer-weighted sum, bidirectional
//! LSTM, attention pooling and a linear head to the eleven scores.
//!
//! It plays three roles: auto-labeling unrated utterances, scoring the
//! objective evaluations, and the held-out RMSE benchmark. Dim K is never
//! regressed at deployment; it comes from standardized speech rates (the
//! head still has 11 outputs and trains on all dims, which costs nothing).

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Manifest, ManifestRecord};
use crate::encoder::{attention_pool_on_tape, weighted_layer_sum};
use crate::frontend::{FrontendStub, SslFeatureStack};
use crate::impression::{standardize_speech_rates, ImpressionDim, ImpressionVector};
use crate::tensor::{Adam, GradAccum, LstmParams, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("NotInitialized: estimator has not been trained")]
    NotInitialized,
    #[error("SplitLeakage: speaker {0} appears in more than one split")]
    SplitLeakage(String),
    #[error("ShapeError: {0}")]
    ShapeError(String),
    #[error("Corpus: {0}")]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error("Checkpoint: {0}")]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
    #[error("Impression: {0}")]
    Impression(#[from] crate::impression::ImpressionError),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub frontend_seed: u64,
    pub frontend_layers: usize,
    pub frontend_dim: usize,
    pub lstm_hidden: usize,
    pub attn_hidden: usize,
    pub init_seed: u64,
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    /// Mixup augmentation: train on convex combinations of utterance pairs
    /// and of their labels. The feature map is linear in the mel input, so
    /// mixed labels are exactly right for mixed inputs; this removes the
    /// speaker-memorization shortcut a few-speaker corpus invites.
    pub mixup: bool,
    /// Decoupled weight decay.
    pub weight_decay: f32,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            frontend_seed: 0,
            frontend_layers: 4,
            frontend_dim: 96,
            lstm_hidden: 64,
            attn_hidden: 32,
            init_seed: 0,
            epochs: 30,
            lr: 1e-3,
            batch_size: 8,
            mixup: true,
            weight_decay: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EstimatorMeta {
    pub config: EstimatorConfig,
    pub trained: bool,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub rate_mean: f64,
    pub rate_std: f64,
}

impl Default for EstimatorMeta {
    fn default() -> Self {
        EstimatorMeta {
            config: EstimatorConfig::default(),
            trained: false,
            best_epoch: 0,
            best_val_mse: f64::NAN,
            rate_mean: 0.0,
            rate_std: 1.0,
        }
    }
}

pub struct EstimatorModel {
    pub store: ParamStore,
    frontend: FrontendStub,
    layer_logits: ParamId,
    lstm_fwd: LstmParams,
    lstm_bwd: LstmParams,
    attn_w: ParamId,
    attn_b: ParamId,
    attn_v: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    pub meta: EstimatorMeta,
}

impl EstimatorModel {
    pub fn new(cfg: EstimatorConfig) -> Self {
        let mut store = ParamStore::new();
        let frontend =
            FrontendStub::register(&mut store, cfg.frontend_seed, cfg.frontend_layers, cfg.frontend_dim);
        let mut rng = crate::corpus::new_rng(crate::corpus::seed_chain(&[0xe571, cfg.init_seed]));
        let h2 = 2 * cfg.lstm_hidden;
        let xa = crate::tensor::store::xavier;
        let layer_logits = store
            .register("estimator.layer_logits", Tensor::zeros(&[1, cfg.frontend_layers]));
        let lstm_fwd =
            LstmParams::register(&mut store, "estimator.lstm_fwd", cfg.frontend_dim, cfg.lstm_hidden, &mut rng);
        let lstm_bwd =
            LstmParams::register(&mut store, "estimator.lstm_bwd", cfg.frontend_dim, cfg.lstm_hidden, &mut rng);
        let attn_w = store.register("estimator.attn.w", xa(&[h2, cfg.attn_hidden], &mut rng));
        let attn_b = store.register("estimator.attn.b", Tensor::zeros(&[cfg.attn_hidden]));
        let attn_v = store.register("estimator.attn.v", xa(&[cfg.attn_hidden, 1], &mut rng));
        let head_w = store.register("estimator.head.w", xa(&[h2, 11], &mut rng));
        let head_b = store.register("estimator.head.b", Tensor::zeros(&[11]));
        EstimatorModel {
            store,
            frontend,
            layer_logits,
            lstm_fwd,
            lstm_bwd,
            attn_w,
            attn_b,
            attn_v,
            head_w,
            head_b,
            meta: EstimatorMeta { config: cfg, ..EstimatorMeta::default() },
        }
    }

    pub fn extract(&self, mel: &crate::corpus::MelSpectrogram) -> SslFeatureStack {
        self.frontend.extract_with(&self.store, mel)
    }

    fn forward(&self, tape: &Tape, stack: &SslFeatureStack) -> Var {
        let logits = tape.param(&self.store, self.layer_logits);
        let weights = tape.softmax_rows(logits);
        let layers: Vec<Var> =
            stack.layers().iter().map(|l| tape.constant(l.clone())).collect();
        let summed = weighted_layer_sum(tape, &layers, weights);
        let fwd = (
            tape.param(&self.store, self.lstm_fwd.w_x),
            tape.param(&self.store, self.lstm_fwd.w_h),
            tape.param(&self.store, self.lstm_fwd.bias),
        );
        let bwd = (
            tape.param(&self.store, self.lstm_bwd.w_x),
            tape.param(&self.store, self.lstm_bwd.w_h),
            tape.param(&self.store, self.lstm_bwd.bias),
        );
        let states = tape.bilstm(summed, fwd, bwd);
        let (pooled, _) = attention_pool_on_tape(
            tape,
            states,
            None,
            (
                tape.param(&self.store, self.attn_w),
                tape.param(&self.store, self.attn_b),
                tape.param(&self.store, self.attn_v),
            ),
        )
        .expect("non-empty sequence");
        tape.linear(
            pooled,
            tape.param(&self.store, self.head_w),
            tape.param(&self.store, self.head_b),
        )
    }

    /// Raw 11-dim regression from a feature stack.
    pub fn estimate(&self, stack: &SslFeatureStack) -> Result<ImpressionVector, EstimatorError> {
        if !self.meta.trained {
            return Err(EstimatorError::NotInitialized);
        }
        let tape = Tape::new();
        let out = tape.value(self.forward(&tape, stack));
        let mut scores = [0.0f64; 11];
        for (s, o) in scores.iter_mut().zip(out.data()) {
            *s = *o as f64;
        }
        Ok(ImpressionVector::new(scores)?)
    }

    /// Deployment-style estimate: dims A–J from the model, K from the
    /// utterance speech rate standardized with the training-corpus stats.
    pub fn estimate_with_rate(
        &self,
        stack: &SslFeatureStack,
        moras_per_second: f64,
    ) -> Result<ImpressionVector, EstimatorError> {
        let mut v = self.estimate(stack)?;
        let k = (moras_per_second - self.meta.rate_mean) / self.meta.rate_std;
        v.set(ImpressionDim::K, k)?;
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<(), EstimatorError> {
        let meta = serde_json::to_value(&self.meta).expect("meta");
        crate::checkpoint::Checkpoint::from_store(&self.store, meta).save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EstimatorError> {
        let ckpt = crate::checkpoint::Checkpoint::load(path)?;
        let meta: EstimatorMeta = serde_json::from_value(ckpt.meta.clone()).map_err(|e| {
            EstimatorError::Checkpoint(crate::checkpoint::CheckpointError::Format(format!(
                "meta: {e}"
            )))
        })?;
        let mut model = EstimatorModel::new(meta.config.clone());
        ckpt.load_into(&mut model.store)?;
        model.meta = meta;
        Ok(model)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug)]
pub struct EstimatorReport {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    /// Auto-label-style RMSE on the eval split (A–J model, K analytic).
    pub holdout_rmse: f64,
    /// RMSE of the model head on the Likert dims A–J only.
    pub holdout_rmse_likert: f64,
}

pub fn write_report_csv(path: &Path, report: &EstimatorReport) -> std::io::Result<()> {
    use std::io::Write;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,train_mse,val_mse")?;
    for e in &report.epochs {
        writeln!(w, "{},{:.8},{:.8}", e.epoch, e.train_mse, e.val_mse)?;
    }
    writeln!(w, "# best_epoch,{}", report.best_epoch)?;
    writeln!(w, "# best_val_mse,{:.8}", report.best_val_mse)?;
    writeln!(w, "# holdout_rmse,{:.8}", report.holdout_rmse)?;
    writeln!(w, "# holdout_rmse_likert,{:.8}", report.holdout_rmse_likert)?;
    w.flush()
}

fn assert_disjoint_speakers(manifest: &Manifest) -> Result<(), EstimatorError> {
    let train = manifest.speaker_ids("train");
    let val = manifest.speaker_ids("val");
    let eval = manifest.speaker_ids("eval");
    for s in &val {
        if train.contains(s) {
            return Err(EstimatorError::SplitLeakage(s.clone()));
        }
    }
    for s in &eval {
        if train.contains(s) || val.contains(s) {
            return Err(EstimatorError::SplitLeakage(s.clone()));
        }
    }
    Ok(())
}

/// Train with per-epoch validation; the selected checkpoint is the epoch
/// with the lowest validation MSE. Returns the model restored to that
/// epoch plus the full report.
pub fn train_estimator(
    manifest: &Manifest,
    cfg: EstimatorConfig,
) -> Result<(EstimatorModel, EstimatorReport), EstimatorError> {
    assert_disjoint_speakers(manifest)?;
    let train_recs = manifest.split("train");
    let val_recs = manifest.split("val");
    let eval_recs = manifest.split("eval");
    if train_recs.is_empty() || val_recs.is_empty() {
        return Err(EstimatorError::ShapeError("train and val splits must be non-empty".into()));
    }

    let mut model = EstimatorModel::new(cfg.clone());
    model.meta.rate_mean = manifest.stats.rate_mean;
    model.meta.rate_std = manifest.stats.rate_std;

    let load_set = |recs: &[&ManifestRecord]| -> Result<Vec<(SslFeatureStack, Tensor)>, EstimatorError> {
        recs.iter()
            .map(|rec| {
                let mel = manifest.load_mel(rec)?;
                let stack = model.extract(&mel);
                let label =
                    Tensor::from_vec(&[1, 11], rec.label_vector().to_f32().to_vec());
                Ok((stack, label))
            })
            .collect()
    };
    let train_set = load_set(&train_recs)?;
    let val_set = load_set(&val_recs)?;

    // Dim K is never regressed, so losses cover the Likert dims A-J only.
    let val_mse_of = |model: &EstimatorModel| -> f64 {
        let mut total = 0.0f64;
        for (stack, label) in &val_set {
            let tape = Tape::new();
            let pred = model.forward(&tape, stack);
            let pred_aj = tape.slice_cols(pred, 0, 10);
            let tgt = tape.constant(Tensor::from_vec(&[1, 10], label.data()[..10].to_vec()));
            total += tape.value(tape.mse(pred_aj, tgt)).item() as f64;
        }
        total / val_set.len() as f64
    };

    let mut opt = Adam::new(&model.store);
    opt.weight_decay = cfg.weight_decay;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = crate::corpus::new_rng(crate::corpus::seed_chain(&[
            0x3f0c,
            cfg.init_seed,
            epoch as u64,
        ]));
        order.shuffle(&mut rng);
        let mut train_total = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let mut accum = GradAccum::new(&model.store);
            for &idx in chunk {
                let tape = Tape::new();
                let loss = if cfg.mixup {
                    use rand::Rng;
                    use rand_distr::Distribution;
                    let other = rng.random_range(0..train_set.len());
                    // The oracle is linear, so affine combinations slightly
                    // outside the convex hull still carry exact labels;
                    // extrapolated pairs punish non-linear shortcut fits.
                    let lambda = rng.random_range(-0.5..1.5f32);
                    let (mut stack, label) =
                        mix_items(&train_set[idx], &train_set[other], lambda);
                    // Feature-level jitter (the stub image of extra mel
                    // noise); per-frame noise averages out of the global
                    // statistics the labels depend on.
                    let noise = rand_distr::Normal::new(0.0f32, 0.2).unwrap();
                    stack = SslFeatureStack::new(
                        stack
                            .layers()
                            .iter()
                            .map(|l| {
                                Tensor::from_vec(
                                    l.shape(),
                                    l.data()
                                        .iter()
                                        .map(|v| v + noise.sample(&mut rng))
                                        .collect(),
                                )
                            })
                            .collect(),
                    );
                    let pred = model.forward(&tape, &stack);
                    let pred_aj = tape.slice_cols(pred, 0, 10);
                    let tgt =
                        tape.constant(Tensor::from_vec(&[1, 10], label.data()[..10].to_vec()));
                    tape.mse(pred_aj, tgt)
                } else {
                    let (stack, label) = &train_set[idx];
                    let pred = model.forward(&tape, stack);
                    let pred_aj = tape.slice_cols(pred, 0, 10);
                    let tgt =
                        tape.constant(Tensor::from_vec(&[1, 10], label.data()[..10].to_vec()));
                    tape.mse(pred_aj, tgt)
                };
                train_total += tape.value(loss).item() as f64;
                let mut grads = tape.backward(loss);
                accum.add(tape.param_grads(&mut grads));
            }
            accum.scale(1.0 / chunk.len() as f32);
            let grads = accum.take();
            opt.step(&mut model.store, &grads, cfg.lr, &|n| n.starts_with("estimator."));
        }
        let train_mse = train_total / train_set.len() as f64;
        let val_mse = val_mse_of(&model);
        epochs.push(EpochMetrics { epoch, train_mse, val_mse });
        let improved = best.as_ref().map(|(_, b, _)| val_mse < *b).unwrap_or(true);
        if improved {
            let snapshot = model.store.ids().map(|id| model.store.get(id).clone()).collect();
            best = Some((epoch, val_mse, snapshot));
        }
    }

    let (best_epoch, best_val_mse, snapshot) = best.expect("at least one epoch");
    for (id, tensor) in model.store.ids().collect::<Vec<_>>().into_iter().zip(snapshot) {
        *model.store.get_mut(id) = tensor;
    }
    model.meta.trained = true;
    model.meta.best_epoch = best_epoch;
    model.meta.best_val_mse = best_val_mse;

    // Held-out benchmark on the zero-shot eval split.
    let (holdout_rmse, holdout_rmse_likert) = if eval_recs.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let labeled = auto_label(&model, manifest, &eval_recs)?;
        let truth: Vec<ImpressionVector> = eval_recs.iter().map(|r| r.label_vector()).collect();
        let preds: Vec<ImpressionVector> = labeled.into_iter().map(|(_, v)| v).collect();
        let all = rmse(&preds, &truth)?;
        let mut se = 0.0f64;
        let mut n = 0usize;
        for (p, t) in preds.iter().zip(&truth) {
            for dim in ImpressionDim::LIKERT {
                let d = p.get(dim) - t.get(dim);
                se += d * d;
                n += 1;
            }
        }
        (all, (se / n as f64).sqrt())
    };

    let report = EstimatorReport {
        epochs,
        best_epoch,
        best_val_mse,
        holdout_rmse,
        holdout_rmse_likert,
    };
    Ok((model, report))
}

/// Convex combination of two cached items, truncated to the shorter one.
fn mix_items(
    a: &(SslFeatureStack, Tensor),
    b: &(SslFeatureStack, Tensor),
    lambda: f32,
) -> (SslFeatureStack, Tensor) {
    let t = a.0.frames().min(b.0.frames());
    let d = a.0.dim();
    let layers = (0..a.0.n_layers())
        .map(|l| {
            let la = &a.0.layer(l).data()[..t * d];
            let lb = &b.0.layer(l).data()[..t * d];
            Tensor::from_vec(
                &[t, d],
                la.iter().zip(lb).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect(),
            )
        })
        .collect();
    let label = Tensor::from_vec(
        &[1, 11],
        a.1.data()
            .iter()
            .zip(b.1.data())
            .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
            .collect(),
    );
    (SslFeatureStack::new(layers), label)
}

/// Label records with the estimator: A–J from the model, K from
/// standardizing speech rates over the supplied manifest records.
pub fn auto_label(
    model: &EstimatorModel,
    manifest: &Manifest,
    records: &[&ManifestRecord],
) -> Result<Vec<(String, ImpressionVector)>, EstimatorError> {
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let rates: Vec<f64> = records.iter().map(|r| r.moras_per_second).collect();
    let ks = if rates.len() >= 2 {
        standardize_speech_rates(&rates)?
    } else {
        vec![0.0]
    };
    let mut out = Vec::with_capacity(records.len());
    for (rec, k) in records.iter().zip(ks) {
        let mel = manifest.load_mel(rec)?;
        let stack = model.extract(&mel);
        let mut v = model.estimate(&stack)?;
        v.set(ImpressionDim::K, k)?;
        out.push((rec.utt_id.clone(), v));
    }
    Ok(out)
}

/// Root mean squared error across all dims and items.
pub fn rmse(pred: &[ImpressionVector], truth: &[ImpressionVector]) -> Result<f64, EstimatorError> {
    if pred.len() != truth.len() {
        return Err(EstimatorError::ShapeError(format!(
            "length mismatch: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(EstimatorError::ShapeError("empty inputs".into()));
    }
    let mut se = 0.0f64;
    for (p, t) in pred.iter().zip(truth) {
        for (a, b) in p.as_array().iter().zip(t.as_array()) {
            se += (a - b) * (a - b);
        }
    }
    Ok((se / (pred.len() * 11) as f64).sqrt())
}
