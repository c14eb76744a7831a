//! Non-autoregressive acoustic model.
//!
//! Feed-forward Transformer encoder over token embeddings, a variance
//! adaptor (duration / pitch / energy with a length regulator), and a
//! Transformer decoder to 80-bin log-mel frames. The speaker embedding e is
//! projected to the model width and broadcast-added to the encoder output;
//! at synthesis time e comes from the control module's fused embedding
//! through the STL, so the impression vector steers the output.

pub mod train;

use thiserror::Error;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{ControlConfig, ControlModule, Mode};
use crate::corpus::MelSpectrogram;
use crate::encoder::{SpeakerEncoder, SpeakerEncoderConfig, StyleTokenLayer};
use crate::frontend::{FrontendStub, SslFeatureStack};
use crate::impression::ImpressionVector;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("NotInitialized: {0}")]
    NotInitialized(String),
    #[error("StageOrderViolation: {0}")]
    StageOrderViolation(String),
    #[error("ShapeError: {0}")]
    ShapeError(String),
    #[error("Checkpoint: {0}")]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
    #[error("Corpus: {0}")]
    Corpus(#[from] crate::corpus::CorpusError),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    /// Token embedding width (the linguistic vector size).
    pub ling_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            vocab_size: 64,
            ling_dim: 32,
            d_model: 128,
            heads: 2,
            ffn_dim: 512,
            enc_blocks: 2,
            dec_blocks: 2,
        }
    }
}

/// N×P matrix of linguistic vectors (embedded tokens).
#[derive(Clone, Debug)]
pub struct LinguisticSequence(pub Tensor);

/// Teacher-forcing targets for the variance adaptor.
#[derive(Clone, Debug)]
pub struct VarianceTargets {
    pub durations: Vec<usize>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
}

impl VarianceTargets {
    pub fn validate(&self, mel_frames: usize) -> Result<(), BackboneError> {
        let total: usize = self.durations.iter().sum();
        if total != mel_frames {
            return Err(BackboneError::ShapeError(format!(
                "durations sum {total} != mel frames {mel_frames}"
            )));
        }
        if self.pitch.len() != self.durations.len() || self.energy.len() != self.durations.len() {
            return Err(BackboneError::ShapeError(
                "pitch/energy length must match durations".into(),
            ));
        }
        Ok(())
    }
}

struct TransformerBlock {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    heads: usize,
}

impl TransformerBlock {
    fn register(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        ffn: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let xa = crate::tensor::store::xavier;
        TransformerBlock {
            wq: store.register(&format!("{prefix}.attn.wq"), xa(&[d, d], rng)),
            bq: store.register(&format!("{prefix}.attn.bq"), Tensor::zeros(&[d])),
            wk: store.register(&format!("{prefix}.attn.wk"), xa(&[d, d], rng)),
            bk: store.register(&format!("{prefix}.attn.bk"), Tensor::zeros(&[d])),
            wv: store.register(&format!("{prefix}.attn.wv"), xa(&[d, d], rng)),
            bv: store.register(&format!("{prefix}.attn.bv"), Tensor::zeros(&[d])),
            wo: store.register(&format!("{prefix}.attn.wo"), xa(&[d, d], rng)),
            bo: store.register(&format!("{prefix}.attn.bo"), Tensor::zeros(&[d])),
            ln1_g: store.register(&format!("{prefix}.ln1.g"), ones(d)),
            ln1_b: store.register(&format!("{prefix}.ln1.b"), Tensor::zeros(&[d])),
            ffn_w1: store.register(&format!("{prefix}.ffn.w1"), xa(&[d, ffn], rng)),
            ffn_b1: store.register(&format!("{prefix}.ffn.b1"), Tensor::zeros(&[ffn])),
            ffn_w2: store.register(&format!("{prefix}.ffn.w2"), xa(&[ffn, d], rng)),
            ffn_b2: store.register(&format!("{prefix}.ffn.b2"), Tensor::zeros(&[d])),
            ln2_g: store.register(&format!("{prefix}.ln2.g"), ones(d)),
            ln2_b: store.register(&format!("{prefix}.ln2.b"), Tensor::zeros(&[d])),
            heads,
        }
    }

    fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Var {
        let d = tape.value(x).cols();
        let d_head = d / self.heads;
        let scale = 1.0 / (d_head as f32).sqrt();
        let q = tape.linear(x, tape.param(store, self.wq), tape.param(store, self.bq));
        let k = tape.linear(x, tape.param(store, self.wk), tape.param(store, self.bk));
        let v = tape.linear(x, tape.param(store, self.wv), tape.param(store, self.bv));
        let mut ctx = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * d_head, d_head);
            let kh = tape.slice_cols(k, h * d_head, d_head);
            let vh = tape.slice_cols(v, h * d_head, d_head);
            let scores = tape.scale(
                tape.matmul(qh, crate::encoder::transpose_on_tape(tape, kh)),
                scale,
            );
            let attn = tape.softmax_rows(scores);
            ctx.push(tape.matmul(attn, vh));
        }
        let merged = tape.concat_cols(&ctx);
        let attn_out =
            tape.linear(merged, tape.param(store, self.wo), tape.param(store, self.bo));
        let res1 = tape.add(x, attn_out);
        let norm1 = tape.layer_norm(
            res1,
            tape.param(store, self.ln1_g),
            tape.param(store, self.ln1_b),
            1e-5,
        );
        let ffn = {
            let h1 = tape.relu(tape.linear(
                norm1,
                tape.param(store, self.ffn_w1),
                tape.param(store, self.ffn_b1),
            ));
            tape.linear(h1, tape.param(store, self.ffn_w2), tape.param(store, self.ffn_b2))
        };
        let res2 = tape.add(norm1, ffn);
        tape.layer_norm(
            res2,
            tape.param(store, self.ln2_g),
            tape.param(store, self.ln2_b),
            1e-5,
        )
    }
}

fn ones(n: usize) -> Tensor {
    Tensor::from_vec(&[n], vec![1.0; n])
}

/// Sinusoidal positional encoding rows [0, len). Tables are cached per
/// width and grown on demand.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    use std::sync::Mutex;
    static CACHE: Mutex<Vec<(usize, Vec<f32>)>> = Mutex::new(Vec::new());
    let mut cache = CACHE.lock().expect("posenc cache");
    let entry = match cache.iter_mut().find(|(width, _)| *width == d) {
        Some((_, data)) => data,
        None => {
            cache.push((d, Vec::new()));
            &mut cache.last_mut().unwrap().1
        }
    };
    let have = entry.len() / d;
    if have < len {
        let grow_to = len.max(have.max(64) * 2);
        entry.resize(grow_to * d, 0.0);
        for pos in have..grow_to {
            for i in 0..d / 2 {
                let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
                entry[pos * d + 2 * i] = angle.sin() as f32;
                entry[pos * d + 2 * i + 1] = angle.cos() as f32;
            }
        }
    }
    Tensor::from_vec(&[len, d], entry[..len * d].to_vec())
}

/// Acoustic-model parameters (namespace `backbone.`).
pub struct Backbone {
    pub cfg: BackboneConfig,
    embed: ParamId,
    in_proj_w: ParamId,
    in_proj_b: ParamId,
    spk_proj_w: ParamId,
    spk_proj_b: ParamId,
    enc_blocks: Vec<TransformerBlock>,
    dec_blocks: Vec<TransformerBlock>,
    dur_w: ParamId,
    dur_b: ParamId,
    pitch_w: ParamId,
    pitch_b: ParamId,
    energy_w: ParamId,
    energy_b: ParamId,
    pitch_embed: ParamId,
    energy_embed: ParamId,
    mel_w: ParamId,
    mel_b: ParamId,
}

/// Everything the loss needs from one teacher-forced pass.
pub struct AcousticPrediction {
    pub mel: Var,
    pub log_dur: Var,
    pub pitch: Var,
    pub energy: Var,
}

impl Backbone {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &BackboneConfig,
        latent_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let xa = crate::tensor::store::xavier;
        let d = cfg.d_model;
        let embed = store.register(
            &format!("{prefix}.embed"),
            xa(&[cfg.vocab_size, cfg.ling_dim], rng),
        );
        let in_proj_w = store.register(&format!("{prefix}.in_proj.w"), xa(&[cfg.ling_dim, d], rng));
        let in_proj_b = store.register(&format!("{prefix}.in_proj.b"), Tensor::zeros(&[d]));
        let spk_proj_w =
            store.register(&format!("{prefix}.spk_proj.w"), xa(&[latent_dim, d], rng));
        let spk_proj_b = store.register(&format!("{prefix}.spk_proj.b"), Tensor::zeros(&[d]));
        let enc_blocks = (0..cfg.enc_blocks)
            .map(|b| {
                TransformerBlock::register(
                    store,
                    &format!("{prefix}.enc{b}"),
                    d,
                    cfg.ffn_dim,
                    cfg.heads,
                    rng,
                )
            })
            .collect();
        let dec_blocks = (0..cfg.dec_blocks)
            .map(|b| {
                TransformerBlock::register(
                    store,
                    &format!("{prefix}.dec{b}"),
                    d,
                    cfg.ffn_dim,
                    cfg.heads,
                    rng,
                )
            })
            .collect();
        Backbone {
            cfg: cfg.clone(),
            embed,
            in_proj_w,
            in_proj_b,
            spk_proj_w,
            spk_proj_b,
            enc_blocks,
            dec_blocks,
            dur_w: store.register(&format!("{prefix}.var.dur.w"), xa(&[d, 1], rng)),
            dur_b: store.register(&format!("{prefix}.var.dur.b"), Tensor::zeros(&[1])),
            pitch_w: store.register(&format!("{prefix}.var.pitch.w"), xa(&[d, 1], rng)),
            pitch_b: store.register(&format!("{prefix}.var.pitch.b"), Tensor::zeros(&[1])),
            energy_w: store.register(&format!("{prefix}.var.energy.w"), xa(&[d, 1], rng)),
            energy_b: store.register(&format!("{prefix}.var.energy.b"), Tensor::zeros(&[1])),
            pitch_embed: store.register(&format!("{prefix}.var.pitch_embed"), xa(&[1, d], rng)),
            energy_embed: store.register(&format!("{prefix}.var.energy_embed"), xa(&[1, d], rng)),
            mel_w: store.register(&format!("{prefix}.mel.w"), xa(&[d, crate::corpus::MEL_BINS], rng)),
            mel_b: store.register(&format!("{prefix}.mel.b"), Tensor::zeros(&[crate::corpus::MEL_BINS])),
        }
    }

    pub fn embed_tokens(&self, tape: &Tape, store: &ParamStore, tokens: &[usize]) -> Var {
        tape.gather_rows(tape.param(store, self.embed), tokens)
    }

    /// Encoder side: token embeddings → encoder states with e added.
    fn encode_conditioned(
        &self,
        tape: &Tape,
        store: &ParamStore,
        tokens: &[usize],
        spk_embedding: Var,
    ) -> Var {
        let ling = self.embed_tokens(tape, store, tokens);
        let mut h = tape.linear(
            ling,
            tape.param(store, self.in_proj_w),
            tape.param(store, self.in_proj_b),
        );
        let pe = positional_encoding(tokens.len(), self.cfg.d_model);
        h = tape.add(h, tape.constant(pe));
        for block in &self.enc_blocks {
            h = block.forward(tape, store, h);
        }
        let e_proj = tape.linear(
            spk_embedding,
            tape.param(store, self.spk_proj_w),
            tape.param(store, self.spk_proj_b),
        );
        tape.add_row_broadcast(h, e_proj)
    }

    fn decode(&self, tape: &Tape, store: &ParamStore, frames: Var) -> Var {
        let t = tape.value(frames).rows();
        let pe = positional_encoding(t, self.cfg.d_model);
        let mut h = tape.add(frames, tape.constant(pe));
        for block in &self.dec_blocks {
            h = block.forward(tape, store, h);
        }
        tape.linear(h, tape.param(store, self.mel_w), tape.param(store, self.mel_b))
    }

    /// Teacher-forced pass with ground-truth durations/pitch/energy.
    pub fn forward_teacher(
        &self,
        tape: &Tape,
        store: &ParamStore,
        tokens: &[usize],
        spk_embedding: Var,
        targets: &VarianceTargets,
    ) -> AcousticPrediction {
        let cond = self.encode_conditioned(tape, store, tokens, spk_embedding);
        let log_dur = tape.linear(cond, tape.param(store, self.dur_w), tape.param(store, self.dur_b));
        let pitch = tape.linear(cond, tape.param(store, self.pitch_w), tape.param(store, self.pitch_b));
        let energy =
            tape.linear(cond, tape.param(store, self.energy_w), tape.param(store, self.energy_b));

        let n = tokens.len();
        let pitch_t = tape.constant(Tensor::from_vec(
            &[n, 1],
            targets.pitch.iter().map(|p| *p as f32).collect(),
        ));
        let energy_t = tape.constant(Tensor::from_vec(
            &[n, 1],
            targets.energy.iter().map(|e| *e as f32).collect(),
        ));
        let with_var = self.add_variance(tape, store, cond, pitch_t, energy_t);
        let frames = tape.length_regulate(with_var, &targets.durations);
        let mel = self.decode(tape, store, frames);
        AcousticPrediction { mel, log_dur, pitch, energy }
    }

    fn add_variance(
        &self,
        tape: &Tape,
        store: &ParamStore,
        cond: Var,
        pitch: Var,
        energy: Var,
    ) -> Var {
        let p_add = tape.matmul(pitch, tape.param(store, self.pitch_embed));
        let e_add = tape.matmul(energy, tape.param(store, self.energy_embed));
        tape.add(tape.add(cond, p_add), e_add)
    }

    /// Inference pass: predicted durations (min 1 frame per token),
    /// predicted pitch/energy. Returns the mel plus predicted durations.
    pub fn forward_infer(
        &self,
        tape: &Tape,
        store: &ParamStore,
        tokens: &[usize],
        spk_embedding: Var,
    ) -> (Var, Vec<usize>, usize) {
        let cond = self.encode_conditioned(tape, store, tokens, spk_embedding);
        let log_dur = tape.linear(cond, tape.param(store, self.dur_w), tape.param(store, self.dur_b));
        let pitch = tape.linear(cond, tape.param(store, self.pitch_w), tape.param(store, self.pitch_b));
        let energy =
            tape.linear(cond, tape.param(store, self.energy_w), tape.param(store, self.energy_b));
        let mut clamped = 0usize;
        let durations: Vec<usize> = tape
            .value(log_dur)
            .data()
            .iter()
            .map(|ld| {
                let d = (ld.exp()).round() as isize;
                if d < 1 {
                    clamped += 1;
                    1
                } else {
                    d as usize
                }
            })
            .collect();
        let with_var = self.add_variance(tape, store, cond, pitch, energy);
        let frames = tape.length_regulate(with_var, &durations);
        let mel = self.decode(tape, store, frames);
        (mel, durations, clamped)
    }
}

/// Per-component loss values in f64, plus their sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub mel_l1: f64,
    pub duration: f64,
    pub pitch: f64,
    pub energy: f64,
    pub total: f64,
}

/// Standard objective: L1 on mel, MSE on log-duration, pitch and energy.
/// Standalone (non-tape) form used for reporting and as the loss contract.
pub fn compute_losses(
    pred_mel: &Tensor,
    pred_log_dur: &[f64],
    pred_pitch: &[f64],
    pred_energy: &[f64],
    target_mel: &Tensor,
    targets: &VarianceTargets,
) -> Result<LossValues, BackboneError> {
    if pred_mel.shape() != target_mel.shape() {
        return Err(BackboneError::ShapeError(format!(
            "mel {:?} vs {:?}",
            pred_mel.shape(),
            target_mel.shape()
        )));
    }
    let n = targets.durations.len();
    if pred_log_dur.len() != n || pred_pitch.len() != n || pred_energy.len() != n {
        return Err(BackboneError::ShapeError(
            "variance prediction length mismatch".into(),
        ));
    }
    let mel_l1 = pred_mel
        .data()
        .iter()
        .zip(target_mel.data())
        .map(|(a, b)| (*a as f64 - *b as f64).abs())
        .sum::<f64>()
        / pred_mel.len() as f64;
    let duration = targets
        .durations
        .iter()
        .zip(pred_log_dur)
        .map(|(d, p)| {
            let t = (*d as f64).ln();
            (p - t) * (p - t)
        })
        .sum::<f64>()
        / n as f64;
    let pitch = targets
        .pitch
        .iter()
        .zip(pred_pitch)
        .map(|(t, p)| (p - t) * (p - t))
        .sum::<f64>()
        / n as f64;
    let energy = targets
        .energy
        .iter()
        .zip(pred_energy)
        .map(|(t, p)| (p - t) * (p - t))
        .sum::<f64>()
        / n as f64;
    Ok(LossValues { mel_l1, duration, pitch, energy, total: mel_l1 + duration + pitch + energy })
}

// ---- full model ----

pub const NS_FRONTEND: &str = "frontend.";
pub const NS_ENCODER: &str = "encoder.";
pub const NS_STL: &str = "stl.";
pub const NS_BACKBONE: &str = "backbone.";
pub const NS_CONTROL: &str = "control.";
pub const NS_DISC: &str = "disc.";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TtsModelConfig {
    pub frontend_seed: u64,
    pub init_seed: u64,
    pub encoder: EncoderCfgSerde,
    pub backbone: BackboneConfig,
    pub control: ControlConfig,
}

/// Serializable mirror of [`SpeakerEncoderConfig`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderCfgSerde {
    pub frontend_layers: usize,
    pub frontend_dim: usize,
    pub lstm_hidden: usize,
    pub attn_hidden: usize,
    pub latent_dim: usize,
    pub stl_tokens: usize,
    pub stl_heads: usize,
}

impl From<&SpeakerEncoderConfig> for EncoderCfgSerde {
    fn from(c: &SpeakerEncoderConfig) -> Self {
        EncoderCfgSerde {
            frontend_layers: c.frontend_layers,
            frontend_dim: c.frontend_dim,
            lstm_hidden: c.lstm_hidden,
            attn_hidden: c.attn_hidden,
            latent_dim: c.latent_dim,
            stl_tokens: c.stl_tokens,
            stl_heads: c.stl_heads,
        }
    }
}

impl EncoderCfgSerde {
    pub fn to_cfg(&self) -> SpeakerEncoderConfig {
        SpeakerEncoderConfig {
            frontend_layers: self.frontend_layers,
            frontend_dim: self.frontend_dim,
            lstm_hidden: self.lstm_hidden,
            attn_hidden: self.attn_hidden,
            latent_dim: self.latent_dim,
            stl_tokens: self.stl_tokens,
            stl_heads: self.stl_heads,
        }
    }
}

impl Default for TtsModelConfig {
    fn default() -> Self {
        TtsModelConfig {
            frontend_seed: 0,
            init_seed: 0,
            encoder: (&SpeakerEncoderConfig::default()).into(),
            backbone: BackboneConfig::default(),
            control: ControlConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TtsMeta {
    pub config: TtsModelConfig,
    pub completed_stages: Vec<String>,
    pub steps_done: Vec<(String, u64)>,
}

/// The complete conditioned TTS model: frontend stub, speaker encoder, STL,
/// control module, discriminator and acoustic backbone in one store.
pub struct TtsModel {
    pub store: ParamStore,
    pub frontend: FrontendStub,
    pub encoder: SpeakerEncoder,
    pub stl: StyleTokenLayer,
    pub control: ControlModule,
    pub backbone: Backbone,
    pub disc: Discriminator,
    pub meta: TtsMeta,
}

impl TtsModel {
    pub fn new(config: TtsModelConfig) -> Self {
        let mut store = ParamStore::new();
        let enc_cfg = config.encoder.to_cfg();
        let frontend = FrontendStub::register(
            &mut store,
            config.frontend_seed,
            enc_cfg.frontend_layers,
            enc_cfg.frontend_dim,
        );
        let mut rng = crate::corpus::new_rng(crate::corpus::seed_chain(&[0x1417, config.init_seed]));
        let encoder = SpeakerEncoder::register(&mut store, "encoder", &enc_cfg, &mut rng);
        let stl = StyleTokenLayer::register(&mut store, "stl", &enc_cfg, &mut rng);
        let backbone =
            Backbone::register(&mut store, "backbone", &config.backbone, enc_cfg.latent_dim, &mut rng);
        let control =
            ControlModule::register(&mut store, "control", enc_cfg.latent_dim, &config.control, &mut rng);
        let disc = Discriminator::register(&mut store, "disc", &mut rng);
        TtsModel {
            store,
            frontend,
            encoder,
            stl,
            control,
            backbone,
            disc,
            meta: TtsMeta { config, ..TtsMeta::default() },
        }
    }

    pub fn stage_done(&self, stage: &str) -> bool {
        self.meta.completed_stages.iter().any(|s| s == stage)
    }

    pub fn extract(&self, mel: &MelSpectrogram) -> SslFeatureStack {
        self.frontend.extract_with(&self.store, mel)
    }

    /// Zero-shot synthesis: reference stack → x → control(h, v) → STL → e,
    /// then the acoustic pass with predicted durations. Pure in eval mode.
    pub fn synthesize(
        &self,
        tokens: &[usize],
        reference: &SslFeatureStack,
        v: &ImpressionVector,
    ) -> Result<MelSpectrogram, BackboneError> {
        if !self.stage_done("pretrain") {
            return Err(BackboneError::NotInitialized(
                "backbone has not completed stage pretrain".into(),
            ));
        }
        if !self.stage_done("control") {
            return Err(BackboneError::NotInitialized(
                "control module has not completed stage control".into(),
            ));
        }
        Ok(self.synthesize_unchecked(tokens, reference, v).0)
    }

    /// Synthesis without stage checks (training internals, ablations).
    pub fn synthesize_unchecked(
        &self,
        tokens: &[usize],
        reference: &SslFeatureStack,
        v: &ImpressionVector,
    ) -> (MelSpectrogram, Vec<usize>) {
        let tape = Tape::new();
        let details = self.encoder.encode_on_tape(&tape, &self.store, reference);
        let mut rng = crate::corpus::new_rng(0); // eval mode: never sampled
        let cond = self.control.condition_on_tape(
            &tape,
            &self.store,
            details.latent,
            v,
            Mode::Eval,
            &mut rng,
        );
        let (e, _) = self.stl.transform_on_tape(&tape, &self.store, cond.h);
        let (mel, durations, clamped) =
            self.backbone.forward_infer(&tape, &self.store, tokens, e);
        if clamped > 0 {
            eprintln!("synthesize: clamped {clamped} zero-duration tokens to 1 frame");
        }
        let mv = tape.value(mel);
        (
            MelSpectrogram::from_vec(mv.rows(), mv.data().to_vec()),
            durations,
        )
    }

    /// Pretrain-style synthesis (no control module; STL queried with x).
    pub fn synthesize_pretrain(
        &self,
        tokens: &[usize],
        reference: &SslFeatureStack,
    ) -> Result<MelSpectrogram, BackboneError> {
        if !self.stage_done("pretrain") {
            return Err(BackboneError::NotInitialized(
                "backbone has not completed stage pretrain".into(),
            ));
        }
        let tape = Tape::new();
        let details = self.encoder.encode_on_tape(&tape, &self.store, reference);
        let (e, _) = self.stl.transform_on_tape(&tape, &self.store, details.latent);
        let (mel, _, clamped) = self.backbone.forward_infer(&tape, &self.store, tokens, e);
        if clamped > 0 {
            eprintln!("synthesize: clamped {clamped} zero-duration tokens to 1 frame");
        }
        let mv = tape.value(mel);
        Ok(MelSpectrogram::from_vec(mv.rows(), mv.data().to_vec()))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), BackboneError> {
        let meta = serde_json::to_value(&self.meta).expect("meta");
        crate::checkpoint::Checkpoint::from_store(&self.store, meta).save(path)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, BackboneError> {
        let ckpt = crate::checkpoint::Checkpoint::load(path)?;
        let meta: TtsMeta = serde_json::from_value(ckpt.meta.clone()).map_err(|e| {
            crate::checkpoint::CheckpointError::Format(format!("meta: {e}"))
        })?;
        let mut model = TtsModel::new(meta.config.clone());
        ckpt.load_into(&mut model.store)?;
        model.meta = meta;
        Ok(model)
    }
}

/// Small convolutional discriminator for the optional LSGAN refinement:
/// two unfold+linear conv layers, mean pooling, and a scalar head.
pub struct Discriminator {
    c1_w: ParamId,
    c1_b: ParamId,
    c2_w: ParamId,
    c2_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

impl Discriminator {
    const K: usize = 3;
    const C1: usize = 32;
    const C2: usize = 16;

    pub fn register(store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng) -> Self {
        let xa = crate::tensor::store::xavier;
        Discriminator {
            c1_w: store.register(
                &format!("{prefix}.c1.w"),
                xa(&[Self::K * crate::corpus::MEL_BINS, Self::C1], rng),
            ),
            c1_b: store.register(&format!("{prefix}.c1.b"), Tensor::zeros(&[Self::C1])),
            c2_w: store.register(&format!("{prefix}.c2.w"), xa(&[Self::K * Self::C1, Self::C2], rng)),
            c2_b: store.register(&format!("{prefix}.c2.b"), Tensor::zeros(&[Self::C2])),
            out_w: store.register(&format!("{prefix}.out.w"), xa(&[Self::C2, 1], rng)),
            out_b: store.register(&format!("{prefix}.out.b"), Tensor::zeros(&[1])),
        }
    }

    /// Scalar realness score of a mel patch (needs ≥ 5 frames).
    pub fn score(&self, tape: &Tape, store: &ParamStore, mel: Var) -> Var {
        let u1 = tape.unfold(mel, Self::K);
        let h1 = tape.relu(tape.linear(u1, tape.param(store, self.c1_w), tape.param(store, self.c1_b)));
        let u2 = tape.unfold(h1, Self::K);
        let h2 = tape.relu(tape.linear(u2, tape.param(store, self.c2_w), tape.param(store, self.c2_b)));
        let pooled = tape.mean_rows(h2);
        tape.linear(pooled, tape.param(store, self.out_w), tape.param(store, self.out_b))
    }

    /// Force the score function to a constant (used by the fixed-point test).
    pub fn set_constant_output(&self, store: &mut ParamStore, value: f32) {
        for id in [self.c1_w, self.c1_b, self.c2_w, self.c2_b, self.out_w] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        store.get_mut(self.out_b).data_mut()[0] = value;
    }
}

/// LSGAN losses over scalar scores.
pub fn lsgan_d_loss(real_score: f64, fake_score: f64) -> f64 {
    0.5 * ((real_score - 1.0) * (real_score - 1.0) + fake_score * fake_score)
}

pub fn lsgan_g_loss(fake_score: f64) -> f64 {
    (fake_score - 1.0) * (fake_score - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_speaker, render_utterance};
    use rand::Rng;
    use rand::SeedableRng;

    fn tiny_config() -> TtsModelConfig {
        TtsModelConfig {
            frontend_seed: 0,
            init_seed: 0,
            encoder: EncoderCfgSerde {
                frontend_layers: 4,
                frontend_dim: 16,
                lstm_hidden: 12,
                attn_hidden: 8,
                latent_dim: 24,
                stl_tokens: 4,
                stl_heads: 2,
            },
            backbone: BackboneConfig {
                vocab_size: 16,
                ling_dim: 8,
                d_model: 16,
                heads: 2,
                ffn_dim: 32,
                enc_blocks: 1,
                dec_blocks: 1,
            },
            control: ControlConfig { proj_dim: 8, adversary_hidden: 16, ..ControlConfig::default() },
        }
    }

    #[test]
    fn length_regulator_brute_force_index_check() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(
            &[3, 2],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        ));
        let durations = [2usize, 1, 3];
        let out = tape.value(tape.length_regulate(x, &durations));
        assert_eq!(out.rows(), 6);
        let mut frame = 0;
        for (tok, &d) in durations.iter().enumerate() {
            for _ in 0..d {
                for c in 0..2 {
                    assert_eq!(
                        out.data()[frame * 2 + c],
                        tape.value(x).data()[tok * 2 + c],
                        "frame {frame} token {tok}"
                    );
                }
                frame += 1;
            }
        }
    }

    #[test]
    fn losses_zero_when_prediction_equals_target() {
        let mel = Tensor::from_vec(&[4, 80], vec![0.3; 320]);
        let targets = VarianceTargets {
            durations: vec![2, 2],
            pitch: vec![0.5, -0.5],
            energy: vec![1.0, 2.0],
        };
        let log_dur: Vec<f64> = targets.durations.iter().map(|d| (*d as f64).ln()).collect();
        let lv = compute_losses(&mel, &log_dur, &targets.pitch, &targets.energy, &mel, &targets)
            .unwrap();
        assert_eq!(lv.mel_l1, 0.0);
        assert_eq!(lv.duration, 0.0);
        assert_eq!(lv.pitch, 0.0);
        assert_eq!(lv.energy, 0.0);
        assert_eq!(lv.total, 0.0);
    }

    #[test]
    fn mel_l1_of_constant_offset_is_that_constant() {
        let a = Tensor::from_vec(&[3, 80], vec![0.0; 240]);
        let b = Tensor::from_vec(&[3, 80], vec![0.75; 240]);
        let targets = VarianceTargets {
            durations: vec![1, 1, 1],
            pitch: vec![0.0; 3],
            energy: vec![0.0; 3],
        };
        let log_dur = vec![0.0f64; 3];
        let lv = compute_losses(&b, &log_dur, &[0.0; 3], &[0.0; 3], &a, &targets).unwrap();
        assert!((lv.mel_l1 - 0.75).abs() < 1e-12);
    }

    #[test]
    fn losses_match_naive_loop_oracle_on_random_pairs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(40);
        for _ in 0..10 {
            let frames = rng.random_range(2..6);
            let n = rng.random_range(1..4);
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                Tensor::from_vec(
                    &[frames, 80],
                    (0..frames * 80).map(|_| rng.random_range(-1.0..1.0f32)).collect(),
                )
            };
            let pred = mk(&mut rng);
            let tgt = mk(&mut rng);
            let targets = VarianceTargets {
                durations: (0..n).map(|_| rng.random_range(1..5)).collect(),
                pitch: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                energy: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            };
            let pld: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..2.0)).collect();
            let pp: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let pe: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let lv = compute_losses(&pred, &pld, &pp, &pe, &tgt, &targets).unwrap();

            // Naive loops.
            let mut l1 = 0.0f64;
            for i in 0..frames * 80 {
                l1 += (pred.data()[i] as f64 - tgt.data()[i] as f64).abs();
            }
            l1 /= (frames * 80) as f64;
            let mut dur = 0.0;
            let mut pit = 0.0;
            let mut en = 0.0;
            for i in 0..n {
                let dt = (targets.durations[i] as f64).ln();
                dur += (pld[i] - dt) * (pld[i] - dt);
                pit += (pp[i] - targets.pitch[i]) * (pp[i] - targets.pitch[i]);
                en += (pe[i] - targets.energy[i]) * (pe[i] - targets.energy[i]);
            }
            dur /= n as f64;
            pit /= n as f64;
            en /= n as f64;
            assert!((lv.mel_l1 - l1).abs() < 1e-6);
            assert!((lv.duration - dur).abs() < 1e-6);
            assert!((lv.pitch - pit).abs() < 1e-6);
            assert!((lv.energy - en).abs() < 1e-6);
            assert!((lv.total - (l1 + dur + pit + en)).abs() < 1e-6);
        }
    }

    #[test]
    fn losses_reject_shape_mismatch() {
        let a = Tensor::zeros(&[2, 80]);
        let b = Tensor::zeros(&[3, 80]);
        let targets =
            VarianceTargets { durations: vec![2], pitch: vec![0.0], energy: vec![0.0] };
        assert!(matches!(
            compute_losses(&a, &[0.0], &[0.0], &[0.0], &b, &targets),
            Err(BackboneError::ShapeError(_))
        ));
    }

    #[test]
    fn synthesize_requires_completed_stages() {
        let model = TtsModel::new(tiny_config());
        let sp = make_speaker(1);
        let utt = render_utterance(&sp, &[1, 2, 3], 0.0, 1).unwrap();
        let stack = model.extract(&utt.mel);
        let err = model
            .synthesize(&[1, 2], &stack, &ImpressionVector::neutral())
            .unwrap_err();
        assert!(matches!(err, BackboneError::NotInitialized(_)));
    }

    #[test]
    fn untrained_forward_is_deterministic_80_wide_and_v_sensitive() {
        let mut model = TtsModel::new(tiny_config());
        model.meta.completed_stages = vec!["pretrain".into(), "control".into()];
        let sp = make_speaker(2);
        let utt = render_utterance(&sp, &[1, 2, 3, 4], 0.05, 2).unwrap();
        let stack = model.extract(&utt.mel);
        let tokens = [3usize, 1, 4, 1, 5];
        let v = ImpressionVector::neutral();

        let m1 = model.synthesize(&tokens, &stack, &v).unwrap();
        let m2 = model.synthesize(&tokens, &stack, &v).unwrap();
        assert_eq!(m1, m2, "eval synthesis must be bit-deterministic");
        assert_eq!(m1.bins(), 80);
        assert!(m1.frames() >= tokens.len());

        // Conditioning reaches the output even at init.
        let v2 = v.modulate(&[(crate::impression::ImpressionDim::I, 3.0)]).unwrap();
        let m3 = model.synthesize(&tokens, &stack, &v2).unwrap();
        let diff: f32 = m1
            .data()
            .iter()
            .zip(m3.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 0.0, "impression vector must reach the mel output");
    }

    #[test]
    fn model_save_load_round_trip() {
        let mut model = TtsModel::new(tiny_config());
        model.meta.completed_stages = vec!["pretrain".into()];
        let path = std::env::temp_dir().join(format!("impress-tts-{}.ckpt", std::process::id()));
        model.save(&path).unwrap();
        let loaded = TtsModel::load(&path).unwrap();
        assert_eq!(loaded.store.namespace_hash(""), model.store.namespace_hash(""));
        assert!(loaded.stage_done("pretrain"));
        assert!(!loaded.stage_done("control"));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn lsgan_fixed_point_losses_at_half() {
        assert_eq!(lsgan_d_loss(0.5, 0.5), 0.25);
        assert_eq!(lsgan_g_loss(0.5), 0.25);
    }

    #[test]
    fn constant_discriminator_scores_any_patch_at_bias() {
        let mut model = TtsModel::new(tiny_config());
        let disc = &model.disc;
        disc.set_constant_output(&mut model.store, 0.5);
        let tape = Tape::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(50);
        let mel = tape.constant(Tensor::from_vec(
            &[8, 80],
            (0..8 * 80).map(|_| rng.random_range(-1.0..1.0f32)).collect(),
        ));
        let s = model.disc.score(&tape, &model.store, mel);
        assert_eq!(tape.value(s).item(), 0.5);
        // At that fixed point both LSGAN losses are 0.25.
        let real = tape.value(s).item() as f64;
        assert_eq!(lsgan_d_loss(real, real), 0.25);
        assert_eq!(lsgan_g_loss(real), 0.25);
    }
}
