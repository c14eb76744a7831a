//! Objective evaluation harness: single-dimension sweeps, two-dimension
//! grids, and speaker-similarity analysis against recorded baselines.
//!
//! Sweeps use a paired design: the same fixed sentence list is synthesized
//! in every cell, so per-cell means are directly comparable even at small n.
//! Speaker similarity uses an embedder trained independently of the TTS
//! model (a separate speaker-classification encoder over the training
//! split), mirroring the role of an off-the-shelf verification model.

use std::io::Write as IoWrite;
use std::path::Path;

use rand::Rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::TtsModel;
use crate::corpus::{Manifest, ManifestRecord, MelSpectrogram, FRAME_SHIFT_MS};
use crate::encoder::{SpeakerEncoder, SpeakerEncoderConfig};
use crate::estimator::EstimatorModel;
use crate::frontend::FrontendStub;
use crate::impression::{ImpressionDim, ImpressionVector};
use crate::tensor::{Adam, GradAccum, ParamStore, Tape};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("Backbone: {0}")]
    Backbone(#[from] crate::backbone::BackboneError),
    #[error("Estimator: {0}")]
    Estimator(#[from] crate::estimator::EstimatorError),
    #[error("Corpus: {0}")]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error("Impression: {0}")]
    Impression(#[from] crate::impression::ImpressionError),
    #[error("Plot: {0}")]
    Plot(#[from] crate::plot::PlotError),
    #[error("Io: {0} ({1})")]
    Io(std::io::Error, String),
    #[error("BadInput: {0}")]
    BadInput(String),
}

/// Default modulation grid −3..+3.
pub fn default_deltas() -> Vec<f64> {
    (-3..=3).map(|d| d as f64).collect()
}

/// Fixed seeded sentence list shared across sweep cells.
pub fn sentence_set(
    n: usize,
    vocab: usize,
    tokens_min: usize,
    tokens_max: usize,
    seed: u64,
) -> Vec<Vec<usize>> {
    let mut rng = crate::corpus::new_rng(crate::corpus::seed_chain(&[0x5e27e, seed]));
    (0..n)
        .map(|_| {
            let len = rng.random_range(tokens_min..=tokens_max);
            (0..len).map(|_| rng.random_range(0..vocab)).collect()
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub dim: ImpressionDim,
    pub deltas: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub n: usize,
}

impl SweepResult {
    /// Rank correlation between delta and mean estimated score.
    pub fn spearman(&self) -> f64 {
        crate::stats::spearman(&self.deltas, &self.mean)
    }
}

#[derive(Clone, Debug)]
pub struct PairSweepResult {
    pub dims: (ImpressionDim, ImpressionDim),
    pub deltas: Vec<f64>,
    /// `grid_d1[i][j]`: mean estimated first-dim score at (δ1=deltas[i], δ2=deltas[j]).
    pub grid_d1: Vec<Vec<f64>>,
    pub grid_d2: Vec<Vec<f64>>,
    pub n: usize,
}

#[derive(Clone, Debug)]
pub struct SimilarityReport {
    pub speaker_id: String,
    /// |modulation| levels, typically 0..3.
    pub levels: Vec<f64>,
    /// Cosine similarities of generated utterances at each level.
    pub per_level: Vec<Vec<f64>>,
    /// Other recorded utterances of the same speaker.
    pub same_speaker: Vec<f64>,
    /// Recorded utterances of different speakers.
    pub different_speaker: Vec<f64>,
}

fn synth_and_estimate(
    model: &TtsModel,
    estimator: &EstimatorModel,
    reference: &crate::frontend::SslFeatureStack,
    tokens: &[usize],
    v: &ImpressionVector,
) -> Result<ImpressionVector, EvalError> {
    let mel = model.synthesize(tokens, reference, v)?;
    let rate = tokens.len() as f64 / (mel.frames() as f64 * FRAME_SHIFT_MS / 1000.0);
    let stack = estimator.extract(&mel);
    Ok(estimator.estimate_with_rate(&stack, rate)?)
}

/// Modulate one dimension over a delta grid and estimate the scores of the
/// generated utterances.
pub fn sweep_single(
    model: &TtsModel,
    estimator: &EstimatorModel,
    reference_mel: &MelSpectrogram,
    base_v: &ImpressionVector,
    dim: ImpressionDim,
    deltas: &[f64],
    sentences: &[Vec<usize>],
) -> Result<SweepResult, EvalError> {
    if sentences.is_empty() || deltas.is_empty() {
        return Err(EvalError::BadInput("need at least one delta and one sentence".into()));
    }
    let reference = model.extract(reference_mel);
    let mut mean = Vec::with_capacity(deltas.len());
    let mut std = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let v = base_v.modulate(&[(dim, delta)])?;
        let scores: Vec<f64> = sentences
            .iter()
            .map(|tokens| {
                synth_and_estimate(model, estimator, &reference, tokens, &v)
                    .map(|est| est.get(dim))
            })
            .collect::<Result<_, _>>()?;
        mean.push(crate::stats::mean(&scores));
        std.push(crate::stats::pop_std(&scores));
    }
    Ok(SweepResult { dim, deltas: deltas.to_vec(), mean, std, n: sentences.len() })
}

/// Joint modulation of two dimensions over a full grid.
pub fn sweep_pair(
    model: &TtsModel,
    estimator: &EstimatorModel,
    reference_mel: &MelSpectrogram,
    base_v: &ImpressionVector,
    dims: (ImpressionDim, ImpressionDim),
    deltas: &[f64],
    sentences: &[Vec<usize>],
) -> Result<PairSweepResult, EvalError> {
    if dims.0 == dims.1 {
        return Err(EvalError::BadInput("pair sweep needs two distinct dims".into()));
    }
    if sentences.is_empty() || deltas.is_empty() {
        return Err(EvalError::BadInput("need at least one delta and one sentence".into()));
    }
    let reference = model.extract(reference_mel);
    let mut grid_d1 = vec![vec![0.0f64; deltas.len()]; deltas.len()];
    let mut grid_d2 = vec![vec![0.0f64; deltas.len()]; deltas.len()];
    for (i, &d1) in deltas.iter().enumerate() {
        for (j, &d2) in deltas.iter().enumerate() {
            let v = base_v.modulate(&[(dims.0, d1), (dims.1, d2)])?;
            let mut s1 = Vec::with_capacity(sentences.len());
            let mut s2 = Vec::with_capacity(sentences.len());
            for tokens in sentences {
                let est = synth_and_estimate(model, estimator, &reference, tokens, &v)?;
                s1.push(est.get(dims.0));
                s2.push(est.get(dims.1));
            }
            grid_d1[i][j] = crate::stats::mean(&s1);
            grid_d2[i][j] = crate::stats::mean(&s2);
        }
    }
    Ok(PairSweepResult {
        dims,
        deltas: deltas.to_vec(),
        grid_d1,
        grid_d2,
        n: sentences.len(),
    })
}

// ---- independent speaker embedder ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub frontend_seed: u64,
    pub frontend_layers: usize,
    pub frontend_dim: usize,
    pub lstm_hidden: usize,
    pub attn_hidden: usize,
    pub latent_dim: usize,
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub init_seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            frontend_seed: 0,
            frontend_layers: 4,
            frontend_dim: 96,
            lstm_hidden: 64,
            attn_hidden: 32,
            latent_dim: 128,
            epochs: 3,
            lr: 1e-3,
            batch_size: 8,
            init_seed: 0,
        }
    }
}

/// Utterance-to-vector map trained as a speaker classifier on the training
/// split; used only by the similarity evaluation.
pub struct SpeakerEmbedder {
    store: ParamStore,
    frontend: FrontendStub,
    encoder: SpeakerEncoder,
    pub classes: Vec<String>,
}

impl SpeakerEmbedder {
    pub fn embed(&self, mel: &MelSpectrogram) -> Vec<f64> {
        let stack = self.frontend.extract_with(&self.store, mel);
        let latent = self.encoder.encode(&self.store, &stack);
        latent.0.iter().map(|v| *v as f64).collect()
    }
}

/// Train the embedder with cross entropy over training-split speakers.
pub fn train_embedder(
    manifest: &Manifest,
    cfg: EmbedderConfig,
) -> Result<SpeakerEmbedder, EvalError> {
    let records = manifest.split("train");
    if records.is_empty() {
        return Err(EvalError::BadInput("train split is empty".into()));
    }
    let classes = manifest.speaker_ids("train");
    let class_of = |speaker: &str| classes.iter().position(|s| s == speaker).unwrap();

    let mut store = ParamStore::new();
    let frontend =
        FrontendStub::register(&mut store, cfg.frontend_seed, cfg.frontend_layers, cfg.frontend_dim);
    let enc_cfg = SpeakerEncoderConfig {
        frontend_layers: cfg.frontend_layers,
        frontend_dim: cfg.frontend_dim,
        lstm_hidden: cfg.lstm_hidden,
        attn_hidden: cfg.attn_hidden,
        latent_dim: cfg.latent_dim,
        stl_tokens: 1,
        stl_heads: 1,
    };
    let mut rng = crate::corpus::new_rng(crate::corpus::seed_chain(&[0xe3b, cfg.init_seed]));
    let encoder = SpeakerEncoder::register(&mut store, "embedder", &enc_cfg, &mut rng);
    let head_w = store.register(
        "embedder_head.w",
        crate::tensor::store::xavier(&[cfg.latent_dim, classes.len()], &mut rng),
    );
    let head_b = store.register("embedder_head.b", crate::tensor::Tensor::zeros(&[classes.len()]));

    // Cache feature stacks once.
    let items: Vec<(crate::frontend::SslFeatureStack, usize)> = records
        .iter()
        .map(|rec| {
            let mel = manifest.load_mel(rec)?;
            Ok((frontend.extract_with(&store, &mel), class_of(&rec.speaker_id)))
        })
        .collect::<Result<_, crate::corpus::CorpusError>>()?;

    let mut opt = Adam::new(&store);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut erng = crate::corpus::new_rng(crate::corpus::seed_chain(&[
            0xe3b1,
            cfg.init_seed,
            epoch as u64,
        ]));
        order.shuffle(&mut erng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut accum = GradAccum::new(&store);
            for &idx in chunk {
                let (stack, class) = &items[idx];
                let tape = Tape::new();
                let details = encoder.encode_on_tape(&tape, &store, stack);
                let logits = tape.linear(
                    details.latent,
                    tape.param(&store, head_w),
                    tape.param(&store, head_b),
                );
                let loss = tape.cross_entropy(logits, *class);
                let mut grads = tape.backward(loss);
                accum.add(tape.param_grads(&mut grads));
            }
            accum.scale(1.0 / chunk.len() as f32);
            let grads = accum.take();
            opt.step(&mut store, &grads, cfg.lr, &|n| {
                n.starts_with("embedder") // encoder and head, not the frontend
            });
        }
    }

    Ok(SpeakerEmbedder { store, frontend, encoder, classes })
}

/// Cosine similarity of modulated synthesis to the reference, against
/// same-speaker and different-speaker recorded baselines.
#[allow(clippy::too_many_arguments)]
pub fn speaker_similarity(
    model: &TtsModel,
    embedder: &SpeakerEmbedder,
    manifest: &Manifest,
    reference: &ManifestRecord,
    levels: &[f64],
    dims: &[ImpressionDim],
    sentences: &[Vec<usize>],
    seed: u64,
) -> Result<SimilarityReport, EvalError> {
    if sentences.is_empty() || levels.is_empty() || dims.is_empty() {
        return Err(EvalError::BadInput("need levels, dims and sentences".into()));
    }
    let ref_mel = manifest.load_mel(reference)?;
    let ref_emb = embedder.embed(&ref_mel);
    let ref_stack = model.extract(&ref_mel);
    let base_v = reference.label_vector();

    let mut per_level = Vec::with_capacity(levels.len());
    for &level in levels {
        let mut cosines = Vec::new();
        if level == 0.0 {
            for tokens in sentences {
                let mel = model.synthesize(tokens, &ref_stack, &base_v)?;
                cosines.push(crate::stats::cosine(&embedder.embed(&mel), &ref_emb));
            }
        } else {
            for &dim in dims {
                for sign in [-1.0, 1.0] {
                    let v = base_v.modulate(&[(dim, sign * level)])?;
                    for tokens in sentences {
                        let mel = model.synthesize(tokens, &ref_stack, &v)?;
                        cosines.push(crate::stats::cosine(&embedder.embed(&mel), &ref_emb));
                    }
                }
            }
        }
        per_level.push(cosines);
    }

    // Recorded baselines; the reference utterance never compares to itself.
    let mut rng = crate::corpus::new_rng(crate::corpus::seed_chain(&[0x51a1, seed]));
    let same: Vec<&ManifestRecord> = manifest
        .records
        .iter()
        .filter(|r| r.speaker_id == reference.speaker_id && r.utt_id != reference.utt_id)
        .collect();
    let mut same_speaker = Vec::new();
    for rec in pick(&same, 30, &mut rng) {
        let mel = manifest.load_mel(rec)?;
        same_speaker.push(crate::stats::cosine(&embedder.embed(&mel), &ref_emb));
    }
    let different: Vec<&ManifestRecord> = manifest
        .records
        .iter()
        .filter(|r| r.speaker_id != reference.speaker_id)
        .collect();
    let mut different_speaker = Vec::new();
    for rec in pick(&different, 80, &mut rng) {
        let mel = manifest.load_mel(rec)?;
        different_speaker.push(crate::stats::cosine(&embedder.embed(&mel), &ref_emb));
    }

    Ok(SimilarityReport {
        speaker_id: reference.speaker_id.clone(),
        levels: levels.to_vec(),
        per_level,
        same_speaker,
        different_speaker,
    })
}

/// Deterministic held-out reference choice: the first utterance of the
/// first female-tagged and first male-tagged eval-split speakers, falling
/// back to the first two speakers when a gender is missing.
pub fn pick_references(manifest: &Manifest) -> Vec<&ManifestRecord> {
    let speakers = manifest.speaker_ids("eval");
    let first_utt = |spk: &str| {
        manifest
            .records
            .iter()
            .filter(|r| r.speaker_id == spk && r.split == "eval")
            .min_by(|a, b| a.utt_id.cmp(&b.utt_id))
    };
    let gender_of = |spk: &str| {
        first_utt(spk)
            .map(|r| r.label_vector().get(ImpressionDim::B) > 4.0)
            .unwrap_or(false)
    };
    let female = speakers.iter().find(|s| gender_of(s));
    let male = speakers.iter().find(|s| !gender_of(s));
    let mut picks: Vec<&str> = Vec::new();
    for choice in [female, male] {
        if let Some(s) = choice {
            if !picks.contains(&s.as_str()) {
                picks.push(s);
            }
        }
    }
    for s in &speakers {
        if picks.len() >= 2 {
            break;
        }
        if !picks.contains(&s.as_str()) {
            picks.push(s);
        }
    }
    picks.into_iter().filter_map(first_utt).collect()
}

fn pick<'a>(
    records: &[&'a ManifestRecord],
    cap: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<&'a ManifestRecord> {
    if records.len() <= cap {
        return records.to_vec();
    }
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(rng);
    idx.truncate(cap);
    idx.sort_unstable();
    idx.into_iter().map(|i| records[i]).collect()
}

// ---- report emission ----

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, EvalError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| EvalError::Io(e, parent.display().to_string()))?;
    }
    Ok(std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| EvalError::Io(e, path.display().to_string()))?,
    ))
}

/// `sweep_<dim>.csv` (delta, mean, std, n) plus a line plot.
pub fn emit_sweep(result: &SweepResult, out_dir: &Path) -> Result<Vec<std::path::PathBuf>, EvalError> {
    let csv_path = out_dir.join(format!("sweep_{}.csv", result.dim.letter()));
    let mut w = create(&csv_path)?;
    writeln!(w, "delta,mean,std,n").map_err(|e| EvalError::Io(e, csv_path.display().to_string()))?;
    for ((d, m), s) in result.deltas.iter().zip(&result.mean).zip(&result.std) {
        writeln!(w, "{d:.6},{m:.6},{s:.6},{}", result.n)
            .map_err(|e| EvalError::Io(e, csv_path.display().to_string()))?;
    }
    w.flush().map_err(|e| EvalError::Io(e, csv_path.display().to_string()))?;
    let png_path = out_dir.join(format!("sweep_{}.png", result.dim.letter()));
    crate::plot::line_plot(&png_path, &result.deltas, &result.mean, Some(&result.std), None)?;
    Ok(vec![csv_path, png_path])
}

/// Long-format CSV plus one heatmap per swept dimension.
pub fn emit_pair(result: &PairSweepResult, out_dir: &Path) -> Result<Vec<std::path::PathBuf>, EvalError> {
    let tag = format!("{}{}", result.dims.0.letter(), result.dims.1.letter());
    let csv_path = out_dir.join(format!("sweep_pair_{tag}.csv"));
    let mut w = create(&csv_path)?;
    writeln!(
        w,
        "delta_{},delta_{},mean_{},mean_{},n",
        result.dims.0.letter(),
        result.dims.1.letter(),
        result.dims.0.letter(),
        result.dims.1.letter()
    )
    .map_err(|e| EvalError::Io(e, csv_path.display().to_string()))?;
    for (i, d1) in result.deltas.iter().enumerate() {
        for (j, d2) in result.deltas.iter().enumerate() {
            writeln!(
                w,
                "{d1:.6},{d2:.6},{:.6},{:.6},{}",
                result.grid_d1[i][j], result.grid_d2[i][j], result.n
            )
            .map_err(|e| EvalError::Io(e, csv_path.display().to_string()))?;
        }
    }
    w.flush().map_err(|e| EvalError::Io(e, csv_path.display().to_string()))?;
    let png1 = out_dir.join(format!("sweep_pair_{tag}_{}.png", result.dims.0.letter()));
    let png2 = out_dir.join(format!("sweep_pair_{tag}_{}.png", result.dims.1.letter()));
    crate::plot::heatmap(&png1, &result.grid_d1, &result.deltas, &result.deltas)?;
    crate::plot::heatmap(&png2, &result.grid_d2, &result.deltas, &result.deltas)?;
    Ok(vec![csv_path, png1, png2])
}

/// Long-format CSV (group,value) plus a box plot per report.
pub fn emit_similarity(
    report: &SimilarityReport,
    out_dir: &Path,
) -> Result<Vec<std::path::PathBuf>, EvalError> {
    let csv_path = out_dir.join(format!("similarity_{}.csv", report.speaker_id));
    let mut w = create(&csv_path)?;
    writeln!(w, "group,cosine").map_err(|e| EvalError::Io(e, csv_path.display().to_string()))?;
    let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
    for (level, cosines) in report.levels.iter().zip(&report.per_level) {
        groups.push((format!("gen_level_{level:.0}"), cosines.clone()));
    }
    groups.push(("same_speaker_rec".into(), report.same_speaker.clone()));
    groups.push(("different_speaker_rec".into(), report.different_speaker.clone()));
    for (name, values) in &groups {
        for v in values {
            writeln!(w, "{name},{v:.6}")
                .map_err(|e| EvalError::Io(e, csv_path.display().to_string()))?;
        }
    }
    w.flush().map_err(|e| EvalError::Io(e, csv_path.display().to_string()))?;
    let png_path = out_dir.join(format!("similarity_{}.png", report.speaker_id));
    crate::plot::box_plot(&png_path, &groups)?;
    Ok(vec![csv_path, png_path])
}
