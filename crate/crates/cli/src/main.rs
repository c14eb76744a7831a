//! `impress` — operator entry point for the impression-controllable TTS
//! pipeline: corpus generation, staged training, labeling, synthesis,
//! objective sweeps, similarity evaluation and LLM vector mapping.
//!
//! Every subcommand accepts `--config <toml>` and `--seed <n>`; flags
//! override the file. Exit codes: 0 success, 1 failed precondition or
//! runtime error (one-line `error: <Kind>: ...` on stderr), 2 usage errors.

mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{load_config, RunConfig};
use impress_core::backbone::train::{train_stage, write_metrics_csv, Stage, TrainingStagePlan};
use impress_core::backbone::TtsModel;
use impress_core::corpus::{build_corpus, load_manifest, Manifest, ManifestRecord};
use impress_core::estimator::{auto_label, train_estimator, EstimatorModel};
use impress_core::eval::{
    emit_pair, emit_similarity, emit_sweep, pick_references, sentence_set, speaker_similarity,
    sweep_pair, sweep_single, train_embedder,
};
use impress_core::impression::{ImpressionDim, ImpressionVector};
use impress_core::llm::{map_impression, HttpChatClient, PromptTemplate, StubClient};
use impress_core::tensor::LrSchedule;

#[derive(Parser)]
#[command(
    name = "impress",
    version,
    about = "Impression-controllable zero-shot TTS on a synthetic oracle corpus"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic oracle corpus.
    GenCorpus(Common),
    /// Pretrain the acoustic backbone (plus optional GAN refinement).
    TrainBackbone(Common),
    /// Train the control module on a pretrained checkpoint.
    TrainControl(Common),
    /// Train the impression estimator.
    TrainEstimator(Common),
    /// Auto-label a manifest split with the trained estimator.
    Label {
        #[command(flatten)]
        common: Common,
        /// Split to label (train, val, eval or all).
        #[arg(long, default_value = "eval")]
        split: String,
    },
    /// Synthesize one utterance from a reference and impression deltas.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Reference utterance id from the corpus manifest.
        #[arg(long = "ref")]
        reference: Option<String>,
        /// Comma-separated token ids; a seeded sentence when omitted.
        #[arg(long)]
        tokens: Option<String>,
        /// Sparse impression deltas, e.g. "I=+3,E=-1.5".
        #[arg(long)]
        deltas: Option<String>,
        /// Output mel path (.f32 plus JSON sidecar).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Single-dimension modulation sweep.
    Sweep1d {
        #[command(flatten)]
        common: Common,
        /// Dimension letter A..K.
        #[arg(long)]
        dim: String,
        /// Reference speaker id (auto-picked from the eval split if absent).
        #[arg(long = "ref")]
        reference: Option<String>,
    },
    /// Two-dimension joint modulation sweep.
    Sweep2d {
        #[command(flatten)]
        common: Common,
        /// Two dimension letters, e.g. "EH".
        #[arg(long, default_value = "EH")]
        dims: String,
        #[arg(long = "ref")]
        reference: Option<String>,
    },
    /// Speaker-similarity evaluation against recorded baselines.
    Simeval(Common),
    /// Map a free-form impression description to a vector via the LLM.
    MapImpression {
        #[command(flatten)]
        common: Common,
        /// Target impression description.
        #[arg(long)]
        target: String,
        /// Current scores: an utterance id or "neutral".
        #[arg(long, default_value = "neutral")]
        current: String,
        /// Force the offline stub client (no network).
        #[arg(long)]
        offline: bool,
    },
    /// Correlation matrix across impression vectors.
    Correlations {
        #[command(flatten)]
        common: Common,
        /// Labels CSV (utt_id,A..K); manifest labels when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Manifest split when reading labels from the corpus.
        #[arg(long, default_value = "train")]
        split: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

type DynError = Box<dyn std::error::Error>;

fn run(command: Command) -> Result<(), DynError> {
    match command {
        Command::GenCorpus(common) => {
            let cfg = load(&common)?;
            let manifest = build_corpus(&cfg.corpus.params(cfg.seed), &cfg.corpus.dir)?;
            eprintln!(
                "gen-corpus: {} utterances over {} speakers -> {}",
                manifest.records.len(),
                cfg.corpus.n_speakers,
                cfg.corpus.dir.display()
            );
            Ok(())
        }
        Command::TrainBackbone(common) => {
            let cfg = load(&common)?;
            let manifest = load_manifest(&cfg.corpus.dir)?;
            let mut model = TtsModel::new(
                cfg.model.model_config(cfg.corpus.vocab_size, cfg.seed),
            );
            let pretrain = TrainingStagePlan {
                steps: cfg.train.pretrain_steps,
                batch_size: cfg.train.batch_size,
                schedule: LrSchedule::Noam {
                    d_model: cfg.model.d_model,
                    warmup: cfg.train.noam_warmup,
                    factor: cfg.train.noam_factor,
                },
                ..TrainingStagePlan::toy(Stage::Pretrain, cfg.seed)
            };
            let metrics = train_stage(&mut model, &pretrain, &manifest)?;
            write_metrics_csv(&cfg.train.metrics_dir.join("pretrain.csv"), &metrics)?;
            if cfg.train.gan_steps > 0 {
                let gan = TrainingStagePlan {
                    steps: cfg.train.gan_steps,
                    batch_size: cfg.train.batch_size,
                    gan_weight: cfg.train.gan_weight,
                    ..TrainingStagePlan::toy(Stage::GanRefine, cfg.seed)
                };
                let metrics = train_stage(&mut model, &gan, &manifest)?;
                write_metrics_csv(&cfg.train.metrics_dir.join("gan_refine.csv"), &metrics)?;
            }
            model.save(&cfg.train.checkpoint)?;
            eprintln!(
                "train-backbone: {} steps -> {}",
                cfg.train.pretrain_steps,
                cfg.train.checkpoint.display()
            );
            Ok(())
        }
        Command::TrainControl(common) => {
            let cfg = load(&common)?;
            let manifest = load_manifest(&cfg.corpus.dir)?;
            if !cfg.train.checkpoint.exists() {
                return Err(format!(
                    "StageOrderViolation: no backbone checkpoint at {}; run train-backbone first",
                    cfg.train.checkpoint.display()
                )
                .into());
            }
            let mut model = TtsModel::load(&cfg.train.checkpoint)?;
            let plan = TrainingStagePlan {
                steps: cfg.train.control_steps,
                batch_size: cfg.train.batch_size,
                schedule: LrSchedule::Fixed(cfg.train.control_lr),
                ..TrainingStagePlan::toy(Stage::Control, cfg.seed)
            };
            let metrics = train_stage(&mut model, &plan, &manifest)?;
            write_metrics_csv(&cfg.train.metrics_dir.join("control.csv"), &metrics)?;
            model.save(&cfg.train.checkpoint)?;
            eprintln!(
                "train-control: {} steps -> {}",
                cfg.train.control_steps,
                cfg.train.checkpoint.display()
            );
            Ok(())
        }
        Command::TrainEstimator(common) => {
            let cfg = load(&common)?;
            let manifest = load_manifest(&cfg.corpus.dir)?;
            let (model, report) = train_estimator(
                &manifest,
                cfg.estimator.estimator_config(&cfg.model, cfg.seed),
            )?;
            model.save(&cfg.estimator.checkpoint)?;
            impress_core::estimator::write_report_csv(&cfg.estimator.report, &report)?;
            eprintln!(
                "train-estimator: best epoch {} (val mse {:.6}), holdout rmse {:.6} -> {}",
                report.best_epoch,
                report.best_val_mse,
                report.holdout_rmse,
                cfg.estimator.checkpoint.display()
            );
            Ok(())
        }
        Command::Label { common, split } => {
            let cfg = load(&common)?;
            let manifest = load_manifest(&cfg.corpus.dir)?;
            let model = EstimatorModel::load(&cfg.estimator.checkpoint)?;
            let records: Vec<&ManifestRecord> = if split == "all" {
                manifest.records.iter().collect()
            } else {
                manifest.split(&split)
            };
            let labeled = auto_label(&model, &manifest, &records)?;
            let out = cfg.eval.out_dir.join(format!("labels_{split}.csv"));
            std::fs::create_dir_all(&cfg.eval.out_dir)?;
            let file = std::fs::File::create(&out)?;
            impress_core::impression::write_csv(std::io::BufWriter::new(file), &labeled)?;
            eprintln!("label: {} rows -> {}", labeled.len(), out.display());
            Ok(())
        }
        Command::Synth { common, reference, tokens, deltas, out } => {
            let cfg = load(&common)?;
            let manifest = load_manifest(&cfg.corpus.dir)?;
            let model = TtsModel::load(&cfg.train.checkpoint)?;
            let rec = match reference {
                Some(id) => manifest
                    .records
                    .iter()
                    .find(|r| r.utt_id == id)
                    .ok_or_else(|| format!("NotFound: utterance {id} is not in the manifest"))?,
                None => pick_references(&manifest)
                    .into_iter()
                    .next()
                    .ok_or("NotFound: eval split is empty")?,
            };
            let token_ids: Vec<usize> = match tokens {
                Some(t) => t
                    .split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| format!("BadTokens: {e}"))?,
                None => sentence_set(
                    1,
                    manifest.stats.vocab_size,
                    cfg.corpus.tokens_min,
                    cfg.corpus.tokens_max,
                    cfg.eval.sentence_seed,
                )
                .remove(0),
            };
            let base_v = rec.label_vector();
            let v = base_v.modulate(&parse_deltas(deltas.as_deref())?)?;
            let ref_mel = manifest.load_mel(rec)?;
            let stack = model.extract(&ref_mel);
            let mel = model.synthesize(&token_ids, &stack, &v)?;
            let out_path = out.unwrap_or_else(|| {
                cfg.eval.out_dir.join(format!("synth_{}.f32", rec.utt_id))
            });
            mel.save(&out_path)?;
            eprintln!(
                "synth: ref {} tokens {:?} -> {} ({} frames)",
                rec.utt_id,
                token_ids,
                out_path.display(),
                mel.frames()
            );
            Ok(())
        }
        Command::Sweep1d { common, dim, reference } => {
            let cfg = load(&common)?;
            let dim = parse_dim(&dim)?;
            let (manifest, model, estimator) = load_eval_stack(&cfg)?;
            let rec = resolve_reference(&manifest, reference.as_deref())?;
            let sentences = sentence_set(
                cfg.eval.n_utts,
                manifest.stats.vocab_size,
                cfg.corpus.tokens_min,
                cfg.corpus.tokens_max,
                cfg.eval.sentence_seed,
            );
            let ref_mel = manifest.load_mel(rec)?;
            let result = sweep_single(
                &model,
                &estimator,
                &ref_mel,
                &rec.label_vector(),
                dim,
                &cfg.eval.deltas,
                &sentences,
            )?;
            let files = emit_sweep(&result, &cfg.eval.out_dir)?;
            eprintln!(
                "sweep1d: dim {} ref {} spearman {:.3} -> {}",
                dim,
                rec.speaker_id,
                result.spearman(),
                files[0].display()
            );
            Ok(())
        }
        Command::Sweep2d { common, dims, reference } => {
            let cfg = load(&common)?;
            let chars: Vec<char> = dims.chars().collect();
            if chars.len() != 2 {
                return Err("BadDims: expected two dimension letters like EH".into());
            }
            let d1 = parse_dim(&chars[0].to_string())?;
            let d2 = parse_dim(&chars[1].to_string())?;
            let (manifest, model, estimator) = load_eval_stack(&cfg)?;
            let rec = resolve_reference(&manifest, reference.as_deref())?;
            let sentences = sentence_set(
                cfg.eval.n_utts,
                manifest.stats.vocab_size,
                cfg.corpus.tokens_min,
                cfg.corpus.tokens_max,
                cfg.eval.sentence_seed,
            );
            let ref_mel = manifest.load_mel(rec)?;
            let result = sweep_pair(
                &model,
                &estimator,
                &ref_mel,
                &rec.label_vector(),
                (d1, d2),
                &cfg.eval.deltas,
                &sentences,
            )?;
            let files = emit_pair(&result, &cfg.eval.out_dir)?;
            eprintln!("sweep2d: dims {d1}{d2} ref {} -> {}", rec.speaker_id, files[0].display());
            Ok(())
        }
        Command::Simeval(common) => {
            let cfg = load(&common)?;
            let manifest = load_manifest(&cfg.corpus.dir)?;
            let model = TtsModel::load(&cfg.train.checkpoint)?;
            let embedder =
                train_embedder(&manifest, cfg.embedder.embedder_config(&cfg.model, cfg.seed))?;
            let sentences = sentence_set(
                cfg.eval.similarity_sentences,
                manifest.stats.vocab_size,
                cfg.corpus.tokens_min,
                cfg.corpus.tokens_max,
                cfg.eval.sentence_seed,
            );
            for rec in pick_references(&manifest) {
                let report = speaker_similarity(
                    &model,
                    &embedder,
                    &manifest,
                    rec,
                    &cfg.eval.similarity_levels,
                    &ImpressionDim::ALL,
                    &sentences,
                    cfg.seed,
                )?;
                let files = emit_similarity(&report, &cfg.eval.out_dir)?;
                eprintln!("simeval: speaker {} -> {}", rec.speaker_id, files[0].display());
            }
            Ok(())
        }
        Command::MapImpression { common, target, current, offline } => {
            let cfg = load(&common)?;
            let current_v = if current == "neutral" {
                ImpressionVector::neutral()
            } else {
                let manifest = load_manifest(&cfg.corpus.dir)?;
                manifest
                    .records
                    .iter()
                    .find(|r| r.utt_id == current)
                    .ok_or_else(|| format!("NotFound: utterance {current}"))?
                    .label_vector()
            };
            let client_cfg = cfg.llm.client_config();
            let tpl = PromptTemplate::default();
            let (v, trace) = if offline || cfg.llm.offline {
                // Offline stub echoes the current scores.
                let stub = StubClient::fixed_vector(&current_v);
                map_impression(&stub, &tpl, &current_v, &target, &client_cfg)?
            } else {
                map_impression(&HttpChatClient, &tpl, &current_v, &target, &client_cfg)?
            };
            println!("{}", impress_core::impression::to_json("mapped", &v));
            eprintln!(
                "map-impression: {} attempts, {} dims clamped",
                trace.attempts_count(),
                trace.clamped.len()
            );
            Ok(())
        }
        Command::Correlations { common, input, split } => {
            let cfg = load(&common)?;
            let vectors: Vec<ImpressionVector> = match input {
                Some(path) => {
                    let file = std::fs::File::open(&path)
                        .map_err(|e| format!("ConfigIo: {e} ({})", path.display()))?;
                    impress_core::impression::read_csv(std::io::BufReader::new(file))?
                        .into_iter()
                        .map(|(_, v)| v)
                        .collect()
                }
                None => {
                    let manifest = load_manifest(&cfg.corpus.dir)?;
                    manifest.split(&split).iter().map(|r| r.label_vector()).collect()
                }
            };
            let cm = impress_core::impression::correlation_matrix(&vectors)?;
            std::fs::create_dir_all(&cfg.eval.out_dir)?;
            let out = cfg.eval.out_dir.join("correlations.csv");
            let mut text = String::from("dim,A,B,C,D,E,F,G,H,I,J,K\n");
            for (i, dim) in ImpressionDim::ALL.iter().enumerate() {
                text.push_str(&dim.letter().to_string());
                for j in 0..11 {
                    text.push_str(&format!(",{:.6}", cm.values[i][j]));
                }
                text.push('\n');
            }
            std::fs::write(&out, text)?;
            eprintln!("correlations: {} vectors -> {}", cm.n_samples, out.display());
            Ok(())
        }
    }
}

fn load(common: &Common) -> Result<RunConfig, DynError> {
    Ok(load_config(common.config.as_deref(), common.seed)?)
}

fn parse_dim(s: &str) -> Result<ImpressionDim, DynError> {
    let c = s.trim().chars().next().ok_or("BadDim: empty dimension")?;
    ImpressionDim::from_letter(c)
        .ok_or_else(|| format!("BadDim: {s} is not a dimension letter A..K").into())
}

fn parse_deltas(spec: Option<&str>) -> Result<Vec<(ImpressionDim, f64)>, DynError> {
    let Some(spec) = spec else { return Ok(Vec::new()) };
    spec.split(',')
        .filter(|part| !part.trim().is_empty())
        .map(|part| {
            let (dim, value) = part
                .split_once('=')
                .ok_or_else(|| format!("BadDeltas: {part} is not dim=value"))?;
            Ok((
                parse_dim(dim)?,
                value.trim().parse::<f64>().map_err(|e| format!("BadDeltas: {e}"))?,
            ))
        })
        .collect()
}

fn load_eval_stack(cfg: &RunConfig) -> Result<(Manifest, TtsModel, EstimatorModel), DynError> {
    let manifest = load_manifest(&cfg.corpus.dir)?;
    let model = TtsModel::load(&cfg.train.checkpoint)?;
    let estimator = EstimatorModel::load(&cfg.estimator.checkpoint)?;
    Ok((manifest, model, estimator))
}

/// Reference record by speaker id, or the first auto-picked one.
fn resolve_reference<'a>(
    manifest: &'a Manifest,
    speaker: Option<&str>,
) -> Result<&'a ManifestRecord, DynError> {
    match speaker {
        Some(spk) => manifest
            .records
            .iter()
            .filter(|r| r.speaker_id == spk)
            .min_by(|a, b| a.utt_id.cmp(&b.utt_id))
            .ok_or_else(|| format!("NotFound: speaker {spk} is not in the manifest").into()),
        None => pick_references(manifest)
            .into_iter()
            .next()
            .ok_or_else(|| "NotFound: eval split is empty".into()),
    }
}



