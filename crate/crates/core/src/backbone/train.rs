//! Stage-based training: backbone pretraining, optional LSGAN refinement,
//! and control-module training with everything else frozen.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use super::{
    lsgan_d_loss, lsgan_g_loss, AcousticPrediction, BackboneError, TtsModel, NS_BACKBONE,
    NS_CONTROL, NS_DISC, NS_ENCODER, NS_STL,
};
use crate::control::{control_loss, grl_apply, Mode};
use crate::corpus::{Manifest, ManifestRecord};
use crate::tensor::{Adam, GradAccum, LrSchedule, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    GanRefine,
    Control,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::GanRefine => "gan_refine",
            Stage::Control => "control",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainingStagePlan {
    pub stage: Stage,
    pub steps: u64,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub trainable_namespaces: Vec<String>,
    pub seed: u64,
    /// Weight of the adversarial LSGAN term in the generator loss.
    pub gan_weight: f32,
}

impl TrainingStagePlan {
    /// Desk-scale presets: 2k pretrain / 0 GAN / 1k control.
    pub fn toy(stage: Stage, seed: u64) -> Self {
        match stage {
            Stage::Pretrain => TrainingStagePlan {
                stage,
                steps: 2000,
                batch_size: 8,
                schedule: LrSchedule::Noam { d_model: 128, warmup: 400, factor: 0.5 },
                trainable_namespaces: vec![
                    NS_ENCODER.into(),
                    NS_STL.into(),
                    NS_BACKBONE.into(),
                ],
                seed,
                gan_weight: 0.0,
            },
            Stage::GanRefine => TrainingStagePlan {
                stage,
                steps: 0,
                batch_size: 8,
                schedule: LrSchedule::Fixed(1e-3),
                trainable_namespaces: vec![
                    NS_ENCODER.into(),
                    NS_STL.into(),
                    NS_BACKBONE.into(),
                    NS_DISC.into(),
                ],
                seed,
                gan_weight: 0.1,
            },
            Stage::Control => TrainingStagePlan {
                stage,
                steps: 1000,
                batch_size: 8,
                schedule: LrSchedule::Fixed(1e-3),
                trainable_namespaces: vec![NS_CONTROL.into()],
                seed,
                gan_weight: 0.0,
            },
        }
    }

    /// Step counts used at full scale (documented preset; far beyond desk
    /// runtime): 200k pretrain, 200k GAN refinement, 50k control.
    pub fn paper_scale(stage: Stage, seed: u64) -> Self {
        let mut plan = Self::toy(stage, seed);
        plan.steps = match stage {
            Stage::Pretrain => 200_000,
            Stage::GanRefine => 200_000,
            Stage::Control => 50_000,
        };
        plan
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub mel_l1: f64,
    pub duration: f64,
    pub pitch: f64,
    pub energy: f64,
    pub adv_mse: f64,
    pub disc: f64,
    pub total: f64,
}

pub fn write_metrics_csv(path: &Path, metrics: &[StepMetrics]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,lr,mel_l1,duration,pitch,energy,adv_mse,disc,total")?;
    for m in metrics {
        writeln!(
            w,
            "{},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8}",
            m.step, m.lr, m.mel_l1, m.duration, m.pitch, m.energy, m.adv_mse, m.disc, m.total
        )?;
    }
    w.flush()
}

struct TrainItem {
    tokens: Vec<usize>,
    mel: Tensor,
    durations: Vec<usize>,
    log_dur: Tensor,
    pitch: Tensor,
    energy: Tensor,
    pitch_f64: Vec<f64>,
    energy_f64: Vec<f64>,
    label: crate::impression::ImpressionVector,
}

fn load_items(manifest: &Manifest, records: &[&ManifestRecord]) -> Result<Vec<TrainItem>, BackboneError> {
    records
        .iter()
        .map(|rec| {
            let mel = manifest.load_mel(rec)?.to_tensor();
            let n = rec.tokens.len();
            Ok(TrainItem {
                tokens: rec.tokens.clone(),
                mel,
                durations: rec.durations.clone(),
                log_dur: Tensor::from_vec(
                    &[n, 1],
                    rec.durations.iter().map(|d| (*d as f32).ln()).collect(),
                ),
                pitch: Tensor::from_vec(&[n, 1], rec.pitch.iter().map(|p| *p as f32).collect()),
                energy: Tensor::from_vec(&[n, 1], rec.energy.iter().map(|e| *e as f32).collect()),
                pitch_f64: rec.pitch.clone(),
                energy_f64: rec.energy.clone(),
                label: rec.label_vector(),
            })
        })
        .collect()
}

struct ReconLoss {
    total: Var,
    mel_l1: f64,
    duration: f64,
    pitch: f64,
    energy: f64,
}

fn recon_loss_on_tape(tape: &Tape, pred: &AcousticPrediction, item: &TrainItem) -> ReconLoss {
    let mel_t = tape.constant(item.mel.clone());
    let l1 = tape.l1(pred.mel, mel_t);
    let dur_t = tape.constant(item.log_dur.clone());
    let dur = tape.mse(pred.log_dur, dur_t);
    let pitch_t = tape.constant(item.pitch.clone());
    let pitch = tape.mse(pred.pitch, pitch_t);
    let energy_t = tape.constant(item.energy.clone());
    let energy = tape.mse(pred.energy, energy_t);
    let total = tape.add(tape.add(l1, dur), tape.add(pitch, energy));
    ReconLoss {
        total,
        mel_l1: tape.value(l1).item() as f64,
        duration: tape.value(dur).item() as f64,
        pitch: tape.value(pitch).item() as f64,
        energy: tape.value(energy).item() as f64,
    }
}

/// Run one training stage. Only parameters inside
/// `plan.trainable_namespaces` change; everything else stays bit-identical.
pub fn train_stage(
    model: &mut TtsModel,
    plan: &TrainingStagePlan,
    manifest: &Manifest,
) -> Result<Vec<StepMetrics>, BackboneError> {
    match plan.stage {
        Stage::Pretrain => {}
        Stage::GanRefine | Stage::Control => {
            if !model.stage_done("pretrain") {
                return Err(BackboneError::StageOrderViolation(format!(
                    "stage {} requires a completed pretrain checkpoint",
                    plan.stage.name()
                )));
            }
        }
    }
    let records = manifest.split("train");
    if records.is_empty() {
        return Err(BackboneError::ShapeError("train split is empty".into()));
    }
    let items = load_items(manifest, &records)?;

    // Stacks are cheap to recompute; the encoder output x is only cacheable
    // in the control stage where the encoder is frozen.
    let cached_x: Vec<Option<Vec<f32>>> = if plan.stage == Stage::Control {
        records
            .iter()
            .enumerate()
            .map(|(i, rec)| {
                let _ = rec;
                let mel = crate::corpus::MelSpectrogram::from_vec(
                    items[i].mel.rows(),
                    items[i].mel.data().to_vec(),
                );
                let stack = model.extract(&mel);
                Some(model.encoder.encode(&model.store, &stack).0)
            })
            .collect()
    } else {
        vec![None; items.len()]
    };

    let mut opt = Adam::new(&model.store);
    let mut disc_opt = Adam::new(&model.store);
    let trainable_gen: Vec<String> = plan
        .trainable_namespaces
        .iter()
        .filter(|ns| ns.as_str() != NS_DISC)
        .cloned()
        .collect();
    let gen_filter = move |name: &str| trainable_gen.iter().any(|ns| name.starts_with(ns));
    let disc_filter = |name: &str| name.starts_with(NS_DISC);

    let mut metrics = Vec::with_capacity(plan.steps as usize);
    let stage_tag = match plan.stage {
        Stage::Pretrain => 1u64,
        Stage::GanRefine => 2,
        Stage::Control => 3,
    };

    for step in 0..plan.steps {
        let mut rng =
            crate::corpus::new_rng(crate::corpus::seed_chain(&[plan.seed, stage_tag, step]));
        let lr = plan.schedule.lr(step + 1);
        let mut accum = GradAccum::new(&model.store);
        let mut disc_accum = GradAccum::new(&model.store);
        let (mut l1s, mut durs, mut pits, mut ens, mut advs, mut discs) =
            (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);

        for _ in 0..plan.batch_size {
            let idx = rng.random_range(0..items.len());
            let item = &items[idx];
            let tape = Tape::new();

            let spk_embedding = match plan.stage {
                Stage::Control => {
                    let x = tape.constant(Tensor::from_vec(
                        &[1, model.control.latent_dim],
                        cached_x[idx].clone().expect("cached x"),
                    ));
                    let cond = model.control.condition_on_tape(
                        &tape,
                        &model.store,
                        x,
                        &item.label,
                        Mode::Train,
                        &mut rng,
                    );
                    // Adversary reads p_x through the reversal.
                    let routed = grl_apply(&tape, cond.p_x, model.control.cfg.grl_lambda);
                    let adv_pred = model.control.adversary_on_tape(&tape, &model.store, routed);
                    let adv_target =
                        tape.constant(Tensor::from_vec(&[1, 11], item.label.to_f32().to_vec()));
                    let adv_mse = tape.mse(adv_pred, adv_target);
                    advs += tape.value(adv_mse).item() as f64;

                    let (e, _) = model.stl.transform_on_tape(&tape, &model.store, cond.h);
                    let pred = model.backbone.forward_teacher(
                        &tape,
                        &model.store,
                        &item.tokens,
                        e,
                        &super::VarianceTargets {
                            durations: item.durations.clone(),
                            pitch: item.pitch_f64.clone(),
                            energy: item.energy_f64.clone(),
                        },
                    );
                    let recon = recon_loss_on_tape(&tape, &pred, item);
                    l1s += recon.mel_l1;
                    durs += recon.duration;
                    pits += recon.pitch;
                    ens += recon.energy;
                    let total = control_loss(&tape, recon.total, adv_mse, &model.control.cfg);
                    let mut grads = tape.backward(total);
                    accum.add(tape.param_grads(&mut grads));
                    continue;
                }
                Stage::Pretrain | Stage::GanRefine => {
                    let mel = crate::corpus::MelSpectrogram::from_vec(
                        item.mel.rows(),
                        item.mel.data().to_vec(),
                    );
                    let stack = model.extract(&mel);
                    let details = model.encoder.encode_on_tape(&tape, &model.store, &stack);
                    let (e, _) = model.stl.transform_on_tape(&tape, &model.store, details.latent);
                    e
                }
            };

            let pred = model.backbone.forward_teacher(
                &tape,
                &model.store,
                &item.tokens,
                spk_embedding,
                &super::VarianceTargets {
                    durations: item.durations.clone(),
                    pitch: item.pitch_f64.clone(),
                    energy: item.energy_f64.clone(),
                },
            );
            let recon = recon_loss_on_tape(&tape, &pred, item);
            l1s += recon.mel_l1;
            durs += recon.duration;
            pits += recon.pitch;
            ens += recon.energy;

            let loss = if plan.stage == Stage::GanRefine && item.mel.rows() >= 5 {
                // Generator side of the LSGAN objective.
                let fake_score = model.disc.score(&tape, &model.store, pred.mel);
                let one = tape.constant(Tensor::from_vec(&[1, 1], vec![1.0]));
                let g_term = tape.mse(fake_score, one);
                let scaled = tape.scale(g_term, plan.gan_weight);

                // Discriminator update on a fresh tape with detached fake.
                let dtape = Tape::new();
                let real = dtape.constant(item.mel.clone());
                let fake = dtape.constant((*tape.value(pred.mel)).clone());
                let rs = model.disc.score(&dtape, &model.store, real);
                let fs = model.disc.score(&dtape, &model.store, fake);
                let one_d = dtape.constant(Tensor::from_vec(&[1, 1], vec![1.0]));
                let zero_d = dtape.constant(Tensor::from_vec(&[1, 1], vec![0.0]));
                let d_loss = dtape.scale(
                    dtape.add(dtape.mse(rs, one_d), dtape.mse(fs, zero_d)),
                    0.5,
                );
                discs +=
                    lsgan_d_loss(dtape.value(rs).item() as f64, dtape.value(fs).item() as f64);
                let mut d_grads = dtape.backward(d_loss);
                disc_accum.add(dtape.param_grads(&mut d_grads));

                advs += lsgan_g_loss(tape.value(fake_score).item() as f64);
                tape.add(recon.total, scaled)
            } else {
                recon.total
            };

            let mut grads = tape.backward(loss);
            accum.add(tape.param_grads(&mut grads));
        }

        let scale = 1.0 / plan.batch_size as f32;
        accum.scale(scale);
        let grads = accum.take();
        opt.step(&mut model.store, &grads, lr, &gen_filter);
        if plan.stage == Stage::GanRefine {
            disc_accum.scale(scale);
            let d_grads = disc_accum.take();
            disc_opt.step(&mut model.store, &d_grads, lr, &disc_filter);
        }

        let b = plan.batch_size as f64;
        let (mel_l1, duration, pitch, energy, adv_mse, disc) =
            (l1s / b, durs / b, pits / b, ens / b, advs / b, discs / b);
        let total = mel_l1
            + duration
            + pitch
            + energy
            + match plan.stage {
                Stage::Control => model.control.cfg.lambda_adv as f64 * adv_mse,
                Stage::GanRefine => plan.gan_weight as f64 * adv_mse,
                Stage::Pretrain => 0.0,
            };
        metrics.push(StepMetrics {
            step,
            lr: lr as f64,
            mel_l1,
            duration,
            pitch,
            energy,
            adv_mse,
            disc,
            total,
        });
    }

    let name = plan.stage.name().to_string();
    if !model.meta.completed_stages.contains(&name) {
        model.meta.completed_stages.push(name.clone());
    }
    model.meta.steps_done.push((name, plan.steps));
    Ok(metrics)
}

/// One explicit LSGAN update pair (one discriminator step, one generator
/// step) on a single batch; exposed for the refinement stage contract.
pub fn gan_refine_step(
    model: &mut TtsModel,
    manifest: &Manifest,
    seed: u64,
) -> Result<StepMetrics, BackboneError> {
    let plan = TrainingStagePlan {
        steps: 1,
        ..TrainingStagePlan::toy(Stage::GanRefine, seed)
    };
    let metrics = train_stage(model, &plan, manifest)?;
    Ok(metrics[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{EncoderCfgSerde, TtsModelConfig};
    use crate::corpus::{build_corpus, CorpusParams};

    fn tiny_model() -> TtsModel {
        TtsModel::new(TtsModelConfig {
            frontend_seed: 0,
            init_seed: 7,
            encoder: EncoderCfgSerde {
                frontend_layers: 4,
                frontend_dim: 16,
                lstm_hidden: 12,
                attn_hidden: 8,
                latent_dim: 24,
                stl_tokens: 4,
                stl_heads: 2,
            },
            backbone: crate::backbone::BackboneConfig {
                vocab_size: 64,
                ling_dim: 8,
                d_model: 16,
                heads: 2,
                ffn_dim: 32,
                enc_blocks: 1,
                dec_blocks: 1,
            },
            control: crate::control::ControlConfig {
                proj_dim: 8,
                adversary_hidden: 16,
                ..crate::control::ControlConfig::default()
            },
        })
    }

    fn tiny_corpus(tag: &str) -> crate::corpus::Manifest {
        let dir = std::env::temp_dir().join(format!(
            "impress-train-{}-{}",
            tag,
            std::process::id()
        ));
        build_corpus(
            &CorpusParams {
                n_speakers: 6,
                utts_per_speaker: 3,
                tokens_min: 4,
                tokens_max: 7,
                ..CorpusParams::default()
            },
            &dir,
        )
        .unwrap()
    }

    #[test]
    fn control_before_pretrain_is_a_stage_order_violation() {
        let mut model = tiny_model();
        let manifest = tiny_corpus("order");
        let plan = TrainingStagePlan {
            steps: 1,
            ..TrainingStagePlan::toy(Stage::Control, 0)
        };
        let err = train_stage(&mut model, &plan, &manifest).unwrap_err();
        assert!(matches!(err, BackboneError::StageOrderViolation(_)));
        std::fs::remove_dir_all(&manifest.root).ok();
    }

    #[test]
    fn pretrain_smoke_run_decreases_loss() {
        let mut model = tiny_model();
        let manifest = tiny_corpus("smoke");
        let plan = TrainingStagePlan {
            steps: 500,
            batch_size: 2,
            ..TrainingStagePlan::toy(Stage::Pretrain, 0)
        };
        let metrics = train_stage(&mut model, &plan, &manifest).unwrap();
        assert_eq!(metrics.len(), 500);
        let first: f64 = metrics[..20].iter().map(|m| m.total).sum::<f64>() / 20.0;
        let last: f64 = metrics[480..].iter().map(|m| m.total).sum::<f64>() / 20.0;
        assert!(
            last < first,
            "training did not reduce the loss: {first} -> {last}"
        );
        assert!(model.stage_done("pretrain"));
        std::fs::remove_dir_all(&manifest.root).ok();
    }

    #[test]
    fn control_stage_freezes_everything_outside_its_namespace() {
        let mut model = tiny_model();
        let manifest = tiny_corpus("freeze");
        let pre = TrainingStagePlan {
            steps: 30,
            batch_size: 2,
            ..TrainingStagePlan::toy(Stage::Pretrain, 0)
        };
        train_stage(&mut model, &pre, &manifest).unwrap();

        let frozen_before: Vec<(String, u64)> = model
            .store
            .all_hashes()
            .into_iter()
            .filter(|(n, _)| !n.starts_with(NS_CONTROL))
            .collect();
        let control_before = model.store.namespace_hash(NS_CONTROL);

        let ctl = TrainingStagePlan {
            steps: 50,
            batch_size: 2,
            ..TrainingStagePlan::toy(Stage::Control, 0)
        };
        train_stage(&mut model, &ctl, &manifest).unwrap();

        let frozen_after: Vec<(String, u64)> = model
            .store
            .all_hashes()
            .into_iter()
            .filter(|(n, _)| !n.starts_with(NS_CONTROL))
            .collect();
        assert_eq!(frozen_before, frozen_after, "non-control parameters moved");
        assert_ne!(
            control_before,
            model.store.namespace_hash(NS_CONTROL),
            "control parameters did not move"
        );
        std::fs::remove_dir_all(&manifest.root).ok();
    }

    #[test]
    fn training_is_reproducible_under_a_fixed_seed() {
        let manifest = tiny_corpus("repro");
        let run = || {
            let mut model = tiny_model();
            let plan = TrainingStagePlan {
                steps: 20,
                batch_size: 2,
                ..TrainingStagePlan::toy(Stage::Pretrain, 3)
            };
            train_stage(&mut model, &plan, &manifest).unwrap()
        };
        let a = run();
        let b = run();
        for (ma, mb) in a.iter().zip(&b) {
            assert!(
                (ma.total - mb.total).abs() < 1e-6,
                "step {}: {} vs {}",
                ma.step,
                ma.total,
                mb.total
            );
        }
        std::fs::remove_dir_all(&manifest.root).ok();
    }

    #[test]
    fn zero_step_gan_stage_leaves_parameters_untouched() {
        let mut model = tiny_model();
        let manifest = tiny_corpus("gan0");
        let pre = TrainingStagePlan {
            steps: 10,
            batch_size: 2,
            ..TrainingStagePlan::toy(Stage::Pretrain, 0)
        };
        train_stage(&mut model, &pre, &manifest).unwrap();
        let before = model.store.namespace_hash("");
        let gan = TrainingStagePlan { steps: 0, ..TrainingStagePlan::toy(Stage::GanRefine, 0) };
        train_stage(&mut model, &gan, &manifest).unwrap();
        assert_eq!(model.store.namespace_hash(""), before);
        std::fs::remove_dir_all(&manifest.root).ok();
    }

    #[test]
    fn gan_smoke_run_separates_real_from_fake() {
        let mut model = tiny_model();
        let manifest = tiny_corpus("gansmoke");
        let pre = TrainingStagePlan {
            steps: 60,
            batch_size: 2,
            ..TrainingStagePlan::toy(Stage::Pretrain, 0)
        };
        train_stage(&mut model, &pre, &manifest).unwrap();
        let gan = TrainingStagePlan {
            steps: 200,
            batch_size: 2,
            ..TrainingStagePlan::toy(Stage::GanRefine, 0)
        };
        train_stage(&mut model, &gan, &manifest).unwrap();

        // Score all real utterances vs generated ones.
        let records = manifest.split("train");
        let items = load_items(&manifest, &records).unwrap();
        let mut real_scores = Vec::new();
        let mut fake_scores = Vec::new();
        for item in items.iter().take(6) {
            let tape = Tape::new();
            let mel = crate::corpus::MelSpectrogram::from_vec(
                item.mel.rows(),
                item.mel.data().to_vec(),
            );
            let stack = model.extract(&mel);
            let details = model.encoder.encode_on_tape(&tape, &model.store, &stack);
            let (e, _) = model.stl.transform_on_tape(&tape, &model.store, details.latent);
            let pred = model.backbone.forward_teacher(
                &tape,
                &model.store,
                &item.tokens,
                e,
                &crate::backbone::VarianceTargets {
                    durations: item.durations.clone(),
                    pitch: item.pitch_f64.clone(),
                    energy: item.energy_f64.clone(),
                },
            );
            let real = tape.constant(item.mel.clone());
            real_scores.push(tape.value(model.disc.score(&tape, &model.store, real)).item() as f64);
            fake_scores.push(tape.value(model.disc.score(&tape, &model.store, pred.mel)).item() as f64);
        }
        let rm = crate::stats::mean(&real_scores);
        let fm = crate::stats::mean(&fake_scores);
        assert!(rm > fm, "discriminator did not separate real ({rm}) from fake ({fm})");
        std::fs::remove_dir_all(&manifest.root).ok();
    }

    #[test]
    fn metrics_csv_has_stable_schema() {
        let m = StepMetrics {
            step: 0,
            lr: 1e-3,
            mel_l1: 0.5,
            duration: 0.1,
            pitch: 0.2,
            energy: 0.3,
            adv_mse: 0.0,
            disc: 0.0,
            total: 1.1,
        };
        let path = std::env::temp_dir().join(format!("impress-metrics-{}.csv", std::process::id()));
        write_metrics_csv(&path, &[m]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,lr,mel_l1,duration,pitch,energy,adv_mse,disc,total\n"));
        assert_eq!(text.lines().count(), 2);
        std::fs::remove_file(&path).ok();
    }
}
