// quick timing breakdown via an integration-test-style binary
use std::time::Instant;
use impress_core::backbone::{TtsModel, TtsModelConfig, VarianceTargets};
use impress_core::corpus::{build_corpus, CorpusParams};
use impress_core::tensor::Tape;

fn main() {
    let dir = std::env::temp_dir().join("impress-prof");
    let manifest = build_corpus(
        &CorpusParams { n_speakers: 6, utts_per_speaker: 4, tokens_min: 10, tokens_max: 16, ..CorpusParams::default() },
        &dir,
    ).unwrap();
    let model = TtsModel::new(TtsModelConfig::default());
    let recs = manifest.split("train");
    let rec = recs[0];
    let mel = manifest.load_mel(rec).unwrap();
    println!("frames: {}", mel.frames());
    let targets = VarianceTargets { durations: rec.durations.clone(), pitch: rec.pitch.clone(), energy: rec.energy.clone() };

    // stub extract
    let t = Instant::now();
    for _ in 0..50 { let _ = model.extract(&mel); }
    println!("extract: {:.2} ms", t.elapsed().as_secs_f64() * 1000.0 / 50.0);

    let stack = model.extract(&mel);

    // encoder forward only
    let t = Instant::now();
    for _ in 0..50 {
        let tape = Tape::new();
        let _ = model.encoder.encode_on_tape(&tape, &model.store, &stack);
    }
    println!("encoder fwd: {:.2} ms", t.elapsed().as_secs_f64() * 1000.0 / 50.0);

    // encoder fwd+bwd
    let t = Instant::now();
    for _ in 0..50 {
        let tape = Tape::new();
        let d = model.encoder.encode_on_tape(&tape, &model.store, &stack);
        let loss = tape.sum_sq(d.latent);
        let _ = tape.backward(loss);
    }
    println!("encoder fwd+bwd: {:.2} ms", t.elapsed().as_secs_f64() * 1000.0 / 50.0);

    // full training-style forward+backward
    let t = Instant::now();
    for _ in 0..50 {
        let tape = Tape::new();
        let d = model.encoder.encode_on_tape(&tape, &model.store, &stack);
        let (e, _) = model.stl.transform_on_tape(&tape, &model.store, d.latent);
        let pred = model.backbone.forward_teacher(&tape, &model.store, &rec.tokens, e, &targets);
        let melt = tape.constant(mel.to_tensor());
        let loss = tape.l1(pred.mel, melt);
        let mut grads = tape.backward(loss);
        let _ = tape.param_grads(&mut grads);
    }
    println!("full fwd+bwd: {:.2} ms", t.elapsed().as_secs_f64() * 1000.0 / 50.0);

    // backbone only (constant e)
    let t = Instant::now();
    for _ in 0..50 {
        let tape = Tape::new();
        let e = tape.constant(impress_core::tensor::Tensor::zeros(&[1, 384]));
        let pred = model.backbone.forward_teacher(&tape, &model.store, &rec.tokens, e, &targets);
        let melt = tape.constant(mel.to_tensor());
        let loss = tape.l1(pred.mel, melt);
        let _ = tape.backward(loss);
    }
    println!("backbone fwd+bwd: {:.2} ms", t.elapsed().as_secs_f64() * 1000.0 / 50.0);
    std::fs::remove_dir_all(&dir).ok();
}
