//! End-to-end CLI contract tests: exit codes, determinism, and wiring.
//! Everything runs the real binary on miniature configs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_impress")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn impress")
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("c.toml");
    let text = format!(
        r#"seed = 0

[corpus]
dir = "{dir}/corpus"
n_speakers = 10
utts_per_speaker = 4
tokens_min = 4
tokens_max = 6

[model]
frontend_dim = 16
lstm_hidden = 12
attn_hidden = 8
latent_dim = 24
stl_tokens = 4
stl_heads = 2
d_model = 16
heads = 2
ffn_dim = 32
enc_blocks = 1
dec_blocks = 1
ling_dim = 8
proj_dim = 8
adversary_hidden = 16

[train]
checkpoint = "{dir}/model.ckpt"
metrics_dir = "{dir}/metrics"
pretrain_steps = 30
control_steps = 10
batch_size = 2

[estimator]
checkpoint = "{dir}/estimator.ckpt"
report = "{dir}/estimator_report.csv"
epochs = 2
lstm_hidden = 8
attn_hidden = 6

[embedder]
epochs = 1
lstm_hidden = 8
attn_hidden = 6
latent_dim = 16

[eval]
out_dir = "{dir}/eval"
n_utts = 2
similarity_sentences = 1
{extra}"#,
        dir = dir.display(),
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("impress-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn help_exits_zero_and_lists_every_subcommand() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in [
        "gen-corpus",
        "train-backbone",
        "train-control",
        "train-estimator",
        "label",
        "synth",
        "sweep1d",
        "sweep2d",
        "simeval",
        "map-impression",
        "correlations",
    ] {
        assert!(text.contains(sub), "--help must list {sub}");
    }
}

#[test]
fn unknown_subcommand_and_flag_exit_two() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["gen-corpus", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_corpus_is_deterministic_across_runs() {
    let dir = temp_dir("det");
    let config = write_config(&dir, "");
    let out = run(&["gen-corpus", "--config", config.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest1 = std::fs::read(dir.join("corpus/manifest.jsonl")).unwrap();
    std::fs::remove_dir_all(dir.join("corpus")).unwrap();
    let out = run(&["gen-corpus", "--config", config.to_str().unwrap()]);
    assert!(out.status.success());
    let manifest2 = std::fs::read(dir.join("corpus/manifest.jsonl")).unwrap();
    assert_eq!(manifest1, manifest2, "same seed must give byte-identical manifests");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn train_control_without_backbone_checkpoint_fails_with_stage_order() {
    let dir = temp_dir("order");
    let config = write_config(&dir, "");
    let out = run(&["gen-corpus", "--config", config.to_str().unwrap()]);
    assert!(out.status.success());
    let out = run(&["train-control", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("StageOrderViolation"),
        "stderr must name the violation: {stderr}"
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn full_pipeline_wiring_produces_expected_files() {
    let dir = temp_dir("wiring");
    let config = write_config(&dir, "");
    let c = config.to_str().unwrap();
    for args in [
        vec!["gen-corpus", "--config", c],
        vec!["train-backbone", "--config", c],
        vec!["train-control", "--config", c],
        vec!["train-estimator", "--config", c],
        vec!["label", "--config", c, "--split", "eval"],
        vec!["sweep1d", "--config", c, "--dim", "I"],
        vec!["sweep2d", "--config", c, "--dims", "EH"],
        vec!["synth", "--config", c],
        vec!["correlations", "--config", c],
        vec![
            "map-impression",
            "--config",
            c,
            "--target",
            "sleepy",
            "--offline",
        ],
    ] {
        let out = run(&args);
        assert!(
            out.status.success(),
            "{:?} failed: {}",
            args,
            String::from_utf8_lossy(&out.stderr)
        );
    }
    for file in [
        "corpus/manifest.jsonl",
        "corpus/stats.json",
        "model.ckpt",
        "estimator.ckpt",
        "metrics/pretrain.csv",
        "metrics/control.csv",
        "eval/labels_eval.csv",
        "eval/sweep_I.csv",
        "eval/sweep_I.png",
        "eval/sweep_pair_EH.csv",
        "eval/sweep_pair_EH_E.png",
        "eval/correlations.csv",
    ] {
        assert!(dir.join(file).exists(), "missing {file}");
    }
    // Labeled CSV follows the impression schema.
    let labels = std::fs::read_to_string(dir.join("eval/labels_eval.csv")).unwrap();
    assert!(labels.starts_with("utt_id,A,B,C,D,E,F,G,H,I,J,K\n"));

    // sweep CSVs are byte-identical across reruns (idempotence).
    let sweep1 = std::fs::read(dir.join("eval/sweep_I.csv")).unwrap();
    let out = run(&["sweep1d", "--config", c, "--dim", "I"]);
    assert!(out.status.success());
    assert_eq!(sweep1, std::fs::read(dir.join("eval/sweep_I.csv")).unwrap());

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn offline_map_impression_emits_vector_json_without_network() {
    let dir = temp_dir("map");
    let config = write_config(&dir, "");
    let out = run(&[
        "map-impression",
        "--config",
        config.to_str().unwrap(),
        "--target",
        "urgent, attention-grabbing",
        "--offline",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let (_, v) = impress_core::impression::from_json(stdout.trim()).unwrap();
    // Offline stub echoes the neutral current vector.
    assert_eq!(v.as_array(), impress_core::impression::ImpressionVector::neutral().as_array());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn map_impression_with_empty_target_exits_one() {
    let dir = temp_dir("empty-target");
    let config = write_config(&dir, "");
    let out = run(&[
        "map-impression",
        "--config",
        config.to_str().unwrap(),
        "--target",
        "  ",
        "--offline",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("EmptyTarget"));
    std::fs::remove_dir_all(&dir).ok();
}
