//! Run configuration: one structured TOML file with per-command sections.
//! Flags override config values; unknown keys are rejected so a config file
//! fully pins a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use impress_core::backbone::{BackboneConfig, TtsModelConfig};
use impress_core::control::ControlConfig;
use impress_core::corpus::CorpusParams;
use impress_core::estimator::EstimatorConfig;
use impress_core::eval::EmbedderConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub estimator: EstimatorSection,
    pub embedder: EmbedderSection,
    pub eval: EvalSection,
    pub llm: LlmSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            corpus: CorpusSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            estimator: EstimatorSection::default(),
            embedder: EmbedderSection::default(),
            eval: EvalSection::default(),
            llm: LlmSection::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub dir: PathBuf,
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub split_ratios: [f64; 3],
    pub noise_sigma: f64,
    pub vocab_size: usize,
    pub tokens_min: usize,
    pub tokens_max: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let p = CorpusParams::default();
        CorpusSection {
            dir: PathBuf::from("data/corpus"),
            n_speakers: p.n_speakers,
            utts_per_speaker: p.utts_per_speaker,
            split_ratios: p.split_ratios,
            noise_sigma: p.noise_sigma,
            vocab_size: p.vocab_size,
            tokens_min: p.tokens_min,
            tokens_max: p.tokens_max,
        }
    }
}

impl CorpusSection {
    pub fn params(&self, seed: u64) -> CorpusParams {
        CorpusParams {
            n_speakers: self.n_speakers,
            utts_per_speaker: self.utts_per_speaker,
            split_ratios: self.split_ratios,
            noise_sigma: self.noise_sigma,
            vocab_size: self.vocab_size,
            tokens_min: self.tokens_min,
            tokens_max: self.tokens_max,
            seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub frontend_layers: usize,
    pub frontend_dim: usize,
    pub lstm_hidden: usize,
    pub attn_hidden: usize,
    pub latent_dim: usize,
    pub stl_tokens: usize,
    pub stl_heads: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub ling_dim: usize,
    pub dropout_rate: f32,
    pub proj_dim: usize,
    pub lambda_adv: f32,
    pub grl_lambda: f32,
    pub adversary_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let enc = impress_core::encoder::SpeakerEncoderConfig::default();
        let bb = BackboneConfig::default();
        let ctl = ControlConfig::default();
        ModelSection {
            frontend_layers: enc.frontend_layers,
            frontend_dim: enc.frontend_dim,
            lstm_hidden: enc.lstm_hidden,
            attn_hidden: enc.attn_hidden,
            latent_dim: enc.latent_dim,
            stl_tokens: enc.stl_tokens,
            stl_heads: enc.stl_heads,
            d_model: bb.d_model,
            heads: bb.heads,
            ffn_dim: bb.ffn_dim,
            enc_blocks: bb.enc_blocks,
            dec_blocks: bb.dec_blocks,
            ling_dim: bb.ling_dim,
            dropout_rate: ctl.dropout_rate,
            proj_dim: ctl.proj_dim,
            lambda_adv: ctl.lambda_adv,
            grl_lambda: ctl.grl_lambda,
            adversary_hidden: ctl.adversary_hidden,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, vocab_size: usize, seed: u64) -> TtsModelConfig {
        TtsModelConfig {
            frontend_seed: 0,
            init_seed: seed,
            encoder: impress_core::backbone::EncoderCfgSerde {
                frontend_layers: self.frontend_layers,
                frontend_dim: self.frontend_dim,
                lstm_hidden: self.lstm_hidden,
                attn_hidden: self.attn_hidden,
                latent_dim: self.latent_dim,
                stl_tokens: self.stl_tokens,
                stl_heads: self.stl_heads,
            },
            backbone: BackboneConfig {
                vocab_size,
                ling_dim: self.ling_dim,
                d_model: self.d_model,
                heads: self.heads,
                ffn_dim: self.ffn_dim,
                enc_blocks: self.enc_blocks,
                dec_blocks: self.dec_blocks,
            },
            control: ControlConfig {
                dropout_rate: self.dropout_rate,
                proj_dim: self.proj_dim,
                lambda_adv: self.lambda_adv,
                grl_lambda: self.grl_lambda,
                adversary_hidden: self.adversary_hidden,
            },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub checkpoint: PathBuf,
    pub metrics_dir: PathBuf,
    pub pretrain_steps: u64,
    pub gan_steps: u64,
    pub control_steps: u64,
    pub batch_size: usize,
    pub noam_warmup: usize,
    pub noam_factor: f32,
    pub control_lr: f32,
    pub gan_weight: f32,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            checkpoint: PathBuf::from("data/model.ckpt"),
            metrics_dir: PathBuf::from("data/metrics"),
            pretrain_steps: 2000,
            gan_steps: 0,
            control_steps: 1000,
            batch_size: 8,
            noam_warmup: 400,
            noam_factor: 0.5,
            control_lr: 1e-3,
            gan_weight: 0.1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSection {
    pub checkpoint: PathBuf,
    pub report: PathBuf,
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub lstm_hidden: usize,
    pub attn_hidden: usize,
    pub mixup: bool,
    pub weight_decay: f32,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        let e = EstimatorConfig::default();
        EstimatorSection {
            checkpoint: PathBuf::from("data/estimator.ckpt"),
            report: PathBuf::from("data/estimator_report.csv"),
            epochs: e.epochs,
            lr: e.lr,
            batch_size: e.batch_size,
            lstm_hidden: e.lstm_hidden,
            attn_hidden: e.attn_hidden,
            mixup: e.mixup,
            weight_decay: e.weight_decay,
        }
    }
}

impl EstimatorSection {
    pub fn estimator_config(&self, model: &ModelSection, seed: u64) -> EstimatorConfig {
        EstimatorConfig {
            frontend_seed: 0,
            frontend_layers: model.frontend_layers,
            frontend_dim: model.frontend_dim,
            lstm_hidden: self.lstm_hidden,
            attn_hidden: self.attn_hidden,
            init_seed: seed,
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            mixup: self.mixup,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderSection {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub lstm_hidden: usize,
    pub attn_hidden: usize,
    pub latent_dim: usize,
}

impl Default for EmbedderSection {
    fn default() -> Self {
        let e = EmbedderConfig::default();
        EmbedderSection {
            epochs: e.epochs,
            lr: e.lr,
            batch_size: e.batch_size,
            lstm_hidden: e.lstm_hidden,
            attn_hidden: e.attn_hidden,
            latent_dim: e.latent_dim,
        }
    }
}

impl EmbedderSection {
    pub fn embedder_config(&self, model: &ModelSection, seed: u64) -> EmbedderConfig {
        EmbedderConfig {
            frontend_seed: 0,
            frontend_layers: model.frontend_layers,
            frontend_dim: model.frontend_dim,
            lstm_hidden: self.lstm_hidden,
            attn_hidden: self.attn_hidden,
            latent_dim: self.latent_dim,
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            init_seed: seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub out_dir: PathBuf,
    pub n_utts: usize,
    pub deltas: Vec<f64>,
    pub sentence_seed: u64,
    /// Reference speaker ids; empty means auto-pick one per gender from the
    /// eval split.
    pub ref_speakers: Vec<String>,
    pub similarity_levels: Vec<f64>,
    pub similarity_sentences: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            out_dir: PathBuf::from("data/eval"),
            n_utts: 20,
            deltas: impress_core::eval::default_deltas(),
            sentence_seed: 0,
            ref_speakers: Vec::new(),
            similarity_levels: vec![0.0, 1.0, 2.0, 3.0],
            similarity_sentences: 4,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmSection {
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: u64,
    pub max_retries: usize,
    pub temperature: f64,
    pub offline: bool,
}

impl Default for LlmSection {
    fn default() -> Self {
        let c = impress_core::llm::LlmClientConfig::default();
        LlmSection {
            endpoint: c.endpoint,
            model: c.model,
            timeout_secs: c.timeout_secs,
            max_retries: c.max_retries,
            temperature: c.temperature,
            offline: false,
        }
    }
}

impl LlmSection {
    pub fn client_config(&self) -> impress_core::llm::LlmClientConfig {
        impress_core::llm::LlmClientConfig {
            endpoint: self.endpoint.clone(),
            model: self.model.clone(),
            timeout_secs: self.timeout_secs,
            max_retries: self.max_retries,
            temperature: self.temperature,
        }
    }
}

#[derive(Debug)]
pub enum ConfigError {
    Io(std::io::Error, PathBuf),
    Parse(String),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Io(e, p) => write!(f, "ConfigIo: {} ({})", e, p.display()),
            ConfigError::Parse(e) => write!(f, "ConfigParse: {e}"),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Load a config file, or the defaults when no path is given. `seed`
/// overrides the file's seed when present.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, ConfigError> {
    let mut config = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| ConfigError::Io(e, p.to_path_buf()))?;
            toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}
