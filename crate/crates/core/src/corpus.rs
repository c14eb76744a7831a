//! Deterministic synthetic corpus with known impression factors.
//!
//! Real speech is replaced by an oracle generator: each speaker is a random
//! 80-bin spectral template plus ground-truth impression factors, and each
//! utterance is `template + Σ (factor_d − 4)·basis_d + content(tokens) +
//! noise`, where the ten basis vectors are fixed and orthonormal. Dim K
//! affects per-token durations instead of the spectrum, mirroring its
//! speaking-rate meaning. Because the map is linear with known noise, every
//! downstream claim (estimator accuracy, controllability, disentanglement)
//! can be checked against computable ground truth.
//!
//! Templates and content vectors are projected into the orthogonal
//! complement of the impression basis, so the Bayes-optimal estimate of
//! factor d is the mean frame's projection onto basis_d plus 4.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::impression::{ImpressionDim, ImpressionVector};

pub const MEL_BINS: usize = 80;
pub const FRAME_SHIFT_MS: f64 = 10.0;

/// Fixed universe seeds; these never vary with the run seed so that the
/// impression basis and token content are global constants.
const BASIS_SEED: u64 = 0x1337_0B51;
const CONTENT_SEED: u64 = 0xC037_E47A;

/// Duration response to dim K: per-token frames scale by `exp(-K_RATE · k)`.
pub const K_RATE: f64 = 0.3;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("EmptyContent: utterance needs at least one token")]
    EmptyContent,
    #[error("InsufficientSpeakers: {got} speakers cannot fill splits {wanted:?}")]
    InsufficientSpeakers { got: usize, wanted: [usize; 3] },
    #[error("BadRatios: split ratios {0:?} must be nonnegative and sum to 1")]
    BadRatios([f64; 3]),
    #[error("Io: {0}")]
    Io(#[from] std::io::Error),
    #[error("Parse: {0}")]
    Parse(String),
}

/// splitmix64; used to derive independent stream seeds.
pub fn seed_mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn seed_chain(parts: &[u64]) -> u64 {
    let mut s = 0x2545_f491_4f6c_dd1d;
    for &p in parts {
        s = seed_mix(s ^ p);
    }
    s
}

pub fn new_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The ten fixed orthonormal 80-dim impression basis vectors (dims A..J).
pub fn impression_basis() -> &'static [[f64; MEL_BINS]; 10] {
    static BASIS: OnceLock<[[f64; MEL_BINS]; 10]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(BASIS_SEED);
        let normal = Normal::new(0.0f64, 1.0).unwrap();
        let mut basis = [[0.0f64; MEL_BINS]; 10];
        for d in 0..10 {
            let mut v: [f64; MEL_BINS] = std::array::from_fn(|_| normal.sample(&mut rng));
            // Modified Gram-Schmidt, twice for orthogonality well under 1e-9.
            for _ in 0..2 {
                for prev in basis.iter().take(d) {
                    let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                    for (vi, pi) in v.iter_mut().zip(prev) {
                        *vi -= dot * pi;
                    }
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for vi in v.iter_mut() {
                *vi /= norm;
            }
            basis[d] = v;
        }
        basis
    })
}

/// Remove the impression-basis components from a spectral vector.
fn orthogonalize(v: &mut [f64; MEL_BINS]) {
    for basis_d in impression_basis() {
        let dot: f64 = v.iter().zip(basis_d).map(|(a, b)| a * b).sum();
        for (vi, bi) in v.iter_mut().zip(basis_d) {
            *vi -= dot * bi;
        }
    }
}

/// Per-token spectral content, a global constant for each token id,
/// orthogonal to the impression basis.
pub fn content_vector(token_id: usize) -> [f64; MEL_BINS] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_chain(&[CONTENT_SEED, token_id as u64]));
    let normal = Normal::new(0.0f64, 0.5).unwrap();
    let mut v: [f64; MEL_BINS] = std::array::from_fn(|_| normal.sample(&mut rng));
    orthogonalize(&mut v);
    v
}

/// Fixed probe direction used to define the pseudo-pitch target.
fn pitch_probe() -> &'static [f64; MEL_BINS] {
    static PROBE: OnceLock<[f64; MEL_BINS]> = OnceLock::new();
    PROBE.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_chain(&[CONTENT_SEED, 0xF17C4]));
        let normal = Normal::new(0.0f64, 1.0).unwrap();
        let mut v: [f64; MEL_BINS] = std::array::from_fn(|_| normal.sample(&mut rng));
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        v
    })
}

/// A frames×80 log-mel matrix at 10 ms frame shift.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    frames: usize,
    data: Vec<f32>,
}

impl MelSpectrogram {
    pub fn from_vec(frames: usize, data: Vec<f32>) -> Self {
        assert!(frames >= 1, "mel needs at least one frame");
        assert_eq!(data.len(), frames * MEL_BINS);
        MelSpectrogram { frames, data }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        MEL_BINS
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * MEL_BINS..(t + 1) * MEL_BINS]
    }

    pub fn to_tensor(&self) -> crate::Tensor {
        crate::Tensor::from_vec(&[self.frames, MEL_BINS], self.data.clone())
    }

    pub fn duration_seconds(&self) -> f64 {
        self.frames as f64 * FRAME_SHIFT_MS / 1000.0
    }

    /// Raw little-endian f32 matrix plus a JSON sidecar at `<path>.json`.
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut w = BufWriter::new(fs::File::create(path)?);
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        let sidecar = MelSidecar {
            shape: [self.frames, MEL_BINS],
            dtype: "f32le".into(),
            frame_shift_ms: FRAME_SHIFT_MS,
        };
        fs::write(
            sidecar_path(path),
            serde_json::to_string(&sidecar).expect("sidecar json"),
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let sidecar: MelSidecar = serde_json::from_str(
            &fs::read_to_string(sidecar_path(path))
                .map_err(|e| CorpusError::Parse(format!("sidecar for {}: {e}", path.display())))?,
        )
        .map_err(|e| CorpusError::Parse(e.to_string()))?;
        if sidecar.dtype != "f32le" || sidecar.shape[1] != MEL_BINS {
            return Err(CorpusError::Parse(format!("unsupported mel layout {sidecar:?}")));
        }
        let mut raw = Vec::new();
        fs::File::open(path)?.read_to_end(&mut raw)?;
        if raw.len() != sidecar.shape[0] * MEL_BINS * 4 {
            return Err(CorpusError::Parse(format!(
                "mel payload {} bytes does not match shape {:?}",
                raw.len(),
                sidecar.shape
            )));
        }
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(MelSpectrogram::from_vec(sidecar.shape[0], data))
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

#[derive(Debug, Serialize, Deserialize)]
struct MelSidecar {
    shape: [usize; 2],
    dtype: String,
    frame_shift_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GenderTag {
    #[serde(rename = "f")]
    F,
    #[serde(rename = "m")]
    M,
}

impl fmt::Display for GenderTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GenderTag::F => write!(f, "f"),
            GenderTag::M => write!(f, "m"),
        }
    }
}

/// Oracle speaker profile: spectral template plus ground-truth factors.
/// Factors stay constant across every utterance of the speaker.
#[derive(Clone, Debug)]
pub struct SyntheticSpeaker {
    pub speaker_id: String,
    pub template: [f64; MEL_BINS],
    pub factors: ImpressionVector,
    pub gender_tag: GenderTag,
}

/// Per-bin standard deviation of speaker templates. Chosen so that speaker
/// identity stays separable (inter-speaker distance ≈ σ·√160 ≈ 5 exceeds
/// the ±3 modulation radius) while few-speaker corpora still identify the
/// impression subspace: template crosstalk t_a·t_b has std √80·σ², which
/// must sit well below the factor-offset kernel (~10).
pub const TEMPLATE_SIGMA: f64 = 0.4;

fn template_sigma() -> f64 {
    // Exploratory override used by the corpus-design probes.
    std::env::var("IMPRESS_TEMPLATE_SIGMA")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(TEMPLATE_SIGMA)
}

/// Deterministically build a speaker from a seed. Dims A–J are uniform in
/// [1.5, 6.5], K uniform in [−2, 2]; the template lives in the orthogonal
/// complement of the impression basis so the factors stay identifiable.
pub fn make_speaker(seed: u64) -> SyntheticSpeaker {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_chain(&[0x5bea_ce55, seed]));
    let mut scores = [0.0f64; 11];
    for s in scores.iter_mut().take(10) {
        *s = rng.random_range(1.5..6.5);
    }
    scores[10] = rng.random_range(-2.0..2.0);
    let factors = ImpressionVector::new(scores).expect("finite factors");
    let normal = Normal::new(0.0f64, template_sigma()).unwrap();
    let mut template: [f64; MEL_BINS] = std::array::from_fn(|_| normal.sample(&mut rng));
    orthogonalize(&mut template);
    let gender_tag = if factors.get(ImpressionDim::B) > 4.0 {
        GenderTag::F
    } else {
        GenderTag::M
    };
    SyntheticSpeaker {
        speaker_id: format!("spk{seed:04}"),
        template,
        factors,
        gender_tag,
    }
}

/// One rendered utterance with its oracle label and variance targets.
#[derive(Clone, Debug)]
pub struct SyntheticUtterance {
    pub utt_id: String,
    pub speaker_id: String,
    pub token_ids: Vec<usize>,
    pub mel: MelSpectrogram,
    pub moras_per_second: f64,
    /// A–J are the speaker factors; K is the utterance speaking rate in
    /// z-units (replaced by the dataset-standardized rate at corpus build).
    pub label: ImpressionVector,
    pub durations: Vec<usize>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
}

/// Base frame count for a token before rate scaling.
pub fn token_base_duration(token_id: usize) -> usize {
    5 + token_id % 7
}

/// Render one utterance. With `noise_sigma == 0` the output is an exact
/// linear image of the factors, which the generator tests exploit.
pub fn render_utterance(
    sp: &SyntheticSpeaker,
    token_ids: &[usize],
    noise_sigma: f64,
    seed: u64,
) -> Result<SyntheticUtterance, CorpusError> {
    if token_ids.is_empty() {
        return Err(CorpusError::EmptyContent);
    }
    assert!(noise_sigma >= 0.0, "noise_sigma must be nonnegative");
    let mut rng = ChaCha8Rng::seed_from_u64(seed_chain(&[0x07_7e4a, seed]));

    // Per-utterance rate wobble keeps K a per-utterance label.
    let k_speaker = sp.factors.get(ImpressionDim::K);
    let jitter = Normal::new(0.0f64, 0.2).unwrap().sample(&mut rng);
    let k_eff = k_speaker + jitter;
    let rate_scale = (-K_RATE * k_eff).exp();

    let durations: Vec<usize> = token_ids
        .iter()
        .map(|&tid| ((token_base_duration(tid) as f64 * rate_scale).round() as usize).max(1))
        .collect();
    let total_frames: usize = durations.iter().sum();

    // Speaker signature: template + Σ (factor_d − 4) basis_d, in f64.
    let basis = impression_basis();
    let mut signature = sp.template;
    for (d, dim) in ImpressionDim::LIKERT.iter().enumerate() {
        let w = sp.factors.get(*dim) - 4.0;
        for (s, b) in signature.iter_mut().zip(&basis[d]) {
            *s += w * b;
        }
    }

    let noise = Normal::new(0.0f64, 1.0).unwrap();
    let mut data = Vec::with_capacity(total_frames * MEL_BINS);
    let mut pitch = Vec::with_capacity(token_ids.len());
    let mut energy = Vec::with_capacity(token_ids.len());
    for (&tid, &dur) in token_ids.iter().zip(&durations) {
        let content = content_vector(tid);
        let clean: [f64; MEL_BINS] = std::array::from_fn(|i| signature[i] + content[i]);
        energy.push(clean.iter().sum::<f64>() / MEL_BINS as f64);
        pitch.push(clean.iter().zip(pitch_probe()).map(|(a, b)| a * b).sum::<f64>());
        for _ in 0..dur {
            for c in clean.iter() {
                let n = if noise_sigma > 0.0 { noise.sample(&mut rng) * noise_sigma } else { 0.0 };
                data.push((c + n) as f32);
            }
        }
    }

    let moras_per_second =
        token_ids.len() as f64 / (total_frames as f64 * FRAME_SHIFT_MS / 1000.0);

    let mut label = sp.factors;
    label.set(ImpressionDim::K, k_eff).expect("finite k");

    Ok(SyntheticUtterance {
        utt_id: String::new(),
        speaker_id: sp.speaker_id.clone(),
        token_ids: token_ids.to_vec(),
        mel: MelSpectrogram::from_vec(total_frames, data),
        moras_per_second,
        label,
        durations,
        pitch,
        energy,
    })
}

// ---- corpus building ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusParams {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub split_ratios: [f64; 3],
    pub noise_sigma: f64,
    pub vocab_size: usize,
    pub tokens_min: usize,
    pub tokens_max: usize,
    pub seed: u64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        CorpusParams {
            n_speakers: 40,
            utts_per_speaker: 50,
            split_ratios: [0.8, 0.1, 0.1],
            noise_sigma: 0.1,
            vocab_size: 64,
            tokens_min: 10,
            tokens_max: 16,
            seed: 0,
        }
    }
}

pub const SPLITS: [&str; 3] = ["train", "val", "eval"];

/// JSON label block keyed "A".."K".
#[allow(non_snake_case)]
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabelJson {
    pub A: f64,
    pub B: f64,
    pub C: f64,
    pub D: f64,
    pub E: f64,
    pub F: f64,
    pub G: f64,
    pub H: f64,
    pub I: f64,
    pub J: f64,
    pub K: f64,
}

impl LabelJson {
    pub fn from_vector(v: &ImpressionVector) -> Self {
        let a = v.as_array();
        LabelJson {
            A: a[0],
            B: a[1],
            C: a[2],
            D: a[3],
            E: a[4],
            F: a[5],
            G: a[6],
            H: a[7],
            I: a[8],
            J: a[9],
            K: a[10],
        }
    }

    pub fn to_vector(&self) -> Result<ImpressionVector, crate::impression::ImpressionError> {
        ImpressionVector::new([
            self.A, self.B, self.C, self.D, self.E, self.F, self.G, self.H, self.I, self.J,
            self.K,
        ])
    }
}

/// One manifest line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub utt_id: String,
    pub speaker_id: String,
    pub split: String,
    pub mel_path: String,
    pub tokens: Vec<usize>,
    pub moras_per_second: f64,
    pub label: LabelJson,
    pub durations: Vec<usize>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
}

impl ManifestRecord {
    pub fn label_vector(&self) -> ImpressionVector {
        self.label.to_vector().expect("manifest label finite")
    }
}

/// Dataset-level constants needed downstream (rate standardization for K).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusStats {
    pub rate_mean: f64,
    pub rate_std: f64,
    pub noise_sigma: f64,
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub stats: CorpusStats,
    pub root: PathBuf,
}

impl Manifest {
    pub fn split(&self, name: &str) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == name).collect()
    }

    pub fn speaker_ids(&self, split: &str) -> Vec<String> {
        let mut ids: Vec<String> = self
            .records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.speaker_id.clone())
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn load_mel(&self, rec: &ManifestRecord) -> Result<MelSpectrogram, CorpusError> {
        MelSpectrogram::load(&self.root.join(&rec.mel_path))
    }

    /// Standardize dim K of a raw rate using the corpus statistics.
    pub fn standardize_rate(&self, moras_per_second: f64) -> f64 {
        (moras_per_second - self.stats.rate_mean) / self.stats.rate_std
    }
}

/// Partition speaker counts over splits: floor allocation, remainder by
/// largest fractional part, and at least one speaker for every split with a
/// positive ratio. Errors when there are too few speakers to do that.
fn split_counts(n: usize, ratios: [f64; 3]) -> Result<[usize; 3], CorpusError> {
    if ratios.iter().any(|r| *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CorpusError::BadRatios(ratios));
    }
    let positive = ratios.iter().filter(|r| **r > 0.0).count();
    if n < 3 || n < positive {
        return Err(CorpusError::InsufficientSpeakers { got: n, wanted: [0; 3] });
    }
    let mut counts = [0usize; 3];
    let mut fracs = [(0.0f64, 0usize); 3];
    let mut used = 0;
    for i in 0..3 {
        let exact = ratios[i] * n as f64;
        counts[i] = exact.floor() as usize;
        fracs[i] = (exact - exact.floor(), i);
        used += counts[i];
    }
    // Deterministic: largest remainder first, split index breaks ties.
    fracs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for &(_, i) in fracs.iter().take(n - used) {
        counts[i] += 1;
    }
    // Every positive-ratio split gets at least one speaker.
    for i in 0..3 {
        while ratios[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| counts[j]).unwrap();
            if counts[donor] <= 1 {
                return Err(CorpusError::InsufficientSpeakers { got: n, wanted: counts });
            }
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    Ok(counts)
}

/// Generate the corpus under `out_dir`: mel files, `manifest.jsonl`, and
/// `stats.json`. Splits are disjoint in speakers (zero-shot condition) and
/// the whole tree is a pure function of the parameters.
pub fn build_corpus(params: &CorpusParams, out_dir: &Path) -> Result<Manifest, CorpusError> {
    assert!(params.tokens_min >= 1 && params.tokens_min <= params.tokens_max);
    let counts = split_counts(params.n_speakers, params.split_ratios)?;
    fs::create_dir_all(out_dir)?;

    let mut utterances: Vec<(usize, SyntheticUtterance)> = Vec::new();
    for spk_idx in 0..params.n_speakers {
        let speaker = make_speaker(seed_chain(&[params.seed, spk_idx as u64]));
        // Stable speaker naming by corpus position, not raw seed.
        let speaker_id = format!("spk{spk_idx:03}");
        let split_idx = if spk_idx < counts[0] {
            0
        } else if spk_idx < counts[0] + counts[1] {
            1
        } else {
            2
        };
        for utt_idx in 0..params.utts_per_speaker {
            let utt_seed = seed_chain(&[params.seed, spk_idx as u64, utt_idx as u64, 0xa11ce]);
            let mut rng = ChaCha8Rng::seed_from_u64(utt_seed);
            let n_tokens = rng.random_range(params.tokens_min..=params.tokens_max);
            let token_ids: Vec<usize> =
                (0..n_tokens).map(|_| rng.random_range(0..params.vocab_size)).collect();
            let mut utt =
                render_utterance(&speaker, &token_ids, params.noise_sigma, utt_seed)?;
            utt.utt_id = format!("{speaker_id}_utt{utt_idx:03}");
            utt.speaker_id = speaker_id.clone();
            utterances.push((split_idx, utt));
        }
    }

    // Dataset-wide rate standardization defines the final K labels.
    let rates: Vec<f64> = utterances.iter().map(|(_, u)| u.moras_per_second).collect();
    let rate_mean = crate::stats::mean(&rates);
    let rate_std = crate::stats::pop_std(&rates);
    assert!(rate_std > 0.0, "degenerate corpus rates");

    let stats = CorpusStats {
        rate_mean,
        rate_std,
        noise_sigma: params.noise_sigma,
        n_speakers: params.n_speakers,
        utts_per_speaker: params.utts_per_speaker,
        vocab_size: params.vocab_size,
        seed: params.seed,
    };

    let mut records = Vec::with_capacity(utterances.len());
    for (split_idx, utt) in &mut utterances {
        let k_std = (utt.moras_per_second - rate_mean) / rate_std;
        utt.label.set(ImpressionDim::K, k_std).expect("finite standardized rate");
        let mel_path = format!("mel/{}.f32", utt.utt_id);
        utt.mel.save(&out_dir.join(&mel_path))?;
        records.push(ManifestRecord {
            utt_id: utt.utt_id.clone(),
            speaker_id: utt.speaker_id.clone(),
            split: SPLITS[*split_idx].to_string(),
            mel_path,
            tokens: utt.token_ids.clone(),
            moras_per_second: utt.moras_per_second,
            label: LabelJson::from_vector(&utt.label),
            durations: utt.durations.clone(),
            pitch: utt.pitch.clone(),
            energy: utt.energy.clone(),
        });
    }

    let mut w = BufWriter::new(fs::File::create(out_dir.join("manifest.jsonl"))?);
    for rec in &records {
        writeln!(w, "{}", serde_json::to_string(rec).expect("manifest json"))?;
    }
    w.flush()?;
    fs::write(
        out_dir.join("stats.json"),
        serde_json::to_string_pretty(&stats).expect("stats json"),
    )?;

    Ok(Manifest { records, stats, root: out_dir.to_path_buf() })
}

pub fn load_manifest(dir: &Path) -> Result<Manifest, CorpusError> {
    let stats: CorpusStats = serde_json::from_str(
        &fs::read_to_string(dir.join("stats.json"))
            .map_err(|e| CorpusError::Parse(format!("stats.json: {e}")))?,
    )
    .map_err(|e| CorpusError::Parse(e.to_string()))?;
    let file = fs::File::open(dir.join("manifest.jsonl"))
        .map_err(|e| CorpusError::Parse(format!("manifest.jsonl: {e}")))?;
    let mut records = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str::<ManifestRecord>(&line)
                .map_err(|e| CorpusError::Parse(e.to_string()))?,
        );
    }
    Ok(Manifest { records, stats, root: dir.to_path_buf() })
}
