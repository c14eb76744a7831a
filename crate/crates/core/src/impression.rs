//! Voice impression vectors.
//!
//! Eleven antonym pairs describe a voice: A) High–Low pitched through
//! J) Cold–Warm are rated on a 7-point Likert scale, and K) Slow–Fast is a
//! z-scored speaking rate. A vector of these intensities conditions
//! synthesis; this module owns its construction from ratings and speech
//! rates, modulation arithmetic, correlation statistics, and the CSV/JSON
//! wire formats.

use std::fmt;
use std::io::{BufRead, Write};

use thiserror::Error;

/// Scale of one impression dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    /// 7-point Likert rating, nominally in [1, 7].
    Likert7,
    /// z-score, nominally centered on 0.
    ZScore,
}

/// One of the eleven impression dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ImpressionDim {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
    H,
    I,
    J,
    K,
}

impl ImpressionDim {
    pub const ALL: [ImpressionDim; 11] = [
        ImpressionDim::A,
        ImpressionDim::B,
        ImpressionDim::C,
        ImpressionDim::D,
        ImpressionDim::E,
        ImpressionDim::F,
        ImpressionDim::G,
        ImpressionDim::H,
        ImpressionDim::I,
        ImpressionDim::J,
        ImpressionDim::K,
    ];

    /// The ten Likert-scaled dimensions A through J.
    pub const LIKERT: [ImpressionDim; 10] = [
        ImpressionDim::A,
        ImpressionDim::B,
        ImpressionDim::C,
        ImpressionDim::D,
        ImpressionDim::E,
        ImpressionDim::F,
        ImpressionDim::G,
        ImpressionDim::H,
        ImpressionDim::I,
        ImpressionDim::J,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn letter(self) -> char {
        (b'A' + self.index() as u8) as char
    }

    pub fn from_letter(c: char) -> Option<Self> {
        let i = (c as u32).checked_sub('A' as u32)? as usize;
        Self::from_index(i)
    }

    /// Antonym pair naming the dimension.
    pub fn name_pair(self) -> &'static str {
        match self {
            ImpressionDim::A => "High–Low pitched",
            ImpressionDim::B => "Masculine–Feminine",
            ImpressionDim::C => "Clear–Hoarse",
            ImpressionDim::D => "Calm–Restless",
            ImpressionDim::E => "Powerful–Weak",
            ImpressionDim::F => "Youthful–Elderly",
            ImpressionDim::G => "Thick–Thin",
            ImpressionDim::H => "Tense–Relaxed",
            ImpressionDim::I => "Dark–Bright",
            ImpressionDim::J => "Cold–Warm",
            ImpressionDim::K => "Slow–Fast",
        }
    }

    pub fn scale(self) -> Scale {
        match self {
            ImpressionDim::K => Scale::ZScore,
            _ => Scale::Likert7,
        }
    }
}

impl fmt::Display for ImpressionDim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ImpressionError {
    #[error("MissingRatings: no ratings for dimension {0}")]
    MissingRatings(ImpressionDim),
    #[error("InvalidRating: rating {rating} outside 1..=7 for dimension {dim}")]
    InvalidRating { dim: ImpressionDim, rating: i32 },
    #[error("ZeroVariance: inputs have zero variance")]
    ZeroVariance,
    #[error("ZeroVariance: dimension {0} has zero variance across vectors")]
    ZeroVarianceDim(ImpressionDim),
    #[error("InsufficientData: need at least {need} values, got {got}")]
    InsufficientData { need: usize, got: usize },
    #[error("InvalidDelta: non-finite delta {value} for dimension {dim}")]
    InvalidDelta { dim: ImpressionDim, value: f64 },
    #[error("NonFinite: dimension {0} is not finite")]
    NonFinite(ImpressionDim),
    #[error("ParseError: {0}")]
    Parse(String),
}

/// Eleven real scores keyed by [`ImpressionDim`]. Always finite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImpressionVector {
    scores: [f64; 11],
}

impl ImpressionVector {
    pub fn new(scores: [f64; 11]) -> Result<Self, ImpressionError> {
        for (i, s) in scores.iter().enumerate() {
            if !s.is_finite() {
                return Err(ImpressionError::NonFinite(ImpressionDim::from_index(i).unwrap()));
            }
        }
        Ok(ImpressionVector { scores })
    }

    /// All Likert dims at the scale midpoint 4, K at 0.
    pub fn neutral() -> Self {
        let mut scores = [4.0; 11];
        scores[ImpressionDim::K.index()] = 0.0;
        ImpressionVector { scores }
    }

    pub fn get(&self, dim: ImpressionDim) -> f64 {
        self.scores[dim.index()]
    }

    pub fn set(&mut self, dim: ImpressionDim, value: f64) -> Result<(), ImpressionError> {
        if !value.is_finite() {
            return Err(ImpressionError::NonFinite(dim));
        }
        self.scores[dim.index()] = value;
        Ok(())
    }

    pub fn as_array(&self) -> &[f64; 11] {
        &self.scores
    }

    pub fn to_f32(&self) -> [f32; 11] {
        let mut out = [0.0f32; 11];
        for (o, s) in out.iter_mut().zip(&self.scores) {
            *o = *s as f32;
        }
        out
    }

    /// Shift the named dims by their deltas; everything else is untouched
    /// and zero deltas leave the stored bits unchanged. Values are NOT
    /// clamped: modulation sweeps deliberately leave the nominal range.
    pub fn modulate(&self, deltas: &[(ImpressionDim, f64)]) -> Result<Self, ImpressionError> {
        let mut out = *self;
        for &(dim, delta) in deltas {
            if !delta.is_finite() {
                return Err(ImpressionError::InvalidDelta { dim, value: delta });
            }
            if delta != 0.0 {
                out.scores[dim.index()] += delta;
            }
        }
        Ok(out)
    }
}

/// Per-utterance Likert ratings for dims A through J.
#[derive(Clone, Debug)]
pub struct RatingSet {
    pub utterance_id: String,
    /// One rating list per Likert dim, in A..J order. The collection
    /// protocol gathers at least ten raters per utterance.
    pub per_dim_ratings: [Vec<i32>; 10],
}

/// Average each dimension's ratings; K passes through as the supplied
/// standardized speech rate.
pub fn aggregate_ratings(
    rs: &RatingSet,
    speech_rate_z: f64,
) -> Result<ImpressionVector, ImpressionError> {
    let mut scores = [0.0f64; 11];
    for (i, dim) in ImpressionDim::LIKERT.iter().enumerate() {
        let ratings = &rs.per_dim_ratings[i];
        if ratings.is_empty() {
            return Err(ImpressionError::MissingRatings(*dim));
        }
        for &r in ratings {
            if !(1..=7).contains(&r) {
                return Err(ImpressionError::InvalidRating { dim: *dim, rating: r });
            }
        }
        scores[i] = ratings.iter().map(|&r| r as f64).sum::<f64>() / ratings.len() as f64;
    }
    if !speech_rate_z.is_finite() {
        return Err(ImpressionError::NonFinite(ImpressionDim::K));
    }
    scores[ImpressionDim::K.index()] = speech_rate_z;
    ImpressionVector::new(scores)
}

/// z-score speech rates with the population standard deviation, matching
/// the dataset-wide normalization behind dim K.
pub fn standardize_speech_rates(rates: &[f64]) -> Result<Vec<f64>, ImpressionError> {
    if rates.len() < 2 {
        return Err(ImpressionError::InsufficientData { need: 2, got: rates.len() });
    }
    let mean = crate::stats::mean(rates);
    let std = crate::stats::pop_std(rates);
    if std == 0.0 {
        return Err(ImpressionError::ZeroVariance);
    }
    Ok(rates.iter().map(|r| (r - mean) / std).collect())
}

/// Pearson correlations among the eleven dimensions.
///
/// With the private rating data the reference values include
/// (A,G) = −0.80, (E,H) = 0.79 and (H,I) = −0.80; those are context for
/// interpreting results, not reproducible targets.
#[derive(Clone, Debug)]
pub struct CorrelationMatrix {
    pub values: [[f64; 11]; 11],
    pub n_samples: usize,
}

impl CorrelationMatrix {
    pub fn get(&self, a: ImpressionDim, b: ImpressionDim) -> f64 {
        self.values[a.index()][b.index()]
    }
}

pub fn correlation_matrix(vs: &[ImpressionVector]) -> Result<CorrelationMatrix, ImpressionError> {
    if vs.len() < 3 {
        return Err(ImpressionError::InsufficientData { need: 3, got: vs.len() });
    }
    let cols: Vec<Vec<f64>> = (0..11)
        .map(|i| vs.iter().map(|v| v.scores[i]).collect())
        .collect();
    for (i, col) in cols.iter().enumerate() {
        if crate::stats::pop_std(col) == 0.0 {
            return Err(ImpressionError::ZeroVarianceDim(
                ImpressionDim::from_index(i).unwrap(),
            ));
        }
    }
    let mut values = [[0.0f64; 11]; 11];
    for i in 0..11 {
        values[i][i] = 1.0;
        for j in 0..i {
            let r = crate::stats::pearson(&cols[i], &cols[j]);
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    Ok(CorrelationMatrix { values, n_samples: vs.len() })
}

// ---- wire formats ----

pub const CSV_HEADER: &str = "utt_id,A,B,C,D,E,F,G,H,I,J,K";

/// Write `utt_id,A..K` rows with 6-decimal fixed formatting.
pub fn write_csv<W: Write>(
    mut w: W,
    rows: &[(String, ImpressionVector)],
) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for (utt_id, v) in rows {
        write!(w, "{utt_id}")?;
        for s in v.as_array() {
            write!(w, ",{s:.6}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_csv<R: BufRead>(r: R) -> Result<Vec<(String, ImpressionVector)>, ImpressionError> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| ImpressionError::Parse("empty CSV".into()))?
        .map_err(|e| ImpressionError::Parse(e.to_string()))?;
    if header.trim() != CSV_HEADER {
        return Err(ImpressionError::Parse(format!("bad header: {header}")));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line.map_err(|e| ImpressionError::Parse(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 12 {
            return Err(ImpressionError::Parse(format!("expected 12 fields: {line}")));
        }
        let mut scores = [0.0f64; 11];
        for (s, f) in scores.iter_mut().zip(&fields[1..]) {
            *s = f
                .trim()
                .parse::<f64>()
                .map_err(|e| ImpressionError::Parse(format!("{e}: {f}")))?;
        }
        out.push((fields[0].to_string(), ImpressionVector::new(scores)?));
    }
    Ok(out)
}

/// `{"utt_id": ..., "scores": {"A": ..., ...}}` with 6-decimal formatting.
pub fn to_json(utt_id: &str, v: &ImpressionVector) -> String {
    let mut s = String::new();
    s.push_str(&format!("{{\"utt_id\":{},\"scores\":{{", json_str(utt_id)));
    for (i, dim) in ImpressionDim::ALL.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(&format!("\"{}\":{:.6}", dim.letter(), v.get(*dim)));
    }
    s.push_str("}}");
    s
}

pub fn from_json(text: &str) -> Result<(String, ImpressionVector), ImpressionError> {
    let val: serde_json::Value =
        serde_json::from_str(text).map_err(|e| ImpressionError::Parse(e.to_string()))?;
    let utt_id = val
        .get("utt_id")
        .and_then(|v| v.as_str())
        .ok_or_else(|| ImpressionError::Parse("missing utt_id".into()))?
        .to_string();
    let scores_obj = val
        .get("scores")
        .and_then(|v| v.as_object())
        .ok_or_else(|| ImpressionError::Parse("missing scores".into()))?;
    let mut scores = [0.0f64; 11];
    for dim in ImpressionDim::ALL {
        let s = scores_obj
            .get(&dim.letter().to_string())
            .and_then(|v| v.as_f64())
            .ok_or_else(|| ImpressionError::Parse(format!("missing dim {dim}")))?;
        scores[dim.index()] = s;
    }
    Ok((utt_id, ImpressionVector::new(scores)?))
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization")
}
