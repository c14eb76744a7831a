//! Free-form impression descriptions to impression vectors via an LLM.
//!
//! The prompt carries a task description, instructions defining every
//! dimension together with the utterance's current scores, and the target
//! specification. The client is an interface: an HTTP chat-completion
//! adapter for real endpoints and a deterministic offline stub that the
//! test suite uses exclusively.

use thiserror::Error;

use crate::impression::{ImpressionDim, ImpressionVector};

pub const API_KEY_ENV: &str = "IMPRESS_LLM_API_KEY";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("EmptyTarget: target description is empty")]
    EmptyTarget,
    #[error("MalformedResponse: no JSON object with impression keys found")]
    MalformedResponse { raw: String },
    #[error("MissingDimension: key {0} absent from the JSON object")]
    MissingDimension(char),
    #[error("MappingFailed after {attempts} attempts")]
    MappingFailed { attempts: usize, last_response: String },
    #[error("Transport: {0}")]
    Transport(String),
}

/// Scale anchor text for one dimension, e.g. "1 = dark, 7 = bright".
fn scale_line(dim: ImpressionDim) -> String {
    let pair = dim.name_pair();
    let (first, second) = pair.split_once('–').expect("antonym pair");
    match dim.scale() {
        crate::impression::Scale::Likert7 => format!(
            "{}) {}: 1 = {}, 7 = {}",
            dim.letter(),
            pair,
            first.to_lowercase(),
            second.to_lowercase()
        ),
        crate::impression::Scale::ZScore => format!(
            "{}) {}: z-score of speaking rate, negative = {}, positive = {}, keep within [-3, 3]",
            dim.letter(),
            pair,
            first.to_lowercase(),
            second.to_lowercase()
        ),
    }
}

#[derive(Clone, Debug)]
pub struct PromptTemplate {
    pub task_description: String,
    pub instructions_header: String,
    pub output_contract: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            task_description: "You adjust voice impression vectors for a speech synthesizer. \
Given the current impression scores of an utterance and a target impression, produce an \
11-dimensional impression vector that realizes the target while staying plausible for the \
same speaker."
                .into(),
            instructions_header: "Each dimension rates the voice on an antonym pair. \
Dimensions A through J use a 7-point scale; dimension K is a standardized speaking rate."
                .into(),
            output_contract: "Respond with ONLY a JSON object of the form \
{\"A\": number, \"B\": number, \"C\": number, \"D\": number, \"E\": number, \"F\": number, \
\"G\": number, \"H\": number, \"I\": number, \"J\": number, \"K\": number} and nothing else. \
Keep A through J within [1, 7] and K within [-3, 3]."
                .into(),
        }
    }
}

/// Render the three prompt sections in order: task description,
/// instructions (definitions plus current scores), target specification.
pub fn build_prompt(
    tpl: &PromptTemplate,
    current_v: &ImpressionVector,
    target_desc: &str,
) -> Result<String, LlmError> {
    if target_desc.trim().is_empty() {
        return Err(LlmError::EmptyTarget);
    }
    let mut s = String::new();
    s.push_str("# Task\n");
    s.push_str(&tpl.task_description);
    s.push_str("\n\n# Instructions\n");
    s.push_str(&tpl.instructions_header);
    s.push('\n');
    for dim in ImpressionDim::ALL {
        s.push_str("- ");
        s.push_str(&scale_line(dim));
        s.push('\n');
    }
    s.push_str("\nCurrent scores of the utterance before modulation:\n");
    for dim in ImpressionDim::ALL {
        s.push_str(&format!("{}: {:.1}\n", dim.letter(), current_v.get(dim)));
    }
    s.push('\n');
    s.push_str(&tpl.output_contract);
    s.push_str("\n\n# Target\n");
    s.push_str(target_desc);
    s.push('\n');
    Ok(s)
}

/// Outcome of parsing one response.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedVector {
    pub vector: ImpressionVector,
    /// Dims whose values were clamped into range.
    pub clamped: Vec<ImpressionDim>,
}

/// Extract the first JSON object carrying the impression keys, clamping
/// A–J to [1, 7] and K to [-3, 3].
pub fn parse_vector(response: &str) -> Result<ParsedVector, LlmError> {
    let mut best_missing: Option<char> = None;
    let mut saw_candidate = false;
    for (start, _) in response.char_indices().filter(|(_, c)| *c == '{') {
        let mut stream =
            serde_json::Deserializer::from_str(&response[start..]).into_iter::<serde_json::Value>();
        let Some(Ok(value)) = stream.next() else { continue };
        let Some(obj) = value.as_object() else { continue };
        let has_any = ImpressionDim::ALL
            .iter()
            .any(|d| obj.contains_key(&d.letter().to_string()));
        if !has_any {
            continue;
        }
        saw_candidate = true;
        let mut scores = [0.0f64; 11];
        let mut missing = None;
        for dim in ImpressionDim::ALL {
            match obj.get(&dim.letter().to_string()).and_then(|v| v.as_f64()) {
                Some(x) => scores[dim.index()] = x,
                None => {
                    missing = Some(dim.letter());
                    break;
                }
            }
        }
        if let Some(key) = missing {
            if best_missing.is_none() {
                best_missing = Some(key);
            }
            continue;
        }
        let mut clamped = Vec::new();
        for dim in ImpressionDim::ALL {
            let (lo, hi) = match dim.scale() {
                crate::impression::Scale::Likert7 => (1.0, 7.0),
                crate::impression::Scale::ZScore => (-3.0, 3.0),
            };
            let x = scores[dim.index()];
            if !x.is_finite() {
                // NaN/Inf in JSON cannot appear via serde_json numbers.
                continue;
            }
            if x < lo || x > hi {
                scores[dim.index()] = x.clamp(lo, hi);
                clamped.push(dim);
            }
        }
        let vector = ImpressionVector::new(scores)
            .map_err(|_| LlmError::MalformedResponse { raw: response.to_string() })?;
        return Ok(ParsedVector { vector, clamped });
    }
    if saw_candidate {
        Err(LlmError::MissingDimension(best_missing.unwrap_or('A')))
    } else {
        Err(LlmError::MalformedResponse { raw: response.to_string() })
    }
}

#[derive(Clone, Debug)]
pub struct LlmClientConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: u64,
    pub max_retries: usize,
    pub temperature: f64,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        LlmClientConfig {
            endpoint: "http://localhost:8080/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            timeout_secs: 60,
            max_retries: 2,
            temperature: 0.0,
        }
    }
}

/// Blocking completion client.
pub trait LlmClient {
    fn complete(&self, prompt: &str, cfg: &LlmClientConfig) -> Result<String, LlmError>;
}

/// Chat-completion HTTP adapter. Reads the API key from `IMPRESS_LLM_API_KEY`
/// when present; the test suite never constructs this client.
pub struct HttpChatClient;

impl LlmClient for HttpChatClient {
    fn complete(&self, prompt: &str, cfg: &LlmClientConfig) -> Result<String, LlmError> {
        let body = serde_json::json!({
            "model": cfg.model,
            "temperature": cfg.temperature,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = ureq::post(&cfg.endpoint)
            .timeout(std::time::Duration::from_secs(cfg.timeout_secs))
            .set("Content-Type", "application/json");
        if let Ok(key) = std::env::var(API_KEY_ENV) {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let response = req
            .send_string(&body.to_string())
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let parsed: serde_json::Value = response
            .into_json()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        parsed["choices"][0]["message"]["content"]
            .as_str()
            .map(|s| s.to_string())
            .ok_or_else(|| LlmError::Transport("response has no message content".into()))
    }
}

/// Deterministic offline stub: replays a scripted response sequence
/// (repeating the last entry when exhausted).
pub struct StubClient {
    responses: Vec<String>,
    cursor: std::cell::Cell<usize>,
}

impl StubClient {
    pub fn new(responses: Vec<String>) -> Self {
        assert!(!responses.is_empty(), "stub needs at least one response");
        StubClient { responses, cursor: std::cell::Cell::new(0) }
    }

    /// Stub that answers with a fixed valid vector JSON.
    pub fn fixed_vector(v: &ImpressionVector) -> Self {
        let mut s = String::from("{");
        for (i, dim) in ImpressionDim::ALL.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            s.push_str(&format!("\"{}\":{}", dim.letter(), v.get(*dim)));
        }
        s.push('}');
        StubClient::new(vec![s])
    }
}

impl LlmClient for StubClient {
    fn complete(&self, _prompt: &str, _cfg: &LlmClientConfig) -> Result<String, LlmError> {
        let i = self.cursor.get();
        let response = self.responses[i.min(self.responses.len() - 1)].clone();
        self.cursor.set(i + 1);
        Ok(response)
    }
}

#[derive(Clone, Debug)]
pub struct AttemptRecord {
    pub prompt: String,
    pub raw_response: String,
}

/// Everything needed to replay a mapping call.
#[derive(Clone, Debug)]
pub struct MappingTrace {
    pub attempts: Vec<AttemptRecord>,
    pub clamped: Vec<ImpressionDim>,
    /// The raw response the returned vector was parsed from.
    pub raw_response: String,
}

impl MappingTrace {
    pub fn attempts_count(&self) -> usize {
        self.attempts.len()
    }
}

const FORMAT_REMINDER: &str = "\n\nREMINDER: your previous reply could not be parsed. Respond \
with ONLY the JSON object {\"A\": number, ..., \"K\": number}; every key A through K must be \
present with a numeric value, with no surrounding text.";

/// Build the prompt, query the client, parse; parse failures retry with an
/// appended format reminder up to `cfg.max_retries` extra attempts.
pub fn map_impression(
    client: &dyn LlmClient,
    tpl: &PromptTemplate,
    current_v: &ImpressionVector,
    target_desc: &str,
    cfg: &LlmClientConfig,
) -> Result<(ImpressionVector, MappingTrace), LlmError> {
    let base_prompt = build_prompt(tpl, current_v, target_desc)?;
    let mut attempts = Vec::new();
    for attempt in 0..=cfg.max_retries {
        let prompt = if attempt == 0 {
            base_prompt.clone()
        } else {
            format!("{base_prompt}{FORMAT_REMINDER}")
        };
        let raw = client.complete(&prompt, cfg)?;
        attempts.push(AttemptRecord { prompt, raw_response: raw.clone() });
        match parse_vector(&raw) {
            Ok(parsed) => {
                let trace = MappingTrace {
                    attempts,
                    clamped: parsed.clamped.clone(),
                    raw_response: raw,
                };
                return Ok((parsed.vector, trace));
            }
            Err(LlmError::MalformedResponse { .. }) | Err(LlmError::MissingDimension(_)) => {}
            Err(other) => return Err(other),
        }
    }
    let last = attempts.last().map(|a| a.raw_response.clone()).unwrap_or_default();
    Err(LlmError::MappingFailed { attempts: attempts.len(), last_response: last })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn neutral() -> ImpressionVector {
        ImpressionVector::neutral()
    }

    #[test]
    fn prompt_contains_each_definition_once_and_sections_in_order() {
        let tpl = PromptTemplate::default();
        let prompt = build_prompt(&tpl, &neutral(), "calm bedtime narrator").unwrap();
        for dim in ImpressionDim::ALL {
            let needle = format!("{}) {}", dim.letter(), dim.name_pair());
            assert_eq!(
                prompt.matches(&needle).count(),
                1,
                "definition for {needle} must appear exactly once"
            );
        }
        let t = prompt.find("# Task").unwrap();
        let i = prompt.find("# Instructions").unwrap();
        let g = prompt.find("# Target").unwrap();
        assert!(t < i && i < g, "sections must be ordered task, instructions, target");
        assert!(prompt.contains("JSON object"));
    }

    #[test]
    fn prompt_embeds_current_scores_to_one_decimal() {
        let v = ImpressionVector::new([4.0; 11]).unwrap();
        let prompt = build_prompt(&PromptTemplate::default(), &v, "anything").unwrap();
        assert_eq!(prompt.matches(": 4.0\n").count(), 11);
    }

    #[test]
    fn target_section_is_the_literal_description() {
        let prompt = build_prompt(&PromptTemplate::default(), &neutral(), "sleepy").unwrap();
        let target = prompt.split("# Target\n").nth(1).unwrap();
        assert_eq!(target.trim_end(), "sleepy");
        let prompt2 =
            build_prompt(&PromptTemplate::default(), &neutral(), "urgent, attention-grabbing")
                .unwrap();
        let target2 = prompt2.split("# Target\n").nth(1).unwrap();
        assert_eq!(target2.trim_end(), "urgent, attention-grabbing");
    }

    #[test]
    fn empty_target_is_rejected() {
        assert!(matches!(
            build_prompt(&PromptTemplate::default(), &neutral(), "  "),
            Err(LlmError::EmptyTarget)
        ));
    }

    fn full_json(values: [f64; 11]) -> String {
        let mut s = String::from("{");
        for (i, dim) in ImpressionDim::ALL.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            s.push_str(&format!("\"{}\":{}", dim.letter(), values[i]));
        }
        s.push('}');
        s
    }

    #[test]
    fn parse_complete_object_round_trips() {
        let values = [4.0, 3.0, 2.0, 5.0, 6.0, 1.0, 7.0, 4.5, 3.5, 2.5, 0.0];
        let parsed = parse_vector(&full_json(values)).unwrap();
        assert_eq!(parsed.vector.as_array(), &values);
        assert!(parsed.clamped.is_empty());
    }

    #[test]
    fn parse_clamps_out_of_range_values() {
        let mut values = [4.0; 11];
        values[ImpressionDim::C.index()] = 9.5;
        values[ImpressionDim::K.index()] = -8.0;
        let parsed = parse_vector(&full_json(values)).unwrap();
        assert_eq!(parsed.vector.get(ImpressionDim::C), 7.0);
        assert_eq!(parsed.vector.get(ImpressionDim::K), -3.0);
        assert_eq!(parsed.clamped, vec![ImpressionDim::C, ImpressionDim::K]);
    }

    #[test]
    fn parse_finds_json_after_prose_and_other_braces() {
        let body = full_json([4.0, 4.0, 4.0, 4.0, 2.0, 4.0, 4.0, 6.0, 4.0, 4.0, 0.5]);
        let cases = [
            format!("Sure! Here is the vector you asked for:\n\n{body}\n\nLet me know."),
            format!("First, {{\"note\": \"context\"}} aside, the answer is {body}"),
            format!("```json\n{body}\n```"),
            format!("{{broken json... {body}"),
        ];
        for (i, text) in cases.iter().enumerate() {
            let parsed = parse_vector(text).unwrap_or_else(|e| panic!("case {i}: {e}"));
            assert_eq!(parsed.vector.get(ImpressionDim::E), 2.0, "case {i}");
            assert_eq!(parsed.vector.get(ImpressionDim::H), 6.0, "case {i}");
        }
    }

    #[test]
    fn parse_reports_missing_dimension_and_malformed() {
        let text = r#"{"A":4,"B":4,"C":4,"D":4,"E":4,"F":4,"G":4,"H":4,"I":4,"J":4}"#;
        assert!(matches!(parse_vector(text), Err(LlmError::MissingDimension('K'))));
        assert!(matches!(
            parse_vector("no json here at all"),
            Err(LlmError::MalformedResponse { .. })
        ));
        assert!(matches!(
            parse_vector("{\"unrelated\": 1}"),
            Err(LlmError::MalformedResponse { .. })
        ));
    }

    #[test]
    fn map_impression_happy_path_single_attempt() {
        let target = ImpressionVector::new([3.0, 4.0, 5.0, 2.0, 6.0, 4.0, 4.0, 3.0, 5.0, 4.0, 1.0])
            .unwrap();
        let client = StubClient::fixed_vector(&target);
        let cfg = LlmClientConfig::default();
        let (v, trace) =
            map_impression(&client, &PromptTemplate::default(), &neutral(), "bright and brisk", &cfg)
                .unwrap();
        assert_eq!(v.as_array(), target.as_array());
        assert_eq!(trace.attempts_count(), 1);
        // The trace replays: re-parsing the stored raw response gives the
        // same vector.
        let replay = parse_vector(&trace.raw_response).unwrap();
        assert_eq!(replay.vector.as_array(), v.as_array());
    }

    #[test]
    fn map_impression_retries_then_succeeds() {
        let good = full_json([4.0; 11]);
        let client = StubClient::new(vec![
            "gibberish".into(),
            "still not json".into(),
            good.clone(),
        ]);
        let cfg = LlmClientConfig { max_retries: 2, ..LlmClientConfig::default() };
        let (v, trace) =
            map_impression(&client, &PromptTemplate::default(), &neutral(), "warm", &cfg).unwrap();
        assert_eq!(v.get(ImpressionDim::A), 4.0);
        assert_eq!(trace.attempts_count(), 3);
        assert!(trace.attempts[1].prompt.contains("REMINDER"));
        assert!(!trace.attempts[0].prompt.contains("REMINDER"));
    }

    #[test]
    fn map_impression_exhausts_retries() {
        let client = StubClient::new(vec!["nope".into()]);
        let cfg = LlmClientConfig { max_retries: 2, ..LlmClientConfig::default() };
        match map_impression(&client, &PromptTemplate::default(), &neutral(), "x", &cfg) {
            Err(LlmError::MappingFailed { attempts, last_response }) => {
                assert_eq!(attempts, 3);
                assert_eq!(last_response, "nope");
            }
            other => panic!("expected MappingFailed, got {other:?}"),
        }
    }

    #[test]
    fn map_impression_is_pure_given_a_deterministic_stub() {
        let run = || {
            let target =
                ImpressionVector::new([3.0, 4.0, 5.0, 2.0, 6.0, 4.0, 4.0, 3.0, 5.0, 4.0, 1.0])
                    .unwrap();
            let client = StubClient::fixed_vector(&target);
            let cfg = LlmClientConfig::default();
            map_impression(&client, &PromptTemplate::default(), &neutral(), "dreamy", &cfg)
                .unwrap()
        };
        let (v1, t1) = run();
        let (v2, t2) = run();
        assert_eq!(v1.as_array(), v2.as_array());
        assert_eq!(t1.attempts[0].prompt, t2.attempts[0].prompt);
        assert_eq!(t1.raw_response, t2.raw_response);
    }

    #[test]
    fn parsed_vectors_always_satisfy_post_clamp_ranges() {
        use rand::Rng;
        let mut rng = crate::corpus::new_rng(77);
        for _ in 0..50 {
            let values: [f64; 11] = std::array::from_fn(|_| rng.random_range(-20.0..20.0));
            let parsed = parse_vector(&full_json(values)).unwrap();
            for dim in ImpressionDim::LIKERT {
                let x = parsed.vector.get(dim);
                assert!((1.0..=7.0).contains(&x));
            }
            let k = parsed.vector.get(ImpressionDim::K);
            assert!((-3.0..=3.0).contains(&k));
        }
    }
}
