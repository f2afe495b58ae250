//! Diagnosis backends: a deterministic majority-vote mock and an
//! OpenAI-compatible chat-completions client with vision inputs.

use std::fmt;
use std::fs;
use std::path::Path;
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{read_hu_png, SliceRecord};
use crate::error::{Error, Result};
use crate::featurizer::{lung_window, resize_bilinear, DISPLAY_IMAGE_SIZE, LUNG_WINDOW_CENTER, LUNG_WINDOW_WIDTH};
use crate::orchestrator::PromptBundle;

/// Environment variable holding the bearer token for the HTTP backend.
pub const API_KEY_ENV: &str = "BHD_RAG_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DiagnosisLabel {
    #[serde(rename = "BHD")]
    Bhd,
    #[serde(rename = "nonBHD")]
    NonBhd,
}

impl DiagnosisLabel {
    pub fn from_bhd(is_bhd: bool) -> Self {
        if is_bhd {
            Self::Bhd
        } else {
            Self::NonBhd
        }
    }

    pub fn is_bhd(self) -> bool {
        self == Self::Bhd
    }

    /// Text used on the canonical `DIAGNOSIS:` line.
    pub fn canonical(self) -> &'static str {
        match self {
            Self::Bhd => "BHD",
            Self::NonBhd => "NON-BHD",
        }
    }
}

impl fmt::Display for DiagnosisLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Bhd => "BHD",
            Self::NonBhd => "nonBHD",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisResponse {
    /// `None` when the output carried no parseable diagnosis line.
    pub label: Option<DiagnosisLabel>,
    pub description: String,
    pub raw_output: String,
    pub evidence_ids: Vec<String>,
}

impl DiagnosisResponse {
    fn from_raw(raw_output: String, evidence_ids: Vec<String>) -> Self {
        let label = parse_diagnosis(&raw_output);
        let description = strip_diagnosis_lines(&raw_output);
        Self {
            label,
            description,
            raw_output,
            evidence_ids,
        }
    }
}

fn strip_diagnosis_lines(text: &str) -> String {
    text.lines()
        .filter(|l| !l.to_ascii_lowercase().contains("diagnosis:"))
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_string()
}

/// Finds the last `DIAGNOSIS:` marker (any case) followed by a BHD or
/// non-BHD verdict. Returns `None` when no marker carries a verdict.
pub fn parse_diagnosis(text: &str) -> Option<DiagnosisLabel> {
    const MARKER: &str = "diagnosis:";
    let lower = text.to_ascii_lowercase();
    let mut found = None;
    let mut from = 0;
    while let Some(pos) = lower[from..].find(MARKER) {
        let start = from + pos + MARKER.len();
        from = start;
        let rest = lower[start..].lines().next().unwrap_or("");
        let rest = rest.trim_start_matches(|c: char| c.is_whitespace() || "*_`\"'[(".contains(c));
        let label = if ["non-bhd", "non bhd", "nonbhd", "not bhd", "non_bhd"]
            .iter()
            .any(|p| rest.starts_with(p))
        {
            Some(DiagnosisLabel::NonBhd)
        } else if rest.starts_with("bhd") {
            Some(DiagnosisLabel::Bhd)
        } else {
            None
        };
        if label.is_some() {
            found = label;
        }
    }
    found
}

/// Anything that can produce a diagnosis from an assembled prompt.
pub trait Generator: Send + Sync {
    fn generate(&self, bundle: &PromptBundle) -> Result<DiagnosisResponse>;

    /// Short name recorded in reports.
    fn name(&self) -> &str;
}

/// Anything that can draft a free-text description of one slice image.
pub trait DescriptionBackend {
    fn describe(&self, slice: &SliceRecord, image: &Path, prompt: &str) -> Result<String>;
}

/// Majority vote over the evidence labels; a tie goes to non-BHD.
pub fn generate_mock(bundle: &PromptBundle) -> Result<DiagnosisResponse> {
    if bundle.evidence.is_empty() {
        return Err(Error::NoEvidence);
    }
    let bhd = bundle
        .evidence
        .iter()
        .filter(|e| e.entry.slice.class_label.is_bhd())
        .count();
    let non_bhd = bundle.evidence.len() - bhd;
    let label = DiagnosisLabel::from_bhd(bhd > non_bhd);
    let evidence_ids: Vec<String> = bundle
        .evidence
        .iter()
        .map(|e| e.entry.slice_id().to_string())
        .collect();
    let listing = bundle
        .evidence
        .iter()
        .map(|e| format!("{} ({}, {:.4})", e.entry.slice_id(), e.entry.slice.class_label, e.similarity))
        .collect::<Vec<_>>()
        .join(", ");
    let raw = format!(
        "Reference cases: {listing}.\nVotes: BHD {bhd}, non-BHD {non_bhd}.\nDIAGNOSIS: {}",
        label.canonical()
    );
    Ok(DiagnosisResponse::from_raw(raw, evidence_ids))
}

/// Deterministic offline backend.
#[derive(Debug, Clone, Default)]
pub struct MockGenerator {
    /// Fixed reply for description requests; a templated draft otherwise.
    pub description: Option<String>,
}

impl MockGenerator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn echoing(description: impl Into<String>) -> Self {
        Self {
            description: Some(description.into()),
        }
    }
}

impl Generator for MockGenerator {
    fn generate(&self, bundle: &PromptBundle) -> Result<DiagnosisResponse> {
        generate_mock(bundle)
    }

    fn name(&self) -> &str {
        "mock"
    }
}

impl DescriptionBackend for MockGenerator {
    fn describe(&self, slice: &SliceRecord, _image: &Path, _prompt: &str) -> Result<String> {
        Ok(match &self.description {
            Some(text) => text.clone(),
            None => format!(
                "Draft description of {} ({} view, frame {}): pending expert review.",
                slice.slice_id, slice.view, slice.frame_index
            ),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    /// Base URL; requests go to `{endpoint}/chat/completions`.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_retries: usize,
    /// First retry delay; doubles on every further attempt.
    pub backoff_ms: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1".into(),
            model: "gpt-4-turbo".into(),
            api_key_env: API_KEY_ENV.into(),
            timeout_secs: 120,
            max_retries: 3,
            backoff_ms: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

/// Backend selection as it appears in configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorBackend {
    pub kind: BackendKind,
    pub http: HttpConfig,
}

/// A constructed backend usable both for diagnosis and description drafting.
pub enum Backend {
    Mock(MockGenerator),
    Http(HttpGenerator),
}

impl GeneratorBackend {
    pub fn validate(&self) -> Result<()> {
        if self.kind == BackendKind::Http
            && (self.http.endpoint.trim().is_empty() || self.http.model.trim().is_empty())
        {
            return Err(Error::InvalidConfig("http backend requires endpoint and model".into()));
        }
        Ok(())
    }

    /// Builds the backend, reading the API key from the environment for `http`.
    pub fn build(&self) -> Result<Backend> {
        self.validate()?;
        Ok(match self.kind {
            BackendKind::Mock => Backend::Mock(MockGenerator::new()),
            BackendKind::Http => Backend::Http(HttpGenerator::from_env(self.http.clone())?),
        })
    }
}

impl Generator for Backend {
    fn generate(&self, bundle: &PromptBundle) -> Result<DiagnosisResponse> {
        match self {
            Backend::Mock(m) => m.generate(bundle),
            Backend::Http(h) => h.generate(bundle),
        }
    }

    fn name(&self) -> &str {
        match self {
            Backend::Mock(m) => m.name(),
            Backend::Http(h) => h.name(),
        }
    }
}

impl DescriptionBackend for Backend {
    fn describe(&self, slice: &SliceRecord, image: &Path, prompt: &str) -> Result<String> {
        match self {
            Backend::Mock(m) => m.describe(slice, image, prompt),
            Backend::Http(h) => h.describe(slice, image, prompt),
        }
    }
}

/// Encodes an image file as a PNG data URL.
///
/// 16-bit grayscale HU PNGs are lung-windowed and rendered as 8-bit at
/// display resolution; any other file is sent byte-for-byte.
pub fn image_data_url(path: &Path) -> Result<String> {
    let bytes = match read_hu_png(path) {
        Ok(hu) => {
            let windowed = lung_window(&hu, LUNG_WINDOW_CENTER, LUNG_WINDOW_WIDTH)?;
            resize_bilinear(&windowed, DISPLAY_IMAGE_SIZE)?.to_png8()?
        }
        Err(Error::Io { path, source }) => return Err(Error::Io { path, source }),
        Err(_) => fs::read(path).map_err(|e| Error::io(path, e))?,
    };
    Ok(format!("data:image/png;base64,{}", BASE64.encode(bytes)))
}

fn text_part(text: impl Into<String>) -> Value {
    json!({"type": "text", "text": text.into()})
}

fn image_part(path: &Path) -> Result<Value> {
    Ok(json!({"type": "image_url", "image_url": {"url": image_data_url(path)?}}))
}

/// The chat-completions request body for a bundle.
///
/// User content order: expert items, evidence pairs (image, then label and
/// description), then the query image last.
pub fn build_chat_request(bundle: &PromptBundle, model: &str) -> Result<Value> {
    let mut parts = Vec::new();
    if !bundle.expert.is_empty() {
        parts.push(text_part("Expert knowledge on distinguishing diffuse cystic lung diseases:"));
        for item in &bundle.expert {
            if let Some(path) = &item.image_path {
                parts.push(image_part(path)?);
            }
            parts.push(text_part(item.text.clone()));
        }
    }
    if !bundle.evidence.is_empty() {
        parts.push(text_part(format!(
            "{} most similar reference cases from the curated corpus:",
            bundle.evidence.len()
        )));
        for (i, ev) in bundle.evidence.iter().enumerate() {
            parts.push(image_part(&ev.image_path)?);
            parts.push(text_part(format!(
                "Reference {} ({} view, diagnosis {}, similarity {:.4}): {}",
                i + 1,
                ev.entry.slice.view,
                ev.entry.slice.class_label,
                ev.similarity,
                ev.entry.description
            )));
        }
    }
    parts.push(text_part(format!("Query image ({} view):", bundle.query.view)));
    parts.push(image_part(&bundle.query.image_path)?);
    Ok(json!({
        "model": model,
        "temperature": 0,
        "messages": [
            {"role": "system", "content": bundle.instruction},
            {"role": "user", "content": parts},
        ],
    }))
}

/// Client for an OpenAI-compatible `/chat/completions` endpoint.
pub struct HttpGenerator {
    config: HttpConfig,
    api_key: String,
    agent: ureq::Agent,
}

impl HttpGenerator {
    pub fn new(config: HttpConfig, api_key: impl Into<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            config,
            api_key: api_key.into(),
            agent,
        }
    }

    pub fn from_env(config: HttpConfig) -> Result<Self> {
        let key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| Error::MissingApiKey(config.api_key_env.clone()))?;
        Ok(Self::new(config, key))
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'))
    }

    /// Posts `body` and returns `choices[0].message.content`.
    ///
    /// Transport errors, 429 and 5xx responses are retried up to
    /// `max_retries` times with exponential backoff; other non-2xx statuses
    /// fail immediately.
    pub fn complete(&self, body: &Value) -> Result<String> {
        let payload = serde_json::to_string(body)?;
        let url = self.url();
        let attempts = self.config.max_retries + 1;
        let mut last_error = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                thread::sleep(Duration::from_millis(delay));
            }
            let sent = self
                .agent
                .post(&url)
                .header("Authorization", &format!("Bearer {}", self.api_key))
                .header("Content-Type", "application/json")
                .send(payload.as_bytes());
            let mut response = match sent {
                Ok(r) => r,
                Err(e) => {
                    last_error = e.to_string();
                    continue;
                }
            };
            let status = response.status().as_u16();
            if status == 429 || (500..600).contains(&status) {
                last_error = format!("HTTP {status}");
                continue;
            }
            if !(200..300).contains(&status) {
                return Err(Error::BackendRejected(status));
            }
            let text = match response.body_mut().read_to_string() {
                Ok(t) => t,
                Err(e) => {
                    last_error = e.to_string();
                    continue;
                }
            };
            return extract_content(&text);
        }
        Err(Error::BackendUnavailable {
            attempts,
            message: last_error,
        })
    }
}

fn extract_content(text: &str) -> Result<String> {
    let value: Value = serde_json::from_str(text)
        .map_err(|e| Error::MalformedResponse(format!("response is not JSON: {e}")))?;
    value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| Error::MalformedResponse("missing choices[0].message.content".into()))
}

impl Generator for HttpGenerator {
    fn generate(&self, bundle: &PromptBundle) -> Result<DiagnosisResponse> {
        let body = build_chat_request(bundle, &self.config.model)?;
        let raw = self.complete(&body)?;
        Ok(DiagnosisResponse::from_raw(raw, bundle.evidence_ids()))
    }

    fn name(&self) -> &str {
        "http"
    }
}

impl DescriptionBackend for HttpGenerator {
    fn describe(&self, _slice: &SliceRecord, image: &Path, prompt: &str) -> Result<String> {
        let body = json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": "You are an expert thoracic radiologist."},
                {"role": "user", "content": [text_part(prompt), image_part(image)?]},
            ],
        });
        self.complete(&body)
    }
}
