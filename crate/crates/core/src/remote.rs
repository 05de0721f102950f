//! Blocking JSON-over-HTTP clients for a model bridge: next-token
//! distributions, sequence scores, mask filling and NER tagging.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attacks::MaskFiller;
use crate::corpus::{detokenize_with_offsets, Token};
use crate::error::{LabError, Result};
use crate::lm::{LanguageModel, ProbDistribution, Vocabulary};
use crate::tagger::{char_range_to_tokens, Candidate, PiiClass};

const TIMEOUT: Duration = Duration::from_secs(120);

/// Returns true for model references that should go through the bridge.
pub fn is_remote_ref(reference: &str) -> bool {
    reference.starts_with("http://") || reference.starts_with("https://")
}

#[derive(Debug, Clone)]
struct Client {
    base: String,
    agent: ureq::Agent,
}

impl Client {
    fn new(endpoint: &str) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(TIMEOUT))
            .build()
            .into();
        Client {
            base: endpoint.trim_end_matches('/').to_string(),
            agent,
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    fn map_err(&self, path: &str, e: ureq::Error) -> LabError {
        match e {
            ureq::Error::StatusCode(code) => LabError::Protocol {
                endpoint: self.url(path),
                message: format!("HTTP status {code}"),
            },
            other => LabError::Transport {
                endpoint: self.url(path),
                message: other.to_string(),
            },
        }
    }

    fn get<R: DeserializeOwned>(&self, path: &str) -> Result<R> {
        let mut resp = self.agent.get(self.url(path)).call().map_err(|e| self.map_err(path, e))?;
        resp.body_mut().read_json::<R>().map_err(|e| LabError::Protocol {
            endpoint: self.url(path),
            message: format!("bad response body: {e}"),
        })
    }

    fn post<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<R> {
        let mut resp = self
            .agent
            .post(self.url(path))
            .send_json(body)
            .map_err(|e| self.map_err(path, e))?;
        resp.body_mut().read_json::<R>().map_err(|e| LabError::Protocol {
            endpoint: self.url(path),
            message: format!("bad response body: {e}"),
        })
    }

    fn protocol(&self, path: &str, message: impl Into<String>) -> LabError {
        LabError::Protocol {
            endpoint: self.url(path),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub model_id: String,
    pub vocab_size: usize,
    pub max_context: usize,
    /// End-of-sequence token string. Without one, sampling always runs to
    /// `max_tokens`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eos_token: Option<String>,
}

#[derive(Serialize)]
struct DistributionRequest<'a> {
    prefix: &'a [Token],
    #[serde(skip_serializing_if = "Option::is_none")]
    top_m: Option<usize>,
}

#[derive(Deserialize)]
struct DistributionResponse {
    tokens: Vec<Token>,
    logprobs: Vec<f64>,
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    tokens: &'a [Token],
}

#[derive(Deserialize)]
struct ScoreResponse {
    logprobs: Vec<f64>,
}

/// Untruncated distributions whose mass is further than this from 1 are
/// rejected rather than silently renormalized.
const MASS_TOLERANCE: f64 = 1e-3;

/// A language model served by the bridge.
#[derive(Debug)]
pub struct RemoteModel {
    client: Client,
    info: ModelInfo,
    top_m: Option<usize>,
    vocab_cache: Mutex<Option<Arc<Vocabulary>>>,
}

impl RemoteModel {
    /// Connects and fetches `/v1/info`.
    pub fn connect(endpoint: &str, top_m: Option<usize>) -> Result<Self> {
        if top_m == Some(0) {
            return Err(LabError::config("top_m must be >= 1"));
        }
        let client = Client::new(endpoint);
        let info: ModelInfo = client.get("/v1/info")?;
        Ok(RemoteModel {
            client,
            info,
            top_m,
            vocab_cache: Mutex::new(None),
        })
    }

    pub fn info(&self) -> &ModelInfo {
        &self.info
    }

    fn vocabulary(&self, tokens: Vec<Token>) -> Result<Arc<Vocabulary>> {
        let mut cache = self.vocab_cache.lock().expect("vocab cache poisoned");
        if let Some(v) = cache.as_ref() {
            if v.tokens() == tokens.as_slice() {
                return Ok(v.clone());
            }
        }
        let eos = self
            .info
            .eos_token
            .as_deref()
            .filter(|e| tokens.iter().any(|t| t == e));
        let v = Arc::new(Vocabulary::new(tokens, eos, None).map_err(|e| {
            self.client.protocol("/v1/distribution", e.to_string())
        })?);
        *cache = Some(v.clone());
        Ok(v)
    }
}

impl LanguageModel for RemoteModel {
    fn model_id(&self) -> String {
        self.info.model_id.clone()
    }

    fn next_token_distribution(&self, prefix: &[Token]) -> Result<ProbDistribution> {
        const PATH: &str = "/v1/distribution";
        let resp: DistributionResponse = self.client.post(
            PATH,
            &DistributionRequest {
                prefix,
                top_m: self.top_m,
            },
        )?;
        if resp.tokens.len() != resp.logprobs.len() || resp.tokens.is_empty() {
            return Err(self.client.protocol(PATH, "tokens and logprobs differ in length or are empty"));
        }
        let mut probs: Vec<f64> = resp.logprobs.iter().map(|lp| lp.exp()).collect();
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(self.client.protocol(PATH, "non-finite log-probability"));
        }
        let mass: f64 = probs.iter().sum();
        if self.top_m.is_none() && (mass - 1.0).abs() > MASS_TOLERANCE {
            return Err(self.client.protocol(PATH, format!("distribution mass {mass} is not 1")));
        }
        if mass <= 0.0 {
            return Err(self.client.protocol(PATH, "distribution has no mass"));
        }
        probs.iter_mut().for_each(|p| *p /= mass);
        let vocab = self.vocabulary(resp.tokens)?;
        ProbDistribution::new(vocab, probs)
    }

    fn sequence_logprobs(&self, tokens: &[Token]) -> Result<Vec<f64>> {
        const PATH: &str = "/v1/score";
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let resp: ScoreResponse = self.client.post(PATH, &ScoreRequest { tokens })?;
        if resp.logprobs.len() != tokens.len() {
            return Err(self.client.protocol(
                PATH,
                format!("expected {} log-probabilities, got {}", tokens.len(), resp.logprobs.len()),
            ));
        }
        Ok(resp.logprobs)
    }

    fn end_of_sequence(&self) -> Option<String> {
        self.info.eos_token.clone()
    }
}

#[derive(Serialize)]
struct FillMaskRequest<'a> {
    left: &'a [Token],
    right: &'a [Token],
}

#[derive(Deserialize)]
struct FillMaskResponse {
    token: Token,
    #[allow(dead_code)]
    logprob: f64,
}

/// Mask filling through the bridge's masked language model.
#[derive(Debug)]
pub struct RemoteMaskFiller {
    client: Client,
}

impl RemoteMaskFiller {
    pub fn new(endpoint: &str) -> Self {
        RemoteMaskFiller {
            client: Client::new(endpoint),
        }
    }
}

impl MaskFiller for RemoteMaskFiller {
    fn fill(&self, left: &[Token], right: &[Token]) -> Result<Token> {
        const PATH: &str = "/v1/fill_mask";
        let resp: FillMaskResponse = self.client.post(PATH, &FillMaskRequest { left, right })?;
        if resp.token.trim().is_empty() {
            return Err(self.client.protocol(PATH, "empty fill token"));
        }
        Ok(resp.token)
    }
}

#[derive(Serialize)]
struct TagRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct TagResponse {
    spans: Vec<RemoteSpan>,
}

#[derive(Deserialize)]
struct RemoteSpan {
    class: String,
    start_char: usize,
    end_char: usize,
    #[allow(dead_code)]
    #[serde(default)]
    surface: String,
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Window {
    in_flight: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

impl Window {
    fn acquire(&self) -> WindowGuard<'_> {
        let mut n = self.in_flight.lock().expect("window poisoned");
        while *n >= self.limit {
            n = self.freed.wait(n).expect("window poisoned");
        }
        *n += 1;
        WindowGuard(self)
    }
}

struct WindowGuard<'a>(&'a Window);

impl Drop for WindowGuard<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().expect("window poisoned") -= 1;
        self.0.freed.notify_one();
    }
}

/// NER through the bridge. Character offsets (counted in Unicode scalar
/// values of the detokenized text) are mapped back to token indices.
#[derive(Debug)]
pub struct RemoteTagger {
    client: Client,
    window: Window,
}

impl RemoteTagger {
    pub fn new(endpoint: &str, max_in_flight: usize) -> Self {
        RemoteTagger {
            client: Client::new(endpoint),
            window: Window {
                in_flight: Mutex::new(0),
                freed: Condvar::new(),
                limit: max_in_flight.max(1),
            },
        }
    }

    pub(crate) fn candidates(&self, tokens: &[Token]) -> Result<Vec<Candidate>> {
        const PATH: &str = "/v1/tag";
        let (text, offsets) = detokenize_with_offsets(tokens);
        let resp: TagResponse = {
            let _slot = self.window.acquire();
            self.client.post(PATH, &TagRequest { text: &text })?
        };
        let n_chars = text.chars().count();
        let mut out = Vec::with_capacity(resp.spans.len());
        for s in resp.spans {
            if s.start_char >= s.end_char || s.end_char > n_chars {
                return Err(self.client.protocol(
                    PATH,
                    format!("span {}..{} outside text of {n_chars} chars", s.start_char, s.end_char),
                ));
            }
            let Ok(class) = s.class.parse::<PiiClass>() else {
                log::warn!("dropping span with unknown PII class {:?}", s.class);
                continue;
            };
            if let Some((start, end)) = char_range_to_tokens(&offsets, s.start_char, s.end_char) {
                out.push(Candidate { start, end, class });
            }
        }
        Ok(out)
    }
}
