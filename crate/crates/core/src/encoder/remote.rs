//! Client for the HTTP embedding service.
//!
//! The service returns subword-level states; word selection happens here so
//! the alignment seed discipline lives in one place.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::data::{EncodedSentence, Provenance};
use crate::numerics::Tensor;
use crate::preprocess::{align_subwords, project_states, AlignStrategy, AlignmentMap, MaskedSentence};
use crate::scalar::Scalar;

use super::EncoderError;

pub const REMOTE_PROVIDER: &str = "remote";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub tokens: Vec<String>,
    pub mask_tokens_are_reserved: bool,
}

/// Body of a `POST /embed` reply. `subword_states` excludes the special
/// tokens; `word_to_subwords` indexes into it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub d: usize,
    pub cls: Vec<f64>,
    pub subword_states: Vec<Vec<f64>>,
    pub word_to_subwords: Vec<Vec<usize>>,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub model_id: String,
    pub d: usize,
}

pub trait EmbedTransport {
    fn embed(&self, request: &EmbedRequest) -> Result<EmbedResponse, EncoderError>;
}

/// Blocking HTTP transport with a bounded retry budget.
pub struct HttpTransport {
    endpoint: String,
    agent: ureq::Agent,
    attempts: usize,
    backoff: Duration,
}

impl HttpTransport {
    pub fn new(endpoint: &str) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .http_status_as_error(false)
            .build();
        HttpTransport {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            agent: ureq::Agent::new_with_config(config),
            attempts: 3,
            backoff: Duration::from_millis(200),
        }
    }

    pub fn with_retry(mut self, attempts: usize, backoff: Duration) -> Self {
        self.attempts = attempts.max(1);
        self.backoff = backoff;
        self
    }

    pub fn health(&self) -> Result<HealthResponse, EncoderError> {
        let url = format!("{}/health", self.endpoint);
        let mut resp = self
            .agent
            .get(&url)
            .call()
            .map_err(|e| EncoderError::Transport(format!("{url}: {e}")))?;
        if resp.status().as_u16() != 200 {
            return Err(EncoderError::Transport(format!(
                "{url}: status {}",
                resp.status()
            )));
        }
        resp.body_mut()
            .read_json()
            .map_err(|e| EncoderError::Contract(format!("{url}: {e}")))
    }

    fn attempt(&self, url: &str, request: &EmbedRequest) -> Result<EmbedResponse, Attempt> {
        let mut resp = self
            .agent
            .post(url)
            .send_json(request)
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        match resp.status().as_u16() {
            200 => resp
                .body_mut()
                .read_json()
                .map_err(|e| Attempt::Fatal(EncoderError::Contract(format!("bad response body: {e}")))),
            s @ (500..=599 | 429) => Attempt::retry(format!("status {s}")),
            s => {
                let body = resp.body_mut().read_to_string().unwrap_or_default();
                Err(Attempt::Fatal(EncoderError::Service { status: s, body }))
            }
        }
    }
}

enum Attempt {
    Retry(String),
    Fatal(EncoderError),
}

impl Attempt {
    fn retry<T>(msg: String) -> Result<T, Attempt> {
        Err(Attempt::Retry(msg))
    }
}

impl EmbedTransport for HttpTransport {
    fn embed(&self, request: &EmbedRequest) -> Result<EmbedResponse, EncoderError> {
        let url = format!("{}/embed", self.endpoint);
        let mut last = String::new();
        for i in 0..self.attempts {
            if i > 0 {
                std::thread::sleep(self.backoff * i as u32);
            }
            match self.attempt(&url, request) {
                Ok(r) => return Ok(r),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => last = msg,
            }
        }
        Err(EncoderError::Transport(format!(
            "{url}: retry budget of {} attempts exhausted; last error: {last}",
            self.attempts
        )))
    }
}

/// Subword-level service output kept for per-epoch re-alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct SubwordStates<T> {
    pub states: Tensor<T>,
    pub cls: Vec<T>,
    pub word_to_subwords: Vec<Vec<usize>>,
    pub model_id: String,
}

impl<T: Scalar> SubwordStates<T> {
    /// Picks one subword per word with the given seed and projects to word rows.
    pub fn project(
        &self,
        words: &[String],
        seed: u64,
        strategy: AlignStrategy,
    ) -> Result<(EncodedSentence<T>, AlignmentMap), EncoderError> {
        let placeholders = vec![String::new(); self.states.rows()];
        let map = align_subwords(words, &placeholders, &self.word_to_subwords, seed, strategy)?;
        let enc = project_states(
            &self.states,
            self.cls.clone(),
            &map,
            Provenance {
                provider: format!("{REMOTE_PROVIDER}:{}", self.model_id),
                seed,
            },
        )?;
        Ok((enc, map))
    }
}

/// Checks a service reply against the configured width and the word count.
pub fn validate_response<T: Scalar>(
    resp: EmbedResponse,
    d_enc: usize,
    num_words: usize,
) -> Result<SubwordStates<T>, EncoderError> {
    if resp.d != d_enc {
        return Err(EncoderError::Contract(format!(
            "service declares d={} but d_enc is configured as {d_enc}",
            resp.d
        )));
    }
    if resp.cls.len() != resp.d {
        return Err(EncoderError::Contract(format!(
            "cls has {} values, declared d={}",
            resp.cls.len(),
            resp.d
        )));
    }
    if let Some((i, row)) = resp
        .subword_states
        .iter()
        .enumerate()
        .find(|(_, r)| r.len() != resp.d)
    {
        return Err(EncoderError::Contract(format!(
            "subword row {i} has {} values, declared d={}",
            row.len(),
            resp.d
        )));
    }
    if resp.word_to_subwords.len() != num_words {
        return Err(EncoderError::Contract(format!(
            "word_to_subwords covers {} words, sent {num_words}",
            resp.word_to_subwords.len()
        )));
    }
    let rows: Vec<Vec<T>> = resp
        .subword_states
        .iter()
        .map(|r| r.iter().map(|&v| T::of(v)).collect())
        .collect();
    let states = if rows.is_empty() {
        Tensor::zeros(&[0, resp.d])
    } else {
        Tensor::from_rows(&rows).map_err(|e| EncoderError::Contract(e.to_string()))?
    };
    Ok(SubwordStates {
        states,
        cls: resp.cls.iter().map(|&v| T::of(v)).collect(),
        word_to_subwords: resp.word_to_subwords,
        model_id: resp.model_id,
    })
}

/// Encoder backed by the embedding service.
pub struct RemoteEncoder<Tr> {
    transport: Tr,
    d_enc: usize,
    strategy: AlignStrategy,
}

impl<Tr: EmbedTransport> RemoteEncoder<Tr> {
    pub fn new(transport: Tr, d_enc: usize, strategy: AlignStrategy) -> Self {
        RemoteEncoder {
            transport,
            d_enc,
            strategy,
        }
    }

    pub fn d_enc(&self) -> usize {
        self.d_enc
    }

    pub fn strategy(&self) -> AlignStrategy {
        self.strategy
    }

    pub fn fetch<T: Scalar>(&self, masked: &MaskedSentence) -> Result<SubwordStates<T>, EncoderError> {
        let request = EmbedRequest {
            tokens: masked.tokens.clone(),
            mask_tokens_are_reserved: true,
        };
        let resp = self.transport.embed(&request)?;
        validate_response(resp, self.d_enc, masked.tokens.len())
    }

    /// Fetches subword states and reduces them to one row per word.
    pub fn remote_encode<T: Scalar>(
        &self,
        masked: &MaskedSentence,
        seed: u64,
    ) -> Result<(EncodedSentence<T>, AlignmentMap), EncoderError> {
        self.fetch(masked)?.project(&masked.tokens, seed, self.strategy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    struct Echo {
        d: usize,
        split: Vec<usize>,
        calls: Cell<usize>,
    }

    impl EmbedTransport for Echo {
        fn embed(&self, request: &EmbedRequest) -> Result<EmbedResponse, EncoderError> {
            self.calls.set(self.calls.get() + 1);
            let mut groups = Vec::new();
            let mut next = 0;
            for (w, _) in request.tokens.iter().enumerate() {
                let k = self.split.get(w).copied().unwrap_or(1);
                groups.push((next..next + k).collect());
                next += k;
            }
            Ok(EmbedResponse {
                d: self.d,
                cls: vec![0.5; self.d],
                subword_states: (0..next).map(|i| vec![i as f64; self.d]).collect(),
                word_to_subwords: groups,
                model_id: "echo".into(),
            })
        }
    }

    fn masked(s: &str) -> MaskedSentence {
        MaskedSentence {
            tokens: s.split_whitespace().map(String::from).collect(),
            subj_token: String::new(),
            obj_token: String::new(),
        }
    }

    #[test]
    fn pass_through_double() {
        let enc = RemoteEncoder::new(
            Echo {
                d: 4,
                split: vec![],
                calls: Cell::new(0),
            },
            4,
            AlignStrategy::Random,
        );
        let (e, map) = enc.remote_encode::<f64>(&masked("a b c"), 1).unwrap();
        assert_eq!(map.chosen, vec![0, 1, 2]);
        assert_eq!(e.word_states.row(2), &[2.0; 4]);
        assert_eq!(e.cls, vec![0.5; 4]);
        assert_eq!(e.provenance.provider, "remote:echo");
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let enc = RemoteEncoder::new(
            Echo {
                d: 768,
                split: vec![],
                calls: Cell::new(0),
            },
            1024,
            AlignStrategy::Random,
        );
        let err = enc.remote_encode::<f64>(&masked("a"), 0).unwrap_err();
        assert!(matches!(err, EncoderError::Contract(_)), "{err}");
    }

    #[test]
    fn split_word_gets_one_seeded_row() {
        // "arrested" splits into subwords 2 and 3
        let words = "he was arrested";
        let enc = RemoteEncoder::new(
            Echo {
                d: 2,
                split: vec![1, 1, 2],
                calls: Cell::new(0),
            },
            2,
            AlignStrategy::Random,
        );
        let m = masked(words);
        let (e, map) = enc.remote_encode::<f64>(&m, 42).unwrap();
        assert_eq!(e.num_words(), 3);
        assert_eq!(map.word_to_subwords[2], vec![2, 3]);
        // independent oracle: the same seeded draw made directly
        let oracle = align_subwords(
            &m.tokens,
            &vec![String::new(); 4],
            &map.word_to_subwords,
            42,
            AlignStrategy::Random,
        )
        .unwrap();
        assert_eq!(map.chosen, oracle.chosen);
        assert_eq!(e.word_states.row(2), &[map.chosen[2] as f64; 2]);
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let resp = EmbedResponse {
            d: 2,
            cls: vec![0.0, 0.0],
            subword_states: vec![vec![0.0, 0.0], vec![0.0]],
            word_to_subwords: vec![vec![0], vec![1]],
            model_id: "m".into(),
        };
        assert!(validate_response::<f64>(resp, 2, 2).is_err());
    }
}
