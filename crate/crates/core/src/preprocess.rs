//! Entity masking with reserved tokens, and subword-to-word alignment.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{EncodedSentence, Example, LabelRegistry, Provenance};
use crate::numerics::Tensor;
use crate::scalar::Scalar;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Subj,
    Obj,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Subj => "subj",
            Role::Obj => "obj",
        })
    }
}

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("no reserved token for ({role}, {ner})")]
    MissingMask { role: Role, ner: String },
    #[error("mask registry: {0}")]
    Registry(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("internal error: {0}")]
    Internal(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MaskEntry {
    role: Role,
    ner: String,
    token: String,
}

/// Reserved token per (role, NER type).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskRegistry {
    tokens: BTreeMap<(Role, String), String>,
}

impl MaskRegistry {
    /// Assigns `[unused_k]`, counting from 1: subject tokens first in NER
    /// index order, then object tokens in the same order.
    pub fn generate(labels: &LabelRegistry) -> Self {
        let mut tokens = BTreeMap::new();
        let mut k = 1;
        for role in [Role::Subj, Role::Obj] {
            for ner in labels.ner_types() {
                tokens.insert((role, ner.name.clone()), format!("[unused_{k}]"));
                k += 1;
            }
        }
        MaskRegistry { tokens }
    }

    pub fn from_entries<'a>(
        entries: impl IntoIterator<Item = (Role, &'a str, &'a str)>,
    ) -> Result<Self, PreprocessError> {
        let mut tokens = BTreeMap::new();
        for (role, ner, token) in entries {
            if tokens
                .insert((role, ner.to_string()), token.to_string())
                .is_some()
            {
                return Err(PreprocessError::Registry(format!(
                    "duplicate entry for ({role}, {ner})"
                )));
            }
        }
        Ok(MaskRegistry { tokens })
    }

    pub fn from_json_str(text: &str) -> Result<Self, PreprocessError> {
        let entries: Vec<MaskEntry> =
            serde_json::from_str(text).map_err(|e| PreprocessError::Registry(e.to_string()))?;
        Self::from_entries(
            entries
                .iter()
                .map(|e| (e.role, e.ner.as_str(), e.token.as_str())),
        )
    }

    pub fn load(path: &Path) -> Result<Self, PreprocessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PreprocessError::Registry(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        let entries: Vec<MaskEntry> = self
            .tokens
            .iter()
            .map(|((role, ner), token)| MaskEntry {
                role: *role,
                ner: ner.clone(),
                token: token.clone(),
            })
            .collect();
        serde_json::to_string_pretty(&entries).expect("entries serialize")
    }

    pub fn token(&self, role: Role, ner: &str) -> Result<&str, PreprocessError> {
        self.tokens
            .get(&(role, ner.to_string()))
            .map(String::as_str)
            .ok_or_else(|| PreprocessError::MissingMask {
                role,
                ner: ner.to_string(),
            })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Tokens after entity replacement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSentence {
    pub tokens: Vec<String>,
    pub subj_token: String,
    pub obj_token: String,
}

pub fn mask_entities(ex: &Example, registry: &MaskRegistry) -> Result<MaskedSentence, PreprocessError> {
    let subj_token = registry.token(Role::Subj, &ex.subj_ner.name)?.to_string();
    let obj_token = registry.token(Role::Obj, &ex.obj_ner.name)?.to_string();
    let tokens = ex
        .tokens
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if ex.subj_span.contains(i) {
                subj_token.clone()
            } else if ex.obj_span.contains(i) {
                obj_token.clone()
            } else {
                t.clone()
            }
        })
        .collect();
    Ok(MaskedSentence {
        tokens,
        subj_token,
        obj_token,
    })
}

/// How one subword is picked to stand for a multi-subword word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AlignStrategy {
    /// Uniform draw from the word's subwords.
    #[default]
    Random,
    /// Always the first subword.
    First,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentMap {
    pub word_to_subwords: Vec<Vec<usize>>,
    pub chosen: Vec<usize>,
}

fn check_partition(word_to_subwords: &[Vec<usize>], num_subwords: usize) -> Result<(), PreprocessError> {
    let mut next = 0;
    for (w, pieces) in word_to_subwords.iter().enumerate() {
        if pieces.is_empty() {
            return Err(PreprocessError::Alignment(format!("word {w} has no subwords")));
        }
        for &p in pieces {
            if p != next {
                return Err(PreprocessError::Alignment(format!(
                    "word {w}: subword {p} breaks the in-order partition (expected {next})"
                )));
            }
            next += 1;
        }
    }
    if next != num_subwords {
        return Err(PreprocessError::Alignment(format!(
            "partition covers {next} of {num_subwords} subwords"
        )));
    }
    Ok(())
}

/// Picks one subword per word. `word_to_subwords` must partition
/// `0..subwords.len()` in order.
pub fn align_subwords(
    words: &[String],
    subwords: &[String],
    word_to_subwords: &[Vec<usize>],
    rng_seed: u64,
    strategy: AlignStrategy,
) -> Result<AlignmentMap, PreprocessError> {
    if words.len() != word_to_subwords.len() {
        return Err(PreprocessError::Alignment(format!(
            "{} words but {} subword groups",
            words.len(),
            word_to_subwords.len()
        )));
    }
    check_partition(word_to_subwords, subwords.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let chosen = word_to_subwords
        .iter()
        .map(|pieces| match (strategy, pieces.len()) {
            (_, 1) | (AlignStrategy::First, _) => pieces[0],
            (AlignStrategy::Random, k) => pieces[rng.random_range(0..k)],
        })
        .collect();
    Ok(AlignmentMap {
        word_to_subwords: word_to_subwords.to_vec(),
        chosen,
    })
}

/// Alignment stream seed for one example, optionally redrawn per epoch.
pub fn alignment_seed(global: u64, example_id: &str, epoch: Option<u64>) -> u64 {
    let base = seed::example_seed(global, example_id);
    match epoch {
        Some(e) => seed::combine(&[base, e]),
        None => base,
    }
}

/// Selects the chosen subword row for every word.
pub fn project_states<T: Scalar>(
    subword_states: &Tensor<T>,
    cls: Vec<T>,
    map: &AlignmentMap,
    provenance: Provenance,
) -> Result<EncodedSentence<T>, PreprocessError> {
    let rows = subword_states.rows();
    let d = subword_states.cols();
    let mut data = Vec::with_capacity(map.chosen.len() * d);
    for &c in &map.chosen {
        if c >= rows {
            return Err(PreprocessError::Internal(format!(
                "chosen subword {c} out of range for {rows} rows"
            )));
        }
        data.extend_from_slice(subword_states.row(c));
    }
    let word_states = Tensor::from_vec(vec![map.chosen.len(), d], data)
        .map_err(|e| PreprocessError::Internal(e.to_string()))?;
    Ok(EncodedSentence {
        cls,
        word_states,
        provenance,
    })
}
