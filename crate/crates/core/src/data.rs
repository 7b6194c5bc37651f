//! Core domain types: examples, label and NER registries, model configuration.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{check_tree, TreeError};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Inclusive range of word indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn single(i: usize) -> Self {
        Span { start: i, end: i }
    }

    pub fn is_empty(&self) -> bool {
        self.start > self.end
    }

    pub fn len(&self) -> usize {
        if self.is_empty() {
            0
        } else {
            self.end - self.start + 1
        }
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i <= self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        !self.is_empty() && !other.is_empty() && self.start <= other.end && other.start <= self.end
    }

    pub fn indices(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }

    /// Boolean row mask of length `n`.
    pub fn mask(&self, n: usize) -> Vec<bool> {
        (0..n).map(|i| self.contains(i)).collect()
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NerType {
    pub name: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RelationLabel {
    pub name: String,
    pub index: usize,
    pub is_no_relation: bool,
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("registry io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("registry is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{kind} indices must be a bijection onto [0, {len}); offending index {index}")]
    BadIndex {
        kind: &'static str,
        len: usize,
        index: usize,
    },
    #[error("duplicate {kind} name {name:?}")]
    Duplicate { kind: &'static str, name: String },
    #[error("no_relation label {0:?} is not among the relations")]
    MissingNoRelation(String),
    #[error("unknown relation label {0:?}")]
    UnknownRelation(String),
    #[error("unknown NER type {0:?}")]
    UnknownNer(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    index: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RegistryFile {
    no_relation: String,
    relations: Vec<Entry>,
    ner_types: Vec<Entry>,
}

const TACRED_REGISTRY: &str = include_str!("../data/tacred_registry.json");

/// Closed, ordered relation-label and NER-type sets.
#[derive(Debug, Clone)]
pub struct LabelRegistry {
    relations: Vec<RelationLabel>,
    ner_types: Vec<NerType>,
    no_relation: usize,
    relation_by_name: HashMap<String, usize>,
    ner_by_name: HashMap<String, usize>,
}

fn ordered(kind: &'static str, entries: Vec<Entry>) -> Result<Vec<Entry>, RegistryError> {
    let len = entries.len();
    let mut slots: Vec<Option<Entry>> = vec![None; len];
    for e in entries {
        if e.index >= len || slots[e.index].is_some() {
            return Err(RegistryError::BadIndex {
                kind,
                len,
                index: e.index,
            });
        }
        let idx = e.index;
        slots[idx] = Some(e);
    }
    let out: Vec<Entry> = slots.into_iter().map(|s| s.expect("filled")).collect();
    let mut seen = HashMap::new();
    for e in &out {
        if seen.insert(e.name.clone(), e.index).is_some() {
            return Err(RegistryError::Duplicate {
                kind,
                name: e.name.clone(),
            });
        }
    }
    Ok(out)
}

impl LabelRegistry {
    pub fn from_json_str(text: &str) -> Result<Self, RegistryError> {
        let file: RegistryFile = serde_json::from_str(text)?;
        let relations = ordered("relation", file.relations)?;
        let ner_types = ordered("NER type", file.ner_types)?;
        let no_relation = relations
            .iter()
            .position(|e| e.name == file.no_relation)
            .ok_or_else(|| RegistryError::MissingNoRelation(file.no_relation.clone()))?;
        let relations: Vec<RelationLabel> = relations
            .into_iter()
            .map(|e| RelationLabel {
                is_no_relation: e.index == no_relation,
                name: e.name,
                index: e.index,
            })
            .collect();
        let ner_types: Vec<NerType> = ner_types
            .into_iter()
            .map(|e| NerType {
                name: e.name,
                index: e.index,
            })
            .collect();
        Ok(Self::assemble(relations, ner_types, no_relation))
    }

    pub fn load(path: &Path) -> Result<Self, RegistryError> {
        let text = std::fs::read_to_string(path).map_err(|source| RegistryError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    /// The 42-label relation set and 17 NER types of the TACRED corpus.
    pub fn tacred() -> Self {
        Self::from_json_str(TACRED_REGISTRY).expect("bundled registry is valid")
    }

    /// Builds a registry from names in index order. `no_relation` must be one
    /// of `relations`.
    pub fn from_names(
        relations: &[&str],
        no_relation: &str,
        ner_types: &[&str],
    ) -> Result<Self, RegistryError> {
        let file = RegistryFile {
            no_relation: no_relation.to_string(),
            relations: relations
                .iter()
                .enumerate()
                .map(|(index, n)| Entry {
                    name: n.to_string(),
                    index,
                })
                .collect(),
            ner_types: ner_types
                .iter()
                .enumerate()
                .map(|(index, n)| Entry {
                    name: n.to_string(),
                    index,
                })
                .collect(),
        };
        Self::from_json_str(&serde_json::to_string(&file)?)
    }

    fn assemble(relations: Vec<RelationLabel>, ner_types: Vec<NerType>, no_relation: usize) -> Self {
        let relation_by_name = relations
            .iter()
            .map(|r| (r.name.clone(), r.index))
            .collect();
        let ner_by_name = ner_types.iter().map(|t| (t.name.clone(), t.index)).collect();
        LabelRegistry {
            relations,
            ner_types,
            no_relation,
            relation_by_name,
            ner_by_name,
        }
    }

    pub fn to_json_string(&self) -> String {
        let file = RegistryFile {
            no_relation: self.relations[self.no_relation].name.clone(),
            relations: self
                .relations
                .iter()
                .map(|r| Entry {
                    name: r.name.clone(),
                    index: r.index,
                })
                .collect(),
            ner_types: self
                .ner_types
                .iter()
                .map(|t| Entry {
                    name: t.name.clone(),
                    index: t.index,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("registry serializes")
    }

    pub fn relations(&self) -> &[RelationLabel] {
        &self.relations
    }

    pub fn ner_types(&self) -> &[NerType] {
        &self.ner_types
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn no_relation(&self) -> &RelationLabel {
        &self.relations[self.no_relation]
    }

    pub fn relation(&self, name: &str) -> Result<&RelationLabel, RegistryError> {
        self.relation_by_name
            .get(name)
            .map(|&i| &self.relations[i])
            .ok_or_else(|| RegistryError::UnknownRelation(name.to_string()))
    }

    pub fn relation_at(&self, index: usize) -> Option<&RelationLabel> {
        self.relations.get(index)
    }

    pub fn ner(&self, name: &str) -> Result<&NerType, RegistryError> {
        self.ner_by_name
            .get(name)
            .map(|&i| &self.ner_types[i])
            .ok_or_else(|| RegistryError::UnknownNer(name.to_string()))
    }
}

/// One sentence with two marked entities, its parse and its gold relation.
///
/// `heads` are 1-based parent indices with 0 marking the root; an empty
/// `heads` means the parse has not been attached yet.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub tokens: Vec<String>,
    pub subj_span: Span,
    pub obj_span: Span,
    pub subj_ner: NerType,
    pub obj_ner: NerType,
    pub heads: Vec<usize>,
    pub relation: RelationLabel,
}

impl Example {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A broken `Example` invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub rule: String,
}

impl Violation {
    fn new(field: &'static str, rule: impl Into<String>) -> Self {
        Violation {
            field,
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

pub fn validate_example(ex: &Example) -> Vec<Violation> {
    let n = ex.tokens.len();
    let mut out = Vec::new();
    if n == 0 {
        out.push(Violation::new("tokens", "empty sentence"));
    }
    for (field, span) in [("subj_span", ex.subj_span), ("obj_span", ex.obj_span)] {
        if span.is_empty() {
            out.push(Violation::new(field, format!("empty span {span}")));
        } else if span.end >= n {
            out.push(Violation::new(
                field,
                format!("span {span} out of range for {n} tokens"),
            ));
        }
    }
    if ex.subj_span.overlaps(&ex.obj_span) {
        out.push(Violation::new("obj_span", "overlapping spans"));
    }
    if ex.heads.len() != n {
        out.push(Violation::new(
            "heads",
            format!("length {} does not match {} tokens", ex.heads.len(), n),
        ));
    } else if n > 0 {
        if let Err(e) = check_tree(&ex.heads) {
            let rule = match e {
                TreeError::NoRoot => "no root".to_string(),
                other => other.to_string(),
            };
            out.push(Violation::new("heads", rule));
        }
    }
    out
}

/// Which provider produced an [`EncodedSentence`], and with what seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub provider: String,
    pub seed: u64,
}

/// Encoder output for one sentence: the sentence vector `h0` and one
/// contextual row per word.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSentence<T> {
    pub cls: Vec<T>,
    pub word_states: Tensor<T>,
    pub provenance: Provenance,
}

impl<T: Scalar> EncodedSentence<T> {
    pub fn d_enc(&self) -> usize {
        self.cls.len()
    }

    pub fn num_words(&self) -> usize {
        self.word_states.rows()
    }

    pub fn is_finite(&self) -> bool {
        self.cls.iter().all(|v| v.is_finite()) && self.word_states.all_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AdjacencyNorm {
    #[default]
    None,
    Degree,
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid model config: {0}")]
pub struct ConfigError(pub String);

/// Architecture and optimisation settings of the relation head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Number of GCN layers.
    pub layers: usize,
    /// Width of the contextual encoder states.
    pub d_enc: usize,
    pub d_gcn: usize,
    /// Output width of the projection over pooled GCN features.
    pub d_ff: usize,
    pub num_relations: usize,
    pub activation: Activation,
    pub adjacency_normalization: AdjacencyNorm,
    pub seed: u64,
    /// Learning rate of the encoder group. Inert: the encoder is frozen.
    pub lr_encoder: f64,
    pub lr_head: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            d_enc: 1024,
            d_gcn: 400,
            d_ff: 400,
            num_relations: 42,
            activation: Activation::Relu,
            adjacency_normalization: AdjacencyNorm::None,
            seed: 0,
            lr_encoder: 3e-5,
            lr_head: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.layers < 1 {
            return Err(ConfigError("layers must be >= 1".into()));
        }
        for (name, d) in [
            ("d_enc", self.d_enc),
            ("d_gcn", self.d_gcn),
            ("d_ff", self.d_ff),
            ("num_relations", self.num_relations),
        ] {
            if d < 1 {
                return Err(ConfigError(format!("{name} must be >= 1")));
            }
        }
        // lr_head = 0 is accepted to freeze training; negative or NaN is not.
        if !(self.lr_encoder > 0.0) {
            return Err(ConfigError("lr_encoder must be > 0".into()));
        }
        if !(self.lr_head >= 0.0) || !self.lr_head.is_finite() {
            return Err(ConfigError("lr_head must be finite and >= 0".into()));
        }
        Ok(())
    }
}
