//! Dataset ingestion: TACRED-style JSON records and CoNLL-U parses.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{validate_example, Example, LabelRegistry, Span, Violation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub name: SplitName,
    pub examples: Vec<Example>,
}

impl CorpusSplit {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Where dependency heads come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HeadSource {
    /// The `stanford_head` field of each record.
    #[default]
    Bundled,
    /// Heads are attached afterwards from a CoNLL-U file.
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleDiagnostic {
    pub id: String,
    pub violations: Vec<Violation>,
}

impl fmt::Display for ExampleDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: ", self.id)?;
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

fn join_diagnostics(d: &[ExampleDiagnostic]) -> String {
    d.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" | ")
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON{}: {message}", .record.map(|r| format!(" in record {r}")).unwrap_or_default())]
    Json {
        record: Option<usize>,
        message: String,
    },
    #[error("schema error in record {record} ({id}): {message}")]
    Schema {
        record: usize,
        id: String,
        message: String,
    },
    #[error("duplicate example id {0:?}")]
    DuplicateId(String),
    #[error("{} invalid example(s): {}", .0.len(), join_diagnostics(.0))]
    Invalid(Vec<ExampleDiagnostic>),
    #[error("CoNLL-U parse error at line {line}: {message}")]
    Conllu { line: usize, message: String },
    #[error("alignment error for example {id}: {message}")]
    Alignment { id: String, message: String },
}

/// One record in the public TACRED JSON schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TacredRecord {
    id: String,
    #[serde(alias = "tokens")]
    token: Vec<String>,
    relation: String,
    subj_start: usize,
    subj_end: usize,
    obj_start: usize,
    obj_end: usize,
    subj_type: String,
    obj_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stanford_head: Option<Vec<usize>>,
}

fn read_file(path: &Path) -> Result<String, CorpusError> {
    std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn record_to_example(
    record: usize,
    r: TacredRecord,
    registry: &LabelRegistry,
    heads: HeadSource,
) -> Result<Example, CorpusError> {
    let schema = |message: String| CorpusError::Schema {
        record,
        id: r.id.clone(),
        message,
    };
    if r.subj_start > r.subj_end {
        return Err(schema(format!(
            "subj_start {} > subj_end {}",
            r.subj_start, r.subj_end
        )));
    }
    if r.obj_start > r.obj_end {
        return Err(schema(format!(
            "obj_start {} > obj_end {}",
            r.obj_start, r.obj_end
        )));
    }
    let relation = registry
        .relation(&r.relation)
        .map_err(|e| schema(e.to_string()))?
        .clone();
    let subj_ner = registry
        .ner(&r.subj_type)
        .map_err(|e| schema(e.to_string()))?
        .clone();
    let obj_ner = registry
        .ner(&r.obj_type)
        .map_err(|e| schema(e.to_string()))?
        .clone();
    let heads = match (heads, r.stanford_head) {
        (HeadSource::Bundled, Some(h)) => h,
        (HeadSource::Bundled, None) => {
            return Err(schema("missing stanford_head".into()));
        }
        (HeadSource::External, _) => Vec::new(),
    };
    Ok(Example {
        id: r.id,
        tokens: r.token,
        subj_span: Span::new(r.subj_start, r.subj_end),
        obj_span: Span::new(r.obj_start, r.obj_end),
        subj_ner,
        obj_ner,
        heads,
        relation,
    })
}

fn check_examples(examples: &[Example], require_heads: bool) -> Result<(), CorpusError> {
    let mut ids = HashSet::new();
    for ex in examples {
        if !ids.insert(ex.id.as_str()) {
            return Err(CorpusError::DuplicateId(ex.id.clone()));
        }
    }
    let bad: Vec<ExampleDiagnostic> = examples
        .iter()
        .filter_map(|ex| {
            let violations: Vec<Violation> = validate_example(ex)
                .into_iter()
                .filter(|v| require_heads || v.field != "heads")
                .collect();
            (!violations.is_empty()).then(|| ExampleDiagnostic {
                id: ex.id.clone(),
                violations,
            })
        })
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(CorpusError::Invalid(bad))
    }
}

/// Parses TACRED-style JSON text. With [`HeadSource::External`] the examples
/// come back with empty `heads`, awaiting [`attach_parses`].
pub fn parse_tacred_json(
    text: &str,
    name: SplitName,
    registry: &LabelRegistry,
    heads: HeadSource,
) -> Result<CorpusSplit, CorpusError> {
    let values: Vec<serde_json::Value> =
        serde_json::from_str(text).map_err(|e| CorpusError::Json {
            record: None,
            message: e.to_string(),
        })?;
    let mut examples = Vec::with_capacity(values.len());
    for (i, v) in values.into_iter().enumerate() {
        let record: TacredRecord = serde_json::from_value(v).map_err(|e| CorpusError::Json {
            record: Some(i),
            message: e.to_string(),
        })?;
        examples.push(record_to_example(i, record, registry, heads)?);
    }
    check_examples(&examples, heads == HeadSource::Bundled)?;
    Ok(CorpusSplit { name, examples })
}

pub fn load_tacred_json(
    path: &Path,
    name: SplitName,
    registry: &LabelRegistry,
    heads: HeadSource,
) -> Result<CorpusSplit, CorpusError> {
    parse_tacred_json(&read_file(path)?, name, registry, heads)
}

/// Serializes a split back into the TACRED JSON schema.
pub fn tacred_json_string(split: &CorpusSplit) -> String {
    let records: Vec<TacredRecord> = split
        .examples
        .iter()
        .map(|ex| TacredRecord {
            id: ex.id.clone(),
            token: ex.tokens.clone(),
            relation: ex.relation.name.clone(),
            subj_start: ex.subj_span.start,
            subj_end: ex.subj_span.end,
            obj_start: ex.obj_span.start,
            obj_end: ex.obj_span.end,
            subj_type: ex.subj_ner.name.clone(),
            obj_type: ex.obj_ner.name.clone(),
            stanford_head: (!ex.heads.is_empty()).then(|| ex.heads.clone()),
        })
        .collect();
    serde_json::to_string_pretty(&records).expect("records serialize")
}

pub fn write_tacred_json(path: &Path, split: &CorpusSplit) -> Result<(), CorpusError> {
    std::fs::write(path, tacred_json_string(split)).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Word forms and 1-based heads of one parsed sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Parse {
    pub tokens: Vec<String>,
    pub heads: Vec<usize>,
}

/// Reads CoNLL-U text. Multiword-token ranges (`3-4`) and empty nodes (`3.1`)
/// are skipped. Lines with exactly three columns are read as `ID FORM HEAD`.
pub fn parse_conllu(text: &str) -> Result<Vec<Parse>, CorpusError> {
    let mut out = Vec::new();
    let mut current = Parse {
        tokens: Vec::new(),
        heads: Vec::new(),
    };
    for (lineno, raw) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !current.tokens.is_empty() {
                out.push(std::mem::replace(
                    &mut current,
                    Parse {
                        tokens: Vec::new(),
                        heads: Vec::new(),
                    },
                ));
            }
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = if line.contains('\t') {
            line.split('\t').collect()
        } else {
            line.split_whitespace().collect()
        };
        let err = |message: String| CorpusError::Conllu {
            line: line_no,
            message,
        };
        let id = cols[0];
        if id.contains('-') || id.contains('.') {
            continue;
        }
        let head_col = match cols.len() {
            3 => 2,
            n if n >= 7 => 6,
            n => return Err(err(format!("expected 3 or at least 7 columns, found {n}"))),
        };
        let id: usize = id
            .parse()
            .map_err(|_| err(format!("bad token id {id:?}")))?;
        let expected = current.tokens.len() + 1;
        if id != expected {
            return Err(err(format!(
                "non-contiguous token id {id}, expected {expected}"
            )));
        }
        let head: usize = cols[head_col]
            .parse()
            .map_err(|_| err(format!("bad head {:?}", cols[head_col])))?;
        current.tokens.push(cols[1].to_string());
        current.heads.push(head);
    }
    if !current.tokens.is_empty() {
        out.push(current);
    }
    Ok(out)
}

pub fn load_conllu(path: &Path) -> Result<Vec<Parse>, CorpusError> {
    parse_conllu(&read_file(path)?)
}

/// Fills in `heads` from parses given in example order. Token forms must agree.
pub fn attach_parses(split: CorpusSplit, parses: Vec<Parse>) -> Result<CorpusSplit, CorpusError> {
    if split.examples.len() != parses.len() {
        let id = split
            .examples
            .get(parses.len().min(split.examples.len().saturating_sub(1)))
            .map(|e| e.id.clone())
            .unwrap_or_default();
        return Err(CorpusError::Alignment {
            id,
            message: format!(
                "{} examples but {} parses",
                split.examples.len(),
                parses.len()
            ),
        });
    }
    let mut examples = Vec::with_capacity(parses.len());
    for (mut ex, parse) in split.examples.into_iter().zip(parses) {
        if ex.tokens.len() != parse.tokens.len() {
            return Err(CorpusError::Alignment {
                id: ex.id,
                message: format!(
                    "{} tokens but parse has {}",
                    ex.tokens.len(),
                    parse.tokens.len()
                ),
            });
        }
        if let Some(i) = (0..ex.tokens.len()).find(|&i| ex.tokens[i] != parse.tokens[i]) {
            return Err(CorpusError::Alignment {
                id: ex.id.clone(),
                message: format!(
                    "token {i} is {:?} but parse has {:?}",
                    ex.tokens[i], parse.tokens[i]
                ),
            });
        }
        ex.heads = parse.heads;
        examples.push(ex);
    }
    check_examples(&examples, true)?;
    Ok(CorpusSplit {
        name: split.name,
        examples,
    })
}
