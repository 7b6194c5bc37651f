//! Micro-averaged scoring with `no_relation` excluded, plus per-distance
//! bucket reports.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusSplit;
use crate::data::{Example, LabelRegistry, Span};

/// Buckets whose lower edge is at least this far count as long range.
pub const LONG_RANGE_MIN: usize = 11;
pub const DEFAULT_BUCKETS: &str = "0-7,8-10,11+";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{golds} gold labels but {preds} predictions")]
    Length { golds: usize, preds: usize },
    #[error("bucket config error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("prediction file error: {0}")]
    Format(String),
    #[error("prediction for {id:?} names unknown label {label:?}")]
    UnknownLabel { id: String, label: String },
    #[error("no prediction for example {0:?}")]
    MissingPrediction(String),
}

/// TACRED-style tallies. `correct` counts exact matches on non-`no_relation`
/// gold labels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Counts {
    pub fn merge(self, other: Counts) -> Counts {
        Counts {
            correct: self.correct + other.correct,
            predicted: self.predicted + other.predicted,
            gold: self.gold + other.gold,
        }
    }

    pub fn score(self) -> Score {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.correct, self.predicted);
        let recall = ratio(self.correct, self.gold);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Score {
            precision,
            recall,
            f1,
            counts: self,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
}

pub fn tally(golds: &[usize], preds: &[usize], no_relation: usize) -> Result<Counts, EvalError> {
    if golds.len() != preds.len() {
        return Err(EvalError::Length {
            golds: golds.len(),
            preds: preds.len(),
        });
    }
    Ok(golds
        .par_iter()
        .zip(preds)
        .map(|(&g, &p)| Counts {
            correct: usize::from(g == p && g != no_relation),
            predicted: usize::from(p != no_relation),
            gold: usize::from(g != no_relation),
        })
        .reduce(Counts::default, Counts::merge))
}

pub fn score(golds: &[usize], preds: &[usize], no_relation: usize) -> Result<Score, EvalError> {
    Ok(tally(golds, preds, no_relation)?.score())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMetric {
    /// Tokens strictly between the nearer boundaries; 0 for adjacent or
    /// overlapping spans.
    #[default]
    Between,
    /// Absolute difference of the span start positions.
    StartOffset,
}

impl FromStr for DistanceMetric {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "between" => Ok(DistanceMetric::Between),
            "start-offset" => Ok(DistanceMetric::StartOffset),
            other => Err(EvalError::Config(format!(
                "unknown distance metric {other:?} (expected between or start-offset)"
            ))),
        }
    }
}

pub fn span_distance(a: Span, b: Span, metric: DistanceMetric) -> usize {
    match metric {
        DistanceMetric::Between => {
            let (first, second) = if a.start <= b.start { (a, b) } else { (b, a) };
            second.start.saturating_sub(first.end + 1)
        }
        DistanceMetric::StartOffset => a.start.abs_diff(b.start),
    }
}

pub fn entity_distance(ex: &Example) -> usize {
    span_distance(ex.subj_span, ex.obj_span, DistanceMetric::Between)
}

/// Inclusive distance range; `hi == None` means unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bucket {
    pub lo: usize,
    pub hi: Option<usize>,
}

impl Bucket {
    pub fn contains(&self, d: usize) -> bool {
        d >= self.lo && self.hi.is_none_or(|hi| d <= hi)
    }

    pub fn is_long_range(&self) -> bool {
        self.lo >= LONG_RANGE_MIN
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.hi {
            Some(hi) => write!(f, "{}-{hi}", self.lo),
            None => write!(f, "{}+", self.lo),
        }
    }
}

/// Parses `"0-7,8-10,11+"`; bucket order in the string does not matter but
/// together they must cover `[0, ∞)` exactly once.
pub fn parse_buckets(spec: &str) -> Result<Vec<Bucket>, EvalError> {
    let bad = |part: &str| EvalError::Config(format!("cannot parse bucket {part:?}"));
    let mut buckets = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bucket = if let Some(lo) = part.strip_suffix('+') {
            Bucket {
                lo: lo.trim().parse().map_err(|_| bad(part))?,
                hi: None,
            }
        } else if let Some((lo, hi)) = part.split_once('-') {
            let lo: usize = lo.trim().parse().map_err(|_| bad(part))?;
            let hi: usize = hi.trim().parse().map_err(|_| bad(part))?;
            if hi < lo {
                return Err(EvalError::Config(format!("bucket {part:?} is reversed")));
            }
            Bucket { lo, hi: Some(hi) }
        } else {
            let d: usize = part.parse().map_err(|_| bad(part))?;
            Bucket { lo: d, hi: Some(d) }
        };
        buckets.push(bucket);
    }
    validate_buckets(&mut buckets)?;
    Ok(buckets)
}

/// Sorts by lower edge and checks the buckets partition `[0, ∞)`.
pub fn validate_buckets(buckets: &mut [Bucket]) -> Result<(), EvalError> {
    if buckets.is_empty() {
        return Err(EvalError::Config("no buckets given".into()));
    }
    buckets.sort_by_key(|b| b.lo);
    let mut next = 0usize;
    for (i, b) in buckets.iter().enumerate() {
        if i > 0 && b.lo < next {
            return Err(EvalError::Config(format!(
                "bucket {b} overlaps {}",
                buckets[i - 1]
            )));
        }
        if b.lo > next {
            return Err(EvalError::Config(format!(
                "distances {next}-{} are not covered",
                b.lo - 1
            )));
        }
        match b.hi {
            Some(hi) => next = hi + 1,
            None if i + 1 < buckets.len() => {
                return Err(EvalError::Config(format!(
                    "bucket {b} overlaps {}",
                    buckets[i + 1]
                )))
            }
            None => return Ok(()),
        }
    }
    Err(EvalError::Config(format!(
        "distances from {next} up are not covered"
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub range: String,
    pub bucket: Bucket,
    pub count: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
    pub buckets: Vec<BucketRow>,
    /// Mean of the per-bucket F1 over buckets starting at or beyond
    /// [`LONG_RANGE_MIN`]; `None` when no bucket qualifies.
    pub long_range_avg_f1: Option<f64>,
    /// F1 of the pooled counts over the same buckets.
    pub long_range_pooled_f1: Option<f64>,
}

pub fn bucket_report(
    golds: &[usize],
    preds: &[usize],
    distances: &[usize],
    buckets: &[Bucket],
    no_relation: usize,
) -> Result<EvalReport, EvalError> {
    if distances.len() != golds.len() {
        return Err(EvalError::Length {
            golds: golds.len(),
            preds: distances.len(),
        });
    }
    let mut sorted = buckets.to_vec();
    validate_buckets(&mut sorted)?;
    let overall = score(golds, preds, no_relation)?;

    let rows: Vec<BucketRow> = sorted
        .iter()
        .map(|&bucket| {
            let (g, p): (Vec<usize>, Vec<usize>) = distances
                .iter()
                .zip(golds.iter().zip(preds))
                .filter(|(d, _)| bucket.contains(**d))
                .map(|(_, (&g, &p))| (g, p))
                .unzip();
            let s = score(&g, &p, no_relation).expect("equal lengths");
            BucketRow {
                range: bucket.to_string(),
                bucket,
                count: g.len(),
                precision: s.precision,
                recall: s.recall,
                f1: s.f1,
                counts: s.counts,
            }
        })
        .collect();

    let long: Vec<&BucketRow> = rows.iter().filter(|r| r.bucket.is_long_range()).collect();
    let (long_range_avg_f1, long_range_pooled_f1) = if long.is_empty() {
        (None, None)
    } else {
        let avg = long.iter().map(|r| r.f1).sum::<f64>() / long.len() as f64;
        let pooled = long
            .iter()
            .fold(Counts::default(), |acc, r| acc.merge(r.counts))
            .score()
            .f1;
        (Some(avg), Some(pooled))
    };

    Ok(EvalReport {
        examples: golds.len(),
        precision: overall.precision,
        recall: overall.recall,
        f1: overall.f1,
        counts: overall.counts,
        buckets: rows,
        long_range_avg_f1,
        long_range_pooled_f1,
    })
}

/// Scores a split given predicted relation indices in example order.
pub fn evaluate_split(
    split: &CorpusSplit,
    preds: &[usize],
    registry: &LabelRegistry,
    buckets: &[Bucket],
    metric: DistanceMetric,
) -> Result<EvalReport, EvalError> {
    let golds: Vec<usize> = split.examples.iter().map(|e| e.relation.index).collect();
    let distances: Vec<usize> = split
        .examples
        .iter()
        .map(|e| span_distance(e.subj_span, e.obj_span, metric))
        .collect();
    bucket_report(&golds, preds, &distances, buckets, registry.no_relation().index)
}

impl EvalReport {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One `overall` row followed by one row per bucket.
    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["scope", "range", "count", "precision", "recall", "f1"])
            .expect("in-memory write");
        let overall = [
            "overall".to_string(),
            "all".to_string(),
            self.examples.to_string(),
            self.precision.to_string(),
            self.recall.to_string(),
            self.f1.to_string(),
        ];
        w.write_record(&overall).expect("in-memory write");
        for r in &self.buckets {
            w.write_record(&[
                "bucket".to_string(),
                r.range.clone(),
                r.count.to_string(),
                r.precision.to_string(),
                r.recall.to_string(),
                r.f1.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub label: String,
}

pub fn predictions_json(preds: &[Prediction]) -> String {
    serde_json::to_string_pretty(preds).expect("predictions serialize")
}

pub fn parse_predictions(text: &str) -> Result<Vec<Prediction>, EvalError> {
    serde_json::from_str(text).map_err(|e| EvalError::Format(e.to_string()))
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_predictions(&text)
}

/// Maps a prediction file onto `split` order as relation indices.
pub fn align_predictions(
    split: &CorpusSplit,
    preds: &[Prediction],
    registry: &LabelRegistry,
) -> Result<Vec<usize>, EvalError> {
    let by_id: HashMap<&str, &str> = preds
        .iter()
        .map(|p| (p.id.as_str(), p.label.as_str()))
        .collect();
    split
        .examples
        .iter()
        .map(|ex| {
            let label = by_id
                .get(ex.id.as_str())
                .ok_or_else(|| EvalError::MissingPrediction(ex.id.clone()))?;
            registry
                .relation(label)
                .map(|r| r.index)
                .map_err(|_| EvalError::UnknownLabel {
                    id: ex.id.clone(),
                    label: label.to_string(),
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const NO: usize = 0;

    #[test]
    fn worked_example() {
        let s = score(&[1, 1, NO, 2], &[1, 2, 2, 2], NO).unwrap();
        assert_eq!(s.precision, 0.5);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.f1 - 4.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_empty_prediction_sets() {
        let s = score(&[1, 2, NO], &[1, 2, NO], NO).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        let s = score(&[1, 2, NO], &[NO, NO, NO], NO).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(score(&[1], &[1, 2], NO), Err(EvalError::Length { .. })));
    }

    #[test]
    fn distances() {
        let d = |a: (usize, usize), b: (usize, usize)| {
            span_distance(Span::new(a.0, a.1), Span::new(b.0, b.1), DistanceMetric::Between)
        };
        assert_eq!(d((0, 1), (2, 3)), 0);
        assert_eq!(d((0, 0), (5, 6)), 4);
        assert_eq!(d((5, 6), (0, 0)), 4);
        assert_eq!(
            span_distance(Span::new(5, 6), Span::new(0, 0), DistanceMetric::StartOffset),
            5
        );
    }

    #[test]
    fn bucket_parsing() {
        let b = parse_buckets(DEFAULT_BUCKETS).unwrap();
        assert_eq!(b.len(), 3);
        assert_eq!(b[2], Bucket { lo: 11, hi: None });
        assert_eq!(parse_buckets("11+, 0-10").unwrap()[0].lo, 0);
        assert!(matches!(parse_buckets("0-7,7-10,11+"), Err(EvalError::Config(_))));
        assert!(matches!(parse_buckets("0-7,9+"), Err(EvalError::Config(_))));
        assert!(matches!(parse_buckets("0-7"), Err(EvalError::Config(_))));
        assert!(matches!(parse_buckets("0+,5+"), Err(EvalError::Config(_))));
        assert!(matches!(parse_buckets("x"), Err(EvalError::Config(_))));
    }

    #[test]
    fn single_bucket_replicates_overall() {
        let golds = [1, 2, NO, 3, 1];
        let preds = [1, NO, 2, 3, 2];
        let r = bucket_report(&golds, &preds, &[0, 3, 9, 20, 1], &parse_buckets("0+").unwrap(), NO)
            .unwrap();
        assert_eq!(r.buckets[0].f1, r.f1);
        assert_eq!(r.buckets[0].counts, r.counts);
        assert_eq!(r.long_range_avg_f1, None);
    }

    #[test]
    fn empty_bucket_is_zero() {
        let r = bucket_report(&[1], &[1], &[0], &parse_buckets(DEFAULT_BUCKETS).unwrap(), NO).unwrap();
        assert_eq!(r.buckets[2].count, 0);
        assert_eq!(r.buckets[2].f1, 0.0);
        assert_eq!(r.long_range_avg_f1, Some(0.0));
    }

    #[test]
    fn csv_has_overall_and_bucket_rows() {
        let r = bucket_report(&[1, 2], &[1, 2], &[0, 12], &parse_buckets(DEFAULT_BUCKETS).unwrap(), NO)
            .unwrap();
        let csv = r.to_csv_string();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(1).unwrap().starts_with("overall,all,2,1"));
    }
}
