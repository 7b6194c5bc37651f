//! Mini-batch Adam training of the head with dev-F1 model selection.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusSplit, HeadSource};
use crate::data::{EncodedSentence, Example, ModelConfig, Span};
use crate::encoder::{hashed_encode, EncoderError, SubwordStates};
use crate::eval::{score, EvalError};
use crate::graph::{build_graph, normalize, TreeError};
use crate::model::{loss_and_grad, predict, HeadInput, ModelError, ModelParams};
use crate::numerics::{NumericsError, Tensor};
use crate::preprocess::{alignment_seed, mask_entities, AlignStrategy, MaskRegistry, PreprocessError};
use crate::scalar::Scalar;
use crate::seed::combine;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}: non-finite loss or gradient on example {id:?}")]
    Divergence { id: String, epoch: usize },
    #[error("example {id:?}: {source}")]
    Model {
        id: String,
        #[source]
        source: ModelError,
    },
    #[error("example {id:?}: {source}")]
    Tree {
        id: String,
        #[source]
        source: TreeError,
    },
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("training config error: {0}")]
    Config(String),
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments for the head. The encoder group rate is carried for
/// completeness; nothing reads it while the encoder is frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub step: u64,
    pub lr_head: f64,
    pub lr_encoder: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ModelParams<T>, config: &ModelConfig) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            lr_head: config.lr_head,
            lr_encoder: config.lr_encoder,
        }
    }

    pub fn apply(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>) {
        self.step += 1;
        let (b1, b2) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2));
        let one = T::one();
        let c1 = one - b1.powi(self.step as i32);
        let c2 = one - b2.powi(self.step as i32);
        let lr = T::of(self.lr_head);
        let eps = T::of(ADAM_EPS);
        let update = self.lr_head != 0.0;
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                if update {
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// One example ready for the head: masked, encoded, graphed.
#[derive(Debug, Clone)]
pub struct PreparedExample<T> {
    pub id: String,
    pub words: Vec<String>,
    pub encoded: EncodedSentence<T>,
    pub adjacency: Tensor<T>,
    pub subj: Span,
    pub obj: Span,
    pub gold: usize,
    /// Kept when the alignment may be redrawn per epoch.
    pub subwords: Option<SubwordStates<T>>,
}

impl<T: Scalar> PreparedExample<T> {
    pub fn input(&self) -> HeadInput<'_, T> {
        HeadInput {
            cls: &self.encoded.cls,
            word_states: &self.encoded.word_states,
            adjacency: &self.adjacency,
            subj: self.subj,
            obj: self.obj,
        }
    }
}

pub fn prepare_example<T: Scalar>(
    ex: &Example,
    words: Vec<String>,
    encoded: EncodedSentence<T>,
    subwords: Option<SubwordStates<T>>,
    config: &ModelConfig,
) -> Result<PreparedExample<T>, TrainError> {
    if encoded.num_words() != ex.len() || encoded.d_enc() != config.d_enc {
        return Err(TrainError::Model {
            id: ex.id.clone(),
            source: ModelError::Shape(format!(
                "encoded sentence is {}×{}, expected {}×{}",
                encoded.num_words(),
                encoded.d_enc(),
                ex.len(),
                config.d_enc
            )),
        });
    }
    let graph = build_graph(&ex.heads, ex.len()).map_err(|e| TrainError::Tree {
        id: ex.id.clone(),
        source: e,
    })?;
    Ok(PreparedExample {
        id: ex.id.clone(),
        words,
        encoded,
        adjacency: normalize(&graph, config.adjacency_normalization),
        subj: ex.subj_span,
        obj: ex.obj_span,
        gold: ex.relation.index,
        subwords,
    })
}

/// Masks and encodes a split with the hashed provider.
pub fn prepare_hashed<T: Scalar>(
    split: &CorpusSplit,
    masks: &MaskRegistry,
    config: &ModelConfig,
    seed: u64,
) -> Result<Vec<PreparedExample<T>>, TrainError> {
    split
        .examples
        .par_iter()
        .map(|ex| {
            let masked = mask_entities(ex, masks)?;
            let enc = hashed_encode(&masked, config.d_enc, seed);
            prepare_example(ex, masked.tokens, enc, None, config)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub alignment: AlignStrategy,
    pub resample_alignment: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            batch_size: 32,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            alignment: AlignStrategy::Random,
            resample_alignment: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

fn resample<T: Scalar>(
    examples: &mut [PreparedExample<T>],
    opts: &TrainOptions,
    epoch: usize,
) -> Result<(), TrainError> {
    examples.par_iter_mut().try_for_each(|ex| {
        if let Some(sw) = &ex.subwords {
            let seed = alignment_seed(opts.seed, &ex.id, Some(epoch as u64));
            ex.encoded = sw.project(&ex.words, seed, opts.alignment)?.0;
        }
        Ok(())
    })
}

/// One pass over `examples` in a shuffled order fixed by `(seed, epoch)`.
/// Gradients inside a batch are computed in parallel and summed in batch
/// order, so the result does not depend on thread scheduling.
pub fn train_epoch<T: Scalar>(
    examples: &[PreparedExample<T>],
    params: &mut ModelParams<T>,
    opt: &mut OptimizerState<T>,
    config: &ModelConfig,
    opts: &TrainOptions,
    epoch: usize,
) -> Result<EpochStats, TrainError> {
    if opts.batch_size == 0 {
        return Err(TrainError::Config("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(combine(&[opts.seed, epoch as u64])));

    let mut total_loss = 0.0;
    let mut correct = 0usize;
    for batch in order.chunks(opts.batch_size) {
        let results: Vec<_> = batch
            .par_iter()
            .map(|&i| {
                let ex = &examples[i];
                loss_and_grad(params, config, &ex.input(), ex.gold, None).map_err(|e| match e {
                    ModelError::Numerics(NumericsError::NonFinite(_)) => TrainError::Divergence {
                        id: ex.id.clone(),
                        epoch,
                    },
                    e => TrainError::Model {
                        id: ex.id.clone(),
                        source: e,
                    },
                })
            })
            .collect();
        let mut sum = params.zeros_like();
        for (&i, r) in batch.iter().zip(results) {
            let r = r?;
            if !r.loss.is_finite() || !r.grads.all_finite() {
                return Err(TrainError::Divergence {
                    id: examples[i].id.clone(),
                    epoch,
                });
            }
            total_loss += r.loss.as_f64();
            correct += usize::from(r.predicted == examples[i].gold);
            sum.add_assign(&r.grads);
        }
        sum.scale(T::of(1.0 / batch.len() as f64));
        opt.apply(params, &sum);
    }
    let n = examples.len().max(1) as f64;
    Ok(EpochStats {
        mean_loss: total_loss / n,
        train_accuracy: correct as f64 / n,
    })
}

pub fn predict_all<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    examples: &[PreparedExample<T>],
) -> Result<Vec<usize>, TrainError> {
    examples
        .par_iter()
        .map(|ex| {
            predict(params, config, &ex.input(), None)
                .map(|c| c.predicted())
                .map_err(|e| TrainError::Model {
                    id: ex.id.clone(),
                    source: e,
                })
        })
        .collect()
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub dev_precision: f64,
    pub dev_recall: f64,
    pub dev_f1: f64,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct FitResult<T> {
    pub best: ModelParams<T>,
    /// 0 when no epoch ran and `best` is the initialization.
    pub best_epoch: usize,
    pub best_f1: f64,
    pub epochs_run: usize,
    pub log: Vec<EpochLog>,
}

/// Trains up to `max_epochs`, keeping the parameters with the highest dev F1
/// and stopping after `patience` epochs without improvement.
pub fn fit<T: Scalar>(
    train: &mut [PreparedExample<T>],
    dev: &[PreparedExample<T>],
    config: &ModelConfig,
    opts: &TrainOptions,
    no_relation: usize,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FitResult<T>, TrainError> {
    config.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    let mut params = ModelParams::init(config);
    let mut opt = OptimizerState::new(&params, config);
    let mut best = params.clone();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut log = Vec::new();
    let golds: Vec<usize> = dev.iter().map(|e| e.gold).collect();

    for epoch in 1..=opts.max_epochs {
        if opts.resample_alignment {
            resample(train, opts, epoch)?;
        }
        let stats = train_epoch(train, &mut params, &mut opt, config, opts, epoch)?;
        let preds = predict_all(&params, config, dev)?;
        let s = score(&golds, &preds, no_relation)?;
        let improved = s.f1 > best_f1;
        if improved {
            best_f1 = s.f1;
            best = params.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
        }
        let entry = EpochLog {
            epoch,
            loss: stats.mean_loss,
            train_accuracy: stats.train_accuracy,
            dev_precision: s.precision,
            dev_recall: s.recall,
            dev_f1: s.f1,
            improved,
        };
        on_epoch(&entry);
        log.push(entry);
        if !improved && stale >= opts.patience {
            break;
        }
    }
    Ok(FitResult {
        best,
        best_epoch,
        best_f1,
        epochs_run: log.len(),
        log,
    })
}

/// Which encoder feeds the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Hashed,
    Cache,
    Remote,
}

impl std::str::FromStr for ProviderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hashed" => Ok(ProviderKind::Hashed),
            "cache" => Ok(ProviderKind::Cache),
            "remote" => Ok(ProviderKind::Remote),
            other => Err(format!("unknown provider {other:?}")),
        }
    }
}

/// Training config file. Relative paths resolve against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub provider: ProviderKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    /// Cache file for the `cache` provider (one file covering both splits).
    #[serde(default)]
    pub cache: Option<PathBuf>,
    #[serde(default)]
    pub alignment: AlignStrategy,
    #[serde(default)]
    pub resample_alignment: bool,
    pub train: PathBuf,
    pub dev: PathBuf,
    /// Relation/NER registry; the bundled TACRED registry when absent.
    #[serde(default)]
    pub labels: Option<PathBuf>,
    /// Entity mask registry; generated from the labels when absent.
    #[serde(default)]
    pub masks: Option<PathBuf>,
    #[serde(default)]
    pub heads: HeadSource,
    #[serde(default)]
    pub train_parses: Option<PathBuf>,
    #[serde(default)]
    pub dev_parses: Option<PathBuf>,
}

fn default_batch() -> usize {
    32
}
fn default_epochs() -> usize {
    100
}
fn default_patience() -> usize {
    5
}

impl TrainConfig {
    pub fn options(&self) -> TrainOptions {
        TrainOptions {
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            alignment: self.alignment,
            resample_alignment: self.resample_alignment,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if self.provider == ProviderKind::Cache && self.cache.is_none() {
            return Err(TrainError::Config("provider cache needs a cache path".into()));
        }
        if self.provider == ProviderKind::Remote && self.endpoint.is_none() {
            return Err(TrainError::Config("provider remote needs an endpoint".into()));
        }
        if self.heads == HeadSource::External
            && (self.train_parses.is_none() || self.dev_parses.is_none())
        {
            return Err(TrainError::Config(
                "heads = external needs train_parses and dev_parses".into(),
            ));
        }
        Ok(())
    }

    /// Rewrites relative paths as relative to `base`.
    pub fn resolve_paths(&mut self, base: &std::path::Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.train);
        fix(&mut self.dev);
        for p in [
            &mut self.cache,
            &mut self.labels,
            &mut self.masks,
            &mut self.train_parses,
            &mut self.dev_parses,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = ModelConfig {
            layers: 1,
            d_enc: 2,
            d_gcn: 2,
            d_ff: 2,
            num_relations: 2,
            lr_head: 0.01,
            ..ModelConfig::default()
        };
        let mut p = ModelParams::<f64>::init(&cfg);
        let before = p.clone();
        let mut g = p.zeros_like();
        g.classifier_bias.data_mut()[0] = 3.0;
        g.classifier_bias.data_mut()[1] = -0.5;
        let mut opt = OptimizerState::new(&p, &cfg);
        opt.apply(&mut p, &g);
        let d0 = p.classifier_bias.data()[0] - before.classifier_bias.data()[0];
        let d1 = p.classifier_bias.data()[1] - before.classifier_bias.data()[1];
        assert!((d0 + 0.01).abs() < 1e-9);
        assert!((d1 - 0.01).abs() < 1e-9);
        assert_eq!(p.head_weight, before.head_weight);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn config_defaults() {
        let c: TrainConfig = serde_json::from_str(r#"{"train": "t.json", "dev": "d.json"}"#).unwrap();
        assert_eq!((c.batch_size, c.max_epochs, c.patience), (32, 100, 5));
        assert_eq!(c.model.d_gcn, 400);
        assert_eq!(c.provider, ProviderKind::Hashed);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"train":"t","dev":"d","bogus":1}"#).is_err());
    }
}
