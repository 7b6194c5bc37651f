//! Generated data: random dependency trees, random head instances, and a
//! planted-signal corpus whose labels are a deterministic function of one
//! marker word.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{CorpusSplit, SplitName};
use crate::data::{AdjacencyNorm, Example, LabelRegistry, ModelConfig, Span};
use crate::graph::{build_graph, normalize};
use crate::model::{HeadInput, ModelParams};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Uniform random recursive tree over `n` nodes with a random root, as
/// 1-based heads (0 marks the root).
pub fn random_heads<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut heads = vec![0; n];
    for k in 1..n {
        let parent = order[rng.random_range(0..k)];
        heads[order[k]] = parent + 1;
    }
    heads
}

pub const PLANTED_RELATIONS: [&str; 5] = [
    "no_relation",
    "planted:alpha",
    "planted:beta",
    "planted:gamma",
    "planted:delta",
];
pub const PLANTED_NER: [&str; 2] = ["PERSON", "ORGANIZATION"];
/// Marker word for each relation, same order as [`PLANTED_RELATIONS`].
pub const PLANTED_MARKERS: [&str; 5] = ["blan", "zorp", "quill", "vex", "mund"];

const FILLER: [&str; 16] = [
    "the", "a", "of", "in", "was", "said", "after", "near", "with", "by", "new", "old", "city",
    "group", "report", "year",
];

/// Head sized for the planted corpus.
pub fn planted_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_enc: 64,
        d_gcn: 64,
        d_ff: 64,
        num_relations: PLANTED_RELATIONS.len(),
        adjacency_normalization: AdjacencyNorm::Degree,
        seed,
        ..ModelConfig::default()
    }
}

pub fn planted_registry() -> LabelRegistry {
    LabelRegistry::from_names(&PLANTED_RELATIONS, "no_relation", &PLANTED_NER)
        .expect("static registry is valid")
}

/// `count` examples cycling through the relations. The marker sits at token 0
/// and is the root with exactly two dependents, the subject and object heads.
/// The first filler word hangs off the object; later fillers attach to a
/// random earlier filler.
pub fn planted_corpus(count: usize, seed: u64, name: SplitName) -> CorpusSplit {
    let registry = planted_registry();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..count)
        .map(|i| {
            let label = i % PLANTED_RELATIONS.len();
            let n = rng.random_range(6..=12);
            let subj_len = rng.random_range(1..=2);
            let subj = Span::new(1, subj_len);
            let obj_start = rng.random_range(subj_len + 1..n);
            let obj_end = rng.random_range(obj_start..n.min(obj_start + 2));
            let obj = Span::new(obj_start, obj_end);

            let mut tokens: Vec<String> = (0..n)
                .map(|_| FILLER[rng.random_range(0..FILLER.len())].to_string())
                .collect();
            tokens[0] = PLANTED_MARKERS[label].to_string();
            for k in subj.indices() {
                tokens[k] = format!("Subj{k}");
            }
            for k in obj.indices() {
                tokens[k] = format!("Obj{k}");
            }

            let mut heads = vec![0; n];
            let mut fillers = Vec::new();
            for k in 1..n {
                heads[k] = if k == subj.start || k == obj.start {
                    1
                } else if subj.contains(k) {
                    subj.start + 1
                } else if obj.contains(k) {
                    obj.start + 1
                } else if fillers.is_empty() {
                    obj.start + 1
                } else {
                    fillers[rng.random_range(0..fillers.len())] + 1
                };
                if !subj.contains(k) && !obj.contains(k) {
                    fillers.push(k);
                }
            }

            let ner = |r: &mut ChaCha8Rng| {
                registry
                    .ner(PLANTED_NER[r.random_range(0..PLANTED_NER.len())])
                    .expect("static name")
                    .clone()
            };
            Example {
                id: format!("planted-{seed}-{i}"),
                tokens,
                subj_span: subj,
                obj_span: obj,
                subj_ner: ner(&mut rng),
                obj_ner: ner(&mut rng),
                heads,
                relation: registry.relation_at(label).expect("in range").clone(),
            }
        })
        .collect();
    CorpusSplit { name, examples }
}

/// A random head input with matching parameters.
#[derive(Debug, Clone)]
pub struct HeadInstance<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
    pub cls: Vec<T>,
    pub word_states: Tensor<T>,
    pub heads: Vec<usize>,
    pub adjacency: Tensor<T>,
    pub subj: Span,
    pub obj: Span,
    pub gold: usize,
}

impl<T: Scalar> HeadInstance<T> {
    pub fn input(&self) -> HeadInput<'_, T> {
        HeadInput {
            cls: &self.cls,
            word_states: &self.word_states,
            adjacency: &self.adjacency,
            subj: self.subj,
            obj: self.obj,
        }
    }
}

fn uniform_tensor<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-scale..=scale))).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("sized")
}

/// Random tree, states, disjoint spans, gold label, and parameters for
/// `config` (shape fields are used as given; biases are drawn too so every
/// parameter is away from its initial zero).
pub fn random_head_instance<T: Scalar, R: Rng + ?Sized>(
    config: &ModelConfig,
    n: usize,
    rng: &mut R,
) -> HeadInstance<T> {
    assert!(n >= 2, "need room for two spans");
    let heads = random_heads(n, rng);
    let graph = build_graph(&heads, n).expect("random_heads yields a tree");
    let adjacency = normalize(&graph, config.adjacency_normalization);

    let mut positions: Vec<usize> = (0..n).collect();
    positions.shuffle(rng);
    let (a, b) = (positions[0].min(positions[1]), positions[0].max(positions[1]));
    let first = Span::new(a, rng.random_range(a..b));
    let second = Span::new(b, rng.random_range(b..n));
    let (subj, obj) = if rng.random_bool(0.5) { (first, second) } else { (second, first) };

    let mut params = ModelParams::init(&ModelConfig {
        seed: rng.random(),
        ..config.clone()
    });
    for l in &mut params.gcn_layers {
        l.bias = uniform_tensor(rng, &[config.d_gcn], 0.1);
    }
    params.head_bias = uniform_tensor(rng, &[config.d_ff], 0.1);
    params.classifier_bias = uniform_tensor(rng, &[config.num_relations], 0.1);

    HeadInstance {
        config: config.clone(),
        params,
        cls: uniform_tensor(rng, &[config.d_enc], 1.0).into_data(),
        word_states: uniform_tensor(rng, &[n, config.d_enc], 1.0),
        heads,
        adjacency,
        subj,
        obj,
        gold: rng.random_range(0..config.num_relations),
    }
}
