use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::ModelConfig;
use crate::numerics::{ParamSet, Tensor};
use crate::scalar::Scalar;

/// Weight and bias of one GCN layer. `weight` is `d_gcn × d_gcn` and acts on
/// column vectors, so the layer computes `A · H · weightᵀ + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Every trainable tensor of the head. Matrices are stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    /// `d_gcn × d_enc`; present only when the widths differ.
    pub input_proj: Option<Tensor<T>>,
    pub gcn_layers: Vec<GcnLayer<T>>,
    /// `d_ff × 3·d_gcn`
    pub head_weight: Tensor<T>,
    pub head_bias: Tensor<T>,
    /// `|R| × (d_enc + d_ff)`
    pub classifier_weight: Tensor<T>,
    pub classifier_bias: Tensor<T>,
}

/// Expected `(name, shape)` list for a configuration, in storage order.
pub fn param_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    if config.d_enc != config.d_gcn {
        out.push(("input_proj".to_string(), vec![config.d_gcn, config.d_enc]));
    }
    for l in 0..config.layers {
        out.push((format!("gcn.{l}.weight"), vec![config.d_gcn, config.d_gcn]));
        out.push((format!("gcn.{l}.bias"), vec![config.d_gcn]));
    }
    out.push(("head.weight".into(), vec![config.d_ff, 3 * config.d_gcn]));
    out.push(("head.bias".into(), vec![config.d_ff]));
    out.push((
        "classifier.weight".into(),
        vec![config.num_relations, config.d_enc + config.d_ff],
    ));
    out.push(("classifier.bias".into(), vec![config.num_relations]));
    out
}

fn glorot<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::of(rng.random_range(-limit..=limit)))
        .collect();
    Tensor::from_vec(vec![rows, cols], data).expect("rows * cols values")
}

impl<T: Scalar> ModelParams<T> {
    /// Glorot-uniform weights from `config.seed`, zero biases.
    pub fn init(config: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let input_proj =
            (config.d_enc != config.d_gcn).then(|| glorot(&mut rng, config.d_gcn, config.d_enc));
        let gcn_layers = (0..config.layers)
            .map(|_| GcnLayer {
                weight: glorot(&mut rng, config.d_gcn, config.d_gcn),
                bias: Tensor::zeros(&[config.d_gcn]),
            })
            .collect();
        let head_weight = glorot(&mut rng, config.d_ff, 3 * config.d_gcn);
        let classifier_weight = glorot(&mut rng, config.num_relations, config.d_enc + config.d_ff);
        ModelParams {
            input_proj,
            gcn_layers,
            head_weight,
            head_bias: Tensor::zeros(&[config.d_ff]),
            classifier_weight,
            classifier_bias: Tensor::zeros(&[config.num_relations]),
        }
    }

    /// Same structure, all zeros.
    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor<T>| Tensor::zeros(t.shape());
        ModelParams {
            input_proj: self.input_proj.as_ref().map(z),
            gcn_layers: self
                .gcn_layers
                .iter()
                .map(|l| GcnLayer {
                    weight: z(&l.weight),
                    bias: z(&l.bias),
                })
                .collect(),
            head_weight: z(&self.head_weight),
            head_bias: z(&self.head_bias),
            classifier_weight: z(&self.classifier_weight),
            classifier_bias: z(&self.classifier_bias),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        if let Some(p) = &self.input_proj {
            out.push(p);
        }
        for l in &self.gcn_layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.extend([
            &self.head_weight,
            &self.head_bias,
            &self.classifier_weight,
            &self.classifier_bias,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        if let Some(p) = &mut self.input_proj {
            out.push(p);
        }
        for l in &mut self.gcn_layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.extend([
            &mut self.head_weight,
            &mut self.head_bias,
            &mut self.classifier_weight,
            &mut self.classifier_bias,
        ]);
        out
    }

    /// Tensor names in the same order as [`Self::tensors`].
    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.input_proj.is_some() {
            out.push("input_proj".to_string());
        }
        for l in 0..self.gcn_layers.len() {
            out.push(format!("gcn.{l}.weight"));
            out.push(format!("gcn.{l}.bias"));
        }
        out.extend(
            ["head.weight", "head.bias", "classifier.weight", "classifier.bias"]
                .map(String::from),
        );
        out
    }

    /// Rebuilds params from tensors listed in [`param_layout`] order.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor<T>>) -> Option<Self> {
        let layout = param_layout(config);
        if tensors.len() != layout.len()
            || tensors
                .iter()
                .zip(&layout)
                .any(|(t, (_, shape))| t.shape() != shape.as_slice())
        {
            return None;
        }
        let mut it = tensors.into_iter();
        let input_proj = (config.d_enc != config.d_gcn).then(|| it.next().expect("counted"));
        let gcn_layers = (0..config.layers)
            .map(|_| GcnLayer {
                weight: it.next().expect("counted"),
                bias: it.next().expect("counted"),
            })
            .collect();
        Some(ModelParams {
            input_proj,
            gcn_layers,
            head_weight: it.next()?,
            head_bias: it.next()?,
            classifier_weight: it.next()?,
            classifier_bias: it.next()?,
        })
    }

    /// True when every tensor has the shape `config` calls for.
    pub fn matches(&self, config: &ModelConfig) -> bool {
        let layout = param_layout(config);
        let tensors = self.tensors();
        tensors.len() == layout.len()
            && tensors
                .iter()
                .zip(&layout)
                .all(|(t, (_, shape))| t.shape() == shape.as_slice())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn add_assign(&mut self, other: &ModelParams<T>) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors_mut() {
            t.scale(s);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            input_proj: self.input_proj.as_ref().map(|t| t.cast()),
            gcn_layers: self
                .gcn_layers
                .iter()
                .map(|l| GcnLayer {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
            head_weight: self.head_weight.cast(),
            head_bias: self.head_bias.cast(),
            classifier_weight: self.classifier_weight.cast(),
            classifier_bias: self.classifier_bias.cast(),
        }
    }

    fn locate(&self, mut i: usize) -> (usize, usize) {
        for (k, t) in self.tensors().iter().enumerate() {
            if i < t.len() {
                return (k, i);
            }
            i -= t.len();
        }
        panic!("flat index out of range")
    }
}

impl<T: Scalar> ParamSet<T> for ModelParams<T> {
    fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn value_at(&self, i: usize) -> T {
        let (k, j) = self.locate(i);
        self.tensors()[k].data()[j]
    }

    fn set_value_at(&mut self, i: usize, v: T) {
        let (k, j) = self.locate(i);
        self.tensors_mut()[k].data_mut()[j] = v;
    }

    fn describe(&self, i: usize) -> String {
        let (k, j) = self.locate(i);
        format!("{}[{j}]", self.names()[k])
    }
}
