//! GCN over the dependency graph, span max-pooling, the projected pooled
//! features next to the sentence vector, and the relation classifier.
//!
//! All forward passes go through a [`Tape`], so the standalone helpers and
//! the training path share one implementation.

use crate::data::{ModelConfig, Span};
use crate::numerics::{ops, BackwardFault, NumericsError, Tape, Tensor, Var};
use crate::scalar::Scalar;

use super::{ModelError, ModelParams};

/// Pooled GCN features for the whole sentence, the subject and the object.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeatures<T> {
    pub h_sentence: Vec<T>,
    pub h_s: Vec<T>,
    pub h_o: Vec<T>,
}

/// `[h0 ; W_c · [h_sentence; h_s; h_o] + b_c]`
#[derive(Debug, Clone, PartialEq)]
pub struct FinalRepresentation<T> {
    pub h_final: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification<T> {
    pub logits: Vec<T>,
    pub probabilities: Vec<T>,
    pub loss: Option<T>,
}

impl<T: Scalar> Classification<T> {
    pub fn predicted(&self) -> usize {
        argmax(&self.logits)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, T::neg_infinity()), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Tape handles for every parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamVars {
    input_proj: Option<Var>,
    layers: Vec<(Var, Var)>,
    head_weight: Var,
    head_bias: Var,
    classifier_weight: Var,
    classifier_bias: Var,
}

impl ParamVars {
    pub fn register<T: Scalar>(tape: &mut Tape<T>, p: &ModelParams<T>) -> Result<Self, NumericsError> {
        let input_proj = p.input_proj.as_ref().map(|t| tape.leaf(t.clone())).transpose()?;
        let layers = p
            .gcn_layers
            .iter()
            .map(|l| Ok((tape.leaf(l.weight.clone())?, tape.leaf(l.bias.clone())?)))
            .collect::<Result<Vec<_>, NumericsError>>()?;
        Ok(ParamVars {
            input_proj,
            layers,
            head_weight: tape.leaf(p.head_weight.clone())?,
            head_bias: tape.leaf(p.head_bias.clone())?,
            classifier_weight: tape.leaf(p.classifier_weight.clone())?,
            classifier_bias: tape.leaf(p.classifier_bias.clone())?,
        })
    }

    /// Gradients laid out like `like`; parameters the output does not reach get zeros.
    fn collect<T: Scalar>(
        &self,
        grads: &mut crate::numerics::Gradients<T>,
        like: &ModelParams<T>,
    ) -> ModelParams<T> {
        let mut out = like.zeros_like();
        let mut take = |v: Var, dst: &mut Tensor<T>| {
            if let Some(g) = grads.take(v) {
                *dst = g;
            }
        };
        if let (Some(v), Some(dst)) = (self.input_proj, out.input_proj.as_mut()) {
            take(v, dst);
        }
        for (&(w, b), layer) in self.layers.iter().zip(out.gcn_layers.iter_mut()) {
            take(w, &mut layer.weight);
            take(b, &mut layer.bias);
        }
        take(self.head_weight, &mut out.head_weight);
        take(self.head_bias, &mut out.head_bias);
        take(self.classifier_weight, &mut out.classifier_weight);
        take(self.classifier_bias, &mut out.classifier_bias);
        out
    }
}

/// `relu(A · H · Wᵀ + b)`
pub fn tape_gcn_layer<T: Scalar>(
    tape: &mut Tape<T>,
    h_prev: Var,
    adjacency: Var,
    weight: Var,
    bias: Var,
) -> Result<Var, NumericsError> {
    let aggregated = tape.matmul(adjacency, h_prev)?;
    let wt = tape.transpose(weight)?;
    let z = tape.matmul(aggregated, wt)?;
    let z = tape.add_bias(z, bias)?;
    tape.relu(z)
}

pub fn tape_run_gcn<T: Scalar>(
    tape: &mut Tape<T>,
    h0: Var,
    adjacency: Var,
    vars: &ParamVars,
) -> Result<Var, NumericsError> {
    let mut h = match vars.input_proj {
        Some(p) => {
            let pt = tape.transpose(p)?;
            tape.matmul(h0, pt)?
        }
        None => h0,
    };
    for &(w, b) in &vars.layers {
        h = tape_gcn_layer(tape, h, adjacency, w, b)?;
    }
    Ok(h)
}

pub fn tape_pool<T: Scalar>(
    tape: &mut Tape<T>,
    g: Var,
    subj: Span,
    obj: Span,
) -> Result<(Var, Var, Var), NumericsError> {
    let n = tape.value(g).rows();
    let sentence = tape.max_pool(g, &vec![true; n])?;
    let s = tape.max_pool(g, &subj.mask(n))?;
    let o = tape.max_pool(g, &obj.mask(n))?;
    Ok((sentence, s, o))
}

pub fn tape_final_rep<T: Scalar>(
    tape: &mut Tape<T>,
    cls: Var,
    pooled: (Var, Var, Var),
    vars: &ParamVars,
) -> Result<Var, NumericsError> {
    let cat = tape.concat(&[pooled.0, pooled.1, pooled.2])?;
    let wt = tape.transpose(vars.head_weight)?;
    let projected = tape.matmul(cat, wt)?;
    let projected = tape.add_bias(projected, vars.head_bias)?;
    tape.concat(&[cls, projected])
}

pub fn tape_logits<T: Scalar>(
    tape: &mut Tape<T>,
    h_final: Var,
    vars: &ParamVars,
) -> Result<Var, NumericsError> {
    let wt = tape.transpose(vars.classifier_weight)?;
    let logits = tape.matmul(h_final, wt)?;
    tape.add_bias(logits, vars.classifier_bias)
}

/// Everything the head consumes for one sentence.
#[derive(Debug, Clone, Copy)]
pub struct HeadInput<'a, T> {
    pub cls: &'a [T],
    pub word_states: &'a Tensor<T>,
    /// Already normalized as the config asks.
    pub adjacency: &'a Tensor<T>,
    pub subj: Span,
    pub obj: Span,
}

fn check_input<T: Scalar>(config: &ModelConfig, input: &HeadInput<'_, T>) -> Result<(), ModelError> {
    let n = input.word_states.rows();
    if input.cls.len() != config.d_enc || input.word_states.cols() != config.d_enc {
        return Err(ModelError::Shape(format!(
            "encoder width {} / {} does not match d_enc {}",
            input.cls.len(),
            input.word_states.cols(),
            config.d_enc
        )));
    }
    if input.adjacency.shape() != [n, n] {
        return Err(ModelError::Shape(format!(
            "adjacency {:?} does not match {n} words",
            input.adjacency.shape()
        )));
    }
    for (name, span) in [("subject", input.subj), ("object", input.obj)] {
        if span.is_empty() || span.end >= n {
            return Err(ModelError::Shape(format!(
                "{name} span {span} invalid for {n} words"
            )));
        }
    }
    Ok(())
}

/// A recorded forward pass.
pub struct ForwardPass<T> {
    pub tape: Tape<T>,
    pub vars: ParamVars,
    pub gcn_out: Var,
    pub pooled: (Var, Var, Var),
    pub h_final: Var,
    pub logits: Var,
    pub loss: Option<Var>,
}

pub fn record_forward<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    input: &HeadInput<'_, T>,
    gold: Option<usize>,
    fault: Option<BackwardFault>,
) -> Result<ForwardPass<T>, ModelError> {
    check_input(config, input)?;
    if !params.matches(config) {
        return Err(ModelError::Shape("parameters do not match config".into()));
    }
    let mut tape = Tape::with_fault(fault);
    let vars = ParamVars::register(&mut tape, params)?;
    let h0 = tape.leaf(input.word_states.clone())?;
    let a = tape.leaf(input.adjacency.clone())?;
    let cls = tape.leaf(Tensor::row_vector(input.cls.to_vec()))?;
    let gcn_out = tape_run_gcn(&mut tape, h0, a, &vars)?;
    let pooled = tape_pool(&mut tape, gcn_out, input.subj, input.obj)?;
    let h_final = tape_final_rep(&mut tape, cls, pooled, &vars)?;
    let logits = tape_logits(&mut tape, h_final, &vars)?;
    let loss = gold.map(|g| tape.softmax_xent(logits, g)).transpose()?;
    Ok(ForwardPass {
        tape,
        vars,
        gcn_out,
        pooled,
        h_final,
        logits,
        loss,
    })
}

/// Logits, probabilities and (with `gold`) the loss for one sentence.
pub fn predict<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    input: &HeadInput<'_, T>,
    gold: Option<usize>,
) -> Result<Classification<T>, ModelError> {
    let pass = record_forward(params, config, input, gold, None)?;
    let logits = pass.tape.value(pass.logits).data().to_vec();
    Ok(Classification {
        probabilities: ops::softmax(&logits),
        loss: pass.loss.map(|l| pass.tape.value(l).data()[0]),
        logits,
    })
}

/// Loss, its gradient with respect to every parameter, and the smallest
/// distance from any ReLU or max-pool kink seen in the forward pass.
#[derive(Debug, Clone)]
pub struct LossAndGrad<T> {
    pub loss: T,
    pub grads: ModelParams<T>,
    pub kink_margin: T,
    pub predicted: usize,
}

pub fn loss_and_grad<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    input: &HeadInput<'_, T>,
    gold: usize,
    fault: Option<BackwardFault>,
) -> Result<LossAndGrad<T>, ModelError> {
    let pass = record_forward(params, config, input, Some(gold), fault)?;
    let loss_var = pass.loss.expect("gold given");
    let mut grads = pass.tape.backward(loss_var);
    Ok(LossAndGrad {
        loss: pass.tape.value(loss_var).data()[0],
        grads: pass.vars.collect(&mut grads, params),
        kink_margin: pass.tape.kink_margin(),
        predicted: argmax(pass.tape.value(pass.logits).data()),
    })
}

/// Standalone layer: `relu(A · H · Wᵀ + b)`.
pub fn gcn_layer<T: Scalar>(
    h_prev: &Tensor<T>,
    adjacency: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, ModelError> {
    let mut tape = Tape::new();
    let h = tape.leaf(h_prev.clone())?;
    let a = tape.leaf(adjacency.clone())?;
    let w = tape.leaf(weight.clone())?;
    let b = tape.leaf(bias.clone())?;
    let out = tape_gcn_layer(&mut tape, h, a, w, b)?;
    Ok(tape.value(out).clone())
}

/// Optional input projection followed by `config.layers` GCN layers.
pub fn run_gcn<T: Scalar>(
    h0: &Tensor<T>,
    adjacency: &Tensor<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<Tensor<T>, ModelError> {
    if !params.matches(config) {
        return Err(ModelError::Shape("parameters do not match config".into()));
    }
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params)?;
    let h = tape.leaf(h0.clone())?;
    let a = tape.leaf(adjacency.clone())?;
    let out = tape_run_gcn(&mut tape, h, a, &vars)?;
    Ok(tape.value(out).clone())
}

pub fn pool_features<T: Scalar>(
    g: &Tensor<T>,
    subj: Span,
    obj: Span,
) -> Result<PooledFeatures<T>, ModelError> {
    let mut tape = Tape::new();
    let gv = tape.leaf(g.clone())?;
    let (s, hs, ho) = tape_pool(&mut tape, gv, subj, obj)?;
    Ok(PooledFeatures {
        h_sentence: tape.value(s).data().to_vec(),
        h_s: tape.value(hs).data().to_vec(),
        h_o: tape.value(ho).data().to_vec(),
    })
}

pub fn final_rep<T: Scalar>(
    h0: &[T],
    pooled: &PooledFeatures<T>,
    params: &ModelParams<T>,
) -> Result<FinalRepresentation<T>, ModelError> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params)?;
    let cls = tape.leaf(Tensor::row_vector(h0.to_vec()))?;
    let s = tape.leaf(Tensor::row_vector(pooled.h_sentence.clone()))?;
    let hs = tape.leaf(Tensor::row_vector(pooled.h_s.clone()))?;
    let ho = tape.leaf(Tensor::row_vector(pooled.h_o.clone()))?;
    let out = tape_final_rep(&mut tape, cls, (s, hs, ho), &vars)?;
    Ok(FinalRepresentation {
        h_final: tape.value(out).data().to_vec(),
    })
}

pub fn classify<T: Scalar>(
    rep: &FinalRepresentation<T>,
    params: &ModelParams<T>,
    gold: Option<usize>,
) -> Result<Classification<T>, ModelError> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params)?;
    let h = tape.leaf(Tensor::row_vector(rep.h_final.clone()))?;
    let logits = tape_logits(&mut tape, h, &vars)?;
    let loss = gold.map(|g| tape.softmax_xent(logits, g)).transpose()?;
    let logits = tape.value(logits).data().to_vec();
    Ok(Classification {
        probabilities: ops::softmax(&logits),
        loss: loss.map(|l| tape.value(l).data()[0]),
        logits,
    })
}
