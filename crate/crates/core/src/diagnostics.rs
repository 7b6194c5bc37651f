//! Finite-difference check of the full head on a random instance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ConfigError, ModelConfig};
use crate::model::{loss_and_grad, predict, ModelError};
use crate::numerics::{grad_check, BackwardFault, GradCheckReport};
use crate::scalar::Scalar;
use crate::synthetic::random_head_instance;

/// Pass threshold on the maximum relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum CheckError {
    #[error("gradient check config error: {0}")]
    Config(String),
    #[error("no instance with kink margin >= {min_margin} in {attempts} draws")]
    NoSmoothInstance { min_margin: f64, attempts: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<ConfigError> for CheckError {
    fn from(e: ConfigError) -> Self {
        CheckError::Config(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadCheckOptions {
    pub tokens: usize,
    pub d_enc: usize,
    pub d_gcn: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub relations: usize,
    pub eps: f64,
    pub seed: u64,
    /// Instances with any ReLU input or max-pool gap closer than this are
    /// redrawn.
    pub min_margin: f64,
    pub max_attempts: usize,
}

impl Default for HeadCheckOptions {
    fn default() -> Self {
        HeadCheckOptions {
            tokens: 5,
            d_enc: 8,
            d_gcn: 6,
            d_ff: 6,
            layers: 2,
            relations: 5,
            eps: 1e-5,
            seed: 0,
            min_margin: 1e-3,
            max_attempts: 10_000,
        }
    }
}

impl HeadCheckOptions {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            d_enc: self.d_enc,
            d_gcn: self.d_gcn,
            d_ff: self.d_ff,
            num_relations: self.relations,
            seed: self.seed,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), CheckError> {
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(CheckError::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if self.tokens < 2 {
            return Err(CheckError::Config("need at least 2 tokens".into()));
        }
        if self.max_attempts == 0 {
            return Err(CheckError::Config("max_attempts must be positive".into()));
        }
        self.model_config().validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct HeadCheckOutcome {
    pub report: GradCheckReport,
    pub attempts: usize,
    pub kink_margin: f64,
    pub loss: f64,
}

impl HeadCheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < GRADCHECK_TOLERANCE
    }
}

/// Draws instances until one is at least `min_margin` from every kink, then
/// compares the analytic gradient (optionally with an injected fault) to
/// central differences.
pub fn head_gradcheck<T: Scalar>(
    opts: &HeadCheckOptions,
    fault: Option<BackwardFault>,
) -> Result<HeadCheckOutcome, CheckError> {
    opts.validate()?;
    let config = opts.model_config();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for attempt in 1..=opts.max_attempts {
        let inst = random_head_instance::<T, _>(&config, opts.tokens, &mut rng);
        let clean = loss_and_grad(&inst.params, &config, &inst.input(), inst.gold, None)?;
        if clean.kink_margin.as_f64() < opts.min_margin {
            continue;
        }
        let analytic = match fault {
            None => clean.grads,
            Some(f) => loss_and_grad(&inst.params, &config, &inst.input(), inst.gold, Some(f))?.grads,
        };
        let input = inst.input();
        let report = grad_check(
            |p| {
                predict(p, &config, &input, Some(inst.gold))
                    .ok()
                    .and_then(|c| c.loss)
                    .unwrap_or_else(T::nan)
            },
            &inst.params,
            &analytic,
            opts.eps,
        );
        return Ok(HeadCheckOutcome {
            report,
            attempts: attempt,
            kink_margin: clean.kink_margin.as_f64(),
            loss: clean.loss.as_f64(),
        });
    }
    Err(CheckError::NoSmoothInstance {
        min_margin: opts.min_margin,
        attempts: opts.max_attempts,
    })
}
