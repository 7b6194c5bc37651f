use dgrx_core::corpus::SplitName;
use dgrx_core::data::ModelConfig;
use dgrx_core::model::{checkpoint_bytes, ModelParams};
use dgrx_core::numerics::Tensor;
use dgrx_core::preprocess::MaskRegistry;
use dgrx_core::synthetic::{planted_corpus, planted_model_config, planted_registry};
use dgrx_core::trainer::{
    fit, prepare_hashed, train_epoch, OptimizerState, PreparedExample, TrainError, TrainOptions,
};

fn prepared(cfg: &ModelConfig, count: usize, seed: u64, name: SplitName) -> Vec<PreparedExample<f64>> {
    let masks = MaskRegistry::generate(&planted_registry());
    prepare_hashed(&planted_corpus(count, seed, name), &masks, cfg, 7).unwrap()
}

fn opts() -> TrainOptions {
    TrainOptions {
        batch_size: 8,
        max_epochs: 50,
        patience: 5,
        seed: 3,
        ..TrainOptions::default()
    }
}

fn small() -> ModelConfig {
    ModelConfig {
        d_enc: 8,
        d_gcn: 6,
        d_ff: 6,
        ..planted_model_config(5)
    }
}

#[test]
fn planted_corpus_is_learned() {
    let cfg = planted_model_config(11);
    let mut train = prepared(&cfg, 64, 1, SplitName::Train);
    let dev = prepared(&cfg, 40, 2, SplitName::Dev);
    let res = fit(&mut train, &dev, &cfg, &opts(), 0, |_| {}).unwrap();
    assert_eq!(res.best_f1, 1.0);
    assert!(res.best_epoch <= 50);
    assert!(res.log.iter().any(|l| l.train_accuracy >= 0.98));
}

#[test]
fn zero_learning_rate_leaves_params_bitwise() {
    let cfg = ModelConfig {
        lr_head: 0.0,
        ..small()
    };
    let train = prepared(&cfg, 10, 1, SplitName::Train);
    let mut params = ModelParams::init(&cfg);
    let before = params.clone();
    let mut opt = OptimizerState::new(&params, &cfg);
    let stats = train_epoch(&train, &mut params, &mut opt, &cfg, &opts(), 1).unwrap();
    assert!(stats.mean_loss.is_finite() && stats.mean_loss > 0.0);
    assert_eq!(checkpoint_bytes(&cfg, &params), checkpoint_bytes(&cfg, &before));
}

#[test]
fn single_example_overfits() {
    let cfg = small();
    let one = prepared(&cfg, 2, 4, SplitName::Train)[1..].to_vec();
    let mut params = ModelParams::init(&cfg);
    let mut opt = OptimizerState::new(&params, &cfg);
    let one_step = TrainOptions {
        batch_size: 1,
        ..opts()
    };
    let losses: Vec<f64> = (1..=200)
        .map(|e| {
            train_epoch(&one, &mut params, &mut opt, &cfg, &one_step, e)
                .unwrap()
                .mean_loss
        })
        .collect();
    let non_increasing = losses.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(non_increasing as f64 >= 0.95 * 199.0, "{non_increasing}/199");
    let last = dgrx_core::model::predict(&params, &cfg, &one[0].input(), Some(one[0].gold))
        .unwrap()
        .loss
        .unwrap();
    assert!(last < 0.01, "final loss {last}");
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let cfg = small();
    let run = || {
        let mut train = prepared(&cfg, 24, 1, SplitName::Train);
        let dev = prepared(&cfg, 10, 2, SplitName::Dev);
        let o = TrainOptions {
            max_epochs: 4,
            patience: 10,
            ..opts()
        };
        let r = fit(&mut train, &dev, &cfg, &o, 0, |_| {}).unwrap();
        (checkpoint_bytes(&cfg, &r.best), r.log)
    };
    let (a, log_a) = run();
    let (b, log_b) = run();
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
}

#[test]
fn zero_epochs_returns_initialization() {
    let cfg = small();
    let mut train = prepared(&cfg, 4, 1, SplitName::Train);
    let o = TrainOptions {
        max_epochs: 0,
        ..opts()
    };
    let r = fit(&mut train, &[], &cfg, &o, 0, |_| {}).unwrap();
    assert_eq!(r.best, ModelParams::init(&cfg));
    assert_eq!((r.best_epoch, r.epochs_run), (0, 0));
}

#[test]
fn frozen_model_stops_after_patience() {
    let cfg = ModelConfig {
        lr_head: 0.0,
        ..small()
    };
    let mut train = prepared(&cfg, 8, 1, SplitName::Train);
    let dev = prepared(&cfg, 8, 2, SplitName::Dev);
    let o = TrainOptions {
        patience: 1,
        ..opts()
    };
    let r = fit(&mut train, &dev, &cfg, &o, 0, |_| {}).unwrap();
    assert_eq!(r.epochs_run, 2);
    assert_eq!(r.best_epoch, 1);
}

#[test]
fn one_step_moves_every_tensor() {
    let cfg = ModelConfig {
        d_enc: 8,
        ..small()
    };
    let train = prepared(&cfg, 16, 1, SplitName::Train);
    let mut params = ModelParams::init(&cfg);
    let before = params.clone();
    let mut opt = OptimizerState::new(&params, &cfg);
    let o = TrainOptions {
        batch_size: 16,
        ..opts()
    };
    train_epoch(&train, &mut params, &mut opt, &cfg, &o, 1).unwrap();
    for ((name, a), b) in params.names().iter().zip(params.tensors()).zip(before.tensors()) {
        assert_ne!(a, b, "{name} did not move");
    }
}

#[test]
fn non_finite_input_names_the_example() {
    let cfg = small();
    let mut train = prepared(&cfg, 3, 1, SplitName::Train);
    let n = train[1].encoded.word_states.rows();
    train[1].encoded.word_states = Tensor::full(&[n, cfg.d_enc], f64::NAN);
    let mut params = ModelParams::init(&cfg);
    let mut opt = OptimizerState::new(&params, &cfg);
    let err = train_epoch(&train, &mut params, &mut opt, &cfg, &opts(), 1).unwrap_err();
    match err {
        TrainError::Divergence { id, .. } => assert_eq!(id, train[1].id),
        other => panic!("unexpected {other}"),
    }
}
