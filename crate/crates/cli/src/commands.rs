use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use dgrx_core::corpus::{
    attach_parses, load_conllu, load_tacred_json, write_tacred_json, CorpusSplit, HeadSource,
    SplitName,
};
use dgrx_core::data::LabelRegistry;
use dgrx_core::diagnostics::{head_gradcheck, HeadCheckOptions, GRADCHECK_TOLERANCE};
use dgrx_core::encoder::{cache_write, CacheReader, FloatWidth, HttpTransport, RemoteEncoder};
use dgrx_core::eval::{evaluate_split, parse_buckets, predictions_json, DistanceMetric, Prediction};
use dgrx_core::model::{load_checkpoint, save_checkpoint};
use dgrx_core::numerics::BackwardFault;
use dgrx_core::pipeline::{encode_split, prepare_split, Provider};
use dgrx_core::preprocess::{AlignStrategy, MaskRegistry};
use dgrx_core::seed::combine;
use dgrx_core::synthetic::{planted_corpus, planted_model_config, planted_registry};
use dgrx_core::trainer::{fit, predict_all, PreparedExample, ProviderKind, TrainConfig};

use crate::error::{CliError, EXIT_CHECK_FAILED, EXIT_OK};
use crate::{
    DistanceArg, EmbedArgs, EvaluateArgs, GradcheckArgs, ProviderArg, ProviderFlags, SynthArgs,
    TrainArgs, WidthArg,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.dgck";
pub const LOG_FILE: &str = "train_log.jsonl";

fn require(what: &str, path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::missing(what, path))
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn read_config(path: &Path) -> Result<TrainConfig, CliError> {
    require("config", path)?;
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let mut cfg: TrainConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(cfg)
}

/// Flag > DGRX_SEED > config; the seed drives both initialization and data order.
fn apply_flags(cfg: &mut TrainConfig, flags: &ProviderFlags) {
    if let Some(p) = flags.provider {
        cfg.provider = match p {
            ProviderArg::Hashed => ProviderKind::Hashed,
            ProviderArg::Cache => ProviderKind::Cache,
            ProviderArg::Remote => ProviderKind::Remote,
        };
    }
    if let Some(e) = &flags.endpoint {
        cfg.endpoint = Some(e.clone());
    }
    if let Some(s) = flags.seed {
        cfg.seed = s;
        cfg.model.seed = s;
    }
}

fn load_labels(path: Option<&Path>) -> Result<LabelRegistry, CliError> {
    match path {
        None => Ok(LabelRegistry::tacred()),
        Some(p) => {
            require("label registry", p)?;
            LabelRegistry::load(p).map_err(|e| CliError::usage(e.to_string()))
        }
    }
}

fn load_masks(path: Option<&Path>, labels: &LabelRegistry) -> Result<MaskRegistry, CliError> {
    match path {
        None => Ok(MaskRegistry::generate(labels)),
        Some(p) => {
            require("mask registry", p)?;
            Ok(MaskRegistry::load(p)?)
        }
    }
}

fn load_split(
    path: &Path,
    name: SplitName,
    labels: &LabelRegistry,
    parses: Option<&Path>,
) -> Result<CorpusSplit, CliError> {
    require("data", path)?;
    match parses {
        None => Ok(load_tacred_json(path, name, labels, HeadSource::Bundled)?),
        Some(p) => {
            require("parses", p)?;
            let split = load_tacred_json(path, name, labels, HeadSource::External)?;
            Ok(attach_parses(split, load_conllu(p)?)?)
        }
    }
}

/// Owns whatever the chosen provider needs for the lifetime of a command.
enum Backend {
    Hashed(u64),
    Cache(CacheReader),
    Remote(RemoteEncoder<HttpTransport>, u64, bool),
}

impl Backend {
    fn open(
        kind: ProviderKind,
        seed: u64,
        cache: Option<&Path>,
        endpoint: Option<&str>,
        d_enc: usize,
        alignment: AlignStrategy,
        keep_subwords: bool,
    ) -> Result<Self, CliError> {
        Ok(match kind {
            ProviderKind::Hashed => Backend::Hashed(seed),
            ProviderKind::Cache => {
                let path = cache.ok_or_else(|| CliError::usage("the cache provider needs --cache"))?;
                require("cache", path)?;
                Backend::Cache(CacheReader::open(path)?)
            }
            ProviderKind::Remote => {
                let url =
                    endpoint.ok_or_else(|| CliError::usage("the remote provider needs --endpoint"))?;
                let transport = HttpTransport::new(url).with_retry(3, Duration::from_millis(250));
                Backend::Remote(
                    RemoteEncoder::new(transport, d_enc, alignment),
                    seed,
                    keep_subwords,
                )
            }
        })
    }

    fn provider(&self) -> Provider<'_, HttpTransport> {
        match self {
            Backend::Hashed(seed) => Provider::Hashed { seed: *seed },
            Backend::Cache(reader) => Provider::Cache(reader),
            Backend::Remote(encoder, seed, keep) => Provider::Remote {
                encoder,
                seed: *seed,
                keep_subwords: *keep,
            },
        }
    }
}

pub fn train(args: TrainArgs) -> Result<i32, CliError> {
    let mut cfg = read_config(&args.config)?;
    apply_flags(&mut cfg, &args.provider);
    if let Some(c) = args.cache {
        cfg.cache = Some(c);
    }
    cfg.validate()?;
    require("data", &cfg.train)?;
    require("data", &cfg.dev)?;

    let labels = load_labels(cfg.labels.as_deref())?;
    if labels.num_relations() != cfg.model.num_relations {
        return Err(CliError::usage(format!(
            "model.num_relations is {} but the label registry has {}",
            cfg.model.num_relations,
            labels.num_relations()
        )));
    }
    let masks = load_masks(cfg.masks.as_deref(), &labels)?;
    let external = cfg.heads == HeadSource::External;
    let train_split = load_split(
        &cfg.train,
        SplitName::Train,
        &labels,
        external.then_some(cfg.train_parses.as_deref()).flatten(),
    )?;
    let dev_split = load_split(
        &cfg.dev,
        SplitName::Dev,
        &labels,
        external.then_some(cfg.dev_parses.as_deref()).flatten(),
    )?;

    let backend = Backend::open(
        cfg.provider,
        cfg.seed,
        cfg.cache.as_deref(),
        cfg.endpoint.as_deref(),
        cfg.model.d_enc,
        cfg.alignment,
        cfg.resample_alignment,
    )?;
    let mut train: Vec<PreparedExample<f64>> =
        prepare_split(&train_split, &masks, &cfg.model, &backend.provider())?;
    let dev: Vec<PreparedExample<f64>> =
        prepare_split(&dev_split, &masks, &cfg.model, &backend.provider())?;

    create_dir(&args.out)?;
    let log_path = args.out.join(LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| io_error(&log_path, e))?);
    let mut log_err = None;
    let result = fit(
        &mut train,
        &dev,
        &cfg.model,
        &cfg.options(),
        labels.no_relation().index,
        |entry| {
            let line = serde_json::to_string(entry).expect("log entry serializes");
            if let Err(e) = writeln!(log, "{line}") {
                log_err.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = log_err {
        return Err(io_error(&log_path, e));
    }
    log.flush().map_err(|e| io_error(&log_path, e))?;

    let ckpt = args.out.join(CHECKPOINT_FILE);
    save_checkpoint(&ckpt, &cfg.model, &result.best)?;
    let last = result.log.last();
    println!(
        "epochs={} best_epoch={} best_dev_f1={} final_train_accuracy={} checkpoint={}",
        result.epochs_run,
        result.best_epoch,
        if result.best_epoch == 0 { 0.0 } else { result.best_f1 },
        last.map_or(0.0, |l| l.train_accuracy),
        ckpt.display()
    );
    Ok(EXIT_OK)
}

pub fn evaluate(args: EvaluateArgs) -> Result<i32, CliError> {
    require("checkpoint", &args.checkpoint)?;
    let buckets = parse_buckets(&args.buckets)?;
    let metric = match args.distance_metric {
        DistanceArg::Between => DistanceMetric::Between,
        DistanceArg::StartOffset => DistanceMetric::StartOffset,
    };
    let mut cfg = match &args.config {
        Some(p) => Some(read_config(p)?),
        None => None,
    };
    if let Some(c) = cfg.as_mut() {
        apply_flags(c, &args.provider);
    }
    let (model_cfg, params) = load_checkpoint::<f64>(&args.checkpoint)?;

    let labels = load_labels(cfg.as_ref().and_then(|c| c.labels.as_deref()))?;
    if labels.num_relations() != model_cfg.num_relations {
        return Err(CliError::data(format!(
            "checkpoint classifies {} relations but the label registry has {}",
            model_cfg.num_relations,
            labels.num_relations()
        )));
    }
    let masks = load_masks(cfg.as_ref().and_then(|c| c.masks.as_deref()), &labels)?;
    let split = load_split(&args.data, SplitName::Test, &labels, args.parses.as_deref())?;

    let kind = match (args.provider.provider, &cfg) {
        (Some(ProviderArg::Hashed), _) => ProviderKind::Hashed,
        (Some(ProviderArg::Cache), _) => ProviderKind::Cache,
        (Some(ProviderArg::Remote), _) => ProviderKind::Remote,
        (None, Some(c)) => c.provider,
        (None, None) => ProviderKind::Hashed,
    };
    let seed = args
        .provider
        .seed
        .or(cfg.as_ref().map(|c| c.seed))
        .unwrap_or(0);
    let cache = args.cache.or(cfg.as_ref().and_then(|c| c.cache.clone()));
    let endpoint = args
        .provider
        .endpoint
        .clone()
        .or(cfg.as_ref().and_then(|c| c.endpoint.clone()));
    let alignment = cfg.as_ref().map(|c| c.alignment).unwrap_or_default();
    let backend = Backend::open(
        kind,
        seed,
        cache.as_deref(),
        endpoint.as_deref(),
        model_cfg.d_enc,
        alignment,
        false,
    )?;
    let prepared: Vec<PreparedExample<f64>> =
        prepare_split(&split, &masks, &model_cfg, &backend.provider())?;
    let preds = predict_all(&params, &model_cfg, &prepared)?;
    let report = evaluate_split(&split, &preds, &labels, &buckets, metric)?;

    create_dir(&args.out)?;
    write_file(&args.out.join("report.json"), &report.to_json_string())?;
    write_file(&args.out.join("report.csv"), &report.to_csv_string())?;
    let named: Vec<Prediction> = split
        .examples
        .iter()
        .zip(&preds)
        .map(|(ex, &p)| Prediction {
            id: ex.id.clone(),
            label: labels.relation_at(p).expect("classifier width checked").name.clone(),
        })
        .collect();
    write_file(&args.out.join("predictions.json"), &predictions_json(&named))?;

    println!(
        "precision={} recall={} f1={} examples={}",
        report.precision, report.recall, report.f1, report.examples
    );
    for row in &report.buckets {
        println!(
            "bucket={} count={} precision={} recall={} f1={}",
            row.range, row.count, row.precision, row.recall, row.f1
        );
    }
    if let Some(avg) = report.long_range_avg_f1 {
        println!("long_range_avg_f1={avg}");
    }
    Ok(EXIT_OK)
}

pub fn gradcheck(args: GradcheckArgs) -> Result<i32, CliError> {
    let mut opts = match &args.config {
        Some(p) => {
            require("config", p)?;
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<HeadCheckOptions>(&text)
                .map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?
        }
        None => HeadCheckOptions::default(),
    };
    if let Some(eps) = args.eps {
        opts.eps = eps;
    }
    if let Some(seed) = args.seed {
        opts.seed = seed;
    }
    let fault = args.inject_fault.then_some(BackwardFault::DoubleBiasGrad);
    let start = Instant::now();
    let outcome = head_gradcheck::<f64>(&opts, fault)?;
    let r = &outcome.report;
    println!(
        "max_rel_error={:e} worst={} analytic={:e} numeric={:e} checked={} attempts={} kink_margin={:e} elapsed_ms={}",
        r.max_rel_error,
        r.worst,
        r.analytic,
        r.numeric,
        r.checked,
        outcome.attempts,
        outcome.kink_margin,
        start.elapsed().as_millis()
    );
    if outcome.passed() {
        println!("PASS (tolerance {GRADCHECK_TOLERANCE:e})");
        Ok(EXIT_OK)
    } else {
        println!("FAIL (tolerance {GRADCHECK_TOLERANCE:e})");
        Ok(EXIT_CHECK_FAILED)
    }
}

pub fn embed(args: EmbedArgs) -> Result<i32, CliError> {
    let mut cfg = match &args.config {
        Some(p) => Some(read_config(p)?),
        None => None,
    };
    if let Some(c) = cfg.as_mut() {
        apply_flags(c, &args.provider);
    }
    let kind = match (args.provider.provider, &cfg) {
        (Some(ProviderArg::Hashed), _) => ProviderKind::Hashed,
        (Some(ProviderArg::Cache), _) => ProviderKind::Cache,
        (Some(ProviderArg::Remote), _) => ProviderKind::Remote,
        (None, Some(c)) => c.provider,
        (None, None) => ProviderKind::Hashed,
    };
    if kind == ProviderKind::Cache {
        return Err(CliError::usage("embed writes a cache; choose --provider hashed or remote"));
    }
    let labels = load_labels(cfg.as_ref().and_then(|c| c.labels.as_deref()))?;
    let masks = load_masks(cfg.as_ref().and_then(|c| c.masks.as_deref()), &labels)?;
    let split = load_split(&args.data, SplitName::Train, &labels, None)?;
    let seed = args
        .provider
        .seed
        .or(cfg.as_ref().map(|c| c.seed))
        .unwrap_or(0);
    let endpoint = args
        .provider
        .endpoint
        .clone()
        .or(cfg.as_ref().and_then(|c| c.endpoint.clone()));

    let d_enc = match kind {
        ProviderKind::Remote => {
            let url =
                endpoint.as_deref().ok_or_else(|| CliError::usage("the remote provider needs --endpoint"))?;
            let health = HttpTransport::new(url).health()?;
            if let Some(d) = args.d_enc.filter(|&d| d != health.d) {
                return Err(CliError::data(format!(
                    "--d-enc {d} but the service at {url} declares d={}",
                    health.d
                )));
            }
            health.d
        }
        _ => args
            .d_enc
            .or(cfg.as_ref().map(|c| c.model.d_enc))
            .unwrap_or(dgrx_core::ModelConfig::default().d_enc),
    };
    let alignment = cfg.as_ref().map(|c| c.alignment).unwrap_or_default();
    let backend = Backend::open(kind, seed, None, endpoint.as_deref(), d_enc, alignment, false)?;
    let records = encode_split::<f64, _>(&split, &masks, d_enc, &backend.provider())?;
    let width = match args.width {
        WidthArg::F32 => FloatWidth::F32,
        WidthArg::F64 => FloatWidth::F64,
    };
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    cache_write(&args.out, &records, width)?;
    println!(
        "records={} d_enc={} width={} cache={}",
        records.len(),
        d_enc,
        match width {
            FloatWidth::F32 => 32,
            FloatWidth::F64 => 64,
        },
        args.out.display()
    );
    Ok(EXIT_OK)
}

pub fn synth(args: SynthArgs) -> Result<i32, CliError> {
    create_dir(&args.out)?;
    let train = planted_corpus(args.train_size, combine(&[args.seed, 1]), SplitName::Train);
    let dev = planted_corpus(args.dev_size, combine(&[args.seed, 2]), SplitName::Dev);
    write_tacred_json(&args.out.join("train.json"), &train)?;
    write_tacred_json(&args.out.join("dev.json"), &dev)?;
    write_file(&args.out.join("labels.json"), &planted_registry().to_json_string())?;
    let cfg = TrainConfig {
        seed: args.seed,
        model: planted_model_config(args.seed),
        batch_size: 8,
        max_epochs: 50,
        patience: 5,
        provider: ProviderKind::Hashed,
        endpoint: None,
        cache: None,
        alignment: AlignStrategy::Random,
        resample_alignment: false,
        train: PathBuf::from("train.json"),
        dev: PathBuf::from("dev.json"),
        labels: Some(PathBuf::from("labels.json")),
        masks: None,
        heads: HeadSource::Bundled,
        train_parses: None,
        dev_parses: None,
    };
    let json = serde_json::to_string_pretty(&cfg).expect("config serializes");
    write_file(&args.out.join("config.json"), &json)?;
    println!(
        "train={} dev={} config={}",
        train.len(),
        dev.len(),
        args.out.join("config.json").display()
    );
    Ok(EXIT_OK)
}
