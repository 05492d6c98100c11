//! `sgjnd`: prepare, train, predict, evaluate, report and selftest.

mod config;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use sgjnd::eval::{emit_report, EvalReport};
use sgjnd::gev::{DEFAULT_MIN_SAMPLES, DEFAULT_QUANTILE};
use sgjnd::ingest::{generate_synthetic, load_dataset, materialize, record_target, DatasetIndex, INDEX_FILE};
use sgjnd::ladder::{LadderDir, LADDER_MANIFEST};
use sgjnd::search::SearchSpec;
use sgjnd::trainer::{
    labeled_ladders, predict_image, split_folds, train, write_train_log, Checkpoint, NeuralClassifier,
    CHECKPOINT_META, CHECKPOINT_WEIGHTS, TRAIN_LOG,
};
use sgjnd::JndResult;

use config::{DataConfig, RunConfig};
use manifest::Step;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] sgjnd::Error),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(sgjnd::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Runtime(_) => "runtime",
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "sgjnd", version, about = "Just-noticeable-distortion prediction on compression ladders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build ladders and the dataset index.
    Prepare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Overrides the synthetic seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one cross-validation fold.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        fold: usize,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predict the JND level of one ladder.
    Predict {
        /// Checkpoint directory or its checkpoint.json.
        #[arg(long)]
        ckpt: PathBuf,
        /// Ladder directory containing ladder.json.
        #[arg(long)]
        ladder: PathBuf,
        #[arg(long, requires = "theta")]
        window: Option<u32>,
        #[arg(long, requires = "window")]
        theta: Option<u32>,
        /// First-lossless search instead of the window rule.
        #[arg(long, conflicts_with = "window")]
        naive: bool,
        /// Directory receiving `<image_id>.json`; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a directory of predictions against an index.
    Evaluate {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        index: PathBuf,
        /// Defaults to `eval.json` beside the prediction directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write report.json, report.csv and the plots.
    Report {
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

/// One prediction file as written by `predict --out`.
#[derive(Debug, Serialize)]
struct Prediction {
    image_id: String,
    #[serde(flatten)]
    result: JndResult,
}

impl Prediction {
    /// Goes through `Value` because flattened maps lose integer keys.
    fn read(path: &Path) -> CliResult<Self> {
        let mut value: serde_json::Value = read_json(path)?;
        let image_id = value
            .as_object_mut()
            .and_then(|m| m.remove("image_id"))
            .and_then(|v| v.as_str().map(str::to_owned))
            .ok_or_else(|| {
                CliError::Runtime(sgjnd::Error::InvalidConfig(format!(
                    "{}: missing image_id",
                    path.display()
                )))
            })?;
        let result = serde_json::from_value(value).map_err(sgjnd::Error::from)?;
        Ok(Self { image_id, result })
    }
}

fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(sgjnd::Error::from)?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<D> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_str(&text).map_err(sgjnd::Error::from)?)
}

fn load_config(path: &Path, run_dir: Option<PathBuf>) -> CliResult<RunConfig> {
    require(path, "config")?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(d) = run_dir {
        cfg.run_dir = d;
    }
    Ok(cfg)
}

fn prepare(config: &Path, run_dir: Option<PathBuf>, seed: Option<u64>) -> CliResult<serde_json::Value> {
    let mut cfg = load_config(config, run_dir)?;
    if let (Some(s), DataConfig::Synthetic { seed, .. }) = (seed, &mut cfg.data) {
        *seed = s;
    }
    cfg.validate()?;
    let data_dir = cfg.data_dir();
    let mut step = Step::new("prepare").input(config)?;
    let index = match &cfg.data {
        DataConfig::Synthetic { seed, count, size } => {
            step = step.seed("synthetic", *seed);
            generate_synthetic(&data_dir, *seed, *count, *size)?
        }
        DataConfig::Dataset { layout, root } => {
            require(root, "dataset root")?;
            let raw = load_dataset(root, *layout)?;
            let index = materialize(&raw, &data_dir, cfg.train.gev_quantile, cfg.train.gev_min_samples)?;
            index.save(&data_dir.join(INDEX_FILE))?;
            index
        }
    };
    let step = step.output(format!("data/{INDEX_FILE}"));
    manifest::record(&cfg.run_dir, "prepare", step)?;
    Ok(json!({"records": index.records.len(), "index": data_dir.join(INDEX_FILE)}))
}

#[allow(clippy::too_many_arguments)]
fn train_fold(
    config: &Path,
    fold: usize,
    run_dir: Option<PathBuf>,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    seed: Option<u64>,
) -> CliResult<serde_json::Value> {
    let mut cfg = load_config(config, run_dir)?;
    let t = &mut cfg.train;
    if let Some(v) = epochs {
        t.epochs = v;
    }
    if let Some(v) = lr {
        t.lr = v;
    }
    if let Some(v) = batch_size {
        t.batch_size = v;
    }
    if let Some(v) = seed {
        t.seed = v;
    }
    cfg.validate()?;
    if fold >= cfg.train.folds {
        return Err(CliError::Usage(format!(
            "fold {fold} out of range for {} folds",
            cfg.train.folds
        )));
    }
    let index_path = cfg.data_dir().join(INDEX_FILE);
    require(&index_path, "dataset index (run prepare first)")?;
    let index = DatasetIndex::load(&index_path)?;
    let folds = split_folds(&index, cfg.train.folds, cfg.train.seed)?;
    let split = &folds[fold];
    let train_set = labeled_ladders(&index, &split.train, &cfg.train)?;
    let val_set = labeled_ladders(&index, &split.val, &cfg.train)?;
    let outcome = train::<f32, _>(&cfg.train, &train_set, &val_set, Some(fold))?;

    let dir = cfg.fold_dir(fold);
    let mut ckpt = outcome.checkpoint;
    ckpt.save(&dir)?;
    write_train_log(&dir.join(TRAIN_LOG), &outcome.log)?;
    let ids = |v: &[usize]| -> Vec<String> { v.iter().map(|&i| index.records[i].image_id.clone()).collect() };
    write_json(
        &dir.join("fold.json"),
        &json!({"fold": fold, "train": ids(&split.train), "val": ids(&split.val), "test": ids(&split.test)}),
    )?;
    let step = Step::new("train")
        .seed("train", cfg.train.seed)
        .input(config)?
        .input(&index_path)?
        .output(CHECKPOINT_META)
        .output(CHECKPOINT_WEIGHTS)
        .output(TRAIN_LOG)
        .output("fold.json");
    manifest::record(&dir, "train", step)?;
    Ok(json!({
        "checkpoint": dir.join(CHECKPOINT_META),
        "epoch": ckpt.meta.epoch,
        "train_bce": ckpt.meta.train_bce,
        "val_bce": ckpt.meta.val_bce,
    }))
}

fn predict(
    ckpt_path: &Path,
    ladder_path: &Path,
    window: Option<(u32, u32)>,
    naive: bool,
    out: Option<PathBuf>,
) -> CliResult<Option<serde_json::Value>> {
    require(ckpt_path, "checkpoint")?;
    require(&ladder_path.join(LADDER_MANIFEST), "ladder manifest")?;
    let ckpt = Checkpoint::<f32>::load(ckpt_path)?;
    let spec = match (window, naive) {
        (Some((w, t)), _) => SearchSpec::window(w, t),
        (None, true) => SearchSpec::naive(),
        (None, false) => ckpt.meta.config.search,
    };
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let ladder = LadderDir::open(ladder_path)?;
    let cfg = &ckpt.meta.config;
    let classifier = NeuralClassifier { model: &ckpt.model };
    let result = predict_image(&classifier, &ladder, &spec, cfg.n_patches, cfg.patch_size, cfg.seed)?;
    let pred = Prediction {
        image_id: ladder.manifest.image_id.clone(),
        result,
    };
    match out {
        Some(dir) => {
            let file = format!("{}.json", pred.image_id);
            write_json(&dir.join(&file), &pred)?;
            let meta = if ckpt_path.is_dir() { ckpt_path.join(CHECKPOINT_META) } else { ckpt_path.to_path_buf() };
            let step = Step::new("predict")
                .seed("patches", cfg.seed)
                .input(&meta)?
                .input(&ladder_path.join(LADDER_MANIFEST))?
                .output(file);
            manifest::record(&dir, &format!("predict:{}", pred.image_id), step)?;
            Ok(Some(json!({"image_id": pred.image_id, "jnd_level": pred.result.jnd_level})))
        }
        None => {
            println!("{}", serde_json::to_string(&pred).map_err(sgjnd::Error::from)?);
            Ok(None)
        }
    }
}

fn evaluate(pred_dir: &Path, index_path: &Path, out: Option<PathBuf>) -> CliResult<serde_json::Value> {
    require(pred_dir, "prediction directory")?;
    require(index_path, "index")?;
    let index = DatasetIndex::load(index_path)?;
    let mut files: Vec<PathBuf> = fs::read_dir(pred_dir)
        .map_err(|e| CliError::io(pred_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && !p.ends_with(manifest::MANIFEST))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!("no predictions in {}", pred_dir.display())));
    }
    let mut step = Step::new("evaluate").input(index_path)?;
    let mut rows = Vec::with_capacity(files.len());
    for f in &files {
        let pred = Prediction::read(f)?;
        let record = index
            .records
            .iter()
            .find(|r| r.image_id == pred.image_id)
            .ok_or_else(|| {
                CliError::Runtime(sgjnd::Error::InvalidConfig(format!(
                    "prediction for unknown image {}",
                    pred.image_id
                )))
            })?;
        let (gt, _) = record_target(record, DEFAULT_QUANTILE, DEFAULT_MIN_SAMPLES)?;
        let ladder = index.ladder_dir(record)?;
        rows.push(EvalReport::row(&pred.image_id, &ladder, pred.result.jnd_level, gt)?);
        step = step.input(f)?;
    }
    let report = EvalReport::from_rows(rows);
    let out = out.unwrap_or_else(|| pred_dir.with_file_name("eval.json"));
    write_json(&out, &report)?;
    let dir = out.parent().unwrap_or(Path::new("."));
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    manifest::record(dir, &format!("evaluate:{name}"), step.output(name.clone()))?;
    Ok(json!({
        "eval": out,
        "images": report.per_image.len(),
        "delta_jnd": report.delta_jnd,
        "delta_psnr": report.delta_psnr,
        "none_count": report.none_count,
    }))
}

fn report(eval: &Path, out: &Path) -> CliResult<serde_json::Value> {
    require(eval, "evaluation file")?;
    let report: EvalReport = read_json(eval)?;
    let written = emit_report(&report, out)?;
    let mut step = Step::new("report").input(eval)?;
    for p in &written {
        if let Some(n) = p.file_name() {
            step = step.output(n.to_string_lossy().into_owned());
        }
    }
    manifest::record(out, "report", step)?;
    Ok(json!({"outputs": written}))
}

fn selftest() -> CliResult<serde_json::Value> {
    let results = sgjnd::selftest::run_all();
    for r in &results {
        println!("{}", serde_json::to_string(r).map_err(sgjnd::Error::from)?);
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(json!({"checks": results.len()}))
    } else {
        Err(CliError::Runtime(sgjnd::Error::InvalidConfig(format!(
            "selftest failures: {}",
            failed.join(", ")
        ))))
    }
}

fn run(cli: Cli) -> CliResult<Option<serde_json::Value>> {
    let name = match &cli.command {
        Command::Prepare { .. } => "prepare",
        Command::Train { .. } => "train",
        Command::Predict { .. } => "predict",
        Command::Evaluate { .. } => "evaluate",
        Command::Report { .. } => "report",
        Command::Selftest => "selftest",
    };
    let summary = match cli.command {
        Command::Prepare { config, run_dir, seed } => Some(prepare(&config, run_dir, seed)?),
        Command::Train {
            config,
            fold,
            run_dir,
            epochs,
            lr,
            batch_size,
            seed,
        } => Some(train_fold(&config, fold, run_dir, epochs, lr, batch_size, seed)?),
        Command::Predict {
            ckpt,
            ladder,
            window,
            theta,
            naive,
            out,
        } => predict(&ckpt, &ladder, window.zip(theta), naive, out)?,
        Command::Evaluate { pred_dir, index, out } => Some(evaluate(&pred_dir, &index, out)?),
        Command::Report { eval, out } => Some(report(&eval, &out)?),
        Command::Selftest => Some(selftest()?),
    };
    Ok(summary.map(|mut s| {
        if let Some(obj) = s.as_object_mut() {
            obj.insert("status".into(), json!("ok"));
            obj.insert("command".into(), json!(name));
        }
        s
    }))
}

fn diagnostic(kind: &str, message: &str) {
    let line = json!({"status": "error", "kind": kind, "message": message});
    eprintln!("{line}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            diagnostic("usage", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(Some(summary)) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            diagnostic(e.kind(), &e.to_string());
            ExitCode::from(e.exit_code())
        }
    }
}
