use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use selfhar_core::analysis::{self, SaliencyTarget, DEFAULT_TOP_K, MAX_DUMP_COLUMNS};
use selfhar_core::data::{self, compute_norm_stats, split_by_user, znormalize, CsvSchema};
use selfhar_core::eval::{self, Mode};
use selfhar_core::networks::{transfer_weights, trunk_only};
use selfhar_core::{
    pretrain_autoencoder, synth_generate, ActivityClassifier, Autoencoder, EvalReport, FreezeMode,
    ParamStore, TrunkLayer, WindowedDataset,
};

use crate::config::RunConfig;
use crate::{Cli, Command, Common, OUT_ENV};

// File names inside a prepared data directory.
pub const TRAIN_FILE: &str = "train.wds";
pub const VAL_FILE: &str = "val.wds";
pub const TEST_FILE: &str = "test.wds";
pub const UNLABELED_FILE: &str = "unlabeled.wds";
/// Un-normalized windows of every user, for user-fold cross-validation.
pub const RAW_FILE: &str = "raw.wds";
pub const CLASSES_FILE: &str = "classes.json";

pub const TPN_CKPT: &str = "tpn.ckpt";
pub const AE_CKPT: &str = "autoencoder.ckpt";
pub const TRUNK_CKPT: &str = "trunk.ckpt";
pub const CLASSIFIER_CKPT: &str = "classifier.ckpt";

#[derive(Args, Debug)]
pub struct PrepareArgs {
    /// Labeled CSV with columns user_id, activity, timestamp, ax, ay, az.
    #[arg(long)]
    pub input: PathBuf,
    /// Optional unlabeled CSV used for pretraining; defaults to the training users' windows.
    #[arg(long)]
    pub unlabeled: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Windows per class and user.
    #[arg(long)]
    pub windows: Option<usize>,
    #[arg(long)]
    pub window_len: Option<usize>,
}

#[derive(Args, Debug)]
pub struct DataArg {
    /// Directory written by `prepare` or `synth`.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Comma-separated pretext tasks (default: config).
    #[arg(long, value_delimiter = ',')]
    pub tasks: Option<Vec<String>>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PretrainAeArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Pretrained checkpoint whose trunk initializes the classifier.
    #[arg(long)]
    pub trunk: Option<PathBuf>,
    #[arg(long, default_value = "supervised_scratch")]
    pub mode: String,
    /// Labeled windows per class (default: all).
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long, default_value = "conv_c")]
    pub probe: String,
}

#[derive(Args, Debug)]
pub struct RunsArg {
    /// Independent runs per setting (default: config).
    #[arg(long)]
    pub runs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalFrozenArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub trunk: PathBuf,
    /// Autoencoder checkpoint reported as an extra frozen baseline.
    #[arg(long)]
    pub ae_trunk: Option<PathBuf>,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "supervised_scratch,random_init_frozen,frozen,finetune_conv_c,finetune_all"
    )]
    pub modes: Vec<String>,
    #[command(flatten)]
    pub runs: RunsArg,
}

#[derive(Args, Debug)]
pub struct EvalSemiArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub trunk: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub budgets: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub modes: Option<Vec<String>>,
    #[command(flatten)]
    pub runs: RunsArg,
}

#[derive(Args, Debug)]
pub struct EvalCvArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub trunk: Option<PathBuf>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub modes: Option<Vec<String>>,
    #[command(flatten)]
    pub runs: RunsArg,
}

#[derive(Args, Debug)]
pub struct EvalLayersArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub trunk: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<String>>,
    #[command(flatten)]
    pub runs: RunsArg,
}

#[derive(Args, Debug)]
pub struct EvalTasksArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long, value_delimiter = ',')]
    pub tasks: Option<Vec<String>>,
    #[command(flatten)]
    pub runs: RunsArg,
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    /// Target data directory.
    #[command(flatten)]
    pub data: DataArg,
    /// Checkpoint pretrained on the source dataset.
    #[arg(long)]
    pub trunk: PathBuf,
    /// Label budgets; omit to train on the full target training set.
    #[arg(long, value_delimiter = ',')]
    pub budgets: Option<Vec<usize>>,
    #[arg(long, default_value = "finetune_all")]
    pub transfer_mode: String,
    #[command(flatten)]
    pub runs: RunsArg,
}

#[derive(Args, Debug)]
pub struct SplitArg {
    /// Which split to read: train, val, test or unlabeled.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Use at most this many windows (first ones).
    #[arg(long)]
    pub max_windows: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SvccaArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub model_a: PathBuf,
    #[arg(long)]
    pub model_b: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    pub top_k: usize,
    #[arg(long, default_value_t = MAX_DUMP_COLUMNS)]
    pub max_columns: usize,
    #[command(flatten)]
    pub split: SplitArg,
}

#[derive(Args, Debug)]
pub struct SaliencyArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Trained classifier checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Class index to explain (default: each window's predicted class).
    #[arg(long)]
    pub class: Option<usize>,
    #[command(flatten)]
    pub split: SplitArg,
}

#[derive(Args, Debug)]
pub struct EmbeddingArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Any checkpoint holding a trunk (classifier, TPN or autoencoder).
    #[arg(long)]
    pub model: PathBuf,
    /// Identifier written in the `model` column (default: checkpoint file stem).
    #[arg(long)]
    pub model_id: Option<String>,
    #[command(flatten)]
    pub split: SplitArg,
}

/// Output directory plus the resolved configuration.
struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.common.jobs {
        if j == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .context("cannot size the worker pool")?;
    }
    let name = cli.command.name();
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
    }
    let (out, created) = output_dir(&cli.common, name)?;
    let result = execute(&cli.command, cfg, out.clone());
    // A failed command leaves no half-written directory behind unless it already existed.
    if result.is_err() && created {
        let _ = std::fs::remove_dir_all(&out);
    }
    result
}

fn execute(command: &Command, cfg: RunConfig, out: PathBuf) -> Result<()> {
    let name = command.name();
    let mut ctx = Ctx { cfg, out };
    override_config(command, &mut ctx.cfg);
    ctx.cfg = ctx.cfg.clone().resolve();
    ctx.cfg.save(&ctx.out)?;
    log::info!("{name}: writing to {}", ctx.out.display());
    match command {
        Command::Prepare(a) => prepare(&ctx, a),
        Command::Synth(_) => synth(&ctx),
        Command::Pretrain(a) => pretrain(&ctx, a),
        Command::PretrainAe(a) => pretrain_ae(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::EvalFrozen(a) => eval_frozen(&ctx, a),
        Command::EvalSemi(a) => eval_semi(&ctx, a),
        Command::EvalCv(a) => eval_cv(&ctx, a),
        Command::EvalLayers(a) => eval_layers(&ctx, a),
        Command::EvalTasks(a) => eval_tasks(&ctx, a),
        Command::Transfer(a) => transfer(&ctx, a),
        Command::AnalyzeSvcca(a) => analyze_svcca(&ctx, a),
        Command::AnalyzeSaliency(a) => analyze_saliency(&ctx, a),
        Command::ExportEmbeddings(a) => export_embeddings(&ctx, a),
    }
}

/// Applies command-line overrides so the saved config matches what ran.
fn override_config(cmd: &Command, cfg: &mut RunConfig) {
    let runs = match cmd {
        Command::EvalFrozen(a) => a.runs.runs,
        Command::EvalSemi(a) => a.runs.runs,
        Command::EvalCv(a) => a.runs.runs,
        Command::EvalLayers(a) => a.runs.runs,
        Command::EvalTasks(a) => a.runs.runs,
        Command::Transfer(a) => a.runs.runs,
        _ => None,
    };
    if let Some(r) = runs {
        cfg.protocol.n_runs = r;
    }
    match cmd {
        Command::Synth(a) => {
            if let Some(v) = a.users {
                cfg.synth.n_users = v;
            }
            if let Some(v) = a.classes {
                cfg.synth.n_classes = v;
                cfg.synth.n_dynamic = cfg.synth.n_dynamic.min(v);
            }
            if let Some(v) = a.windows {
                cfg.synth.windows_per_class = v;
            }
            if let Some(v) = a.window_len {
                cfg.synth.window_len = v;
            }
        }
        Command::Pretrain(a) => {
            if let Some(t) = &a.tasks {
                cfg.protocol.tasks = t.clone();
            }
            if let Some(e) = a.epochs {
                cfg.pretrain.max_epochs = e;
            }
        }
        Command::PretrainAe(a) => {
            if let Some(e) = a.epochs {
                cfg.pretrain.max_epochs = e;
            }
        }
        Command::EvalSemi(a) => {
            if let Some(b) = &a.budgets {
                cfg.protocol.budgets = b.clone();
            }
            if let Some(m) = &a.modes {
                cfg.protocol.modes = m.clone();
            }
        }
        Command::EvalCv(a) => {
            if let Some(f) = a.folds {
                cfg.protocol.folds = f;
            }
            if let Some(m) = &a.modes {
                cfg.protocol.modes = m.clone();
            }
        }
        Command::EvalLayers(a) => {
            if let Some(l) = &a.layers {
                cfg.protocol.layers = l.clone();
            }
        }
        Command::EvalTasks(a) => {
            if let Some(t) = &a.tasks {
                cfg.protocol.tasks = t.clone();
            }
        }
        _ => {}
    }
}

/// Resolves the output directory and reports whether this call created it.
fn output_dir(common: &Common, name: &str) -> Result<(PathBuf, bool)> {
    let out = match &common.out {
        Some(p) => p.clone(),
        None => match std::env::var_os(OUT_ENV) {
            Some(root) => PathBuf::from(root).join(name),
            None => PathBuf::from("runs").join(name),
        },
    };
    if out.is_dir() && out.read_dir()?.next().is_some() && !common.overwrite {
        bail!(
            "output directory {} is not empty (pass --overwrite to reuse it)",
            out.display()
        );
    }
    let created = !out.exists();
    std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    Ok((out, created))
}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        bail!("no such file: {}", path.display());
    }
    Ok(())
}

fn load_ds(path: &Path) -> Result<WindowedDataset> {
    require(path)?;
    WindowedDataset::load(path).with_context(|| format!("cannot read dataset {}", path.display()))
}

fn load_params(path: &Path) -> Result<ParamStore> {
    require(path)?;
    ParamStore::load(path).with_context(|| format!("cannot read checkpoint {}", path.display()))
}

fn load_trunk(path: &Path) -> Result<ParamStore> {
    let trunk = trunk_only(&load_params(path)?);
    if trunk.is_empty() {
        bail!("checkpoint {} holds no trunk parameters", path.display());
    }
    Ok(trunk)
}

fn load_opt_trunk(path: Option<&PathBuf>) -> Result<Option<ParamStore>> {
    path.map(|p| load_trunk(p)).transpose()
}

/// Loads `val.wds` only when it exists and holds windows.
fn load_val(dir: &Path) -> Result<Option<WindowedDataset>> {
    let p = dir.join(VAL_FILE);
    if !p.exists() {
        return Ok(None);
    }
    let ds = load_ds(&p)?;
    Ok((!ds.is_empty()).then_some(ds))
}

fn load_split(dir: &Path, split: &SplitArg) -> Result<WindowedDataset> {
    let file = match split.split.as_str() {
        "train" => TRAIN_FILE,
        "val" => VAL_FILE,
        "test" => TEST_FILE,
        "unlabeled" => UNLABELED_FILE,
        s => bail!("unknown split {s:?}; expected train, val, test or unlabeled"),
    };
    let ds = load_ds(&dir.join(file))?;
    Ok(match split.max_windows {
        Some(m) if m < ds.len() => ds.select(&(0..m).collect::<Vec<_>>()),
        _ => ds,
    })
}

fn parse_modes(names: &[String]) -> Result<Vec<Mode>> {
    let modes = names
        .iter()
        .map(|m| m.parse::<Mode>())
        .collect::<Result<Vec<_>, _>>()?;
    if modes.is_empty() {
        bail!("no evaluation modes given");
    }
    Ok(modes)
}

fn needs_trunk(modes: &[Mode], trunk: &Option<ParamStore>) -> Result<()> {
    if let Some(m) = modes.iter().find(|m| m.needs_trunk()) {
        if trunk.is_none() {
            bail!("mode {m} needs --trunk");
        }
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn print_report(report: &EvalReport) {
    for g in report.summarize() {
        let budget = g
            .labels_per_class
            .map(|b| format!(" budget={b}"))
            .unwrap_or_default();
        let variant = if g.variant.is_empty() {
            String::new()
        } else {
            format!(" [{}]", g.variant)
        };
        println!(
            "{}{variant}{budget}: kappa {:.4} ± {:.4}, f1 {:.4} ({} runs)",
            g.mode, g.kappa.mean, g.kappa.std, g.fscore.mean, g.n_runs
        );
    }
}

fn save_report(ctx: &Ctx, report: &EvalReport, stem: &str) -> Result<()> {
    report.save(&ctx.out, stem)?;
    print_report(report);
    Ok(())
}

/// Splits raw windows by user, normalizes with training statistics and writes
/// the data directory.
fn write_splits(
    ctx: &Ctx,
    raw: &WindowedDataset,
    unlabeled_raw: Option<&WindowedDataset>,
) -> Result<()> {
    let s = &ctx.cfg.split;
    let split = split_by_user(raw, s.test_fraction, s.val_fraction, ctx.cfg.seed)?;
    let stats = compute_norm_stats(&split.train)?;
    let train = znormalize(&split.train, &stats)?;
    let test = znormalize(&split.test, &stats)?;
    eval::audit_disjoint(&train, &test)?;
    train.save(&ctx.out.join(TRAIN_FILE))?;
    test.save(&ctx.out.join(TEST_FILE))?;
    if !split.val.is_empty() {
        znormalize(&split.val, &stats)?.save(&ctx.out.join(VAL_FILE))?;
    }
    let unlabeled = match unlabeled_raw {
        Some(u) => znormalize(u, &stats)?,
        None => train.without_labels(),
    };
    unlabeled.save(&ctx.out.join(UNLABELED_FILE))?;
    raw.save(&ctx.out.join(RAW_FILE))?;
    write_json(
        &ctx.out.join("split.json"),
        &serde_json::json!({
            "train_users": split.train_users,
            "val_users": split.val_users,
            "test_users": split.test_users,
            "norm_stats": stats,
            "windows": {"train": train.len(), "val": split.val.len(), "test": test.len(), "unlabeled": unlabeled.len()},
        }),
    )?;
    println!(
        "{} train, {} validation, {} test and {} unlabeled windows",
        train.len(),
        split.val.len(),
        test.len(),
        unlabeled.len()
    );
    Ok(())
}

fn prepare(ctx: &Ctx, a: &PrepareArgs) -> Result<()> {
    let s = &ctx.cfg.split;
    let schema = CsvSchema {
        sample_rate_hz: s.sample_rate_hz,
    };
    require(&a.input)?;
    let recs = data::ingest_csv(&a.input, &schema)
        .with_context(|| format!("cannot ingest {}", a.input.display()))?;
    let (raw, classes) = data::window_recordings(&recs, s.window_len, s.overlap)?;
    if raw.labels().is_none() {
        bail!("{} has no activity labels", a.input.display());
    }
    let unlabeled = match &a.unlabeled {
        Some(p) => {
            require(p)?;
            let recs = data::ingest_csv(p, &schema)
                .with_context(|| format!("cannot ingest {}", p.display()))?;
            Some(
                data::window_recordings(&recs, s.window_len, s.overlap)?
                    .0
                    .without_labels(),
            )
        }
        None => None,
    };
    write_json(&ctx.out.join(CLASSES_FILE), &classes)?;
    write_splits(ctx, &raw, unlabeled.as_ref())
}

fn synth(ctx: &Ctx) -> Result<()> {
    let raw = synth_generate(&ctx.cfg.synth)?;
    let classes: Vec<usize> = (0..ctx.cfg.synth.n_classes).collect();
    write_json(&ctx.out.join(CLASSES_FILE), &classes)?;
    write_splits(ctx, &raw, None)
}

fn pretrain(ctx: &Ctx, a: &PretrainArgs) -> Result<()> {
    let unlabeled = load_ds(&a.data.data.join(UNLABELED_FILE))?;
    let tasks = ctx.cfg.tasks()?;
    let (tpn, log) = eval::pretrain_on(&unlabeled, &tasks, &ctx.cfg.pretrain_settings())?;
    tpn.params.save(&ctx.out.join(TPN_CKPT))?;
    tpn.trunk_params().save(&ctx.out.join(TRUNK_CKPT))?;
    log.save_csv(&ctx.out.join("pretrain_log.csv"))?;
    write_json(
        &ctx.out.join("tasks.json"),
        &tasks.iter().map(|t| t.name()).collect::<Vec<_>>(),
    )?;
    if let Some(last) = log.last() {
        for t in &last.tasks {
            println!(
                "{}: loss {:.4}, kappa {}",
                t.task,
                t.loss,
                t.kappa.map_or("n/a".into(), |k| format!("{k:.4}"))
            );
        }
    }
    Ok(())
}

fn pretrain_ae(ctx: &Ctx, a: &PretrainAeArgs) -> Result<()> {
    let unlabeled = load_ds(&a.data.data.join(UNLABELED_FILE))?;
    let mut ae = Autoencoder::new(unlabeled.window_len(), unlabeled.channels(), ctx.cfg.seed)?;
    let log = pretrain_autoencoder(&mut ae, &unlabeled, &ctx.cfg.pretrain)?;
    ae.params.save(&ctx.out.join(AE_CKPT))?;
    ae.trunk_params().save(&ctx.out.join(TRUNK_CKPT))?;
    log.save_csv(&ctx.out.join("pretrain_log.csv"))?;
    if let Some(last) = log.last() {
        println!("final reconstruction loss {:.6}", last.loss);
    }
    Ok(())
}

fn train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let dir = &a.data.data;
    let mut train = load_ds(&dir.join(TRAIN_FILE))?;
    let test = load_ds(&dir.join(TEST_FILE))?;
    let val = load_val(dir)?;
    let mode: Mode = a.mode.parse()?;
    let probe: TrunkLayer = a.probe.parse()?;
    let trunk = load_opt_trunk(a.trunk.as_ref())?;
    needs_trunk(&[mode], &trunk)?;
    if let Some(b) = a.budget {
        train = train.select(&eval::sample_per_class(&train, b, ctx.cfg.seed)?);
    }
    let n_classes = train.n_classes().max(test.n_classes());
    let model = eval::fit_classifier(
        trunk.as_ref(),
        mode,
        probe,
        n_classes,
        &train,
        val.as_ref(),
        &ctx.cfg.classifier,
        ctx.cfg.seed,
    )?;
    let metrics = eval::score(&model, &test, ctx.cfg.classifier.eval_batch_size)?;
    model.params.save(&ctx.out.join(CLASSIFIER_CKPT))?;
    write_json(&ctx.out.join("metrics.json"), &metrics)?;
    println!(
        "{mode}: kappa {:.4}, f1 {:.4}",
        metrics.kappa, metrics.fscore
    );
    Ok(())
}

fn eval_frozen(ctx: &Ctx, a: &EvalFrozenArgs) -> Result<()> {
    let dir = &a.data.data;
    let train = load_ds(&dir.join(TRAIN_FILE))?;
    let test = load_ds(&dir.join(TEST_FILE))?;
    let val = load_val(dir)?;
    let trunk = load_trunk(&a.trunk)?;
    let extra = match &a.ae_trunk {
        Some(p) => vec![("autoencoder_frozen".to_string(), load_trunk(p)?)],
        None => Vec::new(),
    };
    let modes = parse_modes(&a.modes)?;
    let report = eval::frozen_comparison(
        &trunk,
        &extra,
        &modes,
        &train,
        val.as_ref(),
        &test,
        &ctx.cfg.protocol(),
    )?;
    save_report(ctx, &report, "frozen_comparison")
}

fn eval_semi(ctx: &Ctx, a: &EvalSemiArgs) -> Result<()> {
    let dir = &a.data.data;
    let train = load_ds(&dir.join(TRAIN_FILE))?;
    let test = load_ds(&dir.join(TEST_FILE))?;
    let trunk = load_opt_trunk(a.trunk.as_ref())?;
    let modes = parse_modes(&ctx.cfg.protocol.modes)?;
    needs_trunk(&modes, &trunk)?;
    let report = eval::semi_supervised_eval(
        trunk.as_ref(),
        &train,
        &test,
        &ctx.cfg.protocol.budgets,
        &modes,
        &ctx.cfg.protocol(),
    )?;
    save_report(ctx, &report, "semi_supervised")
}

fn eval_cv(ctx: &Ctx, a: &EvalCvArgs) -> Result<()> {
    let raw = load_ds(&a.data.data.join(RAW_FILE))?;
    let trunk = load_opt_trunk(a.trunk.as_ref())?;
    let modes = parse_modes(&ctx.cfg.protocol.modes)?;
    needs_trunk(&modes, &trunk)?;
    let report = eval::kfold_user_cv(
        trunk.as_ref(),
        &raw,
        ctx.cfg.protocol.folds,
        &modes,
        &ctx.cfg.protocol(),
    )?;
    save_report(ctx, &report, "kfold_user_cv")
}

fn eval_layers(ctx: &Ctx, a: &EvalLayersArgs) -> Result<()> {
    let dir = &a.data.data;
    let train = load_ds(&dir.join(TRAIN_FILE))?;
    let test = load_ds(&dir.join(TEST_FILE))?;
    let trunk = load_trunk(&a.trunk)?;
    let layers = ctx
        .cfg
        .protocol
        .layers
        .iter()
        .map(|l| l.parse::<TrunkLayer>())
        .collect::<Result<Vec<_>, _>>()?;
    let report = eval::layerwise_eval(&trunk, &train, &test, &layers, &ctx.cfg.protocol())?;
    save_report(ctx, &report, "layerwise")
}

fn eval_tasks(ctx: &Ctx, a: &EvalTasksArgs) -> Result<()> {
    let dir = &a.data.data;
    let unlabeled = load_ds(&dir.join(UNLABELED_FILE))?;
    let train = load_ds(&dir.join(TRAIN_FILE))?;
    let test = load_ds(&dir.join(TEST_FILE))?;
    let tasks = ctx.cfg.tasks()?;
    let report = eval::single_task_eval(
        &unlabeled,
        &train,
        &test,
        &tasks,
        &ctx.cfg.pretrain_settings(),
        &ctx.cfg.protocol(),
    )?;
    save_report(ctx, &report, "single_task")
}

fn transfer(ctx: &Ctx, a: &TransferArgs) -> Result<()> {
    let dir = &a.data.data;
    let train = load_ds(&dir.join(TRAIN_FILE))?;
    let test = load_ds(&dir.join(TEST_FILE))?;
    let trunk = load_trunk(&a.trunk)?;
    let mode: Mode = a.transfer_mode.parse()?;
    let report = eval::transfer_eval(
        &trunk,
        &train,
        &test,
        a.budgets.as_deref(),
        mode,
        &ctx.cfg.protocol(),
    )?;
    save_report(ctx, &report, "transfer")
}

/// A classifier view of any checkpoint: classifier checkpoints load as-is,
/// anything else contributes its trunk under a throwaway head.
fn model_from(path: &Path) -> Result<ActivityClassifier> {
    let params = load_params(path)?;
    if params.get("classifier.out.bias").is_some() {
        return Ok(ActivityClassifier::from_checkpoint(params)?);
    }
    let trunk = trunk_only(&params);
    if trunk.get(&TrunkLayer::ConvC.kernel_name()).is_none() {
        bail!("checkpoint {} holds no full trunk", path.display());
    }
    let in_ch = trunk.tensor(&TrunkLayer::ConvA.kernel_name())?.shape()[1];
    let mut model = ActivityClassifier::new(2, in_ch, TrunkLayer::ConvC, 0)?;
    transfer_weights(&trunk, &mut model, FreezeMode::All, 0)?;
    Ok(model)
}

fn model_id(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    match path.parent().and_then(Path::file_name) {
        Some(p) => format!("{}/{stem}", p.to_string_lossy()),
        None => stem,
    }
}

fn analyze_svcca(ctx: &Ctx, a: &SvccaArgs) -> Result<()> {
    let ds = load_split(&a.data.data, &a.split)?;
    let ma = model_from(&a.model_a)?;
    let mb = model_from(&a.model_b)?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let batch = ds.batch(&idx);
    // SVCCA needs more examples than columns; narrow the flattened conv maps to fit.
    let columns = a.max_columns.min(ds.len().saturating_sub(1)).max(1);
    if columns < a.max_columns {
        log::warn!(
            "{} windows: conv activations subsampled to {columns} columns",
            ds.len()
        );
    }
    let da = analysis::activation_dumps(&ma, &batch, &model_id(&a.model_a), columns, ctx.cfg.seed)?;
    let db = analysis::activation_dumps(&mb, &batch, &model_id(&a.model_b), columns, ctx.cfg.seed)?;
    let grid = analysis::layer_similarity_grid(&da, &db, a.top_k, ctx.cfg.seed)?;
    grid.save(&ctx.out.join("svcca.csv"))?;
    for (r, row) in grid.rows.iter().zip(&grid.values) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
        println!("{r}: {}", cells.join(" "));
    }
    Ok(())
}

fn analyze_saliency(ctx: &Ctx, a: &SaliencyArgs) -> Result<()> {
    let ds = load_split(&a.data.data, &a.split)?;
    let params = load_params(&a.model)?;
    let model = ActivityClassifier::from_checkpoint(params)
        .with_context(|| format!("{} is not a classifier checkpoint", a.model.display()))?;
    let target = a
        .class
        .map_or(SaliencyTarget::Predicted, SaliencyTarget::Class);
    let maps = analysis::saliency_maps(&model, &ds, target)?;
    let w = BufWriter::new(File::create(ctx.out.join("saliency.csv"))?);
    analysis::write_saliency_csv(&maps, ds.labels(), w)?;
    println!("{} saliency maps written", maps.len());
    Ok(())
}

fn export_embeddings(ctx: &Ctx, a: &EmbeddingArgs) -> Result<()> {
    let ds = load_split(&a.data.data, &a.split)?;
    let model = model_from(&a.model)?;
    let id = a.model_id.clone().unwrap_or_else(|| model_id(&a.model));
    let w = BufWriter::new(File::create(ctx.out.join("embeddings.csv"))?);
    analysis::export_embeddings(&model, &ds, &id, w)?;
    println!(
        "{} embeddings of width {} written",
        ds.len(),
        model.probe.width()
    );
    Ok(())
}
