//! Evaluation protocols: frozen and fine-tuned comparison, label budgets,
//! user-fold cross-validation, layer probes, single-task pretraining and
//! cross-dataset transfer.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{compute_norm_stats, znormalize, WindowedDataset};
use crate::error::{invalid, Error, Result};
use crate::metrics::{EvalReport, Metrics, RunRecord};
use crate::networks::{transfer_weights, ActivityClassifier, FreezeMode, Tpn, TrunkLayer};
use crate::params::ParamStore;
use crate::rng::{child_rng, derive_seed};
use crate::training::{predict_classes, pretrain_tpn, train_classifier, TrainConfig};
use crate::transforms::{generate_selfsup_dataset, TransformConfig, TransformKind};

/// How the classifier trunk is initialized and which blocks train.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Random trunk, everything trainable.
    SupervisedScratch,
    /// Random trunk kept frozen.
    RandomInitFrozen,
    /// Pretrained trunk kept frozen.
    Frozen,
    /// Pretrained trunk with ConvC trainable.
    FinetuneConvC,
    /// Pretrained trunk, every block trainable.
    FinetuneAll,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::SupervisedScratch,
        Mode::RandomInitFrozen,
        Mode::Frozen,
        Mode::FinetuneConvC,
        Mode::FinetuneAll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::SupervisedScratch => "supervised_scratch",
            Mode::RandomInitFrozen => "random_init_frozen",
            Mode::Frozen => "frozen",
            Mode::FinetuneConvC => "finetune_conv_c",
            Mode::FinetuneAll => "finetune_all",
        }
    }

    pub fn needs_trunk(self) -> bool {
        matches!(self, Mode::Frozen | Mode::FinetuneConvC | Mode::FinetuneAll)
    }

    pub fn freeze(self) -> FreezeMode {
        match self {
            Mode::SupervisedScratch | Mode::FinetuneAll => FreezeMode::None,
            Mode::RandomInitFrozen | Mode::Frozen => FreezeMode::All,
            Mode::FinetuneConvC => FreezeMode::AllButConvC,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                invalid!(
                    "unknown mode {s:?}; expected one of {:?}",
                    Mode::ALL.map(Mode::name)
                )
            })
    }
}

/// Settings shared by the protocols.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub n_runs: usize,
    pub classifier: TrainConfig,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            n_runs: 10,
            classifier: TrainConfig::classifier(),
            seed: 0,
        }
    }
}

/// Trains one classifier and scores it on `test`.
#[allow(clippy::too_many_arguments)]
pub fn train_and_score(
    trunk: Option<&ParamStore>,
    mode: Mode,
    probe: TrunkLayer,
    n_classes: usize,
    train: &WindowedDataset,
    val: Option<&WindowedDataset>,
    test: &WindowedDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Metrics> {
    let model = fit_classifier(trunk, mode, probe, n_classes, train, val, cfg, seed)?;
    score(&model, test, cfg.eval_batch_size)
}

#[allow(clippy::too_many_arguments)]
pub fn fit_classifier(
    trunk: Option<&ParamStore>,
    mode: Mode,
    probe: TrunkLayer,
    n_classes: usize,
    train: &WindowedDataset,
    val: Option<&WindowedDataset>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ActivityClassifier> {
    let mut model = ActivityClassifier::new(
        n_classes,
        train.channels(),
        probe,
        derive_seed(seed, &[0x1417]),
    )?;
    if mode.needs_trunk() {
        let trunk = trunk.ok_or_else(|| invalid!("mode {mode} needs a pretrained trunk"))?;
        transfer_weights(
            trunk,
            &mut model,
            mode.freeze(),
            derive_seed(seed, &[0x4EAD]),
        )?;
    } else {
        model.set_freeze(mode.freeze());
    }
    let cfg = TrainConfig {
        seed: derive_seed(seed, &[0x7EA1]),
        ..cfg.clone()
    };
    train_classifier(&mut model, train, val, &cfg)?;
    Ok(model)
}

pub fn score(
    model: &ActivityClassifier,
    test: &WindowedDataset,
    eval_batch: usize,
) -> Result<Metrics> {
    let truth = test
        .labels()
        .ok_or_else(|| invalid!("test windows need labels"))?;
    let preds = predict_classes(model, test, eval_batch)?;
    Metrics::compute(truth, &preds)
}

fn n_classes_of(datasets: &[&WindowedDataset]) -> Result<usize> {
    let n = datasets.iter().map(|d| d.n_classes()).max().unwrap_or(0);
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 classes, found {n}"
        )));
    }
    Ok(n)
}

/// Fails if any user contributes windows to both sets.
pub fn audit_disjoint(train: &WindowedDataset, test: &WindowedDataset) -> Result<()> {
    let train_users: BTreeSet<&String> = train.user_ids().iter().collect();
    if let Some(u) = test.user_ids().iter().find(|u| train_users.contains(u)) {
        return Err(invalid!("user {u} appears in both training and test data"));
    }
    Ok(())
}

/// Up to `budget` randomly chosen indices per class, sorted.
pub fn sample_per_class(ds: &WindowedDataset, budget: usize, seed: u64) -> Result<Vec<usize>> {
    if budget == 0 {
        return Err(invalid!("label budget must be at least 1"));
    }
    let mut rng = child_rng(seed, &[0xB0D6]);
    let mut out = Vec::new();
    for (k, mut idx) in ds.class_indices()?.into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < budget {
            log::warn!(
                "class {k} has {} windows, fewer than the budget {budget}; using all",
                idx.len()
            );
        }
        idx.shuffle(&mut rng);
        idx.truncate(budget);
        out.extend(idx);
    }
    out.sort_unstable();
    Ok(out)
}

fn run_seed(base: u64, protocol: u64, coords: &[u64]) -> u64 {
    let mut path = vec![protocol];
    path.extend_from_slice(coords);
    derive_seed(base, &path)
}

/// Frozen, fine-tuned, random-init and scratch comparison on full labels.
/// `extra_trunks` pairs other pretrained trunks (e.g. an autoencoder encoder) with
/// the mode label under which they are reported.
pub fn frozen_comparison(
    trunk: &ParamStore,
    extra_trunks: &[(String, ParamStore)],
    modes: &[Mode],
    train: &WindowedDataset,
    val: Option<&WindowedDataset>,
    test: &WindowedDataset,
    cfg: &ProtocolConfig,
) -> Result<EvalReport> {
    audit_disjoint(train, test)?;
    let n_classes = n_classes_of(&[train, test])?;
    let mut jobs: Vec<(String, Mode, Option<&ParamStore>, usize)> = Vec::new();
    for run in 0..cfg.n_runs {
        for &m in modes {
            jobs.push((m.name().to_string(), m, Some(trunk), run));
        }
        for (label, t) in extra_trunks {
            jobs.push((label.clone(), Mode::Frozen, Some(t), run));
        }
    }
    let results: Vec<Result<RunRecord>> = jobs
        .par_iter()
        .map(|(label, mode, t, run)| {
            let seed = run_seed(cfg.seed, 1, &[*run as u64]);
            let metrics = train_and_score(
                *t,
                *mode,
                TrunkLayer::ConvC,
                n_classes,
                train,
                val,
                test,
                &cfg.classifier,
                seed,
            )?;
            Ok(RunRecord {
                mode: label.clone(),
                variant: String::new(),
                labels_per_class: None,
                fold: None,
                run: *run,
                seed,
                metrics,
            })
        })
        .collect();
    collect("frozen_comparison", results)
}

fn collect(protocol: &str, results: Vec<Result<RunRecord>>) -> Result<EvalReport> {
    let mut report = EvalReport::new(protocol);
    for r in results {
        report.records.push(r?);
    }
    Ok(report)
}

/// Label-budget protocol. Every mode of a given (budget, run) trains on the
/// same sampled windows; each budget samples independently.
pub fn semi_supervised_eval(
    trunk: Option<&ParamStore>,
    train: &WindowedDataset,
    test: &WindowedDataset,
    budgets: &[usize],
    modes: &[Mode],
    cfg: &ProtocolConfig,
) -> Result<EvalReport> {
    if budgets.contains(&0) {
        return Err(invalid!("label budget must be at least 1"));
    }
    audit_disjoint(train, test)?;
    let n_classes = n_classes_of(&[train, test])?;
    let mut jobs = Vec::new();
    for &budget in budgets {
        for run in 0..cfg.n_runs {
            let seed = run_seed(cfg.seed, 2, &[budget as u64, run as u64]);
            let sample = sample_per_class(train, budget, seed)?;
            for &mode in modes {
                jobs.push((budget, run, seed, mode, sample.clone()));
            }
        }
    }
    let results = jobs
        .par_iter()
        .map(|(budget, run, seed, mode, sample)| {
            let subset = train.select(sample);
            let metrics = train_and_score(
                trunk,
                *mode,
                TrunkLayer::ConvC,
                n_classes,
                &subset,
                None,
                test,
                &cfg.classifier,
                *seed,
            )?;
            Ok(RunRecord {
                mode: mode.name().into(),
                variant: String::new(),
                labels_per_class: Some(*budget),
                fold: None,
                run: *run,
                seed: *seed,
                metrics,
            })
        })
        .collect();
    collect("semi_supervised", results)
}

/// Partitions the sorted user list into `k` near-equal folds after a seeded shuffle.
pub fn user_folds(users: &[String], k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if k < 2 {
        return Err(invalid!("need at least 2 folds, got {k}"));
    }
    if users.len() < k {
        return Err(Error::InsufficientData(format!(
            "{} users cannot fill {k} folds",
            users.len()
        )));
    }
    let mut users = users.to_vec();
    users.sort();
    users.shuffle(&mut child_rng(seed, &[0xF01D]));
    let mut folds = vec![Vec::new(); k];
    for (i, u) in users.into_iter().enumerate() {
        folds[i % k].push(u);
    }
    for f in &mut folds {
        f.sort();
    }
    Ok(folds)
}

/// User-split cross-validation on raw windows. Normalization statistics are
/// computed from each fold's training users only.
pub fn kfold_user_cv(
    trunk: Option<&ParamStore>,
    raw: &WindowedDataset,
    k: usize,
    modes: &[Mode],
    cfg: &ProtocolConfig,
) -> Result<EvalReport> {
    let folds = user_folds(&raw.users(), k, cfg.seed)?;
    let n_classes = n_classes_of(&[raw])?;
    let mut jobs = Vec::new();
    for (fi, fold) in folds.iter().enumerate() {
        for run in 0..cfg.n_runs {
            for &mode in modes {
                jobs.push((fi, fold, run, mode));
            }
        }
    }
    let results = jobs
        .par_iter()
        .map(|(fi, fold, run, mode)| {
            let test_users: BTreeSet<String> = fold.iter().cloned().collect();
            let train_users: BTreeSet<String> = raw
                .users()
                .into_iter()
                .filter(|u| !test_users.contains(u))
                .collect();
            let train_raw = raw.select_users(&train_users);
            let stats = compute_norm_stats(&train_raw)?;
            let train = znormalize(&train_raw, &stats)?;
            let test = znormalize(&raw.select_users(&test_users), &stats)?;
            audit_disjoint(&train, &test)?;
            let seed = run_seed(cfg.seed, 3, &[*fi as u64, *run as u64]);
            let metrics = train_and_score(
                trunk,
                *mode,
                TrunkLayer::ConvC,
                n_classes,
                &train,
                None,
                &test,
                &cfg.classifier,
                seed,
            )?;
            Ok(RunRecord {
                mode: mode.name().into(),
                variant: String::new(),
                labels_per_class: None,
                fold: Some(*fi),
                run: *run,
                seed,
                metrics,
            })
        })
        .collect();
    collect("kfold_user_cv", results)
}

/// Frozen probes on each requested trunk block.
pub fn layerwise_eval(
    trunk: &ParamStore,
    train: &WindowedDataset,
    test: &WindowedDataset,
    layers: &[TrunkLayer],
    cfg: &ProtocolConfig,
) -> Result<EvalReport> {
    audit_disjoint(train, test)?;
    let n_classes = n_classes_of(&[train, test])?;
    let jobs: Vec<(TrunkLayer, usize)> = layers
        .iter()
        .flat_map(|&l| (0..cfg.n_runs).map(move |r| (l, r)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(layer, run)| {
            let seed = run_seed(cfg.seed, 4, &[run as u64]);
            let metrics = train_and_score(
                Some(trunk),
                Mode::Frozen,
                layer,
                n_classes,
                train,
                None,
                test,
                &cfg.classifier,
                seed,
            )?;
            Ok(RunRecord {
                mode: Mode::Frozen.name().into(),
                variant: layer.name().into(),
                labels_per_class: None,
                fold: None,
                run,
                seed,
                metrics,
            })
        })
        .collect();
    collect("layerwise", results)
}

/// Pretraining inputs for protocols that pretrain their own networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSettings {
    pub pretrain: TrainConfig,
    pub transforms: TransformConfig,
    /// Transformed copies per unlabeled window and task.
    pub multiplier: usize,
    pub seed: u64,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        Self {
            pretrain: TrainConfig::default(),
            transforms: TransformConfig::default(),
            multiplier: 1,
            seed: 0,
        }
    }
}

/// Pretrains a TPN on the given tasks and returns it.
pub fn pretrain_on(
    unlabeled: &WindowedDataset,
    tasks: &[TransformKind],
    settings: &PretrainSettings,
) -> Result<(Tpn, crate::training::RunLog)> {
    let data = generate_selfsup_dataset(
        &unlabeled.windows(),
        settings.multiplier,
        tasks,
        &settings.transforms,
        derive_seed(settings.seed, &[0x55D]),
    )?;
    let mut tpn = Tpn::new(
        tasks,
        unlabeled.channels(),
        derive_seed(settings.seed, &[0x7E7]),
    )?;
    let mut cfg = settings.pretrain.clone();
    if cfg.task_weights.len() != tasks.len() {
        cfg.task_weights = vec![cfg.task_weights.first().copied().unwrap_or(1.0); tasks.len()];
    }
    let log = pretrain_tpn(&mut tpn, &data, None, &cfg)?;
    Ok((tpn, log))
}

/// One single-task TPN per task plus the multi-task TPN over all of them,
/// each scored with frozen ConvC probes. Variants are task names and `multi_task`.
pub fn single_task_eval(
    unlabeled: &WindowedDataset,
    train: &WindowedDataset,
    test: &WindowedDataset,
    tasks: &[TransformKind],
    settings: &PretrainSettings,
    cfg: &ProtocolConfig,
) -> Result<EvalReport> {
    audit_disjoint(train, test)?;
    let n_classes = n_classes_of(&[train, test])?;
    let mut variants: Vec<(String, Vec<TransformKind>)> = tasks
        .iter()
        .map(|&t| (t.name().to_string(), vec![t]))
        .collect();
    variants.push(("multi_task".into(), tasks.to_vec()));
    let trunks: Vec<Result<ParamStore>> = variants
        .par_iter()
        .map(|(_, ts)| Ok(pretrain_on(unlabeled, ts, settings)?.0.trunk_params()))
        .collect();
    let trunks = trunks.into_iter().collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..variants.len())
        .flat_map(|v| (0..cfg.n_runs).map(move |r| (v, r)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(v, run)| {
            let seed = run_seed(cfg.seed, 5, &[run as u64]);
            let metrics = train_and_score(
                Some(&trunks[v]),
                Mode::Frozen,
                TrunkLayer::ConvC,
                n_classes,
                train,
                None,
                test,
                &cfg.classifier,
                seed,
            )?;
            Ok(RunRecord {
                mode: Mode::Frozen.name().into(),
                variant: variants[v].0.clone(),
                labels_per_class: None,
                fold: None,
                run,
                seed,
                metrics,
            })
        })
        .collect();
    collect("single_task", results)
}

/// Initializes target classifiers from a trunk pretrained on another dataset
/// and compares them with scratch training. `budgets` of `None` trains on the
/// full target training set. `transfer_mode` selects which blocks keep
/// training (end-to-end by default at the call sites).
pub fn transfer_eval(
    source_trunk: &ParamStore,
    target_train: &WindowedDataset,
    target_test: &WindowedDataset,
    budgets: Option<&[usize]>,
    transfer_mode: Mode,
    cfg: &ProtocolConfig,
) -> Result<EvalReport> {
    if !transfer_mode.needs_trunk() {
        return Err(invalid!(
            "transfer mode must use the pretrained trunk, got {transfer_mode}"
        ));
    }
    let kernel = source_trunk.tensor(&TrunkLayer::ConvA.kernel_name())?;
    if kernel.shape()[1] != target_train.channels() {
        return Err(crate::error::shape_err!(
            "source trunk expects {} channels, target has {}",
            kernel.shape()[1],
            target_train.channels()
        ));
    }
    let modes = [Mode::SupervisedScratch, transfer_mode];
    let mut report = match budgets {
        Some(b) => semi_supervised_eval(
            Some(source_trunk),
            target_train,
            target_test,
            b,
            &modes,
            cfg,
        )?,
        None => {
            let n_classes = n_classes_of(&[target_train, target_test])?;
            audit_disjoint(target_train, target_test)?;
            let jobs: Vec<(usize, Mode)> = (0..cfg.n_runs)
                .flat_map(|r| modes.map(|m| (r, m)))
                .collect();
            let results = jobs
                .par_iter()
                .map(|&(run, mode)| {
                    let seed = run_seed(cfg.seed, 6, &[run as u64]);
                    let metrics = train_and_score(
                        Some(source_trunk),
                        mode,
                        TrunkLayer::ConvC,
                        n_classes,
                        target_train,
                        None,
                        target_test,
                        &cfg.classifier,
                        seed,
                    )?;
                    Ok(RunRecord {
                        mode: mode.name().into(),
                        variant: String::new(),
                        labels_per_class: None,
                        fold: None,
                        run,
                        seed,
                        metrics,
                    })
                })
                .collect();
            collect("transfer", results)?
        }
    };
    report.protocol = "transfer".into();
    for r in &mut report.records {
        if r.mode == transfer_mode.name() {
            r.variant = "transfer".into();
        }
    }
    Ok(report)
}
