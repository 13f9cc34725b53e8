//! Self-supervised pretraining, supervised classifier training and the
//! autoencoder baseline.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::WindowedDataset;
use crate::error::{invalid, Error, Result};
use crate::metrics::cohen_kappa;
use crate::networks::{ActivityClassifier, Autoencoder, Tpn, TrunkLayer};
use crate::optim::AdamConfig;
use crate::params::ParamStore;
use crate::rng::child_rng;
use crate::tensor::Tensor;
use crate::transforms::{SelfSupDataset, TaskData};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EarlyStop {
    /// Stop once training accuracy has been 1.0 for this many consecutive epochs (0 disables).
    pub train_accuracy_epochs: usize,
    /// Stop once validation loss has not improved for this many epochs (0 disables).
    pub patience: usize,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            train_accuracy_epochs: 2,
            patience: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Mini-batch size; per task during pretraining.
    pub batch_size: usize,
    /// Loss weight per pretext task, in the network's task order.
    pub task_weights: Vec<f64>,
    pub l2_beta: f64,
    pub early_stop: EarlyStop,
    /// Optimizer steps per pretraining epoch. Defaults to one pass over the
    /// largest task.
    pub steps_per_epoch: Option<usize>,
    pub checkpoint_every: Option<usize>,
    /// Receives periodic checkpoints and the snapshot written on a non-finite loss.
    pub checkpoint_dir: Option<PathBuf>,
    /// Batch size for inference passes.
    pub eval_batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            max_epochs: 30,
            batch_size: 64,
            task_weights: vec![1.0; 8],
            l2_beta: 1e-4,
            early_stop: EarlyStop::default(),
            steps_per_epoch: None,
            checkpoint_every: None,
            checkpoint_dir: None,
            eval_batch_size: 128,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn classifier() -> Self {
        Self {
            max_epochs: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid!(
                "learning rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.max_epochs == 0 && self.steps_per_epoch.is_some() {
            log::debug!("zero epochs requested");
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(invalid!("batch sizes must be positive"));
        }
        if self.steps_per_epoch == Some(0) || self.checkpoint_every == Some(0) {
            return Err(invalid!(
                "steps_per_epoch and checkpoint_every must be positive when set"
            ));
        }
        if !(self.l2_beta >= 0.0 && self.l2_beta.is_finite()) {
            return Err(invalid!(
                "l2_beta must be non-negative, got {}",
                self.l2_beta
            ));
        }
        if self
            .task_weights
            .iter()
            .any(|w| !(*w >= 0.0 && w.is_finite()))
        {
            return Err(invalid!(
                "task weights must be non-negative, got {:?}",
                self.task_weights
            ));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: String,
    pub loss: f64,
    /// Recognition kappa on held-out data.
    pub kappa: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean aggregated training loss over the epoch's steps.
    pub loss: f64,
    pub tasks: Vec<TaskRecord>,
    pub train_accuracy: Option<f64>,
    pub val_loss: Option<f64>,
    pub elapsed_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: Option<String>,
}

pub const RUNLOG_CSV_HEADER: [&str; 7] = [
    "epoch",
    "task",
    "loss",
    "kappa",
    "accuracy",
    "val_loss",
    "elapsed_s",
];

impl RunLog {
    /// One `all` row per epoch followed by one row per task.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(RUNLOG_CSV_HEADER)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.epochs {
            out.write_record([
                e.epoch.to_string(),
                "all".into(),
                e.loss.to_string(),
                String::new(),
                opt(e.train_accuracy),
                opt(e.val_loss),
                format!("{:.3}", e.elapsed_s),
            ])?;
            for t in &e.tasks {
                out.write_record([
                    e.epoch.to_string(),
                    t.task.clone(),
                    t.loss.to_string(),
                    opt(t.kappa),
                    String::new(),
                    String::new(),
                    format!("{:.3}", e.elapsed_s),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// Mean held-out kappa over tasks in the final epoch.
    pub fn final_mean_kappa(&self) -> Option<f64> {
        let ks: Vec<f64> = self.last()?.tasks.iter().filter_map(|t| t.kappa).collect();
        (!ks.is_empty()).then(|| ks.iter().sum::<f64>() / ks.len() as f64)
    }
}

fn non_finite(
    what: &str,
    epoch: usize,
    step: usize,
    detail: String,
    params: &ParamStore,
    dir: Option<&Path>,
) -> Error {
    let mut msg = format!("{what} loss became non-finite at epoch {epoch}, step {step}: {detail}");
    if let Some(dir) = dir {
        let path = dir.join("nonfinite_snapshot.ckpt");
        match std::fs::create_dir_all(dir)
            .map_err(Error::from)
            .and_then(|_| params.save(&path))
        {
            Ok(()) => msg.push_str(&format!("; parameters saved to {}", path.display())),
            Err(e) => msg.push_str(&format!("; snapshot failed: {e}")),
        }
    }
    Error::NonFinite(msg)
}

fn maybe_checkpoint(
    cfg: &TrainConfig,
    epoch: usize,
    params: &ParamStore,
    stem: &str,
) -> Result<()> {
    if let (Some(every), Some(dir)) = (cfg.checkpoint_every, cfg.checkpoint_dir.as_deref()) {
        if (epoch + 1).is_multiple_of(every) {
            std::fs::create_dir_all(dir)?;
            params.save(&dir.join(format!("{stem}_epoch{:03}.ckpt", epoch + 1)))?;
        }
    }
    Ok(())
}

/// Rows `indices` of a tensor whose first axis indexes examples.
pub fn gather_rows(t: &Tensor, indices: &[usize]) -> Tensor {
    let row: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(indices.len() * row);
    for &i in indices {
        data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = indices.len();
    Tensor::new(shape, data).expect("row gather preserves sizes")
}

fn stack_windows(windows: &[&Tensor]) -> Result<Tensor> {
    Tensor::stack(windows)
}

/// Cycles through a task's examples in freshly shuffled order.
struct TaskSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: crate::rng::Rng,
}

impl TaskSampler {
    fn new(len: usize, seed: u64, task: usize) -> Self {
        let mut rng = child_rng(seed, &[0x5A3, task as u64]);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self {
            order,
            cursor: 0,
            rng,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let take = (size - out.len()).min(self.order.len() - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }
}

/// Loss terms for one multi-task batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TpnLoss {
    pub total: f64,
    pub task_losses: Vec<f64>,
    pub l2: f64,
}

fn task_data<'a>(tpn: &Tpn, data: &'a SelfSupDataset) -> Result<Vec<&'a TaskData>> {
    tpn.tasks
        .iter()
        .map(|&k| {
            let t = data
                .task(k)
                .ok_or_else(|| invalid!("self-supervised data lacks task {k}"))?;
            if t.windows.is_empty() {
                return Err(Error::InsufficientData(format!("task {k} has no examples")));
            }
            Ok(t)
        })
        .collect()
}

/// Evaluates the weighted multi-task objective on one batch per task without
/// updating anything. `batches[t]` holds indices into task `t`.
pub fn tpn_batch_loss(
    tpn: &Tpn,
    data: &SelfSupDataset,
    batches: &[Vec<usize>],
    cfg: &TrainConfig,
) -> Result<TpnLoss> {
    let tasks = task_data(tpn, data)?;
    let mut g = Graph::new();
    let bound = tpn.params.bind(&mut g);
    let mut rng = child_rng(cfg.seed, &[0xD0]);
    let (loss, task_losses, l2) =
        tpn_step_graph(tpn, &tasks, batches, cfg, &mut g, &bound, false, &mut rng)?;
    Ok(TpnLoss {
        total: g.value(loss).item()?,
        task_losses,
        l2,
    })
}

#[allow(clippy::too_many_arguments)]
fn tpn_step_graph(
    tpn: &Tpn,
    tasks: &[&TaskData],
    batches: &[Vec<usize>],
    cfg: &TrainConfig,
    g: &mut Graph,
    bound: &crate::params::Bound,
    training: bool,
    rng: &mut crate::rng::Rng,
) -> Result<(crate::autograd::Var, Vec<f64>, f64)> {
    if cfg.task_weights.len() != tpn.tasks.len() {
        return Err(invalid!(
            "{} task weights for {} tasks",
            cfg.task_weights.len(),
            tpn.tasks.len()
        ));
    }
    let mut windows = Vec::new();
    let mut targets = Vec::with_capacity(tasks.len());
    let mut segments = Vec::with_capacity(tasks.len());
    for (t, idx) in tasks.iter().zip(batches) {
        let start = windows.len();
        windows.extend(idx.iter().map(|&i| t.windows[i].as_ref()));
        segments.push((start, windows.len()));
        targets.push(Tensor::new(
            vec![idx.len()],
            idx.iter()
                .map(|&i| f64::from(u8::from(t.labels[i])))
                .collect(),
        )?);
    }
    let x = g.input(stack_windows(&windows)?);
    let probs = tpn.forward(g, bound, x, Some(&segments), training, rng)?;
    let mut terms = Vec::with_capacity(probs.len());
    for (p, y) in probs.into_iter().zip(targets) {
        let y = g.input(y);
        terms.push(g.bce(p, y)?);
    }
    let task_losses = terms
        .iter()
        .map(|&v| g.value(v).item())
        .collect::<Result<Vec<_>>>()?;
    let weighted = g.weighted_sum(&terms, &cfg.task_weights)?;
    let l2 = g.l2_penalty(&bound.trainable_weights(&tpn.params), cfg.l2_beta);
    let l2_value = g.value(l2).item()?;
    Ok((g.add(weighted, l2)?, task_losses, l2_value))
}

/// Per-task held-out recognition kappa, thresholding each head at 0.5.
pub fn tpn_task_kappas(tpn: &Tpn, data: &SelfSupDataset, eval_batch: usize) -> Result<Vec<f64>> {
    let tasks = task_data(tpn, data)?;
    let mut out = Vec::with_capacity(tasks.len());
    for (ti, t) in tasks.iter().enumerate() {
        let mut preds = Vec::with_capacity(t.windows.len());
        for chunk in t.windows.chunks(eval_batch) {
            let batch = stack_windows(&chunk.iter().map(|w| w.as_ref()).collect::<Vec<_>>())?;
            let p = tpn.predict(&batch)?;
            preds.extend(p[ti].iter().map(|&v| usize::from(v >= 0.5)));
        }
        let truth: Vec<usize> = t.labels.iter().map(|&b| usize::from(b)).collect();
        out.push(cohen_kappa(&truth, &preds)?);
    }
    Ok(out)
}

/// Multi-task pretraining. Each step draws one mini-batch per task and takes
/// one Adam step on the weighted sum of per-task BCE losses plus the L2 term.
pub fn pretrain_tpn(
    tpn: &mut Tpn,
    data: &SelfSupDataset,
    held_out: Option<&SelfSupDataset>,
    cfg: &TrainConfig,
) -> Result<RunLog> {
    cfg.validate()?;
    let tasks = task_data(tpn, data)?;
    if cfg.task_weights.len() != tpn.tasks.len() {
        return Err(invalid!(
            "{} task weights for {} tasks",
            cfg.task_weights.len(),
            tpn.tasks.len()
        ));
    }
    tpn.task_weights = cfg.task_weights.clone();
    let steps = cfg.steps_per_epoch.unwrap_or_else(|| {
        tasks
            .iter()
            .map(|t| t.windows.len())
            .max()
            .unwrap_or(1)
            .div_ceil(cfg.batch_size)
    });
    let mut samplers: Vec<TaskSampler> = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| TaskSampler::new(t.windows.len(), cfg.seed, i))
        .collect();
    let mut adam = tpn.params.adam(cfg.adam());
    let mut log = RunLog {
        seed: cfg.seed,
        ..RunLog::default()
    };
    let started = Instant::now();
    for epoch in 0..cfg.max_epochs {
        let mut dropout_rng = child_rng(cfg.seed, &[0xD809, epoch as u64]);
        let mut sum_total = 0.0;
        let mut sum_tasks = vec![0.0; tasks.len()];
        for step in 0..steps {
            let batches: Vec<Vec<usize>> = samplers
                .iter_mut()
                .map(|s| s.next_batch(cfg.batch_size))
                .collect();
            let mut g = Graph::new();
            let bound = tpn.params.bind(&mut g);
            let (loss, task_losses, _) = tpn_step_graph(
                tpn,
                &tasks,
                &batches,
                cfg,
                &mut g,
                &bound,
                true,
                &mut dropout_rng,
            )?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                let detail = format!("task losses {task_losses:?}");
                return Err(non_finite(
                    "pretraining",
                    epoch,
                    step,
                    detail,
                    &tpn.params,
                    cfg.checkpoint_dir.as_deref(),
                ));
            }
            g.backward(loss)?;
            tpn.params.apply_adam(&mut adam, &g, &bound)?;
            sum_total += value;
            for (s, l) in sum_tasks.iter_mut().zip(&task_losses) {
                *s += l;
            }
        }
        let kappas = match held_out {
            Some(h) => tpn_task_kappas(tpn, h, cfg.eval_batch_size)?
                .into_iter()
                .map(Some)
                .collect(),
            None => vec![None; tasks.len()],
        };
        let record = EpochRecord {
            epoch,
            loss: sum_total / steps as f64,
            tasks: tpn
                .tasks
                .iter()
                .zip(&sum_tasks)
                .zip(kappas)
                .map(|((k, s), kappa)| TaskRecord {
                    task: k.to_string(),
                    loss: s / steps as f64,
                    kappa,
                })
                .collect(),
            train_accuracy: None,
            val_loss: None,
            elapsed_s: started.elapsed().as_secs_f64(),
        };
        log::info!("pretrain epoch {epoch}: loss {:.4}", record.loss);
        log.epochs.push(record);
        maybe_checkpoint(cfg, epoch, &tpn.params, "tpn")?;
    }
    log.stop_reason = Some("max_epochs".into());
    Ok(log)
}

/// Inputs for the trainable part of a classifier: pooled features when the
/// whole trunk is frozen, otherwise the activations feeding the first
/// trainable block.
struct CachedInputs {
    start: Option<TrunkLayer>,
    x: Tensor,
}

fn cache_inputs(
    model: &ActivityClassifier,
    ds: &WindowedDataset,
    eval_batch: usize,
) -> Result<CachedInputs> {
    let start = model.first_trainable_block();
    let all: Vec<usize> = (0..ds.len()).collect();
    let prev = match start {
        Some(TrunkLayer::ConvA) => {
            return Ok(CachedInputs {
                start,
                x: ds.batch(&all),
            })
        }
        Some(TrunkLayer::ConvB) => Some(TrunkLayer::ConvA),
        Some(TrunkLayer::ConvC) => Some(TrunkLayer::ConvB),
        None => None,
    };
    let mut parts = Vec::new();
    for chunk in all.chunks(eval_batch) {
        let batch = ds.batch(chunk);
        parts.push(match prev {
            Some(layer) => model.trunk_activations(&batch, layer)?,
            None => model.features(&batch)?,
        });
    }
    Ok(CachedInputs {
        start,
        x: concat_rows(&parts)?,
    })
}

fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts
        .iter()
        .flat_map(|p| p.data().iter().copied())
        .collect();
    Tensor::new(shape, data)
}

fn one_hot(labels: &[usize], n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), n]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * n + l] = 1.0;
    }
    t
}

fn argmax_rows(p: &Tensor) -> Vec<usize> {
    let n = p.shape()[1];
    p.data()
        .chunks(n)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > row[best] { j } else { best })
        })
        .collect()
}

fn check_labels(model: &ActivityClassifier, ds: &WindowedDataset) -> Result<Vec<usize>> {
    let labels = ds
        .labels()
        .ok_or_else(|| invalid!("classifier training needs labeled windows"))?
        .to_vec();
    if labels.is_empty() {
        return Err(Error::InsufficientData("no labeled windows".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.n_classes) {
        return Err(invalid!(
            "label {bad} out of range for {} classes",
            model.n_classes
        ));
    }
    let mut present = vec![false; model.n_classes];
    for &l in &labels {
        present[l] = true;
    }
    let count = present.iter().filter(|&&p| p).count();
    if count < 2 {
        return Err(Error::InsufficientData(
            "training labels cover a single class".into(),
        ));
    }
    if count < model.n_classes {
        let missing: Vec<usize> = (0..model.n_classes).filter(|&k| !present[k]).collect();
        log::warn!("classes {missing:?} are absent from the training labels");
    }
    Ok(labels)
}

/// Mean cross-entropy and predicted classes on cached inputs, inference mode.
fn classifier_eval(
    model: &ActivityClassifier,
    inputs: &CachedInputs,
    labels: Option<&[usize]>,
    eval_batch: usize,
) -> Result<(Option<f64>, Vec<usize>)> {
    let n = inputs.x.shape()[0];
    let mut preds = Vec::with_capacity(n);
    let mut loss_sum = 0.0;
    let mut rng = child_rng(0, &[]);
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(eval_batch) {
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g);
        let x = g.input(gather_rows(&inputs.x, chunk));
        let p = model.forward_from(&mut g, &bound, x, inputs.start, false, &mut rng)?;
        if let Some(labels) = labels {
            let y = g.input(one_hot(
                &chunk.iter().map(|&i| labels[i]).collect::<Vec<_>>(),
                model.n_classes,
            ));
            let l = g.cce(p, y)?;
            loss_sum += g.value(l).item()? * chunk.len() as f64;
        }
        preds.extend(argmax_rows(g.value(p)));
    }
    Ok((labels.map(|_| loss_sum / n as f64), preds))
}

/// Class predictions for every window of `ds`.
pub fn predict_classes(
    model: &ActivityClassifier,
    ds: &WindowedDataset,
    eval_batch: usize,
) -> Result<Vec<usize>> {
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut preds = Vec::with_capacity(ds.len());
    for chunk in all.chunks(eval_batch.max(1)) {
        preds.extend(argmax_rows(&model.predict_proba(&ds.batch(chunk))?));
    }
    Ok(preds)
}

/// Supervised training with categorical cross-entropy plus L2 on trainable
/// weights. Frozen trunk blocks run once up front; their outputs are cached.
/// Stops early once training accuracy stays at 1.0 or validation loss stalls.
pub fn train_classifier(
    model: &mut ActivityClassifier,
    train: &WindowedDataset,
    val: Option<&WindowedDataset>,
    cfg: &TrainConfig,
) -> Result<RunLog> {
    cfg.validate()?;
    let labels = check_labels(model, train)?;
    let inputs = cache_inputs(model, train, cfg.eval_batch_size)?;
    let val_cache = match val {
        Some(v) if !v.is_empty() => Some((
            cache_inputs(model, v, cfg.eval_batch_size)?,
            check_labels_lenient(model, v)?,
        )),
        _ => None,
    };
    let mut adam = model.params.adam(cfg.adam());
    let mut log = RunLog {
        seed: cfg.seed,
        ..RunLog::default()
    };
    let started = Instant::now();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = child_rng(cfg.seed, &[0xC1A5]);
    let mut perfect_streak = 0;
    let mut best_val = f64::INFINITY;
    let mut since_best = 0;
    for epoch in 0..cfg.max_epochs {
        let mut dropout_rng = child_rng(cfg.seed, &[0xD807, epoch as u64]);
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g);
            let x = g.input(gather_rows(&inputs.x, chunk));
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let p = model.forward_from(&mut g, &bound, x, inputs.start, true, &mut dropout_rng)?;
            correct += argmax_rows(g.value(p))
                .iter()
                .zip(&batch_labels)
                .filter(|(a, b)| a == b)
                .count();
            let y = g.input(one_hot(&batch_labels, model.n_classes));
            let ce = g.cce(p, y)?;
            let l2 = g.l2_penalty(&bound.trainable_weights(&model.params), cfg.l2_beta);
            let loss = g.add(ce, l2)?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(non_finite(
                    "classifier",
                    epoch,
                    step,
                    format!("batch of {}", chunk.len()),
                    &model.params,
                    cfg.checkpoint_dir.as_deref(),
                ));
            }
            g.backward(loss)?;
            model.params.apply_adam(&mut adam, &g, &bound)?;
            loss_sum += value * chunk.len() as f64;
        }
        let train_accuracy = correct as f64 / train.len() as f64;
        let val_loss = match &val_cache {
            Some((c, l)) => classifier_eval(model, c, Some(l), cfg.eval_batch_size)?.0,
            None => None,
        };
        log.epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / train.len() as f64,
            tasks: Vec::new(),
            train_accuracy: Some(train_accuracy),
            val_loss,
            elapsed_s: started.elapsed().as_secs_f64(),
        });
        maybe_checkpoint(cfg, epoch, &model.params, "classifier")?;
        perfect_streak = if train_accuracy >= 1.0 {
            perfect_streak + 1
        } else {
            0
        };
        if cfg.early_stop.train_accuracy_epochs > 0
            && perfect_streak >= cfg.early_stop.train_accuracy_epochs
        {
            log.stop_reason = Some("train_accuracy".into());
            return Ok(log);
        }
        if let Some(v) = val_loss {
            if v < best_val {
                best_val = v;
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.early_stop.patience > 0 && since_best >= cfg.early_stop.patience {
                    log.stop_reason = Some("val_patience".into());
                    return Ok(log);
                }
            }
        }
    }
    log.stop_reason = Some("max_epochs".into());
    Ok(log)
}

fn check_labels_lenient(model: &ActivityClassifier, ds: &WindowedDataset) -> Result<Vec<usize>> {
    let labels = ds
        .labels()
        .ok_or_else(|| invalid!("validation windows need labels"))?
        .to_vec();
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.n_classes) {
        return Err(invalid!(
            "validation label {bad} out of range for {} classes",
            model.n_classes
        ));
    }
    Ok(labels)
}

/// Reconstruction pretraining with mean squared error plus L2 on weights.
pub fn pretrain_autoencoder(
    ae: &mut Autoencoder,
    unlabeled: &WindowedDataset,
    cfg: &TrainConfig,
) -> Result<RunLog> {
    cfg.validate()?;
    if unlabeled.is_empty() {
        return Err(Error::InsufficientData(
            "no windows for autoencoder pretraining".into(),
        ));
    }
    if unlabeled.window_len() != ae.window_len || unlabeled.channels() != ae.in_channels {
        return Err(crate::error::shape_err!(
            "autoencoder expects [{}, {}] windows, got [{}, {}]",
            ae.window_len,
            ae.in_channels,
            unlabeled.window_len(),
            unlabeled.channels()
        ));
    }
    let steps = cfg
        .steps_per_epoch
        .unwrap_or_else(|| unlabeled.len().div_ceil(cfg.batch_size));
    let mut sampler = TaskSampler::new(unlabeled.len(), cfg.seed, 0xAE);
    let mut adam = ae.params.adam(cfg.adam());
    let mut log = RunLog {
        seed: cfg.seed,
        ..RunLog::default()
    };
    let started = Instant::now();
    for epoch in 0..cfg.max_epochs {
        let mut dropout_rng = child_rng(cfg.seed, &[0xD8AE, epoch as u64]);
        let mut sum = 0.0;
        for step in 0..steps {
            let idx = sampler.next_batch(cfg.batch_size.min(unlabeled.len()));
            let batch = unlabeled.batch(&idx);
            let mut g = Graph::new();
            let bound = ae.params.bind(&mut g);
            let x = g.input(batch);
            let y = ae.forward(&mut g, &bound, x, true, &mut dropout_rng)?;
            let mse = g.mse(y, x)?;
            let l2 = g.l2_penalty(&bound.trainable_weights(&ae.params), cfg.l2_beta);
            let loss = g.add(mse, l2)?;
            let value = g.value(mse).item()?;
            if !g.value(loss).item()?.is_finite() {
                return Err(non_finite(
                    "autoencoder",
                    epoch,
                    step,
                    format!("mse {value}"),
                    &ae.params,
                    cfg.checkpoint_dir.as_deref(),
                ));
            }
            g.backward(loss)?;
            ae.params.apply_adam(&mut adam, &g, &bound)?;
            sum += value;
        }
        log.epochs.push(EpochRecord {
            epoch,
            loss: sum / steps as f64,
            tasks: Vec::new(),
            train_accuracy: None,
            val_loss: None,
            elapsed_s: started.elapsed().as_secs_f64(),
        });
        maybe_checkpoint(cfg, epoch, &ae.params, "autoencoder")?;
    }
    log.stop_reason = Some("max_epochs".into());
    Ok(log)
}
