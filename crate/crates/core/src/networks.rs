//! Transformation prediction network, activity classifier and autoencoder
//! baseline. All three share the same temporal convolution trunk so trunk
//! weights can move between them by name.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::params::{fan_uniform, Bound, ParamStore};
use crate::rng::{child_rng, rng_from, Rng};
use crate::tensor::Tensor;
use crate::transforms::TransformKind;

/// `(filters, kernel)` per convolution block, stride 1, valid padding.
pub const TRUNK_BLOCKS: [(usize, usize); 3] = [(32, 24), (64, 16), (96, 8)];
pub const TRUNK_PREFIX: &str = "trunk.";
pub const TPN_HIDDEN: usize = 256;
pub const CLASSIFIER_HIDDEN: usize = 1024;
pub const DEFAULT_DROPOUT: f64 = 0.1;
/// Convolution kernels start Glorot-uniform. Dense layers use a sixth of that
/// variance, which keeps the initial head logits and L2 term small.
const GLOROT_GAIN: f64 = 2.449_489_742_783_178;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrunkLayer {
    ConvA,
    ConvB,
    ConvC,
}

impl TrunkLayer {
    pub const ALL: [TrunkLayer; 3] = [TrunkLayer::ConvA, TrunkLayer::ConvB, TrunkLayer::ConvC];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TrunkLayer::ConvA => "conv_a",
            TrunkLayer::ConvB => "conv_b",
            TrunkLayer::ConvC => "conv_c",
        }
    }

    /// Feature width after pooling this block's output.
    pub fn width(self) -> usize {
        TRUNK_BLOCKS[self.index()].0
    }

    pub fn kernel_name(self) -> String {
        format!("{TRUNK_PREFIX}{}.kernel", self.name())
    }

    pub fn bias_name(self) -> String {
        format!("{TRUNK_PREFIX}{}.bias", self.name())
    }

    pub fn prefix(self) -> String {
        format!("{TRUNK_PREFIX}{}.", self.name())
    }
}

impl fmt::Display for TrunkLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrunkLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "conv_a" | "conva" | "a" => Ok(TrunkLayer::ConvA),
            "conv_b" | "convb" | "b" => Ok(TrunkLayer::ConvB),
            "conv_c" | "convc" | "c" => Ok(TrunkLayer::ConvC),
            _ => Err(invalid!("unknown trunk layer {s:?}")),
        }
    }
}

/// Trunk output length after `upto` for an input of `len` samples.
pub fn trunk_output_len(len: usize, upto: TrunkLayer) -> Option<usize> {
    TRUNK_BLOCKS[..=upto.index()]
        .iter()
        .try_fold(len, |l, &(_, k)| l.checked_sub(k - 1).filter(|&v| v > 0))
}

/// Adds trunk blocks up to and including `upto`.
pub fn init_trunk(store: &mut ParamStore, in_channels: usize, upto: TrunkLayer, rng: &mut Rng) {
    let mut cin = in_channels;
    for layer in &TrunkLayer::ALL[..=upto.index()] {
        let (filters, k) = TRUNK_BLOCKS[layer.index()];
        store.push(
            layer.kernel_name(),
            fan_uniform(&[k, cin, filters], k * cin, k * filters, GLOROT_GAIN, rng),
        );
        store.push(layer.bias_name(), Tensor::zeros(&[filters]));
        cin = filters;
    }
}

fn init_dense(store: &mut ParamStore, prefix: &str, din: usize, dout: usize, rng: &mut Rng) {
    store.push(
        format!("{prefix}.weight"),
        fan_uniform(&[din, dout], din, dout, 1.0, rng),
    );
    store.push(format!("{prefix}.bias"), Tensor::zeros(&[dout]));
}

/// Runs trunk blocks `from..=to` on `x`. Dropout follows each block's ReLU and
/// is only active for trainable blocks in training mode; frozen blocks behave
/// as fixed feature extractors.
#[allow(clippy::too_many_arguments)]
pub fn trunk_forward(
    g: &mut Graph,
    store: &ParamStore,
    bound: &Bound,
    x: Var,
    from: TrunkLayer,
    to: TrunkLayer,
    dropout: f64,
    training: bool,
    rng: &mut Rng,
) -> Result<Var> {
    let mut h = x;
    for layer in &TrunkLayer::ALL[from.index()..=to.index()] {
        let kn = layer.kernel_name();
        let conv = g.conv1d(h, bound.var(&kn), bound.var(&layer.bias_name()))?;
        let act = g.relu(conv);
        let trainable = !store.is_frozen(&kn);
        h = g.dropout(act, dropout, training && trainable, rng)?;
    }
    Ok(h)
}

/// Multi-task transformation prediction network: shared trunk plus one binary
/// head per task.
#[derive(Clone, Debug, PartialEq)]
pub struct Tpn {
    pub params: ParamStore,
    pub tasks: Vec<TransformKind>,
    pub task_weights: Vec<f64>,
    pub dropout: f64,
    /// Dropout after each head's hidden layer.
    pub head_dropout: bool,
    pub in_channels: usize,
}

impl Tpn {
    pub fn new(tasks: &[TransformKind], in_channels: usize, seed: u64) -> Result<Self> {
        if tasks.is_empty() {
            return Err(invalid!("a TPN needs at least one task"));
        }
        let mut sorted = tasks.to_vec();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != tasks.len() {
            return Err(invalid!("duplicate tasks in {tasks:?}"));
        }
        let mut rng = child_rng(seed, &[0x7B0]);
        let mut params = ParamStore::new();
        init_trunk(&mut params, in_channels, TrunkLayer::ConvC, &mut rng);
        let width = TrunkLayer::ConvC.width();
        for t in tasks {
            init_dense(
                &mut params,
                &format!("head.{t}.hidden"),
                width,
                TPN_HIDDEN,
                &mut rng,
            );
            init_dense(
                &mut params,
                &format!("head.{t}.out"),
                TPN_HIDDEN,
                1,
                &mut rng,
            );
        }
        Ok(Self {
            params,
            tasks: tasks.to_vec(),
            task_weights: vec![1.0; tasks.len()],
            dropout: DEFAULT_DROPOUT,
            head_dropout: false,
            in_channels,
        })
    }

    /// Rebuilds a TPN around loaded parameters, checking every expected entry.
    pub fn from_params(params: ParamStore, tasks: &[TransformKind]) -> Result<Self> {
        let kernel = params.tensor(&TrunkLayer::ConvA.kernel_name())?;
        let in_channels = kernel.shape()[1];
        let template = Self::new(tasks, in_channels, 0)?;
        check_compatible(&template.params, &params)?;
        Ok(Self { params, ..template })
    }

    pub fn head_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn trunk_params(&self) -> ParamStore {
        trunk_only(&self.params)
    }

    /// Per-task probabilities for `segments[t]` rows of the pooled features
    /// (`None` uses every row). Returns one `[rows]` probability node per task.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        x: Var,
        segments: Option<&[(usize, usize)]>,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Vec<Var>> {
        let fmap = trunk_forward(
            g,
            &self.params,
            bound,
            x,
            TrunkLayer::ConvA,
            TrunkLayer::ConvC,
            self.dropout,
            training,
            rng,
        )?;
        let pooled = g.global_max_pool(fmap)?;
        let rows = g.value(pooled).shape()[0];
        let mut out = Vec::with_capacity(self.tasks.len());
        for (ti, t) in self.tasks.iter().enumerate() {
            let (start, end) = segments.map_or((0, rows), |s| s[ti]);
            let feats = if (start, end) == (0, rows) {
                pooled
            } else {
                g.slice_rows(pooled, start, end)?
            };
            let hidden = g.dense(
                feats,
                bound.var(&format!("head.{t}.hidden.weight")),
                bound.var(&format!("head.{t}.hidden.bias")),
            )?;
            let hidden = g.relu(hidden);
            let hidden = g.dropout(hidden, self.dropout, training && self.head_dropout, rng)?;
            let logit = g.dense(
                hidden,
                bound.var(&format!("head.{t}.out.weight")),
                bound.var(&format!("head.{t}.out.bias")),
            )?;
            let prob = g.sigmoid(logit);
            out.push(g.reshape(prob, &[end - start])?);
        }
        Ok(out)
    }

    /// Inference: per-task probability vectors for a `[B, N, C]` batch.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
        check_batch(batch, self.in_channels)?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let x = g.input(batch.clone());
        let probs = self.forward(&mut g, &bound, x, None, false, &mut rng_from(0))?;
        Ok(probs
            .into_iter()
            .map(|p| g.value(p).data().to_vec())
            .collect())
    }
}

fn check_batch(batch: &Tensor, channels: usize) -> Result<()> {
    match batch.shape() {
        [_, n, c] if *c == channels && trunk_output_len(*n, TrunkLayer::ConvC).is_some() => Ok(()),
        s => Err(shape_err!(
            "expected [B, N >= 46, {channels}] input, got {s:?}"
        )),
    }
}

fn check_compatible(template: &ParamStore, actual: &ParamStore) -> Result<()> {
    if template.len() != actual.len() {
        return Err(shape_err!(
            "expected {} parameter tensors, found {}",
            template.len(),
            actual.len()
        ));
    }
    for e in template.entries() {
        let a = actual
            .get(&e.name)
            .ok_or_else(|| shape_err!("missing parameter {}", e.name))?;
        if a.shape() != e.tensor.shape() {
            return Err(shape_err!(
                "{}: expected shape {:?}, found {:?}",
                e.name,
                e.tensor.shape(),
                a.shape()
            ));
        }
    }
    Ok(())
}

/// Trunk entries of `store`.
pub fn trunk_only(store: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for e in store
        .entries()
        .iter()
        .filter(|e| e.name.starts_with(TRUNK_PREFIX))
    {
        out.push(e.name.clone(), e.tensor.clone());
    }
    out
}

/// Which trunk blocks stay fixed after transfer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    /// Every block trainable.
    None,
    /// Every transferred block frozen.
    All,
    /// ConvA and ConvB frozen; ConvC fine-tuned.
    AllButConvC,
}

impl FromStr for FreezeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FreezeMode::None),
            "all" => Ok(FreezeMode::All),
            "all_but_conv_c" | "all-but-conv-c" => Ok(FreezeMode::AllButConvC),
            _ => Err(invalid!("unknown freeze mode {s:?}")),
        }
    }
}

/// Trunk followed by a 1024-unit hidden layer and a softmax output. A probe
/// classifier stops the trunk early at `probe`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivityClassifier {
    pub params: ParamStore,
    pub n_classes: usize,
    pub probe: TrunkLayer,
    pub dropout: f64,
    pub in_channels: usize,
}

impl ActivityClassifier {
    pub fn new(n_classes: usize, in_channels: usize, probe: TrunkLayer, seed: u64) -> Result<Self> {
        if n_classes < 2 {
            return Err(invalid!(
                "a classifier needs at least 2 classes, got {n_classes}"
            ));
        }
        let mut rng = child_rng(seed, &[0xAC7]);
        let mut params = ParamStore::new();
        init_trunk(&mut params, in_channels, probe, &mut rng);
        let mut model = Self {
            params,
            n_classes,
            probe,
            dropout: DEFAULT_DROPOUT,
            in_channels,
        };
        model.reinit_head(seed);
        Ok(model)
    }

    /// Replaces the classification head with fresh weights.
    pub fn reinit_head(&mut self, seed: u64) {
        let mut rng = child_rng(seed, &[0x4EAD]);
        let mut params = trunk_only(&self.params);
        for e in self
            .params
            .entries()
            .iter()
            .filter(|e| e.name.starts_with(TRUNK_PREFIX) && e.frozen)
        {
            params.set_frozen_prefix(&e.name, true);
        }
        init_dense(
            &mut params,
            "classifier.hidden",
            self.probe.width(),
            CLASSIFIER_HIDDEN,
            &mut rng,
        );
        init_dense(
            &mut params,
            "classifier.out",
            CLASSIFIER_HIDDEN,
            self.n_classes,
            &mut rng,
        );
        self.params = params;
    }

    pub fn set_freeze(&mut self, mode: FreezeMode) {
        self.params.set_frozen_prefix(TRUNK_PREFIX, false);
        match mode {
            FreezeMode::None => {}
            FreezeMode::All => self.params.set_frozen_prefix(TRUNK_PREFIX, true),
            FreezeMode::AllButConvC => {
                self.params
                    .set_frozen_prefix(&TrunkLayer::ConvA.prefix(), true);
                self.params
                    .set_frozen_prefix(&TrunkLayer::ConvB.prefix(), true);
            }
        }
    }

    pub fn from_params(params: ParamStore, n_classes: usize, probe: TrunkLayer) -> Result<Self> {
        let in_channels = params.tensor(&TrunkLayer::ConvA.kernel_name())?.shape()[1];
        let template = Self::new(n_classes, in_channels, probe, 0)?;
        check_compatible(&template.params, &params)?;
        Ok(Self { params, ..template })
    }

    /// Infers class count and probe depth from a checkpoint.
    pub fn from_checkpoint(params: ParamStore) -> Result<Self> {
        let out = params.tensor("classifier.out.bias")?;
        let n_classes = out.len();
        let probe = TrunkLayer::ALL
            .iter()
            .rev()
            .copied()
            .find(|l| params.get(&l.kernel_name()).is_some())
            .ok_or_else(|| invalid!("checkpoint holds no trunk"))?;
        Self::from_params(params, n_classes, probe)
    }

    /// First trunk block that is trainable, or `None` when the whole trunk is frozen.
    pub fn first_trainable_block(&self) -> Option<TrunkLayer> {
        TrunkLayer::ALL[..=self.probe.index()]
            .iter()
            .copied()
            .find(|l| !self.params.is_frozen(&l.kernel_name()))
    }

    pub fn trunk_is_frozen(&self) -> bool {
        self.first_trainable_block().is_none()
    }

    /// Class probabilities from the trunk's `start` block onwards; `x` must be the
    /// input expected by that block (raw windows when `start` is ConvA). With
    /// `start = None`, `x` holds pooled features.
    pub fn forward_from(
        &self,
        g: &mut Graph,
        bound: &Bound,
        x: Var,
        start: Option<TrunkLayer>,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        let pooled = match start {
            Some(s) => {
                let fmap = trunk_forward(
                    g,
                    &self.params,
                    bound,
                    x,
                    s,
                    self.probe,
                    self.dropout,
                    training,
                    rng,
                )?;
                g.global_max_pool(fmap)?
            }
            None => x,
        };
        let hidden = g.dense(
            pooled,
            bound.var("classifier.hidden.weight"),
            bound.var("classifier.hidden.bias"),
        )?;
        let hidden = g.relu(hidden);
        let logits = g.dense(
            hidden,
            bound.var("classifier.out.weight"),
            bound.var("classifier.out.bias"),
        )?;
        g.softmax(logits, 1)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        x: Var,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        self.forward_from(g, bound, x, Some(TrunkLayer::ConvA), training, rng)
    }

    /// Inference output of trunk blocks `ConvA..=upto` (before pooling) for a
    /// `[B, N, C]` batch.
    pub fn trunk_activations(&self, batch: &Tensor, upto: TrunkLayer) -> Result<Tensor> {
        check_batch(batch, self.in_channels)?;
        if upto > self.probe {
            return Err(invalid!(
                "{upto} lies beyond the probed block {}",
                self.probe
            ));
        }
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let x = g.input(batch.clone());
        let h = trunk_forward(
            &mut g,
            &self.params,
            &bound,
            x,
            TrunkLayer::ConvA,
            upto,
            self.dropout,
            false,
            &mut rng_from(0),
        )?;
        Ok(g.value(h).clone())
    }

    /// Pooled trunk features, `[B, width]`.
    pub fn features(&self, batch: &Tensor) -> Result<Tensor> {
        let fmap = self.trunk_activations(batch, self.probe)?;
        let mut g = Graph::new();
        let x = g.input(fmap);
        let p = g.global_max_pool(x)?;
        Ok(g.value(p).clone())
    }

    /// Class probabilities `[B, n]`.
    pub fn predict_proba(&self, batch: &Tensor) -> Result<Tensor> {
        check_batch(batch, self.in_channels)?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let x = g.input(batch.clone());
        let p = self.forward(&mut g, &bound, x, false, &mut rng_from(0))?;
        Ok(g.value(p).clone())
    }
}

/// Copies the trunk blocks present in `target` from `source`, sets the freeze
/// flags and re-initializes the classification head.
pub fn transfer_weights(
    source: &ParamStore,
    target: &mut ActivityClassifier,
    freeze: FreezeMode,
    head_seed: u64,
) -> Result<()> {
    target.params.copy_prefix_from(source, TRUNK_PREFIX)?;
    target.set_freeze(freeze);
    target.reinit_head(head_seed);
    Ok(())
}

/// Convolutional autoencoder with the trunk as encoder. The decoder expands the
/// pooled code to the ConvC feature map shape and mirrors the trunk with
/// transposed (fully padded) convolutions back to the input shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    pub params: ParamStore,
    pub window_len: usize,
    pub in_channels: usize,
    pub dropout: f64,
}

impl Autoencoder {
    pub fn new(window_len: usize, in_channels: usize, seed: u64) -> Result<Self> {
        let code_len = trunk_output_len(window_len, TrunkLayer::ConvC)
            .ok_or_else(|| invalid!("window length {window_len} is too short for the trunk"))?;
        let mut rng = child_rng(seed, &[0xAE]);
        let mut params = ParamStore::new();
        init_trunk(&mut params, in_channels, TrunkLayer::ConvC, &mut rng);
        let width = TrunkLayer::ConvC.width();
        init_dense(
            &mut params,
            "decoder.expand",
            width,
            code_len * width,
            &mut rng,
        );
        let mut cin = width;
        for layer in TrunkLayer::ALL.iter().rev() {
            let k = TRUNK_BLOCKS[layer.index()].1;
            let cout = match layer {
                TrunkLayer::ConvA => in_channels,
                l => TRUNK_BLOCKS[l.index() - 1].0,
            };
            params.push(
                format!("decoder.de{}.kernel", layer.name()),
                fan_uniform(&[k, cin, cout], k * cin, k * cout, GLOROT_GAIN, &mut rng),
            );
            params.push(
                format!("decoder.de{}.bias", layer.name()),
                Tensor::zeros(&[cout]),
            );
            cin = cout;
        }
        Ok(Self {
            params,
            window_len,
            in_channels,
            dropout: DEFAULT_DROPOUT,
        })
    }

    pub fn from_params(params: ParamStore, window_len: usize) -> Result<Self> {
        let in_channels = params.tensor(&TrunkLayer::ConvA.kernel_name())?.shape()[1];
        let template = Self::new(window_len, in_channels, 0)?;
        check_compatible(&template.params, &params)?;
        Ok(Self { params, ..template })
    }

    pub fn trunk_params(&self) -> ParamStore {
        trunk_only(&self.params)
    }

    /// Reconstruction of `x: [B, N, C]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        x: Var,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        let batch = g.value(x).shape()[0];
        let fmap = trunk_forward(
            g,
            &self.params,
            bound,
            x,
            TrunkLayer::ConvA,
            TrunkLayer::ConvC,
            self.dropout,
            training,
            rng,
        )?;
        let code = g.global_max_pool(fmap)?;
        let width = TrunkLayer::ConvC.width();
        let code_len =
            trunk_output_len(self.window_len, TrunkLayer::ConvC).expect("checked at construction");
        let expanded = g.dense(
            code,
            bound.var("decoder.expand.weight"),
            bound.var("decoder.expand.bias"),
        )?;
        let expanded = g.relu(expanded);
        let mut h = g.reshape(expanded, &[batch, code_len, width])?;
        for layer in TrunkLayer::ALL.iter().rev() {
            let k = TRUNK_BLOCKS[layer.index()].1;
            let padded = g.pad_time(h, k - 1, k - 1)?;
            let name = format!("decoder.de{}", layer.name());
            h = g.conv1d(
                padded,
                bound.var(&format!("{name}.kernel")),
                bound.var(&format!("{name}.bias")),
            )?;
            if *layer != TrunkLayer::ConvA {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    pub fn reconstruct(&self, batch: &Tensor) -> Result<Tensor> {
        check_batch(batch, self.in_channels)?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let x = g.input(batch.clone());
        let y = self.forward(&mut g, &bound, x, false, &mut rng_from(0))?;
        Ok(g.value(y).clone())
    }
}

/// Number of scalar parameters.
pub fn param_count(params: &ParamStore) -> usize {
    params.count()
}
