//! Representation diagnostics: SVCCA similarity, input-gradient saliency and
//! pooled-embedding export.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rayon::prelude::*;

use crate::autograd::{Graph, Var};
use crate::data::WindowedDataset;
use crate::error::{invalid, shape_err, Error, Result};
use crate::networks::{trunk_forward, ActivityClassifier, TrunkLayer};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;

/// Fraction of variance kept by the per-view SVD truncation.
pub const SVD_KEEP_VARIANCE: f64 = 0.99;
pub const DEFAULT_TOP_K: usize = 20;
/// Column cap for flattened conv activations.
pub const MAX_DUMP_COLUMNS: usize = 512;
const EVAL_BATCH: usize = 256;

/// Name of the pooled-feature layer in activation dumps.
pub const POOL_LAYER: &str = "global_max_pool";

/// Activations of one layer over a fixed set of examples, `[n, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationDump {
    pub layer_name: String,
    pub activations: Tensor,
    pub model_id: String,
}

fn as_matrix(t: &Tensor) -> Result<DMatrix<f64>> {
    let [n, d] = t.shape() else {
        return Err(shape_err!(
            "expected a [n, d] activation matrix, got {:?}",
            t.shape()
        ));
    };
    Ok(DMatrix::from_row_slice(*n, *d, t.data()))
}

/// Centers the columns, then returns the left singular vectors spanning
/// `SVD_KEEP_VARIANCE` of the variance (an orthonormal basis of the reduced view).
fn reduced_basis(mut m: DMatrix<f64>, view: &str) -> Result<DMatrix<f64>> {
    for mut col in m.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let (rows, scale) = (m.nrows(), m.norm());
    let svd = m.svd(true, false);
    let mut order: Vec<(f64, usize)> = svd
        .singular_values
        .iter()
        .enumerate()
        .map(|(i, &s)| (s, i))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));
    let total: f64 = order.iter().map(|(s, _)| s * s).sum();
    let largest = order.first().map_or(0.0, |o| o.0);
    if total <= 0.0 || largest <= 1e-12 * (1.0 + scale) {
        return Err(invalid!("view {view} has rank 0 after centering"));
    }
    let mut kept = Vec::new();
    let mut acc = 0.0;
    for &(s, i) in &order {
        if acc >= SVD_KEEP_VARIANCE * total {
            break;
        }
        acc += s * s;
        kept.push(i);
    }
    let u = svd.u.expect("left singular vectors requested");
    Ok(DMatrix::from_fn(rows, kept.len(), |r, c| u[(r, kept[c])]))
}

/// Canonical correlations (descending) between the SVD-reduced views.
pub fn svcca_correlations(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let (ma, mb) = (as_matrix(a)?, as_matrix(b)?);
    if ma.nrows() != mb.nrows() {
        return Err(shape_err!(
            "views have {} and {} examples",
            ma.nrows(),
            mb.nrows()
        ));
    }
    let n = ma.nrows();
    // Centering alone caps the retained rank at n - 1, so the sample-size check
    // uses the raw widths; otherwise tiny samples report spurious perfect fits.
    let need = ma.ncols().max(mb.ncols()) + 1;
    if n < need {
        return Err(Error::InsufficientData(format!(
            "SVCCA needs at least {need} examples for views of width {} and {}, got {n}",
            ma.ncols(),
            mb.ncols()
        )));
    }
    let ua = reduced_basis(ma, "A")?;
    let ub = reduced_basis(mb, "B")?;
    // With orthonormal bases the whitened cross-covariance is just ua' ub.
    let cross = ua.transpose() * ub;
    let mut rho: Vec<f64> = cross
        .singular_values()
        .iter()
        .map(|s| s.clamp(0.0, 1.0))
        .collect();
    rho.sort_by(|x, y| y.total_cmp(x));
    Ok(rho)
}

/// Mean of the `top_k` largest canonical correlations (all of them if fewer).
pub fn svcca_similarity(a: &Tensor, b: &Tensor, top_k: usize) -> Result<f64> {
    if top_k == 0 {
        return Err(invalid!("top_k must be positive"));
    }
    let rho = svcca_correlations(a, b)?;
    let k = top_k.min(rho.len());
    Ok(rho[..k].iter().sum::<f64>() / k as f64)
}

/// Keeps `keep` randomly chosen columns (sorted, seeded); returns the input when
/// it is already narrow enough.
pub fn subsample_columns(t: &Tensor, keep: usize, seed: u64) -> Result<Tensor> {
    let [n, d] = *t.shape() else {
        return Err(shape_err!("expected a [n, d] matrix, got {:?}", t.shape()));
    };
    if keep >= d {
        return Ok(t.clone());
    }
    let mut cols = sample(&mut rng_from(seed), d, keep).into_vec();
    cols.sort_unstable();
    let src = t.data();
    let data = (0..n)
        .flat_map(|r| cols.iter().map(move |&c| src[r * d + c]))
        .collect();
    Tensor::new(vec![n, keep], data)
}

/// Trunk activations of every block up to the probe plus the pooled features.
/// Conv maps are flattened time-major and subsampled to at most `max_columns`.
pub fn activation_dumps(
    model: &ActivityClassifier,
    batch: &Tensor,
    model_id: &str,
    max_columns: usize,
    seed: u64,
) -> Result<Vec<ActivationDump>> {
    let n = batch.shape().first().copied().unwrap_or(0);
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g);
    let x = g.input(batch.clone());
    let mut h = x;
    let mut dumps = Vec::new();
    for layer in TrunkLayer::ALL.into_iter().filter(|&l| l <= model.probe) {
        h = trunk_forward(
            &mut g,
            &model.params,
            &bound,
            h,
            layer,
            layer,
            model.dropout,
            false,
            &mut rng_from(0),
        )?;
        let v = g.value(h);
        let flat = v.clone().reshape(vec![n, v.len() / n.max(1)])?;
        let flat = subsample_columns(
            &flat,
            max_columns,
            derive_seed(seed, &[0x5CCA, layer.index() as u64]),
        )?;
        dumps.push(ActivationDump {
            layer_name: layer.name().to_string(),
            activations: flat,
            model_id: model_id.to_string(),
        });
    }
    let pooled = g.global_max_pool(h)?;
    dumps.push(ActivationDump {
        layer_name: POOL_LAYER.to_string(),
        activations: g.value(pooled).clone(),
        model_id: model_id.to_string(),
    });
    Ok(dumps)
}

/// Pairwise similarity grid; rows follow `a`, columns follow `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityGrid {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl SimilarityGrid {
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["layer".to_string()];
        header.extend(self.cols.iter().cloned());
        out.write_record(&header)?;
        for (name, row) in self.rows.iter().zip(&self.values) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| format!("{v:.6}")));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// SVCCA between every pair of dumps. The wider view of each pair is randomly
/// subsampled to the narrower width first.
pub fn layer_similarity_grid(
    a: &[ActivationDump],
    b: &[ActivationDump],
    top_k: usize,
    seed: u64,
) -> Result<SimilarityGrid> {
    let pairs: Vec<(usize, usize)> = (0..a.len())
        .flat_map(|i| (0..b.len()).map(move |j| (i, j)))
        .collect();
    let sims = pairs
        .par_iter()
        .map(|&(i, j)| {
            let (x, y) = (&a[i].activations, &b[j].activations);
            let width = x.shape()[1].min(y.shape()[1]);
            let x = subsample_columns(x, width, derive_seed(seed, &[i as u64, j as u64, 0]))?;
            let y = subsample_columns(y, width, derive_seed(seed, &[i as u64, j as u64, 1]))?;
            svcca_similarity(&x, &y, top_k)
        })
        .collect::<Result<Vec<f64>>>()?;
    let values = sims.chunks(b.len().max(1)).map(<[f64]>::to_vec).collect();
    Ok(SimilarityGrid {
        rows: a
            .iter()
            .map(|d| format!("{}:{}", d.model_id, d.layer_name))
            .collect(),
        cols: b
            .iter()
            .map(|d| format!("{}:{}", d.model_id, d.layer_name))
            .collect(),
        values,
    })
}

/// Which class the saliency loss is taken against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SaliencyTarget {
    /// The model's highest-scoring class.
    #[default]
    Predicted,
    Class(usize),
}

/// Per-element `|dL/dx|` for `L = -log p_target` of a single `[N, C]` input,
/// with `forward` mapping a `[1, N, C]` input var to `[1, n]` probabilities.
pub fn input_gradient(
    x: &Tensor,
    target: SaliencyTarget,
    forward: impl FnOnce(&mut Graph, Var) -> Result<Var>,
) -> Result<Tensor> {
    let [n, c] = *x.shape() else {
        return Err(shape_err!(
            "saliency expects a single [N, C] window, got {:?}",
            x.shape()
        ));
    };
    let mut g = Graph::new();
    let xv = g.leaf(x.clone().reshape(vec![1, n, c])?, true);
    let p = forward(&mut g, xv)?;
    let probs = g.value(p).data().to_vec();
    let class = match target {
        SaliencyTarget::Predicted => probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(i, _)| i),
        SaliencyTarget::Class(k) if k < probs.len() => k,
        SaliencyTarget::Class(k) => {
            return Err(invalid!(
                "class {k} out of range for {} outputs",
                probs.len()
            ))
        }
    };
    let y = g.input(Tensor::from_fn(&[1, probs.len()], |i| {
        if i == class {
            1.0
        } else {
            0.0
        }
    }));
    let loss = g.cce(p, y)?;
    g.backward(loss)?;
    let grad = g
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; n * c]);
    Tensor::new(vec![n, c], grad.into_iter().map(f64::abs).collect())
}

/// Euclidean norm across channels of an `[N, C]` gradient magnitude map.
pub fn channel_norm(g: &Tensor) -> Result<Tensor> {
    let [n, c] = *g.shape() else {
        return Err(shape_err!("expected [N, C], got {:?}", g.shape()));
    };
    let d = g.data();
    Tensor::new(
        vec![n],
        (0..n)
            .map(|t| {
                d[t * c..(t + 1) * c]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect(),
    )
}

/// Per-time-step saliency scores `[N]` of a trained classifier.
pub fn saliency_map(
    model: &ActivityClassifier,
    x: &Tensor,
    target: SaliencyTarget,
) -> Result<Tensor> {
    let grad = input_gradient(x, target, |g, xv| {
        let bound = model.params.bind(g);
        model.forward(g, &bound, xv, false, &mut rng_from(0))
    })?;
    channel_norm(&grad)
}

/// Saliency for every window of `ds`, in order.
pub fn saliency_maps(
    model: &ActivityClassifier,
    ds: &WindowedDataset,
    target: SaliencyTarget,
) -> Result<Vec<Tensor>> {
    (0..ds.len())
        .into_par_iter()
        .map(|i| saliency_map(model, &ds.window(i), target))
        .collect()
}

/// Writes one row per window: `window,label,s0..s{N-1}`.
pub fn write_saliency_csv(maps: &[Tensor], labels: Option<&[usize]>, w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let n = maps.first().map_or(0, Tensor::len);
    let mut header = vec!["window".to_string(), "label".to_string()];
    header.extend((0..n).map(|t| format!("s{t}")));
    out.write_record(&header)?;
    for (i, m) in maps.iter().enumerate() {
        let mut rec = vec![
            i.to_string(),
            labels.map(|l| l[i].to_string()).unwrap_or_default(),
        ];
        rec.extend(m.data().iter().map(|v| format!("{v:.9e}")));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Pooled trunk features of every window, `[n, width]`, computed in batches.
pub fn embeddings(model: &ActivityClassifier, ds: &WindowedDataset) -> Result<Tensor> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let parts = idx
        .par_chunks(EVAL_BATCH)
        .map(|chunk| model.features(&ds.batch(chunk)))
        .collect::<Result<Vec<Tensor>>>()?;
    let width = model.probe.width();
    let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(vec![ds.len(), width], data)
}

/// Embedding CSV: `model,window,user,label,e0..e{d-1}`; `label` is empty for
/// unlabeled data.
pub fn export_embeddings(
    model: &ActivityClassifier,
    ds: &WindowedDataset,
    model_id: &str,
    w: impl Write,
) -> Result<()> {
    let emb = embeddings(model, ds)?;
    let d = emb.shape()[1];
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = ["model", "window", "user", "label"]
        .map(String::from)
        .into();
    header.extend((0..d).map(|j| format!("e{j}")));
    out.write_record(&header)?;
    for (i, row) in emb.data().chunks_exact(d).enumerate() {
        let mut rec = vec![
            model_id.to_string(),
            i.to_string(),
            ds.user_ids()[i].clone(),
            ds.labels().map(|l| l[i].to_string()).unwrap_or_default(),
        ];
        rec.extend(row.iter().map(|v| format!("{v:.9e}")));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Column count of an embedding CSV for a given feature width.
pub fn embedding_columns(width: usize) -> usize {
    width + 4
}
