//! The eight signal transformations used as pretext tasks and the builder for
//! the balanced self-supervised dataset.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::rng::{child_rng, derive_seed, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Noised,
    Scaled,
    Rotated,
    Negated,
    HFlipped,
    Permuted,
    TimeWarped,
    ChannelShuffled,
}

impl TransformKind {
    pub const ALL: [TransformKind; 8] = [
        TransformKind::Noised,
        TransformKind::Scaled,
        TransformKind::Rotated,
        TransformKind::Negated,
        TransformKind::HFlipped,
        TransformKind::Permuted,
        TransformKind::TimeWarped,
        TransformKind::ChannelShuffled,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Noised => "noised",
            TransformKind::Scaled => "scaled",
            TransformKind::Rotated => "rotated",
            TransformKind::Negated => "negated",
            TransformKind::HFlipped => "hflipped",
            TransformKind::Permuted => "permuted",
            TransformKind::TimeWarped => "time_warped",
            TransformKind::ChannelShuffled => "channel_shuffled",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).expect("listed")
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid!("unknown transformation {s:?}"))
    }
}

/// Sampling distributions for transformation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformConfig {
    /// Standard deviation of additive jitter.
    pub noise_sigma: f64,
    /// Scale factor ~ Normal(1, scale_sigma^2), clipped to `[scale_min, scale_max]`.
    pub scale_sigma: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub permute_segments: usize,
    /// Standard deviation of the time-warp knot offsets around unit speed.
    pub warp_sigma: f64,
    pub warp_knots: usize,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.05,
            scale_sigma: 0.1,
            scale_min: 0.7,
            scale_max: 1.3,
            permute_segments: 4,
            warp_sigma: 0.2,
            warp_knots: 4,
        }
    }
}

/// Concrete parameters of one transformation instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TransformParams {
    Noised {
        sigma: f64,
    },
    Scaled {
        factor: f64,
    },
    /// Rotation by `angle` radians about the unit `axis`.
    Rotated {
        axis: [f64; 3],
        angle: f64,
    },
    Negated,
    HFlipped,
    /// Segment `i` spans `bounds[i]..bounds[i + 1]`; the output concatenates
    /// segments in `order`.
    Permuted {
        bounds: Vec<usize>,
        order: Vec<usize>,
    },
    /// Speed offsets at equally spaced knots (endpoints included).
    TimeWarped {
        offsets: Vec<f64>,
    },
    /// Output channel `j` takes input channel `perm[j]`.
    ChannelShuffled {
        perm: Vec<usize>,
    },
}

impl TransformParams {
    pub fn kind(&self) -> TransformKind {
        match self {
            TransformParams::Noised { .. } => TransformKind::Noised,
            TransformParams::Scaled { .. } => TransformKind::Scaled,
            TransformParams::Rotated { .. } => TransformKind::Rotated,
            TransformParams::Negated => TransformKind::Negated,
            TransformParams::HFlipped => TransformKind::HFlipped,
            TransformParams::Permuted { .. } => TransformKind::Permuted,
            TransformParams::TimeWarped { .. } => TransformKind::TimeWarped,
            TransformParams::ChannelShuffled { .. } => TransformKind::ChannelShuffled,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub params: TransformParams,
    /// Seeds any randomness consumed at application time (the jitter draw).
    pub seed: u64,
}

impl TransformSpec {
    pub fn new(params: TransformParams, seed: u64) -> Self {
        Self { params, seed }
    }

    pub fn kind(&self) -> TransformKind {
        self.params.kind()
    }

    /// Draws parameters for a window of `len` steps and `channels` channels.
    pub fn sample(
        kind: TransformKind,
        cfg: &TransformConfig,
        len: usize,
        channels: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = child_rng(seed, &[0x5A4D]);
        let params = match kind {
            TransformKind::Noised => TransformParams::Noised {
                sigma: cfg.noise_sigma,
            },
            TransformKind::Scaled => {
                let n =
                    Normal::new(1.0, cfg.scale_sigma).map_err(|e| invalid!("scale sigma: {e}"))?;
                let factor = n.sample(&mut rng).clamp(cfg.scale_min, cfg.scale_max);
                TransformParams::Scaled { factor }
            }
            TransformKind::Rotated => {
                let axis = loop {
                    let v: [f64; 3] = [
                        rng.sample(StandardNormal),
                        rng.sample(StandardNormal),
                        rng.sample(StandardNormal),
                    ];
                    let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                    if norm > 1e-12 {
                        break [v[0] / norm, v[1] / norm, v[2] / norm];
                    }
                };
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                TransformParams::Rotated { axis, angle }
            }
            TransformKind::Negated => TransformParams::Negated,
            TransformKind::HFlipped => TransformParams::HFlipped,
            TransformKind::Permuted => {
                let segments = cfg.permute_segments;
                if segments < 1 || segments > len {
                    return Err(invalid!("cannot cut {len} steps into {segments} segments"));
                }
                let mut cuts: Vec<usize> =
                    rand::seq::index::sample(&mut rng, len - 1, segments - 1)
                        .into_iter()
                        .map(|c| c + 1)
                        .collect();
                cuts.sort_unstable();
                let mut bounds = vec![0];
                bounds.extend(cuts);
                bounds.push(len);
                let mut order: Vec<usize> = (0..segments).collect();
                if segments > 1 {
                    while order.iter().enumerate().all(|(i, &o)| i == o) {
                        order.shuffle(&mut rng);
                    }
                }
                TransformParams::Permuted { bounds, order }
            }
            TransformKind::TimeWarped => {
                if cfg.warp_sigma < 0.0 {
                    return Err(invalid!("warp sigma must be non-negative"));
                }
                let offsets = (0..cfg.warp_knots + 2)
                    .map(|_| cfg.warp_sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                TransformParams::TimeWarped { offsets }
            }
            TransformKind::ChannelShuffled => {
                if channels < 2 {
                    return Err(invalid!("channel shuffle needs at least two channels"));
                }
                let mut perm: Vec<usize> = (0..channels).collect();
                while perm.iter().enumerate().all(|(i, &p)| i == p) {
                    perm.shuffle(&mut rng);
                }
                TransformParams::ChannelShuffled { perm }
            }
        };
        Ok(Self::new(params, derive_seed(seed, &[0xA991])))
    }
}

/// Applies one transformation to a `[N, C]` window. The output always has the
/// input's shape.
pub fn apply_transform(x: &Tensor, spec: &TransformSpec) -> Result<Tensor> {
    let [n, c] = *x.shape() else {
        return Err(shape_err!(
            "transform input must be [N, C], got {:?}",
            x.shape()
        ));
    };
    let src = x.data();
    let out: Vec<f64> = match &spec.params {
        TransformParams::Noised { sigma } => {
            if !(*sigma >= 0.0) {
                return Err(invalid!("noise sigma must be non-negative, got {sigma}"));
            }
            let mut rng: Rng = crate::rng::rng_from(spec.seed);
            src.iter()
                .map(|&v| v + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect()
        }
        TransformParams::Scaled { factor } => src.iter().map(|&v| v * factor).collect(),
        TransformParams::Rotated { axis, angle } => {
            if c != 3 {
                return Err(shape_err!("rotation needs 3 channels, got {c}"));
            }
            let r = rotation_matrix(*axis, *angle)?;
            let mut out = vec![0.0; src.len()];
            for (o, v) in out.chunks_exact_mut(3).zip(src.chunks_exact(3)) {
                for i in 0..3 {
                    o[i] = r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2];
                }
            }
            out
        }
        TransformParams::Negated => src.iter().map(|&v| -v).collect(),
        TransformParams::HFlipped => src.chunks_exact(c).rev().flatten().copied().collect(),
        TransformParams::Permuted { bounds, order } => {
            validate_permutation(bounds, order, n)?;
            let mut out = Vec::with_capacity(src.len());
            for &seg in order {
                out.extend_from_slice(&src[bounds[seg] * c..bounds[seg + 1] * c]);
            }
            out
        }
        TransformParams::TimeWarped { offsets } => {
            let map = warp_map(offsets, n)?;
            let mut out = vec![0.0; src.len()];
            for (t, &pos) in map.iter().enumerate() {
                let lo = (pos.floor() as usize).min(n - 1);
                let hi = (lo + 1).min(n - 1);
                let frac = pos - lo as f64;
                for ch in 0..c {
                    let a = src[lo * c + ch];
                    let b = src[hi * c + ch];
                    out[t * c + ch] = if frac == 0.0 { a } else { a + frac * (b - a) };
                }
            }
            out
        }
        TransformParams::ChannelShuffled { perm } => {
            if c != 3 {
                return Err(shape_err!("channel shuffle needs 3 channels, got {c}"));
            }
            let mut seen = vec![false; c];
            if perm.len() != c
                || !perm
                    .iter()
                    .all(|&p| p < c && !std::mem::replace(&mut seen[p], true))
            {
                return Err(invalid!("{perm:?} is not a permutation of {c} channels"));
            }
            src.chunks_exact(c)
                .flat_map(|row| perm.iter().map(move |&p| row[p]))
                .collect()
        }
    };
    Tensor::new(vec![n, c], out)
}

fn validate_permutation(bounds: &[usize], order: &[usize], n: usize) -> Result<()> {
    if bounds.len() < 2 || order.len() + 1 != bounds.len() {
        return Err(invalid!(
            "permutation needs at least one segment and one order entry per segment"
        ));
    }
    if bounds[0] != 0
        || *bounds.last().expect("non-empty") != n
        || bounds.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(invalid!(
            "segment bounds {bounds:?} must increase strictly from 0 to {n}"
        ));
    }
    let mut seen = vec![false; order.len()];
    for &o in order {
        if o >= seen.len() || std::mem::replace(&mut seen[o], true) {
            return Err(invalid!("segment order {order:?} is not a permutation"));
        }
    }
    Ok(())
}

/// Rodrigues rotation matrix.
pub fn rotation_matrix(axis: [f64; 3], angle: f64) -> Result<[[f64; 3]; 3]> {
    let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    if !(norm > 0.0) {
        return Err(invalid!("rotation axis must be non-zero"));
    }
    let [x, y, z] = axis.map(|v| v / norm);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    Ok([
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ])
}

/// Monotone map of `[0, n-1]` onto itself: the normalized integral of a natural
/// cubic spline through `1 + offsets` at equally spaced knots.
fn warp_map(offsets: &[f64], n: usize) -> Result<Vec<f64>> {
    if offsets.len() < 2 {
        return Err(invalid!("time warp needs at least two knots"));
    }
    if offsets.iter().any(|o| !o.is_finite()) {
        return Err(invalid!("time warp offsets must be finite"));
    }
    if n == 1 {
        return Ok(vec![0.0]);
    }
    let last = (n - 1) as f64;
    let knots: Vec<f64> = (0..offsets.len())
        .map(|i| last * i as f64 / (offsets.len() - 1) as f64)
        .collect();
    let values: Vec<f64> = offsets.iter().map(|o| 1.0 + o).collect();
    let spline = NaturalSpline::new(&knots, &values);
    let speed: Vec<f64> = (0..n).map(|t| spline.eval(t as f64).max(0.05)).collect();
    let mut cum = vec![0.0; n];
    for t in 1..n {
        cum[t] = cum[t - 1] + 0.5 * (speed[t - 1] + speed[t]);
    }
    let total = cum[n - 1];
    Ok(cum
        .iter()
        .map(|v| (v * last / total).clamp(0.0, last))
        .collect())
}

struct NaturalSpline {
    knots: Vec<f64>,
    values: Vec<f64>,
    second: Vec<f64>,
}

impl NaturalSpline {
    fn new(knots: &[f64], values: &[f64]) -> Self {
        let k = knots.len();
        let mut second = vec![0.0; k];
        if k > 2 {
            // Tridiagonal system for interior second derivatives (Thomas algorithm).
            let m = k - 2;
            let mut diag = vec![0.0; m];
            let mut upper = vec![0.0; m];
            let mut rhs = vec![0.0; m];
            for i in 0..m {
                let (h0, h1) = (knots[i + 1] - knots[i], knots[i + 2] - knots[i + 1]);
                diag[i] = 2.0 * (h0 + h1);
                upper[i] = h1;
                rhs[i] =
                    6.0 * ((values[i + 2] - values[i + 1]) / h1 - (values[i + 1] - values[i]) / h0);
            }
            for i in 1..m {
                let lower = knots[i + 1] - knots[i];
                let w = lower / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            for i in (0..m).rev() {
                let next = if i + 1 < m {
                    upper[i] * second[i + 2]
                } else {
                    0.0
                };
                second[i + 1] = (rhs[i] - next) / diag[i];
            }
        }
        Self {
            knots: knots.to_vec(),
            values: values.to_vec(),
            second,
        }
    }

    fn eval(&self, x: f64) -> f64 {
        let k = self.knots.len();
        let i = match self.knots.iter().rposition(|&kn| kn <= x) {
            Some(i) if i >= k - 1 => k - 2,
            Some(i) => i,
            None => 0,
        };
        let h = self.knots[i + 1] - self.knots[i];
        let a = (self.knots[i + 1] - x) / h;
        let b = (x - self.knots[i]) / h;
        a * self.values[i]
            + b * self.values[i + 1]
            + ((a * a * a - a) * self.second[i] + (b * b * b - b) * self.second[i + 1]) * h * h
                / 6.0
    }
}

/// Instance/label pairs for one pretext task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub kind: TransformKind,
    pub windows: Vec<Arc<Tensor>>,
    /// `true` for transformed windows.
    pub labels: Vec<bool>,
}

impl TaskData {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }
}

/// Balanced binary datasets, one per transformation.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfSupDataset {
    pub tasks: Vec<TaskData>,
    pub window_shape: [usize; 2],
}

impl SelfSupDataset {
    pub fn task(&self, kind: TransformKind) -> Option<&TaskData> {
        self.tasks.iter().find(|t| t.kind == kind)
    }

    pub fn kinds(&self) -> Vec<TransformKind> {
        self.tasks.iter().map(|t| t.kind).collect()
    }
}

/// For each task and each input (repeated `multiplier` times with freshly drawn
/// parameters) emits the original labelled `false` and its transformed version
/// labelled `true`. The originals are shared between tasks.
pub fn generate_selfsup_dataset(
    unlabeled: &[Tensor],
    multiplier: usize,
    kinds: &[TransformKind],
    cfg: &TransformConfig,
    seed: u64,
) -> Result<SelfSupDataset> {
    let first = unlabeled
        .first()
        .ok_or_else(|| Error::InsufficientData("no unlabeled windows to transform".into()))?;
    if multiplier == 0 {
        return Err(invalid!("multiplier must be at least 1"));
    }
    if kinds.is_empty() {
        return Err(invalid!("at least one transformation is required"));
    }
    let [n, c] = *first.shape() else {
        return Err(shape_err!(
            "windows must be [N, C], got {:?}",
            first.shape()
        ));
    };
    if let Some(bad) = unlabeled.iter().find(|w| w.shape() != first.shape()) {
        return Err(shape_err!(
            "window shapes differ: {:?} vs {:?}",
            bad.shape(),
            first.shape()
        ));
    }
    let originals: Vec<Arc<Tensor>> = unlabeled.iter().cloned().map(Arc::new).collect();
    let tasks = kinds
        .par_iter()
        .map(|&kind| -> Result<TaskData> {
            let mut windows = Vec::with_capacity(2 * originals.len() * multiplier);
            let mut labels = Vec::with_capacity(windows.capacity());
            for (i, x) in originals.iter().enumerate() {
                for rep in 0..multiplier {
                    let s = derive_seed(seed, &[kind.index() as u64, i as u64, rep as u64]);
                    let spec = TransformSpec::sample(kind, cfg, n, c, s)?;
                    windows.push(Arc::clone(x));
                    labels.push(false);
                    windows.push(Arc::new(apply_transform(x, &spec)?));
                    labels.push(true);
                }
            }
            Ok(TaskData {
                kind,
                windows,
                labels,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SelfSupDataset {
        tasks,
        window_shape: [n, c],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn spec(params: TransformParams) -> TransformSpec {
        TransformSpec::new(params, 11)
    }

    fn ramp(n: usize, c: usize) -> Tensor {
        Tensor::from_fn(&[n, c], |i| (i as f64 * 0.37).sin() + i as f64 * 0.01)
    }

    #[test]
    fn negate_and_flip_examples() {
        let x = tensor(&[1, 3], &[1.0, -2.0, 3.0]);
        assert_eq!(
            apply_transform(&x, &spec(TransformParams::Negated))
                .unwrap()
                .data(),
            &[-1.0, 2.0, -3.0]
        );
        let y = tensor(&[4, 1], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(
            apply_transform(&y, &spec(TransformParams::HFlipped))
                .unwrap()
                .data(),
            &[4.0, 3.0, 2.0, 1.0]
        );
    }

    #[test]
    fn degenerate_parameters_are_identity() {
        let x = ramp(50, 3);
        for p in [
            TransformParams::Scaled { factor: 1.0 },
            TransformParams::Noised { sigma: 0.0 },
            TransformParams::TimeWarped {
                offsets: vec![0.0; 6],
            },
            TransformParams::Permuted {
                bounds: vec![0, 50],
                order: vec![0],
            },
        ] {
            assert_eq!(apply_transform(&x, &spec(p.clone())).unwrap(), x, "{p:?}");
        }
    }

    #[test]
    fn rotation_half_turn_about_z() {
        let x = tensor(&[2, 3], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let r = apply_transform(
            &x,
            &spec(TransformParams::Rotated {
                axis: [0.0, 0.0, 1.0],
                angle: std::f64::consts::PI,
            }),
        )
        .unwrap();
        for (a, b) in r.data().iter().zip([-1.0, -2.0, 3.0, -1.0, -2.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forced_channel_permutation() {
        let x = tensor(&[1, 3], &[10.0, 20.0, 30.0]);
        let r = apply_transform(
            &x,
            &spec(TransformParams::ChannelShuffled {
                perm: vec![2, 0, 1],
            }),
        )
        .unwrap();
        assert_eq!(r.data(), &[30.0, 10.0, 20.0]);
    }

    #[test]
    fn quarter_permutation_concatenates_segments() {
        let x = Tensor::from_fn(&[400, 1], |i| i as f64);
        let order = vec![2, 0, 3, 1];
        let p = TransformParams::Permuted {
            bounds: vec![0, 100, 200, 300, 400],
            order: order.clone(),
        };
        let r = apply_transform(&x, &spec(p)).unwrap();
        let expected: Vec<f64> = order
            .iter()
            .flat_map(|&s| (s * 100..(s + 1) * 100).map(|v| v as f64))
            .collect();
        assert_eq!(r.data(), expected.as_slice());
        let mut sorted = r.into_data();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(sorted, x.into_data());
    }

    #[test]
    fn invalid_parameters_rejected() {
        let x = ramp(10, 3);
        let two = ramp(10, 2);
        assert!(apply_transform(&x, &spec(TransformParams::Noised { sigma: -1.0 })).is_err());
        assert!(apply_transform(
            &x,
            &spec(TransformParams::Permuted {
                bounds: vec![0],
                order: vec![]
            })
        )
        .is_err());
        assert!(apply_transform(
            &two,
            &spec(TransformParams::Rotated {
                axis: [1.0, 0.0, 0.0],
                angle: 1.0
            })
        )
        .is_err());
        assert!(apply_transform(
            &two,
            &spec(TransformParams::ChannelShuffled { perm: vec![1, 0] })
        )
        .is_err());
        assert!(apply_transform(
            &x,
            &spec(TransformParams::ChannelShuffled {
                perm: vec![0, 0, 1]
            })
        )
        .is_err());
        let cfg = TransformConfig {
            permute_segments: 0,
            ..Default::default()
        };
        assert!(TransformSpec::sample(TransformKind::Permuted, &cfg, 10, 3, 0).is_err());
    }

    #[test]
    fn sampled_parameters_respect_ranges() {
        let cfg = TransformConfig::default();
        for seed in 0..200 {
            let s = TransformSpec::sample(TransformKind::Scaled, &cfg, 400, 3, seed).unwrap();
            let TransformParams::Scaled { factor } = s.params else {
                unreachable!()
            };
            assert!((0.7..=1.3).contains(&factor));
            let s =
                TransformSpec::sample(TransformKind::ChannelShuffled, &cfg, 400, 3, seed).unwrap();
            let TransformParams::ChannelShuffled { perm } = s.params else {
                unreachable!()
            };
            assert_ne!(perm, vec![0, 1, 2]);
            let s = TransformSpec::sample(TransformKind::Permuted, &cfg, 400, 3, seed).unwrap();
            let TransformParams::Permuted { bounds, order } = s.params else {
                unreachable!()
            };
            assert_eq!(bounds.len(), 5);
            assert_ne!(order, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn all_five_shuffles_occur() {
        let cfg = TransformConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..500 {
            let s =
                TransformSpec::sample(TransformKind::ChannelShuffled, &cfg, 10, 3, seed).unwrap();
            let TransformParams::ChannelShuffled { perm } = s.params else {
                unreachable!()
            };
            seen.insert(perm);
        }
        assert_eq!(seen.len(), 5);
    }

    #[test]
    fn selfsup_counts_and_balance() {
        let windows: Vec<Tensor> = (0..10)
            .map(|i| Tensor::filled(&[40, 3], i as f64))
            .collect();
        let cfg = TransformConfig::default();
        let d = generate_selfsup_dataset(&windows, 1, &TransformKind::ALL, &cfg, 3).unwrap();
        assert_eq!(d.tasks.len(), 8);
        for t in &d.tasks {
            assert_eq!(t.len(), 20);
            assert_eq!(t.positives(), 10);
        }
        let d5 = generate_selfsup_dataset(&windows, 5, &TransformKind::ALL, &cfg, 3).unwrap();
        assert!(d5
            .tasks
            .iter()
            .all(|t| t.len() == 100 && t.positives() == 50));
        assert!(generate_selfsup_dataset(&[], 1, &TransformKind::ALL, &cfg, 3).is_err());
        assert!(generate_selfsup_dataset(&windows, 0, &TransformKind::ALL, &cfg, 3).is_err());
    }

    #[test]
    fn selfsup_generation_is_deterministic() {
        let windows: Vec<Tensor> = (0..4)
            .map(|i| Tensor::from_fn(&[60, 3], |j| (j as f64 * 0.37).sin() * (i + 1) as f64))
            .collect();
        let cfg = TransformConfig::default();
        let a = generate_selfsup_dataset(&windows, 2, &TransformKind::ALL, &cfg, 9).unwrap();
        let b = generate_selfsup_dataset(&windows, 2, &TransformKind::ALL, &cfg, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_selfsup_dataset(&windows, 2, &TransformKind::ALL, &cfg, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn kind_names_round_trip() {
        for k in TransformKind::ALL {
            assert_eq!(k.name().parse::<TransformKind>().unwrap(), k);
        }
        assert!("mirrored".parse::<TransformKind>().is_err());
    }
}
