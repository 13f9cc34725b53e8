//! Recording ingestion, windowing, normalization, user-level splits and the
//! windowed-dataset file format.
//!
//! Windowed-dataset layout (integers little-endian):
//!
//! ```text
//! magic       8 bytes  b"SSHARWDS"
//! version     u32      = 1
//! M           u64      window count
//! N           u32      samples per window
//! C           u32      channels
//! flags       u8       bit 0: labels, bit 1: normalization stats, bit 2: task ids
//! windows     M*N*C f64, row-major [M, N, C]
//! labels      M u32                  (if bit 0)
//! task ids    M u8                   (if bit 2)
//! norm stats  C f64 means, C f64 stds (if bit 1)
//! users       u32 U, then U x (u32 len, UTF-8 bytes), then M u32 indices into that table
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::params::{read_f64, read_u32, read_u64};
use crate::rng::{child_rng, derive_seed};
use crate::tensor::Tensor;

pub const WINDOW_LEN: usize = 400;
pub const WINDOW_OVERLAP: f64 = 0.5;
pub const CHANNELS: usize = 3;
pub const DATASET_MAGIC: &[u8; 8] = b"SSHARWDS";
pub const DATASET_VERSION: u32 = 1;
/// Lower bound on the per-channel standard deviation used for normalization.
pub const STD_FLOOR: f64 = 1e-8;

const FLAG_LABELS: u8 = 1;
const FLAG_STATS: u8 = 2;
const FLAG_TASKS: u8 = 4;

/// A contiguous recording of one user performing one activity.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRecording {
    pub user_id: String,
    pub activity_label: Option<i64>,
    /// `[L, 3]` accelerometer samples.
    pub samples: Tensor,
    pub sample_rate_hz: f64,
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowedDataset {
    window_len: usize,
    channels: usize,
    /// Row-major `[M, N, C]`.
    data: Vec<f64>,
    labels: Option<Vec<usize>>,
    user_ids: Vec<String>,
    task_ids: Option<Vec<u8>>,
    norm_stats: Option<NormStats>,
}

impl WindowedDataset {
    pub fn new(
        window_len: usize,
        channels: usize,
        data: Vec<f64>,
        labels: Option<Vec<usize>>,
        user_ids: Vec<String>,
    ) -> Result<Self> {
        if window_len == 0 || channels == 0 {
            return Err(shape_err!(
                "window length and channel count must be positive"
            ));
        }
        let stride = window_len * channels;
        if !data.len().is_multiple_of(stride) {
            return Err(shape_err!(
                "{} values do not form whole [{window_len}, {channels}] windows",
                data.len()
            ));
        }
        let m = data.len() / stride;
        if user_ids.len() != m {
            return Err(shape_err!("{m} windows but {} user ids", user_ids.len()));
        }
        if labels.as_ref().is_some_and(|l| l.len() != m) {
            return Err(shape_err!("{m} windows but a different number of labels"));
        }
        Ok(Self {
            window_len,
            channels,
            data,
            labels,
            user_ids,
            task_ids: None,
            norm_stats: None,
        })
    }

    /// Builds a dataset from `[N, C]` window tensors.
    pub fn from_windows(
        windows: &[Tensor],
        labels: Option<Vec<usize>>,
        user_ids: Vec<String>,
    ) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::InsufficientData("no windows".into()))?;
        let [n, c] = *first.shape() else {
            return Err(shape_err!(
                "windows must be [N, C], got {:?}",
                first.shape()
            ));
        };
        let mut data = Vec::with_capacity(windows.len() * n * c);
        for w in windows {
            if w.shape() != [n, c] {
                return Err(shape_err!(
                    "window shape {:?} differs from [{n}, {c}]",
                    w.shape()
                ));
            }
            data.extend_from_slice(w.data());
        }
        Self::new(n, c, data, labels, user_ids)
    }

    pub fn with_task_ids(mut self, task_ids: Vec<u8>) -> Result<Self> {
        if task_ids.len() != self.len() {
            return Err(shape_err!(
                "{} windows but {} task ids",
                self.len(),
                task_ids.len()
            ));
        }
        self.task_ids = Some(task_ids);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.user_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.user_ids.is_empty()
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn task_ids(&self) -> Option<&[u8]> {
        self.task_ids.as_deref()
    }

    pub fn norm_stats(&self) -> Option<&NormStats> {
        self.norm_stats.as_ref()
    }

    pub fn window_slice(&self, i: usize) -> &[f64] {
        let stride = self.window_len * self.channels;
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn window(&self, i: usize) -> Tensor {
        Tensor::new(
            vec![self.window_len, self.channels],
            self.window_slice(i).to_vec(),
        )
        .expect("window shape")
    }

    pub fn windows(&self) -> Vec<Tensor> {
        (0..self.len()).map(|i| self.window(i)).collect()
    }

    /// `[B, N, C]` batch of the given windows.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.window_len * self.channels);
        for &i in indices {
            data.extend_from_slice(self.window_slice(i));
        }
        Tensor::new(vec![indices.len(), self.window_len, self.channels], data).expect("batch shape")
    }

    /// Sorted distinct user ids.
    pub fn users(&self) -> Vec<String> {
        self.user_ids
            .iter()
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// One more than the largest label, or 0 when unlabeled.
    pub fn n_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |m| m + 1)
    }

    /// Indices of windows belonging to each class.
    pub fn class_indices(&self) -> Result<Vec<Vec<usize>>> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| invalid!("dataset has no labels"))?;
        let mut out = vec![Vec::new(); self.n_classes()];
        for (i, &l) in labels.iter().enumerate() {
            out[l].push(i);
        }
        Ok(out)
    }

    /// Sub-dataset in the given order. Normalization stats carry over.
    pub fn select(&self, indices: &[usize]) -> Self {
        let stride = self.window_len * self.channels;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend_from_slice(self.window_slice(i));
        }
        Self {
            window_len: self.window_len,
            channels: self.channels,
            data,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            user_ids: indices.iter().map(|&i| self.user_ids[i].clone()).collect(),
            task_ids: self
                .task_ids
                .as_ref()
                .map(|t| indices.iter().map(|&i| t[i]).collect()),
            norm_stats: self.norm_stats.clone(),
        }
    }

    pub fn select_users(&self, users: &BTreeSet<String>) -> Self {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| users.contains(&self.user_ids[i]))
            .collect();
        self.select(&idx)
    }

    /// Appends `other`, which must share window geometry and label presence.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if (self.window_len, self.channels) != (other.window_len, other.channels)
            || self.labels.is_some() != other.labels.is_some()
        {
            return Err(shape_err!(
                "cannot concatenate datasets with different geometry or label presence"
            ));
        }
        let mut out = self.clone();
        out.data.extend_from_slice(&other.data);
        if let (Some(a), Some(b)) = (out.labels.as_mut(), other.labels.as_ref()) {
            a.extend_from_slice(b);
        }
        out.user_ids.extend(other.user_ids.iter().cloned());
        out.task_ids = None;
        Ok(out)
    }

    pub fn without_labels(&self) -> Self {
        Self {
            labels: None,
            ..self.clone()
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.window_len as u32).to_le_bytes())?;
        w.write_all(&(self.channels as u32).to_le_bytes())?;
        let mut flags = 0u8;
        if self.labels.is_some() {
            flags |= FLAG_LABELS;
        }
        if self.norm_stats.is_some() {
            flags |= FLAG_STATS;
        }
        if self.task_ids.is_some() {
            flags |= FLAG_TASKS;
        }
        w.write_all(&[flags])?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        if let Some(labels) = &self.labels {
            for &l in labels {
                w.write_all(&(l as u32).to_le_bytes())?;
            }
        }
        if let Some(tasks) = &self.task_ids {
            w.write_all(tasks)?;
        }
        if let Some(stats) = &self.norm_stats {
            for v in stats.mean.iter().chain(&stats.std) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        let table = self.users();
        let index: BTreeMap<&str, u32> = table
            .iter()
            .enumerate()
            .map(|(i, u)| (u.as_str(), i as u32))
            .collect();
        w.write_all(&(table.len() as u32).to_le_bytes())?;
        for u in &table {
            w.write_all(&(u.len() as u32).to_le_bytes())?;
            w.write_all(u.as_bytes())?;
        }
        for u in &self.user_ids {
            w.write_all(&index[u.as_str()].to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a windowed dataset (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset version {version}"
            )));
        }
        let m = read_u64(r)? as usize;
        let n = read_u32(r)? as usize;
        let c = read_u32(r)? as usize;
        let mut flags = [0u8];
        r.read_exact(&mut flags)?;
        let flags = flags[0];
        let mut data = Vec::with_capacity(m * n * c);
        for _ in 0..m * n * c {
            data.push(read_f64(r)?);
        }
        let labels = if flags & FLAG_LABELS != 0 {
            Some(
                (0..m)
                    .map(|_| read_u32(r).map(|v| v as usize))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let task_ids = if flags & FLAG_TASKS != 0 {
            let mut t = vec![0u8; m];
            r.read_exact(&mut t)?;
            Some(t)
        } else {
            None
        };
        let norm_stats = if flags & FLAG_STATS != 0 {
            let mean = (0..c).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
            let std = (0..c).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
            Some(NormStats { mean, std })
        } else {
            None
        };
        let n_users = read_u32(r)? as usize;
        let mut table = Vec::with_capacity(n_users);
        for _ in 0..n_users {
            let len = read_u32(r)? as usize;
            let mut b = vec![0u8; len];
            r.read_exact(&mut b)?;
            table.push(
                String::from_utf8(b).map_err(|_| Error::Format("user id is not UTF-8".into()))?,
            );
        }
        let mut user_ids = Vec::with_capacity(m);
        for _ in 0..m {
            let i = read_u32(r)? as usize;
            user_ids.push(
                table
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Format(format!("user index {i} out of range")))?,
            );
        }
        let mut ds =
            Self::new(n, c, data, labels, user_ids).map_err(|e| Error::Format(e.to_string()))?;
        ds.task_ids = task_ids;
        ds.norm_stats = norm_stats;
        Ok(ds)
    }
}

/// Splits a `[L, C]` signal into windows of `size` samples whose starts advance
/// by `size * (1 - overlap)`. A trailing partial window is dropped; a signal
/// shorter than one window yields nothing.
pub fn window(signal: &Tensor, size: usize, overlap: f64) -> Result<Vec<Tensor>> {
    let offsets = window_offsets(signal.shape().first().copied().unwrap_or(0), size, overlap)?;
    let [_, c] = *signal.shape() else {
        return Err(shape_err!(
            "signal must be [L, C], got {:?}",
            signal.shape()
        ));
    };
    Ok(offsets
        .into_iter()
        .map(|o| {
            Tensor::new(vec![size, c], signal.data()[o * c..(o + size) * c].to_vec())
                .expect("window")
        })
        .collect())
}

/// Start offsets produced by [`window`] for a signal of `len` samples.
pub fn window_offsets(len: usize, size: usize, overlap: f64) -> Result<Vec<usize>> {
    let step = window_step(size, overlap)?;
    if len < size {
        return Ok(Vec::new());
    }
    Ok((0..=(len - size) / step).map(|i| i * step).collect())
}

pub fn window_step(size: usize, overlap: f64) -> Result<usize> {
    if size == 0 {
        return Err(invalid!("window size must be positive"));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(invalid!("overlap must lie in [0, 1), got {overlap}"));
    }
    let step = (size as f64 * (1.0 - overlap)).round() as usize;
    if step == 0 {
        return Err(invalid!(
            "overlap {overlap} leaves no advance between windows of {size}"
        ));
    }
    Ok(step)
}

/// Windows every recording. Activity labels are mapped to contiguous class
/// indices in ascending order of their raw values; the map is returned.
pub fn window_recordings(
    recordings: &[RawRecording],
    size: usize,
    overlap: f64,
) -> Result<(WindowedDataset, Vec<i64>)> {
    let labeled = recordings
        .iter()
        .filter(|r| r.activity_label.is_some())
        .count();
    if labeled != 0 && labeled != recordings.len() {
        return Err(invalid!("recordings mix labeled and unlabeled sources"));
    }
    let classes: Vec<i64> = recordings
        .iter()
        .filter_map(|r| r.activity_label)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut windows = Vec::new();
    let mut labels = Vec::new();
    let mut users = Vec::new();
    for rec in recordings {
        let ws = window(&rec.samples, size, overlap)?;
        if ws.is_empty() {
            log::warn!(
                "skipping recording of user {} ({} samples, shorter than one window)",
                rec.user_id,
                rec.samples.shape()[0]
            );
        }
        for w in ws {
            windows.push(w);
            users.push(rec.user_id.clone());
            if let Some(a) = rec.activity_label {
                labels.push(classes.binary_search(&a).expect("collected"));
            }
        }
    }
    if windows.is_empty() {
        return Err(Error::InsufficientData(
            "no recording is long enough for one window".into(),
        ));
    }
    let labels = (labeled != 0).then_some(labels);
    Ok((
        WindowedDataset::from_windows(&windows, labels, users)?,
        classes,
    ))
}

/// Per-channel statistics over every sample of every window.
pub fn compute_norm_stats(ds: &WindowedDataset) -> Result<NormStats> {
    if ds.is_empty() {
        return Err(Error::InsufficientData(
            "cannot compute statistics of an empty dataset".into(),
        ));
    }
    let c = ds.channels;
    let count = (ds.data.len() / c) as f64;
    let mut mean = vec![0.0; c];
    for row in ds.data.chunks_exact(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for row in ds.data.chunks_exact(c) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|s| (s / count).sqrt()).collect();
    Ok(NormStats { mean, std })
}

/// `(x - mean_c) / max(std_c, 1e-8)` per channel. The stats are recorded on the
/// returned dataset.
pub fn znormalize(ds: &WindowedDataset, stats: &NormStats) -> Result<WindowedDataset> {
    if stats.mean.len() != ds.channels || stats.std.len() != ds.channels {
        return Err(shape_err!(
            "stats cover {} channels, dataset has {}",
            stats.mean.len(),
            ds.channels
        ));
    }
    let mut out = ds.clone();
    for row in out.data.chunks_exact_mut(ds.channels) {
        for ((v, m), s) in row.iter_mut().zip(&stats.mean).zip(&stats.std) {
            *v = (*v - m) / s.max(STD_FLOOR);
        }
    }
    out.norm_stats = Some(stats.clone());
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct UserSplit {
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
    pub train_users: Vec<String>,
    pub val_users: Vec<String>,
    pub test_users: Vec<String>,
}

/// `ceil(fraction * n)` with tolerance for representation error, so 0.2 * 30 is 6.
pub fn ceil_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Partitions users into disjoint train/validation/test groups. The test group
/// holds `ceil(test_fraction * U)` users; of the rest, `round(val_fraction * R)`
/// go to validation.
pub fn split_by_user(
    ds: &WindowedDataset,
    test_fraction: f64,
    val_fraction: f64,
    seed: u64,
) -> Result<UserSplit> {
    if !(0.0..1.0).contains(&test_fraction) || test_fraction == 0.0 {
        return Err(invalid!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        ));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(invalid!(
            "validation fraction must lie in [0, 1), got {val_fraction}"
        ));
    }
    let mut users = ds.users();
    if users.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 users, found {}",
            users.len()
        )));
    }
    let n_test = ceil_count(test_fraction, users.len());
    let rest = users.len() - n_test.min(users.len());
    let n_val = (val_fraction * rest as f64).round() as usize;
    if n_test == 0 || rest == 0 || rest <= n_val {
        return Err(Error::InsufficientData(format!(
            "{} users cannot fill {n_test} test, {n_val} validation and at least one training user",
            users.len()
        )));
    }
    users.shuffle(&mut child_rng(seed, &[0x5E17]));
    let test_users: Vec<String> = sorted(&users[..n_test]);
    let val_users: Vec<String> = sorted(&users[n_test..n_test + n_val]);
    let train_users: Vec<String> = sorted(&users[n_test + n_val..]);
    let pick = |u: &[String]| ds.select_users(&u.iter().cloned().collect());
    Ok(UserSplit {
        train: pick(&train_users),
        val: pick(&val_users),
        test: pick(&test_users),
        train_users,
        val_users,
        test_users,
    })
}

fn sorted(v: &[String]) -> Vec<String> {
    let mut v = v.to_vec();
    v.sort();
    v
}

/// Keeps at most `k` uniformly chosen windows per user, preserving order.
pub fn subsample_per_user(ds: &WindowedDataset, k: usize, seed: u64) -> WindowedDataset {
    let mut by_user: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, u) in ds.user_ids.iter().enumerate() {
        by_user.entry(u.as_str()).or_default().push(i);
    }
    let mut keep = Vec::new();
    for (ui, (_, idx)) in by_user.iter().enumerate() {
        if idx.len() <= k {
            keep.extend_from_slice(idx);
        } else {
            let mut rng = child_rng(derive_seed(seed, &[0x5B5A]), &[ui as u64]);
            keep.extend(
                rand::seq::index::sample(&mut rng, idx.len(), k)
                    .into_iter()
                    .map(|j| idx[j]),
            );
        }
    }
    keep.sort_unstable();
    ds.select(&keep)
}

/// CSV column names, in the required header set.
pub const CSV_COLUMNS: [&str; 6] = ["user_id", "activity", "timestamp", "ax", "ay", "az"];
/// Optional column; a change of value starts a new recording.
pub const CSV_TRIAL_COLUMN: &str = "trial";

#[derive(Clone, Debug, PartialEq)]
pub struct CsvSchema {
    /// Recorded on every recording; windows are cut in samples regardless of rate.
    pub sample_rate_hz: f64,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            sample_rate_hz: 50.0,
        }
    }
}

/// Reads `user_id, activity, timestamp, ax, ay, az` rows (header required, any
/// column order) plus an optional `trial` column. Each maximal run of consecutive
/// rows sharing user, activity and trial becomes one recording, sorted by
/// timestamp. An empty activity field marks an
/// unlabeled row.
pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<Vec<RawRecording>> {
    let file = std::fs::File::open(path)?;
    ingest_csv_reader(file, path, schema)
}

pub fn ingest_csv_reader(
    reader: impl Read,
    path: &Path,
    schema: &CsvSchema,
) -> Result<Vec<RawRecording>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    for h in headers.iter() {
        if !CSV_COLUMNS.contains(&h) && h != CSV_TRIAL_COLUMN {
            return Err(Error::Schema(format!("unknown column {h:?}")));
        }
    }
    let mut col = [0usize; 6];
    for (slot, name) in col.iter_mut().zip(CSV_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing required column {name:?}")))?;
    }
    let trial_col = headers.iter().position(|h| h == CSV_TRIAL_COLUMN);
    struct Group {
        user: String,
        activity: Option<i64>,
        trial: String,
        rows: Vec<(f64, [f64; 3])>,
    }
    let mut groups: Vec<Group> = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        if record.len() != headers.len() {
            return Err(parse_err(format!(
                "expected {} fields, found {}",
                headers.len(),
                record.len()
            )));
        }
        let field = |i: usize| record.get(col[i]).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            let v: f64 = field(i).parse().map_err(|_| {
                parse_err(format!(
                    "{} is not a number: {:?}",
                    CSV_COLUMNS[i],
                    field(i)
                ))
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(parse_err(format!("{} is not finite", CSV_COLUMNS[i])))
            }
        };
        let user = field(0).to_string();
        if user.is_empty() {
            return Err(parse_err("empty user_id".into()));
        }
        let activity = match field(1) {
            "" => None,
            s => Some(
                s.parse::<i64>()
                    .map_err(|_| parse_err(format!("activity is not an integer: {s:?}")))?,
            ),
        };
        let trial = trial_col.map_or("", |i| record.get(i).unwrap_or(""));
        let row = (num(2)?, [num(3)?, num(4)?, num(5)?]);
        match groups.last_mut() {
            Some(g) if g.user == user && g.activity == activity && g.trial == trial => {
                g.rows.push(row)
            }
            _ => groups.push(Group {
                user,
                activity,
                trial: trial.to_string(),
                rows: vec![row],
            }),
        }
    }
    groups
        .into_iter()
        .map(|mut g| {
            g.rows.sort_by(|a, b| a.0.total_cmp(&b.0));
            let len = g.rows.len();
            let data = g.rows.iter().flat_map(|(_, v)| *v).collect();
            Ok(RawRecording {
                user_id: g.user,
                activity_label: g.activity,
                samples: Tensor::new(vec![len, 3], data)?,
                sample_rate_hz: schema.sample_rate_hz,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn signal(len: usize) -> Tensor {
        Tensor::from_fn(&[len, 3], |i| i as f64)
    }

    fn labeled(n_users: usize, per_user: usize) -> WindowedDataset {
        let m = n_users * per_user;
        let data: Vec<f64> = (0..m * 4 * 3)
            .map(|i| ((i * 7919) % 101) as f64 / 10.0)
            .collect();
        let users = (0..m).map(|i| format!("u{:02}", i / per_user)).collect();
        let labels = (0..m).map(|i| i % 3).collect();
        WindowedDataset::new(4, 3, data, Some(labels), users).unwrap()
    }

    #[test]
    fn window_counts() {
        let w = window(&signal(1000), 400, 0.5).unwrap();
        assert_eq!(w.len(), 4);
        assert_eq!(
            window_offsets(1000, 400, 0.5).unwrap(),
            vec![0, 200, 400, 600]
        );
        assert_eq!(w[3].data()[0], 600.0 * 3.0);
        assert_eq!(window(&signal(400), 400, 0.5).unwrap().len(), 1);
        assert!(window(&signal(399), 400, 0.5).unwrap().is_empty());
    }

    #[test]
    fn window_offsets_are_bijective_with_index() {
        for len in [400, 401, 599, 600, 1234, 5000] {
            let offs = window_offsets(len, 400, 0.5).unwrap();
            let expected = if len < 400 { 0 } else { (len - 400) / 200 + 1 };
            assert_eq!(offs.len(), expected);
            for (i, &o) in offs.iter().enumerate() {
                assert_eq!(o / 200, i);
                assert_eq!(o % 200, 0);
                assert!(o + 400 <= len);
            }
        }
        assert!(window_step(400, 1.0).is_err());
    }

    #[test]
    fn znormalize_identity_and_constant_channel() {
        let ds = labeled(2, 3);
        let id = NormStats {
            mean: vec![0.0; 3],
            std: vec![1.0; 3],
        };
        assert_eq!(znormalize(&ds, &id).unwrap().data(), ds.data());
        let constant =
            WindowedDataset::new(2, 1, vec![5.0; 4], None, vec!["a".into(), "b".into()]).unwrap();
        let stats = compute_norm_stats(&constant).unwrap();
        assert_eq!(stats.std, vec![0.0]);
        assert!(znormalize(&constant, &stats)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_training_stats_are_standard() {
        let ds = labeled(3, 5);
        let stats = compute_norm_stats(&ds).unwrap();
        let norm = znormalize(&ds, &stats).unwrap();
        // Independent recomputation of the statistics after normalization.
        for c in 0..3 {
            let vals: Vec<f64> = norm.data().iter().skip(c).step_by(3).copied().collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-9);
            assert!((var.sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn split_counts_follow_ceiling() {
        assert_eq!(ceil_count(0.3, 9), 3);
        assert_eq!(ceil_count(0.2, 30), 6);
        assert_eq!(ceil_count(0.25, 9), 3);
        let s = split_by_user(&labeled(9, 2), 0.3, 0.2, 4).unwrap();
        assert_eq!(s.test_users.len(), 3);
        assert_eq!(s.val_users.len(), 1);
        assert_eq!(s.train_users.len(), 5);
        let s30 = split_by_user(&labeled(30, 1), 0.2, 0.2, 4).unwrap();
        assert_eq!(s30.test_users.len(), 6);
    }

    #[test]
    fn split_is_disjoint_and_covers() {
        let ds = labeled(10, 3);
        for seed in 0..20 {
            let s = split_by_user(&ds, 0.25, 0.2, seed).unwrap();
            let mut all: Vec<String> = s
                .train_users
                .iter()
                .chain(&s.val_users)
                .chain(&s.test_users)
                .cloned()
                .collect();
            let n = all.len();
            all.sort();
            all.dedup();
            assert_eq!(all.len(), n);
            assert_eq!(n, 10);
            assert_eq!(s.train.len() + s.val.len() + s.test.len(), ds.len());
            assert!(s.test.user_ids().iter().all(|u| s.test_users.contains(u)));
        }
    }

    #[test]
    fn split_rejects_too_few_users() {
        assert!(split_by_user(&labeled(1, 4), 0.3, 0.2, 0).is_err());
        assert!(split_by_user(&labeled(2, 4), 0.5, 0.5, 0).is_err());
        assert!(split_by_user(&labeled(2, 4), 0.3, 0.0, 0).is_ok());
    }

    #[test]
    fn subsample_keeps_min_k() {
        let m = 130;
        let users: Vec<String> = (0..m)
            .map(|i| {
                if i < 100 {
                    "big".into()
                } else {
                    "small".into()
                }
            })
            .collect();
        let ds =
            WindowedDataset::new(1, 1, (0..m).map(|v| v as f64).collect(), None, users).unwrap();
        let s = subsample_per_user(&ds, 40, 9);
        assert_eq!(s.user_ids().iter().filter(|u| *u == "big").count(), 40);
        assert_eq!(s.user_ids().iter().filter(|u| *u == "small").count(), 30);
        assert_eq!(s, subsample_per_user(&ds, 40, 9));
        assert_ne!(s, subsample_per_user(&ds, 40, 10));
    }

    #[test]
    fn dataset_file_round_trip() {
        let mut ds = labeled(3, 2);
        let stats = compute_norm_stats(&ds).unwrap();
        ds = znormalize(&ds, &stats)
            .unwrap()
            .with_task_ids(vec![0, 1, 2, 3, 4, 5])
            .unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"SSHARWDS");
        assert_eq!(buf[28], FLAG_LABELS | FLAG_STATS | FLAG_TASKS);
        let back = WindowedDataset::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        assert!(WindowedDataset::read_from(&mut &buf[..40]).is_err());
    }

    #[test]
    fn csv_single_recording() {
        let csv =
            "user_id,activity,timestamp,ax,ay,az\n7,2,0.02,0.1,0.2,9.8\n7,2,0.01,0.0,0.1,9.7\n";
        let recs =
            ingest_csv_reader(csv.as_bytes(), Path::new("x.csv"), &CsvSchema::default()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].samples.shape(), &[2, 3]);
        assert_eq!(recs[0].samples.data()[..3], [0.0, 0.1, 9.7]);
        assert_eq!(recs[0].activity_label, Some(2));
    }

    #[test]
    fn csv_schema_errors() {
        let missing = "user_id,activity,timestamp,ax,ay\n1,1,0,0,0\n";
        let e = ingest_csv_reader(
            missing.as_bytes(),
            Path::new("m.csv"),
            &CsvSchema::default(),
        )
        .unwrap_err();
        assert!(
            matches!(&e, Error::Schema(m) if m.contains("\"az\"")),
            "{e}"
        );
        let extra = "user_id,activity,timestamp,ax,ay,az,gx\n";
        assert!(matches!(
            ingest_csv_reader(extra.as_bytes(), Path::new("e.csv"), &CsvSchema::default()),
            Err(Error::Schema(_))
        ));
        let bad = "user_id,activity,timestamp,ax,ay,az\n1,1,0,0,0,0\n1,1,1,zz,0,0\n";
        let e = ingest_csv_reader(bad.as_bytes(), Path::new("b.csv"), &CsvSchema::default())
            .unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e}");
    }

    #[test]
    fn csv_groups_contiguous_runs() {
        let csv = "user_id,activity,timestamp,ax,ay,az\na,1,0,0,0,0\na,1,1,0,0,0\na,2,2,0,0,0\nb,2,3,0,0,0\na,1,4,0,0,0\n";
        let recs =
            ingest_csv_reader(csv.as_bytes(), Path::new("g.csv"), &CsvSchema::default()).unwrap();
        let lens: Vec<usize> = recs.iter().map(|r| r.samples.shape()[0]).collect();
        assert_eq!(lens, vec![2, 1, 1, 1]);
    }

    #[test]
    fn csv_trial_change_splits_a_run() {
        let csv = "trial,user_id,activity,timestamp,ax,ay,az\n1,a,1,0,0,0,0\n1,a,1,1,0,0,0\n2,a,1,0,0,0,0\n";
        let recs =
            ingest_csv_reader(csv.as_bytes(), Path::new("t.csv"), &CsvSchema::default()).unwrap();
        let lens: Vec<usize> = recs.iter().map(|r| r.samples.shape()[0]).collect();
        assert_eq!(lens, vec![2, 1]);
    }

    #[test]
    fn recordings_map_labels_and_skip_short() {
        let rec = |u: &str, a: i64, len: usize| RawRecording {
            user_id: u.into(),
            activity_label: Some(a),
            samples: signal(len),
            sample_rate_hz: 50.0,
        };
        let recs = vec![rec("a", 5, 1000), rec("b", 9, 399), rec("b", 3, 600)];
        let (ds, classes) = window_recordings(&recs, 400, 0.5).unwrap();
        assert_eq!(classes, vec![3, 5, 9]);
        assert_eq!(ds.len(), 4 + 2);
        assert_eq!(ds.labels().unwrap(), &[1, 1, 1, 1, 0, 0]);
    }
}
