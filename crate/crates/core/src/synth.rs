//! Synthetic labeled accelerometer data.
//!
//! Sample `t` of the recording of class `k` by user `u` is
//!
//! ```text
//! a(t)      = R_u b(t) + noise_sigma * n(t)
//! b(t)      = p_k + s(t) (d_k w_k(theta_t) + r_k e_k cos(theta_t)) + sway * S(t)
//! s(t)      = gain_u amp_k (1 + amp_mod M(t))
//! theta_t   = theta_{t-1} + 2 pi f_k tempo_u (1 + tempo_drift D(t)) / fs
//! w_k(x)    = sin(x) + h2_k sin(2x + psi2_k) + h3_k sin(3x + psi3_k)
//! f_k       = base_freq * freq_ratio^min(k, n_dynamic)
//! ```
//!
//! Classes below `n_dynamic` are gait-like with `p_k = (0, 0, 1)`; the others
//! are static postures (`amp_k = 0`) whose gravity vector `p_k` steps by
//! `posture_step_deg` around the x axis. `d_k` is the forward axis turned by
//! up to `axis_spread_deg`, `e_k` is orthogonal to it. `R_u` tilts the device
//! by up to `tilt_max_deg`, `tempo_u` and `gain_u` are uniform around 1.
//! `D`, `M` (one channel) and `S` (three channels) are slow sums of random
//! sinusoids with unit peak, `theta_0` is a random phase and `n(t)` is white
//! Gaussian noise. Class profiles depend only on the class index; the seed
//! drives users, phases, slow processes and noise.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::data::{window, window_step, WindowedDataset};
use crate::error::{invalid, Result};
use crate::rng::child_rng;
use crate::tensor::Tensor;
use crate::transforms::rotation_matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_classes: usize,
    /// Windows per class and user.
    pub windows_per_class: usize,
    pub window_len: usize,
    pub overlap: f64,
    pub sample_rate_hz: f64,
    /// Number of periodic (gait-like) classes; the rest are static postures.
    pub n_dynamic: usize,
    /// Lowest gait frequency in Hz.
    pub base_freq_hz: f64,
    /// Ratio between consecutive gait frequencies.
    pub freq_ratio: f64,
    /// Largest angle in degrees between a class's motion axis and the common
    /// forward axis.
    pub axis_spread_deg: f64,
    /// Angle in degrees between consecutive static postures.
    pub posture_step_deg: f64,
    /// Half-width of the uniform per-user tempo factor around 1.
    pub tempo_spread: f64,
    /// Half-width of the uniform per-user gain factor around 1.
    pub gain_spread: f64,
    /// Largest per-user device tilt in degrees.
    pub tilt_max_deg: f64,
    /// Relative depth of the slow tempo drift within a recording.
    pub tempo_drift: f64,
    /// Relative depth of the slow amplitude modulation within a recording.
    pub amp_mod: f64,
    /// Amplitude (in g) of slow per-channel body sway.
    pub sway: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 8,
            n_classes: 6,
            windows_per_class: 30,
            window_len: crate::data::WINDOW_LEN,
            overlap: crate::data::WINDOW_OVERLAP,
            sample_rate_hz: 50.0,
            n_dynamic: 6,
            base_freq_hz: 1.0,
            freq_ratio: 1.15,
            axis_spread_deg: 180.0,
            posture_step_deg: 35.0,
            tempo_spread: 0.15,
            gain_spread: 0.25,
            tilt_max_deg: 10.0,
            tempo_drift: 0.1,
            amp_mod: 0.2,
            sway: 0.1,
            noise_sigma: 0.005,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
struct ClassProfile {
    /// Gravity direction in the device frame.
    posture: [f64; 3],
    freq: f64,
    amp: f64,
    d: [f64; 3],
    e: [f64; 3],
    r: f64,
    h2: f64,
    psi2: f64,
    h3: f64,
    psi3: f64,
}

const FORWARD: [f64; 3] = [1.0, 0.0, 0.0];

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.map(|x| x / n)
}

fn class_profile(k: usize, cfg: &SynthConfig) -> ClassProfile {
    let mut rng = child_rng(0x0C1A_55E5, &[k as u64]);
    let turn: [f64; 3] = UnitSphere.sample(&mut rng);
    let angle = rng.gen_range(0.0..=cfg.axis_spread_deg).to_radians();
    let rot = rotation_matrix(turn, angle).expect("unit axis");
    let d = rot.map(|row| row.iter().zip(FORWARD).map(|(a, b)| a * b).sum::<f64>());
    let probe: [f64; 3] = UnitSphere.sample(&mut rng);
    let e = normalize(cross(d, probe));
    let dynamic = k < cfg.n_dynamic;
    let posture = if dynamic {
        [0.0, 0.0, 1.0]
    } else {
        let a = ((k - cfg.n_dynamic) as f64 * cfg.posture_step_deg).to_radians();
        [0.0, a.sin(), a.cos()]
    };
    ClassProfile {
        posture,
        freq: cfg.base_freq_hz * cfg.freq_ratio.powi(k.min(cfg.n_dynamic) as i32),
        amp: if dynamic {
            rng.gen_range(0.3..0.6)
        } else {
            0.0
        },
        d,
        e,
        r: rng.gen_range(0.2..0.8) * if rng.gen::<bool>() { 1.0 } else { -1.0 },
        h2: rng.gen_range(0.3..0.7),
        psi2: rng.gen_range(0.0..std::f64::consts::TAU),
        h3: rng.gen_range(0.0..0.4),
        psi3: rng.gen_range(0.0..std::f64::consts::TAU),
    }
}

/// Sum of three random sinusoids per channel with frequencies in `[lo, hi]` Hz,
/// scaled to unit peak.
struct SlowProcess {
    // (amplitude, angular step, phase) per component and channel
    parts: Vec<[(f64, f64, f64); 3]>,
}

impl SlowProcess {
    fn new(rng: &mut crate::rng::Rng, channels: usize, lo: f64, hi: f64, fs: f64) -> Self {
        let parts = (0..channels)
            .map(|_| {
                let raw: [(f64, f64, f64); 3] = std::array::from_fn(|_| {
                    (
                        rng.gen_range(0.5..1.0),
                        std::f64::consts::TAU * rng.gen_range(lo..hi) / fs,
                        rng.gen_range(0.0..std::f64::consts::TAU),
                    )
                });
                let total: f64 = raw.iter().map(|p| p.0).sum();
                raw.map(|(a, w, ph)| (a / total, w, ph))
            })
            .collect();
        Self { parts }
    }

    fn at(&self, channel: usize, t: usize) -> f64 {
        self.parts[channel]
            .iter()
            .map(|(a, w, ph)| a * (w * t as f64 + ph).sin())
            .sum()
    }
}

/// Generates `windows_per_class` windows for every (user, class) pair by
/// windowing one continuous recording per pair.
pub fn synth_generate(cfg: &SynthConfig) -> Result<WindowedDataset> {
    if cfg.n_classes < 2 {
        return Err(invalid!("need at least 2 classes, got {}", cfg.n_classes));
    }
    if cfg.n_users == 0 || cfg.windows_per_class == 0 {
        return Err(invalid!("need at least one user and one window per class"));
    }
    if cfg.n_dynamic > cfg.n_classes {
        return Err(invalid!(
            "{} dynamic classes exceed the {} classes",
            cfg.n_dynamic,
            cfg.n_classes
        ));
    }
    let step = window_step(cfg.window_len, cfg.overlap)?;
    let rec_len = cfg.window_len + (cfg.windows_per_class - 1) * step;
    let profiles: Vec<ClassProfile> = (0..cfg.n_classes).map(|k| class_profile(k, cfg)).collect();
    let mut windows = Vec::with_capacity(cfg.n_users * cfg.n_classes * cfg.windows_per_class);
    let mut labels = Vec::with_capacity(windows.capacity());
    let mut users = Vec::with_capacity(windows.capacity());
    for u in 0..cfg.n_users {
        let mut urng = child_rng(cfg.seed, &[0x05E2, u as u64]);
        let tempo = 1.0 + urng.gen_range(-cfg.tempo_spread..=cfg.tempo_spread);
        let gain = 1.0 + urng.gen_range(-cfg.gain_spread..=cfg.gain_spread);
        let axis: [f64; 3] = UnitSphere.sample(&mut urng);
        let tilt = urng.gen_range(0.0..=cfg.tilt_max_deg).to_radians();
        let rot = rotation_matrix(axis, tilt)?;
        for (k, p) in profiles.iter().enumerate() {
            let mut rng = child_rng(cfg.seed, &[0x0EC0, u as u64, k as u64]);
            let mut theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let omega = std::f64::consts::TAU * p.freq * tempo / cfg.sample_rate_hz;
            let drift = SlowProcess::new(&mut rng, 1, 0.01, 0.05, cfg.sample_rate_hz);
            let modulation = SlowProcess::new(&mut rng, 1, 0.02, 0.1, cfg.sample_rate_hz);
            let sway = SlowProcess::new(&mut rng, 3, 0.1, 0.5, cfg.sample_rate_hz);
            let mut data = Vec::with_capacity(rec_len * 3);
            for t in 0..rec_len {
                theta += omega * (1.0 + cfg.tempo_drift * drift.at(0, t));
                let w = theta.sin()
                    + p.h2 * (2.0 * theta + p.psi2).sin()
                    + p.h3 * (3.0 * theta + p.psi3).sin();
                let s = gain * p.amp * (1.0 + cfg.amp_mod * modulation.at(0, t));
                let body: [f64; 3] = std::array::from_fn(|c| {
                    p.posture[c]
                        + s * (p.d[c] * w + p.r * p.e[c] * theta.cos())
                        + cfg.sway * sway.at(c, t)
                });
                for row in &rot {
                    let noise: f64 = rng.sample(StandardNormal);
                    data.push(
                        row.iter().zip(&body).map(|(a, b)| a * b).sum::<f64>()
                            + cfg.noise_sigma * noise,
                    );
                }
            }
            let signal = Tensor::new(vec![rec_len, 3], data)?;
            for w in window(&signal, cfg.window_len, cfg.overlap)? {
                windows.push(w);
                labels.push(k);
                users.push(format!("user{u:02}"));
            }
        }
    }
    WindowedDataset::from_windows(&windows, Some(labels), users)
}
