#![allow(dead_code)]

use rand::Rng as _;
use rand_distr::StandardNormal;
use selfhar_core::rng::{child_rng, Rng};
use selfhar_core::{Graph, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

pub fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

/// Standard normal values nudged at least `gap` away from zero, so central
/// differences never straddle a ReLU kink.
pub fn randn_off_zero(shape: &[usize], gap: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.sample(StandardNormal);
        if v.abs() < gap {
            gap.copysign(v) * 2.0
        } else {
            v
        }
    })
}

/// Values along the time axis of each `[B, T, C]` slice are a shuffled grid with
/// spacing 0.1, so the maximum is unique by a wide margin.
pub fn distinct_time_values(shape: &[usize], rng: &mut Rng) -> Tensor {
    let (b, t, c) = (shape[0], shape[1], shape[2]);
    let mut data = vec![0.0; b * t * c];
    for bi in 0..b {
        for ci in 0..c {
            let mut vals: Vec<f64> = (0..t).map(|i| i as f64 * 0.1 - 1.0).collect();
            for i in (1..t).rev() {
                vals.swap(i, rng.gen_range(0..=i));
            }
            for (ti, v) in vals.into_iter().enumerate() {
                data[(bi * t + ti) * c + ci] = v;
            }
        }
    }
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Builds `f` on fresh graphs and compares the backward gradient of every
/// input against central differences. Returns the largest relative error
/// `|a - n|_2 / max(|a|_2 + |n|_2, 1e-12)` across inputs.
pub fn grad_check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let eval = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars);
        g.value(out).item().unwrap()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars);
    g.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let mut vals = inputs.to_vec();
            vals[k].data_mut()[i] += FD_STEP;
            let up = eval(&vals);
            vals[k].data_mut()[i] -= 2.0 * FD_STEP;
            let down = eval(&vals);
            *n = (up - down) / (2.0 * FD_STEP);
        }
        let a = &analytic[k];
        let diff = a
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt()
            + numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        worst = worst.max(diff / scale.max(1e-12));
    }
    worst
}

/// Reduces any output to a scalar through a fixed random projection.
pub fn project(g: &mut Graph, out: Var, seed: u64) -> Var {
    let shape = g.value(out).shape().to_vec();
    let r = g.input(randn(&shape, &mut child_rng(seed, &[0x9E0])));
    let m = g.mul(out, r).unwrap();
    g.sum(m)
}

/// Random small dimensions within `[lo, hi]`.
pub fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

/// Layer name and worst relative error over `trials` random shapes.
pub fn gradient_suite(trials: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = child_rng(seed, &[0x6AD]);
    let mut worst = vec![
        ("conv1d", 0.0f64),
        ("dense", 0.0),
        ("relu", 0.0),
        ("sigmoid", 0.0),
        ("softmax_cce", 0.0),
        ("bce", 0.0),
        ("global_max_pool", 0.0),
        ("l2_penalty", 0.0),
        ("mse", 0.0),
        ("pad_time", 0.0),
    ];
    for trial in 0..trials {
        let s = seed.wrapping_add(trial as u64);
        let (b, t, cin, cout, k) = (
            dim(&mut rng, 1, 3),
            dim(&mut rng, 4, 12),
            dim(&mut rng, 1, 4),
            dim(&mut rng, 1, 4),
            dim(&mut rng, 1, 4),
        );
        let x = randn(&[b, t, cin], &mut rng);
        let w = randn(&[k, cin, cout], &mut rng);
        let bias = randn(&[cout], &mut rng);
        let errs = [
            grad_check(&[x.clone(), w, bias], |g, v| {
                let y = g.conv1d(v[0], v[1], v[2]).unwrap();
                project(g, y, s)
            }),
            {
                let (din, h) = (dim(&mut rng, 1, 6), dim(&mut rng, 1, 6));
                let inputs = [
                    randn(&[b, din], &mut rng),
                    randn(&[din, h], &mut rng),
                    randn(&[h], &mut rng),
                ];
                grad_check(&inputs, |g, v| {
                    let y = g.dense(v[0], v[1], v[2]).unwrap();
                    project(g, y, s)
                })
            },
            grad_check(&[randn_off_zero(&[b, t, cin], 1e-3, &mut rng)], |g, v| {
                let y = g.relu(v[0]);
                project(g, y, s)
            }),
            grad_check(&[randn(&[b, t], &mut rng)], |g, v| {
                let y = g.sigmoid(v[0]);
                project(g, y, s)
            }),
            {
                let n = dim(&mut rng, 2, 6);
                let logits = randn(&[b, n], &mut rng);
                let y = Tensor::from_fn(&[b, n], |i| {
                    if i % n == (i / n + trial) % n {
                        1.0
                    } else {
                        0.0
                    }
                });
                grad_check(&[logits], move |g, v| {
                    let p = g.softmax(v[0], 1).unwrap();
                    let y = g.input(y.clone());
                    g.cce(p, y).unwrap()
                })
            },
            {
                let n = dim(&mut rng, 1, 8);
                let p = Tensor::from_fn(&[b, n], |_| rng.gen_range(0.05..0.95));
                let y = Tensor::from_fn(&[b, n], |i| ((i + trial) % 2) as f64);
                grad_check(&[p], move |g, v| {
                    let y = g.input(y.clone());
                    g.bce(v[0], y).unwrap()
                })
            },
            grad_check(&[distinct_time_values(&[b, t, cin], &mut rng)], |g, v| {
                let y = g.global_max_pool(v[0]).unwrap();
                project(g, y, s)
            }),
            grad_check(
                &[randn(&[k, cin], &mut rng), randn(&[cout], &mut rng)],
                |g, v| g.l2_penalty(v, 1e-2),
            ),
            grad_check(
                &[randn(&[b, t], &mut rng), randn(&[b, t], &mut rng)],
                |g, v| g.mse(v[0], v[1]).unwrap(),
            ),
            grad_check(&[x], |g, v| {
                let y = g.pad_time(v[0], 2, 1).unwrap();
                project(g, y, s)
            }),
        ];
        for (slot, e) in worst.iter_mut().zip(errs) {
            slot.1 = slot.1.max(e);
        }
    }
    worst
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn sorted_rows(x: &Tensor) -> Vec<Vec<u64>> {
    let c = x.shape()[1];
    let mut rows: Vec<Vec<u64>> = x
        .data()
        .chunks(c)
        .map(|r| r.iter().map(|v| v.to_bits()).collect())
        .collect();
    rows.sort();
    rows
}

/// Runs every transformation property on `trials` random windows. Returns the
/// number of passing trials and the first failure message.
pub fn transformation_suite(trials: usize, seed: u64) -> (usize, Option<String>) {
    use selfhar_core::transforms::{
        apply_transform, TransformConfig, TransformKind, TransformParams, TransformSpec,
    };
    let mut rng = child_rng(seed, &[0x7245]);
    let mut passed = 0;
    let mut first_failure = None;
    for trial in 0..trials {
        let n = dim(&mut rng, 8, 64);
        let x = randn(&[n, 3], &mut rng);
        let s = seed ^ (trial as u64).wrapping_mul(0x9E37_79B9);
        let apply = |p: TransformParams| apply_transform(&x, &TransformSpec::new(p, s)).unwrap();
        let sample = |k: TransformKind, cfg: &TransformConfig| {
            apply_transform(&x, &TransformSpec::sample(k, cfg, n, 3, s).unwrap()).unwrap()
        };
        let degenerate = TransformConfig {
            noise_sigma: 0.0,
            scale_sigma: 0.0,
            permute_segments: 1,
            warp_sigma: 0.0,
            ..TransformConfig::default()
        };
        let mut checks: Vec<(&str, bool)> = vec![
            (
                "noised sigma 0",
                apply(TransformParams::Noised { sigma: 0.0 }) == x,
            ),
            (
                "scaled factor 1",
                apply(TransformParams::Scaled { factor: 1.0 }) == x,
            ),
            (
                "permuted 1 segment",
                sample(TransformKind::Permuted, &degenerate) == x,
            ),
            (
                "time warp 0",
                max_abs_diff(&sample(TransformKind::TimeWarped, &degenerate), &x) < 1e-12,
            ),
            (
                "negated involution",
                apply_transform(
                    &apply(TransformParams::Negated),
                    &TransformSpec::new(TransformParams::Negated, s),
                )
                .unwrap()
                    == x,
            ),
            (
                "hflipped involution",
                apply_transform(
                    &apply(TransformParams::HFlipped),
                    &TransformSpec::new(TransformParams::HFlipped, s),
                )
                .unwrap()
                    == x,
            ),
        ];
        let cfg = TransformConfig::default();
        let rotated = sample(TransformKind::Rotated, &cfg);
        let norms_kept = x
            .data()
            .chunks(3)
            .zip(rotated.data().chunks(3))
            .all(|(a, b)| {
                (a.iter().map(|v| v * v).sum::<f64>().sqrt()
                    - b.iter().map(|v| v * v).sum::<f64>().sqrt())
                .abs()
                    <= 1e-9
            });
        checks.push(("rotation keeps norms", norms_kept));
        checks.push((
            "permutation keeps rows",
            sorted_rows(&sample(TransformKind::Permuted, &cfg)) == sorted_rows(&x),
        ));
        let shuffled = sample(TransformKind::ChannelShuffled, &cfg);
        let per_step = x
            .data()
            .chunks(3)
            .zip(shuffled.data().chunks(3))
            .all(|(a, b)| {
                let mut a: Vec<u64> = a.iter().map(|v| v.to_bits()).collect();
                let mut b: Vec<u64> = b.iter().map(|v| v.to_bits()).collect();
                a.sort_unstable();
                b.sort_unstable();
                a == b
            });
        checks.push((
            "shuffle keeps each step's values",
            per_step && shuffled != x,
        ));
        for kind in TransformKind::ALL {
            checks.push(("shape preserved", sample(kind, &cfg).shape() == x.shape()));
        }
        match checks.iter().find(|c| !c.1) {
            None => passed += 1,
            Some((name, _)) => {
                first_failure.get_or_insert_with(|| format!("trial {trial} (N={n}): {name}"));
            }
        }
    }
    (passed, first_failure)
}

/// Largest deviation of kappa and weighted P/R/F from a brute-force
/// recomputation over `trials` random multiclass label pairs.
pub fn metric_oracle(trials: usize, seed: u64) -> f64 {
    use selfhar_core::metrics::{cohen_kappa, weighted_prf};
    let mut rng = child_rng(seed, &[0x3E7]);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let k = dim(&mut rng, 2, 7);
        let n = dim(&mut rng, 1, 120);
        let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        // Bias predictions toward the truth so agreement varies across trials.
        let keep = rng.gen_range(0.0..1.0);
        let p: Vec<usize> = y
            .iter()
            .map(|&t| {
                if rng.gen::<f64>() < keep {
                    t
                } else {
                    rng.gen_range(0..k)
                }
            })
            .collect();
        let nf = n as f64;
        let classes = y.iter().chain(&p).copied().max().unwrap() + 1;
        let count = |v: &[usize], c: usize| v.iter().filter(|&&x| x == c).count() as f64;
        let po = y.iter().zip(&p).filter(|(a, b)| a == b).count() as f64 / nf;
        let pe: f64 = (0..classes)
            .map(|c| count(&y, c) * count(&p, c))
            .sum::<f64>()
            / (nf * nf);
        let kappa = if (1.0 - pe).abs() < 1e-15 {
            0.0
        } else {
            (po - pe) / (1.0 - pe)
        };
        let (mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0);
        for c in 0..classes {
            let tp = y.iter().zip(&p).filter(|(&a, &b)| a == c && b == c).count() as f64;
            let prec = if count(&p, c) > 0.0 {
                tp / count(&p, c)
            } else {
                0.0
            };
            let rec = if count(&y, c) > 0.0 {
                tp / count(&y, c)
            } else {
                0.0
            };
            let f = if prec + rec > 0.0 {
                2.0 * prec * rec / (prec + rec)
            } else {
                0.0
            };
            let w = count(&y, c) / nf;
            wp += w * prec;
            wr += w * rec;
            wf += w * f;
        }
        let got = weighted_prf(&y, &p).unwrap();
        for d in [
            cohen_kappa(&y, &p).unwrap() - kappa,
            got.precision - wp,
            got.recall - wr,
            got.fscore - wf,
        ] {
            worst = worst.max(d.abs());
        }
    }
    worst
}
