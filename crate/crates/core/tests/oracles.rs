mod common;

use common::randn;
use proptest::prelude::*;
use rand::Rng as _;
use selfhar_core::analysis::{
    embeddings, export_embeddings, input_gradient, saliency_map, svcca_correlations,
    svcca_similarity, SaliencyTarget,
};
use selfhar_core::rng::rng_from;
use selfhar_core::transforms::{apply_transform, TransformParams, TransformSpec};
use selfhar_core::{ActivityClassifier, Graph, Tensor, TrunkLayer, WindowedDataset};

fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let [bn, n, cin] = *x.shape() else {
        unreachable!()
    };
    let [k, _, cout] = *w.shape() else {
        unreachable!()
    };
    let mut out = Vec::new();
    for bi in 0..bn {
        for t in 0..=n - k {
            for o in 0..cout {
                let mut acc = b.data()[o];
                for j in 0..k {
                    for c in 0..cin {
                        acc += x.at(&[bi, t + j, c]) * w.at(&[j, c, o]);
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

#[test]
fn conv1d_matches_direct_loops() {
    let mut rng = rng_from(21);
    for _ in 0..25 {
        let (bn, cin, cout, k) = (
            rng.gen_range(1..4),
            rng.gen_range(1..5),
            rng.gen_range(1..7),
            rng.gen_range(1..9),
        );
        let n = k + rng.gen_range(0..20);
        let (x, w, b) = (
            randn(&[bn, n, cin], &mut rng),
            randn(&[k, cin, cout], &mut rng),
            randn(&[cout], &mut rng),
        );
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
        let y = g.conv1d(xv, wv, bv).unwrap();
        assert_eq!(g.value(y).shape(), [bn, n - k + 1, cout]);
        let want = conv_oracle(&x, &w, &b);
        for (a, e) in g.value(y).data().iter().zip(&want) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }
}

fn window_strategy() -> impl Strategy<Value = Tensor> {
    (4usize..40).prop_flat_map(|n| {
        prop::collection::vec(-5.0f64..5.0, n * 3)
            .prop_map(move |d| Tensor::new(vec![n, 3], d).unwrap())
    })
}

fn sorted_bits(v: &[f64]) -> Vec<u64> {
    let mut b: Vec<u64> = v.iter().map(|x| x.to_bits()).collect();
    b.sort_unstable();
    b
}

proptest! {
    #[test]
    fn negation_and_time_reversal_are_involutions(x in window_strategy()) {
        for p in [TransformParams::Negated, TransformParams::HFlipped] {
            let s = TransformSpec::new(p, 0);
            let twice = apply_transform(&apply_transform(&x, &s).unwrap(), &s).unwrap();
            prop_assert_eq!(twice.data(), x.data());
        }
    }

    #[test]
    fn rotation_keeps_every_sample_norm(x in window_strategy(), axis in prop::array::uniform3(-1.0f64..1.0), angle in 0.0f64..6.3) {
        prop_assume!(axis.iter().map(|a| a * a).sum::<f64>() > 1e-3);
        let n = axis.iter().map(|a| a * a).sum::<f64>().sqrt();
        let spec = TransformSpec::new(TransformParams::Rotated { axis: axis.map(|a| a / n), angle }, 0);
        let y = apply_transform(&x, &spec).unwrap();
        for (a, b) in x.data().chunks(3).zip(y.data().chunks(3)) {
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((na - nb).abs() <= 1e-9 * na.max(1.0));
        }
    }

    #[test]
    fn channel_shuffle_and_scaling_preserve_structure(x in window_strategy(), seed in any::<u64>()) {
        let cfg = selfhar_core::TransformConfig::default();
        let n = x.shape()[0];
        for kind in selfhar_core::TransformKind::ALL {
            let spec = TransformSpec::sample(kind, &cfg, n, 3, seed).unwrap();
            let y = apply_transform(&x, &spec).unwrap();
            prop_assert_eq!(y.shape(), x.shape());
            prop_assert!(y.is_finite());
        }
        let shuffle = TransformSpec::sample(selfhar_core::TransformKind::ChannelShuffled, &cfg, n, 3, seed).unwrap();
        let y = apply_transform(&x, &shuffle).unwrap();
        for (a, b) in x.data().chunks(3).zip(y.data().chunks(3)) {
            prop_assert_eq!(sorted_bits(a), sorted_bits(b));
        }
        prop_assert_ne!(y.data(), x.data());
    }
}

fn gaussian(n: usize, d: usize, seed: u64) -> Tensor {
    randn(&[n, d], &mut rng_from(seed))
}

fn matmul(a: &Tensor, m: &[Vec<f64>]) -> Tensor {
    let [n, d] = *a.shape() else { unreachable!() };
    let e = m[0].len();
    Tensor::from_fn(&[n, e], |i| {
        let (r, c) = (i / e, i % e);
        (0..d).map(|j| a.at(&[r, j]) * m[j][c]).sum()
    })
}

#[test]
fn svcca_is_symmetric() {
    let a = gaussian(400, 8, 1);
    let mut b = gaussian(400, 6, 2);
    for (i, v) in b.data_mut().iter_mut().enumerate() {
        *v += 0.8 * a.data()[(i / 6) * 8 + i % 6];
    }
    let ab = svcca_correlations(&a, &b).unwrap();
    let ba = svcca_correlations(&b, &a).unwrap();
    assert_eq!(ab.len(), ba.len());
    for (x, y) in ab.iter().zip(&ba) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn svcca_ignores_rotations_and_uniform_scale() {
    // The variance-based truncation is only orthogonally invariant, so
    // per-column rescaling is not expected to leave the score unchanged.
    let a = gaussian(500, 10, 3);
    let mut b = gaussian(500, 10, 4);
    for (i, v) in b.data_mut().iter_mut().enumerate() {
        *v += a.data()[i];
    }
    let base = svcca_similarity(&a, &b, 10).unwrap();
    // Givens rotation in the (0, 1) plane
    let (c, s) = (0.6f64, 0.8f64);
    let mut m = vec![vec![0.0; 10]; 10];
    for (j, row) in m.iter_mut().enumerate() {
        row[j] = 1.0;
    }
    m[0][0] = c;
    m[0][1] = -s;
    m[1][0] = s;
    m[1][1] = c;
    let moved = svcca_similarity(&matmul(&a, &m), &b, 10).unwrap();
    assert!((base - moved).abs() < 1e-6, "{base} vs {moved}");
    let scaled = Tensor::from_fn(&[500, 10], |i| b.data()[i] * 7.5);
    assert!((base - svcca_similarity(&a, &scaled, 10).unwrap()).abs() < 1e-6);
}

#[test]
fn saliency_of_a_linear_softmax_is_its_weight_difference() {
    // p = softmax(x . W) over a flattened [N, C] window; dL/dx = W (p - y)
    let (n, c, k) = (5usize, 3usize, 4usize);
    let mut rng = rng_from(8);
    let x = randn(&[n, c], &mut rng);
    let w = randn(&[n * c, k], &mut rng);
    let b = Tensor::zeros(&[k]);
    let target = 2;
    let grad = input_gradient(&x, SaliencyTarget::Class(target), |g, xv| {
        let flat = g.reshape(xv, &[1, n * c])?;
        let (wv, bv) = (g.input(w.clone()), g.input(b.clone()));
        let z = g.dense(flat, wv, bv)?;
        g.softmax(z, 1)
    })
    .unwrap();
    let logits: Vec<f64> = (0..k)
        .map(|j| (0..n * c).map(|i| x.data()[i] * w.at(&[i, j])).sum())
        .collect();
    let m = logits.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let p: Vec<f64> = logits.iter().map(|l| (l - m).exp() / z).collect();
    for i in 0..n * c {
        let want: f64 = (0..k)
            .map(|j| w.at(&[i, j]) * (p[j] - f64::from(u8::from(j == target))))
            .sum();
        assert!((grad.data()[i] - want.abs()).abs() < 1e-12);
    }
}

#[test]
fn saliency_matches_finite_differences() {
    let model = ActivityClassifier::new(4, 3, TrunkLayer::ConvC, 5).unwrap();
    let x = randn(&[64, 3], &mut rng_from(9));
    let probs = |x: &Tensor| {
        model
            .predict_proba(&x.clone().reshape(vec![1, 64, 3]).unwrap())
            .unwrap()
            .data()
            .to_vec()
    };
    let p0 = probs(&x);
    let class = (0..4).max_by(|&a, &b| p0[a].total_cmp(&p0[b])).unwrap();
    let grad = input_gradient(&x, SaliencyTarget::Predicted, |g, xv| {
        let bound = model.params.bind(g);
        model.forward(g, &bound, xv, false, &mut rng_from(0))
    })
    .unwrap();
    let h = 1e-6;
    let mut num = Vec::new();
    for i in 0..x.len() {
        let mut up = x.clone();
        up.data_mut()[i] += h;
        let mut down = x.clone();
        down.data_mut()[i] -= h;
        num.push(((-probs(&up)[class].ln()) - (-probs(&down)[class].ln())).abs() / (2.0 * h));
    }
    let diff: f64 = grad
        .data()
        .iter()
        .zip(&num)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(diff / scale < 1e-3, "relative error {}", diff / scale);
    let map = saliency_map(&model, &x, SaliencyTarget::Predicted).unwrap();
    assert_eq!(map.shape(), [64]);
}

fn dataset(n: usize) -> WindowedDataset {
    let mut rng = rng_from(12);
    let windows: Vec<Tensor> = (0..n).map(|_| randn(&[80, 3], &mut rng)).collect();
    let users = (0..n).map(|i| format!("u{}", i % 3)).collect();
    WindowedDataset::from_windows(&windows, Some((0..n).map(|i| i % 2).collect()), users).unwrap()
}

#[test]
fn embeddings_have_one_column_per_channel_and_are_reproducible() {
    let ds = dataset(300);
    let model = ActivityClassifier::new(2, 3, TrunkLayer::ConvC, 1).unwrap();
    let e = embeddings(&model, &ds).unwrap();
    assert_eq!(e.shape(), [300, 96]);
    assert_eq!(e.data(), embeddings(&model, &ds).unwrap().data());
    // batched features agree with one-at-a-time features
    let single = model.features(&ds.batch(&[257])).unwrap();
    for (a, b) in e.data()[257 * 96..258 * 96].iter().zip(single.data()) {
        assert!((a - b).abs() < 1e-12);
    }

    let mut a = Vec::new();
    export_embeddings(&model, &ds, "m", &mut a).unwrap();
    let mut b = Vec::new();
    export_embeddings(&model, &ds, "m", &mut b).unwrap();
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 301);
    assert!(text.lines().all(|l| l.split(',').count() == 100));
    assert!(text.lines().nth(1).unwrap().starts_with("m,0,u0,0,"));
}
