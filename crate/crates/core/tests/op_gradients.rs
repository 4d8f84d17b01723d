//! Finite-difference checks of every graph op and layer over random shapes.

use audiocodec::numerics::{
    grad_check, Binder, ConvParams, GradCheckOptions, Graph, LayerKind, LayerSpec, NodeId, ParamStore, Tensor,
};
use audiocodec::Result;
use proptest::prelude::*;
use proptest::test_runner::RngSeed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;
/// Step for functions that are polynomial (degree <= 4) in each coordinate,
/// where the five-point stencil is exact and a large step minimizes roundoff.
const POLY_STEP: f64 = 0.25;
const SMOOTH_STEP: f64 = 1e-4;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        failure_persistence: None,
        rng_seed: RngSeed::Fixed(0x6772_6164),
        ..ProptestConfig::default()
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Random values bounded away from zero, for ops with a kink at 0.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Contract the output with a fixed random tensor to get a scalar with
/// well-spread partial derivatives.
fn project(g: &mut Graph<f64>, y: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = g.shape(y).to_vec();
    let r = g.constant(&rand_tensor(&mut rng, &shape));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn check<F>(inputs: &[Tensor<f64>], epsilon: f64, f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let opts = GradCheckOptions {
        epsilon,
        ..Default::default()
    };
    let r = grad_check(f, inputs, &opts).unwrap();
    assert!(r.failure.is_none(), "{r:?}");
    r.max_rel_error
}

fn layer_check(layer: &LayerSpec, input_shape: &[usize], seed: u64) -> f64 {
    let mut store = ParamStore::new();
    layer.init(&mut store, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Perturb LayerNorm affine away from identity so its gradient is exercised.
    for (name, t) in store.iter_mut() {
        if name.ends_with("gamma") || name.ends_with("beta") {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.5f32..0.5));
        }
    }
    let names: Vec<String> = store.names().map(String::from).collect();
    let mut inputs = vec![if matches!(layer.kind, LayerKind::LeakyRelu { .. }) {
        away_from_zero(&mut rng, input_shape)
    } else {
        rand_tensor(&mut rng, input_shape)
    }];
    inputs.extend(names.iter().map(|n| store.get(n).unwrap().cast::<f64>()));
    let step = match layer.kind {
        LayerKind::LayerNorm { .. } | LayerKind::Gelu => SMOOTH_STEP,
        // piecewise linear: keep perturbations inside one linear piece
        LayerKind::LeakyRelu { .. } => 0.02,
        _ => POLY_STEP,
    };
    check(&inputs, step, |g, ids| {
        let map = names.iter().cloned().zip(ids[1..].iter().copied()).collect();
        let mut binder = Binder::from_nodes(map);
        let y = layer.apply(g, &mut binder, ids[0])?;
        project(g, y, seed)
    })
}

proptest! {
    #![proptest_config(config(100))]

    #[test]
    fn conv1d_layer(seed in any::<u64>(), cin in 1usize..4, cout in 1usize..4, k in 1usize..6,
                    stride in 1usize..4, dil in 1usize..3, pad in 0usize..3, len in 8usize..20, b in 1usize..3) {
        let layer = LayerSpec::new("c", LayerKind::Conv1d {
            in_channels: cin, out_channels: cout, kernel: k, stride, padding: pad, dilation: dil,
        });
        prop_assume!(layer.out_len(len).is_some_and(|l| l > 0));
        prop_assert!(layer_check(&layer, &[b, cin, len], seed) < TOL);
    }

    #[test]
    fn depthwise_conv1d_layer(seed in any::<u64>(), ch in 1usize..5, k in 1usize..8, dil in 1usize..3, len in 8usize..20) {
        let layer = LayerSpec::new("d", LayerKind::DepthwiseConv1d {
            channels: ch, kernel: k, stride: 1, padding: dil * (k - 1) / 2, dilation: dil,
        });
        prop_assume!(layer.out_len(len).is_some_and(|l| l > 0));
        prop_assert!(layer_check(&layer, &[2, ch, len], seed) < TOL);
    }

    #[test]
    fn conv_transpose1d_layer(seed in any::<u64>(), cin in 1usize..4, cout in 1usize..4, stride in 1usize..5,
                              extra in 0usize..3, len in 1usize..10) {
        let k = stride + extra;
        let pad = extra / 2;
        let layer = LayerSpec::new("t", LayerKind::ConvTranspose1d {
            in_channels: cin, out_channels: cout, kernel: k, stride, padding: pad,
        });
        let out = layer.out_len(len).unwrap();
        prop_assert_eq!(out, (len - 1) * stride + k - 2 * pad);
        prop_assert!(layer_check(&layer, &[2, cin, len], seed) < TOL);
    }

    #[test]
    fn linear_layer(seed in any::<u64>(), din in 1usize..6, dout in 1usize..6, rows in 1usize..5) {
        let layer = LayerSpec::new("l", LayerKind::Linear { in_features: din, out_features: dout });
        prop_assert!(layer_check(&layer, &[rows, din], seed) < TOL);
    }

    #[test]
    fn layer_norm_layer(seed in any::<u64>(), ch in 2usize..6, len in 1usize..8, rank3 in any::<bool>()) {
        let layer = LayerSpec::new("n", LayerKind::LayerNorm { channels: ch });
        let shape = if rank3 { vec![2, ch, len] } else { vec![len, ch] };
        prop_assert!(layer_check(&layer, &shape, seed) < TOL);
    }

    #[test]
    fn leaky_relu_layer(seed in any::<u64>(), n in 1usize..30) {
        let layer = LayerSpec::new("a", LayerKind::LeakyRelu { negative_slope: 0.1 });
        prop_assert!(layer_check(&layer, &[1, 1, n], seed) < TOL);
    }

    #[test]
    fn gelu_layer(seed in any::<u64>(), n in 1usize..30) {
        let layer = LayerSpec::new("a", LayerKind::Gelu);
        prop_assert!(layer_check(&layer, &[1, 1, n], seed) < TOL);
    }

    #[test]
    fn grouped_conv(seed in any::<u64>(), groups in 1usize..4, cin_g in 1usize..3, cout_g in 1usize..3, k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[1, groups * cin_g, 12]);
        let w = rand_tensor(&mut rng, &[groups * cout_g, cin_g, k]);
        let b = rand_tensor(&mut rng, &[groups * cout_g]);
        let p = ConvParams { stride: 2, padding: k / 2, dilation: 1, groups };
        let e = check(&[x, w, b], POLY_STEP, |g, ids| {
            let y = g.conv1d(ids[0], ids[1], Some(ids[2]), p)?;
            project(g, y, seed)
        });
        prop_assert!(e < TOL, "{e}");
    }
}

proptest! {
    #![proptest_config(config(40))]

    #[test]
    fn elementwise_ops(seed in any::<u64>(), n in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = away_from_zero(&mut rng, &[n]);
        let b = rand_tensor(&mut rng, &[n]);
        let pos = Tensor::from_fn([n], |_| rng.gen_range(0.5..2.0));
        let e = check(&[a, b, pos], SMOOTH_STEP, |g, ids| {
            let (a, b, p) = (ids[0], ids[1], ids[2]);
            let s = g.add(a, b)?;
            let d = g.sub(s, p)?;
            let m = g.mul(d, b)?;
            let sc = g.scale(m, 0.7);
            let sh = g.add_scalar(sc, 0.3);
            let ex = g.exp(sh);
            let lg = g.log(p);
            let sq = g.sqrt(p);
            let th = g.tanh(b);
            let ab = g.abs(a);
            let q = g.square(b);
            let mx = g.max_const(a, 0.0);
            let parts = [ex, lg, sq, th, ab, q, mx];
            let mut acc = g.mean(parts[0]);
            for &p in &parts[1..] {
                let s = project(g, p, seed)?;
                acc = g.add(acc, s)?;
            }
            Ok(acc)
        });
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn distance_losses(seed in any::<u64>(), n in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[n]);
        let offs = away_from_zero(&mut rng, &[n]);
        let b = Tensor::from_fn([n], |i| a.data()[i] + offs.data()[i]);
        let e = check(&[a, b], 0.02, |g, ids| {
            let l1 = g.l1(ids[0], ids[1])?;
            let l2 = g.mse(ids[0], ids[1])?;
            g.add(l1, l2)
        });
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn shape_ops(seed in any::<u64>(), a in 1usize..4, b in 1usize..4, c in 1usize..4, perm_i in 0usize..6) {
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[a, b, c + 1]);
        let y = rand_tensor(&mut rng, &[a, b, 2]);
        let e = check(&[x, y], POLY_STEP, |g, ids| {
            let p = g.permute(ids[0], perms[perm_i])?;
            let n = g.narrow(ids[0], 2, 1, c)?;
            let cat = g.concat(&[n, ids[1]], 2)?;
            let r = g.reshape(cat, vec![a * b * (c + 2)])?;
            let s1 = project(g, p, seed)?;
            let s2 = project(g, r, seed + 1)?;
            g.add(s1, s2)
        });
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn matmul(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[m, k]);
        let b = rand_tensor(&mut rng, &[k, n]);
        let e = check(&[a, b], POLY_STEP, |g, ids| {
            let y = g.matmul(ids[0], ids[1])?;
            project(g, y, seed)
        });
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn pooling_folding_padding(seed in any::<u64>(), period in 1usize..5, rows in 1usize..5, pad in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = period * rows;
        let x = rand_tensor(&mut rng, &[2, 2, len]);
        let e = check(&[x], POLY_STEP, |g, ids| {
            let padded = g.pad_reflect(ids[0], pad, pad + 1)?;
            let lp = g.shape(padded)[2];
            let trimmed = g.narrow(padded, 2, 0, lp - lp % period)?;
            let f = g.period_fold(trimmed, period)?;
            let s1 = project(g, f, seed)?;
            let pooled = g.avg_pool1d(padded, 2, 2)?;
            let s2 = project(g, pooled, seed + 1)?;
            g.add(s1, s2)
        });
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn stft_power(seed in any::<u64>(), log_n in 2u32..6, hop_div in 1usize..4, len in 1usize..40) {
        let n_fft = 1usize << log_n;
        let hop = (n_fft / hop_div).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[2, len]);
        let e = check(&[x], POLY_STEP, |g, ids| {
            let p = g.stft_power(ids[0], n_fft, hop)?;
            project(g, p, seed)
        });
        prop_assert!(e < TOL, "{e}");
    }
}

#[test]
fn unsupported_rank_rejected_at_construction() {
    let mut g = Graph::<f64>::new();
    let x = g.input(&Tensor::zeros([4]));
    let w = g.input(&Tensor::zeros([1, 1, 3]));
    assert!(g.conv1d(x, w, None, ConvParams::default()).is_err());
    assert!(g.period_fold(x, 2).is_err());
    let s = g.sum(x);
    let y = g.input(&Tensor::zeros([2]));
    assert!(g.add(s, y).is_err());
}

