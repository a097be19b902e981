//! Forward ops against direct scalar-loop oracles, and backward passes
//! against central finite differences.

use levitmc_tensor::{grad_check, GradCheckConfig, Graph, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn check(
    f: impl Fn(&mut Graph<f64>, &[Var]) -> levitmc_tensor::Result<Var>,
    inputs: &[Tensor<f64>],
) {
    let report = grad_check(f, inputs, &GradCheckConfig::default()).unwrap();
    assert!(report.passed(), "{report:?}");
}

fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> (Vec<usize>, Vec<f64>) {
    let [n, c, h, wd] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let [o, _, k, _] = <[usize; 4]>::try_from(w.shape()).unwrap();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for bn in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b.data()[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += x.data()[((bn * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((oc * c + ic) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((bn * o + oc) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    (vec![n, o, oh, ow], out)
}

#[test]
fn conv2d_matches_loop_oracle_and_finite_differences() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[1, 2, 5, 5]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let (shape, expected) = conv_oracle(&x, &w, &b, 2, 1);

        let mut g = Graph::<f32>::new();
        let (xv, wv, bv) = (g.constant(x.cast()), g.param(w.cast()), g.param(b.cast()));
        let y = g.conv2d(xv, wv, Some(bv), 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &shape[..]);
        for (a, e) in g.value(y).data().iter().zip(&expected) {
            assert!((*a as f64 - e).abs() < 1e-5);
        }

        let proj = rand_tensor(&mut rng, &[shape.iter().product()]);
        check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                g.weighted_sum(y, &proj)
            },
            &[x, w, b],
        );
    }
}

#[test]
fn linear_matches_loop_oracle_and_finite_differences() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[4, 5]);
        let b = rand_tensor(&mut rng, &[5]);
        let mut g = Graph::<f32>::new();
        let (xv, wv, bv) = (g.constant(x.cast()), g.param(w.cast()), g.param(b.cast()));
        let y = g.linear(xv, wv, Some(bv)).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let mut e = b.data()[j];
                for p in 0..4 {
                    e += x.data()[i * 4 + p] * w.data()[p * 5 + j];
                }
                assert!((g.value(y).data()[i * 5 + j] as f64 - e).abs() < 1e-5);
            }
        }
        let proj = rand_tensor(&mut rng, &[15]);
        check(
            |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                g.weighted_sum(y, &proj)
            },
            &[x, w, b],
        );
    }
}

#[test]
fn batchnorm_statistics_and_finite_differences() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::from_fn(&[4, 3, 2, 2], |_| rng.gen_range(-3.0..5.0));
        let gamma = Tensor::<f64>::ones(&[3]);
        let beta = Tensor::<f64>::zeros(&[3]);
        let mut g = Graph::<f32>::new();
        let (xv, gv, bv) = (g.constant(x.cast()), g.param(gamma.cast()), g.param(beta.cast()));
        let (y, _) = g.batchnorm_train(xv, gv, bv).unwrap();
        let yd = g.value(y).data();
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| (0..4).map(move |s| (b * 3 + c) * 4 + s))
                .map(|i| yd[i] as f64)
                .collect();
            let mean = vals.iter().sum::<f64>() / 16.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }

        let gamma = rand_tensor(&mut rng, &[3]);
        let beta = rand_tensor(&mut rng, &[3]);
        let proj = rand_tensor(&mut rng, &[48]);
        check(
            |g, v| {
                let (y, _) = g.batchnorm_train(v[0], v[1], v[2])?;
                g.weighted_sum(y, &proj)
            },
            &[x, gamma, beta],
        );
    }
}

#[test]
fn batchnorm_normalized_input_passes_through() {
    // each channel: values ±1 → mean 0, biased var 1
    let x = Tensor::<f32>::from_fn(&[2, 2, 1, 2], |i| if i % 2 == 0 { 1.0 } else { -1.0 });
    let mut g = Graph::<f32>::new();
    let xv = g.constant(x.clone());
    let gv = g.param(Tensor::ones(&[2]));
    let bv = g.param(Tensor::zeros(&[2]));
    let (y, stats) = g.batchnorm_train(xv, gv, bv).unwrap();
    assert!(g.value(y).max_abs_diff(&x).unwrap() < 1e-4);
    assert_eq!(stats.mean, vec![0.0, 0.0]);
}

#[test]
fn batchnorm_eval_uses_running_stats() {
    let x = Tensor::<f64>::from_fn(&[2, 1, 1, 2], |i| i as f64);
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x);
    let gv = g.param(Tensor::full(&[1], 2.0));
    let bv = g.param(Tensor::full(&[1], 1.0));
    let y = g
        .batchnorm_eval(xv, gv, bv, &Tensor::full(&[1], 1.0), &Tensor::full(&[1], 4.0 - 1e-5))
        .unwrap();
    let expected = [0.0, 1.0, 2.0, 3.0].map(|v: f64| 2.0 * (v - 1.0) / 2.0 + 1.0);
    for (a, e) in g.value(y).data().iter().zip(expected) {
        assert!((a - e).abs() < 1e-12);
    }
}

fn away_from_kinks(rng: &mut ChaCha8Rng, n: usize, kinks: &[f64]) -> Tensor<f64> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v: f64 = rng.gen_range(-5.0..5.0);
        if kinks.iter().all(|k| (v - k).abs() > 1e-2) {
            out.push(v);
        }
    }
    Tensor::new(&[n], out).unwrap()
}

#[test]
fn activations_pass_finite_differences() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj = rand_tensor(&mut rng, &[32]);
        let x = away_from_kinks(&mut rng, 32, &[0.0]);
        check(
            |g, v| {
                let y = g.relu(v[0])?;
                g.weighted_sum(y, &proj)
            },
            &[x],
        );
        let x = away_from_kinks(&mut rng, 32, &[-3.0, 3.0]);
        check(
            |g, v| {
                let y = g.hardswish(v[0])?;
                g.weighted_sum(y, &proj)
            },
            &[x],
        );
    }
}

#[test]
fn softmax_matches_f64_oracle() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::from_fn(&[3, 5], |_| rng.gen_range(-4.0..4.0));
        let mut g = Graph::<f32>::new();
        let xv = g.constant(x.cast());
        let y = g.softmax(xv, 1).unwrap();
        for r in 0..3 {
            let row = &x.data()[r * 5..(r + 1) * 5];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            let got = &g.value(y).data()[r * 5..(r + 1) * 5];
            assert!((got.iter().map(|v| *v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
            for (a, v) in got.iter().zip(row) {
                assert!((*a as f64 - v.exp() / z).abs() < 1e-6);
            }
        }
        let proj = rand_tensor(&mut rng, &[15]);
        for axis in [0, 1] {
            check(
                |g, v| {
                    let y = g.softmax(v[0], axis)?;
                    g.weighted_sum(y, &proj)
                },
                &[x.clone()],
            );
        }
    }
}

fn attention_oracle(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    bias: &Tensor<f64>,
) -> Vec<f64> {
    let [n, h, lq, d] = <[usize; 4]>::try_from(q.shape()).unwrap();
    let lk = k.shape()[2];
    let dv = v.shape()[3];
    let mut out = vec![0.0; n * h * lq * dv];
    for b in 0..n {
        for hd in 0..h {
            for i in 0..lq {
                let logits: Vec<f64> = (0..lk)
                    .map(|j| {
                        let dot: f64 = (0..d)
                            .map(|e| {
                                q.data()[((b * h + hd) * lq + i) * d + e]
                                    * k.data()[((b * h + hd) * lk + j) * d + e]
                            })
                            .sum();
                        dot / (d as f64).sqrt() + bias.data()[(hd * lq + i) * lk + j]
                    })
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                for e in 0..dv {
                    out[((b * h + hd) * lq + i) * dv + e] = (0..lk)
                        .map(|j| logits[j].exp() / z * v.data()[((b * h + hd) * lk + j) * dv + e])
                        .sum();
                }
            }
        }
    }
    out
}

#[test]
fn attention_matches_scalar_oracle_and_finite_differences() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = rand_tensor(&mut rng, &[1, 2, 4, 3]);
        let k = rand_tensor(&mut rng, &[1, 2, 4, 3]);
        let v = rand_tensor(&mut rng, &[1, 2, 4, 3]);
        let bias = rand_tensor(&mut rng, &[2, 4, 4]);
        let expected = attention_oracle(&q, &k, &v, &bias);

        let mut g = Graph::<f32>::new();
        let vars: Vec<Var> = [&q, &k, &v, &bias].iter().map(|t| g.param(t.cast())).collect();
        let y = g.attention(vars[0], vars[1], vars[2], Some(vars[3])).unwrap();
        for (a, e) in g.value(y).data().iter().zip(&expected) {
            assert!((*a as f64 - e).abs() < 1e-5);
        }
        let weights = g.attention_weights(y).unwrap();
        for row in weights.chunks(4) {
            assert!((row.iter().map(|p| *p as f64).sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|p| *p >= 0.0));
        }

        let proj = rand_tensor(&mut rng, &[24]);
        check(
            |g, x| {
                let y = g.attention(x[0], x[1], x[2], Some(x[3]))?;
                g.weighted_sum(y, &proj)
            },
            &[q, k, v, bias],
        );
    }
}

#[test]
fn shrink_attention_shapes_pass_finite_differences() {
    // Lq ≠ Lk and a value width differing from the key width
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let q = rand_tensor(&mut rng, &[2, 2, 1, 3]);
    let k = rand_tensor(&mut rng, &[2, 2, 4, 3]);
    let v = rand_tensor(&mut rng, &[2, 2, 4, 6]);
    let bias = rand_tensor(&mut rng, &[2, 1, 4]);
    let expected = attention_oracle(&q, &k, &v, &bias);
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = [&q, &k, &v, &bias].iter().map(|t| g.param((*t).clone())).collect();
    let y = g.attention(vars[0], vars[1], vars[2], Some(vars[3])).unwrap();
    for (a, e) in g.value(y).data().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-12);
    }
    let proj = rand_tensor(&mut rng, &[24]);
    check(
        |g, x| {
            let y = g.attention(x[0], x[1], x[2], Some(x[3]))?;
            g.weighted_sum(y, &proj)
        },
        &[q, k, v, bias],
    );
}

#[test]
fn pooling_passes_finite_differences() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[2, 2, 5, 4]);
        let proj = rand_tensor(&mut rng, &[2 * 2 * 2 * 2]);
        check(
            |g, v| {
                let y = g.avgpool2d(v[0], 2, 2)?;
                g.weighted_sum(y, &proj)
            },
            &[x.clone()],
        );
        let proj = rand_tensor(&mut rng, &[4]);
        check(
            |g, v| {
                let y = g.global_avgpool(v[0])?;
                g.weighted_sum(y, &proj)
            },
            &[x],
        );
    }
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::<f64>::from_fn(&[4, 26], |_| rng.gen_range(-3.0..3.0));
        let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..26)).collect();
        let mut g = Graph::<f32>::new();
        let lv = g.param(logits.cast());
        let loss = g.cross_entropy(lv, &labels).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(lv).unwrap();
        for r in 0..4 {
            let row = &logits.data()[r * 26..(r + 1) * 26];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for j in 0..26 {
                let onehot = if j == labels[r] { 1.0 } else { 0.0 };
                let expected = (row[j].exp() / z - onehot) / 4.0;
                assert!((grad.data()[r * 26 + j] as f64 - expected).abs() < 1e-5);
            }
        }
        check(|g, v| g.cross_entropy(v[0], &labels), &[logits]);
    }
}

#[test]
fn structural_ops_pass_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = rand_tensor(&mut rng, &[2, 3, 2, 2]);
    let b = rand_tensor(&mut rng, &[2, 1, 2, 2]);
    let proj = rand_tensor(&mut rng, &[32]);
    check(
        |g, v| {
            let c = g.concat(&[v[0], v[1]])?;
            let p = g.permute(c, &[0, 2, 3, 1])?;
            let r = g.reshape(p, &[2, 4, 4])?;
            let s = g.index_select(r, &[3, 0, 0, 2])?;
            let t = g.add(s, r)?;
            g.weighted_sum(t, &proj)
        },
        &[a, b],
    );
    let p = rand_tensor(&mut rng, &[1, 2, 3]);
    let proj = rand_tensor(&mut rng, &[18]);
    check(
        |g, v| {
            let r = g.repeat_batch(v[0], 3)?;
            g.weighted_sum(r, &proj)
        },
        &[p],
    );
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in prop::collection::vec(prop::collection::vec(-1e4f32..1e4, 6), 1..5)
    ) {
        let n = rows.len();
        let data: Vec<f32> = rows.into_iter().flatten().collect();
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[n, 6], data).unwrap());
        let y = g.softmax(x, 1).unwrap();
        for row in g.value(y).data().chunks(6) {
            prop_assert!(row.iter().all(|p| *p >= 0.0));
            let s: f64 = row.iter().map(|p| *p as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn eval_ops_are_batch_invariant(seed in 0u64..1000) {
        // each sample's output depends only on that sample
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f32>::from_fn(&[3, 2, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let w = Tensor::<f32>::from_fn(&[3, 2, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let run = |input: Tensor<f32>| {
            let mut g = Graph::<f32>::new();
            let xv = g.constant(input);
            let wv = g.constant(w.clone());
            let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
            let y = g.hardswish(y).unwrap();
            let y = g.global_avgpool(y).unwrap();
            g.value(y).clone()
        };
        let full = run(x.clone());
        let single = run(x.slice_axis0(1, 2).unwrap());
        prop_assert_eq!(full.slice_axis0(1, 2).unwrap(), single);
    }
}
