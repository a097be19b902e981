//! Attention block against scalar loops, batch invariance of both networks
//! and end-to-end gradient checks of the reduced variants.

use levitmc::densenet::{build_densenet, DenseNetConfig};
use levitmc::levit::{attention_block_forward, build_levit, LeViTConfig};
use levitmc::model::{Mode, ModelGraph, ParamKind};
use levitmc::tensor::{GradCheckConfig, Graph, Tensor, BN_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PREFIX: &str = "stage0.block0";

fn tiny_levit(input_size: usize) -> LeViTConfig {
    LeViTConfig {
        stem_channels: vec![8],
        stage_dims: vec![8],
        stage_depths: vec![1],
        heads: vec![2],
        key_dim: 4,
        mlp_ratio: 2,
        input_size,
        input_downsample: 1,
        ..LeViTConfig::default()
    }
}

/// Replaces every tensor with random values; variances stay positive.
fn randomize(model: &mut ModelGraph, rng: &mut ChaCha8Rng) {
    let entries: Vec<_> = model.params.entries().to_vec();
    for e in entries {
        let t = Tensor::from_fn(e.tensor.shape(), |_| match e.kind {
            ParamKind::Buffer if e.name.ends_with("running_var") => rng.gen_range(0.5..1.5),
            _ => rng.gen_range(-1.0..1.0),
        });
        model.params.replace(&e.name, t).unwrap();
    }
}

fn p(model: &ModelGraph, name: &str) -> Vec<f64> {
    let t = model.params.get(&format!("{PREFIX}.{name}")).unwrap();
    t.data().iter().map(|&v| v as f64).collect()
}

fn hardswish(x: f64) -> f64 {
    x * (x + 3.0).clamp(0.0, 6.0) / 6.0
}

/// `rows × d` matrix times `(d, g)` weight plus bias.
fn affine(x: &[Vec<f64>], w: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
    let g = b.len();
    x.iter()
        .map(|row| (0..g).map(|j| b[j] + row.iter().enumerate().map(|(i, v)| v * w[i * g + j]).sum::<f64>()).collect())
        .collect()
}

fn norm(model: &ModelGraph, x: &[Vec<f64>], name: &str, train: bool) -> Vec<Vec<f64>> {
    let (gamma, beta) = (p(model, &format!("{name}.gamma")), p(model, &format!("{name}.beta")));
    let d = gamma.len();
    let (mean, var): (Vec<f64>, Vec<f64>) = if train {
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..d).map(|c| x.iter().map(|r| r[c]).sum::<f64>() / n).collect();
        let var = (0..d).map(|c| x.iter().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / n).collect();
        (mean, var)
    } else {
        (p(model, &format!("{name}.running_mean")), p(model, &format!("{name}.running_var")))
    };
    x.iter()
        .map(|r| (0..d).map(|c| (r[c] - mean[c]) / (var[c] + BN_EPS).sqrt() * gamma[c] + beta[c]).collect())
        .collect()
}

/// Residual attention then residual MLP over a 2×2 grid, written as loops.
fn block_oracle(model: &ModelGraph, x: &[Vec<f64>], train: bool) -> Vec<Vec<f64>> {
    let (heads, kd, vd, side) = (2, 4, 8, 2usize);
    let l = x.len();
    let xn = norm(model, x, "attn.norm", train);
    let q = affine(&xn, &p(model, "attn.q.weight"), &p(model, "attn.q.bias"));
    let k = affine(&xn, &p(model, "attn.k.weight"), &p(model, "attn.k.bias"));
    let v = affine(&xn, &p(model, "attn.v.weight"), &p(model, "attn.v.bias"));
    let table = p(model, "attn.bias_table");
    let span = 2 * side - 1;
    let mut mixed = vec![vec![0.0; heads * vd]; l];
    for h in 0..heads {
        for i in 0..l {
            let (ir, ic) = ((i / side) as isize, (i % side) as isize);
            let logits: Vec<f64> = (0..l)
                .map(|j| {
                    let (jr, jc) = ((j / side) as isize, (j % side) as isize);
                    let off = ((ir - jr + 1) as usize) * span + (ic - jc + 1) as usize;
                    let dot: f64 = (0..kd).map(|c| q[i][h * kd + c] * k[j][h * kd + c]).sum();
                    dot / (kd as f64).sqrt() + table[h * span * span + off]
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..vd {
                mixed[i][h * vd + c] = (0..l).map(|j| e[j] / s * v[j][h * vd + c]).sum();
            }
        }
    }
    let mixed: Vec<Vec<f64>> = mixed.iter().map(|r| r.iter().map(|&z| hardswish(z)).collect()).collect();
    let a = affine(&mixed, &p(model, "attn.proj.weight"), &p(model, "attn.proj.bias"));
    let x1: Vec<Vec<f64>> = x.iter().zip(&a).map(|(r, s)| r.iter().zip(s).map(|(u, w)| u + w).collect()).collect();
    let h = norm(model, &x1, "mlp.norm", train);
    let h = affine(&h, &p(model, "mlp.fc1.weight"), &p(model, "mlp.fc1.bias"));
    let h: Vec<Vec<f64>> = h.iter().map(|r| r.iter().map(|&z| hardswish(z)).collect()).collect();
    let h = affine(&h, &p(model, "mlp.fc2.weight"), &p(model, "mlp.fc2.bias"));
    x1.iter().zip(&h).map(|(r, s)| r.iter().zip(s).map(|(u, w)| u + w).collect()).collect()
}

fn run_block(model: &ModelGraph, tokens: &Tensor<f64>, mode: Mode) -> Tensor<f64> {
    let mut g = Graph::<f64>::new();
    let bound = model.bind(&mut g, |_| false);
    let x = g.constant(tokens.clone());
    let y = attention_block_forward(model, &mut g, &bound, PREFIX, x, mode).unwrap();
    g.value(y).clone()
}

#[test]
fn attention_block_matches_scalar_oracle() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = build_levit(&tiny_levit(4), seed).unwrap();
        randomize(&mut model, &mut rng);
        let tokens = Tensor::from_fn(&[1, 4, 8], |_| rng.gen_range(-2.0..2.0));
        let rows: Vec<Vec<f64>> = tokens.data().chunks(8).map(<[f64]>::to_vec).collect();
        for (mode, train) in [(Mode::Eval, false), (Mode::Train, true)] {
            let got = run_block(&model, &tokens, mode);
            assert_eq!(got.shape(), [1, 4, 8]);
            let want: Vec<f64> = block_oracle(&model, &rows, train).concat();
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-5, "seed {seed} {mode:?}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn single_token_attention_ignores_queries_and_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut model = build_levit(&tiny_levit(2), 3).unwrap();
    randomize(&mut model, &mut rng);
    let tokens = Tensor::from_fn(&[2, 1, 8], |_| rng.gen_range(-1.0..1.0));
    let before = run_block(&model, &tokens, Mode::Eval);
    for name in ["attn.q.weight", "attn.k.weight", "attn.k.bias"] {
        let full = format!("{PREFIX}.{name}");
        let t = model.params.get(&full).unwrap().map(|v| v * -3.0 + 0.5);
        model.params.replace(&full, t).unwrap();
    }
    let after = run_block(&model, &tokens, Mode::Eval);
    assert!(before.max_abs_diff(&after).unwrap() < 1e-12);
}

fn batch_invariance(model: &ModelGraph, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let one = Tensor::<f32>::from_fn(&[3, 224, 224], |_| rng.gen_range(0.0..1.0));
    let other = Tensor::<f32>::from_fn(&[3, 224, 224], |_| rng.gen_range(0.0..1.0));
    let single = model.infer(&Tensor::stack(&[&one]).unwrap()).unwrap();
    let batch = model.infer(&Tensor::stack(&[&other, &one, &one]).unwrap()).unwrap();
    let c = single.shape()[1];
    for row in [1, 2] {
        for j in 0..c {
            let (a, b) = (single.data()[j], batch.data()[row * c + j]);
            assert!((a - b).abs() <= 1e-5, "row {row} logit {j}: {a} vs {b}");
        }
    }
}

#[test]
fn eval_logits_do_not_depend_on_batch_company() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut dense = build_densenet(&DenseNetConfig::toy(), 1).unwrap();
    let mut levit = build_levit(&LeViTConfig::toy(), 1).unwrap();
    // non-trivial running statistics
    randomize(&mut dense, &mut rng);
    randomize(&mut levit, &mut rng);
    batch_invariance(&dense, 2);
    batch_invariance(&levit, 3);
}

#[test]
fn reduced_networks_pass_gradient_checks() {
    let config = GradCheckConfig {
        step: 1e-4,
        tolerance: 1e-3,
        max_coords: Some(16),
        ..GradCheckConfig::default()
    };
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let cases = [
            (build_densenet(&DenseNetConfig::reduced(), seed).unwrap(), DenseNetConfig::reduced().input_size),
            (build_levit(&LeViTConfig::reduced(), seed).unwrap(), LeViTConfig::reduced().input_size),
        ];
        for (model, size) in cases {
            let x = Tensor::from_fn(&[4, 3, size, size], |_| rng.gen_range(0.0..1.0));
            let labels: Vec<usize> = (0..4).map(|i| (i * 7 + seed as usize) % model.num_classes()).collect();
            let report = model.grad_check(&x, &labels, &config).unwrap();
            let checked: usize = report.inputs.iter().map(|r| r.checked).sum();
            assert!(checked > 50, "{} seed {seed}: only {checked} coordinates checked", model.tag());
            assert!(report.passed(), "{} seed {seed}: {}", model.tag(), report.max_rel_err);
        }
    }
}
