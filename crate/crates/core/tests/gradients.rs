//! Reverse-mode gradients against central differences, for every loss and layer.

use dida::losses::{
    class_nll_var, coral_loss_var, da_total_var, dann_domain_loss_var, di_total_var,
    median_heuristic_bandwidths, mmd_loss_var, recon_mse_var,
};
use dida::substrate::{finite_diff_check, finite_diff_probe, Graph, Layer, Sequential, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f32 = 1e-3;
const TOL: f64 = 1e-3;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Rows on the simplex, kept away from the clamp.
fn simplex(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Tensor {
    let mut data = Vec::new();
    for _ in 0..n {
        let raw: Vec<f32> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let s: f32 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / s));
    }
    Tensor::new(vec![n, k], data).unwrap()
}

#[test]
fn class_nll_gradients() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = simplex(&mut rng, 5, 4);
        let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..4)).collect();
        let err = finite_diff_check(
            |g, v| Ok(class_nll_var(g, v[0], &labels).unwrap()),
            &[p],
            EPS,
            64,
            seed,
        )
        .unwrap();
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}

#[test]
fn domain_loss_gradients_through_reversal() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = uniform(&mut rng, &[6, 1], 0.1, 0.9);
        let labels: Vec<f32> = (0..6).map(|i| (i % 2) as f32).collect();
        let err = finite_diff_check(
            |g, v| {
                let r = g.gradient_reversal(v[0], 1.0)?;
                Ok(dann_domain_loss_var(g, r, &labels).unwrap())
            },
            std::slice::from_ref(&p),
            EPS,
            64,
            seed,
        );
        // The reversal flips the analytic sign only; the numeric derivative of
        // the forward value is unchanged, so a direct check must fail.
        assert!(err.unwrap() > 0.5);
        let err = finite_diff_check(
            |g, v| Ok(dann_domain_loss_var(g, v[0], &labels).unwrap()),
            &[p],
            EPS,
            64,
            seed,
        )
        .unwrap();
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}

#[test]
fn domain_loss_reversed_gradient_is_negated_baseline() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = uniform(&mut rng, &[6, 1], 0.1, 0.9);
    let labels: Vec<f32> = (0..6).map(|i| (i % 2) as f32).collect();
    let run = |lambda: Option<f32>| {
        let mut g = Graph::new();
        let v = g.leaf(p.clone());
        let h = match lambda {
            Some(l) => g.gradient_reversal(v, l).unwrap(),
            None => v,
        };
        let l = dann_domain_loss_var(&mut g, h, &labels).unwrap();
        g.backward(l).unwrap();
        g.grad(v).unwrap().clone()
    };
    let base = run(None);
    let rev = run(Some(0.7));
    for (b, r) in base.data().iter().zip(rev.data()) {
        assert!((r - (-0.7 * b)).abs() <= 1e-6 * b.abs().max(1e-12));
    }
}

#[test]
fn coral_gradients() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fs = uniform(&mut rng, &[6, 3], -1.0, 1.0);
        let ft = uniform(&mut rng, &[5, 3], -1.5, 1.5);
        let err = finite_diff_check(
            |g, v| Ok(coral_loss_var(g, v[0], v[1]).unwrap()),
            &[fs, ft],
            EPS,
            64,
            seed,
        )
        .unwrap();
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}

#[test]
fn mmd_gradients() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fs = uniform(&mut rng, &[5, 3], -1.0, 1.0);
        let ft = uniform(&mut rng, &[4, 3], -0.5, 1.5);
        let bw = median_heuristic_bandwidths(&fs, &ft);
        let err = finite_diff_check(
            |g, v| Ok(mmd_loss_var(g, v[0], v[1], &bw).unwrap()),
            &[fs, ft],
            EPS,
            64,
            seed,
        )
        .unwrap();
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}

#[test]
fn recon_mse_gradients() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut rng, &[2, 4, 4, 3], 0.0, 1.0);
        let xh = uniform(&mut rng, &[2, 4, 4, 3], 0.0, 1.0);
        let err = finite_diff_check(
            |g, v| Ok(recon_mse_var(g, v[0], v[1]).unwrap()),
            &[x, xh],
            EPS,
            64,
            seed,
        )
        .unwrap();
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}

#[test]
fn composite_gradients() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = simplex(&mut rng, 4, 3);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        let d = uniform(&mut rng, &[4, 1], 0.1, 0.9);
        let dl: Vec<f32> = vec![0.0, 1.0, 1.0, 0.0];
        let alpha = rng.random_range(0.0..2.0);
        let err = finite_diff_check(
            |g, v| {
                let c = class_nll_var(g, v[0], &labels).unwrap();
                let dd = dann_domain_loss_var(g, v[1], &dl).unwrap();
                Ok(da_total_var(g, c, dd, alpha).unwrap())
            },
            &[p.clone(), d],
            EPS,
            64,
            seed,
        )
        .unwrap();
        assert!(err <= TOL, "da_total seed {seed}: {err}");

        let x = uniform(&mut rng, &[3, 4], 0.0, 1.0);
        let xh = uniform(&mut rng, &[3, 4], 0.0, 1.0);
        let beta = rng.random_range(0.0..1.0);
        let err = finite_diff_check(
            |g, v| {
                let r = recon_mse_var(g, v[0], v[1]).unwrap();
                let a = class_nll_var(g, v[2], &labels).unwrap();
                Ok(di_total_var(g, r, a, beta).unwrap())
            },
            &[x, xh, p],
            EPS,
            64,
            seed,
        )
        .unwrap();
        assert!(err <= TOL, "di_total seed {seed}: {err}");
    }
}

#[test]
fn double_reversal_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let fs = uniform(&mut rng, &[4, 2], -1.0, 1.0);
    let ft = uniform(&mut rng, &[4, 2], -1.0, 1.0);
    let run = |twice: bool| {
        let mut g = Graph::new();
        let a = g.leaf(fs.clone());
        let b = g.input(ft.clone());
        let h = if twice {
            let r = g.gradient_reversal(a, 1.0).unwrap();
            g.gradient_reversal(r, 1.0).unwrap()
        } else {
            a
        };
        let l = coral_loss_var(&mut g, h, b).unwrap();
        g.backward(l).unwrap();
        g.grad(a).unwrap().clone()
    };
    let plain = run(false);
    let twice = run(true);
    for (p, t) in plain.data().iter().zip(twice.data()) {
        assert!((p - t).abs() <= 1e-7);
    }
}

/// Layer gradients run entirely in f32: coordinates must agree to 2% relative
/// or 1e-4 absolute (the f32 rounding floor of the central difference).
#[test]
fn network_layer_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let net = Sequential::new(
        "probe",
        vec![
            Layer::Conv2d { in_c: 2, out_c: 3, kernel: 3, stride: 2 },
            Layer::Relu,
            Layer::Upsample2x,
            Layer::Tanh,
            Layer::Conv2d { in_c: 3, out_c: 2, kernel: 5, stride: 1 },
            Layer::Sigmoid,
            Layer::Flatten,
            Layer::Dense { in_dim: 6 * 6 * 2, out_dim: 4 },
            Layer::Softmax,
        ],
        &mut rng,
    )
    .unwrap();
    // Weights well away from the init scale so activations leave the linear regime.
    let params: Vec<Tensor> = net
        .params()
        .iter()
        .map(|p| uniform(&mut rng, p.value.shape(), -0.5, 0.5))
        .collect();
    let x = uniform(&mut rng, &[2, 6, 6, 2], 0.0, 1.0);
    let labels = [1usize, 3];
    let layers = net.layers().to_vec();
    let probes = finite_diff_probe(
        |g, v| {
            let mut h = g.input(x.clone());
            let mut p = 0;
            for layer in &layers {
                h = match layer {
                    Layer::Conv2d { kernel, stride, .. } => {
                        let out = g.conv2d(h, v[p], v[p + 1], *kernel, *stride)?;
                        p += 2;
                        out
                    }
                    Layer::Dense { .. } => {
                        let out = g.linear(h, v[p], v[p + 1])?;
                        p += 2;
                        out
                    }
                    Layer::Relu => g.relu(h),
                    Layer::Sigmoid => g.sigmoid(h),
                    Layer::Tanh => g.tanh(h),
                    Layer::Softmax => g.softmax(h)?,
                    Layer::Upsample2x => g.upsample2x(h)?,
                    Layer::Flatten => {
                        let n = g.value(h).rows();
                        let w = g.value(h).row_len();
                        g.reshape(h, vec![n, w])?
                    }
                    _ => unreachable!(),
                };
            }
            Ok(class_nll_var(g, h, &labels).unwrap())
        },
        &params,
        5e-3,
        200,
        3,
    )
    .unwrap();
    assert_eq!(probes.len(), 200);
    for p in probes {
        let abs = (p.analytic - p.numeric).abs();
        assert!(p.relative_error() <= 2e-2 || abs <= 1e-4, "{p:?}");
    }
}

#[test]
fn input_gradients_through_conv_and_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let w = uniform(&mut rng, &[9 * 2, 3], -0.5, 0.5);
    let b = uniform(&mut rng, &[3], -0.1, 0.1);
    let x = uniform(&mut rng, &[1, 4, 4, 2], 0.0, 1.0);
    let side = uniform(&mut rng, &[1, 5], -1.0, 1.0);
    let target = uniform(&mut rng, &[1, 4 * 4 * 3 / 4 + 5], 0.0, 1.0);
    let err = finite_diff_check(
        |g, v| {
            let wv = g.input(w.clone());
            let bv = g.input(b.clone());
            let c = g.conv2d(v[0], wv, bv, 3, 2)?;
            let f = g.reshape(c, vec![1, 12])?;
            let cat = g.concat_cols(f, v[1])?;
            let t = g.input(target.clone());
            Ok(recon_mse_var(g, cat, t).unwrap())
        },
        &[x, side],
        1e-2,
        100,
        1,
    )
    .unwrap();
    assert!(err <= 1e-2, "{err}");
}

#[test]
fn slice_rows_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = uniform(&mut rng, &[5, 3], -1.0, 1.0);
    let t = uniform(&mut rng, &[2, 3], -1.0, 1.0);
    let err = finite_diff_check(
        |g, v| {
            let head = g.slice_rows(v[0], 1, 3)?;
            let tail = g.slice_rows(v[0], 3, 5)?;
            let a = recon_mse_var(g, head, v[1]).unwrap();
            let b = coral_loss_var(g, tail, v[1]).unwrap();
            Ok(da_total_var(g, a, b, 0.5).unwrap())
        },
        &[x, t],
        EPS,
        64,
        2,
    )
    .unwrap();
    assert!(err <= TOL, "{err}");
}
