use dida::config::parse_config;
use dida::data::{encode_idx_pair, make_desk_benchmark, parse_idx_pair, resize_image, BatchOrder, DatasetSplit, DeskConfig};
use dida::losses::{class_nll, coral_loss, da_total, di_total, mmd_loss, recon_mse};
use dida::synthesis::{pair_indices, refresh_pool, Pairing, PoolPolicy, Provenance, SyntheticSet};
use dida::substrate::Tensor;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f32..3.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn two_matrices() -> impl Strategy<Value = (Tensor, Tensor)> {
    (2usize..6, 2usize..6, 1usize..4).prop_flat_map(|(ns, nt, d)| (matrix(ns, d), matrix(nt, d)))
}

fn softmax_rows(logits: &[f32], k: usize) -> Vec<f32> {
    logits
        .chunks(k)
        .flat_map(|r| {
            let m = r.iter().cloned().fold(f32::MIN, f32::max);
            let e: Vec<f32> = r.iter().map(|v| (v - m).exp()).collect();
            let s: f32 = e.iter().sum();
            e.into_iter().map(move |v| v / s)
        })
        .collect()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

fn synth_set(n: usize, iteration: usize) -> SyntheticSet {
    let samples = (0..n)
        .map(|k| dida::data::Sample {
            id: format!("s{iteration}_{k}"),
            image: Tensor::zeros(vec![1, 2, 2]),
            label: Some(k % 3),
            domain: dida::data::Domain::SyntheticTarget,
        })
        .collect();
    let provenance = (0..n)
        .map(|k| Provenance {
            synth_id: format!("s{iteration}_{k}"),
            source_id: format!("src{k}"),
            target_id: format!("tgt{k}"),
            label: k % 3,
            iteration,
        })
        .collect();
    SyntheticSet { samples, provenance, iteration }
}

proptest! {
    #[test]
    fn nll_is_mean_negative_log_prob((n, k) in (1usize..8, 2usize..6), seed in any::<u64>()) {
        let mut s = seed;
        let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (s >> 33) as f32 / (1u64 << 31) as f32 };
        let logits: Vec<f32> = (0..n * k).map(|_| 4.0 * next() - 2.0).collect();
        let labels: Vec<usize> = (0..n).map(|_| (next() * k as f32) as usize % k).collect();
        let p = softmax_rows(&logits, k);
        let preds = Tensor::new(vec![n, k], p.clone()).unwrap();
        let got = class_nll(&preds, &labels).unwrap().value;
        let want = labels.iter().enumerate().map(|(i, &y)| -(p[i * k + y] as f64).ln()).sum::<f64>() / n as f64;
        prop_assert!(close(got, want, 1e-5), "{got} vs {want}");

        let rev: Vec<usize> = (0..n).rev().collect();
        let permuted = class_nll(&preds.gather_rows(&rev), &rev.iter().map(|&i| labels[i]).collect::<Vec<_>>()).unwrap().value;
        prop_assert!(close(got, permuted, 1e-6));
    }

    #[test]
    fn coral_symmetric_nonnegative_zero_on_self((a, b) in two_matrices()) {
        let ab = coral_loss(&a, &b).unwrap().value;
        let ba = coral_loss(&b, &a).unwrap().value;
        prop_assert!(ab >= 0.0);
        prop_assert!(close(ab, ba, 1e-9));
        prop_assert!(coral_loss(&a, &a).unwrap().value.abs() < 1e-9);
    }

    #[test]
    fn mmd_symmetric_nonnegative_zero_on_self((a, b) in two_matrices(), sigma in 0.2f64..4.0) {
        let bw = [sigma];
        let ab = mmd_loss(&a, &b, &bw).unwrap().value;
        let ba = mmd_loss(&b, &a, &bw).unwrap().value;
        prop_assert!(ab >= -1e-9);
        prop_assert!(close(ab, ba, 1e-9));
        prop_assert!(mmd_loss(&a, &a, &bw).unwrap().value.abs() < 1e-9);
    }

    #[test]
    fn mse_matches_direct_mean((x, y) in (1usize..5, 1usize..7).prop_flat_map(|(n, d)| (matrix(n, d), matrix(n, d)))) {
        let got = recon_mse(&x, &y).unwrap().value;
        let want = x.data().iter().zip(y.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / x.len() as f64;
        prop_assert!(close(got, want, 1e-6));
        prop_assert_eq!(recon_mse(&x, &x).unwrap().value, 0.0);
    }

    #[test]
    fn composites_follow_formula(a in -5.0f64..5.0, b in -5.0f64..5.0, w in 0.0f64..3.0) {
        let da = da_total(a, b, w);
        prop_assert!(close(da.value, a + w * b, 1e-12));
        prop_assert!(close(da.terms.iter().map(|t| t.1).sum::<f64>(), da.value, 1e-12));
        let di = di_total(a, b, w);
        prop_assert!(close(di.value, a - w * b, 1e-12));
        prop_assert!(close(di.terms.iter().map(|t| t.1).sum::<f64>(), di.value, 1e-12));
    }

    #[test]
    fn batches_partition_every_epoch(len in 1usize..200, bs in 1usize..40, seed in any::<u64>(), epoch in 0u64..5) {
        let order = BatchOrder::new(len, bs, seed).unwrap();
        let batches = order.epoch(epoch);
        prop_assert_eq!(batches.len(), len.div_ceil(bs));
        prop_assert!(batches[..batches.len() - 1].iter().all(|b| b.len() == bs));
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
        prop_assert_eq!(order.epoch(epoch), BatchOrder::new(len, bs, seed).unwrap().epoch(epoch));
    }

    #[test]
    fn idx_round_trips(rows in 1usize..6, cols in 1usize..6, raw in prop::collection::vec((any::<u8>(), 0u8..10), 1..12)) {
        let images: Vec<Vec<u8>> = raw.iter().enumerate().map(|(i, (b, _))| (0..rows * cols).map(|j| b.wrapping_add((i * 31 + j) as u8)).collect()).collect();
        let labels: Vec<u8> = raw.iter().map(|r| r.1).collect();
        let (ib, lb) = encode_idx_pair(rows, cols, &images, &labels);
        prop_assert_eq!(&ib[..4], &[0u8, 0, 8, 3][..]);
        let ds = parse_idx_pair(&ib, &lb).unwrap();
        prop_assert_eq!((ds.rows, ds.cols), (rows, cols));
        prop_assert_eq!(ds.labels, labels.iter().map(|&l| l as usize).collect::<Vec<_>>());
        for (img, src) in ds.images.iter().zip(&images) {
            prop_assert_eq!(img.iter().map(|v| (v * 255.0).round() as u8).collect::<Vec<_>>(), src.clone());
        }
    }

    #[test]
    fn pairing_indices_in_range(n in 0usize..100, ns in 1usize..30, nt in 1usize..30, seed in any::<u64>(), cyclic in any::<bool>()) {
        let pairing = if cyclic { Pairing::Cyclic } else { Pairing::Random };
        let pairs = pair_indices(n, ns, nt, pairing, seed);
        prop_assert_eq!(pairs.len(), n);
        for (k, &(s, t)) in pairs.iter().enumerate() {
            prop_assert_eq!(s, k % ns);
            prop_assert!(t < nt);
            if cyclic { prop_assert_eq!(t, k % nt); }
        }
        prop_assert_eq!(pairs, pair_indices(n, ns, nt, pairing, seed));
    }

    #[test]
    fn pool_policies(old in 0usize..10, new in 0usize..10) {
        let replaced = refresh_pool(synth_set(old, 1), synth_set(new, 2), PoolPolicy::Replace);
        prop_assert_eq!(replaced.len(), new);
        let appended = refresh_pool(synth_set(old, 1), synth_set(new, 2), PoolPolicy::Append);
        prop_assert_eq!(appended.len(), old + new);
        prop_assert_eq!(appended.provenance.len(), appended.samples.len());
        prop_assert_eq!(appended.iteration, 2);
    }

    #[test]
    fn resize_preserves_constants(c in 1usize..4, h in 8usize..20, w in 8usize..20, oh in 8usize..24, ow in 8usize..24, v in 0.0f32..1.0) {
        let img = Tensor::filled(vec![c, h, w], v);
        let out = resize_image(&img, oh, ow).unwrap();
        prop_assert_eq!(out.shape(), &[c, oh, ow][..]);
        prop_assert!(out.data().iter().all(|x| (x - v).abs() < 1e-6));
    }

    #[test]
    fn override_sets_value(epochs in 1usize..500, beta in 0.0f64..5.0, d_s in 1usize..64) {
        let sets = vec![format!("da.epochs={epochs}"), format!("beta={beta}"), format!("model.d_s={d_s}")];
        let cfg = parse_config("", &sets).unwrap();
        prop_assert_eq!(cfg.da.epochs, epochs);
        prop_assert_eq!(cfg.beta, beta);
        prop_assert_eq!(cfg.model.d_s, d_s);
        prop_assert_eq!(parse_config(&cfg.echo(), &[]).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn desk_is_pure_bounded_and_balanced(seed in any::<u64>(), k in 2usize..11, per in 1usize..4) {
        let cfg = DeskConfig {
            num_classes: k,
            train_per_domain: k * per * 2,
            test_per_domain: k * per,
            texture_count: 4,
            texture_size: 16,
            ..DeskConfig::default()
        };
        let (s, t) = make_desk_benchmark(&cfg, seed).unwrap();
        let (s2, t2) = make_desk_benchmark(&cfg, seed).unwrap();
        for (a, b) in s.train.iter().chain(&t.train).zip(s2.train.iter().chain(&t2.train)) {
            prop_assert_eq!(&a.id, &b.id);
            prop_assert_eq!(a.image.data(), b.image.data());
        }
        for split in [&s, &t] {
            for x in split.train.iter().chain(&split.test) {
                prop_assert!(x.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
                prop_assert!(split.truth.label(&x.id).unwrap() < k);
            }
            let hist = DatasetSplit::class_histogram(&split.train, &split.truth, k);
            prop_assert!(hist.iter().all(|&h| h == per * 2), "{:?}", hist);
        }
        prop_assert!(t.train.iter().all(|x| x.label.is_none()));
        prop_assert!(s.train.iter().all(|x| x.label.is_some()));
    }
}
