use std::time::Duration;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use vidpred::data::{synth_generate, SynthSpec};
use vidpred::metrics::*;
use vidpred::nets::{pixel_count, GeneratorConfig};
use vidpred::rnn::UnitKind;
use vidpred::trainer::TrainConfig;
use vidpred_tensor::Tensor;

fn stats(mu: Vec<f64>, sigma: DMatrix<f64>) -> GaussianStats {
    GaussianStats::new(DVector::from_vec(mu), sigma, 10).unwrap()
}

#[test]
fn frechet_closed_forms() {
    let d = 5;
    let a = stats(vec![0.0; d], DMatrix::identity(d, d));
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-12);

    let mut mu = vec![0.0; d];
    mu[2] = 2.0;
    let b = stats(mu, DMatrix::identity(d, d));
    assert!((frechet_distance(&a, &b).unwrap() - 4.0).abs() < 1e-10);

    let c = stats(vec![0.0; d], DMatrix::identity(d, d) * 4.0);
    assert!((frechet_distance(&c, &a).unwrap() - d as f64).abs() < 1e-10);
}

#[test]
fn frechet_rejects_bad_inputs() {
    let a = stats(vec![0.0; 2], DMatrix::identity(2, 2));
    let b = stats(vec![0.0; 3], DMatrix::identity(3, 3));
    assert!(frechet_distance(&a, &b).is_err());
    let neg = stats(vec![0.0; 2], -DMatrix::identity(2, 2));
    assert!(frechet_distance(&neg, &a).is_err());
    assert!(GaussianStats::new(DVector::from_vec(vec![0.0]), DMatrix::identity(1, 1), 1).is_err());
    assert!(GaussianStats::new(DVector::from_vec(vec![f64::NAN]), DMatrix::identity(1, 1), 3).is_err());
    let skew = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
    assert!(GaussianStats::new(DVector::from_vec(vec![0.0, 0.0]), skew, 3).is_err());
}

#[test]
fn unbiased_covariance_matches_hand_computation() {
    let x = Tensor::<f64>::new(vec![3, 2], vec![1.0, 2.0, 3.0, 0.0, 5.0, 4.0]).unwrap();
    let s = GaussianStats::from_rows(&x).unwrap();
    assert_eq!(s.mu.as_slice(), &[3.0, 2.0]);
    // Deviations (-2, 0), (0, -2), (2, 2); divide by n - 1 = 2.
    let want = [4.0, 2.0, 2.0, 4.0];
    for (g, w) in s.sigma.iter().zip(want) {
        assert!((g - w).abs() < 1e-12);
    }
    assert!(GaussianStats::from_rows(&Tensor::<f64>::zeros(&[1, 2])).is_err());
}

fn softmax_logits(rows: &[Vec<f64>]) -> Tensor<f64> {
    let k = rows[0].len();
    Tensor::new(vec![rows.len(), k], rows.concat()).unwrap()
}

#[test]
fn inception_score_closed_forms() {
    let uniform = softmax_logits(&vec![vec![0.0; 6]; 8]);
    assert!((inception_score(&uniform).unwrap() - 1.0).abs() < 1e-12);

    let n = 5;
    let confident: Vec<Vec<f64>> = (0..3 * n)
        .map(|i| (0..n).map(|j| if j == i % n { 200.0 } else { 0.0 }).collect())
        .collect();
    assert!((inception_score(&softmax_logits(&confident)).unwrap() - n as f64).abs() < 1e-9);
}

/// SSIM by explicit 2-D window sums at every valid position.
fn ssim_direct(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let n = 11usize.min(h).min(w) | 1;
    let n = if n > h.min(w) { n - 2 } else { n };
    let r = (n / 2) as f64;
    let g1: Vec<f64> = (0..n).map(|i| (-(i as f64 - r).powi(2) / 4.5).exp()).collect();
    let total: f64 = g1.iter().sum::<f64>().powi(2);
    let (c1, c2) = (0.0004, 0.0036);
    let mut acc = 0.0;
    let mut count = 0;
    for i in 0..=h - n {
        for j in 0..=w - n {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..n {
                for v in 0..n {
                    let g = g1[u] * g1[v] / total;
                    let (x, y) = (a[(i + u) * w + j + v], b[(i + u) * w + j + v]);
                    ma += g * x;
                    mb += g * y;
                    saa += g * x * x;
                    sbb += g * y * y;
                    sab += g * x * y;
                }
            }
            let (va, vb, cab) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            acc += (2.0 * ma * mb + c1) * (2.0 * cab + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}

#[test]
fn ssim_identical_is_one_and_negation_matches_formula() {
    let (h, w) = (14, 13);
    let a = Tensor::<f64>::from_fn(&[1, h, w], |i| ((i * 37 % 101) as f64 / 50.0 - 1.0) * 0.9);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let neg = a.map(|x| -x);
    let got = ssim(&a, &neg).unwrap();
    let want = ssim_direct(a.data(), neg.data(), h, w);
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    assert!(got < 0.5 && got >= -1.0);

    // Small images shrink the window.
    let s = Tensor::<f64>::from_fn(&[6, 6], |i| (i as f64 * 0.3).sin());
    let t = Tensor::<f64>::from_fn(&[6, 6], |i| (i as f64 * 0.2).cos());
    assert!((ssim(&s, &t).unwrap() - ssim_direct(s.data(), t.data(), 6, 6)).abs() < 1e-10);
}

#[test]
fn psnr_examples() {
    let a = Tensor::<f64>::full(&[3, 4, 4], 0.1);
    assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    let b = a.map(|x| x + 0.2);
    // mse = 0.04, range 2: 10 log10(4 / 0.04) = 20 dB.
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
}

#[test]
fn copy_baseline_repeats_last_frame() {
    let cond = Tensor::<f64>::from_fn(&[2, 3, 3, 4, 4], |i| i as f64);
    let out = copy_baseline(&cond, 5).unwrap();
    assert_eq!(out.shape(), &[2, 5, 3, 4, 4]);
    for b in 0..2 {
        let last = cond.narrow(0, b, 1).unwrap().narrow(1, 2, 1).unwrap();
        for t in 0..5 {
            assert_eq!(out.narrow(0, b, 1).unwrap().narrow(1, t, 1).unwrap().data(), last.data());
        }
    }
    // A static clip is reproduced exactly.
    let still = Tensor::<f64>::from_fn(&[1, 4, 3, 12, 12], |i| ((i % 432) as f64 / 432.0) - 0.5);
    let (c, target) = (still.narrow(1, 0, 2).unwrap(), still.narrow(1, 2, 2).unwrap());
    let pred = copy_baseline(&c, 2).unwrap();
    let curve = ssim_curve(&pred.reshape(&[2, 3, 12, 12]).unwrap(), &target.reshape(&[2, 3, 12, 12]).unwrap()).unwrap();
    assert!(curve.iter().all(|v| (v - 1.0).abs() < 1e-12));
}

fn noisy(seed: usize, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| (((i * 7919 + seed * 104729) % 1000) as f64 / 500.0 - 1.0) * 0.5)
}

#[test]
fn best_of_l_selects_and_degenerates() {
    let truth = noisy(0, &[3, 3, 12, 12]);
    let samples: Vec<Tensor<f64>> = (0..6).map(|i| noisy(i + 1, &[3, 3, 12, 12])).collect();
    let one = best_of_l_ssim(|i| Ok(samples[i].clone()), &truth, 1).unwrap();
    assert_eq!(one, ssim_curve(&samples[0], &truth).unwrap());
    let all = best_of_l_ssim(|i| Ok(samples[i].clone()), &truth, 6).unwrap();
    let avg = |c: &[f64]| c.iter().sum::<f64>() / c.len() as f64;
    assert!(avg(&all) >= avg(&one));
    for s in &samples {
        assert!(avg(&all) >= avg(&ssim_curve(s, &truth).unwrap()));
    }
    let det = best_of_l_ssim(|_| Ok(samples[3].clone()), &truth, 5).unwrap();
    assert_eq!(det, ssim_curve(&samples[3], &truth).unwrap());
    assert!(best_of_l_ssim(|_| Ok(samples[0].clone()), &truth, 0).is_err());
}

#[test]
fn nested_latents_are_prefixes() {
    let a: Tensor<f64> = nested_latents(3, 4, 9, Some(0.8)).unwrap();
    let b: Tensor<f64> = nested_latents(7, 4, 9, Some(0.8)).unwrap();
    assert_eq!(a.data(), &b.data()[..12]);
}

fn random_embedder() -> Embedder {
    Embedder::new(EmbedderConfig {
        res: 8,
        random_features: true,
        ..EmbedderConfig::default()
    })
    .unwrap()
}

#[test]
fn fvd_of_a_set_with_itself_is_zero() {
    let emb = random_embedder();
    let v = noisy(3, &[6, 4, 3, 16, 16]);
    assert!(fvd(&v, &v, &emb).unwrap().abs() < 1e-6);
    let w = noisy(4, &[6, 4, 3, 16, 16]);
    assert!(fvd(&v, &w, &emb).unwrap() > 0.0);
    assert!(fvd(&v.narrow(0, 0, 1).unwrap(), &w, &emb).is_err());
}

#[test]
fn resize_is_identity_at_native_size() {
    let v = noisy(5, &[2, 2, 3, 8, 8]);
    let r = resize_videos(&v, 8).unwrap();
    assert_eq!(r.data(), v.cast::<f32>().data());
    let small = resize_videos(&Tensor::<f64>::full(&[1, 1, 3, 16, 16], 0.25), 8).unwrap();
    assert!(small.data().iter().all(|x| (x - 0.25).abs() < 1e-6));
}

fn small_embedder_cfg() -> EmbedderConfig {
    EmbedderConfig {
        res: 8,
        frames: 4,
        widths: [4, 4, 8],
        train_clips: 30,
        epochs: 1,
        batch: 10,
        data: SynthSpec {
            resolution: 16,
            frames: 4,
            ..SynthSpec::default()
        },
        ..EmbedderConfig::default()
    }
}

#[test]
fn embedder_training_is_reproducible_and_round_trips() {
    let (a, rep) = Embedder::train(small_embedder_cfg()).unwrap();
    let (b, _) = Embedder::train(small_embedder_cfg()).unwrap();
    assert_eq!(rep.steps, 3);
    assert!(rep.final_loss.is_finite());
    for ((_, ea), (_, eb)) in a.params.entries().zip(b.params.entries()) {
        assert_eq!(ea.value.to_bytes(), eb.value.to_bytes(), "{}", ea.name);
    }
    let untrained = Embedder::new(small_embedder_cfg()).unwrap();
    assert!(a.params.entries().zip(untrained.params.entries()).any(|((_, x), (_, y))| x.value.data() != y.value.data()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("embedder");
    a.save(&path).unwrap();
    let c = Embedder::load(&path).unwrap();
    let v = noisy(9, &[3, 4, 3, 8, 8]);
    assert_eq!(a.embed(&v).unwrap().data(), c.embed(&v).unwrap().data());
    assert_eq!(a.embed(&v).unwrap().shape(), &[3, 15]);
}

#[test]
fn bench_pixel_counts_delegate() {
    let cfg = TrainConfig {
        batch: 2,
        d_ch: 4,
        decomposition: "faster".into(),
        generator: GeneratorConfig {
            latent: 8,
            cond_dim: 16,
            ch: 4,
            start_res: 4,
            stages: 2,
            t_cond: 2,
            t_out: 6,
            unit: UnitKind::TsruP,
            ..GeneratorConfig::default()
        },
        ..TrainConfig::default()
    };
    let clips = synth_generate(
        &SynthSpec {
            resolution: 16,
            frames: 8,
            ..SynthSpec::default()
        },
        2,
        15,
    )
    .unwrap();
    let r = bench_step::<f32>(&cfg, &clips, Duration::ZERO, 1).unwrap();
    let d = cfg.decomposition().unwrap();
    assert_eq!(r.pixel_count, pixel_count(&d.views, d.k as u64, 8, 16, 16, d.s as u64));
    assert_eq!(r.steps, 1);
    assert!(r.mean_step_ms > 0.0 && r.params_g > 0 && r.params_d > 0);
}

fn random_spd(d: usize, seed: &[f64]) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |i, j| seed[(i * d + j) % seed.len()] + if i == j { 0.5 } else { 0.0 });
    &a * a.transpose() + DMatrix::identity(d, d) * 0.1
}

proptest! {
    #[test]
    fn frechet_is_symmetric_and_nonnegative(
        d in 1usize..5,
        xs in prop::collection::vec(-1.0f64..1.0, 16),
        ys in prop::collection::vec(-1.0f64..1.0, 16),
        mu in prop::collection::vec(-2.0f64..2.0, 4),
    ) {
        let a = stats(mu[..d].to_vec(), random_spd(d, &xs));
        let b = stats(vec![0.0; d], random_spd(d, &ys));
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-8 * (1.0 + ab));
        prop_assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
    }

    #[test]
    fn frechet_of_diagonal_gaussians(vals in prop::collection::vec((0.01f64..4.0, 0.01f64..4.0, -1.0f64..1.0), 1..6)) {
        let d = vals.len();
        let a = stats(vals.iter().map(|v| v.2).collect(), DMatrix::from_diagonal(&DVector::from_iterator(d, vals.iter().map(|v| v.0))));
        let b = stats(vec![0.0; d], DMatrix::from_diagonal(&DVector::from_iterator(d, vals.iter().map(|v| v.1))));
        let want: f64 = vals.iter().map(|(x, y, m)| m * m + (x.sqrt() - y.sqrt()).powi(2)).sum();
        prop_assert!((frechet_distance(&a, &b).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn inception_score_is_bounded(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 2..10)) {
        let s = inception_score(&softmax_logits(&rows)).unwrap();
        prop_assert!(s >= 1.0 - 1e-12 && s <= 4.0 + 1e-9);
    }

    #[test]
    fn fvd_ignores_sample_order(perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle()) {
        let emb = random_embedder();
        let v = noisy(1, &[5, 2, 3, 8, 8]);
        let w = noisy(2, &[5, 2, 3, 8, 8]);
        let shuffled = w.index_select(0, &perm).unwrap();
        let a = fvd(&v, &w, &emb).unwrap();
        let b = fvd(&v, &shuffled, &emb).unwrap();
        prop_assert!((a - b).abs() < 1e-6 * (1.0 + a));
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(seed_a in 0usize..1000, seed_b in 0usize..1000) {
        let a = noisy(seed_a, &[3, 12, 12]);
        let b = noisy(seed_b, &[3, 12, 12]);
        let ab = ssim(&a, &b).unwrap();
        prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&ab));
    }
}
