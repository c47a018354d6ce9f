use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vidpred::data::{synth_generate, SynthSpec, VideoClip};
use vidpred::nets::GeneratorConfig;
use vidpred::rnn::UnitKind;
use vidpred::trainer::*;
use vidpred::{Group, Kind, ParamId, Params};
use vidpred_tensor::Tensor;

fn tiny() -> TrainConfig {
    TrainConfig {
        batch: 2,
        d_ch: 4,
        steps: 4,
        ema_start: 2,
        ema_decay: 0.9,
        log_every: 1,
        checkpoint_every: 2,
        standing_batches: 2,
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
    }
}

fn clips() -> Vec<VideoClip> {
    let spec = SynthSpec {
        resolution: 16,
        frames: 8,
        ..SynthSpec::default()
    };
    synth_generate(&spec, 7, 15).unwrap()
}

fn scalar_params(v: f64) -> (Params<f64>, ParamId) {
    let mut p = Params::new();
    let id = p.add("x", Tensor::full(&[1], v), Group::Generator, Kind::Weight);
    (p, id)
}

#[test]
fn adam_ignores_zero_gradients() {
    let (mut p, id) = scalar_params(0.5);
    let mut opt = Adam::new(0.1, 0.0, 0.999, 1e-8);
    for _ in 0..3 {
        opt.step(&mut p, &[(id, Tensor::zeros(&[1]))]).unwrap();
    }
    assert_eq!(p.get(id).data()[0], 0.5);
}

#[test]
fn adam_single_step_matches_hand_update() {
    let (mut p, id) = scalar_params(0.0);
    let mut opt = Adam::new(0.1, 0.0, 0.999, 1e-8);
    opt.step(&mut p, &[(id, Tensor::full(&[1], 1.0))]).unwrap();
    // m = 1, v = 0.001, both corrections give 1, so θ = −0.1 / (1 + 1e-8).
    let want = -0.1 / (1.0 + 1e-8);
    assert!((p.get(id).data()[0] - want).abs() < 1e-15);
}

/// Scalar Adam written out longhand.
fn reference_adam(grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
    let (mut theta, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
    for (i, g) in grads.iter().enumerate() {
        let t = (i + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        theta -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
    }
    theta
}

proptest! {
    #[test]
    fn adam_matches_reference(grads in prop::collection::vec(-5.0f64..5.0, 1..20), b1 in 0.0f64..0.9) {
        let (mut p, id) = scalar_params(0.0);
        let mut opt = Adam::new(0.01, b1, 0.999, 1e-8);
        for &g in &grads {
            opt.step(&mut p, &[(id, Tensor::full(&[1], g))]).unwrap();
        }
        let want = reference_adam(&grads, 0.01, b1, 0.999, 1e-8);
        prop_assert!((p.get(id).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn ema_contracts_towards_constant_params(s0 in -3.0f64..3.0, p in -3.0f64..3.0, decay in 0.5f64..0.99) {
        let (params, id) = scalar_params(p);
        let mut ema = EmaState::new();
        ema.shadow = Some([(id, Tensor::full(&[1], s0))].into_iter().collect());
        let mut gap = (s0 - p).abs();
        for step in 1..20 {
            ema.update(&params, &[id], step, decay, 0);
            let s = ema.shadow.as_ref().unwrap()[&id].data()[0];
            let next = (s - p).abs();
            prop_assert!(next <= gap * decay + 1e-12);
            gap = next;
        }
    }
}

#[test]
fn two_optimizers_agree() {
    let grads: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).sin()).collect();
    let run = || {
        let (mut p, id) = scalar_params(1.0);
        let mut opt = Adam::new(0.05, 0.0, 0.999, 1e-8);
        for &g in &grads {
            opt.step(&mut p, &[(id, Tensor::full(&[1], g))]).unwrap();
        }
        p.get(id).data()[0]
    };
    assert_eq!(run().to_bits(), run().to_bits());
}

#[test]
fn ema_examples() {
    let (params, id) = scalar_params(1.0);
    let mut ema = EmaState::new();
    ema.update(&params, &[id], 4, 0.9, 5);
    assert!(!ema.initialized());
    ema.update(&params, &[id], 5, 0.9, 5);
    assert_eq!(ema.shadow.as_ref().unwrap()[&id].data(), params.get(id).data());
    for step in 6..50 {
        ema.update(&params, &[id], step, 0.9, 5);
    }
    assert_eq!(ema.shadow.as_ref().unwrap()[&id].data()[0], 1.0);

    let mut ema = EmaState::new();
    ema.shadow = Some([(id, Tensor::zeros(&[1]))].into_iter().collect());
    ema.update(&params, &[id], 10, 0.9, 0);
    assert!((ema.shadow.as_ref().unwrap()[&id].data()[0] - 0.1).abs() < 1e-15);
    let applied = ema.apply(&params).unwrap();
    assert!((applied.get(id).data()[0] - 0.1).abs() < 1e-15);
}

#[test]
fn truncation_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z: Tensor<f64> = Tensor::randn(&[4, 8], &mut rng);
    let mut same = z.clone();
    apply_truncation(&mut same, f64::INFINITY, &mut rng).unwrap();
    assert_eq!(same.data(), z.data());
    let mut zero = z.clone();
    apply_truncation(&mut zero, 0.0, &mut rng).unwrap();
    assert!(zero.data().iter().all(|&x| x == 0.0));
    let mut big: Tensor<f64> = Tensor::randn(&[1000, 100], &mut rng);
    apply_truncation(&mut big, 0.8, &mut rng).unwrap();
    assert!(big.max_abs() <= 0.8);
    assert!(big.data().iter().any(|&x| x.abs() > 0.7));
    assert!(apply_truncation(&mut big, -1.0, &mut rng).is_err());
}

#[test]
fn config_json_round_trip() {
    let cfg = tiny();
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(TrainConfig::from_json(&text).unwrap(), cfg);
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["bogus"] = 1.into();
    assert!(TrainConfig::from_json(&v.to_string()).is_err());
    let mut bad = tiny();
    bad.ema_decay = 1.0;
    assert!(bad.validate().is_err());
    let mut bad = tiny();
    bad.decomposition = "unknown".into();
    assert!(bad.validate().is_err());
}

#[test]
fn step_counts_and_finite_losses() {
    let data = clips();
    let mut tr = Trainer::<f32>::new(tiny()).unwrap();
    for s in 0..3 {
        let b = tr.batch_for_step(&data, s).unwrap();
        let l = tr.train_step(&b).unwrap();
        assert!(l.d_loss.is_finite() && l.g_loss.is_finite() && l.penalty >= 0.0);
        assert_eq!(l.step, s + 1);
    }
    assert_eq!(tr.step, 3);
    assert_eq!(tr.opt_d.t, 6);
    assert_eq!(tr.opt_g.t, 3);
    assert!(tr.ema.initialized());
}

#[test]
fn frozen_discriminator_stays_put() {
    let data = clips();
    let mut cfg = tiny();
    cfg.lr_d = 0.0;
    let mut tr = Trainer::<f32>::new(cfg).unwrap();
    let ids = tr.model.params.trainable(Group::Discriminator);
    let before: Vec<Tensor<f32>> = ids.iter().map(|&id| tr.model.params.get(id).clone()).collect();
    let gen_before = tr.model.params.get(tr.model.params.trainable(Group::Generator)[0]).clone();
    for s in 0..2 {
        let b = tr.batch_for_step(&data, s).unwrap();
        tr.train_step(&b).unwrap();
    }
    for (id, b) in ids.iter().zip(&before) {
        assert_eq!(tr.model.params.get(*id).data(), b.data());
    }
    let gen_after = tr.model.params.get(tr.model.params.trainable(Group::Generator)[0]);
    assert_ne!(gen_after.data(), gen_before.data());
}

#[test]
fn batches_are_pure_functions_of_the_step() {
    let data = clips();
    let tr = Trainer::<f32>::new(tiny()).unwrap();
    let a = tr.batch_for_step(&data, 3).unwrap();
    let b = tr.batch_for_step(&data, 3).unwrap();
    assert_eq!(a.data(), b.data());
    assert_eq!(a.shape(), &[2, 8, 3, 16, 16]);
    assert_ne!(a.data(), tr.batch_for_step(&data, 4).unwrap().data());
}

fn read_dir(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn zero_steps_checkpoints_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.steps = 0;
    let report = fit::<f32>(&cfg, &clips(), dir.path(), FitOptions::default()).unwrap();
    assert_eq!(report.steps, 0);
    let tr = Trainer::<f32>::load_checkpoint(&report.checkpoint).unwrap();
    let fresh = Trainer::<f32>::new(cfg).unwrap();
    for (id, e) in fresh.model.params.entries() {
        assert_eq!(tr.model.params.get(id).data(), e.value.data(), "{}", e.name);
    }
    assert_eq!(std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap(), "");
}

#[test]
fn log_lines_follow_interval() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.steps = 4;
    cfg.log_every = 2;
    fit::<f32>(&cfg, &clips(), dir.path(), FitOptions::default()).unwrap();
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let lines: Vec<_> = log.lines().collect();
    assert_eq!(lines.len(), 2);
    let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(first["step"], 2);
    assert!(first["d_loss"].as_f64().unwrap().is_finite());
}

#[test]
fn checkpoint_round_trip_preserves_state() {
    let data = clips();
    let mut tr = Trainer::<f32>::new(tiny()).unwrap();
    for s in 0..3 {
        let b = tr.batch_for_step(&data, s).unwrap();
        tr.train_step(&b).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck");
    tr.save_checkpoint(&path).unwrap();
    let back = Trainer::<f32>::load_checkpoint(&path).unwrap();
    assert_eq!(back.step, 3);
    assert_eq!((back.opt_g.t, back.opt_d.t), (3, 6));
    for (id, e) in tr.model.params.entries() {
        assert_eq!(back.model.params.get(id).data(), e.value.data());
    }
    assert_eq!(back.ema.shadow.as_ref().unwrap().len(), tr.ema.shadow.as_ref().unwrap().len());
    assert_eq!(back.opt_d.m.len(), tr.opt_d.m.len());
    let again = dir.path().join("ck2");
    back.save_checkpoint(&again).unwrap();
    assert_eq!(read_dir(&path), read_dir(&again));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = clips();
    let cfg = tiny();
    let full = tempfile::tempdir().unwrap();
    fit::<f32>(&cfg, &data, full.path(), FitOptions::default()).unwrap();
    let split = tempfile::tempdir().unwrap();
    let first = FitOptions {
        stop_at: Some(3),
        ..FitOptions::default()
    };
    assert_eq!(fit::<f32>(&cfg, &data, split.path(), first).unwrap().steps, 3);
    let second = FitOptions {
        resume: true,
        ..FitOptions::default()
    };
    let r = fit::<f32>(&cfg, &data, split.path(), second).unwrap();
    assert_eq!((r.steps, r.steps_this_run), (4, 1));
    assert_eq!(read_dir(&full.path().join(CHECKPOINT_DIR)), read_dir(&split.path().join(CHECKPOINT_DIR)));
    assert_eq!(
        std::fs::read(full.path().join(LOG_FILE)).unwrap(),
        std::fs::read(split.path().join(LOG_FILE)).unwrap()
    );
}

#[test]
fn eval_params_use_standing_statistics() {
    let data = clips();
    let mut tr = Trainer::<f32>::new(tiny()).unwrap();
    let b = tr.batch_for_step(&data, 0).unwrap();
    tr.train_step(&b).unwrap();
    let p = tr.eval_params(&data).unwrap();
    let ready: Vec<_> = p.entries().filter(|(_, e)| e.name.ends_with("standing_ready")).collect();
    assert!(!ready.is_empty());
    assert!(ready.iter().all(|(_, e)| e.value.data()[0] == 1.0));
    let cond = b.narrow(1, 0, 2).unwrap();
    let z: Tensor<f32> = sample_latents(2, 8, Some(0.8), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let v = tr.model.generate(&p, &cond, &z, vidpred::Mode::Eval).unwrap();
    assert_eq!(v.shape(), &[2, 6, 3, 16, 16]);
    assert!(v.all_finite());
}
