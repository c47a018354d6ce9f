use proptest::prelude::*;
use vidpred::objectives::*;
use vidpred_tensor::{Tape, Tensor};

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Direct evaluation of `o[b, b′, t] = r_x[b, t] + Σ_t′ r_xy[b′, t′]`.
fn mixed_oracle(rx: &Tensor<f64>, rxy: &Tensor<f64>) -> Vec<f64> {
    let (b, tt) = (rx.shape()[0], rx.shape()[1]);
    let mut out = Vec::new();
    for i in 0..b {
        for j in 0..b {
            let s: f64 = (0..tt).map(|k| rxy.at(&[j, k])).sum();
            for k in 0..tt {
                out.push(rx.at(&[i, k]) + s);
            }
        }
    }
    out
}

fn mixed(rx: &Tensor<f64>, rxy: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(rx.clone());
    let b = tape.constant(rxy.clone());
    let o = mixed_projection(&mut tape, a, b).unwrap();
    tape.value(o).clone()
}

#[test]
fn single_sample_reduces_to_projection() {
    let o = mixed(&t(&[1, 1], vec![0.3]), &t(&[1, 1], vec![-1.2]));
    assert_eq!(o.shape(), &[1, 1, 1]);
    assert!((o.data()[0] - (0.3 - 1.2)).abs() < 1e-15);
}

#[test]
fn two_sample_hand_example() {
    let o = mixed(&t(&[2, 1], vec![1.0, 2.0]), &t(&[2, 1], vec![10.0, 20.0]));
    assert_eq!(o.shape(), &[2, 2, 1]);
    assert_eq!(o.data(), &[11.0, 21.0, 12.0, 22.0]);
}

#[test]
fn zero_projection_copies_unconditional_scores() {
    let rx = t(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let o = mixed(&rx, &Tensor::zeros(&[2, 3]));
    for b in 0..2 {
        for bp in 0..2 {
            for k in 0..3 {
                assert_eq!(o.at(&[b, bp, k]), rx.at(&[b, k]));
            }
        }
    }
}

#[test]
fn mismatched_shapes_rejected() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 2]));
    assert!(mixed_projection(&mut tape, a, b).is_err());
    assert!(plain_projection(&mut tape, a, b).is_err());
}

fn d_loss(fake: f64, real: f64) -> f64 {
    let mut tape = Tape::new();
    let f = tape.constant(Tensor::full(&[2, 2, 3], fake));
    let r = tape.constant(Tensor::full(&[2, 2, 3], real));
    let l = hinge_d_loss(&mut tape, &[f], &[r]).unwrap();
    tape.value(l).item().unwrap()
}

#[test]
fn hinge_examples() {
    assert_eq!(d_loss(0.0, 0.0), 2.0);
    assert_eq!(d_loss(-1.0, 1.0), 0.0);
    assert_eq!(d_loss(2.0, -2.0), 6.0);
}

#[test]
fn hinge_sums_families() {
    let mut tape = Tape::new();
    let f = tape.constant(Tensor::<f64>::zeros(&[1, 1, 1]));
    let r = tape.constant(Tensor::<f64>::zeros(&[1, 1, 1]));
    let l = hinge_d_loss(&mut tape, &[f, f, f], &[r, r, r]).unwrap();
    assert_eq!(tape.value(l).item().unwrap(), 6.0);
    assert!(hinge_d_loss(&mut tape, &[f], &[]).is_err());
}

#[test]
fn g_loss_examples_and_gradient() {
    let mut tape = Tape::new();
    let f = tape.constant(Tensor::<f64>::zeros(&[2, 2, 3]));
    let l = g_loss(&mut tape, &[f], None).unwrap();
    assert_eq!(tape.value(l.total).item().unwrap(), 0.0);

    let c = 0.7;
    let mut tape = Tape::new();
    let f = tape.var(Tensor::<f64>::full(&[2, 2, 3], c));
    let pen = tape.constant(Tensor::scalar(0.25));
    let l = g_loss(&mut tape, &[f], Some(pen)).unwrap();
    assert!((tape.value(l.adversarial).item().unwrap() + c).abs() < 1e-15);
    assert!((tape.value(l.total).item().unwrap() - (0.25 - c)).abs() < 1e-15);
    let g = tape.backward(l.total).unwrap();
    let grad = g.get(f).unwrap();
    let d = 12.0;
    assert!(grad.data().iter().all(|&x| (x + 1.0 / d).abs() < 1e-15));
}

proptest! {
    #[test]
    fn mixed_matches_oracle(b in 1usize..4, tt in 1usize..5, seed in 0u64..1000) {
        use rand::SeedableRng;
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let rx = Tensor::randn(&[b, tt], &mut r);
        let rxy = Tensor::randn(&[b, tt], &mut r);
        let o = mixed(&rx, &rxy);
        prop_assert_eq!(o.shape(), &[b, b, tt]);
        for (got, want) in o.data().iter().zip(mixed_oracle(&rx, &rxy)) {
            prop_assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn hinge_is_nonnegative_and_zero_only_when_satisfied(
        fake in prop::collection::vec(-3.0f64..3.0, 6),
        real in prop::collection::vec(-3.0f64..3.0, 6),
    ) {
        let mut tape = Tape::new();
        let f = tape.constant(t(&[2, 3], fake.clone()));
        let r = tape.constant(t(&[2, 3], real.clone()));
        let l = hinge_d_loss(&mut tape, &[f], &[r]).unwrap();
        let v = tape.value(l).item().unwrap();
        prop_assert!(v >= 0.0);
        let satisfied = fake.iter().all(|&x| x <= -1.0) && real.iter().all(|&x| x >= 1.0);
        prop_assert_eq!(v == 0.0, satisfied);
    }

    #[test]
    fn shifting_class_scores_shifts_outputs(b in 1usize..4, tt in 1usize..4, c in -2.0f64..2.0, seed in 0u64..1000) {
        use rand::SeedableRng;
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let rx = Tensor::randn(&[b, tt], &mut r);
        let rxy = Tensor::randn(&[b, tt], &mut r);
        let base = mixed(&rx, &rxy);
        let shifted = mixed(&rx, &rxy.map(|x| x + c));
        // Every r_xy term enters the sum over t′, so the shift is T′·c.
        let shift = c * tt as f64;
        for (a, s) in base.data().iter().zip(shifted.data()) {
            prop_assert!((s - a - shift).abs() < 1e-10);
        }
        let adv = |o: &Tensor<f64>| {
            let mut tape = Tape::new();
            let v = tape.constant(o.clone());
            let l = g_loss(&mut tape, &[v], None).unwrap();
            tape.value(l.adversarial).item().unwrap()
        };
        prop_assert!((adv(&shifted) - adv(&base) + shift).abs() < 1e-10);
    }
}
