use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidpred_tensor::{check_gradients, sigmoid, Result, Tape, Tensor, TensorError, Var};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Direct nested-loop cross-correlation, zero padded.
fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, pad: usize, stride: usize) -> Tensor<f64> {
    let (bn, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[bn, co, oh, ow]);
    for n in 0..bn {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for dy in 0..k {
                            for dx in 0..k {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xx * stride + dx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w.at(&[o, c, dy, dx]) * x.at(&[n, c, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    out.data_mut()[((n * co + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

fn naive_conv3d(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, pad: usize) -> Tensor<f64> {
    let s = x.shape();
    let (bn, ci, t, h, wd) = (s[0], s[1], s[2], s[3], s[4]);
    let (co, kt, k) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (ot, oh, ow) = (t + 2 * pad - kt + 1, h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
    let mut out = Tensor::zeros(&[bn, co, ot, oh, ow]);
    let inside = |v: isize, n: usize| v >= 0 && (v as usize) < n;
    for n in 0..bn {
        for o in 0..co {
            for z in 0..ot {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b.data()[o];
                        for c in 0..ci {
                            for dz in 0..kt {
                                for dy in 0..k {
                                    for dx in 0..k {
                                        let iz = (z + dz) as isize - pad as isize;
                                        let iy = (y + dy) as isize - pad as isize;
                                        let ix = (xx + dx) as isize - pad as isize;
                                        if inside(iz, t) && inside(iy, h) && inside(ix, wd) {
                                            acc += w.at(&[o, c, dz, dy, dx])
                                                * x.at(&[n, c, iz as usize, iy as usize, ix as usize]);
                                        }
                                    }
                                }
                            }
                        }
                        out.data_mut()[(((n * co + o) * ot + z) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
    }
    out
}

fn conv2d_value(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, pad: usize, stride: usize) -> Result<Tensor<f64>> {
    let mut t = Tape::new();
    let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
    let y = t.conv2d(xv, wv, bv, pad, stride)?;
    Ok(t.value(y).clone())
}

#[test]
fn conv2d_one_by_one_scaling() {
    let x = Tensor::ones(&[1, 1, 3, 3]);
    let w = Tensor::full(&[1, 1, 1, 1], 2.0);
    let b = Tensor::zeros(&[1]);
    let y = conv2d_value(&x, &w, &b, 0, 1).unwrap();
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    assert!(y.data().iter().all(|&v| v == 2.0));
}

#[test]
fn conv2d_identity_kernel() {
    let x = Tensor::randn(&[1, 1, 3, 3], &mut rng(1));
    let mut w = Tensor::zeros(&[1, 1, 3, 3]);
    w.data_mut()[4] = 1.0;
    let y = conv2d_value(&x, &w, &Tensor::zeros(&[1]), 1, 1).unwrap();
    assert_eq!(y, x);
}

#[test]
fn conv2d_matches_naive_loops() {
    let mut r = rng(2);
    let x = Tensor::randn(&[2, 3, 5, 5], &mut r);
    let w = Tensor::randn(&[4, 3, 3, 3], &mut r);
    let b = Tensor::randn(&[4], &mut r);
    for (pad, stride) in [(0, 1), (1, 1), (1, 2), (2, 1)] {
        let got = conv2d_value(&x, &w, &b, pad, stride).unwrap();
        let want = naive_conv2d(&x, &w, &b, pad, stride);
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-6, "pad {pad} stride {stride}");
    }
}

#[test]
fn conv_randomized_shapes_at_f32() {
    let mut r = rng(3);
    for _ in 0..10 {
        let bn = r.gen_range(1..=4);
        let ci = r.gen_range(1..=8);
        let co = r.gen_range(1..=8);
        let h = r.gen_range(3..=9);
        let wd = r.gen_range(3..=9);
        let k = [1, 3][r.gen_range(0..2)];
        // Inputs are representable in f32, so the oracle only differs by accumulation rounding.
        let x = Tensor::<f32>::uniform(&[bn, ci, h, wd], -1.0, 1.0, &mut r).cast::<f64>();
        let w = Tensor::<f32>::uniform(&[co, ci, k, k], -1.0, 1.0, &mut r).cast::<f64>();
        let b = Tensor::<f32>::uniform(&[co], -1.0, 1.0, &mut r).cast::<f64>();
        let want = naive_conv2d(&x, &w, &b, k / 2, 1);
        let mut t = Tape::<f32>::new();
        let (xv, wv, bv) = (t.constant(x.cast()), t.constant(w.cast()), t.constant(b.cast()));
        let y = t.conv2d(xv, wv, bv, k / 2, 1).unwrap();
        let got: Tensor<f64> = t.value(y).cast();
        // error relative to max(1, |value|): outputs reach ~10 in magnitude
        let err = got
            .data()
            .iter()
            .zip(want.data())
            .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
            .fold(0.0, f64::max);
        assert!(err <= 1e-6, "{err:e}");
    }
}

#[test]
fn conv2d_errors() {
    let x = Tensor::ones(&[1, 2, 4, 4]);
    let b = Tensor::zeros(&[1]);
    // channel mismatch
    assert!(matches!(
        conv2d_value(&x, &Tensor::ones(&[1, 3, 3, 3]), &b, 1, 1),
        Err(TensorError::Shape(_))
    ));
    // (4 + 0 - 3) / 2 is not exact
    assert!(conv2d_value(&x, &Tensor::ones(&[1, 2, 3, 3]), &b, 0, 2).is_err());
    // even kernel
    assert!(conv2d_value(&x, &Tensor::ones(&[1, 2, 2, 2]), &b, 0, 1).is_err());
}

#[test]
fn conv3d_unit_kernel_is_identity() {
    let x = Tensor::randn(&[1, 1, 3, 4, 4], &mut rng(4));
    let mut t = Tape::<f64>::new();
    let xv = t.constant(x.clone());
    let w = t.constant(Tensor::ones(&[1, 1, 1, 1, 1]));
    let b = t.constant(Tensor::zeros(&[1]));
    let y = t.conv3d(xv, w, b, 0, 1).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn conv3d_center_temporal_tap_reduces_to_conv2d() {
    let mut r = rng(5);
    let (bn, ci, co, tl, h) = (2, 3, 2, 4, 5);
    let x = Tensor::randn(&[bn, ci, tl, h, h], &mut r);
    let w2 = Tensor::randn(&[co, ci, 3, 3], &mut r);
    let b = Tensor::randn(&[co], &mut r);
    // temporal kernel one-hot at its center
    let mut w3 = Tensor::zeros(&[co, ci, 3, 3, 3]);
    for o in 0..co {
        for c in 0..ci {
            for i in 0..9 {
                w3.data_mut()[((o * ci + c) * 3 + 1) * 9 + i] = w2.data()[(o * ci + c) * 9 + i];
            }
        }
    }
    let mut t = Tape::<f64>::new();
    let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w3), t.constant(b.clone()));
    let y = t.conv3d(xv, wv, bv, 1, 1).unwrap();
    let y = t.value(y);
    for frame in 0..tl {
        let xf = x.narrow(2, frame, 1).unwrap().reshape(&[bn, ci, h, h]).unwrap();
        let want = naive_conv2d(&xf, &w2, &b, 1, 1);
        let got = y.narrow(2, frame, 1).unwrap().reshape(&[bn, co, h, h]).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-12);
    }
}

#[test]
fn conv3d_matches_naive_loops() {
    let mut r = rng(6);
    let x = Tensor::randn(&[2, 2, 4, 5, 5], &mut r);
    let w = Tensor::randn(&[3, 2, 3, 3, 3], &mut r);
    let b = Tensor::randn(&[3], &mut r);
    for pad in [0, 1] {
        let mut t = Tape::<f64>::new();
        let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
        let y = t.conv3d(xv, wv, bv, pad, 1).unwrap();
        let want = naive_conv3d(&x, &w, &b, pad);
        assert!(t.value(y).max_abs_diff(&want).unwrap() <= 1e-6);
    }
}

#[test]
fn backward_of_weighted_sum_is_input() {
    let x = Tensor::<f64>::randn(&[2, 3], &mut rng(7));
    let mut t = Tape::new();
    let w = t.var(Tensor::randn(&[2, 3], &mut rng(8)));
    let xv = t.constant(x.clone());
    let p = t.mul(w, xv).unwrap();
    let loss = t.sum(p);
    let g = t.backward(loss).unwrap();
    assert_eq!(g.get(w).unwrap(), &x);
}

#[test]
fn backward_of_squared_sigmoid_at_zero() {
    let mut t = Tape::<f64>::new();
    let w = t.var(Tensor::scalar(0.0));
    let s = t.sigmoid(w);
    let loss = t.square(s).unwrap();
    let g = t.backward(loss).unwrap();
    assert!((g.get(w).unwrap().item().unwrap() - 0.25).abs() < 1e-15);
}

#[test]
fn backward_accumulates_and_zero_fills() {
    let mut t = Tape::<f64>::new();
    let a = t.var(Tensor::scalar(3.0));
    let unused = t.var(Tensor::ones(&[2]));
    let s = t.add(a, a).unwrap();
    let loss = t.mul(s, a).unwrap(); // 2a², d/da = 4a
    let g = t.backward(loss).unwrap();
    assert_eq!(g.get(a).unwrap().item().unwrap(), 12.0);
    assert!(g.get(unused).is_none());
    assert_eq!(g.get_or_zeros(unused, &[2]).data(), &[0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut t = Tape::<f64>::new();
    let a = t.var(Tensor::ones(&[2]));
    assert!(matches!(t.backward(a), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn check_gradients_linear_map_is_exact() {
    let c = Tensor::<f64>::randn(&[5], &mut rng(9));
    let err = check_gradients(
        |t, x| {
            let cv = t.constant(c.clone());
            let p = t.mul(x, cv)?;
            Ok(t.sum(p))
        },
        &Tensor::randn(&[5], &mut rng(10)),
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-10, "{err}");
}

#[test]
fn check_gradients_sigmoid_at_zero() {
    let err = check_gradients(
        |t, x| {
            let s = t.sigmoid(x);
            Ok(t.sum(s))
        },
        &Tensor::scalar(0.0),
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-8, "{err}");
}

#[test]
fn check_gradients_rejects_nonfinite() {
    let r = check_gradients(|t, x| Ok(t.ln(x)), &Tensor::scalar(-1.0), 1e-5);
    assert!(matches!(r, Err(TensorError::NonFinite(_))));
}

#[test]
fn stable_sigmoid_extremes() {
    assert_eq!(sigmoid(1000.0f64), 1.0);
    assert_eq!(sigmoid(-1000.0f64), 0.0);
}

type Probe = Box<dyn Fn(&mut Tape<f64>, Var, &mut ChaCha8Rng) -> Result<Var>>;

/// Random projection so every output coordinate influences the loss.
fn project(t: &mut Tape<f64>, y: Var, r: &mut ChaCha8Rng) -> Result<Var> {
    let c = t.constant(Tensor::randn(t.shape(y), r));
    let p = t.mul(y, c)?;
    Ok(t.sum(p))
}

fn primitive_probes() -> Vec<(&'static str, Vec<usize>, Probe)> {
    fn other(t: &mut Tape<f64>, shape: &[usize], r: &mut ChaCha8Rng) -> Var {
        t.constant(Tensor::randn(shape, r))
    }
    vec![
        ("add", vec![2, 3], Box::new(|t, x, r| { let o = other(t, &[2, 3], r); let y = t.add(x, o)?; project(t, y, r) })),
        ("sub", vec![2, 3], Box::new(|t, x, r| { let o = other(t, &[2, 3], r); let y = t.sub(o, x)?; project(t, y, r) })),
        ("mul", vec![2, 3], Box::new(|t, x, r| { let o = other(t, &[2, 3], r); let y = t.mul(x, o)?; project(t, y, r) })),
        ("div", vec![2, 3], Box::new(|t, x, r| { let e = t.exp(x); let o = other(t, &[2, 3], r); let y = t.div(o, e)?; project(t, y, r) })),
        ("scalar", vec![4], Box::new(|t, x, r| { let a = t.mul_scalar(x, 1.7); let y = t.add_scalar(a, -0.3); project(t, y, r) })),
        ("sigmoid", vec![5], Box::new(|t, x, r| { let y = t.sigmoid(x); project(t, y, r) })),
        ("tanh", vec![5], Box::new(|t, x, r| { let y = t.tanh(x); project(t, y, r) })),
        ("relu", vec![6], Box::new(|t, x, r| { let y = t.relu(x); project(t, y, r) })),
        ("exp_ln_sqrt_recip", vec![4], Box::new(|t, x, r| {
            let e = t.exp(x);
            let s = t.sqrt(e);
            let i = t.recip(s);
            let a = t.add_scalar(e, 1.0);
            let l = t.ln(a);
            let y = t.add(i, l)?;
            project(t, y, r)
        })),
        ("matmul", vec![3, 4], Box::new(|t, x, r| { let o = other(t, &[4, 2], r); let y = t.matmul(x, o)?; project(t, y, r) })),
        ("bmm", vec![2, 3, 4], Box::new(|t, x, r| { let o = other(t, &[2, 4, 2], r); let y = t.bmm(x, o)?; project(t, y, r) })),
        ("concat", vec![2, 2, 3], Box::new(|t, x, r| { let o = other(t, &[2, 1, 3], r); let y = t.concat(&[o, x, x], 1)?; project(t, y, r) })),
        ("narrow_select", vec![2, 4, 3], Box::new(|t, x, r| {
            let a = t.narrow(x, 1, 1, 2)?;
            let b = t.index_select(x, 1, &[3, 0, 3])?;
            let y = t.concat(&[a, b], 1)?;
            project(t, y, r)
        })),
        ("permute_reshape", vec![2, 3, 4], Box::new(|t, x, r| { let p = t.permute(x, &[2, 0, 1])?; let y = t.reshape(p, &[4, 6])?; project(t, y, r) })),
        ("expand_bias", vec![1, 3, 1], Box::new(|t, x, r| {
            let y = t.expand(x, &[2, 3, 4])?;
            let b = t.reshape(x, &[3])?;
            let o = other(t, &[2, 3, 4], r);
            let z = t.bias_add(o, b, 1)?;
            let w = t.add(y, z)?;
            project(t, w, r)
        })),
        ("pad", vec![1, 2, 3, 3], Box::new(|t, x, r| { let y = t.pad2d(x, 2)?; project(t, y, r) })),
        ("avg_pool", vec![2, 2, 4, 4], Box::new(|t, x, r| { let y = t.avg_pool2d(x, 2)?; project(t, y, r) })),
        ("adaptive_max_pool", vec![1, 2, 6, 5], Box::new(|t, x, r| { let y = t.adaptive_max_pool2d(x, 4, 4)?; project(t, y, r) })),
        ("upsample", vec![1, 2, 3, 3], Box::new(|t, x, r| { let y = t.upsample_nearest2d(x, 2)?; project(t, y, r) })),
        ("sum_mean", vec![2, 3, 2], Box::new(|t, x, r| {
            let s = t.sum_axis(x, 1)?;
            let p = project(t, s, r)?;
            let m = t.mean(x);
            let m = t.mul_scalar(m, 3.0);
            t.add(p, m)
        })),
        ("softmax", vec![2, 5, 3], Box::new(|t, x, r| { let y = t.softmax(x, 1)?; project(t, y, r) })),
        ("conv2d_input", vec![2, 2, 5, 5], Box::new(|t, x, r| {
            let w = other(t, &[3, 2, 3, 3], r);
            let b = other(t, &[3], r);
            let y = t.conv2d(x, w, b, 1, 2)?;
            project(t, y, r)
        })),
        ("conv2d_weight", vec![3, 2, 3, 3], Box::new(|t, w, r| {
            let x = other(t, &[2, 2, 4, 4], r);
            let b = other(t, &[3], r);
            let y = t.conv2d(x, w, b, 1, 1)?;
            project(t, y, r)
        })),
        ("conv2d_bias", vec![3], Box::new(|t, b, r| {
            let x = other(t, &[2, 2, 4, 4], r);
            let w = other(t, &[3, 2, 1, 1], r);
            let y = t.conv2d(x, w, b, 0, 1)?;
            project(t, y, r)
        })),
        ("conv3d_input", vec![1, 2, 3, 4, 4], Box::new(|t, x, r| {
            let w = other(t, &[2, 2, 3, 3, 3], r);
            let b = other(t, &[2], r);
            let y = t.conv3d(x, w, b, 1, 1)?;
            project(t, y, r)
        })),
        ("conv3d_weight", vec![2, 2, 3, 3, 3], Box::new(|t, w, r| {
            let x = other(t, &[1, 2, 3, 4, 4], r);
            let b = other(t, &[2], r);
            let y = t.conv3d(x, w, b, 1, 1)?;
            project(t, y, r)
        })),
        ("batch_norm", vec![4, 2, 3, 3], Box::new(|t, x, r| { let (y, _) = t.batch_norm(x, 2, 1e-4)?; project(t, y, r) })),
        ("normalize_with", vec![2, 3, 2, 2], Box::new(|t, x, r| {
            let y = t.normalize_with(x, &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0], 1e-4)?;
            project(t, y, r)
        })),
        ("modulate_x", vec![4, 2, 3], Box::new(|t, x, r| {
            let g = other(t, &[2, 2], r);
            let b = other(t, &[2, 2], r);
            let y = t.modulate(x, g, b, 2)?;
            project(t, y, r)
        })),
        ("modulate_gamma_beta", vec![2, 2], Box::new(|t, g, r| {
            let x = other(t, &[4, 2, 3], r);
            let y = t.modulate(x, g, g, 2)?;
            project(t, y, r)
        })),
    ]
}

#[test]
fn every_primitive_passes_finite_differences_on_ten_seeds() {
    for (name, shape, probe) in primitive_probes() {
        for seed in 0..10u64 {
            let point = Tensor::randn(&shape, &mut rng(1000 + seed));
            let err = check_gradients(
                |t, x| {
                    let mut r = rng(seed);
                    probe(t, x, &mut r)
                },
                &point,
                1e-5,
            )
            .unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(err <= 1e-4, "{name} seed {seed}: relative error {err}");
        }
    }
}

#[test]
fn deterministic_repeat_is_bit_identical() {
    let run = || {
        let mut r = rng(11);
        let mut t = Tape::<f32>::new();
        let x = t.var(Tensor::randn(&[4, 8, 9, 9], &mut r));
        let w = t.var(Tensor::randn(&[8, 8, 3, 3], &mut r));
        let b = t.var(Tensor::randn(&[8], &mut r));
        let y = t.conv2d(x, w, b, 1, 1).unwrap();
        let (y, _) = t.batch_norm(y, 1, 1e-4).unwrap();
        let y = t.relu(y);
        let l = t.mean(y);
        let g = t.backward(l).unwrap();
        (t.value(y).clone(), g.get(w).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(ga, gb);
}

#[test]
fn batch_norm_standardizes_per_group() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::randn(&[6, 3, 4, 4], &mut rng(12)).map(|v| 3.0 * v + 1.5));
    let (y, stats) = t.batch_norm(x, 2, 1e-4).unwrap();
    assert_eq!(stats.mean.len(), 6);
    let yv = t.value(y);
    for g in 0..2 {
        for c in 0..3 {
            let mut vals = Vec::new();
            for b in 0..3 {
                for i in 0..16 {
                    vals.push(yv.at(&[g * 3 + b, c, i / 4, i % 4]));
                }
            }
            let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let v: f64 = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-10);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }
}

#[test]
fn batch_norm_rejects_single_element() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::ones(&[1, 3]));
    assert!(t.batch_norm(x, 1, 1e-4).is_err());
}
