//! Network building blocks: spectrally normalized linear and convolution
//! layers, (conditional) batch normalization, residual G/D blocks,
//! orthogonal initialization and the orthogonality penalty.

use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use vidpred_tensor::{Real, Tape, Tensor, Var};

use crate::error::{invalid, Result};
use crate::params::{BnRecord, Cx, Init, Mode, ParamId, Params};

/// Smallest singular-value estimate used as a divisor.
pub const SIGMA_FLOOR: f64 = 1e-12;
pub const BN_EPS: f64 = 1e-4;
pub const BN_MOMENTUM: f64 = 0.1;

/// `[out, rest]` view of a weight shape.
fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [o, rest @ ..] => (*o, rest.iter().product()),
    }
}

/// Orthogonal matrix of the given shape (flattened to `[out, rest]`): rows
/// are orthonormal when `out <= rest`, columns otherwise.
pub fn orthogonal_init<F: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<F> {
    let (rows, cols) = matrix_dims(shape);
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::<f64>::from_fn(tall, short, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let (q, r) = (qr.q(), qr.r());
    let mut q = q.columns(0, short).into_owned();
    // Fix the sign ambiguity of QR so the result is Haar-distributed.
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let data: Vec<F> = if rows >= cols {
        (0..rows)
            .flat_map(|i| (0..cols).map(move |j| (i, j)))
            .map(|(i, j)| F::of(q[(i, j)]))
            .collect()
    } else {
        (0..rows)
            .flat_map(|i| (0..cols).map(move |j| (i, j)))
            .map(|(i, j)| F::of(q[(j, i)]))
            .collect()
    };
    Tensor::new(shape.to_vec(), data).expect("orthogonal_init shape")
}

/// Result of power iteration on a weight viewed as `[out, rest]`.
#[derive(Clone, Debug)]
pub struct SpectralEstimate<F: Real> {
    pub sigma: F,
    /// Updated left singular vector, `[out]`.
    pub u: Tensor<F>,
    /// Right singular vector, `[rest]`.
    pub v: Tensor<F>,
    /// True when the estimate hit [`SIGMA_FLOOR`].
    pub degenerate: bool,
}

fn normalized<F: Real>(x: Vec<F>) -> Vec<F> {
    let n = x.iter().map(|&v| v * v).sum::<F>().sqrt();
    if n > F::of(SIGMA_FLOOR) {
        x.into_iter().map(|v| v / n).collect()
    } else {
        x
    }
}

/// `iters` rounds of `v ∝ Wᵀu, u ∝ Wv`, then `σ = uᵀWv`.
pub fn power_iteration<F: Real>(w: &Tensor<F>, u: &Tensor<F>, iters: usize) -> Result<SpectralEstimate<F>> {
    let (rows, cols) = matrix_dims(w.shape());
    if u.numel() != rows {
        return Err(invalid(format!(
            "singular vector has {} entries, weight has {rows} rows",
            u.numel()
        )));
    }
    if iters == 0 {
        return Err(invalid("power iteration needs at least one step"));
    }
    let wd = w.data();
    let mut uu = u.data().to_vec();
    let mut vv = vec![F::zero(); cols];
    for _ in 0..iters {
        vv.iter_mut().for_each(|x| *x = F::zero());
        F::gemm(true, false, cols, rows, 1, F::one(), wd, &uu, F::zero(), &mut vv);
        vv = normalized(vv);
        F::gemm(false, false, rows, cols, 1, F::one(), wd, &vv, F::zero(), &mut uu);
        uu = normalized(uu);
    }
    let mut wv = vec![F::zero(); rows];
    F::gemm(false, false, rows, cols, 1, F::one(), wd, &vv, F::zero(), &mut wv);
    let raw = uu.iter().zip(&wv).map(|(&a, &b)| a * b).sum::<F>();
    let degenerate = !(raw > F::of(SIGMA_FLOOR));
    Ok(SpectralEstimate {
        sigma: if degenerate { F::of(SIGMA_FLOOR) } else { raw },
        u: Tensor::new([rows], uu)?,
        v: Tensor::new([cols], vv)?,
        degenerate,
    })
}

/// `σ = uᵀWv` for given singular vectors.
fn pinned_estimate<F: Real>(w: &Tensor<F>, u: Tensor<F>, v: Tensor<F>) -> Result<SpectralEstimate<F>> {
    let (rows, cols) = matrix_dims(w.shape());
    if u.numel() != rows || v.numel() != cols {
        return Err(invalid("pinned singular vectors do not match the weight"));
    }
    let mut wv = vec![F::zero(); rows];
    F::gemm(false, false, rows, cols, 1, F::one(), w.data(), v.data(), F::zero(), &mut wv);
    let raw = u.data().iter().zip(&wv).map(|(&a, &b)| a * b).sum::<F>();
    let degenerate = !(raw > F::of(SIGMA_FLOOR));
    Ok(SpectralEstimate {
        sigma: if degenerate { F::of(SIGMA_FLOOR) } else { raw },
        u,
        v,
        degenerate,
    })
}

/// Persistent state of a spectrally normalized weight.
#[derive(Clone, Copy, Debug)]
pub struct SpectralNorm {
    pub u: ParamId,
    pub iters: usize,
}

impl SpectralNorm {
    fn new<F: Real>(init: &mut Init<'_, F>, rows: usize) -> Self {
        let raw: Vec<F> = (0..rows)
            .map(|_| F::of(init.rng().sample::<f64, _>(StandardNormal)))
            .collect();
        let u = Tensor::new([rows], normalized(raw)).expect("u shape");
        SpectralNorm {
            u: init.buffer("sn_u", u),
            iters: 1,
        }
    }
}

/// `W / σ̂` on the tape. The estimate is computed once per context and the
/// refreshed `u` is queued as a buffer update.
pub fn spectral_weight<F: Real>(cx: &mut Cx<'_, F>, w_id: ParamId, sn: SpectralNorm) -> Result<Var> {
    if let Some(v) = cx.cached(w_id) {
        return Ok(v);
    }
    let w = cx.param(w_id);
    let shape = cx.shape(w);
    let est = match cx.spectral_pin(w_id) {
        Some((u, v)) => {
            let (u, v) = (u.clone(), v.clone());
            pinned_estimate(cx.value(w), u, v)?
        }
        None => {
            let iters = cx.power_iterations().unwrap_or(sn.iters);
            power_iteration(cx.value(w), cx.stored(sn.u), iters)?
        }
    };
    cx.log_spectral(w_id, est.u.clone(), est.v.clone());
    let sigma = if est.degenerate {
        log::warn!(
            "spectral norm of {} is below {SIGMA_FLOOR:e}; clamped",
            cx.params().entry(w_id).name
        );
        cx.constant(Tensor::scalar(est.sigma))
    } else {
        let (rows, cols) = matrix_dims(&shape);
        let outer = Tensor::from_fn(&shape, |i| est.u.data()[i / cols] * est.v.data()[i % cols]);
        debug_assert_eq!(outer.numel(), rows * cols);
        let outer = cx.constant(outer);
        let prod = cx.tape.mul(w, outer)?;
        cx.tape.sum(prod)
    };
    cx.push_update(sn.u, est.u);
    let s = cx.tape.reshape(sigma, &vec![1; shape.len()])?;
    let s = cx.tape.expand(s, &shape)?;
    let out = cx.tape.div(w, s)?;
    cx.cache(w_id, out);
    Ok(out)
}

fn weight_var<F: Real>(cx: &mut Cx<'_, F>, w: ParamId, sn: Option<SpectralNorm>) -> Result<Var> {
    match sn {
        Some(sn) => spectral_weight(cx, w, sn),
        None => Ok(cx.param(w)),
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub sn: Option<SpectralNorm>,
}

impl Linear {
    pub fn new<F: Real>(init: &mut Init<'_, F>, name: &str, fan_in: usize, fan_out: usize, bias: bool, sn: bool) -> Self {
        let mut s = init.scope(name);
        let w = s.weight("w", &[fan_out, fan_in]);
        let b = bias.then(|| s.bias("b", fan_out));
        let sn = sn.then(|| SpectralNorm::new(&mut s, fan_out));
        Linear { w, b, sn }
    }

    /// `x [n, in] -> [n, out]`.
    pub fn forward<F: Real>(&self, cx: &mut Cx<'_, F>, x: Var) -> Result<Var> {
        let w = weight_var(cx, self.w, self.sn)?;
        let b = self.b.map(|b| cx.param(b));
        Ok(cx.tape.linear(x, w, b)?)
    }
}

/// Resolution-preserving (for stride 1) 2-D or 3-D convolution.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub sn: Option<SpectralNorm>,
    pub padding: usize,
    pub stride: usize,
    pub dims: usize,
}

impl Conv {
    pub fn new<F: Real>(init: &mut Init<'_, F>, name: &str, cin: usize, cout: usize, k: usize, dims: usize, sn: bool) -> Self {
        assert!(dims == 2 || dims == 3, "convolution must be 2-D or 3-D");
        let mut s = init.scope(name);
        let mut shape = vec![cout, cin];
        shape.extend(std::iter::repeat(k).take(dims));
        let w = s.weight("w", &shape);
        let b = s.bias("b", cout);
        let sn = sn.then(|| SpectralNorm::new(&mut s, cout));
        Conv {
            w,
            b,
            sn,
            padding: (k.saturating_sub(1)) / 2,
            stride: 1,
            dims,
        }
    }

    pub fn forward<F: Real>(&self, cx: &mut Cx<'_, F>, x: Var) -> Result<Var> {
        let w = weight_var(cx, self.w, self.sn)?;
        let b = cx.param(self.b);
        let y = if self.dims == 2 {
            cx.tape.conv2d(x, w, b, self.padding, self.stride)?
        } else {
            cx.tape.conv3d(x, w, b, self.padding, self.stride)?
        };
        Ok(y)
    }
}

#[derive(Clone, Debug)]
enum Affine {
    /// `gain = 1 + A·cond`, `bias = B·cond`.
    Conditional { gain: Linear, bias: Linear },
    /// Learned per-channel scale and offset.
    Plain { gain: ParamId, bias: ParamId },
}

/// Batch normalization over `[G*B, C, ...]` with statistics per group
/// (time step) and channel.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub channels: usize,
    pub groups: usize,
    affine: Affine,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub standing_mean: ParamId,
    pub standing_var: ParamId,
    pub standing_ready: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

static FALLBACK_WARNED: AtomicBool = AtomicBool::new(false);

impl BatchNorm {
    fn with_affine<F: Real>(s: &mut Init<'_, F>, channels: usize, groups: usize, affine: Affine) -> Self {
        let gc = [groups, channels];
        BatchNorm {
            channels,
            groups,
            affine,
            running_mean: s.buffer("running_mean", Tensor::zeros(&gc)),
            running_var: s.buffer("running_var", Tensor::ones(&gc)),
            standing_mean: s.buffer("standing_mean", Tensor::zeros(&gc)),
            standing_var: s.buffer("standing_var", Tensor::ones(&gc)),
            standing_ready: s.buffer("standing_ready", Tensor::zeros(&[1])),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    /// Scale and offset are spectrally normalized affine maps of a
    /// conditioning vector of width `cond_dim`.
    pub fn conditional<F: Real>(init: &mut Init<'_, F>, name: &str, channels: usize, groups: usize, cond_dim: usize) -> Self {
        let mut s = init.scope(name);
        let gain = Linear::new(&mut s, "gain", cond_dim, channels, true, true);
        let bias = Linear::new(&mut s, "bias", cond_dim, channels, true, true);
        Self::with_affine(&mut s, channels, groups, Affine::Conditional { gain, bias })
    }

    pub fn plain<F: Real>(init: &mut Init<'_, F>, name: &str, channels: usize, groups: usize) -> Self {
        let mut s = init.scope(name);
        let gain = s.affine("gain", Tensor::ones(&[channels]));
        let bias = s.affine("bias", Tensor::zeros(&[channels]));
        Self::with_affine(&mut s, channels, groups, Affine::Plain { gain, bias })
    }

    pub fn is_conditional(&self) -> bool {
        matches!(self.affine, Affine::Conditional { .. })
    }

    /// Standardization only, without scale and offset.
    pub fn normalize<F: Real>(&self, cx: &mut Cx<'_, F>, x: Var) -> Result<Var> {
        let shape = cx.shape(x);
        if shape.len() < 2 || shape[1] != self.channels || shape[0] % self.groups != 0 {
            return Err(invalid(format!(
                "batch norm over {} channels in {} groups got input {shape:?}",
                self.channels, self.groups
            )));
        }
        let batch = shape[0] / self.groups;
        let eps = F::of(self.eps);
        match cx.mode() {
            Mode::Train => {
                if batch < 2 {
                    return Err(invalid("batch normalization in training mode needs a batch of at least 2"));
                }
                let (y, stats) = cx.tape.batch_norm(x, self.groups, eps)?;
                let m = F::of(self.momentum);
                let blend = |old: &Tensor<F>, new: &[F]| {
                    Tensor::new(
                        old.shape().to_vec(),
                        old.data()
                            .iter()
                            .zip(new)
                            .map(|(&o, &n)| (F::one() - m) * o + m * n)
                            .collect(),
                    )
                };
                let rm = blend(cx.stored(self.running_mean), &stats.mean)?;
                let rv = blend(cx.stored(self.running_var), &stats.var)?;
                cx.push_update(self.running_mean, rm);
                cx.push_update(self.running_var, rv);
                cx.record_moments(BnRecord {
                    mean_id: self.standing_mean,
                    var_id: self.standing_var,
                    ready_id: self.standing_ready,
                    mean: stats.mean.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
                    var: stats.var.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
                });
                Ok(y)
            }
            Mode::Eval => {
                let ready = cx.stored(self.standing_ready).data()[0] > F::zero();
                let (mean, var) = if ready {
                    (cx.stored(self.standing_mean), cx.stored(self.standing_var))
                } else {
                    if !FALLBACK_WARNED.swap(true, Ordering::Relaxed) {
                        log::warn!("standing statistics not finalized; evaluating with running statistics");
                    }
                    (cx.stored(self.running_mean), cx.stored(self.running_var))
                };
                let c = self.channels;
                if self.groups == 1 {
                    return Ok(cx.tape.normalize_with(x, mean.data(), var.data(), eps)?);
                }
                let mut parts = Vec::with_capacity(self.groups);
                for g in 0..self.groups {
                    let xg = cx.tape.narrow(x, 0, g * batch, batch)?;
                    let range = g * c..(g + 1) * c;
                    parts.push(cx.tape.normalize_with(xg, &mean.data()[range.clone()], &var.data()[range], eps)?);
                }
                Ok(cx.tape.concat(&parts, 0)?)
            }
        }
    }

    /// `x [G*B, C, ...]`; `cond [B, D]` is required for the conditional form.
    pub fn forward<F: Real>(&self, cx: &mut Cx<'_, F>, x: Var, cond: Option<Var>) -> Result<Var> {
        let y = self.normalize(cx, x)?;
        let batch = cx.shape(x)[0] / self.groups;
        let (gain, bias) = match &self.affine {
            Affine::Conditional { gain, bias } => {
                let cond = cond.ok_or_else(|| invalid("conditional batch norm needs a conditioning vector"))?;
                if cx.shape(cond)[0] != batch {
                    return Err(invalid(format!(
                        "conditioning batch {} does not match input batch {batch}",
                        cx.shape(cond)[0]
                    )));
                }
                let g = gain.forward(cx, cond)?;
                let g = cx.tape.add_scalar(g, F::one());
                (g, bias.forward(cx, cond)?)
            }
            Affine::Plain { gain, bias } => {
                let full = [batch, self.channels];
                let (g, b) = (cx.param(*gain), cx.param(*bias));
                let g = cx.tape.reshape(g, &[1, self.channels])?;
                let b = cx.tape.reshape(b, &[1, self.channels])?;
                (cx.tape.expand(g, &full)?, cx.tape.expand(b, &full)?)
            }
        };
        Ok(cx.tape.modulate(y, gain, bias, self.groups)?)
    }
}

/// BigGAN generator residual block on `[T*B, C, H, W]`:
/// BN-ReLU-[up]-conv3-BN-ReLU-conv3 plus a `[up]`-conv1x1 skip.
#[derive(Clone, Debug)]
pub struct GBlock {
    bn1: BatchNorm,
    conv1: Conv,
    bn2: BatchNorm,
    conv2: Conv,
    skip: Option<Conv>,
    pub upsample: bool,
}

impl GBlock {
    pub fn new<F: Real>(
        init: &mut Init<'_, F>,
        name: &str,
        cin: usize,
        cout: usize,
        cond_dim: usize,
        groups: usize,
        upsample: bool,
    ) -> Self {
        let mut s = init.scope(name);
        GBlock {
            bn1: BatchNorm::conditional(&mut s, "bn1", cin, groups, cond_dim),
            conv1: Conv::new(&mut s, "conv1", cin, cout, 3, 2, true),
            bn2: BatchNorm::conditional(&mut s, "bn2", cout, groups, cond_dim),
            conv2: Conv::new(&mut s, "conv2", cout, cout, 3, 2, true),
            skip: (cin != cout).then(|| Conv::new(&mut s, "skip", cin, cout, 1, 2, true)),
            upsample,
        }
    }

    pub fn forward<F: Real>(&self, cx: &mut Cx<'_, F>, x: Var, cond: Var) -> Result<Var> {
        let mut h = self.bn1.forward(cx, x, Some(cond))?;
        h = cx.tape.relu(h);
        let mut sc = x;
        if self.upsample {
            h = cx.tape.upsample_nearest2d(h, 2)?;
            sc = cx.tape.upsample_nearest2d(sc, 2)?;
        }
        h = self.conv1.forward(cx, h)?;
        h = self.bn2.forward(cx, h, Some(cond))?;
        h = cx.tape.relu(h);
        h = self.conv2.forward(cx, h)?;
        if let Some(skip) = &self.skip {
            sc = skip.forward(cx, sc)?;
        }
        Ok(cx.tape.add(h, sc)?)
    }
}

/// BigGAN discriminator residual block, 2-D `[B, C, H, W]` or 3-D
/// `[B, C, T, H, W]`. Pooling is spatial only.
#[derive(Clone, Debug)]
pub struct DBlock {
    conv1: Conv,
    conv2: Conv,
    skip: Option<Conv>,
    pub downsample: bool,
    pub preact: bool,
}

impl DBlock {
    pub fn new<F: Real>(
        init: &mut Init<'_, F>,
        name: &str,
        cin: usize,
        cout: usize,
        dims: usize,
        downsample: bool,
        preact: bool,
    ) -> Self {
        let mut s = init.scope(name);
        DBlock {
            conv1: Conv::new(&mut s, "conv1", cin, cout, 3, dims, true),
            conv2: Conv::new(&mut s, "conv2", cout, cout, 3, dims, true),
            skip: (cin != cout || downsample).then(|| Conv::new(&mut s, "skip", cin, cout, 1, dims, true)),
            downsample,
            preact,
        }
    }

    /// 2 or 3, the dimensionality of the block's convolutions.
    pub fn dims(&self) -> usize {
        self.conv1.dims
    }

    pub fn forward<F: Real>(&self, cx: &mut Cx<'_, F>, x: Var) -> Result<Var> {
        let mut h = if self.preact { cx.tape.relu(x) } else { x };
        h = self.conv1.forward(cx, h)?;
        h = cx.tape.relu(h);
        h = self.conv2.forward(cx, h)?;
        let mut sc = match &self.skip {
            Some(skip) => skip.forward(cx, x)?,
            None => x,
        };
        if self.downsample {
            h = cx.tape.avg_pool2d(h, 2)?;
            sc = cx.tape.avg_pool2d(sc, 2)?;
        }
        Ok(cx.tape.add(h, sc)?)
    }
}

/// `β · Σ_W ‖Gram(W) ⊙ (1 − I)‖²_F`, with the Gram matrix taken over the
/// smaller side of each weight's `[out, rest]` view.
pub fn orthogonality_penalty<F: Real>(tape: &mut Tape<F>, weights: &[Var], beta: F) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &w in weights {
        let (rows, cols) = matrix_dims(tape.shape(w));
        let m = tape.reshape(w, &[rows, cols])?;
        let mt = tape.transpose2(m)?;
        let (gram, n) = if rows <= cols {
            (tape.matmul(m, mt)?, rows)
        } else {
            (tape.matmul(mt, m)?, cols)
        };
        let mask = tape.constant(Tensor::from_fn(&[n, n], |i| {
            if i / n == i % n {
                F::zero()
            } else {
                F::one()
            }
        }));
        let off = tape.mul(gram, mask)?;
        let sq = tape.square(off)?;
        let s = tape.sum(sq);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(match total {
        Some(t) => tape.mul_scalar(t, beta),
        None => tape.constant(Tensor::scalar(F::zero())),
    })
}

/// Replaces the evaluation statistics of every normalization layer touched by
/// `pass` with the average of the batch means and variances observed over
/// `n_batches` training-mode passes. Returns the number of layers finalized.
pub fn standing_statistics<F: Real>(
    params: &mut Params<F>,
    n_batches: usize,
    mut pass: impl FnMut(&Params<F>, usize) -> Result<Vec<BnRecord>>,
) -> Result<usize> {
    if n_batches == 0 {
        return Err(invalid("standing statistics need at least one batch"));
    }
    let mut acc: Vec<(BnRecord, usize)> = Vec::new();
    for i in 0..n_batches {
        for rec in pass(params, i)? {
            match acc.iter_mut().find(|(a, _)| a.mean_id == rec.mean_id) {
                Some((a, n)) => {
                    if a.mean.len() != rec.mean.len() {
                        return Err(invalid("normalization layer changed width between passes"));
                    }
                    a.mean.iter_mut().zip(&rec.mean).for_each(|(x, y)| *x += y);
                    a.var.iter_mut().zip(&rec.var).for_each(|(x, y)| *x += y);
                    *n += 1;
                }
                None => acc.push((rec, 1)),
            }
        }
    }
    for (rec, n) in &acc {
        let shape = params.get(rec.mean_id).shape().to_vec();
        let avg = |v: &[f64]| Tensor::new(shape.clone(), v.iter().map(|x| F::of(x / *n as f64)).collect());
        params.set(rec.mean_id, avg(&rec.mean)?)?;
        params.set(rec.var_id, avg(&rec.var)?)?;
        params.set(rec.ready_id, Tensor::ones(&[1]))?;
    }
    Ok(acc.len())
}
