//! Evaluation: Fréchet distance on classifier logits (FVD), Inception Score,
//! SSIM/PSNR, best-of-ℓ selection, the copy baseline and step benchmarks.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vidpred_tensor::{Real, Tensor};

use crate::bundle::{read_bundle, write_bundle};
use crate::data::{make_batch, synth_generate, SynthSpec, VideoClip};
use crate::error::{invalid, Error, Result};
use crate::layers::{Conv, Linear};
use crate::nets::pixel_count;
use crate::params::{derive_seed, Cx, Group, Init, Mode, Params};
use crate::trainer::{sample_latents, Adam, Model, TrainConfig, Trainer};

/// Eigenvalues below `-NEG_EIG_TOL` (relative to the largest magnitude, floored
/// at one) make a covariance or covariance product unusable.
pub const NEG_EIG_TOL: f64 = 1e-6;

/// Mean and covariance of a set of embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>, count: usize) -> Result<Self> {
        let d = mu.len();
        if sigma.shape() != (d, d) {
            return Err(invalid(format!("covariance {:?} does not match mean of length {d}", sigma.shape())));
        }
        if count < 2 {
            return Err(invalid("statistics need at least two samples"));
        }
        if !mu.iter().chain(sigma.iter()).all(|x| x.is_finite()) {
            return Err(invalid("non-finite statistics"));
        }
        let scale = sigma.amax().max(1.0);
        if (&sigma - sigma.transpose()).amax() > 1e-9 * scale {
            return Err(invalid("covariance is not symmetric"));
        }
        Ok(GaussianStats { mu, sigma, count })
    }

    /// Fits mean and unbiased covariance to the rows of `x` `[N, D]`.
    pub fn from_rows<F: Real>(x: &Tensor<F>) -> Result<Self> {
        let &[n, d] = x.shape() else {
            return Err(invalid(format!("expected [N, D] embeddings, got {:?}", x.shape())));
        };
        if n < 2 {
            return Err(invalid(format!("statistics need at least two samples, got {n}")));
        }
        let m = DMatrix::from_row_iterator(n, d, x.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)));
        let mu = m.row_mean().transpose();
        let mut centered = m;
        for mut row in centered.row_iter_mut() {
            row -= mu.transpose();
        }
        let mut sigma = centered.transpose() * &centered / (n - 1) as f64;
        // Rounding in the product can leave the two triangles a few ulps apart.
        sigma = (&sigma + sigma.transpose()) * 0.5;
        GaussianStats::new(mu, sigma, n)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Eigenvalues of a symmetric matrix with small negatives clamped to zero.
fn psd_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let scale = eig.eigenvalues.amax().max(1.0);
    for l in eig.eigenvalues.iter_mut() {
        if *l < -NEG_EIG_TOL * scale {
            return Err(invalid(format!("{what} has eigenvalue {l:e}")));
        }
        *l = l.max(0.0);
    }
    Ok(eig)
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2 (Σ_a Σ_b)^{1/2})`.
///
/// The trace of the square root uses `Tr((Σ_a Σ_b)^{1/2}) = Tr((S Σ_b S)^{1/2})`
/// with `S = Σ_a^{1/2}`, which keeps every decomposition symmetric.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(invalid(format!("dimension {} vs {}", a.dim(), b.dim())));
    }
    let eig_a = psd_eigen(&a.sigma, "first covariance")?;
    let root = eig_a.eigenvalues.map(f64::sqrt);
    let s = &eig_a.eigenvectors * DMatrix::from_diagonal(&root) * eig_a.eigenvectors.transpose();
    let product = &s * &b.sigma * &s;
    let eig = psd_eigen(&product, "covariance product")?;
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|l| l.sqrt()).sum();
    let diff = (&a.mu - &b.mu).norm_squared();
    let d = diff + a.sigma.trace() + b.sigma.trace() - 2.0 * tr_sqrt;
    if !d.is_finite() {
        return Err(invalid("non-finite Fréchet distance"));
    }
    Ok(d.max(0.0))
}

/// Bilinear resize of `[N, T, 3, H, W]` videos to `res × res`.
pub fn resize_videos<F: Real>(videos: &Tensor<F>, res: usize) -> Result<Tensor<f32>> {
    let &[n, t, c, h, w] = videos.shape() else {
        return Err(invalid(format!("expected [N, T, 3, H, W] videos, got {:?}", videos.shape())));
    };
    if c != 3 {
        return Err(invalid(format!("expected 3 channels, got {c}")));
    }
    let src: Tensor<f32> = videos.cast();
    if (h, w) == (res, res) {
        return Ok(src);
    }
    let mut out = Tensor::zeros(&[n, t, 3, res, res]);
    let plane = h * w;
    for f in 0..n * t {
        let frame = &src.data()[f * 3 * plane..(f + 1) * 3 * plane];
        let img: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let p = y as usize * w + x as usize;
            Rgb([frame[p], frame[plane + p], frame[2 * plane + p]])
        });
        let small = imageops::resize(&img, res as u32, res as u32, FilterType::Triangle);
        let dst = &mut out.data_mut()[f * 3 * res * res..(f + 1) * 3 * res * res];
        for (x, y, px) in small.enumerate_pixels() {
            let p = y as usize * res + x as usize;
            for ch in 0..3 {
                dst[ch * res * res + p] = px.0[ch];
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    /// Spatial input size; must be divisible by 8.
    pub res: usize,
    /// Frames per training clip. Any length works at inference.
    pub frames: usize,
    pub widths: [usize; 3],
    pub seed: u64,
    pub train_clips: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Skip training and embed with the random initialization.
    pub random_features: bool,
    pub data: SynthSpec,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            res: 16,
            frames: 8,
            widths: [16, 32, 32],
            seed: 17,
            train_clips: 2400,
            epochs: 8,
            batch: 30,
            lr: 3e-3,
            random_features: false,
            data: SynthSpec::default(),
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if self.res == 0 || self.res % 8 != 0 {
            return Err(Error::Config(format!("embedder resolution {} must be a positive multiple of 8", self.res)));
        }
        if self.frames == 0 || self.frames > self.data.frames {
            return Err(Error::Config(format!("embedder frames {} outside 1..={}", self.frames, self.data.frames)));
        }
        if self.widths.contains(&0) || self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("embedder widths, batch and lr must be positive".into()));
        }
        Ok(())
    }
}

/// Small 3-D convolutional clip classifier whose logits serve as the
/// embedding for FVD and the class posterior for IS.
pub struct Embedder {
    pub cfg: EmbedderConfig,
    pub params: Params<f32>,
    convs: Vec<Conv>,
    head: Linear,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbedderReport {
    pub steps: usize,
    pub final_loss: f64,
    /// Accuracy on a held-out synthetic split.
    pub accuracy: f64,
}

#[derive(Serialize, Deserialize)]
struct EmbedderMeta {
    kind: String,
    config: EmbedderConfig,
}

const EMBED_BATCH: usize = 64;

impl Embedder {
    pub fn new(cfg: EmbedderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0]));
        let mut init = Init::new(&mut params, &mut rng, "embedder", Group::Embedder);
        let mut cin = 3;
        let mut convs = Vec::new();
        for (i, &c) in cfg.widths.iter().enumerate() {
            convs.push(Conv::new(&mut init, &format!("conv{i}"), cin, c, 3, 3, false));
            cin = c;
        }
        let head = Linear::new(&mut init, "logits", cin, cfg.data.num_classes(), true, false);
        Ok(Embedder { cfg, params, convs, head })
    }

    pub fn classes(&self) -> usize {
        self.cfg.data.num_classes()
    }

    fn logits_var(&self, cx: &mut Cx<'_, f32>, x: vidpred_tensor::Var) -> Result<vidpred_tensor::Var> {
        let shape = cx.shape(x);
        let (b, t) = (shape[0], shape[1]);
        let mut h = cx.tape.permute(x, &[0, 2, 1, 3, 4])?;
        for conv in &self.convs {
            h = conv.forward(cx, h)?;
            h = cx.tape.relu(h);
            h = cx.tape.avg_pool2d(h, 2)?;
        }
        let s = cx.shape(h);
        let n = s[2] * s[3] * s[4];
        let flat = cx.tape.reshape(h, &[b, s[1], n])?;
        let pooled = cx.tape.sum_axis(flat, 2)?;
        let pooled = cx.tape.mul_scalar(pooled, 1.0 / n as f32);
        debug_assert!(t > 0);
        self.head.forward(cx, pooled)
    }

    /// Logits `[N, classes]` of videos `[N, T, 3, H, W]` in `[−1, 1]`.
    pub fn embed<F: Real>(&self, videos: &Tensor<F>) -> Result<Tensor<f32>> {
        let v = resize_videos(videos, self.cfg.res)?;
        let n = v.shape()[0];
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let len = EMBED_BATCH.min(n - start);
            let chunk = v.narrow(0, start, len)?;
            let mut cx = Cx::new(&self.params, Mode::Eval, None);
            let x = cx.constant(chunk);
            let y = self.logits_var(&mut cx, x)?;
            parts.push(cx.value(y).clone());
            start += len;
        }
        if parts.is_empty() {
            return Ok(Tensor::zeros(&[0, self.classes()]));
        }
        let refs: Vec<&Tensor<f32>> = parts.iter().collect();
        Ok(Tensor::concat(&refs, 0)?)
    }

    /// Builds the embedder and, unless `random_features` is set, trains it
    /// with softmax cross-entropy on a synthetic split generated from
    /// `cfg.seed`. The result is a pure function of `cfg`.
    pub fn train(cfg: EmbedderConfig) -> Result<(Self, EmbedderReport)> {
        let mut emb = Embedder::new(cfg)?;
        let cfg = emb.cfg.clone();
        if cfg.random_features {
            return Ok((
                emb,
                EmbedderReport {
                    steps: 0,
                    final_loss: f64::NAN,
                    accuracy: f64::NAN,
                },
            ));
        }
        let clips = synth_generate(&cfg.data, derive_seed(cfg.seed, &[1]), cfg.train_clips)?;
        let mut opt = Adam::new(cfg.lr, 0.9, 0.999, 1e-8);
        let mut steps = 0;
        let mut last = f64::NAN;
        let mut order: Vec<usize> = (0..clips.len()).collect();
        for epoch in 0..cfg.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2, epoch as u64]));
            order.shuffle(&mut rng);
            for idx in order.chunks(cfg.batch) {
                let x: Tensor<f32> = make_batch(&clips, idx, cfg.res, cfg.frames, &mut rng)?;
                let labels: Vec<usize> = idx.iter().map(|&i| clips[i].label as usize).collect();
                let mut cx = Cx::new(&emb.params, Mode::Train, Some(Group::Embedder));
                let xv = cx.constant(x);
                let logits = emb.logits_var(&mut cx, xv)?;
                let loss = cross_entropy(&mut cx, logits, &labels)?;
                last = cx.value(loss).item()? as f64;
                if !last.is_finite() {
                    return Err(Error::NonFinite {
                        step: steps as u64,
                        detail: "embedder loss".into(),
                    });
                }
                let grads = cx.gradients(loss)?;
                drop(cx);
                opt.step(&mut emb.params, &grads)?;
                steps += 1;
            }
        }
        let held = synth_generate(&cfg.data, derive_seed(cfg.seed, &[3]), 10 * cfg.data.num_classes())?;
        let accuracy = emb.accuracy(&held)?;
        Ok((
            emb,
            EmbedderReport {
                steps,
                final_loss: last,
                accuracy,
            },
        ))
    }

    /// Fraction of `clips` (first `frames` frames) classified correctly.
    pub fn accuracy(&self, clips: &[VideoClip]) -> Result<f64> {
        if clips.is_empty() {
            return Err(invalid("no clips to score"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let idx: Vec<usize> = (0..clips.len()).collect();
        let x: Tensor<f32> = make_batch(clips, &idx, self.cfg.res, self.cfg.frames, &mut rng)?;
        let logits = self.embed(&x)?;
        let k = self.classes();
        let hits = clips
            .iter()
            .enumerate()
            .filter(|(i, c)| {
                let row = &logits.data()[i * k..(i + 1) * k];
                argmax(row) == c.label as usize
            })
            .count();
        Ok(hits as f64 / clips.len() as f64)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = EmbedderMeta {
            kind: "embedder".into(),
            config: self.cfg.clone(),
        };
        let records: Vec<(String, &Tensor<f32>)> = self.params.entries().map(|(_, e)| (e.name.clone(), &e.value)).collect();
        write_bundle(dir, &meta, &records)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (meta, tensors): (EmbedderMeta, Vec<(String, Tensor<f32>)>) = read_bundle(dir)?;
        if meta.kind != "embedder" {
            return Err(Error::Format(format!("checkpoint holds a {}, not an embedder", meta.kind)));
        }
        let mut emb = Embedder::new(meta.config)?;
        if tensors.len() != emb.params.len() {
            return Err(Error::Format(format!("expected {} tensors, found {}", emb.params.len(), tensors.len())));
        }
        for (name, t) in tensors {
            let id = emb
                .params
                .find(&name)
                .ok_or_else(|| Error::Format(format!("unknown embedder tensor {name}")))?;
            emb.params.set(id, t)?;
        }
        Ok(emb)
    }
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Mean softmax cross-entropy, computed as `logsumexp(l) − l_y` after a
/// constant per-row shift.
fn cross_entropy(cx: &mut Cx<'_, f32>, logits: vidpred_tensor::Var, labels: &[usize]) -> Result<vidpred_tensor::Var> {
    let shape = cx.shape(logits);
    let (b, k) = (shape[0], shape[1]);
    let vals = cx.value(logits).clone();
    let mut shift = Tensor::zeros(&[b, k]);
    let mut onehot = Tensor::zeros(&[b, k]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(invalid(format!("label {y} outside {k} classes")));
        }
        let m = vals.data()[i * k..(i + 1) * k].iter().copied().fold(f32::NEG_INFINITY, f32::max);
        shift.data_mut()[i * k..(i + 1) * k].fill(m);
        onehot.data_mut()[i * k + y] = 1.0;
    }
    let shift = cx.constant(shift);
    let onehot = cx.constant(onehot);
    let centered = cx.tape.sub(logits, shift)?;
    let e = cx.tape.exp(centered);
    let z = cx.tape.sum_axis(e, 1)?;
    let lse = cx.tape.ln(z);
    let picked = cx.tape.mul(centered, onehot)?;
    let picked = cx.tape.sum_axis(picked, 1)?;
    let nll = cx.tape.sub(lse, picked)?;
    Ok(cx.tape.mean(nll))
}

/// Fréchet distance between embedder logits of two video sets.
pub fn fvd<F: Real>(real: &Tensor<F>, fake: &Tensor<F>, embedder: &Embedder) -> Result<f64> {
    let a = GaussianStats::from_rows(&embedder.embed(real)?)?;
    let b = GaussianStats::from_rows(&embedder.embed(fake)?)?;
    frechet_distance(&a, &b)
}

/// `exp(E_x KL(p(y|x) ‖ p(y)))` over softmaxed rows of `logits` `[N, K]`.
pub fn inception_score<F: Real>(logits: &Tensor<F>) -> Result<f64> {
    let &[n, k] = logits.shape() else {
        return Err(invalid(format!("expected [N, K] logits, got {:?}", logits.shape())));
    };
    if n == 0 || k == 0 {
        return Err(invalid("inception score of an empty set"));
    }
    let probs: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let row: Vec<f64> = logits.data()[i * k..(i + 1) * k]
                .iter()
                .map(|v| v.to_f64().unwrap_or(f64::NAN))
                .collect();
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect();
    let mut marginal = vec![0.0; k];
    for p in &probs {
        for (m, v) in marginal.iter_mut().zip(p) {
            *m += v / n as f64;
        }
    }
    let mut kl = 0.0;
    for p in &probs {
        for (v, m) in p.iter().zip(&marginal) {
            if *v > 0.0 {
                kl += v * (v.ln() - m.ln());
            }
        }
    }
    let score = (kl / n as f64).exp();
    if !score.is_finite() {
        return Err(invalid("non-finite inception score"));
    }
    Ok(score)
}

pub fn inception_score_videos<F: Real>(videos: &Tensor<F>, embedder: &Embedder) -> Result<f64> {
    inception_score(&embedder.embed(videos)?)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Dynamic range of `[−1, 1]` data.
pub const DATA_RANGE: f64 = 2.0;

/// Normalized 1-D Gaussian taps; images smaller than the window use the
/// largest odd size that fits.
pub fn ssim_taps(h: usize, w: usize) -> Vec<f64> {
    let mut n = SSIM_WINDOW.min(h).min(w);
    if n % 2 == 0 {
        n -= 1;
    }
    let r = (n / 2) as f64;
    let raw: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn to_planes<F: Real>(x: &Tensor<F>) -> Result<(usize, usize, usize, Vec<f64>)> {
    let r = x.rank();
    if r < 2 {
        return Err(invalid(format!("image needs rank >= 2, got {:?}", x.shape())));
    }
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    let planes = x.numel() / (h * w).max(1);
    Ok((planes, h, w, x.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()))
}

/// Mean SSIM over all valid window positions and all leading planes.
pub fn ssim<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<f64> {
    a.expect_same_shape(b)?;
    let (planes, h, w, xa) = to_planes(a)?;
    let (_, _, _, xb) = to_planes(b)?;
    if h == 0 || w == 0 {
        return Err(invalid("empty image"));
    }
    let taps = ssim_taps(h, w);
    let n = taps.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let c1 = (SSIM_K1 * DATA_RANGE).powi(2);
    let c2 = (SSIM_K2 * DATA_RANGE).powi(2);
    // Separable filtering: rows first, then columns.
    let blur = |src: &[f64]| -> Vec<f64> {
        let mut tmp = vec![0.0; h * ow];
        for i in 0..h {
            for j in 0..ow {
                tmp[i * ow + j] = taps.iter().enumerate().map(|(t, g)| g * src[i * w + j + t]).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                out[i * ow + j] = taps.iter().enumerate().map(|(t, g)| g * tmp[(i + t) * ow + j]).sum();
            }
        }
        out
    };
    let mut total = 0.0;
    for p in 0..planes {
        let pa = &xa[p * h * w..(p + 1) * h * w];
        let pb = &xb[p * h * w..(p + 1) * h * w];
        let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { pa.iter().zip(pb).map(|(&x, &y)| f(x, y)).collect() };
        let ma = blur(pa);
        let mb = blur(pb);
        let saa = blur(&prod(&|x, _| x * x));
        let sbb = blur(&prod(&|_, y| y * y));
        let sab = blur(&prod(&|x, y| x * y));
        let mut acc = 0.0;
        for q in 0..oh * ow {
            let (mx, my) = (ma[q], mb[q]);
            let vx = saa[q] - mx * mx;
            let vy = sbb[q] - my * my;
            let cxy = sab[q] - mx * my;
            acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / planes as f64)
}

/// Peak signal-to-noise ratio in dB for range-2 data; identical inputs give
/// `f64::INFINITY`.
pub fn psnr<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<f64> {
    a.expect_same_shape(b)?;
    if a.numel() == 0 {
        return Err(invalid("empty image"));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x - *y).to_f64().unwrap_or(f64::NAN).powi(2))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (DATA_RANGE * DATA_RANGE / mse).log10())
}

/// Per-frame SSIM between two `[T, 3, H, W]` sequences.
pub fn ssim_curve<F: Real>(pred: &Tensor<F>, truth: &Tensor<F>) -> Result<Vec<f64>> {
    pred.expect_same_shape(truth)?;
    let t = *pred.shape().first().ok_or_else(|| invalid("sequence has no time axis"))?;
    (0..t)
        .map(|i| ssim(&pred.narrow(0, i, 1)?, &truth.narrow(0, i, 1)?))
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Index of the curve with the largest mean (first on ties).
pub fn select_best(curves: &[Vec<f64>]) -> Option<usize> {
    curves
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, c)| {
            let m = mean(c);
            match best {
                Some((_, bm)) if bm >= m => best,
                _ => Some((i, m)),
            }
        })
        .map(|(i, _)| i)
}

/// Draws samples `0..l` from `sample` (a `[T_out, 3, H, W]` continuation per
/// index), scores each against `truth` and returns the per-frame SSIM curve of
/// the one with the highest average.
pub fn best_of_l_ssim<F: Real>(
    mut sample: impl FnMut(usize) -> Result<Tensor<F>>,
    truth: &Tensor<F>,
    l: usize,
) -> Result<Vec<f64>> {
    if l == 0 {
        return Err(invalid("best-of-l needs l >= 1"));
    }
    let curves = (0..l)
        .map(|i| ssim_curve(&sample(i)?, truth))
        .collect::<Result<Vec<_>>>()?;
    let best = select_best(&curves).unwrap_or(0);
    Ok(curves.into_iter().nth(best).unwrap_or_default())
}

/// Latents for sample `i` drawn from their own stream so that the first `l`
/// samples of any larger request are the same.
pub fn nested_latents<F: Real>(count: usize, dim: usize, seed: u64, truncation: Option<f64>) -> Result<Tensor<F>> {
    let rows = (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
            sample_latents::<F, _>(1, dim, truncation, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<F>> = rows.iter().collect();
    if refs.is_empty() {
        return Ok(Tensor::zeros(&[0, dim]));
    }
    Ok(Tensor::concat(&refs, 0)?)
}

/// `l` continuations `[l, T_out, 3, H, W]` of one conditioning clip
/// `[1, T_c, 3, H, W]`, sample `i` using [`nested_latents`] row `i`.
pub fn generate_samples<F: Real>(
    model: &Model<F>,
    params: &Params<F>,
    cond: &Tensor<F>,
    l: usize,
    seed: u64,
    truncation: Option<f64>,
) -> Result<Tensor<F>> {
    let s = cond.shape();
    if s.len() != 5 || s[0] != 1 {
        return Err(invalid(format!("expected one conditioning clip [1, T, 3, H, W], got {s:?}")));
    }
    let z = nested_latents(l, model.gen.cfg.latent, seed, truncation)?;
    let cond = cond.index_select(0, &vec![0; l])?;
    model.generate(params, &cond, &z, Mode::Eval)
}

/// Repeats the last conditioning frame `t_out` times.
pub fn copy_baseline<F: Real>(cond: &Tensor<F>, t_out: usize) -> Result<Tensor<F>> {
    let t = *cond.shape().get(1).ok_or_else(|| invalid("conditioning has no time axis"))?;
    if t == 0 || t_out == 0 {
        return Err(invalid("copy baseline needs a frame to copy and a positive horizon"));
    }
    Ok(cond.index_select(1, &vec![t - 1; t_out])?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub decomposition: String,
    pub mean_step_ms: f64,
    pub steps: usize,
    pub pixel_count: u64,
    pub params_g: usize,
    pub params_d: usize,
}

/// Runs full training steps for at least `budget` (and at least
/// `min_steps`) after one untimed warm-up step.
pub fn bench_step<F: Real>(cfg: &TrainConfig, clips: &[VideoClip], budget: Duration, min_steps: usize) -> Result<BenchReport> {
    let mut tr = Trainer::<F>::new(cfg.clone())?;
    let warm = tr.batch_for_step(clips, 0)?;
    tr.train_step(&warm)?;
    let mut steps = 0;
    let mut spent = Duration::ZERO;
    while spent < budget || steps < min_steps.max(1) {
        let batch = tr.batch_for_step(clips, tr.step)?;
        let t0 = Instant::now();
        tr.train_step(&batch)?;
        spent += t0.elapsed();
        steps += 1;
    }
    let dec = cfg.decomposition()?;
    let g = &cfg.generator;
    let res = g.resolution() as u64;
    Ok(BenchReport {
        decomposition: cfg.decomposition.clone(),
        mean_step_ms: spent.as_secs_f64() * 1e3 / steps as f64,
        steps,
        pixel_count: pixel_count(&dec.views, dec.k as u64, g.frames() as u64, res, res, dec.s as u64),
        params_g: count_values(&tr.model.params, Group::Generator),
        params_d: count_values(&tr.model.params, Group::Discriminator),
    })
}

/// Number of trainable scalars in `group`.
pub fn count_values<F: Real>(params: &Params<F>, group: Group) -> usize {
    params.trainable(group).iter().map(|&id| params.get(id).numel()).sum()
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fvd: Option<f64>,
    pub is: Option<f64>,
    pub ssim_curves: BTreeMap<String, Vec<f64>>,
    pub pixel_counts: BTreeMap<String, u64>,
    pub bench: Vec<BenchReport>,
}
